use std::time::Instant;

use crate::adnn::AdnnModel;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::eval::{Producer, SuiteEntry, TestSuite};

use super::networks::Generator;

/// One generator pass plus projection per seed. The recorded time covers
/// generation only; traces are measured afterwards.
pub fn generate(generator: &Generator, model: &AdnnModel, seeds: &Dataset, seed_ids: &[usize]) -> Result<TestSuite> {
    if generator.spec().input_shape != model.spec().input_shape {
        return Err(Error::Shape(format!(
            "generator input {:?} does not match model input {:?}",
            generator.spec().input_shape,
            model.spec().input_shape
        )));
    }
    let mut suite = TestSuite::new(Producer::Deepperform, *generator.budget(), model.spec().hash());
    for &id in seed_ids {
        if id >= seeds.len() {
            return Err(Error::Invalid(format!("seed id {id} out of range for {} seeds", seeds.len())));
        }
        let seed = seeds.images.item(id);
        let start = Instant::now();
        let generated = generator.generate(&seed)?;
        let elapsed = start.elapsed().as_secs_f64();
        let shape = model.spec().input_shape;
        suite.entries.push(SuiteEntry::measure(
            model,
            id,
            Some(seeds.labels[id]),
            seed.reshape(&shape)?,
            generated.reshape(&shape)?,
            elapsed,
        )?);
    }
    Ok(suite)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adnn::{build_skip_model, AdnnSpec, Mechanism};
    use crate::dataset::synthetic;
    use crate::flops::hard_cost;
    use crate::gan::{GeneratorSpec, PerturbationBudget};

    #[test]
    fn suite_is_valid_and_deterministic() {
        let spec = AdnnSpec::reference(Mechanism::ConditionalSkipping);
        let model = build_skip_model(&spec, 1).unwrap();
        let gen = Generator::new(GeneratorSpec::for_input([3, 32, 32]), PerturbationBudget::l2(10.0).unwrap(), 4).unwrap();
        let data = synthetic(10, [3, 32, 32], 6, 2).unwrap();
        let a = generate(&gen, &model, &data, &[0, 2, 5]).unwrap();
        let b = generate(&gen, &model, &data, &[0, 2, 5]).unwrap();
        assert_eq!(a.len(), 3);
        a.validate(&model.cost_profile()).unwrap();
        for (x, y) in a.entries.iter().zip(&b.entries) {
            assert!(x.generated.bit_eq(&y.generated));
            assert!(x.generated_trace.bit_eq(&y.generated_trace));
            assert_eq!(x.generated_cost, hard_cost(&x.generated_trace, &model.cost_profile()).unwrap());
        }
        assert_eq!(a.entries[1].label, Some(data.labels[2]));
        assert!(generate(&gen, &model, &data, &[6]).is_err());
    }
}
