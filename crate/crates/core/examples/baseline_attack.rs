//! Runs the iterative baseline against the reference skipping model trained by
//! the `gan_attack` example (or a fresh one) and reports per-sample cost and time.
//!
//! `cargo run --release -p adaperf --example baseline_attack -- [linf|l2] [epsilon] [iterations] [seeds]`

use adaperf::adnn::{build_skip_model, train_adnn, AdnnModel, AdnnSpec, AdnnTrainConfig, Mechanism};
use adaperf::baseline::{baseline_suite, IterConfig};
use adaperf::dataset::{ingest_dataset, DatasetSource};
use adaperf::gan::PerturbationBudget;

fn main() -> adaperf::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let norm = args.first().map_or("linf", String::as_str);
    let epsilon: f32 = args.get(1).map_or(0.03, |a| a.parse().expect("epsilon"));
    let iterations: usize = args.get(2).map_or(300, |a| a.parse().expect("iterations"));
    let n_seeds: usize = args.get(3).map_or(10, |a| a.parse().expect("seeds"));

    let split = ingest_dataset(&DatasetSource::synthetic(10, 2000, 400, 7))?;
    let spec = AdnnSpec::reference(Mechanism::ConditionalSkipping);
    let ckpt = std::env::temp_dir().join("adaperf_example_adnn.ckpt");
    let model = match AdnnModel::load(&ckpt, Some(&spec)) {
        Ok(m) => m,
        Err(_) => {
            let (m, _) = train_adnn(build_skip_model(&spec, 1)?, &split.train, &split.test, &AdnnTrainConfig::default())?;
            m.save(&ckpt)?;
            m
        }
    };
    let budget = match norm {
        "l2" => PerturbationBudget::l2(epsilon)?,
        _ => PerturbationBudget::linf(epsilon)?,
    };
    let mut cfg = IterConfig::new(budget);
    cfg.max_iterations = iterations;
    let ids: Vec<usize> = (0..n_seeds).collect();
    let suite = baseline_suite(&model, &split.test, &ids, &cfg, None)?;
    let mut total = 0.0;
    for e in &suite.entries {
        let inc = (e.generated_cost - e.seed_cost) / e.seed_cost * 100.0;
        total += inc;
        println!(
            "seed {:>3}: blocks {} -> {}  I-FLOPs {:>6.2}%  {:.2}s",
            e.seed_id,
            e.seed_trace.num_activated(),
            e.generated_trace.num_activated(),
            inc,
            e.gen_time_seconds
        );
    }
    println!("mean I-FLOPs {:.2}%", total / suite.len() as f64);
    Ok(())
}
