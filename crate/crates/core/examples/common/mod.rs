//! Reference subject shared by the examples, cached under the temp dir.

use adaperf::adnn::{build_skip_model, train_adnn, AdnnModel, AdnnSpec, AdnnTrainConfig, Mechanism};
use adaperf::dataset::{ingest_dataset, DatasetSource, DatasetSplit};
use adaperf::gan::{train_generator, GanTrainConfig, Generator, PerturbationBudget};

pub fn data() -> adaperf::Result<DatasetSplit> {
    ingest_dataset(&DatasetSource::synthetic(10, 2000, 400, 7))
}

pub fn model(split: &DatasetSplit) -> adaperf::Result<AdnnModel> {
    let spec = AdnnSpec::reference(Mechanism::ConditionalSkipping);
    let ckpt = std::env::temp_dir().join("adaperf_example_adnn.ckpt");
    if let Ok(m) = AdnnModel::load(&ckpt, Some(&spec)) {
        return Ok(m);
    }
    println!("training the reference model (cached at {})", ckpt.display());
    let (m, _) = train_adnn(build_skip_model(&spec, 1)?, &split.train, &split.test, &AdnnTrainConfig::default())?;
    m.save(&ckpt)?;
    Ok(m)
}

pub fn gan_config() -> GanTrainConfig {
    let mut cfg = GanTrainConfig::new(PerturbationBudget::linf(0.03).expect("positive radius"));
    cfg.max_epochs = 10;
    cfg.learning_rate = 1e-3;
    cfg
}

pub fn generator(split: &DatasetSplit, model: &AdnnModel) -> adaperf::Result<Generator> {
    let ckpt = std::env::temp_dir().join("adaperf_example_generator.ckpt");
    let hash = model.spec().hash();
    if let Ok((g, meta)) = Generator::load(&ckpt) {
        if meta.target_hash == hash {
            return Ok(g);
        }
    }
    println!("training a generator (cached at {})", ckpt.display());
    let (g, _, _) = train_generator(model, &split.train.take(1000), &gan_config())?;
    g.save(&ckpt, &hash, None)?;
    Ok(g)
}
