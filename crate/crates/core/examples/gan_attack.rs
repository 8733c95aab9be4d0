//! Trains (or loads) the reference skipping model, trains a perturbation
//! generator against it and reports the FLOPs increase on held-out seeds.
//!
//! `cargo run --release -p adaperf --example gan_attack -- [linf|l2] [epsilon] [epochs] [learning_rate] [train_count]`

use std::path::Path;

use adaperf::adnn::{build_skip_model, train_adnn, AdnnModel, AdnnSpec, AdnnTrainConfig, Mechanism};
use adaperf::dataset::{ingest_dataset, DatasetSource};
use adaperf::gan::{generate, train_generator, GanTrainConfig, PerturbationBudget};

fn main() -> adaperf::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let norm = args.first().map_or("linf", String::as_str);
    let epsilon: f32 = args.get(1).map_or(0.03, |a| a.parse().expect("epsilon"));
    let epochs: usize = args.get(2).map_or(10, |a| a.parse().expect("epochs"));
    let lr: f32 = args.get(3).map_or(1e-4, |a| a.parse().expect("learning rate"));
    let train_count: usize = args.get(4).map_or(1000, |a| a.parse().expect("train count"));

    let split = ingest_dataset(&DatasetSource::synthetic(10, 2000, 400, 7))?;
    let spec = AdnnSpec::reference(Mechanism::ConditionalSkipping);
    let ckpt = std::env::temp_dir().join("adaperf_example_adnn.ckpt");
    let model = if Path::new(&ckpt).exists() {
        AdnnModel::load(&ckpt, Some(&spec))?
    } else {
        let cfg = AdnnTrainConfig::default();
        let (m, report) = train_adnn(build_skip_model(&spec, 1)?, &split.train, &split.test, &cfg)?;
        println!("adnn accuracy {:.3}, mean activation {:.3}", report.accuracy, report.mean_activation);
        m.save(&ckpt)?;
        m
    };

    let budget = match norm {
        "l2" => PerturbationBudget::l2(epsilon)?,
        _ => PerturbationBudget::linf(epsilon)?,
    };
    let mut cfg = GanTrainConfig::new(budget);
    cfg.max_epochs = epochs;
    cfg.learning_rate = lr;
    let (gen, _, history) = train_generator(&model, &split.train.take(train_count), &cfg)?;
    for r in &history.rows {
        println!(
            "epoch {:>2}  gan {:.4}  adv {:.4}  per {:.4}  val {:.4}  {:.0}s",
            r.epoch, r.l_gan, r.l_adv, r.l_per, r.val_objective, r.wall_clock_s
        );
    }
    let ids: Vec<usize> = (0..200).collect();
    let suite = generate(&gen, &model, &split.test, &ids)?;
    let incs: Vec<f64> = suite
        .entries
        .iter()
        .map(|e| (e.generated_cost - e.seed_cost) / e.seed_cost * 100.0)
        .collect();
    let mean = incs.iter().sum::<f64>() / incs.len() as f64;
    let max = incs.iter().cloned().fold(f64::MIN, f64::max);
    let eta = suite.entries.iter().filter(|e| e.generated_cost > e.seed_cost).count();
    println!("I-FLOPs mean {mean:.2}%  max {max:.2}%  eta {eta}/200  violations {}", suite.budget_violations());
    Ok(())
}
