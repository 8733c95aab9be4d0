//! Early-termination subject: trains a small early-exit model, attacks it with
//! the generator and shows how the exit distribution shifts.
//!
//! `cargo run --release -p adaperf --example early_exit -- [epochs] [gan_epochs]`

use adaperf::adnn::{build_early_exit_model, train_adnn, AdnnSpec, AdnnTrainConfig, Mechanism};
use adaperf::dataset::{ingest_dataset, DatasetSource};
use adaperf::eval::{degradation_success, i_flops};
use adaperf::gan::{generate, train_generator, GanTrainConfig, PerturbationBudget};

fn main() -> adaperf::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs = args.next().map_or(6, |a| a.parse().expect("epochs"));
    let gan_epochs = args.next().map_or(5, |a| a.parse().expect("gan_epochs"));

    let split = ingest_dataset(&DatasetSource::synthetic(10, 1000, 200, 11))?;
    let spec = AdnnSpec::reference(Mechanism::EarlyTermination);
    let cfg = AdnnTrainConfig {
        epochs,
        ..Default::default()
    };
    let (model, report) = train_adnn(build_early_exit_model(&spec, 2)?, &split.train, &split.test, &cfg)?;
    println!("accuracy {:.3}, mean activation {:.3}", report.accuracy, report.mean_activation);

    let mut gcfg = GanTrainConfig::new(PerturbationBudget::linf(0.03)?);
    gcfg.max_epochs = gan_epochs;
    gcfg.learning_rate = 1e-3;
    let (gen, _, _) = train_generator(&model, &split.train, &gcfg)?;
    let ids: Vec<usize> = (0..split.test.len()).collect();
    let suite = generate(&gen, &model, &split.test, &ids)?;

    let n = model.num_blocks();
    let mut exits = vec![[0usize; 2]; n];
    for e in &suite.entries {
        exits[e.seed_trace.exit_index.unwrap_or(n - 1)][0] += 1;
        exits[e.generated_trace.exit_index.unwrap_or(n - 1)][1] += 1;
    }
    for (i, [s, g]) in exits.iter().enumerate() {
        println!("exit {i}: seeds {s:>4}  generated {g:>4}");
    }
    let inc = suite.entries.iter().map(i_flops).collect::<adaperf::Result<Vec<_>>>()?;
    println!(
        "mean I-FLOPs {:.2}%, eta {}/{}",
        inc.iter().sum::<f64>() / inc.len() as f64,
        degradation_success(&suite),
        suite.len()
    );
    Ok(())
}
