//! Trains the reference conditional-skipping model on synthetic gratings and
//! reports accuracy and how many blocks typical inputs execute.
//!
//! `cargo run --release -p adaperf --example train_reference -- [epochs] [train_count] [sparsity_weight]`

use std::time::Instant;

use adaperf::adnn::{build_skip_model, train_adnn, AdnnSpec, AdnnTrainConfig, Mechanism};
use adaperf::dataset::{ingest_dataset, DatasetSource};

fn main() -> adaperf::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs = args.next().map_or(8, |a| a.parse().expect("epochs"));
    let train_count = args.next().map_or(2000, |a| a.parse().expect("train_count"));
    let sparsity_weight = args.next().map_or(0.1, |a| a.parse().expect("sparsity_weight"));
    let split = ingest_dataset(&DatasetSource::synthetic(10, train_count, 500, 7))?;
    let spec = AdnnSpec::reference(Mechanism::ConditionalSkipping);
    let model = build_skip_model(&spec, 1)?;
    let cfg = AdnnTrainConfig {
        epochs,
        sparsity_weight,
        ..Default::default()
    };
    let start = Instant::now();
    let (model, report) = train_adnn(model, &split.train, &split.test, &cfg)?;
    for e in &report.history {
        println!("epoch {:>2}  task {:.4}  cost {:.4}", e.epoch, e.task_loss, e.cost_loss);
    }
    println!(
        "accuracy {:.3}  mean activation {:.3}  ({:.1}s)",
        report.accuracy,
        report.mean_activation,
        start.elapsed().as_secs_f64()
    );
    let mut per_block = vec![0usize; model.num_blocks()];
    let mut scores = vec![Vec::new(); model.num_blocks()];
    for i in 0..split.test.len() {
        let t = model.forward_with_trace(&split.test.images.item(i))?;
        for (b, a) in t.activated.iter().enumerate() {
            per_block[b] += usize::from(*a);
            scores[b].push(t.gate_scores[b]);
        }
    }
    for (b, s) in scores.iter_mut().enumerate() {
        s.sort_by(f32::total_cmp);
        println!(
            "block {b}: active {:>4}/{}  score p10 {:.3} p50 {:.3} p90 {:.3}",
            per_block[b],
            split.test.len(),
            s[s.len() / 10],
            s[s.len() / 2],
            s[9 * s.len() / 10]
        );
    }
    Ok(())
}
