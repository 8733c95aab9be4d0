//! Both defenses against generated inputs: retraining the model on them and a
//! linear filter over first-stage features.
//!
//! `cargo run --release -p adaperf --example mitigation -- [train_seeds] [heldout_seeds]`

mod common;

use adaperf::eval::{i_flops, TestSuite};
use adaperf::gan::{generate, train_generator};
use adaperf::mitigation::{evaluate_detector, retrain_adnn, train_detector_on_suite, DetectorConfig, RetrainConfig};

fn mean_i_flops(suite: &TestSuite) -> adaperf::Result<f64> {
    let v = suite.entries.iter().map(i_flops).collect::<adaperf::Result<Vec<_>>>()?;
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

fn main() -> adaperf::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse().expect("count")).collect();
    let n_train = args.first().copied().unwrap_or(500);
    let n_held = args.get(1).copied().unwrap_or(200);

    let split = common::data()?;
    let model = common::model(&split)?;
    let gen = common::generator(&split, &model)?;
    let train_ids: Vec<usize> = (split.train.len() - n_train..split.train.len()).collect();
    let held_ids: Vec<usize> = (0..n_held).collect();
    let attack = generate(&gen, &model, &split.train, &train_ids)?;
    let heldout = generate(&gen, &model, &split.test, &held_ids)?;

    let det = train_detector_on_suite(&model, &attack, &DetectorConfig::default())?;
    let ev = evaluate_detector(&det, &model, &heldout, 10)?;
    println!(
        "detector: AUC {:.3}, accuracy {:.3}, overhead {:.1}% of inference",
        ev.auc,
        ev.accuracy,
        ev.overhead_fraction * 100.0
    );

    let (retrained, report) = retrain_adnn(&model, &attack, &split.test, &RetrainConfig::default())?;
    println!(
        "retrain: accuracy {:.3} -> {:.3}, suite I-FLOPs {:.2}% -> {:.2}%",
        report.accuracy_before, report.accuracy_after, report.suite_i_flops_before, report.suite_i_flops_after
    );
    let (regen, _, _) = train_generator(&retrained, &split.train.take(1000), &common::gan_config())?;
    println!(
        "fresh attack: mean I-FLOPs {:.2}% before retraining, {:.2}% after",
        mean_i_flops(&heldout)?,
        mean_i_flops(&generate(&regen, &retrained, &split.test, &held_ids)?)?
    );
    Ok(())
}
