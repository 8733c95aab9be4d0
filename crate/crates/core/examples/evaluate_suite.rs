//! Builds a GAN suite and a small baseline suite for the reference model, then
//! prints the comparison table and writes the full report.
//!
//! `cargo run --release -p adaperf --example evaluate_suite -- [out_dir] [seeds]`

mod common;

use std::path::PathBuf;

use adaperf::baseline::{baseline_suite, IterConfig};
use adaperf::eval::{efficiency_distribution, i_latency, MetricsReport, MIN_REPEATS};
use adaperf::gan::generate;
use adaperf::pipeline::{write_report, MeasuredSuite, ReportInputs};

fn main() -> adaperf::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let out = args.first().map_or_else(|| std::env::temp_dir().join("adaperf_report"), PathBuf::from);
    let n: usize = args.get(1).map_or(100, |a| a.parse().expect("seeds"));

    let split = common::data()?;
    let model = common::model(&split)?;
    let gen = common::generator(&split, &model)?;
    let ids: Vec<usize> = (0..n).collect();
    let gan = generate(&gen, &model, &split.test, &ids)?;

    let mut cfg = IterConfig::new(*gen.budget());
    cfg.max_iterations = 50;
    let base = baseline_suite(&model, &split.test, &ids[..5.min(n)], &cfg, None)?;

    let latency = gan
        .entries
        .iter()
        .take(10)
        .map(|e| i_latency(&model, e, MIN_REPEATS))
        .collect::<adaperf::Result<Vec<_>>>()?;
    let rows = [MetricsReport::from_suite(&gan, Some(&latency))?, MetricsReport::from_suite(&base, None)?];
    print!("{}", MetricsReport::to_csv(&rows));

    let d = efficiency_distribution(&gan, 10)?;
    println!("seed mean FLOPs {:.0}, generated mean FLOPs {:.0}", d.seed_mean, d.generated_mean);
    for (i, (s, g)) in d.seed_counts.iter().zip(&d.generated_counts).enumerate() {
        println!("[{:>9.0}, {:>9.0})  seeds {s:>4}  generated {g:>4}", d.edges[i], d.edges[i + 1]);
    }

    let inputs = ReportInputs {
        suites: vec![
            MeasuredSuite {
                suite: gan,
                latency: Some(latency),
            },
            MeasuredSuite {
                suite: base,
                latency: None,
            },
        ],
        sweep: None,
        overhead: None,
        distribution_bins: 20,
    };
    for f in write_report(&out, &inputs)? {
        println!("wrote {}", f.display());
    }
    Ok(())
}
