//! Re-evaluates a generated suite under uniform thresholds other than the one
//! the generator was trained against.
//!
//! `cargo run --release -p adaperf --example threshold_sweep -- [seeds]`

mod common;

use adaperf::eval::{threshold_sweep, DEFAULT_TAUS};
use adaperf::gan::generate;

fn main() -> adaperf::Result<()> {
    let n: usize = std::env::args().nth(1).map_or(200, |a| a.parse().expect("seeds"));
    let split = common::data()?;
    let model = common::model(&split)?;
    let gen = common::generator(&split, &model)?;
    let ids: Vec<usize> = (0..n).collect();
    let suite = generate(&gen, &model, &split.test, &ids)?;
    println!("tau   mean I-FLOPs   max I-FLOPs   eta");
    for r in threshold_sweep(&model, &suite, &DEFAULT_TAUS)? {
        println!("{:.1}   {:>10.2}%   {:>10.2}%   {:>3}/{n}", r.tau, r.mean_i_flops, r.max_i_flops, r.eta);
    }
    Ok(())
}
