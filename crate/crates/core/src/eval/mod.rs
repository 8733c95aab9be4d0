//! Measurement: degradation metrics, coverage, correlation, distributions,
//! threshold sweeps, overheads and report emission.

mod metrics;
pub(crate) mod suite;

pub use metrics::{
    block_coverage, coverage_raw, degradation_success, efficiency_distribution, forward_latency, i_flops, i_latency,
    increase_percent, median_of, overhead_report, pcc, recomputed_costs, threshold_sweep, Distribution, LatencyMeasurement,
    LatencySamples, MetricsReport, OverheadReport, SweepRow, DEFAULT_TAUS, MIN_REPEATS, REPORT_COLUMNS,
    UNRELIABLE_SPREAD,
};
pub use suite::{Producer, SuiteEntry, TestSuite, GENERATED_FILE, MANIFEST_FILE, SEEDS_FILE};
