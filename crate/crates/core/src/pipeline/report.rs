use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use crate::error::{Error, Result};
use crate::eval::{efficiency_distribution, LatencyMeasurement, MetricsReport, OverheadReport, SweepRow, TestSuite};

/// Per-suite latency measurements live next to the suite arrays.
pub const LATENCY_FILE: &str = "latency.json";

pub const METRICS_CSV: &str = "metrics.csv";
pub const METRICS_JSON: &str = "metrics.json";
pub const SCHEMA_FILE: &str = "metrics_schema.md";
pub const SWEEP_CSV: &str = "threshold_sweep.csv";
pub const OVERHEAD_CSV: &str = "overhead.csv";

/// A suite with its persisted latency measurements, if any.
#[derive(Debug, Clone)]
pub struct MeasuredSuite {
    pub suite: TestSuite,
    pub latency: Option<Vec<LatencyMeasurement>>,
}

impl MeasuredSuite {
    pub fn load(dir: &Path) -> Result<Self> {
        let suite = TestSuite::load(dir)?;
        let lpath = dir.join(LATENCY_FILE);
        let latency = if lpath.exists() { Some(serde_json::from_slice(&fs::read(lpath)?)?) } else { None };
        Ok(Self { suite, latency })
    }

    pub fn save_latency(dir: &Path, latency: &[LatencyMeasurement]) -> Result<()> {
        fs::write(dir.join(LATENCY_FILE), serde_json::to_vec_pretty(latency)?)?;
        Ok(())
    }
}

/// Everything a report is computed from.
#[derive(Debug, Clone, Default)]
pub struct ReportInputs {
    pub suites: Vec<MeasuredSuite>,
    pub sweep: Option<Vec<SweepRow>>,
    pub overhead: Option<OverheadReport>,
    pub distribution_bins: usize,
}

fn stamped(body: &str) -> String {
    let now = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    format!("# generated_unix_s={now}\n{body}")
}

/// Writes the comparison table (CSV and JSON), its schema and plot data.
/// Apart from the first line of each CSV the output depends on `inputs` only.
pub fn write_report(out_dir: &Path, inputs: &ReportInputs) -> Result<Vec<PathBuf>> {
    if inputs.suites.is_empty() {
        return Err(Error::Empty("no suites to report".into()));
    }
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    let mut put = |name: String, body: String| -> Result<()> {
        let p = out_dir.join(name);
        fs::write(&p, body)?;
        written.push(p);
        Ok(())
    };
    let reports = inputs
        .suites
        .iter()
        .map(|m| MetricsReport::from_suite(&m.suite, m.latency.as_deref()))
        .collect::<Result<Vec<_>>>()?;
    put(METRICS_CSV.into(), stamped(&MetricsReport::to_csv(&reports)))?;
    put(METRICS_JSON.into(), serde_json::to_string_pretty(&reports)?)?;
    put(SCHEMA_FILE.into(), MetricsReport::schema_markdown())?;
    let bins = inputs.distribution_bins.max(1);
    for m in &inputs.suites {
        let d = efficiency_distribution(&m.suite, bins)?;
        put(format!("distribution_{}.csv", m.suite.producer.as_str()), stamped(&d.to_csv()))?;
    }
    if let Some(rows) = &inputs.sweep {
        let mut body = String::from("tau,mean_i_flops,max_i_flops,eta\n");
        for r in rows {
            body.push_str(&format!("{},{},{},{}\n", r.tau, r.mean_i_flops, r.max_i_flops, r.eta));
        }
        put(SWEEP_CSV.into(), stamped(&body))?;
    }
    if let Some(o) = &inputs.overhead {
        put(OVERHEAD_CSV.into(), stamped(&o.to_csv()))?;
        put("overhead.json".into(), serde_json::to_string_pretty(o)?)?;
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::REPORT_COLUMNS;

    fn suite() -> TestSuite {
        use crate::eval::suite::tests::{entry, suite};
        suite(vec![entry(0, [true, false, false], [true, true, false]), entry(1, [false; 3], [false, false, true])])
    }

    fn strip(text: &str) -> String {
        text.lines().skip(1).collect::<Vec<_>>().join("\n")
    }

    #[test]
    fn reports_are_pure_functions_of_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let inputs = ReportInputs {
            suites: vec![MeasuredSuite {
                suite: suite(),
                latency: None,
            }],
            sweep: None,
            overhead: None,
            distribution_bins: 4,
        };
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        write_report(&a, &inputs).unwrap();
        write_report(&b, &inputs).unwrap();
        let ca = fs::read_to_string(a.join(METRICS_CSV)).unwrap();
        let cb = fs::read_to_string(b.join(METRICS_CSV)).unwrap();
        assert!(ca.starts_with("# generated_unix_s="));
        assert_eq!(strip(&ca), strip(&cb));
        assert_eq!(ca.lines().nth(1).unwrap().split(',').count(), REPORT_COLUMNS.len());
        assert_eq!(fs::read(a.join(METRICS_JSON)).unwrap(), fs::read(b.join(METRICS_JSON)).unwrap());
        assert!(fs::read_to_string(a.join(SCHEMA_FILE)).unwrap().contains("| eta |"));
        assert!(a.join("distribution_deepperform.csv").exists());
        assert!(write_report(&a, &ReportInputs::default()).is_err());
    }
}
