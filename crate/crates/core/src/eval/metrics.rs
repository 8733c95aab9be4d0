use std::time::Instant;

use adaperf_autograd::Tensor;
use serde::{Deserialize, Serialize};

use crate::adnn::AdnnModel;
use crate::error::{Error, Result};
use crate::flops::hard_cost;
use crate::gan::perturbation_norm;

use super::suite::{SuiteEntry, TestSuite};

/// Percentage increase of `generated` over `seed`.
pub fn increase_percent(seed: f64, generated: f64) -> Result<f64> {
    if !(seed > 0.0) {
        return Err(Error::Invalid(format!("seed cost must be positive, got {seed}")));
    }
    Ok((generated - seed) / seed * 100.0)
}

/// I-FLOPs of one entry in percent.
pub fn i_flops(entry: &SuiteEntry) -> Result<f64> {
    increase_percent(entry.seed_cost, entry.generated_cost)
}

/// Number of entries whose generated sample costs strictly more than its seed.
pub fn degradation_success(suite: &TestSuite) -> usize {
    suite.entries.iter().filter(|e| e.generated_cost > e.seed_cost).count()
}

fn num_blocks(suite: &TestSuite) -> usize {
    suite.entries.first().map_or(0, |e| e.generated_trace.activated.len())
}

/// Fraction of blocks activated by at least one generated sample.
pub fn block_coverage(suite: &TestSuite) -> f64 {
    let n = num_blocks(suite);
    if n == 0 {
        return 0.0;
    }
    let mut covered = vec![false; n];
    for e in &suite.entries {
        for (c, &a) in covered.iter_mut().zip(&e.generated_trace.activated) {
            *c |= a;
        }
    }
    covered.iter().filter(|&&c| c).count() as f64 / n as f64
}

/// Total activation count over all generated samples divided by the block
/// count. Unbounded above for suites with more than one entry.
pub fn coverage_raw(suite: &TestSuite) -> f64 {
    let n = num_blocks(suite);
    if n == 0 {
        return 0.0;
    }
    let count: usize = suite.entries.iter().map(|e| e.generated_trace.num_activated()).sum();
    count as f64 / n as f64
}

/// Pearson correlation coefficient.
pub fn pcc(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::Length {
            expected: xs.len(),
            actual: ys.len(),
        });
    }
    if xs.len() < 2 {
        return Err(Error::Invalid("pcc needs at least two points".into()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Invalid("pcc is undefined for zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

fn max(xs: &[f64]) -> f64 {
    xs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

pub fn median_of(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

/// Seed and generated cost histograms over a shared range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    /// `bins + 1` edges; the last bin is closed on the right.
    pub edges: Vec<f64>,
    pub seed_counts: Vec<usize>,
    pub generated_counts: Vec<usize>,
    pub seed_mean: f64,
    pub generated_mean: f64,
}

impl Distribution {
    /// Fraction of samples per bin.
    pub fn densities(counts: &[usize]) -> Vec<f64> {
        let total: usize = counts.iter().sum();
        counts.iter().map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 }).collect()
    }

    /// Plot data: `bin_lo,bin_hi,seed_density,generated_density`.
    pub fn to_csv(&self) -> String {
        let sd = Self::densities(&self.seed_counts);
        let gd = Self::densities(&self.generated_counts);
        let mut out = String::from("bin_lo,bin_hi,seed_density,generated_density\n");
        for i in 0..sd.len() {
            out.push_str(&format!("{},{},{},{}\n", self.edges[i], self.edges[i + 1], sd[i], gd[i]));
        }
        out
    }
}

fn bin_index(v: f64, lo: f64, width: f64, bins: usize) -> usize {
    if width == 0.0 {
        return 0;
    }
    (((v - lo) / width).floor() as usize).min(bins - 1)
}

/// Histograms of seed and generated costs with `bins` equal-width bins
/// spanning the union of both ranges.
pub fn efficiency_distribution(suite: &TestSuite, bins: usize) -> Result<Distribution> {
    if bins == 0 {
        return Err(Error::Invalid("bins must be positive".into()));
    }
    let seeds: Vec<f64> = suite.entries.iter().map(|e| e.seed_cost).collect();
    let gens: Vec<f64> = suite.entries.iter().map(|e| e.generated_cost).collect();
    let all = seeds.iter().chain(&gens);
    let lo = all.clone().copied().fold(f64::INFINITY, f64::min);
    let hi = all.copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if lo.is_finite() { (lo, hi) } else { (0.0, 0.0) };
    let width = (hi - lo) / bins as f64;
    let edges = (0..=bins).map(|i| if i == bins { hi } else { lo + width * i as f64 }).collect();
    let count = |vs: &[f64]| {
        let mut c = vec![0usize; bins];
        for &v in vs {
            c[bin_index(v, lo, width, bins)] += 1;
        }
        c
    };
    Ok(Distribution {
        edges,
        seed_counts: count(&seeds),
        generated_counts: count(&gens),
        seed_mean: mean(&seeds),
        generated_mean: mean(&gens),
    })
}

/// Default threshold sweep.
pub const DEFAULT_TAUS: [f32; 5] = [0.3, 0.4, 0.5, 0.6, 0.7];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub tau: f32,
    pub mean_i_flops: f64,
    pub max_i_flops: f64,
    pub eta: usize,
}

/// Re-evaluates the seeds and generated samples of `suite` with every gate
/// threshold set to each `tau`.
pub fn threshold_sweep(model: &AdnnModel, suite: &TestSuite, taus: &[f32]) -> Result<Vec<SweepRow>> {
    if suite.is_empty() {
        return Err(Error::Empty("threshold sweep suite".into()));
    }
    let mut rows = Vec::with_capacity(taus.len());
    for &tau in taus {
        let m = model.with_thresholds(&vec![tau; model.num_blocks()])?;
        let mut remeasured = TestSuite::new(suite.producer, suite.budget, suite.model_hash.clone());
        for e in &suite.entries {
            remeasured.entries.push(SuiteEntry::measure(
                &m,
                e.seed_id,
                e.label,
                e.seed.clone(),
                e.generated.clone(),
                e.gen_time_seconds,
            )?);
        }
        let inc = remeasured.entries.iter().map(i_flops).collect::<Result<Vec<_>>>()?;
        rows.push(SweepRow {
            tau,
            mean_i_flops: mean(&inc),
            max_i_flops: max(&inc),
            eta: degradation_success(&remeasured),
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverheadReport {
    pub gan_per_sample_s: f64,
    pub baseline_per_sample_s: f64,
    pub gan_training_s: f64,
    /// Baseline over GAN online time per sample.
    pub speedup: f64,
    /// Sample count beyond which training plus generation is cheaper than
    /// the baseline; `None` if the baseline is not slower per sample.
    pub crossover_samples: Option<f64>,
    /// `(n, gan_total_s, baseline_total_s)`.
    pub curve: Vec<(usize, f64, f64)>,
}

impl OverheadReport {
    pub fn gan_total(&self, n: usize) -> f64 {
        self.gan_training_s + n as f64 * self.gan_per_sample_s
    }

    pub fn baseline_total(&self, n: usize) -> f64 {
        n as f64 * self.baseline_per_sample_s
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("n,gan_total_s,baseline_total_s\n");
        for (n, g, b) in &self.curve {
            out.push_str(&format!("{n},{g},{b}\n"));
        }
        out
    }
}

fn per_sample_time(suite: &TestSuite) -> Result<f64> {
    if suite.is_empty() {
        return Err(Error::Empty(format!("{} suite", suite.producer.as_str())));
    }
    Ok(suite.entries.iter().map(|e| e.gen_time_seconds).sum::<f64>() / suite.len() as f64)
}

/// Online and total time of the two producers. The curve is sampled at
/// `curve_points` sample counts from zero to twice the crossover (or 1000).
pub fn overhead_report(
    gan_suite: &TestSuite,
    baseline_suite: &TestSuite,
    training_time_s: f64,
    curve_points: usize,
) -> Result<OverheadReport> {
    let g = per_sample_time(gan_suite)?;
    let b = per_sample_time(baseline_suite)?;
    let crossover = (b > g).then(|| training_time_s / (b - g));
    let mut r = OverheadReport {
        gan_per_sample_s: g,
        baseline_per_sample_s: b,
        gan_training_s: training_time_s,
        speedup: if g > 0.0 { b / g } else { f64::INFINITY },
        crossover_samples: crossover,
        curve: Vec::new(),
    };
    let end = crossover.map_or(1000.0, |c| (2.0 * c).max(10.0)).ceil() as usize;
    let points = curve_points.max(2);
    r.curve = (0..points)
        .map(|i| {
            let n = end * i / (points - 1);
            (n, r.gan_total(n), r.baseline_total(n))
        })
        .collect();
    Ok(r)
}

/// Relative interquartile spread above which a latency measurement is flagged.
pub const UNRELIABLE_SPREAD: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencySamples {
    pub seconds: Vec<f64>,
    pub median_s: f64,
    /// Interquartile range over the median.
    pub relative_spread: f64,
}

impl LatencySamples {
    fn from_samples(seconds: Vec<f64>) -> Self {
        let mut sorted = seconds.clone();
        sorted.sort_by(f64::total_cmp);
        let q = |p: f64| sorted[((sorted.len() - 1) as f64 * p).round() as usize];
        let median_s = median_of(&seconds);
        Self {
            relative_spread: if median_s > 0.0 { (q(0.75) - q(0.25)) / median_s } else { 0.0 },
            median_s,
            seconds,
        }
    }

    pub fn unreliable(&self) -> bool {
        self.relative_spread > UNRELIABLE_SPREAD
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyMeasurement {
    pub seed: LatencySamples,
    pub generated: LatencySamples,
    pub increase_percent: f64,
    pub unreliable: bool,
}

pub const MIN_REPEATS: usize = 10;
const WARMUP: usize = 2;

/// Median wall-clock of `repeats` forward passes after discarded warm-up runs.
pub fn forward_latency(model: &AdnnModel, x: &Tensor, repeats: usize) -> Result<LatencySamples> {
    if repeats == 0 {
        return Err(Error::Invalid("repeats must be positive".into()));
    }
    for _ in 0..WARMUP {
        model.forward_with_trace(x)?;
    }
    let mut seconds = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t = Instant::now();
        model.forward_with_trace(x)?;
        seconds.push(t.elapsed().as_secs_f64());
    }
    Ok(LatencySamples::from_samples(seconds))
}

/// I-Latency of one entry from interleaved seed and generated timings.
pub fn i_latency(model: &AdnnModel, entry: &SuiteEntry, repeats: usize) -> Result<LatencyMeasurement> {
    if repeats < MIN_REPEATS {
        return Err(Error::Invalid(format!("at least {MIN_REPEATS} repeats are required, got {repeats}")));
    }
    for _ in 0..WARMUP {
        model.forward_with_trace(&entry.seed)?;
        model.forward_with_trace(&entry.generated)?;
    }
    let (mut s, mut g) = (Vec::with_capacity(repeats), Vec::with_capacity(repeats));
    for _ in 0..repeats {
        let t = Instant::now();
        model.forward_with_trace(&entry.seed)?;
        s.push(t.elapsed().as_secs_f64());
        let t = Instant::now();
        model.forward_with_trace(&entry.generated)?;
        g.push(t.elapsed().as_secs_f64());
    }
    let seed = LatencySamples::from_samples(s);
    let generated = LatencySamples::from_samples(g);
    Ok(LatencyMeasurement {
        increase_percent: increase_percent(seed.median_s, generated.median_s)?,
        unreliable: seed.unreliable() || generated.unreliable(),
        seed,
        generated,
    })
}

/// Aggregate metrics of one suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub producer: String,
    pub model_hash: String,
    pub norm: String,
    pub epsilon: f32,
    pub entries: usize,
    pub mean_i_flops: f64,
    pub max_i_flops: f64,
    pub mean_i_latency: Option<f64>,
    pub max_i_latency: Option<f64>,
    pub latency_entries: usize,
    pub unreliable_latency: usize,
    pub eta: usize,
    pub coverage: f64,
    pub coverage_raw: f64,
    pub mean_perturbation: f64,
    pub max_perturbation: f64,
    pub mean_seed_flops: f64,
    pub mean_generated_flops: f64,
    pub mean_gen_time_s: f64,
    /// Energy is not measured; always `"unavailable"`.
    pub i_energy: String,
}

pub const REPORT_COLUMNS: [(&str, &str); 20] = [
    ("producer", "test generator: deepperform or iterative_baseline"),
    ("model_hash", "hash of the AdNN spec the traces come from"),
    ("norm", "perturbation norm: l2 or linf"),
    ("epsilon", "perturbation radius"),
    ("entries", "number of seed/generated pairs"),
    ("mean_i_flops", "mean FLOPs increase over seeds, percent"),
    ("max_i_flops", "max FLOPs increase over seeds, percent"),
    ("mean_i_latency", "mean median-latency increase, percent; empty if not measured"),
    ("max_i_latency", "max median-latency increase, percent; empty if not measured"),
    ("latency_entries", "number of leading entries whose latency was measured"),
    ("unreliable_latency", "entries whose latency spread exceeded the reliability threshold"),
    ("eta", "entries with generated FLOPs strictly above seed FLOPs"),
    ("coverage", "fraction of blocks activated by at least one generated sample"),
    ("coverage_raw", "total activations over all generated samples divided by block count"),
    ("mean_perturbation", "mean p-norm of generated minus seed"),
    ("max_perturbation", "max p-norm of generated minus seed"),
    ("mean_seed_flops", "mean absolute FLOPs of seeds, stem included"),
    ("mean_generated_flops", "mean absolute FLOPs of generated samples, stem included"),
    ("mean_gen_time_s", "mean wall-clock seconds to produce one sample"),
    ("i_energy", "energy increase; not measured, always 'unavailable'"),
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricsReport {
    /// Metrics computable from the suite alone, plus optional latency
    /// measurements of its first entries.
    pub fn from_suite(suite: &TestSuite, latency: Option<&[LatencyMeasurement]>) -> Result<Self> {
        if suite.is_empty() {
            return Err(Error::Empty("suite".into()));
        }
        if let Some(l) = latency {
            if l.len() > suite.len() {
                return Err(Error::Length {
                    expected: suite.len(),
                    actual: l.len(),
                });
            }
        }
        let inc = suite.entries.iter().map(i_flops).collect::<Result<Vec<_>>>()?;
        let norms: Vec<f64> = suite
            .entries
            .iter()
            .map(|e| perturbation_norm(e.seed.data(), e.generated.data(), suite.budget.norm))
            .collect();
        let lat: Option<Vec<f64>> = latency.map(|l| l.iter().map(|m| m.increase_percent).collect());
        let seed_costs: Vec<f64> = suite.entries.iter().map(|e| e.seed_cost).collect();
        let gen_costs: Vec<f64> = suite.entries.iter().map(|e| e.generated_cost).collect();
        let times: Vec<f64> = suite.entries.iter().map(|e| e.gen_time_seconds).collect();
        Ok(Self {
            producer: suite.producer.as_str().into(),
            model_hash: suite.model_hash.clone(),
            norm: suite.budget.norm_name().into(),
            epsilon: suite.budget.epsilon,
            entries: suite.len(),
            mean_i_flops: mean(&inc),
            max_i_flops: max(&inc),
            mean_i_latency: lat.as_deref().map(mean),
            max_i_latency: lat.as_deref().map(max),
            latency_entries: latency.map_or(0, <[_]>::len),
            unreliable_latency: latency.map_or(0, |l| l.iter().filter(|m| m.unreliable).count()),
            eta: degradation_success(suite),
            coverage: block_coverage(suite),
            coverage_raw: coverage_raw(suite),
            mean_perturbation: mean(&norms),
            max_perturbation: max(&norms),
            mean_seed_flops: mean(&seed_costs),
            mean_generated_flops: mean(&gen_costs),
            mean_gen_time_s: mean(&times),
            i_energy: "unavailable".into(),
        })
    }

    fn csv_row(&self) -> String {
        [
            self.producer.clone(),
            self.model_hash.clone(),
            self.norm.clone(),
            self.epsilon.to_string(),
            self.entries.to_string(),
            self.mean_i_flops.to_string(),
            self.max_i_flops.to_string(),
            opt(self.mean_i_latency),
            opt(self.max_i_latency),
            self.latency_entries.to_string(),
            self.unreliable_latency.to_string(),
            self.eta.to_string(),
            self.coverage.to_string(),
            self.coverage_raw.to_string(),
            self.mean_perturbation.to_string(),
            self.max_perturbation.to_string(),
            self.mean_seed_flops.to_string(),
            self.mean_generated_flops.to_string(),
            self.mean_gen_time_s.to_string(),
            self.i_energy.clone(),
        ]
        .join(",")
    }

    /// One comparison table with a row per report.
    pub fn to_csv(reports: &[MetricsReport]) -> String {
        let header: Vec<&str> = REPORT_COLUMNS.iter().map(|(c, _)| *c).collect();
        let mut out = header.join(",");
        out.push('\n');
        for r in reports {
            out.push_str(&r.csv_row());
            out.push('\n');
        }
        out
    }

    /// Column documentation emitted next to every CSV report.
    pub fn schema_markdown() -> String {
        let mut out = String::from("| column | meaning |\n|---|---|\n");
        for (c, d) in REPORT_COLUMNS {
            out.push_str(&format!("| {c} | {d} |\n"));
        }
        out
    }
}

/// Recomputes the hard cost of each stored trace; used to confirm reports
/// depend on persisted data only.
pub fn recomputed_costs(suite: &TestSuite, model: &AdnnModel) -> Result<Vec<(f64, f64)>> {
    let profile = model.cost_profile();
    suite
        .entries
        .iter()
        .map(|e| Ok((hard_cost(&e.seed_trace, &profile)?, hard_cost(&e.generated_trace, &profile)?)))
        .collect()
}
