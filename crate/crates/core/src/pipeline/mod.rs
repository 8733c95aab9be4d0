//! Resumable experiment pipeline: train-adnn -> train-generator -> generate
//! -> baseline -> evaluate, one directory per experiment.
//!
//! Every completed stage leaves a marker under `stages/` carrying the
//! configuration hash. A stage is skipped on rerun when its marker matches and
//! its outputs still exist; once a stage reruns, every later stage does too.

mod config;
mod report;

use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adnn::{evaluate_accuracy, train_adnn, AdnnModel, AdnnTrainReport};
use crate::baseline::baseline_suite;
use crate::dataset::{ingest_dataset, DatasetSplit};
use crate::error::{Error, Result};
use crate::eval::{i_latency, overhead_report, threshold_sweep, Producer, SweepRow, TestSuite};
use crate::gan::{generate, train_generator, Generator, TrainHistory};
use crate::mitigation::{
    evaluate_detector, retrain_adnn, train_detector_on_suite, DetectorEvaluation, RetrainReport,
};

pub use config::{
    BaselineSettings, EvaluationSettings, ExperimentConfig, GeneratorSettings, MitigationSettings, SubjectConfig,
};
pub use report::{
    write_report, MeasuredSuite, ReportInputs, LATENCY_FILE, METRICS_CSV, METRICS_JSON, OVERHEAD_CSV, SCHEMA_FILE,
    SWEEP_CSV,
};

/// Environment variable naming the root for relative output directories.
pub const OUTPUT_ROOT_ENV: &str = "ADAPERF_OUTPUT_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    TrainAdnn,
    TrainGenerator,
    Generate,
    Baseline,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::TrainAdnn,
        Stage::TrainGenerator,
        Stage::Generate,
        Stage::Baseline,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::TrainAdnn => "train-adnn",
            Stage::TrainGenerator => "train-generator",
            Stage::Generate => "generate",
            Stage::Baseline => "baseline",
            Stage::Evaluate => "evaluate",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Marker {
    stage: Stage,
    config_hash: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DirManifest {
    config_hash: String,
    config: ExperimentConfig,
}

/// Files inside an experiment directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn adnn(&self) -> PathBuf {
        self.root.join("adnn.ckpt")
    }
    pub fn adnn_report(&self) -> PathBuf {
        self.root.join("adnn_report.json")
    }
    pub fn generator(&self) -> PathBuf {
        self.root.join("generator.ckpt")
    }
    pub fn discriminator(&self) -> PathBuf {
        self.root.join("discriminator.ckpt")
    }
    pub fn history_json(&self) -> PathBuf {
        self.root.join("history.json")
    }
    pub fn history_csv(&self) -> PathBuf {
        self.root.join("history.csv")
    }
    pub fn suite(&self, producer: Producer) -> PathBuf {
        self.root.join("suites").join(producer.as_str())
    }
    pub fn sweep(&self) -> PathBuf {
        self.root.join("sweep.json")
    }
    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }
    pub fn mitigation_dir(&self) -> PathBuf {
        self.root.join("mitigation")
    }
    fn marker(&self, stage: Stage) -> PathBuf {
        self.root.join("stages").join(format!("{}.done", stage.name()))
    }
    fn lock(&self) -> PathBuf {
        self.root.join(".lock")
    }
    fn manifest(&self) -> PathBuf {
        self.root.join("pipeline.json")
    }

    fn outputs(&self, stage: Stage) -> Vec<PathBuf> {
        match stage {
            Stage::TrainAdnn => vec![self.adnn(), self.adnn_report()],
            Stage::TrainGenerator => vec![self.generator(), self.discriminator(), self.history_json()],
            Stage::Generate => vec![self.suite(Producer::Deepperform).join(crate::eval::MANIFEST_FILE)],
            Stage::Baseline => vec![self.suite(Producer::IterativeBaseline).join(crate::eval::MANIFEST_FILE)],
            Stage::Evaluate => vec![self.report_dir().join(METRICS_CSV), self.report_dir().join(METRICS_JSON)],
        }
    }
}

/// Exclusive claim on an experiment directory, released on drop.
#[derive(Debug)]
struct DirLock {
    path: PathBuf,
    _file: File,
}

impl DirLock {
    fn acquire(path: PathBuf) -> Result<Self> {
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(file) => Ok(Self { path, _file: file }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(Error::Locked(path.parent().map(Path::to_path_buf).unwrap_or_default()))
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Outcome of [`Pipeline::run_all`].
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub ran: Vec<Stage>,
    pub skipped: Vec<Stage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MitigationRetrainOutcome {
    pub report: RetrainReport,
    /// Mean I-FLOPs of a generator trained against the original model.
    pub attack_i_flops_before: f64,
    /// Mean I-FLOPs of a fresh generator trained against the retrained model.
    pub attack_i_flops_after: Option<f64>,
}

/// One experiment directory, locked for the lifetime of the value.
#[derive(Debug)]
pub struct Pipeline {
    config: ExperimentConfig,
    hash: String,
    layout: Layout,
    data: Option<DatasetSplit>,
    _lock: DirLock,
}

fn stage_err(stage: Stage) -> impl FnOnce(Error) -> Error {
    move |e| match e {
        Error::Stage { .. } => e,
        other => Error::Stage {
            stage: stage.name().into(),
            source: Box::new(other),
        },
    }
}

fn mean_i_flops(suite: &TestSuite) -> Result<f64> {
    let mut s = 0.0;
    for e in &suite.entries {
        s += crate::eval::i_flops(e)?;
    }
    Ok(s / suite.len().max(1) as f64)
}

impl Pipeline {
    /// Opens (creating if needed) the experiment directory for `config`.
    /// Refuses directories holding artifacts of a different configuration.
    pub fn open(config: ExperimentConfig, dir: &Path) -> Result<Self> {
        config.validate()?;
        fs::create_dir_all(dir.join("stages"))?;
        let layout = Layout { root: dir.to_path_buf() };
        let lock = DirLock::acquire(layout.lock())?;
        let hash = config.hash();
        let mpath = layout.manifest();
        if mpath.exists() {
            let m: DirManifest = serde_json::from_slice(&fs::read(&mpath)?)?;
            if m.config_hash != hash {
                return Err(Error::Config(format!(
                    "{} holds artifacts of configuration {}, refusing to mix with {}",
                    dir.display(),
                    m.config_hash,
                    hash
                )));
            }
        } else {
            let m = DirManifest {
                config_hash: hash.clone(),
                config: config.clone(),
            };
            fs::write(&mpath, serde_json::to_vec_pretty(&m)?)?;
        }
        Ok(Self {
            config,
            hash,
            layout,
            data: None,
            _lock: lock,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    fn stages(&self) -> Vec<Stage> {
        Stage::ALL
            .into_iter()
            .filter(|&s| s != Stage::Baseline || self.config.baseline.enabled)
            .collect()
    }

    pub fn is_done(&self, stage: Stage) -> bool {
        let Ok(bytes) = fs::read(self.layout.marker(stage)) else {
            return false;
        };
        let Ok(m) = serde_json::from_slice::<Marker>(&bytes) else {
            return false;
        };
        m.config_hash == self.hash && m.stage == stage && self.layout.outputs(stage).iter().all(|p| p.exists())
    }

    fn mark_done(&self, stage: Stage) -> Result<()> {
        let m = Marker {
            stage,
            config_hash: self.hash.clone(),
        };
        fs::write(self.layout.marker(stage), serde_json::to_vec_pretty(&m)?)?;
        Ok(())
    }

    /// Runs every stage not already completed, in order.
    pub fn run_all(&mut self) -> Result<RunSummary> {
        let mut summary = RunSummary {
            dir: self.layout.root.clone(),
            ran: Vec::new(),
            skipped: Vec::new(),
        };
        let mut dirty = false;
        for stage in self.stages() {
            if !dirty && self.is_done(stage) {
                summary.skipped.push(stage);
                continue;
            }
            self.run_stage(stage)?;
            summary.ran.push(stage);
            dirty = true;
        }
        Ok(summary)
    }

    /// Runs one stage unconditionally and records its marker.
    pub fn run_stage(&mut self, stage: Stage) -> Result<()> {
        let _ = fs::remove_file(self.layout.marker(stage));
        let r = match stage {
            Stage::TrainAdnn => self.stage_train_adnn(),
            Stage::TrainGenerator => self.stage_train_generator(),
            Stage::Generate => self.stage_generate(),
            Stage::Baseline => self.stage_baseline(),
            Stage::Evaluate => self.stage_evaluate(),
        };
        r.map_err(stage_err(stage))?;
        self.mark_done(stage)
    }

    pub fn data(&mut self) -> Result<&DatasetSplit> {
        if self.data.is_none() {
            let split = ingest_dataset(&self.config.dataset)?;
            let spec = self.config.subject.spec();
            split.train.check_against(&spec)?;
            split.test.check_against(&spec)?;
            self.data = Some(split);
        }
        Ok(self.data.as_ref().expect("set above"))
    }

    pub fn model(&self) -> Result<AdnnModel> {
        AdnnModel::load(&self.layout.adnn(), Some(&self.config.subject.spec()))
    }

    pub fn generator(&self) -> Result<Generator> {
        let (g, meta) = Generator::load(&self.layout.generator())?;
        let expected = self.config.subject.spec().hash();
        if meta.target_hash != expected {
            return Err(Error::HashMismatch {
                expected,
                found: meta.target_hash,
            });
        }
        Ok(g)
    }

    pub fn suite(&self, producer: Producer) -> Result<TestSuite> {
        TestSuite::load(&self.layout.suite(producer))
    }

    /// Test-split indices used as seeds, in a fixed shuffled order.
    pub fn seed_ids(&mut self) -> Result<Vec<usize>> {
        let n = self.config.seed_count;
        let seed = self.config.rng_seed ^ 0x5eed;
        let available = self.data()?.test.len();
        if n > available {
            return Err(Error::Config(format!("seed_count {n} exceeds the {available} test inputs")));
        }
        let mut ids: Vec<usize> = (0..available).collect();
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        ids.truncate(n);
        Ok(ids)
    }

    fn stage_train_adnn(&mut self) -> Result<()> {
        let spec = self.config.subject.spec();
        let (model, report) = match self.config.subject.checkpoint.clone() {
            Some(path) => {
                let model = AdnnModel::load(&path, Some(&spec))?;
                let (accuracy, mean_activation) = evaluate_accuracy(&model, &self.data()?.test)?;
                (
                    model,
                    AdnnTrainReport {
                        accuracy,
                        mean_activation,
                        history: Vec::new(),
                    },
                )
            }
            None => {
                let mut cfg = self.config.adnn_training.clone();
                cfg.seed = self.config.rng_seed;
                let model = AdnnModel::build(&spec, self.config.rng_seed)?;
                let data = self.data()?;
                train_adnn(model, &data.train, &data.test, &cfg)?
            }
        };
        model.save(&self.layout.adnn())?;
        fs::write(self.layout.adnn_report(), serde_json::to_vec_pretty(&report)?)?;
        Ok(())
    }

    fn stage_train_generator(&mut self) -> Result<()> {
        let model = self.model()?;
        let cfg = self.config.generator.to_config(self.config.budget, self.config.rng_seed.wrapping_add(1));
        let limit = self.config.generator.train_count;
        let data = self.data()?;
        let train = match limit {
            Some(n) => data.train.take(n.min(data.train.len())),
            None => data.train.clone(),
        };
        let (gen, disc, history) = train_generator(&model, &train, &cfg)?;
        let cfg_json = serde_json::to_value(&cfg)?;
        gen.save(&self.layout.generator(), &model.spec().hash(), Some(cfg_json))?;
        disc.save(&self.layout.discriminator(), &self.hash)?;
        fs::write(self.layout.history_csv(), history.to_csv())?;
        fs::write(self.layout.history_json(), serde_json::to_vec_pretty(&history)?)?;
        Ok(())
    }

    fn stage_generate(&mut self) -> Result<()> {
        let model = self.model()?;
        let gen = self.generator()?;
        let ids = self.seed_ids()?;
        let suite = generate(&gen, &model, &self.data()?.test, &ids)?;
        let dir = self.layout.suite(Producer::Deepperform);
        let _ = fs::remove_dir_all(&dir);
        suite.save(&dir)
    }

    fn stage_baseline(&mut self) -> Result<()> {
        let model = self.model()?;
        let mut ids = self.seed_ids()?;
        if let Some(n) = self.config.baseline.seed_count {
            ids.truncate(n);
        }
        let budget_s = if self.config.baseline.equal_time {
            let gan = self.suite(Producer::Deepperform)?;
            Some(gan.entries.iter().map(|e| e.gen_time_seconds).sum::<f64>())
        } else {
            None
        };
        let cfg = self.config.baseline.to_config(self.config.budget);
        let suite = baseline_suite(&model, &self.data()?.test, &ids, &cfg, budget_s)?;
        let dir = self.layout.suite(Producer::IterativeBaseline);
        let _ = fs::remove_dir_all(&dir);
        suite.save(&dir)
    }

    fn measure_latency(&self, model: &AdnnModel, producer: Producer) -> Result<()> {
        let dir = self.layout.suite(producer);
        let suite = TestSuite::load(&dir)?;
        let ev = &self.config.evaluation;
        let lat = suite
            .entries
            .iter()
            .take(ev.latency_entries)
            .map(|e| i_latency(model, e, ev.latency_repeats))
            .collect::<Result<Vec<_>>>()?;
        if ev.latency_entries > 0 {
            MeasuredSuite::save_latency(&dir, &lat)?;
        } else {
            let _ = fs::remove_file(dir.join(LATENCY_FILE));
        }
        Ok(())
    }

    fn stage_evaluate(&mut self) -> Result<()> {
        let model = self.model()?;
        let mut producers = vec![Producer::Deepperform];
        if self.config.baseline.enabled {
            producers.push(Producer::IterativeBaseline);
        }
        for &p in &producers {
            self.measure_latency(&model, p)?;
        }
        self.sweep_thresholds(&self.config.evaluation.sweep_taus)?;
        self.write_report()?;
        Ok(())
    }

    /// Re-evaluates the generated suite under each uniform threshold and
    /// persists the table; the next report includes it.
    pub fn sweep_thresholds(&self, taus: &[f32]) -> Result<Vec<SweepRow>> {
        let run = || -> Result<Vec<SweepRow>> {
            let rows = threshold_sweep(&self.model()?, &self.suite(Producer::Deepperform)?, taus)?;
            fs::write(self.layout.sweep(), serde_json::to_vec_pretty(&rows)?)?;
            Ok(rows)
        };
        run().map_err(|e| Error::Stage {
            stage: "sweep-thresholds".into(),
            source: Box::new(e),
        })
    }

    /// Rebuilds the report directory from persisted artifacts only.
    pub fn write_report(&self) -> Result<Vec<PathBuf>> {
        let mut suites = vec![MeasuredSuite::load(&self.layout.suite(Producer::Deepperform))?];
        let bdir = self.layout.suite(Producer::IterativeBaseline);
        if self.config.baseline.enabled && bdir.exists() {
            suites.push(MeasuredSuite::load(&bdir)?);
        }
        let sweep: Option<Vec<SweepRow>> = match fs::read(self.layout.sweep()) {
            Ok(b) => Some(serde_json::from_slice(&b)?),
            Err(_) => None,
        };
        let history: TrainHistory = serde_json::from_slice(&fs::read(self.layout.history_json())?)?;
        let overhead = match suites.get(1) {
            Some(b) if !b.suite.is_empty() => {
                Some(overhead_report(&suites[0].suite, &b.suite, history.training_time_s, 11)?)
            }
            _ => None,
        };
        write_report(
            &self.layout.report_dir(),
            &ReportInputs {
                suites,
                sweep,
                overhead,
                distribution_bins: self.config.evaluation.distribution_bins,
            },
        )
    }

    /// Retrains the AdNN on the generated suite, optionally attacks the
    /// retrained model with a freshly trained generator, and writes the
    /// outcome under `mitigation/`.
    pub fn mitigate_retrain(&mut self) -> Result<MitigationRetrainOutcome> {
        let run = |this: &mut Self| -> Result<MitigationRetrainOutcome> {
            let model = this.model()?;
            let suite = this.suite(Producer::Deepperform)?;
            let test = this.data()?.test.clone();
            let (retrained, report) = retrain_adnn(&model, &suite, &test, &this.config.mitigation.retrain)?;
            let dir = this.layout.mitigation_dir();
            fs::create_dir_all(&dir)?;
            retrained.save(&dir.join("retrained.ckpt"))?;
            let attack_i_flops_after = if this.config.mitigation.regenerate {
                let cfg = this.config.generator.to_config(this.config.budget, this.config.rng_seed.wrapping_add(1));
                let limit = this.config.generator.train_count;
                let data = this.data()?;
                let train = match limit {
                    Some(n) => data.train.take(n.min(data.train.len())),
                    None => data.train.clone(),
                };
                let (gen, _, _) = train_generator(&retrained, &train, &cfg)?;
                let fresh = generate(&gen, &retrained, &test, &suite.seed_ids())?;
                Some(mean_i_flops(&fresh)?)
            } else {
                None
            };
            let outcome = MitigationRetrainOutcome {
                report,
                attack_i_flops_before: mean_i_flops(&suite)?,
                attack_i_flops_after,
            };
            fs::write(dir.join("retrain.json"), serde_json::to_vec_pretty(&outcome)?)?;
            Ok(outcome)
        };
        run(self).map_err(|e| Error::Stage {
            stage: "mitigate-retrain".into(),
            source: Box::new(e),
        })
    }

    /// Trains the input filter on the first half of the generated suite and
    /// evaluates it on the second half.
    pub fn mitigate_detect(&mut self) -> Result<DetectorEvaluation> {
        let run = |this: &mut Self| -> Result<DetectorEvaluation> {
            let model = this.model()?;
            let suite = this.suite(Producer::Deepperform)?;
            if suite.len() < 4 {
                return Err(Error::Empty("detector needs at least 4 suite entries".into()));
            }
            let half = suite.len() / 2;
            let train = suite.truncated(half);
            let mut heldout = suite.clone();
            heldout.entries.drain(..half);
            let det = train_detector_on_suite(&model, &train, &this.config.mitigation.detector)?;
            let eval = evaluate_detector(&det, &model, &heldout, this.config.evaluation.latency_repeats)?;
            let dir = this.layout.mitigation_dir();
            fs::create_dir_all(&dir)?;
            det.save(&dir.join("detector.json"))?;
            fs::write(dir.join("detect.json"), serde_json::to_vec_pretty(&eval)?)?;
            Ok(eval)
        };
        run(self).map_err(|e| Error::Stage {
            stage: "mitigate-detect".into(),
            source: Box::new(e),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::toy(dir.path());
        let p = Pipeline::open(cfg.clone(), dir.path()).unwrap();
        assert!(matches!(Pipeline::open(cfg.clone(), dir.path()), Err(Error::Locked(_))));
        drop(p);
        Pipeline::open(cfg, dir.path()).unwrap();
    }

    #[test]
    fn foreign_configuration_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::toy(dir.path());
        drop(Pipeline::open(cfg.clone(), dir.path()).unwrap());
        let mut other = cfg;
        other.rng_seed = 9;
        assert!(matches!(Pipeline::open(other, dir.path()), Err(Error::Config(_))));
    }

    #[test]
    fn missing_generator_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = Pipeline::open(ExperimentConfig::toy(dir.path()), dir.path()).unwrap();
        let err = p.run_stage(Stage::Generate).unwrap_err();
        let text = err.to_string();
        assert!(text.contains("generate"), "{text}");
        match err {
            Error::Stage { source, .. } => assert!(matches!(*source, Error::MissingArtifact(_))),
            e => panic!("unexpected {e}"),
        }
        assert!(!p.is_done(Stage::Generate));
    }

    #[test]
    fn seed_ids_are_fixed_and_bounded() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = Pipeline::open(ExperimentConfig::toy(dir.path()), dir.path()).unwrap();
        let a = p.seed_ids().unwrap();
        assert_eq!(a.len(), 40);
        assert_eq!(a, p.seed_ids().unwrap());
        assert!(a.iter().all(|&i| i < 100));
    }
}
