use std::fs;
use std::path::Path;

use adaperf_autograd::Tensor;
use serde::{Deserialize, Serialize};

use crate::adnn::{AdnnModel, BlockTrace};
use crate::arrays::{read_array, write_array};
use crate::error::{Error, Result};
use crate::flops::{hard_cost, CostProfile};
use crate::gan::PerturbationBudget;

/// Which method produced the generated inputs of a suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Producer {
    Deepperform,
    IterativeBaseline,
}

impl Producer {
    pub fn as_str(self) -> &'static str {
        match self {
            Producer::Deepperform => "deepperform",
            Producer::IterativeBaseline => "iterative_baseline",
        }
    }
}

/// One seed and the test sample derived from it.
#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub seed_id: usize,
    pub label: Option<usize>,
    /// `[C, H, W]`.
    pub seed: Tensor,
    pub generated: Tensor,
    pub seed_trace: BlockTrace,
    pub generated_trace: BlockTrace,
    pub seed_cost: f64,
    pub generated_cost: f64,
    pub gen_time_seconds: f64,
    /// Set when the producer stopped early on a numerical problem.
    pub warning: Option<String>,
}

/// Paired seeds and generated samples with their measured costs.
#[derive(Debug, Clone)]
pub struct TestSuite {
    pub producer: Producer,
    pub budget: PerturbationBudget,
    /// Hash of the adaptive model the traces come from.
    pub model_hash: String,
    pub entries: Vec<SuiteEntry>,
}

#[derive(Serialize, Deserialize)]
struct EntryRecord {
    seed_id: usize,
    label: Option<usize>,
    seed_trace: BlockTrace,
    generated_trace: BlockTrace,
    seed_cost: f64,
    generated_cost: f64,
    gen_time_seconds: f64,
    #[serde(default)]
    warning: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    producer: Producer,
    budget: PerturbationBudget,
    model_hash: String,
    input_shape: Vec<usize>,
    entries: Vec<EntryRecord>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SEEDS_FILE: &str = "seeds.bin";
pub const GENERATED_FILE: &str = "generated.bin";

impl SuiteEntry {
    /// Runs `model` on both inputs and records traces and costs.
    pub fn measure(
        model: &AdnnModel,
        seed_id: usize,
        label: Option<usize>,
        seed: Tensor,
        generated: Tensor,
        gen_time_seconds: f64,
    ) -> Result<Self> {
        let profile = model.cost_profile();
        let seed_trace = model.forward_with_trace(&seed)?;
        let generated_trace = model.forward_with_trace(&generated)?;
        Ok(Self {
            seed_id,
            label,
            seed_cost: hard_cost(&seed_trace, &profile)?,
            generated_cost: hard_cost(&generated_trace, &profile)?,
            seed,
            generated,
            seed_trace,
            generated_trace,
            gen_time_seconds,
            warning: None,
        })
    }
}

impl TestSuite {
    pub fn new(producer: Producer, budget: PerturbationBudget, model_hash: impl Into<String>) -> Self {
        Self {
            producer,
            budget,
            model_hash: model_hash.into(),
            entries: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn seed_ids(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.seed_id).collect()
    }

    /// Entries whose generated sample violates the budget.
    pub fn budget_violations(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| !self.budget.admits(e.seed.data(), e.generated.data()))
            .count()
    }

    /// Checks that stored costs equal the hard cost of the stored traces and
    /// that every sample is inside the budget.
    pub fn validate(&self, profile: &CostProfile) -> Result<()> {
        for e in &self.entries {
            if hard_cost(&e.seed_trace, profile)? != e.seed_cost
                || hard_cost(&e.generated_trace, profile)? != e.generated_cost
            {
                return Err(Error::Invalid(format!("seed {}: stored cost disagrees with its trace", e.seed_id)));
            }
        }
        match self.budget_violations() {
            0 => Ok(()),
            n => Err(Error::Invalid(format!("{n} generated samples violate the budget"))),
        }
    }

    /// Entries of `self` followed by those of `other`. Both must come from
    /// the same model.
    pub fn union(&self, other: &TestSuite) -> Result<TestSuite> {
        if self.model_hash != other.model_hash {
            return Err(Error::HashMismatch {
                expected: self.model_hash.clone(),
                found: other.model_hash.clone(),
            });
        }
        let mut out = self.clone();
        out.entries.extend(other.entries.iter().cloned());
        Ok(out)
    }

    /// Suite restricted to the first `n` entries.
    pub fn truncated(&self, n: usize) -> TestSuite {
        let mut out = self.clone();
        out.entries.truncate(n);
        out
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let input_shape = self.entries.first().map(|e| e.seed.shape().to_vec()).unwrap_or_default();
        let manifest = Manifest {
            producer: self.producer,
            budget: self.budget,
            model_hash: self.model_hash.clone(),
            input_shape: input_shape.clone(),
            entries: self
                .entries
                .iter()
                .map(|e| EntryRecord {
                    seed_id: e.seed_id,
                    label: e.label,
                    seed_trace: e.seed_trace.clone(),
                    generated_trace: e.generated_trace.clone(),
                    seed_cost: e.seed_cost,
                    generated_cost: e.generated_cost,
                    gen_time_seconds: e.gen_time_seconds,
                    warning: e.warning.clone(),
                })
                .collect(),
        };
        let stack = |f: fn(&SuiteEntry) -> &Tensor| -> Result<Tensor> {
            let mut shape = vec![self.entries.len()];
            shape.extend_from_slice(&input_shape);
            let mut data = Vec::with_capacity(shape.iter().product());
            for e in &self.entries {
                data.extend_from_slice(f(e).data());
            }
            Ok(Tensor::new(&shape, data)?)
        };
        write_array(&dir.join(SEEDS_FILE), &stack(|e| &e.seed)?)?;
        write_array(&dir.join(GENERATED_FILE), &stack(|e| &e.generated)?)?;
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<TestSuite> {
        let mpath = dir.join(MANIFEST_FILE);
        if !mpath.exists() {
            return Err(Error::MissingArtifact(mpath));
        }
        let manifest: Manifest = serde_json::from_slice(&fs::read(&mpath)?)?;
        let seeds = read_array(&dir.join(SEEDS_FILE))?;
        let generated = read_array(&dir.join(GENERATED_FILE))?;
        let n = manifest.entries.len();
        if seeds.shape() != generated.shape() || seeds.shape().first() != Some(&n) {
            return Err(Error::Checkpoint {
                path: dir.to_path_buf(),
                reason: format!("arrays {:?} do not match {n} manifest entries", seeds.shape()),
            });
        }
        let item_shape = manifest.input_shape;
        let entries = manifest
            .entries
            .into_iter()
            .enumerate()
            .map(|(i, r)| {
                Ok(SuiteEntry {
                    seed_id: r.seed_id,
                    label: r.label,
                    seed: Tensor::new(&item_shape, seeds.item_slice(i).to_vec())?,
                    generated: Tensor::new(&item_shape, generated.item_slice(i).to_vec())?,
                    seed_trace: r.seed_trace,
                    generated_trace: r.generated_trace,
                    seed_cost: r.seed_cost,
                    generated_cost: r.generated_cost,
                    gen_time_seconds: r.gen_time_seconds,
                    warning: r.warning,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TestSuite {
            producer: manifest.producer,
            budget: manifest.budget,
            model_hash: manifest.model_hash,
            entries,
        })
    }
}
