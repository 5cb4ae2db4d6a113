//! Perturbation-based module importance.
//!
//! For each module, two model instances are built by adding independent
//! Gaussian noise, with the module's own (population) standard deviation, to
//! that module's weight only. The module's score is the ℓ1 distance between
//! the two instances' logits on a fixed input, averaged over several trials.
//!
//! Trial `t` of module `p` draws its two noise tensors from the substreams
//! `(master_seed, [p.stream_key(), t, 0])` and `(master_seed, [p.stream_key(), t, 1])`,
//! so scores do not depend on which other modules are scored or in what order.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{InputBatch, ModuleKind, ModulePath, TransformerModel};
use crate::numerics::{gaussian, l1_diff, population_std, RngStream, Tensor};

/// A model whose modules can be perturbed one at a time.
pub trait Perturbable: Sync {
    type Input: Sync;

    fn module_weight(&self, path: ModulePath) -> Result<&Tensor>;

    /// Logits with `path` replaced by `weight`; every other module as stored.
    fn logits_with(&self, x: &Self::Input, path: ModulePath, weight: &Tensor) -> Result<Tensor>;

    fn input_rows(&self, x: &Self::Input) -> usize;
}

impl Perturbable for TransformerModel {
    type Input = InputBatch;

    fn module_weight(&self, path: ModulePath) -> Result<&Tensor> {
        self.get_weights(path)
    }

    fn logits_with(&self, x: &InputBatch, path: ModulePath, weight: &Tensor) -> Result<Tensor> {
        self.forward_with_replacement(x, path, weight)
    }

    fn input_rows(&self, x: &InputBatch) -> usize {
        x.batch_size()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationConfig {
    pub trials: usize,
    pub master_seed: u64,
    /// Noise std as a multiple of the module's own std.
    pub noise_multiplier: f64,
    /// Divide each disagreement by the number of input rows.
    pub per_sample: bool,
    /// Score modules on the rayon pool; results are identical either way.
    pub parallel: bool,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        Self {
            trials: 5,
            master_seed: 0,
            noise_multiplier: 1.0,
            per_sample: false,
            parallel: false,
        }
    }
}

/// Per-module disagreement rates, ordered kind-major then by layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreVector {
    pub scores: BTreeMap<ModulePath, f64>,
    pub seed: u64,
    pub trials: usize,
    pub noise_multiplier: f64,
    /// Where the scoring text came from and how many sentences it held.
    pub corpus_source: Option<String>,
    pub corpus_size: Option<usize>,
    /// Init seed of the scored model, when it was built from a config.
    pub model_seed: Option<u64>,
}

#[derive(Serialize, Deserialize)]
struct ScoreFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tool_version: Option<String>,
    seed: u64,
    trials: usize,
    #[serde(default = "one")]
    noise_multiplier: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    corpus_source: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    corpus_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    model_seed: Option<u64>,
    scores: BTreeMap<ModuleKind, Vec<f64>>,
}

fn one() -> f64 {
    1.0
}

impl ScoreVector {
    /// Scores without run provenance (e.g. hand-written or random vectors).
    pub fn from_map(scores: BTreeMap<ModulePath, f64>) -> Result<Self> {
        let sv = Self {
            scores,
            seed: 0,
            trials: 0,
            noise_multiplier: 1.0,
            corpus_source: None,
            corpus_size: None,
            model_seed: None,
        };
        sv.validate()?;
        Ok(sv)
    }

    /// Scores for one kind, indexed by layer.
    pub fn from_kind_values(kind: ModuleKind, values: &[f64]) -> Result<Self> {
        Self::from_map(
            values
                .iter()
                .enumerate()
                .map(|(l, &v)| (ModulePath::new(kind, l), v))
                .collect(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.scores.is_empty() {
            return Err(Error::InvalidArgument("score vector is empty".into()));
        }
        if let Some((p, v)) = self.scores.iter().find(|(_, v)| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::InvalidArgument(format!("score for {p} is {v}; must be finite and >= 0")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn paths(&self) -> Vec<ModulePath> {
        self.scores.keys().copied().collect()
    }

    pub fn values(&self) -> Vec<f64> {
        self.scores.values().copied().collect()
    }

    pub fn kinds(&self) -> Vec<ModuleKind> {
        let mut kinds: Vec<ModuleKind> = self.scores.keys().map(|p| p.kind).collect();
        kinds.dedup();
        kinds
    }

    /// The sub-vector for one kind.
    pub fn restrict(&self, kind: ModuleKind) -> Result<Self> {
        let mut sv = self.clone();
        sv.scores.retain(|p, _| p.kind == kind);
        sv.validate()?;
        Ok(sv)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut scores: BTreeMap<ModuleKind, Vec<f64>> = BTreeMap::new();
        for kind in self.kinds() {
            let entries: Vec<(&ModulePath, &f64)> = self.scores.iter().filter(|(p, _)| p.kind == kind).collect();
            if entries.iter().enumerate().any(|(i, (p, _))| p.layer != i) {
                return Err(Error::InvalidArgument(format!("scores for {kind} do not cover layers contiguously")));
            }
            scores.insert(kind, entries.into_iter().map(|(_, &v)| v).collect());
        }
        let file = ScoreFile {
            tool_version: Some(crate::TOOL_VERSION.to_string()),
            seed: self.seed,
            trials: self.trials,
            noise_multiplier: self.noise_multiplier,
            corpus_source: self.corpus_source.clone(),
            corpus_size: self.corpus_size,
            model_seed: self.model_seed,
            scores,
        };
        crate::fileio::to_json(&file)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ScoreFile = serde_json::from_str(text)?;
        let scores = file
            .scores
            .into_iter()
            .flat_map(|(kind, vals)| vals.into_iter().enumerate().map(move |(l, v)| (ModulePath::new(kind, l), v)))
            .collect();
        let sv = Self {
            scores,
            seed: file.seed,
            trials: file.trials,
            noise_multiplier: file.noise_multiplier,
            corpus_source: file.corpus_source,
            corpus_size: file.corpus_size,
            model_seed: file.model_seed,
        };
        sv.validate()?;
        Ok(sv)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::fileio::write_text(path, &self.to_json()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        crate::fileio::read_text(path)
            .and_then(|t| Self::from_json(&t))
            .map_err(|e| e.in_file(path))
    }
}

/// `W + δ` with `δ ~ N(0, noise_multiplier * std(W))` elementwise.
pub fn perturb_instance<M: Perturbable + ?Sized>(
    model: &M,
    path: ModulePath,
    noise_multiplier: f64,
    rng: &mut RngStream,
) -> Result<Tensor> {
    let w = model.module_weight(path)?;
    let std = noise_multiplier * population_std(w)?;
    let delta = gaussian(w.shape(), 0.0, std, rng)?;
    w.add(&delta)
}

/// ℓ1 distance between the logits of two independently perturbed instances.
pub fn pair_disagreement<M: Perturbable + ?Sized>(
    model: &M,
    path: ModulePath,
    x: &M::Input,
    noise_multiplier: f64,
    rng_a: &mut RngStream,
    rng_b: &mut RngStream,
) -> Result<f64> {
    let wa = perturb_instance(model, path, noise_multiplier, rng_a)?;
    let wb = perturb_instance(model, path, noise_multiplier, rng_b)?;
    let la = model.logits_with(x, path, &wa)?;
    let lb = model.logits_with(x, path, &wb)?;
    l1_diff(&la, &lb)
}

/// Substream for one perturbed instance of one trial.
pub fn instance_stream(master_seed: u64, path: ModulePath, trial: usize, instance: u64) -> RngStream {
    RngStream::derived(master_seed, &[path.stream_key(), trial as u64, instance])
}

fn score_one<M: Perturbable + ?Sized>(model: &M, path: ModulePath, x: &M::Input, cfg: &PerturbationConfig) -> Result<f64> {
    let mut total = 0.0;
    for trial in 0..cfg.trials {
        let mut a = instance_stream(cfg.master_seed, path, trial, 0);
        let mut b = instance_stream(cfg.master_seed, path, trial, 1);
        total += pair_disagreement(model, path, x, cfg.noise_multiplier, &mut a, &mut b)?;
    }
    let mut score = total / cfg.trials as f64;
    if cfg.per_sample {
        score /= model.input_rows(x) as f64;
    }
    Ok(score)
}

/// Mean pair disagreement over `cfg.trials` trials for every path.
pub fn score_modules<M: Perturbable + ?Sized>(
    model: &M,
    paths: &[ModulePath],
    x: &M::Input,
    cfg: &PerturbationConfig,
) -> Result<ScoreVector> {
    if paths.is_empty() {
        return Err(Error::InvalidArgument("no modules to score".into()));
    }
    if cfg.trials == 0 {
        return Err(Error::InvalidArgument("trials must be >= 1".into()));
    }
    if !(cfg.noise_multiplier.is_finite() && cfg.noise_multiplier >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "noise multiplier must be finite and >= 0, got {}",
            cfg.noise_multiplier
        )));
    }
    let values: Vec<f64> = if cfg.parallel {
        paths
            .par_iter()
            .map(|&p| score_one(model, p, x, cfg))
            .collect::<Result<_>>()?
    } else {
        paths.iter().map(|&p| score_one(model, p, x, cfg)).collect::<Result<_>>()?
    };
    let sv = ScoreVector {
        scores: paths.iter().copied().zip(values).collect(),
        seed: cfg.master_seed,
        trials: cfg.trials,
        noise_multiplier: cfg.noise_multiplier,
        corpus_source: None,
        corpus_size: None,
        model_seed: None,
    };
    sv.validate()?;
    Ok(sv)
}
