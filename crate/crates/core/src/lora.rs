//! Heterogeneous-rank LoRA adapters.
//!
//! A [`RankPlan`] assigns an integer rank to each adaptable module. Attaching
//! a plan gives every module with rank >= 1 an update `scale * A B`, where
//! `A ~ N(0, 0.02)` is `d_in x rank` and `B = 0` is `rank x d_out`, so the
//! adapted model starts out computing exactly what the base model computes.
//! Rank-0 modules stay frozen.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AdapterVars, ForwardHooks, InputBatch, ModelConfig, ModuleKind, ModulePath, TransformerModel};
use crate::numerics::{gaussian, matmul, RngStream, Tape, Tensor, Var};

/// Standard deviation of the `A` factor at attach time.
pub const LORA_A_INIT_STD: f64 = 0.02;

/// How a plan was produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    AdarankSeparate,
    AdarankJoint,
    Uniform,
    Random,
    Manual,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::AdarankSeparate => "adarank-separate",
            Provenance::AdarankJoint => "adarank-joint",
            Provenance::Uniform => "uniform",
            Provenance::Random => "random",
            Provenance::Manual => "manual",
        })
    }
}

/// Per-module integer ranks under an average-rank target.
#[derive(Clone, Debug, PartialEq)]
pub struct RankPlan {
    pub entries: BTreeMap<ModulePath, usize>,
    pub target_avg_rank: f64,
    pub provenance: Provenance,
    /// Lower clamp applied after flooring (0 means none).
    pub min_rank: usize,
    /// Seeds that produced the plan, by role.
    pub seeds: BTreeMap<String, u64>,
}

/// On-disk plan schema.
#[derive(Serialize, Deserialize)]
struct PlanFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tool_version: Option<String>,
    target_avg_rank: f64,
    provenance: Provenance,
    #[serde(default, skip_serializing_if = "is_zero")]
    min_rank: usize,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    seeds: BTreeMap<String, u64>,
    ranks: BTreeMap<ModuleKind, Vec<usize>>,
}

fn is_zero(v: &usize) -> bool {
    *v == 0
}

impl RankPlan {
    pub fn new(entries: BTreeMap<ModulePath, usize>, target_avg_rank: f64, provenance: Provenance) -> Result<Self> {
        if !(target_avg_rank.is_finite() && target_avg_rank > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "target average rank must be positive, got {target_avg_rank}"
            )));
        }
        Ok(Self {
            entries,
            target_avg_rank,
            provenance,
            min_rank: 0,
            seeds: BTreeMap::new(),
        })
    }

    /// Same rank on every path.
    pub fn uniform(paths: &[ModulePath], rank: usize) -> Result<Self> {
        Self::new(paths.iter().map(|&p| (p, rank)).collect(), rank as f64, Provenance::Uniform)
    }

    /// Builds a plan from per-kind rank lists indexed by layer.
    pub fn from_kind_lists(
        lists: &[(ModuleKind, Vec<usize>)],
        target_avg_rank: f64,
        provenance: Provenance,
    ) -> Result<Self> {
        let entries = lists
            .iter()
            .flat_map(|(kind, ranks)| ranks.iter().enumerate().map(move |(layer, &r)| (ModulePath::new(*kind, layer), r)))
            .collect();
        Self::new(entries, target_avg_rank, provenance)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn rank(&self, path: ModulePath) -> usize {
        self.entries.get(&path).copied().unwrap_or(0)
    }

    pub fn mean_rank(&self) -> f64 {
        if self.entries.is_empty() {
            return 0.0;
        }
        self.entries.values().sum::<usize>() as f64 / self.entries.len() as f64
    }

    pub fn kinds(&self) -> Vec<ModuleKind> {
        let mut kinds: Vec<ModuleKind> = self.entries.keys().map(|p| p.kind).collect();
        kinds.dedup();
        kinds
    }

    /// Ranks for one kind, in layer order.
    pub fn ranks_for(&self, kind: ModuleKind) -> Vec<usize> {
        self.entries
            .iter()
            .filter(|(p, _)| p.kind == kind)
            .map(|(_, &r)| r)
            .collect()
    }

    /// Every path exists in a model with this config.
    pub fn check_against(&self, config: &ModelConfig) -> Result<()> {
        match self.entries.keys().find(|p| p.layer >= config.num_layers) {
            Some(p) => Err(Error::UnknownModule(format!(
                "{p} (model has {} layers)",
                config.num_layers
            ))),
            None => Ok(()),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut ranks: BTreeMap<ModuleKind, Vec<usize>> = BTreeMap::new();
        for kind in self.kinds() {
            let layers: Vec<usize> = self.entries.keys().filter(|p| p.kind == kind).map(|p| p.layer).collect();
            if layers.iter().enumerate().any(|(i, &l)| i != l) {
                return Err(Error::InvalidArgument(format!(
                    "plan for {kind} does not cover layers 0..{} contiguously",
                    layers.len()
                )));
            }
            ranks.insert(kind, self.ranks_for(kind));
        }
        let file = PlanFile {
            tool_version: Some(crate::TOOL_VERSION.to_string()),
            target_avg_rank: self.target_avg_rank,
            provenance: self.provenance,
            min_rank: self.min_rank,
            seeds: self.seeds.clone(),
            ranks,
        };
        crate::fileio::to_json(&file)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: PlanFile = serde_json::from_str(text)?;
        let lists: Vec<(ModuleKind, Vec<usize>)> = file.ranks.into_iter().collect();
        let mut plan = Self::from_kind_lists(&lists, file.target_avg_rank, file.provenance)?;
        plan.min_rank = file.min_rank;
        plan.seeds = file.seeds;
        Ok(plan)
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

/// `sum(rank * (d_in + d_out))` over the plan, head excluded.
pub fn trainable_param_count(plan: &RankPlan, config: &ModelConfig) -> usize {
    plan.entries
        .iter()
        .map(|(p, &r)| {
            let (d_in, d_out) = config.module_dims(p.kind);
            r * (d_in + d_out)
        })
        .sum()
}

/// Adapter parameters contributed by each kind present in the plan.
pub fn trainable_params_by_kind(plan: &RankPlan, config: &ModelConfig) -> BTreeMap<ModuleKind, usize> {
    let mut out = BTreeMap::new();
    for (p, &r) in &plan.entries {
        let (d_in, d_out) = config.module_dims(p.kind);
        *out.entry(p.kind).or_insert(0) += r * (d_in + d_out);
    }
    out
}

/// BERT-style encoder dimensions for parameter arithmetic.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderDims {
    pub num_layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub type_vocab_size: usize,
}

impl EncoderDims {
    /// BERT-base (cased) dimensions.
    pub const BERT_BASE_CASED: EncoderDims = EncoderDims {
        num_layers: 12,
        d_model: 768,
        d_ff: 3072,
        vocab_size: 28_996,
        max_positions: 512,
        type_vocab_size: 2,
    };

    /// Parameters of the embeddings, encoder blocks and pooler (everything but
    /// the task head), with all biases and layer-norm parameters counted.
    pub fn non_head_params(&self) -> usize {
        let d = self.d_model;
        let embeddings = (self.vocab_size + self.max_positions + self.type_vocab_size) * d + 2 * d;
        let attention = 4 * (d * d + d) + 2 * d;
        let feed_forward = (d * self.d_ff + self.d_ff) + (self.d_ff * d + d) + 2 * d;
        let pooler = d * d + d;
        embeddings + self.num_layers * (attention + feed_forward) + pooler
    }

    /// Config with these dimensions, for plan arithmetic only.
    pub fn as_model_config(&self) -> ModelConfig {
        ModelConfig {
            num_layers: self.num_layers,
            d_model: self.d_model,
            num_heads: 1,
            d_ff: self.d_ff,
            vocab_size: self.vocab_size,
            max_seq_len: self.max_positions,
            num_classes: 2,
        }
    }
}

/// Low-rank factor pair for one module.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub a: Tensor,
    pub b: Tensor,
    pub scale: f64,
}

impl LoraAdapter {
    pub fn rank(&self) -> usize {
        self.a.shape()[1]
    }

    /// `scale * A B`.
    pub fn delta(&self) -> Result<Tensor> {
        Ok(matmul(&self.a, &self.b)?.scale(self.scale))
    }
}

/// Identifies a trainable tensor of an [`AdaptedModel`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TrainableParam {
    A(ModulePath),
    B(ModulePath),
    HeadWeight,
    HeadBias,
}

/// A base model with frozen encoder weights, adapters, and a trainable head.
#[derive(Clone, Debug)]
pub struct AdaptedModel {
    base: TransformerModel,
    adapters: BTreeMap<ModulePath, LoraAdapter>,
    plan: RankPlan,
    merged: bool,
}

/// Attaches adapters with the default scale of 1.
pub fn attach(model: TransformerModel, plan: &RankPlan, rng: &mut RngStream) -> Result<AdaptedModel> {
    attach_with_scale(model, plan, 1.0, rng)
}

pub fn attach_with_scale(model: TransformerModel, plan: &RankPlan, scale: f64, rng: &mut RngStream) -> Result<AdaptedModel> {
    plan.check_against(model.config())?;
    let mut adapters = BTreeMap::new();
    for (&path, &rank) in &plan.entries {
        if rank == 0 {
            continue;
        }
        let (d_in, d_out) = model.config().module_dims(path.kind);
        adapters.insert(
            path,
            LoraAdapter {
                a: gaussian(&[d_in, rank], 0.0, LORA_A_INIT_STD, rng)?,
                b: Tensor::zeros(&[rank, d_out]),
                scale,
            },
        );
    }
    Ok(AdaptedModel {
        base: model,
        adapters,
        plan: plan.clone(),
        merged: false,
    })
}

impl AdaptedModel {
    pub fn base(&self) -> &TransformerModel {
        &self.base
    }

    pub fn plan(&self) -> &RankPlan {
        &self.plan
    }

    pub fn adapters(&self) -> &BTreeMap<ModulePath, LoraAdapter> {
        &self.adapters
    }

    pub fn adapter_mut(&mut self, path: ModulePath) -> Option<&mut LoraAdapter> {
        self.adapters.get_mut(&path)
    }

    /// Adapter parameters plus head parameters.
    pub fn trainable_param_count(&self) -> usize {
        self.adapter_param_count() + self.base.head_param_count()
    }

    pub fn adapter_param_count(&self) -> usize {
        self.adapters.values().map(|a| a.a.len() + a.b.len()).sum()
    }

    pub fn forward(&self, x: &InputBatch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut hooks = ForwardHooks::default();
        for (&path, ad) in &self.adapters {
            let a = tape.constant(&ad.a);
            let b = tape.constant(&ad.b);
            hooks.adapters.insert(path, AdapterVars { a, b, scale: ad.scale });
        }
        let out = self.base.forward_tape(&mut tape, x, &hooks)?;
        Ok(tape.value(out).clone())
    }

    /// Records a forward pass in which adapters and head are gradient leaves.
    pub fn forward_trainable<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        x: &InputBatch,
    ) -> Result<(Var, Vec<(TrainableParam, Var)>)> {
        let mut hooks = ForwardHooks::default();
        let mut params = Vec::with_capacity(2 * self.adapters.len() + 2);
        for (&path, ad) in &self.adapters {
            let a = tape.param(&ad.a);
            let b = tape.param(&ad.b);
            params.push((TrainableParam::A(path), a));
            params.push((TrainableParam::B(path), b));
            hooks.adapters.insert(path, AdapterVars { a, b, scale: ad.scale });
        }
        let hw = tape.param(&self.base.head);
        let hb = tape.param(&self.base.head_bias);
        params.push((TrainableParam::HeadWeight, hw));
        params.push((TrainableParam::HeadBias, hb));
        hooks.head = Some((hw, hb));
        let out = self.base.forward_tape(tape, x, &hooks)?;
        Ok((out, params))
    }

    pub fn param_mut(&mut self, id: TrainableParam) -> Option<&mut Tensor> {
        match id {
            TrainableParam::A(p) => self.adapters.get_mut(&p).map(|a| &mut a.a),
            TrainableParam::B(p) => self.adapters.get_mut(&p).map(|a| &mut a.b),
            TrainableParam::HeadWeight => Some(&mut self.base.head),
            TrainableParam::HeadBias => Some(&mut self.base.head_bias),
        }
    }

    pub fn param(&self, id: TrainableParam) -> Option<&Tensor> {
        match id {
            TrainableParam::A(p) => self.adapters.get(&p).map(|a| &a.a),
            TrainableParam::B(p) => self.adapters.get(&p).map(|a| &a.b),
            TrainableParam::HeadWeight => Some(&self.base.head),
            TrainableParam::HeadBias => Some(&self.base.head_bias),
        }
    }

    /// Bakes `W + scale * A B` into a standalone model. Allowed once.
    pub fn merge(&mut self) -> Result<TransformerModel> {
        if self.merged {
            return Err(Error::AlreadyMerged);
        }
        let mut merged = self.base.clone();
        for (&path, ad) in &self.adapters {
            let w = merged.get_weights(path)?.add(&ad.delta()?)?;
            merged.set_weights(path, w)?;
        }
        self.merged = true;
        Ok(merged)
    }

    pub fn is_merged(&self) -> bool {
        self.merged
    }
}
