use std::collections::BTreeMap;

use super::{ModelConfig, ModuleKind, ModulePath};
use crate::data::{fnv1a_64, Tokenizer, PAD_ID};
use crate::error::{Error, Result};
use crate::numerics::{gaussian, KeyMask, RngStream, Tape, Tensor, Var};

/// Weights of one post-norm encoder block.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub query: Tensor,
    pub query_bias: Tensor,
    pub key: Tensor,
    pub key_bias: Tensor,
    pub value: Tensor,
    pub value_bias: Tensor,
    pub attn_out: Tensor,
    pub attn_out_bias: Tensor,
    pub attn_norm_gain: Tensor,
    pub attn_norm_bias: Tensor,
    /// Feed-forward input projection, the adaptable `dense` module.
    pub dense: Tensor,
    pub dense_bias: Tensor,
    pub ff_out: Tensor,
    pub ff_out_bias: Tensor,
    pub ff_norm_gain: Tensor,
    pub ff_norm_bias: Tensor,
}

const LAYER_FIELDS: [&str; 16] = [
    "query",
    "query_bias",
    "key",
    "key_bias",
    "value",
    "value_bias",
    "attn_out",
    "attn_out_bias",
    "attn_norm.gain",
    "attn_norm.bias",
    "dense",
    "dense_bias",
    "ff_out",
    "ff_out_bias",
    "ff_norm.gain",
    "ff_norm.bias",
];

impl LayerWeights {
    fn fields(&self) -> [&Tensor; 16] {
        [
            &self.query,
            &self.query_bias,
            &self.key,
            &self.key_bias,
            &self.value,
            &self.value_bias,
            &self.attn_out,
            &self.attn_out_bias,
            &self.attn_norm_gain,
            &self.attn_norm_bias,
            &self.dense,
            &self.dense_bias,
            &self.ff_out,
            &self.ff_out_bias,
            &self.ff_norm_gain,
            &self.ff_norm_bias,
        ]
    }

    fn fields_mut(&mut self) -> [&mut Tensor; 16] {
        [
            &mut self.query,
            &mut self.query_bias,
            &mut self.key,
            &mut self.key_bias,
            &mut self.value,
            &mut self.value_bias,
            &mut self.attn_out,
            &mut self.attn_out_bias,
            &mut self.attn_norm_gain,
            &mut self.attn_norm_bias,
            &mut self.dense,
            &mut self.dense_bias,
            &mut self.ff_out,
            &mut self.ff_out_bias,
            &mut self.ff_norm_gain,
            &mut self.ff_norm_bias,
        ]
    }

    fn adaptable(&self, kind: ModuleKind) -> (&Tensor, &Tensor) {
        match kind {
            ModuleKind::Query => (&self.query, &self.query_bias),
            ModuleKind::Key => (&self.key, &self.key_bias),
            ModuleKind::Value => (&self.value, &self.value_bias),
            ModuleKind::Dense => (&self.dense, &self.dense_bias),
        }
    }

    fn adaptable_mut(&mut self, kind: ModuleKind) -> &mut Tensor {
        match kind {
            ModuleKind::Query => &mut self.query,
            ModuleKind::Key => &mut self.key,
            ModuleKind::Value => &mut self.value,
            ModuleKind::Dense => &mut self.dense,
        }
    }
}

/// Token ids for a batch of sequences, plus optional labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InputBatch {
    ids: Vec<u32>,
    batch: usize,
    seq_len: usize,
    labels: Option<Vec<usize>>,
}

impl InputBatch {
    pub fn new(ids: Vec<u32>, batch: usize, seq_len: usize, labels: Option<Vec<usize>>) -> Result<Self> {
        if batch == 0 || seq_len == 0 || ids.len() != batch * seq_len {
            return Err(Error::InvalidArgument(format!(
                "batch of {} ids is not {batch} x {seq_len}",
                ids.len()
            )));
        }
        if let Some(l) = &labels {
            if l.len() != batch {
                return Err(Error::InvalidArgument(format!("{} labels for batch of {batch}", l.len())));
            }
        }
        Ok(Self { ids, batch, seq_len, labels })
    }

    /// Tokenizes each text to exactly `seq_len` ids.
    pub fn from_texts<S: AsRef<str>>(
        tokenizer: &Tokenizer,
        texts: &[S],
        seq_len: usize,
        labels: Option<Vec<usize>>,
    ) -> Result<Self> {
        let ids = texts
            .iter()
            .flat_map(|t| tokenizer.tokenize(t.as_ref(), seq_len))
            .collect();
        Self::new(ids, texts.len(), seq_len, labels)
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }
}

/// Low-rank factors for one module, already placed on a tape.
#[derive(Clone, Copy, Debug)]
pub struct AdapterVars {
    pub a: Var,
    pub b: Var,
    pub scale: f64,
}

/// Substitutions applied while building the forward graph.
#[derive(Default)]
pub struct ForwardHooks<'h> {
    /// Uses this tensor in place of the stored weight for one module.
    pub replacement: Option<(ModulePath, &'h Tensor)>,
    /// Adds `scale * (x A) B` to the module output.
    pub adapters: BTreeMap<ModulePath, AdapterVars>,
    /// Classification head `(weight, bias)` to use instead of the stored one.
    pub head: Option<(Var, Var)>,
}

/// Post-norm transformer encoder with first-token pooling and a linear head.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerModel {
    config: ModelConfig,
    pub token_embedding: Tensor,
    pub position_embedding: Tensor,
    pub embed_norm_gain: Tensor,
    pub embed_norm_bias: Tensor,
    pub layers: Vec<LayerWeights>,
    pub head: Tensor,
    pub head_bias: Tensor,
}

fn init_tensor(seed: u64, name: &str, shape: &[usize], std: f64) -> Result<Tensor> {
    let mut rng = RngStream::derived(seed, &[fnv1a_64(name.as_bytes())]);
    gaussian(shape, 0.0, std, &mut rng)
}

impl TransformerModel {
    /// Seeded initialization. Embeddings are `N(0, 1)` (positions `N(0, 0.5)`),
    /// projections `N(0, 1/d_in)`, biases zero, norm gains one. Each tensor draws
    /// from its own substream keyed by its canonical name.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let proj = |name: String, d_in: usize, d_out: usize| init_tensor(seed, &name, &[d_in, d_out], 1.0 / (d_in as f64).sqrt());
        let mut layers = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            let n = |f: &str| format!("layer.{l}.{f}");
            layers.push(LayerWeights {
                query: proj(n("query"), d, d)?,
                query_bias: Tensor::zeros(&[d]),
                key: proj(n("key"), d, d)?,
                key_bias: Tensor::zeros(&[d]),
                value: proj(n("value"), d, d)?,
                value_bias: Tensor::zeros(&[d]),
                attn_out: proj(n("attn_out"), d, d)?,
                attn_out_bias: Tensor::zeros(&[d]),
                attn_norm_gain: Tensor::filled(&[d], 1.0),
                attn_norm_bias: Tensor::zeros(&[d]),
                dense: proj(n("dense"), d, config.d_ff)?,
                dense_bias: Tensor::zeros(&[config.d_ff]),
                ff_out: proj(n("ff_out"), config.d_ff, d)?,
                ff_out_bias: Tensor::zeros(&[d]),
                ff_norm_gain: Tensor::filled(&[d], 1.0),
                ff_norm_bias: Tensor::zeros(&[d]),
            });
        }
        Ok(Self {
            config: config.clone(),
            token_embedding: init_tensor(seed, "embed.token", &[config.vocab_size, d], 1.0)?,
            position_embedding: init_tensor(seed, "embed.position", &[config.max_seq_len, d], 0.5)?,
            embed_norm_gain: Tensor::filled(&[d], 1.0),
            embed_norm_bias: Tensor::zeros(&[d]),
            layers,
            head: init_tensor(seed, "head", &[d, config.num_classes], 1.0 / (d as f64).sqrt())?,
            head_bias: Tensor::zeros(&[config.num_classes]),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn list_modules(&self, kinds: &[ModuleKind]) -> Result<Vec<ModulePath>> {
        super::list_modules(self.config.num_layers, kinds)
    }

    fn check_path(&self, path: ModulePath) -> Result<()> {
        if path.layer >= self.config.num_layers {
            return Err(Error::UnknownModule(path.to_string()));
        }
        Ok(())
    }

    pub fn get_weights(&self, path: ModulePath) -> Result<&Tensor> {
        self.check_path(path)?;
        Ok(self.layers[path.layer].adaptable(path.kind).0)
    }

    pub fn set_weights(&mut self, path: ModulePath, t: Tensor) -> Result<()> {
        self.check_path(path)?;
        let slot = self.layers[path.layer].adaptable_mut(path.kind);
        slot.check_same_shape("set_weights", &t)?;
        *slot = t;
        Ok(())
    }

    /// Every tensor with its canonical name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("embed.token".to_string(), &self.token_embedding),
            ("embed.position".to_string(), &self.position_embedding),
            ("embed.norm.gain".to_string(), &self.embed_norm_gain),
            ("embed.norm.bias".to_string(), &self.embed_norm_bias),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            for (field, t) in LAYER_FIELDS.iter().zip(layer.fields()) {
                out.push((format!("layer.{l}.{field}"), t));
            }
        }
        out.push(("head".to_string(), &self.head));
        out.push(("head_bias".to_string(), &self.head_bias));
        out
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        match name {
            "embed.token" => return Some(&mut self.token_embedding),
            "embed.position" => return Some(&mut self.position_embedding),
            "embed.norm.gain" => return Some(&mut self.embed_norm_gain),
            "embed.norm.bias" => return Some(&mut self.embed_norm_bias),
            "head" => return Some(&mut self.head),
            "head_bias" => return Some(&mut self.head_bias),
            _ => {}
        }
        let rest = name.strip_prefix("layer.")?;
        let (layer, field) = rest.split_once('.')?;
        let layer: usize = layer.parse().ok()?;
        let idx = LAYER_FIELDS.iter().position(|f| *f == field)?;
        self.layers.get_mut(layer).map(|lw| lw.fields_mut().into_iter().nth(idx).unwrap())
    }

    /// Checksum of every tensor except the classification head.
    pub fn encoder_checksum(&self) -> u64 {
        self.named_tensors()
            .iter()
            .filter(|(n, _)| !n.starts_with("head"))
            .fold(0u64, |acc, (_, t)| acc.rotate_left(7) ^ t.checksum())
    }

    pub fn checksum(&self) -> u64 {
        self.named_tensors()
            .iter()
            .fold(0u64, |acc, (_, t)| acc.rotate_left(7) ^ t.checksum())
    }

    /// Number of parameters outside the classification head.
    pub fn non_head_param_count(&self) -> usize {
        self.named_tensors()
            .iter()
            .filter(|(n, _)| !n.starts_with("head"))
            .map(|(_, t)| t.len())
            .sum()
    }

    pub fn head_param_count(&self) -> usize {
        self.head.len() + self.head_bias.len()
    }

    fn validate_batch(&self, x: &InputBatch) -> Result<()> {
        if x.seq_len > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: x.seq_len,
                max: self.config.max_seq_len,
            });
        }
        if let Some(&id) = x.ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                vocab_size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Logits `[batch, num_classes]`.
    pub fn forward(&self, x: &InputBatch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let out = self.forward_tape(&mut tape, x, &ForwardHooks::default())?;
        Ok(tape.value(out).clone())
    }

    /// Logits with one module's weight replaced; the stored weights are untouched.
    pub fn forward_with_replacement(&self, x: &InputBatch, path: ModulePath, weight: &Tensor) -> Result<Tensor> {
        self.get_weights(path)?.check_same_shape("replacement", weight)?;
        let mut tape = Tape::new();
        let hooks = ForwardHooks {
            replacement: Some((path, weight)),
            ..ForwardHooks::default()
        };
        let out = self.forward_tape(&mut tape, x, &hooks)?;
        Ok(tape.value(out).clone())
    }

    /// Records the forward pass on `tape` and returns the logits node.
    pub fn forward_tape<'a>(&'a self, tape: &mut Tape<'a>, x: &InputBatch, hooks: &ForwardHooks<'a>) -> Result<Var> {
        self.validate_batch(x)?;
        let cfg = &self.config;
        let (batch, seq, d) = (x.batch, x.seq_len, cfg.d_model);

        let mut embedded = vec![0.0; batch * seq * d];
        for (pos, (row, &id)) in embedded.chunks_exact_mut(d).zip(&x.ids).enumerate() {
            let tok = self.token_embedding.row(id as usize);
            let p = self.position_embedding.row(pos % seq);
            for j in 0..d {
                row[j] = tok[j] + p[j];
            }
        }
        let mask = KeyMask {
            keep: x.ids.iter().map(|&id| id != PAD_ID).collect(),
            heads: cfg.num_heads,
            seq,
        };

        let h0 = tape.constant_owned(Tensor::from_parts(vec![batch * seq, d], embedded));
        let (g, b) = (tape.constant(&self.embed_norm_gain), tape.constant(&self.embed_norm_bias));
        let mut h = tape.layer_norm(h0, g, b)?;

        let inv_sqrt_dh = 1.0 / (cfg.head_dim() as f64).sqrt();
        for (l, lw) in self.layers.iter().enumerate() {
            let q = self.project(tape, h, ModulePath::new(ModuleKind::Query, l), hooks)?;
            let k = self.project(tape, h, ModulePath::new(ModuleKind::Key, l), hooks)?;
            let v = self.project(tape, h, ModulePath::new(ModuleKind::Value, l), hooks)?;
            let qh = tape.split_heads(q, batch, seq, cfg.num_heads)?;
            let kh = tape.split_heads(k, batch, seq, cfg.num_heads)?;
            let vh = tape.split_heads(v, batch, seq, cfg.num_heads)?;
            let scores = tape.batch_matmul(qh, kh, true)?;
            let scores = tape.scale(scores, inv_sqrt_dh);
            let probs = tape.softmax_masked(scores, Some(&mask))?;
            let ctx = tape.batch_matmul(probs, vh, false)?;
            let ctx = tape.merge_heads(ctx, batch, seq, cfg.num_heads)?;
            let attn = linear(tape, ctx, &lw.attn_out, &lw.attn_out_bias)?;
            let res = tape.add(h, attn)?;
            let (g, b) = (tape.constant(&lw.attn_norm_gain), tape.constant(&lw.attn_norm_bias));
            h = tape.layer_norm(res, g, b)?;

            let ff = self.project(tape, h, ModulePath::new(ModuleKind::Dense, l), hooks)?;
            let ff = tape.gelu(ff);
            let ff = linear(tape, ff, &lw.ff_out, &lw.ff_out_bias)?;
            let res = tape.add(h, ff)?;
            let (g, b) = (tape.constant(&lw.ff_norm_gain), tape.constant(&lw.ff_norm_bias));
            h = tape.layer_norm(res, g, b)?;
        }

        let pooled = tape.first_token(h, seq)?;
        let (w, b) = match hooks.head {
            Some(head) => head,
            None => (tape.constant(&self.head), tape.constant(&self.head_bias)),
        };
        let logits = tape.matmul(pooled, w)?;
        tape.add_row(logits, b)
    }

    fn project<'a>(&'a self, tape: &mut Tape<'a>, x: Var, path: ModulePath, hooks: &ForwardHooks<'a>) -> Result<Var> {
        let (stored, bias) = self.layers[path.layer].adaptable(path.kind);
        let weight = match hooks.replacement {
            Some((p, t)) if p == path => t,
            _ => stored,
        };
        let mut y = linear(tape, x, weight, bias)?;
        if let Some(ad) = hooks.adapters.get(&path) {
            let xa = tape.matmul(x, ad.a)?;
            let xab = tape.matmul(xa, ad.b)?;
            let update = tape.scale(xab, ad.scale);
            y = tape.add(y, update)?;
        }
        Ok(y)
    }
}

fn linear<'a>(tape: &mut Tape<'a>, x: Var, w: &'a Tensor, b: &'a Tensor) -> Result<Var> {
    let w = tape.constant(w);
    let b = tape.constant(b);
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}
