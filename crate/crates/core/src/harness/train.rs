//! LoRA finetuning with Adam, plus accuracy and ROC AUC.

use std::collections::BTreeMap;
use std::fmt;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Tokenizer};
use crate::error::{Error, Result};
use crate::lora::{attach_with_scale, trainable_param_count, AdaptedModel, RankPlan, TrainableParam};
use crate::model::{InputBatch, ModelConfig, TransformerModel};
use crate::numerics::{RngStream, Tape, Tensor};

const STREAM_ATTACH: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const EVAL_BATCH: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Multiplier on every adapter update `A B`.
    pub lora_scale: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            lora_scale: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate >= 0.0
            && self.learning_rate.is_finite()
            && self.batch_size >= 1
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && self.lora_scale.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid training config: {self}")))
        }
    }
}

impl fmt::Display for TrainConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "lr={:e} batch={} epochs={} seed={}",
            self.learning_rate, self.batch_size, self.epochs, self.seed
        )
    }
}

/// Adam with bias correction, one moment pair per trainable tensor.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    step: i32,
    moments: BTreeMap<TrainableParam, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            epsilon: cfg.epsilon,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    pub fn update(&mut self, id: TrainableParam, param: &mut Tensor, grad: &Tensor) {
        let n = param.len();
        let (m, v) = self.moments.entry(id).or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (((p, &g), m), v) in param.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.epsilon);
        }
    }
}

/// A dataset tokenized to a fixed sequence length.
#[derive(Clone, Debug)]
pub struct EncodedSet {
    ids: Vec<u32>,
    labels: Vec<usize>,
    seq_len: usize,
    num_classes: usize,
}

impl EncodedSet {
    pub fn new(dataset: &Dataset, tokenizer: &Tokenizer, seq_len: usize) -> Self {
        Self {
            ids: dataset.records.iter().flat_map(|r| tokenizer.tokenize(&r.text, seq_len)).collect(),
            labels: dataset.labels(),
            seq_len,
            num_classes: dataset.num_classes,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn batch(&self, indices: &[usize]) -> Result<InputBatch> {
        let s = self.seq_len;
        let ids = indices.iter().flat_map(|&i| self.ids[i * s..(i + 1) * s].iter().copied()).collect();
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        InputBatch::new(ids, indices.len(), s, Some(labels))
    }
}

/// Longest tokenized record across `datasets`, capped at the model's limit.
pub fn fit_seq_len(config: &ModelConfig, datasets: &[&Dataset]) -> usize {
    let tok = Tokenizer::new(config.vocab_size).expect("validated config");
    let longest = datasets
        .iter()
        .flat_map(|d| d.records.iter())
        .map(|r| tok.token_count(&r.text))
        .max()
        .unwrap_or(1);
    longest.clamp(1, config.max_seq_len)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    /// Present for two-class problems.
    pub auc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub test_auc: Option<f64>,
    /// Mean training loss of each epoch.
    pub epoch_losses: Vec<f64>,
    /// Adapter parameters (head excluded).
    pub adapter_params: usize,
    pub head_params: usize,
    pub wall_clock_secs: f64,
    pub seed: u64,
}

impl RunResult {
    pub fn trainable_params(&self) -> usize {
        self.adapter_params + self.head_params
    }
}

/// Class-1 probability for each row of two-column logits.
fn positive_scores(logits: &Tensor) -> Vec<f64> {
    (0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            1.0 / (1.0 + (row[0] - row[1]).exp())
        })
        .collect()
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Logits for every record, computed in fixed-size chunks.
pub fn predict(model: &AdaptedModel, data: &EncodedSet) -> Result<Tensor> {
    let c = model.base().config().num_classes;
    let mut out = Vec::with_capacity(data.len() * c);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        out.extend_from_slice(model.forward(&data.batch(chunk)?)?.data());
    }
    Tensor::new(vec![data.len(), c], out)
}

pub fn evaluate(model: &AdaptedModel, data: &EncodedSet) -> Result<Metrics> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate on an empty dataset".into()));
    }
    let logits = predict(model, data)?;
    let correct = (0..data.len()).filter(|&i| argmax(logits.row(i)) == data.labels[i]).count();
    let auc = if data.num_classes == 2 && data.labels.contains(&0) && data.labels.contains(&1) {
        Some(roc_auc(&positive_scores(&logits), &data.labels)?)
    } else {
        None
    };
    Ok(Metrics {
        accuracy: correct as f64 / data.len() as f64,
        auc,
    })
}

/// Area under the ROC curve by the rank-sum statistic with tied ranks
/// averaged. Labels must be 0 or 1 with both present.
pub fn roc_auc(scores: &[f64], labels: &[usize]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidArgument(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::InvalidArgument("AUC requires exactly two classes".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InvalidArgument("AUC needs both classes present".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("AUC scores contain NaN".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        pos_rank_sum += avg_rank * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let u = pos_rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

/// Attaches `plan` to a copy of `model` and trains adapters and head on
/// `train`; reports metrics on `train` and `test`.
pub fn finetune(
    model: &TransformerModel,
    plan: &RankPlan,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
) -> Result<(AdaptedModel, RunResult)> {
    let start = Instant::now();
    cfg.validate()?;
    let mc = model.config();
    if train.num_classes != mc.num_classes || test.num_classes != mc.num_classes {
        return Err(Error::Config(format!(
            "model has {} classes, data has {} / {}",
            mc.num_classes, train.num_classes, test.num_classes
        )));
    }
    let tokenizer = Tokenizer::new(mc.vocab_size)?;
    let seq_len = fit_seq_len(mc, &[train, test]);
    let train_set = EncodedSet::new(train, &tokenizer, seq_len);
    let test_set = EncodedSet::new(test, &tokenizer, seq_len);

    let mut adapted = attach_with_scale(
        model.clone(),
        plan,
        cfg.lora_scale,
        &mut RngStream::derived(cfg.seed, &[STREAM_ATTACH]),
    )?;
    let mut adam = Adam::new(cfg);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..cfg.epochs {
        RngStream::derived(cfg.seed, &[STREAM_SHUFFLE, epoch as u64]).shuffle(&mut order);
        let mut loss_sum = 0.0;
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch = train_set.batch(idx)?;
            let (loss, updates) = {
                let mut tape = Tape::new();
                let (logits, params) = adapted.forward_trainable(&mut tape, &batch)?;
                let loss_var = tape.cross_entropy(logits, batch.labels().expect("labelled batch"))?;
                let loss = tape.value(loss_var).data()[0];
                if !loss.is_finite() {
                    return Err(Error::Diverged { epoch, step, config: cfg.to_string() });
                }
                let mut grads = tape.backward(loss_var)?;
                let updates: Vec<(TrainableParam, Tensor)> = params
                    .into_iter()
                    .filter_map(|(id, var)| grads.take(var).map(|g| (id, g)))
                    .collect();
                if updates.iter().any(|(_, g)| !g.all_finite()) {
                    return Err(Error::Diverged { epoch, step, config: cfg.to_string() });
                }
                (loss, updates)
            };
            adam.begin_step();
            for (id, grad) in &updates {
                let p = adapted.param_mut(*id).expect("trainable tensor exists");
                adam.update(*id, p, grad);
            }
            loss_sum += loss * idx.len() as f64;
        }
        epoch_losses.push(loss_sum / train_set.len() as f64);
    }

    let train_metrics = evaluate(&adapted, &train_set)?;
    let test_metrics = evaluate(&adapted, &test_set)?;
    let result = RunResult {
        train_accuracy: train_metrics.accuracy,
        test_accuracy: test_metrics.accuracy,
        test_auc: test_metrics.auc,
        epoch_losses,
        adapter_params: trainable_param_count(plan, mc),
        head_params: model.head_param_count(),
        wall_clock_secs: start.elapsed().as_secs_f64(),
        seed: cfg.seed,
    };
    Ok((adapted, result))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_hand_case_and_edges() {
        assert_eq!(roc_auc(&[0.9, 0.8, 0.3, 0.1], &[1, 0, 1, 0]).unwrap(), 0.75);
        assert_eq!(roc_auc(&[0.9, 0.8, 0.3, 0.1], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.4; 6], &[1, 0, 1, 0, 0, 1]).unwrap(), 0.5);
        assert!(roc_auc(&[0.1, 0.2, 0.3], &[0, 1, 2]).is_err());
        assert!(roc_auc(&[0.1, 0.2], &[1, 1]).is_err());
    }

    #[test]
    fn auc_matches_pair_enumeration() {
        let mut rng = RngStream::new(5, 5);
        for _ in 0..50 {
            let n = 2 + rng.below(30);
            let scores: Vec<f64> = (0..n).map(|_| rng.below(5) as f64).collect();
            let mut labels: Vec<usize> = (0..n).map(|_| rng.below(2)).collect();
            labels[0] = 0;
            labels[1] = 1;
            let mut wins = 0.0;
            let mut pairs = 0.0;
            for i in 0..n {
                for j in 0..n {
                    if labels[i] == 1 && labels[j] == 0 {
                        pairs += 1.0;
                        wins += if scores[i] > scores[j] { 1.0 } else if scores[i] == scores[j] { 0.5 } else { 0.0 };
                    }
                }
            }
            assert!((roc_auc(&scores, &labels).unwrap() - wins / pairs).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let cfg = TrainConfig { learning_rate: 0.1, ..TrainConfig::default() };
        let mut adam = Adam::new(&cfg);
        let mut p = Tensor::from_vec(vec![1.0, -1.0, 0.0]);
        adam.begin_step();
        adam.update(TrainableParam::HeadBias, &mut p, &Tensor::from_vec(vec![2.0, -3.0, 0.0]));
        let expect = [0.9, -0.9, 0.0];
        for (a, b) in p.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }
}
