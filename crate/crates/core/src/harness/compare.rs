//! Side-by-side finetuning of rank plans at a common average-rank budget.

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::allocation::{joint_ranks, random_plan, separate_ranks};
use crate::data::{Corpus, Dataset, Tokenizer};
use crate::error::{Error, Result};
use crate::lora::{trainable_param_count, trainable_params_by_kind, Provenance, RankPlan};
use crate::model::{InputBatch, ModuleKind, TransformerModel};
use crate::scoring::{score_modules, PerturbationConfig, ScoreVector};

use super::train::{finetune, RunResult, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CompareMode {
    Uniform,
    AdarankSeparate,
    AdarankJoint,
    Random,
}

impl CompareMode {
    pub const ALL: [CompareMode; 4] = [
        CompareMode::Uniform,
        CompareMode::AdarankSeparate,
        CompareMode::AdarankJoint,
        CompareMode::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CompareMode::Uniform => "uniform",
            CompareMode::AdarankSeparate => "adarank-separate",
            CompareMode::AdarankJoint => "adarank-joint",
            CompareMode::Random => "random",
        }
    }

    /// Comma-separated list of mode names.
    pub fn parse_list(s: &str) -> Result<Vec<CompareMode>> {
        let modes = s
            .split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(str::parse)
            .collect::<Result<Vec<_>>>()?;
        if modes.is_empty() {
            return Err(Error::InvalidArgument("no comparison modes given".into()));
        }
        Ok(modes)
    }
}

impl fmt::Display for CompareMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CompareMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CompareMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown comparison mode '{s}'")))
    }
}

#[derive(Clone, Debug)]
pub struct CompareConfig {
    /// Average rank; must be a whole number when the uniform mode is run.
    pub avg_rank: f64,
    pub kinds: Vec<ModuleKind>,
    pub modes: Vec<CompareMode>,
    pub seeds: Vec<u64>,
    /// Training settings; `seed` is replaced by each entry of `seeds`.
    pub train: TrainConfig,
    pub scoring: PerturbationConfig,
    pub min_rank: usize,
    /// Seed of the random-score ablation.
    pub random_seed: u64,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            avg_rank: 8.0,
            kinds: ModuleKind::ALL.to_vec(),
            modes: CompareMode::ALL.to_vec(),
            seeds: vec![1, 2, 3],
            train: TrainConfig::default(),
            scoring: PerturbationConfig::default(),
            min_rank: 0,
            random_seed: 0,
        }
    }
}

/// A plan in the comparison together with its parameter budget.
#[derive(Clone, Debug)]
pub struct PlanBudget {
    pub mode: CompareMode,
    pub plan: RankPlan,
    pub params_by_kind: BTreeMap<ModuleKind, usize>,
    pub adapter_params: usize,
    /// Whether the budget is at most the uniform plan's: per kind for plans
    /// allocated kind by kind, in total for joint plans. `None` without a
    /// uniform row.
    pub within_uniform_budget: Option<bool>,
}

#[derive(Clone, Debug)]
pub struct ComparisonRun {
    pub mode: CompareMode,
    pub result: RunResult,
}

#[derive(Clone, Debug)]
pub struct ComparisonReport {
    pub avg_rank: f64,
    pub seeds: Vec<u64>,
    pub scores: Option<ScoreVector>,
    pub plans: Vec<PlanBudget>,
    pub runs: Vec<ComparisonRun>,
}

/// Mean and population spread over seeds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

fn summarize(values: &[f64]) -> Summary {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Summary { mean, std: var.sqrt() }
}

fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

/// Scoring batch built from a corpus, one row per sentence.
pub fn corpus_batch(model: &TransformerModel, corpus: &Corpus) -> Result<InputBatch> {
    let cfg = model.config();
    let tok = Tokenizer::new(cfg.vocab_size)?;
    let seq_len = corpus
        .sentences
        .iter()
        .map(|s| tok.token_count(s))
        .max()
        .unwrap_or(1)
        .clamp(1, cfg.max_seq_len);
    InputBatch::from_texts(&tok, &corpus.sentences, seq_len, None)
}

/// Scores, plans and finetunes every mode for every seed, in a fixed order.
pub fn compare(
    cfg: &CompareConfig,
    model: &TransformerModel,
    train: &Dataset,
    test: &Dataset,
    corpus: &Corpus,
) -> Result<ComparisonReport> {
    if cfg.seeds.is_empty() {
        return Err(Error::InvalidArgument("comparison needs at least one seed".into()));
    }
    if cfg.modes.is_empty() {
        return Err(Error::InvalidArgument("comparison needs at least one mode".into()));
    }
    let paths = model.list_modules(&cfg.kinds)?;
    let needs_scores = cfg
        .modes
        .iter()
        .any(|m| matches!(m, CompareMode::AdarankSeparate | CompareMode::AdarankJoint));
    let scores = if needs_scores {
        let mut sv = score_modules(model, &paths, &corpus_batch(model, corpus)?, &cfg.scoring)?;
        sv.corpus_source = Some(corpus.source.clone());
        sv.corpus_size = Some(corpus.len());
        Some(sv)
    } else {
        None
    };

    let mut plans = Vec::with_capacity(cfg.modes.len());
    for &mode in &cfg.modes {
        let plan = match mode {
            CompareMode::Uniform => {
                if cfg.avg_rank.fract() != 0.0 {
                    return Err(Error::InvalidArgument(format!(
                        "uniform plan needs a whole average rank, got {}",
                        cfg.avg_rank
                    )));
                }
                RankPlan::uniform(&paths, cfg.avg_rank as usize)?
            }
            CompareMode::AdarankSeparate => separate_ranks(scores.as_ref().expect("scored"), cfg.avg_rank, cfg.min_rank)?,
            CompareMode::AdarankJoint => joint_ranks(scores.as_ref().expect("scored"), cfg.avg_rank, cfg.min_rank)?,
            CompareMode::Random => random_plan(&paths, cfg.avg_rank, cfg.min_rank, cfg.random_seed)?,
        };
        plans.push(PlanBudget {
            mode,
            params_by_kind: trainable_params_by_kind(&plan, model.config()),
            adapter_params: trainable_param_count(&plan, model.config()),
            plan,
            within_uniform_budget: None,
        });
    }
    let uniform = plans.iter().find(|p| p.mode == CompareMode::Uniform).cloned();
    if let Some(u) = uniform {
        for p in &mut plans {
            p.within_uniform_budget = Some(if p.plan.provenance == Provenance::AdarankJoint {
                p.adapter_params <= u.adapter_params
            } else {
                cfg.kinds.iter().all(|k| {
                    p.params_by_kind.get(k).copied().unwrap_or(0) <= u.params_by_kind.get(k).copied().unwrap_or(0)
                })
            });
        }
    }

    let mut runs = Vec::with_capacity(plans.len() * cfg.seeds.len());
    for p in &plans {
        for &seed in &cfg.seeds {
            let tc = TrainConfig { seed, ..cfg.train.clone() };
            let (_, result) = finetune(model, &p.plan, train, test, &tc)?;
            runs.push(ComparisonRun { mode: p.mode, result });
        }
    }
    Ok(ComparisonReport {
        avg_rank: cfg.avg_rank,
        seeds: cfg.seeds.clone(),
        scores,
        plans,
        runs,
    })
}

impl ComparisonReport {
    pub fn plan(&self, mode: CompareMode) -> Option<&PlanBudget> {
        self.plans.iter().find(|p| p.mode == mode)
    }

    pub fn runs_for(&self, mode: CompareMode) -> impl Iterator<Item = &RunResult> {
        self.runs.iter().filter(move |r| r.mode == mode).map(|r| &r.result)
    }

    pub fn test_accuracy(&self, mode: CompareMode) -> Option<Summary> {
        let v: Vec<f64> = self.runs_for(mode).map(|r| r.test_accuracy).collect();
        (!v.is_empty()).then(|| summarize(&v))
    }

    /// Every non-uniform plan is within the uniform budget.
    pub fn budgets_ok(&self) -> bool {
        self.plans.iter().all(|p| p.within_uniform_budget != Some(false))
    }

    /// Per-run rows followed by one mean row per plan. Percentages carry two
    /// decimals; timings are left out so identical inputs give identical bytes.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "row,plan,seed,mean_rank,rank_sum,params_query,params_key,params_value,params_dense,\
             adapter_params,head_params,within_uniform_budget,train_acc_pct,test_acc_pct,test_auc_pct,final_loss\n",
        );
        for p in &self.plans {
            let rows: Vec<&RunResult> = self.runs_for(p.mode).collect();
            let budget = |out: &mut String| {
                let kinds: Vec<String> = ModuleKind::ALL
                    .iter()
                    .map(|k| p.params_by_kind.get(k).copied().unwrap_or(0).to_string())
                    .collect();
                let within = match p.within_uniform_budget {
                    Some(true) => "yes",
                    Some(false) => "no",
                    None => "",
                };
                let head = rows.first().map_or(0, |r| r.head_params);
                let _ = write!(
                    out,
                    "{:.4},{},{},{},{},{}",
                    p.plan.mean_rank(),
                    p.plan.entries.values().sum::<usize>(),
                    kinds.join(","),
                    p.adapter_params,
                    head,
                    within
                );
            };
            for r in &rows {
                let _ = write!(out, "run,{},{},", p.mode, r.seed);
                budget(&mut out);
                let _ = writeln!(
                    out,
                    ",{},{},{},{:.6}",
                    pct(r.train_accuracy),
                    pct(r.test_accuracy),
                    r.test_auc.map(pct).unwrap_or_default(),
                    r.epoch_losses.last().copied().unwrap_or(f64::NAN)
                );
            }
            if rows.is_empty() {
                continue;
            }
            let mean = |f: &dyn Fn(&RunResult) -> f64| summarize(&rows.iter().map(|r| f(r)).collect::<Vec<_>>()).mean;
            let auc = if rows.iter().all(|r| r.test_auc.is_some()) {
                pct(mean(&|r| r.test_auc.unwrap()))
            } else {
                String::new()
            };
            let loss = if rows.iter().all(|r| !r.epoch_losses.is_empty()) {
                format!("{:.6}", mean(&|r| *r.epoch_losses.last().unwrap()))
            } else {
                String::new()
            };
            let _ = write!(out, "mean,{},,", p.mode);
            budget(&mut out);
            let _ = writeln!(
                out,
                ",{},{},{},{}",
                pct(mean(&|r| r.train_accuracy)),
                pct(mean(&|r| r.test_accuracy)),
                auc,
                loss
            );
        }
        out
    }

    /// Aligned summary: one line per plan with means over seeds.
    pub fn to_table(&self) -> String {
        let header = [
            "plan",
            "mean rank",
            "adapter params",
            "budget",
            "train acc %",
            "test acc %",
            "test AUC %",
            "secs/run",
        ];
        let mut rows: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
        for p in &self.plans {
            let runs: Vec<&RunResult> = self.runs_for(p.mode).collect();
            if runs.is_empty() {
                continue;
            }
            let train = summarize(&runs.iter().map(|r| r.train_accuracy).collect::<Vec<_>>());
            let test = summarize(&runs.iter().map(|r| r.test_accuracy).collect::<Vec<_>>());
            let auc = if runs.iter().all(|r| r.test_auc.is_some()) {
                pct(summarize(&runs.iter().map(|r| r.test_auc.unwrap()).collect::<Vec<_>>()).mean)
            } else {
                "-".into()
            };
            let secs = summarize(&runs.iter().map(|r| r.wall_clock_secs).collect::<Vec<_>>()).mean;
            rows.push(vec![
                p.mode.to_string(),
                format!("{:.4}", p.plan.mean_rank()),
                p.adapter_params.to_string(),
                match p.within_uniform_budget {
                    Some(true) => "<= uniform".into(),
                    Some(false) => "> uniform".into(),
                    None => "-".into(),
                },
                pct(train.mean),
                format!("{} ± {}", pct(test.mean), pct(test.std)),
                auc,
                format!("{secs:.1}"),
            ]);
        }
        let widths: Vec<usize> = (0..header.len())
            .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (i, row) in rows.iter().enumerate() {
            let cells: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(c, (cell, &w))| {
                    let pad = w - cell.chars().count();
                    if c == 0 {
                        format!("{cell}{}", " ".repeat(pad))
                    } else {
                        format!("{}{cell}", " ".repeat(pad))
                    }
                })
                .collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
            if i == 0 {
                let total = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
                out.push_str(&"-".repeat(total));
                out.push('\n');
            }
        }
        let _ = writeln!(
            out,
            "average rank {} over seeds {:?}",
            self.avg_rank, self.seeds
        );
        out
    }
}
