//! Finetuning, evaluation, hyperparameter search and plan comparison.

mod compare;
mod grid;
mod settings;
mod train;

pub use compare::{compare, corpus_batch, CompareConfig, CompareMode, ComparisonReport, ComparisonRun, PlanBudget, Summary};
pub use grid::{grid_search, GridPoint, GridResult, GridSpace, VALIDATION_FRACTION};
pub use settings::Settings;
pub use train::{evaluate, finetune, fit_seq_len, predict, roc_auc, Adam, EncodedSet, Metrics, RunResult, TrainConfig};
