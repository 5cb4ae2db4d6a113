//! Exhaustive hyperparameter search on a held-out slice of the training data.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::lora::RankPlan;
use crate::model::TransformerModel;
use crate::numerics::RngStream;

use super::train::{finetune, TrainConfig};

/// Share of the training records held out for validation.
pub const VALIDATION_FRACTION: f64 = 0.1;
const STREAM_VALIDATION: u64 = 3;

/// Learning rates and batch sizes to try; other fields come from `base`.
#[derive(Clone, Debug)]
pub struct GridSpace {
    pub learning_rates: Vec<f64>,
    pub batch_sizes: Vec<usize>,
    pub base: TrainConfig,
}

#[derive(Clone, Debug)]
pub struct GridPoint {
    pub config: TrainConfig,
    /// `None` when training diverged.
    pub validation_accuracy: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct GridResult {
    pub best: TrainConfig,
    pub points: Vec<GridPoint>,
}

/// Trains every grid point on 90% of `train` and keeps the best validation
/// accuracy; ties go to the lower learning rate, then the smaller batch.
/// Divergent points are skipped.
pub fn grid_search(space: &GridSpace, model: &TransformerModel, plan: &RankPlan, train: &Dataset) -> Result<GridResult> {
    if space.learning_rates.is_empty() || space.batch_sizes.is_empty() {
        return Err(Error::InvalidArgument("grid is empty".into()));
    }
    let (fit, val) = train.split_off(VALIDATION_FRACTION, &mut RngStream::derived(space.base.seed, &[STREAM_VALIDATION]))?;
    let mut points = Vec::new();
    for &lr in &space.learning_rates {
        for &bs in &space.batch_sizes {
            let config = TrainConfig {
                learning_rate: lr,
                batch_size: bs,
                ..space.base.clone()
            };
            let validation_accuracy = match finetune(model, plan, &fit, &val, &config) {
                Ok((_, r)) => Some(r.test_accuracy),
                Err(Error::Diverged { .. }) => None,
                Err(e) => return Err(e),
            };
            points.push(GridPoint { config, validation_accuracy });
        }
    }
    let best = points
        .iter()
        .filter_map(|p| p.validation_accuracy.map(|a| (a, &p.config)))
        .min_by(|(a1, c1), (a2, c2)| {
            a2.total_cmp(a1)
                .then(c1.learning_rate.total_cmp(&c2.learning_rate))
                .then(c1.batch_size.cmp(&c2.batch_size))
        })
        .map(|(_, c)| c.clone())
        .ok_or_else(|| Error::InvalidArgument("every grid point diverged".into()))?;
    Ok(GridResult { best, points })
}
