//! Converting importance scores into integer ranks under an average-rank budget.
//!
//! Each rank is `floor((d_i / mean(d)) * r)`. The value is computed in `f64`;
//! when it lands within `1e-9` (relative) of an integer, the floor is taken
//! from the exact rational `d_i * r * n / sum(d)` instead, so results never
//! depend on the rounding of the mean.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::ToPrimitive;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::{Provenance, RankPlan};
use crate::model::{ModuleKind, ModulePath};
use crate::numerics::RngStream;
use crate::scoring::ScoreVector;

/// Distance to the nearest integer, relative to it, below which the exact
/// path decides the floor.
pub const EXACT_FALLBACK_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AllocationMode {
    /// Normalize each kind against its own mean.
    Separate,
    /// Normalize all kinds against one global mean.
    Joint,
}

impl AllocationMode {
    /// Joint when every kind is present, separate otherwise.
    pub fn default_for(scores: &ScoreVector) -> Self {
        if scores.kinds().len() == ModuleKind::ALL.len() {
            AllocationMode::Joint
        } else {
            AllocationMode::Separate
        }
    }
}

impl fmt::Display for AllocationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AllocationMode::Separate => "separate",
            AllocationMode::Joint => "joint",
        })
    }
}

impl FromStr for AllocationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "separate" => Ok(AllocationMode::Separate),
            "joint" => Ok(AllocationMode::Joint),
            other => Err(Error::InvalidArgument(format!("unknown allocation mode '{other}' (separate|joint)"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct AllocationRequest {
    pub scores: ScoreVector,
    pub target_avg_rank: f64,
    pub mode: AllocationMode,
    pub min_rank: usize,
}

fn check_target(r: f64) -> Result<()> {
    if r > 0.0 && r.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("target average rank must be positive, got {r}")))
    }
}

fn neumaier_sum(values: &[f64]) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for &v in values {
        let t = sum + v;
        comp += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
        sum = t;
    }
    sum + comp
}

fn exact(v: f64) -> BigRational {
    BigRational::from_float(v).expect("finite value")
}

/// `floor(d_i * r * n / sum(d))` in exact arithmetic.
fn exact_floor(di: f64, r: f64, n: usize, sum: &BigRational) -> usize {
    let q = exact(di) * exact(r) * BigRational::from_integer(BigInt::from(n)) / sum;
    q.floor().to_integer().to_usize().expect("rank fits in usize")
}

/// Integer ranks for one score vector: `floor((d_i / mean(d)) * r)`.
pub fn ranks_from_values(d: &[f64], r: f64) -> Result<Vec<usize>> {
    check_target(r)?;
    if d.is_empty() {
        return Err(Error::InvalidArgument("score vector is empty".into()));
    }
    if let Some(v) = d.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::InvalidArgument(format!("score {v} is not finite and >= 0")));
    }
    if d.iter().all(|&v| v == 0.0) {
        return Err(Error::DegenerateScores);
    }
    let n = d.len();
    let mean = neumaier_sum(d) / n as f64;
    let mut exact_sum: Option<BigRational> = None;
    let mut exact_rank = |di: f64| {
        let sum = exact_sum.get_or_insert_with(|| d.iter().map(|&v| exact(v)).sum());
        exact_floor(di, r, n, sum)
    };
    Ok(d.iter()
        .map(|&di| {
            let x = (di / mean) * r;
            if !x.is_finite() || mean == 0.0 || !mean.is_finite() {
                return exact_rank(di);
            }
            let k = x.round();
            if (x - k).abs() <= EXACT_FALLBACK_TOLERANCE * k.abs().max(1.0) {
                exact_rank(di)
            } else {
                x.floor() as usize
            }
        })
        .collect())
}

fn clamp(ranks: &mut [usize], min_rank: usize) {
    for r in ranks {
        *r = (*r).max(min_rank);
    }
}

fn allocate_group(scores: &ScoreVector, r: f64, min_rank: usize, out: &mut BTreeMap<ModulePath, usize>) -> Result<()> {
    let mut ranks = ranks_from_values(&scores.values(), r)?;
    clamp(&mut ranks, min_rank);
    out.extend(scores.paths().into_iter().zip(ranks));
    Ok(())
}

fn finish(entries: BTreeMap<ModulePath, usize>, scores: &ScoreVector, r: f64, min_rank: usize, provenance: Provenance) -> Result<RankPlan> {
    let mut plan = RankPlan::new(entries, r, provenance)?;
    plan.min_rank = min_rank;
    if scores.trials > 0 {
        plan.seeds.insert("scoring".into(), scores.seed);
    }
    Ok(plan)
}

/// One global normalization over all paths in the vector.
pub fn ranks_from_scores(scores: &ScoreVector, r: f64, min_rank: usize) -> Result<RankPlan> {
    scores.validate()?;
    let mut entries = BTreeMap::new();
    allocate_group(scores, r, min_rank, &mut entries)?;
    let provenance = if scores.kinds().len() > 1 { Provenance::AdarankJoint } else { Provenance::AdarankSeparate };
    finish(entries, scores, r, min_rank, provenance)
}

/// All kinds concatenated in registry order, normalized by one global mean.
pub fn joint_ranks(scores: &ScoreVector, r: f64, min_rank: usize) -> Result<RankPlan> {
    scores.validate()?;
    if scores.kinds().len() < 2 {
        return Err(Error::SingleKindJoint);
    }
    ranks_from_scores(scores, r, min_rank)
}

/// Each kind normalized by its own mean.
pub fn separate_ranks(scores: &ScoreVector, r: f64, min_rank: usize) -> Result<RankPlan> {
    scores.validate()?;
    let mut entries = BTreeMap::new();
    for kind in scores.kinds() {
        allocate_group(&scores.restrict(kind)?, r, min_rank, &mut entries).map_err(|e| match e {
            Error::DegenerateScores => Error::InvalidArgument(format!("degenerate scores: every {kind} score is zero")),
            e => e,
        })?;
    }
    finish(entries, scores, r, min_rank, Provenance::AdarankSeparate)
}

pub fn allocate(req: &AllocationRequest) -> Result<RankPlan> {
    match req.mode {
        AllocationMode::Joint => joint_ranks(&req.scores, req.target_avg_rank, req.min_rank),
        AllocationMode::Separate => separate_ranks(&req.scores, req.target_avg_rank, req.min_rank),
    }
}

/// `n` i.i.d. draws from Uniform[0, 1).
pub fn random_scores(n: usize, rng: &mut RngStream) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::InvalidArgument("random score vector needs n >= 1".into()));
    }
    Ok((0..n).map(|_| rng.uniform()).collect())
}

/// Uniform random scores over `paths`, in path order.
pub fn random_score_vector(paths: &[ModulePath], rng: &mut RngStream) -> Result<ScoreVector> {
    let mut sorted = paths.to_vec();
    sorted.sort();
    let values = random_scores(sorted.len(), rng)?;
    let mut sv = ScoreVector::from_map(sorted.into_iter().zip(values).collect())?;
    sv.seed = rng.master_seed();
    Ok(sv)
}

/// Random-score ablation plan: each kind allocated separately from
/// Uniform[0, 1) scores drawn with `seed`.
pub fn random_plan(paths: &[ModulePath], r: f64, min_rank: usize, seed: u64) -> Result<RankPlan> {
    let sv = random_score_vector(paths, &mut RngStream::new(seed, 0))?;
    let mut plan = separate_ranks(&sv, r, min_rank)?;
    plan.provenance = Provenance::Random;
    plan.seeds = [("random".to_string(), seed)].into();
    Ok(plan)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub offending: Vec<ModulePath>,
}

/// Outcome of [`validate_plan`].
#[derive(Clone, Debug, PartialEq)]
pub struct ValidationReport {
    pub target_avg_rank: f64,
    pub rank_sum: usize,
    pub num_modules: usize,
    pub checks: Vec<CheckResult>,
}

impl ValidationReport {
    pub fn mean_rank(&self) -> f64 {
        self.rank_sum as f64 / self.num_modules as f64
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn offending_paths(&self) -> Vec<ModulePath> {
        let mut out: Vec<ModulePath> = self.checks.iter().flat_map(|c| c.offending.iter().copied()).collect();
        out.sort();
        out.dedup();
        out
    }

    /// `Err(PlanViolation)` naming the failed checks and paths.
    pub fn into_result(self) -> Result<Self> {
        if self.passed() {
            return Ok(self);
        }
        let failed: Vec<String> = self
            .checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| format!("{}: {}", c.name, c.detail))
            .collect();
        Err(Error::PlanViolation(failed.join("; ")))
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail)?;
            if !c.offending.is_empty() {
                let names: Vec<String> = c.offending.iter().map(|p| p.to_string()).collect();
                writeln!(f, "  offending: {}", names.join(", "))?;
            }
        }
        Ok(())
    }
}

fn groups(plan: &RankPlan) -> Vec<Vec<ModulePath>> {
    let paths: Vec<ModulePath> = plan.entries.keys().copied().collect();
    if plan.provenance == Provenance::AdarankJoint {
        vec![paths]
    } else {
        plan.kinds()
            .into_iter()
            .map(|k| paths.iter().copied().filter(|p| p.kind == k).collect())
            .collect()
    }
}

/// Checks the budget and, when scores are given, monotonicity in the scores
/// and exact reproduction of the allocation formula. Joint plans are checked
/// as one group; every other plan kind by kind.
pub fn validate_plan(plan: &RankPlan, scores: Option<&ScoreVector>, r: f64) -> Result<ValidationReport> {
    check_target(r)?;
    if plan.is_empty() {
        return Err(Error::InvalidArgument("plan is empty".into()));
    }
    let rank_sum: usize = plan.entries.values().sum();
    let n = plan.len();
    let mean = rank_sum as f64 / n as f64;
    let mut checks = vec![CheckResult {
        name: "budget",
        passed: mean <= r + 1e-12,
        detail: format!("mean rank {mean:.4} ({rank_sum}/{n}) vs target {r}"),
        offending: if mean <= r + 1e-12 {
            Vec::new()
        } else {
            plan.entries.iter().filter(|(_, &k)| k as f64 > r).map(|(&p, _)| p).collect()
        },
    }];

    let Some(scores) = scores else {
        return Ok(ValidationReport { target_avg_rank: r, rank_sum, num_modules: n, checks });
    };
    let missing: Vec<ModulePath> = plan.entries.keys().filter(|p| !scores.scores.contains_key(p)).copied().collect();
    if !missing.is_empty() {
        checks.push(CheckResult {
            name: "coverage",
            passed: false,
            detail: format!("{} planned modules have no score", missing.len()),
            offending: missing,
        });
        return Ok(ValidationReport { target_avg_rank: r, rank_sum, num_modules: n, checks });
    }

    let mut non_monotone = Vec::new();
    let mut mismatched = Vec::new();
    let mut mismatch_notes = Vec::new();
    let mut formula_error = None;
    for group in groups(plan) {
        for &pi in &group {
            for &pj in &group {
                if scores.scores[&pi] <= scores.scores[&pj] && plan.entries[&pi] > plan.entries[&pj] {
                    non_monotone.push(pi);
                    non_monotone.push(pj);
                }
            }
        }
        let d: Vec<f64> = group.iter().map(|p| scores.scores[p]).collect();
        match ranks_from_values(&d, r) {
            Ok(mut expected) => {
                clamp(&mut expected, plan.min_rank);
                for (p, e) in group.iter().zip(expected) {
                    let got = plan.entries[p];
                    if got != e {
                        mismatched.push(*p);
                        mismatch_notes.push(format!("{p} has {got}, formula gives {e}"));
                    }
                }
            }
            Err(e) => formula_error = Some(e.to_string()),
        }
    }
    non_monotone.sort();
    non_monotone.dedup();
    checks.push(CheckResult {
        name: "monotonicity",
        passed: non_monotone.is_empty(),
        detail: if non_monotone.is_empty() {
            "ranks are non-decreasing in scores".into()
        } else {
            format!("{} modules break rank order", non_monotone.len())
        },
        offending: non_monotone,
    });
    let scope = if plan.provenance == Provenance::AdarankJoint { "jointly" } else { "per kind" };
    checks.push(CheckResult {
        name: "formula",
        passed: mismatched.is_empty() && formula_error.is_none(),
        detail: match (&formula_error, mismatched.is_empty()) {
            (Some(e), _) => format!("cannot recompute ranks: {e}"),
            (None, true) => format!("ranks reproduce floor((d/mean(d)) * {r}) {scope}"),
            (None, false) => mismatch_notes.join(", "),
        },
        offending: mismatched,
    });
    Ok(ValidationReport { target_avg_rank: r, rank_sum, num_modules: n, checks })
}
