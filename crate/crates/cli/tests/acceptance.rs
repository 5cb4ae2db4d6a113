//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion.

#[path = "../../core/tests/common/oracle.rs"]
mod oracle;

use std::collections::BTreeMap;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use adarank::allocation::ranks_from_scores;
use adarank::lora::{attach, trainable_param_count, AdaptedModel, EncoderDims, Provenance, RankPlan};
use adarank::model::{InputBatch, ModelConfig, ModuleKind, ModulePath, TransformerModel};
use adarank::numerics::{gaussian, matmul, population_std, RngStream, Tape, Tensor};
use adarank::scoring::{
    instance_stream, pair_disagreement, perturb_instance, score_modules, Perturbable, PerturbationConfig, ScoreVector,
};
use adarank::Error;
use oracle::{exact_ranks, instance, near_boundary};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        match $cond {
            true => {}
            false => return Err(format!($($msg)+)),
        }
    };
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_adarank"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).env("RAYON_NUM_THREADS", "1").output().expect("spawn adarank")
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

fn fixture(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures/plans")
        .join(name)
        .to_string_lossy()
        .into_owned()
}

fn oracle_instances() -> Vec<(Vec<f64>, f64)> {
    let mut rng = RngStream::new(2024, 1);
    (0..1000).map(|_| instance(&mut rng)).collect()
}

/// Ranks through the public score-vector path, in input order.
fn ranks(d: &[f64], r: f64) -> Vec<usize> {
    let sv = ScoreVector::from_kind_values(ModuleKind::Query, d).unwrap();
    let plan = ranks_from_scores(&sv, r, 0).unwrap();
    plan.ranks_for(ModuleKind::Query)
}

fn criterion_1() -> Outcome {
    let cases = oracle_instances();
    let start = Instant::now();
    for (i, (d, r)) in cases.iter().enumerate() {
        ensure!(ranks(d, *r) == exact_ranks(d, *r), "instance {i} differs from the exact reference");
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 5.0, "took {secs:.2}s");
    Ok(format!("1000/1000 exact matches in {secs:.3}s"))
}

fn criterion_2() -> Outcome {
    for (i, (d, r)) in oracle_instances().iter().enumerate() {
        let sum: usize = ranks(d, *r).iter().sum();
        ensure!(sum as f64 / d.len() as f64 <= r + 1e-12, "instance {i}: mean {} > {r}", sum as f64 / d.len() as f64);
    }
    let expected = [
        ("query_separate.json", "(89/12)"),
        ("key_separate.json", "(89/12)"),
        ("value_separate.json", "(89/12)"),
        ("dense_separate.json", "(91/12)"),
        ("random_ablation.json", "(90/12)"),
    ];
    for (name, frac) in expected {
        let o = run(&["validate-plan", "--plan", &fixture(name), "--avg-rank", "8"]);
        ensure!(o.status.code() == Some(0), "{name}: exit {:?}\n{}", o.status.code(), text(&o));
        ensure!(text(&o).contains(frac), "{name}: expected {frac}\n{}", text(&o));
    }
    Ok("1000 instances within budget; 5 published plans pass validate-plan".into())
}

fn criterion_3() -> Outcome {
    let mut rng = RngStream::new(7, 3);
    let mut checked = 0;
    while checked < 100 {
        let (d, r) = instance(&mut rng);
        if near_boundary(&d, r, 1e-9) {
            continue;
        }
        let base = ranks(&d, r);
        for c in [1e-3, 7.0, 1e3] {
            let scaled: Vec<f64> = d.iter().map(|v| v * c).collect();
            if near_boundary(&scaled, r, 1e-9) {
                continue;
            }
            ensure!(ranks(&scaled, r) == base, "scale {c} changed ranks for d={d:?} r={r}");
        }
        checked += 1;
    }
    let mut rng = RngStream::new(11, 5);
    for _ in 0..100 {
        let (d, r) = instance(&mut rng);
        let got = ranks(&d, r);
        for i in 0..d.len() {
            for j in 0..d.len() {
                ensure!(d[i] > d[j] || got[i] <= got[j], "monotonicity violated for d={d:?} r={r}");
            }
        }
    }
    Ok("100 scale-invariance and 100 monotonicity instances, 0 violations".into())
}

/// Single linear layer with identity head: logits = x · W.
struct LinearToy {
    w: Tensor,
}

const TOY_PATH: ModulePath = ModulePath { kind: ModuleKind::Dense, layer: 0 };

impl Perturbable for LinearToy {
    type Input = Tensor;

    fn module_weight(&self, path: ModulePath) -> adarank::Result<&Tensor> {
        if path == TOY_PATH {
            Ok(&self.w)
        } else {
            Err(Error::UnknownModule(path.to_string()))
        }
    }

    fn logits_with(&self, x: &Tensor, _path: ModulePath, weight: &Tensor) -> adarank::Result<Tensor> {
        matmul(x, weight)
    }

    fn input_rows(&self, x: &Tensor) -> usize {
        x.rows()
    }
}

fn small_config() -> ModelConfig {
    ModelConfig {
        num_layers: 2,
        d_model: 16,
        num_heads: 2,
        d_ff: 24,
        vocab_size: 64,
        max_seq_len: 8,
        num_classes: 3,
    }
}

fn small_batch() -> InputBatch {
    InputBatch::new(vec![5, 9, 13, 0, 7, 7, 2, 40, 33, 12, 0, 0], 3, 4, None).unwrap()
}

fn criterion_4() -> Outcome {
    let model = TransformerModel::init(&small_config(), 21).map_err(|e| e.to_string())?;
    let before = model.checksum();
    let x = small_batch();
    let paths = model.list_modules(&ModuleKind::ALL).unwrap();
    for &p in &paths {
        let same = pair_disagreement(&model, p, &x, 1.0, &mut instance_stream(3, p, 0, 0), &mut instance_stream(3, p, 0, 0))
            .unwrap();
        ensure!(same == 0.0, "{p}: same-stream disagreement {same}");
        let silent = pair_disagreement(&model, p, &x, 0.0, &mut instance_stream(3, p, 0, 0), &mut instance_stream(3, p, 0, 1))
            .unwrap();
        ensure!(silent == 0.0, "{p}: zero-noise disagreement {silent}");

        let reference: BTreeMap<String, u64> = model.named_tensors().into_iter().map(|(n, t)| (n, t.checksum())).collect();
        let target = model.get_weights(p).unwrap().checksum();
        for k in 0..2 {
            let mut copy = model.clone();
            copy.set_weights(p, perturb_instance(&model, p, 1.0, &mut instance_stream(3, p, 0, k)).unwrap()).unwrap();
            let changed: Vec<String> = copy
                .named_tensors()
                .into_iter()
                .filter(|(n, t)| reference[n] != t.checksum())
                .map(|(n, _)| n)
                .collect();
            ensure!(changed.len() == 1, "{p}: instance {k} changed {changed:?}");
            ensure!(copy.get_weights(p).unwrap().checksum() != target, "{p}: target tensor unchanged");
        }
    }
    let sv = score_modules(&model, &paths, &x, &PerturbationConfig { trials: 3, ..Default::default() }).unwrap();
    ensure!(model.checksum() == before, "base model changed by scoring");
    ensure!(sv.scores.values().all(|v| v.is_finite() && *v > 0.0), "non-positive score");

    let mut rng = RngStream::new(77, 0);
    let toy = LinearToy { w: gaussian(&[8, 6], 0.3, 1.2, &mut rng).unwrap() };
    let xt = gaussian(&[4, 8], 0.0, 1.0, &mut rng).unwrap();
    let sigma = population_std(&toy.w).unwrap();
    let expected: f64 = (0..4)
        .map(|r| {
            let norm = xt.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            6.0 * 2f64.sqrt() * sigma * norm * (2.0 / std::f64::consts::PI).sqrt()
        })
        .sum();
    let cfg = PerturbationConfig { trials: 1000, master_seed: 5, ..Default::default() };
    let got = score_modules(&toy, &[TOY_PATH], &xt, &cfg).unwrap().scores[&TOY_PATH];
    let rel = (got - expected).abs() / expected;
    ensure!(rel < 0.02, "toy score {got} vs expected {expected}");
    Ok(format!("zero cases exact, checksum audit over {} modules, toy score off by {:.3}%", paths.len(), 100.0 * rel))
}

fn criterion_5() -> Outcome {
    let dims = EncoderDims::BERT_BASE_CASED;
    let config = dims.as_model_config();
    let base = dims.non_head_params();
    let mut details = vec![format!("non-head {base}")];
    for (kind, flag, rank, count, published) in
        [(ModuleKind::Query, "q", 8, 147_456, 0.13), (ModuleKind::Value, "v", 16, 294_912, 0.26)]
    {
        let paths = adarank::model::list_modules(12, &[kind]).unwrap();
        let n = trainable_param_count(&RankPlan::uniform(&paths, rank).unwrap(), &config);
        ensure!(n == count, "rank {rank}: {n} params, expected {count}");
        let pct = 100.0 * n as f64 / base as f64;
        ensure!((pct - published).abs() <= 0.02, "rank {rank}: {pct:.4}% vs {published}%");
        let o = run(&["paramcount", "--uniform-rank", &rank.to_string(), "--kinds", flag]);
        ensure!(text(&o).contains(&format!("adapter params {count}")), "paramcount output:\n{}", text(&o));
        details.push(format!("rank {rank}: {n} = {pct:.4}%"));
    }
    Ok(details.join(", "))
}

fn loss(model: &AdaptedModel, x: &InputBatch) -> f64 {
    let mut tape = Tape::new();
    let (logits, _) = model.forward_trainable(&mut tape, x).unwrap();
    let l = tape.cross_entropy(logits, x.labels().unwrap()).unwrap();
    tape.value(l).data()[0]
}

fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

fn criterion_6() -> Outcome {
    let desk = ModelConfig::default();
    let model = TransformerModel::init(&desk, 0).unwrap();
    let paths = model.list_modules(&ModuleKind::ALL).unwrap();
    let plan = RankPlan::new(paths.iter().enumerate().map(|(i, &p)| (p, 1 + i % 8)).collect(), 4.5, Provenance::Manual)
        .unwrap();
    let mut adapted = attach(model.clone(), &plan, &mut RngStream::new(1, 0)).unwrap();
    let ids: Vec<u32> = (0..4 * 12).map(|i| (i * 37 % desk.vocab_size) as u32).collect();
    let x = InputBatch::new(ids, 4, 12, None).unwrap();
    ensure!(
        adapted.forward(&x).unwrap().bitwise_eq(&model.forward(&x).unwrap()),
        "logits differ at init"
    );
    let mut rng = RngStream::new(2, 0);
    for p in &paths {
        let ad = adapted.adapter_mut(*p).unwrap();
        ad.a = gaussian(ad.a.shape(), 0.0, 0.2, &mut rng).unwrap();
        ad.b = gaussian(ad.b.shape(), 0.0, 0.2, &mut rng).unwrap();
    }
    let adapted_logits = adapted.forward(&x).unwrap();
    let merged = adapted.merge().unwrap();
    let merge_gap = merged.forward(&x).unwrap().sub(&adapted_logits).unwrap().max_abs();
    ensure!(merge_gap < 1e-9, "merge gap {merge_gap:e}");

    let cfg = ModelConfig { num_layers: 2, d_model: 16, num_heads: 2, d_ff: 24, vocab_size: 50, max_seq_len: 6, num_classes: 3 };
    let model = TransformerModel::init(&cfg, 17).unwrap();
    let paths = model.list_modules(&ModuleKind::ALL).unwrap();
    let plan = RankPlan::new(paths.iter().enumerate().map(|(i, &p)| (p, 1 + i % 3)).collect(), 2.0, Provenance::Manual)
        .unwrap();
    let mut adapted = attach(model, &plan, &mut RngStream::new(1, 0)).unwrap();
    for p in &paths {
        let ad = adapted.adapter_mut(*p).unwrap();
        ad.a = gaussian(ad.a.shape(), 0.0, 0.3, &mut rng).unwrap();
        ad.b = gaussian(ad.b.shape(), 0.0, 0.3, &mut rng).unwrap();
    }
    let ids = vec![3, 9, 12, 44, 0, 7, 7, 30, 2, 5, 0, 0, 19, 18, 17, 16, 15, 0];
    let x = InputBatch::new(ids, 3, 6, Some(vec![0, 2, 1])).unwrap();
    let analytic: Vec<_> = {
        let mut tape = Tape::new();
        let (logits, params) = adapted.forward_trainable(&mut tape, &x).unwrap();
        let l = tape.cross_entropy(logits, x.labels().unwrap()).unwrap();
        let mut grads = tape.backward(l).unwrap();
        params.into_iter().map(|(id, v)| (id, grads.take(v).unwrap())).collect()
    };
    ensure!(analytic.len() == 2 * paths.len() + 2, "expected every adapter and head tensor");
    let h = 1e-5;
    let mut worst = 0.0f64;
    for (id, grad) in &analytic {
        let n = adapted.param(*id).unwrap().len();
        let mut numeric = vec![0.0; n];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = adapted.param(*id).unwrap().data()[i];
            adapted.param_mut(*id).unwrap().data_mut()[i] = orig + h;
            let up = loss(&adapted, &x);
            adapted.param_mut(*id).unwrap().data_mut()[i] = orig - h;
            let down = loss(&adapted, &x);
            adapted.param_mut(*id).unwrap().data_mut()[i] = orig;
            *slot = (up - down) / (2.0 * h);
        }
        let err = relative_error(grad.data(), &numeric);
        ensure!(err < 1e-6, "{id:?}: relative error {err:e}");
        worst = worst.max(err);
    }
    Ok(format!(
        "init logits bitwise equal, merge gap {merge_gap:.1e}, {} gradient tensors with max relative error {worst:.1e}",
        analytic.len()
    ))
}

struct CompareRun {
    csv: String,
    secs: f64,
}

fn prepare_data(dir: &Path) -> Result<(String, String), String> {
    let train = dir.join("train.csv").to_string_lossy().into_owned();
    let test = dir.join("test.csv").to_string_lossy().into_owned();
    for (n, seed, out) in [("2000", "1", &train), ("500", "2", &test)] {
        let o = run(&["synth", "--classes", "4", "--n", n, "--noise", "0.05", "--seed", seed, "--out", out]);
        if o.status.code() != Some(0) {
            return Err(format!("synth failed:\n{}", text(&o)));
        }
    }
    Ok((train, test))
}

fn run_compare(dir: &Path, train: &str, test: &str, name: &str) -> Result<CompareRun, String> {
    let out = dir.join(name);
    let start = Instant::now();
    let o = run(&["compare", "--data", train, "--test", test, "--avg-rank", "8", "--seeds", "1,2,3", "--out", out.to_str().unwrap()]);
    let secs = start.elapsed().as_secs_f64();
    if o.status.code() != Some(0) {
        return Err(format!("compare failed:\n{}", text(&o)));
    }
    let csv = std::fs::read_to_string(&out).map_err(|e| e.to_string())?;
    Ok(CompareRun { csv, secs })
}

fn criterion_7(first: &Result<CompareRun, String>) -> Outcome {
    let run = first.as_ref().map_err(Clone::clone)?;
    ensure!(run.secs < 600.0, "compare took {:.1}s", run.secs);
    let mut lines = run.csv.lines();
    let header: Vec<&str> = lines.next().unwrap_or_default().split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).ok_or(format!("missing column {name}"));
    let (row, plan, test_acc, within) = (col("row")?, col("plan")?, col("test_acc_pct")?, col("within_uniform_budget")?);
    let params: Vec<usize> = ["params_query", "params_key", "params_value", "params_dense", "adapter_params"]
        .iter()
        .map(|c| col(c))
        .collect::<Result<_, _>>()?;
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    let uniform = rows
        .iter()
        .find(|r| r[plan] == "uniform")
        .ok_or("no uniform row")?
        .clone();
    let mut accs = Vec::new();
    for r in &rows {
        let acc: f64 = r[test_acc].parse().map_err(|_| format!("bad accuracy {:?}", r[test_acc]))?;
        if r[row] == "run" && (r[plan] == "uniform" || r[plan] == "adarank-joint") {
            ensure!(acc >= 90.0, "{} seed {} reached {acc}%", r[plan], r[2]);
            accs.push(format!("{} {acc:.2}", r[plan]));
        }
        if r[plan] != "uniform" {
            ensure!(r[within] == "yes", "{} row not within uniform budget", r[plan]);
        }
        if r[plan] == "adarank-joint" {
            let total = params[4];
            ensure!(
                r[total].parse::<usize>().unwrap() <= uniform[total].parse::<usize>().unwrap(),
                "joint adapter params exceed uniform"
            );
        }
        if r[plan] == "adarank-separate" {
            for &c in &params {
                ensure!(
                    r[c].parse::<usize>().unwrap() <= uniform[c].parse::<usize>().unwrap(),
                    "separate params exceed uniform in {}",
                    header[c]
                );
            }
        }
    }
    ensure!(accs.len() == 6, "expected 6 uniform/joint runs, found {}", accs.len());
    Ok(format!("{}; compare {:.1}s", accs.join(", "), run.secs))
}

fn criterion_8(first: &Result<CompareRun, String>, second: &Result<CompareRun, String>) -> Outcome {
    let a = first.as_ref().map_err(Clone::clone)?;
    let b = second.as_ref().map_err(Clone::clone)?;
    ensure!(a.csv.as_bytes() == b.csv.as_bytes(), "CSV reports differ");
    Ok(format!("{} bytes identical across two invocations", a.csv.len()))
}

/// Writes past the test harness's output capture.
fn emit(line: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

fn report(n: usize, title: &str, f: impl FnOnce() -> Outcome) -> bool {
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    match outcome {
        Ok(detail) => {
            emit(&format!("PASS criterion {n} ({title}): {detail}"));
            true
        }
        Err(why) => {
            emit(&format!("FAIL criterion {n} ({title}): {why}"));
            false
        }
    }
}

#[test]
fn acceptance() {
    let dir = tempfile::tempdir().unwrap();
    let mut passed = vec![
        report(1, "oracle equivalence", criterion_1),
        report(2, "budget invariant", criterion_2),
        report(3, "scale and monotonicity", criterion_3),
        report(4, "scoring soundness", criterion_4),
        report(5, "parameter arithmetic", criterion_5),
        report(6, "LoRA correctness", criterion_6),
    ];
    let data = prepare_data(dir.path());
    let compare = |name: &str| match &data {
        Ok((train, test)) => run_compare(dir.path(), train, test, name),
        Err(e) => Err(e.clone()),
    };
    let first = compare("report_a.csv");
    passed.push(report(7, "desk-scale run", || criterion_7(&first)));
    let second = compare("report_b.csv");
    passed.push(report(8, "determinism", || criterion_8(&first, &second)));
    let failed: Vec<usize> = passed.iter().enumerate().filter(|(_, ok)| !**ok).map(|(i, _)| i + 1).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
