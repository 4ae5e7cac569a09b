//! Quantitative instruments: candidate-scaling curves with bootstrap
//! intervals, log-log power-law fits, top-1 retrieval, binary classification,
//! error-vs-candidates tables, multi-axis verifier scaling studies, and
//! training-compute estimates.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rephrase::{grammar_rephrase, ParaphraseGrammar, RephraseError};
use crate::rng::{self};
use crate::sampling::{flops_proxy, GaussianFit, ModelSizes, Policy, SamplingError, Strategy};
use crate::verifier::{
    augment_dataset, ensemble_score, train, TrainConfig, VerifierConfig, VerifierError,
    VerifierModel,
};
use crate::world::{
    self, generate_tuples, ActionChunk, BasePolicyParams, Tuple, WorldError,
};

#[derive(Debug, Error, PartialEq, Clone)]
pub enum EvalError {
    #[error("invalid argument: {0}")]
    InvalidArg(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Rephrase(#[from] RephraseError),
    #[error(transparent)]
    Verifier(#[from] VerifierError),
}

pub type Result<T> = core::result::Result<T, EvalError>;

// ---------------------------------------------------------------------------
// scaling curves
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub k: usize,
    pub mean_error: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub flops_proxy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingCurve {
    pub strategy: Strategy,
    pub points: Vec<ScalingPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub n_tuples: usize,
    pub n_objects: usize,
    pub n_containers: usize,
    pub chunk_len: usize,
    pub history_window: usize,
    pub policy: BasePolicyParams,
    /// Fixed fan-out width for the hybrid strategy.
    pub hybrid_rephrases: usize,
    pub gaussian_fit_n: usize,
    pub gaussian_eps: f64,
    pub bootstrap_resamples: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            n_tuples: 200,
            n_objects: 3,
            n_containers: 2,
            chunk_len: 8,
            history_window: 8,
            policy: BasePolicyParams::default(),
            hybrid_rephrases: 8,
            gaussian_fit_n: 8,
            gaussian_eps: 1e-3,
            bootstrap_resamples: 1000,
        }
    }
}

fn strategy_salt(s: Strategy) -> u64 {
    match s {
        Strategy::Repeated => 1,
        Strategy::Gaussian => 2,
        Strategy::Rephrase => 3,
        Strategy::Hybrid => 4,
    }
}

/// Per-tuple nested candidate errors: entry c is the min NRMSE over the first
/// c+1 candidates, so every per-tuple curve is monotone by construction.
fn nested_min_errors(
    strategy: Strategy,
    tuple: &Tuple,
    max_k: usize,
    cfg: &ExperimentConfig,
    grammar: &ParaphraseGrammar,
    seed: u64,
) -> Result<Vec<f64>> {
    let policy = Policy {
        intent: tuple.intent.clone(),
        params: cfg.policy.clone(),
        chunk_len: cfg.chunk_len,
    };
    let mut rng = rng::substream(seed, &[0x657870, strategy_salt(strategy)]);
    let mut actions: Vec<ActionChunk> = Vec::with_capacity(max_k);
    match strategy {
        Strategy::Repeated => {
            for _ in 0..max_k {
                actions.push(policy.sample(&tuple.state, &tuple.instruction, &mut rng)?);
            }
        }
        Strategy::Gaussian => {
            let mut fit_samples = Vec::with_capacity(cfg.gaussian_fit_n);
            for _ in 0..cfg.gaussian_fit_n {
                fit_samples.push(policy.sample(&tuple.state, &tuple.instruction, &mut rng)?);
            }
            let fit = GaussianFit::fit(&fit_samples, cfg.gaussian_eps)?;
            for _ in 0..max_k {
                actions.push(fit.draw(&mut rng));
            }
        }
        Strategy::Rephrase => {
            let set = grammar_rephrase(grammar, &tuple.instruction, max_k, seed)?;
            for variant in &set.variants {
                actions.push(policy.sample(&tuple.state, variant, &mut rng)?);
            }
        }
        Strategy::Hybrid => {
            let kk = cfg.hybrid_rephrases.min(max_k).max(1);
            let set = grammar_rephrase(grammar, &tuple.instruction, kk, seed)?;
            // breadth-first over rephrases so small prefixes already span them
            'outer: for j in 0.. {
                for variant in &set.variants {
                    if actions.len() == max_k {
                        break 'outer;
                    }
                    let _ = j;
                    actions.push(policy.sample(&tuple.state, variant, &mut rng)?);
                }
            }
        }
    }
    let mut out = Vec::with_capacity(max_k);
    let mut best = f64::INFINITY;
    for a in &actions {
        let e = world::nrmse(a, &tuple.action)?;
        if e < best {
            best = e;
        }
        out.push(best);
    }
    Ok(out)
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let idx = ((sorted.len() - 1) as f64 * q) as usize;
    sorted[idx]
}

/// Mean min-error per candidate count with seeded 1000-resample bootstrap
/// intervals. Deterministic given (seed, config).
pub fn scaling_experiment(
    strategies: &[Strategy],
    k_grid: &[usize],
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<Vec<ScalingCurve>> {
    if k_grid.is_empty() || k_grid.windows(2).any(|w| w[0] >= w[1]) || k_grid[0] == 0 {
        return Err(EvalError::InvalidArg("k grid must be ascending and positive".to_string()));
    }
    if cfg.n_tuples < 30 {
        return Err(EvalError::InvalidArg(format!(
            "need at least 30 tuples, got {}",
            cfg.n_tuples
        )));
    }
    let max_k = *k_grid.last().unwrap();
    let grammar = ParaphraseGrammar::default();
    let tuples = generate_tuples(
        rng::derive(seed, &[0x646174]),
        cfg.n_tuples,
        cfg.n_objects,
        cfg.n_containers,
        cfg.chunk_len,
        cfg.history_window,
    )?;

    let mut curves = Vec::with_capacity(strategies.len());
    for strat in strategies {
        // errors[t][ki]
        let mut per_tuple: Vec<Vec<f64>> = Vec::with_capacity(tuples.len());
        for (ti, t) in tuples.iter().enumerate() {
            let tseed = rng::derive(seed, &[strategy_salt(*strat), ti as u64]);
            let nested = nested_min_errors(*strat, t, max_k, cfg, &grammar, tseed)?;
            per_tuple.push(k_grid.iter().map(|k| nested[k - 1]).collect());
        }
        let mut points = Vec::with_capacity(k_grid.len());
        for (ki, k) in k_grid.iter().enumerate() {
            let errs: Vec<f64> = per_tuple.iter().map(|v| v[ki]).collect();
            let mean = errs.iter().sum::<f64>() / errs.len() as f64;
            let mut brng = rng::substream(seed, &[0x626f6f74, strategy_salt(*strat), *k as u64]);
            let mut means = Vec::with_capacity(cfg.bootstrap_resamples);
            for _ in 0..cfg.bootstrap_resamples {
                let mut acc = 0.0;
                for _ in 0..errs.len() {
                    acc += errs[rng::below(&mut brng, errs.len())];
                }
                means.push(acc / errs.len() as f64);
            }
            means.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let forwards = match strat {
                Strategy::Gaussian => cfg.gaussian_fit_n as u64,
                _ => *k as u64,
            };
            points.push(ScalingPoint {
                k: *k,
                mean_error: mean,
                ci_low: percentile(&means, 0.025),
                ci_high: percentile(&means, 0.975),
                flops_proxy: flops_proxy(forwards, 0, &ModelSizes::default()),
            });
        }
        curves.push(ScalingCurve {
            strategy: *strat,
            points,
        });
    }
    Ok(curves)
}

// ---------------------------------------------------------------------------
// power-law fit
// ---------------------------------------------------------------------------

pub const LOG_FIT_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub a: f64,
    pub b: f64,
    pub r_squared: f64,
    /// Set when the responses are (numerically) constant and the slope is
    /// pinned to zero; r_squared is reported as 0 in that case.
    pub flat: bool,
}

/// Replace exact zeros with the documented floor; returns the floored count.
pub fn floor_errors(points: &mut [(f64, f64)]) -> usize {
    let mut n = 0;
    for (_, e) in points.iter_mut() {
        if *e <= 0.0 {
            *e = LOG_FIT_FLOOR;
            n += 1;
        }
    }
    n
}

/// Ordinary least squares of log(e) on log(k): e ≈ a·k^b.
pub fn fit_power_law(points: &[(f64, f64)]) -> Result<PowerLawFit> {
    if points.len() < 3 {
        return Err(EvalError::InvalidArg(format!(
            "need at least 3 points, got {}",
            points.len()
        )));
    }
    for (k, e) in points {
        if *k <= 0.0 || *e <= 0.0 {
            return Err(EvalError::Domain(format!(
                "nonpositive point ({k}, {e}); floor zeros before fitting"
            )));
        }
    }
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|(k, _)| libm::log(*k)).collect();
    let ys: Vec<f64> = points.iter().map(|(_, e)| libm::log(*e)).collect();
    let xbar = xs.iter().sum::<f64>() / n;
    let ybar = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - xbar) * (x - xbar)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - xbar) * (y - ybar)).sum();
    let syy: f64 = ys.iter().map(|y| (y - ybar) * (y - ybar)).sum();
    if sxx < 1e-18 {
        return Err(EvalError::Domain("all k values coincide".to_string()));
    }
    if syy < 1e-18 {
        return Ok(PowerLawFit {
            a: libm::exp(ybar),
            b: 0.0,
            r_squared: 0.0,
            flat: true,
        });
    }
    let b = sxy / sxx;
    let intercept = ybar - b * xbar;
    let ss_res: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| {
            let r = y - (intercept + b * x);
            r * r
        })
        .sum();
    Ok(PowerLawFit {
        a: libm::exp(intercept),
        b,
        r_squared: 1.0 - ss_res / syy,
        flat: false,
    })
}

// ---------------------------------------------------------------------------
// retrieval
// ---------------------------------------------------------------------------

/// Fraction of tuples whose ground-truth action out-scores pool_size−1
/// distractor actions drawn from other tuples. The scorer sees the tuple's
/// own observation/history/instruction.
pub fn top1_retrieval<S>(
    mut score_fn: S,
    tuples: &[Tuple],
    pool_size: usize,
    seed: u64,
) -> Result<f64>
where
    S: FnMut(&Tuple, &ActionChunk) -> Result<f64>,
{
    if pool_size < 2 {
        return Err(EvalError::InvalidArg("pool_size must be >= 2".to_string()));
    }
    if tuples.len() < pool_size {
        return Err(EvalError::InvalidArg(format!(
            "{} tuples cannot fill pools of {pool_size}",
            tuples.len()
        )));
    }
    let mut correct = 0usize;
    for (i, t) in tuples.iter().enumerate() {
        let mut prng = rng::substream(seed, &[0x706f6f6c, i as u64]);
        let gt_pos = rng::below(&mut prng, pool_size);
        let mut best_idx = 0;
        let mut best_score = f64::NEG_INFINITY;
        let mut drawn = 0usize;
        for slot in 0..pool_size {
            let action = if slot == gt_pos {
                t.action.clone()
            } else {
                // distractor from any other tuple
                let mut j = rng::below(&mut prng, tuples.len() - 1);
                if j >= i {
                    j += 1;
                }
                drawn += 1;
                let _ = drawn;
                tuples[j].action.clone()
            };
            let s = score_fn(t, &action)?;
            if s > best_score {
                best_score = s;
                best_idx = slot;
            }
        }
        if best_idx == gt_pos {
            correct += 1;
        }
    }
    Ok(correct as f64 / tuples.len() as f64)
}

pub fn ensemble_top1(
    members: &[VerifierModel],
    tuples: &[Tuple],
    pool_size: usize,
    seed: u64,
) -> Result<f64> {
    top1_retrieval(
        |t, a| Ok(ensemble_score(members, &t.state, &t.history, &t.instruction, a)?),
        tuples,
        pool_size,
        seed,
    )
}

// ---------------------------------------------------------------------------
// binary classification
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Precision or F1 had a zero denominator and was reported as 0.
    pub zero_division: bool,
}

/// Threshold the two score sets; scores ≥ threshold are predicted positive.
pub fn classify_scores(pos: &[f64], neg: &[f64], threshold: f64) -> Result<ClassificationReport> {
    if pos.is_empty() || neg.is_empty() {
        return Err(EvalError::InvalidArg("both classes must be non-empty".to_string()));
    }
    let tp = pos.iter().filter(|s| **s >= threshold).count();
    let fn_ = pos.len() - tp;
    let fp = neg.iter().filter(|s| **s >= threshold).count();
    let tn = neg.len() - fp;
    Ok(report_from_counts(tp, fp, tn, fn_))
}

pub fn report_from_counts(tp: usize, fp: usize, tn: usize, fn_: usize) -> ClassificationReport {
    let mut zero_division = false;
    let precision = if tp + fp == 0 {
        zero_division = true;
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let recall = if tp + fn_ == 0 {
        zero_division = true;
        0.0
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    let f1 = if precision + recall == 0.0 {
        zero_division = true;
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    ClassificationReport {
        tp,
        fp,
        tn,
        fn_,
        precision,
        recall,
        f1,
        zero_division,
    }
}

/// Misaligned counterparts for a tuple set: each record keeps its context but
/// takes the action of a different, randomly chosen tuple.
pub fn make_negatives(tuples: &[Tuple], seed: u64) -> Result<Vec<Tuple>> {
    if tuples.len() < 2 {
        return Err(EvalError::InvalidArg("need at least 2 tuples".to_string()));
    }
    let mut rng = rng::substream(seed, &[0x6e6567]);
    let mut out = Vec::with_capacity(tuples.len());
    for (i, t) in tuples.iter().enumerate() {
        let mut j = rng::below(&mut rng, tuples.len() - 1);
        if j >= i {
            j += 1;
        }
        let mut neg = t.clone();
        neg.action = tuples[j].action.clone();
        out.push(neg);
    }
    Ok(out)
}

pub fn binary_classification(
    members: &[VerifierModel],
    positives: &[Tuple],
    negatives: &[Tuple],
    threshold: f64,
) -> Result<ClassificationReport> {
    let mut pos = Vec::with_capacity(positives.len());
    for t in positives {
        pos.push(ensemble_score(members, &t.state, &t.history, &t.instruction, &t.action)?);
    }
    let mut neg = Vec::with_capacity(negatives.len());
    for t in negatives {
        neg.push(ensemble_score(members, &t.state, &t.history, &t.instruction, &t.action)?);
    }
    classify_scores(&pos, &neg, threshold)
}

// ---------------------------------------------------------------------------
// error vs candidate count under a verifier
// ---------------------------------------------------------------------------

/// For each N: sample N candidates per tuple, keep the scorer's argmax, and
/// report the mean RMSE of the kept action against the ground truth.
pub fn rmse_vs_candidates<S>(
    mut score_fn: S,
    policy_params: &BasePolicyParams,
    ns: &[usize],
    tuples: &[Tuple],
    chunk_len: usize,
    seed: u64,
) -> Result<Vec<(usize, f64)>>
where
    S: FnMut(&Tuple, &ActionChunk) -> Result<f64>,
{
    if ns.is_empty() || ns.windows(2).any(|w| w[0] >= w[1]) || ns[0] == 0 {
        return Err(EvalError::InvalidArg("Ns must be ascending and positive".to_string()));
    }
    let max_n = *ns.last().unwrap();
    let mut sums = vec![0.0; ns.len()];
    for (ti, t) in tuples.iter().enumerate() {
        let policy = Policy {
            intent: t.intent.clone(),
            params: policy_params.clone(),
            chunk_len,
        };
        let mut rng = rng::substream(seed, &[0x726d7365, ti as u64]);
        let mut candidates = Vec::with_capacity(max_n);
        for _ in 0..max_n {
            candidates.push(policy.sample(&t.state, &t.instruction, &mut rng)?);
        }
        let mut scores = Vec::with_capacity(max_n);
        for c in &candidates {
            scores.push(score_fn(t, c)?);
        }
        for (ni, n) in ns.iter().enumerate() {
            let mut best = 0;
            for c in 1..*n {
                if scores[c] > scores[best] {
                    best = c;
                }
            }
            let rmse = 2.0 * world::nrmse(&candidates[best], &t.action)?;
            sums[ni] += rmse / tuples.len() as f64;
        }
    }
    Ok(ns.iter().copied().zip(sums).collect())
}

// ---------------------------------------------------------------------------
// scaling studies
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StudyAxis {
    DataMultiplier,
    ModelWidth,
    BatchSize,
    TrainSteps,
    EnsembleSize,
}

impl StudyAxis {
    pub fn name(&self) -> &'static str {
        match self {
            StudyAxis::DataMultiplier => "data_multiplier",
            StudyAxis::ModelWidth => "model_width",
            StudyAxis::BatchSize => "batch_size",
            StudyAxis::TrainSteps => "train_steps",
            StudyAxis::EnsembleSize => "ensemble_size",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyConfig {
    pub base_verifier: VerifierConfig,
    pub base_train: TrainConfig,
    pub train_tuples: usize,
    pub eval_tuples: usize,
    pub pool_size: usize,
    pub rephrases_per_intent: usize,
    pub n_objects: usize,
    pub n_containers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub level: u64,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyResult {
    pub axis: StudyAxis,
    pub rows: Vec<StudyRow>,
    /// Share of adjacent level pairs whose mean accuracy improves.
    pub monotonicity_fraction: f64,
    pub degenerate: bool,
}

fn instruction_sets(
    tuples: &[Tuple],
    per_intent: usize,
    seed: u64,
) -> Result<BTreeMap<u64, Vec<crate::world::Instruction>>> {
    let grammar = ParaphraseGrammar::default();
    let mut sets = BTreeMap::new();
    for t in tuples {
        if !sets.contains_key(&t.intent.id) {
            let set = grammar_rephrase(&grammar, &t.instruction, per_intent, seed)?;
            sets.insert(t.intent.id, set.variants);
        }
    }
    Ok(sets)
}

/// Train a small ensemble for one (level, seed) cell and return its top-1
/// retrieval accuracy.
fn study_cell(
    axis: StudyAxis,
    level: u64,
    cfg: &StudyConfig,
    seed: u64,
) -> Result<f64> {
    let mut vcfg = cfg.base_verifier;
    let mut tcfg = cfg.base_train;
    let mut per_intent = cfg.rephrases_per_intent;
    let mut members_n = 1usize;
    match axis {
        StudyAxis::DataMultiplier => per_intent = per_intent.saturating_mul(level as usize).max(1),
        StudyAxis::ModelWidth => {
            vcfg.feature_dim = level as usize;
            vcfg.embedding_dim = level as usize;
            vcfg.ffn_hidden = 2 * level as usize;
        }
        StudyAxis::BatchSize => tcfg.batch_size = level as usize,
        StudyAxis::TrainSteps => tcfg.steps = level as usize,
        StudyAxis::EnsembleSize => members_n = level as usize,
    }
    let train_set = generate_tuples(
        rng::derive(seed, &[0x7374756479, level]),
        cfg.train_tuples,
        cfg.n_objects,
        cfg.n_containers,
        vcfg.chunk_len,
        vcfg.history_window,
    )?;
    let sets = instruction_sets(&train_set, per_intent, rng::derive(seed, &[0x736574]))?;
    let d_aug = augment_dataset(&train_set, &sets)?;
    let mut members = Vec::with_capacity(members_n);
    for mi in 0..members_n {
        let mut mv = vcfg;
        mv.seed = rng::derive(seed, &[0x6d656d, mi as u64]);
        let mut mt = tcfg;
        mt.seed = rng::derive(seed, &[0x6d74, mi as u64]);
        let (model, _) = train(&d_aug, mv, mt)?;
        members.push(model);
    }
    let eval_set = generate_tuples(
        rng::derive(seed, &[0x6576616c]),
        cfg.eval_tuples,
        cfg.n_objects,
        cfg.n_containers,
        vcfg.chunk_len,
        vcfg.history_window,
    )?;
    ensemble_top1(&members, &eval_set, cfg.pool_size, rng::derive(seed, &[0x7031]))
}

pub fn scaling_study(
    axis: StudyAxis,
    levels: &[u64],
    cfg: &StudyConfig,
    seeds: &[u64],
) -> Result<StudyResult> {
    if levels.is_empty() {
        return Err(EvalError::InvalidArg("no levels".to_string()));
    }
    if seeds.len() < 3 {
        return Err(EvalError::InvalidArg(format!(
            "need at least 3 seeds, got {}",
            seeds.len()
        )));
    }
    let mut rows = Vec::with_capacity(levels.len());
    for level in levels {
        let mut accuracies = Vec::with_capacity(seeds.len());
        for seed in seeds {
            accuracies.push(study_cell(axis, *level, cfg, *seed)?);
        }
        let mean = accuracies.iter().sum::<f64>() / accuracies.len() as f64;
        let var = accuracies.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>()
            / accuracies.len() as f64;
        rows.push(StudyRow {
            level: *level,
            accuracies,
            mean,
            std: libm::sqrt(var),
        });
    }
    let degenerate = rows.len() < 2;
    let monotonicity_fraction = if degenerate {
        1.0
    } else {
        let improving = rows
            .windows(2)
            .filter(|w| w[1].mean > w[0].mean)
            .count();
        improving as f64 / (rows.len() - 1) as f64
    };
    Ok(StudyResult {
        axis,
        rows,
        monotonicity_fraction,
        degenerate,
    })
}

// ---------------------------------------------------------------------------
// compute estimates
// ---------------------------------------------------------------------------

/// Standard dense-transformer training estimate: 6 FLOPs per parameter per
/// token.
pub fn compute_estimate(n_params: f64, n_tokens: f64) -> f64 {
    6.0 * n_params * n_tokens
}

/// Frozen-backbone training cost: the expensive frozen forward plus the cheap
/// trainable backward, per sample.
pub fn frozen_aware_estimate(fwd_flops: f64, bwd_flops: f64, samples: f64) -> f64 {
    (fwd_flops + bwd_flops) * samples
}

/// Published reference training budgets used for relative-cost comparisons.
pub const REF_BASE_POLICY_TRAIN_FLOPS: f64 = 3.4e19;
pub const REF_REPHRASE16_TRAIN_FLOPS: f64 = 5.4e20;
pub const REF_VERIFIER_TRAIN_FLOPS: f64 = 1.3e20;
/// Per-sample costs of the frozen-backbone verifier training pass.
pub const REF_FROZEN_FWD_FLOPS: f64 = 3.3e11;
pub const REF_TRAINABLE_BWD_FLOPS: f64 = 1.0e9;

// ---------------------------------------------------------------------------
// latency accounting (measurement loops live in the companion crate)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyRow {
    pub batch_size: usize,
    pub policy_ms: f64,
    pub image_text_ms: f64,
    pub action_encoder_ms: f64,
    pub total_ms: f64,
    pub throughput: f64,
}

/// Pipeline total when the image-text fusion runs concurrently with the
/// policy: only the policy and the action encoder are on the critical path.
pub fn overlapped_total_ms(policy_ms: f64, action_encoder_ms: f64) -> f64 {
    policy_ms + action_encoder_ms
}
