//! Hierarchical test-time verification: propose K·M candidates from cached
//! rephrases, score every pair against the original instruction with the
//! ensemble, pick the best rephrase by row mean and then the best action
//! within that row, execute, repeat.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::Tensor;
use crate::rephrase::{boot_time_cache, RephraseSet};
use crate::rng::{self};
use crate::sampling::{Candidate, Policy, SamplingError};
use crate::verifier::{
    encode_action_forward, fuse_forward, normalize, VerifierError, VerifierModel,
};
use crate::world::{
    self, ActionChunk, ActionHistory, Instruction, Task, TrajectoryStep, WorldError, WorldState,
};

#[derive(Debug, Error, PartialEq, Clone)]
pub enum InferenceError {
    #[error("invalid argument: {0}")]
    InvalidArg(String),
    #[error("episode aborted at step {step}: {cause}")]
    Aborted { step: usize, cause: String },
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Verifier(#[from] VerifierError),
}

pub type Result<T> = core::result::Result<T, InferenceError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    /// Rephrase count, original included.
    pub k: usize,
    /// Samples per rephrase.
    pub m: usize,
    pub max_chunks: usize,
    pub history_window: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            k: 8,
            m: 5,
            max_chunks: 12,
            history_window: 8,
        }
    }
}

/// s_{k,j} grid plus the per-rephrase row means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatrix {
    pub k: usize,
    pub m: usize,
    /// Row-major, values[k * m + j].
    pub values: Vec<f64>,
    pub rephrase_means: Vec<f64>,
}

impl ScoreMatrix {
    pub fn new(k: usize, m: usize, values: Vec<f64>) -> Result<Self> {
        if k == 0 || m == 0 || values.len() != k * m {
            return Err(InferenceError::InvalidArg(format!(
                "score matrix {k}x{m} with {} values",
                values.len()
            )));
        }
        let rephrase_means = (0..k)
            .map(|row| values[row * m..(row + 1) * m].iter().sum::<f64>() / m as f64)
            .collect();
        Ok(Self {
            k,
            m,
            values,
            rephrase_means,
        })
    }

    pub fn at(&self, k: usize, j: usize) -> f64 {
        self.values[k * self.m + j]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub k_star: usize,
    pub j_star: usize,
    pub chosen_action: ActionChunk,
    pub chosen_rephrase: Instruction,
    pub score_matrix: ScoreMatrix,
}

/// Language level then action level, lowest index winning ties at both.
pub fn select_indices(matrix: &ScoreMatrix) -> (usize, usize) {
    let mut k_star = 0;
    for k in 1..matrix.k {
        if matrix.rephrase_means[k] > matrix.rephrase_means[k_star] {
            k_star = k;
        }
    }
    let mut j_star = 0;
    for j in 1..matrix.m {
        if matrix.at(k_star, j) > matrix.at(k_star, j_star) {
            j_star = j;
        }
    }
    (k_star, j_star)
}

pub fn select(
    matrix: ScoreMatrix,
    proposals: &[Candidate],
    rephrases: &RephraseSet,
) -> Result<SelectionResult> {
    if proposals.len() != matrix.k * matrix.m {
        return Err(InferenceError::InvalidArg(format!(
            "{} proposals for a {}x{} grid",
            proposals.len(),
            matrix.k,
            matrix.m
        )));
    }
    let (k_star, j_star) = select_indices(&matrix);
    let chosen = proposals
        .iter()
        .find(|c| c.rephrase_index == k_star && c.sample_index == j_star)
        .ok_or_else(|| {
            InferenceError::InvalidArg(format!("missing grid cell ({k_star}, {j_star})"))
        })?;
    Ok(SelectionResult {
        k_star,
        j_star,
        chosen_action: chosen.action.clone(),
        chosen_rephrase: rephrases.variants[k_star].clone(),
        score_matrix: matrix,
    })
}

/// K·M candidates, one per (k, j), each from its own substream of `seed` so
/// any single candidate can be regenerated in isolation.
pub fn propose(
    policy: &Policy,
    state: &WorldState,
    rephrases: &RephraseSet,
    m: usize,
    seed: u64,
) -> Result<Vec<Candidate>> {
    if m < 1 {
        return Err(InferenceError::InvalidArg("M must be >= 1".to_string()));
    }
    let mut out = Vec::with_capacity(rephrases.k() * m);
    for (k, variant) in rephrases.variants.iter().enumerate() {
        for j in 0..m {
            let mut rng = rng::substream(seed, &[0x63616e64, k as u64, j as u64]);
            out.push(Candidate {
                action: policy.sample(state, variant, &mut rng)?,
                rephrase_index: k,
                sample_index: j,
            });
        }
    }
    Ok(out)
}

/// Prepared ensemble state for one episode: members sharing a frozen encoder
/// plus the original instruction's cached token features.
pub struct BootedEnsemble<'a> {
    pub members: &'a [VerifierModel],
    pub rephrases: RephraseSet,
    original_text_feat: Tensor,
}

impl<'a> BootedEnsemble<'a> {
    /// Encodes every rephrase variant exactly once (the boot-time cache) and
    /// keeps the original's features for all later scoring.
    pub fn boot(members: &'a [VerifierModel], rephrases: RephraseSet) -> Result<Self> {
        if members.is_empty() {
            return Err(InferenceError::InvalidArg("empty ensemble".to_string()));
        }
        for m in members {
            if m.frozen != members[0].frozen {
                return Err(InferenceError::InvalidArg(
                    "ensemble members must share the frozen encoder spec".to_string(),
                ));
            }
        }
        let frozen = members[0].frozen;
        let rephrases = boot_time_cache(rephrases, |ins| frozen.encode_text(ins));
        let original_text_feat = rephrases
            .cached_token_features
            .as_ref()
            .expect("boot cache fills features")[0]
            .clone();
        Ok(Self {
            members,
            rephrases,
            original_text_feat,
        })
    }

    /// One fused embedding per member for this observation, each unit-norm,
    /// then averaged and re-normalized. The text encoder is never re-invoked.
    fn fused_for_step(&self, o: &WorldState) -> Result<Vec<f64>> {
        let e = self.members[0].config.embedding_dim;
        let mut avg = vec![0.0; e];
        for m in self.members {
            let obs = m.frozen.encode_obs(o);
            let (femb, _) = fuse_forward(m, &obs, &self.original_text_feat)?;
            for (acc, v) in avg.iter_mut().zip(normalize(&femb)) {
                *acc += v / self.members.len() as f64;
            }
        }
        Ok(normalize(&avg))
    }

    fn action_unit(&self, h: &ActionHistory, a: &ActionChunk) -> Result<Vec<f64>> {
        let e = self.members[0].config.embedding_dim;
        let mut avg = vec![0.0; e];
        for m in self.members {
            let (aemb, _) = encode_action_forward(m, h, a)?;
            for (acc, v) in avg.iter_mut().zip(normalize(&aemb)) {
                *acc += v / self.members.len() as f64;
            }
        }
        Ok(normalize(&avg))
    }
}

/// Fill the K×M matrix: one fused embedding for the step, one action-encoder
/// pass per candidate, in provenance order.
pub fn score_all(
    booted: &BootedEnsemble,
    o: &WorldState,
    h: &ActionHistory,
    proposals: &[Candidate],
    k: usize,
    m: usize,
) -> Result<ScoreMatrix> {
    if proposals.len() != k * m {
        return Err(InferenceError::InvalidArg(format!(
            "{} proposals for a {k}x{m} grid",
            proposals.len()
        )));
    }
    let fused = booted.fused_for_step(o)?;
    let mut values = vec![f64::NAN; k * m];
    let mut filled = vec![false; k * m];
    for c in proposals {
        if c.rephrase_index >= k || c.sample_index >= m {
            return Err(InferenceError::InvalidArg(format!(
                "candidate ({}, {}) outside the {k}x{m} grid",
                c.rephrase_index, c.sample_index
            )));
        }
        let cell = c.rephrase_index * m + c.sample_index;
        if filled[cell] {
            return Err(InferenceError::InvalidArg(format!(
                "duplicate grid cell ({}, {})",
                c.rephrase_index, c.sample_index
            )));
        }
        let au = booted.action_unit(h, &c.action)?;
        values[cell] = fused.iter().zip(&au).map(|(x, y)| x * y).sum();
        filled[cell] = true;
    }
    if filled.iter().any(|f| !f) {
        return Err(InferenceError::InvalidArg("incomplete grid".to_string()));
    }
    ScoreMatrix::new(k, m, values)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifiedEpisode {
    pub trajectory: Vec<TrajectoryStep>,
    pub success: bool,
    pub progress: f64,
    pub selections: Vec<SelectionResult>,
}

fn step_seed(episode_seed: u64, step: usize) -> u64 {
    rng::derive(episode_seed, &[0x73746570, step as u64])
}

/// The closed loop with an arbitrary matrix scorer; the public entry points
/// plug in the ensemble or, in tests, an oracle.
pub fn run_episode_with_scorer<S>(
    policy: &Policy,
    task: &Task,
    rephrases: &RephraseSet,
    config: &InferenceConfig,
    seed: u64,
    mut score_fn: S,
) -> Result<VerifiedEpisode>
where
    S: FnMut(&WorldState, &ActionHistory, &[Candidate]) -> Result<ScoreMatrix>,
{
    if config.k != rephrases.k() {
        return Err(InferenceError::InvalidArg(format!(
            "config K={} but rephrase set has {}",
            config.k,
            rephrases.k()
        )));
    }
    let mut selections = Vec::new();
    let mut step = 0usize;
    let outcome = world::run_episode(
        |state, history| {
            let sseed = step_seed(seed, step);
            let res: Result<ActionChunk> = (|| {
                let proposals = propose(policy, state, rephrases, config.m, sseed)?;
                let matrix = score_fn(state, history, &proposals)?;
                let sel = select(matrix, &proposals, rephrases)?;
                let action = sel.chosen_action.clone();
                selections.push(sel);
                Ok(action)
            })();
            step += 1;
            res.map_err(|e| WorldError::InvalidArg(format!("step {}: {e}", step - 1)))
        },
        task,
        config.history_window,
        config.max_chunks,
    );
    let outcome = outcome?;
    Ok(VerifiedEpisode {
        trajectory: outcome.trajectory,
        success: outcome.success,
        progress: outcome.progress,
        selections,
    })
}

/// Algorithm: boot-time caching, then per chunk propose → score → select →
/// execute against the verifier ensemble.
pub fn run_verified_episode(
    policy: &Policy,
    booted: &BootedEnsemble,
    task: &Task,
    config: &InferenceConfig,
    seed: u64,
) -> Result<VerifiedEpisode> {
    let k = config.k;
    let m = config.m;
    run_episode_with_scorer(
        policy,
        task,
        &booted.rephrases,
        config,
        seed,
        |state, history, proposals| score_all(booted, state, history, proposals, k, m),
    )
}

/// The bare policy under the same per-step substream protocol, so K=1, M=1
/// verified episodes reduce to it exactly.
pub fn run_bare_episode(
    policy: &Policy,
    task: &Task,
    history_window: usize,
    max_chunks: usize,
    seed: u64,
) -> Result<VerifiedEpisode> {
    let mut step = 0usize;
    let outcome = world::run_episode(
        |state, _history| {
            let mut rng = rng::substream(step_seed(seed, step), &[0x63616e64, 0, 0]);
            step += 1;
            world::base_policy_sample(
                state,
                &policy.intent,
                &task.instruction,
                policy.chunk_len,
                &policy.params,
                &mut rng,
            )
        },
        task,
        history_window,
        max_chunks,
    )?;
    Ok(VerifiedEpisode {
        trajectory: outcome.trajectory,
        success: outcome.success,
        progress: outcome.progress,
        selections: Vec::new(),
    })
}

/// Per-step alignment of the executed actions with the original instruction.
pub fn score_trace(
    booted: &BootedEnsemble,
    trajectory: &[TrajectoryStep],
) -> Result<Vec<(usize, f64)>> {
    if trajectory.is_empty() {
        return Err(InferenceError::InvalidArg("empty trajectory".to_string()));
    }
    let mut out = Vec::with_capacity(trajectory.len());
    for (i, step) in trajectory.iter().enumerate() {
        let fused = booted.fused_for_step(&step.state)?;
        let au = booted.action_unit(&step.history, &step.action)?;
        out.push((i, fused.iter().zip(&au).map(|(x, y)| x * y).sum()));
    }
    Ok(out)
}
