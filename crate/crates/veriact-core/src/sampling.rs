//! Test-time candidate generation: repeated sampling, Gaussian refitting,
//! instruction rephrasing, and the hybrid fan-out, with per-candidate
//! provenance and budget accounting for scaling experiments.
//!
//! All four strategies consume their rng stream in the same k-major,
//! one-draw-per-candidate order, so the reductions hold exactly:
//! hybrid(K=1, m) == repeated(m) and hybrid(K, m_per=1) == rephrase(K)
//! given clones of the same stream.

use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rephrase::RephraseSet;
use crate::rng::{self, Stream};
use crate::world::{
    self, ActionChunk, BasePolicyParams, Instruction, Intent, WorldError, WorldState,
};

#[derive(Debug, Error, PartialEq, Clone)]
pub enum SamplingError {
    #[error("invalid argument: {0}")]
    InvalidArg(alloc::string::String),
    #[error(transparent)]
    World(#[from] WorldError),
}

pub type Result<T> = core::result::Result<T, SamplingError>;

/// Nominal parameter counts used by the FLOPs proxy. The synthetic policy
/// stands in for a full VLA, so its size is a declared constant, not a
/// measured one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSizes {
    pub policy_params: u64,
    pub verifier_params: u64,
}

impl Default for ModelSizes {
    fn default() -> Self {
        Self {
            policy_params: 1_000_000,
            verifier_params: 100_000,
        }
    }
}

/// FLOPs proxy: 2 FLOPs per parameter per forward, summed over models.
/// A cost model, not a hardware measurement.
pub fn flops_proxy(policy_forwards: u64, verifier_forwards: u64, sizes: &ModelSizes) -> f64 {
    2.0 * (sizes.policy_params as f64 * policy_forwards as f64
        + sizes.verifier_params as f64 * verifier_forwards as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    Repeated,
    Gaussian,
    Rephrase,
    Hybrid,
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Repeated => "repeated",
            Strategy::Gaussian => "gaussian",
            Strategy::Rephrase => "rephrase",
            Strategy::Hybrid => "hybrid",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub action: ActionChunk,
    /// Rephrase index; 0 for strategies that do not rephrase.
    pub rephrase_index: usize,
    pub sample_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Budget {
    pub candidate_count: u64,
    pub policy_forward_count: u64,
    pub flops_proxy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePool {
    pub candidates: Vec<Candidate>,
    pub strategy: Strategy,
    pub budget: Budget,
}

impl CandidatePool {
    fn new(candidates: Vec<Candidate>, strategy: Strategy, policy_forwards: u64) -> Self {
        let budget = Budget {
            candidate_count: candidates.len() as u64,
            policy_forward_count: policy_forwards,
            flops_proxy: flops_proxy(policy_forwards, 0, &ModelSizes::default()),
        };
        Self {
            candidates,
            strategy,
            budget,
        }
    }
}

/// The synthetic base policy π(a | o, l) as a bundled sampler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub intent: Intent,
    pub params: BasePolicyParams,
    pub chunk_len: usize,
}

impl Policy {
    pub fn sample(
        &self,
        state: &WorldState,
        instruction: &Instruction,
        rng: &mut Stream,
    ) -> Result<ActionChunk> {
        Ok(world::base_policy_sample(
            state,
            &self.intent,
            instruction,
            self.chunk_len,
            &self.params,
            rng,
        )?)
    }
}

/// Elementwise diagonal Gaussian over flattened chunks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianFit {
    pub mean: Vec<f64>,
    /// Floored at the fit epsilon, so always > 0.
    pub std: Vec<f64>,
}

impl GaussianFit {
    pub fn fit(samples: &[ActionChunk], eps: f64) -> Result<Self> {
        if samples.len() < 2 {
            return Err(SamplingError::InvalidArg(format!(
                "need >= 2 samples to fit, got {}",
                samples.len()
            )));
        }
        if eps <= 0.0 {
            return Err(SamplingError::InvalidArg("eps must be > 0".to_string()));
        }
        let n = samples[0].flat().len();
        let count = samples.len() as f64;
        let mut mean = vec![0.0; n];
        for s in samples {
            if s.flat().len() != n {
                return Err(SamplingError::InvalidArg("ragged sample lengths".to_string()));
            }
            for (m, v) in mean.iter_mut().zip(s.flat()) {
                *m += v / count;
            }
        }
        let mut std = vec![0.0; n];
        for s in samples {
            for (i, v) in s.flat().iter().enumerate() {
                let d = v - mean[i];
                std[i] += d * d / count;
            }
        }
        for v in std.iter_mut() {
            *v = libm::sqrt(*v).max(eps);
        }
        Ok(Self { mean, std })
    }

    pub fn draw(&self, rng: &mut Stream) -> ActionChunk {
        let steps: Vec<f64> = self
            .mean
            .iter()
            .zip(&self.std)
            .map(|(m, s)| (m + s * rng::normal(rng)).clamp(-1.0, 1.0))
            .collect();
        ActionChunk::from_steps(steps).expect("fit length is a whole number of steps")
    }
}

/// Repeated sampling: m i.i.d. draws from the policy on one instruction.
pub fn sample_repeated(
    policy: &Policy,
    state: &WorldState,
    instruction: &Instruction,
    m: usize,
    rng: &mut Stream,
) -> Result<CandidatePool> {
    if m < 1 {
        return Err(SamplingError::InvalidArg("m must be >= 1".to_string()));
    }
    let mut candidates = Vec::with_capacity(m);
    for j in 0..m {
        candidates.push(Candidate {
            action: policy.sample(state, instruction, rng)?,
            rephrase_index: 0,
            sample_index: j,
        });
    }
    Ok(CandidatePool::new(candidates, Strategy::Repeated, m as u64))
}

/// Gaussian refitting: fit_n policy draws fit a diagonal Gaussian, all m
/// candidates come from the fit (cheap draws), clamped to the action box.
pub fn sample_gaussian(
    policy: &Policy,
    state: &WorldState,
    instruction: &Instruction,
    fit_n: usize,
    m: usize,
    eps: f64,
    rng: &mut Stream,
) -> Result<CandidatePool> {
    if fit_n < 2 {
        return Err(SamplingError::InvalidArg("fit_n must be >= 2".to_string()));
    }
    if m < 1 {
        return Err(SamplingError::InvalidArg("m must be >= 1".to_string()));
    }
    let mut fit_samples = Vec::with_capacity(fit_n);
    for _ in 0..fit_n {
        fit_samples.push(policy.sample(state, instruction, rng)?);
    }
    let fit = GaussianFit::fit(&fit_samples, eps)?;
    let candidates = (0..m)
        .map(|j| Candidate {
            action: fit.draw(rng),
            rephrase_index: 0,
            sample_index: j,
        })
        .collect();
    // only the fit draws hit the policy; Gaussian draws are counted as free
    Ok(CandidatePool::new(candidates, Strategy::Gaussian, fit_n as u64))
}

fn fan_out(
    policy: &Policy,
    state: &WorldState,
    rephrases: &RephraseSet,
    m_per: usize,
    rng: &mut Stream,
) -> Result<Vec<Candidate>> {
    let mut candidates = Vec::with_capacity(rephrases.k() * m_per);
    for (k, variant) in rephrases.variants.iter().enumerate() {
        for j in 0..m_per {
            candidates.push(Candidate {
                action: policy.sample(state, variant, rng)?,
                rephrase_index: k,
                sample_index: j,
            });
        }
    }
    Ok(candidates)
}

/// Instruction rephrasing: one draw per rephrased instruction.
pub fn sample_rephrase(
    policy: &Policy,
    state: &WorldState,
    rephrases: &RephraseSet,
    rng: &mut Stream,
) -> Result<CandidatePool> {
    if rephrases.k() < 1 {
        return Err(SamplingError::InvalidArg("K must be >= 1".to_string()));
    }
    let k = rephrases.k() as u64;
    let candidates = fan_out(policy, state, rephrases, 1, rng)?;
    Ok(CandidatePool::new(candidates, Strategy::Rephrase, k))
}

/// Hybrid fan-out: m_per draws per rephrase, K·m_per candidates with full
/// (k, j) provenance.
pub fn sample_hybrid(
    policy: &Policy,
    state: &WorldState,
    rephrases: &RephraseSet,
    m_per: usize,
    rng: &mut Stream,
) -> Result<CandidatePool> {
    if rephrases.k() < 1 || m_per < 1 {
        return Err(SamplingError::InvalidArg(
            "K and m_per must be >= 1".to_string(),
        ));
    }
    let forwards = (rephrases.k() * m_per) as u64;
    let candidates = fan_out(policy, state, rephrases, m_per, rng)?;
    Ok(CandidatePool::new(candidates, Strategy::Hybrid, forwards))
}

/// Min over the pool of nrmse(candidate, a_star).
pub fn oracle_min_error(pool: &CandidatePool, a_star: &ActionChunk) -> Result<f64> {
    if pool.candidates.is_empty() {
        return Err(SamplingError::InvalidArg("empty pool".to_string()));
    }
    let mut best = f64::INFINITY;
    for c in &pool.candidates {
        let e = world::nrmse(&c.action, a_star)?;
        if e < best {
            best = e;
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rephrase::{grammar_rephrase, ParaphraseGrammar};
    use crate::world::{generate_world, oracle_action, Task, DEFAULT_CHUNK_LEN};

    fn setup(seed: u64, params: BasePolicyParams) -> (Task, Policy) {
        let task = generate_world(seed, 3, 2).unwrap();
        let policy = Policy {
            intent: task.intent.clone(),
            params,
            chunk_len: DEFAULT_CHUNK_LEN,
        };
        (task, policy)
    }

    fn default_params() -> BasePolicyParams {
        BasePolicyParams::default()
    }

    #[test]
    fn repeated_m1_gives_pool_of_one() {
        let (task, policy) = setup(1, default_params());
        let mut rng = rng::stream(0);
        let pool = sample_repeated(&policy, &task.state, &task.instruction, 1, &mut rng).unwrap();
        assert_eq!(pool.candidates.len(), 1);
        assert_eq!(pool.budget.candidate_count, 1);
        assert_eq!(pool.budget.policy_forward_count, 1);
    }

    #[test]
    fn zero_temperature_makes_all_candidates_identical() {
        let mut params = default_params();
        params.noise_temperature = 0.0;
        let (task, policy) = setup(2, params);
        let mut rng = rng::stream(0);
        let pool = sample_repeated(&policy, &task.state, &task.instruction, 8, &mut rng).unwrap();
        for c in &pool.candidates[1..] {
            assert_eq!(c.action, pool.candidates[0].action);
        }
    }

    #[test]
    fn min_nrmse_never_exceeds_first_candidate_nrmse() {
        let (task, policy) = setup(3, default_params());
        let a_star = oracle_action(&task.state, &task.intent, DEFAULT_CHUNK_LEN).unwrap();
        for seed in 0..20 {
            let mut rng = rng::stream(seed);
            let pool =
                sample_repeated(&policy, &task.state, &task.instruction, 64, &mut rng).unwrap();
            let first = world::nrmse(&pool.candidates[0].action, &a_star).unwrap();
            assert!(oracle_min_error(&pool, &a_star).unwrap() <= first);
        }
    }

    #[test]
    fn gaussian_fit_mean_matches_average_and_degenerate_fit_floors_std() {
        let (task, policy) = setup(4, default_params());
        let mut rng = rng::stream(9);
        let samples: Vec<ActionChunk> = (0..8)
            .map(|_| policy.sample(&task.state, &task.instruction, &mut rng).unwrap())
            .collect();
        let fit = GaussianFit::fit(&samples, 1e-3).unwrap();
        for (i, m) in fit.mean.iter().enumerate() {
            let avg: f64 =
                samples.iter().map(|s| s.flat()[i]).sum::<f64>() / samples.len() as f64;
            assert!((m - avg).abs() < 1e-12);
        }
        let same = vec![samples[0].clone(); 8];
        let deg = GaussianFit::fit(&same, 1e-3).unwrap();
        assert!(deg.std.iter().all(|s| *s == 1e-3));
        let mut drng = rng::stream(1);
        let drawn = deg.draw(&mut drng);
        for (d, m) in drawn.flat().iter().zip(&deg.mean) {
            let lo = (m - 6e-3).max(-1.0);
            let hi = (m + 6e-3).min(1.0);
            assert!(*d >= lo - 1e-12 && *d <= hi + 1e-12, "{d} vs mean {m}");
        }
    }

    #[test]
    fn gaussian_budget_counts_only_fit_forwards() {
        let (task, policy) = setup(5, default_params());
        let mut rng = rng::stream(0);
        let pool =
            sample_gaussian(&policy, &task.state, &task.instruction, 8, 64, 1e-3, &mut rng)
                .unwrap();
        assert_eq!(pool.budget.candidate_count, 64);
        assert_eq!(pool.budget.policy_forward_count, 8);
    }

    fn rephrases_for(task: &Task, k: usize, seed: u64) -> RephraseSet {
        grammar_rephrase(&ParaphraseGrammar::default(), &task.instruction, k, seed).unwrap()
    }

    #[test]
    fn rephrase_k8_covers_indices_0_to_7() {
        let (task, policy) = setup(6, default_params());
        let set = rephrases_for(&task, 8, 0);
        let mut rng = rng::stream(0);
        let pool = sample_rephrase(&policy, &task.state, &set, &mut rng).unwrap();
        assert_eq!(pool.candidates.len(), 8);
        let ks: Vec<usize> = pool.candidates.iter().map(|c| c.rephrase_index).collect();
        assert_eq!(ks, (0..8).collect::<Vec<_>>());
        assert!(pool.candidates.iter().all(|c| c.sample_index == 0));
        assert_eq!(pool.budget.policy_forward_count, 8);
    }

    #[test]
    fn exact_reductions_under_shared_stream() {
        let (task, policy) = setup(7, default_params());
        let set1 = rephrases_for(&task, 1, 0);
        let set8 = rephrases_for(&task, 8, 0);

        let base = rng::stream(42);
        let mut r1 = base.clone();
        let mut r2 = base.clone();
        let hybrid = sample_hybrid(&policy, &task.state, &set1, 5, &mut r1).unwrap();
        let repeated =
            sample_repeated(&policy, &task.state, &task.instruction, 5, &mut r2).unwrap();
        let ha: Vec<_> = hybrid.candidates.iter().map(|c| c.action.clone()).collect();
        let ra: Vec<_> = repeated.candidates.iter().map(|c| c.action.clone()).collect();
        assert_eq!(ha, ra, "hybrid(K=1, m) == repeated(m)");

        let mut r3 = base.clone();
        let mut r4 = base.clone();
        let hybrid1 = sample_hybrid(&policy, &task.state, &set8, 1, &mut r3).unwrap();
        let rephrased = sample_rephrase(&policy, &task.state, &set8, &mut r4).unwrap();
        assert_eq!(hybrid1.candidates, rephrased.candidates);

        let mut r5 = base.clone();
        let mut r6 = base.clone();
        let reph1 = sample_rephrase(&policy, &task.state, &set1, &mut r5).unwrap();
        let rep1 = sample_repeated(&policy, &task.state, &task.instruction, 1, &mut r6).unwrap();
        assert_eq!(reph1.candidates[0].action, rep1.candidates[0].action);
    }

    #[test]
    fn provenance_pairs_unique_and_budgets_analytic() {
        let (task, policy) = setup(8, default_params());
        let set = rephrases_for(&task, 4, 0);
        let mut rng = rng::stream(0);
        let pool = sample_hybrid(&policy, &task.state, &set, 3, &mut rng).unwrap();
        assert_eq!(pool.budget.candidate_count, 12);
        assert_eq!(pool.budget.policy_forward_count, 12);
        let mut pairs: Vec<(usize, usize)> = pool
            .candidates
            .iter()
            .map(|c| (c.rephrase_index, c.sample_index))
            .collect();
        pairs.sort_unstable();
        pairs.dedup();
        assert_eq!(pairs.len(), 12);
    }

    #[test]
    fn oracle_min_error_trivials_and_monotone_append() {
        let (task, policy) = setup(9, default_params());
        let a_star = oracle_action(&task.state, &task.intent, DEFAULT_CHUNK_LEN).unwrap();
        let mut rng = rng::stream(0);
        let mut pool =
            sample_repeated(&policy, &task.state, &task.instruction, 1, &mut rng).unwrap();
        let single = world::nrmse(&pool.candidates[0].action, &a_star).unwrap();
        assert_eq!(oracle_min_error(&pool, &a_star).unwrap(), single);

        let mut prev = single;
        for j in 1..32 {
            pool.candidates.push(Candidate {
                action: policy.sample(&task.state, &task.instruction, &mut rng).unwrap(),
                rephrase_index: 0,
                sample_index: j,
            });
            let now = oracle_min_error(&pool, &a_star).unwrap();
            assert!(now <= prev);
            prev = now;
        }

        pool.candidates.push(Candidate {
            action: a_star.clone(),
            rephrase_index: 0,
            sample_index: 99,
        });
        assert_eq!(oracle_min_error(&pool, &a_star).unwrap(), 0.0);

        let empty = CandidatePool::new(Vec::new(), Strategy::Repeated, 0);
        assert!(matches!(
            oracle_min_error(&empty, &a_star),
            Err(SamplingError::InvalidArg(_))
        ));
    }

    #[test]
    fn flops_proxy_formula_and_equal_budget_equivalence() {
        let sizes = ModelSizes {
            policy_params: 1_000_000,
            verifier_params: 0,
        };
        assert_eq!(flops_proxy(0, 0, &sizes), 0.0);
        assert_eq!(flops_proxy(10, 0, &sizes), 2e7);

        let (task, policy) = setup(10, default_params());
        let set = rephrases_for(&task, 8, 0);
        let mut r1 = rng::stream(0);
        let mut r2 = rng::stream(1);
        let hybrid = sample_hybrid(&policy, &task.state, &set, 8, &mut r1).unwrap();
        let repeated =
            sample_repeated(&policy, &task.state, &task.instruction, 64, &mut r2).unwrap();
        assert_eq!(hybrid.budget.flops_proxy, repeated.budget.flops_proxy);
    }

    // Finds a task whose canonical instruction is drift-gated (bad phrase).
    fn drifted_setup(params: &BasePolicyParams, start: u64) -> (Task, Policy) {
        for seed in start..start + 200 {
            let task = generate_world(seed, 3, 2).unwrap();
            let drift = world::phrase_drift(task.instruction.surface_id, 1, params);
            if drift.iter().any(|d| *d != 0.0) {
                let policy = Policy {
                    intent: task.intent.clone(),
                    params: params.clone(),
                    chunk_len: DEFAULT_CHUNK_LEN,
                };
                return (task, policy);
            }
        }
        panic!("no drifted canonical phrase found");
    }

    #[test]
    fn gaussian_concentrates_where_repeated_explores() {
        // On a drift-displaced policy the Gaussian refit locks onto the
        // displaced mode, so its best candidate is usually no better than
        // repeated sampling's.
        let params = default_params();
        let mut gauss_worse_or_equal = 0;
        for trial in 0..200u64 {
            let (task, policy) = drifted_setup(&params, 1000 + trial * 211);
            let a_star = oracle_action(&task.state, &task.intent, DEFAULT_CHUNK_LEN).unwrap();
            let mut r1 = rng::stream(trial);
            let mut r2 = rng::stream(trial);
            let rep =
                sample_repeated(&policy, &task.state, &task.instruction, 64, &mut r1).unwrap();
            let gau = sample_gaussian(
                &policy,
                &task.state,
                &task.instruction,
                8,
                64,
                1e-3,
                &mut r2,
            )
            .unwrap();
            let e_rep = oracle_min_error(&rep, &a_star).unwrap();
            let e_gau = oracle_min_error(&gau, &a_star).unwrap();
            if e_gau >= e_rep {
                gauss_worse_or_equal += 1;
            }
        }
        assert!(
            gauss_worse_or_equal > 100,
            "gaussian >= repeated in {gauss_worse_or_equal}/200 trials"
        );
    }

    #[test]
    fn rephrasing_beats_single_phrase_mean_error() {
        let params = default_params();
        let grammar = ParaphraseGrammar::default();
        let mut wins = 0;
        for trial in 0..200u64 {
            let task = generate_world(5000 + trial, 3, 2).unwrap();
            let policy = Policy {
                intent: task.intent.clone(),
                params: params.clone(),
                chunk_len: DEFAULT_CHUNK_LEN,
            };
            let a_star = oracle_action(&task.state, &task.intent, DEFAULT_CHUNK_LEN).unwrap();
            let set = grammar_rephrase(&grammar, &task.instruction, 16, trial).unwrap();
            let mut r1 = rng::stream(trial);
            let pool = sample_rephrase(&policy, &task.state, &set, &mut r1).unwrap();
            let min_e = oracle_min_error(&pool, &a_star).unwrap();

            let mut r2 = rng::stream(trial ^ 0x5555);
            let mut mean_e = 0.0;
            for _ in 0..16 {
                let a = policy.sample(&task.state, &task.instruction, &mut r2).unwrap();
                mean_e += world::nrmse(&a, &a_star).unwrap() / 16.0;
            }
            if min_e < mean_e {
                wins += 1;
            }
        }
        assert!(wins >= 180, "rephrase min beat canonical mean in {wins}/200");
    }

    #[test]
    fn hybrid_matches_or_beats_repeated_at_equal_budget() {
        let params = default_params();
        let grammar = ParaphraseGrammar::default();
        let mut sum_hybrid = 0.0;
        let mut sum_repeated = 0.0;
        for trial in 0..200u64 {
            let task = generate_world(9000 + trial, 3, 2).unwrap();
            let policy = Policy {
                intent: task.intent.clone(),
                params: params.clone(),
                chunk_len: DEFAULT_CHUNK_LEN,
            };
            let a_star = oracle_action(&task.state, &task.intent, DEFAULT_CHUNK_LEN).unwrap();
            let set = grammar_rephrase(&grammar, &task.instruction, 8, trial).unwrap();
            let mut r1 = rng::stream(trial);
            let mut r2 = rng::stream(trial);
            let hyb = sample_hybrid(&policy, &task.state, &set, 8, &mut r1).unwrap();
            let rep =
                sample_repeated(&policy, &task.state, &task.instruction, 64, &mut r2).unwrap();
            sum_hybrid += oracle_min_error(&hyb, &a_star).unwrap();
            sum_repeated += oracle_min_error(&rep, &a_star).unwrap();
        }
        assert!(
            sum_hybrid <= sum_repeated,
            "hybrid mean {} vs repeated mean {}",
            sum_hybrid / 200.0,
            sum_repeated / 200.0
        );
    }
}
