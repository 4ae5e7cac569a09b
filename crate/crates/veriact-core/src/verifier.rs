//! The contrastive verifier: frozen observation/text feature maps, a
//! trainable text-aware fusion head and action-sequence transformer,
//! bi-directional InfoNCE training, checkpoint bytes, and ensemble scoring.
//!
//! All backward passes are hand-written against the caches produced by the
//! forwards and are finite-difference-checked in the tests.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

use crate::numerics::{
    adam_step, affine, affine_backward, layer_norm, layer_norm_backward, multi_head_attention,
    multi_head_attention_backward, row_softmax_nll, AdamState, AttentionCache, AttentionParams,
    LayerNormCache, NumericsError, ParamId, ParamSet, Tensor,
};
use crate::rng::{self};
use crate::world::{
    ActionChunk, ActionHistory, Instruction, Tuple, WorldError, WorldState, ACTION_DIM,
};

#[derive(Debug, Error, PartialEq, Clone)]
pub enum VerifierError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("lookup error: {0}")]
    Lookup(String),
    #[error("non-finite loss at step {step}, batch hash {batch_hash:#x}")]
    NonFinite { step: usize, batch_hash: u64 },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T> = core::result::Result<T, VerifierError>;

/// Forward-call counters for the caching contracts. Process-wide; tests that
/// read them reset first and run serially over the observed ops.
pub mod counters {
    use core::sync::atomic::{AtomicU64, Ordering};

    pub static TEXT_ENCODER: AtomicU64 = AtomicU64::new(0);
    pub static FUSE: AtomicU64 = AtomicU64::new(0);
    pub static ACTION_ENCODER: AtomicU64 = AtomicU64::new(0);

    pub fn reset() {
        TEXT_ENCODER.store(0, Ordering::SeqCst);
        FUSE.store(0, Ordering::SeqCst);
        ACTION_ENCODER.store(0, Ordering::SeqCst);
    }

    pub fn snapshot() -> (u64, u64, u64) {
        (
            TEXT_ENCODER.load(Ordering::SeqCst),
            FUSE.load(Ordering::SeqCst),
            ACTION_ENCODER.load(Ordering::SeqCst),
        )
    }
}

// ---------------------------------------------------------------------------
// frozen encoders
// ---------------------------------------------------------------------------

/// Seeded random feature maps standing in for pretrained backbones. Pure
/// functions of (seed, input); nothing here ever receives a gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrozenEncoderSpec {
    pub seed: u64,
    pub obs_input_dim: usize,
    pub text_vocab_size: usize,
    pub feature_dim: usize,
}

impl FrozenEncoderSpec {
    fn flatten_obs(&self, o: &WorldState) -> Vec<f64> {
        let mut raw = Vec::new();
        raw.push(o.gripper.position[0]);
        raw.push(o.gripper.position[1]);
        raw.push(o.gripper.grasp);
        for obj in &o.objects {
            raw.push(obj.position[0]);
            raw.push(obj.position[1]);
            raw.push(obj.color as f64 / 8.0);
            raw.push(obj.shape as f64 / 8.0);
        }
        for c in &o.containers {
            raw.push(c.position[0]);
            raw.push(c.position[1]);
            raw.push(c.color as f64 / 8.0);
        }
        raw.resize(self.obs_input_dim, 0.0);
        raw
    }

    /// Fixed random linear map + tanh over the flattened state.
    pub fn encode_obs(&self, o: &WorldState) -> Vec<f64> {
        let raw = self.flatten_obs(o);
        let mut mrng = rng::substream(self.seed, &[0x6f6273]);
        let scale = 1.0 / libm::sqrt(self.obs_input_dim as f64);
        let mut out = vec![0.0; self.feature_dim];
        for row in out.iter_mut() {
            let mut acc = 0.0;
            for x in &raw {
                acc += rng::normal(&mut mrng) * scale * x;
            }
            // a fixed per-row offset so the map is not odd-symmetric
            acc += 0.1 * rng::normal(&mut mrng);
            *row = libm::tanh(3.0 * acc);
        }
        out
    }

    fn token_row(&self, token: &str) -> Vec<f64> {
        let bucket = rng::fnv1a_tokens(&[token]) % self.text_vocab_size as u64;
        let mut trng = rng::substream(self.seed, &[0x746f6b, bucket]);
        let scale = 1.0 / libm::sqrt(self.feature_dim as f64);
        (0..self.feature_dim)
            .map(|_| rng::normal(&mut trng) * scale)
            .collect()
    }

    /// Per-token hash-bucket embeddings, T rows of feature_dim.
    pub fn encode_text(&self, l: &Instruction) -> Tensor {
        counters::TEXT_ENCODER.fetch_add(1, core::sync::atomic::Ordering::SeqCst);
        let t = l.tokens.len().max(1);
        let mut data = Vec::with_capacity(t * self.feature_dim);
        if l.tokens.is_empty() {
            data.resize(self.feature_dim, 0.0);
        } else {
            for tok in &l.tokens {
                data.extend(self.token_row(tok));
            }
        }
        Tensor::new(&[t, self.feature_dim], data).expect("frozen text features")
    }
}

// ---------------------------------------------------------------------------
// model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifierConfig {
    /// Seeds the trainable parameter init; distinct per ensemble member.
    pub seed: u64,
    /// Seeds the frozen feature maps; shared across an ensemble so cached
    /// text features are valid for every member.
    pub frozen_seed: u64,
    pub feature_dim: usize,
    pub embedding_dim: usize,
    /// Observation feature vector is projected into this many key/value slots.
    pub obs_slots: usize,
    pub fusion_heads: usize,
    pub action_layers: usize,
    pub action_heads: usize,
    pub ffn_hidden: usize,
    pub max_text_len: usize,
    pub chunk_len: usize,
    pub history_window: usize,
    pub obs_input_dim: usize,
    pub text_vocab_size: usize,
}

impl Default for VerifierConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            frozen_seed: 0xf005ba11,
            feature_dim: 64,
            embedding_dim: 64,
            obs_slots: 4,
            fusion_heads: 2,
            action_layers: 2,
            action_heads: 2,
            ffn_hidden: 128,
            max_text_len: 16,
            chunk_len: 8,
            history_window: 8,
            obs_input_dim: 32,
            text_vocab_size: 1024,
        }
    }
}

#[derive(Debug, Clone)]
struct FusionIds {
    obs_w: ParamId,
    obs_b: ParamId,
    text_pos: ParamId,
    attn: AttentionParams,
    out_w: ParamId,
    out_b: ParamId,
}

#[derive(Debug, Clone)]
struct ActionLayerIds {
    ln1_g: ParamId,
    ln1_b: ParamId,
    attn: AttentionParams,
    ln2_g: ParamId,
    ln2_b: ParamId,
    f1_w: ParamId,
    f1_b: ParamId,
    f2_w: ParamId,
    f2_b: ParamId,
}

#[derive(Debug, Clone)]
struct ActionIds {
    in_w: ParamId,
    in_b: ParamId,
    pos: ParamId,
    layers: Vec<ActionLayerIds>,
    out_w: ParamId,
    out_b: ParamId,
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct VerifierModel {
    pub config: VerifierConfig,
    pub frozen: FrozenEncoderSpec,
    pub params: ParamSet,
    fusion: FusionIds,
    action: ActionIds,
}

impl VerifierModel {
    pub fn init(config: VerifierConfig) -> Result<Self> {
        let f = config.feature_dim;
        if config.embedding_dim == 0 || f == 0 || config.obs_slots == 0 {
            return Err(VerifierError::Config("zero model dimension".to_string()));
        }
        let frozen = FrozenEncoderSpec {
            seed: rng::derive(config.frozen_seed, &[0x66726f7a]),
            obs_input_dim: config.obs_input_dim,
            text_vocab_size: config.text_vocab_size,
            feature_dim: f,
        };
        let mut ps = ParamSet::new();
        let mut irng = rng::substream(config.seed, &[0x696e6974]);
        let scale = 1.0 / libm::sqrt(f as f64);

        let obs_w = ps.add("fusion.obs_w", Tensor::randn(&[f, config.obs_slots * f], scale, &mut irng))?;
        let obs_b = ps.add("fusion.obs_b", Tensor::zeros(&[config.obs_slots * f]))?;
        let text_pos = ps.add(
            "fusion.text_pos",
            Tensor::randn(&[config.max_text_len, f], 0.02, &mut irng),
        )?;
        let fattn = AttentionParams::init(&mut ps, "fusion.attn", f, config.fusion_heads, &mut irng)?;
        let fout_w = ps.add("fusion.out_w", Tensor::randn(&[f, config.embedding_dim], scale, &mut irng))?;
        let fout_b = ps.add("fusion.out_b", Tensor::zeros(&[config.embedding_dim]))?;
        let fusion = FusionIds {
            obs_w,
            obs_b,
            text_pos,
            attn: fattn,
            out_w: fout_w,
            out_b: fout_b,
        };

        let s = config.history_window + config.chunk_len;
        let in_w = ps.add(
            "action.in_w",
            Tensor::randn(&[ACTION_DIM, f], 1.0 / libm::sqrt(ACTION_DIM as f64), &mut irng),
        )?;
        let in_b = ps.add("action.in_b", Tensor::zeros(&[f]))?;
        let pos = ps.add("action.pos", Tensor::randn(&[s, f], 0.02, &mut irng))?;
        let mut layers = Vec::with_capacity(config.action_layers);
        for li in 0..config.action_layers {
            let p = format!("action.l{li}");
            let ln1_g = ps.add(&format!("{p}.ln1_g"), Tensor::filled(&[f], 1.0))?;
            let ln1_b = ps.add(&format!("{p}.ln1_b"), Tensor::zeros(&[f]))?;
            let attn = AttentionParams::init(&mut ps, &format!("{p}.attn"), f, config.action_heads, &mut irng)?;
            let ln2_g = ps.add(&format!("{p}.ln2_g"), Tensor::filled(&[f], 1.0))?;
            let ln2_b = ps.add(&format!("{p}.ln2_b"), Tensor::zeros(&[f]))?;
            let f1_w = ps.add(&format!("{p}.f1_w"), Tensor::randn(&[f, config.ffn_hidden], scale, &mut irng))?;
            let f1_b = ps.add(&format!("{p}.f1_b"), Tensor::zeros(&[config.ffn_hidden]))?;
            let f2_w = ps.add(
                &format!("{p}.f2_w"),
                Tensor::randn(&[config.ffn_hidden, f], 1.0 / libm::sqrt(config.ffn_hidden as f64), &mut irng),
            )?;
            let f2_b = ps.add(&format!("{p}.f2_b"), Tensor::zeros(&[f]))?;
            layers.push(ActionLayerIds {
                ln1_g,
                ln1_b,
                attn,
                ln2_g,
                ln2_b,
                f1_w,
                f1_b,
                f2_w,
                f2_b,
            });
        }
        let aout_w = ps.add("action.out_w", Tensor::randn(&[f, config.embedding_dim], scale, &mut irng))?;
        let aout_b = ps.add("action.out_b", Tensor::zeros(&[config.embedding_dim]))?;
        let action = ActionIds {
            in_w,
            in_b,
            pos,
            layers,
            out_w: aout_w,
            out_b: aout_b,
        };

        Ok(Self {
            config,
            frozen,
            params: ps,
            fusion,
            action,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }
}

pub fn normalize(v: &[f64]) -> Vec<f64> {
    let n = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>()).max(1e-12);
    v.iter().map(|x| x / n).collect()
}

/// d/dx of y = x/‖x‖: (dy − y·(y·dy)) / ‖x‖.
fn normalize_backward(x: &[f64], dy: &[f64]) -> Vec<f64> {
    let n = libm::sqrt(x.iter().map(|v| v * v).sum::<f64>()).max(1e-12);
    let y: Vec<f64> = x.iter().map(|v| v / n).collect();
    let dot: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
    y.iter().zip(dy).map(|(yi, dyi)| (dyi - yi * dot) / n).collect()
}

// ---------------------------------------------------------------------------
// fusion forward/backward
// ---------------------------------------------------------------------------

pub struct FuseCache {
    obs_in: Tensor,          // [1, F]
    obs_tokens: Tensor,      // [1, slots, F]
    x: Tensor,               // [1, T, F] text + positions
    attn_cache: AttentionCache,
    t: usize,
    pos_index: Vec<usize>,
}

/// F_combined: text tokens (plus learned positions) attend over projected
/// observation slots; residual, mean-pool, project to E. Unnormalized.
pub fn fuse_forward(model: &VerifierModel, obs_feat: &[f64], text_feat: &Tensor) -> Result<(Vec<f64>, FuseCache)> {
    counters::FUSE.fetch_add(1, core::sync::atomic::Ordering::SeqCst);
    let f = model.config.feature_dim;
    if obs_feat.len() != f || text_feat.shape().len() != 2 || text_feat.shape()[1] != f {
        return Err(NumericsError::ShapeMismatch {
            left: vec![obs_feat.len()],
            right: text_feat.shape().to_vec(),
            context: "fuse_forward",
        }
        .into());
    }
    let t = text_feat.shape()[0];
    let slots = model.config.obs_slots;
    let obs_in = Tensor::new(&[1, f], obs_feat.to_vec())?;
    let obs_flat = affine(&model.params, &obs_in, model.fusion.obs_w, model.fusion.obs_b)?;
    let obs_tokens = Tensor::new(&[1, slots, f], obs_flat.data().to_vec())?;

    let pos = model.params.value(model.fusion.text_pos);
    let mut x = Tensor::zeros(&[1, t, f]);
    let mut pos_index = Vec::with_capacity(t);
    for row in 0..t {
        let pi = row.min(model.config.max_text_len - 1);
        pos_index.push(pi);
        for c in 0..f {
            x.data_mut()[row * f + c] = text_feat.data()[row * f + c] + pos.data()[pi * f + c];
        }
    }
    let (attn_out, attn_cache) =
        multi_head_attention(&model.params, &x, &obs_tokens, &obs_tokens, &model.fusion.attn)?;
    // residual + mean-pool
    let mut pooled = Tensor::zeros(&[1, f]);
    for row in 0..t {
        for c in 0..f {
            pooled.data_mut()[c] += (x.data()[row * f + c] + attn_out.data()[row * f + c]) / t as f64;
        }
    }
    let emb = affine(&model.params, &pooled, model.fusion.out_w, model.fusion.out_b)?;
    Ok((
        emb.data().to_vec(),
        FuseCache {
            obs_in,
            obs_tokens,
            x,
            attn_cache,
            t,
            pos_index,
        },
    ))
}

/// Accumulates fusion gradients for d(emb). Frozen text/obs features absorb
/// their gradients silently.
pub fn fuse_backward(model: &mut VerifierModel, cache: &FuseCache, demb: &[f64]) -> Result<()> {
    let f = model.config.feature_dim;
    let t = cache.t;
    let e = model.config.embedding_dim;
    if demb.len() != e {
        return Err(NumericsError::ShapeMismatch {
            left: vec![demb.len()],
            right: vec![e],
            context: "fuse_backward",
        }
        .into());
    }
    // re-run the cheap tail forward to get pooled for affine_backward
    let (attn_out, _) = multi_head_attention(
        &model.params,
        &cache.x,
        &cache.obs_tokens,
        &cache.obs_tokens,
        &model.fusion.attn,
    )?;
    let mut pooled = Tensor::zeros(&[1, f]);
    for row in 0..t {
        for c in 0..f {
            pooled.data_mut()[c] +=
                (cache.x.data()[row * f + c] + attn_out.data()[row * f + c]) / t as f64;
        }
    }
    let dy = Tensor::new(&[1, e], demb.to_vec())?;
    let dpooled = affine_backward(&mut model.params, &pooled, model.fusion.out_w, model.fusion.out_b, &dy)?;
    let mut dsum = Tensor::zeros(&[1, t, f]);
    for row in 0..t {
        for c in 0..f {
            dsum.data_mut()[row * f + c] = dpooled.data()[c] / t as f64;
        }
    }
    let (dq_in, dk_in, dv_in) =
        multi_head_attention_backward(&mut model.params, &model.fusion.attn, &cache.attn_cache, &dsum)?;
    // residual: x receives dsum directly plus the query path
    {
        let pos_grad = model.params.grad_mut(model.fusion.text_pos).data_mut();
        for row in 0..t {
            let pi = cache.pos_index[row];
            for c in 0..f {
                pos_grad[pi * f + c] += dsum.data()[row * f + c] + dq_in.data()[row * f + c];
            }
        }
    }
    // obs tokens: key + value paths, back through the slot projection
    let slots = model.config.obs_slots;
    let mut dobs_flat = Tensor::zeros(&[1, slots * f]);
    for i in 0..slots * f {
        dobs_flat.data_mut()[i] = dk_in.data()[i] + dv_in.data()[i];
    }
    let _dobs_in = affine_backward(
        &mut model.params,
        &cache.obs_in,
        model.fusion.obs_w,
        model.fusion.obs_b,
        &dobs_flat,
    )?;
    Ok(())
}

// ---------------------------------------------------------------------------
// action encoder forward/backward
// ---------------------------------------------------------------------------

struct ActionLayerCache {
    ln1: LayerNormCache,
    attn: AttentionCache,
    ln2: LayerNormCache,
    n2: Tensor,
    h_tanh: Tensor, // tanh(f1(n2))
}

pub struct ActionCache {
    seq_in: Tensor, // [S, ACTION_DIM]
    layers: Vec<ActionLayerCache>,
    x_final: Tensor,
    s: usize,
}

/// A(h, a): concatenated history + chunk through the transformer, mean-pooled
/// and projected to E. Unnormalized.
pub fn encode_action_forward(
    model: &VerifierModel,
    h: &ActionHistory,
    a: &ActionChunk,
) -> Result<(Vec<f64>, ActionCache)> {
    counters::ACTION_ENCODER.fetch_add(1, core::sync::atomic::Ordering::SeqCst);
    let w = model.config.history_window;
    let hl = model.config.chunk_len;
    if h.window() != w || a.len() != hl {
        return Err(NumericsError::ShapeMismatch {
            left: vec![h.window(), a.len()],
            right: vec![w, hl],
            context: "encode_action",
        }
        .into());
    }
    let s = w + hl;
    let f = model.config.feature_dim;
    let mut seq = Vec::with_capacity(s * ACTION_DIM);
    seq.extend_from_slice(h.flat());
    seq.extend_from_slice(a.flat());
    let seq_in = Tensor::new(&[s, ACTION_DIM], seq)?;

    let mut x = affine(&model.params, &seq_in, model.action.in_w, model.action.in_b)?;
    {
        let pos = model.params.value(model.action.pos);
        for i in 0..s * f {
            x.data_mut()[i] += pos.data()[i];
        }
    }
    let mut caches = Vec::with_capacity(model.action.layers.len());
    for lp in &model.action.layers {
        let (n1, ln1) = layer_norm(&model.params, &x, lp.ln1_g, lp.ln1_b, 1e-5)?;
        let n1_3 = Tensor::new(&[1, s, f], n1.data().to_vec())?;
        let (attn_out, attn) = multi_head_attention(&model.params, &n1_3, &n1_3, &n1_3, &lp.attn)?;
        for i in 0..s * f {
            x.data_mut()[i] += attn_out.data()[i];
        }
        let (n2, ln2) = layer_norm(&model.params, &x, lp.ln2_g, lp.ln2_b, 1e-5)?;
        let h1 = affine(&model.params, &n2, lp.f1_w, lp.f1_b)?;
        let mut h_tanh = h1;
        for v in h_tanh.data_mut() {
            *v = libm::tanh(*v);
        }
        let f_out = affine(&model.params, &h_tanh, lp.f2_w, lp.f2_b)?;
        for i in 0..s * f {
            x.data_mut()[i] += f_out.data()[i];
        }
        caches.push(ActionLayerCache {
            ln1,
            attn,
            ln2,
            n2,
            h_tanh,
        });
    }
    let x_final = x.clone();
    let mut pooled = Tensor::zeros(&[1, f]);
    for row in 0..s {
        for c in 0..f {
            pooled.data_mut()[c] += x.data()[row * f + c] / s as f64;
        }
    }
    let emb = affine(&model.params, &pooled, model.action.out_w, model.action.out_b)?;
    Ok((
        emb.data().to_vec(),
        ActionCache {
            seq_in,
            layers: caches,
            x_final,
            s,
        },
    ))
}

pub fn encode_action_backward(model: &mut VerifierModel, cache: &ActionCache, demb: &[f64]) -> Result<()> {
    let f = model.config.feature_dim;
    let s = cache.s;
    let e = model.config.embedding_dim;
    let mut pooled = Tensor::zeros(&[1, f]);
    for row in 0..s {
        for c in 0..f {
            pooled.data_mut()[c] += cache.x_final.data()[row * f + c] / s as f64;
        }
    }
    let dy = Tensor::new(&[1, e], demb.to_vec())?;
    let dpooled = affine_backward(&mut model.params, &pooled, model.action.out_w, model.action.out_b, &dy)?;
    let mut dx = Tensor::zeros(&[s, f]);
    for row in 0..s {
        for c in 0..f {
            dx.data_mut()[row * f + c] = dpooled.data()[c] / s as f64;
        }
    }
    let layer_ids: Vec<ActionLayerIds> = model.action.layers.clone();
    for (lp, lc) in layer_ids.iter().zip(cache.layers.iter()).rev() {
        // ffn branch
        let mut dh_tanh = affine_backward(&mut model.params, &lc.h_tanh, lp.f2_w, lp.f2_b, &dx)?;
        for (g, y) in dh_tanh.data_mut().iter_mut().zip(lc.h_tanh.data()) {
            *g *= 1.0 - y * y;
        }
        let dn2 = affine_backward(&mut model.params, &lc.n2, lp.f1_w, lp.f1_b, &dh_tanh)?;
        let dx_mid_branch = layer_norm_backward(&mut model.params, &lc.ln2, lp.ln2_g, lp.ln2_b, &dn2)?;
        let mut dx_mid = dx.clone();
        for i in 0..s * f {
            dx_mid.data_mut()[i] += dx_mid_branch.data()[i];
        }
        // attention branch
        let dattn3 = Tensor::new(&[1, s, f], dx_mid.data().to_vec())?;
        let (dq, dk, dv) = multi_head_attention_backward(&mut model.params, &lp.attn, &lc.attn, &dattn3)?;
        let mut dn1 = Tensor::zeros(&[s, f]);
        for i in 0..s * f {
            dn1.data_mut()[i] = dq.data()[i] + dk.data()[i] + dv.data()[i];
        }
        let dx_in_branch = layer_norm_backward(&mut model.params, &lc.ln1, lp.ln1_g, lp.ln1_b, &dn1)?;
        let mut dx_in = dx_mid;
        for i in 0..s * f {
            dx_in.data_mut()[i] += dx_in_branch.data()[i];
        }
        dx = dx_in;
    }
    // positions then input projection
    {
        let pg = model.params.grad_mut(model.action.pos).data_mut();
        for i in 0..s * f {
            pg[i] += dx.data()[i];
        }
    }
    let _dseq = affine_backward(&mut model.params, &cache.seq_in, model.action.in_w, model.action.in_b, &dx)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// scoring
// ---------------------------------------------------------------------------

/// Cosine alignment of the fused observation/instruction embedding with the
/// action embedding.
pub fn score(
    model: &VerifierModel,
    o: &WorldState,
    h: &ActionHistory,
    l: &Instruction,
    a: &ActionChunk,
) -> Result<f64> {
    let obs = model.frozen.encode_obs(o);
    let text = model.frozen.encode_text(l);
    let (femb, _) = fuse_forward(model, &obs, &text)?;
    let (aemb, _) = encode_action_forward(model, h, a)?;
    let f = normalize(&femb);
    let an = normalize(&aemb);
    Ok(f.iter().zip(&an).map(|(x, y)| x * y).sum())
}

/// Score against a precomputed unit-norm fused embedding; the per-candidate
/// path inside the inference loop.
pub fn score_with_fused(
    model: &VerifierModel,
    fused_unit: &[f64],
    h: &ActionHistory,
    a: &ActionChunk,
) -> Result<f64> {
    let (aemb, _) = encode_action_forward(model, h, a)?;
    let an = normalize(&aemb);
    Ok(fused_unit.iter().zip(&an).map(|(x, y)| x * y).sum())
}

// ---------------------------------------------------------------------------
// ensembles
// ---------------------------------------------------------------------------

/// Average each modality's unit embeddings across members, re-normalize, then
/// take the inner product.
pub fn ensemble_score(
    members: &[VerifierModel],
    o: &WorldState,
    h: &ActionHistory,
    l: &Instruction,
    a: &ActionChunk,
) -> Result<f64> {
    if members.is_empty() {
        return Err(VerifierError::Config("empty ensemble".to_string()));
    }
    let e = members[0].config.embedding_dim;
    let mut favg = vec![0.0; e];
    let mut aavg = vec![0.0; e];
    for m in members {
        if m.config.embedding_dim != e {
            return Err(VerifierError::Config(format!(
                "mixed embedding dims {} vs {e}",
                m.config.embedding_dim
            )));
        }
        let obs = m.frozen.encode_obs(o);
        let text = m.frozen.encode_text(l);
        let (femb, _) = fuse_forward(m, &obs, &text)?;
        let (aemb, _) = encode_action_forward(m, h, a)?;
        for (acc, v) in favg.iter_mut().zip(normalize(&femb)) {
            *acc += v / members.len() as f64;
        }
        for (acc, v) in aavg.iter_mut().zip(normalize(&aemb)) {
            *acc += v / members.len() as f64;
        }
    }
    let fu = normalize(&favg);
    let au = normalize(&aavg);
    Ok(fu.iter().zip(&au).map(|(x, y)| x * y).sum())
}

// ---------------------------------------------------------------------------
// dataset augmentation
// ---------------------------------------------------------------------------

/// Cross product of tuples with their intent's instruction set; observations,
/// history, and actions are copied unchanged.
pub fn augment_dataset(
    tuples: &[Tuple],
    instruction_sets: &BTreeMap<u64, Vec<Instruction>>,
) -> Result<Vec<Tuple>> {
    let mut out = Vec::new();
    for t in tuples {
        let set = instruction_sets.get(&t.intent.id).ok_or_else(|| {
            VerifierError::Lookup(format!("no instruction set for intent {:#x}", t.intent.id))
        })?;
        for ins in set {
            let mut copy = t.clone();
            copy.instruction = ins.clone();
            out.push(copy);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// InfoNCE
// ---------------------------------------------------------------------------

/// One bi-directional InfoNCE step over a minibatch. Zeroes then fills the
/// model's gradients; returns the loss. Gradients flow only into fusion and
/// action-encoder parameters.
pub fn infonce_step(model: &mut VerifierModel, batch: &[Tuple], tau: f64) -> Result<f64> {
    if batch.is_empty() {
        return Err(VerifierError::Config("empty minibatch".to_string()));
    }
    if tau <= 0.0 {
        return Err(VerifierError::Config(format!("tau must be > 0, got {tau}")));
    }
    let b = batch.len();
    let e = model.config.embedding_dim;
    model.params.zero_grads();

    let mut fraw = Vec::with_capacity(b);
    let mut fcaches = Vec::with_capacity(b);
    let mut araw = Vec::with_capacity(b);
    let mut acaches = Vec::with_capacity(b);
    for t in batch {
        let obs = model.frozen.encode_obs(&t.state);
        let text = model.frozen.encode_text(&t.instruction);
        let (femb, fc) = fuse_forward(model, &obs, &text)?;
        let (aemb, ac) = encode_action_forward(model, &t.history, &t.action)?;
        fraw.push(femb);
        fcaches.push(fc);
        araw.push(aemb);
        acaches.push(ac);
    }
    let funit: Vec<Vec<f64>> = fraw.iter().map(|v| normalize(v)).collect();
    let aunit: Vec<Vec<f64>> = araw.iter().map(|v| normalize(v)).collect();

    let mut scores = Tensor::zeros(&[b, b]);
    for i in 0..b {
        for j in 0..b {
            let s: f64 = funit[i].iter().zip(&aunit[j]).map(|(x, y)| x * y).sum();
            *scores.at2_mut(i, j) = s / tau;
        }
    }
    let (loss_fa, g_fa) = row_softmax_nll(&scores)?;
    let mut scores_t = Tensor::zeros(&[b, b]);
    for i in 0..b {
        for j in 0..b {
            *scores_t.at2_mut(i, j) = scores.at2(j, i);
        }
    }
    let (loss_af, g_af) = row_softmax_nll(&scores_t)?;
    let loss = 0.5 * (loss_fa + loss_af);

    // dScore[i,j] combines both directions; divide by tau for the scaling
    let mut dscore = Tensor::zeros(&[b, b]);
    for i in 0..b {
        for j in 0..b {
            *dscore.at2_mut(i, j) = 0.5 * (g_fa.at2(i, j) + g_af.at2(j, i)) / tau;
        }
    }
    for i in 0..b {
        let mut dfu = vec![0.0; e];
        for j in 0..b {
            let d = dscore.at2(i, j);
            for c in 0..e {
                dfu[c] += d * aunit[j][c];
            }
        }
        let dfr = normalize_backward(&fraw[i], &dfu);
        fuse_backward(model, &fcaches[i], &dfr)?;
    }
    for j in 0..b {
        let mut dau = vec![0.0; e];
        for i in 0..b {
            let d = dscore.at2(i, j);
            for c in 0..e {
                dau[c] += d * funit[i][c];
            }
        }
        let dar = normalize_backward(&araw[j], &dau);
        encode_action_backward(model, &acaches[j], &dar)?;
    }
    Ok(loss)
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub tau: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            steps: 400,
            lr: 1e-3,
            tau: 1.0,
            seed: 0,
        }
    }
}

fn batch_hash(indices: &[usize]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for i in indices {
        h ^= *i as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Minibatch SGD with Adam over shuffled epochs. Deterministic given the
/// seeds; aborts on a non-finite loss.
pub fn train(
    d_aug: &[Tuple],
    vconfig: VerifierConfig,
    tconfig: TrainConfig,
) -> Result<(VerifierModel, Vec<(usize, f64)>)> {
    if tconfig.batch_size < 2 || d_aug.len() < tconfig.batch_size {
        return Err(VerifierError::Config(format!(
            "need |D_aug| >= batch_size >= 2, got {} and {}",
            d_aug.len(),
            tconfig.batch_size
        )));
    }
    let mut model = VerifierModel::init(vconfig)?;
    let mut adam = AdamState::new(&model.params);
    let mut order: Vec<usize> = (0..d_aug.len()).collect();
    let mut srng = rng::substream(tconfig.seed, &[0x747261696e]);
    let mut cursor = order.len(); // forces a shuffle on first use
    let mut log = Vec::with_capacity(tconfig.steps);
    for step in 0..tconfig.steps {
        let mut idx = Vec::with_capacity(tconfig.batch_size);
        for _ in 0..tconfig.batch_size {
            if cursor >= order.len() {
                for i in 0..order.len() {
                    let j = i + rng::below(&mut srng, order.len() - i);
                    order.swap(i, j);
                }
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let batch: Vec<Tuple> = idx.iter().map(|i| d_aug[*i].clone()).collect();
        let loss = infonce_step(&mut model, &batch, tconfig.tau)?;
        if !loss.is_finite() {
            return Err(VerifierError::NonFinite {
                step,
                batch_hash: batch_hash(&idx),
            });
        }
        adam_step(&mut model.params, &mut adam, tconfig.lr, 0.9, 0.999, 1e-8);
        log.push((step, loss));
    }
    Ok((model, log))
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

#[derive(Debug, Error, PartialEq, Clone)]
pub enum CheckpointError {
    #[error("bad magic bytes (not a verifier checkpoint)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (supported: {supported})")]
    Version { found: u32, supported: u32 },
    #[error("truncated checkpoint: needed {needed} more bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("tensor {name} has shape {found:?}, model expects {expected:?}")]
    Shape {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("checkpoint tensor {0} unknown to this architecture")]
    UnknownTensor(String),
    #[error("model tensor {0} missing from checkpoint")]
    MissingTensor(String),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

const MAGIC: &[u8; 4] = b"VACK";

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn config_words(c: &VerifierConfig) -> [u64; 14] {
    [
        c.seed,
        c.frozen_seed,
        c.feature_dim as u64,
        c.embedding_dim as u64,
        c.obs_slots as u64,
        c.fusion_heads as u64,
        c.action_layers as u64,
        c.action_heads as u64,
        c.ffn_hidden as u64,
        c.max_text_len as u64,
        c.chunk_len as u64,
        c.history_window as u64,
        c.obs_input_dim as u64,
        c.text_vocab_size as u64,
    ]
}

fn config_from_words(w: &[u64]) -> VerifierConfig {
    VerifierConfig {
        seed: w[0],
        frozen_seed: w[1],
        feature_dim: w[2] as usize,
        embedding_dim: w[3] as usize,
        obs_slots: w[4] as usize,
        fusion_heads: w[5] as usize,
        action_layers: w[6] as usize,
        action_heads: w[7] as usize,
        ffn_hidden: w[8] as usize,
        max_text_len: w[9] as usize,
        chunk_len: w[10] as usize,
        history_window: w[11] as usize,
        obs_input_dim: w[12] as usize,
        text_vocab_size: w[13] as usize,
    }
}

/// Checkpoint bytes for an ensemble (a single model is an ensemble of one):
/// magic, version, member count, then per member a metadata block and the
/// named parameter tensors in declaration order.
pub fn serialize_ensemble(members: &[VerifierModel]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    push_u32(&mut out, CHECKPOINT_VERSION);
    push_u32(&mut out, members.len() as u32);
    for m in members {
        let words = config_words(&m.config);
        push_u32(&mut out, words.len() as u32);
        for w in words {
            push_u64(&mut out, w);
        }
        push_u32(&mut out, m.params.len() as u32);
        for (_, p) in m.params.iter() {
            let name = p.name.as_bytes();
            push_u32(&mut out, name.len() as u32);
            out.extend_from_slice(name);
            push_u32(&mut out, p.value.shape().len() as u32);
            for d in p.value.shape() {
                push_u64(&mut out, *d as u64);
            }
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    off: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> core::result::Result<&'a [u8], CheckpointError> {
        if self.off + n > self.bytes.len() {
            return Err(CheckpointError::Truncated {
                offset: self.off,
                needed: self.off + n - self.bytes.len(),
            });
        }
        let s = &self.bytes[self.off..self.off + n];
        self.off += n;
        Ok(s)
    }

    fn u32(&mut self) -> core::result::Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> core::result::Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> core::result::Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn deserialize_ensemble(bytes: &[u8]) -> Result<Vec<VerifierModel>> {
    let mut r = Reader { bytes, off: 0 };
    if r.take(4)? != MAGIC {
        return Err(CheckpointError::BadMagic.into());
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version {
            found: version,
            supported: CHECKPOINT_VERSION,
        }
        .into());
    }
    let count = r.u32()? as usize;
    if count == 0 || count > 1024 {
        return Err(CheckpointError::Corrupt(format!("member count {count}")).into());
    }
    let mut members = Vec::with_capacity(count);
    for _ in 0..count {
        let nwords = r.u32()? as usize;
        if nwords != 14 {
            return Err(CheckpointError::Corrupt(format!("metadata block of {nwords} words")).into());
        }
        let mut words = Vec::with_capacity(nwords);
        for _ in 0..nwords {
            words.push(r.u64()?);
        }
        let config = config_from_words(&words);
        let mut model = VerifierModel::init(config)?;
        let ntensors = r.u32()? as usize;
        if ntensors != model.params.len() {
            return Err(CheckpointError::Corrupt(format!(
                "{ntensors} tensors for an architecture with {}",
                model.params.len()
            ))
            .into());
        }
        let mut seen: Vec<String> = Vec::with_capacity(ntensors);
        for _ in 0..ntensors {
            let nlen = r.u32()? as usize;
            if nlen > 4096 {
                return Err(CheckpointError::Corrupt(format!("tensor name of {nlen} bytes")).into());
            }
            let name = core::str::from_utf8(r.take(nlen)?)
                .map_err(|_| CheckpointError::Corrupt("non-utf8 tensor name".to_string()))?
                .to_string();
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(CheckpointError::Corrupt(format!("tensor rank {rank}")).into());
            }
            let mut dims = Vec::with_capacity(rank);
            let mut total = 1usize;
            for _ in 0..rank {
                let d = r.u64()? as usize;
                total = total.saturating_mul(d);
                dims.push(d);
            }
            if total > 100_000_000 {
                return Err(CheckpointError::Corrupt("oversized tensor".to_string()).into());
            }
            let mut data = Vec::with_capacity(total);
            for _ in 0..total {
                data.push(r.f64()?);
            }
            let id = model
                .params
                .by_name(&name)
                .ok_or_else(|| CheckpointError::UnknownTensor(name.clone()))?;
            let expected = model.params.value(id).shape().to_vec();
            if expected != dims {
                return Err(CheckpointError::Shape {
                    name,
                    found: dims,
                    expected,
                }
                .into());
            }
            *model.params.value_mut(id) = Tensor::new(&dims, data)
                .map_err(|_| CheckpointError::Corrupt(format!("non-finite data in {name}")))?;
            seen.push(name);
        }
        for (_, p) in model.params.iter() {
            if !seen.contains(&p.name) {
                return Err(CheckpointError::MissingTensor(p.name.clone()).into());
            }
        }
        members.push(model);
    }
    Ok(members)
}
