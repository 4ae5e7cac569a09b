use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::{NumericsError, ParamId, ParamSet, Result, Tensor};
use crate::rng::Stream;

// ---------------------------------------------------------------------------
// flat matmul helpers (fixed i-k-j loop order for determinism and locality)
// ---------------------------------------------------------------------------

/// c[m×n] += a[m×k] · b[k×n]
fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

/// c[k×n] += a[m×k]ᵀ · b[m×n]
fn matmul_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

/// c[m×k] += a[m×n] · b[k×n]ᵀ
fn matmul_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for j in 0..n {
                s += arow[j] * brow[j];
            }
            c[i * k + p] += s;
        }
    }
}

// ---------------------------------------------------------------------------
// affine
// ---------------------------------------------------------------------------

/// out[i,j] = Σ_k x[i,k]·w[k,j] + b[j]
pub fn affine(ps: &ParamSet, x: &Tensor, w: ParamId, b: ParamId) -> Result<Tensor> {
    let wv = ps.value(w);
    let bv = ps.value(b);
    let (xs, wsh) = (x.shape(), wv.shape());
    if xs.len() != 2 || wsh.len() != 2 || xs[1] != wsh[0] || bv.shape() != [wsh[1]] {
        return Err(NumericsError::ShapeMismatch {
            left: xs.to_vec(),
            right: wsh.to_vec(),
            context: "affine",
        });
    }
    let (m, k, n) = (xs[0], xs[1], wsh[1]);
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        out.data_mut()[i * n..(i + 1) * n].copy_from_slice(bv.data());
    }
    matmul_acc(x.data(), wv.data(), out.data_mut(), m, k, n);
    Ok(out)
}

/// Accumulates dw, db into the param set and returns dx.
pub fn affine_backward(
    ps: &mut ParamSet,
    x: &Tensor,
    w: ParamId,
    b: ParamId,
    dy: &Tensor,
) -> Result<Tensor> {
    let wsh = ps.value(w).shape().to_vec();
    let xs = x.shape().to_vec();
    if dy.shape() != [xs[0], wsh[1]] {
        return Err(NumericsError::ShapeMismatch {
            left: dy.shape().to_vec(),
            right: vec![xs[0], wsh[1]],
            context: "affine_backward",
        });
    }
    let (m, k, n) = (xs[0], xs[1], wsh[1]);
    // dw += xᵀ·dy
    matmul_tn_acc(x.data(), dy.data(), ps.grad_mut(w).data_mut(), m, k, n);
    // db += column sums of dy
    {
        let gb = ps.grad_mut(b).data_mut();
        for i in 0..m {
            for j in 0..n {
                gb[j] += dy.data()[i * n + j];
            }
        }
    }
    // dx = dy·wᵀ
    let mut dx = Tensor::zeros(&[m, k]);
    matmul_nt_acc(dy.data(), ps.value(w).data(), dx.data_mut(), m, n, k);
    Ok(dx)
}

// ---------------------------------------------------------------------------
// layer norm
// ---------------------------------------------------------------------------

pub struct LayerNormCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
}

/// Row-wise normalize to mean 0 / variance 1 (eps-stabilized), then scale and
/// shift by the gain and bias parameters.
pub fn layer_norm(
    ps: &ParamSet,
    x: &Tensor,
    gain: ParamId,
    bias: ParamId,
    eps: f64,
) -> Result<(Tensor, LayerNormCache)> {
    let xs = x.shape();
    if xs.len() != 2 {
        return Err(NumericsError::ShapeMismatch {
            left: xs.to_vec(),
            right: vec![0, 0],
            context: "layer_norm",
        });
    }
    let (b, d) = (xs[0], xs[1]);
    if ps.value(gain).shape() != [d] || ps.value(bias).shape() != [d] {
        return Err(NumericsError::ShapeMismatch {
            left: ps.value(gain).shape().to_vec(),
            right: vec![d],
            context: "layer_norm params",
        });
    }
    if eps <= 0.0 {
        return Err(NumericsError::InvalidArg(format!("eps must be > 0, got {eps}")));
    }
    let g = ps.value(gain).data();
    let be = ps.value(bias).data();
    let mut out = Tensor::zeros(&[b, d]);
    let mut xhat = Tensor::zeros(&[b, d]);
    let mut inv_std = vec![0.0; b];
    for i in 0..b {
        let row = &x.data()[i * d..(i + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let istd = 1.0 / libm::sqrt(var + eps);
        inv_std[i] = istd;
        for j in 0..d {
            let h = (row[j] - mean) * istd;
            xhat.data_mut()[i * d + j] = h;
            out.data_mut()[i * d + j] = g[j] * h + be[j];
        }
    }
    Ok((out, LayerNormCache { xhat, inv_std }))
}

pub fn layer_norm_backward(
    ps: &mut ParamSet,
    cache: &LayerNormCache,
    gain: ParamId,
    bias: ParamId,
    dy: &Tensor,
) -> Result<Tensor> {
    let (b, d) = (cache.xhat.shape()[0], cache.xhat.shape()[1]);
    if dy.shape() != [b, d] {
        return Err(NumericsError::ShapeMismatch {
            left: dy.shape().to_vec(),
            right: vec![b, d],
            context: "layer_norm_backward",
        });
    }
    let gval = ps.value(gain).data().to_vec();
    let mut dx = Tensor::zeros(&[b, d]);
    {
        let gg = ps.grad_mut(gain).data_mut();
        for i in 0..b {
            for j in 0..d {
                gg[j] += dy.data()[i * d + j] * cache.xhat.data()[i * d + j];
            }
        }
    }
    {
        let gb = ps.grad_mut(bias).data_mut();
        for i in 0..b {
            for j in 0..d {
                gb[j] += dy.data()[i * d + j];
            }
        }
    }
    for i in 0..b {
        let xh = &cache.xhat.data()[i * d..(i + 1) * d];
        let dyr = &dy.data()[i * d..(i + 1) * d];
        let istd = cache.inv_std[i];
        // dxhat = dy * gain; dx = istd/D * (D*dxhat - Σdxhat - xhat*Σ(dxhat*xhat))
        let mut s1 = 0.0;
        let mut s2 = 0.0;
        for j in 0..d {
            let dh = dyr[j] * gval[j];
            s1 += dh;
            s2 += dh * xh[j];
        }
        for j in 0..d {
            let dh = dyr[j] * gval[j];
            dx.data_mut()[i * d + j] = istd * (dh - s1 / d as f64 - xh[j] * s2 / d as f64);
        }
    }
    Ok(dx)
}

// ---------------------------------------------------------------------------
// softmax + InfoNCE row loss
// ---------------------------------------------------------------------------

/// Row-stochastic softmax of a 2-D tensor, max-subtracted for stability.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let (m, n) = (x.shape()[0], x.shape()[1]);
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        let row = &x.data()[i * n..(i + 1) * n];
        let mx = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut z = 0.0;
        let orow = &mut out.data_mut()[i * n..(i + 1) * n];
        for j in 0..n {
            let e = libm::exp(row[j] - mx);
            orow[j] = e;
            z += e;
        }
        for v in orow.iter_mut() {
            *v /= z;
        }
    }
    out
}

/// Mean over rows of -log softmax(scores[i,:])[i], with the exact gradient
/// (softmax minus one-hot, scaled by 1/B). Targets are the diagonal.
pub fn row_softmax_nll(scores: &Tensor) -> Result<(f64, Tensor)> {
    let sh = scores.shape();
    if sh.len() != 2 || sh[0] != sh[1] {
        return Err(NumericsError::ShapeMismatch {
            left: sh.to_vec(),
            right: vec![sh[0], sh[0]],
            context: "row_softmax_nll",
        });
    }
    let b = sh[0];
    let p = softmax_rows(scores);
    let mut loss = 0.0;
    let mut grad = p.clone();
    for i in 0..b {
        loss += -libm::log(p.at2(i, i));
        *grad.at2_mut(i, i) -= 1.0;
    }
    loss /= b as f64;
    for v in grad.data_mut() {
        *v /= b as f64;
    }
    Ok((loss, grad))
}

// ---------------------------------------------------------------------------
// multi-head attention
// ---------------------------------------------------------------------------

/// Learned projections for one attention block.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub heads: usize,
}

impl AttentionParams {
    pub fn init(
        ps: &mut ParamSet,
        prefix: &str,
        dim: usize,
        heads: usize,
        rng: &mut Stream,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(NumericsError::Config(format!(
                "attention dim {dim} not divisible by heads {heads}"
            )));
        }
        let scale = 1.0 / libm::sqrt(dim as f64);
        let mk = |ps: &mut ParamSet, name: &str, rng: &mut Stream| {
            ps.add(
                &format!("{prefix}.{name}"),
                Tensor::randn(&[dim, dim], scale, rng),
            )
        };
        let wq = mk(ps, "wq", rng)?;
        let wk = mk(ps, "wk", rng)?;
        let wv = mk(ps, "wv", rng)?;
        let wo = mk(ps, "wo", rng)?;
        let bq = ps.add(&format!("{prefix}.bq"), Tensor::zeros(&[dim]))?;
        let bk = ps.add(&format!("{prefix}.bk"), Tensor::zeros(&[dim]))?;
        let bv = ps.add(&format!("{prefix}.bv"), Tensor::zeros(&[dim]))?;
        let bo = ps.add(&format!("{prefix}.bo"), Tensor::zeros(&[dim]))?;
        Ok(Self {
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
            heads,
        })
    }
}

pub struct AttentionCache {
    q_in: Tensor,
    k_in: Tensor,
    v_in: Tensor,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    attn: Tensor, // [B, heads, Tq, Tk] row-stochastic
    concat: Tensor,
    batch: usize,
    tq: usize,
    tk: usize,
    dim: usize,
}

impl AttentionCache {
    /// Attention weights for inspection in tests: [B, heads, Tq, Tk].
    pub fn weights(&self) -> &Tensor {
        &self.attn
    }
}

fn flat2(t: &Tensor) -> Tensor {
    // view [B,T,D] as [(B·T), D]
    let sh = t.shape();
    Tensor::new(&[sh[0] * sh[1], sh[2]], t.data().to_vec()).expect("reshape")
}

fn unflat3(t: Tensor, b: usize, tt: usize, d: usize) -> Tensor {
    Tensor::new(&[b, tt, d], t.data().to_vec()).expect("reshape")
}

/// Scaled dot-product attention with learned projections over [B, T, D]
/// inputs. Softmax rows are row-stochastic within 1e-9 by construction.
pub fn multi_head_attention(
    ps: &ParamSet,
    q_in: &Tensor,
    k_in: &Tensor,
    v_in: &Tensor,
    params: &AttentionParams,
) -> Result<(Tensor, AttentionCache)> {
    let (qs, ks, vs) = (q_in.shape(), k_in.shape(), v_in.shape());
    if qs.len() != 3 || ks.len() != 3 || vs.len() != 3 || qs[2] != ks[2] || ks != vs
        || qs[0] != ks[0]
    {
        return Err(NumericsError::ShapeMismatch {
            left: qs.to_vec(),
            right: ks.to_vec(),
            context: "multi_head_attention",
        });
    }
    let (b, tq, d) = (qs[0], qs[1], qs[2]);
    let tk = ks[1];
    let h = params.heads;
    if d % h != 0 {
        return Err(NumericsError::Config(format!(
            "attention dim {d} not divisible by heads {h}"
        )));
    }
    let dh = d / h;
    let q = unflat3(affine(ps, &flat2(q_in), params.wq, params.bq)?, b, tq, d);
    let k = unflat3(affine(ps, &flat2(k_in), params.wk, params.bk)?, b, tk, d);
    let v = unflat3(affine(ps, &flat2(v_in), params.wv, params.bv)?, b, tk, d);

    let inv_sqrt = 1.0 / libm::sqrt(dh as f64);
    let mut attn = Tensor::zeros(&[b, h, tq, tk]);
    let mut concat = Tensor::zeros(&[b, tq, d]);
    for bi in 0..b {
        for hi in 0..h {
            let off = hi * dh;
            // scores + softmax per query row
            for qi in 0..tq {
                let qrow = &q.data()[(bi * tq + qi) * d + off..(bi * tq + qi) * d + off + dh];
                let mut scores = vec![0.0; tk];
                for ki in 0..tk {
                    let krow =
                        &k.data()[(bi * tk + ki) * d + off..(bi * tk + ki) * d + off + dh];
                    let mut s = 0.0;
                    for x in 0..dh {
                        s += qrow[x] * krow[x];
                    }
                    scores[ki] = s * inv_sqrt;
                }
                let mx = scores.iter().fold(f64::NEG_INFINITY, |a, &s| a.max(s));
                let mut z = 0.0;
                for s in scores.iter_mut() {
                    *s = libm::exp(*s - mx);
                    z += *s;
                }
                let arow_base = ((bi * h + hi) * tq + qi) * tk;
                for ki in 0..tk {
                    let w = scores[ki] / z;
                    attn.data_mut()[arow_base + ki] = w;
                    // accumulate weighted values into the concat buffer
                    let vrow =
                        &v.data()[(bi * tk + ki) * d + off..(bi * tk + ki) * d + off + dh];
                    let crow = (bi * tq + qi) * d + off;
                    for x in 0..dh {
                        concat.data_mut()[crow + x] += w * vrow[x];
                    }
                }
            }
        }
    }
    let out = unflat3(affine(ps, &flat2(&concat), params.wo, params.bo)?, b, tq, d);
    Ok((
        out,
        AttentionCache {
            q_in: q_in.clone(),
            k_in: k_in.clone(),
            v_in: v_in.clone(),
            q,
            k,
            v,
            attn,
            concat,
            batch: b,
            tq,
            tk,
            dim: d,
        },
    ))
}

/// Backward through attention; accumulates projection grads and returns
/// (dq_in, dk_in, dv_in).
pub fn multi_head_attention_backward(
    ps: &mut ParamSet,
    params: &AttentionParams,
    cache: &AttentionCache,
    dout: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (b, tq, tk, d) = (cache.batch, cache.tq, cache.tk, cache.dim);
    if dout.shape() != [b, tq, d] {
        return Err(NumericsError::ShapeMismatch {
            left: dout.shape().to_vec(),
            right: vec![b, tq, d],
            context: "multi_head_attention_backward",
        });
    }
    let h = params.heads;
    let dh = d / h;
    let inv_sqrt = 1.0 / libm::sqrt(dh as f64);

    // through output projection
    let dconcat2 = affine_backward(ps, &flat2(&cache.concat), params.wo, params.bo, &flat2(dout))?;
    let dconcat = unflat3(dconcat2, b, tq, d);

    let mut dq = Tensor::zeros(&[b, tq, d]);
    let mut dk = Tensor::zeros(&[b, tk, d]);
    let mut dv = Tensor::zeros(&[b, tk, d]);
    for bi in 0..b {
        for hi in 0..h {
            let off = hi * dh;
            for qi in 0..tq {
                let arow_base = ((bi * h + hi) * tq + qi) * tk;
                let dcrow = (bi * tq + qi) * d + off;
                // dA[ki] = dH · V_head[ki]; dV += A ⊗ dH
                let mut da = vec![0.0; tk];
                for ki in 0..tk {
                    let a = cache.attn.data()[arow_base + ki];
                    let voff = (bi * tk + ki) * d + off;
                    let mut s = 0.0;
                    for x in 0..dh {
                        let dhx = dconcat.data()[dcrow + x];
                        s += dhx * cache.v.data()[voff + x];
                        dv.data_mut()[voff + x] += a * dhx;
                    }
                    da[ki] = s;
                }
                // softmax backward: ds = A ⊙ (dA − Σ dA⊙A)
                let dot: f64 = (0..tk)
                    .map(|ki| da[ki] * cache.attn.data()[arow_base + ki])
                    .sum();
                for ki in 0..tk {
                    let ds = cache.attn.data()[arow_base + ki] * (da[ki] - dot) * inv_sqrt;
                    let qoff = (bi * tq + qi) * d + off;
                    let koff = (bi * tk + ki) * d + off;
                    for x in 0..dh {
                        dq.data_mut()[qoff + x] += ds * cache.k.data()[koff + x];
                        dk.data_mut()[koff + x] += ds * cache.q.data()[qoff + x];
                    }
                }
            }
        }
    }
    let dq_in = affine_backward(ps, &flat2(&cache.q_in), params.wq, params.bq, &flat2(&dq))?;
    let dk_in = affine_backward(ps, &flat2(&cache.k_in), params.wk, params.bk, &flat2(&dk))?;
    let dv_in = affine_backward(ps, &flat2(&cache.v_in), params.wv, params.bv, &flat2(&dv))?;
    Ok((
        unflat3(dq_in, b, tq, d),
        unflat3(dk_in, b, tk, d),
        unflat3(dv_in, b, tk, d),
    ))
}

#[cfg(test)]
mod tests {
    use super::super::finite_diff_check;
    use super::*;
    use crate::rng;

    #[test]
    fn affine_identity_and_hand_value() {
        let mut ps = ParamSet::new();
        let w = ps
            .add("w", Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap())
            .unwrap();
        let b = ps.add("b", Tensor::zeros(&[2])).unwrap();
        let x = Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap();
        let y = affine(&ps, &x, w, b).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0]);

        let mut ps2 = ParamSet::new();
        let w2 = ps2
            .add("w", Tensor::new(&[2, 1], vec![3.0, 4.0]).unwrap())
            .unwrap();
        let b2 = ps2.add("b", Tensor::new(&[1], vec![1.0]).unwrap()).unwrap();
        let y2 = affine(&ps2, &x, w2, b2).unwrap();
        assert_eq!(y2.data(), &[12.0]);
    }

    #[test]
    fn affine_shape_mismatch_names_both_shapes() {
        let mut ps = ParamSet::new();
        let w = ps.add("w", Tensor::zeros(&[3, 2])).unwrap();
        let b = ps.add("b", Tensor::zeros(&[2])).unwrap();
        let x = Tensor::zeros(&[1, 2]);
        match affine(&ps, &x, w, b) {
            Err(NumericsError::ShapeMismatch { left, right, .. }) => {
                assert_eq!(left, vec![1, 2]);
                assert_eq!(right, vec![3, 2]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn affine_gradients_match_finite_differences() {
        let mut rng = rng::stream(42);
        let mut ps = ParamSet::new();
        let w = ps.add("w", Tensor::randn(&[3, 2], 0.5, &mut rng)).unwrap();
        let b = ps.add("b", Tensor::randn(&[2], 0.5, &mut rng)).unwrap();
        let x = Tensor::randn(&[4, 3], 1.0, &mut rng);
        // scalar loss: sum of squared outputs
        let y = affine(&ps, &x, w, b).unwrap();
        let dy = Tensor::new(y.shape(), y.data().iter().map(|v| 2.0 * v).collect()).unwrap();
        affine_backward(&mut ps, &x, w, b, &dy).unwrap();
        let err = finite_diff_check(
            &mut ps,
            |ps| {
                affine(ps, &x, w, b)
                    .unwrap()
                    .data()
                    .iter()
                    .map(|v| v * v)
                    .sum()
            },
            1e-5,
            1000,
            7,
        )
        .unwrap();
        assert!(err < 1e-6, "max relative error {err}");
    }

    #[test]
    fn layer_norm_constant_row_and_unit_case() {
        let mut ps = ParamSet::new();
        let g = ps.add("g", Tensor::filled(&[3], 1.0)).unwrap();
        let b = ps.add("b", Tensor::zeros(&[3])).unwrap();
        let x = Tensor::new(&[1, 3], vec![5.0, 5.0, 5.0]).unwrap();
        let (y, _) = layer_norm(&ps, &x, g, b, 1e-8).unwrap();
        for v in y.data() {
            assert!(v.abs() < 1e-3);
        }

        let mut ps2 = ParamSet::new();
        let g2 = ps2.add("g", Tensor::filled(&[2], 1.0)).unwrap();
        let b2 = ps2.add("b", Tensor::zeros(&[2])).unwrap();
        let x2 = Tensor::new(&[1, 2], vec![1.0, -1.0]).unwrap();
        let (y2, _) = layer_norm(&ps2, &x2, g2, b2, 1e-12).unwrap();
        assert!((y2.data()[0] - 1.0).abs() < 1e-6);
        assert!((y2.data()[1] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_gradients_match_finite_differences() {
        let mut rng = rng::stream(3);
        let mut ps = ParamSet::new();
        let g = ps.add("g", Tensor::randn(&[8], 1.0, &mut rng)).unwrap();
        let b = ps.add("b", Tensor::randn(&[8], 1.0, &mut rng)).unwrap();
        let x = Tensor::randn(&[2, 8], 1.0, &mut rng);
        let eps = 1e-6;
        let (y, cache) = layer_norm(&ps, &x, g, b, eps).unwrap();
        let dy = Tensor::new(y.shape(), y.data().iter().map(|v| 2.0 * v).collect()).unwrap();
        layer_norm_backward(&mut ps, &cache, g, b, &dy).unwrap();
        let err = finite_diff_check(
            &mut ps,
            |ps| {
                layer_norm(ps, &x, g, b, eps)
                    .unwrap()
                    .0
                    .data()
                    .iter()
                    .map(|v| v * v)
                    .sum()
            },
            1e-5,
            1000,
            9,
        )
        .unwrap();
        assert!(err < 1e-6, "max relative error {err}");
    }

    fn identity_attention(ps: &mut ParamSet, dim: usize, heads: usize) -> AttentionParams {
        let mut eye = Tensor::zeros(&[dim, dim]);
        for i in 0..dim {
            *eye.at2_mut(i, i) = 1.0;
        }
        AttentionParams {
            wq: ps.add("a.wq", eye.clone()).unwrap(),
            bq: ps.add("a.bq", Tensor::zeros(&[dim])).unwrap(),
            wk: ps.add("a.wk", eye.clone()).unwrap(),
            bk: ps.add("a.bk", Tensor::zeros(&[dim])).unwrap(),
            wv: ps.add("a.wv", eye.clone()).unwrap(),
            bv: ps.add("a.bv", Tensor::zeros(&[dim])).unwrap(),
            wo: ps.add("a.wo", eye).unwrap(),
            bo: ps.add("a.bo", Tensor::zeros(&[dim])).unwrap(),
            heads,
        }
    }

    #[test]
    fn single_key_gets_full_attention() {
        let mut rng = rng::stream(5);
        let mut ps = ParamSet::new();
        let params = AttentionParams::init(&mut ps, "attn", 8, 2, &mut rng).unwrap();
        let q = Tensor::randn(&[1, 3, 8], 1.0, &mut rng);
        let k = Tensor::randn(&[1, 1, 8], 1.0, &mut rng);
        let v = Tensor::randn(&[1, 1, 8], 1.0, &mut rng);
        let (_, cache) = multi_head_attention(&ps, &q, &k, &v, &params).unwrap();
        for w in cache.weights().data() {
            assert!((w - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let mut rng = rng::stream(6);
        let mut ps = ParamSet::new();
        let params = AttentionParams::init(&mut ps, "attn", 8, 2, &mut rng).unwrap();
        let q = Tensor::randn(&[2, 3, 8], 1.0, &mut rng);
        let k = Tensor::randn(&[2, 4, 8], 1.0, &mut rng);
        let v = Tensor::randn(&[2, 4, 8], 1.0, &mut rng);
        let (_, cache) = multi_head_attention(&ps, &q, &k, &v, &params).unwrap();
        let attn = cache.weights();
        let tk = 4;
        for row in 0..attn.len() / tk {
            let s: f64 = attn.data()[row * tk..(row + 1) * tk].iter().sum();
            assert!((s - 1.0).abs() < 1e-9, "row sum {s}");
        }
    }

    #[test]
    fn dominant_key_saturates_to_its_value_row() {
        // identity projections, q = scaled copy of one key: as the scale grows
        // the softmax concentrates on that key and the output approaches its
        // value row (computed numerically at a large scale factor)
        let dim = 4;
        let mut ps = ParamSet::new();
        let params = identity_attention(&mut ps, dim, 1);
        let k = Tensor::new(
            &[1, 2, 4],
            vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0],
        )
        .unwrap();
        let v = Tensor::new(
            &[1, 2, 4],
            vec![10.0, 20.0, 30.0, 40.0, -1.0, -2.0, -3.0, -4.0],
        )
        .unwrap();
        let scale = 200.0;
        let q = Tensor::new(&[1, 1, 4], vec![scale, 0.0, 0.0, 0.0]).unwrap();
        let (out, _) = multi_head_attention(&ps, &q, &k, &v, &params).unwrap();
        for (o, expect) in out.data().iter().zip([10.0, 20.0, 30.0, 40.0]) {
            assert!((o - expect).abs() < 1e-6, "got {o}, want {expect}");
        }
    }

    #[test]
    fn heads_must_divide_dim() {
        let mut rng = rng::stream(1);
        let mut ps = ParamSet::new();
        assert!(matches!(
            AttentionParams::init(&mut ps, "attn", 8, 3, &mut rng),
            Err(NumericsError::Config(_))
        ));
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        let mut rng = rng::stream(12);
        let mut ps = ParamSet::new();
        let params = AttentionParams::init(&mut ps, "attn", 8, 2, &mut rng).unwrap();
        let q = Tensor::randn(&[1, 3, 8], 1.0, &mut rng);
        let k = Tensor::randn(&[1, 3, 8], 1.0, &mut rng);
        let v = Tensor::randn(&[1, 3, 8], 1.0, &mut rng);
        let loss = |ps: &ParamSet| -> f64 {
            multi_head_attention(ps, &q, &k, &v, &params)
                .unwrap()
                .0
                .data()
                .iter()
                .map(|x| x * x)
                .sum()
        };
        let (out, cache) = multi_head_attention(&ps, &q, &k, &v, &params).unwrap();
        let dout = Tensor::new(out.shape(), out.data().iter().map(|x| 2.0 * x).collect()).unwrap();
        multi_head_attention_backward(&mut ps, &params, &cache, &dout).unwrap();
        let err = finite_diff_check(&mut ps, loss, 1e-5, 400, 13).unwrap();
        assert!(err < 1e-5, "max relative error {err}");
    }

    #[test]
    fn nll_single_element_and_uniform() {
        let (loss, _) = row_softmax_nll(&Tensor::new(&[1, 1], vec![3.7]).unwrap()).unwrap();
        assert_eq!(loss, 0.0);
        let (loss2, grad) = row_softmax_nll(&Tensor::zeros(&[2, 2])).unwrap();
        assert!((loss2 - core::f64::consts::LN_2).abs() < 1e-12);
        // grad = (softmax - I)/B, softmax uniform 0.5
        assert!((grad.at2(0, 0) + 0.25).abs() < 1e-12);
        assert!((grad.at2(0, 1) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn nll_rejects_non_square() {
        assert!(matches!(
            row_softmax_nll(&Tensor::zeros(&[2, 3])),
            Err(NumericsError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn nll_gradient_matches_finite_differences() {
        let mut rng = rng::stream(21);
        let mut ps = ParamSet::new();
        let s = ps.add("s", Tensor::randn(&[3, 3], 1.0, &mut rng)).unwrap();
        let (_, grad) = row_softmax_nll(ps.value(s)).unwrap();
        *ps.grad_mut(s) = grad;
        let err = finite_diff_check(
            &mut ps,
            |ps| row_softmax_nll(ps.value(ps.by_name("s").unwrap())).unwrap().0,
            1e-5,
            1000,
            22,
        )
        .unwrap();
        assert!(err < 1e-8, "max relative error {err}");
    }

    #[test]
    fn softmax_invariant_to_row_shift() {
        let x = Tensor::new(&[1, 3], vec![0.1, 0.5, -0.2]).unwrap();
        let shifted = Tensor::new(&[1, 3], vec![100.1, 100.5, 99.8]).unwrap();
        let a = softmax_rows(&x);
        let b = softmax_rows(&shifted);
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }
}
