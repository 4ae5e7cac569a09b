use alloc::format;
use alloc::string::ToString;
use alloc::vec::Vec;

use super::{NumericsError, ParamSet, Result, Tensor};
use crate::rng;

/// Checks the analytic gradients currently stored in `ps` against central
/// finite differences of `loss_fn`.
///
/// The caller runs forward + backward first so the grads are populated;
/// `loss_fn` must be a pure scalar function of the parameter values. For
/// models with more than `max_coords` scalar coordinates a seeded random
/// subsample is checked. Returns the max relative error
/// |g_analytic − g_fd| / max(|g_fd|, 1e-8).
pub fn finite_diff_check<F>(
    ps: &mut ParamSet,
    mut loss_fn: F,
    h: f64,
    max_coords: usize,
    seed: u64,
) -> Result<f64>
where
    F: FnMut(&ParamSet) -> f64,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(NumericsError::InvalidArg(format!(
            "finite-difference step h={h} outside [1e-7, 1e-3]"
        )));
    }
    let analytic: Vec<Tensor> = ps.iter().map(|(_, p)| p.grad.clone()).collect();
    let mut coords: Vec<(usize, usize)> = Vec::new();
    for (pi, (_, p)) in ps.iter().enumerate() {
        for ci in 0..p.value.len() {
            coords.push((pi, ci));
        }
    }
    if coords.len() > max_coords {
        let mut rng = rng::stream(seed);
        // Fisher-Yates prefix shuffle
        for i in 0..max_coords {
            let j = i + rng::below(&mut rng, coords.len() - i);
            coords.swap(i, j);
        }
        coords.truncate(max_coords);
    }
    let ids: Vec<_> = ps.iter().map(|(id, _)| id).collect();
    let mut max_rel = 0.0f64;
    for (pi, ci) in coords {
        let id = ids[pi];
        let orig = ps.value(id).data()[ci];
        ps.value_mut(id).data_mut()[ci] = orig + h;
        let fp = loss_fn(ps);
        ps.value_mut(id).data_mut()[ci] = orig - h;
        let fm = loss_fn(ps);
        ps.value_mut(id).data_mut()[ci] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(NumericsError::NonFinite("finite_diff_check loss".to_string()));
        }
        let g_fd = (fp - fm) / (2.0 * h);
        let g_an = analytic[pi].data()[ci];
        let rel = (g_an - g_fd).abs() / g_fd.abs().max(1e-8);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}
