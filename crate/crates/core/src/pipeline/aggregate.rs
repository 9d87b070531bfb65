use sweepfuse_tensor::{Element, ReduceKind, Tape, Tensor, Var};

use super::warp::{replicate, FeatureVolume};
use crate::error::{Error, Result};
use crate::networks::Model;

/// `v'_i = v_i − v_0` for one source view, zero where the source sample was
/// invalid.
#[derive(Clone, Debug)]
pub struct Residual<T> {
    /// `[C, D, H, W]`.
    pub values: Var,
    /// `[D, H, W]`, 1 for valid voxels.
    pub validity: Tensor<T>,
}

/// Residuals of every source volume against the reference. `volumes[0]` is
/// the reference volume; the reference residual is not emitted.
pub fn residual_volumes<T: Element>(tape: &mut Tape<T>, volumes: &[FeatureVolume<T>]) -> Result<Vec<Residual<T>>> {
    if volumes.len() < 2 {
        return Err(Error::config(format!("need at least 2 views, got {}", volumes.len())));
    }
    if volumes[0].view_index != 0 {
        return Err(Error::contract("the first volume must be the reference view"));
    }
    let shape = tape.shape(volumes[0].values).to_vec();
    volumes[1..]
        .iter()
        .map(|v| {
            if tape.shape(v.values) != shape.as_slice() {
                return Err(Error::config(format!("volume shapes differ: {shape:?} vs {:?}", tape.shape(v.values))));
            }
            let reference = masked(tape, volumes[0].values, &v.validity)?;
            Ok(Residual { values: tape.sub(v.values, reference)?, validity: v.validity.clone() })
        })
        .collect()
}

fn masked<T: Element>(tape: &mut Tape<T>, volume: Var, mask: &Tensor<T>) -> Result<Var> {
    if mask.data().iter().all(|&m| m == T::one()) {
        return Ok(volume);
    }
    let m = tape.constant(mask.clone());
    Ok(tape.mul(volume, m)?)
}

/// Builds the reference volume (features replicated over depth) together
/// with warped source volumes, then their residuals.
pub fn residuals_from_features<T: Element>(
    tape: &mut Tape<T>,
    reference: Var,
    sources: Vec<FeatureVolume<T>>,
) -> Result<Vec<Residual<T>>> {
    let depth_count =
        sources.first().map(|v| v.validity.shape()[0]).ok_or_else(|| Error::config("need at least one source view"))?;
    let r = replicate(tape, reference, depth_count, None)?;
    let ref_volume = FeatureVolume {
        values: r,
        view_index: 0,
        validity: Tensor::full(sources[0].validity.shape().to_vec(), T::one()),
    };
    let mut all = vec![ref_volume];
    all.extend(sources);
    residual_volumes(tape, &all)
}

/// Pooled matching statistics of one residual: channel-wise L1 norm, then
/// max and mean over depth, restricted to valid voxels. `[2, H, W]`.
pub fn pooled_statistics<T: Element>(tape: &mut Tape<T>, r: &Residual<T>) -> Result<Var> {
    let s = tape.reduce(r.values, ReduceKind::L1Norm, 0)?;
    let shape = tape.shape(s).to_vec();
    let (d, plane) = (shape[0], shape[1] * shape[2]);
    // Invalid voxels already hold a zero norm, which never exceeds a valid
    // (non-negative) one, so the max needs no masking.
    let max = tape.reduce(s, ReduceKind::Max, 0)?;
    let sum = tape.reduce(s, ReduceKind::Sum, 0)?;
    let mut inv = vec![T::zero(); plane];
    for (p, slot) in inv.iter_mut().enumerate() {
        let n = (0..d).filter(|&k| r.validity.data()[k * plane + p] != T::zero()).count();
        if n > 0 {
            *slot = T::one() / T::lit(n as f64);
        }
    }
    let inv = tape.constant(Tensor::new(vec![shape[1], shape[2]], inv)?);
    let mean = tape.mul(sum, inv)?;
    let one = vec![1, shape[1], shape[2]];
    let max = tape.reshape(max, one.clone())?;
    let mean = tape.reshape(mean, one)?;
    Ok(tape.concat(&[max, mean])?)
}

/// `c = Σ_i (1 + w_i) ⊙ v'_i / (N − 1)`, with `w_i` broadcast over the
/// leading axes of `v'_i`. Summation runs in view order.
fn weighted_mean<T: Element>(tape: &mut Tape<T>, residuals: &[Residual<T>], weights: &[Var]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (r, &w) in residuals.iter().zip(weights) {
        let m = tape.add_scalar(w, 1.0);
        let term = tape.mul(r.values, m)?;
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    let acc = acc.ok_or_else(|| Error::config("aggregation needs at least one residual"))?;
    Ok(tape.mul_scalar(acc, 1.0 / residuals.len() as f64))
}

/// Pixelwise self-adaptive aggregation: one 2D attention map per source
/// view, computed from that view's pooled statistics.
pub fn aggregate_pixelwise<T: Element>(tape: &mut Tape<T>, model: &Model<T>, residuals: &[Residual<T>]) -> Result<Var> {
    let mut weights = Vec::with_capacity(residuals.len());
    for r in residuals {
        let f = pooled_statistics(tape, r)?;
        let w = model.pa_weights(tape, f)?;
        let s = tape.shape(w)[1..].to_vec();
        weights.push(tape.reshape(w, s)?);
    }
    weighted_mean(tape, residuals, &weights)
}

/// Voxelwise self-adaptive aggregation: one 3D attention volume per source
/// view, computed from that view's residual.
pub fn aggregate_voxelwise<T: Element>(tape: &mut Tape<T>, model: &Model<T>, residuals: &[Residual<T>]) -> Result<Var> {
    let mut weights = Vec::with_capacity(residuals.len());
    for r in residuals {
        let w = model.va_weights(tape, r.values)?;
        let s = tape.shape(w)[1..].to_vec();
        weights.push(tape.reshape(w, s)?);
    }
    weighted_mean(tape, residuals, &weights)
}

/// Cost used where no source view sees a voxel; above any attainable mean
/// L1 distance between three channels in `[0, 1]`.
pub const UNSEEN_COST: f64 = 3.0;

/// Window-aggregated photometric cost: for every voxel, the sum over valid
/// (view, neighbour) pairs within a `(2r+1)²` window of the channel-wise L1
/// residual norm, divided by the number of such pairs. `[D, H, W]`, not
/// differentiable.
pub fn photometric_cost<T: Element>(tape: &Tape<T>, residuals: &[Residual<T>], radius: usize) -> Result<Tensor<T>> {
    let first = residuals.first().ok_or_else(|| Error::config("need at least one residual"))?;
    let shape = first.validity.shape().to_vec();
    let (d, h, w) = (shape[0], shape[1], shape[2]);
    let n = d * h * w;
    let mut num = vec![0f64; n];
    let mut den = vec![0f64; n];
    for r in residuals {
        let v = tape.value(r.values).data();
        let c = v.len() / n;
        let valid = r.validity.data();
        for i in 0..n {
            if valid[i] == T::zero() {
                continue;
            }
            let l1: f64 = (0..c).map(|ch| v[ch * n + i].as_f64().abs()).sum();
            num[i] += l1;
            den[i] += 1.0;
        }
    }
    let mut cost = Vec::with_capacity(n);
    for k in 0..d {
        let base = k * h * w;
        for y in 0..h {
            let ys = y.saturating_sub(radius)..(y + radius + 1).min(h);
            for x in 0..w {
                let xs = x.saturating_sub(radius)..(x + radius + 1).min(w);
                let (mut a, mut b) = (0.0, 0.0);
                for yy in ys.clone() {
                    for xx in xs.clone() {
                        a += num[base + yy * w + xx];
                        b += den[base + yy * w + xx];
                    }
                }
                cost.push(T::lit(if b > 0.0 { a / b } else { UNSEEN_COST }));
            }
        }
    }
    Ok(Tensor::new(shape, cost)?)
}
