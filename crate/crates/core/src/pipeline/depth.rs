use sweepfuse_tensor::{Element, ReduceKind, Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::maps::Map;

/// Tolerance on the per-pixel probability sum accepted by [`soft_argmin`].
pub const NORMALIZATION_TOLERANCE: f64 = 1e-4;

fn dims<T: Element>(prob: &Tensor<T>, depths: usize) -> Result<(usize, usize, usize)> {
    match *prob.shape() {
        [d, h, w] if d == depths => Ok((d, h, w)),
        _ => Err(Error::config(format!("probability volume {:?} does not match {depths} hypotheses", prob.shape()))),
    }
}

/// Expected depth `Σ_j d_j·P_j` per pixel. Every column of `prob` must sum
/// to 1 within [`NORMALIZATION_TOLERANCE`].
pub fn soft_argmin<T: Element>(prob: &Tensor<T>, depths: &[f64]) -> Result<Map> {
    let (d, h, w) = dims(prob, depths.len())?;
    let plane = h * w;
    let p = prob.data();
    let mut out = vec![0f32; plane];
    for (i, slot) in out.iter_mut().enumerate() {
        let mut sum = 0.0;
        let mut e = 0.0;
        for j in 0..d {
            let v = p[j * plane + i].as_f64();
            sum += v;
            e += v * depths[j];
        }
        if (sum - 1.0).abs() > NORMALIZATION_TOLERANCE {
            return Err(Error::contract(format!("probabilities at pixel ({}, {}) sum to {sum}", i % w, i / w)));
        }
        *slot = e as f32;
    }
    Map::new(w, h, out)
}

/// Differentiable soft argmin on the tape: `[D, H, W]` → `[H, W]`.
pub fn soft_argmin_var<T: Element>(tape: &mut Tape<T>, prob: Var, depths: &[f64]) -> Result<Var> {
    let s = tape.shape(prob).to_vec();
    if s.len() != 3 || s[0] != depths.len() {
        return Err(Error::config(format!("probability volume {s:?} does not match {} hypotheses", depths.len())));
    }
    let plane = s[1] * s[2];
    let d = tape.constant(Tensor::from_fn(s, |i| T::lit(depths[i / plane])));
    let weighted = tape.mul(prob, d)?;
    Ok(tape.reduce(weighted, ReduceKind::Sum, 0)?)
}

/// Index of the hypothesis nearest `depth` (lowest index on ties).
pub fn nearest_hypothesis(depths: &[f64], depth: f64) -> usize {
    let mut best = 0;
    for (j, &d) in depths.iter().enumerate() {
        if (d - depth).abs() < (depths[best] - depth).abs() {
            best = j;
        }
    }
    best
}

/// Start of the 4-index window `{j−1, …, j+2}` shifted inward to stay within
/// `[0, D−1]`.
pub fn confidence_window(j: usize, count: usize) -> usize {
    j.saturating_sub(1).min(count - 4)
}

/// Probability mass of the four hypotheses around the soft-argmin estimate.
pub fn confidence_map<T: Element>(prob: &Tensor<T>, depths: &[f64]) -> Result<Map> {
    let (d, h, w) = dims(prob, depths.len())?;
    if d < 4 {
        return Err(Error::config(format!("confidence needs at least 4 hypotheses, got {d}")));
    }
    let estimate = soft_argmin(prob, depths)?;
    let plane = h * w;
    let p = prob.data();
    let out = (0..plane)
        .map(|i| {
            let j = nearest_hypothesis(depths, estimate.data[i] as f64);
            let lo = confidence_window(j, d);
            let mass: f64 = (lo..lo + 4).map(|k| p[k * plane + i].as_f64()).sum();
            mass.clamp(0.0, 1.0) as f32
        })
        .collect();
    Map::new(w, h, out)
}

fn check_loss_inputs(shape: &[usize], gt: &Map, valid: &[bool]) -> Result<usize> {
    if shape != [gt.height, gt.width] || valid.len() != gt.data.len() {
        return Err(Error::config(format!(
            "prediction {shape:?}, ground truth {}×{} and mask of {} do not match",
            gt.width,
            gt.height,
            valid.len()
        )));
    }
    let n = valid.iter().filter(|&&v| v).count();
    if n == 0 {
        return Err(Error::contract("loss mask has no valid pixels"));
    }
    Ok(n)
}

/// Mean absolute depth error over valid pixels, on the tape.
pub fn l1_loss_var<T: Element>(tape: &mut Tape<T>, pred: Var, gt: &Map, valid: &[bool]) -> Result<Var> {
    let shape = tape.shape(pred).to_vec();
    let n = check_loss_inputs(&shape, gt, valid)?;
    let g = tape.constant(gt.to_tensor());
    let inv = T::lit(1.0 / n as f64);
    let m = tape.constant(Tensor::from_fn(shape, |i| if valid[i] { inv } else { T::zero() }));
    let diff = tape.sub(pred, g)?;
    let abs = tape.abs(diff);
    let masked = tape.mul(abs, m)?;
    Ok(tape.sum_all(masked))
}

/// Mean absolute depth error over valid pixels.
pub fn l1_loss(pred: &Map, gt: &Map, valid: &[bool]) -> Result<f64> {
    if !pred.same_extent(gt) {
        return Err(Error::config("prediction and ground truth differ in size"));
    }
    let n = check_loss_inputs(&[pred.height, pred.width], gt, valid)?;
    let total: f64 = pred
        .data
        .iter()
        .zip(&gt.data)
        .zip(valid)
        .filter(|(_, &v)| v)
        .map(|((&a, &b), _)| (a as f64 - b as f64).abs())
        .sum();
    Ok(total / n as f64)
}
