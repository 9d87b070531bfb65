use std::sync::Arc;

use nalgebra::Vector3;
use rayon::prelude::*;
use sweepfuse_tensor::{Element, GatherTable, Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::geometry::{plane_homography_metric, Camera};
use crate::maps::bilinear_taps;

/// A source feature map resampled onto the reference frustum.
#[derive(Clone, Debug)]
pub struct FeatureVolume<T> {
    /// `[C, D, H, W]`.
    pub values: Var,
    pub view_index: usize,
    /// `[D, H, W]`: 1 where the sample fell inside the source image, else 0.
    pub validity: Tensor<T>,
}

impl<T: Element> FeatureVolume<T> {
    pub fn valid_count(&self) -> usize {
        self.validity.data().iter().filter(|&&v| v != T::zero()).count()
    }
}

/// Bilinear sampling pattern of `source` onto the reference grid for every
/// depth: entry `(d, y, x)` reads the source at `H(d)·(x, y, 1)`. Samples
/// outside `[0, w−1]×[0, h−1]` or behind the source camera get zero weight
/// and validity 0. Both cameras must already be at feature resolution.
pub fn warp_table<T: Element>(
    reference: &Camera,
    source: &Camera,
    depths: &[f64],
) -> Result<(Arc<GatherTable<T>>, Tensor<T>)> {
    if depths.is_empty() {
        return Err(Error::config("warping needs at least one depth hypothesis"));
    }
    if let Some(d) = depths.iter().find(|d| !(**d > 0.0)) {
        return Err(Error::contract(format!("depth hypotheses must be positive, got {d}")));
    }
    let (w, h) = (reference.width, reference.height);
    let (sw, sh) = (source.width, source.height);
    if sw == 0 || sh == 0 {
        return Err(Error::config("source image is empty"));
    }
    let plane = w * h;
    let per_depth: Vec<(Vec<u32>, Vec<T>, Vec<T>)> = depths
        .par_iter()
        .map(|&d| {
            let hm = plane_homography_metric(reference, source, d);
            let mut index = vec![0u32; 4 * plane];
            let mut weight = vec![T::zero(); 4 * plane];
            let mut valid = vec![T::zero(); plane];
            for y in 0..h {
                for x in 0..w {
                    let q = hm * Vector3::new(x as f64, y as f64, 1.0);
                    if !(q.z > 0.0) {
                        continue;
                    }
                    let Some(taps) = bilinear_taps(q.x / q.z, q.y / q.z, sw, sh) else {
                        continue;
                    };
                    let o = y * w + x;
                    for (t, (idx, wt)) in taps.into_iter().enumerate() {
                        index[4 * o + t] = idx as u32;
                        weight[4 * o + t] = T::lit(wt);
                    }
                    valid[o] = T::one();
                }
            }
            (index, weight, valid)
        })
        .collect();
    let mut index = Vec::with_capacity(4 * plane * depths.len());
    let mut weight = Vec::with_capacity(4 * plane * depths.len());
    let mut valid = Vec::with_capacity(plane * depths.len());
    for (i, wt, v) in per_depth {
        index.extend(i);
        weight.extend(wt);
        valid.extend(v);
    }
    let table = GatherTable { source_len: sw * sh, out_shape: vec![depths.len(), h, w], taps: 4, index, weight };
    Ok((Arc::new(table), Tensor::new(vec![depths.len(), h, w], valid)?))
}

/// Warps `features` (`[C, h, w]` of the source view) into the reference
/// frustum at each depth. Differentiable with respect to the features.
pub fn warp_volume<T: Element>(
    tape: &mut Tape<T>,
    features: Var,
    view_index: usize,
    reference: &Camera,
    source: &Camera,
    depths: &[f64],
) -> Result<FeatureVolume<T>> {
    let s = tape.shape(features);
    if s.len() != 3 || s[1] != source.height || s[2] != source.width {
        return Err(Error::config(format!(
            "feature map {s:?} does not match source camera {}×{}",
            source.width, source.height
        )));
    }
    let (table, validity) = warp_table(reference, source, depths)?;
    let values = tape.gather(features, table)?;
    Ok(FeatureVolume { values, view_index, validity })
}

/// The reference feature map replicated across every depth, optionally
/// zeroed where `mask` is 0.
pub fn replicate<T: Element>(
    tape: &mut Tape<T>,
    features: Var,
    depth_count: usize,
    mask: Option<&Tensor<T>>,
) -> Result<Var> {
    let s = tape.shape(features).to_vec();
    if s.len() != 3 {
        return Err(Error::config(format!("feature map must be [C, H, W], got {s:?}")));
    }
    let plane = s[1] * s[2];
    let n = depth_count * plane;
    if let Some(m) = mask {
        if m.numel() != n {
            return Err(Error::contract("replication mask has the wrong size"));
        }
    }
    let table = GatherTable {
        source_len: plane,
        out_shape: vec![depth_count, s[1], s[2]],
        taps: 1,
        index: (0..n).map(|i| (i % plane) as u32).collect(),
        weight: match mask {
            Some(m) => m.data().to_vec(),
            None => vec![T::one(); n],
        },
    };
    Ok(tape.gather(features, Arc::new(table))?)
}
