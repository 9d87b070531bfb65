//! Depth filtering, point-cloud fusion and accuracy/completeness evaluation.

use std::collections::HashMap;

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Camera;
use crate::maps::{Image, Map};
use crate::pipeline::DepthEstimate;
use crate::pyramid::{geometric_consistency, MultiMetricParams};

/// Default confidence a depth must exceed to be fused.
pub const FUSION_CONFIDENCE: f64 = 0.9;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f32; 3]>,
    pub colors: Vec<[u8; 3]>,
    pub source_view: Vec<u32>,
}

impl PointCloud {
    pub fn push(&mut self, point: [f32; 3], color: [u8; 3], view: u32) {
        self.points.push(point);
        self.colors.push(color);
        self.source_view.push(view);
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Surviving pixels of one view and their averaged depths (0 elsewhere).
#[derive(Clone, Debug, PartialEq)]
pub struct Filtered {
    pub mask: Vec<bool>,
    pub depth: Map,
}

impl Filtered {
    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Keeps pixels with confidence strictly above `conf_threshold` that are
/// consistent with at least `params.min_consistent_views` neighbours, and
/// replaces each by the mean of its own and its consistent neighbours'
/// reprojected depths.
pub fn filter_depth(
    est: &DepthEstimate,
    cam: &Camera,
    neighbours: &[(&Map, &Camera)],
    conf_threshold: f64,
    params: &MultiMetricParams,
) -> Result<Filtered> {
    let n = est.depth.data.len();
    let confident: Vec<bool> = est.confidence.data.iter().map(|&c| c as f64 > conf_threshold).collect();
    let (geo_mask, counts, sums) = if neighbours.is_empty() {
        (vec![params.min_consistent_views == 0; n], vec![0; n], vec![0.0; n])
    } else {
        let g = geometric_consistency(&est.depth, cam, neighbours, params)?;
        (g.mask, g.counts, g.reprojected_sum)
    };
    let mut depth = Map::filled(est.depth.width, est.depth.height, 0.0);
    let mut mask = vec![false; n];
    for i in 0..n {
        let d = est.depth.data[i] as f64;
        if confident[i] && geo_mask[i] && d > 0.0 {
            mask[i] = true;
            depth.data[i] = ((d + sums[i]) / (1 + counts[i]) as f64) as f32;
        }
    }
    Ok(Filtered { mask, depth })
}

/// One view's input to [`fuse`].
#[derive(Clone, Debug)]
pub struct FusionView {
    pub filtered: Filtered,
    /// Camera of the depth-map grid.
    pub camera: Camera,
    /// Colors on the depth-map grid.
    pub colors: Image,
}

/// Unprojects surviving pixels in view order. A pixel is skipped when its
/// point lands, in an earlier view, within `τ1` px of a surviving pixel
/// whose depth agrees within `τ2` (relative).
pub fn fuse(views: &[FusionView], params: &MultiMetricParams) -> Result<PointCloud> {
    let mut cloud = PointCloud::default();
    for (i, v) in views.iter().enumerate() {
        let (w, h) = (v.filtered.depth.width, v.filtered.depth.height);
        if v.colors.width != w || v.colors.height != h || v.camera.width != w || v.camera.height != h {
            return Err(Error::config(format!("view {i}: depth, colors and camera differ in size")));
        }
        for y in 0..h {
            for x in 0..w {
                let idx = y * w + x;
                if !v.filtered.mask[idx] {
                    continue;
                }
                let d = v.filtered.depth.data[idx] as f64;
                let p = v.camera.unproject(&Vector2::new(x as f64, y as f64), d)?;
                let duplicate = views[..i].iter().any(|prev| {
                    let Some((q, z)) = prev.camera.project(&p) else {
                        return false;
                    };
                    let (u, r) = (q.x.round(), q.y.round());
                    let pw = prev.filtered.depth.width;
                    if u < 0.0 || r < 0.0 || u >= pw as f64 || r >= prev.filtered.depth.height as f64 {
                        return false;
                    }
                    let j = r as usize * pw + u as usize;
                    if !prev.filtered.mask[j] || (q - Vector2::new(u, r)).norm() >= params.tau1 {
                        return false;
                    }
                    let dp = prev.filtered.depth.data[j] as f64;
                    (z - dp).abs() < params.tau2 * dp
                });
                if duplicate {
                    continue;
                }
                let c = v.colors.pixel(x, y).map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8);
                cloud.push([p.x as f32, p.y as f32, p.z as f32], c, i as u32);
            }
        }
    }
    Ok(cloud)
}

/// Euclidean distance between two single-precision points, in `f64`.
#[inline]
pub fn point_distance(a: &[f32; 3], b: &[f32; 3]) -> f64 {
    let dx = a[0] as f64 - b[0] as f64;
    let dy = a[1] as f64 - b[1] as f64;
    let dz = a[2] as f64 - b[2] as f64;
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// Uniform hash grid for nearest-neighbour queries.
pub struct SpatialGrid<'a> {
    points: &'a [[f32; 3]],
    cell: f64,
    cells: HashMap<[i64; 3], Vec<u32>>,
    lo: [i64; 3],
    hi: [i64; 3],
}

impl<'a> SpatialGrid<'a> {
    pub fn new(points: &'a [[f32; 3]], cell: f64) -> Result<Self> {
        if !(cell > 0.0 && cell.is_finite()) {
            return Err(Error::config(format!("grid cell size must be positive, got {cell}")));
        }
        let mut cells: HashMap<[i64; 3], Vec<u32>> = HashMap::new();
        let mut lo = [i64::MAX; 3];
        let mut hi = [i64::MIN; 3];
        for (i, p) in points.iter().enumerate() {
            let k = Self::key_of(p, cell);
            for a in 0..3 {
                lo[a] = lo[a].min(k[a]);
                hi[a] = hi[a].max(k[a]);
            }
            cells.entry(k).or_default().push(i as u32);
        }
        Ok(Self { points, cell, cells, lo, hi })
    }

    fn key_of(p: &[f32; 3], cell: f64) -> [i64; 3] {
        [(p[0] as f64 / cell).floor() as i64, (p[1] as f64 / cell).floor() as i64, (p[2] as f64 / cell).floor() as i64]
    }

    /// Distance to the nearest stored point, searching rings of cells
    /// outward until no unvisited cell can hold anything closer, or
    /// `None` for an empty grid or when nothing lies within `limit`.
    pub fn nearest(&self, q: &[f32; 3], limit: f64) -> Option<f64> {
        if self.points.is_empty() {
            return None;
        }
        let c = Self::key_of(q, self.cell);
        let max_ring = (0..3).map(|a| (c[a] - self.lo[a]).abs().max((self.hi[a] - c[a]).abs())).max().unwrap_or(0);
        let mut best = f64::INFINITY;
        let mut r: i64 = 0;
        loop {
            for dx in -r..=r {
                for dy in -r..=r {
                    for dz in -r..=r {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != r {
                            continue;
                        }
                        if let Some(ids) = self.cells.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) {
                            for &i in ids {
                                best = best.min(point_distance(q, &self.points[i as usize]));
                            }
                        }
                    }
                }
            }
            // Anything in ring r+1 or beyond is at least r full cells away.
            let reach = r as f64 * self.cell;
            if best <= reach || reach > limit || r >= max_ring {
                break;
            }
            r += 1;
        }
        (best <= limit).then_some(best)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy_mm: f64,
    pub completeness_mm: f64,
    pub overall_mm: f64,
    pub n_points: usize,
}

/// Accuracy: mean distance from predicted points to the ground truth,
/// ignoring distances above `dist_threshold` (equal to the threshold when
/// every point is an outlier). Completeness: mean distance from ground-truth
/// points to the prediction. Overall: their average.
pub fn evaluate(pred: &PointCloud, gt: &PointCloud, dist_threshold: f64) -> Result<Evaluation> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::contract("evaluation needs non-empty predicted and ground-truth clouds"));
    }
    if !(dist_threshold > 0.0) {
        return Err(Error::config(format!("distance threshold must be positive, got {dist_threshold}")));
    }
    let gt_grid = SpatialGrid::new(&gt.points, dist_threshold)?;
    let pred_grid = SpatialGrid::new(&pred.points, dist_threshold)?;
    let mut acc_sum = 0.0;
    let mut acc_n = 0usize;
    for p in &pred.points {
        if let Some(d) = gt_grid.nearest(p, dist_threshold) {
            acc_sum += d;
            acc_n += 1;
        }
    }
    let accuracy_mm = if acc_n > 0 { acc_sum / acc_n as f64 } else { dist_threshold };
    let mut comp_sum = 0.0;
    for g in &gt.points {
        comp_sum += pred_grid.nearest(g, f64::INFINITY).expect("non-empty grid");
    }
    let completeness_mm = comp_sum / gt.len() as f64;
    Ok(Evaluation {
        accuracy_mm,
        completeness_mm,
        overall_mm: (accuracy_mm + completeness_mm) / 2.0,
        n_points: pred.len(),
    })
}
