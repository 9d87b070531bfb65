//! Multi-metric pyramid depth aggregation.
//!
//! Depth is estimated independently at every pyramid level. Then, from the
//! coarsest pair of levels down to level 0, low-confidence fine pixels are
//! replaced by coarse pixels that are both confident and geometrically
//! consistent with the other views at the coarse level.

use nalgebra::Vector2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Camera;
use crate::maps::{Image, Map};
use crate::pipeline::{DepthEstimate, View};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PyramidConfig {
    pub levels: usize,
    pub eta: f64,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        Self { levels: 3, eta: 2.0 }
    }
}

impl PyramidConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::config("pyramid needs at least one level"));
        }
        if !(self.eta > 1.0 && self.eta.is_finite()) {
            return Err(Error::config(format!("pyramid scale factor must exceed 1, got {}", self.eta)));
        }
        Ok(())
    }

    /// Image extents at level `k`: `W/η^k`, `H/η^k` rounded down to
    /// multiples of 8.
    pub fn extent(&self, width: usize, height: usize, level: usize) -> Result<(usize, usize)> {
        let s = self.eta.powi(level as i32);
        let floor8 = |n: usize| ((n as f64 / s + 1e-9).floor() as usize) / 8 * 8;
        let (w, h) = (floor8(width), floor8(height));
        if w == 0 || h == 0 {
            return Err(Error::config(format!(
                "{width}×{height} is too small for pyramid level {level} at η = {}",
                self.eta
            )));
        }
        Ok((w, h))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MultiMetricParams {
    pub eps_low: f64,
    pub eps_high: f64,
    /// Reprojection distance bound in pixels.
    pub tau1: f64,
    /// Relative depth difference bound.
    pub tau2: f64,
    pub min_consistent_views: usize,
}

impl Default for MultiMetricParams {
    fn default() -> Self {
        Self { eps_low: 0.5, eps_high: 0.9, tau1: 1.0, tau2: 0.01, min_consistent_views: 3 }
    }
}

impl MultiMetricParams {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(unit(self.eps_low) && unit(self.eps_high) && self.eps_low < self.eps_high) {
            return Err(Error::config(format!(
                "confidence thresholds must satisfy 0 ≤ ε_low < ε_high ≤ 1, got {} and {}",
                self.eps_low, self.eps_high
            )));
        }
        if !(self.tau1 > 0.0 && self.tau2 > 0.0) {
            return Err(Error::config("τ1 and τ2 must be positive"));
        }
        Ok(())
    }
}

/// Images and cameras for every level, level 0 first. Level `k` images are
/// area averages over `η^k × η^k` blocks, cropped to the level extent.
pub fn build_pyramid(views: &[View], config: &PyramidConfig) -> Result<Vec<Vec<View>>> {
    config.validate()?;
    (0..config.levels)
        .map(|k| {
            views
                .iter()
                .map(|v| {
                    if k == 0 {
                        return Ok(v.clone());
                    }
                    let (w, h) = config.extent(v.image.width, v.image.height, k)?;
                    let scale = config.eta.powi(-(k as i32));
                    let image: Image = v.image.area_resample(scale, w, h)?;
                    let camera = v.camera.scaled(scale)?.with_extent(w, h);
                    Ok(View { image, camera })
                })
                .collect()
        })
        .collect()
}

/// Per-pixel outcome of the forward-backward projection test.
#[derive(Clone, Debug, PartialEq)]
pub struct Consistency {
    /// Valid depth and at least `min_consistent_views` consistent neighbours.
    pub mask: Vec<bool>,
    pub counts: Vec<u32>,
    /// Sum of the reprojected depths over consistent neighbours.
    pub reprojected_sum: Vec<f64>,
}

/// Depth of `pixel` seen from `neighbour` and projected back: returns the
/// back-projected pixel and its reference-frame depth.
fn round_trip(
    cam: &Camera,
    pixel: Vector2<f64>,
    depth: f64,
    neighbour: (&Map, &Camera),
) -> Option<(Vector2<f64>, f64)> {
    let (nmap, ncam) = neighbour;
    let world = cam.unproject(&pixel, depth).ok()?;
    let (q, _) = ncam.project(&world)?;
    let dn = nmap.sample_positive(q.x, q.y)?;
    let back = ncam.unproject(&q, dn).ok()?;
    cam.project(&back)
}

/// Marks pixels of `depth` (camera `cam`) that agree with each neighbour:
/// `‖p − p_reproj‖ < τ1` and `|D(p) − d_reproj| < τ2·D(p)`.
pub fn geometric_consistency(
    depth: &Map,
    cam: &Camera,
    neighbours: &[(&Map, &Camera)],
    params: &MultiMetricParams,
) -> Result<Consistency> {
    if neighbours.is_empty() {
        return Err(Error::config("geometric consistency needs at least one neighbour view"));
    }
    if depth.width != cam.width || depth.height != cam.height {
        return Err(Error::config("depth map and camera differ in size"));
    }
    let w = depth.width;
    let rows: Vec<Vec<(bool, u32, f64)>> = (0..depth.height)
        .into_par_iter()
        .map(|y| {
            (0..w)
                .map(|x| {
                    let d = depth.get(x, y) as f64;
                    if !(d > 0.0) {
                        return (false, 0, 0.0);
                    }
                    let p = Vector2::new(x as f64, y as f64);
                    let mut count = 0;
                    let mut sum = 0.0;
                    for &n in neighbours {
                        if let Some((pr, dr)) = round_trip(cam, p, d, n) {
                            if (pr - p).norm() < params.tau1 && (d - dr).abs() < params.tau2 * d {
                                count += 1;
                                sum += dr;
                            }
                        }
                    }
                    (count as usize >= params.min_consistent_views, count, sum)
                })
                .collect()
        })
        .collect();
    let mut out = Consistency {
        mask: Vec::with_capacity(w * depth.height),
        counts: Vec::with_capacity(w * depth.height),
        reprojected_sum: Vec::with_capacity(w * depth.height),
    };
    for (m, c, s) in rows.into_iter().flatten() {
        out.mask.push(m);
        out.counts.push(c);
        out.reprojected_sum.push(s);
    }
    Ok(out)
}

/// Estimates of all views at one level with their depth-grid cameras.
#[derive(Clone, Debug)]
pub struct PyramidLevel {
    pub estimates: Vec<DepthEstimate>,
    pub cameras: Vec<Camera>,
}

fn neighbours_of(level: &PyramidLevel, view: usize) -> Vec<(&Map, &Camera)> {
    level
        .estimates
        .iter()
        .zip(&level.cameras)
        .enumerate()
        .filter(|(j, _)| *j != view)
        .map(|(_, (e, c))| (&e.depth, c))
        .collect()
}

/// Coarse pixels eligible to replace fine ones: confident and consistent.
pub fn coarse_candidates(coarse: &PyramidLevel, view: usize, params: &MultiMetricParams) -> Result<Vec<bool>> {
    let est = &coarse.estimates[view];
    let neighbours = neighbours_of(coarse, view);
    let geo = if neighbours.is_empty() {
        None
    } else {
        Some(geometric_consistency(&est.depth, &coarse.cameras[view], &neighbours, params)?)
    };
    Ok(est
        .confidence
        .data
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            c as f64 > params.eps_high && geo.as_ref().map_or(params.min_consistent_views == 0, |g| g.mask[i])
        })
        .collect())
}

/// Coarse cell under fine pixel `x`: `floor((x + 0.5)/η)`.
pub fn parent_index(x: usize, eta: f64) -> usize {
    ((x as f64 + 0.5) / eta).floor() as usize
}

/// Replaces low-confidence pixels of every fine-level view with verified
/// coarse values. Returns the refined level and per-view replacement counts.
pub fn aggregate_level(
    fine: &PyramidLevel,
    coarse: &PyramidLevel,
    eta: f64,
    params: &MultiMetricParams,
) -> Result<(PyramidLevel, Vec<usize>)> {
    params.validate()?;
    if fine.estimates.len() != coarse.estimates.len() || fine.cameras.len() != fine.estimates.len() {
        return Err(Error::config("fine and coarse levels must hold the same views"));
    }
    let mut refined = fine.clone();
    let mut replaced = Vec::with_capacity(fine.estimates.len());
    for (v, est) in refined.estimates.iter_mut().enumerate() {
        let c = &coarse.estimates[v];
        if c.level != est.level + 1 {
            return Err(Error::config(format!(
                "view {v}: expected level {} below level {}, got {}",
                est.level + 1,
                est.level,
                c.level
            )));
        }
        let cand = coarse_candidates(coarse, v, params)?;
        let mut n = 0;
        for y in 0..est.depth.height {
            let cy = parent_index(y, eta);
            if cy >= c.depth.height {
                continue;
            }
            for x in 0..est.depth.width {
                let cx = parent_index(x, eta);
                if cx >= c.depth.width {
                    continue;
                }
                let ci = cy * c.depth.width + cx;
                if (est.confidence.get(x, y) as f64) < params.eps_low && cand[ci] {
                    est.depth.set(x, y, c.depth.data[ci]);
                    est.confidence.set(x, y, c.confidence.data[ci]);
                    n += 1;
                }
            }
        }
        replaced.push(n);
    }
    Ok((refined, replaced))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelReport {
    pub level: usize,
    pub replaced_per_view: Vec<usize>,
    pub replaced_total: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PyramidReport {
    pub levels: Vec<LevelReport>,
}

/// Folds [`aggregate_level`] from the coarsest pair down to level 0 and
/// returns the refined level 0. `levels[0]` is the finest.
pub fn aggregate_pyramid(
    levels: &[PyramidLevel],
    eta: f64,
    params: &MultiMetricParams,
) -> Result<(PyramidLevel, PyramidReport)> {
    let mut current = levels.last().cloned().ok_or_else(|| Error::config("pyramid has no levels"))?;
    let mut report = PyramidReport { levels: Vec::new() };
    for k in (0..levels.len() - 1).rev() {
        let (refined, replaced) = aggregate_level(&levels[k], &current, eta, params)?;
        report.levels.push(LevelReport {
            level: k,
            replaced_total: replaced.iter().sum(),
            replaced_per_view: replaced,
        });
        current = refined;
    }
    Ok((current, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn level_extents_round_to_grid() {
        let c = PyramidConfig::default();
        assert_eq!(c.extent(1600, 1184, 0).unwrap(), (1600, 1184));
        assert_eq!(c.extent(1600, 1184, 1).unwrap(), (800, 592));
        assert_eq!(c.extent(1600, 1184, 2).unwrap(), (400, 296));
        assert_eq!(c.extent(100, 60, 1).unwrap(), (48, 24));
        assert!(c.extent(24, 24, 2).is_err());
    }

    #[test]
    fn parent_of_fine_pixels() {
        assert_eq!((0..6).map(|x| parent_index(x, 2.0)).collect::<Vec<_>>(), vec![0, 0, 1, 1, 2, 2]);
        assert_eq!((0..4).map(|x| parent_index(x, 3.0)).collect::<Vec<_>>(), vec![0, 0, 0, 1]);
    }

    #[test]
    fn params_validation() {
        assert!(MultiMetricParams::default().validate().is_ok());
        let bad = MultiMetricParams { eps_low: 0.9, eps_high: 0.5, ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
