//! Whole-scene runs: every view as reference at every pyramid level, then
//! refinement and fusion inputs.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fusion::{filter_depth, fuse, FusionView, PointCloud};
use crate::geometry::{Camera, DepthRange};
use crate::maps::{Image, Map};
use crate::networks::Model;
use crate::pipeline::{depth_grid_camera, estimate_depth, DepthEstimate, MatchingStrategy, View};
use crate::pyramid::{aggregate_pyramid, build_pyramid, MultiMetricParams, PyramidConfig, PyramidLevel, PyramidReport};
use crate::train::select_sources;

/// Estimates one view with its `count − 1` nearest views as sources.
pub fn estimate_view(
    strategy: &dyn MatchingStrategy<f32>,
    model: &Model<f32>,
    views: &[View],
    reference: usize,
    count: usize,
    range: &DepthRange,
    level: usize,
) -> Result<DepthEstimate> {
    let cams: Vec<Camera> = views.iter().map(|v| v.camera.clone()).collect();
    let order: Vec<View> =
        select_sources(&cams, reference, count.min(views.len()))?.into_iter().map(|i| views[i].clone()).collect();
    estimate_depth(strategy, model, &order, range, level)
}

/// Every view of one level as reference. Views run in parallel on the
/// current rayon pool; each estimate is independent, so the result does not
/// depend on the pool size.
pub fn estimate_level(
    strategy: &dyn MatchingStrategy<f32>,
    model: &Model<f32>,
    views: &[View],
    count: usize,
    range: &DepthRange,
    level: usize,
) -> Result<PyramidLevel> {
    let estimates = (0..views.len())
        .into_par_iter()
        .map(|r| estimate_view(strategy, model, views, r, count, range, level))
        .collect::<Result<Vec<_>>>()?;
    let cameras = views.iter().map(|v| depth_grid_camera(&v.camera)).collect::<Result<_>>()?;
    Ok(PyramidLevel { estimates, cameras })
}

/// Estimates for every level of the image pyramid, level 0 first.
pub fn estimate_pyramid(
    strategy: &dyn MatchingStrategy<f32>,
    model: &Model<f32>,
    views: &[View],
    count: usize,
    range: &DepthRange,
    config: &PyramidConfig,
) -> Result<Vec<PyramidLevel>> {
    build_pyramid(views, config)?
        .iter()
        .enumerate()
        .map(|(k, level)| estimate_level(strategy, model, level, count, range, k))
        .collect()
}

/// Pyramid estimation followed by multi-metric refinement down to level 0.
pub fn refine_scene(
    strategy: &dyn MatchingStrategy<f32>,
    model: &Model<f32>,
    views: &[View],
    count: usize,
    range: &DepthRange,
    config: &PyramidConfig,
    params: &MultiMetricParams,
) -> Result<(PyramidLevel, PyramidReport)> {
    let levels = estimate_pyramid(strategy, model, views, count, range, config)?;
    aggregate_pyramid(&levels, config.eta, params)
}

/// Filters every view of `level` against the others and pairs it with
/// colors area-averaged onto the depth grid.
pub fn fusion_inputs(
    level: &PyramidLevel,
    images: &[Image],
    conf_threshold: f64,
    params: &MultiMetricParams,
) -> Result<Vec<FusionView>> {
    if images.len() != level.estimates.len() {
        return Err(Error::config(format!("{} images for {} depth maps", images.len(), level.estimates.len())));
    }
    (0..level.estimates.len())
        .map(|i| {
            let est = &level.estimates[i];
            let neighbours: Vec<(&Map, &Camera)> = (0..level.estimates.len())
                .filter(|&j| j != i)
                .map(|j| (&level.estimates[j].depth, &level.cameras[j]))
                .collect();
            let (w, h) = (est.depth.width, est.depth.height);
            let scale = w as f64 / images[i].width as f64;
            Ok(FusionView {
                filtered: filter_depth(est, &level.cameras[i], &neighbours, conf_threshold, params)?,
                camera: level.cameras[i].clone(),
                colors: images[i].area_resample(scale, w, h)?,
            })
        })
        .collect()
}

/// Filters and fuses a refined level into one cloud.
pub fn fuse_level(
    level: &PyramidLevel,
    images: &[Image],
    conf_threshold: f64,
    params: &MultiMetricParams,
) -> Result<PointCloud> {
    fuse(&fusion_inputs(level, images, conf_threshold, params)?, params)
}
