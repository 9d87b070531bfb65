//! Depth estimation for one reference view: features, plane-sweep warping,
//! residuals, strategy-specific aggregation, softmax, soft argmin and
//! confidence.

pub mod aggregate;
pub mod depth;
pub mod strategy;
pub mod warp;

use sweepfuse_tensor::{Element, Tape, Var};

use crate::error::{Error, Result};
use crate::geometry::{Camera, DepthRange};
use crate::maps::{Image, Map};
use crate::networks::Model;

pub use aggregate::{aggregate_pixelwise, aggregate_voxelwise, residual_volumes, Residual};
pub use depth::{confidence_map, l1_loss, soft_argmin};
pub use strategy::{MatchingStrategy, StrategyRegistry};
pub use warp::{warp_volume, FeatureVolume};

/// Ratio between image and depth-map resolution.
pub const FEATURE_STRIDE: usize = 4;

/// An image with its camera at image resolution.
#[derive(Clone, Debug)]
pub struct View {
    pub image: Image,
    pub camera: Camera,
}

/// Depth and confidence for one reference view.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthEstimate {
    pub depth: Map,
    pub confidence: Map,
    pub level: usize,
}

/// Depth-map extents for an image, which must be divisible by 8.
pub fn estimate_extent(width: usize, height: usize) -> Result<(usize, usize)> {
    if width == 0 || height == 0 || !width.is_multiple_of(8) || !height.is_multiple_of(8) {
        return Err(Error::config(format!("image extents {width}×{height} must be positive multiples of 8")));
    }
    Ok((width / FEATURE_STRIDE, height / FEATURE_STRIDE))
}

/// Camera of the depth-map grid for an image-resolution camera.
pub fn depth_grid_camera(cam: &Camera) -> Result<Camera> {
    cam.scaled(1.0 / FEATURE_STRIDE as f64)
}

/// Tape handles of one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    /// `[D, h, w]` probability volume.
    pub prob: Var,
    /// `[h, w]` soft-argmin depth.
    pub depth: Var,
    pub hypotheses: Vec<f64>,
    /// Camera of the depth-map grid.
    pub camera: Camera,
}

/// Records the full chain for `views[0]` as reference and the remaining
/// views as sources.
pub fn forward<T: Element>(
    tape: &mut Tape<T>,
    strategy: &dyn MatchingStrategy<T>,
    model: &Model<T>,
    views: &[View],
    range: &DepthRange,
) -> Result<Forward> {
    if views.len() < 2 {
        return Err(Error::config(format!("need a reference and at least one source view, got {}", views.len())));
    }
    for v in views {
        estimate_extent(v.image.width, v.image.height)?;
        if v.camera.width != v.image.width || v.camera.height != v.image.height {
            return Err(Error::config(format!(
                "camera {}×{} does not match image {}×{}",
                v.camera.width, v.camera.height, v.image.width, v.image.height
            )));
        }
    }
    let hypotheses = range.samples()?;
    let cams: Vec<Camera> = views.iter().map(|v| depth_grid_camera(&v.camera)).collect::<Result<_>>()?;
    let reference = strategy.features(tape, model, &views[0].image)?;
    let mut sources = Vec::with_capacity(views.len() - 1);
    for (i, v) in views.iter().enumerate().skip(1) {
        let f = strategy.features(tape, model, &v.image)?;
        sources.push(warp::warp_volume(tape, f, i, &cams[0], &cams[i], &hypotheses)?);
    }
    let residuals = aggregate::residuals_from_features(tape, reference, sources)?;
    let logits = strategy.cost_logits(tape, model, &residuals)?;
    let prob = tape.softmax(logits, 0)?;
    let depth = depth::soft_argmin_var(tape, prob, &hypotheses)?;
    Ok(Forward { prob, depth, hypotheses, camera: cams[0].clone() })
}

/// Runs [`forward`] in single precision and reads out depth and confidence.
pub fn estimate_depth(
    strategy: &dyn MatchingStrategy<f32>,
    model: &Model<f32>,
    views: &[View],
    range: &DepthRange,
    level: usize,
) -> Result<DepthEstimate> {
    let mut tape = Tape::new();
    let fwd = forward(&mut tape, strategy, model, views, range)?;
    let prob = tape.value(fwd.prob);
    let depth = Map::from_tensor(tape.value(fwd.depth))?;
    let confidence = confidence_map(prob, &fwd.hypotheses)?;
    Ok(DepthEstimate { depth, confidence, level })
}
