//! Interchangeable matching strategies, selected by name.

use sweepfuse_tensor::{Element, Tape, Var};

use super::aggregate::{aggregate_pixelwise, aggregate_voxelwise, photometric_cost, Residual};
use crate::error::{Error, Result};
use crate::maps::Image;
use crate::networks::Model;

/// Sharpness of the photometric baseline: logits are `−cost / temperature`.
pub const PHOTOMETRIC_TEMPERATURE: f64 = 0.005;

/// Default radius of the photometric cost window.
pub const PHOTOMETRIC_WINDOW: usize = 1;

/// Turns images into matchable features and residual volumes into
/// per-hypothesis logits.
pub trait MatchingStrategy<T: Element>: Send + Sync {
    fn name(&self) -> &'static str;

    /// Whether the strategy has learnable parameters on the path to depth.
    fn trainable(&self) -> bool;

    /// `[C, H/4, W/4]` features of one image.
    fn features(&self, tape: &mut Tape<T>, model: &Model<T>, image: &Image) -> Result<Var>;

    /// `[D, h, w]` logits from the residuals of all source views.
    fn cost_logits(&self, tape: &mut Tape<T>, model: &Model<T>, residuals: &[Residual<T>]) -> Result<Var>;
}

fn learned_features<T: Element>(tape: &mut Tape<T>, model: &Model<T>, image: &Image) -> Result<Var> {
    let x = tape.constant(image.standardized());
    model.extract_features(tape, x)
}

/// Learned features, 2D attention per view, 3D regularization.
pub struct Pixelwise;

impl<T: Element> MatchingStrategy<T> for Pixelwise {
    fn name(&self) -> &'static str {
        "pixelwise"
    }

    fn trainable(&self) -> bool {
        true
    }

    fn features(&self, tape: &mut Tape<T>, model: &Model<T>, image: &Image) -> Result<Var> {
        learned_features(tape, model, image)
    }

    fn cost_logits(&self, tape: &mut Tape<T>, model: &Model<T>, residuals: &[Residual<T>]) -> Result<Var> {
        let c = aggregate_pixelwise(tape, model, residuals)?;
        model.regularize(tape, c)
    }
}

/// Learned features, 3D attention per view, 3D regularization.
pub struct Voxelwise;

impl<T: Element> MatchingStrategy<T> for Voxelwise {
    fn name(&self) -> &'static str {
        "voxelwise"
    }

    fn trainable(&self) -> bool {
        true
    }

    fn features(&self, tape: &mut Tape<T>, model: &Model<T>, image: &Image) -> Result<Var> {
        learned_features(tape, model, image)
    }

    fn cost_logits(&self, tape: &mut Tape<T>, model: &Model<T>, residuals: &[Residual<T>]) -> Result<Var> {
        let c = aggregate_voxelwise(tape, model, residuals)?;
        model.regularize(tape, c)
    }
}

/// Classical plane sweep: 4×-average-pooled RGB as features and the negated
/// window-averaged L1 residual as logits. No learned parameters.
pub struct Photometric {
    pub temperature: f64,
    /// Radius of the square cost-aggregation window, in depth-map pixels.
    pub window: usize,
}

impl Default for Photometric {
    fn default() -> Self {
        Self { temperature: PHOTOMETRIC_TEMPERATURE, window: PHOTOMETRIC_WINDOW }
    }
}

impl<T: Element> MatchingStrategy<T> for Photometric {
    fn name(&self) -> &'static str {
        "photometric"
    }

    fn trainable(&self) -> bool {
        false
    }

    fn features(&self, tape: &mut Tape<T>, _model: &Model<T>, image: &Image) -> Result<Var> {
        let pooled = image.area_resample(0.25, image.width / 4, image.height / 4)?;
        Ok(tape.constant(pooled.to_tensor()))
    }

    fn cost_logits(&self, tape: &mut Tape<T>, _model: &Model<T>, residuals: &[Residual<T>]) -> Result<Var> {
        let cost = photometric_cost(tape, residuals, self.window)?;
        let scale = -1.0 / self.temperature;
        Ok(tape.constant(cost.map(|c| c * T::lit(scale))))
    }
}

/// Strategies by name.
pub struct StrategyRegistry<T> {
    entries: Vec<Box<dyn MatchingStrategy<T>>>,
}

impl<T: Element> StrategyRegistry<T> {
    pub fn empty() -> Self {
        Self { entries: Vec::new() }
    }

    /// `pixelwise`, `voxelwise` and `photometric`.
    pub fn with_defaults() -> Self {
        let mut r = Self::empty();
        r.register(Box::new(Pixelwise));
        r.register(Box::new(Voxelwise));
        r.register(Box::new(Photometric::default()));
        r
    }

    /// Adds a strategy, replacing any existing one with the same name.
    pub fn register(&mut self, strategy: Box<dyn MatchingStrategy<T>>) {
        match self.entries.iter().position(|e| e.name() == strategy.name()) {
            Some(i) => self.entries[i] = strategy,
            None => self.entries.push(strategy),
        }
    }

    pub fn get(&self, name: &str) -> Result<&dyn MatchingStrategy<T>> {
        self.entries.iter().find(|e| e.name() == name).map(|e| e.as_ref()).ok_or_else(|| {
            Error::config(format!("unknown matching mode {name:?} (known: {})", self.names().join(", ")))
        })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|e| e.name()).collect()
    }
}
