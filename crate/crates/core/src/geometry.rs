//! Pinhole cameras, plane-induced homographies and depth hypotheses.
//!
//! Poses map world to camera: `x_cam = R·x_world + t`. Pixel centers sit at
//! integer coordinates. Depth always means the camera-frame `z` coordinate,
//! in millimetres.

use nalgebra::{Matrix3, Matrix4, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on `RᵀR = I` accepted when constructing a camera.
pub const ORTHONORMAL_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite()) {
            return Err(Error::config(format!("focal lengths must be positive, got fx={fx} fy={fy}")));
        }
        if !(cx.is_finite() && cy.is_finite()) || translation.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("camera parameters must be finite"));
        }
        let defect = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if !(defect <= ORTHONORMAL_TOLERANCE) || rotation.determinant() < 0.0 {
            return Err(Error::config(format!("rotation is not a proper orthonormal matrix (|RᵀR − I| = {defect:e})")));
        }
        Ok(Self { fx, fy, cx, cy, rotation, translation, width, height })
    }

    /// Camera at `eye` looking at `target`; image `y` points along `-up`.
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let z = (target - eye).try_normalize(1e-12).ok_or_else(|| Error::config("eye equals target"))?;
        let x = (-up)
            .cross(&z)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::config("up vector parallel to viewing direction"))?;
        let y = z.cross(&x);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let translation = -(rotation * eye);
        Self::new(fx, fy, cx, cy, rotation, translation, width, height)
    }

    pub fn intrinsics(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn intrinsics_inverse(&self) -> Matrix3<f64> {
        Matrix3::new(1.0 / self.fx, 0.0, -self.cx / self.fx, 0.0, 1.0 / self.fy, -self.cy / self.fy, 0.0, 0.0, 1.0)
    }

    /// The 4×4 world-to-camera matrix `[R | t; 0 1]`.
    pub fn extrinsic(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Camera center in world coordinates, `−Rᵀt`.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// Pixel and depth of a world point, or `None` when the point is not in
    /// front of the camera.
    pub fn project(&self, world: &Vector3<f64>) -> Option<(Vector2<f64>, f64)> {
        let c = self.rotation * world + self.translation;
        if c.z <= 0.0 {
            return None;
        }
        let p = Vector2::new(self.fx * c.x / c.z + self.cx, self.fy * c.y / c.z + self.cy);
        Some((p, c.z))
    }

    /// World point at depth `depth` along the ray through `pixel`:
    /// `Rᵀ·(d·K⁻¹·p̃ − t)`.
    pub fn unproject(&self, pixel: &Vector2<f64>, depth: f64) -> Result<Vector3<f64>> {
        if !(depth > 0.0) {
            return Err(Error::contract(format!("unproject needs a positive depth, got {depth}")));
        }
        let ray = Vector3::new((pixel.x - self.cx) / self.fx, (pixel.y - self.cy) / self.fy, 1.0);
        Ok(self.rotation.transpose() * (ray * depth - self.translation))
    }

    /// Resamples the camera to an image scaled by `factor`, keeping pixel
    /// centers aligned: `c' = (c + 0.5)·factor − 0.5`. Extents are floored.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        if !(factor > 0.0 && factor.is_finite()) {
            return Err(Error::config(format!("scale factor must be positive, got {factor}")));
        }
        let extent = |n: usize| (n as f64 * factor + 1e-9).floor() as usize;
        Ok(Self {
            fx: self.fx * factor,
            fy: self.fy * factor,
            cx: (self.cx + 0.5) * factor - 0.5,
            cy: (self.cy + 0.5) * factor - 0.5,
            rotation: self.rotation,
            translation: self.translation,
            width: extent(self.width),
            height: extent(self.height),
        })
    }

    /// Same intrinsics and pose with different image extents (used after
    /// cropping to a grid).
    pub fn with_extent(&self, width: usize, height: usize) -> Self {
        Self { width, height, ..self.clone() }
    }
}

pub fn scale_camera(cam: &Camera, factor: f64) -> Result<Camera> {
    cam.scaled(factor)
}

pub fn project(cam: &Camera, world: &Vector3<f64>) -> Option<(Vector2<f64>, f64)> {
    cam.project(world)
}

pub fn unproject(cam: &Camera, pixel: &Vector2<f64>, depth: f64) -> Result<Vector3<f64>> {
    cam.unproject(pixel, depth)
}

/// Relative pose `(R_src·R_refᵀ, t_src − R_rel·t_ref)` taking reference
/// camera coordinates to source camera coordinates.
pub fn relative_pose(reference: &Camera, source: &Camera) -> (Matrix3<f64>, Vector3<f64>) {
    let r = source.rotation * reference.rotation.transpose();
    let t = source.translation - r * reference.translation;
    (r, t)
}

/// Homography of the fronto-parallel reference plane `z = depth`, without
/// normalization. For `q = H·p̃`, `q.z` equals the source-camera depth of the
/// plane point divided by `depth`, so its sign tells whether the point is in
/// front of the source camera.
pub(crate) fn plane_homography_metric(reference: &Camera, source: &Camera, depth: f64) -> Matrix3<f64> {
    let (r, t) = relative_pose(reference, source);
    let n = Vector3::new(0.0, 0.0, 1.0);
    source.intrinsics() * (r + t * n.transpose() / depth) * reference.intrinsics_inverse()
}

/// `H(d) = K_src·(R_rel + t_rel·nᵀ/d)·K_ref⁻¹` with `n = (0, 0, 1)`,
/// normalized so that `H[2][2] = 1`.
pub fn plane_homography(reference: &Camera, source: &Camera, depth: f64) -> Result<Matrix3<f64>> {
    if !(depth > 0.0) {
        return Err(Error::contract(format!("plane depth must be positive, got {depth}")));
    }
    let h = plane_homography_metric(reference, source, depth);
    let s = h[(2, 2)];
    if s == 0.0 || !s.is_finite() {
        return Err(Error::contract("homography cannot be normalized (H[2][2] = 0)"));
    }
    Ok(h / s)
}

/// Applies a homography to a pixel, dehomogenizing.
pub fn apply_homography(h: &Matrix3<f64>, pixel: &Vector2<f64>) -> Vector2<f64> {
    let q = h * Vector3::new(pixel.x, pixel.y, 1.0);
    Vector2::new(q.x / q.z, q.y / q.z)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthRange {
    pub d_min: f64,
    pub d_max: f64,
    pub count: usize,
}

impl DepthRange {
    pub fn new(d_min: f64, d_max: f64, count: usize) -> Result<Self> {
        let r = Self { d_min, d_max, count };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.d_min > 0.0 && self.d_min < self.d_max && self.d_max.is_finite()) {
            return Err(Error::config(format!(
                "depth range must satisfy 0 < d_min < d_max, got [{}, {}]",
                self.d_min, self.d_max
            )));
        }
        if self.count < 2 {
            return Err(Error::config(format!("need at least 2 depth hypotheses, got {}", self.count)));
        }
        Ok(())
    }

    /// Hypotheses uniform in inverse depth, ascending in depth.
    pub fn samples(&self) -> Result<Vec<f64>> {
        self.validate()?;
        let (a, b) = (1.0 / self.d_min, 1.0 / self.d_max);
        let last = self.count - 1;
        Ok((0..self.count)
            .map(|j| match j {
                0 => self.d_min,
                j if j == last => self.d_max,
                j => 1.0 / (a + (j as f64 / last as f64) * (b - a)),
            })
            .collect())
    }

    /// Constant step in `1/d` between neighbouring hypotheses.
    pub fn inverse_step(&self) -> f64 {
        (1.0 / self.d_min - 1.0 / self.d_max) / (self.count - 1) as f64
    }

    /// Gap between the two hypotheses bracketing `depth` (the local
    /// hypothesis spacing). Depths outside the range use the end intervals.
    pub fn local_spacing(&self, depth: f64) -> f64 {
        let inv = 1.0 / depth.clamp(self.d_min, self.d_max);
        let pos = (1.0 / self.d_min - inv) / self.inverse_step();
        let j = (pos.floor().max(0.0) as usize).min(self.count - 2);
        let depth_at = |k: usize| 1.0 / (1.0 / self.d_min - k as f64 * self.inverse_step());
        depth_at(j + 1) - depth_at(j)
    }
}

pub fn sample_inverse_depth(range: &DepthRange) -> Result<Vec<f64>> {
    range.samples()
}
