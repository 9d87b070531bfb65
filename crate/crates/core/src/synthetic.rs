//! Ray-cast renderer for textured planes and boxes with analytic depth.
//!
//! Cameras sit on a horizontal arc around a target point; view 0 is the
//! world frame itself. Textures are sums of sinusoids evaluated in surface
//! coordinates (millimetres), so every view sees the same pattern on a
//! surface and the band limit can be chosen per scene.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::PointCloud;
use crate::geometry::{Camera, DepthRange};
use crate::io;
use crate::io::camera::CameraRecord;
use crate::maps::{Image, Map};

pub const ARC_RADIUS_MM: f64 = 680.0;
pub const ARC_STEP_DEG: f64 = 8.0;

/// Sinusoid periods on surfaces, millimetres.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextureBand {
    pub min_period: f64,
    pub max_period: f64,
}

impl Default for TextureBand {
    fn default() -> Self {
        Self { min_period: 110.0, max_period: 360.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Texture {
    pub seed: u64,
    pub band: TextureBand,
}

/// One sinusoid: frequency vector (cycles/mm), phase and amplitude.
#[derive(Clone, Copy, Debug)]
struct Wave {
    freq: Vector2<f64>,
    phase: f64,
    amp: f64,
}

const WAVES_PER_CHANNEL: usize = 5;

/// Texture with its sinusoids expanded once.
#[derive(Clone, Debug)]
struct TextureEval {
    waves: [[Wave; WAVES_PER_CHANNEL]; 3],
}

impl TextureEval {
    fn new(t: &Texture) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(t.seed);
        let wave = |rng: &mut ChaCha8Rng| {
            let period = rng.gen_range(t.band.min_period..=t.band.max_period);
            let angle = rng.gen_range(0.0..PI);
            Wave {
                freq: Vector2::new(angle.cos(), angle.sin()) / period,
                phase: rng.gen_range(0.0..2.0 * PI),
                amp: rng.gen_range(0.06..0.1),
            }
        };
        let mut waves = [[Wave { freq: Vector2::zeros(), phase: 0.0, amp: 0.0 }; WAVES_PER_CHANNEL]; 3];
        for ch in &mut waves {
            for w in ch.iter_mut() {
                *w = wave(&mut rng);
            }
        }
        Self { waves }
    }

    fn color(&self, uv: Vector2<f64>) -> [f32; 3] {
        let mut out = [0f32; 3];
        for (c, ch) in self.waves.iter().enumerate() {
            let v: f64 = ch.iter().map(|w| w.amp * (2.0 * PI * w.freq.dot(&uv) + w.phase).sin()).sum();
            out[c] = (0.5 + v).clamp(0.0, 1.0) as f32;
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Surface {
    /// Infinite plane through `point` with normal `normal`.
    Plane { point: [f64; 3], normal: [f64; 3], texture: Texture },
    /// Axis-aligned box.
    Box { center: [f64; 3], half_extents: [f64; 3], texture: Texture },
}

fn v3(a: [f64; 3]) -> Vector3<f64> {
    Vector3::new(a[0], a[1], a[2])
}

/// Deterministic in-plane basis for a unit normal.
fn plane_basis(n: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let helper = if n.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let e1 = n.cross(&helper).normalize();
    let e2 = n.cross(&e1);
    (e1, e2)
}

/// A ray hit: distance parameter (camera depth when the ray direction has
/// unit camera-z) and surface coordinates.
struct Hit {
    s: f64,
    uv: Vector2<f64>,
}

impl Surface {
    fn texture(&self) -> &Texture {
        match self {
            Surface::Plane { texture, .. } | Surface::Box { texture, .. } => texture,
        }
    }

    fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
        match self {
            Surface::Plane { point, normal, .. } => {
                let n = v3(*normal).normalize();
                let p = v3(*point);
                let denom = dir.dot(&n);
                if denom.abs() < 1e-12 {
                    return None;
                }
                let s = (p - origin).dot(&n) / denom;
                if !(s > 0.0) {
                    return None;
                }
                let (e1, e2) = plane_basis(&n);
                let rel = origin + dir * s - p;
                Some(Hit { s, uv: Vector2::new(rel.dot(&e1), rel.dot(&e2)) })
            }
            Surface::Box { center, half_extents, .. } => {
                let (c, h) = (v3(*center), v3(*half_extents));
                let (mut t_near, mut t_far) = (f64::NEG_INFINITY, f64::INFINITY);
                let mut axis = 0;
                for a in 0..3 {
                    let (lo, hi) = (c[a] - h[a], c[a] + h[a]);
                    if dir[a].abs() < 1e-15 {
                        if origin[a] < lo || origin[a] > hi {
                            return None;
                        }
                        continue;
                    }
                    let (mut t0, mut t1) = ((lo - origin[a]) / dir[a], (hi - origin[a]) / dir[a]);
                    if t0 > t1 {
                        std::mem::swap(&mut t0, &mut t1);
                    }
                    if t0 > t_near {
                        t_near = t0;
                        axis = a;
                    }
                    t_far = t_far.min(t1);
                }
                if t_near > t_far || !(t_near > 0.0) {
                    return None;
                }
                let rel = origin + dir * t_near - c;
                let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
                // Offset per face so opposite and adjacent faces differ.
                let face = (2 * axis + usize::from(rel[axis] > 0.0)) as f64;
                Some(Hit { s: t_near, uv: Vector2::new(rel[u] + 1000.0 * face, rel[v]) })
            }
        }
    }
}

/// Per-view render output.
#[derive(Clone, Debug)]
pub struct Render {
    pub image: Image,
    /// Camera-frame depth, 0 where nothing was hit.
    pub depth: Map,
    pub valid: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub surfaces: Vec<Surface>,
    pub cameras: Vec<Camera>,
    pub depth_range: DepthRange,
    pub seed: u64,
}

/// Scene manifest written alongside the rendered views.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub views: usize,
    pub image_size: [usize; 2],
    pub depth_range: DepthRange,
    pub surfaces: Vec<Surface>,
    pub seed: u64,
}

impl SyntheticScene {
    /// Casts the ray through every pixel of `cam`.
    pub fn render_camera(&self, cam: &Camera) -> Render {
        let textures: Vec<TextureEval> = self.surfaces.iter().map(|s| TextureEval::new(s.texture())).collect();
        let (w, h) = (cam.width, cam.height);
        let plane = w * h;
        let origin = cam.center();
        let rt = cam.rotation.transpose();
        let mut image = vec![0f32; 3 * plane];
        let mut depth = vec![0f32; plane];
        let mut valid = vec![false; plane];
        for y in 0..h {
            for x in 0..w {
                let ray = Vector3::new((x as f64 - cam.cx) / cam.fx, (y as f64 - cam.cy) / cam.fy, 1.0);
                let dir = rt * ray;
                let best = self
                    .surfaces
                    .iter()
                    .enumerate()
                    .filter_map(|(k, s)| s.intersect(&origin, &dir).map(|hit| (k, hit)))
                    .min_by(|a, b| a.1.s.total_cmp(&b.1.s));
                let i = y * w + x;
                if let Some((k, hit)) = best {
                    let c = textures[k].color(hit.uv);
                    for (ch, v) in c.into_iter().enumerate() {
                        image[ch * plane + i] = v;
                    }
                    depth[i] = hit.s as f32;
                    valid[i] = true;
                }
            }
        }
        Render {
            image: Image::new(w, h, image).expect("sized above"),
            depth: Map::new(w, h, depth).expect("sized above"),
            valid,
        }
    }

    pub fn render(&self) -> Vec<Render> {
        use rayon::prelude::*;
        self.cameras.par_iter().map(|c| self.render_camera(c)).collect()
    }

    /// Exact depth at pixel centers of `cam` (no image), used for ground
    /// truth at reduced resolutions.
    pub fn depth_for(&self, cam: &Camera) -> Map {
        self.render_camera(cam).depth
    }

    pub fn manifest(&self) -> Manifest {
        let cam = &self.cameras[0];
        Manifest {
            views: self.cameras.len(),
            image_size: [cam.width, cam.height],
            depth_range: self.depth_range,
            surfaces: self.surfaces.clone(),
            seed: self.seed,
        }
    }

    /// Ground-truth cloud: every valid pixel center of every view of `cams`,
    /// unprojected with its exact depth.
    pub fn ground_truth_cloud(&self, cams: &[Camera]) -> Result<PointCloud> {
        let mut cloud = PointCloud::default();
        for (v, cam) in cams.iter().enumerate() {
            let r = self.render_camera(cam);
            for y in 0..cam.height {
                for x in 0..cam.width {
                    let i = y * cam.width + x;
                    if !r.valid[i] {
                        continue;
                    }
                    let p = cam.unproject(&Vector2::new(x as f64, y as f64), r.depth.data[i] as f64)?;
                    let rgb = r.image.pixel(x, y).map(|c| (c * 255.0).round() as u8);
                    cloud.push([p.x as f32, p.y as f32, p.z as f32], rgb, v as u32);
                }
            }
        }
        Ok(cloud)
    }
}

/// Camera extents and intrinsics shared by all views of a generated scene.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewLayout {
    pub views: usize,
    pub width: usize,
    pub height: usize,
}

impl ViewLayout {
    /// Intrinsics `fx = fy = 1.25·width`, principal point at the image center.
    pub fn cameras(&self) -> Result<Vec<Camera>> {
        let f = 1.25 * self.width as f64;
        let (cx, cy) = ((self.width as f64 - 1.0) / 2.0, (self.height as f64 - 1.0) / 2.0);
        let target = Vector3::new(0.0, 0.0, ARC_RADIUS_MM);
        (0..self.views)
            .map(|i| {
                // 0, +1, −1, +2, −2, ... arc steps.
                let k = i.div_ceil(2) as f64 * if i % 2 == 1 { 1.0 } else { -1.0 };
                let a = (k * ARC_STEP_DEG).to_radians();
                let eye = target + Vector3::new(-a.sin(), 0.0, -a.cos()) * ARC_RADIUS_MM;
                if i == 0 {
                    return Camera::new(
                        f,
                        f,
                        cx,
                        cy,
                        nalgebra::Matrix3::identity(),
                        Vector3::zeros(),
                        self.width,
                        self.height,
                    );
                }
                Camera::look_at(eye, target, Vector3::new(0.0, -1.0, 0.0), f, f, cx, cy, self.width, self.height)
            })
            .collect()
    }
}

/// Which surfaces to place.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneKind {
    /// One fronto-parallel plane facing view 0.
    FrontoPlane,
    /// Slanted background plane plus a box in front of it.
    PlaneAndBox,
}

pub fn paper_depth_range() -> DepthRange {
    DepthRange { d_min: 425.0, d_max: 935.0, count: 192 }
}

fn texture(rng: &mut ChaCha8Rng, band: TextureBand) -> Texture {
    Texture { seed: rng.gen(), band }
}

/// Fronto-parallel plane at `depth` in front of view 0.
pub fn fronto_plane_scene(layout: ViewLayout, depth: f64, seed: u64, range: DepthRange) -> Result<SyntheticScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(SyntheticScene {
        surfaces: vec![Surface::Plane {
            point: [0.0, 0.0, depth],
            normal: [0.0, 0.0, -1.0],
            texture: texture(&mut rng, TextureBand::default()),
        }],
        cameras: layout.cameras()?,
        depth_range: range,
        seed,
    })
}

/// Random scene of the given kind whose ground-truth depths lie strictly
/// inside `range` for every view. Resamples until that holds.
pub fn random_scene(layout: ViewLayout, kind: SceneKind, seed: u64, range: DepthRange) -> Result<SyntheticScene> {
    range.validate()?;
    let cameras = layout.cameras()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let margin = 0.04 * (range.d_max - range.d_min);
    for _ in 0..200 {
        let back_depth = rng.gen_range(
            range.d_min + 0.55 * (range.d_max - range.d_min)..range.d_max - 0.2 * (range.d_max - range.d_min),
        );
        let (tilt_x, tilt_y) = match kind {
            SceneKind::FrontoPlane => (0.0, 0.0),
            SceneKind::PlaneAndBox => (rng.gen_range(-0.25f64..0.25), rng.gen_range(-0.25f64..0.25)),
        };
        let mut surfaces = vec![Surface::Plane {
            point: [0.0, 0.0, back_depth],
            normal: [tilt_x, tilt_y, -1.0],
            texture: texture(&mut rng, TextureBand::default()),
        }];
        if kind == SceneKind::PlaneAndBox {
            let half = [rng.gen_range(50.0..90.0), rng.gen_range(40.0..70.0), rng.gen_range(30.0..60.0)];
            let z = rng.gen_range(range.d_min + 0.2 * (range.d_max - range.d_min)..back_depth - 120.0);
            surfaces.push(Surface::Box {
                center: [rng.gen_range(-60.0..60.0), rng.gen_range(-40.0..40.0), z],
                half_extents: half,
                texture: texture(&mut rng, TextureBand::default()),
            });
        }
        let scene = SyntheticScene { surfaces, cameras: cameras.clone(), depth_range: range, seed };
        let ok = scene.cameras.iter().all(|c| {
            let d = scene.depth_for(c);
            d.data.iter().all(|&v| v as f64 > range.d_min + margin && (v as f64) < range.d_max - margin)
        });
        if ok {
            return Ok(scene);
        }
    }
    Err(Error::config("could not place surfaces inside the depth range"))
}

/// Paths of one view inside a scene directory.
pub fn image_path(scene: &Path, view: usize) -> PathBuf {
    scene.join("images").join(format!("{view:04}.png"))
}

pub fn camera_path(scene: &Path, view: usize) -> PathBuf {
    scene.join("cams").join(format!("{view:04}_cam.txt"))
}

pub fn gt_depth_path(scene: &Path, view: usize) -> PathBuf {
    scene.join("gt").join(format!("{view:04}.pfm"))
}

pub fn scene_dir(root: &Path, index: usize) -> PathBuf {
    root.join(format!("scene_{index:04}"))
}

/// Writes images, camera files, ground-truth depths, the ground-truth cloud
/// (sampled at quarter resolution) and the manifest.
pub fn write_scene(dir: &Path, scene: &SyntheticScene) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let renders = scene.render();
    for (v, (cam, r)) in scene.cameras.iter().zip(&renders).enumerate() {
        io::image::write(&image_path(dir, v), &r.image)?;
        io::camera::write(&camera_path(dir, v), &CameraRecord::from_camera(cam, &scene.depth_range))?;
        io::pfm::write(&gt_depth_path(dir, v), &r.depth)?;
    }
    let quarter: Vec<Camera> = scene.cameras.iter().map(|c| c.scaled(0.25)).collect::<Result<_>>()?;
    io::ply::write(&dir.join("gt_cloud.ply"), &scene.ground_truth_cloud(&quarter)?)?;
    io::write_file(&dir.join("scene.json"), serde_json::to_string_pretty(&scene.manifest())?.as_bytes())?;
    Ok(())
}

/// Generates `count` scenes under `root` (`scene_0000`, ...). Scene `i` uses
/// seed `seed + i`; the camera layout is the same for every scene.
pub fn make_dataset(
    root: &Path,
    count: usize,
    layout: ViewLayout,
    kind: SceneKind,
    seed: u64,
    range: DepthRange,
) -> Result<Vec<PathBuf>> {
    (0..count)
        .map(|i| {
            let scene = random_scene(layout, kind, seed.wrapping_add(i as u64), range)?;
            let dir = scene_dir(root, i);
            write_scene(&dir, &scene)?;
            Ok(dir)
        })
        .collect()
}
