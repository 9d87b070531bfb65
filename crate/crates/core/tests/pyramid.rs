use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sweepfuse_core::pipeline::{depth_grid_camera, DepthEstimate};
use sweepfuse_core::pyramid::{
    aggregate_level, aggregate_pyramid, build_pyramid, coarse_candidates, geometric_consistency, parent_index,
    MultiMetricParams, PyramidConfig, PyramidLevel,
};
use sweepfuse_core::synthetic::{random_scene, SceneKind, SyntheticScene, ViewLayout};
use sweepfuse_core::{Camera, DepthRange, Error, Image, Map, View};

const LAYOUT: ViewLayout = ViewLayout { views: 4, width: 160, height: 128 };

fn range() -> DepthRange {
    DepthRange::new(425.0, 935.0, 64).unwrap()
}

fn scene(seed: u64) -> SyntheticScene {
    random_scene(LAYOUT, SceneKind::PlaneAndBox, seed, range()).unwrap()
}

fn views_of(scene: &SyntheticScene) -> Vec<View> {
    scene.render().into_iter().zip(&scene.cameras).map(|(r, c)| View { image: r.image, camera: c.clone() }).collect()
}

/// Ground-truth estimates for every level, all at `confidence`.
fn gt_levels(scene: &SyntheticScene, levels: usize, confidence: f32) -> Vec<PyramidLevel> {
    let config = PyramidConfig { levels, eta: 2.0 };
    build_pyramid(&views_of(scene), &config)
        .unwrap()
        .into_iter()
        .enumerate()
        .map(|(k, views)| {
            let cameras: Vec<Camera> = views.iter().map(|v| depth_grid_camera(&v.camera).unwrap()).collect();
            let estimates = cameras
                .iter()
                .map(|c| {
                    let depth = scene.depth_for(c);
                    DepthEstimate { confidence: Map::filled(depth.width, depth.height, confidence), depth, level: k }
                })
                .collect();
            PyramidLevel { estimates, cameras }
        })
        .collect()
}

/// Corrupts ~`fraction` of every view's pixels: depth off by 5–20 %,
/// confidence 0.1. Returns the corrupted flags per view.
fn corrupt(level: &mut PyramidLevel, fraction: f64, seed: u64) -> Vec<Vec<bool>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    level
        .estimates
        .iter_mut()
        .map(|e| {
            (0..e.depth.data.len())
                .map(|i| {
                    let hit = rng.gen_bool(fraction);
                    if hit {
                        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                        e.depth.data[i] *= 1.0 + sign * rng.gen_range(0.05f32..0.2);
                        e.confidence.data[i] = 0.1;
                    }
                    hit
                })
                .collect()
        })
        .collect()
}

/// Pixels of `view` whose surface point is seen, unoccluded, by every other
/// view of the level, with all four bilinear taps around its projection on
/// the same surface. Independent of the round-trip code path.
fn covisible(level: &PyramidLevel, view: usize) -> Vec<bool> {
    let (cam, depth) = (&level.cameras[view], &level.estimates[view].depth);
    (0..depth.data.len())
        .map(|i| {
            let p = Vector2::new((i % depth.width) as f64, (i / depth.width) as f64);
            let x = cam.unproject(&p, depth.data[i] as f64).unwrap();
            (0..level.cameras.len()).filter(|&j| j != view).all(|j| {
                let c = &level.cameras[j];
                let Some((q, z)) = c.project(&x) else { return false };
                if q.x < 0.0 || q.y < 0.0 || q.x > (c.width - 1) as f64 || q.y > (c.height - 1) as f64 {
                    return false;
                }
                let (u, v) = (q.x.floor() as usize, q.y.floor() as usize);
                [(0, 0), (1, 0), (0, 1), (1, 1)].iter().all(|&(du, dv)| {
                    let g = level.estimates[j].depth.get((u + du).min(c.width - 1), (v + dv).min(c.height - 1)) as f64;
                    (g - z).abs() < 0.01 * z
                })
            })
        })
        .collect()
}

fn neighbours(level: &PyramidLevel, view: usize) -> Vec<(&Map, &Camera)> {
    (0..level.cameras.len()).filter(|&j| j != view).map(|j| (&level.estimates[j].depth, &level.cameras[j])).collect()
}

// ------------------------------------------------------------- build

#[test]
fn single_level_pyramid_is_the_input() {
    let views = views_of(&scene(1));
    let p = build_pyramid(&views, &PyramidConfig { levels: 1, eta: 2.0 }).unwrap();
    assert_eq!(p.len(), 1);
    for (a, b) in p[0].iter().zip(&views) {
        assert_eq!(a.image, b.image);
        assert_eq!(a.camera, b.camera);
    }
}

#[test]
fn paper_resolution_levels() {
    let cam = ViewLayout { views: 1, width: 1600, height: 1184 }.cameras().unwrap().remove(0);
    let views = vec![View { image: Image::filled(1600, 1184, [0.2, 0.5, 0.7]), camera: cam }];
    let p = build_pyramid(&views, &PyramidConfig { levels: 3, eta: 2.0 }).unwrap();
    let extents: Vec<_> = p.iter().map(|l| (l[0].image.width, l[0].image.height)).collect();
    assert_eq!(extents, vec![(1600, 1184), (800, 592), (400, 296)]);
    for level in &p {
        let v = &level[0];
        assert_eq!((v.camera.width, v.camera.height), (v.image.width, v.image.height));
        // Constant color survives area averaging.
        for c in 0..3 {
            let plane = v.image.width * v.image.height;
            let want = [0.2f32, 0.5, 0.7][c];
            assert!(v.image.data[c * plane..(c + 1) * plane].iter().all(|&x| (x - want).abs() < 1e-6));
        }
    }
}

#[test]
fn too_small_images_are_rejected() {
    let views = views_of(
        &random_scene(ViewLayout { views: 2, width: 32, height: 32 }, SceneKind::FrontoPlane, 0, range()).unwrap(),
    );
    assert!(matches!(build_pyramid(&views, &PyramidConfig { levels: 4, eta: 2.0 }), Err(Error::Config(_))));
    assert!(matches!(build_pyramid(&views, &PyramidConfig { levels: 2, eta: 1.0 }), Err(Error::Config(_))));
}

// --------------------------------------------------- geometric consistency

#[test]
fn coincident_cameras_are_consistent_everywhere() {
    let s = scene(2);
    let cam = depth_grid_camera(&s.cameras[0]).unwrap();
    let d = s.depth_for(&cam);
    let n = vec![(&d, &cam); 3];
    let g = geometric_consistency(&d, &cam, &n, &MultiMetricParams::default()).unwrap();
    assert!(g.mask.iter().all(|&m| m));
    assert!(g.counts.iter().all(|&c| c == 3));
}

/// Ground truth on the full image grid of every view.
fn image_grid_level(scene: &SyntheticScene) -> PyramidLevel {
    let estimates = scene
        .render()
        .into_iter()
        .map(|r| DepthEstimate {
            confidence: Map::filled(r.depth.width, r.depth.height, 1.0),
            depth: r.depth,
            level: 0,
        })
        .collect();
    PyramidLevel { estimates, cameras: scene.cameras.clone() }
}

#[test]
fn ground_truth_is_consistent_where_covisible() {
    let l = &image_grid_level(&scene(3));
    for v in 0..4 {
        let vis = covisible(l, v);
        let g = geometric_consistency(
            &l.estimates[v].depth,
            &l.cameras[v],
            &neighbours(l, v),
            &MultiMetricParams::default(),
        )
        .unwrap();
        let total = vis.iter().filter(|&&x| x).count();
        let pass = vis.iter().zip(&g.mask).filter(|(&a, &b)| a && b).count();
        assert!(total > 10000, "view {v}: {total}");
        assert!(pass as f64 >= 0.99 * total as f64, "view {v}: {pass}/{total}");
    }
}

#[test]
fn depth_perturbation_breaks_consistency() {
    let levels = gt_levels(&scene(4), 1, 1.0);
    let l = &levels[0];
    let vis = covisible(l, 0);
    let mut depth = l.estimates[0].depth.clone();
    let perturbed: Vec<bool> = (0..depth.data.len()).map(|i| i % 3 == 0).collect();
    for (d, &p) in depth.data.iter_mut().zip(&perturbed) {
        if p {
            *d *= 1.05;
        }
    }
    let g = geometric_consistency(&depth, &l.cameras[0], &neighbours(l, 0), &MultiMetricParams::default()).unwrap();
    let mut checked = 0;
    for i in 0..depth.data.len() {
        if perturbed[i] && vis[i] {
            assert!(!g.mask[i]);
            checked += 1;
        }
    }
    assert!(checked > 200);
}

#[test]
fn zero_required_views_accepts_valid_depths() {
    let levels = gt_levels(&scene(5), 1, 1.0);
    let l = &levels[0];
    let mut depth = l.estimates[0].depth.clone();
    depth.data[7] = 0.0;
    let params = MultiMetricParams { min_consistent_views: 0, ..Default::default() };
    let g = geometric_consistency(&depth, &l.cameras[0], &neighbours(l, 0), &params).unwrap();
    assert!(!g.mask[7]);
    assert_eq!(g.mask.iter().filter(|&&m| !m).count(), 1);
    assert!(matches!(geometric_consistency(&depth, &l.cameras[0], &[], &params), Err(Error::Config(_))));
}

// --------------------------------------------------------------- repair

#[test]
fn confident_fine_levels_are_left_alone() {
    let levels = gt_levels(&scene(6), 2, 0.95);
    let mut fine = levels[0].clone();
    for e in &mut fine.estimates {
        e.confidence = Map::filled(e.depth.width, e.depth.height, 0.5);
    }
    let (out, replaced) = aggregate_level(&fine, &levels[1], 2.0, &MultiMetricParams::default()).unwrap();
    assert_eq!(replaced, vec![0; 4]);
    for (a, b) in out.estimates.iter().zip(&fine.estimates) {
        assert_eq!(a, b);
    }
}

#[test]
fn unconfident_coarse_levels_change_nothing() {
    let mut levels = gt_levels(&scene(7), 2, 0.9);
    corrupt(&mut levels[0], 0.3, 1);
    let (out, replaced) = aggregate_level(&levels[0], &levels[1], 2.0, &MultiMetricParams::default()).unwrap();
    assert_eq!(replaced, vec![0; 4]);
    for (a, b) in out.estimates.iter().zip(&levels[0].estimates) {
        assert_eq!(a, b);
    }
}

#[test]
fn corruption_fixture_is_fully_repaired() {
    let params = MultiMetricParams::default();
    let mut levels = gt_levels(&scene(8), 2, 0.95);
    let corrupted = corrupt(&mut levels[0], 0.1, 2);
    let (fine, coarse) = (&levels[0], &levels[1]);
    let (out, _) = aggregate_level(fine, coarse, 2.0, &params).unwrap();
    let (mut repairable, mut total) = (0, 0);
    for v in 0..4 {
        let cand = coarse_candidates(coarse, v, &params).unwrap();
        let (f, c, o) = (&fine.estimates[v], &coarse.estimates[v], &out.estimates[v]);
        for y in 0..f.depth.height {
            for x in 0..f.depth.width {
                let i = y * f.depth.width + x;
                let ci = parent_index(y, 2.0) * c.depth.width + parent_index(x, 2.0);
                if !corrupted[v][i] {
                    assert_eq!(o.depth.data[i].to_bits(), f.depth.data[i].to_bits());
                    assert_eq!(o.confidence.data[i].to_bits(), f.confidence.data[i].to_bits());
                    continue;
                }
                total += 1;
                if cand[ci] {
                    repairable += 1;
                    assert_eq!(o.depth.data[i], c.depth.data[ci]);
                    assert_eq!(o.confidence.data[i], 0.95);
                } else {
                    assert_eq!(o.depth.data[i], f.depth.data[i]);
                }
            }
        }
    }
    assert!(total > 400);
    assert!(repairable as f64 > 0.5 * total as f64, "{repairable}/{total}");
}

/// Pixels of every view within 1 % of the level-0 ground truth.
fn close_to_truth(est: &PyramidLevel, truth: &PyramidLevel) -> usize {
    est.estimates
        .iter()
        .zip(&truth.estimates)
        .map(|(e, t)| e.depth.data.iter().zip(&t.depth.data).filter(|(&a, &b)| (a - b).abs() <= 0.01 * b).count())
        .sum()
}

#[test]
fn three_levels_beat_one() {
    let params = MultiMetricParams::default();
    let truth = gt_levels(&scene(9), 3, 0.95);
    let mut levels = truth.clone();
    corrupt(&mut levels[0], 0.1, 3);
    corrupt(&mut levels[1], 0.1, 4);
    let (k1, r1) = aggregate_pyramid(&levels[..1], 2.0, &params).unwrap();
    assert!(r1.levels.is_empty());
    for (a, b) in k1.estimates.iter().zip(&levels[0].estimates) {
        assert_eq!(a, b);
    }
    let (k3, r3) = aggregate_pyramid(&levels, 2.0, &params).unwrap();
    assert_eq!(r3.levels.iter().map(|l| l.level).collect::<Vec<_>>(), vec![1, 0]);
    assert!(close_to_truth(&k3, &truth[0]) > close_to_truth(&k1, &truth[0]));
}

#[test]
fn pyramid_folds_level_by_level() {
    let params = MultiMetricParams::default();
    let mut levels = gt_levels(&scene(10), 3, 0.95);
    corrupt(&mut levels[0], 0.1, 5);
    corrupt(&mut levels[1], 0.1, 6);
    // K = 2 is one aggregate_level call.
    let (two, _) = aggregate_pyramid(&levels[..2], 2.0, &params).unwrap();
    let (one, _) = aggregate_level(&levels[0], &levels[1], 2.0, &params).unwrap();
    assert_eq!(two.estimates, one.estimates);
    // K = 3 starts at the coarsest pair.
    let (mid, replaced) = aggregate_level(&levels[1], &levels[2], 2.0, &params).unwrap();
    let (fin, _) = aggregate_level(&levels[0], &mid, 2.0, &params).unwrap();
    let (three, report) = aggregate_pyramid(&levels, 2.0, &params).unwrap();
    assert_eq!(report.levels[0].replaced_per_view, replaced);
    assert_eq!(report.levels[0].replaced_total, replaced.iter().sum::<usize>());
    assert_eq!(three.estimates, fin.estimates);
}

#[test]
fn replacements_come_from_coarse_values() {
    let params = MultiMetricParams::default();
    let mut levels = gt_levels(&scene(11), 2, 0.95);
    corrupt(&mut levels[0], 0.2, 7);
    let (out, _) = aggregate_level(&levels[0], &levels[1], 2.0, &params).unwrap();
    for (v, (o, f)) in out.estimates.iter().zip(&levels[0].estimates).enumerate() {
        let coarse = &levels[1].estimates[v].depth.data;
        for i in 0..o.depth.data.len() {
            if o.depth.data[i] != f.depth.data[i] {
                assert!(f.confidence.data[i] < 0.5);
                assert!(coarse.contains(&o.depth.data[i]));
            }
        }
    }
}

#[test]
fn level_mismatch_is_an_error() {
    let levels = gt_levels(&scene(12), 3, 0.95);
    let params = MultiMetricParams::default();
    assert!(matches!(aggregate_level(&levels[0], &levels[2], 2.0, &params), Err(Error::Config(_))));
    let mut short = levels[1].clone();
    short.estimates.pop();
    short.cameras.pop();
    assert!(matches!(aggregate_level(&levels[0], &short, 2.0, &params), Err(Error::Config(_))));
    assert!(aggregate_pyramid(&[], 2.0, &params).is_err());
}
