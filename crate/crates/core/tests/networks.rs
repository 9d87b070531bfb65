use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sweepfuse_core::networks::{Model, FEATURE_CHANNELS};
use sweepfuse_core::Error;
use sweepfuse_tensor::{Tape, Tensor};

fn random<T: sweepfuse_tensor::Element>(shape: Vec<usize>, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| T::lit(rng.gen_range(-1.0..1.0)))
}

#[test]
fn parameter_counts_are_frozen() {
    // Hand count of the documented layer tables (3×3 kernels, group-norm
    // scale and shift per channel, biases only on plain convs).
    let m = Model::<f32>::new(0).unwrap();
    assert_eq!(m.store.scalar_count("featnet."), 15960);
    assert_eq!(m.store.scalar_count("panet."), 5137);
    assert_eq!(m.store.scalar_count("vanet."), 894);
    assert_eq!(m.store.scalar_count("regnet."), 76505);
    assert_eq!(m.store.scalar_count(""), 15960 + 5137 + 894 + 76505);
    let total: usize = m.summary().iter().map(|r| r.count).sum();
    assert_eq!(total, m.store.scalar_count(""));
}

#[test]
fn attention_layer_trace() {
    let m = Model::<f32>::new(0).unwrap();
    let shape = |name: &str| m.summary().into_iter().find(|r| r.name == name).unwrap().shape;
    assert_eq!(shape("panet.conv0.weight"), vec![16, 2, 3, 3]);
    assert_eq!(shape("panet.res.conv_a.weight"), vec![16, 16, 3, 3]);
    assert_eq!(shape("panet.res.conv_b.weight"), vec![16, 16, 3, 3]);
    assert_eq!(shape("panet.out.weight"), vec![1, 16, 3, 3]);
    assert_eq!(shape("vanet.conv0.weight"), vec![1, 32, 3, 3, 3]);
    assert_eq!(shape("vanet.out.weight"), vec![1, 1, 3, 3, 3]);
}

#[test]
fn names_carry_block_prefixes() {
    let m = Model::<f32>::new(0).unwrap();
    for row in m.summary() {
        assert!(["featnet.", "panet.", "vanet.", "regnet."].iter().any(|p| row.name.starts_with(p)), "{}", row.name);
    }
}

#[test]
fn feature_extent_at_paper_resolution() {
    let m = Model::<f32>::new(1).unwrap();
    let mut t = Tape::new();
    let x = t.constant(random(vec![3, 512, 640], 2));
    let f = m.extract_features(&mut t, x).unwrap();
    assert_eq!(t.shape(f), &[FEATURE_CHANNELS, 128, 160]);
}

#[test]
fn zero_image_gives_finite_features() {
    let m = Model::<f32>::new(1).unwrap();
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros(vec![3, 32, 48]));
    let f = m.extract_features(&mut t, x).unwrap();
    assert_eq!(t.shape(f), &[32, 8, 12]);
    assert!(t.value(f).data().iter().all(|v| v.is_finite()));
}

#[test]
fn indivisible_extents_are_rejected() {
    let m = Model::<f32>::new(1).unwrap();
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros(vec![3, 36, 48]));
    assert!(matches!(m.extract_features(&mut t, x), Err(Error::Config(_))));
    let c = t.constant(Tensor::zeros(vec![32, 12, 8, 8]));
    assert!(matches!(m.regularize(&mut t, c), Err(Error::Config(_))));
    let bad = t.constant(Tensor::zeros(vec![3, 8, 8]));
    assert!(matches!(m.pa_weights(&mut t, bad), Err(Error::Config(_))));
    let bad = t.constant(Tensor::zeros(vec![16, 4, 8, 8]));
    assert!(matches!(m.va_weights(&mut t, bad), Err(Error::Config(_))));
}

#[test]
fn attention_lies_strictly_inside_unit_interval() {
    let m = Model::<f32>::new_dense(3).unwrap();
    let mut t = Tape::new();
    for seed in 0..3 {
        let f = t.constant(random::<f32>(vec![2, 12, 10], seed).map(|v| v * 50.0));
        let w = m.pa_weights(&mut t, f).unwrap();
        assert_eq!(t.shape(w), &[1, 12, 10]);
        assert!(t.value(w).data().iter().all(|&v| v > 0.0 && v < 1.0));
        let v = t.constant(random::<f32>(vec![32, 4, 5, 6], seed + 10));
        let w = m.va_weights(&mut t, v).unwrap();
        assert_eq!(t.shape(w), &[1, 4, 5, 6]);
        assert!(t.value(w).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}

#[test]
fn voxelwise_attention_shape_contract() {
    let m = Model::<f32>::new(0).unwrap();
    let mut t = Tape::new();
    let v = t.constant(random(vec![32, 32, 40, 32], 4));
    let w = m.va_weights(&mut t, v).unwrap();
    assert_eq!(t.shape(w), &[1, 32, 40, 32]);
}

#[test]
fn regularizer_shape_and_uniform_start() {
    let m = Model::<f32>::new(0).unwrap();
    let mut t = Tape::new();
    let c = t.constant(random(vec![32, 32, 40, 48], 5));
    let logits = m.regularize(&mut t, c).unwrap();
    assert_eq!(t.shape(logits), &[32, 40, 48]);
    let p = t.softmax(logits, 0).unwrap();
    assert!(t.value(p).data().iter().all(|&v| v == 1.0 / 32.0));
}

#[test]
fn zero_initialized_attention_is_one_half() {
    let m = Model::<f64>::new(0).unwrap();
    let mut t = Tape::new();
    let f = t.constant(random(vec![2, 8, 8], 6));
    let w = m.pa_weights(&mut t, f).unwrap();
    assert!(t.value(w).data().iter().all(|&v| v == 0.5));
}

#[test]
fn forward_passes_are_bitwise_repeatable() {
    let m = Model::<f32>::new_dense(7).unwrap();
    let run = || {
        let mut t = Tape::new();
        let x = t.constant(random(vec![3, 32, 32], 8));
        let f = m.extract_features(&mut t, x).unwrap();
        let v = t.constant(random(vec![32, 8, 8, 8], 9));
        let l = m.regularize(&mut t, v).unwrap();
        (t.value(f).clone(), t.value(l).clone())
    };
    assert_eq!(run(), run());
}

/// Places a small random patch at `(ox, oy)` in an otherwise zero map.
fn patch_input(ox: usize, oy: usize) -> Tensor<f64> {
    let patch = random::<f64>(vec![2, 4, 4], 10);
    let mut out = Tensor::zeros(vec![2, 24, 24]);
    for c in 0..2 {
        for y in 0..4 {
            for x in 0..4 {
                out.data_mut()[c * 576 + (oy + y) * 24 + ox + x] = patch.at(&[c, y, x]);
            }
        }
    }
    out
}

#[test]
fn pixelwise_attention_is_translation_equivariant() {
    // The patch and everything it influences (four 3×3 layers) stay clear of
    // the zero-padded border in both placements, so the group-norm
    // statistics see the same values and interior outputs shift exactly.
    let m = Model::<f64>::new_dense(11).unwrap();
    let mut t = Tape::new();
    let a = t.constant(patch_input(8, 8));
    let b = t.constant(patch_input(11, 10));
    let wa = m.pa_weights(&mut t, a).unwrap();
    let wb = m.pa_weights(&mut t, b).unwrap();
    let (va, vb) = (t.value(wa), t.value(wb));
    let mut checked = 0;
    for y in 4..18 {
        for x in 4..17 {
            let p = va.at(&[0, y, x]);
            let q = vb.at(&[0, y + 2, x + 3]);
            assert!((p - q).abs() < 1e-12, "({x},{y}) {p} {q}");
            checked += 1;
        }
    }
    assert!(checked > 150);
}

#[test]
fn cast_and_with_store_keep_values() {
    let m = Model::<f32>::new_dense(12).unwrap();
    let d: Model<f64> = m.cast();
    for (a, b) in m.store.iter().zip(d.store.iter()) {
        assert_eq!(a.name, b.name);
        assert!(a.value.data().iter().zip(b.value.data()).all(|(x, y)| *x as f64 == *y));
    }
    let other = Model::<f32>::new_dense(13).unwrap();
    let swapped = m.with_store(&other.store);
    assert_eq!(swapped.store.iter().next().unwrap().value, other.store.iter().next().unwrap().value);
}
