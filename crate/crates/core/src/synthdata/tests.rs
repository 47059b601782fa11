use proptest::prelude::*;

use super::*;
use crate::probe::probe_r2;

fn small_factors() -> FactorConfig {
    FactorConfig {
        reference_scenes: 64,
        ..Default::default()
    }
}

#[test]
fn scene_is_deterministic() {
    let cfg = GenerationConfig::default();
    assert_eq!(generate_scene(0, &cfg).unwrap(), generate_scene(0, &cfg).unwrap());
}

#[test]
fn single_object_label_mask() {
    let cfg = GenerationConfig::with_objects(1);
    for seed in 0..20 {
        let s = generate_scene(seed, &cfg).unwrap();
        assert_eq!(s.label_mask, s.gt_masks[0]);
        assert_eq!(s.label.len(), 2);
    }
}

#[test]
fn invalid_config() {
    let mut cfg = GenerationConfig::with_objects(5);
    assert!(generate_scene(0, &cfg).is_err());
    cfg = GenerationConfig {
        height: 16,
        ..Default::default()
    };
    assert!(generate_scene(0, &cfg).is_err());
}

#[test]
fn noiseless_state_inverts() {
    let gen = GenerationConfig::default();
    let model = FactorModel::new(3, &small_factors(), &gen).unwrap();
    assert!(condition_number(model.mixing_matrix()) <= 100.0);
    let scene = generate_scene(11, &gen).unwrap();
    let et = model.text_factor(&scene.label).unwrap();
    let ev = model.visual_factor(&scene).unwrap();
    let x = model.mix(&et, &ev);
    let pinv = model.mixing_matrix().clone().pseudo_inverse(1e-12).unwrap();
    let z = pinv * nalgebra::DVector::from_vec(x);
    for (a, b) in z.iter().zip(et.iter().chain(&ev)) {
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }
    let st = model.synthesize(&scene, 5, 0.0).unwrap();
    assert_eq!(st.e_text, et.iter().map(|&v| v as f32).collect::<Vec<_>>());
}

#[test]
fn noise_seed_changes_only_noise() {
    let gen = GenerationConfig::default();
    let model = FactorModel::new(3, &small_factors(), &gen).unwrap();
    let scene = generate_scene(4, &gen).unwrap();
    let a = model.synthesize(&scene, 1, 0.05).unwrap();
    let b = model.synthesize(&scene, 2, 0.05).unwrap();
    assert_eq!(a.e_text, b.e_text);
    assert_eq!(a.e_vis, b.e_vis);
    assert_ne!(a.x_fused, b.x_fused);
    let clean = model.synthesize(&scene, 1, 0.0).unwrap();
    for (n, c) in a.x_fused.iter().zip(&clean.x_fused) {
        assert!(((n - c) as f64).abs() <= 3.0 * 0.05 + 1e-5);
    }
    assert!(model.synthesize(&scene, 1, -1.0).is_err());
}

fn as_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

#[test]
fn factors_are_identifiable() {
    let factors = FactorConfig {
        reference_scenes: 128,
        sigma_noise: 0.05,
        ..Default::default()
    };
    let (ds, _) = generate_dataset(21, 1200, &GenerationConfig::default(), &factors).unwrap();
    let (train, eval) = ds.split(200).unwrap();
    let col = |s: &[Sample], f: fn(&FusedHiddenState) -> &Vec<f32>| -> Vec<Vec<f64>> {
        s.iter().map(|x| as_f64(f(&x.state))).collect()
    };
    let (xt, xe) = (col(train, |s| &s.x_fused), col(eval, |s| &s.x_fused));
    let text = probe_r2(&xt, &col(train, |s| &s.e_text), &xe, &col(eval, |s| &s.e_text)).unwrap();
    let vis = probe_r2(&xt, &col(train, |s| &s.e_vis), &xe, &col(eval, |s| &s.e_vis)).unwrap();
    assert!(text >= 0.95, "text {text}");
    assert!(vis >= 0.95, "vis {vis}");
}

#[test]
fn low_noise_text_recovery() {
    let (ds, _) = generate_dataset(8, 1000, &GenerationConfig::default(), &small_factors()).unwrap();
    let x: Vec<Vec<f64>> = ds.samples.iter().map(|s| as_f64(&s.state.x_fused)).collect();
    let y: Vec<Vec<f64>> = ds.samples.iter().map(|s| as_f64(&s.state.e_text)).collect();
    let r2 = probe_r2(&x, &y, &x, &y).unwrap();
    assert!(r2 >= 0.99, "{r2}");
}

fn tiny_dataset(n: usize) -> Dataset {
    let gen = GenerationConfig {
        height: 32,
        width: 32,
        ..Default::default()
    };
    let factors = FactorConfig {
        dim: 16,
        grid: 2,
        reference_scenes: 16,
        ..Default::default()
    };
    generate_dataset(1, n, &gen, &factors).unwrap().0
}

#[test]
fn file_round_trip() {
    let ds = tiny_dataset(10);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.bin");
    ds.write(&path).unwrap();
    let back = Dataset::read(&path).unwrap();
    assert_eq!(back, ds);
    assert_eq!(back.to_bytes().unwrap(), ds.to_bytes().unwrap());
}

#[test]
fn corrupt_magic() {
    let mut bytes = tiny_dataset(1).to_bytes().unwrap();
    bytes[0] = b'X';
    match Dataset::from_bytes(&bytes) {
        Err(crate::Error::Format { offset, .. }) => assert_eq!(offset, 0),
        other => panic!("{other:?}"),
    }
}

#[test]
fn every_truncation_is_rejected() {
    let bytes = tiny_dataset(2).to_bytes().unwrap();
    for cut in 0..bytes.len() {
        assert!(matches!(
            Dataset::from_bytes(&bytes[..cut]),
            Err(crate::Error::Format { .. })
        ));
    }
}

#[test]
fn missing_file_is_io_error() {
    let err = Dataset::read(std::path::Path::new("/nonexistent/ds.bin")).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("/nonexistent/ds.bin"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn scene_invariants(seed in any::<u64>(), n in 1usize..=4) {
        let s = generate_scene(seed, &GenerationConfig::with_objects(n)).unwrap();
        prop_assert_eq!(s.objects.len(), n);
        prop_assert!(s.image.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(s.gt_masks.iter().all(|m| m.iter().filter(|&&b| b == 1).count() >= MIN_VISIBLE));
        prop_assert!(vocab::is_grammatical(&s.label));
        let hits: Vec<usize> = (0..n).filter(|&i| vocab::matches(&s.objects[i], &s.label)).collect();
        prop_assert_eq!(hits, vec![s.target]);
        for p in 0..s.pixels() {
            let any = s.gt_masks.iter().any(|m| m[p] == 1);
            prop_assert!(s.label_mask[p] == 0 || any);
        }
        prop_assert_eq!(&s.label_mask, &s.gt_masks[s.target]);
    }

    #[test]
    fn byte_flips_never_panic(pos in 0usize..4000, val in any::<u8>()) {
        let mut bytes = tiny_dataset(1).to_bytes().unwrap();
        let p = pos % bytes.len();
        bytes[p] = val;
        let _ = Dataset::from_bytes(&bytes);
    }
}
