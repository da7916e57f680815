use std::path::Path;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rasm_core::data::{
    augment, generate_sample, load_image, load_mask, load_sample, luminance, random_crop, save_image, AugmentConfig,
    Dataset, ShadowSample, SynthConfig,
};
use rasm_core::Error;
use rasm_tensor::Tensor;

fn hard(config: SynthConfig) -> SynthConfig {
    SynthConfig { penumbra: 0.0, ..config }
}

#[test]
fn null_shadow_reproduces_ground_truth() {
    let cfg = hard(SynthConfig { gain: [1.0, 1.0], ambient: [0.0, 0.0], ..Default::default() });
    for i in 0..10 {
        let s = generate_sample(&cfg, i).unwrap();
        assert_eq!(s.shadow, s.gt);
        let covered = s.mask.data().iter().filter(|&&m| m == 1.0).count();
        assert!(covered > 0 && covered < s.mask.len());
    }
}

#[test]
fn half_gain_halves_shadowed_pixels() {
    let cfg = hard(SynthConfig { gain: [0.5, 0.5], ambient: [0.0, 0.0], ..Default::default() });
    for i in 0..10 {
        let s = generate_sample(&cfg, i).unwrap();
        let n = s.mask.len();
        for c in 0..3 {
            for p in 0..n {
                let (v, g) = (s.shadow.data()[c * n + p], s.gt.data()[c * n + p]);
                if s.mask.data()[p] == 1.0 {
                    assert_eq!(v, g / 2.0);
                } else {
                    assert_eq!(v, g);
                }
            }
        }
    }
}

#[test]
fn generation_is_deterministic() {
    let cfg = SynthConfig { seed: 42, ..Default::default() };
    let a = generate_sample(&cfg, 3).unwrap();
    let b = generate_sample(&cfg, 3).unwrap();
    assert_eq!(a, b);
    assert!(a.shadow.data().iter().zip(b.shadow.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert_ne!(a.gt, generate_sample(&cfg, 4).unwrap().gt);
    assert_ne!(a.gt, generate_sample(&SynthConfig { seed: 43, ..cfg }, 3).unwrap().gt);
}

#[test]
fn invalid_synth_configs_are_rejected() {
    let d = SynthConfig::default();
    for bad in [
        SynthConfig { gain: [0.5, 1.2], ..d.clone() },
        SynthConfig { gain: [0.7, 0.2], ..d.clone() },
        SynthConfig { ambient: [-0.1, 0.0], ..d.clone() },
        SynthConfig { penumbra: -1.0, ..d.clone() },
        SynthConfig { vertices: [2, 5], ..d.clone() },
        SynthConfig { textures: vec![], ..d.clone() },
        SynthConfig { height: 4, ..d },
    ] {
        assert!(matches!(generate_sample(&bad, 0), Err(Error::Config(_))), "{bad:?}");
    }
}

fn region_luminance(img: &Tensor<f32>, mask: &Tensor<f32>, inside: bool) -> f64 {
    let n = mask.len();
    let d = img.data();
    let (mut sum, mut k) = (0.0, 0);
    for p in (0..n).filter(|&p| (mask.data()[p] == 1.0) == inside) {
        sum += luminance([0, 1, 2].map(|c| d[c * n + p] as f64));
        k += 1;
    }
    sum / k as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn generated_samples_satisfy_invariants(seed in any::<u64>(), index in 0u64..1_000_000) {
        let cfg = SynthConfig { seed, height: 32, width: 32, ..Default::default() };
        let s = generate_sample(&cfg, index).unwrap();
        s.validate().unwrap();
        prop_assert_eq!(s.shadow.shape(), &[3, 32, 32]);
        prop_assert!(s.mask.data().iter().any(|&m| m == 1.0));
        prop_assert!(s.mask.data().iter().any(|&m| m == 0.0));
        // gains are at most 0.7: the shadowed region is darker than the same
        // region without the shadow
        let shadowed = region_luminance(&s.shadow, &s.mask, true);
        let lit = region_luminance(&s.gt, &s.mask, true);
        prop_assert!(shadowed < lit, "{} vs {}", shadowed, lit);
    }
}

fn random_image(c: usize, h: usize, w: usize, seed: u64) -> Tensor<f32> {
    Tensor::uniform(&[c, h, w], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn save_load_round_trip_within_quantization() {
    let dir = tempfile::tempdir().unwrap();
    for (k, name) in ["a.png", "b.ppm"].iter().enumerate() {
        let img = random_image(3, 13, 17, k as u64);
        let path = dir.path().join(name);
        save_image(&img, &path).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!(back.shape(), img.shape());
        assert!(img.max_abs_diff(&back).unwrap() <= 1.0 / 510.0 + 1e-7);
    }
    let gray = random_image(1, 5, 4, 9);
    for name in ["g.png", "g.pgm"] {
        let path = dir.path().join(name);
        save_image(&gray, &path).unwrap();
        assert!(gray.max_abs_diff(&load_image(&path).unwrap()).unwrap() <= 1.0 / 510.0 + 1e-7);
    }
    // round-half-up: 0.5/255 lands on 1
    let half = Tensor::new(vec![1, 1, 1], vec![0.5f32 / 255.0 + 1e-7]).unwrap();
    save_image(&half, &dir.path().join("h.png")).unwrap();
    assert_eq!(load_image(&dir.path().join("h.png")).unwrap().data(), &[1.0 / 255.0]);
}

#[test]
fn black_pixel_png_loads_as_zeros() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("black.png");
    image::RgbImage::new(1, 1).save(&path).unwrap();
    let t = load_image(&path).unwrap();
    assert_eq!(t.shape(), &[3, 1, 1]);
    assert_eq!(t.data(), &[0.0; 3]);
}

#[test]
fn io_errors_are_distinct() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.png");
    assert!(matches!(load_image(&missing), Err(Error::MissingFile(p)) if p == missing));

    let junk = dir.path().join("junk.png");
    std::fs::write(&junk, b"GIF89a not an image").unwrap();
    match load_image(&junk) {
        Err(e @ Error::Format { .. }) => assert!(e.to_string().contains("junk.png")),
        other => panic!("expected format error, got {other:?}"),
    }

    let truncated = dir.path().join("trunc.png");
    std::fs::write(&truncated, b"\x89PNG\r\n\x1a\n\0\0").unwrap();
    assert!(matches!(load_image(&truncated), Err(Error::Format { .. })));

    let deep = dir.path().join("deep.png");
    image::ImageBuffer::<image::Rgb<u16>, Vec<u16>>::new(2, 2).save(&deep).unwrap();
    assert!(matches!(load_image(&deep), Err(Error::UnsupportedBitDepth { .. })));

    let deep_pgm = dir.path().join("deep.pgm");
    let mut bytes = b"P5\n1 1\n65535\n".to_vec();
    bytes.extend_from_slice(&[0x12, 0x34]);
    std::fs::write(&deep_pgm, bytes).unwrap();
    assert!(matches!(load_image(&deep_pgm), Err(Error::UnsupportedBitDepth { .. })));

    assert!(matches!(save_image(&Tensor::<f32>::zeros(&[2, 3, 3]), &dir.path().join("x.png")), Err(Error::Dimension(_))));
}

#[test]
fn dataset_directory_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig { height: 24, width: 32, ..Default::default() };
    let ds = Dataset::synthetic(&cfg, 3).unwrap();
    ds.save(dir.path()).unwrap();
    let back = Dataset::load_dir(dir.path()).unwrap();
    assert_eq!(back.len(), 3);
    for (a, b) in ds.samples.iter().zip(&back.samples) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.mask, b.mask);
        assert!(a.shadow.max_abs_diff(&b.shadow).unwrap() <= 1.0 / 510.0 + 1e-7);
        assert!(a.gt.max_abs_diff(&b.gt).unwrap() <= 1.0 / 510.0 + 1e-7);
    }
    let s = load_sample(dir.path(), "synth_000001.png").unwrap();
    assert_eq!(s.name, "synth_000001");
    assert!(load_mask(&dir.path().join("mask/synth_000001.png")).unwrap().data().iter().all(|&v| v == 0.0 || v == 1.0));
    assert!(matches!(load_sample(dir.path(), "absent.png"), Err(Error::MissingFile(_))));
    assert!(matches!(Dataset::load_dir(Path::new("/definitely/not/here")), Err(Error::MissingFile(_))));
}

/// A sample whose shadow encodes each pixel's position, so any remapping
/// of the output can be traced back to its source pixel.
fn labelled_sample(h: usize, w: usize, seed: u64) -> ShadowSample {
    let n = h * w;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mask: Vec<f32> = (0..n).map(|_| rng.random_bool(0.4) as u8 as f32).collect();
    let ids: Vec<f32> = (0..3 * n).map(|i| (i % n) as f32 / n as f32).collect();
    let gt: Vec<f32> = (0..3 * n).map(|i| ((i % n) as f32 / n as f32 + 0.5) / 1.5).collect();
    ShadowSample {
        name: "lab".into(),
        shadow: Tensor::new(vec![3, h, w], ids).unwrap(),
        mask: Tensor::new(vec![1, h, w], mask).unwrap(),
        gt: Tensor::new(vec![3, h, w], gt).unwrap(),
    }
}

/// Checks that `out` is a pure pixel rearrangement of `src` shared by all
/// three images, returning the source index of every output pixel.
fn trace(src: &ShadowSample, out: &ShadowSample) -> Vec<usize> {
    let n = src.mask.len();
    assert_eq!(out.mask.len(), n);
    let mut seen = vec![false; n];
    (0..n)
        .map(|p| {
            let id = (out.shadow.data()[p] * n as f32).round() as usize;
            assert!(!seen[id], "pixel {id} used twice");
            seen[id] = true;
            for c in 0..3 {
                assert_eq!(out.shadow.data()[c * n + p], src.shadow.data()[c * n + id]);
                assert_eq!(out.gt.data()[c * n + p], src.gt.data()[c * n + id]);
            }
            assert_eq!(out.mask.data()[p], src.mask.data()[id]);
            id
        })
        .collect()
}

#[test]
fn augmentation_identity_and_involution() {
    let s = labelled_sample(6, 9, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert_eq!(augment(&s, None, &AugmentConfig::none(), &mut rng).unwrap(), s);
    let h_only = AugmentConfig { hflip: 1.0, ..AugmentConfig::none() };
    let once = augment(&s, None, &h_only, &mut rng).unwrap();
    assert_ne!(once, s);
    let ids = trace(&s, &once);
    for (p, id) in ids.iter().enumerate() {
        let (y, x) = (p / 9, p % 9);
        assert_eq!(*id, y * 9 + (8 - x));
    }
    assert_eq!(augment(&once, None, &h_only, &mut rng).unwrap(), s);
    let v_only = AugmentConfig { vflip: 1.0, ..AugmentConfig::none() };
    let vv = augment(&augment(&s, None, &v_only, &mut rng).unwrap(), None, &v_only, &mut rng).unwrap();
    assert_eq!(vv, s);
}

#[test]
fn rotation_transposes_shape() {
    let s = labelled_sample(4, 7, 2);
    let rot = AugmentConfig { rotate: 1.0, ..AugmentConfig::none() };
    let mut shapes = std::collections::BTreeSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..40 {
        let out = augment(&s, None, &rot, &mut rng).unwrap();
        trace(&s, &out);
        shapes.insert(out.mask.shape().to_vec());
    }
    assert_eq!(shapes.into_iter().collect::<Vec<_>>(), vec![vec![1, 4, 7], vec![1, 7, 4]]);
}

proptest! {
    #[test]
    fn geometric_augmentation_is_shared_by_the_triple(seed in any::<u64>(), h in 1usize..9, w in 1usize..9) {
        let s = labelled_sample(h, w, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = augment(&s, None, &AugmentConfig::default(), &mut rng).unwrap();
        trace(&s, &out);
    }
}

#[test]
fn mixup_and_hsv_extensions() {
    let cfg = SynthConfig { height: 16, width: 16, ..Default::default() };
    let (a, b) = (generate_sample(&cfg, 0).unwrap(), generate_sample(&cfg, 1).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mixup = AugmentConfig { mixup: true, ..AugmentConfig::none() };
    let m = augment(&a, Some(&b), &mixup, &mut rng).unwrap();
    m.validate().unwrap();
    for p in 0..256 {
        assert_eq!(m.mask.data()[p], a.mask.data()[p].max(b.mask.data()[p]));
    }
    for (i, v) in m.shadow.data().iter().enumerate() {
        let (x, y) = (a.shadow.data()[i], b.shadow.data()[i]);
        assert!(*v >= x.min(y) - 1e-6 && *v <= x.max(y) + 1e-6);
    }
    // a single lambda is shared by every pixel and by shadow and gt
    let lambdas: Vec<f32> = (0..768)
        .filter_map(|i| {
            let (x, y) = (a.gt.data()[i], b.gt.data()[i]);
            ((x - y).abs() > 0.1).then(|| (m.gt.data()[i] - y) / (x - y))
        })
        .collect();
    assert!(lambdas.iter().all(|l| (l - lambdas[0]).abs() < 1e-4));
    let mismatched = generate_sample(&SynthConfig { height: 8, ..cfg }, 0).unwrap();
    assert!(augment(&a, Some(&mismatched), &mixup, &mut rng).is_err());

    let hsv = AugmentConfig { hsv: true, ..AugmentConfig::none() };
    let same = ShadowSample { shadow: a.gt.clone(), ..a.clone() };
    let j = augment(&same, None, &hsv, &mut rng).unwrap();
    j.validate().unwrap();
    assert_eq!(j.shadow, j.gt);
    assert_eq!(j.mask, a.mask);
    assert_ne!(j.gt, a.gt);
    let gray = ShadowSample { gt: Tensor::full(&[3, 16, 16], 0.4), shadow: Tensor::full(&[3, 16, 16], 0.2), ..a };
    let g = augment(&gray, None, &hsv, &mut rng).unwrap();
    assert!(g.gt.max_abs_diff(&gray.gt).unwrap() < 1e-6);
    assert!(g.shadow.max_abs_diff(&gray.shadow).unwrap() < 1e-6);
}

#[test]
fn crops() {
    let s = labelled_sample(128, 128, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    assert_eq!(random_crop(&s, 128, 128, &mut rng).unwrap(), s);
    let c = random_crop(&s, 64, 64, &mut rng).unwrap();
    assert_eq!(c.shadow.shape(), &[3, 64, 64]);
    assert_eq!(c.mask.shape(), &[1, 64, 64]);
    assert_eq!(c.gt.shape(), &[3, 64, 64]);
    let n = 128 * 128;
    let origin = (c.shadow.data()[0] * n as f32).round() as usize;
    let (top, left) = (origin / 128, origin % 128);
    for y in 0..64 {
        for x in 0..64 {
            let src = (top + y) * 128 + left + x;
            assert_eq!(c.shadow.data()[y * 64 + x], s.shadow.data()[src]);
            assert_eq!(c.mask.data()[y * 64 + x], s.mask.data()[src]);
            assert_eq!(c.gt.data()[y * 64 + x], s.gt.data()[src]);
        }
    }
    let again = random_crop(&s, 64, 64, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let first = random_crop(&s, 64, 64, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(again, first);
    assert!(matches!(random_crop(&s, 129, 64, &mut rng), Err(Error::Dimension(_))));
}
