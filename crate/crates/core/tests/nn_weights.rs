use std::path::PathBuf;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stainkit::nn::arch::TensorRole;
use stainkit::nn::spectral::{spectral_norm, tensor_spectral_norm};
use stainkit::nn::weights::{rewrite_raw, SPECTRAL_LIMIT};
use stainkit::nn::{
    discriminator_forward, identity_generator, load_weights, random_weights, save_weights, to_model_space,
    ForwardOptions, Generator, GeneratorWeights, NetworkArch, NormKind, Parts, WeightTensor,
};
use stainkit::ssim::{ssim_rgb, SsimParams};
use stainkit::synthetic::{reference_stains, tissue_image};
use stainkit::{Error, RgbImage};

fn small_arch() -> NetworkArch {
    NetworkArch {
        depth: 3,
        base_channels: 8,
        attention_min_res: 8,
        attention_pool: 2,
        norm: NormKind::Batch,
    }
}

fn reference_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/reference_weights.saas")
}

fn noise_image(w: usize, h: usize, seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    RgbImage::from_fn(w, h, |_, _| [rng.gen(), rng.gen(), rng.gen()]).unwrap()
}

#[test]
fn save_load_round_trip_is_bitwise() {
    let w = random_weights(small_arch(), Parts::BOTH, 1, 0.3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.saas");
    save_weights(&w, &path).unwrap();
    let back = load_weights(&path).unwrap();
    assert_eq!(back, w);
    for (name, t) in w.tensors() {
        let b = back.get(name).unwrap();
        let bits = |t: &WeightTensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(t), bits(b), "{name}");
    }
    assert_eq!(std::fs::read(&path).unwrap(), back.to_bytes());
}

#[test]
fn every_single_byte_corruption_is_rejected() {
    let bytes = random_weights(small_arch(), Parts::GENERATOR, 2, 0.0).unwrap().to_bytes();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..300 {
        let i = rng.gen_range(0..bytes.len());
        let mut bad = bytes.clone();
        bad[i] ^= 1 << rng.gen_range(0..8);
        assert!(GeneratorWeights::from_bytes(&bad).is_err(), "flip at {i} accepted");
    }
    for cut in [0, 3, 12, bytes.len() / 2, bytes.len() - 1] {
        assert!(GeneratorWeights::from_bytes(&bytes[..cut]).is_err());
    }
}

#[test]
fn renamed_tensor_reports_missing_name() {
    let bytes = random_weights(small_arch(), Parts::GENERATOR, 4, 0.0).unwrap().to_bytes();
    let bad = rewrite_raw(&bytes, |e| {
        let t = e.iter_mut().find(|(n, _)| n == "gen.enc1.conv.bias").unwrap();
        t.0 = "gen.enc1.conv.bais".into();
    })
    .unwrap();
    match GeneratorWeights::from_bytes(&bad) {
        Err(Error::MissingTensor(n)) => assert_eq!(n, "gen.enc1.conv.bias"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn duplicate_and_extra_tensors_rejected() {
    let bytes = random_weights(small_arch(), Parts::GENERATOR, 4, 0.0).unwrap().to_bytes();
    let dup = rewrite_raw(&bytes, |e| {
        let first = e[0].clone();
        e.push(first);
    })
    .unwrap();
    assert!(matches!(GeneratorWeights::from_bytes(&dup), Err(Error::DuplicateTensor(_))));
    let extra = rewrite_raw(&bytes, |e| {
        e.push(("gen.enc9.conv.bias".into(), WeightTensor::new(vec![1], vec![0.0]).unwrap()))
    })
    .unwrap();
    assert!(matches!(GeneratorWeights::from_bytes(&extra), Err(Error::UnexpectedTensor(_))));
}

#[test]
fn non_finite_value_rejected() {
    let bytes = random_weights(small_arch(), Parts::GENERATOR, 5, 0.0).unwrap().to_bytes();
    for bad_value in [f32::NAN, f32::INFINITY] {
        let bad = rewrite_raw(&bytes, |e| {
            let t = e.iter_mut().find(|(n, _)| n == "gen.dec1.norm.running_var").unwrap();
            let mut data = t.1.data().to_vec();
            data[0] = bad_value;
            t.1 = WeightTensor::new(t.1.shape().to_vec(), data).unwrap();
        })
        .unwrap();
        match GeneratorWeights::from_bytes(&bad) {
            Err(Error::NonFinite(n)) => assert_eq!(n, "gen.dec1.norm.running_var"),
            other => panic!("unexpected {other:?}"),
        }
    }
}

#[test]
fn spectral_norm_enforced_at_load() {
    let bytes = random_weights(small_arch(), Parts::BOTH, 6, 0.0).unwrap().to_bytes();
    for target in ["gen.enc1.conv.weight", "gen.dec2.deconv.weight", "disc.blk2.attn.wv"] {
        let bad = rewrite_raw(&bytes, |e| {
            let t = e.iter_mut().find(|(n, _)| n == target).unwrap();
            let data = t.1.data().iter().map(|v| v * 1.01).collect();
            t.1 = WeightTensor::new(t.1.shape().to_vec(), data).unwrap();
        })
        .unwrap();
        match GeneratorWeights::from_bytes(&bad) {
            Err(Error::SpectralNormViolation { name, sigma }) => {
                assert_eq!(name, target);
                assert!(sigma > SPECTRAL_LIMIT);
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}

#[test]
fn spectral_normalization_diag_and_idempotence() {
    let mut d = vec![2.0, 0.0, 0.0, 1.0];
    let s = stainkit::nn::spectral::normalize_in_place(TensorRole::Projection, &[2, 2], &mut d);
    assert!((s - 2.0).abs() < 1e-12);
    for (got, want) in d.iter().zip([1.0, 0.0, 0.0, 0.5]) {
        assert!((got - want).abs() < 1e-12);
    }

    let w = random_weights(small_arch(), Parts::BOTH, 7, 0.2).unwrap();
    let once = w.apply_spectral_normalization();
    let twice = once.apply_spectral_normalization();
    for (name, t) in once.tensors() {
        let u = twice.get(name).unwrap();
        let diff = t.data().iter().zip(u.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(diff < 1e-4, "{name}: {diff}");
    }
    for (name, sigma) in once.spectral_norms() {
        assert!((sigma - 1.0).abs() < 1e-4, "{name}: {sigma}");
    }
}

#[test]
fn power_iteration_matches_dense_svd() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for trial in 0..50 {
        let (r, c) = if trial % 2 == 0 { (8, 8) } else { (rng.gen_range(1..10), rng.gen_range(1..30)) };
        let data: Vec<f64> = (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let oracle = DMatrix::from_row_slice(r, c, &data)
            .singular_values()
            .iter()
            .copied()
            .fold(0.0, f64::max);
        let est = spectral_norm(&data, r, c);
        assert!((est - oracle).abs() / oracle < 1e-4, "{r}x{c}: {est} vs {oracle}");
    }
}

#[test]
fn deconv_spectral_view_matches_svd_of_permuted_matrix() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (cin, cout) = (6, 4);
    let data: Vec<f64> = (0..cin * cout * 16).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let m = DMatrix::from_fn(cout, cin * 16, |o, col| data[((col / 16) * cout + o) * 16 + col % 16]);
    let oracle = m.singular_values().max();
    let est = tensor_spectral_norm(TensorRole::Deconv, &[cin, cout, 4, 4], &data);
    assert!((est - oracle).abs() / oracle < 1e-4);
}

#[test]
fn generator_preserves_shape_and_is_deterministic() {
    let w = random_weights(small_arch(), Parts::GENERATOR, 10, 0.5).unwrap();
    let img = noise_image(48, 32, 11);
    let g = Generator::new(&w).unwrap();
    let a = g.forward_image(&img).unwrap();
    let b = stainkit::nn::generator_forward(&img, &w).unwrap();
    assert_eq!(a.dims(), (48, 32));
    assert_eq!(a, b);
    let err = g.forward_image(&noise_image(44, 32, 1)).unwrap_err();
    assert!(matches!(err, Error::InvalidParams(_)));
}

#[test]
fn default_arch_maps_256_to_256() {
    let arch = NetworkArch {
        base_channels: 8,
        ..NetworkArch::default()
    };
    let w = random_weights(arch, Parts::GENERATOR, 12, 0.1).unwrap();
    let out = stainkit::nn::generator_forward(&noise_image(256, 256, 13), &w).unwrap();
    assert_eq!(out.dims(), (256, 256));
}

#[test]
fn zero_attention_gain_equals_removed_attention() {
    let w = random_weights(small_arch(), Parts::GENERATOR, 14, 0.0).unwrap();
    let g = Generator::new(&w).unwrap();
    let x = to_model_space(&noise_image(32, 32, 15));
    let with = g.forward_tensor(&x).unwrap();
    let without = g
        .forward_with(
            &x,
            ForwardOptions {
                attention: false,
                drop_skip: None,
            },
        )
        .unwrap();
    assert_eq!(with, without);

    let active = Generator::new(&random_weights(small_arch(), Parts::GENERATOR, 14, 0.8).unwrap()).unwrap();
    assert!(active.forward_tensor(&x).unwrap().max_abs_diff(&with) > 0.0);
}

#[test]
fn dropping_a_skip_changes_output() {
    let w = random_weights(small_arch(), Parts::GENERATOR, 16, 0.2).unwrap();
    let g = Generator::new(&w).unwrap();
    let x = to_model_space(&noise_image(32, 32, 17));
    let full = g.forward_tensor(&x).unwrap();
    for level in 0..small_arch().depth - 1 {
        let cut = g
            .forward_with(
                &x,
                ForwardOptions {
                    attention: true,
                    drop_skip: Some(level),
                },
            )
            .unwrap();
        assert!(cut.max_abs_diff(&full) > 1e-6, "skip {level} not wired");
    }
}

#[test]
fn discriminator_map_is_31_by_31_at_256() {
    let w = random_weights(small_arch(), Parts::BOTH, 18, 0.3).unwrap();
    let (map, mean) = discriminator_forward(&noise_image(256, 256, 19), &w).unwrap();
    assert_eq!(map.shape(), &[31, 31]);
    let direct = map.data().iter().sum::<f64>() / map.len() as f64;
    assert!((mean - direct).abs() < 1e-12);
    let gen_only = random_weights(small_arch(), Parts::GENERATOR, 18, 0.3).unwrap();
    assert!(discriminator_forward(&noise_image(64, 64, 1), &gen_only).is_err());
}

#[test]
fn instance_and_no_norm_variants_run() {
    for norm in [NormKind::Instance, NormKind::None] {
        let arch = NetworkArch { norm, ..small_arch() };
        let w = random_weights(arch, Parts::BOTH, 20, 0.1).unwrap();
        let back = GeneratorWeights::from_bytes(&w.to_bytes()).unwrap();
        assert_eq!(back.arch().norm, norm);
        let out = stainkit::nn::generator_forward(&noise_image(16, 16, 21), &back).unwrap();
        assert_eq!(out.dims(), (16, 16));
    }
}

#[test]
fn identity_generator_reproduces_tissue() {
    let arch = NetworkArch {
        depth: 3,
        base_channels: 60,
        attention_min_res: 16,
        attention_pool: 2,
        norm: NormKind::Batch,
    };
    let w = identity_generator(arch, Parts::GENERATOR, 22).unwrap();
    let (img, _) = tissue_image(64, 64, &reference_stains(), 23).unwrap();
    let out = stainkit::nn::generator_forward(&img, &w).unwrap();
    let worst = img.data().iter().zip(out.data()).map(|(a, b)| (*a as i32 - *b as i32).abs()).max().unwrap();
    assert!(worst <= 4, "worst channel error {worst}");
    assert!(ssim_rgb(&img, &out, &SsimParams::default()).unwrap() > 0.99);
}

#[test]
fn reference_archive_is_reproducible_and_identity_like() {
    let w = load_weights(&reference_path()).unwrap();
    let arch = *w.arch();
    let rebuilt = identity_generator(arch, Parts::GENERATOR, 2024).unwrap();
    assert_eq!(rebuilt.to_bytes(), std::fs::read(reference_path()).unwrap());
    let (img, _) = tissue_image(256, 256, &reference_stains(), 24).unwrap();
    let out = stainkit::nn::generator_forward(&img, &w).unwrap();
    assert_eq!(out.dims(), (256, 256));
    assert!(ssim_rgb(&img, &out, &SsimParams::default()).unwrap() > 0.95);
}
