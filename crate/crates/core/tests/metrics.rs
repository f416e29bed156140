mod common;

use gvtnet::metrics::{
    evaluate_pair, psnr, self_ensemble, ssim, Dihedral, EvalOptions, ImageMetrics, MetricReport, NearestUpsampler,
    SrModel,
};
use gvtnet::{GvtNet, NetConfig, Tensor};
use proptest::prelude::*;

fn noisy(base: &Tensor, amp: f64, seed: u64) -> Tensor {
    let noise = common::uniform(&mut common::rng(seed), base.shape(), -amp, amp);
    Tensor::from_fn(base.shape(), |i| base.data()[i] + noise.data()[i])
}

#[test]
fn psnr_examples() {
    let a = common::uniform(&mut common::rng(1), &[3, 8, 8], 0.2, 0.8);
    assert_eq!(psnr(&a, &a, 1.0).unwrap(), 99.0);
    let shifted = a.map(|v| v + 0.1);
    assert!((psnr(&a, &shifted, 1.0).unwrap() - 20.0).abs() < 1e-9);
    let b = noisy(&a, 0.05, 2);
    assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
    assert!(psnr(&a, &Tensor::zeros(&[3, 8, 7]), 1.0).is_err());
}

#[test]
fn psnr_falls_as_noise_grows() {
    let a = common::uniform(&mut common::rng(3), &[3, 16, 16], 0.0, 1.0);
    let values: Vec<f64> = [0.01, 0.05, 0.1]
        .iter()
        .map(|&amp| psnr(&a, &noisy(&a, amp, 4), 1.0).unwrap())
        .collect();
    assert!(values[0] > values[1] && values[1] > values[2], "{values:?}");
}

#[test]
fn ssim_matches_reference_on_random_pairs() {
    for (seed, h, w) in [(5, 11, 11), (6, 16, 23), (7, 32, 32)] {
        let a = common::uniform(&mut common::rng(seed), &[3, h, w], 0.0, 1.0);
        let b = noisy(&a, 0.2, seed + 100).map(|v| v.clamp(0.0, 1.0));
        let reference = common::ssim_reference(&common::luma(&a), &common::luma(&b), h, w, 1.0);
        let got = ssim(&a, &b, 1.0).unwrap();
        assert!((got - reference).abs() < 1e-9, "{got} vs {reference}");
        assert!(got <= 1.0);
        assert_eq!(ssim(&a, &a, 1.0).unwrap(), 1.0);
    }
    assert!(ssim(&Tensor::zeros(&[3, 10, 20]), &Tensor::zeros(&[3, 10, 20]), 1.0).is_err());
}

#[test]
fn ssim_of_inverted_binary_image_is_negative() {
    let bits = common::uniform(&mut common::rng(8), &[1, 16, 16], 0.0, 1.0).map(|v| v.round());
    let grey = Tensor::from_fn(&[3, 16, 16], |i| bits.data()[i % 256]);
    let inverted = grey.map(|v| 1.0 - v);
    assert!(ssim(&grey, &inverted, 1.0).unwrap() < 0.0);
}

#[test]
fn report_mean_is_arithmetic_mean() {
    let a = common::uniform(&mut common::rng(9), &[3, 12, 12], 0.0, 1.0);
    let rows: Vec<ImageMetrics> = (0..3)
        .map(|i| evaluate_pair(&format!("img{i}"), &noisy(&a, 0.02 * (i + 1) as f64, i), &a, &EvalOptions::default()).unwrap())
        .collect();
    let report = MetricReport::new(rows.clone()).unwrap();
    let mean_psnr = rows.iter().map(|r| r.psnr).sum::<f64>() / 3.0;
    assert!((report.mean_psnr - mean_psnr).abs() < 1e-12);
    let csv = report.to_csv();
    assert!(csv.starts_with("name,psnr,ssim\n"));
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.lines().last().unwrap().starts_with("mean,"));
    assert!(MetricReport::new(Vec::new()).is_err());
}

/// Horizontal flip then `k` counter-clockwise quarter turns of a square
/// `[N, C, S, S]` tensor, by explicit coordinates.
fn transform(x: &Tensor, k: u8, flip: bool) -> Tensor {
    let s = x.shape()[3];
    let planes = x.numel() / (s * s);
    let mut out = vec![0.0; x.numel()];
    for p in 0..planes {
        for y in 0..s {
            for xx in 0..s {
                // Pull the output pixel back through k CCW turns, then the flip.
                let (mut sy, mut sx) = (y, xx);
                for _ in 0..k {
                    (sy, sx) = (sx, s - 1 - sy);
                }
                if flip {
                    sx = s - 1 - sx;
                }
                out[p * s * s + y * s + xx] = x.data()[p * s * s + sy * s + sx];
            }
        }
    }
    Tensor::new(x.shape(), out).unwrap()
}

fn untransform(x: &Tensor, k: u8, flip: bool) -> Tensor {
    let undone = transform(x, (4 - k) % 4, false);
    if flip {
        transform(&undone, 0, true)
    } else {
        undone
    }
}

fn random_model() -> GvtNet {
    let cfg = NetConfig {
        n_groups: 1,
        n_dmb_per_group: 1,
        channels: 8,
        ..NetConfig::toy()
    };
    GvtNet::new(cfg, 12).unwrap()
}

#[test]
fn transforms_agree_with_coordinate_oracle() {
    let x = common::uniform(&mut common::rng(10), &[1, 2, 5, 5], 0.0, 1.0);
    for d in Dihedral::all() {
        assert_eq!(d.apply(&x).unwrap(), transform(&x, d.rot, d.flip), "{d:?}");
        assert_eq!(d.inverse().apply(&d.apply(&x).unwrap()).unwrap(), x);
        assert_eq!(untransform(&transform(&x, d.rot, d.flip), d.rot, d.flip), x);
    }
}

#[test]
fn ensemble_equals_hand_composed_average() {
    let model = random_model();
    let lr = common::uniform(&mut common::rng(11), &[1, 3, 8, 8], 0.0, 1.0);
    let mut sum = Tensor::zeros(&[1, 3, 16, 16]);
    for k in 0..4 {
        for flip in [false, true] {
            let out = model.upscale(&transform(&lr, k, flip)).unwrap();
            let back = untransform(&out, k, flip);
            sum = Tensor::from_fn(sum.shape(), |i| sum.data()[i] + back.data()[i]);
        }
    }
    let expect = sum.map(|v| v / 8.0);
    let got = self_ensemble(&model, &lr).unwrap();
    assert!(got.max_abs_diff(&expect) < 1e-12);
    assert!(got.max_abs_diff(&model.upscale(&lr).unwrap()) > 1e-6);
}

#[test]
fn ensemble_commutes_with_rotation() {
    let model = random_model();
    let lr = common::uniform(&mut common::rng(13), &[1, 3, 8, 8], 0.0, 1.0);
    let base = self_ensemble(&model, &lr).unwrap();
    for d in Dihedral::all() {
        let moved = self_ensemble(&model, &d.apply(&lr).unwrap()).unwrap();
        assert!(moved.max_abs_diff(&d.apply(&base).unwrap()) < 1e-12, "{d:?}");
    }
}

#[test]
fn equivariant_model_is_a_fixed_point() {
    let up = NearestUpsampler { scale: 3 };
    assert_eq!(up.scale(), 3);
    let x = common::uniform(&mut common::rng(14), &[2, 3, 4, 6], 0.0, 1.0);
    let single = up.upscale(&x).unwrap();
    assert!(self_ensemble(&up, &x).unwrap().max_abs_diff(&single) < 1e-12);
    let flat = Tensor::full(&[1, 3, 4, 4], 0.6);
    let out = self_ensemble(&up, &flat).unwrap();
    assert!(out.data().iter().all(|v| (v - 0.6).abs() < 1e-15));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn ssim_bounded_and_reflexive(seed in any::<u64>(), h in 11usize..18, w in 11usize..18, amp in 0.0f64..0.5) {
        let a = common::uniform(&mut common::rng(seed), &[3, h, w], 0.0, 1.0);
        let b = noisy(&a, amp, seed ^ 1).map(|v| v.clamp(0.0, 1.0));
        let s = ssim(&a, &b, 1.0).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
        prop_assert_eq!(ssim(&b, &b, 1.0).unwrap(), 1.0);
        prop_assert!((s - ssim(&b, &a, 1.0).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn dihedral_group_closure(i in 0usize..8, j in 0usize..8, seed in any::<u64>()) {
        let x = common::uniform(&mut common::rng(seed), &[1, 1, 3, 3], 0.0, 1.0);
        let (a, b) = (Dihedral::all()[i], Dihedral::all()[j]);
        let two_step = a.apply(&b.apply(&x).unwrap()).unwrap();
        prop_assert_eq!(a.after(b).apply(&x).unwrap(), two_step);
        prop_assert_eq!(a.inverse().after(a), Dihedral::IDENTITY);
    }
}
