//! LR/HR pair synthesis and the procedural fixture set.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Catmull-Rom style cubic convolution parameter.
pub const BICUBIC_A: f64 = -0.5;

/// Cubic convolution kernel with `a = -0.5`.
pub fn cubic(x: f64) -> f64 {
    let a = BICUBIC_A;
    let t = x.abs();
    if t <= 1.0 {
        (a + 2.0) * t * t * t - (a + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        a * t * t * t - 5.0 * a * t * t + 8.0 * a * t - 4.0 * a
    } else {
        0.0
    }
}

/// Index into `[0, n)` with half-sample symmetric extension (`-1 -> 0`, `n -> n-1`).
pub fn symmetric_index(i: i64, n: usize) -> usize {
    let n = n as i64;
    let period = 2 * n;
    let r = i.rem_euclid(period);
    (if r < n { r } else { period - 1 - r }) as usize
}

/// Resampling weights for one axis: `(first source index, normalized weights)`
/// per output sample. The kernel is stretched by `factor` to antialias.
fn axis_weights(in_len: usize, factor: usize) -> Vec<(i64, Vec<f64>)> {
    let out_len = in_len / factor;
    let s = factor as f64;
    let support = 2.0 * s;
    (0..out_len)
        .map(|i| {
            let center = (i as f64 + 0.5) * s - 0.5;
            let first = (center - support).floor() as i64;
            let last = (center + support).ceil() as i64;
            let mut w: Vec<f64> = (first..=last).map(|j| cubic((center - j as f64) / s)).collect();
            let total: f64 = w.iter().sum();
            w.iter_mut().for_each(|v| *v /= total);
            (first, w)
        })
        .collect()
}

/// Antialiased bicubic downsampling of `[C, H, W]` by an integer factor.
pub fn bicubic_downsample(img: &Tensor, factor: usize) -> Result<Tensor> {
    let &[c, h, w] = img.shape() else {
        return Err(Error::shape("bicubic_downsample", "rank", 3, img.rank()));
    };
    if factor == 0 {
        return Err(Error::InvalidArgument("downsample factor must be >= 1".into()));
    }
    if h % factor != 0 {
        return Err(Error::divisibility("bicubic_downsample", "height", h, factor));
    }
    if w % factor != 0 {
        return Err(Error::divisibility("bicubic_downsample", "width", w, factor));
    }
    let (oh, ow) = (h / factor, w / factor);
    let (wy, wx) = (axis_weights(h, factor), axis_weights(w, factor));
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut rows = vec![0.0; oh * w];
    for plane in img.data().chunks_exact(h * w) {
        // vertical pass
        for (oy, (first, weights)) in wy.iter().enumerate() {
            let dst = &mut rows[oy * w..(oy + 1) * w];
            dst.iter_mut().for_each(|v| *v = 0.0);
            for (t, &wt) in weights.iter().enumerate() {
                let sy = symmetric_index(first + t as i64, h);
                let src = &plane[sy * w..(sy + 1) * w];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += wt * s);
            }
        }
        // horizontal pass
        for oy in 0..oh {
            let row = &rows[oy * w..(oy + 1) * w];
            for (first, weights) in &wx {
                let v: f64 = weights
                    .iter()
                    .enumerate()
                    .map(|(t, &wt)| wt * row[symmetric_index(first + t as i64, w)])
                    .sum();
                out.push(v);
            }
        }
    }
    Tensor::new(&[c, oh, ow], out)
}

/// `(lr, hr)` pairs, LR made by bicubic downsampling, order shuffled by `seed`.
pub fn make_pairs(hr_images: &[Tensor], scale: usize, seed: u64) -> Result<Vec<(Tensor, Tensor)>> {
    let mut pairs = hr_images
        .iter()
        .map(|hr| Ok((bicubic_downsample(hr, scale)?, hr.clone())))
        .collect::<Result<Vec<_>>>()?;
    pairs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(pairs)
}

fn smoothstep(edge0: f64, edge1: f64, x: f64) -> f64 {
    let t = ((x - edge0) / (edge1 - edge0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Seeded synthetic RGB image `[3, size, size]` in `[0, 1]`: a smooth colour
/// gradient with a few soft-edged discs and a low-frequency ripple.
pub fn fixture_image(size: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = size as f64;
    let mut base = [[0.0; 3]; 3];
    for ch in base.iter_mut() {
        *ch = [
            rng.random_range(0.25..0.75),
            rng.random_range(-0.25..0.25),
            rng.random_range(-0.25..0.25),
        ];
    }
    struct Disc {
        cy: f64,
        cx: f64,
        r: f64,
        color: [f64; 3],
    }
    let discs: Vec<Disc> = (0..3)
        .map(|_| Disc {
            cy: rng.random_range(0.2..0.8) * n,
            cx: rng.random_range(0.2..0.8) * n,
            r: rng.random_range(0.12..0.3) * n,
            color: [
                rng.random_range(0.0..1.0),
                rng.random_range(0.0..1.0),
                rng.random_range(0.0..1.0),
            ],
        })
        .collect();
    let (fy, fx, phase) = (
        rng.random_range(0.5..1.5),
        rng.random_range(0.5..1.5),
        rng.random_range(0.0..std::f64::consts::TAU),
    );
    let softness = n / 8.0;
    let mut data = vec![0.0; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let (u, v) = (y as f64 / n, x as f64 / n);
            let ripple = 0.05 * (std::f64::consts::TAU * (fy * u + fx * v) + phase).sin();
            for ch in 0..3 {
                let [b0, by, bx] = base[ch];
                let mut val = b0 + by * (u - 0.5) + bx * (v - 0.5) + ripple;
                for d in &discs {
                    let dist = ((y as f64 + 0.5 - d.cy).powi(2) + (x as f64 + 0.5 - d.cx).powi(2)).sqrt();
                    let alpha = 1.0 - smoothstep(d.r - softness, d.r + softness, dist);
                    val = val * (1.0 - 0.6 * alpha) + 0.6 * alpha * d.color[ch];
                }
                data[(ch * size + y) * size + x] = val.clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new(&[3, size, size], data).expect("fixture shape")
}

/// The four 32×32 training fixtures.
pub fn fixture_set() -> Vec<Tensor> {
    (0..4).map(|i| fixture_image(32, 1000 + i)).collect()
}
