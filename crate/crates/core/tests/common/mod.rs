//! Scalar reference implementations used as test oracles.
#![allow(dead_code)]

use gvtnet::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Softmax-weighted sum for one query row given raw logits.
fn softmax_row(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Attention for one `[M, d]` head: `logit(i, j, q_i·k_j)` then softmax, then `· V`.
pub fn attention_head(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    m: usize,
    d: usize,
    logit: impl Fn(usize, usize, f64) -> f64,
) -> Vec<f64> {
    let mut out = vec![0.0; m * d];
    for i in 0..m {
        let logits: Vec<f64> = (0..m)
            .map(|j| {
                let mut dot = 0.0;
                for t in 0..d {
                    dot += q[i * d + t] * k[j * d + t];
                }
                logit(i, j, dot)
            })
            .collect();
        let w = softmax_row(&logits);
        for j in 0..m {
            for t in 0..d {
                out[i * d + t] += w[j] * v[j * d + t];
            }
        }
    }
    out
}

/// Direct `[N, C, H, W]` convolution with zero padding.
pub fn conv2d(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let (xs, ws) = (x.shape(), w.shape());
    let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (o, k) = (ws[0], ws[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for ni in 0..n {
        for oc in 0..o {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b.data()[oc]);
                    for ic in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xx * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.at(&[ni, ic, iy as usize, ix as usize])
                                    * w.at(&[oc, ic, ky, kx]);
                            }
                        }
                    }
                    out[((ni * o + oc) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    Tensor::new(&[n, o, oh, ow], out).unwrap()
}

/// Depthwise `k×k` conv (same padding) followed by a 1×1 pointwise conv.
pub fn depthwise_separable(x: &Tensor, dw: &Tensor, pw: &Tensor) -> Tensor {
    let s = x.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let k = dw.shape()[2];
    let pad = k / 2;
    let mut mid = vec![0.0; n * c * h * w];
    for ni in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = 0.0;
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = y as isize + ky as isize - pad as isize;
                            let ix = xx as isize + kx as isize - pad as isize;
                            if iy >= 0 && ix >= 0 && iy < h as isize && ix < w as isize {
                                acc += x.at(&[ni, ch, iy as usize, ix as usize]) * dw.at(&[ch, 0, ky, kx]);
                            }
                        }
                    }
                    mid[((ni * c + ch) * h + y) * w + xx] = acc;
                }
            }
        }
    }
    let mid = Tensor::new(&[n, c, h, w], mid).unwrap();
    conv2d(&mid, pw, None, 1, 0)
}

/// SSIM of two single-plane images by explicit 11×11 windows (no separable filtering).
pub fn ssim_reference(a: &[f64], b: &[f64], h: usize, w: usize, peak: f64) -> f64 {
    let taps = 11;
    let sigma: f64 = 1.5;
    let mut g2 = vec![0.0; taps * taps];
    let c = 5.0;
    for y in 0..taps {
        for x in 0..taps {
            let dy = y as f64 - c;
            let dx = x as f64 - c;
            g2[y * taps + x] = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
        }
    }
    let total: f64 = g2.iter().sum();
    g2.iter_mut().for_each(|v| *v /= total);
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    let mut sum = 0.0;
    let mut count = 0;
    for y0 in 0..=h - taps {
        for x0 in 0..=w - taps {
            let (mut ma, mut mb) = (0.0, 0.0);
            for t in 0..taps * taps {
                let idx = (y0 + t / taps) * w + x0 + t % taps;
                ma += g2[t] * a[idx];
                mb += g2[t] * b[idx];
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for t in 0..taps * taps {
                let idx = (y0 + t / taps) * w + x0 + t % taps;
                va += g2[t] * (a[idx] - ma) * (a[idx] - ma);
                vb += g2[t] * (b[idx] - mb) * (b[idx] - mb);
                cov += g2[t] * (a[idx] - ma) * (b[idx] - mb);
            }
            sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    sum / count as f64
}

pub fn luma(img: &Tensor) -> Vec<f64> {
    let s = img.shape();
    let n = s[1] * s[2];
    let d = img.data();
    (0..n).map(|i| 0.299 * d[i] + 0.587 * d[n + i] + 0.114 * d[2 * n + i]).collect()
}

/// Textbook Adam on a scalar.
pub struct ScalarAdam {
    pub m: f64,
    pub v: f64,
    pub t: i32,
}

impl ScalarAdam {
    pub fn step(&mut self, theta: f64, g: f64, lr: f64, b1: f64, b2: f64, eps: f64) -> f64 {
        self.t += 1;
        self.m = b1 * self.m + (1.0 - b1) * g;
        self.v = b2 * self.v + (1.0 - b2) * g * g;
        let mh = self.m / (1.0 - b1.powi(self.t));
        let vh = self.v / (1.0 - b2.powi(self.t));
        theta - lr * mh / (vh.sqrt() + eps)
    }
}

/// 1-D antialiased bicubic resampling by direct kernel evaluation at each
/// source pixel, with mirrored borders.
pub fn bicubic_1d(src: &[f64], factor: usize) -> Vec<f64> {
    let cubic = |x: f64| {
        let a = -0.5;
        let t = x.abs();
        if t <= 1.0 {
            (a + 2.0) * t.powi(3) - (a + 3.0) * t.powi(2) + 1.0
        } else if t < 2.0 {
            a * t.powi(3) - 5.0 * a * t.powi(2) + 8.0 * a * t - 4.0 * a
        } else {
            0.0
        }
    };
    let n = src.len() as i64;
    let s = factor as f64;
    (0..src.len() / factor)
        .map(|i| {
            let center = (i as f64 + 0.5) * s - 0.5;
            let mut num = 0.0;
            let mut den = 0.0;
            for j in -4 * factor as i64..n + 4 * factor as i64 {
                let wt = cubic((center - j as f64) / s);
                if wt == 0.0 {
                    continue;
                }
                let mut jj = j;
                while jj < 0 || jj >= n {
                    jj = if jj < 0 { -jj - 1 } else { 2 * n - 1 - jj };
                }
                num += wt * src[jj as usize];
                den += wt;
            }
            num / den
        })
        .collect()
}
