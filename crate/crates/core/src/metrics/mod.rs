//! Image quality metrics and the dihedral self-ensemble.

mod ensemble;

pub use ensemble::{self_ensemble, Dihedral, NearestUpsampler, SrModel};

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Reported when the two images are identical.
pub const PSNR_CAP_DB: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// ITU-R BT.601 luma weights.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

fn check_pair(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, "image shape", format!("{:?}", a.shape()), format!("{:?}", b.shape())));
    }
    if a.numel() == 0 {
        return Err(Error::InvalidArgument(format!("{op}: empty image")));
    }
    Ok(())
}

/// `10·log10(peak² / MSE)` over every element, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    check_pair("psnr", a, b)?;
    let se: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    let mse = se / a.numel() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB))
}

/// `[3, H, W]` RGB to `[1, H, W]` luma. Single-channel input is returned as is.
pub fn luminance(img: &Tensor) -> Result<Tensor> {
    match img.shape() {
        &[1, _, _] => Ok(img.clone()),
        &[3, h, w] => {
            let d = img.data();
            let n = h * w;
            let y = (0..n)
                .map(|i| LUMA_WEIGHTS[0] * d[i] + LUMA_WEIGHTS[1] * d[n + i] + LUMA_WEIGHTS[2] * d[2 * n + i])
                .collect();
            Tensor::new(&[1, h, w], y)
        }
        s => Err(Error::shape("luminance", "image shape", "[3, H, W] or [1, H, W]", format!("{s:?}"))),
    }
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_window(taps: usize, sigma: f64) -> Vec<f64> {
    let c = (taps as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..taps)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

/// Separable valid-region filtering of one `h × w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let t = k.len();
    let (oh, ow) = (h - t + 1, w - t + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        let src = &plane[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = k.iter().zip(&src[x..x + t]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = k.iter().enumerate().map(|(i, a)| a * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over the valid region of every channel plane of `[C, H, W]`.
pub fn ssim_planes(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    check_pair("ssim", a, b)?;
    let &[c, h, w] = a.shape() else {
        return Err(Error::shape("ssim", "rank", 3, a.rank()));
    };
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "ssim: image {h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let k = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let c1 = (SSIM_K1 * peak).powi(2);
    let c2 = (SSIM_K2 * peak).powi(2);
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        let pa = &a.data()[ch * h * w..(ch + 1) * h * w];
        let pb = &b.data()[ch * h * w..(ch + 1) * h * w];
        let prod = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
        let mu_a = filter_valid(pa, h, w, &k);
        let mu_b = filter_valid(pb, h, w, &k);
        let e_aa = filter_valid(&prod(pa, pa), h, w, &k);
        let e_bb = filter_valid(&prod(pb, pb), h, w, &k);
        let e_ab = filter_valid(&prod(pa, pb), h, w, &k);
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let var_a = e_aa[i] - ma * ma;
            let var_b = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
            let den = (ma * ma + mb * mb + c1) * (var_a + var_b + c2);
            total += num / den;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// SSIM of two `[3, H, W]` RGB images, evaluated on BT.601 luminance.
pub fn ssim(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    check_pair("ssim", a, b)?;
    ssim_planes(&luminance(a)?, &luminance(b)?, peak)
}

/// Evaluation protocol switches.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    /// Pixels removed from each border before measuring.
    pub crop: usize,
    /// Measure PSNR on luminance instead of RGB.
    pub y_channel: bool,
    pub peak: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            crop: 0,
            y_channel: false,
            peak: 1.0,
        }
    }
}

/// Removes `border` pixels from each side of `[C, H, W]`.
pub fn crop_border(img: &Tensor, border: usize) -> Result<Tensor> {
    let &[c, h, w] = img.shape() else {
        return Err(Error::shape("crop_border", "rank", 3, img.rank()));
    };
    if border == 0 {
        return Ok(img.clone());
    }
    if 2 * border >= h || 2 * border >= w {
        return Err(Error::InvalidArgument(format!("crop {border} leaves nothing of a {h}x{w} image")));
    }
    let (oh, ow) = (h - 2 * border, w - 2 * border);
    let mut data = Vec::with_capacity(c * oh * ow);
    for plane in img.data().chunks_exact(h * w) {
        for y in border..h - border {
            data.extend_from_slice(&plane[y * w + border..y * w + w - border]);
        }
    }
    Tensor::new(&[c, oh, ow], data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageMetrics {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
}

/// Scores one image pair under `opts`.
pub fn evaluate_pair(name: &str, pred: &Tensor, target: &Tensor, opts: &EvalOptions) -> Result<ImageMetrics> {
    check_pair("evaluate_pair", pred, target)?;
    let p = crop_border(pred, opts.crop)?;
    let t = crop_border(target, opts.crop)?;
    let psnr = if opts.y_channel {
        psnr(&luminance(&p)?, &luminance(&t)?, opts.peak)?
    } else {
        psnr(&p, &t, opts.peak)?
    };
    Ok(ImageMetrics {
        name: name.to_string(),
        psnr,
        ssim: ssim(&p, &t, opts.peak)?,
    })
}

/// Per-image scores and their means.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub images: Vec<ImageMetrics>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

impl MetricReport {
    pub fn new(images: Vec<ImageMetrics>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::InvalidArgument("metric report needs at least one image".into()));
        }
        let n = images.len() as f64;
        let mean_psnr = images.iter().map(|m| m.psnr).sum::<f64>() / n;
        let mean_ssim = images.iter().map(|m| m.ssim).sum::<f64>() / n;
        Ok(Self {
            images,
            mean_psnr,
            mean_ssim,
        })
    }

    /// `name,psnr,ssim` rows followed by a `mean` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("name,psnr,ssim\n");
        for m in &self.images {
            writeln!(out, "{},{},{}", m.name, m.psnr, m.ssim).unwrap();
        }
        writeln!(out, "mean,{},{}", self.mean_psnr, self.mean_ssim).unwrap();
        out
    }

    pub fn to_table(&self) -> String {
        let width = self
            .images
            .iter()
            .map(|m| m.name.len())
            .chain([5])
            .max()
            .unwrap_or(5);
        let mut out = String::new();
        writeln!(out, "{:<width$}  {:>9}  {:>7}", "image", "PSNR (dB)", "SSIM").unwrap();
        for m in &self.images {
            writeln!(out, "{:<width$}  {:>9.4}  {:>7.5}", m.name, m.psnr, m.ssim).unwrap();
        }
        writeln!(out, "{:<width$}  {:>9.4}  {:>7.5}", "mean", self.mean_psnr, self.mean_ssim).unwrap();
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Tensor {
        Tensor::from_fn(&[3, h, w], |i| ((i * 37) % 101) as f64 / 100.0)
    }

    #[test]
    fn psnr_examples() {
        let a = ramp(12, 12);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_CAP_DB);
        let zero = Tensor::zeros(&[3, 4, 4]);
        let tenth = Tensor::full(&[3, 4, 4], 0.1);
        assert!((psnr(&zero, &tenth, 1.0).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&zero, &Tensor::zeros(&[3, 4, 5]), 1.0).is_err());
    }

    #[test]
    fn ssim_examples() {
        let a = ramp(16, 16);
        assert_eq!(ssim(&a, &a, 1.0).unwrap(), 1.0);
        assert!(ssim(&ramp(10, 16), &ramp(10, 16), 1.0).is_err());
        let bin = Tensor::from_fn(&[1, 16, 16], |i| ((i / 3 + i / 16) % 2) as f64);
        let inv = bin.map(|v| 1.0 - v);
        assert!(ssim_planes(&bin, &inv, 1.0).unwrap() < 0.0);
    }

    #[test]
    fn gaussian_is_normalized_and_symmetric() {
        let g = gaussian_window(11, 1.5);
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(g[0], g[10]);
        assert!(g[5] > g[4]);
    }

    #[test]
    fn crop_and_report() {
        let a = ramp(16, 16);
        assert_eq!(crop_border(&a, 2).unwrap().shape(), &[3, 12, 12]);
        assert!(crop_border(&a, 8).is_err());
        let r = MetricReport::new(vec![
            ImageMetrics { name: "a".into(), psnr: 30.0, ssim: 0.5 },
            ImageMetrics { name: "b".into(), psnr: 40.0, ssim: 0.7 },
        ])
        .unwrap();
        assert_eq!(r.mean_psnr, 35.0);
        assert!(r.to_csv().ends_with("mean,35,0.6\n"));
        assert!(r.to_table().contains("mean"));
    }
}
