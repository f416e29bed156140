use super::linalg::gemm;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Copy, Clone, Debug)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn cols_rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn out_pixels(&self) -> usize {
        self.oh * self.ow
    }
}

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let hw = g.out_pixels();
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = &mut cols[((c * g.k + ky) * g.k + kx) * hw..][..hw];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let dst = &mut row[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        dst.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let hw = g.out_pixels();
    for c in 0..g.c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = &cols[((c * g.k + ky) * g.k + kx) * hw..][..hw];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            plane[iy as usize * g.w + ix as usize] += row[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn rank4(op: &'static str, what: &str, shape: &[usize]) -> Result<[usize; 4]> {
    shape
        .try_into()
        .map_err(|_| Error::shape(op, format!("{what} rank"), 4, shape.len()))
}

impl Tape {
    /// 2-D cross-correlation, NCHW input, `[O, C, k, k]` weights, zero padding.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let [n, c, h, wd] = rank4("conv2d", "input", self.shape(x))?;
        let [o, wc, k, k2] = rank4("conv2d", "weight", self.shape(w))?;
        if wc != c {
            return Err(Error::shape("conv2d", "input channels (dim 1)", wc, c));
        }
        if k != k2 {
            return Err(Error::shape("conv2d", "kernel width (dim 3)", k, k2));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(Error::shape(
                    "conv2d",
                    "bias extent",
                    o,
                    format!("{:?}", self.shape(b)),
                ));
            }
        }
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::shape("conv2d", "spatial extent", format!(">= {k}"), h.min(wd) + 2 * pad));
        }
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let geom = ConvGeom {
            c,
            h,
            w: wd,
            k,
            stride,
            pad,
            oh,
            ow,
        };
        let (rows, hw) = (geom.cols_rows(), geom.out_pixels());
        let mut out = vec![0.0; n * o * hw];
        let mut cols = vec![0.0; rows * hw];
        {
            let (xv, wv) = (self.value(x).data(), self.value(w).data());
            for i in 0..n {
                im2col(&xv[i * c * h * wd..], &geom, &mut cols);
                gemm(o, rows, hw, wv, false, &cols, false, &mut out[i * o * hw..], false);
            }
            if let Some(b) = b {
                let bv = self.value(b).data();
                for (j, plane) in out.chunks_exact_mut(hw).enumerate() {
                    let bias = bv[j % o];
                    plane.iter_mut().for_each(|v| *v += bias);
                }
            }
        }
        let value = Tensor::new(&[n, o, oh, ow], out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(value, &parents, move |ctx| {
            let (xv, wv, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad);
            let mut dx = ctx.needs(0).then(|| vec![0.0; n * c * h * wd]);
            let mut dw = ctx.needs(1).then(|| vec![0.0; o * rows]);
            let mut cols = vec![0.0; rows * hw];
            let mut dcols = vec![0.0; rows * hw];
            for i in 0..n {
                let gi = &g[i * o * hw..(i + 1) * o * hw];
                if let Some(dw) = dw.as_mut() {
                    im2col(&xv[i * c * h * wd..], &geom, &mut cols);
                    gemm(o, hw, rows, gi, false, &cols, true, dw, true);
                }
                if let Some(dx) = dx.as_mut() {
                    gemm(rows, o, hw, wv, true, gi, false, &mut dcols, false);
                    col2im(&dcols, &geom, &mut dx[i * c * h * wd..]);
                }
            }
            let mut grads = vec![dx, dw];
            if ctx.inputs.len() == 3 {
                grads.push(ctx.needs(2).then(|| {
                    let mut db = vec![0.0; o];
                    for (j, plane) in g.chunks_exact(hw).enumerate() {
                        db[j % o] += plane.iter().sum::<f64>();
                    }
                    db
                }));
            }
            grads
        }))
    }

    /// Per-channel `k×k` convolution with same padding; weights `[C, 1, k, k]`.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var) -> Result<Var> {
        let [n, c, h, wd] = rank4("depthwise_conv2d", "input", self.shape(x))?;
        let [wc, one, k, k2] = rank4("depthwise_conv2d", "weight", self.shape(w))?;
        if wc != c {
            return Err(Error::shape("depthwise_conv2d", "channels (dim 0)", c, wc));
        }
        if one != 1 || k != k2 || k % 2 == 0 {
            return Err(Error::shape(
                "depthwise_conv2d",
                "kernel",
                "[C, 1, k, k] with odd k",
                format!("{:?}", self.shape(w)),
            ));
        }
        let pad = k / 2;
        let out = depthwise_forward(self.value(x).data(), self.value(w).data(), n, c, h, wd, k, pad);
        let value = Tensor::new(&[n, c, h, wd], out)?;
        Ok(self.push(value, &[x, w], move |ctx| {
            let (xv, wv, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad);
            let mut dx = ctx.needs(0).then(|| vec![0.0; xv.len()]);
            let mut dw = ctx.needs(1).then(|| vec![0.0; wv.len()]);
            for i in 0..n {
                for ch in 0..c {
                    let base = (i * c + ch) * h * wd;
                    let kern = &wv[ch * k * k..(ch + 1) * k * k];
                    for ky in 0..k {
                        for kx in 0..k {
                            let (y0, y1) = valid_range(ky, pad, h);
                            let (x0, x1) = valid_range(kx, pad, wd);
                            let mut acc = 0.0;
                            for oy in y0..y1 {
                                let iy = oy + ky - pad;
                                for ox in x0..x1 {
                                    let ix = ox + kx - pad;
                                    let go = g[base + oy * wd + ox];
                                    acc += go * xv[base + iy * wd + ix];
                                    if let Some(dx) = dx.as_mut() {
                                        dx[base + iy * wd + ix] += go * kern[ky * k + kx];
                                    }
                                }
                            }
                            if let Some(dw) = dw.as_mut() {
                                dw[ch * k * k + ky * k + kx] += acc;
                            }
                        }
                    }
                }
            }
            vec![dx, dw]
        }))
    }

    /// Depthwise `k×k` conv (`dw: [C,1,k,k]`) followed by a pointwise conv (`pw: [O,C,1,1]`).
    pub fn depthwise_separable_conv(&mut self, x: Var, dw: Var, pw: Var) -> Result<Var> {
        let c = self.shape(x).get(1).copied().unwrap_or(0);
        let pw_shape = self.shape(pw).to_vec();
        if pw_shape.len() != 4 || pw_shape[1] != c || pw_shape[2] != 1 || pw_shape[3] != 1 {
            return Err(Error::shape(
                "depthwise_separable_conv",
                "pointwise weight",
                format!("[O, {c}, 1, 1]"),
                format!("{pw_shape:?}"),
            ));
        }
        let mid = self.depthwise_conv2d(x, dw)?;
        self.conv2d(mid, pw, None, 1, 0)
    }
}

/// Output rows `o` for which `o + tap - pad` lands inside `[0, extent)`.
fn valid_range(tap: usize, pad: usize, extent: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(tap);
    let hi = (extent + pad).saturating_sub(tap).min(extent);
    (lo, hi.max(lo))
}

#[allow(clippy::too_many_arguments)]
fn depthwise_forward(
    x: &[f64],
    w: &[f64],
    n: usize,
    c: usize,
    h: usize,
    wd: usize,
    k: usize,
    pad: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * h * wd;
            let kern = &w[ch * k * k..(ch + 1) * k * k];
            for ky in 0..k {
                let (y0, y1) = valid_range(ky, pad, h);
                for kx in 0..k {
                    let (x0, x1) = valid_range(kx, pad, wd);
                    let wt = kern[ky * k + kx];
                    for oy in y0..y1 {
                        let src = base + (oy + ky - pad) * wd;
                        let dst = base + oy * wd;
                        for ox in x0..x1 {
                            out[dst + ox] += wt * x[src + ox + kx - pad];
                        }
                    }
                }
            }
        }
    }
    out
}
