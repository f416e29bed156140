use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

impl Tape {
    /// Normalizes over the last dim, then applies `gamma`/`beta`.
    ///
    /// `eps == 0` is accepted; a constant row then divides zero by zero.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if !(eps >= 0.0) {
            return Err(Error::InvalidArgument(format!("layer_norm eps {eps}")));
        }
        let c = *self.shape(x).last().unwrap_or(&0);
        for (name, p) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(p) != [c] {
                return Err(Error::shape(
                    "layer_norm",
                    name,
                    format!("[{c}]"),
                    format!("{:?}", self.shape(p)),
                ));
            }
        }
        let xv = self.value(x);
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xv.numel() / c.max(1);
        let mut out = vec![0.0; xv.numel()];
        // Per-row normalized values and inverse std, kept for the backward pass.
        let mut xhat = vec![0.0; xv.numel()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &xv.data()[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[r * c + j] = h;
                out[r * c + j] = h * gv[j] + bv[j];
            }
        }
        let value = Tensor::new(xv.shape(), out)?;
        Ok(self.push(value, &[x, gamma, beta], move |ctx| {
            let (g, gv) = (ctx.grad, ctx.inputs[1].data());
            let mut dx = ctx.needs(0).then(|| vec![0.0; g.len()]);
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for r in 0..rows {
                let gr = &g[r * c..(r + 1) * c];
                let hr = &xhat[r * c..(r + 1) * c];
                let mut mean_dh = 0.0;
                let mut mean_dh_h = 0.0;
                for j in 0..c {
                    dgamma[j] += gr[j] * hr[j];
                    dbeta[j] += gr[j];
                    let dh = gr[j] * gv[j];
                    mean_dh += dh;
                    mean_dh_h += dh * hr[j];
                }
                mean_dh /= c as f64;
                mean_dh_h /= c as f64;
                if let Some(dx) = dx.as_mut() {
                    for j in 0..c {
                        let dh = gr[j] * gv[j];
                        dx[r * c + j] = inv_std[r] * (dh - mean_dh - hr[j] * mean_dh_h);
                    }
                }
            }
            vec![dx.take(), Some(dgamma), Some(dbeta)]
        }))
    }

    /// Softmax over the last dim, stabilized by subtracting the row max.
    pub fn softmax_lastdim(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = (*xv.shape().last().unwrap_or(&1)).max(1);
        let mut out = xv.data().to_vec();
        for row in out.chunks_exact_mut(c) {
            softmax_in_place(row);
        }
        let value = Tensor::new(xv.shape(), out).expect("softmax shape");
        self.push(value, &[x], move |ctx| {
            let (y, g) = (ctx.out.data(), ctx.grad);
            let mut dx = vec![0.0; g.len()];
            for ((dr, yr), gr) in dx
                .chunks_exact_mut(c)
                .zip(y.chunks_exact(c))
                .zip(g.chunks_exact(c))
            {
                let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                for j in 0..c {
                    dr[j] = yr[j] * (gr[j] - dot);
                }
            }
            vec![Some(dx)]
        })
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}
