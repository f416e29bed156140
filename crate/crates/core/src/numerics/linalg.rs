use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Row-major `c[m,n] (+)= op(a)[m,k] · op(b)[k,n]`.
///
/// With `ta` the buffer `a` holds a `[k,m]` matrix, with `tb` the buffer `b`
/// holds `[n,k]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let (rsa, csa) = if ta { (1, m) } else { (k, 1) };
    let (rsb, csb) = if tb { (1, k) } else { (n, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices cover every index addressed by the stride pairs above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Tape {
    /// Batched product over matching leading dims: `op(a)[..,M,K] · op(b)[..,K,N]`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::InvalidArgument("bmm needs rank >= 2 operands".into()));
        }
        let (lead_a, ma) = sa.split_at(sa.len() - 2);
        let (lead_b, mb) = sb.split_at(sb.len() - 2);
        if lead_a != lead_b {
            return Err(Error::shape(
                "bmm",
                "batch dims",
                format!("{lead_a:?}"),
                format!("{lead_b:?}"),
            ));
        }
        let (m, k) = if trans_a { (ma[1], ma[0]) } else { (ma[0], ma[1]) };
        let (kb, n) = if trans_b { (mb[1], mb[0]) } else { (mb[0], mb[1]) };
        if k != kb {
            return Err(Error::shape("bmm", "contraction dim", k, kb));
        }
        let batch: usize = lead_a.iter().product();
        let mut out = vec![0.0; batch * m * n];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &av[i * m * k..],
                    trans_a,
                    &bv[i * k * n..],
                    trans_b,
                    &mut out[i * m * n..],
                    false,
                );
            }
        }
        let mut shape = lead_a.to_vec();
        shape.extend([m, n]);
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, &[a, b], move |ctx| {
            let (av, bv, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad);
            let da = ctx.needs(0).then(|| {
                let mut da = vec![0.0; batch * m * k];
                for i in 0..batch {
                    let (gi, bi, di) = (&g[i * m * n..], &bv[i * k * n..], &mut da[i * m * k..]);
                    if trans_a {
                        gemm(k, n, m, bi, trans_b, gi, true, di, false);
                    } else {
                        gemm(m, n, k, gi, false, bi, !trans_b, di, false);
                    }
                }
                da
            });
            let db = ctx.needs(1).then(|| {
                let mut db = vec![0.0; batch * k * n];
                for i in 0..batch {
                    let (gi, ai, di) = (&g[i * m * n..], &av[i * m * k..], &mut db[i * k * n..]);
                    if trans_b {
                        gemm(n, m, k, gi, true, ai, trans_a, di, false);
                    } else {
                        gemm(k, m, n, ai, !trans_a, gi, false, di, false);
                    }
                }
                db
            });
            vec![da, db]
        }))
    }

    /// `y[.., out] = x[.., in] · wᵀ + b` with `w: [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sw.len() != 2 {
            return Err(Error::shape("linear", "weight rank", 2, sw.len()));
        }
        let (cout, cin) = (sw[0], sw[1]);
        if sx.last() != Some(&cin) {
            return Err(Error::shape(
                "linear",
                "input features",
                cin,
                sx.last().copied().unwrap_or(0),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::shape(
                    "linear",
                    "bias extent",
                    cout,
                    format!("{:?}", self.shape(b)),
                ));
            }
        }
        let rows = self.value(x).numel() / cin.max(1);
        let mut out = vec![0.0; rows * cout];
        gemm(
            rows,
            cin,
            cout,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            &mut out,
            false,
        );
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_exact_mut(cout) {
                row.iter_mut().zip(bv).for_each(|(o, b)| *o += b);
            }
        }
        let mut shape = sx.clone();
        *shape.last_mut().unwrap() = cout;
        let value = Tensor::new(&shape, out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(value, &parents, move |ctx| {
            let (xv, wv, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad);
            let dx = ctx.needs(0).then(|| {
                let mut dx = vec![0.0; rows * cin];
                gemm(rows, cout, cin, g, false, wv, false, &mut dx, false);
                dx
            });
            let dw = ctx.needs(1).then(|| {
                let mut dw = vec![0.0; cout * cin];
                gemm(cout, rows, cin, g, true, xv, false, &mut dw, false);
                dw
            });
            let mut grads = vec![dx, dw];
            if ctx.inputs.len() == 3 {
                grads.push(ctx.needs(2).then(|| {
                    let mut db = vec![0.0; cout];
                    for row in g.chunks_exact(cout) {
                        db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                    db
                }));
            }
            grads
        }))
    }
}
