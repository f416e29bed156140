use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

impl Tape {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                "operand shape",
                format!("{:?}", self.shape(a)),
                format!("{:?}", self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(av.shape(), data)?;
        Ok(self.push(value, &[a, b], |ctx| {
            vec![
                ctx.needs(0).then(|| ctx.grad.to_vec()),
                ctx.needs(1).then(|| ctx.grad.to_vec()),
            ]
        }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x - y).collect();
        let value = Tensor::new(av.shape(), data)?;
        Ok(self.push(value, &[a, b], |ctx| {
            vec![
                ctx.needs(0).then(|| ctx.grad.to_vec()),
                ctx.needs(1).then(|| ctx.grad.iter().map(|g| -g).collect()),
            ]
        }))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(av.shape(), data)?;
        Ok(self.push(value, &[a, b], |ctx| {
            let (a, b, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad);
            vec![
                ctx.needs(0)
                    .then(|| g.iter().zip(b).map(|(g, b)| g * b).collect()),
                ctx.needs(1)
                    .then(|| g.iter().zip(a).map(|(g, a)| g * a).collect()),
            ]
        }))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).map(|v| v * s);
        self.push(value, &[x], move |ctx| {
            vec![Some(ctx.grad.iter().map(|g| g * s).collect())]
        })
    }

    /// `x + b` where `b`'s shape is a trailing suffix of `x`'s shape.
    pub fn add_broadcast(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sb.len() > sx.len() || sx[sx.len() - sb.len()..] != *sb {
            return Err(Error::shape(
                "add_broadcast",
                "trailing dims",
                format!("{sb:?}"),
                format!("{sx:?}"),
            ));
        }
        let inner = self.value(b).numel();
        let mut value = self.value(x).clone();
        let bv = self.value(b).data();
        for chunk in value.data_mut().chunks_exact_mut(inner.max(1)) {
            chunk.iter_mut().zip(bv).for_each(|(v, b)| *v += b);
        }
        Ok(self.push(value, &[x, b], move |ctx| {
            let db = ctx.needs(1).then(|| {
                let mut db = vec![0.0; inner];
                for chunk in ctx.grad.chunks_exact(inner.max(1)) {
                    db.iter_mut().zip(chunk).for_each(|(d, g)| *d += g);
                }
                db
            });
            vec![ctx.needs(0).then(|| ctx.grad.to_vec()), db]
        }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        let n = self.value(x).numel();
        self.push(Tensor::scalar(total), &[x], move |ctx| {
            vec![Some(vec![ctx.grad[0]; n])]
        })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// GELU, tanh approximation: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(gelu);
        self.push(value, &[x], |ctx| {
            let x = ctx.inputs[0].data();
            vec![Some(
                x.iter()
                    .zip(ctx.grad)
                    .map(|(&x, g)| g * gelu_grad(x))
                    .collect(),
            )]
        })
    }

    /// Shape change with unchanged row-major data.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, &[x], |ctx| vec![Some(ctx.grad.to_vec())]))
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}
