use crate::error::{Error, Result};
use crate::model::GvtNet;
use crate::numerics::Tensor;

/// Anything that maps `[N, C, H, W]` to `[N, C, s·H, s·W]`.
pub trait SrModel {
    fn scale(&self) -> usize;
    fn upscale(&self, lr: &Tensor) -> Result<Tensor>;
}

impl SrModel for GvtNet {
    fn scale(&self) -> usize {
        self.config.scale
    }

    fn upscale(&self, lr: &Tensor) -> Result<Tensor> {
        GvtNet::upscale(self, lr)
    }
}

/// Pixel replication; commutes with every dihedral transform.
#[derive(Clone, Copy, Debug)]
pub struct NearestUpsampler {
    pub scale: usize,
}

impl SrModel for NearestUpsampler {
    fn scale(&self) -> usize {
        self.scale
    }

    fn upscale(&self, lr: &Tensor) -> Result<Tensor> {
        let s = self.scale;
        let shape = lr.shape();
        if shape.len() < 2 {
            return Err(Error::shape("nearest upsample", "rank", ">= 2", shape.len()));
        }
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let mut out_shape = shape.to_vec();
        let r = out_shape.len();
        out_shape[r - 2] = h * s;
        out_shape[r - 1] = w * s;
        let mut data = Vec::with_capacity(lr.numel() * s * s);
        for plane in lr.data().chunks_exact(h * w) {
            for y in 0..h * s {
                for x in 0..w * s {
                    data.push(plane[(y / s) * w + x / s]);
                }
            }
        }
        Tensor::new(&out_shape, data)
    }
}

/// A flip/rotation of the trailing two axes: horizontal flip (if `flip`)
/// followed by `rot` counter-clockwise quarter turns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Dihedral {
    pub rot: u8,
    pub flip: bool,
}

impl Dihedral {
    pub const IDENTITY: Dihedral = Dihedral { rot: 0, flip: false };

    pub fn all() -> [Dihedral; 8] {
        let mut out = [Self::IDENTITY; 8];
        for (i, d) in out.iter_mut().enumerate() {
            *d = Dihedral {
                rot: (i % 4) as u8,
                flip: i >= 4,
            };
        }
        out
    }

    pub fn inverse(self) -> Self {
        if self.flip {
            self
        } else {
            Dihedral {
                rot: (4 - self.rot % 4) % 4,
                flip: false,
            }
        }
    }

    /// `self` applied after `first`.
    pub fn after(self, first: Dihedral) -> Self {
        // R^a F^f · R^b F^g = R^(a ± b) F^(f xor g), sign flips when f is set
        let b = if self.flip { (4 - first.rot % 4) % 4 } else { first.rot % 4 };
        Dihedral {
            rot: (self.rot % 4 + b) % 4,
            flip: self.flip ^ first.flip,
        }
    }

    pub fn apply(self, x: &Tensor) -> Result<Tensor> {
        let mut t = if self.flip { flip_horizontal(x)? } else { x.clone() };
        for _ in 0..self.rot % 4 {
            t = rot90(&t)?;
        }
        Ok(t)
    }
}

fn trailing(x: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    let s = x.shape();
    if s.len() < 2 {
        return Err(Error::shape(op, "rank", ">= 2", s.len()));
    }
    Ok((s[s.len() - 2], s[s.len() - 1]))
}

/// Mirrors the last axis.
pub fn flip_horizontal(x: &Tensor) -> Result<Tensor> {
    let (h, w) = trailing(x, "flip_horizontal")?;
    let mut data = Vec::with_capacity(x.numel());
    for plane in x.data().chunks_exact((h * w).max(1)) {
        for y in 0..h {
            data.extend(plane[y * w..(y + 1) * w].iter().rev());
        }
    }
    Tensor::new(x.shape(), data)
}

/// Quarter turn counter-clockwise of the trailing `H × W` axes: `out[y][x] = in[x][W-1-y]`.
pub fn rot90(x: &Tensor) -> Result<Tensor> {
    let (h, w) = trailing(x, "rot90")?;
    let mut shape = x.shape().to_vec();
    let r = shape.len();
    shape.swap(r - 2, r - 1);
    let mut data = Vec::with_capacity(x.numel());
    for plane in x.data().chunks_exact((h * w).max(1)) {
        for y in 0..w {
            for xx in 0..h {
                data.push(plane[xx * w + (w - 1 - y)]);
            }
        }
    }
    Tensor::new(&shape, data)
}

/// Mean over the 8 dihedral transforms of `T⁻¹(model(T(lr)))`.
pub fn self_ensemble<M: SrModel + ?Sized>(model: &M, lr: &Tensor) -> Result<Tensor> {
    let mut acc: Option<Vec<f64>> = None;
    let mut shape = Vec::new();
    for t in Dihedral::all() {
        let out = model.upscale(&t.apply(lr)?)?;
        let back = t.inverse().apply(&out)?;
        match &mut acc {
            None => {
                shape = back.shape().to_vec();
                acc = Some(back.into_data());
            }
            Some(a) => {
                if back.shape() != shape.as_slice() {
                    return Err(Error::shape("self_ensemble", "output shape", format!("{shape:?}"), format!("{:?}", back.shape())));
                }
                a.iter_mut().zip(back.data()).for_each(|(s, v)| *s += v);
            }
        }
    }
    let data = acc.expect("eight transforms").into_iter().map(|v| v / 8.0).collect();
    Tensor::new(&shape, data)
}
