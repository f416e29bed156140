use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Index map for `out = x.permute(axes)`: `out.flat[i] = x.flat[map[i]]`.
pub fn permute_index(shape: &[usize], axes: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    let rank = shape.len();
    let mut seen = vec![false; rank];
    if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
        return Err(Error::InvalidArgument(format!(
            "permute axes {axes:?} invalid for rank {rank}"
        )));
    }
    let in_strides = Tensor::strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n: usize = shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    for _ in 0..n {
        map.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Ok((out_shape, map))
}

/// Index map for sub-pixel rearrangement `[N, C·r², H, W] -> [N, C, rH, rW]`.
pub fn pixel_shuffle_index(shape: &[usize], r: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let [n, cr, h, w]: [usize; 4] = shape
        .try_into()
        .map_err(|_| Error::shape("pixel_shuffle", "rank", 4, shape.len()))?;
    if r == 0 || cr % (r * r) != 0 {
        return Err(Error::divisibility("pixel_shuffle", "channel count", cr, r * r));
    }
    let c = cr / (r * r);
    let (oh, ow) = (h * r, w * r);
    let mut map = Vec::with_capacity(n * cr * h * w);
    for b in 0..n {
        for ch in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    let src_c = ch * r * r + (y % r) * r + (x % r);
                    map.push(((b * cr + src_c) * h + y / r) * w + x / r);
                }
            }
        }
    }
    Ok((vec![n, c, oh, ow], map))
}

/// Inverts a bijective gather map.
pub fn invert_index(map: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; map.len()];
    for (i, &m) in map.iter().enumerate() {
        inv[m] = i;
    }
    inv
}

impl Tape {
    /// `out.flat[i] = x.flat[index[i]]`; the backward pass scatter-adds, so
    /// repeated indices are allowed.
    pub fn gather(&mut self, x: Var, out_shape: &[usize], index: Vec<usize>) -> Result<Var> {
        let numel: usize = out_shape.iter().product();
        if index.len() != numel {
            return Err(Error::shape("gather", "index length", numel, index.len()));
        }
        let xv = self.value(x).data();
        let src_len = xv.len();
        if let Some(&bad) = index.iter().find(|&&i| i >= src_len) {
            return Err(Error::shape("gather", "source index", format!("< {src_len}"), bad));
        }
        let value = Tensor::new(out_shape, index.iter().map(|&i| xv[i]).collect())?;
        Ok(self.push(value, &[x], move |ctx| {
            let mut dx = vec![0.0; src_len];
            for (&i, g) in index.iter().zip(ctx.grad) {
                dx[i] += g;
            }
            vec![Some(dx)]
        }))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let (shape, map) = permute_index(self.shape(x), axes)?;
        self.gather(x, &shape, map)
    }

    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let (shape, map) = pixel_shuffle_index(self.shape(x), r)?;
        self.gather(x, &shape, map)
    }

    /// Inverse of [`Tape::pixel_shuffle`]: `[N, C, rH, rW] -> [N, C·r², H, W]`.
    pub fn pixel_unshuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("pixel_unshuffle", "rank", 4, s.len()));
        }
        if r == 0 || s[2] % r != 0 || s[3] % r != 0 {
            return Err(Error::divisibility("pixel_unshuffle", "spatial extent", s[2], r.max(1)));
        }
        let in_shape = [s[0], s[1] * r * r, s[2] / r, s[3] / r];
        let (_, map) = pixel_shuffle_index(&in_shape, r)?;
        self.gather(x, &in_shape, invert_index(&map))
    }
}
