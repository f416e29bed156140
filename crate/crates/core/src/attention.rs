//! Windowed multi-head attention.
//!
//! Two kernels share the same layout, `[B, heads, M, d]` with `B` counting
//! (image, window) pairs and `M = w²` tokens per window:
//!
//! * graph window attention, whose logits are masked by a per-window
//!   adjacency matrix, either multiplicatively (`QKᵀ ⊙ A / √d`) or additively;
//! * Swin window attention, `QKᵀ/√d + B + mask`, with a learned relative
//!   position bias and the cyclic-shift mask.

use std::fmt;
use std::str::FromStr;

use crate::adjacency::AdjacencySet;
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Additive logit for token pairs that straddle a shifted-window seam.
pub const SHIFT_MASK_NEG: f64 = -100.0;

/// Additive logit for non-neighbors in [`MaskMode::Additive`]. Far enough
/// below any real logit that `exp` underflows to exactly zero.
pub const GRAPH_MASK_NEG: f64 = -1e9;

/// How the adjacency enters graph attention.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum MaskMode {
    /// `softmax((QKᵀ ⊙ A) / √d)`: non-neighbor logits become 0.
    Hadamard,
    /// `softmax(QKᵀ/√d + M)` with `M = GRAPH_MASK_NEG` where `A == 0`.
    Additive,
}

impl fmt::Display for MaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskMode::Hadamard => "hadamard",
            MaskMode::Additive => "additive",
        })
    }
}

impl FromStr for MaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "hadamard" => Ok(MaskMode::Hadamard),
            "additive" => Ok(MaskMode::Additive),
            other => Err(Error::config(
                "mask_mode",
                format!("`{other}` is not hadamard or additive"),
            )),
        }
    }
}

fn nhwc(op: &'static str, shape: &[usize]) -> Result<[usize; 4]> {
    shape
        .try_into()
        .map_err(|_| Error::shape(op, "rank", 4, shape.len()))
}

fn check_window(op: &'static str, h: usize, w: usize, window: usize) -> Result<()> {
    if window == 0 {
        return Err(Error::InvalidArgument(format!("{op}: window must be >= 1")));
    }
    if h % window != 0 {
        return Err(Error::divisibility(op, "height", h, window));
    }
    if w % window != 0 {
        return Err(Error::divisibility(op, "width", w, window));
    }
    Ok(())
}

/// Gather map from `[N, H, W, C]` to `[N·nW, heads, w², C/heads]`, reading the
/// map cyclically shifted by `shift` (output position `(y, x)` takes input
/// `((y + shift) mod H, (x + shift) mod W)`).
pub fn window_heads_index(
    dims: [usize; 4],
    window: usize,
    heads: usize,
    shift: usize,
) -> Vec<usize> {
    let [n, h, w, c] = dims;
    let d = c / heads;
    let (gh, gw) = (h / window, w / window);
    let mut map = Vec::with_capacity(n * h * w * c);
    for b in 0..n {
        for wy in 0..gh {
            for wx in 0..gw {
                for head in 0..heads {
                    for r in 0..window {
                        for col in 0..window {
                            let y = (wy * window + r + shift) % h;
                            let x = (wx * window + col + shift) % w;
                            let base = ((b * h + y) * w + x) * c + head * d;
                            map.extend(base..base + d);
                        }
                    }
                }
            }
        }
    }
    map
}

impl Tape {
    /// `[N, H, W, C] -> [N·(H/w)·(W/w), w², C]`, windows in row-major order.
    pub fn window_partition(&mut self, x: Var, window: usize) -> Result<Var> {
        let [n, h, w, c] = nhwc("window_partition", self.shape(x))?;
        check_window("window_partition", h, w, window)?;
        let map = window_heads_index([n, h, w, c], window, 1, 0);
        let windows = n * (h / window) * (w / window);
        self.gather(x, &[windows, window * window, c], map)
    }

    /// Inverse of [`Tape::window_partition`] back to `[n, h, w, C]`.
    pub fn window_reverse(&mut self, x: Var, window: usize, n: usize, h: usize, w: usize) -> Result<Var> {
        check_window("window_reverse", h, w, window)?;
        let s = self.shape(x).to_vec();
        let expected = [n * (h / window) * (w / window), window * window];
        if s.len() != 3 || s[..2] != expected {
            return Err(Error::shape(
                "window_reverse",
                "windowed shape",
                format!("{expected:?} + [C]"),
                format!("{s:?}"),
            ));
        }
        let c = s[2];
        let map = window_heads_index([n, h, w, c], window, 1, 0);
        self.gather(x, &[n, h, w, c], crate::numerics::shape::invert_index(&map))
    }
}

/// Projection weights of one attention layer.
#[derive(Clone, Debug)]
pub enum QkvProjection {
    /// Depthwise `3×3` conv then pointwise conv, one pair per Q, K, V.
    DepthwiseSeparable { dw: [Var; 3], pw: [Var; 3] },
    /// Per-token linear maps `[C, C]`.
    Linear { w: [Var; 3] },
}

/// Parameters of one windowed attention layer, as tape variables.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub qkv: QkvProjection,
    pub proj_w: Var,
    pub proj_b: Var,
    /// `[(2w−1)², heads]`; `None` for graph layers.
    pub bias_table: Option<Var>,
    pub heads: usize,
    pub head_dim: usize,
}

impl AttentionParams {
    pub fn validate(&self, tape: &Tape, channels: usize, window: usize) -> Result<()> {
        if self.heads == 0 || self.heads * self.head_dim != channels {
            return Err(Error::shape(
                "attention",
                "heads × head_dim",
                channels,
                self.heads * self.head_dim,
            ));
        }
        if let Some(t) = self.bias_table {
            let want = [(2 * window - 1) * (2 * window - 1), self.heads];
            if tape.shape(t) != want {
                return Err(Error::shape(
                    "attention",
                    "relative position table",
                    format!("{want:?}"),
                    format!("{:?}", tape.shape(t)),
                ));
            }
        }
        Ok(())
    }
}

/// Projects `x: [N, H, W, C]` to windowed, head-split Q, K, V of shape
/// `[N·nW, heads, w², d]`. Convolutions see the unshifted map; the cyclic
/// shift is applied to their outputs.
pub fn qkv_project(
    tape: &mut Tape,
    x: Var,
    params: &AttentionParams,
    window: usize,
    shift: usize,
) -> Result<[Var; 3]> {
    let dims = nhwc("qkv_project", tape.shape(x))?;
    let [n, h, w, c] = dims;
    check_window("qkv_project", h, w, window)?;
    params.validate(tape, c, window)?;
    let projected: [Var; 3] = match &params.qkv {
        QkvProjection::Linear { w: ws } => {
            let mut out = [x; 3];
            for (o, &wt) in out.iter_mut().zip(ws) {
                *o = tape.linear(x, wt, None)?;
            }
            out
        }
        QkvProjection::DepthwiseSeparable { dw, pw } => {
            let nchw = tape.permute(x, &[0, 3, 1, 2])?;
            let mut out = [x; 3];
            for i in 0..3 {
                let y = tape.depthwise_separable_conv(nchw, dw[i], pw[i])?;
                out[i] = tape.permute(y, &[0, 2, 3, 1])?;
            }
            out
        }
    };
    let windows = n * (h / window) * (w / window);
    let shape = [windows, params.heads, window * window, params.head_dim];
    let mut out = projected;
    for v in out.iter_mut() {
        let c_out = tape.shape(*v)[3];
        if c_out != c {
            return Err(Error::shape("qkv_project", "projected channels", c, c_out));
        }
        *v = tape.gather(*v, &shape, window_heads_index(dims, window, params.heads, shift))?;
    }
    Ok(out)
}

/// Inverse of the windowing in [`qkv_project`]: `[N·nW, heads, w², d] -> [N, H, W, C]`.
pub fn merge_windows(tape: &mut Tape, x: Var, dims: [usize; 4], window: usize, shift: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let heads = s.get(1).copied().unwrap_or(1).max(1);
    let map = window_heads_index(dims, window, heads, shift);
    if map.len() != tape.value(x).numel() {
        return Err(Error::shape("merge_windows", "element count", map.len(), tape.value(x).numel()));
    }
    tape.gather(x, &dims, crate::numerics::shape::invert_index(&map))
}

fn check_qkv(tape: &Tape, q: Var, k: Var, v: Var) -> Result<[usize; 4]> {
    let dims: [usize; 4] = nhwc("attention", tape.shape(q))?;
    for (name, t) in [("K", k), ("V", v)] {
        if tape.shape(t) != dims {
            return Err(Error::shape(
                "attention",
                name,
                format!("{dims:?}"),
                format!("{:?}", tape.shape(t)),
            ));
        }
    }
    Ok(dims)
}

fn finish(tape: &mut Tape, scores: Var, v: Var) -> Result<Var> {
    let attn = tape.softmax_lastdim(scores);
    tape.bmm(attn, v, false, false)
}

/// Plain `softmax(QKᵀ/√d) V`.
pub fn scaled_dot_product_attention(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<Var> {
    let [_, _, _, d] = check_qkv(tape, q, k, v)?;
    let scores = tape.bmm(q, k, false, true)?;
    let scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
    finish(tape, scores, v)
}

/// Expands per-window `[nW, M, M]` values to `[B, heads, M, M]` (window `b mod nW`).
fn expand_windows(per_window: &[f64], windows: usize, m: usize, batch: usize, heads: usize) -> Tensor {
    let mm = m * m;
    let mut data = Vec::with_capacity(batch * heads * mm);
    for b in 0..batch {
        let src = &per_window[(b % windows) * mm..(b % windows + 1) * mm];
        for _ in 0..heads {
            data.extend_from_slice(src);
        }
    }
    Tensor::new(&[batch, heads, m, m], data).expect("expanded mask")
}

/// Graph window attention over `[B, heads, M, d]` with one adjacency per window.
pub fn graph_window_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    adjacency: &AdjacencySet,
    mode: MaskMode,
) -> Result<Var> {
    let [b, heads, m, d] = check_qkv(tape, q, k, v)?;
    if adjacency.tokens_per_window() != m {
        return Err(Error::shape(
            "graph_window_attention",
            "adjacency extent",
            m,
            adjacency.tokens_per_window(),
        ));
    }
    if adjacency.len() != b {
        return Err(Error::shape("graph_window_attention", "adjacency count", b, adjacency.len()));
    }
    let bits = adjacency.to_tensor();
    let scale = 1.0 / (d as f64).sqrt();
    let scores = tape.bmm(q, k, false, true)?;
    let scores = match mode {
        MaskMode::Hadamard => {
            let a = tape.constant(expand_windows(bits.data(), b, m, b, heads));
            let masked = tape.mul(scores, a)?;
            tape.scale(masked, scale)
        }
        MaskMode::Additive => {
            let additive: Vec<f64> = bits
                .data()
                .iter()
                .map(|&a| if a == 1.0 { 0.0 } else { GRAPH_MASK_NEG })
                .collect();
            let mask = tape.constant(expand_windows(&additive, b, m, b, heads));
            let scaled = tape.scale(scores, scale);
            tape.add(scaled, mask)?
        }
    };
    finish(tape, scores, v)
}

/// Token-pair index into a `[(2w−1)², heads]` relative position table.
///
/// `index(i, j) = (Δrow + w − 1)·(2w − 1) + (Δcol + w − 1)` where `Δ` is the
/// position of token `i` minus that of token `j`.
pub fn relative_position_index(window: usize) -> Vec<usize> {
    let m = window * window;
    let span = 2 * window - 1;
    let mut idx = Vec::with_capacity(m * m);
    for i in 0..m {
        let (ri, ci) = (i / window, i % window);
        for j in 0..m {
            let (rj, cj) = (j / window, j % window);
            let dr = ri + window - 1 - rj;
            let dc = ci + window - 1 - cj;
            idx.push(dr * span + dc);
        }
    }
    idx
}

/// Expands a learned `[(2w−1)², heads]` table to `B: [heads, w², w²]`.
pub fn relative_position_bias(tape: &mut Tape, table: Var, window: usize) -> Result<Var> {
    let span = 2 * window - 1;
    let s = tape.shape(table).to_vec();
    if s.len() != 2 || s[0] != span * span {
        return Err(Error::shape(
            "relative_position_bias",
            "table rows",
            span * span,
            s.first().copied().unwrap_or(0),
        ));
    }
    let heads = s[1];
    let m = window * window;
    let rel = relative_position_index(window);
    let mut map = Vec::with_capacity(heads * m * m);
    for h in 0..heads {
        map.extend(rel.iter().map(|&r| r * heads + h));
    }
    tape.gather(table, &[heads, m, m], map)
}

/// Additive masks for the shifted-window pass, one `M×M` matrix per window.
#[derive(Clone, Debug, PartialEq)]
pub struct ShiftMask {
    pub shift: usize,
    pub window: usize,
    pub grid: (usize, usize),
    pub masks: Vec<Vec<f64>>,
}

impl ShiftMask {
    pub fn tokens_per_window(&self) -> usize {
        self.window * self.window
    }
}

fn region_bounds(extent: usize, window: usize, shift: usize) -> [usize; 2] {
    [extent - window, extent - shift]
}

fn region_of(pos: usize, bounds: [usize; 2]) -> usize {
    if pos < bounds[0] {
        0
    } else if pos < bounds[1] {
        1
    } else {
        2
    }
}

/// Builds the Swin shift mask: after a cyclic shift by `shift`, tokens that
/// came from different regions of the unshifted map must not attend to each
/// other.
pub fn shift_mask(h: usize, w: usize, window: usize, shift: usize) -> Result<ShiftMask> {
    check_window("shift_mask", h, w, window)?;
    if shift >= window {
        return Err(Error::InvalidArgument(format!(
            "shift_mask: shift {shift} must be < window {window}"
        )));
    }
    let (gh, gw) = (h / window, w / window);
    let m = window * window;
    let (hb, wb) = (region_bounds(h, window, shift), region_bounds(w, window, shift));
    let mut masks = Vec::with_capacity(gh * gw);
    for wy in 0..gh {
        for wx in 0..gw {
            let labels: Vec<usize> = (0..m)
                .map(|t| {
                    let y = wy * window + t / window;
                    let x = wx * window + t % window;
                    if shift == 0 {
                        0
                    } else {
                        region_of(y, hb) * 3 + region_of(x, wb)
                    }
                })
                .collect();
            let mask = (0..m * m)
                .map(|idx| {
                    if labels[idx / m] == labels[idx % m] {
                        0.0
                    } else {
                        SHIFT_MASK_NEG
                    }
                })
                .collect();
            masks.push(mask);
        }
    }
    Ok(ShiftMask {
        shift,
        window,
        grid: (gh, gw),
        masks,
    })
}

/// Swin window attention: `softmax(QKᵀ/√d + B + mask) V`.
///
/// `bias` is `[heads, M, M]`; the mask applies window `b mod nW` to batch row `b`.
pub fn swin_window_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    bias: Option<Var>,
    mask: Option<&ShiftMask>,
) -> Result<Var> {
    let [b, heads, m, d] = check_qkv(tape, q, k, v)?;
    let scores = tape.bmm(q, k, false, true)?;
    let mut scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
    if let Some(bias) = bias {
        if tape.shape(bias) != [heads, m, m] {
            return Err(Error::shape(
                "swin_window_attention",
                "bias",
                format!("[{heads}, {m}, {m}]"),
                format!("{:?}", tape.shape(bias)),
            ));
        }
        scores = tape.add_broadcast(scores, bias)?;
    }
    if let Some(mask) = mask {
        let windows = mask.masks.len();
        if mask.tokens_per_window() != m || windows == 0 || b % windows != 0 {
            return Err(Error::shape(
                "swin_window_attention",
                "shift mask windows",
                format!("{windows} windows of {m} tokens dividing {b}"),
                format!("{} windows of {} tokens", windows, mask.tokens_per_window()),
            ));
        }
        if mask.shift > 0 {
            let flat: Vec<f64> = mask.masks.iter().flatten().copied().collect();
            let mt = tape.constant(expand_windows(&flat, windows, m, b, heads));
            scores = tape.add(scores, mt)?;
        }
    }
    finish(tape, scores, v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp_partition_first_window() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[1, 4, 4, 1], |i| i as f64));
        let y = tape.window_partition(x, 2).unwrap();
        assert_eq!(tape.shape(y), &[4, 4, 1]);
        assert_eq!(&tape.value(y).data()[..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(&tape.value(y).data()[4..8], &[2.0, 3.0, 6.0, 7.0]);
        let back = tape.window_reverse(y, 2, 1, 4, 4).unwrap();
        assert_eq!(tape.value(back), tape.value(x));
    }

    #[test]
    fn single_window_keeps_row_major_tokens() {
        let mut tape = Tape::new();
        let xv = Tensor::from_fn(&[1, 3, 3, 2], |i| i as f64);
        let x = tape.constant(xv.clone());
        let y = tape.window_partition(x, 3).unwrap();
        assert_eq!(tape.value(y).data(), xv.data());
    }

    #[test]
    fn partition_rejects_indivisible() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 6, 4, 1]));
        assert!(matches!(tape.window_partition(x, 4), Err(Error::Divisibility { .. })));
    }

    #[test]
    fn relative_index_w2() {
        let idx = relative_position_index(2);
        // token 0 at (0,0), token 3 at (1,1): offset (-1,-1) is the first row
        assert_eq!(idx[3], 0);
        assert_eq!(idx[3 * 4], 8);
        assert_eq!(idx[0], 4);
        assert_eq!(relative_position_index(1), vec![0]);
    }

    #[test]
    fn relative_bias_w1_reads_single_row() {
        let mut tape = Tape::new();
        let t = tape.constant(Tensor::new(&[1, 3], vec![0.5, -1.0, 2.0]).unwrap());
        let b = relative_position_bias(&mut tape, t, 1).unwrap();
        assert_eq!(tape.shape(b), &[3, 1, 1]);
        assert_eq!(tape.value(b).data(), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn zero_shift_mask_is_zero() {
        let m = shift_mask(8, 8, 4, 0).unwrap();
        assert!(m.masks.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn shift_mask_4x4_w2_s1() {
        let m = shift_mask(4, 4, 2, 1).unwrap();
        assert_eq!(m.masks.len(), 4);
        // top-left window lies wholly inside region 0
        assert!(m.masks[0].iter().all(|&v| v == 0.0));
        // bottom-right window mixes four regions: tokens 0 and 3 differ
        let br = &m.masks[3];
        assert_eq!(br[3], SHIFT_MASK_NEG);
        assert_eq!(br[0], 0.0);
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(br[i * 4 + j], br[j * 4 + i]);
            }
        }
        assert!(shift_mask(4, 4, 2, 2).is_err());
    }

    #[test]
    fn mask_mode_parse() {
        assert_eq!("additive".parse::<MaskMode>().unwrap(), MaskMode::Additive);
        assert!("both".parse::<MaskMode>().is_err());
    }
}
