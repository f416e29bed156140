//! Per-window binary adjacency between attention tokens.
//!
//! Each spatial position inside a `w×w` attention window is a graph node whose
//! feature is its channel vector. Two nodes are linked when their Minkowski
//! distance passes the threshold test.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Minkowski order.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum MinkowskiP {
    One,
    Two,
    Inf,
}

impl fmt::Display for MinkowskiP {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MinkowskiP::One => "1",
            MinkowskiP::Two => "2",
            MinkowskiP::Inf => "inf",
        })
    }
}

impl FromStr for MinkowskiP {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "1" => Ok(MinkowskiP::One),
            "2" => Ok(MinkowskiP::Two),
            "inf" | "infinity" | "∞" => Ok(MinkowskiP::Inf),
            other => Err(Error::config("minkowski_p", format!("`{other}` is not one of 1, 2, inf"))),
        }
    }
}

/// Which side of the threshold counts as a neighbor.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Comparison {
    /// `d > T` links two nodes.
    GreaterThan,
    /// `d < T` links two nodes.
    LessThan,
}

impl fmt::Display for Comparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Comparison::GreaterThan => "gt",
            Comparison::LessThan => "lt",
        })
    }
}

impl FromStr for Comparison {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "gt" => Ok(Comparison::GreaterThan),
            "lt" => Ok(Comparison::LessThan),
            other => Err(Error::config("adjacency_compare", format!("`{other}` is not gt or lt"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdjacencyConfig {
    pub p: MinkowskiP,
    pub threshold: f64,
    /// Scale tokens to unit Euclidean norm before measuring distance.
    pub normalize_tokens: bool,
    pub comparison: Comparison,
    pub self_loops: bool,
}

impl Default for AdjacencyConfig {
    fn default() -> Self {
        Self {
            p: MinkowskiP::Two,
            threshold: 0.75,
            normalize_tokens: true,
            comparison: Comparison::GreaterThan,
            self_loops: true,
        }
    }
}

impl AdjacencyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold >= 0.0) || !self.threshold.is_finite() {
            return Err(Error::config(
                "threshold",
                format!("{} must be finite and >= 0", self.threshold),
            ));
        }
        Ok(())
    }
}

pub fn minkowski_distance(a: &[f64], b: &[f64], p: MinkowskiP) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("minkowski_distance", "vector length", a.len(), b.len()));
    }
    Ok(minkowski_unchecked(a, b, p))
}

fn minkowski_unchecked(a: &[f64], b: &[f64], p: MinkowskiP) -> f64 {
    let diffs = a.iter().zip(b).map(|(x, y)| (x - y).abs());
    match p {
        MinkowskiP::One => diffs.sum(),
        MinkowskiP::Two => diffs.map(|d| d * d).sum::<f64>().sqrt(),
        MinkowskiP::Inf => diffs.fold(0.0, f64::max),
    }
}

fn unit_normalized(token: &[f64]) -> Vec<f64> {
    let norm = token.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        token.to_vec()
    } else {
        token.iter().map(|v| v / norm).collect()
    }
}

/// Symmetric `[M, M]` distance matrix over the rows of `tokens: [M, C]`.
pub fn pairwise_distances(tokens: &Tensor, cfg: &AdjacencyConfig) -> Result<Tensor> {
    let &[m, c] = tokens.shape() else {
        return Err(Error::shape("pairwise_distances", "token rank", 2, tokens.rank()));
    };
    let rows: Vec<Vec<f64>> = tokens
        .data()
        .chunks_exact(c.max(1))
        .take(m)
        .map(|t| {
            if cfg.normalize_tokens {
                unit_normalized(t)
            } else {
                t.to_vec()
            }
        })
        .collect();
    let mut out = vec![0.0; m * m];
    for i in 0..m {
        for j in i + 1..m {
            let d = if c == 0 { 0.0 } else { minkowski_unchecked(&rows[i], &rows[j], cfg.p) };
            out[i * m + j] = d;
            out[j * m + i] = d;
        }
    }
    Tensor::new(&[m, m], out)
}

/// Binary `M×M` matrix, row-major, entries 0 or 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AdjacencyMatrix {
    m: usize,
    bits: Vec<u8>,
}

impl AdjacencyMatrix {
    pub fn new(m: usize, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != m * m {
            return Err(Error::shape("adjacency", "entry count", m * m, bits.len()));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::InvalidArgument("adjacency entries must be 0 or 1".into()));
        }
        Ok(Self { m, bits })
    }

    pub fn full(m: usize) -> Self {
        Self { m, bits: vec![1; m * m] }
    }

    pub fn identity(m: usize) -> Self {
        let bits = (0..m * m).map(|i| u8::from(i / m == i % m)).collect();
        Self { m, bits }
    }

    pub fn size(&self) -> usize {
        self.m
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.m + j] == 1
    }

    pub fn edge_count(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    /// Fraction of the `M²` entries that are set.
    pub fn density(&self) -> f64 {
        self.edge_count() as f64 / (self.m * self.m) as f64
    }

    /// Nodes with no edge to any other node (self-loops ignored).
    pub fn isolated_nodes(&self) -> usize {
        (0..self.m)
            .filter(|&i| (0..self.m).all(|j| j == i || !self.get(i, j)))
            .count()
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.m).all(|i| (0..i).all(|j| self.get(i, j) == self.get(j, i)))
    }

    /// Permutes nodes: `out[i][j] = self[perm[i]][perm[j]]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let m = self.m;
        let bits = (0..m * m)
            .map(|idx| self.bits[perm[idx / m] * m + perm[idx % m]])
            .collect();
        Self { m, bits }
    }
}

/// Thresholds a distance matrix into an adjacency matrix.
pub fn build_adjacency(distances: &Tensor, cfg: &AdjacencyConfig) -> Result<AdjacencyMatrix> {
    let &[m, m2] = distances.shape() else {
        return Err(Error::shape("build_adjacency", "rank", 2, distances.rank()));
    };
    if m != m2 {
        return Err(Error::shape("build_adjacency", "square extent", m, m2));
    }
    let d = distances.data();
    let linked = |v: f64| match cfg.comparison {
        Comparison::GreaterThan => v > cfg.threshold,
        Comparison::LessThan => v < cfg.threshold,
    };
    let mut bits = vec![0u8; m * m];
    for i in 0..m {
        for j in i..m {
            // Read one triangle so the result is symmetric by construction.
            let e = if i == j && cfg.self_loops {
                1
            } else {
                u8::from(linked(d[i * m + j]))
            };
            bits[i * m + j] = e;
            bits[j * m + i] = e;
        }
    }
    AdjacencyMatrix::new(m, bits)
}

/// Adjacency matrices for every attention window of a feature batch.
///
/// Windows are ordered by image, then window row, then window column; tokens
/// within a window are in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdjacencySet {
    pub window: usize,
    pub batch: usize,
    pub grid: (usize, usize),
    pub matrices: Vec<AdjacencyMatrix>,
}

impl AdjacencySet {
    /// Windows per image.
    pub fn windows_per_image(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    /// Matrix extent; `window²` unless the set was built by hand.
    pub fn tokens_per_window(&self) -> usize {
        self.matrices.first().map_or(self.window * self.window, |m| m.size())
    }

    pub fn len(&self) -> usize {
        self.matrices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matrices.is_empty()
    }

    /// Every matrix set to all-ones.
    pub fn all_ones(batch: usize, grid: (usize, usize), window: usize) -> Self {
        let m = window * window;
        Self {
            window,
            batch,
            grid,
            matrices: vec![AdjacencyMatrix::full(m); batch * grid.0 * grid.1],
        }
    }

    /// One line per window: the flattened 0/1 matrix, comma separated.
    pub fn to_flat_csv(&self) -> String {
        let mut out = String::new();
        for mat in &self.matrices {
            let line: Vec<&str> = mat.bits.iter().map(|&b| if b == 1 { "1" } else { "0" }).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }

    /// Concatenated matrices as a `[windows, M, M]` 0/1 tensor.
    pub fn to_tensor(&self) -> Tensor {
        let m = self.tokens_per_window();
        let data = self
            .matrices
            .iter()
            .flat_map(|mat| mat.bits.iter().map(|&b| b as f64))
            .collect();
        Tensor::new(&[self.matrices.len(), m, m], data).expect("adjacency tensor")
    }
}

/// Gathers the `[M, C]` tokens of one window from an NCHW feature map.
pub fn window_tokens(features: &Tensor, image: usize, wy: usize, wx: usize, window: usize) -> Tensor {
    let s = features.shape();
    let (c, h, w) = (s[1], s[2], s[3]);
    let mut data = Vec::with_capacity(window * window * c);
    for r in 0..window {
        for col in 0..window {
            let (y, x) = (wy * window + r, wx * window + col);
            for ch in 0..c {
                data.push(features.data()[((image * c + ch) * h + y) * w + x]);
            }
        }
    }
    Tensor::new(&[window * window, c], data).expect("window tokens")
}

/// Recomputes the adjacency of every `window×window` block of `features: [N,C,H,W]`.
pub fn update_adjacency(features: &Tensor, window: usize, cfg: &AdjacencyConfig) -> Result<AdjacencySet> {
    let &[n, _, h, w] = features.shape() else {
        return Err(Error::shape("update_adjacency", "feature rank", 4, features.rank()));
    };
    if window == 0 {
        return Err(Error::InvalidArgument("window must be >= 1".into()));
    }
    if h % window != 0 {
        return Err(Error::divisibility("update_adjacency", "height", h, window));
    }
    if w % window != 0 {
        return Err(Error::divisibility("update_adjacency", "width", w, window));
    }
    cfg.validate()?;
    let grid = (h / window, w / window);
    let mut matrices = Vec::with_capacity(n * grid.0 * grid.1);
    for image in 0..n {
        for wy in 0..grid.0 {
            for wx in 0..grid.1 {
                let tokens = window_tokens(features, image, wy, wx, window);
                let d = pairwise_distances(&tokens, cfg)?;
                matrices.push(build_adjacency(&d, cfg)?);
            }
        }
    }
    Ok(AdjacencySet {
        window,
        batch: n,
        grid,
        matrices,
    })
}
