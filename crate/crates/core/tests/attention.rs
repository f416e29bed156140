mod common;

use gvtnet::adjacency::{AdjacencyMatrix, AdjacencySet};
use gvtnet::attention::{
    graph_window_attention, merge_windows, qkv_project, relative_position_bias, relative_position_index,
    scaled_dot_product_attention, shift_mask, swin_window_attention, AttentionParams, MaskMode, QkvProjection,
    SHIFT_MASK_NEG,
};
use gvtnet::numerics::{grad_check, GradCheckConfig};
use gvtnet::{Result, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn random_adjacency(rng: &mut ChaCha8Rng, m: usize) -> AdjacencyMatrix {
    let mut bits = vec![0u8; m * m];
    for i in 0..m {
        bits[i * m + i] = 1;
        for j in 0..i {
            let e = u8::from(rng.random_bool(0.5));
            bits[i * m + j] = e;
            bits[j * m + i] = e;
        }
    }
    AdjacencyMatrix::new(m, bits).unwrap()
}

fn set_of(matrices: Vec<AdjacencyMatrix>) -> AdjacencySet {
    let n = matrices.len();
    AdjacencySet {
        window: 0,
        batch: 1,
        grid: (1, n),
        matrices,
    }
}

fn slice(t: &Tensor, b: usize, h: usize, m: usize, d: usize) -> Vec<f64> {
    let heads = t.shape()[1];
    let start = (b * heads + h) * m * d;
    t.data()[start..start + m * d].to_vec()
}

fn linear_params(tape: &mut Tape, ws: [Tensor; 3], c: usize, heads: usize) -> AttentionParams {
    let w = ws.map(|t| tape.constant(t));
    AttentionParams {
        qkv: QkvProjection::Linear { w },
        proj_w: tape.constant(Tensor::zeros(&[c, c, 1, 1])),
        proj_b: tape.constant(Tensor::zeros(&[c])),
        bias_table: None,
        heads,
        head_dim: c / heads,
    }
}

fn eye(c: usize) -> Tensor {
    let mut t = Tensor::zeros(&[c, c]);
    for i in 0..c {
        t.data_mut()[i * c + i] = 1.0;
    }
    t
}

#[test]
fn qkv_identity_projection_splits_heads() {
    let mut rng = common::rng(1);
    let (n, h, w, c, win, heads) = (2, 4, 4, 6, 2, 3);
    let x = common::uniform(&mut rng, &[n, h, w, c], -1.0, 1.0);
    let d = c / heads;
    // Depthwise centre tap 1 and pointwise identity is the identity map too.
    let mut dw = Tensor::zeros(&[c, 1, 3, 3]);
    for ch in 0..c {
        dw.data_mut()[ch * 9 + 4] = 1.0;
    }
    let pw = eye(c).reshape(&[c, c, 1, 1]).unwrap();
    for depthwise in [false, true] {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let mut params = linear_params(&mut tape, [eye(c), eye(c), eye(c)], c, heads);
        if depthwise {
            params.qkv = QkvProjection::DepthwiseSeparable {
                dw: [(); 3].map(|_| tape.constant(dw.clone())),
                pw: [(); 3].map(|_| tape.constant(pw.clone())),
            };
        }
        let qkv = qkv_project(&mut tape, xv, &params, win, 0).unwrap();
        for v in qkv {
            let t = tape.value(v);
            assert_eq!(t.shape(), &[n * 4, heads, 4, d]);
            for b in 0..n {
                for wi in 0..4 {
                    for head in 0..heads {
                        for tok in 0..4 {
                            for k in 0..d {
                                let y = (wi / 2) * 2 + tok / 2;
                                let xx = (wi % 2) * 2 + tok % 2;
                                let got = t.at(&[b * 4 + wi, head, tok, k]);
                                assert!((got - x.at(&[b, y, xx, head * d + k])).abs() < 1e-15);
                            }
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn qkv_zero_and_random_linear_oracle() {
    let mut rng = common::rng(2);
    let (c, heads) = (4, 2);
    let x = common::uniform(&mut rng, &[1, 2, 2, c], -1.0, 1.0);
    let ws = [(); 3].map(|_| common::uniform(&mut rng, &[c, c], -1.0, 1.0));
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let zero = linear_params(&mut tape, [(); 3].map(|_| Tensor::zeros(&[c, c])), c, heads);
    for v in qkv_project(&mut tape, xv, &zero, 2, 0).unwrap() {
        assert!(tape.value(v).data().iter().all(|&e| e == 0.0));
    }
    let params = linear_params(&mut tape, ws.clone(), c, heads);
    let qkv = qkv_project(&mut tape, xv, &params, 2, 0).unwrap();
    for (v, wt) in qkv.iter().zip(&ws) {
        for tok in 0..4 {
            for o in 0..c {
                let e: f64 = (0..c).map(|i| x.at(&[0, tok / 2, tok % 2, i]) * wt.at(&[o, i])).sum();
                let got = tape.value(*v).at(&[0, o / 2, tok, o % 2]);
                assert!((got - e).abs() < 1e-12);
            }
        }
    }
    let bad = linear_params(&mut tape, [(); 3].map(|_| Tensor::zeros(&[c, c])), c, 3);
    assert!(qkv_project(&mut tape, xv, &bad, 2, 0).is_err());
}

#[test]
fn graph_attention_matches_scalar_oracle() {
    let mut rng = common::rng(3);
    let (b, heads, m, d) = (3, 2, 4, 3);
    for mode in [MaskMode::Hadamard, MaskMode::Additive] {
        let [q, k, v] = [(); 3].map(|_| common::uniform(&mut rng, &[b, heads, m, d], -2.0, 2.0));
        let adj = set_of((0..b).map(|_| random_adjacency(&mut rng, m)).collect());
        let mut tape = Tape::new();
        let (qv, kv, vv) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
        let out = graph_window_attention(&mut tape, qv, kv, vv, &adj, mode).unwrap();
        let scale = 1.0 / (d as f64).sqrt();
        for bi in 0..b {
            let a = &adj.matrices[bi];
            for h in 0..heads {
                let expect = common::attention_head(
                    &slice(&q, bi, h, m, d),
                    &slice(&k, bi, h, m, d),
                    &slice(&v, bi, h, m, d),
                    m,
                    d,
                    |i, j, dot| match (mode, a.get(i, j)) {
                        (MaskMode::Hadamard, e) => dot * f64::from(u8::from(e)) * scale,
                        (MaskMode::Additive, true) => dot * scale,
                        (MaskMode::Additive, false) => f64::NEG_INFINITY,
                    },
                );
                let got = slice(tape.value(out), bi, h, m, d);
                for (g, e) in got.iter().zip(&expect) {
                    assert!((g - e).abs() < 1e-12, "{mode}: {g} vs {e}");
                }
            }
        }
    }
}

#[test]
fn additive_identity_adjacency_returns_values() {
    let mut rng = common::rng(4);
    let [q, k, v] = [(); 3].map(|_| common::uniform(&mut rng, &[2, 2, 9, 4], -3.0, 3.0));
    let adj = set_of(vec![AdjacencyMatrix::identity(9); 2]);
    let mut tape = Tape::new();
    let (qv, kv, vv) = (tape.constant(q), tape.constant(k), tape.constant(v.clone()));
    let out = graph_window_attention(&mut tape, qv, kv, vv, &adj, MaskMode::Additive).unwrap();
    assert_eq!(tape.value(out), &v);
}

#[test]
fn all_ones_adjacency_is_plain_attention() {
    let mut rng = common::rng(5);
    let [q, k, v] = [(); 3].map(|_| common::uniform(&mut rng, &[2, 2, 4, 2], -2.0, 2.0));
    let adj = set_of(vec![AdjacencyMatrix::full(4); 2]);
    let mut tape = Tape::new();
    let (qv, kv, vv) = (tape.constant(q), tape.constant(k), tape.constant(v));
    let plain = scaled_dot_product_attention(&mut tape, qv, kv, vv).unwrap();
    let swin = swin_window_attention(&mut tape, qv, kv, vv, None, None).unwrap();
    assert!(tape.value(plain).max_abs_diff(tape.value(swin)) < 1e-12);
    for mode in [MaskMode::Hadamard, MaskMode::Additive] {
        let g = graph_window_attention(&mut tape, qv, kv, vv, &adj, mode).unwrap();
        assert!(tape.value(g).max_abs_diff(tape.value(plain)) < 1e-12);
    }
}

/// Attention weights, recovered by attending over one-hot value rows.
/// Needs head dim == M so Q, K and the one-hot V share a shape.
fn weights(q: &Tensor, k: &Tensor, adj: &AdjacencySet, mode: MaskMode) -> Tensor {
    let s = q.shape();
    let (b, heads, m) = (s[0], s[1], s[2]);
    let mut eye_v = Tensor::zeros(&[b, heads, m, m]);
    for blk in 0..b * heads {
        for i in 0..m {
            eye_v.data_mut()[(blk * m + i) * m + i] = 1.0;
        }
    }
    let mut tape = Tape::new();
    let (qv, kv) = (tape.constant(q.clone()), tape.constant(k.clone()));
    let vv = tape.constant(eye_v);
    let out = graph_window_attention(&mut tape, qv, kv, vv, adj, mode).unwrap();
    tape.value(out).clone()
}

#[test]
fn additive_weights_vanish_off_graph() {
    let mut rng = common::rng(6);
    let m = 4;
    let q = common::uniform(&mut rng, &[3, 2, m, m], -5.0, 5.0);
    let k = common::uniform(&mut rng, &[3, 2, m, m], -5.0, 5.0);
    let adj = set_of((0..3).map(|_| random_adjacency(&mut rng, m)).collect());
    let w = weights(&q, &k, &adj, MaskMode::Additive);
    for bi in 0..3 {
        for h in 0..2 {
            for i in 0..m {
                let row: Vec<f64> = (0..m).map(|j| w.at(&[bi, h, i, j])).collect();
                let neighbor_sum: f64 = (0..m).filter(|&j| adj.matrices[bi].get(i, j)).map(|j| row[j]).sum();
                assert!((neighbor_sum - 1.0).abs() < 1e-12);
                for j in 0..m {
                    if !adj.matrices[bi].get(i, j) {
                        assert!(row[j] < 1e-40);
                    }
                }
            }
        }
    }
}

#[test]
fn shifted_masked_pairs_get_negligible_weight() {
    let mut rng = common::rng(7);
    let mask = shift_mask(4, 4, 2, 1).unwrap();
    let m = 4;
    let q = common::uniform(&mut rng, &[4, 1, m, m], -1.0, 1.0);
    let k = common::uniform(&mut rng, &[4, 1, m, m], -1.0, 1.0);
    let mut eye_v = Tensor::zeros(&[4, 1, m, m]);
    for blk in 0..4 {
        for i in 0..m {
            eye_v.data_mut()[(blk * m + i) * m + i] = 1.0;
        }
    }
    let mut tape = Tape::new();
    let (qv, kv, vv) = (tape.constant(q), tape.constant(k), tape.constant(eye_v));
    let out = swin_window_attention(&mut tape, qv, kv, vv, None, Some(&mask)).unwrap();
    let w = tape.value(out);
    let mut masked = 0;
    for (win, mm) in mask.masks.iter().enumerate() {
        for i in 0..m {
            for j in 0..m {
                if mm[i * m + j] == SHIFT_MASK_NEG {
                    masked += 1;
                    assert!(w.at(&[win, 0, i, j]) < 1e-40);
                }
            }
        }
    }
    assert!(masked > 0);
}

#[test]
fn relative_bias_index_examples() {
    assert_eq!(relative_position_index(1), vec![0]);
    let idx = relative_position_index(2);
    assert_eq!(idx[3], 0); // (0,0) - (1,1) = (-1,-1)
    assert_eq!(idx[3 * 4], 8); // mirrored offset (1,1)
    let w = 3;
    let span = 2 * w - 1;
    let m = w * w;
    let idx = relative_position_index(w);
    for i in 0..m {
        for j in 0..m {
            // index(Δ) + index(−Δ) == 2·centre
            assert_eq!(idx[i * m + j] + idx[j * m + i], 2 * ((w - 1) * span + (w - 1)));
        }
    }
    let mut tape = Tape::new();
    let table = tape.constant(Tensor::new(&[9, 2], (0..18).map(f64::from).collect()).unwrap());
    let b = relative_position_bias(&mut tape, table, 2).unwrap();
    let v = tape.value(b);
    assert_eq!(v.shape(), &[2, 4, 4]);
    assert_eq!(v.at(&[0, 0, 3]), 0.0);
    assert_eq!(v.at(&[1, 0, 3]), 1.0);
    assert_eq!(v.at(&[1, 3, 0]), 17.0);
    let bad = tape.constant(Tensor::zeros(&[8, 2]));
    assert!(relative_position_bias(&mut tape, bad, 2).is_err());
}

#[test]
fn shift_mask_matches_wrap_label_oracle() {
    for (h, w, win) in [(4, 4, 2), (8, 8, 4), (8, 12, 4), (6, 6, 3)] {
        for s in 0..win {
            let mask = shift_mask(h, w, win, s).unwrap();
            let m = win * win;
            for (k, mm) in mask.masks.iter().enumerate() {
                let (wy, wx) = (k / (w / win), k % (w / win));
                // Token at shifted position (y, x) came from ((y+s) mod H, (x+s) mod W);
                // it wrapped around iff y + s >= H.
                let label = |t: usize| {
                    let y = wy * win + t / win;
                    let x = wx * win + t % win;
                    (y + s >= h, x + s >= w)
                };
                for i in 0..m {
                    for j in 0..m {
                        let want = if label(i) == label(j) { 0.0 } else { SHIFT_MASK_NEG };
                        assert_eq!(mm[i * m + j], want, "{h}x{w} w{win} s{s} window {k}");
                        assert_eq!(mm[i * m + j], mm[j * m + i]);
                    }
                }
            }
        }
    }
    assert!(shift_mask(4, 4, 2, 2).is_err());
    assert!(shift_mask(5, 4, 2, 1).is_err());
}

fn check(params: Vec<(&str, Tensor)>, f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) {
    let named: Vec<(String, Tensor)> = params.into_iter().map(|(n, t)| (n.to_string(), t)).collect();
    let report = grad_check(f, &named, &GradCheckConfig::default()).unwrap();
    assert!(report.pass && report.max_rel_error < 1e-4, "{}: {:.3e}", report.worst_param, report.max_rel_error);
}

fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = common::rng(seed);
    let w = common::uniform(&mut rng, tape.shape(y), -1.0, 1.0);
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

#[test]
fn graph_attention_gradients() {
    let mut rng = common::rng(8);
    let qkv: Vec<Tensor> = (0..3).map(|_| common::uniform(&mut rng, &[2, 2, 4, 3], -1.0, 1.0)).collect();
    let adj = set_of((0..2).map(|_| random_adjacency(&mut rng, 4)).collect());
    for mode in [MaskMode::Hadamard, MaskMode::Additive] {
        let adj = adj.clone();
        check(
            vec![("q", qkv[0].clone()), ("k", qkv[1].clone()), ("v", qkv[2].clone())],
            move |t, v| {
                let o = graph_window_attention(t, v[0], v[1], v[2], &adj, mode)?;
                weighted_sum(t, o, 9)
            },
        );
    }
}

#[test]
fn swin_attention_gradients() {
    let mut rng = common::rng(10);
    let qkv: Vec<Tensor> = (0..3).map(|_| common::uniform(&mut rng, &[4, 2, 4, 2], -1.0, 1.0)).collect();
    let table = common::uniform(&mut rng, &[9, 2], -0.5, 0.5);
    let mask = shift_mask(4, 4, 2, 1).unwrap();
    check(
        vec![("q", qkv[0].clone()), ("k", qkv[1].clone()), ("v", qkv[2].clone()), ("table", table)],
        move |t, v| {
            let bias = relative_position_bias(t, v[3], 2)?;
            let o = swin_window_attention(t, v[0], v[1], v[2], Some(bias), Some(&mask))?;
            weighted_sum(t, o, 11)
        },
    );
}

#[test]
fn projection_and_windowing_gradients() {
    let mut rng = common::rng(12);
    let c = 4;
    let x = common::uniform(&mut rng, &[1, 4, 4, c], -1.0, 1.0);
    let dw = common::uniform(&mut rng, &[c, 1, 3, 3], -1.0, 1.0);
    let pw = common::uniform(&mut rng, &[c, c, 1, 1], -1.0, 1.0);
    check(vec![("x", x), ("dw", dw), ("pw", pw)], |t, v| {
        let params = AttentionParams {
            qkv: QkvProjection::DepthwiseSeparable {
                dw: [v[1]; 3],
                pw: [v[2]; 3],
            },
            proj_w: v[2],
            proj_b: v[2],
            bias_table: None,
            heads: 2,
            head_dim: 2,
        };
        let [q, k, val] = qkv_project(t, v[0], &params, 2, 1)?;
        let o = scaled_dot_product_attention(t, q, k, val)?;
        let merged = merge_windows(t, o, [1, 4, 4, c], 2, 1)?;
        weighted_sum(t, merged, 13)
    });
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn partition_round_trip(n in 1usize..3, gh in 1usize..4, gw in 1usize..4, win in 1usize..4, c in 1usize..4, seed in any::<u64>()) {
        let (h, w) = (gh * win, gw * win);
        let mut rng = common::rng(seed);
        let x = common::uniform(&mut rng, &[n, h, w, c], -1.0, 1.0);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let p = tape.window_partition(xv, win).unwrap();
        prop_assert_eq!(tape.shape(p), &[n * gh * gw, win * win, c][..]);
        let back = tape.window_reverse(p, win, n, h, w).unwrap();
        prop_assert_eq!(tape.value(back), &x);
        let shift = rng.random_range(0..win);
        let heads = 1;
        let dims = [n, h, w, c];
        let idx = gvtnet::attention::window_heads_index(dims, win, heads, shift);
        let windowed = tape.gather(xv, &[n * gh * gw, heads, win * win, c], idx).unwrap();
        let merged = merge_windows(&mut tape, windowed, dims, win, shift).unwrap();
        prop_assert_eq!(tape.value(merged), &x);
    }

    #[test]
    fn attention_is_permutation_equivariant(seed in any::<u64>(), additive in any::<bool>()) {
        let mut rng = common::rng(seed);
        let (m, d) = (5, 3);
        let mode = if additive { MaskMode::Additive } else { MaskMode::Hadamard };
        let [q, k, v] = [(); 3].map(|_| common::uniform(&mut rng, &[1, 2, m, d], -2.0, 2.0));
        let a = random_adjacency(&mut rng, m);
        let mut perm: Vec<usize> = (0..m).collect();
        perm.shuffle(&mut rng);
        let permute_rows = |t: &Tensor| {
            let mut out = t.clone();
            for h in 0..2 {
                for i in 0..m {
                    for c in 0..d {
                        out.data_mut()[(h * m + i) * d + c] = t.data()[(h * m + perm[i]) * d + c];
                    }
                }
            }
            out
        };
        let mut tape = Tape::new();
        let (qv, kv, vv) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
        let base = graph_window_attention(&mut tape, qv, kv, vv, &set_of(vec![a.clone()]), mode).unwrap();
        let (qp, kp, vp) = (tape.constant(permute_rows(&q)), tape.constant(permute_rows(&k)), tape.constant(permute_rows(&v)));
        let moved = graph_window_attention(&mut tape, qp, kp, vp, &set_of(vec![a.permuted(&perm)]), mode).unwrap();
        prop_assert!(tape.value(moved).max_abs_diff(&permute_rows(tape.value(base))) < 1e-12);
    }

    #[test]
    fn output_is_convex_combination_of_values(seed in any::<u64>(), additive in any::<bool>(), m in 1usize..7) {
        let mut rng = common::rng(seed);
        let d = 2;
        let mode = if additive { MaskMode::Additive } else { MaskMode::Hadamard };
        let [q, k, v] = [(); 3].map(|_| common::uniform(&mut rng, &[2, 1, m, d], -4.0, 4.0));
        let adj = set_of((0..2).map(|_| random_adjacency(&mut rng, m)).collect());
        let mut tape = Tape::new();
        let (qv, kv, vv) = (tape.constant(q), tape.constant(k), tape.constant(v.clone()));
        let out = graph_window_attention(&mut tape, qv, kv, vv, &adj, mode).unwrap();
        for b in 0..2 {
            for c in 0..d {
                let col: Vec<f64> = (0..m).map(|j| v.at(&[b, 0, j, c])).collect();
                let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                for i in 0..m {
                    let o = tape.value(out).at(&[b, 0, i, c]);
                    prop_assert!(o >= lo - 1e-12 && o <= hi + 1e-12);
                }
            }
        }
    }
}
