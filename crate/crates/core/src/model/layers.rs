//! Forward pass of the network, one function per architectural level.

use super::config::NetConfig;
use super::params::{ParamVars, Scope};
use crate::adjacency::{update_adjacency, AdjacencySet};
use crate::attention::{
    graph_window_attention, merge_windows, qkv_project, relative_position_bias, shift_mask,
    swin_window_attention, AttentionParams, QkvProjection,
};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Var};

pub const LN_EPS: f64 = 1e-5;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum LayerKind {
    /// Swin layer: relative position bias, optional shifted windows.
    Stl,
    /// Graph layer: adjacency-masked attention, never shifted.
    Gvtl,
}

/// Side information collected during a forward pass.
#[derive(Clone, Debug, Default)]
pub struct ForwardTrace {
    /// Number of adjacency recomputations.
    pub adjacency_updates: usize,
    /// Adjacency used by each group, in group order.
    pub adjacency: Vec<AdjacencySet>,
}

fn nchw(tape: &Tape, x: Var, op: &'static str) -> Result<[usize; 4]> {
    tape.shape(x)
        .try_into()
        .map_err(|_| Error::shape(op, "rank", 4, tape.shape(x).len()))
}

fn attention_params(scope: &Scope, kind: LayerKind, cfg: &NetConfig) -> Result<AttentionParams> {
    let qkv = if scope.has("attn.q.w") {
        QkvProjection::Linear {
            w: [scope.var("attn.q.w")?, scope.var("attn.k.w")?, scope.var("attn.v.w")?],
        }
    } else {
        QkvProjection::DepthwiseSeparable {
            dw: [scope.var("attn.q.dw")?, scope.var("attn.k.dw")?, scope.var("attn.v.dw")?],
            pw: [scope.var("attn.q.pw")?, scope.var("attn.k.pw")?, scope.var("attn.v.pw")?],
        }
    };
    Ok(AttentionParams {
        qkv,
        proj_w: scope.var("attn.proj.w")?,
        proj_b: scope.var("attn.proj.b")?,
        bias_table: match kind {
            LayerKind::Stl => Some(scope.var("attn.rpb")?),
            LayerKind::Gvtl => None,
        },
        heads: cfg.heads,
        head_dim: cfg.head_dim(),
    })
}

/// Pre-norm transformer layer on `x: [N, C, H, W]`:
/// `x + Attn(LN(x))`, then `+ MLP(LN(·))`.
pub fn transformer_layer(
    tape: &mut Tape,
    x: Var,
    kind: LayerKind,
    adjacency: Option<&AdjacencySet>,
    shift: usize,
    scope: &Scope,
    cfg: &NetConfig,
) -> Result<Var> {
    let [n, c, h, w] = nchw(tape, x, "transformer_layer")?;
    let win = cfg.window;
    let dims = [n, h, w, c];
    let shift = match kind {
        LayerKind::Stl => shift,
        LayerKind::Gvtl => 0,
    };
    let tokens = tape.permute(x, &[0, 2, 3, 1])?;
    let normed = tape.layer_norm(tokens, scope.var("norm1.gamma")?, scope.var("norm1.beta")?, LN_EPS)?;
    let params = attention_params(scope, kind, cfg)?;
    let [q, k, v] = qkv_project(tape, normed, &params, win, shift)?;
    let attended = match kind {
        LayerKind::Stl => {
            let table = params.bias_table.expect("swin layer bias table");
            let bias = relative_position_bias(tape, table, win)?;
            let mask = (shift > 0).then(|| shift_mask(h, w, win, shift)).transpose()?;
            swin_window_attention(tape, q, k, v, Some(bias), mask.as_ref())?
        }
        LayerKind::Gvtl => {
            let adj = adjacency.ok_or_else(|| {
                Error::InvalidArgument(format!("{}: graph layer needs an adjacency set", scope.prefix()))
            })?;
            if adj.batch != n || adj.grid != (h / win, w / win) || adj.window != win {
                return Err(Error::shape(
                    "transformer_layer",
                    "adjacency window grid",
                    format!("{n} × {:?} windows of {win}", (h / win, w / win)),
                    format!("{} × {:?} windows of {}", adj.batch, adj.grid, adj.window),
                ));
            }
            graph_window_attention(tape, q, k, v, adj, cfg.gvt_mask_mode)?
        }
    };
    let merged = merge_windows(tape, attended, dims, win, shift)?;
    let projected = tape.linear(merged, params.proj_w, Some(params.proj_b))?;
    let tokens = tape.add(tokens, projected)?;

    let normed = tape.layer_norm(tokens, scope.var("norm2.gamma")?, scope.var("norm2.beta")?, LN_EPS)?;
    let hidden = tape.linear(normed, scope.var("mlp.fc1.w")?, Some(scope.var("mlp.fc1.b")?))?;
    let hidden = tape.gelu(hidden);
    let mlp = tape.linear(hidden, scope.var("mlp.fc2.w")?, Some(scope.var("mlp.fc2.b")?))?;
    let tokens = tape.add(tokens, mlp)?;
    tape.permute(tokens, &[0, 3, 1, 2])
}

/// Dual modeling block: Swin layer then graph layer. Odd-numbered blocks
/// shift their Swin layer by `window / 2`.
pub fn dmb_forward(
    tape: &mut Tape,
    x: Var,
    adjacency: Option<&AdjacencySet>,
    group: usize,
    block: usize,
    vars: &ParamVars,
    cfg: &NetConfig,
) -> Result<Var> {
    let prefix = format!("groups.{group}.dmb.{block}");
    let mut y = x;
    if !cfg.disable_stl {
        let shift = if block % 2 == 1 { cfg.shift_size() } else { 0 };
        let scope = vars.scope(format!("{prefix}.stl"));
        y = transformer_layer(tape, y, LayerKind::Stl, None, shift, &scope, cfg)?;
    }
    if !cfg.disable_gvt {
        let scope = vars.scope(format!("{prefix}.gvtl"));
        y = transformer_layer(tape, y, LayerKind::Gvtl, adjacency, 0, &scope, cfg)?;
    }
    Ok(y)
}

/// Adjacency update, `N2` blocks sharing it, trailing 3×3 conv, group skip.
pub fn gvt_group_forward(
    tape: &mut Tape,
    x: Var,
    group: usize,
    vars: &ParamVars,
    cfg: &NetConfig,
    trace: &mut ForwardTrace,
) -> Result<Var> {
    let adjacency = if cfg.disable_gvt {
        None
    } else {
        let set = update_adjacency(tape.value(x), cfg.window, &cfg.adjacency)?;
        trace.adjacency_updates += 1;
        Some(set)
    };
    let mut y = x;
    for block in 0..cfg.n_dmb_per_group {
        y = dmb_forward(tape, y, adjacency.as_ref(), group, block, vars, cfg)?;
    }
    trace.adjacency.extend(adjacency);
    let scope = vars.scope(format!("groups.{group}.conv"));
    let conv = tape.conv2d(y, scope.var("w")?, Some(scope.var("b")?), 1, 1)?;
    tape.add(conv, x)
}

/// 3×3 conv from RGB to `C` feature channels.
pub fn shallow_extract(tape: &mut Tape, img: Var, vars: &ParamVars) -> Result<Var> {
    let [_, c, _, _] = nchw(tape, img, "shallow_extract")?;
    if c != 3 {
        return Err(Error::shape("shallow_extract", "image channels (dim 1)", 3, c));
    }
    tape.conv2d(img, vars.get("shallow.w")?, Some(vars.get("shallow.b")?), 1, 1)
}

/// `log2(scale)` stages of [3×3 conv to 4C, pixel shuffle ×2], then a 3×3 conv to RGB.
pub fn reconstruct(tape: &mut Tape, feat: Var, scale: usize, vars: &ParamVars) -> Result<Var> {
    if ![2, 4, 8].contains(&scale) {
        return Err(Error::config("scale", format!("{scale} is not one of 2, 4, 8")));
    }
    let mut y = feat;
    for s in 0..scale.trailing_zeros() {
        let scope = vars.scope(format!("recon.up.{s}"));
        y = tape.conv2d(y, scope.var("w")?, Some(scope.var("b")?), 1, 1)?;
        y = tape.pixel_shuffle(y, 2)?;
    }
    tape.conv2d(y, vars.get("recon.last.w")?, Some(vars.get("recon.last.b")?), 1, 1)
}

/// Full network on `lr: [N, 3, H, W]`; `H` and `W` must be window multiples.
pub fn gvtnet_forward(
    tape: &mut Tape,
    lr: Var,
    vars: &ParamVars,
    cfg: &NetConfig,
    trace: &mut ForwardTrace,
) -> Result<Var> {
    let [_, _, h, w] = nchw(tape, lr, "gvtnet_forward")?;
    if h % cfg.window != 0 {
        return Err(Error::divisibility("gvtnet_forward", "height", h, cfg.window));
    }
    if w % cfg.window != 0 {
        return Err(Error::divisibility("gvtnet_forward", "width", w, cfg.window));
    }
    let shallow = shallow_extract(tape, lr, vars)?;
    let mut y = shallow;
    for g in 0..cfg.n_groups {
        y = gvt_group_forward(tape, y, g, vars, cfg, trace)?;
    }
    let body = tape.conv2d(y, vars.get("body.conv.w")?, Some(vars.get("body.conv.b")?), 1, 1)?;
    let deep = tape.add(body, shallow)?;
    reconstruct(tape, deep, cfg.scale, vars)
}
