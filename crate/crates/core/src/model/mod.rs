//! Network assembly: shallow conv, graph transformer groups, reconstruction.

pub mod checkpoint;
mod config;
mod layers;
mod params;

pub use checkpoint::Checkpoint;
pub use config::NetConfig;
pub use layers::{
    dmb_forward, gvt_group_forward, gvtnet_forward, reconstruct, shallow_extract,
    transformer_layer, ForwardTrace, LayerKind, LN_EPS,
};
pub use params::{param_specs, ModelParams, ParamVars, Scope};

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{grad_check, GradCheckConfig, GradReport, Tape, Tensor};

/// A network configuration together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct GvtNet {
    pub config: NetConfig,
    pub params: ModelParams,
}

impl GvtNet {
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        let params = ModelParams::init(&config, seed)?;
        Ok(Self { config, params })
    }

    pub fn from_parts(config: NetConfig, params: ModelParams) -> Result<Self> {
        config.validate()?;
        params.check_structure(&config)?;
        Ok(Self { config, params })
    }

    /// Gradient-free forward on window-aligned input.
    pub fn forward(&self, lr: &Tensor) -> Result<(Tensor, ForwardTrace)> {
        self.params.check_finite()?;
        let mut tape = Tape::new();
        let vars = self.params.register(&mut tape, false);
        let x = tape.constant(lr.clone());
        let mut trace = ForwardTrace::default();
        let y = gvtnet_forward(&mut tape, x, &vars, &self.config, &mut trace)?;
        Ok((tape.value(y).clone(), trace))
    }

    /// Forward on any `[N, 3, H, W]` input: reflection-pads bottom/right to a
    /// window multiple and crops the output back to `scale·H × scale·W`.
    pub fn upscale(&self, lr: &Tensor) -> Result<Tensor> {
        let &[_, _, h, w] = lr.shape() else {
            return Err(Error::shape("upscale", "rank", 4, lr.rank()));
        };
        let win = self.config.window;
        let (ph, pw) = (h.div_ceil(win) * win, w.div_ceil(win) * win);
        if ph == h && pw == w {
            return Ok(self.forward(lr)?.0);
        }
        let padded = reflect_pad(lr, ph, pw);
        let (out, _) = self.forward(&padded)?;
        let s = self.config.scale;
        Ok(crop(&out, h * s, w * s))
    }

    /// Human-readable architecture summary with the parameter count.
    pub fn describe(&self) -> String {
        describe(&self.config)
    }
}

/// Architecture summary for `cfg`; the parameter count depends only on `cfg`.
pub fn describe(cfg: &NetConfig) -> String {
    let specs = param_specs(cfg);
    let total: usize = specs.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    let block = match (cfg.disable_stl, cfg.disable_gvt) {
        (true, _) => "GVTL",
        (_, true) => "STL",
        _ => "STL + GVTL",
    };
    let a = &cfg.adjacency;
    let mut out = String::new();
    out.push_str(&format!("parameters: {total}\n"));
    out.push_str(&format!("tensors: {}\n", specs.len()));
    out.push_str(&format!(
        "groups: {} x {} blocks ({block})\n",
        cfg.n_groups, cfg.n_dmb_per_group
    ));
    out.push_str(&format!(
        "channels: {}, window: {}, heads: {}, mlp hidden: {}\n",
        cfg.channels,
        cfg.window,
        cfg.heads,
        cfg.mlp_hidden()
    ));
    out.push_str(&format!(
        "qkv: {}, graph mask: {}\n",
        if cfg.plain_linear_qkv { "linear" } else { "depthwise-separable conv" },
        cfg.gvt_mask_mode
    ));
    out.push_str(&format!(
        "adjacency: p={} T={} compare={} normalize={} self_loops={}\n",
        a.p, a.threshold, a.comparison, a.normalize_tokens, a.self_loops
    ));
    out.push_str(&format!("upscale: x{} ({} pixel-shuffle stages)\n", cfg.scale, cfg.upsample_stages()));
    out
}

/// Finite-difference check of every parameter and the input of a seeded
/// network on a random `size × size` image. The loss is a fixed random
/// projection of the output, so every output pixel contributes.
pub fn check_network_gradients(cfg: &NetConfig, size: usize, seed: u64, gc: &GradCheckConfig) -> Result<GradReport> {
    let params = ModelParams::init(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let input = Tensor::from_fn(&[1, 3, size, size], |_| rng.random_range(0.0..1.0));
    let out_len = 3 * size * size * cfg.scale * cfg.scale;
    let weights = Tensor::from_fn(&[1, 3, size * cfg.scale, size * cfg.scale], |_| rng.random_range(-1.0..1.0));
    debug_assert_eq!(weights.numel(), out_len);

    let mut named: Vec<(String, Tensor)> = params.iter().map(|(k, t)| (k.clone(), t.clone())).collect();
    named.push(("input".into(), input));
    let names: Vec<String> = named.iter().map(|(k, _)| k.clone()).collect();
    let loss_fn = |tape: &mut Tape, vars: &[crate::numerics::Var]| -> Result<crate::numerics::Var> {
        let (input, param_vars) = vars.split_last().expect("input leaf");
        let map: BTreeMap<String, _> = names.iter().cloned().zip(param_vars.iter().copied()).collect();
        let pv = ParamVars::from_map(map);
        let mut trace = ForwardTrace::default();
        let out = gvtnet_forward(tape, *input, &pv, cfg, &mut trace)?;
        let w = tape.constant(weights.clone());
        let weighted = tape.mul(out, w)?;
        Ok(tape.mean(weighted))
    };
    grad_check(loss_fn, &named, gc)
}

fn reflect_index(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

/// Mirror-pads the bottom and right edges of `[N, C, H, W]` (edge pixel not repeated).
pub fn reflect_pad(x: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let s = x.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let mut data = Vec::with_capacity(n * c * out_h * out_w);
    for plane in x.data().chunks_exact(h * w) {
        for y in 0..out_h {
            let sy = reflect_index(y, h);
            for xx in 0..out_w {
                data.push(plane[sy * w + reflect_index(xx, w)]);
            }
        }
    }
    Tensor::new(&[n, c, out_h, out_w], data).expect("padded shape")
}

/// Top-left `out_h × out_w` crop of `[N, C, H, W]`.
pub fn crop(x: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let s = x.shape();
    let (n, c, _, w) = (s[0], s[1], s[2], s[3]);
    let mut data = Vec::with_capacity(n * c * out_h * out_w);
    for plane in x.data().chunks_exact(s[2] * w) {
        for y in 0..out_h {
            data.extend_from_slice(&plane[y * w..y * w + out_w]);
        }
    }
    Tensor::new(&[n, c, out_h, out_w], data).expect("cropped shape")
}
