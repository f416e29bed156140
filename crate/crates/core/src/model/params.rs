use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::config::NetConfig;
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

const INIT_STD: f64 = 0.02;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
enum Init {
    /// Truncated normal at ±2σ, σ = 0.02.
    TruncNormal,
    /// Uniform on ±1/√fan_in.
    FanIn,
    Zeros,
    Ones,
}

/// Parameter name, shape, and initializer for every tensor of a network.
pub fn param_specs(cfg: &NetConfig) -> Vec<(String, Vec<usize>)> {
    layout(cfg).into_iter().map(|(n, s, _)| (n, s)).collect()
}

fn layout(cfg: &NetConfig) -> Vec<(String, Vec<usize>, Init)> {
    let c = cfg.channels;
    let hidden = cfg.mlp_hidden();
    let span = 2 * cfg.window - 1;
    let mut out: Vec<(String, Vec<usize>, Init)> = Vec::new();
    let mut add = |name: String, shape: &[usize], init: Init| out.push((name, shape.to_vec(), init));

    add("shallow.w".into(), &[c, 3, 3, 3], Init::FanIn);
    add("shallow.b".into(), &[c], Init::Zeros);
    for g in 0..cfg.n_groups {
        for d in 0..cfg.n_dmb_per_group {
            let mut kinds = Vec::new();
            if !cfg.disable_stl {
                kinds.push("stl");
            }
            if !cfg.disable_gvt {
                kinds.push("gvtl");
            }
            for kind in kinds {
                let p = format!("groups.{g}.dmb.{d}.{kind}");
                add(format!("{p}.norm1.gamma"), &[c], Init::Ones);
                add(format!("{p}.norm1.beta"), &[c], Init::Zeros);
                for qkv in ["q", "k", "v"] {
                    if cfg.plain_linear_qkv {
                        add(format!("{p}.attn.{qkv}.w"), &[c, c], Init::TruncNormal);
                    } else {
                        add(format!("{p}.attn.{qkv}.dw"), &[c, 1, 3, 3], Init::FanIn);
                        add(format!("{p}.attn.{qkv}.pw"), &[c, c, 1, 1], Init::TruncNormal);
                    }
                }
                add(format!("{p}.attn.proj.w"), &[c, c], Init::TruncNormal);
                add(format!("{p}.attn.proj.b"), &[c], Init::Zeros);
                if kind == "stl" {
                    add(format!("{p}.attn.rpb"), &[span * span, cfg.heads], Init::Zeros);
                }
                add(format!("{p}.norm2.gamma"), &[c], Init::Ones);
                add(format!("{p}.norm2.beta"), &[c], Init::Zeros);
                add(format!("{p}.mlp.fc1.w"), &[hidden, c], Init::TruncNormal);
                add(format!("{p}.mlp.fc1.b"), &[hidden], Init::Zeros);
                add(format!("{p}.mlp.fc2.w"), &[c, hidden], Init::TruncNormal);
                add(format!("{p}.mlp.fc2.b"), &[c], Init::Zeros);
            }
        }
        add(format!("groups.{g}.conv.w"), &[c, c, 3, 3], Init::FanIn);
        add(format!("groups.{g}.conv.b"), &[c], Init::Zeros);
    }
    add("body.conv.w".into(), &[c, c, 3, 3], Init::FanIn);
    add("body.conv.b".into(), &[c], Init::Zeros);
    for s in 0..cfg.upsample_stages() {
        add(format!("recon.up.{s}.w"), &[4 * c, c, 3, 3], Init::FanIn);
        add(format!("recon.up.{s}.b"), &[4 * c], Init::Zeros);
    }
    add("recon.last.w".into(), &[3, c, 3, 3], Init::FanIn);
    add("recon.last.b".into(), &[3], Init::Zeros);
    out
}

fn truncated_normal(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z * INIT_STD;
        }
    }
}

/// Named parameter tensors, ordered by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelParams {
    tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    /// Seeded initialization. The tree structure depends only on `cfg`.
    pub fn init(cfg: &NetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        // Draw in layout order so values do not depend on map ordering.
        for (name, shape, init) in layout(cfg) {
            let n: usize = shape.iter().product();
            let fan_in: usize = shape[1..].iter().product::<usize>().max(1);
            let data: Vec<f64> = match init {
                Init::TruncNormal => (0..n).map(|_| truncated_normal(&mut rng)).collect(),
                Init::FanIn => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                }
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
            };
            tensors.insert(name, Tensor::new(&shape, data)?);
        }
        Ok(Self { tensors })
    }

    pub fn from_map(tensors: BTreeMap<String, Tensor>) -> Self {
        Self { tensors }
    }

    /// Checks that names and shapes match the layout for `cfg` exactly.
    pub fn check_structure(&self, cfg: &NetConfig) -> Result<()> {
        let specs = param_specs(cfg);
        if specs.len() != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors for this config, found {}",
                specs.len(),
                self.tensors.len()
            )));
        }
        for (name, shape) in specs {
            let t = self.tensors.get(&name).ok_or_else(|| Error::MissingParam(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::shape("params", name, format!("{shape:?}"), format!("{:?}", t.shape())));
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count.
    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.tensors.iter().find(|(_, t)| !t.is_finite()) {
            Some((name, _)) => Err(Error::NonFinite { name: name.clone() }),
            None => Ok(()),
        }
    }

    /// Places every tensor on `tape` as a leaf.
    pub fn register(&self, tape: &mut Tape, requires_grad: bool) -> ParamVars {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| (k.clone(), tape.leaf(t.clone(), requires_grad)))
            .collect();
        ParamVars { vars }
    }

    /// Sets every tensor whose name passes `pred` to zero.
    pub fn zero_where(&mut self, pred: impl Fn(&str) -> bool) {
        for (name, t) in self.tensors.iter_mut() {
            if pred(name) {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
}

/// Tape handles for a [`ModelParams`] tree.
#[derive(Clone, Debug, Default)]
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn from_map(vars: BTreeMap<String, Var>) -> Self {
        Self { vars }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn scope(&self, prefix: impl Into<String>) -> Scope<'_> {
        Scope {
            vars: self,
            prefix: prefix.into(),
        }
    }
}

/// Name prefix into a [`ParamVars`].
#[derive(Clone, Debug)]
pub struct Scope<'a> {
    vars: &'a ParamVars,
    prefix: String,
}

impl Scope<'_> {
    pub fn var(&self, suffix: &str) -> Result<Var> {
        self.vars.get(&format!("{}.{suffix}", self.prefix))
    }

    pub fn has(&self, suffix: &str) -> bool {
        self.vars.vars.contains_key(&format!("{}.{suffix}", self.prefix))
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }
}
