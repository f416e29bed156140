//! Central finite-difference gradient checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Gradients smaller than this are compared absolutely rather than relatively.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub eps: f64,
    pub tol: f64,
    /// Elements checked per tensor; larger tensors are subsampled.
    pub max_elements_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tol: 1e-4,
            max_elements_per_tensor: 64,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamGradReport {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub checked: usize,
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub params: Vec<ParamGradReport>,
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub pass: bool,
}

/// `|a - n| / max(|a|, |n|, REL_ERR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares reverse-mode gradients of `loss_fn` against central differences.
///
/// `loss_fn` receives a fresh tape and one leaf per named parameter (in the
/// order given) and must return a scalar node.
pub fn grad_check<F>(
    loss_fn: F,
    params: &[(String, Tensor)],
    cfg: &GradCheckConfig,
) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&cfg.eps) {
        return Err(Error::InvalidArgument(format!(
            "grad_check eps {} outside [1e-6, 1e-3]",
            cfg.eps
        )));
    }
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let loss = loss_fn(&mut tape, &vars)?;
        tape.value(loss)
            .item()
            .ok_or_else(|| Error::shape("grad_check", "loss element count", 1, tape.value(loss).numel()))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|(_, t)| tape.leaf(t.clone(), true)).collect();
    let loss = loss_fn(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut values: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut reports = Vec::with_capacity(params.len());
    for (p, (name, tensor)) in params.iter().enumerate() {
        let analytic = grads.get(vars[p]).expect("leaf gradient");
        let n = tensor.numel();
        let indices: Vec<usize> = if n <= cfg.max_elements_per_tensor {
            (0..n).collect()
        } else {
            let mut idx = sample(&mut rng, n, cfg.max_elements_per_tensor).into_vec();
            idx.sort_unstable();
            idx
        };
        let mut report = ParamGradReport {
            name: name.clone(),
            max_rel_error: 0.0,
            worst_index: 0,
            checked: indices.len(),
        };
        for &i in &indices {
            let orig = values[p].data()[i];
            values[p].data_mut()[i] = orig + cfg.eps;
            let plus = eval(&values)?;
            values[p].data_mut()[i] = orig - cfg.eps;
            let minus = eval(&values)?;
            values[p].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.eps);
            let err = relative_error(analytic.data()[i], numeric);
            if err > report.max_rel_error || err.is_nan() {
                report.max_rel_error = err;
                report.worst_index = i;
            }
        }
        reports.push(report);
    }

    let worst = reports
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error));
    let (max_rel_error, worst_param, worst_index) = worst
        .map(|r| (r.max_rel_error, r.name.clone(), r.worst_index))
        .unwrap_or((0.0, String::new(), 0));
    Ok(GradReport {
        pass: max_rel_error < cfg.tol,
        params: reports,
        max_rel_error,
        worst_param,
        worst_index,
    })
}
