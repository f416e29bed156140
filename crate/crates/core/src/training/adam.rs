use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: u64,
    pub batch: usize,
    pub seed: u64,
    /// Write a checkpoint every this many steps; 0 disables periodic saves.
    pub checkpoint_every: u64,
    /// Record a loss-trace row every this many steps.
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            steps: 2000,
            batch: 2,
            seed: 0,
            checkpoint_every: 0,
            log_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::config("lr", format!("{} must be finite and >= 0", self.lr)));
        }
        for (field, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(field, format!("{b} must lie in [0, 1)")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("eps", "must be > 0"));
        }
        if self.batch == 0 {
            return Err(Error::config("batch", "must be >= 1"));
        }
        if self.log_every == 0 {
            return Err(Error::config("log_every", "must be >= 1"));
        }
        Ok(())
    }
}

/// Adam moments, one pair per parameter tensor, and the step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimState {
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
    pub t: u64,
}

impl OptimState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros = |_: ()| -> BTreeMap<String, Tensor> {
            params
                .iter()
                .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
                .collect()
        };
        Self {
            m: zeros(()),
            v: zeros(()),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update. Gradients are checked for finiteness
/// before anything is modified.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &BTreeMap<String, Tensor>,
    state: &mut OptimState,
    cfg: &TrainConfig,
) -> Result<()> {
    for (name, p) in params.iter() {
        let g = grads.get(name).ok_or_else(|| Error::MissingParam(format!("gradient for {name}")))?;
        if g.shape() != p.shape() {
            return Err(Error::shape("adam_step", name.clone(), format!("{:?}", p.shape()), format!("{:?}", g.shape())));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite {
                name: format!("gradient of {name}"),
            });
        }
    }
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for (name, p) in params.iter_mut() {
        let g = &grads[name];
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
        let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
        for (i, &gi) in g.data().iter().enumerate() {
            md[i] = cfg.beta1 * md[i] + (1.0 - cfg.beta1) * gi;
            vd[i] = cfg.beta2 * vd[i] + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = md[i] / bc1;
            let v_hat = vd[i] / bc2;
            pd[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64) -> ModelParams {
        let mut p = ModelParams::default();
        p.insert("x", Tensor::new(&[1], vec![value]).unwrap());
        p
    }

    fn grad(value: f64) -> BTreeMap<String, Tensor> {
        BTreeMap::from([("x".to_string(), Tensor::new(&[1], vec![value]).unwrap())])
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = single(1.5);
        let mut s = OptimState::new(&p);
        adam_step(&mut p, &grad(0.0), &mut s, &TrainConfig::default()).unwrap();
        assert_eq!(p.get("x").unwrap().data(), &[1.5]);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = single(0.0);
        let mut s = OptimState::new(&p);
        let cfg = TrainConfig {
            lr: 0.1,
            ..Default::default()
        };
        adam_step(&mut p, &grad(1.0), &mut s, &cfg).unwrap();
        let x = p.get("x").unwrap().data()[0];
        assert!((x + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = single(0.0);
        let mut s = OptimState::new(&p);
        let err = adam_step(&mut p, &grad(f64::NAN), &mut s, &TrainConfig::default()).unwrap_err();
        assert!(err.to_string().contains("x"));
        assert_eq!(s.t, 0);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { beta1: 1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { lr: -1.0, ..Default::default() }.validate().is_err());
        TrainConfig::default().validate().unwrap();
    }
}
