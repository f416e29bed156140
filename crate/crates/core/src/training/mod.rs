//! L1 training with Adam on LR/HR pairs, plus the overfit harness.

mod adam;
pub mod data;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use adam::{adam_step, OptimState, TrainConfig};
pub use data::{bicubic_downsample, fixture_image, fixture_set, make_pairs};

use crate::error::{Error, Result};
use crate::metrics::psnr;
use crate::model::{gvtnet_forward, Checkpoint, ForwardTrace, GvtNet, NetConfig};
use crate::numerics::{Tape, Tensor, Var};

/// Mean absolute error between `pred` and `target`.
///
/// The subgradient at ties is 0.
pub fn l1_loss(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    if tape.shape(pred) != tape.shape(target) {
        return Err(Error::shape(
            "l1_loss",
            "operand shape",
            format!("{:?}", tape.shape(pred)),
            format!("{:?}", tape.shape(target)),
        ));
    }
    let (p, t) = (tape.value(pred).data(), tape.value(target).data());
    let n = p.len();
    let total: f64 = p.iter().zip(t).map(|(a, b)| (a - b).abs()).sum();
    tape.push_l1(Tensor::scalar(total / n as f64), pred, target, n)
}

impl Tape {
    fn push_l1(&mut self, value: Tensor, pred: Var, target: Var, n: usize) -> Result<Var> {
        Ok(self.push(value, &[pred, target], move |ctx| {
            let (p, t) = (ctx.inputs[0].data(), ctx.inputs[1].data());
            let scale = ctx.grad[0] / n as f64;
            let dp: Vec<f64> = p
                .iter()
                .zip(t)
                .map(|(a, b)| match a.partial_cmp(b) {
                    Some(std::cmp::Ordering::Greater) => scale,
                    Some(std::cmp::Ordering::Less) => -scale,
                    _ => 0.0,
                })
                .collect();
            let dt = ctx.needs(1).then(|| dp.iter().map(|g| -g).collect());
            vec![ctx.needs(0).then_some(dp), dt]
        }))
    }
}

/// One row of the loss trace.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub step: u64,
    pub loss: f64,
    pub psnr: f64,
}

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from("step,loss,psnr\n");
    for r in rows {
        writeln!(out, "{},{},{}", r.step, r.loss, r.psnr).unwrap();
    }
    out
}

fn stack(images: &[&Tensor]) -> Result<Tensor> {
    let shape = images[0].shape();
    let mut data = Vec::with_capacity(images.len() * images[0].numel());
    for img in images {
        if img.shape() != shape {
            return Err(Error::shape("stack", "image shape", format!("{shape:?}"), format!("{:?}", img.shape())));
        }
        data.extend_from_slice(img.data());
    }
    let mut out_shape = vec![images.len()];
    out_shape.extend_from_slice(shape);
    Tensor::new(&out_shape, data)
}

/// Splits `[N, ...]` into `N` tensors.
pub fn unstack(batch: &Tensor) -> Vec<Tensor> {
    let inner = &batch.shape()[1..];
    let n: usize = inner.iter().product();
    batch
        .data()
        .chunks_exact(n.max(1))
        .map(|c| Tensor::new(inner, c.to_vec()).expect("unstack"))
        .collect()
}

/// Dataset indices of the batch at `step`: one seeded permutation per epoch,
/// so any step's batch is recomputable without replaying earlier steps.
pub fn batch_indices(dataset: usize, batch: usize, seed: u64, step: u64) -> Vec<usize> {
    let mut epoch_cache: Option<(u64, Vec<usize>)> = None;
    (0..batch as u64)
        .map(|j| {
            let pos = step * batch as u64 + j;
            let epoch = pos / dataset as u64;
            let perm = match &epoch_cache {
                Some((e, p)) if *e == epoch => p,
                _ => {
                    let mut p: Vec<usize> = (0..dataset).collect();
                    let mixed = seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15);
                    p.shuffle(&mut ChaCha8Rng::seed_from_u64(mixed));
                    &epoch_cache.insert((epoch, p)).1
                }
            };
            perm[(pos % dataset as u64) as usize]
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct StepStats {
    pub step: u64,
    pub loss: f64,
    pub psnr: f64,
}

/// Owns the model and optimizer state for a training run.
pub struct Trainer {
    pub model: GvtNet,
    pub optim: OptimState,
    pub cfg: TrainConfig,
    pairs: Vec<(Tensor, Tensor)>,
}

impl Trainer {
    pub fn new(model: GvtNet, cfg: TrainConfig, pairs: Vec<(Tensor, Tensor)>) -> Result<Self> {
        cfg.validate()?;
        if pairs.is_empty() {
            return Err(Error::InvalidArgument("training set is empty".into()));
        }
        let optim = OptimState::new(&model.params);
        Ok(Self {
            model,
            optim,
            cfg,
            pairs,
        })
    }

    /// Continues from a checkpoint; its optimizer step selects the next batch.
    pub fn resume(ckpt: Checkpoint, cfg: TrainConfig, pairs: Vec<(Tensor, Tensor)>) -> Result<Self> {
        let optim = ckpt.optim.clone();
        let mut t = Self::new(ckpt.into_model()?, cfg, pairs)?;
        if let Some(o) = optim {
            t.optim = o;
        }
        Ok(t)
    }

    pub fn step_count(&self) -> u64 {
        self.optim.t
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_model(&self.model, Some(&self.optim))
    }

    /// Forward, backward, and one Adam update on the next batch.
    pub fn step(&mut self) -> Result<StepStats> {
        let step = self.optim.t;
        let idx = batch_indices(self.pairs.len(), self.cfg.batch, self.cfg.seed, step);
        let lr = stack(&idx.iter().map(|&i| &self.pairs[i].0).collect::<Vec<_>>())?;
        let hr = stack(&idx.iter().map(|&i| &self.pairs[i].1).collect::<Vec<_>>())?;

        let mut tape = Tape::new();
        let vars = self.model.params.register(&mut tape, true);
        let x = tape.constant(lr);
        let target = tape.constant(hr);
        let mut trace = ForwardTrace::default();
        let pred = gvtnet_forward(&mut tape, x, &vars, &self.model.config, &mut trace)?;
        let loss = l1_loss(&mut tape, pred, target)?;
        let loss_value = tape.value(loss).data()[0];
        if !loss_value.is_finite() {
            return Err(Error::NonFinite { name: "loss".into() });
        }
        let batch_psnr = {
            let preds = unstack(tape.value(pred));
            let targets = unstack(tape.value(target));
            let vals: Vec<f64> = preds
                .iter()
                .zip(&targets)
                .map(|(p, t)| psnr(p, t, 1.0))
                .collect::<Result<_>>()?;
            vals.iter().sum::<f64>() / vals.len() as f64
        };
        let grads = tape.backward(loss)?;
        let grads: BTreeMap<String, Tensor> = vars
            .iter()
            .map(|(name, &v)| (name.clone(), grads.get(v).expect("leaf gradient")))
            .collect();
        adam_step(&mut self.model.params, &grads, &mut self.optim, &self.cfg)?;
        Ok(StepStats {
            step,
            loss: loss_value,
            psnr: batch_psnr,
        })
    }

    /// Mean PSNR over the whole training set with outputs clamped to `[0, 1]`.
    pub fn train_psnr(&self) -> Result<f64> {
        evaluate_psnr(&self.model, &self.pairs)
    }
}

/// Mean PSNR of `model` over `pairs`, outputs clamped to `[0, 1]`.
pub fn evaluate_psnr(model: &GvtNet, pairs: &[(Tensor, Tensor)]) -> Result<f64> {
    let mut total = 0.0;
    for (lr, hr) in pairs {
        let input = stack(&[lr])?;
        let (out, _) = model.forward(&input)?;
        let out = unstack(&out).remove(0).map(|v| v.clamp(0.0, 1.0));
        total += psnr(&out, hr, 1.0)?;
    }
    Ok(total / pairs.len() as f64)
}

/// Result of [`train`].
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub trace: Vec<TraceRow>,
}

/// Where [`train`] writes its checkpoints; `None` keeps everything in memory.
#[derive(Clone, Debug, Default)]
pub struct RunOutput {
    pub dir: Option<PathBuf>,
}

impl RunOutput {
    pub fn in_dir(dir: impl Into<PathBuf>) -> Self {
        Self { dir: Some(dir.into()) }
    }

    fn save(&self, name: &str, ckpt: &Checkpoint) -> Result<()> {
        if let Some(dir) = &self.dir {
            ckpt.save(&dir.join(name))?;
        }
        Ok(())
    }
}

pub const CHECKPOINT_FILE: &str = "checkpoint.gvtn";
pub const LAST_GOOD_FILE: &str = "last_good.gvtn";
pub const LOSS_FILE: &str = "loss.csv";

/// Runs `train_cfg.steps` steps from a seeded initialization.
///
/// A non-finite loss or gradient stops the run; the parameters from before
/// the failing step are saved as `last_good.gvtn` when an output directory is
/// set, and the error is returned.
pub fn train(
    pairs: Vec<(Tensor, Tensor)>,
    net_cfg: &NetConfig,
    train_cfg: &TrainConfig,
    out: &RunOutput,
) -> Result<TrainOutcome> {
    let model = GvtNet::new(net_cfg.clone(), train_cfg.seed)?;
    let trainer = Trainer::new(model, train_cfg.clone(), pairs)?;
    run_trainer(trainer, out)
}

/// Continues `trainer` until it has taken `cfg.steps` steps in total.
pub fn run_trainer(mut trainer: Trainer, out: &RunOutput) -> Result<TrainOutcome> {
    let mut trace = Vec::new();
    let total = trainer.cfg.steps;
    while trainer.step_count() < total {
        let before = trainer.checkpoint();
        let stats = match trainer.step() {
            Ok(s) => s,
            Err(e @ Error::NonFinite { .. }) => {
                out.save(LAST_GOOD_FILE, &before)?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        if stats.step % trainer.cfg.log_every == 0 {
            trace.push(TraceRow {
                step: stats.step,
                loss: stats.loss,
                psnr: stats.psnr,
            });
        }
        let every = trainer.cfg.checkpoint_every;
        if every > 0 && trainer.step_count() % every == 0 {
            out.save(CHECKPOINT_FILE, &trainer.checkpoint())?;
        }
    }
    let checkpoint = trainer.checkpoint();
    out.save(CHECKPOINT_FILE, &checkpoint)?;
    if let Some(dir) = &out.dir {
        crate::model::checkpoint::write_atomic(&dir.join(LOSS_FILE), trace_csv(&trace).as_bytes())?;
    }
    Ok(TrainOutcome { checkpoint, trace })
}

pub const OVERFIT_TARGET_PSNR: f64 = 35.0;

#[derive(Clone, Debug)]
pub struct OverfitReport {
    pub initial_psnr: f64,
    pub final_psnr: f64,
    pub steps: u64,
    pub pass: bool,
    pub trace: Vec<TraceRow>,
}

/// Trains on the bundled fixtures until the train-set PSNR reaches
/// [`OVERFIT_TARGET_PSNR`] or `train_cfg.steps` is exhausted. The PSNR is
/// evaluated every `eval_every` steps.
pub fn overfit_check(net_cfg: &NetConfig, train_cfg: &TrainConfig, eval_every: u64) -> Result<OverfitReport> {
    let pairs = make_pairs(&fixture_set(), net_cfg.scale, train_cfg.seed)?;
    let model = GvtNet::new(net_cfg.clone(), train_cfg.seed)?;
    let mut trainer = Trainer::new(model, train_cfg.clone(), pairs)?;
    let initial_psnr = trainer.train_psnr()?;
    let mut final_psnr = initial_psnr;
    let mut trace = Vec::new();
    let eval_every = eval_every.max(1);
    while trainer.step_count() < train_cfg.steps {
        let s = trainer.step()?;
        trace.push(TraceRow {
            step: s.step,
            loss: s.loss,
            psnr: s.psnr,
        });
        if trainer.step_count() % eval_every == 0 || trainer.step_count() == train_cfg.steps {
            final_psnr = trainer.train_psnr()?;
            if final_psnr >= OVERFIT_TARGET_PSNR {
                break;
            }
        }
    }
    Ok(OverfitReport {
        initial_psnr,
        final_psnr,
        steps: trainer.step_count(),
        pass: final_psnr >= OVERFIT_TARGET_PSNR,
        trace,
    })
}

/// Fraction of consecutive `window`-step mean-loss windows that fail to decrease.
pub fn non_decreasing_window_fraction(trace: &[TraceRow], window: usize) -> f64 {
    let means: Vec<f64> = trace
        .chunks_exact(window)
        .map(|c| c.iter().map(|r| r.loss).sum::<f64>() / window as f64)
        .collect();
    if means.len() < 2 {
        return 0.0;
    }
    let bad = means.windows(2).filter(|w| w[1] >= w[0]).count();
    bad as f64 / (means.len() - 1) as f64
}

/// Reads a loss CSV written by [`train`].
pub fn read_trace(path: &Path) -> Result<Vec<TraceRow>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .skip(1)
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::InvalidArgument(format!("malformed trace row `{line}`"));
            if f.len() != 3 {
                return Err(bad());
            }
            Ok(TraceRow {
                step: f[0].parse().map_err(|_| bad())?,
                loss: f[1].parse().map_err(|_| bad())?,
                psnr: f[2].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}
