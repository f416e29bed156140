//! Command-line front end: train, infer, eval, inspect-adjacency, describe, grad-check.

pub mod config;
pub mod image_io;

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use gvtnet::metrics::{evaluate_pair, self_ensemble, EvalOptions, MetricReport};
use gvtnet::model::checkpoint::write_atomic;
use gvtnet::model::{check_network_gradients, reflect_pad, Checkpoint};
use gvtnet::numerics::GradCheckConfig;
use gvtnet::training::{self, run_trainer, RunOutput, Trainer, CHECKPOINT_FILE, LAST_GOOD_FILE, LOSS_FILE};
use gvtnet::{Error, GvtNet, NetConfig, Result, Tensor};

use config::RunConfig;
use image_io::{batched, load_png, save_png, unbatched};

pub const CONFIG_FILE: &str = "config.txt";

#[derive(Parser, Debug)]
#[command(name = "gvtnet", version, about = "Graph-masked window transformer for image super-resolution")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Default, Clone)]
pub struct NetFlags {
    /// `key = value` config file; command-line flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Adjacency distance threshold T.
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long, value_parser = ["1", "2", "inf"])]
    pub minkowski_p: Option<String>,
    /// Graph layers only.
    #[arg(long)]
    pub no_stl: bool,
    /// Swin layers only.
    #[arg(long)]
    pub no_gvt: bool,
    /// Linear Q/K/V projections instead of depthwise-separable convs.
    #[arg(long)]
    pub plain_qkv: bool,
    #[arg(long, value_parser = ["hadamard", "additive"])]
    pub mask_mode: Option<String>,
    #[arg(long, value_parser = ["gt", "lt"])]
    pub adjacency_compare: Option<String>,
    #[arg(long)]
    pub scale: Option<usize>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub groups: Option<usize>,
    #[arg(long)]
    pub blocks: Option<usize>,
}

impl NetFlags {
    fn overrides(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        let mut opt = |k: &'static str, v: Option<String>| {
            if let Some(v) = v {
                out.push((k, v));
            }
        };
        opt("threshold", self.threshold.map(|v| v.to_string()));
        opt("minkowski_p", self.minkowski_p.clone());
        opt("mask_mode", self.mask_mode.clone());
        opt("adjacency_compare", self.adjacency_compare.clone());
        opt("scale", self.scale.map(|v| v.to_string()));
        opt("channels", self.channels.map(|v| v.to_string()));
        opt("window", self.window.map(|v| v.to_string()));
        opt("heads", self.heads.map(|v| v.to_string()));
        opt("n_groups", self.groups.map(|v| v.to_string()));
        opt("n_dmb_per_group", self.blocks.map(|v| v.to_string()));
        for (k, set) in [("no_stl", self.no_stl), ("no_gvt", self.no_gvt), ("plain_qkv", self.plain_qkv)] {
            if set {
                out.push((k, "true".into()));
            }
        }
        out
    }

    /// `base`, then the config file, then flags.
    fn resolve_net(&self, base: NetConfig) -> Result<NetConfig> {
        let mut cfg = base;
        if let Some(path) = &self.config {
            for (k, v) in gvtnet::kv::parse(&read_text(path)?)? {
                if !cfg.apply(&k, &v)? {
                    return Err(Error::config(k, "unknown key"));
                }
            }
        }
        for (k, v) in self.overrides() {
            cfg.apply(k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug, Default, Clone)]
pub struct TrainFlags {
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    #[arg(long)]
    pub log_every: Option<u64>,
    /// Output directory for checkpoints, loss trace and the resolved config.
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
    /// Directory of HR training PNGs.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Train on the four bundled procedural fixtures.
    #[arg(long)]
    pub fixtures: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train with L1 loss and Adam.
    Train {
        #[command(flatten)]
        net: NetFlags,
        #[command(flatten)]
        train: TrainFlags,
        /// Continue from this checkpoint (network settings come from it).
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Upscale one PNG.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Average over the eight flips/rotations of the input.
        #[arg(long)]
        ensemble: bool,
    },
    /// PSNR/SSIM over `DIR/lr/NAME.png` paired with `DIR/hr/NAME.png`.
    Eval {
        #[arg(long, required_unless_present = "identity")]
        checkpoint: Option<PathBuf>,
        /// Score each HR image against itself.
        #[arg(long, conflicts_with = "checkpoint")]
        identity: bool,
        #[arg(long)]
        data: PathBuf,
        /// Write the per-image CSV here.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        crop: usize,
        /// PSNR on luminance instead of RGB.
        #[arg(long)]
        y_channel: bool,
        #[arg(long)]
        ensemble: bool,
    },
    /// Dump the adjacency matrices a group computes for an image.
    InspectAdjacency {
        #[arg(long, required_unless_present = "random", conflicts_with = "random")]
        checkpoint: Option<PathBuf>,
        /// Use a seeded untrained network.
        #[arg(long)]
        random: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 0)]
        group: usize,
        /// CSV destination; stdout when absent.
        #[arg(long)]
        output: Option<PathBuf>,
        #[command(flatten)]
        net: NetFlags,
    },
    /// Print the architecture and parameter count.
    Describe {
        #[command(flatten)]
        net: NetFlags,
    },
    /// Finite-difference check of every parameter gradient.
    GradCheck {
        #[arg(long, default_value_t = 8)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 64)]
        max_elements: usize,
        #[command(flatten)]
        net: NetFlags,
    },
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonFinite { .. } => EXIT_NUMERICAL,
        _ => EXIT_CONFIG,
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))
}

/// Runs a parsed command, writing human output to `out`. Returns the exit code.
pub fn run(cli: Cli, out: &mut dyn std::io::Write) -> i32 {
    let result = match cli.command {
        Command::Train { net, train, resume } => cmd_train(&net, &train, resume.as_deref(), out),
        Command::Infer {
            checkpoint,
            input,
            output,
            ensemble,
        } => cmd_infer(&checkpoint, &input, &output, ensemble, out),
        Command::Eval {
            checkpoint,
            identity,
            data,
            report,
            crop,
            y_channel,
            ensemble,
        } => {
            let opts = EvalOptions {
                crop,
                y_channel,
                ..Default::default()
            };
            cmd_eval(checkpoint.as_deref(), identity, &data, report.as_deref(), &opts, ensemble, out).map(|_| EXIT_OK)
        }
        Command::InspectAdjacency {
            checkpoint,
            random,
            seed,
            input,
            group,
            output,
            net,
        } => cmd_inspect_adjacency(checkpoint.as_deref(), random, seed, &input, group, output.as_deref(), &net, out),
        Command::Describe { net } => net.resolve_net(NetConfig::toy()).map(|cfg| {
            let _ = write!(out, "{}", gvtnet::model::describe(&cfg));
            EXIT_OK
        }),
        Command::GradCheck {
            size,
            seed,
            eps,
            tol,
            max_elements,
            net,
        } => {
            let gc = GradCheckConfig {
                eps,
                tol,
                max_elements_per_tensor: max_elements,
                seed,
            };
            cmd_grad_check(&net, size, seed, &gc, out)
        }
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Defaults, then `--config`, then flags.
pub fn resolve_run_config(net: &NetFlags, train: &TrainFlags) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &net.config {
        cfg.apply_text(&read_text(path)?)?;
    }
    for (k, v) in net.overrides() {
        cfg.apply(k, &v)?;
    }
    let mut opt = |k: &str, v: Option<String>| -> Result<()> {
        match v {
            Some(v) => cfg.apply(k, &v),
            None => Ok(()),
        }
    };
    opt("steps", train.steps.map(|v| v.to_string()))?;
    opt("seed", train.seed.map(|v| v.to_string()))?;
    opt("lr", train.lr.map(|v| v.to_string()))?;
    opt("batch", train.batch.map(|v| v.to_string()))?;
    opt("checkpoint_every", train.checkpoint_every.map(|v| v.to_string()))?;
    opt("log_every", train.log_every.map(|v| v.to_string()))?;
    opt("run_dir", train.run_dir.as_ref().map(|p| p.display().to_string()))?;
    opt("data_dir", train.data.as_ref().map(|p| p.display().to_string()))?;
    if train.fixtures {
        cfg.data_dir = None;
    } else if cfg.data_dir.is_none() {
        return Err(Error::config("data_dir", "give --data DIR, a data_dir key, or --fixtures"));
    }
    cfg.validate()?;
    Ok(cfg)
}

fn png_names(dir: &Path) -> Result<BTreeSet<String>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::InvalidArgument(format!("{}: {e}", dir.display())))?;
    let mut names = BTreeSet::new();
    for entry in entries {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
                names.insert(name.to_string());
            }
        }
    }
    Ok(names)
}

fn load_training_images(dir: &Path) -> Result<Vec<Tensor>> {
    let names = png_names(dir)?;
    if names.is_empty() {
        return Err(Error::config("data_dir", format!("no PNG files in {}", dir.display())));
    }
    names.iter().map(|n| load_png(&dir.join(n))).collect()
}

pub fn cmd_train(net: &NetFlags, train: &TrainFlags, resume: Option<&Path>, out: &mut dyn std::io::Write) -> Result<i32> {
    let mut cfg = resolve_run_config(net, train)?;
    let resumed = match resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            cfg.net = ckpt.config.clone();
            Some(ckpt)
        }
        None => None,
    };
    let hr = match &cfg.data_dir {
        Some(dir) => load_training_images(dir)?,
        None => training::fixture_set(),
    };
    let pairs = training::make_pairs(&hr, cfg.net.scale, cfg.train.seed)?;

    std::fs::create_dir_all(&cfg.run_dir)?;
    write_atomic(&cfg.run_dir.join(CONFIG_FILE), cfg.to_text().as_bytes())?;
    let trainer = match resumed {
        Some(ckpt) => Trainer::resume(ckpt, cfg.train.clone(), pairs)?,
        None => Trainer::new(GvtNet::new(cfg.net.clone(), cfg.train.seed)?, cfg.train.clone(), pairs)?,
    };
    let start = trainer.step_count();
    let outcome = match run_trainer(trainer, &RunOutput::in_dir(&cfg.run_dir)) {
        Ok(o) => o,
        Err(e @ Error::NonFinite { .. }) => {
            eprintln!(
                "training aborted; last good parameters in {}",
                cfg.run_dir.join(LAST_GOOD_FILE).display()
            );
            return Err(e);
        }
        Err(e) => return Err(e),
    };
    let last = outcome.trace.last();
    let _ = writeln!(
        out,
        "trained steps {}..{}; final loss {}; checkpoint {}; loss trace {}",
        start,
        cfg.train.steps,
        last.map_or("n/a".to_string(), |r| format!("{:.6}", r.loss)),
        cfg.run_dir.join(CHECKPOINT_FILE).display(),
        cfg.run_dir.join(LOSS_FILE).display()
    );
    Ok(EXIT_OK)
}

fn load_model(path: &Path) -> Result<GvtNet> {
    Checkpoint::load(path)
        .and_then(Checkpoint::into_model)
        .map_err(|e| match e {
            Error::Io(io) => Error::Checkpoint(format!("{}: {io}", path.display())),
            other => other,
        })
}

fn upscale(model: &GvtNet, lr: &Tensor, ensemble: bool) -> Result<Tensor> {
    let x = batched(lr);
    let y = if ensemble { self_ensemble(model, &x)? } else { model.upscale(&x)? };
    if !y.is_finite() {
        return Err(Error::NonFinite {
            name: "network output".into(),
        });
    }
    Ok(unbatched(&y))
}

pub fn cmd_infer(
    checkpoint: &Path,
    input: &Path,
    output: &Path,
    ensemble: bool,
    out: &mut dyn std::io::Write,
) -> Result<i32> {
    let model = load_model(checkpoint)?;
    let lr = load_png(input)?;
    let sr = upscale(&model, &lr, ensemble)?;
    save_png(&sr, output)?;
    let s = sr.shape();
    let _ = writeln!(out, "wrote {} ({}x{})", output.display(), s[2], s[1]);
    Ok(EXIT_OK)
}

/// Scores every `DIR/lr/NAME.png` against `DIR/hr/NAME.png`.
pub fn cmd_eval(
    checkpoint: Option<&Path>,
    identity: bool,
    data: &Path,
    report_path: Option<&Path>,
    opts: &EvalOptions,
    ensemble: bool,
    out: &mut dyn std::io::Write,
) -> Result<MetricReport> {
    let model = match (identity, checkpoint) {
        (true, _) => None,
        (false, Some(p)) => Some(load_model(p)?),
        (false, None) => return Err(Error::InvalidArgument("eval needs --checkpoint or --identity".into())),
    };
    let (lr_dir, hr_dir) = (data.join("lr"), data.join("hr"));
    let hr_names = png_names(&hr_dir)?;
    let lr_names = if identity { hr_names.clone() } else { png_names(&lr_dir)? };
    let unpaired: Vec<String> = hr_names
        .symmetric_difference(&lr_names)
        .map(|n| {
            let side = if hr_names.contains(n) { "hr" } else { "lr" };
            format!("{side}/{n}")
        })
        .collect();
    if !unpaired.is_empty() {
        return Err(Error::InvalidArgument(format!("unpaired images: {}", unpaired.join(", "))));
    }
    if hr_names.is_empty() {
        return Err(Error::InvalidArgument(format!("no PNG files in {}", hr_dir.display())));
    }
    let mut rows = Vec::with_capacity(hr_names.len());
    for name in &hr_names {
        let hr = load_png(&hr_dir.join(name))?;
        let pred = match &model {
            None => hr.clone(),
            Some(m) => upscale(m, &load_png(&lr_dir.join(name))?, ensemble)?,
        };
        if pred.shape() != hr.shape() {
            return Err(Error::shape("eval", name.clone(), format!("{:?}", hr.shape()), format!("{:?}", pred.shape())));
        }
        // score the 8-bit output the user would get from `infer`
        let pred = pred.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0);
        rows.push(evaluate_pair(name, &pred, &hr, opts)?);
    }
    let report = MetricReport::new(rows)?;
    if let Some(path) = report_path {
        write_atomic(path, report.to_csv().as_bytes())?;
    }
    let _ = write!(out, "{}", report.to_table());
    Ok(report)
}

/// Adjacency rows as CSV: header, then `window,row,a0..a(M-1)` for every window row.
pub fn adjacency_csv(set: &gvtnet::adjacency::AdjacencySet) -> String {
    let m = set.tokens_per_window();
    let mut s = String::from("window,row");
    for j in 0..m {
        write!(s, ",a{j}").unwrap();
    }
    s.push('\n');
    for (w, mat) in set.matrices.iter().enumerate() {
        for i in 0..m {
            write!(s, "{w},{i}").unwrap();
            for j in 0..m {
                s.push_str(if mat.get(i, j) { ",1" } else { ",0" });
            }
            s.push('\n');
        }
    }
    s
}

pub fn adjacency_summary(set: &gvtnet::adjacency::AdjacencySet) -> String {
    let mut s = String::from("window,edge_density,isolated_nodes\n");
    let mut total = 0.0;
    for (w, mat) in set.matrices.iter().enumerate() {
        writeln!(s, "{w},{},{}", mat.density(), mat.isolated_nodes()).unwrap();
        total += mat.density();
    }
    writeln!(s, "mean,{},", total / set.matrices.len().max(1) as f64).unwrap();
    s
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_inspect_adjacency(
    checkpoint: Option<&Path>,
    random: bool,
    seed: u64,
    input: &Path,
    group: usize,
    output: Option<&Path>,
    net: &NetFlags,
    out: &mut dyn std::io::Write,
) -> Result<i32> {
    let model = match (checkpoint, random) {
        (Some(p), false) => {
            let m = load_model(p)?;
            let cfg = net.resolve_net(m.config.clone())?;
            GvtNet::from_parts(cfg, m.params)?
        }
        (None, true) => GvtNet::new(net.resolve_net(NetConfig::toy())?, seed)?,
        _ => return Err(Error::InvalidArgument("give exactly one of --checkpoint, --random".into())),
    };
    if model.config.disable_gvt {
        return Err(Error::config("no_gvt", "graph layers are disabled, there is no adjacency"));
    }
    if group >= model.config.n_groups {
        return Err(Error::config(
            "group",
            format!("index {group} out of range for {} groups", model.config.n_groups),
        ));
    }
    let img = batched(&load_png(input)?);
    let (h, w) = (img.shape()[2], img.shape()[3]);
    let win = model.config.window;
    let padded = reflect_pad(&img, h.div_ceil(win) * win, w.div_ceil(win) * win);
    let (_, trace) = model.forward(&padded)?;
    let set = &trace.adjacency[group];
    let csv = adjacency_csv(set);
    let summary = adjacency_summary(set);
    match output {
        Some(path) => {
            write_atomic(path, csv.as_bytes())?;
            let _ = write!(out, "{summary}");
        }
        None => {
            let _ = write!(out, "{csv}");
            eprint!("{summary}");
        }
    }
    Ok(EXIT_OK)
}

pub fn cmd_grad_check(
    net: &NetFlags,
    size: usize,
    seed: u64,
    gc: &GradCheckConfig,
    out: &mut dyn std::io::Write,
) -> Result<i32> {
    let cfg = net.resolve_net(NetConfig::grad_check())?;
    let report = check_network_gradients(&cfg, size, seed, gc)?;
    let mut text = String::new();
    for p in &report.params {
        writeln!(text, "{:<40} {:>4} checked  max rel error {:.3e}", p.name, p.checked, p.max_rel_error).unwrap();
    }
    writeln!(
        text,
        "max rel error {:.3e} at {}[{}] (tol {:.0e}): {}",
        report.max_rel_error,
        report.worst_param,
        report.worst_index,
        gc.tol,
        if report.pass { "PASS" } else { "FAIL" }
    )
    .unwrap();
    let _ = write!(out, "{text}");
    Ok(if report.pass { EXIT_OK } else { EXIT_NUMERICAL })
}
