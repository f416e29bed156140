//! Runs the overfit harness and prints the loss-window summary.
//!
//! `cargo run --release -p gvtnet --example overfit -- [steps]`

use std::time::Instant;

use gvtnet::model::NetConfig;
use gvtnet::training::{non_decreasing_window_fraction, overfit_check, TrainConfig};

fn main() {
    let steps: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let start = Instant::now();
    let cfg = TrainConfig { steps, ..Default::default() };
    let r = overfit_check(&NetConfig::toy(), &cfg, 100).unwrap();
    println!(
        "initial {:.3} dB, final {:.3} dB after {} steps ({:.1}s), pass {}",
        r.initial_psnr,
        r.final_psnr,
        r.steps,
        start.elapsed().as_secs_f64(),
        r.pass
    );
    let means: Vec<String> = r
        .trace
        .chunks_exact(50)
        .map(|c| format!("{:.5}", c.iter().map(|t| t.loss).sum::<f64>() / 50.0))
        .collect();
    println!("50-step mean loss: {}", means.join(" "));
    for w in [25, 50, 100] {
        println!("window {w}: non-decreasing fraction {:.3}", non_decreasing_window_fraction(&r.trace, w));
    }
}
