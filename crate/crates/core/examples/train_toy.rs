//! Trains the frame selector to find planted frames.
//!
//! `cargo run --release --example train_toy -- 500`

use tokenbudget::train::{train_toy, TrainConfig};

fn main() -> tokenbudget::Result<()> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let cfg = TrainConfig { steps, ..Default::default() };
    let mut params = cfg.init_params();
    let report = train_toy(&cfg, &mut params)?;
    for e in &report.evals {
        println!("step {:>5} accuracy {:.3}", e.step, e.accuracy);
    }
    println!("{:.3} -> {:.3}", report.initial_accuracy, report.final_accuracy);
    Ok(())
}
