//! Sweeps selected frames against tokens per frame on a small grid.

use tokenbudget::sweep::{sweep, SweepConfig};
use tokenbudget::train::TrainConfig;

fn main() -> tokenbudget::Result<()> {
    let cfg = SweepConfig {
        grid: "4,8x4,16".parse()?,
        train: TrainConfig {
            steps: 100,
            ..SweepConfig::default().train
        },
        ..Default::default()
    };
    let report = sweep(&cfg)?;
    println!("{}", report.table());
    for o in &report.observations {
        println!("{o}");
    }
    Ok(())
}
