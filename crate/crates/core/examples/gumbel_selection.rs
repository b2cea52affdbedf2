//! Soft, hard and deterministic selection rows from one set of logits, and
//! how the peaks sharpen as the temperature drops.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tokenbudget::selector::gumbel_softmax;
use tokenbudget::{SelectionMode, Tensor};

fn main() -> tokenbudget::Result<()> {
    let logits = Tensor::randn(&[4, 10], 1.0, &mut ChaCha8Rng::seed_from_u64(7));
    for mode in [SelectionMode::Soft, SelectionMode::Hard, SelectionMode::Deterministic] {
        let s = gumbel_softmax(&logits, 0.5, mode, 7)?;
        println!("{mode:<13} picks {:?}", s.selected());
    }
    for tau in [1.0, 0.5, 0.1, 0.01] {
        let s = gumbel_softmax(&logits, tau, SelectionMode::Soft, 7)?;
        let peak = s.weights.row(0).iter().copied().fold(f64::MIN, f64::max);
        println!("tau {tau:<5} row 0 peak {peak:.4}");
    }
    Ok(())
}
