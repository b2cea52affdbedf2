//! Halves token sets by bipartite matching until a budget fits.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tokenbudget::merger::{enforce_budget, plan_halve};
use tokenbudget::{Error, Tensor};

fn main() -> tokenbudget::Result<()> {
    let tokens = Tensor::from_rows(&[&[1.0, 0.0], &[0.9, 0.3], &[0.0, 1.0], &[0.05, 1.0]]);
    let plan = plan_halve(&tokens)?;
    println!("kept {:?}, merged into {:?}", plan.kept, plan.targets);
    println!("{:?}", plan.apply(&tokens)?.data());

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let frames: Vec<Tensor> = (0..4).map(|_| Tensor::randn(&[16, 8], 1.0, &mut rng)).collect();
    for theta in [64, 40, 9, 4, 3] {
        match enforce_budget(&frames, theta) {
            Ok((out, rounds)) => {
                let total: usize = out.iter().map(Tensor::rows).sum();
                println!("theta {theta:>2}: {total} tokens after {rounds} rounds");
            }
            Err(e @ Error::BudgetInfeasible { .. }) => println!("theta {theta:>2}: {e}"),
            Err(e) => return Err(e),
        }
    }
    Ok(())
}
