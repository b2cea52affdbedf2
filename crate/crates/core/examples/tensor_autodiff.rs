//! Builds a tiny attention graph, backpropagates, and checks the gradient
//! against central differences.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tokenbudget::gradcheck::{check, DEFAULT_STEP};
use tokenbudget::{Graph, Tensor};

fn main() -> tokenbudget::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let q = Tensor::randn(&[3, 8], 1.0, &mut rng);
    let ctx = Tensor::randn(&[5, 8], 1.0, &mut rng);
    let wo = Tensor::randn(&[8, 8], 0.3, &mut rng);

    let mut g = Graph::new();
    let (qv, cv, wv) = (g.param(q.clone()), g.param(ctx.clone()), g.param(wo.clone()));
    let y = g.attention(qv, cv, cv, wv, 2)?;
    let loss = g.sum(y);
    let grads = g.backward(loss)?;
    println!("loss {:.6}", g.value(loss).data()[0]);
    println!("|dL/dq| max {:.4e}", grads.get(qv).unwrap().data().iter().fold(0.0f64, |m, v| m.max(v.abs())));

    let inputs = vec![("q".to_string(), q), ("ctx".to_string(), ctx), ("wo".to_string(), wo)];
    let report = check(&inputs, DEFAULT_STEP, |g, x| {
        let y = g.attention(x[0], x[1], x[1], x[2], 2)?;
        Ok(g.sum(y))
    })?;
    println!("finite-difference max relative error {:.3e}", report.max_rel_error());
    Ok(())
}
