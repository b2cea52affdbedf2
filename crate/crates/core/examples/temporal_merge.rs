//! Groups repeated selections by cosine similarity and averages their frames.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tokenbudget::merger::{find_duplicate_groups, temporal_merge};
use tokenbudget::selector::one_hot;
use tokenbudget::Tensor;

fn main() -> tokenbudget::Result<()> {
    let rows = one_hot(&[2, 2, 5, 2, 5], 6);
    let groups = find_duplicate_groups(&rows, 0.9)?;
    println!("groups {:?}", groups.groups());

    let frames = Tensor::randn(&[5, 3, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
    let (merged, trace) = temporal_merge(&frames, &groups)?;
    println!("{:?} -> {:?} ({})", frames.shape(), merged.shape(), trace.order);
    Ok(())
}
