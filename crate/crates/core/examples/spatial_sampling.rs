//! Samples a fixed number of tokens from a large frame with text-conditioned
//! cross-attention.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tokenbudget::sampler::{spatial_sample, SamplerParams};
use tokenbudget::{Tensor, TextContext};

fn main() -> tokenbudget::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (r, m, d) = (16, 576, 64);
    let frame = Tensor::randn(&[m, d], 1.0, &mut rng);
    let text = TextContext::new(Tensor::randn(&[6, d], 1.0, &mut rng))?;
    let p = SamplerParams::init(r, d, 2, 4, &mut rng);
    let out = spatial_sample(&frame, &text, &p.bank, &p.net)?;
    println!("frame {:?} -> sampled {:?}", frame.shape(), out.shape());
    Ok(())
}
