//! Synthetic stand-ins for encoder output with a known set of relevant frames.
//!
//! Planted frames' `[CLS]` rows sit near a "relevant" centroid that also
//! generates the text rows; every other frame sits near one distractor
//! centroid. Body tokens scatter around their frame's `[CLS]` row.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::selector::{TextContext, VideoTokens};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub seed: u64,
    pub frames: usize,
    /// Body tokens per frame (`M`).
    pub tokens: usize,
    pub dim: usize,
    /// Zero-based indices of relevant frames.
    pub planted: Vec<usize>,
    /// Per-coordinate std of `[CLS]` and text rows around their centroid.
    pub noise: f64,
    pub text_len: usize,
    /// Per-coordinate std of body tokens around their frame's `[CLS]`.
    pub body_spread: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            frames: 40,
            tokens: 16,
            dim: 32,
            planted: vec![3, 9, 21, 33],
            noise: 0.1,
            text_len: 4,
            body_spread: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthInstance {
    pub video: VideoTokens,
    pub text: TextContext,
    /// Sorted planted frame indices.
    pub labels: Vec<usize>,
    pub relevant: Tensor,
    pub distractor: Tensor,
}

pub fn synth_generate(spec: &SynthSpec) -> Result<SynthInstance> {
    let (l, m, d) = (spec.frames, spec.tokens, spec.dim);
    if l == 0 || m == 0 || d == 0 || spec.text_len == 0 {
        return Err(Error::Config("frames, tokens, dim and text_len must be positive".into()));
    }
    if let Some(&bad) = spec.planted.iter().find(|&&p| p >= l) {
        return Err(Error::Config(format!(
            "planted frame {bad} is outside 0..{l}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let relevant = Tensor::randn(&[d], 1.0, &mut rng);
    let distractor = Tensor::randn(&[d], 1.0, &mut rng);
    let mut planted = vec![false; l];
    for &p in &spec.planted {
        planted[p] = true;
    }

    let mut cls = Vec::with_capacity(l * d);
    let mut body = Vec::with_capacity(l * m * d);
    for &is_planted in &planted {
        let centre = if is_planted { &relevant } else { &distractor };
        let jitter = Tensor::randn(&[d], spec.noise, &mut rng);
        let row: Vec<f64> = centre
            .data()
            .iter()
            .zip(jitter.data())
            .map(|(c, j)| c + j)
            .collect();
        let spread = Tensor::randn(&[m, d], spec.body_spread, &mut rng);
        for tok in spread.data().chunks(d) {
            body.extend(row.iter().zip(tok).map(|(c, s)| c + s));
        }
        cls.extend(row);
    }
    let text_noise = Tensor::randn(&[spec.text_len, d], spec.noise, &mut rng);
    let text: Vec<f64> = text_noise
        .data()
        .chunks(d)
        .flat_map(|r| r.iter().zip(relevant.data()).map(|(n, c)| c + n))
        .collect();

    let mut labels = spec.planted.clone();
    labels.sort_unstable();
    labels.dedup();
    Ok(SynthInstance {
        video: VideoTokens::new(Tensor::matrix(l, d, cls)?, Tensor::new(vec![l, m, d], body)?)?,
        text: TextContext::new(Tensor::matrix(spec.text_len, d, text)?)?,
        labels,
        relevant,
        distractor,
    })
}

/// Draws `count` distinct planted frames out of `frames` from `seed`.
pub fn random_planted(seed: u64, frames: usize, count: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = sample(&mut rng, frames, count.min(frames)).into_vec();
    v.sort_unstable();
    v
}

/// Fraction of `picks` that land in `labels`.
pub fn hit_rate(picks: &[usize], labels: &[usize]) -> f64 {
    if picks.is_empty() {
        return 0.0;
    }
    let hits = picks.iter().filter(|p| labels.contains(p)).count();
    hits as f64 / picks.len() as f64
}
