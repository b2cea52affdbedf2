mod common;

use common::{fd_error, randn, rng, weighted};
use proptest::prelude::*;
use tokenbudget::nn::{bind, AttentionStack};
use tokenbudget::sampler::{spatial_sample, SamplerParams, SpatialQueryBank};
use tokenbudget::{Tensor, TextContext};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sample_ignores_token_order(seed in 0u64..10_000, perm in Just((0..9).collect::<Vec<usize>>()).prop_shuffle()) {
        let d = 8;
        let frame = randn(&[9, d], seed);
        let text = TextContext::new(randn(&[2, d], seed + 1)).unwrap();
        let p = SamplerParams::init(3, d, 2, 2, &mut rng(seed + 2));
        let rows: Vec<&[f64]> = perm.iter().map(|&i| frame.row(i)).collect();
        let shuffled = Tensor::matrix(9, d, rows.concat()).unwrap();
        let a = spatial_sample(&frame, &text, &p.bank, &p.net).unwrap();
        let b = spatial_sample(&shuffled, &text, &p.bank, &p.net).unwrap();
        prop_assert!(a.max_abs_diff(&b) < 1e-9);
    }
}

#[test]
fn shapes_and_zero_net() {
    let (r, m, d) = (32, 256, 64);
    let bank = SpatialQueryBank::init(r, d, &mut rng(3));
    let frame = randn(&[m, d], 4);
    let text = TextContext::new(randn(&[5, d], 5)).unwrap();
    let out = spatial_sample(&frame, &text, &bank, &AttentionStack::zeros(d, 2, 4)).unwrap();
    assert_eq!(out.shape(), &[r, d]);
    assert!(out.max_abs_diff(&bank.embeddings) < 1e-12);
    let net = AttentionStack::init(d, 1, 4, &mut rng(6));
    assert_eq!(spatial_sample(&frame, &text, &bank, &net).unwrap().shape(), &[r, d]);
}

#[test]
fn bank_gradient_matches_finite_differences() {
    let d = 8;
    let p = SamplerParams::init(3, d, 2, 2, &mut rng(7));
    let frame = randn(&[6, d], 8);
    let text = randn(&[2, d], 9);
    let w = randn(&[3, d], 10);
    let err = fd_error(std::slice::from_ref(&p.bank.embeddings), |g, x| {
        let mut bound = bind(g, &p);
        bound.bank.embeddings = x[0];
        let f = g.constant(frame.clone());
        let t = g.constant(text.clone());
        let y = bound.sample(g, f, t)?;
        weighted(g, y, &w)
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn learned_positions_break_order_invariance() {
    let d = 8;
    let p = SamplerParams::init(3, d, 1, 2, &mut rng(11)).with_key_positions(4, &mut rng(12));
    let frame = randn(&[4, d], 13);
    let swapped = Tensor::concat_rows(&[
        &frame.slice_rows(1, 2).unwrap(),
        &frame.slice_rows(0, 1).unwrap(),
        &frame.slice_rows(2, 4).unwrap(),
    ])
    .unwrap();
    let run = |f: &Tensor| {
        let mut g = tokenbudget::Graph::new();
        let b = tokenbudget::nn::bind_frozen(&mut g, &p);
        let fv = g.constant(f.clone());
        let t = g.constant(randn(&[2, d], 14));
        let y = b.sample(&mut g, fv, t).unwrap();
        g.value(y).clone()
    };
    assert!(run(&frame).max_abs_diff(&run(&swapped)) > 1e-9);
}
