#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tokenbudget::gradcheck::{check, DEFAULT_STEP};
use tokenbudget::{Graph, Result, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut rng(seed))
}

/// `sum(x * w)` for a fixed weighting `w`.
pub fn weighted(g: &mut Graph, x: Var, w: &Tensor) -> Result<Var> {
    let w = g.constant(w.clone());
    let p = g.mul(x, w)?;
    Ok(g.sum(p))
}

/// Max relative error between backward and central differences over all inputs.
pub fn fd_error<F>(inputs: &[Tensor], build: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var> + Sync,
{
    let named: Vec<(String, Tensor)> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| (format!("x{i}"), t.clone()))
        .collect();
    check(&named, DEFAULT_STEP, build).unwrap().max_rel_error()
}

pub fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-8);
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-8);
    dot / (na * nb)
}

/// Pairwise-threshold grouping, written out directly.
pub fn grouping_oracle(rows: &Tensor, gamma: f64) -> Vec<Vec<usize>> {
    let n = rows.rows();
    let mut pool: Vec<usize> = (0..n).collect();
    let mut out = Vec::new();
    while let Some(&alpha) = pool.first() {
        let group: Vec<usize> = pool
            .iter()
            .copied()
            .filter(|&b| b == alpha || cos(rows.row(alpha), rows.row(b)) >= gamma)
            .collect();
        pool.retain(|i| !group.contains(i));
        out.push(group);
    }
    out
}

pub fn argmax_classes(picks: &[usize]) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = Vec::new();
    for (i, p) in picks.iter().enumerate() {
        match out.iter_mut().find(|g| picks[g[0]] == *p) {
            Some(g) => g.push(i),
            None => out.push(vec![i]),
        }
    }
    out
}

/// Selection rows that repeat a few logit patterns, so duplicates occur.
pub fn clustered_logits(seed: u64) -> (Tensor, f64) {
    let mut r = rng(seed);
    let rows = r.gen_range(1..=8);
    let cols = r.gen_range(2..=6);
    let patterns = Tensor::randn(&[3, cols], 2.0, &mut r);
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let p = r.gen_range(0..3);
        for c in 0..cols {
            data.push(patterns.get(p, c) + r.gen_range(-0.3..0.3));
        }
    }
    (Tensor::matrix(rows, cols, data).unwrap(), r.gen_range(0.5..=1.0))
}

/// Best merge by exhaustive search over every A -> B assignment and every
/// choice of `floor(K/2)` merged A tokens.
pub fn matching_oracle(tokens: &Tensor) -> Tensor {
    let k = tokens.rows();
    let a: Vec<usize> = (0..k).step_by(2).collect();
    let b: Vec<usize> = (1..k).step_by(2).collect();
    let r = k / 2;
    let mut best: Option<(f64, Vec<usize>, Vec<usize>)> = None;
    let assignments = b.len().pow(a.len() as u32);
    for code in 0..assignments {
        let mut c = code;
        let target: Vec<usize> = a
            .iter()
            .map(|_| {
                let t = c % b.len();
                c /= b.len();
                t
            })
            .collect();
        for mask in 0u32..(1 << a.len()) {
            if mask.count_ones() as usize != r {
                continue;
            }
            let chosen: Vec<usize> = (0..a.len()).filter(|i| mask & (1 << i) != 0).collect();
            let score: f64 = chosen
                .iter()
                .map(|&i| cos(tokens.row(a[i]), tokens.row(b[target[i]])))
                .sum();
            if best.as_ref().is_none_or(|(s, _, _)| score > *s + 1e-12) {
                best = Some((score, target.clone(), chosen));
            }
        }
    }
    let (_, target, chosen) = best.unwrap();
    let d = tokens.cols();
    let mut out = Vec::new();
    for (i, &ai) in a.iter().enumerate() {
        if !chosen.contains(&i) {
            out.extend_from_slice(tokens.row(ai));
        }
    }
    for (j, &bj) in b.iter().enumerate() {
        let members: Vec<usize> = std::iter::once(bj)
            .chain(chosen.iter().filter(|&&i| target[i] == j).map(|&i| a[i]))
            .collect();
        for c in 0..d {
            out.push(members.iter().map(|&m| tokens.get(m, c)).sum::<f64>() / members.len() as f64);
        }
    }
    Tensor::matrix(k - r, d, out).unwrap()
}

