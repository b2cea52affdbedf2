//! Frame-count by token-count sweep on the synthetic planted-frame task.

use std::collections::BTreeMap;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::pipeline::{run, PipelineConfig, PipelineParams};
use crate::sampler::SamplerParams;
use crate::selector::{SelectionMode, SelectorParams};
use crate::synth::hit_rate;
use crate::tensor::Tensor;
use crate::train::{derive_seed, episodes, train_toy, TrainConfig};

/// `L*` values crossed with `R` values, written `"4,8,16x4,8,16,32"`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Grid {
    pub selected: Vec<usize>,
    pub tokens: Vec<usize>,
}

impl Default for Grid {
    fn default() -> Self {
        Self {
            selected: vec![4, 8, 16],
            tokens: vec![4, 8, 16, 32],
        }
    }
}

impl FromStr for Grid {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (a, b) = s
            .split_once('x')
            .ok_or_else(|| Error::Config(format!("grid {s:?} must look like 4,8x8,16")))?;
        let list = |part: &str| -> Result<Vec<usize>> {
            part.split(',')
                .map(|v| {
                    v.trim()
                        .parse::<usize>()
                        .ok()
                        .filter(|&n| n > 0)
                        .ok_or_else(|| Error::Config(format!("bad grid value {v:?} in {s:?}")))
                })
                .collect()
        };
        let grid = Self {
            selected: list(a)?,
            tokens: list(b)?,
        };
        if grid.selected.is_empty() || grid.tokens.is_empty() {
            return Err(Error::Config("grid must be nonempty".into()));
        }
        Ok(grid)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepConfig {
    pub grid: Grid,
    pub theta: usize,
    /// Body tokens per synthetic frame; must cover the largest `R`.
    pub frame_tokens: usize,
    pub eval_instances: usize,
    /// Selector training settings reused at every `L*`.
    pub train: TrainConfig,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            grid: Grid::default(),
            theta: PipelineConfig::default().theta,
            frame_tokens: 32,
            eval_instances: 16,
            train: TrainConfig {
                steps: 300,
                tokens: 32,
                ..Default::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub selected_frames: usize,
    pub tokens_per_frame: usize,
    /// Hard selections landing on planted frames.
    pub accuracy: f64,
    /// Share of centered body-token energy inside the span of the tokens
    /// handed to the language model.
    pub coverage: f64,
    /// `L* * R`.
    pub tokens_before_budget: usize,
    /// `min(L* * R, theta)`.
    pub tokens_after_budget: usize,
    /// Measured visual rows after merging and budgeting, averaged.
    pub mean_final_tokens: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepReport {
    pub config: SweepConfig,
    pub rows: Vec<SweepRow>,
    /// Observed trends, reported rather than asserted.
    pub observations: Vec<String>,
}

/// Fraction of the centered `body` rows' energy captured by `span(basis rows)`.
pub fn span_coverage(body: &Tensor, basis: &Tensor) -> f64 {
    let d = body.cols();
    let mut ortho: Vec<Vec<f64>> = Vec::new();
    for r in 0..basis.rows() {
        let mut v = basis.row(r).to_vec();
        for q in &ortho {
            let dot: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(q).for_each(|(a, b)| *a -= dot * b);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-10 {
            v.iter_mut().for_each(|x| *x /= n);
            ortho.push(v);
        }
    }
    let mut mean = vec![0.0; d];
    for r in 0..body.rows() {
        mean.iter_mut().zip(body.row(r)).for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= body.rows() as f64);
    let (mut kept, mut total) = (0.0, 0.0);
    for r in 0..body.rows() {
        let c: Vec<f64> = body.row(r).iter().zip(&mean).map(|(x, m)| x - m).collect();
        total += c.iter().map(|x| x * x).sum::<f64>();
        for q in &ortho {
            let dot: f64 = c.iter().zip(q).map(|(a, b)| a * b).sum();
            kept += dot * dot;
        }
    }
    if total == 0.0 {
        1.0
    } else {
        kept / total
    }
}

pub fn sweep(cfg: &SweepConfig) -> Result<SweepReport> {
    let max_r = cfg.grid.tokens.iter().copied().max().unwrap_or(0);
    if max_r > cfg.frame_tokens {
        return Err(Error::Config(format!(
            "largest R {max_r} exceeds frame tokens {}",
            cfg.frame_tokens
        )));
    }
    let base = TrainConfig {
        tokens: cfg.frame_tokens,
        ..cfg.train.clone()
    };
    let mut trained: BTreeMap<usize, SelectorParams> = BTreeMap::new();
    for &l_star in &cfg.grid.selected {
        let tc = TrainConfig {
            selected_frames: l_star,
            ..base.clone()
        };
        let mut params = tc.init_params();
        train_toy(&tc, &mut params)?;
        trained.insert(l_star, params);
    }

    let eval = episodes(
        &TrainConfig {
            mode: SelectionMode::Hard,
            ..base.clone()
        },
        3,
        cfg.eval_instances,
    )?;
    let mut rows = Vec::new();
    for &l_star in &cfg.grid.selected {
        for &r in &cfg.grid.tokens {
            let pc = PipelineConfig {
                selected_frames: l_star,
                tokens_per_frame: r,
                theta: cfg.theta,
                tau: base.tau,
                mode: SelectionMode::Hard,
                seed: base.seed,
                dim: base.dim,
                layers: base.layers,
                heads: base.heads,
                scale_logits: base.scale_logits,
                ..Default::default()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(base.seed, 4, r as u64));
            let params = PipelineParams {
                selector: trained[&l_star].clone(),
                sampler: SamplerParams::init(r, pc.dim, pc.layers, pc.heads, &mut rng),
                projection: Linear::init(pc.dim, pc.llm_dim, &mut rng),
                text_projection: Some(Linear::init(pc.dim, pc.llm_dim, &mut rng)),
            };
            let (mut acc, mut cov, mut fin) = (0.0, 0.0, 0.0);
            for (i, ep) in eval.iter().enumerate() {
                let run_cfg = PipelineConfig {
                    seed: derive_seed(base.seed, 5, i as u64),
                    ..pc.clone()
                };
                let out = run(&ep.instance.video, &ep.instance.text, &params, &run_cfg)?;
                acc += hit_rate(&out.trace.selected_frames, &ep.instance.labels);
                fin += out.trace.final_token_count as f64;
                let m = ep.instance.video.tokens_per_frame();
                let mut frame_cov = 0.0;
                for (f, block) in out.stages.budgeted.iter().enumerate() {
                    let frame = out.stages.merged.data()
                        [f * (m + 1) * pc.dim..(f + 1) * (m + 1) * pc.dim]
                        .to_vec();
                    let body = Tensor::matrix(m, pc.dim, frame[pc.dim..].to_vec())?;
                    frame_cov += span_coverage(&body, block);
                }
                cov += frame_cov / out.stages.budgeted.len() as f64;
            }
            let n = eval.len().max(1) as f64;
            rows.push(SweepRow {
                selected_frames: l_star,
                tokens_per_frame: r,
                accuracy: acc / n,
                coverage: cov / n,
                tokens_before_budget: l_star * r,
                tokens_after_budget: (l_star * r).min(cfg.theta),
                mean_final_tokens: fin / n,
            });
        }
    }
    let observations = observe(&rows, &cfg.grid);
    Ok(SweepReport {
        config: cfg.clone(),
        rows,
        observations,
    })
}

fn observe(rows: &[SweepRow], grid: &Grid) -> Vec<String> {
    let find = |l: usize, r: usize| {
        rows.iter()
            .find(|x| x.selected_frames == l && x.tokens_per_frame == r)
    };
    let mut out = Vec::new();
    let (r_lo, r_hi) = (
        *grid.tokens.iter().min().unwrap(),
        *grid.tokens.iter().max().unwrap(),
    );
    for &l in &grid.selected {
        if let (Some(lo), Some(hi)) = (find(l, r_lo), find(l, r_hi)) {
            out.push(format!(
                "L*={l}: accuracy {:.3} at R={r_lo} vs {:.3} at R={r_hi}; coverage {:.3} vs {:.3}",
                lo.accuracy, hi.accuracy, lo.coverage, hi.coverage
            ));
        }
        let covs: Vec<f64> = grid
            .tokens
            .iter()
            .filter_map(|&r| find(l, r).map(|x| x.coverage))
            .collect();
        let monotone = covs.windows(2).all(|w| w[1] >= w[0]);
        out.push(format!(
            "L*={l}: coverage non-decreasing in R: {monotone}"
        ));
    }
    out
}

impl SweepReport {
    /// Fixed-width table for terminals.
    pub fn table(&self) -> String {
        let mut s = format!(
            "{:>4} {:>4} {:>9} {:>9} {:>8} {:>8} {:>10}\n",
            "L*", "R", "accuracy", "coverage", "L*R", "capped", "final"
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{:>4} {:>4} {:>9.4} {:>9.4} {:>8} {:>8} {:>10.2}\n",
                r.selected_frames,
                r.tokens_per_frame,
                r.accuracy,
                r.coverage,
                r.tokens_before_budget,
                r.tokens_after_budget,
                r.mean_final_tokens
            ));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_parsing() {
        let g: Grid = "8,16x4,8,16,32".parse().unwrap();
        assert_eq!(g.selected, vec![8, 16]);
        assert_eq!(g.tokens, vec![4, 8, 16, 32]);
        assert!("8,16".parse::<Grid>().is_err());
        assert!("8,0x4".parse::<Grid>().is_err());
        assert!("x4".parse::<Grid>().is_err());
    }

    #[test]
    fn coverage_bounds() {
        let body = Tensor::from_rows(&[&[1.0, 0.0], &[-1.0, 0.0], &[0.0, 2.0], &[0.0, -2.0]]);
        assert!((span_coverage(&body, &Tensor::eye(2)) - 1.0).abs() < 1e-12);
        let x_only = Tensor::from_rows(&[&[3.0, 0.0]]);
        assert!((span_coverage(&body, &x_only) - 0.2).abs() < 1e-12);
    }
}
