//! Gradient-check suites behind `grad-check --module`.
//!
//! Every suite runs in f64 with discrete choices (merge groups, halving
//! plans) frozen, and loads a fixed random weighting of the output as the
//! scalar objective.

use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::gradcheck::{check, GradReport, DEFAULT_STEP};
use crate::graph::{Graph, Var};
use crate::merger::{enforce_budget_var, temporal_merge_var, MergeGroups};
use crate::nn::ParamTree;
use crate::pipeline::{forward, run, PipelineConfig, PipelineParams};
use crate::sampler::SamplerParams;
use crate::selector::{gumbel_noise, gumbel_softmax_var, selection_logits_var, SelectionMode, SelectorParams};
use crate::synth::{synth_generate, SynthSpec};
use crate::tensor::Tensor;

pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Module {
    Selector,
    Sampler,
    Merger,
    All,
}

impl FromStr for Module {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "selector" => Ok(Module::Selector),
            "sampler" => Ok(Module::Sampler),
            "merger" => Ok(Module::Merger),
            "all" => Ok(Module::All),
            _ => Err(Error::Config(format!(
                "unknown module {s:?}; expected selector, sampler, merger or all"
            ))),
        }
    }
}

/// Instance sizes for the checks.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckSize {
    pub frames: usize,
    pub tokens: usize,
    pub dim: usize,
    pub selected: usize,
    pub sampled: usize,
    pub theta: usize,
    pub layers: usize,
    pub heads: usize,
    pub seed: u64,
}

impl Default for CheckSize {
    fn default() -> Self {
        Self {
            frames: 6,
            tokens: 8,
            dim: 16,
            selected: 3,
            sampled: 2,
            theta: 4,
            layers: 2,
            heads: 2,
            seed: 0,
        }
    }
}

/// Reports keyed by suite name, in run order.
#[derive(Debug, Clone, Serialize)]
pub struct CheckOutcome {
    pub suites: Vec<(String, GradReport)>,
}

impl CheckOutcome {
    pub fn max_rel_error(&self) -> f64 {
        self.suites
            .iter()
            .map(|(_, r)| r.max_rel_error())
            .fold(0.0, f64::max)
    }

    pub fn passes(&self) -> bool {
        self.max_rel_error() < TOLERANCE
    }

    /// `(suite/group, max relative error)` where a group is a name up to its
    /// second dot, e.g. `selector.net`.
    pub fn groups(&self) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = Vec::new();
        for (suite, report) in &self.suites {
            for c in &report.checks {
                let group: String = c.name.split('.').take(2).collect::<Vec<_>>().join(".");
                let key = format!("{suite}/{group}");
                match out.iter_mut().find(|(k, _)| *k == key) {
                    Some((_, e)) => *e = e.max(c.rel_error),
                    None => out.push((key, c.rel_error)),
                }
            }
        }
        out
    }
}

fn weights(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

fn weighted_sum(g: &mut Graph, x: Var, w: &Tensor) -> Result<Var> {
    let w = g.constant(w.clone());
    let p = g.mul(x, w)?;
    Ok(g.sum(p))
}

/// Rebuilds a parameter tree over `vars`, which follow `template`'s order.
fn rebind<P: ParamTree<Tensor>>(template: &P, vars: &[Var]) -> P::Mapped<Var> {
    let mut it = vars.iter();
    template.map(&mut |_| *it.next().expect("one var per leaf"))
}

fn instance(size: &CheckSize) -> Result<crate::synth::SynthInstance> {
    synth_generate(&SynthSpec {
        seed: size.seed,
        frames: size.frames,
        tokens: size.tokens,
        dim: size.dim,
        planted: vec![0, size.frames / 2],
        text_len: 3,
        ..Default::default()
    })
}

/// Soft Gumbel-Softmax selection rows against the selector's parameters.
pub fn selector_suite(size: &CheckSize) -> Result<GradReport> {
    let inst = instance(size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(size.seed ^ 0x5e1e);
    let params = SelectorParams::init(size.selected, size.dim, size.layers, size.heads, &mut rng);
    let noise = gumbel_noise(size.selected, size.frames, &mut rng);
    let w = weights(&[size.selected, size.frames], &mut rng);
    let named = params.named("selector");
    check(&named, DEFAULT_STEP, |g, vars| {
        let p = rebind(&params, vars);
        let text = g.constant(inst.text.tokens().clone());
        let cls = g.constant(inst.video.cls().clone());
        let q = p.queries(g, text, cls)?;
        let logits = selection_logits_var(g, q, cls, false)?;
        let (s, _) = gumbel_softmax_var(g, logits, &noise, 0.5, SelectionMode::Soft, None)?;
        weighted_sum(g, s, &w)
    })
}

/// Sampled tokens of one frame against the sampler's parameters.
pub fn sampler_suite(size: &CheckSize) -> Result<GradReport> {
    let inst = instance(size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(size.seed ^ 0x5a3b);
    let params = SamplerParams::init(size.sampled, size.dim, size.layers, size.heads, &mut rng)
        .with_key_positions(size.tokens, &mut rng);
    let w = weights(&[size.sampled, size.dim], &mut rng);
    let frame = inst.video.frame_body(0);
    let named = params.named("sampler");
    check(&named, DEFAULT_STEP, |g, vars| {
        let p = rebind(&params, vars);
        let text = g.constant(inst.text.tokens().clone());
        let f = g.constant(frame.clone());
        let out = p.sample(g, f, text)?;
        weighted_sum(g, out, &w)
    })
}

/// Temporal merge then budget halving, against the frame inputs.
pub fn merger_suite(size: &CheckSize) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(size.seed ^ 0x3e26);
    let n = size.selected.max(3);
    let k = size.tokens.max(4);
    let frames = Tensor::randn(&[n, k * size.dim], 1.0, &mut rng);
    let groups = MergeGroups::new(
        vec![vec![0, 2], (1..n).filter(|&i| i != 2).collect()],
        n,
    )?;
    let theta = (groups.len() * k / 2).max(groups.len());
    let plan = {
        let mut g = Graph::new();
        let x = g.constant(frames.clone());
        let (_, per_frame) = split_merged(&mut g, x, &groups, k, size.dim)?;
        enforce_budget_var(&mut g, &per_frame, theta, None)?.1
    };
    let w: Vec<Tensor> = {
        let mut g = Graph::new();
        let x = g.constant(frames.clone());
        let (_, per_frame) = split_merged(&mut g, x, &groups, k, size.dim)?;
        let (out, _) = enforce_budget_var(&mut g, &per_frame, theta, Some(&plan))?;
        out.iter().map(|v| weights(g.value(*v).shape(), &mut rng)).collect()
    };
    let named = vec![("merger.frames".to_string(), frames)];
    check(&named, DEFAULT_STEP, |g, vars| {
        let (_, per_frame) = split_merged(g, vars[0], &groups, k, size.dim)?;
        let (out, _) = enforce_budget_var(g, &per_frame, theta, Some(&plan))?;
        let mut total = None;
        for (v, wt) in out.iter().zip(&w) {
            let s = weighted_sum(g, *v, wt)?;
            total = Some(match total {
                Some(t) => g.add(t, s)?,
                None => s,
            });
        }
        Ok(total.expect("at least one frame"))
    })
}

fn split_merged(
    g: &mut Graph,
    flat: Var,
    groups: &MergeGroups,
    k: usize,
    d: usize,
) -> Result<(Var, Vec<Var>)> {
    let merged = temporal_merge_var(g, flat, groups)?;
    let mut out = Vec::with_capacity(groups.len());
    for i in 0..groups.len() {
        let row = g.slice_rows(merged, i, i + 1)?;
        out.push(g.reshape(row, &[k, d])?);
    }
    Ok((merged, out))
}

/// The whole pipeline in soft mode with merge groups and halving plans from
/// an unperturbed run replayed under every perturbation.
pub fn pipeline_suite(size: &CheckSize) -> Result<GradReport> {
    let inst = instance(size)?;
    let cfg = PipelineConfig {
        selected_frames: size.selected,
        tokens_per_frame: size.sampled,
        theta: size.theta,
        mode: SelectionMode::Soft,
        seed: size.seed,
        dim: size.dim,
        llm_dim: size.dim + 4,
        layers: size.layers,
        heads: size.heads,
        spatial_positions: true,
        temporal_positions: true,
        ..Default::default()
    };
    let params = PipelineParams::init(&cfg, size.tokens);
    let reference = run(&inst.video, &inst.text, &params, &cfg)?;
    let decisions = reference.decisions.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(size.seed ^ 0xa11);
    let w = weights(reference.sequence.shape(), &mut rng);
    let named = params.named("");
    check(&named, DEFAULT_STEP, |g, vars| {
        let p = rebind(&params, vars);
        let (fv, _, _) = forward(g, &inst.video, &inst.text, &p, &cfg, Some(&decisions))?;
        weighted_sum(g, fv.sequence, &w)
    })
}

pub fn run_checks(module: Module, size: &CheckSize) -> Result<CheckOutcome> {
    let mut suites = Vec::new();
    if matches!(module, Module::Selector | Module::All) {
        suites.push(("selector".to_string(), selector_suite(size)?));
    }
    if matches!(module, Module::Sampler | Module::All) {
        suites.push(("sampler".to_string(), sampler_suite(size)?));
    }
    if matches!(module, Module::Merger | Module::All) {
        suites.push(("merger".to_string(), merger_suite(size)?));
    }
    if module == Module::All {
        suites.push(("pipeline".to_string(), pipeline_suite(size)?));
    }
    Ok(CheckOutcome { suites })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn module_names() {
        assert_eq!("all".parse::<Module>().unwrap(), Module::All);
        assert!("everything".parse::<Module>().is_err());
    }

    #[test]
    fn merger_suite_passes() {
        let r = merger_suite(&CheckSize::default()).unwrap();
        assert!(r.passes(TOLERANCE), "{r:?}");
    }
}
