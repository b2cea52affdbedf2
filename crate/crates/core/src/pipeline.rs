//! End-to-end budgeting pipeline: select frames, merge duplicates, sample
//! spatial tokens, enforce the budget, project, and assemble the
//! LLM-ready sequence, recording a trace of every stage.

use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::merger::{
    enforce_budget_var, find_duplicate_groups, temporal_merge_var, BudgetConfig, BudgetPlan,
    MergeGroups,
};
use crate::nn::{bind, bind_frozen, join, Linear, ParamTree};
use crate::sampler::{assemble_sequence_var, SamplerParams};
use crate::selector::{
    gumbel_softmax_var, noise_for_mode, selection_logits_var, sinusoidal_positions,
    SelectionMatrix, SelectionMode, SelectorParams, TextContext, VideoTokens,
};
use crate::tensor::Tensor;

/// All hyperparameters of one pipeline run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Frames to select (`L*`).
    pub selected_frames: usize,
    /// Spatial tokens sampled per merged frame (`R`).
    pub tokens_per_frame: usize,
    /// Cap on visual tokens handed to the language model.
    pub theta: usize,
    pub tau: f64,
    /// Cosine threshold for duplicate selection rows.
    pub gamma: f64,
    pub mode: SelectionMode,
    pub seed: u64,
    pub dim: usize,
    pub llm_dim: usize,
    pub layers: usize,
    pub heads: usize,
    /// Divide selection logits by `sqrt(dim)`.
    pub scale_logits: bool,
    /// Add sinusoidal temporal encodings to frame `[CLS]` tokens.
    pub temporal_positions: bool,
    /// Learn per-token positions for the spatial sampler's keys.
    pub spatial_positions: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            selected_frames: 8,
            tokens_per_frame: 8,
            theta: 2048,
            tau: 0.5,
            gamma: 0.9,
            mode: SelectionMode::Soft,
            seed: 0,
            dim: 32,
            llm_dim: 128,
            layers: 2,
            heads: 4,
            scale_logits: false,
            temporal_positions: false,
            spatial_positions: false,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.selected_frames == 0 {
            return fail("selected_frames must be at least 1".into());
        }
        if self.tokens_per_frame == 0 {
            return fail("tokens_per_frame must be at least 1".into());
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return fail(format!("tau must be positive, got {}", self.tau));
        }
        BudgetConfig {
            theta: self.theta,
            gamma: self.gamma,
        }
        .validate()?;
        if self.dim == 0 || self.llm_dim == 0 {
            return fail("dims must be positive".into());
        }
        if self.layers == 0 {
            return fail("layers must be at least 1".into());
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return fail(format!(
                "dim {} is not divisible by {} heads",
                self.dim, self.heads
            ));
        }
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Every learnable tensor of the pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineParams<T = Tensor> {
    pub selector: SelectorParams<T>,
    pub sampler: SamplerParams<T>,
    pub projection: Linear<T>,
    /// Maps text rows into the LLM width; absent when `dim == llm_dim`.
    pub text_projection: Option<Linear<T>>,
}

impl<T> ParamTree<T> for PipelineParams<T> {
    type Mapped<U> = PipelineParams<U>;

    fn map_named<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> PipelineParams<U> {
        PipelineParams {
            selector: self.selector.map_named(&join(prefix, "selector"), f),
            sampler: self.sampler.map_named(&join(prefix, "sampler"), f),
            projection: self.projection.map_named(&join(prefix, "projection"), f),
            text_projection: self
                .text_projection
                .map_named(&join(prefix, "text_projection"), f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        self.selector.visit_mut(&join(prefix, "selector"), f);
        self.sampler.visit_mut(&join(prefix, "sampler"), f);
        self.projection.visit_mut(&join(prefix, "projection"), f);
        self.text_projection
            .visit_mut(&join(prefix, "text_projection"), f);
    }
}

impl PipelineParams {
    /// Random initialization from `cfg.seed`. `frame_tokens` (`M`) is only
    /// used when learned spatial positions are enabled.
    pub fn init(cfg: &PipelineConfig, frame_tokens: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_9a7a);
        let selector =
            SelectorParams::init(cfg.selected_frames, cfg.dim, cfg.layers, cfg.heads, &mut rng);
        let mut sampler =
            SamplerParams::init(cfg.tokens_per_frame, cfg.dim, cfg.layers, cfg.heads, &mut rng);
        if cfg.spatial_positions {
            sampler = sampler.with_key_positions(frame_tokens, &mut rng);
        }
        let projection = Linear::init(cfg.dim, cfg.llm_dim, &mut rng);
        let text_projection =
            (cfg.dim != cfg.llm_dim).then(|| Linear::init(cfg.dim, cfg.llm_dim, &mut rng));
        Self {
            selector,
            sampler,
            projection,
            text_projection,
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.named("").iter().map(|(_, t)| t.len()).sum()
    }
}

/// Token counts after each stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCounts {
    /// `L * M` body tokens entering the pipeline.
    pub input: usize,
    /// `L* * M` after frame selection.
    pub selected: usize,
    /// `G * M` after duplicate merging.
    pub merged: usize,
    /// `G * R` after spatial sampling.
    pub sampled: usize,
    /// After budget enforcement; never above `theta`.
    #[serde(rename = "final")]
    pub final_count: usize,
}

impl StageCounts {
    pub fn as_array(&self) -> [usize; 5] {
        [
            self.input,
            self.selected,
            self.merged,
            self.sampled,
            self.final_count,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct StageTiming {
    pub stage: &'static str,
    pub elapsed: Duration,
}

/// Record of one run. Timings are kept in memory only so that serialized
/// traces stay byte-reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineTrace {
    pub frames: usize,
    pub tokens_per_frame: usize,
    pub selected_count: usize,
    pub sampled_per_frame: usize,
    pub theta: usize,
    pub mode: SelectionMode,
    /// Argmax source frame for each perspective.
    pub selected_frames: Vec<usize>,
    pub duplicate_groups: Vec<Vec<usize>>,
    pub merge_order: String,
    pub halving_rounds: usize,
    pub final_token_count: usize,
    pub stage_counts: StageCounts,
    #[serde(skip)]
    pub timings: Vec<StageTiming>,
}

impl PipelineTrace {
    /// Stage-count invariants: selection and merging keep `M` per frame,
    /// counts never grow after sampling, and the final count fits the budget.
    pub fn check(&self) -> Result<()> {
        let c = &self.stage_counts;
        let m = self.tokens_per_frame;
        let g = self.duplicate_groups.len();
        let ok = c.input == self.frames * m
            && c.selected == self.selected_count * m
            && c.merged == g * m
            && c.sampled == g * self.sampled_per_frame
            && c.final_count <= c.sampled
            && c.final_count <= self.theta
            && c.final_count == self.final_token_count;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("inconsistent trace counts {c:?}")))
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trace serializes")
    }
}

/// Discrete choices made during a run. Replaying them holds the forward
/// path fixed so finite differences see a smooth function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decisions {
    pub hard_picks: Option<Vec<usize>>,
    pub groups: MergeGroups,
    pub budget: BudgetPlan,
}

/// Intermediate tensors of a run, for inspection and shape audits.
#[derive(Debug, Clone, PartialEq)]
pub struct StageTensors {
    pub selection: SelectionMatrix,
    /// `L* x (M+1) x d`.
    pub selected: Tensor,
    /// `G x (M+1) x d`.
    pub merged: Tensor,
    /// One `R x d` block per merged frame.
    pub sampled: Vec<Tensor>,
    /// Blocks after budget enforcement.
    pub budgeted: Vec<Tensor>,
    /// Budgeted blocks in the LLM width.
    pub projected: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    /// Visual rows followed by text rows, `llm_dim` wide.
    pub sequence: Tensor,
    pub visual_rows: usize,
    pub trace: PipelineTrace,
    pub decisions: Decisions,
    pub stages: StageTensors,
}

/// Graph handles from [`forward`].
#[derive(Debug)]
pub struct ForwardVars {
    pub sequence: Var,
    pub selection: Var,
    pub selected: Var,
    pub merged: Var,
    pub sampled: Vec<Var>,
    pub budgeted: Vec<Var>,
    pub projected: Vec<Var>,
}

fn check_inputs(video: &VideoTokens, text: &TextContext, cfg: &PipelineConfig) -> Result<()> {
    cfg.validate()?;
    if video.dim() != cfg.dim || text.dim() != cfg.dim {
        return Err(Error::Config(format!(
            "configured dim {} but video has {} and text has {}",
            cfg.dim,
            video.dim(),
            text.dim()
        )));
    }
    if cfg.tokens_per_frame > video.tokens_per_frame() {
        return Err(Error::Config(format!(
            "cannot sample {} tokens from frames of {}",
            cfg.tokens_per_frame,
            video.tokens_per_frame()
        )));
    }
    Ok(())
}

fn check_params(params: &PipelineParams<Var>, g: &Graph, cfg: &PipelineConfig) -> Result<()> {
    let bank = g.value(params.selector.bank.embeddings);
    if bank.shape() != [cfg.selected_frames, cfg.dim] {
        return Err(Error::Config(format!(
            "selector bank is {:?}, config wants {}x{}",
            bank.shape(),
            cfg.selected_frames,
            cfg.dim
        )));
    }
    let bank = g.value(params.sampler.bank.embeddings);
    if bank.shape() != [cfg.tokens_per_frame, cfg.dim] {
        return Err(Error::Config(format!(
            "sampler bank is {:?}, config wants {}x{}",
            bank.shape(),
            cfg.tokens_per_frame,
            cfg.dim
        )));
    }
    if params.text_projection.is_none() && cfg.dim != cfg.llm_dim {
        return Err(Error::Config(format!(
            "text projection required to map width {} to {}",
            cfg.dim, cfg.llm_dim
        )));
    }
    Ok(())
}

/// Builds the whole pipeline into `g`. With `frozen`, discrete choices are
/// replayed instead of recomputed.
pub fn forward(
    g: &mut Graph,
    video: &VideoTokens,
    text: &TextContext,
    params: &PipelineParams<Var>,
    cfg: &PipelineConfig,
    frozen: Option<&Decisions>,
) -> Result<(ForwardVars, PipelineTrace, Decisions)> {
    check_inputs(video, text, cfg)?;
    check_params(params, g, cfg)?;
    let (l, m, d) = (video.frames(), video.tokens_per_frame(), video.dim());
    let mut timings = Vec::new();
    let mut clock = Instant::now();
    let mut lap = |stage: &'static str, timings: &mut Vec<StageTiming>| {
        timings.push(StageTiming {
            stage,
            elapsed: clock.elapsed(),
        });
        clock = Instant::now();
    };

    let cls_values = if cfg.temporal_positions {
        video.cls().add(&sinusoidal_positions(l, d))?
    } else {
        video.cls().clone()
    };
    let cls = g.constant(cls_values);
    let text_var = g.constant(text.tokens().clone());
    let queries = params.selector.queries(g, text_var, cls)?;
    let logits = selection_logits_var(g, queries, cls, cfg.scale_logits)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = noise_for_mode(cfg.mode, cfg.selected_frames, l, &mut rng);
    let hard_override = frozen.and_then(|f| f.hard_picks.as_deref());
    let (selection_var, selection) =
        gumbel_softmax_var(g, logits, &noise, cfg.tau, cfg.mode, hard_override)?;
    let flat = g.constant(video.flat_frames());
    let selected = g.matmul(selection_var, flat)?;
    lap("select", &mut timings);

    let groups = match frozen {
        Some(f) => f.groups.clone(),
        None => find_duplicate_groups(&selection.weights, cfg.gamma)?,
    };
    let merged = temporal_merge_var(g, selected, &groups)?;
    lap("merge", &mut timings);

    let mut sampled = Vec::with_capacity(groups.len());
    for i in 0..groups.len() {
        let row = g.slice_rows(merged, i, i + 1)?;
        let frame = g.reshape(row, &[m + 1, d])?;
        let body = g.slice_rows(frame, 1, m + 1)?;
        sampled.push(params.sampler.sample(g, body, text_var)?);
    }
    lap("sample", &mut timings);

    let (budgeted, budget) =
        enforce_budget_var(g, &sampled, cfg.theta, frozen.map(|f| &f.budget))?;
    lap("budget", &mut timings);

    let projected = budgeted
        .iter()
        .map(|b| params.projection.forward(g, *b))
        .collect::<Result<Vec<_>>>()?;
    let text_rows = match &params.text_projection {
        Some(p) => p.forward(g, text_var)?,
        None => text_var,
    };
    let sequence = assemble_sequence_var(g, &projected, text_rows)?;
    lap("project", &mut timings);

    let final_count: usize = budgeted.iter().map(|b| g.value(*b).rows()).sum();
    let trace = PipelineTrace {
        frames: l,
        tokens_per_frame: m,
        selected_count: cfg.selected_frames,
        sampled_per_frame: cfg.tokens_per_frame,
        theta: cfg.theta,
        mode: cfg.mode,
        selected_frames: selection.selected(),
        duplicate_groups: groups.groups().to_vec(),
        merge_order: "representative".into(),
        halving_rounds: budget.round_count(),
        final_token_count: final_count,
        stage_counts: StageCounts {
            input: l * m,
            selected: cfg.selected_frames * m,
            merged: groups.len() * m,
            sampled: sampled.iter().map(|s| g.value(*s).rows()).sum(),
            final_count,
        },
        timings,
    };
    let decisions = Decisions {
        hard_picks: (cfg.mode == SelectionMode::Hard).then(|| selection.selected()),
        groups,
        budget,
    };
    let vars = ForwardVars {
        sequence,
        selection: selection_var,
        selected,
        merged,
        sampled,
        budgeted,
        projected,
    };
    Ok((vars, trace, decisions))
}

/// Inference run with frozen parameters.
pub fn run(
    video: &VideoTokens,
    text: &TextContext,
    params: &PipelineParams,
    cfg: &PipelineConfig,
) -> Result<PipelineOutput> {
    let mut g = Graph::new();
    let bound = bind_frozen(&mut g, params);
    let (vars, trace, decisions) = forward(&mut g, video, text, &bound, cfg, None)?;
    let (l_star, m, d) = (cfg.selected_frames, video.tokens_per_frame(), video.dim());
    let values = |vs: &[Var]| vs.iter().map(|v| g.value(*v).clone()).collect::<Vec<_>>();
    let stages = StageTensors {
        selection: SelectionMatrix {
            weights: g.value(vars.selection).clone(),
            tau: cfg.tau,
            mode: cfg.mode,
        },
        selected: g.value(vars.selected).reshape(&[l_star, m + 1, d])?,
        merged: g
            .value(vars.merged)
            .reshape(&[decisions.groups.len(), m + 1, d])?,
        sampled: values(&vars.sampled),
        budgeted: values(&vars.budgeted),
        projected: values(&vars.projected),
    };
    Ok(PipelineOutput {
        sequence: g.value(vars.sequence).clone(),
        visual_rows: trace.final_token_count,
        trace,
        decisions,
        stages,
    })
}

/// Scalar loss `sum(sequence * weights)` and its gradient for every
/// parameter, in [`ParamTree::named`] order.
pub fn loss_and_gradients(
    video: &VideoTokens,
    text: &TextContext,
    params: &PipelineParams,
    cfg: &PipelineConfig,
    weights: &Tensor,
    frozen: Option<&Decisions>,
) -> Result<(f64, PipelineParams)> {
    let mut g = Graph::new();
    let bound = bind(&mut g, params);
    let (vars, _, _) = forward(&mut g, video, text, &bound, cfg, frozen)?;
    let w = g.constant(weights.clone());
    let prod = g.mul(vars.sequence, w)?;
    let loss = g.sum(prod);
    let grads = g.backward(loss)?;
    let values: PipelineParams = bound.map(&mut |v| grads.get_or_zeros(*v, g.value(*v)));
    Ok((g.value(loss).item(), values))
}

/// Uniform-sampling vs budgeted token arithmetic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TokenComparison {
    /// Every body token of `L*` frames: `L* * M`.
    pub uniform: usize,
    /// `L* * R` before budget enforcement.
    pub sampled: usize,
    /// `min(L* * R, theta)`.
    pub budget_cap: usize,
    pub budgeted: usize,
}

impl TokenComparison {
    pub fn from_trace(trace: &PipelineTrace) -> Self {
        let sampled = trace.selected_count * trace.sampled_per_frame;
        Self {
            uniform: uniform_token_count(trace.selected_count, trace.tokens_per_frame),
            sampled,
            budget_cap: sampled.min(trace.theta),
            budgeted: trace.final_token_count,
        }
    }
}

/// Tokens fed to the language model when `frames` frames keep all `tokens` each.
pub fn uniform_token_count(frames: usize, tokens: usize) -> usize {
    frames * tokens
}
