//! Command-line verbs. Exit codes: 0 success, 1 invalid input or failed
//! check, 2 filesystem failure; errors print one line to stderr.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::parser::ValueSource;
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde::Serialize;

use crate::bvtk::{self, Dtype};
use crate::checkpoint;
use crate::checks::{run_checks, CheckSize, Module, TOLERANCE};
use crate::error::{Error, Result};
use crate::pipeline::{run, PipelineConfig, PipelineParams, PipelineTrace, TokenComparison};
use crate::selector::{SelectionMode, TextContext, VideoTokens};
use crate::sweep::{sweep, Grid, SweepConfig};
use crate::synth::{synth_generate, SynthSpec};
use crate::train::{train_toy, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "tokenbudget", version, about = "Text-conditioned visual token budgeting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the pipeline on a video and text embedding.
    Run(RunArgs),
    /// Write a synthetic planted-frame instance.
    Synth(SynthArgs),
    /// Compare analytic gradients against central differences.
    GradCheck(GradCheckArgs),
    /// Train the frame selector on synthetic data.
    TrainToy(TrainArgs),
    /// Sweep selected frames against tokens per frame.
    Sweep(SweepArgs),
    /// Summarize a trace file.
    Stats(StatsArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// BVTK tensor of shape [frames, tokens + 1, dim], [CLS] first.
    #[arg(long)]
    pub video: PathBuf,
    /// BVTK tensor of shape [text_len, dim].
    #[arg(long)]
    pub text: PathBuf,
    /// JSON config; omitted fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint directory; parameters are initialized from the seed otherwise.
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Output BVTK file for the assembled sequence.
    #[arg(long)]
    pub out: PathBuf,
    /// Output JSON trace.
    #[arg(long)]
    pub trace: PathBuf,
    /// Frames to select. Flags given explicitly override the config file.
    #[arg(long, default_value_t = PipelineConfig::default().selected_frames)]
    pub selected_frames: usize,
    /// Spatial tokens sampled per frame.
    #[arg(long, default_value_t = PipelineConfig::default().tokens_per_frame)]
    pub tokens_per_frame: usize,
    /// Cap on visual tokens.
    #[arg(long, default_value_t = PipelineConfig::default().theta)]
    pub theta: usize,
    #[arg(long, allow_negative_numbers = true, default_value_t = PipelineConfig::default().tau)]
    pub tau: f64,
    /// Cosine threshold for duplicate selections.
    #[arg(long, allow_negative_numbers = true, default_value_t = PipelineConfig::default().gamma)]
    pub gamma: f64,
    /// soft, hard or deterministic.
    #[arg(long, default_value_t = PipelineConfig::default().mode)]
    pub mode: SelectionMode,
    #[arg(long, default_value_t = PipelineConfig::default().seed)]
    pub seed: u64,
}

impl RunArgs {
    /// Applies flags that were given on the command line to `cfg`.
    fn overlay(&self, cfg: &mut PipelineConfig, m: &ArgMatches) {
        let given = |id: &str| m.value_source(id) == Some(ValueSource::CommandLine);
        if given("selected_frames") {
            cfg.selected_frames = self.selected_frames;
        }
        if given("tokens_per_frame") {
            cfg.tokens_per_frame = self.tokens_per_frame;
        }
        if given("theta") {
            cfg.theta = self.theta;
        }
        if given("tau") {
            cfg.tau = self.tau;
        }
        if given("gamma") {
            cfg.gamma = self.gamma;
        }
        if given("mode") {
            cfg.mode = self.mode;
        }
        if given("seed") {
            cfg.seed = self.seed;
        }
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = SynthSpec::default().seed)]
    pub seed: u64,
    #[arg(long, default_value_t = SynthSpec::default().frames)]
    pub frames: usize,
    /// Body tokens per frame.
    #[arg(long, default_value_t = SynthSpec::default().tokens)]
    pub tokens: usize,
    #[arg(long, default_value_t = SynthSpec::default().dim)]
    pub dim: usize,
    /// Comma-separated zero-based frame indices.
    #[arg(long, value_delimiter = ',', default_values_t = SynthSpec::default().planted)]
    pub planted: Vec<usize>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    /// selector, sampler, merger or all.
    #[arg(long, default_value = "all")]
    pub module: String,
    #[arg(long, default_value_t = CheckSize::default().seed)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, default_value_t = TrainConfig::default().steps)]
    pub steps: usize,
    #[arg(long, default_value_t = TrainConfig::default().lr)]
    pub lr: f64,
    #[arg(long, default_value_t = TrainConfig::default().seed)]
    pub seed: u64,
    /// Output JSON report.
    #[arg(long)]
    pub report: PathBuf,
    /// Also save the trained selector as a checkpoint directory.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Selected frames crossed with tokens per frame.
    #[arg(long, default_value = "4,8,16x4,8,16,32")]
    pub grid: String,
    #[arg(long, default_value_t = SweepConfig::default().train.steps)]
    pub steps: usize,
    #[arg(long, default_value_t = SweepConfig::default().theta)]
    pub theta: usize,
    #[arg(long, default_value_t = SweepConfig::default().train.seed)]
    pub seed: u64,
    /// Output JSON report.
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub trace: PathBuf,
}

/// Parses `args` (program name first) and runs the verb; returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let parsed = Cli::command()
        .try_get_matches_from(args)
        .and_then(|m| Cli::from_arg_matches(&m).map(|c| (c, m)));
    let (cli, matches) = match parsed {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let text = e.to_string();
            let line = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
            eprintln!("{line}");
            return 1;
        }
    };
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let sub = matches
        .subcommand()
        .map(|(_, m)| m.clone())
        .unwrap_or_default();
    match dispatch(cli.command, &sub, &mut out) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            if e.is_io() {
                2
            } else {
                1
            }
        }
    }
}

fn dispatch(cmd: Command, m: &ArgMatches, out: &mut dyn Write) -> Result<i32> {
    match cmd {
        Command::Run(a) => cmd_run(a, m, out),
        Command::Synth(a) => cmd_synth(a, out),
        Command::GradCheck(a) => cmd_grad_check(a, out),
        Command::TrainToy(a) => cmd_train(a, out),
        Command::Sweep(a) => cmd_sweep(a, out),
        Command::Stats(a) => cmd_stats(a, out),
    }
}

fn say(out: &mut dyn Write, text: &str) -> Result<()> {
    writeln!(out, "{text}").map_err(|e| Error::io("<stdout>", e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn cmd_run(a: RunArgs, m: &ArgMatches, out: &mut dyn Write) -> Result<i32> {
    let video = VideoTokens::from_stack(&bvtk::load(&a.video)?)?;
    let text = TextContext::new(bvtk::load(&a.text)?)?;
    let (mut cfg, loaded) = match &a.params {
        Some(p) => {
            let (cfg, params) = checkpoint::load(p)?;
            (cfg, Some(params))
        }
        None => (PipelineConfig::default(), None),
    };
    if let Some(c) = &a.config {
        cfg = PipelineConfig::load(c)?;
    }
    a.overlay(&mut cfg, m);
    cfg.validate()?;
    let params = match loaded {
        Some(p) => p,
        None => PipelineParams::init(&cfg, video.tokens_per_frame()),
    };
    let result = run(&video, &text, &params, &cfg)?;
    bvtk::save(&a.out, &result.sequence, Dtype::F64)?;
    fs::write(&a.trace, result.trace.to_json() + "\n").map_err(|e| Error::io(&a.trace, e))?;
    say(
        out,
        &format!(
            "selected {:?} groups {} rounds {} final {} sequence {}x{}",
            result.trace.selected_frames,
            result.trace.duplicate_groups.len(),
            result.trace.halving_rounds,
            result.trace.final_token_count,
            result.sequence.rows(),
            result.sequence.cols()
        ),
    )?;
    Ok(0)
}

fn cmd_synth(a: SynthArgs, out: &mut dyn Write) -> Result<i32> {
    let spec = SynthSpec {
        seed: a.seed,
        frames: a.frames,
        tokens: a.tokens,
        dim: a.dim,
        planted: a.planted,
        ..Default::default()
    };
    let inst = synth_generate(&spec)?;
    let dir = &a.out_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    bvtk::save(dir.join("video.bvtk"), &inst.video.to_stack(), Dtype::F64)?;
    bvtk::save(dir.join("text.bvtk"), inst.text.tokens(), Dtype::F64)?;
    write_json(&dir.join("labels.json"), &inst.labels)?;
    write_json(&dir.join("spec.json"), &spec)?;
    let defaults = PipelineConfig::default();
    let heads = if spec.dim.is_multiple_of(defaults.heads) { defaults.heads } else { 1 };
    let cfg = PipelineConfig {
        dim: spec.dim,
        heads,
        tokens_per_frame: defaults.tokens_per_frame.min(spec.tokens),
        ..defaults
    };
    write_json(&dir.join("config.json"), &cfg)?;
    say(
        out,
        &format!(
            "wrote {} frames of {} tokens, dim {}, planted {:?} to {}",
            spec.frames,
            spec.tokens,
            spec.dim,
            inst.labels,
            dir.display()
        ),
    )?;
    Ok(0)
}

fn cmd_grad_check(a: GradCheckArgs, out: &mut dyn Write) -> Result<i32> {
    let module: Module = a.module.parse()?;
    let size = CheckSize {
        seed: a.seed,
        ..Default::default()
    };
    let outcome = run_checks(module, &size)?;
    for (group, err) in outcome.groups() {
        say(out, &format!("{group:<40} {err:.3e}"))?;
    }
    let max = outcome.max_rel_error();
    let verdict = if outcome.passes() { "ok" } else { "FAILED" };
    say(out, &format!("max relative error {max:.3e} (tolerance {TOLERANCE:e}) {verdict}"))?;
    Ok(if outcome.passes() { 0 } else { 1 })
}

fn cmd_train(a: TrainArgs, out: &mut dyn Write) -> Result<i32> {
    let cfg = TrainConfig {
        steps: a.steps,
        lr: a.lr,
        seed: a.seed,
        ..Default::default()
    };
    let mut params = cfg.init_params();
    let report = train_toy(&cfg, &mut params)?;
    write_json(&a.report, &report)?;
    if let Some(dir) = &a.checkpoint {
        let pc = PipelineConfig {
            selected_frames: cfg.selected_frames,
            dim: cfg.dim,
            layers: cfg.layers,
            heads: cfg.heads,
            tau: cfg.tau,
            scale_logits: cfg.scale_logits,
            seed: cfg.seed,
            ..Default::default()
        };
        let mut full = PipelineParams::init(&pc, cfg.tokens);
        full.selector = params;
        checkpoint::save(dir, &full, &pc, cfg.tokens)?;
    }
    say(
        out,
        &format!(
            "steps {} loss {:.6} -> {:.6} accuracy {:.4} -> {:.4}",
            cfg.steps,
            report.losses.first().copied().unwrap_or(f64::NAN),
            report.losses.last().copied().unwrap_or(f64::NAN),
            report.initial_accuracy,
            report.final_accuracy
        ),
    )?;
    Ok(0)
}

fn cmd_sweep(a: SweepArgs, out: &mut dyn Write) -> Result<i32> {
    let grid: Grid = a.grid.parse()?;
    let defaults = SweepConfig::default();
    let cfg = SweepConfig {
        grid,
        theta: a.theta,
        train: TrainConfig {
            steps: a.steps,
            seed: a.seed,
            ..defaults.train.clone()
        },
        ..defaults
    };
    let report = sweep(&cfg)?;
    write_json(&a.report, &report)?;
    say(out, report.table().trim_end())?;
    for o in &report.observations {
        say(out, o)?;
    }
    Ok(0)
}

fn cmd_stats(a: StatsArgs, out: &mut dyn Write) -> Result<i32> {
    let trace: PipelineTrace = read_json(&a.trace)?;
    trace.check()?;
    let c = trace.stage_counts;
    let cmp = TokenComparison::from_trace(&trace);
    for (name, n) in ["input", "selected", "merged", "sampled", "final"]
        .iter()
        .zip(c.as_array())
    {
        say(out, &format!("{name:<10} {n}"))?;
    }
    say(
        out,
        &format!(
            "uniform {} (L* x M) vs budgeted {} (cap {}, L* x R {}), ratio {:.4}",
            cmp.uniform,
            cmp.budgeted,
            cmp.budget_cap,
            cmp.sampled,
            cmp.budgeted as f64 / cmp.uniform.max(1) as f64
        ),
    )?;
    Ok(0)
}
