mod common;

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use common::{argmax_classes, clustered_logits, grouping_oracle, matching_oracle, randn, rng};
use rand::Rng;
use tokenbudget::checks::{run_checks, CheckSize, Module, TOLERANCE};
use tokenbudget::merger::{bipartite_halve, find_duplicate_groups};
use tokenbudget::pipeline::{uniform_token_count, TokenComparison};
use tokenbudget::selector::gumbel_softmax;
use tokenbudget::sweep::{sweep, SweepConfig};
use tokenbudget::synth::{synth_generate, SynthSpec};
use tokenbudget::train::{train_toy, TrainConfig};
use tokenbudget::{run, Error, PipelineConfig, PipelineParams, SelectionMode, Tensor};

const AC1_LIMIT: Duration = Duration::from_secs(1);
const AC2_LIMIT: Duration = Duration::from_secs(120);
const AC4_LIMIT: Duration = Duration::from_secs(60);
const AC5_LIMIT: Duration = Duration::from_secs(60);
const AC6_LIMIT: Duration = Duration::from_secs(300);
const AC7_LIMIT: Duration = Duration::from_secs(600);
const AC9_LIMIT: Duration = Duration::from_secs(900);

const ROW_SUM_TOL: f64 = 1e-6;
const FD_STEP: f64 = 1e-5;
const TOY_THRESHOLD: f64 = 0.9;
const TOY_STEPS: usize = 2000;
const TOY_SEEDS: u64 = 5;

type Verdict = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn ac1() -> Verdict {
    ensure(uniform_token_count(32, 256) == 8192, "32 x 256")?;
    ensure(uniform_token_count(32, 576) == 18432, "32 x 576")?;
    for (m, want) in [(256, 8192), (576, 18432)] {
        let inst = synth_generate(&SynthSpec {
            frames: 32,
            tokens: m,
            dim: 8,
            planted: vec![0],
            ..Default::default()
        })
        .map_err(|e| e.to_string())?;
        let cfg = PipelineConfig {
            selected_frames: 32,
            tokens_per_frame: 4,
            dim: 8,
            llm_dim: 8,
            heads: 2,
            layers: 1,
            mode: SelectionMode::Hard,
            ..Default::default()
        };
        let out = run(&inst.video, &inst.text, &PipelineParams::init(&cfg, m), &cfg).map_err(|e| e.to_string())?;
        let cmp = TokenComparison::from_trace(&out.trace);
        ensure(cmp.uniform == want && out.trace.stage_counts.selected == want, format!("M={m}: {}", cmp.uniform))?;
    }
    Ok("8192 and 18432".into())
}

fn ac2() -> Verdict {
    let (mut feasible, mut infeasible) = (0, 0);
    for seed in 0..1000u64 {
        let mut r = rng(seed);
        let frames = r.gen_range(1..=10);
        let tokens = r.gen_range(1..=6);
        let inst = synth_generate(&SynthSpec {
            seed,
            frames,
            tokens,
            dim: 8,
            planted: vec![r.gen_range(0..frames)],
            ..Default::default()
        })
        .map_err(|e| e.to_string())?;
        let cfg = PipelineConfig {
            selected_frames: r.gen_range(1..=8),
            tokens_per_frame: r.gen_range(1..=tokens),
            theta: r.gen_range(1..=30),
            tau: r.gen_range(0.05..=1.0),
            gamma: r.gen_range(0.5..=1.0),
            mode: [SelectionMode::Soft, SelectionMode::Hard, SelectionMode::Deterministic][r.gen_range(0..3)],
            seed,
            dim: 8,
            llm_dim: 8,
            layers: 1,
            heads: 2,
            ..Default::default()
        };
        let params = PipelineParams::init(&cfg, tokens);
        let open = PipelineConfig { theta: usize::MAX, ..cfg.clone() };
        let groups = run(&inst.video, &inst.text, &params, &open)
            .map_err(|e| format!("seed {seed}: {e}"))?
            .trace
            .duplicate_groups
            .len();
        match run(&inst.video, &inst.text, &params, &cfg) {
            Ok(out) => {
                feasible += 1;
                ensure(groups <= cfg.theta, format!("seed {seed}: {groups} frames ran under theta {}", cfg.theta))?;
                ensure(
                    out.trace.final_token_count <= cfg.theta,
                    format!("seed {seed}: {} > {}", out.trace.final_token_count, cfg.theta),
                )?;
            }
            Err(Error::BudgetInfeasible { frames: f, theta }) => {
                infeasible += 1;
                ensure(f == groups && groups > theta, format!("seed {seed}: infeasible with {f} frames, theta {theta}"))?;
            }
            Err(e) => return Err(format!("seed {seed}: {e}")),
        }
    }
    Ok(format!("{feasible} feasible, {infeasible} infeasible"))
}

fn ac3() -> Verdict {
    let taus = [1.0, 0.5, 0.1, 0.01];
    for seed in 0..100u64 {
        let logits = Tensor::randn(&[6, 10], 1.0, &mut rng(seed));
        let mut prev: Option<Vec<f64>> = None;
        for &tau in &taus {
            let soft = gumbel_softmax(&logits, tau, SelectionMode::Soft, seed).map_err(|e| e.to_string())?;
            let hard = gumbel_softmax(&logits, tau, SelectionMode::Hard, seed).map_err(|e| e.to_string())?;
            for row in 0..6 {
                let s: f64 = soft.weights.row(row).iter().sum();
                ensure((s - 1.0).abs() <= ROW_SUM_TOL, format!("seed {seed} tau {tau}: row sum {s}"))?;
            }
            ensure(hard.selected() == soft.selected(), format!("seed {seed} tau {tau}: hard != soft argmax"))?;
            let peaks: Vec<f64> = (0..6)
                .map(|r| soft.weights.row(r).iter().copied().fold(f64::MIN, f64::max))
                .collect();
            if let Some(p) = &prev {
                for (lo, hi) in p.iter().zip(&peaks) {
                    ensure(hi + 1e-12 >= *lo, format!("seed {seed} tau {tau}: peak fell {lo} -> {hi}"))?;
                }
            }
            prev = Some(peaks);
        }
    }
    Ok("100 seeds".into())
}

fn ac4() -> Verdict {
    for seed in 0..500u64 {
        let (logits, gamma) = clustered_logits(seed);
        for mode in [SelectionMode::Soft, SelectionMode::Hard] {
            let s = gumbel_softmax(&logits, 0.5, mode, seed).map_err(|e| e.to_string())?;
            let got = find_duplicate_groups(&s.weights, gamma).map_err(|e| e.to_string())?;
            ensure(got.groups() == grouping_oracle(&s.weights, gamma), format!("seed {seed} {mode}"))?;
            if mode == SelectionMode::Hard {
                ensure(got.groups() == argmax_classes(&s.selected()), format!("seed {seed}: argmax classes"))?;
            }
        }
    }
    Ok("500 seeds, soft and hard".into())
}

fn ac5() -> Verdict {
    for k in 2..=64usize {
        let tokens = randn(&[k, 4], k as u64);
        let out = bipartite_halve(&tokens).map_err(|e| e.to_string())?;
        ensure(out.rows() == k.div_ceil(2), format!("K={k}: {} rows", out.rows()))?;
        let row = randn(&[1, 4], 1000 + k as u64);
        let same = Tensor::concat_rows(&vec![&row; k]).map_err(|e| e.to_string())?;
        let out = bipartite_halve(&same).map_err(|e| e.to_string())?;
        ensure((0..out.rows()).all(|r| out.row(r) == row.row(0)), format!("K={k}: identical tokens moved"))?;
    }
    for seed in 0..300u64 {
        let mut r = rng(seed);
        let k = r.gen_range(2..=6);
        let tokens = Tensor::randn(&[k, 3], 1.0, &mut r);
        let got = bipartite_halve(&tokens).map_err(|e| e.to_string())?;
        let diff = got.max_abs_diff(&matching_oracle(&tokens));
        ensure(diff < 1e-12, format!("seed {seed} K={k}: {diff:e}"))?;
    }
    Ok("K 2..=64, oracle K<=6 over 300 seeds".into())
}

fn bin(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_tokenbudget")).args(args).output().unwrap()
}

fn ac6() -> Verdict {
    let size = CheckSize::default();
    ensure(
        (size.frames, size.tokens, size.dim, size.selected, size.sampled) == (6, 8, 16, 3, 2),
        "check size drifted",
    )?;
    ensure(tokenbudget::gradcheck::DEFAULT_STEP == FD_STEP, "step drifted")?;
    let outcome = run_checks(Module::All, &size).map_err(|e| e.to_string())?;
    let err = outcome.max_rel_error();
    ensure(err < TOLERANCE && TOLERANCE == 1e-4, format!("max rel error {err:e}"))?;
    let o = bin(&["grad-check", "--module", "all"]);
    ensure(o.status.code() == Some(0), format!("grad-check exited {:?}", o.status.code()))?;
    Ok(format!("max rel error {err:.2e} over {} suites", outcome.suites.len()))
}

fn ac7() -> Verdict {
    let mut finals = Vec::new();
    for seed in 0..TOY_SEEDS {
        let cfg = TrainConfig {
            seed,
            steps: TOY_STEPS,
            ..Default::default()
        };
        ensure((cfg.frames, cfg.planted, cfg.dim) == (40, 4, 32), "toy size drifted")?;
        let mut params = cfg.init_params();
        let report = train_toy(&cfg, &mut params).map_err(|e| e.to_string())?;
        finals.push(report.final_accuracy);
    }
    let shown = finals.iter().map(|a| format!("{a:.3}")).collect::<Vec<_>>().join(" ");
    ensure(finals.iter().all(|&a| a >= TOY_THRESHOLD), format!("final accuracy {shown}"))?;
    Ok(format!("final accuracy {shown}"))
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// Runs every verb inside `dir`, returning stdout per verb.
fn all_verbs(dir: &Path) -> Result<Vec<Vec<u8>>, String> {
    let s = |p: &str| dir.join(p).display().to_string();
    let data = s("data");
    let verbs: Vec<Vec<String>> = vec![
        vec!["synth", "--frames", "12", "--tokens", "8", "--planted", "1,5", "--out-dir", &data],
        vec![
            "run", "--video", &s("data/video.bvtk"), "--text", &s("data/text.bvtk"), "--out", &s("seq.bvtk"),
            "--trace", &s("trace.json"), "--selected-frames", "4", "--tokens-per-frame", "4", "--theta", "10",
        ],
        vec!["stats", "--trace", &s("trace.json")],
        vec!["grad-check", "--module", "sampler"],
        vec!["train-toy", "--steps", "20", "--report", &s("train.json"), "--checkpoint", &s("ckpt")],
        vec!["sweep", "--grid", "4x4,8", "--steps", "5", "--report", &s("sweep.json")],
    ]
    .into_iter()
    .map(|v| v.into_iter().map(String::from).collect())
    .collect();
    let mut outs = Vec::new();
    for v in &verbs {
        let args: Vec<&str> = v.iter().map(String::as_str).collect();
        let o = bin(&args);
        ensure(o.status.success(), format!("{} exited {:?}", v[0], o.status.code()))?;
        outs.push(o.stdout);
    }
    Ok(outs)
}

fn ac8() -> Verdict {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let out_a = all_verbs(a.path())?;
    let out_b = all_verbs(b.path())?;
    let verbs = ["synth", "run", "stats", "grad-check", "train-toy", "sweep"];
    for (i, v) in verbs.iter().enumerate() {
        let strip = |o: &[u8], d: &Path| String::from_utf8_lossy(o).replace(&d.display().to_string(), "<dir>");
        ensure(strip(&out_a[i], a.path()) == strip(&out_b[i], b.path()), format!("{v} stdout differs"))?;
    }
    let (fa, fb) = (snapshot(a.path()), snapshot(b.path()));
    ensure(fa.len() == fb.len(), "file sets differ")?;
    for ((na, ba), (nb, bb)) in fa.iter().zip(&fb) {
        ensure(na == nb && ba == bb, format!("{na} differs"))?;
    }
    Ok(format!("6 verbs, {} files", fa.len()))
}

fn ac9() -> Verdict {
    let cfg = SweepConfig::default();
    let report = sweep(&cfg).map_err(|e| e.to_string())?;
    let mut missing = Vec::new();
    for &l in &[4, 8, 16] {
        for &r in &[4, 8, 16, 32] {
            let row = report.rows.iter().find(|x| x.selected_frames == l && x.tokens_per_frame == r);
            match row {
                Some(x) if x.accuracy.is_finite() && x.coverage.is_finite() && x.mean_final_tokens.is_finite() => {}
                _ => missing.push(format!("{l}x{r}")),
            }
        }
    }
    for line in report.table().lines().chain(report.observations.iter().map(String::as_str)) {
        println!("    {line}");
    }
    ensure(missing.is_empty() && report.rows.len() == 12, format!("missing {missing:?}"))?;
    Ok("12 cells".into())
}

fn main() {
    let criteria: [(&str, &str, fn() -> Verdict, Option<Duration>); 9] = [
        ("AC1", "token arithmetic", ac1, Some(AC1_LIMIT)),
        ("AC2", "budget invariant over 1000 fuzzed pairs", ac2, Some(AC2_LIMIT)),
        ("AC3", "gumbel contract", ac3, None),
        ("AC4", "dedup equals oracle", ac4, Some(AC4_LIMIT)),
        ("AC5", "bipartite halving", ac5, Some(AC5_LIMIT)),
        ("AC6", "full-pipeline gradient check", ac6, Some(AC6_LIMIT)),
        ("AC7", "toy training reaches threshold", ac7, Some(AC7_LIMIT)),
        ("AC8", "cli determinism", ac8, None),
        ("AC9", "sweep table", ac9, Some(AC9_LIMIT)),
    ];
    let mut failed = 0;
    for (id, name, f, limit) in criteria {
        let start = Instant::now();
        let verdict = f();
        let took = start.elapsed();
        let verdict = match (verdict, limit) {
            (Ok(_), Some(l)) if took > l => Err(format!("took {took:.1?}, limit {l:?}")),
            (v, _) => v,
        };
        match verdict {
            Ok(detail) => println!("PASS {id} {name}: {detail} ({:.2}s)", took.as_secs_f64()),
            Err(detail) => {
                failed += 1;
                println!("FAIL {id} {name}: {detail} ({:.2}s)", took.as_secs_f64());
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 9 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
