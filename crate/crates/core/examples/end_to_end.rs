//! Runs the full pipeline on a synthetic video and prints the trace.

use tokenbudget::pipeline::TokenComparison;
use tokenbudget::synth::{synth_generate, SynthSpec};
use tokenbudget::{run, PipelineConfig, PipelineParams, SelectionMode};

fn main() -> tokenbudget::Result<()> {
    let inst = synth_generate(&SynthSpec::default())?;
    let cfg = PipelineConfig {
        selected_frames: 8,
        tokens_per_frame: 8,
        theta: 32,
        mode: SelectionMode::Hard,
        ..Default::default()
    };
    let params = PipelineParams::init(&cfg, inst.video.tokens_per_frame());
    let out = run(&inst.video, &inst.text, &params, &cfg)?;
    println!("{}", out.trace.to_json());
    let cmp = TokenComparison::from_trace(&out.trace);
    println!("uniform {} vs budgeted {}", cmp.uniform, cmp.budgeted);
    println!("sequence {:?}", out.sequence.shape());
    Ok(())
}
