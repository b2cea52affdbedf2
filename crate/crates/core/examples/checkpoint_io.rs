//! Saves pipeline parameters as a checkpoint directory and reloads them.

use tokenbudget::bvtk::{self, Dtype};
use tokenbudget::checkpoint;
use tokenbudget::{PipelineConfig, PipelineParams};

fn main() -> tokenbudget::Result<()> {
    let dir = std::env::temp_dir().join(format!("tokenbudget-ckpt-{}", std::process::id()));
    let cfg = PipelineConfig::default();
    let params = PipelineParams::init(&cfg, 16);
    let manifest = checkpoint::save(&dir, &params, &cfg, 16)?;
    println!("{} tensors, {} parameters", manifest.tensors.len(), params.parameter_count());
    let (cfg2, params2) = checkpoint::load(&dir)?;
    println!("roundtrip equal: {}", cfg2 == cfg && params2 == params);

    let t = bvtk::load(dir.join(&manifest.tensors.values().next().unwrap().file))?;
    let packed = bvtk::encode(&t, Dtype::F32);
    println!("first tensor {:?}, {} bytes as f32", t.shape(), packed.len());
    std::fs::remove_dir_all(&dir).ok();
    Ok(())
}
