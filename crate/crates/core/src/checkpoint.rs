//! Parameter checkpoints: one BVTK file per tensor plus `manifest.json`.
//!
//! Tensor names carry their namespace (`selector.`, `sampler.`,
//! `projection.`, `text_projection.`), so the two query networks never
//! share entries.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bvtk::{self, Dtype};
use crate::error::{Error, Result};
use crate::nn::ParamTree;
use crate::pipeline::{PipelineConfig, PipelineParams};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub file: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub config: PipelineConfig,
    /// Body tokens per frame the learned key positions were sized for.
    pub frame_tokens: usize,
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub llm_dim: usize,
    pub tensors: BTreeMap<String, TensorEntry>,
}

pub fn save(
    dir: impl AsRef<Path>,
    params: &PipelineParams,
    cfg: &PipelineConfig,
    frame_tokens: usize,
) -> Result<Manifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tensors = BTreeMap::new();
    for (name, t) in params.named("") {
        let file = format!("{name}.bvtk");
        bvtk::save(dir.join(&file), &t, Dtype::F64)?;
        tensors.insert(
            name,
            TensorEntry {
                file,
                shape: t.shape().to_vec(),
            },
        );
    }
    let manifest = Manifest {
        format: "BVTK1".into(),
        config: cfg.clone(),
        frame_tokens,
        layers: cfg.layers,
        heads: cfg.heads,
        dim: cfg.dim,
        llm_dim: cfg.llm_dim,
        tensors,
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let path = dir.as_ref().join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.clone(),
        source,
    })?;
    let bad = |detail: String| Error::Format {
        path: path.clone(),
        detail,
    };
    if m.format != "BVTK1" {
        return Err(bad(format!("unsupported format {:?}", m.format)));
    }
    let c = &m.config;
    if (m.layers, m.heads, m.dim, m.llm_dim) != (c.layers, c.heads, c.dim, c.llm_dim) {
        return Err(bad("layer, head or width fields disagree with config".into()));
    }
    c.validate()?;
    Ok(m)
}

/// Loads a checkpoint, checking that it holds exactly the tensors its
/// config implies, with matching shapes.
pub fn load(dir: impl AsRef<Path>) -> Result<(PipelineConfig, PipelineParams)> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    let mut params = PipelineParams::init(&manifest.config, manifest.frame_tokens);
    let manifest_path = dir.join(MANIFEST);
    let bad = |detail: String| Error::Format {
        path: manifest_path.clone(),
        detail,
    };

    let expected: Vec<String> = params.named("").into_iter().map(|(n, _)| n).collect();
    if let Some(extra) = manifest.tensors.keys().find(|k| !expected.contains(k)) {
        return Err(bad(format!("unexpected tensor {extra}")));
    }
    if let Some(missing) = expected.iter().find(|n| !manifest.tensors.contains_key(*n)) {
        return Err(bad(format!("missing tensor {missing}")));
    }
    let mut failure = None;
    params.visit_mut("", &mut |name, slot| {
        if failure.is_some() {
            return;
        }
        let entry = &manifest.tensors[name];
        let result = (|| {
            if entry.shape != slot.shape() {
                return Err(bad(format!(
                    "{name} is listed as {:?}, config needs {:?}",
                    entry.shape,
                    slot.shape()
                )));
            }
            if entry.file.contains('/') || entry.file.contains("..") {
                return Err(bad(format!("{name} points outside the checkpoint")));
            }
            let t = bvtk::load(dir.join(&entry.file))?;
            if t.shape() != slot.shape() {
                return Err(Error::Format {
                    path: dir.join(&entry.file),
                    detail: format!("shape {:?}, expected {:?}", t.shape(), slot.shape()),
                });
            }
            *slot = t;
            Ok(())
        })();
        if let Err(e) = result {
            failure = Some(e);
        }
    });
    match failure {
        Some(e) => Err(e),
        None => Ok((manifest.config, params)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> PipelineConfig {
        PipelineConfig {
            dim: 8,
            llm_dim: 12,
            heads: 2,
            layers: 1,
            spatial_positions: true,
            ..Default::default()
        }
    }

    #[test]
    fn roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small();
        let params = PipelineParams::init(&PipelineConfig { seed: 3, ..cfg.clone() }, 6);
        let m = save(dir.path(), &params, &cfg, 6).unwrap();
        assert!(m.tensors.keys().any(|k| k.starts_with("selector.")));
        assert!(m.tensors.keys().any(|k| k.starts_with("sampler.")));
        let (back_cfg, back) = load(dir.path()).unwrap();
        assert_eq!(back_cfg, cfg);
        assert_eq!(back, params);
    }

    #[test]
    fn detects_missing_and_misshapen_tensors() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small();
        let params = PipelineParams::init(&cfg, 6);
        save(dir.path(), &params, &cfg, 6).unwrap();
        let name = "selector.bank.embeddings";
        let file = dir.path().join(format!("{name}.bvtk"));

        bvtk::save(&file, &crate::tensor::Tensor::zeros(&[2, 2]), Dtype::F64).unwrap();
        assert!(matches!(load(dir.path()), Err(Error::Format { .. })));

        fs::remove_file(&file).unwrap();
        assert!(load(dir.path()).unwrap_err().is_io());

        let mut m = read_manifest(dir.path()).unwrap();
        m.tensors.remove(name);
        fs::write(dir.path().join(MANIFEST), serde_json::to_string(&m).unwrap()).unwrap();
        let err = load(dir.path()).unwrap_err().to_string();
        assert!(err.contains("missing tensor"), "{err}");
    }
}
