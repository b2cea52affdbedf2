//! Visual token budgeting for video-language models.
//!
//! Given pre-extracted per-frame embeddings and an embedded text prompt, the
//! pipeline picks the frames most relevant to the text with a
//! Gumbel-Softmax selector, averages near-duplicate selections, samples a
//! fixed number of tokens per frame with a second query network, halves
//! frames by bipartite merging until a token budget holds, and projects the
//! result into the language model's width.
//!
//! Everything runs on a small reverse-mode autodiff core ([`graph`]) so the
//! whole path can be gradient-checked and trained on synthetic data.
//!
//! Runnable walkthroughs live in the crate's `examples/` directory.

pub mod bvtk;
pub mod checkpoint;
pub mod checks;
pub mod cli;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod merger;
pub mod nn;
pub mod pipeline;
pub mod sampler;
pub mod selector;
pub mod sweep;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use pipeline::{run, PipelineConfig, PipelineOutput, PipelineParams, PipelineTrace};
pub use selector::{SelectionMatrix, SelectionMode, TextContext, VideoTokens};
pub use tensor::Tensor;
