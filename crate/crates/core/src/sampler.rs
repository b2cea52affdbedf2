//! Per-frame spatial token sampling and the projection into the language
//! model's feature space.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{bind_frozen, join, AttentionStack, Leaf, Linear, ParamTree};
use crate::selector::TextContext;
use crate::tensor::Tensor;

/// The visual-to-LLM map: one affine layer, no activation.
pub type Projection<T = Tensor> = Linear<T>;

/// Learnable spatial query embeddings, `R x d`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialQueryBank<T = Tensor> {
    pub embeddings: T,
}

impl<T> ParamTree<T> for SpatialQueryBank<T> {
    type Mapped<U> = SpatialQueryBank<U>;

    fn map_named<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> SpatialQueryBank<U> {
        SpatialQueryBank {
            embeddings: f(&join(prefix, "embeddings"), &self.embeddings),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        f(&join(prefix, "embeddings"), &mut self.embeddings)
    }
}

impl SpatialQueryBank {
    pub fn init<R: Rng + ?Sized>(count: usize, d: usize, rng: &mut R) -> Self {
        Self {
            embeddings: Tensor::randn(&[count, d], 1.0, rng),
        }
    }

    pub fn count(&self) -> usize {
        self.embeddings.rows()
    }
}

/// Spatial sampler parameters. `key_positions` (`M x d`) is only present
/// when learned token positions are enabled.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerParams<T = Tensor> {
    pub bank: SpatialQueryBank<T>,
    pub net: AttentionStack<T>,
    pub key_positions: Option<Leaf<T>>,
}

impl<T> ParamTree<T> for SamplerParams<T> {
    type Mapped<U> = SamplerParams<U>;

    fn map_named<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> SamplerParams<U> {
        SamplerParams {
            bank: self.bank.map_named(&join(prefix, "bank"), f),
            net: self.net.map_named(&join(prefix, "net"), f),
            key_positions: self
                .key_positions
                .map_named(&join(prefix, "key_positions"), f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        self.bank.visit_mut(&join(prefix, "bank"), f);
        self.net.visit_mut(&join(prefix, "net"), f);
        self.key_positions
            .visit_mut(&join(prefix, "key_positions"), f);
    }
}

impl SamplerParams {
    pub fn init<R: Rng + ?Sized>(
        tokens: usize,
        d: usize,
        layers: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            bank: SpatialQueryBank::init(tokens, d, rng),
            net: AttentionStack::init(d, layers, heads, rng),
            key_positions: None,
        }
    }

    /// Adds a learned `frame_tokens x d` position table for the keys.
    pub fn with_key_positions<R: Rng + ?Sized>(mut self, frame_tokens: usize, rng: &mut R) -> Self {
        let d = self.bank.embeddings.cols();
        self.key_positions = Some(Leaf(Tensor::randn(&[frame_tokens, d], 0.02, rng)));
        self
    }
}

impl SamplerParams<Var> {
    /// `frame` holds one frame's body rows (`M x d`); returns `R x d`.
    pub fn sample(&self, g: &mut Graph, frame: Var, text: Var) -> Result<Var> {
        let context = match &self.key_positions {
            Some(Leaf(pos)) => {
                let (m, pm) = (g.value(frame).rows(), g.value(*pos).rows());
                if m != pm {
                    return Err(Error::Config(format!(
                        "learned key positions cover {pm} tokens, frame has {m}"
                    )));
                }
                g.add(frame, *pos)?
            }
            None => frame,
        };
        self.net.forward(g, self.bank.embeddings, text, context)
    }
}

/// Samples `R` tokens from one frame's body rows with frozen parameters.
pub fn spatial_sample(
    frame_tokens: &Tensor,
    text: &TextContext,
    bank: &SpatialQueryBank,
    net: &AttentionStack,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let params = SamplerParams {
        bank: bank.clone(),
        net: net.clone(),
        key_positions: None,
    };
    let bound = bind_frozen(&mut g, &params);
    let f = g.constant(frame_tokens.clone());
    let t = g.constant(text.tokens().clone());
    let out = bound.sample(&mut g, f, t)?;
    Ok(g.value(out).clone())
}

/// `tokens · weight + bias`.
pub fn project(tokens: &Tensor, proj: &Projection) -> Result<Tensor> {
    proj.apply(tokens)
}

/// Stacks projected frame blocks in order, then the text rows (mapped by
/// `text_proj` when given). Nothing downstream is invoked.
pub fn assemble_sequence(
    projected: &[Tensor],
    text: &TextContext,
    text_proj: Option<&Projection>,
) -> Result<Tensor> {
    let text_rows = match text_proj {
        Some(p) => p.apply(text.tokens())?,
        None => text.tokens().clone(),
    };
    let mut parts: Vec<&Tensor> = projected.iter().collect();
    parts.push(&text_rows);
    Tensor::concat_rows(&parts)
}

pub fn assemble_sequence_var(g: &mut Graph, projected: &[Var], text: Var) -> Result<Var> {
    let mut parts = projected.to_vec();
    parts.push(text);
    g.concat_rows(&parts)
}
