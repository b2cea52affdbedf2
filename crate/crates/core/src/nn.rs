//! Parameter containers and the pre-norm query network shared by the
//! temporal selector and the spatial sampler.
//!
//! Every container is generic over its leaf type: `T = Tensor` holds the
//! weights, `T = Var` holds the same weights bound into a [`Graph`]. Binding
//! and gradient extraction are both a [`ParamTree::map`] away.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// A structure of named leaves visited in a fixed order.
pub trait ParamTree<T> {
    type Mapped<U>;

    fn map_named<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> Self::Mapped<U>;

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T));

    fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> Self::Mapped<U> {
        self.map_named("", &mut |_, t| f(t))
    }

    /// `(name, leaf)` pairs in traversal order.
    fn named(&self, prefix: &str) -> Vec<(String, T)>
    where
        T: Clone,
    {
        let mut out = Vec::new();
        self.map_named(prefix, &mut |n, t| out.push((n.to_string(), t.clone())));
        out
    }
}

impl<T, P: ParamTree<T>> ParamTree<T> for Option<P> {
    type Mapped<U> = Option<P::Mapped<U>>;

    fn map_named<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> Self::Mapped<U> {
        self.as_ref().map(|p| p.map_named(prefix, f))
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        if let Some(p) = self {
            p.visit_mut(prefix, f);
        }
    }
}

/// A single named leaf.
#[derive(Debug, Clone, PartialEq)]
pub struct Leaf<T>(pub T);

impl<T> ParamTree<T> for Leaf<T> {
    type Mapped<U> = Leaf<U>;

    fn map_named<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> Leaf<U> {
        Leaf(f(prefix, &self.0))
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        f(prefix, &mut self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams<T = Tensor> {
    pub gain: T,
    pub bias: T,
}

impl<T> ParamTree<T> for LayerNormParams<T> {
    type Mapped<U> = LayerNormParams<U>;

    fn map_named<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> LayerNormParams<U> {
        LayerNormParams {
            gain: f(&join(prefix, "gain"), &self.gain),
            bias: f(&join(prefix, "bias"), &self.bias),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        f(&join(prefix, "gain"), &mut self.gain);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

impl LayerNormParams {
    pub fn identity(d: usize) -> Self {
        Self {
            gain: Tensor::full(&[d], 1.0),
            bias: Tensor::zeros(&[d]),
        }
    }
}

/// Affine map `x · weight + bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T = Tensor> {
    pub weight: T,
    pub bias: T,
}

impl<T> ParamTree<T> for Linear<T> {
    type Mapped<U> = Linear<U>;

    fn map_named<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> Linear<U> {
        Linear {
            weight: f(&join(prefix, "weight"), &self.weight),
            bias: f(&join(prefix, "bias"), &self.bias),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

impl Linear {
    pub fn init<R: Rng + ?Sized>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        Self {
            weight: Tensor::randn(&[d_in, d_out], 1.0 / (d_in as f64).sqrt(), rng),
            bias: Tensor::zeros(&[d_out]),
        }
    }

    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[d_in, d_out]),
            bias: Tensor::zeros(&[d_out]),
        }
    }

    pub fn identity(d: usize) -> Self {
        Self {
            weight: Tensor::eye(d),
            bias: Tensor::zeros(&[d]),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[1]
    }

    /// Plain tensor evaluation.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(&self.weight)?.add_row(&self.bias)
    }
}

impl Linear<Var> {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let y = g.matmul(x, self.weight)?;
        g.add_row(y, self.bias)
    }
}

/// Query/key/value/output projections of one attention block (no biases).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<T = Tensor> {
    pub wq: T,
    pub wk: T,
    pub wv: T,
    pub wo: T,
}

impl<T> ParamTree<T> for AttentionParams<T> {
    type Mapped<U> = AttentionParams<U>;

    fn map_named<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> AttentionParams<U> {
        AttentionParams {
            wq: f(&join(prefix, "wq"), &self.wq),
            wk: f(&join(prefix, "wk"), &self.wk),
            wv: f(&join(prefix, "wv"), &self.wv),
            wo: f(&join(prefix, "wo"), &self.wo),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        f(&join(prefix, "wq"), &mut self.wq);
        f(&join(prefix, "wk"), &mut self.wk);
        f(&join(prefix, "wv"), &mut self.wv);
        f(&join(prefix, "wo"), &mut self.wo);
    }
}

impl AttentionParams {
    pub fn init<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Self {
        let std = 1.0 / (d as f64).sqrt();
        Self {
            wq: Tensor::randn(&[d, d], std, rng),
            wk: Tensor::randn(&[d, d], std, rng),
            wv: Tensor::randn(&[d, d], std, rng),
            wo: Tensor::randn(&[d, d], std, rng),
        }
    }

    pub fn zeros(d: usize) -> Self {
        Self {
            wq: Tensor::zeros(&[d, d]),
            wk: Tensor::zeros(&[d, d]),
            wv: Tensor::zeros(&[d, d]),
            wo: Tensor::zeros(&[d, d]),
        }
    }
}

impl AttentionParams<Var> {
    /// `queries` attend over `context`.
    pub fn forward(&self, g: &mut Graph, queries: Var, context: Var, heads: usize) -> Result<Var> {
        let q = g.matmul(queries, self.wq)?;
        let k = g.matmul(context, self.wk)?;
        let v = g.matmul(context, self.wv)?;
        g.attention(q, k, v, self.wo, heads)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryLayer<T = Tensor> {
    pub norm_self: LayerNormParams<T>,
    pub self_attn: AttentionParams<T>,
    pub norm_cross: LayerNormParams<T>,
    pub cross_attn: AttentionParams<T>,
    pub norm_mlp: LayerNormParams<T>,
    pub mlp_in: Linear<T>,
    pub mlp_out: Linear<T>,
}

impl<T> ParamTree<T> for QueryLayer<T> {
    type Mapped<U> = QueryLayer<U>;

    fn map_named<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> QueryLayer<U> {
        QueryLayer {
            norm_self: self.norm_self.map_named(&join(prefix, "norm_self"), f),
            self_attn: self.self_attn.map_named(&join(prefix, "self_attn"), f),
            norm_cross: self.norm_cross.map_named(&join(prefix, "norm_cross"), f),
            cross_attn: self.cross_attn.map_named(&join(prefix, "cross_attn"), f),
            norm_mlp: self.norm_mlp.map_named(&join(prefix, "norm_mlp"), f),
            mlp_in: self.mlp_in.map_named(&join(prefix, "mlp_in"), f),
            mlp_out: self.mlp_out.map_named(&join(prefix, "mlp_out"), f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        self.norm_self.visit_mut(&join(prefix, "norm_self"), f);
        self.self_attn.visit_mut(&join(prefix, "self_attn"), f);
        self.norm_cross.visit_mut(&join(prefix, "norm_cross"), f);
        self.cross_attn.visit_mut(&join(prefix, "cross_attn"), f);
        self.norm_mlp.visit_mut(&join(prefix, "norm_mlp"), f);
        self.mlp_in.visit_mut(&join(prefix, "mlp_in"), f);
        self.mlp_out.visit_mut(&join(prefix, "mlp_out"), f);
    }
}

impl QueryLayer {
    pub fn init<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Self {
        Self {
            norm_self: LayerNormParams::identity(d),
            self_attn: AttentionParams::init(d, rng),
            norm_cross: LayerNormParams::identity(d),
            cross_attn: AttentionParams::init(d, rng),
            norm_mlp: LayerNormParams::identity(d),
            mlp_in: Linear::init(d, 4 * d, rng),
            mlp_out: Linear::init(4 * d, d, rng),
        }
    }

    pub fn zeros(d: usize) -> Self {
        Self {
            norm_self: LayerNormParams::identity(d),
            self_attn: AttentionParams::zeros(d),
            norm_cross: LayerNormParams::identity(d),
            cross_attn: AttentionParams::zeros(d),
            norm_mlp: LayerNormParams::identity(d),
            mlp_in: Linear::zeros(d, 4 * d),
            mlp_out: Linear::zeros(4 * d, d),
        }
    }
}

/// Stack of pre-norm query layers: self-attention over `[queries; text]`,
/// cross-attention from the queries into a context, then a GELU MLP, each
/// with a residual connection.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStack<T = Tensor> {
    pub heads: usize,
    pub layers: Vec<QueryLayer<T>>,
}

impl<T> ParamTree<T> for AttentionStack<T> {
    type Mapped<U> = AttentionStack<U>;

    fn map_named<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> AttentionStack<U> {
        AttentionStack {
            heads: self.heads,
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| l.map_named(&join(prefix, &format!("layers.{i}")), f))
                .collect(),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("layers.{i}")), f);
        }
    }
}

impl AttentionStack {
    pub fn init<R: Rng + ?Sized>(d: usize, layers: usize, heads: usize, rng: &mut R) -> Self {
        Self {
            heads,
            layers: (0..layers).map(|_| QueryLayer::init(d, rng)).collect(),
        }
    }

    /// All projection weights zero, layer norms at identity: the stack is a
    /// pure residual pass-through.
    pub fn zeros(d: usize, layers: usize, heads: usize) -> Self {
        Self {
            heads,
            layers: (0..layers).map(|_| QueryLayer::zeros(d)).collect(),
        }
    }

    pub fn width(&self) -> Option<usize> {
        self.layers.first().map(|l| l.self_attn.wq.shape()[0])
    }

    pub fn validate(&self) -> Result<()> {
        let d = self
            .width()
            .ok_or_else(|| Error::Config("attention stack needs at least one layer".into()))?;
        if self.heads == 0 || d % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {d} is not divisible by {} heads",
                self.heads
            )));
        }
        let mut problem = None;
        self.map_named("", &mut |name, t| {
            if problem.is_none() && !t.is_finite() {
                problem = Some(name.to_string());
            }
        });
        if let Some(name) = problem {
            return Err(Error::Config(format!("parameter {name} has non-finite entries")));
        }
        Ok(())
    }
}

impl AttentionStack<Var> {
    /// Runs the stack; returns the updated query rows only.
    pub fn forward(&self, g: &mut Graph, queries: Var, text: Var, context: Var) -> Result<Var> {
        let (nq, d) = g.value(queries).expect_matrix("query network")?;
        for (what, v) in [("text", text), ("context", context)] {
            let w = g.value(v).expect_matrix("query network")?.1;
            if w != d {
                return Err(Error::Config(format!(
                    "{what} width {w} does not match query width {d}"
                )));
            }
        }
        let mut x = queries;
        for layer in &self.layers {
            let joined = g.concat_rows(&[x, text])?;
            let h = g.layernorm(joined, layer.norm_self.gain, layer.norm_self.bias)?;
            let a = layer.self_attn.forward(g, h, h, self.heads)?;
            let a = g.slice_rows(a, 0, nq)?;
            x = g.add(x, a)?;

            let h = g.layernorm(x, layer.norm_cross.gain, layer.norm_cross.bias)?;
            let c = layer.cross_attn.forward(g, h, context, self.heads)?;
            x = g.add(x, c)?;

            let h = g.layernorm(x, layer.norm_mlp.gain, layer.norm_mlp.bias)?;
            let h = layer.mlp_in.forward(g, h)?;
            let h = g.gelu(h);
            let h = layer.mlp_out.forward(g, h)?;
            x = g.add(x, h)?;
        }
        Ok(x)
    }
}

/// Binds every leaf of `params` into `g` as a trainable parameter.
pub fn bind<P: ParamTree<Tensor>>(g: &mut Graph, params: &P) -> P::Mapped<Var> {
    params.map(&mut |t| g.param(t.clone()))
}

/// Binds every leaf as a constant (inference).
pub fn bind_frozen<P: ParamTree<Tensor>>(g: &mut Graph, params: &P) -> P::Mapped<Var> {
    params.map(&mut |t| g.constant(t.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn names_are_stable_and_unique() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let stack = AttentionStack::init(8, 2, 2, &mut rng);
        let names: Vec<String> = stack.named("sel").into_iter().map(|(n, _)| n).collect();
        assert_eq!(names[0], "sel.layers.0.norm_self.gain");
        assert!(names.contains(&"sel.layers.1.mlp_out.bias".to_string()));
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
        // 3 norms x2 + 2 attn x4 + 2 linears x2 = 18 leaves per layer
        assert_eq!(names.len(), 36);
    }

    #[test]
    fn visit_mut_matches_map_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut stack = AttentionStack::init(4, 1, 1, &mut rng);
        let names: Vec<String> = stack.named("").into_iter().map(|(n, _)| n).collect();
        let mut seen = Vec::new();
        stack.visit_mut("", &mut |n, _| seen.push(n.to_string()));
        assert_eq!(names, seen);
    }

    #[test]
    fn validate_rejects_bad_heads() {
        let stack = AttentionStack::zeros(6, 1, 4);
        assert!(matches!(stack.validate(), Err(Error::Config(_))));
        assert!(AttentionStack::zeros(8, 1, 4).validate().is_ok());
        let empty = AttentionStack::<Tensor> {
            heads: 1,
            layers: vec![],
        };
        assert!(empty.validate().is_err());
    }
}
