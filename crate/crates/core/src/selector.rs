//! Text-conditioned frame selection: query generation from frame `[CLS]`
//! tokens and text, inner-product logits, Gumbel-Softmax selection rows and
//! the weighted frame combination they drive.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{bind_frozen, join, AttentionStack, ParamTree};
use crate::tensor::{self, Tensor};

/// Clamp applied to uniform draws before the double log.
pub const UNIFORM_CLAMP: f64 = 1e-12;

/// Pre-extracted per-frame embeddings: one `[CLS]` row and `M` body rows per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoTokens {
    cls: Tensor,
    body: Tensor,
}

impl VideoTokens {
    /// `cls` is `L x d`, `body` is `L x M x d`.
    pub fn new(cls: Tensor, body: Tensor) -> Result<Self> {
        let (l, d) = cls.expect_matrix("video cls")?;
        if body.ndim() != 3 {
            return Err(Error::dim(
                "video body",
                format!("expected L x M x d, got {:?}", body.shape()),
            ));
        }
        let (bl, m, bd) = (body.shape()[0], body.shape()[1], body.shape()[2]);
        if l == 0 || m == 0 || d == 0 {
            return Err(Error::dim("video", "need at least one frame, one token and one channel"));
        }
        if bl != l || bd != d {
            return Err(Error::dim(
                "video",
                format!("cls {l}x{d} against body {bl}x{m}x{bd}"),
            ));
        }
        Ok(Self { cls, body })
    }

    /// From one `L x (M+1) x d` tensor whose first row per frame is `[CLS]`.
    pub fn from_stack(stack: &Tensor) -> Result<Self> {
        if stack.ndim() != 3 || stack.shape()[1] < 2 {
            return Err(Error::dim(
                "video",
                format!("expected L x (M+1) x d with M >= 1, got {:?}", stack.shape()),
            ));
        }
        let (l, m1, d) = (stack.shape()[0], stack.shape()[1], stack.shape()[2]);
        let mut cls = Vec::with_capacity(l * d);
        let mut body = Vec::with_capacity(l * (m1 - 1) * d);
        for frame in stack.data().chunks(m1 * d) {
            cls.extend_from_slice(&frame[..d]);
            body.extend_from_slice(&frame[d..]);
        }
        Self::new(
            Tensor::matrix(l, d, cls)?,
            Tensor::new(vec![l, m1 - 1, d], body)?,
        )
    }

    /// `L x (M+1) x d`, `[CLS]` first in every frame.
    pub fn to_stack(&self) -> Tensor {
        let (l, m, d) = (self.frames(), self.tokens_per_frame(), self.dim());
        self.flat_frames()
            .reshape(&[l, m + 1, d])
            .expect("consistent by construction")
    }

    /// One row per frame holding `[CLS]` then the body rows, flattened.
    pub fn flat_frames(&self) -> Tensor {
        let (l, m, d) = (self.frames(), self.tokens_per_frame(), self.dim());
        let mut data = Vec::with_capacity(l * (m + 1) * d);
        for f in 0..l {
            data.extend_from_slice(self.cls.row(f));
            data.extend_from_slice(&self.body.data()[f * m * d..(f + 1) * m * d]);
        }
        Tensor::matrix(l, (m + 1) * d, data).expect("consistent by construction")
    }

    pub fn cls(&self) -> &Tensor {
        &self.cls
    }

    pub fn body(&self) -> &Tensor {
        &self.body
    }

    /// Body rows of frame `f` as an `M x d` matrix.
    pub fn frame_body(&self, f: usize) -> Tensor {
        let (m, d) = (self.tokens_per_frame(), self.dim());
        Tensor::matrix(m, d, self.body.data()[f * m * d..(f + 1) * m * d].to_vec())
            .expect("consistent by construction")
    }

    pub fn frames(&self) -> usize {
        self.cls.shape()[0]
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.body.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.cls.shape()[1]
    }

    /// Same content with frames reordered: output frame `i` is input frame `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let (m, d) = (self.tokens_per_frame(), self.dim());
        let mut cls = Vec::with_capacity(self.cls.len());
        let mut body = Vec::with_capacity(self.body.len());
        for &p in perm {
            cls.extend_from_slice(self.cls.row(p));
            body.extend_from_slice(&self.body.data()[p * m * d..(p + 1) * m * d]);
        }
        Self::new(
            Tensor::matrix(perm.len(), d, cls)?,
            Tensor::new(vec![perm.len(), m, d], body)?,
        )
    }
}

/// Pre-embedded text rows, `N x d`.
#[derive(Debug, Clone, PartialEq)]
pub struct TextContext {
    tokens: Tensor,
}

impl TextContext {
    pub fn new(tokens: Tensor) -> Result<Self> {
        let (n, d) = tokens.expect_matrix("text")?;
        if n == 0 || d == 0 {
            return Err(Error::dim("text", "need at least one token of nonzero width"));
        }
        Ok(Self { tokens })
    }

    pub fn tokens(&self) -> &Tensor {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }
}

/// Learnable seed embeddings for the selection queries, `L* x d`.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryBank<T = Tensor> {
    pub embeddings: T,
}

impl<T> ParamTree<T> for QueryBank<T> {
    type Mapped<U> = QueryBank<U>;

    fn map_named<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> QueryBank<U> {
        QueryBank {
            embeddings: f(&join(prefix, "embeddings"), &self.embeddings),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        f(&join(prefix, "embeddings"), &mut self.embeddings)
    }
}

impl QueryBank {
    pub fn init<R: Rng + ?Sized>(count: usize, d: usize, rng: &mut R) -> Self {
        Self {
            embeddings: Tensor::randn(&[count, d], 1.0, rng),
        }
    }

    pub fn count(&self) -> usize {
        self.embeddings.rows()
    }
}

/// Temporal selector parameters: the query bank and its query network.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectorParams<T = Tensor> {
    pub bank: QueryBank<T>,
    pub net: AttentionStack<T>,
}

impl<T> ParamTree<T> for SelectorParams<T> {
    type Mapped<U> = SelectorParams<U>;

    fn map_named<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> SelectorParams<U> {
        SelectorParams {
            bank: self.bank.map_named(&join(prefix, "bank"), f),
            net: self.net.map_named(&join(prefix, "net"), f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        self.bank.visit_mut(&join(prefix, "bank"), f);
        self.net.visit_mut(&join(prefix, "net"), f);
    }
}

impl SelectorParams {
    pub fn init<R: Rng + ?Sized>(
        selected: usize,
        d: usize,
        layers: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            bank: QueryBank::init(selected, d, rng),
            net: AttentionStack::init(d, layers, heads, rng),
        }
    }
}

impl SelectorParams<Var> {
    pub fn queries(&self, g: &mut Graph, text: Var, cls: Var) -> Result<Var> {
        self.net.forward(g, self.bank.embeddings, text, cls)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMode {
    /// Relaxed rows `softmax((logits + g) / tau)`.
    #[default]
    Soft,
    /// One-hot rows forward, soft rows backward.
    Hard,
    /// Soft rows without Gumbel noise.
    Deterministic,
}

impl std::str::FromStr for SelectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "soft" => Ok(Self::Soft),
            "hard" => Ok(Self::Hard),
            "deterministic" => Ok(Self::Deterministic),
            other => Err(Error::Config(format!("unknown selection mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for SelectionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Soft => "soft",
            Self::Hard => "hard",
            Self::Deterministic => "deterministic",
        })
    }
}

/// Row-stochastic `L* x L` frame weights.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionMatrix {
    pub weights: Tensor,
    pub tau: f64,
    pub mode: SelectionMode,
}

impl SelectionMatrix {
    /// Argmax frame per perspective.
    pub fn selected(&self) -> Vec<usize> {
        self.weights.argmax_rows()
    }

    pub fn perspectives(&self) -> usize {
        self.weights.rows()
    }

    pub fn frames(&self) -> usize {
        self.weights.cols()
    }
}

/// Standard Gumbel draws `-ln(-ln u)` for an `rows x cols` grid, row-major.
pub fn gumbel_noise<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let u: f64 = rng.gen();
            let u = u.clamp(UNIFORM_CLAMP, 1.0 - UNIFORM_CLAMP);
            -(-u.ln()).ln()
        })
        .collect();
    Tensor::matrix(rows, cols, data).expect("sized by construction")
}

pub fn noise_for_mode<R: Rng + ?Sized>(
    mode: SelectionMode,
    rows: usize,
    cols: usize,
    rng: &mut R,
) -> Tensor {
    match mode {
        SelectionMode::Deterministic => Tensor::zeros(&[rows, cols]),
        _ => gumbel_noise(rows, cols, rng),
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

/// One-hot rows at the given column indices.
pub fn one_hot(indices: &[usize], cols: usize) -> Tensor {
    let mut t = Tensor::zeros(&[indices.len(), cols]);
    for (r, &c) in indices.iter().enumerate() {
        t.data_mut()[r * cols + c] = 1.0;
    }
    t
}

/// Graph form of Gumbel-Softmax with caller-supplied noise. In hard mode the
/// one-hot columns are `hard_override` when given (frozen decisions), else
/// the row argmax of `logits + noise`.
pub fn gumbel_softmax_var(
    g: &mut Graph,
    logits: Var,
    noise: &Tensor,
    tau: f64,
    mode: SelectionMode,
    hard_override: Option<&[usize]>,
) -> Result<(Var, SelectionMatrix)> {
    check_tau(tau)?;
    let noise = g.constant(noise.clone());
    let z = g.add(logits, noise)?;
    let scaled = g.scale(z, 1.0 / tau);
    let soft = g.softmax_rows(scaled)?;
    let out = match mode {
        SelectionMode::Hard => {
            let cols = g.value(soft).cols();
            let picks = match hard_override {
                Some(p) => p.to_vec(),
                None => g.value(z).argmax_rows(),
            };
            g.straight_through(soft, one_hot(&picks, cols))?
        }
        _ => soft,
    };
    let matrix = SelectionMatrix {
        weights: g.value(out).clone(),
        tau,
        mode,
    };
    Ok((out, matrix))
}

/// Gumbel-Softmax over `logits` with noise drawn from `seed`.
pub fn gumbel_softmax(logits: &Tensor, tau: f64, mode: SelectionMode, seed: u64) -> Result<SelectionMatrix> {
    let (rows, cols) = logits.expect_matrix("gumbel_softmax")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = noise_for_mode(mode, rows, cols, &mut rng);
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    Ok(gumbel_softmax_var(&mut g, l, &noise, tau, mode, None)?.1)
}

/// `queries · cls^T`, optionally divided by `sqrt(d)`.
pub fn selection_logits(queries: &Tensor, cls: &Tensor, scaled: bool) -> Result<Tensor> {
    let mut g = Graph::new();
    let q = g.constant(queries.clone());
    let c = g.constant(cls.clone());
    let out = selection_logits_var(&mut g, q, c, scaled)?;
    Ok(g.value(out).clone())
}

pub fn selection_logits_var(g: &mut Graph, queries: Var, cls: Var, scaled: bool) -> Result<Var> {
    let dq = g.value(queries).expect_matrix("selection_logits")?.1;
    let dc = g.value(cls).expect_matrix("selection_logits")?.1;
    if dq != dc {
        return Err(Error::dim("selection_logits", format!("query width {dq} vs cls width {dc}")));
    }
    let ct = g.transpose(cls)?;
    let logits = g.matmul(queries, ct)?;
    Ok(if scaled {
        g.scale(logits, 1.0 / (dq as f64).sqrt())
    } else {
        logits
    })
}

/// Runs the query network on frozen parameters.
pub fn generate_queries(
    bank: &QueryBank,
    text: &TextContext,
    cls: &Tensor,
    net: &AttentionStack,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let params = SelectorParams {
        bank: bank.clone(),
        net: net.clone(),
    };
    let bound = bind_frozen(&mut g, &params);
    let t = g.constant(text.tokens().clone());
    let c = g.constant(cls.clone());
    let q = bound.queries(&mut g, t, c)?;
    Ok(g.value(q).clone())
}

/// `S · V` over flattened `[CLS; body]` frames; returns `L* x (M+1) x d`.
pub fn select_frames(selection: &SelectionMatrix, video: &VideoTokens) -> Result<Tensor> {
    if selection.frames() != video.frames() {
        return Err(Error::dim(
            "select_frames",
            format!(
                "selection has {} columns for {} frames",
                selection.frames(),
                video.frames()
            ),
        ));
    }
    let out = selection.weights.matmul(&video.flat_frames())?;
    out.reshape(&[
        selection.perspectives(),
        video.tokens_per_frame() + 1,
        video.dim(),
    ])
}

/// Sinusoidal temporal encodings, `frames x d`.
pub fn sinusoidal_positions(frames: usize, d: usize) -> Tensor {
    let mut t = Tensor::zeros(&[frames, d]);
    for pos in 0..frames {
        for i in 0..d {
            let rate = 10_000f64.powf(-((i / 2 * 2) as f64) / d as f64);
            let angle = pos as f64 * rate;
            t.data_mut()[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    t
}

/// Max entry of `softmax(z / tau)` per row; used to audit sharpening.
pub fn row_peaks(z: &Tensor, tau: f64) -> Result<Vec<f64>> {
    let s = tensor::softmax_rows(&z.scale(1.0 / tau))?;
    Ok((0..s.rows())
        .map(|r| s.row(r).iter().copied().fold(0.0, f64::max))
        .collect())
}
