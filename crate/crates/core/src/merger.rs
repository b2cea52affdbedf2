//! Temporal deduplication of selected frames and spatial bipartite merging
//! under a token budget.
//!
//! Grouping and matching decisions are computed from forward values and
//! then applied as constant averaging matrices, so gradients flow through
//! the means but never through the discrete choices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{cosine_matrix, Tensor, COSINE_EPS};

/// Ordered partition of selection rows into duplicate groups. Each group is
/// ascending and groups are ordered by their smallest member.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeGroups {
    groups: Vec<Vec<usize>>,
}

impl MergeGroups {
    /// Validates that `groups` partitions `0..n` and normalizes the order.
    pub fn new(mut groups: Vec<Vec<usize>>, n: usize) -> Result<Self> {
        let mut seen = vec![false; n];
        for g in &mut groups {
            if g.is_empty() {
                return Err(Error::Config("empty duplicate group".into()));
            }
            g.sort_unstable();
            for &i in g.iter() {
                if i >= n || seen[i] {
                    return Err(Error::Config(format!("groups do not partition 0..{n}")));
                }
                seen[i] = true;
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Config(format!("groups do not cover 0..{n}")));
        }
        groups.sort_by_key(|g| g[0]);
        Ok(Self { groups })
    }

    pub fn singletons(n: usize) -> Self {
        Self {
            groups: (0..n).map(|i| vec![i]).collect(),
        }
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn members(&self) -> usize {
        self.groups.iter().map(Vec::len).sum()
    }

    /// `G x n` matrix whose row `g` averages the members of group `g`.
    pub fn averaging_matrix(&self) -> Tensor {
        let n = self.members();
        let mut t = Tensor::zeros(&[self.len(), n]);
        for (r, g) in self.groups.iter().enumerate() {
            let w = 1.0 / g.len() as f64;
            for &i in g {
                t.data_mut()[r * n + i] = w;
            }
        }
        t
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetConfig {
    pub theta: usize,
    pub gamma: f64,
}

impl BudgetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.theta == 0 {
            return Err(Error::Config("token budget must be at least 1".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!(
                "duplicate threshold must lie in (0, 1], got {}",
                self.gamma
            )));
        }
        Ok(())
    }
}

/// Greedy duplicate grouping: repeatedly take the smallest unassigned row
/// and claim every unassigned row whose cosine similarity to it is `>= gamma`.
pub fn find_duplicate_groups(rows: &Tensor, gamma: f64) -> Result<MergeGroups> {
    let n = rows.expect_matrix("find_duplicate_groups")?.0;
    let sim = cosine_matrix(rows, rows, COSINE_EPS)?;
    let mut assigned = vec![false; n];
    let mut groups = Vec::new();
    for alpha in 0..n {
        if assigned[alpha] {
            continue;
        }
        assigned[alpha] = true;
        let mut group = vec![alpha];
        for beta in alpha + 1..n {
            if !assigned[beta] && sim.get(alpha, beta) >= gamma {
                assigned[beta] = true;
                group.push(beta);
            }
        }
        groups.push(group);
    }
    Ok(MergeGroups { groups })
}

/// Partition bookkeeping emitted with every temporal merge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeTrace {
    pub groups: Vec<Vec<usize>>,
    /// Merged frames keep the position of their smallest member.
    pub order: String,
}

impl MergeTrace {
    pub fn new(groups: &MergeGroups) -> Self {
        Self {
            groups: groups.groups().to_vec(),
            order: "representative".into(),
        }
    }
}

/// Averages each group of frames. `frames` is `L* x ...` with any trailing shape.
pub fn temporal_merge(frames: &Tensor, groups: &MergeGroups) -> Result<(Tensor, MergeTrace)> {
    let n = frames.shape().first().copied().unwrap_or(0);
    if groups.members() != n {
        return Err(Error::dim(
            "temporal_merge",
            format!("groups cover {} frames, input has {n}", groups.members()),
        ));
    }
    let width = frames.len() / n.max(1);
    let rows: Vec<&[f64]> = frames.data().chunks(width.max(1)).collect();
    let mut data = Vec::with_capacity(groups.len() * width);
    for g in &groups.groups {
        data.extend(anchored_mean(&g.iter().map(|&i| rows[i]).collect::<Vec<_>>()));
    }
    let merged = Tensor::new(vec![groups.len(), width], data)?;
    let mut shape = frames.shape().to_vec();
    shape[0] = groups.len();
    Ok((merged.reshape(&shape)?, MergeTrace::new(groups)))
}

/// Graph form over flattened frames (`L* x F`).
pub fn temporal_merge_var(g: &mut Graph, flat: Var, groups: &MergeGroups) -> Result<Var> {
    let avg = g.constant(groups.averaging_matrix());
    g.matmul(avg, flat)
}

/// One halving step's matching, in original token indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HalvePlan {
    pub input: usize,
    /// A-side tokens that were not merged, ascending.
    pub kept: Vec<usize>,
    /// Every B-side token with the A-side tokens merged into it.
    pub targets: Vec<(usize, Vec<usize>)>,
}

impl HalvePlan {
    pub fn identity(k: usize) -> Self {
        Self {
            input: k,
            kept: (0..k).collect(),
            targets: Vec::new(),
        }
    }

    pub fn output_len(&self) -> usize {
        self.kept.len() + self.targets.len()
    }

    /// `(K - r) x K` averaging matrix realizing the plan.
    pub fn matrix(&self) -> Tensor {
        let k = self.input;
        let mut t = Tensor::zeros(&[self.output_len(), k]);
        let data = t.data_mut();
        for (r, &a) in self.kept.iter().enumerate() {
            data[r * k + a] = 1.0;
        }
        let base = self.kept.len();
        for (i, (b, sources)) in self.targets.iter().enumerate() {
            let w = 1.0 / (1 + sources.len()) as f64;
            let r = base + i;
            data[r * k + b] = w;
            for &a in sources {
                data[r * k + a] = w;
            }
        }
        t
    }

    pub fn apply(&self, tokens: &Tensor) -> Result<Tensor> {
        if tokens.rows() != self.input {
            return Err(Error::dim(
                "bipartite_halve",
                format!("plan for {} tokens applied to {}", self.input, tokens.rows()),
            ));
        }
        if self.targets.is_empty() {
            return Ok(tokens.clone());
        }
        let mut data = Vec::with_capacity(self.output_len() * tokens.cols());
        for &a in &self.kept {
            data.extend_from_slice(tokens.row(a));
        }
        for (b, sources) in &self.targets {
            let members: Vec<&[f64]> = std::iter::once(*b)
                .chain(sources.iter().copied())
                .map(|i| tokens.row(i))
                .collect();
            data.extend(anchored_mean(&members));
        }
        Tensor::matrix(self.output_len(), tokens.cols(), data)
    }
}

/// Arithmetic mean computed as `first + sum(x - first) / n`, which returns
/// equal inputs unchanged.
fn anchored_mean(rows: &[&[f64]]) -> Vec<f64> {
    let n = rows.len() as f64;
    let first = rows[0];
    (0..first.len())
        .map(|c| first[c] + rows[1..].iter().map(|r| r[c] - first[c]).sum::<f64>() / n)
        .collect()
}

/// Matching for one halving of `tokens` (`K x d`).
///
/// A = even indices (1st, 3rd, ...), B = odd indices. Each A token proposes
/// its most similar B token (ties to the lower B index); the `floor(K/2)`
/// strongest proposals (ties to the lower A index) are merged.
pub fn plan_halve(tokens: &Tensor) -> Result<HalvePlan> {
    let k = tokens.expect_matrix("bipartite_halve")?.0;
    if k < 2 {
        return Ok(HalvePlan::identity(k));
    }
    let a_idx: Vec<usize> = (0..k).step_by(2).collect();
    let b_idx: Vec<usize> = (1..k).step_by(2).collect();
    let a = gather_rows(tokens, &a_idx);
    let b = gather_rows(tokens, &b_idx);
    let sim = cosine_matrix(&a, &b, COSINE_EPS)?;

    let mut edges: Vec<(usize, usize, f64)> = (0..a_idx.len())
        .map(|i| {
            let mut best = 0;
            for j in 1..b_idx.len() {
                if sim.get(i, j) > sim.get(i, best) {
                    best = j;
                }
            }
            (i, best, sim.get(i, best))
        })
        .collect();
    edges.sort_by(|x, y| y.2.total_cmp(&x.2).then(x.0.cmp(&y.0)));
    let r = k / 2;

    let mut merged = vec![false; a_idx.len()];
    let mut sources: Vec<Vec<usize>> = vec![Vec::new(); b_idx.len()];
    for &(i, j, _) in &edges[..r] {
        merged[i] = true;
        sources[j].push(a_idx[i]);
    }
    for s in &mut sources {
        s.sort_unstable();
    }
    Ok(HalvePlan {
        input: k,
        kept: a_idx
            .iter()
            .zip(&merged)
            .filter(|(_, &m)| !m)
            .map(|(&a, _)| a)
            .collect(),
        targets: b_idx.iter().copied().zip(sources).collect(),
    })
}

fn gather_rows(t: &Tensor, idx: &[usize]) -> Tensor {
    let d = t.cols();
    let mut data = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        data.extend_from_slice(t.row(i));
    }
    Tensor::matrix(idx.len(), d, data).expect("sized by construction")
}

/// Halves a token set by bipartite merging; fewer than two tokens pass through.
pub fn bipartite_halve(tokens: &Tensor) -> Result<Tensor> {
    plan_halve(tokens)?.apply(tokens)
}

/// Halving plans per round, per frame (`None` where a frame was left alone).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BudgetPlan {
    pub rounds: Vec<Vec<Option<HalvePlan>>>,
}

impl BudgetPlan {
    pub fn round_count(&self) -> usize {
        self.rounds.len()
    }
}

fn check_feasible(frames: usize, theta: usize) -> Result<()> {
    if frames > theta {
        return Err(Error::BudgetInfeasible { frames, theta });
    }
    Ok(())
}

/// Halves every frame holding at least two tokens, round after round, until
/// the total is within `theta` or every frame is down to one token.
pub fn enforce_budget(per_frame: &[Tensor], theta: usize) -> Result<(Vec<Tensor>, usize)> {
    check_feasible(per_frame.len(), theta)?;
    let mut frames = per_frame.to_vec();
    let mut rounds = 0;
    while frames.iter().map(Tensor::rows).sum::<usize>() > theta
        && frames.iter().any(|f| f.rows() >= 2)
    {
        for f in frames.iter_mut() {
            if f.rows() >= 2 {
                *f = bipartite_halve(f)?;
            }
        }
        rounds += 1;
    }
    Ok((frames, rounds))
}

/// Graph form of [`enforce_budget`]. With `frozen` the recorded plans are
/// replayed instead of recomputed.
pub fn enforce_budget_var(
    g: &mut Graph,
    per_frame: &[Var],
    theta: usize,
    frozen: Option<&BudgetPlan>,
) -> Result<(Vec<Var>, BudgetPlan)> {
    check_feasible(per_frame.len(), theta)?;
    let mut frames = per_frame.to_vec();
    let mut plan = BudgetPlan::default();
    let total = |g: &Graph, fs: &[Var]| fs.iter().map(|f| g.value(*f).rows()).sum::<usize>();
    loop {
        let more = match frozen {
            Some(p) => plan.rounds.len() < p.rounds.len(),
            None => {
                total(g, &frames) > theta && frames.iter().any(|f| g.value(*f).rows() >= 2)
            }
        };
        if !more {
            break;
        }
        let round_idx = plan.rounds.len();
        let mut round = Vec::with_capacity(frames.len());
        for (fi, f) in frames.iter_mut().enumerate() {
            let step = match frozen {
                Some(p) => p.rounds[round_idx].get(fi).cloned().flatten(),
                None if g.value(*f).rows() >= 2 => Some(plan_halve(g.value(*f))?),
                None => None,
            };
            if let Some(hp) = &step {
                if hp.input != g.value(*f).rows() {
                    return Err(Error::dim(
                        "enforce_budget",
                        format!("frozen plan expects {} tokens, frame has {}", hp.input, g.value(*f).rows()),
                    ));
                }
                let m = g.constant(hp.matrix());
                *f = g.matmul(m, *f)?;
            }
            round.push(step);
        }
        plan.rounds.push(round);
    }
    Ok((frames, plan))
}
