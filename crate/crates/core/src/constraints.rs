//! Domain-knowledge constraint set evaluated on measured frequency windows
//! and estimated grid parameters.
//!
//! Estimated parameters use a fixed layout per sample:
//! `[p_0..p_n, P_k for each pair k, phi_k for each pair k]` where
//! `p_i = P_mi - |E_i|^2 G_ii` and pairs run `(0,1), (0,2), .., (n-2,n-1)`.
//! For three machines that is 9 entries.

use crate::gridsim::GridModel;
use crate::numkit::Matrix;
use serde::de::{self, Deserializer};
use serde::ser::{SerializeSeq, Serializer};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConstraintError {
    #[error("window of {0} points is too short; need at least 3")]
    WindowTooShort(usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("malformed combinator tree: {0}")]
    Tree(String),
    #[error("invalid constraint spec: {0}")]
    Spec(String),
}

pub type Result<T> = std::result::Result<T, ConstraintError>;

/// Machine pairs `(i, j)` with `i < j`, in layout order.
pub fn pairs(n_gen: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..n_gen {
        for j in i + 1..n_gen {
            out.push((i, j));
        }
    }
    out
}

pub fn z_dim(n_gen: usize) -> usize {
    n_gen + 2 * pairs(n_gen).len()
}

/// Maps a model's true parameters into the estimate layout.
pub fn z_from_model(model: &GridModel) -> Vec<f64> {
    let c = model.coupling();
    let pr = pairs(model.n_gen());
    let mut z = c.effective_power.clone();
    z.extend(pr.iter().map(|&(i, j)| c.magnitude.get(i, j)));
    z.extend(pr.iter().map(|&(i, j)| c.phase.get(i, j)));
    z
}

/// Parameters that are known rather than estimated.
#[derive(Debug, Clone, PartialEq)]
pub struct KnownParams {
    pub m: Vec<f64>,
    pub d: Vec<f64>,
    /// Spacing of window points (s), used when building windows.
    pub dt: f64,
    /// Window index from which frequency synchronization is enforced.
    pub settle_index: usize,
    /// Pre-outage parameters in estimate layout; estimates are offsets from it.
    pub z_reference: Vec<f64>,
}

impl KnownParams {
    pub fn n_gen(&self) -> usize {
        self.m.len()
    }
}

/// Frequency and angle samples of one post-event window, `W x n_gen`.
///
/// Construction also caches everything the swing residual needs that does
/// not depend on the parameter estimate: central-difference `w'` and the
/// sine/cosine of every pairwise angle difference at interior points.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceWindow {
    omega: Matrix,
    theta: Matrix,
    dt: f64,
    /// `(W-2) x n_gen`
    omega_dot: Matrix,
    /// `(W-2) x pairs`, of `th_i - th_j`
    sin_diff: Matrix,
    cos_diff: Matrix,
    phase_spread: f64,
}

impl TraceWindow {
    /// Rebuilds angles from frequencies by trapezoidal integration starting
    /// at `theta0`. `row` is channel-major (`window` points per generator);
    /// `dt` is the spacing of window points.
    pub fn from_feature_row(row: &[f64], theta0: &[f64], dt: f64) -> Result<Self> {
        let n = theta0.len();
        if n == 0 || row.len() % n != 0 {
            return Err(ConstraintError::Shape(format!(
                "row of {} values does not split into {n} channels",
                row.len()
            )));
        }
        if !(dt > 0.0) {
            return Err(ConstraintError::Shape(format!("window spacing {dt} must be positive")));
        }
        let w = row.len() / n;
        let mut omega = Matrix::zeros(w, n);
        let mut theta = Matrix::zeros(w, n);
        for g in 0..n {
            let ch = &row[g * w..(g + 1) * w];
            let mut th = theta0[g];
            for t in 0..w {
                if t > 0 {
                    th += 0.5 * dt * (ch[t - 1] + ch[t]);
                }
                omega.set(t, g, ch[t]);
                theta.set(t, g, th);
            }
        }
        let pr = pairs(n);
        let interior = w.saturating_sub(2);
        let mut omega_dot = Matrix::zeros(interior, n);
        let mut sin_diff = Matrix::zeros(interior, pr.len());
        let mut cos_diff = Matrix::zeros(interior, pr.len());
        for k in 0..interior {
            let t = k + 1;
            for g in 0..n {
                omega_dot.set(k, g, (omega.get(t + 1, g) - omega.get(t - 1, g)) / (2.0 * dt));
            }
            for (q, &(i, j)) in pr.iter().enumerate() {
                let d = theta.get(t, i) - theta.get(t, j);
                sin_diff.set(k, q, d.sin());
                cos_diff.set(k, q, d.cos());
            }
        }
        let phase_spread = max_spread(&theta, 0);
        Ok(Self {
            omega,
            theta,
            dt,
            omega_dot,
            sin_diff,
            cos_diff,
            phase_spread,
        })
    }

    pub fn omega(&self) -> &Matrix {
        &self.omega
    }

    pub fn theta(&self) -> &Matrix {
        &self.theta
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn len(&self) -> usize {
        self.omega.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.omega.rows() == 0
    }
}

/// Largest `|x_i - x_j|` within any row `from..` of a `time x channel` matrix.
fn max_spread(m: &Matrix, from: usize) -> f64 {
    let mut best: f64 = 0.0;
    for t in from..m.rows() {
        let row = m.row(t);
        let hi = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = row.iter().copied().fold(f64::INFINITY, f64::min);
        best = best.max(hi - lo);
    }
    best
}

fn check_inputs(window: &TraceWindow, z: &[f64], known: &KnownParams) -> Result<()> {
    let n = known.n_gen();
    if window.len() < 3 {
        return Err(ConstraintError::WindowTooShort(window.len()));
    }
    if window.omega.cols() != n || known.d.len() != n {
        return Err(ConstraintError::Shape(format!(
            "window is {:?} for {n} machines",
            window.omega.shape()
        )));
    }
    if z.len() != z_dim(n) {
        return Err(ConstraintError::Shape(format!(
            "estimate has {} entries, layout needs {}",
            z.len(),
            z_dim(n)
        )));
    }
    Ok(())
}

/// Mean over interior time points and machines of the squared swing
/// residual `r_i = M_i w'_i + D_i w_i - p_i + sum_j P_ij sin(th_i - th_j + phi_ij)`,
/// with `w'` by central differences. Optionally accumulates the gradient
/// with respect to `z` (scaled by `scale`) into `grad`.
fn residual_impl(
    window: &TraceWindow,
    z: &[f64],
    known: &KnownParams,
    mut grad: Option<(&mut [f64], f64)>,
) -> Result<f64> {
    check_inputs(window, z, known)?;
    let n = known.n_gen();
    let pr = pairs(n);
    let k = pr.len();
    let interior = window.len() - 2;
    let count = (interior * n) as f64;
    let (cos_phi, sin_phi): (Vec<f64>, Vec<f64>) = (0..k).map(|q| (z[n + k + q].cos(), z[n + k + q].sin())).unzip();
    let mut total = 0.0;
    let mut r = vec![0.0; n];
    // sin and cos of (th_i - th_j + phi) and (th_j - th_i + phi)
    let mut s = vec![0.0; k];
    let mut sb = vec![0.0; k];
    let mut c = vec![0.0; k];
    let mut cb = vec![0.0; k];
    for t in 0..interior {
        let wdot = window.omega_dot.row(t);
        let om = window.omega.row(t + 1);
        let (sd, cd) = (window.sin_diff.row(t), window.cos_diff.row(t));
        for i in 0..n {
            r[i] = known.m[i] * wdot[i] + known.d[i] * om[i] - z[i];
        }
        for (q, &(i, j)) in pr.iter().enumerate() {
            s[q] = sd[q] * cos_phi[q] + cd[q] * sin_phi[q];
            sb[q] = -sd[q] * cos_phi[q] + cd[q] * sin_phi[q];
            r[i] += z[n + q] * s[q];
            r[j] += z[n + q] * sb[q];
        }
        total += r.iter().map(|v| v * v).sum::<f64>();
        if let Some((g, scale)) = grad.as_mut() {
            let f = 2.0 * *scale / count;
            for i in 0..n {
                g[i] -= f * r[i];
            }
            for (q, &(i, j)) in pr.iter().enumerate() {
                c[q] = cd[q] * cos_phi[q] - sd[q] * sin_phi[q];
                cb[q] = cd[q] * cos_phi[q] + sd[q] * sin_phi[q];
                g[n + q] += f * (r[i] * s[q] + r[j] * sb[q]);
                g[n + k + q] += f * z[n + q] * (r[i] * c[q] + r[j] * cb[q]);
            }
        }
    }
    Ok(total / count)
}

pub fn swing_residual(window: &TraceWindow, z: &[f64], known: &KnownParams) -> Result<f64> {
    residual_impl(window, z, known, None)
}

/// Residual and its gradient with respect to `z`.
pub fn swing_residual_grad(window: &TraceWindow, z: &[f64], known: &KnownParams) -> Result<(f64, Vec<f64>)> {
    let mut g = vec![0.0; z.len()];
    let v = residual_impl(window, z, known, Some((&mut g, 1.0)))?;
    Ok((v, g))
}

/// `max_{i,j,t >= settle} |w_i - w_j|`
pub fn freq_sync(window: &TraceWindow, settle_index: usize) -> f64 {
    max_spread(&window.omega, settle_index)
}

/// `max_{i,j,t} |th_i - th_j|`
pub fn phase_cohesive(window: &TraceWindow) -> f64 {
    window.phase_spread
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TermKind {
    SwingResidual,
    FreqSync,
    PhaseCohesive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintTerm {
    pub kind: TermKind,
    /// Bound `c_i`. `None` means "take the value calibrated on the dataset".
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bound: Option<f64>,
}

/// AND/OR tree over term indices. Serialized as nested lists, e.g.
/// `["and", 0, ["or", 1, 2]]`; a bare integer is a leaf.
#[derive(Debug, Clone, PartialEq)]
pub enum Combinator {
    Term(usize),
    And(Vec<Combinator>),
    Or(Vec<Combinator>),
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawNode {
    Index(usize),
    Op(String),
    List(Vec<RawNode>),
}

impl RawNode {
    fn into_tree(self) -> std::result::Result<Combinator, String> {
        match self {
            RawNode::Index(i) => Ok(Combinator::Term(i)),
            RawNode::Op(op) => Err(format!("operator \"{op}\" outside a list")),
            RawNode::List(items) => {
                let mut it = items.into_iter();
                let op = match it.next() {
                    Some(RawNode::Op(op)) => op,
                    _ => return Err("list must start with \"and\" or \"or\"".into()),
                };
                let children = it.map(RawNode::into_tree).collect::<std::result::Result<Vec<_>, _>>()?;
                if children.is_empty() {
                    return Err(format!("\"{op}\" node without children"));
                }
                match op.to_ascii_lowercase().as_str() {
                    "and" => Ok(Combinator::And(children)),
                    "or" => Ok(Combinator::Or(children)),
                    other => Err(format!("unknown operator \"{other}\"")),
                }
            }
        }
    }
}

impl<'de> Deserialize<'de> for Combinator {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        RawNode::deserialize(d)?.into_tree().map_err(de::Error::custom)
    }
}

impl Serialize for Combinator {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Combinator::Term(i) => s.serialize_u64(*i as u64),
            Combinator::And(c) | Combinator::Or(c) => {
                let mut seq = s.serialize_seq(Some(c.len() + 1))?;
                seq.serialize_element(if matches!(self, Combinator::And(_)) { "and" } else { "or" })?;
                for child in c {
                    seq.serialize_element(child)?;
                }
                seq.end()
            }
        }
    }
}

impl Combinator {
    fn check(&self, n_terms: usize) -> Result<()> {
        match self {
            Combinator::Term(i) if *i >= n_terms => Err(ConstraintError::Tree(format!(
                "term index {i} but only {n_terms} terms"
            ))),
            Combinator::Term(_) => Ok(()),
            Combinator::And(c) | Combinator::Or(c) => {
                if c.is_empty() {
                    return Err(ConstraintError::Tree("empty node".into()));
                }
                c.iter().try_for_each(|n| n.check(n_terms))
            }
        }
    }

    /// Value and gradient with respect to the hinge values.
    fn eval(&self, hinges: &[f64]) -> (f64, Vec<f64>) {
        match self {
            Combinator::Term(i) => {
                let mut g = vec![0.0; hinges.len()];
                g[*i] = 1.0;
                (hinges[*i], g)
            }
            Combinator::And(c) => {
                let mut total = 0.0;
                let mut g = vec![0.0; hinges.len()];
                for child in c {
                    let (v, cg) = child.eval(hinges);
                    total += v;
                    for (a, b) in g.iter_mut().zip(cg) {
                        *a += b;
                    }
                }
                (total, g)
            }
            Combinator::Or(c) => c
                .iter()
                .map(|child| child.eval(hinges))
                .reduce(|best, cand| if cand.0 < best.0 { cand } else { best })
                .expect("validated non-empty"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    L1,
    L2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintSpec {
    pub terms: Vec<ConstraintTerm>,
    pub tree: Combinator,
    pub gamma: f64,
    pub norm: Norm,
    /// Hinge each sample separately and average, instead of hinging the
    /// batch expectation.
    #[serde(default)]
    pub per_sample: bool,
}

impl Default for ConstraintSpec {
    fn default() -> Self {
        Self {
            terms: vec![
                ConstraintTerm {
                    kind: TermKind::SwingResidual,
                    bound: Some(1e-2),
                },
                ConstraintTerm {
                    kind: TermKind::FreqSync,
                    bound: None,
                },
                ConstraintTerm {
                    kind: TermKind::PhaseCohesive,
                    bound: None,
                },
            ],
            tree: Combinator::And(vec![Combinator::Term(0), Combinator::Term(1), Combinator::Term(2)]),
            gamma: 0.1,
            norm: Norm::L2,
            per_sample: false,
        }
    }
}

impl ConstraintSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(ConstraintError::Spec(format!("gamma {} must be >= 0", self.gamma)));
        }
        for (i, t) in self.terms.iter().enumerate() {
            if let Some(b) = t.bound {
                if !(b >= 0.0) {
                    return Err(ConstraintError::Spec(format!("bound of term {i} is {b}")));
                }
            }
        }
        self.tree.check(self.terms.len())
    }

    /// Fills calibrated bounds left unset.
    pub fn resolved(&self, c_sync: f64, c_phase: f64) -> Self {
        let mut out = self.clone();
        for t in out.terms.iter_mut() {
            if t.bound.is_none() {
                t.bound = match t.kind {
                    TermKind::FreqSync => Some(c_sync),
                    TermKind::PhaseCohesive => Some(c_phase),
                    TermKind::SwingResidual => Some(1e-2),
                };
            }
        }
        out
    }

    fn bounds(&self) -> Result<Vec<f64>> {
        self.terms
            .iter()
            .enumerate()
            .map(|(i, t)| {
                t.bound
                    .ok_or_else(|| ConstraintError::Spec(format!("term {i} has no resolved bound")))
            })
            .collect()
    }

    /// Penalty for term values `g_i` and its gradient `d penalty / d g_i`.
    ///
    /// Hinges `max(0, g_i - c_i)` feed the tree (AND sums, OR takes the
    /// minimum). The root's children form the vector whose norm, times
    /// `gamma`, is the penalty; a non-AND root yields a one-entry vector.
    pub fn penalty_with_grad(&self, values: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.validate()?;
        if values.len() != self.terms.len() {
            return Err(ConstraintError::Shape(format!(
                "{} values for {} terms",
                values.len(),
                self.terms.len()
            )));
        }
        let bounds = self.bounds()?;
        let hinges: Vec<f64> = values.iter().zip(&bounds).map(|(g, c)| (g - c).max(0.0)).collect();
        let active: Vec<f64> = values
            .iter()
            .zip(&bounds)
            .map(|(g, c)| if g > c { 1.0 } else { 0.0 })
            .collect();
        let parts: Vec<(f64, Vec<f64>)> = match &self.tree {
            Combinator::And(children) => children.iter().map(|c| c.eval(&hinges)).collect(),
            other => vec![other.eval(&hinges)],
        };
        let (norm, weights): (f64, Vec<f64>) = match self.norm {
            Norm::L1 => (parts.iter().map(|p| p.0.abs()).sum(), vec![1.0; parts.len()]),
            Norm::L2 => {
                let n = parts.iter().map(|p| p.0 * p.0).sum::<f64>().sqrt();
                let w = parts
                    .iter()
                    .map(|p| if n > 0.0 { p.0 / n } else { 0.0 })
                    .collect();
                (n, w)
            }
        };
        let mut grad = vec![0.0; values.len()];
        for ((_, pg), w) in parts.iter().zip(&weights) {
            for ((g, d), a) in grad.iter_mut().zip(pg).zip(&active) {
                *g += self.gamma * w * d * a;
            }
        }
        Ok((self.gamma * norm, grad))
    }

    pub fn penalty(&self, values: &[f64]) -> Result<f64> {
        Ok(self.penalty_with_grad(values)?.0)
    }

    fn needs(&self, kind: TermKind) -> bool {
        self.terms.iter().any(|t| t.kind == kind)
    }
}

/// Per-sample term values, in spec order.
fn term_values(
    spec: &ConstraintSpec,
    window: &TraceWindow,
    z: &[f64],
    known: &KnownParams,
) -> Result<Vec<f64>> {
    spec.terms
        .iter()
        .map(|t| match t.kind {
            TermKind::SwingResidual => swing_residual(window, z, known),
            TermKind::FreqSync => Ok(freq_sync(window, known.settle_index)),
            TermKind::PhaseCohesive => Ok(phase_cohesive(window)),
        })
        .collect()
}

/// Batch penalty and its gradient with respect to every entry of `z_hat`
/// (`batch x z_dim`).
pub fn penalty_grad(
    spec: &ConstraintSpec,
    z_hat: &Matrix,
    windows: &[&TraceWindow],
    known: &KnownParams,
) -> Result<(f64, Matrix)> {
    if z_hat.rows() != windows.len() {
        return Err(ConstraintError::Shape(format!(
            "{} estimates for {} windows",
            z_hat.rows(),
            windows.len()
        )));
    }
    let b = windows.len();
    let mut grad = Matrix::zeros(b, z_hat.cols());
    if b == 0 {
        return Ok((0.0, grad));
    }
    let per: Vec<Vec<f64>> = windows
        .iter()
        .enumerate()
        .map(|(r, w)| term_values(spec, w, z_hat.row(r), known))
        .collect::<Result<_>>()?;
    let swing_terms: Vec<usize> = spec
        .terms
        .iter()
        .enumerate()
        .filter(|(_, t)| t.kind == TermKind::SwingResidual)
        .map(|(i, _)| i)
        .collect();
    let scale = 1.0 / b as f64;
    let value = if spec.per_sample {
        let mut total = 0.0;
        for (r, vals) in per.iter().enumerate() {
            let (p, dg) = spec.penalty_with_grad(vals)?;
            total += p * scale;
            let w: f64 = swing_terms.iter().map(|&i| dg[i]).sum();
            if w != 0.0 {
                residual_impl(windows[r], z_hat.row(r), known, Some((grad.row_mut(r), w * scale)))?;
            }
        }
        total
    } else {
        let mut mean = vec![0.0; spec.terms.len()];
        for vals in &per {
            for (m, v) in mean.iter_mut().zip(vals) {
                *m += v * scale;
            }
        }
        let (p, dg) = spec.penalty_with_grad(&mean)?;
        let w: f64 = swing_terms.iter().map(|&i| dg[i]).sum();
        if w != 0.0 && spec.needs(TermKind::SwingResidual) {
            for r in 0..b {
                residual_impl(windows[r], z_hat.row(r), known, Some((grad.row_mut(r), w * scale)))?;
            }
        }
        p
    };
    Ok((value, grad))
}

/// Batch-mean value of each term, for reporting.
pub fn batch_term_means(
    spec: &ConstraintSpec,
    z_hat: &Matrix,
    windows: &[&TraceWindow],
    known: &KnownParams,
) -> Result<Vec<f64>> {
    let mut mean = vec![0.0; spec.terms.len()];
    for (r, w) in windows.iter().enumerate() {
        for (m, v) in mean.iter_mut().zip(term_values(spec, w, z_hat.row(r), known)?) {
            *m += v / windows.len() as f64;
        }
    }
    Ok(mean)
}
