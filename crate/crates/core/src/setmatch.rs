//! Whole-video to whole-manual alignment.
//!
//! Rows are video segments in temporal order and columns are diagrams in
//! manual order. Optimal transport spreads a joint distribution over the
//! similarity matrix under uniform marginals; DTW finds the best monotone
//! path through it.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::logsumexp;

pub const DEFAULT_EPSILON: f64 = 4.0;
pub const DEFAULT_ALPHA: f64 = 7.0;

/// Cosine similarities between every segment (row) and diagram (column).
pub fn similarity_matrix(videos: ArrayView2<'_, f64>, diagrams: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if videos.ncols() != diagrams.ncols() {
        return Err(Error::InvalidArgument(format!(
            "feature widths differ: {} vs {}",
            videos.ncols(),
            diagrams.ncols()
        )));
    }
    if videos.nrows() == 0 || diagrams.nrows() == 0 {
        return Err(Error::InvalidArgument("similarity matrix needs N, M >= 1".into()));
    }
    let normalize = |m: ArrayView2<'_, f64>| -> Result<Array2<f64>> {
        let mut out = m.to_owned();
        for mut row in out.rows_mut() {
            let n = row.dot(&row).sqrt();
            if !(n > 0.0) {
                return Err(Error::InvalidArgument("zero feature vector".into()));
            }
            row /= n;
        }
        Ok(out)
    };
    let v = normalize(videos)?;
    let d = normalize(diagrams)?;
    Ok(v.dot(&d.t()).mapv(|s| s.clamp(-1.0, 1.0)))
}

fn signed_pow(x: f64, alpha: f64) -> f64 {
    x.signum() * x.abs().powf(alpha)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    pub c: Array2<f64>,
    /// The similarity matrix was constant; every entry is 0.5.
    pub degenerate: bool,
}

/// `(s^a - min^a) / (max^a - min^a)` with a sign-preserving power, so the
/// result lies in `[0, 1]` and is monotone in `s`.
pub fn cost_matrix(s: &Array2<f64>, alpha: f64) -> Result<CostMatrix> {
    if !(alpha >= 1.0) {
        return Err(Error::InvalidArgument(format!("alpha must be >= 1, got {alpha}")));
    }
    let powered = s.mapv(|x| signed_pow(x, alpha));
    let hi = powered.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = powered.iter().copied().fold(f64::INFINITY, f64::min);
    if !(hi > lo) {
        return Ok(CostMatrix {
            c: Array2::from_elem(s.raw_dim(), 0.5),
            degenerate: true,
        });
    }
    Ok(CostMatrix {
        c: powered.mapv(|p| (p - lo) / (hi - lo)),
        degenerate: false,
    })
}

/// Which way the entropic objective treats the cost matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OtObjective {
    /// Maximize `sum T C + eps H(T)`: mass goes to high-similarity pairs.
    #[default]
    Maximize,
    /// Minimize `sum T C - eps H(T)` as literally written with C increasing
    /// in similarity. Kept for comparison.
    Minimize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinkhornOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub objective: OtObjective,
}

impl Default for SinkhornOptions {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_iter: 10_000,
            objective: OtObjective::Maximize,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub t: Array2<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// L-infinity violation of the row and column marginals.
    pub max_violation: f64,
}

impl TransportPlan {
    pub fn entropy(&self) -> f64 {
        -self.t.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
    }
}

fn marginal_violation(t: &Array2<f64>) -> f64 {
    let (n, m) = t.dim();
    let row = t
        .rows()
        .into_iter()
        .map(|r| (r.sum() - 1.0 / n as f64).abs())
        .fold(0.0, f64::max);
    let col = t
        .columns()
        .into_iter()
        .map(|c| (c.sum() - 1.0 / m as f64).abs())
        .fold(0.0, f64::max);
    row.max(col)
}

/// Sweeps over which the contraction rate is measured.
const RATE_WINDOW: usize = 10;
/// Sweeps without a new best iterate before over-relaxation is abandoned.
const STALL_LIMIT: usize = 2000;

const MAX_RELAXATION: f64 = 1.99;

/// Relaxation factor that is optimal for a linear Gauss-Seidel iteration
/// contracting at `rate` per sweep.
fn relaxation_for(rate: f64) -> f64 {
    (2.0 / (1.0 + (1.0 - rate).sqrt())).min(MAX_RELAXATION)
}

/// Entropy-regularized transport with row marginals `1/N` and column
/// marginals `1/M`, solved by log-domain Sinkhorn-Knopp scaling. If the
/// marginal tolerance is not met within `max_iter` sweeps, the iterate
/// with the smallest violation is returned with `converged = false`.
///
/// Plain sweeps contract slowly when the kernel is badly conditioned
/// (small epsilon). Once the observed contraction rate is slow, the dual
/// updates are over-relaxed with the factor that is optimal for that rate;
/// the fixed point is unchanged. If relaxation stops producing better
/// iterates the solver restarts from the best duals with a smaller factor.
pub fn sinkhorn(c: &Array2<f64>, epsilon: f64, opts: &SinkhornOptions) -> Result<TransportPlan> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    if c.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument("cost matrix has non-finite entries".into()));
    }
    let (n, m) = c.dim();
    if n == 0 || m == 0 {
        return Err(Error::InvalidArgument("empty cost matrix".into()));
    }
    let sign = match opts.objective {
        OtObjective::Maximize => 1.0,
        OtObjective::Minimize => -1.0,
    };
    let log_k = c.mapv(|x| sign * x / epsilon);
    let log_a = -(n as f64).ln();
    let log_b = -(m as f64).ln();
    let mut f = Array1::<f64>::zeros(n);
    let mut g = Array1::<f64>::zeros(m);
    let mut buf = vec![0.0; n.max(m)];

    let plan_of =
        |f: &Array1<f64>, g: &Array1<f64>| Array2::from_shape_fn((n, m), |(i, j)| (log_k[[i, j]] + f[i] + g[j]).exp());

    struct Best {
        violation: f64,
        t: Array2<f64>,
        iter: usize,
        f: Array1<f64>,
        g: Array1<f64>,
    }
    let mut best: Option<Best> = None;
    let mut omega = 1.0;
    // Highest factor still allowed; lowered each time relaxation stalls.
    let mut ceiling = MAX_RELAXATION;
    let mut may_relax = true;
    let mut since_best = 0;
    let mut history: Vec<f64> = Vec::new();
    for iter in 1..=opts.max_iter {
        for i in 0..n {
            for j in 0..m {
                buf[j] = log_k[[i, j]] + g[j];
            }
            let target = log_a - logsumexp(&buf[..m]);
            f[i] = (1.0 - omega) * f[i] + omega * target;
        }
        for j in 0..m {
            for i in 0..n {
                buf[i] = log_k[[i, j]] + f[i];
            }
            let target = log_b - logsumexp(&buf[..n]);
            g[j] = (1.0 - omega) * g[j] + omega * target;
        }
        let t = plan_of(&f, &g);
        let violation = marginal_violation(&t);
        if violation <= opts.tol {
            return Ok(TransportPlan {
                t,
                iterations: iter,
                converged: true,
                max_violation: violation,
            });
        }
        if violation.is_finite() && best.as_ref().is_none_or(|b| violation < b.violation) {
            best = Some(Best {
                violation,
                t,
                iter,
                f: f.clone(),
                g: g.clone(),
            });
            since_best = 0;
        } else {
            since_best += 1;
        }

        if omega > 1.0 && (!violation.is_finite() || since_best > STALL_LIMIT) {
            let b = best.as_ref().expect("a finite iterate precedes relaxation");
            f.assign(&b.f);
            g.assign(&b.g);
            ceiling = 1.0 + 0.5 * (omega - 1.0);
            may_relax = ceiling > 1.01;
            omega = if may_relax { ceiling } else { 1.0 };
            since_best = 0;
            history.clear();
            log::debug!(
                "sinkhorn: relaxation stalled at sweep {iter}; restarting from the best iterate with {omega:.4}"
            );
            continue;
        }
        if !may_relax {
            continue;
        }
        history.push(violation);
        let k = history.len();
        if k > 2 * RATE_WINDOW && k.is_multiple_of(RATE_WINDOW) {
            let observed = (history[k - 1] / history[k - 1 - RATE_WINDOW]).powf(1.0 / RATE_WINDOW as f64);
            // Plain rate implied by the rate observed under the current
            // factor; exact for omega = 1.
            let plain = (observed + omega - 1.0).powi(2) / (observed * omega * omega);
            if observed.is_finite() && observed < 1.0 && plain > 0.5 && plain < 1.0 {
                let next = relaxation_for(plain).min(ceiling);
                if next > omega + 1e-3 {
                    log::debug!("sinkhorn: observed rate {observed:.6} at omega {omega:.4}; relaxing with {next:.4}");
                    omega = next;
                    history.clear();
                }
            }
        }
    }
    let b = best.expect("max_iter >= 1");
    log::warn!(
        "sinkhorn did not reach tolerance {} (violation {:e})",
        opts.tol,
        b.violation
    );
    Ok(TransportPlan {
        t: b.t,
        iterations: b.iter,
        converged: false,
        max_violation: b.violation,
    })
}

/// A monotone path through an `N x M` grid, 0-based `(row, column)` pairs
/// from `(0, 0)` to `(N-1, M-1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentPath {
    pub pairs: Vec<(usize, usize)>,
    pub score: f64,
}

/// Dynamic time warping that maximizes the summed similarity over monotone
/// paths with steps `(+1,+1)`, `(+1,0)` and `(0,+1)`. Among equal-scoring
/// paths, backtracking prefers the diagonal step, then `(+1,0)`.
pub fn dtw_align(s: &Array2<f64>) -> Result<AlignmentPath> {
    let (n, m) = s.dim();
    if n == 0 || m == 0 {
        return Err(Error::InvalidArgument("DTW needs N, M >= 1".into()));
    }
    let mut acc = Array2::from_elem((n, m), f64::NEG_INFINITY);
    for i in 0..n {
        for j in 0..m {
            let prev = if i == 0 && j == 0 {
                0.0
            } else {
                predecessors(i, j).map(|p| acc[p]).fold(f64::NEG_INFINITY, f64::max)
            };
            acc[[i, j]] = s[[i, j]] + prev;
        }
    }
    let mut pairs = vec![(n - 1, m - 1)];
    let (mut i, mut j) = (n - 1, m - 1);
    while (i, j) != (0, 0) {
        let mut choice: Option<[usize; 2]> = None;
        for p in predecessors(i, j) {
            // Candidates arrive in priority order; only a strictly better
            // score displaces an earlier one.
            if choice.is_none_or(|q| acc[p] > acc[q]) {
                choice = Some(p);
            }
        }
        [i, j] = choice.expect("interior cell has a predecessor");
        pairs.push((i, j));
    }
    pairs.reverse();
    Ok(AlignmentPath {
        pairs,
        score: acc[[n - 1, m - 1]],
    })
}

/// Predecessors of `(i, j)` in tie-break priority order.
fn predecessors(i: usize, j: usize) -> impl Iterator<Item = [usize; 2]> {
    let diag = (i > 0 && j > 0).then(|| [i - 1, j - 1]);
    let down = (i > 0).then(|| [i - 1, j]);
    let right = (j > 0).then(|| [i, j - 1]);
    [diag, down, right].into_iter().flatten()
}

/// 1-based predicted column per row: the row argmax of a plan, smaller
/// index on ties.
pub fn plan_assignment(t: &Array2<f64>) -> Vec<usize> {
    t.rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best + 1
        })
        .collect()
}

/// 1-based predicted column per row: the last column the path pairs with
/// that row.
pub fn path_assignment(path: &AlignmentPath, rows: usize) -> Vec<usize> {
    let mut out = vec![0; rows];
    for &(i, j) in &path.pairs {
        out[i] = out[i].max(j + 1);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlignMethod {
    /// Independent per-segment argmax of similarity.
    Raw,
    Ot,
    Dtw,
}

impl AlignMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            AlignMethod::Raw => "raw",
            AlignMethod::Ot => "ot",
            AlignMethod::Dtw => "dtw",
        }
    }
}

impl fmt::Display for AlignMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AlignMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "raw" => Ok(AlignMethod::Raw),
            "ot" => Ok(AlignMethod::Ot),
            "dtw" => Ok(AlignMethod::Dtw),
            other => Err(Error::InvalidArgument(format!(
                "unknown method `{other}` (expected raw, ot or dtw)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignConfig {
    pub method: AlignMethod,
    pub epsilon: f64,
    pub alpha: f64,
    pub sinkhorn: SinkhornOptions,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            method: AlignMethod::Raw,
            epsilon: DEFAULT_EPSILON,
            alpha: DEFAULT_ALPHA,
            sinkhorn: SinkhornOptions::default(),
        }
    }
}

/// Gap that ranks every on-path pair above every off-path pair in DTW
/// scores; similarities span at most 2.
const DTW_OFF_PATH_PENALTY: f64 = 2.0;

#[derive(Debug, Clone, PartialEq)]
pub struct AlignOutput {
    /// 1-based predicted diagram per segment.
    pub assignment: Vec<usize>,
    /// Post-processed segment x diagram scores used for ranking: the
    /// similarities (raw), `N * T` (OT, the per-row conditional), or the
    /// similarities lowered by 2 off the DTW path.
    pub scores: Array2<f64>,
    pub plan: Option<TransportPlan>,
    pub path: Option<AlignmentPath>,
    pub degenerate_cost: bool,
}

impl AlignOutput {
    /// Whether the solver finished cleanly.
    pub fn converged(&self) -> bool {
        self.plan.as_ref().is_none_or(|p| p.converged)
    }
}

/// Aligns one video to one manual from their similarity matrix.
pub fn align(s: &Array2<f64>, cfg: &AlignConfig) -> Result<AlignOutput> {
    let (n, _) = s.dim();
    match cfg.method {
        AlignMethod::Raw => Ok(AlignOutput {
            assignment: plan_assignment(s),
            scores: s.clone(),
            plan: None,
            path: None,
            degenerate_cost: false,
        }),
        AlignMethod::Ot => {
            let cost = cost_matrix(s, cfg.alpha)?;
            let plan = sinkhorn(&cost.c, cfg.epsilon, &cfg.sinkhorn)?;
            Ok(AlignOutput {
                assignment: plan_assignment(&plan.t),
                scores: &plan.t * n as f64,
                plan: Some(plan),
                path: None,
                degenerate_cost: cost.degenerate,
            })
        }
        AlignMethod::Dtw => {
            let path = dtw_align(s)?;
            let mut scores = s.mapv(|x| x - DTW_OFF_PATH_PENALTY);
            for &(i, j) in &path.pairs {
                scores[[i, j]] = s[[i, j]];
            }
            Ok(AlignOutput {
                assignment: path_assignment(&path, n),
                scores,
                plan: None,
                path: Some(path),
                degenerate_cost: false,
            })
        }
    }
}
