//! Matching probabilities, contrastive losses and their gradients.
//!
//! Every loss here is written against similarity values. Each `*_grad`
//! function returns the loss together with its partial derivatives with
//! respect to those similarities and to the loss's own scalar parameters;
//! [`crate::model`] chains them back into the projection heads.

use std::collections::HashMap;
use std::fmt;
use std::hash::Hash;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const INITIAL_TAU: f64 = 0.07;
pub const INITIAL_THETA: f64 = 1.0;

/// The losses that can be combined during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LossKind {
    /// Symmetric infoNCE over paired clips and diagrams (CLIP baseline).
    InfoNce,
    /// Mean of `1 - s_ii` over positive pairs (CosSim baseline).
    CosSim,
    /// Loss A: JS divergence to many-to-one aware targets.
    VideoDiagram,
    /// Loss B: cross entropy against the clip's own manual.
    VideoManual,
    /// Loss C: diagram-to-diagram spread within a manual.
    IntraManual,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [
        LossKind::InfoNce,
        LossKind::CosSim,
        LossKind::VideoDiagram,
        LossKind::VideoManual,
        LossKind::IntraManual,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::InfoNce => "infonce",
            LossKind::CosSim => "cossim",
            LossKind::VideoDiagram => "video_diagram",
            LossKind::VideoManual => "video_manual",
            LossKind::IntraManual => "intra_manual",
        }
    }

    /// Temperature slot used by the loss, if any.
    pub fn temperature(self) -> Option<Temperature> {
        match self {
            LossKind::InfoNce | LossKind::VideoDiagram => Some(Temperature::A),
            LossKind::VideoManual => Some(Temperature::B),
            LossKind::IntraManual => Some(Temperature::C),
            LossKind::CosSim => None,
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "infonce" | "clip" => Ok(LossKind::InfoNce),
            "cossim" | "cos" => Ok(LossKind::CosSim),
            "video_diagram" | "a" | "vi" => Ok(LossKind::VideoDiagram),
            "video_manual" | "b" | "vm" => Ok(LossKind::VideoManual),
            "intra_manual" | "c" | "m" => Ok(LossKind::IntraManual),
            other => Err(Error::Config(format!("unknown loss `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Temperature {
    A,
    B,
    C,
}

impl Temperature {
    fn slot(self) -> usize {
        match self {
            Temperature::A => 0,
            Temperature::B => 1,
            Temperature::C => 2,
        }
    }
}

/// Learnable loss scalars: one log-temperature per loss family and the raw
/// parameter of the Gaussian variance, `theta = softplus(theta_raw)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParams {
    pub log_tau: [f64; 3],
    pub theta_raw: f64,
}

impl Default for LossParams {
    fn default() -> Self {
        Self {
            log_tau: [INITIAL_TAU.ln(); 3],
            theta_raw: softplus_inverse(INITIAL_THETA),
        }
    }
}

impl LossParams {
    pub fn zeros() -> Self {
        Self {
            log_tau: [0.0; 3],
            theta_raw: 0.0,
        }
    }

    pub fn log_tau(&self, t: Temperature) -> f64 {
        self.log_tau[t.slot()]
    }

    pub fn log_tau_mut(&mut self, t: Temperature) -> &mut f64 {
        &mut self.log_tau[t.slot()]
    }

    pub fn tau(&self, t: Temperature) -> f64 {
        self.log_tau(t).exp()
    }

    pub fn theta(&self) -> f64 {
        softplus(self.theta_raw)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn softplus_inverse(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn cosine_sim(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::InvalidArgument(format!(
            "cosine similarity of vectors of length {} and {}",
            u.len(),
            v.len()
        )));
    }
    let nu = crate::features::l2_norm(u);
    let nv = crate::features::l2_norm(v);
    if !(nu > 0.0 && nv > 0.0) {
        return Err(Error::InvalidArgument("cosine similarity of a zero vector".into()));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let lse = logsumexp(logits);
    logits.iter().map(|x| x - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).into_iter().map(f64::exp).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    /// Each clip distributes over the diagrams.
    V2I,
    /// Each diagram distributes over the clips.
    I2V,
}

/// Row-stochastic matching probabilities from a clip x diagram similarity
/// block. For `I2V` row `j` holds the distribution of diagram `j` over clips.
pub fn match_probs(s: &Array2<f64>, tau: f64, direction: Direction) -> Array2<f64> {
    let oriented = match direction {
        Direction::V2I => s.view(),
        Direction::I2V => s.t(),
    };
    let mut out = Array2::zeros(oriented.raw_dim());
    for (r, row) in oriented.rows().into_iter().enumerate() {
        let logits: Vec<f64> = row.iter().map(|x| x / tau).collect();
        for (c, p) in softmax(&logits).into_iter().enumerate() {
            out[[r, c]] = p;
        }
    }
    out
}

/// Jensen-Shannon divergence in nats, `0 log 0 = 0`.
pub fn js_divergence(p: &[f64], q: &[f64]) -> f64 {
    let lp: Vec<f64> = p.iter().map(|x| x.ln()).collect();
    let lq: Vec<f64> = q.iter().map(|x| x.ln()).collect();
    js_from_logs(&lp, &lq).value
}

/// JS divergence and its gradients, both taken with respect to the log
/// probabilities.
#[derive(Debug, Clone)]
pub struct JsGrad {
    pub value: f64,
    pub d_log_p: Vec<f64>,
    pub d_log_q: Vec<f64>,
}

pub fn js_from_logs(log_p: &[f64], log_q: &[f64]) -> JsGrad {
    assert_eq!(log_p.len(), log_q.len(), "JS over different supports");
    let ln2 = std::f64::consts::LN_2;
    let mut value = 0.0;
    let mut d_log_p = vec![0.0; log_p.len()];
    let mut d_log_q = vec![0.0; log_q.len()];
    for k in 0..log_p.len() {
        let (lp, lq) = (log_p[k], log_q[k]);
        let hi = lp.max(lq);
        if hi == f64::NEG_INFINITY {
            continue;
        }
        let log_m = hi + ((lp - hi).exp() + (lq - hi).exp()).ln() - ln2;
        if lp > f64::NEG_INFINITY {
            let t = 0.5 * lp.exp() * (lp - log_m);
            value += t;
            d_log_p[k] = t;
        }
        if lq > f64::NEG_INFINITY {
            let t = 0.5 * lq.exp() * (lq - log_m);
            value += t;
            d_log_q[k] = t;
        }
    }
    JsGrad {
        value: value.max(0.0),
        d_log_p,
        d_log_q,
    }
}

/// Chains a gradient on log-softmax outputs back to the logits.
fn log_softmax_backward(log_p: &[f64], d_log_p: &[f64]) -> Vec<f64> {
    let total: f64 = d_log_p.iter().sum();
    log_p.iter().zip(d_log_p).map(|(lp, g)| g - lp.exp() * total).collect()
}

/// Value and gradients of a temperature-scaled similarity loss.
#[derive(Debug, Clone)]
pub struct SimGrad {
    pub value: f64,
    /// Gradient with respect to each similarity, same shape as the input.
    pub d_sim: Array2<f64>,
    pub d_log_tau: f64,
}

/// Converts logit gradients of one row into similarity and log-tau
/// gradients: `u = s / tau` with `tau = exp(log_tau)`.
fn logits_to_sims(d_logits: &[f64], logits: &[f64], tau: f64) -> (Vec<f64>, f64) {
    let d_sim = d_logits.iter().map(|g| g / tau).collect();
    let d_log_tau = -d_logits.iter().zip(logits).map(|(g, u)| g * u).sum::<f64>();
    (d_sim, d_log_tau)
}

/// Runs `row_loss` on every row of `s / tau` (or of its transpose) and
/// accumulates gradients into `acc`.
fn rowwise<F>(s: &Array2<f64>, log_tau: f64, direction: Direction, weight: f64, acc: &mut SimGrad, mut row_loss: F)
where
    F: FnMut(usize, &[f64]) -> (f64, Vec<f64>),
{
    let tau = log_tau.exp();
    let oriented = match direction {
        Direction::V2I => s.view(),
        Direction::I2V => s.t(),
    };
    for (r, row) in oriented.rows().into_iter().enumerate() {
        let logits: Vec<f64> = row.iter().map(|x| x / tau).collect();
        let (value, d_logits) = row_loss(r, &logits);
        let (d_sim, d_log_tau) = logits_to_sims(&d_logits, &logits, tau);
        acc.value += weight * value;
        acc.d_log_tau += weight * d_log_tau;
        for (c, g) in d_sim.into_iter().enumerate() {
            let idx = match direction {
                Direction::V2I => [r, c],
                Direction::I2V => [c, r],
            };
            acc.d_sim[idx] += weight * g;
        }
    }
}

fn cross_entropy_row(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let lp = log_softmax(logits);
    let grad = lp
        .iter()
        .enumerate()
        .map(|(k, l)| l.exp() - if k == target { 1.0 } else { 0.0 })
        .collect();
    (-lp[target], grad)
}

/// Symmetric infoNCE over a square clip x diagram block whose diagonal
/// holds the positives.
pub fn info_nce_grad(s: &Array2<f64>, log_tau: f64) -> SimGrad {
    let b = s.nrows();
    assert_eq!(b, s.ncols(), "infoNCE needs a square block");
    let mut acc = SimGrad {
        value: 0.0,
        d_sim: Array2::zeros(s.raw_dim()),
        d_log_tau: 0.0,
    };
    let weight = 1.0 / (2 * b) as f64;
    for direction in [Direction::V2I, Direction::I2V] {
        rowwise(s, log_tau, direction, weight, &mut acc, |r, logits| {
            cross_entropy_row(logits, r)
        });
    }
    acc
}

pub fn info_nce(s: &Array2<f64>, tau: f64) -> f64 {
    info_nce_grad(s, tau.ln()).value
}

/// Ground-truth match distributions for a pair batch: row `i` is uniform
/// over every in-batch pair whose diagram equals pair `i`'s diagram. The
/// matrix is symmetric, so it serves both directions.
pub fn many_to_one_targets<G: Eq + Hash>(groups: &[G]) -> Array2<f64> {
    let mut counts: HashMap<&G, usize> = HashMap::new();
    for g in groups {
        *counts.entry(g).or_default() += 1;
    }
    let b = groups.len();
    Array2::from_shape_fn((b, b), |(i, j)| {
        if groups[i] == groups[j] {
            1.0 / counts[&groups[i]] as f64
        } else {
            0.0
        }
    })
}

/// Loss A over a square clip x diagram block: the mean over rows of the JS
/// divergence between predicted and target match distributions, averaged
/// over both directions.
pub fn video_diagram_grad<G: Eq + Hash>(s: &Array2<f64>, groups: &[G], log_tau: f64) -> SimGrad {
    let b = s.nrows();
    assert_eq!(b, s.ncols(), "loss A needs a square block");
    assert_eq!(b, groups.len());
    let q = many_to_one_targets(groups);
    let log_q = q.mapv(f64::ln);
    let mut acc = SimGrad {
        value: 0.0,
        d_sim: Array2::zeros(s.raw_dim()),
        d_log_tau: 0.0,
    };
    let weight = 0.5 / b as f64;
    for direction in [Direction::V2I, Direction::I2V] {
        rowwise(s, log_tau, direction, weight, &mut acc, |r, logits| {
            let lp = log_softmax(logits);
            let lq = log_q.row(r);
            let js = js_from_logs(&lp, lq.as_slice().expect("standard layout"));
            (js.value, log_softmax_backward(&lp, &js.d_log_p))
        });
    }
    acc
}

/// Cosine-similarity baseline: mean of `1 - s_ii`.
pub fn cos_sim_grad(s: &Array2<f64>) -> SimGrad {
    let b = s.nrows();
    let mut d_sim = Array2::zeros(s.raw_dim());
    let mut value = 0.0;
    for i in 0..b {
        value += 1.0 - s[[i, i]];
        d_sim[[i, i]] = -1.0 / b as f64;
    }
    SimGrad {
        value: value / b as f64,
        d_sim,
        d_log_tau: 0.0,
    }
}

/// Value and gradients of a loss over ragged rows of similarities.
#[derive(Debug, Clone)]
pub struct RaggedGrad {
    pub value: f64,
    pub d_rows: Vec<Vec<f64>>,
    pub d_log_tau: f64,
    pub d_theta_raw: f64,
}

fn manual_weights(lens: &[usize]) -> Vec<f64> {
    let total: usize = lens.iter().sum();
    lens.iter().map(|&m| m as f64 / total as f64).collect()
}

/// Loss B. `rows[i]` holds the similarities of clip `i` to every diagram of
/// its own manual; `positives[i]` is the 0-based ground-truth position.
/// Terms are weighted by `M_i / sum_b M_b`.
pub fn video_manual_grad(rows: &[Vec<f64>], positives: &[usize], log_tau: f64) -> RaggedGrad {
    assert_eq!(rows.len(), positives.len());
    let tau = log_tau.exp();
    let lens: Vec<usize> = rows.iter().map(Vec::len).collect();
    let weights = manual_weights(&lens);
    let mut out = RaggedGrad {
        value: 0.0,
        d_rows: Vec::with_capacity(rows.len()),
        d_log_tau: 0.0,
        d_theta_raw: 0.0,
    };
    for ((row, &pos), w) in rows.iter().zip(positives).zip(weights) {
        let logits: Vec<f64> = row.iter().map(|x| x / tau).collect();
        let (ce, d_logits) = cross_entropy_row(&logits, pos);
        let (d_sim, d_log_tau) = logits_to_sims(&d_logits, &logits, tau);
        out.value += w * ce;
        out.d_log_tau += w * d_log_tau;
        out.d_rows.push(d_sim.into_iter().map(|g| w * g).collect());
    }
    out
}

pub fn video_manual_loss(rows: &[Vec<f64>], positives: &[usize], tau: f64) -> f64 {
    video_manual_grad(rows, positives, tau.ln()).value
}

/// Log of the Gaussian with mean `anchor` (0-based) and variance `theta`,
/// discretized and normalized over `0..len`.
pub fn gaussian_log_target(anchor: usize, len: usize, theta: f64) -> Vec<f64> {
    let a: Vec<f64> = (0..len)
        .map(|k| {
            let d = k as f64 - anchor as f64;
            -d * d / (2.0 * theta)
        })
        .collect();
    log_softmax(&a)
}

/// Loss C. `rows[b]` holds the similarities of an anchor diagram to every
/// diagram of its manual (itself included); `anchors[b]` is its 0-based
/// position. Terms are weighted by `M_b / sum M`.
pub fn intra_manual_grad(rows: &[Vec<f64>], anchors: &[usize], log_tau: f64, theta_raw: f64) -> RaggedGrad {
    assert_eq!(rows.len(), anchors.len());
    let tau = log_tau.exp();
    let theta = softplus(theta_raw);
    let lens: Vec<usize> = rows.iter().map(Vec::len).collect();
    let weights = manual_weights(&lens);
    let mut out = RaggedGrad {
        value: 0.0,
        d_rows: Vec::with_capacity(rows.len()),
        d_log_tau: 0.0,
        d_theta_raw: 0.0,
    };
    for ((row, &anchor), w) in rows.iter().zip(anchors).zip(weights) {
        let logits: Vec<f64> = row.iter().map(|x| x / tau).collect();
        let lp = log_softmax(&logits);
        let lq = gaussian_log_target(anchor, row.len(), theta);
        let js = js_from_logs(&lp, &lq);
        let d_logits = log_softmax_backward(&lp, &js.d_log_p);
        let (d_sim, d_log_tau) = logits_to_sims(&d_logits, &logits, tau);

        // lq = a - lse(a), a_k = -(k - j)^2 / (2 theta)
        let d_a = log_softmax_backward(&lq, &js.d_log_q);
        let d_theta: f64 = d_a
            .iter()
            .enumerate()
            .map(|(k, g)| {
                let d = k as f64 - anchor as f64;
                g * d * d / (2.0 * theta * theta)
            })
            .sum();

        out.value += w * js.value;
        out.d_log_tau += w * d_log_tau;
        out.d_theta_raw += w * d_theta * sigmoid(theta_raw);
        out.d_rows.push(d_sim.into_iter().map(|g| w * g).collect());
    }
    out
}

pub fn intra_manual_loss(rows: &[Vec<f64>], anchors: &[usize], tau: f64, theta: f64) -> f64 {
    intra_manual_grad(rows, anchors, tau.ln(), softplus_inverse(theta)).value
}
