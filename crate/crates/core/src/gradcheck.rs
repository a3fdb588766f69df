//! Central finite-difference checks of the analytic gradients.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::features::{augment, ProgressRate};
use crate::losses::{softplus_inverse, LossKind};
use crate::model::{loss_and_grad, LossInputs, LossWeights, ManualInputs, ModelConfig, PairInputs, Params};
use crate::rng;

pub const DEFAULT_STEP: f64 = 1e-4;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error, so entries whose true
/// gradient is zero are compared on an absolute scale.
pub const DEFAULT_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: DEFAULT_STEP,
            tolerance: DEFAULT_TOLERANCE,
            floor: DEFAULT_FLOOR,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Mismatch {
    pub name: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<Mismatch>,
    pub failures: Vec<Mismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `analytic` against central differences of `f` around `x0`.
/// An empty parameter vector passes vacuously.
pub fn check_gradient<F>(
    x0: &[f64],
    mut f: F,
    analytic: &[f64],
    names: &[String],
    cfg: &GradCheckConfig,
) -> GradCheckReport
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(x0.len(), analytic.len());
    let mut x = x0.to_vec();
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
        failures: Vec::new(),
    };
    for k in 0..x.len() {
        let orig = x[k];
        x[k] = orig + cfg.step;
        let plus = f(&x);
        x[k] = orig - cfg.step;
        let minus = f(&x);
        x[k] = orig;
        let numeric = (plus - minus) / (2.0 * cfg.step);
        let rel = relative_error(analytic[k], numeric, cfg.floor);
        let mismatch = || Mismatch {
            name: names.get(k).cloned().unwrap_or_else(|| format!("x[{k}]")),
            analytic: analytic[k],
            numeric,
            rel_error: rel,
        };
        report.checked += 1;
        if rel > report.max_rel_error || rel.is_nan() {
            report.max_rel_error = if rel.is_nan() { f64::INFINITY } else { rel };
            report.worst = Some(mismatch());
        }
        if !(rel <= cfg.tolerance) {
            report.failures.push(mismatch());
        }
    }
    report
}

/// Checks [`loss_and_grad`] for every parameter of `params`.
pub fn check_loss(
    params: &Params,
    weights: &LossWeights,
    inputs: &LossInputs,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let (_, grads) = loss_and_grad(params, weights, inputs)?;
    let x0 = params.to_flat();
    let mut probe = params.clone();
    let f = |x: &[f64]| {
        probe.set_flat(x);
        loss_and_grad(&probe, weights, inputs)
            .map(|(l, _)| l.total)
            .unwrap_or(f64::NAN)
    };
    Ok(check_gradient(&x0, f, &grads.to_flat(), &params.flat_names(), cfg))
}

/// A random small training instance.
#[derive(Debug, Clone)]
pub struct Instance {
    pub params: Params,
    pub inputs: LossInputs,
}

fn random_input(rng: &mut ChaCha8Rng, raw_dim: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..raw_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let r = ProgressRate::new(rng.random_range(0.0..=1.0)).expect("in range");
    augment(&raw, Some(r)).expect("non-zero raw vector")
}

fn stack(rows: &[Vec<f64>]) -> Array2<f64> {
    let width = rows[0].len();
    Array2::from_shape_fn((rows.len(), width), |(r, c)| rows[r][c])
}

/// Smallest |pre-activation| over every head input of the instance.
fn kink_margin(inst: &Instance) -> f64 {
    let mut margin = f64::INFINITY;
    let mut visit = |head: &crate::features::ProjectionHead, x: &Array2<f64>| {
        let pre = x.dot(&head.w1) + &head.b1;
        margin = pre.iter().fold(margin, |m, v| m.min(v.abs()));
    };
    if let Some(p) = &inst.inputs.pair {
        visit(&inst.params.video, &p.clips);
        visit(&inst.params.diagram, &p.diagrams);
    }
    if let Some(m) = &inst.inputs.manual {
        visit(&inst.params.video, &m.clips);
        for b in &m.blocks {
            visit(&inst.params.diagram, b);
        }
    }
    margin
}

/// Draws an instance with batch size at most 8, raw widths at most 16 and
/// embedding width at most 8, away from ReLU kinks.
pub fn random_instance(seed: u64) -> Instance {
    let mut attempt = 0u64;
    loop {
        let inst = draw_instance(rng::mix(seed, attempt));
        if kink_margin(&inst) > 10.0 * DEFAULT_STEP {
            return inst;
        }
        attempt += 1;
    }
}

fn draw_instance(seed: u64) -> Instance {
    let mut r = rng::rng(seed);
    let batch = r.random_range(2..=8usize);
    let mut cfg = ModelConfig::new(r.random_range(2..=16), r.random_range(2..=16));
    cfg.embed_dim = r.random_range(2..=8);
    let mut params = Params::init(&cfg, r.random());
    for lt in params.loss.log_tau.iter_mut() {
        *lt = r.random_range(0.05f64..0.5).ln();
    }
    params.loss.theta_raw = softplus_inverse(r.random_range(0.5..2.0));

    let n_groups = r.random_range(1..=batch);
    let group_inputs: Vec<Vec<f64>> = (0..n_groups)
        .map(|_| random_input(&mut r, cfg.diagram_raw_dim))
        .collect();
    let groups: Vec<(usize, usize)> = (0..batch).map(|_| (0, r.random_range(0..n_groups))).collect();
    let clips: Vec<Vec<f64>> = (0..batch).map(|_| random_input(&mut r, cfg.video_raw_dim)).collect();
    let diagrams: Vec<Vec<f64>> = groups.iter().map(|g| group_inputs[g.1].clone()).collect();
    let pair = PairInputs {
        clips: stack(&clips),
        diagrams: stack(&diagrams),
        groups,
    };

    let n_manuals = r.random_range(1..=3usize);
    let blocks: Vec<Array2<f64>> = (0..n_manuals)
        .map(|_| {
            let m = r.random_range(1..=6usize);
            let rows: Vec<Vec<f64>> = (0..m).map(|_| random_input(&mut r, cfg.diagram_raw_dim)).collect();
            stack(&rows)
        })
        .collect();
    let slots: Vec<usize> = (0..batch).map(|_| r.random_range(0..n_manuals)).collect();
    let positives = slots.iter().map(|&s| r.random_range(0..blocks[s].nrows())).collect();
    let manual_clips: Vec<Vec<f64>> = (0..batch).map(|_| random_input(&mut r, cfg.video_raw_dim)).collect();
    let manual = ManualInputs {
        clips: stack(&manual_clips),
        blocks,
        slots,
        positives,
    };
    Instance {
        params,
        inputs: LossInputs {
            pair: Some(pair),
            manual: Some(manual),
        },
    }
}

/// The loss configurations exercised by [`run_suite`].
pub fn suite_configurations() -> Vec<(String, LossWeights)> {
    let mut out: Vec<(String, LossWeights)> = [
        LossKind::InfoNce,
        LossKind::VideoDiagram,
        LossKind::VideoManual,
        LossKind::IntraManual,
        LossKind::CosSim,
    ]
    .into_iter()
    .map(|k| (k.name().to_string(), LossWeights::only(&[k])))
    .collect();
    out.push(("total".to_string(), LossWeights::only(&LossKind::ALL)));
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteEntry {
    pub instance: usize,
    pub loss: String,
    pub report: GradCheckReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub seed: u64,
    pub entries: Vec<SuiteEntry>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.report.passed())
    }

    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.report.max_rel_error).fold(0.0, f64::max)
    }
}

/// Checks every loss configuration on `instances` random instances.
pub fn run_suite(seed: u64, instances: usize, cfg: &GradCheckConfig) -> Result<SuiteReport> {
    let mut entries = Vec::new();
    for i in 0..instances {
        let inst = random_instance(rng::mix(seed, i as u64));
        for (name, weights) in suite_configurations() {
            let report = check_loss(&inst.params, &weights, &inst.inputs, cfg)?;
            entries.push(SuiteEntry {
                instance: i,
                loss: name,
                report,
            });
        }
    }
    Ok(SuiteReport { seed, entries })
}
