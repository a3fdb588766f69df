//! Trainable state (two projection heads plus loss scalars), the combined
//! training objective with its backward pass, and checkpoints.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{s, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::emb::{read_tables, write_tables, EmbeddingTable};
use crate::error::{Error, Result};
use crate::features::ProjectionHead;
use crate::losses::{
    cos_sim_grad, info_nce_grad, intra_manual_grad, video_diagram_grad, video_manual_grad, LossKind, LossParams,
    SimGrad, Temperature,
};
use crate::rng;

pub const DEFAULT_EMBED_DIM: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub video_raw_dim: usize,
    pub diagram_raw_dim: usize,
    /// Hidden width of both heads; `None` uses each head's input width.
    pub hidden: Option<usize>,
    pub embed_dim: usize,
    pub use_sprf: bool,
}

impl ModelConfig {
    pub fn new(video_raw_dim: usize, diagram_raw_dim: usize) -> Self {
        Self {
            video_raw_dim,
            diagram_raw_dim,
            hidden: None,
            embed_dim: DEFAULT_EMBED_DIM,
            use_sprf: true,
        }
    }

    fn input_dim(&self, raw: usize) -> usize {
        if self.use_sprf {
            raw + 2
        } else {
            raw
        }
    }

    pub fn video_input_dim(&self) -> usize {
        self.input_dim(self.video_raw_dim)
    }

    pub fn diagram_input_dim(&self) -> usize {
        self.input_dim(self.diagram_raw_dim)
    }
}

/// Every trainable value.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub video: ProjectionHead,
    pub diagram: ProjectionHead,
    pub loss: LossParams,
}

/// Partial derivatives laid out exactly like [`Params`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet(pub Params);

impl Params {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let head = |input: usize, label: u64| {
            let hidden = cfg.hidden.unwrap_or(input);
            ProjectionHead::random(input, hidden, cfg.embed_dim, &mut rng::rng(rng::mix(seed, label)))
        };
        Self {
            video: head(cfg.video_input_dim(), 1),
            diagram: head(cfg.diagram_input_dim(), 2),
            loss: LossParams::default(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            video: self.video.zeros_like(),
            diagram: self.diagram.zeros_like(),
            loss: LossParams::zeros(),
        }
    }

    /// Named tensors in canonical order, with whether weight decay applies.
    pub fn tensors(&self) -> Vec<(String, &[f64], bool)> {
        let mut out = Vec::with_capacity(10);
        for (prefix, head) in [("video", &self.video), ("diagram", &self.diagram)] {
            for (name, t) in HEAD_TENSORS.iter().zip(head.tensors()) {
                out.push((format!("{prefix}.{name}"), t, true));
            }
        }
        out.push(("log_tau".to_string(), &self.loss.log_tau[..], false));
        out.push((
            "theta_raw".to_string(),
            std::slice::from_ref(&self.loss.theta_raw),
            false,
        ));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(&mut [f64], bool)> {
        let mut out: Vec<(&mut [f64], bool)> = Vec::with_capacity(10);
        let [a, b, c, d] = self.video.tensors_mut();
        out.extend([(a, true), (b, true), (c, true), (d, true)]);
        let [a, b, c, d] = self.diagram.tensors_mut();
        out.extend([(a, true), (b, true), (c, true), (d, true)]);
        out.push((&mut self.loss.log_tau[..], false));
        out.push((std::slice::from_mut(&mut self.loss.theta_raw), false));
        out
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors()
            .into_iter()
            .flat_map(|(_, t, _)| t.iter().copied())
            .collect()
    }

    pub fn decay_mask(&self) -> Vec<bool> {
        self.tensors()
            .into_iter()
            .flat_map(|(_, t, decay)| std::iter::repeat_n(decay, t.len()))
            .collect()
    }

    /// Name of every scalar in flat order, e.g. `video.w1[3]`.
    pub fn flat_names(&self) -> Vec<String> {
        self.tensors()
            .into_iter()
            .flat_map(|(name, t, _)| (0..t.len()).map(move |k| format!("{name}[{k}]")))
            .collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for (t, _) in self.tensors_mut() {
            let n = t.len();
            t.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        assert_eq!(offset, flat.len(), "flat parameter vector has the wrong length");
    }

    pub fn len(&self) -> usize {
        self.tensors().iter().map(|(_, t, _)| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

const HEAD_TENSORS: [&str; 4] = ["w1", "b1", "w2", "b2"];

impl GradientSet {
    pub fn zeros_like(params: &Params) -> Self {
        GradientSet(params.zeros_like())
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.0.to_flat()
    }

    pub fn is_finite(&self) -> bool {
        self.to_flat().iter().all(|g| g.is_finite())
    }
}

// ---- objective ----

/// Enabled losses and their weights in the total.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights(pub BTreeMap<LossKind, f64>);

impl LossWeights {
    pub fn only(kinds: &[LossKind]) -> Self {
        LossWeights(kinds.iter().map(|&k| (k, 1.0)).collect())
    }

    pub fn enabled(&self) -> impl Iterator<Item = (LossKind, f64)> + '_ {
        self.0.iter().filter(|(_, w)| **w != 0.0).map(|(k, w)| (*k, *w))
    }

    pub fn is_enabled(&self, kind: LossKind) -> bool {
        self.0.get(&kind).is_some_and(|w| *w != 0.0)
    }

    pub fn needs_pairs(&self) -> bool {
        [LossKind::InfoNce, LossKind::CosSim, LossKind::VideoDiagram]
            .iter()
            .any(|&k| self.is_enabled(k))
    }

    pub fn needs_manuals(&self) -> bool {
        [LossKind::VideoManual, LossKind::IntraManual]
            .iter()
            .any(|&k| self.is_enabled(k))
    }
}

/// Head inputs of a pair batch. Row `b` of `clips` is paired with row `b`
/// of `diagrams`; equal `groups` entries mark the same diagram.
#[derive(Debug, Clone, PartialEq)]
pub struct PairInputs {
    pub clips: Array2<f64>,
    pub diagrams: Array2<f64>,
    pub groups: Vec<(usize, usize)>,
}

/// Head inputs of a manual batch. `blocks[m]` holds every diagram of one
/// manual in order; clip `i` belongs to `blocks[slots[i]]` with 0-based
/// positive `positives[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ManualInputs {
    pub clips: Array2<f64>,
    pub blocks: Vec<Array2<f64>>,
    pub slots: Vec<usize>,
    pub positives: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossInputs {
    pub pair: Option<PairInputs>,
    pub manual: Option<ManualInputs>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub parts: BTreeMap<LossKind, f64>,
}

fn add_sim_grad(
    kind: LossKind,
    weight: f64,
    g: SimGrad,
    d_sim: &mut Array2<f64>,
    grads: &mut Params,
    out: &mut LossBreakdown,
) {
    out.parts.insert(kind, g.value);
    out.total += weight * g.value;
    d_sim.scaled_add(weight, &g.d_sim);
    if let Some(t) = kind.temperature() {
        *grads.loss.log_tau_mut(t) += weight * g.d_log_tau;
    }
}

/// Evaluates the weighted sum of enabled losses and its exact gradient
/// with respect to every parameter.
pub fn loss_and_grad(
    params: &Params,
    weights: &LossWeights,
    inputs: &LossInputs,
) -> Result<(LossBreakdown, GradientSet)> {
    if weights.enabled().next().is_none() {
        return Err(Error::Config("no loss enabled".into()));
    }
    let mut out = LossBreakdown::default();
    let mut grads = params.zeros_like();

    if weights.needs_pairs() {
        let pair = inputs
            .pair
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("pair losses need a pair batch".into()))?;
        let cv = params.video.forward(pair.clips.view())?;
        let cd = params.diagram.forward(pair.diagrams.view())?;
        let sim = cv.y.dot(&cd.y.t());
        let mut d_sim = Array2::zeros(sim.raw_dim());
        for (kind, w) in weights.enabled() {
            let g = match kind {
                LossKind::InfoNce => info_nce_grad(&sim, params.loss.log_tau(Temperature::A)),
                LossKind::CosSim => cos_sim_grad(&sim),
                LossKind::VideoDiagram => video_diagram_grad(&sim, &pair.groups, params.loss.log_tau(Temperature::A)),
                _ => continue,
            };
            add_sim_grad(kind, w, g, &mut d_sim, &mut grads, &mut out);
        }
        let g_clips = d_sim.dot(&cd.y);
        let g_diagrams = d_sim.t().dot(&cv.y);
        params.video.backward(&cv, &g_clips, &mut grads.video);
        params.diagram.backward(&cd, &g_diagrams, &mut grads.diagram);
    }

    if weights.needs_manuals() {
        let man = inputs
            .manual
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("manual losses need a manual batch".into()))?;
        let mut offsets = Vec::with_capacity(man.blocks.len());
        let mut total_rows = 0;
        for b in &man.blocks {
            offsets.push(total_rows);
            total_rows += b.nrows();
        }
        let width = params.diagram.input_dim();
        let mut stacked = Array2::zeros((total_rows, width));
        for (b, &off) in man.blocks.iter().zip(&offsets) {
            stacked.slice_mut(s![off..off + b.nrows(), ..]).assign(b);
        }
        let cd = params.diagram.forward(stacked.view())?;
        let yd = &cd.y;
        let mut g_yd = Array2::zeros(yd.raw_dim());
        let block_range = |slot: usize| offsets[slot]..offsets[slot] + man.blocks[slot].nrows();

        if let Some(&w) = weights.0.get(&LossKind::VideoManual).filter(|w| **w != 0.0) {
            let cv = params.video.forward(man.clips.view())?;
            let rows: Vec<Vec<f64>> = man
                .slots
                .iter()
                .enumerate()
                .map(|(i, &slot)| yd.slice(s![block_range(slot), ..]).dot(&cv.y.row(i)).to_vec())
                .collect();
            let g = video_manual_grad(&rows, &man.positives, params.loss.log_tau(Temperature::B));
            out.parts.insert(LossKind::VideoManual, g.value);
            out.total += w * g.value;
            *grads.loss.log_tau_mut(Temperature::B) += w * g.d_log_tau;
            let mut g_yv = Array2::zeros(cv.y.raw_dim());
            for (i, (&slot, d_row)) in man.slots.iter().zip(&g.d_rows).enumerate() {
                for (k, r) in block_range(slot).enumerate() {
                    let d = w * d_row[k];
                    g_yv.row_mut(i).scaled_add(d, &yd.row(r));
                    g_yd.row_mut(r).scaled_add(d, &cv.y.row(i));
                }
            }
            params.video.backward(&cv, &g_yv, &mut grads.video);
        }

        if let Some(&w) = weights.0.get(&LossKind::IntraManual).filter(|w| **w != 0.0) {
            let rows: Vec<Vec<f64>> = man
                .slots
                .iter()
                .zip(&man.positives)
                .map(|(&slot, &pos)| {
                    let range = block_range(slot);
                    let anchor = yd.row(range.start + pos);
                    yd.slice(s![range, ..]).dot(&anchor).to_vec()
                })
                .collect();
            let g = intra_manual_grad(
                &rows,
                &man.positives,
                params.loss.log_tau(Temperature::C),
                params.loss.theta_raw,
            );
            out.parts.insert(LossKind::IntraManual, g.value);
            out.total += w * g.value;
            *grads.loss.log_tau_mut(Temperature::C) += w * g.d_log_tau;
            grads.loss.theta_raw += w * g.d_theta_raw;
            for ((&slot, &pos), d_row) in man.slots.iter().zip(&man.positives).zip(&g.d_rows) {
                let range = block_range(slot);
                let anchor = range.start + pos;
                for (k, r) in range.enumerate() {
                    let d = w * d_row[k];
                    let (y_anchor, y_r) = (yd.row(anchor).to_owned(), yd.row(r).to_owned());
                    g_yd.row_mut(anchor).scaled_add(d, &y_r);
                    g_yd.row_mut(r).scaled_add(d, &y_anchor);
                }
            }
        }
        params.diagram.backward(&cd, &g_yd, &mut grads.diagram);
    }

    Ok((out, GradientSet(grads)))
}

/// Forward-only convenience wrapper around [`loss_and_grad`].
pub fn total_loss(params: &Params, weights: &LossWeights, inputs: &LossInputs) -> Result<LossBreakdown> {
    loss_and_grad(params, weights, inputs).map(|(l, _)| l)
}

// ---- checkpoints ----

const SCALAR_IDS: [&str; 5] = ["log_tau_A", "log_tau_B", "log_tau_C", "theta_raw", "use_sprf"];

fn matrix_table(prefix: &str, m: &Array2<f64>) -> Result<EmbeddingTable> {
    let mut t = EmbeddingTable::new(m.ncols())?;
    for (r, row) in m.rows().into_iter().enumerate() {
        t.insert_f64(format!("{prefix}.{r}"), &row.to_vec())?;
    }
    Ok(t)
}

fn vector_table(id: &str, v: &[f64]) -> Result<EmbeddingTable> {
    let mut t = EmbeddingTable::new(v.len())?;
    t.insert_f64(id, v)?;
    Ok(t)
}

fn table_matrix(t: &EmbeddingTable, prefix: &str) -> Result<Array2<f64>> {
    let rows = t.len();
    let mut m = Array2::zeros((rows, t.dim()));
    for r in 0..rows {
        let id = format!("{prefix}.{r}");
        let v = t.get(&id).ok_or_else(|| Error::MissingEmbedding(id.clone()))?;
        for (c, x) in v.iter().enumerate() {
            m[[r, c]] = *x as f64;
        }
    }
    Ok(m)
}

/// Serializes parameters as consecutive `.emb` tables: for each of
/// `video` and `diagram` the tensors `w1` (rows `video.w1.0`, ...), `b1`,
/// `w2`, `b2`, then one width-1 table of loss scalars.
pub fn checkpoint_tables(params: &Params, use_sprf: bool) -> Result<Vec<EmbeddingTable>> {
    let mut tables = Vec::with_capacity(9);
    for (name, head) in [("video", &params.video), ("diagram", &params.diagram)] {
        tables.push(matrix_table(&format!("{name}.w1"), &head.w1)?);
        tables.push(vector_table(&format!("{name}.b1"), head.b1.as_slice().unwrap())?);
        tables.push(matrix_table(&format!("{name}.w2"), &head.w2)?);
        tables.push(vector_table(&format!("{name}.b2"), head.b2.as_slice().unwrap())?);
    }
    let mut scalars = EmbeddingTable::new(1)?;
    let values = [
        params.loss.log_tau[0],
        params.loss.log_tau[1],
        params.loss.log_tau[2],
        params.loss.theta_raw,
        if use_sprf { 1.0 } else { 0.0 },
    ];
    for (id, v) in SCALAR_IDS.iter().zip(values) {
        scalars.insert_f64(*id, &[v])?;
    }
    tables.push(scalars);
    Ok(tables)
}

/// Inverse of [`checkpoint_tables`]; returns the parameters and whether
/// the progress feature is in use.
pub fn params_from_tables(tables: &[EmbeddingTable]) -> Result<(Params, bool)> {
    if tables.len() != 9 {
        return Err(Error::InvalidArgument(format!(
            "checkpoint holds {} tables, expected 9",
            tables.len()
        )));
    }
    let head = |name: &str, t: &[EmbeddingTable]| -> Result<ProjectionHead> {
        let vector = |table: &EmbeddingTable, id: String| {
            table
                .get_f64(&id)
                .map(ndarray::Array1::from)
                .ok_or(Error::MissingEmbedding(id))
        };
        Ok(ProjectionHead {
            w1: table_matrix(&t[0], &format!("{name}.w1"))?,
            b1: vector(&t[1], format!("{name}.b1"))?,
            w2: table_matrix(&t[2], &format!("{name}.w2"))?,
            b2: vector(&t[3], format!("{name}.b2"))?,
        })
    };
    let video = head("video", &tables[0..4])?;
    let diagram = head("diagram", &tables[4..8])?;
    let scalar = |id: &str| {
        tables[8]
            .get(id)
            .map(|v| v[0] as f64)
            .ok_or_else(|| Error::MissingEmbedding(id.to_string()))
    };
    let loss = LossParams {
        log_tau: [scalar(SCALAR_IDS[0])?, scalar(SCALAR_IDS[1])?, scalar(SCALAR_IDS[2])?],
        theta_raw: scalar(SCALAR_IDS[3])?,
    };
    let use_sprf = scalar(SCALAR_IDS[4])? != 0.0;
    Ok((Params { video, diagram, loss }, use_sprf))
}

pub fn save_checkpoint(params: &Params, use_sprf: bool, path: impl AsRef<Path>) -> Result<()> {
    write_tables(&checkpoint_tables(params, use_sprf)?, path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Params, bool)> {
    params_from_tables(&read_tables(path)?)
}

/// Rounds every parameter through f32, matching what a checkpoint stores.
pub fn round_to_checkpoint(params: &Params) -> Params {
    let mut p = params.clone();
    let flat: Vec<f64> = p.to_flat().into_iter().map(|x| x as f32 as f64).collect();
    p.set_flat(&flat);
    p
}

/// Mean of rows, used for averaging test-clip features.
pub fn mean_rows(m: &Array2<f64>) -> Vec<f64> {
    m.mean_axis(Axis(0)).expect("non-empty").to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_params() -> Params {
        let mut cfg = ModelConfig::new(3, 4);
        cfg.embed_dim = 2;
        Params::init(&cfg, 7)
    }

    #[test]
    fn flat_round_trip_and_mask() {
        let p = small_params();
        let flat = p.to_flat();
        assert_eq!(flat.len(), p.len());
        assert_eq!(p.flat_names().len(), flat.len());
        let mask = p.decay_mask();
        assert_eq!(mask.iter().filter(|d| !**d).count(), 4);
        let mut q = p.zeros_like();
        q.set_flat(&flat);
        assert_eq!(q, p);
    }

    #[test]
    fn checkpoint_round_trip_is_f32_exact() {
        let p = round_to_checkpoint(&small_params());
        let tables = checkpoint_tables(&p, true).unwrap();
        let (back, sprf) = params_from_tables(&tables).unwrap();
        assert!(sprf);
        assert_eq!(back, p);
    }

    #[test]
    fn no_loss_enabled_is_an_error() {
        let p = small_params();
        let r = loss_and_grad(&p, &LossWeights::only(&[]), &LossInputs::default());
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn missing_batch_is_an_error() {
        let p = small_params();
        let r = loss_and_grad(&p, &LossWeights::only(&[LossKind::VideoManual]), &LossInputs::default());
        assert!(r.is_err());
    }
}
