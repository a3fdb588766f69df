//! Alignment and retrieval metrics and the results table.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Granularity, Split};
use crate::error::{Error, Result};
use crate::losses::Direction;
use crate::setmatch::AlignMethod;

fn check_lengths(preds: &[usize], gts: &[usize]) -> Result<()> {
    if preds.is_empty() {
        return Err(Error::InvalidArgument("no predictions".into()));
    }
    if preds.len() != gts.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} ground-truth indices",
            preds.len(),
            gts.len()
        )));
    }
    Ok(())
}

/// Percentage of exact index matches.
pub fn top1_accuracy(preds: &[usize], gts: &[usize]) -> Result<f64> {
    check_lengths(preds, gts)?;
    let hits = preds.iter().zip(gts).filter(|(p, g)| p == g).count();
    Ok(100.0 * hits as f64 / preds.len() as f64)
}

/// Mean absolute difference between predicted and true indices.
pub fn average_index_error(preds: &[usize], gts: &[usize]) -> Result<f64> {
    check_lengths(preds, gts)?;
    let total: usize = preds.iter().zip(gts).map(|(&p, &g)| p.abs_diff(g)).sum();
    Ok(total as f64 / preds.len() as f64)
}

/// One ranked retrieval: a query scored against a candidate pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalQuery {
    pub direction: Direction,
    pub query: String,
    pub pool: Vec<String>,
    pub scores: Vec<f64>,
    pub positives: BTreeSet<String>,
}

impl RetrievalQuery {
    pub fn new(
        direction: Direction,
        query: impl Into<String>,
        pool: Vec<String>,
        scores: Vec<f64>,
        positives: BTreeSet<String>,
    ) -> Result<Self> {
        let query = query.into();
        if pool.is_empty() {
            return Err(Error::InvalidArgument(format!("empty candidate pool for `{query}`")));
        }
        if pool.len() != scores.len() {
            return Err(Error::InvalidArgument(format!(
                "`{query}`: {} candidates but {} scores",
                pool.len(),
                scores.len()
            )));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite(format!("scores for `{query}`")));
        }
        if let Some(p) = positives.iter().find(|p| !pool.contains(p)) {
            return Err(Error::InvalidArgument(format!(
                "positive `{p}` is not in the pool of `{query}`"
            )));
        }
        Ok(Self {
            direction,
            query,
            pool,
            scores,
            positives,
        })
    }

    pub fn has_positives(&self) -> bool {
        !self.positives.is_empty()
    }

    fn is_positive(&self, k: usize) -> bool {
        self.positives.contains(&self.pool[k])
    }

    /// Candidate positions from best to worst; equal scores are ordered by
    /// id.
    pub fn ranking(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.pool.len()).collect();
        order.sort_by(|&a, &b| {
            self.scores[b]
                .total_cmp(&self.scores[a])
                .then_with(|| self.pool[a].cmp(&self.pool[b]))
        });
        order
    }

    /// The best `k` candidates with their scores.
    pub fn top_k(&self, k: usize) -> Vec<(&str, f64)> {
        self.ranking()
            .into_iter()
            .take(k)
            .map(|i| (self.pool[i].as_str(), self.scores[i]))
            .collect()
    }
}

/// Whether a positive ranks within the first `k`. `None` for queries with
/// no positives, which recall does not count.
pub fn recall_at_k(q: &RetrievalQuery, k: usize) -> Option<bool> {
    if !q.has_positives() {
        return None;
    }
    Some(q.ranking().into_iter().take(k).any(|i| q.is_positive(i)))
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half, from the Mann-Whitney rank sum. A query without
/// positives scores 0 and one without negatives scores 1.
pub fn auroc(q: &RetrievalQuery) -> f64 {
    let n_pos = q.positives.len();
    let n_neg = q.pool.len() - n_pos;
    if n_pos == 0 {
        return 0.0;
    }
    if n_neg == 0 {
        return 1.0;
    }
    let mut order: Vec<usize> = (0..q.pool.len()).collect();
    order.sort_by(|&a, &b| q.scores[a].total_cmp(&q.scores[b]));
    let mut rank_sum = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && q.scores[order[end]] == q.scores[order[start]] {
            end += 1;
        }
        // 1-based ranks start+1..=end share their mean.
        let mean_rank = (start + 1 + end) as f64 / 2.0;
        let pos_in_group = order[start..end].iter().filter(|&&i| q.is_positive(i)).count();
        rank_sum += mean_rank * pos_in_group as f64;
        start = end;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    u / (n_pos * n_neg) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalSummary {
    pub queries: usize,
    pub without_positives: usize,
    /// Percent over queries that have positives; `None` if there are none.
    pub r1: Option<f64>,
    pub r3: Option<f64>,
    /// Mean over every query; `None` only for an empty set.
    pub auroc: Option<f64>,
}

pub fn summarize_retrieval(queries: &[RetrievalQuery]) -> RetrievalSummary {
    let with_pos: Vec<&RetrievalQuery> = queries.iter().filter(|q| q.has_positives()).collect();
    let recall = |k| {
        (!with_pos.is_empty()).then(|| {
            let hits = with_pos.iter().filter(|q| recall_at_k(q, k) == Some(true)).count();
            100.0 * hits as f64 / with_pos.len() as f64
        })
    };
    RetrievalSummary {
        queries: queries.len(),
        without_positives: queries.len() - with_pos.len(),
        r1: recall(1),
        r3: recall(3),
        auroc: (!queries.is_empty()).then(|| queries.iter().map(auroc).sum::<f64>() / queries.len() as f64),
    }
}

/// Per-video alignment output at one granularity: rows are all of the
/// video's segments in temporal order, columns the manual's diagrams.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoScores {
    pub video_id: String,
    pub segments: Vec<String>,
    /// 1-based predicted diagram per row.
    pub assignment: Vec<usize>,
    pub scores: Array2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GranularityMetrics {
    pub segments: usize,
    pub top1: f64,
    pub aie: f64,
    pub i2v: RetrievalSummary,
}

impl GranularityMetrics {
    pub fn r1(&self) -> Option<f64> {
        self.i2v.r1
    }

    pub fn r3(&self) -> Option<f64> {
        self.i2v.r3
    }

    pub fn auroc(&self) -> Option<f64> {
        self.i2v.auroc
    }
}

struct Evaluated<'a> {
    manual: &'a str,
    scores: &'a VideoScores,
    /// Ground truth per row; `None` for unlabeled segments.
    gts: Vec<Option<usize>>,
}

fn collect<'a>(
    ds: &'a Dataset,
    split: Split,
    gran: Granularity,
    videos: &'a [VideoScores],
) -> Result<Vec<Evaluated<'a>>> {
    let by_id: BTreeMap<&str, &VideoScores> = videos.iter().map(|v| (v.video_id.as_str(), v)).collect();
    let mut out = Vec::new();
    for vi in ds.videos_in(split) {
        let video = &ds.videos[vi];
        let segments = &video.segments;
        if segments.is_empty() {
            continue;
        }
        let vs = by_id
            .get(video.video_id.as_str())
            .ok_or_else(|| Error::InvalidArgument(format!("no prediction for video `{}`", video.video_id)))?;
        let m = ds.manual_of(video).diagrams(gran).len();
        if vs.scores.dim() != (segments.len(), m) || vs.assignment.len() != segments.len() {
            return Err(Error::InvalidArgument(format!(
                "prediction for `{}` is {:?} but the video has {} segments and {m} diagrams",
                video.video_id,
                vs.scores.dim(),
                segments.len()
            )));
        }
        for (seg, id) in segments.iter().zip(&vs.segments) {
            if &seg.segment_id != id {
                return Err(Error::InvalidArgument(format!(
                    "prediction rows for `{}` do not follow its segments (`{id}`)",
                    video.video_id
                )));
            }
        }
        out.push(Evaluated {
            manual: &video.manual_id,
            scores: vs,
            gts: segments.iter().map(|s| s.gt(gran)).collect(),
        });
    }
    if out.iter().all(|e| e.gts.iter().all(Option::is_none)) {
        return Err(Error::InvalidDataset(format!(
            "no {gran}-labeled segments in the {split} split"
        )));
    }
    Ok(out)
}

/// Diagram-to-video queries: every diagram of every manual that has a
/// video in the split, against all segments of those videos.
pub fn i2v_queries(
    ds: &Dataset,
    split: Split,
    gran: Granularity,
    videos: &[VideoScores],
) -> Result<Vec<RetrievalQuery>> {
    let evaluated = collect(ds, split, gran, videos)?;
    let mut by_manual: BTreeMap<&str, Vec<&Evaluated>> = BTreeMap::new();
    for e in &evaluated {
        by_manual.entry(e.manual).or_default().push(e);
    }
    let mut queries = Vec::new();
    for (manual_id, members) in by_manual {
        let manual = ds.manual(manual_id).expect("validated dataset");
        for (j, diagram) in manual.diagrams(gran).iter().enumerate() {
            let mut pool = Vec::new();
            let mut scores = Vec::new();
            let mut positives = BTreeSet::new();
            for e in &members {
                for (row, seg) in e.scores.segments.iter().enumerate() {
                    pool.push(seg.clone());
                    scores.push(e.scores.scores[[row, j]]);
                    if e.gts[row] == Some(j + 1) {
                        positives.insert(seg.clone());
                    }
                }
            }
            queries.push(RetrievalQuery::new(
                Direction::I2V,
                diagram.diagram_id.clone(),
                pool,
                scores,
                positives,
            )?);
        }
    }
    Ok(queries)
}

/// All metrics of one granularity over the labeled segments of `split`.
pub fn evaluate_granularity(
    ds: &Dataset,
    split: Split,
    gran: Granularity,
    videos: &[VideoScores],
) -> Result<GranularityMetrics> {
    let evaluated = collect(ds, split, gran, videos)?;
    let (preds, gts): (Vec<usize>, Vec<usize>) = evaluated
        .iter()
        .flat_map(|e| e.scores.assignment.iter().zip(&e.gts))
        .filter_map(|(&p, g)| g.map(|g| (p, g)))
        .unzip();
    let queries = i2v_queries(ds, split, gran, videos)?;
    Ok(GranularityMetrics {
        segments: preds.len(),
        top1: top1_accuracy(&preds, &gts)?,
        aie: average_index_error(&preds, &gts)?,
        i2v: summarize_retrieval(&queries),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub split: Split,
    pub method: AlignMethod,
    pub granularities: BTreeMap<Granularity, GranularityMetrics>,
}

const COLUMNS: [&str; 5] = ["top1", "aie", "r1", "r3", "auroc"];

impl EvaluationReport {
    fn cell(&self, metric: &str, gran: Granularity) -> Option<f64> {
        let m = self.granularities.get(&gran)?;
        match metric {
            "top1" => Some(m.top1),
            "aie" => Some(m.aie),
            "r1" => m.r1(),
            "r3" => m.r3(),
            "auroc" => m.auroc(),
            _ => unreachable!("unknown column"),
        }
    }

    fn cells(&self) -> Vec<(String, Option<f64>)> {
        let mut out = Vec::new();
        for metric in COLUMNS {
            for gran in Granularity::ALL {
                let tag = match gran {
                    Granularity::Step => "S",
                    Granularity::Page => "P",
                };
                out.push((format!("{metric}_{tag}"), self.cell(metric, gran)));
            }
        }
        out
    }

    /// Header and one row, metric-major with step before page.
    pub fn to_csv(&self) -> String {
        let cells = self.cells();
        let mut s = String::from("method");
        for (name, _) in &cells {
            s.push(',');
            s.push_str(name);
        }
        s.push('\n');
        s.push_str(self.method.as_str());
        for (_, v) in &cells {
            s.push(',');
            if let Some(v) = v {
                let _ = write!(s, "{v}");
            }
        }
        s.push('\n');
        s
    }

    pub fn to_table(&self) -> String {
        let cells = self.cells();
        let mut head = format!("{:<8}", "method");
        let mut row = format!("{:<8}", self.method.as_str());
        for (name, v) in &cells {
            let _ = write!(head, " {name:>9}");
            match v {
                Some(v) => {
                    let _ = write!(row, " {v:>9.3}");
                }
                None => {
                    let _ = write!(row, " {:>9}", "-");
                }
            }
        }
        format!("{head}\n{row}\n")
    }
}
