//! Resolving raw embeddings into head inputs, and scoring whole splits.

use std::collections::{BTreeMap, HashMap};

use ndarray::Array2;
use rayon::prelude::*;

use crate::data::{Dataset, Granularity, Manual, SegmentKey, Split};
use crate::emb::EmbeddingTable;
use crate::error::{Error, Result};
use crate::features::{augment, progress_rate_diagram, progress_rate_video};
use crate::losses::Direction;
use crate::metrics::{self, EvaluationReport, RetrievalQuery, VideoScores};
use crate::model::{ManualInputs, PairInputs, Params};
use crate::sampling::{sample_clips, ManualBatch, PairBatch, SampleMode};
use crate::setmatch::{align, similarity_matrix, AlignConfig};

fn stack(rows: Vec<Vec<f64>>) -> Array2<f64> {
    let width = rows.first().map_or(0, Vec::len);
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Array2::from_shape_vec((flat.len() / width.max(1), width), flat).expect("rows of equal width")
}

/// Raw diagram and clip tables bound to a dataset.
#[derive(Debug)]
pub struct FeatureStore<'a> {
    pub dataset: &'a Dataset,
    pub diagrams: &'a EmbeddingTable,
    pub clips: &'a EmbeddingTable,
    pub use_sprf: bool,
    /// Available window starts per segment id, ascending.
    starts: HashMap<&'a str, Vec<usize>>,
}

impl<'a> FeatureStore<'a> {
    pub fn new(dataset: &'a Dataset, diagrams: &'a EmbeddingTable, clips: &'a EmbeddingTable, use_sprf: bool) -> Self {
        let mut starts: HashMap<&str, Vec<usize>> = HashMap::new();
        for id in clips.ids() {
            if let Some((seg, start)) = crate::data::parse_clip_id(id) {
                starts.entry(seg).or_default().push(start);
            }
        }
        for v in starts.values_mut() {
            v.sort_unstable();
        }
        Self {
            dataset,
            diagrams,
            clips,
            use_sprf,
            starts,
        }
    }

    /// Raw features of the stored window whose start is nearest to
    /// `frame_start`, the earlier one on ties.
    pub fn raw_clip(&self, segment_id: &str, frame_start: usize) -> Result<Vec<f64>> {
        let starts = self
            .starts
            .get(segment_id)
            .ok_or_else(|| Error::MissingEmbedding(format!("no clip windows for segment `{segment_id}`")))?;
        let nearest = *starts
            .iter()
            .min_by_key(|&&s| (s.abs_diff(frame_start), s))
            .expect("non-empty");
        let id = crate::data::clip_id(segment_id, nearest);
        Ok(self.clips.get_f64(&id).expect("indexed from the table"))
    }

    fn video_rate(&self, key: SegmentKey) -> Result<Option<crate::features::ProgressRate>> {
        if !self.use_sprf {
            return Ok(None);
        }
        let video = &self.dataset.videos[key.video];
        let seg = self.dataset.segment(key);
        progress_rate_video(seg.t_start, seg.t_end, video.duration).map(Some)
    }

    pub fn clip_input(&self, key: SegmentKey, frame_start: usize) -> Result<Vec<f64>> {
        let seg = self.dataset.segment(key);
        augment(&self.raw_clip(&seg.segment_id, frame_start)?, self.video_rate(key)?)
    }

    /// Mean raw feature over the windows `mode` samples, augmented with the
    /// segment's progress rate.
    pub fn segment_input(&self, key: SegmentKey, mode: SampleMode) -> Result<Vec<f64>> {
        let video = &self.dataset.videos[key.video];
        let seg = self.dataset.segment(key);
        let windows = sample_clips(&seg.segment_id, seg.frame_count(video.fps), mode, 0);
        let mut mean = vec![0.0; self.clips.dim()];
        for w in &windows {
            for (acc, x) in mean.iter_mut().zip(self.raw_clip(&seg.segment_id, w.frame_start)?) {
                *acc += x;
            }
        }
        for x in &mut mean {
            *x /= windows.len() as f64;
        }
        augment(&mean, self.video_rate(key)?)
    }

    /// Head input of diagram `j` (1-based) of a manual.
    pub fn diagram_input(&self, manual: &Manual, granularity: Granularity, j: usize) -> Result<Vec<f64>> {
        let list = manual.diagrams(granularity);
        let d = &list[j - 1];
        let raw = self
            .diagrams
            .get_f64(&d.diagram_id)
            .ok_or_else(|| Error::MissingEmbedding(d.diagram_id.clone()))?;
        let rate = if self.use_sprf {
            Some(progress_rate_diagram(j, list.len())?)
        } else {
            None
        };
        augment(&raw, rate)
    }

    /// Head inputs of every diagram of a manual, in order.
    pub fn manual_block(&self, manual: &Manual, granularity: Granularity) -> Result<Array2<f64>> {
        let rows = (1..=manual.diagrams(granularity).len())
            .map(|j| self.diagram_input(manual, granularity, j))
            .collect::<Result<Vec<_>>>()?;
        Ok(stack(rows))
    }

    pub fn pair_inputs(&self, batch: &PairBatch) -> Result<PairInputs> {
        let mut clips = Vec::with_capacity(batch.len());
        let mut diagrams = Vec::with_capacity(batch.len());
        let mut groups = Vec::with_capacity(batch.len());
        for it in &batch.items {
            clips.push(self.clip_input(it.segment, it.clip.frame_start)?);
            let manual = &self.dataset.manuals[it.manual];
            diagrams.push(self.diagram_input(manual, batch.granularity, it.diagram)?);
            groups.push((it.manual, it.diagram));
        }
        Ok(PairInputs {
            clips: stack(clips),
            diagrams: stack(diagrams),
            groups,
        })
    }

    pub fn manual_inputs(&self, batch: &ManualBatch) -> Result<ManualInputs> {
        let clips = batch
            .clips
            .iter()
            .map(|c| self.clip_input(c.segment, c.clip.frame_start))
            .collect::<Result<Vec<_>>>()?;
        let blocks = batch
            .manuals
            .iter()
            .map(|&m| self.manual_block(&self.dataset.manuals[m], batch.granularity))
            .collect::<Result<Vec<_>>>()?;
        Ok(ManualInputs {
            clips: stack(clips),
            blocks,
            slots: batch.clips.iter().map(|c| c.manual_slot).collect(),
            positives: batch.clips.iter().map(|c| c.positive - 1).collect(),
        })
    }
}

/// How held-out segments are featurized for a split.
pub fn eval_mode(split: Split) -> SampleMode {
    match split {
        Split::Test => SampleMode::Test,
        Split::Train | Split::Val => SampleMode::Val,
    }
}

/// A split scored under one granularity and alignment method.
#[derive(Debug, Clone)]
pub struct ScoredSplit {
    pub split: Split,
    pub granularity: Granularity,
    pub videos: Vec<VideoScores>,
    /// Similarity matrices before post-processing, in `videos` order.
    pub similarities: Vec<Array2<f64>>,
    /// Videos whose Sinkhorn iterations stopped at the cap.
    pub non_converged: Vec<String>,
    /// Videos whose similarity matrix was constant.
    pub degenerate: Vec<String>,
}

/// Projects held-out segments and diagrams with trained heads and aligns
/// each video to its manual.
pub struct Scorer<'s, 'a> {
    pub store: &'s FeatureStore<'a>,
    pub params: &'s Params,
}

impl Scorer<'_, '_> {
    /// Unit embeddings of all of a video's segments, in temporal order.
    /// Unlabeled segments are kept so that alignment sees the whole video
    /// and retrieval pools contain them as negatives.
    pub fn embed_segments(
        &self,
        video: usize,
        mode: SampleMode,
    ) -> Result<(Vec<String>, Array2<f64>)> {
        let ds = self.store.dataset;
        let mut ids = Vec::new();
        let mut rows = Vec::new();
        for (s, seg) in ds.videos[video].segments.iter().enumerate() {
            ids.push(seg.segment_id.clone());
            rows.push(self.store.segment_input(SegmentKey { video, segment: s }, mode)?);
        }
        if rows.is_empty() {
            return Ok((ids, Array2::zeros((0, self.params.video.output_dim()))));
        }
        let y = self.params.video.forward(stack(rows).view())?.y;
        Ok((ids, y))
    }

    pub fn embed_manual(&self, manual: &Manual, granularity: Granularity) -> Result<Array2<f64>> {
        let block = self.store.manual_block(manual, granularity)?;
        Ok(self.params.diagram.forward(block.view())?.y)
    }

    pub fn score_split(&self, split: Split, granularity: Granularity, cfg: &AlignConfig) -> Result<ScoredSplit> {
        let ds = self.store.dataset;
        let mode = eval_mode(split);
        // Per video: scores, similarity matrix, converged, degenerate cost.
        type Scored = (VideoScores, Array2<f64>, bool, bool);
        let results: Vec<Option<Scored>> = ds
            .videos_in(split)
            .into_par_iter()
            .map(|vi| -> Result<_> {
                let (ids, seg_emb) = self.embed_segments(vi, mode)?;
                if ids.is_empty() {
                    return Ok(None);
                }
                let video = &ds.videos[vi];
                let diag_emb = self.embed_manual(ds.manual_of(video), granularity)?;
                let s = similarity_matrix(seg_emb.view(), diag_emb.view())?;
                let out = align(&s, cfg)?;
                let converged = out.converged();
                Ok(Some((
                    VideoScores {
                        video_id: video.video_id.clone(),
                        segments: ids,
                        assignment: out.assignment,
                        scores: out.scores,
                    },
                    s,
                    converged,
                    out.degenerate_cost,
                )))
            })
            .collect::<Result<_>>()?;
        let mut scored = ScoredSplit {
            split,
            granularity,
            videos: Vec::new(),
            similarities: Vec::new(),
            non_converged: Vec::new(),
            degenerate: Vec::new(),
        };
        for (vs, s, converged, degenerate) in results.into_iter().flatten() {
            if !converged {
                scored.non_converged.push(vs.video_id.clone());
            }
            if degenerate {
                scored.degenerate.push(vs.video_id.clone());
            }
            scored.videos.push(vs);
            scored.similarities.push(s);
        }
        Ok(scored)
    }

    /// Scores and evaluates `split` at each requested granularity.
    pub fn evaluate(
        &self,
        split: Split,
        granularities: &[Granularity],
        cfg: &AlignConfig,
    ) -> Result<(EvaluationReport, Vec<ScoredSplit>)> {
        let mut report = EvaluationReport {
            split,
            method: cfg.method,
            granularities: BTreeMap::new(),
        };
        let mut scored = Vec::new();
        for &g in granularities {
            let s = self.score_split(split, g, cfg)?;
            let m = metrics::evaluate_granularity(self.store.dataset, split, g, &s.videos)?;
            report.granularities.insert(g, m);
            scored.push(s);
        }
        Ok((report, scored))
    }

    /// A single ranked query: a segment id against its manual's diagrams
    /// (V2I) or a diagram id against the split's segments of videos for
    /// its manual (I2V).
    pub fn query(
        &self,
        split: Split,
        granularity: Granularity,
        cfg: &AlignConfig,
        id: &str,
        direction: Direction,
    ) -> Result<RetrievalQuery> {
        let ds = self.store.dataset;
        let scored = self.score_split(split, granularity, cfg)?;
        match direction {
            Direction::V2I => {
                for vs in &scored.videos {
                    if let Some(row) = vs.segments.iter().position(|s| s == id) {
                        let video = ds.video(&vs.video_id).expect("scored video exists");
                        let manual = ds.manual_of(video);
                        let diagrams = manual.diagrams(granularity);
                        let key = ds.find_segment(id).expect("scored segment exists");
                        let positives = ds
                            .segment(key)
                            .gt(granularity)
                            .map(|gt| diagrams[gt - 1].diagram_id.clone())
                            .into_iter()
                            .collect();
                        return RetrievalQuery::new(
                            direction,
                            id,
                            diagrams.iter().map(|d| d.diagram_id.clone()).collect(),
                            vs.scores.row(row).to_vec(),
                            positives,
                        );
                    }
                }
                log::warn!("no segment `{id}` in the {split} split");
                Err(Error::UnknownId(id.to_string()))
            }
            Direction::I2V => metrics::i2v_queries(ds, split, granularity, &scored.videos)?
                .into_iter()
                .find(|q| q.query == id)
                .ok_or_else(|| {
                    log::warn!("no {granularity} diagram `{id}` with videos in the {split} split");
                    Error::UnknownId(id.to_string())
                }),
        }
    }
}
