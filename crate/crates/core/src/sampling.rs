//! Segment and clip sampling, training batch construction and the greedy
//! dataset splitter.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Granularity, SegmentKey, Split, VideoRecord};
use crate::error::{Error, Result};
use crate::rng;

pub const SEGMENT_SECONDS: f64 = 10.0;
pub const CLIP_FRAMES: usize = 64;
pub const TEST_CLIPS: usize = 5;
pub const SLOW_FRAMES: usize = 8;
pub const FAST_FRAMES: usize = 32;

const TIME_EPS: f64 = 1e-9;

/// A segment interval produced by [`segment_action`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentSpan {
    pub t_start: f64,
    pub t_end: f64,
    /// Shorter than a full segment, or end-aligned over a residue.
    pub padded: bool,
}

/// Cuts an annotated action `[t0, t1)` into consecutive 10 s segments. A
/// residue shorter than 10 s becomes a final segment anchored at `t1`.
pub fn segment_action(t0: f64, t1: f64) -> Result<Vec<SegmentSpan>> {
    if !(t1 > t0) || !t0.is_finite() || !t1.is_finite() {
        return Err(Error::InvalidArgument(format!("action interval [{t0}, {t1}) is empty")));
    }
    let full = ((t1 - t0) / SEGMENT_SECONDS + TIME_EPS).floor() as usize;
    let mut out: Vec<SegmentSpan> = (0..full)
        .map(|k| SegmentSpan {
            t_start: t0 + k as f64 * SEGMENT_SECONDS,
            t_end: t0 + (k + 1) as f64 * SEGMENT_SECONDS,
            padded: false,
        })
        .collect();
    let covered = t0 + full as f64 * SEGMENT_SECONDS;
    if t1 - covered > TIME_EPS {
        out.push(SegmentSpan {
            t_start: (t1 - SEGMENT_SECONDS).max(t0),
            t_end: t1,
            padded: true,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleMode {
    Train,
    Val,
    Test,
}

/// A fixed-length frame window inside a segment, frames counted from the
/// segment start.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClipWindow {
    pub segment_id: String,
    pub frame_start: usize,
    pub frame_len: usize,
    pub fps: u32,
}

impl ClipWindow {
    /// Frame indices covered by the window. Indices past the last frame of
    /// the segment repeat that last frame.
    pub fn frame_indices(&self, segment_frames: usize) -> Vec<usize> {
        let last = segment_frames.saturating_sub(1);
        (self.frame_start..self.frame_start + self.frame_len)
            .map(|f| f.min(last))
            .collect()
    }

    pub fn clip_id(&self) -> String {
        crate::data::clip_id(&self.segment_id, self.frame_start)
    }
}

/// `n` uniformly spaced offsets into a window of `len` frames.
pub fn uniform_subsample(len: usize, n: usize) -> Vec<usize> {
    (0..n).map(|k| k * len / n).collect()
}

/// Offsets for the slow (8 frame) and fast (32 frame) video pathways.
pub fn slow_fast_offsets() -> (Vec<usize>, Vec<usize>) {
    (
        uniform_subsample(CLIP_FRAMES, SLOW_FRAMES),
        uniform_subsample(CLIP_FRAMES, FAST_FRAMES),
    )
}

/// Window starts used at test time for a segment of `segment_frames`.
pub fn test_window_starts(segment_frames: usize) -> Vec<usize> {
    let span = segment_frames.saturating_sub(CLIP_FRAMES) as f64;
    (0..TEST_CLIPS)
        .map(|k| (k as f64 * span / (TEST_CLIPS - 1) as f64).round() as usize)
        .collect()
}

/// Clip windows for a segment: one seeded random window when training, the
/// first window for validation, five evenly spaced windows for testing.
pub fn sample_clips(segment_id: &str, segment_frames: usize, mode: SampleMode, seed: u64) -> Vec<ClipWindow> {
    let window = |frame_start| ClipWindow {
        segment_id: segment_id.to_string(),
        frame_start,
        frame_len: CLIP_FRAMES,
        fps: crate::data::CANONICAL_FPS as u32,
    };
    match mode {
        SampleMode::Train => {
            let max_start = segment_frames.saturating_sub(CLIP_FRAMES);
            let mut r = rng::rng(rng::mix_str(seed, segment_id));
            vec![window(r.random_range(0..=max_start))]
        }
        SampleMode::Val => vec![window(0)],
        SampleMode::Test => test_window_starts(segment_frames).into_iter().map(window).collect(),
    }
}

// ---- training batches ----

#[derive(Debug, Clone, PartialEq)]
pub struct PairItem {
    pub segment: SegmentKey,
    pub clip: ClipWindow,
    /// Index into `Dataset::manuals`.
    pub manual: usize,
    /// 1-based ground-truth diagram index.
    pub diagram: usize,
}

/// Clip/diagram pairs drawn across the whole training split.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    pub granularity: Granularity,
    pub items: Vec<PairItem>,
}

impl PairBatch {
    /// Whether some diagram is the positive of more than one clip.
    pub fn many_to_one(&self) -> bool {
        let mut seen = BTreeSet::new();
        self.items.iter().any(|it| !seen.insert((it.manual, it.diagram)))
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManualClip {
    pub segment: SegmentKey,
    pub clip: ClipWindow,
    /// Slot into `ManualBatch::manuals`.
    pub manual_slot: usize,
    /// 1-based ground-truth diagram index within the manual.
    pub positive: usize,
}

/// Clips with the full diagram list of their own manual. Each distinct
/// manual is stored once; clips refer to it by slot.
#[derive(Debug, Clone, PartialEq)]
pub struct ManualBatch {
    pub granularity: Granularity,
    pub clips: Vec<ManualClip>,
    /// Distinct manual indices in order of first appearance.
    pub manuals: Vec<usize>,
}

impl ManualBatch {
    pub fn manual_len(&self, ds: &Dataset, clip: usize) -> usize {
        ds.manuals[self.manuals[self.clips[clip].manual_slot]]
            .diagrams(self.granularity)
            .len()
    }

    /// Diagram ids held once per distinct manual.
    pub fn diagram_storage<'a>(&self, ds: &'a Dataset) -> Vec<&'a str> {
        self.manuals
            .iter()
            .flat_map(|&m| ds.manuals[m].diagrams(self.granularity))
            .map(|d| d.diagram_id.as_str())
            .collect()
    }

    /// The ordered diagram ids a clip is classified against.
    pub fn view<'a>(&self, ds: &'a Dataset, clip: usize) -> Vec<&'a str> {
        ds.manuals[self.manuals[self.clips[clip].manual_slot]]
            .diagrams(self.granularity)
            .iter()
            .map(|d| d.diagram_id.as_str())
            .collect()
    }
}

fn labeled_training_segments(ds: &Dataset, granularity: Granularity) -> Result<Vec<SegmentKey>> {
    let keys = ds.segments_in(Split::Train, Some(granularity));
    if keys.is_empty() {
        return Err(Error::InvalidDataset(format!(
            "no labeled {granularity} segments in the training split"
        )));
    }
    Ok(keys)
}

fn manual_position(ds: &Dataset, key: SegmentKey) -> usize {
    let id = &ds.videos[key.video].manual_id;
    ds.manuals
        .iter()
        .position(|m| &m.manual_id == id)
        .expect("manual resolved at load")
}

fn draw_clips(ds: &Dataset, granularity: Granularity, size: usize, seed: u64) -> Result<Vec<(SegmentKey, ClipWindow)>> {
    let pool = labeled_training_segments(ds, granularity)?;
    let mut r = rng::rng(rng::mix(seed, 0xBA7C));
    Ok((0..size)
        .map(|b| {
            let key = pool[r.random_range(0..pool.len())];
            let video = &ds.videos[key.video];
            let seg = ds.segment(key);
            let clip = sample_clips(
                &seg.segment_id,
                seg.frame_count(video.fps),
                SampleMode::Train,
                rng::mix(seed, b as u64),
            )
            .remove(0);
            (key, clip)
        })
        .collect())
}

/// Draws `size` labeled training clips uniformly with replacement and pairs
/// each with its ground-truth diagram.
pub fn build_pair_batch(ds: &Dataset, granularity: Granularity, size: usize, seed: u64) -> Result<PairBatch> {
    let mut manual_cache: HashMap<usize, usize> = HashMap::new();
    let items = draw_clips(ds, granularity, size, seed)?
        .into_iter()
        .map(|(segment, clip)| {
            let manual = *manual_cache
                .entry(segment.video)
                .or_insert_with(|| manual_position(ds, segment));
            let diagram = ds.segment(segment).gt(granularity).expect("labeled");
            PairItem {
                segment,
                clip,
                manual,
                diagram,
            }
        })
        .collect();
    Ok(PairBatch { granularity, items })
}

/// Draws `size` labeled training clips and attaches each clip's full manual.
pub fn build_manual_batch(ds: &Dataset, granularity: Granularity, size: usize, seed: u64) -> Result<ManualBatch> {
    let mut manuals = Vec::new();
    let mut slot_of: HashMap<usize, usize> = HashMap::new();
    let clips = draw_clips(ds, granularity, size, seed)?
        .into_iter()
        .map(|(segment, clip)| {
            let manual = manual_position(ds, segment);
            let manual_slot = *slot_of.entry(manual).or_insert_with(|| {
                manuals.push(manual);
                manuals.len() - 1
            });
            ManualClip {
                segment,
                clip,
                manual_slot,
                positive: ds.segment(segment).gt(granularity).expect("labeled"),
            }
        })
        .collect();
    Ok(ManualBatch {
        granularity,
        clips,
        manuals,
    })
}

// ---- dataset splitting ----

/// Train/val/test segment totals of the reference dataset split.
pub const REFERENCE_SPLIT_SEGMENTS: [f64; 3] = [30_876.0, 6_871.0, 11_103.0];

/// [`REFERENCE_SPLIT_SEGMENTS`] as fractions.
pub fn reference_split_ratios() -> [f64; 3] {
    let total: f64 = REFERENCE_SPLIT_SEGMENTS.iter().sum();
    REFERENCE_SPLIT_SEGMENTS.map(|s| s / total)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitAssignment {
    pub assignment: BTreeMap<String, Split>,
    /// Attribute key to value, per video.
    pub attributes: BTreeMap<String, BTreeMap<String, String>>,
}

impl SplitAssignment {
    pub fn split_lists(&self) -> BTreeMap<Split, Vec<String>> {
        let mut out: BTreeMap<Split, Vec<String>> = Split::ALL.into_iter().map(|s| (s, Vec::new())).collect();
        for (video, split) in &self.assignment {
            out.get_mut(split).expect("all splits present").push(video.clone());
        }
        out
    }
}

/// Per-split segment totals and attribute histograms while assigning.
struct SplitTally<'a> {
    ratios: [f64; 3],
    total_segments: f64,
    total_videos: f64,
    segments: [f64; 3],
    /// (attribute, value) -> per-split video counts
    hist: BTreeMap<(&'a str, &'a str), [f64; 3]>,
    /// (attribute, value) -> total video count
    hist_total: BTreeMap<(&'a str, &'a str), f64>,
}

impl SplitTally<'_> {
    fn objective(&self) -> f64 {
        let seg: f64 = (0..3)
            .map(|s| (self.segments[s] - self.ratios[s] * self.total_segments).abs())
            .sum::<f64>()
            / self.total_segments.max(1.0);
        let attr: f64 = self
            .hist
            .iter()
            .map(|(k, counts)| {
                let total = self.hist_total[k];
                (0..3).map(|s| (counts[s] - self.ratios[s] * total).abs()).sum::<f64>()
            })
            .sum::<f64>()
            / self.total_videos.max(1.0);
        seg + attr
    }
}

/// Assigns whole videos to train/val/test. Videos are visited in
/// descending segment count; each goes to the split that minimizes the
/// segment-count deviation from the target ratios plus the L1 deviation of
/// every attribute histogram, ties going to the earlier split. The seed
/// only orders videos of equal segment count.
pub fn split_dataset(videos: &[VideoRecord], ratios: [f64; 3], seed: u64) -> Result<SplitAssignment> {
    if ratios.iter().any(|r| !(*r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidArgument(format!(
            "split ratios {ratios:?} must be non-negative and sum to 1"
        )));
    }
    let keys: BTreeSet<&str> = videos
        .iter()
        .flat_map(|v| v.attributes.keys().map(String::as_str))
        .collect();
    let attr_of = |v: &'_ VideoRecord, k: &str| -> String {
        v.attributes.get(k).cloned().unwrap_or_else(|| "unknown".to_string())
    };
    let attributes: BTreeMap<String, BTreeMap<String, String>> = videos
        .iter()
        .map(|v| {
            let attrs = keys.iter().map(|&k| (k.to_string(), attr_of(v, k))).collect();
            (v.video_id.clone(), attrs)
        })
        .collect();

    let mut tally = SplitTally {
        ratios,
        total_segments: videos.iter().map(|v| v.segments.len() as f64).sum(),
        total_videos: (videos.len() * keys.len().max(1)) as f64,
        segments: [0.0; 3],
        hist: BTreeMap::new(),
        hist_total: BTreeMap::new(),
    };
    for attrs in attributes.values() {
        for (k, v) in attrs {
            let key = (k.as_str(), v.as_str());
            *tally.hist_total.entry(key).or_default() += 1.0;
            tally.hist.entry(key).or_insert([0.0; 3]);
        }
    }

    let mut order: Vec<usize> = (0..videos.len()).collect();
    order.shuffle(&mut rng::rng(rng::mix(seed, 0x5B117)));
    order.sort_by_key(|&i| std::cmp::Reverse(videos[i].segments.len()));

    let mut assignment = BTreeMap::new();
    for i in order {
        let v = &videos[i];
        let n = v.segments.len() as f64;
        let attrs = &attributes[&v.video_id];
        let mut best: Option<(usize, f64)> = None;
        for s in 0..3 {
            tally.segments[s] += n;
            for (k, val) in attrs {
                tally.hist.get_mut(&(k.as_str(), val.as_str())).unwrap()[s] += 1.0;
            }
            let obj = tally.objective();
            tally.segments[s] -= n;
            for (k, val) in attrs {
                tally.hist.get_mut(&(k.as_str(), val.as_str())).unwrap()[s] -= 1.0;
            }
            if best.is_none_or(|(_, b)| obj < b - 1e-12) {
                best = Some((s, obj));
            }
        }
        let (s, _) = best.expect("three candidate splits");
        tally.segments[s] += n;
        for (k, val) in attrs {
            tally.hist.get_mut(&(k.as_str(), val.as_str())).unwrap()[s] += 1.0;
        }
        assignment.insert(v.video_id.clone(), Split::ALL[s]);
    }
    Ok(SplitAssignment { assignment, attributes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Segment;

    fn spans(t0: f64, t1: f64) -> Vec<(f64, f64, bool)> {
        segment_action(t0, t1)
            .unwrap()
            .into_iter()
            .map(|s| (s.t_start, s.t_end, s.padded))
            .collect()
    }

    #[test]
    fn segmenting_actions() {
        assert_eq!(spans(0.0, 20.0), vec![(0.0, 10.0, false), (10.0, 20.0, false)]);
        assert_eq!(
            spans(0.0, 23.0),
            vec![(0.0, 10.0, false), (10.0, 20.0, false), (13.0, 23.0, true)]
        );
        assert_eq!(spans(0.0, 7.0), vec![(0.0, 7.0, true)]);
        assert_eq!(spans(5.0, 12.0), vec![(5.0, 12.0, true)]);
        assert!(segment_action(3.0, 3.0).is_err());
        assert!(segment_action(4.0, 3.0).is_err());
    }

    #[test]
    fn short_segment_window_is_back_padded() {
        // 7 s at 30 fps = 210 frames; a window starting at 180 repeats frame 209.
        let w = ClipWindow {
            segment_id: "s".into(),
            frame_start: 180,
            frame_len: CLIP_FRAMES,
            fps: 30,
        };
        let idx = w.frame_indices(210);
        assert_eq!(idx.len(), CLIP_FRAMES);
        assert_eq!(idx[29], 209);
        assert!(idx[30..].iter().all(|&f| f == 209));
    }

    #[test]
    fn test_windows_evenly_spaced() {
        let starts: Vec<usize> = sample_clips("s", 300, SampleMode::Test, 0)
            .iter()
            .map(|w| w.frame_start)
            .collect();
        let oracle: Vec<usize> = (0..5)
            .map(|k| (k as f64 * (300.0 - 64.0) / 4.0).round() as usize)
            .collect();
        assert_eq!(starts, oracle);
        assert_eq!(starts, vec![0, 59, 118, 177, 236]);
    }

    #[test]
    fn val_window_is_first_and_train_is_seeded() {
        for seed in 0..20 {
            assert_eq!(sample_clips("s", 300, SampleMode::Val, seed)[0].frame_start, 0);
        }
        let a = sample_clips("s", 300, SampleMode::Train, 42);
        let b = sample_clips("s", 300, SampleMode::Train, 42);
        assert_eq!(a, b);
        assert_eq!(a.len(), 1);
        assert!(a[0].frame_start <= 300 - 64);
        let distinct: BTreeSet<usize> = (0..50)
            .map(|s| sample_clips("s", 300, SampleMode::Train, s)[0].frame_start)
            .collect();
        assert!(distinct.len() > 10);
        // Shorter than one clip: the only window starts at 0.
        assert_eq!(sample_clips("s", 40, SampleMode::Train, 3)[0].frame_start, 0);
    }

    #[test]
    fn slow_fast_offsets_increasing() {
        let (slow, fast) = slow_fast_offsets();
        assert_eq!(slow, vec![0, 8, 16, 24, 32, 40, 48, 56]);
        assert_eq!(fast.len(), 32);
        assert!(fast.windows(2).all(|w| w[0] < w[1]));
        assert!(*fast.last().unwrap() < CLIP_FRAMES);
    }

    fn video(id: &str, segments: usize, attrs: &[(&str, &str)]) -> VideoRecord {
        VideoRecord {
            video_id: id.into(),
            manual_id: "m".into(),
            duration: 10.0 * segments as f64,
            fps: 30.0,
            attributes: attrs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
            segments: (0..segments)
                .map(|k| Segment {
                    segment_id: format!("{id}-{k}"),
                    t_start: 10.0 * k as f64,
                    t_end: 10.0 * (k + 1) as f64,
                    gt_step_index: Some(1),
                    gt_page_index: None,
                })
                .collect(),
        }
    }

    #[test]
    fn identical_videos_split_six_two_two() {
        let videos: Vec<_> = (0..10).map(|i| video(&format!("v{i}"), 3, &[])).collect();
        let a = split_dataset(&videos, [0.6, 0.2, 0.2], 9).unwrap();
        let lists = a.split_lists();
        assert_eq!(lists[&Split::Train].len(), 6);
        assert_eq!(lists[&Split::Val].len(), 2);
        assert_eq!(lists[&Split::Test].len(), 2);
    }

    #[test]
    fn split_rejects_bad_ratios() {
        let videos = vec![video("a", 1, &[])];
        assert!(split_dataset(&videos, [0.5, 0.2, 0.2], 0).is_err());
        assert!(split_dataset(&videos, [1.2, -0.1, -0.1], 0).is_err());
    }
}
