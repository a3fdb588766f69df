//! Dataset model: manuals made of ordered step and page diagrams, and
//! videos made of labeled segments. The JSON manifest is the on-disk form.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::emb::EmbeddingTable;
use crate::error::{Error, Result};

pub const CANONICAL_FPS: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Step,
    Page,
}

impl Granularity {
    pub const ALL: [Granularity; 2] = [Granularity::Step, Granularity::Page];

    pub fn as_str(self) -> &'static str {
        match self {
            Granularity::Step => "step",
            Granularity::Page => "page",
        }
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "step" => Ok(Granularity::Step),
            "page" => Ok(Granularity::Page),
            other => Err(Error::InvalidArgument(format!(
                "unknown granularity `{other}` (expected step or page)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagramRef {
    pub diagram_id: String,
    pub manual_id: String,
    /// 1-based position within the manual.
    pub index: usize,
    pub granularity: Granularity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manual {
    pub manual_id: String,
    pub furniture_id: String,
    pub steps: Vec<DiagramRef>,
    pub pages: Vec<DiagramRef>,
}

impl Manual {
    pub fn diagrams(&self, granularity: Granularity) -> &[DiagramRef] {
        match granularity {
            Granularity::Step => &self.steps,
            Granularity::Page => &self.pages,
        }
    }

    /// Number of step diagrams.
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub segment_id: String,
    pub t_start: f64,
    pub t_end: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_step_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_page_index: Option<usize>,
}

impl Segment {
    pub fn gt(&self, granularity: Granularity) -> Option<usize> {
        match granularity {
            Granularity::Step => self.gt_step_index,
            Granularity::Page => self.gt_page_index,
        }
    }

    /// Whole frames covered by the segment at `fps`, at least one.
    pub fn frame_count(&self, fps: f64) -> usize {
        (((self.t_end - self.t_start) * fps).round() as usize).max(1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoRecord {
    pub video_id: String,
    pub manual_id: String,
    pub duration: f64,
    pub fps: f64,
    pub attributes: BTreeMap<String, String>,
    pub segments: Vec<Segment>,
}

/// Id of the clip embedding for the window of `segment_id` starting at
/// frame `frame_start`.
pub fn clip_id(segment_id: &str, frame_start: usize) -> String {
    format!("{segment_id}@{frame_start}")
}

/// Inverse of [`clip_id`].
pub fn parse_clip_id(id: &str) -> Option<(&str, usize)> {
    let (seg, start) = id.rsplit_once('@')?;
    Some((seg, start.parse().ok()?))
}

/// Locates a segment inside a [`Dataset`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SegmentKey {
    pub video: usize,
    pub segment: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manuals: Vec<Manual>,
    pub videos: Vec<VideoRecord>,
    /// Split name to member video ids, as listed in the manifest.
    pub splits: BTreeMap<Split, Vec<String>>,
    manual_index: HashMap<String, usize>,
    video_index: HashMap<String, usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct DatasetSummary {
    pub furniture: usize,
    pub manuals: usize,
    pub steps: usize,
    pub pages: usize,
    pub videos: usize,
    pub segments: usize,
    pub labeled_segments: usize,
}

impl Dataset {
    /// Builds and cross-checks a dataset.
    pub fn new(manuals: Vec<Manual>, videos: Vec<VideoRecord>, splits: BTreeMap<Split, Vec<String>>) -> Result<Self> {
        let mut manual_index = HashMap::new();
        let mut diagram_ids = HashSet::new();
        for (i, m) in manuals.iter().enumerate() {
            if manual_index.insert(m.manual_id.clone(), i).is_some() {
                return Err(Error::DuplicateId(m.manual_id.clone()));
            }
            if m.steps.is_empty() {
                return Err(Error::InvalidDataset(format!("manual `{}` has no steps", m.manual_id)));
            }
            for (what, list, gran) in [
                ("step", &m.steps, Granularity::Step),
                ("page", &m.pages, Granularity::Page),
            ] {
                for (pos, d) in list.iter().enumerate() {
                    if d.index != pos + 1 {
                        return Err(Error::NonContiguousIndex {
                            manual: m.manual_id.clone(),
                            what,
                            found: d.index,
                            position: pos + 1,
                        });
                    }
                    if d.manual_id != m.manual_id || d.granularity != gran {
                        return Err(Error::InvalidDataset(format!(
                            "diagram `{}` is not a {what} of manual `{}`",
                            d.diagram_id, m.manual_id
                        )));
                    }
                    if !diagram_ids.insert(d.diagram_id.clone()) {
                        return Err(Error::DuplicateId(d.diagram_id.clone()));
                    }
                }
            }
        }

        let mut video_index = HashMap::new();
        let mut segment_ids = HashSet::new();
        for (i, v) in videos.iter().enumerate() {
            if video_index.insert(v.video_id.clone(), i).is_some() {
                return Err(Error::DuplicateId(v.video_id.clone()));
            }
            let manual = manual_index
                .get(&v.manual_id)
                .map(|&k| &manuals[k])
                .ok_or_else(|| Error::UnknownManual(v.manual_id.clone()))?;
            if !(v.duration > 0.0 && v.duration.is_finite()) {
                return Err(Error::InvalidDataset(format!(
                    "video `{}` has non-positive duration",
                    v.video_id
                )));
            }
            if !(v.fps > 0.0 && v.fps.is_finite()) {
                return Err(Error::InvalidDataset(format!(
                    "video `{}` has non-positive fps",
                    v.video_id
                )));
            }
            for s in &v.segments {
                if !segment_ids.insert(s.segment_id.clone()) {
                    return Err(Error::DuplicateId(s.segment_id.clone()));
                }
                if !(0.0 <= s.t_start && s.t_start < s.t_end && s.t_end <= v.duration) {
                    return Err(Error::InvalidDataset(format!(
                        "segment `{}` [{}, {}) lies outside [0, {}] of video `{}`",
                        s.segment_id, s.t_start, s.t_end, v.duration, v.video_id
                    )));
                }
                if let Some(j) = s.gt_step_index {
                    if j == 0 || j > manual.steps.len() {
                        return Err(Error::InvalidDataset(format!(
                            "segment `{}`: step index {j} outside 1..={}",
                            s.segment_id,
                            manual.steps.len()
                        )));
                    }
                }
                if let Some(j) = s.gt_page_index {
                    if j == 0 || j > manual.pages.len() {
                        return Err(Error::InvalidDataset(format!(
                            "segment `{}`: page index {j} outside 1..={}",
                            s.segment_id,
                            manual.pages.len()
                        )));
                    }
                }
            }
        }

        for (split, ids) in &splits {
            for id in ids {
                if !video_index.contains_key(id) {
                    return Err(Error::InvalidDataset(format!(
                        "split `{split}` lists unknown video `{id}`"
                    )));
                }
            }
        }

        Ok(Self {
            manuals,
            videos,
            splits,
            manual_index,
            video_index,
        })
    }

    pub fn manual(&self, manual_id: &str) -> Option<&Manual> {
        self.manual_index.get(manual_id).map(|&i| &self.manuals[i])
    }

    pub fn video(&self, video_id: &str) -> Option<&VideoRecord> {
        self.video_index.get(video_id).map(|&i| &self.videos[i])
    }

    pub fn video_position(&self, video_id: &str) -> Option<usize> {
        self.video_index.get(video_id).copied()
    }

    pub fn manual_of(&self, video: &VideoRecord) -> &Manual {
        // Resolved at construction.
        self.manual(&video.manual_id).expect("video manual resolved")
    }

    pub fn segment(&self, key: SegmentKey) -> &Segment {
        &self.videos[key.video].segments[key.segment]
    }

    pub fn find_segment(&self, segment_id: &str) -> Option<SegmentKey> {
        self.segment_keys().find(|&k| self.segment(k).segment_id == segment_id)
    }

    pub fn segment_keys(&self) -> impl Iterator<Item = SegmentKey> + '_ {
        self.videos
            .iter()
            .enumerate()
            .flat_map(|(vi, v)| (0..v.segments.len()).map(move |si| SegmentKey { video: vi, segment: si }))
    }

    /// First split listing the video.
    pub fn split_of(&self, video_id: &str) -> Option<Split> {
        Split::ALL
            .into_iter()
            .find(|s| self.splits.get(s).is_some_and(|ids| ids.iter().any(|i| i == video_id)))
    }

    /// Videos of a split in manifest video order. Without any split lists,
    /// every video belongs to every split.
    pub fn videos_in(&self, split: Split) -> Vec<usize> {
        if self.splits.values().all(Vec::is_empty) {
            return (0..self.videos.len()).collect();
        }
        (0..self.videos.len())
            .filter(|&i| self.split_of(&self.videos[i].video_id) == Some(split))
            .collect()
    }

    /// Segments of a split, optionally only those labeled at `granularity`.
    pub fn segments_in(&self, split: Split, labeled: Option<Granularity>) -> Vec<SegmentKey> {
        self.videos_in(split)
            .into_iter()
            .flat_map(|vi| {
                self.videos[vi]
                    .segments
                    .iter()
                    .enumerate()
                    .filter(move |(_, s)| labeled.is_none_or(|g| s.gt(g).is_some()))
                    .map(move |(si, _)| SegmentKey { video: vi, segment: si })
            })
            .collect()
    }

    pub fn summary(&self) -> DatasetSummary {
        let furniture: HashSet<&str> = self.manuals.iter().map(|m| m.furniture_id.as_str()).collect();
        let segments = self.videos.iter().map(|v| v.segments.len()).sum();
        let labeled_segments = self
            .videos
            .iter()
            .flat_map(|v| &v.segments)
            .filter(|s| s.gt_step_index.is_some())
            .count();
        DatasetSummary {
            furniture: furniture.len(),
            manuals: self.manuals.len(),
            steps: self.manuals.iter().map(|m| m.steps.len()).sum(),
            pages: self.manuals.iter().map(|m| m.pages.len()).sum(),
            videos: self.videos.len(),
            segments,
            labeled_segments,
        }
    }

    /// Replaces the split lists.
    pub fn set_splits(&mut self, splits: BTreeMap<Split, Vec<String>>) -> Result<()> {
        for ids in splits.values() {
            for id in ids {
                if !self.video_index.contains_key(id) {
                    return Err(Error::UnknownId(id.clone()));
                }
            }
        }
        self.splits = splits;
        Ok(())
    }

    pub fn to_manifest(&self) -> Manifest {
        Manifest {
            manuals: self
                .manuals
                .iter()
                .map(|m| ManualEntry {
                    manual_id: m.manual_id.clone(),
                    furniture_id: m.furniture_id.clone(),
                    steps: m.steps.iter().map(DiagramEntry::from).collect(),
                    pages: m.pages.iter().map(DiagramEntry::from).collect(),
                })
                .collect(),
            videos: self
                .videos
                .iter()
                .map(|v| VideoEntry {
                    video_id: v.video_id.clone(),
                    manual_id: v.manual_id.clone(),
                    duration: v.duration,
                    fps: v.fps,
                    attributes: v.attributes.clone(),
                    segments: v.segments.clone(),
                })
                .collect(),
            splits: self.splits.clone(),
        }
    }
}

// ---- manifest wire format ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub manuals: Vec<ManualEntry>,
    pub videos: Vec<VideoEntry>,
    #[serde(default)]
    pub splits: BTreeMap<Split, Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManualEntry {
    pub manual_id: String,
    pub furniture_id: String,
    pub steps: Vec<DiagramEntry>,
    #[serde(default)]
    pub pages: Vec<DiagramEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagramEntry {
    pub diagram_id: String,
    pub index: usize,
}

impl From<&DiagramRef> for DiagramEntry {
    fn from(d: &DiagramRef) -> Self {
        Self {
            diagram_id: d.diagram_id.clone(),
            index: d.index,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoEntry {
    pub video_id: String,
    pub manual_id: String,
    pub duration: f64,
    #[serde(default = "default_fps")]
    pub fps: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub attributes: BTreeMap<String, String>,
    pub segments: Vec<Segment>,
}

fn default_fps() -> f64 {
    CANONICAL_FPS
}

impl Manifest {
    pub fn into_dataset(self) -> Result<Dataset> {
        let manuals = self
            .manuals
            .into_iter()
            .map(|m| {
                let refs = |list: Vec<DiagramEntry>, granularity| {
                    list.into_iter()
                        .map(|d| DiagramRef {
                            diagram_id: d.diagram_id,
                            manual_id: m.manual_id.clone(),
                            index: d.index,
                            granularity,
                        })
                        .collect()
                };
                Manual {
                    steps: refs(m.steps, Granularity::Step),
                    pages: refs(m.pages, Granularity::Page),
                    manual_id: m.manual_id,
                    furniture_id: m.furniture_id,
                }
            })
            .collect();
        let videos = self
            .videos
            .into_iter()
            .map(|v| VideoRecord {
                video_id: v.video_id,
                manual_id: v.manual_id,
                duration: v.duration,
                fps: v.fps,
                attributes: v.attributes,
                segments: v.segments,
            })
            .collect();
        Dataset::new(manuals, videos, self.splits)
    }
}

pub fn parse_manifest(json: &str) -> Result<Dataset> {
    let manifest: Manifest = serde_json::from_str(json)?;
    manifest.into_dataset()
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text)
}

pub fn manifest_json(ds: &Dataset) -> String {
    serde_json::to_string_pretty(&ds.to_manifest()).expect("manifest serializes")
}

pub fn save_manifest(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    crate::io::write_atomic(path, manifest_json(ds).as_bytes())
}

// ---- validation ----

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    /// Diagram or segment ids with no embedding.
    pub missing_embeddings: Vec<String>,
    pub dim_mismatches: Vec<String>,
    /// Videos listed in more than one split.
    pub leakage: Vec<String>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.missing_embeddings.is_empty() && self.dim_mismatches.is_empty() && self.leakage.is_empty()
    }

    pub fn problem_count(&self) -> usize {
        self.missing_embeddings.len() + self.dim_mismatches.len() + self.leakage.len()
    }
}

/// Embedding tables per modality, with optional expected raw widths.
#[derive(Debug, Clone, Copy)]
pub struct ModalityTables<'a> {
    pub diagrams: &'a EmbeddingTable,
    pub clips: &'a EmbeddingTable,
    pub expected_diagram_dim: Option<usize>,
    pub expected_clip_dim: Option<usize>,
}

impl<'a> ModalityTables<'a> {
    pub fn new(diagrams: &'a EmbeddingTable, clips: &'a EmbeddingTable) -> Self {
        Self {
            diagrams,
            clips,
            expected_diagram_dim: None,
            expected_clip_dim: None,
        }
    }
}

pub fn validate_dataset(ds: &Dataset, tables: ModalityTables<'_>) -> ValidationReport {
    let mut report = ValidationReport::default();

    for m in &ds.manuals {
        for d in m.steps.iter().chain(&m.pages) {
            if !tables.diagrams.contains(&d.diagram_id) {
                report.missing_embeddings.push(d.diagram_id.clone());
            }
        }
    }

    let covered: HashSet<&str> = tables
        .clips
        .ids()
        .filter_map(|id| parse_clip_id(id).map(|(seg, _)| seg))
        .collect();
    for v in &ds.videos {
        for s in &v.segments {
            if !covered.contains(s.segment_id.as_str()) {
                report.missing_embeddings.push(s.segment_id.clone());
            }
        }
    }

    for (name, table, expected) in [
        ("diagram", tables.diagrams, tables.expected_diagram_dim),
        ("clip", tables.clips, tables.expected_clip_dim),
    ] {
        if let Some(want) = expected {
            if table.dim() != want {
                report
                    .dim_mismatches
                    .push(format!("{name} table has dim {} but {want} was expected", table.dim()));
            }
        }
    }

    let mut seen: BTreeMap<&str, Split> = BTreeMap::new();
    for (&split, ids) in &ds.splits {
        for id in ids {
            match seen.get(id.as_str()) {
                Some(&first) if first != split => {
                    report
                        .leakage
                        .push(format!("video `{id}` is in both {first} and {split}"));
                }
                _ => {
                    seen.insert(id, split);
                }
            }
        }
    }
    report
}
