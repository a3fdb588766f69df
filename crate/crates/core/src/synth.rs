//! Synthetic manuals and videos with known ground truth.
//!
//! Each manual's step prototypes follow a random walk on the unit sphere
//! in which consecutive steps have cosine similarity `drift`. Diagram
//! features are the prototypes themselves (pages average their steps);
//! every clip window is its step's prototype plus isotropic Gaussian noise.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset, DiagramRef, Granularity, Manual, Segment, VideoRecord, CANONICAL_FPS};
use crate::emb::{write_embedding_table, EmbeddingTable};
use crate::error::{Error, Result};
use crate::features::l2_normalize;
use crate::rng;
use crate::sampling::{reference_split_ratios, split_dataset, test_window_starts, SEGMENT_SECONDS};

pub const MAX_STEPS: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_manuals: usize,
    /// Inclusive range of step diagrams per manual.
    pub steps: (usize, usize),
    /// Inclusive range of 10 s segments per step in each video.
    pub segments_per_step: (usize, usize),
    pub videos_per_manual: (usize, usize),
    /// Inclusive range of steps drawn on one page.
    pub steps_per_page: (usize, usize),
    pub raw_dim: usize,
    /// Norm of the expected noise vector relative to the unit prototype.
    pub sigma: f64,
    /// Cosine similarity of consecutive step prototypes.
    pub drift: f64,
    /// Probability that a video skips a step entirely.
    pub skip_prob: f64,
    /// Upper bound, in seconds, of the idle gaps between steps.
    pub jitter: f64,
    pub split_ratios: [f64; 3],
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_manuals: 20,
            steps: (4, 12),
            segments_per_step: (1, 3),
            videos_per_manual: (4, 8),
            steps_per_page: (1, 3),
            raw_dim: 64,
            sigma: 0.8,
            drift: 0.7,
            skip_prob: 0.0,
            jitter: 4.0,
            split_ratios: reference_split_ratios(),
            seed: 1,
        }
    }
}

fn check_range(name: &str, (lo, hi): (usize, usize), max: usize) -> Result<()> {
    if lo == 0 || lo > hi || hi > max {
        return Err(Error::Config(format!(
            "{name} range {lo}..{hi} must satisfy 1 <= lo <= hi <= {max}"
        )));
    }
    Ok(())
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_manuals == 0 {
            return Err(Error::Config("n_manuals must be positive".into()));
        }
        check_range("steps", self.steps, MAX_STEPS)?;
        check_range("segments_per_step", self.segments_per_step, usize::MAX)?;
        check_range("videos_per_manual", self.videos_per_manual, usize::MAX)?;
        check_range("steps_per_page", self.steps_per_page, usize::MAX)?;
        if self.raw_dim < 2 {
            return Err(Error::Config("raw_dim must be at least 2".into()));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!(
                "sigma must be finite and >= 0, got {}",
                self.sigma
            )));
        }
        if !(0.0..=1.0).contains(&self.drift) {
            return Err(Error::Config(format!("drift must lie in [0, 1], got {}", self.drift)));
        }
        if !(0.0..1.0).contains(&self.skip_prob) {
            return Err(Error::Config(format!(
                "skip_prob must lie in [0, 1), got {}",
                self.skip_prob
            )));
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return Err(Error::Config(format!(
                "jitter must be finite and >= 0, got {}",
                self.jitter
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub dataset: Dataset,
    /// Raw diagram features keyed by diagram id.
    pub diagrams: EmbeddingTable,
    /// Raw clip features keyed by clip id, five test windows per segment.
    pub clips: EmbeddingTable,
}

fn gaussian(r: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| r.sample(StandardNormal)).collect()
}

fn random_unit(r: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        if let Ok(v) = l2_normalize(&gaussian(r, dim)) {
            return v;
        }
    }
}

/// Unit vector with cosine `drift` to `prev`.
fn walk_step(r: &mut ChaCha8Rng, prev: &[f64], drift: f64) -> Vec<f64> {
    loop {
        let mut u = gaussian(r, prev.len());
        let along: f64 = u.iter().zip(prev).map(|(a, b)| a * b).sum();
        for (x, p) in u.iter_mut().zip(prev) {
            *x -= along * p;
        }
        if let Ok(u) = l2_normalize(&u) {
            let side = (1.0 - drift * drift).max(0.0).sqrt();
            let next: Vec<f64> = prev.iter().zip(&u).map(|(p, q)| drift * p + side * q).collect();
            return l2_normalize(&next).expect("unit combination");
        }
    }
}

/// Step prototypes of one manual.
pub fn prototypes(r: &mut ChaCha8Rng, steps: usize, dim: usize, drift: f64) -> Vec<Vec<f64>> {
    let mut out = vec![random_unit(r, dim)];
    while out.len() < steps {
        let next = walk_step(r, out.last().expect("non-empty"), drift);
        out.push(next);
    }
    out
}

fn noisy(r: &mut ChaCha8Rng, proto: &[f64], sigma: f64) -> Vec<f64> {
    let scale = sigma / (proto.len() as f64).sqrt();
    let v: Vec<f64> = proto
        .iter()
        .map(|p| p + scale * r.sample::<f64, _>(StandardNormal))
        .collect();
    l2_normalize(&v).unwrap_or_else(|_| proto.to_vec())
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let mut r = rng::rng(cfg.seed);
    let mut manuals = Vec::new();
    let mut videos = Vec::new();
    let mut diagrams = EmbeddingTable::new(cfg.raw_dim)?;
    let mut clips = EmbeddingTable::new(cfg.raw_dim)?;
    let categories = ["chair", "table", "shelf", "bed"];

    for mi in 0..cfg.n_manuals {
        let manual_id = format!("m{mi:03}");
        let m = r.random_range(cfg.steps.0..=cfg.steps.1);
        let protos = prototypes(&mut r, m, cfg.raw_dim, cfg.drift);

        let mut page_of = Vec::with_capacity(m);
        let mut page_members: Vec<Vec<usize>> = Vec::new();
        while page_of.len() < m {
            let take = r
                .random_range(cfg.steps_per_page.0..=cfg.steps_per_page.1)
                .min(m - page_of.len());
            let page = page_members.len();
            page_members.push((page_of.len()..page_of.len() + take).collect());
            page_of.extend(std::iter::repeat_n(page + 1, take));
        }

        let diagram_ref = |kind: &str, index: usize, granularity| DiagramRef {
            diagram_id: format!("{manual_id}_{kind}{index:02}"),
            manual_id: manual_id.clone(),
            index,
            granularity,
        };
        let steps: Vec<DiagramRef> = (1..=m).map(|j| diagram_ref("step", j, Granularity::Step)).collect();
        let pages: Vec<DiagramRef> = (1..=page_members.len())
            .map(|p| diagram_ref("page", p, Granularity::Page))
            .collect();
        for (d, proto) in steps.iter().zip(&protos) {
            diagrams.insert_f64(&d.diagram_id, proto)?;
        }
        for (d, members) in pages.iter().zip(&page_members) {
            let mut mean = vec![0.0; cfg.raw_dim];
            for &s in members {
                for (acc, x) in mean.iter_mut().zip(&protos[s]) {
                    *acc += x;
                }
            }
            diagrams.insert_f64(&d.diagram_id, &l2_normalize(&mean)?)?;
        }
        let category = categories[r.random_range(0..categories.len())];
        manuals.push(Manual {
            manual_id: manual_id.clone(),
            furniture_id: format!("f{mi:03}"),
            steps,
            pages,
        });

        let n_videos = r.random_range(cfg.videos_per_manual.0..=cfg.videos_per_manual.1);
        for vi in 0..n_videos {
            let video_id = format!("{manual_id}_v{vi}");
            let mut t = r.random_range(0.0..=cfg.jitter);
            let mut segments = Vec::new();
            for j in 0..m {
                if r.random_bool(cfg.skip_prob) {
                    continue;
                }
                let n_seg = r.random_range(cfg.segments_per_step.0..=cfg.segments_per_step.1);
                for _ in 0..n_seg {
                    let segment_id = format!("{video_id}_s{:03}", segments.len());
                    let seg = Segment {
                        segment_id: segment_id.clone(),
                        t_start: t,
                        t_end: t + SEGMENT_SECONDS,
                        gt_step_index: Some(j + 1),
                        gt_page_index: Some(page_of[j]),
                    };
                    t += SEGMENT_SECONDS;
                    for start in test_window_starts(seg.frame_count(CANONICAL_FPS)) {
                        clips.insert_f64(data::clip_id(&segment_id, start), &noisy(&mut r, &protos[j], cfg.sigma))?;
                    }
                    segments.push(seg);
                }
                t += r.random_range(0.0..=cfg.jitter);
            }
            if segments.is_empty() {
                // Keep every video non-empty: fall back to one segment of step 1.
                let segment_id = format!("{video_id}_s000");
                for start in test_window_starts((SEGMENT_SECONDS * CANONICAL_FPS) as usize) {
                    clips.insert_f64(data::clip_id(&segment_id, start), &noisy(&mut r, &protos[0], cfg.sigma))?;
                }
                segments.push(Segment {
                    segment_id,
                    t_start: t,
                    t_end: t + SEGMENT_SECONDS,
                    gt_step_index: Some(1),
                    gt_page_index: Some(1),
                });
                t += SEGMENT_SECONDS;
            }
            let duration = t + r.random_range(0.0..=cfg.jitter);
            let camera = if r.random_bool(0.5) { "fixed" } else { "handheld" };
            videos.push(VideoRecord {
                video_id,
                manual_id: manual_id.clone(),
                duration,
                fps: CANONICAL_FPS,
                attributes: BTreeMap::from([
                    ("category".to_string(), category.to_string()),
                    ("camera".to_string(), camera.to_string()),
                ]),
                segments,
            });
        }
    }

    let splits = split_dataset(&videos, cfg.split_ratios, rng::mix(cfg.seed, 0x5350_4c49))?.split_lists();
    let dataset = Dataset::new(manuals, videos, splits)?;
    Ok(SynthData {
        dataset,
        diagrams,
        clips,
    })
}

/// Output file locations of [`SynthData::write`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SynthPaths {
    pub manifest: PathBuf,
    pub diagrams: PathBuf,
    pub clips: PathBuf,
}

impl SynthPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            manifest: dir.join("manifest.json"),
            diagrams: dir.join("diagrams.emb"),
            clips: dir.join("clips.emb"),
        }
    }
}

impl SynthData {
    pub fn write(&self, dir: &Path) -> Result<SynthPaths> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let paths = SynthPaths::in_dir(dir);
        data::save_manifest(&self.dataset, &paths.manifest)?;
        write_embedding_table(&self.diagrams, &paths.diagrams)?;
        write_embedding_table(&self.clips, &paths.clips)?;
        Ok(paths)
    }
}
