use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use stepalign::data::{Granularity, Segment, Split, VideoRecord};
use stepalign::sampling::{
    build_manual_batch, build_pair_batch, reference_split_ratios, sample_clips, segment_action, slow_fast_offsets,
    split_dataset, SampleMode, CLIP_FRAMES, REFERENCE_SPLIT_SEGMENTS,
};
use stepalign::synth::{generate, SynthConfig};

fn video(id: &str, segments: usize, attrs: &[(&str, &str)]) -> VideoRecord {
    VideoRecord {
        video_id: id.to_string(),
        manual_id: "m".to_string(),
        duration: 10.0 * segments as f64 + 1.0,
        fps: 30.0,
        attributes: attrs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        segments: (0..segments)
            .map(|k| Segment {
                segment_id: format!("{id}_s{k}"),
                t_start: 10.0 * k as f64,
                t_end: 10.0 * (k + 1) as f64,
                gt_step_index: Some(1),
                gt_page_index: None,
            })
            .collect(),
    }
}

fn split_index(s: Split) -> usize {
    Split::ALL.iter().position(|&x| x == s).unwrap()
}

/// Sum over attribute values and splits of |count - ratio * total|.
fn attribute_deviation(videos: &[VideoRecord], assign: &[usize], ratios: [f64; 3]) -> f64 {
    let mut hist: BTreeMap<(&str, &str), [f64; 3]> = BTreeMap::new();
    for (v, &s) in videos.iter().zip(assign) {
        for (k, val) in &v.attributes {
            hist.entry((k, val)).or_default()[s] += 1.0;
        }
    }
    hist.values()
        .map(|c| {
            let total: f64 = c.iter().sum();
            (0..3).map(|s| (c[s] - ratios[s] * total).abs()).sum::<f64>()
        })
        .sum()
}

fn exhaustive_min_deviation(videos: &[VideoRecord], ratios: [f64; 3]) -> f64 {
    let n = videos.len();
    let mut best = f64::INFINITY;
    for code in 0..3usize.pow(n as u32) {
        let mut c = code;
        let assign: Vec<usize> = (0..n)
            .map(|_| {
                let s = c % 3;
                c /= 3;
                s
            })
            .collect();
        best = best.min(attribute_deviation(videos, &assign, ratios));
    }
    best
}

proptest! {
    #[test]
    fn splits_never_share_a_video(
        counts in prop::collection::vec(1usize..30, 1..40),
        seed in any::<u64>(),
    ) {
        let videos: Vec<_> = counts
            .iter()
            .enumerate()
            .map(|(i, &n)| video(&format!("v{i}"), n, &[("camera", if i % 3 == 0 { "a" } else { "b" })]))
            .collect();
        let out = split_dataset(&videos, reference_split_ratios(), seed).unwrap();
        prop_assert_eq!(out.assignment.len(), videos.len());
        let lists = out.split_lists();
        let mut seen = BTreeSet::new();
        for ids in lists.values() {
            for id in ids {
                prop_assert!(seen.insert(id.clone()));
            }
        }
        prop_assert_eq!(seen.len(), videos.len());
    }

    #[test]
    fn greedy_attribute_balance_is_near_optimal(
        n in 2usize..=8,
        seed in any::<u64>(),
    ) {
        // Two perfectly balanced classes, equal segment counts.
        let videos: Vec<_> = (0..n)
            .map(|i| video(&format!("v{i}"), 4, &[("class", if i < n / 2 || (n % 2 == 1 && i == n - 1) { "x" } else { "y" })]))
            .collect();
        let ratios = [0.5, 0.25, 0.25];
        let out = split_dataset(&videos, ratios, seed).unwrap();
        let assign: Vec<usize> = videos.iter().map(|v| split_index(out.assignment[&v.video_id])).collect();
        let greedy = attribute_deviation(&videos, &assign, ratios);
        let optimum = exhaustive_min_deviation(&videos, ratios);
        prop_assert!(greedy <= optimum + 1.0 + 1e-9, "greedy {greedy} optimum {optimum}");
    }

    #[test]
    fn sampling_is_a_function_of_seed(seed in any::<u64>(), frames in 1usize..900) {
        for mode in [SampleMode::Train, SampleMode::Val, SampleMode::Test] {
            let a = sample_clips("seg", frames, mode, seed);
            let b = sample_clips("seg", frames, mode, seed);
            prop_assert_eq!(&a, &b);
            for w in &a {
                prop_assert_eq!(w.frame_indices(frames).len(), CLIP_FRAMES);
                prop_assert!(w.frame_indices(frames).iter().all(|&f| f < frames));
            }
        }
    }

    #[test]
    fn segments_cover_the_action(t0 in 0.0f64..500.0, len in 0.1f64..200.0) {
        let spans = segment_action(t0, t0 + len).unwrap();
        prop_assert!((spans[0].t_start - t0).abs() < 1e-9);
        prop_assert!((spans.last().unwrap().t_end - (t0 + len)).abs() < 1e-9);
        for s in &spans {
            prop_assert!(s.t_end - s.t_start <= 10.0 + 1e-9);
            prop_assert!(s.t_start >= t0 - 1e-9);
        }
    }
}

#[test]
fn identical_videos_split_six_two_two() {
    let videos: Vec<_> = (0..10).map(|i| video(&format!("v{i}"), 5, &[])).collect();
    let out = split_dataset(&videos, [0.6, 0.2, 0.2], 0).unwrap();
    let lists = out.split_lists();
    assert_eq!(lists[&Split::Train].len(), 6);
    assert_eq!(lists[&Split::Val].len(), 2);
    assert_eq!(lists[&Split::Test].len(), 2);
}

#[test]
fn reference_proportions_are_echoed() {
    // A clone with the reference segment total spread over 1005 videos.
    let total: usize = REFERENCE_SPLIT_SEGMENTS.iter().sum::<f64>() as usize;
    let mut counts: Vec<usize> = (0..1005).map(|i| 20 + (i * 37) % 58).collect();
    let have: usize = counts.iter().sum();
    let mut diff = total as i64 - have as i64;
    let mut i = 0;
    while diff != 0 {
        if diff > 0 {
            counts[i % 1005] += 1;
            diff -= 1;
        } else if counts[i % 1005] > 1 {
            counts[i % 1005] -= 1;
            diff += 1;
        }
        i += 1;
    }
    let videos: Vec<_> = counts
        .iter()
        .enumerate()
        .map(|(i, &n)| video(&format!("v{i}"), n, &[]))
        .collect();
    let out = split_dataset(&videos, reference_split_ratios(), 0).unwrap();
    let largest = *counts.iter().max().unwrap() as f64;
    let mut got = [0.0; 3];
    for v in &videos {
        got[split_index(out.assignment[&v.video_id])] += v.segments.len() as f64;
    }
    for s in 0..3 {
        assert!(
            (got[s] - REFERENCE_SPLIT_SEGMENTS[s]).abs() <= largest,
            "split {s}: {} vs {}",
            got[s],
            REFERENCE_SPLIT_SEGMENTS[s]
        );
    }
}

#[test]
fn slow_and_fast_offsets_increase() {
    let (slow, fast) = slow_fast_offsets();
    assert_eq!(slow.len(), 8);
    assert_eq!(fast.len(), 32);
    assert!(slow.windows(2).all(|w| w[0] < w[1]));
    assert!(fast.windows(2).all(|w| w[0] < w[1]));
    assert!(*fast.last().unwrap() < CLIP_FRAMES);
}

#[test]
fn batches_are_seeded_and_consistent() {
    let synth = generate(&SynthConfig {
        n_manuals: 6,
        raw_dim: 8,
        ..SynthConfig::default()
    })
    .unwrap();
    let ds = &synth.dataset;
    let a = build_pair_batch(ds, Granularity::Step, 128, 7).unwrap();
    assert_eq!(a, build_pair_batch(ds, Granularity::Step, 128, 7).unwrap());
    assert_ne!(a, build_pair_batch(ds, Granularity::Step, 128, 8).unwrap());
    let train: BTreeSet<&str> = ds.splits[&Split::Train].iter().map(String::as_str).collect();
    for it in &a.items {
        let v = &ds.videos[it.segment.video];
        assert!(train.contains(v.video_id.as_str()));
        assert_eq!(Some(it.diagram), ds.segment(it.segment).gt(Granularity::Step));
        assert_eq!(ds.manuals[it.manual].manual_id, v.manual_id);
    }

    let b = build_manual_batch(ds, Granularity::Step, 128, 7).unwrap();
    let distinct: BTreeSet<usize> = b.manuals.iter().copied().collect();
    assert_eq!(distinct.len(), b.manuals.len());
    let storage: usize = b.manuals.iter().map(|&m| ds.manuals[m].steps.len()).sum();
    assert_eq!(b.diagram_storage(ds).len(), storage);
    for (k, c) in b.clips.iter().enumerate() {
        let view = b.view(ds, k);
        assert_eq!(view.len(), b.manual_len(ds, k));
        assert!((1..=view.len()).contains(&c.positive));
    }
}
