use std::collections::{BTreeMap, HashMap};

use proptest::prelude::*;
use stepalign::data::{
    load_manifest, manifest_json, parse_manifest, save_manifest, validate_dataset, Dataset, Granularity,
    ModalityTables, Split,
};
use stepalign::emb::{read_embedding_table, write_embedding_table, EmbeddingTable};
use stepalign::synth::{generate, SynthConfig};
use stepalign::Error;

fn small_synth(seed: u64) -> stepalign::synth::SynthData {
    generate(&SynthConfig {
        n_manuals: 4,
        steps: (2, 5),
        videos_per_manual: (1, 3),
        raw_dim: 8,
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn table_strategy() -> impl Strategy<Value = EmbeddingTable> {
    (1usize..6).prop_flat_map(|dim| {
        prop::collection::btree_map("[a-z0-9_@]{1,12}", prop::collection::vec(-1e6f32..1e6, dim), 0..12).prop_map(
            move |rows| {
                let mut t = EmbeddingTable::new(dim).unwrap();
                for (id, v) in rows {
                    t.insert(id, v).unwrap();
                }
                t
            },
        )
    })
}

proptest! {
    #[test]
    fn emb_round_trip_is_byte_exact(table in table_strategy()) {
        let bytes = table.to_bytes();
        let back = EmbeddingTable::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &table);
        prop_assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn truncated_emb_is_rejected(table in table_strategy(), cut in 1usize..64) {
        let bytes = table.to_bytes();
        prop_assume!(cut <= bytes.len());
        prop_assert!(EmbeddingTable::from_bytes(&bytes[..bytes.len() - cut]).is_err());
    }

    #[test]
    fn manifest_round_trip_is_identity(seed in 0u64..1000) {
        let ds = small_synth(seed).dataset;
        let back = parse_manifest(&manifest_json(&ds)).unwrap();
        prop_assert_eq!(&back, &ds);
        prop_assert_eq!(manifest_json(&back), manifest_json(&ds));
    }

    #[test]
    fn clean_dataset_links_labels_uniquely(seed in 0u64..1000) {
        let synth = small_synth(seed);
        let ds = &synth.dataset;
        let report = validate_dataset(ds, ModalityTables::new(&synth.diagrams, &synth.clips));
        prop_assert!(report.is_empty());
        let mut owners: HashMap<&str, usize> = HashMap::new();
        for m in &ds.manuals {
            for d in m.steps.iter().chain(&m.pages) {
                *owners.entry(d.diagram_id.as_str()).or_default() += 1;
            }
        }
        prop_assert!(owners.values().all(|&n| n == 1));
        for v in &ds.videos {
            let m = ds.manual_of(v);
            for s in &v.segments {
                if let Some(j) = s.gt_step_index {
                    let matches = m.steps.iter().filter(|d| d.index == j).count();
                    prop_assert_eq!(matches, 1);
                }
            }
        }
    }
}

#[test]
fn emb_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.emb");
    let mut t = EmbeddingTable::new(2).unwrap();
    t.insert("a", vec![1.0, 0.0]).unwrap();
    t.insert("b", vec![0.0, 1.0]).unwrap();
    write_embedding_table(&t, &path).unwrap();
    assert_eq!(read_embedding_table(&path).unwrap(), t);
}

#[test]
fn emb_with_missing_row_reports_truncation() {
    let mut t = EmbeddingTable::new(2).unwrap();
    for id in ["a", "b", "c"] {
        t.insert(id, vec![0.5, 0.5]).unwrap();
    }
    let bytes = t.to_bytes();
    let short = &bytes[..bytes.len() - (2 + 1 + 8)];
    assert!(EmbeddingTable::from_bytes(short).is_err());
}

#[test]
fn emb_at_step_diagram_scale() {
    let mut t = EmbeddingTable::new(1024).unwrap();
    for i in 0..8263 {
        let v: Vec<f32> = (0..1024).map(|k| ((i * 31 + k) % 97) as f32 / 97.0).collect();
        t.insert(format!("step{i}"), v).unwrap();
    }
    let bytes = t.to_bytes();
    assert_eq!(
        bytes.len(),
        4 + 4 + 8 + (0..8263).map(|i| 2 + format!("step{i}").len() + 4096).sum::<usize>()
    );
    assert_eq!(EmbeddingTable::from_bytes(&bytes).unwrap(), t);
}

#[test]
fn manifest_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    let ds = small_synth(9).dataset;
    save_manifest(&ds, &path).unwrap();
    assert_eq!(load_manifest(&path).unwrap(), ds);
}

#[test]
fn small_manifest_counts() {
    let json = r#"{
      "manuals": [{"manual_id": "m", "furniture_id": "f",
        "steps": [{"diagram_id": "s1", "index": 1}, {"diagram_id": "s2", "index": 2}, {"diagram_id": "s3", "index": 3}]}],
      "videos": [{"video_id": "v", "manual_id": "m", "duration": 30.0, "segments": [
        {"segment_id": "a", "t_start": 0.0, "t_end": 10.0, "gt_step_index": 1},
        {"segment_id": "b", "t_start": 10.0, "t_end": 20.0, "gt_step_index": 3}]}]
    }"#;
    let ds = parse_manifest(json).unwrap();
    assert_eq!(ds.manuals[0].len(), 3);
    assert_eq!(ds.videos[0].segments.len(), 2);
}

#[test]
fn dangling_manual_is_named() {
    let json = r#"{"manuals": [], "videos": [{"video_id": "v", "manual_id": "X", "duration": 5.0, "segments": []}]}"#;
    match parse_manifest(json) {
        Err(Error::UnknownManual(id)) => assert_eq!(id, "X"),
        other => panic!("expected unknown manual, got {other:?}"),
    }
}

#[test]
fn non_contiguous_steps_are_rejected() {
    let json = r#"{"manuals": [{"manual_id": "m", "furniture_id": "f",
        "steps": [{"diagram_id": "s1", "index": 1}, {"diagram_id": "s3", "index": 3}]}], "videos": []}"#;
    let err = parse_manifest(json).unwrap_err();
    assert!(err.to_string().contains('m'), "{err}");
}

#[test]
fn full_scale_header_is_echoed() {
    // 420 furniture items with one manual each; 1005 videos spread over them.
    let mut manuals = Vec::new();
    for f in 0..420 {
        manuals.push(serde_json::json!({
            "manual_id": format!("m{f}"),
            "furniture_id": format!("f{f}"),
            "steps": [{"diagram_id": format!("m{f}_s1"), "index": 1}],
        }));
    }
    let videos: Vec<_> = (0..1005)
        .map(|v| {
            serde_json::json!({
                "video_id": format!("v{v}"),
                "manual_id": format!("m{}", v % 420),
                "duration": 20.0,
                "segments": [{"segment_id": format!("v{v}_s0"), "t_start": 0.0, "t_end": 10.0, "gt_step_index": 1}],
            })
        })
        .collect();
    let json = serde_json::json!({"manuals": manuals, "videos": videos}).to_string();
    let summary = parse_manifest(&json).unwrap().summary();
    assert_eq!(summary.furniture, 420);
    assert_eq!(summary.videos, 1005);
    assert_eq!(summary.labeled_segments, 1005);
}

#[test]
fn validation_flags_missing_diagram_and_leakage() {
    let synth = small_synth(3);
    let mut diagrams = EmbeddingTable::new(synth.diagrams.dim()).unwrap();
    let skip = synth.dataset.manuals[0].steps[0].diagram_id.clone();
    for (id, v) in synth.diagrams.iter() {
        if id != skip {
            diagrams.insert(id, v.to_vec()).unwrap();
        }
    }
    let report = validate_dataset(&synth.dataset, ModalityTables::new(&diagrams, &synth.clips));
    assert_eq!(report.missing_embeddings, vec![skip]);

    let mut splits: BTreeMap<Split, Vec<String>> = synth.dataset.splits.clone();
    let leaked = splits[&Split::Train][0].clone();
    splits.get_mut(&Split::Test).unwrap().push(leaked.clone());
    let ds = Dataset::new(synth.dataset.manuals.clone(), synth.dataset.videos.clone(), splits).unwrap();
    let report = validate_dataset(&ds, ModalityTables::new(&synth.diagrams, &synth.clips));
    assert_eq!(report.leakage.len(), 1);
    assert!(report.leakage[0].contains(&leaked));
}

#[test]
fn every_synth_segment_has_a_positive() {
    let ds = small_synth(5).dataset;
    for v in &ds.videos {
        let m = ds.manual_of(v);
        for s in &v.segments {
            let j = s.gt(Granularity::Step).unwrap();
            assert!((1..=m.steps.len()).contains(&j));
            let p = s.gt(Granularity::Page).unwrap();
            assert!((1..=m.pages.len()).contains(&p));
        }
    }
}
