use super::*;

fn small_spec() -> SignalSpec {
    // Default corpus shape with reduced widths so tests stay fast.
    SignalSpec {
        widths: StreamWidths {
            egemaps: 24,
            mfcc: 13,
            boaw_e: 20,
            boaw_m: 20,
            deep_spectrum: 48,
        },
        ..SignalSpec::default()
    }
}

fn tiny_spec() -> SignalSpec {
    SignalSpec {
        n_train_utterances: 12,
        n_devel_utterances: 4,
        frames_per_utterance: 30,
        ..small_spec()
    }
}

fn refs<'a>(bundles: &'a [FeatureBundle], records: &[UtteranceRecord], split: &str) -> Vec<&'a FeatureBundle> {
    bundles
        .iter()
        .zip(records)
        .filter(|(_, r)| r.split == split)
        .map(|(b, _)| b)
        .collect()
}

#[test]
fn noiseless_interaction_free_corpus_is_single_stream_decodable() {
    let mut spec = tiny_spec();
    spec.noise_level = 0.0;
    spec.interaction_strength = 0.0;
    let (bundles, records) = synth_corpus(&spec, 11).unwrap();
    let report = linear_probe_report(
        &refs(&bundles, &records, "train"),
        &refs(&bundles, &records, "devel"),
        &spec.widths,
        11,
    )
    .unwrap();
    for (stream, ccc) in &report.single_ccc {
        for (t, &v) in ccc.iter().enumerate() {
            assert!(v >= 0.99, "{stream} target {t}: probe CCC {v}");
        }
    }
}

#[test]
fn default_interaction_creates_probe_gap() {
    let spec = small_spec();
    let (bundles, records) = synth_corpus(&spec, 13).unwrap();
    let report = linear_probe_report(
        &refs(&bundles, &records, "train"),
        &refs(&bundles, &records, "devel"),
        &spec.widths,
        13,
    )
    .unwrap();
    for (t, &g) in report.gap.iter().enumerate() {
        assert!(g >= 0.05, "target {t}: probe gap {g} below 0.05: {report:?}");
    }
}

#[test]
fn same_seed_gives_byte_identical_corpus_files() {
    let spec = tiny_spec();
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let m1 = generate_corpus(&spec, 17, d1.path()).unwrap();
    let m2 = generate_corpus(&spec, 17, d2.path()).unwrap();
    assert_eq!(m1.utterances.len(), m2.utterances.len());
    for rec in &m1.utterances {
        for rel in rec.streams.values().chain([&rec.labels]) {
            let a = std::fs::read(d1.path().join(rel)).unwrap();
            let b = std::fs::read(d2.path().join(rel)).unwrap();
            assert_eq!(a, b, "{rel} differs across same-seed generations");
        }
    }
    let ma = std::fs::read(d1.path().join("manifest.json")).unwrap();
    let mb = std::fs::read(d2.path().join("manifest.json")).unwrap();
    assert_eq!(ma, mb);

    // A distinct seed produces distinct data.
    let d3 = tempfile::tempdir().unwrap();
    generate_corpus(&spec, 18, d3.path()).unwrap();
    let r0 = &m1.utterances[0];
    let a = std::fs::read(d1.path().join(&r0.labels)).unwrap();
    let c = std::fs::read(d3.path().join(&r0.labels)).unwrap();
    assert_ne!(a, c);
}

#[test]
fn generate_then_load_round_trips_to_full_precision() {
    let mut spec = tiny_spec();
    spec.n_train_utterances = 2;
    spec.n_devel_utterances = 1;
    spec.frames_per_utterance = 5;
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_corpus(&spec, 23, dir.path()).unwrap();
    let (bundles, _) = synth_corpus(&spec, 23).unwrap();

    for b in &bundles {
        let loaded = load_bundle(&manifest, dir.path(), &b.utterance_id).unwrap();
        for s in STREAM_ORDER {
            let a = b.stream(s).data();
            let l = loaded.stream(s).data();
            assert_eq!(a.len(), l.len());
            for (x, y) in a.iter().zip(l) {
                assert_eq!(x.to_bits(), y.to_bits(), "{} {}", b.utterance_id, s.name());
            }
        }
        for (x, y) in b.labels.data().iter().zip(loaded.labels.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}

#[test]
fn truncated_file_reports_the_line() {
    let mut spec = tiny_spec();
    spec.n_train_utterances = 1;
    spec.n_devel_utterances = 1;
    spec.frames_per_utterance = 4;
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_corpus(&spec, 29, dir.path()).unwrap();
    let rec = &manifest.utterances[0];
    let path = dir.path().join(&rec.streams["mfcc"]);
    let text = std::fs::read_to_string(&path).unwrap();
    // Cut the third frame short.
    let mut lines: Vec<&str> = text.lines().collect();
    let truncated = lines[3].rsplit_once(' ').unwrap().0.to_string();
    lines[3] = &truncated;
    std::fs::write(&path, lines.join("\n")).unwrap();

    let err = load_bundle(&manifest, dir.path(), &rec.id).unwrap_err();
    match err {
        Error::Data(msg) => {
            assert!(msg.contains("line 4"), "message should name the line: {msg}");
        }
        other => panic!("expected data error, got {other:?}"),
    }
}

#[test]
fn nan_in_data_is_rejected_with_location() {
    let mut spec = tiny_spec();
    spec.n_train_utterances = 1;
    spec.n_devel_utterances = 1;
    spec.frames_per_utterance = 3;
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_corpus(&spec, 31, dir.path()).unwrap();
    let rec = &manifest.utterances[0];
    let path = dir.path().join(&rec.streams["egemaps"]);
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let mut parts: Vec<&str> = lines[2].split(' ').collect();
    parts[0] = "NaN";
    lines[2] = parts.join(" ");
    std::fs::write(&path, lines.join("\n")).unwrap();

    let err = load_bundle(&manifest, dir.path(), &rec.id).unwrap_err();
    match err {
        Error::Data(msg) => assert!(msg.contains("line 3") && msg.contains("non-finite"), "{msg}"),
        other => panic!("expected data error, got {other:?}"),
    }
}

#[test]
fn missing_file_is_a_data_error_naming_the_file() {
    let mut spec = tiny_spec();
    spec.n_train_utterances = 1;
    spec.n_devel_utterances = 1;
    spec.frames_per_utterance = 3;
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_corpus(&spec, 37, dir.path()).unwrap();
    let rec = &manifest.utterances[0];
    std::fs::remove_file(dir.path().join(&rec.streams["boaw_e"])).unwrap();
    let err = load_bundle(&manifest, dir.path(), &rec.id).unwrap_err();
    assert!(matches!(err, Error::Io { .. }), "got {err:?}");
    assert!(err.to_string().contains("boaw_e"));
}

#[test]
fn manifest_with_unknown_stream_name_is_config_error() {
    let mut spec = tiny_spec();
    spec.n_train_utterances = 1;
    spec.n_devel_utterances = 1;
    spec.frames_per_utterance = 3;
    let dir = tempfile::tempdir().unwrap();
    generate_corpus(&spec, 41, dir.path()).unwrap();
    let mpath = dir.path().join("manifest.json");
    let mut v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&mpath).unwrap()).unwrap();
    let streams = v["utterances"][0]["streams"].as_object_mut().unwrap();
    let path = streams.remove("mfcc").unwrap();
    streams.insert("mfccs".to_string(), path);
    std::fs::write(&mpath, serde_json::to_string(&v).unwrap()).unwrap();
    let err = load_manifest(&mpath).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "got {err:?}");
}

#[test]
fn split_filters_cultures_and_keeps_sets_disjoint() {
    let spec = tiny_spec();
    let (_, records) = synth_corpus(&spec, 43).unwrap();
    let manifest = CorpusManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        seed: 43,
        spec: spec.clone(),
        widths: spec.widths.as_map(),
        interaction_pair: ["egemaps".into(), "mfcc".into()],
        probe_report: None,
        utterances: records,
    };

    let de = vec!["DE".to_string()];
    let (train_de, devel_de) = split(&manifest, &de).unwrap();
    assert!(train_de.iter().chain(&devel_de).all(|r| r.culture == "DE"));

    let both = vec!["DE".to_string(), "HU".to_string()];
    let hu = vec!["HU".to_string()];
    let (train_hu, _) = split(&manifest, &hu).unwrap();
    let (train_all, devel_all) = split(&manifest, &both).unwrap();
    assert_eq!(train_all.len(), train_de.len() + train_hu.len());

    let train_ids: std::collections::BTreeSet<&str> =
        train_all.iter().map(|r| r.id.as_str()).collect();
    assert!(devel_all.iter().all(|r| !train_ids.contains(r.id.as_str())));

    let err = split(&manifest, &["ZZ".to_string()]).unwrap_err();
    assert!(matches!(err, Error::Data(_)));
}

#[test]
fn bundle_construction_is_stable_under_key_reordering() {
    let spec = tiny_spec();
    let (bundles, _) = synth_corpus(&spec, 47).unwrap();
    let b = &bundles[0];
    let mut named: Vec<(String, Tensor)> = STREAM_ORDER
        .iter()
        .map(|&s| (s.name().to_string(), b.stream(s).clone()))
        .collect();
    named.reverse();
    let rebuilt = FeatureBundle::from_named("x", "DE", named, b.labels.clone()).unwrap();
    for s in STREAM_ORDER {
        assert_eq!(rebuilt.stream(s).data(), b.stream(s).data());
    }
}

#[test]
fn invalid_spec_is_config_error() {
    let mut spec = tiny_spec();
    spec.frames_per_utterance = 1;
    assert!(matches!(synth_corpus(&spec, 1), Err(Error::Config(_))));
    let mut spec2 = tiny_spec();
    spec2.cultures.clear();
    assert!(matches!(synth_corpus(&spec2, 1), Err(Error::Config(_))));
}
