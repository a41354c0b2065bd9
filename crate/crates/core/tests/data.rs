use std::collections::HashSet;
use std::path::{Path, PathBuf};

use mdfnet::Error;
use mdfnet::data::{
    Dataset, ExclusionReason, JoinedInstance, MANIFEST_FILE, Phenotype, SPLIT_FILE, SourceTables, Split, SynthConfig,
    ViolationKind, join, read_exclusions, read_manifest, synth_generate, synth_generate_with_labels, validate_schema,
    write_manifest,
};
use mdfnet::detection::AbnormalityClass;
use rand::SeedableRng;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/join")
}

fn small(kappa: f64) -> SynthConfig {
    SynthConfig { n_train: 60, n_test: 20, kappa, ..SynthConfig::default() }
}

#[test]
fn fixture_join_matches_expected_manifest_and_log() {
    let dir = fixture_dir();
    let tables = SourceTables::read_dir(&dir).unwrap();
    assert_eq!(tables.cxr_metadata.rows.len(), 50);
    assert!(validate_schema(&tables).is_empty());
    let out = join(&tables, None).unwrap();
    let expected = read_manifest(&dir.join("expected_manifest.jsonl")).unwrap();
    assert_eq!(out.instances, expected);
    let log: Vec<(String, ExclusionReason)> = out.exclusions.iter().map(|e| (e.dicom_id.clone(), e.reason)).collect();
    let want: Vec<(String, ExclusionReason)> = read_exclusions(&dir.join("expected_exclusions.csv"))
        .unwrap()
        .into_iter()
        .map(|e| (e.dicom_id, e.reason))
        .collect();
    assert_eq!(log, want);
    for r in [
        ExclusionReason::WrongView,
        ExclusionReason::MissingAnnotation,
        ExclusionReason::NoCoveringStay,
        ExclusionReason::AmbiguousStay,
        ExclusionReason::MissingTriage,
    ] {
        assert!(log.iter().any(|l| l.1 == r), "fixture lacks {r}");
    }
}

#[test]
fn join_ignores_row_order_and_is_idempotent() {
    let tables = SourceTables::read_dir(&fixture_dir()).unwrap();
    let base = join(&tables, None).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..5 {
        let mut t = tables.clone();
        t.patients.rows.shuffle(&mut rng);
        t.edstays.rows.shuffle(&mut rng);
        t.triage.rows.shuffle(&mut rng);
        t.cxr_metadata.rows.shuffle(&mut rng);
        t.annotations.rows.shuffle(&mut rng);
        assert_eq!(join(&t, None).unwrap(), base);
    }
    assert_eq!(join(&tables, None).unwrap(), base);
}

#[test]
fn joined_keys_trace_to_one_row_per_table() {
    let tables = SourceTables::read_dir(&fixture_dir()).unwrap();
    let out = join(&tables, None).unwrap();
    let count = |t: &mdfnet::data::Table, col: &str, v: &str| {
        let c = t.column(col).unwrap();
        t.rows.iter().filter(|r| r[c] == v).count()
    };
    for inst in &out.instances {
        assert_eq!(count(&tables.patients, "subject_id", &inst.keys.subject_id), 1);
        assert_eq!(count(&tables.edstays, "stay_id", &inst.keys.stay_id), 1);
        assert_eq!(count(&tables.triage, "stay_id", &inst.keys.stay_id), 1);
        assert_eq!(count(&tables.cxr_metadata, "dicom_id", &inst.keys.dicom_id), 1);
        assert!(inst.clinical.is_complete());
        assert!(inst.boxes.iter().all(|b| b.bbox.within(inst.width as f64, inst.height as f64)));
    }
}

#[test]
fn exclusions_plus_joined_account_for_every_image() {
    let tables = SourceTables::read_dir(&fixture_dir()).unwrap();
    let out = join(&tables, None).unwrap();
    assert_eq!(out.instances.len() + out.exclusions.len(), tables.cxr_metadata.rows.len());
    let counts = out.reason_counts();
    let early = counts.get(&ExclusionReason::WrongView).unwrap_or(&0) + counts.get(&ExclusionReason::MissingAnnotation).unwrap_or(&0);
    let annotated: HashSet<&str> = tables.annotations.rows.iter().map(|r| r[0].as_str()).collect();
    let frontal_annotated = tables
        .cxr_metadata
        .rows
        .iter()
        .filter(|r| ["AP", "PA"].contains(&r[3].to_ascii_uppercase().as_str()) && annotated.contains(r[0].as_str()))
        .count();
    assert_eq!(out.instances.len() + out.exclusions.len() - early, frontal_annotated);
}

#[test]
fn schema_violations_name_table_column_and_row() {
    let mut t = SourceTables::read_dir(&fixture_dir()).unwrap();
    let acuity = t.triage.column("acuity").unwrap();
    t.triage.rows[2][acuity] = "6".into();
    let v = validate_schema(&t);
    assert_eq!(v.len(), 1);
    assert_eq!((v[0].table.as_str(), v[0].column.as_str(), v[0].row, v[0].kind), ("triage", "acuity", Some(3), ViolationKind::Range));

    let mut t = SourceTables::read_dir(&fixture_dir()).unwrap();
    let stay = t.triage.column("stay_id").unwrap();
    t.triage.rows[0][stay] = "999".into();
    let v = validate_schema(&t);
    assert!(v.iter().any(|x| x.kind == ViolationKind::Reference && x.column == "stay_id"));
    assert!(matches!(join(&t, None), Err(Error::Schema(m)) if m.contains("triage.stay_id")));

    let mut t = SourceTables::read_dir(&fixture_dir()).unwrap();
    let pain = t.triage.column("pain").unwrap();
    t.triage.rows[1][pain] = "11".into();
    t.edstays.headers[2] = "admit".into();
    let v = validate_schema(&t);
    assert!(v.iter().any(|x| x.kind == ViolationKind::Range && x.column == "pain"));
    assert!(v.iter().any(|x| x.kind == ViolationKind::MissingColumn && x.table == "edstays"));
}

#[test]
fn generator_output_validates_and_joins_completely() {
    let ds = synth_generate(&small(1.0), 3).unwrap();
    assert!(validate_schema(&ds.tables).is_empty());
    let out = join(&ds.tables, None).unwrap();
    assert_eq!(out.instances.len(), 80);
    assert_eq!(out.exclusions.len(), 4);
    assert!(out.exclusions.iter().all(|e| e.reason == ExclusionReason::WrongView));
    for (inst, s) in out.instances.iter().zip(&ds.instances) {
        assert_eq!(inst.keys.dicom_id, s.dicom_id);
        assert_eq!(inst.boxes.len(), s.blobs.len());
        assert!((1..=3).contains(&inst.boxes.len()));
        let amb = inst.boxes.iter().filter(|b| AbnormalityClass::AMBIGUOUS.contains(&b.class)).count();
        assert!(amb <= 1);
    }
}

#[test]
fn generator_is_deterministic() {
    let a = synth_generate(&small(1.0), 9).unwrap();
    let b = synth_generate(&small(1.0), 9).unwrap();
    assert_eq!(a, b);
    let c = synth_generate(&small(1.0), 10).unwrap();
    assert_ne!(a.tables, c.tables);
}

#[test]
fn ambiguous_labels_never_change_pixels() {
    let cfg = small(1.0);
    let a = synth_generate_with_labels(&cfg, 4, 100).unwrap();
    let b = synth_generate_with_labels(&cfg, 4, 200).unwrap();
    let mut flipped = 0;
    for (x, y) in a.instances.iter().zip(&b.instances) {
        assert_eq!(x.image, y.image);
        let bx: Vec<_> = x.blobs.iter().map(|b| b.bbox).collect();
        let by: Vec<_> = y.blobs.iter().map(|b| b.bbox).collect();
        assert_eq!(bx, by);
        if x.ambiguous_label() != y.ambiguous_label() {
            flipped += 1;
        }
    }
    // the label flips while the image stays fixed: no pixel-based rule can beat a coin
    assert!(flipped > 5, "{flipped}");
}

#[test]
fn coupling_strength_controls_the_phenotype() {
    let coupled = synth_generate(&small(1.0), 5).unwrap();
    for s in &coupled.instances {
        let want = match s.ambiguous_label() {
            Some(AbnormalityClass::Consolidation) => Phenotype::Fever,
            Some(AbnormalityClass::PulmonaryEdema) => Phenotype::Tachypnea,
            _ => Phenotype::None,
        };
        assert_eq!(s.phenotype, want);
    }
    let cfg = SynthConfig { n_train: 400, n_test: 0, ..small(0.0) };
    let free = synth_generate(&cfg, 5).unwrap();
    let count = |f: &dyn Fn(&mdfnet::data::SynthInstance) -> bool| free.instances.iter().filter(|s| f(s)).count();
    // same phenotype marginal as the coupled labels, but unrelated to the image's own label
    let own_fever = count(&|s| s.ambiguous_label() == Some(AbnormalityClass::Consolidation));
    let fever = count(&|s| s.phenotype == Phenotype::Fever);
    assert_eq!(own_fever, fever);
    let agree = count(&|s| s.ambiguous_label() == Some(AbnormalityClass::Consolidation) && s.phenotype == Phenotype::Fever);
    assert!((agree as f64) < 0.6 * own_fever as f64, "{agree} of {own_fever}");
}

#[test]
fn fever_shows_up_in_the_triage_table() {
    let ds = synth_generate(&small(1.0), 6).unwrap();
    let out = join(&ds.tables, None).unwrap();
    for (inst, s) in out.instances.iter().zip(&ds.instances) {
        let t = inst.clinical.temperature.unwrap();
        let r = inst.clinical.resprate.unwrap();
        match s.phenotype {
            Phenotype::Fever => assert!(t > 99.0, "{t}"),
            Phenotype::Tachypnea => assert!(r > 19.0, "{r}"),
            Phenotype::None => {}
        }
    }
}

#[test]
fn invalid_generator_config_is_rejected() {
    assert!(synth_generate(&SynthConfig { kappa: 1.5, ..small(1.0) }, 1).is_err());
    assert!(synth_generate(&SynthConfig { image_size: 8, ..small(1.0) }, 1).is_err());
    assert!(synth_generate(&SynthConfig { class_weights: [0.0; 5], ..small(1.0) }, 1).is_err());
}

#[test]
fn written_dataset_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synth_generate(&small(1.0), 8).unwrap();
    ds.write(dir.path()).unwrap();
    let tables = SourceTables::read_dir(&dir.path().join("tables")).unwrap();
    assert_eq!(tables, ds.tables);
    let out = join(&tables, Some(dir.path())).unwrap();
    assert_eq!(out.instances.len(), 80);
    write_manifest(&dir.path().join(MANIFEST_FILE), &out.instances).unwrap();
    let back: Vec<JoinedInstance> = read_manifest(&dir.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(back, out.instances);
    assert!(dir.path().join(SPLIT_FILE).is_file());

    let data = Dataset::open(dir.path()).unwrap();
    let train = data.samples(Split::Train).unwrap();
    let test = data.samples(Split::Test).unwrap();
    assert_eq!((train.len(), test.len()), (60, 20));
    assert_eq!(train[0].image.shape(), &[1, 1, 64, 64]);
    let px = &ds.instances[0].image.pixels;
    assert!((train[0].image.data()[5] - f64::from(px[5]) / 255.0).abs() < 1e-15);

    std::fs::remove_file(dir.path().join("images/cxr00003.pgm")).unwrap();
    let out = join(&tables, Some(dir.path())).unwrap();
    assert_eq!(out.reason_counts()[&ExclusionReason::MissingImage], 1);
}
