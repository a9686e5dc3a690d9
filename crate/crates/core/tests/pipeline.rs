use lca_core::dataset::{align_splits, load_activations, load_labels, LabelMode};
use lca_core::lambda_search::{cartesian_grid, SearchConfig};
use lca_core::report::{render_tables, strip_timestamp, validate_run_json};
use lca_core::synthetic::{PlantedCorpusSpec, PlantedFixture};
use lca_core::{emit_report, run_pipeline, PipelineConfig, RegularizationConfig, RunRecord};

fn small_spec() -> PlantedCorpusSpec {
    PlantedCorpusSpec {
        num_layers: 4,
        hidden_size: 10,
        num_tags: 4,
        num_planted: 4,
        train_tokens: 3000,
        dev_tokens: 500,
        test_tokens: 500,
        ..PlantedCorpusSpec::default()
    }
}

fn quick_config(seed: u64) -> PipelineConfig {
    let mut cfg = PipelineConfig::default().with_seed(seed);
    cfg.search = SearchConfig {
        grid: cartesian_grid(&[0.0, 1e-4], &[0.0, 1e-4]),
        ..SearchConfig::default()
    };
    cfg.selection.step_percent = 5.0;
    cfg
}

#[test]
fn fixture_round_trips_through_files() {
    let fx = PlantedFixture::generate(&small_spec());
    let dir = tempfile::tempdir().unwrap();
    fx.write(dir.path()).unwrap();

    let manifest = dir.path().join("manifest.json");
    let load = |split: &str| {
        (
            load_activations(&dir.path().join(format!("{split}.activations.jsonl")), &manifest).unwrap(),
            load_labels(&dir.path().join(format!("{split}.labels.tsv")), LabelMode::Token).unwrap(),
        )
    };
    let (tr, trl) = load("train");
    let (dv, dvl) = load("dev");
    let (te, tel) = load("test");
    assert_eq!(tr.num_tokens(), 3000);
    let from_disk = align_splits([&tr, &dv, &te], [&trl, &dvl, &tel]).unwrap();
    let in_memory = fx.corpora().unwrap();
    let names = |c: &lca_core::dataset::AlignedCorpus| -> Vec<String> {
        c.labels.iter().map(|&l| c.tag_vocab[l].clone()).collect()
    };
    assert_eq!(names(&from_disk.train), names(&in_memory.train));
    assert_eq!(from_disk.train.word_types, in_memory.train.word_types);
    let diff = (&from_disk.test.features - &in_memory.test.features)
        .iter()
        .fold(0.0f32, |m, d| m.max(d.abs()));
    assert!(diff < 1e-6, "max feature drift {diff}");
}

#[test]
fn pipeline_is_reproducible_and_reports() {
    let fx = PlantedFixture::generate(&small_spec());
    let corpora = fx.corpora().unwrap();
    let a = run_pipeline(&corpora, &fx.manifest, &quick_config(3)).unwrap();
    let b = run_pipeline(&corpora, &fx.manifest, &quick_config(3)).unwrap();
    assert_eq!(a.ranking, b.ranking);
    assert_eq!(a.selection.neurons, b.selection.neurons);

    let dir = tempfile::tempdir().unwrap();
    let files = emit_report(&a.record, dir.path()).unwrap();
    for name in ["run.json", "tables.txt", "ranking.csv", "search.csv", "ablation.csv", "redundancy.csv", "layers.csv"] {
        assert!(files.iter().any(|f| f.ends_with(name)), "missing {name}");
    }
    let text = std::fs::read_to_string(dir.path().join("run.json")).unwrap();
    let parsed = validate_run_json(&text).unwrap();
    assert_eq!(parsed.seed, 3);

    let other = tempfile::tempdir().unwrap();
    emit_report(&b.record, other.path()).unwrap();
    let text_b = std::fs::read_to_string(other.path().join("run.json")).unwrap();
    assert_eq!(strip_timestamp(&text).unwrap(), strip_timestamp(&text_b).unwrap());

    let tables = render_tables(&a.record);
    for row in ["All", "Top", "Random", "Bottom"] {
        assert!(tables.lines().any(|l| l.trim_start().starts_with(row)), "no {row} row in\n{tables}");
    }
    let planted = fx.planted();
    let head = &a.ranking.ordering[..planted.len()];
    assert!(head.iter().filter(|n| planted.contains(n)).count() >= planted.len() - 1);
}

#[test]
fn fixed_lambda_skips_search() {
    let fx = PlantedFixture::generate(&small_spec());
    let mut cfg = quick_config(1);
    cfg.lambda = Some(RegularizationConfig::new(1e-4, 1e-4).unwrap());
    cfg.control_task = false;
    let out = run_pipeline(&fx.corpora().unwrap(), &fx.manifest, &cfg).unwrap();
    assert!(out.search.is_none());
    assert!(out.record.selectivity.is_none());
    let dir = tempfile::tempdir().unwrap();
    let files = emit_report(&out.record, dir.path()).unwrap();
    assert!(!files.iter().any(|f| f.ends_with("search.csv")));
}

#[test]
fn minimal_record_has_three_files() {
    let fx = PlantedFixture::generate(&small_spec());
    let probe = lca_core::train_probe(
        &fx.corpora().unwrap().train,
        &RegularizationConfig::new(1e-4, 1e-4).unwrap(),
        &Default::default(),
    )
    .unwrap();
    let ranking = lca_core::extract_ordering(&probe, &Default::default()).unwrap();
    let mut record = RunRecord::new(0);
    record.manifest = Some(fx.manifest.clone());
    record.ranking = Some((&ranking).into());
    let dir = tempfile::tempdir().unwrap();
    let files = emit_report(&record, dir.path()).unwrap();
    assert_eq!(files.len(), 3);
    validate_run_json(&std::fs::read_to_string(dir.path().join("run.json")).unwrap()).unwrap();
}

#[test]
fn malformed_records_are_rejected() {
    assert!(validate_run_json("{}").is_err());
    let mut v = serde_json::to_value(RunRecord::new(0)).unwrap();
    validate_run_json(&v.to_string()).unwrap();
    v["surprise"] = serde_json::json!(1);
    assert!(validate_run_json(&v.to_string()).is_err());
    let mut v = serde_json::to_value(RunRecord::new(0)).unwrap();
    v["schema_version"] = serde_json::json!(99);
    assert!(validate_run_json(&v.to_string()).is_err());
}
