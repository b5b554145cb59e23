use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rnce_lab::brainage::{AssociationReport, CorrelationMatrix};
use rnce_lab::cli::{BagOutputs, Envelope, RunSummary};
use rnce_lab::config::RunConfig;
use rnce_lab::encoder::{AggregatorCheckpoint, PatchCheckpoint};
use rnce_lab::evalstats::{FeatureTable, ProbeReport};
use rnce_lab::io::read_json;
use rnce_lab::synthgen::{load_cohort, Manifest};
use rnce_lab::trainer::{TrainConfig, TrainReport};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rnce-lab"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().args(args).current_dir(dir).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) {
    let o = run(dir, args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
}

/// A very small run config written into `dir`.
fn tiny_config(dir: &Path) -> PathBuf {
    let cfg = serde_json::json!({
        "seed": 3,
        "output_dir": "out",
        "cohort": { "n_subjects": 1000 },
        "encoder": { "hidden_layers": 1, "hidden_width": 8, "embed_dim": 8, "n_blocks": 1, "n_heads": 2, "mlp_width": 8 },
        "train": {
            "rnce.patch": { "steps": 3, "batch_size": 16 },
            "rnce.aggregate": { "steps": 3, "batch_size": 16 },
            "simclr.patch": { "steps": 3, "batch_size": 16 },
            "simclr.aggregate": { "steps": 3, "batch_size": 16 }
        },
        "probe": {
            "feature_sets": ["rnce", "simclr", "aux"],
            "compare": { "bootstrap": { "n_boot": 5, "holdout": 30 }, "n_perm": 50 }
        },
        "bag": { "feature_sets": ["rnce", "aux", "simclr"], "per_bucket": 20 }
    });
    let path = dir.join("run.json");
    fs::write(&path, serde_json::to_vec_pretty(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn missing_config_exits_with_two_and_names_path() {
    let d = tempfile::tempdir().unwrap();
    let o = run(d.path(), &["gen", "--config", "absent.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("absent.json"));
}

#[test]
fn invalid_config_names_the_failing_validation() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path().join("bad.json");
    fs::write(&p, r#"{"seed": 1, "output_dir": "o", "cohort": {"n_subjects": 20}}"#).unwrap();
    let o = run(d.path(), &["gen", "--config", "bad.json"]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("152"), "{err}");

    fs::write(&p, r#"{"output_dir": "o"}"#).unwrap();
    let o = run(d.path(), &["gen", "--config", "bad.json"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("seed"));
}

#[test]
fn aggregate_before_patch_is_a_dependency_error() {
    let d = tempfile::tempdir().unwrap();
    let c = tiny_config(d.path());
    let c = c.to_str().unwrap();
    ok(d.path(), &["gen", "--config", c]);
    let o = run(d.path(), &["train", "--config", c, "--method", "rnce", "--level", "aggregate"]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("missing dependency") && err.contains("--level patch"), "{err}");
    assert!(!d.path().join("out/models/rnce/aggregator.json").exists());
}

#[test]
fn unknown_probe_task_lists_valid_tasks() {
    let d = tempfile::tempdir().unwrap();
    let c = tiny_config(d.path());
    let c = c.to_str().unwrap();
    ok(d.path(), &["gen", "--config", c]);
    let o = run(d.path(), &["probe", "--config", c, "--aux", "--task", "conv_9y"]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("conv_9y") && err.contains("age_regression") && err.contains("ad_vs_cn"), "{err}");
}

#[test]
fn gen_is_reproducible_and_seed_flag_overrides() {
    let d = tempfile::tempdir().unwrap();
    let c = tiny_config(d.path());
    let c = c.to_str().unwrap();
    ok(d.path(), &["gen", "--config", c, "--data", "a"]);
    ok(d.path(), &["gen", "--config", c, "--data", "b"]);
    ok(d.path(), &["gen", "--config", c, "--data", "s", "--seed", "4"]);
    for f in ["manifest.json", "pretrain/subjects.csv", "eval/aux.csv", "eval/region_left_mtl.csv"] {
        assert_eq!(fs::read(d.path().join("a").join(f)).unwrap(), fs::read(d.path().join("b").join(f)).unwrap());
    }
    let m: Manifest = read_json(&d.path().join("s/manifest.json")).unwrap();
    assert_eq!(m.seed, 4);
    assert_ne!(
        fs::read(d.path().join("a/eval/aux.csv")).unwrap(),
        fs::read(d.path().join("s/eval/aux.csv")).unwrap()
    );
}

#[test]
fn pipeline_outputs_match_their_schemas() {
    let d = tempfile::tempdir().unwrap();
    let c = tiny_config(d.path());
    let c = c.to_str().unwrap();
    ok(d.path(), &["gen", "--config", c]);
    for m in ["rnce", "simclr"] {
        ok(d.path(), &["train", "--config", c, "--method", m, "--level", "patch"]);
        ok(d.path(), &["train", "--config", c, "--method", m, "--level", "aggregate"]);
        ok(d.path(), &["embed", "--config", c, "--method", m]);
    }
    ok(d.path(), &["probe", "--config", c, "--method", "rnce", "--task", "amyloid", "--task", "ad_vs_cn"]);
    ok(d.path(), &["compare", "--config", c]);
    ok(d.path(), &["bag", "--config", c]);
    ok(d.path(), &["report", "--config", c]);
    let out = d.path().join("out");

    let cohort = load_cohort(&out.join("data")).unwrap();
    let layout = cohort.layout();
    let patches: Vec<_> = fs::read_dir(out.join("models/rnce/patch")).unwrap().collect();
    assert_eq!(patches.len(), layout.len());
    assert!(patches.iter().all(|e| !e.as_ref().unwrap().file_name().to_string_lossy().starts_with('.')));
    for r in layout.regions() {
        let ck = PatchCheckpoint::load(&out.join(format!("models/rnce/patch/{}.json", r.name))).unwrap();
        assert_eq!(&ck.region, r);
    }
    AggregatorCheckpoint::load(&out.join("models/simclr/aggregator.json")).unwrap();

    let tr: Envelope<(TrainConfig, Vec<TrainReport>)> = read_json(&out.join("models/rnce/patch_report.json")).unwrap();
    assert_eq!(tr.seed, 3);
    assert_eq!(tr.result.1.len(), layout.len());
    assert_eq!(tr.result.0.seed, 3);
    assert_eq!(tr.config.cohort.seed, 3);
    let ar: Envelope<(TrainConfig, Vec<TrainReport>)> =
        read_json(&out.join("models/rnce/aggregate_report.json")).unwrap();
    assert!(ar.result.1[0].frozen_checksum.is_some());

    let image = FeatureTable::read_csv(&out.join("embeddings/rnce/eval/image.csv")).unwrap();
    assert_eq!(image.ids, cohort.eval.ids());
    assert_eq!(image.features.cols(), 8);
    FeatureTable::read_csv(&out.join("embeddings/simclr/pretrain/region_right_mtl.csv")).unwrap();

    let probe: Envelope<ProbeReport> = read_json(&out.join("probe/rnce.json")).unwrap();
    assert_eq!(probe.result.results.len(), 2);
    assert!(probe.result.comparisons.is_empty());

    let cmp: Envelope<ProbeReport> = read_json(&out.join("compare/report.json")).unwrap();
    assert_eq!(cmp.result.results.len(), 3 * 8);
    assert_eq!(cmp.result.comparisons.len(), 3 * 8);
    assert!(cmp.result.comparisons.iter().all(|c| c.resolution == 1.0 / 50.0));
    let values = fs::read_to_string(out.join("compare/report_values.csv")).unwrap();
    assert_eq!(values.lines().next(), Some("feature_set,task,replicate,value"));
    assert_eq!(values.lines().count(), 1 + 3 * 8 * 5);

    let bag: Envelope<BagOutputs> = read_json(&out.join("bag/bag_report.json")).unwrap();
    assert_eq!(bag.result.fit_metrics.len(), 3);
    let corr: &CorrelationMatrix = &bag.result.correlation;
    assert_eq!(corr.labels, ["rnce", "aux", "simclr"]);
    for i in 0..3 {
        assert_eq!(corr.values[i][i], 1.0);
        for j in 0..3 {
            assert_eq!(corr.values[i][j], corr.values[j][i]);
        }
    }
    let assoc: &Vec<AssociationReport> = &bag.result.associations;
    assert_eq!(assoc.len(), 3);
    for set in ["rnce", "aux", "simclr"] {
        let csv = fs::read_to_string(out.join(format!("bag/{set}_bag.csv"))).unwrap();
        assert!(csv.starts_with("id,predicted_age,raw_bag,debiased_bag\n"));
        assert_eq!(csv.lines().count(), 1 + cohort.eval.len());
    }

    let summary: Envelope<RunSummary> = read_json(&out.join("summary.json")).unwrap();
    assert_eq!(summary.result.training.len(), 4);
    assert!(summary.result.compare.is_some() && summary.result.bag.is_some());
    let _: RunConfig = summary.config;
}
