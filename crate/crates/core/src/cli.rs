//! Command implementations behind the `rnce-lab` binary. Every command
//! reads a resolved [`RunConfig`] and writes under its output directory
//! with fixed file names.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::brainage::{
    bag_fit_metrics, bag_outcome_association, compute_bag, cross_bag_correlation, fit_bag_model,
    select_balanced_subset, AssociationReport, BagFitMetrics, CorrelationMatrix,
};
use crate::config::{validate_feature_set, RunConfig, FEATURE_SET_AUX};
use crate::encoder::{AggregatorCheckpoint, PatchCheckpoint, PatchEncoderParams};
use crate::error::{LabError, Result};
use crate::evalstats::{compare_feature_sets, FeatureTable, ProbeReport, ProbeTask};
use crate::io::{read_json, write_atomic, write_json};
use crate::parallel::ExecMode;
use crate::synthgen::{generate_cohort, load_cohort, write_cohort, Cohort, Diagnosis};
use crate::trainer::{
    embed_cohort, train_aggregator, train_patch_models, Level, Method, SubsetSplit, TrainReport,
};

pub const SPLITS: [&str; 2] = ["pretrain", "eval"];

/// Report file wrapper carrying the resolved configuration.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Envelope<T> {
    pub command: String,
    pub seed: u64,
    pub config: RunConfig,
    pub result: T,
}

impl<T> Envelope<T> {
    fn new(command: &str, cfg: &RunConfig, result: T) -> Self {
        Self {
            command: command.to_string(),
            seed: cfg.seed,
            config: cfg.clone(),
            result,
        }
    }
}

/// Output locations for one run.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub out: PathBuf,
    pub data: PathBuf,
}

impl RunPaths {
    pub fn of(cfg: &RunConfig) -> Result<Self> {
        Ok(Self {
            out: cfg.output_dir()?.to_path_buf(),
            data: cfg.data_dir()?,
        })
    }

    pub fn model_dir(&self, method: Method) -> PathBuf {
        self.out.join("models").join(method.name())
    }

    pub fn patch_checkpoint(&self, method: Method, region: &str) -> PathBuf {
        self.model_dir(method).join("patch").join(format!("{region}.json"))
    }

    pub fn aggregator_checkpoint(&self, method: Method) -> PathBuf {
        self.model_dir(method).join("aggregator.json")
    }

    pub fn train_report(&self, method: Method, level: Level) -> PathBuf {
        self.model_dir(method).join(format!("{level}_report.json"))
    }

    pub fn embedding_dir(&self, method: Method, split: &str) -> PathBuf {
        self.out.join("embeddings").join(method.name()).join(split)
    }

    pub fn probe_report(&self, set: &str) -> PathBuf {
        self.out.join("probe").join(format!("{set}.json"))
    }

    pub fn compare_dir(&self) -> PathBuf {
        self.out.join("compare")
    }

    pub fn bag_dir(&self) -> PathBuf {
        self.out.join("bag")
    }

    pub fn summary(&self) -> PathBuf {
        self.out.join("summary.json")
    }
}

fn require(path: &Path, hint: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(LabError::Missing(format!("{} not found; {hint}", path.display())))
    }
}

fn load_data(paths: &RunPaths) -> Result<Cohort> {
    require(&paths.data.join("manifest.json"), "run `gen` first")?;
    load_cohort(&paths.data)
}

fn check_cohort_seed(cfg: &RunConfig, cohort: &Cohort) -> Result<()> {
    if cohort.manifest.seed != cfg.seed {
        return Err(LabError::invalid(format!(
            "dataset was generated with seed {} but the run uses seed {}",
            cohort.manifest.seed, cfg.seed
        )));
    }
    Ok(())
}

/// `gen`: samples the cohort and writes it to the data directory.
pub fn cmd_gen(cfg: &RunConfig) -> Result<PathBuf> {
    let paths = RunPaths::of(cfg)?;
    let (cohort, _) = generate_cohort(&cfg.cohort)?;
    write_cohort(&cohort, &paths.data)?;
    Ok(paths.data)
}

/// `train`: patch level writes one checkpoint per region; aggregate level
/// needs every patch checkpoint of the same method.
pub fn cmd_train(cfg: &RunConfig, method: Method, level: Level, mode: ExecMode) -> Result<Vec<TrainReport>> {
    let paths = RunPaths::of(cfg)?;
    let cohort = load_data(&paths)?;
    check_cohort_seed(cfg, &cohort)?;
    let layout = cohort.layout();
    let tc = cfg.train_config(method, level);
    let reports = match level {
        Level::Patch => {
            let trained = train_patch_models(&cohort.pretrain, layout, &cfg.encoder, &tc, mode)?;
            for (region, params) in layout.regions().iter().zip(trained.params) {
                PatchCheckpoint::new(region.clone(), cfg.encoder.clone(), params)
                    .save(&paths.patch_checkpoint(method, &region.name))?;
            }
            trained.reports
        }
        Level::Aggregate => {
            let patches = load_patches(&paths, cfg, &cohort, method)?;
            let (params, report) =
                train_aggregator(&cohort.pretrain, layout, &patches, &cfg.encoder, &tc, SubsetSplit::Random)?;
            AggregatorCheckpoint::new(layout.clone(), cfg.encoder.clone(), params)
                .save(&paths.aggregator_checkpoint(method))?;
            vec![report]
        }
    };
    write_json(
        &paths.train_report(method, level),
        &Envelope::new("train", cfg, (&tc, &reports)),
    )?;
    Ok(reports)
}

fn load_patches(paths: &RunPaths, cfg: &RunConfig, cohort: &Cohort, method: Method) -> Result<Vec<PatchEncoderParams>> {
    let layout = cohort.layout();
    let missing: Vec<&str> = layout
        .regions()
        .iter()
        .filter(|r| !paths.patch_checkpoint(method, &r.name).exists())
        .map(|r| r.name.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(LabError::Missing(format!(
            "{} of {} patch checkpoints for {method} are absent (first: {}); run `train --method {method} --level patch` first",
            missing.len(),
            layout.len(),
            missing[0]
        )));
    }
    layout
        .regions()
        .iter()
        .map(|r| {
            let path = paths.patch_checkpoint(method, &r.name);
            let ck = PatchCheckpoint::load(&path)?;
            if ck.region != *r || ck.config != cfg.encoder {
                return Err(LabError::invalid(format!(
                    "{} does not match the current layout or encoder config",
                    path.display()
                )));
            }
            Ok(ck.params)
        })
        .collect()
}

/// `embed`: writes image and per-region representations for both splits.
pub fn cmd_embed(cfg: &RunConfig, method: Method) -> Result<()> {
    let paths = RunPaths::of(cfg)?;
    let cohort = load_data(&paths)?;
    let patches = load_patches(&paths, cfg, &cohort, method)?;
    let agg_path = paths.aggregator_checkpoint(method);
    require(&agg_path, &format!("run `train --method {method} --level aggregate` first"))?;
    let agg = AggregatorCheckpoint::load(&agg_path)?;
    if agg.layout != *cohort.layout() || agg.config != cfg.encoder {
        return Err(LabError::invalid(format!(
            "{} does not match the current layout or encoder config",
            agg_path.display()
        )));
    }
    for name in SPLITS {
        let split = cohort.split(name)?;
        let table = embed_cohort(split, cohort.layout(), &patches, &agg.params, &cfg.encoder)?;
        table.write(&paths.embedding_dir(method, name))?;
    }
    Ok(())
}

/// Image-level features of a named set on one split.
pub fn feature_table(paths: &RunPaths, cohort: &Cohort, set: &str, split: &str) -> Result<FeatureTable> {
    validate_feature_set(set)?;
    if set == FEATURE_SET_AUX {
        let s = cohort.split(split)?;
        return FeatureTable::new(s.ids(), s.aux.clone());
    }
    let method: Method = set.parse()?;
    let path = paths.embedding_dir(method, split).join("image.csv");
    require(&path, &format!("run `embed --method {method}` first"))?;
    FeatureTable::read_csv(&path)
}

fn write_probe_outputs(
    cfg: &RunConfig,
    dir: &Path,
    stem: &str,
    sets: &[String],
    tasks: &[ProbeTask],
    command: &str,
) -> Result<ProbeReport> {
    let paths = RunPaths::of(cfg)?;
    let cohort = load_data(&paths)?;
    let tables = sets
        .iter()
        .map(|s| Ok((s.clone(), feature_table(&paths, &cohort, s, "eval")?)))
        .collect::<Result<Vec<_>>>()?;
    let (report, samples) = compare_feature_sets(&tables, &cohort.eval.subjects, tasks, &cfg.probe.compare)?;
    write_json(&dir.join(format!("{stem}.json")), &Envelope::new(command, cfg, &report))?;
    write_atomic(
        &dir.join(format!("{stem}_values.csv")),
        ProbeReport::values_csv(&samples).as_bytes(),
    )?;
    Ok(report)
}

/// `probe`: bootstrap metrics for one feature set, without comparisons.
pub fn cmd_probe(cfg: &RunConfig, set: &str, tasks: Option<&[ProbeTask]>) -> Result<ProbeReport> {
    validate_feature_set(set)?;
    let paths = RunPaths::of(cfg)?;
    let tasks = tasks.unwrap_or(&cfg.probe.tasks);
    let dir = paths.probe_report(set).parent().map(Path::to_path_buf).unwrap_or_default();
    write_probe_outputs(cfg, &dir, set, &[set.to_string()], tasks, "probe")
}

/// `compare`: every configured feature set on every configured task.
pub fn cmd_compare(cfg: &RunConfig) -> Result<ProbeReport> {
    let paths = RunPaths::of(cfg)?;
    write_probe_outputs(
        cfg,
        &paths.compare_dir(),
        "report",
        &cfg.probe.feature_sets,
        &cfg.probe.tasks,
        "compare",
    )
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BagOutputs {
    pub fit_subset_size: usize,
    pub fit_metrics: Vec<BagFitMetrics>,
    pub correlation: CorrelationMatrix,
    pub associations: Vec<AssociationReport>,
}

/// Outcomes regressed on the debiased gap, keyed by name then subject id.
pub fn bag_outcomes(cohort: &Cohort) -> BTreeMap<String, HashMap<String, f64>> {
    let mut out: BTreeMap<String, HashMap<String, f64>> = BTreeMap::new();
    for s in &cohort.eval.subjects {
        let mut put = |k: &str, v: f64| {
            out.entry(k.to_string()).or_default().insert(s.id.clone(), v);
        };
        put("amyloid", f64::from(u8::from(s.amyloid)));
        put("stage", s.stage);
        put("hidden", s.hidden);
        put("ad", f64::from(u8::from(s.diagnosis == Diagnosis::AD)));
        if s.diagnosis != Diagnosis::AD {
            put("conv_5y", f64::from(u8::from(s.converted[2])));
        }
    }
    out
}

/// `bag`: age models fit on a balanced pretrain subset, gaps on the eval
/// split, fit metrics, cross-gap correlations and outcome associations.
pub fn cmd_bag(cfg: &RunConfig) -> Result<BagOutputs> {
    let paths = RunPaths::of(cfg)?;
    let cohort = load_data(&paths)?;
    let b = &cfg.bag;
    if b.feature_sets.is_empty() {
        return Err(LabError::invalid("bag.feature_sets must not be empty"));
    }
    let subset = select_balanced_subset(&cohort.pretrain.subjects, b.per_bucket, cfg.seed)?;
    let outcomes = bag_outcomes(&cohort);
    let dir = paths.bag_dir();
    let mut tables = Vec::new();
    for set in &b.feature_sets {
        let train = feature_table(&paths, &cohort, set, "pretrain")?;
        let eval = feature_table(&paths, &cohort, set, "eval")?;
        let model = fit_bag_model(set, &train, &cohort.pretrain.subjects, &subset, b.penalty)?;
        let table = compute_bag(&model, &eval, &cohort.eval.subjects, b.basis)?;
        table.write_csv(&dir.join(format!("{set}_bag.csv")))?;
        tables.push(table);
    }
    let out = BagOutputs {
        fit_subset_size: subset.len(),
        fit_metrics: tables.iter().map(bag_fit_metrics).collect::<Result<_>>()?,
        correlation: cross_bag_correlation(&tables)?,
        associations: tables
            .iter()
            .map(|t| bag_outcome_association(t, &outcomes, b.alpha))
            .collect::<Result<_>>()?,
    };
    write_json(&dir.join("bag_report.json"), &Envelope::new("bag", cfg, &out))?;
    Ok(out)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub method: Method,
    pub level: Level,
    pub runs: usize,
    pub mean_initial_loss: f64,
    pub mean_final_loss: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct RunSummary {
    pub training: Vec<TrainSummary>,
    pub compare: Option<ProbeReport>,
    pub bag: Option<BagOutputs>,
}

/// `report`: collects whatever artifacts exist into `summary.json`.
pub fn cmd_report(cfg: &RunConfig) -> Result<RunSummary> {
    let paths = RunPaths::of(cfg)?;
    let mut summary = RunSummary::default();
    for method in Method::ALL {
        for level in [Level::Patch, Level::Aggregate] {
            let path = paths.train_report(method, level);
            if !path.exists() {
                continue;
            }
            let env: Envelope<(serde_json::Value, Vec<TrainReport>)> = read_json(&path)?;
            let reports = env.result.1;
            let mean = |f: fn(&TrainReport) -> Option<f64>| {
                let v: Vec<f64> = reports.iter().filter_map(f).collect();
                v.iter().sum::<f64>() / v.len().max(1) as f64
            };
            summary.training.push(TrainSummary {
                method,
                level,
                runs: reports.len(),
                mean_initial_loss: mean(TrainReport::initial_loss),
                mean_final_loss: mean(TrainReport::final_loss),
            });
        }
    }
    let compare = paths.compare_dir().join("report.json");
    if compare.exists() {
        let env: Envelope<ProbeReport> = read_json(&compare)?;
        let mut r = env.result;
        for m in &mut r.results {
            m.values = None;
        }
        summary.compare = Some(r);
    }
    let bag = paths.bag_dir().join("bag_report.json");
    if bag.exists() {
        summary.bag = Some(read_json::<Envelope<BagOutputs>>(&bag)?.result);
    }
    write_json(&paths.summary(), &Envelope::new("report", cfg, &summary))?;
    Ok(summary)
}

/// Every regular file under `dir`, relative and sorted.
pub fn list_outputs(dir: &Path) -> Result<Vec<PathBuf>> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        for entry in fs::read_dir(dir).map_err(|e| LabError::io(dir, e))? {
            let path = entry.map_err(|e| LabError::io(dir, e))?.path();
            if path.is_dir() {
                walk(root, &path, out)?;
            } else if let Ok(rel) = path.strip_prefix(root) {
                out.push(rel.to_path_buf());
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out)?;
    out.sort();
    Ok(out)
}
