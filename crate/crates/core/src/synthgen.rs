//! Synthetic cohorts from a linear-Gaussian latent model.
//!
//! Every subject has latent age, sex, disease stage `s` and a hidden factor
//! `g`. Region features load on all four latents plus subject-level nuisance
//! factors shared across regions; auxiliary features load on age, sex and
//! stage only, so `g` reaches the images but never the auxiliary table.
//! Amyloid status and conversion depend on `g`, which makes them the tasks
//! where information beyond the auxiliary features pays off.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::encoder::RegionLayout;
use crate::error::{LabError, Result};
use crate::io::{fmt_f64, read_json, write_atomic, write_json};
use crate::matrix::DenseMatrix;

pub const DATASET_SCHEMA_VERSION: u32 = 1;

/// Horizons (years) for the conversion flags.
pub const CONVERSION_YEARS: [f64; 3] = [2.0, 3.0, 5.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LatentSpec {
    pub age_min: f64,
    pub age_max: f64,
    pub male_fraction: f64,
    /// Correlation between standardized age and stage.
    pub stage_age_coupling: f64,
    /// Stage thresholds CN|MCI and MCI|AD.
    pub mci_threshold: f64,
    pub ad_threshold: f64,
    pub hidden_std: f64,
    pub amyloid_noise_std: f64,
    pub amyloid_threshold: f64,
    /// Yearly stage drift: `max(0, mean + hidden_coef * g + std * N(0,1))`.
    pub drift_mean: f64,
    pub drift_hidden_coef: f64,
    pub drift_std: f64,
}

impl Default for LatentSpec {
    fn default() -> Self {
        Self {
            age_min: 44.0,
            age_max: 84.0,
            male_fraction: 0.5,
            stage_age_coupling: 0.3,
            // standard-normal quantiles of 0.368 and 0.828
            mci_threshold: -0.3372,
            ad_threshold: 0.9463,
            hidden_std: 1.0,
            amyloid_noise_std: 0.5,
            amyloid_threshold: 0.0,
            drift_mean: 0.15,
            drift_hidden_coef: 0.1,
            drift_std: 0.05,
        }
    }
}

/// Loading scales for region and auxiliary features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoadingSpec {
    /// Region loadings on (age_z, sex, stage, hidden).
    pub region: [f64; 4],
    /// Number of nuisance factors shared by all regions of a subject.
    pub nuisance_factors: usize,
    pub nuisance: f64,
    /// Auxiliary loadings on (age_z, sex, stage).
    pub aux: [f64; 3],
}

impl Default for LoadingSpec {
    fn default() -> Self {
        Self {
            region: [0.6, 0.3, 0.5, 0.5],
            nuisance_factors: 8,
            nuisance: 1.0,
            aux: [0.6, 0.3, 0.8],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSpec {
    pub region_std: f64,
    pub aux_std: f64,
    /// Scales the nuisance factors; zero removes them.
    pub nuisance_std: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            region_std: 1.0,
            aux_std: 0.1,
            nuisance_std: 1.0,
        }
    }
}

impl NoiseSpec {
    pub fn noiseless() -> Self {
        Self {
            region_std: 0.0,
            aux_std: 0.0,
            nuisance_std: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortConfig {
    pub n_subjects: usize,
    pub pretrain_fraction: f64,
    pub eval_fraction: f64,
    pub layout: RegionLayout,
    /// Width of the representations trained on this cohort (rank check).
    pub representation_dim: usize,
    pub latent: LatentSpec,
    pub loadings: LoadingSpec,
    pub noise: NoiseSpec,
    pub seed: u64,
}

impl Default for CohortConfig {
    fn default() -> Self {
        Self {
            n_subjects: 5000,
            pretrain_fraction: 0.8,
            eval_fraction: 0.2,
            layout: RegionLayout::standard(24),
            representation_dim: 64,
            latent: LatentSpec::default(),
            loadings: LoadingSpec::default(),
            noise: NoiseSpec::default(),
            seed: 0,
        }
    }
}

impl CohortConfig {
    pub fn min_subjects(&self) -> usize {
        2 * (self.layout.aux_dim() + self.representation_dim)
    }

    pub fn split_sizes(&self) -> (usize, usize) {
        let pre = (self.n_subjects as f64 * self.pretrain_fraction).round() as usize;
        let pre = pre.min(self.n_subjects);
        (pre, self.n_subjects - pre)
    }

    pub fn validate(&self) -> Result<()> {
        let sum = self.pretrain_fraction + self.eval_fraction;
        if (sum - 1.0).abs() > 1e-9 || self.pretrain_fraction < 0.0 || self.eval_fraction < 0.0 {
            return Err(LabError::invalid(format!(
                "split fractions must be non-negative and sum to 1, got {} + {}",
                self.pretrain_fraction, self.eval_fraction
            )));
        }
        if self.n_subjects < self.min_subjects() {
            return Err(LabError::invalid(format!(
                "n_subjects = {} violates the rank prerequisite; need at least {} (= 2 x (d1 {} + d2 {}))",
                self.n_subjects,
                self.min_subjects(),
                self.layout.aux_dim(),
                self.representation_dim
            )));
        }
        let l = &self.latent;
        if !(l.age_min < l.age_max) {
            return Err(LabError::invalid("age_min must be below age_max"));
        }
        if !(0.0..=1.0).contains(&l.male_fraction) {
            return Err(LabError::invalid("male_fraction must lie in [0, 1]"));
        }
        if !(l.stage_age_coupling.abs() < 1.0) {
            return Err(LabError::invalid("stage_age_coupling must lie in (-1, 1)"));
        }
        if !(l.mci_threshold < l.ad_threshold) {
            return Err(LabError::invalid("mci_threshold must be below ad_threshold"));
        }
        let n = &self.noise;
        for (name, v) in [
            ("region_std", n.region_std),
            ("aux_std", n.aux_std),
            ("nuisance_std", n.nuisance_std),
            ("hidden_std", l.hidden_std),
            ("amyloid_noise_std", l.amyloid_noise_std),
            ("drift_std", l.drift_std),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(LabError::invalid(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }

    /// Mean and standard deviation of the uniform age distribution.
    pub fn age_moments(&self) -> (f64, f64) {
        let (lo, hi) = (self.latent.age_min, self.latent.age_max);
        ((lo + hi) / 2.0, (hi - lo) / 12f64.sqrt())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Diagnosis {
    CN,
    MCI,
    AD,
}

impl fmt::Display for Diagnosis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Diagnosis::CN => "CN",
            Diagnosis::MCI => "MCI",
            Diagnosis::AD => "AD",
        })
    }
}

impl std::str::FromStr for Diagnosis {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "CN" => Ok(Diagnosis::CN),
            "MCI" => Ok(Diagnosis::MCI),
            "AD" => Ok(Diagnosis::AD),
            other => Err(format!("unknown diagnosis {other:?}")),
        }
    }
}

/// Per-subject labels and latents (feature vectors live in [`CohortSplit`]).
#[derive(Clone, Debug, PartialEq)]
pub struct Subject {
    pub id: String,
    pub age: f64,
    /// 1 = male.
    pub sex: u8,
    pub stage: f64,
    pub hidden: f64,
    pub diagnosis: Diagnosis,
    pub amyloid: bool,
    /// Converted by 2, 3 and 5 years.
    pub converted: [bool; 3],
}

/// A subject together with its feature vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectRecord {
    pub subject: Subject,
    pub region_features: Vec<Vec<f64>>,
    pub aux_features: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CohortSplit {
    pub name: String,
    pub subjects: Vec<Subject>,
    /// n x d1.
    pub aux: DenseMatrix,
    /// One n x raw_dim matrix per region, in layout order.
    pub regions: Vec<DenseMatrix>,
}

impl CohortSplit {
    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn ids(&self) -> Vec<String> {
        self.subjects.iter().map(|s| s.id.clone()).collect()
    }

    pub fn record(&self, i: usize) -> SubjectRecord {
        SubjectRecord {
            subject: self.subjects[i].clone(),
            region_features: self.regions.iter().map(|r| r.row(i).to_vec()).collect(),
            aux_features: self.aux.row(i).to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitInfo {
    pub name: String,
    pub n_subjects: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub seed: u64,
    pub config: CohortConfig,
    pub splits: Vec<SplitInfo>,
}

/// Generator loadings, kept for oracle checks.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorTruth {
    /// Per region: raw_dim x 4 on (age_z, sex, stage, hidden).
    pub region_loadings: Vec<DenseMatrix>,
    /// Per region: raw_dim x k nuisance loadings.
    pub nuisance_loadings: Vec<DenseMatrix>,
    /// d1 x 3 on (age_z, sex, stage).
    pub aux_loadings: DenseMatrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cohort {
    pub manifest: Manifest,
    pub pretrain: CohortSplit,
    pub eval: CohortSplit,
}

impl Cohort {
    pub fn layout(&self) -> &RegionLayout {
        &self.manifest.config.layout
    }

    pub fn split(&self, name: &str) -> Result<&CohortSplit> {
        match name {
            "pretrain" => Ok(&self.pretrain),
            "eval" => Ok(&self.eval),
            other => Err(LabError::invalid(format!(
                "unknown split {other:?} (expected pretrain or eval)"
            ))),
        }
    }
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn random_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, col_scale: &[f64]) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, j| normal(rng) * col_scale[j])
}

/// Samples a cohort; deterministic given `config.seed`.
pub fn generate_cohort(config: &CohortConfig) -> Result<(Cohort, GeneratorTruth)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let layout = &config.layout;
    let lat = &config.latent;
    let ld = &config.loadings;
    let noise = &config.noise;
    let k = ld.nuisance_factors;

    let region_loadings: Vec<DenseMatrix> = layout
        .regions()
        .iter()
        .map(|r| random_matrix(&mut rng, r.raw_dim, 4, &ld.region))
        .collect();
    let nuisance_loadings: Vec<DenseMatrix> = layout
        .regions()
        .iter()
        .map(|r| random_matrix(&mut rng, r.raw_dim, k, &vec![ld.nuisance; k]))
        .collect();
    let d1 = layout.aux_dim();
    let aux_loadings = random_matrix(&mut rng, d1, 3, &ld.aux);

    let (age_mean, age_sd) = config.age_moments();
    let coupling = lat.stage_age_coupling;
    let n = config.n_subjects;
    let mut subjects = Vec::with_capacity(n);
    let mut aux = DenseMatrix::zeros(n, d1);
    let mut regions: Vec<DenseMatrix> = layout
        .regions()
        .iter()
        .map(|r| DenseMatrix::zeros(n, r.raw_dim))
        .collect();

    for i in 0..n {
        let age = rng.random_range(lat.age_min..lat.age_max);
        let age_z = (age - age_mean) / age_sd;
        let sex: u8 = u8::from(rng.random::<f64>() < lat.male_fraction);
        let stage = coupling * age_z + (1.0 - coupling * coupling).sqrt() * normal(&mut rng);
        let hidden = lat.hidden_std * normal(&mut rng);
        let amyloid =
            stage + hidden + lat.amyloid_noise_std * normal(&mut rng) > lat.amyloid_threshold;
        let drift = (lat.drift_mean + lat.drift_hidden_coef * hidden + lat.drift_std * normal(&mut rng))
            .max(0.0);
        let diagnosis = if stage >= lat.ad_threshold {
            Diagnosis::AD
        } else if stage >= lat.mci_threshold {
            Diagnosis::MCI
        } else {
            Diagnosis::CN
        };
        let converted = CONVERSION_YEARS.map(|t| stage + drift * t >= lat.ad_threshold);

        let latent = [age_z, f64::from(sex), stage, hidden];
        let nuisance: Vec<f64> = (0..k)
            .map(|_| noise.nuisance_std * normal(&mut rng))
            .collect();
        for (l, feats) in regions.iter_mut().enumerate() {
            let w = &region_loadings[l];
            let u = &nuisance_loadings[l];
            for j in 0..feats.cols() {
                let mut v: f64 = (0..4).map(|c| w.get(j, c) * latent[c]).sum();
                v += (0..k).map(|c| u.get(j, c) * nuisance[c]).sum::<f64>();
                if noise.region_std > 0.0 {
                    v += noise.region_std * normal(&mut rng);
                }
                feats.set(i, j, v);
            }
        }
        for j in 0..d1 {
            let mut v: f64 = (0..3).map(|c| aux_loadings.get(j, c) * latent[c]).sum();
            if noise.aux_std > 0.0 {
                v += noise.aux_std * normal(&mut rng);
            }
            aux.set(i, j, v);
        }
        subjects.push(Subject {
            id: format!("S{:06}", i + 1),
            age,
            sex,
            stage,
            hidden,
            diagnosis,
            amyloid,
            converted,
        });
    }

    let (n_pre, _) = config.split_sizes();
    let take = |name: &str, range: std::ops::Range<usize>| -> CohortSplit {
        let idx: Vec<usize> = range.clone().collect();
        CohortSplit {
            name: name.to_string(),
            subjects: subjects[range].to_vec(),
            aux: aux.select_rows(&idx),
            regions: regions.iter().map(|r| r.select_rows(&idx)).collect(),
        }
    };
    let pretrain = take("pretrain", 0..n_pre);
    let eval = take("eval", n_pre..n);
    let manifest = Manifest {
        schema_version: DATASET_SCHEMA_VERSION,
        seed: config.seed,
        config: config.clone(),
        splits: vec![
            SplitInfo {
                name: "pretrain".into(),
                n_subjects: pretrain.len(),
            },
            SplitInfo {
                name: "eval".into(),
                n_subjects: eval.len(),
            },
        ],
    };
    Ok((
        Cohort {
            manifest,
            pretrain,
            eval,
        },
        GeneratorTruth {
            region_loadings,
            nuisance_loadings,
            aux_loadings,
        },
    ))
}

const SUBJECT_HEADER: &str = "id,age,sex,stage,g,diagnosis,amyloid,converted_2y,converted_3y,converted_5y";

fn matrix_csv(ids: &[String], m: &DenseMatrix, prefix: &str) -> String {
    let mut s = String::from("id");
    for j in 0..m.cols() {
        s.push_str(&format!(",{prefix}{j}"));
    }
    s.push('\n');
    for (i, id) in ids.iter().enumerate() {
        s.push_str(id);
        for v in m.row(i) {
            s.push(',');
            s.push_str(&fmt_f64(*v));
        }
        s.push('\n');
    }
    s
}

fn subjects_csv(subjects: &[Subject]) -> String {
    let mut s = String::from(SUBJECT_HEADER);
    s.push('\n');
    for x in subjects {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            x.id,
            fmt_f64(x.age),
            x.sex,
            fmt_f64(x.stage),
            fmt_f64(x.hidden),
            x.diagnosis,
            u8::from(x.amyloid),
            u8::from(x.converted[0]),
            u8::from(x.converted[1]),
            u8::from(x.converted[2]),
        ));
    }
    s
}

/// Writes `manifest.json` plus one directory of CSVs per split.
pub fn write_cohort(cohort: &Cohort, dir: &Path) -> Result<()> {
    for split in [&cohort.pretrain, &cohort.eval] {
        let sdir = dir.join(&split.name);
        let ids = split.ids();
        write_atomic(&sdir.join("subjects.csv"), subjects_csv(&split.subjects).as_bytes())?;
        write_atomic(&sdir.join("aux.csv"), matrix_csv(&ids, &split.aux, "aux").as_bytes())?;
        for (region, m) in cohort.layout().regions().iter().zip(&split.regions) {
            let path = sdir.join(format!("region_{}.csv", region.name));
            write_atomic(&path, matrix_csv(&ids, m, "f").as_bytes())?;
        }
    }
    write_json(&dir.join("manifest.json"), &cohort.manifest)
}

struct CsvTable {
    path: PathBuf,
    header: Vec<String>,
    rows: Vec<(u64, Vec<String>)>,
    len: u64,
}

fn read_csv(path: &Path) -> Result<CsvTable> {
    let bytes = fs::read(path).map_err(|e| LabError::io(path, e))?;
    let len = bytes.len() as u64;
    if !bytes.is_empty() && !bytes.ends_with(b"\n") {
        return Err(LabError::Parse {
            path: path.to_path_buf(),
            offset: len,
            msg: "file is truncated (no terminating newline)".into(),
        });
    }
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(bytes.as_slice());
    let header = rdr
        .headers()
        .map_err(|e| csv_error(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let offset = rec.position().map_or(0, |p| p.byte());
        rows.push((offset, rec.iter().map(str::to_string).collect()));
    }
    Ok(CsvTable {
        path: path.to_path_buf(),
        header,
        rows,
        len,
    })
}

fn csv_error(path: &Path, e: csv::Error) -> LabError {
    let offset = e.position().map_or(0, |p| p.byte());
    LabError::Parse {
        path: path.to_path_buf(),
        offset,
        msg: e.to_string(),
    }
}

impl CsvTable {
    fn err(&self, offset: u64, msg: impl Into<String>) -> LabError {
        LabError::Parse {
            path: self.path.clone(),
            offset,
            msg: msg.into(),
        }
    }

    fn parse<T: std::str::FromStr>(&self, offset: u64, field: &str, what: &str) -> Result<T> {
        field
            .parse()
            .map_err(|_| self.err(offset, format!("cannot parse {what} from {field:?}")))
    }

    fn expect_ids(&self, ids: &[String]) -> Result<()> {
        if self.rows.len() != ids.len() {
            return Err(self.err(
                self.len,
                format!("expected {} rows, found {}", ids.len(), self.rows.len()),
            ));
        }
        for ((off, row), id) in self.rows.iter().zip(ids) {
            if &row[0] != id {
                return Err(self.err(*off, format!("expected id {id}, found {}", row[0])));
            }
        }
        Ok(())
    }

    fn matrix(&self, ids: &[String], cols: usize) -> Result<DenseMatrix> {
        if self.header.len() != cols + 1 {
            return Err(self.err(
                0,
                format!("expected {} columns, found {}", cols + 1, self.header.len()),
            ));
        }
        self.expect_ids(ids)?;
        let mut m = DenseMatrix::zeros(ids.len(), cols);
        for (i, (off, row)) in self.rows.iter().enumerate() {
            for j in 0..cols {
                let v: f64 = self.parse(*off, &row[j + 1], "float")?;
                if !v.is_finite() {
                    return Err(self.err(*off, "non-finite value"));
                }
                m.set(i, j, v);
            }
        }
        Ok(m)
    }

    fn subjects(&self) -> Result<Vec<Subject>> {
        if self.header.join(",") != SUBJECT_HEADER {
            return Err(self.err(0, format!("unexpected header {:?}", self.header.join(","))));
        }
        self.rows
            .iter()
            .map(|(off, r)| {
                let flag = |s: &str| -> Result<bool> {
                    match s {
                        "0" => Ok(false),
                        "1" => Ok(true),
                        other => Err(self.err(*off, format!("expected 0/1, found {other:?}"))),
                    }
                };
                Ok(Subject {
                    id: r[0].clone(),
                    age: self.parse(*off, &r[1], "age")?,
                    sex: self.parse(*off, &r[2], "sex")?,
                    stage: self.parse(*off, &r[3], "stage")?,
                    hidden: self.parse(*off, &r[4], "g")?,
                    diagnosis: self.parse(*off, &r[5], "diagnosis")?,
                    amyloid: flag(&r[6])?,
                    converted: [flag(&r[7])?, flag(&r[8])?, flag(&r[9])?],
                })
            })
            .collect()
    }
}

/// Loads a dataset directory written by [`write_cohort`].
pub fn load_cohort(dir: &Path) -> Result<Cohort> {
    let mpath = dir.join("manifest.json");
    #[derive(Deserialize)]
    struct Probe {
        schema_version: u32,
    }
    let probe: Probe = read_json(&mpath)?;
    if probe.schema_version != DATASET_SCHEMA_VERSION {
        return Err(LabError::Schema {
            path: mpath,
            found: probe.schema_version,
            expected: DATASET_SCHEMA_VERSION,
        });
    }
    let manifest: Manifest = read_json(&mpath)?;
    let layout = manifest.config.layout.clone();
    let mut splits = Vec::new();
    for info in &manifest.splits {
        let sdir = dir.join(&info.name);
        let subjects = read_csv(&sdir.join("subjects.csv"))?.subjects()?;
        if subjects.len() != info.n_subjects {
            return Err(LabError::invalid(format!(
                "split {} lists {} subjects in the manifest but {} in subjects.csv",
                info.name,
                info.n_subjects,
                subjects.len()
            )));
        }
        let ids: Vec<String> = subjects.iter().map(|s| s.id.clone()).collect();
        let aux = read_csv(&sdir.join("aux.csv"))?.matrix(&ids, layout.aux_dim())?;
        let regions = layout
            .regions()
            .iter()
            .map(|r| read_csv(&sdir.join(format!("region_{}.csv", r.name)))?.matrix(&ids, r.raw_dim))
            .collect::<Result<Vec<_>>>()?;
        splits.push(CohortSplit {
            name: info.name.clone(),
            subjects,
            aux,
            regions,
        });
    }
    let total: usize = splits.iter().map(CohortSplit::len).sum();
    if total == 0 {
        return Err(LabError::invalid(format!("{}: cohort has no subjects", dir.display())));
    }
    let mut pretrain = None;
    let mut eval = None;
    for s in splits {
        match s.name.as_str() {
            "pretrain" => pretrain = Some(s),
            "eval" => eval = Some(s),
            other => return Err(LabError::invalid(format!("unknown split {other:?} in manifest"))),
        }
    }
    let missing = |n: &str| LabError::invalid(format!("manifest lacks the {n} split"));
    Ok(Cohort {
        manifest,
        pretrain: pretrain.ok_or_else(|| missing("pretrain"))?,
        eval: eval.ok_or_else(|| missing("eval"))?,
    })
}
