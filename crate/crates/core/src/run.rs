//! Config-driven commands: generate a dataset, train, evaluate, ablate.
//!
//! A run directory looks like
//!
//! ```text
//! <out>/dataset/             manifest.json, tensors, config.json
//! <out>/train/               best/, final/, train_log.csv, config.json
//! <out>/eval/                metrics.csv, config.json
//! <out>/ablate/              <variant>-s<seed>/, metrics.csv, runs.json, config.json
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{generate_dataset, load_dataset, save_dataset, Dataset, DatasetConfig, DatasetManifest};
use crate::error::{Error, Result};
use crate::eval::{ablation_suite, evaluate_model, AblationResult, MetricsTable};
use crate::model::{load_checkpoint, read_manifest, TnoConfig, Variant};
use crate::tensor::Scalar;
use crate::train::{train_run, TrainLog, TrainPlan};

/// Output root used when neither the config nor the command line names one.
pub const OUT_DIR_ENV: &str = "TNO_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "runs";
/// Name of the resolved config written next to every command's outputs.
pub const RESOLVED_CONFIG: &str = "config.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationPlan {
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
}

impl Default for AblationPlan {
    fn default() -> Self {
        Self {
            variants: Variant::ALL.to_vec(),
            seeds: (0..5).collect(),
        }
    }
}

/// Everything one invocation needs. `seed` drives model initialisation and
/// batch sampling; the dataset keeps its own `data.seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DatasetConfig,
    pub model: TnoConfig,
    pub train: TrainPlan,
    pub ablation: AblationPlan,
    pub precision: Precision,
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    /// Defaults to `<out>/dataset`.
    pub dataset_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DatasetConfig::default(),
            model: TnoConfig::default(),
            train: TrainPlan::default(),
            ablation: AblationPlan::default(),
            precision: Precision::default(),
            seed: 0,
            out_dir: None,
            dataset_dir: None,
        }
    }
}

/// Overlays `user` on `base`, merging objects key by key. Tagged enum
/// defaults carry only their `kind`, so a merge never leaves stray fields.
fn merge(base: &mut Value, user: Value) {
    match (base, user) {
        (Value::Object(b), Value::Object(u)) => {
            for (k, v) in u {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, u) => *slot = u,
    }
}

/// Sets a dotted `key` such as `train.lr0` to `raw`, read as JSON when it
/// parses and as a string otherwise. Object values replace the old value.
fn set_path(root: &mut Value, key: &str, raw: &str) -> Result<()> {
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("--set {key}: {} is not a section", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            if !obj.contains_key(*part) {
                return Err(Error::Config(format!("--set {key}: unknown key")));
            }
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj
            .get_mut(*part)
            .ok_or_else(|| Error::Config(format!("--set {key}: unknown section {part}")))?;
    }
    unreachable!("split yields at least one part")
}

impl RunConfig {
    /// Parses a config document over the defaults, then applies `overrides`
    /// (`key=value`). Unknown keys anywhere are rejected.
    pub fn from_json(text: &str, overrides: &[String]) -> Result<Self> {
        let user: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("config is not valid JSON: {e}")))?;
        if !user.is_object() {
            return Err(Error::Config("config must be a JSON object".into()));
        }
        let mut doc = serde_json::to_value(RunConfig::default())?;
        merge(&mut doc, user);
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {o:?}")))?;
            set_path(&mut doc, k.trim(), v.trim())?;
        }
        let cfg: RunConfig = serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`, or starts from the defaults when `path` is `None`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) if !p.exists() => return Err(Error::MissingInput(p.to_path_buf())),
            Some(p) => fs::read_to_string(p)?,
            None => "{}".to_string(),
        };
        Self::from_json(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.ablation.variants.is_empty() || self.ablation.seeds.is_empty() {
            return Err(Error::Config("ablation needs at least one variant and one seed".into()));
        }
        Ok(())
    }

    /// Output root: config, then `TNO_OUT_DIR`, then `runs`.
    pub fn out_root(&self) -> PathBuf {
        self.out_dir
            .clone()
            .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.dataset_dir.clone().unwrap_or_else(|| self.out_root().join("dataset"))
    }

    /// Model config with the run seed and the dataset's channel count.
    pub fn model_config(&self) -> TnoConfig {
        let mut m = self.model.clone();
        m.seed = self.seed;
        m.input_channels = self.data.input_channels();
        m
    }

    pub fn train_plan(&self) -> TrainPlan {
        let mut p = self.train.clone();
        p.seed = self.seed;
        p
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(RESOLVED_CONFIG), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

pub fn cmd_generate(cfg: &RunConfig) -> Result<DatasetManifest> {
    let dir = cfg.dataset_path();
    let ds = generate_dataset(&cfg.data)?;
    let manifest = save_dataset(&ds, &dir)?;
    cfg.write_resolved(&dir)?;
    Ok(manifest)
}

fn load_matching_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let ds = load_dataset(cfg.dataset_path())?;
    if ds.config != cfg.data {
        log::warn!(
            "dataset at {} was generated from a different data config; using the stored one",
            cfg.dataset_path().display()
        );
    }
    Ok(ds)
}

pub fn cmd_train(cfg: &RunConfig) -> Result<TrainLog> {
    let ds = load_matching_dataset(cfg)?;
    let dir = cfg.out_root().join("train");
    cfg.write_resolved(&dir)?;
    let mut model = cfg.model_config();
    model.input_channels = ds.config.input_channels();
    let plan = cfg.train_plan();
    let log = match cfg.precision {
        Precision::F32 => train_run::<f32>(&plan, &model, &ds, Some(&dir))?.log,
        Precision::F64 => train_run::<f64>(&plan, &model, &ds, Some(&dir))?.log,
    };
    Ok(log)
}

fn eval_with<T: Scalar>(ds: &Dataset, checkpoint: &Path, horizon: usize) -> Result<MetricsTable> {
    let ck = load_checkpoint::<T>(checkpoint)?;
    let norm = ck.norm.as_ref().unwrap_or(&ds.norm);
    let id = checkpoint
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "checkpoint".into());
    evaluate_model(&ck.model, ds, norm, &id, horizon)
}

/// Evaluates `checkpoint` (default `<out>/train/best`) on the test splits.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<MetricsTable> {
    let ck_dir = checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.out_root().join("train").join("best"));
    let manifest = read_manifest(&ck_dir)?;
    let ds = load_matching_dataset(cfg)?;
    let mc = &manifest.config;
    let channels = ds.config.input_channels();
    if mc.input_channels != channels {
        return Err(Error::IncompatibleCheckpoint(format!(
            "checkpoint expects {} input channels, dataset provides {channels}",
            mc.input_channels
        )));
    }
    if ds.config.resolution < mc.pool_size {
        return Err(Error::IncompatibleCheckpoint(format!(
            "checkpoint pools to {0}x{0}, dataset grid is {1}x{1}",
            mc.pool_size, ds.config.resolution
        )));
    }
    let horizon = cfg.train.eval_horizon;
    let table = match manifest.dtype.as_str() {
        "f64" => eval_with::<f64>(&ds, &ck_dir, horizon)?,
        _ => eval_with::<f32>(&ds, &ck_dir, horizon)?,
    };
    let dir = cfg.out_root().join("eval");
    cfg.write_resolved(&dir)?;
    table.save_csv(dir.join("metrics.csv"))?;
    Ok(table)
}

pub fn cmd_ablate(cfg: &RunConfig) -> Result<AblationResult> {
    let ds = load_matching_dataset(cfg)?;
    let dir = cfg.out_root().join("ablate");
    cfg.write_resolved(&dir)?;
    let mut base = cfg.model_config();
    base.input_channels = ds.config.input_channels();
    ablation_suite(
        &ds,
        &base,
        &cfg.train,
        &cfg.ablation.variants,
        &cfg.ablation.seeds,
        Some(&dir),
    )
}
