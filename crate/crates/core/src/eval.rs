//! Masked error metrics, rollout error curves, zero-shot evaluation on finer
//! grids and the ablation runner.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{make_mask, znorm_invert, Dataset, NormStats, Trajectory};
use crate::error::{Error, Result};
use crate::model::{TnoConfig, TnoModel, Variant};
use crate::tensor::{Scalar, Tensor};
use crate::train::{extrapolation_origins, rollout_batch, train_run, PreparedSplit, TrainPlan};

/// Pixels with `|target|` above this (physical units) form the support region.
pub const REGION_THRESHOLD: f64 = 0.01;

fn check(op: &'static str, pred: &[f64], target: &[f64], mask: &[f64]) -> Result<f64> {
    if pred.len() != target.len() || pred.len() != mask.len() {
        return Err(Error::shape(op, &[target.len()], &[pred.len(), mask.len()]));
    }
    let n: f64 = mask.iter().sum();
    if n <= 0.0 {
        return Err(Error::invalid(op, "mask selects no pixels"));
    }
    Ok(n)
}

/// Masked mean absolute error.
pub fn mae(pred: &[f64], target: &[f64], mask: &[f64]) -> Result<f64> {
    let n = check("mae", pred, target, mask)?;
    Ok(pred
        .iter()
        .zip(target)
        .zip(mask)
        .map(|((p, t), m)| m * (p - t).abs())
        .sum::<f64>()
        / n)
}

/// Masked root mean square error.
pub fn rmse(pred: &[f64], target: &[f64], mask: &[f64]) -> Result<f64> {
    let n = check("rmse", pred, target, mask)?;
    Ok((pred
        .iter()
        .zip(target)
        .zip(mask)
        .map(|((p, t), m)| m * (p - t) * (p - t))
        .sum::<f64>()
        / n)
        .sqrt())
}

/// `||mask (pred - target)|| / ||mask target||`.
pub fn relative_l2(pred: &[f64], target: &[f64], mask: &[f64]) -> Result<f64> {
    check("relative_l2", pred, target, mask)?;
    let (mut num, mut den) = (0.0, 0.0);
    for ((p, t), m) in pred.iter().zip(target).zip(mask) {
        num += (m * (p - t)).powi(2);
        den += (m * t).powi(2);
    }
    if den == 0.0 {
        return Err(Error::invalid("relative_l2", "target has zero norm on the mask"));
    }
    Ok((num / den).sqrt())
}

/// `1` where `|target| > threshold`.
pub fn support_mask(target: &[f64], threshold: f64) -> Vec<f64> {
    target
        .iter()
        .map(|t| if t.abs() > threshold { 1.0 } else { 0.0 })
        .collect()
}

/// MAE restricted to `region`; errors when the region is empty.
pub fn region_mae(pred: &[f64], target: &[f64], region: &[f64]) -> Result<f64> {
    mae(pred, target, region)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub variant: String,
    pub resolution: usize,
    pub snapshot_index: usize,
    pub lead_time: f64,
    pub mae: f64,
    pub rmse: f64,
    pub rel_l2: f64,
}

pub const METRICS_HEADER: &str = "run_id,variant,resolution,snapshot_index,lead_time,mae,rmse,rel_l2";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsTable {
    pub rows: Vec<MetricsRow>,
}

impl MetricsTable {
    pub fn extend(&mut self, other: MetricsTable) {
        self.rows.extend(other.rows);
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(w);
        out.write_record(METRICS_HEADER.split(','))?;
        for r in &self.rows {
            out.write_record([
                r.run_id.clone(),
                r.variant.clone(),
                r.resolution.to_string(),
                r.snapshot_index.to_string(),
                format!("{}", r.lead_time),
                format!("{:e}", r.mae),
                format!("{:e}", r.rmse),
                format!("{:e}", r.rel_l2),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
        if header.join(",") != METRICS_HEADER {
            return Err(Error::Format(format!("unexpected metrics header {header:?}")));
        }
        let rows = rd.deserialize().collect::<std::result::Result<Vec<MetricsRow>, _>>()?;
        Ok(Self { rows })
    }

    /// Rows of one variant at one resolution, in file order.
    pub fn select<'a>(&'a self, variant: &'a str, resolution: usize) -> impl Iterator<Item = &'a MetricsRow> + 'a {
        self.rows
            .iter()
            .filter(move |r| r.variant == variant && r.resolution == resolution)
    }

    /// Mean relative L2 over the selected rows.
    pub fn mean_rel_l2(&self, variant: &str, resolution: usize) -> Option<f64> {
        let v: Vec<f64> = self.select(variant, resolution).map(|r| r.rel_l2).collect();
        if v.is_empty() {
            None
        } else {
            Some(v.iter().sum::<f64>() / v.len() as f64)
        }
    }
}

/// Anything that can roll out forecasts over prepared windows.
pub trait Forecaster<T: Scalar> {
    fn history(&self) -> usize;
    fn bundle(&self) -> usize;
    /// `[B, n_windows * K, H, W]` in normalised units for `(trajectory, origin)` items.
    fn forecast(&self, split: &PreparedSplit<T>, items: &[(usize, usize)], n_windows: usize) -> Result<Tensor<T>>;
    /// Smallest admissible grid extent.
    fn min_extent(&self) -> usize {
        1
    }
}

impl<T: Scalar> Forecaster<T> for TnoModel<T> {
    fn history(&self) -> usize {
        self.config().history
    }
    fn bundle(&self) -> usize {
        self.config().bundle
    }
    fn forecast(&self, split: &PreparedSplit<T>, items: &[(usize, usize)], n_windows: usize) -> Result<Tensor<T>> {
        Ok(rollout_batch(self, split, items, n_windows)?.0)
    }
    fn min_extent(&self) -> usize {
        self.config().pool_size
    }
}

/// Protocol shared by the coarse and fine evaluations.
#[derive(Debug, Clone)]
pub struct EvalSpec {
    pub run_id: String,
    pub variant: String,
    /// Snapshots predicted per rollout before re-initialising from ground truth.
    pub horizon: usize,
    /// Leading snapshots reserved for training; rollouts start after them.
    pub train_snapshots: usize,
    pub batch_size: usize,
}

/// Per-lead-time metrics averaged over trajectories and rollout origins, in
/// physical units.
pub fn error_accumulation_curve<T: Scalar>(
    model: &dyn Forecaster<T>,
    trajs: &[Trajectory],
    norm: &NormStats,
    mask: &Tensor<f64>,
    spec: &EvalSpec,
) -> Result<MetricsTable> {
    let first = trajs
        .first()
        .ok_or_else(|| Error::invalid("error_accumulation_curve", "empty evaluation set"))?;
    let (h, w) = (first.height(), first.width());
    if h.min(w) < model.min_extent() {
        return Err(Error::invalid(
            "error_accumulation_curve",
            format!("grid {h}x{w} is smaller than the pooling size {}", model.min_extent()),
        ));
    }
    let k = model.bundle();
    let n_windows = spec.horizon.div_ceil(k);
    let span = n_windows * k;
    let split = PreparedSplit::<T>::new(trajs, norm, mask)?;
    let norm = norm.resampled(h, w)?;
    let origins = extrapolation_origins(split.horizon, spec.train_snapshots, span, model.history());
    if origins.is_empty() {
        return Err(Error::invalid("error_accumulation_curve", "trajectories too short for one rollout"));
    }
    let plane = h * w;
    let m = mask.data();
    let mut acc = vec![[0.0f64; 3]; spec.horizon];
    let mut count = 0usize;
    for &t0 in &origins {
        let items: Vec<(usize, usize)> = (0..trajs.len()).map(|i| (i, t0)).collect();
        for chunk in items.chunks(spec.batch_size.max(1)) {
            let pred = model.forecast(&split, chunk, n_windows)?;
            let pred: Tensor<f64> = pred.cast();
            let pred = znorm_invert(&pred, &norm)?;
            for (n, &(i, _)) in chunk.iter().enumerate() {
                for (j, a) in acc.iter_mut().enumerate() {
                    let p = &pred.data()[(n * span + j) * plane..(n * span + j + 1) * plane];
                    let t = &trajs[i].u.data()[(t0 + 1 + j) * plane..(t0 + 2 + j) * plane];
                    a[0] += mae(p, t, m)?;
                    a[1] += rmse(p, t, m)?;
                    a[2] += relative_l2(p, t, m)?;
                }
                count += 1;
            }
        }
    }
    let rows = acc
        .iter()
        .enumerate()
        .map(|(j, a)| MetricsRow {
            run_id: spec.run_id.clone(),
            variant: spec.variant.clone(),
            resolution: h,
            snapshot_index: j + 1,
            lead_time: (j + 1) as f64 * first.dt,
            mae: a[0] / count as f64,
            rmse: a[1] / count as f64,
            rel_l2: a[2] / count as f64,
        })
        .collect();
    Ok(MetricsTable { rows })
}

/// The same protocol on the finer test grid with the coarse-trained model.
pub fn super_resolution_eval<T: Scalar>(
    model: &dyn Forecaster<T>,
    fine: &[Trajectory],
    norm: &NormStats,
    mask_kind: crate::data::MaskKind,
    spec: &EvalSpec,
) -> Result<MetricsTable> {
    let first = fine
        .first()
        .ok_or_else(|| Error::invalid("super_resolution_eval", "no fine-grid trajectories"))?;
    let mask = make_mask(first.height(), first.width(), mask_kind)?;
    error_accumulation_curve(model, fine, norm, &mask, spec)
}

/// Coarse and (when available) fine curves of a trained model on the test split.
pub fn evaluate_model<T: Scalar>(
    model: &TnoModel<T>,
    data: &Dataset,
    norm: &NormStats,
    run_id: &str,
    horizon: usize,
) -> Result<MetricsTable> {
    let spec = EvalSpec {
        run_id: run_id.to_string(),
        variant: model.config().variant.name().to_string(),
        horizon,
        train_snapshots: data.config.train_snapshots(),
        batch_size: 16,
    };
    let n = data.config.resolution;
    let mask = make_mask(n, n, data.config.mask)?;
    let mut table = error_accumulation_curve(model, &data.test, norm, &mask, &spec)?;
    if !data.test_fine.is_empty() {
        table.extend(super_resolution_eval(model, &data.test_fine, norm, data.config.mask, &spec)?);
    }
    Ok(table)
}

/// Outcome of one variant/seed in the ablation suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStatus {
    pub run_id: String,
    pub variant: Variant,
    pub seed: u64,
    pub parameters: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct AblationResult {
    pub table: MetricsTable,
    pub runs: Vec<RunStatus>,
}

impl AblationResult {
    /// Mean coarse-grid relative L2 per run, keyed by `(variant, seed)`.
    pub fn mean_rel_l2(&self, variant: Variant, seed: u64, resolution: usize) -> Option<f64> {
        let id = run_id(variant, seed);
        let v: Vec<f64> = self
            .table
            .rows
            .iter()
            .filter(|r| r.run_id == id && r.resolution == resolution)
            .map(|r| r.rel_l2)
            .collect();
        (!v.is_empty() && v.iter().all(|x| x.is_finite())).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

pub fn run_id(variant: Variant, seed: u64) -> String {
    format!("{}-s{seed}", variant.name())
}

/// Trains and evaluates every variant for every seed on the same data and
/// budget. A failing run is recorded with its error and a flagged row whose
/// metrics are NaN; the suite continues.
pub fn ablation_suite(
    data: &Dataset,
    base: &TnoConfig,
    plan: &TrainPlan,
    variants: &[Variant],
    seeds: &[u64],
    out: Option<&Path>,
) -> Result<AblationResult> {
    let mut result = AblationResult::default();
    for &seed in seeds {
        for &variant in variants {
            let id = run_id(variant, seed);
            let mut cfg = base.for_variant(variant);
            cfg.seed = seed;
            let mut p = plan.clone();
            p.seed = seed;
            let dir = out.map(|o| o.join(&id));
            log::info!("ablation run {id}");
            let outcome = (|| -> Result<(MetricsTable, usize)> {
                let run = train_run::<f32>(&p, &cfg, data, dir.as_deref())?;
                let table = evaluate_model(&run.best_model, data, &data.norm, &id, p.eval_horizon)?;
                Ok((table, run.best_model.count_parameters()))
            })();
            match outcome {
                Ok((table, parameters)) => {
                    result.table.extend(table);
                    result.runs.push(RunStatus {
                        run_id: id,
                        variant,
                        seed,
                        parameters,
                        error: None,
                    });
                }
                Err(e) => {
                    log::warn!("ablation run {id} failed: {e}");
                    result.table.rows.push(MetricsRow {
                        run_id: id.clone(),
                        variant: variant.name().to_string(),
                        resolution: data.config.resolution,
                        snapshot_index: 0,
                        lead_time: f64::NAN,
                        mae: f64::NAN,
                        rmse: f64::NAN,
                        rel_l2: f64::NAN,
                    });
                    result.runs.push(RunStatus {
                        run_id: id,
                        variant,
                        seed,
                        parameters: 0,
                        error: Some(e.to_string()),
                    });
                }
            }
        }
    }
    if let Some(o) = out {
        std::fs::create_dir_all(o)?;
        result.table.save_csv(o.join("metrics.csv"))?;
        std::fs::write(o.join("runs.json"), serde_json::to_string_pretty(&result.runs)?)?;
    }
    Ok(result)
}
