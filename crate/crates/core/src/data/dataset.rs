use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::grf::{CoefficientField, Grf};
use super::solver::{integrate, max_stable_dt, Boundary, Trajectory};
use super::{input_function, MaskKind, NormStats};
use crate::error::{Error, Result};
use crate::tensor::{read_tensor_file, write_tensor_file, Tensor};

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PdeKind {
    Heat,
    AdvectionDiffusion,
}

/// Everything needed to regenerate a dataset bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: PdeKind,
    /// Training grid is `resolution × resolution`.
    pub resolution: usize,
    /// Extra test split solved on a finer grid.
    pub fine_resolution: Option<usize>,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Snapshots per trajectory, the initial state included.
    pub snapshots: usize,
    /// Time between stored snapshots.
    pub snapshot_dt: f64,
    pub kappa_min: f64,
    pub kappa_max: f64,
    pub kappa_length_scale: f64,
    pub u0_length_scale: f64,
    pub boundary: Boundary,
    /// Advection speeds cycled over trajectories; the speed is appended to
    /// the input function as a constant channel.
    pub speeds: Vec<f64>,
    /// Speeds used for the test splits instead of `speeds`, if set.
    pub test_speeds: Option<Vec<f64>>,
    /// Leading fraction of each trajectory available for training.
    pub train_time_fraction: f64,
    pub mask: MaskKind,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            kind: PdeKind::Heat,
            resolution: 32,
            fine_resolution: Some(64),
            n_train: 200,
            n_val: 20,
            n_test: 20,
            snapshots: 64,
            snapshot_dt: 0.03,
            kappa_min: 0.002,
            kappa_max: 0.01,
            kappa_length_scale: 0.15,
            u0_length_scale: 0.15,
            boundary: Boundary::Periodic,
            speeds: vec![0.25, 0.5, 1.0],
            test_speeds: None,
            train_time_fraction: 0.5,
            mask: MaskKind::Full,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.resolution < 2 || self.snapshots < 2 {
            return bad("resolution and snapshots must be >= 2".into());
        }
        if let Some(f) = self.fine_resolution {
            if f < self.resolution {
                return bad(format!("fine_resolution {f} is below resolution {}", self.resolution));
            }
        }
        if self.n_train == 0 || self.n_test == 0 {
            return bad("n_train and n_test must be >= 1".into());
        }
        if !(self.kappa_max > self.kappa_min && self.kappa_min > 0.0) {
            return bad("need kappa_max > kappa_min > 0".into());
        }
        if !(self.snapshot_dt > 0.0 && self.kappa_length_scale > 0.0 && self.u0_length_scale > 0.0) {
            return bad("snapshot_dt and length scales must be positive".into());
        }
        if !(self.train_time_fraction > 0.0 && self.train_time_fraction <= 1.0) {
            return bad("train_time_fraction must lie in (0, 1]".into());
        }
        if self.kind == PdeKind::AdvectionDiffusion && self.speeds.is_empty() {
            return bad("advection_diffusion needs at least one speed".into());
        }
        Ok(())
    }

    /// Number of leading snapshots usable for training.
    pub fn train_snapshots(&self) -> usize {
        ((self.snapshots as f64 * self.train_time_fraction).round() as usize).clamp(1, self.snapshots)
    }

    /// Input-function channels: diffusivity, plus speed for transport data.
    pub fn input_channels(&self) -> usize {
        match self.kind {
            PdeKind::Heat => 1,
            PdeKind::AdvectionDiffusion => 2,
        }
    }

    /// Explicit sub-steps per snapshot on an `n × n` grid.
    pub fn substeps(&self, n: usize, speed: f64) -> usize {
        let dx = 1.0 / n as f64;
        let vel = diagonal(speed);
        let stable = max_stable_dt(self.kappa_max, vel, dx, dx);
        (self.snapshot_dt / (0.9 * stable)).ceil().max(1.0) as usize
    }
}

fn diagonal(speed: f64) -> (f64, f64) {
    let c = speed / std::f64::consts::SQRT_2;
    (c, c)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
    TestFine,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::TestFine => "test_fine",
        }
    }

    fn code(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
            Split::Test | Split::TestFine => 3,
        }
    }
}

/// Generated splits plus the training-split normalisation.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub train: Vec<Trajectory>,
    pub val: Vec<Trajectory>,
    pub test: Vec<Trajectory>,
    /// Same initial states and coefficients as `test`, solved on the fine grid.
    pub test_fine: Vec<Trajectory>,
    pub norm: NormStats,
}

impl Dataset {
    pub fn split(&self, s: Split) -> &[Trajectory] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
            Split::TestFine => &self.test_fine,
        }
    }
}

fn trajectory_seed(base: u64, split: Split, index: usize) -> u64 {
    base.wrapping_mul(0x2545_F491_4F6C_DD1D)
        ^ (split.code() << 48)
        ^ (index as u64).wrapping_mul(0x9E37_79B9)
}

/// Solves one trajectory on every requested grid from shared random functions.
fn solve_on_grids(cfg: &DatasetConfig, seed: u64, speed: Option<f64>, grids: &[usize]) -> Result<Vec<Trajectory>> {
    let kgrf = Grf::new(cfg.kappa_length_scale, seed)?;
    let ugrf = Grf::new(cfg.u0_length_scale, seed ^ 0x5555_5555_5555_5555)?;
    let dims: Vec<(usize, usize)> = grids.iter().map(|&n| (n, n)).collect();
    let kappas = kgrf.eval_affine(&dims, cfg.kappa_min, cfg.kappa_max)?;
    let vel = speed.map(diagonal).unwrap_or((0.0, 0.0));
    grids
        .iter()
        .zip(kappas)
        .map(|(&n, values)| {
            let coeff = CoefficientField {
                values,
                length_scale: cfg.kappa_length_scale,
                seed,
            };
            let u0 = ugrf.eval_standardized(n, n)?;
            let sub = cfg.substeps(n, speed.unwrap_or(0.0));
            let dt = cfg.snapshot_dt / sub as f64;
            let mut t = integrate(&u0, &coeff, vel, dt, (cfg.snapshots - 1) * sub, sub, cfg.boundary)?;
            t.dt = cfg.snapshot_dt;
            t.scalar_param = speed;
            Ok(t)
        })
        .collect()
}

/// One trajectory of the family described by `cfg` on an `n × n` grid.
/// `speed` is ignored for heat data.
pub fn simulate(cfg: &DatasetConfig, seed: u64, speed: f64, n: usize) -> Result<Trajectory> {
    cfg.validate()?;
    let speed = (cfg.kind == PdeKind::AdvectionDiffusion).then_some(speed);
    let mut t = solve_on_grids(cfg, seed, speed, &[n])?;
    Ok(t.remove(0))
}

/// Generates every split and fits normalisation on the training split's
/// leading `train_time_fraction` of snapshots.
pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    cfg.validate()?;
    let speed_for = |split: Split, i: usize| -> Option<f64> {
        match cfg.kind {
            PdeKind::Heat => None,
            PdeKind::AdvectionDiffusion => {
                let list = match (split, &cfg.test_speeds) {
                    (Split::Test | Split::TestFine, Some(ts)) if !ts.is_empty() => ts,
                    _ => &cfg.speeds,
                };
                Some(list[i % list.len()])
            }
        }
    };
    let gen = |split: Split, n: usize| -> Result<Vec<Trajectory>> {
        (0..n)
            .map(|i| {
                let seed = trajectory_seed(cfg.seed, split, i);
                Ok(solve_on_grids(cfg, seed, speed_for(split, i), &[cfg.resolution])?.remove(0))
            })
            .collect()
    };
    let train = gen(Split::Train, cfg.n_train)?;
    let val = gen(Split::Val, cfg.n_val)?;
    let mut test = Vec::with_capacity(cfg.n_test);
    let mut test_fine = Vec::new();
    for i in 0..cfg.n_test {
        let seed = trajectory_seed(cfg.seed, Split::Test, i);
        let grids: Vec<usize> = std::iter::once(cfg.resolution).chain(cfg.fine_resolution).collect();
        let mut out = solve_on_grids(cfg, seed, speed_for(Split::Test, i), &grids)?.into_iter();
        test.push(out.next().expect("coarse grid solved"));
        test_fine.extend(out);
    }
    let v: Vec<Tensor<f64>> = train.iter().map(input_function).collect();
    let norm = NormStats::fit(&train, &v, Some(cfg.train_snapshots()))?;
    Ok(Dataset {
        config: cfg.clone(),
        train,
        val,
        test,
        test_fine,
        norm,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitEntry {
    pub count: usize,
    pub resolution: usize,
    /// `[N, T, H, W]` solutions.
    pub u_file: String,
    /// `[N, H, W]` diffusivities.
    pub kappa_file: String,
    pub seeds: Vec<u64>,
    pub speeds: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverParams {
    pub scheme: String,
    pub substeps: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub config: DatasetConfig,
    pub train: SplitEntry,
    pub val: SplitEntry,
    pub test: SplitEntry,
    pub test_fine: Option<SplitEntry>,
    pub solver: SolverParams,
    /// Directory holding the normalisation tensors, relative to the manifest.
    pub normalization: String,
}

pub(crate) fn write_norm(dir: &Path, norm: &NormStats) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_tensor_file(&norm.u_mean, dir.join("u_mean.tnot"))?;
    write_tensor_file(&norm.u_std, dir.join("u_std.tnot"))?;
    write_tensor_file(&norm.v_mean, dir.join("v_mean.tnot"))?;
    write_tensor_file(&norm.v_std, dir.join("v_std.tnot"))?;
    Ok(())
}

pub(crate) fn read_norm(dir: &Path) -> Result<NormStats> {
    let r = |name: &str| -> Result<Tensor<f64>> { Ok(read_tensor_file(dir.join(name))?.into_dtype()) };
    Ok(NormStats {
        u_mean: r("u_mean.tnot")?,
        u_std: r("u_std.tnot")?,
        v_mean: r("v_mean.tnot")?,
        v_std: r("v_std.tnot")?,
    })
}

fn write_split(dir: &Path, split: Split, trajs: &[Trajectory], seeds: Vec<u64>) -> Result<SplitEntry> {
    let name = split.name();
    let first = trajs
        .first()
        .ok_or_else(|| Error::invalid("save_dataset", format!("split {name} is empty")))?;
    let (t, h, w) = (first.len(), first.height(), first.width());
    let u: Vec<f32> = trajs.iter().flat_map(|x| x.u.data().iter().map(|&v| v as f32)).collect();
    let k: Vec<f32> = trajs
        .iter()
        .flat_map(|x| x.coeff.values.data().iter().map(|&v| v as f32))
        .collect();
    let u_file = format!("{name}_u.tnot");
    let kappa_file = format!("{name}_kappa.tnot");
    write_tensor_file(&Tensor::new(&[trajs.len(), t, h, w], u)?, dir.join(&u_file))?;
    write_tensor_file(&Tensor::new(&[trajs.len(), h, w], k)?, dir.join(&kappa_file))?;
    Ok(SplitEntry {
        count: trajs.len(),
        resolution: h,
        u_file,
        kappa_file,
        seeds,
        speeds: trajs.iter().map(|x| x.scalar_param).collect(),
    })
}

/// Writes solutions and coefficients in single precision plus `manifest.json`.
pub fn save_dataset(ds: &Dataset, dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let cfg = &ds.config;
    let seeds = |split: Split, n: usize| (0..n).map(|i| trajectory_seed(cfg.seed, split, i)).collect::<Vec<_>>();
    let train = write_split(dir, Split::Train, &ds.train, seeds(Split::Train, ds.train.len()))?;
    let val = if ds.val.is_empty() {
        SplitEntry {
            count: 0,
            resolution: cfg.resolution,
            u_file: String::new(),
            kappa_file: String::new(),
            seeds: Vec::new(),
            speeds: Vec::new(),
        }
    } else {
        write_split(dir, Split::Val, &ds.val, seeds(Split::Val, ds.val.len()))?
    };
    let test = write_split(dir, Split::Test, &ds.test, seeds(Split::Test, ds.test.len()))?;
    let test_fine = if ds.test_fine.is_empty() {
        None
    } else {
        Some(write_split(dir, Split::TestFine, &ds.test_fine, seeds(Split::Test, ds.test_fine.len()))?)
    };
    write_norm(&dir.join("norm"), &ds.norm)?;
    let mut substeps = vec![(cfg.resolution, cfg.substeps(cfg.resolution, max_speed(cfg)))];
    if let Some(f) = cfg.fine_resolution {
        substeps.push((f, cfg.substeps(f, max_speed(cfg))));
    }
    let manifest = DatasetManifest {
        format_version: DATASET_FORMAT_VERSION,
        config: cfg.clone(),
        train,
        val,
        test,
        test_fine,
        solver: SolverParams {
            scheme: "explicit conservative finite volume, first-order upwind advection".into(),
            substeps,
        },
        normalization: "norm".into(),
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

fn max_speed(cfg: &DatasetConfig) -> f64 {
    match cfg.kind {
        PdeKind::Heat => 0.0,
        PdeKind::AdvectionDiffusion => cfg
            .speeds
            .iter()
            .chain(cfg.test_speeds.iter().flatten())
            .fold(0.0f64, |m, s| m.max(s.abs())),
    }
}

fn read_split(dir: &Path, e: &SplitEntry, cfg: &DatasetConfig) -> Result<Vec<Trajectory>> {
    if e.count == 0 {
        return Ok(Vec::new());
    }
    let u: Tensor<f64> = read_tensor_file(dir.join(&e.u_file))?.into_dtype();
    let k: Tensor<f64> = read_tensor_file(dir.join(&e.kappa_file))?.into_dtype();
    if u.ndim() != 4 || u.shape()[0] != e.count || k.shape() != [e.count, u.shape()[2], u.shape()[3]] {
        return Err(Error::Format(format!(
            "split files {} / {} have inconsistent shapes {:?} / {:?}",
            e.u_file,
            e.kappa_file,
            u.shape(),
            k.shape()
        )));
    }
    let (h, w) = (u.shape()[2], u.shape()[3]);
    (0..e.count)
        .map(|i| {
            Ok(Trajectory {
                u: u.select(i)?,
                dt: cfg.snapshot_dt,
                dx: 1.0 / w as f64,
                dy: 1.0 / h as f64,
                coeff: CoefficientField {
                    values: k.select(i)?,
                    length_scale: cfg.kappa_length_scale,
                    seed: e.seeds.get(i).copied().unwrap_or_default(),
                },
                scalar_param: e.speeds.get(i).copied().flatten(),
            })
        })
        .collect()
}

/// Reads a dataset written by [`save_dataset`].
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let path = dir.join("manifest.json");
    if !path.exists() {
        return Err(Error::MissingInput(path));
    }
    let manifest: DatasetManifest = serde_json::from_str(&fs::read_to_string(&path)?)?;
    if manifest.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "dataset format version {} is not supported",
            manifest.format_version
        )));
    }
    let cfg = manifest.config.clone();
    Ok(Dataset {
        train: read_split(dir, &manifest.train, &cfg)?,
        val: read_split(dir, &manifest.val, &cfg)?,
        test: read_split(dir, &manifest.test, &cfg)?,
        test_fine: match &manifest.test_fine {
            Some(e) => read_split(dir, e, &cfg)?,
            None => Vec::new(),
        },
        norm: read_norm(&dir.join(&manifest.normalization))?,
        config: cfg,
    })
}
