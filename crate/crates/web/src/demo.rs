//! The demo's operations as plain Rust, so they can be tested natively.

use tno::data::{simulate, DatasetConfig, Grf, PdeKind, Trajectory};
use tno::model::{TnoConfig, TnoModel, Variant};
use tno::{Error, Result};

pub const MAX_GRID: usize = 128;
pub const MAX_SNAPSHOTS: usize = 200;

fn check_grid(n: usize) -> Result<()> {
    if !(4..=MAX_GRID).contains(&n) {
        return Err(Error::Config(format!("grid must be between 4 and {MAX_GRID}, got {n}")));
    }
    Ok(())
}

/// Zero-mean, unit-variance Gaussian random field, row-major `n × n`.
pub fn random_field(n: usize, length_scale: f64, seed: u64) -> Result<Vec<f64>> {
    check_grid(n)?;
    Ok(Grf::new(length_scale, seed)?.eval_standardized(n, n)?.data().to_vec())
}

#[derive(Debug, Clone)]
pub struct SolveRequest {
    pub transport: bool,
    pub n: usize,
    pub snapshots: usize,
    pub snapshot_dt: f64,
    pub kappa_min: f64,
    pub kappa_max: f64,
    pub speed: f64,
    pub seed: u64,
}

pub fn solve(req: &SolveRequest) -> Result<Trajectory> {
    check_grid(req.n)?;
    if req.snapshots > MAX_SNAPSHOTS {
        return Err(Error::Config(format!("at most {MAX_SNAPSHOTS} snapshots")));
    }
    let cfg = DatasetConfig {
        kind: if req.transport { PdeKind::AdvectionDiffusion } else { PdeKind::Heat },
        resolution: req.n,
        fine_resolution: None,
        snapshots: req.snapshots,
        snapshot_dt: req.snapshot_dt,
        kappa_min: req.kappa_min,
        kappa_max: req.kappa_max,
        speeds: vec![req.speed],
        seed: req.seed,
        ..DatasetConfig::default()
    };
    simulate(&cfg, req.seed, req.speed, req.n)
}

/// Trainable parameters of every variant for one base configuration, in
/// `Variant::ALL` order.
pub fn parameter_counts(latent: usize, base_channels: usize, pool_size: usize) -> Result<Vec<(Variant, usize)>> {
    let base = TnoConfig {
        latent,
        unet_base_channels: base_channels,
        pool_size,
        ..TnoConfig::default()
    };
    Variant::ALL
        .iter()
        .map(|&v| Ok((v, TnoModel::<f32>::new(base.for_variant(v))?.count_parameters())))
        .collect()
}
