//! Synthetic ground truth: random coefficient fields, finite-difference
//! solvers, normalisation, windowing into history/future bundles, masks and
//! grid resampling.

mod dataset;
mod grf;
mod solver;

pub(crate) use dataset::{read_norm as read_norm_dir, write_norm as write_norm_dir};
pub use dataset::{
    generate_dataset, load_dataset, save_dataset, Dataset, DatasetConfig, DatasetManifest,
    simulate, PdeKind, Split,
};
pub use grf::{grf_sample, CoefficientField, Grf};
pub use solver::{
    courant_number, integrate, max_stable_dt, solve_advdiff2d, solve_heat2d, Boundary, Trajectory,
};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::kernels;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor applied to per-pixel standard deviations.
pub const STD_FLOOR: f64 = 1e-6;

/// Per-pixel z-score statistics of the solution and the input function.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    /// `[H, W]`.
    pub u_mean: Tensor<f64>,
    pub u_std: Tensor<f64>,
    /// `[Cv, H, W]`.
    pub v_mean: Tensor<f64>,
    pub v_std: Tensor<f64>,
}

fn pixel_stats(frames: &[&[f64]], plane: usize) -> (Vec<f64>, Vec<f64>) {
    let n = frames.len() as f64;
    let mut mean = vec![0.0; plane];
    for f in frames {
        for (m, v) in mean.iter_mut().zip(f.iter()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; plane];
    for f in frames {
        for ((s, v), m) in var.iter_mut().zip(f.iter()).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std = var.iter().map(|s| (s / n).sqrt().max(STD_FLOOR)).collect();
    (mean, std)
}

impl NormStats {
    /// Fits on the first `time_limit` snapshots of each training trajectory
    /// (all snapshots if `None`), population statistics per pixel.
    pub fn fit(train: &[Trajectory], v: &[Tensor<f64>], time_limit: Option<usize>) -> Result<Self> {
        let first = train
            .first()
            .ok_or_else(|| Error::invalid("znorm_fit", "no training trajectories"))?;
        let (h, w) = (first.height(), first.width());
        let plane = h * w;
        let mut frames = Vec::new();
        for t in train {
            if t.height() != h || t.width() != w {
                return Err(Error::shape("znorm_fit", &[h, w], &t.u.shape()[1..]));
            }
            let n = time_limit.unwrap_or(t.len()).min(t.len());
            frames.extend(t.u.data()[..n * plane].chunks(plane));
        }
        let (um, us) = pixel_stats(&frames, plane);
        let cv = v.first().map(|x| x.shape()[0]).unwrap_or(1);
        let mut vm = Vec::with_capacity(cv * plane);
        let mut vs = Vec::with_capacity(cv * plane);
        for c in 0..cv {
            let chans: Vec<&[f64]> = v.iter().map(|x| &x.data()[c * plane..(c + 1) * plane]).collect();
            if chans.is_empty() {
                vm.extend(std::iter::repeat(0.0).take(plane));
                vs.extend(std::iter::repeat(1.0).take(plane));
            } else {
                let (m, s) = pixel_stats(&chans, plane);
                vm.extend(m);
                vs.extend(s);
            }
        }
        Ok(Self {
            u_mean: Tensor::new(&[h, w], um)?,
            u_std: Tensor::new(&[h, w], us)?,
            v_mean: Tensor::new(&[cv, h, w], vm)?,
            v_std: Tensor::new(&[cv, h, w], vs)?,
        })
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.u_mean.shape()[0], self.u_mean.shape()[1])
    }

    /// Statistics carried to another grid by bilinear resampling.
    pub fn resampled(&self, h: usize, w: usize) -> Result<Self> {
        let (h0, w0) = self.resolution();
        if (h0, w0) == (h, w) {
            return Ok(self.clone());
        }
        let rs = |t: &Tensor<f64>, planes: usize, shape: &[usize]| -> Result<Tensor<f64>> {
            Tensor::new(shape, kernels::bilinear_forward(t.data(), planes, h0, w0, h, w))
        };
        let cv = self.v_mean.shape()[0];
        Ok(Self {
            u_mean: rs(&self.u_mean, 1, &[h, w])?,
            u_std: rs(&self.u_std, 1, &[h, w])?.map(|s| s.max(STD_FLOOR)),
            v_mean: rs(&self.v_mean, cv, &[cv, h, w])?,
            v_std: rs(&self.v_std, cv, &[cv, h, w])?.map(|s| s.max(STD_FLOOR)),
        })
    }
}

fn apply_planes(x: &Tensor<f64>, mean: &Tensor<f64>, std: &Tensor<f64>, f: impl Fn(f64, f64, f64) -> f64) -> Result<Tensor<f64>> {
    let plane = mean.numel();
    if x.numel() % plane != 0 || x.shape()[x.ndim().saturating_sub(2)..] != mean.shape()[mean.ndim() - 2..] {
        return Err(Error::shape("znorm", mean.shape(), x.shape()));
    }
    let data = x
        .data()
        .chunks(plane)
        .flat_map(|c| {
            c.iter()
                .zip(mean.data())
                .zip(std.data())
                .map(|((&v, &m), &s)| f(v, m, s))
                .collect::<Vec<_>>()
        })
        .collect();
    Tensor::new(x.shape(), data)
}

/// `(x - mean) / std` per pixel for any `[..., H, W]` solution tensor.
pub fn znorm_apply(x: &Tensor<f64>, stats: &NormStats) -> Result<Tensor<f64>> {
    apply_planes(x, &stats.u_mean, &stats.u_std, |v, m, s| (v - m) / s)
}

/// Inverse of [`znorm_apply`].
pub fn znorm_invert(x: &Tensor<f64>, stats: &NormStats) -> Result<Tensor<f64>> {
    apply_planes(x, &stats.u_mean, &stats.u_std, |v, m, s| v * s + m)
}

/// Normalises an input function `[Cv, H, W]` with the input statistics.
pub fn znorm_apply_input(v: &Tensor<f64>, stats: &NormStats) -> Result<Tensor<f64>> {
    if v.shape() != stats.v_mean.shape() {
        return Err(Error::shape("znorm_apply_input", stats.v_mean.shape(), v.shape()));
    }
    apply_planes(v, &stats.v_mean, &stats.v_std, |x, m, s| (x - m) / s)
}

/// Trunk coordinates `[3, H, W]`: the time value broadcast, then `x` and `y` of
/// cell centres mapped to `[-1, 1]`.
pub fn coordinate_grid(h: usize, w: usize, t: f64) -> Tensor<f64> {
    let plane = h * w;
    let mut d = vec![t; 3 * plane];
    for i in 0..h {
        for j in 0..w {
            d[plane + i * w + j] = 2.0 * (j as f64 + 0.5) / w as f64 - 1.0;
            d[2 * plane + i * w + j] = 2.0 * (i as f64 + 0.5) / h as f64 - 1.0;
        }
    }
    Tensor::from_parts(vec![3, h, w], d)
}

/// Maps snapshot index `k` of a horizon of `n` snapshots to `[-1, 1]`.
pub fn normalized_time(k: usize, n: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        2.0 * k as f64 / (n - 1) as f64 - 1.0
    }
}

/// One training or evaluation window.
#[derive(Debug, Clone)]
pub struct BundleSample {
    /// `[L, H, W]`, ending at `t0` inclusive.
    pub u_hist: Tensor<f64>,
    /// `[Cv, H, W]`.
    pub v: Tensor<f64>,
    /// `[3, H, W]` at time `t0`.
    pub grid: Tensor<f64>,
    /// `[K * windows, H, W]`, starting one step after `t0`.
    pub u_fut: Tensor<f64>,
    /// `[H, W]` of zeros and ones.
    pub mask: Tensor<f64>,
    pub t0: f64,
    pub t0_index: usize,
}

/// The input function of a trajectory: diffusivity, plus the conditioning
/// scalar as a constant channel when present.
pub fn input_function(traj: &Trajectory) -> Tensor<f64> {
    let (h, w) = (traj.height(), traj.width());
    let mut d = traj.coeff.values.data().to_vec();
    if let Some(s) = traj.scalar_param {
        d.extend(std::iter::repeat(s).take(h * w));
    }
    let c = d.len() / (h * w);
    Tensor::from_parts(vec![c, h, w], d)
}

/// Slices a trajectory into windows of `l` history snapshots followed by
/// `k * windows` future snapshots, moving `stride` snapshots each time.
pub fn make_bundles(
    traj: &Trajectory,
    l: usize,
    k: usize,
    windows: usize,
    stride: usize,
    mask: &Tensor<f64>,
) -> Result<Vec<BundleSample>> {
    let t = traj.len();
    let fut = k * windows;
    if l == 0 || fut == 0 || stride == 0 {
        return Err(Error::invalid("make_bundles", "L, K, windows and stride must be >= 1"));
    }
    if t < l + fut {
        return Err(Error::invalid(
            "make_bundles",
            format!("trajectory of {t} snapshots is shorter than L + K = {}", l + fut),
        ));
    }
    let (h, w) = (traj.height(), traj.width());
    if mask.shape() != [h, w] {
        return Err(Error::shape("make_bundles", &[h, w], mask.shape()));
    }
    let count = (t - l - fut) / stride + 1;
    let v = input_function(traj);
    (0..count)
        .map(|n| {
            let t0 = n * stride + l - 1;
            Ok(BundleSample {
                u_hist: traj.u.narrow(t0 + 1 - l, l)?,
                v: v.clone(),
                grid: coordinate_grid(h, w, normalized_time(t0, t)),
                u_fut: traj.u.narrow(t0 + 1, fut)?,
                mask: mask.clone(),
                t0: t0 as f64 * traj.dt,
                t0_index: t0,
            })
        })
        .collect()
}

/// Grid refinement or coarsening by a factor of two.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resample {
    Up2,
    Down2,
}

/// Resamples `[..., H, W]` planes: 2×2 block means down, bilinear up.
pub fn resample_planes(x: &Tensor<f64>, factor: Resample) -> Result<Tensor<f64>> {
    let nd = x.ndim();
    if nd < 2 {
        return Err(Error::invalid("resample_grid", "need at least two dimensions"));
    }
    let (h, w) = (x.shape()[nd - 2], x.shape()[nd - 1]);
    let planes = x.numel() / (h * w);
    let mut shape = x.shape().to_vec();
    match factor {
        Resample::Down2 => {
            if h % 2 != 0 || w % 2 != 0 {
                return Err(Error::invalid(
                    "resample_grid",
                    format!("odd extent {h}x{w} cannot be halved"),
                ));
            }
            let (oh, ow) = (h / 2, w / 2);
            let d = x.data();
            let mut out = Vec::with_capacity(planes * oh * ow);
            for p in 0..planes {
                let base = p * h * w;
                for i in 0..oh {
                    for j in 0..ow {
                        let a = base + 2 * i * w + 2 * j;
                        out.push(0.25 * (d[a] + d[a + 1] + d[a + w] + d[a + w + 1]));
                    }
                }
            }
            shape[nd - 2] = oh;
            shape[nd - 1] = ow;
            Tensor::new(&shape, out)
        }
        Resample::Up2 => {
            shape[nd - 2] = 2 * h;
            shape[nd - 1] = 2 * w;
            Tensor::new(&shape, kernels::bilinear_forward(x.data(), planes, h, w, 2 * h, 2 * w))
        }
    }
}

/// Resamples the solution and the coefficient field of a trajectory.
pub fn resample_grid(traj: &Trajectory, factor: Resample) -> Result<Trajectory> {
    let u = resample_planes(&traj.u, factor)?;
    let values = resample_planes(&traj.coeff.values, factor)?;
    let (h, w) = (values.shape()[0], values.shape()[1]);
    Ok(Trajectory {
        u,
        dt: traj.dt,
        dx: 1.0 / w as f64,
        dy: 1.0 / h as f64,
        coeff: CoefficientField {
            values,
            ..traj.coeff.clone()
        },
        scalar_param: traj.scalar_param,
    })
}

/// Which pixels count towards losses and metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MaskKind {
    Full,
    RandomHoles { fraction: f64, seed: u64 },
    HalfDomain,
}

impl Default for MaskKind {
    fn default() -> Self {
        MaskKind::Full
    }
}

/// `[H, W]` mask of zeros and ones with at least one valid pixel.
pub fn make_mask(h: usize, w: usize, kind: MaskKind) -> Result<Tensor<f64>> {
    let n = h * w;
    if n == 0 {
        return Err(Error::invalid("make_mask", "empty grid"));
    }
    match kind {
        MaskKind::Full => Tensor::ones(&[h, w]),
        MaskKind::HalfDomain => Tensor::from_fn(&[h, w], |k| {
            let j = k % w;
            if j < w.div_ceil(2) {
                1.0
            } else {
                0.0
            }
        }),
        MaskKind::RandomHoles { fraction, seed } => {
            if !(0.0..=0.5).contains(&fraction) {
                return Err(Error::invalid(
                    "make_mask",
                    format!("hole fraction must lie in [0, 0.5], got {fraction}"),
                ));
            }
            let holes = ((fraction * n as f64).round() as usize).min(n - 1);
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let mut m = vec![1.0; n];
            for &i in &idx[..holes] {
                m[i] = 0.0;
            }
            Tensor::new(&[h, w], m)
        }
    }
}
