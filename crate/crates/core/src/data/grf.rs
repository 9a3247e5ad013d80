//! Gaussian random fields on the periodic unit square by spectral synthesis.
//!
//! A field is a finite sum of Fourier modes with Gaussian spectral weights, so
//! it can be evaluated at cell centres of any grid and every resolution
//! samples the same underlying function.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Modes with spectral amplitude below this are dropped.
const AMPLITUDE_CUTOFF: f64 = 1e-8;

/// Random Fourier coefficients with spectrum `exp(-2 pi^2 l^2 |k|^2)`, whose
/// covariance is close to `exp(-r^2 / (2 l^2))` for `l` well below 1.
#[derive(Debug, Clone)]
pub struct Grf {
    pub length_scale: f64,
    pub seed: u64,
    /// `(kx, ky, cos coefficient, sin coefficient)`.
    modes: Vec<(i32, i32, f64, f64)>,
    /// Standard deviation of the field at any point.
    std: f64,
}

impl Grf {
    pub fn new(length_scale: f64, seed: u64) -> Result<Self> {
        if !(length_scale > 0.0 && length_scale.is_finite()) {
            return Err(Error::invalid("grf", format!("length scale must be positive, got {length_scale}")));
        }
        // amplitude exp(-pi^2 l^2 |k|^2) < cutoff  <=>  |k| > sqrt(-ln(cutoff)) / (pi l)
        let kmax = ((-AMPLITUDE_CUTOFF.ln()).sqrt() / (PI * length_scale)).ceil() as i32;
        let kmax = kmax.clamp(1, 64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut modes = Vec::new();
        let mut var = 0.0;
        // Half plane of wave vectors; the zero mode is excluded so fields have zero mean.
        for kx in 0..=kmax {
            for ky in -kmax..=kmax {
                if kx == 0 && ky <= 0 {
                    continue;
                }
                let k2 = (kx * kx + ky * ky) as f64;
                let amp = (-PI * PI * length_scale * length_scale * k2).exp();
                if amp < AMPLITUDE_CUTOFF {
                    continue;
                }
                let a: f64 = StandardNormal.sample(&mut rng);
                let b: f64 = StandardNormal.sample(&mut rng);
                modes.push((kx, ky, amp * a, amp * b));
                var += amp * amp;
            }
        }
        Ok(Self {
            length_scale,
            seed,
            modes,
            std: var.sqrt(),
        })
    }

    /// Expected pointwise standard deviation.
    pub fn std(&self) -> f64 {
        self.std
    }

    /// Values at cell centres `((j + 0.5) / w, (i + 0.5) / h)`, `[h, w]` row-major.
    pub fn eval(&self, h: usize, w: usize) -> Result<Tensor<f64>> {
        let mut out = vec![0.0; h * w];
        let mut cy = vec![0.0; h];
        let mut sy = vec![0.0; h];
        let mut cx = vec![0.0; w];
        let mut sx = vec![0.0; w];
        for &(kx, ky, a, b) in &self.modes {
            for (i, (c, s)) in cy.iter_mut().zip(sy.iter_mut()).enumerate() {
                let th = 2.0 * PI * ky as f64 * (i as f64 + 0.5) / h as f64;
                (*s, *c) = th.sin_cos();
            }
            for (j, (c, s)) in cx.iter_mut().zip(sx.iter_mut()).enumerate() {
                let th = 2.0 * PI * kx as f64 * (j as f64 + 0.5) / w as f64;
                (*s, *c) = th.sin_cos();
            }
            for i in 0..h {
                let row = &mut out[i * w..(i + 1) * w];
                for (j, v) in row.iter_mut().enumerate() {
                    // cos(a + b) and sin(a + b) from the separable tables.
                    let cos = cx[j] * cy[i] - sx[j] * sy[i];
                    let sin = sx[j] * cy[i] + cx[j] * sy[i];
                    *v += a * cos + b * sin;
                }
            }
        }
        Tensor::new(&[h, w], out)
    }

    /// The field divided by its expected standard deviation.
    pub fn eval_standardized(&self, h: usize, w: usize) -> Result<Tensor<f64>> {
        let s = 1.0 / self.std;
        Ok(self.eval(h, w)?.map(|v| v * s))
    }

    /// Evaluates on several grids and maps all of them with one affine map so
    /// the joint minimum lands on `lo` and the joint maximum on `hi`.
    pub fn eval_affine(&self, grids: &[(usize, usize)], lo: f64, hi: f64) -> Result<Vec<Tensor<f64>>> {
        let raw = grids
            .iter()
            .map(|&(h, w)| self.eval(h, w))
            .collect::<Result<Vec<_>>>()?;
        let (mn, mx) = raw
            .iter()
            .flat_map(|t| t.data().iter())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let span = mx - mn;
        Ok(raw
            .into_iter()
            .map(|t| {
                t.map(|v| {
                    if span > 0.0 {
                        (lo + (v - mn) / span * (hi - lo)).clamp(lo, hi)
                    } else {
                        (lo + hi) / 2.0
                    }
                })
            })
            .collect())
    }
}

/// Positive diffusivity field `kappa(x, y)`.
#[derive(Debug, Clone)]
pub struct CoefficientField {
    /// `[H, W]`.
    pub values: Tensor<f64>,
    pub length_scale: f64,
    pub seed: u64,
}

impl CoefficientField {
    pub fn constant(h: usize, w: usize, kappa: f64) -> Result<Self> {
        if kappa < 0.0 {
            return Err(Error::invalid("coefficient_field", "diffusivity must be non-negative"));
        }
        Ok(Self {
            values: Tensor::full(&[h, w], kappa)?,
            length_scale: f64::INFINITY,
            seed: 0,
        })
    }

    pub fn max(&self) -> f64 {
        self.values.data().iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.data().iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Smooth random diffusivity with values in `[kappa_min, kappa_max]`.
pub fn grf_sample(
    h: usize,
    w: usize,
    length_scale: f64,
    kappa_min: f64,
    kappa_max: f64,
    seed: u64,
) -> Result<CoefficientField> {
    if !(kappa_max > kappa_min && kappa_min > 0.0) {
        return Err(Error::invalid(
            "grf_sample",
            format!("need kappa_max > kappa_min > 0, got [{kappa_min}, {kappa_max}]"),
        ));
    }
    let grf = Grf::new(length_scale, seed)?;
    let values = grf
        .eval_affine(&[(h, w)], kappa_min, kappa_max)?
        .pop()
        .expect("one grid requested");
    Ok(CoefficientField {
        values,
        length_scale,
        seed,
    })
}
