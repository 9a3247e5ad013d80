//! Explicit finite-volume solvers for `u_t + v . grad u = div(kappa grad u)` on
//! the unit square with cell-centred unknowns.
//!
//! Each step is written as a convex combination of a cell and its four
//! neighbours. Face diffusivities are arithmetic means of the adjacent cells and
//! advection is first-order upwind. With zero velocity the advective weights
//! vanish exactly, so the heat solver is the same code path.

use serde::{Deserialize, Serialize};

use super::grf::CoefficientField;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    #[default]
    Periodic,
    /// Ghost cells held at zero.
    DirichletZero,
}

/// A solution on a uniform grid sampled at uniform times.
#[derive(Debug, Clone)]
pub struct Trajectory {
    /// `[T, H, W]`.
    pub u: Tensor<f64>,
    /// Time between stored snapshots.
    pub dt: f64,
    pub dx: f64,
    pub dy: f64,
    pub coeff: CoefficientField,
    /// Optional conditioning scalar (advection speed for the transport family).
    pub scalar_param: Option<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.u.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height(&self) -> usize {
        self.u.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.u.shape()[2]
    }

    /// Snapshot `t` as `[H, W]`.
    pub fn snapshot(&self, t: usize) -> Result<Tensor<f64>> {
        self.u.select(t)
    }
}

/// Largest combined Courant number: `dt (|vx|/dx + |vy|/dy) + 2 dt kappa_max (1/dx^2 + 1/dy^2)`.
/// The update is a convex combination (hence stable) when this is at most 1.
pub fn courant_number(kappa_max: f64, velocity: (f64, f64), dt: f64, dx: f64, dy: f64) -> f64 {
    dt * (velocity.0.abs() / dx + velocity.1.abs() / dy)
        + 2.0 * dt * kappa_max * (1.0 / (dx * dx) + 1.0 / (dy * dy))
}

/// Largest stable step for the given coefficients.
pub fn max_stable_dt(kappa_max: f64, velocity: (f64, f64), dx: f64, dy: f64) -> f64 {
    1.0 / courant_number(kappa_max, velocity, 1.0, dx, dy)
}

struct Stencil {
    h: usize,
    w: usize,
    /// Per-cell weights `[centre, west, east, south, north]` (south = row above).
    weights: Vec<[f64; 5]>,
    boundary: Boundary,
}

impl Stencil {
    fn new(coeff: &CoefficientField, velocity: (f64, f64), dt: f64, boundary: Boundary) -> Self {
        let (h, w) = (coeff.values.shape()[0], coeff.values.shape()[1]);
        let (dx, dy) = (1.0 / w as f64, 1.0 / h as f64);
        let k = coeff.values.data();
        let at = |i: usize, j: usize| k[i * w + j];
        let (vx, vy) = velocity;
        // Upwind weights: flow in +x pulls from the west neighbour.
        let (ax_w, ax_e) = (dt * vx.max(0.0) / dx, dt * (-vx).max(0.0) / dx);
        let (ay_s, ay_n) = (dt * vy.max(0.0) / dy, dt * (-vy).max(0.0) / dy);
        let mut weights = Vec::with_capacity(h * w);
        for i in 0..h {
            for j in 0..w {
                let c = at(i, j);
                let face = |ni: Option<usize>, nj: Option<usize>| -> f64 {
                    match (ni, nj) {
                        (Some(a), Some(b)) => 0.5 * (c + at(a, b)),
                        _ => c,
                    }
                };
                let wrap = |x: usize, d: isize, n: usize| -> Option<usize> {
                    let y = x as isize + d;
                    if (0..n as isize).contains(&y) {
                        Some(y as usize)
                    } else if boundary == Boundary::Periodic {
                        Some(y.rem_euclid(n as isize) as usize)
                    } else {
                        None
                    }
                };
                let kw = face(Some(i), wrap(j, -1, w));
                let ke = face(Some(i), wrap(j, 1, w));
                let ks = face(wrap(i, -1, h), Some(j));
                let kn = face(wrap(i, 1, h), Some(j));
                let dw = dt * kw / (dx * dx) + ax_w;
                let de = dt * ke / (dx * dx) + ax_e;
                let ds = dt * ks / (dy * dy) + ay_s;
                let dn = dt * kn / (dy * dy) + ay_n;
                weights.push([1.0 - (dw + de + ds + dn), dw, de, ds, dn]);
            }
        }
        Self {
            h,
            w,
            weights,
            boundary,
        }
    }

    fn apply(&self, u: &[f64], out: &mut [f64]) {
        let (h, w) = (self.h, self.w);
        let periodic = self.boundary == Boundary::Periodic;
        let get = |i: isize, j: isize| -> f64 {
            if periodic {
                u[(i.rem_euclid(h as isize) as usize) * w + j.rem_euclid(w as isize) as usize]
            } else if i < 0 || j < 0 || i >= h as isize || j >= w as isize {
                0.0
            } else {
                u[i as usize * w + j as usize]
            }
        };
        for i in 0..h {
            for j in 0..w {
                let idx = i * w + j;
                let [c, ww, we, ws, wn] = self.weights[idx];
                let (ii, jj) = (i as isize, j as isize);
                out[idx] = c * u[idx]
                    + ww * get(ii, jj - 1)
                    + we * get(ii, jj + 1)
                    + ws * get(ii - 1, jj)
                    + wn * get(ii + 1, jj);
            }
        }
    }
}

/// Integrates `steps` explicit steps of size `dt`, storing every
/// `save_every`-th state (the initial state included).
#[allow(clippy::too_many_arguments)]
pub fn integrate(
    u0: &Tensor<f64>,
    coeff: &CoefficientField,
    velocity: (f64, f64),
    dt: f64,
    steps: usize,
    save_every: usize,
    boundary: Boundary,
) -> Result<Trajectory> {
    if u0.ndim() != 2 || u0.shape() != coeff.values.shape() {
        return Err(Error::shape("integrate", coeff.values.shape(), u0.shape()));
    }
    if save_every == 0 || steps % save_every != 0 {
        return Err(Error::invalid(
            "integrate",
            format!("steps ({steps}) must be a positive multiple of save_every ({save_every})"),
        ));
    }
    if !(dt > 0.0) {
        return Err(Error::invalid("integrate", format!("dt must be positive, got {dt}")));
    }
    if coeff.min() < 0.0 {
        return Err(Error::invalid("integrate", "negative diffusivity"));
    }
    let (h, w) = (u0.shape()[0], u0.shape()[1]);
    let (dx, dy) = (1.0 / w as f64, 1.0 / h as f64);
    let cfl = courant_number(coeff.max(), velocity, dt, dx, dy);
    if cfl > 1.0 + 1e-12 {
        return Err(Error::Unstable(format!(
            "combined Courant number {cfl:.4} exceeds 1 (dt = {dt}, max stable dt = {:.3e})",
            max_stable_dt(coeff.max(), velocity, dx, dy)
        )));
    }
    let stencil = Stencil::new(coeff, velocity, dt, boundary);
    let frames = steps / save_every + 1;
    let mut data = Vec::with_capacity(frames * h * w);
    data.extend_from_slice(u0.data());
    let mut cur = u0.data().to_vec();
    let mut next = vec![0.0; h * w];
    for s in 1..=steps {
        stencil.apply(&cur, &mut next);
        std::mem::swap(&mut cur, &mut next);
        if s % save_every == 0 {
            data.extend_from_slice(&cur);
        }
    }
    if let Some(k) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: format!("solution value at flat index {k}"),
        });
    }
    Ok(Trajectory {
        u: Tensor::new(&[frames, h, w], data)?,
        dt: dt * save_every as f64,
        dx,
        dy,
        coeff: coeff.clone(),
        scalar_param: None,
    })
}

/// `u_t = div(kappa grad u)`, every step stored.
pub fn solve_heat2d(
    u0: &Tensor<f64>,
    coeff: &CoefficientField,
    dt: f64,
    steps: usize,
    boundary: Boundary,
) -> Result<Trajectory> {
    integrate(u0, coeff, (0.0, 0.0), dt, steps, 1, boundary)
}

/// Upwind advection with velocity `(vx, vy)` plus diffusion, periodic, every step stored.
pub fn solve_advdiff2d(
    u0: &Tensor<f64>,
    coeff: &CoefficientField,
    velocity: (f64, f64),
    dt: f64,
    steps: usize,
) -> Result<Trajectory> {
    let mut t = integrate(u0, coeff, velocity, dt, steps, 1, Boundary::Periodic)?;
    t.scalar_param = Some(velocity.0.hypot(velocity.1));
    Ok(t)
}
