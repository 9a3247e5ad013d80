//! wasm-bindgen surface for `www/index.html`.

pub mod demo;

use wasm_bindgen::prelude::*;

fn js(e: tno::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub fn random_field(n: usize, length_scale: f64, seed: u32) -> Result<Vec<f64>, JsError> {
    demo::random_field(n, length_scale, seed as u64).map_err(js)
}

/// A solved trajectory; frames are row-major `n × n` planes.
#[wasm_bindgen]
pub struct Simulation {
    n: usize,
    frames: usize,
    u: Vec<f64>,
    kappa: Vec<f64>,
}

#[wasm_bindgen]
impl Simulation {
    #[allow(clippy::too_many_arguments)]
    #[wasm_bindgen(constructor)]
    pub fn new(
        transport: bool,
        n: usize,
        snapshots: usize,
        snapshot_dt: f64,
        kappa_min: f64,
        kappa_max: f64,
        speed: f64,
        seed: u32,
    ) -> Result<Simulation, JsError> {
        let req = demo::SolveRequest {
            transport,
            n,
            snapshots,
            snapshot_dt,
            kappa_min,
            kappa_max,
            speed,
            seed: seed as u64,
        };
        let t = demo::solve(&req).map_err(js)?;
        Ok(Simulation {
            n,
            frames: t.len(),
            u: t.u.data().to_vec(),
            kappa: t.coeff.values.data().to_vec(),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn frame(&self, i: usize) -> Vec<f64> {
        let plane = self.n * self.n;
        let i = i.min(self.frames - 1);
        self.u[i * plane..(i + 1) * plane].to_vec()
    }

    pub fn kappa(&self) -> Vec<f64> {
        self.kappa.clone()
    }

    /// Spatial sum of frame `i`; constant under periodic boundaries.
    pub fn mass(&self, i: usize) -> f64 {
        self.frame(i).iter().sum()
    }
}

/// JSON object mapping variant name to trainable parameter count.
#[wasm_bindgen]
pub fn parameter_counts(latent: usize, base_channels: usize, pool_size: usize) -> Result<String, JsError> {
    let counts = demo::parameter_counts(latent, base_channels, pool_size).map_err(js)?;
    let map: serde_json::Map<String, serde_json::Value> =
        counts.into_iter().map(|(v, c)| (v.name().to_string(), c.into())).collect();
    Ok(serde_json::Value::Object(map).to_string())
}
