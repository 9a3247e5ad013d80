//! The temporal neural operator, its ablations and the DeepONet baseline.
//!
//! A [`TnoModel`] owns a flat list of named parameters plus batch-norm running
//! statistics. Forward passes run inside a [`Session`], which binds every
//! parameter onto a fresh [`Tape`] and collects batch statistics so the caller
//! can fold them back into the model after the step.

mod checkpoint;
mod config;
mod layers;

pub use checkpoint::{
    load_checkpoint, read_manifest, save_checkpoint, Checkpoint, CheckpointManifest, TensorEntry,
};
pub use config::{TnoConfig, TrunkTime, Variant};
pub use layers::{
    matched_hidden_width, pointwise_param_count, unet_param_count, BnBuffers, Linear, Mlp,
    ParamId, Spatial, UNet,
};

use crate::autodiff::{Activation, BatchStats, BnMode, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use layers::Builder;

/// Channels of the trunk input: normalised `(t, x, y)`.
pub const GRID_CHANNELS: usize = 3;

#[derive(Debug, Clone)]
pub enum Net {
    Operator {
        encoder_b: Linear,
        encoder_tb: Option<Linear>,
        spatial_b: Spatial,
        spatial_tb: Option<Spatial>,
        trunk: Mlp,
        decoder: Mlp,
    },
    DeepOnet {
        /// Acts on the pooled, flattened input and history.
        branch: Mlp,
        trunk: Mlp,
        bias: ParamId,
    },
}

/// Which spatial processor to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Branch,
    TBranch,
}

#[derive(Debug, Clone)]
pub struct TnoModel<T: Scalar> {
    config: TnoConfig,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    bn: Vec<BnBuffers>,
    net: Net,
}

impl<T: Scalar> TnoModel<T> {
    pub fn new(config: TnoConfig) -> Result<Self> {
        config.validate()?;
        let mut b = Builder::<T>::new(config.seed);
        let p = config.latent;
        let k = config.bundle;
        let trunk_widths: Vec<usize> = std::iter::once(GRID_CHANNELS)
            .chain(config.trunk_hidden.iter().copied())
            .chain(std::iter::once(p))
            .collect();
        let net = if config.variant.is_deeponet() {
            let sensors = (config.input_channels + config.history) * config.pool_size.pow(2);
            let widths: Vec<usize> = std::iter::once(sensors)
                .chain(config.deeponet_hidden.iter().copied())
                .chain(std::iter::once(k * p))
                .collect();
            let branch = Mlp::new(&mut b, "branch", &widths, config.branch_activation)?;
            let trunk = Mlp::new(&mut b, "trunk", &trunk_widths, config.trunk_activation)?;
            let bias = b.constant("output.bias".into(), &[k], 0.0)?;
            Net::DeepOnet {
                branch,
                trunk,
                bias,
            }
        } else {
            let with_tb = config.variant.has_tbranch();
            let c = config.unet_base_channels;
            let spatial = |b: &mut Builder<T>, name: &str, act: Activation| -> Result<Spatial> {
                if config.variant == Variant::NoUnet {
                    let h = matched_hidden_width(p, unet_param_count(p, c));
                    Ok(Spatial::Pointwise(Mlp::new(b, name, &[p, h, h, p], act)?))
                } else {
                    Ok(Spatial::UNet(UNet::new(b, name, p, c, config.pool_size, act)?))
                }
            };
            let encoder_b = Linear::new(&mut b, "encoder_b", config.input_channels, p, true)?;
            let encoder_tb = if with_tb {
                Some(Linear::new(&mut b, "encoder_tb", config.history, p, true)?)
            } else {
                None
            };
            let spatial_b = spatial(&mut b, "unet_b", config.branch_activation)?;
            let spatial_tb = if with_tb {
                Some(spatial(&mut b, "unet_tb", config.tbranch_activation)?)
            } else {
                None
            };
            let trunk = Mlp::new(&mut b, "trunk", &trunk_widths, config.trunk_activation)?;
            let dec_widths: Vec<usize> = std::iter::once(p)
                .chain(config.decoder_widths())
                .chain(std::iter::once(k))
                .collect();
            let decoder = Mlp::new(&mut b, "decoder", &dec_widths, config.decoder_activation)?;
            Net::Operator {
                encoder_b,
                encoder_tb,
                spatial_b,
                spatial_tb,
                trunk,
                decoder,
            }
        };
        Ok(Self {
            config,
            names: b.names,
            params: b.tensors,
            bn: b.bn,
            net,
        })
    }

    pub fn config(&self) -> &TnoConfig {
        &self.config
    }

    pub fn net(&self) -> &Net {
        &self.net
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn param_by_name_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        let id = self.param_id(name)?;
        Some(&mut self.params[id.0])
    }

    pub fn bn_buffers(&self) -> &[BnBuffers] {
        &self.bn
    }

    /// Exact number of trainable scalars.
    pub fn count_parameters(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Trainable scalars whose name starts with `prefix`.
    pub fn count_parameters_with_prefix(&self, prefix: &str) -> usize {
        self.names
            .iter()
            .zip(&self.params)
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Folds batch statistics into the running averages, in order.
    pub fn apply_bn_updates(&mut self, updates: &[(usize, BatchStats)]) {
        let m = self.config.bn_momentum;
        for (slot, stats) in updates {
            let buf = &mut self.bn[*slot];
            for (r, &v) in buf.running_mean.iter_mut().zip(&stats.mean) {
                *r = (1.0 - m) * *r + m * v;
            }
            for (r, &v) in buf.running_var.iter_mut().zip(&stats.var) {
                *r = (1.0 - m) * *r + m * v;
            }
        }
    }

    /// Same architecture and values in another precision.
    pub fn cast<U: Scalar>(&self) -> TnoModel<U> {
        TnoModel {
            config: self.config.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            bn: self.bn.clone(),
            net: self.net.clone(),
        }
    }

    /// Overwrites parameter values and running statistics from `other`.
    pub fn copy_state_from(&mut self, other: &TnoModel<T>) -> Result<()> {
        if other.names != self.names || other.config != self.config {
            return Err(Error::IncompatibleCheckpoint(
                "architectures differ".into(),
            ));
        }
        self.params.clone_from(&other.params);
        self.bn.clone_from(&other.bn);
        Ok(())
    }

    /// Eval-mode forward on concrete tensors: `v: [B, Cv, H, W]`,
    /// `hist: [B, L, H, W]`, `grid: [B, 3, H, W]` to `[B, K, H, W]`.
    pub fn predict(&self, v: &Tensor<T>, hist: &Tensor<T>, grid: &Tensor<T>) -> Result<Tensor<T>> {
        let mut s = Session::eval(self);
        let (v, hist, grid) = (s.input(v), s.input(hist), s.input(grid));
        let out = s.forward(v, hist, grid)?;
        Ok(s.tape.value(out).clone())
    }
}

/// Gradients of one backward pass, aligned with [`TnoModel::params`].
#[derive(Debug, Clone)]
pub struct StepGrads<T: Scalar> {
    pub grads: Vec<Vec<T>>,
    pub bn_updates: Vec<(usize, BatchStats)>,
}

/// One tape plus the model's parameters bound onto it.
pub struct Session<'m, T: Scalar> {
    pub tape: Tape<T>,
    model: &'m TnoModel<T>,
    vars: Vec<Var>,
    mode: BnMode,
    bn_updates: Vec<(usize, BatchStats)>,
    trace: Option<Vec<(&'static str, Vec<usize>)>>,
}

impl<'m, T: Scalar> Session<'m, T> {
    /// `track_grads` decides whether parameters are differentiable leaves.
    pub fn new(model: &'m TnoModel<T>, mode: BnMode, track_grads: bool) -> Self {
        let mut tape = Tape::new();
        let vars = model
            .params
            .iter()
            .map(|p| {
                if track_grads {
                    tape.param(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect();
        Self {
            tape,
            model,
            vars,
            mode,
            bn_updates: Vec::new(),
            trace: None,
        }
    }

    pub fn train(model: &'m TnoModel<T>) -> Self {
        Self::new(model, BnMode::Train, true)
    }

    pub fn eval(model: &'m TnoModel<T>) -> Self {
        Self::new(model, BnMode::Eval, false)
    }

    pub fn model(&self) -> &'m TnoModel<T> {
        self.model
    }

    pub fn mode(&self) -> BnMode {
        self.mode
    }

    pub fn param(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn param_vars(&self) -> &[Var] {
        &self.vars
    }

    /// Non-differentiable input tensor.
    pub fn input(&mut self, t: &Tensor<T>) -> Var {
        self.tape.constant(t.clone())
    }

    /// Records the shape of every U-Net stage from now on.
    pub fn enable_trace(&mut self) {
        self.trace = Some(Vec::new());
    }

    pub fn trace(&self) -> &[(&'static str, Vec<usize>)] {
        self.trace.as_deref().unwrap_or(&[])
    }

    pub(crate) fn record(&mut self, stage: &'static str, v: Var) {
        if let Some(t) = self.trace.as_mut() {
            t.push((stage, self.tape.value(v).shape().to_vec()));
        }
    }

    pub(crate) fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, slot: usize) -> Result<Var> {
        let buf = &self.model.bn[slot];
        let (y, stats) = self.tape.batch_norm2d(
            x,
            gamma,
            beta,
            (&buf.running_mean, &buf.running_var),
            self.mode,
            self.model.config.bn_eps,
        )?;
        if let Some(stats) = stats {
            self.bn_updates.push((slot, stats));
        }
        Ok(y)
    }

    fn operator(&self) -> Result<(&'m Linear, Option<&'m Linear>, &'m Spatial, Option<&'m Spatial>, &'m Mlp, &'m Mlp)> {
        match &self.model.net {
            Net::Operator {
                encoder_b,
                encoder_tb,
                spatial_b,
                spatial_tb,
                trunk,
                decoder,
            } => Ok((
                encoder_b,
                encoder_tb.as_ref(),
                spatial_b,
                spatial_tb.as_ref(),
                trunk,
                decoder,
            )),
            Net::DeepOnet { .. } => Err(Error::invalid(
                "tno_forward",
                format!("variant {} has no branch encoders", self.model.config.variant),
            )),
        }
    }

    fn check_channels(&self, op: &'static str, x: Var, expected: usize) -> Result<[usize; 4]> {
        let s = self.tape.value(x).shape();
        if s.len() != 4 || s[1] != expected {
            let mut want = s.to_vec();
            if want.len() > 1 {
                want[1] = expected;
            }
            return Err(Error::shape(op, &want, s));
        }
        Ok([s[0], s[1], s[2], s[3]])
    }

    /// Pointwise `Cv → p` map of the input function.
    pub fn encode_branch(&mut self, v: Var) -> Result<Var> {
        self.check_channels("encode_branch", v, self.model.config.input_channels)?;
        let (enc, ..) = self.operator()?;
        enc.forward(self, v)
    }

    /// Pointwise `L → p` map of the stacked history.
    pub fn encode_tbranch(&mut self, hist: Var) -> Result<Var> {
        self.check_channels("encode_tbranch", hist, self.model.config.history)?;
        let (_, enc, ..) = self.operator()?;
        let enc = enc.ok_or_else(|| {
            Error::invalid(
                "encode_tbranch",
                format!("variant {} has no temporal branch", self.model.config.variant),
            )
        })?;
        enc.forward(self, hist)
    }

    /// Pool, U-Net (or its pointwise stand-in) and resize back to the input extent.
    pub fn unet_forward(&mut self, latent: Var, which: Branch) -> Result<Var> {
        self.check_channels("unet_forward", latent, self.model.config.latent)?;
        let (_, _, sb, stb, ..) = self.operator()?;
        let spatial = match which {
            Branch::Branch => sb,
            Branch::TBranch => stb.ok_or_else(|| {
                Error::invalid("unet_forward", "variant has no temporal branch")
            })?,
        };
        spatial.forward(self, latent)
    }

    /// Trunk MLP applied at every pixel of the `(t, x, y)` grid.
    pub fn trunk_forward(&mut self, grid: Var) -> Result<Var> {
        self.check_channels("trunk_forward", grid, GRID_CHANNELS)?;
        let trunk = match &self.model.net {
            Net::Operator { trunk, .. } | Net::DeepOnet { trunk, .. } => trunk,
        };
        trunk.forward(self, grid)
    }

    /// Hadamard product of the latents followed by the shared pointwise decoder.
    pub fn fuse_and_decode(&mut self, ub: Var, utb: Option<Var>, t: Var) -> Result<Var> {
        let (.., decoder) = self.operator()?;
        let mut z = self.tape.hadamard(ub, t)?;
        if let Some(utb) = utb {
            z = self.tape.hadamard(z, utb)?;
        }
        decoder.forward(self, z)
    }

    /// Decoder applied to an already fused latent.
    pub fn decode(&mut self, z: Var) -> Result<Var> {
        let (.., decoder) = self.operator()?;
        decoder.forward(self, z)
    }

    fn output_activation(&mut self, x: Var, act: Option<Activation>) -> Var {
        match act {
            Some(a) => self.tape.activation(x, a),
            None => x,
        }
    }

    /// Full forward for the configured variant, `[B, K, H, W]`.
    pub fn forward(&mut self, v: Var, hist: Var, grid: Var) -> Result<Var> {
        if self.model.config.variant.is_deeponet() {
            return self.deeponet_forward(v, hist, grid);
        }
        let [b, _, h, w] = self.check_channels("tno_forward", v, self.model.config.input_channels)?;
        for x in [hist, grid] {
            let s = self.tape.value(x).shape();
            if s.len() != 4 || s[0] != b || s[2] != h || s[3] != w {
                return Err(Error::shape("tno_forward", &[b, 0, h, w], s));
            }
        }
        let cfg = &self.model.config;
        let (out_b, out_tb) = (cfg.branch_output_activation, cfg.tbranch_output_activation);
        let lb = self.encode_branch(v)?;
        let ub = self.unet_forward(lb, Branch::Branch)?;
        let ub = self.output_activation(ub, out_b);
        let utb = if self.model.config.variant.has_tbranch() {
            let lt = self.encode_tbranch(hist)?;
            let u = self.unet_forward(lt, Branch::TBranch)?;
            Some(self.output_activation(u, out_tb))
        } else {
            None
        };
        let t = self.trunk_forward(grid)?;
        self.fuse_and_decode(ub, utb, t)
    }

    /// Branch MLP on pooled sensor values, trunk on the grid, inner product
    /// over the latent per output step plus a per-step bias.
    pub fn deeponet_forward(&mut self, v: Var, hist: Var, grid: Var) -> Result<Var> {
        let (branch, bias) = match &self.model.net {
            Net::DeepOnet { branch, bias, .. } => (branch, *bias),
            Net::Operator { .. } => {
                return Err(Error::invalid("deeponet_forward", "model is not a DeepONet"))
            }
        };
        let cfg = &self.model.config;
        let [b, ..] = self.check_channels("deeponet_forward", v, cfg.input_channels)?;
        self.check_channels("deeponet_forward", hist, cfg.history)?;
        let x = self.tape.concat_channels(v, hist)?;
        let pooled = self.tape.adaptive_avg_pool2d(x, cfg.pool_size)?;
        let n = self.tape.value(pooled).numel() / b;
        let flat = self.tape.reshape(pooled, &[b, n])?;
        let coeffs = branch.forward(self, flat)?;
        let t = self.trunk_forward(grid)?;
        let out = self.tape.latent_contract(coeffs, t)?;
        let bias = self.param(bias);
        self.tape.add_channel_bias(out, bias)
    }

    /// Drops the oldest `K` history channels and appends `pred`, keeping the last `L`.
    pub fn next_history(&mut self, hist: Var, pred: Var) -> Result<Var> {
        let l = self.model.config.history;
        let cat = self.tape.concat_channels(hist, pred)?;
        let total = self.tape.value(cat).shape()[1];
        self.tape.slice_channels(cat, total - l, l)
    }

    /// Backward from `loss`; every parameter gets a (possibly zero) gradient.
    pub fn finish(self, loss: Var) -> Result<StepGrads<T>> {
        let mut g = self.tape.backward(loss)?;
        let grads = self
            .vars
            .iter()
            .zip(&self.model.params)
            .map(|(&v, p)| g.take(v).unwrap_or_else(|| vec![T::zero(); p.numel()]))
            .collect();
        Ok(StepGrads {
            grads,
            bn_updates: self.bn_updates,
        })
    }

    /// Batch statistics gathered so far, without a backward pass.
    pub fn into_bn_updates(self) -> Vec<(usize, BatchStats)> {
        self.bn_updates
    }
}

/// `K` predicted snapshots with their absolute times.
#[derive(Debug, Clone)]
pub struct ForecastBundle<T: Scalar> {
    /// `[K, H, W]`.
    pub values: Tensor<T>,
    pub lead_times: Vec<f64>,
}

impl<T: Scalar> ForecastBundle<T> {
    pub fn new(values: Tensor<T>, lead_times: Vec<f64>) -> Result<Self> {
        if values.ndim() != 3 || values.shape()[0] != lead_times.len() {
            return Err(Error::invalid(
                "forecast_bundle",
                format!("{} lead times for values {:?}", lead_times.len(), values.shape()),
            ));
        }
        if lead_times.len() > 1 {
            let dt = lead_times[1] - lead_times[0];
            let uniform = lead_times
                .windows(2)
                .all(|w| w[1] > w[0] && ((w[1] - w[0]) - dt).abs() <= 1e-9 * dt.abs().max(1.0));
            if !uniform {
                return Err(Error::invalid(
                    "forecast_bundle",
                    "lead times must increase with uniform spacing",
                ));
            }
        }
        Ok(Self { values, lead_times })
    }
}
