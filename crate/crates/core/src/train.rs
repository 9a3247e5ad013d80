//! Two-phase training: teacher forcing, then fine-tuning on the model's own
//! rollouts, with temporal bundling and a masked loss.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::data::{
    coordinate_grid, input_function, make_mask, znorm_apply, znorm_apply_input,
    Dataset, NormStats, Trajectory,
};
use crate::error::{Error, Result};
use crate::model::{save_checkpoint, Session, TnoConfig, TnoModel};
use crate::optim::{clip_grad_norm, AdamConfig, AdamState, LrSchedule};
use crate::tensor::{Scalar, Tensor};

/// Learning-rate schedule family; `lr0` and the horizon come from the plan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScheduleKind {
    Constant,
    /// Cosine annealing over all epochs of both phases.
    Cosine,
    StepDecay { gamma: f64, every: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainPlan {
    pub tf_epochs: usize,
    pub ft_epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub weight_decay: f64,
    pub schedule: ScheduleKind,
    /// Consecutive `K`-bundles supervised per sample.
    pub rollout_windows_per_sample: usize,
    /// Random window origins drawn from every training trajectory each epoch.
    pub windows_per_trajectory: usize,
    pub clip_norm: f64,
    /// Snapshots predicted per evaluation rollout (`n_windows * K`).
    pub eval_horizon: usize,
    pub seed: u64,
}

impl Default for TrainPlan {
    fn default() -> Self {
        Self {
            tf_epochs: 30,
            ft_epochs: 15,
            batch_size: 8,
            lr0: 1e-3,
            weight_decay: 1e-3,
            schedule: ScheduleKind::Cosine,
            rollout_windows_per_sample: 2,
            windows_per_trajectory: 2,
            clip_norm: 1.0,
            eval_horizon: 8,
            seed: 0,
        }
    }
}

impl TrainPlan {
    pub fn validate(&self) -> Result<()> {
        if self.tf_epochs + self.ft_epochs == 0 {
            return Err(Error::Config("tf_epochs + ft_epochs must be >= 1".into()));
        }
        if self.rollout_windows_per_sample == 0 || self.batch_size == 0 || self.windows_per_trajectory == 0 {
            return Err(Error::Config(
                "rollout_windows_per_sample, batch_size and windows_per_trajectory must be >= 1".into(),
            ));
        }
        if !(self.lr0 > 0.0) || self.weight_decay < 0.0 || !(self.clip_norm > 0.0) {
            return Err(Error::Config("lr0 and clip_norm must be positive, weight_decay >= 0".into()));
        }
        if self.eval_horizon == 0 {
            return Err(Error::Config("eval_horizon must be >= 1".into()));
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.tf_epochs + self.ft_epochs
    }

    pub fn lr_schedule(&self) -> LrSchedule {
        match self.schedule {
            ScheduleKind::Constant => LrSchedule::Constant { lr0: self.lr0 },
            ScheduleKind::Cosine => LrSchedule::CosineAnneal {
                lr0: self.lr0,
                total_steps: self.total_epochs(),
            },
            ScheduleKind::StepDecay { gamma, every } => LrSchedule::StepDecay {
                lr0: self.lr0,
                gamma,
                every,
            },
        }
    }

    /// Rollout windows needed to cover the evaluation horizon with bundles of `k`.
    pub fn eval_windows(&self, k: usize) -> usize {
        self.eval_horizon.div_ceil(k)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    TeacherForcing,
    FineTuning,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::TeacherForcing => "teacher_forcing",
            Phase::FineTuning => "fine_tuning",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub seconds: f64,
    pub clipped_steps: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

pub const TRAIN_LOG_HEADER: [&str; 6] = ["epoch", "phase", "train_loss", "val_loss", "lr", "seconds"];

impl TrainLog {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(TRAIN_LOG_HEADER)?;
        for r in &self.records {
            out.write_record([
                r.epoch.to_string(),
                r.phase.name().to_string(),
                format!("{:e}", r.train_loss),
                format!("{:e}", r.val_loss),
                format!("{:e}", r.lr),
                format!("{:.3}", r.seconds),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// Normalised, mask-aware view of trajectories ready for batching.
#[derive(Debug, Clone)]
pub struct PreparedSplit<T: Scalar> {
    /// Normalised solutions `[T, H, W]`.
    pub u: Vec<Tensor<T>>,
    /// Normalised, masked input functions `[Cv, H, W]`.
    pub v: Vec<Tensor<T>>,
    /// `[H, W]`.
    pub mask: Tensor<T>,
    pub h: usize,
    pub w: usize,
    /// Snapshots per trajectory; times are normalised over this horizon.
    pub horizon: usize,
}

impl<T: Scalar> PreparedSplit<T> {
    pub fn new(trajs: &[Trajectory], norm: &NormStats, mask: &Tensor<f64>) -> Result<Self> {
        let first = trajs
            .first()
            .ok_or_else(|| Error::invalid("prepare", "no trajectories"))?;
        let (h, w) = (first.height(), first.width());
        let norm = norm.resampled(h, w)?;
        if mask.shape() != [h, w] {
            return Err(Error::shape("prepare", &[h, w], mask.shape()));
        }
        let mut u = Vec::with_capacity(trajs.len());
        let mut v = Vec::with_capacity(trajs.len());
        for t in trajs {
            if t.height() != h || t.width() != w || t.len() != first.len() {
                return Err(Error::shape("prepare", first.u.shape(), t.u.shape()));
            }
            u.push(znorm_apply(&t.u, &norm)?.cast());
            let vn = znorm_apply_input(&input_function(t), &norm)?;
            v.push(masked(&vn, mask).cast());
        }
        Ok(Self {
            u,
            v,
            mask: mask.cast(),
            h,
            w,
            horizon: first.len(),
        })
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Snapshots `start..start + n` of trajectory `i`.
    fn frames(&self, i: usize, start: usize, n: usize) -> &[T] {
        let p = self.plane();
        &self.u[i].data()[start * p..(start + n) * p]
    }
}

fn masked(x: &Tensor<f64>, mask: &Tensor<f64>) -> Tensor<f64> {
    let p = mask.numel();
    let mut d = x.data().to_vec();
    for c in d.chunks_mut(p) {
        for (v, &m) in c.iter_mut().zip(mask.data()) {
            if m == 0.0 {
                *v = 0.0;
            }
        }
    }
    Tensor::new(x.shape(), d).expect("shape preserved")
}

fn masked_in_place<T: Scalar>(d: &mut [T], mask: &[T]) {
    for c in d.chunks_mut(mask.len()) {
        for (v, &m) in c.iter_mut().zip(mask) {
            if m == T::zero() {
                *v = T::zero();
            }
        }
    }
}

/// Stacked tensors for a set of `(trajectory, t0)` windows.
pub struct Batch<T: Scalar> {
    pub v: Tensor<T>,
    /// Ground-truth history ending at `t0 + w K`, one per window.
    pub hist: Vec<Tensor<T>>,
    pub grid: Vec<Tensor<T>>,
    pub target: Vec<Tensor<T>>,
    /// `[B, K, H, W]`.
    pub mask: Tensor<T>,
    /// `[B, L, H, W]`, zero-fills fed-back predictions.
    pub hist_mask: Tensor<T>,
    pub all_valid: bool,
}

impl<T: Scalar> Batch<T> {
    pub fn build(
        split: &PreparedSplit<T>,
        items: &[(usize, usize)],
        cfg: &TnoConfig,
        windows: usize,
    ) -> Result<Self> {
        let (l, k, time) = (cfg.history, cfg.bundle, cfg.trunk_time);
        let b = items.len();
        let (h, w, p) = (split.h, split.w, split.plane());
        let cv = split.v[0].shape()[0];
        let mut v = Vec::with_capacity(b * cv * p);
        for &(i, _) in items {
            v.extend_from_slice(split.v[i].data());
        }
        let mut hist = Vec::with_capacity(windows);
        let mut grid = Vec::with_capacity(windows);
        let mut target = Vec::with_capacity(windows);
        for win in 0..windows {
            let mut hd = Vec::with_capacity(b * l * p);
            let mut gd = Vec::with_capacity(b * 3 * p);
            let mut td = Vec::with_capacity(b * k * p);
            for &(i, t0) in items {
                let origin = t0 + win * k;
                if origin + 1 < l || origin + k >= split.horizon {
                    return Err(Error::invalid(
                        "batch",
                        format!("window at {origin} does not fit {} snapshots", split.horizon),
                    ));
                }
                hd.extend_from_slice(split.frames(i, origin + 1 - l, l));
                let g = coordinate_grid(h, w, time.coordinate(origin, split.horizon));
                gd.extend(g.data().iter().map(|&x| T::of(x)));
                td.extend_from_slice(split.frames(i, origin + 1, k));
            }
            masked_in_place(&mut hd, split.mask.data());
            hist.push(Tensor::new(&[b, l, h, w], hd)?);
            grid.push(Tensor::new(&[b, 3, h, w], gd)?);
            target.push(Tensor::new(&[b, k, h, w], td)?);
        }
        let md: Vec<T> = (0..b * k).flat_map(|_| split.mask.data().iter().copied()).collect();
        let hm: Vec<T> = (0..b * l).flat_map(|_| split.mask.data().iter().copied()).collect();
        let all_valid = split.mask.data().iter().all(|&m| m != T::zero());
        Ok(Self {
            v: Tensor::new(&[b, cv, h, w], v)?,
            hist,
            grid,
            target,
            mask: Tensor::new(&[b, k, h, w], md)?,
            hist_mask: Tensor::new(&[b, l, h, w], hm)?,
            all_valid,
        })
    }
}

/// Sum over windows of the masked MSE. During fine-tuning every window after
/// the first takes its history from the previous prediction, gradients attached.
pub fn bundle_loss<T: Scalar>(s: &mut Session<'_, T>, batch: &Batch<T>, phase: Phase) -> Result<Var> {
    let v = s.input(&batch.v);
    let mut hist = s.input(&batch.hist[0]);
    let mut prev: Option<Var> = None;
    let mut total: Option<Var> = None;
    for win in 0..batch.target.len() {
        if let Some(pred) = prev {
            hist = match phase {
                Phase::TeacherForcing => s.input(&batch.hist[win]),
                Phase::FineTuning => chain_history(s, hist, pred, batch)?,
            };
        }
        let grid = s.input(&batch.grid[win]);
        let pred = s.forward(v, hist, grid)?;
        let loss = s.tape.masked_mse(pred, &batch.target[win], &batch.mask)?;
        total = Some(match total {
            None => loss,
            Some(t) => s.tape.add(t, loss)?,
        });
        prev = Some(pred);
    }
    total.ok_or_else(|| Error::invalid("bundle_loss", "no windows"))
}

fn chain_history<T: Scalar>(s: &mut Session<'_, T>, hist: Var, pred: Var, batch: &Batch<T>) -> Result<Var> {
    let next = s.next_history(hist, pred)?;
    if batch.all_valid {
        Ok(next)
    } else {
        let m = s.input(&batch.hist_mask);
        s.tape.hadamard(next, m)
    }
}

/// Autoregressive eval-mode rollout from `u_init: [B, L, H, W]`, one grid per
/// window. Returns `[B, n_windows * K, H, W]`.
pub fn rollout<T: Scalar>(
    model: &TnoModel<T>,
    v: &Tensor<T>,
    u_init: &Tensor<T>,
    grids: &[Tensor<T>],
) -> Result<Tensor<T>> {
    rollout_masked(model, v, u_init, grids, None)
}

fn rollout_masked<T: Scalar>(
    model: &TnoModel<T>,
    v: &Tensor<T>,
    u_init: &Tensor<T>,
    grids: &[Tensor<T>],
    hist_mask: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    if grids.is_empty() {
        return Err(Error::invalid("rollout", "need at least one window"));
    }
    let mut s = Session::eval(model);
    let v = s.input(v);
    let mut hist = s.input(u_init);
    let mut out: Option<Var> = None;
    for g in grids {
        let grid = s.input(g);
        let pred = s.forward(v, hist, grid)?;
        out = Some(match out {
            None => pred,
            Some(o) => s.tape.concat_channels(o, pred)?,
        });
        hist = s.next_history(hist, pred)?;
        if let Some(m) = hist_mask {
            let m = s.input(m);
            hist = s.tape.hadamard(hist, m)?;
        }
    }
    Ok(s.tape.value(out.expect("at least one window")).clone())
}

/// Window origins of the evaluation protocol: consecutive rollouts of
/// `span` snapshots starting at the last training snapshot, each
/// re-initialised from ground truth.
pub fn extrapolation_origins(total: usize, train_snapshots: usize, span: usize, l: usize) -> Vec<usize> {
    let mut t0 = train_snapshots.max(l) - 1;
    let mut out = Vec::new();
    while t0 + span < total {
        out.push(t0);
        t0 += span;
    }
    out
}

/// Eval-mode rollouts for all `(trajectory, origin)` pairs, `[B, n_windows * K, H, W]`
/// in normalised units, with the matching ground truth.
pub fn rollout_batch<T: Scalar>(
    model: &TnoModel<T>,
    split: &PreparedSplit<T>,
    items: &[(usize, usize)],
    n_windows: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let cfg = model.config();
    let batch = Batch::build(split, items, cfg, n_windows)?;
    let mask = if batch.all_valid { None } else { Some(&batch.hist_mask) };
    let pred = rollout_masked(model, &batch.v, &batch.hist[0], &batch.grid, mask)?;
    let (b, k, h, w) = (items.len(), cfg.bundle, split.h, split.w);
    let mut truth = Vec::with_capacity(b * n_windows * k * h * w);
    for (n, _) in items.iter().enumerate() {
        for t in &batch.target {
            truth.extend_from_slice(&t.data()[n * k * h * w..(n + 1) * k * h * w]);
        }
    }
    Ok((pred, Tensor::new(&[b, n_windows * k, h, w], truth)?))
}

/// Mean masked MSE of eval-mode extrapolation rollouts, in normalised units.
pub fn validation_loss<T: Scalar>(
    model: &TnoModel<T>,
    split: &PreparedSplit<T>,
    train_snapshots: usize,
    plan: &TrainPlan,
) -> Result<f64> {
    let cfg = model.config();
    let n_windows = plan.eval_windows(cfg.bundle);
    let origins = extrapolation_origins(split.horizon, train_snapshots, n_windows * cfg.bundle, cfg.history);
    if origins.is_empty() {
        return Err(Error::invalid("validation_loss", "trajectories too short for one evaluation rollout"));
    }
    let mut sum = 0.0;
    let mut count = 0.0;
    let mask = split.mask.data();
    for &t0 in &origins {
        let items: Vec<(usize, usize)> = (0..split.len()).map(|i| (i, t0)).collect();
        for chunk in items.chunks(plan.batch_size.max(1) * 4) {
            let (pred, truth) = rollout_batch(model, split, chunk, n_windows)?;
            for (plane_p, plane_t) in pred.data().chunks(mask.len()).zip(truth.data().chunks(mask.len())) {
                for ((&p, &t), &m) in plane_p.iter().zip(plane_t).zip(mask) {
                    if m != T::zero() {
                        let d = (p - t).as_f64();
                        sum += d * d;
                        count += 1.0;
                    }
                }
            }
        }
    }
    Ok(sum / count)
}

/// Result of [`train_run`].
#[derive(Debug, Clone)]
pub struct TrainOutcome<T: Scalar> {
    pub final_model: TnoModel<T>,
    pub best_model: TnoModel<T>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub log: TrainLog,
}

/// Mutable state of a run: model, optimiser and sampling stream.
pub struct Trainer<'d, T: Scalar> {
    pub model: TnoModel<T>,
    pub plan: TrainPlan,
    pub adam: AdamState<T>,
    train: &'d PreparedSplit<T>,
    train_snapshots: usize,
    rng: ChaCha8Rng,
}

impl<'d, T: Scalar> Trainer<'d, T> {
    pub fn new(model: TnoModel<T>, plan: TrainPlan, train: &'d PreparedSplit<T>, train_snapshots: usize) -> Result<Self> {
        plan.validate()?;
        let adam = AdamState::new(
            model.params(),
            AdamConfig {
                weight_decay: plan.weight_decay,
                ..AdamConfig::default()
            },
        );
        let rng = ChaCha8Rng::seed_from_u64(plan.seed ^ 0xA5A5_0000_0000_0001);
        Ok(Self {
            model,
            plan,
            adam,
            train,
            train_snapshots,
            rng,
        })
    }

    /// Training windows for one epoch: random origins per trajectory, shuffled.
    pub fn draw_items(&mut self) -> Result<Vec<(usize, usize)>> {
        let cfg = self.model.config();
        let (l, span) = (cfg.history, cfg.bundle * self.plan.rollout_windows_per_sample);
        let lo = l - 1;
        let limit = self.train_snapshots.min(self.train.horizon);
        if lo + span >= limit {
            return Err(Error::Config(format!(
                "training window of {} snapshots does not fit in {limit} training snapshots",
                l + span
            )));
        }
        let hi = limit - 1 - span;
        let mut items = Vec::with_capacity(self.train.len() * self.plan.windows_per_trajectory);
        for i in 0..self.train.len() {
            for _ in 0..self.plan.windows_per_trajectory {
                items.push((i, self.rng.gen_range(lo..=hi)));
            }
        }
        items.shuffle(&mut self.rng);
        Ok(items)
    }

    /// Forward and backward on one batch; returns the loss, gradients and batch statistics.
    pub fn batch_gradients(&self, items: &[(usize, usize)], phase: Phase) -> Result<(f64, crate::model::StepGrads<T>)> {
        let cfg = self.model.config();
        let batch = Batch::build(self.train, items, cfg, self.plan.rollout_windows_per_sample)?;
        let mut s = Session::train(&self.model);
        let loss = bundle_loss(&mut s, &batch, phase)?;
        let value = s.tape.value(loss).data()[0].as_f64();
        if !value.is_finite() {
            return Err(Error::NonFinite {
                what: format!("{} loss on windows {:?}", phase.name(), items),
            });
        }
        Ok((value, s.finish(loss)?))
    }

    /// One pass over freshly drawn windows with one optimiser step per batch.
    /// Returns the mean batch loss and the number of clipped steps.
    pub fn epoch(&mut self, phase: Phase, lr: f64) -> Result<(f64, usize)> {
        let items = self.draw_items()?;
        let mut total = 0.0;
        let mut batches = 0usize;
        let mut clipped = 0usize;
        for chunk in items.chunks(self.plan.batch_size) {
            // Batch norm needs at least two values per channel at the bottleneck.
            if chunk.len() < 2 && batches > 0 {
                continue;
            }
            let (loss, mut step) = self.batch_gradients(chunk, phase)?;
            let (_, was_clipped) = clip_grad_norm(&mut step.grads, self.plan.clip_norm);
            clipped += usize::from(was_clipped);
            self.adam.step(self.model.params_mut(), &step.grads, lr)?;
            self.model.apply_bn_updates(&step.bn_updates);
            total += loss;
            batches += 1;
        }
        Ok((total / batches.max(1) as f64, clipped))
    }
}

/// Teacher-forcing epoch: later windows are conditioned on ground truth.
pub fn teacher_forcing_epoch<T: Scalar>(trainer: &mut Trainer<'_, T>, lr: f64) -> Result<(f64, usize)> {
    trainer.epoch(Phase::TeacherForcing, lr)
}

/// Fine-tuning epoch: later windows are conditioned on the model's own output.
pub fn finetune_epoch<T: Scalar>(trainer: &mut Trainer<'_, T>, lr: f64) -> Result<(f64, usize)> {
    trainer.epoch(Phase::FineTuning, lr)
}

/// Where [`train_run`] writes its artifacts.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn best(&self) -> PathBuf {
        self.root.join("best")
    }
    pub fn last(&self) -> PathBuf {
        self.root.join("final")
    }
    pub fn log(&self) -> PathBuf {
        self.root.join("train_log.csv")
    }
}

/// Trains `config` on the dataset's training split, selecting the epoch with
/// the lowest validation rollout loss. With `out` set, writes `best/`,
/// `final/` and `train_log.csv` (the log also on failure).
pub fn train_run<T: Scalar>(
    plan: &TrainPlan,
    config: &TnoConfig,
    data: &Dataset,
    out: Option<&Path>,
) -> Result<TrainOutcome<T>> {
    plan.validate()?;
    let mask = make_mask(data.config.resolution, data.config.resolution, data.config.mask)?;
    let train = PreparedSplit::<T>::new(&data.train, &data.norm, &mask)?;
    let val = if data.val.is_empty() {
        None
    } else {
        Some(PreparedSplit::<T>::new(&data.val, &data.norm, &mask)?)
    };
    let mut cfg = config.clone();
    cfg.input_channels = train.v[0].shape()[0];
    let model = TnoModel::<T>::new(cfg)?;
    let train_snapshots = data.config.train_snapshots();
    let mut trainer = Trainer::new(model, plan.clone(), &train, train_snapshots)?;
    let paths = out.map(|p| RunPaths { root: p.to_path_buf() });
    let mut log = TrainLog::default();
    let result = run_epochs(&mut trainer, val.as_ref(), train_snapshots, &mut log);
    if let Some(p) = &paths {
        std::fs::create_dir_all(&p.root)?;
        log.save_csv(p.log())?;
    }
    let (best_model, best_epoch, best_val) = result?;
    if let Some(p) = &paths {
        save_checkpoint(&best_model, best_epoch, Some(&data.norm), p.best())?;
        save_checkpoint(&trainer.model, plan.total_epochs() - 1, Some(&data.norm), p.last())?;
    }
    Ok(TrainOutcome {
        final_model: trainer.model,
        best_model,
        best_epoch,
        best_val_loss: best_val,
        log,
    })
}

fn run_epochs<T: Scalar>(
    trainer: &mut Trainer<'_, T>,
    val: Option<&PreparedSplit<T>>,
    train_snapshots: usize,
    log: &mut TrainLog,
) -> Result<(TnoModel<T>, usize, f64)> {
    let plan = trainer.plan.clone();
    let schedule = plan.lr_schedule();
    let mut best: Option<(TnoModel<T>, usize, f64)> = None;
    for epoch in 0..plan.total_epochs() {
        let start = Instant::now();
        let phase = if epoch < plan.tf_epochs {
            Phase::TeacherForcing
        } else {
            Phase::FineTuning
        };
        let lr = schedule.at(epoch);
        let (train_loss, clipped) = trainer.epoch(phase, lr)?;
        let val_loss = match val {
            Some(v) => validation_loss(&trainer.model, v, train_snapshots, &plan)?,
            None => train_loss,
        };
        if clipped > 0 {
            log::info!("epoch {epoch}: gradient norm clipped in {clipped} steps");
        }
        log::info!(
            "epoch {epoch} {} train {train_loss:.4e} val {val_loss:.4e} lr {lr:.2e}",
            phase.name()
        );
        log.records.push(EpochRecord {
            epoch,
            phase,
            train_loss,
            val_loss,
            lr,
            seconds: start.elapsed().as_secs_f64(),
            clipped_steps: clipped,
        });
        if !val_loss.is_finite() {
            return Err(Error::NonFinite {
                what: format!("validation loss at epoch {epoch}"),
            });
        }
        if best.as_ref().map_or(true, |b| val_loss < b.2) {
            best = Some((trainer.model.clone(), epoch, val_loss));
        }
    }
    Ok(best.expect("at least one epoch"))
}
