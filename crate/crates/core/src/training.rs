//! Two-stage training. Stage 1 regresses the interpolator on intermediate
//! snapshots; Stage 2 trains the forecaster against the frozen, stochastic
//! interpolator with an optional one-step look-ahead term.

use std::io::Write;
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::dynamics::Trajectory;
use crate::error::{invalid, Error, Result};
use crate::metrics::crps;
use crate::nets::{make_conditioning, ConditioningMode, ForecasterModel, InterpolatorModel};
use crate::rng::{member_seed, substream, DyRng};
use crate::sampling::{cold_sample, SampleRequest};
use crate::schedule::{make_schedule, Schedule};
use crate::tensor::{clip_grad_norm, AdamW, Gradients, Graph, ParamStore, Var};
use crate::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossNorm {
    L1,
    L2,
}

impl std::str::FromStr for LossNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l1" | "L1" => Ok(Self::L1),
            "l2" | "L2" => Ok(Self::L2),
            other => Err(invalid(format!("unknown loss norm {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub horizon: usize,
    pub schedule: Schedule,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub loss_norm: LossNorm,
    pub seed: u64,
    /// Ensemble size for validation CRPS; 0 skips it.
    pub val_crps_members: usize,
    /// Validation windows scored by CRPS, spread evenly over the split.
    pub val_crps_windows: usize,
    /// Epochs between CRPS evaluations (epoch 0 is always scored).
    pub val_crps_every: usize,
}

impl TrainConfig {
    /// Defaults: `λ1 = λ2 = 1/2`, L1 loss, no auxiliary steps.
    pub fn new(horizon: usize) -> Result<Self> {
        Ok(Self {
            horizon,
            schedule: make_schedule(horizon, 0)?,
            lambda1: 0.5,
            lambda2: 0.5,
            lr: 1e-3,
            weight_decay: 1e-4,
            batch_size: 32,
            epochs: 50,
            clip_norm: Some(1.0),
            loss_norm: LossNorm::L1,
            seed: 0,
            val_crps_members: 0,
            val_crps_windows: 8,
            val_crps_every: 1,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0 && self.lambda1 + self.lambda2 > 0.0) {
            return Err(invalid("loss weights must be non-negative with a positive sum"));
        }
        if self.schedule.horizon() != self.horizon {
            return Err(invalid("schedule horizon differs from the training horizon"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch size must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(invalid("learning rate must be positive"));
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(invalid("clip norm must be positive"));
        }
        if self.val_crps_every == 0 {
            return Err(invalid("val_crps_every must be at least 1"));
        }
        Ok(())
    }

    fn optimizer(&self) -> AdamW {
        AdamW { lr: self.lr, weight_decay: self.weight_decay, ..AdamW::default() }
    }
}

/// Train and validation trajectories sharing one normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingData {
    pub train: Vec<Trajectory>,
    pub val: Vec<Trajectory>,
}

impl TrainingData {
    fn check(&self, horizon: usize, snapshot_len: usize) -> Result<()> {
        for (split, trajs) in [("train", &self.train), ("val", &self.val)] {
            if trajs.is_empty() {
                return Err(invalid(format!("{split} split is empty")));
            }
            if trajs.iter().all(|t| t.len() <= horizon) {
                return Err(invalid(format!("{split} trajectories are too short for horizon {horizon}")));
            }
            if let Some(t) = trajs.iter().find(|t| t.snapshot_len() != snapshot_len) {
                return Err(invalid(format!(
                    "{split} snapshots have {} elements, model expects {snapshot_len}",
                    t.snapshot_len()
                )));
            }
        }
        Ok(())
    }
}

/// Start positions `(trajectory, t)` of every window of length `h`.
fn window_index(trajs: &[Trajectory], h: usize) -> Vec<(usize, usize)> {
    trajs
        .iter()
        .enumerate()
        .flat_map(|(k, tr)| (0..tr.len().saturating_sub(h)).map(move |t| (k, t)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

/// Snapshots read for one training or validation example.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExampleAccess {
    pub split: Split,
    pub trajectory: usize,
    pub start: usize,
    /// Absolute snapshot indices, in read order.
    pub snapshots: Vec<usize>,
}

/// Records every snapshot the loaders hand out.
#[derive(Debug, Default)]
pub struct AccessLog(Mutex<Vec<ExampleAccess>>);

impl AccessLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> Vec<ExampleAccess> {
        self.0.lock().expect("access log").clone()
    }
}

/// The only path from trajectories to training examples: an example is built
/// from the offsets it asks for and nothing else.
pub struct SnapshotLoader<'d> {
    trajs: &'d [Trajectory],
    split: Split,
    log: Option<&'d AccessLog>,
}

impl<'d> SnapshotLoader<'d> {
    pub fn new(trajs: &'d [Trajectory], split: Split, log: Option<&'d AccessLog>) -> Self {
        Self { trajs, split, log }
    }

    /// Snapshots `start + offset` of trajectory `traj`.
    pub fn example(&self, traj: usize, start: usize, offsets: &[usize]) -> Result<Vec<&'d [f64]>> {
        let tr = self.trajs.get(traj).ok_or_else(|| invalid(format!("no trajectory {traj}")))?;
        let mut idx = Vec::with_capacity(offsets.len());
        for &o in offsets {
            let t = start + o;
            if t >= tr.len() {
                return Err(invalid(format!("snapshot {t} beyond trajectory of length {}", tr.len())));
            }
            idx.push(t);
        }
        if let Some(log) = self.log {
            log.0.lock().expect("access log").push(ExampleAccess {
                split: self.split,
                trajectory: traj,
                start,
                snapshots: idx.clone(),
            });
        }
        Ok(idx.into_iter().map(|t| tr.snapshot(t)).collect())
    }
}

fn rows(slices: &[&[f64]]) -> Result<Tensor> {
    let dim = slices.first().map_or(0, |s| s.len());
    let mut data = Vec::with_capacity(slices.len() * dim);
    for s in slices {
        data.extend_from_slice(s);
    }
    Tensor::new(vec![slices.len(), dim], data)
}

fn norm_loss(g: &mut Graph<'_>, diff: Var, norm: LossNorm) -> Result<Var> {
    match norm {
        LossNorm::L1 => g.mean_abs(diff),
        LossNorm::L2 => g.mean_square(diff),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean batch loss over the epoch; at epoch 0, the loss of the initial
    /// model on the training split.
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_crps: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, serde::Serialize)]
pub struct LossHistory {
    pub records: Vec<EpochRecord>,
}

impl LossHistory {
    pub fn initial(&self) -> Option<&EpochRecord> {
        self.records.first()
    }

    pub fn best_val_loss(&self) -> Option<f64> {
        self.records.iter().map(|r| r.val_loss).min_by(f64::total_cmp)
    }

    /// CSV with columns `epoch,train_loss,val_loss,val_crps`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "epoch,train_loss,val_loss,val_crps")?;
        for r in &self.records {
            let crps = r.val_crps.map(|c| c.to_string()).unwrap_or_default();
            writeln!(w, "{},{},{},{}", r.epoch, r.train_loss, r.val_loss, crps)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trained<M> {
    /// Model from the best validation epoch.
    pub model: M,
    pub best_epoch: usize,
    pub history: LossHistory,
}

pub(crate) struct BatchOutcome {
    pub loss: f64,
    pub grads: Gradients,
    pub vars: Vec<Var>,
}

pub(crate) struct Evaluation {
    pub train_loss: Option<f64>,
    pub val_loss: f64,
    pub val_crps: Option<f64>,
}

/// Shared optimisation loop: epoch 0 evaluates the initial model, each later
/// epoch shuffles the examples, takes AdamW steps and evaluates.
pub(crate) fn run_training<M: Clone>(
    mut model: M,
    cfg: &TrainConfig,
    n_examples: usize,
    params: fn(&mut M) -> &mut ParamStore,
    mut batch: impl FnMut(&M, &[usize], &mut DyRng) -> Result<BatchOutcome>,
    mut evaluate: impl FnMut(&M, usize) -> Result<Evaluation>,
    select_by_crps: bool,
) -> Result<Trained<M>> {
    if n_examples == 0 {
        return Err(invalid("no training examples"));
    }
    let diverged = |epoch: usize, loss: f64| Error::Diverged { epoch, loss };
    let as_divergence = |epoch: usize| {
        move |e: Error| match e {
            Error::NonFinite { .. } => Error::Diverged { epoch, loss: f64::NAN },
            other => other,
        }
    };
    let opt = cfg.optimizer();
    let mut order: Vec<usize> = (0..n_examples).collect();
    let mut shuffle_rng = substream(cfg.seed, "shuffle");
    let mut train_rng = substream(cfg.seed, "train");
    let mut history = LossHistory::default();

    let first = evaluate(&model, 0).map_err(as_divergence(0))?;
    let score = |e: &Evaluation| if select_by_crps { e.val_crps } else { Some(e.val_loss) };
    let mut best = (score(&first).unwrap_or(f64::INFINITY), 0usize, model.clone());
    history.records.push(EpochRecord {
        epoch: 0,
        train_loss: first.train_loss.unwrap_or(f64::NAN),
        val_loss: first.val_loss,
        val_crps: first.val_crps,
    });

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let out = batch(&model, chunk, &mut train_rng).map_err(as_divergence(epoch))?;
            if !out.loss.is_finite() {
                return Err(diverged(epoch, out.loss));
            }
            total += out.loss * chunk.len() as f64;
            let store = params(&mut model);
            store.zero_grad();
            store.accumulate_grads(out.vars.iter().map(|v| out.grads.wrt(*v)))?;
            if let Some(max) = cfg.clip_norm {
                clip_grad_norm(store, max)?;
            }
            opt.step(store)?;
        }
        let train_loss = total / n_examples as f64;
        let eval = evaluate(&model, epoch).map_err(as_divergence(epoch))?;
        if !eval.val_loss.is_finite() {
            return Err(diverged(epoch, eval.val_loss));
        }
        if let Some(s) = score(&eval) {
            if s < best.0 {
                best = (s, epoch, model.clone());
            }
        }
        history.records.push(EpochRecord { epoch, train_loss, val_loss: eval.val_loss, val_crps: eval.val_crps });
    }
    Ok(Trained { model: best.2, best_epoch: best.1, history })
}

fn interpolator_params(m: &mut InterpolatorModel) -> &mut ParamStore {
    &mut m.net.params
}

fn forecaster_params(m: &mut ForecasterModel) -> &mut ParamStore {
    &mut m.net.params
}

/// Stage-1 example set: one entry per (window, i).
struct Stage1Examples<'d> {
    loader: SnapshotLoader<'d>,
    windows: Vec<(usize, usize)>,
    h: usize,
}

impl<'d> Stage1Examples<'d> {
    /// Loss of `model` on `(window, i)` pairs; gradients when `dropout` is set.
    fn loss(
        &self,
        model: &InterpolatorModel,
        items: &[(usize, usize)],
        norm: LossNorm,
        dropout: Option<&mut DyRng>,
    ) -> Result<(f64, Option<(Gradients, Vec<Var>)>)> {
        let mut x_t = Vec::with_capacity(items.len());
        let mut x_h = Vec::with_capacity(items.len());
        let mut target = Vec::with_capacity(items.len());
        let mut times = Vec::with_capacity(items.len());
        for &(w, i) in items {
            let (k, t) = self.windows[w];
            let snaps = self.loader.example(k, t, &[0, i, self.h])?;
            x_t.push(snaps[0]);
            target.push(snaps[1]);
            x_h.push(snaps[2]);
            times.push(i as f64);
        }
        let training = dropout.is_some();
        let mut g = Graph::new();
        let bound = model.net.bind(&mut g, training)?;
        let a = g.constant(rows(&x_t)?)?;
        let b = g.constant(rows(&x_h)?)?;
        let y = g.constant(rows(&target)?)?;
        let drop = dropout.map(|r| (model.dropout.effective_rate(true), r));
        let out = model.forward_graph(&mut g, &bound, a, b, &times, drop)?;
        let diff = g.sub(out, y)?;
        let loss = norm_loss(&mut g, diff, norm)?;
        let value = g.value(loss).item();
        if !training {
            return Ok((value, None));
        }
        let grads = g.backward(loss)?;
        Ok((value, Some((grads, bound.0))))
    }

    /// Loss over every window and every interior `i`, without dropout.
    fn full_loss(&self, model: &InterpolatorModel, norm: LossNorm, batch: usize) -> Result<f64> {
        let items: Vec<(usize, usize)> =
            (0..self.windows.len()).flat_map(|w| (1..self.h).map(move |i| (w, i))).collect();
        let mut total = 0.0;
        for chunk in items.chunks(batch) {
            total += self.loss(model, chunk, norm, None)?.0 * chunk.len() as f64;
        }
        Ok(total / items.len() as f64)
    }
}

/// Stage 1: fits `I(x_t, x_{t+h}, i) ≈ x_{t+i}` with `i ~ U{1, ..., h-1}`,
/// dropout active. Keeps the parameters of the best validation epoch.
pub fn train_interpolator(
    data: &TrainingData,
    model: InterpolatorModel,
    cfg: &TrainConfig,
) -> Result<Trained<InterpolatorModel>> {
    train_interpolator_logged(data, model, cfg, None)
}

pub fn train_interpolator_logged(
    data: &TrainingData,
    model: InterpolatorModel,
    cfg: &TrainConfig,
    log: Option<&AccessLog>,
) -> Result<Trained<InterpolatorModel>> {
    cfg.validate()?;
    let h = cfg.horizon;
    if h < 2 {
        return Err(invalid("interpolator training needs a horizon of at least 2"));
    }
    if crate::nets::Interpolate::horizon(&model) != h {
        return Err(invalid("interpolator horizon differs from the training horizon"));
    }
    data.check(h, model.snapshot_len())?;
    let train = Stage1Examples { loader: SnapshotLoader::new(&data.train, Split::Train, log), windows: window_index(&data.train, h), h };
    let val = Stage1Examples { loader: SnapshotLoader::new(&data.val, Split::Val, log), windows: window_index(&data.val, h), h };
    let mut dropout_rng = substream(cfg.seed, "dropout");
    let norm = cfg.loss_norm;
    let eval_batch = cfg.batch_size.max(256);
    run_training(
        model,
        cfg,
        train.windows.len(),
        interpolator_params,
        |m, chunk, rng| {
            let items: Vec<(usize, usize)> = chunk.iter().map(|&w| (w, rng.random_range(1..h))).collect();
            let (loss, grads) = train.loss(m, &items, norm, Some(&mut dropout_rng))?;
            let (grads, vars) = grads.expect("training pass");
            Ok(BatchOutcome { loss, grads, vars })
        },
        |m, epoch| {
            Ok(Evaluation {
                train_loss: if epoch == 0 { Some(train.full_loss(m, norm, eval_batch)?) } else { None },
                val_loss: val.full_loss(m, norm, eval_batch)?,
                val_crps: None,
            })
        },
        false,
    )
}

/// One Stage-2 example: window plus diffusion step `n`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Stage2Item {
    pub window: usize,
    pub n: usize,
}

pub(crate) struct Stage2Examples<'d> {
    pub loader: SnapshotLoader<'d>,
    pub windows: Vec<(usize, usize)>,
}

impl<'d> Stage2Examples<'d> {
    /// `λ1‖x̂1 - x_h‖ + λ2‖x̂2 - x_h‖` over the batch. Both interpolator calls
    /// draw fresh dropout masks from `noise`; gradients flow into the
    /// forecaster only, through the look-ahead's interpolator call.
    pub fn loss(
        &self,
        f: &ForecasterModel,
        interp: &InterpolatorModel,
        cfg: &TrainConfig,
        items: &[Stage2Item],
        noise: &mut DyRng,
        dropout: Option<&mut DyRng>,
    ) -> Result<(f64, Option<(Gradients, Vec<Var>)>)> {
        let sched = &cfg.schedule;
        let big_n = sched.len();
        let h = cfg.horizon;
        let dim = f.snapshot_len();
        let interp_rate = interp.dropout.effective_rate(false);
        let mode = f.conditioning;

        let mut x_t = Vec::with_capacity(items.len());
        let mut x_h = Vec::with_capacity(items.len());
        for it in items {
            let (k, t) = self.windows[it.window];
            let snaps = self.loader.example(k, t, &[0, h])?;
            x_t.push(snaps[0]);
            x_h.push(snaps[1]);
        }

        // First forecaster input: x_t at n = 0, otherwise I(x_t, x_h, i_n).
        let interp_rows: Vec<usize> = (0..items.len()).filter(|&b| items[b].n > 0).collect();
        let mut input1 = rows(&x_t)?;
        if !interp_rows.is_empty() {
            let a = rows(&interp_rows.iter().map(|&b| x_t[b]).collect::<Vec<_>>())?;
            let c = rows(&interp_rows.iter().map(|&b| x_h[b]).collect::<Vec<_>>())?;
            let times: Vec<f64> = interp_rows.iter().map(|&b| sched.time(items[b].n)).collect();
            let mut g = Graph::new();
            let bound = interp.net.bind(&mut g, false)?;
            let (av, cv) = (g.constant(a)?, g.constant(c)?);
            let out = interp.forward_graph(&mut g, &bound, av, cv, &times, Some((interp_rate, &mut *noise)))?;
            let out = g.value(out);
            let dst = input1.data_mut();
            for (r, &b) in interp_rows.iter().enumerate() {
                dst[b * dim..(b + 1) * dim].copy_from_slice(&out.data()[r * dim..(r + 1) * dim]);
            }
        }

        let mut cond1 = Vec::new();
        let mut cond2 = Vec::new();
        for (b, it) in items.iter().enumerate() {
            let xt = Tensor::vector(x_t[b].to_vec());
            if let Some(c) = make_conditioning(mode, &xt, it.n, big_n, noise)? {
                cond1.extend_from_slice(c.data());
            }
            let next = (it.n + 1).min(big_n - 1);
            if let Some(c) = make_conditioning(mode, &xt, next, big_n, noise)? {
                cond2.extend_from_slice(c.data());
            }
        }
        let times1: Vec<f64> = items.iter().map(|it| sched.time(it.n)).collect();
        let times2: Vec<f64> = items.iter().map(|it| sched.time(it.n + 1)).collect();
        let ahead_mask: Vec<f64> = items
            .iter()
            .flat_map(|it| std::iter::repeat_n(if it.n + 1 < big_n { 1.0 } else { 0.0 }, dim))
            .collect();
        let any_ahead = ahead_mask.iter().any(|&m| m > 0.0);

        let training = dropout.is_some();
        let mut train_drop = dropout;
        let mut g = Graph::new();
        let fb = f.net.bind(&mut g, training)?;
        let target = g.constant(rows(&x_h)?)?;
        let x_tv = g.constant(rows(&x_t)?)?;
        let in1 = g.constant(input1)?;
        let c1 = if mode == ConditioningMode::None {
            None
        } else {
            Some(g.constant(Tensor::new(vec![items.len(), dim], cond1)?)?)
        };
        let drop1 = train_drop.as_deref_mut().map(|r| (f.train_dropout, r));
        let x1 = f.forward_graph(&mut g, &fb, in1, c1, &times1, drop1)?;
        let d1 = g.sub(x1, target)?;
        let term1 = norm_loss(&mut g, d1, cfg.loss_norm)?;
        let mut loss = g.scale(term1, cfg.lambda1)?;

        if cfg.lambda2 > 0.0 && any_ahead {
            let ib = interp.net.bind(&mut g, false)?;
            let in2 = interp.forward_graph(&mut g, &ib, x_tv, x1, &times2, Some((interp_rate, &mut *noise)))?;
            let c2 = if mode == ConditioningMode::None {
                None
            } else {
                Some(g.constant(Tensor::new(vec![items.len(), dim], cond2)?)?)
            };
            let drop2 = train_drop.as_deref_mut().map(|r| (f.train_dropout, r));
            let x2 = f.forward_graph(&mut g, &fb, in2, c2, &times2, drop2)?;
            let d2 = g.sub(x2, target)?;
            // rows with n = N-1 compare x_h with itself
            let d2 = g.apply_mask(d2, ahead_mask)?;
            let term2 = norm_loss(&mut g, d2, cfg.loss_norm)?;
            let term2 = g.scale(term2, cfg.lambda2)?;
            loss = g.add(loss, term2)?;
        }
        let value = g.value(loss).item();
        if !training {
            return Ok((value, None));
        }
        let grads = g.backward(loss)?;
        Ok((value, Some((grads, fb.0))))
    }

    /// Loss over every window and every diffusion step with a fixed noise stream.
    fn full_loss(
        &self,
        f: &ForecasterModel,
        interp: &InterpolatorModel,
        cfg: &TrainConfig,
        stream: &str,
        batch: usize,
    ) -> Result<f64> {
        let mut noise = substream(cfg.seed, stream);
        let items: Vec<Stage2Item> = (0..self.windows.len())
            .flat_map(|window| (0..cfg.schedule.len()).map(move |n| Stage2Item { window, n }))
            .collect();
        let mut total = 0.0;
        for chunk in items.chunks(batch) {
            total += self.loss(f, interp, cfg, chunk, &mut noise, None)?.0 * chunk.len() as f64;
        }
        Ok(total / items.len() as f64)
    }
}

/// Mean CRPS of cold-sampled ensembles over evenly spaced validation windows
/// and output times `1..=h`. Seeds are fixed so epochs are comparable.
pub fn validation_crps(
    f: &ForecasterModel,
    interp: &InterpolatorModel,
    val: &[Trajectory],
    cfg: &TrainConfig,
) -> Result<f64> {
    let windows = window_index(val, cfg.horizon);
    let count = cfg.val_crps_windows.min(windows.len()).max(1);
    let loader = SnapshotLoader::new(val, Split::Val, None);
    let mut total = 0.0;
    for w in 0..count {
        let (k, t) = windows[w * windows.len() / count];
        let offsets: Vec<usize> = (0..=cfg.horizon).collect();
        let snaps = loader.example(k, t, &offsets)?;
        let x_t = Tensor::new(interp.snapshot_shape().to_vec(), snaps[0].to_vec())?;
        let req = SampleRequest::new(x_t, cfg.schedule.clone(), cfg.val_crps_members, member_seed(cfg.seed ^ 0x5eed, w));
        let fc = cold_sample(f, interp, &req)?;
        let mut sum = 0.0;
        for (kk, &j) in fc.times.iter().enumerate() {
            let members: Vec<&[f64]> = fc.members.iter().map(|m| m.states[kk].data()).collect();
            sum += crps(&members, snaps[j as usize])?;
        }
        total += sum / fc.times.len() as f64;
    }
    Ok(total / count as f64)
}

/// Stage 2: trains the forecaster against a frozen interpolator. Each example
/// draws `n ~ U{0, ..., N-1}`; the look-ahead term re-forecasts from the
/// interpolation toward the first forecast. With CRPS validation enabled the
/// best-CRPS epoch is kept, otherwise the best validation loss.
pub fn train_forecaster(
    data: &TrainingData,
    interp: &InterpolatorModel,
    model: ForecasterModel,
    cfg: &TrainConfig,
) -> Result<Trained<ForecasterModel>> {
    train_forecaster_logged(data, interp, model, cfg, None)
}

pub fn train_forecaster_logged(
    data: &TrainingData,
    interp: &InterpolatorModel,
    model: ForecasterModel,
    cfg: &TrainConfig,
    log: Option<&AccessLog>,
) -> Result<Trained<ForecasterModel>> {
    use crate::nets::{Forecast, Interpolate};
    cfg.validate()?;
    if !interp.is_frozen() {
        return Err(invalid("the interpolator must be frozen before forecaster training"));
    }
    let h = cfg.horizon;
    if Interpolate::horizon(interp) != h || Forecast::horizon(&model) != h {
        return Err(invalid("model horizons differ from the training horizon"));
    }
    if interp.snapshot_len() != model.snapshot_len() {
        return Err(invalid("interpolator and forecaster snapshot sizes differ"));
    }
    data.check(h, model.snapshot_len())?;
    let train = Stage2Examples { loader: SnapshotLoader::new(&data.train, Split::Train, log), windows: window_index(&data.train, h) };
    let val = Stage2Examples { loader: SnapshotLoader::new(&data.val, Split::Val, log), windows: window_index(&data.val, h) };
    let mut noise_rng = substream(cfg.seed, "noise");
    let mut dropout_rng = substream(cfg.seed, "dropout");
    let big_n = cfg.schedule.len();
    let use_crps = cfg.val_crps_members > 0;
    let eval_batch = cfg.batch_size.max(256);
    let mut model = model;
    model.set_schedule(cfg.schedule.clone())?;
    run_training(
        model,
        cfg,
        train.windows.len(),
        forecaster_params,
        |m, chunk, rng| {
            let items: Vec<Stage2Item> =
                chunk.iter().map(|&window| Stage2Item { window, n: rng.random_range(0..big_n) }).collect();
            let (loss, grads) = train.loss(m, interp, cfg, &items, &mut noise_rng, Some(&mut dropout_rng))?;
            let (grads, vars) = grads.expect("training pass");
            Ok(BatchOutcome { loss, grads, vars })
        },
        |m, epoch| {
            let crps_due = use_crps && epoch % cfg.val_crps_every == 0;
            Ok(Evaluation {
                train_loss: if epoch == 0 { Some(train.full_loss(m, interp, cfg, "eval-train", eval_batch)?) } else { None },
                val_loss: val.full_loss(m, interp, cfg, "eval-val", eval_batch)?,
                val_crps: if crps_due { Some(validation_crps(m, interp, &data.val, cfg)?) } else { None },
            })
        },
        use_crps,
    )
}
