//! Non-diffusion probabilistic baselines over a time-conditioned multi-step
//! predictor: Monte-Carlo dropout ensembles and initial-condition
//! perturbation ensembles.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Result};
use crate::nets::models::{backbone_meta, flat_row, load_net, parse_shape, save_net, shape_text};
use crate::nets::{BackboneConfig, Metadata, Mlp};
use crate::rng::{member_seed, member_stream, substream, DyRng};
use crate::sampling::{EnsembleForecast, ForwardPasses, Member, SampleFlags};
use crate::tensor::{DropoutSpec, Graph};
use crate::training::{
    run_training, AccessLog, BatchOutcome, Evaluation, LossNorm, SnapshotLoader, Split, TrainConfig, Trained,
    TrainingData,
};
use crate::Tensor;

/// `F(x_t, i) ≈ x_{t+i}` for `i` in `1..=h`.
#[derive(Debug, Clone, PartialEq)]
pub struct BarebonePredictor {
    pub net: Mlp,
    pub dropout: DropoutSpec,
    horizon: usize,
    snapshot_shape: Vec<usize>,
}

/// Default initial-condition perturbation scale.
pub const DEFAULT_PERTURBATION: f64 = 0.05;

impl BarebonePredictor {
    pub fn new(
        snapshot_shape: &[usize],
        horizon: usize,
        config: BackboneConfig,
        dropout_rate: f64,
        rng: &mut DyRng,
    ) -> Result<Self> {
        if horizon < 1 {
            return Err(invalid("horizon must be at least 1"));
        }
        let dim: usize = snapshot_shape.iter().product();
        Ok(Self {
            net: Mlp::new(dim, dim, config, rng)?,
            dropout: DropoutSpec::new(dropout_rate, true)?,
            horizon,
            snapshot_shape: snapshot_shape.to_vec(),
        })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn snapshot_shape(&self) -> &[usize] {
        &self.snapshot_shape
    }

    pub fn snapshot_len(&self) -> usize {
        self.net.out_dim
    }

    /// One prediction; dropout at `rate` when a stream is given.
    pub fn predict(&self, x_t: &Tensor, i: f64, dropout: Option<(f64, &mut DyRng)>) -> Result<Tensor> {
        let x = flat_row(x_t, self.snapshot_len(), "barebone")?;
        let out = self.net.predict(x, &[i], dropout)?;
        Tensor::new(self.snapshot_shape.clone(), out.into_data())
    }

    pub fn metadata(&self) -> Metadata {
        let mut m = Metadata::new();
        m.set("kind", "barebone")
            .set("horizon", self.horizon)
            .set("snapshot_shape", shape_text(&self.snapshot_shape))
            .set("dropout_rate", self.dropout.rate)
            .set("time_input", "raw");
        backbone_meta(&mut m, &self.net);
        m
    }

    pub fn save(&self, stem: &Path) -> Result<()> {
        save_net(stem, &self.net, &self.metadata())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let (net, meta) = load_net(stem, "barebone", |m| Ok(parse_shape(m.get("snapshot_shape")?)?.iter().product()))?;
        Ok(Self {
            net,
            dropout: DropoutSpec::new(meta.parse("dropout_rate")?, true)?,
            horizon: meta.parse("horizon")?,
            snapshot_shape: parse_shape(meta.get("snapshot_shape")?)?,
        })
    }
}

fn windows(trajs: &[crate::dynamics::Trajectory], h: usize) -> Vec<(usize, usize)> {
    trajs
        .iter()
        .enumerate()
        .flat_map(|(k, tr)| (0..tr.len().saturating_sub(h)).map(move |t| (k, t)))
        .collect()
}

struct Examples<'d> {
    loader: SnapshotLoader<'d>,
    windows: Vec<(usize, usize)>,
}

impl Examples<'_> {
    fn loss(
        &self,
        m: &BarebonePredictor,
        items: &[(usize, usize)],
        norm: LossNorm,
        dropout: Option<&mut DyRng>,
    ) -> Result<(f64, Option<BatchOutcome>)> {
        let dim = m.snapshot_len();
        let mut x = Vec::with_capacity(items.len() * dim);
        let mut y = Vec::with_capacity(items.len() * dim);
        let mut times = Vec::with_capacity(items.len());
        for &(w, i) in items {
            let (k, t) = self.windows[w];
            let s = self.loader.example(k, t, &[0, i])?;
            x.extend_from_slice(s[0]);
            y.extend_from_slice(s[1]);
            times.push(i as f64);
        }
        let training = dropout.is_some();
        let mut g = Graph::new();
        let bound = m.net.bind(&mut g, training)?;
        let xv = g.constant(Tensor::new(vec![items.len(), dim], x)?)?;
        let yv = g.constant(Tensor::new(vec![items.len(), dim], y)?)?;
        let out = m.net.forward(&mut g, &bound, xv, &times, dropout.map(|r| (m.dropout.rate, r)))?;
        let loss = match norm {
            LossNorm::L1 => g.mae(out, yv)?,
            LossNorm::L2 => g.mse(out, yv)?,
        };
        let value = g.value(loss).item();
        if !training {
            return Ok((value, None));
        }
        let grads = g.backward(loss)?;
        Ok((value, Some(BatchOutcome { loss: value, grads, vars: bound.0 })))
    }

    fn full_loss(&self, m: &BarebonePredictor, h: usize, norm: LossNorm, batch: usize) -> Result<f64> {
        let items: Vec<(usize, usize)> = (0..self.windows.len()).flat_map(|w| (1..=h).map(move |i| (w, i))).collect();
        let mut total = 0.0;
        for chunk in items.chunks(batch) {
            total += self.loss(m, chunk, norm, None)?.0 * chunk.len() as f64;
        }
        Ok(total / items.len() as f64)
    }
}

fn barebone_params(m: &mut BarebonePredictor) -> &mut crate::tensor::ParamStore {
    &mut m.net.params
}

/// Multi-step regression `F(x_t, i) ≈ x_{t+i}` with `i ~ U{1, ..., h}` and
/// the loss norm from `cfg` (L2 for the baselines' usual setting).
pub fn train_barebone(
    data: &TrainingData,
    model: BarebonePredictor,
    cfg: &TrainConfig,
) -> Result<Trained<BarebonePredictor>> {
    train_barebone_logged(data, model, cfg, None)
}

pub fn train_barebone_logged(
    data: &TrainingData,
    model: BarebonePredictor,
    cfg: &TrainConfig,
    log: Option<&AccessLog>,
) -> Result<Trained<BarebonePredictor>> {
    cfg.validate()?;
    let h = cfg.horizon;
    if model.horizon != h {
        return Err(invalid("barebone horizon differs from the training horizon"));
    }
    for tr in data.train.iter().chain(&data.val) {
        if tr.snapshot_len() != model.snapshot_len() {
            return Err(invalid("trajectory snapshots do not match the model"));
        }
    }
    let train = Examples { loader: SnapshotLoader::new(&data.train, Split::Train, log), windows: windows(&data.train, h) };
    let val = Examples { loader: SnapshotLoader::new(&data.val, Split::Val, log), windows: windows(&data.val, h) };
    if val.windows.is_empty() {
        return Err(invalid("validation trajectories are too short for the horizon"));
    }
    let mut dropout_rng = substream(cfg.seed, "dropout");
    let norm = cfg.loss_norm;
    let eval_batch = cfg.batch_size.max(256);
    run_training(
        model,
        cfg,
        train.windows.len(),
        barebone_params,
        |m, chunk, rng| {
            let items: Vec<(usize, usize)> = chunk.iter().map(|&w| (w, rng.random_range(1..=h))).collect();
            Ok(train.loss(m, &items, norm, Some(&mut dropout_rng))?.1.expect("training pass"))
        },
        |m, epoch| {
            Ok(Evaluation {
                train_loss: if epoch == 0 { Some(train.full_loss(m, h, norm, eval_batch)?) } else { None },
                val_loss: val.full_loss(m, h, norm, eval_batch)?,
                val_crps: None,
            })
        },
        false,
    )
}

fn check_times(model: &BarebonePredictor, times: &[f64]) -> Result<Vec<f64>> {
    let h = model.horizon as f64;
    let mut j = times.to_vec();
    j.sort_by(f64::total_cmp);
    j.dedup();
    if j.is_empty() {
        return Err(invalid("no output times requested"));
    }
    if let Some(bad) = j.iter().find(|&&t| !(t > 0.0 && t <= h)) {
        return Err(invalid(format!("output time {bad} outside (0, {h}]")));
    }
    Ok(j)
}

fn baseline_forecast(x_t: &Tensor, horizon: usize, times: Vec<f64>, members: Vec<Member>) -> EnsembleForecast {
    let outside = times.iter().copied().filter(|&j| j > 0.0 && j < 1.0).collect();
    EnsembleForecast {
        initial: x_t.clone(),
        horizon,
        passes: ForwardPasses { forecaster: times.len(), interpolator: 0, refinement: 0 },
        times,
        members,
        schedule: None,
        sampler: None,
        flags: SampleFlags { refined: false, accelerated: false, outside_training_regime: outside },
    }
}

/// Monte-Carlo dropout ensemble. Member `m` is one model draw: its dropout
/// stream restarts from the member seed for every output time, so all of its
/// timesteps share the same masks.
pub fn dropout_ensemble(
    model: &BarebonePredictor,
    x_t: &Tensor,
    times: &[f64],
    members: usize,
    base_seed: u64,
) -> Result<EnsembleForecast> {
    if members == 0 {
        return Err(invalid("ensemble needs at least one member"));
    }
    let times = check_times(model, times)?;
    let out = (0..members)
        .map(|m| {
            let seed = member_seed(base_seed, m);
            let states = times
                .iter()
                .map(|&j| model.predict(x_t, j, Some((model.dropout.rate, &mut member_stream(seed)))))
                .collect::<Result<Vec<_>>>()?;
            Ok(Member { seed, states, horizon_trace: Vec::new() })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(baseline_forecast(x_t, model.horizon, times, out))
}

/// Ensemble from perturbed initial conditions `x_t + eps_m`,
/// `eps_m ~ N(0, sigma² I)`, with dropout off.
pub fn perturbation_ensemble(
    model: &BarebonePredictor,
    x_t: &Tensor,
    times: &[f64],
    members: usize,
    sigma: f64,
    base_seed: u64,
) -> Result<EnsembleForecast> {
    if members == 0 {
        return Err(invalid("ensemble needs at least one member"));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(invalid("perturbation scale must be finite and non-negative"));
    }
    let times = check_times(model, times)?;
    let normal = Normal::new(0.0, sigma).map_err(|e| invalid(e.to_string()))?;
    let out = (0..members)
        .map(|m| {
            let seed = member_seed(base_seed, m);
            let mut rng = substream(seed, "perturb");
            let noisy = x_t.data().iter().map(|v| v + normal.sample(&mut rng)).collect();
            let x0 = Tensor::new(x_t.shape().to_vec(), noisy)?;
            let states = times.iter().map(|&j| model.predict(&x0, j, None)).collect::<Result<Vec<_>>>()?;
            Ok(Member { seed, states, horizon_trace: Vec::new() })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(baseline_forecast(x_t, model.horizon, times, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{Normalization, OracleSystem, Trajectory};
    use crate::metrics::{crps, ssr};
    use crate::tensor::Activation;

    fn tiny() -> BackboneConfig {
        BackboneConfig { width: 16, depth: 2, time_dim: 4, activation: Activation::Gelu }
    }

    fn model(rate: f64) -> BarebonePredictor {
        BarebonePredictor::new(&[2], 4, tiny(), rate, &mut substream(3, "init")).unwrap()
    }

    fn traj(phase: f64) -> Trajectory {
        let sys = OracleSystem::Harmonic { omega: 0.4 };
        let x0 = Tensor::vector(vec![phase.cos(), phase.sin()]);
        let data: Vec<f64> = (0..20)
            .flat_map(|t| crate::dynamics::oracle_state(&sys, &x0, t as f64).unwrap().into_data())
            .collect();
        Trajectory::new("h", Tensor::new(vec![20, 2], data).unwrap(), 1.0, Normalization::identity(2)).unwrap()
    }

    fn spread_at(f: &EnsembleForecast, k: usize) -> f64 {
        let members: Vec<&[f64]> = f.members.iter().map(|m| m.states[k].data()).collect();
        let n = members[0].len();
        let mut var = 0.0;
        for e in 0..n {
            let mean = members.iter().map(|m| m[e]).sum::<f64>() / members.len() as f64;
            var += members.iter().map(|m| (m[e] - mean).powi(2)).sum::<f64>() / (members.len() - 1) as f64;
        }
        (var / n as f64).sqrt()
    }

    #[test]
    fn training_reduces_loss_and_h1_works() {
        let data = TrainingData { train: (0..4).map(|k| traj(k as f64)).collect(), val: vec![traj(0.5)] };
        let cfg = TrainConfig { loss_norm: LossNorm::L2, epochs: 30, batch_size: 16, lr: 3e-3, ..TrainConfig::new(4).unwrap() };
        let out = train_barebone(&data, model(0.1), &cfg).unwrap();
        assert!(out.history.best_val_loss().unwrap() < 0.5 * out.history.records[0].val_loss);
        let m1 = BarebonePredictor::new(&[2], 1, tiny(), 0.0, &mut substream(3, "init")).unwrap();
        let cfg1 = TrainConfig { epochs: 2, ..TrainConfig::new(1).unwrap() };
        assert!(train_barebone(&data, m1, &cfg1).is_ok());
    }

    #[test]
    fn dropout_ensemble_spread() {
        let x = Tensor::vector(vec![0.3, -0.2]);
        let times = [1.0, 2.0, 3.0, 4.0];
        let still = dropout_ensemble(&model(0.0), &x, &times, 5, 1).unwrap();
        let truth = [0.0, 0.0];
        assert_eq!(ssr(&still.at(0).iter().map(|t| t.data()).collect::<Vec<_>>(), &truth).unwrap(), 0.0);
        let noisy = dropout_ensemble(&model(0.2), &x, &times, 20, 1).unwrap();
        for k in 0..times.len() {
            assert!(spread_at(&noisy, k) > 0.0);
        }
        let one = dropout_ensemble(&model(0.2), &x, &times, 1, 1).unwrap();
        let d = one.members[0].states[0].data();
        let mae = d.iter().zip(truth).map(|(a, b)| (a - b).abs()).sum::<f64>() / 2.0;
        assert_eq!(crps(&[d], &truth).unwrap(), mae);
        assert_eq!(dropout_ensemble(&model(0.2), &x, &times, 4, 9).unwrap(), dropout_ensemble(&model(0.2), &x, &times, 4, 9).unwrap());
    }

    #[test]
    fn perturbation_ensemble_properties() {
        let m = model(0.3);
        let x = Tensor::vector(vec![0.3, -0.2]);
        let times = [1.0, 4.0];
        let zero = perturbation_ensemble(&m, &x, &times, 4, 0.0, 2).unwrap();
        assert!(zero.members.iter().all(|mb| mb.states == zero.members[0].states));
        let still = dropout_ensemble(&model(0.0), &x, &times, 4, 2).unwrap();
        let zero_still = perturbation_ensemble(&model(0.0), &x, &times, 4, 0.0, 2).unwrap();
        assert_eq!(still.members.iter().map(|m| &m.states).collect::<Vec<_>>(), zero_still.members.iter().map(|m| &m.states).collect::<Vec<_>>());
        let spreads: Vec<f64> = [0.01, 0.05, 0.1]
            .iter()
            .map(|&s| spread_at(&perturbation_ensemble(&m, &x, &times, 20, s, 2).unwrap(), 1))
            .collect();
        assert!(spreads[0] < spreads[1] && spreads[1] < spreads[2], "{spreads:?}");
        assert!(perturbation_ensemble(&m, &x, &times, 4, -1.0, 2).is_err());
        assert!(perturbation_ensemble(&m, &x, &[5.0], 4, 0.1, 2).is_err());
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let m = model(0.2);
        let stem = dir.path().join("bb");
        m.save(&stem).unwrap();
        let back = BarebonePredictor::load(&stem).unwrap();
        assert_eq!(back.net.params.named_values(), m.net.params.named_values());
        assert_eq!(back.metadata(), m.metadata());
    }
}
