//! Building blocks shared by the CLI and the experiments: data generation,
//! model construction, forecast files and windowed evaluation.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::Config;
use crate::baselines::{dropout_ensemble, perturbation_ensemble, BarebonePredictor};
use crate::dynamics::{read_dyft, simulate_spring_mesh_raw, write_dyft, Normalization, SpringMeshSystem, Trajectory};
use crate::error::{invalid, Error, Result};
use crate::metrics::{average_reports, evaluate, MetricsReport};
use crate::nets::{ConditioningMode, ForecasterModel, InterpolatorModel};
use crate::rng::{derive_seed, substream};
use crate::sampling::{sample, EnsembleForecast, ForwardPasses, Member, SampleFlags, SampleRequest, Sampler};
use crate::schedule::Schedule;
use crate::training::TrainingData;
use crate::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Datasets {
    pub train: Vec<Trajectory>,
    pub val: Vec<Trajectory>,
    pub test: Vec<Trajectory>,
}

impl Datasets {
    pub fn training(&self) -> TrainingData {
        TrainingData { train: self.train.clone(), val: self.val.clone() }
    }

    pub fn snapshot_shape(&self) -> &[usize] {
        self.train[0].snapshot_shape()
    }

    fn files(dir: &Path, split: &str, count: usize) -> Vec<PathBuf> {
        (0..count).map(|k| dir.join(format!("{split}-{k:03}.dyft"))).collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (split, trajs) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            for (path, tr) in Self::files(dir, split, trajs.len()).iter().zip(trajs) {
                write_trajectory(path, tr)?;
            }
        }
        Ok(())
    }

    /// Reads the split files written by [`Datasets::save`].
    pub fn load(dir: &Path, cfg: &Config) -> Result<Self> {
        let read = |split, count| Self::files(dir, split, count).iter().map(|p| read_trajectory(p)).collect::<Result<Vec<_>>>();
        Ok(Self {
            train: read("train", cfg.train_trajectories)?,
            val: read("val", cfg.val_trajectories)?,
            test: read("test", cfg.test_trajectories)?,
        })
    }
}

pub fn write_trajectory(path: &Path, tr: &Trajectory) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    tr.write_to(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_trajectory(path: &Path) -> Result<Trajectory> {
    let f = File::open(path).map_err(|_| Error::MissingInput(path.to_path_buf()))?;
    Trajectory::read_from(BufReader::new(f))
}

pub fn mesh_system(cfg: &Config) -> SpringMeshSystem {
    let mut sys = SpringMeshSystem::new(cfg.mesh_rows, cfg.mesh_cols);
    sys.mass = cfg.mass;
    sys.spring_constant = cfg.spring_constant;
    sys.rest_length = cfg.rest_length;
    sys.dt = cfg.dt;
    sys
}

/// Simulates every split from the `data` stream. Statistics are fitted on the
/// training split and shared by all three.
pub fn generate_data(cfg: &Config) -> Result<Datasets> {
    cfg.validate()?;
    let sys = mesh_system(cfg);
    let mut rng = substream(cfg.seed, "data");
    let steps = (cfg.trajectory_len - 1) * cfg.stride;
    let mut simulate = |count: usize| {
        (0..count)
            .map(|_| {
                let init = sys.random_state(cfg.init_sigma, &mut rng)?;
                simulate_spring_mesh_raw(&sys, &init, steps, cfg.stride)
            })
            .collect::<Result<Vec<_>>>()
    };
    let train_raw = simulate(cfg.train_trajectories)?;
    let val_raw = simulate(cfg.val_trajectories)?;
    let test_raw = simulate(cfg.test_trajectories)?;
    let stats = Normalization::fit(&train_raw.iter().collect::<Vec<_>>())?;
    let id = format!("spring-mesh-{}x{}", cfg.mesh_rows, cfg.mesh_cols);
    let wrap = |raws: Vec<Tensor>| {
        raws.iter()
            .map(|r| Trajectory::from_raw(id.clone(), r, cfg.dt * cfg.stride as f64, stats.clone()))
            .collect::<Result<Vec<_>>>()
    };
    Ok(Datasets { train: wrap(train_raw)?, val: wrap(val_raw)?, test: wrap(test_raw)? })
}

pub fn init_interpolator(cfg: &Config, shape: &[usize]) -> Result<InterpolatorModel> {
    let mut rng = substream(derive_seed(cfg.seed, "init-interpolator"), "init");
    InterpolatorModel::new(shape, cfg.horizon, cfg.backbone(cfg.interpolator_width), cfg.interpolator_dropout, &mut rng)
}

pub fn init_forecaster(cfg: &Config, shape: &[usize], conditioning: ConditioningMode) -> Result<ForecasterModel> {
    let mut rng = substream(derive_seed(cfg.seed, "init-forecaster"), "init");
    ForecasterModel::new(shape, cfg.horizon, cfg.backbone(cfg.forecaster_width), conditioning, cfg.forecaster_dropout, &mut rng)
}

pub fn init_barebone(cfg: &Config, shape: &[usize]) -> Result<BarebonePredictor> {
    let mut rng = substream(derive_seed(cfg.seed, "init-barebone"), "init");
    BarebonePredictor::new(shape, cfg.horizon, cfg.backbone(cfg.barebone_width), cfg.barebone_dropout, &mut rng)
}

/// `count` window starts `(trajectory, t)` spread evenly over all windows of
/// length `h` in `trajs`.
pub fn eval_windows(trajs: &[Trajectory], h: usize, count: usize) -> Result<Vec<(usize, usize)>> {
    let all: Vec<(usize, usize)> = trajs
        .iter()
        .enumerate()
        .flat_map(|(k, tr)| (0..tr.len().saturating_sub(h)).map(move |t| (k, t)))
        .collect();
    if all.is_empty() {
        return Err(invalid(format!("no evaluation window of length {h}")));
    }
    let count = count.min(all.len());
    Ok((0..count).map(|w| all[w * all.len() / count]).collect())
}

/// Per-window base seed, shared by every variant evaluated on that window.
pub fn window_seed(root: u64, w: usize) -> u64 {
    derive_seed(root, &format!("eval-window-{w}"))
}

/// How to produce one ensemble per evaluation window.
#[derive(Debug, Clone, PartialEq)]
pub enum Method {
    Diffusion { sampler: Sampler, refine: bool, schedule: Schedule, accelerated: bool, trace: bool },
    Dropout,
    Perturbation { sigma: f64 },
}

pub enum Models<'m> {
    Diffusion { forecaster: &'m ForecasterModel, interpolator: &'m InterpolatorModel },
    Barebone(&'m BarebonePredictor),
}

/// Ensembles for every window, with the sampling wall-clock time.
pub fn forecast_windows(
    models: &Models<'_>,
    method: &Method,
    trajs: &[Trajectory],
    windows: &[(usize, usize)],
    members: usize,
    root_seed: u64,
    horizon: usize,
) -> Result<(Vec<EnsembleForecast>, f64)> {
    let start = Instant::now();
    let times: Vec<f64> = (1..=horizon).map(|j| j as f64).collect();
    let mut out = Vec::with_capacity(windows.len());
    for (w, &(k, t)) in windows.iter().enumerate() {
        let x_t = trajs[k].snapshot_tensor(t);
        let seed = window_seed(root_seed, w);
        let fc = match (models, method) {
            (Models::Diffusion { forecaster, interpolator }, Method::Diffusion { sampler, refine, schedule, accelerated, trace }) => {
                let mut req = SampleRequest::new(x_t, schedule.clone(), members, seed).with_refinement(*refine);
                req.accelerated = *accelerated;
                req.record_trace = *trace;
                req.parallel = true;
                if !refine {
                    let on_schedule: Vec<f64> = times.iter().copied().filter(|&j| schedule.contains(j)).collect();
                    req = req.with_output_times(on_schedule);
                }
                sample(*forecaster, *interpolator, &req, *sampler)?
            }
            (Models::Barebone(m), Method::Dropout) => dropout_ensemble(m, &x_t, &times, members, seed)?,
            (Models::Barebone(m), Method::Perturbation { sigma }) => perturbation_ensemble(m, &x_t, &times, members, *sigma, seed)?,
            _ => return Err(invalid("models do not match the forecasting method")),
        };
        out.push(fc);
    }
    Ok((out, start.elapsed().as_secs_f64()))
}

/// Metrics averaged over windows.
pub fn score_windows(
    forecasts: &[EnsembleForecast],
    trajs: &[Trajectory],
    windows: &[(usize, usize)],
    runtime_secs: f64,
) -> Result<MetricsReport> {
    let reports = forecasts
        .iter()
        .zip(windows)
        .map(|(fc, &(k, t))| evaluate(fc, &trajs[k], t, 0.0))
        .collect::<Result<Vec<_>>>()?;
    let mut avg = average_reports(&reports)?;
    avg.runtime_secs = runtime_secs;
    Ok(avg)
}

/// Everything in a forecast besides the member values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastSidecar {
    pub system_id: String,
    pub trajectory: usize,
    pub init_index: usize,
    pub horizon: usize,
    pub times: Vec<f64>,
    pub seeds: Vec<u64>,
    pub sampler: Option<Sampler>,
    pub schedule: Option<Vec<f64>>,
    pub aux_count: usize,
    pub refined: bool,
    pub accelerated: bool,
    pub outside_training_regime: Vec<f64>,
    pub forecaster_passes: usize,
    pub interpolator_passes: usize,
    pub refinement_passes: usize,
    pub initial: Vec<f64>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes members as a `DYFT` tensor `(M, |J|, snapshot...)` with a JSON
/// sidecar holding times, seeds and flags.
pub fn write_forecast(path: &Path, fc: &EnsembleForecast, source: &Trajectory, trajectory: usize, init_index: usize) -> Result<()> {
    let values = fc.to_tensor()?;
    let mut w = BufWriter::new(File::create(path)?);
    write_dyft(&mut w, &source.system_id, source.dt, &values, &source.normalization)?;
    w.flush()?;
    let side = ForecastSidecar {
        system_id: source.system_id.clone(),
        trajectory,
        init_index,
        horizon: fc.horizon,
        times: fc.times.clone(),
        seeds: fc.members.iter().map(|m| m.seed).collect(),
        sampler: fc.sampler,
        schedule: fc.schedule.as_ref().map(|s| s.steps().to_vec()),
        aux_count: fc.schedule.as_ref().map_or(0, |s| s.aux_count()),
        refined: fc.flags.refined,
        accelerated: fc.flags.accelerated,
        outside_training_regime: fc.flags.outside_training_regime.clone(),
        forecaster_passes: fc.passes.forecaster,
        interpolator_passes: fc.passes.interpolator,
        refinement_passes: fc.passes.refinement,
        initial: fc.initial.data().to_vec(),
    };
    fs::write(sidecar_path(path), serde_json::to_string_pretty(&side).map_err(|e| invalid(e.to_string()))? + "\n")?;
    Ok(())
}

/// Reads a forecast and its sidecar back. Member values come back at `f32`
/// precision.
pub fn read_forecast(path: &Path) -> Result<(EnsembleForecast, ForecastSidecar)> {
    let f = File::open(path).map_err(|_| Error::MissingInput(path.to_path_buf()))?;
    let (_, _, values, _) = read_dyft(BufReader::new(f))?;
    let side_path = sidecar_path(path);
    let text = fs::read_to_string(&side_path).map_err(|_| Error::MissingInput(side_path.clone()))?;
    let side: ForecastSidecar = serde_json::from_str(&text).map_err(|e| Error::Format { format: "forecast sidecar", detail: e.to_string() })?;
    let dims = values.shape().to_vec();
    if dims.len() < 3 || dims[0] != side.seeds.len() || dims[1] != side.times.len() {
        return Err(Error::Format { format: "forecast", detail: format!("shape {dims:?} does not match the sidecar") });
    }
    let snap_shape = dims[2..].to_vec();
    let members = values
        .unstack(&dims[1..])?
        .into_iter()
        .zip(&side.seeds)
        .map(|(m, &seed)| Ok(Member { seed, states: m.unstack(&snap_shape)?, horizon_trace: Vec::new() }))
        .collect::<Result<Vec<_>>>()?;
    let schedule = match &side.schedule {
        Some(steps) => Some(Schedule::from_steps(side.horizon, steps.clone(), side.aux_count)?),
        None => None,
    };
    let fc = EnsembleForecast {
        initial: Tensor::new(snap_shape, side.initial.clone())?,
        horizon: side.horizon,
        times: side.times.clone(),
        members,
        schedule,
        sampler: side.sampler,
        flags: SampleFlags {
            refined: side.refined,
            accelerated: side.accelerated,
            outside_training_regime: side.outside_training_regime.clone(),
        },
        passes: ForwardPasses {
            forecaster: side.forecaster_passes,
            interpolator: side.interpolator_passes,
            refinement: side.refinement_passes,
        },
    };
    Ok((fc, side))
}
