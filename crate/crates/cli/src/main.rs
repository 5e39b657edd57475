use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use dyffusion::baselines::{dropout_ensemble, perturbation_ensemble, train_barebone, BarebonePredictor};
use dyffusion::dynamics::{simulate_spring_mesh, OracleSystem};
use dyffusion::harness::pipeline::{
    generate_data, init_barebone, init_forecaster, init_interpolator, mesh_system, read_forecast, read_trajectory, write_forecast,
    write_trajectory, Datasets,
};
use dyffusion::harness::{builtin_experiment, list_builtin_experiments, run_experiment, Config, Stage};
use dyffusion::metrics::{evaluate_with, CrpsEstimator};
use dyffusion::nets::{ForecasterModel, InterpolatorModel};
use dyffusion::ode::{measure_error_order, OrderConfig};
use dyffusion::rng::substream;
use dyffusion::sampling::{autoregressive_rollout, sample, SampleRequest, Sampler};
use dyffusion::schedule::{parse_keep_indices, subset_schedule};
use dyffusion::training::{train_forecaster, train_interpolator, LossHistory};
use dyffusion::{Error, Result, Tensor};

#[derive(Parser)]
#[command(name = "dyffuse", version, about = "Dynamics-informed diffusion forecasting at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML config file; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Config override, `key=value`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_pair)]
    overrides: Vec<(String, String)>,
}

impl ConfigArgs {
    fn load(&self) -> Result<Config> {
        let base = match &self.config {
            Some(p) => Config::load(p)?,
            None => {
                let mut c = Config::default();
                c.apply_env()?;
                c
            }
        };
        base.with_overrides(&self.overrides)
    }
}

#[derive(Args)]
struct DataArg {
    /// Directory written by `gen-data`; generated from the config when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Toggle {
    On,
    Off,
}

impl Toggle {
    fn on(self) -> bool {
        matches!(self, Toggle::On)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SystemKind {
    SpringMesh,
}

#[derive(Clone, Copy, ValueEnum)]
enum OdeSystem {
    Exp,
    Harmonic,
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineKind {
    Dropout,
    Perturb,
}

#[derive(Clone, Copy, ValueEnum)]
enum Estimator {
    Textbook,
    Fair,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate spring-mesh trajectories.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum, default_value = "spring-mesh")]
        system: SystemKind,
        #[arg(long)]
        rows: Option<usize>,
        #[arg(long)]
        cols: Option<usize>,
        /// Integrator steps per trajectory; must be a multiple of the stride.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        stride: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// A directory receives train/val/test splits; a `.dyft` path receives
        /// one trajectory normalized by its own statistics.
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage 1: fit the interpolator.
    TrainInterpolator {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        data: DataArg,
        /// Checkpoint stem; writes `.dyfp`, `.meta` and `-loss.csv`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage 2: fit the forecaster against a trained interpolator.
    TrainForecaster {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        interpolator: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the multi-step barebone predictor used by the baselines.
    TrainBarebone {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw an ensemble forecast from a trained model pair.
    Sample {
        #[arg(long)]
        forecaster: PathBuf,
        #[arg(long)]
        interpolator: PathBuf,
        /// Initial condition as `trajectory.dyft@index`.
        #[arg(long)]
        init: String,
        #[arg(long, default_value_t = 10)]
        members: usize,
        #[arg(long, env = "DYFFUSE_SEED", default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "cold")]
        sampler: SamplerArg,
        #[arg(long, value_enum, default_value = "off")]
        refine: Toggle,
        /// Interpolator dropout at inference.
        #[arg(long, value_enum, default_value = "on")]
        dropout: Toggle,
        /// Schedule positions to keep, e.g. `0,9-16`; all when omitted.
        #[arg(long)]
        keep_indices: Option<String>,
        /// Output times, comma separated; `1..=h` when omitted.
        #[arg(long, value_delimiter = ',')]
        times: Option<Vec<f64>>,
        /// Roll out autoregressively to this many steps.
        #[arg(long)]
        total: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Ensemble forecast from a barebone predictor.
    Baseline {
        #[arg(value_enum)]
        kind: BaselineKind,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        init: String,
        #[arg(long, default_value_t = 10)]
        members: usize,
        #[arg(long, default_value_t = dyffusion::baselines::DEFAULT_PERTURBATION)]
        sigma: f64,
        #[arg(long, env = "DYFFUSE_SEED", default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a forecast file against the trajectory it started from.
    Evaluate {
        #[arg(long)]
        forecast: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Per-timestep metrics CSV; a JSON summary goes to stdout.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "textbook")]
        estimator: Estimator,
    },
    /// Run a built-in experiment.
    Experiment {
        name: String,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory; for `ode-order`, a `.csv` path writes the error table only.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Subset of gen-data,train,sample,evaluate; all when omitted.
        #[arg(long, value_delimiter = ',')]
        stages: Option<Vec<String>>,
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long, value_enum, default_value = "exp")]
        system: OdeSystem,
        #[arg(long)]
        eps: Option<f64>,
        #[arg(long)]
        delta: Option<f64>,
    },
    /// Print the names of the built-in experiments.
    ListExperiments,
}

#[derive(Clone, Copy, ValueEnum)]
enum SamplerArg {
    Cold,
    Naive,
}

fn parse_pair(s: &str) -> std::result::Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| format!("expected KEY=VALUE, got {s:?}"))
}

fn parse_init(spec: &str) -> Result<(PathBuf, usize)> {
    let (path, idx) = spec
        .rsplit_once('@')
        .ok_or_else(|| Error::InvalidArgument(format!("--init expects path@index, got {spec:?}")))?;
    let idx = idx.parse().map_err(|_| Error::InvalidArgument(format!("bad snapshot index {idx:?}")))?;
    Ok((PathBuf::from(path), idx))
}

fn datasets(cfg: &Config, data: &DataArg) -> Result<Datasets> {
    match &data.data {
        Some(dir) => Datasets::load(dir, cfg),
        None => generate_data(cfg),
    }
}

fn write_history(stem: &Path, h: &LossHistory) -> Result<()> {
    let mut path = stem.as_os_str().to_owned();
    path.push("-loss.csv");
    let mut w = BufWriter::new(File::create(PathBuf::from(path))?);
    h.write_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(p)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { cfg, system: SystemKind::SpringMesh, rows, cols, steps, stride, seed, out } => {
            let mut c = cfg.load()?;
            c.mesh_rows = rows.unwrap_or(c.mesh_rows);
            c.mesh_cols = cols.unwrap_or(c.mesh_cols);
            c.stride = stride.unwrap_or(c.stride);
            c.seed = seed.unwrap_or(c.seed);
            if let Some(n) = steps {
                if n == 0 || n % c.stride != 0 {
                    return Err(Error::InvalidArgument(format!("--steps {n} is not a positive multiple of the stride {}", c.stride)));
                }
                c.trajectory_len = n / c.stride + 1;
            }
            if out.extension().is_some_and(|e| e == "dyft") {
                c.validate_system()?;
                let sys = mesh_system(&c);
                let init = sys.random_state(c.init_sigma, &mut substream(c.seed, "data"))?;
                let tr = simulate_spring_mesh(&sys, &init, (c.trajectory_len - 1) * c.stride, c.stride, None)?;
                ensure_parent(&out)?;
                write_trajectory(&out, &tr)?;
                eprintln!("wrote {} snapshots to {}", tr.len(), out.display());
            } else {
                let d = generate_data(&c)?;
                d.save(&out)?;
                fs::write(out.join("config.toml"), c.to_toml()?)?;
                eprintln!("wrote {}/{}/{} trajectories to {}", d.train.len(), d.val.len(), d.test.len(), out.display());
            }
        }
        Command::TrainInterpolator { cfg, data, out } => {
            let c = cfg.load()?;
            let d = datasets(&c, &data)?;
            let trained = train_interpolator(&d.training(), init_interpolator(&c, d.snapshot_shape())?, &c.interpolator_training()?)?;
            let mut model = trained.model;
            model.freeze();
            ensure_parent(&out)?;
            model.save(&out)?;
            write_history(&out, &trained.history)?;
            eprintln!("best epoch {}, val loss {:.6}", trained.best_epoch, trained.history.best_val_loss().unwrap_or(f64::NAN));
        }
        Command::TrainForecaster { cfg, data, interpolator, out } => {
            let c = cfg.load()?;
            let d = datasets(&c, &data)?;
            let interp = InterpolatorModel::load(&interpolator)?;
            let init = init_forecaster(&c, d.snapshot_shape(), c.conditioning)?;
            let trained = train_forecaster(&d.training(), &interp, init, &c.forecaster_training()?)?;
            ensure_parent(&out)?;
            trained.model.save(&out)?;
            write_history(&out, &trained.history)?;
            eprintln!("best epoch {}, val loss {:.6}", trained.best_epoch, trained.history.best_val_loss().unwrap_or(f64::NAN));
        }
        Command::TrainBarebone { cfg, data, out } => {
            let c = cfg.load()?;
            let d = datasets(&c, &data)?;
            let trained = train_barebone(&d.training(), init_barebone(&c, d.snapshot_shape())?, &c.barebone_training()?)?;
            ensure_parent(&out)?;
            trained.model.save(&out)?;
            write_history(&out, &trained.history)?;
            eprintln!("best epoch {}, val loss {:.6}", trained.best_epoch, trained.history.best_val_loss().unwrap_or(f64::NAN));
        }
        Command::Sample { forecaster, interpolator, init, members, seed, sampler, refine, dropout, keep_indices, times, total, out } => {
            let f = ForecasterModel::load(&forecaster)?;
            let i = InterpolatorModel::load(&interpolator)?.with_inference_dropout(dropout.on());
            let (path, t) = parse_init(&init)?;
            let tr = read_trajectory(&path)?;
            if t >= tr.len() {
                return Err(Error::InvalidArgument(format!("snapshot {t} beyond trajectory of length {}", tr.len())));
            }
            let trained = f.schedule()?;
            let (schedule, accelerated) = match keep_indices.as_deref().filter(|s| !s.trim().is_empty()) {
                Some(text) => (subset_schedule(&trained, &parse_keep_indices(text)?)?, true),
                None => (trained, false),
            };
            let mut req = SampleRequest::new(tr.snapshot_tensor(t), schedule, members, seed).with_refinement(refine.on());
            if let Some(ts) = times {
                req = req.with_output_times(ts);
            }
            req.accelerated = accelerated;
            req.parallel = true;
            let sampler = match sampler {
                SamplerArg::Cold => Sampler::Cold,
                SamplerArg::Naive => Sampler::Naive,
            };
            let start = Instant::now();
            let fc = match total {
                Some(n) => autoregressive_rollout(&f, &i, n, &req, sampler)?,
                None => sample(&f, &i, &req, sampler)?,
            };
            ensure_parent(&out)?;
            write_forecast(&out, &fc, &tr, 0, t)?;
            eprintln!("{} members x {} times in {:.2}s, {} forward passes", fc.members.len(), fc.times.len(), start.elapsed().as_secs_f64(), fc.passes.total());
        }
        Command::Baseline { kind, model, init, members, sigma, seed, out } => {
            let m = BarebonePredictor::load(&model)?;
            let (path, t) = parse_init(&init)?;
            let tr = read_trajectory(&path)?;
            if t >= tr.len() {
                return Err(Error::InvalidArgument(format!("snapshot {t} beyond trajectory of length {}", tr.len())));
            }
            let times: Vec<f64> = (1..=m.horizon()).map(|j| j as f64).collect();
            let x_t = tr.snapshot_tensor(t);
            let fc = match kind {
                BaselineKind::Dropout => dropout_ensemble(&m, &x_t, &times, members, seed)?,
                BaselineKind::Perturb => perturbation_ensemble(&m, &x_t, &times, members, sigma, seed)?,
            };
            ensure_parent(&out)?;
            write_forecast(&out, &fc, &tr, 0, t)?;
        }
        Command::Evaluate { forecast, truth, out, estimator } => {
            let start = Instant::now();
            let (fc, side) = read_forecast(&forecast)?;
            let tr = read_trajectory(&truth)?;
            let est = match estimator {
                Estimator::Textbook => CrpsEstimator::Textbook,
                Estimator::Fair => CrpsEstimator::Fair,
            };
            let report = evaluate_with(&fc, &tr, side.init_index, start.elapsed().as_secs_f64(), est)?;
            ensure_parent(&out)?;
            let mut w = BufWriter::new(File::create(&out)?);
            report.write_csv(&mut w)?;
            w.flush()?;
            let summary = report.summary_json(json!({
                "forecast": forecast.display().to_string(),
                "flags": fc.flags,
                "sampler": fc.sampler,
                "forward_passes": fc.passes.total(),
            }));
            println!("{}", serde_json::to_string_pretty(&summary).expect("json"));
        }
        Command::Experiment { name, cfg, out, seeds, stages, jobs, system, eps, delta } => {
            if name == "ode-order" && out.extension().is_some_and(|e| e == "csv") {
                let mut oc = OrderConfig::default();
                if let OdeSystem::Harmonic = system {
                    oc.system = OracleSystem::Harmonic { omega: 1.0 };
                    oc.x0 = Tensor::vector(vec![1.0, 0.0]);
                }
                oc.eps = eps.unwrap_or(oc.eps);
                oc.delta = delta.unwrap_or(oc.delta);
                let r = measure_error_order(&oc)?;
                ensure_parent(&out)?;
                let mut w = BufWriter::new(File::create(&out)?);
                r.write_csv(&mut w)?;
                w.flush()?;
                let slope = |s| r.curve(s).fit.map(|f| f.slope);
                println!("{}", json!({ "cold_slope": slope(Sampler::Cold), "naive_slope": slope(Sampler::Naive) }));
                return Ok(());
            }
            let c = cfg.load()?;
            let mut spec = builtin_experiment(&name, c, &out)?;
            spec.overrides = cfg.overrides.clone();
            if let Some(s) = seeds {
                spec.seeds = s;
            }
            if let Some(st) = stages {
                spec.stages = st.iter().map(|s| s.parse::<Stage>()).collect::<Result<_>>()?;
            }
            spec.jobs = jobs;
            let summary = run_experiment(&spec)?;
            println!("{}", serde_json::to_string_pretty(&summary).expect("json"));
        }
        Command::ListExperiments => {
            for n in list_builtin_experiments() {
                println!("{n}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
