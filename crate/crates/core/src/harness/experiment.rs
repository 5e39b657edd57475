use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use super::config::Config;
use super::pipeline::{
    eval_windows, forecast_windows, generate_data, init_barebone, init_forecaster, init_interpolator, read_forecast,
    score_windows, write_forecast, Datasets, Method, Models,
};
use crate::baselines::{train_barebone, BarebonePredictor};
use crate::dynamics::{read_dyft, write_dyft, Trajectory};
use crate::error::{invalid, Error, Result};
use crate::metrics::crps;
use crate::nets::{ConditioningMode, ForecasterModel, InterpolatorModel};
use crate::ode::{measure_error_order, OrderConfig};
use crate::sampling::{EnsembleForecast, Sampler};
use crate::schedule::base_indices;
use crate::stats::spearman;
use crate::training::{train_forecaster, train_interpolator, LossHistory};
use crate::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    GenData,
    Train,
    Sample,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::GenData, Stage::Train, Stage::Sample, Stage::Evaluate];
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gen-data" => Ok(Self::GenData),
            "train" => Ok(Self::Train),
            "sample" => Ok(Self::Sample),
            "evaluate" => Ok(Self::Evaluate),
            other => Err(invalid(format!("unknown stage {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub name: String,
    pub stages: Vec<Stage>,
    pub config: Config,
    /// `key=value` pairs applied on top of `config`.
    pub overrides: Vec<(String, String)>,
    /// Root seeds; each gets its own `seed-{s}` directory.
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    /// Worker threads for ensemble sampling; `None` uses the default pool.
    pub jobs: Option<usize>,
}

impl ExperimentSpec {
    /// All stages, the configured seed.
    pub fn new(name: impl Into<String>, config: Config, out_dir: impl Into<PathBuf>) -> Self {
        Self {
            name: name.into(),
            stages: Stage::ALL.to_vec(),
            seeds: vec![config.seed],
            config,
            overrides: Vec::new(),
            out_dir: out_dir.into(),
            jobs: None,
        }
    }
}

const BUILTINS: [&str; 10] = [
    "ode-order",
    "cold-vs-naive",
    "no-dropout",
    "refinement-on-off",
    "conditioning-sweep",
    "horizon-sweep",
    "aux-steps-sweep",
    "accel-sweep",
    "step-vs-crps",
    "baselines",
];

pub fn list_builtin_experiments() -> Vec<&'static str> {
    BUILTINS.to_vec()
}

#[derive(Debug, Clone, PartialEq)]
enum ModelRef {
    Diffusion { forecaster: String, interpolator: String, inference_dropout: bool },
    Dropout { barebone: String },
    Perturbation { barebone: String },
}

#[derive(Debug, Clone, PartialEq)]
struct Variant {
    name: String,
    cfg: Config,
    models: ModelRef,
    trace: bool,
    /// Score on the validation split instead of the test split.
    on_val: bool,
}

#[derive(Debug, Clone, PartialEq)]
struct ForecasterJob {
    tag: String,
    interpolator: String,
    cfg: Config,
}

#[derive(Debug, Clone, PartialEq, Default)]
struct Plan {
    interpolators: Vec<(String, Config)>,
    forecasters: Vec<ForecasterJob>,
    barebones: Vec<(String, Config)>,
    variants: Vec<Variant>,
    ode_order: bool,
    step_vs_crps: Option<String>,
    /// Longest horizon any model uses; data must cover it.
    max_horizon: usize,
}

fn diffusion(name: &str, cfg: Config, f: &str, i: &str) -> Variant {
    let inference_dropout = cfg.interpolator_inference_dropout;
    Variant {
        name: name.into(),
        cfg,
        models: ModelRef::Diffusion { forecaster: f.into(), interpolator: i.into(), inference_dropout },
        trace: false,
        on_val: false,
    }
}

fn job(tag: &str, interpolator: &str, cfg: Config) -> ForecasterJob {
    ForecasterJob { tag: tag.into(), interpolator: interpolator.into(), cfg }
}

/// Models and evaluation variants of a built-in experiment.
fn plan(name: &str, base: &Config) -> Result<Plan> {
    let mut p = Plan { max_horizon: base.horizon, ..Plan::default() };
    let std_models = |p: &mut Plan| {
        p.interpolators.push(("interpolator".into(), base.clone()));
        p.forecasters.push(job("forecaster", "interpolator", base.clone()));
    };
    let with = |f: &dyn Fn(&mut Config)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    match name {
        "ode-order" => p.ode_order = true,
        "cold-vs-naive" => {
            std_models(&mut p);
            for (v, s) in [("cold", Sampler::Cold), ("naive", Sampler::Naive)] {
                p.variants.push(diffusion(v, with(&|c| c.sampler = s), "forecaster", "interpolator"));
            }
        }
        "no-dropout" => {
            std_models(&mut p);
            for (v, on) in [("dropout", true), ("no-dropout", false)] {
                p.variants.push(diffusion(v, with(&|c| c.interpolator_inference_dropout = on), "forecaster", "interpolator"));
            }
        }
        "refinement-on-off" => {
            std_models(&mut p);
            for (v, r) in [("refine-off", false), ("refine-on", true)] {
                p.variants.push(diffusion(v, with(&|c| c.refine = r), "forecaster", "interpolator"));
            }
        }
        "conditioning-sweep" => {
            p.interpolators.push(("interpolator".into(), base.clone()));
            for mode in [ConditioningMode::None, ConditioningMode::Clean, ConditioningMode::Noised] {
                let tag = format!("forecaster-{mode}");
                let cfg = with(&|c| c.conditioning = mode);
                p.forecasters.push(job(&tag, "interpolator", cfg.clone()));
                p.variants.push(diffusion(&format!("conditioning-{mode}"), cfg, &tag, "interpolator"));
            }
        }
        "horizon-sweep" => {
            for h in [8usize, 16, 32] {
                let cfg = with(&|c| c.horizon = h);
                let (it, ft) = (format!("interpolator-h{h}"), format!("forecaster-h{h}"));
                p.interpolators.push((it.clone(), cfg.clone()));
                p.forecasters.push(job(&ft, &it, cfg.clone()));
                p.variants.push(diffusion(&format!("h{h}"), cfg, &ft, &it));
                p.max_horizon = p.max_horizon.max(h);
            }
        }
        "aux-steps-sweep" => {
            p.interpolators.push(("interpolator".into(), base.clone()));
            for k in [0usize, 10, 25, 40, 45] {
                let cfg = with(&|c| c.aux_steps_k = k);
                let tag = format!("forecaster-k{k}");
                p.forecasters.push(job(&tag, "interpolator", cfg.clone()));
                p.variants.push(diffusion(&format!("k{k}"), cfg, &tag, "interpolator"));
            }
        }
        "accel-sweep" => {
            let k = if base.aux_steps_k == 0 { 8 } else { base.aux_steps_k };
            let trained = with(&|c| {
                c.aux_steps_k = k;
                c.inference_keep_indices.clear();
            });
            p.interpolators.push(("interpolator".into(), base.clone()));
            p.forecasters.push(job("forecaster", "interpolator", trained.clone()));
            let base_pos = base_indices(&trained.schedule()?);
            let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
            let sparse: Vec<usize> = base_pos.iter().copied().enumerate().filter(|(j, _)| j % 2 == 0).map(|(_, i)| i).collect();
            for (v, keep) in [("full", String::new()), ("no-aux", join(&base_pos)), ("sparse", join(&sparse))] {
                let cfg = Config { inference_keep_indices: keep, ..trained.clone() };
                // skipped integer times are filled in by refinement
                let cfg = if v == "sparse" { Config { refine: true, ..cfg } } else { cfg };
                p.variants.push(diffusion(v, cfg, "forecaster", "interpolator"));
            }
        }
        "step-vs-crps" => {
            std_models(&mut p);
            let mut v = diffusion("cold-trace", base.clone(), "forecaster", "interpolator");
            v.trace = true;
            v.on_val = true;
            p.variants.push(v);
            p.step_vs_crps = Some("cold-trace".into());
        }
        "baselines" => {
            p.barebones.push(("barebone".into(), base.clone()));
            p.variants.push(Variant {
                name: "dropout".into(),
                cfg: base.clone(),
                models: ModelRef::Dropout { barebone: "barebone".into() },
                trace: false,
                on_val: false,
            });
            p.variants.push(Variant {
                name: "perturbation".into(),
                cfg: base.clone(),
                models: ModelRef::Perturbation { barebone: "barebone".into() },
                trace: false,
                on_val: false,
            });
        }
        other => return Err(invalid(format!("unknown experiment {other:?}; see list-experiments"))),
    }
    Ok(p)
}

/// A spec for a built-in experiment with all stages.
pub fn builtin_experiment(name: &str, config: Config, out_dir: impl Into<PathBuf>) -> Result<ExperimentSpec> {
    plan(name, &config)?;
    Ok(ExperimentSpec::new(name, config, out_dir))
}

fn model_stem(dir: &Path, tag: &str) -> PathBuf {
    dir.join("models").join(tag)
}

fn write_history(dir: &Path, tag: &str, h: &LossHistory) -> Result<()> {
    let mut w = BufWriter::new(File::create(dir.join("models").join(format!("{tag}-loss.csv")))?);
    h.write_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

fn forecast_path(dir: &Path, variant: &str, w: usize) -> PathBuf {
    dir.join("forecasts").join(variant).join(format!("w{w:02}.dyft"))
}

fn trace_path(dir: &Path, variant: &str, w: usize) -> PathBuf {
    dir.join("forecasts").join(variant).join(format!("w{w:02}.trace.dyft"))
}

fn data_config(base: &Config, plan: &Plan) -> Config {
    let mut c = base.clone();
    c.trajectory_len = c.trajectory_len.max(2 * plan.max_horizon + 1);
    c
}

struct Run<'a> {
    dir: PathBuf,
    plan: &'a Plan,
    data_cfg: Config,
}

impl Run<'_> {
    fn data(&self) -> Result<Datasets> {
        Datasets::load(&self.dir.join("data"), &self.data_cfg)
    }

    fn gen_data(&self) -> Result<()> {
        generate_data(&self.data_cfg)?.save(&self.dir.join("data"))
    }

    fn train(&self) -> Result<Value> {
        let data = self.data()?;
        let training = data.training();
        let shape = data.snapshot_shape().to_vec();
        fs::create_dir_all(self.dir.join("models"))?;
        let mut out = BTreeMap::new();
        for (tag, cfg) in &self.plan.interpolators {
            let trained = train_interpolator(&training, init_interpolator(cfg, &shape)?, &cfg.interpolator_training()?)?;
            let mut model = trained.model;
            model.freeze();
            model.save(&model_stem(&self.dir, tag))?;
            write_history(&self.dir, tag, &trained.history)?;
            out.insert(tag.clone(), history_summary(&trained.history, trained.best_epoch));
        }
        for j in &self.plan.forecasters {
            let interp = InterpolatorModel::load(&model_stem(&self.dir, &j.interpolator))?;
            let init = init_forecaster(&j.cfg, &shape, j.cfg.conditioning)?;
            let trained = train_forecaster(&training, &interp, init, &j.cfg.forecaster_training()?)?;
            trained.model.save(&model_stem(&self.dir, &j.tag))?;
            write_history(&self.dir, &j.tag, &trained.history)?;
            out.insert(j.tag.clone(), history_summary(&trained.history, trained.best_epoch));
        }
        for (tag, cfg) in &self.plan.barebones {
            let trained = train_barebone(&training, init_barebone(cfg, &shape)?, &cfg.barebone_training()?)?;
            trained.model.save(&model_stem(&self.dir, tag))?;
            write_history(&self.dir, tag, &trained.history)?;
            out.insert(tag.clone(), history_summary(&trained.history, trained.best_epoch));
        }
        Ok(json!(out))
    }

    fn split<'d>(&self, data: &'d Datasets, v: &Variant) -> &'d [Trajectory] {
        if v.on_val {
            &data.val
        } else {
            &data.test
        }
    }

    fn sample(&self) -> Result<BTreeMap<String, f64>> {
        let data = self.data()?;
        let mut timing = BTreeMap::new();
        for v in &self.plan.variants {
            let trajs = self.split(&data, v);
            let windows = eval_windows(trajs, v.cfg.horizon, v.cfg.eval_windows)?;
            let (forecasts, secs) = match &v.models {
                ModelRef::Diffusion { forecaster, interpolator, inference_dropout } => {
                    let f = ForecasterModel::load(&model_stem(&self.dir, forecaster))?;
                    let i = InterpolatorModel::load(&model_stem(&self.dir, interpolator))?.with_inference_dropout(*inference_dropout);
                    let method = Method::Diffusion {
                        sampler: v.cfg.sampler,
                        refine: v.cfg.refine,
                        schedule: v.cfg.inference_schedule()?,
                        accelerated: v.cfg.keep_indices()?.is_some(),
                        trace: v.trace,
                    };
                    let models = Models::Diffusion { forecaster: &f, interpolator: &i };
                    forecast_windows(&models, &method, trajs, &windows, v.cfg.members, v.cfg.seed, v.cfg.horizon)?
                }
                ModelRef::Dropout { barebone } | ModelRef::Perturbation { barebone } => {
                    let m = BarebonePredictor::load(&model_stem(&self.dir, barebone))?;
                    let method = match v.models {
                        ModelRef::Dropout { .. } => Method::Dropout,
                        _ => Method::Perturbation { sigma: v.cfg.perturbation_sigma },
                    };
                    forecast_windows(&Models::Barebone(&m), &method, trajs, &windows, v.cfg.members, v.cfg.seed, v.cfg.horizon)?
                }
            };
            fs::create_dir_all(self.dir.join("forecasts").join(&v.name))?;
            for (w, (fc, &(k, t))) in forecasts.iter().zip(&windows).enumerate() {
                write_forecast(&forecast_path(&self.dir, &v.name, w), fc, &trajs[k], k, t)?;
                if v.trace {
                    write_trace(&trace_path(&self.dir, &v.name, w), fc, &trajs[k])?;
                }
            }
            timing.insert(v.name.clone(), secs);
        }
        Ok(timing)
    }

    fn evaluate(&self, timing: &BTreeMap<String, f64>) -> Result<Value> {
        let mut out = serde_json::Map::new();
        if self.plan.ode_order {
            let r = measure_error_order(&OrderConfig::default())?;
            let mut w = BufWriter::new(File::create(self.dir.join("ode_order.csv"))?);
            r.write_csv(&mut w)?;
            w.flush()?;
            out.insert("ode-order".into(), json!({ "cold": r.cold.fit, "naive": r.naive.fit }));
        }
        if self.plan.variants.is_empty() {
            return Ok(Value::Object(out));
        }
        let data = self.data()?;
        fs::create_dir_all(self.dir.join("metrics"))?;
        let mut variants = serde_json::Map::new();
        for v in &self.plan.variants {
            let trajs = self.split(&data, v);
            let windows = eval_windows(trajs, v.cfg.horizon, v.cfg.eval_windows)?;
            let forecasts = (0..windows.len())
                .map(|w| read_forecast(&forecast_path(&self.dir, &v.name, w)).map(|(fc, _)| fc))
                .collect::<Result<Vec<_>>>()?;
            let report = score_windows(&forecasts, trajs, &windows, timing.get(&v.name).copied().unwrap_or(0.0))?;
            let mut w = BufWriter::new(File::create(self.dir.join("metrics").join(format!("{}.csv", v.name)))?);
            report.write_csv(&mut w)?;
            w.flush()?;
            let fc0 = &forecasts[0];
            variants.insert(
                v.name.clone(),
                json!({
                    "crps": report.crps,
                    "mse": report.mse,
                    "ssr": report.ssr.map(|s| if s.is_finite() { json!(s) } else { json!("inf") }),
                    "members": report.members,
                    "windows": windows.len(),
                    "forward_passes": fc0.passes.total(),
                    "passes": fc0.passes,
                    "flags": fc0.flags,
                    "sampler": fc0.sampler,
                }),
            );
        }
        out.insert("variants".into(), Value::Object(variants));
        if let Some(name) = &self.plan.step_vs_crps {
            let v = self.plan.variants.iter().find(|v| &v.name == name).expect("trace variant");
            let trajs = self.split(&data, v);
            let windows = eval_windows(trajs, v.cfg.horizon, v.cfg.eval_windows)?;
            let curve = step_crps_curve(&self.dir, name, trajs, &windows, v.cfg.horizon)?;
            let mut w = BufWriter::new(File::create(self.dir.join("step_crps.csv"))?);
            writeln!(w, "n,crps")?;
            for (n, c) in curve.iter().enumerate() {
                writeln!(w, "{n},{c}")?;
            }
            w.flush()?;
            let steps: Vec<f64> = (0..curve.len()).map(|n| n as f64).collect();
            let s = spearman(&steps, &curve)?;
            out.insert("step-vs-crps".into(), json!({ "curve": curve, "spearman": s }));
        }
        Ok(Value::Object(out))
    }
}

fn history_summary(h: &LossHistory, best_epoch: usize) -> Value {
    json!({
        "epochs": h.records.len().saturating_sub(1),
        "initial_val_loss": h.initial().map(|r| r.val_loss),
        "best_val_loss": h.best_val_loss(),
        "best_epoch": best_epoch,
    })
}

/// Stores the per-step forecasts of `x_{t+h}` as `(M, N, snapshot...)`.
fn write_trace(path: &Path, fc: &EnsembleForecast, source: &Trajectory) -> Result<()> {
    let per_member = fc
        .members
        .iter()
        .map(|m| Tensor::stack(&m.horizon_trace.iter().collect::<Vec<_>>()))
        .collect::<Result<Vec<_>>>()?;
    let t = Tensor::stack(&per_member.iter().collect::<Vec<_>>())?;
    let mut w = BufWriter::new(File::create(path)?);
    write_dyft(&mut w, &source.system_id, source.dt, &t, &source.normalization)?;
    w.flush()?;
    Ok(())
}

/// Mean CRPS of the step-`n` forecast of `x_{t+h}` over windows.
fn step_crps_curve(dir: &Path, variant: &str, trajs: &[Trajectory], windows: &[(usize, usize)], h: usize) -> Result<Vec<f64>> {
    let mut sums: Vec<f64> = Vec::new();
    for (w, &(k, t)) in windows.iter().enumerate() {
        let path = trace_path(dir, variant, w);
        let f = File::open(&path).map_err(|_| Error::MissingInput(path.clone()))?;
        let (_, _, values, _) = read_dyft(BufReader::new(f))?;
        let dims = values.shape().to_vec();
        let members = values.unstack(&dims[1..])?;
        let steps = dims[1];
        if sums.is_empty() {
            sums = vec![0.0; steps];
        }
        let truth = trajs[k].snapshot(t + h);
        let per_step: Vec<Vec<Tensor>> = members.iter().map(|m| m.unstack(&dims[2..])).collect::<Result<_>>()?;
        for (n, s) in sums.iter_mut().enumerate() {
            let ens: Vec<&[f64]> = per_step.iter().map(|m| m[n].data()).collect();
            *s += crps(&ens, truth)?;
        }
    }
    Ok(sums.into_iter().map(|s| s / windows.len() as f64).collect())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text)?;
    Ok(())
}

/// Runs the requested stages of a built-in experiment for every seed.
/// Stages read their inputs from the run directory, so a stage can be rerun
/// on its own once earlier stages have produced their artifacts. Wall-clock
/// timings go to `timing.json`; every other artifact is a function of the
/// spec and seed alone.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<Value> {
    let base = spec.config.with_overrides(&spec.overrides)?;
    base.validate()?;
    plan(&spec.name, &base)?;
    if spec.seeds.is_empty() {
        return Err(invalid("experiment needs at least one seed"));
    }
    let mut stages = spec.stages.clone();
    stages.sort();
    stages.dedup();
    fs::create_dir_all(&spec.out_dir)?;

    let run_all = || -> Result<Value> {
        let mut results = serde_json::Map::new();
        for &seed in &spec.seeds {
            if stages.is_empty() {
                continue;
            }
            let cfg = Config { seed, ..base.clone() };
            let p = plan(&spec.name, &cfg)?;
            let dir = spec.out_dir.join(format!("seed-{seed}"));
            fs::create_dir_all(&dir)?;
            write_text(&dir.join("config.toml"), &cfg.to_toml()?)?;
            let manifest = json!({
                "experiment": spec.name,
                "seed": seed,
                "stages": stages,
                "version": env!("CARGO_PKG_VERSION"),
            });
            write_text(&dir.join("manifest.json"), &(serde_json::to_string_pretty(&manifest).expect("json") + "\n"))?;
            let run = Run { dir: dir.clone(), plan: &p, data_cfg: data_config(&cfg, &p) };
            let mut res = serde_json::Map::new();
            // the ODE study needs neither data nor models
            let needs_data = !p.variants.is_empty();
            if stages.contains(&Stage::GenData) && needs_data {
                run.gen_data()?;
            }
            if stages.contains(&Stage::Train) && needs_data {
                res.insert("training".into(), run.train()?);
            }
            let timing_path = dir.join("timing.json");
            if stages.contains(&Stage::Sample) && needs_data {
                let timing = run.sample()?;
                write_text(&timing_path, &(serde_json::to_string_pretty(&timing).expect("json") + "\n"))?;
            }
            if stages.contains(&Stage::Evaluate) {
                let timing: BTreeMap<String, f64> = fs::read_to_string(&timing_path)
                    .ok()
                    .and_then(|t| serde_json::from_str(&t).ok())
                    .unwrap_or_default();
                res.insert("evaluation".into(), run.evaluate(&timing)?);
            }
            results.insert(seed.to_string(), Value::Object(res));
        }
        Ok(json!({
            "experiment": spec.name,
            "version": env!("CARGO_PKG_VERSION"),
            "stages": stages,
            "seeds": spec.seeds,
            "results": results,
        }))
    };
    let summary = match spec.jobs {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| invalid(e.to_string()))?
            .install(run_all)?,
        None => run_all()?,
    };
    write_text(&spec.out_dir.join("summary.json"), &(serde_json::to_string_pretty(&summary).expect("json") + "\n"))?;
    Ok(summary)
}
