//! The reverse process: cold and naive sampling, ensembles, refinement,
//! autoregressive rollout and temporal upsampling.

use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::nets::{make_conditioning, Forecast, Interpolate, InterpolatorModel};
use crate::rng::{member_seed, member_stream, substream, DyRng};
use crate::schedule::Schedule;
use crate::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sampler {
    Cold,
    Naive,
}

impl std::str::FromStr for Sampler {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cold" => Ok(Self::Cold),
            "naive" => Ok(Self::Naive),
            other => Err(invalid(format!("unknown sampler {other:?}"))),
        }
    }
}

/// Inputs to one ensemble forecast.
#[derive(Debug, Clone)]
pub struct SampleRequest {
    pub x_t: Tensor,
    pub schedule: Schedule,
    /// Output times `J`, sorted, in `(0, h]`. Always includes `h`.
    pub output_times: Vec<f64>,
    pub refine: bool,
    pub members: usize,
    pub base_seed: u64,
    /// Marks forecasts made with a schedule reduced from the trained one.
    pub accelerated: bool,
    /// Keep every intermediate forecast of `x_{t+h}`.
    pub record_trace: bool,
    pub parallel: bool,
}

impl SampleRequest {
    /// Default output times `{1, ..., h-1} ∪ {h}`, refinement off.
    pub fn new(x_t: Tensor, schedule: Schedule, members: usize, base_seed: u64) -> Self {
        let h = schedule.horizon();
        Self {
            x_t,
            output_times: (1..=h).map(|j| j as f64).collect(),
            schedule,
            refine: false,
            members,
            base_seed,
            accelerated: false,
            record_trace: false,
            parallel: false,
        }
    }

    pub fn with_output_times(mut self, mut times: Vec<f64>) -> Self {
        let h = self.schedule.horizon() as f64;
        times.push(h);
        times.sort_by(f64::total_cmp);
        times.dedup();
        self.output_times = times;
        self
    }

    pub fn with_refinement(mut self, refine: bool) -> Self {
        self.refine = refine;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.members == 0 {
            return Err(invalid("ensemble needs at least one member"));
        }
        if !self.x_t.is_finite() {
            return Err(invalid("initial conditions must be finite"));
        }
        let h = self.schedule.horizon() as f64;
        if self.output_times.last() != Some(&h) {
            return Err(invalid("output times must end at the horizon"));
        }
        for w in self.output_times.windows(2) {
            if !(w[0] < w[1]) {
                return Err(invalid("output times must be strictly increasing"));
            }
        }
        for &j in &self.output_times {
            if !(j > 0.0 && j <= h) {
                return Err(invalid(format!("output time {j} outside (0, {h}]")));
            }
            if j < h && !self.refine && !self.schedule.contains(j) {
                return Err(invalid(format!(
                    "output time {j} is not on the schedule; enable refinement to produce it"
                )));
            }
        }
        Ok(())
    }
}

/// One sampled trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Member {
    pub seed: u64,
    /// Aligned with [`EnsembleForecast::times`].
    pub states: Vec<Tensor>,
    /// Forecast of `x_{t+h}` after each diffusion step, when requested.
    pub horizon_trace: Vec<Tensor>,
}

#[derive(Debug, Clone, Default, PartialEq, serde::Serialize)]
pub struct SampleFlags {
    pub refined: bool,
    pub accelerated: bool,
    /// Interpolation times in `(0, 1)` that were queried.
    pub outside_training_regime: Vec<f64>,
}

/// Network evaluations per member, using the 1 forecaster + 2 interpolator
/// passes per diffusion step accounting of cold sampling.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize)]
pub struct ForwardPasses {
    pub forecaster: usize,
    pub interpolator: usize,
    pub refinement: usize,
}

impl ForwardPasses {
    pub fn total(&self) -> usize {
        self.forecaster + self.interpolator + self.refinement
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleForecast {
    pub initial: Tensor,
    pub horizon: usize,
    pub times: Vec<f64>,
    pub members: Vec<Member>,
    /// Diffusion schedule; `None` for non-diffusion baselines.
    pub schedule: Option<Schedule>,
    /// `None` for non-diffusion baselines.
    pub sampler: Option<Sampler>,
    pub flags: SampleFlags,
    pub passes: ForwardPasses,
}

impl EnsembleForecast {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Member states at output index `k`.
    pub fn at(&self, k: usize) -> Vec<&Tensor> {
        self.members.iter().map(|m| &m.states[k]).collect()
    }

    /// Index of output time `j`.
    pub fn time_index(&self, j: f64) -> Option<usize> {
        self.times.iter().position(|&t| t == j)
    }

    /// Stacked values `(M, |J|, snapshot...)`.
    pub fn to_tensor(&self) -> Result<Tensor> {
        let per_member: Vec<Tensor> = self
            .members
            .iter()
            .map(|m| Tensor::stack(&m.states.iter().collect::<Vec<_>>()))
            .collect::<Result<_>>()?;
        Tensor::stack(&per_member.iter().collect::<Vec<_>>())
    }
}

fn check_finite(x: &Tensor, step: usize) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::SamplingNonFinite { step })
    }
}

/// One cold-sampling update `I(x_t, x_h, i_{n+1}) - I(x_t, x_h, i_n) + x_{i_n}`,
/// exactly as the sampler loop applies it.
pub fn cold_update<I: Interpolate + ?Sized>(
    interp: &I,
    x_t: &Tensor,
    x_h: &Tensor,
    x_cur: &Tensor,
    i_cur: f64,
    i_next: f64,
    rng: &mut DyRng,
) -> Result<Tensor> {
    let ahead = interp.interpolate_at(x_t, x_h, i_next, rng)?;
    let here = interp.interpolate_at(x_t, x_h, i_cur, rng)?;
    let data = ahead
        .data()
        .iter()
        .zip(here.data())
        .zip(x_cur.data())
        .map(|((a, b), x)| a - b + x)
        .collect();
    Tensor::new(ahead.shape().to_vec(), data)
}

struct Window {
    /// Aligned with the requested output times.
    states: Vec<Tensor>,
    trace: Vec<Tensor>,
}

#[allow(clippy::too_many_arguments)]
fn sample_window<F, I>(
    forecaster: &F,
    interp: &I,
    x_t: &Tensor,
    schedule: &Schedule,
    times: &[f64],
    refine: bool,
    sampler: Sampler,
    record_trace: bool,
    rng: &mut DyRng,
) -> Result<Window>
where
    F: Forecast + ?Sized,
    I: Interpolate + ?Sized,
{
    let n_steps = schedule.len();
    let h = schedule.horizon() as f64;
    let mut x_cur = x_t.clone();
    let mut intermediates: Vec<Tensor> = Vec::with_capacity(n_steps);
    let mut trace = Vec::new();
    let mut x_h = x_t.clone();
    for n in 0..n_steps {
        let i_n = schedule.time(n);
        let cond = make_conditioning(forecaster.conditioning(), x_t, n, n_steps, rng)?;
        x_h = forecaster.forecast_at(&x_cur, i_n, cond.as_ref())?;
        check_finite(&x_h, n)?;
        if record_trace {
            trace.push(x_h.clone());
        }
        if n + 1 < n_steps {
            let i_next = schedule.time(n + 1);
            let next = match sampler {
                Sampler::Cold => cold_update(interp, x_t, &x_h, &x_cur, i_n, i_next, rng)?,
                Sampler::Naive => interp.interpolate_at(x_t, &x_h, i_next, rng)?,
            };
            check_finite(&next, n)?;
            intermediates.push(next.clone());
            x_cur = next;
        }
    }
    let mut states = Vec::with_capacity(times.len());
    for &j in times {
        let state = if j == h {
            x_h.clone()
        } else if refine {
            let refined = interp.interpolate_at(x_t, &x_h, j, rng)?;
            check_finite(&refined, n_steps)?;
            refined
        } else {
            let n = schedule.position(j).ok_or_else(|| invalid(format!("output time {j} not on schedule")))?;
            intermediates[n - 1].clone()
        };
        states.push(state);
    }
    Ok(Window { states, trace })
}

fn flags_for(schedule: &Schedule, times: &[f64], refine: bool, accelerated: bool) -> SampleFlags {
    let mut outside: Vec<f64> = schedule
        .steps()
        .iter()
        .copied()
        .filter(|&i| InterpolatorModel::is_outside_training_regime(i))
        .collect();
    if refine {
        outside.extend(times.iter().copied().filter(|&j| InterpolatorModel::is_outside_training_regime(j)));
    }
    outside.sort_by(f64::total_cmp);
    outside.dedup();
    SampleFlags { refined: refine, accelerated, outside_training_regime: outside }
}

fn passes_for(schedule: &Schedule, times: &[f64], refine: bool, sampler: Sampler) -> ForwardPasses {
    let n = schedule.len();
    ForwardPasses {
        forecaster: n,
        interpolator: match sampler {
            Sampler::Cold => 2 * n,
            Sampler::Naive => n,
        },
        refinement: if refine { times.iter().filter(|&&j| j < schedule.horizon() as f64).count() } else { 0 },
    }
}

fn map_members<T: Send>(parallel: bool, members: usize, f: impl Fn(usize) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
    if parallel {
        (0..members).into_par_iter().map(f).collect()
    } else {
        (0..members).map(f).collect()
    }
}

fn check_horizons<F: Forecast + ?Sized, I: Interpolate + ?Sized>(f: &F, i: &I, schedule: &Schedule) -> Result<()> {
    if f.horizon() != schedule.horizon() || i.horizon() != schedule.horizon() {
        return Err(invalid(format!(
            "horizon mismatch: forecaster {}, interpolator {}, schedule {}",
            f.horizon(),
            i.horizon(),
            schedule.horizon()
        )));
    }
    Ok(())
}

/// Ensemble forecast with the chosen sampler. Member `m` draws from the
/// stream of seed `member_seed(base_seed, m)`.
pub fn sample<F, I>(forecaster: &F, interp: &I, req: &SampleRequest, sampler: Sampler) -> Result<EnsembleForecast>
where
    F: Forecast + ?Sized,
    I: Interpolate + ?Sized,
{
    req.validate()?;
    check_horizons(forecaster, interp, &req.schedule)?;
    let members = map_members(req.parallel, req.members, |m| {
        let seed = member_seed(req.base_seed, m);
        let mut rng = member_stream(seed);
        let w = sample_window(
            forecaster,
            interp,
            &req.x_t,
            &req.schedule,
            &req.output_times,
            req.refine,
            sampler,
            req.record_trace,
            &mut rng,
        )?;
        Ok(Member { seed, states: w.states, horizon_trace: w.trace })
    })?;
    Ok(EnsembleForecast {
        initial: req.x_t.clone(),
        horizon: req.schedule.horizon(),
        times: req.output_times.clone(),
        members,
        schedule: Some(req.schedule.clone()),
        sampler: Some(sampler),
        flags: flags_for(&req.schedule, &req.output_times, req.refine, req.accelerated),
        passes: passes_for(&req.schedule, &req.output_times, req.refine, sampler),
    })
}

/// Cold sampling: each step moves the current state by the difference of two
/// interpolations toward the latest forecast of `x_{t+h}`.
pub fn cold_sample<F, I>(forecaster: &F, interp: &I, req: &SampleRequest) -> Result<EnsembleForecast>
where
    F: Forecast + ?Sized,
    I: Interpolate + ?Sized,
{
    sample(forecaster, interp, req, Sampler::Cold)
}

/// Naive sampling: each step replaces the state by an interpolation toward
/// the latest forecast, without the correction terms.
pub fn naive_sample<F, I>(forecaster: &F, interp: &I, req: &SampleRequest) -> Result<EnsembleForecast>
where
    F: Forecast + ?Sized,
    I: Interpolate + ?Sized,
{
    sample(forecaster, interp, req, Sampler::Naive)
}

/// Forecasts `total` steps by chaining windows of length `h`: each member's
/// forecast of `x_{t+h}` becomes its next initial condition. The last window
/// is truncated to the remaining steps. Output times are `1..=total`
/// (relative to `t`) when `req.output_times` is the default integer set.
pub fn autoregressive_rollout<F, I>(
    forecaster: &F,
    interp: &I,
    total: usize,
    req: &SampleRequest,
    sampler: Sampler,
) -> Result<EnsembleForecast>
where
    F: Forecast + ?Sized,
    I: Interpolate + ?Sized,
{
    if total == 0 {
        return Err(invalid("rollout length must be at least 1"));
    }
    req.validate()?;
    check_horizons(forecaster, interp, &req.schedule)?;
    let h = req.schedule.horizon();
    let windows = total.div_ceil(h);
    let mut times = Vec::new();
    for w in 0..windows {
        for &j in &req.output_times {
            let abs = (w * h) as f64 + j;
            if abs <= total as f64 {
                times.push(abs);
            }
        }
    }
    let members = map_members(req.parallel, req.members, |m| {
        let seed = member_seed(req.base_seed, m);
        let mut rng = member_stream(seed);
        let mut x0 = req.x_t.clone();
        let mut states = Vec::with_capacity(times.len());
        let mut trace = Vec::new();
        for w in 0..windows {
            let win = sample_window(
                forecaster,
                interp,
                &x0,
                &req.schedule,
                &req.output_times,
                req.refine,
                sampler,
                req.record_trace,
                &mut rng,
            )
            .map_err(|e| match e {
                Error::SamplingNonFinite { step } => Error::SamplingNonFinite { step: w * req.schedule.len() + step },
                other => other,
            })?;
            for (&j, s) in req.output_times.iter().zip(&win.states) {
                if (w * h) as f64 + j <= total as f64 {
                    states.push(s.clone());
                }
            }
            trace.extend(win.trace);
            x0 = win.states.last().expect("horizon output").clone();
        }
        Ok(Member { seed, states, horizon_trace: trace })
    })?;
    let mut passes = passes_for(&req.schedule, &req.output_times, req.refine, sampler);
    passes.forecaster *= windows;
    passes.interpolator *= windows;
    passes.refinement *= windows;
    Ok(EnsembleForecast {
        initial: req.x_t.clone(),
        horizon: h,
        times,
        members,
        schedule: Some(req.schedule.clone()),
        sampler: Some(sampler),
        flags: flags_for(&req.schedule, &req.output_times, req.refine, req.accelerated),
        passes,
    })
}

/// Adds output times by interpolating between the initial conditions and
/// each member's forecast of `x_{t+h}`. Times already present are kept as is.
pub fn upsample_outputs<I: Interpolate + ?Sized>(
    interp: &I,
    forecast: &EnsembleForecast,
    fine_times: &[f64],
) -> Result<EnsembleForecast> {
    let h = forecast.horizon as f64;
    let hk = forecast
        .time_index(h)
        .ok_or_else(|| invalid("forecast does not contain the horizon state"))?;
    let mut new_times: Vec<f64> = Vec::new();
    for &j in fine_times {
        if forecast.time_index(j).is_some() {
            continue;
        }
        if !(j > 0.0 && j < h) {
            return Err(invalid(format!("upsampling time {j} outside (0, {h})")));
        }
        new_times.push(j);
    }
    new_times.sort_by(f64::total_cmp);
    new_times.dedup();
    let mut times = forecast.times.clone();
    times.extend(&new_times);
    times.sort_by(f64::total_cmp);

    let members = forecast
        .members
        .iter()
        .map(|m| {
            let mut rng = substream(m.seed, "upsample");
            let x_h = &m.states[hk];
            let mut extra = Vec::with_capacity(new_times.len());
            for &j in &new_times {
                extra.push((j, interp.interpolate_at(&forecast.initial, x_h, j, &mut rng)?));
            }
            let states = times
                .iter()
                .map(|&j| match forecast.time_index(j) {
                    Some(k) => m.states[k].clone(),
                    None => extra.iter().find(|(t, _)| *t == j).expect("new time").1.clone(),
                })
                .collect();
            Ok(Member { seed: m.seed, states, horizon_trace: m.horizon_trace.clone() })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut flags = forecast.flags.clone();
    flags
        .outside_training_regime
        .extend(new_times.iter().copied().filter(|&j| InterpolatorModel::is_outside_training_regime(j)));
    flags.outside_training_regime.sort_by(f64::total_cmp);
    flags.outside_training_regime.dedup();
    let mut passes = forecast.passes;
    passes.refinement += new_times.len();
    Ok(EnsembleForecast { times, members, flags, passes, ..forecast.clone() })
}
