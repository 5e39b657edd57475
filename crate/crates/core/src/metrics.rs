//! Ensemble verification: CRPS, MSE of the ensemble mean and spread-skill
//! ratio, per output time and averaged over the horizon.

use std::io::Write;

use rayon::prelude::*;

use crate::dynamics::Trajectory;
use crate::error::{invalid, Error, Result};
use crate::sampling::EnsembleForecast;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CrpsEstimator {
    /// `(1/M)Σ|x_i - y| - (1/(2M²))ΣΣ|x_i - x_j|`.
    #[default]
    Textbook,
    /// Same with the `1/(2M(M-1))` spread term; needs `M ≥ 2`.
    Fair,
}

fn check_ensemble(members: &[&[f64]], truth: &[f64]) -> Result<()> {
    if members.is_empty() {
        return Err(invalid("empty ensemble"));
    }
    if truth.is_empty() {
        return Err(invalid("no elements to score"));
    }
    if let Some(m) = members.iter().find(|m| m.len() != truth.len()) {
        return Err(Error::Shape {
            op: "metrics",
            detail: format!("member has {} elements, truth has {}", m.len(), truth.len()),
        });
    }
    Ok(())
}

/// CRPS averaged over elements. `members[m][e]` is member `m` at element `e`.
pub fn crps_with(members: &[&[f64]], truth: &[f64], estimator: CrpsEstimator) -> Result<f64> {
    check_ensemble(members, truth)?;
    let m = members.len();
    let spread_norm = match estimator {
        CrpsEstimator::Textbook => (m * m) as f64,
        CrpsEstimator::Fair if m >= 2 => (m * (m - 1)) as f64,
        CrpsEstimator::Fair => return Err(invalid("fair CRPS needs at least two members")),
    };
    let mut buf = vec![0.0; m];
    let mut total = 0.0;
    for (e, &y) in truth.iter().enumerate() {
        for (b, member) in buf.iter_mut().zip(members) {
            *b = member[e];
        }
        let skill: f64 = buf.iter().map(|x| (x - y).abs()).sum::<f64>() / m as f64;
        buf.sort_by(f64::total_cmp);
        // ΣΣ|x_i - x_j| = 2 Σ_k (2k - M - 1) x_(k) over sorted values, k from 1
        let pairs: f64 = buf
            .iter()
            .enumerate()
            .map(|(k, x)| (2.0 * (k + 1) as f64 - m as f64 - 1.0) * x)
            .sum();
        total += skill - pairs / spread_norm;
    }
    Ok(total / truth.len() as f64)
}

pub fn crps(members: &[&[f64]], truth: &[f64]) -> Result<f64> {
    crps_with(members, truth, CrpsEstimator::Textbook)
}

/// Accumulated as offsets from the first member, so an ensemble of identical
/// members has exactly that value as its mean (and zero spread).
fn ensemble_mean(members: &[&[f64]], e: usize) -> f64 {
    let x0 = members[0][e];
    x0 + members.iter().map(|m| m[e] - x0).sum::<f64>() / members.len() as f64
}

/// Mean squared error of the member mean.
pub fn mse_ensemble_mean(members: &[&[f64]], truth: &[f64]) -> Result<f64> {
    check_ensemble(members, truth)?;
    let sum: f64 = truth.iter().enumerate().map(|(e, y)| (ensemble_mean(members, e) - y).powi(2)).sum();
    Ok(sum / truth.len() as f64)
}

/// Spread-skill ratio with the unbiased ensemble variance. Returns
/// `f64::INFINITY` when the mean is exact but the members disagree, and 0
/// when both spread and skill vanish.
pub fn ssr(members: &[&[f64]], truth: &[f64]) -> Result<f64> {
    check_ensemble(members, truth)?;
    let m = members.len();
    if m < 2 {
        return Err(invalid("spread-skill ratio needs at least two members"));
    }
    let (mut var, mut sq) = (0.0, 0.0);
    for (e, y) in truth.iter().enumerate() {
        let mean = ensemble_mean(members, e);
        var += members.iter().map(|x| (x[e] - mean).powi(2)).sum::<f64>() / (m - 1) as f64;
        sq += (mean - y).powi(2);
    }
    let n = truth.len() as f64;
    let spread = (var / n).sqrt();
    let skill = (sq / n).sqrt();
    Ok(if skill == 0.0 {
        if spread == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        spread / skill
    })
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct TimestepMetrics {
    pub time: f64,
    pub crps: f64,
    pub mse: f64,
    /// `None` for single-member ensembles.
    pub ssr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct MetricsReport {
    pub per_time: Vec<TimestepMetrics>,
    pub crps: f64,
    pub mse: f64,
    pub ssr: Option<f64>,
    pub members: usize,
    /// Elements scored per output time.
    pub elements: usize,
    pub runtime_secs: f64,
    pub estimator: CrpsEstimator,
}

impl MetricsReport {
    /// Builds the report from per-time rows; aggregates are plain means.
    pub fn from_rows(per_time: Vec<TimestepMetrics>, members: usize, elements: usize, runtime_secs: f64) -> Self {
        let n = per_time.len() as f64;
        let crps = per_time.iter().map(|r| r.crps).sum::<f64>() / n;
        let mse = per_time.iter().map(|r| r.mse).sum::<f64>() / n;
        let ssr = per_time
            .iter()
            .map(|r| r.ssr)
            .collect::<Option<Vec<f64>>>()
            .map(|v| v.iter().sum::<f64>() / n);
        Self { per_time, crps, mse, ssr, members, elements, runtime_secs, estimator: CrpsEstimator::Textbook }
    }

    /// CSV with columns `timestep,crps,mse,ssr` and a closing `mean` row.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "timestep,crps,mse,ssr")?;
        let fmt_ssr = |s: Option<f64>| s.map(|v| v.to_string()).unwrap_or_default();
        for r in &self.per_time {
            writeln!(w, "{},{},{},{}", r.time, r.crps, r.mse, fmt_ssr(r.ssr))?;
        }
        writeln!(w, "mean,{},{},{}", self.crps, self.mse, fmt_ssr(self.ssr))?;
        Ok(())
    }

    pub fn summary_json(&self, extra: serde_json::Value) -> serde_json::Value {
        serde_json::json!({
            "members": self.members,
            "elements": self.elements,
            "runtime_secs": self.runtime_secs,
            "estimator": self.estimator,
            "crps": self.crps,
            "mse": self.mse,
            "ssr": self.ssr.map(json_float),
            "extra": extra,
        })
    }
}

/// JSON has no infinity; encode it as a string.
fn json_float(v: f64) -> serde_json::Value {
    if v.is_finite() {
        serde_json::json!(v)
    } else {
        serde_json::json!(v.to_string())
    }
}

/// Scores `forecast` against `truth`, where the forecast started from snapshot
/// `start` of the truth trajectory. Output time `j` is compared with snapshot
/// `start + j`, so every `j` must be an integer inside the trajectory.
pub fn evaluate(
    forecast: &EnsembleForecast,
    truth: &Trajectory,
    start: usize,
    runtime_secs: f64,
) -> Result<MetricsReport> {
    evaluate_with(forecast, truth, start, runtime_secs, CrpsEstimator::Textbook)
}

pub fn evaluate_with(
    forecast: &EnsembleForecast,
    truth: &Trajectory,
    start: usize,
    runtime_secs: f64,
    estimator: CrpsEstimator,
) -> Result<MetricsReport> {
    let bad: Vec<f64> = forecast
        .times
        .iter()
        .copied()
        .filter(|&j| j.fract() != 0.0 || start + j as usize >= truth.len())
        .collect();
    if !bad.is_empty() {
        return Err(Error::Misaligned(bad));
    }
    if forecast.initial.len() != truth.snapshot_len() {
        return Err(Error::Shape {
            op: "evaluate",
            detail: format!(
                "forecast snapshots have {} elements, truth has {}",
                forecast.initial.len(),
                truth.snapshot_len()
            ),
        });
    }
    let m = forecast.len();
    let rows = (0..forecast.times.len())
        .into_par_iter()
        .map(|k| {
            let j = forecast.times[k];
            let y = truth.snapshot(start + j as usize);
            let members: Vec<&[f64]> = forecast.members.iter().map(|mb| mb.states[k].data()).collect();
            Ok(TimestepMetrics {
                time: j,
                crps: crps_with(&members, y, estimator)?,
                mse: mse_ensemble_mean(&members, y)?,
                ssr: if m >= 2 { Some(ssr(&members, y)?) } else { None },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut report = MetricsReport::from_rows(rows, m, truth.snapshot_len(), runtime_secs);
    report.estimator = estimator;
    Ok(report)
}

/// Averages reports element-wise over several forecasts with the same times.
pub fn average_reports(reports: &[MetricsReport]) -> Result<MetricsReport> {
    let first = reports.first().ok_or_else(|| invalid("no reports to average"))?;
    let n = reports.len() as f64;
    let mut rows = Vec::with_capacity(first.per_time.len());
    for (k, r0) in first.per_time.iter().enumerate() {
        if reports.iter().any(|r| r.per_time.get(k).map(|x| x.time) != Some(r0.time)) {
            return Err(invalid("reports have different output times"));
        }
        rows.push(TimestepMetrics {
            time: r0.time,
            crps: reports.iter().map(|r| r.per_time[k].crps).sum::<f64>() / n,
            mse: reports.iter().map(|r| r.per_time[k].mse).sum::<f64>() / n,
            ssr: reports
                .iter()
                .map(|r| r.per_time[k].ssr)
                .collect::<Option<Vec<f64>>>()
                .map(|v| v.iter().sum::<f64>() / n),
        });
    }
    let runtime = reports.iter().map(|r| r.runtime_secs).sum::<f64>();
    let mut out = MetricsReport::from_rows(rows, first.members, first.elements, runtime);
    out.estimator = first.estimator;
    Ok(out)
}
