//! Small statistics helpers: least-squares lines and Spearman correlation.

use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    /// Standard error of the slope.
    pub slope_se: f64,
    pub n: usize,
}

impl LinearFit {
    /// Two-sided confidence interval of the slope at `level` (e.g. 0.95).
    pub fn slope_ci(&self, level: f64) -> (f64, f64) {
        if self.n <= 2 || self.slope_se == 0.0 {
            return (self.slope, self.slope);
        }
        let t = StudentsT::new(0.0, 1.0, (self.n - 2) as f64).expect("positive dof");
        let q = t.inverse_cdf(0.5 + level / 2.0);
        (self.slope - q * self.slope_se, self.slope + q * self.slope_se)
    }
}

/// Ordinary least squares `y ≈ slope·x + intercept`.
pub fn fit_line(x: &[f64], y: &[f64]) -> Result<LinearFit> {
    let n = x.len();
    if n != y.len() {
        return Err(invalid("fit_line: x and y differ in length"));
    }
    if n < 2 {
        return Err(invalid("fit_line needs at least two points"));
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(invalid("fit_line: all x values are equal"));
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let slope_se = if n > 2 {
        let rss: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
        (rss / (n - 2) as f64 / sxx).sqrt()
    } else {
        0.0
    };
    Ok(LinearFit { slope, intercept, slope_se, n })
}

/// Ranks starting at 1, ties get their average rank.
pub fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && v[idx[end]] == v[idx[start]] {
            end += 1;
        }
        let avg = (start + end + 1) as f64 / 2.0;
        for &k in &idx[start..end] {
            out[k] = avg;
        }
        start = end;
    }
    out
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct Spearman {
    pub rho: f64,
    /// One-sided p-value against the alternative `rho < 0`.
    pub p_negative: f64,
    /// One-sided p-value against the alternative `rho > 0`.
    pub p_positive: f64,
    pub n: usize,
}

/// Spearman rank correlation with the t approximation for p-values.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<Spearman> {
    let n = x.len();
    if n != y.len() {
        return Err(invalid("spearman: x and y differ in length"));
    }
    if n < 3 {
        return Err(invalid("spearman needs at least three points"));
    }
    let rho = pearson(&ranks(x), &ranks(y));
    let dof = (n - 2) as f64;
    let p_negative = if rho <= -1.0 {
        0.0
    } else if rho >= 1.0 {
        1.0
    } else {
        let t = rho * (dof / (1.0 - rho * rho)).sqrt();
        StudentsT::new(0.0, 1.0, dof).expect("positive dof").cdf(t)
    };
    Ok(Spearman { rho, p_negative, p_positive: 1.0 - p_negative, n })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_line() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v - 1.0).collect();
        let f = fit_line(&x, &y).unwrap();
        assert!((f.slope - 2.0).abs() < 1e-12 && (f.intercept + 1.0).abs() < 1e-12);
        assert!(f.slope_se < 1e-12);
        let (lo, hi) = f.slope_ci(0.95);
        assert!(lo <= 2.0 + 1e-9 && hi >= 2.0 - 1e-9);
    }

    #[test]
    fn ci_matches_reference_values() {
        // Reference from an independent least-squares routine.
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let y = [1.1, 1.9, 3.2, 3.9, 5.0];
        let f = fit_line(&x, &y).unwrap();
        assert!((f.slope - 0.98).abs() < 1e-12);
        assert!((f.slope_se - 0.046188021535).abs() < 1e-9);
        let (lo, hi) = f.slope_ci(0.95);
        assert!((lo - 0.833009101517).abs() < 1e-8);
        assert!((hi - 1.126990898483).abs() < 1e-8);
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(ranks(&[10.0, 20.0, 10.0, 5.0]), vec![2.5, 4.0, 2.5, 1.0]);
    }

    #[test]
    fn spearman_monotone() {
        let x: Vec<f64> = (0..10).map(f64::from).collect();
        let down: Vec<f64> = x.iter().map(|v| (-v).exp()).collect();
        let s = spearman(&x, &down).unwrap();
        assert_eq!(s.rho, -1.0);
        assert_eq!(s.p_negative, 0.0);
        let up = spearman(&x, &x).unwrap();
        assert_eq!(up.rho, 1.0);
        assert!(spearman(&x[..2], &x[..2]).is_err());
    }

    #[test]
    fn spearman_p_value_reference() {
        // Reference: rho = 0.781818, one-sided p = 0.0037735 (t with 8 dof).
        let x: Vec<f64> = (1..=10).map(f64::from).collect();
        let y = [2.0, 1.0, 4.0, 3.0, 7.0, 10.0, 5.0, 6.0, 9.0, 8.0];
        let s = spearman(&x, &y).unwrap();
        let d2: f64 = x.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum();
        let rho = 1.0 - 6.0 * d2 / (10.0 * 99.0);
        assert!((s.rho - rho).abs() < 1e-12);
        assert!((rho - 0.781818181818).abs() < 1e-9);
        assert!((s.p_positive - 0.0037735038905).abs() < 1e-9);
        assert!((s.p_negative + s.p_positive - 1.0).abs() < 1e-15);
    }
}
