//! Maps from diffusion step `n` to dynamical time `i_n`.

use crate::error::{invalid, Result};

/// `[i_0, ..., i_{N-1}]` with `0 = i_0 < i_1 < ... < i_{N-1} < h`.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    horizon: usize,
    steps: Vec<f64>,
    aux_count: usize,
}

impl Schedule {
    /// Validates an explicit step list.
    pub fn from_steps(horizon: usize, steps: Vec<f64>, aux_count: usize) -> Result<Self> {
        if horizon < 1 {
            return Err(invalid("horizon must be at least 1"));
        }
        if steps.first() != Some(&0.0) {
            return Err(invalid("schedule must start at i_0 = 0"));
        }
        for w in steps.windows(2) {
            if !(w[0] < w[1]) {
                return Err(invalid(format!("schedule is not strictly increasing at {} -> {}", w[0], w[1])));
            }
        }
        let last = *steps.last().unwrap();
        if !(last < horizon as f64) {
            return Err(invalid(format!("schedule step {last} is not below horizon {horizon}")));
        }
        Ok(Self { horizon, steps, aux_count })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn steps(&self) -> &[f64] {
        &self.steps
    }

    /// Number of diffusion steps `N`.
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Auxiliary fractional steps still present.
    pub fn aux_count(&self) -> usize {
        self.aux_count
    }

    /// `i_n`, with `i_N := h` so the step after the last lands on the horizon.
    pub fn time(&self, n: usize) -> f64 {
        if n == self.steps.len() {
            self.horizon as f64
        } else {
            self.steps[n]
        }
    }

    pub fn contains(&self, i: f64) -> bool {
        self.steps.contains(&i)
    }

    /// Index `n` with `i_n == i`.
    pub fn position(&self, i: f64) -> Option<usize> {
        self.steps.iter().position(|&s| s == i)
    }
}

/// `[0] ++ [j / (k+1) for j in 1..=k] ++ [1, ..., h-1]`, so `N = h + k`.
pub fn make_schedule(h: usize, k: usize) -> Result<Schedule> {
    if h < 1 {
        return Err(invalid("horizon must be at least 1"));
    }
    let mut steps = Vec::with_capacity(h + k);
    steps.push(0.0);
    steps.extend((1..=k).map(|j| j as f64 / (k + 1) as f64));
    steps.extend((1..h).map(|j| j as f64));
    Schedule::from_steps(h, steps, k)
}

/// Keeps only the steps at the given indices. Index 0 must be kept since
/// the reverse process starts from the initial conditions.
pub fn subset_schedule(s: &Schedule, keep: &[usize]) -> Result<Schedule> {
    if !keep.contains(&0) {
        return Err(invalid("kept indices must include 0"));
    }
    let mut keep = keep.to_vec();
    keep.sort_unstable();
    keep.dedup();
    if let Some(&bad) = keep.iter().find(|&&n| n >= s.len()) {
        return Err(invalid(format!("index {bad} outside schedule of length {}", s.len())));
    }
    let steps: Vec<f64> = keep.iter().map(|&n| s.steps[n]).collect();
    let aux = steps.iter().filter(|&&i| i > 0.0 && i < 1.0).count();
    Schedule::from_steps(s.horizon, steps, aux)
}

/// Indices of the integer-valued steps `{0, 1, ..., h-1}`.
pub fn base_indices(s: &Schedule) -> Vec<usize> {
    s.steps
        .iter()
        .enumerate()
        .filter(|(_, i)| i.fract() == 0.0)
        .map(|(n, _)| n)
        .collect()
}

/// Parses `"0,2,5"` into indices.
pub fn parse_keep_indices(text: &str) -> Result<Vec<usize>> {
    text.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<usize>().map_err(|e| invalid(format!("bad index {t:?}: {e}"))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn auxiliary_steps_fill_the_unit_interval() {
        let s = make_schedule(4, 3).unwrap();
        assert_eq!(s.steps(), &[0.0, 0.25, 0.5, 0.75, 1.0, 2.0, 3.0]);
        assert_eq!(s.len(), 7);
    }

    #[test]
    fn plain_schedule_is_one_to_one() {
        assert_eq!(make_schedule(4, 0).unwrap().steps(), &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(make_schedule(1, 0).unwrap().steps(), &[0.0]);
        assert!(make_schedule(0, 0).is_err());
    }

    #[test]
    fn subsetting() {
        let s = make_schedule(4, 3).unwrap();
        assert_eq!(subset_schedule(&s, &(0..7).collect::<Vec<_>>()).unwrap(), s);
        assert_eq!(subset_schedule(&s, &[0, 2]).unwrap().steps(), &[0.0, 0.5]);
        assert!(subset_schedule(&s, &[1, 2]).is_err());
        assert!(subset_schedule(&s, &[0, 7]).is_err());
    }

    #[test]
    fn dropping_auxiliary_steps_recovers_base_schedule() {
        let s = make_schedule(7, 35).unwrap();
        let base = subset_schedule(&s, &base_indices(&s)).unwrap();
        assert_eq!(base.steps(), &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(base.aux_count(), 0);
    }

    #[test]
    fn explicit_steps_are_validated() {
        assert!(Schedule::from_steps(3, vec![0.0, 2.0, 1.0], 0).is_err());
        assert!(Schedule::from_steps(3, vec![0.5, 1.0], 0).is_err());
        assert!(Schedule::from_steps(3, vec![0.0, 3.0], 0).is_err());
    }

    #[test]
    fn keep_index_parsing() {
        assert_eq!(parse_keep_indices("0, 2,5").unwrap(), vec![0, 2, 5]);
        assert!(parse_keep_indices("0,x").is_err());
    }

    fn assert_valid(s: &Schedule) {
        assert_eq!(s.steps()[0], 0.0);
        assert!(s.steps().windows(2).all(|w| w[0] < w[1]));
        assert!(*s.steps().last().unwrap() < s.horizon() as f64);
    }

    proptest! {
        #[test]
        fn made_schedules_are_valid(h in 1usize..=64, k in 0usize..=64) {
            let s = make_schedule(h, k).unwrap();
            assert_valid(&s);
            prop_assert_eq!(s.len(), h + k);
        }

        #[test]
        fn subsets_stay_monotone(
            h in 1usize..=32,
            k in 0usize..=32,
            picks in prop::collection::vec(any::<prop::sample::Index>(), 0..20),
        ) {
            let s = make_schedule(h, k).unwrap();
            let mut keep: Vec<usize> = picks.iter().map(|p| p.index(s.len())).collect();
            keep.push(0);
            assert_valid(&subset_schedule(&s, &keep).unwrap());
        }
    }
}
