//! Discretization points: every measurement time plus uniformly spaced points
//! in between, so that no step exceeds the requested maximum.

use crate::error::{Error, Result};

/// Relative slack applied before taking the ceiling, so that an interval whose
/// length is an exact multiple of the step up to rounding is not split once more.
const CEIL_SLACK: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    times: Vec<f64>,
    measurement_indices: Vec<usize>,
    measurement_at: Vec<Option<usize>>,
}

/// Number of uniform sub-intervals needed so that `length / n <= max_step`.
pub fn subdivisions(length: f64, max_step: f64) -> usize {
    let ratio = length / max_step;
    ((ratio * (1.0 - CEIL_SLACK)).ceil() as usize).max(1)
}

/// Merges measurement times closer than `1e-12 * span`. Returns the distinct
/// times and, for every input time, the index of the distinct time it maps to.
pub fn merge_times(times: &[f64]) -> Result<(Vec<f64>, Vec<usize>)> {
    if times.len() < 2 {
        return Err(Error::InvalidInput("at least two measurement times are required".into()));
    }
    if times.iter().any(|t| !t.is_finite()) {
        return Err(Error::InvalidInput("non-finite measurement time".into()));
    }
    let span = times[times.len() - 1] - times[0];
    if span <= 0.0 {
        return Err(Error::InvalidInput("measurement times must increase".into()));
    }
    let tol = 1e-12 * span;
    let mut distinct = vec![times[0]];
    let mut map = vec![0];
    for w in times.windows(2) {
        let gap = w[1] - w[0];
        if gap < 0.0 {
            return Err(Error::InvalidInput(format!("measurement times not sorted: {} after {}", w[1], w[0])));
        }
        if w[1] - distinct[distinct.len() - 1] >= tol {
            distinct.push(w[1]);
        }
        map.push(distinct.len() - 1);
    }
    if distinct.len() < 2 {
        return Err(Error::InvalidInput("at least two distinct measurement times are required".into()));
    }
    Ok((distinct, map))
}

impl Grid {
    /// Builds the grid for sorted measurement times and maximal step `max_step`.
    pub fn build(measurement_times: &[f64], max_step: f64) -> Result<Grid> {
        if !(max_step > 0.0) || !max_step.is_finite() {
            return Err(Error::InvalidInput(format!("maximal step must be positive, got {max_step}")));
        }
        let (tm, _) = merge_times(measurement_times)?;
        let mut times = Vec::new();
        let mut measurement_indices = Vec::with_capacity(tm.len());
        for w in tm.windows(2) {
            let n = subdivisions(w[1] - w[0], max_step);
            let h = (w[1] - w[0]) / n as f64;
            measurement_indices.push(times.len());
            times.push(w[0]);
            for j in 1..n {
                times.push(w[0] + h * j as f64);
            }
        }
        measurement_indices.push(times.len());
        times.push(tm[tm.len() - 1]);
        let mut measurement_at = vec![None; times.len()];
        for (i, &j) in measurement_indices.iter().enumerate() {
            measurement_at[j] = Some(i);
        }
        Ok(Grid { times, measurement_indices, measurement_at })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn time(&self, j: usize) -> f64 {
        self.times[j]
    }

    /// Grid indices of the measurement times (0-based, ascending).
    pub fn measurement_indices(&self) -> &[usize] {
        &self.measurement_indices
    }

    /// Measurement number attached to grid point `j`, if any.
    pub fn measurement_at(&self, j: usize) -> Option<usize> {
        self.measurement_at[j]
    }

    pub fn n_intervals(&self) -> usize {
        self.times.len() - 1
    }

    /// Length of interval `j` (between points `j` and `j + 1`).
    pub fn step(&self, j: usize) -> f64 {
        self.times[j + 1] - self.times[j]
    }

    pub fn midpoint(&self, j: usize) -> f64 {
        0.5 * (self.times[j + 1] + self.times[j])
    }

    pub fn steps(&self) -> Vec<f64> {
        (0..self.n_intervals()).map(|j| self.step(j)).collect()
    }

    pub fn max_step(&self) -> f64 {
        self.steps().into_iter().fold(0.0, f64::max)
    }
}
