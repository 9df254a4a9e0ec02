//! Fixed-step fourth-order Runge-Kutta rollout.

use std::path::Path;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::grid::subdivisions;
use crate::model::Dynamics;

/// States at increasing times.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
}

impl Trajectory {
    /// Piecewise-linear interpolation, clamped to the ends.
    pub fn at(&self, t: f64) -> DVector<f64> {
        let k = self.times.partition_point(|&s| s < t);
        if k == 0 {
            return self.states[0].clone();
        }
        if k == self.times.len() {
            return self.states[k - 1].clone();
        }
        let (t0, t1) = (self.times[k - 1], self.times[k]);
        let w = (t - t0) / (t1 - t0);
        &self.states[k - 1] * (1.0 - w) + &self.states[k] * w
    }

    pub fn write_csv(&self, path: &Path, names: &[String]) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(e.into()))?;
        let mut header = vec!["t".to_string()];
        header.extend(names.iter().cloned());
        w.write_record(&header).map_err(|e| Error::Io(e.into()))?;
        for (t, x) in self.times.iter().zip(&self.states) {
            let mut row = vec![format!("{t}")];
            row.extend(x.iter().map(|v| format!("{v}")));
            w.write_record(&row).map_err(|e| Error::Io(e.into()))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Integrates `x' = f(t, x)` from `t0` to `t1` with the largest uniform step not above `dt`.
pub fn rk4(f: &dyn Fn(f64, &DVector<f64>) -> DVector<f64>, x0: &DVector<f64>, t0: f64, t1: f64, dt: f64) -> Result<Trajectory> {
    if !(t1 > t0) || !(dt > 0.0) || !t0.is_finite() || !t1.is_finite() {
        return Err(Error::InvalidInput(format!("bad time span [{t0}, {t1}] or step {dt}")));
    }
    let n = subdivisions(t1 - t0, dt);
    let h = (t1 - t0) / n as f64;
    let mut times = Vec::with_capacity(n + 1);
    let mut states = Vec::with_capacity(n + 1);
    let mut x = x0.clone();
    times.push(t0);
    states.push(x.clone());
    for k in 0..n {
        let t = t0 + h * k as f64;
        let k1 = f(t, &x);
        let k2 = f(t + h / 2.0, &(&x + &k1 * (h / 2.0)));
        let k3 = f(t + h / 2.0, &(&x + &k2 * (h / 2.0)));
        let k4 = f(t + h, &(&x + &k3 * h));
        x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        let tn = if k + 1 == n { t1 } else { t0 + h * (k + 1) as f64 };
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(tn));
        }
        times.push(tn);
        states.push(x.clone());
    }
    Ok(Trajectory { times, states })
}

/// Rollout of a model with fixed parameters.
pub fn simulate(model: &dyn Dynamics, params: &DVector<f64>, x0: &DVector<f64>, t0: f64, t1: f64, dt: f64) -> Result<Trajectory> {
    if x0.len() != model.n_x() || params.len() != model.n_a() {
        return Err(Error::Dimension("initial state or parameters do not match the model".into()));
    }
    rk4(&|t, x| model.rhs(t, x, params), x0, t0, t1, dt)
}
