use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Measurement function `h(t_m, x)`, addressed by measurement index.
pub trait MeasurementMap: Send + Sync {
    fn n_y(&self, index: usize) -> usize;
    fn predict(&self, index: usize, t: f64, x: &DVector<f64>) -> DVector<f64>;
    fn jacobian(&self, index: usize, t: f64, x: &DVector<f64>) -> DMatrix<f64>;
}

/// Built-in `h`: each measurement observes a subset of state components.
#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    n_x: usize,
    times: Vec<f64>,
    channels: Vec<Vec<usize>>,
}

impl Selection {
    pub fn new(n_x: usize, times: Vec<f64>, channels: Vec<Vec<usize>>) -> Result<Self> {
        if times.len() != channels.len() {
            return Err(Error::Dimension("one channel list per measurement time".into()));
        }
        for ch in &channels {
            if ch.is_empty() {
                return Err(Error::InvalidInput("measurement without channels".into()));
            }
            if let Some(&c) = ch.iter().find(|&&c| c >= n_x) {
                return Err(Error::InvalidInput(format!("channel {c} outside state dimension {n_x}")));
            }
        }
        Ok(Selection { n_x, times, channels })
    }

    pub fn full_state(n_x: usize, times: Vec<f64>) -> Self {
        let channels = vec![(0..n_x).collect(); times.len()];
        Selection { n_x, times, channels }
    }

    pub fn channels(&self, index: usize) -> &[usize] {
        &self.channels[index]
    }

    pub fn index_of(&self, t_m: f64) -> Result<usize> {
        let span = match (self.times.first(), self.times.last()) {
            (Some(a), Some(b)) => (b - a).abs().max(1.0),
            _ => 1.0,
        };
        self.times.iter().position(|&t| (t - t_m).abs() <= 1e-12 * span).ok_or(Error::UnknownMeasurementTime(t_m))
    }

    pub fn eval_h(&self, t_m: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_state(x)?;
        let i = self.index_of(t_m)?;
        Ok(self.predict(i, t_m, x))
    }

    pub fn jac_h_x(&self, t_m: f64, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check_state(x)?;
        let i = self.index_of(t_m)?;
        Ok(self.jacobian(i, t_m, x))
    }

    fn check_state(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.n_x {
            return Err(Error::Dimension(format!("state has {} components, expected {}", x.len(), self.n_x)));
        }
        Ok(())
    }
}

impl MeasurementMap for Selection {
    fn n_y(&self, index: usize) -> usize {
        self.channels[index].len()
    }

    fn predict(&self, index: usize, _t: f64, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.channels[index].len(), self.channels[index].iter().map(|&c| x[c]))
    }

    fn jacobian(&self, index: usize, _t: f64, _x: &DVector<f64>) -> DMatrix<f64> {
        let ch = &self.channels[index];
        let mut j = DMatrix::zeros(ch.len(), self.n_x);
        for (r, &c) in ch.iter().enumerate() {
            j[(r, c)] = 1.0;
        }
        j
    }
}
