//! Ground-truth generators for the Lorenz and forced Van der Pol studies.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{MeasurementSet, Sample};
use crate::error::{Error, Result};
use crate::integrate::{rk4, Trajectory};
use crate::model::{Architecture, ErrorNetwork, Physics, PhysicsSpec, SystemModel};
use crate::sparsify::Criterion;

/// Integration step of the truth simulation.
pub const TRUTH_STEP: f64 = 1e-4;

/// One channel sampled every `step` on `[0, t_end]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelSchedule {
    pub channel: usize,
    pub step: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Builtin {
    LorenzFull,
    LorenzPartial,
    VanDerPol,
}

impl Builtin {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "lorenz-full" => Ok(Builtin::LorenzFull),
            "lorenz-partial" => Ok(Builtin::LorenzPartial),
            "van-der-pol" => Ok(Builtin::VanDerPol),
            _ => Err(Error::Config(format!("unknown example `{s}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Builtin::LorenzFull => "lorenz-full",
            Builtin::LorenzPartial => "lorenz-partial",
            Builtin::VanDerPol => "van-der-pol",
        }
    }
}

/// A complete identification experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentSpec {
    pub name: String,
    pub truth: PhysicsSpec,
    pub x0: Vec<f64>,
    pub t_end: f64,
    pub schedules: Vec<ChannelSchedule>,
    pub noise_variance: f64,
    /// First-principle part of the identification model.
    pub physics: PhysicsSpec,
    pub network: Architecture,
    pub wx: f64,
    pub wy: f64,
    pub mu_x: f64,
    pub mu_a: f64,
    pub dt: f64,
    pub criterion: Criterion,
    pub staged: bool,
}

fn lorenz_truth() -> PhysicsSpec {
    PhysicsSpec::Lorenz { sigma: 10.0, rho: 28.0, beta: 8.0 / 3.0 }
}

fn lorenz_network() -> Architecture {
    Architecture::Polynomial { n_in: 3, n_out: 3, degree: 2 }
}

impl ExperimentSpec {
    /// All three states measured with noise variance 1: `x1`, `x2` every 0.3 and
    /// `x3` every 0.4 on `[0, 4.8]`; zero first-principle model.
    pub fn lorenz_full() -> Self {
        ExperimentSpec {
            name: Builtin::LorenzFull.name().into(),
            truth: lorenz_truth(),
            x0: vec![-8.0, 7.0, 27.0],
            t_end: 4.8,
            schedules: vec![ChannelSchedule { channel: 0, step: 0.3 }, ChannelSchedule { channel: 1, step: 0.3 }, ChannelSchedule { channel: 2, step: 0.4 }],
            noise_variance: 1.0,
            physics: PhysicsSpec::Zero { n_x: 3 },
            network: lorenz_network(),
            wx: 10.0,
            wy: 1.0,
            mu_x: 1e-8,
            mu_a: 1e-3,
            dt: 1e-3,
            criterion: Criterion::Aic,
            staged: true,
        }
    }

    /// Only `x1`, `x2` measured, every 0.01 on `[0, 5]` with noise variance 1e-4.
    pub fn lorenz_partial() -> Self {
        ExperimentSpec {
            name: Builtin::LorenzPartial.name().into(),
            t_end: 5.0,
            schedules: vec![ChannelSchedule { channel: 0, step: 0.01 }, ChannelSchedule { channel: 1, step: 0.01 }],
            noise_variance: 1e-4,
            // measurement weight equal to the noise covariance
            wy: 1e-4,
            ..Self::lorenz_full()
        }
    }

    /// Forced Van der Pol with a 2-10-10-2 ELU error network, full state measured
    /// every 0.1 on `[0, t_end]` with noise variance 0.01.
    pub fn van_der_pol(t_end: f64) -> Self {
        ExperimentSpec {
            name: Builtin::VanDerPol.name().into(),
            truth: PhysicsSpec::VanDerPol { amplitude: 1.0, mu: 1.0, omega: 0.2 },
            x0: vec![1.0, 0.0],
            t_end,
            schedules: vec![ChannelSchedule { channel: 0, step: 0.1 }, ChannelSchedule { channel: 1, step: 0.1 }],
            noise_variance: 0.01,
            physics: PhysicsSpec::ForcedOscillator { amplitude: 1.0, omega: 0.2 },
            network: Architecture::FeedforwardElu { layers: vec![2, 10, 10, 2] },
            wx: 1.0,
            wy: 1.0,
            mu_x: 0.0,
            mu_a: 1e-3,
            dt: 1e-3,
            criterion: Criterion::Aic,
            staged: false,
        }
    }

    pub fn builtin(which: Builtin) -> Self {
        match which {
            Builtin::LorenzFull => Self::lorenz_full(),
            Builtin::LorenzPartial => Self::lorenz_partial(),
            Builtin::VanDerPol => Self::van_der_pol(100.0),
        }
    }

    pub fn n_x(&self) -> usize {
        self.truth.n_x()
    }

    /// `k * step` for every `k` with `k * step <= t_end`, per channel.
    pub fn schedule_samples(&self) -> Vec<(f64, usize)> {
        let mut out = Vec::new();
        for s in &self.schedules {
            let n = (self.t_end / s.step * (1.0 + 1e-12)).floor() as usize;
            for k in 0..=n {
                out.push((k as f64 * s.step, s.channel));
            }
        }
        out
    }

    pub fn truth_trajectory(&self) -> Result<Trajectory> {
        let truth = self.truth.clone();
        rk4(&|t, x| truth.eval(t, x), &DVector::from_vec(self.x0.clone()), 0.0, self.t_end, TRUTH_STEP)
    }

    /// Noisy measurements on the schedule plus the truth trajectory.
    pub fn generate(&self, seed: u64) -> Result<(MeasurementSet, Trajectory)> {
        let truth = self.truth_trajectory()?;
        let h = truth.times[1] - truth.times[0];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise =
            if self.noise_variance > 0.0 { Some(Normal::new(0.0, self.noise_variance.sqrt()).map_err(|e| Error::Config(e.to_string()))?) } else { None };
        let mut samples = self.schedule_samples();
        samples.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let samples = samples
            .into_iter()
            .enumerate()
            .map(|(line, (t, c))| {
                let k = ((t / h).round() as usize).min(truth.times.len() - 1);
                let exact = if (truth.times[k] - t).abs() <= 1e-9 { truth.states[k][c] } else { truth.at(t)[c] };
                let value = exact + noise.map_or(0.0, |n| n.sample(&mut rng));
                Sample { time: t, channel: c, value, line: line + 1 }
            })
            .collect();
        Ok((MeasurementSet::from_samples(samples)?, truth))
    }

    /// The identification model with network weights drawn from `N(0, 0.1^2)`.
    pub fn model(&self, seed: u64) -> Result<SystemModel> {
        let mut net = ErrorNetwork::new(self.network.clone())?;
        net.params = random_params(net.n_a(), seed);
        SystemModel::from_spec(self.physics.clone()).with_network(net)
    }

    /// Difference between the truth and the first-principle model.
    pub fn true_error(&self, t: f64, x: &DVector<f64>) -> DVector<f64> {
        self.truth.eval(t, x) - self.physics.eval(t, x)
    }

    pub fn wx_matrix(&self) -> DMatrix<f64> {
        DMatrix::identity(self.n_x(), self.n_x()) * self.wx
    }

    pub fn wy_matrix(&self) -> DMatrix<f64> {
        DMatrix::identity(self.n_x(), self.n_x()) * self.wy
    }
}

/// `n` draws from `N(0, 0.1^2)`.
pub fn random_params(n: usize, seed: u64) -> DVector<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = Normal::new(0.0, 0.1).expect("valid distribution");
    DVector::from_fn(n, |_, _| d.sample(&mut rng))
}

/// Nonzero terms of the Lorenz right-hand side as `(output, exponents, coefficient)`.
pub fn lorenz_support() -> Vec<(usize, [u32; 3], f64)> {
    vec![
        (0, [1, 0, 0], -10.0),
        (0, [0, 1, 0], 10.0),
        (1, [1, 0, 0], 28.0),
        (1, [0, 1, 0], -1.0),
        (1, [1, 0, 1], -1.0),
        (2, [0, 0, 1], -8.0 / 3.0),
        (2, [1, 1, 0], 1.0),
    ]
}
