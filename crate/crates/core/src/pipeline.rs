//! End-to-end run: data, training, pruning and artifacts.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::MeasurementSet;
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::experiments::random_params;
use crate::grid::Grid;
use crate::integrate::{simulate, Trajectory};
use crate::lm::{Iteration, LmOutcome};
use crate::model::{Dynamics, ErrorNetwork, ExogenousSignal, NetworkDocument, PhysicsSpec, SystemModel};
use crate::parallel::{default_batches, solve_parallel};
use crate::residual::{DecisionVector, Problem, Weights};
use crate::sparsify::{prune_loop, Criterion, PruneConfig, PruneLog, PruneProblem, TrainedPoint, Validation};

/// Contents of `model.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDocument {
    pub physics: PhysicsSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exogenous: Option<ExogenousSignal>,
    pub network: Option<NetworkDocument>,
}

impl ModelDocument {
    pub fn from_model(model: &SystemModel) -> Result<Self> {
        let physics = model.physics_spec().cloned().ok_or_else(|| Error::InvalidInput("only built-in physics can be saved".into()))?;
        Ok(ModelDocument { physics, exogenous: model.exogenous().cloned(), network: model.network().map(ErrorNetwork::to_document) })
    }

    pub fn to_model(&self) -> Result<SystemModel> {
        let mut model = SystemModel::from_spec(self.physics.clone());
        if let Some(u) = &self.exogenous {
            model = model.with_exogenous(u.clone())?;
        }
        if let Some(doc) = &self.network {
            model = model.with_network(ErrorNetwork::from_document(doc)?)?;
        }
        Ok(model)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// Training only.
    Fit,
    /// Training followed by backward elimination.
    Prune,
}

/// Measurements from the data file, or generated from the selected example.
pub fn load_data(cfg: &RunConfig) -> Result<MeasurementSet> {
    match (&cfg.data, cfg.experiment()) {
        (Some(path), _) => MeasurementSet::read_csv(path, &cfg.channels),
        (None, Some(spec)) => Ok(spec.generate(cfg.seed)?.0),
        (None, None) => Err(Error::Config("no data source".into())),
    }
}

/// Initial model; network parameters drawn from `N(0, 0.1^2)` with the run seed.
pub fn initial_model(cfg: &RunConfig) -> Result<SystemModel> {
    let mut model = SystemModel::from_spec(cfg.physics.clone());
    if let Some(arch) = &cfg.network {
        let mut net = ErrorNetwork::new(arch.clone())?;
        net.params = random_params(net.n_a(), cfg.seed);
        model = model.with_network(net)?;
    }
    Ok(model)
}

/// What a dry run reports.
#[derive(Clone, Debug, PartialEq)]
pub struct DryRun {
    pub measurement_times: usize,
    pub measurement_values: usize,
    pub grid_points: usize,
    pub batches: usize,
    pub n_params: usize,
    pub decision_variables: usize,
}

pub fn dry_run(cfg: &RunConfig) -> Result<DryRun> {
    cfg.validate()?;
    let data = load_data(cfg)?;
    let model = initial_model(cfg)?;
    let train = training_data(cfg, &data)?.0;
    let grid = Grid::build(&train.times(), cfg.dt)?;
    let n_x = model.n_x();
    Ok(DryRun {
        measurement_times: data.len(),
        measurement_values: data.n_values(),
        grid_points: grid.len(),
        batches: cfg.batches.unwrap_or_else(|| default_batches(grid.len())),
        n_params: model.n_a(),
        decision_variables: grid.len() * n_x + model.n_a(),
    })
}

fn training_data(cfg: &RunConfig, data: &MeasurementSet) -> Result<(MeasurementSet, Option<MeasurementSet>)> {
    match cfg.criterion {
        Criterion::CrossValidation { fraction } => {
            let (a, b) = data.split_contiguous(fraction)?;
            Ok((a, Some(b)))
        }
        _ => Ok((data.clone(), None)),
    }
}

/// Everything a run produced.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub model: SystemModel,
    pub grid: Grid,
    pub states: Vec<DVector<f64>>,
    pub fit_cost: f64,
    pub fit_termination: String,
    pub history: Vec<Iteration>,
    pub final_cost: f64,
    pub log: PruneLog,
}

fn write_history(path: &Path, history: &[Iteration]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(e.into()))?;
    w.write_record(["iter", "cost", "lambda", "accepted", "gradient_norm"]).map_err(|e| Error::Io(e.into()))?;
    for it in history {
        w.write_record([it.iter.to_string(), format!("{:e}", it.cost), format!("{:e}", it.lambda), it.accepted.to_string(), format!("{:e}", it.gradient_norm)])
            .map_err(|e| Error::Io(e.into()))?;
    }
    w.flush()?;
    Ok(())
}

fn report(cfg: &RunConfig, stage: Stage, s: &RunSummary) -> String {
    let mut r = String::new();
    let _ = writeln!(r, "status = ok");
    let _ = writeln!(r, "stage = {}", if stage == Stage::Fit { "fit" } else { "prune" });
    let _ = writeln!(r, "seed = {}", cfg.seed);
    let _ = writeln!(r, "grid_points = {}", s.grid.len());
    let _ = writeln!(r, "fit_cost = {:e}", s.fit_cost);
    let _ = writeln!(r, "fit_iterations = {}", s.history.len().saturating_sub(1));
    let _ = writeln!(r, "fit_termination = {}", s.fit_termination);
    let _ = writeln!(r, "final_cost = {:e}", s.final_cost);
    if let Some(net) = s.model.network() {
        let _ = writeln!(r, "weights = {}", net.n_weights());
        let _ = writeln!(r, "active_weights = {}", net.active_weight_count());
        let _ = writeln!(r, "active_params = {}", net.active_param_count());
        let _ = writeln!(r, "live_params = {}", net.live_param_count());
        let terms = net.polynomial_terms();
        if !terms.is_empty() {
            let _ = writeln!(r, "\n[terms]");
            for (o, label, c) in terms {
                let _ = writeln!(r, "{} += {c:.6} * {label}", cfg.channels[o]);
            }
        }
    }
    if stage == Stage::Prune {
        let _ = writeln!(r, "\n[criterion]");
        let _ = writeln!(r, "criterion = {}", cfg.criterion);
        let _ = writeln!(r, "staged = {}", cfg.staged);
        let _ = writeln!(r, "accepted = {}", s.log.accepted());
        let _ = writeln!(r, "rejected = {}", s.log.records.len() - s.log.accepted());
        for rec in &s.log.records {
            let _ = writeln!(
                r,
                "round {} stage {} {}: predicted {:e} retrained {:e} value {:e} {}",
                rec.round,
                rec.stage,
                rec.description,
                rec.predicted_cost,
                rec.retrained_cost,
                rec.criterion_value,
                if rec.accepted { "accept" } else { "reject" }
            );
        }
    }
    r
}

/// Runs the configured pipeline and writes all artifacts to `cfg.out`.
///
/// On a solver failure a `report.txt` with `status = failed` is still written.
pub fn run(cfg: &RunConfig, stage: Stage) -> Result<RunSummary> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out)?;
    match execute(cfg, stage) {
        Ok(summary) => {
            write_artifacts(cfg, stage, &summary)?;
            Ok(summary)
        }
        Err(e) => {
            fs::write(cfg.out.join("report.txt"), format!("status = failed\nseed = {}\nerror = {e}\n", cfg.seed))?;
            Err(e)
        }
    }
}

fn write_artifacts(cfg: &RunConfig, stage: Stage, s: &RunSummary) -> Result<()> {
    ModelDocument::from_model(&s.model)?.write(&cfg.out.join("model.json"))?;
    Trajectory { times: s.grid.times().to_vec(), states: s.states.clone() }.write_csv(&cfg.out.join("states.csv"), &cfg.channels)?;
    write_history(&cfg.out.join("history.csv"), &s.history)?;
    s.log.write_csv(&cfg.out.join("prune_log.csv"))?;
    fs::write(cfg.out.join("report.txt"), report(cfg, stage, s))?;
    Ok(())
}

fn execute(cfg: &RunConfig, stage: Stage) -> Result<RunSummary> {
    let exec = Executor::new(cfg.workers);
    let data = load_data(cfg)?;
    if cfg.data.is_none() {
        data.write_csv(&cfg.out.join("measurements.csv"), &cfg.channels)?;
    }
    let (train, held_out) = training_data(cfg, &data)?;
    let mut model = initial_model(cfg)?;
    let n_x = model.n_x();
    let grid = Grid::build(&train.times(), cfg.dt)?;
    let obs = train.selection(n_x)?;
    let weights = Weights::isotropic(n_x, n_x, cfg.wx, cfg.wy, cfg.mu_x, cfg.mu_a)?;
    let n_s = Some(cfg.batches.unwrap_or_else(|| default_batches(grid.len())).min(grid.len()));

    let problem = Problem::new(&model, &grid, &train, &obs, &weights)?;
    let b0 = DecisionVector::interpolated(&grid, &train, n_x, model.params());
    let fit: LmOutcome = solve_parallel(&problem, &b0, &cfg.lm, n_s, &exec)?;
    if !fit.cost.is_finite() || !fit.b.is_finite() {
        return Err(Error::NonFinite(f64::NAN));
    }
    if let Some(net) = model.network_mut() {
        net.params = fit.b.params.clone();
    }
    let mut summary = RunSummary {
        model: model.clone(),
        grid: grid.clone(),
        states: fit.b.states.clone(),
        fit_cost: fit.cost,
        fit_termination: fit.termination.to_string(),
        history: fit.history.clone(),
        final_cost: fit.cost,
        log: PruneLog::default(),
    };
    if stage == Stage::Fit {
        return Ok(summary);
    }

    let val_parts = match &held_out {
        Some(v) => Some((Grid::build(&v.times(), cfg.dt)?, v.selection(n_x)?)),
        None => None,
    };
    let validation = match (&held_out, &val_parts) {
        (Some(data), Some((grid, obs))) => Some(Validation { grid, data, obs, weights: &weights }),
        _ => None,
    };
    let pp = PruneProblem { grid: &grid, data: &train, obs: &obs, weights: &weights, validation };
    let pc = PruneConfig { criterion: cfg.criterion.clone(), staged: cfg.staged, lm: cfg.lm.clone(), n_s, max_rounds: cfg.max_rounds };
    let out = prune_loop(model, TrainedPoint { b: fit.b, cost: fit.cost }, &pp, &pc, &exec)?;
    summary.model = out.model;
    summary.states = out.point.b.states;
    summary.final_cost = out.point.cost;
    summary.log = out.log;
    Ok(summary)
}

/// Simulates a saved model and writes the trajectory CSV.
pub fn simulate_file(model_path: &Path, x0: &[f64], t0: f64, t1: f64, dt: f64, out: &Path, channels: Option<Vec<String>>) -> Result<Trajectory> {
    let model = ModelDocument::read(model_path)?.to_model()?;
    let tr = simulate(&model, &model.params(), &DVector::from_column_slice(x0), t0, t1, dt)?;
    let names = channels.unwrap_or_else(|| crate::data::default_channel_names(model.n_x()));
    if names.len() != model.n_x() {
        return Err(Error::Config(format!("{} channel names for {} states", names.len(), model.n_x())));
    }
    tr.write_csv(out, &names)?;
    Ok(tr)
}

/// Artifact paths inside an output directory.
pub fn artifact_paths(out: &Path) -> [PathBuf; 5] {
    ["model.json", "states.csv", "history.csv", "prune_log.csv", "report.txt"].map(|f| out.join(f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Architecture;

    #[test]
    fn model_document_round_trip_is_exact() {
        let mut net = ErrorNetwork::new(Architecture::FeedforwardElu { layers: vec![2, 3, 2] }).unwrap();
        net.params = random_params(net.n_a(), 4).map(|v| v * std::f64::consts::PI);
        net.remove_edge(1).unwrap();
        let model = SystemModel::from_spec(PhysicsSpec::ForcedOscillator { amplitude: 1.0, omega: 0.2 }).with_network(net).unwrap();
        let doc = ModelDocument::from_model(&model).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        doc.write(&path).unwrap();
        let back = ModelDocument::read(&path).unwrap();
        assert_eq!(back, doc);
        let m2 = back.to_model().unwrap();
        let (a, b) = (model.network().unwrap(), m2.network().unwrap());
        assert!(a.params.iter().zip(b.params.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(a.mask(), b.mask());
    }
}
