//! Edge pruning by backward elimination.
//!
//! At a trained optimum `b_c` the residual is linearized and every state update
//! is eliminated at zero damping, leaving a quadratic `Q(delta)` in the
//! parameter update. Removing edge `i` is modelled by pinning `delta_i = -a_i`;
//! the constrained minimum of `Q` predicts the cost after retraining. Each round
//! retrains the model with the best-ranked edge removed and keeps the removal
//! if the configured criterion accepts it.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::MeasurementSet;
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::grid::Grid;
use crate::lm::LmConfig;
use crate::model::{Dynamics, ErrorNetwork, FrozenParams, MeasurementMap, SystemModel};
use crate::parallel::{default_batches, make_partition, reduce, solve_parallel, Partition, Reduction};
use crate::qr::{QuadraticBlock, Var};
use crate::residual::{DecisionVector, Problem, ResidualBlocks, Weights};

/// Optimum of a training run.
#[derive(Clone, Debug)]
pub struct TrainedPoint {
    pub b: DecisionVector,
    pub cost: f64,
}

/// `Q(delta)` with everything needed to recover the state updates.
pub fn reduce_to_params(blocks: &ResidualBlocks, partition: &Partition, exec: &Executor) -> Result<Reduction> {
    reduce(blocks, 0.0, partition, exec)
}

/// Minimum of `Q` with the listed coordinates of `delta` fixed.
fn pinned_minimum(q: &QuadraticBlock, n_a: usize, pins: &[(usize, f64)]) -> Result<(DVector<f64>, f64)> {
    let m = q.matrix();
    let has_params = q.dim(Var::Params).is_some();
    if !has_params || n_a == 0 {
        return Err(Error::InvalidInput("the model has no parameters to prune".into()));
    }
    let mut fixed = vec![None; n_a];
    for &(i, v) in pins {
        fixed[i] = Some(v);
    }
    let free: Vec<usize> = (0..n_a).filter(|&i| fixed[i].is_none()).collect();
    // Params is the last label, so its columns sit just before the constant.
    let p0 = m.ncols() - 1 - n_a;
    if q.vars().len() != 1 {
        return Err(Error::Labels("Q must depend on the parameter update only".into()));
    }
    let mut c = m.column(m.ncols() - 1).into_owned();
    for (i, v) in fixed.iter().enumerate() {
        if let Some(v) = v {
            c += m.column(p0 + i) * *v;
        }
    }
    let mut delta = DVector::zeros(n_a);
    for (i, v) in fixed.iter().enumerate() {
        if let Some(v) = v {
            delta[i] = *v;
        }
    }
    if free.is_empty() {
        return Ok((delta, c.norm_squared()));
    }
    let mf = DMatrix::from_fn(m.nrows(), free.len(), |r, k| m[(r, p0 + free[k])]);
    let block = QuadraticBlock::from_terms(m.nrows(), vec![(Var::Params, mf)], c)?;
    let (vals, min) = block.minimize()?;
    let sol = &vals[&Var::Params];
    for (k, &i) in free.iter().enumerate() {
        delta[i] = sol[k];
    }
    Ok((delta, min))
}

/// Predicted outcome of removing one edge.
#[derive(Clone, Debug)]
pub struct RemovalEstimate {
    pub edge: usize,
    pub predicted_cost: f64,
    pub delta: DVector<f64>,
    /// `b_c + gamma_e`, the linearized optimum with the edge removed.
    pub warm_start: DecisionVector,
}

fn check_candidate(net: &ErrorNetwork, edge: usize) -> Result<()> {
    match net.role(edge) {
        None => Err(Error::InvalidCandidate { index: edge, reason: "out of range".into() }),
        Some(r) if !r.is_weight() => Err(Error::InvalidCandidate { index: edge, reason: "biases are not edges".into() }),
        Some(_) if !net.is_active(edge) => Err(Error::InvalidCandidate { index: edge, reason: "edge already removed".into() }),
        Some(_) => Ok(()),
    }
}

/// Pins for a removal: the edge goes to zero and already removed edges stay at zero.
fn pins(net: &ErrorNetwork, params: &DVector<f64>, edge: usize) -> Vec<(usize, f64)> {
    (0..net.n_a()).filter(|&i| i == edge || !net.is_active(i)).map(|i| (i, -params[i])).collect()
}

/// Predicted cost of removing `edge` (the `delta` coordinate is pinned to `-a_c`).
pub fn predict_removal(red: &Reduction, net: &ErrorNetwork, b_c: &DecisionVector, edge: usize) -> Result<(f64, DVector<f64>)> {
    check_candidate(net, edge)?;
    let (delta, v) = pinned_minimum(&red.q_delta, net.n_a(), &pins(net, &b_c.params, edge))?;
    Ok((v, delta))
}

/// Full estimate including the warm start.
pub fn estimate_removal(red: &Reduction, net: &ErrorNetwork, b_c: &DecisionVector, edge: usize, exec: &Executor) -> Result<RemovalEstimate> {
    let (predicted_cost, delta) = predict_removal(red, net, b_c, edge)?;
    let gamma = red.reconstruct(&delta, exec)?;
    let mut warm_start = b_c.add(&gamma);
    for i in 0..net.n_a() {
        if i == edge || !net.is_active(i) {
            warm_start.params[i] = 0.0;
        }
    }
    Ok(RemovalEstimate { edge, predicted_cost, delta, warm_start })
}

/// Candidates sorted by predicted cost, ties by edge index.
pub fn rank_candidates(red: &Reduction, net: &ErrorNetwork, b_c: &DecisionVector, candidates: &[usize], exec: &Executor) -> Result<Vec<(usize, f64)>> {
    let mut ranked = exec
        .map(candidates.len(), |k| predict_removal(red, net, b_c, candidates[k]).map(|(v, _)| (candidates[k], v)))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    sort_ranked(&mut ranked);
    Ok(ranked)
}

/// Ascending predicted cost, ties by lower edge index.
pub fn sort_ranked(ranked: &mut [(usize, f64)]) {
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
}

/// Acceptance rule for a removal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Criterion {
    /// Retrained cost at most `kappa` times the cost of the unpruned model.
    CostLimit {
        kappa: f64,
    },
    Aic,
    Bic,
    /// Cost on a held-out time block, parameters frozen, must not increase.
    /// `fraction` is the share of measurements used for training.
    CrossValidation {
        fraction: f64,
    },
}

impl Criterion {
    /// Parses `aic`, `bic`, `cost-limit:<kappa>` or `cross-validation:<fraction>`.
    pub fn parse(s: &str) -> Result<Self> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n.trim(), Some(a.trim())),
            None => (s.trim(), None),
        };
        let num = |default: Option<f64>| -> Result<f64> {
            match arg {
                Some(a) => a.parse().map_err(|_| Error::Config(format!("bad criterion argument `{a}`"))),
                None => default.ok_or_else(|| Error::Config(format!("criterion `{name}` needs an argument"))),
            }
        };
        let c = match name {
            "aic" if arg.is_none() => Criterion::Aic,
            "bic" if arg.is_none() => Criterion::Bic,
            "cost-limit" => Criterion::CostLimit { kappa: num(None)? },
            "cross-validation" => Criterion::CrossValidation { fraction: num(Some(0.8))? },
            _ => return Err(Error::Config(format!("unknown criterion `{s}`"))),
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Criterion::CostLimit { kappa } if !(kappa >= 1.0) => Err(Error::Config("cost limit factor must be >= 1".into())),
            Criterion::CrossValidation { fraction } if !(fraction > 0.0 && fraction < 1.0) => Err(Error::Config("training fraction must be in (0, 1)".into())),
            _ => Ok(()),
        }
    }

    /// Scalar tracked in the log: the information criterion, the cost ratio or the validation cost.
    pub fn value(&self, stats: &FitStats, full_cost: f64) -> f64 {
        let n = stats.n_residuals as f64;
        let p = stats.active_params as f64;
        match self {
            Criterion::CostLimit { .. } => stats.cost / full_cost,
            Criterion::Aic => n * (stats.cost / n).ln() + 2.0 * p,
            Criterion::Bic => n * (stats.cost / n).ln() + p * n.ln(),
            Criterion::CrossValidation { .. } => stats.validation_cost.unwrap_or(f64::NAN),
        }
    }
}

impl FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Criterion::parse(s)
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Criterion::CostLimit { kappa } => write!(f, "cost-limit:{kappa}"),
            Criterion::Aic => f.write_str("aic"),
            Criterion::Bic => f.write_str("bic"),
            Criterion::CrossValidation { fraction } => write!(f, "cross-validation:{fraction}"),
        }
    }
}

/// Quantities the criteria look at.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitStats {
    pub cost: f64,
    pub active_params: usize,
    /// Number of scalar measurements.
    pub n_residuals: usize,
    pub validation_cost: Option<f64>,
}

/// Whether the model described by `after` is preferred over `before`.
pub fn accept(criterion: &Criterion, before: &FitStats, after: &FitStats, full_cost: f64) -> Result<bool> {
    criterion.validate()?;
    Ok(match criterion {
        Criterion::CostLimit { kappa } => after.cost <= kappa * full_cost,
        Criterion::Aic | Criterion::Bic => criterion.value(after, full_cost) < criterion.value(before, full_cost),
        Criterion::CrossValidation { .. } => {
            let (Some(b), Some(a)) = (before.validation_cost, after.validation_cost) else {
                return Err(Error::InvalidInput("cross-validation needs validation costs".into()));
            };
            a <= b
        }
    })
}

/// Held-out data for cross-validation.
pub struct Validation<'a> {
    pub grid: &'a Grid,
    pub data: &'a MeasurementSet,
    pub obs: &'a dyn MeasurementMap,
    pub weights: &'a Weights,
}

/// Cost on the validation window after re-optimizing the states with the parameters frozen.
pub fn validation_cost(model: &dyn Dynamics, params: &DVector<f64>, val: &Validation, lm: &LmConfig, exec: &Executor) -> Result<f64> {
    let frozen = FrozenParams::new(model, params.clone())?;
    let problem = Problem::new(&frozen, val.grid, val.data, val.obs, val.weights)?;
    let b0 = DecisionVector::interpolated(val.grid, val.data, model.n_x(), DVector::zeros(0));
    Ok(solve_parallel(&problem, &b0, lm, None, exec)?.cost)
}

/// Where retraining started from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StartKind {
    Linearized,
    HardZero,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneRecord {
    pub round: usize,
    pub stage: usize,
    pub edge: usize,
    pub description: String,
    pub predicted_cost: f64,
    pub retrained_cost: f64,
    pub criterion: String,
    pub criterion_value: f64,
    pub accepted: bool,
    pub start: StartKind,
}

/// Append-only record of pruning decisions.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PruneLog {
    pub records: Vec<PruneRecord>,
}

impl PruneLog {
    pub fn accepted(&self) -> usize {
        self.records.iter().filter(|r| r.accepted).count()
    }

    /// Number of accepted removals before the first rejection.
    pub fn accepted_before_rejection(&self) -> usize {
        self.records.iter().take_while(|r| r.accepted).count()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(e.into()))?;
        w.write_record(["round", "stage", "edge", "description", "predicted_cost", "retrained_cost", "criterion", "criterion_value", "decision", "start"])
            .map_err(|e| Error::Io(e.into()))?;
        for r in &self.records {
            w.write_record([
                r.round.to_string(),
                r.stage.to_string(),
                r.edge.to_string(),
                r.description.clone(),
                format!("{:e}", r.predicted_cost),
                format!("{:e}", r.retrained_cost),
                r.criterion.clone(),
                format!("{:e}", r.criterion_value),
                if r.accepted { "accept" } else { "reject" }.to_string(),
                match r.start {
                    StartKind::Linearized => "linearized",
                    StartKind::HardZero => "hard-zero",
                }
                .to_string(),
            ])
            .map_err(|e| Error::Io(e.into()))?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct PruneConfig {
    pub criterion: Criterion,
    /// Remove edges of higher-degree monomials first (polynomial networks).
    pub staged: bool,
    pub lm: LmConfig,
    pub n_s: Option<usize>,
    pub max_rounds: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct PruneOutcome {
    pub model: SystemModel,
    pub point: TrainedPoint,
    pub log: PruneLog,
}

/// Candidate groups, processed in order.
fn stages(net: &ErrorNetwork, staged: bool) -> Vec<Vec<usize>> {
    let active = net.active_weights();
    if !staged {
        return vec![active];
    }
    let mut degrees: Vec<u32> = active.iter().filter_map(|&i| net.monomial_degree(i)).collect();
    if degrees.len() != active.len() {
        return vec![active];
    }
    degrees.sort_unstable();
    degrees.dedup();
    degrees.into_iter().rev().map(|d| active.iter().copied().filter(|&i| net.monomial_degree(i) == Some(d)).collect()).collect()
}

/// Inputs shared by every round.
pub struct PruneProblem<'a> {
    pub grid: &'a Grid,
    pub data: &'a MeasurementSet,
    pub obs: &'a dyn MeasurementMap,
    pub weights: &'a Weights,
    pub validation: Option<Validation<'a>>,
}

/// Backward elimination starting from a trained model.
///
/// Each round ranks the active edges of the current stage, retrains without the
/// best one and applies the criterion. A rejection ends the current stage (staged
/// mode) or the loop; the loop also ends when no candidates remain.
pub fn prune_loop(model: SystemModel, trained: TrainedPoint, pp: &PruneProblem, config: &PruneConfig, exec: &Executor) -> Result<PruneOutcome> {
    config.criterion.validate()?;
    config.lm.validate()?;
    let Some(net0) = model.network() else {
        return Ok(PruneOutcome { model, point: trained, log: PruneLog::default() });
    };
    let plan = stages(net0, config.staged);
    let active0 = net0.active_param_count();
    let n_d = pp.grid.len();
    let partition = make_partition(n_d, config.n_s.unwrap_or_else(|| default_batches(n_d)))?;
    let n_residuals = pp.data.n_values();
    let needs_validation = matches!(config.criterion, Criterion::CrossValidation { .. });
    let validation = |m: &SystemModel, params: &DVector<f64>| -> Result<Option<f64>> {
        if !needs_validation {
            return Ok(None);
        }
        let val = pp.validation.as_ref().ok_or_else(|| Error::Config("cross-validation needs a validation set".into()))?;
        validation_cost(m, params, val, &config.lm, exec).map(Some)
    };

    let mut model = model;
    let mut point = trained;
    let full_cost = point.cost;
    let mut before = FitStats { cost: point.cost, active_params: active0, n_residuals, validation_cost: validation(&model, &point.b.params)? };
    let mut log = PruneLog::default();
    let mut round = 0;
    'stages: for (stage, _) in plan.iter().enumerate() {
        loop {
            if config.max_rounds.is_some_and(|m| round >= m) {
                break 'stages;
            }
            let net = model.network().expect("model has a network");
            // membership in the stage is fixed; only still-active edges are candidates
            let candidates: Vec<usize> = plan[stage].iter().copied().filter(|&i| net.is_active(i)).collect();
            if candidates.is_empty() {
                break;
            }
            round += 1;
            let problem = Problem::new(&model, pp.grid, pp.data, pp.obs, pp.weights)?;
            let blocks = problem.assemble(&point.b, exec)?;
            let red = reduce_to_params(&blocks, &partition, exec)?;
            let ranked = rank_candidates(&red, net, &point.b, &candidates, exec)?;
            let (edge, _) = ranked[0];
            let est = estimate_removal(&red, net, &point.b, edge, exec)?;
            let description = net.describe_param(edge);

            let mut pruned = model.clone();
            let pnet = pruned.network_mut().expect("model has a network");
            pnet.remove_edge(edge)?;
            let pproblem = Problem::new(&pruned, pp.grid, pp.data, pp.obs, pp.weights)?;
            let mut hard = point.b.clone();
            hard.params[edge] = 0.0;
            let c_lin = pproblem.cost(&est.warm_start, exec).unwrap_or(f64::INFINITY);
            let c_hard = pproblem.cost(&hard, exec)?;
            let (start, kind) =
                if c_lin.is_finite() && c_lin <= c_hard { (est.warm_start.clone(), StartKind::Linearized) } else { (hard, StartKind::HardZero) };
            let out = solve_parallel(&pproblem, &start, &config.lm, Some(partition.n_batches()), exec)?;
            pruned.network_mut().expect("model has a network").params = out.b.params.clone();
            let after = FitStats {
                cost: out.cost,
                active_params: pruned.network().map_or(0, ErrorNetwork::active_param_count),
                n_residuals,
                validation_cost: validation(&pruned, &out.b.params)?,
            };
            let ok = accept(&config.criterion, &before, &after, full_cost)?;
            log.records.push(PruneRecord {
                round,
                stage,
                edge,
                description,
                predicted_cost: est.predicted_cost,
                retrained_cost: out.cost,
                criterion: config.criterion.to_string(),
                criterion_value: config.criterion.value(&after, full_cost),
                accepted: ok,
                start: kind,
            });
            if ok {
                model = pruned;
                point = TrainedPoint { b: out.b, cost: out.cost };
                before = after;
            } else if config.staged {
                continue 'stages;
            } else {
                break 'stages;
            }
        }
    }
    Ok(PruneOutcome { model, point, log })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats(cost: f64, p: usize) -> FitStats {
        FitStats { cost, active_params: p, n_residuals: 100, validation_cost: None }
    }

    #[test]
    fn cost_limit_accepts_decrease() {
        let c = Criterion::CostLimit { kappa: 1.05 };
        assert!(accept(&c, &stats(10.0, 5), &stats(9.0, 4), 10.0).unwrap());
        assert!(!accept(&c, &stats(10.0, 5), &stats(10.6, 4), 10.0).unwrap());
    }

    #[test]
    fn information_criteria_reward_fewer_params() {
        for c in [Criterion::Aic, Criterion::Bic] {
            assert!(accept(&c, &stats(10.0, 5), &stats(10.0, 4), 10.0).unwrap());
            assert!(!accept(&c, &stats(10.0, 5), &stats(20.0, 4), 10.0).unwrap());
        }
    }

    #[test]
    fn cross_validation_needs_costs() {
        let c = Criterion::CrossValidation { fraction: 0.8 };
        assert!(accept(&c, &stats(1.0, 2), &stats(1.0, 1), 1.0).is_err());
        let mut a = stats(1.0, 2);
        let mut b = stats(1.0, 1);
        a.validation_cost = Some(2.0);
        b.validation_cost = Some(2.0);
        assert!(accept(&c, &a, &b, 1.0).unwrap());
    }

    #[test]
    fn parse_criteria() {
        assert_eq!(Criterion::parse("aic").unwrap(), Criterion::Aic);
        assert_eq!(Criterion::parse("cost-limit:1.1").unwrap(), Criterion::CostLimit { kappa: 1.1 });
        assert_eq!(Criterion::parse("cross-validation").unwrap(), Criterion::CrossValidation { fraction: 0.8 });
        assert!(matches!(Criterion::parse("lasso"), Err(Error::Config(_))));
        assert!(Criterion::parse("cost-limit").is_err());
        assert!(Criterion::parse("cost-limit:0.5").is_err());
        for c in ["aic", "bic", "cost-limit:1.05", "cross-validation:0.75"] {
            assert_eq!(Criterion::parse(c).unwrap().to_string(), c);
        }
    }

    #[test]
    fn stages_by_degree() {
        let net = ErrorNetwork::polynomial(2, 1, 2).unwrap();
        let s = stages(&net, true);
        assert_eq!(s.len(), 3);
        assert!(s[0].iter().all(|&i| net.monomial_degree(i) == Some(2)));
        assert_eq!(s[2].len(), 1);
        assert_eq!(stages(&net, false), vec![net.active_weights()]);
    }
}
