//! Browser bindings: generate Lorenz data, fit the polynomial error model and
//! prune it one edge at a time.

use nalgebra::DVector;
use sparseid_core::data::MeasurementSet;
use sparseid_core::exec::Executor;
use sparseid_core::experiments::ExperimentSpec;
use sparseid_core::grid::Grid;
use sparseid_core::lm::LmConfig;
use sparseid_core::model::{Selection, SystemModel};
use sparseid_core::parallel::{default_batches, make_partition, solve_parallel};
use sparseid_core::residual::{DecisionVector, Problem, Weights};
use sparseid_core::sparsify::{estimate_removal, rank_candidates, reduce_to_params};
use wasm_bindgen::prelude::*;

fn js(e: sparseid_core::Error) -> JsValue {
    JsValue::from_str(&e.to_string())
}

#[wasm_bindgen]
pub struct Session {
    data: MeasurementSet,
    grid: Grid,
    obs: Selection,
    weights: Weights,
    model: SystemModel,
    b: DecisionVector,
    cost: f64,
    lm: LmConfig,
}

impl Session {
    fn problem(&self) -> sparseid_core::Result<Problem<'_>> {
        Problem::new(&self.model, &self.grid, &self.data, &self.obs, &self.weights)
    }
}

#[wasm_bindgen]
impl Session {
    /// Noisy full-state Lorenz data on `[0, t_end]` and an untrained degree-2 model
    /// on a grid with step `dt`.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, t_end: f64, dt: f64) -> Result<Session, JsValue> {
        let spec = ExperimentSpec { t_end, dt, ..ExperimentSpec::lorenz_full() };
        let (data, _) = spec.generate(u64::from(seed)).map_err(js)?;
        let model = spec.model(u64::from(seed)).map_err(js)?;
        let grid = Grid::build(&data.times(), dt).map_err(js)?;
        let obs = data.selection(3).map_err(js)?;
        let weights = Weights::isotropic(3, 3, spec.wx, spec.wy, spec.mu_x, spec.mu_a).map_err(js)?;
        let b = DecisionVector::interpolated(&grid, &data, 3, model.params());
        let mut s = Session { data, grid, obs, weights, model, b, cost: f64::NAN, lm: LmConfig::default() };
        s.cost = s.problem().map_err(js)?.cost(&s.b, &Executor::sequential()).map_err(js)?;
        Ok(s)
    }

    /// Runs up to `max_iters` LM iterations from the current point; returns the cost.
    pub fn fit(&mut self, max_iters: u32) -> Result<f64, JsValue> {
        let cfg = LmConfig { max_iters: max_iters as usize, ..self.lm.clone() };
        let out = solve_parallel(&self.problem().map_err(js)?, &self.b, &cfg, None, &Executor::sequential()).map_err(js)?;
        self.b = out.b;
        self.cost = out.cost;
        if let Some(net) = self.model.network_mut() {
            net.params = self.b.params.clone();
        }
        Ok(self.cost)
    }

    /// Predicted cost after removing each active edge, best first, as JSON
    /// `[{"edge": i, "term": "...", "predicted": v}, ...]`.
    pub fn rank_edges(&self) -> Result<String, JsValue> {
        let exec = Executor::sequential();
        let blocks = self.problem().map_err(js)?.assemble(&self.b, &exec).map_err(js)?;
        let partition = make_partition(self.grid.len(), default_batches(self.grid.len())).map_err(js)?;
        let red = reduce_to_params(&blocks, &partition, &exec).map_err(js)?;
        let net = self.model.network().ok_or_else(|| JsValue::from_str("no network"))?;
        let ranked = rank_candidates(&red, net, &self.b, &net.active_weights(), &exec).map_err(js)?;
        let rows: Vec<serde_json::Value> =
            ranked.iter().map(|&(e, v)| serde_json::json!({ "edge": e, "term": net.describe_param(e), "predicted": v })).collect();
        Ok(serde_json::Value::Array(rows).to_string())
    }

    /// Removes `edge`, retrains from the linearized warm start and returns the new cost.
    pub fn remove_edge(&mut self, edge: u32, max_iters: u32) -> Result<f64, JsValue> {
        let exec = Executor::sequential();
        let edge = edge as usize;
        let blocks = self.problem().map_err(js)?.assemble(&self.b, &exec).map_err(js)?;
        let partition = make_partition(self.grid.len(), default_batches(self.grid.len())).map_err(js)?;
        let red = reduce_to_params(&blocks, &partition, &exec).map_err(js)?;
        let net = self.model.network().ok_or_else(|| JsValue::from_str("no network"))?;
        let est = estimate_removal(&red, net, &self.b, edge, &exec).map_err(js)?;
        self.model.network_mut().expect("checked above").remove_edge(edge).map_err(js)?;
        self.b = est.warm_start;
        self.fit(max_iters)
    }

    pub fn cost(&self) -> f64 {
        self.cost
    }

    /// Active terms as JSON `[[output, "monomial", coefficient], ...]`.
    pub fn terms(&self) -> String {
        let terms = self.model.network().map(|n| n.polynomial_terms()).unwrap_or_default();
        serde_json::to_string(&terms).unwrap_or_default()
    }

    /// Grid times.
    pub fn times(&self) -> Vec<f64> {
        self.grid.times().to_vec()
    }

    /// Estimated trajectory of state `i` on the grid.
    pub fn state(&self, i: usize) -> Vec<f64> {
        self.b.states.iter().map(|x| x.get(i).copied().unwrap_or(f64::NAN)).collect()
    }

    /// Measurements of state `i` as interleaved `[t0, y0, t1, y1, ...]`.
    pub fn measurements(&self, i: usize) -> Vec<f64> {
        let mut out = Vec::new();
        for m in self.data.records() {
            if let Some(k) = m.channels.iter().position(|&c| c == i) {
                out.push(m.time);
                out.push(m.values[k]);
            }
        }
        out
    }
}

/// Lorenz right-hand side evaluated by the current model, for probing the fit.
#[wasm_bindgen]
pub fn model_rhs(session: &Session, x1: f64, x2: f64, x3: f64) -> Vec<f64> {
    use sparseid_core::model::Dynamics;
    let x = DVector::from_vec(vec![x1, x2, x3]);
    session.model.rhs(0.0, &x, &session.model.params()).iter().copied().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fit_rank_and_remove() {
        let mut s = Session::new(3, 1.2, 0.01).unwrap();
        let c0 = s.cost();
        let c1 = s.fit(20).unwrap();
        assert!(c1 < c0);
        let ranked: serde_json::Value = serde_json::from_str(&s.rank_edges().unwrap()).unwrap();
        let rows = ranked.as_array().unwrap();
        assert_eq!(rows.len(), 30);
        let best = rows[0]["edge"].as_u64().unwrap() as u32;
        s.remove_edge(best, 20).unwrap();
        let terms: Vec<(usize, String, f64)> = serde_json::from_str(&s.terms()).unwrap();
        assert_eq!(terms.len(), 29);
        assert_eq!(s.state(0).len(), s.times().len());
        assert_eq!(s.measurements(2).len() % 2, 0);
        assert_eq!(model_rhs(&s, 1.0, 2.0, 3.0).len(), 3);
    }
}
