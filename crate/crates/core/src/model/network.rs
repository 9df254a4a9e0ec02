use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Network output and, on request, its Jacobians with respect to input and parameters.
type Evaluation = (DVector<f64>, Option<(DMatrix<f64>, DMatrix<f64>)>);

/// Exponential linear unit with shape parameter 1.
pub fn elu(z: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        z.exp() - 1.0
    }
}

pub fn elu_derivative(z: f64) -> f64 {
    if z > 0.0 {
        1.0
    } else {
        z.exp()
    }
}

/// Layout of a built-in error network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Architecture {
    /// One hidden layer of monomials of total degree `<= degree`; each output is a
    /// linear combination of the monomials. All parameters are edge weights.
    Polynomial { n_in: usize, n_out: usize, degree: u32 },
    /// Fully connected layers with ELU hidden units and a linear output layer.
    /// Hidden layers carry biases, the output layer does not.
    FeedforwardElu { layers: Vec<usize> },
}

impl Architecture {
    pub fn n_in(&self) -> usize {
        match self {
            Architecture::Polynomial { n_in, .. } => *n_in,
            Architecture::FeedforwardElu { layers } => layers[0],
        }
    }

    pub fn n_out(&self) -> usize {
        match self {
            Architecture::Polynomial { n_out, .. } => *n_out,
            Architecture::FeedforwardElu { layers } => *layers.last().unwrap(),
        }
    }
}

/// What a single entry of the parameter vector is.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    /// Edge from neuron `source` of layer `layer` to neuron `target` of layer `layer + 1`.
    /// Layer 0 is the input layer (or the monomial layer for polynomial networks).
    Weight {
        layer: usize,
        source: usize,
        target: usize,
    },
    Bias {
        layer: usize,
        neuron: usize,
    },
}

impl ParamRole {
    pub fn is_weight(&self) -> bool {
        matches!(self, ParamRole::Weight { .. })
    }
}

/// Monomial exponents over `n` inputs with total degree `<= degree`, graded
/// lexicographic order with the constant first.
pub fn monomial_exponents(n: usize, degree: u32) -> Vec<Vec<u32>> {
    fn fill(rest: u32, pos: usize, cur: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if pos + 1 == cur.len() {
            cur[pos] = rest;
            out.push(cur.clone());
            return;
        }
        for e in (0..=rest).rev() {
            cur[pos] = e;
            fill(rest - e, pos + 1, cur, out);
        }
        cur[pos] = 0;
    }
    let mut out = Vec::new();
    if n == 0 {
        out.push(Vec::new());
        return out;
    }
    for d in 0..=degree {
        let mut cur = vec![0; n];
        fill(d, 0, &mut cur, &mut out);
    }
    out
}

fn monomial_label(exps: &[u32]) -> String {
    let parts: Vec<String> =
        exps.iter().enumerate().filter(|(_, &e)| e > 0).map(|(i, &e)| if e == 1 { format!("x{}", i + 1) } else { format!("x{}^{}", i + 1, e) }).collect();
    if parts.is_empty() {
        "1".to_string()
    } else {
        parts.join("*")
    }
}

/// A built-in error network: architecture, parameter values and edge mask.
///
/// The parameter vector used by the solvers is passed explicitly to the
/// evaluation routines; `params` holds the values that belong to the network
/// when it is stored or reported.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorNetwork {
    arch: Architecture,
    monomials: Vec<Vec<u32>>,
    roles: Vec<ParamRole>,
    pub params: DVector<f64>,
    mask: Vec<bool>,
}

impl ErrorNetwork {
    pub fn new(arch: Architecture) -> Result<Self> {
        let (monomials, roles) = match &arch {
            Architecture::Polynomial { n_in, n_out, degree } => {
                if *n_out == 0 {
                    return Err(Error::InvalidInput("network needs at least one output".into()));
                }
                let monos = monomial_exponents(*n_in, *degree);
                let mut roles = Vec::with_capacity(n_out * monos.len());
                for target in 0..*n_out {
                    for source in 0..monos.len() {
                        roles.push(ParamRole::Weight { layer: 0, source, target });
                    }
                }
                (monos, roles)
            }
            Architecture::FeedforwardElu { layers } => {
                if layers.len() < 2 || layers.contains(&0) {
                    return Err(Error::InvalidInput(format!("invalid layer sizes {layers:?}")));
                }
                let nl = layers.len() - 1;
                let mut roles = Vec::new();
                for l in 0..nl {
                    for target in 0..layers[l + 1] {
                        for source in 0..layers[l] {
                            roles.push(ParamRole::Weight { layer: l, source, target });
                        }
                    }
                    if l + 1 < nl {
                        for neuron in 0..layers[l + 1] {
                            roles.push(ParamRole::Bias { layer: l, neuron });
                        }
                    }
                }
                (Vec::new(), roles)
            }
        };
        let n_a = roles.len();
        Ok(ErrorNetwork { arch, monomials, roles, params: DVector::zeros(n_a), mask: vec![true; n_a] })
    }

    pub fn polynomial(n_in: usize, n_out: usize, degree: u32) -> Result<Self> {
        Self::new(Architecture::Polynomial { n_in, n_out, degree })
    }

    pub fn feedforward_elu(layers: &[usize]) -> Result<Self> {
        Self::new(Architecture::FeedforwardElu { layers: layers.to_vec() })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn n_a(&self) -> usize {
        self.roles.len()
    }

    pub fn n_in(&self) -> usize {
        self.arch.n_in()
    }

    pub fn n_out(&self) -> usize {
        self.arch.n_out()
    }

    pub fn roles(&self) -> &[ParamRole] {
        &self.roles
    }

    pub fn role(&self, index: usize) -> Option<ParamRole> {
        self.roles.get(index).copied()
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn is_active(&self, index: usize) -> bool {
        self.mask.get(index).copied().unwrap_or(false)
    }

    pub fn monomials(&self) -> &[Vec<u32>] {
        &self.monomials
    }

    pub fn n_weights(&self) -> usize {
        self.roles.iter().filter(|r| r.is_weight()).count()
    }

    pub fn active_weight_count(&self) -> usize {
        self.roles.iter().zip(&self.mask).filter(|(r, &m)| r.is_weight() && m).count()
    }

    /// Active weights plus all biases.
    pub fn active_param_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Indices of weights that are still part of the network.
    pub fn active_weights(&self) -> Vec<usize> {
        (0..self.n_a()).filter(|&i| self.roles[i].is_weight() && self.mask[i]).collect()
    }

    /// Total degree of the monomial feeding weight `index` (polynomial networks only).
    pub fn monomial_degree(&self, index: usize) -> Option<u32> {
        match (&self.arch, self.roles.get(index)) {
            (Architecture::Polynomial { .. }, Some(ParamRole::Weight { source, .. })) => Some(self.monomials[*source].iter().sum()),
            _ => None,
        }
    }

    pub fn describe_param(&self, index: usize) -> String {
        match (&self.arch, self.roles[index]) {
            (Architecture::Polynomial { .. }, ParamRole::Weight { source, target, .. }) => {
                format!("{} -> out{}", monomial_label(&self.monomials[source]), target + 1)
            }
            (_, ParamRole::Weight { layer, source, target }) => format!("L{layer}:{source}->{target}"),
            (_, ParamRole::Bias { layer, neuron }) => format!("L{layer}:bias{neuron}"),
        }
    }

    pub fn set_mask(&mut self, mask: Vec<bool>) -> Result<()> {
        if mask.len() != self.n_a() {
            return Err(Error::Dimension(format!("mask length {} != n_a {}", mask.len(), self.n_a())));
        }
        for (i, (&m, r)) in mask.iter().zip(&self.roles).enumerate() {
            if !m && !r.is_weight() {
                return Err(Error::InvalidCandidate { index: i, reason: "biases cannot be masked".into() });
            }
        }
        self.mask = mask;
        for i in 0..self.n_a() {
            if !self.mask[i] {
                self.params[i] = 0.0;
            }
        }
        Ok(())
    }

    /// Removes the weight at `index`: clears its mask bit and zeroes its value.
    /// Returns the hidden neurons that are dead afterwards.
    pub fn remove_edge(&mut self, index: usize) -> Result<Vec<(usize, usize)>> {
        match self.roles.get(index) {
            None => return Err(Error::InvalidCandidate { index, reason: "out of range".into() }),
            Some(ParamRole::Bias { .. }) => return Err(Error::InvalidCandidate { index, reason: "biases are not edges".into() }),
            Some(_) if !self.mask[index] => return Err(Error::InvalidCandidate { index, reason: "edge already removed".into() }),
            Some(_) => {}
        }
        self.mask[index] = false;
        self.params[index] = 0.0;
        Ok(self.dead_neurons())
    }

    /// Hidden neurons `(hidden layer, neuron)` that have no active incoming or no
    /// active outgoing edge. For polynomial networks the monomials form hidden layer 1
    /// and only outgoing edges exist.
    pub fn dead_neurons(&self) -> Vec<(usize, usize)> {
        match &self.arch {
            Architecture::Polynomial { .. } => {
                let mut alive = vec![false; self.monomials.len()];
                for (r, &m) in self.roles.iter().zip(&self.mask) {
                    if let ParamRole::Weight { source, .. } = r {
                        alive[*source] |= m;
                    }
                }
                alive.iter().enumerate().filter(|(_, &a)| !a).map(|(i, _)| (1, i)).collect()
            }
            Architecture::FeedforwardElu { layers } => {
                let mut incoming: Vec<Vec<bool>> = layers.iter().map(|&n| vec![false; n]).collect();
                let mut outgoing = incoming.clone();
                for (r, &m) in self.roles.iter().zip(&self.mask) {
                    if let ParamRole::Weight { layer, source, target } = *r {
                        if m {
                            outgoing[layer][source] = true;
                            incoming[layer + 1][target] = true;
                        }
                    }
                }
                let mut dead = Vec::new();
                for l in 1..layers.len() - 1 {
                    for n in 0..layers[l] {
                        if !incoming[l][n] || !outgoing[l][n] {
                            dead.push((l, n));
                        }
                    }
                }
                dead
            }
        }
    }

    /// Index of the weight from the monomial with `exponents` to `output` (polynomial networks).
    pub fn weight_index(&self, output: usize, exponents: &[u32]) -> Option<usize> {
        let Architecture::Polynomial { n_out, .. } = self.arch else {
            return None;
        };
        let k = self.monomials.iter().position(|m| m.as_slice() == exponents)?;
        (output < n_out).then(|| output * self.monomials.len() + k)
    }

    /// Active weights plus the biases of hidden neurons that are not dead.
    pub fn live_param_count(&self) -> usize {
        let dead = self.dead_neurons();
        let live_biases = self
            .roles
            .iter()
            .filter(|r| match r {
                ParamRole::Bias { layer, neuron } => !dead.contains(&(layer + 1, *neuron)),
                ParamRole::Weight { .. } => false,
            })
            .count();
        self.active_weight_count() + live_biases
    }

    pub fn hidden_neuron_count(&self) -> usize {
        match &self.arch {
            Architecture::Polynomial { .. } => self.monomials.len(),
            Architecture::FeedforwardElu { layers } => layers[1..layers.len() - 1].iter().sum(),
        }
    }

    #[inline]
    fn weight(&self, a: &[f64], i: usize) -> f64 {
        if self.mask[i] {
            a[i]
        } else {
            0.0
        }
    }

    pub fn forward(&self, input: &[f64], a: &[f64]) -> DVector<f64> {
        self.evaluate(input, a, false).0
    }

    /// Output together with its Jacobians with respect to the input (`n_out x n_in`)
    /// and the parameters (`n_out x n_a`). Columns of masked weights are zero.
    pub fn forward_with_jacobians(&self, input: &[f64], a: &[f64]) -> (DVector<f64>, DMatrix<f64>, DMatrix<f64>) {
        let (out, jac) = self.evaluate(input, a, true);
        let (d_in, d_a) = jac.unwrap();
        (out, d_in, d_a)
    }

    fn evaluate(&self, input: &[f64], a: &[f64], want_jac: bool) -> Evaluation {
        assert_eq!(input.len(), self.n_in(), "network input dimension");
        assert_eq!(a.len(), self.n_a(), "network parameter dimension");
        match &self.arch {
            Architecture::Polynomial { n_in, n_out, .. } => self.eval_polynomial(*n_in, *n_out, input, a, want_jac),
            Architecture::FeedforwardElu { layers } => self.eval_elu(layers, input, a, want_jac),
        }
    }

    fn eval_polynomial(&self, n_in: usize, n_out: usize, input: &[f64], a: &[f64], want_jac: bool) -> Evaluation {
        let m = self.monomials.len();
        let values: Vec<f64> = self.monomials.iter().map(|e| e.iter().zip(input).map(|(&p, &x)| x.powi(p as i32)).product()).collect();
        let mut out = DVector::zeros(n_out);
        for o in 0..n_out {
            out[o] = (0..m).map(|k| self.weight(a, o * m + k) * values[k]).sum();
        }
        if !want_jac {
            return (out, None);
        }
        // d monomial_k / d input_i
        let mut dmono = DMatrix::zeros(m, n_in);
        for (k, e) in self.monomials.iter().enumerate() {
            for i in 0..n_in {
                if e[i] == 0 {
                    continue;
                }
                let mut v = e[i] as f64 * input[i].powi(e[i] as i32 - 1);
                for (j, (&p, &x)) in e.iter().zip(input).enumerate() {
                    if j != i {
                        v *= x.powi(p as i32);
                    }
                }
                dmono[(k, i)] = v;
            }
        }
        let mut d_in = DMatrix::zeros(n_out, n_in);
        let mut d_a = DMatrix::zeros(n_out, self.n_a());
        for o in 0..n_out {
            for k in 0..m {
                let idx = o * m + k;
                if !self.mask[idx] {
                    continue;
                }
                d_a[(o, idx)] = values[k];
                let w = a[idx];
                if w != 0.0 {
                    for i in 0..n_in {
                        d_in[(o, i)] += w * dmono[(k, i)];
                    }
                }
            }
        }
        (out, Some((d_in, d_a)))
    }

    fn eval_elu(&self, layers: &[usize], input: &[f64], a: &[f64], want_jac: bool) -> Evaluation {
        let nl = layers.len() - 1;
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(nl + 1);
        let mut pre: Vec<Vec<f64>> = Vec::with_capacity(nl);
        let mut offsets = Vec::with_capacity(nl);
        acts.push(input.to_vec());
        let mut off = 0;
        for l in 0..nl {
            let (n_src, n_dst) = (layers[l], layers[l + 1]);
            let w_off = off;
            off += n_src * n_dst;
            let b_off = if l + 1 < nl {
                let b = off;
                off += n_dst;
                Some(b)
            } else {
                None
            };
            offsets.push((w_off, b_off));
            let h = &acts[l];
            let mut z = vec![0.0; n_dst];
            for (i, zi) in z.iter_mut().enumerate() {
                let mut s = b_off.map_or(0.0, |b| a[b + i]);
                for (k, hk) in h.iter().enumerate() {
                    s += self.weight(a, w_off + i * n_src + k) * hk;
                }
                *zi = s;
            }
            let next = if l + 1 < nl { z.iter().map(|&v| elu(v)).collect() } else { z.clone() };
            pre.push(z);
            acts.push(next);
        }
        let out = DVector::from_vec(acts[nl].clone());
        if !want_jac {
            return (out, None);
        }
        let n_out = layers[nl];
        let mut d_a = DMatrix::zeros(n_out, self.n_a());
        // sensitivity of the outputs to the pre-activations of layer l
        let mut sens = DMatrix::<f64>::identity(n_out, n_out);
        let mut d_in = DMatrix::zeros(n_out, layers[0]);
        for l in (0..nl).rev() {
            let (n_src, n_dst) = (layers[l], layers[l + 1]);
            let (w_off, b_off) = offsets[l];
            let h = &acts[l];
            for i in 0..n_dst {
                for (k, &hk) in h.iter().enumerate() {
                    let idx = w_off + i * n_src + k;
                    if !self.mask[idx] {
                        continue;
                    }
                    for o in 0..n_out {
                        d_a[(o, idx)] = sens[(o, i)] * hk;
                    }
                }
                if let Some(b) = b_off {
                    for o in 0..n_out {
                        d_a[(o, b + i)] = sens[(o, i)];
                    }
                }
            }
            // propagate to the previous layer's outputs
            let mut back = DMatrix::zeros(n_out, n_src);
            for i in 0..n_dst {
                for k in 0..n_src {
                    let w = self.weight(a, w_off + i * n_src + k);
                    if w == 0.0 {
                        continue;
                    }
                    for o in 0..n_out {
                        back[(o, k)] += sens[(o, i)] * w;
                    }
                }
            }
            if l == 0 {
                d_in = back;
            } else {
                for k in 0..n_src {
                    let g = elu_derivative(pre[l - 1][k]);
                    for o in 0..n_out {
                        back[(o, k)] *= g;
                    }
                }
                sens = back;
            }
        }
        (out, Some((d_in, d_a)))
    }

    /// `(output, monomial label, coefficient)` for every active weight of a
    /// polynomial network.
    pub fn polynomial_terms(&self) -> Vec<(usize, String, f64)> {
        let m = self.monomials.len();
        let mut terms = Vec::new();
        if let Architecture::Polynomial { n_out, .. } = self.arch {
            for o in 0..n_out {
                for k in 0..m {
                    if self.mask[o * m + k] {
                        terms.push((o, monomial_label(&self.monomials[k]), self.params[o * m + k]));
                    }
                }
            }
        }
        terms
    }

    pub fn to_document(&self) -> NetworkDocument {
        NetworkDocument {
            architecture: self.arch.clone(),
            n_params: self.n_a(),
            params: self.params.iter().copied().collect(),
            mask: self.mask.iter().map(|&m| if m { '1' } else { '0' }).collect(),
        }
    }

    pub fn from_document(doc: &NetworkDocument) -> Result<Self> {
        let mut net = ErrorNetwork::new(doc.architecture.clone())?;
        if doc.params.len() != net.n_a() || doc.n_params != net.n_a() {
            return Err(Error::Dimension(format!("network document has {} parameters, architecture needs {}", doc.params.len(), net.n_a())));
        }
        let mask: Vec<bool> = doc
            .mask
            .chars()
            .map(|c| match c {
                '1' => Ok(true),
                '0' => Ok(false),
                other => Err(Error::InvalidInput(format!("bad mask character {other:?}"))),
            })
            .collect::<Result<_>>()?;
        net.params = DVector::from_vec(doc.params.clone());
        if mask.len() != net.n_a() {
            return Err(Error::Dimension("mask length".into()));
        }
        for (i, (&m, r)) in mask.iter().zip(&net.roles).enumerate() {
            if !m && !r.is_weight() {
                return Err(Error::InvalidCandidate { index: i, reason: "biases cannot be masked".into() });
            }
        }
        net.mask = mask;
        Ok(net)
    }
}

/// Serialized form of an [`ErrorNetwork`]: architecture, flat parameter array in
/// canonical order, and the mask as a bitstring (`1` = active).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkDocument {
    pub architecture: Architecture,
    pub n_params: usize,
    pub params: Vec<f64>,
    pub mask: String,
}
