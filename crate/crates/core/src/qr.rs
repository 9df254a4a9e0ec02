//! Elimination of variable groups from sums of squared affine maps.
//!
//! A [`QuadraticBlock`] stores `M = [M_1 ... M_k M_c]` and represents
//! `||M_1 v_1 + ... + M_k v_k + M_c||^2`. Eliminating a group `r` factorizes
//! `[M_r M_s M_c]` by Householder reflections into
//!
//! ```text
//! [R11 R12]
//! [ 0  R22]
//! ```
//!
//! so that `min_r = ||R22 [s; 1]||^2`, attained at `r = -R11^+ R12 [s; 1]`.
//!
//! Rows are processed in order of their first nonzero column, so structurally
//! zero leading entries are never touched. When `R11` has a diagonal entry with
//! `|d| <= 1e-12 max |d|` the factorization is redone with column pivoting and the
//! minimum-norm minimizer is returned.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative cutoff on the diagonal of `R11`.
pub const RANK_TOLERANCE: f64 = 1e-12;

/// Label of a variable group: the state update at a grid point, or the parameter update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Var {
    State(usize),
    Params,
}

/// Values for a set of variable groups.
pub type Assignment = BTreeMap<Var, DVector<f64>>;

/// `||M [v; 1]||^2` over labeled groups, columns sorted by label.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticBlock {
    vars: Vec<(Var, usize)>,
    matrix: DMatrix<f64>,
}

/// Affine map from the remaining groups to the minimizing value of an eliminated group.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearPolicy {
    var: Var,
    inputs: Vec<(Var, usize)>,
    /// `dim r x (sum of input dims + 1)`; the last column is the offset.
    gain: DMatrix<f64>,
}

fn offsets(vars: &[(Var, usize)]) -> Vec<usize> {
    let mut out = Vec::with_capacity(vars.len() + 1);
    let mut o = 0;
    out.push(0);
    for &(_, d) in vars {
        o += d;
        out.push(o);
    }
    out
}

fn augmented(vars: &[(Var, usize)], values: &Assignment) -> Result<DVector<f64>> {
    let n: usize = vars.iter().map(|v| v.1).sum();
    let mut x = DVector::zeros(n + 1);
    let mut o = 0;
    for &(var, d) in vars {
        let v = values.get(&var).ok_or_else(|| Error::Labels(format!("no value for {var:?}")))?;
        if v.len() != d {
            return Err(Error::Dimension(format!("{var:?} has dimension {d}, got {}", v.len())));
        }
        x.rows_mut(o, d).copy_from(v);
        o += d;
    }
    x[n] = 1.0;
    Ok(x)
}

impl QuadraticBlock {
    /// Block over `vars` with `matrix` columns laid out in the order of `vars`
    /// followed by the constant column.
    pub fn new(vars: Vec<(Var, usize)>, matrix: DMatrix<f64>) -> Result<Self> {
        let n: usize = vars.iter().map(|v| v.1).sum();
        if matrix.ncols() != n + 1 {
            return Err(Error::Dimension(format!("block has {} columns, labels need {}", matrix.ncols(), n + 1)));
        }
        let mut sorted = vars.clone();
        sorted.sort_by_key(|v| v.0);
        if sorted.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::Labels("duplicate variable label in block".into()));
        }
        if sorted == vars {
            return Ok(QuadraticBlock { vars, matrix });
        }
        let src = offsets(&vars);
        let mut out = DMatrix::zeros(matrix.nrows(), n + 1);
        let mut o = 0;
        for &(var, d) in &sorted {
            let k = vars.iter().position(|v| v.0 == var).unwrap();
            out.columns_mut(o, d).copy_from(&matrix.columns(src[k], d));
            o += d;
        }
        out.set_column(n, &matrix.column(n));
        Ok(QuadraticBlock { vars: sorted, matrix: out })
    }

    /// Sum of terms `M_i v_i`, all with `rows` rows, plus `constant`. Repeated labels add up.
    pub fn from_terms(rows: usize, terms: Vec<(Var, DMatrix<f64>)>, constant: DVector<f64>) -> Result<Self> {
        if constant.len() != rows {
            return Err(Error::Dimension("constant has the wrong row count".into()));
        }
        let mut merged: BTreeMap<Var, DMatrix<f64>> = BTreeMap::new();
        for (var, m) in terms {
            if m.nrows() != rows {
                return Err(Error::Dimension(format!("term {var:?} has the wrong row count")));
            }
            match merged.get_mut(&var) {
                Some(acc) if acc.ncols() == m.ncols() => *acc += m,
                Some(_) => return Err(Error::Labels(format!("inconsistent dimension for {var:?}"))),
                None => {
                    merged.insert(var, m);
                }
            }
        }
        let vars: Vec<(Var, usize)> = merged.iter().map(|(v, m)| (*v, m.ncols())).collect();
        let n: usize = vars.iter().map(|v| v.1).sum();
        let mut matrix = DMatrix::zeros(rows, n + 1);
        let mut o = 0;
        for m in merged.values() {
            matrix.columns_mut(o, m.ncols()).copy_from(m);
            o += m.ncols();
        }
        matrix.set_column(n, &constant);
        Ok(QuadraticBlock { vars, matrix })
    }

    /// Block whose `vars` are already sorted and whose `matrix` matches them.
    pub(crate) fn from_sorted(vars: Vec<(Var, usize)>, matrix: DMatrix<f64>) -> Self {
        debug_assert!(vars.windows(2).all(|w| w[0].0 < w[1].0));
        debug_assert_eq!(matrix.ncols(), vars.iter().map(|v| v.1).sum::<usize>() + 1);
        QuadraticBlock { vars, matrix }
    }

    /// Identically zero block over `vars`.
    pub fn zero(vars: Vec<(Var, usize)>) -> Result<Self> {
        let n: usize = vars.iter().map(|v| v.1).sum();
        Self::new(vars, DMatrix::zeros(0, n + 1))
    }

    pub fn vars(&self) -> &[(Var, usize)] {
        &self.vars
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn nrows(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn dim(&self, var: Var) -> Option<usize> {
        self.vars.iter().find(|v| v.0 == var).map(|v| v.1)
    }

    /// Columns belonging to `var`.
    pub fn columns_of(&self, var: Var) -> Option<DMatrix<f64>> {
        let off = offsets(&self.vars);
        let k = self.vars.iter().position(|v| v.0 == var)?;
        Some(self.matrix.columns(off[k], self.vars[k].1).into_owned())
    }

    pub fn constant(&self) -> DVector<f64> {
        self.matrix.column(self.matrix.ncols() - 1).into_owned()
    }

    /// Value at `values`; every label of the block must be assigned.
    pub fn value(&self, values: &Assignment) -> Result<f64> {
        let x = augmented(&self.vars, values)?;
        Ok((&self.matrix * x).norm_squared())
    }

    /// Value of a block without variables.
    pub fn constant_value(&self) -> f64 {
        self.constant().norm_squared()
    }

    /// Vertical concatenation after aligning columns on the union of labels.
    pub fn stack(blocks: &[&QuadraticBlock]) -> Result<QuadraticBlock> {
        let vars = union_vars(blocks)?;
        let order: Vec<Var> = vars.iter().map(|v| v.0).collect();
        let rows = gather(blocks, &vars, &order);
        Ok(QuadraticBlock { vars, matrix: rows.to_matrix() })
    }

    /// Minimizes over `var`, returning the minimizer as a function of the other
    /// groups and the reduced block in those groups.
    pub fn eliminate(&self, var: Var) -> Result<(LinearPolicy, QuadraticBlock)> {
        Self::stack_eliminate(&[self], var)
    }

    /// `stack(blocks)` followed by `eliminate(var)`, without forming the stacked block.
    pub fn stack_eliminate(blocks: &[&QuadraticBlock], var: Var) -> Result<(LinearPolicy, QuadraticBlock)> {
        let vars = union_vars(blocks)?;
        let n_r = vars.iter().find(|v| v.0 == var).ok_or_else(|| Error::Labels(format!("{var:?} is not a variable of the block")))?.1;
        let inputs: Vec<(Var, usize)> = vars.iter().copied().filter(|v| v.0 != var).collect();
        // Columns as [r, s, 1].
        let mut order = vec![var];
        order.extend(inputs.iter().map(|v| v.0));
        let (gain, rest) = match eliminate_leading(gather(blocks, &vars, &order), n_r) {
            Some(out) => out,
            None => {
                let a = gather(blocks, &vars, &order).to_matrix();
                let (gain, rest) = eliminate_pivoted(&a, n_r);
                (gain, RowMajor::from_matrix(&rest))
            }
        };
        let reduced = QuadraticBlock { vars: inputs.clone(), matrix: compress(rest) };
        Ok((LinearPolicy { var, inputs, gain }, reduced))
    }

    /// Minimizes over every group in label order. Returns the minimizers and the minimum.
    pub fn minimize(&self) -> Result<(Assignment, f64)> {
        let mut block = self.clone();
        let mut policies = Vec::new();
        while let Some(&(var, _)) = block.vars.first() {
            let (p, rest) = block.eliminate(var)?;
            policies.push(p);
            block = rest;
        }
        let min = block.constant_value();
        let mut values = Assignment::new();
        for p in policies.iter().rev() {
            let v = p.apply(&values)?;
            values.insert(p.var, v);
        }
        Ok((values, min))
    }
}

impl LinearPolicy {
    pub fn var(&self) -> Var {
        self.var
    }

    pub fn dim(&self) -> usize {
        self.gain.nrows()
    }

    pub fn inputs(&self) -> &[(Var, usize)] {
        &self.inputs
    }

    /// Coefficients on the inputs, in input order.
    pub fn coefficients(&self) -> DMatrix<f64> {
        self.gain.columns(0, self.gain.ncols() - 1).into_owned()
    }

    pub fn offset(&self) -> DVector<f64> {
        self.gain.column(self.gain.ncols() - 1).into_owned()
    }

    pub fn apply(&self, values: &Assignment) -> Result<DVector<f64>> {
        Ok(&self.gain * augmented(&self.inputs, values)?)
    }
}

/// Row-major working copy for the triangularization, so that row updates are contiguous.
struct RowMajor {
    n: usize,
    data: Vec<f64>,
}

impl RowMajor {
    fn from_matrix(a: &DMatrix<f64>) -> Self {
        RowMajor { n: a.ncols(), data: a.transpose().as_slice().to_vec() }
    }

    fn nrows(&self) -> usize {
        self.data.len().checked_div(self.n).unwrap_or(0)
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    fn at(&self, i: usize, c: usize) -> f64 {
        self.data[i * self.n + c]
    }

    /// The selected rows restricted to columns `c0..`.
    fn select(&self, rows: &[usize], c0: usize) -> DMatrix<f64> {
        DMatrix::from_fn(rows.len(), self.n - c0, |i, j| self.at(rows[i], c0 + j))
    }

    fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.nrows(), self.n, &self.data)
    }
}

/// Sorted union of the labels of `blocks`.
fn union_vars(blocks: &[&QuadraticBlock]) -> Result<Vec<(Var, usize)>> {
    let mut dims: BTreeMap<Var, usize> = BTreeMap::new();
    for b in blocks {
        for &(var, d) in &b.vars {
            match dims.get(&var) {
                Some(&e) if e != d => {
                    return Err(Error::Labels(format!("{var:?} has dimension {e} in one block and {d} in another")));
                }
                Some(_) => {}
                None => {
                    dims.insert(var, d);
                }
            }
        }
    }
    Ok(dims.into_iter().collect())
}

/// Rows of all `blocks` with the groups of `vars` laid out in `order`, then the constant.
fn gather(blocks: &[&QuadraticBlock], vars: &[(Var, usize)], order: &[Var]) -> RowMajor {
    let dim = |var: Var| vars.iter().find(|v| v.0 == var).map_or(0, |v| v.1);
    let mut start = BTreeMap::new();
    let mut o = 0;
    for &var in order {
        start.insert(var, o);
        o += dim(var);
    }
    let n = o + 1;
    let m: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut data = vec![0.0; m * n];
    let mut r0 = 0;
    for b in blocks {
        let boff = offsets(&b.vars);
        let targets: Vec<(usize, usize, usize)> = b.vars.iter().enumerate().map(|(k, &(var, d))| (boff[k], start[&var], d)).collect();
        let nc = b.matrix.ncols();
        for i in 0..b.nrows() {
            let row = &mut data[(r0 + i) * n..(r0 + i + 1) * n];
            for &(src, dst, d) in &targets {
                for t in 0..d {
                    row[dst + t] = b.matrix[(i, src + t)];
                }
            }
            row[n - 1] = b.matrix[(i, nc - 1)];
        }
        r0 += b.nrows();
    }
    RowMajor { n, data }
}

/// First column with a nonzero entry in each row; `ncols` for zero rows.
fn leading_columns(a: &RowMajor) -> Vec<usize> {
    (0..a.nrows()).map(|i| a.row(i).iter().position(|&v| v != 0.0).unwrap_or(a.n)).collect()
}

/// Householder triangularization of columns `0..upto`, touching only rows whose
/// leading column is at most the current column. Returns each column's pivot row
/// (`None` when the column is already zero on the remaining rows).
fn triangularize(a: &mut RowMajor, lead: &mut [usize], active: &mut [bool], upto: usize) -> Vec<Option<usize>> {
    let n = a.n;
    let mut pivots = Vec::with_capacity(upto);
    let mut rows = Vec::new();
    let mut w = vec![0.0; n];
    for c in 0..upto {
        rows.clear();
        rows.extend((0..a.nrows()).filter(|&i| active[i] && lead[i] <= c));
        if rows.is_empty() {
            pivots.push(None);
            continue;
        }
        let norm = rows.iter().map(|&i| a.at(i, c).powi(2)).sum::<f64>().sqrt();
        if norm == 0.0 {
            for &i in &rows {
                lead[i] = c + 1;
            }
            pivots.push(None);
            continue;
        }
        let p = rows[0];
        if rows.len() > 1 {
            let x0 = a.at(p, c);
            let alpha = if x0 >= 0.0 { -norm } else { norm };
            let v0 = x0 - alpha;
            let vtv = v0 * v0 + rows[1..].iter().map(|&i| a.at(i, c).powi(2)).sum::<f64>();
            let tau = 2.0 / vtv;
            let w = &mut w[c + 1..n];
            for (wk, x) in w.iter_mut().zip(&a.data[p * n + c + 1..(p + 1) * n]) {
                *wk = v0 * x;
            }
            for &i in &rows[1..] {
                let vi = a.at(i, c);
                if vi != 0.0 {
                    for (wk, x) in w.iter_mut().zip(&a.data[i * n + c + 1..(i + 1) * n]) {
                        *wk += vi * x;
                    }
                }
            }
            for &i in &rows {
                let vi = if i == p { v0 } else { a.at(i, c) };
                if vi != 0.0 {
                    let s = tau * vi;
                    for (x, wk) in a.data[i * n + c + 1..(i + 1) * n].iter_mut().zip(w.iter()) {
                        *x -= s * wk;
                    }
                }
            }
            a.data[p * n + c] = alpha;
            for &i in &rows[1..] {
                a.data[i * n + c] = 0.0;
                lead[i] = c + 1;
            }
        }
        active[p] = false;
        pivots.push(Some(p));
    }
    pivots
}

/// Triangularizes `b` over all of its columns and keeps the nonzero rows, in
/// pivot order. The result has at most `ncols` rows and the same value everywhere.
fn compress(mut b: RowMajor) -> DMatrix<f64> {
    let n = b.n;
    let mut lead = leading_columns(&b);
    let mut active: Vec<bool> = lead.iter().map(|&l| l < n).collect();
    let pivots = triangularize(&mut b, &mut lead, &mut active, n);
    let rows: Vec<usize> = pivots.into_iter().flatten().collect();
    b.select(&rows, 0)
}

/// Unpivoted elimination of the first `n_r` columns. `None` when `R11` falls
/// below the rank tolerance.
fn eliminate_leading(mut a: RowMajor, n_r: usize) -> Option<(DMatrix<f64>, RowMajor)> {
    let n = a.n;
    let mut lead = leading_columns(&a);
    let mut active: Vec<bool> = lead.iter().map(|&l| l < n).collect();
    let pivots = triangularize(&mut a, &mut lead, &mut active, n_r);
    let rows: Vec<usize> = pivots.iter().copied().collect::<Option<Vec<_>>>()?;
    let diag: Vec<f64> = rows.iter().enumerate().map(|(c, &i)| a.at(i, c).abs()).collect();
    let max = diag.iter().cloned().fold(0.0, f64::max);
    if diag.iter().any(|&d| d <= RANK_TOLERANCE * max) {
        return None;
    }
    let r11 = DMatrix::from_fn(n_r, n_r, |i, j| a.at(rows[i], j));
    let rhs = -a.select(&rows, n_r);
    let gain = r11.solve_upper_triangular(&rhs)?;
    // keep the remaining rows in place, dropping the first n_r columns
    let mut k = 0;
    for (i, _) in active.iter().enumerate().filter(|(_, &keep)| keep) {
        a.data.copy_within(i * n + n_r..(i + 1) * n, k);
        k += n - n_r;
    }
    a.data.truncate(k);
    Some((gain, RowMajor { n: n - n_r, data: a.data }))
}

/// Column-pivoted elimination of the first `n_r` columns with the minimum-norm minimizer.
fn eliminate_pivoted(a: &DMatrix<f64>, n_r: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let m = a.nrows();
    let n = a.ncols();
    let mut a = a.clone();
    let mut perm: Vec<usize> = (0..n_r).collect();
    let mut rank = 0;
    let mut d0 = 0.0;
    for step in 0..n_r.min(m) {
        let (best, norm) = (step..n_r).map(|c| (c, a.view((step, c), (m - step, 1)).norm())).fold((step, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
        if step == 0 {
            d0 = norm;
        }
        if norm <= RANK_TOLERANCE * d0 || norm == 0.0 {
            break;
        }
        a.swap_columns(step, best);
        perm.swap(step, best);
        let x0 = a[(step, step)];
        let alpha = if x0 >= 0.0 { -norm } else { norm };
        let mut v = a.view((step, step), (m - step, 1)).into_owned();
        v[0] -= alpha;
        let vtv = v.norm_squared();
        if vtv > 0.0 {
            let tau = 2.0 / vtv;
            for col in step + 1..n {
                let w = v.dot(&a.view((step, col), (m - step, 1)));
                if w != 0.0 {
                    for i in 0..m - step {
                        a[(step + i, col)] -= tau * w * v[i];
                    }
                }
            }
        }
        a[(step, step)] = alpha;
        for i in step + 1..m {
            a[(i, step)] = 0.0;
        }
        rank += 1;
    }
    let mut gain = DMatrix::zeros(n_r, n - n_r);
    if rank > 0 {
        // R11 = [T1 T2] is rank x n_r; its minimum-norm solve goes through the QR of R11^T.
        let r11t = a.view((0, 0), (rank, n_r)).transpose();
        let qr = r11t.qr();
        let q = qr.q();
        let r = qr.r();
        let c = -a.view((0, n_r), (rank, n - n_r)).into_owned();
        let y = r.transpose().solve_lower_triangular(&c).unwrap_or_else(|| DMatrix::zeros(rank, n - n_r));
        let permuted = q * y;
        for (i, &p) in perm.iter().enumerate() {
            gain.row_mut(p).copy_from(&permuted.row(i));
        }
    }
    let rest = a.view((rank, n_r), (m - rank, n - n_r)).into_owned();
    (gain, rest)
}
