//! Exact small-instance oracle: the occupancy-measure linear program of a
//! CMDP, solved by a dense revised simplex method.

use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::cmdp::{AgentPolicy, TabularCmdp};
use crate::env::Action;
use crate::error::{DccError, Result};

const PRICE_TOL: f64 = 1e-10;
const PIVOT_TOL: f64 = 1e-9;
/// Primal infeasibility tolerated by the ratio test.
const FEAS_TOL: f64 = 1e-9;
const REFACTOR_EVERY: usize = 100;
/// Degenerate pivots in a row before switching to Bland's rule.
const STALL_LIMIT: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseColumn {
    pub rows: Vec<usize>,
    pub values: Vec<f64>,
}

/// `min c'x  s.t.  A x = b,  x >= 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardLp {
    pub n_rows: usize,
    pub columns: Vec<SparseColumn>,
    pub objective: Vec<f64>,
    pub rhs: Vec<f64>,
    pub column_names: Vec<String>,
    pub row_names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpSolution {
    pub x: Vec<f64>,
    pub objective: f64,
    /// Simplex multipliers `y = c_B B^-1`: the derivative of the optimal
    /// value with respect to each right-hand side.
    pub duals: Vec<f64>,
    pub basis: Vec<usize>,
    pub pivots: usize,
}

impl StandardLp {
    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    fn validate(&self) -> Result<()> {
        let n = self.columns.len();
        if self.objective.len() != n || self.rhs.len() != self.n_rows {
            return Err(DccError::Lp("dimension mismatch".into()));
        }
        for col in &self.columns {
            if col.rows.len() != col.values.len() || col.rows.iter().any(|&r| r >= self.n_rows) {
                return Err(DccError::Lp("malformed column".into()));
            }
        }
        Ok(())
    }

    /// Writes the problem in CPLEX LP text format.
    pub fn write_lp_format<W: Write>(&self, mut out: W) -> Result<()> {
        let name = |j: usize| self.column_names.get(j).cloned().unwrap_or_else(|| format!("x{j}"));
        let mut text = String::from("\\ occupancy-measure linear program\nMinimize\n obj:");
        for (j, &c) in self.objective.iter().enumerate() {
            if c != 0.0 {
                write!(text, " {} {:.17e} {}", if c < 0.0 { '-' } else { '+' }, c.abs(), name(j)).unwrap();
            }
        }
        text.push_str("\nSubject To\n");
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); self.n_rows];
        for (j, col) in self.columns.iter().enumerate() {
            for (&r, &v) in col.rows.iter().zip(&col.values) {
                rows[r].push((j, v));
            }
        }
        for (r, entries) in rows.iter().enumerate() {
            let rname = self.row_names.get(r).cloned().unwrap_or_else(|| format!("c{r}"));
            write!(text, " {rname}:").unwrap();
            for &(j, v) in entries {
                write!(text, " {} {:.17e} {}", if v < 0.0 { '-' } else { '+' }, v.abs(), name(j)).unwrap();
            }
            writeln!(text, " = {:.17e}", self.rhs[r]).unwrap();
        }
        text.push_str("End\n");
        out.write_all(text.as_bytes())?;
        Ok(())
    }
}

struct Simplex<'a> {
    lp: &'a StandardLp,
    cost: Vec<f64>,
    /// Columns that may enter the basis.
    enterable: Vec<bool>,
    m: usize,
    basis: Vec<usize>,
    in_basis: Vec<bool>,
    binv: Vec<f64>,
    xb: Vec<f64>,
    pivots: usize,
    since_refactor: usize,
}

enum Outcome {
    Optimal,
    Unbounded,
}

impl<'a> Simplex<'a> {
    fn new(lp: &'a StandardLp, cost: Vec<f64>, enterable: Vec<bool>, basis: Vec<usize>) -> Result<Self> {
        let m = lp.n_rows;
        let mut in_basis = vec![false; lp.n_cols()];
        for &j in &basis {
            in_basis[j] = true;
        }
        let mut s = Simplex {
            lp,
            cost,
            enterable,
            m,
            basis,
            in_basis,
            binv: vec![0.0; m * m],
            xb: vec![0.0; m],
            pivots: 0,
            since_refactor: 0,
        };
        s.refactor()?;
        Ok(s)
    }

    fn refactor(&mut self) -> Result<()> {
        let m = self.m;
        let mut b = vec![0.0; m * m];
        for (k, &j) in self.basis.iter().enumerate() {
            let col = &self.lp.columns[j];
            for (&r, &v) in col.rows.iter().zip(&col.values) {
                b[r * m + k] = v;
            }
        }
        self.binv = invert(b, m).ok_or_else(|| DccError::Lp("singular basis".into()))?;
        self.xb = self.apply_binv(&self.lp.rhs);
        // one step of iterative refinement on the basic solution
        let mut resid = self.lp.rhs.clone();
        for (k, &j) in self.basis.iter().enumerate() {
            let col = &self.lp.columns[j];
            for (&r, &v) in col.rows.iter().zip(&col.values) {
                resid[r] -= v * self.xb[k];
            }
        }
        let corr = self.apply_binv(&resid);
        for (x, c) in self.xb.iter_mut().zip(corr) {
            *x += c;
        }
        self.since_refactor = 0;
        Ok(())
    }

    fn apply_binv(&self, v: &[f64]) -> Vec<f64> {
        let m = self.m;
        (0..m)
            .map(|i| {
                let row = &self.binv[i * m..(i + 1) * m];
                row.iter().zip(v).map(|(a, b)| a * b).sum()
            })
            .collect()
    }

    fn column_ftran(&self, j: usize) -> Vec<f64> {
        let m = self.m;
        let col = &self.lp.columns[j];
        let mut u = vec![0.0; m];
        for (&r, &v) in col.rows.iter().zip(&col.values) {
            for (i, ui) in u.iter_mut().enumerate() {
                *ui += self.binv[i * m + r] * v;
            }
        }
        u
    }

    fn duals(&self) -> Vec<f64> {
        let m = self.m;
        let mut y = vec![0.0; m];
        for (i, &j) in self.basis.iter().enumerate() {
            let c = self.cost[j];
            if c == 0.0 {
                continue;
            }
            let row = &self.binv[i * m..(i + 1) * m];
            for (yk, b) in y.iter_mut().zip(row) {
                *yk += c * b;
            }
        }
        y
    }

    fn reduced_cost(&self, j: usize, y: &[f64]) -> f64 {
        let col = &self.lp.columns[j];
        self.cost[j] - col.rows.iter().zip(&col.values).map(|(&r, &v)| y[r] * v).sum::<f64>()
    }

    fn run(&mut self, max_pivots: usize) -> Result<Outcome> {
        let mut stall = 0usize;
        loop {
            let y = self.duals();
            let bland = stall >= STALL_LIMIT;
            let mut entering = None;
            let mut best = -PRICE_TOL;
            for j in 0..self.lp.n_cols() {
                if self.in_basis[j] || !self.enterable[j] {
                    continue;
                }
                let d = self.reduced_cost(j, &y);
                if d < best {
                    entering = Some(j);
                    if bland {
                        break;
                    }
                    best = d;
                }
            }
            let Some(q) = entering else {
                if self.since_refactor > 0 || !self.basis.is_sorted() {
                    // confirm optimality on a fresh factorization, with the basis in
                    // canonical order so identical bases give identical numbers
                    self.basis.sort_unstable();
                    self.refactor()?;
                    continue;
                }
                return Ok(Outcome::Optimal);
            };
            if self.pivots >= max_pivots {
                return Err(DccError::Lp(format!("no convergence after {max_pivots} pivots")));
            }
            let u = self.column_ftran(q);
            let leave = if bland { self.ratio_test_bland(&u) } else { self.ratio_test_harris(&u) };
            let Some((r, step)) = leave else {
                return Ok(Outcome::Unbounded);
            };
            stall = if step == 0.0 { stall + 1 } else { 0 };
            self.pivot(r, q, &u, step);
            if self.since_refactor >= REFACTOR_EVERY {
                self.refactor()?;
            }
        }
    }

    /// Smallest ratio, ties to the lowest column index.
    fn ratio_test_bland(&self, u: &[f64]) -> Option<(usize, f64)> {
        let mut leave: Option<(usize, f64)> = None;
        for i in 0..self.m {
            if u[i] > PIVOT_TOL {
                let ratio = self.xb[i].max(0.0) / u[i];
                let better = match leave {
                    None => true,
                    Some((r, best)) => ratio < best || (ratio == best && self.basis[i] < self.basis[r]),
                };
                if better {
                    leave = Some((i, ratio));
                }
            }
        }
        leave
    }

    /// Two-pass ratio test: bound the step with slightly relaxed bounds,
    /// then take the largest pivot among the rows within that bound.
    fn ratio_test_harris(&self, u: &[f64]) -> Option<(usize, f64)> {
        let mut bound = f64::INFINITY;
        for i in 0..self.m {
            if u[i] > PIVOT_TOL {
                bound = bound.min((self.xb[i].max(0.0) + FEAS_TOL) / u[i]);
            }
        }
        if bound == f64::INFINITY {
            return None;
        }
        let mut leave: Option<usize> = None;
        for i in 0..self.m {
            if u[i] > PIVOT_TOL && self.xb[i].max(0.0) / u[i] <= bound {
                let better = match leave {
                    None => true,
                    Some(r) => u[i] > u[r] || (u[i] == u[r] && self.basis[i] < self.basis[r]),
                };
                if better {
                    leave = Some(i);
                }
            }
        }
        leave.map(|r| (r, self.xb[r].max(0.0) / u[r]))
    }

    fn pivot(&mut self, r: usize, q: usize, u: &[f64], step: f64) {
        let m = self.m;
        for (i, x) in self.xb.iter_mut().enumerate() {
            *x -= step * u[i];
        }
        self.xb[r] = step;
        let piv = u[r];
        for k in 0..m {
            self.binv[r * m + k] /= piv;
        }
        let (head, rest) = self.binv.split_at_mut(r * m);
        let (prow, tail) = rest.split_at_mut(m);
        for (i, &ui) in u.iter().enumerate() {
            if i == r || ui == 0.0 {
                continue;
            }
            let row = if i < r {
                &mut head[i * m..(i + 1) * m]
            } else {
                let off = (i - r - 1) * m;
                &mut tail[off..off + m]
            };
            for (a, b) in row.iter_mut().zip(prow.iter()) {
                *a -= ui * b;
            }
        }
        self.in_basis[self.basis[r]] = false;
        self.in_basis[q] = true;
        self.basis[r] = q;
        self.pivots += 1;
        self.since_refactor += 1;
    }

    fn finish(self, n_cols: usize) -> Result<LpSolution> {
        let y = self.duals();
        let mut x = vec![0.0; n_cols];
        for (k, &j) in self.basis.iter().enumerate() {
            if j < n_cols {
                x[j] = self.xb[k].max(0.0);
            }
        }
        let objective = self
            .basis
            .iter()
            .zip(&self.xb)
            .map(|(&j, &v)| self.cost[j] * v)
            .sum();
        Ok(LpSolution {
            x,
            objective,
            duals: y,
            basis: self.basis,
            pivots: self.pivots,
        })
    }
}

/// Gauss-Jordan inversion of a row-major `m x m` matrix with partial
/// pivoting. Zero multipliers are skipped, which keeps sparse bases cheap.
fn invert(mut a: Vec<f64>, m: usize) -> Option<Vec<f64>> {
    let mut inv = vec![0.0; m * m];
    for i in 0..m {
        inv[i * m + i] = 1.0;
    }
    for col in 0..m {
        let p = (col..m).max_by(|&x, &y| a[x * m + col].abs().total_cmp(&a[y * m + col].abs()))?;
        if a[p * m + col].abs() < 1e-13 {
            return None;
        }
        if p != col {
            for k in 0..m {
                a.swap(p * m + k, col * m + k);
                inv.swap(p * m + k, col * m + k);
            }
        }
        let d = a[col * m + col];
        for k in 0..m {
            a[col * m + k] /= d;
            inv[col * m + k] /= d;
        }
        let prow_a = a[col * m..(col + 1) * m].to_vec();
        let prow_i = inv[col * m..(col + 1) * m].to_vec();
        // column support of the pivot rows, to skip structural zeros
        let nz_a: Vec<usize> = (col..m).filter(|&k| prow_a[k] != 0.0).collect();
        let nz_i: Vec<usize> = (0..m).filter(|&k| prow_i[k] != 0.0).collect();
        for r in 0..m {
            if r == col {
                continue;
            }
            let f = a[r * m + col];
            if f == 0.0 {
                continue;
            }
            for &k in &nz_a {
                a[r * m + k] -= f * prow_a[k];
            }
            for &k in &nz_i {
                inv[r * m + k] -= f * prow_i[k];
            }
        }
    }
    Some(inv)
}

/// Solves `lp`, starting from `initial_basis` when given (it must be primal
/// feasible), otherwise from a phase-one problem with artificial columns.
pub fn solve_lp(lp: &StandardLp, initial_basis: Option<&[usize]>) -> Result<LpSolution> {
    lp.validate()?;
    let n = lp.n_cols();
    let max_pivots = 50 * (lp.n_rows + n) + 1000;
    if let Some(basis) = initial_basis {
        if basis.len() != lp.n_rows || basis.iter().any(|&j| j >= n) {
            return Err(DccError::Lp("initial basis has the wrong shape".into()));
        }
        let mut simplex = Simplex::new(lp, lp.objective.clone(), vec![true; n], basis.to_vec())?;
        if simplex.xb.iter().any(|&v| v < -1e-9) {
            return Err(DccError::Lp("initial basis is not primal feasible".into()));
        }
        return match simplex.run(max_pivots)? {
            Outcome::Optimal => simplex.finish(n),
            Outcome::Unbounded => Err(DccError::Lp("unbounded".into())),
        };
    }

    // phase one: artificial column per row, rows flipped so that b >= 0
    let m = lp.n_rows;
    let mut ext = lp.clone();
    for r in 0..m {
        if lp.rhs[r] < 0.0 {
            ext.rhs[r] = -lp.rhs[r];
            for col in ext.columns.iter_mut() {
                for (rr, v) in col.rows.iter().zip(col.values.iter_mut()) {
                    if *rr == r {
                        *v = -*v;
                    }
                }
            }
        }
    }
    for r in 0..m {
        ext.columns.push(SparseColumn {
            rows: vec![r],
            values: vec![1.0],
        });
    }
    let mut cost1 = vec![0.0; n];
    cost1.extend(std::iter::repeat_n(1.0, m));
    let basis: Vec<usize> = (n..n + m).collect();
    let mut enterable = vec![true; n];
    enterable.extend(std::iter::repeat_n(false, m));
    let mut phase1 = Simplex::new(&ext, cost1, enterable.clone(), basis)?;
    phase1.run(max_pivots)?;
    let infeasibility: f64 = phase1
        .basis
        .iter()
        .zip(&phase1.xb)
        .filter(|(&j, _)| j >= n)
        .map(|(_, &v)| v)
        .sum();
    let scale = 1.0 + ext.rhs.iter().map(|v| v.abs()).sum::<f64>();
    if infeasibility > 1e-9 * scale {
        return Err(DccError::Lp(format!("infeasible (phase-one residual {infeasibility:e})")));
    }
    // drive zero-valued artificials out where a real column can replace them
    for r in 0..m {
        if phase1.basis[r] < n {
            continue;
        }
        let row = &phase1.binv[r * m..(r + 1) * m];
        let candidate = (0..n).filter(|&j| !phase1.in_basis[j]).find(|&j| {
            let col = &ext.columns[j];
            let v: f64 = col.rows.iter().zip(&col.values).map(|(&k, &a)| row[k] * a).sum();
            v.abs() > 1e-7
        });
        if let Some(q) = candidate {
            let u = phase1.column_ftran(q);
            phase1.pivot(r, q, &u, 0.0);
            phase1.xb[r] = 0.0;
        }
    }
    let basis = phase1.basis.clone();
    let mut cost2 = ext.objective.clone();
    cost2.extend(std::iter::repeat_n(0.0, m));
    let mut phase2 = Simplex::new(&ext, cost2, enterable, basis)?;
    match phase2.run(max_pivots)? {
        Outcome::Optimal => {
            let mut sol = phase2.finish(n)?;
            for r in 0..m {
                if lp.rhs[r] < 0.0 {
                    sol.duals[r] = -sol.duals[r];
                }
            }
            Ok(sol)
        }
        Outcome::Unbounded => Err(DccError::Lp("unbounded".into())),
    }
}

/// Optimal discounted occupancy measure of a CMDP with its duals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccupancyMeasure {
    /// `rho[s][a]`, zero for inadmissible actions. Total mass `1 / (1 - gamma)`.
    pub rho: Vec<[f64; 3]>,
    pub objective: f64,
    /// Multiplier of the offload constraint, `>= 0`; minus the slope of
    /// the optimal value in the threshold.
    pub lambda: f64,
    pub flow_duals: Vec<f64>,
    /// Realized discounted offload cost `sum rho c`.
    pub cost: f64,
    pub threshold: f64,
    pub pivots: usize,
    /// Optimal basis, reusable as a warm start for nearby problems on the
    /// same kernel.
    pub basis: Vec<usize>,
}

impl OccupancyMeasure {
    pub fn total_mass(&self) -> f64 {
        self.rho.iter().flatten().sum()
    }

    pub fn binding(&self) -> bool {
        self.lambda > 1e-9
    }
}

/// Column layout of the CMDP linear program.
#[derive(Debug, Clone)]
pub struct CmdpLp {
    pub lp: StandardLp,
    /// `(state, action)` of every occupancy column; the last column is the
    /// constraint slack.
    pub pairs: Vec<(usize, Action)>,
}

/// Builds `min sum rho r  s.t.  flow conservation,  sum rho c + slack = theta`.
pub fn cmdp_lp(cmdp: &TabularCmdp, theta_i: f64) -> CmdpLp {
    let n = cmdp.len();
    let g = cmdp.discount();
    let mut columns = Vec::new();
    let mut objective = Vec::new();
    let mut names = Vec::new();
    let mut pairs = Vec::new();
    for s in 0..n {
        for a in cmdp.actions(s) {
            let mut entries: Vec<(usize, f64)> = vec![(s, 1.0)];
            for (t, p) in cmdp.kernel().row(s, a) {
                entries.push((t, -g * p));
            }
            entries.sort_by_key(|e| e.0);
            let mut merged: Vec<(usize, f64)> = Vec::with_capacity(entries.len());
            for (r, v) in entries {
                match merged.last_mut() {
                    Some(last) if last.0 == r => last.1 += v,
                    _ => merged.push((r, v)),
                }
            }
            if a.is_crowd() {
                merged.push((n, cmdp.cost(s, a)));
            }
            columns.push(SparseColumn {
                rows: merged.iter().map(|e| e.0).collect(),
                values: merged.iter().map(|e| e.1).collect(),
            });
            objective.push(cmdp.reward(s, a));
            names.push(format!("rho_{s}_{}", a.index()));
            pairs.push((s, a));
        }
    }
    columns.push(SparseColumn {
        rows: vec![n],
        values: vec![1.0],
    });
    objective.push(0.0);
    names.push("slack".into());
    let mut rhs = cmdp.beta().to_vec();
    rhs.push(theta_i);
    let mut row_names: Vec<String> = (0..n).map(|s| format!("flow_{s}")).collect();
    row_names.push("offload".into());
    CmdpLp {
        lp: StandardLp {
            n_rows: n + 1,
            columns,
            objective,
            rhs,
            column_names: names,
            row_names,
        },
        pairs,
    }
}

/// Best never-offloading deterministic policy, by value iteration.
fn never_offload_policy(cmdp: &TabularCmdp) -> Vec<Action> {
    let n = cmdp.len();
    let g = cmdp.discount();
    let mut v = vec![0.0; n];
    let mut choice = vec![Action::Wait; n];
    for _ in 0..10_000 {
        let mut delta: f64 = 0.0;
        for s in 0..n {
            let mut best = f64::INFINITY;
            for a in cmdp.actions(s).filter(|a| !a.is_crowd()) {
                let q = cmdp.reward(s, a) + g * cmdp.kernel().row(s, a).map(|(t, p)| p * v[t]).sum::<f64>();
                if q < best - 1e-12 {
                    best = q;
                    choice[s] = a;
                }
            }
            delta = delta.max((best - v[s]).abs());
            v[s] = best;
        }
        if delta < 1e-10 {
            break;
        }
    }
    choice
}

/// Solves the occupancy-measure LP of `cmdp` with threshold `theta_i`
/// (discounted units).
pub fn solve_cmdp_lp(cmdp: &TabularCmdp, theta_i: f64) -> Result<OccupancyMeasure> {
    solve_cmdp_lp_warm(cmdp, theta_i, None)
}

/// Like [`solve_cmdp_lp`], starting from `warm` (the basis of an earlier
/// solve on the same kernel) when it is still primal feasible.
pub fn solve_cmdp_lp_warm(cmdp: &TabularCmdp, theta_i: f64, warm: Option<&[usize]>) -> Result<OccupancyMeasure> {
    if !(0.0..=cmdp.theta_max() + 1e-12).contains(&theta_i) {
        return Err(DccError::Domain(format!("threshold {theta_i} outside [0, {}]", cmdp.theta_max())));
    }
    let built = cmdp_lp(cmdp, theta_i);
    let n = cmdp.len();
    let warm_sol = warm.and_then(|w| solve_lp(&built.lp, Some(w)).ok());
    let sol = match warm_sol {
        Some(sol) => Ok(sol),
        None => {
            // a deterministic never-offloading policy plus the slack is a feasible basis
            let start = never_offload_policy(cmdp);
            let mut basis: Vec<usize> = start
                .iter()
                .enumerate()
                .map(|(s, &a)| built.pairs.iter().position(|&p| p == (s, a)).expect("admissible pair"))
                .collect();
            basis.push(built.pairs.len());
            solve_lp(&built.lp, Some(&basis))
        }
    }
    .map_err(|e| match e {
        DccError::Lp(msg) => DccError::Internal(format!("CMDP linear program: {msg}")),
        other => other,
    })?;
    let mut rho = vec![[0.0; 3]; n];
    let mut cost = 0.0;
    for (k, &(s, a)) in built.pairs.iter().enumerate() {
        rho[s][a.index()] = sol.x[k];
        cost += cmdp.cost(s, a) * sol.x[k];
    }
    Ok(OccupancyMeasure {
        rho,
        objective: sol.objective,
        lambda: (-sol.duals[n]).max(0.0),
        flow_duals: sol.duals[..n].to_vec(),
        cost,
        threshold: theta_i,
        pivots: sol.pivots,
        basis: sol.basis,
    })
}

/// `pi(a|s) = rho(s,a) / sum_a' rho(s,a')`, uniform over the admissible
/// actions where the state carries no mass.
pub fn policy_from_occupancy(cmdp: &TabularCmdp, occ: &OccupancyMeasure) -> Result<AgentPolicy> {
    if occ.rho.len() != cmdp.len() {
        return Err(DccError::Contract("occupancy measure does not match the CMDP".into()));
    }
    let probs = occ
        .rho
        .iter()
        .enumerate()
        .map(|(s, row)| {
            let total: f64 = row.iter().sum();
            if total > 0.0 {
                row.map(|v| v / total)
            } else {
                let k = cmdp.actions(s).count() as f64;
                let mut out = [0.0; 3];
                for a in cmdp.actions(s) {
                    out[a.index()] = 1.0 / k;
                }
                out
            }
        })
        .collect();
    AgentPolicy::from_probs(cmdp, probs)
}
