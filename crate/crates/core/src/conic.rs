//! Narrow interface to a symmetric-cone solver: linear objective, affine
//! expressions constrained to zero, nonnegative, second-order and PSD cones.
//! The backend is Clarabel.

use std::collections::BTreeMap;
use std::ops::{Add, Mul, Neg, Sub};

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Affine expression `Σ cᵢ xᵢ + d`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Affine {
    pub terms: Vec<(usize, f64)>,
    pub constant: f64,
}

impl Affine {
    pub fn constant(d: f64) -> Self {
        Self { terms: Vec::new(), constant: d }
    }

    pub fn var(i: usize) -> Self {
        Self { terms: vec![(i, 1.0)], constant: 0.0 }
    }

    pub fn term(i: usize, c: f64) -> Self {
        Self { terms: vec![(i, c)], constant: 0.0 }
    }

    pub fn add_term(&mut self, i: usize, c: f64) -> &mut Self {
        if c != 0.0 {
            self.terms.push((i, c));
        }
        self
    }

    pub fn add_const(&mut self, d: f64) -> &mut Self {
        self.constant += d;
        self
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.constant + self.terms.iter().map(|&(i, c)| c * x[i]).sum::<f64>()
    }

    pub fn scaled(mut self, s: f64) -> Self {
        for t in &mut self.terms {
            t.1 *= s;
        }
        self.constant *= s;
        self
    }
}

impl Add for Affine {
    type Output = Affine;
    fn add(mut self, rhs: Affine) -> Affine {
        self.terms.extend(rhs.terms);
        self.constant += rhs.constant;
        self
    }
}

impl Sub for Affine {
    type Output = Affine;
    fn sub(self, rhs: Affine) -> Affine {
        self + rhs.scaled(-1.0)
    }
}

impl Neg for Affine {
    type Output = Affine;
    fn neg(self) -> Affine {
        self.scaled(-1.0)
    }
}

impl Mul<f64> for Affine {
    type Output = Affine;
    fn mul(self, s: f64) -> Affine {
        self.scaled(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConicStatus {
    Optimal,
    Infeasible,
    Unbounded,
    SolverLimit,
    Numerical,
}

#[derive(Clone, Copy, Debug)]
pub struct ConicOptions {
    pub max_iter: u32,
    pub tol_gap: f64,
    pub tol_feas: f64,
    pub verbose: bool,
}

impl Default for ConicOptions {
    fn default() -> Self {
        Self { max_iter: 200, tol_gap: 1e-9, tol_feas: 1e-9, verbose: false }
    }
}

#[derive(Clone, Debug)]
pub struct ConicSolution {
    pub status: ConicStatus,
    pub x: Vec<f64>,
    pub objective: f64,
    pub iterations: u32,
}

/// Program `min cᵀx` over affine cone memberships.
#[derive(Clone, Debug, Default)]
pub struct ConicProgram {
    n_vars: usize,
    objective: Affine,
    zero: Vec<Affine>,
    nonneg: Vec<Affine>,
    soc: Vec<Vec<Affine>>,
    psd: Vec<(usize, Vec<Affine>)>,
}

impl ConicProgram {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn n_vars(&self) -> usize {
        self.n_vars
    }

    pub fn var(&mut self) -> usize {
        self.n_vars += 1;
        self.n_vars - 1
    }

    pub fn vars(&mut self, k: usize) -> Vec<usize> {
        (0..k).map(|_| self.var()).collect()
    }

    pub fn minimize(&mut self, objective: Affine) {
        self.objective = objective;
    }

    /// `expr = 0`.
    pub fn eq(&mut self, expr: Affine) {
        self.zero.push(expr);
    }

    /// `expr ≥ 0`.
    pub fn nonneg(&mut self, expr: Affine) {
        self.nonneg.push(expr);
    }

    /// `lhs ≤ rhs`.
    pub fn le(&mut self, lhs: Affine, rhs: Affine) {
        self.nonneg.push(rhs - lhs);
    }

    /// `exprs[0] ≥ ‖exprs[1..]‖₂`.
    pub fn soc(&mut self, exprs: Vec<Affine>) {
        assert!(!exprs.is_empty(), "second-order cone needs at least one entry");
        self.soc.push(exprs);
    }

    /// `m ⪰ 0` for a symmetric matrix of affine entries; only the upper
    /// triangle of `m` is read.
    pub fn psd(&mut self, m: &[Vec<Affine>]) {
        let n = m.len();
        let mut svec = Vec::with_capacity(n * (n + 1) / 2);
        for j in 0..n {
            for (i, row) in m.iter().enumerate().take(j + 1) {
                let e = row[j].clone();
                svec.push(if i == j { e } else { e.scaled(std::f64::consts::SQRT_2) });
            }
        }
        self.psd.push((n, svec));
    }

    pub fn solve(&self, opts: &ConicOptions) -> Result<ConicSolution> {
        let n = self.n_vars;
        let mut cols: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); n];
        let mut b = Vec::new();
        let mut cones = Vec::new();
        let push_row = |expr: &Affine, cols: &mut Vec<BTreeMap<usize, f64>>, b: &mut Vec<f64>| {
            let row = b.len();
            for &(i, c) in &expr.terms {
                // s = expr = d + cᵀx, and Clarabel wants A x + s = b
                *cols[i].entry(row).or_insert(0.0) -= c;
            }
            b.push(expr.constant);
        };
        if !self.zero.is_empty() {
            for e in &self.zero {
                push_row(e, &mut cols, &mut b);
            }
            cones.push(SupportedConeT::ZeroConeT(self.zero.len()));
        }
        if !self.nonneg.is_empty() {
            for e in &self.nonneg {
                push_row(e, &mut cols, &mut b);
            }
            cones.push(SupportedConeT::NonnegativeConeT(self.nonneg.len()));
        }
        for s in &self.soc {
            for e in s {
                push_row(e, &mut cols, &mut b);
            }
            cones.push(SupportedConeT::SecondOrderConeT(s.len()));
        }
        for (dim, svec) in &self.psd {
            for e in svec {
                push_row(e, &mut cols, &mut b);
            }
            cones.push(SupportedConeT::PSDTriangleConeT(*dim));
        }
        let m = b.len();
        let mut colptr = Vec::with_capacity(n + 1);
        let mut rowval = Vec::new();
        let mut nzval = Vec::new();
        colptr.push(0);
        for col in &cols {
            for (&r, &v) in col {
                if v != 0.0 {
                    rowval.push(r);
                    nzval.push(v);
                }
            }
            colptr.push(rowval.len());
        }
        let a = CscMatrix::new(m, n, colptr, rowval, nzval);
        let p = CscMatrix::<f64>::zeros((n, n));
        let mut q = vec![0.0; n];
        for &(i, c) in &self.objective.terms {
            q[i] += c;
        }
        if q.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("conic program data"));
        }
        let settings = DefaultSettingsBuilder::default()
            .verbose(opts.verbose)
            .max_iter(opts.max_iter)
            .tol_gap_abs(opts.tol_gap)
            .tol_gap_rel(opts.tol_gap)
            .tol_feas(opts.tol_feas)
            .build()
            .map_err(|e| Error::Solver(format!("{e:?}")))?;
        let mut solver = DefaultSolver::new(&p, &q, &a, &b, &cones, settings)
            .map_err(|e| Error::Solver(format!("{e:?}")))?;
        solver.solve();
        let sol = &solver.solution;
        let status = match sol.status {
            SolverStatus::Solved | SolverStatus::AlmostSolved => ConicStatus::Optimal,
            SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
                ConicStatus::Infeasible
            }
            SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => ConicStatus::Unbounded,
            SolverStatus::MaxIterations | SolverStatus::MaxTime => ConicStatus::SolverLimit,
            _ => ConicStatus::Numerical,
        };
        Ok(ConicSolution {
            status,
            x: sol.x.clone(),
            objective: sol.obj_val + self.objective.constant,
            iterations: sol.iterations,
        })
    }
}
