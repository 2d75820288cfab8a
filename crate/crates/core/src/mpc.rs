//! Reduced-order optimal control with tightened constraints, transcribed on
//! a ZOH grid and solved as a second-order cone program.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::bounding::{comparison_step, simulate_bound, RobustPredictor};
use crate::conic::{Affine, ConicOptions, ConicProgram, ConicStatus};
use crate::error::{Error, Result};
use crate::lti::{zoh_discretize, ProblemData, SampledSignal};
use crate::reduction::ReducedModel;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Robust,
    Naive,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OcpStatus {
    Optimal,
    Infeasible,
    SolverLimit,
}

/// Tangent `δ ↦ α + βδ` of `√(cδ)` at `δ₀`; it over-estimates the square
/// root for every `δ ≥ 0`.
pub fn sqrt_tangent_overestimator(delta0: f64, c: f64) -> Result<(f64, f64)> {
    if !(delta0 > 0.0 && delta0.is_finite()) {
        return Err(Error::InvalidArgument(format!("tangent point must be positive, got {delta0}")));
    }
    if !(c >= 0.0 && c.is_finite()) {
        return Err(Error::InvalidArgument("tangent scale must be non-negative".into()));
    }
    let root = (c * delta0).sqrt();
    if root == 0.0 {
        return Ok((0.0, 0.0));
    }
    let beta = c / (2.0 * root);
    Ok((root - beta * delta0, beta))
}

#[derive(Clone, Debug)]
pub struct OcpSpec {
    pub rom: ReducedModel,
    /// Required in robust mode.
    pub predictor: Option<RobustPredictor>,
    pub data: ProblemData,
    pub dt: f64,
    pub mode: Mode,
    /// Tangent points `δ₀,k` for `k = 0..=N`; `None` uses `initial_radius`.
    pub linearization: Option<Vec<f64>>,
    /// Tube radius whose tangent point seeds the first pass.
    pub initial_radius: f64,
    pub scp_passes: usize,
    pub delta_floor: f64,
    /// Factor on `L_g·δ_z` in the tightening (1 = as derived).
    pub tightening_margin: f64,
    pub conic: ConicOptions,
}

impl OcpSpec {
    pub fn new(rom: ReducedModel, predictor: Option<RobustPredictor>, data: ProblemData, dt: f64, mode: Mode) -> Self {
        Self {
            rom,
            predictor,
            data,
            dt,
            mode,
            linearization: None,
            initial_radius: 0.05,
            scp_passes: 2,
            delta_floor: 1e-12,
            tightening_margin: 1.0,
            conic: ConicOptions::default(),
        }
    }

    pub fn steps(&self) -> Result<usize> {
        let n = self.data.horizon / self.dt;
        let k = n.round();
        if !(self.dt > 0.0) || k < 1.0 || (n - k).abs() > 1e-9 * n {
            return Err(Error::InvalidArgument(format!(
                "horizon {} is not a whole number of steps of {}",
                self.data.horizon, self.dt
            )));
        }
        Ok(k as usize)
    }

    fn validate(&self) -> Result<()> {
        self.data.validate(self.rom.c_r.nrows(), self.rom.b_r.ncols())?;
        self.steps()?;
        if self.scp_passes == 0 {
            return Err(Error::InvalidArgument("at least one pass is required".into()));
        }
        if !(self.delta_floor > 0.0) {
            return Err(Error::InvalidArgument("δ floor must be positive".into()));
        }
        if !(self.tightening_margin >= 1.0) {
            return Err(Error::InvalidArgument("tightening margin must be at least 1".into()));
        }
        if self.mode == Mode::Robust {
            let p = self
                .predictor
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("robust mode needs a predictor".into()))?;
            if p.rom.a_r != self.rom.a_r {
                return Err(Error::InvalidArgument("predictor belongs to a different reduced model".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PassInfo {
    /// Cost of the recovered solution.
    pub objective: f64,
    /// Objective as reported by the conic solver.
    pub solver_objective: f64,
    pub status: ConicStatus,
    pub solve_seconds: f64,
    pub iterations: u32,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OcpSolution {
    pub mode: Mode,
    pub status: OcpStatus,
    pub times: Vec<f64>,
    pub u: SampledSignal,
    #[serde(with = "crate::serde_mat")]
    pub x_r: DMatrix<f64>,
    #[serde(with = "crate::serde_mat")]
    pub psi: DMatrix<f64>,
    #[serde(with = "crate::serde_mat")]
    pub z_r: DMatrix<f64>,
    pub delta_chi: Vec<f64>,
    /// `√(γλδ̄)` at the grid points.
    pub delta_z: Vec<f64>,
    /// Tangent surrogate `α_k + β_k δ̄_k` used in the program.
    pub delta_z_surrogate: Vec<f64>,
    pub s: Vec<f64>,
    pub j_star: f64,
    pub passes: Vec<PassInfo>,
    pub solve_seconds: f64,
}

impl OcpSolution {
    pub fn to_csv_rows(&self) -> (Vec<String>, Vec<Vec<f64>>) {
        let (nu, nz) = (self.u.channels(), self.z_r.nrows());
        let name = |base: &str, n: usize, i: usize| if n == 1 { base.to_string() } else { format!("{base}_{i}") };
        let mut header = vec!["t".to_string()];
        header.extend((0..nu).map(|i| name("u", nu, i)));
        header.extend((0..nz).map(|i| name("z_r", nz, i)));
        header.push("delta_z".into());
        let n = self.u.len();
        let rows = (0..self.times.len())
            .map(|k| {
                let mut r = vec![self.times[k]];
                // the input holds over [t_k, t_k+1); repeat the last value at T
                r.extend(self.u.values.column(k.min(n - 1)).iter());
                r.extend(self.z_r.column(k).iter());
                r.push(self.delta_z[k]);
                r
            })
            .collect();
        (header, rows)
    }

    pub fn summary(&self) -> serde_json::Value {
        serde_json::json!({
            "J_star": self.j_star,
            "status": self.status,
            "mode": self.mode,
            "solve_seconds": self.solve_seconds,
            "passes": self.passes.len(),
        })
    }
}

/// Variable layout of one transcription.
struct Layout {
    u: Vec<Vec<usize>>,
    q: Vec<Vec<usize>>,
}

struct Assembled {
    prog: ConicProgram,
    layout: Layout,
}

fn discretize(spec: &OcpSpec) -> Result<(DMatrix<f64>, DMatrix<f64>, DVector<f64>)> {
    match (spec.mode, &spec.predictor) {
        (Mode::Robust, Some(p)) => {
            let (a, b) = p.joint_dynamics();
            let (ad, bd) = zoh_discretize(&a, &b, spec.dt)?;
            Ok((ad, bd, p.initial_joint_state()))
        }
        _ => {
            let (ad, bd) = zoh_discretize(&spec.rom.a_r, &spec.rom.b_r, spec.dt)?;
            Ok((ad, bd, spec.rom.x_r0.clone()))
        }
    }
}

fn mat_vec(m: &DMatrix<f64>, vars: &[usize], row: usize) -> Affine {
    let mut e = Affine::default();
    for (j, &v) in vars.iter().enumerate() {
        e.add_term(v, m[(row, j)]);
    }
    e
}

fn assemble(spec: &OcpSpec, tangents: &[(f64, f64)]) -> Result<Assembled> {
    let n = spec.steps()?;
    let (ad, bd, q0) = discretize(spec)?;
    let (nq, nu) = (ad.nrows(), bd.ncols());
    let nr = spec.rom.order();
    let nz = spec.rom.c_r.nrows();
    let robust = spec.mode == Mode::Robust;
    let data = &spec.data;

    let mut prog = ConicProgram::new();
    let u: Vec<Vec<usize>> = (0..n).map(|_| prog.vars(nu)).collect();
    let q: Vec<Vec<usize>> = (0..=n).map(|_| prog.vars(nq)).collect();
    let t_z = prog.vars(n);
    let t_u = prog.vars(n);
    let (delta, s) = if robust { (prog.vars(n + 1), prog.vars(n)) } else { (Vec::new(), Vec::new()) };

    for i in 0..nq {
        prog.eq(Affine::var(q[0][i]) - Affine::constant(q0[i]));
    }
    for k in 0..n {
        for i in 0..nq {
            let rhs = mat_vec(&ad, &q[k], i) + mat_vec(&bd, &u[k], i);
            prog.eq(Affine::var(q[k + 1][i]) - rhs);
        }
        for i in 0..nu {
            prog.nonneg(Affine::var(u[k][i]) - Affine::constant(data.input_lo[i]));
            prog.nonneg(Affine::constant(data.input_hi[i]) - Affine::var(u[k][i]));
            prog.nonneg(Affine::var(t_u[k]) - Affine::var(u[k][i]));
            prog.nonneg(Affine::var(t_u[k]) + Affine::var(u[k][i]));
        }
    }

    let z_expr = |k: usize, j: usize| mat_vec(&spec.rom.c_r, &q[k][..nr], j);
    let times: Vec<f64> = (0..=n).map(|k| k as f64 * spec.dt).collect();
    for k in 0..n {
        let zref = data.reference.at(times[k]);
        for j in 0..nz {
            let diff = z_expr(k, j) - Affine::constant(zref[j]);
            prog.nonneg(Affine::var(t_z[k]) - diff.clone());
            prog.nonneg(Affine::var(t_z[k]) + diff);
        }
    }

    let radius = |k: usize| -> Affine {
        let (alpha, beta) = tangents[k];
        Affine::constant(alpha) + Affine::term(delta[k], beta)
    };

    if robust {
        let pred = spec.predictor.as_ref().unwrap();
        let (f, g) = pred.drive_map();
        let (lambda, gamma) = (pred.cert.lambda, pred.cert.gamma);
        let decay = (-lambda * spec.dt).exp();
        let gain = -(-lambda * spec.dt).exp_m1() / lambda * gamma;
        let w2 = pred.w_bar * pred.w_bar;
        prog.eq(Affine::var(delta[0]) - Affine::constant(pred.delta0));
        for k in 0..n {
            let mut next = Affine::term(delta[k], decay) + Affine::term(s[k], gain);
            next.add_const(gain * w2);
            prog.eq(Affine::var(delta[k + 1]) - next);
            // s_k ≥ ‖F q + G u_k‖² at both ends of the interval:
            // ‖(2v, s − 1)‖ ≤ s + 1
            for end in [k, k + 1] {
                let mut cone = vec![Affine::var(s[k]) + Affine::constant(1.0)];
                for row in 0..f.nrows() {
                    let v = mat_vec(&f, &q[end], row) + mat_vec(&g, &u[k], row);
                    cone.push(v.scaled(2.0));
                }
                cone.push(Affine::var(s[k]) - Affine::constant(1.0));
                prog.soc(cone);
            }
        }
    }

    for k in 0..=n {
        for con in &data.constraints {
            let mut g = Affine::constant(con.b);
            for j in 0..nz {
                g = g + z_expr(k, j).scaled(con.a[j]);
            }
            if robust {
                g = g + radius(k).scaled(con.lipschitz() * spec.tightening_margin);
            }
            prog.nonneg(-g);
        }
    }

    let mut obj = Affine::default();
    for k in 0..n {
        obj.add_term(t_z[k], spec.dt);
        obj.add_term(t_u[k], spec.dt * data.input_weight);
        if robust {
            obj = obj + radius(k).scaled(spec.dt);
        }
    }
    prog.minimize(obj);
    Ok(Assembled { prog, layout: Layout { u, q } })
}

/// Builds the robust program for the given tangent points (one per grid
/// point); exposed for inspection and tests.
pub fn assemble_robust_ocp(spec: &OcpSpec, linearization: &[f64]) -> Result<ConicProgram> {
    if spec.mode != Mode::Robust {
        return Err(Error::InvalidArgument("spec is not in robust mode".into()));
    }
    spec.validate()?;
    let c = spec.predictor.as_ref().unwrap().radius_gain();
    let tangents = linearization
        .iter()
        .map(|&d| sqrt_tangent_overestimator(d.max(spec.delta_floor), c))
        .collect::<Result<Vec<_>>>()?;
    Ok(assemble(spec, &tangents)?.prog)
}

pub fn assemble_naive_ocp(spec: &OcpSpec) -> Result<ConicProgram> {
    let mut s = spec.clone();
    s.mode = Mode::Naive;
    s.validate()?;
    Ok(assemble(&s, &[])?.prog)
}

fn extract(spec: &OcpSpec, layout: &Layout, x: &[f64], tangents: &[(f64, f64)]) -> Result<OcpSolution> {
    let n = layout.u.len();
    let nr = spec.rom.order();
    let nq = layout.q[0].len();
    let nu = layout.u[0].len();
    let u = DMatrix::from_fn(nu, n, |i, k| x[layout.u[k][i]]);
    let qs = DMatrix::from_fn(nq, n + 1, |i, k| x[layout.q[k][i]]);
    let x_r = qs.rows(0, nr).into_owned();
    let psi = qs.rows(nr, nq - nr).into_owned();
    let (delta_chi, s, delta_z, surrogate) = if spec.mode == Mode::Robust {
        let pred = spec.predictor.as_ref().unwrap();
        let c = pred.radius_gain();
        // The epigraph variables are only upper bounds and stay loose where
        // slack is free (the last interval, whose δ̄ carries no cost).  Tighten
        // them to the endpoint drive and re-propagate δ̄; this only lowers δ̄,
        // so constraints and cost keep holding.
        let (f, g) = pred.drive_map();
        let (lambda, gamma) = (pred.cert.lambda, pred.cert.gamma);
        let w2 = pred.w_bar * pred.w_bar;
        let mut s = Vec::with_capacity(n);
        let mut d = vec![pred.delta0];
        for k in 0..n {
            let uk = u.column(k);
            let drive = |j: usize| (&f * qs.column(j) + &g * uk).norm_squared();
            let sk = drive(k).max(drive(k + 1));
            d.push(comparison_step(d[k], lambda, gamma, sk + w2, spec.dt));
            s.push(sk);
        }
        let dz = d.iter().map(|v| (c * v).sqrt()).collect();
        let sur = d.iter().zip(tangents).map(|(v, (a, b))| a + b * v).collect();
        (d, s, dz, sur)
    } else {
        (vec![0.0; n + 1], Vec::new(), vec![0.0; n + 1], vec![0.0; n + 1])
    };
    Ok(OcpSolution {
        mode: spec.mode,
        status: OcpStatus::Optimal,
        times: (0..=n).map(|k| k as f64 * spec.dt).collect(),
        u: SampledSignal::uniform(0.0, spec.dt, u)?,
        z_r: &spec.rom.c_r * &x_r,
        x_r,
        psi,
        delta_chi,
        delta_z,
        delta_z_surrogate: surrogate,
        s,
        j_star: f64::NAN,
        passes: Vec::new(),
        solve_seconds: 0.0,
    })
}

fn initial_check(spec: &OcpSpec) -> Result<()> {
    let z0 = &spec.rom.c_r * &spec.rom.x_r0;
    let radius = match (&spec.predictor, spec.mode) {
        (Some(p), Mode::Robust) => (p.radius_gain() * p.delta0).sqrt(),
        _ => 0.0,
    };
    for con in &spec.data.constraints {
        if con.eval(z0.as_slice()) + con.lipschitz() * radius > 1e-9 {
            return Err(Error::Infeasible("initial tube already violates the constraints".into()));
        }
    }
    Ok(())
}

/// Solves the program, re-linearizing the square-root surrogate between
/// passes in robust mode.
pub fn solve_ocp(spec: &OcpSpec) -> Result<OcpSolution> {
    spec.validate()?;
    initial_check(spec)?;
    let n = spec.steps()?;
    let started = Instant::now();
    let (passes, c) = match spec.mode {
        Mode::Robust => (spec.scp_passes, spec.predictor.as_ref().unwrap().radius_gain()),
        Mode::Naive => (1, 0.0),
    };
    let mut points: Vec<f64> = match &spec.linearization {
        Some(p) if p.len() == n + 1 => p.clone(),
        Some(_) => return Err(Error::dim("one tangent point per grid point is required")),
        None if c > 0.0 => vec![spec.initial_radius * spec.initial_radius / c; n + 1],
        None => vec![1.0; n + 1],
    };
    let mut best: Option<OcpSolution> = None;
    let mut infos = Vec::new();
    for pass in 0..passes {
        let tangents = if spec.mode == Mode::Robust {
            points
                .iter()
                .map(|&d| sqrt_tangent_overestimator(d.max(spec.delta_floor), c))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let asm = assemble(spec, &tangents)?;
        let t0 = Instant::now();
        let sol = asm.prog.solve(&spec.conic)?;
        let mut info = PassInfo {
            objective: f64::NAN,
            solver_objective: sol.objective,
            status: sol.status,
            solve_seconds: t0.elapsed().as_secs_f64(),
            iterations: sol.iterations,
        };
        if sol.status != ConicStatus::Optimal {
            infos.push(info.clone());
        }
        match sol.status {
            ConicStatus::Optimal => {}
            ConicStatus::Infeasible if pass == 0 => {
                return Err(Error::Infeasible("reduced-order control problem is infeasible".into()))
            }
            ConicStatus::Infeasible | ConicStatus::SolverLimit | ConicStatus::Numerical if best.is_some() => break,
            other => return Err(Error::Solver(format!("control problem ended with status {other:?}"))),
        }
        let mut out = extract(spec, &asm.layout, &sol.x, &tangents)?;
        out.j_star = program_cost(spec, &out);
        info.objective = out.j_star;
        infos.push(info);
        points = out.delta_chi.clone();
        best = Some(out);
    }
    let mut out = best.expect("first pass either solved or returned");
    out.passes = infos;
    out.solve_seconds = started.elapsed().as_secs_f64();
    Ok(out)
}

/// Program cost at a recovered solution: the tracking and input terms plus,
/// in robust mode, the surrogate tube radius.  The solver's own objective can
/// be off when steep tangents amplify its feasibility tolerance, so `J*` is
/// always evaluated here.
fn program_cost(spec: &OcpSpec, sol: &OcpSolution) -> f64 {
    let z = &sol.z_r;
    let mut j = realized_cost(&spec.data, spec.dt, &sol.u, z);
    if spec.mode == Mode::Robust {
        j += spec.dt * sol.delta_z_surrogate[..sol.u.len()].iter().sum::<f64>();
    }
    j
}

/// `dt·Σ_k (‖z_k − z_ref,k‖_∞ + R‖u_k‖_∞)` for a realized output sampled on
/// the control grid (left Riemann sum, matching the program's cost).
pub fn realized_cost(data: &ProblemData, dt: f64, u: &SampledSignal, z: &DMatrix<f64>) -> f64 {
    let mut j = 0.0;
    for k in 0..u.len() {
        let zref = data.reference.at(k as f64 * dt);
        let ez = (z.column(k) - zref).amax();
        j += dt * (ez + data.input_weight * u.values.column(k).amax());
    }
    j
}

/// Re-simulates the predictor under `u*` and returns the largest deviation
/// of the program's `x_r`, `ψ̄` and `δ̄` from the simulation.
pub fn resimulation_gap(spec: &OcpSpec, sol: &OcpSolution) -> Result<f64> {
    match (&spec.predictor, spec.mode) {
        (Some(p), Mode::Robust) => {
            let tube = simulate_bound(p, &sol.u, spec.dt)?;
            let dx = (&tube.x_r - &sol.x_r).amax();
            let dp = (&tube.psi - &sol.psi).amax();
            let dd = tube
                .delta_chi
                .iter()
                .zip(&sol.delta_chi)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            Ok(dx.max(dp).max(dd))
        }
        _ => {
            let sys = spec.rom.as_system()?;
            let sim = crate::lti::simulate(&sys, &sol.u, None, spec.dt)?;
            Ok((&sim.x.values - &sol.x_r).amax())
        }
    }
}
