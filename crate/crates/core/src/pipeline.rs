//! Benchmark configuration and the staged workflow
//! synthesize → solve → simulate → compare, with on-disk artifacts.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{compare_bounds, default_lyapunov_rate, lyapunov_error_bound, BoundComparison, ComparisonInputs, Method};
use crate::benchmark::{build_chain, ChainParams};
use crate::bounding::{
    build_augmented_system, build_highpass_filter, build_highpass_filter_mixed, containment_check, filter_gain_gram,
    highpass_energy_gram, optimal_normalization, monte_carlo_containment, BoundingFilter,
    ContainmentReport, MonteCarloSummary, RobustPredictor,
};
use crate::error::{Error, Result};
use crate::lti::{simulate, spectral_abscissa, AffineConstraint, LtiSystem, ProblemData, SampledSignal};
use crate::mpc::{realized_cost, solve_ocp, Mode, OcpSolution, OcpSpec, OcpStatus};
use crate::reduction::{error_dynamics, modal_lumped_projection, petrov_galerkin_reduce, ErrorDynamics, LumpedBasis, ReducedModel};
use crate::synthesis::{
    default_lambda_grid, lambda_linesearch, GainCertificate, LambdaGrid, LinesearchProblem, Selection, SynthesisMethod,
    SynthesisOptions,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    /// Cutoff; `None` uses `10·|α(A_r)|`.
    pub omega_c: Option<f64>,
    /// Per-channel scales of `[x_r; u]`.  When given they override
    /// `normalization`.
    pub scales: Option<Vec<f64>>,
    pub normalization: Normalization,
    pub scale_floor: f64,
    /// Relative ridge on the Grams of [`Normalization::GainEnergy`].
    pub ridge: f64,
    /// Decay rate at which the gain Gram is taken; `None` uses the largest
    /// grid point.
    pub gram_lambda: Option<f64>,
}

/// How the filter output is normalized when no explicit scales are given.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Diagonal, by the channel peaks of the naive solution.
    PeakScales,
    /// Full matrix trading the filtered gain against the high-passed energy
    /// of the naive solution.
    #[default]
    GainEnergy,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            omega_c: None,
            scales: None,
            normalization: Normalization::default(),
            scale_floor: 1e-6,
            ridge: 1e-4,
            gram_lambda: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpcConfig {
    pub scp_passes: usize,
    pub delta_floor: f64,
    pub tightening_margin: f64,
    pub initial_radius: f64,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self { scp_passes: 2, delta_floor: 1e-12, tightening_margin: 1.0, initial_radius: 0.05 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub chain: ChainParams,
    pub n_modes: usize,
    pub lumped_basis: LumpedBasis,
    pub filter: FilterConfig,
    pub dt: f64,
    pub horizon: f64,
    pub input_weight: f64,
    pub w_bar: f64,
    pub input_lo: Vec<f64>,
    pub input_hi: Vec<f64>,
    /// `aᵀz + b ≤ 0`.
    pub constraints: Vec<AffineConstraint>,
    /// Constant output reference.
    pub reference: Vec<f64>,
    /// `"lo:hi:n[:log]"`; `None` uses the default grid.
    pub lambda_grid: Option<String>,
    pub lambda_points: usize,
    pub selection: Selection,
    pub synthesis_method: SynthesisMethod,
    pub mpc: MpcConfig,
    /// Rate of the Lyapunov baseline; `None` uses `0.99·2|α(A)|`.
    pub lambda_l: Option<f64>,
    /// Output samples per control step in simulations.
    pub output_refinement: usize,
    pub monte_carlo_samples: usize,
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            chain: ChainParams::default(),
            n_modes: 6,
            lumped_basis: LumpedBasis::RigidBody,
            filter: FilterConfig::default(),
            dt: 2.0,
            horizon: 300.0,
            input_weight: 1e-3,
            w_bar: 0.0,
            input_lo: vec![-100.0],
            input_hi: vec![100.0],
            constraints: vec![AffineConstraint { a: vec![1.0], b: -1.0 }],
            reference: vec![1.0],
            lambda_grid: None,
            lambda_points: 10,
            selection: Selection::Gamma,
            synthesis_method: SynthesisMethod::Auto,
            mpc: MpcConfig::default(),
            lambda_l: None,
            output_refinement: 20,
            monte_carlo_samples: 100,
            seed: 0,
        }
    }
}

impl BenchmarkConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        format!("{:x}", Sha256::digest(canonical.as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        self.chain.validate()?;
        let positive = [
            (self.dt, "dt"),
            (self.horizon, "horizon"),
            (self.input_weight, "input_weight"),
            (self.filter.scale_floor, "filter.scale_floor"),
            (self.filter.ridge, "filter.ridge"),
            (self.mpc.delta_floor, "mpc.delta_floor"),
            (self.mpc.initial_radius, "mpc.initial_radius"),
        ];
        for (v, name) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be positive")));
            }
        }
        if !(self.w_bar >= 0.0) {
            return Err(Error::InvalidArgument("w_bar must be non-negative".into()));
        }
        if self.n_modes == 0 || self.lambda_points == 0 || self.output_refinement == 0 || self.mpc.scp_passes == 0 {
            return Err(Error::InvalidArgument("counts must be at least one".into()));
        }
        if let Some(g) = &self.lambda_grid {
            g.parse::<LambdaGrid>()?;
        }
        if let Some(w) = self.filter.omega_c {
            if !(w > 0.0) {
                return Err(Error::InvalidArgument("filter.omega_c must be positive".into()));
            }
        }
        if let Some(l) = self.filter.gram_lambda {
            if !(l > 0.0) {
                return Err(Error::InvalidArgument("filter.gram_lambda must be positive".into()));
            }
        }
        if let Some(l) = self.lambda_l {
            if !(l > 0.0) {
                return Err(Error::InvalidArgument("lambda_l must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn steps(&self) -> Result<usize> {
        let n = self.horizon / self.dt;
        if (n - n.round()).abs() > 1e-9 * n || n.round() < 1.0 {
            return Err(Error::InvalidArgument("horizon must be a whole number of steps".into()));
        }
        Ok(n.round() as usize)
    }

    pub fn dt_out(&self) -> f64 {
        self.dt / self.output_refinement as f64
    }

    pub fn problem_data(&self) -> Result<ProblemData> {
        let steps = self.steps()?;
        Ok(ProblemData {
            w_bar: self.w_bar,
            constraints: self.constraints.clone(),
            input_lo: self.input_lo.clone(),
            input_hi: self.input_hi.clone(),
            horizon: self.horizon,
            input_weight: self.input_weight,
            reference: SampledSignal::constant(0.0, self.dt, steps + 1, &self.reference)?,
        })
    }

    pub fn synthesis_options(&self) -> SynthesisOptions {
        SynthesisOptions { method: self.synthesis_method, selection: self.selection, ..Default::default() }
    }
}

/// Plant, reduced model and error dynamics built from a configuration.
#[derive(Clone, Debug)]
pub struct Instance {
    pub cfg: BenchmarkConfig,
    pub sys: LtiSystem,
    pub rom: ReducedModel,
    pub err: ErrorDynamics,
    pub data: ProblemData,
}

impl Instance {
    pub fn build(cfg: &BenchmarkConfig) -> Result<Self> {
        cfg.validate()?;
        let sys = build_chain(&cfg.chain, cfg.w_bar > 0.0)?;
        let (v, w) = modal_lumped_projection(&sys, cfg.n_modes, cfg.lumped_basis)?;
        let rom = petrov_galerkin_reduce(&sys, &v, &w)?;
        let err = error_dynamics(&sys, &rom)?;
        let data = cfg.problem_data()?;
        data.validate(sys.n_outputs(), sys.n_inputs())?;
        Ok(Self { cfg: cfg.clone(), sys, rom, err, data })
    }

    pub fn ocp_spec(&self, mode: Mode, predictor: Option<RobustPredictor>) -> OcpSpec {
        let mut spec = OcpSpec::new(self.rom.clone(), predictor, self.data.clone(), self.cfg.dt, mode);
        spec.scp_passes = self.cfg.mpc.scp_passes;
        spec.delta_floor = self.cfg.mpc.delta_floor;
        spec.tightening_margin = self.cfg.mpc.tightening_margin;
        spec.initial_radius = self.cfg.mpc.initial_radius;
        spec
    }

    /// Channel peaks of `[x_r; u]` along a solution, floored.
    pub fn filter_scales(&self, sol: &OcpSolution) -> Vec<f64> {
        let floor = self.cfg.filter.scale_floor;
        let peak = |m: &DMatrix<f64>, i: usize| m.row(i).amax().max(floor);
        let mut s: Vec<f64> = (0..sol.x_r.nrows()).map(|i| peak(&sol.x_r, i)).collect();
        s.extend((0..sol.u.values.nrows()).map(|i| peak(&sol.u.values, i)));
        s
    }

    pub fn build_filter(&self, naive: Option<&OcpSolution>) -> Result<BoundingFilter> {
        let omega = match self.cfg.filter.omega_c {
            Some(w) => w,
            None => 10.0 * spectral_abscissa(&self.rom.a_r)?.abs(),
        };
        let n_w = self.sys.n_disturbances();
        let fc = &self.cfg.filter;
        if let Some(s) = &fc.scales {
            return build_highpass_filter(&self.rom, omega, s, n_w);
        }
        let Some(sol) = naive else {
            return Err(Error::MissingArtifact("filter normalization needs the naive solution".into()));
        };
        match fc.normalization {
            Normalization::PeakScales => build_highpass_filter(&self.rom, omega, &self.filter_scales(sol), n_w),
            Normalization::GainEnergy => {
                let lambda = match fc.gram_lambda {
                    Some(l) => l,
                    None => self.lambda_grid(&self.err.a, None)?.into_iter().fold(f64::NAN, f64::max),
                };
                let q = filter_gain_gram(&self.err, &self.rom, omega, n_w, lambda, &self.cfg.synthesis_options())?;
                let h = highpass_energy_gram(&self.rom, omega, &sol.u, self.cfg.dt_out())?;
                let m = optimal_normalization(&q, &h, fc.ridge)?;
                build_highpass_filter_mixed(&self.rom, omega, &m, n_w)
            }
        }
    }

    pub fn lambda_grid(&self, a: &DMatrix<f64>, override_grid: Option<&LambdaGrid>) -> Result<Vec<f64>> {
        match (override_grid, &self.cfg.lambda_grid) {
            (Some(g), _) => g.points(),
            (None, Some(s)) => s.parse::<LambdaGrid>()?.points(),
            (None, None) => default_lambda_grid(a, self.cfg.lambda_points),
        }
    }

    pub fn synthesize_filtered(&self, filter: &BoundingFilter, grid: Option<&LambdaGrid>) -> Result<GainCertificate> {
        let aug = build_augmented_system(&self.err, filter)?;
        let pts = self.lambda_grid(&self.err.a, grid)?;
        lambda_linesearch(LinesearchProblem::FilteredPeak(&aug), &pts, &self.cfg.synthesis_options())
    }

    pub fn synthesize_peak(&self, grid: Option<&LambdaGrid>) -> Result<GainCertificate> {
        let pts = self.lambda_grid(&self.err.a, grid)?;
        lambda_linesearch(LinesearchProblem::Peak(&self.err), &pts, &self.cfg.synthesis_options())
    }

    pub fn synthesize_lyapunov(&self) -> Result<GainCertificate> {
        let rate = match self.cfg.lambda_l {
            Some(l) => l,
            None => default_lyapunov_rate(&self.err)?,
        };
        lyapunov_error_bound(&self.err, rate)
    }

    pub fn predictor(&self, filter: BoundingFilter, cert: GainCertificate) -> Result<RobustPredictor> {
        RobustPredictor::new(self.rom.clone(), filter, cert, self.cfg.w_bar, &self.sys.x0)
    }

    /// Predictor on the unfiltered input `r` (peak or Lyapunov certificate).
    pub fn plain_predictor(&self, cert: GainCertificate) -> Result<RobustPredictor> {
        let f = BoundingFilter::identity(self.err.n_w, self.err.n_r, self.err.n_u);
        self.predictor(f, cert)
    }
}

/// Full-order rollout of an OCP solution.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RolloutReport {
    pub mode: Mode,
    pub max_output: Vec<f64>,
    /// `max_t max_j g_j(z(t))` on the refined grid.
    pub max_constraint: f64,
    pub constraint_satisfied: bool,
    pub terminal_output: Vec<f64>,
    pub realized_cost: f64,
    pub j_star: f64,
    pub containment: Option<ContainmentReport>,
    pub monte_carlo: Option<MonteCarloSummary>,
}

pub struct Rollout {
    pub report: RolloutReport,
    pub times: Vec<f64>,
    pub z: DMatrix<f64>,
    pub z_r: DMatrix<f64>,
    pub u: DMatrix<f64>,
    pub delta_z: Option<Vec<f64>>,
}

impl Rollout {
    pub fn to_csv_rows(&self) -> (Vec<String>, Vec<Vec<f64>>) {
        let (nu, nz) = (self.u.nrows(), self.z.nrows());
        let name = |b: &str, n: usize, i: usize| if n == 1 { b.to_string() } else { format!("{b}_{i}") };
        let mut header = vec!["t".to_string()];
        header.extend((0..nu).map(|i| name("u", nu, i)));
        header.extend((0..nz).map(|i| name("z", nz, i)));
        header.extend((0..nz).map(|i| name("z_r", nz, i)));
        if self.delta_z.is_some() {
            header.push("delta_z".into());
        }
        let rows = (0..self.times.len())
            .map(|k| {
                let mut r = vec![self.times[k]];
                r.extend(self.u.column(k).iter());
                r.extend(self.z.column(k).iter());
                r.extend(self.z_r.column(k).iter());
                if let Some(d) = &self.delta_z {
                    r.push(d[k]);
                }
                r
            })
            .collect();
        (header, rows)
    }
}

/// Simulates the plant under `u*` on the refined grid; in robust mode also
/// checks tube containment for `u*` and for random admissible inputs.
pub fn rollout(inst: &Instance, sol: &OcpSolution, predictor: Option<&RobustPredictor>) -> Result<Rollout> {
    let dt_out = inst.cfg.dt_out();
    let m = inst.cfg.output_refinement;
    let full = simulate(&inst.sys, &sol.u, None, dt_out)?;
    let nominal = simulate(&inst.rom.as_system()?, &sol.u, None, dt_out)?;
    let z = full.z.values.clone();
    let mut max_constraint = f64::NEG_INFINITY;
    for col in z.column_iter() {
        for g in &inst.data.constraints {
            max_constraint = max_constraint.max(g.eval(col.as_slice()));
        }
    }
    let max_output = (0..z.nrows()).map(|i| z.row(i).max()).collect();
    let z_grid = DMatrix::from_fn(z.nrows(), sol.u.len() + 1, |i, k| z[(i, k * m)]);
    let realized = realized_cost(&inst.data, inst.cfg.dt, &sol.u, &z_grid);
    let (containment, monte_carlo, delta_z) = match (sol.mode, predictor) {
        (Mode::Robust, Some(p)) => {
            let c = containment_check(&inst.sys, p, &sol.u, None, dt_out)?;
            let mc = monte_carlo_containment(
                &inst.sys,
                p,
                &inst.data.input_lo,
                &inst.data.input_hi,
                sol.u.len(),
                inst.cfg.dt,
                dt_out,
                inst.cfg.monte_carlo_samples,
                inst.cfg.seed,
            )?;
            let tube = crate::bounding::simulate_bound(p, &sol.u, dt_out)?;
            (Some(c), Some(mc), Some(tube.delta_z))
        }
        _ => (None, None, None),
    };
    let n_steps = sol.u.len();
    let u = DMatrix::from_fn(sol.u.channels(), z.ncols(), |i, j| sol.u.values[(i, (j / m).min(n_steps - 1))]);
    Ok(Rollout {
        report: RolloutReport {
            mode: sol.mode,
            max_output,
            max_constraint,
            constraint_satisfied: max_constraint <= 1e-6,
            terminal_output: z.column(z.ncols() - 1).iter().copied().collect(),
            realized_cost: realized,
            j_star: sol.j_star,
            containment,
            monte_carlo,
        },
        times: full.z.times.clone(),
        z,
        z_r: nominal.z.values,
        u,
        delta_z,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Synthesize,
    Solve(Mode),
    Simulate,
    Compare,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Synthesize => "synthesize",
            Stage::Solve(Mode::Robust) => "solve_robust",
            Stage::Solve(Mode::Naive) => "solve_naive",
            Stage::Simulate => "simulate",
            Stage::Compare => "compare",
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct StageOptions {
    pub lambda_grid: Option<LambdaGrid>,
    pub methods: Option<Vec<Method>>,
}

/// Outcome of one stage; `infeasible` marks a certified infeasibility rather
/// than an error.
#[derive(Clone, Debug, Serialize)]
pub struct StageReport {
    pub stage: String,
    pub seconds: f64,
    pub infeasible: bool,
    pub summary: serde_json::Value,
}

pub mod files {
    pub const CONFIG: &str = "config.json";
    pub const MANIFEST: &str = "manifest.json";
    pub const FILTER: &str = "filter.json";
    pub const CERT_FILTERED: &str = "certificate_peakfilter.json";
    pub const CERT_PEAK: &str = "certificate_peak.json";
    pub const CERT_LYAPUNOV: &str = "certificate_inputdep.json";
    pub const COMPARISON_CSV: &str = "comparison.csv";
    pub const COMPARISON_JSON: &str = "comparison_summary.json";

    pub fn ocp_solution(mode: super::Mode) -> String {
        format!("ocp_{}_solution.json", mode_name(mode))
    }
    pub fn ocp_csv(mode: super::Mode) -> String {
        format!("ocp_{}.csv", mode_name(mode))
    }
    pub fn ocp_summary(mode: super::Mode) -> String {
        format!("ocp_{}_summary.json", mode_name(mode))
    }
    pub fn rollout_csv(mode: super::Mode) -> String {
        format!("rollout_{}.csv", mode_name(mode))
    }
    pub fn rollout_json(mode: super::Mode) -> String {
        format!("rollout_{}.json", mode_name(mode))
    }
    pub fn mode_name(mode: super::Mode) -> &'static str {
        match mode {
            super::Mode::Robust => "robust",
            super::Mode::Naive => "naive",
        }
    }
}

/// Output directory holding the artifacts of one run.
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root)?;
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn exists(&self, name: &str) -> bool {
        self.path(name).exists()
    }

    pub fn write_json<T: Serialize>(&self, name: &str, v: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(v)?;
        text.push('\n');
        std::fs::write(self.path(name), text)?;
        Ok(())
    }

    pub fn read_json<T: DeserializeOwned>(&self, name: &str) -> Result<T> {
        let p = self.path(name);
        if !p.exists() {
            return Err(Error::MissingArtifact(format!("{} (run the upstream stage first)", p.display())));
        }
        Ok(serde_json::from_str(&std::fs::read_to_string(p)?)?)
    }

    pub fn write_csv(&self, name: &str, table: (Vec<String>, Vec<Vec<f64>>)) -> Result<()> {
        crate::csv::write(&self.path(name), &table.0, &table.1)
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub versions: BTreeMap<String, String>,
    pub timings: BTreeMap<String, f64>,
    pub files: Vec<String>,
}

/// Refreshes `manifest.json`: config hash, versions, stage timings and the
/// list of artifacts present in the directory.
pub fn export_results(dir: &RunDir, cfg: &BenchmarkConfig, timings: &BTreeMap<String, f64>) -> Result<Manifest> {
    let mut manifest: Manifest = if dir.exists(files::MANIFEST) { dir.read_json(files::MANIFEST)? } else { Manifest::default() };
    if manifest.config_hash != cfg.hash() {
        manifest.timings.clear();
    }
    manifest.config_hash = cfg.hash();
    manifest.versions = BTreeMap::from([
        ("romtube".to_string(), env!("CARGO_PKG_VERSION").to_string()),
        ("clarabel".to_string(), "0.11".to_string()),
        ("nalgebra".to_string(), "0.33".to_string()),
    ]);
    manifest.timings.extend(timings.iter().map(|(k, v)| (k.clone(), *v)));
    let mut names: Vec<String> = std::fs::read_dir(&dir.root)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_file())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter(|n| n != files::MANIFEST)
        .collect();
    names.sort();
    manifest.files = names;
    dir.write_json(files::MANIFEST, &manifest)?;
    Ok(manifest)
}

fn solution_summary(sol: &OcpSolution) -> serde_json::Value {
    sol.summary()
}

/// Solves the naive problem if its solution is not on disk yet.
fn naive_solution(inst: &Instance, dir: &RunDir) -> Result<OcpSolution> {
    let name = files::ocp_solution(Mode::Naive);
    if dir.exists(&name) {
        return dir.read_json(&name);
    }
    let sol = solve_ocp(&inst.ocp_spec(Mode::Naive, None))?;
    write_solution(dir, &sol)?;
    Ok(sol)
}

fn write_solution(dir: &RunDir, sol: &OcpSolution) -> Result<()> {
    dir.write_json(&files::ocp_solution(sol.mode), sol)?;
    dir.write_csv(&files::ocp_csv(sol.mode), sol.to_csv_rows())?;
    dir.write_json(&files::ocp_summary(sol.mode), &solution_summary(sol))
}

/// Robust predictor from the filter and filtered certificate on disk.
pub fn load_predictor(inst: &Instance, dir: &RunDir) -> Result<RobustPredictor> {
    let filter: BoundingFilter = dir.read_json(files::FILTER)?;
    let cert: GainCertificate = dir.read_json(files::CERT_FILTERED)?;
    inst.predictor(filter, cert)
}

fn run_synthesize(inst: &Instance, dir: &RunDir, opts: &StageOptions) -> Result<serde_json::Value> {
    let naive = if inst.cfg.filter.scales.is_none() { Some(naive_solution(inst, dir)?) } else { None };
    let filter = inst.build_filter(naive.as_ref())?;
    dir.write_json(files::FILTER, &filter)?;
    let filtered = inst.synthesize_filtered(&filter, opts.lambda_grid.as_ref())?;
    dir.write_json(files::CERT_FILTERED, &filtered)?;
    let peak = inst.synthesize_peak(opts.lambda_grid.as_ref());
    if let Ok(c) = &peak {
        dir.write_json(files::CERT_PEAK, c)?;
    }
    let lyap = inst.synthesize_lyapunov();
    if let Ok(c) = &lyap {
        dir.write_json(files::CERT_LYAPUNOV, c)?;
    }
    let describe = |c: &Result<GainCertificate>| match c {
        Ok(c) => serde_json::json!({"lambda": c.lambda, "gamma": c.gamma, "passes": c.passes()}),
        Err(e) => serde_json::json!({"error": e.to_string()}),
    };
    Ok(serde_json::json!({
        "omega_c": filter.omega_c,
        "peakfilter": describe(&Ok(filtered)),
        "peak": describe(&peak),
        "inputdep": describe(&lyap),
    }))
}

fn run_solve(inst: &Instance, dir: &RunDir, mode: Mode) -> Result<serde_json::Value> {
    let sol = match mode {
        Mode::Naive => solve_ocp(&inst.ocp_spec(Mode::Naive, None))?,
        Mode::Robust => {
            let pred = load_predictor(inst, dir)?;
            solve_ocp(&inst.ocp_spec(Mode::Robust, Some(pred)))?
        }
    };
    write_solution(dir, &sol)?;
    Ok(solution_summary(&sol))
}

fn run_simulate(inst: &Instance, dir: &RunDir) -> Result<serde_json::Value> {
    let mut out = serde_json::Map::new();
    for mode in [Mode::Naive, Mode::Robust] {
        let name = files::ocp_solution(mode);
        if !dir.exists(&name) {
            continue;
        }
        let sol: OcpSolution = dir.read_json(&name)?;
        let pred = match mode {
            Mode::Robust => Some(load_predictor(inst, dir)?),
            Mode::Naive => None,
        };
        let r = rollout(inst, &sol, pred.as_ref())?;
        dir.write_csv(&files::rollout_csv(mode), r.to_csv_rows())?;
        dir.write_json(&files::rollout_json(mode), &r.report)?;
        out.insert(files::mode_name(mode).into(), serde_json::to_value(&r.report)?);
    }
    if out.is_empty() {
        return Err(Error::MissingArtifact("no control solution to simulate (run solve first)".into()));
    }
    Ok(serde_json::Value::Object(out))
}

/// Evaluates the four bounds on the robust solution.
pub fn comparison(inst: &Instance, dir: &RunDir, methods: &[Method]) -> Result<BoundComparison> {
    let sol: OcpSolution = dir.read_json(&files::ocp_solution(Mode::Robust))?;
    let filtered = load_predictor(inst, dir).ok();
    let load_plain = |name: &str| -> Option<RobustPredictor> {
        let cert: GainCertificate = dir.read_json(name).ok()?;
        inst.plain_predictor(cert).ok()
    };
    let peak = load_plain(files::CERT_PEAK);
    let lyap = load_plain(files::CERT_LYAPUNOV);
    let inputs = ComparisonInputs {
        sys: &inst.sys,
        err: &inst.err,
        rom: &inst.rom,
        peak_filter: filtered.as_ref(),
        peak: peak.as_ref(),
        input_dependent: lyap.as_ref(),
        input_lo: &inst.data.input_lo,
        input_hi: &inst.data.input_hi,
        w_bar: inst.cfg.w_bar,
        dt: inst.cfg.dt,
    };
    compare_bounds(&inputs, &sol.u, methods)
}

fn run_compare(inst: &Instance, dir: &RunDir, opts: &StageOptions) -> Result<serde_json::Value> {
    let methods = opts.methods.clone().unwrap_or_else(|| Method::ALL.to_vec());
    let cmp = comparison(inst, dir, &methods)?;
    dir.write_csv(files::COMPARISON_CSV, cmp.to_csv_rows())?;
    let summary = cmp.summary();
    dir.write_json(files::COMPARISON_JSON, &summary)?;
    Ok(summary)
}

/// Runs one stage and refreshes the manifest.
pub fn run_stage(cfg: &BenchmarkConfig, stage: Stage, out: &Path, opts: &StageOptions) -> Result<StageReport> {
    let dir = RunDir::create(out)?;
    dir.write_json(files::CONFIG, cfg)?;
    let inst = Instance::build(cfg)?;
    let t0 = Instant::now();
    let result = match stage {
        Stage::Synthesize => run_synthesize(&inst, &dir, opts),
        Stage::Solve(mode) => run_solve(&inst, &dir, mode),
        Stage::Simulate => run_simulate(&inst, &dir),
        Stage::Compare => run_compare(&inst, &dir, opts),
    };
    let seconds = t0.elapsed().as_secs_f64();
    let (summary, infeasible) = match result {
        Ok(s) => (s, false),
        Err(e) if e.is_infeasible() => (serde_json::json!({"error": e.to_string()}), true),
        Err(e) => return Err(e),
    };
    export_results(&dir, cfg, &BTreeMap::from([(stage.name().to_string(), seconds)]))?;
    Ok(StageReport { stage: stage.name().into(), seconds, infeasible, summary })
}

/// The full workflow; stops at the first infeasible stage.
pub fn run_pipeline(cfg: &BenchmarkConfig, out: &Path, opts: &StageOptions) -> Result<Vec<StageReport>> {
    let stages = [
        Stage::Solve(Mode::Naive),
        Stage::Synthesize,
        Stage::Solve(Mode::Robust),
        Stage::Simulate,
        Stage::Compare,
    ];
    let mut reports = Vec::new();
    for s in stages {
        let r = run_stage(cfg, s, out, opts)?;
        let stop = r.infeasible;
        reports.push(r);
        if stop {
            break;
        }
    }
    Ok(reports)
}

/// Whether an OCP solution on disk is optimal.
pub fn solution_status(dir: &RunDir, mode: Mode) -> Result<OcpStatus> {
    Ok(dir.read_json::<OcpSolution>(&files::ocp_solution(mode))?.status)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trip_is_idempotent() {
        let cfg = BenchmarkConfig::default();
        let text = cfg.to_json();
        let back = BenchmarkConfig::from_json(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_json(), text);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn partial_config_uses_defaults_and_rejects_unknown_keys() {
        let cfg = BenchmarkConfig::from_json(r#"{"dt": 1.0, "chain": {"n_masses": 3}}"#).unwrap();
        assert_eq!(cfg.chain.n_masses, 3);
        assert_eq!(cfg.chain.spring, 10.0);
        assert_eq!(cfg.steps().unwrap(), 300);
        assert!(BenchmarkConfig::from_json(r#"{"bogus": 1}"#).is_err());
        assert!(BenchmarkConfig::from_json(r#"{"dt": -1}"#).is_err());
    }

    #[test]
    fn benchmark_defaults() {
        let cfg = BenchmarkConfig::default();
        assert_eq!(cfg.steps().unwrap(), 150);
        let inst = Instance::build(&cfg).unwrap();
        assert_eq!(inst.sys.n_states(), 100);
        assert_eq!(inst.rom.order(), 8);
    }
}
