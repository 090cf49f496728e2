//! Experiment configuration, scenario drivers and CSV emission.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::network::{
    generate_topology, generate_tv_network, metropolis_weights, chebyshev_contraction, NetworkFile, TopologyKind,
    TvKind,
};
use crate::problem::{centralized_solution, CompositeProblem, ConstraintSet, NonsmoothTerm, RidgeData};
use crate::rates::{self, RateInputs, TvParams};
use crate::seed;
use crate::solver::{fmt_f64, least_squares_slope, Init, Network, Solver, SolverConfig, SolverMode};
use crate::surrogate::{surrogate_constants, SurrogateKind, DEFAULT_INNER_TOL};

pub const SCHEMA_VERSION: u32 = 1;
pub const SUMMARY_HEADER: &str = "grid_value,kappa_g,beta_over_mu,alpha_used,T_eps_mean,T_eps_std,z_predicted,flag";
pub const RUNS_HEADER: &str = "label,grid_value,replication,seed,t_epsilon,reached,dataset_hash,trace_file";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    SingleRun,
    SweepKappa,
    SweepBeta,
    CompareSurrogates,
    TvRun,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    #[serde(default = "defaults::m")]
    pub m: usize,
    #[serde(default = "defaults::n")]
    pub n: usize,
    #[serde(default = "defaults::d")]
    pub d: usize,
    #[serde(default)]
    pub lambda: f64,
    #[serde(default)]
    pub lambda_grid: Option<Vec<f64>>,
    /// Target `kappa_g` values; `lambda` is solved per target on the shared data.
    #[serde(default)]
    pub kappa_grid: Option<Vec<f64>>,
    #[serde(default)]
    pub n_grid: Option<Vec<usize>>,
    #[serde(default = "defaults::mu0")]
    pub mu0: f64,
    #[serde(default = "defaults::l0")]
    pub l0: f64,
    #[serde(default = "defaults::g")]
    pub g: NonsmoothTerm,
    #[serde(default = "defaults::constraint")]
    pub constraint: ConstraintSet,
    /// Problem in the JSON interchange form; overrides the synthetic generator.
    #[serde(default)]
    pub file: Option<PathBuf>,
    /// One CSV per agent with rows `a_1, ..., a_d, b`.
    #[serde(default)]
    pub csv_files: Option<Vec<PathBuf>>,
}

impl Default for ProblemConfig {
    fn default() -> Self {
        Self {
            m: defaults::m(),
            n: defaults::n(),
            d: defaults::d(),
            lambda: 0.0,
            lambda_grid: None,
            kappa_grid: None,
            n_grid: None,
            mu0: defaults::mu0(),
            l0: defaults::l0(),
            g: defaults::g(),
            constraint: defaults::constraint(),
            file: None,
            csv_files: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TvConfig {
    #[serde(default = "defaults::tv_kind")]
    pub kind: TvKind,
    #[serde(default = "defaults::window")]
    pub window: usize,
    /// Lower bound on nonzero weights; defaults to `1/m`.
    #[serde(default)]
    pub c_ell: Option<f64>,
}

impl Default for TvConfig {
    fn default() -> Self {
        Self {
            kind: defaults::tv_kind(),
            window: defaults::window(),
            c_ell: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    #[serde(flatten)]
    pub topology: TopologyKind,
    /// Overrides the per-replication network seed.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub mode: Option<SolverMode>,
    #[serde(default = "defaults::one")]
    pub comm_rounds: usize,
    #[serde(default)]
    pub chebyshev: bool,
    /// Pick the Chebyshev degree that reaches the Case-I threshold.
    #[serde(default)]
    pub auto_rounds: bool,
    /// Mixing matrix in the JSON interchange form.
    #[serde(default)]
    pub weights_file: Option<PathBuf>,
    #[serde(default)]
    pub tv: Option<TvConfig>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            topology: TopologyKind::Complete,
            seed: None,
            mode: None,
            comm_rounds: 1,
            chebyshev: false,
            auto_rounds: false,
            weights_file: None,
            tv: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurrogateConfig {
    #[serde(flatten)]
    pub kind: SurrogateKind,
    #[serde(default = "defaults::inner_tol")]
    pub inner_tol: f64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            kind: SurrogateKind::linearization(),
            inner_tol: DEFAULT_INNER_TOL,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case", deny_unknown_fields)]
pub enum AlphaRule {
    Fixed { value: f64 },
    CTimesAlphaMax { c: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    #[serde(default = "defaults::alpha")]
    pub alpha: AlphaRule,
    #[serde(default = "defaults::epsilon")]
    pub epsilon: f64,
    #[serde(default = "defaults::max_iters")]
    pub max_iters: usize,
    #[serde(default = "defaults::init")]
    pub init: Init,
    #[serde(default)]
    pub parallel: bool,
}

impl Default for SolverSection {
    fn default() -> Self {
        Self {
            alpha: defaults::alpha(),
            epsilon: defaults::epsilon(),
            max_iters: defaults::max_iters(),
            init: defaults::init(),
            parallel: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonteCarlo {
    #[serde(default = "defaults::one")]
    pub replications: usize,
}

impl Default for MonteCarlo {
    fn default() -> Self {
        Self { replications: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "defaults::out_dir")]
    pub dir: PathBuf,
    #[serde(default = "defaults::yes")]
    pub traces: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: defaults::out_dir(),
            traces: true,
        }
    }
}

mod defaults {
    use super::*;
    pub fn m() -> usize {
        10
    }
    pub fn n() -> usize {
        200
    }
    pub fn d() -> usize {
        20
    }
    pub fn mu0() -> f64 {
        1.0
    }
    pub fn l0() -> f64 {
        100.0
    }
    pub fn g() -> NonsmoothTerm {
        NonsmoothTerm::Zero
    }
    pub fn constraint() -> ConstraintSet {
        ConstraintSet::AllSpace
    }
    pub fn tv_kind() -> TvKind {
        TvKind::AlternatingSubgraphs
    }
    pub fn window() -> usize {
        2
    }
    pub fn one() -> usize {
        1
    }
    pub fn inner_tol() -> f64 {
        DEFAULT_INNER_TOL
    }
    pub fn alpha() -> AlphaRule {
        AlphaRule::Fixed { value: 1.0 }
    }
    pub fn epsilon() -> f64 {
        crate::solver::DEFAULT_EPSILON
    }
    pub fn max_iters() -> usize {
        crate::solver::DEFAULT_MAX_ITERS
    }
    pub fn init() -> Init {
        Init::Zero
    }
    pub fn out_dir() -> PathBuf {
        PathBuf::from("out")
    }
    pub fn yes() -> bool {
        true
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub scenario: Scenario,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub problem: ProblemConfig,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub surrogate: SurrogateConfig,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub monte_carlo: MonteCarlo,
    #[serde(default)]
    pub output: OutputConfig,
}

impl ExperimentConfig {
    /// Parses TOML, falling back to JSON.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = match toml::from_str(text) {
            Ok(c) => c,
            Err(toml_err) => match serde_json::from_str(text) {
                Ok(c) => c,
                Err(_) => return Err(toml_err.into()),
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let is_json = path.extension().map(|e| e == "json").unwrap_or(false);
        let cfg: Self = if is_json {
            serde_json::from_str(&text)?
        } else {
            return Self::parse(&text);
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        let p = &self.problem;
        if p.m == 0 || p.n == 0 || p.d == 0 {
            return bad("problem.m, problem.n and problem.d must be positive".into());
        }
        if !(p.mu0 > 0.0 && p.mu0 <= p.l0) {
            return bad("need 0 < problem.mu0 <= problem.l0".into());
        }
        if p.lambda < 0.0 {
            return bad("problem.lambda must be nonnegative".into());
        }
        for (name, grid) in [("lambda_grid", &p.lambda_grid), ("kappa_grid", &p.kappa_grid)] {
            if let Some(g) = grid {
                if g.is_empty() {
                    return bad(format!("problem.{name} must be nonempty"));
                }
            }
        }
        if matches!(&p.n_grid, Some(g) if g.is_empty() || g.contains(&0)) {
            return bad("problem.n_grid must be nonempty with positive entries".into());
        }
        match self.scenario {
            Scenario::SweepKappa if p.kappa_grid.is_none() && p.lambda_grid.is_none() => {
                return bad("sweep_kappa needs problem.kappa_grid or problem.lambda_grid".into())
            }
            Scenario::SweepBeta | Scenario::CompareSurrogates if p.n_grid.is_none() => {
                return bad(format!("{:?} needs problem.n_grid", self.scenario))
            }
            _ => {}
        }
        match self.solver.alpha {
            AlphaRule::Fixed { value } if !(value > 0.0 && value <= 1.0) => {
                return bad(format!("solver.alpha.value must lie in (0, 1], got {value}"))
            }
            AlphaRule::CTimesAlphaMax { c } if !(c > 0.0 && c < 1.0) => {
                return bad(format!("solver.alpha.c must lie in (0, 1), got {c}"))
            }
            _ => {}
        }
        if !(self.solver.epsilon > 0.0) || self.solver.max_iters == 0 {
            return bad("solver.epsilon and solver.max_iters must be positive".into());
        }
        if self.monte_carlo.replications == 0 {
            return bad("monte_carlo.replications must be at least 1".into());
        }
        if self.network.comm_rounds == 0 {
            return bad("network.comm_rounds must be at least 1".into());
        }
        if let Some(tv) = &self.network.tv {
            if tv.window == 0 {
                return bad("network.tv.window must be at least 1".into());
            }
        }
        if !(self.surrogate.inner_tol > 0.0) {
            return bad("surrogate.inner_tol must be positive".into());
        }
        Ok(())
    }

    fn mode(&self) -> SolverMode {
        if self.scenario == Scenario::TvRun {
            return SolverMode::TimeVarying;
        }
        self.network.mode.unwrap_or(if self.network.tv.is_some() {
            SolverMode::TimeVarying
        } else {
            SolverMode::Undirected
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct GridPoint {
    value: f64,
    lambda: Option<f64>,
    kappa: Option<f64>,
    n: usize,
}

fn grid(cfg: &ExperimentConfig) -> Vec<GridPoint> {
    let p = &cfg.problem;
    let single = GridPoint {
        value: p.lambda,
        lambda: Some(p.lambda),
        kappa: None,
        n: p.n,
    };
    match cfg.scenario {
        Scenario::SingleRun | Scenario::TvRun => vec![single],
        Scenario::SweepKappa => match (&p.kappa_grid, &p.lambda_grid) {
            (Some(ks), _) => ks
                .iter()
                .map(|&k| GridPoint {
                    value: k,
                    lambda: None,
                    kappa: Some(k),
                    n: p.n,
                })
                .collect(),
            (None, Some(ls)) => ls
                .iter()
                .map(|&l| GridPoint {
                    value: l,
                    lambda: Some(l),
                    ..single
                })
                .collect(),
            (None, None) => vec![single],
        },
        Scenario::SweepBeta | Scenario::CompareSurrogates => p
            .n_grid
            .as_deref()
            .unwrap_or(&[])
            .iter()
            .map(|&n| GridPoint {
                value: n as f64,
                n,
                ..single
            })
            .collect(),
    }
}

/// Outcome of one (surrogate, grid point, replication) run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunOutcome {
    pub label: String,
    pub grid_index: usize,
    pub grid_value: f64,
    pub replication: usize,
    pub seed: u64,
    pub kappa_g: f64,
    pub beta_over_mu: f64,
    pub alpha: f64,
    pub z_predicted: Option<f64>,
    pub vacuous: bool,
    pub uncertified: bool,
    pub t_epsilon: Option<usize>,
    pub iterations: usize,
    pub dataset_hash: String,
    pub trace_file: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub grid_value: f64,
    pub kappa_g: f64,
    pub beta_over_mu: f64,
    pub alpha_used: f64,
    pub t_eps_mean: Option<f64>,
    pub t_eps_std: Option<f64>,
    pub z_predicted: Option<f64>,
    pub flag: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SummaryTable {
    pub rows: Vec<SummaryRow>,
}

impl SummaryTable {
    pub fn column(&self, name: &str) -> Result<Vec<f64>> {
        self.rows
            .iter()
            .map(|r| {
                let v = match name {
                    "grid_value" => Some(r.grid_value),
                    "kappa_g" => Some(r.kappa_g),
                    "beta_over_mu" => Some(r.beta_over_mu),
                    "alpha_used" => Some(r.alpha_used),
                    "T_eps_mean" => r.t_eps_mean,
                    "T_eps_std" => r.t_eps_std,
                    "z_predicted" => r.z_predicted,
                    other => return Err(Error::Config(format!("unknown summary column '{other}'"))),
                };
                Ok(v.unwrap_or(f64::NAN))
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
        let mut out = String::from(SUMMARY_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                fmt_f64(r.grid_value),
                fmt_f64(r.kappa_g),
                fmt_f64(r.beta_over_mu),
                fmt_f64(r.alpha_used),
                opt(r.t_eps_mean),
                opt(r.t_eps_std),
                opt(r.z_predicted),
                r.flag
            ));
        }
        out
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScenarioOutput {
    /// One summary per surrogate label, in configuration order.
    pub summaries: Vec<(String, SummaryTable)>,
    pub runs: Vec<RunOutcome>,
    pub files: Vec<PathBuf>,
}

impl ScenarioOutput {
    pub fn summary(&self, label: &str) -> Option<&SummaryTable> {
        self.summaries.iter().find(|(l, _)| l == label).map(|(_, t)| t)
    }

    pub fn runs_csv(&self) -> String {
        let mut out = String::from(RUNS_HEADER);
        out.push('\n');
        for r in &self.runs {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.label,
                fmt_f64(r.grid_value),
                r.replication,
                r.seed,
                r.t_epsilon.map(|t| t.to_string()).unwrap_or_default(),
                r.t_epsilon.is_some(),
                r.dataset_hash,
                r.trace_file
                    .as_ref()
                    .and_then(|p| p.file_name())
                    .map(|f| f.to_string_lossy().into_owned())
                    .unwrap_or_default()
            ));
        }
        out
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn fit_scaling_exponent(table: &SummaryTable, x_column: &str, y_column: &str) -> Result<f64> {
    fit_log_log(&table.column(x_column)?, &table.column(y_column)?)
}

pub fn fit_log_log(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 3 {
        return Err(Error::Fit("need at least 3 paired rows".into()));
    }
    if xs.iter().chain(ys).any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::Fit("log-log fit needs positive finite values".into()));
    }
    let pts: Vec<(f64, f64)> = xs.iter().zip(ys).map(|(x, y)| (x.ln(), y.ln())).collect();
    least_squares_slope(&pts).ok_or_else(|| Error::Fit("x values are all equal".into()))
}

fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn combined_hash(hashes: &[String]) -> String {
    let mut h = Sha256::new();
    for s in hashes {
        h.update(s.as_bytes());
    }
    format!("{:x}", h.finalize())
}

enum DataSource {
    Synthetic(Vec<Vec<RidgeData>>),
    Fixed(RidgeData),
    File(CompositeProblem),
}

fn labels(cfg: &ExperimentConfig) -> Vec<SurrogateKind> {
    match cfg.scenario {
        Scenario::CompareSurrogates => vec![SurrogateKind::linearization(), SurrogateKind::local_f()],
        _ => vec![cfg.surrogate.kind.clone()],
    }
}

fn replication_seed(cfg: &ExperimentConfig, rep: usize) -> u64 {
    seed::child(cfg.seed, seed::REPLICATION, rep as u64)
}

fn build_network(cfg: &ExperimentConfig, m: usize, rep_seed: u64) -> Result<Network> {
    let net_seed = cfg
        .network
        .seed
        .unwrap_or_else(|| seed::child(rep_seed, seed::NETWORK, 0));
    match cfg.mode() {
        SolverMode::Star => Ok(Network::Star),
        SolverMode::Undirected => {
            if let Some(path) = &cfg.network.weights_file {
                return Ok(Network::Static(NetworkFile::read(path)?.mixing_matrix()?));
            }
            let t = generate_topology(&cfg.network.topology, m, net_seed)?;
            Ok(Network::Static(metropolis_weights(&t)?))
        }
        SolverMode::TimeVarying => {
            let tv = cfg.network.tv.clone().unwrap_or_default();
            let base = generate_topology(&cfg.network.topology, m, net_seed)?;
            let c_ell = tv.c_ell.unwrap_or(1.0 / m as f64);
            Ok(Network::TimeVarying(generate_tv_network(tv.kind, &base, tv.window, c_ell, net_seed)?))
        }
    }
}

fn with_composite(p: CompositeProblem, g: NonsmoothTerm, k: ConstraintSet) -> Result<CompositeProblem> {
    if g == NonsmoothTerm::Zero && k == ConstraintSet::AllSpace {
        return Ok(p);
    }
    let beta = p.beta_estimate();
    let q = CompositeProblem::new(p.losses().to_vec(), g, k)?;
    Ok(match beta {
        Some(b) => q.with_beta(b),
        None => q,
    })
}

#[allow(clippy::too_many_arguments)]
fn run_one(
    cfg: &ExperimentConfig,
    kind: &SurrogateKind,
    data: &DataSource,
    point: &GridPoint,
    n_index: usize,
    grid_index: usize,
    rep: usize,
    out_dir: Option<&Path>,
) -> Result<RunOutcome> {
    let rep_seed = replication_seed(cfg, rep);
    let (problem, hash) = match data {
        DataSource::File(p) => (p.clone(), String::new()),
        DataSource::Fixed(_) | DataSource::Synthetic(_) => {
            let d = match data {
                DataSource::Synthetic(v) => &v[n_index][rep],
                DataSource::Fixed(d) => d,
                DataSource::File(_) => unreachable!(),
            };
            let lambda = match (point.lambda, point.kappa) {
                (Some(l), _) => l,
                (None, Some(k)) => d.lambda_for_kappa(k)?,
                (None, None) => cfg.problem.lambda,
            };
            (d.problem(lambda)?, combined_hash(&d.hashes))
        }
    };
    let problem = with_composite(problem, cfg.problem.g, cfg.problem.constraint)?;
    let (_, u_star) = centralized_solution(&problem, 1e-12)?;
    let network = build_network(cfg, problem.m(), rep_seed)?;
    let spec = surrogate_constants(kind, &problem)?.with_inner_tol(cfg.surrogate.inner_tol);

    let mut rounds = cfg.network.comm_rounds;
    let mut chebyshev = cfg.network.chebyshev;
    let base_rho = match &network {
        Network::Static(w) => w.rho(),
        _ => 0.0,
    };
    if cfg.network.auto_rounds && matches!(network, Network::Static(_)) {
        let c = rates::chebyshev_round_count(
            &RateInputs::from_spec(&problem, &spec, base_rho),
            rates::constants::CHEBYSHEV_CAP,
        )?;
        rounds = c.k;
        chebyshev = true;
    }
    let rho_eff = if chebyshev {
        chebyshev_contraction(base_rho, rounds)
    } else {
        base_rho.powi(rounds as i32)
    };
    let inputs = RateInputs::from_spec(&problem, &spec, rho_eff);
    let (alpha_max, certify): (f64, Box<dyn Fn(f64) -> Option<f64>>) = match &network {
        Network::Star => {
            let inp = inputs;
            let cap = (2.0 * inp.alpha_cap()).min(1.0);
            (cap, Box::new(move |a| Some(rates::star_rate_expression(&inp, a))))
        }
        Network::Static(_) => {
            let r = rates::certify_undirected(&inputs)?;
            let inp = inputs;
            (
                r.alpha_max,
                Box::new(move |a| rates::theorem_rate_undirected(&inp, a).ok().and_then(|r| r.z)),
            )
        }
        Network::TimeVarying(net) => {
            let inp = inputs.with_tv(TvParams::from(net.constants()));
            let r = rates::certify_tv(&inp)?;
            (
                r.alpha_max,
                Box::new(move |a| rates::theorem_rate_tv(&inp, a).ok().and_then(|r| r.z)),
            )
        }
    };
    let vacuous = alpha_max < rates::constants::VACUOUS_FLOOR;
    let alpha = match cfg.solver.alpha {
        AlphaRule::Fixed { value } => value,
        AlphaRule::CTimesAlphaMax { c } => c * alpha_max,
    };
    if !(alpha > 0.0) {
        return Err(Error::Config(format!(
            "step size c * alpha_max underflows ({alpha_max:e}); use a fixed alpha"
        )));
    }
    let z_predicted = certify(alpha);
    let solver_cfg = SolverConfig {
        alpha,
        max_iters: cfg.solver.max_iters,
        comm_rounds: rounds,
        chebyshev,
        seed: rep_seed,
        mode: network.mode(),
        epsilon: cfg.solver.epsilon,
        init: cfg.solver.init,
        stop_at_epsilon: true,
        parallel: cfg.solver.parallel,
    };
    let trace = Solver::new(&problem, &spec, &network, solver_cfg, u_star)?.run()?;
    let label = kind.name().to_string();
    let trace_file = match out_dir {
        Some(dir) if cfg.output.traces => {
            let path = dir
                .join("traces")
                .join(format!("{label}_g{grid_index:03}_r{rep:03}.csv"));
            write_atomic(&path, &trace.to_csv_string()?)?;
            Some(path)
        }
        _ => None,
    };
    Ok(RunOutcome {
        label,
        grid_index,
        grid_value: point.value,
        replication: rep,
        seed: rep_seed,
        kappa_g: problem.kappa_g(),
        beta_over_mu: problem.beta().unwrap_or(f64::NAN) / problem.mu(),
        alpha,
        z_predicted,
        vacuous,
        uncertified: z_predicted.is_none(),
        t_epsilon: trace.t_epsilon,
        iterations: trace.last().iter,
        dataset_hash: hash,
        trace_file,
    })
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn summarize(runs: &[&RunOutcome], points: &[GridPoint]) -> SummaryTable {
    let rows = points
        .iter()
        .enumerate()
        .map(|(gi, pt)| {
            let rs: Vec<&&RunOutcome> = runs.iter().filter(|r| r.grid_index == gi).collect();
            let t: Vec<f64> = rs.iter().filter_map(|r| r.t_epsilon.map(|t| t as f64)).collect();
            let t_mean = mean(&t);
            let t_std = t_mean.map(|mu| {
                if t.len() < 2 {
                    0.0
                } else {
                    (t.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (t.len() - 1) as f64).sqrt()
                }
            });
            let zs: Vec<f64> = rs.iter().filter_map(|r| r.z_predicted).collect();
            let mut flags = Vec::new();
            if t.len() < rs.len() {
                flags.push("unreached");
            }
            if rs.iter().any(|r| r.vacuous) {
                flags.push("vacuous");
            }
            if rs.iter().any(|r| r.uncertified) {
                flags.push("uncertified");
            }
            let col = |f: fn(&RunOutcome) -> f64| mean(&rs.iter().map(|r| f(r)).collect::<Vec<_>>()).unwrap_or(f64::NAN);
            SummaryRow {
                grid_value: pt.value,
                kappa_g: col(|r| r.kappa_g),
                beta_over_mu: col(|r| r.beta_over_mu),
                alpha_used: col(|r| r.alpha),
                t_eps_mean: t_mean,
                t_eps_std: t_std,
                z_predicted: mean(&zs),
                flag: flags.join(";"),
            }
        })
        .collect();
    SummaryTable { rows }
}

/// Runs every (surrogate, grid point, replication) combination and, when
/// `out_dir` is given, writes the summaries, the run index and the traces.
pub fn run_scenario(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<ScenarioOutput> {
    cfg.validate()?;
    let points = grid(cfg);
    let reps = cfg.monte_carlo.replications;
    let mut ns: Vec<usize> = points.iter().map(|p| p.n).collect();
    ns.dedup();
    let p = &cfg.problem;
    let data = if let Some(path) = &p.file {
        DataSource::File(CompositeProblem::from_json(&fs::read_to_string(path)?)?)
    } else if let Some(files) = &p.csv_files {
        let sets = files
            .iter()
            .map(|f| crate::problem::load_agent_csv(f))
            .collect::<Result<Vec<_>>>()?;
        DataSource::Fixed(RidgeData::from_datasets(&sets)?)
    } else {
        let jobs: Vec<(usize, usize)> = (0..ns.len()).flat_map(|i| (0..reps).map(move |r| (i, r))).collect();
        let flat = jobs
            .par_iter()
            .map(|&(i, r)| RidgeData::generate(p.m, ns[i], p.d, p.mu0, p.l0, replication_seed(cfg, r)))
            .collect::<Result<Vec<_>>>()?;
        let mut it = flat.into_iter();
        DataSource::Synthetic((0..ns.len()).map(|_| it.by_ref().take(reps).collect()).collect())
    };
    let kinds = labels(cfg);
    let mut jobs = Vec::new();
    for (ki, _) in kinds.iter().enumerate() {
        for (gi, pt) in points.iter().enumerate() {
            let ni = ns.iter().position(|&n| n == pt.n).unwrap_or(0);
            for r in 0..reps {
                jobs.push((ki, gi, ni, r));
            }
        }
    }
    let runs = jobs
        .par_iter()
        .map(|&(ki, gi, ni, r)| run_one(cfg, &kinds[ki], &data, &points[gi], ni, gi, r, out_dir))
        .collect::<Result<Vec<_>>>()?;

    let mut out = ScenarioOutput::default();
    for kind in &kinds {
        let label = kind.name();
        let mine: Vec<&RunOutcome> = runs.iter().filter(|r| r.label == label).collect();
        out.summaries.push((label.to_string(), summarize(&mine, &points)));
    }
    out.files = runs.iter().filter_map(|r| r.trace_file.clone()).collect();
    out.runs = runs;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        for (label, table) in &out.summaries {
            let name = if out.summaries.len() == 1 {
                "summary.csv".to_string()
            } else {
                format!("summary_{label}.csv")
            };
            let path = dir.join(name);
            write_atomic(&path, &table.to_csv())?;
            out.files.push(path);
        }
        let path = dir.join("runs.csv");
        write_atomic(&path, &out.runs_csv())?;
        out.files.push(path);
    }
    Ok(out)
}
