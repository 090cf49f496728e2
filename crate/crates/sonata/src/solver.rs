//! SONATA drivers: undirected gradient tracking, the star (master/worker)
//! variant and push-sum over time-varying digraphs.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{chebyshev_mix, consensus_error, MixingMatrix, TimeVaryingNetwork};
use crate::problem::{centralized_solution, CompositeProblem};
use crate::seed;
use crate::surrogate::{PreparedSubproblems, SurrogateSpec};

pub const DEFAULT_EPSILON: f64 = 1e-7;
pub const DEFAULT_MAX_ITERS: usize = 100_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverMode {
    Undirected,
    Star,
    TimeVarying,
}

/// Communication pattern a run executes on.
#[derive(Clone, Debug)]
pub enum Network {
    Static(MixingMatrix),
    Star,
    TimeVarying(TimeVaryingNetwork),
}

impl Network {
    pub fn mode(&self) -> SolverMode {
        match self {
            Network::Static(_) => SolverMode::Undirected,
            Network::Star => SolverMode::Star,
            Network::TimeVarying(_) => SolverMode::TimeVarying,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Init {
    /// Every agent starts at the projection of the origin onto `K`.
    Zero,
    /// Per-agent Gaussian start with the given scale, then projected.
    Random { scale: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverConfig {
    pub alpha: f64,
    pub max_iters: usize,
    pub comm_rounds: usize,
    pub chebyshev: bool,
    pub seed: u64,
    pub mode: SolverMode,
    pub epsilon: f64,
    pub init: Init,
    /// Stop as soon as `p / m <= epsilon`.
    pub stop_at_epsilon: bool,
    /// Solve agent subproblems on the rayon pool.
    pub parallel: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            max_iters: DEFAULT_MAX_ITERS,
            comm_rounds: 1,
            chebyshev: false,
            seed: 0,
            mode: SolverMode::Undirected,
            epsilon: DEFAULT_EPSILON,
            init: Init::Zero,
            stop_at_epsilon: true,
            parallel: false,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0, 1], got {}", self.alpha)));
        }
        if self.comm_rounds == 0 {
            return Err(Error::Config("comm_rounds must be at least 1".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// Stacked agent states, one row per agent.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkState {
    pub x: DMatrix<f64>,
    pub y: DMatrix<f64>,
    /// `grad f_i(x_i)` cached for the tracking update.
    pub grad: DMatrix<f64>,
    /// Push-sum weights; identically one outside time-varying mode.
    pub phi: DVector<f64>,
    /// Index of the next time-varying frame.
    pub frame: usize,
}

impl NetworkState {
    /// `x_i = x0_i`, `y_i = grad f_i(x_i)`, `phi_i = 1`.
    pub fn new(problem: &CompositeProblem, x0: DMatrix<f64>) -> Self {
        let grad = stacked_gradients(problem, &x0);
        let m = x0.nrows();
        Self {
            y: grad.clone(),
            grad,
            x: x0,
            phi: DVector::from_element(m, 1.0),
            frame: 0,
        }
    }

    /// Star initialization: every tracker holds `grad F(x)`.
    pub fn new_star(problem: &CompositeProblem, x: &DVector<f64>) -> Self {
        let m = problem.m();
        let xs = DMatrix::from_fn(m, x.len(), |_, j| x[j]);
        let grad = stacked_gradients(problem, &xs);
        let mean = grad.row_sum() / m as f64;
        let y = DMatrix::from_fn(m, x.len(), |_, j| mean[j]);
        Self {
            x: xs,
            y,
            grad,
            phi: DVector::from_element(m, 1.0),
            frame: 0,
        }
    }

    pub fn m(&self) -> usize {
        self.x.nrows()
    }

    pub fn agent_x(&self, i: usize) -> DVector<f64> {
        self.x.row(i).transpose()
    }

    /// `||(1/m) sum_i phi_i y_i - (1/m) sum_i grad f_i(x_i)||`.
    pub fn tracking_defect(&self) -> f64 {
        let m = self.m() as f64;
        let mut weighted = self.y.clone();
        for (mut row, p) in weighted.row_iter_mut().zip(self.phi.iter()) {
            row *= *p;
        }
        ((weighted.row_sum() - self.grad.row_sum()) / m).norm()
    }

    /// `||(1/m) sum_i grad f_i(x_i)||`.
    pub fn mean_gradient_norm(&self) -> f64 {
        (self.grad.row_sum() / self.m() as f64).norm()
    }
}

fn stacked_gradients(problem: &CompositeProblem, x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut g = DMatrix::zeros(x.nrows(), x.ncols());
    for (i, loss) in problem.losses().iter().enumerate() {
        let gi = loss.gradient(&x.row(i).transpose());
        g.row_mut(i).copy_from(&gi.transpose());
    }
    g
}

fn project_rows(problem: &CompositeProblem, x: &mut DMatrix<f64>) {
    if problem.constraint().is_all_space() {
        return;
    }
    for i in 0..x.nrows() {
        let p = problem.constraint().project(&x.row(i).transpose());
        x.row_mut(i).copy_from(&p.transpose());
    }
}

/// Per-agent subproblem solves, stacked as `Delta x`.
fn directions(subs: &PreparedSubproblems<'_>, x: &DMatrix<f64>, y: &DMatrix<f64>, parallel: bool) -> Result<DMatrix<f64>> {
    let m = x.nrows();
    let solve = |i: usize| subs.solve(i, &x.row(i).transpose(), &y.row(i).transpose()).map(|r| r.direction);
    let dirs: Vec<DVector<f64>> = if parallel {
        (0..m).into_par_iter().map(solve).collect::<Result<_>>()?
    } else {
        (0..m).map(solve).collect::<Result<_>>()?
    };
    let mut out = DMatrix::zeros(m, x.ncols());
    for (i, d) in dirs.iter().enumerate() {
        out.row_mut(i).copy_from(&d.transpose());
    }
    Ok(out)
}

/// Static mixing applied `rounds` times, or as a degree-`rounds` Chebyshev polynomial.
#[derive(Clone, Copy, Debug)]
pub struct StaticMixer<'a> {
    pub w: &'a MixingMatrix,
    pub rounds: usize,
    pub chebyshev: bool,
}

impl StaticMixer<'_> {
    pub fn single(w: &MixingMatrix) -> StaticMixer<'_> {
        StaticMixer {
            w,
            rounds: 1,
            chebyshev: false,
        }
    }

    pub fn apply(&self, v: &DMatrix<f64>) -> DMatrix<f64> {
        if self.chebyshev {
            return chebyshev_mix(self.w, v, self.rounds);
        }
        let mut out = self.w.apply(v);
        for _ in 1..self.rounds {
            out = self.w.apply(&out);
        }
        out
    }
}

/// One undirected iteration; returns `||Delta x||_F`.
pub fn sonata_undirected_step(
    state: &mut NetworkState,
    problem: &CompositeProblem,
    subs: &PreparedSubproblems<'_>,
    mixer: StaticMixer<'_>,
    alpha: f64,
    parallel: bool,
) -> Result<f64> {
    let dx = directions(subs, &state.x, &state.y, parallel)?;
    let half = &state.x + &dx * alpha;
    let mut x_next = mixer.apply(&half);
    project_rows(problem, &mut x_next);
    let g_next = stacked_gradients(problem, &x_next);
    let y_next = mixer.apply(&(&state.y + &g_next - &state.grad));
    state.x = x_next;
    state.y = y_next;
    state.grad = g_next;
    Ok(dx.norm())
}

/// One master/worker iteration from the shared iterate `x`; returns `(x', ||mean Delta x||)`.
pub fn sonata_star_step(
    x: &DVector<f64>,
    problem: &CompositeProblem,
    subs: &PreparedSubproblems<'_>,
    alpha: f64,
    parallel: bool,
) -> Result<(DVector<f64>, f64)> {
    let grad_f = problem.f_gradient(x);
    let m = problem.m();
    let solve = |i: usize| subs.solve(i, x, &grad_f).map(|r| r.x_hat);
    let hats: Vec<DVector<f64>> = if parallel {
        (0..m).into_par_iter().map(solve).collect::<Result<_>>()?
    } else {
        (0..m).map(solve).collect::<Result<_>>()?
    };
    let mut mean = DVector::zeros(x.len());
    for h in &hats {
        mean += h;
    }
    mean /= m as f64;
    let step = (&mean - x) * alpha;
    let norm = step.norm() / alpha.max(f64::MIN_POSITIVE);
    Ok((x + step, norm))
}

/// One push-sum iteration over `rounds` consecutive frames starting at `state.frame`.
pub fn sonata_tv_step(
    state: &mut NetworkState,
    problem: &CompositeProblem,
    subs: &PreparedSubproblems<'_>,
    net: &TimeVaryingNetwork,
    rounds: usize,
    alpha: f64,
    parallel: bool,
) -> Result<f64> {
    let frames: Vec<DMatrix<f64>> = (0..rounds.max(1)).map(|r| net.matrix(state.frame + r)).collect();
    let norm = sonata_tv_step_with(state, problem, subs, &frames, alpha, parallel)?;
    state.frame += frames.len();
    Ok(norm)
}

/// Push-sum iteration with explicit column-stochastic matrices applied in order.
pub fn sonata_tv_step_with(
    state: &mut NetworkState,
    problem: &CompositeProblem,
    subs: &PreparedSubproblems<'_>,
    frames: &[DMatrix<f64>],
    alpha: f64,
    parallel: bool,
) -> Result<f64> {
    let dx = directions(subs, &state.x, &state.y, parallel)?;
    let half = &state.x + &dx * alpha;
    let mut u = scale_rows(&half, &state.phi);
    let mut phi = state.phi.clone();
    for c in frames {
        u = c * u;
        phi = c * phi;
    }
    if let Some(bad) = phi.iter().position(|&p| !(p > 0.0)) {
        return Err(Error::Invariant(format!("push-sum weight of agent {bad} is {}", phi[bad])));
    }
    let inv = phi.map(|p| 1.0 / p);
    let mut x_next = scale_rows(&u, &inv);
    project_rows(problem, &mut x_next);
    let g_next = stacked_gradients(problem, &x_next);
    let mut v = scale_rows(&state.y, &state.phi) + &g_next - &state.grad;
    for c in frames {
        v = c * v;
    }
    state.y = scale_rows(&v, &inv);
    state.x = x_next;
    state.grad = g_next;
    state.phi = phi;
    Ok(dx.norm())
}

fn scale_rows(v: &DMatrix<f64>, s: &DVector<f64>) -> DMatrix<f64> {
    let mut out = v.clone();
    for (mut row, k) in out.row_iter_mut().zip(s.iter()) {
        row *= *k;
    }
    out
}

/// Fast `F` evaluation: averaged quadratic when available.
enum Objective<'a> {
    Quadratic {
        h: DMatrix<f64>,
        q: DVector<f64>,
        c: f64,
        problem: &'a CompositeProblem,
    },
    General(&'a CompositeProblem),
}

impl<'a> Objective<'a> {
    fn new(problem: &'a CompositeProblem) -> Self {
        match problem.average_hessian() {
            Some(h) => {
                let m = problem.m() as f64;
                let mut q = DVector::zeros(problem.d());
                let mut c = 0.0;
                for f in problem.losses() {
                    let qf = f.as_quadratic().expect("quadratic");
                    q += qf.linear();
                    c += qf.constant();
                }
                Objective::Quadratic {
                    h,
                    q: q / m,
                    c: c / m,
                    problem,
                }
            }
            None => Objective::General(problem),
        }
    }

    fn u(&self, x: &DVector<f64>) -> f64 {
        match self {
            Objective::Quadratic { h, q, c, problem } => {
                if !problem.constraint().contains(x) {
                    return f64::INFINITY;
                }
                0.5 * x.dot(&(h * x)) - q.dot(x) + c + problem.g().value(x)
            }
            Objective::General(p) => p.u_value(x),
        }
    }

    fn grad(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            Objective::Quadratic { h, q, .. } => h * x - q,
            Objective::General(p) => p.f_gradient(x),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iter: usize,
    /// `sum_i (U(x_i) - U*)`.
    pub p: f64,
    pub x_perp: f64,
    pub y_perp: f64,
    /// `||stack(grad F(x_i) - y_i)||`.
    pub delta: f64,
    /// Norm of the direction that produced this iterate.
    pub dx: f64,
    pub obj_mean: f64,
    /// Weighted tracking defect; not exported to CSV.
    #[serde(skip)]
    pub tracking: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunTrace {
    pub records: Vec<TraceRecord>,
    pub t_epsilon: Option<usize>,
    pub epsilon: f64,
    pub u_star: f64,
    pub alpha: f64,
    pub mode: SolverMode,
    pub final_state: NetworkState,
}

pub const TRACE_HEADER: &str = "iter,p,x_perp,y_perp,delta,dx,obj_mean";

impl RunTrace {
    pub fn reached(&self) -> bool {
        self.t_epsilon.is_some()
    }

    pub fn last(&self) -> &TraceRecord {
        self.records.last().expect("trace has at least the initial record")
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(TRACE_HEADER.split(','))?;
        for r in &self.records {
            w.write_record([
                r.iter.to_string(),
                fmt_f64(r.p),
                fmt_f64(r.x_perp),
                fmt_f64(r.y_perp),
                fmt_f64(r.delta),
                fmt_f64(r.dx),
                fmt_f64(r.obj_mean),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }

    /// Least-squares slope of `ln p` over the final `fraction` of records with `p > 0`.
    pub fn tail_log_slope(&self, fraction: f64) -> Option<f64> {
        let n = self.records.len();
        let start = ((1.0 - fraction.clamp(0.0, 1.0)) * n as f64).floor() as usize;
        let pts: Vec<(f64, f64)> = self.records[start..]
            .iter()
            .filter(|r| r.p > 0.0 && r.p.is_finite())
            .map(|r| (r.iter as f64, r.p.ln()))
            .collect();
        least_squares_slope(&pts)
    }
}

pub(crate) fn least_squares_slope(pts: &[(f64, f64)]) -> Option<f64> {
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        None
    } else {
        Some(sxy / sxx)
    }
}

/// Shortest round-trip decimal form.
pub(crate) fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        let s = format!("{v:?}");
        s.strip_suffix(".0").map(str::to_string).unwrap_or(s)
    } else if v.is_nan() {
        "NaN".into()
    } else if v > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

/// Drives one configured run and records per-iteration metrics.
pub struct Solver<'a> {
    problem: &'a CompositeProblem,
    subs: PreparedSubproblems<'a>,
    network: &'a Network,
    config: SolverConfig,
    objective: Objective<'a>,
    u_star: f64,
}

impl<'a> Solver<'a> {
    pub fn new(
        problem: &'a CompositeProblem,
        spec: &'a SurrogateSpec,
        network: &'a Network,
        config: SolverConfig,
        u_star: f64,
    ) -> Result<Self> {
        config.validate()?;
        if config.mode != network.mode() {
            return Err(Error::Config(format!(
                "solver mode {:?} does not match the supplied network ({:?})",
                config.mode,
                network.mode()
            )));
        }
        let nodes = match network {
            Network::Static(w) => Some(w.node_count()),
            Network::TimeVarying(t) => Some(t.node_count()),
            Network::Star => None,
        };
        if let Some(n) = nodes {
            if n != problem.m() {
                return Err(Error::Config(format!(
                    "network has {n} nodes but the problem has {} agents",
                    problem.m()
                )));
            }
        }
        Ok(Self {
            problem,
            subs: PreparedSubproblems::new(spec, problem),
            network,
            config,
            objective: Objective::new(problem),
            u_star,
        })
    }

    pub fn config(&self) -> &SolverConfig {
        &self.config
    }

    pub fn initial_point(&self) -> DMatrix<f64> {
        let m = self.problem.m();
        let d = self.problem.d();
        let origin = self.problem.constraint().project(&DVector::zeros(d));
        let mut x = DMatrix::from_fn(m, d, |_, j| origin[j]);
        if let Init::Random { scale } = self.config.init {
            for i in 0..m {
                let mut rng = seed::stream(self.config.seed, seed::ALGORITHM, i as u64);
                let raw = DVector::from_fn(d, |_, _| { let s: f64 = StandardNormal.sample(&mut rng); scale * s });
                let p = self.problem.constraint().project(&raw);
                x.row_mut(i).copy_from(&p.transpose());
            }
        }
        x
    }

    pub fn initial_state(&self) -> NetworkState {
        let x0 = self.initial_point();
        match self.network {
            Network::Star => NetworkState::new_star(self.problem, &x0.row(0).transpose()),
            _ => NetworkState::new(self.problem, x0),
        }
    }

    /// Advances `state` by one iteration; returns `||Delta x||`.
    pub fn step(&self, state: &mut NetworkState) -> Result<f64> {
        let alpha = self.config.alpha;
        let par = self.config.parallel;
        match self.network {
            Network::Static(w) => {
                let mixer = StaticMixer {
                    w,
                    rounds: self.config.comm_rounds,
                    chebyshev: self.config.chebyshev,
                };
                sonata_undirected_step(state, self.problem, &self.subs, mixer, alpha, par)
            }
            Network::Star => {
                let x = state.agent_x(0);
                let (next, norm) = sonata_star_step(&x, self.problem, &self.subs, alpha, par)?;
                *state = NetworkState::new_star(self.problem, &next);
                Ok(norm)
            }
            Network::TimeVarying(net) => {
                sonata_tv_step(state, self.problem, &self.subs, net, self.config.comm_rounds, alpha, par)
            }
        }
    }

    pub fn record(&self, iter: usize, state: &NetworkState, dx: f64) -> TraceRecord {
        let m = state.m();
        let mut p = 0.0;
        let mut obj = 0.0;
        let mut delta2 = 0.0;
        for i in 0..m {
            let xi = state.agent_x(i);
            let u = self.objective.u(&xi);
            obj += u;
            p += u - self.u_star;
            let gi = self.objective.grad(&xi);
            delta2 += (gi - state.y.row(i).transpose()).norm_squared();
        }
        TraceRecord {
            iter,
            p,
            x_perp: consensus_error(&state.x),
            y_perp: consensus_error(&state.y),
            delta: delta2.sqrt(),
            dx,
            obj_mean: obj / m as f64,
            tracking: state.tracking_defect(),
        }
    }

    pub fn run(&self) -> Result<RunTrace> {
        let mut state = self.initial_state();
        let m = state.m() as f64;
        let mut records = vec![self.record(0, &state, 0.0)];
        let mut t_eps = (records[0].p / m <= self.config.epsilon).then_some(0);
        let mut iter = 0;
        while iter < self.config.max_iters && !(self.config.stop_at_epsilon && t_eps.is_some()) {
            let dx = self.step(&mut state)?;
            iter += 1;
            let rec = self.record(iter, &state, dx);
            if !rec.p.is_finite() {
                return Err(Error::Invariant(format!("optimality gap diverged at iteration {iter}")));
            }
            if t_eps.is_none() && rec.p / m <= self.config.epsilon {
                t_eps = Some(iter);
            }
            records.push(rec);
        }
        Ok(RunTrace {
            records,
            t_epsilon: t_eps,
            epsilon: self.config.epsilon,
            u_star: self.u_star,
            alpha: self.config.alpha,
            mode: self.config.mode,
            final_state: state,
        })
    }
}

/// Solves for `U*` centrally, then runs.
pub fn run(problem: &CompositeProblem, network: &Network, spec: &SurrogateSpec, config: SolverConfig) -> Result<RunTrace> {
    let (_, u_star) = centralized_solution(problem, 1e-12)?;
    Solver::new(problem, spec, network, config, u_star)?.run()
}
