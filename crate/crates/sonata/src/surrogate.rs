//! Local surrogate models and the agent subproblem
//! `argmin_{x in K} f~_i(x; x_i) + (y_i - grad f_i(x_i))^T (x - x_i) + G(x)`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problem::{extreme_eigenvalues, prox_composite, CompositeProblem, ConstraintSet, NonsmoothTerm, SmoothLoss};

pub const DEFAULT_INNER_TOL: f64 = 1e-12;
pub const DEFAULT_INNER_MAX_ITERS: usize = 100_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SurrogateKind {
    /// `f_i(x_i) + grad f_i(x_i)^T (x - x_i) + tau/2 ||x - x_i||^2`, `tau` defaults to `L`.
    Linearization {
        #[serde(default)]
        tau: Option<f64>,
    },
    /// `f_i(x) + tau/2 ||x - x_i||^2`, `tau` defaults to `beta`.
    LocalF {
        #[serde(default)]
        tau: Option<f64>,
    },
    /// `f_i(x_i) + grad f_i(x_i)^T (x - x_i) + 1/2 (x - x_i)^T Q (x - x_i)` with declared constants.
    Custom {
        matrix: Vec<Vec<f64>>,
        mu_tilde: f64,
        l_tilde: f64,
        d_ell: f64,
        d_u: f64,
    },
}

impl SurrogateKind {
    pub fn linearization() -> Self {
        SurrogateKind::Linearization { tau: None }
    }

    pub fn local_f() -> Self {
        SurrogateKind::LocalF { tau: None }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SurrogateKind::Linearization { .. } => "linearization",
            SurrogateKind::LocalF { .. } => "local_f",
            SurrogateKind::Custom { .. } => "custom",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "linearization" => Ok(Self::linearization()),
            "local_f" => Ok(Self::local_f()),
            other => Err(Error::Config(format!(
                "unknown surrogate '{other}' (expected linearization or local_f)"
            ))),
        }
    }
}

/// Surrogate with its aggregate constants `mu~_mn`, `L~_mx`, `D^l_mn`, `D^u`.
#[derive(Clone, Debug, PartialEq)]
pub struct SurrogateSpec {
    pub kind: SurrogateKind,
    pub tau: f64,
    pub mu_tilde: f64,
    pub l_tilde: f64,
    pub d_ell: f64,
    pub d_u: f64,
    /// Bound on `max_i L_i` used by the rate formulas.
    pub l_mx: f64,
    pub inner_tol: f64,
    pub inner_max_iters: usize,
    custom: Option<CustomModel>,
}

#[derive(Clone, Debug, PartialEq)]
struct CustomModel {
    q: DMatrix<f64>,
    lo: f64,
    hi: f64,
}

impl SurrogateSpec {
    /// `D_mx = max(|D^l|, |D^u|)`.
    pub fn d_mx(&self) -> f64 {
        self.d_ell.abs().max(self.d_u.abs())
    }

    pub fn with_inner_tol(mut self, tol: f64) -> Self {
        self.inner_tol = tol;
        self
    }
}

/// Constants of a surrogate family on a given problem.
pub fn surrogate_constants(kind: &SurrogateKind, problem: &CompositeProblem) -> Result<SurrogateSpec> {
    let mu = problem.mu();
    let l = problem.l();
    let beta = problem.beta();
    let l_mx = match beta {
        Some(b) => l + b,
        None => problem.l_mx(),
    };
    let base = |tau, mu_tilde, l_tilde, d_ell, d_u, l_mx| SurrogateSpec {
        kind: kind.clone(),
        tau,
        mu_tilde,
        l_tilde,
        d_ell,
        d_u,
        l_mx,
        inner_tol: DEFAULT_INNER_TOL,
        inner_max_iters: DEFAULT_INNER_MAX_ITERS,
        custom: None,
    };
    match kind {
        SurrogateKind::Linearization { tau } => {
            let tau = tau.unwrap_or(l);
            if !(tau > 0.0) {
                return Err(Error::Config("surrogate.tau must be positive".into()));
            }
            Ok(base(tau, tau, tau, tau - l, tau - mu, l_mx))
        }
        SurrogateKind::LocalF { tau } => {
            let beta = beta.ok_or_else(|| {
                Error::Capability("local_f needs beta; run estimate_beta on the problem first".into())
            })?;
            let tau = tau.unwrap_or(beta);
            if tau < 0.0 {
                return Err(Error::Config("surrogate.tau must be nonnegative".into()));
            }
            let mu_tilde = tau + (mu - beta).max(0.0);
            if !(mu_tilde > 0.0) {
                return Err(Error::Config("local_f with tau = 0 needs beta < mu".into()));
            }
            Ok(base(tau, mu_tilde, l + beta + tau, tau - beta, tau + beta, l + beta))
        }
        SurrogateKind::Custom {
            matrix,
            mu_tilde,
            l_tilde,
            d_ell,
            d_u,
        } => {
            let d = problem.d();
            if matrix.len() != d || matrix.iter().any(|r| r.len() != d) {
                return Err(Error::Config(format!("custom surrogate matrix must be {d}x{d}")));
            }
            let q = DMatrix::from_fn(d, d, |i, j| matrix[i][j]);
            if (&q - q.transpose()).amax() > 1e-10 * (1.0 + q.amax()) {
                return Err(Error::Config("custom surrogate matrix is not symmetric".into()));
            }
            let (lo, hi) = extreme_eigenvalues(&q);
            if !(*mu_tilde > 0.0) || *mu_tilde > lo + 1e-8 * (1.0 + lo.abs()) {
                return Err(Error::Config(format!(
                    "declared mu_tilde = {mu_tilde} exceeds lambda_min(Q) = {lo}"
                )));
            }
            if *l_tilde < *mu_tilde || *d_ell > *d_u {
                return Err(Error::Config("custom surrogate constants are inconsistent".into()));
            }
            let mut s = base(1.0, *mu_tilde, *l_tilde, *d_ell, *d_u, l_mx);
            s.custom = Some(CustomModel { q, lo, hi });
            Ok(s)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubproblemResult {
    pub x_hat: DVector<f64>,
    pub direction: DVector<f64>,
    pub inner_iterations: usize,
    pub residual: f64,
}

/// `f~_i(x; x_i)`.
pub fn surrogate_value(spec: &SurrogateSpec, loss: &SmoothLoss, x_i: &DVector<f64>, x: &DVector<f64>) -> f64 {
    let dx = x - x_i;
    match &spec.kind {
        SurrogateKind::Linearization { .. } => {
            loss.value(x_i) + loss.gradient(x_i).dot(&dx) + 0.5 * spec.tau * dx.norm_squared()
        }
        SurrogateKind::LocalF { .. } => loss.value(x) + 0.5 * spec.tau * dx.norm_squared(),
        SurrogateKind::Custom { .. } => {
            let q = &spec.custom.as_ref().expect("custom model").q;
            loss.value(x_i) + loss.gradient(x_i).dot(&dx) + 0.5 * dx.dot(&(q * &dx))
        }
    }
}

/// `grad_x f~_i(x; x_i)`.
pub fn surrogate_gradient(spec: &SurrogateSpec, loss: &SmoothLoss, x_i: &DVector<f64>, x: &DVector<f64>) -> DVector<f64> {
    let dx = x - x_i;
    match &spec.kind {
        SurrogateKind::Linearization { .. } => loss.gradient(x_i) + dx * spec.tau,
        SurrogateKind::LocalF { .. } => loss.gradient(x) + dx * spec.tau,
        SurrogateKind::Custom { .. } => loss.gradient(x_i) + &spec.custom.as_ref().expect("custom model").q * dx,
    }
}

/// Smooth part of the subproblem objective plus `G`; infinite outside `K`.
pub fn subproblem_objective(
    spec: &SurrogateSpec,
    loss: &SmoothLoss,
    g: &NonsmoothTerm,
    constraint: &ConstraintSet,
    x_i: &DVector<f64>,
    y_i: &DVector<f64>,
    x: &DVector<f64>,
) -> f64 {
    if !constraint.contains(x) {
        return f64::INFINITY;
    }
    let shift = y_i - loss.gradient(x_i);
    surrogate_value(spec, loss, x_i, x) + shift.dot(&(x - x_i)) + g.value(x)
}

/// Agent subproblem with per-agent factorizations cached for reuse across iterations.
pub struct PreparedSubproblems<'a> {
    spec: &'a SurrogateSpec,
    problem: &'a CompositeProblem,
    factors: Vec<Option<Cholesky<f64, Dyn>>>,
}

impl<'a> PreparedSubproblems<'a> {
    pub fn new(spec: &'a SurrogateSpec, problem: &'a CompositeProblem) -> Self {
        let smooth_only = problem.g().is_zero() && problem.constraint().is_all_space();
        let d = problem.d();
        let factors = problem
            .losses()
            .iter()
            .map(|loss| {
                if !smooth_only {
                    return None;
                }
                match (&spec.kind, loss.as_quadratic()) {
                    (SurrogateKind::LocalF { .. }, Some(q)) => {
                        (q.hessian() + DMatrix::identity(d, d) * spec.tau).cholesky()
                    }
                    (SurrogateKind::Custom { .. }, _) => spec.custom.as_ref().and_then(|c| c.q.clone().cholesky()),
                    _ => None,
                }
            })
            .collect();
        Self { spec, problem, factors }
    }

    pub fn spec(&self) -> &SurrogateSpec {
        self.spec
    }

    pub fn solve(&self, agent: usize, x_i: &DVector<f64>, y_i: &DVector<f64>) -> Result<SubproblemResult> {
        let loss = &self.problem.losses()[agent];
        solve_with(
            self.spec,
            loss,
            self.problem.g(),
            self.problem.constraint(),
            x_i,
            y_i,
            self.spec.inner_tol,
            self.factors[agent].as_ref(),
        )
        .map_err(|e| e.with_agent(agent))
    }
}

pub fn solve_subproblem(
    spec: &SurrogateSpec,
    loss: &SmoothLoss,
    g: &NonsmoothTerm,
    constraint: &ConstraintSet,
    x_i: &DVector<f64>,
    y_i: &DVector<f64>,
    tol: f64,
) -> Result<SubproblemResult> {
    let d = x_i.len();
    let smooth_only = g.is_zero() && constraint.is_all_space();
    let factor = if smooth_only {
        match (&spec.kind, loss.as_quadratic()) {
            (SurrogateKind::LocalF { .. }, Some(q)) => (q.hessian() + DMatrix::identity(d, d) * spec.tau).cholesky(),
            (SurrogateKind::Custom { .. }, _) => spec.custom.as_ref().and_then(|c| c.q.clone().cholesky()),
            _ => None,
        }
    } else {
        None
    };
    solve_with(spec, loss, g, constraint, x_i, y_i, tol, factor.as_ref())
}

#[allow(clippy::too_many_arguments)]
fn solve_with(
    spec: &SurrogateSpec,
    loss: &SmoothLoss,
    g: &NonsmoothTerm,
    constraint: &ConstraintSet,
    x_i: &DVector<f64>,
    y_i: &DVector<f64>,
    tol: f64,
    factor: Option<&Cholesky<f64, Dyn>>,
) -> Result<SubproblemResult> {
    if !(tol > 0.0) {
        return Err(Error::Config("inner tolerance must be positive".into()));
    }
    let finish = |x_hat: DVector<f64>, iters: usize, residual: f64| SubproblemResult {
        direction: &x_hat - x_i,
        x_hat,
        inner_iterations: iters,
        residual,
    };
    match &spec.kind {
        SurrogateKind::Linearization { .. } => {
            let t = 1.0 / spec.tau;
            let x_hat = prox_composite(g, constraint, &(x_i - y_i * t), t);
            Ok(finish(x_hat, 0, 0.0))
        }
        SurrogateKind::LocalF { .. } | SurrogateKind::Custom { .. } => {
            if let Some(chol) = factor {
                // (H_i + tau I) x = H_i x_i + tau x_i - y_i, i.e. x = x_i - (H_i + tau I)^{-1} y_i
                let x_hat = x_i - chol.solve(y_i);
                let r = smooth_residual(spec, loss, x_i, y_i, &x_hat);
                return Ok(finish(x_hat, 0, r));
            }
            let (lo, hi) = inner_bounds(spec, loss);
            let (x_hat, iters, residual) = fista(spec, loss, g, constraint, x_i, y_i, lo, hi, tol)?;
            Ok(finish(x_hat, iters, residual))
        }
    }
}

fn inner_bounds(spec: &SurrogateSpec, loss: &SmoothLoss) -> (f64, f64) {
    match &spec.custom {
        Some(c) => (c.lo, c.hi),
        None => {
            let (mu_i, l_i) = loss.hessian_bounds();
            (mu_i.max(0.0) + spec.tau, l_i + spec.tau)
        }
    }
}

fn smooth_grad(spec: &SurrogateSpec, loss: &SmoothLoss, x_i: &DVector<f64>, shift: &DVector<f64>, x: &DVector<f64>) -> DVector<f64> {
    surrogate_gradient(spec, loss, x_i, x) + shift
}

fn smooth_residual(spec: &SurrogateSpec, loss: &SmoothLoss, x_i: &DVector<f64>, y_i: &DVector<f64>, x: &DVector<f64>) -> f64 {
    let shift = y_i - loss.gradient(x_i);
    smooth_grad(spec, loss, x_i, &shift, x).norm()
}

#[allow(clippy::too_many_arguments)]
fn fista(
    spec: &SurrogateSpec,
    loss: &SmoothLoss,
    g: &NonsmoothTerm,
    constraint: &ConstraintSet,
    x_i: &DVector<f64>,
    y_i: &DVector<f64>,
    lo: f64,
    hi: f64,
    tol: f64,
) -> Result<(DVector<f64>, usize, f64)> {
    let shift = y_i - loss.gradient(x_i);
    let t = 1.0 / hi;
    let q = (lo / hi).clamp(0.0, 1.0).sqrt();
    let momentum = (1.0 - q) / (1.0 + q);
    let scale = 1.0 + y_i.norm();
    let mapping = |x: &DVector<f64>| -> (DVector<f64>, f64) {
        let next = prox_composite(g, constraint, &(x - smooth_grad(spec, loss, x_i, &shift, x) * t), t);
        let r = (x - &next).norm() / t;
        (next, r)
    };
    let mut x = constraint.project(x_i);
    let mut v = x.clone();
    let mut best = x.clone();
    let mut best_r = f64::INFINITY;
    for it in 1..=spec.inner_max_iters {
        let (next, _) = mapping(&v);
        v = &next + (&next - &x) * momentum;
        x = next;
        let (_, r) = mapping(&x);
        if r < best_r {
            best_r = r;
            best = x.clone();
        }
        if r <= tol * scale {
            return Ok((x, it, r));
        }
    }
    Err(Error::Subproblem {
        agent: None,
        residual: best_r,
        iterations: spec.inner_max_iters,
        best: best.iter().copied().collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{make_example1_problem, QuadraticLoss};
    use approx::assert_abs_diff_eq;

    fn scalar(h: f64) -> SmoothLoss {
        SmoothLoss::Quadratic(QuadraticLoss::new(DMatrix::from_element(1, 1, h), DVector::zeros(1), 0.0).unwrap())
    }

    fn one(v: f64) -> DVector<f64> {
        DVector::from_element(1, v)
    }

    fn problem_1d(h: f64) -> CompositeProblem {
        CompositeProblem::new(vec![scalar(h)], NonsmoothTerm::Zero, ConstraintSet::AllSpace).unwrap()
    }

    #[test]
    fn linearization_gradient_step() {
        let p = make_example1_problem(1.0, 2.0, 3, 3).unwrap();
        let spec = surrogate_constants(&SurrogateKind::linearization(), &p).unwrap();
        let x = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let y = p.f_gradient(&x);
        let r = solve_subproblem(&spec, &p.losses()[0], p.g(), p.constraint(), &x, &y, 1e-12).unwrap();
        assert_abs_diff_eq!(r.x_hat, &x - &y / p.l(), epsilon = 1e-14);
    }

    #[test]
    fn linearization_soft_threshold() {
        let p = problem_1d(1.0);
        let spec = surrogate_constants(&SurrogateKind::Linearization { tau: Some(1.0) }, &p).unwrap();
        let r = solve_subproblem(&spec, &scalar(1.0), &NonsmoothTerm::L1 { weight: 0.5 }, &ConstraintSet::AllSpace, &one(0.0), &one(-2.0), 1e-12).unwrap();
        assert_abs_diff_eq!(r.x_hat[0], 1.5, epsilon = 1e-15);
    }

    #[test]
    fn local_f_hand_solve() {
        // f = x^2 so H = 2; (2 + 1) x = 2 + 1 - 2
        let p = problem_1d(2.0).with_beta(crate::problem::BetaEstimate { value: 1.0, lower_bound: false });
        let spec = surrogate_constants(&SurrogateKind::local_f(), &p).unwrap();
        assert_eq!(spec.tau, 1.0);
        let r = solve_subproblem(&spec, &scalar(2.0), &NonsmoothTerm::Zero, &ConstraintSet::AllSpace, &one(1.0), &one(2.0), 1e-12).unwrap();
        assert_abs_diff_eq!(r.x_hat[0], 1.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn constants_tables() {
        let flat = problem_1d(3.0);
        let lin = surrogate_constants(&SurrogateKind::linearization(), &flat).unwrap();
        assert_eq!((lin.mu_tilde, lin.l_tilde, lin.d_ell, lin.d_mx()), (3.0, 3.0, 0.0, 0.0));
        let lf = surrogate_constants(&SurrogateKind::local_f(), &flat).unwrap();
        assert_eq!((lf.mu_tilde, lf.d_mx()), (3.0, 0.0));

        let p = problem_1d(1.0).with_beta(crate::problem::BetaEstimate { value: 2.0, lower_bound: false });
        let lf = surrogate_constants(&SurrogateKind::local_f(), &p).unwrap();
        assert_eq!((lf.mu_tilde, lf.d_ell, lf.d_mx()), (2.0, 0.0, 4.0));
    }

    #[test]
    fn local_f_without_beta_is_capability_error() {
        let mut rng = crate::seed::stream(0, crate::seed::PROBLEM, 0);
        use rand::Rng;
        let a = DMatrix::from_fn(10, 2, |_, _| rng.gen_range(-1.0..1.0));
        let y = DVector::from_fn(10, |i, _| if i % 2 == 0 { 1.0 } else { -1.0 });
        let loss = SmoothLoss::Logistic(crate::problem::LogisticLoss::new(a, y, 0.1).unwrap());
        let p = CompositeProblem::new(vec![loss], NonsmoothTerm::Zero, ConstraintSet::AllSpace).unwrap();
        assert!(matches!(surrogate_constants(&SurrogateKind::local_f(), &p), Err(Error::Capability(_))));
    }

    #[test]
    fn iterative_matches_exact() {
        let p = make_example1_problem(1.0, 0.7, 3, 4).unwrap();
        let spec = surrogate_constants(&SurrogateKind::local_f(), &p).unwrap();
        let x = DVector::from_vec(vec![0.3, -1.0, 2.0, 0.1]);
        let y = DVector::from_vec(vec![1.0, 0.5, -0.2, 0.3]);
        let loss = &p.losses()[1];
        let exact = solve_subproblem(&spec, loss, &NonsmoothTerm::Zero, &ConstraintSet::AllSpace, &x, &y, 1e-10).unwrap();
        let (lo, hi) = inner_bounds(&spec, loss);
        let (it, _, _) = fista(&spec, loss, &NonsmoothTerm::Zero, &ConstraintSet::AllSpace, &x, &y, lo, hi, 1e-10).unwrap();
        assert_abs_diff_eq!(exact.x_hat, it, epsilon = 1e-8);
    }

    #[test]
    fn custom_rejects_overstated_mu() {
        let p = problem_1d(1.0);
        let kind = SurrogateKind::Custom {
            matrix: vec![vec![2.0]],
            mu_tilde: 3.0,
            l_tilde: 3.0,
            d_ell: 0.0,
            d_u: 1.0,
        };
        assert!(surrogate_constants(&kind, &p).unwrap_err().is_config());
    }

    #[test]
    fn custom_quadratic_model_solves() {
        let p = problem_1d(1.0);
        let kind = SurrogateKind::Custom {
            matrix: vec![vec![4.0]],
            mu_tilde: 4.0,
            l_tilde: 4.0,
            d_ell: 3.0,
            d_u: 3.0,
        };
        let spec = surrogate_constants(&kind, &p).unwrap();
        let r = solve_subproblem(&spec, &scalar(1.0), &NonsmoothTerm::Zero, &ConstraintSet::AllSpace, &one(1.0), &one(2.0), 1e-12).unwrap();
        assert_abs_diff_eq!(r.x_hat[0], 0.5, epsilon = 1e-15);
        let r = solve_subproblem(&spec, &scalar(1.0), &NonsmoothTerm::Zero, &ConstraintSet::Box { lo: 0.8, hi: 2.0 }, &one(1.0), &one(2.0), 1e-12).unwrap();
        assert_abs_diff_eq!(r.x_hat[0], 0.8, epsilon = 1e-12);
    }

    #[test]
    fn inner_cap_reports_best_iterate() {
        let p = make_example1_problem(1.0, 5.0, 2, 2).unwrap();
        let mut spec = surrogate_constants(&SurrogateKind::local_f(), &p).unwrap();
        spec.inner_max_iters = 2;
        let x = DVector::from_vec(vec![3.0, -3.0]);
        let y = DVector::from_vec(vec![1.0, 1.0]);
        let err = solve_subproblem(&spec, &p.losses()[0], &NonsmoothTerm::L1 { weight: 0.1 }, &ConstraintSet::AllSpace, &x, &y, 1e-14)
            .unwrap_err();
        match err {
            Error::Subproblem { iterations, best, .. } => {
                assert_eq!(iterations, 2);
                assert_eq!(best.len(), 2);
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
