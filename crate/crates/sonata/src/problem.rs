//! Composite objectives `U(x) = F(x) + G(x)` over a closed convex set `K`,
//! with `F = (1/m) sum_i f_i`.

use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::seed;

/// `f(x) = 1/2 x^T H x - q^T x + c`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticLoss {
    h: DMatrix<f64>,
    q: DVector<f64>,
    c: f64,
    mu: f64,
    l: f64,
}

impl QuadraticLoss {
    pub fn new(h: DMatrix<f64>, q: DVector<f64>, c: f64) -> Result<Self> {
        let d = h.nrows();
        if h.ncols() != d || q.len() != d {
            return Err(Error::Problem("hessian and linear term disagree on dimension".into()));
        }
        let asym = (&h - h.transpose()).amax();
        if asym > 1e-10 * (1.0 + h.amax()) {
            return Err(Error::Problem(format!("hessian is not symmetric (defect {asym:.2e})")));
        }
        let h = (&h + h.transpose()) * 0.5;
        let (mu, l) = extreme_eigenvalues(&h);
        Ok(Self { h, q, c, mu, l })
    }

    pub fn hessian(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn linear(&self) -> &DVector<f64> {
        &self.q
    }

    pub fn constant(&self) -> f64 {
        self.c
    }
}

/// `f(x) = (1/n) sum_j log(1 + exp(-y_j a_j^T x)) + (lambda/2) ||x||^2`.
#[derive(Clone, Debug, PartialEq)]
pub struct LogisticLoss {
    features: DMatrix<f64>,
    labels: DVector<f64>,
    lambda: f64,
    l: f64,
}

impl LogisticLoss {
    pub fn new(features: DMatrix<f64>, labels: DVector<f64>, lambda: f64) -> Result<Self> {
        if features.nrows() != labels.len() || features.nrows() == 0 {
            return Err(Error::Problem("feature rows and labels disagree".into()));
        }
        if labels.iter().any(|&y| y != 1.0 && y != -1.0) {
            return Err(Error::Problem("labels must be +1 or -1".into()));
        }
        if lambda < 0.0 {
            return Err(Error::Problem("lambda must be nonnegative".into()));
        }
        let n = features.nrows() as f64;
        let gram = features.transpose() * &features;
        let (_, top) = extreme_eigenvalues(&gram);
        let l = lambda + top / (4.0 * n);
        Ok(Self {
            features,
            labels,
            lambda,
            l,
        })
    }

    fn margins(&self, x: &DVector<f64>) -> DVector<f64> {
        (&self.features * x).component_mul(&self.labels)
    }
}

fn log1p_exp(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// A smooth local loss `f_i`.
#[derive(Clone, Debug, PartialEq)]
pub enum SmoothLoss {
    Quadratic(QuadraticLoss),
    Logistic(LogisticLoss),
}

impl SmoothLoss {
    pub fn dim(&self) -> usize {
        match self {
            SmoothLoss::Quadratic(q) => q.q.len(),
            SmoothLoss::Logistic(g) => g.features.ncols(),
        }
    }

    pub fn value(&self, x: &DVector<f64>) -> f64 {
        match self {
            SmoothLoss::Quadratic(q) => 0.5 * x.dot(&(&q.h * x)) - q.q.dot(x) + q.c,
            SmoothLoss::Logistic(g) => {
                let n = g.features.nrows() as f64;
                let loss: f64 = g.margins(x).iter().map(|&t| log1p_exp(-t)).sum();
                loss / n + 0.5 * g.lambda * x.norm_squared()
            }
        }
    }

    pub fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            SmoothLoss::Quadratic(q) => &q.h * x - &q.q,
            SmoothLoss::Logistic(g) => {
                let n = g.features.nrows() as f64;
                let w = g
                    .margins(x)
                    .zip_map(&g.labels, |t, y| -y * sigmoid(-t) / n);
                g.features.transpose() * w + x * g.lambda
            }
        }
    }

    pub fn hessian(&self, x: &DVector<f64>) -> Option<DMatrix<f64>> {
        match self {
            SmoothLoss::Quadratic(q) => Some(q.h.clone()),
            SmoothLoss::Logistic(g) => {
                let n = g.features.nrows() as f64;
                let s = g.margins(x).map(|t| {
                    let p = sigmoid(t);
                    p * (1.0 - p) / n
                });
                let mut scaled = g.features.clone();
                for (mut row, w) in scaled.row_iter_mut().zip(s.iter()) {
                    row *= *w;
                }
                let d = g.features.ncols();
                Some(g.features.transpose() * scaled + DMatrix::identity(d, d) * g.lambda)
            }
        }
    }

    /// `(mu_i, L_i)` with `mu_i I <= hess f_i <= L_i I` on the whole space.
    pub fn hessian_bounds(&self) -> (f64, f64) {
        match self {
            SmoothLoss::Quadratic(q) => (q.mu, q.l),
            SmoothLoss::Logistic(g) => (g.lambda, g.l),
        }
    }

    pub fn as_quadratic(&self) -> Option<&QuadraticLoss> {
        match self {
            SmoothLoss::Quadratic(q) => Some(q),
            _ => None,
        }
    }
}

/// The nonsmooth convex term `G`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NonsmoothTerm {
    Zero,
    L1 { weight: f64 },
    IndicatorBall { radius: f64 },
}

impl NonsmoothTerm {
    pub fn value(&self, x: &DVector<f64>) -> f64 {
        match *self {
            NonsmoothTerm::Zero => 0.0,
            NonsmoothTerm::L1 { weight } => weight * x.lp_norm(1),
            NonsmoothTerm::IndicatorBall { radius } => {
                if x.norm() <= radius * (1.0 + 1e-12) {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, NonsmoothTerm::Zero) || matches!(self, NonsmoothTerm::L1 { weight } if *weight == 0.0)
    }

    pub fn prox(&self, x: &DVector<f64>, t: f64) -> DVector<f64> {
        prox_g(self, x, t)
    }
}

/// `argmin_u g(u) + ||u - x||^2 / (2t)`.
pub fn prox_g(g: &NonsmoothTerm, x: &DVector<f64>, t: f64) -> DVector<f64> {
    match *g {
        NonsmoothTerm::Zero => x.clone(),
        NonsmoothTerm::L1 { weight } => {
            let k = weight * t.max(0.0);
            x.map(|v| v.signum() * (v.abs() - k).max(0.0))
        }
        NonsmoothTerm::IndicatorBall { radius } => project_ball(x, radius),
    }
}

fn project_ball(x: &DVector<f64>, radius: f64) -> DVector<f64> {
    let n = x.norm();
    if n <= radius {
        x.clone()
    } else {
        x * (radius / n)
    }
}

/// The constraint set `K`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConstraintSet {
    AllSpace,
    Ball { radius: f64 },
    Box { lo: f64, hi: f64 },
}

impl ConstraintSet {
    pub fn project(&self, x: &DVector<f64>) -> DVector<f64> {
        match *self {
            ConstraintSet::AllSpace => x.clone(),
            ConstraintSet::Ball { radius } => project_ball(x, radius),
            ConstraintSet::Box { lo, hi } => x.map(|v| v.clamp(lo, hi)),
        }
    }

    pub fn contains(&self, x: &DVector<f64>) -> bool {
        match *self {
            ConstraintSet::AllSpace => x.iter().all(|v| v.is_finite()),
            ConstraintSet::Ball { radius } => x.norm() <= radius * (1.0 + 1e-12),
            ConstraintSet::Box { lo, hi } => x.iter().all(|&v| v >= lo && v <= hi),
        }
    }

    pub fn is_all_space(&self) -> bool {
        matches!(self, ConstraintSet::AllSpace)
    }
}

/// `argmin_{u in K} g(u) + ||u - x||^2 / (2t)`.
///
/// Exact for every supported pair: the prox of the l1 term commutes with
/// box clipping coordinate-wise and with radial scaling onto a centred
/// ball; two centred balls intersect in the smaller one; a ball inside a box
/// is handled with Dykstra's alternating projections.
pub fn prox_composite(g: &NonsmoothTerm, k: &ConstraintSet, x: &DVector<f64>, t: f64) -> DVector<f64> {
    match (g, k) {
        (NonsmoothTerm::IndicatorBall { radius }, ConstraintSet::Ball { radius: r2 }) => {
            project_ball(x, radius.min(*r2))
        }
        (NonsmoothTerm::IndicatorBall { radius }, ConstraintSet::Box { .. }) => dykstra(x, *radius, k),
        _ => k.project(&prox_g(g, x, t)),
    }
}

fn dykstra(x: &DVector<f64>, radius: f64, k: &ConstraintSet) -> DVector<f64> {
    let mut u = x.clone();
    let mut p = DVector::zeros(x.len());
    let mut q = DVector::zeros(x.len());
    for _ in 0..10_000 {
        let y = k.project(&(&u + &p));
        p = &u + &p - &y;
        let next = project_ball(&(&y + &q), radius);
        q = &y + &q - &next;
        let done = (&next - &u).norm() <= 1e-15 * (1.0 + u.norm());
        u = next;
        if done {
            break;
        }
    }
    k.project(&u)
}

/// Smallest and largest eigenvalue of a symmetric matrix.
pub fn extreme_eigenvalues(h: &DMatrix<f64>) -> (f64, f64) {
    let eig = SymmetricEigen::new(h.clone());
    (eig.eigenvalues.min(), eig.eigenvalues.max())
}

/// Spectral norm of a symmetric matrix.
pub fn symmetric_norm(h: &DMatrix<f64>) -> f64 {
    let (lo, hi) = extreme_eigenvalues(h);
    lo.abs().max(hi.abs())
}

/// Similarity constant, with a flag when it is only a sampled lower bound.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaEstimate {
    pub value: f64,
    pub lower_bound: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompositeProblem {
    losses: Vec<SmoothLoss>,
    g: NonsmoothTerm,
    constraint: ConstraintSet,
    mu: f64,
    l: f64,
    beta: Option<BetaEstimate>,
    mu_i: Vec<f64>,
    l_i: Vec<f64>,
}

impl CompositeProblem {
    /// Builds the problem and computes `mu`, `L` and, for quadratic losses,
    /// the exact `beta`. For other losses `mu`/`L` are the averaged local
    /// bounds and `beta` must be supplied or estimated.
    pub fn new(losses: Vec<SmoothLoss>, g: NonsmoothTerm, constraint: ConstraintSet) -> Result<Self> {
        let d = losses
            .first()
            .map(|f| f.dim())
            .ok_or_else(|| Error::Problem("at least one local loss required".into()))?;
        if losses.iter().any(|f| f.dim() != d) {
            return Err(Error::Problem("local losses disagree on dimension".into()));
        }
        let (mu_i, l_i): (Vec<f64>, Vec<f64>) = losses.iter().map(|f| f.hessian_bounds()).unzip();
        let m = losses.len() as f64;
        let quadratic: Option<Vec<&QuadraticLoss>> = losses.iter().map(|f| f.as_quadratic()).collect();
        let (mu, l, beta) = match quadratic {
            Some(qs) => {
                let avg = average_hessian(qs.iter().map(|q| &q.h), d);
                let (mu, l) = extreme_eigenvalues(&avg);
                let beta = qs
                    .iter()
                    .map(|q| symmetric_norm(&(&avg - &q.h)))
                    .fold(0.0, f64::max);
                (
                    mu,
                    l,
                    Some(BetaEstimate {
                        value: beta,
                        lower_bound: false,
                    }),
                )
            }
            None => (mu_i.iter().sum::<f64>() / m, l_i.iter().sum::<f64>() / m, None),
        };
        if !(mu > 0.0) {
            return Err(Error::Problem(format!(
                "average loss is not strongly convex (mu = {mu:.3e})"
            )));
        }
        Ok(Self {
            losses,
            g,
            constraint,
            mu,
            l,
            beta,
            mu_i,
            l_i,
        })
    }

    pub fn with_beta(mut self, beta: BetaEstimate) -> Self {
        self.beta = Some(beta);
        self
    }

    pub fn losses(&self) -> &[SmoothLoss] {
        &self.losses
    }

    pub fn g(&self) -> &NonsmoothTerm {
        &self.g
    }

    pub fn constraint(&self) -> &ConstraintSet {
        &self.constraint
    }

    pub fn m(&self) -> usize {
        self.losses.len()
    }

    pub fn d(&self) -> usize {
        self.losses[0].dim()
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn l(&self) -> f64 {
        self.l
    }

    pub fn beta(&self) -> Option<f64> {
        self.beta.map(|b| b.value)
    }

    pub fn beta_estimate(&self) -> Option<BetaEstimate> {
        self.beta
    }

    pub fn mu_i(&self) -> &[f64] {
        &self.mu_i
    }

    pub fn l_i(&self) -> &[f64] {
        &self.l_i
    }

    pub fn l_mx(&self) -> f64 {
        self.l_i.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mu_mn(&self) -> f64 {
        self.mu_i.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn mu_mx(&self) -> f64 {
        self.mu_i.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn kappa_g(&self) -> f64 {
        self.l / self.mu
    }

    pub fn kappa_l(&self) -> f64 {
        let mn = self.mu_mn();
        if mn <= 0.0 {
            f64::INFINITY
        } else {
            self.l_mx() / mn
        }
    }

    pub fn kappa_hat(&self) -> f64 {
        self.l_mx() / (self.mu_i.iter().sum::<f64>() / self.m() as f64)
    }

    pub fn kappa_breve(&self) -> f64 {
        self.l_mx() / self.mu
    }

    pub fn kappa_bar(&self) -> f64 {
        self.l_mx() / self.mu_mx()
    }

    pub fn is_quadratic(&self) -> bool {
        self.losses.iter().all(|f| f.as_quadratic().is_some())
    }

    /// True when `F` is quadratic, `G = 0` and `K` is the whole space.
    pub fn is_unconstrained_quadratic(&self) -> bool {
        self.is_quadratic() && self.g.is_zero() && self.constraint.is_all_space()
    }

    pub fn f_value(&self, x: &DVector<f64>) -> f64 {
        self.losses.iter().map(|f| f.value(x)).sum::<f64>() / self.m() as f64
    }

    pub fn f_gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut g = DVector::zeros(self.d());
        for f in &self.losses {
            g += f.gradient(x);
        }
        g / self.m() as f64
    }

    /// `U = F + G`, infinite outside `K`.
    pub fn u_value(&self, x: &DVector<f64>) -> f64 {
        if !self.constraint.contains(x) {
            return f64::INFINITY;
        }
        self.f_value(x) + self.g.value(x)
    }

    pub fn average_hessian(&self) -> Option<DMatrix<f64>> {
        let qs: Option<Vec<&QuadraticLoss>> = self.losses.iter().map(|f| f.as_quadratic()).collect();
        qs.map(|qs| average_hessian(qs.iter().map(|q| &q.h), self.d()))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ProblemFile::from_problem(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ProblemFile = serde_json::from_str(text)?;
        file.into_problem()
    }
}

fn average_hessian<'a, I>(hs: I, d: usize) -> DMatrix<f64>
where
    I: Iterator<Item = &'a DMatrix<f64>>,
{
    let mut sum = DMatrix::zeros(d, d);
    let mut k = 0usize;
    for h in hs {
        sum += h;
        k += 1;
    }
    sum / k as f64
}

/// Per-agent ridge data reduced to sufficient statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct RidgeData {
    pub n: usize,
    pub d: usize,
    /// `A_i^T A_i` per agent.
    pub gram: Vec<DMatrix<f64>>,
    /// `A_i^T b_i` per agent.
    pub atb: Vec<DVector<f64>>,
    /// `||b_i||^2` per agent.
    pub btb: Vec<f64>,
    /// SHA-256 of each agent's raw `(A_i, b_i)` stream.
    pub hashes: Vec<String>,
    pub x_true: DVector<f64>,
}

impl RidgeData {
    pub fn m(&self) -> usize {
        self.gram.len()
    }

    /// Seeded synthetic data: rows of `A_i` follow `N(0, Sigma)` with
    /// `Sigma = U diag(lambda_j) U^T`, `lambda_j` evenly spaced over `[mu0, L0]`, `U` the `Q`
    /// factor of a Gaussian matrix; `b_i = A_i x_true + noise`,
    /// `x_true ~ N(5 * 1, I)`, noise variance `0.1`.
    ///
    /// `Sigma` and `x_true` depend only on `(seed, d, mu0, L0)`, and each
    /// agent's rows are drawn sequentially, so a smaller `n` yields a prefix
    /// of the rows of a larger `n`.
    pub fn generate(m: usize, n: usize, d: usize, mu0: f64, l0: f64, seed_value: u64) -> Result<Self> {
        if m == 0 || n == 0 || d == 0 {
            return Err(Error::Problem("sizes must be positive".into()));
        }
        if !(mu0 > 0.0 && mu0 <= l0) {
            return Err(Error::Problem(format!("need 0 < mu0 <= L0, got ({mu0}, {l0})")));
        }
        let mut rng = seed::stream(seed_value, seed::PROBLEM, 0);
        let lambdas: Vec<f64> = (0..d)
            .map(|j| if d == 1 { mu0 } else { mu0 + (l0 - mu0) * j as f64 / (d - 1) as f64 })
            .collect();
        let gauss: DMatrix<f64> = DMatrix::from_fn(d, d, |_, _| StandardNormal.sample(&mut rng));
        let u = gauss.qr().q();
        let root: DMatrix<f64> = &u * DMatrix::from_diagonal(&DVector::from_iterator(d, lambdas.iter().map(|l| l.sqrt())));
        let x_true: DVector<f64> = DVector::from_fn(d, |_, _| { let s: f64 = StandardNormal.sample(&mut rng); 5.0 + s });
        let noise_sd = 0.1f64.sqrt();

        let mut gram = Vec::with_capacity(m);
        let mut atb = Vec::with_capacity(m);
        let mut btb = Vec::with_capacity(m);
        let mut hashes = Vec::with_capacity(m);
        const BLOCK: usize = 512;
        for i in 0..m {
            let mut r = seed::stream(seed_value, seed::PROBLEM, 1 + i as u64);
            let mut g = DMatrix::zeros(d, d);
            let mut v = DVector::zeros(d);
            let mut bb = 0.0;
            let mut hasher = Sha256::new();
            let mut done = 0;
            while done < n {
                let rows = BLOCK.min(n - done);
                let z: DMatrix<f64> = DMatrix::from_fn(rows, d, |_, _| StandardNormal.sample(&mut r));
                let a = z * root.transpose();
                let noise = DVector::from_fn(rows, |_, _| { let s: f64 = StandardNormal.sample(&mut r); noise_sd * s });
                let b = &a * &x_true + noise;
                for k in 0..rows {
                    for j in 0..d {
                        hasher.update(a[(k, j)].to_le_bytes());
                    }
                    hasher.update(b[k].to_le_bytes());
                }
                g.gemm_tr(1.0, &a, &a, 1.0);
                v.gemv_tr(1.0, &a, &b, 1.0);
                bb += b.norm_squared();
                done += rows;
            }
            gram.push(g);
            atb.push(v);
            btb.push(bb);
            hashes.push(format!("{:x}", hasher.finalize()));
        }
        Ok(Self {
            n,
            d,
            gram,
            atb,
            btb,
            hashes,
            x_true,
        })
    }

    /// Data supplied explicitly as `(A_i, b_i)` pairs with equal sample counts.
    pub fn from_datasets(datasets: &[(DMatrix<f64>, DVector<f64>)]) -> Result<Self> {
        let (a0, _) = datasets
            .first()
            .ok_or_else(|| Error::Problem("no agent datasets supplied".into()))?;
        let (n, d) = a0.shape();
        let mut out = Self {
            n,
            d,
            gram: vec![],
            atb: vec![],
            btb: vec![],
            hashes: vec![],
            x_true: DVector::zeros(d),
        };
        for (a, b) in datasets {
            if a.shape() != (n, d) || b.len() != n {
                return Err(Error::Problem("agent datasets must share (n, d)".into()));
            }
            let mut hasher = Sha256::new();
            for k in 0..n {
                for j in 0..d {
                    hasher.update(a[(k, j)].to_le_bytes());
                }
                hasher.update(b[k].to_le_bytes());
            }
            out.gram.push(a.transpose() * a);
            out.atb.push(a.transpose() * b);
            out.btb.push(b.norm_squared());
            out.hashes.push(format!("{:x}", hasher.finalize()));
        }
        Ok(out)
    }

    /// `f_i(x) = (1/2n)||A_i x - b_i||^2 + lambda ||x||^2`.
    pub fn problem(&self, lambda: f64) -> Result<CompositeProblem> {
        if lambda < 0.0 {
            return Err(Error::Problem("lambda must be nonnegative".into()));
        }
        let n = self.n as f64;
        let d = self.d;
        let losses = (0..self.m())
            .map(|i| {
                let h = &self.gram[i] / n + DMatrix::identity(d, d) * (2.0 * lambda);
                let q = &self.atb[i] / n;
                QuadraticLoss::new(h, q, self.btb[i] / (2.0 * n)).map(SmoothLoss::Quadratic)
            })
            .collect::<Result<Vec<_>>>()?;
        let avg = average_hessian(losses.iter().filter_map(|f| f.as_quadratic()).map(|q| &q.h), d);
        let (lo, hi) = extreme_eigenvalues(&avg);
        if lo <= 1e-12 * hi.max(1.0) {
            return Err(Error::Problem(format!(
                "average hessian is singular (lambda_min = {lo:.3e}); need lambda > 0 or n*m >= d"
            )));
        }
        CompositeProblem::new(losses, NonsmoothTerm::Zero, ConstraintSet::AllSpace)
    }

    /// Eigenvalue range `(s_min, s_max)` of the average data Gram `(1/nm) sum A_i^T A_i`.
    pub fn data_spectrum(&self) -> (f64, f64) {
        let avg = average_hessian(self.gram.iter(), self.d) / self.n as f64;
        extreme_eigenvalues(&avg)
    }

    /// Regularisation giving `kappa_g = target`: `2 lambda = (s_max - target s_min)/(target - 1)`.
    pub fn lambda_for_kappa(&self, target: f64) -> Result<f64> {
        let (lo, hi) = self.data_spectrum();
        if target <= 1.0 || target > hi / lo {
            return Err(Error::Config(format!(
                "kappa_g = {target} not reachable; data supports (1, {:.3}]",
                hi / lo
            )));
        }
        Ok((hi - target * lo) / (target - 1.0) / 2.0)
    }
}

pub fn make_ridge_problem(
    m: usize,
    n: usize,
    d: usize,
    lambda: f64,
    mu0: f64,
    l0: f64,
    seed_value: u64,
) -> Result<CompositeProblem> {
    RidgeData::generate(m, n, d, mu0, l0, seed_value)?.problem(lambda)
}

/// `f_i(x) = 1/2 x^T (a I + m b diag(e_i)) x`; the first `m` coordinates
/// each receive one agent's extra curvature.
pub fn make_example1_problem(a: f64, b: f64, m: usize, d: usize) -> Result<CompositeProblem> {
    if !(a > 0.0 && b >= 0.0) || d < m || m == 0 {
        return Err(Error::Problem("need a > 0, b >= 0, d >= m >= 1".into()));
    }
    let losses = (0..m)
        .map(|i| {
            let mut h = DMatrix::identity(d, d) * a;
            h[(i, i)] += m as f64 * b;
            QuadraticLoss::new(h, DVector::zeros(d), 0.0).map(SmoothLoss::Quadratic)
        })
        .collect::<Result<Vec<_>>>()?;
    CompositeProblem::new(losses, NonsmoothTerm::Zero, ConstraintSet::AllSpace)
}

/// Similarity constant `beta`: exact for quadratics, otherwise the largest
/// Hessian deviation over `sample_points` seeded points of `K`.
pub fn estimate_beta(problem: &CompositeProblem, sample_points: usize, seed_value: u64) -> Result<BetaEstimate> {
    if let Some(avg) = problem.average_hessian() {
        let beta = problem
            .losses()
            .iter()
            .filter_map(|f| f.as_quadratic())
            .map(|q| symmetric_norm(&(&avg - &q.h)))
            .fold(0.0, f64::max);
        return Ok(BetaEstimate {
            value: beta,
            lower_bound: false,
        });
    }
    if sample_points == 0 {
        return Err(Error::Capability(
            "hessians are not constant and sampling is disabled".into(),
        ));
    }
    let d = problem.d();
    let mut rng = seed::stream(seed_value, seed::SAMPLING, 0);
    let mut best: f64 = 0.0;
    for _ in 0..sample_points {
        let raw = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal) * 3.0);
        let x = problem.constraint().project(&raw);
        let hs = problem
            .losses()
            .iter()
            .map(|f| f.hessian(&x).ok_or_else(|| Error::Capability("loss exposes no hessian".into())))
            .collect::<Result<Vec<_>>>()?;
        let avg = average_hessian(hs.iter(), d);
        for h in &hs {
            best = best.max(symmetric_norm(&(&avg - h)));
        }
    }
    Ok(BetaEstimate {
        value: best,
        lower_bound: true,
    })
}

/// Minimiser and optimal value of `U`.
pub fn centralized_solution(problem: &CompositeProblem, tol: f64) -> Result<(DVector<f64>, f64)> {
    if problem.is_unconstrained_quadratic() {
        let d = problem.d();
        let mut h = DMatrix::zeros(d, d);
        let mut q = DVector::zeros(d);
        for f in problem.losses() {
            let qf = f.as_quadratic().expect("quadratic");
            h += &qf.h;
            q += &qf.q;
        }
        let m = problem.m() as f64;
        h /= m;
        q /= m;
        let x = h
            .cholesky()
            .ok_or_else(|| Error::Problem("average hessian is not positive definite".into()))?
            .solve(&q);
        let u = problem.u_value(&x);
        return Ok((x, u));
    }
    let l = problem.l();
    let mu = problem.mu();
    let q = (mu / l).sqrt();
    let momentum = (1.0 - q) / (1.0 + q);
    let g = problem.g();
    let k = problem.constraint();
    let step = 1.0 / l;
    let mut x = prox_composite(g, k, &DVector::zeros(problem.d()), step);
    let mut v = x.clone();
    const CAP: usize = 1_000_000;
    let mut residual = f64::INFINITY;
    for it in 0..CAP {
        let next = prox_composite(g, k, &(&v - problem.f_gradient(&v) * step), step);
        v = &next + (&next - &x) * momentum;
        x = next;
        if it % 10 == 0 {
            let mapped = prox_composite(g, k, &(&x - problem.f_gradient(&x) * step), step);
            residual = (&x - mapped).norm() * l;
            if residual <= tol {
                let u = problem.u_value(&x);
                return Ok((x, u));
            }
        }
    }
    Err(Error::Oracle {
        residual,
        iterations: CAP,
    })
}

/// Reads one agent's dataset: each row holds `a_1, ..., a_d, b`.
pub fn load_agent_csv(path: &Path) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|s| s.trim().parse::<f64>().map_err(|e| Error::Config(format!("{}: {e}", path.display()))))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    let width = rows.first().map(|r| r.len()).unwrap_or(0);
    if width < 2 || rows.iter().any(|r| r.len() != width) {
        return Err(Error::Config(format!("{}: ragged or empty dataset", path.display())));
    }
    let n = rows.len();
    let a = DMatrix::from_fn(n, width - 1, |i, j| rows[i][j]);
    let b = DVector::from_fn(n, |i, _| rows[i][width - 1]);
    Ok((a, b))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum AgentFile {
    Quadratic {
        hessian: Vec<Vec<f64>>,
        linear: Vec<f64>,
        constant: f64,
    },
    Logistic {
        features: Vec<Vec<f64>>,
        labels: Vec<f64>,
        lambda: f64,
    },
}

/// JSON interchange form; matrices are row-major.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct ProblemFile {
    schema_version: u32,
    g: NonsmoothTerm,
    constraint: ConstraintSet,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    beta: Option<BetaEstimate>,
    agents: Vec<AgentFile>,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = rows.len();
    let w = rows.first().map(|r| r.len()).unwrap_or(0);
    if rows.iter().any(|r| r.len() != w) {
        return Err(Error::Config("ragged matrix rows".into()));
    }
    Ok(DMatrix::from_fn(n, w, |i, j| rows[i][j]))
}

impl ProblemFile {
    fn from_problem(p: &CompositeProblem) -> Self {
        let agents = p
            .losses
            .iter()
            .map(|f| match f {
                SmoothLoss::Quadratic(q) => AgentFile::Quadratic {
                    hessian: rows(&q.h),
                    linear: q.q.iter().copied().collect(),
                    constant: q.c,
                },
                SmoothLoss::Logistic(g) => AgentFile::Logistic {
                    features: rows(&g.features),
                    labels: g.labels.iter().copied().collect(),
                    lambda: g.lambda,
                },
            })
            .collect();
        let beta = p.beta.filter(|b| b.lower_bound);
        Self {
            schema_version: 1,
            g: p.g,
            constraint: p.constraint,
            beta,
            agents,
        }
    }

    fn into_problem(self) -> Result<CompositeProblem> {
        let losses = self
            .agents
            .into_iter()
            .map(|a| match a {
                AgentFile::Quadratic {
                    hessian,
                    linear,
                    constant,
                } => QuadraticLoss::new(from_rows(&hessian)?, DVector::from_vec(linear), constant).map(SmoothLoss::Quadratic),
                AgentFile::Logistic {
                    features,
                    labels,
                    lambda,
                } => LogisticLoss::new(from_rows(&features)?, DVector::from_vec(labels), lambda).map(SmoothLoss::Logistic),
            })
            .collect::<Result<Vec<_>>>()?;
        let p = CompositeProblem::new(losses, self.g, self.constraint)?;
        Ok(match self.beta {
            Some(b) if p.beta.is_none() => p.with_beta(b),
            _ => p,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn scalar_quadratic(h: f64, q: f64) -> SmoothLoss {
        SmoothLoss::Quadratic(QuadraticLoss::new(DMatrix::from_element(1, 1, h), DVector::from_element(1, q), 0.0).unwrap())
    }

    #[test]
    fn single_scalar_ridge() {
        // A = sqrt(2), b = 0, n = 1: f(x) = x^2
        let a = DMatrix::from_element(1, 1, 2f64.sqrt());
        let data = RidgeData::from_datasets(&[(a, DVector::zeros(1))]).unwrap();
        let p = data.problem(0.0).unwrap();
        assert_abs_diff_eq!(p.mu(), 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.l(), 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.kappa_g(), 1.0, epsilon = 1e-12);
        assert_eq!(p.beta(), Some(0.0));
        let (x, u) = centralized_solution(&p, 1e-12).unwrap();
        assert_abs_diff_eq!(x[0], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(u, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn example1_ratios() {
        let p = make_example1_problem(1.0, 1.0, 4, 4).unwrap();
        assert_abs_diff_eq!(p.kappa_l() / p.kappa_g(), 5.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.mu(), 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.l(), 2.0, epsilon = 1e-12);

        let p = make_example1_problem(1.0, 0.0, 3, 3).unwrap();
        assert_eq!(p.beta(), Some(0.0));
        assert_abs_diff_eq!(p.kappa_l(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.kappa_g(), 1.0, epsilon = 1e-12);

        let p = make_example1_problem(2.0, 3.0, 10, 10).unwrap();
        assert_abs_diff_eq!(p.kappa_breve() / p.kappa_g(), 6.4, epsilon = 1e-12);
    }

    #[test]
    fn example1_beta_matches_direct_norm() {
        // H_avg - H_1 = diag(1, 1) - diag(2, 0) = diag(-1, 1)
        let p = make_example1_problem(1.0, 1.0, 2, 2).unwrap();
        assert_abs_diff_eq!(p.beta().unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(estimate_beta(&p, 0, 0).unwrap().value, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn prox_closed_forms() {
        let x = DVector::from_element(1, 2.0);
        assert_abs_diff_eq!(prox_g(&NonsmoothTerm::L1 { weight: 0.5 }, &x, 1.0)[0], 1.5);
        assert_eq!(prox_g(&NonsmoothTerm::Zero, &x, 3.0), x);
        let v = DVector::from_vec(vec![3.0, 4.0]);
        let p = prox_g(&NonsmoothTerm::IndicatorBall { radius: 1.0 }, &v, 0.7);
        assert_abs_diff_eq!(p, DVector::from_vec(vec![0.6, 0.8]), epsilon = 1e-15);
        assert_eq!(prox_g(&NonsmoothTerm::L1 { weight: 0.5 }, &x, 0.0), x);
    }

    #[test]
    fn l1_oracle_soft_threshold() {
        // F = 1/2 (x - 3)^2, G = |x|: x* = 2
        let p = CompositeProblem::new(
            vec![SmoothLoss::Quadratic(
                QuadraticLoss::new(DMatrix::from_element(1, 1, 1.0), DVector::from_element(1, 3.0), 4.5).unwrap(),
            )],
            NonsmoothTerm::L1 { weight: 1.0 },
            ConstraintSet::AllSpace,
        )
        .unwrap();
        let (x, u) = centralized_solution(&p, 1e-12).unwrap();
        assert_abs_diff_eq!(x[0], 2.0, epsilon = 1e-10);
        assert_abs_diff_eq!(u, 0.5 + 2.0, epsilon = 1e-10);
    }

    #[test]
    fn ridge_constants_match_eigensolver() {
        let data = RidgeData::generate(5, 30, 6, 1.0, 20.0, 3).unwrap();
        let p = data.problem(0.1).unwrap();
        let avg = p.average_hessian().unwrap();
        let eig = SymmetricEigen::new(avg.clone()).eigenvalues;
        assert_abs_diff_eq!(p.mu(), eig.min(), epsilon = 1e-10);
        assert_abs_diff_eq!(p.l(), eig.max(), epsilon = 1e-10);
    }

    #[test]
    fn ridge_oracle_matches_normal_equations() {
        let m = 4;
        let n = 25;
        let d = 5;
        let lambda = 0.05;
        let data = RidgeData::generate(m, n, d, 1.0, 10.0, 9).unwrap();
        let p = data.problem(lambda).unwrap();
        let (x, _) = centralized_solution(&p, 1e-12).unwrap();
        let mut ata = DMatrix::zeros(d, d);
        let mut atb = DVector::zeros(d);
        for i in 0..m {
            ata += &data.gram[i];
            atb += &data.atb[i];
        }
        let lhs = ata / (n * m) as f64 + DMatrix::identity(d, d) * (2.0 * lambda);
        let rhs = atb / (n * m) as f64;
        let direct = lhs.lu().solve(&rhs).unwrap();
        assert_abs_diff_eq!(x, direct, epsilon = 1e-10);
    }

    #[test]
    fn ridge_is_deterministic_and_prefix_stable() {
        let a = RidgeData::generate(3, 40, 4, 1.0, 5.0, 11).unwrap();
        let b = RidgeData::generate(3, 40, 4, 1.0, 5.0, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.x_true, RidgeData::generate(3, 7, 4, 1.0, 5.0, 11).unwrap().x_true);
    }

    #[test]
    fn singular_average_hessian_rejected() {
        let err = make_ridge_problem(2, 3, 10, 0.0, 1.0, 5.0, 1).unwrap_err();
        assert!(matches!(err, Error::Problem(_)));
    }

    #[test]
    fn beta_shrinks_with_sample_size() {
        let small = make_ridge_problem(10, 10, 5, 0.0, 1.0, 10.0, 4).unwrap();
        let large = make_ridge_problem(10, 1000, 5, 0.0, 1.0, 10.0, 4).unwrap();
        assert!(large.beta().unwrap() < small.beta().unwrap());
    }

    #[test]
    fn lambda_for_kappa_hits_target() {
        let data = RidgeData::generate(5, 200, 8, 1.0, 100.0, 5).unwrap();
        for target in [3.0, 6.0, 12.0] {
            let p = data.problem(data.lambda_for_kappa(target).unwrap()).unwrap();
            assert_abs_diff_eq!(p.kappa_g(), target, epsilon = 1e-8);
        }
    }

    #[test]
    fn problem_json_round_trip() {
        let p = make_ridge_problem(3, 20, 4, 0.1, 1.0, 10.0, 2).unwrap();
        let q = CompositeProblem::from_json(&p.to_json().unwrap()).unwrap();
        assert_abs_diff_eq!(p.mu(), q.mu(), epsilon = 1e-12);
        let x = DVector::from_element(4, 0.3);
        assert_abs_diff_eq!(p.f_value(&x), q.f_value(&x), epsilon = 1e-12);
    }

    #[test]
    fn logistic_beta_is_flagged_lower_bound() {
        let mut rng = seed::stream(1, seed::PROBLEM, 0);
        let losses = (0..3)
            .map(|_| {
                let a = DMatrix::from_fn(20, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
                let y = DVector::from_fn(20, |_, _| if rng.gen::<bool>() { 1.0 } else { -1.0 });
                SmoothLoss::Logistic(LogisticLoss::new(a, y, 0.1).unwrap())
            })
            .collect();
        let p = CompositeProblem::new(losses, NonsmoothTerm::Zero, ConstraintSet::AllSpace).unwrap();
        assert!(p.beta().is_none());
        assert!(estimate_beta(&p, 0, 0).is_err());
        let b = estimate_beta(&p, 10, 0).unwrap();
        assert!(b.lower_bound && b.value > 0.0);
    }

    #[test]
    fn composite_prox_intersections() {
        let v = DVector::from_vec(vec![3.0, 4.0]);
        let p = prox_composite(&NonsmoothTerm::IndicatorBall { radius: 2.0 }, &ConstraintSet::Ball { radius: 1.0 }, &v, 1.0);
        assert_abs_diff_eq!(p.norm(), 1.0, epsilon = 1e-12);
        let b = ConstraintSet::Box { lo: -0.5, hi: 0.5 };
        let p = prox_composite(&NonsmoothTerm::IndicatorBall { radius: 0.6 }, &b, &v, 1.0);
        assert!(b.contains(&p) && p.norm() <= 0.6 + 1e-9);
        let _ = scalar_quadratic(1.0, 0.0);
    }
}
