//! Closed-form rate certificates, certified step sizes and complexity regimes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{chebyshev_contraction, TvConstants};
use crate::problem::CompositeProblem;
use crate::surrogate::{SurrogateKind, SurrogateSpec};

/// Numeric constants of the complexity corollaries.
pub mod constants {
    /// Case-I multiplier, linearization, static graphs.
    pub const LIN_GENERAL: f64 = 110.0;
    /// Case-I multiplier, local `f_i` with `beta <= mu`, static graphs.
    pub const LOCAL_F_SMALL_BETA: f64 = 193.0;
    /// Case-I multiplier, local `f_i` with `beta > mu`, static graphs.
    pub const LOCAL_F_LARGE_BETA: f64 = 253.0;
    /// Prefactor of `C_M`, linearization, time-varying digraphs.
    pub const TV_LIN: f64 = 608.0;
    /// Case-I multiplier, local `f_i` with `beta <= mu`, time-varying digraphs.
    pub const TV_LOCAL_F_SMALL_BETA: f64 = 1087.0;
    /// Case-I multiplier, local `f_i` with `beta > mu`, time-varying digraphs.
    pub const TV_LOCAL_F_LARGE_BETA: f64 = 1428.0;
    /// `alpha_max` below this is reported as a vacuous certificate.
    pub const VACUOUS_FLOOR: f64 = 1e-8;
    pub const CHEBYSHEV_CAP: usize = 200;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Linearization,
    LocalF,
    Custom,
}

impl From<&SurrogateKind> for Family {
    fn from(k: &SurrogateKind) -> Self {
        match k {
            SurrogateKind::Linearization { .. } => Family::Linearization,
            SurrogateKind::LocalF { .. } => Family::LocalF,
            SurrogateKind::Custom { .. } => Family::Custom,
        }
    }
}

/// Time-varying network constants, kept in log form where they overflow.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TvParams {
    pub m: usize,
    pub phi_lb: f64,
    pub phi_ub: f64,
    pub ln_c0: f64,
    pub rho_b: f64,
    pub one_minus_rho_b: f64,
}

impl From<&TvConstants> for TvParams {
    fn from(c: &TvConstants) -> Self {
        Self {
            m: c.m,
            phi_lb: c.phi_lb,
            phi_ub: c.phi_ub,
            ln_c0: c.ln_c0,
            rho_b: c.rho_b,
            one_minus_rho_b: c.one_minus_rho_b,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateInputs {
    pub mu: f64,
    pub l: f64,
    pub beta: f64,
    pub mu_tilde: f64,
    pub l_tilde: f64,
    pub d_ell: f64,
    pub d_mx: f64,
    pub l_mx: f64,
    pub rho: f64,
    pub family: Family,
    #[serde(default)]
    pub tv: Option<TvParams>,
}

impl RateInputs {
    pub fn kappa_g(&self) -> f64 {
        self.l / self.mu
    }

    pub fn from_spec(problem: &CompositeProblem, spec: &SurrogateSpec, rho: f64) -> Self {
        Self {
            mu: problem.mu(),
            l: problem.l(),
            beta: problem.beta().unwrap_or(0.0),
            mu_tilde: spec.mu_tilde,
            l_tilde: spec.l_tilde,
            d_ell: spec.d_ell,
            d_mx: spec.d_mx(),
            l_mx: spec.l_mx,
            rho,
            family: Family::from(&spec.kind),
            tv: None,
        }
    }

    /// Linearization constants from raw `(mu, L, beta)`.
    pub fn linearization(mu: f64, l: f64, beta: f64, rho: f64) -> Self {
        Self {
            mu,
            l,
            beta,
            mu_tilde: l,
            l_tilde: l,
            d_ell: 0.0,
            d_mx: l - mu,
            l_mx: l + beta,
            rho,
            family: Family::Linearization,
            tv: None,
        }
    }

    /// Local-`f_i` constants with shift `beta` from raw `(mu, L, beta)`.
    pub fn local_f(mu: f64, l: f64, beta: f64, rho: f64) -> Self {
        Self {
            mu,
            l,
            beta,
            mu_tilde: beta + (mu - beta).max(0.0),
            l_tilde: l + 2.0 * beta,
            d_ell: 0.0,
            d_mx: 2.0 * beta,
            l_mx: l + beta,
            rho,
            family: Family::LocalF,
            tv: None,
        }
    }

    pub fn with_tv(mut self, tv: TvParams) -> Self {
        self.tv = Some(tv);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [("mu", self.mu), ("L", self.l), ("mu_tilde", self.mu_tilde), ("L_mx", self.l_mx)];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive and finite, got {v}")));
            }
        }
        if self.l < self.mu {
            return Err(Error::Config("need L >= mu".into()));
        }
        if self.beta < 0.0 || self.d_mx < 0.0 {
            return Err(Error::Config("beta and D_mx must be nonnegative".into()));
        }
        if self.mu_tilde < self.d_ell {
            return Err(Error::Config("need mu_tilde >= D_ell".into()));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::Config(format!("rho must lie in [0, 1), got {}", self.rho)));
        }
        Ok(())
    }

    /// `(1 - alpha/2) mu~ + alpha D^l / 2`, also the optimal `eps_opt`.
    pub fn descent_margin(&self, alpha: f64) -> f64 {
        (1.0 - alpha / 2.0) * self.mu_tilde + alpha * self.d_ell / 2.0
    }

    /// `mu~ / (mu~ - D^l)`, infinite when equal.
    pub fn alpha_cap(&self) -> f64 {
        let gap = self.mu_tilde - self.d_ell;
        if gap <= 0.0 {
            f64::INFINITY
        } else {
            self.mu_tilde / gap
        }
    }
}

/// Choice of the Young parameters `eps_x = eps_y` in the consensus gains.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpsilonRule {
    /// `(sqrt z - rho) / rho`, giving `G_X = 1 / (sqrt z - rho)^2`.
    #[default]
    RateMatched,
    /// `(1 - rho) / rho`, giving `G_X = 1 / ((1 - rho)(z - rho))`.
    NetworkOptimal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    CaseI,
    CaseII,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Optimization,
    Network,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorollaryTopology {
    Star,
    General,
    TimeVarying,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub alpha: Option<f64>,
    pub sigma_alpha: Option<f64>,
    pub eta_alpha: Option<f64>,
    pub eps_opt: Option<f64>,
    pub c1: f64,
    pub c2: f64,
    pub g_p_star: f64,
    pub j: f64,
    pub a_terms: [f64; 3],
    pub a_half: f64,
    pub ln_a_half: f64,
    pub alpha_star: f64,
    pub alpha_max: f64,
    /// Certified rate from the theorem.
    pub z: Option<f64>,
    pub branch: Option<Branch>,
    /// Rate expression from the corollary (star expression or closed form).
    pub z_corollary: Option<f64>,
    /// Closed-form bound stated by the star corollary at `alpha = 1`.
    pub z_closed_form: Option<f64>,
    pub regime: Option<Regime>,
    /// `1 / M` in `rho / (1 - rho)^2 <= 1 / M`.
    pub case_one_threshold: Option<f64>,
    pub corollary_alpha_max: Option<f64>,
    /// Coefficient `c` in `O(c log(1/eps))` iterations.
    pub iteration_complexity: Option<f64>,
    pub communication_complexity: Option<f64>,
    pub vacuous: bool,
}

impl RateReport {
    /// `ln(1/eps) / (-ln z)` iterations predicted by the certified rate.
    pub fn predicted_iterations(&self, eps: f64) -> Option<f64> {
        self.z.filter(|z| *z < 1.0 && *z > 0.0).map(|z| (1.0 / eps).ln() / -z.ln())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        if let Some(z) = self.z_closed_form.or(self.z).or(self.z_corollary) {
            out.push_str(&format!("z = {z}\n"));
        }
        let mut line = |k: &str, v: String| out.push_str(&format!("{k:<22} {v}\n"));
        let opt = |v: Option<f64>| v.map(num).unwrap_or_else(|| "-".into());
        line("alpha", opt(self.alpha));
        line("alpha_max", num(self.alpha_max));
        line("alpha_star", num(self.alpha_star));
        line("z_certified", opt(self.z));
        line("z_corollary", opt(self.z_corollary));
        line("J", num(self.j));
        line("A_half", num(self.a_half));
        line("C1", num(self.c1));
        line("C2", num(self.c2));
        line("G_P_star", num(self.g_p_star));
        line("sigma(alpha)", opt(self.sigma_alpha));
        line("eta(alpha)", opt(self.eta_alpha));
        line(
            "regime",
            self.regime.map(|r| format!("{r:?}")).unwrap_or_else(|| "-".into()),
        );
        line("case_one_threshold", opt(self.case_one_threshold));
        line("iteration_coeff", opt(self.iteration_complexity));
        line("communication_coeff", opt(self.communication_complexity));
        if self.vacuous {
            line("flag", "vacuous certification".into());
        }
        out
    }
}

/// Plain decimal in the usual range, scientific notation at the extremes.
fn num(x: f64) -> String {
    let a = x.abs();
    if x != 0.0 && a.is_finite() && !(1e-6..1e9).contains(&a) {
        format!("{x:e}")
    } else {
        format!("{x}")
    }
}

/// `sigma(alpha)` with `eps_opt` at its optimum.
pub fn sigma(inp: &RateInputs, alpha: f64) -> f64 {
    let q = inp.descent_margin(alpha) / 2.0;
    let dd = inp.d_mx * inp.d_mx / inp.mu;
    1.0 - alpha * q / (dd + q)
}

/// `eta(alpha)` with `eps_opt` at its optimum.
pub fn eta(inp: &RateInputs, alpha: f64) -> f64 {
    let e = inp.descent_margin(alpha);
    let q = e / 2.0;
    let dd = inp.d_mx * inp.d_mx / inp.mu;
    (0.5 / e * alpha * dd + alpha / inp.mu * q) / (dd + q)
}

/// `G_P*(alpha) = (D_mx^2/mu + E^2/mu) / E^2` with `E` the descent margin.
pub fn g_p_star(inp: &RateInputs, alpha: f64) -> f64 {
    let e = inp.descent_margin(alpha);
    (inp.d_mx * inp.d_mx / inp.mu + e * e / inp.mu) / (e * e)
}

pub fn c1(inp: &RateInputs) -> f64 {
    let r = inp.d_mx / inp.mu_tilde + 1.0;
    6.0 / inp.mu * (r * r + 4.0 * inp.l_mx * inp.l_mx / (inp.mu_tilde * inp.mu_tilde))
}

pub fn c2(inp: &RateInputs) -> f64 {
    4.0 / (inp.mu_tilde * inp.mu_tilde)
}

/// `J = (1/2) mu~ mu / (4 D_mx^2 + mu~ mu)`.
pub fn j_constant(inp: &RateInputs) -> f64 {
    0.5 * inp.mu_tilde * inp.mu / (4.0 * inp.d_mx * inp.d_mx + inp.mu_tilde * inp.mu)
}

fn cap_for_gp(inp: &RateInputs) -> f64 {
    // G_P* is evaluated at mu~/(mu~ - D^l); with D^l = mu~ the cap drops out and alpha <= 1 binds.
    let cap = inp.alpha_cap();
    if cap.is_finite() {
        cap
    } else {
        1.0
    }
}

/// `A_{1,2,3}` (undirected, `theta = 1/2`).
pub fn a_terms_undirected(inp: &RateInputs) -> [f64; 3] {
    let g = g_p_star(inp, cap_for_gp(inp));
    let c1 = c1(inp);
    let c2 = c2(inp);
    let l2 = inp.l_mx * inp.l_mx;
    let r2 = inp.rho * inp.rho;
    let theta_inv = 2.0;
    [
        g * theta_inv * c1 * 4.0 * l2 * r2,
        (g * theta_inv * 2.0 * c1 + c2) * 2.0 * l2 * r2,
        (g * theta_inv * 2.0 * c1 + c2) * 8.0 * l2 * r2 * r2,
    ]
}

/// `ln A_{1,2,3}` (time-varying, `theta = 1/2`).
pub fn ln_a_terms_tv(inp: &RateInputs, tv: &TvParams) -> [f64; 3] {
    let g = g_p_star(inp, cap_for_gp(inp));
    let c1 = c1(inp) / tv.phi_lb;
    let c2 = c2(inp);
    let l2 = inp.l_mx * inp.l_mx;
    let m = tv.m as f64;
    let ln_rho = tv.rho_b.ln();
    let ln_gap = tv.one_minus_rho_b.ln();
    let ln_phi_lb = tv.phi_lb.ln();
    let shared = g * 2.0 * 2.0 * tv.phi_ub * c1 + c2;
    [
        (g * 2.0 * c1 * 8.0 * tv.phi_ub * l2).ln() + 2f64.ln() + 2.0 * tv.ln_c0 + 2.0 * ln_rho - ln_gap,
        (shared * 2.0 * m * l2).ln() - 2.0 * ln_phi_lb + 2f64.ln() + 2.0 * tv.ln_c0 + 2.0 * ln_rho - ln_gap,
        (shared * 8.0 * m * l2).ln() - 2.0 * ln_phi_lb + 4f64.ln() + 4.0 * tv.ln_c0 + 4.0 * ln_rho - 2.0 * ln_gap,
    ]
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let mx = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY || mx == f64::INFINITY {
        return mx;
    }
    mx + v.iter().map(|x| (x - mx).exp()).sum::<f64>().ln()
}

/// Small-gain polynomial `P(alpha, z)`; `P < 1` certifies rate `z`.
pub fn stability_polynomial(inp: &RateInputs, alpha: f64, z: f64, rule: EpsilonRule) -> Result<f64> {
    inp.validate()?;
    if !(z < 1.0) {
        return Err(Error::Domain {
            z,
            bound: "z < 1".into(),
        });
    }
    if alpha == 0.0 {
        return Ok(0.0);
    }
    let s = sigma(inp, alpha);
    if !(z > s) {
        return Err(Error::Domain {
            z,
            bound: format!("z > sigma(alpha) = {s}"),
        });
    }
    let gp = eta(inp, alpha) / (z - s);
    let c1v = c1(inp);
    let c2v = c2(inp);
    let l2 = inp.l_mx * inp.l_mx;
    let a2 = alpha * alpha;
    match &inp.tv {
        None => {
            let rho = inp.rho;
            let gx = match rule {
                EpsilonRule::RateMatched => {
                    let gap = z.sqrt() - rho;
                    if !(gap > 0.0) || !(z > rho * z.sqrt()) {
                        return Err(Error::Domain {
                            z,
                            bound: format!("z > rho^2 (1 + eps) with rho = {rho}"),
                        });
                    }
                    1.0 / (gap * gap)
                }
                EpsilonRule::NetworkOptimal => {
                    if !(z > rho) {
                        return Err(Error::Domain {
                            z,
                            bound: format!("z > rho^2 (1 + eps) = {rho}"),
                        });
                    }
                    1.0 / ((1.0 - rho) * (z - rho))
                }
            };
            let gy = gx;
            let r2 = rho * rho;
            Ok(gp * gx * c1v * 4.0 * l2 * r2 * a2
                + (gp * 2.0 * c1v + c2v) * gy * 2.0 * l2 * r2 * a2
                + (gp * 2.0 * c1v + c2v) * gy * 8.0 * l2 * r2 * gx * r2 * a2)
        }
        Some(tv) => {
            if !(z > tv.rho_b) {
                return Err(Error::Domain {
                    z,
                    bound: format!("z > rho_B = {}", tv.rho_b),
                });
            }
            let c1t = c1v / tv.phi_lb;
            let m = tv.m as f64;
            // ln G_X = ln(2 c0^2) - ln(1 - rho_B) - ln(z - rho_B)
            let ln_gx = 2f64.ln() + 2.0 * tv.ln_c0 - tv.one_minus_rho_b.ln() - (z - tv.rho_b).ln();
            let ln_r2 = 2.0 * tv.rho_b.ln();
            let shared = gp * 2.0 * tv.phi_ub * c1t + c2v;
            let ln_phi2 = -2.0 * tv.phi_lb.ln();
            let terms = [
                (gp * c1t * 8.0 * tv.phi_ub * l2 * a2).ln() + ln_gx + ln_r2,
                (shared * 2.0 * m * l2 * a2).ln() + ln_phi2 + ln_gx + ln_r2,
                (shared * 8.0 * m * l2 * a2).ln() + ln_phi2 + 2.0 * ln_gx + 2.0 * ln_r2,
            ];
            Ok(log_sum_exp(&terms).exp())
        }
    }
}

fn base_report(inp: &RateInputs) -> RateReport {
    RateReport {
        c1: c1(inp),
        c2: c2(inp),
        g_p_star: g_p_star(inp, cap_for_gp(inp)),
        j: j_constant(inp),
        ..Default::default()
    }
}

/// Step-size bounds and constants without committing to an `alpha`.
pub fn certify_undirected(inp: &RateInputs) -> Result<RateReport> {
    inp.validate()?;
    let mut r = base_report(inp);
    let a = a_terms_undirected(inp);
    let a_half = a.iter().sum::<f64>().sqrt();
    r.a_terms = a;
    r.a_half = a_half;
    r.ln_a_half = a_half.ln();
    let rho = inp.rho;
    let net = if a_half > 0.0 {
        (1.0 - rho).powi(2) / a_half
    } else {
        f64::INFINITY
    };
    r.alpha_max = net.min(inp.alpha_cap()).min(1.0);
    let j = r.j;
    r.alpha_star = ((-rho * a_half.sqrt() + (a_half + j * (1.0 - rho * rho)).sqrt()) / (a_half + j)).powi(2);
    r.vacuous = r.alpha_max < constants::VACUOUS_FLOOR;
    classify(inp, &mut r);
    Ok(r)
}

/// Certified rate at `alpha` over a static undirected graph.
pub fn theorem_rate_undirected(inp: &RateInputs, alpha: f64) -> Result<RateReport> {
    if inp.tv.is_some() {
        return theorem_rate_tv(inp, alpha);
    }
    let mut r = certify_undirected(inp)?;
    if !(alpha > 0.0) || alpha > r.alpha_max {
        return Err(Error::StepSize {
            alpha,
            alpha_max: r.alpha_max,
        });
    }
    let z1 = 1.0 - r.j * alpha;
    let z2 = (inp.rho + (alpha * r.a_half).sqrt()).powi(2);
    let (z, branch) = if alpha < r.alpha_star {
        (z1, Branch::Optimization)
    } else {
        (z2, Branch::Network)
    };
    if !(z < 1.0) {
        return Err(Error::StepSize {
            alpha,
            alpha_max: r.alpha_max,
        });
    }
    fill_alpha(inp, &mut r, alpha);
    r.z = Some(z);
    r.branch = Some(branch);
    Ok(r)
}

fn fill_alpha(inp: &RateInputs, r: &mut RateReport, alpha: f64) {
    r.alpha = Some(alpha);
    r.sigma_alpha = Some(sigma(inp, alpha));
    r.eta_alpha = Some(eta(inp, alpha));
    r.eps_opt = Some(inp.descent_margin(alpha));
}

pub fn certify_tv(inp: &RateInputs) -> Result<RateReport> {
    inp.validate()?;
    let tv = inp
        .tv
        .ok_or_else(|| Error::Config("time-varying constants missing".into()))?;
    let mut r = base_report(inp);
    r.c1 /= tv.phi_lb;
    let ln_a = ln_a_terms_tv(inp, &tv);
    r.a_terms = ln_a.map(f64::exp);
    let ln_a_half = 0.5 * log_sum_exp(&ln_a);
    r.ln_a_half = ln_a_half;
    r.a_half = ln_a_half.exp();
    let net = (tv.one_minus_rho_b.ln() - ln_a_half).exp();
    r.alpha_max = net.min(inp.alpha_cap()).min(1.0);
    r.alpha_star = (tv.one_minus_rho_b.ln() - (r.a_half + r.j).ln()).exp();
    r.vacuous = r.alpha_max < constants::VACUOUS_FLOOR;
    classify(inp, &mut r);
    Ok(r)
}

/// Certified rate at `alpha` over a B-strongly-connected digraph sequence.
pub fn theorem_rate_tv(inp: &RateInputs, alpha: f64) -> Result<RateReport> {
    let mut r = certify_tv(inp)?;
    let tv = inp.tv.expect("checked by certify_tv");
    if !(alpha > 0.0) || alpha > r.alpha_max {
        return Err(Error::StepSize {
            alpha,
            alpha_max: r.alpha_max,
        });
    }
    let z1 = 1.0 - r.j * alpha;
    // rho_B + A alpha = 1 - ((1 - rho_B) - A alpha)
    let z2 = 1.0 - (tv.one_minus_rho_b - r.a_half * alpha);
    let (z, branch) = if z1 >= z2 {
        (z1, Branch::Optimization)
    } else {
        (z2, Branch::Network)
    };
    if !(z < 1.0) {
        return Err(Error::StepSize {
            alpha,
            alpha_max: r.alpha_max,
        });
    }
    fill_alpha(inp, &mut r, alpha);
    r.z = Some(z);
    r.branch = Some(branch);
    Ok(r)
}

/// Star-network rate expression at `alpha`.
pub fn star_rate_expression(inp: &RateInputs, alpha: f64) -> f64 {
    let e = inp.descent_margin(alpha);
    1.0 - alpha * e / (inp.d_mx * inp.d_mx / (2.0 * inp.mu) + e)
}

/// Closed-form star bounds at `alpha = 1`.
pub fn star_closed_form(inp: &RateInputs) -> Option<f64> {
    match inp.family {
        Family::Linearization => Some(1.0 - 1.0 / inp.kappa_g()),
        Family::LocalF => {
            let r = inp.beta / inp.mu;
            Some(1.0 - 1.0 / (1.0 + 4.0 * r * r.min(1.0)))
        }
        Family::Custom => None,
    }
}

/// `M` in the Case-I threshold `rho / (1 - rho)^2 <= 1 / M` for static graphs.
pub fn case_one_constant(inp: &RateInputs) -> Option<f64> {
    let k = inp.kappa_g();
    let b_mu = inp.beta / inp.mu;
    match inp.family {
        Family::Linearization => Some(constants::LIN_GENERAL * k * (1.0 + inp.beta / inp.l).powi(2)),
        Family::LocalF if inp.beta <= inp.mu => {
            Some(constants::LOCAL_F_SMALL_BETA * (1.0 + b_mu).powi(2) * (k + b_mu).powi(2))
        }
        Family::LocalF => Some(constants::LOCAL_F_LARGE_BETA * (1.0 + inp.l / inp.beta) * (k + b_mu)),
        Family::Custom => None,
    }
}

/// `(C_M, C~_M)` for time-varying digraphs.
pub fn tv_case_constants(tv: &TvParams) -> (f64, f64) {
    let root = (tv.phi_ub / tv.phi_lb * tv.m as f64).sqrt();
    let c0 = tv.ln_c0.exp();
    (
        constants::TV_LIN / tv.phi_lb * c0 * root,
        c0 * c0 / tv.phi_lb * root,
    )
}

fn case_complexities(inp: &RateInputs, regime: Regime, rho_term: f64) -> Option<f64> {
    let k = inp.kappa_g();
    let b_mu = inp.beta / inp.mu;
    Some(match (inp.family, regime) {
        (Family::Linearization, Regime::CaseI) => k,
        (Family::LocalF, Regime::CaseI) if inp.beta <= inp.mu => 1.0,
        (Family::LocalF, Regime::CaseI) => b_mu,
        (Family::LocalF, Regime::CaseII) if inp.beta <= inp.mu => k * k * rho_term,
        (Family::Linearization | Family::LocalF, Regime::CaseII) => (k + b_mu).powi(2) * rho_term,
        (Family::Custom, _) => return None,
    })
}

fn classify(inp: &RateInputs, r: &mut RateReport) {
    let (m, rho, one_minus) = match &inp.tv {
        None => (case_one_constant(inp), inp.rho, 1.0 - inp.rho),
        Some(tv) => {
            let (cm, ctm) = tv_case_constants(tv);
            let k = inp.kappa_g();
            let b_mu = inp.beta / inp.mu;
            let m = match inp.family {
                Family::Linearization => Some(cm * k * (1.0 + inp.beta / inp.l).powi(2)),
                Family::LocalF if inp.beta <= inp.mu => {
                    Some(constants::TV_LOCAL_F_SMALL_BETA * ctm * (1.0 + b_mu).powi(2) * (k + b_mu).powi(2))
                }
                Family::LocalF => Some(constants::TV_LOCAL_F_LARGE_BETA * ctm * (1.0 + inp.l / inp.beta) * (k + b_mu)),
                Family::Custom => None,
            };
            (m, tv.rho_b, tv.one_minus_rho_b)
        }
    };
    let Some(m) = m else { return };
    let rho_term = rho / (one_minus * one_minus);
    let regime = if rho_term <= 1.0 / m { Regime::CaseI } else { Regime::CaseII };
    r.case_one_threshold = Some(1.0 / m);
    r.regime = Some(regime);
    let tv_lin = inp.tv.is_some() && inp.family == Family::Linearization;
    let bound = if tv_lin {
        one_minus * one_minus / m
    } else if rho > 0.0 {
        one_minus * one_minus / (m * rho)
    } else {
        f64::INFINITY
    };
    r.corollary_alpha_max = Some(bound.min(1.0));
    r.iteration_complexity = case_complexities(inp, regime, rho_term);
    r.communication_complexity = r.iteration_complexity;
}

/// Corollary-level report for a surrogate family on a topology class.
pub fn corollary_complexity(inp: &RateInputs, topology: CorollaryTopology, alpha: f64) -> Result<RateReport> {
    inp.validate()?;
    match topology {
        CorollaryTopology::Star => {
            let upper = (2.0 * inp.alpha_cap()).min(1.0);
            if !(alpha > 0.0) || alpha > upper {
                return Err(Error::StepSize { alpha, alpha_max: upper });
            }
            let mut r = base_report(inp);
            fill_alpha(inp, &mut r, alpha);
            r.alpha_max = upper;
            let z = star_rate_expression(inp, alpha);
            r.z_corollary = Some(z);
            r.z_closed_form = if alpha == 1.0 { star_closed_form(inp) } else { None };
            r.regime = Some(Regime::CaseI);
            r.iteration_complexity = case_complexities(inp, Regime::CaseI, 0.0);
            r.communication_complexity = r.iteration_complexity;
            Ok(r)
        }
        CorollaryTopology::General => {
            let mut r = certify_undirected(&RateInputs { tv: None, ..*inp })?;
            if alpha > 0.0 && alpha <= r.alpha_max {
                if let Ok(t) = theorem_rate_undirected(&RateInputs { tv: None, ..*inp }, alpha) {
                    r = t;
                }
            }
            r.z_corollary = r.z;
            Ok(r)
        }
        CorollaryTopology::TimeVarying => {
            let mut r = certify_tv(inp)?;
            if alpha > 0.0 && alpha <= r.alpha_max {
                if let Ok(t) = theorem_rate_tv(inp, alpha) {
                    r = t;
                }
            }
            r.z_corollary = r.z;
            Ok(r)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChebyshevRounds {
    pub k: usize,
    pub effective_rho: f64,
    pub capped: bool,
}

/// Smallest Chebyshev degree whose contraction meets the Case-I threshold.
pub fn chebyshev_round_count(inp: &RateInputs, cap: usize) -> Result<ChebyshevRounds> {
    inp.validate()?;
    let m = case_one_constant(inp)
        .ok_or_else(|| Error::Capability("no Case-I threshold for custom surrogates".into()))?;
    let meets = |r: f64| r / ((1.0 - r) * (1.0 - r)) <= 1.0 / m;
    let cap = cap.max(1);
    for k in 1..=cap {
        let r = chebyshev_contraction(inp.rho, k);
        if meets(r) {
            return Ok(ChebyshevRounds {
                k,
                effective_rho: r,
                capped: false,
            });
        }
    }
    Ok(ChebyshevRounds {
        k: cap,
        effective_rho: chebyshev_contraction(inp.rho, cap),
        capped: true,
    })
}
