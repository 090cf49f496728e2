//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. Pass criterion numbers as arguments to run a subset.

use std::process::Command;
use std::time::{Duration, Instant};

use sonata::harness::{run_scenario, ExperimentConfig, RunOutcome};
use sonata::network::{
    chebyshev_contraction, generate_topology, generate_tv_network, metropolis_weights, TopologyKind, TvKind,
};
use sonata::problem::{centralized_solution, RidgeData};
use sonata::rates::{self, constants, CorollaryTopology, EpsilonRule, RateInputs, Regime};
use sonata::solver::{Init, Network, Solver, SolverConfig, SolverMode};
use sonata::surrogate::{surrogate_constants, SurrogateKind};
use sonata::{CompositeProblem, DMatrix, DVector};

type Check = anyhow::Result<(bool, String)>;

fn main() {
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(usize, &str, fn() -> Check, Duration); 10] = [
        (1, "tracking conservation", c1_tracking, secs(5)),
        (2, "push-sum conservation and weight bounds", c2_tv_tracking, secs(5)),
        (3, "star linearization is gradient descent", c3_star_gd, secs(60)),
        (4, "consensus on the oracle solution", c4_oracle, secs(30)),
        (5, "certified rate soundness", c5_soundness, secs(300)),
        (6, "star closed forms from the rate command", c6_star_cli, secs(60)),
        (7, "condition-number scaling", c7_kappa_scaling, secs(180)),
        (8, "similarity scaling and crossover", c8_beta_scaling, secs(300)),
        (9, "small-gain certificate consistency", c9_small_gain, secs(60)),
        (10, "Chebyshev multi-round mixing", c10_chebyshev, secs(120)),
    ];
    let mut failed = 0;
    for (n, name, f, budget) in criteria {
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let res = f();
        let el = t.elapsed();
        let (ok, detail) = match res {
            Ok((ok, d)) if el <= budget => (ok, d),
            Ok((_, d)) => (false, format!("{d}; over time budget {budget:?}")),
            Err(e) => (false, format!("error: {e:#}")),
        };
        if !ok {
            failed += 1;
        }
        println!(
            "criterion {n:>2} {}: {name} ({detail}; {:.2}s)",
            if ok { "PASS" } else { "FAIL" },
            el.as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

fn ridge(m: usize, n: usize, d: usize, lambda: f64, mu0: f64, l0: f64, seed: u64) -> anyhow::Result<(RidgeData, CompositeProblem)> {
    let data = RidgeData::generate(m, n, d, mu0, l0, seed)?;
    let p = data.problem(lambda)?;
    Ok((data, p))
}

/// `(H, q)` of the averaged ridge objective, assembled from the raw sufficient statistics.
fn normal_equations(data: &RidgeData, lambda: f64) -> (DMatrix<f64>, DVector<f64>) {
    let m = data.gram.len() as f64;
    let d = data.gram[0].nrows();
    let n = data.n as f64;
    let mut h = DMatrix::identity(d, d) * (2.0 * lambda);
    let mut q = DVector::zeros(d);
    for (g, v) in data.gram.iter().zip(&data.atb) {
        h += g / (n * m);
        q += v / (n * m);
    }
    (h, q)
}

fn config(alpha: f64, mode: SolverMode, max_iters: usize) -> SolverConfig {
    SolverConfig {
        alpha,
        max_iters,
        mode,
        stop_at_epsilon: false,
        ..SolverConfig::default()
    }
}

fn metropolis(kind: TopologyKind, m: usize, seed: u64) -> anyhow::Result<Network> {
    Ok(Network::Static(metropolis_weights(&generate_topology(&kind, m, seed)?)?))
}

fn c1_tracking() -> Check {
    let (_, p) = ridge(10, 50, 20, 0.05, 1.0, 10.0, 101)?;
    let net = metropolis(TopologyKind::ErdosRenyi { p: 0.5 }, 10, 101)?;
    let mut worst: f64 = 0.0;
    for kind in [SurrogateKind::linearization(), SurrogateKind::local_f()] {
        let spec = surrogate_constants(&kind, &p)?;
        let solver = Solver::new(&p, &spec, &net, config(1.0, SolverMode::Undirected, 200), 0.0)?;
        let mut s = solver.initial_state();
        for _ in 0..200 {
            solver.step(&mut s)?;
            let scale = s.grad.row_iter().map(|r| r.norm()).sum::<f64>() / s.m() as f64;
            worst = worst.max(s.tracking_defect() / scale.max(f64::MIN_POSITIVE));
        }
    }
    Ok((worst <= 1e-10, format!("max relative defect {worst:.2e}")))
}

fn directed_cycle(m: usize) -> TopologyKind {
    TopologyKind::Custom {
        edges: (0..m).map(|i| (i, (i + 1) % m)).collect(),
        directed: true,
    }
}

fn c2_tv_tracking() -> Check {
    let m = 5;
    let (_, p) = ridge(m, 40, 6, 0.1, 1.0, 10.0, 202)?;
    let base = generate_topology(&directed_cycle(m), m, 0)?;
    let tv = generate_tv_network(TvKind::AlternatingSubgraphs, &base, 2, 1.0 / m as f64, 202)?;
    let (lb, ub) = (tv.constants().phi_lb, tv.constants().phi_ub);
    let net = Network::TimeVarying(tv);
    let spec = surrogate_constants(&SurrogateKind::linearization(), &p)?;
    let solver = Solver::new(&p, &spec, &net, config(0.5, SolverMode::TimeVarying, 500), 0.0)?;
    let mut s = solver.initial_state();
    let mut worst: f64 = 0.0;
    let mut bounds_ok = true;
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for _ in 0..500 {
        solver.step(&mut s)?;
        let scale = s.grad.row_iter().map(|r| r.norm()).sum::<f64>() / m as f64;
        worst = worst.max(s.tracking_defect() / scale.max(f64::MIN_POSITIVE));
        for &phi in s.phi.iter() {
            lo = lo.min(phi);
            hi = hi.max(phi);
            bounds_ok &= lb <= phi && phi <= ub;
        }
    }
    Ok((
        worst <= 1e-10 && bounds_ok,
        format!("max relative defect {worst:.2e}; phi in [{lo:.3}, {hi:.3}] within [{lb:.2e}, {ub:.3}]"),
    ))
}

fn c3_star_gd() -> Check {
    let lambda = 0.1;
    let (data, p) = ridge(6, 40, 8, lambda, 1.0, 20.0, 303)?;
    let spec = surrogate_constants(&SurrogateKind::linearization(), &p)?;
    let (h, q) = normal_equations(&data, lambda);
    let l = h.symmetric_eigenvalues().max();
    let net = Network::Star;
    let solver = Solver::new(&p, &spec, &net, config(1.0, SolverMode::Star, 100), 0.0)?;
    let mut s = solver.initial_state();
    let mut gd = DVector::zeros(p.d());
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        solver.step(&mut s)?;
        gd = &gd - (&h * &gd - &q) / l;
        for i in 0..s.m() {
            worst = worst.max((s.agent_x(i) - &gd).amax() / gd.amax().max(1.0));
        }
    }
    Ok((
        worst <= 1e-12 && (spec.tau - l).abs() <= 1e-10 * l,
        format!("max deviation {worst:.2e}, tau {:.6} vs L {l:.6}", spec.tau),
    ))
}

fn c4_oracle() -> Check {
    let m = 6;
    let lambda = 0.1;
    let (data, p) = ridge(m, 60, 5, lambda, 1.0, 10.0, 404)?;
    let (h, q) = normal_equations(&data, lambda);
    let x_star = h.lu().solve(&q).ok_or_else(|| anyhow::anyhow!("singular normal equations"))?;
    let base = generate_topology(&TopologyKind::ErdosRenyi { p: 0.6 }, m, 404)?;
    let tv = generate_tv_network(TvKind::AlternatingSubgraphs, &base, 2, 1.0 / m as f64, 404)?;
    let nets = [
        ("undirected", Network::Static(metropolis_weights(&base)?), 1.0),
        ("star", Network::Star, 1.0),
        ("time-varying", Network::TimeVarying(tv), 0.5),
    ];
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, net, alpha) in &nets {
        for kind in [SurrogateKind::linearization(), SurrogateKind::local_f()] {
            let spec = surrogate_constants(&kind, &p)?;
            let solver = Solver::new(&p, &spec, net, config(*alpha, net.mode(), 20_000), 0.0)?;
            let mut s = solver.initial_state();
            let dist = |s: &sonata::NetworkState| (0..m).map(|i| (s.agent_x(i) - &x_star).norm()).fold(0.0, f64::max);
            let mut it = 0;
            while dist(&s) >= 1e-6 && it < 20_000 {
                solver.step(&mut s)?;
                it += 1;
            }
            let d = dist(&s);
            ok &= d < 1e-6;
            parts.push(format!("{name}/{}: {d:.1e} at {it}", kind.name()));
        }
    }
    Ok((ok, parts.join(", ")))
}

struct SoundnessCase {
    label: String,
    problem: CompositeProblem,
    network: Network,
    kind: SurrogateKind,
    inputs: RateInputs,
    alpha: f64,
    z: f64,
    alpha_max: f64,
}

fn soundness_cases() -> anyhow::Result<Vec<SoundnessCase>> {
    let m = 6;
    let topologies = [
        TopologyKind::Complete,
        TopologyKind::ErdosRenyi { p: 0.9 },
        TopologyKind::Cycle,
        TopologyKind::ErdosRenyi { p: 0.6 },
        TopologyKind::Complete,
    ];
    let mut out = Vec::new();
    for s in 0..10u64 {
        let kind = if s % 2 == 0 {
            SurrogateKind::linearization()
        } else {
            SurrogateKind::local_f()
        };
        let topo = topologies[(s / 2) as usize].clone();
        let n = if s % 2 == 0 { 40 } else { 400 };
        let (_, problem) = ridge(m, n, 4, 0.2, 1.0, 5.0, 500 + s)?;
        let w = metropolis_weights(&generate_topology(&topo, m, 500 + s)?)?;
        let spec = surrogate_constants(&kind, &problem)?;
        let inputs = RateInputs::from_spec(&problem, &spec, w.rho());
        let cert = rates::certify_undirected(&inputs)?;
        let alpha = 0.9 * cert.alpha_max;
        let z = rates::theorem_rate_undirected(&inputs, alpha)?
            .z
            .ok_or_else(|| anyhow::anyhow!("no certified rate"))?;
        out.push(SoundnessCase {
            label: format!("s{s}/{topo:?}/{}", kind.name()),
            problem,
            network: Network::Static(w),
            kind,
            inputs,
            alpha,
            z,
            alpha_max: cert.alpha_max,
        });
    }
    Ok(out)
}

fn c5_soundness() -> Check {
    let mut ok = true;
    let mut parts = Vec::new();
    for c in soundness_cases()? {
        let (_, u_star) = centralized_solution(&c.problem, 1e-14)?;
        let spec = surrogate_constants(&c.kind, &c.problem)?;
        let cfg = SolverConfig {
            alpha: c.alpha,
            max_iters: 4000,
            epsilon: 1e-11,
            stop_at_epsilon: true,
            init: Init::Random { scale: 1.0 },
            seed: 5,
            ..SolverConfig::default()
        };
        let trace = Solver::new(&c.problem, &spec, &c.network, cfg, u_star)?.run()?;
        let slope = trace.tail_log_slope(0.5).unwrap_or(f64::NAN);
        let pass = slope <= c.z.ln() + 0.05;
        ok &= pass;
        parts.push(format!(
            "{}: alpha {:.2e} slope {slope:.2e} vs ln z {:.2e}{}",
            c.label,
            c.alpha,
            c.z.ln(),
            if pass { "" } else { " (violated)" }
        ));
    }
    Ok((ok, parts.join("; ")))
}

fn rate_z(args: &[&str]) -> anyhow::Result<f64> {
    let o = Command::new(env!("CARGO_BIN_EXE_sonata")).arg("rate").args(args).output()?;
    anyhow::ensure!(o.status.success(), "rate {args:?} exited with {:?}", o.status.code());
    let text = String::from_utf8(o.stdout)?;
    let line = text.lines().next().unwrap_or_default();
    Ok(line
        .strip_prefix("z = ")
        .ok_or_else(|| anyhow::anyhow!("unexpected first line {line:?}"))?
        .trim()
        .parse()?)
}

fn c6_star_cli() -> Check {
    let mut worst: f64 = 0.0;
    let mut n = 0;
    for (mu, l) in [(1.0, 10.0), (0.5, 7.0), (2.0, 2.0), (1.0, 1e4), (0.3, 3.3)] {
        let z = rate_z(&["--mu", &mu.to_string(), "--L", &l.to_string(), "--rho", "0", "--surrogate", "linearization", "--alpha", "1"])?;
        worst = worst.max((z - (1.0 - mu / l)).abs());
        n += 1;
    }
    for (mu, l, beta) in [(1.0, 10.0, 0.5), (1.0, 10.0, 3.0), (2.0, 50.0, 2.0), (0.1, 5.0, 0.01), (1.0, 4.0, 0.0)] {
        let z = rate_z(&[
            "--mu", &mu.to_string(), "--L", &l.to_string(), "--beta", &beta.to_string(),
            "--rho", "0", "--surrogate", "local_f", "--alpha", "1",
        ])?;
        let r: f64 = beta / mu;
        worst = worst.max((z - (1.0 - 1.0 / (1.0 + 4.0 * r * r.min(1.0)))).abs());
        n += 1;
    }
    Ok((worst <= 1e-12, format!("{n} cases, max error {worst:.1e}")))
}

fn scenario(text: &str) -> anyhow::Result<sonata::harness::ScenarioOutput> {
    Ok(run_scenario(&ExperimentConfig::parse(text)?, None)?)
}

fn c7_kappa_scaling() -> Check {
    let base = |n: usize, kind: &str, reps: usize| {
        format!(
            r#"
schema_version = 1
scenario = "sweep_kappa"
seed = 7
[problem]
m = 10
n = {n}
d = 20
kappa_grid = [10.0, 30.0, 100.0]
mu0 = 1.0
l0 = 1000.0
[network]
kind = "complete"
[surrogate]
kind = "{kind}"
[solver]
alpha = {{ rule = "fixed", value = 1.0 }}
max_iters = 100000
[monte_carlo]
replications = {reps}
"#
        )
    };
    let lin = scenario(&base(200, "linearization", 3))?;
    let lt = lin.summaries[0].1.clone();
    let slope = sonata::harness::fit_scaling_exponent(&lt, "kappa_g", "T_eps_mean")?;
    let f = scenario(&base(F_SAMPLES, "local_f", 1))?;
    let ft = &f.summaries[0].1;
    let tf = ft.column("T_eps_mean")?;
    let bm = ft.column("beta_over_mu")?;
    let spread = tf.iter().cloned().fold(0.0, f64::max) / tf.iter().cloned().fold(f64::INFINITY, f64::min);
    let small_beta = bm.iter().all(|b| *b < 1.0);
    Ok((
        (0.7..=1.3).contains(&slope) && spread < 2.0 && small_beta,
        format!(
            "linearization T {:?} slope {slope:.3}; local_f (n = {F_SAMPLES}) T {tf:?} beta/mu {:?} spread {spread:.2}",
            lt.column("T_eps_mean")?,
            bm.iter().map(|b| format!("{b:.2}")).collect::<Vec<_>>()
        ),
    ))
}

const F_SAMPLES: usize = 3_000_000;

fn c8_beta_scaling() -> Check {
    let reps = 20;
    let out = scenario(&format!(
        r#"
schema_version = 1
scenario = "compare_surrogates"
seed = 8
[problem]
m = 30
d = 5
lambda = 0.0
n_grid = [10, 40, 160]
mu0 = 1.0
l0 = 10.0
[network]
kind = "erdos_renyi"
p = 0.9
[solver]
alpha = {{ rule = "fixed", value = 1.0 }}
max_iters = 20000
[monte_carlo]
replications = {reps}
"#
    ))?;
    let cap = 20_000.0;
    let t = |r: &RunOutcome| r.t_epsilon.map(|t| t as f64).unwrap_or(cap);
    let pick = |label: &str, g: usize| -> Vec<&RunOutcome> {
        let mut v: Vec<&RunOutcome> = out.runs.iter().filter(|r| r.label == label && r.grid_index == g).collect();
        v.sort_by_key(|r| r.replication);
        v
    };
    let mean = |v: &[&RunOutcome]| v.iter().map(|r| t(r)).sum::<f64>() / v.len() as f64;
    let tf: Vec<f64> = (0..3).map(|g| mean(&pick("local_f", g))).collect();
    let tl: Vec<f64> = (0..3).map(|g| mean(&pick("linearization", g))).collect();
    let bm: Vec<f64> = (0..3)
        .map(|g| pick("local_f", g).iter().map(|r| r.beta_over_mu).sum::<f64>() / reps as f64)
        .collect();
    let f_monotone = bm[0] > bm[1] && bm[1] > bm[2] && tf[0] > tf[1] && tf[1] > tf[2];
    let l_spread = tl.iter().cloned().fold(0.0, f64::max) / tl.iter().cloned().fold(f64::INFINITY, f64::min);
    let (small_f, small_l, large_f, large_l) = (pick("local_f", 0), pick("linearization", 0), pick("local_f", 2), pick("linearization", 2));
    let crossings = (0..reps)
        .filter(|&r| t(small_l[r]) < t(small_f[r]) && t(large_f[r]) < t(large_l[r]))
        .count();
    Ok((
        f_monotone && l_spread < 2.0 && crossings * 5 >= reps * 4,
        format!(
            "beta/mu {:?}; local_f T {tf:?}; linearization T {tl:?} spread {l_spread:.2}; crossover on {crossings}/{reps} seeds",
            bm.iter().map(|b| format!("{b:.2}")).collect::<Vec<_>>()
        ),
    ))
}

fn c9_small_gain() -> Check {
    let mut ok = true;
    let mut parts = Vec::new();
    for c in soundness_cases()? {
        let p = rates::stability_polynomial(&c.inputs, c.alpha, c.z, EpsilonRule::RateMatched)?;
        let mut sup: f64 = 0.0;
        let alphas: Vec<f64> = (0..=60).map(|k| (c.alpha_max * 2f64.powf((k as f64 - 20.0) / 4.0)).min(1.0)).collect();
        let zs: Vec<f64> = (1..=400).map(|k| 1.0 - 10f64.powf(-(k as f64) * 0.04)).collect();
        for &a in &alphas {
            let feasible = zs.iter().any(|&z| {
                matches!(rates::stability_polynomial(&c.inputs, a, z, EpsilonRule::RateMatched), Ok(v) if v < 1.0)
            });
            if feasible {
                sup = sup.max(a);
            }
        }
        let pass = p < 1.0 && c.alpha_max <= sup;
        ok &= pass;
        parts.push(format!("{}: P {p:.3}, alpha_max {:.2e} <= grid sup {sup:.2e}", c.label, c.alpha_max));
    }
    Ok((ok, parts.join("; ")))
}

fn c10_chebyshev() -> Check {
    let m = 10;
    let (_, p) = ridge(m, 50, 10, 0.05, 1.0, 10.0, 1010)?;
    let (_, u_star) = centralized_solution(&p, 1e-14)?;
    let spec = surrogate_constants(&SurrogateKind::linearization(), &p)?;
    let path = metropolis_weights(&generate_topology(&TopologyKind::Path, m, 0)?)?;
    let inputs = RateInputs::from_spec(&p, &spec, path.rho());
    let rounds = rates::chebyshev_round_count(&inputs, constants::CHEBYSHEV_CAP)?;
    let eff = RateInputs::from_spec(&p, &spec, chebyshev_contraction(path.rho(), rounds.k));
    let regime = rates::corollary_complexity(&eff, CorollaryTopology::General, 1.0)?.regime;
    let case_one = regime == Some(Regime::CaseI) && !rounds.capped;
    let run = |net: &Network, k: usize, cheb: bool| -> anyhow::Result<Option<usize>> {
        let cfg = SolverConfig {
            alpha: 1.0,
            comm_rounds: k,
            chebyshev: cheb,
            max_iters: 100_000,
            ..SolverConfig::default()
        };
        Ok(Solver::new(&p, &spec, net, cfg, u_star)?.run()?.t_epsilon)
    };
    let t_path = run(&Network::Static(path.clone()), rounds.k, true)?;
    let t_full = run(&metropolis(TopologyKind::Complete, m, 0)?, 1, false)?;
    let ratio = match (t_path, t_full) {
        (Some(a), Some(b)) => a as f64 / b as f64,
        _ => f64::INFINITY,
    };
    Ok((
        case_one && ratio <= 1.5,
        format!(
            "rho {:.4}, K {} (effective rho {:.2e}, regime {regime:?}); T path {t_path:?} vs complete {t_full:?}, ratio {ratio:.3}",
            path.rho(),
            rounds.k,
            rounds.effective_rho
        ),
    ))
}
