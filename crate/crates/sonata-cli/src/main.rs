use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use sonata::harness::{run_scenario, ExperimentConfig, Scenario, ScenarioOutput};
use sonata::network::{NetworkFile, TvConstants};
use sonata::rates::{self, CorollaryTopology, RateInputs, TvParams};
use sonata::surrogate::{surrogate_constants, SurrogateKind};
use sonata::{CompositeProblem, Error};

#[derive(Parser, Debug)]
#[command(name = "sonata", version, about = "Distributed optimization with gradient tracking")]
struct Cli {
    /// Master seed; overrides the config value.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides `output.dir`.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Experiment config (TOML, or JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run a single_run or tv_run scenario.
    Run,
    /// Run a sweep_kappa or sweep_beta scenario.
    Sweep,
    /// Run the linearization versus local_f comparison.
    Compare,
    /// Evaluate rate certificates from raw constants or files.
    Rate(RateArgs),
    /// Parse and validate a config file.
    ValidateConfig {
        path: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TopologyArg {
    /// Star when rho = 0, otherwise general.
    Auto,
    Star,
    General,
    Tv,
}

#[derive(clap::Args, Debug)]
struct RateArgs {
    #[arg(long)]
    mu: Option<f64>,
    #[arg(long = "L")]
    l: Option<f64>,
    #[arg(long, default_value_t = 0.0)]
    beta: f64,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long, default_value = "linearization")]
    surrogate: String,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, value_enum, default_value_t = TopologyArg::Auto)]
    topology: TopologyArg,
    /// Problem JSON; replaces --mu, --L and --beta.
    #[arg(long)]
    problem: Option<PathBuf>,
    /// Network JSON with weights; supplies rho.
    #[arg(long)]
    network: Option<PathBuf>,
    /// Agents, window and weight floor for time-varying constants.
    #[arg(long)]
    m: Option<usize>,
    #[arg(long, default_value_t = 1)]
    window: usize,
    #[arg(long)]
    c_ell: Option<f64>,
    /// Emit JSON instead of aligned text.
    #[arg(long)]
    json: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let config = e
                .chain()
                .any(|c| c.downcast_ref::<Error>().map(Error::is_config).unwrap_or(false));
            ExitCode::from(if config { 2 } else { 1 })
        }
    }
}

/// Writes to stdout; a closed pipe ends output quietly.
fn emit(text: &str) -> anyhow::Result<()> {
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    Error::Config(msg.into()).into()
}

fn load_config(cli: &Cli, path: Option<&Path>) -> anyhow::Result<ExperimentConfig> {
    let path = path
        .or(cli.config.as_deref())
        .ok_or_else(|| config_err("no config given; pass --config <path>"))?;
    let mut cfg = ExperimentConfig::from_path(path).map_err(|e| match e {
        Error::Io(io) => config_err(format!("cannot read {}: {io}", path.display())),
        Error::Json(j) => config_err(format!("{}: {j}", path.display())),
        Error::Toml(t) => config_err(format!("{}: {t}", path.display())),
        other => other.into(),
    })?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(d) = &cli.out_dir {
        cfg.output.dir = d.clone();
    }
    Ok(cfg)
}

fn execute(cfg: &ExperimentConfig) -> anyhow::Result<ScenarioOutput> {
    let out = run_scenario(cfg, Some(&cfg.output.dir))?;
    let mut text = String::new();
    for (label, table) in &out.summaries {
        if out.summaries.len() > 1 {
            text.push_str(&format!("# {label}\n"));
        }
        text.push_str(&table.to_csv());
    }
    emit(&text)?;
    eprintln!("wrote {} files to {}", out.files.len(), cfg.output.dir.display());
    Ok(out)
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Run => {
            let cfg = load_config(&cli, None)?;
            if !matches!(cfg.scenario, Scenario::SingleRun | Scenario::TvRun) {
                return Err(config_err(format!(
                    "`run` expects scenario single_run or tv_run, got {:?}",
                    cfg.scenario
                )));
            }
            execute(&cfg)?;
        }
        Command::Sweep => {
            let cfg = load_config(&cli, None)?;
            if !matches!(cfg.scenario, Scenario::SweepKappa | Scenario::SweepBeta) {
                return Err(config_err(format!(
                    "`sweep` expects scenario sweep_kappa or sweep_beta, got {:?}",
                    cfg.scenario
                )));
            }
            execute(&cfg)?;
        }
        Command::Compare => {
            let mut cfg = load_config(&cli, None)?;
            cfg.scenario = Scenario::CompareSurrogates;
            cfg.validate()?;
            execute(&cfg)?;
        }
        Command::ValidateConfig { path } => {
            let cfg = load_config(&cli, path.as_deref())?;
            emit(&format!("ok: scenario {:?}, schema_version {}\n", cfg.scenario, cfg.schema_version))?;
        }
        Command::Rate(args) => rate(args)?,
    }
    Ok(())
}

/// Step where the two rate branches meet; the certified `z` is smallest there.
fn best_alpha(r: &sonata::RateReport) -> f64 {
    if r.alpha_star > 0.0 && r.alpha_star < r.alpha_max {
        r.alpha_star
    } else {
        r.alpha_max
    }
}

fn rate(a: &RateArgs) -> anyhow::Result<()> {
    let kind = SurrogateKind::parse(&a.surrogate)?;
    let rho = match (&a.network, a.rho) {
        (Some(path), _) => NetworkFile::read(path)?.mixing_matrix()?.rho(),
        (None, Some(r)) => r,
        (None, None) => match a.topology {
            TopologyArg::Star | TopologyArg::Auto | TopologyArg::Tv => 0.0,
            _ => return Err(config_err("pass --rho or --network")),
        },
    };
    let mut inp = if let Some(path) = &a.problem {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let problem = CompositeProblem::from_json(&text)?;
        let spec = surrogate_constants(&kind, &problem)?;
        RateInputs::from_spec(&problem, &spec, rho)
    } else {
        let (Some(mu), Some(l)) = (a.mu, a.l) else {
            return Err(config_err("pass --mu and --L, or --problem"));
        };
        match kind {
            SurrogateKind::Linearization { .. } => RateInputs::linearization(mu, l, a.beta, rho),
            SurrogateKind::LocalF { .. } => RateInputs::local_f(mu, l, a.beta, rho),
            SurrogateKind::Custom { .. } => bail!(config_err("custom surrogates need --problem")),
        }
    };
    let topology = match a.topology {
        TopologyArg::Auto if rho == 0.0 => CorollaryTopology::Star,
        TopologyArg::Auto | TopologyArg::General => CorollaryTopology::General,
        TopologyArg::Star => CorollaryTopology::Star,
        TopologyArg::Tv => {
            let m = a.m.ok_or_else(|| config_err("--topology tv needs --m"))?;
            let c_ell = a.c_ell.unwrap_or(1.0 / m as f64);
            inp = inp.with_tv(TvParams::from(&TvConstants::new(m, a.window, c_ell)));
            CorollaryTopology::TimeVarying
        }
    };
    inp.validate()?;
    let alpha = match a.alpha {
        Some(x) => x,
        None => match topology {
            CorollaryTopology::Star => (2.0 * inp.alpha_cap()).min(1.0),
            CorollaryTopology::General => best_alpha(&rates::certify_undirected(&inp)?),
            CorollaryTopology::TimeVarying => best_alpha(&rates::certify_tv(&inp)?),
        },
    };
    let report = rates::corollary_complexity(&inp, topology, alpha)?;
    if a.json {
        emit(&format!("{}\n", serde_json::to_string_pretty(&report)?))
    } else {
        emit(&report.to_text())
    }
}
