//! `blockrg`: batch driver for the identity suites, decay probes, counting
//! reports, cluster oracles, single steps and flow solves.
//!
//! Exit codes: 0 success, 2 config error, 3 cap exceeded, 4 assertion failure.

mod commands;
mod config;
mod error;
mod report;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde_json::Value;

use blockrg::flow::SurrogateMaps;
use blockrg::rg_step::{FlowStateJson, StepControls};
use blockrg::cluster::UltralocalMeasure;

use commands::{ClusterInputs, FlowMaps, GasJson, StepInputs};
use config::RunConfig;
use error::{parse_error, CliError, CliResult};
use report::{config_hash, write, Output};

#[derive(Parser, Debug)]
#[command(name = "blockrg", version, about = "Block-spin renormalization group experiments on small tori")]
struct Cli {
    /// JSON run configuration; omitted blocks take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Every claim (value, oracle, tolerance, pass) as JSON, or CSV when the
    /// name ends in `.csv`.
    #[arg(long, global = true)]
    report: Option<PathBuf>,
    /// Long-format CSV (config_hash, series, x, y) for plotting.
    #[arg(long, global = true, num_args = 0..=1, default_missing_value = "plot_data.csv")]
    emit_plot_data: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Probe {
    Decay,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Averaging, free-step, resolvent and step-pipeline identities.
    VerifyIdentities {
        /// Claims table (CSV); stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-level free flow: a_k, masses, log Z increments, identity residuals.
    GaussianFlow {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Block-norm decay fits, random-walk diagnostics and the truncation energy.
    #[command(alias = "greens")]
    GreensDecay {
        #[arg(long, value_enum, default_value = "decay")]
        probe: Probe,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Polymer counts against the path bound and the tree-distance audit.
    Polymers {
        #[arg(long)]
        d: Option<usize>,
        #[arg(long)]
        max_size: Option<usize>,
        #[arg(long, alias = "emit")]
        out: Option<PathBuf>,
    },
    /// Connected amplitudes of a polymer gas, optionally against brute force.
    /// Without `--input`, runs seeded random instances with the oracle.
    Cluster {
        #[arg(long, requires = "measure")]
        input: Option<PathBuf>,
        #[arg(long)]
        measure: Option<PathBuf>,
        #[arg(long)]
        oracle: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// One small-field step from a state file (or the configured default).
    Step {
        #[arg(long)]
        state: Option<PathBuf>,
        #[arg(long)]
        controls: Option<PathBuf>,
        /// The next state, when it is fully polynomial.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fixed point of the coupling flow with surrogate or pipeline step maps.
    Flow {
        /// A surrogate-maps JSON file, or `pipeline`.
        #[arg(long, default_value = "surrogate")]
        maps: String,
        #[arg(long = "K")]
        levels: Option<u32>,
        #[arg(long = "L")]
        l: Option<usize>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long = "Delta")]
        delta: Option<u32>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<(T, Value)> {
    let name = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{name}: {e}")))?;
    let typed: T = serde_json::from_str(&text).map_err(|e| parse_error(&name, &e))?;
    let raw: Value = serde_json::from_str(&text).map_err(|e| parse_error(&name, &e))?;
    Ok((typed, raw))
}

/// Where the primary artifact goes.
enum Primary {
    Claims,
    Table,
    Json(Value),
}

fn run(cli: Cli) -> CliResult<()> {
    let (mut cfg, _) = match &cli.config {
        Some(p) => read_json::<RunConfig>(p)?,
        None => (RunConfig::default(), Value::Null),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let mut inputs: Vec<(String, Value)> = Vec::new();
    match &cli.command {
        Command::Polymers { d, max_size, .. } => {
            cfg.polymers.d = d.unwrap_or(cfg.polymers.d);
            cfg.polymers.max_size = max_size.unwrap_or(cfg.polymers.max_size);
            cfg.polymers.pair_size = cfg.polymers.pair_size.min(cfg.polymers.max_size);
        }
        Command::Flow { levels, l, lambda, delta, .. } => {
            cfg.flow.levels = levels.unwrap_or(cfg.flow.levels);
            cfg.global.l = l.unwrap_or(cfg.global.l);
            cfg.flow.lambda = lambda.unwrap_or(cfg.flow.lambda);
            cfg.flow.delta = delta.unwrap_or(cfg.flow.delta);
        }
        _ => {}
    }
    cfg.validate().map_err(CliError::Config)?;

    let (primary, out_path) = match &cli.command {
        Command::VerifyIdentities { out } => (Primary::Claims, out.clone()),
        Command::GaussianFlow { out } | Command::GreensDecay { out, .. } | Command::Polymers { out, .. } => {
            (Primary::Table, out.clone())
        }
        Command::Flow { out, .. } => (Primary::Table, out.clone()),
        Command::Cluster { out, .. } | Command::Step { out, .. } => (Primary::Json(Value::Null), out.clone()),
    };

    // load every input before hashing so the hash covers them
    let mut cluster_inputs = None;
    let mut step_inputs = None;
    let mut flow_maps = None;
    match &cli.command {
        Command::Cluster { input, measure, oracle, .. } => {
            let gas = match input {
                Some(p) => {
                    let (g, raw) = read_json::<GasJson>(p)?;
                    inputs.push(("input".into(), raw));
                    Some(g)
                }
                None => None,
            };
            let measure = match measure {
                Some(p) => {
                    let (m, raw) = read_json::<UltralocalMeasure>(p)?;
                    inputs.push(("measure".into(), raw));
                    Some(m)
                }
                None => None,
            };
            cluster_inputs = Some(ClusterInputs { gas, measure, oracle: *oracle });
        }
        Command::Step { state, controls, .. } => {
            let state = match state {
                Some(p) => {
                    let (s, raw) = read_json::<FlowStateJson>(p)?;
                    inputs.push(("state".into(), raw));
                    Some(s)
                }
                None => None,
            };
            let controls = match controls {
                Some(p) => {
                    let (c, raw) = read_json::<StepControls>(p)?;
                    inputs.push(("controls".into(), raw));
                    Some(c)
                }
                None => None,
            };
            step_inputs = Some(StepInputs { state, controls });
        }
        Command::Flow { maps, .. } => {
            flow_maps = Some(match maps.as_str() {
                "pipeline" => FlowMaps::Pipeline,
                "surrogate" => FlowMaps::Surrogate(cfg.flow.surrogate.clone()),
                path => {
                    let (m, raw) = read_json::<SurrogateMaps>(Path::new(path))?;
                    inputs.push(("maps".into(), raw));
                    FlowMaps::Surrogate(m)
                }
            });
            if let Some(FlowMaps::Pipeline) = flow_maps {
                inputs.push(("maps".into(), Value::String("pipeline".into())));
            }
        }
        _ => {}
    }

    let mut out = Output::new(config_hash(&cfg, &inputs));
    let mut primary = primary;
    match &cli.command {
        Command::VerifyIdentities { .. } => commands::verify_identities(&cfg, &mut out)?,
        Command::GaussianFlow { .. } => commands::gaussian_flow(&cfg, &mut out)?,
        Command::GreensDecay { probe: Probe::Decay, .. } => commands::greens_decay(&cfg, &mut out)?,
        Command::Polymers { .. } => commands::polymers(&cfg, &mut out)?,
        Command::Cluster { .. } => {
            commands::cluster(&cfg, cluster_inputs.as_ref().expect("loaded above"), &mut out)?;
            primary = Primary::Json(serde_json::json!({ "config_hash": out.hash, "result": out.details }));
        }
        Command::Step { .. } => {
            let next = commands::step(&cfg, step_inputs.as_ref().expect("loaded above"), &mut out)?;
            primary = Primary::Json(match next {
                Ok(state) => serde_json::json!({ "config_hash": out.hash, "state": state }),
                Err(why) => serde_json::json!({ "config_hash": out.hash, "state": null, "not_serializable": why }),
            });
        }
        Command::Flow { .. } => commands::flow(&cfg, flow_maps.as_ref().expect("loaded above"), &mut out)?,
    }

    let body = match &primary {
        Primary::Claims => out.claims_csv(),
        Primary::Table => out.table_csv().unwrap_or_else(|| out.claims_csv()),
        Primary::Json(v) => serde_json::to_string_pretty(v).expect("json serializes") + "\n",
    };
    match &out_path {
        Some(p) => write(p, &body)?,
        None => {
            std::io::stdout().write_all(body.as_bytes())?;
        }
    }
    if let Some(p) = &cli.report {
        let is_csv = p.extension().is_some_and(|e| e == "csv");
        write(p, &if is_csv { out.claims_csv() } else { out.json() })?;
    }
    if let Some(p) = &cli.emit_plot_data {
        write(p, &out.plot_csv())?;
    }

    let failures: Vec<_> = out.failures().into_iter().cloned().collect();
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Assertion(format!("{} claim(s) outside tolerance", failures.len()), failures))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("blockrg: {e}");
            if let CliError::Assertion(_, claims) = &e {
                eprintln!("section,quantity,value,oracle,tolerance");
                for c in claims {
                    let show = |v: Option<f64>| v.map(report::num).unwrap_or_default();
                    eprintln!("{},{},{},{},{}", c.section, c.quantity, report::num(c.value), show(c.oracle), show(c.tolerance));
                }
            }
            ExitCode::from(e.exit_code())
        }
    }
}
