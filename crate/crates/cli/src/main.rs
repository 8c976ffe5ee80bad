use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};
use fedre_cli::commands::{cmd_attack, cmd_gen_data, cmd_train, fmt_f64};
use fedre_cli::config::{parse_config, Assignment, KEYS};
use fedre_cli::report::{cmd_report, execute_sweep, Sweep};
use fedre_cli::{CliError, CliResult, ExperimentConfig};
use fedre_core::federation::Aggregation;

fn flag(key: &str) -> String {
    key.replace('_', "-")
}

/// `--config` plus one override flag per config key.
fn with_config_args(mut cmd: Command) -> Command {
    cmd = cmd.arg(
        Arg::new("config")
            .long("config")
            .short('c')
            .value_name("FILE")
            .value_parser(clap::value_parser!(PathBuf))
            .help("key = value config file; flags override it"),
    );
    for (section, key) in KEYS {
        let help = if section.is_empty() {
            "general".to_string()
        } else {
            format!("[{section}]")
        };
        cmd = cmd.arg(
            Arg::new(*key)
                .long(flag(key))
                .value_name("VALUE")
                .help_heading("Config overrides")
                .help(help),
        );
    }
    cmd
}

fn cli() -> Command {
    Command::new("fedre")
        .about("Federated segmentation with layer-wise local differential privacy")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(
            with_config_args(Command::new("gen-data").about("Write a synthetic dataset file")).arg(
                Arg::new("out")
                    .long("out")
                    .short('o')
                    .value_name("FILE")
                    .value_parser(clap::value_parser!(PathBuf))
                    .help("Output file (default: <output_dir>/dataset.fedre)"),
            ),
        )
        .subcommand(with_config_args(
            Command::new("train").about("Run federated training and write its history"),
        ))
        .subcommand(
            with_config_args(Command::new("attack").about("Invert an uploaded gradient"))
                .arg(
                    path_arg("model", "Model checkpoint the upload was computed on").required(true),
                )
                .arg(path_arg("samples", "Dataset file holding the attacked sample").required(true))
                .arg(path_arg(
                    "gradients",
                    "Uploaded gradients; simulated from the config's privacy settings if absent",
                )),
        )
        .subcommand(
            with_config_args(Command::new("report").about("Tabulate a sweep of runs"))
                .arg(path_arg(
                    "runs",
                    "Directory of per-cell runs (default: <output_dir>/runs)",
                ))
                .arg(list_arg("sweep-epsilon", "Epsilon values (inf allowed)"))
                .arg(list_arg("sweep-clients", "Client counts"))
                .arg(list_arg("sweep-aggregation", "Aggregations: fedavg, pda"))
                .arg(list_arg("sweep-clip", "Shared clipping thresholds"))
                .arg(list_arg("sweep-seeds", "Seeds"))
                .arg(
                    Arg::new("with-attack")
                        .long("with-attack")
                        .action(ArgAction::SetTrue)
                        .help("Also tabulate one attack per cell"),
                )
                .arg(
                    Arg::new("execute")
                        .long("execute")
                        .action(ArgAction::SetTrue)
                        .help("Run cells that have no results yet"),
                ),
        )
}

fn path_arg(name: &'static str, help: &'static str) -> Arg {
    Arg::new(name)
        .long(name)
        .value_name("PATH")
        .value_parser(clap::value_parser!(PathBuf))
        .help(help)
}

fn list_arg(name: &'static str, help: &'static str) -> Arg {
    Arg::new(name).long(name).value_name("LIST").help(help)
}

fn load(m: &ArgMatches) -> CliResult<ExperimentConfig> {
    let overrides: Vec<Assignment> = KEYS
        .iter()
        .filter_map(|(_, k)| {
            m.get_one::<String>(k)
                .map(|v| Assignment::flag(k, v.clone()))
        })
        .collect();
    parse_config(
        m.get_one::<PathBuf>("config").map(PathBuf::as_path),
        &overrides,
    )
}

fn list<T: std::str::FromStr>(
    m: &ArgMatches,
    name: &str,
    parse: impl Fn(&str) -> Option<T>,
) -> CliResult<Option<Vec<T>>> {
    let Some(raw) = m.get_one::<String>(name) else {
        return Ok(None);
    };
    raw.split(',')
        .map(|v| {
            parse(v.trim()).ok_or_else(|| CliError::Config {
                line: None,
                key: name.to_string(),
                message: format!("cannot parse {v:?}"),
            })
        })
        .collect::<CliResult<Vec<T>>>()
        .map(Some)
}

fn real(s: &str) -> Option<f64> {
    match s {
        "inf" | "infinity" => Some(f64::INFINITY),
        _ => s.parse().ok().filter(|v: &f64| !v.is_nan()),
    }
}

fn run(m: &ArgMatches) -> CliResult<()> {
    match m.subcommand() {
        Some(("gen-data", m)) => {
            let cfg = load(m)?;
            let path = cmd_gen_data(&cfg, m.get_one::<PathBuf>("out").map(PathBuf::as_path))?;
            println!(
                "wrote {} samples to {}",
                cfg.dataset.n_samples,
                path.display()
            );
        }
        Some(("train", m)) => {
            let cfg = load(m)?;
            let s = cmd_train(&cfg)?;
            println!("rounds {}", s.rounds);
            if let (Some(iou), Some(loss)) = (s.final_iou, s.final_loss) {
                println!("final iou {}", fmt_f64(iou));
                println!("final loss {}", fmt_f64(loss));
            }
            for (l, v) in s.psi.iter().enumerate() {
                println!("psi layer {l} {}", fmt_f64(*v));
            }
            println!("outputs in {}", s.output_dir.display());
        }
        Some(("attack", m)) => {
            let cfg = load(m)?;
            let r = cmd_attack(
                &cfg,
                m.get_one::<PathBuf>("model").expect("required"),
                m.get_one::<PathBuf>("samples").expect("required"),
                m.get_one::<PathBuf>("gradients").map(PathBuf::as_path),
            )?;
            println!("match loss {}", fmt_f64(r.result.match_loss));
            println!("region mse {}", fmt_f64(r.result.mse));
            println!("region psnr {}", fmt_f64(r.result.psnr));
            println!("region ssim {}", fmt_f64(r.result.ssim));
        }
        Some(("report", m)) => {
            let cfg = load(m)?;
            let mut sweep = Sweep::from_config(&cfg);
            if let Some(v) = list(m, "sweep-epsilon", real)? {
                sweep.epsilons = v;
            }
            if let Some(v) = list(m, "sweep-clients", |s| s.parse().ok())? {
                sweep.clients = v;
            }
            if let Some(v) = list(m, "sweep-aggregation", |s| s.parse::<Aggregation>().ok())? {
                sweep.aggregations = v;
            }
            if let Some(v) = list(m, "sweep-clip", real)? {
                sweep.clips = v;
            }
            if let Some(v) = list(m, "sweep-seeds", |s| s.parse().ok())? {
                sweep.seeds = v;
            }
            sweep.attack = m.get_flag("with-attack");
            let out = cfg.output_dir();
            let runs = m
                .get_one::<PathBuf>("runs")
                .cloned()
                .unwrap_or_else(|| out.join("runs"));
            if m.get_flag("execute") {
                execute_sweep(&cfg, &sweep, &runs)?;
            }
            let r = cmd_report(&sweep, &runs, &out)?;
            for f in &r.files {
                println!("wrote {}", f.display());
            }
        }
        _ => unreachable!("subcommand required"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let matches = cli().get_matches();
    match run(&matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
