use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use dfrc_core::baseline::{sp_estimate, MusicOptions};
use dfrc_core::cpd::{self, CpdOptions, RecoveryOptions};
use dfrc_core::harness::{
    bound_report, preset, run_experiment, to_csv, to_file_units, write_outputs, ExperimentSpec,
    Limits, ScenarioFile, TensorFile, PRESET_NAMES, SCHEMA_VERSION,
};
use dfrc_core::model::{synthesize_echo, Beamforming, NoiseSpec};
use dfrc_core::parallel::{stream_rng, Execution};
use dfrc_core::power::{optimize_power, waterfilling_residual};
use dfrc_core::Error;
use serde_json::json;

#[derive(Parser)]
#[command(
    name = "dfrc",
    version,
    about = "Power allocation, bounds and estimators for OFDM radar-communication"
)]
struct Cli {
    /// Random seed (overrides the seed stored in experiment files).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for output files.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    format: Format,
    /// Worker threads; 1 runs sequentially.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum EstimatorArg {
    Cpd,
    Sp,
}

#[derive(Subcommand)]
enum Command {
    /// Print CRLB and LCRLB per target for a scenario file.
    Crlb { scenario: PathBuf },
    /// Rate-optimal power allocation under the limits in a limits file.
    Optimize { scenario: PathBuf, limits: PathBuf },
    /// Run an estimator on a synthesized or stored echo.
    Estimate {
        scenario: PathBuf,
        /// Stored echo tensor (JSON); synthesized from the scenario when omitted.
        #[arg(long)]
        tensor: Option<PathBuf>,
        /// Synthesis SNR in dB; the scenario noise PSD when omitted.
        #[arg(long)]
        snr_db: Option<f64>,
        #[arg(long, value_enum, default_value_t = EstimatorArg::Cpd)]
        estimator: EstimatorArg,
        /// Also write the synthesized echo to this file.
        #[arg(long)]
        save_tensor: Option<PathBuf>,
    },
    /// Run an experiment file.
    Experiment {
        spec: PathBuf,
        /// Override the trial count.
        #[arg(long)]
        trials: Option<usize>,
    },
    /// List or write the built-in experiments.
    Presets {
        #[arg(long)]
        list: bool,
        /// Write every preset as `<name>.json` into this directory.
        #[arg(long)]
        emit: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Infeasible(_) => 3,
        Error::FailureBudget { .. }
        | Error::Estimation(_)
        | Error::UnresolvedPeaks { .. }
        | Error::IllConditionedProjection(_)
        | Error::RangeUnobservable(_) => 4,
        Error::Solver(_)
        | Error::SingularFisher { .. }
        | Error::Unidentifiable(_)
        | Error::UndefinedSnr => 1,
        _ => 2,
    }
}

fn emit(cli: &Cli, stem: &str, text: &str) -> Result<(), Error> {
    print!("{text}");
    if let Some(dir) = &cli.out_dir {
        fs::create_dir_all(dir)?;
        let ext = if cli.format == Format::Json {
            "json"
        } else {
            "csv"
        };
        fs::write(dir.join(format!("{stem}.{ext}")), text)?;
    }
    Ok(())
}

fn crlb(cli: &Cli, path: &Path) -> Result<(), Error> {
    let file = ScenarioFile::load(path)?;
    let scenario = file.to_scenario()?;
    let p = file.power(&scenario)?;
    let rows = bound_report(&scenario, &p, scenario.config.radar_noise_psd)?;
    let rate = dfrc_core::model::transmission_rate(&scenario, &p)?.total;
    let text = match cli.format {
        Format::Csv => to_csv(&rows)?,
        Format::Json => {
            serde_json::to_string_pretty(
                &json!({"schema_version": SCHEMA_VERSION, "rate": rate, "bounds": rows}),
            )? + "\n"
        }
    };
    emit(cli, "crlb", &text)?;
    if cli.format == Format::Csv {
        eprintln!("rate: {rate:.6} bit per OFDM symbol");
    }
    Ok(())
}

fn optimize(cli: &Cli, scenario_path: &Path, limits_path: &Path) -> Result<(), Error> {
    let scenario = ScenarioFile::load(scenario_path)?.to_scenario()?;
    let limits: serde_json::Value = serde_json::from_str(&fs::read_to_string(limits_path)?)?;
    if limits.get("schema_version").and_then(|v| v.as_u64()) != Some(SCHEMA_VERSION as u64) {
        return Err(Error::InvalidConfig(format!(
            "limits file needs schema_version {SCHEMA_VERSION}"
        )));
    }
    let mut body = limits.clone();
    body.as_object_mut().map(|o| o.remove("schema_version"));
    let limits: Limits = serde_json::from_value(body)?;
    let eta = limits.to_targets();
    let alloc = optimize_power(&scenario, &eta)?;
    let residual = waterfilling_residual(&alloc, &scenario, &eta)?;
    let text = match cli.format {
        Format::Csv => {
            #[derive(serde::Serialize)]
            struct Row {
                subcarrier: usize,
                power_w: f64,
            }
            let rows: Vec<Row> = alloc
                .power
                .iter()
                .enumerate()
                .map(|(n, &p)| Row {
                    subcarrier: n,
                    power_w: p,
                })
                .collect();
            to_csv(&rows)?
        }
        Format::Json => {
            let lcrlb: Vec<_> = alloc
                .lcrlb
                .iter()
                .map(|l| {
                    json!({
                        "velocity": l.velocity,
                        "range": l.range,
                        "doa": to_file_units(dfrc_core::power::Parameter::Doa, l.doa),
                    })
                })
                .collect();
            serde_json::to_string_pretty(&json!({
                "schema_version": SCHEMA_VERSION,
                "rate": alloc.rate.total,
                "rate_per_target": alloc.rate.per_target,
                "power": alloc.power,
                "lcrlb": lcrlb,
                "budget_dual": alloc.duals.budget,
                "waterfilling_residual": residual,
                "duality_gap": alloc.duality_gap,
            }))? + "\n"
        }
    };
    emit(cli, "optimize", &text)?;
    if cli.format == Format::Csv {
        eprintln!(
            "rate: {:.6} bit per OFDM symbol, water-filling residual {residual:.3e} W",
            alloc.rate.total
        );
    }
    Ok(())
}

fn estimate(
    cli: &Cli,
    path: &Path,
    tensor: Option<&Path>,
    snr_db: Option<f64>,
    which: EstimatorArg,
    save: Option<&Path>,
) -> Result<(), Error> {
    let file = ScenarioFile::load(path)?;
    let scenario = file.to_scenario()?;
    let seed = cli.seed.unwrap_or(0);
    let echo = match tensor {
        Some(t) => serde_json::from_str::<TensorFile>(&fs::read_to_string(t)?)?.to_tensor()?,
        None => {
            let p = file.power(&scenario)?;
            let noise = snr_db.map_or(
                NoiseSpec::Psd(scenario.config.radar_noise_psd),
                NoiseSpec::SnrDb,
            );
            let mut rng = stream_rng(seed, 0);
            synthesize_echo(
                &scenario,
                &p,
                &Beamforming::matched(&scenario),
                noise,
                &mut rng,
            )?
        }
    };
    if let Some(s) = save {
        fs::write(s, serde_json::to_string(&TensorFile::from_tensor(&echo))?)?;
    }
    #[derive(serde::Serialize)]
    struct Row {
        index: usize,
        doa_deg: f64,
        velocity_mps: f64,
        range_m: f64,
    }
    let rows: Vec<Row> = match which {
        EstimatorArg::Cpd => {
            let mut rng = stream_rng(seed, 1);
            let est = cpd::estimate(
                &echo,
                &scenario,
                &CpdOptions::default(),
                &RecoveryOptions::default(),
                &mut rng,
            )?;
            est.targets
                .iter()
                .enumerate()
                .map(|(i, t)| Row {
                    index: i,
                    doa_deg: t.doa.value.to_degrees(),
                    velocity_mps: t.velocity.value,
                    range_m: t.range.value,
                })
                .collect()
        }
        EstimatorArg::Sp => {
            let est = sp_estimate(&echo, &scenario, &MusicOptions::default())?;
            // DoAs come back unordered; velocity and range follow the carrier groups
            est.velocity_range
                .iter()
                .enumerate()
                .map(|(i, &(v, r))| Row {
                    index: i,
                    doa_deg: est.doa[i].to_degrees(),
                    velocity_mps: v,
                    range_m: r,
                })
                .collect()
        }
    };
    let text = match cli.format {
        Format::Csv => to_csv(&rows)?,
        Format::Json => {
            serde_json::to_string_pretty(
                &json!({"schema_version": SCHEMA_VERSION, "targets": rows}),
            )? + "\n"
        }
    };
    emit(cli, "estimate", &text)
}

fn experiment(cli: &Cli, path: &Path, trials: Option<usize>) -> Result<(), Error> {
    let mut spec = ExperimentSpec::load(path)?;
    if let Some(s) = cli.seed {
        spec.seed = s;
    }
    if let Some(t) = trials {
        spec.trials = t;
    }
    let table = run_experiment(&spec, Execution::from_threads(cli.threads))?;
    let dir = cli.out_dir.clone().unwrap_or_else(|| PathBuf::from("."));
    for p in write_outputs(&table, &dir, cli.format == Format::Json)? {
        eprintln!("wrote {}", p.display());
    }
    for note in &table.metadata.notes {
        eprintln!("note: {note}");
    }
    table.check_failure_budget(spec.max_failure_fraction)
}

fn presets(list: bool, dir: Option<&Path>) -> Result<(), Error> {
    if list || dir.is_none() {
        for name in PRESET_NAMES {
            println!("{name}");
        }
    }
    if let Some(dir) = dir {
        fs::create_dir_all(dir)?;
        for name in PRESET_NAMES {
            let text = serde_json::to_string_pretty(&preset(name)?)? + "\n";
            fs::write(dir.join(format!("{name}.json")), text)?;
        }
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<(), Error> {
    match &cli.command {
        Command::Crlb { scenario } => crlb(cli, scenario),
        Command::Optimize { scenario, limits } => optimize(cli, scenario, limits),
        Command::Estimate {
            scenario,
            tensor,
            snr_db,
            estimator,
            save_tensor,
        } => estimate(
            cli,
            scenario,
            tensor.as_deref(),
            *snr_db,
            *estimator,
            save_tensor.as_deref(),
        ),
        Command::Experiment { spec, trials } => experiment(cli, spec, *trials),
        Command::Presets { list, emit } => presets(*list, emit.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
