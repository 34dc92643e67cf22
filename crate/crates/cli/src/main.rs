//! `canloop` — command-line runner for the CAN / electric-vehicle
//! co-simulation toolkit.
//!
//! Exit codes: 0 success, 1 configuration error (bad flags, config files,
//! databases, cycles), 2 simulation diagnostic (e.g. bus saturation, failed
//! reference checks), 3 output I/O failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use canloop_core::candb::{ByteOrder, Database, Signedness};
use canloop_core::dataset::{self, DatasetError};
use canloop_core::scenario::{
    self, ConfigError, Coupling, RunPair, Scenario, SimulationError, SimulationTrace,
};

const EXIT_CONFIG: u8 = 1;
const EXIT_DIAGNOSTIC: u8 = 2;
const EXIT_IO: u8 = 3;

#[derive(Parser)]
#[command(
    name = "canloop",
    version,
    about = "Closed-loop vehicle/CAN co-simulation with attack injection and dataset export"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario config and write its dataset bundle
    Simulate {
        /// Scenario configuration file (TOML)
        #[arg(long)]
        config: PathBuf,
        /// Directory the dataset files are written into
        #[arg(long, env = "CANLOOP_OUTPUT_DIR", default_value = "out")]
        output_dir: PathBuf,
        /// Dotted-path config override, e.g. attacks.0.amplitude=-30 (repeatable)
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Parse a DBC database and print its message/signal table
    ValidateDbc {
        /// Database file to check
        path: PathBuf,
    },
    /// Decode a candump-format log against a database
    Decode {
        /// DBC database file
        dbc: PathBuf,
        /// candump-format log file
        log: PathBuf,
    },
    /// Run the bundled reference scenarios (cruise + EUDC, both coupling
    /// modes) and print the checks summary
    PaperRepro {
        /// Directory the four scenario outputs are written into
        #[arg(long, env = "CANLOOP_OUTPUT_DIR", default_value = "paper-repro-out")]
        output_dir: PathBuf,
    },
}

enum AppError {
    Config(ConfigError),
    Simulation(SimulationError),
    Output(DatasetError),
    Input { path: PathBuf, source: std::io::Error },
    Invalid(String),
    ChecksFailed(usize),
}

impl AppError {
    fn code(&self) -> u8 {
        match self {
            AppError::Config(_) | AppError::Input { .. } | AppError::Invalid(_) => EXIT_CONFIG,
            AppError::Simulation(_) | AppError::ChecksFailed(_) => EXIT_DIAGNOSTIC,
            AppError::Output(_) => EXIT_IO,
        }
    }
}

impl std::fmt::Display for AppError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AppError::Config(e) => write!(f, "{e}"),
            AppError::Simulation(e) => write!(f, "{e}"),
            AppError::Output(e) => write!(f, "{e}"),
            AppError::Input { path, source } => {
                write!(f, "cannot read {}: {source}", path.display())
            }
            AppError::Invalid(msg) => write!(f, "{msg}"),
            AppError::ChecksFailed(n) => write!(f, "{n} reference check(s) failed"),
        }
    }
}

impl From<ConfigError> for AppError {
    fn from(e: ConfigError) -> Self {
        AppError::Config(e)
    }
}

impl From<SimulationError> for AppError {
    fn from(e: SimulationError) -> Self {
        AppError::Simulation(e)
    }
}

impl From<DatasetError> for AppError {
    fn from(e: DatasetError) -> Self {
        AppError::Output(e)
    }
}

fn main() -> ExitCode {
    // Die silently on SIGPIPE like other Unix CLIs instead of panicking when
    // a downstream reader (e.g. `| head`) closes stdout early.
    #[cfg(unix)]
    // SAFETY: trivially valid signal(2) call; no other threads exist yet.
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help / --version print to stdout and succeed; usage errors
            // are configuration errors under this tool's exit-code contract.
            let is_usage_error = e.use_stderr();
            let _ = e.print();
            return if is_usage_error {
                ExitCode::from(EXIT_CONFIG)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Simulate { config, output_dir, overrides } => {
            cmd_simulate(&config, &overrides, &output_dir)
        }
        Command::ValidateDbc { path } => cmd_validate_dbc(&path),
        Command::Decode { dbc, log } => cmd_decode(&dbc, &log),
        Command::PaperRepro { output_dir } => cmd_paper_repro(&output_dir),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

fn read_input(path: &Path) -> Result<String, AppError> {
    std::fs::read_to_string(path).map_err(|source| AppError::Input {
        path: path.to_path_buf(),
        source,
    })
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

fn cmd_simulate(config: &Path, overrides: &[String], output_dir: &Path) -> Result<(), AppError> {
    let scenario = scenario::load_config(config, overrides)?;
    let pair = scenario::run_with_baseline(&scenario)?;
    let bundle = dataset::write_run_outputs(&pair, scenario.plot_stride_s, output_dir)?;
    let record = pair.attacked.as_ref().unwrap_or(&pair.benign);
    println!(
        "scenario '{}' ({}): {} steps, {} frames ({} attack-labeled)",
        scenario.name,
        scenario.coupling.as_str(),
        record.steps.len(),
        record.frames.len(),
        record.attack_frame_count()
    );
    println!(
        "bus load {:.4}, peak queue depth {}, saturated encodes {}",
        record.bus_load, record.bus_peak_depth, record.encode_saturation_count
    );
    println!("wrote {}", bundle.candump_path.display());
    println!("wrote {}", bundle.labeled_csv_path.display());
    println!("wrote {}", bundle.channels_csv_path.display());
    println!("wrote {}", bundle.summary_path.display());
    println!("wrote {}", output_dir.join("plot.csv").display());
    if pair.attacked.is_some() {
        println!("wrote {}", output_dir.join("compare.json").display());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// validate-dbc
// ---------------------------------------------------------------------------

fn cmd_validate_dbc(path: &Path) -> Result<(), AppError> {
    let text = read_input(path)?;
    let db = Database::parse(&text).map_err(|e| AppError::Invalid(e.to_string()))?;
    if db.version.is_empty() {
        println!("database: {} messages", db.len());
    } else {
        println!("database version \"{}\": {} messages", db.version, db.len());
    }
    for msg in db.messages() {
        println!(
            "0x{:03X} {} dlc={} sender={}",
            msg.id, msg.name, msg.dlc, msg.sender
        );
        for sig in &msg.signals {
            let order = match sig.byte_order {
                ByteOrder::LittleEndian => "little-endian",
                ByteOrder::BigEndian => "big-endian",
            };
            let sign = match sig.signedness {
                Signedness::Unsigned => "unsigned",
                Signedness::Signed => "signed",
            };
            println!(
                "  {} : start={} len={} {} {} factor={:?} offset={:?} range=[{:?}, {:?}] unit=\"{}\"",
                sig.name,
                sig.start_bit,
                sig.bit_length,
                order,
                sign,
                sig.factor,
                sig.offset,
                sig.min,
                sig.max,
                sig.unit
            );
        }
    }
    for d in &db.diagnostics {
        println!("warning: {d}");
    }
    if db.is_empty() {
        println!("warning: database defines no messages");
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// decode
// ---------------------------------------------------------------------------

fn cmd_decode(dbc: &Path, log: &Path) -> Result<(), AppError> {
    let db_text = read_input(dbc)?;
    let db = Database::parse(&db_text).map_err(|e| AppError::Invalid(e.to_string()))?;
    let log_text = read_input(log)?;
    let records = dataset::parse_candump(&log_text).map_err(|e| AppError::Invalid(e.to_string()))?;
    for r in &records {
        let id_text = dataset::format_id(&r.frame);
        match db.message_by_key(r.frame.key()) {
            Some(msg) => match msg.unpack(&r.frame.payload) {
                Ok(values) => {
                    let fields: Vec<String> = msg
                        .signals
                        .iter()
                        .map(|s| format!("{}={:?}", s.name, values[&s.name]))
                        .collect();
                    println!(
                        "({:.6}) {} {} {}",
                        r.timestamp,
                        r.channel,
                        msg.name,
                        fields.join(" ")
                    );
                }
                Err(e) => println!(
                    "({:.6}) {} {} undecodable: {e}",
                    r.timestamp, r.channel, id_text
                ),
            },
            None => println!(
                "({:.6}) {} {} unknown dlc={} data={}",
                r.timestamp,
                r.channel,
                id_text,
                r.frame.dlc(),
                r.frame
                    .payload
                    .iter()
                    .map(|b| format!("{b:02X}"))
                    .collect::<String>()
            ),
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// paper-repro
// ---------------------------------------------------------------------------

/// The reference scenarios ship inside the binary so the command runs from
/// any directory; they are also the repository's `configs/` files.
const ASSET_FILES: [(&str, &str); 4] = [
    ("powertrain.dbc", include_str!("../../../configs/powertrain.dbc")),
    ("eudc.csv", include_str!("../../../configs/eudc.csv")),
    ("cruise_attack.toml", include_str!("../../../configs/cruise_attack.toml")),
    ("eudc_attack.toml", include_str!("../../../configs/eudc_attack.toml")),
];

struct ReproRun {
    name: String,
    coupling: Coupling,
    scenario: Scenario,
    pair: RunPair,
}

fn cmd_paper_repro(output_dir: &Path) -> Result<(), AppError> {
    let config_dir = output_dir.join("configs");
    std::fs::create_dir_all(&config_dir).map_err(|source| {
        AppError::Output(DatasetError::Io { path: config_dir.clone(), source })
    })?;
    for (name, contents) in ASSET_FILES {
        let path = config_dir.join(name);
        std::fs::write(&path, contents)
            .map_err(|source| AppError::Output(DatasetError::Io { path, source }))?;
    }

    let mut runs = Vec::new();
    for config_name in ["cruise_attack.toml", "eudc_attack.toml"] {
        for coupling in ["closed_loop", "replay_counterfactual"] {
            let overrides = [format!("coupling={coupling}")];
            let scenario = scenario::load_config(&config_dir.join(config_name), &overrides)?;
            let pair = scenario::run_with_baseline(&scenario)?;
            let dir_name = format!("{}_{}", scenario.name, coupling);
            dataset::write_run_outputs(&pair, scenario.plot_stride_s, &output_dir.join(&dir_name))?;
            println!("ran {dir_name}");
            runs.push(ReproRun {
                name: dir_name,
                coupling: scenario.coupling,
                scenario,
                pair,
            });
        }
    }

    println!();
    println!("reference checks:");
    let mut failures = 0usize;
    let mut check = |label: &str, ok: bool| {
        println!("  [{}] {label}", if ok { "PASS" } else { "FAIL" });
        if !ok {
            failures += 1;
        }
    };

    for run in &runs {
        let attacked = run.pair.attacked.as_ref().expect("bundled configs attack");

        if run.coupling == Coupling::ReplayCounterfactual {
            let mut exact = true;
            for (b, a) in run.pair.benign.steps.iter().zip(&attacked.steps) {
                let offset = a.torque_request_dirty_nm - b.torque_request_dirty_nm;
                let expected = if (160.0..240.0).contains(&b.t) { -15.0 } else { 0.0 };
                if offset != expected {
                    exact = false;
                    break;
                }
            }
            check(
                &format!("{}: torque offset -15.0 Nm on [160,240) exact, 0 outside", run.name),
                exact,
            );
            check(
                &format!("{}: 8000 attack-labeled torque frames", run.name),
                attacked.attack_frame_count() == 8000,
            );
        }

        let identical_prefix = pre_window_identical(&run.pair.benign, attacked, 160.0);
        check(
            &format!("{}: benign/attacked identical before t=160", run.name),
            identical_prefix,
        );
        check(
            &format!("{}: bus load {:.4} < 1", run.name, attacked.bus_load),
            attacked.bus_load < 1.0,
        );

        if run.coupling == Coupling::ClosedLoop && run.scenario.name.starts_with("cruise") {
            let dt = run.scenario.dt_s;
            let steps = &attacked.steps;
            let lo = (161.0 / dt).ceil() as usize;
            let hi = ((240.0 / dt).floor() as usize).min(steps.len() - 1);
            let decreasing = (lo..hi).all(|i| steps[i + 1].speed_mps < steps[i].speed_mps);
            check(&format!("{}: speed strictly decreasing on (161,240)", run.name), decreasing);
            let setpoint = 100.0 / 3.6;
            let i340 = ((340.0 / dt) as usize).min(steps.len() - 1);
            let recovered = (steps[i340].speed_mps - setpoint).abs() * 3.6 < 1.0;
            check(
                &format!("{}: speed within 1 km/h of 100 km/h at t=340", run.name),
                recovered,
            );
        }

        if run.coupling == Coupling::ClosedLoop && run.scenario.name.starts_with("eudc") {
            let worst = run
                .pair
                .benign
                .steps
                .iter()
                .map(|r| (r.speed_mps - r.reference_mps).abs())
                .fold(0.0, f64::max);
            check(
                &format!("{}: benign tracking within 2 km/h (worst {:.3})", run.name, worst * 3.6),
                worst * 3.6 <= 2.0,
            );
        }
    }

    if failures > 0 {
        return Err(AppError::ChecksFailed(failures));
    }
    Ok(())
}

fn pre_window_identical(benign: &SimulationTrace, attacked: &SimulationTrace, t_start: f64) -> bool {
    let channels_ok = benign
        .steps
        .iter()
        .zip(&attacked.steps)
        .take_while(|(b, _)| b.t < t_start)
        .all(|(b, a)| b == a);
    let frames_ok = benign
        .frames
        .iter()
        .zip(&attacked.frames)
        .take_while(|(b, _)| b.timestamp < t_start)
        .all(|(b, a)| b == a);
    channels_ok && frames_ok
}
