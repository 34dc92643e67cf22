//! Scenario orchestration: reference drive cycles, configuration loading,
//! the closed-loop simulation (controller -> injection -> CAN pack/transmit
//! -> unpack -> plant), and benign-vs-attacked run comparison.
//!
//! Per simulation step at t = i * dt:
//!   1. frames whose transmission completed by t deliver their decoded
//!      torque to the plant input;
//!   2. the controller produces a command from the reference and measured
//!      speed (or the benign run's recorded command is replayed);
//!   3. due schedules sample-and-hold their signals, the attack injector
//!      perturbs the torque wire value, frames are packed and enqueued;
//!   4. the bus grants pending frames in arbitration order;
//!   5. channels are recorded, then the plant and battery step to t + dt.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::candb::{Database, DbcError};
use crate::frames::{self, BusConfig, BusError, Emitted, TimedFrame};
use crate::injector::{AttackError, AttackSpec, Injector, MessageRef};
use crate::vehicle::{
    battery_step, controller_command, step_vehicle, ControllerGains, ControllerMode,
    ControllerState, ParamError, VehicleParams, VehicleState,
};

pub const DEFAULT_DT_S: f64 = 0.001;
pub const DEFAULT_TORQUE_PERIOD_S: f64 = 0.010;
pub const DEFAULT_STATUS_PERIOD_S: f64 = 0.020;

// ---------------------------------------------------------------------------
// Drive cycles
// ---------------------------------------------------------------------------

#[derive(Debug, Error, PartialEq)]
pub enum CycleError {
    #[error("drive cycle is empty")]
    Empty,
    #[error("line {line}: expected `time_s,speed_mps`, got '{content}'")]
    Malformed { line: usize, content: String },
    #[error("line {line}: time {t} does not increase over the previous breakpoint")]
    NonMonotone { line: usize, t: f64 },
    #[error("line {line}: negative speed {speed}")]
    NegativeSpeed { line: usize, speed: f64 },
}

/// Reference speed profile: linear interpolation between breakpoints,
/// clamped to the endpoints outside the covered range.
#[derive(Debug, Clone, PartialEq)]
pub struct DriveCycle {
    breakpoints: Vec<(f64, f64)>,
}

impl DriveCycle {
    pub fn new(breakpoints: Vec<(f64, f64)>) -> Result<DriveCycle, CycleError> {
        if breakpoints.is_empty() {
            return Err(CycleError::Empty);
        }
        for (i, &(t, v)) in breakpoints.iter().enumerate() {
            if i > 0 && t <= breakpoints[i - 1].0 {
                return Err(CycleError::NonMonotone { line: i + 1, t });
            }
            if v < 0.0 {
                return Err(CycleError::NegativeSpeed { line: i + 1, speed: v });
            }
        }
        Ok(DriveCycle { breakpoints })
    }

    /// Parse the two-column CSV breakpoint format: `time_s,speed_mps` per
    /// line, optional header, `#` comments.
    pub fn from_csv_str(text: &str) -> Result<DriveCycle, CycleError> {
        let mut breakpoints = Vec::new();
        let mut header_allowed = true;
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut fields = line.split(',').map(str::trim);
            let parsed = match (fields.next(), fields.next(), fields.next()) {
                (Some(a), Some(b), None) => a
                    .parse::<f64>()
                    .and_then(|t| b.parse::<f64>().map(|v| (t, v)))
                    .ok(),
                _ => None,
            };
            match parsed {
                Some(bp) => {
                    breakpoints.push(bp);
                    header_allowed = false;
                }
                // One non-numeric row before any data is the optional header.
                None if header_allowed => header_allowed = false,
                None => {
                    return Err(CycleError::Malformed {
                        line: idx + 1,
                        content: line.to_string(),
                    })
                }
            }
        }
        DriveCycle::new(breakpoints)
    }

    pub fn breakpoints(&self) -> &[(f64, f64)] {
        &self.breakpoints
    }

    pub fn duration(&self) -> f64 {
        self.breakpoints.last().map(|&(t, _)| t).unwrap_or(0.0)
    }

    pub fn peak_speed(&self) -> f64 {
        self.breakpoints
            .iter()
            .map(|&(_, v)| v)
            .fold(0.0, f64::max)
    }

    pub fn reference_speed(&self, t: f64) -> f64 {
        let bps = &self.breakpoints;
        if t <= bps[0].0 {
            return bps[0].1;
        }
        if t >= bps[bps.len() - 1].0 {
            return bps[bps.len() - 1].1;
        }
        let hi = bps.partition_point(|&(bt, _)| bt <= t);
        let (t0, v0) = bps[hi - 1];
        let (t1, v1) = bps[hi];
        v0 + (v1 - v0) * (t - t0) / (t1 - t0)
    }
}

/// What the controller tracks.
#[derive(Debug, Clone, PartialEq)]
pub enum Reference {
    Cruise { setpoint_mps: f64 },
    Cycle(DriveCycle),
}

impl Reference {
    pub fn speed_at(&self, t: f64) -> f64 {
        match self {
            Reference::Cruise { setpoint_mps } => *setpoint_mps,
            Reference::Cycle(cycle) => cycle.reference_speed(t),
        }
    }

    pub fn mode(&self) -> ControllerMode {
        match self {
            Reference::Cruise { .. } => ControllerMode::Cruise,
            Reference::Cycle(_) => ControllerMode::CycleFollow,
        }
    }
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coupling {
    /// The controller sees the attacked plant and fights back.
    #[default]
    ClosedLoop,
    /// The attacked run replays the benign run's command trace, so the
    /// attacked-minus-benign torque equals the injected waveform exactly.
    ReplayCounterfactual,
}

impl Coupling {
    pub fn as_str(&self) -> &'static str {
        match self {
            Coupling::ClosedLoop => "closed_loop",
            Coupling::ReplayCounterfactual => "replay_counterfactual",
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {message}")]
    Toml { path: PathBuf, message: String },
    #[error("override '{entry}': {message}")]
    Override { entry: String, message: String },
    #[error("database {path}: {source}")]
    Dbc { path: PathBuf, source: DbcError },
    #[error("drive cycle {path}: {source}")]
    Cycle { path: PathBuf, source: CycleError },
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Params(#[from] ParamError),
    #[error("{0}")]
    Invalid(String),
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    name: String,
    dbc_path: String,
    duration_s: f64,
    #[serde(default = "default_dt")]
    dt_s: f64,
    #[serde(default)]
    coupling: Coupling,
    #[serde(default)]
    initial_speed_kmh: f64,
    #[serde(default = "default_soc")]
    initial_soc: f64,
    #[serde(default)]
    bus: RawBus,
    #[serde(default)]
    vehicle: VehicleParams,
    controller: ControllerGains,
    reference: RawReference,
    #[serde(default)]
    signals: SignalNames,
    #[serde(default)]
    attacks: Vec<AttackSpec>,
    #[serde(default)]
    output: RawOutput,
}

fn default_dt() -> f64 {
    DEFAULT_DT_S
}

fn default_soc() -> f64 {
    0.9
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBus {
    #[serde(default = "default_bitrate")]
    bitrate_bps: f64,
    #[serde(default = "default_channel")]
    channel: String,
    #[serde(default = "default_queue_depth")]
    max_queue_depth: usize,
    /// Keys are message names or identifiers ("TorqueRequest", "0x101",
    /// "257"); values are periods in seconds. Empty means the default
    /// schedule for the two mapped messages.
    #[serde(default)]
    schedules: BTreeMap<String, f64>,
}

impl Default for RawBus {
    fn default() -> Self {
        RawBus {
            bitrate_bps: default_bitrate(),
            channel: default_channel(),
            max_queue_depth: default_queue_depth(),
            schedules: BTreeMap::new(),
        }
    }
}

fn default_bitrate() -> f64 {
    500_000.0
}

fn default_channel() -> String {
    "vcan0".to_string()
}

fn default_queue_depth() -> usize {
    64
}

#[derive(Debug, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
enum RawReference {
    Cruise { setpoint_kmh: f64 },
    Cycle { cycle_path: String },
}

/// Which database messages/signals carry the control loop.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SignalNames {
    pub torque_message: String,
    pub torque_signal: String,
    pub status_message: String,
    pub speed_signal: String,
    pub torque_actual_signal: String,
    pub soc_signal: String,
}

impl Default for SignalNames {
    fn default() -> Self {
        SignalNames {
            torque_message: "TorqueRequest".to_string(),
            torque_signal: "MotorTorqueReq".to_string(),
            status_message: "VehicleStatus".to_string(),
            speed_signal: "VehSpeed".to_string(),
            torque_actual_signal: "MotorTorqueAct".to_string(),
            soc_signal: "BatterySoC".to_string(),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOutput {
    #[serde(default = "default_plot_stride")]
    plot_stride_s: f64,
}

impl Default for RawOutput {
    fn default() -> Self {
        RawOutput { plot_stride_s: default_plot_stride() }
    }
}

fn default_plot_stride() -> f64 {
    0.01
}

/// Unit conversion from the internal representation to a signal's declared
/// unit. Internal units: speed m/s, torque Nm, state of charge as fraction.
fn unit_scale(role: &str, unit: &str) -> Result<f64, ConfigError> {
    match (role, unit) {
        ("speed", "m/s") => Ok(1.0),
        ("speed", "km/h") => Ok(3.6),
        ("torque", "Nm") | ("torque", "") => Ok(1.0),
        ("soc", "%") => Ok(100.0),
        ("soc", "") => Ok(1.0),
        _ => Err(invalid(format!(
            "unsupported unit '{unit}' for the {role} signal"
        ))),
    }
}

/// Resolved signal mapping: database keys plus unit scale factors.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalMap {
    pub torque_key: u32,
    pub torque_signal: String,
    pub status_key: u32,
    pub speed_signal: String,
    pub speed_scale: f64,
    pub torque_actual_signal: String,
    pub soc_signal: String,
    pub soc_scale: f64,
}

impl SignalMap {
    fn resolve(names: &SignalNames, db: &Database) -> Result<SignalMap, ConfigError> {
        let lookup = |name: &str| -> Result<u32, ConfigError> {
            MessageRef::Named(name.to_string())
                .resolve(db)
                .ok_or_else(|| invalid(format!("message '{name}' not found in database")))
        };
        let torque_key = lookup(&names.torque_message)?;
        let status_key = lookup(&names.status_message)?;
        let signal = |key: u32, sig: &str| -> Result<String, ConfigError> {
            let msg = db.message_by_key(key).expect("key was resolved above");
            msg.signal(sig)
                .map(|s| s.unit.clone())
                .ok_or_else(|| {
                    invalid(format!("signal '{sig}' not found in message '{}'", msg.name))
                })
        };
        let _ = signal(torque_key, &names.torque_signal)
            .and_then(|unit| unit_scale("torque", &unit))?;
        let speed_unit = signal(status_key, &names.speed_signal)?;
        let torque_act_unit = signal(status_key, &names.torque_actual_signal)?;
        unit_scale("torque", &torque_act_unit)?;
        let soc_unit = signal(status_key, &names.soc_signal)?;
        Ok(SignalMap {
            torque_key,
            torque_signal: names.torque_signal.clone(),
            status_key,
            speed_signal: names.speed_signal.clone(),
            speed_scale: unit_scale("speed", &speed_unit)?,
            torque_actual_signal: names.torque_actual_signal.clone(),
            soc_signal: names.soc_signal.clone(),
            soc_scale: unit_scale("soc", &soc_unit)?,
        })
    }
}

/// A fully resolved, validated scenario, ready to run.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub db: Database,
    pub bus: BusConfig,
    pub vehicle: VehicleParams,
    pub gains: ControllerGains,
    pub reference: Reference,
    pub attacks: Vec<AttackSpec>,
    pub coupling: Coupling,
    pub dt_s: f64,
    pub duration_s: f64,
    pub initial_speed_mps: f64,
    pub initial_soc: f64,
    pub signals: SignalMap,
    pub plot_stride_s: f64,
}

/// Load and validate a scenario configuration (TOML), applying dotted-path
/// overrides like `attacks.0.amplitude=-30`. Relative paths inside the file
/// resolve against the file's directory.
pub fn load_config(path: &Path, overrides: &[String]) -> Result<Scenario, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    load_config_str(&text, base, overrides).map_err(|e| match e {
        // Attribute bare parse errors to the file.
        ConfigError::Toml { path: p, message } if p.as_os_str().is_empty() => {
            ConfigError::Toml { path: path.to_path_buf(), message }
        }
        other => other,
    })
}

/// [`load_config`] on in-memory TOML text.
pub fn load_config_str(
    text: &str,
    base_dir: &Path,
    overrides: &[String],
) -> Result<Scenario, ConfigError> {
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Toml {
        path: PathBuf::new(),
        message: e.to_string(),
    })?;
    let mut value = toml::Value::Table(table);
    for entry in overrides {
        apply_override(&mut value, entry)?;
    }
    let raw: RawConfig = value.try_into().map_err(|e: toml::de::Error| ConfigError::Toml {
        path: PathBuf::new(),
        message: e.to_string(),
    })?;
    resolve(raw, base_dir)
}

/// Mutate one `key.path=value` override into a parsed TOML document. The
/// path must reference an existing key; the value is parsed as a TOML
/// literal, falling back to a plain string.
pub fn apply_override(root: &mut toml::Value, entry: &str) -> Result<(), ConfigError> {
    let err = |message: String| ConfigError::Override {
        entry: entry.to_string(),
        message,
    };
    let (path, raw_value) = entry
        .split_once('=')
        .ok_or_else(|| err("expected key.path=value".to_string()))?;
    let parsed: toml::Value = format!("v = {raw_value}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw_value.to_string()));

    let mut node = root;
    let segments: Vec<&str> = path.split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(err("empty path segment".to_string()));
    }
    for (i, seg) in segments.iter().enumerate() {
        let last = i == segments.len() - 1;
        match node {
            toml::Value::Table(table) => {
                let slot = table
                    .get_mut(*seg)
                    .ok_or_else(|| err(format!("unknown config key '{seg}'")))?;
                if last {
                    *slot = parsed;
                    return Ok(());
                }
                node = slot;
            }
            toml::Value::Array(array) => {
                let idx: usize = seg
                    .parse()
                    .map_err(|_| err(format!("'{seg}' is not an array index")))?;
                let len = array.len();
                let slot = array
                    .get_mut(idx)
                    .ok_or_else(|| err(format!("index {idx} out of bounds (len {len})")))?;
                if last {
                    *slot = parsed;
                    return Ok(());
                }
                node = slot;
            }
            _ => return Err(err(format!("'{seg}' does not index into a value"))),
        }
    }
    unreachable!("loop returns on the last segment");
}

fn resolve(raw: RawConfig, base_dir: &Path) -> Result<Scenario, ConfigError> {
    if !(raw.duration_s > 0.0) {
        return Err(invalid(format!("duration_s must be positive (got {})", raw.duration_s)));
    }
    if !(raw.dt_s > 0.0 && raw.dt_s <= raw.duration_s) {
        return Err(invalid(format!("dt_s must be in (0, duration] (got {})", raw.dt_s)));
    }
    if !(0.0..=1.0).contains(&raw.initial_soc) {
        return Err(invalid(format!("initial_soc must be in [0, 1] (got {})", raw.initial_soc)));
    }
    if raw.initial_speed_kmh < 0.0 {
        return Err(invalid(format!(
            "initial_speed_kmh must be non-negative (got {})",
            raw.initial_speed_kmh
        )));
    }
    raw.vehicle.validate()?;
    if !(raw.controller.kp.is_finite() && raw.controller.ki.is_finite())
        || raw.controller.kp < 0.0
        || raw.controller.ki < 0.0
    {
        return Err(invalid("controller gains must be finite and non-negative".to_string()));
    }
    if !(raw.output.plot_stride_s >= raw.dt_s) {
        return Err(invalid("output.plot_stride_s must be at least dt_s".to_string()));
    }

    let dbc_path = base_dir.join(&raw.dbc_path);
    let dbc_text = std::fs::read_to_string(&dbc_path).map_err(|source| ConfigError::Io {
        path: dbc_path.clone(),
        source,
    })?;
    let db = Database::parse(&dbc_text).map_err(|source| ConfigError::Dbc {
        path: dbc_path,
        source,
    })?;

    let reference = match raw.reference {
        RawReference::Cruise { setpoint_kmh } => {
            if setpoint_kmh < 0.0 {
                return Err(invalid("cruise setpoint_kmh must be non-negative".to_string()));
            }
            Reference::Cruise { setpoint_mps: setpoint_kmh / 3.6 }
        }
        RawReference::Cycle { cycle_path } => {
            let path = base_dir.join(&cycle_path);
            let text = std::fs::read_to_string(&path).map_err(|source| ConfigError::Io {
                path: path.clone(),
                source,
            })?;
            let cycle = DriveCycle::from_csv_str(&text)
                .map_err(|source| ConfigError::Cycle { path, source })?;
            Reference::Cycle(cycle)
        }
    };

    let signals = SignalMap::resolve(&raw.signals, &db)?;

    // Attack validation needs the database; windows must fit the run.
    let injector = Injector::new(raw.attacks.clone(), &db)?;
    for spec in injector.specs() {
        if spec.t_start_s < 0.0 || spec.t_end_s > raw.duration_s {
            return Err(invalid(format!(
                "attack '{}' window [{}, {}) exceeds [0, {}]",
                spec.attack_id, spec.t_start_s, spec.t_end_s, raw.duration_s
            )));
        }
    }

    if !(raw.bus.bitrate_bps > 0.0) {
        return Err(invalid("bus.bitrate_bps must be positive".to_string()));
    }
    let mut schedules: BTreeMap<u32, f64> = BTreeMap::new();
    if raw.bus.schedules.is_empty() {
        schedules.insert(signals.torque_key, DEFAULT_TORQUE_PERIOD_S);
        schedules.insert(signals.status_key, DEFAULT_STATUS_PERIOD_S);
    } else {
        for (name, &period) in &raw.bus.schedules {
            if !(period > 0.0) {
                return Err(invalid(format!("schedule period for '{name}' must be positive")));
            }
            let key = MessageRef::Named(name.clone())
                .resolve(&db)
                .ok_or_else(|| invalid(format!("scheduled message '{name}' not found in database")))?;
            if schedules.insert(key, period).is_some() {
                return Err(invalid(format!("message '{name}' scheduled twice")));
            }
        }
    }
    // Only scheduled messages reach the wire; the control loop needs both.
    for (key, what) in [(signals.torque_key, "torque"), (signals.status_key, "status")] {
        if !schedules.contains_key(&key) {
            return Err(invalid(format!("the {what} message has no transmit schedule")));
        }
    }

    let bus = BusConfig {
        bitrate_bps: raw.bus.bitrate_bps,
        channel: raw.bus.channel,
        max_queue_depth: raw.bus.max_queue_depth,
        schedules,
    };

    Ok(Scenario {
        name: raw.name,
        db,
        bus,
        vehicle: raw.vehicle,
        gains: raw.controller,
        reference,
        attacks: raw.attacks,
        coupling: raw.coupling,
        dt_s: raw.dt_s,
        duration_s: raw.duration_s,
        initial_speed_mps: raw.initial_speed_kmh / 3.6,
        initial_soc: raw.initial_soc,
        signals,
        plot_stride_s: raw.output.plot_stride_s,
    })
}

// ---------------------------------------------------------------------------
// Simulation
// ---------------------------------------------------------------------------

#[derive(Debug, Error)]
pub enum SimulationError {
    #[error("{scenario}: {source}")]
    Bus {
        scenario: String,
        #[source]
        source: BusError,
    },
    #[error("{scenario}: replay command trace has {got} entries, expected {expected}")]
    ReplayLength {
        scenario: String,
        expected: usize,
        got: usize,
    },
}

/// One per-step sample of every continuous channel, on the dt grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub t: f64,
    pub reference_mps: f64,
    pub speed_mps: f64,
    /// ZOH-held controller command (pre-injection).
    pub torque_request_clean_nm: f64,
    /// ZOH-held wire value (post-injection).
    pub torque_request_dirty_nm: f64,
    /// Torque the plant applied over the step ending at t.
    pub torque_applied_nm: f64,
    pub soc: f64,
    /// An encode clamped to a signal's range while packing at this step.
    pub encode_saturated: bool,
}

/// Everything one run produces.
#[derive(Debug, Clone)]
pub struct SimulationTrace {
    pub scenario_name: String,
    pub coupling: Coupling,
    pub attacked: bool,
    pub dt_s: f64,
    pub duration_s: f64,
    pub channel_name: String,
    pub frames: Vec<TimedFrame>,
    pub steps: Vec<StepRecord>,
    /// Controller output per step, pre-ZOH; the replay input.
    pub commands: Vec<f64>,
    /// Offered bus load fraction from the closed-form frame length.
    pub bus_load: f64,
    pub bus_peak_depth: usize,
    pub encode_saturation_count: u64,
}

impl SimulationTrace {
    pub fn attack_frame_count(&self) -> usize {
        self.frames.iter().filter(|f| f.label.is_attack()).count()
    }

    pub fn frame_count_for(&self, key: u32) -> usize {
        self.frames.iter().filter(|f| f.frame.key() == key).count()
    }
}

struct RunOutput {
    frames: Vec<TimedFrame>,
    steps: Vec<StepRecord>,
    commands: Vec<f64>,
    bus_peak_depth: usize,
    encode_saturation_count: u64,
}

/// Core loop shared by benign and attacked runs. `injector` is empty for
/// benign runs; `replay` carries the benign command trace in
/// replay-counterfactual mode.
fn simulate(
    s: &Scenario,
    injector: &Injector,
    replay: Option<&[f64]>,
) -> Result<RunOutput, SimulationError> {
    let dt = s.dt_s;
    let steps_total = (s.duration_s / dt).round() as usize;
    if let Some(r) = replay {
        if r.len() != steps_total {
            return Err(SimulationError::ReplayLength {
                scenario: s.name.clone(),
                expected: steps_total,
                got: r.len(),
            });
        }
    }

    let torque_msg = s
        .db
        .message_by_key(s.signals.torque_key)
        .expect("validated at load");
    let status_msg = s
        .db
        .message_by_key(s.signals.status_key)
        .expect("validated at load");

    // Signal-value buffers reused across packs (no per-pack allocation).
    let mut torque_values: BTreeMap<String, f64> = torque_msg
        .signals
        .iter()
        .map(|sig| (sig.name.clone(), 0.0))
        .collect();
    let mut status_values: BTreeMap<String, f64> = status_msg
        .signals
        .iter()
        .map(|sig| (sig.name.clone(), 0.0))
        .collect();

    let mut state = VehicleState::moving(&s.vehicle, s.initial_speed_mps, s.initial_soc);
    let mut ctrl = ControllerState::new(s.reference.mode());
    let mut bus_sim = frames::BusSim::new(&s.bus);

    let mut clean_held = 0.0f64;
    let mut dirty_held = 0.0f64;
    let mut plant_torque = 0.0f64;
    // Torque frames in transmission: (completion time, decoded value).
    let mut in_flight: std::collections::VecDeque<(f64, f64)> = Default::default();
    let mut emitted: Vec<Emitted> = Vec::new();

    let mut out = RunOutput {
        frames: Vec::with_capacity(steps_total / 8),
        steps: Vec::with_capacity(steps_total),
        commands: Vec::with_capacity(steps_total),
        bus_peak_depth: 0,
        encode_saturation_count: 0,
    };

    for i in 0..steps_total {
        let t = i as f64 * dt;

        // 1. Deliver completed torque transmissions.
        while in_flight.front().is_some_and(|&(done, _)| done <= t) {
            plant_torque = in_flight.pop_front().expect("peeked above").1;
        }

        // 2. Reference and command.
        let reference = s.reference.speed_at(t);
        let command = match replay {
            Some(cmds) => cmds[i],
            None => controller_command(reference, state.speed_mps, &mut ctrl, &s.gains, dt, &s.vehicle),
        };
        out.commands.push(command);

        // 3 + 4. Fire due schedules (sample, inject, pack) and drain the bus.
        let mut saturated_now = false;
        emitted.clear();
        let torque_key = s.signals.torque_key;
        let status_key = s.signals.status_key;
        let pack = |key: u32| {
            if key == torque_key {
                clean_held = command;
                dirty_held = injector.apply(clean_held, key, &s.signals.torque_signal, t);
                *torque_values
                    .get_mut(&s.signals.torque_signal)
                    .expect("buffer covers all signals") = dirty_held;
                let packed = torque_msg.pack(&torque_values)?;
                saturated_now |= packed.saturated;
                let frame = crate::frames::CanFrame {
                    id: torque_msg.id,
                    extended: torque_msg.extended,
                    payload: packed.payload,
                };
                Ok((frame, injector.label(key, t)))
            } else if key == status_key {
                *status_values
                    .get_mut(&s.signals.speed_signal)
                    .expect("buffer covers all signals") = state.speed_mps * s.signals.speed_scale;
                *status_values
                    .get_mut(&s.signals.torque_actual_signal)
                    .expect("buffer covers all signals") = state.torque_applied_nm;
                *status_values
                    .get_mut(&s.signals.soc_signal)
                    .expect("buffer covers all signals") = state.soc * s.signals.soc_scale;
                let packed = status_msg.pack(&status_values)?;
                saturated_now |= packed.saturated;
                let frame = crate::frames::CanFrame {
                    id: status_msg.id,
                    extended: status_msg.extended,
                    payload: packed.payload,
                };
                Ok((frame, injector.label(key, t)))
            } else {
                unreachable!("only mapped messages are scheduled (validated at load)")
            }
        };
        bus_sim
            .step(t, t + dt, pack, &mut emitted)
            .map_err(|source| SimulationError::Bus {
                scenario: s.name.clone(),
                source,
            })?;
        for e in emitted.drain(..) {
            if e.frame.frame.key() == torque_key {
                let decoded = torque_msg
                    .unpack_signal(&s.signals.torque_signal, &e.frame.frame.payload)
                    .expect("packed by the same spec");
                in_flight.push_back((e.completed_at, decoded));
            }
            out.frames.push(e.frame);
        }
        out.encode_saturation_count += saturated_now as u64;

        // 5. Record channels at t, then step plant and battery to t + dt.
        out.steps.push(StepRecord {
            t,
            reference_mps: reference,
            speed_mps: state.speed_mps,
            torque_request_clean_nm: clean_held,
            torque_request_dirty_nm: dirty_held,
            torque_applied_nm: state.torque_applied_nm,
            soc: state.soc,
            encode_saturated: saturated_now,
        });
        state = step_vehicle(&state, plant_torque, dt, &s.vehicle);
        state.soc = battery_step(
            state.soc,
            state.torque_applied_nm,
            state.motor_speed_radps,
            dt,
            &s.vehicle,
        );
    }

    out.bus_peak_depth = bus_sim.bus.peak_depth();
    Ok(out)
}

fn into_trace(s: &Scenario, attacked: bool, run: RunOutput) -> SimulationTrace {
    let bus_load = frames::bus_load_with_dlc(
        &s.bus.schedules,
        |key| s.db.message_by_key(key).map(|m| m.dlc).unwrap_or(8),
        s.bus.bitrate_bps,
    );
    SimulationTrace {
        scenario_name: s.name.clone(),
        coupling: s.coupling,
        attacked,
        dt_s: s.dt_s,
        duration_s: s.duration_s,
        channel_name: s.bus.channel.clone(),
        frames: run.frames,
        steps: run.steps,
        commands: run.commands,
        bus_load,
        bus_peak_depth: run.bus_peak_depth,
        encode_saturation_count: run.encode_saturation_count,
    }
}

/// A benign run plus, when attacks are configured, the attacked run.
pub struct RunPair {
    pub benign: SimulationTrace,
    pub attacked: Option<SimulationTrace>,
}

/// Run the scenario: always the benign baseline first, then the attacked
/// run when attacks are configured (replaying the baseline's commands in
/// replay-counterfactual coupling).
pub fn run_with_baseline(s: &Scenario) -> Result<RunPair, SimulationError> {
    let empty = Injector::new(Vec::new(), &s.db).expect("empty set always validates");
    let benign = into_trace(s, false, simulate(s, &empty, None)?);
    if s.attacks.is_empty() {
        return Ok(RunPair { benign, attacked: None });
    }
    let injector = Injector::new(s.attacks.clone(), &s.db).expect("validated at load");
    let replay = match s.coupling {
        Coupling::ReplayCounterfactual => Some(benign.commands.as_slice()),
        Coupling::ClosedLoop => None,
    };
    let attacked = into_trace(s, true, simulate(s, &injector, replay)?);
    Ok(RunPair { benign, attacked: Some(attacked) })
}

/// The trace of record for a config: the attacked run when attacks are
/// configured, the benign run otherwise.
pub fn run_scenario(s: &Scenario) -> Result<SimulationTrace, SimulationError> {
    let pair = run_with_baseline(s)?;
    Ok(pair.attacked.unwrap_or(pair.benign))
}

// ---------------------------------------------------------------------------
// Run comparison
// ---------------------------------------------------------------------------

#[derive(Debug, Error, PartialEq)]
pub enum CompareError {
    #[error("traces have mismatched grids ({0} vs {1} steps)")]
    GridLength(usize, usize),
    #[error("traces have mismatched step sizes ({0} vs {1})")]
    GridStep(f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChannelDeviation {
    pub channel: String,
    pub max_abs: f64,
    pub mean_abs: f64,
}

/// Run-length-encoded sample series: `value` holds on [t_from, t_to).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OffsetSegment {
    pub t_from: f64,
    pub t_to: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DivergenceReport {
    pub channels: Vec<ChannelDeviation>,
    /// First grid instant where any channel differs bit-for-bit.
    pub first_divergence_time: Option<f64>,
    /// Attacked-minus-benign wire torque, run-length encoded on the grid.
    pub torque_offset_segments: Vec<OffsetSegment>,
}

fn channel_views(r: &StepRecord) -> [(&'static str, f64); 5] {
    [
        ("speed_mps", r.speed_mps),
        ("torque_request_clean_nm", r.torque_request_clean_nm),
        ("torque_request_dirty_nm", r.torque_request_dirty_nm),
        ("torque_applied_nm", r.torque_applied_nm),
        ("soc", r.soc),
    ]
}

/// Per-channel deviation statistics, first divergence instant, and the
/// attacked-minus-benign torque offset series.
pub fn compare_runs(
    benign: &SimulationTrace,
    attacked: &SimulationTrace,
) -> Result<DivergenceReport, CompareError> {
    if benign.steps.len() != attacked.steps.len() {
        return Err(CompareError::GridLength(benign.steps.len(), attacked.steps.len()));
    }
    if benign.dt_s != attacked.dt_s {
        return Err(CompareError::GridStep(benign.dt_s, attacked.dt_s));
    }

    let names: Vec<&'static str> = channel_views(&StepRecord {
        t: 0.0,
        reference_mps: 0.0,
        speed_mps: 0.0,
        torque_request_clean_nm: 0.0,
        torque_request_dirty_nm: 0.0,
        torque_applied_nm: 0.0,
        soc: 0.0,
        encode_saturated: false,
    })
    .iter()
    .map(|&(n, _)| n)
    .collect();
    let mut max_abs = vec![0.0f64; names.len()];
    let mut sum_abs = vec![0.0f64; names.len()];
    let mut first_divergence_time = None;
    let mut segments: Vec<OffsetSegment> = Vec::new();

    for (i, (b, a)) in benign.steps.iter().zip(&attacked.steps).enumerate() {
        let bv = channel_views(b);
        let av = channel_views(a);
        for (k, (&(_, x), &(_, y))) in bv.iter().zip(av.iter()).enumerate() {
            let d = (y - x).abs();
            if d > max_abs[k] {
                max_abs[k] = d;
            }
            sum_abs[k] += d;
            if first_divergence_time.is_none() && x.to_bits() != y.to_bits() {
                first_divergence_time = Some(b.t);
            }
        }
        // Segment bounds on the exact index grid keep neighbours contiguous.
        let t_to = (i + 1) as f64 * benign.dt_s;
        let offset = a.torque_request_dirty_nm - b.torque_request_dirty_nm;
        match segments.last_mut() {
            Some(seg) if seg.value == offset => seg.t_to = t_to,
            _ => segments.push(OffsetSegment { t_from: b.t, t_to, value: offset }),
        }
    }

    let n = benign.steps.len().max(1) as f64;
    let channels = names
        .iter()
        .enumerate()
        .map(|(k, &name)| ChannelDeviation {
            channel: name.to_string(),
            max_abs: max_abs[k],
            mean_abs: sum_abs[k] / n,
        })
        .collect();
    Ok(DivergenceReport {
        channels,
        first_divergence_time,
        torque_offset_segments: segments,
    })
}
