//! Attack waveform construction and injection onto a targeted CAN signal.
//!
//! The injection point sits after the controller and after zero-order-hold
//! sampling, immediately before the value is packed into a frame: the
//! attacker owns the wire value. Outside its window an attack is a literal
//! no-op — the clean value passes through bit-for-bit.

use std::f64::consts::TAU;

use serde::Deserialize;
use thiserror::Error;

use crate::candb::Database;
use crate::frames::Label;

/// A message referenced either by name or by raw identifier (extended ids
/// carry bit 31, as in the database key).
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum MessageRef {
    Id(u32),
    Named(String),
}

impl MessageRef {
    /// Resolve to a database key. String forms `0x...` and all-decimal are
    /// treated as identifiers, anything else as a message name.
    pub fn resolve(&self, db: &Database) -> Option<u32> {
        match self {
            MessageRef::Id(id) => db.message_by_key(*id).map(|m| m.key()),
            MessageRef::Named(s) => {
                if let Some(hex) = s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
                    u32::from_str_radix(hex, 16)
                        .ok()
                        .and_then(|id| db.message_by_key(id))
                        .map(|m| m.key())
                } else if s.chars().all(|c| c.is_ascii_digit()) && !s.is_empty() {
                    s.parse::<u32>()
                        .ok()
                        .and_then(|id| db.message_by_key(id))
                        .map(|m| m.key())
                } else {
                    db.message_by_name(s).map(|m| m.key())
                }
            }
        }
    }
}

impl std::fmt::Display for MessageRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MessageRef::Id(id) => write!(f, "{id:#x}"),
            MessageRef::Named(s) => write!(f, "{s}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WaveformKind {
    Step,
    Sine,
    Ramp,
    Pulse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectionMode {
    #[default]
    Additive,
    Override,
}

/// One injected waveform targeting one signal inside a time window.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    pub attack_id: String,
    pub target_message: MessageRef,
    pub target_signal: String,
    pub waveform: WaveformKind,
    /// Physical units of the target signal (Nm for a torque signal).
    pub amplitude: f64,
    /// Required for sine and pulse.
    #[serde(default)]
    pub frequency_hz: Option<f64>,
    /// Pulse on-fraction per period, 0..=1. Required for pulse.
    #[serde(default)]
    pub duty: Option<f64>,
    pub t_start_s: f64,
    pub t_end_s: f64,
    #[serde(default)]
    pub mode: InjectionMode,
}

#[derive(Debug, Error, PartialEq)]
pub enum AttackError {
    #[error("attack '{attack_id}': window [{t_start}, {t_end}) is empty or inverted")]
    Window {
        attack_id: String,
        t_start: f64,
        t_end: f64,
    },
    #[error("attack '{attack_id}': target message '{target}' not found in database")]
    UnknownMessage { attack_id: String, target: String },
    #[error("attack '{attack_id}': signal '{signal}' not found in message '{message}'")]
    UnknownSignal {
        attack_id: String,
        message: String,
        signal: String,
    },
    #[error("attack '{attack_id}': {waveform:?} waveform requires frequency_hz > 0")]
    Frequency {
        attack_id: String,
        waveform: WaveformKind,
    },
    #[error("attack '{attack_id}': pulse duty must be within [0, 1] (got {duty})")]
    Duty { attack_id: String, duty: f64 },
    #[error("attack '{attack_id}': amplitude must be finite")]
    Amplitude { attack_id: String },
    #[error("duplicate attack_id '{attack_id}'")]
    DuplicateId { attack_id: String },
}

impl AttackSpec {
    /// The attack window is half-open: active for t_start <= t < t_end.
    pub fn is_active(&self, t: f64) -> bool {
        t >= self.t_start_s && t < self.t_end_s
    }

    /// Waveform sample at `t`; zero outside the window.
    pub fn waveform_value(&self, t: f64) -> f64 {
        if !self.is_active(t) {
            return 0.0;
        }
        let elapsed = t - self.t_start_s;
        match self.waveform {
            WaveformKind::Step => self.amplitude,
            WaveformKind::Sine => {
                let f = self.frequency_hz.unwrap_or(0.0);
                self.amplitude * (TAU * f * elapsed).sin()
            }
            WaveformKind::Ramp => {
                self.amplitude * elapsed / (self.t_end_s - self.t_start_s)
            }
            WaveformKind::Pulse => {
                let f = self.frequency_hz.unwrap_or(0.0);
                let phase = f * elapsed;
                let frac = phase - phase.floor();
                if frac < self.duty.unwrap_or(0.0) {
                    self.amplitude
                } else {
                    0.0
                }
            }
        }
    }

    fn validate_shape(&self) -> Result<(), AttackError> {
        if !(self.t_start_s < self.t_end_s) {
            return Err(AttackError::Window {
                attack_id: self.attack_id.clone(),
                t_start: self.t_start_s,
                t_end: self.t_end_s,
            });
        }
        if !self.amplitude.is_finite() {
            return Err(AttackError::Amplitude {
                attack_id: self.attack_id.clone(),
            });
        }
        match self.waveform {
            WaveformKind::Sine | WaveformKind::Pulse => {
                if !self.frequency_hz.map_or(false, |f| f > 0.0 && f.is_finite()) {
                    return Err(AttackError::Frequency {
                        attack_id: self.attack_id.clone(),
                        waveform: self.waveform,
                    });
                }
                if self.waveform == WaveformKind::Pulse {
                    let duty = self.duty.unwrap_or(-1.0);
                    if !(0.0..=1.0).contains(&duty) {
                        return Err(AttackError::Duty {
                            attack_id: self.attack_id.clone(),
                            duty,
                        });
                    }
                }
            }
            WaveformKind::Step | WaveformKind::Ramp => {}
        }
        Ok(())
    }
}

fn inject_iter<'a>(
    clean_value: f64,
    specs: impl Iterator<Item = &'a AttackSpec>,
    t: f64,
) -> (f64, Vec<&'a str>) {
    let mut active: Vec<&str> = Vec::new();
    // Accumulate in list order so applying {A} then {B} is bit-identical to
    // applying [A, B] in one pass.
    let mut dirty = clean_value;
    let mut override_value = None;
    for spec in specs {
        if !spec.is_active(t) {
            continue;
        }
        active.push(&spec.attack_id);
        match spec.mode {
            InjectionMode::Additive => dirty += spec.waveform_value(t),
            InjectionMode::Override => override_value = Some(spec.waveform_value(t)),
        }
    }
    if active.is_empty() {
        return (clean_value, active);
    }
    if let Some(v) = override_value {
        dirty = v;
    }
    (dirty, active)
}

/// Sum all active specs onto `clean` (override specs replace the value
/// instead, last one in list order winning). Returns the dirty value and the
/// ids of every spec whose window contains `t`, in list order.
///
/// All specs are assumed to target the same signal. With no active spec the
/// clean value is returned untouched, bit for bit.
pub fn apply_injection<'a>(
    clean_value: f64,
    specs: &'a [AttackSpec],
    t: f64,
) -> (f64, Vec<&'a str>) {
    inject_iter(clean_value, specs.iter(), t)
}

/// Validated attack set with targets resolved against a database.
#[derive(Debug, Clone)]
pub struct Injector {
    specs: Vec<AttackSpec>,
    /// Database key of each spec's target message, same order as `specs`.
    target_keys: Vec<u32>,
}

impl Injector {
    pub fn new(specs: Vec<AttackSpec>, db: &Database) -> Result<Injector, AttackError> {
        let mut target_keys = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            spec.validate_shape()?;
            if specs[..i].iter().any(|s| s.attack_id == spec.attack_id) {
                return Err(AttackError::DuplicateId {
                    attack_id: spec.attack_id.clone(),
                });
            }
            let key = spec.target_message.resolve(db).ok_or_else(|| {
                AttackError::UnknownMessage {
                    attack_id: spec.attack_id.clone(),
                    target: spec.target_message.to_string(),
                }
            })?;
            let msg = db.message_by_key(key).expect("resolve returned a valid key");
            if msg.signal(&spec.target_signal).is_none() {
                return Err(AttackError::UnknownSignal {
                    attack_id: spec.attack_id.clone(),
                    message: msg.name.clone(),
                    signal: spec.target_signal.clone(),
                });
            }
            target_keys.push(key);
        }
        Ok(Injector { specs, target_keys })
    }

    pub fn specs(&self) -> &[AttackSpec] {
        &self.specs
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    /// Latest attack window end, for config validation.
    pub fn window_end(&self) -> Option<f64> {
        self.specs
            .iter()
            .map(|s| s.t_end_s)
            .max_by(|a, b| a.total_cmp(b))
    }

    /// Inject into the value of `signal` of the message keyed `key`, sampled
    /// at `t`. Specs targeting other signals pass the value through.
    pub fn apply(&self, clean_value: f64, key: u32, signal: &str, t: f64) -> f64 {
        let targeted = self
            .specs
            .iter()
            .zip(&self.target_keys)
            .filter(|(spec, &k)| k == key && spec.target_signal == signal)
            .map(|(spec, _)| spec);
        inject_iter(clean_value, targeted, t).0
    }

    /// Label for a frame of message `key` whose signal values were sampled
    /// at `t_sample`: attack when any spec targeting that message is active,
    /// carrying the lexicographically first such attack_id.
    pub fn label(&self, key: u32, t_sample: f64) -> Label {
        self.specs
            .iter()
            .zip(&self.target_keys)
            .filter(|(spec, &k)| k == key && spec.is_active(t_sample))
            .map(|(spec, _)| spec.attack_id.as_str())
            .min()
            .map(|id| Label::Attack {
                attack_id: id.to_string(),
            })
            .unwrap_or(Label::Benign)
    }
}

/// Label a frame occurrence given the full spec list — see
/// [`Injector::label`] for the rule.
pub fn label_frame(key: u32, specs: &[AttackSpec], db: &Database, t_sample: f64) -> Label {
    specs
        .iter()
        .filter(|spec| {
            spec.target_message.resolve(db) == Some(key) && spec.is_active(t_sample)
        })
        .map(|spec| spec.attack_id.as_str())
        .min()
        .map(|id| Label::Attack {
            attack_id: id.to_string(),
        })
        .unwrap_or(Label::Benign)
}
