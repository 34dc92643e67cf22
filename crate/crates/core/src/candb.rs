//! Restricted DBC database parser and CAN signal codec.
//!
//! The supported grammar is the line-oriented subset that carries message and
//! signal layout:
//!
//! ```text
//! VERSION "<string>"
//! BO_ <decimal id> <name>: <dlc> <sender>
//!  SG_ <name> : <start>|<len>@<endian><sign> (<factor>,<offset>) [<min>|<max>] "<unit>" <receivers>
//! ```
//!
//! `<endian>` is `1` (Intel / little-endian, start bit is the LSB position) or
//! `0` (Motorola / big-endian, start bit is the MSB position); `<sign>` is `+`
//! (unsigned) or `-` (signed). Every other line kind (`CM_`, `BA_`, `VAL_`,
//! node lists, ...) is skipped and recorded as a diagnostic.

use std::collections::BTreeMap;
use std::fmt;

use serde::Deserialize;
use thiserror::Error;

/// Bit numbering: bit `k` of payload byte `b` sits at flat position `b * 8 + k`,
/// with `k = 0` the least significant bit of the byte.
pub type BitPos = u16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ByteOrder {
    LittleEndian,
    BigEndian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Signedness {
    Unsigned,
    Signed,
}

/// Errors shared by the signal codec (encode/decode/pack/unpack).
#[derive(Debug, Error, PartialEq)]
pub enum CodecError {
    #[error("cannot encode NaN for signal '{signal}'")]
    NanValue { signal: String },
    #[error("no value supplied for signal '{signal}'")]
    MissingValue { signal: String },
    #[error("payload length {got} does not match dlc {expected}")]
    PayloadLength { expected: usize, got: usize },
    #[error("unknown signal '{signal}'")]
    UnknownSignal { signal: String },
}

/// One physical signal and its bit-level layout inside a message payload.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalSpec {
    pub name: String,
    pub start_bit: BitPos,
    pub bit_length: u16,
    pub byte_order: ByteOrder,
    pub signedness: Signedness,
    /// Physical units per raw count (never zero).
    pub factor: f64,
    /// Physical offset: `phys = raw * factor + offset`.
    pub offset: f64,
    pub min: f64,
    pub max: f64,
    pub unit: String,
}

/// Result of encoding one physical value: the raw counter plus whether the
/// input had to be clamped to the representable range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Encoded {
    pub raw: i64,
    pub saturated: bool,
}

impl SignalSpec {
    /// Smallest raw value representable in `bit_length`/`signedness`.
    pub fn raw_min(&self) -> i64 {
        match self.signedness {
            Signedness::Unsigned => 0,
            Signedness::Signed => {
                if self.bit_length >= 64 {
                    i64::MIN
                } else {
                    -(1i64 << (self.bit_length - 1))
                }
            }
        }
    }

    /// Largest raw value representable in `bit_length`/`signedness`.
    ///
    /// A 64-bit unsigned signal is capped at `i64::MAX`; the factor/offset
    /// arithmetic runs in `f64`, which has lost integer resolution long
    /// before that point.
    pub fn raw_max(&self) -> i64 {
        match self.signedness {
            Signedness::Unsigned => {
                if self.bit_length >= 63 {
                    i64::MAX
                } else {
                    (1i64 << self.bit_length) - 1
                }
            }
            Signedness::Signed => {
                if self.bit_length >= 64 {
                    i64::MAX
                } else {
                    (1i64 << (self.bit_length - 1)) - 1
                }
            }
        }
    }

    /// `phys = raw * factor + offset`.
    pub fn decode(&self, raw: i64) -> f64 {
        raw as f64 * self.factor + self.offset
    }

    /// Inverse of [`decode`](Self::decode): `raw = round((phys - offset) / factor)`,
    /// round-half-away-from-zero, clamped to `[min, max]` first and to the
    /// representable raw range after. NaN is the only rejected input.
    pub fn encode(&self, phys: f64) -> Result<Encoded, CodecError> {
        if phys.is_nan() {
            return Err(CodecError::NanValue {
                signal: self.name.clone(),
            });
        }
        let clamped = phys.clamp(self.min, self.max);
        let mut saturated = clamped != phys;
        // f64::round is round-half-away-from-zero.
        let ideal = ((clamped - self.offset) / self.factor).round();
        let raw = if ideal < self.raw_min() as f64 {
            saturated = true;
            self.raw_min()
        } else if ideal > self.raw_max() as f64 {
            saturated = true;
            self.raw_max()
        } else {
            ideal as i64
        };
        Ok(Encoded { raw, saturated })
    }

    /// Flat payload bit positions occupied by this signal, ordered from the
    /// value's LSB to its MSB.
    ///
    /// Little-endian walks upward from `start_bit`. Big-endian starts at the
    /// MSB (`start_bit`), steps down within the byte and continues at bit 7
    /// of the following byte; reversing that walk yields LSB-first order.
    pub fn bit_positions(&self) -> Vec<BitPos> {
        let len = self.bit_length as usize;
        match self.byte_order {
            ByteOrder::LittleEndian => (0..len).map(|k| self.start_bit + k as BitPos).collect(),
            ByteOrder::BigEndian => {
                let mut msb_first = Vec::with_capacity(len);
                let mut pos = self.start_bit;
                for _ in 0..len {
                    msb_first.push(pos);
                    pos = if pos % 8 == 0 { pos + 15 } else { pos - 1 };
                }
                msb_first.reverse();
                msb_first
            }
        }
    }

    fn write_raw(&self, raw: i64, payload: &mut [u8]) {
        let pattern = raw as u64;
        for (k, pos) in self.bit_positions().into_iter().enumerate() {
            let bit = (pattern >> k) & 1;
            let byte = (pos / 8) as usize;
            let shift = pos % 8;
            payload[byte] = (payload[byte] & !(1 << shift)) | ((bit as u8) << shift);
        }
    }

    fn read_raw(&self, payload: &[u8]) -> i64 {
        let mut pattern: u64 = 0;
        for (k, pos) in self.bit_positions().into_iter().enumerate() {
            let byte = (pos / 8) as usize;
            let shift = pos % 8;
            let bit = ((payload[byte] >> shift) & 1) as u64;
            pattern |= bit << k;
        }
        match self.signedness {
            Signedness::Unsigned => pattern as i64,
            Signedness::Signed => {
                // Sign-extend from bit_length.
                let shift = 64 - self.bit_length as u32;
                ((pattern << shift) as i64) >> shift
            }
        }
    }
}

/// One CAN message: identifier, layout, and its ordered signals.
#[derive(Debug, Clone, PartialEq)]
pub struct MessageSpec {
    /// Plain identifier (11-bit for standard, 29-bit for extended frames).
    pub id: u32,
    pub extended: bool,
    pub name: String,
    pub dlc: u8,
    pub sender: String,
    pub signals: Vec<SignalSpec>,
}

/// Payload produced by [`MessageSpec::pack`] plus an aggregate saturation flag.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Packed {
    pub payload: Vec<u8>,
    pub saturated: bool,
}

impl MessageSpec {
    /// Lookup key used by [`Database`]: the raw DBC identifier, where
    /// extended frames carry bit 31.
    pub fn key(&self) -> u32 {
        if self.extended {
            self.id | EXTENDED_FLAG
        } else {
            self.id
        }
    }

    pub fn signal(&self, name: &str) -> Option<&SignalSpec> {
        self.signals.iter().find(|s| s.name == name)
    }

    /// Bitmask of payload bits covered by any signal.
    pub fn occupied_bits(&self) -> u64 {
        let mut mask = 0u64;
        for sig in &self.signals {
            for pos in sig.bit_positions() {
                mask |= 1 << pos;
            }
        }
        mask
    }

    /// Encode every signal into a fresh payload of `dlc` bytes. Unoccupied
    /// bits are zero. `values` must cover every signal of the message.
    pub fn pack(&self, values: &BTreeMap<String, f64>) -> Result<Packed, CodecError> {
        let mut payload = vec![0u8; self.dlc as usize];
        let mut saturated = false;
        for sig in &self.signals {
            let phys = *values
                .get(&sig.name)
                .ok_or_else(|| CodecError::MissingValue {
                    signal: sig.name.clone(),
                })?;
            let enc = sig.encode(phys)?;
            saturated |= enc.saturated;
            sig.write_raw(enc.raw, &mut payload);
        }
        Ok(Packed { payload, saturated })
    }

    /// Decode every signal from a payload of exactly `dlc` bytes.
    pub fn unpack(&self, payload: &[u8]) -> Result<BTreeMap<String, f64>, CodecError> {
        if payload.len() != self.dlc as usize {
            return Err(CodecError::PayloadLength {
                expected: self.dlc as usize,
                got: payload.len(),
            });
        }
        Ok(self
            .signals
            .iter()
            .map(|sig| (sig.name.clone(), sig.decode(sig.read_raw(payload))))
            .collect())
    }

    /// Decode a single signal by name.
    pub fn unpack_signal(&self, name: &str, payload: &[u8]) -> Result<f64, CodecError> {
        if payload.len() != self.dlc as usize {
            return Err(CodecError::PayloadLength {
                expected: self.dlc as usize,
                got: payload.len(),
            });
        }
        let sig = self.signal(name).ok_or_else(|| CodecError::UnknownSignal {
            signal: name.to_string(),
        })?;
        Ok(sig.decode(sig.read_raw(payload)))
    }
}

pub const EXTENDED_FLAG: u32 = 0x8000_0000;
pub const MAX_STANDARD_ID: u32 = 0x7FF;
pub const MAX_EXTENDED_ID: u32 = 0x1FFF_FFFF;

/// A line the parser skipped (unsupported or unknown line kind).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseDiagnostic {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for ParseDiagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

/// Parse or validation failure; each invariant violation is a distinct kind.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum DbcError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("line {line}: signals '{first}' and '{second}' overlap in message '{message}'")]
    Overlap {
        line: usize,
        message: String,
        first: String,
        second: String,
    },
    #[error("line {line}: signal '{signal}' exceeds the {dlc}-byte payload of message '{message}'")]
    DlcOverflow {
        line: usize,
        message: String,
        signal: String,
        dlc: u8,
    },
    #[error("line {line}: duplicate message id {id:#x}")]
    DuplicateId { line: usize, id: u32 },
    #[error("line {line}: duplicate name '{name}'")]
    DuplicateName { line: usize, name: String },
    #[error("line {line}: invalid signal '{signal}': {message}")]
    InvalidSignal {
        line: usize,
        signal: String,
        message: String,
    },
    #[error("line {line}: invalid message '{message}': {reason}")]
    InvalidMessage {
        line: usize,
        message: String,
        reason: String,
    },
}

/// The parsed database: messages keyed by raw identifier.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Database {
    pub version: String,
    messages: BTreeMap<u32, MessageSpec>,
    /// Skipped-line diagnostics collected while parsing.
    pub diagnostics: Vec<ParseDiagnostic>,
}

impl Database {
    /// Parse DBC text. Returns the database or the first error encountered;
    /// never panics, whatever the input.
    pub fn parse(text: &str) -> Result<Database, DbcError> {
        parse_dbc(text)
    }

    pub fn message(&self, id: u32, extended: bool) -> Option<&MessageSpec> {
        let key = if extended { id | EXTENDED_FLAG } else { id };
        self.messages.get(&key)
    }

    /// Lookup by raw key (extended flag in bit 31).
    pub fn message_by_key(&self, key: u32) -> Option<&MessageSpec> {
        self.messages.get(&key)
    }

    pub fn message_by_name(&self, name: &str) -> Option<&MessageSpec> {
        self.messages.values().find(|m| m.name == name)
    }

    /// Messages in ascending identifier order.
    pub fn messages(&self) -> impl Iterator<Item = &MessageSpec> {
        self.messages.values()
    }

    pub fn len(&self) -> usize {
        self.messages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty()
    }
}

/// Convenience free functions mirroring the codec entry points.
pub fn encode_signal(spec: &SignalSpec, phys: f64) -> Result<Encoded, CodecError> {
    spec.encode(phys)
}

pub fn decode_signal(spec: &SignalSpec, raw: i64) -> f64 {
    spec.decode(raw)
}

pub fn pack_message(msg: &MessageSpec, values: &BTreeMap<String, f64>) -> Result<Packed, CodecError> {
    msg.pack(values)
}

pub fn unpack_message(msg: &MessageSpec, payload: &[u8]) -> Result<BTreeMap<String, f64>, CodecError> {
    msg.unpack(payload)
}

// ---------------------------------------------------------------------------
// Parser
// ---------------------------------------------------------------------------

/// Cursor over one line, tracking the column for error reports.
struct Cursor<'a> {
    line: &'a str,
    line_no: usize,
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(line: &'a str, line_no: usize) -> Self {
        Cursor { line, line_no, pos: 0 }
    }

    fn rest(&self) -> &'a str {
        &self.line[self.pos..]
    }

    fn err(&self, message: impl Into<String>) -> DbcError {
        DbcError::Syntax {
            line: self.line_no,
            column: self.pos + 1,
            message: message.into(),
        }
    }

    fn skip_ws(&mut self) {
        let trimmed = self.rest().trim_start();
        self.pos = self.line.len() - trimmed.len();
    }

    fn expect(&mut self, c: char) -> Result<(), DbcError> {
        self.skip_ws();
        if self.rest().starts_with(c) {
            self.pos += c.len_utf8();
            Ok(())
        } else {
            Err(self.err(format!("expected '{c}'")))
        }
    }

    fn take_while(&mut self, pred: impl Fn(char) -> bool) -> &'a str {
        let rest = self.rest();
        let end = rest
            .char_indices()
            .find(|(_, c)| !pred(*c))
            .map(|(i, _)| i)
            .unwrap_or(rest.len());
        self.pos += end;
        &rest[..end]
    }

    fn ident(&mut self, what: &str) -> Result<&'a str, DbcError> {
        self.skip_ws();
        let s = self.take_while(|c| c.is_ascii_alphanumeric() || c == '_');
        if s.is_empty() {
            Err(self.err(format!("expected {what}")))
        } else {
            Ok(s)
        }
    }

    fn number_token(&mut self) -> &'a str {
        self.take_while(|c| {
            c.is_ascii_digit() || matches!(c, '-' | '+' | '.' | 'e' | 'E')
        })
    }

    fn parse_uint(&mut self, what: &str) -> Result<u64, DbcError> {
        self.skip_ws();
        let start = self.pos;
        let s = self.take_while(|c| c.is_ascii_digit());
        if s.is_empty() {
            return Err(self.err(format!("expected {what}")));
        }
        s.parse().map_err(|_| {
            self.pos = start;
            self.err(format!("{what} out of range"))
        })
    }

    fn parse_f64(&mut self, what: &str) -> Result<f64, DbcError> {
        self.skip_ws();
        let start = self.pos;
        let s = self.number_token();
        s.parse().map_err(|_| {
            self.pos = start;
            self.err(format!("expected {what}"))
        })
    }

    fn quoted(&mut self, what: &str) -> Result<&'a str, DbcError> {
        self.expect('"')?;
        let rest = self.rest();
        match rest.find('"') {
            Some(end) => {
                let s = &rest[..end];
                self.pos += end + 1;
                Ok(s)
            }
            None => Err(self.err(format!("unterminated {what} string"))),
        }
    }
}

/// Parse a restricted DBC database from text.
pub fn parse_dbc(text: &str) -> Result<Database, DbcError> {
    let mut db = Database::default();
    // (message, line the BO_ appeared on)
    let mut current: Option<(MessageSpec, usize)> = None;

    for (idx, raw_line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw_line.trim_end();
        let head = line.trim_start();
        if head.is_empty() {
            continue;
        }
        let keyword = head.split_whitespace().next().unwrap_or("");
        match keyword {
            "VERSION" => {
                let mut cur = Cursor::new(line, line_no);
                cur.skip_ws();
                cur.pos += "VERSION".len();
                cur.skip_ws();
                db.version = cur.quoted("version")?.to_string();
            }
            "BO_" => {
                if let Some((msg, bo_line)) = current.take() {
                    finish_message(&mut db, msg, bo_line)?;
                }
                current = Some((parse_bo(line, line_no)?, line_no));
            }
            "SG_" => match current.as_mut() {
                Some((msg, _)) => {
                    let sig = parse_sg(line, line_no)?;
                    msg.signals.push(sig);
                }
                None => {
                    let cur = Cursor::new(line, line_no);
                    return Err(cur.err("SG_ line outside of a BO_ message block"));
                }
            },
            _ => {
                db.diagnostics.push(ParseDiagnostic {
                    line: line_no,
                    message: format!("skipped unsupported line kind '{keyword}'"),
                });
            }
        }
    }
    if let Some((msg, bo_line)) = current.take() {
        finish_message(&mut db, msg, bo_line)?;
    }
    Ok(db)
}

fn parse_bo(line: &str, line_no: usize) -> Result<MessageSpec, DbcError> {
    let mut cur = Cursor::new(line, line_no);
    cur.skip_ws();
    cur.pos += "BO_".len();
    let raw_id = cur.parse_uint("message id")?;
    let name = cur.ident("message name")?.to_string();
    cur.expect(':')?;
    let dlc = cur.parse_uint("dlc")?;
    let sender = cur.ident("sender node")?.to_string();

    if dlc > 8 {
        return Err(DbcError::InvalidMessage {
            line: line_no,
            message: name,
            reason: format!("dlc {dlc} exceeds 8"),
        });
    }
    let raw_id = u32::try_from(raw_id).map_err(|_| DbcError::InvalidMessage {
        line: line_no,
        message: name.clone(),
        reason: "identifier does not fit in 32 bits".into(),
    })?;
    let extended = raw_id & EXTENDED_FLAG != 0;
    let id = raw_id & !EXTENDED_FLAG;
    let id_ok = if extended {
        id <= MAX_EXTENDED_ID
    } else {
        id <= MAX_STANDARD_ID
    };
    if !id_ok {
        return Err(DbcError::InvalidMessage {
            line: line_no,
            message: name,
            reason: format!("identifier {id:#x} out of range"),
        });
    }
    Ok(MessageSpec {
        id,
        extended,
        name,
        dlc: dlc as u8,
        sender,
        signals: Vec::new(),
    })
}

fn parse_sg(line: &str, line_no: usize) -> Result<SignalSpec, DbcError> {
    let mut cur = Cursor::new(line, line_no);
    cur.skip_ws();
    cur.pos += "SG_".len();
    let name = cur.ident("signal name")?.to_string();
    // Multiplexer indicators (m0/M) belong to the unsupported full grammar.
    cur.skip_ws();
    if !cur.rest().starts_with(':') {
        return Err(cur.err("expected ':' (multiplexed signals are not supported)"));
    }
    cur.expect(':')?;
    let start_bit = cur.parse_uint("start bit")?;
    cur.expect('|')?;
    let bit_length = cur.parse_uint("bit length")?;
    cur.expect('@')?;
    cur.skip_ws();
    let byte_order = match cur.take_while(|c| c == '0' || c == '1') {
        "1" => ByteOrder::LittleEndian,
        "0" => ByteOrder::BigEndian,
        _ => return Err(cur.err("expected byte order '0' or '1'")),
    };
    cur.skip_ws();
    let signedness = if cur.rest().starts_with('+') {
        cur.pos += 1;
        Signedness::Unsigned
    } else if cur.rest().starts_with('-') {
        cur.pos += 1;
        Signedness::Signed
    } else {
        return Err(cur.err("expected sign '+' or '-'"));
    };
    cur.expect('(')?;
    let factor = cur.parse_f64("factor")?;
    cur.expect(',')?;
    let offset = cur.parse_f64("offset")?;
    cur.expect(')')?;
    cur.expect('[')?;
    let min = cur.parse_f64("minimum")?;
    cur.expect('|')?;
    let max = cur.parse_f64("maximum")?;
    cur.expect(']')?;
    cur.skip_ws();
    let unit = cur.quoted("unit")?.to_string();
    // Receiver list: present in well-formed files, irrelevant to the codec.

    let invalid = |message: String| DbcError::InvalidSignal {
        line: line_no,
        signal: name.clone(),
        message,
    };
    if bit_length == 0 || bit_length > 64 {
        return Err(invalid(format!("bit length {bit_length} outside 1..=64")));
    }
    if start_bit > 63 {
        return Err(invalid(format!("start bit {start_bit} outside 0..=63")));
    }
    if factor == 0.0 || !factor.is_finite() {
        return Err(invalid("factor must be finite and non-zero".into()));
    }
    if !(min <= max) {
        return Err(invalid(format!("min {min} greater than max {max}")));
    }

    let sig = SignalSpec {
        name: name.clone(),
        start_bit: start_bit as BitPos,
        bit_length: bit_length as u16,
        byte_order,
        signedness,
        factor,
        offset,
        min,
        max,
        unit,
    };

    // Big-endian walks can step past byte 7 even with a valid start bit.
    if sig.bit_positions().iter().any(|&p| p >= 64) {
        return Err(invalid("bit span runs past the 8-byte frame limit".into()));
    }
    Ok(sig)
}

/// Validate a completed message and insert it into the database.
fn finish_message(db: &mut Database, msg: MessageSpec, bo_line: usize) -> Result<(), DbcError> {
    let payload_bits = msg.dlc as u32 * 8;
    let mut mask: u64 = 0;
    let mut owner: Vec<Option<usize>> = vec![None; 64];
    for (i, sig) in msg.signals.iter().enumerate() {
        for pos in sig.bit_positions() {
            if pos as u32 >= payload_bits {
                return Err(DbcError::DlcOverflow {
                    line: bo_line,
                    message: msg.name,
                    signal: sig.name.clone(),
                    dlc: msg.dlc,
                });
            }
            if mask & (1 << pos) != 0 {
                let first = owner[pos as usize].map(|j| msg.signals[j].name.clone());
                return Err(DbcError::Overlap {
                    line: bo_line,
                    message: msg.name,
                    first: first.unwrap_or_default(),
                    second: sig.name.clone(),
                });
            }
            mask |= 1 << pos;
            owner[pos as usize] = Some(i);
        }
        if msg.signals[..i].iter().any(|other| other.name == sig.name) {
            return Err(DbcError::DuplicateName {
                line: bo_line,
                name: sig.name.clone(),
            });
        }
    }
    if db.messages.contains_key(&msg.key()) {
        return Err(DbcError::DuplicateId {
            line: bo_line,
            id: msg.key(),
        });
    }
    if db.messages.values().any(|m| m.name == msg.name) {
        return Err(DbcError::DuplicateName {
            line: bo_line,
            name: msg.name,
        });
    }
    db.messages.insert(msg.key(), msg);
    Ok(())
}
