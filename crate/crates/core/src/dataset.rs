//! Trace serialization: candump-compatible logs, labeled CSV datasets,
//! full-resolution channel records, JSON summaries, and the benign-vs-
//! attacked plot series. All writers are pure functions of the trace, so
//! identical runs produce byte-identical files.
//!
//! Floating-point fields are written with six decimal places (Rust's fixed
//! formatting rounds half to even), which round-trips every value on the
//! simulation grids used here.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::frames::{CanFrame, Label, TimedFrame};
use crate::scenario::{compare_runs, CompareError, RunPair, SimulationTrace};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Grid(#[from] CompareError),
    #[error("serialization failed: {0}")]
    Json(#[from] serde_json::Error),
}

fn write_file(path: &Path, contents: &str) -> Result<(), DatasetError> {
    std::fs::write(path, contents).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Identifier text used in logs: three uppercase hex digits for standard
/// frames, eight for extended — the candump convention, which also encodes
/// the frame format in the width.
pub fn format_id(frame: &CanFrame) -> String {
    if frame.extended {
        format!("{:08X}", frame.id)
    } else {
        format!("{:03X}", frame.id)
    }
}

fn payload_hex(payload: &[u8]) -> String {
    let mut s = String::with_capacity(payload.len() * 2);
    for b in payload {
        let _ = write!(s, "{b:02X}");
    }
    s
}

// ---------------------------------------------------------------------------
// candump log
// ---------------------------------------------------------------------------

/// Render one frame as a candump log line.
pub fn candump_line(f: &TimedFrame) -> String {
    format!(
        "({:.6}) {} {}#{}",
        f.timestamp,
        f.channel,
        format_id(&f.frame),
        payload_hex(&f.frame.payload)
    )
}

/// Write the candump-format log; returns the row count.
pub fn write_candump(trace: &SimulationTrace, path: &Path) -> Result<usize, DatasetError> {
    let mut out = String::with_capacity(trace.frames.len() * 32);
    for f in &trace.frames {
        out.push_str(&candump_line(f));
        out.push('\n');
    }
    write_file(path, &out)?;
    Ok(trace.frames.len())
}

/// One parsed candump row.
#[derive(Debug, Clone, PartialEq)]
pub struct CandumpRecord {
    pub timestamp: f64,
    pub channel: String,
    pub frame: CanFrame,
}

#[derive(Debug, Error, PartialEq)]
#[error("candump line {line}: {message}")]
pub struct CandumpError {
    pub line: usize,
    pub message: String,
}

/// Parse candump text back into records (inverse of [`write_candump`]).
pub fn parse_candump(text: &str) -> Result<Vec<CandumpRecord>, CandumpError> {
    let mut records = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| CandumpError { line: idx + 1, message };
        let mut tokens = line.split_whitespace();
        let (ts, channel, body) = match (tokens.next(), tokens.next(), tokens.next(), tokens.next())
        {
            (Some(a), Some(b), Some(c), None) => (a, b, c),
            _ => return Err(err("expected `(timestamp) channel id#data`".to_string())),
        };
        let timestamp = ts
            .strip_prefix('(')
            .and_then(|s| s.strip_suffix(')'))
            .and_then(|s| s.parse::<f64>().ok())
            .ok_or_else(|| err(format!("bad timestamp '{ts}'")))?;
        let (id_text, data_text) = body
            .split_once('#')
            .ok_or_else(|| err(format!("missing '#' in '{body}'")))?;
        let id = u32::from_str_radix(id_text, 16)
            .map_err(|_| err(format!("bad identifier '{id_text}'")))?;
        let extended = id_text.len() > 3;
        if data_text.len() % 2 != 0 {
            return Err(err(format!("odd-length payload '{data_text}'")));
        }
        let payload = (0..data_text.len() / 2)
            .map(|i| u8::from_str_radix(&data_text[2 * i..2 * i + 2], 16))
            .collect::<Result<Vec<u8>, _>>()
            .map_err(|_| err(format!("bad payload hex '{data_text}'")))?;
        let frame = CanFrame::new(id, extended, payload)
            .map_err(|e| err(e.to_string()))?;
        records.push(CandumpRecord {
            timestamp,
            channel: channel.to_string(),
            frame,
        });
    }
    Ok(records)
}

// ---------------------------------------------------------------------------
// Labeled CSV
// ---------------------------------------------------------------------------

pub const LABELED_CSV_HEADER: &str = "timestamp,channel,id_hex,dlc,data_hex,label,attack_id";

/// Write the labeled frame dataset; returns the row count (excluding the
/// header).
pub fn write_labeled_csv(trace: &SimulationTrace, path: &Path) -> Result<usize, DatasetError> {
    let mut out = String::with_capacity(trace.frames.len() * 48);
    out.push_str(LABELED_CSV_HEADER);
    out.push('\n');
    for f in &trace.frames {
        let (label, attack_id) = match &f.label {
            Label::Benign => ("benign", ""),
            Label::Attack { attack_id } => ("attack", attack_id.as_str()),
        };
        let _ = writeln!(
            out,
            "{:.6},{},{},{},{},{},{}",
            f.timestamp,
            f.channel,
            format_id(&f.frame),
            f.frame.dlc(),
            payload_hex(&f.frame.payload),
            label,
            attack_id
        );
    }
    write_file(path, &out)?;
    Ok(trace.frames.len())
}

// ---------------------------------------------------------------------------
// Channel record CSV
// ---------------------------------------------------------------------------

pub const CHANNELS_CSV_HEADER: &str = "time_s,reference_mps,speed_mps,torque_request_clean_nm,\
torque_request_dirty_nm,torque_applied_nm,soc,encode_saturated";

/// Write every simulation-grid channel sample; returns the row count.
pub fn write_channels_csv(trace: &SimulationTrace, path: &Path) -> Result<usize, DatasetError> {
    let mut out = String::with_capacity(trace.steps.len() * 96);
    out.push_str(CHANNELS_CSV_HEADER);
    out.push('\n');
    for r in &trace.steps {
        let _ = writeln!(
            out,
            "{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
            r.t,
            r.reference_mps,
            r.speed_mps,
            r.torque_request_clean_nm,
            r.torque_request_dirty_nm,
            r.torque_applied_nm,
            r.soc,
            r.encode_saturated as u8
        );
    }
    write_file(path, &out)?;
    Ok(trace.steps.len())
}

// ---------------------------------------------------------------------------
// Plot series
// ---------------------------------------------------------------------------

pub const PLOT_CSV_HEADER: &str =
    "time_s,torque_benign,torque_attacked,speed_benign,speed_attacked,reference_speed";

/// Write the figure-reproduction series, downsampled to `stride_s`:
/// wire torque and speed for both runs plus the reference (all SI units).
/// When no attacked run exists, pass the benign trace twice.
pub fn write_plot_series(
    benign: &SimulationTrace,
    attacked: &SimulationTrace,
    stride_s: f64,
    path: &Path,
) -> Result<usize, DatasetError> {
    if benign.steps.len() != attacked.steps.len() {
        return Err(CompareError::GridLength(benign.steps.len(), attacked.steps.len()).into());
    }
    if benign.dt_s != attacked.dt_s {
        return Err(CompareError::GridStep(benign.dt_s, attacked.dt_s).into());
    }
    let stride = ((stride_s / benign.dt_s).round() as usize).max(1);
    let mut rows = 0usize;
    let mut out = String::with_capacity(benign.steps.len() / stride * 80 + 128);
    out.push_str(PLOT_CSV_HEADER);
    out.push('\n');
    for (b, a) in benign.steps.iter().zip(&attacked.steps).step_by(stride) {
        let _ = writeln!(
            out,
            "{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            b.t,
            b.torque_request_dirty_nm,
            a.torque_request_dirty_nm,
            b.speed_mps,
            a.speed_mps,
            b.reference_mps
        );
        rows += 1;
    }
    write_file(path, &out)?;
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Summary
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ChannelStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub scenario: String,
    pub coupling: &'static str,
    pub attacked: bool,
    pub duration_s: f64,
    pub dt_s: f64,
    pub frame_count: usize,
    /// Keyed by the log identifier text (e.g. "101").
    pub frames_per_id: BTreeMap<String, usize>,
    pub attack_frames: usize,
    pub benign_frames: usize,
    pub channels: BTreeMap<&'static str, ChannelStats>,
    pub bus_load: f64,
    pub bus_peak_depth: usize,
    pub encode_saturation_count: u64,
}

/// Aggregate counts and channel statistics for one trace.
pub fn summarize(trace: &SimulationTrace) -> Summary {
    let mut frames_per_id = BTreeMap::new();
    let mut attack_frames = 0usize;
    for f in &trace.frames {
        *frames_per_id.entry(format_id(&f.frame)).or_insert(0) += 1;
        if f.label.is_attack() {
            attack_frames += 1;
        }
    }

    let mut channels = BTreeMap::new();
    if !trace.steps.is_empty() {
        let mut stat = |name: &'static str, pick: fn(&crate::scenario::StepRecord) -> f64| {
            let mut min = f64::INFINITY;
            let mut max = f64::NEG_INFINITY;
            let mut sum = 0.0;
            for r in &trace.steps {
                let v = pick(r);
                min = min.min(v);
                max = max.max(v);
                sum += v;
            }
            channels.insert(
                name,
                ChannelStats { min, max, mean: sum / trace.steps.len() as f64 },
            );
        };
        stat("reference_mps", |r| r.reference_mps);
        stat("speed_mps", |r| r.speed_mps);
        stat("torque_request_clean_nm", |r| r.torque_request_clean_nm);
        stat("torque_request_dirty_nm", |r| r.torque_request_dirty_nm);
        stat("torque_applied_nm", |r| r.torque_applied_nm);
        stat("soc", |r| r.soc);
    }

    Summary {
        scenario: trace.scenario_name.clone(),
        coupling: trace.coupling.as_str(),
        attacked: trace.attacked,
        duration_s: trace.duration_s,
        dt_s: trace.dt_s,
        frame_count: trace.frames.len(),
        frames_per_id,
        attack_frames,
        benign_frames: trace.frames.len() - attack_frames,
        channels,
        bus_load: trace.bus_load,
        bus_peak_depth: trace.bus_peak_depth,
        encode_saturation_count: trace.encode_saturation_count,
    }
}

// ---------------------------------------------------------------------------
// Bundle
// ---------------------------------------------------------------------------

/// Paths of the files one trace serializes into.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub candump_path: PathBuf,
    pub labeled_csv_path: PathBuf,
    pub channels_csv_path: PathBuf,
    pub summary_path: PathBuf,
    /// Rows in the candump log and the labeled CSV (identical by contract).
    pub frame_rows: usize,
}

/// Write the four per-trace files into `dir` (candump.log, labeled.csv,
/// channels.csv, summary.json).
pub fn write_bundle(trace: &SimulationTrace, dir: &Path) -> Result<DatasetBundle, DatasetError> {
    std::fs::create_dir_all(dir).map_err(|source| DatasetError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let candump_path = dir.join("candump.log");
    let labeled_csv_path = dir.join("labeled.csv");
    let channels_csv_path = dir.join("channels.csv");
    let summary_path = dir.join("summary.json");

    let candump_rows = write_candump(trace, &candump_path)?;
    let csv_rows = write_labeled_csv(trace, &labeled_csv_path)?;
    debug_assert_eq!(candump_rows, csv_rows);
    write_channels_csv(trace, &channels_csv_path)?;
    let mut summary_json = serde_json::to_string_pretty(&summarize(trace))?;
    summary_json.push('\n');
    write_file(&summary_path, &summary_json)?;

    Ok(DatasetBundle {
        candump_path,
        labeled_csv_path,
        channels_csv_path,
        summary_path,
        frame_rows: candump_rows,
    })
}

/// Write a run pair: the trace of record's bundle in `dir`, plus
/// plot.csv and compare.json when an attacked run exists.
pub fn write_run_outputs(
    pair: &RunPair,
    plot_stride_s: f64,
    dir: &Path,
) -> Result<DatasetBundle, DatasetError> {
    let record = pair.attacked.as_ref().unwrap_or(&pair.benign);
    let bundle = write_bundle(record, dir)?;
    write_plot_series(&pair.benign, record, plot_stride_s, &dir.join("plot.csv"))?;
    if let Some(attacked) = &pair.attacked {
        let report = compare_runs(&pair.benign, attacked)?;
        let mut json = serde_json::to_string_pretty(&report)?;
        json.push('\n');
        write_file(&dir.join("compare.json"), &json)?;
    }
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{Coupling, StepRecord};
    use proptest::prelude::*;

    fn frame(id: u32, extended: bool, payload: Vec<u8>, t: f64, label: Label) -> TimedFrame {
        TimedFrame {
            frame: CanFrame::new(id, extended, payload).unwrap(),
            timestamp: t,
            channel: "vcan0".to_string(),
            label,
        }
    }

    fn trace_with(frames: Vec<TimedFrame>, steps: Vec<StepRecord>) -> SimulationTrace {
        SimulationTrace {
            scenario_name: "test".to_string(),
            coupling: Coupling::ClosedLoop,
            attacked: false,
            dt_s: 0.001,
            duration_s: steps.len() as f64 * 0.001,
            channel_name: "vcan0".to_string(),
            frames,
            steps,
            commands: Vec::new(),
            bus_load: 0.0247,
            bus_peak_depth: 1,
            encode_saturation_count: 0,
        }
    }

    fn step(t: f64) -> StepRecord {
        StepRecord {
            t,
            reference_mps: 27.777778,
            speed_mps: 27.5,
            torque_request_clean_nm: 16.5,
            torque_request_dirty_nm: 1.5,
            torque_applied_nm: 1.5,
            soc: 0.9,
            encode_saturated: false,
        }
    }

    #[test]
    fn candump_line_matches_convention() {
        let f = frame(0x101, false, vec![0x6A, 0xFF], 160.01, Label::Benign);
        assert_eq!(candump_line(&f), "(160.010000) vcan0 101#6AFF");
    }

    #[test]
    fn candump_extended_ids_use_eight_digits() {
        let f = frame(0x18DAF110, true, vec![0x01], 0.5, Label::Benign);
        assert_eq!(candump_line(&f), "(0.500000) vcan0 18DAF110#01");
        let records = parse_candump("(0.500000) vcan0 18DAF110#01\n").unwrap();
        assert!(records[0].frame.extended);
        assert_eq!(records[0].frame.id, 0x18DAF110);
    }

    #[test]
    fn candump_empty_trace_gives_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.log");
        let n = write_candump(&trace_with(Vec::new(), Vec::new()), &path).unwrap();
        assert_eq!(n, 0);
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "");
    }

    #[test]
    fn candump_round_trips() {
        let frames = vec![
            frame(0x101, false, vec![0x6A, 0xFF], 160.01, Label::Benign),
            frame(0x201, false, vec![0, 0, 0, 0, 0], 160.02, Label::Benign),
            frame(0x1FFFFFFF, true, vec![], 160.03, Label::Benign),
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.log");
        write_candump(&trace_with(frames.clone(), Vec::new()), &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let records = parse_candump(&text).unwrap();
        assert_eq!(records.len(), frames.len());
        for (r, f) in records.iter().zip(&frames) {
            assert_eq!(r.frame, f.frame);
            assert_eq!(r.channel, f.channel);
            assert_eq!(format!("{:.6}", r.timestamp), format!("{:.6}", f.timestamp));
        }
    }

    #[test]
    fn candump_parse_reports_line_numbers() {
        let err = parse_candump("(0.1) vcan0 101#AA\nnot a line\n").unwrap_err();
        assert_eq!(err.line, 2);
        let err = parse_candump("(0.1) vcan0 101#A\n").unwrap_err();
        assert!(err.message.contains("odd-length"));
        let err = parse_candump("(x) vcan0 101#AA\n").unwrap_err();
        assert!(err.message.contains("timestamp"));
        let err = parse_candump("(0.1) vcan0 101AA\n").unwrap_err();
        assert!(err.message.contains('#'));
    }

    #[test]
    fn labeled_csv_rows_and_labels() {
        let frames = vec![
            frame(0x101, false, vec![0x6A, 0xFF], 160.01, Label::Attack {
                attack_id: "torque_step".to_string(),
            }),
            frame(0x201, false, vec![1, 2, 3, 4, 5], 160.02, Label::Benign),
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.csv");
        let n = write_labeled_csv(&trace_with(frames, Vec::new()), &path).unwrap();
        assert_eq!(n, 2);
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], LABELED_CSV_HEADER);
        assert_eq!(lines[1], "160.010000,vcan0,101,2,6AFF,attack,torque_step");
        assert_eq!(lines[2], "160.020000,vcan0,201,5,0102030405,benign,");
    }

    #[test]
    fn plot_series_duplicated_benign_has_identical_columns() {
        let steps: Vec<StepRecord> = (0..100).map(|i| step(i as f64 * 0.001)).collect();
        let t = trace_with(Vec::new(), steps);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("plot.csv");
        let rows = write_plot_series(&t, &t, 0.01, &path).unwrap();
        assert_eq!(rows, 10);
        let text = std::fs::read_to_string(&path).unwrap();
        for line in text.lines().skip(1) {
            let cols: Vec<&str> = line.split(',').collect();
            assert_eq!(cols.len(), 6);
            assert_eq!(cols[1], cols[2], "torque columns differ: {line}");
            assert_eq!(cols[3], cols[4], "speed columns differ: {line}");
        }
    }

    #[test]
    fn plot_series_rejects_mismatched_grids() {
        let a = trace_with(Vec::new(), (0..10).map(|i| step(i as f64 * 0.001)).collect());
        let b = trace_with(Vec::new(), (0..11).map(|i| step(i as f64 * 0.001)).collect());
        let dir = tempfile::tempdir().unwrap();
        let err = write_plot_series(&a, &b, 0.01, &dir.path().join("x.csv")).unwrap_err();
        assert!(matches!(err, DatasetError::Grid(CompareError::GridLength(10, 11))));
    }

    #[test]
    fn summary_counts_and_stats() {
        let frames = vec![
            frame(0x101, false, vec![0, 0], 0.00, Label::Benign),
            frame(0x101, false, vec![0, 0], 0.01, Label::Attack {
                attack_id: "a".to_string(),
            }),
            frame(0x201, false, vec![0; 5], 0.00, Label::Benign),
        ];
        let steps: Vec<StepRecord> = (0..10).map(|i| step(i as f64 * 0.001)).collect();
        let s = summarize(&trace_with(frames, steps));
        assert_eq!(s.frame_count, 3);
        assert_eq!(s.frames_per_id["101"], 2);
        assert_eq!(s.frames_per_id["201"], 1);
        assert_eq!(s.attack_frames, 1);
        assert_eq!(s.benign_frames, 2);
        assert_eq!(s.channels["speed_mps"].min, 27.5);
        assert_eq!(s.channels["speed_mps"].max, 27.5);
        assert!((s.channels["speed_mps"].mean - 27.5).abs() < 1e-12);
        assert!(s.bus_load < 1.0);
    }

    #[test]
    fn summary_of_empty_trace_is_all_zero() {
        let s = summarize(&trace_with(Vec::new(), Vec::new()));
        assert_eq!(s.frame_count, 0);
        assert_eq!(s.attack_frames, 0);
        assert_eq!(s.benign_frames, 0);
        assert!(s.frames_per_id.is_empty());
        assert!(s.channels.is_empty());
    }

    #[test]
    fn bundle_writes_four_files_deterministically() {
        let frames = vec![frame(0x101, false, vec![0x6A, 0xFF], 0.0, Label::Benign)];
        let steps = vec![step(0.0)];
        let t = trace_with(frames, steps);
        let dir = tempfile::tempdir().unwrap();
        let d1 = dir.path().join("one");
        let d2 = dir.path().join("two");
        let b1 = write_bundle(&t, &d1).unwrap();
        let b2 = write_bundle(&t, &d2).unwrap();
        assert_eq!(b1.frame_rows, 1);
        for (p1, p2) in [
            (&b1.candump_path, &b2.candump_path),
            (&b1.labeled_csv_path, &b2.labeled_csv_path),
            (&b1.channels_csv_path, &b2.channels_csv_path),
            (&b1.summary_path, &b2.summary_path),
        ] {
            let c1 = std::fs::read(p1).unwrap();
            let c2 = std::fs::read(p2).unwrap();
            assert!(!c1.is_empty());
            assert_eq!(c1, c2);
        }
    }

    proptest! {
        #[test]
        fn candump_round_trip_property(
            ids in proptest::collection::vec((0u32..0x800, 0usize..=8), 1..40),
            extended in proptest::bool::ANY,
        ) {
            let frames: Vec<TimedFrame> = ids
                .iter()
                .enumerate()
                .map(|(i, &(id, len))| {
                    let payload: Vec<u8> = (0..len).map(|j| (id as usize + j) as u8).collect();
                    frame(id, extended, payload, i as f64 * 0.01, Label::Benign)
                })
                .collect();
            let mut text = String::new();
            for f in &frames {
                text.push_str(&candump_line(f));
                text.push('\n');
            }
            let records = parse_candump(&text).unwrap();
            prop_assert_eq!(records.len(), frames.len());
            for (r, f) in records.iter().zip(&frames) {
                prop_assert_eq!(&r.frame, &f.frame);
            }
        }
    }
}
