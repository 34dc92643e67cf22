//! `canloop` extension module: the CAN signal codec, the scenario runner,
//! and the candump parser exposed to Python.
//!
//! Build with `cargo build -p canloop-python --release`, then place the
//! produced `libcanloop.so` on `sys.path` as `canloop.so`
//! (`python/smoke_test.py` automates this and exercises the surface).

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyKeyError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

use canloop_core::candb::{self, MessageSpec};
use canloop_core::dataset;
use canloop_core::frames::{CanFrame, Label};
use canloop_core::scenario::{self, DivergenceReport, SimulationTrace};

/// A parsed signal database: the pack/unpack codec.
#[pyclass(frozen, module = "canloop")]
struct Database {
    inner: candb::Database,
}

impl Database {
    fn spec(&self, message: &str) -> PyResult<&MessageSpec> {
        self.inner
            .message_by_name(message)
            .ok_or_else(|| PyKeyError::new_err(format!("no message named '{message}'")))
    }
}

#[pymethods]
impl Database {
    /// Parse DBC text.
    #[new]
    fn new(text: &str) -> PyResult<Self> {
        candb::Database::parse(text)
            .map(|inner| Database { inner })
            .map_err(|e| PyValueError::new_err(e.to_string()))
    }

    /// Parse a DBC file from disk.
    #[staticmethod]
    fn from_file(path: PathBuf) -> PyResult<Self> {
        let text = std::fs::read_to_string(&path)
            .map_err(|e| PyIOError::new_err(format!("cannot read {}: {e}", path.display())))?;
        Self::new(&text)
    }

    #[getter]
    fn version(&self) -> &str {
        &self.inner.version
    }

    /// Warnings recorded for skipped or unsupported lines.
    #[getter]
    fn diagnostics(&self) -> Vec<String> {
        self.inner.diagnostics.iter().map(|d| d.to_string()).collect()
    }

    fn message_names(&self) -> Vec<String> {
        self.inner.messages().map(|m| m.name.clone()).collect()
    }

    /// Encode physical values into a payload.
    ///
    /// Returns `(bytes, saturated)`; `saturated` reports whether any value
    /// was clamped to its signal range on the way in.
    fn pack<'py>(
        &self,
        py: Python<'py>,
        message: &str,
        values: BTreeMap<String, f64>,
    ) -> PyResult<(Bound<'py, PyBytes>, bool)> {
        let packed = self
            .spec(message)?
            .pack(&values)
            .map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok((PyBytes::new(py, &packed.payload), packed.saturated))
    }

    /// Decode a payload into physical values keyed by signal name.
    fn unpack(&self, message: &str, data: Vec<u8>) -> PyResult<BTreeMap<String, f64>> {
        self.spec(message)?
            .unpack(&data)
            .map_err(|e| PyValueError::new_err(e.to_string()))
    }
}

fn frame_dict<'py>(
    py: Python<'py>,
    timestamp: f64,
    channel: &str,
    frame: &CanFrame,
    label: Option<&Label>,
) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("timestamp", timestamp)?;
    d.set_item("channel", channel)?;
    d.set_item("id", frame.id)?;
    d.set_item("extended", frame.extended)?;
    d.set_item("data", PyBytes::new(py, &frame.payload))?;
    if let Some(label) = label {
        match label {
            Label::Benign => {
                d.set_item("label", "benign")?;
                d.set_item("attack_id", py.None())?;
            }
            Label::Attack { attack_id } => {
                d.set_item("label", "attack")?;
                d.set_item("attack_id", attack_id)?;
            }
        }
    }
    Ok(d)
}

/// One simulation run: logged bus frames plus per-step channel samples.
#[pyclass(frozen, module = "canloop")]
struct Trace {
    inner: SimulationTrace,
}

#[pymethods]
impl Trace {
    #[getter]
    fn scenario_name(&self) -> &str {
        &self.inner.scenario_name
    }

    #[getter]
    fn coupling(&self) -> &'static str {
        self.inner.coupling.as_str()
    }

    #[getter]
    fn attacked(&self) -> bool {
        self.inner.attacked
    }

    #[getter]
    fn dt_s(&self) -> f64 {
        self.inner.dt_s
    }

    #[getter]
    fn duration_s(&self) -> f64 {
        self.inner.duration_s
    }

    #[getter]
    fn channel_name(&self) -> &str {
        &self.inner.channel_name
    }

    #[getter]
    fn bus_load(&self) -> f64 {
        self.inner.bus_load
    }

    #[getter]
    fn bus_peak_depth(&self) -> usize {
        self.inner.bus_peak_depth
    }

    #[getter]
    fn encode_saturation_count(&self) -> u64 {
        self.inner.encode_saturation_count
    }

    #[getter]
    fn frame_count(&self) -> usize {
        self.inner.frames.len()
    }

    #[getter]
    fn attack_frame_count(&self) -> usize {
        self.inner.attack_frame_count()
    }

    /// Per-step channels as a dict of equal-length lists.
    fn steps<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let s = &self.inner.steps;
        let col = |f: fn(&scenario::StepRecord) -> f64| s.iter().map(f).collect::<Vec<f64>>();
        let d = PyDict::new(py);
        d.set_item("time_s", col(|r| r.t))?;
        d.set_item("reference_speed_mps", col(|r| r.reference_mps))?;
        d.set_item("speed_mps", col(|r| r.speed_mps))?;
        d.set_item("torque_request_clean_nm", col(|r| r.torque_request_clean_nm))?;
        d.set_item("torque_request_dirty_nm", col(|r| r.torque_request_dirty_nm))?;
        d.set_item("torque_applied_nm", col(|r| r.torque_applied_nm))?;
        d.set_item("soc", col(|r| r.soc))?;
        Ok(d)
    }

    /// Logged frames as dicts with keys timestamp, channel, id, extended,
    /// data, label, attack_id.
    fn frames<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        self.inner
            .frames
            .iter()
            .map(|f| frame_dict(py, f.timestamp, &f.channel, &f.frame, Some(&f.label)))
            .collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "Trace(scenario_name='{}', coupling='{}', attacked={}, frames={})",
            self.inner.scenario_name,
            self.inner.coupling.as_str(),
            if self.inner.attacked { "True" } else { "False" },
            self.inner.frames.len()
        )
    }
}

/// A benign baseline plus, when attacks are configured, the attacked run
/// and its divergence report.
#[pyclass(frozen, module = "canloop")]
struct RunResult {
    benign: Py<Trace>,
    attacked: Option<Py<Trace>>,
    report: Option<DivergenceReport>,
}

#[pymethods]
impl RunResult {
    #[getter]
    fn benign(&self, py: Python<'_>) -> Py<Trace> {
        self.benign.clone_ref(py)
    }

    #[getter]
    fn attacked(&self, py: Python<'_>) -> Option<Py<Trace>> {
        self.attacked.as_ref().map(|t| t.clone_ref(py))
    }

    /// First grid instant where any channel differs bit-for-bit, or None.
    #[getter]
    fn first_divergence_time(&self) -> Option<f64> {
        self.report.as_ref().and_then(|r| r.first_divergence_time)
    }

    /// Attacked-minus-benign wire torque, run-length encoded as
    /// `(t_from, t_to, value)` triples; `value` holds on `[t_from, t_to)`.
    fn torque_offset_segments(&self) -> Vec<(f64, f64, f64)> {
        match &self.report {
            Some(r) => r
                .torque_offset_segments
                .iter()
                .map(|s| (s.t_from, s.t_to, s.value))
                .collect(),
            None => Vec::new(),
        }
    }

    /// `(max_abs, mean_abs)` attacked-minus-benign deviation per channel.
    fn channel_deviations<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let d = PyDict::new(py);
        if let Some(r) = &self.report {
            for c in &r.channels {
                d.set_item(&c.channel, (c.max_abs, c.mean_abs))?;
            }
        }
        Ok(d)
    }
}

/// Load a scenario config (with optional dotted-path overrides), run it,
/// and optionally write the dataset bundle into `output_dir`.
#[pyfunction]
#[pyo3(signature = (config_path, overrides = Vec::new(), output_dir = None))]
fn simulate(
    py: Python<'_>,
    config_path: PathBuf,
    overrides: Vec<String>,
    output_dir: Option<PathBuf>,
) -> PyResult<RunResult> {
    let s = scenario::load_config(&config_path, &overrides)
        .map_err(|e| PyValueError::new_err(e.to_string()))?;
    let pair =
        scenario::run_with_baseline(&s).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    if let Some(dir) = &output_dir {
        dataset::write_run_outputs(&pair, s.plot_stride_s, dir)
            .map_err(|e| PyIOError::new_err(e.to_string()))?;
    }
    let report = match &pair.attacked {
        Some(attacked) => Some(
            scenario::compare_runs(&pair.benign, attacked)
                .map_err(|e| PyRuntimeError::new_err(e.to_string()))?,
        ),
        None => None,
    };
    Ok(RunResult {
        benign: Py::new(py, Trace { inner: pair.benign })?,
        attacked: pair
            .attacked
            .map(|t| Py::new(py, Trace { inner: t }))
            .transpose()?,
        report,
    })
}

/// Parse candump-format text into frame dicts (timestamp, channel, id,
/// extended, data).
#[pyfunction]
fn parse_candump<'py>(py: Python<'py>, text: &str) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let records =
        dataset::parse_candump(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
    records
        .iter()
        .map(|r| frame_dict(py, r.timestamp, &r.channel, &r.frame, None))
        .collect()
}

/// CAN/vehicle co-simulation toolkit: signal codec, scenario runner, and
/// candump parsing.
#[pymodule]
fn canloop(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Database>()?;
    m.add_class::<Trace>()?;
    m.add_class::<RunResult>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(parse_candump, m)?)?;
    Ok(())
}
