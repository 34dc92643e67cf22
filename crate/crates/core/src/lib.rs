//! Closed-loop electric-vehicle / CAN bus co-simulation with attack
//! injection and labeled dataset generation.

pub mod candb;
pub mod dataset;
pub mod frames;
pub mod injector;
pub mod scenario;
pub mod vehicle;

pub use candb::{Database, DbcError, MessageSpec, SignalSpec};
pub use dataset::{
    parse_candump, summarize, write_bundle, write_run_outputs, DatasetBundle, DatasetError,
};
pub use frames::{BusConfig, CanFrame, Label, TimedFrame};
pub use injector::{AttackSpec, Injector};
pub use scenario::{
    compare_runs, load_config, run_scenario, run_with_baseline, ConfigError, DivergenceReport,
    DriveCycle, RunPair, Scenario, SimulationError, SimulationTrace,
};
pub use vehicle::{VehicleParams, VehicleState};
