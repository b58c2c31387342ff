//! Coded federated learning for linear regression.
//!
//! Devices hold private data and reach the server over lossy wireless
//! links. Before training each device uploads a random linear parity of
//! its weighted data; the server then waits only a planned deadline per
//! epoch and fills in for late devices with a gradient over the summed
//! parity.
//!
//! Modules, bottom up: [`delay_model`], [`planner`], [`encoder`],
//! [`trainer`], [`netsim`], [`experiment`].

pub mod delay_model;
pub mod encoder;
pub mod experiment;
pub mod netsim;
pub mod planner;
pub mod trainer;

pub use delay_model::{DelayError, DelaySample, DeviceProfile, DeviceRole};
pub use encoder::{CompositeParity, EncodedShard, GeneratorFamily, LocalDataset};
pub use experiment::{Arm, CellReport, CellRequest, Instance, SeedStreams};
pub use netsim::{EpochTrace, HeterogeneityConfig, NoiseSpec, SimError, SnrReference, Training};
pub use planner::{LoadPlan, PlanError, Planner};
pub use trainer::{ModelState, PartialGradient, TrainError};
