//! Risk-aware costmap learning for off-road navigation.

pub mod cli;
pub mod config;
pub mod costmap;
pub mod costmodel;
pub mod dynamics;
pub mod error;
pub mod eval;
pub mod gridmap;
pub mod io;
pub mod irl;
pub mod mppi;
pub mod seed;
pub mod selftest;
pub mod worldgen;

pub use costmap::Costmap;
pub use dynamics::{Control, KbmParams, Mode, State, Trajectory, Vehicle};
pub use error::{Error, Result};
pub use gridmap::{Channel, GridMap, MapMeta, PointCloud};
pub use mppi::{MppiConfig, MppiSolution, VisitationMap};
pub use worldgen::{generate_world, World, WorldConfig};
pub use costmodel::{cvar_aggregate, CostModel, Ensemble, ModelKind, Normalization};
