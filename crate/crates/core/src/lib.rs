//! Forward and inverse design of ring-insert pipe metamaterials.
//!
//! The pipeline runs from geometry through an extended-precision transfer
//! matrix solver to per-frequency surrogate networks, particle swarm design
//! optimisation, and an invertible network for retrieving designs from a
//! requested peak-free band.

pub mod geometry;
pub mod inn;
pub mod optimize;
pub mod response;
pub mod surrogate;
pub mod tmm;

pub use geometry::{DesignBounds, DesignSpace, DesignVector, PipeSpec, Segment, SegmentChain};
pub use inn::{InnModel, InnTrainConfig, ZPolicy};
pub use optimize::{BandPlan, InverseDataset, PsoConfig};
pub use response::{AnalysisGrids, Band, FrequencyGrid, ResponseCurve};
pub use surrogate::{Dataset, ResponseSurface, SurrogateSuite, TrainConfig};
pub use tmm::{ModeKind, PrecisionConfig, TmmSolver, TransferMatrix};
