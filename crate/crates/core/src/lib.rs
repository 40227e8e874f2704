//! Distributed, hierarchical task runtime with version-tracked data.

pub mod apps;
pub mod datahier;
pub mod error;
pub mod mempool;
pub mod observe;
pub mod protocol;
pub mod runtime;
pub mod transport;
pub mod versioning;

pub use datahier::{DataDescriptor, DataId, PartitionId, ProcessGrid, Rank, Symmetry, TileLayout};
pub use error::{Error, Result};
pub use observe::{RankStats, SimStats, TraceEvent};
pub use runtime::{
    run_rank, run_simnet, BlockAccess, Child, ExecutorKind, Placement, Program, RunConfig, RunOutcome, Statement,
    TileAccess, Tiles,
};
pub use versioning::{AccessType, HandleId, Version};
