//! Desk-scale model of a 16-core GCN training accelerator.
//!
//! The crate is split along the accelerator's datapath:
//!
//! - [`hypercube`]: 4-D hypercube topology, XOR path sets and the per-cycle switch constraints.
//! - [`graphprep`]: COO storage, 16x16 block partitioning, diagonal stage schedule,
//!   Block Message compression and start-vector generation.
//! - [`router`]: parallel multicast routing tables and the 25-bit routing instruction stream.
//! - [`netsim`]: cycle-level replay of routing tables and instruction streams through a
//!   functional core model, plus the analytic performance model.
//! - [`gcn`]: GCN layer math, the four execution orders (including transposed
//!   backpropagation), SGD and the execution-order cost estimator.
//! - [`bench`]: Fuse-k routing stimulus used by the routing experiments.

pub mod bench;
pub mod gcn;
pub mod graphprep;
pub mod hypercube;
pub mod netsim;
pub mod router;

pub use hypercube::CoreId;
