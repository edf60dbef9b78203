//! Fuse-k routing stimulus.
//!
//! A Fuse-k trial routes `k` groups of 16 messages at once. In every group the
//! sources are a random permutation of the 16 cores and the destinations are
//! another random permutation, so both are distinct within the group.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graphprep::{StartSlot, StartVector, GROUPS_PER_STAGE};
use crate::hypercube::{CoreId, NUM_CORES};
use crate::router::{route, RouteError, RoutingTable};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BenchError {
    #[error("fuse level {0} outside 1..=4")]
    InvalidFuse(usize),
    #[error(transparent)]
    Route(#[from] RouteError),
}

/// SplitMix64 finalizer, used to derive independent per-trial seeds.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn trial_seed(base: u64, fuse: usize, trial: usize) -> u64 {
    mix64(mix64(base ^ (fuse as u64) << 56) ^ trial as u64)
}

pub fn fuse_stimulus(fuse: usize, seed: u64) -> Result<StartVector, BenchError> {
    if !(1..=GROUPS_PER_STAGE).contains(&fuse) {
        return Err(BenchError::InvalidFuse(fuse));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sv = StartVector::default();
    for group in 0..fuse {
        let mut sources: Vec<CoreId> = CoreId::all().collect();
        let mut dests = sources.clone();
        sources.shuffle(&mut rng);
        dests.shuffle(&mut rng);
        for (j, (s, d)) in sources.into_iter().zip(dests).enumerate() {
            sv.slots[group * NUM_CORES + j] = Some(StartSlot {
                group,
                message: j,
                aggregate_node: j as u8,
                source: s,
                dest: d,
            });
        }
    }
    Ok(sv)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialRecord {
    pub fuse: usize,
    pub trial: usize,
    pub seed: u64,
    pub active: usize,
    pub cycles: usize,
}

/// Generates and routes one Fuse-k trial.
pub fn run_trial(
    fuse: usize,
    base_seed: u64,
    trial: usize,
) -> Result<(StartVector, RoutingTable, TrialRecord), BenchError> {
    let seed = trial_seed(base_seed, fuse, trial);
    let start = fuse_stimulus(fuse, seed)?;
    let table = route(&start, mix64(seed))?;
    let record = TrialRecord {
        fuse,
        trial,
        seed,
        active: start.active(),
        cycles: table.cycles(),
    };
    Ok((start, table, record))
}
