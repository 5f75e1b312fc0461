//! Shared workloads for the criterion benchmarks.

use hsa_core::fixtures::{random_leaves, random_states};
use hsa_core::hierarchy::{build_fixed, repeat_last};
use hsa_core::{LeafStates, PosMode, SignalHierarchy};

pub struct Workload {
    pub hierarchy: SignalHierarchy,
    pub states: LeafStates,
}

impl Workload {
    /// `n` tokens grouped by fixed bottom-to-top branching (last factor
    /// repeats), seeded states of width `d`.
    pub fn fixed(n: usize, branching: &[usize], d: usize, seed: u64) -> Self {
        let hierarchy = build_fixed(&random_leaves(n, d, seed), &repeat_last(branching, n), PosMode::Fourier, 4)
            .expect("benchmark hierarchy is valid");
        let states = random_states(&hierarchy, seed);
        Workload { hierarchy, states }
    }
}
