//! Shared fixtures for the benchmarks.

use mlcl_core::sensing::make_episode;
use mlcl_core::world::{generate_grid_network, simulate_traces};
use mlcl_core::{Episode, NoiseConfig};

/// `count` default-noise episodes of `group` vehicles over `window` steps.
pub fn episodes(count: u64, group: usize, window: usize) -> Vec<Episode> {
    let net = generate_grid_network(6, 6, 150.0, 14.0).expect("grid");
    let traces = simulate_traces(&net, 60, 300.0, 1.0, 7).expect("traces");
    let noise = NoiseConfig::default();
    (0..count).map(|i| make_episode(&traces, group, window, &noise, i).expect("episode")).collect()
}
