//! Discrete-event simulator and learned router for slimmable-network
//! inference on heterogeneous GPU clusters.
//!
//! A slimmable backbone is partitioned into four sequential segments, each
//! executable at a set of channel-width ratios. Requests traverse the
//! segments in order, possibly on different devices and at different widths.
//! Every simulated server runs a best-fit greedy executor that batches
//! compatible requests, loads and unloads model instances under a VRAM
//! budget, and serializes execution on its device. Above the executors, a
//! router assigns each request's next segment to a (server, width, group)
//! triple — either uniformly at random (the baseline) or via a factored
//! PPO policy trained against a reward that couples an accuracy prior with
//! latency, energy, and utilization imbalance.
//!
//! Everything is deterministic: simulated time only, one seeded RNG stream
//! per logical source, no threads inside an episode.
//!
//! The `book/` directory at the repository root is an mdBook guide to the
//! concepts; its Rust snippets are compiled and run as doc-tests (see the
//! `book` module below).

pub mod accuracy;
pub mod cli;
pub mod config;
pub mod device;
pub mod greedy;
pub mod metrics;
pub mod nn;
pub mod ppo;
pub mod sim;
pub mod types;

pub use config::ExperimentConfig;
pub use metrics::MetricsRecord;
pub use sim::{run_episode, Router, WorkloadSpec};
pub use types::{Request, SchedulerKnobs, WidthRatio, WidthSet};

// Compile the guide's code snippets as doc-tests so the book can never
// drift from the library surface.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/device-model.md")]
    mod device_model {}
    #[doc = include_str!("../../../book/src/greedy-executor.md")]
    mod greedy_executor {}
    #[doc = include_str!("../../../book/src/accuracy-prior.md")]
    mod accuracy_prior {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/policy-network.md")]
    mod policy_network {}
    #[doc = include_str!("../../../book/src/ppo-router.md")]
    mod ppo_router {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
