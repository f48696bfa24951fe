//! Bandwidth-aware multi-agent communication.
//!
//! Agents share one bandwidth-limited medium. Each round every agent
//! rates the utility of what it has to say; a central scheduler turns
//! those utilities into simplex weights and even per-agent byte budgets;
//! messages are squeezed to their budget with a clipped Fourier transform,
//! shipped in a single wire frame and reconstructed on the receiving side.
//! The whole pipeline is differentiable end to end and trained with a
//! centralized-critic actor-critic loop inside a deterministic particle
//! simulator.
//!
//! Modules follow the pipeline: [`codec`] (spectral compression),
//! [`scheduler`] (weights and budgets), [`wire`] (frame format), [`env`]
//! (scenarios), [`nn`] (tape autodiff), [`agent`] (per-agent networks),
//! [`trainer`] (learning loop), [`analysis`]/[`metrics`] (run artifacts)
//! and [`config`] (run configuration).

pub mod agent;
pub mod analysis;
pub mod codec;
pub mod config;
pub mod env;
pub mod metrics;
pub mod nn;
pub mod par;
pub mod runner;
pub mod scheduler;
pub mod trainer;
pub mod wire;
