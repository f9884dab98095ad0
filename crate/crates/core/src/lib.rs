//! Core library of the conversational-memory gym: domain model, model
//! backends, blueprint generation, episode runner, memory agents, scoring and
//! prompt self-evolution.

pub mod arena;
pub mod backend;
pub mod evolve;
pub mod genesis;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod rng;
