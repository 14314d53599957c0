//! Finite-MDP dataset characterization: exact and empirical measures of
//! offline reinforcement learning datasets, their generation, offline
//! training, and domain-shift analysis.

pub mod abstraction;
pub mod dataset;
pub mod datagen;
pub mod envs;
pub mod format;
pub mod mdp;
pub mod measures;
pub mod offline;
pub mod shift;
pub mod sketch;
pub mod stats;
pub mod sweep;
pub mod theory;
