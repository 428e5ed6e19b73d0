//! Subgroup-specific potential outcome means and treatment effects when
//! extending randomized trial results to a target population.

pub mod data;
pub mod glm;
pub mod nuisance;
pub mod estimators;
pub mod inference;
pub mod rng;
pub mod simulation;
pub mod config;
pub mod report;
pub mod cli;
