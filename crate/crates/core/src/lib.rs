//! Markov tower construction for non-uniformly expanding maps, with
//! statistical diagnostics for the resulting decay of correlations.

pub mod cli;
pub mod config;
pub mod decay;
pub mod error;
pub mod expansion;
pub mod geometry;
pub mod induced;
pub mod maps;
pub mod preballs;
pub mod tower;

pub use error::{Error, Result};
