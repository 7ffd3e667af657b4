pub mod cli;
pub mod config;
pub mod coupling;
pub mod ergodicity;
pub mod error;
pub mod hypoellipticity;
pub mod integrate;
pub mod model;
pub mod noise;
pub mod plot;
pub mod rng;
pub mod stats;
