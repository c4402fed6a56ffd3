pub mod gauss;
pub mod equilibrium;
pub mod audit;
pub mod config;
pub mod output;
pub mod policy;
pub mod simulate;
