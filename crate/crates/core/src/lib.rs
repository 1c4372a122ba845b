pub mod cli;
pub mod config;
pub mod cost;
pub mod fbsde;
pub mod lipm;
pub mod mpc;
pub mod net;
pub mod tensor;
pub mod train;
pub mod walk;
