pub mod brownian;
pub mod cli;
pub mod error;
pub mod errorlab;
pub mod mlmc;
pub mod models;
pub mod normal;
pub mod path;
pub mod payoffs;
pub mod schemes;
