//! Command line front end and HTTP filter service.

pub mod cli;
pub mod service;

pub use cli::main_with_args;
