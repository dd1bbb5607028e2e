//! Command line and HTTP front end for `uvstyle`.

pub mod commands;
pub mod mesh;
pub mod service;

pub use commands::run;
