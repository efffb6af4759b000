//! Command-line front end and HTTP service for the `wavepaint` model.

pub mod commands;
pub mod server;
