//! Command-line pipeline and HTTP service for the styledlm toolkit.

pub mod cli;
pub mod service;
