//! Command-line front end and the loopback annotation service.

pub mod commands;
pub mod service;
