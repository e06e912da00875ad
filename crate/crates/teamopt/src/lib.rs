//! File formats, experiment harness and Monte-Carlo oracle for
//! [`teamopt_core`].

pub mod config;
pub mod formats;
pub mod harness;
pub mod oracle;
