//! `dermo` command-line tools and the HTTP inference service.

pub mod cli;
pub mod server;
pub mod upload;
