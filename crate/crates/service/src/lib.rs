//! HTTP service and command-line front end for the threadmem store.

pub mod api;
pub mod cli;
pub mod config;
