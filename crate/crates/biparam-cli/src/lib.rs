//! IO, file formats, configuration, and command drivers for the biparam
//! toolkit. The algorithmic core lives in the `biparam` crate; this crate
//! carries everything that needs the standard library.

pub mod artifacts;
pub mod commands;
pub mod config;
