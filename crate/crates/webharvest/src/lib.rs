//! File formats, web acquisition and the staged command-line pipeline built on
//! [`webharvest_core`].

pub mod acquisition;
pub mod config;
pub mod features;
pub mod imaging;
pub mod io;
pub mod stages;

pub use webharvest_core as core;
