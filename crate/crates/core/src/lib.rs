//! Differential-cascaded (forwardstepping) controllers for rigid manipulators.

pub mod cli;
pub mod config;
pub mod controllers;
pub mod filters;
pub mod harness;
pub mod manipulator;
pub mod numerics;
pub mod refdyn;
pub mod signals;
pub mod validation;
