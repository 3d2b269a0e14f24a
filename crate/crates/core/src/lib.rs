//! Unified artifact detection and correction on a synthetic image domain.

pub mod dataset;
pub mod evalharness;
pub mod inference;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod selftest;
pub mod toyworld;
pub mod trainer;
