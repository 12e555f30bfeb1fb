//! Nonparametric instrumental-variable estimation of structural quantile
//! functions for competing-risks durations under random right censoring.
//!
//! The pipeline runs from [`data::Dataset`] through Aalen-Johansen estimates
//! ([`survival`]) smoothed into a [`surface::SmoothedSurvivalSurface`], on
//! which [`estimator::fit_curve`] solves the instrumental system over a
//! quantile grid. Beyond the identification frontier [`bounds`] returns outer
//! sets; [`inference`] adds bootstrap bands and [`simulation`] reproduces the
//! two benchmark designs.

pub mod data;
pub mod rng;
pub mod smoothing;
pub mod step;
pub mod surface;
pub mod survival;
pub mod estimator;
pub mod optim;
pub mod simulation;
pub mod bounds;
pub mod inference;
pub mod cli;
