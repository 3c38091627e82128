//! Two-scale Lorenz-96 simulation and calibration of its parameters from
//! time-averaged statistics.

pub mod calibrate;
pub mod dynamics;
pub mod harness;
pub mod objective;
pub mod priors;
pub mod seeding;
pub mod statistics;
