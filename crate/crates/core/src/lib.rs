pub mod alignment;
pub mod estimator;
pub mod evaluation;
pub mod geometry;
pub mod gnss;
pub mod registration;
pub mod rng;
pub mod simkit;
pub mod twin;
