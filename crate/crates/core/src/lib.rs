//! Indoor RF coverage maps: deterministic image-method ground truth, a
//! reverse-mode autodiff engine, and a conditional GAN that synthesizes maps
//! from floor plans, antenna patterns and carrier frequency.

pub mod antenna;
pub mod autograd;
pub mod dataset;
pub mod geometry;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod propagation;
pub mod scene;
pub mod trainer;
