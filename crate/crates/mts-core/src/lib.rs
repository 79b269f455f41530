//! Move-to-see visual servoing toolkit.
//!
//! The pipeline: sample randomized occluded-fruit scenes ([`scene`]), render
//! them with a closed-form ray caster ([`render`]), servo a nine-camera rig
//! toward less-occluded views by ascending the fruit-fraction gradient
//! ([`servo`]), harvest (image, gradient) pairs into a binary dataset
//! ([`dataset`]), train a compact convolutional regressor on them ([`nn`]),
//! drive the same servo loop from the regressor's single-camera predictions
//! ([`deep`]), and compare both controllers in paired trials ([`eval`]).
//!
//! Everything is seeded and deterministic: identical seeds give bit-identical
//! scenes, renders, trajectories, datasets, models, and reports.

pub mod dataset;
pub mod deep;
pub mod eval;
pub mod math;
pub mod nn;
pub mod render;
pub mod scene;
pub mod servo;
