//! Engine for turning one image into an explorable 4D scene: point-cloud
//! expansion by view extrapolation, camera-controlled video animation, and a
//! deformable Gaussian splat fit to the animated videos.

pub mod anim;
pub mod bundle;
pub mod config;
pub mod error;
pub mod expansion;
pub mod gaussian;
pub mod geometry;
pub mod pipeline;
pub mod plugins;
pub mod trajectory;
pub mod visibility;
pub mod world;

pub use error::{Error, Result};
