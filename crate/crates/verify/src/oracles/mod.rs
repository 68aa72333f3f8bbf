//! Slow, direct implementations used only as references.

pub mod gradient;
pub mod owners;
pub mod render;

pub use gradient::{check_class, objective, ClassCheck, FdSettings, GradSample};
pub use owners::{brute_owner, brute_soft_weights};
pub use render::{brute_render, sh_color, BruteImage};
