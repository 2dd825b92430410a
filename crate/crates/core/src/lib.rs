//! Pixel-level domain adaptation: a generator maps labeled source images to the style of an
//! unlabeled target domain while a discriminator and a task network are trained alongside it.

pub mod error;
pub mod losses;
pub mod models;
pub mod data;
pub mod quaternion;
pub mod trainer;
pub mod eval;
pub mod toy;

pub use error::{Error, Result};
pub use quaternion::{quaternion_angle, Quaternion};
