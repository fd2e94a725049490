//! Open-world LiDAR 3D detection evaluation toolkit.
//!
//! The library covers four areas:
//! - exact geometry for yaw-rotated 3D boxes ([`geom`]);
//! - KITTI-format ingestion and canonical scene/detection formats
//!   ([`sceneio`]);
//! - unseen-object benchmarks: object banks, copy-paste augmentation, and
//!   frozen synthetic scenes ([`bank`], [`benchgen`]);
//! - evaluation: two-stage matching, top-k recall, OOD scoring metrics,
//!   and loss functions with verified gradients ([`matching`], [`ood`],
//!   [`losses`]).
//!
//! The `owl3d` binary exposes the whole pipeline; see [`cli`].

pub mod bank;
pub mod benchgen;
pub mod cli;
pub mod error;
pub mod geom;
pub mod losses;
pub mod matching;
pub mod ood;
pub mod sceneio;
pub mod seeding;

pub use error::{Error, Result};
