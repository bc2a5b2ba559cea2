//! Debiased recommendation from biased interaction logs.
//!
//! A teacher disentangles each user's invariant and variant preference with
//! an adversarial environment classifier; a distance-aware fusion of both
//! predictions is then distilled into a small matrix-factorization student.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod distill;
pub mod embedding;
pub mod error;
pub mod metrics;
pub mod pipeline;
pub mod rng;
pub mod teacher;

pub use data::{Interaction, InteractionTable};
pub use distill::{DistillConfig, DistillMode, StudentModel};
pub use error::{Error, Result};
pub use metrics::{MetricReport, Scorer};
pub use teacher::{TeacherConfig, TeacherModel};
