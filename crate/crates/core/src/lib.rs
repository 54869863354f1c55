//! Few-shot adaptation of a contrastive image/text projection head over
//! frozen embeddings.
//!
//! The pieces, bottom up:
//! - [`linalg`]: dense matrices, seeded RNG streams, init and finite differences
//! - [`data`]: the in-memory dataset, its binary file format, CSV import and a
//!   synthetic generator
//! - [`tasks`]: N-way task sampling and episode construction
//! - [`model`]: the linear projection model, its loss and analytic gradients
//! - [`train`]: Adam plus the classical, multitask (MAMF) and first-order MAML trainers
//! - [`eval`] and [`report`]: meta-testing, sweeps, CSV tables and SVG figures

mod binio;
pub mod data;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod model;
pub mod report;
pub mod tasks;
pub mod train;

pub use binio::write_atomic;
pub use data::{EmbeddingDataset, SyntheticSpec};
pub use error::{Error, ErrorClass, Result};
pub use eval::{meta_test, sweep, EvalReport, MetaTestPlan, SweepPlan};
pub use linalg::{Matrix, SeededRng};
pub use model::ProjectionModel;
pub use tasks::TaskConfig;
pub use train::{Algorithm, TrainOverrides, TrainPlan};
