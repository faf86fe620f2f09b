//! Text + image post classification with four fusion strategies, trained by
//! per-sample SGD on hand-derived gradients.

pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod losses;
pub mod numkit;
pub mod train;

pub use error::{Error, Result};
pub use eval::{evaluate, MetricsReport, ModalityFilter};
pub use fusion::{FusionConfig, Mode, Model, ModelInput, ModelParams};
pub use numkit::{DenseMatrix, DenseVector, SeededRng};
pub use train::{train, TrainState};
