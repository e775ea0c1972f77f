//! IO and orchestration companion to `ducos-core`: file formats (prompts,
//! checkpoints, scenes, depth maps), run configuration, the training and
//! evaluation drivers, and the command-line interface on top of them.

pub mod checkpoint;
pub mod depthio;
pub mod dpf;
pub mod error;
pub mod eval;
pub mod export;
pub mod history;
pub mod run;
pub mod runconfig;
pub mod scenefile;

pub use error::{AppError, Result};
