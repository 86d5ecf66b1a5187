//! Hypothesis evaluation by aggregating many evidence sentences, with the
//! autodiff engine, encoders, training loop and evaluation it needs.

pub mod dataio;
pub mod diffcore;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod evidence;
pub mod experiment;
pub mod fixture;
pub mod gradsuite;
pub mod retrieval;
pub mod textio;
pub mod training;

pub use dataio::{Dataset, HypothesisInstance, QuestionClass, Split, SplitData, Task};
pub use encoders::{EncoderConfig, EncoderKind, FocusKind};
pub use error::{Error, Result};
pub use evaluation::{MultiRunReport, ResultRow, RunStatistics};
pub use evidence::{Model, ModelConfig, Scheme};
pub use experiment::ExperimentConfig;
pub use training::{Checkpoint, TrainConfig, TrainOutcome};
