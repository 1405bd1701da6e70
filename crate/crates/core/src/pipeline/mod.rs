//! Data, training, evaluation and inference around the core modules.

pub mod config;
pub mod eval;
pub mod gradcheck;
pub mod infer;
pub mod io;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod synth;
pub mod train;

pub use config::Config;
pub use eval::{evaluate, evaluate_pseudo_labels, PseudoLabelReport};
pub use infer::{infer, InferOutput};
pub use io::Image;
pub use metrics::{ConfusionMatrix, MetricsReport};
pub use model::Model;
pub use synth::{synth_generate, Dataset, SyntheticSpec};
pub use train::{train, train_on, TrainOutcome};
