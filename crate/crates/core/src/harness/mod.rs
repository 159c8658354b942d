//! Training, evaluation, ablation, gradient checks and attention inspection.

pub mod ablate;
pub mod config;
pub mod gradcheck;
pub mod inspect;
pub mod score;
pub mod train;

pub use config::RunConfig;
pub use score::{score, Counts, EvalReport};
pub use train::{train, train_on, Corpus, MetricsRecord, Session, TrainOutcome};
