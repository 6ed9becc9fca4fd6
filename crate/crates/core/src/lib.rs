//! Anchor matching, sparse detection labels, a staged training-pipeline
//! throughput model and a Lipschitz/trust-region hyperparameter optimizer.

pub mod geometry;
pub mod hyperopt;
pub mod matching;
pub mod pipeline;
pub mod sparse_labels;

pub use geometry::{BBox, GridSpec, ScoredBox};
pub use matching::{DedupMode, MatchAssignment, MatchConfig};
pub use sparse_labels::{LabelBox, LabelRecord, SparseLabelBatch};
