//! Two-stage neural graph matching with iterative neighborhood-consensus
//! refinement, plus a classical graduated-assignment solver and brute-force
//! validation oracles.
//!
//! The pipeline: a message-passing network embeds both graphs and inner
//! products of the embeddings give initial soft correspondences; a second
//! network then transports node colorings through the correspondence matrix
//! and compares how they distribute over neighborhoods, iteratively
//! re-ranking candidates until matched neighborhoods agree.

pub mod consensus;
pub mod correspondence;
pub mod diff;
pub mod gnn;
pub mod graph;
pub mod oracle;
pub mod seeding;
pub mod trainer;

pub use consensus::{ConsensusConfig, GraduatedAssignmentConfig, IndicatorKind, Normalization};
pub use correspondence::{DenseCorrespondence, SparseCorrespondence};
pub use diff::{DiffError, SparseMatrix, Tape, TensorId};
pub use gnn::{GnnConfig, GnnParams, MlpParams, OperatorKind};
pub use graph::{Graph, GraphError, MatchPair, SyntheticConfig};
pub use trainer::{ModelParams, TrainConfig};
