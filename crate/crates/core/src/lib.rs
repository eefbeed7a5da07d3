//! Federated prediction serving: providers answer the same queries, an
//! aggregator fuses their answers with iterative truth discovery, scores
//! each provider against a random peer, and an escrow ledger pays them.

pub mod canonical;
pub mod crypto;
pub mod experiment;
pub mod formats;
pub mod id;
pub mod incentive;
pub mod journal;
pub mod ledger;
pub mod net;
pub mod providers_sim;
pub mod seeding;
pub mod serving;
pub mod truth_discovery;
pub mod wire;

pub use formats::{Format, FormatError, LabelSpace, PredictionMatrix, PredictionVector};
pub use id::Id;
pub use incentive::{MechanismParams, ScoreReport, Strategy};
pub use ledger::{Ledger, LedgerError, Micros, Phase, Settlement};
pub use providers_sim::Case;
pub use serving::{SealedResult, Submission, TaskSession, TaskSpec};
pub use truth_discovery::{TdConfig, TruthEstimate};
