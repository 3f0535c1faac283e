//! Memory-bounded approximation of full cross-entropy over large item catalogs.
//!
//! The crate is organised bottom-up:
//!
//! * [`partition`] buckets encoder outputs and catalog embeddings with random
//!   projections, sorts them by bucket and cuts them into equal chunks. The
//!   resulting [`ChunkPlan`] says which `(row, item)` logits get computed.
//! * [`loss`] evaluates full CE, BCE with many negatives, sampled CE and the
//!   reduced CE over a plan, all with analytic gradients.
//! * [`oracle`] holds slow, obviously-correct references used by the tests.
//! * [`memcost`] is the closed-form memory model.
//! * [`data`], [`train`] and [`eval`] form a small sequential-recommendation
//!   pipeline for checking that the reduced loss trains as well as full CE.
//! * [`synth`] generates synthetic logs and embeddings.

pub mod data;
pub mod error;
pub mod eval;
pub mod loss;
pub mod memcost;
pub mod oracle;
pub mod partition;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use loss::{LossKind, LossResult, ReceParams, RowGrad};
pub use memcost::MemoryEstimate;
pub use partition::{ChunkPlan, PairCountTable, RandomBucketSet, RoundPlan, RoundSeeding};
