//! Cold-item boosting in a synthetic marketplace.
//!
//! New items get exposure through a tiered budget ladder: a stacked CTR
//! predictor grades their potential, each stage's CTR is checked against
//! the category benchmark to promote or drop the item, and a paced bidding
//! rule decides which users actually see it.

// `!(x > 0.0)` is how NaN gets rejected along with the out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bidding;
pub mod config;
pub mod error;
pub mod events;
pub mod foundation;
pub mod grading;
pub mod harness;
pub mod ids;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod scalar;
pub mod stack;
pub mod tier;
pub mod world;

pub use config::{AblationFlags, ScenarioConfig};
pub use error::{Error, Result};
pub use events::{Channel, EventRecord};
pub use harness::{prepare, run_ablation_suite, run_prepared, run_scenario, Prepared, RunArtifacts, Suite};
pub use ids::{CategoryId, ItemId, UserId};
pub use scalar::Real;

pub type FoundationModel64 = foundation::FoundationModel<f64>;
pub type FoundationModel32 = foundation::FoundationModel<f32>;
pub type StackModel64 = stack::StackModel<f64>;
pub type StackModel32 = stack::StackModel<f32>;
pub type StackFeatures64 = stack::StackFeatureVector<f64>;
pub type Mlp64 = nn::Mlp<f64>;
pub type Mlp32 = nn::Mlp<f32>;
