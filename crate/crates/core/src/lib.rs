//! Compute-optimal planning for contrastive fine-tuning of decoder-only
//! language models into text embedders.
//!
//! The crate accounts the FLOP cost of four fine-tuning methods (full,
//! block freezing, LoRA and bias-only), fits parametric scaling laws to run
//! logs, builds IsoFLOP profiles and loss frontiers, and turns a compute
//! budget into a concrete training plan.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod contrastive;
pub mod costmodel;
pub mod error;
pub mod ingest;
pub mod isoflop;
pub mod recipe;
pub mod scalinglaw;
pub mod synth;

pub(crate) mod digest;
pub mod stats;

pub use costmodel::{
    count_params, flop_cost, param_counts, tokens_for_budget, Budget, FineTuneMethod, MethodClass,
    ModelArch, ParamCounts, Registry,
};
pub use error::{Error, Result};
pub use ingest::{RunRecord, RunSet};
pub use recipe::{plan, plan_freeze, Plan, PlannerArtifacts};
pub use scalinglaw::{ChinchillaParams, FitConfig, FitReport, FittedParams, Formula, ModifiedParams};



