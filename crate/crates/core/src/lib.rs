//! A desk-scale pruning laboratory for tiny transformers.
//!
//! The crate trains a small from-scratch transformer encoder with
//! reverse-mode autodiff and prunes it with the SEVEN criterion — an
//! accumulated `|theta ⊙ corrected gradient|` score whose correction is
//! the ratio of bias-corrected Polyak averages of the gradient and its
//! square — alongside magnitude, random, and single-batch saliency
//! baselines. Sparsity ramps follow an exponential schedule for
//! pre-pruning and a cubic schedule for dynamic pruning. Gradient-noise
//! diagnostics (relative gradient variation, noise variance, retained
//! gradient change) quantify what the masks did to the surviving
//! subnetwork.
//!
//! Everything is deterministic given a seed; identical configurations
//! reproduce masks and losses bit for bit.

pub mod data;
pub mod diagnostics;
pub mod error;
pub mod graph;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod runner;
pub mod schedule;
pub mod score;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Graph, NodeId};
pub use mask::{apply_mask, build_mask, threshold, Mask};
pub use model::{
    attention_grad_oracle, eval_accuracy, forward_loss, init_model, Batch, ForwardPass, ParamStore,
    TransformerConfig,
};
pub use optim::{OptimKind, OptimizerState};
pub use runner::{run, run_streaming, Method, RunObserver, RunOutput, RunPlan};
pub use schedule::{rate_cubic, rate_exponential, ScheduleKind, SparsitySchedule};
pub use score::{baseline_score, ScoreState, ScoreVariant};
pub use tensor::Tensor;
