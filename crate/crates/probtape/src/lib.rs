//! Probabilistic models as compositions of random variables on a
//! define-by-run tape, with inference as a first-class, composable object.
//!
//! A model is a host-language function that declares named random variables
//! on a [`Tape`]; tracing it substitutes data, approximations, or free
//! values for those variables and records every operation for reverse-mode
//! gradients. Inference pairs such a model with approximating families and
//! an algorithm — variational (four gradient estimators, MAP, the
//! importance-weighted bound), Monte Carlo (HMC, SGLD, random-walk MH into
//! Empirical stores), or adversarial — all driven through the same
//! `initialize` / `update` / `run` surface, with per-variable scale factors
//! for unbiased minibatch subsampling.

pub mod check;
pub mod compose;
pub mod dist;
pub mod error;
pub mod gan;
pub mod infer;
pub mod mc;
pub mod model;
pub mod opt;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod vi;

pub use dist::{kl_normal_normal, Dist, Empirical, EmpiricalSummary};
pub use error::{Error, Result};
pub use infer::{
    algorithm_registry, Algorithm, Approx, DataSource, Diagnostics, Estimator, FeedSlot,
    HmcConfig, InferenceProblem, InferenceState, IwaeConfig, KlqpConfig, MhConfig, SgldConfig,
    Transform,
};
pub use model::{
    dirichlet_process_draw, log_joint, trace, Bindings, Feeds, ModelCtx, ModelFn, Source, Trace,
};
pub use opt::{Optimizer, OptimizerConfig, OptimizerKind};
pub use tape::{grad_check, Grads, Param, ParamStore, Tape, Value};
pub use tensor::Tensor;
