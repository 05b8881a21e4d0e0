//! Membership inference against diffusion models via proximal initialization.
//!
//! The crate contains everything the attacks need: a small tensor type and
//! reverse-mode tape, an MLP noise predictor trained with Adam, discrete and
//! variance-preserving noise schedules, the attacks themselves (PIA, PIAN,
//! the continuous-time PIA-SDE, and the NA and t-error baselines), ROC
//! evaluation, and synthetic datasets.
//!
//! ```
//! use pialab_core::attacks::{AttackMethod, MethodKind};
//! use pialab_core::model::{EpsilonModel, ModelArch, NoisePredictor};
//! use pialab_core::schedule::{DiscreteSchedule, NoiseSchedule};
//! use pialab_core::Tensor;
//!
//! let sched = NoiseSchedule::Discrete(DiscreteSchedule::linear(100, 1e-4, 0.2).unwrap());
//! let model = EpsilonModel::new(ModelArch::standard(2), 0).unwrap();
//! let pia = AttackMethod::new(MethodKind::Pia, 20usize, 4.0);
//! let (score, queries) = pia.score(&model, &Tensor::vector(vec![0.3, -0.1]), 0, &sched).unwrap();
//! assert!(score >= 0.0);
//! assert_eq!(queries, 2);
//! assert_eq!(model.query_count(), 2);
//! ```

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adam;
pub mod attacks;
pub mod checkpoint;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod eval;
mod framing;
pub mod model;
pub mod parallel;
pub mod rng;
pub mod schedule;
pub mod scores;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use schedule::Time;
pub use tensor::{lp_norm, Tensor};
