//! Score-based diffusion density estimation for exponential-interaction
//! densities on `[-1, 1]^d`.

// `!(a > b)` comparisons deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod decomposition;
pub mod density;
pub mod distances;
pub mod error;
pub mod nn;
pub mod optim;
pub mod oracle;
pub mod quad;
pub mod rng;
pub mod sampler;
pub mod samples;
pub mod schedule;
pub mod score;
pub mod score_matching;

pub use density::{CliqueSet, CosineTerm, InteractionDensity, QuadSpec, SmoothComponent};
pub use error::{Error, Result};
pub use nn::{CheckpointMeta, Encoding, Gradient, ScoreNetwork};
pub use oracle::{DiffusedOracle, GaussianMixture, OracleMethod};
pub use sampler::{reverse_sample, SampleOutput, SamplerConfig, StepGrid};
pub use samples::Samples;
pub use schedule::{Schedule, ScheduleKind, TimeWindow};
pub use score::{FnScore, ScoreFunction, ZeroScore};
pub use score_matching::{train, train_piecewise, PiecewiseScore, TimeGrid, TrainPlan};
