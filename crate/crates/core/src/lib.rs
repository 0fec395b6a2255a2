//! Stochastic-gradient MCMC for hidden Markov models on long sequences.
//!
//! Generic over the scalar type; the aliases at the bottom fix it to `f64`.

#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::assign_op_pattern,
    clippy::needless_range_loop
)]

pub mod adaptivity;
pub mod emissions;
pub mod error;
pub mod eval;
pub mod gradient;
pub mod hmm;
pub mod linalg;
pub mod prior;
pub mod sampler;
pub mod scalar;

pub use adaptivity::{
    buffer_length, estimate_lyapunov, estimate_lyapunov_with, max_batch_count, mixing_time, sample_minibatch,
    BufferPolicy, GapPolicy, LyapunovConfig, LyapunovDrive, LyapunovEstimate, LyapunovMethod, MixingTime,
};
pub use emissions::{Emission, EmissionGradient, EmissionModel, Family, Gaussian, LogNormal, NaturalMetric};
pub use error::{Error, Result};
pub use eval::{
    align_by_emissions, dataset_family, dataset_params, default_prior, evaluation_points, hungarian, iid_baseline_fit,
    k_step_predictive, make_dataset, model_selection_score, posterior_mean, predictive_report, transition_error,
    transition_error_with, DatasetKind, NormKind, PredictiveReport, TransitionError,
};
pub use gradient::{
    boundary_messages, emission_gradient_term, full_gradient, prior_term, state_weights, stochastic_gradient,
    transition_gradient_term, window_log_likelihood, window_terms, Boundary, GradientOptions, Minibatch,
    PotentialGradient, SubsequenceWindow,
};
pub use hmm::{
    backward_likelihood, forward_predictive, log_marginal_likelihood, simulate, BackwardMessage, ForwardMessage,
    HmmParams, MessagePair, ObservationSequence,
};
pub use linalg::Matrix;
pub use prior::{EmissionPrior, InverseWishart, Prior, TransitionPrior};
pub use sampler::{
    kmeans_init, normalize_transition, run_batch_rld, run_batch_rld_from, run_batch_rld_observed, run_sg_mcmc,
    run_sg_mcmc_from, run_sg_mcmc_observed, sgld_step_emissions, sgld_step_gaussian, sgld_step_lognormal,
    sgld_step_transition, BufferMode, Epoch, GapMode, GuardStats, NoiseEstimate, RunConfig, SamplerState, StepDecay,
    Structure, Trace, TraceSample,
};
pub use scalar::{log_sum_exp, Real};

pub type Params = HmmParams<f64>;
pub type Sequence = ObservationSequence<f64>;
pub type Mat = Matrix<f64>;
