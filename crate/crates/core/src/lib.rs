//! Reverse-time bridge editing over analytic Gaussian-mixture diffusion models.
//!
//! The crate is generic over the floating-point type through [`Scalar`]; the
//! `*64` / `*32` aliases below pin the common choices.

// `!(x > 0)` style checks are there to reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod discrete;
pub mod error;
pub mod hedit;
pub mod hfunc;
pub mod inversion;
pub mod metrics;
pub mod model;
pub mod scalar;
pub mod schedule;
pub mod vector;
pub mod verify;

pub use discrete::{DiscreteChain, HTable, MarginalReport};
pub use error::{Error, Result};
pub use hedit::{
    base_step, ef_combined_step, explicit_step, implicit_step, run_edit, EditConfig, EditExpert, EditTrace,
    EngineMode, StepRecord,
};
pub use hfunc::{
    classifier_h_score, edit_direction_f, norm_match, product_score, recon_h_score, reward_h_score,
    ClassifierExpert, ConditionalExpert, Ctx, FeatureMap, FeatureReward, HExpert, ReconExpert, RewardExpert,
    RhoSchedule,
};
pub use inversion::{ddim_invert, ddim_sample, ef_invert, ef_invert_with_noise, mean_step, InversionMode, InversionRecord};
pub use metrics::{evaluate, EditReport, Stats, TaskSpec};
pub use model::{forward_sample, Component, Condition, Label, LabelPosterior, MarginalComponent, MixtureModel};
pub use scalar::Scalar;
pub use schedule::{build_schedule, Schedule, ScheduleRecipe, StepParams};

pub type Schedule64 = Schedule<f64>;
pub type Schedule32 = Schedule<f32>;
pub type MixtureModel64 = MixtureModel<f64>;
pub type MixtureModel32 = MixtureModel<f32>;
pub type InversionRecord64 = InversionRecord<f64>;
pub type EditConfig64 = EditConfig<f64>;
pub type EditTrace64 = EditTrace<f64>;
pub type TaskSpec64 = TaskSpec<f64>;
