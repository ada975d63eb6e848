//! Cost modelling and plan search for pipeline-parallel transformer training.
//!
//! The crate is layered bottom-up: [`symexpr`] provides the symbolic
//! expressions that [`workload`] and [`stagecost`] build their accounting
//! from, [`interference`] turns per-channel durations into wall-clock time,
//! [`pipesim`] evaluates whole pipelines, and [`intratuner`] /
//! [`intertuner`] search the configuration space.

pub mod interference;
pub mod intertuner;
pub mod intratuner;
pub mod pipesim;
pub mod plan;
pub mod stagecost;
pub mod symexpr;
pub mod workload;

pub use interference::{ChannelVector, InterferenceParams};
pub use intertuner::{tune, TrainingPlan, TuneOptions};
pub use intratuner::{ParetoFrontier, Preset, SearchSpace};
pub use pipesim::{PipelinePlan, StageTiming};
pub use plan::PlanFile;
pub use stagecost::{CostModel, IterationContext, StageConfig, StageCost};
pub use workload::{ClusterSpec, ModelSpec, OpTimeTable};
