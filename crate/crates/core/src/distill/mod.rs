//! SDS, VSD and APFO driving a generator's parameters against a prior.

mod aux;
mod config;
mod grads;
mod record;
mod run;

pub use aux::{AnchoredDenoiser, AuxInstance, AuxState};
pub use config::{AuxMode, DistillConfig, Lambda, Method, OptimizerConfig};
pub use grads::{apfo_target, regression_loss, sds_grad, vsd_grad, ApfoTarget, DistillGrad};
pub use record::{RunStatus, TrajectoryRecord, TrajectoryRow, CSV_HEADER};
pub use run::{run_distillation, Distiller, ParamOptimizer, PriorSource, ViewPrior};
