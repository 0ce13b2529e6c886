//! Experiment harness: synthetic tasks with a domain-shift knob, the
//! component ablation grid, K-shot sweeps, theorem checks and report export.

mod ablation;
mod report;
mod synthetic;
mod verify;

pub use ablation::{
    ablation_grid, run_ablation, run_shots_sweep, AblationConfig, RunReport, DEFAULT_SHOTS,
};
pub use report::{Report, ReportFormat, ReportKind};
pub use synthetic::{generate_synthetic, make_synthetic_task, SyntheticSpec, SyntheticTask};
pub use verify::{
    random_interior_point, random_tangent, verify_theorems, verify_theorems_with, CheckResult,
    VerificationReport, VerifyPlan, RESIDUAL_SCALES,
};
