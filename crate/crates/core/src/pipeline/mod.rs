//! Hybrid batch/streaming distillation runs and their presets.
//!
//! Each seed trains one teacher per distinct teacher spec over the whole
//! horizon, persisting a signal for every event it sees before updating on
//! it. Students then replay the same event stream: a large-batch phase
//! reading the stored signals, followed by a streaming phase that joins
//! fresh events against the store under the configured lag and retries.
//! Every arm also gets a baseline student with distillation off, trained on
//! the identical stream.

mod config;
mod presets;
mod run;
mod spec;

pub use config::{load_config, parse_config, snapshot};
pub use presets::{default_spec, preset, CAPACITY_GRID, DESK_STUDENT, DESK_TEACHER, PRESET_NAMES};
pub use run::{
    eval_sets, run_batch_phase, run_experiment, run_seed, run_streaming_phase, run_student, run_teacher,
    seed_generator, EvalPoint, EvalSet, ExperimentResult, Phase, PhaseState, RunRecord, SeedOutcome,
    StudentContext, StudentTrainer, TeacherRun,
};
pub use spec::{
    Alpha, ArmSpec, AuxLoss, ExperimentSpec, FaultSpec, GeneratorSettings, LossConfig, ModeFlags, Schedule,
    SideSampling, StudentSpec, TeacherSpec, TowerMode,
};
