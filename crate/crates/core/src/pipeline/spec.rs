use std::collections::BTreeMap;

use crate::datagen::{GeneratorConfig, SamplingConfig, DEFAULT_TASK};
use crate::error::{Error, Result};
use crate::losses::DistillMetric;
use crate::models::{StudentArch, TeacherArch};
use crate::signal_store::JoinConfig;

/// Generator knobs shared by every arm. The per-seed [`GeneratorConfig`]
/// is derived from these plus the run seed.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorSettings {
    pub feature_dim: usize,
    pub weight_norm: f64,
    pub drift_rate: f64,
    pub noise_std: f64,
    pub positive_rate: f64,
    pub interaction_pairs: usize,
    pub interaction_scale: f64,
    pub traffic_sources: Vec<(String, f64)>,
}

impl GeneratorSettings {
    pub fn config(&self, seed: u64, drift_start_step: u64) -> GeneratorConfig {
        let mut cfg = GeneratorConfig::seeded(self.feature_dim, self.weight_norm, seed);
        cfg.drift_rate = self.drift_rate;
        cfg.drift_start_step = drift_start_step;
        cfg.noise_std = self.noise_std;
        cfg.positive_rate_target = self.positive_rate;
        cfg.traffic_sources = self.traffic_sources.clone();
        cfg.interaction_pairs = self.interaction_pairs;
        cfg.interaction_scale = self.interaction_scale;
        cfg
    }

    pub fn source_names(&self) -> Vec<&str> {
        self.traffic_sources.iter().map(|(s, _)| s.as_str()).collect()
    }
}

/// Step layout. Global time runs through the teacher-only warm-up, then
/// the batch phase, then the streaming phase.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schedule {
    pub teacher_warmup_steps: u64,
    pub batch_steps: u64,
    pub batch_size: usize,
    pub stream_steps: u64,
    pub stream_batch_size: usize,
    /// Relative to the first streaming step.
    pub drift_start: u64,
    pub eval_every: u64,
    pub eval_size: usize,
}

impl Schedule {
    pub fn batch_start(&self) -> u64 {
        self.teacher_warmup_steps
    }

    pub fn stream_start(&self) -> u64 {
        self.teacher_warmup_steps + self.batch_steps
    }

    pub fn end(&self) -> u64 {
        self.stream_start() + self.stream_steps
    }

    pub fn student_steps(&self) -> u64 {
        self.batch_steps + self.stream_steps
    }

    /// Student-relative step counts after which an evaluation is taken.
    pub fn eval_points(&self) -> Vec<u64> {
        let total = self.student_steps();
        let mut points: Vec<u64> = (1..=total).filter(|k| k % self.eval_every == 0).collect();
        if points.last() != Some(&total) && total > 0 {
            points.push(total);
        }
        points
    }

    pub fn events_per_step(&self, global_step: u64) -> usize {
        if global_step >= self.stream_start() {
            self.stream_batch_size
        } else {
            self.batch_size
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.stream_batch_size == 0 {
            return Err(Error::config("schedule batch sizes must be >= 1"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("schedule.eval_every must be >= 1"));
        }
        if self.eval_size < 2 {
            return Err(Error::config("schedule.eval_size must be >= 2"));
        }
        if self.student_steps() == 0 {
            return Err(Error::config("schedule has no student steps"));
        }
        Ok(())
    }
}

/// Sampling parameters for one side before traffic sources are known.
#[derive(Debug, Clone, PartialEq)]
pub struct SideSampling {
    pub r_s: f64,
    pub r_plus: f64,
    pub b_s: f64,
    pub p_x: f64,
    pub p_x_by_source: BTreeMap<String, f64>,
}

impl SideSampling {
    pub fn negative_downsampling(r_s: f64) -> Self {
        Self {
            r_s,
            r_plus: 1.0,
            b_s: 0.0,
            p_x: 1.0,
            p_x_by_source: BTreeMap::new(),
        }
    }

    pub fn resolve(&self, sources: &[&str]) -> SamplingConfig {
        SamplingConfig {
            r_s: self.r_s,
            r_plus: self.r_plus,
            b_s: self.b_s,
            p_x_by_source: sources
                .iter()
                .map(|s| {
                    let p = self.p_x_by_source.get(*s).copied().unwrap_or(self.p_x);
                    ((DEFAULT_TASK.to_string(), s.to_string()), p)
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherSpec {
    pub arch: TeacherArch,
    pub sampling: SideSampling,
    /// Teacher events per step as a multiple of the student's.
    pub data_multiplier: usize,
    pub learning_rate: f64,
    /// Gradient-step size inside one update epoch.
    pub minibatch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudentSpec {
    pub arch: StudentArch,
    pub sampling: SideSampling,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Alpha {
    Fixed(f64),
    /// Chosen from the first distillation batch so both losses have the
    /// same magnitude.
    Auto,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub alpha: Alpha,
    pub tau: f64,
    pub metric: DistillMetric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TowerMode {
    Single,
    Decoupled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AuxLoss {
    TaskAndDistill,
    DistillOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModeFlags {
    pub distill: bool,
    pub tower: TowerMode,
    pub aux_loss: AuxLoss,
    /// Compare teacher and student in corrected probability space.
    pub debias: bool,
    /// Correct the teacher logit with the student-side function rather
    /// than the teacher's own.
    pub rebias: bool,
    pub batch_distill: bool,
    pub stream_distill: bool,
}

impl ModeFlags {
    pub fn baseline() -> Self {
        Self {
            distill: false,
            ..Self::default()
        }
    }
}

impl Default for ModeFlags {
    fn default() -> Self {
        Self {
            distill: true,
            tower: TowerMode::Decoupled,
            aux_loss: AuxLoss::TaskAndDistill,
            debias: true,
            rebias: true,
            batch_distill: true,
            stream_distill: true,
        }
    }
}

/// Replaces signals consumed at student steps `start..=end` with Gaussian
/// noise. With `detect` the corrupted signals are treated as missing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FaultSpec {
    pub start: u64,
    pub end: u64,
    pub noise_std: f64,
    pub detect: bool,
}

impl FaultSpec {
    pub fn covers(&self, student_step: u64) -> bool {
        (self.start..=self.end).contains(&student_step)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArmSpec {
    pub name: String,
    pub teacher: TeacherSpec,
    pub student: StudentSpec,
    pub loss: LossConfig,
    pub join: JoinConfig,
    pub flags: ModeFlags,
    pub fault: Option<FaultSpec>,
}

impl ArmSpec {
    pub fn validate(&self) -> Result<()> {
        let ctx = |e: Error| Error::config(format!("arm `{}`: {e}", self.name));
        if self.name.is_empty() || !self.name.chars().all(|c| c.is_ascii_alphanumeric() || "_-/+".contains(c)) {
            return Err(Error::config(format!(
                "arm name `{}` must be non-empty and use only letters, digits and `_-/+`",
                self.name
            )));
        }
        if self.teacher.data_multiplier == 0 {
            return Err(ctx(Error::config("teacher.data_multiplier must be >= 1")));
        }
        if self.teacher.minibatch == 0 {
            return Err(ctx(Error::config("teacher.minibatch must be >= 1")));
        }
        if self.teacher.arch.depth > 0 && self.teacher.arch.width == 0 {
            return Err(ctx(Error::config("teacher.width must be >= 1")));
        }
        for lr in [self.teacher.learning_rate, self.student.learning_rate] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(ctx(Error::config(format!("learning rate must be positive, got {lr}"))));
            }
        }
        self.student.arch.validate().map_err(ctx)?;
        self.join.validate().map_err(ctx)?;
        if let Alpha::Fixed(a) = self.loss.alpha {
            if !(a >= 0.0 && a.is_finite()) {
                return Err(ctx(Error::config(format!("loss.alpha must be >= 0, got {a}"))));
            }
        }
        if !(self.loss.tau > 0.0 && self.loss.tau.is_finite()) {
            return Err(ctx(Error::config("loss.tau must be > 0")));
        }
        if let Some(f) = self.fault {
            if f.start > f.end || !(f.noise_std >= 0.0) {
                return Err(ctx(Error::config("fault needs start <= end and noise_std >= 0")));
            }
        }
        for side in [&self.teacher.sampling, &self.student.sampling] {
            side.resolve(&[]).validate().map_err(ctx)?;
            for p in std::iter::once(&side.p_x).chain(side.p_x_by_source.values()) {
                if !(*p > 0.0 && *p <= 1.0) {
                    return Err(ctx(Error::config(format!("p_x must be in (0, 1], got {p}"))));
                }
            }
        }
        Ok(())
    }

    /// The same arm with distillation switched off.
    pub fn as_baseline(&self) -> ArmSpec {
        ArmSpec {
            flags: ModeFlags::baseline(),
            fault: None,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub name: String,
    pub generator: GeneratorSettings,
    pub schedule: Schedule,
    pub seeds: Vec<u64>,
    pub arms: Vec<ArmSpec>,
    /// Run seeds on separate threads.
    pub parallel: bool,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.generator.config(0, 0).validate()?;
        if self.seeds.is_empty() {
            return Err(Error::config("experiment.seeds must list at least one seed"));
        }
        if self.arms.is_empty() {
            return Err(Error::config("experiment needs at least one arm"));
        }
        for (i, arm) in self.arms.iter().enumerate() {
            arm.validate()?;
            if self.arms[..i].iter().any(|a| a.name == arm.name) {
                return Err(Error::config(format!("duplicate arm name `{}`", arm.name)));
            }
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return Err(Error::config("experiment.seeds has duplicates"));
        }
        Ok(())
    }

    pub fn arm(&self, name: &str) -> Option<&ArmSpec> {
        self.arms.iter().find(|a| a.name == name)
    }

    pub fn arm_names(&self) -> Vec<String> {
        self.arms.iter().map(|a| a.name.clone()).collect()
    }
}
