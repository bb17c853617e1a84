use super::spec::{
    Alpha, ArmSpec, AuxLoss, ExperimentSpec, GeneratorSettings, LossConfig, ModeFlags, Schedule, SideSampling,
    StudentSpec, TeacherSpec, TowerMode,
};
use crate::error::{Error, Result};
use crate::losses::DistillMetric;
use crate::models::{StudentArch, TeacherArch};
use crate::signal_store::{JoinConfig, MissingPolicy};

pub const PRESET_NAMES: [&str; 11] = [
    "main",
    "capacity_grid",
    "arch_grid",
    "tower_ablation",
    "debias_ablation",
    "stream_ablation",
    "batch_ablation",
    "data_scaling",
    "mse_vs_ce",
    "alpha_sweep",
    "fanout_1toN",
];

pub const DESK_STUDENT: StudentArch = StudentArch {
    backbone_depth: 2,
    backbone_width: 16,
    tower_depth: 1,
    tower_width: 8,
};

pub const DESK_TEACHER: TeacherArch = TeacherArch { depth: 3, width: 64 };

/// Capacity grid from largest to smallest.
pub const CAPACITY_GRID: [(&str, StudentArch); 3] = [
    (
        "large",
        StudentArch {
            backbone_depth: 4,
            backbone_width: 48,
            tower_depth: 1,
            tower_width: 16,
        },
    ),
    (
        "medium",
        StudentArch {
            backbone_depth: 2,
            backbone_width: 16,
            tower_depth: 1,
            tower_width: 8,
        },
    ),
    (
        "small",
        StudentArch {
            backbone_depth: 1,
            backbone_width: 6,
            tower_depth: 1,
            tower_width: 4,
        },
    ),
];

fn default_arm(name: &str) -> ArmSpec {
    ArmSpec {
        name: name.to_string(),
        teacher: TeacherSpec {
            arch: DESK_TEACHER,
            sampling: SideSampling::negative_downsampling(1.0),
            data_multiplier: 2,
            learning_rate: 2e-3,
            minibatch: 128,
        },
        student: StudentSpec {
            arch: DESK_STUDENT,
            sampling: SideSampling::negative_downsampling(1.0),
            learning_rate: 2e-3,
        },
        loss: LossConfig {
            alpha: Alpha::Fixed(3.0),
            tau: 1.0,
            metric: DistillMetric::Ce,
        },
        join: JoinConfig {
            availability_lag: 2,
            max_retries: 3,
            retry_delay: 1,
            missing_policy: MissingPolicy::SkipDistill,
        },
        flags: ModeFlags::default(),
        fault: None,
    }
}

/// Desk-scale defaults with a single distilled arm.
pub fn default_spec() -> ExperimentSpec {
    ExperimentSpec {
        name: "main".into(),
        generator: GeneratorSettings {
            feature_dim: 32,
            weight_norm: 1.5,
            drift_rate: 0.002,
            noise_std: 0.5,
            positive_rate: 0.25,
            interaction_pairs: 8,
            interaction_scale: 1.5,
            traffic_sources: vec![("organic".into(), 1.0)],
        },
        schedule: Schedule {
            teacher_warmup_steps: 300,
            batch_steps: 300,
            batch_size: 256,
            stream_steps: 300,
            stream_batch_size: 64,
            drift_start: 0,
            eval_every: 50,
            eval_size: 10_000,
        },
        seeds: vec![1, 2, 3, 4, 5],
        arms: vec![default_arm("distill")],
        parallel: false,
    }
}

fn with_arms(name: &str, arms: Vec<ArmSpec>) -> ExperimentSpec {
    ExperimentSpec {
        name: name.to_string(),
        arms,
        ..default_spec()
    }
}

fn arm(name: &str, edit: impl FnOnce(&mut ArmSpec)) -> ArmSpec {
    let mut a = default_arm(name);
    edit(&mut a);
    a
}

pub fn preset(name: &str) -> Result<ExperimentSpec> {
    let spec = match name {
        "main" => default_spec(),
        "capacity_grid" => with_arms(
            name,
            CAPACITY_GRID
                .iter()
                .map(|(n, a)| arm(n, |x| x.student.arch = *a))
                .collect(),
        ),
        // similar parameter budgets spent on depth or on width
        "arch_grid" => with_arms(
            name,
            vec![
                arm("deep_narrow", |x| {
                    x.student.arch = StudentArch {
                        backbone_depth: 4,
                        backbone_width: 12,
                        ..DESK_STUDENT
                    }
                }),
                arm("balanced", |_| {}),
                arm("shallow_wide", |x| {
                    x.student.arch = StudentArch {
                        backbone_depth: 1,
                        backbone_width: 28,
                        ..DESK_STUDENT
                    }
                }),
            ],
        ),
        "tower_ablation" => with_arms(
            name,
            vec![
                arm("decoupled_task_distill", |_| {}),
                arm("decoupled_distill_only", |x| x.flags.aux_loss = AuxLoss::DistillOnly),
                arm("single_task_distill", |x| x.flags.tower = TowerMode::Single),
                arm("single_distill_only", |x| {
                    x.flags.tower = TowerMode::Single;
                    x.flags.aux_loss = AuxLoss::DistillOnly;
                }),
            ],
        ),
        "debias_ablation" => {
            let sampled = |x: &mut ArmSpec| {
                x.teacher.sampling = SideSampling::negative_downsampling(10.0);
                x.student.sampling = SideSampling::negative_downsampling(2.0);
            };
            with_arms(
                name,
                vec![
                    arm("w/o_debias", |x| {
                        sampled(x);
                        x.flags.rebias = false;
                    }),
                    arm("with_debias", sampled),
                ],
            )
        }
        "stream_ablation" => with_arms(
            name,
            vec![
                arm("with_stream", |_| {}),
                arm("w/o_stream", |x| x.flags.stream_distill = false),
            ],
        ),
        "batch_ablation" => with_arms(
            name,
            vec![
                arm("batch_and_stream", |_| {}),
                arm("stream_only", |x| x.flags.batch_distill = false),
            ],
        ),
        "data_scaling" => with_arms(
            name,
            vec![
                arm("w/o_data_scaling", |x| x.teacher.data_multiplier = 1),
                arm("with_data_scaling", |x| x.teacher.data_multiplier = 2),
            ],
        ),
        "mse_vs_ce" => with_arms(
            name,
            vec![
                arm("ce", |_| {}),
                arm("mse", |x| x.loss.metric = DistillMetric::Mse),
            ],
        ),
        "alpha_sweep" => with_arms(
            name,
            [1.0, 3.0, 10.0, 30.0]
                .iter()
                .map(|&a| arm(&format!("alpha_{a}"), |x| x.loss.alpha = Alpha::Fixed(a)))
                .chain(std::iter::once(arm("alpha_auto", |x| x.loss.alpha = Alpha::Auto)))
                .collect(),
        ),
        "fanout_1toN" => with_arms(
            name,
            vec![
                arm("student_a", |_| {}),
                arm("student_b", |_| {}),
                arm("student_wide", |x| {
                    x.student.arch = StudentArch {
                        backbone_width: 32,
                        ..DESK_STUDENT
                    }
                }),
            ],
        ),
        other => return Err(Error::UnknownPreset(other.to_string())),
    };
    spec.validate()?;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::build_student;
    use crate::datagen::SamplingConfig;

    #[test]
    fn every_preset_resolves() {
        for name in PRESET_NAMES {
            let spec = preset(name).unwrap();
            assert_eq!(spec.name, name);
            assert!(!spec.arms.is_empty());
        }
        assert!(matches!(preset("tables"), Err(Error::UnknownPreset(_))));
    }

    #[test]
    fn tower_ablation_has_four_arms() {
        let spec = preset("tower_ablation").unwrap();
        let modes: Vec<_> = spec.arms.iter().map(|a| (a.flags.tower, a.flags.aux_loss)).collect();
        assert_eq!(modes.len(), 4);
        for t in [TowerMode::Single, TowerMode::Decoupled] {
            for l in [AuxLoss::TaskAndDistill, AuxLoss::DistillOnly] {
                assert!(modes.contains(&(t, l)));
            }
        }
    }

    #[test]
    fn capacity_grid_shrinks_with_one_teacher() {
        let spec = preset("capacity_grid").unwrap();
        assert_eq!(spec.arms.len(), 3);
        assert!(spec.arms.iter().all(|a| a.teacher == spec.arms[0].teacher));
        let sampling = SamplingConfig::negative_downsampling(1.0, &["organic"]);
        let counts: Vec<usize> = spec
            .arms
            .iter()
            .map(|a| build_student(a.student.arch, 32, sampling.clone(), 0).unwrap().param_count())
            .collect();
        assert!(counts.windows(2).all(|w| w[0] > w[1]), "{counts:?}");
    }

    #[test]
    fn ablations_flip_one_factor() {
        let batch = preset("batch_ablation").unwrap();
        assert!(!batch.arms[1].flags.batch_distill && batch.arms[1].flags.stream_distill);
        let stream = preset("stream_ablation").unwrap();
        assert!(!stream.arms[1].flags.stream_distill && stream.arms[1].flags.batch_distill);
        let scale = preset("data_scaling").unwrap();
        assert_eq!(scale.arms[0].teacher.data_multiplier * 2, scale.arms[1].teacher.data_multiplier);
        assert_eq!(scale.arms[0].student, scale.arms[1].student);
        let debias = preset("debias_ablation").unwrap();
        assert_eq!(debias.arm_names(), vec!["w/o_debias", "with_debias"]);
        assert!(debias.arms[1].flags.rebias && !debias.arms[0].flags.rebias);
    }
}
