use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::spec::{Alpha, ArmSpec, AuxLoss, ExperimentSpec, Schedule, TeacherSpec, TowerMode};
use crate::datagen::{apply_sampling, mix, EventStream, Generator, InteractionEvent, SamplingConfig, DEFAULT_TASK};
use crate::error::{Error, Result};
use crate::losses::{
    align_alpha, debias, debiased_distill, distill_ce, distill_kl, distill_mse, kd_debias_loss, task_loss,
    DebiasParams, DistillMetric, LossValue,
};
use crate::metrics::{auc, calibration_mae, gain_decomposition, MetricsReport};
use crate::models::{build_student, teacher_forward, StudentGrads, StudentModel, TeacherModel};
use crate::numerics::{optimizer_step, sigmoid, GradientTape, OptimizerState};
use crate::signal_store::{join_stream, JoinConfig, JoinedSample, MissingPolicy, SignalStore};

const TEACHER_INIT: u64 = 0x7e;
const TEACHER_SAMPLING: u64 = 0x7e5a;
const TEACHER_SHUFFLE: u64 = 0x7e5f;
const STUDENT_INIT: u64 = 0x57;
const STUDENT_SAMPLING: u64 = 0x575a;
const FAULT_NOISE: u64 = 0xfa17;

/// Held-out events for one evaluation point, drawn from the eval stream.
#[derive(Debug, Clone)]
pub struct EvalSet {
    /// Student-relative step count after which the evaluation happens.
    pub step: u64,
    pub events: Vec<InteractionEvent>,
    pub labels: Vec<bool>,
}

pub fn eval_sets(generator: &Generator, schedule: &Schedule) -> Result<Vec<EvalSet>> {
    schedule
        .eval_points()
        .into_iter()
        .map(|k| {
            let events = generator.generate(EventStream::Eval, schedule.batch_start() + k, schedule.eval_size)?;
            let labels = events.iter().map(|e| e.label).collect();
            Ok(EvalSet { step: k, events, labels })
        })
        .collect()
}

fn eval_auc(labels: &[bool], scores: &[f64]) -> f64 {
    // A single-class eval set only happens with absurd generator settings.
    auc(labels, scores).unwrap_or(0.5)
}

/// Debias parameters per traffic source for one side.
#[derive(Debug, Clone)]
struct SourceDebias(HashMap<Arc<str>, DebiasParams>);

impl SourceDebias {
    fn new(sampling: &SamplingConfig) -> Result<Self> {
        let mut map = HashMap::new();
        for (task, source) in sampling.p_x_by_source.keys() {
            map.insert(Arc::from(source.as_str()), sampling.debias_params(task, source)?);
        }
        Ok(Self(map))
    }

    fn get(&self, source: &str) -> Result<&DebiasParams> {
        self.0
            .get(source)
            .ok_or_else(|| Error::config(format!("no sampling entry for traffic source `{source}`")))
    }
}

/// Everything the teacher produced over the full horizon.
#[derive(Debug, Clone)]
pub struct TeacherRun {
    pub store: SignalStore,
    /// Teacher AUC keyed by student-relative eval step.
    pub auc: BTreeMap<u64, f64>,
    pub model: TeacherModel,
    pub loss_trace: Vec<f64>,
}

/// Trains the teacher through warm-up, batch and streaming time. At every
/// step the teacher first emits signals for all its events, then trains
/// one epoch on its sampled subset, then bumps its version.
pub fn run_teacher(
    generator: &Generator,
    schedule: &Schedule,
    spec: &TeacherSpec,
    sources: &[&str],
    evals: &[EvalSet],
    seed: u64,
) -> Result<TeacherRun> {
    let sampling = spec.sampling.resolve(sources);
    let mut model = TeacherModel::build(spec.arch, generator.feature_dim(), sampling, mix(seed, TEACHER_INIT))?;
    let mut opt = OptimizerState::new(&model.net, spec.learning_rate)?;
    let mut shuffle = ChaCha8Rng::seed_from_u64(mix(seed, TEACHER_SHUFFLE));
    let mut tape = GradientTape::zeros_like(&model.net);
    let mut store = SignalStore::new();
    let mut auc_at = BTreeMap::new();
    let mut loss_trace = Vec::new();
    let mut next_eval = evals.iter().peekable();

    for g in 0..schedule.end() {
        let n = schedule.events_per_step(g) * spec.data_multiplier;
        let events = generator.generate(EventStream::Train, g, n)?;
        if g >= schedule.batch_start() {
            let (_, signals) = teacher_forward(&model, &events, g)?;
            store.extend(signals)?;
        }
        let mut kept = apply_sampling(&events, &model.sampling, DEFAULT_TASK, mix(seed, TEACHER_SAMPLING))?.kept;
        kept.shuffle(&mut shuffle);
        let mut step_loss = 0.0;
        for chunk in kept.chunks(spec.minibatch) {
            tape.zero();
            for e in chunk {
                let cache = model.net.forward(&e.features)?;
                let loss = task_loss(cache.output()[0], e.label);
                step_loss += loss.value;
                model.net.backward_into(&cache, &[loss.dl_dz], &mut tape)?;
            }
            tape.scale(1.0 / chunk.len() as f64);
            optimizer_step(&mut model.net, &tape, &mut opt)
                .map_err(|e| Error::Divergence(format!("teacher at step {g}: {e}")))?;
        }
        if !step_loss.is_finite() {
            return Err(Error::Divergence(format!("teacher loss at step {g} is {step_loss}")));
        }
        loss_trace.push(step_loss / kept.len().max(1) as f64);
        model.version += 1;

        if g >= schedule.batch_start() {
            let k = g + 1 - schedule.batch_start();
            if let Some(set) = next_eval.next_if(|s| s.step == k) {
                let scores = set
                    .events
                    .iter()
                    .map(|e| Ok(model.net.predict(&e.features)?[0]))
                    .collect::<Result<Vec<f64>>>()?;
                auc_at.insert(k, eval_auc(&set.labels, &scores));
            }
        }
    }
    Ok(TeacherRun {
        store,
        auc: auc_at,
        model,
        loss_trace,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Batch,
    Streaming,
    Done,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalPoint {
    pub step: u64,
    pub auc_main: f64,
    pub auc_aux: Option<f64>,
    pub calibration_mae: f64,
    /// Share of join attempts so far that ended without a signal.
    pub missing_signal_frac: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunRecord {
    /// Mean training loss per student step that had samples.
    pub loss_trace: Vec<f64>,
    pub evals: Vec<EvalPoint>,
    pub join_attempts: u64,
    pub join_missing: u64,
    /// Steps where the main-tower gradient was compared with and without
    /// signal corruption, and how many of them differed in any bit.
    pub isolation_checked_steps: u64,
    pub isolation_mismatches: u64,
    /// Main-tower gradient of every optimizer step, flattened, when
    /// tracing is switched on.
    pub main_grad_trace: Vec<Vec<f64>>,
}

/// Student parameters and optimizer state.
#[derive(Debug, Clone)]
pub struct StudentTrainer {
    pub model: StudentModel,
    opt_backbone: OptimizerState,
    opt_main: OptimizerState,
    opt_aux: OptimizerState,
    alpha: Option<f64>,
    grads: StudentGrads,
}

impl StudentTrainer {
    pub fn new(model: StudentModel, learning_rate: f64) -> Result<Self> {
        Ok(Self {
            opt_backbone: OptimizerState::new(&model.backbone, learning_rate)?,
            opt_main: OptimizerState::new(&model.main_tower, learning_rate)?,
            opt_aux: OptimizerState::new(&model.aux_tower, learning_rate)?,
            alpha: None,
            grads: StudentGrads::zeros_like(&model),
            model,
        })
    }

    pub fn alpha(&self) -> Option<f64> {
        self.alpha
    }
}

#[derive(Debug, Clone)]
pub struct PhaseState {
    pub phase: Phase,
    /// Student steps completed.
    pub step: u64,
    /// Newest teacher version among consumed signals.
    pub teacher_version: Option<u64>,
    pub trainer: StudentTrainer,
    pub record: RunRecord,
    pending: BTreeMap<u64, Vec<TrainSample>>,
}

impl PhaseState {
    pub fn new(trainer: StudentTrainer) -> Self {
        Self {
            phase: Phase::Batch,
            step: 0,
            teacher_version: None,
            trainer,
            record: RunRecord::default(),
            pending: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone)]
struct TrainSample {
    event: InteractionEvent,
    t1: Option<f64>,
    /// Uncorrupted signal when a fault replaced `t1`.
    clean_t1: Option<Option<f64>>,
}

/// Inputs shared by both student phases of one arm and seed.
pub struct StudentContext<'a> {
    pub generator: &'a Generator,
    pub schedule: &'a Schedule,
    pub arm: &'a ArmSpec,
    pub store: &'a SignalStore,
    pub evals: &'a [EvalSet],
    pub seed: u64,
    /// Record the main-tower gradient of every step.
    pub trace_main_grads: bool,
    student_debias: SourceDebias,
    teacher_debias: SourceDebias,
    student_sampling: SamplingConfig,
}

impl<'a> StudentContext<'a> {
    pub fn new(
        generator: &'a Generator,
        schedule: &'a Schedule,
        arm: &'a ArmSpec,
        store: &'a SignalStore,
        evals: &'a [EvalSet],
        seed: u64,
    ) -> Result<Self> {
        let sources: Vec<&str> = generator.config().traffic_sources.iter().map(|(s, _)| s.as_str()).collect();
        let student_sampling = arm.student.sampling.resolve(&sources);
        let teacher_sampling = arm.teacher.sampling.resolve(&sources);
        Ok(Self {
            generator,
            schedule,
            arm,
            store,
            evals,
            seed,
            trace_main_grads: false,
            student_debias: SourceDebias::new(&student_sampling)?,
            teacher_debias: SourceDebias::new(&teacher_sampling)?,
            student_sampling,
        })
    }

    pub fn new_trainer(&self) -> Result<StudentTrainer> {
        let model = build_student(
            self.arm.student.arch,
            self.generator.feature_dim(),
            self.student_sampling.clone(),
            mix(self.seed, STUDENT_INIT),
        )?;
        StudentTrainer::new(model, self.arm.student.learning_rate)
    }

    fn sampled_events(&self, global_step: u64) -> Result<Vec<InteractionEvent>> {
        let n = self.schedule.events_per_step(global_step);
        let events = self.generator.generate(EventStream::Train, global_step, n)?;
        Ok(apply_sampling(&events, &self.student_sampling, DEFAULT_TASK, mix(self.seed, STUDENT_SAMPLING))?.kept)
    }

    fn distill_loss(&self, t1: f64, z: f64, source: &str) -> Result<LossValue> {
        let loss = &self.arm.loss;
        if !self.arm.flags.debias {
            return Ok(match loss.metric {
                DistillMetric::Ce if loss.tau == 1.0 => distill_ce(sigmoid(t1), z),
                DistillMetric::Ce => distill_kl(t1, z, loss.tau),
                DistillMetric::Mse => distill_mse(sigmoid(t1), z),
            });
        }
        let student = self.student_debias.get(source)?;
        if self.arm.flags.rebias {
            Ok(kd_debias_loss(t1, z, student, loss.metric))
        } else {
            let target = debias(t1, self.teacher_debias.get(source)?);
            Ok(debiased_distill(target, z, student, loss.metric, true))
        }
    }

    /// Turns joined samples into training samples, applying the fault
    /// schedule for student step `k`.
    fn prepare(&self, joined: Vec<JoinedSample>, k: u64, state: &mut PhaseState) -> Vec<TrainSample> {
        let fault = self.arm.fault.filter(|f| f.covers(k));
        let mut out = Vec::with_capacity(joined.len());
        for j in joined {
            let mut t1 = j.signal.map(|s| s.t1_logit);
            if let Some(s) = j.signal {
                state.teacher_version = Some(state.teacher_version.map_or(s.teacher_version, |v| v.max(s.teacher_version)));
            }
            let mut clean_t1 = None;
            if let (Some(f), Some(_)) = (fault, t1) {
                clean_t1 = Some(t1);
                if f.detect {
                    t1 = None;
                } else {
                    let mut rng = ChaCha8Rng::seed_from_u64(mix(mix(self.seed, FAULT_NOISE), j.event.sample_id));
                    let noise: f64 = rng.sample(StandardNormal);
                    t1 = Some(f.noise_std * noise);
                }
            }
            if t1.is_none() && clean_t1.is_some() {
                state.record.join_missing += 1;
                if self.arm.join.missing_policy == MissingPolicy::DropSample {
                    continue;
                }
            }
            out.push(TrainSample {
                event: j.event,
                t1,
                clean_t1,
            });
        }
        out
    }

    fn join(&self, events: &[InteractionEvent], cfg: &JoinConfig, clock: u64, state: &mut PhaseState) -> Result<Vec<JoinedSample>> {
        let joined = join_stream(self.store, events, cfg, clock)?;
        let found = joined.iter().filter(|j| j.signal.is_some()).count();
        state.record.join_attempts += events.len() as u64;
        state.record.join_missing += (events.len() - found) as u64;
        Ok(joined)
    }

    fn distill_enabled(&self, phase: Phase) -> bool {
        let f = &self.arm.flags;
        f.distill
            && match phase {
                Phase::Batch => f.batch_distill,
                _ => f.stream_distill,
            }
    }

    /// Accumulates the mean gradient over `samples` into the trainer's
    /// buffers and returns the mean loss. `use_clean` swaps in the
    /// uncorrupted signals.
    fn accumulate(
        &self,
        trainer: &mut StudentTrainer,
        samples: &[TrainSample],
        distill_active: bool,
        use_clean: bool,
    ) -> Result<f64> {
        let flags = &self.arm.flags;
        let decoupled = flags.tower == TowerMode::Decoupled;
        let alpha = trainer.alpha.unwrap_or(1.0);
        trainer.grads.zero();
        let mut total = 0.0;
        for s in samples {
            let t1 = match (use_clean, s.clean_t1) {
                (true, Some(clean)) => clean,
                _ => s.t1,
            };
            let pass = trainer.model.forward_pass(&s.event.features, decoupled && distill_active)?;
            let z_main = pass.z_main();
            let task_main = task_loss(z_main, s.event.label);
            let (dl_main, dl_aux, value) = if !distill_active {
                (task_main.dl_dz, 0.0, task_main.value)
            } else if decoupled {
                let z_aux = pass.z_aux().expect("aux pass requested");
                let mut aux = match flags.aux_loss {
                    AuxLoss::TaskAndDistill => task_loss(z_aux, s.event.label),
                    AuxLoss::DistillOnly => LossValue::ZERO,
                };
                if let Some(t1) = t1 {
                    let d = self.distill_loss(t1, z_aux, &s.event.traffic_source)?.scaled(alpha);
                    aux = LossValue {
                        value: aux.value + d.value,
                        dl_dz: aux.dl_dz + d.dl_dz,
                    };
                }
                (task_main.dl_dz, aux.dl_dz, task_main.value + aux.value)
            } else {
                let mut main = match flags.aux_loss {
                    AuxLoss::TaskAndDistill => task_main,
                    AuxLoss::DistillOnly => LossValue::ZERO,
                };
                if let Some(t1) = t1 {
                    let d = self.distill_loss(t1, z_main, &s.event.traffic_source)?.scaled(alpha);
                    main = LossValue {
                        value: main.value + d.value,
                        dl_dz: main.dl_dz + d.dl_dz,
                    };
                }
                (main.dl_dz, 0.0, main.value)
            };
            total += value;
            trainer.model.backward_into(&pass, dl_main, dl_aux, &mut trainer.grads)?;
        }
        let n = samples.len() as f64;
        trainer.grads.scale(1.0 / n);
        Ok(total / n)
    }

    fn resolve_alpha(&self, trainer: &mut StudentTrainer, samples: &[TrainSample]) -> Result<()> {
        if trainer.alpha.is_some() {
            return Ok(());
        }
        match self.arm.loss.alpha {
            Alpha::Fixed(a) => trainer.alpha = Some(a),
            Alpha::Auto => {
                let decoupled = self.arm.flags.tower == TowerMode::Decoupled;
                let mut task = Vec::new();
                let mut distill = Vec::new();
                for s in samples {
                    let Some(t1) = s.t1 else { continue };
                    let out = trainer.model.outputs(&s.event.features)?;
                    let z = if decoupled { out.z_aux } else { out.z_main };
                    task.push(task_loss(z, s.event.label).value);
                    distill.push(self.distill_loss(t1, z, &s.event.traffic_source)?.value);
                }
                if !task.is_empty() {
                    trainer.alpha = Some(align_alpha(&task, &distill)?);
                }
            }
        }
        Ok(())
    }

    fn train_step(&self, state: &mut PhaseState, samples: &[TrainSample], distill_active: bool) -> Result<()> {
        if samples.is_empty() {
            return Ok(());
        }
        let k = state.step;
        let diverged = |e: Error| {
            Error::Divergence(format!(
                "student in arm `{}` at step {k} (seed {}): {e}",
                self.arm.name, self.seed
            ))
        };
        if distill_active {
            self.resolve_alpha(&mut state.trainer, samples)?;
        }
        let faulted = samples.iter().any(|s| s.clean_t1.is_some());
        let clean_main = if faulted && distill_active {
            self.accumulate(&mut state.trainer, samples, distill_active, true)?;
            Some(state.trainer.grads.main.clone())
        } else {
            None
        };
        let loss = self.accumulate(&mut state.trainer, samples, distill_active, false)?;
        if !loss.is_finite() {
            return Err(diverged(Error::NonFinite("training loss".into())));
        }
        if let Some(clean) = clean_main {
            state.record.isolation_checked_steps += 1;
            let same = clean.iter().zip(state.trainer.grads.main.iter()).all(|(a, b)| a.to_bits() == b.to_bits());
            if !same {
                state.record.isolation_mismatches += 1;
            }
        }
        if self.trace_main_grads {
            state.record.main_grad_trace.push(state.trainer.grads.main.iter().collect());
        }
        let t = &mut state.trainer;
        optimizer_step(&mut t.model.backbone, &t.grads.backbone, &mut t.opt_backbone).map_err(diverged)?;
        optimizer_step(&mut t.model.main_tower, &t.grads.main, &mut t.opt_main).map_err(diverged)?;
        if distill_active && self.arm.flags.tower == TowerMode::Decoupled {
            optimizer_step(&mut t.model.aux_tower, &t.grads.aux, &mut t.opt_aux).map_err(diverged)?;
        }
        state.record.loss_trace.push(loss);
        Ok(())
    }

    fn evaluate(&self, state: &mut PhaseState) -> Result<()> {
        let k = state.step;
        let Some(set) = self.evals.iter().find(|s| s.step == k) else {
            return Ok(());
        };
        let model = &state.trainer.model;
        let with_aux = self.arm.flags.distill && self.arm.flags.tower == TowerMode::Decoupled;
        let mut main = Vec::with_capacity(set.events.len());
        let mut aux = Vec::with_capacity(if with_aux { set.events.len() } else { 0 });
        let mut corrected = Vec::with_capacity(set.events.len());
        let mut posteriors = Vec::with_capacity(set.events.len());
        for e in &set.events {
            let out = model.outputs(&e.features)?;
            main.push(out.z_main);
            if with_aux {
                aux.push(out.z_aux);
            }
            corrected.push(debias(out.z_main, self.student_debias.get(&e.traffic_source)?));
            posteriors.push(e.true_posterior);
        }
        let r = &state.record;
        let missing = if r.join_attempts == 0 {
            0.0
        } else {
            r.join_missing as f64 / r.join_attempts as f64
        };
        state.record.evals.push(EvalPoint {
            step: k,
            auc_main: eval_auc(&set.labels, &main),
            auc_aux: with_aux.then(|| eval_auc(&set.labels, &aux)),
            calibration_mae: calibration_mae(&corrected, &posteriors)?,
            missing_signal_frac: missing,
        });
        Ok(())
    }
}

fn plain(events: Vec<InteractionEvent>) -> Vec<TrainSample> {
    events
        .into_iter()
        .map(|event| TrainSample {
            event,
            t1: None,
            clean_t1: None,
        })
        .collect()
}

/// Large-batch student training over signals the teacher already wrote
/// during its own batch pass.
pub fn run_batch_phase(ctx: &StudentContext, mut state: PhaseState) -> Result<PhaseState> {
    if state.phase != Phase::Batch {
        return Err(Error::config("run_batch_phase needs a state in the batch phase"));
    }
    let active = ctx.distill_enabled(Phase::Batch);
    // the teacher has finished its batch pass by the time students read
    let join = JoinConfig {
        availability_lag: 0,
        ..ctx.arm.join
    };
    for _ in 0..ctx.schedule.batch_steps {
        let g = ctx.schedule.batch_start() + state.step;
        let events = ctx.sampled_events(g)?;
        let samples = if active {
            let joined = ctx.join(&events, &join, ctx.schedule.stream_start(), &mut state)?;
            ctx.prepare(joined, state.step, &mut state)
        } else {
            plain(events)
        };
        ctx.train_step(&mut state, &samples, active)?;
        state.step += 1;
        ctx.evaluate(&mut state)?;
    }
    state.phase = Phase::Streaming;
    Ok(state)
}

/// Per-step streaming updates. Distilled samples wait in a queue until the
/// step at which their join completed.
pub fn run_streaming_phase(ctx: &StudentContext, mut state: PhaseState) -> Result<PhaseState> {
    if state.phase != Phase::Streaming {
        return Err(Error::config("run_streaming_phase needs a state in the streaming phase"));
    }
    let active = ctx.distill_enabled(Phase::Streaming);
    for _ in 0..ctx.schedule.stream_steps {
        let g = ctx.schedule.batch_start() + state.step;
        let events = ctx.sampled_events(g)?;
        let samples = if active {
            let joined = ctx.join(&events, &ctx.arm.join, g, &mut state)?;
            let k = state.step;
            let mut by_step: BTreeMap<u64, Vec<JoinedSample>> = BTreeMap::new();
            for j in joined {
                by_step.entry(j.join_step).or_default().push(j);
            }
            for (join_step, group) in by_step {
                let prepared = ctx.prepare(group, k, &mut state);
                state.pending.entry(join_step).or_default().extend(prepared);
            }
            state.pending.remove(&g).unwrap_or_default()
        } else {
            plain(events)
        };
        ctx.train_step(&mut state, &samples, active)?;
        state.step += 1;
        ctx.evaluate(&mut state)?;
    }
    state.phase = Phase::Done;
    Ok(state)
}

/// Both phases for one arm against a finished teacher run.
pub fn run_student(ctx: &StudentContext) -> Result<RunRecord> {
    let state = PhaseState::new(ctx.new_trainer()?);
    let state = run_batch_phase(ctx, state)?;
    let state = run_streaming_phase(ctx, state)?;
    Ok(state.record)
}

#[derive(Debug, Clone)]
pub struct SeedOutcome {
    pub seed: u64,
    /// Teacher AUC per eval step, per arm.
    pub teacher_auc: BTreeMap<String, BTreeMap<u64, f64>>,
    pub baseline: BTreeMap<String, RunRecord>,
    pub distilled: BTreeMap<String, RunRecord>,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub report: MetricsReport,
    pub seeds: Vec<SeedOutcome>,
}

impl ExperimentResult {
    pub fn seed(&self, seed: u64) -> Option<&SeedOutcome> {
        self.seeds.iter().find(|s| s.seed == seed)
    }
}

pub fn seed_generator(spec: &ExperimentSpec, seed: u64) -> Result<Generator> {
    let s = &spec.schedule;
    Generator::new(spec.generator.config(seed, s.stream_start() + s.drift_start))
}

/// Trains every teacher group, baseline and arm for one seed. Arms sharing
/// a teacher spec read one signal store.
pub fn run_seed(spec: &ExperimentSpec, seed: u64) -> Result<SeedOutcome> {
    let generator = seed_generator(spec, seed)?;
    let evals = eval_sets(&generator, &spec.schedule)?;
    let sources = spec.generator.source_names();

    let mut teachers: Vec<(&TeacherSpec, TeacherRun)> = Vec::new();
    let mut baselines: Vec<(&ArmSpec, RunRecord)> = Vec::new();
    let mut outcome = SeedOutcome {
        seed,
        teacher_auc: BTreeMap::new(),
        baseline: BTreeMap::new(),
        distilled: BTreeMap::new(),
    };
    for arm in &spec.arms {
        let t = match teachers.iter().position(|(t, _)| **t == arm.teacher) {
            Some(i) => i,
            None => {
                let run = run_teacher(&generator, &spec.schedule, &arm.teacher, &sources, &evals, seed)?;
                teachers.push((&arm.teacher, run));
                teachers.len() - 1
            }
        };
        let run = &teachers[t].1;
        let b = match baselines.iter().position(|(b, _)| b.student == arm.student) {
            Some(i) => i,
            None => {
                let base = arm.as_baseline();
                let ctx = StudentContext::new(&generator, &spec.schedule, &base, &run.store, &evals, seed)?;
                baselines.push((arm, run_student(&ctx)?));
                baselines.len() - 1
            }
        };
        let record = if arm.flags.distill {
            let ctx = StudentContext::new(&generator, &spec.schedule, arm, &run.store, &evals, seed)?;
            run_student(&ctx)?
        } else {
            baselines[b].1.clone()
        };
        outcome.teacher_auc.insert(arm.name.clone(), run.auc.clone());
        outcome.baseline.insert(arm.name.clone(), baselines[b].1.clone());
        outcome.distilled.insert(arm.name.clone(), record);
    }
    Ok(outcome)
}

/// Runs every arm over every seed and assembles the metric rows.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentResult> {
    spec.validate()?;
    let outcomes: Vec<SeedOutcome> = if spec.parallel && spec.seeds.len() > 1 {
        std::thread::scope(|scope| {
            let handles: Vec<_> = spec
                .seeds
                .iter()
                .map(|&seed| scope.spawn(move || run_seed(spec, seed)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("seed worker panicked"))
                .collect::<Result<Vec<_>>>()
        })?
    } else {
        spec.seeds.iter().map(|&seed| run_seed(spec, seed)).collect::<Result<_>>()?
    };

    let mut report = MetricsReport::new(spec.name.clone(), spec.arm_names());
    for o in &outcomes {
        for arm in &spec.arms {
            let teacher = &o.teacher_auc[&arm.name];
            let base = &o.baseline[&arm.name];
            let dist = &o.distilled[&arm.name];
            for (b, d) in base.evals.iter().zip(&dist.evals) {
                let k = d.step;
                let p_t = teacher[&k];
                let g = gain_decomposition(p_t, b.auc_main, d.auc_main);
                let name = arm.name.as_str();
                report.push(name, o.seed, k, "auc_teacher", Some(p_t));
                report.push(name, o.seed, k, "auc_student_raw", Some(b.auc_main));
                report.push(name, o.seed, k, "auc_student_distill_main", Some(d.auc_main));
                if let Some(a) = d.auc_aux {
                    report.push(name, o.seed, k, "auc_student_distill_aux", Some(a));
                }
                report.push(name, o.seed, k, "gain_scale", Some(g.gain_scale));
                report.push(name, o.seed, k, "eta", g.eta);
                report.push(name, o.seed, k, "gain_distill", Some(g.gain_distill));
                report.push(name, o.seed, k, "missing_signal_frac", Some(d.missing_signal_frac));
                report.push(name, o.seed, k, "calibration_mae", Some(d.calibration_mae));
            }
        }
    }
    Ok(ExperimentResult {
        report,
        seeds: outcomes,
    })
}
