//! Flat `section.key = value` experiment configs.
//!
//! Keys outside `experiment`, `generator` and `schedule` describe a single
//! arm. Written bare they apply to every arm; written as
//! `arm.<name>.<section>.<key>` they apply to one. `experiment.preset`
//! starts from a named preset instead of the desk defaults.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::presets::{default_spec, preset};
use super::spec::{Alpha, ArmSpec, AuxLoss, ExperimentSpec, FaultSpec, SideSampling, TowerMode};
use crate::error::{Error, Result};
use crate::losses::DistillMetric;
use crate::signal_store::MissingPolicy;

const ARM_SECTIONS: [&str; 6] = ["teacher", "student", "loss", "join", "flags", "fault"];

#[derive(Debug, Clone)]
struct Entry {
    line: usize,
    key: String,
    value: String,
}

fn parse_lines(text: &str, origin: &str) -> Result<Vec<Entry>> {
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    let mut entries = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let err = |message: String| Error::ConfigLine {
            path: origin.to_string(),
            line,
            message,
        };
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| err(format!("expected `section.key = value`, found `{content}`")))?;
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if !key.contains('.') {
            return Err(err(format!("key `{key}` has no section")));
        }
        if let Some(first) = seen.insert(key.clone(), line) {
            return Err(err(format!("key `{key}` already set on line {first}")));
        }
        entries.push(Entry { line, key, value });
    }
    Ok(entries)
}

fn parse_bool(v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::config(format!("expected true or false, got `{v}`"))),
    }
}

fn parse_num<T: std::str::FromStr>(v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::config(format!("`{v}` is not a valid number")))
}

fn parse_list<T: std::str::FromStr>(v: &str) -> Result<Vec<T>> {
    v.split(',').map(|s| parse_num(s.trim())).collect()
}

fn apply_global(spec: &mut ExperimentSpec, key: &str, v: &str) -> Result<bool> {
    let g = &mut spec.generator;
    let s = &mut spec.schedule;
    match key {
        "experiment.name" => spec.name = v.to_string(),
        "experiment.seeds" => spec.seeds = parse_list(v)?,
        "experiment.parallel" => spec.parallel = parse_bool(v)?,
        "generator.feature_dim" => g.feature_dim = parse_num(v)?,
        "generator.weight_norm" => g.weight_norm = parse_num(v)?,
        "generator.drift_rate" => g.drift_rate = parse_num(v)?,
        "generator.noise_std" => g.noise_std = parse_num(v)?,
        "generator.positive_rate" => g.positive_rate = parse_num(v)?,
        "generator.interaction_pairs" => g.interaction_pairs = parse_num(v)?,
        "generator.interaction_scale" => g.interaction_scale = parse_num(v)?,
        "generator.traffic_sources" => {
            g.traffic_sources = v
                .split(',')
                .map(|item| {
                    let (name, share) = item.trim().split_once(':').ok_or_else(|| {
                        Error::config(format!("traffic source `{item}` must be `name:share`"))
                    })?;
                    Ok((name.trim().to_string(), parse_num(share.trim())?))
                })
                .collect::<Result<_>>()?
        }
        "schedule.teacher_warmup_steps" => s.teacher_warmup_steps = parse_num(v)?,
        "schedule.batch_steps" => s.batch_steps = parse_num(v)?,
        "schedule.batch_size" => s.batch_size = parse_num(v)?,
        "schedule.stream_steps" => s.stream_steps = parse_num(v)?,
        "schedule.stream_batch_size" => s.stream_batch_size = parse_num(v)?,
        "schedule.drift_start" => s.drift_start = parse_num(v)?,
        "schedule.eval_every" => s.eval_every = parse_num(v)?,
        "schedule.eval_size" => s.eval_size = parse_num(v)?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn apply_sampling(side: &mut SideSampling, key: &str, v: &str) -> Result<bool> {
    match key {
        "r_s" => side.r_s = parse_num(v)?,
        "r_plus" => side.r_plus = parse_num(v)?,
        "b_s" => side.b_s = parse_num(v)?,
        "p_x" => side.p_x = parse_num(v)?,
        _ => match key.strip_prefix("p_x.") {
            Some(source) if !source.is_empty() => {
                side.p_x_by_source.insert(source.to_string(), parse_num(v)?);
            }
            _ => return Ok(false),
        },
    }
    Ok(true)
}

/// Applies one arm-level key such as `student.backbone_width`.
fn apply_arm(arm: &mut ArmSpec, key: &str, v: &str) -> Result<bool> {
    let Some((section, field)) = key.split_once('.') else {
        return Ok(false);
    };
    let t = &mut arm.teacher;
    let st = &mut arm.student;
    match (section, field) {
        ("teacher", "depth") => t.arch.depth = parse_num(v)?,
        ("teacher", "width") => t.arch.width = parse_num(v)?,
        ("teacher", "data_multiplier") => t.data_multiplier = parse_num(v)?,
        ("teacher", "learning_rate") => t.learning_rate = parse_num(v)?,
        ("teacher", "minibatch") => t.minibatch = parse_num(v)?,
        ("teacher", f) => return apply_sampling(&mut t.sampling, f, v),
        ("student", "backbone_depth") => st.arch.backbone_depth = parse_num(v)?,
        ("student", "backbone_width") => st.arch.backbone_width = parse_num(v)?,
        ("student", "tower_depth") => st.arch.tower_depth = parse_num(v)?,
        ("student", "tower_width") => st.arch.tower_width = parse_num(v)?,
        ("student", "learning_rate") => st.learning_rate = parse_num(v)?,
        ("student", f) => return apply_sampling(&mut st.sampling, f, v),
        ("loss", "alpha") => {
            arm.loss.alpha = if v == "auto" {
                Alpha::Auto
            } else {
                Alpha::Fixed(parse_num(v)?)
            }
        }
        ("loss", "tau") => arm.loss.tau = parse_num(v)?,
        ("loss", "metric") => {
            arm.loss.metric = match v {
                "ce" => DistillMetric::Ce,
                "mse" => DistillMetric::Mse,
                _ => return Err(Error::config(format!("loss.metric must be ce or mse, got `{v}`"))),
            }
        }
        ("join", "availability_lag") => arm.join.availability_lag = parse_num(v)?,
        ("join", "max_retries") => arm.join.max_retries = parse_num(v)?,
        ("join", "retry_delay") => arm.join.retry_delay = parse_num(v)?,
        ("join", "missing_policy") => arm.join.missing_policy = MissingPolicy::parse(v)?,
        ("flags", "distill") => arm.flags.distill = parse_bool(v)?,
        ("flags", "tower") => {
            arm.flags.tower = match v {
                "single" => TowerMode::Single,
                "decoupled" => TowerMode::Decoupled,
                _ => return Err(Error::config(format!("flags.tower must be single or decoupled, got `{v}`"))),
            }
        }
        ("flags", "aux_loss") => {
            arm.flags.aux_loss = match v {
                "task_distill" => AuxLoss::TaskAndDistill,
                "distill_only" => AuxLoss::DistillOnly,
                _ => {
                    return Err(Error::config(format!(
                        "flags.aux_loss must be task_distill or distill_only, got `{v}`"
                    )))
                }
            }
        }
        ("flags", "debias") => arm.flags.debias = parse_bool(v)?,
        ("flags", "rebias") => arm.flags.rebias = parse_bool(v)?,
        ("flags", "batch_distill") => arm.flags.batch_distill = parse_bool(v)?,
        ("flags", "stream_distill") => arm.flags.stream_distill = parse_bool(v)?,
        ("fault", "enabled") => {
            if !parse_bool(v)? {
                arm.fault = None;
            } else if arm.fault.is_none() {
                arm.fault = Some(default_fault());
            }
        }
        ("fault", f @ ("start" | "end" | "noise_std" | "detect")) => {
            let fault = arm.fault.get_or_insert_with(default_fault);
            match f {
                "start" => fault.start = parse_num(v)?,
                "end" => fault.end = parse_num(v)?,
                "noise_std" => fault.noise_std = parse_num(v)?,
                _ => fault.detect = parse_bool(v)?,
            }
        }
        _ => return Ok(false),
    }
    Ok(true)
}

fn default_fault() -> FaultSpec {
    FaultSpec {
        start: 0,
        end: 0,
        noise_std: 3.0,
        detect: false,
    }
}

/// `fault.enabled` is applied after the other fault keys so it can switch a
/// configured fault off.
fn arm_key_order(key: &str) -> u8 {
    u8::from(key.ends_with("fault.enabled"))
}

pub fn parse_config(text: &str, origin: &str) -> Result<ExperimentSpec> {
    let entries = parse_lines(text, origin)?;
    let at = |e: &Entry, err: Error| Error::ConfigLine {
        path: origin.to_string(),
        line: e.line,
        message: format!("`{}`: {}", e.key, strip_prefix(&err)),
    };

    let mut spec = match entries.iter().find(|e| e.key == "experiment.preset") {
        Some(e) => preset(&e.value).map_err(|err| at(e, err))?,
        None => default_spec(),
    };

    let mut shared = Vec::new();
    let mut per_arm = Vec::new();
    let mut arm_list = None;
    for e in &entries {
        if e.key == "experiment.preset" {
            continue;
        }
        if e.key == "experiment.arms" {
            arm_list = Some(e);
            continue;
        }
        if e.key.starts_with("arm.") {
            per_arm.push(e);
            continue;
        }
        if apply_global(&mut spec, &e.key, &e.value).map_err(|err| at(e, err))? {
            continue;
        }
        let section = e.key.split('.').next().unwrap_or("");
        if !ARM_SECTIONS.contains(&section) {
            return Err(at(e, Error::config("unknown key")));
        }
        shared.push(e);
    }

    shared.sort_by_key(|e| arm_key_order(&e.key));
    for arm in &mut spec.arms {
        for e in &shared {
            if !apply_arm(arm, &e.key, &e.value).map_err(|err| at(e, err))? {
                return Err(at(e, Error::config("unknown key")));
            }
        }
    }

    if let Some(e) = arm_list {
        let names: Vec<&str> = e.value.split(',').map(str::trim).collect();
        let template = spec.arms[0].clone();
        spec.arms = names
            .iter()
            .map(|n| {
                let mut arm = spec.arms.iter().find(|a| a.name == *n).cloned().unwrap_or_else(|| template.clone());
                arm.name = n.to_string();
                arm
            })
            .collect();
    }

    per_arm.sort_by_key(|e| arm_key_order(&e.key));
    for e in per_arm {
        let rest = &e.key["arm.".len()..];
        let (name, key) = rest
            .split_once('.')
            .ok_or_else(|| at(e, Error::config("expected `arm.<name>.<section>.<key>`")))?;
        let arm = spec
            .arms
            .iter_mut()
            .find(|a| a.name == name)
            .ok_or_else(|| at(e, Error::config(format!("no arm named `{name}`"))))?;
        if !apply_arm(arm, key, &e.value).map_err(|err| at(e, err))? {
            return Err(at(e, Error::config("unknown key")));
        }
    }

    spec.validate().map_err(|err| Error::ConfigLine {
        path: origin.to_string(),
        line: 0,
        message: strip_prefix(&err),
    })?;
    Ok(spec)
}

fn strip_prefix(err: &Error) -> String {
    match err {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentSpec> {
    let text = std::fs::read_to_string(path)?;
    parse_config(&text, &path.display().to_string())
}

fn sampling_lines(out: &mut String, prefix: &str, s: &SideSampling) {
    writeln!(out, "{prefix}.r_s = {}", s.r_s).unwrap();
    writeln!(out, "{prefix}.r_plus = {}", s.r_plus).unwrap();
    writeln!(out, "{prefix}.b_s = {}", s.b_s).unwrap();
    writeln!(out, "{prefix}.p_x = {}", s.p_x).unwrap();
    for (source, p) in &s.p_x_by_source {
        writeln!(out, "{prefix}.p_x.{source} = {p}").unwrap();
    }
}

fn join_list<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

/// Fully resolved config text. Parsing it back yields the same spec.
pub fn snapshot(spec: &ExperimentSpec) -> String {
    let mut out = String::from("# resolved experiment configuration\n");
    let g = &spec.generator;
    let s = &spec.schedule;
    writeln!(out, "experiment.name = {}", spec.name).unwrap();
    writeln!(out, "experiment.seeds = {}", join_list(&spec.seeds)).unwrap();
    writeln!(out, "experiment.arms = {}", join_list(&spec.arm_names())).unwrap();
    writeln!(out, "experiment.parallel = {}", spec.parallel).unwrap();
    writeln!(out, "generator.feature_dim = {}", g.feature_dim).unwrap();
    writeln!(out, "generator.weight_norm = {}", g.weight_norm).unwrap();
    writeln!(out, "generator.drift_rate = {}", g.drift_rate).unwrap();
    writeln!(out, "generator.noise_std = {}", g.noise_std).unwrap();
    writeln!(out, "generator.positive_rate = {}", g.positive_rate).unwrap();
    writeln!(out, "generator.interaction_pairs = {}", g.interaction_pairs).unwrap();
    writeln!(out, "generator.interaction_scale = {}", g.interaction_scale).unwrap();
    let sources: Vec<String> = g.traffic_sources.iter().map(|(n, p)| format!("{n}:{p}")).collect();
    writeln!(out, "generator.traffic_sources = {}", sources.join(",")).unwrap();
    writeln!(out, "schedule.teacher_warmup_steps = {}", s.teacher_warmup_steps).unwrap();
    writeln!(out, "schedule.batch_steps = {}", s.batch_steps).unwrap();
    writeln!(out, "schedule.batch_size = {}", s.batch_size).unwrap();
    writeln!(out, "schedule.stream_steps = {}", s.stream_steps).unwrap();
    writeln!(out, "schedule.stream_batch_size = {}", s.stream_batch_size).unwrap();
    writeln!(out, "schedule.drift_start = {}", s.drift_start).unwrap();
    writeln!(out, "schedule.eval_every = {}", s.eval_every).unwrap();
    writeln!(out, "schedule.eval_size = {}", s.eval_size).unwrap();
    for arm in &spec.arms {
        let p = format!("arm.{}", arm.name);
        out.push('\n');
        let t = &arm.teacher;
        writeln!(out, "{p}.teacher.depth = {}", t.arch.depth).unwrap();
        writeln!(out, "{p}.teacher.width = {}", t.arch.width).unwrap();
        writeln!(out, "{p}.teacher.data_multiplier = {}", t.data_multiplier).unwrap();
        writeln!(out, "{p}.teacher.learning_rate = {}", t.learning_rate).unwrap();
        writeln!(out, "{p}.teacher.minibatch = {}", t.minibatch).unwrap();
        sampling_lines(&mut out, &format!("{p}.teacher"), &t.sampling);
        let st = &arm.student;
        writeln!(out, "{p}.student.backbone_depth = {}", st.arch.backbone_depth).unwrap();
        writeln!(out, "{p}.student.backbone_width = {}", st.arch.backbone_width).unwrap();
        writeln!(out, "{p}.student.tower_depth = {}", st.arch.tower_depth).unwrap();
        writeln!(out, "{p}.student.tower_width = {}", st.arch.tower_width).unwrap();
        writeln!(out, "{p}.student.learning_rate = {}", st.learning_rate).unwrap();
        sampling_lines(&mut out, &format!("{p}.student"), &st.sampling);
        let alpha = match arm.loss.alpha {
            Alpha::Auto => "auto".to_string(),
            Alpha::Fixed(a) => a.to_string(),
        };
        writeln!(out, "{p}.loss.alpha = {alpha}").unwrap();
        writeln!(out, "{p}.loss.tau = {}", arm.loss.tau).unwrap();
        let metric = match arm.loss.metric {
            DistillMetric::Ce => "ce",
            DistillMetric::Mse => "mse",
        };
        writeln!(out, "{p}.loss.metric = {metric}").unwrap();
        let j = &arm.join;
        writeln!(out, "{p}.join.availability_lag = {}", j.availability_lag).unwrap();
        writeln!(out, "{p}.join.max_retries = {}", j.max_retries).unwrap();
        writeln!(out, "{p}.join.retry_delay = {}", j.retry_delay).unwrap();
        writeln!(out, "{p}.join.missing_policy = {}", j.missing_policy.name()).unwrap();
        let f = &arm.flags;
        writeln!(out, "{p}.flags.distill = {}", f.distill).unwrap();
        let tower = match f.tower {
            TowerMode::Single => "single",
            TowerMode::Decoupled => "decoupled",
        };
        writeln!(out, "{p}.flags.tower = {tower}").unwrap();
        let aux = match f.aux_loss {
            AuxLoss::TaskAndDistill => "task_distill",
            AuxLoss::DistillOnly => "distill_only",
        };
        writeln!(out, "{p}.flags.aux_loss = {aux}").unwrap();
        writeln!(out, "{p}.flags.debias = {}", f.debias).unwrap();
        writeln!(out, "{p}.flags.rebias = {}", f.rebias).unwrap();
        writeln!(out, "{p}.flags.batch_distill = {}", f.batch_distill).unwrap();
        writeln!(out, "{p}.flags.stream_distill = {}", f.stream_distill).unwrap();
        match arm.fault {
            None => writeln!(out, "{p}.fault.enabled = false").unwrap(),
            Some(fault) => {
                writeln!(out, "{p}.fault.enabled = true").unwrap();
                writeln!(out, "{p}.fault.start = {}", fault.start).unwrap();
                writeln!(out, "{p}.fault.end = {}", fault.end).unwrap();
                writeln!(out, "{p}.fault.noise_std = {}", fault.noise_std).unwrap();
                writeln!(out, "{p}.fault.detect = {}", fault.detect).unwrap();
            }
        }
    }
    out
}
