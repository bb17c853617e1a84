//! Append-only store of teacher logits and the lagged streaming join.
//!
//! Time is a logical step counter. A record emitted at step `e` becomes
//! observable to a probe at step `t` once `e + availability_lag <= t`.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, BufReader, Write as _};
use std::ops::Range;
use std::path::{Path, PathBuf};

use crate::datagen::InteractionEvent;
use crate::error::{Error, Result};
use crate::numerics::{fmt_sig9, round_sig9};

/// Environment variable naming the directory for materialized signal files.
pub const STORE_DIR_ENV: &str = "REC_DISTILL_STORE_DIR";

/// Directory for materialized signal files: `$REC_DISTILL_STORE_DIR` when
/// set and non-empty, otherwise `fallback`.
pub fn store_dir(fallback: &Path) -> PathBuf {
    match std::env::var_os(STORE_DIR_ENV) {
        Some(dir) if !dir.is_empty() => PathBuf::from(dir),
        _ => fallback.to_path_buf(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillSignal {
    pub sample_id: u64,
    pub teacher_version: u64,
    /// Raw teacher logit before any sampling correction.
    pub t1_logit: f64,
    pub emit_step: u64,
}

impl DistillSignal {
    /// The logit is rounded to 9 significant digits so that the record
    /// survives materialization bit-for-bit.
    pub fn new(sample_id: u64, teacher_version: u64, t1_logit: f64, emit_step: u64) -> Self {
        Self {
            sample_id,
            teacher_version,
            t1_logit: round_sig9(t1_logit),
            emit_step,
        }
    }

    fn to_line(self) -> String {
        format!(
            "{},{},{},{}\n",
            self.sample_id,
            self.teacher_version,
            fmt_sig9(self.t1_logit),
            self.emit_step
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SignalStore {
    records: Vec<DistillSignal>,
    by_sample: HashMap<u64, Vec<usize>>,
    keys: HashSet<(u64, u64)>,
    high_water: Option<u64>,
}

impl SignalStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[DistillSignal] {
        &self.records
    }

    /// Emit step of the newest record, if any.
    pub fn high_water_mark(&self) -> Option<u64> {
        self.high_water
    }

    pub fn append(&mut self, signal: DistillSignal) -> Result<()> {
        if !signal.t1_logit.is_finite() {
            return Err(Error::NonFinite(format!("logit for sample {}", signal.sample_id)));
        }
        let key = (signal.sample_id, signal.teacher_version);
        if self.keys.contains(&key) {
            return Err(Error::DuplicateSignal {
                sample_id: key.0,
                teacher_version: key.1,
            });
        }
        self.keys.insert(key);
        self.by_sample.entry(signal.sample_id).or_default().push(self.records.len());
        self.records.push(signal);
        self.high_water = Some(self.high_water.map_or(signal.emit_step, |h| h.max(signal.emit_step)));
        Ok(())
    }

    pub fn extend(&mut self, signals: impl IntoIterator<Item = DistillSignal>) -> Result<()> {
        signals.into_iter().try_for_each(|s| self.append(s))
    }

    /// Newest-version signal for `sample_id` visible at step `now`.
    pub fn lookup(&self, sample_id: u64, now: u64, availability_lag: u64) -> Option<&DistillSignal> {
        self.by_sample
            .get(&sample_id)?
            .iter()
            .map(|&i| &self.records[i])
            .filter(|s| s.emit_step.saturating_add(availability_lag) <= now)
            .max_by_key(|s| s.teacher_version)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MissingPolicy {
    /// Keep the sample and train it on the task loss alone.
    SkipDistill,
    DropSample,
}

impl MissingPolicy {
    pub fn name(self) -> &'static str {
        match self {
            MissingPolicy::SkipDistill => "skip_distill",
            MissingPolicy::DropSample => "drop_sample",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "skip_distill" => Ok(MissingPolicy::SkipDistill),
            "drop_sample" => Ok(MissingPolicy::DropSample),
            other => Err(Error::config(format!(
                "missing_policy must be skip_distill or drop_sample, got `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct JoinConfig {
    pub availability_lag: u64,
    pub max_retries: u32,
    pub retry_delay: u64,
    pub missing_policy: MissingPolicy,
}

impl Default for JoinConfig {
    fn default() -> Self {
        Self {
            availability_lag: 0,
            max_retries: 3,
            retry_delay: 1,
            missing_policy: MissingPolicy::SkipDistill,
        }
    }
}

impl JoinConfig {
    pub fn validate(&self) -> Result<()> {
        if self.retry_delay == 0 {
            return Err(Error::config("join.retry_delay must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JoinedSample {
    pub event: InteractionEvent,
    /// `None` marks a signal that never became visible.
    pub signal: Option<DistillSignal>,
    pub retries_used: u32,
    pub join_step: u64,
}

/// Joins each event with its signal. The first probe happens at
/// `max(clock, event.step)`; each miss advances the probe by `retry_delay`
/// up to `max_retries` times. Under `DropSample` unjoined events are
/// omitted, otherwise they carry no signal.
pub fn join_stream(
    store: &SignalStore,
    events: &[InteractionEvent],
    cfg: &JoinConfig,
    clock: u64,
) -> Result<Vec<JoinedSample>> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(events.len());
    for event in events {
        let mut probe = clock.max(event.step);
        let mut retries = 0;
        let found = loop {
            if let Some(s) = store.lookup(event.sample_id, probe, cfg.availability_lag) {
                break Some(*s);
            }
            if retries == cfg.max_retries {
                break None;
            }
            retries += 1;
            probe += cfg.retry_delay;
        };
        if found.is_none() && cfg.missing_policy == MissingPolicy::DropSample {
            continue;
        }
        out.push(JoinedSample {
            event: event.clone(),
            signal: found,
            retries_used: retries,
            join_step: probe,
        });
    }
    Ok(out)
}

/// Writes every record whose `emit_step` lies in `steps` as
/// `sample_id,teacher_version,t1_logit,emit_step` lines, in append order.
pub fn materialize(store: &SignalStore, steps: Range<u64>, path: &Path) -> Result<usize> {
    if !steps.is_empty() {
        let limit = store.high_water_mark().map_or(0, |h| h + 1);
        if steps.end > limit {
            return Err(Error::config(format!(
                "materialize range ends at {} beyond the high-water mark",
                steps.end
            )));
        }
    }
    let mut out = String::new();
    let mut count = 0;
    for s in store.records().iter().filter(|s| steps.contains(&s.emit_step)) {
        out.push_str(&s.to_line());
        count += 1;
    }
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(out.as_bytes())?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(count)
}

pub fn replay(path: &Path) -> Result<SignalStore> {
    let mut reader = BufReader::new(std::fs::File::open(path)?);
    let err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut store = SignalStore::new();
    let mut buf = String::new();
    let mut n = 0;
    loop {
        buf.clear();
        if reader.read_line(&mut buf)? == 0 {
            break;
        }
        n += 1;
        let Some(line) = buf.strip_suffix('\n') else {
            return Err(err(n, "record is not newline-terminated".into()));
        };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(err(n, format!("expected 4 fields, found {}", fields.len())));
        }
        let int = |s: &str, what: &str| s.parse::<u64>().map_err(|_| err(n, format!("bad {what} `{s}`")));
        let logit: f64 = fields[2]
            .parse()
            .map_err(|_| err(n, format!("bad t1_logit `{}`", fields[2])))?;
        let signal = DistillSignal {
            sample_id: int(fields[0], "sample_id")?,
            teacher_version: int(fields[1], "teacher_version")?,
            t1_logit: logit,
            emit_step: int(fields[3], "emit_step")?,
        };
        store.append(signal).map_err(|e| err(n, e.to_string()))?;
    }
    Ok(store)
}

/// Independent read position over a store. Cursors hold no borrow, so the
/// writer may keep appending between reads.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SignalCursor {
    position: usize,
}

impl SignalCursor {
    pub fn position(&self) -> usize {
        self.position
    }

    pub fn next<'a>(&mut self, store: &'a SignalStore) -> Option<&'a DistillSignal> {
        let r = store.records().get(self.position)?;
        self.position += 1;
        Some(r)
    }

    /// Everything appended since the last read.
    pub fn drain<'a>(&mut self, store: &'a SignalStore) -> &'a [DistillSignal] {
        let start = self.position.min(store.len());
        self.position = store.len();
        &store.records()[start..]
    }
}

/// `n` cursors positioned at the start of `store`.
pub fn fanout_readers(store: &SignalStore, n: usize) -> Result<Vec<SignalCursor>> {
    let _ = store;
    if n == 0 {
        return Err(Error::config("fan-out needs at least one reader"));
    }
    Ok(vec![SignalCursor::default(); n])
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    #[test]
    fn store_dir_prefers_environment() {
        let fallback = Path::new("signals");
        std::env::remove_var(STORE_DIR_ENV);
        assert_eq!(store_dir(fallback), fallback);
        std::env::set_var(STORE_DIR_ENV, "/tmp/store");
        assert_eq!(store_dir(fallback), Path::new("/tmp/store"));
        std::env::set_var(STORE_DIR_ENV, "");
        assert_eq!(store_dir(fallback), fallback);
        std::env::remove_var(STORE_DIR_ENV);
    }

    fn event(id: u64, step: u64) -> InteractionEvent {
        InteractionEvent {
            sample_id: id,
            step,
            features: vec![0.0],
            label: false,
            traffic_source: Arc::from("organic"),
            true_posterior: 0.5,
        }
    }

    fn join(lag: u64, retries: u32, delay: u64, policy: MissingPolicy) -> JoinConfig {
        JoinConfig {
            availability_lag: lag,
            max_retries: retries,
            retry_delay: delay,
            missing_policy: policy,
        }
    }

    #[test]
    fn visible_at_emit_plus_lag() {
        let mut s = SignalStore::new();
        s.append(DistillSignal::new(1, 0, 0.3, 10)).unwrap();
        assert!(s.lookup(1, 10, 0).is_some());
        assert!(s.lookup(1, 12, 3).is_none());
        assert!(s.lookup(1, 13, 3).is_some());
        assert!(s.lookup(2, 100, 0).is_none());
    }

    #[test]
    fn duplicate_rejected_and_store_unchanged() {
        let mut s = SignalStore::new();
        s.append(DistillSignal::new(1, 0, 0.3, 0)).unwrap();
        let before = s.clone();
        assert!(matches!(
            s.append(DistillSignal::new(1, 0, 0.9, 4)),
            Err(Error::DuplicateSignal { sample_id: 1, teacher_version: 0 })
        ));
        assert_eq!(s, before);
        s.append(DistillSignal::new(1, 1, 0.9, 4)).unwrap();
        assert_eq!(s.lookup(1, 4, 0).unwrap().teacher_version, 1);
        assert_eq!(s.high_water_mark(), Some(4));
    }

    #[test]
    fn join_retry_arithmetic() {
        let mut s = SignalStore::new();
        s.append(DistillSignal::new(7, 0, 1.0, 5)).unwrap();
        let events = [event(7, 5)];
        let j = join_stream(&s, &events, &join(0, 3, 1, MissingPolicy::SkipDistill), 0).unwrap();
        assert_eq!((j[0].retries_used, j[0].join_step), (0, 5));
        let j = join_stream(&s, &events, &join(3, 3, 1, MissingPolicy::SkipDistill), 0).unwrap();
        assert_eq!((j[0].retries_used, j[0].join_step), (3, 8));
        assert!(j[0].signal.is_some());
        let j = join_stream(&s, &events, &join(10, 3, 1, MissingPolicy::SkipDistill), 0).unwrap();
        assert_eq!(j.len(), 1);
        assert!(j[0].signal.is_none());
        let j = join_stream(&s, &events, &join(10, 3, 1, MissingPolicy::DropSample), 0).unwrap();
        assert!(j.is_empty());
    }

    #[test]
    fn join_threshold_is_sharp() {
        let mut s = SignalStore::new();
        let events: Vec<_> = (0..50).map(|i| event(i, i / 5)).collect();
        for e in &events {
            s.append(DistillSignal::new(e.sample_id, 0, 0.1, e.step)).unwrap();
        }
        for (retries, delay) in [(0u32, 1u64), (2, 1), (3, 2), (4, 3)] {
            let budget = u64::from(retries) * delay;
            for lag in 0..=budget + 3 {
                let cfg = join(lag, retries, delay, MissingPolicy::SkipDistill);
                let j = join_stream(&s, &events, &cfg, 0).unwrap();
                let missing = j.iter().filter(|x| x.signal.is_none()).count();
                if lag <= budget {
                    assert_eq!(missing, 0, "lag {lag} R {retries} d {delay}");
                } else {
                    assert_eq!(missing, events.len(), "lag {lag} R {retries} d {delay}");
                }
                for x in j.iter().filter(|x| x.signal.is_some()) {
                    assert!(x.join_step >= x.signal.unwrap().emit_step + lag);
                }
            }
        }
    }

    #[test]
    fn empty_range_materializes_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("signals.csv");
        let s = SignalStore::new();
        assert_eq!(materialize(&s, 0..0, &path).unwrap(), 0);
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "");
        assert!(replay(&path).unwrap().is_empty());
    }

    #[test]
    fn range_beyond_high_water_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = SignalStore::new();
        s.append(DistillSignal::new(1, 0, 0.1, 3)).unwrap();
        assert!(materialize(&s, 0..5, &dir.path().join("x")).is_err());
        assert_eq!(materialize(&s, 0..4, &dir.path().join("x")).unwrap(), 1);
    }

    #[test]
    fn truncated_file_names_bad_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("signals.csv");
        let mut s = SignalStore::new();
        for i in 0..5 {
            s.append(DistillSignal::new(i, 0, -1.25 * i as f64, i)).unwrap();
        }
        materialize(&s, 0..5, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, &text[..text.len() - 3]).unwrap();
        match replay(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 5),
            other => panic!("expected parse error, got {other:?}"),
        }
        std::fs::write(&path, "1,0,abc,0\n").unwrap();
        assert!(matches!(replay(&path), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn cursors_are_independent() {
        let mut s = SignalStore::new();
        for i in 0..4 {
            s.append(DistillSignal::new(i, 0, 0.0, i)).unwrap();
        }
        let mut readers = fanout_readers(&s, 2).unwrap();
        let a: Vec<_> = std::iter::from_fn(|| readers[0].next(&s).copied()).collect();
        assert_eq!(a.len(), 4);
        assert_eq!(readers[1].position(), 0);
        let b = readers[1].drain(&s).to_vec();
        assert_eq!(a, b);
        s.append(DistillSignal::new(9, 0, 0.0, 5)).unwrap();
        assert_eq!(readers[0].drain(&s).len(), 1);
        assert!(fanout_readers(&s, 0).is_err());
    }
}
