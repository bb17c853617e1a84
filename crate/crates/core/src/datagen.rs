//! Seeded, drifting synthetic interaction stream with a known posterior,
//! plus the non-uniform sampling applied before training.
//!
//! The click process is
//!
//! ```text
//! logit = w(step)·x + Σ_k a_k x_{i_k} x_{j_k} + intercept + noise_std·ε
//! ```
//!
//! with `x ~ N(0, I)` and `ε ~ N(0, 1)`. `w(step)` is `base_weights`
//! rotated toward a seeded Gaussian direction by `drift_rate` radians per
//! step once `drift_start_step` has passed. The intercept is solved so the
//! mean posterior matches `positive_rate_target`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write as _};
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::losses::DebiasParams;
use crate::numerics::{fmt_sig9, sigmoid};

pub const DEFAULT_TASK: &str = "ctr";

const INTERCEPT_CALIBRATION_SAMPLES: usize = 20_000;
const EVAL_STREAM_BIT: u64 = 1 << 63;
const MAX_EVENTS_PER_STEP: usize = 1 << 24;

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub feature_dim: usize,
    pub base_weights: Vec<f64>,
    /// Radians of rotation per step after `drift_start_step`.
    pub drift_rate: f64,
    pub drift_start_step: u64,
    /// Standard deviation of the latent per-event logit noise.
    pub noise_std: f64,
    pub positive_rate_target: f64,
    pub traffic_sources: Vec<(String, f64)>,
    /// Number of pairwise feature interactions in the true logit.
    pub interaction_pairs: usize,
    pub interaction_scale: f64,
    pub seed: u64,
}

impl GeneratorConfig {
    /// Base weights drawn from `N(0, 1)` and scaled to `weight_norm`.
    pub fn seeded(feature_dim: usize, weight_norm: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 0xba5e));
        let raw: Vec<f64> = (0..feature_dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        Self {
            feature_dim,
            base_weights: raw.iter().map(|v| v * weight_norm / norm).collect(),
            drift_rate: 0.0,
            drift_start_step: 0,
            noise_std: 0.0,
            positive_rate_target: 0.5,
            traffic_sources: vec![("organic".into(), 1.0)],
            interaction_pairs: 0,
            interaction_scale: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 {
            return Err(Error::config("generator.feature_dim must be >= 1"));
        }
        if self.base_weights.len() != self.feature_dim {
            return Err(Error::config(format!(
                "generator.base_weights has {} entries, feature_dim is {}",
                self.base_weights.len(),
                self.feature_dim
            )));
        }
        if self.base_weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::config("generator.base_weights must be finite"));
        }
        if !(self.drift_rate >= 0.0 && self.drift_rate.is_finite()) {
            return Err(Error::config("generator.drift_rate must be >= 0"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::config("generator.noise_std must be >= 0"));
        }
        if !(self.positive_rate_target > 0.0 && self.positive_rate_target < 1.0) {
            return Err(Error::config(
                "generator.positive_rate_target must be in (0, 1)",
            ));
        }
        if self.traffic_sources.is_empty() {
            return Err(Error::config("generator needs at least one traffic source"));
        }
        if self.traffic_sources.iter().any(|(_, p)| !(*p >= 0.0)) {
            return Err(Error::config("traffic source probabilities must be >= 0"));
        }
        let total: f64 = self.traffic_sources.iter().map(|(_, p)| p).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!(
                "traffic source probabilities sum to {total}, expected 1"
            )));
        }
        if self.interaction_pairs > 0 && self.feature_dim < 2 {
            return Err(Error::config("interactions need feature_dim >= 2"));
        }
        if !self.interaction_scale.is_finite() {
            return Err(Error::config("generator.interaction_scale must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InteractionEvent {
    pub sample_id: u64,
    pub step: u64,
    pub features: Vec<f64>,
    pub label: bool,
    pub traffic_source: Arc<str>,
    /// Generator's `P(label = 1)` for this event. Never a model input.
    pub true_posterior: f64,
}

/// Training events and held-out evaluation events are drawn from disjoint
/// random streams and id ranges.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventStream {
    Train,
    Eval,
}

/// A resolved generator: drift direction, interactions and intercept fixed.
#[derive(Debug, Clone)]
pub struct Generator {
    config: GeneratorConfig,
    drift_direction: Vec<f64>,
    interactions: Vec<(usize, usize, f64)>,
    intercept: f64,
    sources: Vec<Arc<str>>,
    source_cdf: Vec<f64>,
}

impl Generator {
    pub fn new(config: GeneratorConfig) -> Result<Self> {
        config.validate()?;
        let d = config.feature_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(mix(config.seed, 0xd1f7));

        // unit vector orthogonal to the base weights
        let w = &config.base_weights;
        let w_norm2: f64 = w.iter().map(|v| v * v).sum();
        let mut u: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        if w_norm2 > 0.0 {
            let proj = dot(&u, w) / w_norm2;
            u.iter_mut().zip(w).for_each(|(ui, wi)| *ui -= proj * wi);
        }
        let u_norm = dot(&u, &u).sqrt();
        let drift_direction = if u_norm > 1e-12 {
            u.iter().map(|v| v / u_norm).collect()
        } else {
            vec![0.0; d]
        };

        let k = config.interaction_pairs;
        let interactions = (0..k)
            .map(|_| {
                let i = rng.gen_range(0..d);
                let mut j = rng.gen_range(0..d - 1);
                if j >= i {
                    j += 1;
                }
                let a: f64 = rng.sample(StandardNormal);
                (i, j, a * config.interaction_scale / (k as f64).sqrt())
            })
            .collect();

        let sources: Vec<Arc<str>> = config
            .traffic_sources
            .iter()
            .map(|(name, _)| Arc::from(name.as_str()))
            .collect();
        let mut acc = 0.0;
        let source_cdf = config
            .traffic_sources
            .iter()
            .map(|(_, p)| {
                acc += p;
                acc
            })
            .collect();

        let mut generator = Self {
            config,
            drift_direction,
            interactions,
            intercept: 0.0,
            sources,
            source_cdf,
        };
        generator.intercept = generator.solve_intercept();
        Ok(generator)
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn intercept(&self) -> f64 {
        self.intercept
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    /// Linear weights in effect at `step`.
    pub fn weights_at(&self, step: u64) -> Vec<f64> {
        let elapsed = step.saturating_sub(self.config.drift_start_step) as f64;
        let theta = self.config.drift_rate * elapsed;
        if theta == 0.0 {
            return self.config.base_weights.clone();
        }
        let w = &self.config.base_weights;
        let norm = dot(w, w).sqrt();
        let (s, c) = theta.sin_cos();
        w.iter()
            .zip(&self.drift_direction)
            .map(|(wi, ui)| c * wi + s * norm * ui)
            .collect()
    }

    fn raw_logit(&self, weights: &[f64], x: &[f64]) -> f64 {
        let interactions: f64 = self.interactions.iter().map(|&(i, j, a)| a * x[i] * x[j]).sum();
        dot(weights, x) + interactions
    }

    fn logit(&self, weights: &[f64], x: &[f64]) -> f64 {
        self.raw_logit(weights, x) + self.intercept
    }

    /// Posterior for features `x` at `step`, without the latent noise term.
    pub fn posterior(&self, step: u64, x: &[f64]) -> f64 {
        sigmoid(self.logit(&self.weights_at(step), x))
    }

    fn solve_intercept(&self) -> f64 {
        let d = self.config.feature_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.config.seed, 0x1c7));
        let noise = self.config.noise_std;
        let base: Vec<f64> = (0..INTERCEPT_CALIBRATION_SAMPLES)
            .map(|_| {
                let x: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                let e: f64 = rng.sample(StandardNormal);
                self.raw_logit(&self.config.base_weights, &x) + noise * e
            })
            .collect();
        let target = self.config.positive_rate_target;
        let mean_at = |b: f64| base.iter().map(|z| sigmoid(z + b)).sum::<f64>() / base.len() as f64;
        let (mut lo, mut hi) = (-40.0, 40.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mean_at(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    /// `n` events at logical time `step`. Events are drawn sequentially, so a
    /// shorter request is always a prefix of a longer one.
    pub fn generate(&self, stream: EventStream, step: u64, n: usize) -> Result<Vec<InteractionEvent>> {
        if n == 0 {
            return Err(Error::config("generate_events needs n >= 1"));
        }
        if n > MAX_EVENTS_PER_STEP {
            return Err(Error::config(format!(
                "at most {MAX_EVENTS_PER_STEP} events per step"
            )));
        }
        let tag = match stream {
            EventStream::Train => 0x7a1,
            EventStream::Eval => 0xe7a,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(mix(mix(self.config.seed, tag), step));
        let weights = self.weights_at(step);
        let d = self.config.feature_dim;
        let id_base = match stream {
            EventStream::Train => 0,
            EventStream::Eval => EVAL_STREAM_BIT,
        } | (step << 24);
        Ok((0..n)
            .map(|i| {
                let features: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                let eps: f64 = rng.sample(StandardNormal);
                let posterior = sigmoid(self.logit(&weights, &features) + self.config.noise_std * eps);
                let label = rng.gen::<f64>() < posterior;
                let pick: f64 = rng.gen();
                let source = self
                    .source_cdf
                    .iter()
                    .position(|&c| pick < c)
                    .unwrap_or(self.sources.len() - 1);
                InteractionEvent {
                    sample_id: id_base | i as u64,
                    step,
                    features,
                    label,
                    traffic_source: Arc::clone(&self.sources[source]),
                    true_posterior: posterior,
                }
            })
            .collect())
    }
}

/// Training events for `(config, step, n)`.
pub fn generate_events(config: &GeneratorConfig, step: u64, n: usize) -> Result<Vec<InteractionEvent>> {
    Generator::new(config.clone())?.generate(EventStream::Train, step, n)
}

pub fn oracle_posterior(event: &InteractionEvent) -> f64 {
    event.true_posterior
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplingConfig {
    /// One negative kept per `r_s`.
    pub r_s: f64,
    pub r_plus: f64,
    /// Positive keep probability per `(task, traffic_source)`.
    pub p_x_by_source: BTreeMap<(String, String), f64>,
    pub b_s: f64,
}

impl SamplingConfig {
    /// Keeps negatives at `1 / r_s` and every positive, for the given sources.
    pub fn negative_downsampling(r_s: f64, sources: &[&str]) -> Self {
        Self {
            r_s,
            r_plus: 1.0,
            p_x_by_source: sources
                .iter()
                .map(|s| ((DEFAULT_TASK.to_string(), s.to_string()), 1.0))
                .collect(),
            b_s: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.r_s >= 1.0 && self.r_s.is_finite()) {
            return Err(Error::config(format!("r_s must be >= 1, got {}", self.r_s)));
        }
        if !(self.r_plus > 0.0 && self.r_plus <= 1.0) {
            return Err(Error::config(format!("r_plus must be in (0, 1], got {}", self.r_plus)));
        }
        if !(self.b_s >= 0.0 && self.b_s.is_finite()) {
            return Err(Error::config(format!("b_s must be >= 0, got {}", self.b_s)));
        }
        for ((task, source), p) in &self.p_x_by_source {
            if !(*p > 0.0 && *p <= 1.0) {
                return Err(Error::config(format!(
                    "p_x for ({task}, {source}) must be in (0, 1], got {p}"
                )));
            }
        }
        Ok(())
    }

    pub fn p_x(&self, task: &str, source: &str) -> Result<f64> {
        self.p_x_by_source
            .get(&(task.to_string(), source.to_string()))
            .copied()
            .ok_or_else(|| {
                Error::config(format!("no p_x entry for task `{task}`, traffic source `{source}`"))
            })
    }

    pub fn debias_params(&self, task: &str, source: &str) -> Result<DebiasParams> {
        DebiasParams::new(self.r_s, self.r_plus, self.p_x(task, source)?, self.b_s)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SampledBatch {
    pub kept: Vec<InteractionEvent>,
    pub kept_negative_count: usize,
    pub dropped_negative_count: usize,
    pub kept_positive_count: usize,
    pub dropped_positive_count: usize,
}

/// Keeps each negative with probability `1 / r_s` and each positive with
/// its `(task, source)` retention. Decisions depend only on `(seed,
/// sample_id)`, so a sample is kept or dropped consistently across batches.
pub fn apply_sampling(
    events: &[InteractionEvent],
    sampling: &SamplingConfig,
    task: &str,
    seed: u64,
) -> Result<SampledBatch> {
    sampling.validate()?;
    let negative_keep = 1.0 / sampling.r_s;
    let mut batch = SampledBatch::default();
    for event in events {
        let u = unit_uniform(mix(seed, event.sample_id));
        if event.label {
            let keep = sampling.p_x(task, &event.traffic_source)?;
            if u < keep {
                batch.kept_positive_count += 1;
                batch.kept.push(event.clone());
            } else {
                batch.dropped_positive_count += 1;
            }
        } else if u < negative_keep {
            batch.kept_negative_count += 1;
            batch.kept.push(event.clone());
        } else {
            batch.dropped_negative_count += 1;
        }
    }
    Ok(batch)
}

/// Writes `sample_id,step,traffic_source,label,true_posterior,f0,...` lines.
pub fn write_events(path: &Path, events: &[InteractionEvent]) -> Result<()> {
    let mut out = String::new();
    for e in events {
        write!(
            out,
            "{},{},{},{},{}",
            e.sample_id,
            e.step,
            e.traffic_source,
            u8::from(e.label),
            fmt_sig9(e.true_posterior)
        )
        .expect("writing to a String");
        for f in &e.features {
            out.push(',');
            out.push_str(&fmt_sig9(*f));
        }
        out.push('\n');
    }
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(out.as_bytes())?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

pub fn read_events(path: &Path) -> Result<Vec<InteractionEvent>> {
    let file = std::fs::File::open(path)?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut events = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let n = i + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 6 {
            return Err(parse_err(n, format!("expected at least 6 fields, found {}", fields.len())));
        }
        let num = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|_| parse_err(n, format!("bad {what} `{s}`")))
        };
        let int = |s: &str, what: &str| -> Result<u64> {
            s.parse::<u64>().map_err(|_| parse_err(n, format!("bad {what} `{s}`")))
        };
        let label = match fields[3] {
            "0" => false,
            "1" => true,
            other => return Err(parse_err(n, format!("bad label `{other}`"))),
        };
        events.push(InteractionEvent {
            sample_id: int(fields[0], "sample_id")?,
            step: int(fields[1], "step")?,
            traffic_source: Arc::from(fields[2]),
            label,
            true_posterior: num(fields[4], "true_posterior")?,
            features: fields[5..]
                .iter()
                .map(|f| num(f, "feature"))
                .collect::<Result<_>>()?,
        });
    }
    Ok(events)
}

/// SplitMix64-style combination of two words into a well-mixed seed.
pub fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15).rotate_left(17);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn unit_uniform(bits: u64) -> f64 {
    (bits >> 11) as f64 / (1u64 << 53) as f64
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config() -> GeneratorConfig {
        let mut c = GeneratorConfig::seeded(6, 1.5, 11);
        c.positive_rate_target = 0.2;
        c.traffic_sources = vec![("feed".into(), 0.7), ("search".into(), 0.3)];
        c.interaction_pairs = 3;
        c.interaction_scale = 1.0;
        c
    }

    #[test]
    fn same_inputs_same_events() {
        let a = generate_events(&config(), 5, 50).unwrap();
        let b = generate_events(&config(), 5, 50).unwrap();
        assert_eq!(a, b);
        let c = generate_events(&config(), 6, 50).unwrap();
        assert_ne!(a[0].features, c[0].features);
    }

    #[test]
    fn shorter_request_is_prefix() {
        let g = Generator::new(config()).unwrap();
        let long = g.generate(EventStream::Train, 3, 40).unwrap();
        let short = g.generate(EventStream::Train, 3, 10).unwrap();
        assert_eq!(&long[..10], &short[..]);
    }

    #[test]
    fn ids_are_unique_across_steps_and_streams() {
        let g = Generator::new(config()).unwrap();
        let mut ids = std::collections::HashSet::new();
        for step in 0..4 {
            for stream in [EventStream::Train, EventStream::Eval] {
                for e in g.generate(stream, step, 100).unwrap() {
                    assert!(ids.insert(e.sample_id));
                }
            }
        }
    }

    #[test]
    fn no_drift_keeps_weights_fixed() {
        let mut c = config();
        c.drift_rate = 0.0;
        let g = Generator::new(c.clone()).unwrap();
        assert_eq!(g.weights_at(1_000_000), c.base_weights);
    }

    #[test]
    fn drift_rotates_after_start() {
        let mut c = config();
        c.drift_rate = 0.01;
        c.drift_start_step = 100;
        let g = Generator::new(c.clone()).unwrap();
        assert_eq!(g.weights_at(50), c.base_weights);
        assert_eq!(g.weights_at(100), c.base_weights);
        let w = g.weights_at(200);
        let norm = |v: &[f64]| dot(v, v).sqrt();
        assert!((norm(&w) - norm(&c.base_weights)).abs() < 1e-12);
        let cos = dot(&w, &c.base_weights) / (norm(&w) * norm(&c.base_weights));
        assert!((cos - 1.0f64.cos()).abs() < 1e-12);

        let x = vec![0.3, -0.2, 1.0, 0.5, -1.1, 0.4];
        assert_ne!(g.posterior(50, &x), g.posterior(400, &x));
    }

    #[test]
    fn config_validation() {
        let mut c = config();
        c.base_weights.pop();
        assert!(c.validate().is_err());
        let mut c = config();
        c.traffic_sources = vec![("a".into(), 0.5), ("b".into(), 0.4)];
        assert!(c.validate().is_err());
        let mut c = config();
        c.positive_rate_target = 1.0;
        assert!(c.validate().is_err());
        assert!(generate_events(&config(), 0, 0).is_err());
    }

    #[test]
    fn oracle_posterior_passthrough() {
        let mut e = generate_events(&config(), 0, 1).unwrap().remove(0);
        e.true_posterior = 0.3;
        assert_eq!(oracle_posterior(&e), 0.3);
    }

    #[test]
    fn identity_sampling_keeps_everything() {
        let events = generate_events(&config(), 0, 500).unwrap();
        let s = SamplingConfig::negative_downsampling(1.0, &["feed", "search"]);
        let b = apply_sampling(&events, &s, DEFAULT_TASK, 3).unwrap();
        assert_eq!(b.kept, events);
        assert_eq!(b.dropped_negative_count + b.dropped_positive_count, 0);
    }

    #[test]
    fn missing_p_x_entry_is_config_error() {
        let events = generate_events(&config(), 0, 100).unwrap();
        let s = SamplingConfig::negative_downsampling(2.0, &["feed"]);
        assert!(matches!(
            apply_sampling(&events, &s, DEFAULT_TASK, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn counts_partition_the_batch() {
        let events = generate_events(&config(), 2, 1000).unwrap();
        let mut s = SamplingConfig::negative_downsampling(3.0, &["feed", "search"]);
        s.p_x_by_source.insert((DEFAULT_TASK.into(), "search".into()), 0.5);
        let b = apply_sampling(&events, &s, DEFAULT_TASK, 9).unwrap();
        let total = b.kept_negative_count
            + b.dropped_negative_count
            + b.kept_positive_count
            + b.dropped_positive_count;
        assert_eq!(total, events.len());
        assert_eq!(b.kept.len(), b.kept_negative_count + b.kept_positive_count);
    }

    #[test]
    fn event_dump_round_trips_at_nine_digits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.csv");
        let events = generate_events(&config(), 1, 20).unwrap();
        write_events(&path, &events).unwrap();
        let back = read_events(&path).unwrap();
        assert_eq!(back.len(), events.len());
        for (a, b) in events.iter().zip(&back) {
            assert_eq!(a.sample_id, b.sample_id);
            assert_eq!(a.label, b.label);
            assert_eq!(&*a.traffic_source, &*b.traffic_source);
            assert_eq!(fmt_sig9(a.true_posterior), fmt_sig9(b.true_posterior));
            assert_eq!(a.features.len(), b.features.len());
        }
        let text = std::fs::read_to_string(&path).unwrap();
        let first = text.lines().next().unwrap();
        assert_eq!(first.split(',').count(), 5 + 6);
    }
}
