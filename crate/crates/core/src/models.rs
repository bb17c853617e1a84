//! Teacher and decoupled-tower student networks.
//!
//! The student is three separate [`MlpParams`]: a shared relu backbone and
//! two logit towers that both read the backbone output. Keeping the towers
//! as distinct parameter blocks makes gradient and forward-path isolation a
//! structural property that [`partition_params`] exposes for checking.

use std::fmt::Write as _;
use std::io::Write as _;
use std::ops::Range;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::datagen::{mix, InteractionEvent, SamplingConfig};
use crate::error::{Error, Result};
use crate::numerics::{
    fmt_sig9, round_sig9, Activation, ForwardCache, GradientTape, MlpParams, Parameterized,
};
use crate::signal_store::DistillSignal;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TeacherArch {
    pub depth: usize,
    pub width: usize,
}

impl TeacherArch {
    pub fn dims(&self, input_dim: usize) -> Vec<usize> {
        let mut dims = vec![input_dim];
        dims.extend(std::iter::repeat(self.width).take(self.depth));
        dims.push(1);
        dims
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StudentArch {
    pub backbone_depth: usize,
    pub backbone_width: usize,
    pub tower_depth: usize,
    pub tower_width: usize,
}

impl StudentArch {
    pub fn validate(&self) -> Result<()> {
        if self.backbone_depth == 0 || self.backbone_width == 0 {
            return Err(Error::config("student backbone needs depth >= 1 and width >= 1"));
        }
        if self.tower_depth > 0 && self.tower_width == 0 {
            return Err(Error::config("student tower width must be >= 1"));
        }
        Ok(())
    }

    fn backbone_dims(&self, input_dim: usize) -> Vec<usize> {
        let mut dims = vec![input_dim];
        dims.extend(std::iter::repeat(self.backbone_width).take(self.backbone_depth));
        dims
    }

    fn tower_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.backbone_width];
        dims.extend(std::iter::repeat(self.tower_width).take(self.tower_depth));
        dims.push(1);
        dims
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherModel {
    pub net: MlpParams,
    /// Incremented once per update epoch.
    pub version: u64,
    pub sampling: SamplingConfig,
}

impl TeacherModel {
    pub fn build(arch: TeacherArch, input_dim: usize, sampling: SamplingConfig, seed: u64) -> Result<Self> {
        if arch.width == 0 && arch.depth > 0 {
            return Err(Error::config("teacher width must be >= 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 0x7eac));
        let net = MlpParams::init(&arch.dims(input_dim), Activation::Relu, Activation::Identity, &mut rng)?;
        Ok(Self {
            net,
            version: 0,
            sampling,
        })
    }

    pub fn to_checkpoint(&self, seed: u64) -> Checkpoint {
        Checkpoint {
            kind: "teacher".into(),
            seed,
            version: self.version,
            nets: vec![("net".into(), self.net.clone())],
        }
    }
}

/// Raw logits `T₁` for a batch plus one signal per sample stamped with the
/// current teacher version. Parameters are not touched.
pub fn teacher_forward(
    model: &TeacherModel,
    batch: &[InteractionEvent],
    step: u64,
) -> Result<(Vec<f64>, Vec<DistillSignal>)> {
    let mut logits = Vec::with_capacity(batch.len());
    let mut signals = Vec::with_capacity(batch.len());
    for event in batch {
        let z = model.net.predict(&event.features)?[0];
        if !z.is_finite() {
            return Err(Error::Divergence(format!(
                "teacher logit for sample {} is {z}",
                event.sample_id
            )));
        }
        logits.push(z);
        signals.push(DistillSignal::new(event.sample_id, model.version, z, step));
    }
    Ok((logits, signals))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudentModel {
    pub backbone: MlpParams,
    pub main_tower: MlpParams,
    pub aux_tower: MlpParams,
    pub sampling: SamplingConfig,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TowerOutputs {
    /// Serving logit.
    pub z_main: f64,
    /// Distillation logit.
    pub z_aux: f64,
}

/// Flat index ranges of the three student parameter blocks, in the order
/// backbone, main tower, aux tower.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamPartition {
    pub backbone: Range<usize>,
    pub main: Range<usize>,
    pub aux: Range<usize>,
}

impl ParamPartition {
    pub fn total(&self) -> usize {
        self.aux.end
    }
}

/// Deterministic student construction. The backbone is drawn first, then
/// the main tower, then the aux tower, so a model that never uses its aux
/// tower is identical to one built without it.
pub fn build_student(
    arch: StudentArch,
    input_dim: usize,
    sampling: SamplingConfig,
    seed: u64,
) -> Result<StudentModel> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 0x57d));
    let backbone = MlpParams::init(&arch.backbone_dims(input_dim), Activation::Relu, Activation::Relu, &mut rng)?;
    let tower = arch.tower_dims();
    let main_tower = MlpParams::init(&tower, Activation::Relu, Activation::Identity, &mut rng)?;
    let aux_tower = MlpParams::init(&tower, Activation::Relu, Activation::Identity, &mut rng)?;
    Ok(StudentModel {
        backbone,
        main_tower,
        aux_tower,
        sampling,
    })
}

pub fn partition_params(model: &StudentModel) -> ParamPartition {
    let b = model.backbone.param_count();
    let m = model.main_tower.param_count();
    let a = model.aux_tower.param_count();
    ParamPartition {
        backbone: 0..b,
        main: b..b + m,
        aux: b + m..b + m + a,
    }
}

pub fn student_forward(model: &StudentModel, batch: &[InteractionEvent]) -> Result<Vec<TowerOutputs>> {
    batch.iter().map(|e| model.outputs(&e.features)).collect()
}

/// Activations of one student forward pass.
#[derive(Debug, Clone)]
pub struct StudentPass {
    backbone: ForwardCache,
    main: ForwardCache,
    aux: Option<ForwardCache>,
}

impl StudentPass {
    pub fn z_main(&self) -> f64 {
        self.main.output()[0]
    }

    pub fn z_aux(&self) -> Option<f64> {
        self.aux.as_ref().map(|c| c.output()[0])
    }

    pub fn backbone_rep(&self) -> &[f64] {
        self.backbone.output()
    }
}

/// Gradient buffers for the three student blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentGrads {
    pub backbone: GradientTape,
    pub main: GradientTape,
    pub aux: GradientTape,
}

impl StudentGrads {
    pub fn zeros_like(model: &StudentModel) -> Self {
        Self {
            backbone: GradientTape::zeros_like(&model.backbone),
            main: GradientTape::zeros_like(&model.main_tower),
            aux: GradientTape::zeros_like(&model.aux_tower),
        }
    }

    pub fn zero(&mut self) {
        self.backbone.zero();
        self.main.zero();
        self.aux.zero();
    }

    pub fn scale(&mut self, factor: f64) {
        self.backbone.scale(factor);
        self.main.scale(factor);
        self.aux.scale(factor);
    }

    /// All gradients in the flat order of [`partition_params`].
    pub fn flat(&self) -> Vec<f64> {
        self.backbone
            .iter()
            .chain(self.main.iter())
            .chain(self.aux.iter())
            .collect()
    }
}

impl StudentModel {
    pub fn input_dim(&self) -> usize {
        self.backbone.input_dim()
    }

    pub fn param_count(&self) -> usize {
        self.backbone.param_count() + self.main_tower.param_count() + self.aux_tower.param_count()
    }

    pub fn outputs(&self, x: &[f64]) -> Result<TowerOutputs> {
        let rep = self.backbone.predict(x)?;
        let z_main = self.main_tower.predict(&rep)?[0];
        let z_aux = self.aux_tower.predict(&rep)?[0];
        if !z_main.is_finite() || !z_aux.is_finite() {
            return Err(Error::Divergence("student logit is not finite".into()));
        }
        Ok(TowerOutputs { z_main, z_aux })
    }

    /// Serving logit only.
    pub fn main_logit(&self, x: &[f64]) -> Result<f64> {
        let rep = self.backbone.predict(x)?;
        Ok(self.main_tower.predict(&rep)?[0])
    }

    pub fn forward_pass(&self, x: &[f64], with_aux: bool) -> Result<StudentPass> {
        let backbone = self.backbone.forward(x)?;
        let main = self.main_tower.forward(backbone.output())?;
        let aux = if with_aux {
            Some(self.aux_tower.forward(backbone.output())?)
        } else {
            None
        };
        Ok(StudentPass { backbone, main, aux })
    }

    /// Accumulates the gradient of `L` given `∂L/∂z_main` and `∂L/∂z_aux`.
    /// The backbone receives the sum of what both towers pass down.
    pub fn backward_into(
        &self,
        pass: &StudentPass,
        dl_dz_main: f64,
        dl_dz_aux: f64,
        grads: &mut StudentGrads,
    ) -> Result<()> {
        let mut d_rep = self
            .main_tower
            .backward_into(&pass.main, &[dl_dz_main], &mut grads.main)?;
        if dl_dz_aux != 0.0 {
            let aux = pass
                .aux
                .as_ref()
                .ok_or_else(|| Error::Shape("aux gradient without an aux forward pass".into()))?;
            let d_aux = self.aux_tower.backward_into(aux, &[dl_dz_aux], &mut grads.aux)?;
            d_rep.iter_mut().zip(&d_aux).for_each(|(a, b)| *a += b);
        }
        self.backbone.backward_into(&pass.backbone, &d_rep, &mut grads.backbone)?;
        Ok(())
    }

    /// Rounds every parameter to checkpoint precision.
    pub fn quantize(&mut self) {
        for net in [&mut self.backbone, &mut self.main_tower, &mut self.aux_tower] {
            net.iter_params_mut().for_each(|p| *p = round_sig9(*p));
        }
    }

    pub fn to_checkpoint(&self, seed: u64, version: u64) -> Checkpoint {
        Checkpoint {
            kind: "student".into(),
            seed,
            version,
            nets: vec![
                ("backbone".into(), self.backbone.clone()),
                ("main_tower".into(), self.main_tower.clone()),
                ("aux_tower".into(), self.aux_tower.clone()),
            ],
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint, sampling: SamplingConfig) -> Result<Self> {
        if ckpt.kind != "student" {
            return Err(Error::config(format!("checkpoint holds a {}, not a student", ckpt.kind)));
        }
        let mut nets = ckpt.nets.into_iter();
        let mut take = |name: &str| -> Result<MlpParams> {
            match nets.next() {
                Some((n, p)) if n == name => Ok(p),
                _ => Err(Error::config(format!("checkpoint is missing network `{name}`"))),
            }
        };
        Ok(Self {
            backbone: take("backbone")?,
            main_tower: take("main_tower")?,
            aux_tower: take("aux_tower")?,
            sampling,
        })
    }
}

impl Parameterized for StudentModel {
    fn param_count(&self) -> usize {
        StudentModel::param_count(self)
    }

    fn param(&self, index: usize) -> f64 {
        let p = partition_params(self);
        if p.backbone.contains(&index) {
            self.backbone.param(index)
        } else if p.main.contains(&index) {
            self.main_tower.param(index - p.main.start)
        } else {
            self.aux_tower.param(index - p.aux.start)
        }
    }

    fn set_param(&mut self, index: usize, value: f64) {
        let p = partition_params(self);
        if p.backbone.contains(&index) {
            self.backbone.set_param(index, value)
        } else if p.main.contains(&index) {
            self.main_tower.set_param(index - p.main.start, value)
        } else {
            self.aux_tower.set_param(index - p.aux.start, value)
        }
    }
}

/// Self-describing parameter file: a header with kind, seed, version and
/// network shapes, then one 9-significant-digit decimal per line.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub seed: u64,
    pub version: u64,
    pub nets: Vec<(String, MlpParams)>,
}

const CHECKPOINT_MAGIC: &str = "# rec-distill checkpoint v1";

fn activation_name(a: Activation) -> &'static str {
    match a {
        Activation::Relu => "relu",
        Activation::Identity => "identity",
    }
}

impl Checkpoint {
    /// Fails if any parameter would not survive the decimal round trip.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        writeln!(out, "{CHECKPOINT_MAGIC}").unwrap();
        writeln!(out, "kind = {}", self.kind).unwrap();
        writeln!(out, "seed = {}", self.seed).unwrap();
        writeln!(out, "version = {}", self.version).unwrap();
        for (name, net) in &self.nets {
            let dims: Vec<String> = net.dims().iter().map(usize::to_string).collect();
            let acts: Vec<&str> = net.layers().iter().map(|l| activation_name(l.activation)).collect();
            writeln!(out, "net = {name} {} {}", dims.join(","), acts.join(",")).unwrap();
        }
        writeln!(out, "params").unwrap();
        for (name, net) in &self.nets {
            for (i, p) in net.iter_params().enumerate() {
                let text = fmt_sig9(p);
                if text.parse::<f64>().ok() != Some(p) {
                    return Err(Error::config(format!(
                        "parameter {i} of `{name}` ({p:e}) does not round-trip at 9 significant digits"
                    )));
                }
                out.push_str(&text);
                out.push('\n');
            }
        }
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        tmp.write_all(out.as_bytes())?;
        tmp.persist(path).map_err(|e| e.error)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        match lines.next() {
            Some((_, CHECKPOINT_MAGIC)) => {}
            _ => return Err(err(1, "missing checkpoint header".into())),
        }
        let mut kind = None;
        let mut seed = None;
        let mut version = None;
        let mut shapes: Vec<(String, Vec<usize>, Vec<Activation>)> = Vec::new();
        for (n, line) in lines.by_ref() {
            if line == "params" {
                break;
            }
            let (key, value) = line
                .split_once(" = ")
                .ok_or_else(|| err(n, format!("expected `key = value`, found `{line}`")))?;
            match key {
                "kind" => kind = Some(value.to_string()),
                "seed" => seed = Some(value.parse().map_err(|_| err(n, "bad seed".into()))?),
                "version" => version = Some(value.parse().map_err(|_| err(n, "bad version".into()))?),
                "net" => {
                    let parts: Vec<&str> = value.split(' ').collect();
                    if parts.len() != 3 {
                        return Err(err(n, "net line needs name, widths and activations".into()));
                    }
                    let dims = parts[1]
                        .split(',')
                        .map(|d| d.parse::<usize>().map_err(|_| err(n, format!("bad width `{d}`"))))
                        .collect::<Result<Vec<_>>>()?;
                    let acts = parts[2]
                        .split(',')
                        .map(|a| match a {
                            "relu" => Ok(Activation::Relu),
                            "identity" => Ok(Activation::Identity),
                            other => Err(err(n, format!("unknown activation `{other}`"))),
                        })
                        .collect::<Result<Vec<_>>>()?;
                    if acts.len() + 1 != dims.len() {
                        return Err(err(n, "activation count does not match widths".into()));
                    }
                    shapes.push((parts[0].to_string(), dims, acts));
                }
                other => return Err(err(n, format!("unknown header key `{other}`"))),
            }
        }
        let mut nets = Vec::new();
        for (name, dims, acts) in shapes {
            let mut net = MlpParams::zeros(&dims, Activation::Relu, Activation::Identity)?;
            for (layer, act) in net.layers_mut().iter_mut().zip(&acts) {
                layer.activation = *act;
            }
            for slot in net.iter_params_mut() {
                let (n, line) = lines
                    .next()
                    .ok_or_else(|| err(text.lines().count(), "checkpoint truncated".into()))?;
                *slot = line
                    .parse()
                    .map_err(|_| err(n, format!("bad parameter `{line}`")))?;
            }
            nets.push((name, net));
        }
        if let Some((n, _)) = lines.next() {
            return Err(err(n, "trailing data after parameters".into()));
        }
        Ok(Self {
            kind: kind.ok_or_else(|| err(1, "missing kind".into()))?,
            seed: seed.ok_or_else(|| err(1, "missing seed".into()))?,
            version: version.ok_or_else(|| err(1, "missing version".into()))?,
            nets,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_events, GeneratorConfig};

    fn sampling() -> SamplingConfig {
        SamplingConfig::negative_downsampling(1.0, &["organic"])
    }

    fn arch(width: usize) -> StudentArch {
        StudentArch {
            backbone_depth: 2,
            backbone_width: width,
            tower_depth: 1,
            tower_width: 8,
        }
    }

    fn events(n: usize) -> Vec<InteractionEvent> {
        generate_events(&GeneratorConfig::seeded(5, 1.0, 3), 0, n).unwrap()
    }

    #[test]
    fn zero_teacher_emits_zero_logits() {
        let net = MlpParams::zeros(&[5, 4, 1], Activation::Relu, Activation::Identity).unwrap();
        let teacher = TeacherModel {
            net,
            version: 3,
            sampling: sampling(),
        };
        let batch = events(10);
        let (logits, signals) = teacher_forward(&teacher, &batch, 7).unwrap();
        assert!(logits.iter().all(|&z| z == 0.0));
        assert_eq!(signals.len(), batch.len());
        for (s, e) in signals.iter().zip(&batch) {
            assert_eq!(s.sample_id, e.sample_id);
            assert_eq!((s.teacher_version, s.emit_step, s.t1_logit), (3, 7, 0.0));
        }
    }

    #[test]
    fn teacher_forward_is_repeatable() {
        let t = TeacherModel::build(TeacherArch { depth: 2, width: 6 }, 5, sampling(), 1).unwrap();
        let batch = events(20);
        let a = teacher_forward(&t, &batch, 0).unwrap();
        let b = teacher_forward(&t, &batch, 0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn identical_towers_give_identical_logits() {
        let mut s = build_student(arch(16), 5, sampling(), 4).unwrap();
        s.aux_tower = s.main_tower.clone();
        for o in student_forward(&s, &events(30)).unwrap() {
            assert_eq!(o.z_main, o.z_aux);
        }
    }

    #[test]
    fn zero_aux_tower_outputs_zero() {
        let mut s = build_student(arch(16), 5, sampling(), 4).unwrap();
        s.aux_tower.iter_params_mut().for_each(|p| *p = 0.0);
        assert!(student_forward(&s, &events(30)).unwrap().iter().all(|o| o.z_aux == 0.0));
    }

    #[test]
    fn aux_perturbation_leaves_main_untouched() {
        let s = build_student(arch(16), 5, sampling(), 4).unwrap();
        let mut t = s.clone();
        for i in 0..t.aux_tower.param_count() {
            let v = t.aux_tower.param(i);
            t.aux_tower.set_param(i, v + 0.37);
        }
        let batch = events(30);
        let a = student_forward(&s, &batch).unwrap();
        let b = student_forward(&t, &batch).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.z_main.to_bits(), y.z_main.to_bits());
            assert_ne!(x.z_aux, y.z_aux);
        }
    }

    #[test]
    fn partition_is_disjoint_and_exhaustive() {
        let s = build_student(arch(16), 5, sampling(), 4).unwrap();
        let p = partition_params(&s);
        assert_eq!(p.backbone.len() + p.main.len() + p.aux.len(), s.param_count());
        assert_eq!(p.backbone.end, p.main.start);
        assert_eq!(p.main.end, p.aux.start);
        assert_eq!(p.total(), s.param_count());
        assert_eq!(partition_params(&s), p);
    }

    #[test]
    fn build_is_deterministic_and_monotone_in_width() {
        let a = build_student(arch(32), 5, sampling(), 9).unwrap();
        let b = build_student(arch(32), 5, sampling(), 9).unwrap();
        assert_eq!(a, b);
        let small = build_student(arch(16), 5, sampling(), 9).unwrap();
        assert!(a.param_count() > small.param_count());
        assert!(build_student(
            StudentArch {
                backbone_depth: 0,
                ..arch(4)
            },
            5,
            sampling(),
            0
        )
        .is_err());
    }

    #[test]
    fn student_gradient_matches_finite_differences() {
        let s = build_student(arch(6), 5, sampling(), 2).unwrap();
        let batch = events(8);
        let loss = |m: &StudentModel| -> Result<(f64, Vec<f64>)> {
            let mut grads = StudentGrads::zeros_like(m);
            let mut total = 0.0;
            for e in &batch {
                let pass = m.forward_pass(&e.features, true)?;
                let zm = pass.z_main();
                let za = pass.z_aux().unwrap();
                let y = f64::from(u8::from(e.label));
                total += 0.5 * (zm - y).powi(2) + 0.25 * za * za;
                m.backward_into(&pass, zm - y, 0.5 * za, &mut grads)?;
            }
            Ok((total, grads.flat()))
        };
        let r = crate::numerics::grad_check(loss, &s, 40, 1e-5, 1).unwrap();
        assert!(r.max_relative_error <= 1e-5, "{r:?}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("student.ckpt");
        let mut s = build_student(arch(8), 5, sampling(), 1).unwrap();
        assert!(s.to_checkpoint(1, 0).save(&path).is_err());
        s.quantize();
        s.to_checkpoint(1, 4).save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!((back.seed, back.version), (1, 4));
        assert_eq!(StudentModel::from_checkpoint(back, sampling()).unwrap(), s);

        let text = std::fs::read_to_string(&path).unwrap();
        let cut = &text[..text.len() - 40];
        std::fs::write(&path, cut).unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }
}
