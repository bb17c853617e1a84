//! Fully connected networks with hand-written reverse-mode gradients.
//!
//! Parameters are addressed in a canonical flat order: layer by layer, the
//! row-major weight matrix followed by the bias vector. [`GradientTape`]
//! mirrors that layout exactly, so flat indices are interchangeable between
//! the two.

use rand::Rng;

use super::matrix::DenseMatrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Identity => v,
        }
    }

    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `out × in`
    pub weight: DenseMatrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    fn param_count(&self) -> usize {
        self.weight.values().len() + self.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    layers: Vec<Layer>,
}

/// Activations recorded by a forward pass, consumed by the matching backward.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Vec<Vec<f64>>,
    pre_activations: Vec<Vec<f64>>,
    output: Vec<f64>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        &self.output
    }

    pub fn input(&self) -> &[f64] {
        &self.inputs[0]
    }
}

impl MlpParams {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("network needs at least one layer".into()));
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.out_dim() {
                return Err(Error::Shape(format!(
                    "layer {i}: bias length {} != output width {}",
                    layer.bias.len(),
                    layer.out_dim()
                )));
            }
            if layer.bias.iter().any(|b| !b.is_finite()) {
                return Err(Error::NonFinite(format!("layer {i} bias")));
            }
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::Shape(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    pair[0].out_dim(),
                    i + 1,
                    pair[1].in_dim()
                )));
            }
        }
        Ok(Self { layers })
    }

    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
    ///
    /// `dims` lists every width from input to output; all hidden layers use
    /// `hidden`, the last layer uses `output`.
    pub fn init<R: Rng + ?Sized>(
        dims: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        Self::build(dims, hidden, output, |fan_in, fan_out| {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            rng.gen_range(-limit..=limit)
        })
    }

    pub fn zeros(dims: &[usize], hidden: Activation, output: Activation) -> Result<Self> {
        Self::build(dims, hidden, output, |_, _| 0.0)
    }

    fn build(
        dims: &[usize],
        hidden: Activation,
        output: Activation,
        mut draw: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Shape(format!("invalid layer widths {dims:?}")));
        }
        let n = dims.len() - 1;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let values = (0..fan_in * fan_out).map(|_| draw(fan_in, fan_out)).collect();
                Layer {
                    weight: DenseMatrix::from_vec(fan_out, fan_in, values)
                        .expect("dimensions computed above"),
                    bias: vec![0.0; fan_out],
                    activation: if i + 1 == n { output } else { hidden },
                }
            })
            .collect();
        Self::new(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    /// Layer widths from input to output.
    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(Layer::out_dim))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// True when the network maps to a single pre-sigmoid logit.
    pub fn is_logit_head(&self) -> bool {
        self.output_dim() == 1
            && self.layers[self.layers.len() - 1].activation == Activation::Identity
    }

    pub fn iter_params(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weight.values().iter().chain(l.bias.iter()).copied())
    }

    pub fn iter_params_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.layers.iter_mut().flat_map(|l| {
            let Layer { weight, bias, .. } = l;
            weight.values_mut().iter_mut().chain(bias.iter_mut())
        })
    }

    pub fn param(&self, index: usize) -> f64 {
        *self.locate(index)
    }

    pub fn set_param(&mut self, index: usize, value: f64) {
        *self.locate_mut(index) = value;
    }

    fn locate(&self, mut index: usize) -> &f64 {
        for layer in &self.layers {
            let w = layer.weight.values().len();
            if index < w {
                return &layer.weight.values()[index];
            }
            index -= w;
            if index < layer.bias.len() {
                return &layer.bias[index];
            }
            index -= layer.bias.len();
        }
        panic!("parameter index out of range");
    }

    fn locate_mut(&mut self, mut index: usize) -> &mut f64 {
        for layer in &mut self.layers {
            let w = layer.weight.values().len();
            if index < w {
                return &mut layer.weight.values_mut()[index];
            }
            index -= w;
            if index < layer.bias.len() {
                return &mut layer.bias[index];
            }
            index -= layer.bias.len();
        }
        panic!("parameter index out of range");
    }

    pub fn forward(&self, x: &[f64]) -> Result<ForwardCache> {
        if x.len() != self.input_dim() {
            return Err(Error::InputShape {
                expected: self.input_dim(),
                actual: x.len(),
            });
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let mut current = x.to_vec();
        for layer in &self.layers {
            let mut pre = Vec::with_capacity(layer.out_dim());
            layer.weight.affine_into(&current, &layer.bias, &mut pre);
            let next = pre.iter().map(|&v| layer.activation.apply(v)).collect();
            inputs.push(std::mem::replace(&mut current, next));
            pre_activations.push(pre);
        }
        Ok(ForwardCache {
            inputs,
            pre_activations,
            output: current,
        })
    }

    /// Output only, without keeping the cache.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::InputShape {
                expected: self.input_dim(),
                actual: x.len(),
            });
        }
        let mut current = x.to_vec();
        let mut next = Vec::new();
        for layer in &self.layers {
            layer.weight.affine_into(&current, &layer.bias, &mut next);
            for v in next.iter_mut() {
                *v = layer.activation.apply(*v);
            }
            std::mem::swap(&mut current, &mut next);
        }
        Ok(current)
    }

    /// Accumulates `upstream · ∂output/∂θ` into `tape` and returns `∂L/∂x`.
    pub fn backward_into(
        &self,
        cache: &ForwardCache,
        upstream: &[f64],
        tape: &mut GradientTape,
    ) -> Result<Vec<f64>> {
        self.check_cache(cache)?;
        if upstream.len() != self.output_dim() {
            return Err(Error::Shape(format!(
                "upstream gradient has {} entries, network outputs {}",
                upstream.len(),
                self.output_dim()
            )));
        }
        if !tape.matches(self) {
            return Err(Error::Shape("gradient tape does not mirror parameters".into()));
        }
        let mut delta: Vec<f64> = upstream.to_vec();
        let mut below = Vec::new();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            for (d, &pre) in delta.iter_mut().zip(&cache.pre_activations[i]) {
                *d *= layer.activation.derivative(pre);
            }
            let slot = &mut tape.layers[i];
            slot.weight.add_outer(&delta, &cache.inputs[i], 1.0);
            for (b, d) in slot.bias.iter_mut().zip(&delta) {
                *b += d;
            }
            layer.weight.transpose_mul_into(&delta, &mut below);
            std::mem::swap(&mut delta, &mut below);
        }
        Ok(delta)
    }

    fn check_cache(&self, cache: &ForwardCache) -> Result<()> {
        let ok = cache.inputs.len() == self.layers.len()
            && cache
                .inputs
                .iter()
                .zip(&cache.pre_activations)
                .zip(&self.layers)
                .all(|((inp, pre), l)| inp.len() == l.in_dim() && pre.len() == l.out_dim());
        if ok {
            Ok(())
        } else {
            Err(Error::Shape("forward cache was produced by a different network".into()))
        }
    }
}

/// Per-parameter gradient buffers with the same shapes as an [`MlpParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientTape {
    layers: Vec<TapeLayer>,
}

#[derive(Debug, Clone, PartialEq)]
struct TapeLayer {
    weight: DenseMatrix,
    bias: Vec<f64>,
}

impl GradientTape {
    pub fn zeros_like(params: &MlpParams) -> Self {
        Self {
            layers: params
                .layers
                .iter()
                .map(|l| TapeLayer {
                    weight: DenseMatrix::zeros(l.out_dim(), l.in_dim()),
                    bias: vec![0.0; l.out_dim()],
                })
                .collect(),
        }
    }

    pub fn matches(&self, params: &MlpParams) -> bool {
        self.layers.len() == params.layers.len()
            && self.layers.iter().zip(&params.layers).all(|(t, l)| {
                t.weight.rows() == l.out_dim()
                    && t.weight.cols() == l.in_dim()
                    && t.bias.len() == l.out_dim()
            })
    }

    pub fn len(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.values().len() + l.bias.len())
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn zero(&mut self) {
        self.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weight.values().iter().chain(l.bias.iter()).copied())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.layers.iter_mut().flat_map(|l| {
            let TapeLayer { weight, bias } = l;
            weight.values_mut().iter_mut().chain(bias.iter_mut())
        })
    }

    pub fn get(&self, index: usize) -> f64 {
        self.iter().nth(index).expect("gradient index out of range")
    }

    pub fn scale(&mut self, factor: f64) {
        self.iter_mut().for_each(|g| *g *= factor);
    }

    pub fn add_assign(&mut self, other: &GradientTape) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::Shape("adding tapes of different shapes".into()));
        }
        self.iter_mut().zip(other.iter()).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn is_all_zero(&self) -> bool {
        self.iter().all(|g| g == 0.0)
    }

    pub fn all_finite(&self) -> bool {
        self.iter().all(f64::is_finite)
    }
}

/// Forward pass of a logit network: returns the scalar logit and the cache.
pub fn mlp_forward(params: &MlpParams, x: &[f64]) -> Result<(f64, ForwardCache)> {
    if params.output_dim() != 1 {
        return Err(Error::Shape(format!(
            "logit network must have one output, found {}",
            params.output_dim()
        )));
    }
    let cache = params.forward(x)?;
    let z = cache.output[0];
    if !z.is_finite() {
        return Err(Error::NonFinite("forward logit".into()));
    }
    Ok((z, cache))
}

/// Gradient of `L` with respect to every parameter, given `∂L/∂z`.
pub fn mlp_backward(
    params: &MlpParams,
    cache: &ForwardCache,
    upstream_dl_dz: f64,
) -> Result<GradientTape> {
    let mut tape = GradientTape::zeros_like(params);
    params.backward_into(cache, &[upstream_dl_dz], &mut tape)?;
    Ok(tape)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn linear(weights: &[f64], bias: f64) -> MlpParams {
        MlpParams::new(vec![Layer {
            weight: DenseMatrix::from_vec(1, weights.len(), weights.to_vec()).unwrap(),
            bias: vec![bias],
            activation: Activation::Identity,
        }])
        .unwrap()
    }

    #[test]
    fn zero_network_outputs_zero() {
        let p = MlpParams::zeros(&[3, 4, 1], Activation::Relu, Activation::Identity).unwrap();
        let (z, _) = mlp_forward(&p, &[1.0, -2.0, 3.0]).unwrap();
        assert_eq!(z, 0.0);
    }

    #[test]
    fn single_linear_layer_dot_product() {
        let (z, _) = mlp_forward(&linear(&[1.0, 2.0], 0.5), &[3.0, -1.0]).unwrap();
        assert_eq!(z, 1.5);
    }

    #[test]
    fn dead_relu_layer_leaves_output_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = MlpParams::init(&[2, 3, 1], Activation::Relu, Activation::Identity, &mut rng)
            .unwrap();
        // every hidden unit gets a large negative bias
        p.layers_mut()[0].bias = vec![-100.0; 3];
        p.layers_mut()[1].bias = vec![0.25];
        let (z, _) = mlp_forward(&p, &[0.3, -0.7]).unwrap();
        assert_eq!(z, 0.25);
    }

    #[test]
    fn input_width_is_checked() {
        let p = linear(&[1.0, 2.0], 0.0);
        assert!(matches!(
            mlp_forward(&p, &[1.0]),
            Err(Error::InputShape {
                expected: 2,
                actual: 1
            })
        ));
    }

    #[test]
    fn chaining_is_validated() {
        let bad = MlpParams::new(vec![
            Layer {
                weight: DenseMatrix::zeros(3, 2),
                bias: vec![0.0; 3],
                activation: Activation::Relu,
            },
            Layer {
                weight: DenseMatrix::zeros(1, 4),
                bias: vec![0.0],
                activation: Activation::Identity,
            },
        ]);
        assert!(bad.is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_tape() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = MlpParams::init(&[4, 5, 1], Activation::Relu, Activation::Identity, &mut rng)
            .unwrap();
        let (_, cache) = mlp_forward(&p, &[0.1, 0.2, 0.3, 0.4]).unwrap();
        assert!(mlp_backward(&p, &cache, 0.0).unwrap().is_all_zero());
    }

    #[test]
    fn linear_layer_gradient_is_input() {
        let p = linear(&[0.3, -0.2], 0.1);
        let (_, cache) = mlp_forward(&p, &[3.0, -1.0]).unwrap();
        let tape = mlp_backward(&p, &cache, 1.0).unwrap();
        assert_eq!(tape.iter().collect::<Vec<_>>(), vec![3.0, -1.0, 1.0]);
    }

    #[test]
    fn foreign_cache_is_rejected() {
        let a = linear(&[1.0, 2.0], 0.0);
        let b = linear(&[1.0, 2.0, 3.0], 0.0);
        let (_, cache) = mlp_forward(&b, &[1.0, 1.0, 1.0]).unwrap();
        assert!(mlp_backward(&a, &cache, 1.0).is_err());
    }

    #[test]
    fn flat_indexing_matches_iteration() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = MlpParams::init(&[3, 2, 1], Activation::Relu, Activation::Identity, &mut rng)
            .unwrap();
        assert_eq!(p.param_count(), 3 * 2 + 2 + 2 + 1);
        let flat: Vec<f64> = p.iter_params().collect();
        for (i, v) in flat.iter().enumerate() {
            assert_eq!(p.param(i), *v);
        }
        p.set_param(8, 7.0);
        assert_eq!(p.layers()[1].weight.get(0, 0), 7.0);
    }

    #[test]
    fn init_respects_glorot_bound_and_seed() {
        let dims = [8, 16, 1];
        let a = MlpParams::init(
            &dims,
            Activation::Relu,
            Activation::Identity,
            &mut ChaCha8Rng::seed_from_u64(9),
        )
        .unwrap();
        let b = MlpParams::init(
            &dims,
            Activation::Relu,
            Activation::Identity,
            &mut ChaCha8Rng::seed_from_u64(9),
        )
        .unwrap();
        assert_eq!(a, b);
        let limit = (6.0f64 / 24.0).sqrt();
        assert!(a.layers()[0].weight.values().iter().all(|w| w.abs() <= limit));
        assert!(a.layers().iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));
        assert!(a.is_logit_head());
    }
}
