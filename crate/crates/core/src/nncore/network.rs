use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::loss::{l2_penalty, softplus, Loss, SIGMA_FLOOR};
use super::spec::{Activation, HeadKind, NetworkSpec};
use crate::error::{Error, Result};
use crate::rng::seeded;

/// Affine layer with row-major `(fan_in, fan_out)` weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl DenseLayer {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        DenseLayer {
            fan_in,
            fan_out,
            weights: vec![0.0; fan_in * fan_out],
            biases: vec![0.0; fan_out],
        }
    }

    pub fn num_params(&self) -> usize {
        self.weights.len() + self.biases.len()
    }

    fn is_consistent(&self) -> bool {
        self.weights.len() == self.fan_in * self.fan_out && self.biases.len() == self.fan_out
    }
}

/// Multiplicative mask on a layer's input.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub values: Vec<f64>,
    /// One row broadcast over the batch instead of one row per sample.
    pub shared: bool,
}

/// Dropout-style modifications of the forward pass.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct Modifiers<'a> {
    /// `masks[l]` multiplies the input of layer `l`.
    pub masks: Option<&'a [Option<Mask>]>,
    /// Multiply hidden layer `l`'s activation by `sqrt(1 / width_l)`.
    pub width_scaling: bool,
}

impl Modifiers<'_> {
    fn mask(&self, layer: usize) -> Option<&Mask> {
        self.masks.and_then(|m| m.get(layer)).and_then(Option::as_ref)
    }
}

/// Intermediate values of a batched forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub batch: usize,
    /// Masked input of each layer.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation of each layer.
    pre: Vec<Vec<f64>>,
}

impl ForwardCache {
    /// Raw output of the final affine layer, `(batch, raw_output_dim)`.
    pub fn output(&self) -> &[f64] {
        self.pre.last().expect("at least one layer")
    }
}

fn apply_mask(a: &mut [f64], mask: &Mask, width: usize) {
    if mask.shared {
        for row in a.chunks_exact_mut(width) {
            for (v, m) in row.iter_mut().zip(&mask.values) {
                *v *= m;
            }
        }
    } else {
        for (v, m) in a.iter_mut().zip(&mask.values) {
            *v *= m;
        }
    }
}

fn affine(u: &[f64], layer: &DenseLayer, batch: usize) -> Vec<f64> {
    let (fi, fo) = (layer.fan_in, layer.fan_out);
    let mut z = vec![0.0; batch * fo];
    for (zr, ur) in z.chunks_exact_mut(fo).zip(u.chunks_exact(fi)) {
        zr.copy_from_slice(&layer.biases);
        for (k, &h) in ur.iter().enumerate() {
            if h != 0.0 {
                let wk = &layer.weights[k * fo..(k + 1) * fo];
                for (zj, wj) in zr.iter_mut().zip(wk) {
                    *zj += h * wj;
                }
            }
        }
    }
    z
}

fn activate(z: &[f64], act: Activation, scale: f64) -> Vec<f64> {
    z.iter().map(|&v| act.apply(v) * scale).collect()
}

fn width_scale(m: &Modifiers, width: usize) -> f64 {
    if m.width_scaling {
        (1.0 / width as f64).sqrt()
    } else {
        1.0
    }
}

fn check_finite(values: &[f64], layer: usize, what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric {
            layer,
            what: what.to_string(),
        })
    }
}

pub(crate) fn check_input(x: &[f64], batch: usize, input_dim: usize) -> Result<()> {
    if x.len() != batch * input_dim {
        return Err(Error::Shape {
            context: "network input",
            expected: batch * input_dim,
            got: x.len(),
        });
    }
    Ok(())
}

/// Batched forward pass keeping what backpropagation needs.
pub(crate) fn forward_layers(
    layers: &[DenseLayer],
    acts: &[Activation],
    x: &[f64],
    batch: usize,
    m: &Modifiers,
) -> Result<ForwardCache> {
    let mut inputs = Vec::with_capacity(layers.len());
    let mut pre = Vec::with_capacity(layers.len());
    let mut a = x.to_vec();
    for (l, layer) in layers.iter().enumerate() {
        if let Some(mask) = m.mask(l) {
            apply_mask(&mut a, mask, layer.fan_in);
        }
        let z = affine(&a, layer, batch);
        check_finite(&z, l, "pre-activation")?;
        if l + 1 < layers.len() {
            let next = activate(&z, acts[l], width_scale(m, layer.fan_out));
            inputs.push(std::mem::replace(&mut a, next));
        } else {
            inputs.push(std::mem::take(&mut a));
        }
        pre.push(z);
    }
    Ok(ForwardCache { batch, inputs, pre })
}

/// Batched forward pass returning only the raw output.
pub(crate) fn forward_output(
    layers: &[DenseLayer],
    acts: &[Activation],
    x: &[f64],
    batch: usize,
    m: &Modifiers,
) -> Result<Vec<f64>> {
    let mut a = x.to_vec();
    for (l, layer) in layers.iter().enumerate() {
        if let Some(mask) = m.mask(l) {
            apply_mask(&mut a, mask, layer.fan_in);
        }
        let z = affine(&a, layer, batch);
        check_finite(&z, l, "pre-activation")?;
        a = if l + 1 < layers.len() {
            activate(&z, acts[l], width_scale(m, layer.fan_out))
        } else {
            z
        };
    }
    Ok(a)
}

/// Gradients of a scalar objective w.r.t. every layer's weights and biases,
/// given its gradient `d_out` w.r.t. the raw output.
pub(crate) fn backward_layers(
    layers: &[DenseLayer],
    acts: &[Activation],
    cache: &ForwardCache,
    d_out: Vec<f64>,
    m: &Modifiers,
) -> Result<Vec<DenseLayer>> {
    let batch = cache.batch;
    let mut grads: Vec<DenseLayer> = layers.iter().map(|l| DenseLayer::zeros(l.fan_in, l.fan_out)).collect();
    let mut dz = d_out;
    for l in (0..layers.len()).rev() {
        check_finite(&dz, l, "gradient")?;
        let layer = &layers[l];
        let (fi, fo) = (layer.fan_in, layer.fan_out);
        let u = &cache.inputs[l];
        let g = &mut grads[l];
        for (dzr, ur) in dz.chunks_exact(fo).zip(u.chunks_exact(fi)) {
            for (gb, d) in g.biases.iter_mut().zip(dzr) {
                *gb += d;
            }
            for (k, &h) in ur.iter().enumerate() {
                if h != 0.0 {
                    let gk = &mut g.weights[k * fo..(k + 1) * fo];
                    for (gw, d) in gk.iter_mut().zip(dzr) {
                        *gw += h * d;
                    }
                }
            }
        }
        if l == 0 {
            break;
        }
        let mut da = vec![0.0; batch * fi];
        for (dar, dzr) in da.chunks_exact_mut(fi).zip(dz.chunks_exact(fo)) {
            for (k, v) in dar.iter_mut().enumerate() {
                let wk = &layer.weights[k * fo..(k + 1) * fo];
                *v = wk.iter().zip(dzr).map(|(w, d)| w * d).sum();
            }
        }
        if let Some(mask) = m.mask(l) {
            apply_mask(&mut da, mask, fi);
        }
        let scale = width_scale(m, fi);
        let z_prev = &cache.pre[l - 1];
        let act = acts[l - 1];
        for (d, &z) in da.iter_mut().zip(z_prev) {
            *d *= scale * act.derivative(z);
        }
        dz = da;
    }
    Ok(grads)
}

/// Head outputs for a batch, `(batch, output_dim)` each.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    pub mean: Vec<f64>,
    pub sigma: Option<Vec<f64>>,
}

impl HeadOutput {
    pub(crate) fn from_raw(raw: &[f64], head: HeadKind, output_dim: usize) -> Self {
        match head {
            HeadKind::Point => HeadOutput {
                mean: raw.to_vec(),
                sigma: None,
            },
            HeadKind::Gaussian => {
                let mut mean = Vec::with_capacity(raw.len() / 2);
                let mut sigma = Vec::with_capacity(raw.len() / 2);
                for row in raw.chunks_exact(2 * output_dim) {
                    mean.extend_from_slice(&row[..output_dim]);
                    sigma.extend(row[output_dim..].iter().map(|&r| softplus(r) + SIGMA_FLOOR));
                }
                HeadOutput {
                    mean,
                    sigma: Some(sigma),
                }
            }
        }
    }
}

/// Deterministic feedforward network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub spec: NetworkSpec,
    pub layers: Vec<DenseLayer>,
}

impl Network {
    /// Seeded initialization: He-uniform for layers feeding ReLU,
    /// Xavier-uniform otherwise; zero biases.
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = seeded(seed);
        let layers = spec
            .layer_shapes()
            .into_iter()
            .enumerate()
            .map(|(l, (fi, fo))| {
                let act = spec.activations.get(l).copied().unwrap_or(Activation::Identity);
                let limit = match act {
                    Activation::Relu => (6.0 / fi as f64).sqrt(),
                    _ => (6.0 / (fi + fo) as f64).sqrt(),
                };
                let mut layer = DenseLayer::zeros(fi, fo);
                for w in &mut layer.weights {
                    *w = rng.random_range(-limit..limit);
                }
                layer
            })
            .collect();
        Ok(Network { spec, layers })
    }

    pub fn zeros(spec: NetworkSpec) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .layer_shapes()
            .into_iter()
            .map(|(fi, fo)| DenseLayer::zeros(fi, fo))
            .collect();
        Ok(Network { spec, layers })
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        let shapes = self.spec.layer_shapes();
        if shapes.len() != self.layers.len() {
            return Err(Error::Shape {
                context: "layer count",
                expected: shapes.len(),
                got: self.layers.len(),
            });
        }
        for (l, (layer, (fi, fo))) in self.layers.iter().zip(shapes).enumerate() {
            if layer.fan_in != fi || layer.fan_out != fo || !layer.is_consistent() {
                return Err(Error::Shape {
                    context: "layer parameters",
                    expected: fi * fo,
                    got: layer.weights.len(),
                });
            }
            check_finite(&layer.weights, l, "weight")?;
            check_finite(&layer.biases, l, "bias")?;
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(DenseLayer::num_params).sum()
    }

    /// Raw output for a single input vector.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.forward_batch(x, 1)
    }

    pub fn forward_batch(&self, x: &[f64], batch: usize) -> Result<Vec<f64>> {
        check_input(x, batch, self.spec.input_dim)?;
        forward_output(&self.layers, &self.spec.activations, x, batch, &Modifiers::default())
    }

    pub fn forward_cached(&self, x: &[f64], batch: usize) -> Result<ForwardCache> {
        check_input(x, batch, self.spec.input_dim)?;
        forward_layers(&self.layers, &self.spec.activations, x, batch, &Modifiers::default())
    }

    pub fn predict(&self, x: &[f64], batch: usize) -> Result<HeadOutput> {
        let raw = self.forward_batch(x, batch)?;
        Ok(HeadOutput::from_raw(&raw, self.spec.head, self.spec.output_dim))
    }

    /// Data loss plus `l2_penalty(lambda)` and its exact gradient.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        targets: &[f64],
        loss: Loss,
        lambda: f64,
    ) -> Result<(f64, Vec<DenseLayer>)> {
        let (data, d_out) = loss.evaluate(cache.output(), targets, cache.batch, &self.spec)?;
        let mut grads = backward_layers(
            &self.layers,
            &self.spec.activations,
            cache,
            d_out,
            &Modifiers::default(),
        )?;
        if lambda > 0.0 {
            add_l2_gradient(&mut grads, &self.layers, lambda, 1.0);
        }
        Ok((data + l2_penalty(&self.layers, lambda), grads))
    }
}

/// `grads += 2 lambda (weight_scale * W, b)`.
pub(crate) fn add_l2_gradient(grads: &mut [DenseLayer], layers: &[DenseLayer], lambda: f64, weight_scale: f64) {
    for (g, l) in grads.iter_mut().zip(layers) {
        for (gw, w) in g.weights.iter_mut().zip(&l.weights) {
            *gw += 2.0 * lambda * weight_scale * w;
        }
        for (gb, b) in g.biases.iter_mut().zip(&l.biases) {
            *gb += 2.0 * lambda * b;
        }
    }
}

/// Concatenate `(weights, biases)` of every layer.
pub(crate) fn flatten(layers: &[DenseLayer]) -> Vec<f64> {
    let mut out = Vec::with_capacity(layers.iter().map(DenseLayer::num_params).sum());
    for l in layers {
        out.extend_from_slice(&l.weights);
        out.extend_from_slice(&l.biases);
    }
    out
}

pub(crate) fn layer_slices_mut(layers: &mut [DenseLayer]) -> Vec<&mut [f64]> {
    layers
        .iter_mut()
        .flat_map(|l| [l.weights.as_mut_slice(), l.biases.as_mut_slice()])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Network {
        let spec = NetworkSpec::mlp(1, &[1], Activation::Relu, 1, HeadKind::Point);
        let mut net = Network::zeros(spec).unwrap();
        net.layers[0].weights = vec![2.0];
        net.layers[0].biases = vec![-1.0];
        net.layers[1].weights = vec![3.0];
        net.layers[1].biases = vec![0.5];
        net
    }

    #[test]
    fn hand_evaluated_chain() {
        // relu(2*1 - 1) = 1 -> 3*1 + 0.5
        assert_eq!(tiny().forward(&[1.0]).unwrap(), vec![3.5]);
    }

    #[test]
    fn zero_network_outputs_zero() {
        let spec = NetworkSpec::mlp(3, &[5], Activation::Relu, 2, HeadKind::Point);
        let net = Network::zeros(spec).unwrap();
        assert_eq!(net.forward(&[1.0, -2.0, 7.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn tanh_at_origin_returns_output_bias() {
        let spec = NetworkSpec::mlp(2, &[4, 3], Activation::Tanh, 2, HeadKind::Point);
        let mut net = Network::new(spec, 5).unwrap();
        for l in &mut net.layers {
            l.biases.iter_mut().for_each(|b| *b = 0.0);
        }
        net.layers[2].biases = vec![0.25, -1.5];
        assert_eq!(net.forward(&[0.0, 0.0]).unwrap(), vec![0.25, -1.5]);
    }

    #[test]
    fn dimension_mismatch_is_shape_error() {
        assert!(matches!(tiny().forward(&[1.0, 2.0]), Err(Error::Shape { .. })));
    }

    #[test]
    fn zero_residual_gives_zero_gradient() {
        let net = Network::new(NetworkSpec::mlp(2, &[6, 4], Activation::Tanh, 1, HeadKind::Point), 3).unwrap();
        let x = [0.3, -0.2, 1.1, 0.4];
        let cache = net.forward_cached(&x, 2).unwrap();
        let y = cache.output().to_vec();
        let (loss, grads) = net.backward(&cache, &y, Loss::Mse, 0.0).unwrap();
        assert_eq!(loss, 0.0);
        assert!(flatten(&grads).iter().all(|g| *g == 0.0));
    }

    #[test]
    fn penalty_gradient_at_zero_residual() {
        let net = Network::new(NetworkSpec::mlp(2, &[6, 4], Activation::Relu, 1, HeadKind::Point), 3).unwrap();
        let x = [0.3, -0.2];
        let cache = net.forward_cached(&x, 1).unwrap();
        let y = cache.output().to_vec();
        let lambda = 0.07;
        let (_, grads) = net.backward(&cache, &y, Loss::Mse, lambda).unwrap();
        for (g, l) in grads.iter().zip(&net.layers) {
            for (gw, w) in g.weights.iter().zip(&l.weights) {
                assert_eq!(*gw, 2.0 * lambda * w);
            }
        }
    }

    #[test]
    fn non_finite_parameters_reported_with_layer() {
        let mut net = tiny();
        net.layers[1].weights[0] = f64::INFINITY;
        match net.forward(&[1.0]) {
            Err(Error::Numeric { layer, .. }) => assert_eq!(layer, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn gaussian_head_sigma_positive() {
        let spec = NetworkSpec::mlp(2, &[4], Activation::Relu, 1, HeadKind::Gaussian);
        let net = Network::new(spec, 1).unwrap();
        let out = net.predict(&[0.1, 0.2, -3.0, 4.0], 2).unwrap();
        assert_eq!(out.mean.len(), 2);
        assert!(out.sigma.unwrap().iter().all(|s| *s > 0.0));
    }
}
