//! Dense multilayer perceptrons with hand-written backpropagation.
//!
//! Parameters are addressed in a fixed flat order used by
//! [`Mlp::per_sample_jacobian`], [`Mlp::flat_params`] and
//! [`Gradients::to_flat`]: layer by layer from the input side, and within a
//! layer the weight matrix (`out_dim x in_dim`) in row-major order followed by
//! the bias vector.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
    Sigmoid,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    #[inline]
    pub fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => a * (1.0 - a),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self {
            in_dim,
            out_dim,
            activation,
        }
    }

    pub fn param_count(&self) -> usize {
        self.out_dim * self.in_dim + self.out_dim
    }
}

/// Builds the layer list for a `dims[0] -> dims[1] -> ... -> dims[n]` chain with
/// `hidden` on every inner layer and `output` on the last.
pub fn chain(dims: &[usize], hidden: Activation, output: Activation) -> Vec<LayerSpec> {
    let n = dims.len().saturating_sub(1);
    (0..n)
        .map(|i| {
            let act = if i + 1 == n { output } else { hidden };
            LayerSpec::new(dims[i], dims[i + 1], act)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `out_dim x in_dim`.
    pub weight: Matrix,
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

    pub fn spec(&self) -> LayerSpec {
        LayerSpec::new(self.in_dim(), self.out_dim(), self.activation)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<Layer>,
    #[serde(skip)]
    version: u64,
}

impl PartialEq for Mlp {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

/// Activations recorded by [`Mlp::forward`] for a later backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    /// Input to each layer (`inputs[0]` is the network input).
    inputs: Vec<Matrix>,
    pre: Vec<Matrix>,
    post: Vec<Matrix>,
    version: u64,
}

impl ForwardCache {
    pub fn output(&self) -> &Matrix {
        self.post.last().unwrap_or(&self.inputs[0])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrads {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

/// Parameter gradients aligned with the layers of an [`Mlp`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrads>,
}

impl Gradients {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrads {
                    weight: Matrix::zeros(l.out_dim(), l.in_dim()),
                    bias: vec![0.0; l.out_dim()],
                })
                .collect(),
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    /// Inverse of [`Gradients::to_flat`] using `net`'s layer shapes.
    pub fn from_flat(net: &Mlp, flat: &[f64]) -> Result<Self> {
        if flat.len() != net.param_count() {
            return Err(Error::shape(
                "Gradients::from_flat",
                net.param_count(),
                flat.len(),
            ));
        }
        let mut offset = 0;
        let mut layers = Vec::with_capacity(net.layers.len());
        for l in &net.layers {
            let w = l.out_dim() * l.in_dim();
            let weight = Matrix::new(
                l.out_dim(),
                l.in_dim(),
                flat[offset..offset + w].to_vec(),
            )?;
            offset += w;
            let bias = flat[offset..offset + l.out_dim()].to_vec();
            offset += l.out_dim();
            layers.push(LayerGrads { weight, bias });
        }
        Ok(Self { layers })
    }

    pub fn scale(&mut self, k: f64) {
        for l in &mut self.layers {
            l.weight.as_mut_slice().iter_mut().for_each(|v| *v *= k);
            l.bias.iter_mut().for_each(|v| *v *= k);
        }
    }

    /// `self += k * other`.
    pub fn add_scaled(&mut self, other: &Gradients, k: f64) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::shape(
                "Gradients::add_scaled",
                self.layers.len(),
                other.layers.len(),
            ));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.ensure_same_shape("Gradients::add_scaled", &b.weight)?;
            for (x, y) in a.weight.as_mut_slice().iter_mut().zip(b.weight.as_slice()) {
                *x += k * y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += k * y;
            }
        }
        Ok(())
    }

    pub fn max_abs(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.bias.iter().fold(l.weight.max_abs(), |m, v| m.max(v.abs())))
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.all_finite() && l.bias.iter().all(|v| v.is_finite()))
    }
}

impl Mlp {
    /// Glorot-uniform weights in `±sqrt(6 / (in + out))`, zero biases.
    pub fn new<R: Rng + ?Sized>(specs: &[LayerSpec], rng: &mut R) -> Result<Self> {
        validate_specs(specs)?;
        let layers = specs
            .iter()
            .map(|s| {
                let limit = (6.0 / (s.in_dim + s.out_dim) as f64).sqrt();
                let data = (0..s.in_dim * s.out_dim)
                    .map(|_| rng.gen_range(-limit..=limit))
                    .collect();
                Layer {
                    weight: Matrix::new(s.out_dim, s.in_dim, data).expect("sized above"),
                    bias: vec![0.0; s.out_dim],
                    activation: s.activation,
                }
            })
            .collect();
        Ok(Self { layers, version: 0 })
    }

    /// All-zero parameters.
    pub fn zeros(specs: &[LayerSpec]) -> Result<Self> {
        validate_specs(specs)?;
        let layers = specs
            .iter()
            .map(|s| Layer {
                weight: Matrix::zeros(s.out_dim, s.in_dim),
                bias: vec![0.0; s.out_dim],
                activation: s.activation,
            })
            .collect();
        Ok(Self { layers, version: 0 })
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.out_dim() {
                return Err(Error::shape("Mlp::from_layers", l.out_dim(), l.bias.len()));
            }
            if l.in_dim() == 0 || l.out_dim() == 0 {
                return Err(Error::InvalidArgument(format!("layer {i} has a zero dimension")));
            }
        }
        validate_specs(&layers.iter().map(Layer::spec).collect::<Vec<_>>())?;
        Ok(Self { layers, version: 0 })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(Layer::spec).collect()
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.spec().param_count()).sum()
    }

    /// Bumped on every parameter mutation; used to detect stale caches.
    pub fn version(&self) -> u64 {
        self.version
    }

    /// Mutable access to the layers. Invalidates outstanding caches.
    pub fn layers_mut(&mut self) -> &mut [Layer] {
        self.version += 1;
        &mut self.layers
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::shape("set_flat_params", self.param_count(), flat.len()));
        }
        let mut offset = 0;
        for l in &mut self.layers {
            let w = l.weight.len();
            l.weight
                .as_mut_slice()
                .copy_from_slice(&flat[offset..offset + w]);
            offset += w;
            let b = l.bias.len();
            l.bias.copy_from_slice(&flat[offset..offset + b]);
            offset += b;
        }
        self.version += 1;
        Ok(())
    }

    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, ForwardCache)> {
        if x.cols() != self.in_dim() {
            return Err(Error::shape("Mlp::forward", self.in_dim(), x.cols()));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post = Vec::with_capacity(self.layers.len());
        let mut current = x.clone();
        for l in &self.layers {
            let mut z = current.matmul_t(&l.weight)?;
            z.add_row_broadcast(&l.bias)?;
            let a = z.map(|v| l.activation.apply(v));
            inputs.push(std::mem::replace(&mut current, a.clone()));
            pre.push(z);
            post.push(a);
        }
        let cache = ForwardCache {
            inputs,
            pre,
            post,
            version: self.version,
        };
        Ok((current, cache))
    }

    /// Forward pass without keeping intermediates.
    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.in_dim() {
            return Err(Error::shape("Mlp::predict", self.in_dim(), x.cols()));
        }
        let mut current = x.clone();
        for l in &self.layers {
            let mut z = current.matmul_t(&l.weight)?;
            z.add_row_broadcast(&l.bias)?;
            let act = l.activation;
            z.as_mut_slice().iter_mut().for_each(|v| *v = act.apply(*v));
            current = z;
        }
        Ok(current)
    }

    /// Backpropagates `upstream` (gradient of the loss with respect to the
    /// output). Parameter gradients are summed over rows, so an upstream that
    /// already carries the `1/N` of a mean loss yields mean gradients.
    pub fn backward(&self, cache: &ForwardCache, upstream: &Matrix) -> Result<(Gradients, Matrix)> {
        let (grads, dx) = self.backward_inner(cache, upstream, true)?;
        Ok((grads, dx.expect("input gradient requested")))
    }

    /// Parameter gradients only; skips the gradient with respect to the input.
    pub fn param_gradients(&self, cache: &ForwardCache, upstream: &Matrix) -> Result<Gradients> {
        Ok(self.backward_inner(cache, upstream, false)?.0)
    }

    fn backward_inner(
        &self,
        cache: &ForwardCache,
        upstream: &Matrix,
        want_input_grad: bool,
    ) -> Result<(Gradients, Option<Matrix>)> {
        if cache.version != self.version || cache.pre.len() != self.layers.len() {
            return Err(Error::StaleCache {
                net: self.version,
                cache: cache.version,
            });
        }
        let out = cache.output();
        upstream.ensure_same_shape("Mlp::backward", out)?;

        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta_out = upstream.clone();
        for (i, l) in self.layers.iter().enumerate().rev() {
            let act = l.activation;
            delta_out.ensure_same_shape("Mlp::backward", &cache.pre[i])?;
            let mut delta = delta_out;
            for ((d, &z), &a) in delta
                .as_mut_slice()
                .iter_mut()
                .zip(cache.pre[i].as_slice())
                .zip(cache.post[i].as_slice())
            {
                *d *= act.derivative(z, a);
            }
            let weight = delta.t_matmul(&cache.inputs[i])?;
            let bias = delta.column_sums();
            grads.push(LayerGrads { weight, bias });
            if i == 0 && !want_input_grad {
                grads.reverse();
                return Ok((Gradients { layers: grads }, None));
            }
            delta_out = delta.matmul(&l.weight)?;
        }
        grads.reverse();
        Ok((Gradients { layers: grads }, Some(delta_out)))
    }

    /// Jacobian of the output of a single sample with respect to every
    /// parameter, `out_dim x param_count`, in the module's flat order.
    pub fn per_sample_jacobian(&self, x: &[f64]) -> Result<Matrix> {
        let xm = Matrix::row_vector(x);
        let (_, cache) = self.forward(&xm)?;
        let out_dim = self.out_dim();
        let k = self.param_count();

        // deltas[l] is out_dim x units(l): d output_j / d pre-activation of layer l
        let n_layers = self.layers.len();
        let mut deltas: Vec<Matrix> = Vec::with_capacity(n_layers);
        let last = &self.layers[n_layers - 1];
        let mut d = Matrix::zeros(out_dim, out_dim);
        for j in 0..out_dim {
            let z = cache.pre[n_layers - 1].get(0, j);
            let a = cache.post[n_layers - 1].get(0, j);
            d.set(j, j, last.activation.derivative(z, a));
        }
        deltas.push(d);
        for l in (0..n_layers - 1).rev() {
            let next = deltas.last().expect("seeded above");
            let mut d = next.matmul(&self.layers[l + 1].weight)?;
            let act = self.layers[l].activation;
            let units = self.layers[l].out_dim();
            for j in 0..out_dim {
                let row = d.row_mut(j);
                for u in 0..units {
                    row[u] *= act.derivative(cache.pre[l].get(0, u), cache.post[l].get(0, u));
                }
            }
            deltas.push(d);
        }
        deltas.reverse();

        let mut jac = Matrix::zeros(out_dim, k);
        for j in 0..out_dim {
            let row = jac.row_mut(j);
            let mut offset = 0;
            for (l, layer) in self.layers.iter().enumerate() {
                let input = cache.inputs[l].row(0);
                let dl = deltas[l].row(j);
                let in_dim = layer.in_dim();
                for (r, &dv) in dl.iter().enumerate() {
                    if dv != 0.0 {
                        let dst = &mut row[offset + r * in_dim..offset + (r + 1) * in_dim];
                        for (o, &xi) in dst.iter_mut().zip(input) {
                            *o = dv * xi;
                        }
                    }
                }
                offset += layer.weight.len();
                row[offset..offset + layer.out_dim()].copy_from_slice(dl);
                offset += layer.out_dim();
            }
        }
        Ok(jac)
    }

    /// In-place `theta <- theta - lr * g` for every parameter.
    pub fn sgd_step(&mut self, grads: &Gradients, lr: f64) -> Result<()> {
        if grads.layers.len() != self.layers.len() {
            return Err(Error::shape("sgd_step", self.layers.len(), grads.layers.len()));
        }
        for (l, g) in self.layers.iter().zip(&grads.layers) {
            l.weight.ensure_same_shape("sgd_step", &g.weight)?;
            if g.bias.len() != l.bias.len() {
                return Err(Error::shape("sgd_step", l.bias.len(), g.bias.len()));
            }
        }
        for (l, g) in self.layers.iter_mut().zip(&grads.layers) {
            for (w, d) in l.weight.as_mut_slice().iter_mut().zip(g.weight.as_slice()) {
                *w -= lr * d;
            }
            for (b, d) in l.bias.iter_mut().zip(&g.bias) {
                *b -= lr * d;
            }
        }
        self.version += 1;
        Ok(())
    }
}

fn validate_specs(specs: &[LayerSpec]) -> Result<()> {
    if specs.is_empty() {
        return Err(Error::InvalidArgument("network needs at least one layer".into()));
    }
    for (i, s) in specs.iter().enumerate() {
        if s.in_dim == 0 || s.out_dim == 0 {
            return Err(Error::InvalidArgument(format!("layer {i} has a zero dimension")));
        }
    }
    for (i, w) in specs.windows(2).enumerate() {
        if w[0].out_dim != w[1].in_dim {
            return Err(Error::shape(
                "layer chain",
                format!("layer {} in_dim {}", i + 1, w[0].out_dim),
                w[1].in_dim,
            ));
        }
    }
    Ok(())
}

/// A differentiable scalar loss of a network output.
pub trait ScalarLoss {
    fn value(&self, output: &Matrix) -> f64;
    fn gradient(&self, output: &Matrix) -> Matrix;
}

/// `(1/N) * sum_i ||out_i - target_i||^2`.
pub struct MeanSquaredError<'a> {
    pub target: &'a Matrix,
}

impl ScalarLoss for MeanSquaredError<'_> {
    fn value(&self, output: &Matrix) -> f64 {
        crate::matrix::mean_row_sq_dist(output, self.target, "MeanSquaredError")
            .expect("output and target shapes agree")
    }

    fn gradient(&self, output: &Matrix) -> Matrix {
        let n = output.rows().max(1) as f64;
        output
            .zip_map(self.target, |o, t| 2.0 * (o - t) / n)
            .expect("output and target shapes agree")
    }
}

/// Central-difference step used by [`finite_diff_check`].
pub const FD_STEP: f64 = 1e-5;

/// Compares backprop gradients with central differences over every parameter.
/// Returns `max |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`;
/// entries where both sides are below `1e-8` in magnitude count as zero error.
pub fn finite_diff_check(net: &Mlp, x: &Matrix, loss: &dyn ScalarLoss) -> Result<f64> {
    let (out, cache) = net.forward(x)?;
    let (grads, _) = net.backward(&cache, &loss.gradient(&out))?;
    let analytic = grads.to_flat();

    let base = net.flat_params();
    let mut probe = net.clone();
    let mut worst: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let mut p = base.clone();
        p[i] = base[i] + FD_STEP;
        probe.set_flat_params(&p)?;
        let plus = loss.value(&probe.predict(x)?);
        p[i] = base[i] - FD_STEP;
        probe.set_flat_params(&p)?;
        let minus = loss.value(&probe.predict(x)?);
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        let scale = a.abs().max(numeric.abs());
        if scale < 1e-8 {
            continue;
        }
        worst = worst.max((a - numeric).abs() / scale);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_input(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut r = rng(seed);
        let data = (0..rows * cols).map(|_| r.gen_range(-1.0..1.0)).collect();
        Matrix::new(rows, cols, data).unwrap()
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let net = Mlp::from_layers(vec![Layer {
            weight: Matrix::identity(3),
            bias: vec![0.0; 3],
            activation: Activation::Identity,
        }])
        .unwrap();
        let x = random_input(4, 3, 1);
        assert_eq!(net.forward(&x).unwrap().0, x);
    }

    #[test]
    fn scalar_affine_layer() {
        let net = Mlp::from_layers(vec![Layer {
            weight: Matrix::new(1, 1, vec![2.0]).unwrap(),
            bias: vec![1.0],
            activation: Activation::Identity,
        }])
        .unwrap();
        let x = Matrix::new(1, 1, vec![3.0]).unwrap();
        assert_eq!(net.forward(&x).unwrap().0.as_slice(), &[7.0]);
    }

    #[test]
    fn two_layer_tanh_output_shape() {
        let specs = chain(&[3, 5, 2], Activation::Tanh, Activation::Tanh);
        let net = Mlp::new(&specs, &mut rng(7)).unwrap();
        let (out, _) = net.forward(&random_input(4, 3, 2)).unwrap();
        assert_eq!(out.shape(), (4, 2));
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let net = Mlp::new(&chain(&[3, 2], Activation::Tanh, Activation::Identity), &mut rng(1)).unwrap();
        assert!(matches!(
            net.forward(&Matrix::zeros(1, 4)),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn param_count_matches_layers() {
        let specs = chain(&[200, 40, 40, 40, 200], Activation::Tanh, Activation::Identity);
        let net = Mlp::zeros(&specs).unwrap();
        assert_eq!(net.param_count(), 200 * 40 + 40 + 2 * (40 * 40 + 40) + 40 * 200 + 200);
        assert_eq!(net.flat_params().len(), net.param_count());
    }

    #[test]
    fn incompatible_chain_rejected() {
        let specs = [
            LayerSpec::new(3, 4, Activation::Tanh),
            LayerSpec::new(5, 2, Activation::Identity),
        ];
        assert!(Mlp::zeros(&specs).is_err());
        assert!(Mlp::zeros(&[LayerSpec::new(0, 2, Activation::Tanh)]).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let net = Mlp::new(&chain(&[3, 4, 2], Activation::Tanh, Activation::Sigmoid), &mut rng(3)).unwrap();
        let x = random_input(5, 3, 4);
        let (out, cache) = net.forward(&x).unwrap();
        let (g, dx) = net.backward(&cache, &Matrix::zeros(out.rows(), out.cols())).unwrap();
        assert_eq!(g.max_abs(), 0.0);
        assert_eq!(dx.max_abs(), 0.0);
    }

    #[test]
    fn linear_layer_closed_form_gradient() {
        // L = 1/2 ||Wx - y||^2 -> dL/dW = (Wx - y) x^T, dL/db = Wx - y
        let mut r = rng(11);
        let net = Mlp::new(&[LayerSpec::new(3, 2, Activation::Identity)], &mut r).unwrap();
        let x = Matrix::new(1, 3, vec![0.5, -1.0, 2.0]).unwrap();
        let y = [0.3, -0.7];
        let (out, cache) = net.forward(&x).unwrap();
        let resid: Vec<f64> = out.row(0).iter().zip(y).map(|(o, t)| o - t).collect();
        let (g, _) = net.backward(&cache, &Matrix::row_vector(&resid)).unwrap();
        for (i, ri) in resid.iter().enumerate() {
            for (j, xj) in x.row(0).iter().enumerate() {
                assert!((g.layers[0].weight.get(i, j) - ri * xj).abs() < 1e-14);
            }
            assert!((g.layers[0].bias[i] - ri).abs() < 1e-14);
        }
    }

    #[test]
    fn stale_cache_rejected() {
        let mut net = Mlp::new(&chain(&[2, 2], Activation::Tanh, Activation::Identity), &mut rng(5)).unwrap();
        let x = random_input(2, 2, 6);
        let (out, cache) = net.forward(&x).unwrap();
        let grads = Gradients::zeros_like(&net);
        net.sgd_step(&grads, 0.1).unwrap();
        assert!(matches!(
            net.backward(&cache, &out),
            Err(Error::StaleCache { .. })
        ));
    }

    #[test]
    fn jacobian_of_affine_layer_is_kronecker_form() {
        let net = Mlp::new(&[LayerSpec::new(3, 2, Activation::Identity)], &mut rng(9)).unwrap();
        let x = [0.2, -0.4, 1.5];
        let jac = net.per_sample_jacobian(&x).unwrap();
        assert_eq!(jac.shape(), (2, 8));
        for j in 0..2 {
            let mut expected = vec![0.0; 8];
            for c in 0..3 {
                expected[j * 3 + c] = x[c];
            }
            expected[6 + j] = 1.0;
            assert_eq!(jac.row(j), expected.as_slice());
        }
    }

    #[test]
    fn jacobian_matches_backward_for_scalar_output() {
        let net = Mlp::new(&chain(&[4, 6, 1], Activation::Tanh, Activation::Sigmoid), &mut rng(13)).unwrap();
        let x = [0.3, -0.2, 0.9, -1.1];
        let jac = net.per_sample_jacobian(&x).unwrap();
        let (_, cache) = net.forward(&Matrix::row_vector(&x)).unwrap();
        let (g, _) = net.backward(&cache, &Matrix::row_vector(&[1.0])).unwrap();
        let flat = g.to_flat();
        for (a, b) in jac.row(0).iter().zip(&flat) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn jacobian_rows_match_finite_differences() {
        let net = Mlp::new(&chain(&[3, 5, 2], Activation::Tanh, Activation::Tanh), &mut rng(17)).unwrap();
        let x = [0.4, -0.8, 0.1];
        let xm = Matrix::row_vector(&x);
        let jac = net.per_sample_jacobian(&x).unwrap();
        let base = net.flat_params();
        let mut probe = net.clone();
        for k in 0..net.param_count() {
            let mut p = base.clone();
            p[k] += FD_STEP;
            probe.set_flat_params(&p).unwrap();
            let plus = probe.predict(&xm).unwrap();
            p[k] -= 2.0 * FD_STEP;
            probe.set_flat_params(&p).unwrap();
            let minus = probe.predict(&xm).unwrap();
            for j in 0..2 {
                let numeric = (plus.get(0, j) - minus.get(0, j)) / (2.0 * FD_STEP);
                assert!((jac.get(j, k) - numeric).abs() < 1e-8, "param {k} out {j}");
            }
        }
    }

    #[test]
    fn stacked_jacobians_reproduce_batch_gradient() {
        let net = Mlp::new(&chain(&[3, 4, 4, 2], Activation::Tanh, Activation::Identity), &mut rng(19)).unwrap();
        let x = random_input(5, 3, 20);
        let target = random_input(5, 2, 21);
        let loss = MeanSquaredError { target: &target };
        let (out, cache) = net.forward(&x).unwrap();
        let up = loss.gradient(&out);
        let (g, _) = net.backward(&cache, &up).unwrap();
        let mut acc = vec![0.0; net.param_count()];
        for i in 0..x.rows() {
            let jac = net.per_sample_jacobian(x.row(i)).unwrap();
            for j in 0..2 {
                for (a, v) in acc.iter_mut().zip(jac.row(j)) {
                    *a += up.get(i, j) * v;
                }
            }
        }
        for (a, b) in acc.iter().zip(g.to_flat()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn sgd_step_arithmetic() {
        let mut net = Mlp::from_layers(vec![Layer {
            weight: Matrix::new(1, 1, vec![1.0]).unwrap(),
            bias: vec![0.0],
            activation: Activation::Identity,
        }])
        .unwrap();
        let g = Gradients {
            layers: vec![LayerGrads {
                weight: Matrix::new(1, 1, vec![0.5]).unwrap(),
                bias: vec![0.0],
            }],
        };
        net.sgd_step(&g, 0.1).unwrap();
        assert!((net.layers()[0].weight.get(0, 0) - 0.95).abs() < 1e-15);
    }

    #[test]
    fn sgd_zero_lr_is_noop_and_steps_are_linear() {
        let specs = chain(&[3, 4, 2], Activation::Relu, Activation::Identity);
        let mut net = Mlp::new(&specs, &mut rng(23)).unwrap();
        let before = net.clone();
        let mut r = rng(24);
        let flat: Vec<f64> = (0..net.param_count()).map(|_| r.gen_range(-1.0..1.0)).collect();
        let g = Gradients::from_flat(&net, &flat).unwrap();
        net.sgd_step(&g, 0.0).unwrap();
        assert_eq!(net, before);

        let mut twice = before.clone();
        twice.sgd_step(&g, 0.25).unwrap();
        twice.sgd_step(&g, 0.25).unwrap();
        let mut doubled = g.clone();
        doubled.scale(2.0);
        let mut once = before.clone();
        once.sgd_step(&doubled, 0.25).unwrap();
        for (a, b) in twice.flat_params().iter().zip(once.flat_params()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn finite_difference_on_linear_quadratic_is_tight() {
        let net = Mlp::new(&[LayerSpec::new(4, 3, Activation::Identity)], &mut rng(29)).unwrap();
        let x = random_input(6, 4, 30);
        let t = random_input(6, 3, 31);
        let err = finite_diff_check(&net, &x, &MeanSquaredError { target: &t }).unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn finite_difference_on_tanh_net() {
        let net = Mlp::new(&chain(&[4, 8, 3], Activation::Tanh, Activation::Tanh), &mut rng(37)).unwrap();
        let x = random_input(6, 4, 38);
        let t = random_input(6, 3, 39);
        let err = finite_diff_check(&net, &x, &MeanSquaredError { target: &t }).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn finite_difference_all_zero_case_reports_zero() {
        let net = Mlp::zeros(&chain(&[3, 3, 2], Activation::Tanh, Activation::Identity)).unwrap();
        let x = Matrix::zeros(2, 3);
        let t = Matrix::zeros(2, 2);
        let err = finite_diff_check(&net, &x, &MeanSquaredError { target: &t }).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn flat_params_roundtrip() {
        let mut net = Mlp::new(&chain(&[2, 3, 1], Activation::Tanh, Activation::Identity), &mut rng(41)).unwrap();
        let p: Vec<f64> = (0..net.param_count()).map(|i| i as f64).collect();
        net.set_flat_params(&p).unwrap();
        assert_eq!(net.flat_params(), p);
        assert_eq!(net.layers()[0].weight.row(1), &[2.0, 3.0]);
        assert_eq!(net.layers()[0].bias, vec![6.0, 7.0, 8.0]);
    }
}
