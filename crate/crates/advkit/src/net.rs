//! Dense feed-forward networks with exact forward passes and exact
//! gradients with respect to both inputs and parameters.
//!
//! Layers are affine maps followed by ReLU or the identity; the final layer
//! is always identity so the network emits raw logits. Gradients are
//! computed by backward chaining of layer transposes and ReLU masks, with
//! the ReLU derivative taken as 0 at exactly 0.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{argmax, Tensor};

/// A labelled training or evaluation sample.
pub type Sample = (Tensor, usize);

/// Elementwise activation applied after a layer's affine map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    ReLU,
    Identity,
}

/// A dense layer `act(Wx + b)` with row-major weights of shape
/// (out_dim, in_dim).
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    in_dim: usize,
    out_dim: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
    activation: Activation,
}

impl DenseLayer {
    pub fn new(
        in_dim: usize,
        out_dim: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
        activation: Activation,
    ) -> Result<Self> {
        if weights.len() != in_dim * out_dim {
            return Err(Error::ShapeMismatch {
                shape: vec![out_dim, in_dim],
                expected: in_dim * out_dim,
                actual: weights.len(),
            });
        }
        if bias.len() != out_dim {
            return Err(Error::ShapeMismatch {
                shape: vec![out_dim],
                expected: out_dim,
                actual: bias.len(),
            });
        }
        if let Some(index) = weights.iter().chain(&bias).position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self {
            in_dim,
            out_dim,
            weights,
            bias,
            activation,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    fn affine(&self, input: &[f64]) -> Vec<f64> {
        let mut out = self.bias.clone();
        for (i, o) in out.iter_mut().enumerate() {
            let row = &self.weights[i * self.in_dim..(i + 1) * self.in_dim];
            for (w, x) in row.iter().zip(input) {
                *o += w * x;
            }
        }
        out
    }
}

/// A stack of dense layers. Adjacent dimensions chain, and the final layer
/// is identity so its output is the logit vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<DenseLayer>,
}

impl Network {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Precondition("network needs at least one layer".into()));
        }
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::DimensionMismatch {
                    layer: k + 1,
                    expected: pair[0].out_dim,
                    actual: pair[1].in_dim,
                });
            }
        }
        let last = layers.last().unwrap();
        if last.activation != Activation::Identity {
            return Err(Error::Precondition(
                "final layer must use the identity activation".into(),
            ));
        }
        Ok(Self { layers })
    }

    /// Fresh network with the given dimensions (`dims[0]` is the input
    /// dimension) and seeded uniform init in [-1/sqrt(in_dim), 1/sqrt(in_dim)].
    /// Hidden layers use ReLU, the final layer identity.
    pub fn random(dims: &[usize], seed: u64) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Precondition("need at least input and output dims".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for k in 0..dims.len() - 1 {
            let (in_dim, out_dim) = (dims[k], dims[k + 1]);
            let bound = 1.0 / (in_dim as f64).sqrt();
            let weights: Vec<f64> = (0..in_dim * out_dim)
                .map(|_| rng.random_range(-bound..=bound))
                .collect();
            let bias: Vec<f64> = (0..out_dim)
                .map(|_| rng.random_range(-bound..=bound))
                .collect();
            let activation = if k + 1 == dims.len() - 1 {
                Activation::Identity
            } else {
                Activation::ReLU
            };
            layers.push(DenseLayer::new(in_dim, out_dim, weights, bias, activation)?);
        }
        Self::new(layers)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    /// Parameters flattened layer by layer, weights (row-major) before bias.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            out.extend_from_slice(&layer.weights);
            out.extend_from_slice(&layer.bias);
        }
        out
    }

    /// Overwrites all parameters from a flat vector in `params_flat` order.
    pub fn set_params_flat(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::ShapeMismatch {
                shape: vec![self.param_count()],
                expected: self.param_count(),
                actual: params.len(),
            });
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            let nw = layer.weights.len();
            layer.weights.copy_from_slice(&params[offset..offset + nw]);
            offset += nw;
            let nb = layer.bias.len();
            layer.bias.copy_from_slice(&params[offset..offset + nb]);
            offset += nb;
        }
        Ok(())
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape() != [self.input_dim()] {
            return Err(Error::DimensionMismatch {
                layer: 0,
                expected: self.input_dim(),
                actual: x.len(),
            });
        }
        Ok(())
    }

    fn forward_slice(&self, x: &[f64]) -> ForwardTrace {
        let mut preactivations = Vec::with_capacity(self.layers.len());
        let mut activations = Vec::with_capacity(self.layers.len());
        let mut current = x.to_vec();
        for layer in &self.layers {
            let pre = layer.affine(&current);
            let act = match layer.activation {
                Activation::ReLU => pre.iter().map(|v| v.max(0.0)).collect(),
                Activation::Identity => pre.clone(),
            };
            preactivations.push(pre);
            current = act.clone();
            activations.push(act);
        }
        ForwardTrace {
            logits: current,
            preactivations,
            activations,
        }
    }

    /// Backward pass seeded with dL/dlogits. Returns the input gradient and,
    /// when requested, the flat parameter gradient in `params_flat` order.
    fn backprop(
        &self,
        x: &[f64],
        trace: &ForwardTrace,
        dlogits: &[f64],
        want_params: bool,
    ) -> (Vec<f64>, Option<Vec<f64>>) {
        let mut param_grad = if want_params {
            Some(vec![0.0; self.param_count()])
        } else {
            None
        };
        // Parameter offsets per layer, laid out as in `params_flat`.
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut off = 0;
        for layer in &self.layers {
            offsets.push(off);
            off += layer.weights.len() + layer.bias.len();
        }

        let mut delta = dlogits.to_vec();
        for (k, layer) in self.layers.iter().enumerate().rev() {
            // dL/dz_k: apply the activation derivative (ReLU mask uses a
            // strict inequality, so the gradient at exactly 0 is 0).
            if layer.activation == Activation::ReLU {
                for (d, z) in delta.iter_mut().zip(&trace.preactivations[k]) {
                    if *z <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let input: &[f64] = if k == 0 {
                x
            } else {
                &trace.activations[k - 1]
            };
            if let Some(pg) = param_grad.as_mut() {
                let base = offsets[k];
                for (i, d) in delta.iter().enumerate() {
                    let row = &mut pg[base + i * layer.in_dim..base + (i + 1) * layer.in_dim];
                    for (g, a) in row.iter_mut().zip(input) {
                        *g += d * a;
                    }
                }
                let bias_base = base + layer.weights.len();
                for (i, d) in delta.iter().enumerate() {
                    pg[bias_base + i] += d;
                }
            }
            // dL/da_{k-1} = W_k^T dL/dz_k
            let mut prev = vec![0.0; layer.in_dim];
            for (i, d) in delta.iter().enumerate() {
                let row = &layer.weights[i * layer.in_dim..(i + 1) * layer.in_dim];
                for (p, w) in prev.iter_mut().zip(row) {
                    *p += w * d;
                }
            }
            delta = prev;
        }
        (delta, param_grad)
    }

    /// Gradient of `dot(seed, logits(x))` with respect to x, for an
    /// arbitrary logit-space seed vector.
    pub fn input_vjp_slice(&self, x: &[f64], seed: &[f64]) -> Vec<f64> {
        let trace = self.forward_slice(x);
        self.backprop(x, &trace, seed, false).0
    }

    /// Activations of the penultimate layer (the feature representation fed
    /// into the final affine map). For single-layer networks this is the
    /// input itself.
    pub fn penultimate_features(&self, x: &Tensor) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let trace = self.forward_slice(x.data());
        let n = self.layers.len();
        if n == 1 {
            Ok(x.data().to_vec())
        } else {
            Ok(trace.activations[n - 2].clone())
        }
    }

    /// Gradient of `dot(seed, penultimate_features(x))` with respect to x.
    pub fn penultimate_vjp(&self, x: &Tensor, seed: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let n = self.layers.len();
        if n == 1 {
            return Ok(seed.to_vec());
        }
        let trace = self.forward_slice(x.data());
        // Backprop through layers 0..n-1 only.
        let head = Network {
            layers: self.layers[..n - 1].to_vec(),
        };
        let head_trace = ForwardTrace {
            preactivations: trace.preactivations[..n - 1].to_vec(),
            activations: trace.activations[..n - 1].to_vec(),
            logits: trace.activations[n - 2].clone(),
        };
        Ok(head.backprop(x.data(), &head_trace, seed, false).0)
    }
}

/// Per-layer intermediate values from a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// Pre-activation vectors z_k = W_k a_{k-1} + b_k, one per layer.
    pub preactivations: Vec<Vec<f64>>,
    /// Post-activation vectors a_k, one per layer.
    pub activations: Vec<Vec<f64>>,
    /// The final activation vector (the logits).
    pub logits: Vec<f64>,
}

/// Runs the network on `x`, recording all intermediate values.
pub fn forward(net: &Network, x: &Tensor) -> Result<ForwardTrace> {
    net.check_input(x)?;
    Ok(net.forward_slice(x.data()))
}

/// Binary activity mask of one layer: entry i is 1 iff the pre-activation
/// is strictly positive.
pub fn relu_mask(trace: &ForwardTrace, layer: usize) -> Result<Vec<u8>> {
    let pre = trace
        .preactivations
        .get(layer)
        .ok_or(Error::IndexOutOfRange {
            index: layer,
            len: trace.preactivations.len(),
        })?;
    Ok(pre.iter().map(|&z| u8::from(z > 0.0)).collect())
}

/// Scalar training losses over logits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossKind {
    /// Softmax cross-entropy against an integer label.
    CrossEntropy,
    /// The margin loss max(max_{j != target} z_j - z_target, -kappa).
    /// The `label` argument of the gradient/value functions is ignored.
    LogitMargin { target: usize, kappa: f64 },
}

impl LossKind {
    fn check(&self, num_classes: usize, label: usize) -> Result<()> {
        if label >= num_classes {
            return Err(Error::LabelOutOfRange { label, num_classes });
        }
        if let LossKind::LogitMargin { target, .. } = self {
            if *target >= num_classes {
                return Err(Error::LabelOutOfRange {
                    label: *target,
                    num_classes,
                });
            }
        }
        Ok(())
    }

    /// Loss value at the given logits.
    pub fn value(&self, logits: &[f64], label: usize) -> f64 {
        match self {
            LossKind::CrossEntropy => log_sum_exp(logits) - logits[label],
            LossKind::LogitMargin { target, kappa } => {
                margin_term(logits, *target).max(-kappa)
            }
        }
    }

    /// dL/dlogits at the given logits.
    pub fn logit_gradient(&self, logits: &[f64], label: usize) -> Vec<f64> {
        match self {
            LossKind::CrossEntropy => {
                let mut g = softmax(logits);
                g[label] -= 1.0;
                g
            }
            LossKind::LogitMargin { target, kappa } => {
                let mut g = vec![0.0; logits.len()];
                // On the clamped branch (margin <= -kappa) the gradient is 0,
                // mirroring the ReLU-at-0 convention.
                if margin_term(logits, *target) > -kappa {
                    let j = runner_up(logits, *target);
                    g[j] = 1.0;
                    g[*target] = -1.0;
                }
                g
            }
        }
    }
}

fn margin_term(logits: &[f64], target: usize) -> f64 {
    logits[runner_up(logits, target)] - logits[target]
}

/// Argmax over all classes except `skip`; ties break toward the lowest index.
fn runner_up(logits: &[f64], skip: usize) -> usize {
    let mut best = usize::MAX;
    for (i, &v) in logits.iter().enumerate() {
        if i == skip {
            continue;
        }
        if best == usize::MAX || v > logits[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable log(sum(exp(z))) with max subtraction.
pub fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Softmax with max subtraction.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let exps: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Exact gradient of the loss with respect to the input.
pub fn input_gradient(net: &Network, x: &Tensor, loss: &LossKind, label: usize) -> Result<Tensor> {
    net.check_input(x)?;
    loss.check(net.num_classes(), label)?;
    let trace = net.forward_slice(x.data());
    let dlogits = loss.logit_gradient(&trace.logits, label);
    let (grad, _) = net.backprop(x.data(), &trace, &dlogits, false);
    Tensor::vector(grad)
}

/// Per-sample loss and exact flat parameter gradient.
pub fn sample_loss_and_gradient(
    net: &Network,
    x: &Tensor,
    label: usize,
    loss: &LossKind,
) -> Result<(f64, Vec<f64>)> {
    net.check_input(x)?;
    loss.check(net.num_classes(), label)?;
    let trace = net.forward_slice(x.data());
    let value = loss.value(&trace.logits, label);
    let dlogits = loss.logit_gradient(&trace.logits, label);
    let (_, pg) = net.backprop(x.data(), &trace, &dlogits, true);
    Ok((value, pg.unwrap()))
}

/// Mean parameter gradient over a batch, flattened in `params_flat` order.
pub fn parameter_gradient(net: &Network, batch: &[Sample], loss: &LossKind) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut acc = vec![0.0; net.param_count()];
    for (x, y) in batch {
        let (_, g) = sample_loss_and_gradient(net, x, *y, loss)?;
        for (a, v) in acc.iter_mut().zip(&g) {
            *a += v;
        }
    }
    let n = batch.len() as f64;
    for a in acc.iter_mut() {
        *a /= n;
    }
    Ok(acc)
}

/// Mean cross-entropy loss over a dataset.
pub fn mean_loss(net: &Network, data: &[Sample], loss: &LossKind) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut total = 0.0;
    for (x, y) in data {
        net.check_input(x)?;
        loss.check(net.num_classes(), *y)?;
        let trace = net.forward_slice(x.data());
        total += loss.value(&trace.logits, *y);
    }
    Ok(total / data.len() as f64)
}

/// Fraction of samples whose argmax prediction matches the label.
pub fn accuracy(net: &Network, data: &[Sample]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut correct = 0usize;
    for (x, y) in data {
        let trace = forward(net, x)?;
        if argmax(&trace.logits) == *y {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Per-sample SGD with a seeded shuffle each epoch. The step hook maps a
/// (network, sample, epoch) triple to the gradient actually applied, which
/// is how adversarial and differentially private training reuse this loop.
pub(crate) fn sgd_with<F>(
    net: &Network,
    data: &[Sample],
    epochs: usize,
    learning_rate: f64,
    seed: u64,
    mut step_gradient: F,
) -> Result<Network>
where
    F: FnMut(&Network, &Tensor, usize, usize) -> Result<(f64, Vec<f64>)>,
{
    if data.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if learning_rate <= 0.0 {
        return Err(Error::Precondition("learning_rate must be positive".into()));
    }
    let mut net = net.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices: Vec<usize> = (0..data.len()).collect();
    let mut params = net.params_flat();
    for epoch in 0..epochs {
        indices.shuffle(&mut rng);
        for (step, &idx) in indices.iter().enumerate() {
            let (x, y) = &data[idx];
            let (loss_value, grad) = step_gradient(&net, x, *y, epoch)?;
            if !loss_value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    sample: step,
                });
            }
            for (p, g) in params.iter_mut().zip(&grad) {
                *p -= learning_rate * g;
            }
            net.set_params_flat(&params)?;
        }
    }
    Ok(net)
}

/// Plain seeded SGD on the cross-entropy loss. `epochs = 0` returns the
/// network unchanged; the same seed gives a bit-identical result.
pub fn train_sgd(
    net: &Network,
    data: &[Sample],
    epochs: usize,
    learning_rate: f64,
    seed: u64,
) -> Result<Network> {
    sgd_with(net, data, epochs, learning_rate, seed, |net, x, y, _| {
        sample_loss_and_gradient(net, x, y, &LossKind::CrossEntropy)
    })
}

/// A differentiable classifier: the surface attacks see. Implemented by
/// [`Network`] directly, by logit ensembles, and by defense wrappers that
/// alter what gradient information an attacker can obtain.
pub trait GradientModel {
    fn input_dim(&self) -> usize;
    fn num_classes(&self) -> usize;
    /// Logit vector at x. Panics on a wrong-length slice; callers validate.
    fn logits(&self, x: &[f64]) -> Vec<f64>;
    /// Gradient of `dot(seed, logits(x))` with respect to x.
    fn input_vjp(&self, x: &[f64], seed: &[f64]) -> Vec<f64>;

    /// Gradient of the scalar loss with respect to x, as exposed to an
    /// attacker.
    fn loss_input_gradient(&self, x: &[f64], loss: &LossKind, label: usize) -> Vec<f64> {
        let z = self.logits(x);
        let dz = loss.logit_gradient(&z, label);
        self.input_vjp(x, &dz)
    }

    fn predict(&self, x: &[f64]) -> usize {
        argmax(&self.logits(x))
    }
}

impl GradientModel for Network {
    fn input_dim(&self) -> usize {
        Network::input_dim(self)
    }

    fn num_classes(&self) -> usize {
        Network::num_classes(self)
    }

    fn logits(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), Network::input_dim(self), "input length mismatch");
        self.forward_slice(x).logits
    }

    fn input_vjp(&self, x: &[f64], seed: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), Network::input_dim(self), "input length mismatch");
        self.input_vjp_slice(x, seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::sub;

    fn ten(v: &[f64]) -> Tensor {
        Tensor::vector(v.to_vec()).unwrap()
    }

    fn identity_net() -> Network {
        let layer = DenseLayer::new(
            2,
            2,
            vec![1.0, 0.0, 0.0, 1.0],
            vec![0.0, 0.0],
            Activation::Identity,
        )
        .unwrap();
        Network::new(vec![layer]).unwrap()
    }

    #[test]
    fn forward_identity_layer_passes_input_through() {
        let net = identity_net();
        let trace = forward(&net, &ten(&[0.3, 0.7])).unwrap();
        assert_eq!(trace.logits, vec![0.3, 0.7]);
    }

    #[test]
    fn forward_relu_layer_splits_by_sign() {
        let relu = DenseLayer::new(1, 2, vec![1.0, -1.0], vec![0.0, 0.0], Activation::ReLU).unwrap();
        let out = DenseLayer::new(
            2,
            2,
            vec![1.0, 0.0, 0.0, 1.0],
            vec![0.0, 0.0],
            Activation::Identity,
        )
        .unwrap();
        let net = Network::new(vec![relu, out]).unwrap();
        let trace = forward(&net, &ten(&[2.0])).unwrap();
        assert_eq!(trace.activations[0], vec![2.0, 0.0]);
    }

    #[test]
    fn forward_rejects_wrong_input_shape() {
        let net = identity_net();
        let err = forward(&net, &ten(&[1.0])).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { layer: 0, expected: 2, actual: 1 }));
    }

    // Independent naive matmul oracle used only by tests.
    fn oracle_forward(net: &Network, x: &[f64]) -> Vec<f64> {
        let mut cur = x.to_vec();
        for layer in net.layers() {
            let mut next = vec![0.0; layer.out_dim()];
            for i in 0..layer.out_dim() {
                let mut acc = layer.bias()[i];
                for j in 0..layer.in_dim() {
                    acc += layer.weights()[i * layer.in_dim() + j] * cur[j];
                }
                next[i] = acc;
            }
            if layer.activation() == Activation::ReLU {
                for v in next.iter_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            cur = next;
        }
        cur
    }

    #[test]
    fn forward_matches_naive_matmul_oracle() {
        for seed in 0..5 {
            let net = Network::random(&[4, 6, 3], seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..1.0)).collect();
            let got = forward(&net, &ten(&x)).unwrap().logits;
            let want = oracle_forward(&net, &x);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() <= 1e-12, "got {g}, want {w}");
            }
        }
    }

    #[test]
    fn forward_is_pure() {
        let net = Network::random(&[3, 5, 2], 7).unwrap();
        let x = ten(&[0.2, 0.9, 0.4]);
        let a = forward(&net, &x).unwrap();
        let b = forward(&net, &x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn relu_mask_uses_strict_positivity() {
        let trace = ForwardTrace {
            preactivations: vec![vec![-1.0, 0.0, 2.0]],
            activations: vec![vec![0.0, 0.0, 2.0]],
            logits: vec![0.0, 0.0, 2.0],
        };
        assert_eq!(relu_mask(&trace, 0).unwrap(), vec![0, 0, 1]);
        let all_pos = ForwardTrace {
            preactivations: vec![vec![0.1, 5.0]],
            activations: vec![vec![0.1, 5.0]],
            logits: vec![0.1, 5.0],
        };
        assert_eq!(relu_mask(&all_pos, 0).unwrap(), vec![1, 1]);
        let all_zero = ForwardTrace {
            preactivations: vec![vec![0.0, 0.0]],
            activations: vec![vec![0.0, 0.0]],
            logits: vec![0.0, 0.0],
        };
        assert_eq!(relu_mask(&all_zero, 0).unwrap(), vec![0, 0]);
        assert!(relu_mask(&all_zero, 1).is_err());
    }

    #[test]
    fn input_gradient_matches_closed_form_softmax_gradient() {
        // Single affine layer: dL/dx = (softmax(z) - onehot(y))^T W.
        let w = vec![0.5, -0.3, 0.8, 0.2, -0.6, 0.1];
        let b = vec![0.1, -0.2];
        let layer = DenseLayer::new(3, 2, w.clone(), b, Activation::Identity).unwrap();
        let net = Network::new(vec![layer]).unwrap();
        let x = ten(&[0.4, -0.2, 0.9]);
        let grad = input_gradient(&net, &x, &LossKind::CrossEntropy, 1).unwrap();

        let trace = forward(&net, &x).unwrap();
        let mut dz = softmax(&trace.logits);
        dz[1] -= 1.0;
        let mut want = vec![0.0; 3];
        for i in 0..2 {
            for j in 0..3 {
                want[j] += dz[i] * w[i * 3 + j];
            }
        }
        for (g, e) in grad.data().iter().zip(&want) {
            assert!((g - e).abs() <= 1e-12);
        }
    }

    /// Central finite differences of the loss with respect to the input.
    fn fd_input_gradient(net: &Network, x: &[f64], loss: &LossKind, label: usize) -> Vec<f64> {
        let h = 1e-5;
        let mut g = vec![0.0; x.len()];
        for i in 0..x.len() {
            let mut plus = x.to_vec();
            plus[i] += h;
            let mut minus = x.to_vec();
            minus[i] -= h;
            let lp = loss.value(&net.forward_slice(&plus).logits, label);
            let lm = loss.value(&net.forward_slice(&minus).logits, label);
            g[i] = (lp - lm) / (2.0 * h);
        }
        g
    }

    /// True when some pre-activation sits within `tol` of a ReLU kink.
    fn near_kink(net: &Network, x: &[f64], tol: f64) -> bool {
        let trace = net.forward_slice(x);
        net.layers().iter().enumerate().any(|(k, layer)| {
            layer.activation() == Activation::ReLU
                && trace.preactivations[k].iter().any(|z| z.abs() < tol)
        })
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut checked = 0;
        while checked < 6 {
            let seed = rng.random::<u64>();
            let net = Network::random(&[5, 8, 8, 3], seed).unwrap();
            let x: Vec<f64> = (0..5).map(|_| rng.random_range(0.0..1.0)).collect();
            if near_kink(&net, &x, 1e-6) {
                continue;
            }
            let exact = input_gradient(&net, &ten(&x), &LossKind::CrossEntropy, 2).unwrap();
            let fd = fd_input_gradient(&net, &x, &LossKind::CrossEntropy, 2);
            for (e, f) in exact.data().iter().zip(&fd) {
                let denom = f.abs().max(1e-8);
                assert!(
                    (e - f).abs() / denom <= 1e-5,
                    "exact {e} vs fd {f} (seed {seed})"
                );
            }
            checked += 1;
        }
    }

    #[test]
    fn zero_weight_network_has_zero_gradient() {
        let layer = DenseLayer::new(3, 2, vec![0.0; 6], vec![0.0; 2], Activation::Identity).unwrap();
        let net = Network::new(vec![layer]).unwrap();
        let g = input_gradient(&net, &ten(&[0.1, 0.5, 0.9]), &LossKind::CrossEntropy, 0).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn input_gradient_rejects_bad_label() {
        let net = identity_net();
        let err = input_gradient(&net, &ten(&[0.1, 0.2]), &LossKind::CrossEntropy, 2).unwrap_err();
        assert!(matches!(err, Error::LabelOutOfRange { label: 2, num_classes: 2 }));
    }

    /// Eq-style structural check: the input gradient equals the explicit
    /// chain dL/dz^T W_L diag(m_{L-1}) W_{L-1} ... diag(m_1) W_1 built
    /// independently as matrix products.
    #[test]
    fn input_gradient_matches_explicit_masked_chain() {
        let net = Network::random(&[4, 6, 5, 3], 9).unwrap();
        let x: Vec<f64> = vec![0.3, 0.8, 0.1, 0.6];
        let trace = forward(&net, &ten(&x)).unwrap();
        let loss = LossKind::CrossEntropy;
        let mut row = loss.logit_gradient(&trace.logits, 1);
        for (k, layer) in net.layers().iter().enumerate().rev() {
            // row <- row * (diag(mask_k) W_k), with mask all-ones for identity.
            let mask: Vec<f64> = match layer.activation() {
                Activation::ReLU => relu_mask(&trace, k)
                    .unwrap()
                    .iter()
                    .map(|&m| f64::from(m))
                    .collect(),
                Activation::Identity => vec![1.0; layer.out_dim()],
            };
            let mut next = vec![0.0; layer.in_dim()];
            for i in 0..layer.out_dim() {
                let scaled = row[i] * mask[i];
                for j in 0..layer.in_dim() {
                    next[j] += scaled * layer.weights()[i * layer.in_dim() + j];
                }
            }
            row = next;
        }
        let grad = input_gradient(&net, &ten(&x), &loss, 1).unwrap();
        for (g, r) in grad.data().iter().zip(&row) {
            assert!((g - r).abs() <= 1e-12);
        }
    }

    #[test]
    fn parameter_gradient_of_singleton_batch_is_per_sample_gradient() {
        let net = Network::random(&[3, 4, 2], 5).unwrap();
        let x = ten(&[0.2, 0.4, 0.6]);
        let batch = vec![(x.clone(), 1usize)];
        let g1 = parameter_gradient(&net, &batch, &LossKind::CrossEntropy).unwrap();
        let (_, g2) = sample_loss_and_gradient(&net, &x, 1, &LossKind::CrossEntropy).unwrap();
        assert_eq!(g1, g2);
    }

    #[test]
    fn parameter_gradient_is_invariant_under_duplication() {
        let net = Network::random(&[3, 4, 2], 5).unwrap();
        let x = ten(&[0.2, 0.4, 0.6]);
        let once = parameter_gradient(&net, &[(x.clone(), 1)], &LossKind::CrossEntropy).unwrap();
        let twice =
            parameter_gradient(&net, &[(x.clone(), 1), (x, 1)], &LossKind::CrossEntropy).unwrap();
        // (g + g) / 2 is exact in IEEE arithmetic.
        assert_eq!(once, twice);
    }

    #[test]
    fn parameter_gradient_rejects_empty_batch() {
        let net = identity_net();
        assert!(matches!(
            parameter_gradient(&net, &[], &LossKind::CrossEntropy),
            Err(Error::EmptyBatch)
        ));
    }

    #[test]
    fn parameter_gradient_matches_finite_differences_on_tiny_net() {
        let net = Network::random(&[2, 4, 2], 11).unwrap(); // 8+4+8+2 = 22 params
        assert!(net.param_count() <= 50);
        let batch = vec![
            (ten(&[0.3, 0.7]), 0usize),
            (ten(&[0.8, 0.1]), 1usize),
            (ten(&[0.5, 0.5]), 0usize),
        ];
        let loss = LossKind::CrossEntropy;
        let exact = parameter_gradient(&net, &batch, &loss).unwrap();
        let h = 1e-5;
        let base = net.params_flat();
        for i in 0..net.param_count() {
            let mut plus = net.clone();
            let mut p = base.clone();
            p[i] += h;
            plus.set_params_flat(&p).unwrap();
            let mut minus = net.clone();
            p[i] = base[i] - h;
            minus.set_params_flat(&p).unwrap();
            let lp = mean_loss(&plus, &batch, &loss).unwrap();
            let lm = mean_loss(&minus, &batch, &loss).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            let denom = fd.abs().max(1e-8);
            assert!(
                (exact[i] - fd).abs() / denom <= 1e-5,
                "param {i}: exact {} vs fd {fd}",
                exact[i]
            );
        }
    }

    #[test]
    fn train_zero_epochs_returns_input_network() {
        let net = Network::random(&[2, 3, 2], 17).unwrap();
        let data = vec![(ten(&[0.1, 0.9]), 0usize)];
        let trained = train_sgd(&net, &data, 0, 0.1, 3).unwrap();
        assert_eq!(net, trained);
    }

    #[test]
    fn train_is_deterministic_given_seed() {
        let net = Network::random(&[2, 4, 2], 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let data: Vec<Sample> = (0..20)
            .map(|i| {
                let x = vec![rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
                (ten(&x), i % 2)
            })
            .collect();
        let a = train_sgd(&net, &data, 5, 0.1, 99).unwrap();
        let b = train_sgd(&net, &data, 5, 0.1, 99).unwrap();
        assert_eq!(a.params_flat(), b.params_flat());
        let c = train_sgd(&net, &data, 5, 0.1, 100).unwrap();
        assert_ne!(a.params_flat(), c.params_flat());
    }

    /// Perceptron run as an independent separability oracle: on separable
    /// data it converges to zero training errors.
    fn perceptron_separates(data: &[Sample], max_passes: usize) -> bool {
        let d = data[0].0.len();
        let mut w = vec![0.0; d + 1];
        for _ in 0..max_passes {
            let mut errors = 0;
            for (x, y) in data {
                let s: f64 = w[d] + dot(&w[..d], x.data());
                let label = if *y == 1 { 1.0 } else { -1.0 };
                if s * label <= 0.0 {
                    for (wi, xi) in w[..d].iter_mut().zip(x.data()) {
                        *wi += label * xi;
                    }
                    w[d] += label;
                    errors += 1;
                }
            }
            if errors == 0 {
                return true;
            }
        }
        false
    }

    use crate::tensor::dot;

    #[test]
    fn softmax_layer_fits_linearly_separable_data() {
        // Two well-separated blobs in the unit square.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut data = Vec::new();
        for i in 0..60 {
            let y = i % 2;
            let cx = if y == 0 { 0.25 } else { 0.75 };
            let x = vec![
                cx + rng.random_range(-0.12..0.12),
                0.5 + rng.random_range(-0.2..0.2),
            ];
            data.push((ten(&x), y));
        }
        assert!(perceptron_separates(&data, 200), "oracle: data separable");

        let net = Network::random(&[2, 2], 1).unwrap();
        let initial = mean_loss(&net, &data, &LossKind::CrossEntropy).unwrap();
        let trained = train_sgd(&net, &data, 200, 0.5, 2).unwrap();
        let final_loss = mean_loss(&trained, &data, &LossKind::CrossEntropy).unwrap();
        assert!(final_loss <= initial, "{final_loss} vs {initial}");
        assert!(accuracy(&trained, &data).unwrap() >= 0.99);
    }

    #[test]
    fn logit_margin_gradient_zero_on_clamped_branch() {
        let loss = LossKind::LogitMargin { target: 1, kappa: 2.0 };
        // margin = 2 - 5 = -3 < -kappa, so clamped.
        assert_eq!(loss.logit_gradient(&[2.0, 5.0, 1.0], 0), vec![0.0, 0.0, 0.0]);
        // Unclamped: gradient +1 on runner-up, -1 on target.
        let loss = LossKind::LogitMargin { target: 0, kappa: 0.0 };
        assert_eq!(loss.logit_gradient(&[2.0, 5.0, 1.0], 0), vec![-1.0, 1.0, 0.0]);
    }

    #[test]
    fn penultimate_vjp_matches_finite_differences() {
        let net = Network::random(&[3, 5, 4, 2], 21).unwrap();
        let x = vec![0.4, 0.6, 0.2];
        let seed_vec = vec![0.3, -0.7, 0.5, 0.9];
        let grad = net.penultimate_vjp(&ten(&x), &seed_vec).unwrap();
        let h = 1e-6;
        for i in 0..3 {
            let mut plus = x.clone();
            plus[i] += h;
            let mut minus = x.clone();
            minus[i] -= h;
            let fp = dot(&net.penultimate_features(&ten(&plus)).unwrap(), &seed_vec);
            let fm = dot(&net.penultimate_features(&ten(&minus)).unwrap(), &seed_vec);
            let fd = (fp - fm) / (2.0 * h);
            assert!((grad[i] - fd).abs() <= 1e-6 * fd.abs().max(1.0), "{} vs {fd}", grad[i]);
        }
    }

    #[test]
    fn params_roundtrip_through_flat_vector() {
        let net = Network::random(&[3, 4, 2], 33).unwrap();
        let flat = net.params_flat();
        let mut other = Network::random(&[3, 4, 2], 34).unwrap();
        other.set_params_flat(&flat).unwrap();
        assert_eq!(net, other);
        let diff = sub(&flat, &other.params_flat());
        assert!(diff.iter().all(|v| *v == 0.0));
    }
}
