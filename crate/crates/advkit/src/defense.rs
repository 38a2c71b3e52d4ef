//! Defense and certification mechanisms: gradient quantization,
//! adversarial training, interval bound propagation, randomized smoothing,
//! BPDA gradient approximation, and the exact-verification cost formula.

use num_bigint::BigUint;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use statrs::distribution::{Beta, Binomial, ContinuousCDF, DiscreteCDF, Normal as Gaussian};

use crate::attack::whitebox::pgd_adaptive;
use crate::attack::{PerturbationBudget, TargetSpec};
use crate::error::{Error, Result};
use crate::net::{
    forward, input_gradient, sample_loss_and_gradient, sgd_with, Activation, GradientModel,
    LossKind, Network, Sample,
};
use crate::tensor::Tensor;

/// Bit depth for gradient quantization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuantConfig {
    pub bits: u32,
}

impl QuantConfig {
    pub fn new(bits: u32) -> Result<Self> {
        if bits < 1 {
            return Err(Error::Precondition("bits must be >= 1".into()));
        }
        Ok(Self { bits })
    }

    fn scale(&self) -> f64 {
        2f64.powi(self.bits as i32 - 1)
    }
}

/// Elementwise round(g * 2^(b-1)) / 2^(b-1). Idempotent.
pub fn quantize_gradient(g: &Tensor, config: &QuantConfig) -> Tensor {
    let scale = config.scale();
    let data: Vec<f64> = g.data().iter().map(|&v| (v * scale).round() / scale).collect();
    Tensor::new(g.shape().to_vec(), data).expect("quantization preserves finiteness")
}

/// A network whose exposed gradients all pass through [`quantize_gradient`];
/// forward passes are unchanged.
pub struct QuantizedModel<'a> {
    net: &'a Network,
    config: QuantConfig,
}

/// Wraps a network as a gradient-quantizing defense.
pub fn quantized_oracle(net: &Network, config: QuantConfig) -> QuantizedModel<'_> {
    QuantizedModel { net, config }
}

impl GradientModel for QuantizedModel<'_> {
    fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    fn num_classes(&self) -> usize {
        self.net.num_classes()
    }

    fn logits(&self, x: &[f64]) -> Vec<f64> {
        GradientModel::logits(self.net, x)
    }

    fn input_vjp(&self, x: &[f64], seed: &[f64]) -> Vec<f64> {
        let raw = self.net.input_vjp(x, seed);
        quantize_gradient(&Tensor::vector(raw).expect("finite gradient"), &self.config).into_data()
    }
}

/// Adversarial training configuration: the inner maximization budget and
/// the outer SGD schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdvTrainConfig {
    pub budget: PerturbationBudget,
    pub inner_steps: usize,
    pub inner_alpha0: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl AdvTrainConfig {
    /// Seven inner PGD steps with a quarter-epsilon initial step size.
    pub fn new(budget: PerturbationBudget, epochs: usize, learning_rate: f64, seed: u64) -> Self {
        Self {
            budget,
            inner_steps: 7,
            inner_alpha0: budget.epsilon * crate::attack::whitebox::DEFAULT_ALPHA_FRACTION,
            epochs,
            learning_rate,
            seed,
        }
    }
}

/// Min-max training: every sample is replaced by its adaptive-PGD
/// adversarial counterpart (inner maximization) before the SGD step (outer
/// minimization). With epsilon = 0 the trajectory is bit-identical to
/// [`crate::net::train_sgd`] at the same seed.
pub fn adversarial_train(net: &Network, data: &[Sample], config: &AdvTrainConfig) -> Result<Network> {
    if config.inner_steps < 1 {
        return Err(Error::Precondition("inner_steps must be >= 1".into()));
    }
    let inner_alpha0 = if config.inner_alpha0 > 0.0 {
        config.inner_alpha0
    } else {
        config.budget.epsilon * crate::attack::whitebox::DEFAULT_ALPHA_FRACTION
    };
    sgd_with(
        net,
        data,
        config.epochs,
        config.learning_rate,
        config.seed,
        |net, x, y, _| {
            let attack = pgd_adaptive(
                net,
                x,
                &TargetSpec::Untargeted,
                y,
                &config.budget,
                config.inner_steps,
                inner_alpha0,
            )?;
            sample_loss_and_gradient(net, &attack.adversarial, y, &LossKind::CrossEntropy)
        },
    )
}

/// Per-layer post-activation interval bounds for an Linf input ball.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalBounds {
    pub lower: Vec<Vec<f64>>,
    pub upper: Vec<Vec<f64>>,
    pub input_epsilon: f64,
}

impl IntervalBounds {
    /// Bounds on the logits (the final layer's interval).
    pub fn logit_bounds(&self) -> (&[f64], &[f64]) {
        (
            self.lower.last().expect("at least one layer"),
            self.upper.last().expect("at least one layer"),
        )
    }
}

/// Propagates interval bounds through the network for the Linf ball of
/// radius epsilon around x, intersected with the unit box. Pre-activation
/// bounds use the positive/negative weight split; ReLU applies monotonely.
pub fn ibp_bounds(net: &Network, x: &Tensor, epsilon: f64) -> Result<IntervalBounds> {
    if epsilon < 0.0 {
        return Err(Error::Precondition("epsilon must be non-negative".into()));
    }
    forward(net, x)?; // validates the input shape
    let mut lower: Vec<f64> = x.data().iter().map(|v| (v - epsilon).clamp(0.0, 1.0)).collect();
    let mut upper: Vec<f64> = x.data().iter().map(|v| (v + epsilon).clamp(0.0, 1.0)).collect();
    let mut all_lower = Vec::with_capacity(net.layers().len());
    let mut all_upper = Vec::with_capacity(net.layers().len());
    for layer in net.layers() {
        let mut l = layer.bias().to_vec();
        let mut u = layer.bias().to_vec();
        for i in 0..layer.out_dim() {
            let row = &layer.weights()[i * layer.in_dim()..(i + 1) * layer.in_dim()];
            for (j, &w) in row.iter().enumerate() {
                let (wp, wn) = (w.max(0.0), w.min(0.0));
                l[i] += wp * lower[j] + wn * upper[j];
                u[i] += wp * upper[j] + wn * lower[j];
            }
        }
        if layer.activation() == Activation::ReLU {
            for v in l.iter_mut() {
                *v = v.max(0.0);
            }
            for v in u.iter_mut() {
                *v = v.max(0.0);
            }
        }
        debug_assert!(l.iter().zip(&u).all(|(a, b)| a <= b));
        lower = l.clone();
        upper = u.clone();
        all_lower.push(l);
        all_upper.push(u);
    }
    Ok(IntervalBounds {
        lower: all_lower,
        upper: all_upper,
        input_epsilon: epsilon,
    })
}

/// True iff the worst-case logit margin from the interval bounds is
/// positive: lower(label) - max_{j != label} upper(j) > 0. A true result
/// means no Linf-epsilon perturbation can change the prediction.
pub fn ibp_certify(net: &Network, x: &Tensor, label: usize, epsilon: f64) -> Result<bool> {
    if label >= net.num_classes() {
        return Err(Error::LabelOutOfRange {
            label,
            num_classes: net.num_classes(),
        });
    }
    let bounds = ibp_bounds(net, x, epsilon)?;
    let (lower, upper) = bounds.logit_bounds();
    let mut worst_other = f64::NEG_INFINITY;
    for (j, &u) in upper.iter().enumerate() {
        if j != label && u > worst_other {
            worst_other = u;
        }
    }
    Ok(lower[label] - worst_other > 0.0)
}

/// Majority-vote classifier over Gaussian input noise.
#[derive(Debug, Clone)]
pub struct SmoothedClassifier<'a> {
    pub base: &'a Network,
    pub sigma: f64,
    pub num_samples: usize,
    pub alpha: f64,
}

impl<'a> SmoothedClassifier<'a> {
    pub fn new(base: &'a Network, sigma: f64, num_samples: usize, alpha: f64) -> Result<Self> {
        if sigma <= 0.0 {
            return Err(Error::Precondition("sigma must be positive".into()));
        }
        if num_samples < 100 {
            return Err(Error::Precondition("num_samples must be >= 100".into()));
        }
        if !(0.0 < alpha && alpha < 0.5) {
            return Err(Error::Precondition("alpha must lie in (0, 0.5)".into()));
        }
        Ok(Self {
            base,
            sigma,
            num_samples,
            alpha,
        })
    }

    /// Class counts over `num_samples` seeded Gaussian draws.
    fn sample_counts(&self, x: &Tensor, seed: u64) -> Result<Vec<usize>> {
        forward(self.base, x)?; // validates the shape
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, self.sigma).expect("sigma validated");
        let mut counts = vec![0usize; self.base.num_classes()];
        let mut noisy = vec![0.0; x.len()];
        for _ in 0..self.num_samples {
            for (n, &xi) in noisy.iter_mut().zip(x.data()) {
                *n = xi + normal.sample(&mut rng);
            }
            counts[self.base.predict(&noisy)] += 1;
        }
        Ok(counts)
    }
}

/// Outcome of a smoothed prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SmoothPrediction {
    Class(usize),
    Abstain,
}

/// Outcome of a smoothing certification.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SmoothCertificate {
    Certified { class: usize, radius: f64 },
    Abstain,
}

/// Two-sided exact binomial sign test: can `top` be separated from
/// `second` as more likely than a fair coin at level alpha?
pub fn binomial_separates(top: usize, second: usize, alpha: f64) -> bool {
    let m = top + second;
    if m == 0 {
        return false;
    }
    let dist = Binomial::new(0.5, m as u64).expect("valid binomial");
    // P(X >= top), doubled for the two-sided test.
    let tail = if top == 0 { 1.0 } else { dist.sf(top as u64 - 1) };
    (2.0 * tail).min(1.0) <= alpha
}

/// Majority vote over Gaussian draws; abstains when the exact binomial
/// test cannot separate the top class from the runner-up at level alpha.
pub fn smooth_predict(sc: &SmoothedClassifier, x: &Tensor, seed: u64) -> Result<SmoothPrediction> {
    let counts = sc.sample_counts(x, seed)?;
    let (top_class, top, second) = top_two(&counts);
    if binomial_separates(top, second, sc.alpha) {
        Ok(SmoothPrediction::Class(top_class))
    } else {
        Ok(SmoothPrediction::Abstain)
    }
}

/// Reporting cap on the certified radius, in units of sigma.
pub const RADIUS_CAP_SIGMAS: f64 = 10.0;

/// Certified L2 radius sigma * Phi^{-1}(p_lower), capped at 10 sigma.
pub fn certified_radius(sigma: f64, p_lower: f64) -> f64 {
    let gaussian = Gaussian::new(0.0, 1.0).expect("standard normal");
    (sigma * gaussian.inverse_cdf(p_lower)).min(RADIUS_CAP_SIGMAS * sigma)
}

/// One-sided (1 - alpha) Clopper-Pearson lower confidence bound on a
/// binomial proportion with k successes out of n.
pub fn clopper_pearson_lower(k: usize, n: usize, alpha: f64) -> f64 {
    if k == 0 {
        return 0.0;
    }
    Beta::new(k as f64, (n - k + 1) as f64)
        .expect("valid beta parameters")
        .inverse_cdf(alpha)
}

/// Certifies the smoothed classifier at x: the top class together with the
/// radius sigma * Phi^{-1}(p_lower), where p_lower is the Clopper-Pearson
/// lower bound on the top-class probability. Abstains when p_lower <= 1/2.
pub fn smooth_certify(sc: &SmoothedClassifier, x: &Tensor, seed: u64) -> Result<SmoothCertificate> {
    let counts = sc.sample_counts(x, seed)?;
    let (top_class, top, _) = top_two(&counts);
    let p_lower = clopper_pearson_lower(top, sc.num_samples, sc.alpha);
    if p_lower <= 0.5 {
        return Ok(SmoothCertificate::Abstain);
    }
    Ok(SmoothCertificate::Certified {
        class: top_class,
        radius: certified_radius(sc.sigma, p_lower),
    })
}

/// Top class (lowest index on ties), its count, and the runner-up count.
fn top_two(counts: &[usize]) -> (usize, usize, usize) {
    let mut top_class = 0;
    for (i, &c) in counts.iter().enumerate().skip(1) {
        if c > counts[top_class] {
            top_class = i;
        }
    }
    let second = counts
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != top_class)
        .map(|(_, &c)| c)
        .max()
        .unwrap_or(0);
    (top_class, counts[top_class], second)
}

/// Monte-Carlo BPDA configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BPDAConfig {
    pub sigma: f64,
    pub num_samples: usize,
    pub seed: u64,
}

impl BPDAConfig {
    pub fn new(sigma: f64, num_samples: usize, seed: u64) -> Result<Self> {
        if sigma < 0.0 {
            return Err(Error::Precondition("sigma must be non-negative".into()));
        }
        if num_samples < 1 {
            return Err(Error::Precondition("num_samples must be >= 1".into()));
        }
        Ok(Self {
            sigma,
            num_samples,
            seed,
        })
    }
}

fn bpda_average<F, G>(
    x: &Tensor,
    config: &BPDAConfig,
    preprocess: &F,
    mut gradient_at: G,
) -> Result<Tensor>
where
    F: Fn(&[f64]) -> Vec<f64>,
    G: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut acc = vec![0.0; x.len()];
    let mut noisy = vec![0.0; x.len()];
    for _ in 0..config.num_samples {
        for (n, &xi) in noisy.iter_mut().zip(x.data()) {
            let draw: f64 = StandardNormal.sample(&mut rng);
            *n = xi + config.sigma * draw;
        }
        let point = preprocess(&noisy);
        let grad = gradient_at(&point)?;
        for (a, g) in acc.iter_mut().zip(&grad) {
            *a += g;
        }
    }
    let n = config.num_samples as f64;
    for a in acc.iter_mut() {
        *a /= n;
    }
    Tensor::vector(acc)
}

/// BPDA loss gradient: the Monte-Carlo average, over Gaussian draws delta,
/// of the exact loss gradient evaluated at preprocess(x + delta). The
/// preprocess runs in the forward direction only; its (zero or undefined)
/// derivative is skipped in the backward pass.
pub fn bpda_gradient<F: Fn(&[f64]) -> Vec<f64>>(
    net: &Network,
    preprocess: &F,
    x: &Tensor,
    loss: &LossKind,
    label: usize,
    config: &BPDAConfig,
) -> Result<Tensor> {
    bpda_average(x, config, preprocess, |point| {
        Ok(input_gradient(net, &Tensor::vector(point.to_vec())?, loss, label)?.into_data())
    })
}

/// Logit-space BPDA variant: the averaged gradient of dot(seed, logits).
pub fn bpda_logit_gradient<F: Fn(&[f64]) -> Vec<f64>>(
    net: &Network,
    preprocess: &F,
    x: &Tensor,
    seed_vector: &[f64],
    config: &BPDAConfig,
) -> Result<Tensor> {
    bpda_average(x, config, preprocess, |point| {
        Ok(net.input_vjp_slice(point, seed_vector))
    })
}

/// A network defended by a non-differentiable input preprocess. Forward
/// passes run through the preprocess; the true gradient of the composition
/// is zero almost everywhere, which is what this wrapper exposes.
pub struct PreprocessedModel<'a, F: Fn(&[f64]) -> Vec<f64>> {
    pub net: &'a Network,
    pub preprocess: F,
}

impl<F: Fn(&[f64]) -> Vec<f64>> GradientModel for PreprocessedModel<'_, F> {
    fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    fn num_classes(&self) -> usize {
        self.net.num_classes()
    }

    fn logits(&self, x: &[f64]) -> Vec<f64> {
        GradientModel::logits(self.net, &(self.preprocess)(x))
    }

    fn input_vjp(&self, x: &[f64], _seed: &[f64]) -> Vec<f64> {
        // Piecewise-constant preprocess: derivative zero a.e.
        vec![0.0; x.len()]
    }
}

/// The same defended model attacked through BPDA: identical forward
/// behavior, but gradients come from the Monte-Carlo approximation.
pub struct BpdaModel<'a, F: Fn(&[f64]) -> Vec<f64>> {
    pub net: &'a Network,
    pub preprocess: F,
    pub config: BPDAConfig,
}

impl<F: Fn(&[f64]) -> Vec<f64>> GradientModel for BpdaModel<'_, F> {
    fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    fn num_classes(&self) -> usize {
        self.net.num_classes()
    }

    fn logits(&self, x: &[f64]) -> Vec<f64> {
        GradientModel::logits(self.net, &(self.preprocess)(x))
    }

    fn input_vjp(&self, x: &[f64], seed: &[f64]) -> Vec<f64> {
        bpda_logit_gradient(
            self.net,
            &self.preprocess,
            &Tensor::vector(x.to_vec()).expect("finite input"),
            seed,
            &self.config,
        )
        .expect("finite gradient")
        .into_data()
    }

    fn loss_input_gradient(&self, x: &[f64], loss: &LossKind, label: usize) -> Vec<f64> {
        bpda_gradient(
            self.net,
            &self.preprocess,
            &Tensor::vector(x.to_vec()).expect("finite input"),
            loss,
            label,
            &self.config,
        )
        .expect("finite gradient")
        .into_data()
    }
}

/// Rounds every coordinate to one of `levels` evenly spaced values in
/// [0, 1]. The canonical gradient-masking preprocess.
pub fn round_to_levels(x: &[f64], levels: u32) -> Vec<f64> {
    let steps = (levels.max(2) - 1) as f64;
    x.iter().map(|v| (v * steps).round() / steps).collect()
}

/// Operation count (2n)^L for exact verification of an L-layer network
/// with n neurons per layer, as an exact big integer.
pub fn verification_cost(neurons_per_layer: u64, layers: u32) -> Result<BigUint> {
    if neurons_per_layer < 1 || layers < 1 {
        return Err(Error::Precondition("need n >= 1 and L >= 1".into()));
    }
    Ok(BigUint::from(2 * neurons_per_layer).pow(layers))
}
