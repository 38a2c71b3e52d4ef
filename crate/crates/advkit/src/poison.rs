//! Training-time attacks and their mitigations: influence-function-guided
//! poisoning, visibility-bounded backdoor triggers with dirty- and
//! clean-label crafting, loss-ranking sanitization, and differentially
//! private SGD.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::attack::Norm;
use crate::error::{Error, Result};
use crate::net::{
    forward, parameter_gradient, sample_loss_and_gradient, sgd_with, LossKind, Network, Sample,
};
use crate::tensor::{argmax, l2_norm, linf_norm, Tensor};

/// Dense Hessians are only built up to this many parameters.
pub const HESSIAN_PARAM_LIMIT: usize = 2000;

/// Ridge added to near-singular Hessians before solving.
pub const HESSIAN_RIDGE: f64 = 1e-6;

/// Condition-number threshold beyond which the ridge fallback kicks in.
const CONDITION_LIMIT: f64 = 1e12;

/// An up-weighting request for one poison point. The strength is capped
/// because the first-order approximation degrades quickly.
#[derive(Debug, Clone)]
pub struct InfluenceRequest {
    pub z_poison: Sample,
    pub epsilon: f64,
}

impl InfluenceRequest {
    pub fn new(z_poison: Sample, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon <= 0.1) {
            return Err(Error::Precondition(
                "influence epsilon must be in (0, 0.1]".into(),
            ));
        }
        Ok(Self { z_poison, epsilon })
    }
}

/// Predicted parameter shift and the curvature diagnostics behind it.
#[derive(Debug, Clone)]
pub struct InfluenceReport {
    pub delta_theta: Vec<f64>,
    pub hessian_condition: f64,
}

/// Exact dense Hessian of the mean training loss, built from central finite
/// differences of the exact parameter gradient and symmetrized with its
/// transpose.
pub fn hessian(net: &Network, data: &[Sample], loss: &LossKind) -> Result<DMatrix<f64>> {
    let p = net.param_count();
    if p > HESSIAN_PARAM_LIMIT {
        return Err(Error::HessianTooLarge {
            count: p,
            limit: HESSIAN_PARAM_LIMIT,
        });
    }
    if data.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let h = 1e-4;
    let base = net.params_flat();
    let mut matrix = DMatrix::zeros(p, p);
    let mut probe = net.clone();
    let mut params = base.clone();
    for i in 0..p {
        params[i] = base[i] + h;
        probe.set_params_flat(&params)?;
        let plus = parameter_gradient(&probe, data, loss)?;
        params[i] = base[i] - h;
        probe.set_params_flat(&params)?;
        let minus = parameter_gradient(&probe, data, loss)?;
        params[i] = base[i];
        for j in 0..p {
            matrix[(i, j)] = (plus[j] - minus[j]) / (2.0 * h);
        }
    }
    probe.set_params_flat(&base)?;
    // Symmetrize: H <- (H + H^T) / 2.
    let transpose = matrix.transpose();
    matrix = (matrix + transpose) * 0.5;
    Ok(matrix)
}

/// First-order influence prediction: up-weighting `z_poison`'s loss term by
/// a factor (1 + epsilon) in the training sum moves the minimizer by about
/// -(epsilon / n) H^{-1} grad(z_poison), with H the mean-loss Hessian.
/// Requires the network to sit at a local minimum (mean gradient norm
/// <= 1e-5). Near-singular Hessians fall back to a ridge solve.
pub fn influence_shift(
    net: &Network,
    data: &[Sample],
    loss: &LossKind,
    request: &InfluenceRequest,
) -> Result<InfluenceReport> {
    let grad_norm = l2_norm(&parameter_gradient(net, data, loss)?);
    if grad_norm > 1e-5 {
        return Err(Error::Precondition(format!(
            "network is not at a minimum: gradient norm {grad_norm:.3e} > 1e-5"
        )));
    }
    let h = hessian(net, data, loss)?;
    let condition = condition_number(&h);

    let (x, y) = &request.z_poison;
    let (_, poison_grad) = sample_loss_and_gradient(net, x, *y, loss)?;
    let scale = -request.epsilon / data.len() as f64;
    let rhs = DVector::from_iterator(poison_grad.len(), poison_grad.iter().map(|g| g * scale));

    let solved = if condition.is_finite() && condition < CONDITION_LIMIT {
        h.clone().lu().solve(&rhs)
    } else {
        None
    };
    let delta = match solved {
        Some(d) => d,
        None => {
            // Ridge fallback for flat or ill-conditioned curvature.
            let p = h.nrows();
            let ridged = h + DMatrix::identity(p, p) * HESSIAN_RIDGE;
            ridged
                .lu()
                .solve(&rhs)
                .ok_or_else(|| Error::SolveFailed("singular even with ridge".into()))?
        }
    };
    Ok(InfluenceReport {
        delta_theta: delta.iter().copied().collect(),
        hessian_condition: condition,
    })
}

/// Ratio of extreme absolute eigenvalues of a symmetric matrix.
fn condition_number(h: &DMatrix<f64>) -> f64 {
    let eigenvalues = h.clone().symmetric_eigen().eigenvalues;
    let mut max = 0.0f64;
    let mut min = f64::INFINITY;
    for v in eigenvalues.iter() {
        let a = v.abs();
        max = max.max(a);
        min = min.min(a);
    }
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// A backdoor pattern with a hard visibility bound: the pattern norm may
/// never exceed `epsilon_vis`, checked at construction and again at every
/// application.
#[derive(Debug, Clone, PartialEq)]
pub struct Trigger {
    pub pattern: Tensor,
    pub epsilon_vis: f64,
    pub norm: Norm,
    pub target: usize,
}

impl Trigger {
    pub fn new(pattern: Tensor, epsilon_vis: f64, norm: Norm, target: usize) -> Result<Self> {
        if epsilon_vis <= 0.0 {
            return Err(Error::Precondition("epsilon_vis must be positive".into()));
        }
        let trigger = Self {
            pattern,
            epsilon_vis,
            norm,
            target,
        };
        trigger.check_visibility()?;
        Ok(trigger)
    }

    pub fn pattern_norm(&self) -> f64 {
        match self.norm {
            Norm::L2 => l2_norm(self.pattern.data()),
            Norm::Linf => linf_norm(self.pattern.data()),
        }
    }

    fn check_visibility(&self) -> Result<()> {
        let norm = self.pattern_norm();
        if norm > self.epsilon_vis {
            return Err(Error::VisibilityBound {
                norm,
                bound: self.epsilon_vis,
            });
        }
        Ok(())
    }
}

/// Who produced a training sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    /// Original, untouched sample.
    Pristine,
    /// Crafted sample whose label matches the crafting model's prediction.
    CleanLabel,
    /// Triggered sample relabeled to the attacker's target.
    DirtyLabel,
}

impl Provenance {
    pub fn as_str(&self) -> &'static str {
        match self {
            Provenance::Pristine => "pristine",
            Provenance::CleanLabel => "clean",
            Provenance::DirtyLabel => "dirty",
        }
    }

    pub fn parse(token: &str) -> Result<Self> {
        match token {
            "pristine" => Ok(Provenance::Pristine),
            "clean" => Ok(Provenance::CleanLabel),
            "dirty" => Ok(Provenance::DirtyLabel),
            other => Err(Error::Unknown {
                what: "provenance",
                name: other.into(),
            }),
        }
    }
}

/// A crafted poison sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PoisonSample {
    pub x_p: Tensor,
    pub y_p: usize,
    pub provenance: Provenance,
}

impl PoisonSample {
    /// Re-checks the clean-label certificate against a crafting model.
    pub fn verify_clean_label(&self, net: &Network) -> Result<bool> {
        let trace = forward(net, &self.x_p)?;
        Ok(argmax(&trace.logits) == self.y_p)
    }
}

/// Adds the trigger pattern and clips back into the unit box. The
/// visibility bound is re-checked first and violations are rejected.
pub fn apply_trigger(x: &Tensor, trigger: &Trigger) -> Result<Tensor> {
    if x.shape() != trigger.pattern.shape() {
        return Err(Error::ShapeMismatch {
            shape: x.shape().to_vec(),
            expected: x.len(),
            actual: trigger.pattern.len(),
        });
    }
    trigger.check_visibility()?;
    let data: Vec<f64> = x
        .data()
        .iter()
        .zip(trigger.pattern.data())
        .map(|(a, b)| (a + b).clamp(0.0, 1.0))
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Feature-collision crafting: descends the base input toward the centroid
/// of the target class's penultimate representations while staying within
/// epsilon_vis (Linf) of the base, and rejects the craft if the result is
/// no longer classified as its own label.
pub fn craft_clean_label(
    net: &Network,
    base: &Sample,
    trigger: &Trigger,
    target_examples: &[Tensor],
    steps: usize,
    step_size: f64,
) -> Result<PoisonSample> {
    let (x0, y0) = base;
    let trace = forward(net, x0)?;
    if argmax(&trace.logits) != *y0 {
        return Err(Error::Precondition(
            "clean-label base must be correctly classified".into(),
        ));
    }
    if target_examples.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if step_size <= 0.0 {
        return Err(Error::Precondition("step_size must be positive".into()));
    }

    // Anchor: centroid of the target-class penultimate representations,
    // recomputed per craft.
    let mut anchor = vec![0.0; net.penultimate_features(&target_examples[0])?.len()];
    for example in target_examples {
        for (a, f) in anchor.iter_mut().zip(net.penultimate_features(example)?) {
            *a += f;
        }
    }
    for a in anchor.iter_mut() {
        *a /= target_examples.len() as f64;
    }

    let eps = trigger.epsilon_vis;
    let mut current = x0.clone();
    for _ in 0..steps {
        let features = net.penultimate_features(&current)?;
        // Gradient of 0.5 * ||phi(x) - anchor||^2 in feature space.
        let seed: Vec<f64> = features.iter().zip(&anchor).map(|(f, a)| f - a).collect();
        let grad = net.penultimate_vjp(&current, &seed)?;
        let stepped: Vec<f64> = current
            .data()
            .iter()
            .zip(&grad)
            .enumerate()
            .map(|(i, (c, g))| {
                (c - step_size * g)
                    .clamp(x0.data()[i] - eps, x0.data()[i] + eps)
                    .clamp(0.0, 1.0)
            })
            .collect();
        current = Tensor::new(x0.shape().to_vec(), stepped)?;
    }

    let crafted_class = argmax(&forward(net, &current)?.logits);
    if crafted_class != *y0 {
        return Err(Error::CraftingFailed(format!(
            "crafted sample drifted to class {crafted_class}, label is {y0}"
        )));
    }
    Ok(PoisonSample {
        x_p: current,
        y_p: *y0,
        provenance: Provenance::CleanLabel,
    })
}

/// Clean accuracy on the raw test set, and the rate at which triggered
/// non-target-class inputs are classified as the trigger's target.
pub fn backdoor_eval(net: &Network, test: &[Sample], trigger: &Trigger) -> Result<(f64, f64)> {
    if test.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut correct = 0usize;
    let mut non_target = 0usize;
    let mut hit_target = 0usize;
    for (x, y) in test {
        let clean = argmax(&forward(net, x)?.logits);
        if clean == *y {
            correct += 1;
        }
        if *y != trigger.target {
            non_target += 1;
            let triggered = apply_trigger(x, trigger)?;
            if argmax(&forward(net, &triggered)?.logits) == trigger.target {
                hit_target += 1;
            }
        }
    }
    let clean_accuracy = correct as f64 / test.len() as f64;
    let triggered_target_rate = if non_target == 0 {
        0.0
    } else {
        hit_target as f64 / non_target as f64
    };
    Ok((clean_accuracy, triggered_target_rate))
}

/// Removes the ceil(remove_fraction * n) samples with the highest
/// per-sample loss under `net`; ties break toward the lower original index.
pub fn sanitize_loss_outliers(
    net: &Network,
    data: &[Sample],
    loss: &LossKind,
    remove_fraction: f64,
) -> Result<Vec<Sample>> {
    if !(0.0..1.0).contains(&remove_fraction) {
        return Err(Error::Precondition(
            "remove_fraction must be in [0, 1)".into(),
        ));
    }
    let remove = (remove_fraction * data.len() as f64).ceil() as usize;
    if remove == 0 {
        return Ok(data.to_vec());
    }
    let mut scored: Vec<(usize, f64)> = Vec::with_capacity(data.len());
    for (i, (x, y)) in data.iter().enumerate() {
        let trace = forward(net, x)?;
        scored.push((i, loss.value(&trace.logits, *y)));
    }
    // Highest loss first; equal losses drop the earlier index first.
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let mut removed: Vec<usize> = scored[..remove].iter().map(|(i, _)| *i).collect();
    removed.sort_unstable();
    let mut kept = Vec::with_capacity(data.len() - remove);
    let mut cursor = 0;
    for (i, sample) in data.iter().enumerate() {
        if cursor < removed.len() && removed[cursor] == i {
            cursor += 1;
        } else {
            kept.push(sample.clone());
        }
    }
    Ok(kept)
}

/// Differentially private SGD: per-sample gradients are clipped to an L2
/// norm of `clip_norm`, averaged (batches are single samples here),
/// perturbed with Gaussian noise of standard deviation
/// `noise_multiplier * clip_norm / batch_size`, and applied. With zero
/// noise and a clip above every gradient norm the trajectory is
/// bit-identical to [`crate::net::train_sgd`].
pub fn dp_train(
    net: &Network,
    data: &[Sample],
    epochs: usize,
    learning_rate: f64,
    clip_norm: f64,
    noise_multiplier: f64,
    seed: u64,
) -> Result<Network> {
    if clip_norm <= 0.0 {
        return Err(Error::Precondition("clip_norm must be positive".into()));
    }
    if noise_multiplier < 0.0 {
        return Err(Error::Precondition(
            "noise_multiplier must be non-negative".into(),
        ));
    }
    let mut noise_rng = ChaCha8Rng::seed_from_u64(crate::substream(seed, "dp-noise"));
    let sigma = noise_multiplier * clip_norm; // batch size is 1
    let normal = if sigma > 0.0 {
        Some(Normal::new(0.0, sigma).map_err(|e| Error::Precondition(e.to_string()))?)
    } else {
        None
    };
    sgd_with(net, data, epochs, learning_rate, seed, |net, x, y, _| {
        let (loss_value, mut grad) = sample_loss_and_gradient(net, x, y, &LossKind::CrossEntropy)?;
        let norm = l2_norm(&grad);
        let scale = if norm > clip_norm {
            clip_norm / norm
        } else {
            1.0
        };
        for g in grad.iter_mut() {
            *g *= scale;
        }
        if let Some(dist) = &normal {
            for g in grad.iter_mut() {
                *g += dist.sample(&mut noise_rng);
            }
        }
        Ok((loss_value, grad))
    })
}
