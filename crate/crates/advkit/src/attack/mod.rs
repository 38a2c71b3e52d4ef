//! Evasion attacks and the types they share.
//!
//! White-box attacks (FGSM, adaptive-step PGD, Carlini-Wagner L2) live in
//! [`whitebox`]; query-based and transfer attacks in [`blackbox`]. All
//! attacks operate on the unit box [0,1]^d and report results through
//! [`AttackResult`], whose success flag is always recomputed from a fresh
//! forward pass.

pub mod blackbox;
pub mod whitebox;

use crate::net::GradientModel;
use crate::tensor::{l2_norm, linf_norm, sub, Tensor};

/// Perturbation norm choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Norm {
    L2,
    Linf,
}

impl std::fmt::Display for Norm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Norm::L2 => write!(f, "l2"),
            Norm::Linf => write!(f, "linf"),
        }
    }
}

/// A norm ball of radius epsilon around the original input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbationBudget {
    pub norm: Norm,
    pub epsilon: f64,
}

impl PerturbationBudget {
    pub fn new(norm: Norm, epsilon: f64) -> Self {
        assert!(epsilon >= 0.0, "epsilon must be non-negative");
        Self { norm, epsilon }
    }

    pub fn linf(epsilon: f64) -> Self {
        Self::new(Norm::Linf, epsilon)
    }

    pub fn l2(epsilon: f64) -> Self {
        Self::new(Norm::L2, epsilon)
    }

    /// Norm of a perturbation vector under this budget's norm.
    pub fn norm_of(&self, delta: &[f64]) -> f64 {
        match self.norm {
            Norm::L2 => l2_norm(delta),
            Norm::Linf => linf_norm(delta),
        }
    }
}

/// Attack goal: any misclassification, or a specific class with a
/// confidence margin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TargetSpec {
    Untargeted,
    Targeted { target: usize, kappa: f64 },
}

/// Outcome of one attack invocation.
///
/// `perturbation_norm` is the declared norm of `adversarial - original`,
/// recomputed after the attack loop. `final_loss` is the attack objective
/// at the returned iterate (higher is better for the attacker).
#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult {
    pub adversarial: Tensor,
    pub success: bool,
    pub iterations: usize,
    pub perturbation_norm: f64,
    pub final_loss: f64,
}

/// Projects `candidate` onto the intersection-ish of the budget ball around
/// `origin` and the unit box: norm-ball projection first, then box clip.
/// The composition is not an exact joint projection for L2, but the result
/// always satisfies both constraints, and points already satisfying both
/// come back unchanged.
pub fn project(candidate: &Tensor, origin: &Tensor, budget: &PerturbationBudget) -> Tensor {
    assert_eq!(candidate.shape(), origin.shape(), "shape mismatch");
    let eps = budget.epsilon;
    let data = match budget.norm {
        Norm::Linf => candidate
            .data()
            .iter()
            .zip(origin.data())
            .map(|(&c, &o)| c.clamp(o - eps, o + eps).clamp(0.0, 1.0))
            .collect::<Vec<f64>>(),
        Norm::L2 => {
            let mut delta = sub(candidate.data(), origin.data());
            let norm = l2_norm(&delta);
            if norm > eps {
                let scale = eps / norm;
                for d in delta.iter_mut() {
                    *d *= scale;
                }
            }
            origin
                .data()
                .iter()
                .zip(&delta)
                .map(|(o, d)| (o + d).clamp(0.0, 1.0))
                .collect()
        }
    };
    Tensor::new(candidate.shape().to_vec(), data).expect("projection preserves finiteness")
}

/// Ascent direction for a gradient under the budget's geometry: the sign
/// vector for Linf, the normalized gradient for L2. Zero gradients map to
/// the zero direction.
pub(crate) fn ascent_direction(gradient: &[f64], norm: Norm) -> Vec<f64> {
    match norm {
        Norm::Linf => gradient.iter().map(|&g| sign(g)).collect(),
        Norm::L2 => {
            let n = l2_norm(gradient);
            if n == 0.0 {
                vec![0.0; gradient.len()]
            } else {
                gradient.iter().map(|g| g / n).collect()
            }
        }
    }
}

/// Sign with sign(0) = 0, so a zero gradient moves nothing.
pub(crate) fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Fresh-forward-pass success check: untargeted wants the argmax to differ
/// from the label, targeted wants the Eq-style margin met (phi == -kappa).
pub(crate) fn recheck_success<M: GradientModel + ?Sized>(
    model: &M,
    adversarial: &Tensor,
    target: &TargetSpec,
    label: usize,
) -> bool {
    let logits = model.logits(adversarial.data());
    match target {
        TargetSpec::Untargeted => crate::tensor::argmax(&logits) != label,
        TargetSpec::Targeted { target, kappa } => {
            whitebox::phi_margin(&logits, *target, *kappa).expect("validated target index")
                <= -*kappa
        }
    }
}

/// Adaptive step-size state for the multiplicative PGD rule: grow the step
/// by 1.5 when the objective increased, shrink by 0.75 otherwise, clamped
/// to [alpha_min, alpha_max].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptiveStepState {
    pub alpha: f64,
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub previous_loss: f64,
}

impl AdaptiveStepState {
    pub fn new(alpha0: f64, alpha_min: f64, alpha_max: f64, initial_loss: f64) -> Self {
        assert!(alpha_min <= alpha_max);
        Self {
            alpha: alpha0.clamp(alpha_min, alpha_max),
            alpha_min,
            alpha_max,
            previous_loss: initial_loss,
        }
    }

    /// Feeds the objective value observed after a step and updates alpha.
    pub fn observe(&mut self, loss: f64) {
        if loss > self.previous_loss {
            self.alpha = (self.alpha * 1.5).min(self.alpha_max);
        } else {
            self.alpha = (self.alpha * 0.75).max(self.alpha_min);
        }
        self.previous_loss = loss;
    }
}
