//! Gradient-based attacks with full model access: FGSM, adaptive-step PGD,
//! and the Carlini-Wagner L2 attack.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attack::{
    ascent_direction, project, recheck_success, sign, AdaptiveStepState, AttackResult, Norm,
    PerturbationBudget, TargetSpec,
};
use crate::error::{Error, Result};
use crate::net::{GradientModel, LossKind};
use crate::tensor::{l2_norm, sub, Tensor};

/// Default PGD step size as a fraction of epsilon when a caller does not
/// pick one explicitly.
pub const DEFAULT_ALPHA_FRACTION: f64 = 0.25;

/// The confidence-margin objective phi(x') = max(max_{j != t} Z_j - Z_t, -kappa).
/// Equals exactly -kappa iff the targeted margin is met or exceeded.
pub fn phi_margin(logits: &[f64], target: usize, kappa: f64) -> Result<f64> {
    if target >= logits.len() {
        return Err(Error::IndexOutOfRange {
            index: target,
            len: logits.len(),
        });
    }
    let mut best = f64::NEG_INFINITY;
    for (j, &z) in logits.iter().enumerate() {
        if j != target && z > best {
            best = z;
        }
    }
    Ok((best - logits[target]).max(-kappa))
}

/// Single-step sign attack along the loss gradient, Linf only.
pub fn fgsm<M: GradientModel + ?Sized>(
    model: &M,
    x: &Tensor,
    label: usize,
    budget: &PerturbationBudget,
) -> Result<AttackResult> {
    if budget.norm != Norm::Linf {
        return Err(Error::WrongNorm {
            attack: "fgsm",
            expected: Norm::Linf,
            actual: budget.norm,
        });
    }
    check_input(model, x, label)?;
    let grad = model.loss_input_gradient(x.data(), &LossKind::CrossEntropy, label);
    let stepped: Vec<f64> = x
        .data()
        .iter()
        .zip(&grad)
        .map(|(&xi, &g)| xi + budget.epsilon * sign(g))
        .collect();
    let adversarial = project(&Tensor::new(x.shape().to_vec(), stepped)?, x, budget);
    finalize(
        model,
        x,
        adversarial,
        &TargetSpec::Untargeted,
        label,
        budget,
        1,
        None,
    )
}

/// One recorded PGD iterate: the step size used and the objective reached.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PgdStep {
    pub alpha: f64,
    pub objective: f64,
}

/// Adaptive-step projected gradient ascent. Untargeted runs maximize the
/// cross-entropy loss; targeted runs maximize the negated margin objective.
/// The returned iterate is the best one seen, not the last.
pub fn pgd_adaptive<M: GradientModel + ?Sized>(
    model: &M,
    x: &Tensor,
    target: &TargetSpec,
    label: usize,
    budget: &PerturbationBudget,
    steps: usize,
    alpha0: f64,
) -> Result<AttackResult> {
    pgd_adaptive_traced(model, x, target, label, budget, steps, alpha0).map(|(r, _)| r)
}

/// As [`pgd_adaptive`], additionally returning the per-step trace of step
/// sizes and objective values.
pub fn pgd_adaptive_traced<M: GradientModel + ?Sized>(
    model: &M,
    x: &Tensor,
    target: &TargetSpec,
    label: usize,
    budget: &PerturbationBudget,
    steps: usize,
    alpha0: f64,
) -> Result<(AttackResult, Vec<PgdStep>)> {
    if steps < 1 {
        return Err(Error::Precondition("pgd needs steps >= 1".into()));
    }
    check_input(model, x, label)?;
    check_target(model, target)?;

    let objective = |logits: &[f64]| -> f64 { pgd_objective(logits, target, label) };
    let grad_objective = |point: &[f64]| -> Vec<f64> {
        match target {
            TargetSpec::Untargeted => {
                model.loss_input_gradient(point, &LossKind::CrossEntropy, label)
            }
            TargetSpec::Targeted { target, kappa } => {
                let loss = LossKind::LogitMargin {
                    target: *target,
                    kappa: *kappa,
                };
                let mut g = model.loss_input_gradient(point, &loss, label);
                for v in g.iter_mut() {
                    *v = -*v;
                }
                g
            }
        }
    };

    let eps = budget.epsilon;
    let initial_objective = objective(&model.logits(x.data()));
    let mut state = AdaptiveStepState::new(alpha0, eps / 100.0, eps, initial_objective);
    let mut current = x.clone();
    let mut best = (x.clone(), initial_objective);
    let mut trace = Vec::with_capacity(steps);
    for _ in 0..steps {
        let grad = grad_objective(current.data());
        let dir = ascent_direction(&grad, budget.norm);
        let stepped: Vec<f64> = current
            .data()
            .iter()
            .zip(&dir)
            .map(|(c, d)| c + state.alpha * d)
            .collect();
        let candidate = project(&Tensor::new(x.shape().to_vec(), stepped)?, x, budget);
        let obj = objective(&model.logits(candidate.data()));
        let alpha_used = state.alpha;
        state.observe(obj);
        trace.push(PgdStep {
            alpha: alpha_used,
            objective: obj,
        });
        if obj > best.1 {
            best = (candidate.clone(), obj);
        }
        current = candidate;
    }

    let result = finalize(model, x, best.0, target, label, budget, steps, Some(best.1))?;
    Ok((result, trace))
}

/// PGD restarted from seeded random points inside the budget ball; returns
/// the best run, preferring successful ones. Restart 0 starts at x itself.
pub fn pgd_with_restarts<M: GradientModel + ?Sized>(
    model: &M,
    x: &Tensor,
    target: &TargetSpec,
    label: usize,
    budget: &PerturbationBudget,
    steps: usize,
    alpha0: f64,
    restarts: usize,
    seed: u64,
) -> Result<AttackResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<AttackResult> = None;
    for restart in 0..restarts.max(1) {
        let start = if restart == 0 {
            x.clone()
        } else {
            let jitter: Vec<f64> = x
                .data()
                .iter()
                .map(|&xi| xi + rng.random_range(-budget.epsilon..=budget.epsilon))
                .collect();
            project(&Tensor::new(x.shape().to_vec(), jitter)?, x, budget)
        };
        let run = pgd_from(model, x, &start, target, label, budget, steps, alpha0)?;
        let better = match &best {
            None => true,
            Some(b) => (run.success, run.final_loss) > (b.success, b.final_loss),
        };
        if better {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// PGD whose first iterate is `start` rather than `x`; the projection ball
/// stays centered on `x`.
fn pgd_from<M: GradientModel + ?Sized>(
    model: &M,
    x: &Tensor,
    start: &Tensor,
    target: &TargetSpec,
    label: usize,
    budget: &PerturbationBudget,
    steps: usize,
    alpha0: f64,
) -> Result<AttackResult> {
    check_input(model, x, label)?;
    check_target(model, target)?;
    let eps = budget.epsilon;
    let initial = pgd_objective(&model.logits(start.data()), target, label);
    let mut state = AdaptiveStepState::new(alpha0, eps / 100.0, eps, initial);
    let mut current = start.clone();
    let mut best = (start.clone(), initial);
    for _ in 0..steps {
        let grad = match target {
            TargetSpec::Untargeted => {
                model.loss_input_gradient(current.data(), &LossKind::CrossEntropy, label)
            }
            TargetSpec::Targeted { target: t, kappa } => {
                let loss = LossKind::LogitMargin {
                    target: *t,
                    kappa: *kappa,
                };
                let mut g = model.loss_input_gradient(current.data(), &loss, label);
                for v in g.iter_mut() {
                    *v = -*v;
                }
                g
            }
        };
        let dir = ascent_direction(&grad, budget.norm);
        let stepped: Vec<f64> = current
            .data()
            .iter()
            .zip(&dir)
            .map(|(c, d)| c + state.alpha * d)
            .collect();
        let candidate = project(&Tensor::new(x.shape().to_vec(), stepped)?, x, budget);
        let obj = pgd_objective(&model.logits(candidate.data()), target, label);
        state.observe(obj);
        if obj > best.1 {
            best = (candidate.clone(), obj);
        }
        current = candidate;
    }
    finalize(model, x, best.0, target, label, budget, steps, Some(best.1))
}

fn pgd_objective(logits: &[f64], target: &TargetSpec, label: usize) -> f64 {
    match target {
        TargetSpec::Untargeted => LossKind::CrossEntropy.value(logits, label),
        TargetSpec::Targeted { target, kappa } => {
            -phi_margin(logits, *target, *kappa).expect("validated target index")
        }
    }
}

/// Carlini-Wagner L2 configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CWConfig {
    pub kappa: f64,
    pub c_initial: f64,
    pub binary_search_steps: usize,
    pub inner_iterations: usize,
    pub inner_learning_rate: f64,
}

impl Default for CWConfig {
    fn default() -> Self {
        Self {
            kappa: 0.0,
            c_initial: 1.0,
            binary_search_steps: 9,
            inner_iterations: 300,
            inner_learning_rate: 0.02,
        }
    }
}

/// Bounds for the Lagrange constant during the outer search.
const CW_C_MIN: f64 = 1e-3;
const CW_C_MAX: f64 = 1e6;

/// Carlini-Wagner L2 attack toward class `target`: minimizes
/// ||eta||_2^2 + c * phi(x + eta) by gradient descent on eta with box
/// projection, searching over c (halved on success, x10 on failure).
/// Returns the successful adversarial of smallest L2 norm across all
/// rounds; `final_loss` carries phi at the returned point.
pub fn cw_l2<M: GradientModel + ?Sized>(
    model: &M,
    x: &Tensor,
    target: usize,
    config: &CWConfig,
) -> Result<AttackResult> {
    if config.binary_search_steps < 1 || config.inner_iterations < 1 {
        return Err(Error::Precondition(
            "cw needs binary_search_steps >= 1 and inner_iterations >= 1".into(),
        ));
    }
    if config.c_initial <= 0.0 || config.inner_learning_rate <= 0.0 || config.kappa < 0.0 {
        return Err(Error::Precondition("invalid cw configuration".into()));
    }
    if x.len() != model.input_dim() {
        return Err(Error::DimensionMismatch {
            layer: 0,
            expected: model.input_dim(),
            actual: x.len(),
        });
    }
    if target >= model.num_classes() {
        return Err(Error::LabelOutOfRange {
            label: target,
            num_classes: model.num_classes(),
        });
    }

    let kappa = config.kappa;
    let margin_loss = LossKind::LogitMargin { target, kappa };
    let d = x.len();
    let mut c = config.c_initial.clamp(CW_C_MIN, CW_C_MAX);
    let mut best_success: Option<(Vec<f64>, f64)> = None; // (adversarial, l2 norm)
    let mut best_effort: (Vec<f64>, f64) = (x.data().to_vec(), f64::INFINITY); // min phi
    let mut iterations = 0usize;

    let consider = |point: &[f64], best_success: &mut Option<(Vec<f64>, f64)>,
                        best_effort: &mut (Vec<f64>, f64), phi: f64|
     -> bool {
        if phi < best_effort.1 {
            *best_effort = (point.to_vec(), phi);
        }
        if phi <= -kappa {
            let norm = l2_norm(&sub(point, x.data()));
            match best_success {
                Some((_, n)) if *n <= norm => {}
                _ => *best_success = Some((point.to_vec(), norm)),
            }
            true
        } else {
            false
        }
    };

    for _ in 0..config.binary_search_steps {
        let mut eta = vec![0.0; d];
        let mut round_success = false;
        for _ in 0..config.inner_iterations {
            let point: Vec<f64> = x.data().iter().zip(&eta).map(|(a, b)| a + b).collect();
            let logits = model.logits(&point);
            let phi = phi_margin(&logits, target, kappa)?;
            round_success |= consider(&point, &mut best_success, &mut best_effort, phi);

            let phi_grad = model.loss_input_gradient(&point, &margin_loss, target);
            for i in 0..d {
                eta[i] -= config.inner_learning_rate * (2.0 * eta[i] + c * phi_grad[i]);
            }
            // Keep x + eta inside the unit box.
            for i in 0..d {
                let clipped = (x.data()[i] + eta[i]).clamp(0.0, 1.0);
                eta[i] = clipped - x.data()[i];
            }
            iterations += 1;
        }
        // Evaluate the round's final iterate too.
        let point: Vec<f64> = x.data().iter().zip(&eta).map(|(a, b)| a + b).collect();
        let phi = phi_margin(&model.logits(&point), target, kappa)?;
        round_success |= consider(&point, &mut best_success, &mut best_effort, phi);

        c = if round_success {
            (c / 2.0).max(CW_C_MIN)
        } else {
            (c * 10.0).min(CW_C_MAX)
        };
    }

    let chosen = match &best_success {
        Some((adv, _)) => adv.clone(),
        None => best_effort.0.clone(),
    };
    let adversarial = Tensor::new(x.shape().to_vec(), chosen)?;
    let logits = model.logits(adversarial.data());
    let phi = phi_margin(&logits, target, kappa)?;
    Ok(AttackResult {
        success: phi <= -kappa,
        perturbation_norm: l2_norm(&sub(adversarial.data(), x.data())),
        final_loss: phi,
        iterations,
        adversarial,
    })
}

fn check_input<M: GradientModel + ?Sized>(model: &M, x: &Tensor, label: usize) -> Result<()> {
    if x.len() != model.input_dim() {
        return Err(Error::DimensionMismatch {
            layer: 0,
            expected: model.input_dim(),
            actual: x.len(),
        });
    }
    if label >= model.num_classes() {
        return Err(Error::LabelOutOfRange {
            label,
            num_classes: model.num_classes(),
        });
    }
    Ok(())
}

fn check_target<M: GradientModel + ?Sized>(model: &M, target: &TargetSpec) -> Result<()> {
    if let TargetSpec::Targeted { target, kappa } = target {
        if *target >= model.num_classes() {
            return Err(Error::LabelOutOfRange {
                label: *target,
                num_classes: model.num_classes(),
            });
        }
        if *kappa < 0.0 {
            return Err(Error::Precondition("kappa must be non-negative".into()));
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn finalize<M: GradientModel + ?Sized>(
    model: &M,
    original: &Tensor,
    adversarial: Tensor,
    target: &TargetSpec,
    label: usize,
    budget: &PerturbationBudget,
    iterations: usize,
    objective: Option<f64>,
) -> Result<AttackResult> {
    let success = recheck_success(model, &adversarial, target, label);
    let final_loss = objective.unwrap_or_else(|| {
        pgd_objective(&model.logits(adversarial.data()), target, label)
    });
    Ok(AttackResult {
        perturbation_norm: budget.norm_of(&sub(adversarial.data(), original.data())),
        success,
        iterations,
        final_loss,
        adversarial,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{forward, Activation, DenseLayer, Network};
    use crate::tensor::argmax;

    fn ten(v: &[f64]) -> Tensor {
        Tensor::vector(v.to_vec()).unwrap()
    }

    #[test]
    fn phi_margin_direct_arithmetic() {
        assert_eq!(phi_margin(&[2.0, 5.0, 1.0], 1, 2.0).unwrap(), -2.0);
        assert_eq!(phi_margin(&[2.0, 5.0, 1.0], 0, 0.0).unwrap(), 3.0);
        assert_eq!(phi_margin(&[4.0, 4.0], 0, 0.0).unwrap(), 0.0);
        assert!(phi_margin(&[1.0, 2.0], 5, 0.0).is_err());
    }

    #[test]
    fn fgsm_rejects_l2_budget() {
        let net = Network::random(&[2, 2], 1).unwrap();
        let err = fgsm(&net, &ten(&[0.5, 0.5]), 0, &PerturbationBudget::l2(0.1)).unwrap_err();
        assert!(matches!(err, Error::WrongNorm { attack: "fgsm", .. }));
    }

    #[test]
    fn fgsm_with_zero_epsilon_returns_input() {
        let net = Network::random(&[2, 2], 1).unwrap();
        let x = ten(&[0.3, 0.6]);
        let r = fgsm(&net, &x, 0, &PerturbationBudget::linf(0.0)).unwrap();
        assert_eq!(r.adversarial, x);
        let clean = argmax(&forward(&net, &x).unwrap().logits);
        assert_eq!(r.success, clean != 0);
        assert_eq!(r.perturbation_norm, 0.0);
    }

    /// 1-D logistic model: the closed-form gradient of the cross-entropy in
    /// x is (sigma(wx+b) - y) * w for the two-logit encoding [0, wx+b].
    #[test]
    fn fgsm_moves_along_the_closed_form_gradient_sign() {
        let w = 2.5;
        let layer = DenseLayer::new(1, 2, vec![0.0, w], vec![0.0, 0.0], Activation::Identity).unwrap();
        let net = Network::new(vec![layer]).unwrap();
        let x = ten(&[0.4]);
        // True label 1: loss decreases in x (w > 0), so the attack on label 1
        // pushes x down; on label 0 it pushes x up.
        let sigma = 1.0 / (1.0 + (-w * 0.4f64).exp());
        let grad_label1 = (sigma - 1.0) * w;
        assert!(grad_label1 < 0.0);
        let r = fgsm(&net, &x, 1, &PerturbationBudget::linf(0.1)).unwrap();
        assert!((r.adversarial.data()[0] - 0.3).abs() < 1e-12);
        let grad_label0 = sigma * w;
        assert!(grad_label0 > 0.0);
        let r = fgsm(&net, &x, 0, &PerturbationBudget::linf(0.1)).unwrap();
        assert!((r.adversarial.data()[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn single_step_pgd_with_alpha_epsilon_matches_fgsm() {
        let net = Network::random(&[3, 8, 3], 4).unwrap();
        let x = ten(&[0.2, 0.7, 0.4]);
        let budget = PerturbationBudget::linf(0.05);
        let f = fgsm(&net, &x, 1, &budget).unwrap();
        let (p, trace) = pgd_adaptive_traced(
            &net,
            &x,
            &TargetSpec::Untargeted,
            1,
            &budget,
            1,
            budget.epsilon,
        )
        .unwrap();
        // The single step increased the objective here, so the best iterate
        // is the stepped point and the trajectories coincide.
        assert!(trace[0].objective > LossKind::CrossEntropy.value(&net.logits(x.data()), 1));
        assert_eq!(p.adversarial, f.adversarial);
    }

    #[test]
    fn pgd_alpha_sequence_reproducible_from_loss_comparisons() {
        let net = Network::random(&[4, 10, 10, 3], 77).unwrap();
        let x = ten(&[0.3, 0.8, 0.2, 0.6]);
        let budget = PerturbationBudget::linf(0.08);
        let (result, trace) = pgd_adaptive_traced(
            &net,
            &x,
            &TargetSpec::Untargeted,
            0,
            &budget,
            25,
            0.02,
        )
        .unwrap();
        // Replay the step-size dynamics from the observed objectives.
        let initial = LossKind::CrossEntropy.value(&net.logits(x.data()), 0);
        let mut alpha = 0.02f64.clamp(budget.epsilon / 100.0, budget.epsilon);
        let mut prev = initial;
        for step in &trace {
            assert_eq!(step.alpha, alpha, "alpha sequence diverged");
            if step.objective > prev {
                alpha = (alpha * 1.5).min(budget.epsilon);
            } else {
                alpha = (alpha * 0.75).max(budget.epsilon / 100.0);
            }
            prev = step.objective;
        }
        // Best-iterate property: the reported objective dominates the trace.
        for step in &trace {
            assert!(result.final_loss >= step.objective);
        }
        assert!(result.final_loss >= initial);
    }

    #[test]
    fn pgd_respects_budget_and_box() {
        for seed in [1u64, 2, 3] {
            let net = Network::random(&[2, 12, 2], seed).unwrap();
            let x = ten(&[0.95, 0.1]);
            for budget in [PerturbationBudget::linf(0.1), PerturbationBudget::l2(0.15)] {
                let r = pgd_adaptive(
                    &net,
                    &x,
                    &TargetSpec::Untargeted,
                    0,
                    &budget,
                    15,
                    budget.epsilon / 4.0,
                )
                .unwrap();
                let delta = sub(r.adversarial.data(), x.data());
                assert!(budget.norm_of(&delta) <= budget.epsilon + 1e-12);
                assert!(r
                    .adversarial
                    .data()
                    .iter()
                    .all(|&v| (0.0..=1.0).contains(&v)));
                // Success honesty: flag equals a fresh forward-pass check.
                let fresh = argmax(&net.logits(r.adversarial.data())) != 0;
                assert_eq!(r.success, fresh);
            }
        }
    }

    #[test]
    fn targeted_pgd_success_implies_margin_met() {
        let net = Network::random(&[2, 16, 3], 12).unwrap();
        let x = ten(&[0.4, 0.5]);
        let target = TargetSpec::Targeted {
            target: 2,
            kappa: 0.5,
        };
        let r = pgd_adaptive(&net, &x, &target, 0, &PerturbationBudget::linf(0.4), 60, 0.05)
            .unwrap();
        if r.success {
            let phi = phi_margin(&net.logits(r.adversarial.data()), 2, 0.5).unwrap();
            assert_eq!(phi, -0.5);
        }
    }

    #[test]
    fn cw_returns_zero_perturbation_when_already_confidently_targeted() {
        // Logits [0, 3]: class 1 with margin 3 >= kappa 1.
        let layer =
            DenseLayer::new(1, 2, vec![0.0, 0.0], vec![0.0, 3.0], Activation::Identity).unwrap();
        let net = Network::new(vec![layer]).unwrap();
        let config = CWConfig {
            kappa: 1.0,
            ..CWConfig::default()
        };
        let r = cw_l2(&net, &ten(&[0.5]), 1, &config).unwrap();
        assert!(r.success);
        assert!(r.perturbation_norm <= 1e-6);
    }

    /// Linear binary classifier: the minimal L2 distance to flip the
    /// prediction is |w.x + b| / ||w||_2. CW should come within 5%.
    #[test]
    fn cw_approaches_the_hyperplane_distance() {
        // Logit difference z1 - z0 = w.x + b with w = (3, -2), b = -0.4.
        let layer = DenseLayer::new(
            2,
            2,
            vec![0.0, 0.0, 3.0, -2.0],
            vec![0.0, -0.4],
            Activation::Identity,
        )
        .unwrap();
        let net = Network::new(vec![layer]).unwrap();
        let x = ten(&[0.3, 0.6]);
        let margin: f64 = 3.0 * 0.3 - 2.0 * 0.6 - 0.4; // -0.7, classified as 0
        assert!(margin < 0.0);
        let true_distance = margin.abs() / (3.0f64 * 3.0 + 2.0 * 2.0).sqrt();
        let config = CWConfig {
            inner_iterations: 400,
            ..CWConfig::default()
        };
        let r = cw_l2(&net, &x, 1, &config).unwrap();
        assert!(r.success, "cw failed on a linear model");
        assert!(
            r.perturbation_norm <= true_distance * 1.05 + 1e-9,
            "norm {} vs distance {}",
            r.perturbation_norm,
            true_distance
        );
        assert!(r.perturbation_norm >= true_distance - 1e-9);
    }

    #[test]
    fn cw_norm_is_monotone_in_kappa() {
        // Linear model whose logit gap spans past 2 on the unit box, so the
        // kappa = 2 margin is reachable.
        let layer = DenseLayer::new(
            2,
            2,
            vec![0.0, 0.0, 3.0, -2.0],
            vec![0.0, -0.4],
            Activation::Identity,
        )
        .unwrap();
        let net = Network::new(vec![layer]).unwrap();
        let x = ten(&[0.35, 0.65]);
        let target = 1 - argmax(&net.logits(x.data()));
        let run = |kappa: f64| {
            cw_l2(
                &net,
                &x,
                target,
                &CWConfig {
                    kappa,
                    inner_iterations: 400,
                    ..CWConfig::default()
                },
            )
            .unwrap()
        };
        let r0 = run(0.0);
        let r2 = run(2.0);
        assert!(r0.success && r2.success, "both runs should succeed");
        assert!(
            r2.perturbation_norm >= r0.perturbation_norm - 1e-9,
            "{} vs {}",
            r2.perturbation_norm,
            r0.perturbation_norm
        );
    }

    #[test]
    fn cw_reports_failure_honestly() {
        // Constant classifier: no perturbation can change the argmax.
        let layer =
            DenseLayer::new(1, 2, vec![0.0, 0.0], vec![5.0, 0.0], Activation::Identity).unwrap();
        let net = Network::new(vec![layer]).unwrap();
        let r = cw_l2(
            &net,
            &ten(&[0.5]),
            1,
            &CWConfig {
                binary_search_steps: 3,
                inner_iterations: 20,
                ..CWConfig::default()
            },
        )
        .unwrap();
        assert!(!r.success);
        assert!(r.perturbation_norm.is_finite());
    }
}
