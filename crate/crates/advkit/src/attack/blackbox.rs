//! Query-based and transfer attacks: finite-difference gradient estimation,
//! ZOO-style projected ascent, decision-boundary walking, momentum FGSM,
//! logit ensembles, and the joint-misclassification transfer metric.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::attack::{
    ascent_direction, project, recheck_success, sign, AdaptiveStepState, AttackResult, Norm,
    PerturbationBudget, TargetSpec,
};
use crate::error::{Error, Result};
use crate::net::{GradientModel, LossKind, Network};
use crate::tensor::{argmax, l1_norm, l2_norm, sub, Tensor};

/// What a query oracle reveals per evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Access {
    /// Full logit vector per query.
    Score,
    /// Predicted class only.
    Decision,
}

/// An opaque input -> output evaluation capability with an exact query
/// counter. Attacks never see model internals through it; each evaluation,
/// score or decision, increments the counter by exactly one.
pub struct QueryOracle<'a> {
    eval: Box<dyn FnMut(&[f64]) -> Vec<f64> + 'a>,
    access: Access,
    queries: u64,
}

impl<'a> QueryOracle<'a> {
    pub fn from_network(net: &'a Network, access: Access) -> Self {
        Self::from_fn(move |x| GradientModel::logits(net, x), access)
    }

    pub fn from_model<M: GradientModel + ?Sized>(model: &'a M, access: Access) -> Self {
        Self::from_fn(move |x| model.logits(x), access)
    }

    /// Wraps an arbitrary logit function, e.g. a lookup table in tests.
    pub fn from_fn<F: FnMut(&[f64]) -> Vec<f64> + 'a>(eval: F, access: Access) -> Self {
        Self {
            eval: Box::new(eval),
            access,
            queries: 0,
        }
    }

    pub fn access(&self) -> Access {
        self.access
    }

    /// Number of evaluations performed so far.
    pub fn queries(&self) -> u64 {
        self.queries
    }

    /// Full scores; requires score access.
    pub fn scores(&mut self, x: &[f64]) -> Result<Vec<f64>> {
        if self.access != Access::Score {
            return Err(Error::ScoreAccessRequired);
        }
        self.queries += 1;
        Ok((self.eval)(x))
    }

    /// Predicted class; available at either access level.
    pub fn decide(&mut self, x: &[f64]) -> usize {
        self.queries += 1;
        argmax(&(self.eval)(x))
    }
}

/// Finite-difference configuration: probe step and query allowance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FDConfig {
    pub delta: f64,
    /// Maximum number of estimation queries for the call.
    pub budget: u64,
}

/// Forward-difference gradient estimate of a scalar function, sharing one
/// base evaluation across all coordinates (d + 1 evaluations total).
pub fn fd_estimate<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], delta: f64) -> Vec<f64> {
    let base = f(x);
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + delta;
        grad[i] = (f(&probe) - base) / delta;
        probe[i] = x[i];
    }
    grad
}

/// Forward-difference estimate of the loss gradient through a score oracle.
/// Consumes exactly d + 1 queries; an exhausted budget yields an error
/// carrying the coordinates completed so far.
pub fn fd_gradient(
    oracle: &mut QueryOracle,
    x: &Tensor,
    loss: &LossKind,
    label: usize,
    config: &FDConfig,
) -> Result<Tensor> {
    if config.delta <= 0.0 {
        return Err(Error::Precondition("fd delta must be positive".into()));
    }
    let d = x.len();
    let mut used = 0u64;
    let spend = |used: &mut u64, completed: usize, partial: &[f64]| -> Result<()> {
        if *used >= config.budget {
            return Err(Error::QueryBudgetExhausted {
                completed,
                total: d,
                partial: partial.to_vec(),
            });
        }
        *used += 1;
        Ok(())
    };

    spend(&mut used, 0, &[])?;
    let base = loss.value(&oracle.scores(x.data())?, label);
    let mut grad = Vec::with_capacity(d);
    let mut probe = x.data().to_vec();
    for i in 0..d {
        spend(&mut used, i, &grad)?;
        probe[i] = x.data()[i] + config.delta;
        let value = loss.value(&oracle.scores(&probe)?, label);
        grad.push((value - base) / config.delta);
        probe[i] = x.data()[i];
    }
    Tensor::vector(grad)
}

/// Central-difference variant (2d queries), for accuracy comparisons.
pub fn fd_gradient_central(
    oracle: &mut QueryOracle,
    x: &Tensor,
    loss: &LossKind,
    label: usize,
    delta: f64,
) -> Result<Tensor> {
    if delta <= 0.0 {
        return Err(Error::Precondition("fd delta must be positive".into()));
    }
    let mut grad = Vec::with_capacity(x.len());
    let mut probe = x.data().to_vec();
    for i in 0..x.len() {
        probe[i] = x.data()[i] + delta;
        let plus = loss.value(&oracle.scores(&probe)?, label);
        probe[i] = x.data()[i] - delta;
        let minus = loss.value(&oracle.scores(&probe)?, label);
        probe[i] = x.data()[i];
        grad.push((plus - minus) / (2.0 * delta));
    }
    Tensor::vector(grad)
}

/// ZOO-style attack: per step, one shared base evaluation plus one forward
/// probe per coordinate, then a projected ascent step whose size follows
/// the same multiplicative rule as PGD (seeded from epsilon / 4). The last
/// iterate is returned; `final_loss` is the objective at the most recently
/// evaluated point. Estimation queries stay within `fd.budget`; the final
/// success check always costs one extra query, so the total is at most
/// `fd.budget + 1`, and `fd.budget = 0` returns the input unchanged.
pub fn zoo_attack(
    oracle: &mut QueryOracle,
    x: &Tensor,
    label: usize,
    budget: &PerturbationBudget,
    fd: &FDConfig,
    steps: usize,
) -> Result<AttackResult> {
    if fd.delta <= 0.0 {
        return Err(Error::Precondition("fd delta must be positive".into()));
    }
    let loss = LossKind::CrossEntropy;
    let d = x.len();
    let eps = budget.epsilon;
    let mut used = 0u64;
    let mut state: Option<AdaptiveStepState> = None;
    let mut current = x.clone();
    let mut last_objective = f64::NEG_INFINITY;
    let mut iterations = 0usize;

    for _ in 0..steps {
        if used + 1 > fd.budget {
            break;
        }
        used += 1;
        let base = loss.value(&oracle.scores(current.data())?, label);
        last_objective = base;
        match state.as_mut() {
            None => {
                state = Some(AdaptiveStepState::new(
                    eps / 4.0,
                    eps / 100.0,
                    eps,
                    base,
                ));
            }
            Some(s) => s.observe(base),
        }

        // Probe as many coordinates as the remaining budget allows;
        // unprobed coordinates keep a zero estimate.
        let mut grad = vec![0.0; d];
        let mut probe = current.data().to_vec();
        for (i, g) in grad.iter_mut().enumerate() {
            if used >= fd.budget {
                break;
            }
            used += 1;
            probe[i] = current.data()[i] + fd.delta;
            let value = loss.value(&oracle.scores(&probe)?, label);
            *g = (value - base) / fd.delta;
            probe[i] = current.data()[i];
        }

        let alpha = state.as_ref().unwrap().alpha;
        let dir = ascent_direction(&grad, budget.norm);
        let stepped: Vec<f64> = current
            .data()
            .iter()
            .zip(&dir)
            .map(|(c, s)| c + alpha * s)
            .collect();
        current = project(&Tensor::new(x.shape().to_vec(), stepped)?, x, budget);
        iterations += 1;
    }

    // Evaluate the final iterate when the budget still allows it.
    if iterations > 0 && used + 1 <= fd.budget {
        used += 1;
        debug_assert!(used <= fd.budget);
        last_objective = loss.value(&oracle.scores(current.data())?, label);
    }

    // One final classification query, always performed and counted.
    let success = oracle.decide(current.data()) != label;
    Ok(AttackResult {
        perturbation_norm: budget.norm_of(&sub(current.data(), x.data())),
        success,
        iterations,
        final_loss: last_objective,
        adversarial: current,
    })
}

// Boundary-walk constants; the paper names the attack without parameters.
const BOUNDARY_ORTH_STEP: f64 = 0.1;
const BOUNDARY_CONTRACTION: f64 = 0.01;
const BOUNDARY_TARGET_RATE: f64 = 0.25;
const BOUNDARY_WINDOW: usize = 25;

/// Decision-only random walk from a misclassified starting point toward
/// the original input: per proposal an orthogonal jitter on the sphere
/// around x plus a contraction, accepted only when the point is still
/// misclassified and no farther than the current iterate. Step sizes adapt
/// toward a 25% acceptance rate.
pub fn boundary_attack(
    oracle: &mut QueryOracle,
    x: &Tensor,
    label: usize,
    init: &Tensor,
    steps: usize,
    seed: u64,
) -> Result<AttackResult> {
    boundary_attack_traced(oracle, x, label, init, steps, seed).map(|(r, _)| r)
}

/// As [`boundary_attack`], also returning the distances of accepted
/// iterates in order.
pub fn boundary_attack_traced(
    oracle: &mut QueryOracle,
    x: &Tensor,
    label: usize,
    init: &Tensor,
    steps: usize,
    seed: u64,
) -> Result<(AttackResult, Vec<f64>)> {
    if x.shape() != init.shape() {
        return Err(Error::ShapeMismatch {
            shape: x.shape().to_vec(),
            expected: x.len(),
            actual: init.len(),
        });
    }
    if oracle.decide(init.data()) == label {
        return Err(Error::InitNotMisclassified);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = x.len();
    let mut z = init.data().to_vec();
    let mut dist = l2_norm(&sub(&z, x.data()));
    let mut orth = BOUNDARY_ORTH_STEP;
    let mut contract = BOUNDARY_CONTRACTION;
    let mut window_accepts = 0usize;
    let mut window_proposals = 0usize;
    let mut accepted_distances = Vec::new();

    for _ in 0..steps {
        if dist == 0.0 {
            break;
        }
        let delta = sub(&z, x.data());
        let unit: Vec<f64> = delta.iter().map(|v| v / dist).collect();
        // Orthogonal jitter scaled to the current distance.
        let mut noise: Vec<f64> = (0..d)
            .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
            .collect();
        let along: f64 = noise.iter().zip(&unit).map(|(n, u)| n * u).sum();
        for (n, u) in noise.iter_mut().zip(&unit) {
            *n -= along * u;
        }
        let noise_norm = l2_norm(&noise);
        if noise_norm > 0.0 {
            let scale = orth * dist / noise_norm;
            for n in noise.iter_mut() {
                *n *= scale;
            }
        }
        // Back onto the sphere of the current radius, then contract.
        let v: Vec<f64> = delta.iter().zip(&noise).map(|(a, b)| a + b).collect();
        let vn = l2_norm(&v);
        if vn == 0.0 {
            continue;
        }
        let radius = dist * (1.0 - contract);
        let candidate: Vec<f64> = x
            .data()
            .iter()
            .zip(&v)
            .map(|(xi, vi)| (xi + vi * radius / vn).clamp(0.0, 1.0))
            .collect();
        let cand_dist = l2_norm(&sub(&candidate, x.data()));

        window_proposals += 1;
        if cand_dist <= dist && oracle.decide(&candidate) != label {
            z = candidate;
            dist = cand_dist;
            accepted_distances.push(dist);
            window_accepts += 1;
        }

        if window_proposals == BOUNDARY_WINDOW {
            let rate = window_accepts as f64 / window_proposals as f64;
            if rate > BOUNDARY_TARGET_RATE {
                contract = (contract * 1.5).min(0.5);
            } else {
                contract = (contract * 0.7).max(1e-4);
                orth = (orth * 0.9).max(1e-3);
            }
            window_accepts = 0;
            window_proposals = 0;
        }
    }

    let adversarial = Tensor::vector(z)?;
    let success = oracle.decide(adversarial.data()) != label;
    let result = AttackResult {
        perturbation_norm: dist,
        success,
        iterations: steps,
        final_loss: -dist,
        adversarial,
    };
    Ok((result, accepted_distances))
}

/// Momentum iterative FGSM: accumulates L1-normalized gradients with decay
/// `mu` and steps along the sign of the buffer with alpha = epsilon / steps.
pub fn mi_fgsm<M: GradientModel + ?Sized>(
    model: &M,
    x: &Tensor,
    label: usize,
    budget: &PerturbationBudget,
    steps: usize,
    mu: f64,
) -> Result<AttackResult> {
    if budget.norm != Norm::Linf {
        return Err(Error::WrongNorm {
            attack: "mi_fgsm",
            expected: Norm::Linf,
            actual: budget.norm,
        });
    }
    if steps < 1 {
        return Err(Error::Precondition("mi_fgsm needs steps >= 1".into()));
    }
    if mu < 0.0 {
        return Err(Error::Precondition("mu must be non-negative".into()));
    }
    if label >= model.num_classes() {
        return Err(Error::LabelOutOfRange {
            label,
            num_classes: model.num_classes(),
        });
    }
    let alpha = budget.epsilon / steps as f64;
    let mut buffer = vec![0.0; x.len()];
    let mut current = x.clone();
    for _ in 0..steps {
        let grad = model.loss_input_gradient(current.data(), &LossKind::CrossEntropy, label);
        let l1 = l1_norm(&grad);
        for (b, g) in buffer.iter_mut().zip(&grad) {
            *b = mu * *b + if l1 > 0.0 { g / l1 } else { 0.0 };
        }
        let stepped: Vec<f64> = current
            .data()
            .iter()
            .zip(&buffer)
            .map(|(c, b)| c + alpha * sign(*b))
            .collect();
        current = project(&Tensor::new(x.shape().to_vec(), stepped)?, x, budget);
    }
    let success = recheck_success(model, &current, &TargetSpec::Untargeted, label);
    let final_loss = LossKind::CrossEntropy.value(&model.logits(current.data()), label);
    Ok(AttackResult {
        perturbation_norm: budget.norm_of(&sub(current.data(), x.data())),
        success,
        iterations: steps,
        final_loss,
        adversarial: current,
    })
}

/// Uniform average of member logits; the gradient surface ensemble attacks
/// run against.
pub struct LogitEnsemble<'a> {
    members: &'a [Network],
}

impl<'a> LogitEnsemble<'a> {
    pub fn new(members: &'a [Network]) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let (d, k) = (members[0].input_dim(), members[0].num_classes());
        for (i, m) in members.iter().enumerate() {
            if m.input_dim() != d || m.num_classes() != k {
                return Err(Error::DimensionMismatch {
                    layer: i,
                    expected: d,
                    actual: m.input_dim(),
                });
            }
        }
        Ok(Self { members })
    }
}

impl GradientModel for LogitEnsemble<'_> {
    fn input_dim(&self) -> usize {
        self.members[0].input_dim()
    }

    fn num_classes(&self) -> usize {
        self.members[0].num_classes()
    }

    fn logits(&self, x: &[f64]) -> Vec<f64> {
        let mut acc = vec![0.0; self.num_classes()];
        for m in self.members {
            for (a, z) in acc.iter_mut().zip(GradientModel::logits(m, x)) {
                *a += z;
            }
        }
        let n = self.members.len() as f64;
        for a in acc.iter_mut() {
            *a /= n;
        }
        acc
    }

    fn input_vjp(&self, x: &[f64], seed: &[f64]) -> Vec<f64> {
        let mut acc = vec![0.0; self.input_dim()];
        for m in self.members {
            for (a, g) in acc.iter_mut().zip(m.input_vjp(x, seed)) {
                *a += g;
            }
        }
        let n = self.members.len() as f64;
        for a in acc.iter_mut() {
            *a /= n;
        }
        acc
    }
}

/// Untargeted adaptive PGD against the uniform logit average of `nets`.
pub fn ensemble_attack(
    nets: &[Network],
    x: &Tensor,
    label: usize,
    budget: &PerturbationBudget,
    steps: usize,
) -> Result<AttackResult> {
    let ensemble = LogitEnsemble::new(nets)?;
    crate::attack::whitebox::pgd_adaptive(
        &ensemble,
        x,
        &TargetSpec::Untargeted,
        label,
        budget,
        steps,
        budget.epsilon * crate::attack::whitebox::DEFAULT_ALPHA_FRACTION,
    )
}

/// Empirical transfer success: the fraction of adversarials misclassified
/// by BOTH oracles.
pub fn transfer_asr(
    source_adversarials: &[(Tensor, usize)],
    f: &mut QueryOracle,
    g: &mut QueryOracle,
) -> Result<f64> {
    if source_adversarials.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut jointly = 0usize;
    for (adv, label) in source_adversarials {
        let f_miss = f.decide(adv.data()) != *label;
        let g_miss = g.decide(adv.data()) != *label;
        if f_miss && g_miss {
            jointly += 1;
        }
    }
    Ok(jointly as f64 / source_adversarials.len() as f64)
}

/// A source x target grid of transfer success rates.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferReport {
    pub model_names: Vec<String>,
    /// Raw joint-misclassification rates, matrix[source][target].
    pub matrix: Vec<Vec<f64>>,
    /// Raw cells divided by the row's diagonal (0 when the diagonal is 0).
    pub normalized: Vec<Vec<f64>>,
    /// Per-cell sample counts.
    pub samples: Vec<Vec<usize>>,
}

impl TransferReport {
    pub fn validate(&self) -> Result<()> {
        let n = self.model_names.len();
        for grid in [&self.matrix, &self.normalized] {
            if grid.len() != n || grid.iter().any(|row| row.len() != n) {
                return Err(Error::Precondition("transfer matrix must be square".into()));
            }
            for row in grid {
                for &v in row {
                    if !(0.0..=1.0).contains(&v) {
                        return Err(Error::Precondition(format!(
                            "transfer cell {v} outside [0,1]"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::whitebox::pgd_adaptive;
    use crate::net::{input_gradient, Activation, DenseLayer};
    use crate::tensor::dot;
    use std::cell::RefCell;
    use std::collections::HashMap;

    fn ten(v: &[f64]) -> Tensor {
        Tensor::vector(v.to_vec()).unwrap()
    }

    #[test]
    fn fd_estimate_on_a_quadratic() {
        // f(x) = x^2 at x = 1 with delta 0.01: (1.01^2 - 1) / 0.01 = 2.01
        let g = fd_estimate(|x| x[0] * x[0], &[1.0], 0.01);
        assert!((g[0] - 2.01).abs() < 1e-10);
    }

    /// Affine losses have no truncation error, so the forward-difference
    /// estimate recovers the weights exactly.
    #[test]
    fn fd_gradient_is_exact_on_affine_losses() {
        // Margin loss with a huge kappa never clamps, so
        // L(x) = (w1 - w0) . x + (b1 - b0), a purely affine function.
        let layer = DenseLayer::new(
            2,
            2,
            vec![0.2, -0.4, 0.9, 0.3],
            vec![0.0, 0.1],
            Activation::Identity,
        )
        .unwrap();
        let net = Network::new(vec![layer]).unwrap();
        let loss = LossKind::LogitMargin {
            target: 0,
            kappa: 1e9,
        };
        let w = [0.9 - 0.2, 0.3 - (-0.4)];
        for delta in [1e-2, 1e-4, 1e-6] {
            let mut oracle = QueryOracle::from_network(&net, Access::Score);
            let g = fd_gradient(
                &mut oracle,
                &ten(&[0.3, 0.6]),
                &loss,
                0,
                &FDConfig { delta, budget: 100 },
            )
            .unwrap();
            for (gi, wi) in g.data().iter().zip(&w) {
                assert!((gi - wi).abs() < 1e-9, "{gi} vs {wi} at delta {delta}");
            }
        }
    }

    #[test]
    fn fd_gradient_consumes_exactly_d_plus_one_queries() {
        let net = Network::random(&[4, 6, 3], 1).unwrap();
        let mut oracle = QueryOracle::from_network(&net, Access::Score);
        fd_gradient(
            &mut oracle,
            &ten(&[0.1, 0.2, 0.3, 0.4]),
            &LossKind::CrossEntropy,
            0,
            &FDConfig {
                delta: 1e-5,
                budget: 5,
            },
        )
        .unwrap();
        assert_eq!(oracle.queries(), 5);
    }

    #[test]
    fn fd_gradient_reports_partial_progress_on_budget_exhaustion() {
        let net = Network::random(&[4, 6, 3], 1).unwrap();
        let mut oracle = QueryOracle::from_network(&net, Access::Score);
        let err = fd_gradient(
            &mut oracle,
            &ten(&[0.1, 0.2, 0.3, 0.4]),
            &LossKind::CrossEntropy,
            0,
            &FDConfig {
                delta: 1e-5,
                budget: 3,
            },
        )
        .unwrap_err();
        match err {
            Error::QueryBudgetExhausted {
                completed,
                total,
                partial,
            } => {
                assert_eq!(completed, 2);
                assert_eq!(total, 4);
                assert_eq!(partial.len(), 2);
            }
            other => panic!("unexpected error {other:?}"),
        }
        assert_eq!(oracle.queries(), 3);
    }

    #[test]
    fn fd_gradient_requires_score_access() {
        let net = Network::random(&[2, 2], 1).unwrap();
        let mut oracle = QueryOracle::from_network(&net, Access::Decision);
        let err = fd_gradient(
            &mut oracle,
            &ten(&[0.1, 0.2]),
            &LossKind::CrossEntropy,
            0,
            &FDConfig {
                delta: 1e-5,
                budget: 10,
            },
        )
        .unwrap_err();
        assert!(matches!(err, Error::ScoreAccessRequired));
    }

    #[test]
    fn fd_gradient_aligns_with_exact_gradient() {
        let net = Network::random(&[6, 12, 3], 9).unwrap();
        let x = ten(&[0.21, 0.83, 0.47, 0.66, 0.12, 0.95]);
        let exact = input_gradient(&net, &x, &LossKind::CrossEntropy, 1).unwrap();
        let mut oracle = QueryOracle::from_network(&net, Access::Score);
        let est = fd_gradient(
            &mut oracle,
            &x,
            &LossKind::CrossEntropy,
            1,
            &FDConfig {
                delta: 1e-4,
                budget: 100,
            },
        )
        .unwrap();
        let cos = dot(exact.data(), est.data()) / (l2_norm(exact.data()) * l2_norm(est.data()));
        assert!(cos >= 0.999, "cosine {cos}");
    }

    #[test]
    fn fd_error_shrinks_linearly_in_delta() {
        // Measure the constant at a coarse delta, then check the bound at a
        // finer one with a 2x safety factor.
        let net = Network::random(&[3, 10, 2], 13).unwrap();
        let x = ten(&[0.4, 0.3, 0.7]);
        let exact = input_gradient(&net, &x, &LossKind::CrossEntropy, 0).unwrap();
        let run = |delta: f64| {
            let mut oracle = QueryOracle::from_network(&net, Access::Score);
            let est = fd_gradient(
                &mut oracle,
                &x,
                &LossKind::CrossEntropy,
                0,
                &FDConfig { delta, budget: 100 },
            )
            .unwrap();
            est.data()
                .iter()
                .zip(exact.data())
                .map(|(e, g)| (e - g).abs())
                .fold(0.0f64, f64::max)
        };
        let coarse = 1e-3;
        let constant = run(coarse) / coarse;
        let fine = 1e-4;
        assert!(run(fine) <= 2.0 * constant * fine + 1e-12);
    }

    #[test]
    fn query_counter_matches_external_count() {
        let net = Network::random(&[3, 5, 2], 2).unwrap();
        let external = RefCell::new(0u64);
        let mut oracle = QueryOracle::from_fn(
            |x| {
                *external.borrow_mut() += 1;
                GradientModel::logits(&net, x)
            },
            Access::Score,
        );
        let x = ten(&[0.5, 0.5, 0.5]);
        let _ = zoo_attack(
            &mut oracle,
            &x,
            0,
            &PerturbationBudget::linf(0.1),
            &FDConfig {
                delta: 1e-5,
                budget: 40,
            },
            5,
        )
        .unwrap();
        assert_eq!(oracle.queries(), *external.borrow());
    }

    #[test]
    fn zoo_single_step_matches_single_pgd_step() {
        let net = Network::random(&[3, 8, 2], 6).unwrap();
        let x = ten(&[0.42, 0.58, 0.31]);
        let budget = PerturbationBudget::linf(0.1);
        let exact = input_gradient(&net, &x, &LossKind::CrossEntropy, 0).unwrap();
        assert!(
            exact.data().iter().all(|g| g.abs() > 1e-4),
            "test instance needs gradients away from zero"
        );
        let mut oracle = QueryOracle::from_network(&net, Access::Score);
        let z = zoo_attack(
            &mut oracle,
            &x,
            0,
            &budget,
            &FDConfig {
                delta: 1e-5,
                budget: 4,
            },
            1,
        )
        .unwrap();
        let p = pgd_adaptive(
            &net,
            &x,
            &TargetSpec::Untargeted,
            0,
            &budget,
            1,
            budget.epsilon / 4.0,
        )
        .unwrap();
        for (a, b) in z.adversarial.data().iter().zip(p.adversarial.data()) {
            assert!((a - b).abs() <= 1e-3, "{a} vs {b}");
        }
    }

    #[test]
    fn zoo_query_accounting_upper_bound() {
        let net = Network::random(&[4, 6, 2], 3).unwrap();
        let x = ten(&[0.3, 0.4, 0.5, 0.6]);
        let steps = 3;
        let k = 4; // full coordinate batches
        let mut oracle = QueryOracle::from_network(&net, Access::Score);
        let _ = zoo_attack(
            &mut oracle,
            &x,
            0,
            &PerturbationBudget::linf(0.1),
            &FDConfig {
                delta: 1e-5,
                budget: 1000,
            },
            steps,
        )
        .unwrap();
        assert!(oracle.queries() <= (steps as u64) * (k + 1) + 2);
    }

    #[test]
    fn zoo_with_zero_budget_returns_input() {
        let net = Network::random(&[2, 4, 2], 8).unwrap();
        let x = ten(&[0.5, 0.5]);
        let mut oracle = QueryOracle::from_network(&net, Access::Score);
        let r = zoo_attack(
            &mut oracle,
            &x,
            0,
            &PerturbationBudget::linf(0.1),
            &FDConfig {
                delta: 1e-5,
                budget: 0,
            },
            10,
        )
        .unwrap();
        assert_eq!(r.adversarial, x);
        assert_eq!(oracle.queries(), 1); // only the final classification
    }

    #[test]
    fn boundary_rejects_correctly_classified_init() {
        let net = Network::random(&[2, 6, 2], 5).unwrap();
        let x = ten(&[0.2, 0.8]);
        let label = GradientModel::predict(&net, x.data());
        let mut oracle = QueryOracle::from_network(&net, Access::Decision);
        let err = boundary_attack(&mut oracle, &x, label, &x, 10, 0).unwrap_err();
        assert!(matches!(err, Error::InitNotMisclassified));
    }

    /// Linear 2-class net (class 1 iff 2x - y > 0.3) with points on both
    /// sides: an attacked point x and a misclassified-relative-to-x init.
    fn boundary_instance() -> (Network, Tensor, usize, Tensor) {
        let layer = DenseLayer::new(
            2,
            2,
            vec![0.0, 0.0, 2.0, -1.0],
            vec![0.0, -0.3],
            Activation::Identity,
        )
        .unwrap();
        let net = Network::new(vec![layer]).unwrap();
        let x = ten(&[0.2, 0.7]);
        let init = ten(&[0.95, 0.1]);
        assert_eq!(GradientModel::predict(&net, x.data()), 0);
        assert_eq!(GradientModel::predict(&net, init.data()), 1);
        (net, x, 0, init)
    }

    #[test]
    fn boundary_zero_steps_returns_init() {
        let (net, x, label, init) = boundary_instance();
        let mut oracle = QueryOracle::from_network(&net, Access::Decision);
        let r = boundary_attack(&mut oracle, &x, label, &init, 0, 7).unwrap();
        assert_eq!(r.adversarial, init);
        assert!(r.success);
        assert_eq!(oracle.queries(), 2); // precondition check + fresh recheck
    }

    #[test]
    fn boundary_accepted_distances_are_non_increasing() {
        let (net, x, label, init) = boundary_instance();
        let mut oracle = QueryOracle::from_network(&net, Access::Decision);
        let (r, distances) =
            boundary_attack_traced(&mut oracle, &x, label, &init, 500, 3).unwrap();
        assert!(r.success);
        assert!(!distances.is_empty());
        for pair in distances.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-12);
        }
    }

    #[test]
    fn boundary_approaches_hyperplane_distance_on_linear_model() {
        // z1 - z0 = w.x + b with w = (2, -1), b = -0.3.
        let layer = DenseLayer::new(
            2,
            2,
            vec![0.0, 0.0, 2.0, -1.0],
            vec![0.0, -0.3],
            Activation::Identity,
        )
        .unwrap();
        let net = Network::new(vec![layer]).unwrap();
        let x = ten(&[0.2, 0.7]);
        let label = 0; // w.x + b = -1.0 + 0.3 + ... = 2*0.2 - 0.7 - 0.3 = -0.6 < 0
        let margin: f64 = 2.0 * 0.2 - 0.7 - 0.3;
        assert!(margin < 0.0);
        let true_distance = margin.abs() / (5.0f64).sqrt();
        let init = ten(&[0.95, 0.1]); // decidedly class 1
        assert_eq!(GradientModel::predict(&net, init.data()), 1);
        let mut oracle = QueryOracle::from_network(&net, Access::Decision);
        let r = boundary_attack(&mut oracle, &x, label, &init, 2000, 11).unwrap();
        assert!(r.success);
        assert!(
            r.perturbation_norm <= 2.0 * true_distance,
            "distance {} vs true {}",
            r.perturbation_norm,
            true_distance
        );
        assert!(r.perturbation_norm >= true_distance - 1e-9);
    }

    #[test]
    fn mi_fgsm_with_zero_momentum_is_iterative_fgsm() {
        let net = Network::random(&[3, 10, 2], 44).unwrap();
        let x = ten(&[0.3, 0.5, 0.7]);
        let budget = PerturbationBudget::linf(0.09);
        let steps = 6;
        let r = mi_fgsm(&net, &x, 0, &budget, steps, 0.0).unwrap();
        // Inline iterative FGSM with alpha = eps/steps.
        let alpha = budget.epsilon / steps as f64;
        let mut current = x.clone();
        for _ in 0..steps {
            let g = GradientModel::loss_input_gradient(
                &net,
                current.data(),
                &LossKind::CrossEntropy,
                0,
            );
            let stepped: Vec<f64> = current
                .data()
                .iter()
                .zip(&g)
                .map(|(c, gi)| c + alpha * sign(*gi))
                .collect();
            current = project(&Tensor::vector(stepped).unwrap(), &x, &budget);
        }
        assert_eq!(r.adversarial, current);
    }

    #[test]
    fn mi_fgsm_buffer_grows_linearly_under_constant_gradient() {
        // Affine model -> constant loss-gradient field for the margin loss;
        // with mu = 1 the buffer is k * g/||g||_1 after k steps, so each
        // step moves in the same direction.
        let layer = DenseLayer::new(
            2,
            2,
            vec![0.0, 0.0, 1.0, 2.0],
            vec![0.0, 0.0],
            Activation::Identity,
        )
        .unwrap();
        let net = Network::new(vec![layer]).unwrap();
        let x = ten(&[0.5, 0.5]);
        let budget = PerturbationBudget::linf(0.2);
        let steps = 4;
        let r = mi_fgsm(&net, &x, 0, &budget, steps, 1.0).unwrap();
        // Constant direction: every coordinate moved by the full epsilon in
        // the gradient's sign direction.
        let g = GradientModel::loss_input_gradient(&net, x.data(), &LossKind::CrossEntropy, 0);
        for (adv, (xi, gi)) in r.adversarial.data().iter().zip(x.data().iter().zip(&g)) {
            let expected = (xi + budget.epsilon * sign(*gi)).clamp(0.0, 1.0);
            assert!((adv - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn ensemble_of_one_matches_plain_pgd() {
        let net = Network::random(&[2, 8, 2], 61).unwrap();
        let x = ten(&[0.4, 0.6]);
        let budget = PerturbationBudget::linf(0.1);
        let e = ensemble_attack(std::slice::from_ref(&net), &x, 0, &budget, 10).unwrap();
        let p = pgd_adaptive(
            &net,
            &x,
            &TargetSpec::Untargeted,
            0,
            &budget,
            10,
            budget.epsilon * DEFAULT_ALPHA_FRACTION_TEST,
        )
        .unwrap();
        assert_eq!(e.adversarial, p.adversarial);
    }

    const DEFAULT_ALPHA_FRACTION_TEST: f64 = crate::attack::whitebox::DEFAULT_ALPHA_FRACTION;

    #[test]
    fn duplicated_ensemble_member_changes_nothing() {
        let net = Network::random(&[2, 8, 2], 62).unwrap();
        let x = ten(&[0.45, 0.55]);
        let single = LogitEnsemble::new(std::slice::from_ref(&net)).unwrap();
        let doubled_nets = vec![net.clone(), net.clone()];
        let doubled = LogitEnsemble::new(&doubled_nets).unwrap();
        assert_eq!(single.logits(x.data()), doubled.logits(x.data()));
        let seed = vec![1.0, -1.0];
        assert_eq!(
            single.input_vjp(x.data(), &seed),
            doubled.input_vjp(x.data(), &seed)
        );
    }

    #[test]
    fn ensemble_rejects_empty_and_mismatched_members() {
        assert!(LogitEnsemble::new(&[]).is_err());
        let a = Network::random(&[2, 4, 2], 1).unwrap();
        let b = Network::random(&[3, 4, 2], 2).unwrap();
        let nets = vec![a, b];
        assert!(LogitEnsemble::new(&nets).is_err());
    }

    #[test]
    fn transfer_asr_counts_joint_misclassification() {
        let advs = vec![(ten(&[0.0]), 0usize), (ten(&[1.0]), 0usize)];
        // f misclassifies everything; g only the first point.
        let mut f = QueryOracle::from_fn(|_| vec![0.0, 1.0], Access::Decision);
        let mut g = QueryOracle::from_fn(
            |x| if x[0] < 0.5 { vec![0.0, 1.0] } else { vec![1.0, 0.0] },
            Access::Decision,
        );
        assert_eq!(transfer_asr(&advs, &mut f, &mut g).unwrap(), 0.5);

        // g always correct -> asr 0.
        let mut f = QueryOracle::from_fn(|_| vec![0.0, 1.0], Access::Decision);
        let mut g = QueryOracle::from_fn(|_| vec![1.0, 0.0], Access::Decision);
        assert_eq!(transfer_asr(&advs, &mut f, &mut g).unwrap(), 0.0);

        // f == g behaviorally -> asr equals f's misclassification rate.
        let mut f = QueryOracle::from_fn(|_| vec![0.0, 1.0], Access::Decision);
        let mut g = QueryOracle::from_fn(|_| vec![0.0, 1.0], Access::Decision);
        assert_eq!(transfer_asr(&advs, &mut f, &mut g).unwrap(), 1.0);

        let mut f = QueryOracle::from_fn(|_| vec![0.0, 1.0], Access::Decision);
        let mut g = QueryOracle::from_fn(|_| vec![0.0, 1.0], Access::Decision);
        assert!(transfer_asr(&[], &mut f, &mut g).is_err());
    }

    /// Replacing the oracle's model with a behaviorally identical lookup
    /// table over the probed points leaves the attack result unchanged.
    #[test]
    fn blackbox_attacks_are_pure_over_oracle_behavior() {
        let net = Network::random(&[3, 8, 2], 23).unwrap();
        let x = ten(&[0.35, 0.65, 0.5]);
        let budget = PerturbationBudget::linf(0.12);
        let fd = FDConfig {
            delta: 1e-5,
            budget: 200,
        };

        // First run records every probed point.
        let log: RefCell<HashMap<Vec<u64>, Vec<f64>>> = RefCell::new(HashMap::new());
        let key = |x: &[f64]| -> Vec<u64> { x.iter().map(|v| v.to_bits()).collect() };
        let mut recording = QueryOracle::from_fn(
            |p| {
                let out = GradientModel::logits(&net, p);
                log.borrow_mut().insert(key(p), out.clone());
                out
            },
            Access::Score,
        );
        let first = zoo_attack(&mut recording, &x, 0, &budget, &fd, 8).unwrap();
        drop(recording);

        // Second run replays from the table alone.
        let table = log.into_inner();
        let mut replay = QueryOracle::from_fn(
            move |p| table.get(&key(p)).expect("point was probed before").clone(),
            Access::Score,
        );
        let second = zoo_attack(&mut replay, &x, 0, &budget, &fd, 8).unwrap();
        assert_eq!(first, second);
    }
}
