//! Batch experiment orchestration: attack suites, transfer matrices,
//! defense evaluation, certification reports, backdoor pipelines, and
//! report verification. Every run is deterministic given its master seed;
//! stages draw named substreams so they can be re-run independently.

use crate::attack::blackbox::{
    boundary_attack, mi_fgsm, transfer_asr, zoo_attack, Access, FDConfig, QueryOracle,
    TransferReport,
};
use crate::attack::whitebox::{cw_l2, fgsm, pgd_adaptive, CWConfig, DEFAULT_ALPHA_FRACTION};
use crate::attack::{AttackResult, Norm, PerturbationBudget, TargetSpec};
use crate::defense::{
    adversarial_train, ibp_certify, quantized_oracle, round_to_levels, smooth_certify,
    smooth_predict, AdvTrainConfig, BPDAConfig, BpdaModel, PreprocessedModel, QuantConfig,
    SmoothCertificate, SmoothPrediction, SmoothedClassifier,
};
use crate::error::{Error, Result};
use crate::io::DumpedExample;
use crate::net::{accuracy, train_sgd, GradientModel, Network, Sample};
use crate::poison::{apply_trigger, backdoor_eval, craft_clean_label, Provenance, Trigger};
use crate::report::{format_cell, ReportTable};
use crate::substream;
use crate::tensor::{sub, Tensor};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A parsed key=value configuration file. Lines are `key = value` (spaces
/// optional); `#` starts a comment.
#[derive(Debug, Clone, Default)]
pub struct KvConfig {
    entries: Vec<(String, String)>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.splitn(2, '=');
            let key = parts.next().unwrap_or("").trim();
            let value = parts
                .next()
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", idx + 1)))?
                .trim();
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", idx + 1)));
            }
            entries.push((key.to_string(), value.to_string()));
        }
        Ok(Self { entries })
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Self::parse(&text)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .rev()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn get_parsed<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse::<T>()
                .map(Some)
                .map_err(|_| Error::Config(format!("bad value for {key}: {raw:?}"))),
        }
    }
}

/// Shared attack knobs, fed from CLI flags and config files.
#[derive(Debug, Clone, Copy)]
pub struct AttackKnobs {
    pub epsilon: f64,
    pub norm: Norm,
    pub steps: usize,
    pub mu: f64,
    pub kappa: f64,
    pub cw_rounds: usize,
    pub cw_inner: usize,
    pub cw_lr: f64,
    pub zoo_budget: u64,
    pub fd_delta: f64,
    pub boundary_steps: usize,
    pub bpda_sigma: f64,
    pub bpda_samples: usize,
    pub rounding_levels: u32,
}

impl Default for AttackKnobs {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            norm: Norm::Linf,
            steps: 20,
            mu: 0.9,
            kappa: 0.0,
            cw_rounds: 8,
            cw_inner: 200,
            cw_lr: 0.02,
            zoo_budget: 2000,
            fd_delta: 1e-5,
            boundary_steps: 1000,
            bpda_sigma: 0.05,
            bpda_samples: 20,
            rounding_levels: 8,
        }
    }
}

/// One attack in a suite.
#[derive(Debug, Clone, PartialEq)]
pub enum AttackSpec {
    Fgsm,
    Pgd { steps: usize },
    MiFgsm { steps: usize, mu: f64 },
    Cw { config: CWConfig },
    Zoo { steps: usize, budget: u64, delta: f64 },
    Boundary { steps: usize },
    BpdaFgsm { sigma: f64, samples: usize },
}

impl AttackSpec {
    pub fn from_name(name: &str, knobs: &AttackKnobs) -> Result<Self> {
        match name {
            "fgsm" => Ok(AttackSpec::Fgsm),
            "pgd" => Ok(AttackSpec::Pgd { steps: knobs.steps }),
            "mi-fgsm" => Ok(AttackSpec::MiFgsm {
                steps: knobs.steps,
                mu: knobs.mu,
            }),
            "cw" => Ok(AttackSpec::Cw {
                config: CWConfig {
                    kappa: knobs.kappa,
                    c_initial: 1.0,
                    binary_search_steps: knobs.cw_rounds,
                    inner_iterations: knobs.cw_inner,
                    inner_learning_rate: knobs.cw_lr,
                },
            }),
            "zoo" => Ok(AttackSpec::Zoo {
                steps: knobs.steps,
                budget: knobs.zoo_budget,
                delta: knobs.fd_delta,
            }),
            "boundary" => Ok(AttackSpec::Boundary {
                steps: knobs.boundary_steps,
            }),
            "bpda-fgsm" => Ok(AttackSpec::BpdaFgsm {
                sigma: knobs.bpda_sigma,
                samples: knobs.bpda_samples,
            }),
            other => Err(Error::Unknown {
                what: "attack",
                name: other.into(),
            }),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AttackSpec::Fgsm => "fgsm",
            AttackSpec::Pgd { .. } => "pgd",
            AttackSpec::MiFgsm { .. } => "mi-fgsm",
            AttackSpec::Cw { .. } => "cw",
            AttackSpec::Zoo { .. } => "zoo",
            AttackSpec::Boundary { .. } => "boundary",
            AttackSpec::BpdaFgsm { .. } => "bpda-fgsm",
        }
    }
}

/// Per-point attack record plus query accounting.
struct PointOutcome {
    result: AttackResult,
    queries: u64,
}

/// Runs one attack against one point of a plain network. Black-box attacks
/// go through a fresh counting oracle; the CW target is the most likely
/// wrong class.
fn attack_point(
    net: &Network,
    spec: &AttackSpec,
    budget: &PerturbationBudget,
    x: &Tensor,
    label: usize,
    init_pool: &[Sample],
    seed: u64,
) -> Result<PointOutcome> {
    match spec {
        AttackSpec::Fgsm => Ok(PointOutcome {
            result: fgsm(net, x, label, budget)?,
            queries: 0,
        }),
        AttackSpec::Pgd { steps } => Ok(PointOutcome {
            result: pgd_adaptive(
                net,
                x,
                &TargetSpec::Untargeted,
                label,
                budget,
                *steps,
                budget.epsilon * DEFAULT_ALPHA_FRACTION,
            )?,
            queries: 0,
        }),
        AttackSpec::MiFgsm { steps, mu } => Ok(PointOutcome {
            result: mi_fgsm(net, x, label, budget, *steps, *mu)?,
            queries: 0,
        }),
        AttackSpec::Cw { config } => {
            let logits = GradientModel::logits(net, x.data());
            let target = (0..logits.len())
                .filter(|&j| j != label)
                .max_by(|&a, &b| logits[a].partial_cmp(&logits[b]).unwrap())
                .expect("at least two classes");
            Ok(PointOutcome {
                result: cw_l2(net, x, target, config)?,
                queries: 0,
            })
        }
        AttackSpec::Zoo {
            steps,
            budget: query_budget,
            delta,
        } => {
            let mut oracle = QueryOracle::from_network(net, Access::Score);
            let result = zoo_attack(
                &mut oracle,
                x,
                label,
                budget,
                &FDConfig {
                    delta: *delta,
                    budget: *query_budget,
                },
                *steps,
            )?;
            Ok(PointOutcome {
                result,
                queries: oracle.queries(),
            })
        }
        AttackSpec::Boundary { steps } => {
            // Init: the first pool point the model predicts differently.
            let init = init_pool
                .iter()
                .map(|(p, _)| p)
                .find(|p| GradientModel::predict(net, p.data()) != label);
            let mut oracle = QueryOracle::from_network(net, Access::Decision);
            match init {
                Some(init) => {
                    let result = boundary_attack(&mut oracle, x, label, init, *steps, seed)?;
                    Ok(PointOutcome {
                        result,
                        queries: oracle.queries(),
                    })
                }
                None => Ok(PointOutcome {
                    // No misclassified starting point exists; report a
                    // failed attack at the original input.
                    result: AttackResult {
                        adversarial: x.clone(),
                        success: false,
                        iterations: 0,
                        perturbation_norm: 0.0,
                        final_loss: 0.0,
                    },
                    queries: 0,
                }),
            }
        }
        AttackSpec::BpdaFgsm { sigma, samples } => {
            let model = BpdaModel {
                net,
                preprocess: |v: &[f64]| v.to_vec(),
                config: BPDAConfig::new(*sigma, *samples, seed)?,
            };
            Ok(PointOutcome {
                result: fgsm(&model, x, label, budget)?,
                queries: 0,
            })
        }
    }
}

/// Attack-suite outcome: the report plus per-attack adversarial dumps for
/// later verification.
pub struct SuiteOutcome {
    pub table: ReportTable,
    pub dumps: Vec<(String, Vec<DumpedExample>)>,
}

pub const SUITE_HEADERS: [&str; 6] = [
    "attack",
    "clean_acc",
    "adv_acc",
    "mean_norm",
    "mean_iterations",
    "mean_queries",
];

/// Runs every attack against every test point and tabulates clean
/// accuracy, adversarial accuracy, mean perturbation norm, and mean
/// iteration/query counts.
pub fn run_attack_suite(
    net: &Network,
    test: &[Sample],
    attacks: &[AttackSpec],
    budget: &PerturbationBudget,
    seed: u64,
) -> Result<SuiteOutcome> {
    if test.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let clean_acc = accuracy(net, test)?;
    let mut table = ReportTable::new(SUITE_HEADERS.iter().map(|s| s.to_string()).collect());
    table.push_row("clean", vec![clean_acc, clean_acc, 0.0, 0.0, 0.0]);
    let mut dumps = Vec::new();

    for spec in attacks {
        let mut correct = 0usize;
        let mut norm_sum = 0.0;
        let mut iter_sum = 0.0;
        let mut query_sum = 0.0;
        let mut examples = Vec::with_capacity(test.len());
        for (i, (x, y)) in test.iter().enumerate() {
            let point_seed = substream(seed, &format!("{}-{i}", spec.name()));
            let outcome = attack_point(net, spec, budget, x, *y, test, point_seed)?;
            if GradientModel::predict(net, outcome.result.adversarial.data()) == *y {
                correct += 1;
            }
            norm_sum += outcome.result.perturbation_norm;
            iter_sum += outcome.result.iterations as f64;
            query_sum += outcome.queries as f64;
            examples.push(DumpedExample {
                original: x.clone(),
                adversarial: outcome.result.adversarial.clone(),
                label: *y,
            });
        }
        let n = test.len() as f64;
        table.push_row(
            spec.name(),
            vec![
                clean_acc,
                correct as f64 / n,
                norm_sum / n,
                iter_sum / n,
                query_sum / n,
            ],
        );
        dumps.push((spec.name().to_string(), examples));
    }
    table.push_metadata("seed", seed.to_string());
    table.push_metadata("epsilon", format_cell(budget.epsilon));
    table.push_metadata("norm", budget.norm.to_string());
    table.push_metadata("version", env!("CARGO_PKG_VERSION"));
    table.validate()?;
    Ok(SuiteOutcome { table, dumps })
}

/// Crafts adversarials on every source model with untargeted PGD and
/// evaluates every (source, target) pair under the joint-misclassification
/// metric. The diagonal uses the source as both models. Normalized columns
/// divide each cell by its row diagonal.
pub fn run_transfer_matrix(
    nets: &[Network],
    names: &[String],
    test: &[Sample],
    epsilon: f64,
    steps: usize,
    seed: u64,
) -> Result<(ReportTable, TransferReport)> {
    if nets.len() < 2 {
        return Err(Error::Precondition("need at least two models".into()));
    }
    if names.len() != nets.len() {
        return Err(Error::Precondition("one name per model".into()));
    }
    let (d, k) = (nets[0].input_dim(), nets[0].num_classes());
    for (i, net) in nets.iter().enumerate() {
        if net.input_dim() != d || net.num_classes() != k {
            return Err(Error::DimensionMismatch {
                layer: i,
                expected: d,
                actual: net.input_dim(),
            });
        }
    }
    let budget = PerturbationBudget::linf(epsilon);

    let mut matrix = vec![vec![0.0; nets.len()]; nets.len()];
    let mut samples = vec![vec![test.len(); nets.len()]; nets.len()];
    for (i, source) in nets.iter().enumerate() {
        let mut crafted = Vec::with_capacity(test.len());
        for (x, y) in test {
            let result = pgd_adaptive(
                source,
                x,
                &TargetSpec::Untargeted,
                *y,
                &budget,
                steps,
                epsilon * DEFAULT_ALPHA_FRACTION,
            )?;
            crafted.push((result.adversarial, *y));
        }
        for (j, target) in nets.iter().enumerate() {
            let mut f = QueryOracle::from_network(source, Access::Decision);
            let mut g = QueryOracle::from_network(target, Access::Decision);
            matrix[i][j] = transfer_asr(&crafted, &mut f, &mut g)?;
            samples[i][j] = crafted.len();
        }
    }

    let normalized: Vec<Vec<f64>> = matrix
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let diag = row[i];
            row.iter()
                .map(|&c| if diag > 0.0 { c / diag } else { 0.0 })
                .collect()
        })
        .collect();

    let mut headers = vec!["source".to_string()];
    headers.extend(names.iter().map(|n| format!("asr:{n}")));
    headers.extend(names.iter().map(|n| format!("norm:{n}")));
    let mut table = ReportTable::new(headers);
    for (i, name) in names.iter().enumerate() {
        let mut cells = matrix[i].clone();
        cells.extend(normalized[i].iter());
        table.push_row(name.clone(), cells);
    }
    table.push_metadata("seed", seed.to_string());
    table.push_metadata("epsilon", format_cell(epsilon));
    table.push_metadata("pgd_steps", steps.to_string());
    table.push_metadata("version", env!("CARGO_PKG_VERSION"));
    table.validate()?;

    let report = TransferReport {
        model_names: names.to_vec(),
        matrix,
        normalized,
        samples,
    };
    report.validate()?;
    Ok((table, report))
}

/// One defense under evaluation.
#[derive(Debug, Clone, PartialEq)]
pub enum DefenseSpec {
    None,
    Quantize { bits: u32 },
    AdversarialTraining { epochs: usize, learning_rate: f64 },
    InputRounding { levels: u32 },
}

impl DefenseSpec {
    pub fn from_name(name: &str, knobs: &AttackKnobs, epochs: usize, lr: f64) -> Result<Self> {
        if name == "none" {
            return Ok(DefenseSpec::None);
        }
        if let Some(bits) = name.strip_prefix("quant:") {
            let bits: u32 = bits
                .parse()
                .map_err(|_| Error::Config(format!("bad quant bits {bits:?}")))?;
            return Ok(DefenseSpec::Quantize { bits });
        }
        if name == "quant" {
            return Ok(DefenseSpec::Quantize { bits: 4 });
        }
        if name == "advtrain" {
            return Ok(DefenseSpec::AdversarialTraining {
                epochs,
                learning_rate: lr,
            });
        }
        if name == "rounding" {
            return Ok(DefenseSpec::InputRounding {
                levels: knobs.rounding_levels,
            });
        }
        Err(Error::Unknown {
            what: "defense",
            name: name.into(),
        })
    }

    pub fn label(&self) -> String {
        match self {
            DefenseSpec::None => "none".into(),
            DefenseSpec::Quantize { bits } => format!("quant:{bits}"),
            DefenseSpec::AdversarialTraining { .. } => "advtrain".into(),
            DefenseSpec::InputRounding { levels } => format!("rounding:{levels}"),
        }
    }
}

pub const DEFENSE_HEADERS: [&str; 4] = [
    "defense/attack",
    "clean_acc",
    "robust_acc",
    "certified_fraction",
];

/// Evaluates (defense, attack) pairs: clean accuracy of the defended
/// model, accuracy under attack against the defended gradient surface, and
/// the IBP-certified fraction at the budget's epsilon where the defense
/// leaves the forward function intact (-1 when not applicable).
pub fn run_defense_eval(
    net: &Network,
    train: &[Sample],
    test: &[Sample],
    defenses: &[DefenseSpec],
    attacks: &[AttackSpec],
    budget: &PerturbationBudget,
    seed: u64,
) -> Result<ReportTable> {
    let mut table = ReportTable::new(DEFENSE_HEADERS.iter().map(|s| s.to_string()).collect());
    for defense in defenses {
        // The defended network (owned when retrained) and its gradient surface.
        let trained;
        let underlying: &Network = match defense {
            DefenseSpec::AdversarialTraining {
                epochs,
                learning_rate,
            } => {
                let config = AdvTrainConfig::new(
                    *budget,
                    *epochs,
                    *learning_rate,
                    substream(seed, "advtrain"),
                );
                trained = adversarial_train(net, train, &config)?;
                &trained
            }
            _ => net,
        };
        let quant_model;
        let rounding_model;
        let surface: &dyn GradientModel = match defense {
            DefenseSpec::None | DefenseSpec::AdversarialTraining { .. } => underlying,
            DefenseSpec::Quantize { bits } => {
                quant_model = quantized_oracle(underlying, QuantConfig::new(*bits)?);
                &quant_model
            }
            DefenseSpec::InputRounding { levels } => {
                let levels = *levels;
                rounding_model = PreprocessedModel {
                    net: underlying,
                    preprocess: move |v: &[f64]| round_to_levels(v, levels),
                };
                &rounding_model
            }
        };

        let clean_acc = {
            let mut correct = 0usize;
            for (x, y) in test {
                if surface.predict(x.data()) == *y {
                    correct += 1;
                }
            }
            correct as f64 / test.len() as f64
        };

        // IBP applies whenever the forward function is the raw network.
        let certified_fraction = match defense {
            DefenseSpec::InputRounding { .. } => -1.0,
            _ if budget.norm == Norm::Linf => {
                let mut certified = 0usize;
                for (x, y) in test {
                    if ibp_certify(underlying, x, *y, budget.epsilon)? {
                        certified += 1;
                    }
                }
                certified as f64 / test.len() as f64
            }
            _ => -1.0,
        };

        for spec in attacks {
            let mut correct = 0usize;
            for (i, (x, y)) in test.iter().enumerate() {
                let point_seed = substream(seed, &format!("{}-{}-{i}", defense.label(), spec.name()));
                let result = run_surface_attack(surface, spec, budget, x, *y, point_seed)?;
                if surface.predict(result.adversarial.data()) == *y {
                    correct += 1;
                }
            }
            table.push_row(
                format!("{}/{}", defense.label(), spec.name()),
                vec![clean_acc, correct as f64 / test.len() as f64, certified_fraction],
            );
        }
    }
    table.push_metadata("seed", seed.to_string());
    table.push_metadata("epsilon", format_cell(budget.epsilon));
    table.push_metadata("version", env!("CARGO_PKG_VERSION"));
    table.validate()?;
    Ok(table)
}

/// Gradient-surface attacks available in defense evaluation.
fn run_surface_attack(
    surface: &dyn GradientModel,
    spec: &AttackSpec,
    budget: &PerturbationBudget,
    x: &Tensor,
    label: usize,
    _seed: u64,
) -> Result<AttackResult> {
    match spec {
        AttackSpec::Fgsm => fgsm(surface, x, label, budget),
        AttackSpec::Pgd { steps } => pgd_adaptive(
            surface,
            x,
            &TargetSpec::Untargeted,
            label,
            budget,
            *steps,
            budget.epsilon * DEFAULT_ALPHA_FRACTION,
        ),
        AttackSpec::MiFgsm { steps, mu } => mi_fgsm(surface, x, label, budget, *steps, *mu),
        other => Err(Error::Unknown {
            what: "defense-eval attack",
            name: other.name().into(),
        }),
    }
}

pub const CERT_HEADER_PREFIX: [&str; 2] = ["point", "clean_pred"];

/// Per-point certification report: clean prediction, an IBP-certified flag
/// per epsilon in the grid, the smoothed prediction (-1 for abstain), and
/// the certified L2 radius (0 when abstaining).
pub fn certification_report(
    net: &Network,
    test: &[Sample],
    epsilon_grid: &[f64],
    sigma: f64,
    num_samples: usize,
    alpha: f64,
    seed: u64,
) -> Result<ReportTable> {
    let mut headers: Vec<String> = CERT_HEADER_PREFIX.iter().map(|s| s.to_string()).collect();
    for eps in epsilon_grid {
        headers.push(format!("ibp@{eps}"));
    }
    headers.push("smooth_pred".into());
    headers.push("l2_radius".into());
    let mut table = ReportTable::new(headers);

    let sc = SmoothedClassifier::new(net, sigma, num_samples, alpha)?;
    for (i, (x, y)) in test.iter().enumerate() {
        let mut cells = vec![GradientModel::predict(net, x.data()) as f64];
        for eps in epsilon_grid {
            cells.push(f64::from(u8::from(ibp_certify(net, x, *y, *eps)?)));
        }
        let noise_seed = substream(seed, &format!("smooth-{i}"));
        match smooth_predict(&sc, x, noise_seed)? {
            SmoothPrediction::Class(c) => cells.push(c as f64),
            SmoothPrediction::Abstain => cells.push(-1.0),
        }
        match smooth_certify(&sc, x, substream(seed, &format!("certify-{i}")))? {
            SmoothCertificate::Certified { radius, .. } => cells.push(radius),
            SmoothCertificate::Abstain => cells.push(0.0),
        }
        table.push_row(format!("point-{i}"), cells);
    }
    table.push_metadata("seed", seed.to_string());
    table.push_metadata("sigma", format_cell(sigma));
    table.push_metadata("samples", num_samples.to_string());
    table.push_metadata("alpha", format_cell(alpha));
    table.push_metadata("version", env!("CARGO_PKG_VERSION"));
    table.validate()?;
    Ok(table)
}

/// Poisoning pipeline flavor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoisonMode {
    DirtyLabel,
    CleanLabel,
}

impl PoisonMode {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "dirty" => Ok(PoisonMode::DirtyLabel),
            "clean" => Ok(PoisonMode::CleanLabel),
            other => Err(Error::Unknown {
                what: "poison mode",
                name: other.into(),
            }),
        }
    }
}

/// End-to-end backdoor run: the poisoned training set with provenance
/// tags, both trained models, and their evaluations.
pub struct BackdoorOutcome {
    pub poisoned_train: Vec<Sample>,
    pub provenance: Vec<Provenance>,
    pub control_model: Network,
    pub poisoned_model: Network,
    /// (clean accuracy, triggered target rate) of the control model.
    pub control_eval: (f64, f64),
    /// (clean accuracy, triggered target rate) of the poisoned model.
    pub poisoned_eval: (f64, f64),
    pub poisons_placed: usize,
    pub craft_failures: usize,
}

/// Dirty-label runs replace a fraction of non-target samples with
/// triggered, relabeled copies. Clean-label runs take target-class
/// samples, nudge their features toward a rival class's centroid within
/// the visibility ball (keeping their own label consistent under the
/// crafting model), apply the trigger, and keep the label. The crafting
/// model is the control model trained on clean data.
pub fn backdoor_pipeline(
    train: &[Sample],
    test: &[Sample],
    dims: &[usize],
    mode: PoisonMode,
    fraction: f64,
    trigger: &Trigger,
    epochs: usize,
    learning_rate: f64,
    seed: u64,
) -> Result<BackdoorOutcome> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Precondition("fraction must be in [0, 1]".into()));
    }
    let init = Network::random(dims, substream(seed, "init"))?;
    let train_seed = substream(seed, "train");
    let control_model = train_sgd(&init, train, epochs, learning_rate, train_seed)?;

    let target = trigger.target;
    let budget = (fraction * train.len() as f64).round() as usize;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(substream(seed, "poison-select"));
    order.shuffle(&mut rng);

    let mut poisoned_train = train.to_vec();
    let mut provenance = vec![Provenance::Pristine; train.len()];
    let mut placed = 0usize;
    let mut craft_failures = 0usize;

    match mode {
        PoisonMode::DirtyLabel => {
            for &i in &order {
                if placed >= budget {
                    break;
                }
                let (x, y) = &train[i];
                if *y == target {
                    continue;
                }
                poisoned_train[i] = (apply_trigger(x, trigger)?, target);
                provenance[i] = Provenance::DirtyLabel;
                placed += 1;
            }
        }
        PoisonMode::CleanLabel => {
            // Rival class: the non-target class the control model most
            // often confuses with the target, approximated here as the
            // class whose centroid sits nearest in feature space.
            let rival = rival_class(&control_model, train, target)?;
            let rival_examples: Vec<Tensor> = train
                .iter()
                .filter(|(_, y)| *y == rival)
                .map(|(x, _)| x.clone())
                .collect();
            if rival_examples.is_empty() {
                return Err(Error::Precondition("rival class has no examples".into()));
            }
            for &i in &order {
                if placed >= budget {
                    break;
                }
                let (x, y) = &train[i];
                if *y != target {
                    continue;
                }
                if GradientModel::predict(&control_model, x.data()) != *y {
                    continue;
                }
                // Push the sample's features toward the rival centroid,
                // backing off when label consistency is lost.
                let mut crafted = None;
                for steps in [40usize, 20, 10, 0] {
                    match craft_clean_label(
                        &control_model,
                        &train[i],
                        trigger,
                        &rival_examples,
                        steps,
                        0.05,
                    ) {
                        Ok(sample) => {
                            let with_trigger = apply_trigger(&sample.x_p, trigger)?;
                            if GradientModel::predict(&control_model, with_trigger.data())
                                == target
                            {
                                crafted = Some(with_trigger);
                                break;
                            }
                        }
                        Err(Error::CraftingFailed(_)) => {
                            craft_failures += 1;
                        }
                        Err(other) => return Err(other),
                    }
                }
                if let Some(x_p) = crafted {
                    poisoned_train[i] = (x_p, target);
                    provenance[i] = Provenance::CleanLabel;
                    placed += 1;
                }
            }
        }
    }

    let poisoned_model = train_sgd(&init, &poisoned_train, epochs, learning_rate, train_seed)?;
    let control_eval = backdoor_eval(&control_model, test, trigger)?;
    let poisoned_eval = backdoor_eval(&poisoned_model, test, trigger)?;
    Ok(BackdoorOutcome {
        poisoned_train,
        provenance,
        control_model,
        poisoned_model,
        control_eval,
        poisoned_eval,
        poisons_placed: placed,
        craft_failures,
    })
}

/// The non-target class whose penultimate-feature centroid lies closest to
/// the target class's centroid.
fn rival_class(net: &Network, train: &[Sample], target: usize) -> Result<usize> {
    let k = net.num_classes();
    let mut centroids: Vec<Option<Vec<f64>>> = vec![None; k];
    let mut counts = vec![0usize; k];
    for (x, y) in train {
        let f = net.penultimate_features(x)?;
        let entry = centroids[*y].get_or_insert_with(|| vec![0.0; f.len()]);
        for (a, v) in entry.iter_mut().zip(&f) {
            *a += v;
        }
        counts[*y] += 1;
    }
    for (c, n) in centroids.iter_mut().zip(&counts) {
        if let Some(c) = c {
            for v in c.iter_mut() {
                *v /= (*n).max(1) as f64;
            }
        }
    }
    let target_centroid = centroids[target]
        .clone()
        .ok_or_else(|| Error::Precondition("target class has no examples".into()))?;
    let mut best: Option<(usize, f64)> = None;
    for (class, centroid) in centroids.iter().enumerate() {
        if class == target {
            continue;
        }
        if let Some(c) = centroid {
            let dist = crate::tensor::l2_norm(&sub(c, &target_centroid));
            if best.map_or(true, |(_, d)| dist < d) {
                best = Some((class, dist));
            }
        }
    }
    best.map(|(c, _)| c)
        .ok_or_else(|| Error::Precondition("no rival class available".into()))
}

/// Backdoor report rows for the poison subcommand.
pub fn backdoor_report(outcome: &BackdoorOutcome, mode: PoisonMode, seed: u64) -> ReportTable {
    let mut table = ReportTable::new(vec![
        "model".into(),
        "clean_acc".into(),
        "triggered_target_rate".into(),
    ]);
    table.push_row(
        "control",
        vec![outcome.control_eval.0, outcome.control_eval.1],
    );
    table.push_row(
        "poisoned",
        vec![outcome.poisoned_eval.0, outcome.poisoned_eval.1],
    );
    table.push_metadata(
        "mode",
        match mode {
            PoisonMode::DirtyLabel => "dirty",
            PoisonMode::CleanLabel => "clean",
        },
    );
    table.push_metadata("poisons_placed", outcome.poisons_placed.to_string());
    table.push_metadata("craft_failures", outcome.craft_failures.to_string());
    table.push_metadata("seed", seed.to_string());
    table.push_metadata("version", env!("CARGO_PKG_VERSION"));
    table
}

/// Recomputes the clean-accuracy, adversarial-accuracy, and mean-norm
/// columns of an attack-suite report from dumped adversarial examples and
/// compares them cell-for-cell (as formatted). Returns the mismatches.
pub fn verify_attack_report(
    net: &Network,
    report: &ReportTable,
    dumps: &[(String, Vec<DumpedExample>)],
    norm: Norm,
) -> Result<Vec<String>> {
    let mut mismatches = Vec::new();
    let col = |name: &str| -> Result<usize> {
        report
            .headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Precondition(format!("report lacks column {name}")))
    };
    let clean_col = col("clean_acc")?;
    let adv_col = col("adv_acc")?;
    let norm_col = col("mean_norm")?;

    for (attack, examples) in dumps {
        let row = report
            .rows
            .iter()
            .find(|r| &r.label == attack)
            .ok_or_else(|| Error::Precondition(format!("report lacks row {attack}")))?;
        if examples.is_empty() {
            continue;
        }
        let n = examples.len() as f64;
        let mut clean_correct = 0usize;
        let mut adv_correct = 0usize;
        let mut norm_sum = 0.0;
        for e in examples {
            if GradientModel::predict(net, e.original.data()) == e.label {
                clean_correct += 1;
            }
            if GradientModel::predict(net, e.adversarial.data()) == e.label {
                adv_correct += 1;
            }
            let delta = sub(e.adversarial.data(), e.original.data());
            norm_sum += PerturbationBudget::new(norm, f64::INFINITY).norm_of(&delta);
        }
        let expectations = [
            (clean_col, clean_correct as f64 / n, "clean_acc"),
            (adv_col, adv_correct as f64 / n, "adv_acc"),
            (norm_col, norm_sum / n, "mean_norm"),
        ];
        for (idx, recomputed, name) in expectations {
            let reported = format_cell(row.cells[idx - 1]);
            let fresh = format_cell(recomputed);
            if reported != fresh {
                mismatches.push(format!(
                    "{attack}: {name} reported {reported}, recomputed {fresh}"
                ));
            }
        }
    }
    Ok(mismatches)
}

/// Trains a fresh network of the given architecture: the init and shuffle
/// streams are substreams of the master seed.
pub fn train_model(
    dims: &[usize],
    train: &[Sample],
    epochs: usize,
    learning_rate: f64,
    seed: u64,
) -> Result<Network> {
    let init = Network::random(dims, substream(seed, "init"))?;
    train_sgd(&init, train, epochs, learning_rate, substream(seed, "train"))
}

/// Parses a hidden-layer spec like "16,16" into a full dimension chain.
pub fn parse_architecture(input_dim: usize, num_classes: usize, hidden: &str) -> Result<Vec<usize>> {
    let mut dims = vec![input_dim];
    if !hidden.trim().is_empty() {
        for token in hidden.split(',') {
            let width: usize = token
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad layer width {token:?}")))?;
            if width == 0 {
                return Err(Error::Config("layer width must be positive".into()));
            }
            dims.push(width);
        }
    }
    dims.push(num_classes);
    Ok(dims)
}
