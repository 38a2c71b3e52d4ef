//! Batch CLI for dataset generation, model training, attack and defense
//! evaluation, certification, poisoning pipelines, and report
//! verification. Exit codes: 0 success, 1 experiment failure, 2 usage
//! error. All commands are deterministic given --seed.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use advkit::attack::{Norm, PerturbationBudget};
use advkit::data::{corner_trigger_pattern, gen_dataset, DatasetKind};
use advkit::error::Error;
use advkit::harness::{
    backdoor_pipeline, backdoor_report, certification_report, parse_architecture,
    run_attack_suite, run_defense_eval, run_transfer_matrix, train_model, verify_attack_report,
    AttackKnobs, AttackSpec, DefenseSpec, KvConfig, PoisonMode,
};
use advkit::io::{
    load_dataset, load_examples, load_model, save_dataset, save_examples, save_model,
    save_trigger,
};
use advkit::net::accuracy;
use advkit::poison::Trigger;
use advkit::report::ReportTable;
use advkit::Result;
use advkit::Tensor;

#[derive(Parser)]
#[command(name = "advkit", version, about = "Adversarial ML toolkit harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset file.
    GenData {
        /// two-moons | grid-digits
        #[arg(long)]
        kind: String,
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train a dense network on a dataset file.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Hidden widths, e.g. "16,16"; empty for a softmax layer.
        #[arg(long, default_value = "16")]
        arch: String,
        #[arg(long, default_value_t = 60)]
        epochs: usize,
        #[arg(long, default_value_t = 0.3)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run an attack suite against a model and emit a TSV report.
    Attack {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated: fgsm,pgd,mi-fgsm,cw,zoo,boundary,bpda-fgsm
        #[arg(long, default_value = "fgsm,pgd")]
        attacks: String,
        #[arg(long, default_value_t = 0.1)]
        eps: f64,
        /// linf | l2
        #[arg(long, default_value = "linf")]
        norm: String,
        #[arg(long, default_value_t = 20)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Dump adversarial examples to <prefix>.<attack>.txt for `verify`.
        #[arg(long)]
        dump: Option<String>,
        /// Also render the report as Markdown to this path.
        #[arg(long)]
        markdown: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Pairwise transfer success rates across several models.
    TransferMatrix {
        /// Comma-separated model paths.
        #[arg(long)]
        models: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.15)]
        eps: f64,
        #[arg(long, default_value_t = 100)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Evaluate defenses against gradient attacks.
    Defend {
        #[arg(long)]
        model: PathBuf,
        /// Test set.
        #[arg(long)]
        data: PathBuf,
        /// Training set for defenses that retrain.
        #[arg(long)]
        train_data: Option<PathBuf>,
        /// Comma-separated: none,quant:4,advtrain,rounding
        #[arg(long, default_value = "none,quant:4")]
        defenses: String,
        #[arg(long, default_value = "fgsm,pgd")]
        attacks: String,
        #[arg(long, default_value_t = 0.1)]
        eps: f64,
        #[arg(long, default_value = "linf")]
        norm: String,
        #[arg(long, default_value_t = 20)]
        steps: usize,
        /// Epochs for adversarial training.
        #[arg(long, default_value_t = 40)]
        epochs: usize,
        #[arg(long, default_value_t = 0.3)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Per-point IBP and smoothing certification report.
    Certify {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated epsilon grid for IBP flags.
        #[arg(long, default_value = "0.01,0.02,0.05")]
        ibp_eps: String,
        #[arg(long, default_value_t = 0.25)]
        sigma: f64,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long, default_value_t = 0.01)]
        alpha: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Backdoor-poisoning pipeline: poison, retrain, evaluate.
    Poison {
        #[arg(long)]
        train_data: PathBuf,
        #[arg(long)]
        test_data: PathBuf,
        /// dirty | clean
        #[arg(long, default_value = "dirty")]
        mode: String,
        #[arg(long, default_value_t = 0.05)]
        fraction: f64,
        #[arg(long, default_value_t = 0)]
        target: usize,
        /// Trigger visibility bound (Linf); also the patch amplitude.
        #[arg(long, default_value_t = 0.5)]
        eps_vis: f64,
        #[arg(long, default_value = "32")]
        arch: String,
        #[arg(long, default_value_t = 80)]
        epochs: usize,
        #[arg(long, default_value_t = 0.3)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Report path.
        #[arg(long)]
        out: PathBuf,
        /// Poisoned dataset (with provenance column).
        #[arg(long)]
        poisoned_out: Option<PathBuf>,
        /// Sidecar trigger file.
        #[arg(long)]
        trigger_out: Option<PathBuf>,
        /// Poisoned model file.
        #[arg(long)]
        model_out: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Recompute an attack report from dumped adversarial examples.
    Verify {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Dump prefix used by `attack --dump`.
        #[arg(long)]
        dump: String,
        #[arg(long, default_value = "linf")]
        norm: String,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn parse_norm(token: &str) -> Result<Norm> {
    match token {
        "linf" => Ok(Norm::Linf),
        "l2" => Ok(Norm::L2),
        other => Err(Error::Unknown {
            what: "norm",
            name: other.into(),
        }),
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<KvConfig> {
    match path {
        Some(p) => KvConfig::load(p),
        None => Ok(KvConfig::default()),
    }
}

/// Attack knobs resolved from defaults then config-file overrides.
fn knobs_from_config(config: &KvConfig) -> Result<AttackKnobs> {
    let mut knobs = AttackKnobs::default();
    if let Some(v) = config.get_parsed("mu")? {
        knobs.mu = v;
    }
    if let Some(v) = config.get_parsed("kappa")? {
        knobs.kappa = v;
    }
    if let Some(v) = config.get_parsed("cw_rounds")? {
        knobs.cw_rounds = v;
    }
    if let Some(v) = config.get_parsed("cw_inner")? {
        knobs.cw_inner = v;
    }
    if let Some(v) = config.get_parsed("cw_lr")? {
        knobs.cw_lr = v;
    }
    if let Some(v) = config.get_parsed("zoo_budget")? {
        knobs.zoo_budget = v;
    }
    if let Some(v) = config.get_parsed("fd_delta")? {
        knobs.fd_delta = v;
    }
    if let Some(v) = config.get_parsed("boundary_steps")? {
        knobs.boundary_steps = v;
    }
    if let Some(v) = config.get_parsed("bpda_sigma")? {
        knobs.bpda_sigma = v;
    }
    if let Some(v) = config.get_parsed("bpda_samples")? {
        knobs.bpda_samples = v;
    }
    if let Some(v) = config.get_parsed("rounding_levels")? {
        knobs.rounding_levels = v;
    }
    Ok(knobs)
}

fn parse_attacks(list: &str, knobs: &AttackKnobs) -> Result<Vec<AttackSpec>> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|name| AttackSpec::from_name(name, knobs))
        .collect()
}

fn write_report(table: &ReportTable, path: &PathBuf) -> Result<()> {
    table.write_tsv(path)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            kind,
            n,
            noise,
            seed,
            out,
            config,
        } => {
            let config = load_config(&config)?;
            let n = config.get_parsed("n")?.unwrap_or(n);
            let noise = config.get_parsed("noise")?.unwrap_or(noise);
            let dataset = gen_dataset(DatasetKind::parse(&kind)?, n, noise, seed)?;
            save_dataset(&dataset, None, &out)?;
            println!("wrote {} ({} samples)", out.display(), dataset.len());
            Ok(())
        }
        Command::Train {
            data,
            arch,
            epochs,
            lr,
            seed,
            out,
            config,
        } => {
            let config = load_config(&config)?;
            let arch = config.get("arch").map(str::to_string).unwrap_or(arch);
            let epochs = config.get_parsed("epochs")?.unwrap_or(epochs);
            let lr = config.get_parsed("lr")?.unwrap_or(lr);
            let (dataset, _) = load_dataset(&data)?;
            let dims = parse_architecture(dataset.input_dim(), dataset.num_classes, &arch)?;
            let samples = dataset.samples();
            let net = train_model(&dims, &samples, epochs, lr, seed)?;
            save_model(&net, &out)?;
            let acc = accuracy(&net, &samples)?;
            println!("wrote {} (train accuracy {acc:.4})", out.display());
            Ok(())
        }
        Command::Attack {
            model,
            data,
            attacks,
            eps,
            norm,
            steps,
            seed,
            out,
            dump,
            markdown,
            config,
        } => {
            let config = load_config(&config)?;
            let mut knobs = knobs_from_config(&config)?;
            knobs.epsilon = config.get_parsed("eps")?.unwrap_or(eps);
            knobs.norm = parse_norm(config.get("norm").unwrap_or(&norm))?;
            knobs.steps = config.get_parsed("steps")?.unwrap_or(steps);
            let attacks = parse_attacks(config.get("attacks").unwrap_or(&attacks), &knobs)?;
            let net = load_model(&model)?;
            let (dataset, _) = load_dataset(&data)?;
            let budget = PerturbationBudget::new(knobs.norm, knobs.epsilon);
            let outcome = run_attack_suite(&net, &dataset.samples(), &attacks, &budget, seed)?;
            write_report(&outcome.table, &out)?;
            if let Some(md) = markdown {
                std::fs::write(&md, outcome.table.to_markdown()).map_err(|e| Error::Io {
                    path: md.display().to_string(),
                    source: e,
                })?;
                println!("wrote {}", md.display());
            }
            if let Some(prefix) = dump {
                for (name, examples) in &outcome.dumps {
                    let path = PathBuf::from(format!("{prefix}.{name}.txt"));
                    save_examples(examples, net.num_classes(), &path)?;
                    println!("wrote {}", path.display());
                }
            }
            Ok(())
        }
        Command::TransferMatrix {
            models,
            data,
            eps,
            steps,
            seed,
            out,
            config,
        } => {
            let config = load_config(&config)?;
            let eps = config.get_parsed("eps")?.unwrap_or(eps);
            let steps = config.get_parsed("steps")?.unwrap_or(steps);
            let mut nets = Vec::new();
            let mut names = Vec::new();
            for path in models.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                nets.push(load_model(path)?);
                names.push(
                    std::path::Path::new(path)
                        .file_stem()
                        .map(|s| s.to_string_lossy().into_owned())
                        .unwrap_or_else(|| path.to_string()),
                );
            }
            let (dataset, _) = load_dataset(&data)?;
            let (table, _) =
                run_transfer_matrix(&nets, &names, &dataset.samples(), eps, steps, seed)?;
            write_report(&table, &out)
        }
        Command::Defend {
            model,
            data,
            train_data,
            defenses,
            attacks,
            eps,
            norm,
            steps,
            epochs,
            lr,
            seed,
            out,
            config,
        } => {
            let config = load_config(&config)?;
            let mut knobs = knobs_from_config(&config)?;
            knobs.epsilon = config.get_parsed("eps")?.unwrap_or(eps);
            knobs.norm = parse_norm(config.get("norm").unwrap_or(&norm))?;
            knobs.steps = config.get_parsed("steps")?.unwrap_or(steps);
            let epochs = config.get_parsed("epochs")?.unwrap_or(epochs);
            let lr = config.get_parsed("lr")?.unwrap_or(lr);
            let defense_specs: Vec<DefenseSpec> = config
                .get("defenses")
                .unwrap_or(&defenses)
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|name| DefenseSpec::from_name(name, &knobs, epochs, lr))
                .collect::<Result<_>>()?;
            let attack_specs = parse_attacks(config.get("attacks").unwrap_or(&attacks), &knobs)?;
            let net = load_model(&model)?;
            let (test, _) = load_dataset(&data)?;
            let train_samples = match &train_data {
                Some(p) => load_dataset(p)?.0.samples(),
                None => test.samples(),
            };
            let budget = PerturbationBudget::new(knobs.norm, knobs.epsilon);
            let table = run_defense_eval(
                &net,
                &train_samples,
                &test.samples(),
                &defense_specs,
                &attack_specs,
                &budget,
                seed,
            )?;
            write_report(&table, &out)
        }
        Command::Certify {
            model,
            data,
            ibp_eps,
            sigma,
            samples,
            alpha,
            seed,
            out,
            config,
        } => {
            let config = load_config(&config)?;
            let sigma = config.get_parsed("sigma")?.unwrap_or(sigma);
            let samples = config.get_parsed("samples")?.unwrap_or(samples);
            let alpha = config.get_parsed("alpha")?.unwrap_or(alpha);
            let grid: Vec<f64> = config
                .get("ibp_eps")
                .unwrap_or(&ibp_eps)
                .split(',')
                .map(|t| {
                    t.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::Config(format!("bad epsilon {t:?}")))
                })
                .collect::<Result<_>>()?;
            let net = load_model(&model)?;
            let (dataset, _) = load_dataset(&data)?;
            let table = certification_report(
                &net,
                &dataset.samples(),
                &grid,
                sigma,
                samples,
                alpha,
                seed,
            )?;
            write_report(&table, &out)
        }
        Command::Poison {
            train_data,
            test_data,
            mode,
            fraction,
            target,
            eps_vis,
            arch,
            epochs,
            lr,
            seed,
            out,
            poisoned_out,
            trigger_out,
            model_out,
            config,
        } => {
            let config = load_config(&config)?;
            let mode = PoisonMode::parse(config.get("mode").unwrap_or(&mode))?;
            let fraction = config.get_parsed("fraction")?.unwrap_or(fraction);
            let target = config.get_parsed("target")?.unwrap_or(target);
            let eps_vis = config.get_parsed("eps_vis")?.unwrap_or(eps_vis);
            let arch = config.get("arch").map(str::to_string).unwrap_or(arch);
            let epochs = config.get_parsed("epochs")?.unwrap_or(epochs);
            let lr = config.get_parsed("lr")?.unwrap_or(lr);

            let (train, _) = load_dataset(&train_data)?;
            let (test, _) = load_dataset(&test_data)?;
            let trigger = Trigger::new(
                trigger_pattern_for(train.input_dim(), eps_vis),
                eps_vis,
                Norm::Linf,
                target,
            )?;
            let dims = parse_architecture(train.input_dim(), train.num_classes, &arch)?;
            let outcome = backdoor_pipeline(
                &train.samples(),
                &test.samples(),
                &dims,
                mode,
                fraction,
                &trigger,
                epochs,
                lr,
                seed,
            )?;
            let table = backdoor_report(&outcome, mode, seed);
            write_report(&table, &out)?;
            if let Some(path) = poisoned_out {
                let inputs: Vec<Tensor> =
                    outcome.poisoned_train.iter().map(|(x, _)| x.clone()).collect();
                let labels: Vec<usize> = outcome.poisoned_train.iter().map(|(_, y)| *y).collect();
                let poisoned = advkit::data::Dataset::new(
                    inputs,
                    labels,
                    train.num_classes,
                    DatasetKind::Custom,
                    seed,
                )?;
                save_dataset(&poisoned, Some(&outcome.provenance), &path)?;
                println!("wrote {}", path.display());
            }
            if let Some(path) = trigger_out {
                save_trigger(&trigger, &path)?;
                println!("wrote {}", path.display());
            }
            if let Some(path) = model_out {
                save_model(&outcome.poisoned_model, &path)?;
                println!("wrote {}", path.display());
            }
            Ok(())
        }
        Command::Verify {
            model,
            report,
            dump,
            norm,
            config,
        } => {
            let config = load_config(&config)?;
            let norm = parse_norm(config.get("norm").unwrap_or(&norm))?;
            let net = load_model(&model)?;
            let table = ReportTable::read_tsv(&report)?;
            let mut dumps = Vec::new();
            for row in &table.rows {
                if row.label == "clean" {
                    continue;
                }
                let path = PathBuf::from(format!("{dump}.{}.txt", row.label));
                let (examples, _) = load_examples(&path)?;
                dumps.push((row.label.clone(), examples));
            }
            let mismatches = verify_attack_report(&net, &table, &dumps, norm)?;
            if mismatches.is_empty() {
                println!("verified {} rows against recomputation", dumps.len());
                Ok(())
            } else {
                for m in &mismatches {
                    eprintln!("mismatch: {m}");
                }
                Err(Error::Precondition(format!(
                    "{} report cells disagree with recomputation",
                    mismatches.len()
                )))
            }
        }
    }
}

/// Corner patch for glyph-shaped inputs, or the leading coordinates for
/// anything else.
fn trigger_pattern_for(input_dim: usize, amplitude: f64) -> Tensor {
    if input_dim == advkit::data::GRID_SIDE * advkit::data::GRID_SIDE {
        corner_trigger_pattern(amplitude)
    } else {
        let mut pattern = vec![0.0; input_dim];
        for p in pattern.iter_mut().take(2.min(input_dim)) {
            *p = amplitude;
        }
        Tensor::vector(pattern).expect("finite pattern")
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                Error::Unknown { .. } | Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
