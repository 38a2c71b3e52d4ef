//! Line-oriented text formats for models, datasets, triggers, and dumped
//! adversarial examples. All floats are written with 17 significant digits
//! so every round trip is bit-exact.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::attack::Norm;
use crate::data::{Dataset, DatasetKind};
use crate::error::{Error, Result};
use crate::net::{Activation, DenseLayer, Network};
use crate::poison::{Provenance, Trigger};
use crate::tensor::Tensor;

pub const MODEL_MAGIC: &str = "ADVNET v1";
pub const DATA_MAGIC: &str = "ADVDATA v1";
pub const TRIGGER_MAGIC: &str = "ADVTRIG v1";
pub const EXAMPLES_MAGIC: &str = "ADVEXAMPLES v1";

/// 17 significant digits: enough to reproduce any f64 exactly.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        message: message.into(),
    }
}

struct LineReader<'a> {
    path: &'a Path,
    lines: std::str::Lines<'a>,
    current: usize,
}

impl<'a> LineReader<'a> {
    fn new(path: &'a Path, text: &'a str) -> Self {
        Self {
            path,
            lines: text.lines(),
            current: 0,
        }
    }

    fn next_line(&mut self, what: &str) -> Result<&'a str> {
        self.current += 1;
        self.lines
            .next()
            .ok_or_else(|| parse_err(self.path, self.current, format!("missing {what}")))
    }

    fn err(&self, message: impl Into<String>) -> Error {
        parse_err(self.path, self.current, message)
    }
}

fn parse_f64(reader: &LineReader, token: &str) -> Result<f64> {
    token
        .parse::<f64>()
        .map_err(|_| reader.err(format!("bad real number {token:?}")))
}

fn parse_usize(reader: &LineReader, token: &str) -> Result<usize> {
    token
        .parse::<usize>()
        .map_err(|_| reader.err(format!("bad integer {token:?}")))
}

fn check_magic(reader: &mut LineReader, expected: &'static str) -> Result<()> {
    let line = reader.next_line("header")?;
    if line != expected {
        return Err(Error::Version {
            found: line.to_string(),
            expected,
        });
    }
    Ok(())
}

/// Serializes a network in the versioned model format: a magic line, the
/// dimension chain, the activation tokens, then one line per layer with
/// row-major weights followed by biases.
pub fn model_to_string(net: &Network) -> String {
    let mut out = String::new();
    out.push_str(MODEL_MAGIC);
    out.push('\n');
    out.push_str("dims");
    let _ = write!(out, " {}", net.input_dim());
    for layer in net.layers() {
        let _ = write!(out, " {}", layer.out_dim());
    }
    out.push('\n');
    out.push_str("acts");
    for layer in net.layers() {
        out.push_str(match layer.activation() {
            Activation::ReLU => " relu",
            Activation::Identity => " id",
        });
    }
    out.push('\n');
    for layer in net.layers() {
        let mut first = true;
        for v in layer.weights().iter().chain(layer.bias()) {
            if !first {
                out.push(' ');
            }
            out.push_str(&format_f64(*v));
            first = false;
        }
        out.push('\n');
    }
    out
}

pub fn save_model(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, model_to_string(net)).map_err(|e| io_err(path, e))
}

pub fn model_from_string(path: &Path, text: &str) -> Result<Network> {
    let mut reader = LineReader::new(path, text);
    check_magic(&mut reader, MODEL_MAGIC)?;

    let dims_line = reader.next_line("dims line")?;
    let mut tokens = dims_line.split_whitespace();
    if tokens.next() != Some("dims") {
        return Err(reader.err("expected `dims`"));
    }
    let dims: Vec<usize> = tokens
        .map(|t| parse_usize(&reader, t))
        .collect::<Result<_>>()?;
    if dims.len() < 2 {
        return Err(reader.err("need at least input and output dims"));
    }

    let acts_line = reader.next_line("acts line")?;
    let mut tokens = acts_line.split_whitespace();
    if tokens.next() != Some("acts") {
        return Err(reader.err("expected `acts`"));
    }
    let acts: Vec<Activation> = tokens
        .map(|t| match t {
            "relu" => Ok(Activation::ReLU),
            "id" => Ok(Activation::Identity),
            other => Err(reader.err(format!("unknown activation {other:?}"))),
        })
        .collect::<Result<_>>()?;
    if acts.len() != dims.len() - 1 {
        return Err(reader.err(format!(
            "{} activations for {} layers",
            acts.len(),
            dims.len() - 1
        )));
    }

    let mut layers = Vec::with_capacity(acts.len());
    for k in 0..acts.len() {
        let (in_dim, out_dim) = (dims[k], dims[k + 1]);
        let line = reader.next_line(&format!("layer {k}"))?;
        let values: Vec<f64> = line
            .split_whitespace()
            .map(|t| parse_f64(&reader, t))
            .collect::<Result<_>>()?;
        let expected = in_dim * out_dim + out_dim;
        if values.len() != expected {
            return Err(reader.err(format!(
                "layer {k}: expected {expected} values, got {}",
                values.len()
            )));
        }
        let weights = values[..in_dim * out_dim].to_vec();
        let bias = values[in_dim * out_dim..].to_vec();
        layers.push(DenseLayer::new(in_dim, out_dim, weights, bias, acts[k])?);
    }
    Network::new(layers)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Network> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    model_from_string(path, &text)
}

/// Serializes a dataset, optionally with a per-row provenance column.
pub fn dataset_to_string(dataset: &Dataset, provenance: Option<&[Provenance]>) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{DATA_MAGIC} {} {} {}",
        dataset.input_dim(),
        dataset.num_classes,
        dataset.len()
    );
    for (i, (x, y)) in dataset.inputs.iter().zip(&dataset.labels).enumerate() {
        for v in x.data() {
            out.push_str(&format_f64(*v));
            out.push(' ');
        }
        let _ = write!(out, "{y}");
        if let Some(p) = provenance {
            let _ = write!(out, " {}", p[i].as_str());
        }
        out.push('\n');
    }
    out
}

pub fn save_dataset(
    dataset: &Dataset,
    provenance: Option<&[Provenance]>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, dataset_to_string(dataset, provenance)).map_err(|e| io_err(path, e))
}

/// Loads a dataset; rows may carry an optional provenance token, and rows
/// without one count as pristine.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<(Dataset, Vec<Provenance>)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut reader = LineReader::new(path, &text);

    let header = reader.next_line("header")?;
    let tokens: Vec<&str> = header.split_whitespace().collect();
    if tokens.len() != 5 || tokens[0] != "ADVDATA" || tokens[1] != "v1" {
        if tokens.first() == Some(&"ADVDATA") {
            return Err(Error::Version {
                found: header.to_string(),
                expected: DATA_MAGIC,
            });
        }
        return Err(reader.err("malformed dataset header"));
    }
    let d = parse_usize(&reader, tokens[2])?;
    let k = parse_usize(&reader, tokens[3])?;
    let n = parse_usize(&reader, tokens[4])?;

    let mut inputs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut provenance = Vec::with_capacity(n);
    for row in 0..n {
        let line = reader.next_line(&format!("sample {row}"))?;
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != d + 1 && tokens.len() != d + 2 {
            return Err(reader.err(format!(
                "expected {} or {} fields, got {}",
                d + 1,
                d + 2,
                tokens.len()
            )));
        }
        let values: Vec<f64> = tokens[..d]
            .iter()
            .map(|t| parse_f64(&reader, t))
            .collect::<Result<_>>()?;
        inputs.push(Tensor::vector(values)?);
        labels.push(parse_usize(&reader, tokens[d])?);
        provenance.push(if tokens.len() == d + 2 {
            Provenance::parse(tokens[d + 1]).map_err(|_| {
                reader.err(format!("bad provenance token {:?}", tokens[d + 1]))
            })?
        } else {
            Provenance::Pristine
        });
    }
    let dataset = Dataset::new(inputs, labels, k, DatasetKind::Custom, 0)?;
    Ok((dataset, provenance))
}

fn norm_token(norm: Norm) -> &'static str {
    match norm {
        Norm::L2 => "l2",
        Norm::Linf => "linf",
    }
}

fn parse_norm(reader: &LineReader, token: &str) -> Result<Norm> {
    match token {
        "l2" => Ok(Norm::L2),
        "linf" => Ok(Norm::Linf),
        other => Err(reader.err(format!("unknown norm {other:?}"))),
    }
}

/// Sidecar trigger format: magic, dimension, norm, visibility bound,
/// target class, then the pattern values on one line.
pub fn trigger_to_string(trigger: &Trigger) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{TRIGGER_MAGIC}");
    let _ = writeln!(out, "dims {}", trigger.pattern.len());
    let _ = writeln!(out, "norm {}", norm_token(trigger.norm));
    let _ = writeln!(out, "epsvis {}", format_f64(trigger.epsilon_vis));
    let _ = writeln!(out, "target {}", trigger.target);
    let mut first = true;
    for v in trigger.pattern.data() {
        if !first {
            out.push(' ');
        }
        out.push_str(&format_f64(*v));
        first = false;
    }
    out.push('\n');
    out
}

pub fn save_trigger(trigger: &Trigger, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, trigger_to_string(trigger)).map_err(|e| io_err(path, e))
}

pub fn load_trigger(path: impl AsRef<Path>) -> Result<Trigger> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut reader = LineReader::new(path, &text);
    check_magic(&mut reader, TRIGGER_MAGIC)?;

    fn field(reader: &mut LineReader, name: &'static str) -> Result<String> {
        let line = reader.next_line(name)?;
        let mut tokens = line.split_whitespace();
        if tokens.next() != Some(name) {
            return Err(reader.err(format!("expected `{name}`")));
        }
        tokens
            .next()
            .map(str::to_string)
            .ok_or_else(|| reader.err(format!("missing {name} value")))
    }
    let dims_tok = field(&mut reader, "dims")?;
    let d: usize = dims_tok.parse().map_err(|_| reader.err("bad dims"))?;
    let norm_tok = field(&mut reader, "norm")?;
    let eps_tok = field(&mut reader, "epsvis")?;
    let target_tok = field(&mut reader, "target")?;
    let norm = parse_norm(&reader, &norm_tok)?;
    let epsilon_vis = parse_f64(&reader, &eps_tok)?;
    let target = parse_usize(&reader, &target_tok)?;

    let line = reader.next_line("pattern")?;
    let values: Vec<f64> = line
        .split_whitespace()
        .map(|t| parse_f64(&reader, t))
        .collect::<Result<_>>()?;
    if values.len() != d {
        return Err(reader.err(format!("expected {d} pattern values, got {}", values.len())));
    }
    Trigger::new(Tensor::vector(values)?, epsilon_vis, norm, target)
}

/// A dumped adversarial example: the original, its label, and the crafted
/// adversarial input.
#[derive(Debug, Clone, PartialEq)]
pub struct DumpedExample {
    pub original: Tensor,
    pub adversarial: Tensor,
    pub label: usize,
}

/// Dump format: header with dimension, class count, and row count, then
/// one row per example: d original values, d adversarial values, label.
pub fn examples_to_string(examples: &[DumpedExample], num_classes: usize) -> String {
    let d = examples.first().map_or(0, |e| e.original.len());
    let mut out = String::new();
    let _ = writeln!(out, "{EXAMPLES_MAGIC} {d} {num_classes} {}", examples.len());
    for e in examples {
        for v in e.original.data().iter().chain(e.adversarial.data()) {
            out.push_str(&format_f64(*v));
            out.push(' ');
        }
        let _ = writeln!(out, "{}", e.label);
    }
    out
}

pub fn save_examples(
    examples: &[DumpedExample],
    num_classes: usize,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, examples_to_string(examples, num_classes)).map_err(|e| io_err(path, e))
}

pub fn load_examples(path: impl AsRef<Path>) -> Result<(Vec<DumpedExample>, usize)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut reader = LineReader::new(path, &text);
    let header = reader.next_line("header")?;
    let tokens: Vec<&str> = header.split_whitespace().collect();
    if tokens.len() != 5 || tokens[0] != "ADVEXAMPLES" || tokens[1] != "v1" {
        if tokens.first() == Some(&"ADVEXAMPLES") {
            return Err(Error::Version {
                found: header.to_string(),
                expected: EXAMPLES_MAGIC,
            });
        }
        return Err(reader.err("malformed examples header"));
    }
    let d = parse_usize(&reader, tokens[2])?;
    let k = parse_usize(&reader, tokens[3])?;
    let n = parse_usize(&reader, tokens[4])?;
    let mut examples = Vec::with_capacity(n);
    for row in 0..n {
        let line = reader.next_line(&format!("example {row}"))?;
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != 2 * d + 1 {
            return Err(reader.err(format!(
                "expected {} fields, got {}",
                2 * d + 1,
                tokens.len()
            )));
        }
        let values: Vec<f64> = tokens[..2 * d]
            .iter()
            .map(|t| parse_f64(&reader, t))
            .collect::<Result<_>>()?;
        examples.push(DumpedExample {
            original: Tensor::vector(values[..d].to_vec())?,
            adversarial: Tensor::vector(values[d..].to_vec())?,
            label: parse_usize(&reader, tokens[2 * d])?,
        });
    }
    Ok((examples, k))
}
