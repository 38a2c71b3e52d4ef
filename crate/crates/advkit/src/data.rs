//! Synthetic desk-scale datasets on the unit box: interleaved two-moons in
//! 2-D and 6x6 binary glyphs in four classes.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::net::Sample;
use crate::tensor::Tensor;

/// Supported dataset families.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    TwoMoons,
    GridDigits,
    /// Loaded from a file rather than generated.
    Custom,
}

impl DatasetKind {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "two-moons" => Ok(DatasetKind::TwoMoons),
            "grid-digits" => Ok(DatasetKind::GridDigits),
            "custom" => Ok(DatasetKind::Custom),
            other => Err(Error::Unknown {
                what: "dataset kind",
                name: other.into(),
            }),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            DatasetKind::TwoMoons => "two-moons",
            DatasetKind::GridDigits => "grid-digits",
            DatasetKind::Custom => "custom",
        }
    }
}

/// A labelled dataset whose inputs all lie inside the unit box.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub kind: DatasetKind,
    pub seed: u64,
}

impl Dataset {
    pub fn new(
        inputs: Vec<Tensor>,
        labels: Vec<usize>,
        num_classes: usize,
        kind: DatasetKind,
        seed: u64,
    ) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(Error::Precondition(format!(
                "{} inputs vs {} labels",
                inputs.len(),
                labels.len()
            )));
        }
        for (i, label) in labels.iter().enumerate() {
            if *label >= num_classes {
                return Err(Error::LabelOutOfRange {
                    label: *label,
                    num_classes,
                });
            }
            if inputs[i].data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Precondition(format!(
                    "input {i} leaves the unit box"
                )));
            }
        }
        Ok(Self {
            inputs,
            labels,
            num_classes,
            kind,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.first().map_or(0, Tensor::len)
    }

    /// Clones into the (input, label) pair form the training APIs take.
    pub fn samples(&self) -> Vec<Sample> {
        self.inputs
            .iter()
            .cloned()
            .zip(self.labels.iter().copied())
            .collect()
    }
}

/// Generates a dataset. Deterministic given the tuple (kind, n, noise,
/// seed); classes are balanced within one sample.
pub fn gen_dataset(kind: DatasetKind, n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::Precondition("need n >= 2".into()));
    }
    if noise < 0.0 {
        return Err(Error::Precondition("noise must be non-negative".into()));
    }
    match kind {
        DatasetKind::TwoMoons => two_moons(n, noise, seed),
        DatasetKind::GridDigits => grid_digits(n, noise, seed),
        DatasetKind::Custom => Err(Error::Unknown {
            what: "generatable dataset kind",
            name: "custom".into(),
        }),
    }
}

// Fixed affine map taking the raw moons (x in [-1, 2], y in [-0.5, 1])
// into the unit box with room for noise.
fn moon_scale(x: f64, y: f64) -> (f64, f64) {
    (
        ((x + 1.75) / 4.5).clamp(0.0, 1.0),
        ((y + 1.0) / 2.5).clamp(0.0, 1.0),
    )
}

/// Two interleaved half-circles with Gaussian coordinate noise, scaled
/// into the unit square. Even indices go to class 0, odd to class 1.
fn two_moons(n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let t: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let (mut x, mut y) = if label == 0 {
            (t.cos(), t.sin())
        } else {
            (1.0 - t.cos(), 0.5 - t.sin())
        };
        let nx: f64 = StandardNormal.sample(&mut rng);
        let ny: f64 = StandardNormal.sample(&mut rng);
        x += noise * nx;
        y += noise * ny;
        let (sx, sy) = moon_scale(x, y);
        inputs.push(Tensor::vector(vec![sx, sy])?);
        labels.push(label);
    }
    Dataset::new(inputs, labels, 2, DatasetKind::TwoMoons, seed)
}

/// Glyph side length; inputs are GRID_SIDE * GRID_SIDE flat pixels.
pub const GRID_SIDE: usize = 6;
pub const GRID_CLASSES: usize = 4;

/// Canonical 6x6 glyphs, one per class, as (row, col) on-pixels. The
/// top-left 2x2 corner stays empty in every class so a corner trigger
/// patch never collides with glyph structure.
fn glyph_pixels(class: usize) -> &'static [(usize, usize)] {
    match class {
        // Box: perimeter of the 4x4 block at rows/cols 2..=5.
        0 => &[
            (2, 2),
            (2, 3),
            (2, 4),
            (2, 5),
            (3, 2),
            (3, 5),
            (4, 2),
            (4, 5),
            (5, 2),
            (5, 3),
            (5, 4),
            (5, 5),
        ],
        // X: both diagonals of the same block.
        1 => &[
            (2, 2),
            (3, 3),
            (4, 4),
            (5, 5),
            (2, 5),
            (3, 4),
            (4, 3),
            (5, 2),
        ],
        // Stripes: full rows 2 and 4.
        2 => &[
            (2, 0),
            (2, 1),
            (2, 2),
            (2, 3),
            (2, 4),
            (2, 5),
            (4, 0),
            (4, 1),
            (4, 2),
            (4, 3),
            (4, 4),
            (4, 5),
        ],
        // Plus: column 3 and row 3 over rows/cols 1..=5.
        3 => &[
            (1, 3),
            (2, 3),
            (3, 3),
            (4, 3),
            (5, 3),
            (3, 1),
            (3, 2),
            (3, 4),
            (3, 5),
        ],
        _ => panic!("glyph class out of range"),
    }
}

/// The canonical noise-free glyph for a class as a flat pixel vector.
pub fn canonical_glyph(class: usize) -> Result<Tensor> {
    if class >= GRID_CLASSES {
        return Err(Error::LabelOutOfRange {
            label: class,
            num_classes: GRID_CLASSES,
        });
    }
    let mut pixels = vec![0.0; GRID_SIDE * GRID_SIDE];
    for &(r, c) in glyph_pixels(class) {
        pixels[r * GRID_SIDE + c] = 1.0;
    }
    Tensor::vector(pixels)
}

/// A trigger pattern covering the top-left 2x2 corner with `amplitude`.
pub fn corner_trigger_pattern(amplitude: f64) -> Tensor {
    let mut pixels = vec![0.0; GRID_SIDE * GRID_SIDE];
    for &(r, c) in &[(0usize, 0usize), (0, 1), (1, 0), (1, 1)] {
        pixels[r * GRID_SIDE + c] = amplitude;
    }
    Tensor::vector(pixels).expect("finite pattern")
}

/// 6x6 binary glyphs over four classes with per-pixel flip noise: each
/// pixel independently flips (v -> 1 - v) with probability `noise`.
fn grid_digits(n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % GRID_CLASSES;
        let mut pixels = canonical_glyph(label)?.into_data();
        for p in pixels.iter_mut() {
            if rng.random_range(0.0..1.0) < noise {
                *p = 1.0 - *p;
            }
        }
        inputs.push(Tensor::vector(pixels)?);
        labels.push(label);
    }
    Dataset::new(inputs, labels, GRID_CLASSES, DatasetKind::GridDigits, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let a = gen_dataset(DatasetKind::TwoMoons, 60, 0.1, 7).unwrap();
        let b = gen_dataset(DatasetKind::TwoMoons, 60, 0.1, 7).unwrap();
        assert_eq!(a, b);
        let c = gen_dataset(DatasetKind::TwoMoons, 60, 0.1, 8).unwrap();
        assert_ne!(a, c);

        let a = gen_dataset(DatasetKind::GridDigits, 40, 0.05, 3).unwrap();
        let b = gen_dataset(DatasetKind::GridDigits, 40, 0.05, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn two_moons_splits_evenly() {
        let d = gen_dataset(DatasetKind::TwoMoons, 100, 0.1, 1).unwrap();
        let ones = d.labels.iter().filter(|&&y| y == 1).count();
        assert_eq!(ones, 50);
        assert_eq!(d.num_classes, 2);
        assert_eq!(d.input_dim(), 2);
    }

    #[test]
    fn grid_digits_classes_balanced_within_one() {
        for n in [40usize, 41, 42, 43] {
            let d = gen_dataset(DatasetKind::GridDigits, n, 0.1, 2).unwrap();
            let mut counts = [0usize; GRID_CLASSES];
            for &y in &d.labels {
                counts[y] += 1;
            }
            let max = counts.iter().max().unwrap();
            let min = counts.iter().min().unwrap();
            assert!(max - min <= 1, "counts {counts:?} for n = {n}");
        }
    }

    #[test]
    fn noise_free_grid_digits_are_canonical_glyphs() {
        let d = gen_dataset(DatasetKind::GridDigits, 20, 0.0, 5).unwrap();
        for (x, y) in d.inputs.iter().zip(&d.labels) {
            assert_eq!(x, &canonical_glyph(*y).unwrap());
        }
    }

    #[test]
    fn all_inputs_stay_in_the_unit_box() {
        for noise in [0.0, 0.1, 0.5] {
            let d = gen_dataset(DatasetKind::TwoMoons, 200, noise, 9).unwrap();
            for x in &d.inputs {
                assert!(x.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn glyphs_leave_the_trigger_corner_empty_and_differ() {
        for class in 0..GRID_CLASSES {
            let g = canonical_glyph(class).unwrap();
            for &(r, c) in &[(0usize, 0usize), (0, 1), (1, 0), (1, 1)] {
                assert_eq!(g.data()[r * GRID_SIDE + c], 0.0, "corner hit by class {class}");
            }
        }
        for a in 0..GRID_CLASSES {
            for b in a + 1..GRID_CLASSES {
                assert_ne!(canonical_glyph(a).unwrap(), canonical_glyph(b).unwrap());
            }
        }
    }

    #[test]
    fn custom_kind_cannot_be_generated() {
        assert!(gen_dataset(DatasetKind::Custom, 10, 0.0, 1).is_err());
        assert!(matches!(
            DatasetKind::parse("imagenet"),
            Err(Error::Unknown { .. })
        ));
    }
}
