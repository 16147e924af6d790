//! Synthetic classification datasets, reproducible from a seed and
//! class-balanced in every split.

use serde::{Deserialize, Serialize};

use crate::netir::TensorShape;
use crate::rng::{item_seed, Rng};
use crate::runtime::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Generator {
    /// `classes` isotropic Gaussian clusters in `dims` dimensions with centres
    /// drawn uniformly from `[-1, 1]^dims` and standard deviation `spread`.
    GaussianBlobs { classes: usize, dims: usize, spread: f64 },
    /// Two interleaved spirals in the plane with Gaussian jitter `noise`.
    TwoSpirals { noise: f64 },
    /// Uniform points on `[-1, 1]^2`, labelled by the parity of a
    /// `cells x cells` grid.
    Checkerboard { cells: usize },
}

impl Generator {
    pub fn num_classes(&self) -> usize {
        match self {
            Generator::GaussianBlobs { classes, .. } => *classes,
            Generator::TwoSpirals { .. } | Generator::Checkerboard { .. } => 2,
        }
    }

    pub fn dims(&self) -> usize {
        match self {
            Generator::GaussianBlobs { dims, .. } => *dims,
            Generator::TwoSpirals { .. } | Generator::Checkerboard { .. } => 2,
        }
    }

    pub fn input_shape(&self) -> TensorShape {
        TensorShape::vector(self.dims())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDataset {
    pub generator: Generator,
    pub n_train: usize,
    /// Held-out split used for hyper-parameter selection.
    #[serde(default)]
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Split {
    pub inputs: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub num_classes: usize,
    pub input_shape: TensorShape,
    pub train: Split,
    pub val: Split,
    pub test: Split,
}

impl SyntheticDataset {
    pub fn new(generator: Generator, n_train: usize, n_val: usize, n_test: usize, seed: u64) -> Self {
        Self {
            generator,
            n_train,
            n_val,
            n_test,
            seed,
        }
    }

    pub fn generate(&self) -> Dataset {
        let mut rng = Rng::new(self.seed);
        let centres: Vec<Vec<f64>> = match self.generator {
            Generator::GaussianBlobs { classes, dims, .. } => (0..classes)
                .map(|_| (0..dims).map(|_| rng.uniform(-1.0, 1.0)).collect())
                .collect(),
            _ => Vec::new(),
        };
        let split = |salt: u64, n: usize| {
            let mut rng = Rng::new(item_seed(self.seed, salt));
            let k = self.generator.num_classes();
            let mut labels: Vec<usize> = (0..n).map(|i| i % k).collect();
            rng.shuffle(&mut labels);
            let inputs = labels
                .iter()
                .map(|&y| Tensor::vector(self.point(y, &centres, &mut rng)))
                .collect();
            Split { inputs, labels }
        };
        Dataset {
            num_classes: self.generator.num_classes(),
            input_shape: self.generator.input_shape(),
            train: split(1, self.n_train),
            val: split(2, self.n_val),
            test: split(3, self.n_test),
        }
    }

    fn point(&self, label: usize, centres: &[Vec<f64>], rng: &mut Rng) -> Vec<f64> {
        match self.generator {
            Generator::GaussianBlobs { spread, .. } => {
                centres[label].iter().map(|c| c + spread * rng.normal()).collect()
            }
            Generator::TwoSpirals { noise } => {
                let t = rng.uniform(0.0, 1.0).sqrt() * 3.0 * std::f64::consts::PI;
                let r = t / (3.0 * std::f64::consts::PI);
                let sign = if label == 0 { 1.0 } else { -1.0 };
                vec![
                    sign * r * t.cos() + noise * rng.normal(),
                    sign * r * t.sin() + noise * rng.normal(),
                ]
            }
            Generator::Checkerboard { cells } => loop {
                let x = rng.uniform(-1.0, 1.0);
                let y = rng.uniform(-1.0, 1.0);
                let cx = ((x + 1.0) / 2.0 * cells as f64) as usize;
                let cy = ((y + 1.0) / 2.0 * cells as f64) as usize;
                if (cx + cy) % 2 == label {
                    break vec![x, y];
                }
            },
        }
    }
}
