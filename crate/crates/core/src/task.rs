//! Synthetic Gaussian-mixture classification task.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub input_dim: usize,
    pub classes: usize,
    pub train_size: usize,
    pub test_size: usize,
    /// Standard deviation of the class centres around the origin; samples
    /// have unit noise around their centre.
    pub center_spread: f64,
    pub seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            input_dim: 8,
            classes: 4,
            train_size: 9600,
            test_size: 2000,
            center_spread: 1.0,
            seed: 0,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.classes < 2 {
            return Err(Error::config("task needs input_dim >= 1 and classes >= 2"));
        }
        if self.train_size == 0 || self.test_size == 0 {
            return Err(Error::config("task needs non-empty train and test splits"));
        }
        if !(self.center_spread.is_finite() && self.center_spread > 0.0) {
            return Err(Error::config("center_spread must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub config: TaskConfig,
    pub train: Dataset,
    pub test: Dataset,
}

impl SyntheticTask {
    pub fn generate(config: &TaskConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let spread = Normal::new(0.0, config.center_spread).expect("validated spread");
        let centres: Vec<Vec<f64>> = (0..config.classes)
            .map(|_| {
                (0..config.input_dim)
                    .map(|_| spread.sample(&mut rng))
                    .collect()
            })
            .collect();
        let train = sample(&centres, config.train_size, &mut rng);
        let test = sample(&centres, config.test_size, &mut rng);
        Ok(SyntheticTask {
            config: config.clone(),
            train,
            test,
        })
    }

    /// Steps in one pass over the training split at `batch`.
    pub fn steps_per_epoch(&self, batch: usize) -> usize {
        self.train.len().div_ceil(batch.max(1))
    }
}

fn sample<R: Rng>(centres: &[Vec<f64>], n: usize, rng: &mut R) -> Dataset {
    let dim = centres[0].len();
    let noise = Normal::new(0.0, 1.0).expect("unit noise");
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % centres.len();
        labels.push(y);
        data.extend(centres[y].iter().map(|c| c + noise.sample(rng)));
    }
    Dataset {
        inputs: Matrix::from_vec(n, dim, data).expect("sized buffer"),
        labels,
    }
}

/// Draws minibatches without replacement from reshuffled epochs.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(len: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        BatchSampler {
            order,
            cursor: 0,
            rng,
        }
    }

    pub fn next_indices(&mut self, batch: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(batch);
        while out.len() < batch {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            let take = (batch - out.len()).min(self.order.len() - self.cursor);
            out.extend_from_slice(&self.order[self.cursor..self.cursor + take]);
            self.cursor += take;
        }
        out
    }
}
