use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    /// Epochs without validation improvement before the learning rate halves.
    pub plateau_patience: usize,
    pub max_epochs: usize,
    /// Stop once this many epochs pass without a new best validation loss.
    pub early_stopping: Option<usize>,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.003,
            batch_size: 128,
            weight_decay: 0.001,
            plateau_patience: 10,
            max_epochs: 100,
            early_stopping: Some(25),
            validation_fraction: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidInput("learning rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidInput("batch size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::InvalidInput(
                "validation fraction must lie in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Adam with decoupled weight decay (β₁ = 0.9, β₂ = 0.999, ε = 1e-8).
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(shapes: &[(usize, usize)], lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
            v: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
        }
    }

    pub fn for_params(params: &[&mut Array2<f64>], lr: f64, weight_decay: f64) -> Self {
        let shapes: Vec<_> = params.iter().map(|p| p.dim()).collect();
        Self::new(&shapes, lr, weight_decay)
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [&mut Array2<f64>], grads: &[Array2<f64>]) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps, lr, wd) = (self.beta1, self.beta2, self.eps, self.lr, self.weight_decay);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            ndarray::Zip::from(&mut **p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let mhat = *m / c1;
                    let vhat = *v / c2;
                    *p -= lr * (mhat / (vhat.sqrt() + eps) + wd * *p);
                });
        }
    }
}

/// Halves the learning rate after `patience` epochs without improvement.
#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    patience: usize,
    best: f64,
    bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    /// Records one validation loss; returns true when the rate should halve.
    pub fn observe(&mut self, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.bad_epochs = 0;
            return false;
        }
        self.bad_epochs += 1;
        if self.bad_epochs >= self.patience.max(1) {
            self.bad_epochs = 0;
            true
        } else {
            false
        }
    }
}

/// A differentiable training problem over `len()` rows of data.
pub trait Objective {
    type Model: Clone;

    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn params_mut<'a>(&self, model: &'a mut Self::Model) -> Vec<&'a mut Array2<f64>>;

    /// Mean loss over `rows` and its gradient, aligned with `params_mut`.
    fn loss_and_grad(&self, model: &Self::Model, rows: &[usize])
        -> Result<(f64, Vec<Array2<f64>>)>;

    fn loss(&self, model: &Self::Model, rows: &[usize]) -> Result<f64>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: f64,
    pub best_validation_loss: f64,
    pub learning_rate: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<M> {
    pub model: M,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

/// Splits `0..n` into (train, validation) rows with a seeded shuffle.
pub fn split_rows(n: usize, validation_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rows: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rows.shuffle(&mut rng);
    let mut n_val = (n as f64 * validation_fraction).round() as usize;
    if validation_fraction > 0.0 && n >= 2 {
        n_val = n_val.clamp(1, n - 1);
    } else {
        n_val = 0;
    }
    let val = rows.split_off(n - n_val);
    (rows, val)
}

/// Mini-batch Adam with plateau halving, keeping the parameters with the
/// best validation loss.
pub fn train<O: Objective>(
    objective: &O,
    init: O::Model,
    config: &TrainConfig,
) -> Result<TrainOutcome<O::Model>> {
    config.validate()?;
    if objective.is_empty() {
        return Err(Error::InvalidInput("training set is empty".into()));
    }
    let (mut train_rows, val_rows) =
        split_rows(objective.len(), config.validation_fraction, config.seed);
    let val_or_train = |m: &O::Model, train_rows: &[usize]| -> Result<f64> {
        if val_rows.is_empty() {
            objective.loss(m, train_rows)
        } else {
            objective.loss(m, &val_rows)
        }
    };

    let mut model = init;
    let mut adam = Adam::for_params(
        &objective.params_mut(&mut model),
        config.learning_rate,
        config.weight_decay,
    );
    let mut scheduler = PlateauScheduler::new(config.plateau_patience);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_ba7c);

    let mut best_loss = val_or_train(&model, &train_rows)?;
    if !best_loss.is_finite() {
        return Err(Error::Numerical(
            "initial validation loss is not finite".into(),
        ));
    }
    let mut best_model = model.clone();
    let mut best_epoch = 0;
    let mut history = Vec::with_capacity(config.max_epochs);

    for epoch in 1..=config.max_epochs {
        train_rows.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in train_rows.chunks(config.batch_size) {
            let (loss, grads) = objective.loss_and_grad(&model, batch)?;
            if !loss.is_finite() || grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(Error::Numerical(format!(
                    "non-finite training loss or gradient in epoch {epoch}"
                )));
            }
            total += loss * batch.len() as f64;
            adam.step(&mut objective.params_mut(&mut model), &grads);
        }
        let train_loss = total / train_rows.len() as f64;
        let val_loss = val_or_train(&model, &train_rows)?;
        if !val_loss.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite validation loss in epoch {epoch}"
            )));
        }
        if val_loss < best_loss {
            best_loss = val_loss;
            best_model = model.clone();
            best_epoch = epoch;
        }
        if scheduler.observe(val_loss) {
            adam.lr *= 0.5;
        }
        history.push(EpochRecord {
            epoch,
            train_loss,
            validation_loss: val_loss,
            best_validation_loss: best_loss,
            learning_rate: adam.lr,
        });
        if let Some(stop) = config.early_stopping {
            if epoch - best_epoch >= stop {
                break;
            }
        }
    }
    Ok(TrainOutcome {
        model: best_model,
        best_epoch,
        history,
    })
}
