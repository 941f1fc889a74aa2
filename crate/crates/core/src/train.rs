//! Seeded, resumable mini-batch training with gradient accumulation,
//! linear learning-rate decay and a divergence guard.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{AdamW, AdamWConfig, GradAccumulator, LinearDecay, ParamSet};
use crate::tape::{Tape, Var};

/// A model together with the loss it is trained on.
pub trait Objective {
    type Sample;
    fn params(&self) -> &ParamSet<f32>;
    fn params_mut(&mut self) -> &mut ParamSet<f32>;
    /// Scalar loss for one sample; `None` when the sample carries no label.
    fn loss(&self, tape: &mut Tape<'_, f32>, sample: &Self::Sample) -> Option<Var>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub input_side: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    /// Per-dataset draw probabilities (normalized on use).
    pub ratios: Vec<f64>,
    pub backend: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 200_000,
            batch_size: 16,
            input_side: 512,
            lr_start: 1e-4,
            lr_end: 1e-6,
            optimizer: AdamWConfig::default(),
            seed: 0,
            ratios: alloc::vec![1.0],
            backend: "vit-frozen".into(),
        }
    }
}

impl TrainConfig {
    /// Test profile: 2000 iterations, batch 4, 256-pixel inputs, stub backbone.
    pub fn desk() -> Self {
        Self { iterations: 2000, batch_size: 4, input_side: 256, backend: "stub".into(), ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch_size == 0 {
            return Err(Error::Config("iterations and batch_size must be at least 1".into()));
        }
        if !(self.lr_end > 0.0 && self.lr_start >= self.lr_end) {
            return Err(Error::Config(format!("need lr_start >= lr_end > 0, got {} and {}", self.lr_start, self.lr_end)));
        }
        RatioSampler::new(&self.ratios).map(|_| ())
    }

    pub fn schedule(&self) -> LinearDecay {
        LinearDecay { start: self.lr_start, end: self.lr_end, total_steps: self.iterations }
    }
}

/// Draws a dataset index per sample according to fixed ratios.
#[derive(Clone, Debug, PartialEq)]
pub struct RatioSampler {
    cumulative: Vec<f64>,
}

impl RatioSampler {
    pub fn new(ratios: &[f64]) -> Result<Self> {
        if ratios.is_empty() || ratios.iter().any(|r| !r.is_finite() || *r < 0.0) || ratios.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config(format!("invalid sampling ratios {ratios:?}")));
        }
        let total: f64 = ratios.iter().sum();
        let mut acc = 0.0;
        let cumulative = ratios
            .iter()
            .map(|r| {
                acc += r / total;
                acc
            })
            .collect();
        Ok(Self { cumulative })
    }

    pub fn draw<R: Rng>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        self.cumulative.iter().position(|&c| u < c).unwrap_or_else(|| {
            self.cumulative.iter().rposition(|&c| c > 0.0).unwrap_or(0)
        })
    }
}

/// Generator for everything random at `step`; depends only on `(seed, step)`.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

pub struct Trainer<M: Objective> {
    pub model: M,
    pub optimizer: AdamW<f32>,
    pub config: TrainConfig,
    /// Number of completed steps.
    pub step: u64,
    sampler: RatioSampler,
}

impl<M: Objective> Trainer<M> {
    pub fn new(model: M, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let sampler = RatioSampler::new(&config.ratios)?;
        let optimizer = AdamW::new(model.params(), config.optimizer);
        Ok(Self { model, optimizer, config, step: 0, sampler })
    }

    /// Restores optimizer state and step count, e.g. from a checkpoint.
    pub fn resume(&mut self, optimizer: AdamW<f32>, step: u64) {
        self.optimizer = optimizer;
        self.step = step;
    }

    /// `(dataset, index)` pairs drawn for `step`.
    pub fn batch_indices(&self, step: u64, sizes: &[usize]) -> Result<Vec<(usize, usize)>> {
        if sizes.len() != self.sampler.cumulative.len() {
            return Err(Error::Config(format!("{} datasets for {} ratios", sizes.len(), self.sampler.cumulative.len())));
        }
        let mut rng = step_rng(self.config.seed, step);
        (0..self.config.batch_size)
            .map(|_| {
                let d = self.sampler.draw(&mut rng);
                if sizes[d] == 0 {
                    return Err(Error::EmptyDataset(format!("dataset {d}")));
                }
                Ok((d, rng.random_range(0..sizes[d])))
            })
            .collect()
    }

    /// Runs one optimizer step on an explicit batch and returns its mean loss.
    pub fn step_on(&mut self, batch: &[&M::Sample]) -> Result<f64> {
        let mut acc = GradAccumulator::new(self.model.params());
        let mut total = 0.0;
        for sample in batch {
            let mut tape = Tape::new(self.model.params());
            let Some(loss) = self.model.loss(&mut tape, sample) else { continue };
            total += tape.value(loss).data()[0] as f64;
            acc.add(tape.backward(loss));
        }
        let n = acc.count();
        let mean = if n == 0 { 0.0 } else { total / n as f64 };
        if !mean.is_finite() {
            return Err(Error::Diverged { step: self.step, loss: mean });
        }
        let lr = self.config.schedule().at(self.step);
        if n > 0 {
            let grads = acc.mean();
            self.optimizer.update(self.model.params_mut(), &grads, lr);
        }
        self.step += 1;
        Ok(mean)
    }

    /// One step with a seeded draw from `datasets`.
    pub fn step(&mut self, datasets: &[&[M::Sample]]) -> Result<f64> {
        let sizes: Vec<usize> = datasets.iter().map(|d| d.len()).collect();
        let picks = self.batch_indices(self.step, &sizes)?;
        let batch: Vec<&M::Sample> = picks.iter().map(|&(d, i)| &datasets[d][i]).collect();
        self.step_on(&batch)
    }

    /// Trains until `config.iterations` steps are done, calling `after_step`
    /// with the step count and loss after each step.
    pub fn run<F>(&mut self, datasets: &[&[M::Sample]], mut after_step: F) -> Result<()>
    where
        F: FnMut(&Self, f64) -> Result<()>,
    {
        if datasets.iter().all(|d| d.is_empty()) {
            return Err(Error::EmptyDataset("no training samples".into()));
        }
        while self.step < self.config.iterations {
            let loss = self.step(datasets)?;
            after_step(self, loss)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_profile() {
        let c = TrainConfig::desk();
        assert_eq!((c.iterations, c.batch_size, c.input_side, c.backend.as_str()), (2000, 4, 256, "stub"));
        assert!(c.validate().is_ok());
    }

    #[test]
    fn bad_learning_rates_rejected() {
        let c = TrainConfig { lr_start: 1e-6, lr_end: 1e-4, ..TrainConfig::default() };
        assert!(c.validate().is_err());
        assert!(RatioSampler::new(&[0.0, 0.0]).is_err());
    }
}
