//! Optimization loop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions, EvalQuery, MetricsReport};
use crate::kg::MultiViewKg;
use crate::model::{Model, ModelConfig};
use crate::nn::{Adam, Tape};
use crate::query::{draw_sample, sample_training_set, Query, StructureTag};

/// Defaults are scaled down from 10^6 steps at batch 1024.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub model: ModelConfig,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Negatives per positive.
    pub k: usize,
    pub seed: u64,
    pub eval_interval: usize,
    /// Training queries sampled per training structure.
    pub pool_per_structure: usize,
    /// Pool queries per structure re-ranked at each evaluation.
    pub monitor_per_structure: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            learning_rate: 1e-3,
            steps: 20_000,
            batch_size: 128,
            k: 64,
            seed: 0,
            eval_interval: 500,
            pool_per_structure: 2000,
            monitor_per_structure: 50,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("steps", self.steps),
            ("batch_size", self.batch_size),
            ("k", self.k),
            ("eval_interval", self.eval_interval),
            ("pool_per_structure", self.pool_per_structure),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// Queries to re-rank during training and the KG defining their answers.
pub struct Monitor<'a> {
    pub kg: &'a MultiViewKg,
    pub queries: Vec<EvalQuery>,
    pub options: EvalOptions,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    /// Loss of every step.
    pub losses: Vec<f64>,
    pub reports: Vec<MetricsReport>,
}

impl TrainOutcome {
    /// Mean loss over consecutive windows of `window` steps.
    pub fn windowed_losses(&self, window: usize) -> Vec<f64> {
        self.losses
            .chunks(window.max(1))
            .map(|c| c.iter().sum::<f64>() / c.len() as f64)
            .collect()
    }
}

/// Training queries: `per_structure` of each training shape, constraint
/// kinds drawn uniformly, answer sets small enough to leave `k` negatives.
pub fn training_pool<R: Rng>(
    kg: &MultiViewKg,
    per_structure: usize,
    k: usize,
    rng: &mut R,
) -> Result<Vec<Query>> {
    let counts: Vec<(StructureTag, usize)> = StructureTag::TRAINING
        .iter()
        .map(|&t| (t, per_structure))
        .collect();
    Ok(sample_training_set(kg, &counts, k, rng)?
        .into_iter()
        .map(|s| s.query)
        .collect())
}

/// Samples a pool from `kg` and trains on it, monitoring a slice of the
/// pool.
pub fn train(kg: &MultiViewKg, config: &TrainingConfig) -> Result<TrainOutcome> {
    train_reporting(kg, config, &mut |_| {})
}

/// As [`train`], passing each report to `on_report` as it is produced.
pub fn train_reporting(
    kg: &MultiViewKg,
    config: &TrainingConfig,
    on_report: &mut dyn FnMut(&MetricsReport),
) -> Result<TrainOutcome> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
    let pool = training_pool(kg, config.pool_per_structure, config.k, &mut rng)?;
    let monitor = Monitor {
        kg,
        queries: monitor_slice(&pool, config.monitor_per_structure),
        options: EvalOptions::default(),
    };
    train_on(kg, config, &pool, Some(&monitor), on_report)
}

/// The first `per_structure` pool queries of every structure.
pub fn monitor_slice(pool: &[Query], per_structure: usize) -> Vec<EvalQuery> {
    let mut seen = std::collections::BTreeMap::new();
    pool.iter()
        .filter(|q| {
            let n = seen.entry(q.structure).or_insert(0usize);
            *n += 1;
            *n <= per_structure
        })
        .cloned()
        .map(EvalQuery::all)
        .collect()
}

/// Trains a fresh model on `pool` with negatives redrawn every step.
pub fn train_on(
    kg: &MultiViewKg,
    config: &TrainingConfig,
    pool: &[Query],
    monitor: Option<&Monitor<'_>>,
    on_report: &mut dyn FnMut(&MetricsReport),
) -> Result<TrainOutcome> {
    config.validate()?;
    if pool.is_empty() {
        return Err(Error::InvalidArgument("empty training pool".into()));
    }
    let mut model = Model::for_kg(config.model, kg, config.seed)?;
    let ctx = model.context(kg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut optimizer = Adam::new(config.learning_rate);
    let mut losses = Vec::with_capacity(config.steps);
    let mut reports = Vec::new();

    for step in 1..=config.steps {
        let batch = (0..config.batch_size)
            .map(|_| {
                let q = &pool[rng.gen_range(0..pool.len())];
                draw_sample(q, kg.num_entities(), config.k, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut tape = Tape::new();
        let fv = model.forward(&mut tape, &ctx);
        let loss = model.batch_loss(&mut tape, &fv, &batch)?;
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::Diverged {
                step,
                message: format!("loss is {value}"),
            });
        }
        losses.push(value);
        let grads = tape.backward(loss);
        optimizer.step(&mut model.store, &grads);

        if step % config.eval_interval == 0 || step == config.steps {
            if let Some(m) = monitor {
                let mut report = evaluate(&model, m.kg, &m.queries, &m.options, None)?;
                report.step = step;
                let window = &losses[losses.len().saturating_sub(config.eval_interval)..];
                report.loss = Some(window.iter().sum::<f64>() / window.len() as f64);
                on_report(&report);
                reports.push(report);
            }
        }
    }
    Ok(TrainOutcome {
        model,
        losses,
        reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::generate_toy_kg;

    fn tiny_config() -> TrainingConfig {
        TrainingConfig {
            model: ModelConfig {
                d: 8,
                ..ModelConfig::default()
            },
            steps: 30,
            batch_size: 8,
            k: 4,
            eval_interval: 10,
            pool_per_structure: 20,
            monitor_per_structure: 5,
            ..TrainingConfig::default()
        }
    }

    #[test]
    fn training_is_deterministic() {
        let kg = generate_toy_kg(20, 2, 3, 30, 0).unwrap();
        let a = train(&kg, &tiny_config()).unwrap();
        let b = train(&kg, &tiny_config()).unwrap();
        assert_eq!(a.losses, b.losses);
        assert_eq!(a.reports, b.reports);
        assert_eq!(a.reports.len(), 3);
    }

    #[test]
    fn invalid_config_is_rejected() {
        let kg = generate_toy_kg(20, 2, 3, 30, 0).unwrap();
        let cfg = TrainingConfig {
            batch_size: 0,
            ..tiny_config()
        };
        assert!(matches!(train(&kg, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn nan_loss_aborts() {
        let kg = generate_toy_kg(20, 2, 3, 30, 0).unwrap();
        let cfg = TrainingConfig {
            learning_rate: f64::MAX,
            steps: 5,
            ..tiny_config()
        };
        let err = train(&kg, &cfg).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }), "{err}");
    }
}
