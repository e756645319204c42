//! Side-by-side training runs of several separator variants.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::{BlockKind, SeparatorConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::model::expected_param_count;
use crate::scalar::Scalar;
use crate::signals::MixtureExample;
use crate::trainer::eval::evaluate;
use crate::trainer::train::Trainer;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchVariant {
    pub name: String,
    pub config: SeparatorConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub name: String,
    pub params: usize,
    pub ffn_dim: usize,
    pub steps: usize,
    pub steps_per_sec: f64,
    pub final_train_si_snri: f64,
}

/// Chooses the transformer feed-forward width whose total parameter count is
/// closest to `target`. Recurrent configurations are returned unchanged.
pub fn match_param_count(cfg: &SeparatorConfig, target: usize) -> SeparatorConfig {
    if cfg.block != BlockKind::Transformer {
        return cfg.clone();
    }
    let with = |f: usize| SeparatorConfig {
        ffn_dim: f,
        ..cfg.clone()
    };
    // The count is affine in the feed-forward width.
    let c1 = expected_param_count(&with(1)) as f64;
    let slope = expected_param_count(&with(2)) as f64 - c1;
    let guess = 1.0 + (target as f64 - c1) / slope;
    let lo = guess.floor().max(1.0) as usize;
    let best = [lo, lo + 1]
        .into_iter()
        .min_by_key(|&f| expected_param_count(&with(f)).abs_diff(target))
        .unwrap();
    with(best)
}

/// Trains each variant for `steps` optimiser steps over the same batch
/// sequence and reports its training-set SI-SNRi. Variants after the first
/// are resized towards the first one's parameter count.
pub fn bench<T: Scalar>(
    variants: &[BenchVariant],
    train_cfg: &TrainConfig,
    examples: &[MixtureExample],
    steps: usize,
) -> Result<Vec<BenchRow>> {
    if variants.len() < 2 {
        return Err(Error::invalid("bench needs at least two variants"));
    }
    if examples.is_empty() || steps == 0 {
        return Err(Error::invalid("bench needs examples and a positive step count"));
    }
    let base = &variants[0].config;
    for v in &variants[1..] {
        let c = &v.config;
        let key = |c: &SeparatorConfig| (c.encoder_dim, c.window, c.stride, c.sources, c.sample_rate);
        if key(c) != key(base) {
            return Err(Error::ConfigMismatch(format!(
                "variant {} differs from {} in encoder or source settings",
                v.name, variants[0].name
            )));
        }
    }
    let target = expected_param_count(base);
    let mut rows = Vec::with_capacity(variants.len());
    for v in variants {
        let cfg = if std::ptr::eq(v, &variants[0]) {
            v.config.clone()
        } else {
            match_param_count(&v.config, target)
        };
        let mut trainer = Trainer::<T>::new(&cfg, train_cfg)?;
        let start = Instant::now();
        let mut epoch = 1;
        'outer: loop {
            for batch in trainer.epoch_batches(epoch, examples) {
                if trainer.step >= steps {
                    break 'outer;
                }
                trainer.train_step(&batch)?;
            }
            epoch += 1;
        }
        let elapsed = start.elapsed().as_secs_f64().max(1e-9);
        let table = evaluate(&trainer.separator, examples)?;
        rows.push(BenchRow {
            name: v.name.clone(),
            params: trainer.separator.param_count(),
            ffn_dim: cfg.ffn_dim,
            steps,
            steps_per_sec: steps as f64 / elapsed,
            final_train_si_snri: table.mean_si_snri,
        });
    }
    Ok(rows)
}
