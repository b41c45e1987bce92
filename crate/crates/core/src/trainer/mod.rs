//! Pretraining on the poisoned stream and the trigger-efficacy gate.

mod efficacy;

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::model::{ModelConfig, TransformerModel};
use crate::numerics::{adamw_step, AdamState, AdamW, Tensor, TokenId};

pub use efficacy::{
    evaluate_trigger_efficacy, measure_rates, EfficacyReport, GateThresholds, LangEfficacy,
    PromptTriple, TriggerSet, MIN_CONTEXTS,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub seed: u64,
    pub eval_every: usize,
}

impl Default for TrainConfig {
    /// Sized to finish in a few minutes on one CPU core.
    fn default() -> Self {
        TrainConfig {
            steps: 3000,
            batch_size: 4,
            seq_len: 128,
            lr: 2e-3,
            warmup_steps: 100,
            betas: (0.9, 0.95),
            weight_decay: 0.0,
            seed: 0,
            eval_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        let bad = |m: &str| Err(LabError::InvalidConfig(m.to_string()));
        if self.steps == 0 || self.batch_size == 0 || self.seq_len == 0 || self.eval_every == 0 {
            return bad("steps, batch_size, seq_len and eval_every must be >= 1");
        }
        if self.seq_len > model.max_seq_len {
            return bad("seq_len exceeds the model's max_seq_len");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.weight_decay < 0.0 {
            return bad("lr must be positive and weight_decay non-negative");
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return bad("betas must lie in [0, 1)");
        }
        Ok(())
    }

    fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            self.lr * (step + 1) as f64 / self.warmup_steps as f64
        } else {
            self.lr
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    /// Mean training loss since the previous point.
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub curve: Vec<LossPoint>,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub wall_secs: f64,
}

impl TrainLog {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("step,loss\n");
        for p in &self.curve {
            out.push_str(&format!("{},{}\n", p.step, p.loss));
        }
        let mut f = std::fs::File::create(path).map_err(|e| LabError::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| LabError::io(path, e))
    }
}

/// Trains `model` in place on random `seq_len + 1` windows of `stream`.
///
/// AdamW with linear warmup then constant learning rate. Fails with
/// [`LabError::DivergedLoss`] as soon as a step's loss is non-finite or more
/// than ten times the first step's loss.
pub fn train(model: &mut TransformerModel, stream: &[TokenId], config: &TrainConfig) -> Result<TrainLog> {
    config.validate(model.config())?;
    let window = config.seq_len + 1;
    if stream.len() < window {
        return Err(LabError::InvalidConfig(format!(
            "stream of {} tokens is shorter than one window",
            stream.len()
        )));
    }
    if let Some(&bad) = stream.iter().find(|&&t| t >= model.config().vocab_size) {
        return Err(LabError::InvalidConfig(format!("token {bad} outside vocab")));
    }

    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = AdamState::default();
    let mut curve = Vec::new();
    let mut initial = f64::NAN;
    let mut last = f64::NAN;
    let mut running = 0.0;
    let mut since = 0;

    for step in 0..config.steps {
        let windows: Vec<Vec<TokenId>> = (0..config.batch_size)
            .map(|_| {
                let start = rng.gen_range(0..=stream.len() - window);
                stream[start..start + window].to_vec()
            })
            .collect();

        let (loss, grads) = model.loss_and_grads(&windows)?;
        if step == 0 {
            initial = loss;
        }
        if !loss.is_finite() || loss > 10.0 * initial {
            return Err(LabError::DivergedLoss { step, loss });
        }

        let hp = AdamW {
            lr: config.lr_at(step),
            beta1: config.betas.0,
            beta2: config.betas.1,
            eps: 1e-8,
            weight_decay: config.weight_decay,
        };
        let grad_refs: Vec<&Tensor> = grads.iter().collect();
        adamw_step(&mut model.params_mut(), &grad_refs, &mut state, &hp)?;

        last = loss;
        running += loss;
        since += 1;
        let done = step + 1;
        if done == 1 || done % config.eval_every == 0 || done == config.steps {
            let mean = running / since as f64;
            curve.push(LossPoint { step: done, loss: mean });
            log::info!("step {done}/{} loss {mean:.4}", config.steps);
            running = 0.0;
            since = 0;
        }
    }

    Ok(TrainLog {
        curve,
        initial_loss: initial,
        final_loss: last,
        wall_secs: started.elapsed().as_secs_f64(),
    })
}
