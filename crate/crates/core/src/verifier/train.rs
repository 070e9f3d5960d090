//! Minibatch training loop for the verifier.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Verifier, VerifierError, VerifierEval, VerifierInput};
use crate::nn::AdamConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifierTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub adam: AdamConfig,
    /// Held-out evaluation interval in steps; 0 evaluates only at the end.
    pub eval_every: usize,
}

impl Default for VerifierTrainConfig {
    fn default() -> Self {
        Self { steps: 3000, batch: 32, adam: AdamConfig { lr: 3e-4, ..Default::default() }, eval_every: 500 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VerifierTrainLog {
    pub step: usize,
    pub loss: f64,
    pub heldout: Option<VerifierEval>,
}

/// Train on `(input, label)` pairs drawn uniformly with replacement; the
/// learning rate decays linearly to a tenth of its base value.
pub fn train_verifier(
    v: &mut Verifier,
    train: &[(&VerifierInput, f64)],
    heldout: &[(&VerifierInput, f64)],
    cfg: &VerifierTrainConfig,
    rng: &mut impl Rng,
) -> Result<Vec<VerifierTrainLog>, VerifierError> {
    if train.is_empty() || cfg.batch == 0 {
        return Err(VerifierError::EmptyBatch);
    }
    let mut log = Vec::new();
    let mut running = 0.0;
    let mut seen = 0usize;
    for step in 0..cfg.steps {
        let batch: Vec<(&VerifierInput, f64)> = (0..cfg.batch).map(|_| train[rng.random_range(0..train.len())]).collect();
        let frac = step as f64 / cfg.steps.max(1) as f64;
        let adam = AdamConfig { lr: cfg.adam.lr * (1.0 - 0.9 * frac), ..cfg.adam };
        running += v.train_step(&batch, &adam)?;
        seen += 1;
        let last = step + 1 == cfg.steps;
        if last || (cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0) {
            let eval = if heldout.is_empty() { None } else { Some(v.evaluate(heldout)?) };
            let loss = running / seen as f64;
            if let Some(e) = &eval {
                log::info!("verifier step {}: loss {loss:.4} held-out acc {:.3} sep {:.3}", step + 1, e.accuracy, e.separation());
            }
            log.push(VerifierTrainLog { step: step + 1, loss, heldout: eval });
            running = 0.0;
            seen = 0;
        }
    }
    Ok(log)
}
