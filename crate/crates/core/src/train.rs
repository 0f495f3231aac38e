//! Training loop for the classifier and, optionally, the explainer.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sehm_autodiff::{adam_step, AdamConfig, AdamState, Tensor};

use crate::data::{split_indices, Dataset, EncodedSet, Split, Standardizer};
use crate::error::{config_err, Result, SehmError};
use crate::explainer::{perturbation_targets, train_explainer_on, ExplainerConfig, ExplainerTrainer, ThetaNetwork};
use crate::metrics::{auprc, auroc};
use crate::model::{ModelConfig, SehmModel};
use crate::recurrent::bce_mean;
use crate::rng;

pub const BATCH_SIZES: [usize; 5] = [16, 32, 64, 128, 256];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExplainerMode {
    /// θ-network updated alongside every classifier batch.
    Joint,
    /// θ-network fitted after the classifier has finished training.
    Separate,
    /// No explainer.
    Off,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Seed for batch order and explainer perturbations.
    pub seed: u64,
    pub split_seed: u64,
    pub explainer_mode: ExplainerMode,
    /// Training samples used as explainer centers in separate mode.
    pub explainer_centers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            learning_rate: 1e-2,
            epochs: 30,
            seed: 1,
            split_seed: 7,
            explainer_mode: ExplainerMode::Joint,
            explainer_centers: 200,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !BATCH_SIZES.contains(&self.batch_size) {
            return config_err(format!("batch size {} not in {BATCH_SIZES:?}", self.batch_size));
        }
        if !(1e-4..=1e-2).contains(&self.learning_rate) {
            return config_err(format!("learning rate {} outside [1e-4, 1e-2]", self.learning_rate));
        }
        if self.epochs == 0 {
            return config_err("epochs must be positive");
        }
        Ok(())
    }
}

/// The three architectural switches of the ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub locality: bool,
    pub zero_encoding: bool,
    pub kernelization: bool,
}

impl AblationFlags {
    /// All eight combinations, full model first.
    pub fn grid() -> [AblationFlags; 8] {
        let mut out = [AblationFlags {
            locality: true,
            zero_encoding: true,
            kernelization: true,
        }; 8];
        for (i, f) in out.iter_mut().enumerate() {
            f.locality = i & 4 == 0;
            f.zero_encoding = i & 2 == 0;
            f.kernelization = i & 1 == 0;
        }
        out
    }

    pub fn of(cfg: &ModelConfig) -> Self {
        Self {
            locality: cfg.locality,
            zero_encoding: cfg.zero_encoding,
            kernelization: cfg.kernelization,
        }
    }

    pub fn apply(self, cfg: &mut ModelConfig) {
        cfg.locality = self.locality;
        cfg.zero_encoding = self.zero_encoding;
        cfg.kernelization = self.kernelization;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_auroc: Option<f64>,
    pub val_auprc: Option<f64>,
    pub explainer_objective: Option<f64>,
}

/// Per-epoch statistics. Wall-clock time is kept apart in [`TrainOutcome`]
/// so the history itself is reproducible byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochStats>,
    pub explainer_objective: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: History,
    pub epoch_ms: Vec<f64>,
    pub standardizer: Standardizer,
    pub split: Split,
    pub explainer: Option<ThetaNetwork>,
}

/// Probabilities for every row of `set`, in batches.
pub fn predict_set(model: &SehmModel, set: &EncodedSet, batch: usize) -> Result<Vec<f64>> {
    let rows: Vec<usize> = (0..set.len()).collect();
    let mut out = Vec::with_capacity(set.len());
    for chunk in rows.chunks(batch.max(1)) {
        out.extend(model.predict_proba(&set.batch(chunk)?)?);
    }
    Ok(out)
}

/// Flattened latents `[N, D_r]` of the given rows.
pub fn latents(model: &SehmModel, set: &EncodedSet, rows: &[usize]) -> Result<Tensor> {
    let mut data = Vec::new();
    for chunk in rows.chunks(64) {
        data.extend_from_slice(model.encode(&set.batch(chunk)?)?.data());
    }
    let dr = data.len() / rows.len().max(1);
    Ok(Tensor::new(vec![rows.len(), dr], data)?)
}

pub fn encode_split(model: &SehmModel, data: &Dataset, rows: &[usize], st: &Standardizer) -> Result<EncodedSet> {
    let (t, _) = data.dims()?;
    EncodedSet::new(data, rows, st, model.config.zero_encoding, model.config.padded_len(t))
}

fn validation_stats(model: &SehmModel, set: &EncodedSet, batch: usize) -> Result<(f64, Option<f64>, Option<f64>)> {
    let probs = predict_set(model, set, batch)?;
    let loss = bce_mean(&probs, &set.labels);
    let both = set.labels.iter().any(|&y| y > 0.5) && set.labels.iter().any(|&y| y < 0.5);
    if !both {
        return Ok((loss, None, None));
    }
    Ok((loss, Some(auroc(&probs, &set.labels)?), Some(auprc(&probs, &set.labels)?)))
}

/// Trains `model` on the training split of `data`.
///
/// With [`ExplainerMode::Joint`] an explainer is built from `explainer` and
/// stepped once per classifier batch on perturbations of that batch's
/// latents; with [`ExplainerMode::Separate`] it is fitted afterwards.
pub fn train(
    model: &mut SehmModel,
    data: &Dataset,
    cfg: &TrainConfig,
    explainer: &ExplainerConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (t, d) = data.dims()?;
    if d != model.config.vars {
        return Err(SehmError::Dimension {
            context: "dataset variables",
            expected: model.config.vars,
            actual: d,
        });
    }
    let split = split_indices(data.len(), cfg.split_seed)?;
    let st = Standardizer::fit(data, &split.train)?;
    let train_set = encode_split(model, data, &split.train, &st)?;
    let val_set = encode_split(model, data, &split.validation, &st)?;

    let mut adam = AdamState::new(model.params(), AdamConfig::new(cfg.learning_rate))?;
    let dr = model.config.latent_dim(t);
    let mut net = match cfg.explainer_mode {
        ExplainerMode::Off => None,
        _ => Some(explainer.build_network(dr)?),
    };
    let mut trainer = match (&net, cfg.explainer_mode) {
        (Some(n), ExplainerMode::Joint) => Some(ExplainerTrainer::new(n, *explainer)?),
        _ => None,
    };
    let mut history = History {
        epochs: Vec::with_capacity(cfg.epochs),
        explainer_objective: Vec::new(),
    };
    let mut epoch_ms = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng::seeded(rng::derive(cfg.seed, epoch as u64)));
        let mut loss_sum = 0.0;
        let mut expl_sum = 0.0;
        let mut batches = 0usize;
        for (b, rows) in order.chunks(cfg.batch_size).enumerate() {
            let x = train_set.batch(rows)?;
            let labels: Vec<f64> = rows.iter().map(|&r| train_set.labels[r]).collect();
            let (loss, grads) = model.loss_and_gradients(&x, &labels)?;
            if !loss.is_finite() {
                return Err(SehmError::Diverged { epoch, loss });
            }
            let refs: Vec<&Tensor> = grads.iter().collect();
            adam_step(&mut model.params_mut(), &refs, &mut adam)?;
            loss_sum += loss;
            batches += 1;
            if let (Some(tr), Some(n)) = (trainer.as_mut(), net.as_mut()) {
                let z = model.encode(&x)?;
                let z = z.reshape(&[rows.len(), dr])?;
                let seed = rng::derive(explainer.seed, (epoch * 100_000 + b) as u64);
                let (pts, targets) = perturbation_targets(model, &z, explainer.delta_frac, explainer.perturbations, seed)?;
                let obj = tr.step(n, &pts, &targets)?;
                history.explainer_objective.push(obj);
                expl_sum += obj;
            }
        }
        let train_loss = loss_sum / batches as f64;
        let (val_loss, val_auroc, val_auprc) = validation_stats(model, &val_set, 256)?;
        if !val_loss.is_finite() {
            return Err(SehmError::Diverged { epoch, loss: val_loss });
        }
        epoch_ms.push(start.elapsed().as_secs_f64() * 1e3);
        log::info!("epoch {epoch}: train loss {train_loss:.4}, val loss {val_loss:.4}, val auroc {val_auroc:?}");
        history.epochs.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
            val_auroc,
            val_auprc,
            explainer_objective: trainer.is_some().then(|| expl_sum / batches as f64),
        });
    }
    if cfg.explainer_mode == ExplainerMode::Separate {
        let n = net.as_mut().expect("separate mode builds a network");
        let count = cfg.explainer_centers.min(train_set.len()).max(1);
        let rows: Vec<usize> = (0..count).collect();
        let centers = latents(model, &train_set, &rows)?;
        let (pts, targets) =
            perturbation_targets(model, &centers, explainer.delta_frac, explainer.perturbations, explainer.seed)?;
        history.explainer_objective = train_explainer_on(n, &pts, &targets, *explainer)?;
    }
    Ok(TrainOutcome {
        history,
        epoch_ms,
        standardizer: st,
        split,
        explainer: net,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_has_eight_distinct_rows() {
        let g = AblationFlags::grid();
        for i in 0..8 {
            for j in 0..i {
                assert_ne!(g[i], g[j]);
            }
        }
        assert!(g[0].locality && g[0].zero_encoding && g[0].kernelization);
    }

    #[test]
    fn config_ranges() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            batch_size: 50,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            learning_rate: 0.5,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
