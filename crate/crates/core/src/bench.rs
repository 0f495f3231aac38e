//! Timing studies and the architectural ablation grid.

use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sehm_autodiff::{adam_step, AdamConfig, AdamState, Tensor};

use crate::data::{split_indices, Dataset, EncodedSet, Standardizer};
use crate::error::{config_err, Result};
use crate::explainer::ExplainerConfig;
use crate::metrics::{auprc, auroc};
use crate::model::{ModelConfig, SehmModel};
use crate::recurrent::CellKind;
use crate::train::{encode_split, predict_set, train, AblationFlags, ExplainerMode, TrainConfig};

/// Mean, deviation and median of a set of timings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub runs_ms: Vec<f64>,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub median_ms: f64,
}

impl Timing {
    pub fn from_runs(runs_ms: Vec<f64>) -> Self {
        let n = runs_ms.len().max(1) as f64;
        let mean = runs_ms.iter().sum::<f64>() / n;
        let var = runs_ms.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self {
            median_ms: median(&runs_ms),
            mean_ms: mean,
            std_ms: var.sqrt(),
            runs_ms,
        }
    }
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NeighborBenchmark {
    /// Neighbor sizes, ascending.
    pub neighbors: Vec<usize>,
    pub repetitions: usize,
    pub batch_size: usize,
    /// Cap on the training samples that make up one epoch.
    pub max_samples: usize,
    pub learning_rate: f64,
}

impl Default for NeighborBenchmark {
    fn default() -> Self {
        Self {
            neighbors: vec![10, 20, 30, 40, 50, 60],
            repetitions: 5,
            batch_size: 64,
            max_samples: 1350,
            learning_rate: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborTiming {
    pub neighbor: usize,
    pub epoch: Timing,
}

/// Wall-clock of one training epoch (forward, backward, Adam) per
/// neighbor size.
pub fn benchmark_neighbor_size(
    data: &Dataset,
    base: &ModelConfig,
    bench: &NeighborBenchmark,
) -> Result<Vec<NeighborTiming>> {
    if bench.neighbors.is_empty() || bench.neighbors.windows(2).any(|w| w[0] >= w[1]) {
        return config_err("neighbor sizes must be non-empty and strictly ascending");
    }
    if bench.repetitions == 0 || bench.batch_size == 0 {
        return config_err("benchmark needs positive repetitions and batch size");
    }
    let split = split_indices(data.len(), 0)?;
    let rows: Vec<usize> = split.train.iter().copied().take(bench.max_samples.max(1)).collect();
    let st = Standardizer::fit(data, &rows)?;
    struct Arm {
        model: SehmModel,
        set: EncodedSet,
        adam: AdamState,
        runs: Vec<f64>,
    }
    let mut arms = Vec::with_capacity(bench.neighbors.len());
    for &c in &bench.neighbors {
        let model = SehmModel::new(ModelConfig {
            neighbor: c,
            ..base.clone()
        })?;
        let set = encode_split(&model, data, &rows, &st)?;
        let adam = AdamState::new(model.params(), AdamConfig::new(bench.learning_rate))?;
        arms.push(Arm {
            model,
            set,
            adam,
            runs: Vec::with_capacity(bench.repetitions),
        });
    }
    // Repetitions go round-robin over neighbor sizes so slow drift in
    // machine speed lands on every size alike.
    for _ in 0..bench.repetitions {
        for arm in &mut arms {
            let start = Instant::now();
            for chunk in (0..arm.set.len()).collect::<Vec<_>>().chunks(bench.batch_size) {
                let x = arm.set.batch(chunk)?;
                let labels: Vec<f64> = chunk.iter().map(|&r| arm.set.labels[r]).collect();
                let (_, grads) = arm.model.loss_and_gradients(&x, &labels)?;
                let refs: Vec<&Tensor> = grads.iter().collect();
                adam_step(&mut arm.model.params_mut(), &refs, &mut arm.adam)?;
            }
            arm.runs.push(start.elapsed().as_secs_f64() * 1e3);
        }
    }
    let out: Vec<NeighborTiming> = bench
        .neighbors
        .iter()
        .zip(arms)
        .map(|(&c, arm)| {
            log::info!("neighbor {c}: {:?} ms", arm.runs);
            NeighborTiming {
                neighbor: c,
                epoch: Timing::from_runs(arm.runs),
            }
        })
        .collect();
    Ok(out)
}

/// Median wall-clock of `runs` warm forward passes on `batch`.
pub fn inference_time(model: &SehmModel, batch: &Tensor, runs: usize) -> Result<Timing> {
    model.predict_proba(batch)?;
    let mut times = Vec::with_capacity(runs);
    for _ in 0..runs.max(1) {
        let start = Instant::now();
        model.predict_proba(batch)?;
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    Ok(Timing::from_runs(times))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    /// One training run per seed and flag row.
    pub seeds: Vec<u64>,
    pub inference_runs: usize,
    pub inference_batch: usize,
    /// Concurrent training runs.
    pub workers: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            seeds: vec![1],
            inference_runs: 20,
            inference_batch: 64,
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub flags: AblationFlags,
    pub auroc: Vec<f64>,
    pub auprc: Vec<f64>,
    pub mean_auroc: f64,
    pub mean_auprc: f64,
    pub inference: Timing,
}

/// Test-split AUROC and AUPRC of a trained model.
pub fn evaluate_test(model: &SehmModel, data: &Dataset, split_seed: u64, st: &Standardizer) -> Result<(f64, f64)> {
    let split = split_indices(data.len(), split_seed)?;
    let set = encode_split(model, data, &split.test, st)?;
    let probs = predict_set(model, &set, 64)?;
    Ok((auroc(&probs, &set.labels)?, auprc(&probs, &set.labels)?))
}

/// Trains one model for `flags` and `seed` with an LSTM recurrent module
/// and reports its test metrics.
pub fn ablation_train(
    data: &Dataset,
    base: &ModelConfig,
    tc: &TrainConfig,
    flags: AblationFlags,
    seed: u64,
) -> Result<(f64, f64)> {
    let mut cfg = ModelConfig {
        cell: CellKind::Lstm,
        seed,
        ..base.clone()
    };
    flags.apply(&mut cfg);
    let mut model = SehmModel::new(cfg)?;
    let tc = TrainConfig {
        seed,
        explainer_mode: ExplainerMode::Off,
        ..tc.clone()
    };
    let out = train(&mut model, data, &tc, &ExplainerConfig::default())?;
    evaluate_test(&model, data, tc.split_seed, &out.standardizer)
}

/// The eight-row grid: per row, test metrics for every seed and the
/// median batch inference time.
pub fn ablation_run(
    data: &Dataset,
    base: &ModelConfig,
    tc: &TrainConfig,
    flags: &[AblationFlags],
    cfg: &AblationConfig,
) -> Result<Vec<AblationRow>> {
    if flags.len() != 8 || (0..8).any(|i| (0..i).any(|j| flags[i] == flags[j])) {
        return config_err("the ablation grid needs exactly the 8 distinct flag combinations");
    }
    if cfg.seeds.is_empty() {
        return config_err("the ablation grid needs at least one seed");
    }
    let jobs: Vec<(usize, u64)> = (0..8).flat_map(|r| cfg.seeds.iter().map(move |&s| (r, s))).collect();
    let results: Mutex<Vec<Option<Result<(f64, f64)>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    let next = Mutex::new(0usize);
    std::thread::scope(|scope| {
        for _ in 0..cfg.workers.clamp(1, jobs.len()) {
            scope.spawn(|| loop {
                let k = {
                    let mut n = next.lock().expect("job counter");
                    let k = *n;
                    *n += 1;
                    k
                };
                let Some(&(row, seed)) = jobs.get(k) else { break };
                let r = ablation_train(data, base, tc, flags[row], seed);
                results.lock().expect("result slots")[k] = Some(r);
            });
        }
    });
    let mut results = results.into_inner().expect("result slots");

    let (t, d) = data.dims()?;
    let mut rows = Vec::with_capacity(8);
    for (r, &f) in flags.iter().enumerate() {
        let mut aurocs = Vec::new();
        let mut auprcs = Vec::new();
        for (k, &(row, _)) in jobs.iter().enumerate() {
            if row == r {
                let (a, p) = results[k].take().expect("every job ran")?;
                aurocs.push(a);
                auprcs.push(p);
            }
        }
        let mut mc = ModelConfig {
            cell: CellKind::Lstm,
            ..base.clone()
        };
        f.apply(&mut mc);
        let model = SehmModel::new(mc)?;
        let tp = model.config.padded_len(t);
        let batch = inference_batch(data, &model, cfg.inference_batch, tp, d)?;
        let inference = inference_time(&model, &batch, cfg.inference_runs)?;
        let n = aurocs.len() as f64;
        rows.push(AblationRow {
            flags: f,
            mean_auroc: aurocs.iter().sum::<f64>() / n,
            mean_auprc: auprcs.iter().sum::<f64>() / n,
            auroc: aurocs,
            auprc: auprcs,
            inference,
        });
    }
    Ok(rows)
}

/// A `[batch, padded, D]` input built from the first samples of `data`.
pub fn inference_batch(data: &Dataset, model: &SehmModel, batch: usize, padded: usize, d: usize) -> Result<Tensor> {
    let rows: Vec<usize> = (0..batch).map(|i| i % data.len()).collect();
    let st = Standardizer::fit(data, &rows)?;
    let set = encode_split(model, data, &rows, &st)?;
    let x = set.batch(&(0..rows.len()).collect::<Vec<_>>())?;
    debug_assert_eq!(x.shape(), [batch, padded, d]);
    Ok(x)
}

/// Inference timing of every flag row on untrained models; timing does
/// not depend on parameter values.
pub fn ablation_timing(data: &Dataset, base: &ModelConfig, cfg: &AblationConfig) -> Result<Vec<(AblationFlags, Timing)>> {
    let (t, d) = data.dims()?;
    AblationFlags::grid()
        .into_iter()
        .map(|f| {
            let mut mc = ModelConfig {
                cell: CellKind::Lstm,
                ..base.clone()
            };
            f.apply(&mut mc);
            let model = SehmModel::new(mc)?;
            let batch = inference_batch(data, &model, cfg.inference_batch, model.config.padded_len(t), d)?;
            Ok((f, inference_time(&model, &batch, cfg.inference_runs)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn timing_summary() {
        let t = Timing::from_runs(vec![3.0, 1.0, 2.0, 10.0]);
        assert_eq!(t.median_ms, 2.5);
        assert_eq!(t.mean_ms, 4.0);
        assert!((t.std_ms - (12.5f64).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn rejects_unsorted_neighbors() {
        let data = Dataset { samples: vec![] };
        let bench = NeighborBenchmark {
            neighbors: vec![20, 10],
            ..NeighborBenchmark::default()
        };
        assert!(benchmark_neighbor_size(&data, &ModelConfig::default(), &bench).is_err());
    }
}
