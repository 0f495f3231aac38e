//! Predictive and interpretability metrics.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sehm_autodiff::Tensor;

use crate::error::{config_err, Result, SehmError};
use crate::explainer::{g_approx, rows_to_tensor, sample_perturbations, theta_forward_batch, LatentModel, ThetaNetwork};
use crate::rng;

fn check_binary(scores: &[f64], labels: &[f64]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(SehmError::Dimension {
            context: "scores vs labels",
            expected: labels.len(),
            actual: scores.len(),
        });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return config_err("scores must be finite");
    }
    let pos = labels.iter().filter(|&&y| y > 0.5).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return config_err("AUROC/AUPRC need at least one positive and one negative label");
    }
    Ok((pos, neg))
}

/// Area under the ROC curve as the Mann–Whitney statistic with average
/// ranks, so tied scores count one half.
pub fn auroc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    let (pos, neg) = check_binary(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share their mean
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if labels[k] > 0.5 {
                rank_sum += avg;
            }
        }
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Area under the precision–recall curve as step-wise average precision:
/// `Σ_k (R_k − R_{k−1}) P_k` over distinct score thresholds.
pub fn auprc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    let (pos, _) = check_binary(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut area = 0.0;
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] > 0.5 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(area)
}

/// Mean of `(g − f)²`.
pub fn local_accuracy(g: &[f64], f: &[f64]) -> Result<f64> {
    if g.len() != f.len() || g.is_empty() {
        return config_err("local accuracy needs equal, non-empty g and f");
    }
    Ok(g.iter().zip(f).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / g.len() as f64)
}

/// `g(z)` and `f(z)` for each latent row, then [`local_accuracy`].
pub fn local_accuracy_of(model: &impl LatentModel, net: &ThetaNetwork, latents: &Tensor) -> Result<f64> {
    let theta = theta_forward_batch(latents, net)?;
    let d = latents.shape()[1];
    let g: Vec<f64> = latents
        .data()
        .chunks(d)
        .zip(theta.data().chunks(d))
        .map(|(z, t)| g_approx(z, t))
        .collect::<Result<_>>()?;
    let f = model.probability(latents)?;
    local_accuracy(&g, &f)
}

/// Positions sorted by descending `|β|`; ties keep index order.
pub fn rank_by_magnitude(beta: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..beta.len()).collect();
    idx.sort_by(|&a, &b| beta[b].abs().total_cmp(&beta[a].abs()).then(a.cmp(&b)));
    idx
}

pub fn random_ranking(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::seeded(seed));
    idx
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AopcPoint {
    pub cutoff: usize,
    pub value: f64,
}

/// Area over the most-relevant-first perturbation curve.
///
/// For every sample, the top `m` ranked positions are replaced by 0 for
/// `m = 0..=k`, and `AOPC@k = mean_samples (1/(k+1)) Σ_m [f(x) − f(x_m)]`.
/// Positions index the flattened `T × D` input. `predict` maps a batch of
/// flattened inputs to probabilities.
pub fn aopc<F>(mut predict: F, inputs: &[Vec<f64>], rankings: &[Vec<usize>], cutoffs: &[usize]) -> Result<Vec<AopcPoint>>
where
    F: FnMut(&[Vec<f64>]) -> Result<Vec<f64>>,
{
    if inputs.len() != rankings.len() || inputs.is_empty() {
        return config_err("AOPC needs one ranking per sample and at least one sample");
    }
    if cutoffs.is_empty() || cutoffs.windows(2).any(|w| w[0] > w[1]) {
        return config_err("AOPC cutoffs must be non-empty and nondecreasing");
    }
    let kmax = *cutoffs.last().expect("non-empty");
    let mut sums = vec![0.0; cutoffs.len()];
    const CHUNK: usize = 64;
    for (x, ranking) in inputs.iter().zip(rankings) {
        if kmax > ranking.len() || ranking.iter().any(|&p| p >= x.len()) {
            return config_err(format!(
                "AOPC cutoff {kmax} exceeds the {} rankable positions",
                ranking.len()
            ));
        }
        // diffs[m] = f(x) − f(x with top-m removed)
        let mut diffs = Vec::with_capacity(kmax + 1);
        let mut current = x.clone();
        let mut base = None;
        let mut m = 0;
        while m <= kmax {
            let mut batch = Vec::with_capacity(CHUNK);
            while batch.len() < CHUNK && m <= kmax {
                if m > 0 {
                    current[ranking[m - 1]] = 0.0;
                }
                batch.push(current.clone());
                m += 1;
            }
            let probs = predict(&batch)?;
            let f0 = *base.get_or_insert(probs[0]);
            diffs.extend(probs.iter().map(|p| f0 - p));
        }
        let mut acc = 0.0;
        let mut next = 0;
        for (m, d) in diffs.iter().enumerate() {
            acc += d;
            while next < cutoffs.len() && cutoffs[next] == m {
                sums[next] += acc / (m + 1) as f64;
                next += 1;
            }
        }
    }
    let n = inputs.len() as f64;
    Ok(cutoffs
        .iter()
        .zip(sums)
        .map(|(&cutoff, s)| AopcPoint { cutoff, value: s / n })
        .collect())
}

/// Largest observed `‖θ(z') − θ(z)‖₂ / ‖z' − z‖₂` over `n` points sampled
/// in the radius-`delta` ball around each center, keeping only pairs whose
/// predicted label (`f ≥ 0.5`) is unchanged.
pub fn estimated_lipschitz(
    net: &ThetaNetwork,
    model: &impl LatentModel,
    centers: &Tensor,
    delta: f64,
    n: usize,
    seed: u64,
) -> Result<f64> {
    if !(delta > 0.0) {
        return config_err("estimated Lipschitz needs delta > 0");
    }
    let d = centers.shape()[1];
    let theta_c = theta_forward_batch(centers, net)?;
    let f_c = model.probability(centers)?;
    let mut best: f64 = 0.0;
    for (i, z) in centers.data().chunks(d).enumerate() {
        let set = sample_perturbations(z, delta, n, rng::derive(seed, i as u64))?;
        let pts = rows_to_tensor(&set.points)?;
        let theta = theta_forward_batch(&pts, net)?;
        let f = model.probability(&pts)?;
        let tc = &theta_c.data()[i * d..(i + 1) * d];
        for (k, p) in set.points.iter().enumerate() {
            if (f[k] >= 0.5) != (f_c[i] >= 0.5) {
                continue;
            }
            let dz = p.iter().zip(z).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            if dz == 0.0 {
                continue;
            }
            let dt = theta.data()[k * d..(k + 1) * d]
                .iter()
                .zip(tc)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            best = best.max(dt / dz);
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auroc: f64,
    pub auprc: f64,
    pub local_accuracy: Option<f64>,
    pub aopc: Vec<AopcPoint>,
    pub aopc_random: Vec<AopcPoint>,
    pub estimated_lipschitz: Option<f64>,
    pub lipschitz_certificate: Option<f64>,
    pub epoch_ms: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs_oracle(scores: &[f64], labels: &[f64]) -> f64 {
        let mut wins = 0.0;
        let mut total = 0.0;
        for (i, &yi) in labels.iter().enumerate() {
            for (j, &yj) in labels.iter().enumerate() {
                if yi > 0.5 && yj < 0.5 {
                    total += 1.0;
                    if scores[i] > scores[j] {
                        wins += 1.0;
                    } else if scores[i] == scores[j] {
                        wins += 0.5;
                    }
                }
            }
        }
        wins / total
    }

    #[test]
    fn auroc_matches_pair_counting() {
        let scores = [0.1, 0.4, 0.35, 0.8, 0.4, 0.2];
        let labels = [0.0, 0.0, 1.0, 1.0, 1.0, 0.0];
        assert_eq!(auroc(&scores, &labels).unwrap(), pairs_oracle(&scores, &labels));
    }

    #[test]
    fn perfect_separation() {
        let s = [0.1, 0.2, 0.8, 0.9];
        let y = [0.0, 0.0, 1.0, 1.0];
        assert_eq!(auroc(&s, &y).unwrap(), 1.0);
        assert_eq!(auprc(&s, &y).unwrap(), 1.0);
    }

    #[test]
    fn single_class_rejected() {
        assert!(auroc(&[0.1, 0.2], &[1.0, 1.0]).is_err());
        assert!(auprc(&[0.1, 0.2], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn auprc_hand_case() {
        // ranked: 1(+) .8, 2(-) .6, 3(+) .4 → AP = 1/2·1 + 1/2·2/3
        let ap = auprc(&[0.8, 0.6, 0.4], &[1.0, 0.0, 1.0]).unwrap();
        assert!((ap - (0.5 + 1.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn local_accuracy_examples() {
        assert_eq!(local_accuracy(&[0.2, 0.7], &[0.2, 0.7]).unwrap(), 0.0);
        let l = local_accuracy(&[0.3, 0.8], &[0.2, 0.7]).unwrap();
        assert!((l - 0.01).abs() < 1e-12);
    }

    #[test]
    fn aopc_zero_for_constant_model() {
        let inputs = vec![vec![1.0, 2.0, 3.0]];
        let curve = aopc(|b| Ok(vec![0.3; b.len()]), &inputs, &[vec![2, 0, 1]], &[1, 3]).unwrap();
        assert!(curve.iter().all(|p| p.value == 0.0));
        assert!(aopc(|b| Ok(vec![0.3; b.len()]), &inputs, &[vec![2, 0, 1]], &[4]).is_err());
    }

    #[test]
    fn ranking_by_magnitude() {
        assert_eq!(rank_by_magnitude(&[0.1, -0.5, 0.3, 0.5]), vec![1, 3, 2, 0]);
    }
}
