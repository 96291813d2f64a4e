//! Activation-sparsity scoring: per-layer fraction of exactly-zero post-ReLU
//! activations over a held-out proxy set, grouped per block when the arch
//! defines layer groups, plus log-size adjustment weights.

use serde::{Deserialize, Serialize};

use crate::error::{FlexError, Result};
use crate::nn::{self, ActivationTrace, Matrix, ModelArch, OptimizerState, ParamSet};

/// Score entry for one prunable unit (a hidden layer, or a group of them).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApozEntry {
    /// 0-based hidden-layer indices covered by this unit.
    pub layers: Vec<usize>,
    /// Parameter count of the covered dense layers in the full model.
    pub size: usize,
    pub apoz: f64,
    pub adj_weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApozProfile {
    pub entries: Vec<ApozEntry>,
}

impl ApozProfile {
    pub fn num_units(&self) -> usize {
        self.entries.len()
    }

    /// Expand per-unit values to one value per hidden layer.
    pub fn per_hidden_layer(&self, f: impl Fn(&ApozEntry) -> f64) -> Vec<f64> {
        let hidden: usize = self.entries.iter().map(|e| e.layers.len()).sum();
        let mut out = vec![0.0; hidden];
        for e in &self.entries {
            for &l in &e.layers {
                out[l] = f(e);
            }
        }
        out
    }
}

/// A_j = zero-count / total-count, exactly.
pub fn apoz_scores(trace: &ActivationTrace) -> Result<Vec<f64>> {
    if trace.totals.is_empty() || trace.totals.contains(&0) {
        return Err(FlexError::EmptyInput(
            "activation trace has empty layers".into(),
        ));
    }
    Ok(trace
        .zeros
        .iter()
        .zip(&trace.totals)
        .map(|(&z, &t)| z as f64 / t as f64)
        .collect())
}

/// Mean APoZ over each group's member layers.
pub fn group_apoz(layer_scores: &[f64], groups: &[Vec<usize>]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(groups.len());
    for g in groups {
        if g.is_empty() {
            return Err(FlexError::EmptyInput("empty layer group".into()));
        }
        let sum: f64 = g.iter().map(|&i| layer_scores[i]).sum();
        out.push(sum / g.len() as f64);
    }
    Ok(out)
}

/// AdjW_j = log(size_j) / log(max size), over prunable-unit sizes.
pub fn adj_weights(sizes: &[usize]) -> Result<Vec<f64>> {
    if sizes.is_empty() {
        return Err(FlexError::EmptyInput("no prunable layers".into()));
    }
    if sizes.iter().any(|&s| s < 2) {
        return Err(FlexError::InvalidConfig(
            "layer size below 2 makes the log weight degenerate".into(),
        ));
    }
    let max = *sizes.iter().max().unwrap() as f64;
    Ok(sizes.iter().map(|&s| (s as f64).ln() / max.ln()).collect())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
}

/// Unit sizes: sum of the member dense layers' full parameter counts.
pub fn unit_sizes(arch: &ModelArch) -> Vec<usize> {
    arch.units()
        .iter()
        .map(|g| g.iter().map(|&l| arch.layer_param_count(l)).sum())
        .collect()
}

/// Pre-train a fresh model on the proxy-train split, score activation
/// sparsity on the proxy-test split, and assemble the profile. The trained
/// model is discarded; the caller re-initializes the global model afterwards.
pub fn build_profile(
    arch: &ModelArch,
    proxy_train: (&Matrix, &[usize]),
    proxy_test: (&Matrix, &[usize]),
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<ApozProfile> {
    if proxy_test.0.rows == 0 {
        return Err(FlexError::EmptyInput("proxy test set is empty".into()));
    }
    let mut params = ParamSet::init(&arch.layer_widths, seed);
    let mut state = OptimizerState::new(&params, cfg.learning_rate, cfg.momentum);
    let (features, labels) = proxy_train;
    let n = features.rows;
    for _ in 0..cfg.epochs {
        let mut start = 0;
        while start < n {
            let end = (start + cfg.batch_size).min(n);
            let mut batch = Matrix::zeros(end - start, features.cols);
            let mut batch_labels = Vec::with_capacity(end - start);
            for (bi, r) in (start..end).enumerate() {
                batch.data[bi * batch.cols..(bi + 1) * batch.cols].copy_from_slice(features.row(r));
                batch_labels.push(labels[r]);
            }
            nn::backward_and_step(&mut params, &mut state, &batch, &batch_labels, &nn::CeLoss)?;
            start = end;
        }
    }

    let (_, trace) = nn::forward_capture(&params, proxy_test.0)?;
    profile_from_trace(arch, &trace)
}

/// Assemble a profile from an already-collected trace.
pub fn profile_from_trace(arch: &ModelArch, trace: &ActivationTrace) -> Result<ApozProfile> {
    let layer_scores = apoz_scores(trace)?;
    let units = arch.units();
    let scores = group_apoz(&layer_scores, &units)?;
    let sizes = unit_sizes(arch);
    let weights = adj_weights(&sizes)?;
    let entries = units
        .into_iter()
        .zip(sizes)
        .zip(scores)
        .zip(weights)
        .map(|(((layers, size), apoz), adj_weight)| ApozEntry {
            layers,
            size,
            apoz,
            adj_weight,
        })
        .collect();
    Ok(ApozProfile { entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::param_count_for_widths;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn apoz_extremes() {
        let all_zero = ActivationTrace {
            zeros: vec![8],
            totals: vec![8],
        };
        assert_eq!(apoz_scores(&all_zero).unwrap(), vec![1.0]);
        let none_zero = ActivationTrace {
            zeros: vec![0],
            totals: vec![8],
        };
        assert_eq!(apoz_scores(&none_zero).unwrap(), vec![0.0]);
    }

    #[test]
    fn apoz_quarter() {
        // 2 samples x 2 neurons, one zero entry
        let trace = ActivationTrace {
            zeros: vec![1],
            totals: vec![4],
        };
        assert_eq!(apoz_scores(&trace).unwrap(), vec![0.25]);
    }

    #[test]
    fn apoz_rejects_empty() {
        let trace = ActivationTrace {
            zeros: vec![0],
            totals: vec![0],
        };
        assert!(apoz_scores(&trace).is_err());
    }

    #[test]
    fn apoz_matches_brute_force_on_random_instances() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        for _ in 0..20 {
            let layers = rng.gen_range(1..4usize);
            let mut zeros = Vec::new();
            let mut totals = Vec::new();
            let mut raw: Vec<Vec<u8>> = Vec::new();
            for _ in 0..layers {
                let n = rng.gen_range(1..40usize);
                let entries: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
                zeros.push(entries.iter().filter(|&&e| e == 0).count() as u64);
                totals.push(n as u64);
                raw.push(entries);
            }
            let trace = ActivationTrace { zeros, totals };
            let scores = apoz_scores(&trace).unwrap();
            for (l, entries) in raw.iter().enumerate() {
                let brute =
                    entries.iter().filter(|&&e| e == 0).count() as f64 / entries.len() as f64;
                assert_eq!(scores[l], brute);
            }
        }
    }

    #[test]
    fn group_mean_and_singletons() {
        let scores = vec![0.2, 0.4, 0.9];
        let grouped = group_apoz(&scores, &[vec![0, 1], vec![2]]).unwrap();
        assert!((grouped[0] - 0.3).abs() < 1e-15);
        assert_eq!(grouped[1], 0.9);

        let single = group_apoz(&scores, &[vec![0], vec![1], vec![2]]).unwrap();
        assert_eq!(single, scores);
    }

    #[test]
    fn group_is_permutation_invariant() {
        let scores = vec![0.1, 0.7, 0.4];
        let a = group_apoz(&scores, &[vec![0, 1, 2]]).unwrap();
        let b = group_apoz(&scores, &[vec![2, 0, 1]]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn adj_weight_examples() {
        assert_eq!(adj_weights(&[123]).unwrap(), vec![1.0]);
        let w = adj_weights(&[100, 10000]).unwrap();
        assert!((w[0] - 0.5).abs() < 1e-12);
        assert_eq!(w[1], 1.0);
        assert_eq!(adj_weights(&[50, 50, 50]).unwrap(), vec![1.0, 1.0, 1.0]);
        assert!(adj_weights(&[1, 10]).is_err());
    }

    #[test]
    fn adj_weight_monotone_in_size() {
        let w = adj_weights(&[10, 100, 1000, 500]).unwrap();
        assert!(w[0] < w[1] && w[1] < w[2]);
        assert!(w[3] < w[2]);
        assert_eq!(w[2], 1.0);
    }

    #[test]
    fn profile_bounds_without_pretraining() {
        let arch = ModelArch::new(vec![4, 8, 8, 3], None).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let mut features = Matrix::zeros(20, 4);
        for v in features.data.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let labels: Vec<usize> = (0..20).map(|i| i % 3).collect();
        let cfg = PretrainConfig {
            epochs: 0,
            batch_size: 10,
            learning_rate: 0.01,
            momentum: 0.5,
        };
        let profile =
            build_profile(&arch, (&features, &labels), (&features, &labels), &cfg, 17).unwrap();
        assert_eq!(profile.num_units(), 2);
        for e in &profile.entries {
            assert!((0.0..=1.0).contains(&e.apoz));
            assert!(e.adj_weight > 0.0 && e.adj_weight <= 1.0);
        }
        // largest unit carries weight 1
        let max_size = profile.entries.iter().map(|e| e.size).max().unwrap();
        assert!(profile
            .entries
            .iter()
            .any(|e| e.size == max_size && e.adj_weight == 1.0));
    }

    #[test]
    fn profile_is_seed_deterministic() {
        let arch = ModelArch::new(vec![4, 6, 3], None).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let mut features = Matrix::zeros(30, 4);
        for v in features.data.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let cfg = PretrainConfig {
            epochs: 3,
            batch_size: 10,
            learning_rate: 0.01,
            momentum: 0.5,
        };
        let a = build_profile(&arch, (&features, &labels), (&features, &labels), &cfg, 5).unwrap();
        let b = build_profile(&arch, (&features, &labels), (&features, &labels), &cfg, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn profile_matches_recomputation_from_dumped_trace() {
        let arch = ModelArch::new(vec![5, 7, 6, 4], None).unwrap();
        let params = ParamSet::init(&arch.layer_widths, 8);
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let mut features = Matrix::zeros(25, 5);
        for v in features.data.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let (_, trace) = nn::forward_capture(&params, &features).unwrap();
        let profile = profile_from_trace(&arch, &trace).unwrap();
        // independent recomputation straight from the dumped trace
        for (j, e) in profile.entries.iter().enumerate() {
            let expect = trace.zeros[j] as f64 / trace.totals[j] as f64;
            assert_eq!(e.apoz, expect);
        }
        assert_eq!(
            profile.entries[0].size,
            param_count_for_widths(&[5, 7]) // first dense layer only
        );
    }
}
