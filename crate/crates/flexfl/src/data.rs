//! Deterministic dataset provision: Gaussian-cluster synthetic corpus,
//! Dirichlet non-IID partitioning, proxy subset with an 80/20 split, and an
//! optional CSV loader for external feature datasets.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{FlexError, Result};
use crate::nn::Matrix;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataConfig {
    pub classes: usize,
    pub feature_dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Standard deviation of samples around their class mean.
    pub cluster_spread: f64,
    /// Dirichlet concentration; `None` means IID partitioning.
    pub alpha: Option<f64>,
    pub proxy_fraction: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            classes: 8,
            feature_dim: 16,
            train_per_class: 250,
            test_per_class: 50,
            cluster_spread: 1.0,
            alpha: Some(0.3),
            proxy_fraction: 0.1,
            seed: 0,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(FlexError::InvalidConfig("need at least 2 classes".into()));
        }
        if !(0.0..=1.0).contains(&self.proxy_fraction) || self.proxy_fraction == 0.0 {
            return Err(FlexError::InvalidConfig(
                "proxy_fraction must be in (0, 1]".into(),
            ));
        }
        if let Some(a) = self.alpha {
            if a <= 0.0 {
                return Err(FlexError::InvalidConfig("alpha must be > 0".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut features = Matrix::zeros(indices.len(), self.features.cols);
        let mut labels = Vec::with_capacity(indices.len());
        for (bi, &r) in indices.iter().enumerate() {
            features.data[bi * features.cols..(bi + 1) * features.cols]
                .copy_from_slice(self.features.row(r));
            labels.push(self.labels[r]);
        }
        Dataset { features, labels }
    }
}

/// Local shard held by one device.
#[derive(Debug, Clone)]
pub struct DeviceDataset {
    pub device_id: usize,
    pub data: Dataset,
}

fn sample_split(
    means: &[Vec<f64>],
    per_class: usize,
    spread: f64,
    dim: usize,
    rng: &mut ChaCha20Rng,
) -> Dataset {
    let classes = means.len();
    let n = classes * per_class;
    let mut features = Matrix::zeros(n, dim);
    let mut labels = Vec::with_capacity(n);
    let mut row = 0usize;
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..per_class {
            for (d, &m) in mean.iter().enumerate() {
                let noise: f64 = StandardNormal.sample(rng);
                *features.at_mut(row, d) = m + spread * noise;
            }
            labels.push(c);
            row += 1;
        }
    }
    // interleave classes deterministically so splits stay balanced
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut out_features = Matrix::zeros(n, dim);
    let mut out_labels = Vec::with_capacity(n);
    for (bi, &r) in order.iter().enumerate() {
        out_features.data[bi * dim..(bi + 1) * dim].copy_from_slice(features.row(r));
        out_labels.push(labels[r]);
    }
    Dataset {
        features: out_features,
        labels: out_labels,
    }
}

/// Seed-deterministic Gaussian-cluster corpus with balanced classes in both
/// splits.
pub fn generate_corpus(cfg: &DataConfig) -> Result<(Dataset, Dataset)> {
    cfg.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let means: Vec<Vec<f64>> = (0..cfg.classes)
        .map(|_| {
            (0..cfg.feature_dim)
                .map(|_| {
                    let v: f64 = StandardNormal.sample(&mut rng);
                    v
                })
                .collect()
        })
        .collect();
    let train = sample_split(
        &means,
        cfg.train_per_class,
        cfg.cluster_spread,
        cfg.feature_dim,
        &mut rng,
    );
    let test = sample_split(
        &means,
        cfg.test_per_class,
        cfg.cluster_spread,
        cfg.feature_dim,
        &mut rng,
    );
    Ok((train, test))
}

/// Split per-class sample counts over devices by Dirichlet proportions
/// (largest-remainder rounding), or round-robin for IID. Every sample is
/// assigned exactly once.
pub fn dirichlet_partition(
    train: &Dataset,
    num_devices: usize,
    alpha: Option<f64>,
    seed: u64,
) -> Result<Vec<DeviceDataset>> {
    if num_devices == 0 {
        return Err(FlexError::InvalidConfig("need at least one device".into()));
    }
    if let Some(a) = alpha {
        if a <= 0.0 {
            return Err(FlexError::InvalidConfig("alpha must be > 0".into()));
        }
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let classes = train.labels.iter().max().map_or(0, |&m| m + 1);

    let mut per_device: Vec<Vec<usize>> = vec![Vec::new(); num_devices];
    for c in 0..classes {
        let mut idxs: Vec<usize> = (0..train.len()).filter(|&i| train.labels[i] == c).collect();
        idxs.shuffle(&mut rng);
        let props: Vec<f64> = match alpha {
            None => vec![1.0 / num_devices as f64; num_devices],
            Some(a) => {
                let gamma = Gamma::new(a, 1.0)
                    .map_err(|e| FlexError::InvalidConfig(format!("bad alpha: {e}")))?;
                let draws: Vec<f64> = (0..num_devices).map(|_| gamma.sample(&mut rng)).collect();
                let sum: f64 = draws.iter().sum();
                if sum == 0.0 {
                    // degenerate draw under tiny alpha: dump the class on one device
                    let mut p = vec![0.0; num_devices];
                    p[rng.gen_range(0..num_devices)] = 1.0;
                    p
                } else {
                    draws.iter().map(|d| d / sum).collect()
                }
            }
        };
        // largest-remainder apportionment of idxs.len() samples
        let n = idxs.len();
        let exact: Vec<f64> = props.iter().map(|p| p * n as f64).collect();
        let mut counts: Vec<usize> = exact.iter().map(|&e| e.floor() as usize).collect();
        let mut assigned: usize = counts.iter().sum();
        let mut rema: Vec<(usize, f64)> = exact
            .iter()
            .enumerate()
            .map(|(i, &e)| (i, e - e.floor()))
            .collect();
        rema.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let mut k = 0;
        while assigned < n {
            counts[rema[k % num_devices].0] += 1;
            assigned += 1;
            k += 1;
        }
        let mut start = 0;
        for (d, &cnt) in counts.iter().enumerate() {
            per_device[d].extend_from_slice(&idxs[start..start + cnt]);
            start += cnt;
        }
    }

    Ok(per_device
        .into_iter()
        .enumerate()
        .map(|(device_id, mut idxs)| {
            idxs.sort_unstable();
            DeviceDataset {
                device_id,
                data: train.subset(&idxs),
            }
        })
        .collect())
}

/// Seeded proxy subsample of the training corpus, split 80/20 into a
/// pre-training part and a scoring part.
pub fn proxy_split(train: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(0.0..=1.0).contains(&fraction) || fraction == 0.0 {
        return Err(FlexError::InvalidConfig(
            "proxy fraction must be in (0, 1]".into(),
        ));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let n = train.len();
    let take = ((fraction * n as f64).floor() as usize).max(1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let picked = &order[..take];
    let split = (0.8 * take as f64).floor() as usize;
    let proxy_train = train.subset(&picked[..split]);
    let proxy_test = train.subset(&picked[split..]);
    Ok((proxy_train, proxy_test))
}

/// CSV ingestion: header row, float feature columns, trailing integer label
/// column.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| FlexError::EmptyInput(format!("{}: empty file", path.display())))?;
    let cols = header.split(',').count();
    if cols < 2 {
        return Err(FlexError::InvalidConfig(
            "csv needs at least one feature column and a label column".into(),
        ));
    }
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols {
            return Err(FlexError::InvalidConfig(format!(
                "csv line {}: expected {} fields, got {}",
                lineno + 2,
                cols,
                fields.len()
            )));
        }
        let mut feat = Vec::with_capacity(cols - 1);
        for f in &fields[..cols - 1] {
            feat.push(
                f.trim().parse::<f64>().map_err(|e| {
                    FlexError::InvalidConfig(format!("csv line {}: {e}", lineno + 2))
                })?,
            );
        }
        let label = fields[cols - 1].trim().parse::<usize>().map_err(|e| {
            FlexError::InvalidConfig(format!("csv line {}: bad label: {e}", lineno + 2))
        })?;
        rows.push(feat);
        labels.push(label);
    }
    if rows.is_empty() {
        return Err(FlexError::EmptyInput(format!(
            "{}: no data rows",
            path.display()
        )));
    }
    Ok(Dataset {
        features: Matrix::from_rows(rows),
        labels,
    })
}
