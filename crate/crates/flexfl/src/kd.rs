//! Self-distillation local training: the assigned model's loss is CE plus a
//! temperature-scaled KL term toward the softened outputs of its own nested
//! smaller submodels. Soft labels are detached targets; gradients only flow
//! through the assigned model's logits.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FlexError, Result};
use crate::nn::{self, LogitLoss, Matrix, OptimizerState, ParamSet};
use crate::pruner;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KdConfig {
    pub temperature: f64,
    pub lambda: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
}

impl Default for KdConfig {
    fn default() -> Self {
        KdConfig {
            temperature: 3.0,
            lambda: 10.0,
            local_epochs: 5,
            batch_size: 50,
        }
    }
}

impl KdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temperature <= 0.0 {
            return Err(FlexError::InvalidConfig("temperature must be > 0".into()));
        }
        if self.lambda < 0.0 {
            return Err(FlexError::InvalidConfig("lambda must be >= 0".into()));
        }
        if self.local_epochs == 0 {
            return Err(FlexError::InvalidConfig("local_epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(FlexError::InvalidConfig("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LocalResult {
    pub params: ParamSet,
    pub sample_count: usize,
    pub epoch_losses: Vec<f64>,
}

/// Teacher logits: extract each nested submodel from the assigned params and
/// forward the batch through it.
pub fn soft_labels(
    assigned: &ParamSet,
    teacher_widths: &[Vec<usize>],
    batch: &Matrix,
) -> Result<Vec<Matrix>> {
    teacher_widths
        .iter()
        .map(|w| {
            let sub = pruner::extract_submodel(assigned, w)?;
            nn::forward(&sub, batch)
        })
        .collect()
}

/// Mean over teachers and batch rows of tau^2 * KL(softmax(t/tau) || softmax(z/tau)),
/// with its gradient w.r.t. the student logits z.
pub fn kl_term(soft: &[Matrix], logits: &Matrix, tau: f64) -> Result<(f64, Matrix)> {
    if soft.is_empty() {
        return Err(FlexError::EmptyInput("no teacher logits".into()));
    }
    let scale_rows = |m: &Matrix| {
        let mut s = m.clone();
        for v in s.data.iter_mut() {
            *v /= tau;
        }
        nn::softmax_rows(&s)
    };
    let q = scale_rows(logits);
    let n = logits.rows as f64;
    let j = soft.len() as f64;
    let mut value = 0.0;
    let mut grad = Matrix::zeros(logits.rows, logits.cols);
    for t in soft {
        if t.rows != logits.rows || t.cols != logits.cols {
            return Err(FlexError::ShapeMismatch(
                "teacher/student logits disagree".into(),
            ));
        }
        let p = scale_rows(t);
        for idx in 0..p.data.len() {
            let (pi, qi) = (p.data[idx], q.data[idx]);
            value += tau * tau * pi * (pi.ln() - qi.ln());
            grad.data[idx] += tau * (qi - pi);
        }
    }
    for g in grad.data.iter_mut() {
        *g /= j * n;
    }
    Ok((value / (j * n), grad))
}

/// CE + lambda * KL; reduces to plain CE when there are no teachers or
/// lambda is zero.
pub fn total_loss(
    logits: &Matrix,
    labels: &[usize],
    soft: &[Matrix],
    cfg: &KdConfig,
) -> Result<(f64, Matrix)> {
    let (ce, mut grad) = nn::ce_loss(logits, labels)?;
    if soft.is_empty() || cfg.lambda == 0.0 {
        return Ok((ce, grad));
    }
    let (kl, kl_grad) = kl_term(soft, logits, cfg.temperature)?;
    for (g, kg) in grad.data.iter_mut().zip(&kl_grad.data) {
        *g += cfg.lambda * kg;
    }
    Ok((ce + cfg.lambda * kl, grad))
}

struct DistillLoss<'a> {
    soft: &'a [Matrix],
    cfg: &'a KdConfig,
}

impl LogitLoss for DistillLoss<'_> {
    fn eval(&self, logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
        total_loss(logits, labels, self.soft, self.cfg)
    }
}

/// Local training loop: seeded shuffling, per-batch teacher extraction from
/// the current assigned params, momentum-SGD steps.
#[allow(clippy::too_many_arguments)]
pub fn local_train(
    mut assigned: ParamSet,
    teacher_widths: &[Vec<usize>],
    features: &Matrix,
    labels: &[usize],
    cfg: &KdConfig,
    learning_rate: f64,
    momentum: f64,
    seed: u64,
) -> Result<LocalResult> {
    cfg.validate()?;
    if features.rows == 0 {
        return Err(FlexError::EmptyInput("empty local dataset".into()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut state = OptimizerState::new(&assigned, learning_rate, momentum);
    let n = features.rows;
    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.local_epochs);

    for _ in 0..cfg.local_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        let mut start = 0;
        while start < n {
            let end = (start + cfg.batch_size).min(n);
            let mut batch = Matrix::zeros(end - start, features.cols);
            let mut batch_labels = Vec::with_capacity(end - start);
            for (bi, &r) in order[start..end].iter().enumerate() {
                batch.data[bi * batch.cols..(bi + 1) * batch.cols].copy_from_slice(features.row(r));
                batch_labels.push(labels[r]);
            }
            let soft = if cfg.lambda > 0.0 {
                soft_labels(&assigned, teacher_widths, &batch)?
            } else {
                Vec::new()
            };
            let loss = nn::backward_and_step(
                &mut assigned,
                &mut state,
                &batch,
                &batch_labels,
                &DistillLoss { soft: &soft, cfg },
            )?;
            epoch_loss += loss;
            batches += 1;
            start = end;
        }
        epoch_losses.push(epoch_loss / batches as f64);
    }

    if !assigned.is_finite() {
        return Err(FlexError::NonFiniteLoss {
            device: usize::MAX,
            round: usize::MAX,
        });
    }
    Ok(LocalResult {
        params: assigned,
        sample_count: n,
        epoch_losses,
    })
}
