//! Minimal dense feedforward engine: ReLU hidden layers, linear output,
//! manual backprop, SGD with momentum. Everything is f64 and deterministic.

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FlexError, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |v| v.len());
        let mut data = Vec::with_capacity(r * c);
        for row in &rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Matrix {
            rows: r,
            cols: c,
            data,
        }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Layer shapes of a model: `layer_widths[0]` is the input dimension, the
/// last entry is the class count, everything in between is a ReLU hidden
/// layer. `layer_groups` optionally partitions the hidden layers into
/// contiguous groups that are scored and pruned as one unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelArch {
    pub layer_widths: Vec<usize>,
    pub layer_groups: Option<Vec<Vec<usize>>>,
}

impl ModelArch {
    pub fn new(layer_widths: Vec<usize>, layer_groups: Option<Vec<Vec<usize>>>) -> Result<Self> {
        if layer_widths.len() < 3 {
            return Err(FlexError::InvalidArch(
                "need at least one hidden layer".into(),
            ));
        }
        if layer_widths.contains(&0) {
            return Err(FlexError::InvalidArch("zero-width layer".into()));
        }
        if *layer_widths.last().unwrap() < 2 {
            return Err(FlexError::InvalidArch("output width must be >= 2".into()));
        }
        let hidden = layer_widths.len() - 2;
        if let Some(groups) = &layer_groups {
            let mut expected = 0usize;
            for g in groups {
                if g.is_empty() {
                    return Err(FlexError::InvalidArch("empty layer group".into()));
                }
                for (k, &idx) in g.iter().enumerate() {
                    if idx != expected + k {
                        return Err(FlexError::InvalidArch(
                            "groups must be contiguous and cover hidden layers in order".into(),
                        ));
                    }
                }
                expected += g.len();
            }
            if expected != hidden {
                return Err(FlexError::InvalidArch(
                    "groups must cover all hidden layers exactly once".into(),
                ));
            }
        }
        Ok(ModelArch {
            layer_widths,
            layer_groups,
        })
    }

    pub fn num_hidden(&self) -> usize {
        self.layer_widths.len() - 2
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }

    /// Prunable units: the configured groups, or one singleton per hidden layer.
    pub fn units(&self) -> Vec<Vec<usize>> {
        match &self.layer_groups {
            Some(g) => g.clone(),
            None => (0..self.num_hidden()).map(|i| vec![i]).collect(),
        }
    }

    /// Parameter count of dense layer `j` (weights + biases), 0-based over
    /// the `layer_widths.len() - 1` dense layers.
    pub fn layer_param_count(&self, j: usize) -> usize {
        let x = self.layer_widths[j];
        let y = self.layer_widths[j + 1];
        x * y + y
    }
}

/// Total parameter count for a width vector (input, hidden..., output).
pub fn param_count_for_widths(widths: &[usize]) -> usize {
    widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

/// One dense layer: `weights` is row-major (out_dim x in_dim), `bias` has
/// length out_dim.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub out_dim: usize,
    pub in_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        DenseLayer {
            out_dim,
            in_dim,
            weights: vec![0.0; out_dim * in_dim],
            bias: vec![0.0; out_dim],
        }
    }

    #[inline]
    pub fn w(&self, r: usize, c: usize) -> f64 {
        self.weights[r * self.in_dim + c]
    }

    #[inline]
    pub fn w_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.weights[r * self.in_dim + c]
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

/// All parameters of a (sub)model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub layers: Vec<DenseLayer>,
}

impl ParamSet {
    pub fn zeros(widths: &[usize]) -> Self {
        let layers = widths
            .windows(2)
            .map(|w| DenseLayer::zeros(w[1], w[0]))
            .collect();
        ParamSet { layers }
    }

    /// Seed-deterministic init, uniform in +-sqrt(6 / (fan_in + fan_out)).
    pub fn init(widths: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(widths.len() - 1);
        for w in widths.windows(2) {
            let (x, y) = (w[0], w[1]);
            let bound = (6.0 / (x + y) as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound);
            let mut layer = DenseLayer::zeros(y, x);
            for v in layer.weights.iter_mut() {
                *v = dist.sample(&mut rng);
            }
            layers.push(layer);
        }
        ParamSet { layers }
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.layers[0].in_dim];
        w.extend(self.layers.iter().map(|l| l.out_dim));
        w
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.param_count()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }
}

/// Per-ReLU-layer zero counts collected during a forward pass.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ActivationTrace {
    pub zeros: Vec<u64>,
    pub totals: Vec<u64>,
}

impl ActivationTrace {
    pub fn new(num_hidden: usize) -> Self {
        ActivationTrace {
            zeros: vec![0; num_hidden],
            totals: vec![0; num_hidden],
        }
    }

    pub fn merge(&mut self, other: &ActivationTrace) {
        assert_eq!(self.zeros.len(), other.zeros.len());
        for i in 0..self.zeros.len() {
            self.zeros[i] += other.zeros[i];
            self.totals[i] += other.totals[i];
        }
    }
}

/// Momentum SGD state; buffers mirror the ParamSet shapes.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub momentum: f64,
    pub buffers: Vec<DenseLayer>,
}

impl OptimizerState {
    pub fn new(params: &ParamSet, learning_rate: f64, momentum: f64) -> Self {
        let buffers = params
            .layers
            .iter()
            .map(|l| DenseLayer::zeros(l.out_dim, l.in_dim))
            .collect();
        OptimizerState {
            learning_rate,
            momentum,
            buffers,
        }
    }
}

fn check_batch(params: &ParamSet, batch: &Matrix) -> Result<()> {
    if batch.cols != params.layers[0].in_dim {
        return Err(FlexError::ShapeMismatch(format!(
            "batch has {} features, model expects {}",
            batch.cols, params.layers[0].in_dim
        )));
    }
    Ok(())
}

fn dense_forward(layer: &DenseLayer, input: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(input.rows, layer.out_dim);
    for r in 0..input.rows {
        let x = input.row(r);
        for o in 0..layer.out_dim {
            let mut acc = layer.bias[o];
            let wrow = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
            for (wi, xi) in wrow.iter().zip(x) {
                acc += wi * xi;
            }
            *out.at_mut(r, o) = acc;
        }
    }
    out
}

/// Forward pass: ReLU after every hidden layer, raw logits from the last.
pub fn forward(params: &ParamSet, batch: &Matrix) -> Result<Matrix> {
    check_batch(params, batch)?;
    let last = params.layers.len() - 1;
    let mut act = batch.clone();
    for (j, layer) in params.layers.iter().enumerate() {
        let mut z = dense_forward(layer, &act);
        if j != last {
            for v in z.data.iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        act = z;
    }
    Ok(act)
}

/// Forward pass that also counts exact zeros after each ReLU.
pub fn forward_capture(params: &ParamSet, batch: &Matrix) -> Result<(Matrix, ActivationTrace)> {
    check_batch(params, batch)?;
    let last = params.layers.len() - 1;
    let mut trace = ActivationTrace::new(last);
    let mut act = batch.clone();
    for (j, layer) in params.layers.iter().enumerate() {
        let mut z = dense_forward(layer, &act);
        if j != last {
            let mut zeros = 0u64;
            for v in z.data.iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
                if *v == 0.0 {
                    zeros += 1;
                }
            }
            trace.zeros[j] = zeros;
            trace.totals[j] = z.data.len() as u64;
        }
        act = z;
    }
    Ok((act, trace))
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows {
        let row = &mut out.data[r * out.cols..(r + 1) * out.cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Mean cross-entropy over the batch plus its gradient w.r.t. the logits.
pub fn ce_loss(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    if labels.len() != logits.rows {
        return Err(FlexError::ShapeMismatch(format!(
            "{} labels for {} logit rows",
            labels.len(),
            logits.rows
        )));
    }
    for &y in labels {
        if y >= logits.cols {
            return Err(FlexError::LabelOutOfRange {
                label: y,
                classes: logits.cols,
            });
        }
    }
    let probs = softmax_rows(logits);
    let n = logits.rows as f64;
    let mut loss = 0.0;
    let mut grad = probs.clone();
    for (r, &y) in labels.iter().enumerate() {
        loss -= probs.at(r, y).ln();
        *grad.at_mut(r, y) -= 1.0;
    }
    for v in grad.data.iter_mut() {
        *v /= n;
    }
    Ok((loss / n, grad))
}

/// A loss defined on the output logits; the engine backpropagates whatever
/// gradient it returns.
pub trait LogitLoss {
    fn eval(&self, logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)>;
}

/// Plain cross-entropy.
pub struct CeLoss;

impl LogitLoss for CeLoss {
    fn eval(&self, logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
        ce_loss(logits, labels)
    }
}

/// One forward/backward pass followed by a momentum-SGD step:
/// v <- momentum * v + g; theta <- theta - lr * v. Returns the batch loss.
pub fn backward_and_step(
    params: &mut ParamSet,
    state: &mut OptimizerState,
    batch: &Matrix,
    labels: &[usize],
    loss: &dyn LogitLoss,
) -> Result<f64> {
    check_batch(params, batch)?;
    let last = params.layers.len() - 1;

    // forward, keeping post-activation of every layer
    let mut acts: Vec<Matrix> = Vec::with_capacity(params.layers.len() + 1);
    acts.push(batch.clone());
    for (j, layer) in params.layers.iter().enumerate() {
        let mut z = dense_forward(layer, acts.last().unwrap());
        if j != last {
            for v in z.data.iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        acts.push(z);
    }

    let (loss_value, grad_logits) = loss.eval(&acts[last + 1], labels)?;
    if !loss_value.is_finite() {
        return Err(FlexError::NonFiniteLoss {
            device: usize::MAX,
            round: usize::MAX,
        });
    }

    // backward: delta is dL/d(pre-activation of layer j)
    let mut delta = grad_logits;
    for j in (0..params.layers.len()).rev() {
        let input = &acts[j];
        let layer = &mut params.layers[j];
        let buf = &mut state.buffers[j];

        // propagate before the weights change
        let mut prev_delta = if j > 0 {
            let mut d = Matrix::zeros(delta.rows, layer.in_dim);
            for r in 0..delta.rows {
                for o in 0..layer.out_dim {
                    let g = delta.at(r, o);
                    if g == 0.0 {
                        continue;
                    }
                    let wrow = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                    let drow = &mut d.data[r * layer.in_dim..(r + 1) * layer.in_dim];
                    for (dv, wv) in drow.iter_mut().zip(wrow) {
                        *dv += g * wv;
                    }
                }
            }
            Some(d)
        } else {
            None
        };

        for o in 0..layer.out_dim {
            let mut gb = 0.0;
            for r in 0..delta.rows {
                gb += delta.at(r, o);
            }
            let vb = state.momentum * buf.bias[o] + gb;
            buf.bias[o] = vb;
            layer.bias[o] -= state.learning_rate * vb;

            for i in 0..layer.in_dim {
                let mut gw = 0.0;
                for r in 0..delta.rows {
                    gw += delta.at(r, o) * input.at(r, i);
                }
                let idx = o * layer.in_dim + i;
                let vw = state.momentum * buf.weights[idx] + gw;
                buf.weights[idx] = vw;
                layer.weights[idx] -= state.learning_rate * vw;
            }
        }

        if let Some(d) = prev_delta.as_mut() {
            // ReLU mask from the stored post-activation of layer j-1
            let a = &acts[j];
            for (dv, av) in d.data.iter_mut().zip(&a.data) {
                if *av <= 0.0 {
                    *dv = 0.0;
                }
            }
            delta = prev_delta.unwrap();
        }
    }

    Ok(loss_value)
}

/// Classification accuracy by argmax.
pub fn accuracy(params: &ParamSet, features: &Matrix, labels: &[usize]) -> Result<f64> {
    let logits = forward(params, features)?;
    let mut correct = 0usize;
    for (r, &y) in labels.iter().enumerate() {
        let row = logits.row(r);
        let mut best = 0usize;
        for c in 1..row.len() {
            if row[c] > row[best] {
                best = c;
            }
        }
        if best == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_net(widths: &[usize], seed: u64) -> ParamSet {
        ParamSet::init(widths, seed)
    }

    fn random_batch(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut m = Matrix::zeros(rows, cols);
        for v in m.data.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        m
    }

    /// Naive triple-loop forward used as the independent oracle.
    fn oracle_forward(params: &ParamSet, batch: &Matrix) -> Matrix {
        let last = params.layers.len() - 1;
        let mut act = batch.clone();
        for (j, layer) in params.layers.iter().enumerate() {
            let mut z = Matrix::zeros(act.rows, layer.out_dim);
            for r in 0..act.rows {
                for o in 0..layer.out_dim {
                    let mut s = layer.bias[o];
                    for i in 0..layer.in_dim {
                        s += layer.w(o, i) * act.at(r, i);
                    }
                    *z.at_mut(r, o) = if j != last { s.max(0.0) } else { s };
                }
            }
            act = z;
        }
        act
    }

    #[test]
    fn forward_zero_params_gives_zero_logits() {
        let params = ParamSet::zeros(&[3, 4, 2]);
        let batch = random_batch(5, 3, 1);
        let logits = forward(&params, &batch).unwrap();
        assert!(logits.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_relu_clamps_negative_hidden() {
        // 1-1-2 net: hidden weight 1, bias 0; input -2 -> hidden 0 -> logits 0
        let mut params = ParamSet::zeros(&[1, 1, 2]);
        params.layers[0].weights[0] = 1.0;
        let batch = Matrix::from_rows(vec![vec![-2.0]]);
        let logits = forward(&params, &batch).unwrap();
        assert_eq!(logits.data, vec![0.0, 0.0]);
    }

    #[test]
    fn forward_matches_naive_oracle() {
        let params = random_net(&[2, 3, 2], 7);
        let batch = random_batch(4, 2, 8);
        let logits = forward(&params, &batch).unwrap();
        let expect = oracle_forward(&params, &batch);
        for (a, b) in logits.data.iter().zip(&expect.data) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn forward_rejects_bad_shape() {
        let params = ParamSet::zeros(&[3, 4, 2]);
        let batch = random_batch(2, 5, 3);
        assert!(forward(&params, &batch).is_err());
    }

    #[test]
    fn capture_counts_extremes() {
        let mut params = ParamSet::zeros(&[2, 3, 2]);
        // all-negative pre-activations
        for b in params.layers[0].bias.iter_mut() {
            *b = -1.0;
        }
        let batch = Matrix::zeros(4, 2);
        let (_, trace) = forward_capture(&params, &batch).unwrap();
        assert_eq!(trace.zeros[0], trace.totals[0]);
        assert_eq!(trace.totals[0], 12);

        // all-positive pre-activations
        for b in params.layers[0].bias.iter_mut() {
            *b = 1.0;
        }
        let (_, trace) = forward_capture(&params, &batch).unwrap();
        assert_eq!(trace.zeros[0], 0);
    }

    #[test]
    fn capture_counts_match_enumeration() {
        let params = random_net(&[3, 5, 4, 2], 11);
        let batch = random_batch(6, 3, 12);
        let (_, trace) = forward_capture(&params, &batch).unwrap();

        // brute-force: recompute each hidden activation entry and count zeros
        let last = params.layers.len() - 1;
        let mut act = batch.clone();
        for (j, layer) in params.layers.iter().enumerate() {
            let mut z = Matrix::zeros(act.rows, layer.out_dim);
            let mut zeros = 0u64;
            for r in 0..act.rows {
                for o in 0..layer.out_dim {
                    let mut s = layer.bias[o];
                    for i in 0..layer.in_dim {
                        s += layer.w(o, i) * act.at(r, i);
                    }
                    let v = if j != last { s.max(0.0) } else { s };
                    if j != last && v == 0.0 {
                        zeros += 1;
                    }
                    *z.at_mut(r, o) = v;
                }
            }
            if j != last {
                assert_eq!(trace.zeros[j], zeros);
                assert_eq!(trace.totals[j], (act.rows * layer.out_dim) as u64);
            }
            act = z;
        }
    }

    #[test]
    fn ce_uniform_logits_is_ln_c() {
        let logits = Matrix::zeros(3, 5);
        let (loss, _) = ce_loss(&logits, &[0, 2, 4]).unwrap();
        assert!((loss - (5.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn ce_dominant_true_class_is_near_zero() {
        let mut logits = Matrix::zeros(1, 4);
        *logits.at_mut(0, 1) = 50.0;
        let (loss, _) = ce_loss(&logits, &[1]).unwrap();
        assert!(loss.abs() < 1e-8);
    }

    #[test]
    fn ce_rejects_out_of_range_label() {
        let logits = Matrix::zeros(1, 3);
        assert!(ce_loss(&logits, &[3]).is_err());
    }

    #[test]
    fn ce_gradient_matches_finite_differences() {
        let mut logits = random_batch(3, 4, 21);
        let labels = [1usize, 0, 3];
        let (_, grad) = ce_loss(&logits, &labels).unwrap();
        let h = 1e-5;
        for idx in 0..logits.data.len() {
            let orig = logits.data[idx];
            logits.data[idx] = orig + h;
            let (lp, _) = ce_loss(&logits, &labels).unwrap();
            logits.data[idx] = orig - h;
            let (lm, _) = ce_loss(&logits, &labels).unwrap();
            logits.data[idx] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let g = grad.data[idx];
            let denom = fd.abs().max(g.abs()).max(1e-8);
            assert!((fd - g).abs() / denom <= 1e-6, "fd {fd} vs {g}");
        }
    }

    #[test]
    fn zero_learning_rate_leaves_params() {
        let mut params = random_net(&[2, 3, 2], 5);
        let before = params.clone();
        let mut state = OptimizerState::new(&params, 0.0, 0.5);
        let batch = random_batch(4, 2, 6);
        backward_and_step(&mut params, &mut state, &batch, &[0, 1, 0, 1], &CeLoss).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn single_step_matches_hand_computation() {
        // 1-1-2 net acting on x = 1: logits (w1*b-ish) hand-stepped once.
        let mut params = ParamSet::zeros(&[1, 1, 2]);
        params.layers[0].weights[0] = 1.0; // hidden = relu(x)
        params.layers[1].weights = vec![0.5, -0.5];
        let batch = Matrix::from_rows(vec![vec![1.0]]);
        let labels = [0usize];

        // forward: hidden a = 1; logits (0.5, -0.5); p = softmax
        let p0 = 0.5f64.exp() / (0.5f64.exp() + (-0.5f64).exp());
        let p1 = 1.0 - p0;
        // grads wrt logits: (p0 - 1, p1)
        let g = [p0 - 1.0, p1];
        // layer1: dW = g * a = g; db = g
        // layer0: dA = g . w = g0*0.5 + g1*(-0.5); relu'(1)=1; dW = dA * x; db = dA
        let da = g[0] * 0.5 + g[1] * (-0.5);
        let lr = 0.1;

        let mut state = OptimizerState::new(&params, lr, 0.0);
        backward_and_step(&mut params, &mut state, &batch, &labels, &CeLoss).unwrap();

        assert!((params.layers[1].weights[0] - (0.5 - lr * g[0])).abs() < 1e-12);
        assert!((params.layers[1].weights[1] - (-0.5 - lr * g[1])).abs() < 1e-12);
        assert!((params.layers[1].bias[0] - (-lr * g[0])).abs() < 1e-12);
        assert!((params.layers[0].weights[0] - (1.0 - lr * da)).abs() < 1e-12);
        assert!((params.layers[0].bias[0] - (-lr * da)).abs() < 1e-12);
    }

    /// Central finite differences of the CE loss through the whole net.
    #[test]
    fn full_net_gradient_matches_finite_differences() {
        let widths = [3usize, 6, 5, 3];
        let params = random_net(&widths, 33);
        let batch = random_batch(5, 3, 34);
        let labels = [0usize, 1, 2, 1, 0];
        let h = 1e-5;

        // analytic gradient via a lr=1, momentum=0 step: g = before - after
        let mut stepped = params.clone();
        let mut state = OptimizerState::new(&stepped, 1.0, 0.0);
        backward_and_step(&mut stepped, &mut state, &batch, &labels, &CeLoss).unwrap();

        let loss_at = |p: &ParamSet| {
            let logits = forward(p, &batch).unwrap();
            ce_loss(&logits, &labels).unwrap().0
        };

        for j in 0..params.layers.len() {
            for idx in 0..params.layers[j].weights.len() {
                let mut pp = params.clone();
                pp.layers[j].weights[idx] += h;
                let lp = loss_at(&pp);
                pp.layers[j].weights[idx] -= 2.0 * h;
                let lm = loss_at(&pp);
                let fd = (lp - lm) / (2.0 * h);
                let g = params.layers[j].weights[idx] - stepped.layers[j].weights[idx];
                let denom = fd.abs().max(g.abs()).max(1e-6);
                assert!(
                    (fd - g).abs() / denom <= 1e-4,
                    "layer {j} w[{idx}]: {fd} vs {g}"
                );
            }
        }
    }

    #[test]
    fn param_count_examples() {
        assert_eq!(param_count_for_widths(&[2, 3, 2]), 17);
        assert_eq!(param_count_for_widths(&[4, 3, 3]), 27);
        let p = ParamSet::zeros(&[2, 3, 2]);
        assert_eq!(p.param_count(), 17);
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = ParamSet::init(&[4, 8, 3], 42);
        let b = ParamSet::init(&[4, 8, 3], 42);
        assert_eq!(a, b);
        let c = ParamSet::init(&[4, 8, 3], 43);
        assert_ne!(a, c);
    }

    #[test]
    fn arch_validation() {
        assert!(ModelArch::new(vec![4, 2], None).is_err());
        assert!(ModelArch::new(vec![4, 3, 1], None).is_err());
        assert!(ModelArch::new(vec![4, 3, 3, 2], Some(vec![vec![0], vec![1]])).is_ok());
        assert!(ModelArch::new(vec![4, 3, 3, 2], Some(vec![vec![1], vec![0]])).is_err());
        assert!(ModelArch::new(vec![4, 3, 3, 2], Some(vec![vec![0]])).is_err());
    }
}
