//! Fully connected tanh networks: initialization, batched forward passes,
//! per-sample Jacobians and MAP training with Adam.
//!
//! Parameters are flattened layer by layer. Each layer stores its weight
//! matrix row-major (`fan_out × fan_in`) followed by its bias (`fan_out`).

use std::path::Path;

use nalgebra::{DMatrix, DMatrixView};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Standardization};
use crate::error::{Error, Result};
use crate::likelihood::Likelihood;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MlpArchitecture {
    pub input_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub output_dim: usize,
    #[serde(default)]
    pub activation: Activation,
    /// Layers carry bias terms. Bias-free networks are only used for
    /// linear-model checks.
    #[serde(default = "default_true")]
    pub bias: bool,
}

/// Position of one layer inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub fan_in: usize,
    pub fan_out: usize,
    pub offset: usize,
}

impl LayerSpec {
    fn weight_range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.fan_in * self.fan_out
    }

    fn bias_offset(&self) -> usize {
        self.offset + self.fan_in * self.fan_out
    }
}

impl MlpArchitecture {
    pub fn new(input_dim: usize, hidden_widths: Vec<usize>, output_dim: usize) -> Self {
        MlpArchitecture {
            input_dim,
            hidden_widths,
            output_dim,
            activation: Activation::Tanh,
            bias: true,
        }
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_widths.contains(&0) {
            return Err(Error::Config(format!("invalid architecture {self:?}")));
        }
        Ok(())
    }

    pub fn layers(&self) -> Vec<LayerSpec> {
        let mut dims = Vec::with_capacity(self.hidden_widths.len() + 2);
        dims.push(self.input_dim);
        dims.extend(&self.hidden_widths);
        dims.push(self.output_dim);
        let mut offset = 0;
        dims.windows(2)
            .map(|w| {
                let spec = LayerSpec {
                    fan_in: w[0],
                    fan_out: w[1],
                    offset,
                };
                offset += w[0] * w[1] + if self.bias { w[1] } else { 0 };
                spec
            })
            .collect()
    }

    /// Total parameter count `P`.
    pub fn num_params(&self) -> usize {
        self.layers()
            .iter()
            .map(|l| (l.fan_in + usize::from(self.bias)) * l.fan_out)
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpWeights {
    pub arch: MlpArchitecture,
    pub w: Vec<f64>,
}

/// Scaled-normal weights (standard deviation `1/√fan_in`) and zero biases.
pub fn mlp_init(arch: &MlpArchitecture, seed: u64) -> MlpWeights {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = vec![0.0; arch.num_params()];
    for layer in arch.layers() {
        let scale = 1.0 / (layer.fan_in as f64).sqrt();
        for v in &mut w[layer.weight_range()] {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = scale * z;
        }
    }
    MlpWeights {
        arch: arch.clone(),
        w,
    }
}

impl MlpWeights {
    pub fn new(arch: MlpArchitecture, w: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        if w.len() != arch.num_params() {
            return Err(Error::DimensionMismatch {
                context: "MlpWeights::new",
                expected: arch.num_params(),
                found: w.len(),
            });
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("weights must be finite".into()));
        }
        Ok(MlpWeights { arch, w })
    }

    pub fn num_params(&self) -> usize {
        self.w.len()
    }

    pub fn output_dim(&self) -> usize {
        self.arch.output_dim
    }

    pub fn with_params(&self, w: Vec<f64>) -> MlpWeights {
        debug_assert_eq!(w.len(), self.w.len());
        MlpWeights {
            arch: self.arch.clone(),
            w,
        }
    }

    fn check_inputs(&self, cols: usize) -> Result<()> {
        if cols != self.arch.input_dim {
            return Err(Error::DimensionMismatch {
                context: "network input dimension",
                expected: self.arch.input_dim,
                found: cols,
            });
        }
        Ok(())
    }

    /// `Wᵀ` of a layer as a `fan_in × fan_out` view.
    fn weight_t(&self, layer: &LayerSpec) -> DMatrixView<'_, f64> {
        DMatrixView::from_slice(&self.w[layer.weight_range()], layer.fan_in, layer.fan_out)
    }

    fn add_bias(&self, layer: &LayerSpec, z: &mut DMatrix<f64>) {
        if !self.arch.bias {
            return;
        }
        let b = &self.w[layer.bias_offset()..layer.bias_offset() + layer.fan_out];
        for (j, mut col) in z.column_iter_mut().enumerate() {
            col.add_scalar_mut(b[j]);
        }
    }

    /// Forward pass keeping every post-activation (input first, output last).
    fn forward_trace(&self, x: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
        let layers = self.arch.layers();
        let mut acts = Vec::with_capacity(layers.len() + 1);
        acts.push(x.clone());
        for (l, layer) in layers.iter().enumerate() {
            let mut z = &acts[l] * self.weight_t(layer);
            self.add_bias(layer, &mut z);
            if l + 1 < layers.len() {
                z.apply(|v| *v = v.tanh());
            }
            acts.push(z);
        }
        acts
    }

    /// Backpropagates `d_out` (`N × C`, loss gradient wrt outputs) and returns
    /// the parameter gradient summed over the batch.
    fn backward(&self, acts: &[DMatrix<f64>], d_out: DMatrix<f64>) -> Vec<f64> {
        let layers = self.arch.layers();
        let mut grad = vec![0.0; self.w.len()];
        let mut dz = d_out;
        for (l, layer) in layers.iter().enumerate().rev() {
            let a_prev = &acts[l];
            let dw_t = a_prev.transpose() * &dz;
            grad[layer.weight_range()].copy_from_slice(dw_t.as_slice());
            if self.arch.bias {
                let b = layer.bias_offset();
                for (j, col) in dz.column_iter().enumerate() {
                    grad[b + j] = col.sum();
                }
            }
            if l > 0 {
                let mut da = &dz * self.weight_t(layer).transpose();
                da.zip_apply(a_prev, |g, a| *g *= 1.0 - a * a);
                dz = da;
            }
        }
        grad
    }

    /// Writes the transposed Jacobian `J(x)ᵀ` (`P × C`, column-major) into
    /// `out`.
    fn jacobian_t_into(&self, x: &[f64], out: &mut [f64]) {
        let layers = self.arch.layers();
        let c_out = self.arch.output_dim;
        let p = self.w.len();
        debug_assert_eq!(out.len(), p * c_out);

        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(layers.len());
        acts.push(x.to_vec());
        for (l, layer) in layers.iter().enumerate().take(layers.len() - 1) {
            let a = &acts[l];
            let mut z = vec![0.0; layer.fan_out];
            for (o, zo) in z.iter_mut().enumerate() {
                let row = &self.w[layer.offset + o * layer.fan_in..layer.offset + (o + 1) * layer.fan_in];
                let mut s = if self.arch.bias { self.w[layer.bias_offset() + o] } else { 0.0 };
                for (wi, ai) in row.iter().zip(a) {
                    s += wi * ai;
                }
                *zo = s.tanh();
            }
            acts.push(z);
        }

        // g[c][o] = ∂f_c / ∂z_o for the current layer
        let mut g: Vec<Vec<f64>> = (0..c_out)
            .map(|c| {
                let mut e = vec![0.0; c_out];
                e[c] = 1.0;
                e
            })
            .collect();
        for (l, layer) in layers.iter().enumerate().rev() {
            let a_prev = &acts[l];
            for (c, gc) in g.iter().enumerate() {
                let col = &mut out[c * p..(c + 1) * p];
                for (o, &go) in gc.iter().enumerate() {
                    let base = layer.offset + o * layer.fan_in;
                    for (i, &ai) in a_prev.iter().enumerate() {
                        col[base + i] = go * ai;
                    }
                    if self.arch.bias {
                        col[layer.bias_offset() + o] = go;
                    }
                }
            }
            if l > 0 {
                g = g
                    .iter()
                    .map(|gc| {
                        let mut prev = vec![0.0; layer.fan_in];
                        for (o, &go) in gc.iter().enumerate() {
                            if go == 0.0 {
                                continue;
                            }
                            let row = &self.w[layer.offset + o * layer.fan_in..layer.offset + (o + 1) * layer.fan_in];
                            for (pi, wi) in prev.iter_mut().zip(row) {
                                *pi += go * wi;
                            }
                        }
                        for (pi, ai) in prev.iter_mut().zip(&acts[l]) {
                            *pi *= 1.0 - ai * ai;
                        }
                        prev
                    })
                    .collect();
            }
        }
    }

    /// Stacked transposed Jacobians for every row of `x`: a `P × (N·C)`
    /// matrix whose column `i·C + c` is `∇_w f_c(x_i)`.
    pub fn jacobian_stack(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_inputs(x.ncols())?;
        let (n, c, p) = (x.nrows(), self.arch.output_dim, self.w.len());
        let mut out = DMatrix::zeros(p, n * c);
        let mut row = vec![0.0; x.ncols()];
        for i in 0..n {
            for (j, r) in row.iter_mut().enumerate() {
                *r = x[(i, j)];
            }
            let cols = &mut out.as_mut_slice()[i * c * p..(i + 1) * c * p];
            self.jacobian_t_into(&row, cols);
        }
        Ok(out)
    }
}

/// Latent outputs `f_w(x)` for every row of `x` (`N × C`).
pub fn mlp_forward(w: &MlpWeights, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    w.check_inputs(x.ncols())?;
    Ok(w.forward_trace(x).pop().expect("at least one layer"))
}

/// `J(x) = [∇_w f_w(x)]ᵀ`, shape `C × P`.
pub fn mlp_jacobian(w: &MlpWeights, x: &[f64]) -> Result<DMatrix<f64>> {
    w.check_inputs(x.len())?;
    let (c, p) = (w.arch.output_dim, w.w.len());
    let mut out = vec![0.0; p * c];
    w.jacobian_t_into(x, &mut out);
    Ok(DMatrix::from_column_slice(p, c, &out).transpose())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// `δ` in the weight-decay term `(δ/2)‖w‖²`.
    pub prior_precision: f64,
    /// Optimizer steps without validation improvement before stopping.
    pub patience: usize,
    pub eval_interval: usize,
    pub max_steps: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 128,
            prior_precision: 30.0,
            patience: 1000,
            eval_interval: 100,
            max_steps: 50_000,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !(self.prior_precision > 0.0) || self.batch_size == 0 || self.eval_interval == 0 {
            return Err(Error::Config(format!("invalid training configuration {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    /// Mean per-sample negative log-likelihood over the minibatches since the
    /// previous record (initial full-batch value at step 0).
    pub train_loss: f64,
    pub valid_nlpd: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainTrace {
    pub records: Vec<TraceRecord>,
    pub best_step: usize,
}

impl TrainTrace {
    pub fn best_valid_nlpd(&self) -> f64 {
        self.records
            .iter()
            .find(|r| r.step == self.best_step)
            .map_or(f64::NAN, |r| r.valid_nlpd)
    }
}

fn check_likelihood(w: &MlpWeights, lik: &Likelihood) -> Result<()> {
    if lik.latent_dim() != w.output_dim() {
        return Err(Error::DimensionMismatch {
            context: "likelihood latent dimension vs network outputs",
            expected: w.output_dim(),
            found: lik.latent_dim(),
        });
    }
    Ok(())
}

/// Negative log-likelihood of each row and its gradient wrt the outputs.
fn nll_and_grad(lik: &Likelihood, f: &DMatrix<f64>, data: &Dataset, rows: &[usize]) -> Result<(f64, DMatrix<f64>)> {
    let c = f.ncols();
    let mut grad = DMatrix::zeros(f.nrows(), c);
    let mut total = 0.0;
    let mut fi = vec![0.0; c];
    for (r, &i) in rows.iter().enumerate() {
        for (k, v) in fi.iter_mut().enumerate() {
            *v = f[(r, k)];
        }
        let y = data.target(i);
        total -= lik.log_prob(y, &fi)?;
        let g = lik.grad_f(y, &fi)?;
        for k in 0..c {
            grad[(r, k)] = -g[k];
        }
    }
    Ok((total, grad))
}

/// Mean negative log predictive density of the network's point predictions.
pub fn point_nlpd(w: &MlpWeights, data: &Dataset, lik: &Likelihood) -> Result<f64> {
    if data.is_empty() {
        return Ok(f64::NAN);
    }
    let f = mlp_forward(w, &data.x)?;
    let rows: Vec<usize> = (0..data.len()).collect();
    let (total, _) = nll_and_grad(lik, &f, data, &rows)?;
    Ok(total / data.len() as f64)
}

/// `Σᵢ -log p(yᵢ | f_w(xᵢ)) + (δ/2)‖w‖²` over the full dataset.
pub fn regularized_loss(w: &MlpWeights, data: &Dataset, lik: &Likelihood, prior_precision: f64) -> Result<f64> {
    let reg = 0.5 * prior_precision * w.w.iter().map(|v| v * v).sum::<f64>();
    if data.is_empty() {
        return Ok(reg);
    }
    let f = mlp_forward(w, &data.x)?;
    let rows: Vec<usize> = (0..data.len()).collect();
    Ok(nll_and_grad(lik, &f, data, &rows)?.0 + reg)
}

/// Gradient of [`regularized_loss`].
pub fn regularized_loss_grad(w: &MlpWeights, data: &Dataset, lik: &Likelihood, prior_precision: f64) -> Result<Vec<f64>> {
    let rows: Vec<usize> = (0..data.len()).collect();
    let acts = w.forward_trace(&data.x);
    let (_, d_out) = nll_and_grad(lik, acts.last().expect("output"), data, &rows)?;
    let mut g = w.backward(&acts, d_out);
    for (gi, wi) in g.iter_mut().zip(&w.w) {
        *gi += prior_precision * wi;
    }
    Ok(g)
}

/// Adam on the minibatch estimate `(N/B) Σ_batch ℓ + (δ/2)‖w‖²`, with early
/// stopping on validation NLPD. Returns the best validation checkpoint.
pub fn train_map(
    arch: &MlpArchitecture,
    train: &Dataset,
    valid: &Dataset,
    lik: &Likelihood,
    cfg: &TrainConfig,
) -> Result<(MlpWeights, TrainTrace)> {
    cfg.validate()?;
    arch.validate()?;
    lik.validate()?;
    if train.is_empty() || valid.is_empty() {
        return Err(Error::EmptySplit {
            split: if train.is_empty() { "train" } else { "valid" },
            n: 0,
        });
    }
    let mut weights = mlp_init(arch, cfg.seed);
    weights.check_inputs(train.input_dim())?;
    check_likelihood(&weights, lik)?;

    let n = train.len();
    let p = weights.num_params();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_ba7c);
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let (mut m, mut v) = (vec![0.0; p], vec![0.0; p]);
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);

    let initial_valid = point_nlpd(&weights, valid, lik)?;
    let initial_train = point_nlpd(&weights, train, lik)?;
    let mut trace = TrainTrace {
        records: vec![TraceRecord {
            step: 0,
            train_loss: initial_train,
            valid_nlpd: initial_valid,
        }],
        best_step: 0,
    };
    let mut best = (initial_valid, weights.w.clone());
    let (mut window_loss, mut window_count) = (0.0, 0usize);

    for step in 1..=cfg.max_steps {
        if cursor >= n {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let end = (cursor + cfg.batch_size).min(n);
        let batch = &order[cursor..end];
        cursor = end;

        let xb = train.x.select_rows(batch);
        let acts = weights.forward_trace(&xb);
        let (nll, mut d_out) = nll_and_grad(lik, acts.last().expect("output"), train, batch)?;
        if !nll.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        let scale = n as f64 / batch.len() as f64;
        d_out *= scale;
        let grad = weights.backward(&acts, d_out);
        window_loss += nll;
        window_count += batch.len();

        let t = step as i32;
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        for j in 0..p {
            let g = grad[j] + cfg.prior_precision * weights.w[j];
            m[j] = b1 * m[j] + (1.0 - b1) * g;
            v[j] = b2 * v[j] + (1.0 - b2) * g * g;
            weights.w[j] -= cfg.learning_rate * (m[j] / c1) / ((v[j] / c2).sqrt() + cfg.adam_eps);
        }

        if step % cfg.eval_interval == 0 {
            let valid_nlpd = point_nlpd(&weights, valid, lik)?;
            if !valid_nlpd.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            trace.records.push(TraceRecord {
                step,
                train_loss: window_loss / window_count.max(1) as f64,
                valid_nlpd,
            });
            window_loss = 0.0;
            window_count = 0;
            if valid_nlpd < best.0 {
                best = (valid_nlpd, weights.w.clone());
                trace.best_step = step;
            } else if step - trace.best_step >= cfg.patience {
                break;
            }
        }
    }
    weights.w = best.1;
    Ok((weights, trace))
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Network checkpoint with enough context to rebuild the posterior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub arch: MlpArchitecture,
    pub weights: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub likelihood: Option<Likelihood>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior_precision: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub standardization: Option<Standardization>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split_fractions: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub class_names: Vec<String>,
}

impl Checkpoint {
    pub fn new(weights: &MlpWeights) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            arch: weights.arch.clone(),
            weights: weights.w.clone(),
            likelihood: None,
            prior_precision: None,
            standardization: None,
            split_seed: None,
            split_fractions: None,
            class_names: Vec::new(),
        }
    }

    pub fn mlp(&self) -> Result<MlpWeights> {
        MlpWeights::new(self.arch.clone(), self.weights.clone())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                expected: CHECKPOINT_VERSION,
                found: ck.version,
            });
        }
        ck.mlp()?;
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::likelihood::Target;
    use proptest::prelude::*;

    #[test]
    fn parameter_count() {
        assert_eq!(MlpArchitecture::new(2, vec![3], 1).num_params(), 13);
        assert_eq!(MlpArchitecture::new(2, vec![], 1).without_bias().num_params(), 2);
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let arch = MlpArchitecture::new(4, vec![6, 5], 3);
        let a = mlp_init(&arch, 42);
        assert_eq!(a, mlp_init(&arch, 42));
        assert_ne!(a.w, mlp_init(&arch, 43).w);
        for layer in arch.layers() {
            let b = layer.bias_offset();
            assert!(a.w[b..b + layer.fan_out].iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn forward_examples() {
        let arch = MlpArchitecture::new(3, vec![4], 2);
        let zero = MlpWeights::new(arch.clone(), vec![0.0; arch.num_params()]).unwrap();
        let x = DMatrix::from_fn(5, 3, |i, j| (i + j) as f64);
        let f = mlp_forward(&zero, &x).unwrap();
        assert_eq!(f.shape(), (5, 2));
        assert!(f.iter().all(|v| *v == 0.0));

        let lin = MlpWeights::new(MlpArchitecture::new(2, vec![], 1), vec![1.0, 0.0, 0.0]).unwrap();
        let f = mlp_forward(&lin, &DMatrix::from_row_slice(1, 2, &[2.0, 5.0])).unwrap();
        assert_eq!(f[(0, 0)], 2.0);

        assert!(matches!(mlp_forward(&lin, &DMatrix::zeros(1, 3)), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn linear_jacobian_pattern() {
        let arch = MlpArchitecture::new(3, vec![], 2);
        let w = mlp_init(&arch, 1);
        let x = [0.5, -1.5, 2.0];
        let j = mlp_jacobian(&w, &x).unwrap();
        // f_c = W[c]·x + b_c
        for c in 0..2 {
            for o in 0..2 {
                for i in 0..3 {
                    let expected = if o == c { x[i] } else { 0.0 };
                    assert_eq!(j[(c, o * 3 + i)], expected);
                }
                assert_eq!(j[(c, 6 + o)], f64::from(u8::from(o == c)));
            }
        }
        assert_eq!(j, mlp_jacobian(&w, &x).unwrap());
    }

    #[test]
    fn stack_matches_single_jacobians() {
        let w = mlp_init(&MlpArchitecture::new(3, vec![4, 3], 2), 9);
        let x = DMatrix::from_fn(4, 3, |i, j| ((i * 3 + j) as f64 * 0.37).sin());
        let stack = w.jacobian_stack(&x).unwrap();
        for i in 0..4 {
            let row: Vec<f64> = x.row(i).iter().copied().collect();
            let j = mlp_jacobian(&w, &row).unwrap();
            for c in 0..2 {
                assert_eq!(stack.column(i * 2 + c).into_owned(), j.row(c).transpose());
            }
        }
    }

    fn fd_relative_error(w: &MlpWeights, x: &[f64]) -> f64 {
        let h = 1e-4;
        let j = mlp_jacobian(w, x).unwrap();
        let xm = DMatrix::from_row_slice(1, x.len(), x);
        let mut fd = DMatrix::zeros(j.nrows(), j.ncols());
        for k in 0..w.num_params() {
            let mut plus = w.clone();
            let mut minus = w.clone();
            plus.w[k] += h;
            minus.w[k] -= h;
            let d = (mlp_forward(&plus, &xm).unwrap() - mlp_forward(&minus, &xm).unwrap()) / (2.0 * h);
            for c in 0..j.nrows() {
                fd[(c, k)] = d[(0, c)];
            }
        }
        (&j - &fd).amax() / j.amax().max(1e-12)
    }

    fn net_case() -> impl Strategy<Value = (MlpWeights, Vec<f64>)> {
        (1usize..=5, proptest::collection::vec(1usize..=8, 0..=2), 1usize..=3, any::<u64>()).prop_flat_map(
            |(d, widths, c, seed)| {
                let w = mlp_init(&MlpArchitecture::new(d, widths, c), seed);
                (Just(w), proptest::collection::vec(-2.0..2.0f64, d))
            },
        )
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn jacobian_matches_central_differences((w, x) in net_case()) {
            let err = fd_relative_error(&w, &x);
            prop_assert!(err < 1e-4, "relative error {err}");
        }
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let arch = MlpArchitecture::new(2, vec![5], 3);
        let w = mlp_init(&arch, 4);
        let x = DMatrix::from_fn(7, 2, |i, j| ((i + 2 * j) as f64).cos());
        let data = Dataset::classification("t", x, (0..7).map(|i| i % 3).collect(), 3);
        let lik = Likelihood::CategoricalSoftmax { num_classes: 3 };
        let g = regularized_loss_grad(&w, &data, &lik, 0.3).unwrap();
        let h = 1e-6;
        for k in 0..w.num_params() {
            let mut p = w.clone();
            let mut m = w.clone();
            p.w[k] += h;
            m.w[k] -= h;
            let fd = (regularized_loss(&p, &data, &lik, 0.3).unwrap() - regularized_loss(&m, &data, &lik, 0.3).unwrap()) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-6 * fd.abs().max(1.0), "param {k}: {fd} vs {}", g[k]);
        }
    }

    fn separable(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, 2, |_, _| StandardNormal.sample(&mut rng));
        let y = (0..n).map(|i| usize::from(x[(i, 0)] + 0.5 * x[(i, 1)] > 0.0)).collect();
        Dataset::classification("sep", x, y, 2)
    }

    fn accuracy(w: &MlpWeights, d: &Dataset) -> f64 {
        let f = mlp_forward(w, &d.x).unwrap();
        (0..d.len())
            .filter(|&i| matches!(d.target(i), Target::Class(k) if k == usize::from(f[(i, 0)] > 0.0)))
            .count() as f64
            / d.len() as f64
    }

    #[test]
    fn trains_separable_toy_and_is_deterministic() {
        let train = separable(200, 1);
        let valid = separable(60, 2);
        let arch = MlpArchitecture::new(2, vec![16], 1);
        let cfg = TrainConfig {
            learning_rate: 1e-2,
            batch_size: 32,
            max_steps: 3000,
            patience: 3000,
            prior_precision: 1e-4,
            ..TrainConfig::default()
        };
        let (w, trace) = train_map(&arch, &train, &valid, &Likelihood::BernoulliLogit, &cfg).unwrap();
        assert!(accuracy(&w, &train) >= 0.99, "accuracy {}", accuracy(&w, &train));
        let best = trace.records.iter().map(|r| r.valid_nlpd).fold(f64::INFINITY, f64::min);
        assert_eq!(trace.best_valid_nlpd(), best);

        let (w2, trace2) = train_map(&arch, &train, &valid, &Likelihood::BernoulliLogit, &cfg).unwrap();
        assert_eq!(trace, trace2);
        assert_eq!(w, w2);

        let init = mlp_init(&arch, cfg.seed);
        let lik = Likelihood::BernoulliLogit;
        assert!(
            regularized_loss(&w, &train, &lik, cfg.prior_precision).unwrap()
                <= regularized_loss(&init, &train, &lik, cfg.prior_precision).unwrap()
        );
    }

    #[test]
    fn strong_prior_shrinks_weights() {
        let train = separable(100, 3);
        let valid = separable(30, 4);
        let arch = MlpArchitecture::new(2, vec![8], 1);
        let run = |delta: f64| {
            let cfg = TrainConfig {
                learning_rate: 1e-2,
                batch_size: 50,
                prior_precision: delta,
                max_steps: 1500,
                patience: 1500,
                ..TrainConfig::default()
            };
            let (w, _) = train_map(&arch, &train, &valid, &Likelihood::BernoulliLogit, &cfg).unwrap();
            w.w.iter().map(|v| v * v).sum::<f64>().sqrt()
        };
        assert!(run(1e6) < run(1e-4));
    }

    #[test]
    fn exploding_learning_rate_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = DMatrix::from_fn(20, 1, |_, _| StandardNormal.sample(&mut rng));
        let y: Vec<f64> = (0..20).map(|i| 1e200 * x[(i, 0)]).collect();
        let data = Dataset::regression("r", x, y);
        let cfg = TrainConfig {
            max_steps: 10,
            ..TrainConfig::default()
        };
        let lik = Likelihood::Gaussian { noise_variance: 1e-300 };
        let err = train_map(&MlpArchitecture::new(1, vec![2], 1), &data, &data, &lik, &cfg).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { .. }));
    }

    #[test]
    fn checkpoint_round_trips_bit_exact() {
        let w = mlp_init(&MlpArchitecture::new(3, vec![7, 5], 2), 17);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        let mut ck = Checkpoint::new(&w);
        ck.prior_precision = Some(0.1 + 0.2);
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        let bits: Vec<u64> = back.weights.iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits, w.w.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
}
