//! MLP backbone with a cosine classifier head.
//!
//! The backbone maps inputs to an embedding which is L2-normalized; the head
//! is a `D×H` weight matrix whose columns are L2-normalized before use, so
//! every logit is a cosine similarity in `[-1, 1]`. Gradients are derived by
//! hand, including the Jacobians of both normalizations.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{argmax, dot, norm, Matrix, Rng, DEFAULT_EPS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
    pub num_seen_heads: usize,
    /// Heads reserved for novel classes.
    pub extra_head_capacity: usize,
    pub dropout_rate: f64,
    /// Indices of backbone layers excluded from optimizer updates.
    #[serde(default)]
    pub frozen_layers: Vec<usize>,
}

impl ModelConfig {
    pub fn num_heads(&self) -> usize {
        self.num_seen_heads + self.extra_head_capacity
    }

    pub fn num_layers(&self) -> usize {
        self.hidden_dims.len() + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::usage("input_dim must be at least 1"));
        }
        if self.embed_dim == 0 {
            return Err(Error::usage("embed_dim must be at least 1"));
        }
        if let Some(i) = self.hidden_dims.iter().position(|&h| h == 0) {
            return Err(Error::usage(format!("hidden layer {i} has width 0")));
        }
        if self.num_heads() < 2 {
            return Err(Error::usage(format!(
                "total heads (num_seen_heads + extra_head_capacity) must be >= 2, got {}",
                self.num_heads()
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::usage(format!(
                "dropout_rate must lie in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        if let Some(&l) = self.frozen_layers.iter().find(|&&l| l >= self.num_layers()) {
            return Err(Error::usage(format!(
                "frozen layer index {l} out of range for {} layers",
                self.num_layers()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `out × in`.
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub layers: Vec<Layer>,
    /// Raw (unnormalized) head weights, `embed_dim × num_heads`.
    pub head: Matrix,
}

pub enum ForwardMode<'a> {
    Eval,
    /// Dropout masks are drawn from the given generator.
    Train(&'a mut Rng),
}

/// Everything the backward pass needs, captured during [`Model::forward`].
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub inputs: Matrix,
    /// Hidden-layer pre-activations.
    pub pre_activations: Vec<Matrix>,
    /// Hidden-layer outputs after ReLU and dropout.
    pub activations: Vec<Matrix>,
    /// Inverted-dropout multipliers per hidden layer (`0` or `1/(1-p)`).
    pub dropout_masks: Vec<Option<Matrix>>,
    pub raw_embeddings: Matrix,
    /// Divisor used to normalize each embedding row (`max(‖z‖, eps)`).
    pub embedding_norms: Vec<f64>,
    /// Unit-norm embeddings, `batch × D`.
    pub embeddings: Matrix,
    /// Column-normalized head, `D × H`.
    pub head_unit: Matrix,
    pub head_norms: Vec<f64>,
    /// Cosine logits, `batch × H`.
    pub logits: Matrix,
}

impl ForwardTrace {
    pub fn batch_size(&self) -> usize {
        self.logits.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
    pub head: Matrix,
}

impl Gradients {
    /// Flat views in the same order as [`Model::param_slices_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len() + 1);
        for l in &self.layers {
            out.push(l.weights.as_slice());
            out.push(l.bias.as_slice());
        }
        out.push(self.head.as_slice());
        out
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

/// A mutable parameter block and whether the optimizer may touch it.
pub struct ParamSlice<'a> {
    pub values: &'a mut [f64],
    pub trainable: bool,
}

fn glorot(rows: usize, cols: usize, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Matrix {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.uniform_range(-a, a)).collect();
    Matrix::from_vec(rows, cols, data).expect("sized by construction")
}

impl Model {
    /// Glorot-uniform weights, zero biases.
    pub fn init(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut dims = vec![config.input_dim];
        dims.extend_from_slice(&config.hidden_dims);
        dims.push(config.embed_dim);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Layer {
                weights: glorot(w[1], w[0], w[0], w[1], rng),
                bias: vec![0.0; w[1]],
                trainable: !config.frozen_layers.contains(&i),
            })
            .collect();
        let head = glorot(
            config.embed_dim,
            config.num_heads(),
            config.embed_dim,
            config.num_heads(),
            rng,
        );
        Ok(Self {
            config,
            layers,
            head,
        })
    }

    pub fn num_heads(&self) -> usize {
        self.head.cols()
    }

    pub fn num_seen_heads(&self) -> usize {
        self.config.num_seen_heads
    }

    pub fn num_parameters(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.as_slice().len() + l.bias.len())
            .sum::<usize>()
            + self.head.as_slice().len()
    }

    pub fn param_slices_mut(&mut self) -> Vec<ParamSlice<'_>> {
        let mut out = Vec::with_capacity(2 * self.layers.len() + 1);
        for l in &mut self.layers {
            let trainable = l.trainable;
            out.push(ParamSlice {
                values: l.weights.as_mut_slice(),
                trainable,
            });
            out.push(ParamSlice {
                values: &mut l.bias,
                trainable,
            });
        }
        out.push(ParamSlice {
            values: self.head.as_mut_slice(),
            trainable: true,
        });
        out
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.is_finite() && l.bias.iter().all(|b| b.is_finite()))
            && self.head.is_finite()
    }

    pub fn forward(&self, x: &Matrix, mode: ForwardMode<'_>) -> Result<ForwardTrace> {
        if x.cols() != self.config.input_dim {
            return Err(Error::usage(format!(
                "input has {} columns, model expects {}",
                x.cols(),
                self.config.input_dim
            )));
        }
        let mut rng = match mode {
            ForwardMode::Train(rng) if self.config.dropout_rate > 0.0 => Some(rng),
            _ => None,
        };
        let keep = 1.0 - self.config.dropout_rate;
        let hidden = self.layers.len() - 1;

        let mut pre_activations = Vec::with_capacity(hidden);
        let mut activations: Vec<Matrix> = Vec::with_capacity(hidden);
        let mut dropout_masks = Vec::with_capacity(hidden);
        for layer in &self.layers[..hidden] {
            let input = activations.last().unwrap_or(x);
            let pre = affine(input, layer)?;
            let mut act = pre.clone();
            for v in act.as_mut_slice() {
                *v = v.max(0.0);
            }
            let mask = rng.as_deref_mut().map(|rng| {
                let data = (0..act.as_slice().len())
                    .map(|_| if rng.uniform() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                Matrix::from_vec(act.rows(), act.cols(), data).expect("sized by construction")
            });
            if let Some(m) = &mask {
                for (a, k) in act.as_mut_slice().iter_mut().zip(m.as_slice()) {
                    *a *= k;
                }
            }
            pre_activations.push(pre);
            activations.push(act);
            dropout_masks.push(mask);
        }
        let last = &self.layers[hidden];
        let raw_embeddings = affine(activations.last().unwrap_or(x), last)?;

        let mut embeddings = raw_embeddings.clone();
        let mut embedding_norms = Vec::with_capacity(x.rows());
        for r in 0..embeddings.rows() {
            let row = embeddings.row_mut(r);
            let d = norm(row).max(DEFAULT_EPS);
            row.iter_mut().for_each(|v| *v /= d);
            embedding_norms.push(d);
        }

        let (head_unit, head_norms) = normalize_columns(&self.head);
        let logits = embeddings.matmul(&head_unit)?;

        Ok(ForwardTrace {
            inputs: x.clone(),
            pre_activations,
            activations,
            dropout_masks,
            raw_embeddings,
            embedding_norms,
            embeddings,
            head_unit,
            head_norms,
            logits,
        })
    }

    /// Exact gradients of a loss with respect to every parameter, given the
    /// loss gradient with respect to the cosine logits.
    pub fn backward(&self, trace: &ForwardTrace, dlogits: &Matrix) -> Result<Gradients> {
        if dlogits.shape() != trace.logits.shape() {
            return Err(Error::usage(format!(
                "upstream gradient is {:?}, logits are {:?}",
                dlogits.shape(),
                trace.logits.shape()
            )));
        }
        // logits = Z · Ŵ
        let d_unit_z = dlogits.matmul_transposed(&trace.head_unit)?;
        let d_unit_w = trace.embeddings.transposed_matmul(dlogits)?;

        let mut head = Matrix::zeros(self.head.rows(), self.head.cols());
        for j in 0..self.head.cols() {
            let u = trace.head_unit.column(j);
            let g = d_unit_w.column(j);
            let back = normalize_backward(&u, &g, trace.head_norms[j]);
            for (i, v) in back.into_iter().enumerate() {
                head.set(i, j, v);
            }
        }

        let mut delta = Matrix::zeros(d_unit_z.rows(), d_unit_z.cols());
        for r in 0..delta.rows() {
            let back = normalize_backward(
                trace.embeddings.row(r),
                d_unit_z.row(r),
                trace.embedding_norms[r],
            );
            delta.row_mut(r).copy_from_slice(&back);
        }

        let mut layers = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let input = if l == 0 {
                &trace.inputs
            } else {
                &trace.activations[l - 1]
            };
            let weights = delta.transposed_matmul(input)?;
            let mut bias = vec![0.0; layer.bias.len()];
            for row in delta.row_iter() {
                for (b, d) in bias.iter_mut().zip(row) {
                    *b += d;
                }
            }
            layers.push(LayerGrad { weights, bias });
            if l > 0 {
                let mut next = delta.matmul(&layer.weights)?;
                if let Some(mask) = &trace.dropout_masks[l - 1] {
                    for (v, k) in next.as_mut_slice().iter_mut().zip(mask.as_slice()) {
                        *v *= k;
                    }
                }
                let pre = &trace.pre_activations[l - 1];
                for (v, &p) in next.as_mut_slice().iter_mut().zip(pre.as_slice()) {
                    if p <= 0.0 {
                        *v = 0.0;
                    }
                }
                delta = next;
            }
        }
        layers.reverse();
        Ok(Gradients { layers, head })
    }

    /// Eval-mode head predictions for every row of `x`.
    pub fn predict(&self, x: &Matrix) -> Result<Vec<usize>> {
        Ok(predict_heads(&self.forward(x, ForwardMode::Eval)?))
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.checkpoint_bytes()?)?;
        Ok(())
    }

    pub fn checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let ck = CheckpointRef {
            format: CHECKPOINT_FORMAT,
            version: CHECKPOINT_VERSION,
            model: self,
        };
        let mut bytes = serde_json::to_vec_pretty(&ck)?;
        bytes.push(b'\n');
        Ok(bytes)
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint_bytes(&fs::read(path)?)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_slice(bytes)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Format(format!("unknown checkpoint format {:?}", ck.format)));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        let m = ck.model;
        m.config
            .validate()
            .map_err(|e| Error::Format(format!("invalid checkpoint config: {e}")))?;
        let expected = m.config.num_layers();
        let shapes_ok = m.layers.len() == expected
            && m.head.shape() == (m.config.embed_dim, m.config.num_heads())
            && m.layers.iter().all(|l| l.bias.len() == l.weights.rows());
        if !shapes_ok {
            return Err(Error::Format("checkpoint parameter shapes do not match config".into()));
        }
        Ok(m)
    }
}

const CHECKPOINT_FORMAT: &str = "orca-model";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize)]
struct CheckpointRef<'a> {
    format: &'a str,
    version: u32,
    model: &'a Model,
}

#[derive(Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    model: Model,
}

fn affine(input: &Matrix, layer: &Layer) -> Result<Matrix> {
    let mut out = input.matmul_transposed(&layer.weights)?;
    for r in 0..out.rows() {
        for (v, b) in out.row_mut(r).iter_mut().zip(&layer.bias) {
            *v += b;
        }
    }
    Ok(out)
}

fn normalize_columns(w: &Matrix) -> (Matrix, Vec<f64>) {
    let mut unit = w.clone();
    let mut norms = Vec::with_capacity(w.cols());
    for j in 0..w.cols() {
        let d = norm(&w.column(j)).max(DEFAULT_EPS);
        for i in 0..w.rows() {
            unit.set(i, j, w.get(i, j) / d);
        }
        norms.push(d);
    }
    (unit, norms)
}

/// Backprop through `u = v / max(‖v‖, eps)`.
///
/// For `‖v‖ > eps` the Jacobian is `(I - u uᵀ) / ‖v‖`; in the degenerate branch
/// the map is linear (`v / eps`) and the gradient is `g / eps`.
fn normalize_backward(unit: &[f64], upstream: &[f64], divisor: f64) -> Vec<f64> {
    if divisor <= DEFAULT_EPS {
        return upstream.iter().map(|g| g / DEFAULT_EPS).collect();
    }
    let proj = dot(unit, upstream);
    unit.iter()
        .zip(upstream)
        .map(|(u, g)| (g - u * proj) / divisor)
        .collect()
}

/// Argmax head per row, ties to the lowest index.
pub fn predict_heads(trace: &ForwardTrace) -> Vec<usize> {
    trace.logits.row_iter().map(argmax).collect()
}

/// True when `head` is one of the novel-class heads.
pub fn is_novel_head(head: usize, num_seen_heads: usize) -> bool {
    head >= num_seen_heads
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> ModelConfig {
        ModelConfig {
            input_dim: 5,
            hidden_dims: vec![7],
            embed_dim: 4,
            num_seen_heads: 2,
            extra_head_capacity: 2,
            dropout_rate: 0.0,
            frozen_layers: vec![],
        }
    }

    fn random_input(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = Rng::new(seed);
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_validated() {
        let a = Model::init(small_config(), &mut Rng::new(1)).unwrap();
        let b = Model::init(small_config(), &mut Rng::new(1)).unwrap();
        assert_eq!(a, b);
        assert!(a.layers.iter().all(|l| l.bias.iter().all(|&v| v == 0.0)));
        let bound = (6.0f64 / 12.0).sqrt();
        assert!(a.layers[0].weights.as_slice().iter().all(|v| v.abs() <= bound));

        let flat = ModelConfig { hidden_dims: vec![], ..small_config() };
        let m = Model::init(flat, &mut Rng::new(1)).unwrap();
        assert_eq!(m.layers.len(), 1);
        assert_eq!(m.layers[0].weights.shape(), (4, 5));

        let bad = ModelConfig { num_seen_heads: 1, extra_head_capacity: 0, ..small_config() };
        assert!(matches!(Model::init(bad, &mut Rng::new(1)), Err(Error::Usage(_))));
    }

    #[test]
    fn forward_contracts() {
        let m = Model::init(small_config(), &mut Rng::new(2)).unwrap();
        let x = random_input(8, 5, 3);
        let t = m.forward(&x, ForwardMode::Eval).unwrap();
        for r in 0..8 {
            assert!((norm(t.embeddings.row(r)) - 1.0).abs() < 1e-9);
        }
        assert!(t.logits.as_slice().iter().all(|v| v.abs() <= 1.0 + 1e-9));
        let mut rng = Rng::new(4);
        let tt = m.forward(&x, ForwardMode::Train(&mut rng)).unwrap();
        assert_eq!(t, tt);
        assert!(m.forward(&random_input(2, 3, 0), ForwardMode::Eval).is_err());
    }

    #[test]
    fn eval_forward_is_pure() {
        let cfg = ModelConfig { dropout_rate: 0.5, ..small_config() };
        let m = Model::init(cfg, &mut Rng::new(2)).unwrap();
        let x = random_input(6, 5, 3);
        let a = m.forward(&x, ForwardMode::Eval).unwrap();
        let b = m.forward(&x, ForwardMode::Eval).unwrap();
        assert_eq!(a, b);
        let mut rng = Rng::new(0);
        let t = m.forward(&x, ForwardMode::Train(&mut rng)).unwrap();
        assert!(t.dropout_masks[0].is_some());
    }

    #[test]
    fn predict_heads_examples() {
        let mut t = Model::init(small_config(), &mut Rng::new(0))
            .unwrap()
            .forward(&random_input(1, 5, 0), ForwardMode::Eval)
            .unwrap();
        t.logits = Matrix::from_rows(&[vec![0.9, 0.1, 0.3], vec![0.5, 0.5, 0.1]]).unwrap();
        assert_eq!(predict_heads(&t), vec![0, 0]);
        t.logits = Matrix::from_rows(&[vec![0.1, 0.2, 0.3, 0.9]]).unwrap();
        let p = predict_heads(&t);
        assert_eq!(p, vec![3]);
        assert!(is_novel_head(p[0], 2));
        // invariant under positive rescaling
        let mut scaled = t.clone();
        scaled.logits.as_mut_slice().iter_mut().for_each(|v| *v *= 7.5);
        assert_eq!(predict_heads(&scaled), p);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let m = Model::init(small_config(), &mut Rng::new(5)).unwrap();
        let t = m.forward(&random_input(8, 5, 6), ForwardMode::Eval).unwrap();
        let g = m.backward(&t, &Matrix::zeros(8, 4)).unwrap();
        assert!(g.slices().iter().all(|s| s.iter().all(|&v| v == 0.0)));
        assert!(m.backward(&t, &Matrix::zeros(8, 3)).is_err());
    }

    #[test]
    fn all_ones_mask_matches_no_dropout() {
        let m = Model::init(small_config(), &mut Rng::new(5)).unwrap();
        let x = random_input(8, 5, 6);
        let t = m.forward(&x, ForwardMode::Eval).unwrap();
        let mut masked = t.clone();
        masked.dropout_masks[0] = Some(Matrix::from_vec(8, 7, vec![1.0; 56]).unwrap());
        let up = random_input(8, 4, 7);
        assert_eq!(m.backward(&t, &up).unwrap(), m.backward(&masked, &up).unwrap());
    }

    fn weighted_logit_sum(m: &Model, x: &Matrix, weights: &Matrix, seed: u64) -> f64 {
        let mut rng = Rng::new(seed);
        let t = m.forward(x, ForwardMode::Train(&mut rng)).unwrap();
        dot(t.logits.as_slice(), weights.as_slice())
    }

    #[test]
    fn backward_matches_finite_differences() {
        // A fixed linear functional of the logits isolates the model Jacobian.
        for dropout in [0.0, 0.3] {
            let cfg = ModelConfig { dropout_rate: dropout, ..small_config() };
            let mut m = Model::init(cfg, &mut Rng::new(11)).unwrap();
            let x = random_input(8, 5, 12);
            let w = random_input(8, 4, 13);
            let seed = 99;
            let mut rng = Rng::new(seed);
            let trace = m.forward(&x, ForwardMode::Train(&mut rng)).unwrap();
            let grads = m.backward(&trace, &w).unwrap();
            let analytic: Vec<f64> = grads.slices().concat();

            let h = 1e-5;
            let mut idx = 0;
            let mut max_err: f64 = 0.0;
            let n_slices = m.param_slices_mut().len();
            for s in 0..n_slices {
                let len = m.param_slices_mut()[s].values.len();
                for k in 0..len {
                    let orig = m.param_slices_mut()[s].values[k];
                    m.param_slices_mut()[s].values[k] = orig + h;
                    let up = weighted_logit_sum(&m, &x, &w, seed);
                    m.param_slices_mut()[s].values[k] = orig - h;
                    let down = weighted_logit_sum(&m, &x, &w, seed);
                    m.param_slices_mut()[s].values[k] = orig;
                    let numeric = (up - down) / (2.0 * h);
                    let a = analytic[idx];
                    let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
                    max_err = max_err.max(err);
                    idx += 1;
                }
            }
            assert!(max_err < 1e-4, "dropout {dropout}: max relative error {max_err}");
        }
    }

    #[test]
    fn head_column_scale_invariance() {
        let m = Model::init(small_config(), &mut Rng::new(21)).unwrap();
        let x = random_input(8, 5, 22);
        let base = m.forward(&x, ForwardMode::Eval).unwrap();
        let mut scaled = m.clone();
        for i in 0..scaled.head.rows() {
            let v = scaled.head.get(i, 2);
            scaled.head.set(i, 2, v * 13.0);
        }
        let t = scaled.forward(&x, ForwardMode::Eval).unwrap();
        for (a, b) in base.logits.as_slice().iter().zip(t.logits.as_slice()) {
            assert!((a - b).abs() < 1e-9);
        }
        assert_eq!(predict_heads(&base), predict_heads(&t));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let cfg = ModelConfig { frozen_layers: vec![0], dropout_rate: 0.1, ..small_config() };
        let m = Model::init(cfg, &mut Rng::new(8)).unwrap();
        assert!(!m.layers[0].trainable);
        let bytes = m.checkpoint_bytes().unwrap();
        let back = Model::from_checkpoint_bytes(&bytes).unwrap();
        assert_eq!(m, back);
        for (a, b) in m.head.as_slice().iter().zip(back.head.as_slice()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(back.checkpoint_bytes().unwrap(), bytes);
        let tampered = String::from_utf8(bytes).unwrap().replace("\"version\": 1", "\"version\": 7");
        assert!(matches!(Model::from_checkpoint_bytes(tampered.as_bytes()), Err(Error::Format(_))));
    }
}
