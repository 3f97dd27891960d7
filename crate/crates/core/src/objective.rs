//! Loss terms and their logit-space gradients.
//!
//! The total objective is `L_S + η₁·L_P + η₂·R`:
//!
//! - `L_S`: cross-entropy on labeled rows over `s`-scaled cosine logits, with a
//!   margin *added* to the target logit. In adaptive mode the margin is `λ·ū`,
//!   where `ū` is the mean uncertainty on the unlabeled set, so it shrinks to
//!   zero as predictions become confident.
//! - `L_P`: `-ln⟨p_i, p_j⟩` between each row and its positive partner (a
//!   same-class labeled row, or the most cosine-similar row in the batch).
//! - `R`: `KL(mean batch prediction ‖ prior)`.
//!
//! By default `L_P` and `R` consume softmax probabilities of the `s`-scaled
//! logits, the same distribution used for prediction confidence and `ū`.
//! Setting `scale_pair_probs = false` feeds them the unscaled cosine logits.
//! `L_S` carries its own weight so the supervised term can be ablated.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ForwardMode, ForwardTrace, Model};
use crate::numerics::{
    argmax, cosine_similarity_matrix, dot, kl_divergence, softmax_rows, Matrix, DEFAULT_EPS,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginMode {
    /// Margin `λ·ū`.
    Adaptive,
    /// Constant margin.
    Fixed(f64),
    /// Plain cross-entropy.
    Zero,
}

pub const DEFAULT_FIXED_MARGIN: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prior {
    /// Maximum-entropy prior, `1/H` per head.
    Uniform,
    Explicit(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub margin_mode: MarginMode,
    /// Weight on `L_S`; 1 in the full method, 0 for the unsupervised ablation.
    pub supervised_weight: f64,
    pub lambda: f64,
    pub s: f64,
    pub eta1: f64,
    pub eta2: f64,
    pub prior: Prior,
    pub pair_eps: f64,
    /// Apply the temperature `s` to the probabilities used by `L_P` and `R`.
    pub scale_pair_probs: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            margin_mode: MarginMode::Adaptive,
            supervised_weight: 1.0,
            lambda: 1.0,
            s: 10.0,
            eta1: 1.0,
            eta2: 1.0,
            prior: Prior::Uniform,
            pair_eps: DEFAULT_EPS,
            scale_pair_probs: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("supervised_weight", self.supervised_weight),
            ("lambda", self.lambda),
            ("eta1", self.eta1),
            ("eta2", self.eta2),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::usage(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        if !(self.s > 0.0) || !self.s.is_finite() {
            return Err(Error::usage(format!("s must be > 0, got {}", self.s)));
        }
        if !(self.pair_eps > 0.0) {
            return Err(Error::usage(format!("pair_eps must be > 0, got {}", self.pair_eps)));
        }
        if let MarginMode::Fixed(m) = self.margin_mode {
            if !m.is_finite() {
                return Err(Error::usage("fixed margin must be finite"));
            }
        }
        if let Prior::Explicit(p) = &self.prior {
            let sum: f64 = p.iter().sum();
            if p.iter().any(|&v| !(v >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
                return Err(Error::usage("prior must be a probability vector summing to 1"));
            }
        }
        Ok(())
    }

    /// Margin added to the target logit for the current uncertainty.
    pub fn margin(&self, u_bar: f64) -> f64 {
        match self.margin_mode {
            MarginMode::Adaptive => self.lambda * u_bar,
            MarginMode::Fixed(m) => m,
            MarginMode::Zero => 0.0,
        }
    }

    pub fn prior_vector(&self, num_heads: usize) -> Result<Vec<f64>> {
        match &self.prior {
            Prior::Uniform => Ok(vec![1.0 / num_heads as f64; num_heads]),
            Prior::Explicit(p) if p.len() == num_heads => Ok(p.clone()),
            Prior::Explicit(p) => Err(Error::usage(format!(
                "prior has {} entries but the model has {num_heads} heads",
                p.len()
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyEstimate {
    pub u_bar: f64,
    pub per_instance_max_prob: Vec<f64>,
}

/// Mean of `1 - max_k p_k` over the rows of a probability matrix.
pub fn uncertainty_from_probs(probs: &Matrix) -> Result<f64> {
    if probs.rows() == 0 {
        return Err(Error::usage("uncertainty of an empty set"));
    }
    let total: f64 = probs
        .row_iter()
        .map(|r| 1.0 - r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .sum();
    Ok(total / probs.rows() as f64)
}

/// Uncertainty over the whole unlabeled set, using eval-mode `s`-scaled softmax.
pub fn estimate_uncertainty(
    model: &Model,
    unlabeled: &Matrix,
    batch_size: usize,
    cfg: &LossConfig,
) -> Result<UncertaintyEstimate> {
    if unlabeled.rows() == 0 {
        return Err(Error::usage("uncertainty estimation needs at least one unlabeled row"));
    }
    let batch_size = batch_size.max(1);
    let mut max_probs = Vec::with_capacity(unlabeled.rows());
    let mut start = 0;
    while start < unlabeled.rows() {
        let end = (start + batch_size).min(unlabeled.rows());
        let idx: Vec<usize> = (start..end).collect();
        let trace = model.forward(&unlabeled.select_rows(&idx), ForwardMode::Eval)?;
        let probs = softmax_rows(&trace.logits, cfg.s);
        max_probs.extend(
            probs
                .row_iter()
                .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max)),
        );
        start = end;
    }
    let u_bar = max_probs.iter().map(|p| 1.0 - p).sum::<f64>() / max_probs.len() as f64;
    Ok(UncertaintyEstimate {
        u_bar,
        per_instance_max_prob: max_probs,
    })
}

/// A loss value and its gradient with respect to the term's input matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Matrix,
}

/// Margin cross-entropy over labeled rows (`targets[i] = Some(head)`).
///
/// Loss is the mean over labeled rows of
/// `-ln softmax(s·(logits + margin·onehot(target)))[target]`. Rows without a
/// target contribute nothing; with no labeled rows the loss is zero.
pub fn supervised_margin_ce(
    logits: &Matrix,
    targets: &[Option<usize>],
    margin: f64,
    s: f64,
    num_seen_heads: usize,
) -> Result<LossGrad> {
    if targets.len() != logits.rows() {
        return Err(Error::usage(format!(
            "{} targets for {} logit rows",
            targets.len(),
            logits.rows()
        )));
    }
    if let Some(t) = targets.iter().flatten().find(|&&t| t >= num_seen_heads) {
        return Err(Error::usage(format!(
            "target head {t} is not a seen head (num_seen_heads = {num_seen_heads})"
        )));
    }
    let h = logits.cols();
    let n = targets.iter().flatten().count();
    let mut grad = Matrix::zeros(logits.rows(), h);
    if n == 0 {
        return Ok(LossGrad { loss: 0.0, grad });
    }
    let mut loss = 0.0;
    let mut z = vec![0.0; h];
    for (r, target) in targets.iter().enumerate() {
        let Some(t) = *target else { continue };
        for (zj, &l) in z.iter_mut().zip(logits.row(r)) {
            *zj = s * l;
        }
        z[t] += s * margin;
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = z.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum_exp.ln();
        loss += log_z - z[t];
        let g = grad.row_mut(r);
        for (j, gj) in g.iter_mut().enumerate() {
            let p = (z[j] - log_z).exp();
            *gj = s * (p - if j == t { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    Ok(LossGrad {
        loss: loss / n as f64,
        grad,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairSource {
    GroundTruth,
    Pseudo,
}

/// One positive partner per batch row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairBatch {
    pub partners: Vec<usize>,
    pub sources: Vec<PairSource>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.partners.len()
    }

    pub fn is_empty(&self) -> bool {
        self.partners.is_empty()
    }

    /// `(correct, total)` over pseudo pairs, judged by ground-truth labels.
    pub fn pseudo_label_hits(&self, labels: &[usize]) -> (usize, usize) {
        let mut correct = 0;
        let mut total = 0;
        for (i, (&j, &src)) in self.partners.iter().zip(&self.sources).enumerate() {
            if src == PairSource::Pseudo {
                total += 1;
                if labels[i] == labels[j] {
                    correct += 1;
                }
            }
        }
        (correct, total)
    }

    /// Fraction of pseudo pairs whose rows share a ground-truth label.
    pub fn pseudo_label_accuracy(&self, labels: &[usize]) -> Option<f64> {
        let (c, t) = self.pseudo_label_hits(labels);
        (t > 0).then(|| c as f64 / t as f64)
    }
}

/// Pairs every row with its most similar other row.
///
/// Labeled rows look only at other labeled rows with the same target and fall
/// back to the global nearest neighbour (tagged pseudo) when none exists.
/// Ties go to the lowest index.
pub fn build_pairs(embeddings: &Matrix, targets: &[Option<usize>]) -> Result<PairBatch> {
    let b = embeddings.rows();
    if b < 2 {
        return Err(Error::usage(format!("pairing needs a batch of at least 2 rows, got {b}")));
    }
    if targets.len() != b {
        return Err(Error::usage(format!("{} targets for {b} rows", targets.len())));
    }
    let sim = cosine_similarity_matrix(embeddings, embeddings)?;
    let nearest = |i: usize, accept: &dyn Fn(usize) -> bool| -> Option<usize> {
        let mut best: Option<usize> = None;
        for j in (0..b).filter(|&j| j != i && accept(j)) {
            if best.is_none_or(|k| sim.get(i, j) > sim.get(i, k)) {
                best = Some(j);
            }
        }
        best
    };
    let mut partners = Vec::with_capacity(b);
    let mut sources = Vec::with_capacity(b);
    for i in 0..b {
        let same_class = targets[i].and_then(|t| nearest(i, &|j| targets[j] == Some(t)));
        match same_class {
            Some(j) => {
                partners.push(j);
                sources.push(PairSource::GroundTruth);
            }
            None => {
                partners.push(nearest(i, &|_| true).expect("batch has another row"));
                sources.push(PairSource::Pseudo);
            }
        }
    }
    Ok(PairBatch { partners, sources })
}

/// Mean over rows of `-ln max(⟨p_i, p_partner(i)⟩, eps)`, gradient w.r.t. `probs`.
pub fn pairwise_positive_loss(probs: &Matrix, pairs: &PairBatch, eps: f64) -> Result<LossGrad> {
    let b = probs.rows();
    if pairs.len() != b {
        return Err(Error::usage(format!("{} pairs for {b} rows", pairs.len())));
    }
    if let Some(&j) = pairs.partners.iter().find(|&&j| j >= b) {
        return Err(Error::usage(format!("pair partner {j} out of range for {b} rows")));
    }
    let mut grad = Matrix::zeros(b, probs.cols());
    let mut loss = 0.0;
    for (i, &j) in pairs.partners.iter().enumerate() {
        let ip = dot(probs.row(i), probs.row(j));
        if ip > eps {
            loss -= ip.ln();
            let scale = 1.0 / (ip * b as f64);
            for k in 0..probs.cols() {
                let gi = grad.get(i, k) - probs.get(j, k) * scale;
                grad.set(i, k, gi);
                let gj = grad.get(j, k) - probs.get(i, k) * scale;
                grad.set(j, k, gj);
            }
        } else {
            // clamped: constant in the probabilities
            loss -= eps.ln();
        }
    }
    Ok(LossGrad {
        loss: loss / b as f64,
        grad,
    })
}

/// `KL(mean row of probs ‖ prior)`, gradient w.r.t. `probs`.
pub fn prior_regularizer(probs: &Matrix, prior: &[f64], eps: f64) -> Result<LossGrad> {
    let (b, h) = probs.shape();
    if b == 0 {
        return Err(Error::usage("regularizer needs at least one row"));
    }
    if prior.len() != h {
        return Err(Error::usage(format!(
            "prior has {} entries but predictions have {h} heads",
            prior.len()
        )));
    }
    let mut mean = vec![0.0; h];
    for row in probs.row_iter() {
        for (m, p) in mean.iter_mut().zip(row) {
            *m += p;
        }
    }
    mean.iter_mut().for_each(|m| *m /= b as f64);
    let loss = kl_divergence(&mean, prior, eps)?;
    let dmean: Vec<f64> = mean
        .iter()
        .zip(prior)
        .map(|(&m, &q)| {
            if m > eps {
                ((m / q.max(eps)).ln() + 1.0) / b as f64
            } else {
                0.0
            }
        })
        .collect();
    let mut grad = Matrix::zeros(b, h);
    for r in 0..b {
        grad.row_mut(r).copy_from_slice(&dmean);
    }
    Ok(LossGrad { loss, grad })
}

/// Pulls a gradient w.r.t. row-wise softmax probabilities back to the logits.
pub fn softmax_backward(probs: &Matrix, dprobs: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(probs.rows(), probs.cols());
    for r in 0..probs.rows() {
        let p = probs.row(r);
        let g = dprobs.row(r);
        let pg = dot(p, g);
        for (o, (pk, gk)) in out.row_mut(r).iter_mut().zip(p.iter().zip(g)) {
            *o = pk * (gk - pg);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct CombinedLoss {
    pub total: f64,
    pub supervised: f64,
    pub pairwise: f64,
    pub regularizer: f64,
    /// Gradient of `total` w.r.t. the cosine logits.
    pub grad: Matrix,
    pub pairs: PairBatch,
    pub labeled_rows: usize,
}

/// Full objective on one batch.
///
/// `targets[i]` is the seen head of labeled row `i`, `None` for unlabeled rows.
pub fn combined_loss(
    trace: &ForwardTrace,
    targets: &[Option<usize>],
    num_seen_heads: usize,
    u_bar: f64,
    cfg: &LossConfig,
) -> Result<CombinedLoss> {
    let pairs = build_pairs(&trace.embeddings, targets)?;
    combined_loss_with_pairs(&trace.logits, targets, pairs, num_seen_heads, u_bar, cfg)
}

/// [`combined_loss`] with positive pairs supplied by the caller.
pub fn combined_loss_with_pairs(
    logits: &Matrix,
    targets: &[Option<usize>],
    pairs: PairBatch,
    num_seen_heads: usize,
    u_bar: f64,
    cfg: &LossConfig,
) -> Result<CombinedLoss> {
    let b = logits.rows();
    if b < 2 {
        return Err(Error::usage(format!("combined loss needs at least 2 rows, got {b}")));
    }
    let labeled_rows = targets.iter().flatten().count();
    let sup = supervised_margin_ce(logits, targets, cfg.margin(u_bar), cfg.s, num_seen_heads)?;
    if labeled_rows == 0 {
        log::debug!("batch of {b} rows has no labeled rows; supervised term skipped");
    }

    let prob_scale = if cfg.scale_pair_probs { cfg.s } else { 1.0 };
    let probs = softmax_rows(logits, prob_scale);
    let pair = pairwise_positive_loss(&probs, &pairs, cfg.pair_eps)?;
    let prior = cfg.prior_vector(logits.cols())?;
    let reg = prior_regularizer(&probs, &prior, DEFAULT_EPS)?;

    let mut dprobs = pair.grad;
    for (d, r) in dprobs.as_mut_slice().iter_mut().zip(reg.grad.as_slice()) {
        *d = cfg.eta1 * *d + cfg.eta2 * r;
    }
    let mut grad = softmax_backward(&probs, &dprobs);
    if prob_scale != 1.0 {
        grad.as_mut_slice().iter_mut().for_each(|g| *g *= prob_scale);
    }
    for (g, s) in grad.as_mut_slice().iter_mut().zip(sup.grad.as_slice()) {
        *g += cfg.supervised_weight * s;
    }

    Ok(CombinedLoss {
        total: cfg.supervised_weight * sup.loss + cfg.eta1 * pair.loss + cfg.eta2 * reg.loss,
        supervised: sup.loss,
        pairwise: pair.loss,
        regularizer: reg.loss,
        grad,
        pairs,
        labeled_rows,
    })
}

/// Predicted head per row of a probability or logit matrix.
pub fn row_argmax(m: &Matrix) -> Vec<usize> {
    m.row_iter().map(argmax).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn uncertainty_examples() {
        let onehot = m(&[&[1.0, 0.0, 0.0], &[0.0, 0.0, 1.0]]);
        assert_eq!(uncertainty_from_probs(&onehot).unwrap(), 0.0);
        let uniform = Matrix::from_vec(3, 10, vec![0.1; 30]).unwrap();
        assert!((uncertainty_from_probs(&uniform).unwrap() - 0.9).abs() < 1e-12);
        let two = m(&[&[0.8, 0.2], &[0.4, 0.6]]);
        assert!((uncertainty_from_probs(&two).unwrap() - 0.3).abs() < 1e-12);
        assert!(uncertainty_from_probs(&Matrix::zeros(0, 2)).is_err());
    }

    #[test]
    fn supervised_examples() {
        let l = supervised_margin_ce(&m(&[&[0.0, 0.0]]), &[Some(0)], 0.0, 1.0, 2).unwrap();
        assert!((l.loss - 2f64.ln()).abs() < 1e-12);
        let l = supervised_margin_ce(&m(&[&[1.0, -1.0]]), &[Some(0)], 0.0, 1.0, 2).unwrap();
        assert!((l.loss - (1.0 + (-2f64).exp()).ln()).abs() < 1e-12);
        assert!((l.loss - 0.1269).abs() < 1e-4);
        let l = supervised_margin_ce(&m(&[&[0.5, 0.5]]), &[Some(0)], 0.3, 1.0, 2).unwrap();
        assert!((l.loss - (1.0 + (-0.3f64).exp()).ln()).abs() < 1e-9);
        assert!((l.loss - 0.5544).abs() < 1e-4);
        assert!(supervised_margin_ce(&m(&[&[0.5, 0.5, 0.1]]), &[Some(2)], 0.0, 1.0, 2).is_err());
        let none = supervised_margin_ce(&m(&[&[0.5, 0.5]]), &[None], 0.3, 10.0, 2).unwrap();
        assert_eq!(none.loss, 0.0);
    }

    #[test]
    fn pairing_examples() {
        let deg = |a: f64| [a.to_radians().cos(), a.to_radians().sin()];
        let z = m(&[&deg(0.0), &deg(10.0), &deg(90.0)]);
        let p = build_pairs(&z, &[None, None, None]).unwrap();
        assert_eq!(p.partners, vec![1, 0, 1]);
        assert!(p.sources.iter().all(|&s| s == PairSource::Pseudo));

        let z = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let p = build_pairs(&z, &[Some(1), Some(1)]).unwrap();
        assert_eq!(p.partners, vec![1, 0]);
        assert_eq!(p.sources, vec![PairSource::GroundTruth; 2]);

        let p = build_pairs(&z, &[Some(0), Some(1)]).unwrap();
        assert_eq!(p.partners, vec![1, 0]);
        assert_eq!(p.sources, vec![PairSource::Pseudo; 2]);

        assert!(build_pairs(&m(&[&[1.0, 0.0]]), &[None]).is_err());
    }

    #[test]
    fn labeled_rows_prefer_same_class_over_nearer_rows() {
        let deg = |a: f64| [a.to_radians().cos(), a.to_radians().sin()];
        let z = m(&[&deg(0.0), &deg(5.0), &deg(60.0), &deg(70.0)]);
        let targets = [Some(0), None, Some(0), Some(1)];
        let p = build_pairs(&z, &targets).unwrap();
        assert_eq!(p.partners, vec![2, 0, 0, 2]);
        assert_eq!(
            p.sources,
            vec![PairSource::GroundTruth, PairSource::Pseudo, PairSource::GroundTruth, PairSource::Pseudo]
        );
        let labels = [0, 0, 0, 1];
        assert_eq!(p.pseudo_label_hits(&labels), (1, 2));
        assert_eq!(p.pseudo_label_accuracy(&labels), Some(0.5));
    }

    #[test]
    fn pairwise_examples() {
        let same = PairBatch { partners: vec![1, 0], sources: vec![PairSource::Pseudo; 2] };
        let onehot = m(&[&[0.0, 1.0], &[0.0, 1.0]]);
        assert_eq!(pairwise_positive_loss(&onehot, &same, 1e-12).unwrap().loss, 0.0);
        let ortho = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let l = pairwise_positive_loss(&ortho, &same, 1e-12).unwrap().loss;
        assert!((l - (-(1e-12f64).ln())).abs() < 1e-9);
        assert!((l - 27.63).abs() < 1e-2);
        let h = 5;
        let uniform = Matrix::from_vec(2, h, vec![1.0 / h as f64; 2 * h]).unwrap();
        let l = pairwise_positive_loss(&uniform, &same, 1e-12).unwrap().loss;
        assert!((l - (h as f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn regularizer_examples() {
        let balanced = m(&[&[0.9, 0.1], &[0.1, 0.9]]);
        let r = prior_regularizer(&balanced, &[0.5, 0.5], 1e-12).unwrap();
        assert!(r.loss.abs() < 1e-12);
        let collapsed = m(&[&[1.0, 0.0], &[1.0, 0.0]]);
        let r = prior_regularizer(&collapsed, &[0.5, 0.5], 1e-12).unwrap();
        assert!((r.loss - 2f64.ln()).abs() < 1e-12);
        let single = m(&[&[0.2, 0.3, 0.5]]);
        let r = prior_regularizer(&single, &[0.2, 0.3, 0.5], 1e-12).unwrap();
        assert!(r.loss.abs() < 1e-12);
        assert!(prior_regularizer(&single, &[0.5, 0.5], 1e-12).is_err());
        let cfg = LossConfig { prior: Prior::Explicit(vec![0.5, 0.5]), ..LossConfig::default() };
        assert!(cfg.prior_vector(3).is_err());
    }

    fn random_logits(b: usize, h: usize, seed: u64) -> Matrix {
        let mut rng = Rng::new(seed);
        Matrix::from_vec(b, h, (0..b * h).map(|_| rng.uniform_range(-1.0, 1.0)).collect()).unwrap()
    }

    #[test]
    fn combined_degenerate_weights_and_reduction() {
        let logits = random_logits(6, 4, 1);
        let targets = [Some(0), None, Some(1), None, Some(0), None];
        let pairs = PairBatch {
            partners: vec![4, 2, 0, 5, 0, 1],
            sources: vec![PairSource::Pseudo; 6],
        };
        let cfg = LossConfig { eta1: 0.0, eta2: 0.0, ..LossConfig::default() };
        let c = combined_loss_with_pairs(&logits, &targets, pairs.clone(), 2, 0.4, &cfg).unwrap();
        assert_eq!(c.total, c.supervised);

        let adaptive = LossConfig { lambda: 0.0, ..LossConfig::default() };
        let zero = LossConfig { margin_mode: MarginMode::Zero, ..LossConfig::default() };
        let a = combined_loss_with_pairs(&logits, &targets, pairs.clone(), 2, 0.7, &adaptive).unwrap();
        let z = combined_loss_with_pairs(&logits, &targets, pairs.clone(), 2, 0.7, &zero).unwrap();
        assert!((a.total - z.total).abs() < 1e-9);
        let a0 = combined_loss_with_pairs(&logits, &targets, pairs, 2, 0.0, &LossConfig::default()).unwrap();
        assert_eq!(a0.total.to_bits(), z.total.to_bits());
    }

    #[test]
    fn combined_logit_gradient_matches_finite_differences() {
        let targets = [Some(0), None, Some(1), None, Some(0), None, None, Some(1)];
        let pairs = PairBatch {
            partners: vec![4, 2, 7, 5, 0, 1, 3, 2],
            sources: vec![PairSource::Pseudo; 8],
        };
        for (scaled, sup_w) in [(true, 1.0), (false, 1.0), (true, 0.0), (false, 0.5)] {
            let cfg = LossConfig {
                scale_pair_probs: scaled,
                supervised_weight: sup_w,
                ..LossConfig::default()
            };
            let mut logits = random_logits(8, 4, 5);
            let base = combined_loss_with_pairs(&logits, &targets, pairs.clone(), 2, 0.35, &cfg).unwrap();
            let h = 1e-5;
            for k in 0..logits.as_slice().len() {
                let orig = logits.as_slice()[k];
                logits.as_mut_slice()[k] = orig + h;
                let up = combined_loss_with_pairs(&logits, &targets, pairs.clone(), 2, 0.35, &cfg).unwrap().total;
                logits.as_mut_slice()[k] = orig - h;
                let down = combined_loss_with_pairs(&logits, &targets, pairs.clone(), 2, 0.35, &cfg).unwrap().total;
                logits.as_mut_slice()[k] = orig;
                let numeric = (up - down) / (2.0 * h);
                let analytic = base.grad.as_slice()[k];
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3);
                assert!(rel < 1e-5, "scaled={scaled} entry {k}: analytic {analytic}, numeric {numeric}");
            }
        }
    }

    #[test]
    fn zero_supervised_weight_drops_the_term() {
        let logits = random_logits(6, 4, 2);
        let targets = [Some(0), None, Some(1), None, Some(0), None];
        let pairs = PairBatch {
            partners: vec![4, 2, 0, 5, 0, 1],
            sources: vec![PairSource::Pseudo; 6],
        };
        let cfg = LossConfig { supervised_weight: 0.0, ..LossConfig::default() };
        let c = combined_loss_with_pairs(&logits, &targets, pairs, 2, 0.3, &cfg).unwrap();
        assert!(c.supervised > 0.0);
        assert!((c.total - c.pairwise - c.regularizer).abs() < 1e-12);
    }

    #[test]
    fn supervised_gradient_sums_to_zero_per_row() {
        let logits = random_logits(4, 5, 9);
        let g = supervised_margin_ce(&logits, &[Some(1), Some(0), None, Some(2)], 0.2, 10.0, 3).unwrap();
        for r in 0..4 {
            assert!(g.grad.row(r).iter().sum::<f64>().abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn margin_never_increases_loss(seed in 0u64..100_000, h in 2usize..8, m1 in -1.0f64..1.0, dm in 0.0f64..1.0, s in 0.5f64..20.0) {
            let logits = random_logits(1, h, seed);
            let t = (seed as usize) % h;
            let a = supervised_margin_ce(&logits, &[Some(t)], m1, s, h).unwrap().loss;
            let b = supervised_margin_ce(&logits, &[Some(t)], m1 + dm, s, h).unwrap().loss;
            prop_assert!(b <= a + 1e-12);
        }

        #[test]
        fn loss_terms_are_nonnegative(seed in 0u64..100_000, b in 2usize..10, h in 2usize..6) {
            let probs = softmax_rows(&random_logits(b, h, seed), 3.0);
            let u = uncertainty_from_probs(&probs).unwrap();
            prop_assert!((0.0..=1.0 - 1.0 / h as f64 + 1e-12).contains(&u));
            let pairs = build_pairs(&random_logits(b, 3, seed + 1), &vec![None; b]).unwrap();
            prop_assert!(pairs.partners.iter().enumerate().all(|(i, &j)| i != j));
            let again = build_pairs(&random_logits(b, 3, seed + 1), &vec![None; b]).unwrap();
            prop_assert_eq!(&pairs, &again);
            prop_assert!(pairwise_positive_loss(&probs, &pairs, 1e-12).unwrap().loss >= 0.0);
            let prior = vec![1.0 / h as f64; h];
            prop_assert!(prior_regularizer(&probs, &prior, 1e-12).unwrap().loss >= 0.0);
        }
    }
}
