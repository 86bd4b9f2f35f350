//! Text-conditioned latent space: an encoder head trained so that
//! normalized embeddings align with their class prototypes.
//!
//! The objective per sample is the prototype cross-entropy
//! `−log softmax_y(μⱼᵀz / t)` with `z = h(x)/‖h(x)‖`, averaged over the
//! batch. Prototypes are frozen; only the head is trained.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::embeddings::{dot, l2_norm, log_sum_exp, softmax, EmbeddingMatrix, PrototypeBank};
use crate::error::{Error, Result};
use crate::nn::{Mlp, Sgd, Trace};
use crate::seed::{derive_labeled, rng_from};

/// Optimizer schedule shared by the encoder and detector trainers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub temperature: f64,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 160,
            lr0: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            temperature: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        for (name, v) in [("lr0", self.lr0), ("temperature", self.temperature)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("momentum", self.momentum), ("weight_decay", self.weight_decay)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Cosine-decayed learning rate `lr0 · ½(1 + cos(π·epoch/epochs))`.
pub fn cosine_lr(epoch: usize, config: &TrainConfig) -> Result<f64> {
    if epoch >= config.epochs {
        return Err(Error::invalid(format!(
            "epoch {epoch} outside schedule of {} epochs",
            config.epochs
        )));
    }
    Ok(config.lr0 * 0.5 * (1.0 + (PI * epoch as f64 / config.epochs as f64).cos()))
}

/// Raw features with class labels in `[0, C)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFeatures {
    features: EmbeddingMatrix,
    labels: Vec<usize>,
}

impl LabeledFeatures {
    pub fn new(features: EmbeddingMatrix, labels: Vec<usize>) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: features.rows(),
                actual: labels.len(),
            });
        }
        if labels.is_empty() {
            return Err(Error::invalid("labeled feature set is empty"));
        }
        Ok(Self { features, labels })
    }

    pub fn features(&self) -> &EmbeddingMatrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    pub fn check_labels(&self, classes: usize) -> Result<()> {
        match self.labels.iter().find(|&&y| y >= classes) {
            Some(&y) => Err(Error::LabelOutOfRange {
                label: y as i64,
                classes,
            }),
            None => Ok(()),
        }
    }

    /// Row indices of every sample labeled `class`.
    pub fn indices_of(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Self::new(
            self.features.select_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }
}

/// MLP followed by L2 normalization onto the unit hypersphere.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderHead {
    mlp: Mlp,
}

impl EncoderHead {
    pub fn new(mlp: Mlp) -> Self {
        Self { mlp }
    }

    /// Widths `d_in → hidden… → m`, uniformly initialized.
    pub fn init(widths: &[usize], seed: u64) -> Result<Self> {
        Ok(Self::new(Mlp::init_uniform(widths, &mut rng_from(seed))?))
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn mlp_mut(&mut self) -> &mut Mlp {
        &mut self.mlp
    }

    pub fn input_dim(&self) -> usize {
        self.mlp.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.mlp.output_dim()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                actual: x.len(),
            });
        }
        let h = self.mlp.forward(x);
        let norm = l2_norm(&h);
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::ZeroNorm);
        }
        Ok(h.into_iter().map(|v| v / norm).collect())
    }

    /// Embeds every row of `features`.
    pub fn embed(&self, features: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
        let mut data = Vec::with_capacity(features.rows() * self.output_dim());
        for row in features.iter_rows() {
            data.extend(self.forward(row)?);
        }
        EmbeddingMatrix::new(features.rows(), self.output_dim(), data)
    }
}

fn check_inputs(head: &EncoderHead, batch: &LabeledFeatures, bank: &PrototypeBank, t: f64) -> Result<()> {
    if !(t > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {t}")));
    }
    if bank.num_classes() == 0 {
        return Err(Error::invalid("prototype bank has no classes"));
    }
    if bank.dim() != head.output_dim() {
        return Err(Error::DimensionMismatch {
            expected: head.output_dim(),
            actual: bank.dim(),
        });
    }
    if batch.features().dim() != head.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: head.input_dim(),
            actual: batch.features().dim(),
        });
    }
    batch.check_labels(bank.num_classes())
}

struct SampleGrad {
    loss: f64,
}

/// Loss of one sample; when `grad` is given, accumulates `∂loss/∂θ` into it.
fn sample_loss(
    head: &EncoderHead,
    x: &[f64],
    label: usize,
    bank: &PrototypeBank,
    t: f64,
    grad: Option<&mut [f64]>,
) -> Result<SampleGrad> {
    let trace: Trace = head.mlp.forward_trace(x);
    let h = trace.output();
    let norm = l2_norm(h);
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::ZeroNorm);
    }
    let z: Vec<f64> = h.iter().map(|v| v / norm).collect();
    let logits: Vec<f64> = bank.similarities(&z).into_iter().map(|s| s / t).collect();
    let loss = log_sum_exp(&logits) - logits[label];

    if let Some(grad) = grad {
        // ∂L/∂logitⱼ = pⱼ − δⱼy ; ∂L/∂z = Σⱼ (pⱼ − δⱼy) μⱼ / t
        let mut residual = softmax(&logits);
        residual[label] -= 1.0;
        let mut g_z = vec![0.0; z.len()];
        for (r, mu) in residual.iter().zip(bank.prototypes().iter_rows()) {
            for (g, m) in g_z.iter_mut().zip(mu) {
                *g += r * m / t;
            }
        }
        // through z = h/‖h‖: ∂L/∂h = (g − (gᵀz) z) / ‖h‖
        let gz_dot = dot(&g_z, &z);
        let g_h: Vec<f64> = g_z
            .iter()
            .zip(&z)
            .map(|(g, zi)| (g - gz_dot * zi) / norm)
            .collect();
        head.mlp.backward(&trace, &g_h, grad);
    }
    Ok(SampleGrad { loss })
}

/// Mean prototype cross-entropy over the batch.
pub fn alignment_loss(head: &EncoderHead, batch: &LabeledFeatures, bank: &PrototypeBank, t: f64) -> Result<f64> {
    check_inputs(head, batch, bank, t)?;
    let mut total = 0.0;
    for (x, &y) in batch.features().iter_rows().zip(batch.labels()) {
        total += sample_loss(head, x, y, bank, t, None)?.loss;
    }
    Ok(total / batch.len() as f64)
}

/// `alignment_loss + ½·weight_decay·‖θ‖²`, the function whose gradient
/// [`loss_gradient`] returns.
pub fn regularized_loss(
    head: &EncoderHead,
    batch: &LabeledFeatures,
    bank: &PrototypeBank,
    t: f64,
    weight_decay: f64,
) -> Result<f64> {
    Ok(alignment_loss(head, batch, bank, t)? + 0.5 * weight_decay * head.mlp.squared_norm())
}

/// Gradient of [`regularized_loss`] with respect to every head parameter,
/// in the MLP's flat layout.
pub fn loss_gradient(
    head: &EncoderHead,
    batch: &LabeledFeatures,
    bank: &PrototypeBank,
    t: f64,
    weight_decay: f64,
) -> Result<Vec<f64>> {
    let (_, mut grad) = batch_loss_and_grad(head, batch.features(), batch.labels(), None, bank, t)?;
    for (g, w) in grad.iter_mut().zip(head.mlp.params()) {
        *g += weight_decay * w;
    }
    Ok(grad)
}

/// Mean loss and mean loss gradient over `rows` (all rows when `None`).
fn batch_loss_and_grad(
    head: &EncoderHead,
    features: &EmbeddingMatrix,
    labels: &[usize],
    rows: Option<&[usize]>,
    bank: &PrototypeBank,
    t: f64,
) -> Result<(f64, Vec<f64>)> {
    let mut grad = vec![0.0; head.mlp.params().len()];
    let mut loss = 0.0;
    let all: Vec<usize>;
    let rows = match rows {
        Some(r) => r,
        None => {
            all = (0..features.rows()).collect();
            &all
        }
    };
    for &i in rows {
        loss += sample_loss(head, features.row(i), labels[i], bank, t, Some(&mut grad))?.loss;
    }
    let n = rows.len() as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    Ok((loss / n, grad))
}

/// Head architecture for [`train_space`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadSpec {
    pub hidden: Vec<usize>,
}

impl Default for HeadSpec {
    fn default() -> Self {
        Self { hidden: vec![64] }
    }
}

impl HeadSpec {
    pub fn widths(&self, d_in: usize, m: usize) -> Vec<usize> {
        let mut w = vec![d_in];
        w.extend(&self.hidden);
        w.push(m);
        w
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpaceReport {
    /// Alignment loss of the initial head over the full training set.
    pub initial_loss: f64,
    /// Mean per-sample alignment loss seen during each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Trains an encoder head with momentum SGD and cosine decay.
///
/// Initialization and the per-epoch shuffles use separate streams derived
/// from `config.seed`, so a fixed config reproduces the same weights.
pub fn train_space(
    data: &LabeledFeatures,
    bank: &PrototypeBank,
    config: &TrainConfig,
    arch: &HeadSpec,
) -> Result<(EncoderHead, SpaceReport)> {
    config.validate()?;
    let classes = data.num_classes();
    if classes > bank.num_classes() {
        return Err(Error::LabelOutOfRange {
            label: classes as i64 - 1,
            classes: bank.num_classes(),
        });
    }
    let widths = arch.widths(data.features().dim(), bank.dim());
    let mut head = EncoderHead::init(&widths, derive_labeled(config.seed, "space/init"))?;
    check_inputs(&head, data, bank, config.temperature)?;

    let mut shuffle_rng = rng_from(derive_labeled(config.seed, "space/shuffle"));
    let mut sgd = Sgd::new(head.mlp.params().len(), config.momentum, config.weight_decay);
    let initial_loss = alignment_loss(&head, data, bank, config.temperature)?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let lr = cosine_lr(epoch, config)?;
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let (loss, grad) =
                batch_loss_and_grad(&head, data.features(), data.labels(), Some(batch), bank, config.temperature)
                    .map_err(|e| match e {
                        Error::ZeroNorm => Error::NonFiniteLoss { epoch },
                        other => other,
                    })?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch });
            }
            epoch_loss += loss * batch.len() as f64;
            sgd.step(head.mlp.params_mut(), &grad, lr);
        }
        epoch_losses.push(epoch_loss / data.len() as f64);
    }
    Ok((
        head,
        SpaceReport {
            initial_loss,
            epoch_losses,
        },
    ))
}
