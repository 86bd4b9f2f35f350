//! Classifier trained with cross-entropy plus an energy-based binary
//! regularizer that separates in-distribution inputs from synthesized
//! outliers.
//!
//! With `s = φ(E(f(x)))` the regularizer is
//! `mean_ood softplus(s) + mean_id softplus(−s)`, i.e. a logistic loss that
//! pushes `s` up on ID data and down on outliers. At test time
//! `sigmoid(s)` is the OOD score (higher means more ID).

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::embeddings::{log_sum_exp, softmax, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::nn::{Mlp, Sgd};
use crate::seed::{derive_labeled, rng_from};
use crate::space::{cosine_lr, LabeledFeatures, TrainConfig};

/// `E = −log Σⱼ exp(logitⱼ)`.
pub fn energy(logits: &[f64]) -> f64 {
    -log_sum_exp(logits)
}

/// `log(1 + eˣ)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Architecture of the detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorSpec {
    pub classifier_hidden: Vec<usize>,
    pub phi_hidden: usize,
    /// φ's learning rate relative to the classifier's. φ sees one scalar
    /// whose magnitude grows as the classifier sharpens; at the full rate
    /// its ReLU units tend to die and the score collapses to a constant.
    pub phi_lr_scale: f64,
}

impl Default for DetectorSpec {
    fn default() -> Self {
        Self {
            classifier_hidden: vec![64],
            phi_hidden: 32,
            phi_lr_scale: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorModel {
    classifier: Mlp,
    phi: Mlp,
    beta: f64,
}

impl DetectorModel {
    pub fn new(classifier: Mlp, phi: Mlp, beta: f64) -> Result<Self> {
        if phi.num_layers() != 3 || phi.input_dim() != 1 || phi.output_dim() != 1 {
            return Err(Error::invalid(format!(
                "phi must be a 3-layer scalar MLP, got widths {:?}",
                phi.widths()
            )));
        }
        if !(beta >= 0.0) || !beta.is_finite() {
            return Err(Error::invalid(format!("beta must be >= 0, got {beta}")));
        }
        Ok(Self { classifier, phi, beta })
    }

    pub fn init(input_dim: usize, classes: usize, spec: &DetectorSpec, beta: f64, seed: u64) -> Result<Self> {
        let mut widths = vec![input_dim];
        widths.extend(&spec.classifier_hidden);
        widths.push(classes);
        let classifier = Mlp::init_uniform(&widths, &mut rng_from(derive_labeled(seed, "detector/classifier")))?;
        let h = spec.phi_hidden;
        let phi = Mlp::init_uniform(&[1, h, h, 1], &mut rng_from(derive_labeled(seed, "detector/phi")))?;
        Self::new(classifier, phi, beta)
    }

    pub fn classifier(&self) -> &Mlp {
        &self.classifier
    }

    pub fn phi(&self) -> &Mlp {
        &self.phi
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.output_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.classifier.input_dim()
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                actual: x.len(),
            });
        }
        Ok(())
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        Ok(self.classifier.forward(x))
    }

    /// `φ(E(f(x)))`.
    pub fn binary_logit(&self, x: &[f64]) -> Result<f64> {
        Ok(self.phi.forward(&[energy(&self.logits(x)?)])[0])
    }

    /// Pre-sigmoid OOD score: `φ(E(f(x)))`.
    ///
    /// With `beta = 0` the φ head never receives a training signal, so this
    /// falls back to `−E`, which ranks inputs exactly like the energy score.
    pub fn ood_logit(&self, x: &[f64]) -> Result<f64> {
        if self.beta == 0.0 {
            return Ok(-energy(&self.logits(x)?));
        }
        self.binary_logit(x)
    }

    /// `sigmoid(ood_logit)`, higher means more in-distribution. Kept inside
    /// the open interval (0, 1).
    pub fn ood_score(&self, x: &[f64]) -> Result<f64> {
        Ok(sigmoid(self.ood_logit(x)?).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0))
    }

    pub fn ood_logits(&self, features: &EmbeddingMatrix) -> Result<Vec<f64>> {
        features.iter_rows().map(|x| self.ood_logit(x)).collect()
    }

    pub fn ood_scores(&self, features: &EmbeddingMatrix) -> Result<Vec<f64>> {
        features.iter_rows().map(|x| self.ood_score(x)).collect()
    }

    pub fn logits_batch(&self, features: &EmbeddingMatrix) -> Result<Vec<Vec<f64>>> {
        features.iter_rows().map(|x| self.logits(x)).collect()
    }

    /// Flat parameter vector: classifier followed by φ.
    pub fn params(&self) -> Vec<f64> {
        let mut p = self.classifier.params().to_vec();
        p.extend_from_slice(self.phi.params());
        p
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        let nc = self.classifier.params().len();
        if params.len() != nc + self.phi.params().len() {
            return Err(Error::DimensionMismatch {
                expected: nc + self.phi.params().len(),
                actual: params.len(),
            });
        }
        self.classifier.params_mut().copy_from_slice(&params[..nc]);
        self.phi.params_mut().copy_from_slice(&params[nc..]);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    In,
    Out,
}

/// In-distribution iff `ood_score ≥ threshold`.
pub fn detect(model: &DetectorModel, x: &[f64], threshold: f64) -> Result<Decision> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::invalid(format!("threshold must lie in [0, 1], got {threshold}")));
    }
    Ok(if model.ood_score(x)? >= threshold {
        Decision::In
    } else {
        Decision::Out
    })
}

/// Logistic regularizer from precomputed binary logits `φ(E)`.
pub fn ood_reg_loss_from_scores(id_phi: &[f64], ood_phi: &[f64]) -> Result<f64> {
    if id_phi.is_empty() || ood_phi.is_empty() {
        return Err(Error::invalid("regularizer needs nonempty ID and OOD batches"));
    }
    let ood = ood_phi.iter().map(|&s| softplus(s)).sum::<f64>() / ood_phi.len() as f64;
    let id = id_phi.iter().map(|&s| softplus(-s)).sum::<f64>() / id_phi.len() as f64;
    Ok(ood + id)
}

/// Regularizer on batches of classifier logits.
pub fn ood_reg_loss(id_logits: &[Vec<f64>], ood_logits: &[Vec<f64>], phi: &Mlp) -> Result<f64> {
    let s = |l: &Vec<f64>| phi.forward(&[energy(l)])[0];
    let id: Vec<f64> = id_logits.iter().map(s).collect();
    let ood: Vec<f64> = ood_logits.iter().map(s).collect();
    ood_reg_loss_from_scores(&id, &ood)
}

/// Mean cross-entropy of logits against labels.
pub fn cross_entropy(logits: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if logits.is_empty() || logits.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: labels.len(),
            actual: logits.len(),
        });
    }
    let mut total = 0.0;
    for (l, &y) in logits.iter().zip(labels) {
        if y >= l.len() {
            return Err(Error::LabelOutOfRange {
                label: y as i64,
                classes: l.len(),
            });
        }
        total += log_sum_exp(l) - l[y];
    }
    Ok(total / logits.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub cross_entropy: f64,
    pub ood_reg: f64,
    pub total: f64,
}

/// `L_CE + β·L_ood` on an ID batch (with labels) and an outlier batch.
pub fn total_loss(id: &LabeledFeatures, ood: &EmbeddingMatrix, model: &DetectorModel) -> Result<LossParts> {
    let id_logits = model.logits_batch(id.features())?;
    let ood_logits = model.logits_batch(ood)?;
    let ce = cross_entropy(&id_logits, id.labels())?;
    let reg = ood_reg_loss(&id_logits, &ood_logits, &model.phi)?;
    Ok(LossParts {
        cross_entropy: ce,
        ood_reg: reg,
        total: ce + model.beta * reg,
    })
}

/// Accumulated gradient of [`total_loss`] over the given rows, plus the
/// gradient with respect to φ alone (before weighting by β is undone).
struct BatchGrad {
    parts: LossParts,
    grad: Vec<f64>,
}

fn batch_grad(
    model: &DetectorModel,
    id: &LabeledFeatures,
    id_rows: &[usize],
    ood: &EmbeddingMatrix,
    ood_rows: &[usize],
) -> BatchGrad {
    let nc = model.classifier.params().len();
    let mut g_cls = vec![0.0; nc];
    let mut g_phi = vec![0.0; model.phi.params().len()];
    let beta = model.beta;
    let n_id = id_rows.len() as f64;
    let n_ood = ood_rows.len() as f64;
    let mut ce = 0.0;
    let mut reg = 0.0;

    let mut visit = |x: &[f64], label: Option<usize>, reg_weight: f64, g_cls: &mut [f64], g_phi: &mut [f64]| {
        let trace = model.classifier.forward_trace(x);
        let logits = trace.output();
        let p = softmax(logits);
        let e = energy(logits);
        let mut g_logits = vec![0.0; logits.len()];
        if let Some(y) = label {
            ce += (log_sum_exp(logits) - logits[y]) / n_id;
            for (g, pj) in g_logits.iter_mut().zip(&p) {
                *g += pj / n_id;
            }
            g_logits[y] -= 1.0 / n_id;
        }
        let phi_trace = model.phi.forward_trace(&[e]);
        let s = phi_trace.output()[0];
        // ID: softplus(−s), ∂/∂s = −σ(−s). OOD: softplus(s), ∂/∂s = σ(s).
        let (term, ds) = if label.is_some() {
            (softplus(-s), -sigmoid(-s))
        } else {
            (softplus(s), sigmoid(s))
        };
        reg += term * reg_weight;
        let g_s = beta * ds * reg_weight;
        if g_s != 0.0 {
            let g_e = model.phi.backward(&phi_trace, &[g_s], g_phi)[0];
            // ∂E/∂logitⱼ = −pⱼ
            for (g, pj) in g_logits.iter_mut().zip(&p) {
                *g -= g_e * pj;
            }
        }
        model.classifier.backward(&trace, &g_logits, g_cls);
    };

    for &i in id_rows {
        visit(id.features().row(i), Some(id.labels()[i]), 1.0 / n_id, &mut g_cls, &mut g_phi);
    }
    for &i in ood_rows {
        visit(ood.row(i), None, 1.0 / n_ood, &mut g_cls, &mut g_phi);
    }
    g_cls.extend(g_phi);
    BatchGrad {
        parts: LossParts {
            cross_entropy: ce,
            ood_reg: reg,
            total: ce + beta * reg,
        },
        grad: g_cls,
    }
}

/// Gradient of `total_loss + ½·weight_decay·‖θ‖²` with respect to the flat
/// parameter vector of [`DetectorModel::params`].
pub fn total_loss_gradient(
    id: &LabeledFeatures,
    ood: &EmbeddingMatrix,
    model: &DetectorModel,
    weight_decay: f64,
) -> Result<Vec<f64>> {
    check_inputs(id, ood, model)?;
    let id_rows: Vec<usize> = (0..id.len()).collect();
    let ood_rows: Vec<usize> = (0..ood.rows()).collect();
    let mut g = batch_grad(model, id, &id_rows, ood, &ood_rows).grad;
    for (gi, w) in g.iter_mut().zip(model.params()) {
        *gi += weight_decay * w;
    }
    Ok(g)
}

fn check_inputs(id: &LabeledFeatures, ood: &EmbeddingMatrix, model: &DetectorModel) -> Result<()> {
    if ood.is_empty() {
        return Err(Error::invalid("outlier set is empty"));
    }
    for d in [id.features().dim(), ood.dim()] {
        if d != model.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: model.input_dim(),
                actual: d,
            });
        }
    }
    id.check_labels(model.num_classes())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorReport {
    pub total: Vec<f64>,
    pub cross_entropy: Vec<f64>,
    pub ood_reg: Vec<f64>,
    /// Sum over steps of ‖∂(β·L_ood)/∂φ‖₂, excluding weight decay.
    pub phi_grad_norm: f64,
}

/// Jointly trains classifier and φ on `L_CE + β·L_ood`.
///
/// Every step pairs an ID minibatch with an equally sized outlier minibatch.
/// ID order, outlier order and initialization use separate streams, so
/// changing `beta` leaves the sequence of ID batches untouched.
pub fn train_detector(
    id: &LabeledFeatures,
    ood: &EmbeddingMatrix,
    config: &TrainConfig,
    beta: f64,
    classes: usize,
    spec: &DetectorSpec,
) -> Result<(DetectorModel, DetectorReport)> {
    config.validate()?;
    if !(spec.phi_lr_scale >= 0.0) || !spec.phi_lr_scale.is_finite() {
        return Err(Error::invalid(format!("phi_lr_scale must be >= 0, got {}", spec.phi_lr_scale)));
    }
    let mut model = DetectorModel::init(id.features().dim(), classes, spec, beta, config.seed)?;
    check_inputs(id, ood, &model)?;

    let mut id_rng = rng_from(derive_labeled(config.seed, "detector/id-order"));
    let mut ood_rng = rng_from(derive_labeled(config.seed, "detector/ood-order"));
    let nc = model.classifier.params().len();
    let mut cls_opt = Sgd::new(nc, config.momentum, config.weight_decay);
    let mut phi_opt = Sgd::new(model.phi.params().len(), config.momentum, config.weight_decay);

    let mut id_order: Vec<usize> = (0..id.len()).collect();
    let mut ood_order: Vec<usize> = (0..ood.rows()).collect();
    ood_order.shuffle(&mut ood_rng);
    let mut ood_cursor = 0;

    let mut report = DetectorReport {
        total: Vec::with_capacity(config.epochs),
        cross_entropy: Vec::with_capacity(config.epochs),
        ood_reg: Vec::with_capacity(config.epochs),
        phi_grad_norm: 0.0,
    };

    for epoch in 0..config.epochs {
        let lr = cosine_lr(epoch, config)?;
        id_order.shuffle(&mut id_rng);
        let (mut tot, mut ce, mut reg) = (0.0, 0.0, 0.0);
        let mut steps = 0usize;
        for id_rows in id_order.chunks(config.batch_size) {
            let mut ood_rows = Vec::with_capacity(id_rows.len());
            while ood_rows.len() < id_rows.len() {
                if ood_cursor == ood_order.len() {
                    ood_order.shuffle(&mut ood_rng);
                    ood_cursor = 0;
                }
                ood_rows.push(ood_order[ood_cursor]);
                ood_cursor += 1;
            }
            let BatchGrad { parts, grad } = batch_grad(&model, id, id_rows, ood, &ood_rows);
            if !parts.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch });
            }
            let (g_cls, g_phi) = grad.split_at(nc);
            report.phi_grad_norm += g_phi.iter().map(|g| g * g).sum::<f64>().sqrt();
            cls_opt.step(model.classifier.params_mut(), g_cls, lr);
            phi_opt.step(model.phi.params_mut(), g_phi, lr * spec.phi_lr_scale);
            tot += parts.total;
            ce += parts.cross_entropy;
            reg += parts.ood_reg;
            steps += 1;
        }
        let s = steps as f64;
        report.total.push(tot / s);
        report.cross_entropy.push(ce / s);
        report.ood_reg.push(reg / s);
    }
    Ok((model, report))
}
