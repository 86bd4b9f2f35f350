//! Outlier (and inlier) embedding synthesis in the latent space.
//!
//! For every class, anchors are picked by their k-NN distance within the
//! class (largest for outliers, smallest for inliers), Gaussian candidates
//! are drawn around each anchor, and the candidate with the largest
//! (respectively smallest) k-NN distance to the reference set is kept. The
//! kept vector is rescaled to the norm of the class's raw token embedding.
//!
//! All k-NN distances are exact. Ties resolve to the lowest index.

use std::cmp::Ordering;

use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embeddings::{euclidean, l2_norm, normalize, EmbeddingMatrix, PrototypeBank};
use crate::error::{Error, Result};
use crate::seed::{derive_seed, label_hash, rng_from, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleMode {
    /// Boundary anchors, keep the farthest candidate.
    Ood,
    /// Dense anchors, keep the closest candidate.
    Id,
}

/// Reference set for the candidate filter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reference {
    /// The anchor's own class.
    PerClass,
    /// Every class's embeddings together.
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub k: usize,
    pub sigma2: f64,
    pub candidates_per_anchor: usize,
    pub anchors_per_class: usize,
    pub samples_per_class: usize,
    pub mode: SampleMode,
    pub reference: Reference,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            k: 300,
            sigma2: 0.03,
            candidates_per_anchor: 100,
            anchors_per_class: 50,
            samples_per_class: 1000,
            mode: SampleMode::Ood,
            reference: Reference::PerClass,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("k", self.k),
            ("candidates_per_anchor", self.candidates_per_anchor),
            ("anchors_per_class", self.anchors_per_class),
            ("samples_per_class", self.samples_per_class),
        ] {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be >= 1")));
            }
        }
        if !(self.sigma2 > 0.0) || !self.sigma2.is_finite() {
            return Err(Error::invalid(format!("sigma2 must be positive, got {}", self.sigma2)));
        }
        Ok(())
    }

    /// Checks the config against one class's population.
    pub fn validate_population(&self, n: usize) -> Result<()> {
        if self.k >= n {
            return Err(Error::KTooLarge {
                k: self.k,
                population: n.saturating_sub(1),
            });
        }
        if self.anchors_per_class > n {
            return Err(Error::invalid(format!(
                "anchors_per_class {} exceeds class population {n}",
                self.anchors_per_class
            )));
        }
        Ok(())
    }
}

/// Synthesized embeddings with their provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct OutlierBatch {
    pub embeddings: EmbeddingMatrix,
    /// Source anchor, as a row index into the class's embedding set. For
    /// interpolation batches it is the partner class; `-1` when there is no
    /// anchor.
    pub anchor_index: Vec<i64>,
    pub class_id: Vec<usize>,
    /// k-NN distance of the kept candidate before rescaling.
    pub knn_distance: Vec<f64>,
}

impl OutlierBatch {
    pub fn empty(dim: usize) -> Self {
        Self {
            embeddings: EmbeddingMatrix::empty(dim),
            anchor_index: Vec::new(),
            class_id: Vec::new(),
            knn_distance: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.class_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_id.is_empty()
    }

    fn push(&mut self, row: &[f64], anchor: i64, class: usize, distance: f64) -> Result<()> {
        self.embeddings.push_row(row)?;
        self.anchor_index.push(anchor);
        self.class_id.push(class);
        self.knn_distance.push(distance);
        Ok(())
    }

    /// Rows projected back onto the unit sphere, undoing the token-norm
    /// rescale.
    pub fn unit_embeddings(&self) -> Result<EmbeddingMatrix> {
        self.embeddings.normalized()
    }

    /// Rows belonging to `class`.
    pub fn rows_of(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.class_id[i] == class).collect()
    }
}

fn check_k(k: usize, population: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::invalid("k must be >= 1"));
    }
    if k > population {
        return Err(Error::KTooLarge { k, population });
    }
    Ok(())
}

/// Distance from `query` to its k-th nearest neighbour in `index_set`.
///
/// With `exclude_self`, `query` is taken to be a member of `index_set` and
/// its own zero distance is skipped.
pub fn knn_distance(query: &[f64], index_set: &EmbeddingMatrix, k: usize, exclude_self: bool) -> Result<f64> {
    if query.len() != index_set.dim() {
        return Err(Error::DimensionMismatch {
            expected: index_set.dim(),
            actual: query.len(),
        });
    }
    let usable = index_set.rows().saturating_sub(usize::from(exclude_self));
    check_k(k, usable)?;
    let mut d: Vec<f64> = index_set.iter_rows().map(|r| euclidean(query, r)).collect();
    let rank = if exclude_self { k } else { k - 1 };
    let (_, kth, _) = d.select_nth_unstable_by(rank, f64::total_cmp);
    Ok(*kth)
}

/// Self-excluded k-NN distance of every member of `set`.
pub fn member_knn_distances(set: &EmbeddingMatrix, k: usize) -> Result<Vec<f64>> {
    check_k(k, set.rows().saturating_sub(1))?;
    (0..set.rows())
        .into_par_iter()
        .map(|i| knn_distance(set.row(i), set, k, true))
        .collect()
}

fn select_anchors(set: &EmbeddingMatrix, k: usize, count: usize, largest: bool) -> Result<Vec<usize>> {
    if count > set.rows() {
        return Err(Error::invalid(format!(
            "cannot select {count} anchors from {} embeddings",
            set.rows()
        )));
    }
    let d = member_knn_distances(set, k)?;
    let mut idx: Vec<usize> = (0..set.rows()).collect();
    idx.sort_by(|&a, &b| {
        let ord = d[a].total_cmp(&d[b]);
        let ord = if largest { ord.reverse() } else { ord };
        ord.then(a.cmp(&b))
    });
    idx.truncate(count);
    Ok(idx)
}

/// The `count` members with the largest k-NN distance, farthest first.
pub fn select_boundary_anchors(class_embeddings: &EmbeddingMatrix, k: usize, count: usize) -> Result<Vec<usize>> {
    select_anchors(class_embeddings, k, count, true)
}

/// The `count` members with the smallest k-NN distance, densest first.
pub fn select_inlier_anchors(class_embeddings: &EmbeddingMatrix, k: usize, count: usize) -> Result<Vec<usize>> {
    select_anchors(class_embeddings, k, count, false)
}

/// `count` i.i.d. draws from `N(anchor, σ²I)`. Not renormalized.
pub fn sample_candidates(anchor: &[f64], sigma2: f64, count: usize, rng: &mut Rng) -> EmbeddingMatrix {
    let sigma = sigma2.sqrt();
    let mut data = Vec::with_capacity(count * anchor.len());
    for _ in 0..count {
        for &a in anchor {
            let eps: f64 = rng.sample(StandardNormal);
            data.push(a + sigma * eps);
        }
    }
    EmbeddingMatrix::new(count, anchor.len(), data).expect("finite draws")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Selected {
    pub index: usize,
    pub distance: f64,
}

fn filter_knn(candidates: &EmbeddingMatrix, index_set: &EmbeddingMatrix, k: usize, largest: bool) -> Result<Selected> {
    if candidates.is_empty() {
        return Err(Error::invalid("empty candidate set"));
    }
    let mut best: Option<Selected> = None;
    for (i, row) in candidates.iter_rows().enumerate() {
        let distance = knn_distance(row, index_set, k, false)?;
        let better = match best {
            None => true,
            Some(b) => {
                let ord = distance.total_cmp(&b.distance);
                if largest {
                    ord == Ordering::Greater
                } else {
                    ord == Ordering::Less
                }
            }
        };
        if better {
            best = Some(Selected { index: i, distance });
        }
    }
    Ok(best.expect("nonempty"))
}

/// Candidate with the largest k-NN distance to `index_set`.
pub fn filter_max_knn(candidates: &EmbeddingMatrix, index_set: &EmbeddingMatrix, k: usize) -> Result<Selected> {
    filter_knn(candidates, index_set, k, true)
}

/// Candidate with the smallest k-NN distance to `index_set`.
pub fn filter_min_knn(candidates: &EmbeddingMatrix, index_set: &EmbeddingMatrix, k: usize) -> Result<Selected> {
    filter_knn(candidates, index_set, k, false)
}

/// `v/‖v‖ · original_norms[class]`.
pub fn rescale_to_token_norm(v: &[f64], class_id: usize, bank: &PrototypeBank) -> Result<Vec<f64>> {
    if class_id >= bank.num_classes() {
        return Err(Error::LabelOutOfRange {
            label: class_id as i64,
            classes: bank.num_classes(),
        });
    }
    let target = bank.original_norm(class_id);
    Ok(normalize(v)?.into_iter().map(|x| x * target).collect())
}

/// Seed of the candidate stream for one anchor.
pub fn anchor_stream_seed(seed: u64, class_id: usize, anchor_ordinal: usize) -> u64 {
    derive_seed(seed, &[label_hash("sampler/anchor"), class_id as u64, anchor_ordinal as u64])
}

struct Emission {
    ordinal: usize,
    row: Vec<f64>,
    anchor: usize,
    distance: f64,
}

/// Synthesizes `samples_per_class` embeddings for every class.
///
/// `class_embeddings[c]` holds the unit embeddings of class `c`. Anchors are
/// used in turn until the per-class quota is met; each anchor draws from its
/// own stream, so the result does not depend on scheduling.
pub fn synthesize(class_embeddings: &[EmbeddingMatrix], bank: &PrototypeBank, config: &SamplerConfig) -> Result<OutlierBatch> {
    config.validate()?;
    if class_embeddings.len() != bank.num_classes() {
        return Err(Error::DimensionMismatch {
            expected: bank.num_classes(),
            actual: class_embeddings.len(),
        });
    }
    for set in class_embeddings {
        if set.dim() != bank.dim() {
            return Err(Error::DimensionMismatch {
                expected: bank.dim(),
                actual: set.dim(),
            });
        }
        config.validate_population(set.rows())?;
    }

    let global = match config.reference {
        Reference::PerClass => None,
        Reference::Global => {
            let mut all = EmbeddingMatrix::empty(bank.dim());
            for set in class_embeddings {
                for r in set.iter_rows() {
                    all.push_row(r)?;
                }
            }
            Some(all)
        }
    };

    let mut batch = OutlierBatch::empty(bank.dim());
    for (class_id, set) in class_embeddings.iter().enumerate() {
        let anchors = match config.mode {
            SampleMode::Ood => select_boundary_anchors(set, config.k, config.anchors_per_class)?,
            SampleMode::Id => select_inlier_anchors(set, config.k, config.anchors_per_class)?,
        };
        let reference = global.as_ref().unwrap_or(set);
        let per_anchor: Vec<Vec<Emission>> = anchors
            .par_iter()
            .enumerate()
            .map(|(ordinal, &anchor)| {
                let mut rng = rng_from(anchor_stream_seed(config.seed, class_id, ordinal));
                let mut out = Vec::new();
                for emission in (ordinal..config.samples_per_class).step_by(anchors.len()) {
                    let candidates = sample_candidates(set.row(anchor), config.sigma2, config.candidates_per_anchor, &mut rng);
                    let sel = match config.mode {
                        SampleMode::Ood => filter_max_knn(&candidates, reference, config.k)?,
                        SampleMode::Id => filter_min_knn(&candidates, reference, config.k)?,
                    };
                    out.push(Emission {
                        ordinal: emission,
                        row: rescale_to_token_norm(candidates.row(sel.index), class_id, bank)?,
                        anchor,
                        distance: sel.distance,
                    });
                }
                Ok(out)
            })
            .collect::<Result<_>>()?;
        let mut emissions: Vec<Emission> = per_anchor.into_iter().flatten().collect();
        emissions.sort_by_key(|e| e.ordinal);
        for e in emissions {
            batch.push(&e.row, e.anchor as i64, class_id, e.distance)?;
        }
    }
    Ok(batch)
}

/// Baseline synthesis: Gaussian noise `N(0, σ₁²I)` added to each unit
/// prototype, rescaled to the token norm. `count` rows per class; the
/// recorded distance is from the noisy vector to its prototype.
pub fn token_noise_sampler(bank: &PrototypeBank, sigma1_sq: f64, count: usize, seed: u64) -> Result<OutlierBatch> {
    if !(sigma1_sq > 0.0) || !sigma1_sq.is_finite() {
        return Err(Error::invalid(format!("sigma1_sq must be positive, got {sigma1_sq}")));
    }
    let mut batch = OutlierBatch::empty(bank.dim());
    for c in 0..bank.num_classes() {
        let mu = bank.prototype(c);
        let mut rng = rng_from(derive_seed(seed, &[label_hash("sampler/token-noise"), c as u64]));
        let draws = sample_candidates(mu, sigma1_sq, count, &mut rng);
        for v in draws.iter_rows() {
            batch.push(&rescale_to_token_norm(v, c, bank)?, -1, c, euclidean(v, mu))?;
        }
    }
    Ok(batch)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairPolicy {
    /// Partner class drawn uniformly from the other classes.
    Distinct,
    /// Partner class drawn uniformly from all classes.
    Any,
}

/// Baseline synthesis: `α·T(y₁) + (1−α)·T(y₂)` on raw token embeddings,
/// rescaled to the norm of `T(y₁)`. For each class `y₁`, `count` partners
/// `y₂` are drawn under `policy`; the partner is stored as the anchor and the
/// recorded distance is between the interpolated direction and `μ_{y₁}`.
pub fn interpolation_sampler(bank: &PrototypeBank, alpha: f64, policy: PairPolicy, count: usize, seed: u64) -> Result<OutlierBatch> {
    let classes = bank.num_classes();
    if classes < 2 {
        return Err(Error::invalid(format!("interpolation needs at least 2 classes, got {classes}")));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::invalid(format!("alpha must lie in (0, 1], got {alpha}")));
    }
    let tokens = bank.tokens();
    let mut batch = OutlierBatch::empty(bank.dim());
    for c in 0..classes {
        let mut rng = rng_from(derive_seed(seed, &[label_hash("sampler/interpolation"), c as u64]));
        for _ in 0..count {
            let partner = match policy {
                PairPolicy::Distinct => {
                    let p = rng.random_range(0..classes - 1);
                    if p >= c {
                        p + 1
                    } else {
                        p
                    }
                }
                PairPolicy::Any => rng.random_range(0..classes),
            };
            let v: Vec<f64> = tokens
                .row(c)
                .iter()
                .zip(tokens.row(partner))
                .map(|(a, b)| alpha * a + (1.0 - alpha) * b)
                .collect();
            let direction = normalize(&v)?;
            let distance = euclidean(&direction, bank.prototype(c));
            batch.push(&rescale_to_token_norm(&v, c, bank)?, partner as i64, c, distance)?;
        }
    }
    Ok(batch)
}

/// Largest deviation of any row's norm from its class's token norm.
pub fn max_rescale_error(batch: &OutlierBatch, bank: &PrototypeBank) -> f64 {
    batch
        .embeddings
        .iter_rows()
        .zip(&batch.class_id)
        .map(|(r, &c)| (l2_norm(r) - bank.original_norm(c)).abs())
        .fold(0.0, f64::max)
}
