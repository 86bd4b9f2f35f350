//! Gaussian-mixture stand-in for real image features: labeled ID classes,
//! held-out OOD components, and random class prototypes.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::embeddings::{euclidean, normalize, EmbeddingMatrix, PrototypeBank};
use crate::error::{Error, Result};
use crate::seed::{derive_labeled, rng_from, Rng};
use crate::space::LabeledFeatures;

/// Where randomly placed OOD component means go.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OodPlacement {
    /// Uniform random directions at `ood_radius`.
    Random,
    /// Direction of the midpoint of two distinct random ID means, at
    /// `ood_radius`: a held-out class sitting in the gap between two known
    /// ones.
    Between,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub d_in: usize,
    /// Prototype (latent space) dimension.
    pub m: usize,
    /// Explicit ID class means; random directions at `mean_radius` if absent.
    pub id_means: Option<Vec<Vec<f64>>>,
    pub mean_radius: f64,
    /// Isotropic standard deviation of each ID class.
    pub id_std: f64,
    pub ood_components: usize,
    /// Explicit OOD component means; random directions at `ood_radius` if
    /// absent.
    pub ood_means: Option<Vec<Vec<f64>>>,
    pub ood_placement: OodPlacement,
    pub ood_radius: f64,
    pub ood_std: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub ood_test_per_component: usize,
    /// Token norms are drawn uniformly from this range.
    pub token_norm_range: [f64; 2],
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 8,
            d_in: 16,
            m: 8,
            id_means: None,
            mean_radius: 4.0,
            id_std: 0.7,
            ood_components: 4,
            ood_means: None,
            ood_placement: OodPlacement::Random,
            ood_radius: 4.0,
            ood_std: 0.7,
            train_per_class: 500,
            test_per_class: 100,
            ood_test_per_component: 100,
            token_norm_range: [1.0, 2.0],
            seed: 0,
        }
    }
}

/// Output of [`generate_synthetic`].
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub id_train: LabeledFeatures,
    pub id_test: LabeledFeatures,
    pub ood_test: EmbeddingMatrix,
    pub prototypes: PrototypeBank,
}

fn random_direction(dim: usize, rng: &mut Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if let Ok(u) = normalize(&v) {
            return u;
        }
    }
}

fn means(explicit: &Option<Vec<Vec<f64>>>, count: usize, dim: usize, radius: f64, rng: &mut Rng) -> Result<Vec<Vec<f64>>> {
    match explicit {
        Some(ms) => {
            if ms.len() != count {
                return Err(Error::Config(format!("expected {count} means, got {}", ms.len())));
            }
            if let Some(bad) = ms.iter().find(|m| m.len() != dim) {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: bad.len(),
                });
            }
            Ok(ms.clone())
        }
        None => Ok((0..count)
            .map(|_| random_direction(dim, rng).into_iter().map(|x| x * radius).collect())
            .collect()),
    }
}

fn between_means(id_means: &[Vec<f64>], count: usize, radius: f64, rng: &mut Rng) -> Result<Vec<Vec<f64>>> {
    let c = id_means.len();
    if c < 2 {
        return Err(Error::Config("ood_placement = \"between\" needs at least 2 classes".into()));
    }
    (0..count)
        .map(|_| {
            let a = rng.random_range(0..c);
            let b = (a + 1 + rng.random_range(0..c - 1)) % c;
            let mid: Vec<f64> = id_means[a].iter().zip(&id_means[b]).map(|(x, y)| x + y).collect();
            let dir = normalize(&mid).map_err(|_| Error::Config("opposite ID means have no midpoint direction".into()))?;
            Ok(dir.into_iter().map(|x| x * radius).collect())
        })
        .collect()
}

fn draw(mean: &[f64], std: f64, n: usize, rng: &mut Rng, out: &mut Vec<f64>) {
    for _ in 0..n {
        for &mu in mean {
            let e: f64 = rng.sample(StandardNormal);
            out.push(mu + std * e);
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("classes", self.classes),
            ("d_in", self.d_in),
            ("ood_components", self.ood_components),
            ("train_per_class", self.train_per_class),
            ("test_per_class", self.test_per_class),
            ("ood_test_per_component", self.ood_test_per_component),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("synthetic.{name} must be >= 1")));
            }
        }
        if self.m < 2 {
            return Err(Error::Config("synthetic.m must be >= 2".into()));
        }
        for (name, v) in [("id_std", self.id_std), ("ood_std", self.ood_std)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("synthetic.{name} must be >= 0")));
            }
        }
        let [lo, hi] = self.token_norm_range;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::Config("synthetic.token_norm_range must satisfy 0 < lo <= hi".into()));
        }
        Ok(())
    }
}

/// Draws the ID train/test splits, the OOD test split and the prototypes.
/// Each part uses its own stream derived from `spec.seed`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut mean_rng = rng_from(derive_labeled(spec.seed, "synthetic/means"));
    let id_means = means(&spec.id_means, spec.classes, spec.d_in, spec.mean_radius, &mut mean_rng)?;
    let ood_means = match (&spec.ood_means, spec.ood_placement) {
        (None, OodPlacement::Between) => between_means(&id_means, spec.ood_components, spec.ood_radius, &mut mean_rng)?,
        (explicit, _) => means(explicit, spec.ood_components, spec.d_in, spec.ood_radius, &mut mean_rng)?,
    };
    for o in &ood_means {
        if id_means.iter().any(|m| euclidean(m, o) == 0.0) {
            return Err(Error::Config("OOD component mean coincides with an ID mean".into()));
        }
    }

    let split = |label: &str, per_class: usize| -> Result<LabeledFeatures> {
        let mut rng = rng_from(derive_labeled(spec.seed, label));
        let mut data = Vec::with_capacity(spec.classes * per_class * spec.d_in);
        let mut labels = Vec::with_capacity(spec.classes * per_class);
        for (c, mean) in id_means.iter().enumerate() {
            draw(mean, spec.id_std, per_class, &mut rng, &mut data);
            labels.extend(std::iter::repeat_n(c, per_class));
        }
        LabeledFeatures::new(EmbeddingMatrix::new(labels.len(), spec.d_in, data)?, labels)
    };
    let id_train = split("synthetic/train", spec.train_per_class)?;
    let id_test = split("synthetic/test", spec.test_per_class)?;

    let mut rng = rng_from(derive_labeled(spec.seed, "synthetic/ood"));
    let mut data = Vec::new();
    for mean in &ood_means {
        draw(mean, spec.ood_std, spec.ood_test_per_component, &mut rng, &mut data);
    }
    let ood_test = EmbeddingMatrix::new(spec.ood_components * spec.ood_test_per_component, spec.d_in, data)?;

    let mut rng = rng_from(derive_labeled(spec.seed, "synthetic/prototypes"));
    let [lo, hi] = spec.token_norm_range;
    let mut tokens = Vec::with_capacity(spec.classes * spec.m);
    for _ in 0..spec.classes {
        let norm = if hi > lo { rng.random_range(lo..hi) } else { lo };
        tokens.extend(random_direction(spec.m, &mut rng).into_iter().map(|x| x * norm));
    }
    let prototypes = PrototypeBank::from_tokens_unnamed(&EmbeddingMatrix::new(spec.classes, spec.m, tokens)?)?;

    Ok(SyntheticData {
        id_train,
        id_test,
        ood_test,
        prototypes,
    })
}
