//! TOML pipeline configuration. Unknown keys are rejected at every level.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::detector::DetectorSpec;
use crate::error::{Error, Result};
use crate::sampler::{PairPolicy, SampleMode, SamplerConfig};
use crate::seed::derive_labeled;
use crate::space::{HeadSpec, TrainConfig};

use super::synthetic::SyntheticSpec;

/// DOEB inputs for the `files` data source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataFiles {
    /// Labeled raw features.
    pub id_train: PathBuf,
    pub id_test: PathBuf,
    /// Unlabeled raw features.
    pub ood_test: PathBuf,
    /// Raw token embeddings, one row per class.
    pub prototypes: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Files(DataFiles),
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SyntheticSpec::default())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpaceSection {
    pub train: TrainConfig,
    pub head: HeadSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorSection {
    pub train: TrainConfig,
    pub model: DetectorSpec,
    pub beta: f64,
}

impl Default for DetectorSection {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            model: DetectorSpec::default(),
            beta: 1.0,
        }
    }
}

/// Alternative outlier synthesis that replaces the k-NN sampler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Variant {
    TokenNoise { sigma1_sq: f64, count: usize },
    Interpolation { alpha: f64, policy: PairPolicy, count: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsOptions {
    /// Also train and score a β=0 classifier.
    pub baselines: bool,
    /// Record wall-clock time; off by default so outputs stay reproducible.
    pub timing: bool,
}

impl Default for MetricsOptions {
    fn default() -> Self {
        Self {
            baselines: true,
            timing: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub data: DataSource,
    #[serde(default)]
    pub space: SpaceSection,
    #[serde(default)]
    pub sampler: SamplerConfig,
    /// Inlier (`mode = "id"`) synthesis whose rows augment detector training.
    #[serde(default)]
    pub inlier: Option<SamplerConfig>,
    #[serde(default)]
    pub variant: Option<Variant>,
    #[serde(default)]
    pub detector: DetectorSection,
    #[serde(default)]
    pub metrics: MetricsOptions,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: default_output_dir(),
            data: DataSource::default(),
            space: SpaceSection::default(),
            sampler: SamplerConfig::default(),
            inlier: None,
            variant: None,
            detector: DetectorSection::default(),
            metrics: MetricsOptions::default(),
        }
    }
}

/// Parses a `--set` value as a TOML literal, falling back to a bare string.
fn parse_literal(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key `{key}`")));
    }
    let (last, parents) = path.split_last().expect("nonempty path");
    let mut table = root;
    for p in parents {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    table.insert(last.to_string(), parse_literal(raw.trim()));
    Ok(())
}

impl PipelineConfig {
    /// Parses TOML text, applying `key=value` overrides before validation.
    pub fn from_toml_with(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with(text, &[])
    }

    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_with(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |e: Error| match e {
            Error::InvalidArgument(m) => Error::Config(m),
            other => other,
        };
        match &self.data {
            DataSource::Synthetic(s) => s.validate()?,
            DataSource::Files(f) => {
                for p in [&f.id_train, &f.id_test, &f.ood_test, &f.prototypes] {
                    if !p.is_file() {
                        return Err(Error::Config(format!("data file {} does not exist", p.display())));
                    }
                }
            }
        }
        self.space.train.validate().map_err(cfg)?;
        self.detector.train.validate().map_err(cfg)?;
        self.sampler.validate().map_err(cfg)?;
        if self.sampler.mode != SampleMode::Ood {
            return Err(Error::Config("sampler.mode must be \"ood\"; use [inlier] for inlier synthesis".into()));
        }
        if let Some(inlier) = &self.inlier {
            inlier.validate().map_err(cfg)?;
            if inlier.mode != SampleMode::Id {
                return Err(Error::Config("inlier.mode must be \"id\"".into()));
            }
        }
        if !(self.detector.beta >= 0.0) || !self.detector.beta.is_finite() {
            return Err(Error::Config(format!("detector.beta must be >= 0, got {}", self.detector.beta)));
        }
        if !(self.detector.model.phi_lr_scale >= 0.0) || !self.detector.model.phi_lr_scale.is_finite() {
            return Err(Error::Config("detector.model.phi_lr_scale must be >= 0".into()));
        }
        if self.space.head.hidden.contains(&0) || self.detector.model.classifier_hidden.contains(&0) || self.detector.model.phi_hidden == 0 {
            return Err(Error::Config("layer widths must be >= 1".into()));
        }
        Ok(())
    }

    /// Per-stage seeds derived from the global seed.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        derive_labeled(self.seed, stage)
    }

    /// Copy with every stage seed filled in from `self.seed`.
    pub fn seeded(&self) -> Self {
        let mut c = self.clone();
        if let DataSource::Synthetic(s) = &mut c.data {
            s.seed = self.stage_seed("data");
        }
        c.space.train.seed = self.stage_seed("space");
        c.sampler.seed = self.stage_seed("sampler");
        if let Some(i) = &mut c.inlier {
            i.seed = self.stage_seed("inlier");
        }
        c.detector.train.seed = self.stage_seed("detector");
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(PipelineConfig::from_toml("").unwrap(), PipelineConfig::default());
    }

    #[test]
    fn unknown_keys_fail_loud() {
        for doc in [
            "sed = 1",
            "[space.train]\nepoch = 3",
            "[sampler]\nsigma = 0.1",
            "[data]\nsource = \"synthetic\"\nclass = 3",
            "[metrics]\ntimng = true",
            "[variant]\nkind = \"token-noise\"\nsigma1_sq = 0.1\ncount = 3\nextra = 1",
        ] {
            assert!(matches!(PipelineConfig::from_toml(doc), Err(Error::Config(_))), "{doc}");
        }
    }

    #[test]
    fn sections_parse() {
        let doc = r#"
            seed = 7
            output_dir = "runs/a"
            [data]
            source = "synthetic"
            classes = 3
            [space.train]
            epochs = 4
            [space.head]
            hidden = [8, 8]
            [sampler]
            k = 5
            sigma2 = 0.05
            [inlier]
            mode = "id"
            k = 5
            [variant]
            kind = "interpolation"
            alpha = 0.5
            policy = "distinct"
            count = 10
            [detector]
            beta = 2.5
            [detector.model]
            phi_hidden = 16
            [metrics]
            timing = true
        "#;
        let c = PipelineConfig::from_toml(doc).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.space.train.epochs, 4);
        assert_eq!(c.space.head.hidden, vec![8, 8]);
        assert_eq!(c.sampler.k, 5);
        assert_eq!(c.inlier.as_ref().unwrap().mode, SampleMode::Id);
        assert_eq!(
            c.variant,
            Some(Variant::Interpolation {
                alpha: 0.5,
                policy: PairPolicy::Distinct,
                count: 10
            })
        );
        assert_eq!(c.detector.beta, 2.5);
        assert_eq!(c.detector.model.phi_hidden, 16);
        assert!(c.metrics.timing && c.metrics.baselines);
        match &c.data {
            DataSource::Synthetic(s) => assert_eq!(s.classes, 3),
            other => panic!("{other:?}"),
        }
        let again = PipelineConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn overrides() {
        let c = PipelineConfig::from_toml_with(
            "[sampler]\nk = 5",
            &["sampler.k=9".into(), "detector.beta = 0".into(), "output_dir=elsewhere".into()],
        )
        .unwrap();
        assert_eq!(c.sampler.k, 9);
        assert_eq!(c.detector.beta, 0.0);
        assert_eq!(c.output_dir, PathBuf::from("elsewhere"));
        assert!(PipelineConfig::from_toml_with("", &["nokey".into()]).is_err());
        assert!(PipelineConfig::from_toml_with("", &["seed.x=1".into()]).is_err());
        assert!(PipelineConfig::from_toml_with("", &["sampler.bogus=1".into()]).is_err());
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for o in ["detector.beta=-1", "sampler.sigma2=0", "space.train.epochs=0", "sampler.mode=\"id\""] {
            assert!(matches!(PipelineConfig::from_toml_with("", &[o.into()]), Err(Error::Config(_))), "{o}");
        }
        let missing = "[data]\nsource = \"files\"\nid_train = \"/nope\"\nid_test = \"/nope\"\nood_test = \"/nope\"\nprototypes = \"/nope\"";
        assert!(matches!(PipelineConfig::from_toml(missing), Err(Error::Config(_))));
    }

    #[test]
    fn stage_seeds_differ() {
        let c = PipelineConfig::default().seeded();
        let seeds = [c.space.train.seed, c.sampler.seed, c.detector.train.seed];
        assert!(seeds[0] != seeds[1] && seeds[1] != seeds[2] && seeds[0] != seeds[2]);
    }
}
