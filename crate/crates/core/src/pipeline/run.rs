//! Pipeline orchestration, in memory and as file-backed stages.
//!
//! Every stage output passes through its DOEB encoding before the next stage
//! sees it, so a chain of file-backed stages and an in-memory [`run`] see
//! exactly the same f32-quantized values and report the same metrics.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::detector::{train_detector, DetectorModel, DetectorReport};
use crate::embeddings::{EmbeddingMatrix, PrototypeBank};
use crate::error::{Error, Result};
use crate::metrics::{auroc, fpr_at_95_tpr, id_accuracy, msp_score, energy_baseline_score, tpr95_threshold, ScoreSet};
use crate::sampler::{interpolation_sampler, synthesize, token_noise_sampler, OutlierBatch, SamplerConfig};
use crate::space::{train_space, EncoderHead, LabeledFeatures, SpaceReport};

use super::config::{DataSource, PipelineConfig, Variant};
use super::doeb::Doeb;
use super::synthetic::generate_synthetic;

pub const ID_TRAIN: &str = "id_train.doeb";
pub const ID_TEST: &str = "id_test.doeb";
pub const OOD_TEST: &str = "ood_test.doeb";
pub const PROTOTYPES: &str = "prototypes.doeb";
pub const HEAD: &str = "head.doeb";
pub const TRAIN_EMBEDDINGS: &str = "train_embeddings.doeb";
pub const SPACE_LOSS: &str = "loss.csv";
pub const OUTLIERS: &str = "outliers.doeb";
pub const INLIERS: &str = "inliers.doeb";
pub const DETECTOR: &str = "detector.doeb";
pub const BASELINE: &str = "baseline.doeb";
pub const DETECTOR_LOSS: &str = "detector_loss.csv";
pub const METRICS: &str = "metrics.csv";
pub const THRESHOLDS: &str = "thresholds.csv";

pub const METRICS_HEADER: &str = "method,fpr95,auroc,id_acc,beta,sigma2,k,seed,wall_ms";

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub id_train: LabeledFeatures,
    pub id_test: LabeledFeatures,
    pub ood_test: EmbeddingMatrix,
    pub prototypes: PrototypeBank,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub method: String,
    pub fpr95: f64,
    pub auroc: f64,
    pub id_acc: f64,
    pub beta: f64,
    pub sigma2: f64,
    pub k: usize,
    pub seed: u64,
    pub wall_ms: u64,
}

impl MetricRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.method, self.fpr95, self.auroc, self.id_acc, self.beta, self.sigma2, self.k, self.seed, self.wall_ms
        )
    }
}

/// Threshold keeping 95% of ID test samples, on each method's own scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Threshold {
    pub method: String,
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phase1 {
    pub head: EncoderHead,
    /// Unit embeddings of the ID training set with its labels.
    pub train_embeddings: LabeledFeatures,
    pub report: SpaceReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detectors {
    pub model: DetectorModel,
    pub report: DetectorReport,
    /// β=0 classifier; absent when baselines are disabled.
    pub baseline: Option<DetectorModel>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub data: Dataset,
    pub phase1: Phase1,
    pub outliers: OutlierBatch,
    pub inliers: Option<OutlierBatch>,
    pub detectors: Detectors,
    pub rows: Vec<MetricRow>,
    pub thresholds: Vec<Threshold>,
}

fn quantize_labeled(x: &LabeledFeatures) -> Result<LabeledFeatures> {
    Doeb::from_labeled(x).labeled()
}

fn quantize_matrix(x: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    Doeb::from_embeddings(x).embeddings()
}

fn quantize_batch(x: &OutlierBatch) -> Result<OutlierBatch> {
    Doeb::from_outlier_batch(x).outlier_batch()
}

fn quantize_detector(x: &DetectorModel) -> Result<DetectorModel> {
    Doeb::from_detector(x).detector()
}

/// Generates or loads the dataset named by the config.
pub fn load_data(config: &PipelineConfig) -> Result<Dataset> {
    let config = config.seeded();
    match &config.data {
        DataSource::Synthetic(spec) => {
            let d = generate_synthetic(spec)?;
            Ok(Dataset {
                id_train: quantize_labeled(&d.id_train)?,
                id_test: quantize_labeled(&d.id_test)?,
                ood_test: quantize_matrix(&d.ood_test)?,
                prototypes: Doeb::from_prototypes(&d.prototypes).prototypes()?,
            })
        }
        DataSource::Files(f) => dataset_from_files(&f.id_train, &f.id_test, &f.ood_test, &f.prototypes),
    }
}

fn dataset_from_files(id_train: &Path, id_test: &Path, ood_test: &Path, prototypes: &Path) -> Result<Dataset> {
    let data = Dataset {
        id_train: Doeb::read_file(id_train)?.labeled()?,
        id_test: Doeb::read_file(id_test)?.labeled()?,
        ood_test: Doeb::read_file(ood_test)?.embeddings()?,
        prototypes: Doeb::read_file(prototypes)?.prototypes()?,
    };
    check_dataset(&data)?;
    Ok(data)
}

fn check_dataset(d: &Dataset) -> Result<()> {
    let dim = d.id_train.features().dim();
    for actual in [d.id_test.features().dim(), d.ood_test.dim()] {
        if actual != dim {
            return Err(Error::DimensionMismatch { expected: dim, actual });
        }
    }
    let classes = d.prototypes.num_classes();
    d.id_train.check_labels(classes)?;
    d.id_test.check_labels(classes)
}

/// Trains the encoder head and embeds the ID training set.
pub fn phase1(config: &PipelineConfig, data: &Dataset) -> Result<Phase1> {
    let config = config.seeded();
    let (head, report) = train_space(&data.id_train, &data.prototypes, &config.space.train, &config.space.head)?;
    let head = Doeb::from_head(&head).head()?;
    let embedded = head.embed(data.id_train.features())?;
    let train_embeddings = quantize_labeled(&LabeledFeatures::new(embedded, data.id_train.labels().to_vec())?)?;
    Ok(Phase1 {
        head,
        train_embeddings,
        report,
    })
}

fn class_sets(embeddings: &LabeledFeatures, classes: usize) -> Vec<EmbeddingMatrix> {
    (0..classes)
        .map(|c| embeddings.features().select_rows(&embeddings.indices_of(c)))
        .collect()
}

fn sample(config: &SamplerConfig, embeddings: &LabeledFeatures, bank: &PrototypeBank) -> Result<OutlierBatch> {
    let sets = class_sets(embeddings, bank.num_classes());
    quantize_batch(&synthesize(&sets, bank, config)?)
}

/// Outlier synthesis: the k-NN sampler, or the configured variant.
pub fn phase2(config: &PipelineConfig, embeddings: &LabeledFeatures, bank: &PrototypeBank) -> Result<OutlierBatch> {
    let config = config.seeded();
    let seed = config.stage_seed("variant");
    match &config.variant {
        None => sample(&config.sampler, embeddings, bank),
        Some(Variant::TokenNoise { sigma1_sq, count }) => quantize_batch(&token_noise_sampler(bank, *sigma1_sq, *count, seed)?),
        Some(Variant::Interpolation { alpha, policy, count }) => {
            quantize_batch(&interpolation_sampler(bank, *alpha, *policy, *count, seed)?)
        }
    }
}

/// Inlier synthesis with the `[inlier]` sampler, or its defaults in id mode.
pub fn inlier_phase(config: &PipelineConfig, embeddings: &LabeledFeatures, bank: &PrototypeBank) -> Result<OutlierBatch> {
    let config = config.seeded();
    let sampler = match &config.inlier {
        Some(s) => s.clone(),
        None => SamplerConfig {
            mode: crate::sampler::SampleMode::Id,
            seed: config.stage_seed("inlier"),
            ..SamplerConfig::default()
        },
    };
    sample(&sampler, embeddings, bank)
}

/// ID training set for the detector: the embedded training data, extended
/// with unit-normalized inliers when given.
fn detector_id_set(embeddings: &LabeledFeatures, inliers: Option<&OutlierBatch>) -> Result<LabeledFeatures> {
    let Some(inl) = inliers else {
        return Ok(embeddings.clone());
    };
    let mut features = embeddings.features().clone();
    let mut labels = embeddings.labels().to_vec();
    for (row, &c) in inl.unit_embeddings()?.iter_rows().zip(&inl.class_id) {
        features.push_row(row)?;
        labels.push(c);
    }
    LabeledFeatures::new(features, labels)
}

/// Trains the regularized detector and, if enabled, its β=0 counterpart.
///
/// Detector inputs live on the unit sphere: outliers are renormalized since
/// the token-norm rescale only matters to the decode side.
pub fn train_detectors(
    config: &PipelineConfig,
    embeddings: &LabeledFeatures,
    outliers: &OutlierBatch,
    inliers: Option<&OutlierBatch>,
    classes: usize,
) -> Result<Detectors> {
    let config = config.seeded();
    let id = detector_id_set(embeddings, inliers)?;
    let ood = outliers.unit_embeddings()?;
    let d = &config.detector;
    let (model, report) = train_detector(&id, &ood, &d.train, d.beta, classes, &d.model)?;
    let model = quantize_detector(&model)?;
    let baseline = if !config.metrics.baselines {
        None
    } else if d.beta == 0.0 {
        Some(model.clone())
    } else {
        let (b, _) = train_detector(&id, &ood, &d.train, 0.0, classes, &d.model)?;
        Some(quantize_detector(&b)?)
    };
    Ok(Detectors { model, report, baseline })
}

type Scorer = fn(&DetectorModel, &[f64]) -> Result<f64>;

struct Scored {
    rows: Vec<MetricRow>,
    thresholds: Vec<Threshold>,
}

fn score_model(
    config: &PipelineConfig,
    model: &DetectorModel,
    methods: &[(&str, Scorer)],
    id_test: &LabeledFeatures,
    ood_test: &EmbeddingMatrix,
    out: &mut Scored,
) -> Result<()> {
    let id_acc = id_accuracy(&model.logits_batch(id_test.features())?, id_test.labels())?;
    for (name, score) in methods {
        let start = Instant::now();
        let id_scores = id_test.features().iter_rows().map(|x| score(model, x)).collect::<Result<Vec<_>>>()?;
        let ood_scores = ood_test.iter_rows().map(|x| score(model, x)).collect::<Result<Vec<_>>>()?;
        let set = ScoreSet::new(id_scores, ood_scores)?;
        let (fpr95, au) = (fpr_at_95_tpr(&set)?, auroc(&set)?);
        let wall_ms = if config.metrics.timing {
            start.elapsed().as_millis() as u64
        } else {
            0
        };
        out.thresholds.push(Threshold {
            method: name.to_string(),
            tau: tpr95_threshold(&set.id_scores)?,
        });
        out.rows.push(MetricRow {
            method: name.to_string(),
            fpr95,
            auroc: au,
            id_acc,
            beta: model.beta(),
            sigma2: config.sampler.sigma2,
            k: config.sampler.k,
            seed: config.seed,
            wall_ms,
        });
    }
    Ok(())
}

fn msp(m: &DetectorModel, x: &[f64]) -> Result<f64> {
    Ok(msp_score(&m.logits(x)?))
}

fn energy_score(m: &DetectorModel, x: &[f64]) -> Result<f64> {
    Ok(energy_baseline_score(&m.logits(x)?))
}

fn dream_score(m: &DetectorModel, x: &[f64]) -> Result<f64> {
    m.ood_logit(x)
}

fn dream_probability(m: &DetectorModel, x: &[f64]) -> Result<f64> {
    m.ood_score(x)
}

/// Embeds the test splits and scores every method. The Dream-OOD row ranks
/// by the pre-sigmoid logit, which orders samples exactly like the
/// probability without saturating to ties; its threshold is reported on the
/// probability scale used by `detect`.
pub fn evaluate(
    config: &PipelineConfig,
    data: &Dataset,
    head: &EncoderHead,
    model: &DetectorModel,
    baseline: Option<&DetectorModel>,
) -> Result<(Vec<MetricRow>, Vec<Threshold>)> {
    let id_test = LabeledFeatures::new(head.embed(data.id_test.features())?, data.id_test.labels().to_vec())?;
    let ood_test = head.embed(&data.ood_test)?;
    let mut out = Scored {
        rows: Vec::new(),
        thresholds: Vec::new(),
    };
    score_model(
        config,
        model,
        &[("dream-ood", dream_score), ("msp", msp), ("energy", energy_score)],
        &id_test,
        &ood_test,
        &mut out,
    )?;
    let id_probs = id_test
        .features()
        .iter_rows()
        .map(|x| dream_probability(model, x))
        .collect::<Result<Vec<_>>>()?;
    out.thresholds[0].tau = tpr95_threshold(&id_probs)?;
    if let Some(b) = baseline {
        score_model(
            config,
            b,
            &[("baseline-msp", msp), ("baseline-energy", energy_score)],
            &id_test,
            &ood_test,
            &mut out,
        )?;
    }
    Ok((out.rows, out.thresholds))
}

/// The whole pipeline in memory.
pub fn run(config: &PipelineConfig) -> Result<RunOutput> {
    config.validate()?;
    let data = load_data(config)?;
    let phase1 = phase1(config, &data)?;
    let outliers = phase2(config, &phase1.train_embeddings, &data.prototypes)?;
    let inliers = match config.inlier {
        Some(_) => Some(inlier_phase(config, &phase1.train_embeddings, &data.prototypes)?),
        None => None,
    };
    let detectors = train_detectors(
        config,
        &phase1.train_embeddings,
        &outliers,
        inliers.as_ref(),
        data.prototypes.num_classes(),
    )?;
    let (rows, thresholds) = evaluate(config, &data, &phase1.head, &detectors.model, detectors.baseline.as_ref())?;
    Ok(RunOutput {
        data,
        phase1,
        outliers,
        inliers,
        detectors,
        rows,
        thresholds,
    })
}

// -- CSV ------------------------------------------------------------------

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in rows {
        s.push_str(&r.to_csv());
        s.push('\n');
    }
    s
}

pub fn thresholds_csv(thresholds: &[Threshold]) -> String {
    let mut s = String::from("method,tau\n");
    for t in thresholds {
        let _ = writeln!(s, "{},{}", t.method, t.tau);
    }
    s
}

pub fn space_loss_csv(report: &SpaceReport) -> String {
    let mut s = String::from("epoch,loss\n");
    let _ = writeln!(s, "0,{}", report.initial_loss);
    for (e, l) in report.epoch_losses.iter().enumerate() {
        let _ = writeln!(s, "{},{}", e + 1, l);
    }
    s
}

pub fn detector_loss_csv(report: &DetectorReport) -> String {
    let mut s = String::from("epoch,total,cross_entropy,ood_reg\n");
    for e in 0..report.total.len() {
        let _ = writeln!(s, "{},{},{},{}", e + 1, report.total[e], report.cross_entropy[e], report.ood_reg[e]);
    }
    s
}

// -- file-backed stages ---------------------------------------------------

fn out_path(config: &PipelineConfig, name: &str) -> PathBuf {
    config.output_dir.join(name)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read(config: &PipelineConfig, name: &str) -> Result<Doeb> {
    Doeb::read_file(out_path(config, name))
}

/// Dataset for the file-backed stages: the configured files, or the output
/// of `gen-data` for a synthetic source.
pub fn stage_dataset(config: &PipelineConfig) -> Result<Dataset> {
    match &config.data {
        DataSource::Files(f) => dataset_from_files(&f.id_train, &f.id_test, &f.ood_test, &f.prototypes),
        DataSource::Synthetic(_) => dataset_from_files(
            &out_path(config, ID_TRAIN),
            &out_path(config, ID_TEST),
            &out_path(config, OOD_TEST),
            &out_path(config, PROTOTYPES),
        ),
    }
}

/// Writes the synthetic dataset. Returns the written paths.
pub fn stage_gen_data(config: &PipelineConfig) -> Result<Vec<PathBuf>> {
    if !matches!(config.data, DataSource::Synthetic(_)) {
        return Err(Error::Config("gen-data needs data.source = \"synthetic\"".into()));
    }
    let d = load_data(config)?;
    let files = [
        (ID_TRAIN, Doeb::from_labeled(&d.id_train)),
        (ID_TEST, Doeb::from_labeled(&d.id_test)),
        (OOD_TEST, Doeb::from_embeddings(&d.ood_test)),
        (PROTOTYPES, Doeb::from_prototypes(&d.prototypes)),
    ];
    write_all(config, &files)
}

fn write_all(config: &PipelineConfig, files: &[(&str, Doeb)]) -> Result<Vec<PathBuf>> {
    files
        .iter()
        .map(|(name, doc)| {
            let p = out_path(config, name);
            doc.write_file(&p)?;
            Ok(p)
        })
        .collect()
}

pub fn stage_fit_space(config: &PipelineConfig) -> Result<Vec<PathBuf>> {
    let data = stage_dataset(config)?;
    let p1 = phase1(config, &data)?;
    let mut paths = write_all(
        config,
        &[
            (HEAD, Doeb::from_head(&p1.head)),
            (TRAIN_EMBEDDINGS, Doeb::from_labeled(&p1.train_embeddings)),
        ],
    )?;
    let loss = out_path(config, SPACE_LOSS);
    write_text(&loss, &space_loss_csv(&p1.report))?;
    paths.push(loss);
    Ok(paths)
}

fn stage_inputs(config: &PipelineConfig) -> Result<(LabeledFeatures, PrototypeBank)> {
    let embeddings = read(config, TRAIN_EMBEDDINGS)?.labeled()?;
    let bank = match &config.data {
        DataSource::Files(f) => Doeb::read_file(&f.prototypes)?.prototypes()?,
        DataSource::Synthetic(_) => read(config, PROTOTYPES)?.prototypes()?,
    };
    Ok((embeddings, bank))
}

pub fn stage_sample_ood(config: &PipelineConfig) -> Result<Vec<PathBuf>> {
    let (embeddings, bank) = stage_inputs(config)?;
    let batch = phase2(config, &embeddings, &bank)?;
    write_all(config, &[(OUTLIERS, Doeb::from_outlier_batch(&batch))])
}

pub fn stage_sample_id(config: &PipelineConfig) -> Result<Vec<PathBuf>> {
    let (embeddings, bank) = stage_inputs(config)?;
    let batch = inlier_phase(config, &embeddings, &bank)?;
    write_all(config, &[(INLIERS, Doeb::from_outlier_batch(&batch))])
}

/// Inliers join detector training only when `[inlier]` is configured.
pub fn stage_train_detector(config: &PipelineConfig) -> Result<Vec<PathBuf>> {
    let (embeddings, bank) = stage_inputs(config)?;
    let outliers = read(config, OUTLIERS)?.outlier_batch()?;
    let inliers = match config.inlier {
        Some(_) => Some(read(config, INLIERS)?.outlier_batch()?),
        None => None,
    };
    let det = train_detectors(config, &embeddings, &outliers, inliers.as_ref(), bank.num_classes())?;
    let mut files = vec![(DETECTOR, Doeb::from_detector(&det.model))];
    if let Some(b) = &det.baseline {
        files.push((BASELINE, Doeb::from_detector(b)));
    }
    let mut paths = write_all(config, &files)?;
    let loss = out_path(config, DETECTOR_LOSS);
    write_text(&loss, &detector_loss_csv(&det.report))?;
    paths.push(loss);
    Ok(paths)
}

pub fn stage_evaluate(config: &PipelineConfig) -> Result<(Vec<MetricRow>, Vec<PathBuf>)> {
    let data = stage_dataset(config)?;
    let head = read(config, HEAD)?.head()?;
    let model = read(config, DETECTOR)?.detector()?;
    let baseline = if config.metrics.baselines {
        Some(read(config, BASELINE)?.detector()?)
    } else {
        None
    };
    let (rows, thresholds) = evaluate(config, &data, &head, &model, baseline.as_ref())?;
    let m = out_path(config, METRICS);
    write_text(&m, &metrics_csv(&rows))?;
    let t = out_path(config, THRESHOLDS);
    write_text(&t, &thresholds_csv(&thresholds))?;
    Ok((rows, vec![m, t]))
}

/// Every stage in order through the output directory.
pub fn run_stages(config: &PipelineConfig) -> Result<Vec<MetricRow>> {
    config.validate()?;
    if matches!(config.data, DataSource::Synthetic(_)) {
        stage_gen_data(config)?;
    }
    stage_fit_space(config)?;
    stage_sample_ood(config)?;
    if config.inlier.is_some() {
        stage_sample_id(config)?;
    }
    stage_train_detector(config)?;
    Ok(stage_evaluate(config)?.0)
}
