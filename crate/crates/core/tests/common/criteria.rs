//! One runner per acceptance criterion. Each returns a one-line summary of
//! what it measured, as `Ok` when the criterion holds and `Err` otherwise.

use std::collections::BTreeMap;
use std::path::Path;

use dream_ood::detector::{total_loss, total_loss_gradient, DetectorModel, DetectorSpec};
use dream_ood::embeddings::EmbeddingMatrix;
use dream_ood::metrics::{auroc, fpr_at_95_tpr, ScoreSet};
use dream_ood::pipeline::config::PipelineConfig;
use dream_ood::pipeline::run::{run, run_stages, MetricRow};
use dream_ood::pipeline::sweep::{sweep, Axis};
use dream_ood::pipeline::synthetic::{generate_synthetic, SyntheticSpec};
use dream_ood::sampler::{
    anchor_stream_seed, filter_max_knn, filter_min_knn, knn_distance, member_knn_distances, sample_candidates,
    select_boundary_anchors, select_inlier_anchors, synthesize, OutlierBatch, SamplerConfig,
};
use dream_ood::seed::rng_from;
use dream_ood::space::{loss_gradient, regularized_loss, EncoderHead, LabeledFeatures};
use dream_ood::vmf::{log_sphere_area, vmf_log_density, vmf_log_normalizer, VmfParams};
use rand::Rng;

use super::*;

pub type Outcome = std::result::Result<String, String>;

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

pub const BENCHMARK_TOML: &str = include_str!("../../../../configs/benchmark.toml");
pub const SMOKE_TOML: &str = include_str!("../../../../configs/smoke.toml");

// ---------------------------------------------------------------- gradients

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOLERANCE: f64 = 1e-5;
/// Inputs whose hidden pre-activations come this close to zero are redrawn.
const KINK_MARGIN: f64 = 1e-3;

fn random_params(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn random_hidden(rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..rng.random_range(0..=2)).map(|_| rng.random_range(2..=16)).collect()
}

/// Max relative error of the alignment-loss gradient on one random
/// configuration, or `None` when it lands too close to a ReLU kink.
pub fn alignment_gradient_error(seed: u64) -> Option<f64> {
    let mut r = rng(seed);
    let d_in = r.random_range(2..=6);
    let m = r.random_range(2..=5);
    let classes = r.random_range(2..=4);
    let n = r.random_range(1..=6);
    let t = r.random_range(0.1..1.0);
    let wd = [0.0, 5e-4, 1e-2][r.random_range(0..3)];

    let mut widths = vec![d_in];
    widths.extend(random_hidden(&mut r));
    widths.push(m);
    let mut head = EncoderHead::init(&widths, seed).unwrap();
    let p = random_params(&mut r, head.mlp().params().len(), 0.6);
    head.mlp_mut().params_mut().copy_from_slice(&p);

    let bank = random_bank(&mut r, classes, m);
    let x = gaussian_rows(&mut r, n, d_in, 1.0);
    let labels = (0..n).map(|_| r.random_range(0..classes)).collect();
    let batch = LabeledFeatures::new(x, labels).unwrap();
    if batch.features().iter_rows().any(|x| min_hidden_preactivation(head.mlp(), x) < KINK_MARGIN) {
        return None;
    }

    let analytic = loss_gradient(&head, &batch, &bank, t, wd).unwrap();
    let mut probe = head.clone();
    let numeric = central_differences(&p, FD_STEP, |theta| {
        probe.mlp_mut().params_mut().copy_from_slice(theta);
        regularized_loss(&probe, &batch, &bank, t, wd).unwrap()
    });
    Some(max_relative_error(&analytic, &numeric))
}

/// Same for the detector objective `CE + β·L_ood + ½·wd·‖θ‖²`.
pub fn detector_gradient_error(seed: u64) -> Option<f64> {
    let mut r = rng(seed);
    let d = r.random_range(2..=6);
    let classes = r.random_range(2..=4);
    let n_id = r.random_range(1..=6);
    let n_ood = r.random_range(1..=6);
    let beta = r.random_range(0.1..3.0);
    let wd = [0.0, 5e-4, 1e-2][r.random_range(0..3)];
    let spec = DetectorSpec {
        classifier_hidden: random_hidden(&mut r),
        phi_hidden: r.random_range(2..=8),
        phi_lr_scale: 0.1,
    };
    let mut model = DetectorModel::init(d, classes, &spec, beta, seed).unwrap();
    let p = random_params(&mut r, model.params().len(), 0.6);
    model.set_params(&p).unwrap();

    let id_x = gaussian_rows(&mut r, n_id, d, 1.0);
    let labels = (0..n_id).map(|_| r.random_range(0..classes)).collect();
    let id = LabeledFeatures::new(id_x, labels).unwrap();
    let ood = gaussian_rows(&mut r, n_ood, d, 2.0);
    for x in id.features().iter_rows().chain(ood.iter_rows()) {
        let energy = dream_ood::detector::energy(&model.logits(x).unwrap());
        if min_hidden_preactivation(model.classifier(), x) < KINK_MARGIN
            || min_hidden_preactivation(model.phi(), &[energy]) < KINK_MARGIN
        {
            return None;
        }
    }

    let analytic = total_loss_gradient(&id, &ood, &model, wd).unwrap();
    let mut probe = model.clone();
    let numeric = central_differences(&p, FD_STEP, |theta| {
        probe.set_params(theta).unwrap();
        let sq: f64 = theta.iter().map(|v| v * v).sum();
        total_loss(&id, &ood, &probe).unwrap().total + 0.5 * wd * sq
    });
    Some(max_relative_error(&analytic, &numeric))
}

/// Worst error over the first `count` kink-free configurations.
pub fn certify(count: usize, error: impl Fn(u64) -> Option<f64>) -> f64 {
    let mut worst = 0.0f64;
    let mut done = 0;
    let mut seed = 0;
    while done < count {
        if let Some(e) = error(seed) {
            worst = worst.max(e);
            done += 1;
        }
        seed += 1;
        assert!(seed < 100 * count as u64, "too many configurations near a kink");
    }
    worst
}

pub fn gradient_certification() -> Outcome {
    let align = certify(25, alignment_gradient_error);
    let det = certify(25, detector_gradient_error);
    verdict(
        align < GRAD_TOLERANCE && det < GRAD_TOLERANCE,
        format!("25+25 configs, max rel err alignment {align:.2e}, detector {det:.2e} (tol {GRAD_TOLERANCE:.0e})"),
    )
}

// ---------------------------------------------------------------------- vMF

/// `Z_3(κ) = κ / (4π sinh κ)`.
pub fn closed_form_z3(kappa: f64) -> f64 {
    kappa / (4.0 * std::f64::consts::PI * kappa.sinh())
}

/// Monte-Carlo estimate of `∫ p dσ` over uniform sphere draws, with its
/// standard error.
pub fn vmf_mass(m: usize, kappa: f64, draws: usize, seed: u64) -> (f64, f64) {
    let params = VmfParams::new(m, kappa).unwrap();
    let mut r = rng(seed);
    let mut mu = vec![0.0; m];
    mu[0] = 1.0;
    let area = log_sphere_area(m).exp();
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    let mut z = vec![0.0; m];
    for _ in 0..draws {
        let mut norm_sq = 0.0f64;
        for v in z.iter_mut() {
            *v = r.sample(StandardNormal);
            norm_sq += *v * *v;
        }
        let norm = norm_sq.sqrt();
        z.iter_mut().for_each(|v| *v /= norm);
        let f = area * vmf_log_density(&z, &mu, &params).unwrap().exp();
        sum += f;
        sum_sq += f * f;
    }
    let n = draws as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean) * n / (n - 1.0);
    (mean, (var / n).sqrt())
}

pub fn vmf_machinery() -> Outcome {
    let mut worst_closed = 0.0f64;
    for kappa in [0.1, 1.0, 2.0, 10.0] {
        let log_z = vmf_log_normalizer(&VmfParams::new(3, kappa).unwrap()).unwrap();
        let rel = (log_z - closed_form_z3(kappa).ln()).exp_m1().abs();
        worst_closed = worst_closed.max(rel);
    }
    let mut ok = worst_closed < 1e-9;
    let mut detail = format!("Z_3 max rel err {worst_closed:.1e} (tol 1e-9); MC mass");
    for (i, (m, kappa)) in [(3, 1.0), (3, 5.0), (8, 10.0)].into_iter().enumerate() {
        let (mass, se) = vmf_mass(m, kappa, 1_000_000, 7 + i as u64);
        let z = (mass - 1.0).abs() / se;
        ok &= z <= 3.0;
        detail.push_str(&format!(" (m={m},κ={kappa}) {mass:.4}±{se:.4} [{z:.2} SE]"));
    }
    verdict(ok, detail)
}

// ---------------------------------------------------------------------- k-NN

/// Compares every k-NN routine against the brute-force oracle on one random
/// instance. Returns a description of the first disagreement.
pub fn knn_instance(seed: u64) -> std::result::Result<(), String> {
    let mut r = rng(seed);
    let n = r.random_range(3..=500);
    let dim = r.random_range(1..=64);
    let k = r.random_range(1..n.min(40));
    // Snap coordinates to a coarse grid on some instances to force ties.
    let coarse = seed.is_multiple_of(3);
    let mut set = gaussian_rows(&mut r, n, dim, 1.0);
    let n_cands = r.random_range(1..=30);
    let mut cands = gaussian_rows(&mut r, n_cands, dim, 1.3);
    if coarse {
        let snap = |m: &EmbeddingMatrix| {
            let data = m.as_slice().iter().map(|v| (v * 2.0).round() / 2.0).collect();
            EmbeddingMatrix::new(m.rows(), m.dim(), data).unwrap()
        };
        set = snap(&set);
        cands = snap(&cands);
    }
    let fail = |what: &str| Err(format!("seed {seed} (n={n}, m={dim}, k={k}): {what}"));

    for q in cands.iter_rows() {
        if knn_distance(q, &set, k, false).unwrap() != brute_knn(q, &set, k, None) {
            return fail("query distance");
        }
    }
    let members = member_knn_distances(&set, k).unwrap();
    for (i, &d) in members.iter().enumerate() {
        if d != brute_knn(set.row(i), &set, k, Some(i)) {
            return fail("member distance");
        }
    }
    for largest in [true, false] {
        let got = if largest {
            filter_max_knn(&cands, &set, k).unwrap()
        } else {
            filter_min_knn(&cands, &set, k).unwrap()
        };
        if (got.index, got.distance) != brute_filter(&cands, &set, k, largest) {
            return fail("filter selection");
        }
        let count = r.random_range(1..=n);
        let anchors = if largest {
            select_boundary_anchors(&set, k, count).unwrap()
        } else {
            select_inlier_anchors(&set, k, count).unwrap()
        };
        if anchors[..] != brute_anchor_order(&set, k, largest)[..count] {
            return fail("anchor order");
        }
    }
    Ok(())
}

pub fn knn_exactness() -> Outcome {
    let failures: Vec<String> = (0..100).filter_map(|s| knn_instance(s).err()).collect();
    verdict(
        failures.is_empty(),
        match failures.first() {
            None => "100 instances (n<=500, m<=64), distances and indices identical to brute force".into(),
            Some(f) => format!("{} of 100 instances differ, first: {f}", failures.len()),
        },
    )
}

// ------------------------------------------------------------------- metrics

pub fn random_score_set(seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut r = rng(seed);
    let n_id = r.random_range(1..=300);
    let n_ood = r.random_range(1..=300);
    if seed.is_multiple_of(2) {
        let levels = r.random_range(1..=6);
        let shift = r.random_range(-2..=2);
        (tie_heavy(&mut r, n_id, levels, 0), tie_heavy(&mut r, n_ood, levels, shift))
    } else {
        let shift = r.random_range(-2.0..2.0);
        (continuous(&mut r, n_id, shift), continuous(&mut r, n_ood, 0.0))
    }
}

pub fn metric_oracles() -> Outcome {
    let mut worst_auroc = 0.0f64;
    let mut fpr_mismatches = 0;
    for seed in 0..200 {
        let (id, ood) = random_score_set(seed);
        let s = ScoreSet::new(id.clone(), ood.clone()).unwrap();
        worst_auroc = worst_auroc.max((auroc(&s).unwrap() - pairwise_auroc(&id, &ood)).abs());
        if fpr_at_95_tpr(&s).unwrap() != sweep_fpr95(&id, &ood) {
            fpr_mismatches += 1;
        }
    }
    verdict(
        worst_auroc <= 1e-12 && fpr_mismatches == 0,
        format!("200 sets (100 tie-heavy), max AUROC err {worst_auroc:.1e} (tol 1e-12), FPR95 mismatches {fpr_mismatches}"),
    )
}

// ------------------------------------------------------------------- sampler

/// Unit-normalized class sets drawn from the synthetic mixture.
pub fn mixture_classes(seed: u64, classes: usize, per_class: usize, dim: usize) -> Vec<EmbeddingMatrix> {
    let data = generate_synthetic(&SyntheticSpec {
        classes,
        d_in: dim,
        m: dim,
        train_per_class: per_class,
        test_per_class: 1,
        ood_components: 1,
        ood_test_per_component: 1,
        seed,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let unit = data.id_train.features().normalized().unwrap();
    (0..classes)
        .map(|c| unit.select_rows(&data.id_train.indices_of(c)))
        .collect()
}

pub fn mixture_bank(seed: u64, classes: usize, dim: usize) -> dream_ood::embeddings::PrototypeBank {
    random_bank(&mut rng(seed ^ 0xba4c), classes, dim)
}

pub fn small_sampler(seed: u64) -> SamplerConfig {
    SamplerConfig {
        k: 10,
        sigma2: 0.05,
        candidates_per_anchor: 12,
        anchors_per_class: 6,
        samples_per_class: 20,
        seed,
        ..SamplerConfig::default()
    }
}

/// Rebuilds every emission's candidate set from its anchor stream and checks
/// that the kept row is the brute-force extreme of that set.
pub fn check_dominance(sets: &[EmbeddingMatrix], batch: &OutlierBatch, cfg: &SamplerConfig) -> std::result::Result<(), String> {
    let largest = cfg.mode == dream_ood::sampler::SampleMode::Ood;
    for (c, set) in sets.iter().enumerate() {
        let anchors = if largest {
            select_boundary_anchors(set, cfg.k, cfg.anchors_per_class).unwrap()
        } else {
            select_inlier_anchors(set, cfg.k, cfg.anchors_per_class).unwrap()
        };
        let a = anchors.len();
        let mut streams: Vec<_> = (0..a).map(|o| rng_from(anchor_stream_seed(cfg.seed, c, o))).collect();
        for (j, &row) in batch.rows_of(c).iter().enumerate() {
            let ordinal = j % a;
            let cands = sample_candidates(set.row(anchors[ordinal]), cfg.sigma2, cfg.candidates_per_anchor, &mut streams[ordinal]);
            let (best, d) = brute_filter(&cands, set, cfg.k, largest);
            if batch.anchor_index[row] != anchors[ordinal] as i64 {
                return Err(format!("class {c} emission {j}: wrong anchor"));
            }
            if batch.knn_distance[row] != d {
                return Err(format!("class {c} emission {j}: recorded {} vs oracle {d}", batch.knn_distance[row]));
            }
            let dominated = cands
                .iter_rows()
                .all(|x| if largest { brute_knn(x, set, cfg.k, None) <= d } else { brute_knn(x, set, cfg.k, None) >= d });
            let direction = dream_ood::embeddings::normalize(cands.row(best)).unwrap();
            let emitted = dream_ood::embeddings::normalize(batch.embeddings.row(row)).unwrap();
            if !dominated || dist(&direction, &emitted) > 1e-12 {
                return Err(format!("class {c} emission {j}: not the extreme candidate"));
            }
        }
    }
    Ok(())
}

pub fn max_norm_error(batch: &OutlierBatch, bank: &dream_ood::embeddings::PrototypeBank) -> f64 {
    batch
        .embeddings
        .iter_rows()
        .zip(&batch.class_id)
        .map(|(r, &c)| (dist(r, &vec![0.0; r.len()]) - bank.original_norm(c)).abs())
        .fold(0.0, f64::max)
}

pub const SIGMA2_GRID: [f64; 4] = [0.01, 0.03, 0.1, 0.3];

/// For each adjacent σ² pair, the number of seeds (of 5) on which the mean
/// recorded distance does not decrease.
pub fn sigma2_monotone_counts() -> [usize; 3] {
    let mut counts = [0; 3];
    for seed in 0..5 {
        let sets = mixture_classes(100 + seed, 3, 80, 8);
        let bank = mixture_bank(seed, 3, 8);
        let means: Vec<f64> = SIGMA2_GRID
            .iter()
            .map(|&sigma2| {
                let b = synthesize(&sets, &bank, &SamplerConfig { sigma2, ..small_sampler(seed) }).unwrap();
                b.knn_distance.iter().sum::<f64>() / b.len() as f64
            })
            .collect();
        for (i, w) in means.windows(2).enumerate() {
            counts[i] += usize::from(w[1] >= w[0]);
        }
    }
    counts
}

pub fn sampler_contracts() -> Outcome {
    let sets = mixture_classes(5, 3, 80, 8);
    let bank = mixture_bank(5, 3, 8);
    let mut problems = Vec::new();
    let mut worst_norm = 0.0f64;
    for mode in [dream_ood::sampler::SampleMode::Ood, dream_ood::sampler::SampleMode::Id] {
        let cfg = SamplerConfig { mode, ..small_sampler(11) };
        let batch = synthesize(&sets, &bank, &cfg).unwrap();
        if let Err(e) = check_dominance(&sets, &batch, &cfg) {
            problems.push(format!("dominance: {e}"));
        }
        worst_norm = worst_norm.max(max_norm_error(&batch, &bank));
        let pool = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let again = pool.install(|| synthesize(&sets, &bank, &cfg).unwrap());
        if again != batch {
            problems.push("rerun differs".into());
        }
    }
    if worst_norm >= 1e-5 {
        problems.push(format!("norm error {worst_norm:.1e}"));
    }
    let counts = sigma2_monotone_counts();
    if counts.iter().any(|&c| c < 3) {
        problems.push(format!("σ² monotone on {counts:?} of 5 seeds"));
    }
    verdict(
        problems.is_empty(),
        if problems.is_empty() {
            format!("dominance ok (ood+id), max norm err {worst_norm:.1e}, deterministic, σ² monotone on {counts:?}/5 seeds")
        } else {
            problems.join("; ")
        },
    )
}

// ----------------------------------------------------------------- pipeline

pub fn benchmark_config(seed: u64) -> PipelineConfig {
    PipelineConfig::from_toml_with(BENCHMARK_TOML, &[format!("seed={seed}")]).unwrap()
}

fn row<'a>(rows: &'a [MetricRow], method: &str) -> &'a MetricRow {
    rows.iter().find(|r| r.method == method).unwrap()
}

pub struct BenchmarkSummary {
    pub dream_auroc: f64,
    pub dream_fpr: f64,
    pub energy_auroc: f64,
    pub energy_fpr: f64,
}

pub fn benchmark(seeds: &[u64]) -> BenchmarkSummary {
    let mut s = BenchmarkSummary {
        dream_auroc: 0.0,
        dream_fpr: 0.0,
        energy_auroc: 0.0,
        energy_fpr: 0.0,
    };
    for &seed in seeds {
        let rows = run(&benchmark_config(seed)).unwrap().rows;
        let dream = row(&rows, "dream-ood");
        let energy = row(&rows, "baseline-energy");
        s.dream_auroc += dream.auroc;
        s.dream_fpr += dream.fpr95;
        s.energy_auroc += energy.auroc;
        s.energy_fpr += energy.fpr95;
    }
    let n = seeds.len() as f64;
    for v in [&mut s.dream_auroc, &mut s.dream_fpr, &mut s.energy_auroc, &mut s.energy_fpr] {
        *v /= n;
    }
    s
}

pub fn behavioral_benchmark() -> Outcome {
    let s = benchmark(&[0, 1, 2, 3, 4]);
    let gain = s.dream_auroc - s.energy_auroc;
    let drop = s.energy_fpr - s.dream_fpr;
    verdict(
        gain >= 0.05 && drop >= 0.05,
        format!(
            "5 seeds: AUROC {:.2} vs energy {:.2} (+{:.2} pts, need 5), FPR95 {:.2} vs {:.2} (-{:.2} pts, need 5)",
            100.0 * s.dream_auroc,
            100.0 * s.energy_auroc,
            100.0 * gain,
            100.0 * s.dream_fpr,
            100.0 * s.energy_fpr,
            100.0 * drop
        ),
    )
}

/// Mean Dream-OOD AUROC per β over `replicates` child seeds.
pub fn beta_ablation(betas: &[f64], replicates: usize) -> BTreeMap<String, f64> {
    let rows = sweep(&benchmark_config(0), Axis::Beta, betas, replicates).unwrap();
    let mut sums: BTreeMap<String, f64> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.metric == "auroc") {
        *sums.entry(r.value.to_string()).or_default() += r.score / replicates as f64;
    }
    sums
}

pub fn ablation_shape() -> Outcome {
    let means = beta_ablation(&[0.0, 1.0, 25.0], 5);
    let (b0, b1, b25) = (means["0"], means["1"], means["25"]);
    verdict(
        b1 >= b0 && b1 >= b25 - 0.01,
        format!(
            "mean AUROC β=0 {:.2}, β=1 {:.2}, β=25 {:.2} (need β=1 >= β=0 and >= β=25 - 1)",
            100.0 * b0,
            100.0 * b1,
            100.0 * b25
        ),
    )
}

/// Relative path and contents of every file under `dir`, sorted by path.
pub fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

pub fn staged_run(toml: &str, dir: &Path, extra: &[String]) -> Vec<MetricRow> {
    let mut overrides = vec![format!("output_dir={:?}", dir.to_string_lossy())];
    overrides.extend_from_slice(extra);
    run_stages(&PipelineConfig::from_toml_with(toml, &overrides).unwrap()).unwrap()
}

pub fn end_to_end_determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    staged_run(SMOKE_TOML, a.path(), &[]);
    staged_run(SMOKE_TOML, b.path(), &[]);
    let (sa, sb) = (snapshot(a.path()), snapshot(b.path()));
    let differing: Vec<&str> = sa
        .iter()
        .zip(&sb)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.as_str())
        .collect();
    verdict(
        sa.len() == sb.len() && differing.is_empty() && !sa.is_empty(),
        format!("{} files compared, {} differ {:?}", sa.len(), differing.len(), differing),
    )
}
