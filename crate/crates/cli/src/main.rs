use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dream_ood::pipeline::config::PipelineConfig;
use dream_ood::pipeline::doeb::Doeb;
use dream_ood::pipeline::run::{self, metrics_csv};
use dream_ood::pipeline::sweep::{sweep, sweep_csv, Axis};
use dream_ood::{Error, Result};

#[derive(Parser)]
#[command(name = "dream-ood", version, about = "Embedding-level outlier synthesis and OOD evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML config file; built-in defaults when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set sampler.k=50`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Global seed (overrides `seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides `output_dir`).
    #[arg(short, long)]
    output_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic dataset as DOEB files.
    GenData(Common),
    /// Train the encoder head and embed the training set.
    FitSpace(Common),
    /// Synthesize boundary outliers (or the configured variant).
    SampleOod(Common),
    /// Synthesize inliers near dense anchors.
    SampleId(Common),
    /// Train the regularized detector and its β=0 baseline.
    TrainDetector(Common),
    /// Score the test splits and write metrics.csv.
    Evaluate(Common),
    /// Every stage in order.
    Run(Common),
    /// Rerun the pipeline across values of one hyperparameter.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// beta, sigma2 or k.
        #[arg(long)]
        axis: String,
        /// Comma-separated values; the axis preset when omitted.
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
        #[arg(long, default_value_t = 5)]
        replicates: usize,
        /// Output CSV; `<output_dir>/sweep_<axis>.csv` when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump a DOEB file as CSV.
    Export {
        input: PathBuf,
        /// Output CSV; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(common: &Common) -> Result<PipelineConfig> {
    let mut overrides = common.overrides.clone();
    if let Some(seed) = common.seed {
        overrides.push(format!("seed={seed}"));
    }
    if let Some(dir) = &common.output_dir {
        let quoted = toml_string(&dir.to_string_lossy());
        overrides.push(format!("output_dir={quoted}"));
    }
    match &common.config {
        Some(path) => PipelineConfig::load(path, &overrides),
        None => PipelineConfig::from_toml_with("", &overrides),
    }
}

fn toml_string(s: &str) -> String {
    let mut out = String::from("\"");
    for ch in s.chars() {
        match ch {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

fn print_paths(paths: &[PathBuf]) {
    for p in paths {
        println!("{}", p.display());
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn export_csv(doc: &Doeb) -> String {
    let mut s = String::new();
    if doc.count > 0 || doc.weights.is_none() {
        let mut header = vec!["row".to_string()];
        if doc.labels.is_some() {
            header.push("label".into());
        }
        if doc.provenance.is_some() {
            header.extend(["class_id", "anchor_index", "knn_distance"].map(String::from));
        }
        header.extend((0..doc.dim).map(|j| format!("x{j}")));
        let _ = writeln!(s, "{}", header.join(","));
        let dim = doc.dim as usize;
        for i in 0..doc.count as usize {
            let mut fields = vec![i.to_string()];
            if let Some(l) = &doc.labels {
                fields.push(l[i].to_string());
            }
            if let Some(p) = &doc.provenance {
                fields.push(p[i].class_id.to_string());
                fields.push(p[i].anchor_index.to_string());
                fields.push(p[i].knn_distance.to_string());
            }
            fields.extend(doc.payload[i * dim..(i + 1) * dim].iter().map(f32::to_string));
            let _ = writeln!(s, "{}", fields.join(","));
        }
    }
    if let Some(ts) = &doc.weights {
        if !s.is_empty() {
            s.push('\n');
        }
        s.push_str("tensor,shape,index,value\n");
        for (t, tensor) in ts.iter().enumerate() {
            let shape = tensor.dims.iter().map(u32::to_string).collect::<Vec<_>>().join("x");
            for (i, v) in tensor.data.iter().enumerate() {
                let _ = writeln!(s, "{t},{shape},{i},{v}");
            }
        }
    }
    s
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(c) => print_paths(&run::stage_gen_data(&load(&c)?)?),
        Command::FitSpace(c) => print_paths(&run::stage_fit_space(&load(&c)?)?),
        Command::SampleOod(c) => print_paths(&run::stage_sample_ood(&load(&c)?)?),
        Command::SampleId(c) => print_paths(&run::stage_sample_id(&load(&c)?)?),
        Command::TrainDetector(c) => print_paths(&run::stage_train_detector(&load(&c)?)?),
        Command::Evaluate(c) => {
            let (rows, _) = run::stage_evaluate(&load(&c)?)?;
            print!("{}", metrics_csv(&rows));
        }
        Command::Run(c) => {
            let rows = run::run_stages(&load(&c)?)?;
            print!("{}", metrics_csv(&rows));
        }
        Command::Sweep {
            common,
            axis,
            values,
            replicates,
            out,
        } => {
            let config = load(&common)?;
            let axis = Axis::parse(&axis)?;
            let values = if values.is_empty() { axis.preset() } else { values };
            let rows = sweep(&config, axis, &values, replicates)?;
            let path = out.unwrap_or_else(|| config.output_dir.join(format!("sweep_{}.csv", axis.name())));
            write_text(&path, &sweep_csv(&rows))?;
            println!("{}", path.display());
        }
        Command::Export { input, out } => {
            let csv = export_csv(&Doeb::read_file(&input)?);
            match out {
                Some(p) => write_text(&p, &csv)?,
                None => {
                    let mut stdout = std::io::stdout().lock();
                    stdout.write_all(csv.as_bytes()).map_err(|e| Error::io("<stdout>", e))?;
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
