use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use wdfq::diagnostics::{level_report, LevelReport};
use wdfq::head::Detection;
use wdfq::pipeline::dataset::load_dataset;
use wdfq::pipeline::gradcheck::{check_module, Report, MODULES};
use wdfq::pipeline::image::{export_heatmap, load_pair};
use wdfq::pipeline::train::{trace_csv, train_toy};
use wdfq::pipeline::{Model, PipelineConfig};
use wdfq::wavelet::dwt_haar;
use wdfq::{Error, Result, Tensor};

/// Largest relative error `gradcheck` accepts.
const GRADCHECK_TOLERANCE: f64 = 1e-5;

#[derive(Parser)]
#[command(
    name = "wdfq",
    version,
    about = "Wavelet-decoupled multispectral detection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Split a rank-4 tensor file into its four Haar bands.
    Decompose {
        input: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Detect objects in one RGB / IR pair.
    Infer {
        config: PathBuf,
        rgb: PathBuf,
        ir: PathBuf,
        #[arg(long)]
        json: Option<PathBuf>,
        #[arg(long)]
        heatmaps: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Run gradient descent on an annotated dataset and emit the loss trace.
    TrainToy {
        config: PathBuf,
        dataset: PathBuf,
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Compare a module's gradients with central finite differences.
    Gradcheck {
        config: PathBuf,
        #[arg(long, default_value = "all")]
        module: String,
    },
    /// Gaussian statistics of the IR and RGB frequency bands.
    Diag {
        config: PathBuf,
        rgb: PathBuf,
        ir: PathBuf,
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

#[derive(Serialize)]
struct DetectionFile<'a> {
    detections: &'a [Detection],
}

#[derive(Serialize)]
struct Skipped {
    level: usize,
    reason: String,
}

#[derive(Serialize)]
struct DiagFile {
    levels: Vec<LevelReport>,
    skipped: Vec<Skipped>,
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("plain data serializes") + "\n"
}

fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => write(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    if threads == 0 {
        return Err(Error::Argument("--threads must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Argument(format!("cannot start thread pool: {e}")))?;
    pool.install(f)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Decompose { input, out_dir } => {
            let x = Tensor::load(&input)?;
            let b = dwt_haar(&x)?;
            fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
            for (name, t) in [("ll", &b.ll), ("lh", &b.lh), ("hl", &b.hl), ("hh", &b.hh)] {
                t.save(&out_dir.join(format!("{name}.tensor")))?;
            }
            Ok(())
        }
        Command::Infer {
            config,
            rgb,
            ir,
            json,
            heatmaps,
            threads,
        } => {
            let cfg = PipelineConfig::load(&config)?;
            let (rgb, ir) = load_pair(&rgb, &ir)?;
            let model = Model::new(cfg)?;
            let out = with_threads(threads, || model.infer(&rgb, &ir))?;
            if let Some(dir) = heatmaps {
                fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                let im = &out.intermediates;
                for (i, (low, high)) in im.low.iter().zip(&im.high).enumerate() {
                    export_heatmap(low, &dir.join(format!("low_l{}.pgm", i + 3)))?;
                    export_heatmap(high, &dir.join(format!("high_l{}.pgm", i + 3)))?;
                }
            }
            emit(
                json.as_deref(),
                &to_json(&DetectionFile {
                    detections: &out.detections,
                }),
            )
        }
        Command::TrainToy {
            config,
            dataset,
            trace,
            threads,
        } => {
            let cfg = PipelineConfig::load(&config)?;
            let samples = load_dataset(&dataset, cfg.classes)?;
            let steps = cfg.steps;
            let mut model = Model::new(cfg)?;
            let rows = with_threads(threads, || train_toy(&mut model, &samples, steps))?;
            emit(trace.as_deref(), &trace_csv(&rows))
        }
        Command::Gradcheck { config, module } => {
            let cfg = PipelineConfig::load(&config)?;
            let names: Vec<&str> = if module == "all" {
                MODULES.to_vec()
            } else {
                vec![module.as_str()]
            };
            let reports: Vec<Report> = names
                .iter()
                .map(|m| check_module(m, cfg.seed))
                .collect::<Result<_>>()?;
            print!("{}", to_json(&reports));
            match reports
                .iter()
                .find(|r| r.max_rel_error.is_nan() || r.max_rel_error > GRADCHECK_TOLERANCE)
            {
                Some(r) => Err(Error::Numeric(format!(
                    "{}: relative error {:e} exceeds {GRADCHECK_TOLERANCE:e}",
                    r.module, r.max_rel_error
                ))),
                None => Ok(()),
            }
        }
        Command::Diag {
            config,
            rgb,
            ir,
            json,
        } => {
            let cfg = PipelineConfig::load(&config)?;
            let (rgb, ir) = load_pair(&rgb, &ir)?;
            let model = Model::new(cfg)?;
            let im = model.infer(&rgb, &ir)?.intermediates;
            let mut file = DiagFile {
                levels: Vec::new(),
                skipped: Vec::new(),
            };
            for i in 0..3 {
                let level = i + 3;
                match level_report(
                    level,
                    &im.ll_ir[i],
                    &im.ll_rgb[i],
                    &im.high_ir[i],
                    &im.high_rgb[i],
                ) {
                    Ok(r) => file.levels.push(r),
                    Err(e @ Error::Statistics(_)) => file.skipped.push(Skipped {
                        level,
                        reason: e.to_string(),
                    }),
                    Err(e) => return Err(e),
                }
            }
            emit(json.as_deref(), &to_json(&file))
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.code());
            ExitCode::from(e.status() as u8)
        }
    }
}
