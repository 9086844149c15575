use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use iedp::config::TrainConfig;
use iedp::dataset::{read_rgb, write_dataset, write_gray8, write_indexed, Dataset, InferenceGuard, MANIFEST_FILE};
use iedp::encoders::{pretrain_from_dataset, PretrainConfig};
use iedp::eval::{argmax_channels, class_colors, depth_to_gray, evaluate, infer_image, write_reports, EvalOptions, EvalResult};
use iedp::gradsuite::{run_suite, Scope};
use iedp::heads::Task;
use iedp::synth::Palette;
use iedp::tensor::set_backward_fault;
use iedp::train::{load_trained_model, RunStatus, Trainer};
use iedp::Error;

/// Corrupts the named op's backward rule for `gradcheck` (harness self-test).
const GRADCHECK_FAULT_ENV: &str = "IEDP_GRADCHECK_FAULT";

#[derive(Parser)]
#[command(name = "iedp", version, about = "Implicit/explicit language-guided dense prediction on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with a manifest.
    GenData {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Comma-separated split fractions: train[,val[,test]].
        #[arg(long, default_value = "0.8,0.2", value_delimiter = ',')]
        splits: Vec<f64>,
        /// Number of classes (6 to 12).
        #[arg(long, default_value_t = 6)]
        classes: usize,
    },
    /// Contrastively pretrain the image/text dual encoder.
    PretrainEncoders {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 600)]
        iters: usize,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long, default_value_t = 2e-3)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train from a key=value config. Trailing `--key value` pairs override
    /// config keys (dashes and underscores are interchangeable).
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Evaluate a trained checkpoint on a split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        /// Output directory (default: beside the checkpoint).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        crop: usize,
        #[arg(long, default_value_t = 43)]
        stride: usize,
        #[arg(long)]
        no_hflip: bool,
        #[arg(long)]
        no_two_scale: bool,
        #[arg(long, default_value_t = 4)]
        visualize: usize,
    },
    /// Finite-difference gradient verification at 64-bit.
    Gradcheck {
        #[arg(long, default_value = "all")]
        scope: String,
        /// Also write the report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict one image.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        crop: usize,
        #[arg(long, default_value_t = 43)]
        stride: usize,
    },
}

/// Process outcome beyond library errors.
enum Failure {
    Lib(Error),
    Verification(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn print_metrics(result: &EvalResult) -> Result<(), Error> {
    if let (Some(rmse), Some(constant)) = (result.metrics.rmse, result.constant_baseline_rmse) {
        log::info!("rmse {rmse:.4} vs constant mean-depth predictor {constant:.4}");
    }
    println!("{}", serde_json::to_string_pretty(&result.metrics)?);
    Ok(())
}

fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>, Error> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let Some(key) = a.strip_prefix("--") else {
            return Err(Error::Config(format!("expected --key value, got {a:?}")));
        };
        let (key, value) = match key.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it.next().ok_or_else(|| Error::Config(format!("--{key} needs a value")))?;
                (key.to_string(), v.clone())
            }
        };
        out.push((key.replace('-', "_"), value));
    }
    Ok(out)
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenData { n, out, size, seed, splits, classes } => {
            let palette = Palette::new(classes)?;
            write_dataset(n, &out, &splits, seed, size, &palette)?;
            println!("{}", out.join(MANIFEST_FILE).display());
        }
        Command::PretrainEncoders { data, out, iters, batch_size, lr, seed } => {
            let cfg = PretrainConfig { iters, batch_size, lr, seed, ..Default::default() };
            let (ckpt, report) = pretrain_from_dataset(&data, &out, &cfg)?;
            println!(
                "top-1 retrieval {:.3} (chance {:.3}) over {} held-out pairs",
                report.top1_retrieval, report.chance, report.heldout_pairs
            );
            println!("{}", ckpt.display());
        }
        Command::Train { config, overrides } => {
            let overrides = parse_overrides(&overrides)?;
            let cfg = TrainConfig::from_file(&config, &overrides)?;
            print!("{}", cfg.to_kv());
            let mut trainer = Trainer::new(cfg)?;
            if trainer.run(None)? == RunStatus::Finished {
                print_metrics(&trainer.finish()?)?;
            }
            println!("{}", trainer.cfg.out_dir.display());
        }
        Command::Eval { checkpoint, data, split, out, crop, stride, no_hflip, no_two_scale, visualize } => {
            let model = load_trained_model(&checkpoint)?;
            let ds = Dataset::open(&data)?;
            let opts = EvalOptions { crop, stride, hflip: !no_hflip, two_scale: !no_two_scale, max_samples: None, visualize };
            let out = out.unwrap_or_else(|| checkpoint.parent().unwrap_or(Path::new(".")).join(format!("eval_{split}")));
            let result = evaluate(&model, &ds, &split, &opts, Some(&out.join("predictions")))?;
            write_reports(&result, &out)?;
            print_metrics(&result)?;
        }
        Command::Gradcheck { scope, out } => {
            let scope: Scope = scope.parse()?;
            if let Ok(op) = std::env::var(GRADCHECK_FAULT_ENV) {
                set_backward_fault(Some(Box::leak(op.into_boxed_str())));
            }
            let reports = run_suite(scope)?;
            for r in &reports {
                let status = if r.passed() { "PASS" } else { "FAIL" };
                println!("{status} {:<28} max rel err {:.3e}", r.label, r.max_rel_err());
                for f in r.failures() {
                    println!("    {} rel err {:.3e}", f.name, f.rel_err);
                }
            }
            if let Some(path) = out {
                let json = serde_json::to_string_pretty(&reports).map_err(Error::from)?;
                std::fs::write(&path, json).map_err(|e| Error::Io { path: path.clone(), source: e })?;
            }
            let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.label.as_str()).collect();
            if !failed.is_empty() {
                return Err(Failure::Verification(format!("gradient check failed: {}", failed.join(", "))));
            }
        }
        Command::Infer { checkpoint, image, out, crop, stride } => {
            let model = load_trained_model(&checkpoint)?;
            let img = read_rgb(&image)?;
            let opts = EvalOptions { crop, stride, two_scale: false, ..Default::default() };
            let pred = {
                let _guard = InferenceGuard::new();
                infer_image(&model, &img, &opts)?
            };
            let (h, w) = (img.shape()[1], img.shape()[2]);
            match model.cfg.task {
                Task::Segmentation => {
                    let labels = argmax_channels(&pred.single);
                    write_indexed(&out, w, h, &labels, &class_colors(model.cfg.num_classes))?
                }
                Task::Depth => write_gray8(&out, w, h, &depth_to_gray(pred.single.data()))?,
            }
            println!("{}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verification(msg)) => {
            eprintln!("verification failure: {msg}");
            ExitCode::from(3)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) => 1,
                Error::LabelLeak(_) => 3,
                _ => 2,
            })
        }
    }
}
