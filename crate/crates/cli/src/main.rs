//! Command-line front end: training with checkpoint selection, evaluation,
//! single-image prediction, two-variant comparison, synthetic data
//! generation, gradient checking, and training-curve emission.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mrunet_core::data::{load_raster, save_raster_png, write_dataset_dir};
use mrunet_core::harness::{
    compare, compare_multi_seed, emit_curves, full_net_grad_check, gradcheck_battery,
    load_trained, predict, read_runlog_csv, train, CompareOutcome, SyntheticSpec,
    TrainConfig,
};
use mrunet_core::metrics::MetricsReport;
use mrunet_core::net::Variant;
use mrunet_core::synth;
use mrunet_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "mrunet",
    version,
    about = "Train and compare U-Net and mrU-Net binary segmentation models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every run-shaping subcommand. Precedence: built-in
/// defaults, then the --config file, then --desk, then explicit flags.
#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// JSON config file; keys mirror the training-config field names
    #[arg(long)]
    config: Option<PathBuf>,
    /// Desk-scale preset: base 8, batch 4, 300 epochs, 64x64 synthetic data
    #[arg(long)]
    desk: bool,
    /// Architecture: unet or mrunet
    #[arg(long)]
    arch: Option<String>,
    /// Channel width of the first encoder level
    #[arg(long = "base-channels")]
    base_channels: Option<usize>,
    /// Dataset directory containing images/ and masks/
    #[arg(long)]
    data: Option<PathBuf>,
    /// Side length of generated synthetic images
    #[arg(long)]
    size: Option<usize>,
    /// Training batch size
    #[arg(long)]
    batch: Option<usize>,
    /// Maximum number of training epochs
    #[arg(long)]
    epochs: Option<usize>,
    /// Adadelta learning-rate scale
    #[arg(long)]
    lr: Option<f64>,
    /// Seed for initialization and shuffling
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for checkpoints, logs, and reports
    #[arg(long)]
    out: Option<PathBuf>,
    /// Binarization threshold used at evaluation time
    #[arg(long)]
    threshold: Option<f64>,
    /// Resize every image to this square side before use
    #[arg(long)]
    resize: Option<usize>,
    /// Stop after this many epochs without validation improvement
    #[arg(long)]
    patience: Option<usize>,
    /// Stop once best validation soft-DSC reaches this value
    #[arg(long)]
    target: Option<f64>,
}

impl ConfigArgs {
    fn build(&self) -> Result<TrainConfig> {
        let mut config = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)?;
                serde_json::from_str::<TrainConfig>(&text).map_err(|e| {
                    Error::Format(format!("config {}: {e}", path.display()))
                })?
            }
            None => TrainConfig::default(),
        };
        if self.desk {
            config = config.desk();
        }
        if let Some(arch) = &self.arch {
            config.variant = arch.parse::<Variant>()?;
        }
        if let Some(n) = self.base_channels {
            config.base_channels = n;
        }
        if let Some(dir) = &self.data {
            config.dataset = Some(dir.clone());
            config.synthetic = None;
        }
        if let Some(size) = self.size {
            config
                .synthetic
                .get_or_insert_with(SyntheticSpec::default)
                .size = size;
        }
        if let Some(n) = self.batch {
            config.batch_size = n;
        }
        if let Some(n) = self.epochs {
            config.max_epochs = n;
        }
        if let Some(lr) = self.lr {
            config.lr = lr;
        }
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(out) = &self.out {
            config.out_dir = out.clone();
        }
        if let Some(t) = self.threshold {
            config.threshold = t;
        }
        if let Some(s) = self.resize {
            config.resize = Some(s);
        }
        if let Some(p) = self.patience {
            config.patience = Some(p);
        }
        if let Some(t) = self.target {
            config.target_val_sdsc = Some(t);
        }
        // Train-style commands need a data source; default to the desk-scale
        // synthetic set rather than failing on a bare invocation.
        if config.dataset.is_none() && config.synthetic.is_none() {
            config.synthetic = Some(SyntheticSpec::default());
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and keep the best-validation checkpoint
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Evaluate a trained model on one data split
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Directory a previous `train` run wrote
        #[arg(long)]
        model: PathBuf,
        /// Which split to score: train, validation, or test
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Segment a single image with a trained model
    Predict {
        /// Directory a previous `train` run wrote
        #[arg(long)]
        model: PathBuf,
        /// Image to segment (PNG, PGM, or PPM)
        #[arg(long)]
        image: PathBuf,
        /// Output path for the binary mask PNG
        #[arg(long)]
        out: PathBuf,
        /// Also write the foreground-probability map here
        #[arg(long)]
        probs: Option<PathBuf>,
        /// Binarization threshold (default: the training-time value)
        #[arg(long)]
        threshold: Option<f64>,
        /// Resize the image to this square side first
        #[arg(long)]
        resize: Option<usize>,
    },
    /// Train both variants on identical data and compare them
    Compare {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Validation soft-DSC level for the epochs-to-threshold report
        #[arg(long, default_value_t = 0.8)]
        tau: f64,
        /// Repeat over this many consecutive seeds and report medians
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Generate a synthetic ellipse dataset on disk
    Synth {
        /// Directory to create (gets images/ and masks/)
        #[arg(long)]
        out: PathBuf,
        /// Number of samples
        #[arg(long, default_value_t = 24)]
        count: usize,
        /// Square image side (multiple of 8)
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// One to three medium ellipses instead of the multi-scale layout
        #[arg(long)]
        single_scale: bool,
    },
    /// Verify analytic gradients against central differences
    Gradcheck {
        /// Architecture for the full-network check: unet or mrunet
        #[arg(long, default_value = "mrunet")]
        arch: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Worst acceptable relative error
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Plot validation curves from run logs
    Curves {
        /// Output directory for the CSV and SVG files
        #[arg(long)]
        out: PathBuf,
        /// One or more runlog.csv files from training runs
        #[arg(required = true)]
        logs: Vec<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train { cfg } => cmd_train(&cfg),
        Command::Eval { cfg, model, split } => cmd_eval(&cfg, &model, &split),
        Command::Predict {
            model,
            image,
            out,
            probs,
            threshold,
            resize,
        } => cmd_predict(&model, &image, &out, probs.as_deref(), threshold, resize),
        Command::Compare { cfg, tau, seeds } => cmd_compare(&cfg, tau, seeds),
        Command::Synth {
            out,
            count,
            size,
            seed,
            single_scale,
        } => cmd_synth(&out, count, size, seed, !single_scale),
        Command::Gradcheck {
            arch,
            seed,
            tolerance,
        } => cmd_gradcheck(&arch, seed, tolerance),
        Command::Curves { out, logs } => cmd_curves(&out, &logs),
    }
}

fn cmd_train(cfg: &ConfigArgs) -> Result<()> {
    let config = cfg.build()?;
    let outcome = train(&config, |rec| {
        println!(
            "epoch {:>4}  train loss {:.6}  val sDSC {:.6}",
            rec.epoch, rec.train_loss, rec.val_sdsc
        );
    })?;
    println!(
        "best epoch {} with validation sDSC {:.6} after {} epochs; artifacts in {}",
        outcome.summary.best_epoch,
        outcome.summary.best_val_sdsc,
        outcome.summary.epochs_run,
        config.out_dir.display()
    );
    Ok(())
}

fn print_metrics(label: &str, report: &MetricsReport) {
    let ((dsc, dsc_sd), (sens, sens_sd), (spec, spec_sd)) = report.aggregates();
    println!(
        "{label}: {} images  DSC {dsc:.2} +/- {dsc_sd:.2}  sensitivity {sens:.2} +/- \
         {sens_sd:.2}  specificity {spec:.2} +/- {spec_sd:.2}",
        report.rows().len()
    );
}

fn metrics_csv(report: &MetricsReport) -> String {
    let mut text = String::from("id,dsc,sensitivity,specificity\n");
    for (id, m) in report.rows() {
        text.push_str(&format!(
            "{id},{},{},{}\n",
            m.dsc, m.sensitivity, m.specificity
        ));
    }
    text
}

fn cmd_eval(cfg: &ConfigArgs, model_dir: &Path, split: &str) -> Result<()> {
    let config = cfg.build()?;
    let split: mrunet_core::harness::SplitName = split.parse()?;
    let threshold = match cfg.threshold {
        Some(t) => t,
        None => mrunet_core::harness::read_summary(model_dir)?.threshold,
    };
    let report =
        mrunet_core::harness::evaluate_trained(model_dir, &config, split, threshold)?;
    let csv_path = model_dir.join(format!("metrics_{split}.csv"));
    fs::write(&csv_path, metrics_csv(&report))?;
    print_metrics(&split.to_string(), &report);
    println!("per-image metrics written to {}", csv_path.display());
    Ok(())
}

fn cmd_predict(
    model_dir: &Path,
    image_path: &Path,
    out_path: &Path,
    probs_path: Option<&Path>,
    threshold: Option<f64>,
    resize: Option<usize>,
) -> Result<()> {
    let (summary, model) = load_trained(model_dir)?;
    let image = load_raster(image_path)?;
    let threshold = threshold.unwrap_or(summary.threshold);
    let prediction = predict(&model, &summary.norm, &image, threshold, resize)?;
    save_raster_png(&prediction.mask, out_path)?;
    println!("mask written to {}", out_path.display());
    if let Some(p) = probs_path {
        save_raster_png(&prediction.probability, p)?;
        println!("probability map written to {}", p.display());
    }
    Ok(())
}

fn write_compare_artifacts(out: &Path, outcome: &CompareOutcome) -> Result<()> {
    fs::create_dir_all(out)?;
    let json = serde_json::to_string_pretty(&outcome.report)
        .map_err(|e| Error::Format(format!("could not encode the report: {e}")))?;
    fs::write(out.join("compare.json"), json)?;
    for (name, report) in [
        ("unet_validation", &outcome.validation_a),
        ("mrunet_validation", &outcome.validation_b),
        ("unet_test", &outcome.test_a),
        ("mrunet_test", &outcome.test_b),
    ] {
        fs::write(out.join(format!("{name}_metrics.csv")), metrics_csv(report))?;
    }
    Ok(())
}

fn cmd_compare(cfg: &ConfigArgs, tau: f64, seeds: Option<usize>) -> Result<()> {
    let base = cfg.build()?;
    let out = base.out_dir.clone();
    let mut config_a = base.clone();
    config_a.variant = Variant::Unet;
    config_a.out_dir = out.join("unet");
    let mut config_b = base;
    config_b.variant = Variant::Mrunet;
    config_b.out_dir = out.join("mrunet");

    match seeds {
        None | Some(1) => {
            let names = ["unet", "mrunet"];
            let outcome = compare(&config_a, &config_b, tau, |which, rec| {
                println!(
                    "{:<6} epoch {:>4}  train loss {:.6}  val sDSC {:.6}",
                    names[which], rec.epoch, rec.train_loss, rec.val_sdsc
                );
            })?;
            write_compare_artifacts(&out, &outcome)?;
            print!("{}", outcome.report.to_text());
            println!("report written to {}", out.join("compare.json").display());
        }
        Some(n) => {
            let seed_list: Vec<u64> =
                (0..n as u64).map(|i| config_a.seed.wrapping_add(i)).collect();
            let report =
                compare_multi_seed(&config_a, &config_b, tau, &seed_list, |seed, _, rec| {
                    if rec.epoch % 50 == 0 {
                        println!(
                            "seed {seed} epoch {:>4}  val sDSC {:.6}",
                            rec.epoch, rec.val_sdsc
                        );
                    }
                })?;
            fs::create_dir_all(&out)?;
            let json = serde_json::to_string_pretty(&report)
                .map_err(|e| Error::Format(format!("could not encode the report: {e}")))?;
            fs::write(out.join("compare_seeds.json"), json)?;
            print!("{}", report.to_text());
            println!(
                "report written to {}",
                out.join("compare_seeds.json").display()
            );
        }
    }
    Ok(())
}

fn cmd_synth(out: &Path, count: usize, size: usize, seed: u64, multi_scale: bool) -> Result<()> {
    let samples = synth::generate(count, size, seed, multi_scale)?;
    write_dataset_dir(&samples, out)?;
    println!(
        "wrote {count} samples of {size}x{size} to {}",
        out.display()
    );
    Ok(())
}

fn cmd_gradcheck(arch: &str, seed: u64, tolerance: f64) -> Result<()> {
    let variant: Variant = arch.parse()?;
    let mut worst_overall = 0.0f64;
    for (name, err) in gradcheck_battery(seed)? {
        println!("{name:<24} {err:.3e}");
        worst_overall = worst_overall.max(err);
    }
    let full = full_net_grad_check(variant, seed)?;
    println!("{:<24} {full:.3e}", format!("full {arch} loss"));
    worst_overall = worst_overall.max(full);
    if worst_overall > tolerance {
        return Err(Error::Validation(format!(
            "worst relative error {worst_overall:.3e} exceeds tolerance {tolerance:.1e}"
        )));
    }
    println!("all gradients within {tolerance:.1e}");
    Ok(())
}

fn cmd_curves(out: &Path, log_paths: &[PathBuf]) -> Result<()> {
    let mut logs = Vec::with_capacity(log_paths.len());
    for path in log_paths {
        let name = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("run")
            .to_string();
        // Disambiguate identical stems (several runlog.csv files) by the
        // parent directory name.
        let name = if logs.iter().any(|(n, _)| *n == name) || name == "runlog" {
            match path.parent().and_then(|p| p.file_name()).and_then(|s| s.to_str()) {
                Some(parent) => format!("{parent}-{name}"),
                None => name,
            }
        } else {
            name
        };
        logs.push((name, read_runlog_csv(path)?));
    }
    let output = emit_curves(&logs, out)?;
    for p in &output.csv_paths {
        println!("wrote {}", p.display());
    }
    println!("wrote {}", output.svg_path.display());
    Ok(())
}
