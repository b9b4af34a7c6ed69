//! Orchestration: configuration, data preparation, the training loop with
//! best-checkpoint selection, evaluation, prediction, two-model comparison,
//! and training-curve emission.
//!
//! Everything here is deterministic given `(config, seed)` when run on a
//! single thread; the only nondeterministic output is the wall-clock column
//! of the run log.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{self, ImageSample, NormRoi, NormalizationParams, Raster, SplitSets};
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check, rel_err};
use crate::loss::{soft_dice_coefficient, soft_dice_loss, DEFAULT_SIGMA};
use crate::metrics::{binarize, MetricsReport, segmentation_metrics};
use crate::net::{build_model, forward_graph, ArchitectureSpec, Model, Variant};
use crate::optim::{self, Adadelta};
use crate::stats::paired_t_one_tailed;
use crate::synth;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// File names within a training output directory.
pub const CHECKPOINT_FILE: &str = "best.ckpt";
pub const RUNLOG_FILE: &str = "runlog.csv";
pub const SUMMARY_FILE: &str = "summary.json";

pub const DEFAULT_BATCH_SIZE: usize = 16;
pub const DEFAULT_MAX_EPOCHS: usize = 5000;
pub const DEFAULT_THRESHOLD: f64 = 0.5;
/// Default threshold for the epochs-to-threshold training-rate report.
pub const DEFAULT_TAU: f64 = 0.8;

/// Desk-scale defaults: small enough to train on a laptop CPU in minutes.
pub const DESK_BASE_CHANNELS: usize = 8;
pub const DESK_BATCH_SIZE: usize = 4;
pub const DESK_MAX_EPOCHS: usize = 300;
pub const DESK_IMAGE_SIZE: usize = 64;

// Distinct streams derived from the one user-facing seed.
const SEED_INIT: u64 = 0x9E37_79B9_7F4A_7C15;
const SEED_SHUFFLE: u64 = 0x6A09_E667_F3BC_C909;

/// Parameters of the bundled synthetic ellipse dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    /// Square image side; must be a multiple of 8 and at least 16.
    pub size: usize,
    pub train: usize,
    pub validation: usize,
    pub test: usize,
    /// One large plus several small ellipses per image instead of
    /// medium-sized ones only.
    pub multi_scale: bool,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            size: DESK_IMAGE_SIZE,
            train: 16,
            validation: 4,
            test: 4,
            multi_scale: true,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size < 16 || self.size % 8 != 0 {
            return Err(Error::Validation(format!(
                "synthetic size must be a multiple of 8 and at least 16, got {}",
                self.size
            )));
        }
        if self.multi_scale && self.size < 24 {
            return Err(Error::Validation(format!(
                "multi-scale synthetic layouts need size of at least 24, got {}",
                self.size
            )));
        }
        for (label, n) in [
            ("train", self.train),
            ("validation", self.validation),
            ("test", self.test),
        ] {
            if n == 0 {
                return Err(Error::Validation(format!(
                    "synthetic {label} count must be at least 1"
                )));
            }
        }
        Ok(())
    }
}

/// Everything a training run needs. Serializes to/from the JSON documents
/// the CLI's `--config` accepts; field names match the JSON keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    pub base_channels: usize,
    /// Directory with `images/` and `masks/`; mutually exclusive with
    /// `synthetic`.
    pub dataset: Option<PathBuf>,
    pub synthetic: Option<SyntheticSpec>,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Binarization threshold used at evaluation time.
    pub threshold: f64,
    /// Soft-Dice smoothing constant.
    pub sigma: f64,
    /// Pixels the normalization statistics are drawn from.
    pub norm_roi: NormRoi,
    /// Resize every image (and mask) to this square side before use.
    pub resize: Option<usize>,
    /// Stop after this many epochs without validation improvement.
    pub patience: Option<usize>,
    /// Stop once best validation soft-DSC reaches this value.
    pub target_val_sdsc: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::Unet,
            base_channels: 64,
            dataset: None,
            synthetic: None,
            batch_size: DEFAULT_BATCH_SIZE,
            max_epochs: DEFAULT_MAX_EPOCHS,
            lr: optim::DEFAULT_LR,
            seed: 1,
            out_dir: PathBuf::from("out"),
            threshold: DEFAULT_THRESHOLD,
            sigma: DEFAULT_SIGMA,
            norm_roi: NormRoi::WholeImage,
            resize: None,
            patience: None,
            target_val_sdsc: None,
        }
    }
}

impl TrainConfig {
    /// Desk-scale defaults: base 8, batch 4, 300 epochs, and (when no
    /// dataset directory is given) the default 64x64 synthetic set.
    pub fn desk(mut self) -> Self {
        self.base_channels = DESK_BASE_CHANNELS;
        self.batch_size = DESK_BATCH_SIZE;
        self.max_epochs = DESK_MAX_EPOCHS;
        if self.dataset.is_none() && self.synthetic.is_none() {
            self.synthetic = Some(SyntheticSpec::default());
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        // Probe the architecture parameters; the input channel count is
        // discovered from the data later.
        ArchitectureSpec::new(self.variant, self.base_channels, 1)?;
        if self.batch_size < 1 {
            return Err(Error::Validation("batch_size must be at least 1".into()));
        }
        if self.max_epochs < 1 {
            return Err(Error::Validation("max_epochs must be at least 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Validation(format!(
                "lr must be a positive finite number, got {}",
                self.lr
            )));
        }
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::Validation(format!(
                "sigma must be a positive finite number, got {}",
                self.sigma
            )));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Validation(format!(
                "threshold must lie strictly between 0 and 1, got {}",
                self.threshold
            )));
        }
        match (&self.dataset, &self.synthetic) {
            (None, None) => {
                return Err(Error::Validation(
                    "config needs either a dataset directory or a synthetic spec".into(),
                ))
            }
            (Some(_), Some(_)) => {
                return Err(Error::Validation(
                    "dataset directory and synthetic spec are mutually exclusive".into(),
                ))
            }
            (None, Some(spec)) => spec.validate()?,
            (Some(_), None) => {}
        }
        if let Some(s) = self.resize {
            if s < 16 || s % 8 != 0 {
                return Err(Error::Validation(format!(
                    "resize must be a multiple of 8 and at least 16, got {s}"
                )));
            }
        }
        if self.patience == Some(0) {
            return Err(Error::Validation("patience must be at least 1".into()));
        }
        if let Some(t) = self.target_val_sdsc {
            if !(t > 0.0 && t <= 1.0) {
                return Err(Error::Validation(format!(
                    "target_val_sdsc must lie in (0, 1], got {t}"
                )));
            }
        }
        Ok(())
    }
}

/// One image ready for the network: normalized input planes plus a 0/1
/// float mask.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub id: String,
    /// `[C, H, W]` normalized intensities.
    pub input: Tensor<f32>,
    /// Row-major `H*W` mask, each element exactly 0.0 or 1.0.
    pub mask: Vec<f32>,
    pub height: usize,
    pub width: usize,
}

/// The three prepared splits plus the normalization derived from training
/// images only.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub train: Vec<PreparedSample>,
    pub validation: Vec<PreparedSample>,
    pub test: Vec<PreparedSample>,
    pub norm: NormalizationParams,
    pub in_channels: usize,
}

/// Load or generate raw samples and partition them. Dataset directories
/// are shuffled and split 25% test / 10% validation; the synthetic spec
/// carries explicit per-split counts.
pub fn gather_splits(config: &TrainConfig) -> Result<SplitSets> {
    config.validate()?;
    if let Some(dir) = &config.dataset {
        let mut samples = data::load_dataset_dir(dir)?;
        if let Some(side) = config.resize {
            samples = samples
                .into_iter()
                .map(|s| resize_sample(s, side))
                .collect::<Result<Vec<_>>>()?;
        }
        data::split_dataset(samples, config.seed)
    } else {
        let spec = config.synthetic.as_ref().expect("validated above");
        let total = spec.train + spec.validation + spec.test;
        let mut samples = synth::generate(total, spec.size, config.seed, spec.multi_scale)?;
        let test = samples.split_off(spec.train + spec.validation);
        let validation = samples.split_off(spec.train);
        Ok(SplitSets {
            train: samples,
            validation,
            test,
        })
    }
}

fn resize_sample(s: ImageSample, side: usize) -> Result<ImageSample> {
    let image = data::resize_bicubic(&s.image, side, side)?;
    let mask = data::resize_mask(&s.mask, side, side)?;
    ImageSample::new(s.id, image, mask)
}

/// Normalize and pack raw splits. The normalization statistics come from
/// the training split alone, so validation and test pixels cannot leak
/// into them.
pub fn prepare_splits(splits: &SplitSets, roi: NormRoi) -> Result<PreparedData> {
    if splits.train.is_empty() {
        return Err(Error::Validation("training split is empty".into()));
    }
    if splits.validation.is_empty() {
        return Err(Error::Validation("validation split is empty".into()));
    }
    let first = &splits.train[0].image;
    let (channels, height, width) = (first.channels(), first.height(), first.width());
    if height % 8 != 0 || width % 8 != 0 {
        return Err(Error::Validation(format!(
            "images must have sides divisible by 8 (three pooling stages), got \
             {width}x{height}; consider the resize option"
        )));
    }
    for s in splits
        .train
        .iter()
        .chain(&splits.validation)
        .chain(&splits.test)
    {
        if s.image.channels() != channels
            || s.image.height() != height
            || s.image.width() != width
        {
            return Err(Error::Validation(format!(
                "all images must share dimensions and channel count; {:?} is \
                 {}x{}x{}, expected {}x{}x{}; consider the resize option",
                s.id,
                s.image.width(),
                s.image.height(),
                s.image.channels(),
                width,
                height,
                channels
            )));
        }
    }
    let norm = data::compute_norm_params(&splits.train, roi)?;
    let pack = |set: &[ImageSample]| -> Result<Vec<PreparedSample>> {
        set.iter()
            .map(|s| {
                Ok(PreparedSample {
                    id: s.id.clone(),
                    input: data::normalize(&s.image, &norm)?,
                    mask: data::mask_to_float(&s.mask),
                    height: s.image.height(),
                    width: s.image.width(),
                })
            })
            .collect()
    };
    Ok(PreparedData {
        train: pack(&splits.train)?,
        validation: pack(&splits.validation)?,
        test: pack(&splits.test)?,
        norm,
        in_channels: channels,
    })
}

/// `gather_splits` followed by `prepare_splits`.
pub fn prepare_data(config: &TrainConfig) -> Result<PreparedData> {
    prepare_splits(&gather_splits(config)?, config.norm_roi)
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunLogRecord {
    pub epoch: usize,
    /// Mean per-image training loss over the epoch.
    pub train_loss: f64,
    /// Mean validation soft-DSC (probabilities, no thresholding).
    pub val_sdsc: f64,
    /// Wall-clock seconds since the start of the run.
    pub seconds: f64,
}

/// Everything written at the end of training, enough to reload and use the
/// model without the original config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub variant: Variant,
    pub base_channels: usize,
    pub in_channels: usize,
    pub seed: u64,
    pub sigma: f64,
    pub threshold: f64,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_sdsc: f64,
    pub norm: NormalizationParams,
}

/// Result of a training run: the best-validation model plus its paperwork.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model<f32>,
    pub summary: TrainSummary,
    pub log: Vec<RunLogRecord>,
}

/// Mean soft-DSC of `model` over `samples`, computed on raw probabilities.
/// This is the model-selection score, evaluated identically during and
/// after training so a reloaded checkpoint reproduces its logged value
/// exactly.
pub fn mean_validation_sdsc(
    model: &Model<f32>,
    samples: &[PreparedSample],
    sigma: f32,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Validation("validation split is empty".into()));
    }
    let mut sum = 0.0f64;
    for s in samples {
        let probs = forward_sample(model, s)?;
        let plane = s.height * s.width;
        let fg = &probs.data()[plane..2 * plane];
        sum += f64::from(soft_dice_coefficient(fg, &s.mask, sigma)?);
    }
    Ok(sum / samples.len() as f64)
}

fn forward_sample(model: &Model<f32>, s: &PreparedSample) -> Result<Tensor<f32>> {
    let mut shape = vec![1];
    shape.extend_from_slice(s.input.shape());
    let batch = Tensor::new(shape, s.input.data().to_vec())?;
    model.forward(&batch)
}

fn batch_of(samples: &[PreparedSample], idxs: &[usize]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let first = &samples[idxs[0]];
    let (h, w) = (first.height, first.width);
    let c = first.input.shape()[0];
    let mut xs = Vec::with_capacity(idxs.len() * c * h * w);
    let mut ys = Vec::with_capacity(idxs.len() * h * w);
    for &i in idxs {
        xs.extend_from_slice(samples[i].input.data());
        ys.extend_from_slice(&samples[i].mask);
    }
    Ok((
        Tensor::new(vec![idxs.len(), c, h, w], xs)?,
        Tensor::new(vec![idxs.len(), 1, h, w], ys)?,
    ))
}

/// Prepare the data for `config` and train. `on_epoch` observes each run
/// log record as it is produced (the CLI uses it for progress lines).
pub fn train(config: &TrainConfig, on_epoch: impl FnMut(&RunLogRecord)) -> Result<TrainOutcome> {
    let data = prepare_data(config)?;
    train_prepared(config, &data, on_epoch)
}

/// The training loop proper, on already-prepared data.
///
/// Per epoch: shuffle the training set (seeded), iterate batches of
/// `batch_size` keeping the final partial batch, and for each batch run
/// forward, soft-Dice loss, backward, and one Adadelta step. After the
/// batches, score the validation split by mean soft-DSC on probabilities;
/// whenever that strictly exceeds the best seen so far, persist a
/// checkpoint. The returned model is the reloaded best checkpoint, so
/// re-evaluating it reproduces the logged best value exactly.
pub fn train_prepared(
    config: &TrainConfig,
    data: &PreparedData,
    mut on_epoch: impl FnMut(&RunLogRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    if data.train.is_empty() {
        return Err(Error::Validation("training split is empty".into()));
    }
    if data.validation.is_empty() {
        return Err(Error::Validation("validation split is empty".into()));
    }
    let spec = ArchitectureSpec::new(config.variant, config.base_channels, data.in_channels)?;
    let mut model = build_model::<f32>(spec, config.seed.wrapping_add(SEED_INIT))?;
    let mut optimizer = Adadelta::new(
        optim::DEFAULT_RHO as f32,
        optim::DEFAULT_EPS as f32,
        config.lr as f32,
    )?;
    fs::create_dir_all(&config.out_dir)?;
    let ckpt_path = config.out_dir.join(CHECKPOINT_FILE);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(SEED_SHUFFLE));
    let sigma = config.sigma as f32;
    let start = Instant::now();
    let mut log: Vec<RunLogRecord> = Vec::new();
    let mut best_val = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut order: Vec<usize> = (0..data.train.len()).collect();

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0f64;
        let mut images_seen = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let (batch, labels) = batch_of(&data.train, chunk)?;
            let mut tape = Tape::new();
            let (probs, param_vars) = model.forward_taped(&mut tape, &batch)?;
            if !tape.value(probs)?.all_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite activations at epoch {epoch} after {images_seen} images"
                )));
            }
            let (loss_var, loss_value) = soft_dice_loss(&mut tape, probs, &labels, sigma)?;
            if !loss_value.loss.is_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite loss at epoch {epoch} after {images_seen} images"
                )));
            }
            let grads = tape.backward(loss_var)?;
            let mut grad_map: BTreeMap<String, Vec<f32>> = BTreeMap::new();
            for (name, var) in &param_vars {
                grad_map.insert(name.clone(), grads.wrt(*var)?.to_vec());
            }
            optimizer.step(model.params_mut(), &grad_map)?;
            for &s in &loss_value.per_image_sdsc {
                loss_sum += 1.0 - f64::from(s);
            }
            images_seen += chunk.len();
        }
        let val_sdsc = mean_validation_sdsc(&model, &data.validation, sigma)?;
        if val_sdsc > best_val {
            best_val = val_sdsc;
            best_epoch = epoch;
            checkpoint::save_weights(&model, &ckpt_path)?;
        }
        let record = RunLogRecord {
            epoch,
            train_loss: loss_sum / images_seen as f64,
            val_sdsc,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        log.push(record);
        if config.target_val_sdsc.is_some_and(|t| best_val >= t) {
            break;
        }
        if config
            .patience
            .is_some_and(|p| epoch.saturating_sub(best_epoch) >= p)
        {
            break;
        }
    }

    let model = checkpoint::load_weights::<f32>(&ckpt_path, &spec)?;
    let summary = TrainSummary {
        variant: config.variant,
        base_channels: config.base_channels,
        in_channels: data.in_channels,
        seed: config.seed,
        sigma: config.sigma,
        threshold: config.threshold,
        epochs_run: log.len(),
        best_epoch,
        best_val_sdsc: best_val,
        norm: data.norm,
    };
    write_runlog_csv(&config.out_dir.join(RUNLOG_FILE), &log)?;
    write_summary(&config.out_dir, &summary)?;
    Ok(TrainOutcome {
        model,
        summary,
        log,
    })
}

const RUNLOG_HEADER: &str = "epoch,train_loss,val_sdsc,seconds";

/// Write a run log as CSV. Losses and scores use Rust's shortest
/// round-trip float formatting, so reading the file back loses nothing.
pub fn write_runlog_csv(path: &Path, log: &[RunLogRecord]) -> Result<()> {
    if log.is_empty() {
        return Err(Error::Validation("run log is empty".into()));
    }
    let mut out = String::from(RUNLOG_HEADER);
    out.push('\n');
    for r in log {
        writeln!(
            out,
            "{},{},{},{:.3}",
            r.epoch, r.train_loss, r.val_sdsc, r.seconds
        )
        .expect("writing to a String cannot fail");
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_runlog_csv(path: &Path) -> Result<Vec<RunLogRecord>> {
    parse_runlog_csv(&fs::read_to_string(path)?)
}

/// Parse the CSV written by `write_runlog_csv`, enforcing the record
/// invariants (strictly increasing epochs, scores within [0, 1]).
pub fn parse_runlog_csv(text: &str) -> Result<Vec<RunLogRecord>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == RUNLOG_HEADER => {}
        other => {
            return Err(Error::Format(format!(
                "run log must start with {RUNLOG_HEADER:?}, got {other:?}"
            )))
        }
    }
    let mut log = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::Format(format!(
                "run log line {} has {} fields, expected 4",
                i + 2,
                fields.len()
            )));
        }
        let bad = |what: &str| Error::Format(format!("run log line {}: bad {what}", i + 2));
        let record = RunLogRecord {
            epoch: fields[0].parse().map_err(|_| bad("epoch"))?,
            train_loss: fields[1].parse().map_err(|_| bad("train_loss"))?,
            val_sdsc: fields[2].parse().map_err(|_| bad("val_sdsc"))?,
            seconds: fields[3].parse().map_err(|_| bad("seconds"))?,
        };
        if let Some(prev) = log.last() {
            let prev: &RunLogRecord = prev;
            if record.epoch <= prev.epoch {
                return Err(Error::Format(format!(
                    "epochs must strictly increase, got {} after {}",
                    record.epoch, prev.epoch
                )));
            }
        }
        if !(0.0..=1.0).contains(&record.val_sdsc) {
            return Err(Error::Format(format!(
                "val_sdsc must lie in [0, 1], got {}",
                record.val_sdsc
            )));
        }
        log.push(record);
    }
    Ok(log)
}

pub fn write_summary(dir: &Path, summary: &TrainSummary) -> Result<()> {
    let mut text = serde_json::to_string_pretty(summary)
        .map_err(|e| Error::Format(format!("could not serialize summary: {e}")))?;
    text.push('\n');
    fs::write(dir.join(SUMMARY_FILE), text)?;
    Ok(())
}

pub fn read_summary(dir: &Path) -> Result<TrainSummary> {
    let text = fs::read_to_string(dir.join(SUMMARY_FILE))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("could not parse summary: {e}")))
}

/// Reload a finished training directory: its summary and best checkpoint.
pub fn load_trained(dir: &Path) -> Result<(TrainSummary, Model<f32>)> {
    let summary = read_summary(dir)?;
    let spec = ArchitectureSpec::new(summary.variant, summary.base_channels, summary.in_channels)?;
    let model = checkpoint::load_weights(&dir.join(CHECKPOINT_FILE), &spec)?;
    Ok((summary, model))
}

/// Which of the three splits an operation should act on.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum SplitName {
    Train,
    Validation,
    Test,
}

impl std::str::FromStr for SplitName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "validation" | "val" => Ok(SplitName::Validation),
            "test" => Ok(SplitName::Test),
            other => Err(Error::Validation(format!(
                "unknown split {other:?}, expected train, validation, or test"
            ))),
        }
    }
}

impl std::fmt::Display for SplitName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SplitName::Train => "train",
            SplitName::Validation => "validation",
            SplitName::Test => "test",
        })
    }
}

/// Threshold the model on each sample and score it against the reference
/// mask, producing one row per image plus mean +/- sd aggregates.
pub fn evaluate_prepared(
    model: &Model<f32>,
    samples: &[PreparedSample],
    threshold: f64,
) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::Validation("cannot evaluate an empty split".into()));
    }
    let mut rows = Vec::with_capacity(samples.len());
    for s in samples {
        let probs = forward_sample(model, s)?;
        let plane = s.height * s.width;
        let fg = &probs.data()[plane..2 * plane];
        let pred = binarize(fg, threshold as f32)?;
        let reference: Vec<bool> = s.mask.iter().map(|&v| v >= 0.5).collect();
        rows.push((s.id.clone(), segmentation_metrics(&pred, &reference)?));
    }
    MetricsReport::new(rows)
}

/// Evaluate the model stored in `dir` on one split of the data described
/// by `config`, normalizing with the parameters recorded at training time.
pub fn evaluate_trained(
    dir: &Path,
    config: &TrainConfig,
    split: SplitName,
    threshold: f64,
) -> Result<MetricsReport> {
    let (summary, model) = load_trained(dir)?;
    let splits = gather_splits(config)?;
    let raw = match split {
        SplitName::Train => &splits.train,
        SplitName::Validation => &splits.validation,
        SplitName::Test => &splits.test,
    };
    let prepared = pack_with_norm(raw, &summary.norm)?;
    evaluate_prepared(&model, &prepared, threshold)
}

fn pack_with_norm(samples: &[ImageSample], norm: &NormalizationParams) -> Result<Vec<PreparedSample>> {
    samples
        .iter()
        .map(|s| {
            Ok(PreparedSample {
                id: s.id.clone(),
                input: data::normalize(&s.image, norm)?,
                mask: data::mask_to_float(&s.mask),
                height: s.image.height(),
                width: s.image.width(),
            })
        })
        .collect()
}

/// A predicted mask plus the raw foreground-probability map.
#[derive(Clone, Debug)]
pub struct Prediction {
    /// Single-channel, values exactly 0 or 255.
    pub mask: Raster,
    /// Single-channel, probability times 255, rounded.
    pub probability: Raster,
}

/// Segment one image. The image is optionally resized to `resize` square,
/// must then have sides divisible by 8, and is normalized with the
/// training-time parameters.
pub fn predict(
    model: &Model<f32>,
    norm: &NormalizationParams,
    image: &Raster,
    threshold: f64,
    resize: Option<usize>,
) -> Result<Prediction> {
    let owned;
    let image = match resize {
        Some(side) => {
            if side < 16 || side % 8 != 0 {
                return Err(Error::Validation(format!(
                    "resize must be a multiple of 8 and at least 16, got {side}"
                )));
            }
            owned = data::resize_bicubic(image, side, side)?;
            &owned
        }
        None => image,
    };
    if image.width() % 8 != 0 || image.height() % 8 != 0 {
        return Err(Error::Shape(format!(
            "image is {}x{}; sides must be divisible by 8 (enable resize or pad upstream)",
            image.width(),
            image.height()
        )));
    }
    let input = data::normalize(image, norm)?;
    let mut shape = vec![1];
    shape.extend_from_slice(input.shape());
    let batch = Tensor::new(shape, input.into_data())?;
    let probs = model.forward(&batch)?;
    let plane = image.height() * image.width();
    let fg = &probs.data()[plane..2 * plane];
    let pred = binarize(fg, threshold as f32)?;
    let mask_bytes: Vec<u8> = pred.iter().map(|&p| if p { 255 } else { 0 }).collect();
    let prob_bytes: Vec<u8> = fg
        .iter()
        .map(|&p| (f64::from(p) * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    Ok(Prediction {
        mask: Raster::new(image.width(), image.height(), 1, mask_bytes)?,
        probability: Raster::new(image.width(), image.height(), 1, prob_bytes)?,
    })
}

/// One metric compared across the two models on one split.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub split: String,
    pub metric: String,
    pub mean_a: f64,
    pub sd_a: f64,
    pub mean_b: f64,
    pub sd_b: f64,
    /// Absent when the paired differences have no spread.
    pub t: Option<f64>,
    pub p: Option<f64>,
    pub significant: bool,
    /// Empty, or an explanation of why no test statistic is shown.
    pub note: String,
}

/// Side-by-side performance of two models with paired one-tailed t-tests
/// (H1: model B improves on model A) and the training-rate proxy.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompareReport {
    pub model_a: String,
    pub model_b: String,
    pub tau: f64,
    pub rows: Vec<ComparisonRow>,
    pub epochs_to_threshold_a: Option<usize>,
    pub epochs_to_threshold_b: Option<usize>,
}

impl CompareReport {
    /// Plain-text table of the report.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "paired one-tailed t-test, H1: {} improves on {}, alpha 0.05",
            self.model_b, self.model_a
        );
        let _ = writeln!(
            out,
            "{:<12} {:<12} {:>8} {:>7} {:>8} {:>7} {:>8} {:>8}  {}",
            "split", "metric", "mean A", "sd A", "mean B", "sd B", "t", "p", "significant"
        );
        for r in &self.rows {
            let (t, p, sig) = match (r.t, r.p) {
                (Some(t), Some(p)) => (
                    format!("{t:8.4}"),
                    format!("{p:8.4}"),
                    if r.significant { "yes" } else { "no" }.to_string(),
                ),
                _ => ("       -".into(), "       -".into(), r.note.clone()),
            };
            let _ = writeln!(
                out,
                "{:<12} {:<12} {:>8.2} {:>7.2} {:>8.2} {:>7.2} {} {}  {}",
                r.split, r.metric, r.mean_a, r.sd_a, r.mean_b, r.sd_b, t, p, sig
            );
        }
        let fmt = |e: Option<usize>| match e {
            Some(v) => v.to_string(),
            None => "not reached".to_string(),
        };
        let _ = writeln!(
            out,
            "epochs to validation sDSC >= {}: {} {}, {} {}",
            self.tau,
            self.model_a,
            fmt(self.epochs_to_threshold_a),
            self.model_b,
            fmt(self.epochs_to_threshold_b)
        );
        out
    }
}

/// Pair two per-image reports by id and compare each metric with a paired
/// one-tailed t-test. Zero spread in the differences (for instance,
/// comparing a model to itself) is reported as "no difference" rather
/// than an error.
pub fn comparison_rows(
    split: &str,
    report_a: &MetricsReport,
    report_b: &MetricsReport,
) -> Result<Vec<ComparisonRow>> {
    if report_a.rows().len() != report_b.rows().len() {
        return Err(Error::Validation(format!(
            "reports cover {} vs {} images; they must describe the same split",
            report_a.rows().len(),
            report_b.rows().len()
        )));
    }
    let by_id: BTreeMap<&str, &crate::metrics::ImageMetrics> = report_b
        .rows()
        .iter()
        .map(|(id, m)| (id.as_str(), m))
        .collect();
    let mut pairs = Vec::with_capacity(report_a.rows().len());
    for (id, ma) in report_a.rows() {
        let mb = by_id.get(id.as_str()).ok_or_else(|| {
            Error::Validation(format!(
                "image {id:?} is missing from the second report; splits must match"
            ))
        })?;
        pairs.push((ma, *mb));
    }
    let metrics: [(&str, fn(&crate::metrics::ImageMetrics) -> f64); 3] = [
        ("dsc", |m| m.dsc),
        ("sensitivity", |m| m.sensitivity),
        ("specificity", |m| m.specificity),
    ];
    let mut rows = Vec::with_capacity(3);
    for (name, get) in metrics {
        let a: Vec<f64> = pairs.iter().map(|(ma, _)| get(ma)).collect();
        let b: Vec<f64> = pairs.iter().map(|(_, mb)| get(mb)).collect();
        let (mean_a, sd_a) = crate::metrics::mean_sd(&a);
        let (mean_b, sd_b) = crate::metrics::mean_sd(&b);
        let row = match paired_t_one_tailed(&a, &b) {
            Ok(test) => ComparisonRow {
                split: split.to_string(),
                metric: name.to_string(),
                mean_a,
                sd_a,
                mean_b,
                sd_b,
                t: Some(test.t),
                p: Some(test.p),
                significant: test.significant,
                note: String::new(),
            },
            Err(Error::DegenerateVariance(_)) => ComparisonRow {
                split: split.to_string(),
                metric: name.to_string(),
                mean_a,
                sd_a,
                mean_b,
                sd_b,
                t: None,
                p: None,
                significant: false,
                note: "no difference (paired differences have zero spread)".to_string(),
            },
            Err(e) => return Err(e),
        };
        rows.push(row);
    }
    Ok(rows)
}

/// First epoch at which the logged validation soft-DSC reaches `tau`.
pub fn epochs_to_threshold(log: &[RunLogRecord], tau: f64) -> Option<usize> {
    log.iter().find(|r| r.val_sdsc >= tau).map(|r| r.epoch)
}

/// A comparison run's full paperwork: the report plus everything needed
/// to re-derive it (per-image metrics and both training outcomes).
#[derive(Clone, Debug)]
pub struct CompareOutcome {
    pub report: CompareReport,
    pub outcome_a: TrainOutcome,
    pub outcome_b: TrainOutcome,
    pub validation_a: MetricsReport,
    pub validation_b: MetricsReport,
    pub test_a: MetricsReport,
    pub test_b: MetricsReport,
}

fn ensure_comparable(a: &TrainConfig, b: &TrainConfig) -> Result<()> {
    a.validate()?;
    b.validate()?;
    let mut mismatches = Vec::new();
    if a.dataset != b.dataset {
        mismatches.push("dataset");
    }
    if a.synthetic != b.synthetic {
        mismatches.push("synthetic");
    }
    if a.seed != b.seed {
        mismatches.push("seed");
    }
    if a.resize != b.resize {
        mismatches.push("resize");
    }
    if a.norm_roi != b.norm_roi {
        mismatches.push("norm_roi");
    }
    if a.threshold != b.threshold {
        mismatches.push("threshold");
    }
    if a.sigma != b.sigma {
        mismatches.push("sigma");
    }
    if !mismatches.is_empty() {
        return Err(Error::Validation(format!(
            "compared configs must share the data and evaluation protocol; \
             they differ in: {}",
            mismatches.join(", ")
        )));
    }
    if a.out_dir == b.out_dir {
        return Err(Error::Validation(
            "compared configs must write to different output directories".into(),
        ));
    }
    Ok(())
}

/// Train both configs on the identical prepared data, evaluate them on the
/// same validation and test images, and compare per-metric with paired
/// one-tailed t-tests plus epochs-to-threshold. The configs must agree on
/// everything that determines the data and the evaluation protocol.
/// `on_epoch` receives (0, record) for model A and (1, record) for model B.
pub fn compare(
    config_a: &TrainConfig,
    config_b: &TrainConfig,
    tau: f64,
    mut on_epoch: impl FnMut(usize, &RunLogRecord),
) -> Result<CompareOutcome> {
    ensure_comparable(config_a, config_b)?;
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Validation(format!(
            "tau must lie strictly between 0 and 1, got {tau}"
        )));
    }
    let data = prepare_data(config_a)?;
    if data.test.is_empty() {
        return Err(Error::Validation("comparison needs a test split".into()));
    }
    let outcome_a = train_prepared(config_a, &data, |r| on_epoch(0, r))?;
    let outcome_b = train_prepared(config_b, &data, |r| on_epoch(1, r))?;
    let threshold = config_a.threshold;
    let validation_a = evaluate_prepared(&outcome_a.model, &data.validation, threshold)?;
    let validation_b = evaluate_prepared(&outcome_b.model, &data.validation, threshold)?;
    let test_a = evaluate_prepared(&outcome_a.model, &data.test, threshold)?;
    let test_b = evaluate_prepared(&outcome_b.model, &data.test, threshold)?;
    let mut rows = comparison_rows("validation", &validation_a, &validation_b)?;
    rows.extend(comparison_rows("test", &test_a, &test_b)?);
    let report = CompareReport {
        model_a: config_a.variant.to_string(),
        model_b: config_b.variant.to_string(),
        tau,
        rows,
        epochs_to_threshold_a: epochs_to_threshold(&outcome_a.log, tau),
        epochs_to_threshold_b: epochs_to_threshold(&outcome_b.log, tau),
    };
    Ok(CompareOutcome {
        report,
        outcome_a,
        outcome_b,
        validation_a,
        validation_b,
        test_a,
        test_b,
    })
}

/// Epochs-to-threshold for one seed of a multi-seed comparison.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeedEpochs {
    pub seed: u64,
    pub epochs_a: Option<usize>,
    pub epochs_b: Option<usize>,
}

/// Median epochs-to-threshold over several seeds: the training-rate
/// comparison, aggregated enough to be stable against run-to-run noise.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MultiSeedReport {
    pub model_a: String,
    pub model_b: String,
    pub tau: f64,
    pub per_seed: Vec<SeedEpochs>,
    /// How many seeds reached the threshold at all.
    pub reached_a: usize,
    pub reached_b: usize,
    /// Median first epoch at threshold, over the seeds that reached it.
    pub median_epochs_a: Option<f64>,
    pub median_epochs_b: Option<f64>,
}

impl MultiSeedReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "epochs to validation sDSC >= {} over {} seeds",
            self.tau,
            self.per_seed.len()
        );
        let _ = writeln!(
            out,
            "{:<8} {:>12} {:>12}",
            "seed", self.model_a, self.model_b
        );
        let fmt = |e: Option<usize>| e.map_or("-".to_string(), |v| v.to_string());
        for s in &self.per_seed {
            let _ = writeln!(
                out,
                "{:<8} {:>12} {:>12}",
                s.seed,
                fmt(s.epochs_a),
                fmt(s.epochs_b)
            );
        }
        let fmed = |m: Option<f64>, reached: usize| match m {
            Some(v) => format!("{v} (reached in {reached}/{} runs)", self.per_seed.len()),
            None => "never reached".to_string(),
        };
        let _ = writeln!(
            out,
            "median {}: {}",
            self.model_a,
            fmed(self.median_epochs_a, self.reached_a)
        );
        let _ = writeln!(
            out,
            "median {}: {}",
            self.model_b,
            fmed(self.median_epochs_b, self.reached_b)
        );
        out
    }
}

/// Median of a set of epoch counts, as a float (even counts average the
/// two central values).
pub fn median(values: &[usize]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_unstable();
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2] as f64
    } else {
        (v[n / 2 - 1] + v[n / 2]) as f64 / 2.0
    })
}

/// Run `compare` once per seed (sub-directories `seed<k>` under each
/// model's output directory) and aggregate epochs-to-threshold.
pub fn compare_multi_seed(
    base_a: &TrainConfig,
    base_b: &TrainConfig,
    tau: f64,
    seeds: &[u64],
    mut on_epoch: impl FnMut(u64, usize, &RunLogRecord),
) -> Result<MultiSeedReport> {
    ensure_comparable(base_a, base_b)?;
    if seeds.is_empty() {
        return Err(Error::Validation(
            "multi-seed comparison needs at least one seed".into(),
        ));
    }
    let mut per_seed = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut config_a = base_a.clone();
        let mut config_b = base_b.clone();
        config_a.seed = seed;
        config_b.seed = seed;
        config_a.out_dir = base_a.out_dir.join(format!("seed{seed}"));
        config_b.out_dir = base_b.out_dir.join(format!("seed{seed}"));
        let outcome = compare(&config_a, &config_b, tau, |i, r| on_epoch(seed, i, r))?;
        per_seed.push(SeedEpochs {
            seed,
            epochs_a: outcome.report.epochs_to_threshold_a,
            epochs_b: outcome.report.epochs_to_threshold_b,
        });
    }
    let reached_a: Vec<usize> = per_seed.iter().filter_map(|s| s.epochs_a).collect();
    let reached_b: Vec<usize> = per_seed.iter().filter_map(|s| s.epochs_b).collect();
    Ok(MultiSeedReport {
        model_a: base_a.variant.to_string(),
        model_b: base_b.variant.to_string(),
        tau,
        reached_a: reached_a.len(),
        reached_b: reached_b.len(),
        median_epochs_a: median(&reached_a),
        median_epochs_b: median(&reached_b),
        per_seed,
    })
}

/// Paths written by `emit_curves`.
#[derive(Clone, Debug)]
pub struct CurvesOutput {
    pub csv_paths: Vec<PathBuf>,
    pub svg_path: PathBuf,
}

fn sanitize_name(name: &str, index: usize) -> String {
    let cleaned: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '-' })
        .collect();
    if cleaned.is_empty() {
        format!("log{index}")
    } else {
        cleaned
    }
}

/// Re-emit each named run log as CSV and draw all validation curves into
/// one SVG (`curves.svg`, one polyline per log).
pub fn emit_curves(logs: &[(String, Vec<RunLogRecord>)], out_dir: &Path) -> Result<CurvesOutput> {
    if logs.is_empty() {
        return Err(Error::Validation(
            "curve emission needs at least one run log".into(),
        ));
    }
    for (name, log) in logs {
        if log.is_empty() {
            return Err(Error::Validation(format!("run log {name:?} is empty")));
        }
    }
    let names: Vec<String> = logs
        .iter()
        .enumerate()
        .map(|(i, (name, _))| sanitize_name(name, i))
        .collect();
    for (i, n) in names.iter().enumerate() {
        if names[..i].contains(n) {
            return Err(Error::Validation(format!(
                "run log names must be distinct, {n:?} repeats"
            )));
        }
    }
    fs::create_dir_all(out_dir)?;
    let mut csv_paths = Vec::with_capacity(logs.len());
    for (name, (_, log)) in names.iter().zip(logs) {
        let path = out_dir.join(format!("curves_{name}.csv"));
        write_runlog_csv(&path, log)?;
        csv_paths.push(path);
    }
    let svg_path = out_dir.join("curves.svg");
    fs::write(&svg_path, render_curves_svg(logs))?;
    Ok(CurvesOutput {
        csv_paths,
        svg_path,
    })
}

/// Render validation soft-DSC against epoch, one polyline per log, into a
/// self-contained SVG document.
pub fn render_curves_svg(logs: &[(String, Vec<RunLogRecord>)]) -> String {
    const PALETTE: [&str; 8] = [
        "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f",
    ];
    let (left, right, top, bottom) = (70.0f64, 690.0f64, 30.0f64, 430.0f64);
    let max_epoch = logs
        .iter()
        .flat_map(|(_, log)| log.iter().map(|r| r.epoch))
        .max()
        .unwrap_or(1)
        .max(1);
    let x = |epoch: usize| -> f64 {
        if max_epoch == 1 {
            (left + right) / 2.0
        } else {
            left + (epoch as f64 - 1.0) / (max_epoch as f64 - 1.0) * (right - left)
        }
    };
    let y = |v: f64| -> f64 { bottom - v.clamp(0.0, 1.0) * (bottom - top) };

    let mut svg = String::new();
    svg.push_str(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"720\" height=\"480\" \
         viewBox=\"0 0 720 480\" font-family=\"sans-serif\" font-size=\"12\">\n",
    );
    svg.push_str("<rect x=\"0\" y=\"0\" width=\"720\" height=\"480\" fill=\"#ffffff\"/>\n");
    // Horizontal grid lines and y tick labels at 0, 0.25, ..., 1.
    for i in 0..=4 {
        let v = i as f64 / 4.0;
        let yy = y(v);
        let _ = writeln!(
            svg,
            "<line x1=\"{left}\" y1=\"{yy:.2}\" x2=\"{right}\" y2=\"{yy:.2}\" \
             stroke=\"#dddddd\" stroke-width=\"1\"/>"
        );
        let _ = writeln!(
            svg,
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{v:.2}</text>",
            left - 8.0,
            yy + 4.0
        );
    }
    // X ticks at five evenly spaced epochs.
    for i in 0..=4 {
        let epoch = 1 + ((max_epoch - 1) * i).div_euclid(4);
        let xx = x(epoch);
        let _ = writeln!(
            svg,
            "<line x1=\"{xx:.2}\" y1=\"{bottom}\" x2=\"{xx:.2}\" y2=\"{:.2}\" \
             stroke=\"#333333\" stroke-width=\"1\"/>",
            bottom + 5.0
        );
        let _ = writeln!(
            svg,
            "<text x=\"{xx:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{epoch}</text>",
            bottom + 20.0
        );
    }
    // Axes.
    let _ = writeln!(
        svg,
        "<line x1=\"{left}\" y1=\"{bottom}\" x2=\"{right}\" y2=\"{bottom}\" \
         stroke=\"#333333\" stroke-width=\"1.5\"/>"
    );
    let _ = writeln!(
        svg,
        "<line x1=\"{left}\" y1=\"{top}\" x2=\"{left}\" y2=\"{bottom}\" \
         stroke=\"#333333\" stroke-width=\"1.5\"/>"
    );
    let _ = writeln!(
        svg,
        "<text x=\"{:.2}\" y=\"468\" text-anchor=\"middle\">epoch</text>",
        (left + right) / 2.0
    );
    let _ = writeln!(
        svg,
        "<text transform=\"translate(18 {:.2}) rotate(-90)\" text-anchor=\"middle\">\
         validation soft-DSC</text>",
        (top + bottom) / 2.0
    );
    // Curves and legend.
    for (i, (name, log)) in logs.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mut points = String::new();
        for r in log {
            let _ = write!(points, "{:.2},{:.2} ", x(r.epoch), y(r.val_sdsc));
        }
        let _ = writeln!(
            svg,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" \
             points=\"{}\"/>",
            points.trim_end()
        );
        let ly = top + 14.0 + 18.0 * i as f64;
        let _ = writeln!(
            svg,
            "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"12\" height=\"12\" fill=\"{color}\"/>",
            right - 160.0,
            ly - 10.0
        );
        let _ = writeln!(
            svg,
            "<text x=\"{:.2}\" y=\"{ly:.2}\">{}</text>",
            right - 142.0,
            sanitize_name(name, i)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Worst relative gradient error of the complete network-plus-loss graph: a
/// base-2 model in double precision, differentiating the soft-Dice loss with
/// respect to the 8x8 input image so the probe traverses every layer's
/// backward rule in composition.
///
/// Central differences are only a valid oracle where their hypotheses hold,
/// so every probe point is validated on two counts and redrawn otherwise:
///
/// * ReLU and max-pool make the loss piecewise smooth, and a difference
///   whose two evaluations land on different smooth pieces measures the
///   slope of neither piece. The activation pattern (ReLU signs, pool
///   argmaxes) must therefore be identical at the base point and at both
///   perturbed points of every probe.
/// * Double-precision roundoff puts an absolute noise of about
///   `eps * |f| / (2 * step)` on each difference, so a coordinate whose true
///   derivative sits near the error formula's 1e-8 denominator floor cannot
///   be resolved at any step size — the comparison there measures roundoff,
///   not the gradient. Coordinates below 1e-6 (which keeps the noise
///   contribution below 1e-5) are excluded from the maximum; a point where
///   every coordinate is unresolvable is reported as unreliable.
///
/// Both conditions are properties of the probe point, not of the gradient
/// code: the analytic gradient at an accepted point runs the identical
/// backward rules, so the restrictions cost no coverage.
pub fn full_net_grad_check(variant: Variant, seed: u64) -> Result<f64> {
    const STEP: f64 = 1e-5;
    const GRAD_FLOOR: f64 = 1e-6;
    const MAX_PROBE_INPUTS: usize = 32;
    let spec = ArchitectureSpec::new(variant, 2, 1)?;
    let model = build_model::<f64>(spec, seed)?;
    let names: Vec<String> = model.params().keys().cloned().collect();
    let tensors: Vec<Tensor<f64>> = names.iter().map(|n| model.params()[n].clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5bd1_e995));
    let labels: Vec<f64> = (0..64)
        .map(|_| if rng.random::<f64>() < 0.4 { 1.0 } else { 0.0 })
        .collect();
    let labels = Tensor::new(vec![1, 1, 8, 8], labels)?;

    // One taped forward pass over a candidate image; the parameters enter as
    // constants so the input is the only differentiated leaf.
    let forward = |image: &Tensor<f64>| -> Result<(Tape<f64>, Var, Var)> {
        let mut tape = Tape::new();
        let x = tape.leaf(image.clone());
        let params: BTreeMap<String, Var> = names
            .iter()
            .cloned()
            .zip(tensors.iter().map(|t| tape.leaf(t.clone())))
            .collect();
        let probs = forward_graph(&mut tape, &spec, &params, x)?;
        let (loss, _) = soft_dice_loss(&mut tape, probs, &labels, 1.0)?;
        Ok((tape, x, loss))
    };
    let eval = |image: &Tensor<f64>| -> Result<(f64, Vec<u64>)> {
        let (tape, _, loss) = forward(image)?;
        Ok((tape.value(loss)?.item()?, tape.activation_pattern()))
    };

    'candidate: for _ in 0..MAX_PROBE_INPUTS {
        let image: Vec<f64> = (0..64).map(|_| rng.random::<f64>()).collect();
        let input = Tensor::new(vec![1, 1, 8, 8], image)?;

        let (tape, x, loss) = forward(&input)?;
        let base_value = tape.value(loss)?.item()?;
        let base_pattern = tape.activation_pattern();
        let (repeat_value, _) = eval(&input)?;
        if base_value.to_bits() != repeat_value.to_bits() {
            return Err(Error::UnreliableCheck(format!(
                "forward pass is not deterministic: {base_value} vs {repeat_value}"
            )));
        }
        if !base_value.is_finite() {
            return Err(Error::UnreliableCheck(format!(
                "forward pass produced a non-finite loss {base_value}"
            )));
        }
        let grads = tape.backward(loss)?;
        let analytic = grads.wrt(x)?.to_vec();
        if analytic.iter().all(|g| g.abs() < GRAD_FLOOR) {
            // The whole input gradient is unresolvably small — this image
            // woke none of the first-level filters. Try another.
            continue 'candidate;
        }

        let mut work = input.clone();
        let mut worst = 0.0f64;
        for j in 0..analytic.len() {
            if analytic[j].abs() < GRAD_FLOOR {
                // This pixel barely influences the loss here (dead ReLU and
                // losing pool slots along its paths); below the resolvable
                // scale the comparison would measure roundoff.
                continue;
            }
            let orig = work.data()[j];
            work.data_mut()[j] = orig + STEP;
            let (plus, pattern_plus) = eval(&work)?;
            work.data_mut()[j] = orig - STEP;
            let (minus, pattern_minus) = eval(&work)?;
            work.data_mut()[j] = orig;
            if pattern_plus != base_pattern || pattern_minus != base_pattern {
                // A probe stepped across a kink: this input sits too close to
                // a ReLU zero or a pool tie for the step size. Try another.
                continue 'candidate;
            }
            let numeric = (plus - minus) / (2.0 * STEP);
            if !numeric.is_finite() {
                return Err(Error::UnreliableCheck(format!(
                    "numeric derivative for input element {j} is {numeric}"
                )));
            }
            worst = worst.max(rel_err(analytic[j], numeric));
        }
        return Ok(worst);
    }
    Err(Error::UnreliableCheck(format!(
        "no probe image produced a kink-free neighborhood with a resolvable \
         gradient in {MAX_PROBE_INPUTS} draws"
    )))
}

/// Central-difference checks for each tensor operation in isolation,
/// returning `(check name, worst relative error)` pairs. Inputs are drawn
/// continuously so pooling ties and ReLU kinks have probability zero, and
/// ReLU inputs are additionally pushed away from the hinge.
pub fn gradcheck_battery(seed: u64) -> Result<Vec<(String, f64)>> {
    fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        Tensor::new(shape, data).expect("shape matches data length")
    }
    // Scalarize through a fixed random weighting so every output element
    // participates in the checked gradient.
    fn scalarizer(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(shape.to_vec(), data).expect("shape matches data length")
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results = Vec::new();

    {
        let inputs = vec![
            uniform(&mut rng, vec![2, 3, 5, 5], -1.0, 1.0),
            uniform(&mut rng, vec![4, 3, 3, 3], -1.0, 1.0),
            uniform(&mut rng, vec![4], -0.5, 0.5),
        ];
        let coeffs = scalarizer(&mut rng, &[2, 4, 5, 5]);
        let err = grad_check(
            move |tape, vars| {
                let y = tape.conv2d(vars[0], vars[1], vars[2], 1)?;
                tape.weighted_sum(y, &coeffs)
            },
            &inputs,
            1e-5,
        )?;
        results.push(("conv2d pad 1".to_string(), err));
    }
    {
        let inputs = vec![
            uniform(&mut rng, vec![1, 2, 6, 6], -1.0, 1.0),
            uniform(&mut rng, vec![3, 2, 1, 1], -1.0, 1.0),
            uniform(&mut rng, vec![3], -0.5, 0.5),
        ];
        let coeffs = scalarizer(&mut rng, &[1, 3, 6, 6]);
        let err = grad_check(
            move |tape, vars| {
                let y = tape.conv2d(vars[0], vars[1], vars[2], 0)?;
                tape.weighted_sum(y, &coeffs)
            },
            &inputs,
            1e-5,
        )?;
        results.push(("conv2d 1x1".to_string(), err));
    }
    {
        let inputs = vec![uniform(&mut rng, vec![2, 3, 6, 6], -1.0, 1.0)];
        let coeffs = scalarizer(&mut rng, &[2, 3, 3, 3]);
        let err = grad_check(
            move |tape, vars| {
                let y = tape.max_pool2x2(vars[0])?;
                tape.weighted_sum(y, &coeffs)
            },
            &inputs,
            1e-5,
        )?;
        results.push(("max_pool2x2".to_string(), err));
    }
    {
        let inputs = vec![uniform(&mut rng, vec![1, 2, 4, 4], -1.0, 1.0)];
        let coeffs = scalarizer(&mut rng, &[1, 2, 2, 2]);
        let err = grad_check(
            move |tape, vars| {
                let y = tape.avg_pool2x2(vars[0])?;
                tape.weighted_sum(y, &coeffs)
            },
            &inputs,
            1e-5,
        )?;
        results.push(("avg_pool2x2".to_string(), err));
    }
    {
        let inputs = vec![
            uniform(&mut rng, vec![2, 3, 3, 3], -1.0, 1.0),
            uniform(&mut rng, vec![3, 4, 2, 2], -1.0, 1.0),
            uniform(&mut rng, vec![4], -0.5, 0.5),
        ];
        let coeffs = scalarizer(&mut rng, &[2, 4, 6, 6]);
        let err = grad_check(
            move |tape, vars| {
                let y = tape.transposed_conv2x2(vars[0], vars[1], vars[2])?;
                tape.weighted_sum(y, &coeffs)
            },
            &inputs,
            1e-5,
        )?;
        results.push(("transposed_conv2x2".to_string(), err));
    }
    {
        // Keep every element at least 0.15 from the hinge so the central
        // difference cannot straddle it.
        let raw = uniform(&mut rng, vec![1, 2, 4, 4], -1.0, 1.0);
        let shifted: Vec<f64> = raw
            .data()
            .iter()
            .map(|&v| v + 0.15 * v.signum())
            .collect();
        let inputs = vec![Tensor::new(vec![1, 2, 4, 4], shifted)?];
        let coeffs = scalarizer(&mut rng, &[1, 2, 4, 4]);
        let err = grad_check(
            move |tape, vars| {
                let y = tape.relu(vars[0])?;
                tape.weighted_sum(y, &coeffs)
            },
            &inputs,
            1e-5,
        )?;
        results.push(("relu".to_string(), err));
    }
    {
        let inputs = vec![
            uniform(&mut rng, vec![1, 2, 3, 3], -1.0, 1.0),
            uniform(&mut rng, vec![1, 3, 3, 3], -1.0, 1.0),
        ];
        let coeffs = scalarizer(&mut rng, &[1, 5, 3, 3]);
        let err = grad_check(
            move |tape, vars| {
                let y = tape.concat_channels(vars[0], vars[1])?;
                tape.weighted_sum(y, &coeffs)
            },
            &inputs,
            1e-5,
        )?;
        results.push(("concat_channels".to_string(), err));
    }
    {
        let inputs = vec![
            uniform(&mut rng, vec![1, 2, 3, 3], -1.0, 1.0),
            uniform(&mut rng, vec![1, 2, 3, 3], -1.0, 1.0),
        ];
        let coeffs = scalarizer(&mut rng, &[1, 2, 3, 3]);
        let err = grad_check(
            move |tape, vars| {
                let y = tape.mul(vars[0], vars[1])?;
                tape.weighted_sum(y, &coeffs)
            },
            &inputs,
            1e-5,
        )?;
        results.push(("mul".to_string(), err));
    }
    {
        let inputs = vec![uniform(&mut rng, vec![2, 2, 3, 3], -2.0, 2.0)];
        let coeffs = scalarizer(&mut rng, &[2, 2, 3, 3]);
        let err = grad_check(
            move |tape, vars| {
                let y = tape.softmax_channels(vars[0])?;
                tape.weighted_sum(y, &coeffs)
            },
            &inputs,
            1e-5,
        )?;
        results.push(("softmax_channels".to_string(), err));
    }
    {
        let inputs = vec![uniform(&mut rng, vec![2, 2, 4, 4], -2.0, 2.0)];
        let labels: Vec<f64> = (0..32)
            .map(|_| if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 })
            .collect();
        let labels = Tensor::new(vec![2, 1, 4, 4], labels)?;
        let err = grad_check(
            move |tape, vars| {
                let probs = tape.softmax_channels(vars[0])?;
                let (loss, _) = tape.soft_dice(probs, &labels, 1.0)?;
                Ok(loss)
            },
            &inputs,
            1e-5,
        )?;
        results.push(("softmax + soft_dice".to_string(), err));
    }
    Ok(results)
}
