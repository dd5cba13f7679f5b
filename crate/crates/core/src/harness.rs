//! Dataset loading, splitting, checkpointed training and evaluation reports.
//!
//! One EM iteration plays the role of one training step. Every class model
//! advances in lockstep; after every `eval_every` iterations the current
//! models are scored on the validation split and recorded as a
//! [`Checkpoint`]. The returned recognizer is the best-scoring checkpoint.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::audio_io::{read_wav, AudioClip};
use crate::features::{mfcc, FeatureConfig, FeatureError, FeatureMatrix};
use crate::hmm::{
    fmt_f64, flat_start, ClassModel, EmTrainer, HmmError, ModelLines, Recognizer,
    DEFAULT_STATES, DEFAULT_VARIANCE_FLOOR, MODEL_MAGIC,
};
use crate::knn::{amfcc, knn_classify, pca_fit, AmfccVector, KnnError};
use crate::preprocess::{
    apply_contract, downmix, estimate_noise_profile, resample, ChannelMode, FormatContract,
    NoiseProfile, PreprocessError,
};

pub const SILENCE_LABEL: &str = "_silence_";
pub const UNKNOWN_LABEL: &str = "_unknown_";
pub const NOISE_FFT_SIZE: usize = 512;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("cannot access {path}")]
    Io { path: PathBuf, source: io::Error },
    #[error("no readable WAV files under {0}")]
    EmptyRoot(PathBuf),
    #[error("invalid split fractions: {0}")]
    InvalidFractions(String),
    #[error("class '{0}' has no training clip")]
    NoTrainableClip(String),
    #[error("{0} split is empty")]
    EmptySelection(&'static str),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("clip {path}")]
    Clip { path: PathBuf, source: Box<HarnessError> },
    #[error(transparent)]
    Hmm(#[from] HmmError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Knn(#[from] KnnError),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io { path: path.to_path_buf(), source }
}

/// Reserved labels first, then the rest in lexicographic order.
pub fn ordered_labels<'a>(labels: impl IntoIterator<Item = &'a str>) -> Vec<String> {
    let mut rest: Vec<&str> = labels
        .into_iter()
        .filter(|l| *l != SILENCE_LABEL && *l != UNKNOWN_LABEL)
        .collect();
    rest.sort_unstable();
    rest.dedup();
    [SILENCE_LABEL, UNKNOWN_LABEL]
        .into_iter()
        .chain(rest)
        .map(str::to_string)
        .collect()
}

#[derive(Debug, Clone)]
pub struct DatasetItem {
    pub label: String,
    pub path: PathBuf,
    pub clip: AudioClip,
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    items: Vec<DatasetItem>,
    skipped: Vec<(PathBuf, String)>,
}

impl Dataset {
    pub fn from_items(items: Vec<DatasetItem>) -> Self {
        Dataset { items, skipped: Vec::new() }
    }

    pub fn items(&self) -> &[DatasetItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Files that could not be decoded, with the reason.
    pub fn skipped(&self) -> &[(PathBuf, String)] {
        &self.skipped
    }

    /// Labels present in the dataset, reserved ones first when present.
    pub fn labels(&self) -> Vec<String> {
        let present: Vec<&str> = self.items.iter().map(|i| i.label.as_str()).collect();
        ordered_labels(present.iter().copied())
            .into_iter()
            .filter(|l| present.contains(&l.as_str()))
            .collect()
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    let mut out = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<Vec<_>, _>>()
        .map_err(io_err(dir))?;
    out.sort();
    Ok(out)
}

/// Reads `<root>/<label>/*.wav`. Undecodable files are skipped and listed in
/// [`Dataset::skipped`].
pub fn load_dataset(root: &Path) -> Result<Dataset, HarnessError> {
    let mut ds = Dataset::default();
    for dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        let label = dir.file_name().unwrap().to_string_lossy().into_owned();
        for path in sorted_entries(&dir)? {
            let is_wav = path
                .extension()
                .is_some_and(|e| e.eq_ignore_ascii_case("wav"));
            if !is_wav || !path.is_file() {
                continue;
            }
            let decoded = fs::read(&path)
                .map_err(|e| e.to_string())
                .and_then(|b| read_wav(&b).map_err(|e| e.to_string()));
            match decoded {
                Ok((clip, _)) => ds.items.push(DatasetItem { label: label.clone(), path, clip }),
                Err(reason) => ds.skipped.push((path, reason)),
            }
        }
    }
    if ds.items.is_empty() {
        return Err(HarnessError::EmptyRoot(root.to_path_buf()));
    }
    Ok(ds)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitFractions {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions { train: 0.8, validation: 0.1, test: 0.1 }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let parts = [self.train, self.validation, self.test];
        if parts.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(HarnessError::InvalidFractions(format!("{parts:?} outside [0, 1]")));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(HarnessError::InvalidFractions(format!("{parts:?} sum to {sum}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
    pub fractions: SplitFractions,
}

/// Bucket in `0..100` for a file, stable across corpora and platforms.
pub fn split_bucket(basename: &str, seed: u64) -> u8 {
    let digest = Sha256::digest(format!("{basename}|{seed}").as_bytes());
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    (u64::from_be_bytes(head) % 100) as u8
}

pub fn split_dataset(ds: &Dataset, fractions: SplitFractions, seed: u64) -> Result<Split, HarnessError> {
    fractions.validate()?;
    let train_cut = (fractions.train * 100.0).round() as u8;
    let val_cut = ((fractions.train + fractions.validation) * 100.0).round() as u8;
    let mut split = Split { train: vec![], validation: vec![], test: vec![], fractions };
    for (i, item) in ds.items.iter().enumerate() {
        let name = item.path.file_name().map(|n| n.to_string_lossy()).unwrap_or_default();
        let b = split_bucket(&name, seed);
        if b < train_cut {
            split.train.push(i);
        } else if b < val_cut {
            split.validation.push(i);
        } else {
            split.test.push(i);
        }
    }
    Ok(split)
}

/// Rows are ground truth, columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    labels: Vec<String>,
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(labels: Vec<String>) -> Self {
        let n = labels.len();
        ConfusionMatrix { labels, counts: vec![vec![0; n]; n] }
    }

    fn index(&self, label: &str) -> Result<usize, HarnessError> {
        self.labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| HarnessError::Config(format!("label '{label}' not in confusion matrix")))
    }

    pub fn record(&mut self, truth: &str, predicted: &str) -> Result<(), HarnessError> {
        let (r, c) = (self.index(truth)?, self.index(predicted)?);
        self.counts[r][c] += 1;
        Ok(())
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.labels.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    /// Percentage of correct predictions; 0 for an empty matrix.
    pub fn accuracy(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            n => 100.0 * self.trace() as f64 / n as f64,
        }
    }

    /// Nested-bracket layout, one row per line.
    pub fn to_bracketed(&self) -> String {
        let width = self.counts.iter().flatten().map(|c| c.to_string().len()).max().unwrap_or(1);
        let rows: Vec<String> = self
            .counts
            .iter()
            .map(|r| {
                let cells: Vec<String> = r.iter().map(|c| format!("{c:>width$}")).collect();
                format!("[{}]", cells.join(" "))
            })
            .collect();
        format!("[{}]", rows.join("\n "))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("truth\\predicted");
        for l in &self.labels {
            let _ = write!(out, ",{l}");
        }
        out.push('\n');
        for (l, row) in self.labels.iter().zip(&self.counts) {
            out.push_str(l);
            for c in row {
                let _ = write!(out, ",{c}");
            }
            out.push('\n');
        }
        out
    }
}

/// "X.X% (N=K)" as used in every accuracy line.
pub fn accuracy_text(cm: &ConfusionMatrix) -> String {
    format!("{:.1}% (N={})", cm.accuracy(), cm.total())
}

pub fn step_line(ckpt: &Checkpoint) -> String {
    format!("Step {}: Validation accuracy = {}", ckpt.step, accuracy_text(&ckpt.confusion))
}

pub fn final_line(cm: &ConfusionMatrix) -> String {
    format!("Final test accuracy = {}", accuracy_text(cm))
}

/// Builds a noise profile at the contract's rate from raw noise clips.
pub fn noise_profile_for(clips: &[AudioClip], contract: &FormatContract) -> Result<NoiseProfile, HarnessError> {
    let prepared = clips
        .iter()
        .map(|c| resample(&downmix(c), contract.target_rate))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(estimate_noise_profile(&prepared, NOISE_FFT_SIZE)?)
}

/// Contract normalization followed by MFCC extraction on the mono mix.
pub fn clip_features(
    clip: &AudioClip,
    contract: &FormatContract,
    fcfg: &FeatureConfig,
    noise: Option<&NoiseProfile>,
) -> Result<FeatureMatrix, HarnessError> {
    let prepared = apply_contract(clip, contract, noise)?;
    let mono = if prepared.num_channels() > 1 { downmix(&prepared) } else { prepared };
    Ok(mfcc(&mono, fcfg)?)
}

pub fn dataset_features(
    ds: &Dataset,
    indices: &[usize],
    contract: &FormatContract,
    fcfg: &FeatureConfig,
    noise: Option<&NoiseProfile>,
) -> Result<Vec<FeatureMatrix>, HarnessError> {
    indices
        .par_iter()
        .map(|&i| {
            let item = &ds.items[i];
            clip_features(&item.clip, contract, fcfg, noise).map_err(|e| HarnessError::Clip {
                path: item.path.clone(),
                source: Box::new(e),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub n_states: usize,
    pub max_iters: usize,
    pub eval_every: usize,
    pub rel_tol: f64,
    pub variance_floor: f64,
    pub grammar_scale: f64,
    /// Predictions whose top score falls below this become `_unknown_`.
    pub reject_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n_states: DEFAULT_STATES,
            max_iters: 50,
            eval_every: 5,
            rel_tol: 1e-5,
            variance_floor: DEFAULT_VARIANCE_FLOOR,
            grammar_scale: 1.0,
            reject_threshold: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::Config(m.into()));
        if self.n_states == 0 {
            return bad("n_states must be at least 1");
        }
        if self.eval_every == 0 {
            return bad("eval_every must be at least 1");
        }
        if self.rel_tol.is_nan() || self.rel_tol < 0.0 {
            return bad("rel_tol must be nonnegative");
        }
        if !(self.variance_floor > 0.0 && self.variance_floor.is_finite()) {
            return bad("variance_floor must be positive");
        }
        if !self.grammar_scale.is_finite() {
            return bad("grammar_scale must be finite");
        }
        if !(0.0..=1.0).contains(&self.reject_threshold) {
            return bad("reject_threshold must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Per-clip ranked scores together with the resulting confusion matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub confusion: ConfusionMatrix,
    pub truths: Vec<String>,
    pub ranked: Vec<Vec<(String, f64)>>,
}

impl Evaluation {
    /// Mean score assigned to the true class, per true label.
    pub fn mean_true_scores(&self) -> BTreeMap<String, f64> {
        let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for (truth, ranked) in self.truths.iter().zip(&self.ranked) {
            let score = ranked.iter().find(|(l, _)| l == truth).map_or(0.0, |s| s.1);
            let e = acc.entry(truth.clone()).or_insert((0.0, 0));
            e.0 += score;
            e.1 += 1;
        }
        acc.into_iter().map(|(l, (s, n))| (l, s / n as f64)).collect()
    }

    /// Mean true-class score over every evaluated clip.
    pub fn mean_true_score(&self) -> f64 {
        let total: f64 = self
            .truths
            .iter()
            .zip(&self.ranked)
            .map(|(t, r)| r.iter().find(|(l, _)| l == t).map_or(0.0, |s| s.1))
            .sum();
        total / self.truths.len().max(1) as f64
    }
}

pub fn evaluate_features(
    rec: &Recognizer,
    features: &[FeatureMatrix],
    truths: &[String],
    reject_threshold: f64,
) -> Result<Evaluation, HarnessError> {
    let ranked = features
        .par_iter()
        .map(|f| rec.classify(f))
        .collect::<Result<Vec<_>, _>>()?;
    let labels = ordered_labels(rec.labels().into_iter().chain(truths.iter().map(String::as_str)));
    let mut confusion = ConfusionMatrix::new(labels);
    for (truth, r) in truths.iter().zip(&ranked) {
        let predicted = if r[0].1 < reject_threshold { UNKNOWN_LABEL } else { r[0].0.as_str() };
        confusion.record(truth, predicted)?;
    }
    Ok(Evaluation { confusion, truths: truths.to_vec(), ranked })
}

/// Classifies the selected clips under the recognizer's own contract and
/// feature settings.
pub fn evaluate(
    rec: &Recognizer,
    ds: &Dataset,
    indices: &[usize],
    noise: Option<&NoiseProfile>,
    reject_threshold: f64,
) -> Result<Evaluation, HarnessError> {
    if indices.is_empty() {
        return Err(HarnessError::EmptySelection("evaluation"));
    }
    let feats = dataset_features(ds, indices, rec.contract(), rec.feature_config(), noise)?;
    let truths: Vec<String> = indices.iter().map(|&i| ds.items[i].label.clone()).collect();
    evaluate_features(rec, &feats, &truths, reject_threshold)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: usize,
    pub confusion: ConfusionMatrix,
    pub recognizer: Recognizer,
}

impl Checkpoint {
    pub fn validation_accuracy(&self) -> f64 {
        self.confusion.accuracy()
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{MODEL_MAGIC}\n");
        let _ = writeln!(out, "checkpoint_step {}", self.step);
        let _ = writeln!(out, "validation_accuracy {}", fmt_f64(self.validation_accuracy()));
        let _ = writeln!(out, "confusion {}", self.confusion.labels.len());
        for l in &self.confusion.labels {
            let _ = writeln!(out, "label {l}");
        }
        for row in &self.confusion.counts {
            let cells: Vec<String> = row.iter().map(u64::to_string).collect();
            let _ = writeln!(out, "row {}", cells.join(" "));
        }
        self.recognizer.write_body(&mut out);
        out
    }

    pub fn from_text(text: &str) -> Result<Self, HmmError> {
        let mut lines = ModelLines::new(text);
        let magic = lines.next_line()?;
        if magic != MODEL_MAGIC {
            return Err(HmmError::Version(magic.to_string()));
        }
        let step = lines.scalar::<usize>("checkpoint_step")?;
        let stored_accuracy = lines.scalar::<f64>("validation_accuracy")?;
        let n = lines.scalar::<usize>("confusion")?;
        let labels = (0..n)
            .map(|_| lines.rest("label").map(str::to_string))
            .collect::<Result<Vec<_>, _>>()?;
        let mut counts = Vec::with_capacity(n);
        for _ in 0..n {
            let v = lines.fields("row", n)?;
            counts.push(v.iter().map(|s| lines.parse(s)).collect::<Result<Vec<u64>, _>>()?);
        }
        let confusion = ConfusionMatrix { labels, counts };
        if confusion.accuracy().to_bits() != stored_accuracy.to_bits() {
            return Err(lines.error("validation accuracy disagrees with the stored matrix"));
        }
        let recognizer = Recognizer::parse_body(&mut lines)?;
        Ok(Checkpoint { step, confusion, recognizer })
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), HarnessError> {
    fs::write(path, ckpt.to_text()).map_err(io_err(path))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, HarnessError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(Checkpoint::from_text(&text)?)
}

/// Loads either a bare model file or a checkpoint.
pub fn load_recognizer(path: &Path) -> Result<Recognizer, HarnessError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let is_checkpoint = text.lines().nth(1).is_some_and(|l| l.starts_with("checkpoint_step"));
    if is_checkpoint {
        Ok(Checkpoint::from_text(&text)?.recognizer)
    } else {
        Ok(Recognizer::from_text(&text)?)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub recognizer: Recognizer,
    pub checkpoints: Vec<Checkpoint>,
    /// Index into `checkpoints` of the selected one.
    pub best: usize,
}

impl TrainOutcome {
    pub fn best_checkpoint(&self) -> &Checkpoint {
        &self.checkpoints[self.best]
    }
}

/// Trains one HMM per label (except `_unknown_`), recording checkpoints at
/// step 0, every multiple of `eval_every`, and the last step. `on_checkpoint`
/// sees each checkpoint as soon as it is made.
#[allow(clippy::too_many_arguments)]
pub fn train_recognizer(
    ds: &Dataset,
    split: &Split,
    contract: &FormatContract,
    fcfg: &FeatureConfig,
    cfg: &TrainConfig,
    noise: Option<&NoiseProfile>,
    on_checkpoint: &mut dyn FnMut(&Checkpoint) -> Result<(), HarnessError>,
) -> Result<TrainOutcome, HarnessError> {
    cfg.validate()?;
    contract.validate()?;
    let labels: Vec<String> = ds.labels().into_iter().filter(|l| l != UNKNOWN_LABEL).collect();
    let train_feats = dataset_features(ds, &split.train, contract, fcfg, noise)?;
    let mut grouped: Vec<Vec<FeatureMatrix>> = vec![Vec::new(); labels.len()];
    for (&i, f) in split.train.iter().zip(train_feats) {
        if let Some(c) = labels.iter().position(|l| *l == ds.items[i].label) {
            grouped[c].push(f);
        }
    }
    if let Some(c) = grouped.iter().position(Vec::is_empty) {
        return Err(HarnessError::NoTrainableClip(labels[c].clone()));
    }
    if labels.len() < 2 {
        return Err(HarnessError::Config("training needs at least 2 classes".into()));
    }
    let n_train: usize = grouped.iter().map(Vec::len).sum();
    let log_priors: Vec<f64> = grouped.iter().map(|g| (g.len() as f64 / n_train as f64).ln()).collect();

    let val_feats = dataset_features(ds, &split.validation, contract, fcfg, noise)?;
    let val_truths: Vec<String> = split.validation.iter().map(|&i| ds.items[i].label.clone()).collect();

    let mut trainers = grouped
        .par_iter()
        .map(|data| {
            let init = flat_start(data, cfg.n_states, cfg.variance_floor)?;
            EmTrainer::new(init, data, cfg.rel_tol)
        })
        .collect::<Result<Vec<_>, HmmError>>()?;

    let mut checkpoints: Vec<Checkpoint> = Vec::new();
    let mut snapshot = |step: usize, trainers: &[EmTrainer<'_>]| -> Result<(), HarnessError> {
        let classes = labels
            .iter()
            .zip(trainers)
            .zip(&log_priors)
            .map(|((label, t), &log_prior)| ClassModel {
                label: label.clone(),
                hmm: t.model().clone(),
                log_prior,
            })
            .collect();
        let recognizer = Recognizer::new(classes, cfg.grammar_scale, *fcfg, *contract)?;
        let confusion = if val_feats.is_empty() {
            ConfusionMatrix::new(ordered_labels(recognizer.labels()))
        } else {
            evaluate_features(&recognizer, &val_feats, &val_truths, cfg.reject_threshold)?.confusion
        };
        let ckpt = Checkpoint { step, confusion, recognizer };
        on_checkpoint(&ckpt)?;
        checkpoints.push(ckpt);
        Ok(())
    };

    snapshot(0, &trainers)?;
    let mut step = 0;
    while step < cfg.max_iters && trainers.iter().any(|t| !t.is_converged()) {
        step += 1;
        trainers
            .par_iter_mut()
            .filter(|t| !t.is_converged())
            .map(|t| t.step().map(|_| ()))
            .collect::<Result<Vec<()>, HmmError>>()?;
        if step % cfg.eval_every == 0 {
            snapshot(step, &trainers)?;
        }
    }
    if step % cfg.eval_every != 0 {
        snapshot(step, &trainers)?;
    }

    // highest validation accuracy; max_by keeps the last of equal maxima
    let best = (0..checkpoints.len())
        .max_by(|&a, &b| {
            checkpoints[a]
                .validation_accuracy()
                .total_cmp(&checkpoints[b].validation_accuracy())
        })
        .unwrap();
    Ok(TrainOutcome {
        recognizer: checkpoints[best].recognizer.clone(),
        checkpoints,
        best,
    })
}

/// Text written by the train command: one line per checkpoint, the selected
/// checkpoint's matrix, and the test accuracy when a test evaluation exists.
pub fn training_report(outcome: &TrainOutcome, cfg: &TrainConfig, test: Option<&Evaluation>) -> String {
    let mut out = format!(
        "# one step = one EM iteration; checkpoint every {} iterations, at most {}\n",
        cfg.eval_every, cfg.max_iters
    );
    for c in &outcome.checkpoints {
        out.push_str(&step_line(c));
        out.push('\n');
    }
    let best = outcome.best_checkpoint();
    let _ = writeln!(out, "Selected checkpoint: step {}", best.step);
    if let Some(t) = test {
        out.push_str("Confusion Matrix:\n");
        out.push_str(&t.confusion.to_bracketed());
        out.push('\n');
        out.push_str(&final_line(&t.confusion));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub contracts: Vec<FormatContract>,
}

impl Default for ExperimentConfig {
    /// Mono and stereo at 16 kHz, then at 32 kHz, all 16-bit.
    fn default() -> Self {
        let cell = |rate, channels| FormatContract {
            target_rate: rate,
            target_channels: channels,
            ..FormatContract::default()
        };
        ExperimentConfig {
            contracts: vec![
                cell(16000, ChannelMode::Mono),
                cell(16000, ChannelMode::Stereo),
                cell(32000, ChannelMode::Mono),
                cell(32000, ChannelMode::Stereo),
            ],
        }
    }
}

#[derive(Debug, Clone)]
pub struct GridRow {
    pub contract: FormatContract,
    pub outcome: TrainOutcome,
    pub test: Evaluation,
}

impl GridRow {
    pub fn validation_accuracy(&self) -> f64 {
        self.outcome.best_checkpoint().validation_accuracy()
    }
}

/// Trains and tests every grid cell on the same split.
#[allow(clippy::too_many_arguments)]
pub fn run_experiment_grid(
    ds: &Dataset,
    split: &Split,
    grid: &ExperimentConfig,
    fcfg: &FeatureConfig,
    cfg: &TrainConfig,
    noise_clips: &[AudioClip],
    on_checkpoint: &mut dyn FnMut(&FormatContract, &Checkpoint) -> Result<(), HarnessError>,
) -> Result<Vec<GridRow>, HarnessError> {
    if grid.contracts.is_empty() {
        return Err(HarnessError::Config("experiment grid is empty".into()));
    }
    if split.test.is_empty() {
        return Err(HarnessError::EmptySelection("test"));
    }
    let mut rows = Vec::with_capacity(grid.contracts.len());
    for contract in &grid.contracts {
        let noise = if noise_clips.is_empty() {
            None
        } else {
            Some(noise_profile_for(noise_clips, contract)?)
        };
        let outcome = train_recognizer(ds, split, contract, fcfg, cfg, noise.as_ref(), &mut |c| {
            on_checkpoint(contract, c)
        })?;
        let test = evaluate(&outcome.recognizer, ds, &split.test, noise.as_ref(), cfg.reject_threshold)?;
        rows.push(GridRow { contract: *contract, outcome, test });
    }
    Ok(rows)
}

fn cell_fields(c: &FormatContract) -> [String; 3] {
    let channel = match c.target_channels {
        ChannelMode::Mono => "Mono",
        ChannelMode::Stereo => "Stereo",
    };
    [channel.to_string(), format!("{} Hz", c.target_rate), c.target_bit_depth.to_string()]
}

/// Parameter table followed by validation/overall accuracy per test case.
pub fn grid_report(rows: &[GridRow]) -> String {
    let mut out = String::from("Test Case\tSampling Channel\tFrequency\tRate\tValidation Accuracy\tOverall Accuracy\n");
    for (i, r) in rows.iter().enumerate() {
        let [ch, freq, bits] = cell_fields(&r.contract);
        let _ = writeln!(
            out,
            "Test Case{}\t{ch}\t{freq}\t{bits}\t{:.1}\t{:.1}",
            i + 1,
            r.validation_accuracy(),
            r.test.confusion.accuracy()
        );
    }
    out
}

pub fn grid_csv(rows: &[GridRow]) -> String {
    let mut out = String::from("test_case,channels,rate_hz,bit_depth,validation_accuracy,test_accuracy,test_n\n");
    for (i, r) in rows.iter().enumerate() {
        let c = &r.contract;
        let _ = writeln!(
            out,
            "{},{},{},{},{:.1},{:.1},{}",
            i + 1,
            c.target_channels.name(),
            c.target_rate,
            c.target_bit_depth,
            r.validation_accuracy(),
            r.test.confusion.accuracy(),
            r.test.confusion.total()
        );
    }
    out
}

fn score_columns(rows: &[GridRow]) -> Vec<String> {
    let all: Vec<&str> = rows
        .iter()
        .flat_map(|r| r.outcome.recognizer.labels())
        .collect();
    ordered_labels(all.iter().copied())
        .into_iter()
        .filter(|l| all.contains(&l.as_str()))
        .collect()
}

/// Mean true-class score per class and test case; `--` where a class has
/// no test clip.
pub fn score_table(rows: &[GridRow]) -> String {
    let labels = score_columns(rows);
    let mut out = format!("Test Cases\t{}\n", labels.join("\t"));
    for (i, r) in rows.iter().enumerate() {
        let means = r.test.mean_true_scores();
        let cells: Vec<String> = labels
            .iter()
            .map(|l| means.get(l).map_or("--".to_string(), |s| format!("{s:.5}")))
            .collect();
        let _ = writeln!(out, "Test Case{}\t{}", i + 1, cells.join("\t"));
    }
    out
}

pub fn score_csv(rows: &[GridRow]) -> String {
    let labels = score_columns(rows);
    let mut out = format!("test_case,{}\n", labels.join(","));
    for (i, r) in rows.iter().enumerate() {
        let means = r.test.mean_true_scores();
        let cells: Vec<String> = labels
            .iter()
            .map(|l| means.get(l).map_or(String::new(), |s| format!("{s:.5}")))
            .collect();
        let _ = writeln!(out, "{},{}", i + 1, cells.join(","));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KnnConfig {
    pub k: usize,
    /// Number of principal components; `None` keeps raw averaged vectors.
    pub pca_k: Option<usize>,
}

impl Default for KnnConfig {
    fn default() -> Self {
        KnnConfig { k: 1, pca_k: None }
    }
}

/// Averaged-MFCC k-NN trained on the train split, scored on the test split.
pub fn knn_evaluate(
    ds: &Dataset,
    split: &Split,
    contract: &FormatContract,
    fcfg: &FeatureConfig,
    cfg: &KnnConfig,
    noise: Option<&NoiseProfile>,
) -> Result<ConfusionMatrix, HarnessError> {
    if split.train.is_empty() {
        return Err(HarnessError::EmptySelection("train"));
    }
    if split.test.is_empty() {
        return Err(HarnessError::EmptySelection("test"));
    }
    if cfg.k == 0 {
        return Err(KnnError::ZeroK.into());
    }
    if cfg.k > split.train.len() {
        return Err(KnnError::KTooLarge { k: cfg.k, available: split.train.len() }.into());
    }
    let vectors = |idx: &[usize]| -> Result<Vec<AmfccVector>, HarnessError> {
        let feats = dataset_features(ds, idx, contract, fcfg, noise)?;
        Ok(idx
            .iter()
            .zip(&feats)
            .map(|(&i, f)| AmfccVector { label: Some(ds.items[i].label.clone()), ..amfcc(f) })
            .collect())
    };
    let mut train = vectors(&split.train)?;
    let mut test = vectors(&split.test)?;
    if let Some(k) = cfg.pca_k {
        let t = pca_fit(&train, k)?;
        train = train.iter().map(|v| t.apply(v)).collect::<Result<_, _>>()?;
        test = test.iter().map(|v| t.apply(v)).collect::<Result<_, _>>()?;
    }
    let predictions = test
        .par_iter()
        .map(|q| knn_classify(&train, q, cfg.k))
        .collect::<Result<Vec<_>, _>>()?;
    let truths: Vec<&str> = test.iter().map(|v| v.label.as_deref().unwrap()).collect();
    let mut cm = ConfusionMatrix::new(ordered_labels(
        truths.iter().copied().chain(train.iter().map(|v| v.label.as_deref().unwrap())),
    ));
    for (t, p) in truths.iter().zip(&predictions) {
        cm.record(t, &p.label)?;
    }
    Ok(cm)
}
