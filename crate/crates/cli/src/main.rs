use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};

use fauna_core::audio_io::{read_wav, write_wav, AudioClip, WavSpec};
use fauna_core::features::{export_pgm, spectrogram_with_floor, FeatureConfig, DEFAULT_DB_FLOOR};
use fauna_core::harness::{
    clip_features, evaluate, final_line, grid_csv, grid_report, knn_evaluate, load_dataset,
    load_recognizer, noise_profile_for, run_experiment_grid, save_checkpoint, score_csv,
    score_table, split_dataset, step_line, train_recognizer, Dataset, ExperimentConfig,
    HarnessError, KnnConfig, SplitFractions, TrainConfig,
};
use fauna_core::knn::KnnError;
use fauna_core::preprocess::{apply_contract, downmix, ChannelMode, FormatContract};

/// Species-sound recognizer: preprocessing, MFCC features, HMM and k-NN
/// classifiers, and evaluation reports.
#[derive(Parser)]
#[command(name = "fauna", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Normalize a dataset tree to the format contract
    Preprocess(PreprocessArgs),
    /// Train per-class HMMs with checkpointed validation
    Train(TrainArgs),
    /// Print the top-scoring labels for one WAV file
    Classify(ClassifyArgs),
    /// Score a saved model on one split of a dataset
    Evaluate(EvaluateArgs),
    /// Write a PGM spectrogram of one WAV file
    Spectrogram(SpectrogramArgs),
    /// Train and test every cell of a format-contract grid
    Experiment(ExperimentArgs),
    /// Averaged-MFCC k-nearest-neighbour classifier
    Knn(KnnArgs),
}

#[derive(Args, Clone)]
struct ContractArgs {
    #[arg(long, default_value_t = 16000)]
    target_rate: u32,
    /// mono or stereo
    #[arg(long, default_value = "mono")]
    target_channels: ChannelMode,
    /// Seconds
    #[arg(long, default_value_t = 1.0)]
    target_duration: f64,
    /// 8 or 16
    #[arg(long, default_value_t = 16)]
    target_bit_depth: u16,
}

impl ContractArgs {
    fn contract(&self) -> Result<FormatContract, CliError> {
        let c = FormatContract {
            target_rate: self.target_rate,
            target_channels: self.target_channels,
            target_duration: self.target_duration,
            target_bit_depth: self.target_bit_depth,
        };
        c.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(c)
    }
}

#[derive(Args, Clone)]
struct FeatureArgs {
    #[arg(long, default_value_t = 25.0)]
    frame_ms: f64,
    #[arg(long, default_value_t = 10.0)]
    hop_ms: f64,
    /// Defaults to the next power of two above the frame length
    #[arg(long)]
    fft_size: Option<usize>,
    #[arg(long, default_value_t = 20)]
    num_mel_filters: usize,
    #[arg(long, default_value_t = 13)]
    num_cepstra: usize,
    #[arg(long, default_value_t = 300.0)]
    mel_low: f64,
    /// Defaults to the Nyquist frequency
    #[arg(long)]
    mel_high: Option<f64>,
    #[arg(long, default_value_t = 2)]
    delta_window: usize,
    /// Keep only the static cepstra
    #[arg(long)]
    no_deltas: bool,
    #[arg(long, default_value_t = 0.97)]
    preemphasis: f64,
}

impl FeatureArgs {
    fn config(&self) -> FeatureConfig {
        FeatureConfig {
            frame_ms: self.frame_ms,
            hop_ms: self.hop_ms,
            fft_size: self.fft_size,
            num_mel_filters: self.num_mel_filters,
            num_cepstra: self.num_cepstra,
            mel_low: self.mel_low,
            mel_high: self.mel_high,
            delta_window: self.delta_window,
            include_deltas: !self.no_deltas,
            preemphasis: self.preemphasis,
        }
    }

    fn validated(&self, rate: u32) -> Result<FeatureConfig, CliError> {
        let cfg = self.config();
        cfg.validate(rate).map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }
}

#[derive(Args, Clone)]
struct SplitArgs {
    #[arg(long, default_value_t = 0.8)]
    train_fraction: f64,
    #[arg(long, default_value_t = 0.1)]
    validation_fraction: f64,
    #[arg(long, default_value_t = 0.1)]
    test_fraction: f64,
    #[arg(long, env = "FAUNA_SEED", default_value_t = 0)]
    seed: u64,
}

impl SplitArgs {
    fn fractions(&self) -> Result<SplitFractions, CliError> {
        let f = SplitFractions {
            train: self.train_fraction,
            validation: self.validation_fraction,
            test: self.test_fraction,
        };
        f.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(f)
    }
}

#[derive(Args, Clone)]
struct TrainingArgs {
    #[arg(long, default_value_t = 5)]
    n_states: usize,
    #[arg(long, default_value_t = 50)]
    max_iters: usize,
    #[arg(long, default_value_t = 5)]
    eval_every: usize,
    #[arg(long, default_value_t = 1e-5)]
    rel_tol: f64,
    #[arg(long, default_value_t = 1e-3)]
    variance_floor: f64,
    #[arg(long, default_value_t = 1.0)]
    grammar_scale: f64,
    /// Top scores below this are reported as `_unknown_`; 0 disables
    #[arg(long, default_value_t = 0.0)]
    reject_threshold: f64,
}

impl TrainingArgs {
    fn config(&self) -> Result<TrainConfig, CliError> {
        let cfg = TrainConfig {
            n_states: self.n_states,
            max_iters: self.max_iters,
            eval_every: self.eval_every,
            rel_tol: self.rel_tol,
            variance_floor: self.variance_floor,
            grammar_scale: self.grammar_scale,
            reject_threshold: self.reject_threshold,
        };
        cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct PreprocessArgs {
    #[arg(long)]
    in_dir: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Directory of background-noise WAVs for spectral subtraction
    #[arg(long)]
    noise_dir: Option<PathBuf>,
    #[command(flatten)]
    contract: ContractArgs,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data_dir: PathBuf,
    /// Final model path; checkpoints go to `<model-out>.ckpt-<step>`
    #[arg(long)]
    model_out: PathBuf,
    /// Also write the full training report here
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    noise_dir: Option<PathBuf>,
    #[command(flatten)]
    contract: ContractArgs,
    #[command(flatten)]
    features: FeatureArgs,
    #[command(flatten)]
    training: TrainingArgs,
    #[command(flatten)]
    split: SplitArgs,
}

#[derive(Args)]
struct ClassifyArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    wav: PathBuf,
    #[arg(long, default_value_t = 3)]
    top_k: usize,
    #[arg(long)]
    noise_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum SplitSelector {
    Train,
    Validation,
    Test,
    All,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split_select: SplitSelector,
    /// Confusion matrix CSV; defaults to `<model>.confusion.csv`
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    noise_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 0.0)]
    reject_threshold: f64,
    #[command(flatten)]
    split: SplitArgs,
}

#[derive(Args)]
struct SpectrogramArgs {
    #[arg(long)]
    wav: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_DB_FLOOR, allow_negative_numbers = true)]
    db_floor: f64,
    #[command(flatten)]
    features: FeatureArgs,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    data_dir: PathBuf,
    /// Grid cell as CHANNELS:RATE (e.g. mono:16000); repeatable. Defaults to
    /// mono and stereo at 16000 and 32000 Hz.
    #[arg(long = "cell")]
    cells: Vec<String>,
    /// Directory for the CSV exports
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    noise_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    target_duration: f64,
    #[arg(long, default_value_t = 16)]
    target_bit_depth: u16,
    #[command(flatten)]
    features: FeatureArgs,
    #[command(flatten)]
    training: TrainingArgs,
    #[command(flatten)]
    split: SplitArgs,
}

#[derive(Args)]
struct KnnArgs {
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long, default_value_t = 1)]
    k: usize,
    /// Reduce averaged vectors to this many principal components
    #[arg(long)]
    pca_k: Option<usize>,
    /// Confusion matrix CSV
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    noise_dir: Option<PathBuf>,
    #[command(flatten)]
    contract: ContractArgs,
    #[command(flatten)]
    features: FeatureArgs,
    #[command(flatten)]
    split: SplitArgs,
}

enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Knn(KnnError::KTooLarge { .. } | KnnError::ZeroK)
            | HarnessError::InvalidFractions(_)
            | HarnessError::Config(_) => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.into()),
        }
    }
}

type CliResult = Result<(), CliError>;

fn require_dir(path: &Path, what: &str) -> Result<(), CliError> {
    if !path.is_dir() {
        return Err(CliError::Usage(format!("{what} {} is not a directory", path.display())));
    }
    Ok(())
}

fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if !path.is_file() {
        return Err(CliError::Usage(format!("{what} {} does not exist", path.display())));
    }
    Ok(())
}

fn read_clip(path: &Path) -> Result<AudioClip> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let (clip, _) = read_wav(&bytes).with_context(|| format!("decoding {}", path.display()))?;
    Ok(clip)
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn noise_clips(dir: Option<&Path>) -> Result<Vec<AudioClip>, CliError> {
    let Some(dir) = dir else { return Ok(Vec::new()) };
    require_dir(dir, "noise directory")?;
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Usage(format!("no WAV files in {}", dir.display())));
    }
    Ok(paths.iter().map(|p| read_clip(p)).collect::<Result<_>>()?)
}

fn load(dir: &Path) -> Result<Dataset, CliError> {
    require_dir(dir, "data directory")?;
    let ds = load_dataset(dir)?;
    for (path, reason) in ds.skipped() {
        eprintln!("warning: skipped {}: {reason}", path.display());
    }
    if !ds.skipped().is_empty() {
        eprintln!("warning: {} unreadable file(s) skipped", ds.skipped().len());
    }
    Ok(ds)
}

fn cmd_preprocess(args: &PreprocessArgs) -> CliResult {
    let contract = args.contract.contract()?;
    require_dir(&args.in_dir, "input directory")?;
    if args.out_dir.exists() {
        let same = fs::canonicalize(&args.out_dir).ok() == fs::canonicalize(&args.in_dir).ok();
        if same {
            return Err(CliError::Usage("output directory must differ from the input".into()));
        }
    }
    let ds = load(&args.in_dir)?;
    let noise = noise_clips(args.noise_dir.as_deref())?;
    let profile = if noise.is_empty() { None } else { Some(noise_profile_for(&noise, &contract)?) };
    let spec = WavSpec::new(contract.target_rate, contract.target_channels.count() as u16, contract.target_bit_depth)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    for item in ds.items() {
        let out = apply_contract(&item.clip, &contract, profile.as_ref())
            .with_context(|| format!("preprocessing {}", item.path.display()))?;
        let bytes = write_wav(&out, &spec).context("encoding WAV")?;
        let name = item.path.file_name().expect("dataset files have names");
        write_file(&args.out_dir.join(&item.label).join(name), bytes)?;
    }
    println!(
        "Preprocessed {} file(s), skipped {}, wrote {}",
        ds.len(),
        ds.skipped().len(),
        args.out_dir.display()
    );
    Ok(())
}

fn checkpoint_path(model_out: &Path, step: usize) -> PathBuf {
    let mut name = model_out.as_os_str().to_owned();
    name.push(format!(".ckpt-{step}"));
    PathBuf::from(name)
}

fn cmd_train(args: &TrainArgs) -> CliResult {
    let contract = args.contract.contract()?;
    let fcfg = args.features.validated(contract.target_rate)?;
    let tcfg = args.training.config()?;
    let fractions = args.split.fractions()?;
    let ds = load(&args.data_dir)?;
    let noise = noise_clips(args.noise_dir.as_deref())?;
    let profile = if noise.is_empty() { None } else { Some(noise_profile_for(&noise, &contract)?) };
    let split = split_dataset(&ds, fractions, args.split.seed)?;
    println!("set_size={} train={} validation={} test={}", ds.len(), split.train.len(), split.validation.len(), split.test.len());

    if let Some(parent) = args.model_out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let mut report = format!(
        "# one step = one EM iteration; checkpoint every {} iterations, at most {}\n",
        tcfg.eval_every, tcfg.max_iters
    );
    let outcome = train_recognizer(&ds, &split, &contract, &fcfg, &tcfg, profile.as_ref(), &mut |ckpt| {
        let line = step_line(ckpt);
        println!("{line}");
        report.push_str(&line);
        report.push('\n');
        let path = checkpoint_path(&args.model_out, ckpt.step);
        save_checkpoint(&path, ckpt)?;
        println!("Saving to \"{}\"", path.display());
        Ok(())
    })?;

    let best = outcome.best_checkpoint();
    let selected = format!(
        "Selected checkpoint: step {} (validation accuracy = {:.1}%)",
        best.step,
        best.validation_accuracy()
    );
    println!("{selected}");
    report.push_str(&selected);
    report.push('\n');
    write_file(&args.model_out, outcome.recognizer.to_text())?;

    if !split.test.is_empty() {
        let test = evaluate(&outcome.recognizer, &ds, &split.test, profile.as_ref(), tcfg.reject_threshold)?;
        let block = format!(
            "Confusion Matrix:\n{}\n{}",
            test.confusion.to_bracketed(),
            final_line(&test.confusion)
        );
        println!("{block}");
        report.push_str(&block);
        report.push('\n');
    }
    if let Some(path) = &args.report {
        write_file(path, &report)?;
    }
    Ok(())
}

fn cmd_classify(args: &ClassifyArgs) -> CliResult {
    require_file(&args.model, "model")?;
    require_file(&args.wav, "wav")?;
    if args.top_k == 0 {
        return Err(CliError::Usage("--top-k must be at least 1".into()));
    }
    let rec = load_recognizer(&args.model)?;
    let noise = noise_clips(args.noise_dir.as_deref())?;
    let profile = if noise.is_empty() { None } else { Some(noise_profile_for(&noise, rec.contract())?) };
    let clip = read_clip(&args.wav)?;
    let feats = clip_features(&clip, rec.contract(), rec.feature_config(), profile.as_ref())?;
    let ranked = rec.classify(&feats).map_err(HarnessError::from)?;
    for (label, score) in ranked.iter().take(args.top_k) {
        println!("{label} (score = {score:.5})");
    }
    Ok(())
}

fn cmd_evaluate(args: &EvaluateArgs) -> CliResult {
    require_file(&args.model, "model")?;
    let fractions = args.split.fractions()?;
    if !(0.0..=1.0).contains(&args.reject_threshold) {
        return Err(CliError::Usage("--reject-threshold must lie in [0, 1]".into()));
    }
    let rec = load_recognizer(&args.model)?;
    let ds = load(&args.data_dir)?;
    let noise = noise_clips(args.noise_dir.as_deref())?;
    let profile = if noise.is_empty() { None } else { Some(noise_profile_for(&noise, rec.contract())?) };
    let split = split_dataset(&ds, fractions, args.split.seed)?;
    let indices = match args.split_select {
        SplitSelector::Train => split.train,
        SplitSelector::Validation => split.validation,
        SplitSelector::Test => split.test,
        SplitSelector::All => (0..ds.len()).collect(),
    };
    if indices.is_empty() {
        return Err(CliError::Runtime(anyhow!("the selected split is empty")));
    }
    let eval = evaluate(&rec, &ds, &indices, profile.as_ref(), args.reject_threshold)?;
    println!("Confusion Matrix:\n{}", eval.confusion.to_bracketed());
    println!("{}", final_line(&eval.confusion));
    let csv = args.csv.clone().unwrap_or_else(|| {
        let mut p = args.model.as_os_str().to_owned();
        p.push(".confusion.csv");
        PathBuf::from(p)
    });
    write_file(&csv, eval.confusion.to_csv())?;
    Ok(())
}

fn cmd_spectrogram(args: &SpectrogramArgs) -> CliResult {
    require_file(&args.wav, "wav")?;
    let clip = downmix(&read_clip(&args.wav)?);
    let fcfg = args.features.validated(clip.sample_rate())?;
    let image = spectrogram_with_floor(&clip, &fcfg, args.db_floor).map_err(|e| CliError::Usage(e.to_string()))?;
    write_file(&args.out, export_pgm(&image))?;
    println!("Wrote {}x{} spectrogram to {}", image.width(), image.height(), args.out.display());
    Ok(())
}

fn parse_cell(text: &str, duration: f64, bits: u16) -> Result<FormatContract, CliError> {
    let usage = || CliError::Usage(format!("grid cell '{text}' is not CHANNELS:RATE"));
    let (ch, rate) = text.split_once(':').ok_or_else(usage)?;
    let c = FormatContract {
        target_rate: rate.parse().map_err(|_| usage())?,
        target_channels: ch.parse().map_err(|_| usage())?,
        target_duration: duration,
        target_bit_depth: bits,
    };
    c.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(c)
}

fn cmd_experiment(args: &ExperimentArgs) -> CliResult {
    let grid = if args.cells.is_empty() {
        let mut g = ExperimentConfig::default();
        for c in &mut g.contracts {
            c.target_duration = args.target_duration;
            c.target_bit_depth = args.target_bit_depth;
            c.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        }
        g
    } else {
        ExperimentConfig {
            contracts: args
                .cells
                .iter()
                .map(|c| parse_cell(c, args.target_duration, args.target_bit_depth))
                .collect::<Result<_, _>>()?,
        }
    };
    let min_rate = grid.contracts.iter().map(|c| c.target_rate).min().unwrap();
    let fcfg = args.features.validated(min_rate)?;
    let tcfg = args.training.config()?;
    let fractions = args.split.fractions()?;
    let ds = load(&args.data_dir)?;
    let noise = noise_clips(args.noise_dir.as_deref())?;
    let split = split_dataset(&ds, fractions, args.split.seed)?;

    println!("# one step = one EM iteration; checkpoint every {} iterations, at most {}", tcfg.eval_every, tcfg.max_iters);
    let rows = run_experiment_grid(&ds, &split, &grid, &fcfg, &tcfg, &noise, &mut |c, ckpt| {
        println!("[{} {} Hz] {}", c.target_channels.name(), c.target_rate, step_line(ckpt));
        Ok(())
    })?;
    for (i, r) in rows.iter().enumerate() {
        println!("Test Case{} Confusion Matrix:\n{}", i + 1, r.test.confusion.to_bracketed());
        println!("Test Case{} {}", i + 1, final_line(&r.test.confusion));
    }
    println!();
    print!("{}", grid_report(&rows));
    println!();
    print!("{}", score_table(&rows));
    if let Some(dir) = &args.out_dir {
        write_file(&dir.join("grid.csv"), grid_csv(&rows))?;
        write_file(&dir.join("scores.csv"), score_csv(&rows))?;
        for (i, r) in rows.iter().enumerate() {
            write_file(&dir.join(format!("confusion_case{}.csv", i + 1)), r.test.confusion.to_csv())?;
        }
    }
    Ok(())
}

fn cmd_knn(args: &KnnArgs) -> CliResult {
    let contract = args.contract.contract()?;
    let fcfg = args.features.validated(contract.target_rate)?;
    let fractions = args.split.fractions()?;
    if args.k == 0 {
        return Err(CliError::Usage("--k must be at least 1".into()));
    }
    if args.pca_k == Some(0) || args.pca_k.is_some_and(|k| k > fcfg.dim()) {
        return Err(CliError::Usage(format!("--pca-k must lie in 1..={}", fcfg.dim())));
    }
    let ds = load(&args.data_dir)?;
    let noise = noise_clips(args.noise_dir.as_deref())?;
    let profile = if noise.is_empty() { None } else { Some(noise_profile_for(&noise, &contract)?) };
    let split = split_dataset(&ds, fractions, args.split.seed)?;
    let cfg = KnnConfig { k: args.k, pca_k: args.pca_k };
    let cm = knn_evaluate(&ds, &split, &contract, &fcfg, &cfg, profile.as_ref())?;
    println!("Confusion Matrix:\n{}", cm.to_bracketed());
    println!("{}", final_line(&cm));
    if let Some(path) = &args.csv {
        write_file(path, cm.to_csv())?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Preprocess(a) => cmd_preprocess(a),
        Command::Train(a) => cmd_train(a),
        Command::Classify(a) => cmd_classify(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Spectrogram(a) => cmd_spectrogram(a),
        Command::Experiment(a) => cmd_experiment(a),
        Command::Knn(a) => cmd_knn(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
