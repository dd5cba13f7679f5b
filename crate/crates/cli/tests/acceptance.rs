//! Acceptance suite. Each criterion prints one PASS or FAIL line; the process
//! exits nonzero if any criterion fails.

use std::f64::consts::PI;
use std::fs;
use std::panic;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use fauna_core::audio_io::{read_wav, write_wav, AudioClip, WavSpec};
use fauna_core::features::{
    deltas, export_pgm, parse_pgm, spectrogram, stft_magnitude, FeatureConfig, FeatureMatrix,
};
use fauna_core::harness::{
    evaluate, knn_evaluate, load_dataset, run_experiment_grid, split_dataset, train_recognizer,
    ConfusionMatrix, Dataset, DatasetItem, ExperimentConfig, KnnConfig, SplitFractions, TrainConfig,
};
use fauna_core::hmm::{
    em_train, flat_start, forward_log_likelihood, viterbi, EmOptions, EmTrainer, GaussianEmission,
    HmmModel, Recognizer,
};
use fauna_core::preprocess::{resample, spectral_subtract, FormatContract, NoiseProfile};
use fauna_core::synthetic::{synth_clip, write_corpus, SyntheticConfig, CLASSES};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)*) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)*));
        }
    };
}

fn main() {
    let criteria: [Criterion; 7] = [
        ("hmm_oracle_equivalence", hmm_oracle_equivalence),
        ("em_monotonicity", em_monotonicity),
        ("dsp_invariants", dsp_invariants),
        ("synthetic_end_to_end", synthetic_end_to_end),
        ("mismatched_rate_score_drop", mismatched_rate_score_drop),
        ("report_formats_and_determinism", report_formats_and_determinism),
        ("serialization_round_trips", serialization_round_trips),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, check) in criteria {
        let start = Instant::now();
        let result = panic::catch_unwind(check).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS {name}: {detail} [{secs:.2}s]"),
            Err(reason) => {
                failed += 1;
                println!("FAIL {name}: {reason} [{secs:.2}s]");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------------------
// HMM oracle

const NINF: f64 = f64::NEG_INFINITY;

/// Toy left-to-right model in plain probabilities.
struct Toy {
    trans: Vec<Vec<f64>>,
    exit: Vec<f64>,
    mean: Vec<Vec<f64>>,
    var: Vec<Vec<f64>>,
}

fn random_toy(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Toy {
    let mut trans = vec![vec![0.0; n]; n];
    let mut exit = vec![0.0; n];
    for i in 0..n {
        let stay = rng.random_range(0.05..1.0);
        let go = if i + 1 < n { rng.random_range(0.05..1.0) } else { 0.0 };
        let out = rng.random_range(0.05..1.0);
        let sum = stay + go + out;
        trans[i][i] = stay / sum;
        if i + 1 < n {
            trans[i][i + 1] = go / sum;
        }
        exit[i] = 1.0 - trans[i].iter().sum::<f64>();
    }
    let mean = (0..n).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
    let var = (0..n).map(|_| (0..d).map(|_| rng.random_range(0.2..3.0)).collect()).collect();
    Toy { trans, exit, mean, var }
}

fn ln(p: f64) -> f64 {
    if p > 0.0 {
        p.ln()
    } else {
        NINF
    }
}

fn to_model(toy: &Toy) -> HmmModel {
    let n = toy.exit.len();
    let mut entry = vec![NINF; n];
    entry[0] = 0.0;
    HmmModel::new(
        entry,
        toy.trans.iter().map(|r| r.iter().map(|&p| ln(p)).collect()).collect(),
        toy.exit.iter().map(|&p| ln(p)).collect(),
        toy.mean
            .iter()
            .zip(&toy.var)
            .map(|(m, v)| GaussianEmission::new(m.clone(), v.clone(), 1e-6).unwrap())
            .collect(),
    )
    .unwrap()
}

fn gauss_log(mean: &[f64], var: &[f64], y: &[f64]) -> f64 {
    (0..y.len())
        .map(|k| -0.5 * (2.0 * PI * var[k]).ln() - (y[k] - mean[k]).powi(2) / (2.0 * var[k]))
        .sum()
}

/// Sums and maximizes over all `n^T` state sequences starting in state 0.
fn enumerate(toy: &Toy, ys: &[Vec<f64>]) -> (f64, f64) {
    let n = toy.exit.len();
    let t_len = ys.len();
    let total = n.pow(t_len as u32);
    let mut logs = Vec::new();
    for code in 0..total {
        let path: Vec<usize> = (0..t_len).map(|t| code / n.pow(t as u32) % n).collect();
        if path[0] != 0 {
            continue;
        }
        let mut lp = 0.0;
        for t in 0..t_len {
            lp += gauss_log(&toy.mean[path[t]], &toy.var[path[t]], &ys[t]);
            lp += ln(if t + 1 < t_len { toy.trans[path[t]][path[t + 1]] } else { toy.exit[path[t]] });
        }
        logs.push(lp);
    }
    let max = logs.iter().cloned().fold(NINF, f64::max);
    if max == NINF {
        return (NINF, NINF);
    }
    (max + logs.iter().map(|l| (l - max).exp()).sum::<f64>().ln(), max)
}

fn random_rows(rng: &mut ChaCha8Rng, t: usize, d: usize) -> Vec<Vec<f64>> {
    (0..t).map(|_| (0..d).map(|_| rng.random_range(-3.0..3.0)).collect()).collect()
}

fn fm(rows: Vec<Vec<f64>>) -> FeatureMatrix {
    FeatureMatrix::from_rows(rows).unwrap()
}

fn hmm_oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let models = 150;
    let mut worst: f64 = 0.0;
    for case in 0..models {
        let n = rng.random_range(1..=4);
        let d = rng.random_range(1..=3);
        let t = rng.random_range(n..=6);
        let toy = random_toy(&mut rng, n, d);
        let model = to_model(&toy);
        let rows = random_rows(&mut rng, t, d);
        let (sum, max) = enumerate(&toy, &rows);
        let f = fm(rows);
        let fwd = forward_log_likelihood(&model, &f).map_err(|e| e.to_string())?;
        let (_, vit) = viterbi(&model, &f).map_err(|e| e.to_string())?;
        let err = (fwd - sum).abs().max((vit - max).abs());
        ensure!(err <= 1e-9, "model {case}: forward {fwd} vs {sum}, viterbi {vit} vs {max}");
        worst = worst.max(err);
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(10), "took {elapsed:?}");
    Ok(format!("{models} models, max abs error {worst:.2e}"))
}

// ---------------------------------------------------------------------------
// EM

fn em_monotonicity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let datasets = 24;
    let mut worst_dip: f64 = 0.0;
    for case in 0..datasets {
        let n = rng.random_range(1..=4);
        let d = rng.random_range(1..=3);
        let data: Vec<FeatureMatrix> = (0..rng.random_range(2..=6))
            .map(|_| {
                let t = rng.random_range(n.max(3)..=20);
                fm(random_rows(&mut rng, t, d))
            })
            .collect();
        let init = flat_start(&data, n, 1e-3).map_err(|e| e.to_string())?;
        let mut trainer = EmTrainer::new(init, &data, 0.0).map_err(|e| e.to_string())?;
        for _ in 0..15 {
            trainer.step().map_err(|e| e.to_string())?;
        }
        for w in trainer.history().windows(2) {
            worst_dip = worst_dip.max(w[0] - w[1]);
            ensure!(w[1] >= w[0] - 1e-8, "dataset {case}: {} then {}", w[0], w[1]);
        }
    }

    let mut worst_ml: f64 = 0.0;
    for case in 0..10 {
        let d = rng.random_range(1..=4);
        let data: Vec<FeatureMatrix> = (0..rng.random_range(1..=5))
            .map(|_| {
                let t = rng.random_range(1..=30);
                fm(random_rows(&mut rng, t, d))
            })
            .collect();
        let frames: Vec<&[f64]> = data.iter().flat_map(|f| f.rows()).collect();
        let count = frames.len() as f64;
        let mean: Vec<f64> = (0..d).map(|k| frames.iter().map(|y| y[k]).sum::<f64>() / count).collect();
        let var: Vec<f64> = (0..d)
            .map(|k| (frames.iter().map(|y| (y[k] - mean[k]).powi(2)).sum::<f64>() / count).max(1e-3))
            .collect();
        let init = flat_start(&data, 1, 1e-3).map_err(|e| e.to_string())?;
        let (model, _) = em_train(init, &data, EmOptions::default()).map_err(|e| e.to_string())?;
        let g = &model.emissions()[0];
        for k in 0..d {
            let err = (g.mean()[k] - mean[k]).abs().max((g.variance()[k] - var[k]).abs());
            ensure!(err <= 1e-9, "single-state case {case}: dim {k} off by {err:e}");
            worst_ml = worst_ml.max(err);
        }
    }
    Ok(format!(
        "{datasets} datasets, largest dip {worst_dip:.2e}; 1-state ML max error {worst_ml:.2e}"
    ))
}

// ---------------------------------------------------------------------------
// DSP

fn noise(rng: &mut ChaCha8Rng, len: usize, amp: f64) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-amp..amp)).collect()
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

fn stft_parseval(rng: &mut ChaCha8Rng) -> Result<f64, String> {
    let rate = 16000;
    let x = noise(rng, 4801, 0.8);
    let clip = AudioClip::mono(x.clone(), rate).unwrap();
    let mut worst: f64 = 0.0;
    // frame equal to and shorter than the FFT size
    for frame_ms in [32.0, 25.0] {
        let cfg = FeatureConfig { frame_ms, ..FeatureConfig::default() };
        let framing = cfg.framing(rate).map_err(|e| e.to_string())?;
        let (len, hop, n) = (framing.frame_len, framing.hop, framing.fft_size as f64);
        let mags = stft_magnitude(&clip, &cfg).map_err(|e| e.to_string())?;
        for (t, bins) in mags.iter().enumerate() {
            let time_energy: f64 = (0..len)
                .map(|i| {
                    let w = 0.5 - 0.5 * (2.0 * PI * i as f64 / len as f64).cos();
                    let s = x.get(t * hop + i).copied().unwrap_or(0.0);
                    (w * s).powi(2)
                })
                .sum();
            let last = bins.len() - 1;
            let freq_energy = (bins[0].powi(2)
                + bins[last].powi(2)
                + 2.0 * bins[1..last].iter().map(|m| m * m).sum::<f64>())
                / n;
            if time_energy == 0.0 {
                ensure!(freq_energy == 0.0, "frame {t}: energy {freq_energy:e} from a silent frame");
                continue;
            }
            let rel = (freq_energy - time_energy).abs() / time_energy;
            ensure!(rel <= 1e-6, "frame {t} ({frame_ms} ms): relative error {rel:e}");
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

fn zero_profile_subtraction(rng: &mut ChaCha8Rng) -> Result<f64, String> {
    let rate = 16000;
    let clip = AudioClip::new(vec![noise(rng, 16000, 0.5), noise(rng, 16000, 0.5)], rate).unwrap();
    let profile = NoiseProfile::silent(512, rate).map_err(|e| e.to_string())?;
    let out = spectral_subtract(&clip, &profile).map_err(|e| e.to_string())?;
    ensure!(out.frames() == clip.frames(), "length changed to {}", out.frames());
    let mut worst: f64 = 0.0;
    for c in 0..2 {
        let diff: Vec<f64> = out.channel(c).iter().zip(clip.channel(c)).map(|(a, b)| a - b).collect();
        let err = rms(&diff);
        ensure!(err <= 1e-6, "channel {c}: rms error {err:e}");
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Least-squares amplitude of a sinusoid at `freq` over the middle half.
fn tone_amplitude(x: &[f64], freq: f64, rate: u32) -> f64 {
    let (mut ss, mut sc, mut cc, mut ys, mut yc) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (i, &y) in x.iter().enumerate().take(3 * x.len() / 4).skip(x.len() / 4) {
        let (s, c) = (2.0 * PI * freq * i as f64 / f64::from(rate)).sin_cos();
        ss += s * s;
        sc += s * c;
        cc += c * c;
        ys += y * s;
        yc += y * c;
    }
    let det = ss * cc - sc * sc;
    let a = (ys * cc - yc * sc) / det;
    let b = (yc * ss - ys * sc) / det;
    (a * a + b * b).sqrt()
}

fn resampled_tone(freq: f64, from: u32, to: u32) -> Vec<f64> {
    let x: Vec<f64> = (0..from as usize)
        .map(|i| 0.5 * (2.0 * PI * freq * i as f64 / f64::from(from)).sin())
        .collect();
    resample(&AudioClip::mono(x, from).unwrap(), to).unwrap().channel(0).to_vec()
}

/// Passband up to 0.9 of the lower Nyquist frequency; stopband from 1.1.
fn resampler_response() -> Result<(f64, f64), String> {
    let mut worst_gain: f64 = 0.0;
    let mut worst_alias = f64::NEG_INFINITY;
    for (from, to) in [(32000, 16000), (16000, 32000), (44100, 16000), (48000, 32000), (16000, 8000)] {
        let nyquist = f64::from(from.min(to)) / 2.0;
        for step in 1..=18 {
            let f = nyquist * 0.05 * step as f64;
            let gain = tone_amplitude(&resampled_tone(f, from, to), f, to) / 0.5;
            ensure!((gain - 1.0).abs() <= 0.01, "{from}->{to} Hz: gain {gain} at {f} Hz");
            worst_gain = worst_gain.max((gain - 1.0).abs());
        }
        if from > to {
            let input_nyquist = f64::from(from) / 2.0;
            let mut f = 1.1 * nyquist;
            while f < 0.98 * input_nyquist {
                let y = resampled_tone(f, from, to);
                let m = y.len();
                let db = 20.0 * (rms(&y[m / 4..3 * m / 4]) / (0.5 / 2f64.sqrt())).log10();
                ensure!(db <= -40.0, "{from}->{to} Hz: alias at {f} Hz only {db:.1} dB down");
                worst_alias = worst_alias.max(db);
                f += 0.1 * nyquist;
            }
        }
    }
    Ok((worst_gain, worst_alias))
}

fn delta_exactness() -> Result<(), String> {
    for n in 1..=3 {
        let t_len = 12;
        let constant = fm(vec![vec![2.5, -7.0, 0.125]; t_len]);
        let d = deltas(&constant, n).map_err(|e| e.to_string())?;
        ensure!(d.rows().flatten().all(|&v| v == 0.0), "window {n}: constant input gave nonzero delta");

        let slopes = [3.0, -0.25, 0.0];
        let ramp = fm((0..t_len).map(|t| slopes.iter().map(|s| 5.0 + s * t as f64).collect()).collect());
        let d = deltas(&ramp, n).map_err(|e| e.to_string())?;
        for t in n..t_len - n {
            ensure!(d.row(t) == slopes, "window {n}, frame {t}: {:?}", d.row(t));
        }
    }
    Ok(())
}

fn dsp_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let parseval = stft_parseval(&mut rng)?;
    let identity = zero_profile_subtraction(&mut rng)?;
    let (gain, alias) = resampler_response()?;
    delta_exactness()?;
    Ok(format!(
        "Parseval rel {parseval:.1e}, zero-profile rms {identity:.1e}, \
         passband dev {:.3}%, worst alias {alias:.1} dB, deltas exact",
        gain * 100.0
    ))
}

// ---------------------------------------------------------------------------
// Synthetic corpus

fn write_synthetic(dir: &Path, clips_per_class: usize) -> Dataset {
    let cfg = SyntheticConfig { clips_per_class, ..SyntheticConfig::default() };
    write_corpus(dir, &cfg).unwrap();
    load_dataset(dir).unwrap()
}

fn wider_split() -> SplitFractions {
    SplitFractions { train: 0.6, validation: 0.2, test: 0.2 }
}

fn off_diagonal_share(cm: &ConfusionMatrix) -> f64 {
    (cm.total() - cm.trace()) as f64 / cm.total() as f64
}

fn synthetic_end_to_end() -> Outcome {
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let ds = write_synthetic(tmp.path(), 30);
    ensure!(ds.len() == 120, "corpus has {} clips", ds.len());
    let split = split_dataset(&ds, wider_split(), 0).map_err(|e| e.to_string())?;
    let contract = FormatContract::default();
    let fcfg = FeatureConfig::default();
    let cfg = TrainConfig::default();

    let outcome = train_recognizer(&ds, &split, &contract, &fcfg, &cfg, None, &mut |_| Ok(()))
        .map_err(|e| e.to_string())?;
    let hmm = evaluate(&outcome.recognizer, &ds, &split.test, None, 0.0).map_err(|e| e.to_string())?;
    let knn = knn_evaluate(&ds, &split, &contract, &fcfg, &KnnConfig::default(), None)
        .map_err(|e| e.to_string())?;

    let hmm_acc = hmm.confusion.accuracy();
    let knn_acc = knn.accuracy();
    ensure!(hmm_acc >= 95.0, "HMM test accuracy {hmm_acc:.1}%");
    ensure!(knn_acc >= 95.0, "k-NN test accuracy {knn_acc:.1}%");
    let hmm_off = off_diagonal_share(&hmm.confusion);
    let knn_off = off_diagonal_share(&knn);
    ensure!(hmm_off <= 0.05, "HMM off-diagonal share {hmm_off:.3}");
    ensure!(knn_off <= 0.05, "k-NN off-diagonal share {knn_off:.3}");
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(120), "took {elapsed:?}");
    Ok(format!(
        "HMM {hmm_acc:.1}% and k-NN {knn_acc:.1}% on N={}, off-diagonal {:.1}% / {:.1}%",
        hmm.confusion.total(),
        hmm_off * 100.0,
        knn_off * 100.0
    ))
}

/// Class index and clip index from a `<label>_NNN.wav` name.
fn synthetic_origin(path: &Path) -> (usize, usize) {
    let stem = path.file_stem().unwrap().to_str().unwrap();
    let (label, index) = stem.rsplit_once('_').unwrap();
    let class = CLASSES.iter().position(|(l, _)| *l == label).unwrap();
    (class, index.parse().unwrap())
}

fn mismatched_rate_score_drop() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let ds = write_synthetic(tmp.path(), 30);
    let split = split_dataset(&ds, wider_split(), 0).map_err(|e| e.to_string())?;
    let grid = ExperimentConfig::default();
    let rows = run_experiment_grid(
        &ds,
        &split,
        &grid,
        &FeatureConfig::default(),
        &TrainConfig::default(),
        &[],
        &mut |_, _| Ok(()),
    )
    .map_err(|e| e.to_string())?;

    // the same calls rendered at 32 kHz but declared as 16 kHz
    let hi_rate = SyntheticConfig { sample_rate: 32000, ..SyntheticConfig::default() };
    let items: Vec<DatasetItem> = split
        .test
        .iter()
        .map(|&i| {
            let item = &ds.items()[i];
            let (class, index) = synthetic_origin(&item.path);
            let clip = synth_clip(&hi_rate, class, index).with_declared_rate(16000).unwrap();
            DatasetItem { label: item.label.clone(), path: item.path.clone(), clip }
        })
        .collect();
    let mismatched = Dataset::from_items(items);
    let all: Vec<usize> = (0..mismatched.len()).collect();

    let mut cells = Vec::new();
    for row in &rows {
        let matched = row.test.mean_true_score();
        let wrong = evaluate(&row.outcome.recognizer, &mismatched, &all, None, 0.0)
            .map_err(|e| e.to_string())?
            .mean_true_score();
        let c = &row.contract;
        let name = format!("{} {} Hz", c.target_channels.name(), c.target_rate);
        ensure!(
            matched - wrong >= 0.2,
            "{name}: matched {matched:.3}, mismatched {wrong:.3}, drop {:.3}",
            matched - wrong
        );
        cells.push(format!("{name} {matched:.3}->{wrong:.3}"));
    }
    Ok(cells.join(", "))
}

// ---------------------------------------------------------------------------
// CLI reports

fn fauna(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fauna"))
        .current_dir(dir)
        .args(args)
        .env_remove("FAUNA_SEED")
        .output()
        .unwrap()
}

fn stdout_of(out: &Output) -> Result<String, String> {
    ensure!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    Ok(String::from_utf8(out.stdout.clone()).unwrap())
}

/// Parses "X.X% (N=K)" into (percent, K).
fn parse_accuracy(text: &str) -> Option<(f64, u64)> {
    let (pct, rest) = text.split_once("% (N=")?;
    let n = rest.strip_suffix(')')?;
    let (whole, frac) = pct.split_once('.')?;
    if frac.len() != 1 || !whole.chars().all(|c| c.is_ascii_digit()) {
        return None;
    }
    Some((pct.parse().ok()?, n.parse().ok()?))
}

fn check_step_line(line: &str) -> Result<(), String> {
    let parsed = line
        .strip_prefix("Step ")
        .and_then(|r| r.split_once(": Validation accuracy = "))
        .and_then(|(step, acc)| step.parse::<usize>().ok().zip(parse_accuracy(acc)));
    ensure!(parsed.is_some(), "bad step line {line:?}");
    Ok(())
}

fn final_accuracy(stdout: &str) -> Result<(f64, u64), String> {
    let line = stdout
        .lines()
        .find_map(|l| l.strip_prefix("Final test accuracy = "))
        .ok_or("no final accuracy line")?;
    parse_accuracy(line).ok_or_else(|| format!("bad final line {line:?}"))
}

/// Rows of the bracketed matrix following "Confusion Matrix:".
fn printed_matrix(stdout: &str) -> Vec<Vec<u64>> {
    stdout
        .lines()
        .skip_while(|l| *l != "Confusion Matrix:")
        .skip(1)
        .take_while(|l| l.trim_start().starts_with('['))
        .map(|l| {
            l.replace(['[', ']'], " ")
                .split_whitespace()
                .map(|v| v.parse().unwrap())
                .collect()
        })
        .collect()
}

fn csv_matrix(text: &str) -> Vec<Vec<u64>> {
    text.lines()
        .skip(1)
        .map(|l| l.split(',').skip(1).map(|v| v.parse().unwrap()).collect())
        .collect()
}

fn check_classify_line(line: &str, labels: &[&str]) -> Result<f64, String> {
    let bad = || format!("bad classify line {line:?}");
    let (label, rest) = line.split_once(" (score = ").ok_or_else(bad)?;
    let score = rest.strip_suffix(')').ok_or_else(bad)?;
    let (whole, frac) = score.split_once('.').ok_or_else(bad)?;
    ensure!(labels.contains(&label), "unknown label in {line:?}");
    ensure!(whole.len() == 1 && frac.len() == 5, "score not 5 decimals in {line:?}");
    score.parse().map_err(|_| bad())
}

fn read(path: PathBuf) -> Vec<u8> {
    fs::read(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn report_formats_and_determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    write_synthetic(&data, 12);
    let data = data.to_str().unwrap();
    let train_args = [
        "train", "--data-dir", data, "--model-out", "model.hmm", "--report", "report.txt",
        "--seed", "5", "--max-iters", "10", "--eval-every", "5", "--train-fraction", "0.6",
        "--validation-fraction", "0.2", "--test-fraction", "0.2",
    ];

    let runs: Vec<(PathBuf, String)> = ["a", "b"]
        .iter()
        .map(|name| {
            let dir = tmp.path().join(name);
            fs::create_dir(&dir).unwrap();
            let out = stdout_of(&fauna(&dir, &train_args))?;
            Ok((dir, out))
        })
        .collect::<Result<_, String>>()?;
    let (dir, train_out) = &runs[0];
    ensure!(train_out == &runs[1].1, "train stdout differs between runs");
    for file in ["model.hmm", "report.txt", "model.hmm.ckpt-0", "model.hmm.ckpt-10"] {
        ensure!(read(dir.join(file)) == read(runs[1].0.join(file)), "{file} differs between runs");
    }
    let steps: Vec<&str> = train_out.lines().filter(|l| l.starts_with("Step ")).collect();
    ensure!(steps.len() == 3, "expected 3 checkpoints, saw {}", steps.len());
    for line in &steps {
        check_step_line(line)?;
    }
    let (_, train_n) = final_accuracy(train_out)?;

    let labels: Vec<&str> = CLASSES.iter().map(|(l, _)| *l).collect();
    let wav = format!("{data}/tone_800/tone_800_000.wav");
    let out = stdout_of(&fauna(dir, &["classify", "--model", "model.hmm", "--wav", &wav, "--top-k", "4"]))?;
    let scores = out.lines().map(|l| check_classify_line(l, &labels)).collect::<Result<Vec<_>, _>>()?;
    ensure!(scores.len() == 4, "classify printed {} lines", scores.len());
    ensure!(scores.windows(2).all(|w| w[0] >= w[1]), "scores not descending");

    let eval_args = [
        "evaluate", "--model", "model.hmm", "--data-dir", data, "--seed", "5", "--csv", "eval.csv",
        "--train-fraction", "0.6", "--validation-fraction", "0.2", "--test-fraction", "0.2",
    ];
    let eval_out = stdout_of(&fauna(dir, &eval_args))?;
    let csv = String::from_utf8(read(dir.join("eval.csv"))).unwrap();
    let (_, eval_n) = final_accuracy(&eval_out)?;
    let printed = printed_matrix(&eval_out);
    let from_csv = csv_matrix(&csv);
    ensure!(!printed.is_empty() && printed == from_csv, "printed matrix {printed:?} vs CSV {from_csv:?}");
    let row_sums: Vec<u64> = from_csv.iter().map(|r| r.iter().sum()).collect();
    let printed_sums: Vec<u64> = printed.iter().map(|r| r.iter().sum()).collect();
    ensure!(row_sums == printed_sums, "row sums {row_sums:?} vs {printed_sums:?}");
    ensure!(row_sums.iter().sum::<u64>() == eval_n, "row sums total differs from N={eval_n}");
    ensure!(eval_n == train_n, "evaluate N={eval_n} but train reported N={train_n}");

    let again = stdout_of(&fauna(dir, &eval_args))?;
    ensure!(again == eval_out, "evaluate stdout differs between runs");
    ensure!(read(dir.join("eval.csv")) == csv.as_bytes(), "evaluate CSV differs between runs");
    Ok(format!("{} step lines, N={eval_n}, reruns bit-identical", steps.len()))
}

// ---------------------------------------------------------------------------
// Serialization

fn wav_round_trip() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for bits in [8u16, 16] {
        for channels in [1usize, 2] {
            let clip = AudioClip::new((0..channels).map(|_| noise(&mut rng, 999, 1.0)).collect(), 22050).unwrap();
            let spec = WavSpec::new(22050, channels as u16, bits).unwrap();
            let bytes = write_wav(&clip, &spec).map_err(|e| e.to_string())?;
            let (back, back_spec) = read_wav(&bytes).map_err(|e| e.to_string())?;
            ensure!(back_spec == spec, "spec changed: {back_spec:?}");
            ensure!(back.frames() == clip.frames(), "frame count changed");
            let lsb = 1.0 / f64::from(1u32 << (bits - 1));
            for c in 0..channels {
                let err = back
                    .channel(c)
                    .iter()
                    .zip(clip.channel(c))
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                ensure!(err <= lsb, "{bits}-bit channel {c}: error {err} > {lsb}");
            }
            let again = write_wav(&back, &spec).map_err(|e| e.to_string())?;
            ensure!(again == bytes, "{bits}-bit re-encode is not byte-identical");
        }
    }
    Ok(())
}

fn model_round_trip() -> Result<(), String> {
    let tmp = tempfile::tempdir().unwrap();
    let ds = write_synthetic(tmp.path(), 6);
    let split = split_dataset(&ds, SplitFractions { train: 0.7, validation: 0.0, test: 0.3 }, 2)
        .map_err(|e| e.to_string())?;
    let cfg = TrainConfig { max_iters: 4, eval_every: 4, ..TrainConfig::default() };
    let rec = train_recognizer(
        &ds,
        &split,
        &FormatContract::default(),
        &FeatureConfig::default(),
        &cfg,
        None,
        &mut |_| Ok(()),
    )
    .map_err(|e| e.to_string())?
    .recognizer;
    let text = rec.to_text();
    let back = Recognizer::from_text(&text).map_err(|e| e.to_string())?;
    ensure!(back.to_text() == text, "model text changes on a second save");
    let all: Vec<usize> = (0..ds.len()).collect();
    let a = evaluate(&rec, &ds, &all, None, 0.0).map_err(|e| e.to_string())?;
    let b = evaluate(&back, &ds, &all, None, 0.0).map_err(|e| e.to_string())?;
    for (x, y) in a.ranked.iter().flatten().zip(b.ranked.iter().flatten()) {
        ensure!(x.0 == y.0 && x.1.to_bits() == y.1.to_bits(), "score {x:?} became {y:?}");
    }
    Ok(())
}

fn pgm_round_trip() -> Result<(), String> {
    let clip = synth_clip(&SyntheticConfig::default(), 2, 0);
    let image = spectrogram(&clip, &FeatureConfig::default()).map_err(|e| e.to_string())?;
    let bytes = export_pgm(&image);
    let (w, h, pixels) = parse_pgm(&bytes).map_err(|e| e.to_string())?;
    ensure!((w, h) == (image.width(), image.height()), "size {w}x{h}");
    ensure!(pixels.len() == w * h, "{} pixels for {w}x{h}", pixels.len());
    ensure!(bytes.ends_with(&pixels), "pixel payload altered");
    ensure!(pixels.contains(&255), "no pixel reaches full scale");
    Ok(())
}

fn serialization_round_trips() -> Outcome {
    wav_round_trip()?;
    model_round_trip()?;
    pgm_round_trip()?;
    Ok("WAV within 1 LSB, model scores bit-identical, PGM re-parses".into())
}
