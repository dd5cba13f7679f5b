//! Seeded synthetic call corpus: two steady tones and two linear sweeps.
//!
//! Each clip places one call at a random onset inside a one-second clip,
//! with a sharp attack and exponential decay, random amplitude, a small frequency jitter and white noise scaled to
//! the requested SNR. Every clip draws from its own ChaCha stream, so the
//! same (seed, class, index) describes the same call at any sample rate.

use std::f64::consts::PI;
use std::fs;
use std::io;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::audio_io::{write_wav, AudioClip, WavSpec};
use crate::dsp::rms;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CallShape {
    Tone(f64),
    Sweep { from: f64, to: f64 },
}

pub const CLASSES: [(&str, CallShape); 4] = [
    ("tone_800", CallShape::Tone(800.0)),
    ("tone_2400", CallShape::Tone(2400.0)),
    ("sweep_up", CallShape::Sweep { from: 500.0, to: 3000.0 }),
    ("sweep_down", CallShape::Sweep { from: 3000.0, to: 500.0 }),
];

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub clips_per_class: usize,
    pub sample_rate: u32,
    pub duration: f64,
    pub snr_db: f64,
    pub channels: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            clips_per_class: 30,
            sample_rate: 16000,
            duration: 1.0,
            snr_db: 20.0,
            channels: 1,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticClip {
    pub label: String,
    pub file_name: String,
    pub clip: AudioClip,
}

/// Natural-log amplitude drop over one call. The decay makes a sweep louder
/// near its starting frequency, so up and down sweeps differ even after
/// averaging over time.
const DECAY_PER_CALL: f64 = 2.5;

fn call(shape: CallShape, rng: &mut ChaCha8Rng, rate: u32, len: usize) -> Vec<f64> {
    let jitter = 1.0 + rng.random_range(-0.03..0.03);
    let amp = rng.random_range(0.3..0.7);
    let total = len as f64 / f64::from(rate);
    let dur = rng.random_range(0.5..0.75) * total;
    let onset = rng.random_range(0.0..(total - dur));
    let phase0 = rng.random_range(0.0..2.0 * PI);
    let fade = 0.01;
    (0..len)
        .map(|n| {
            let t = n as f64 / f64::from(rate) - onset;
            if !(0.0..dur).contains(&t) {
                return 0.0;
            }
            let phase = match shape {
                CallShape::Tone(f) => 2.0 * PI * f * jitter * t,
                CallShape::Sweep { from, to } => {
                    let (f0, f1) = (from * jitter, to * jitter);
                    2.0 * PI * (f0 * t + (f1 - f0) * t * t / (2.0 * dur))
                }
            };
            let edge = (t.min(dur - t) / fade).min(1.0);
            let ramp = 0.5 - 0.5 * (PI * edge).cos();
            let decay = (-DECAY_PER_CALL * t / dur).exp();
            amp * ramp * decay * (phase + phase0).sin()
        })
        .collect()
}

fn add_noise(signal: &[f64], snr_db: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let sigma = rms(signal) / 10f64.powf(snr_db / 20.0);
    signal
        .iter()
        .map(|s| {
            let z: f64 = StandardNormal.sample(rng);
            (s + sigma * z).clamp(-1.0, 1.0)
        })
        .collect()
}

/// One clip of class `class` (index into [`CLASSES`]).
pub fn synth_clip(config: &SyntheticConfig, class: usize, index: usize) -> AudioClip {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream((class as u64) << 32 | index as u64);
    let len = (config.duration * f64::from(config.sample_rate)).round() as usize;
    let signal = call(CLASSES[class].1, &mut rng, config.sample_rate, len);
    let channels = (0..config.channels.max(1))
        .map(|_| add_noise(&signal, config.snr_db, &mut rng))
        .collect();
    AudioClip::new(channels, config.sample_rate).expect("synthetic samples are clamped")
}

pub fn generate_corpus(config: &SyntheticConfig) -> Vec<SyntheticClip> {
    let mut out = Vec::with_capacity(CLASSES.len() * config.clips_per_class);
    for (c, (label, _)) in CLASSES.iter().enumerate() {
        for i in 0..config.clips_per_class {
            out.push(SyntheticClip {
                label: label.to_string(),
                file_name: format!("{label}_{i:03}.wav"),
                clip: synth_clip(config, c, i),
            });
        }
    }
    out
}

/// Writes the corpus as `<root>/<label>/<label>_NNN.wav`, 16-bit PCM.
pub fn write_corpus(root: &Path, config: &SyntheticConfig) -> io::Result<usize> {
    let corpus = generate_corpus(config);
    for item in &corpus {
        let dir = root.join(&item.label);
        fs::create_dir_all(&dir)?;
        let spec = WavSpec::new(config.sample_rate, item.clip.num_channels() as u16, 16)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e))?;
        let bytes = write_wav(&item.clip, &spec)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e))?;
        fs::write(dir.join(&item.file_name), bytes)?;
    }
    Ok(corpus.len())
}
