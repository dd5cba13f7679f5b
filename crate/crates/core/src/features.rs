//! MFCC (+delta, +delta-delta) extraction and log-magnitude spectrograms.

use std::fmt::Write as _;

use thiserror::Error;

use crate::audio_io::AudioClip;
use crate::dsp::{self, FftPair};

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("clip has no samples")]
    EmptyClip,
    #[error("feature extraction needs a mono clip, got {0} channels")]
    NotMono(usize),
    #[error("invalid feature config: {0}")]
    InvalidConfig(String),
    #[error("delta window must be >= 1, got {0}")]
    InvalidDeltaWindow(usize),
    #[error("feature matrix: {0}")]
    InvalidMatrix(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureConfig {
    pub frame_ms: f64,
    pub hop_ms: f64,
    /// `None` picks the smallest power of two holding one frame.
    pub fft_size: Option<usize>,
    pub num_mel_filters: usize,
    pub num_cepstra: usize,
    pub mel_low: f64,
    /// `None` means `0.45 * sample_rate`.
    pub mel_high: Option<f64>,
    pub delta_window: usize,
    pub include_deltas: bool,
    pub preemphasis: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            frame_ms: 25.0,
            hop_ms: 10.0,
            fft_size: None,
            num_mel_filters: 20,
            num_cepstra: 13,
            mel_low: 300.0,
            mel_high: None,
            delta_window: 2,
            include_deltas: true,
            preemphasis: 0.97,
        }
    }
}

/// Sample-domain framing derived from a config at a given rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Framing {
    pub frame_len: usize,
    pub hop: usize,
    pub fft_size: usize,
}

impl Framing {
    /// `1 + floor((n - 1) / hop)` frames for `n >= 1` samples.
    pub fn num_frames(&self, n: usize) -> usize {
        if n == 0 {
            0
        } else {
            1 + (n - 1) / self.hop
        }
    }
}

impl FeatureConfig {
    pub fn framing(&self, rate: u32) -> Result<Framing, FeatureError> {
        let bad = |m: String| Err(FeatureError::InvalidConfig(m));
        if !(self.hop_ms > 0.0 && self.hop_ms <= self.frame_ms) {
            return bad(format!(
                "need 0 < hop_ms <= frame_ms, got hop {} frame {}",
                self.hop_ms, self.frame_ms
            ));
        }
        let ms_to_samples = |ms: f64| (ms * f64::from(rate) / 1000.0).round() as usize;
        let frame_len = ms_to_samples(self.frame_ms);
        let hop = ms_to_samples(self.hop_ms);
        if frame_len == 0 || hop == 0 {
            return bad(format!("frame or hop rounds to zero samples at {rate} Hz"));
        }
        let fft_size = match self.fft_size {
            Some(n) if n < frame_len || !n.is_power_of_two() => {
                return bad(format!(
                    "fft_size {n} must be a power of two >= frame length {frame_len}"
                ))
            }
            Some(n) => n,
            None => frame_len.next_power_of_two(),
        };
        Ok(Framing {
            frame_len,
            hop,
            fft_size,
        })
    }

    pub fn mel_high_for(&self, rate: u32) -> f64 {
        self.mel_high.unwrap_or(0.45 * f64::from(rate))
    }

    pub fn validate(&self, rate: u32) -> Result<Framing, FeatureError> {
        let framing = self.framing(rate)?;
        let bad = |m: String| Err(FeatureError::InvalidConfig(m));
        if self.num_cepstra == 0 || self.num_cepstra > self.num_mel_filters {
            return bad(format!(
                "need 1 <= num_cepstra <= num_mel_filters, got {} and {}",
                self.num_cepstra, self.num_mel_filters
            ));
        }
        let high = self.mel_high_for(rate);
        if !(self.mel_low >= 0.0 && self.mel_low < high && high <= f64::from(rate) / 2.0) {
            return bad(format!(
                "need 0 <= mel_low < mel_high <= {} Hz, got {} and {high}",
                f64::from(rate) / 2.0,
                self.mel_low
            ));
        }
        if self.include_deltas && self.delta_window == 0 {
            return Err(FeatureError::InvalidDeltaWindow(0));
        }
        if !self.preemphasis.is_finite() {
            return bad("preemphasis must be finite".into());
        }
        Ok(framing)
    }

    pub fn dim(&self) -> usize {
        if self.include_deltas {
            3 * self.num_cepstra
        } else {
            self.num_cepstra
        }
    }
}

/// Row-major `T x D` matrix of per-frame feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    data: Vec<f64>,
    n_frames: usize,
    dim: usize,
    frame_rate: f64,
    config: FeatureConfig,
}

impl FeatureMatrix {
    pub fn new(
        rows: Vec<Vec<f64>>,
        frame_rate: f64,
        config: FeatureConfig,
    ) -> Result<Self, FeatureError> {
        let n_frames = rows.len();
        if n_frames == 0 {
            return Err(FeatureError::InvalidMatrix("no frames".into()));
        }
        let dim = rows[0].len();
        if dim == 0 || rows.iter().any(|r| r.len() != dim) {
            return Err(FeatureError::InvalidMatrix("ragged or empty rows".into()));
        }
        let data: Vec<f64> = rows.into_iter().flatten().collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(FeatureError::InvalidMatrix("non-finite entry".into()));
        }
        Ok(FeatureMatrix {
            data,
            n_frames,
            dim,
            frame_rate,
            config,
        })
    }

    /// Matrix with default config metadata and a 100 frames/s rate.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self, FeatureError> {
        Self::new(rows, 100.0, FeatureConfig::default())
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frame_rate(&self) -> f64 {
        self.frame_rate
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.config
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.rows().map(<[f64]>::to_vec).collect()
    }

    /// One frame per line, comma-separated.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in self.rows() {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(out, "{}", line.join(","));
        }
        out
    }

    fn hstack(parts: &[&FeatureMatrix]) -> FeatureMatrix {
        let first = parts[0];
        let dim: usize = parts.iter().map(|p| p.dim).sum();
        let mut data = Vec::with_capacity(first.n_frames * dim);
        for t in 0..first.n_frames {
            for p in parts {
                data.extend_from_slice(p.row(t));
            }
        }
        FeatureMatrix {
            data,
            n_frames: first.n_frames,
            dim,
            frame_rate: first.frame_rate,
            config: first.config,
        }
    }
}

fn mono_samples(clip: &AudioClip) -> Result<&[f64], FeatureError> {
    if clip.num_channels() != 1 {
        return Err(FeatureError::NotMono(clip.num_channels()));
    }
    if clip.frames() == 0 {
        return Err(FeatureError::EmptyClip);
    }
    Ok(clip.channel(0))
}

fn frames_of(x: &[f64], framing: &Framing) -> Vec<Vec<f64>> {
    (0..framing.num_frames(x.len()))
        .map(|t| {
            let start = t * framing.hop;
            let mut frame = vec![0.0; framing.frame_len];
            let end = (start + framing.frame_len).min(x.len());
            frame[..end - start].copy_from_slice(&x[start..end]);
            frame
        })
        .collect()
}

/// Splits a mono clip into `frame_len` frames every `hop` samples; the tail
/// frame is zero-padded.
pub fn frame_signal(clip: &AudioClip, config: &FeatureConfig) -> Result<Vec<Vec<f64>>, FeatureError> {
    let x = mono_samples(clip)?;
    let framing = config.framing(clip.sample_rate())?;
    Ok(frames_of(x, &framing))
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters over the `fft_size / 2 + 1` bins, centers equally
/// spaced in mel between `mel_low` and `mel_high`.
pub fn mel_filterbank(config: &FeatureConfig, rate: u32) -> Result<Vec<Vec<f64>>, FeatureError> {
    let framing = config.validate(rate)?;
    Ok(filterbank(config, rate, framing.fft_size))
}

fn filterbank(config: &FeatureConfig, rate: u32, fft_size: usize) -> Vec<Vec<f64>> {
    let m = config.num_mel_filters;
    let lo = hz_to_mel(config.mel_low);
    let hi = hz_to_mel(config.mel_high_for(rate));
    let edges: Vec<f64> = (0..m + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (m + 1) as f64))
        .collect();
    let bins = fft_size / 2 + 1;
    let bin_hz = f64::from(rate) / fft_size as f64;
    (0..m)
        .map(|j| {
            let (left, center, right) = (edges[j], edges[j + 1], edges[j + 2]);
            (0..bins)
                .map(|k| {
                    let f = k as f64 * bin_hz;
                    if f <= left || f >= right {
                        0.0
                    } else if f <= center {
                        (f - left) / (center - left)
                    } else {
                        (right - f) / (right - center)
                    }
                })
                .collect()
        })
        .collect()
}

/// Orthonormal DCT-II basis, `n_out x n_in`.
pub fn dct_matrix(n_out: usize, n_in: usize) -> Vec<Vec<f64>> {
    let n = n_in as f64;
    (0..n_out)
        .map(|k| {
            let scale = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
            (0..n_in)
                .map(|m| scale * (std::f64::consts::PI * k as f64 * (m as f64 + 0.5) / n).cos())
                .collect()
        })
        .collect()
}

pub const LOG_FLOOR: f64 = 1e-10;

/// Reusable MFCC pipeline for one `(config, sample_rate)` pair.
#[derive(Clone)]
pub struct MfccExtractor {
    config: FeatureConfig,
    rate: u32,
    framing: Framing,
    fft: FftPair,
    window: Vec<f64>,
    filters: Vec<Vec<f64>>,
    dct: Vec<Vec<f64>>,
}

impl MfccExtractor {
    pub fn new(config: FeatureConfig, rate: u32) -> Result<Self, FeatureError> {
        let framing = config.validate(rate)?;
        Ok(MfccExtractor {
            config,
            rate,
            framing,
            fft: FftPair::new(framing.fft_size),
            window: dsp::hann_periodic(framing.frame_len),
            filters: filterbank(&config, rate, framing.fft_size),
            dct: dct_matrix(config.num_cepstra, config.num_mel_filters),
        })
    }

    pub fn sample_rate(&self) -> u32 {
        self.rate
    }

    pub fn framing(&self) -> Framing {
        self.framing
    }

    /// Log mel-filterbank energies of one frame.
    pub fn log_energies(&self, frame: &[f64]) -> Vec<f64> {
        let a = self.config.preemphasis;
        let shaped: Vec<f64> = frame
            .iter()
            .enumerate()
            .map(|(i, &s)| if i == 0 { s } else { s - a * frame[i - 1] })
            .zip(&self.window)
            .map(|(s, w)| s * w)
            .collect();
        let spectrum = self.fft.spectrum(&shaped);
        let power: Vec<f64> = spectrum[..self.framing.fft_size / 2 + 1]
            .iter()
            .map(|c| c.norm_sqr())
            .collect();
        self.filters
            .iter()
            .map(|f| {
                let e: f64 = f.iter().zip(&power).map(|(w, p)| w * p).sum();
                e.max(LOG_FLOOR).ln()
            })
            .collect()
    }

    fn cepstra(&self, log_energies: &[f64]) -> Vec<f64> {
        self.dct
            .iter()
            .map(|basis| basis.iter().zip(log_energies).map(|(b, e)| b * e).sum())
            .collect()
    }

    pub fn extract(&self, clip: &AudioClip) -> Result<FeatureMatrix, FeatureError> {
        let x = mono_samples(clip)?;
        if clip.sample_rate() != self.rate {
            return Err(FeatureError::InvalidConfig(format!(
                "extractor built for {} Hz, clip is {} Hz",
                self.rate,
                clip.sample_rate()
            )));
        }
        let rows: Vec<Vec<f64>> = frames_of(x, &self.framing)
            .iter()
            .map(|frame| self.cepstra(&self.log_energies(frame)))
            .collect();
        let frame_rate = f64::from(self.rate) / self.framing.hop as f64;
        let statics = FeatureMatrix::new(rows, frame_rate, self.config)?;
        if !self.config.include_deltas {
            return Ok(statics);
        }
        let d1 = deltas(&statics, self.config.delta_window)?;
        let d2 = deltas(&d1, self.config.delta_window)?;
        Ok(FeatureMatrix::hstack(&[&statics, &d1, &d2]))
    }
}

pub fn mfcc(clip: &AudioClip, config: &FeatureConfig) -> Result<FeatureMatrix, FeatureError> {
    MfccExtractor::new(*config, clip.sample_rate())?.extract(clip)
}

/// Regression deltas over `+-n` frames with edge frames replicated.
pub fn deltas(features: &FeatureMatrix, n: usize) -> Result<FeatureMatrix, FeatureError> {
    if n < 1 {
        return Err(FeatureError::InvalidDeltaWindow(n));
    }
    let t_max = features.n_frames as i64 - 1;
    let denom = 2.0 * (1..=n).map(|i| (i * i) as f64).sum::<f64>();
    let at = |t: i64| features.row(t.clamp(0, t_max) as usize);
    let mut data = Vec::with_capacity(features.data.len());
    for t in 0..features.n_frames as i64 {
        for d in 0..features.dim {
            let num: f64 = (1..=n as i64)
                .map(|i| i as f64 * (at(t + i)[d] - at(t - i)[d]))
                .sum();
            data.push(num / denom);
        }
    }
    Ok(FeatureMatrix {
        data,
        ..features.clone()
    })
}

pub const DEFAULT_DB_FLOOR: f64 = -80.0;

/// Time-frequency grid of `20 log10 |STFT|` values, clamped at `db_floor`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrogramImage {
    grid: Vec<Vec<f64>>,
    db_floor: f64,
}

impl SpectrogramImage {
    pub fn new(grid: Vec<Vec<f64>>, db_floor: f64) -> Result<Self, FeatureError> {
        let bins = grid.first().map_or(0, Vec::len);
        if bins == 0 || grid.iter().any(|r| r.len() != bins) {
            return Err(FeatureError::InvalidMatrix("ragged or empty spectrogram".into()));
        }
        let grid = grid
            .into_iter()
            .map(|r| r.into_iter().map(|v| v.max(db_floor)).collect())
            .collect();
        Ok(SpectrogramImage { grid, db_floor })
    }

    /// Frames (time axis).
    pub fn width(&self) -> usize {
        self.grid.len()
    }

    /// Frequency bins.
    pub fn height(&self) -> usize {
        self.grid[0].len()
    }

    pub fn db_floor(&self) -> f64 {
        self.db_floor
    }

    /// `grid[t][bin]`.
    pub fn grid(&self) -> &[Vec<f64>] {
        &self.grid
    }
}

pub fn spectrogram(clip: &AudioClip, config: &FeatureConfig) -> Result<SpectrogramImage, FeatureError> {
    spectrogram_with_floor(clip, config, DEFAULT_DB_FLOOR)
}

/// Magnitudes of the `fft_size / 2 + 1` non-negative bins of each
/// Hann-windowed frame.
pub fn stft_magnitude(clip: &AudioClip, config: &FeatureConfig) -> Result<Vec<Vec<f64>>, FeatureError> {
    let x = mono_samples(clip)?;
    let framing = config.framing(clip.sample_rate())?;
    let fft = FftPair::new(framing.fft_size);
    let window = dsp::hann_periodic(framing.frame_len);
    Ok(frames_of(x, &framing)
        .iter()
        .map(|frame| {
            let windowed: Vec<f64> = frame.iter().zip(&window).map(|(s, w)| s * w).collect();
            dsp::half_magnitude(&fft.spectrum(&windowed))
        })
        .collect())
}

pub fn spectrogram_with_floor(
    clip: &AudioClip,
    config: &FeatureConfig,
    db_floor: f64,
) -> Result<SpectrogramImage, FeatureError> {
    let grid = stft_magnitude(clip, config)?
        .into_iter()
        .map(|bins| {
            bins.into_iter()
                .map(|m| if m > 0.0 { 20.0 * m.log10() } else { f64::NEG_INFINITY })
                .collect()
        })
        .collect();
    SpectrogramImage::new(grid, db_floor)
}

/// Binary PGM (P5): time runs left to right, lowest frequency on the bottom
/// row. Values map linearly from `[db_floor, max]` onto `[0, 255]`.
pub fn export_pgm(image: &SpectrogramImage) -> Vec<u8> {
    let (w, h) = (image.width(), image.height());
    let max = image
        .grid
        .iter()
        .flatten()
        .cloned()
        .fold(image.db_floor, f64::max);
    let span = max - image.db_floor;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    for row in (0..h).rev() {
        for t in 0..w {
            let v = image.grid[t][row];
            let byte = if span > 0.0 {
                ((v - image.db_floor) / span * 255.0).round().clamp(0.0, 255.0) as u8
            } else {
                0
            };
            out.push(byte);
        }
    }
    out
}

/// Parsed binary PGM: `(width, height, pixels)` with pixels row-major from
/// the top row.
pub fn parse_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>), FeatureError> {
    let bad = |m: &str| FeatureError::InvalidMatrix(format!("pgm: {m}"));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header"))?);
    }
    if fields[0] != "P5" {
        return Err(bad("magic"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("dimension"));
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 {
        return Err(bad("maxval"));
    }
    let pixels = bytes.get(pos + 1..).ok_or_else(|| bad("no raster"))?;
    if pixels.len() != w * h {
        return Err(bad("raster size"));
    }
    Ok((w, h, pixels.to_vec()))
}
