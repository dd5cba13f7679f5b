//! Clip normalization and cleanup.
//!
//! [`apply_contract`] runs the full chain in a fixed order:
//! downmix, resample, bandpass, spectral subtraction, silence removal,
//! duration fixing and (for stereo targets) upmix.

use thiserror::Error;

use crate::audio_io::{AudioClip, WavError};
use crate::dsp::{self, FftPair};

#[derive(Debug, Error, PartialEq)]
pub enum PreprocessError {
    #[error("invalid sample rate {0}")]
    InvalidRate(u32),
    #[error("invalid duration {0} s")]
    InvalidDuration(f64),
    #[error("band [{low}, {high}] Hz is invalid for a {rate} Hz signal")]
    BandOutsideNyquist { low: f64, high: f64, rate: u32 },
    #[error("fft size {0} must be a power of two >= 64")]
    InvalidFftSize(usize),
    #[error("no clips given for noise estimation")]
    EmptyInput,
    #[error("sample rate mismatch: expected {expected} Hz, found {found} Hz")]
    RateMismatch { expected: u32, found: u32 },
    #[error("unsupported channel count {0}")]
    Channels(usize),
    #[error(transparent)]
    Wav(#[from] WavError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelMode {
    Mono,
    Stereo,
}

impl ChannelMode {
    pub fn count(self) -> usize {
        match self {
            ChannelMode::Mono => 1,
            ChannelMode::Stereo => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ChannelMode::Mono => "mono",
            ChannelMode::Stereo => "stereo",
        }
    }
}

impl std::str::FromStr for ChannelMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "mono" | "1" => Ok(ChannelMode::Mono),
            "stereo" | "2" => Ok(ChannelMode::Stereo),
            other => Err(format!("unknown channel mode '{other}'")),
        }
    }
}

/// Target format every clip is normalized to before feature extraction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FormatContract {
    pub target_rate: u32,
    pub target_channels: ChannelMode,
    pub target_duration: f64,
    pub target_bit_depth: u16,
}

impl Default for FormatContract {
    fn default() -> Self {
        FormatContract {
            target_rate: 16000,
            target_channels: ChannelMode::Mono,
            target_duration: 1.0,
            target_bit_depth: 16,
        }
    }
}

impl FormatContract {
    pub fn validate(&self) -> Result<(), PreprocessError> {
        if self.target_rate == 0 {
            return Err(PreprocessError::InvalidRate(self.target_rate));
        }
        if !(self.target_duration.is_finite() && self.target_duration > 0.0) {
            return Err(PreprocessError::InvalidDuration(self.target_duration));
        }
        if self.target_bit_depth != 8 && self.target_bit_depth != 16 {
            return Err(WavError::BitDepth(self.target_bit_depth).into());
        }
        Ok(())
    }

    pub fn target_frames(&self) -> usize {
        duration_frames(self.target_duration, self.target_rate)
    }

    /// Upper bandpass edge: 18 kHz, clamped below Nyquist.
    pub fn band_high(&self) -> f64 {
        (f64::from(self.target_rate) * 0.45).min(18000.0)
    }
}

pub const BAND_LOW_HZ: f64 = 500.0;

fn duration_frames(seconds: f64, rate: u32) -> usize {
    (seconds * f64::from(rate)).round() as usize
}

/// Average spectrum of background noise, used by [`spectral_subtract`].
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseProfile {
    mean_magnitude: Vec<f64>,
    fft_size: usize,
    sample_rate: u32,
}

impl NoiseProfile {
    pub fn new(
        mean_magnitude: Vec<f64>,
        fft_size: usize,
        sample_rate: u32,
    ) -> Result<Self, PreprocessError> {
        check_fft_size(fft_size)?;
        if sample_rate == 0 {
            return Err(PreprocessError::InvalidRate(0));
        }
        if mean_magnitude.len() != fft_size / 2 + 1
            || mean_magnitude.iter().any(|m| !m.is_finite() || *m < 0.0)
        {
            return Err(PreprocessError::InvalidFftSize(fft_size));
        }
        Ok(NoiseProfile {
            mean_magnitude,
            fft_size,
            sample_rate,
        })
    }

    /// An all-zero profile; subtraction with it is the identity.
    pub fn silent(fft_size: usize, sample_rate: u32) -> Result<Self, PreprocessError> {
        Self::new(vec![0.0; fft_size / 2 + 1], fft_size, sample_rate)
    }

    pub fn mean_magnitude(&self) -> &[f64] {
        &self.mean_magnitude
    }

    pub fn fft_size(&self) -> usize {
        self.fft_size
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }
}

fn check_fft_size(fft_size: usize) -> Result<(), PreprocessError> {
    if fft_size < 64 || !fft_size.is_power_of_two() {
        return Err(PreprocessError::InvalidFftSize(fft_size));
    }
    Ok(())
}

fn map_channels(clip: &AudioClip, f: impl Fn(&[f64]) -> Vec<f64>) -> AudioClip {
    let channels = clip.channels().iter().map(|c| f(c)).collect();
    AudioClip::from_processed(channels, clip.sample_rate())
}

// ---------------------------------------------------------------------------
// Resampling

const RESAMPLE_ZERO_CROSSINGS: usize = 32;
const RESAMPLE_KAISER_BETA: f64 = 8.0;
/// Cutoff relative to the lower of the two Nyquist frequencies.
const RESAMPLE_CUTOFF: f64 = 1.0;
const MAX_EXACT_PHASES: u64 = 2048;

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

struct SincKernel {
    cutoff: f64,
    half_width: usize,
}

impl SincKernel {
    fn new(in_rate: u32, out_rate: u32) -> Self {
        let ratio = (f64::from(out_rate) / f64::from(in_rate)).min(1.0);
        SincKernel {
            cutoff: ratio * RESAMPLE_CUTOFF,
            half_width: (RESAMPLE_ZERO_CROSSINGS as f64 / ratio).ceil() as usize,
        }
    }

    fn taps(&self) -> usize {
        2 * self.half_width
    }

    /// Normalized weights for input samples `i0 - hw + 1 ..= i0 + hw`
    /// when the output lands at `i0 + frac`.
    fn weights(&self, frac: f64) -> Vec<f64> {
        let hw = self.half_width as f64;
        let mut w: Vec<f64> = (0..self.taps())
            .map(|j| {
                let x = frac + hw - 1.0 - j as f64;
                self.cutoff * dsp::sinc(self.cutoff * x) * dsp::kaiser(x / hw, RESAMPLE_KAISER_BETA)
            })
            .collect();
        let sum: f64 = w.iter().sum();
        for v in &mut w {
            *v /= sum;
        }
        w
    }
}

/// Band-limited sample-rate conversion with a Kaiser-windowed sinc kernel.
pub fn resample(clip: &AudioClip, target_rate: u32) -> Result<AudioClip, PreprocessError> {
    if target_rate == 0 {
        return Err(PreprocessError::InvalidRate(target_rate));
    }
    let in_rate = clip.sample_rate();
    if in_rate == target_rate {
        return Ok(clip.clone());
    }
    let frames = clip.frames() as u64;
    let out_len = ((frames * u64::from(target_rate) * 2 + u64::from(in_rate))
        / (2 * u64::from(in_rate)))
    .max(1) as usize;

    let g = gcd(u64::from(in_rate), u64::from(target_rate));
    let up = u64::from(target_rate) / g;
    let down = u64::from(in_rate) / g;
    let kernel = SincKernel::new(in_rate, target_rate);
    let table: Option<Vec<Vec<f64>>> = (up <= MAX_EXACT_PHASES).then(|| {
        (0..up)
            .map(|p| kernel.weights(p as f64 / up as f64))
            .collect()
    });

    let hw = kernel.half_width as i64;
    let channels = clip
        .channels()
        .iter()
        .map(|input| {
            let n_in = input.len() as i64;
            (0..out_len as u64)
                .map(|n| {
                    let pos = n * down;
                    let i0 = (pos / up) as i64;
                    let phase = pos % up;
                    let owned;
                    let weights = match &table {
                        Some(t) => &t[phase as usize],
                        None => {
                            owned = kernel.weights(phase as f64 / up as f64);
                            &owned
                        }
                    };
                    let start = i0 - hw + 1;
                    weights
                        .iter()
                        .enumerate()
                        .filter_map(|(j, w)| {
                            let k = start + j as i64;
                            (0..n_in).contains(&k).then(|| w * input[k as usize])
                        })
                        .sum()
                })
                .collect()
        })
        .collect();
    Ok(AudioClip::from_processed(channels, target_rate))
}

// ---------------------------------------------------------------------------
// Channel and duration handling

pub fn downmix(clip: &AudioClip) -> AudioClip {
    match clip.channels() {
        [_] => clip.clone(),
        [l, r] => {
            let mono = l.iter().zip(r).map(|(a, b)| (a + b) / 2.0).collect();
            AudioClip::from_processed(vec![mono], clip.sample_rate())
        }
        _ => unreachable!("clips have one or two channels"),
    }
}

pub fn upmix(clip: &AudioClip) -> AudioClip {
    match clip.channels() {
        [m] => AudioClip::from_processed(vec![m.clone(), m.clone()], clip.sample_rate()),
        _ => clip.clone(),
    }
}

/// Center-crops or symmetrically zero-pads to `round(seconds * rate)` frames.
/// When the padding is odd the extra zero goes on the tail.
pub fn fix_duration(clip: &AudioClip, seconds: f64) -> Result<AudioClip, PreprocessError> {
    if !(seconds.is_finite() && seconds > 0.0) {
        return Err(PreprocessError::InvalidDuration(seconds));
    }
    let target = duration_frames(seconds, clip.sample_rate());
    if target == 0 {
        return Err(PreprocessError::InvalidDuration(seconds));
    }
    let len = clip.frames();
    if len == target {
        return Ok(clip.clone());
    }
    Ok(map_channels(clip, |c| {
        if len > target {
            let start = (len - target) / 2;
            c[start..start + target].to_vec()
        } else {
            let lead = (target - len) / 2;
            let mut out = vec![0.0; target];
            out[lead..lead + len].copy_from_slice(c);
            out
        }
    }))
}

// ---------------------------------------------------------------------------
// Bandpass

const BANDPASS_TAPS: usize = 101;

/// Linear-phase windowed-sinc bandpass taps (Hamming window).
pub fn bandpass_taps(low: f64, high: f64, rate: u32) -> Result<Vec<f64>, PreprocessError> {
    let nyquist = f64::from(rate) / 2.0;
    if !(low > 0.0 && low < high && high < nyquist) {
        return Err(PreprocessError::BandOutsideNyquist { low, high, rate });
    }
    let fl = low / f64::from(rate);
    let fh = high / f64::from(rate);
    let center = (BANDPASS_TAPS / 2) as f64;
    let window = dsp::hamming(BANDPASS_TAPS);
    Ok(window
        .iter()
        .enumerate()
        .map(|(n, w)| {
            let m = n as f64 - center;
            w * (2.0 * fh * dsp::sinc(2.0 * fh * m) - 2.0 * fl * dsp::sinc(2.0 * fl * m))
        })
        .collect())
}

pub fn bandpass(clip: &AudioClip, low: f64, high: f64) -> Result<AudioClip, PreprocessError> {
    let taps = bandpass_taps(low, high, clip.sample_rate())?;
    let delay = taps.len() / 2;
    Ok(map_channels(clip, |x| {
        let n = x.len();
        (0..n)
            .map(|i| {
                // output i corresponds to full-convolution index i + delay
                let full = i + delay;
                let k_lo = full.saturating_sub(n - 1);
                let k_hi = full.min(taps.len() - 1);
                (k_lo..=k_hi).map(|k| taps[k] * x[full - k]).sum()
            })
            .collect()
    }))
}

// ---------------------------------------------------------------------------
// Noise reduction

const SUBTRACT_ALPHA: f64 = 1.0;
const SUBTRACT_FLOOR: f64 = 0.01;

/// Mean Hann-windowed magnitude spectrum over every full frame of every clip
/// (hop `fft_size / 2`); clips shorter than one frame contribute a single
/// zero-padded frame.
pub fn estimate_noise_profile(
    clips: &[AudioClip],
    fft_size: usize,
) -> Result<NoiseProfile, PreprocessError> {
    check_fft_size(fft_size)?;
    let first = clips.first().ok_or(PreprocessError::EmptyInput)?;
    let rate = first.sample_rate();
    let fft = FftPair::new(fft_size);
    let window = dsp::hann_periodic(fft_size);
    let hop = fft_size / 2;

    let mut sum = vec![0.0; fft_size / 2 + 1];
    let mut count = 0usize;
    for clip in clips {
        if clip.sample_rate() != rate {
            return Err(PreprocessError::RateMismatch {
                expected: rate,
                found: clip.sample_rate(),
            });
        }
        if clip.num_channels() != 1 {
            return Err(PreprocessError::Channels(clip.num_channels()));
        }
        let x = clip.channel(0);
        let starts: Vec<usize> = if x.len() < fft_size {
            vec![0]
        } else {
            (0..=(x.len() - fft_size) / hop).map(|k| k * hop).collect()
        };
        for start in starts {
            let end = (start + fft_size).min(x.len());
            let frame: Vec<f64> = x[start..end]
                .iter()
                .zip(&window)
                .map(|(s, w)| s * w)
                .collect();
            let mag = dsp::half_magnitude(&fft.spectrum(&frame));
            for (acc, m) in sum.iter_mut().zip(mag) {
                *acc += m;
            }
            count += 1;
        }
    }
    let mean = sum.into_iter().map(|s| s / count as f64).collect();
    NoiseProfile::new(mean, fft_size, rate)
}

fn subtract_channel(x: &[f64], profile: &NoiseProfile, fft: &FftPair, window: &[f64]) -> Vec<f64> {
    let n = profile.fft_size;
    let hop = n / 2;
    // pad so every sample is covered by exactly two half-overlapping frames
    let mut padded = vec![0.0; hop];
    padded.extend_from_slice(x);
    let frames = padded.len().div_ceil(hop);
    padded.resize(frames * hop + hop, 0.0);

    let mut out = vec![0.0; padded.len()];
    for f in 0..frames {
        let start = f * hop;
        let frame: Vec<f64> = padded[start..start + n]
            .iter()
            .zip(window)
            .map(|(s, w)| s * w)
            .collect();
        let mut spec = fft.spectrum(&frame);
        for k in 0..=n / 2 {
            let c = spec[k];
            let m = c.norm();
            if m == 0.0 {
                continue;
            }
            let reduced = (m - SUBTRACT_ALPHA * profile.mean_magnitude[k]).max(SUBTRACT_FLOOR * m);
            let scaled = c * (reduced / m);
            spec[k] = scaled;
            if k != 0 && k != n / 2 {
                spec[n - k] = scaled.conj();
            }
        }
        let frame_out = fft.inverse_real(spec);
        for (o, v) in out[start..start + n].iter_mut().zip(frame_out) {
            *o += v;
        }
    }
    out[hop..hop + x.len()].to_vec()
}

/// Magnitude spectral subtraction with the original phase and overlap-add
/// resynthesis: `m' = max(m - noise, 0.01 m)` per bin.
pub fn spectral_subtract(
    clip: &AudioClip,
    profile: &NoiseProfile,
) -> Result<AudioClip, PreprocessError> {
    if clip.sample_rate() != profile.sample_rate {
        return Err(PreprocessError::RateMismatch {
            expected: profile.sample_rate,
            found: clip.sample_rate(),
        });
    }
    let fft = FftPair::new(profile.fft_size);
    let window = dsp::hann_periodic(profile.fft_size);
    Ok(map_channels(clip, |x| subtract_channel(x, profile, &fft, &window)))
}

// ---------------------------------------------------------------------------
// Silence removal

pub const DEFAULT_SILENCE_DB: f64 = -40.0;
pub const DEFAULT_SILENCE_FRAME_MS: f64 = 10.0;

/// Drops frames whose RMS falls below `peak_frame_rms * 10^(threshold_db / 20)`.
///
/// Stereo clips are gated on the mean power across channels so both
/// channels keep the same frames. If no frame survives the clip is
/// returned unchanged.
pub fn remove_silence(
    clip: &AudioClip,
    threshold_db: f64,
    frame_ms: f64,
) -> Result<AudioClip, PreprocessError> {
    if !(frame_ms.is_finite() && frame_ms > 0.0) {
        return Err(PreprocessError::InvalidDuration(frame_ms / 1000.0));
    }
    let frame_len = ((frame_ms / 1000.0) * f64::from(clip.sample_rate()))
        .round()
        .max(1.0) as usize;
    let n = clip.frames();
    let bounds: Vec<(usize, usize)> = (0..n)
        .step_by(frame_len)
        .map(|s| (s, (s + frame_len).min(n)))
        .collect();
    let frame_rms: Vec<f64> = bounds
        .iter()
        .map(|&(s, e)| {
            let power: f64 = clip
                .channels()
                .iter()
                .map(|c| c[s..e].iter().map(|v| v * v).sum::<f64>())
                .sum();
            (power / ((e - s) * clip.num_channels()) as f64).sqrt()
        })
        .collect();
    let peak = frame_rms.iter().cloned().fold(0.0, f64::max);
    let threshold = peak * 10f64.powf(threshold_db / 20.0);
    let keep: Vec<bool> = frame_rms.iter().map(|&r| r >= threshold && peak > 0.0).collect();
    if keep.iter().all(|&k| k) || keep.iter().all(|&k| !k) {
        return Ok(clip.clone());
    }
    Ok(map_channels(clip, |c| {
        bounds
            .iter()
            .zip(&keep)
            .filter(|(_, &k)| k)
            .flat_map(|(&(s, e), _)| c[s..e].iter().copied())
            .collect()
    }))
}

// ---------------------------------------------------------------------------

/// Runs the full normalization chain.
pub fn apply_contract(
    clip: &AudioClip,
    contract: &FormatContract,
    profile: Option<&NoiseProfile>,
) -> Result<AudioClip, PreprocessError> {
    contract.validate()?;
    let mut out = match contract.target_channels {
        ChannelMode::Mono => downmix(clip),
        ChannelMode::Stereo => clip.clone(),
    };
    out = resample(&out, contract.target_rate)?;
    out = bandpass(&out, BAND_LOW_HZ, contract.band_high())?;
    if let Some(p) = profile {
        out = spectral_subtract(&out, p)?;
    }
    out = remove_silence(&out, DEFAULT_SILENCE_DB, DEFAULT_SILENCE_FRAME_MS)?;
    out = fix_duration(&out, contract.target_duration)?;
    if contract.target_channels == ChannelMode::Stereo {
        out = upmix(&out);
    }
    Ok(out)
}
