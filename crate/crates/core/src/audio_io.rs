//! PCM WAV parsing and emission, plus the in-memory [`AudioClip`] type.
//!
//! Only uncompressed little-endian PCM (format code 1) is handled, at 8 or
//! 16 bits per sample and one or two channels.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum WavError {
    #[error("malformed RIFF header: {field}")]
    MalformedHeader { field: &'static str },
    #[error("unsupported format code {0} (only PCM = 1 is accepted)")]
    NotPcm(u16),
    #[error("unsupported bit depth {0} (expected 8 or 16)")]
    BitDepth(u16),
    #[error("unsupported channel count {0} (expected 1 or 2)")]
    Channels(u16),
    #[error("invalid sample rate {0}")]
    SampleRate(u32),
    #[error("truncated {field}: expected {expected} bytes, found {found}")]
    Truncated {
        field: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("missing {0} chunk")]
    MissingChunk(&'static str),
    #[error("clip/spec mismatch: {field} is {clip} in the clip but {spec} in the spec")]
    SpecMismatch {
        field: &'static str,
        clip: u32,
        spec: u32,
    },
    #[error("invalid clip: {0}")]
    InvalidClip(String),
}

/// Container-level description of a PCM stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WavSpec {
    pub sample_rate: u32,
    pub channels: u16,
    pub bit_depth: u16,
}

impl WavSpec {
    pub fn new(sample_rate: u32, channels: u16, bit_depth: u16) -> Result<Self, WavError> {
        let spec = WavSpec {
            sample_rate,
            channels,
            bit_depth,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), WavError> {
        if self.sample_rate == 0 {
            return Err(WavError::SampleRate(self.sample_rate));
        }
        if !(1..=2).contains(&self.channels) {
            return Err(WavError::Channels(self.channels));
        }
        if self.bit_depth != 8 && self.bit_depth != 16 {
            return Err(WavError::BitDepth(self.bit_depth));
        }
        Ok(())
    }

    fn bytes_per_sample(&self) -> usize {
        usize::from(self.bit_depth / 8)
    }
}

/// Decoded audio: one sample vector per channel, amplitudes in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    channels: Vec<Vec<f64>>,
    sample_rate: u32,
}

impl AudioClip {
    /// Builds a clip, rejecting empty, ragged, non-finite or out-of-range data.
    pub fn new(channels: Vec<Vec<f64>>, sample_rate: u32) -> Result<Self, WavError> {
        if sample_rate == 0 {
            return Err(WavError::SampleRate(sample_rate));
        }
        if channels.is_empty() || channels.len() > 2 {
            return Err(WavError::Channels(channels.len() as u16));
        }
        let frames = channels[0].len();
        if frames == 0 {
            return Err(WavError::InvalidClip("clip has no samples".into()));
        }
        if channels.iter().any(|c| c.len() != frames) {
            return Err(WavError::InvalidClip(
                "channels have different lengths".into(),
            ));
        }
        if let Some(bad) = channels
            .iter()
            .flatten()
            .find(|s| !s.is_finite() || s.abs() > 1.0)
        {
            return Err(WavError::InvalidClip(format!(
                "sample {bad} is outside [-1, 1]"
            )));
        }
        Ok(AudioClip {
            channels,
            sample_rate,
        })
    }

    pub fn mono(samples: Vec<f64>, sample_rate: u32) -> Result<Self, WavError> {
        Self::new(vec![samples], sample_rate)
    }

    /// Builds a clip from processed signal data, clamping amplitudes into
    /// `[-1, 1]` and mapping non-finite values to zero.
    ///
    /// Panics if the channel layout is invalid; callers are DSP routines
    /// that preserve layout.
    pub(crate) fn from_processed(mut channels: Vec<Vec<f64>>, sample_rate: u32) -> Self {
        for s in channels.iter_mut().flatten() {
            *s = if s.is_finite() { s.clamp(-1.0, 1.0) } else { 0.0 };
        }
        Self::new(channels, sample_rate).expect("processed clip keeps a valid layout")
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    /// Samples per channel.
    pub fn frames(&self) -> usize {
        self.channels[0].len()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.frames() as f64 / f64::from(self.sample_rate)
    }

    pub fn channel(&self, index: usize) -> &[f64] {
        &self.channels[index]
    }

    pub fn channels(&self) -> &[Vec<f64>] {
        &self.channels
    }

    pub fn into_channels(self) -> Vec<Vec<f64>> {
        self.channels
    }

    /// Returns the same samples under a different declared rate.
    pub fn with_declared_rate(mut self, sample_rate: u32) -> Result<Self, WavError> {
        if sample_rate == 0 {
            return Err(WavError::SampleRate(sample_rate));
        }
        self.sample_rate = sample_rate;
        Ok(self)
    }
}

fn u16_at(bytes: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([bytes[at], bytes[at + 1]])
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

/// Parses a RIFF/WAVE PCM byte stream.
pub fn read_wav(bytes: &[u8]) -> Result<(AudioClip, WavSpec), WavError> {
    if bytes.len() < 12 {
        return Err(WavError::Truncated {
            field: "RIFF header",
            expected: 12,
            found: bytes.len(),
        });
    }
    if &bytes[0..4] != b"RIFF" {
        return Err(WavError::MalformedHeader {
            field: "RIFF chunk id",
        });
    }
    if &bytes[8..12] != b"WAVE" {
        return Err(WavError::MalformedHeader { field: "WAVE form type" });
    }

    let mut spec: Option<WavSpec> = None;
    let mut data: Option<&[u8]> = None;
    let mut pos = 12;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(bytes, pos + 4) as usize;
        let body_start = pos + 8;
        let available = bytes.len() - body_start;
        match id {
            b"fmt " => {
                if size < 16 || available < 16 {
                    return Err(WavError::Truncated {
                        field: "fmt chunk",
                        expected: 16,
                        found: size.min(available),
                    });
                }
                let format = u16_at(bytes, body_start);
                if format != 1 {
                    return Err(WavError::NotPcm(format));
                }
                let channels = u16_at(bytes, body_start + 2);
                let sample_rate = u32_at(bytes, body_start + 4);
                let bit_depth = u16_at(bytes, body_start + 14);
                spec = Some(WavSpec::new(sample_rate, channels, bit_depth)?);
            }
            b"data" => {
                if size > available {
                    return Err(WavError::Truncated {
                        field: "data chunk",
                        expected: size,
                        found: available,
                    });
                }
                data = Some(&bytes[body_start..body_start + size]);
            }
            _ => {}
        }
        if data.is_some() && spec.is_some() {
            break;
        }
        // chunks are word-aligned
        pos = body_start.saturating_add(size).saturating_add(size & 1);
    }

    let spec = spec.ok_or(WavError::MissingChunk("fmt"))?;
    let data = data.ok_or(WavError::MissingChunk("data"))?;
    let nch = usize::from(spec.channels);
    let width = spec.bytes_per_sample();
    let frame_bytes = nch * width;
    let frames = data.len() / frame_bytes;
    if frames == 0 {
        return Err(WavError::Truncated {
            field: "data chunk",
            expected: frame_bytes,
            found: data.len(),
        });
    }

    let mut channels = vec![Vec::with_capacity(frames); nch];
    for frame in data.chunks_exact(frame_bytes) {
        for (ch, raw) in frame.chunks_exact(width).enumerate() {
            let value = match spec.bit_depth {
                16 => f64::from(i16::from_le_bytes([raw[0], raw[1]])) / 32768.0,
                _ => (f64::from(raw[0]) - 128.0) / 128.0,
            };
            channels[ch].push(value);
        }
    }
    let clip = AudioClip::new(channels, spec.sample_rate)?;
    Ok((clip, spec))
}

fn quantize(sample: f64, bit_depth: u16) -> i32 {
    match bit_depth {
        16 => (sample * 32768.0).round().clamp(-32768.0, 32767.0) as i32,
        _ => (sample * 128.0 + 128.0).round().clamp(0.0, 255.0) as i32,
    }
}

/// Emits a canonical 44-byte-header PCM WAV.
pub fn write_wav(clip: &AudioClip, spec: &WavSpec) -> Result<Vec<u8>, WavError> {
    spec.validate()?;
    if clip.num_channels() != usize::from(spec.channels) {
        return Err(WavError::SpecMismatch {
            field: "channels",
            clip: clip.num_channels() as u32,
            spec: u32::from(spec.channels),
        });
    }
    if clip.sample_rate() != spec.sample_rate {
        return Err(WavError::SpecMismatch {
            field: "sample_rate",
            clip: clip.sample_rate(),
            spec: spec.sample_rate,
        });
    }

    let width = spec.bytes_per_sample();
    let block_align = usize::from(spec.channels) * width;
    let data_len = clip.frames() * block_align;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&spec.channels.to_le_bytes());
    out.extend_from_slice(&spec.sample_rate.to_le_bytes());
    out.extend_from_slice(&(spec.sample_rate * block_align as u32).to_le_bytes());
    out.extend_from_slice(&(block_align as u16).to_le_bytes());
    out.extend_from_slice(&spec.bit_depth.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());

    for i in 0..clip.frames() {
        for ch in clip.channels() {
            let q = quantize(ch[i], spec.bit_depth);
            if spec.bit_depth == 16 {
                out.extend_from_slice(&(q as i16).to_le_bytes());
            } else {
                out.push(q as u8);
            }
        }
    }
    Ok(out)
}
