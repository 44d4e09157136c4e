//! Audio sample representation, RIFF/WAVE I/O and band-limited resampling.
//!
//! Every DSP stage in the crate consumes and produces [`AudioClip`] values.
//! Amplitudes are kept in `[-1, 1]`; anything that escapes that range after a
//! processing step is hard-clipped and the clipped fraction is recorded on the
//! clip.

mod resample;
mod wav;

pub use resample::{resample, resample_ratio, resample_samples};
pub use wav::{decode_wav, encode_wav, load_wav, save_wav};

use thiserror::Error;

/// Internal working rate of the whole pipeline.
pub const CANONICAL_RATE: u32 = 16_000;

/// Rates accepted on load and as resampling targets.
pub const SUPPORTED_RATES: [u32; 5] = [8_000, 16_000, 22_050, 44_100, 48_000];

/// Clipped-sample fraction above which a warning is logged.
pub const CLIP_WARN_FRACTION: f64 = 0.01;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("malformed RIFF/WAVE header: {0}")]
    MalformedHeader(String),
    #[error("unsupported encoding: {0}")]
    UnsupportedEncoding(String),
    #[error("audio contains no sample frames")]
    EmptyAudio,
    #[error("unsupported sample rate {0} Hz")]
    UnsupportedRate(u32),
    #[error("i/o failure on {path}: {source}")]
    IoFailure {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub fn is_supported_rate(rate: u32) -> bool {
    SUPPORTED_RATES.contains(&rate)
}

/// A mono clip of samples at a fixed rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub clip_id: String,
    pub samples: Vec<f64>,
    pub sample_rate_hz: u32,
    /// Fraction of samples that were hard-clipped when this clip was built.
    pub clipped_fraction: f64,
}

impl AudioClip {
    /// Builds a clip, hard-clipping amplitudes into `[-1, 1]`.
    ///
    /// Non-finite samples are replaced by zero and counted as clipped.
    pub fn new(clip_id: impl Into<String>, samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self, AudioError> {
        if samples.is_empty() {
            return Err(AudioError::EmptyAudio);
        }
        if sample_rate_hz == 0 {
            return Err(AudioError::UnsupportedRate(0));
        }
        let clip_id = clip_id.into();
        let (samples, clipped_fraction) = clip_to_unit(samples);
        if clipped_fraction > CLIP_WARN_FRACTION {
            log::warn!("clip {clip_id}: {:.2}% of samples hard-clipped", clipped_fraction * 100.0);
        }
        Ok(Self { clip_id, samples, sample_rate_hz, clipped_fraction })
    }

    /// Same samples and rate under a new identifier.
    pub fn with_id(&self, clip_id: impl Into<String>) -> Self {
        Self { clip_id: clip_id.into(), ..self.clone() }
    }

    /// Builds a sibling clip (same id and rate) from processed samples.
    pub fn derive(&self, samples: Vec<f64>) -> Result<Self, AudioError> {
        Self::new(self.clip_id.clone(), samples, self.sample_rate_hz)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }

    /// Brings the clip to the canonical 16 kHz rate.
    pub fn to_canonical(&self) -> Result<Self, AudioError> {
        resample(self, CANONICAL_RATE)
    }
}

/// Hard-clips into `[-1, 1]`, returning the clipped fraction.
pub fn clip_to_unit(mut samples: Vec<f64>) -> (Vec<f64>, f64) {
    let mut clipped = 0usize;
    for s in samples.iter_mut() {
        if !s.is_finite() {
            *s = 0.0;
            clipped += 1;
        } else if *s > 1.0 {
            *s = 1.0;
            clipped += 1;
        } else if *s < -1.0 {
            *s = -1.0;
            clipped += 1;
        }
    }
    let fraction = if samples.is_empty() { 0.0 } else { clipped as f64 / samples.len() as f64 };
    (samples, fraction)
}

/// Concatenates clips (after bringing each to the canonical rate).
pub fn concat(clip_id: &str, clips: &[AudioClip]) -> Result<AudioClip, AudioError> {
    let mut samples = Vec::new();
    for clip in clips {
        let canonical = clip.to_canonical()?;
        samples.extend_from_slice(&canonical.samples);
    }
    AudioClip::new(clip_id, samples, CANONICAL_RATE)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_clips_out_of_range_and_records_fraction() {
        let clip = AudioClip::new("c", vec![0.5, 1.5, -2.0, 0.0], 16_000).unwrap();
        assert_eq!(clip.samples, vec![0.5, 1.0, -1.0, 0.0]);
        assert_eq!(clip.clipped_fraction, 0.5);
    }

    #[test]
    fn empty_clip_rejected() {
        assert!(matches!(AudioClip::new("c", vec![], 16_000), Err(AudioError::EmptyAudio)));
    }

    #[test]
    fn concat_joins_at_canonical_rate() {
        let a = AudioClip::new("a", vec![0.1; 160], 16_000).unwrap();
        let b = AudioClip::new("b", vec![0.2; 80], 8_000).unwrap();
        let joined = concat("ab", &[a, b]).unwrap();
        assert_eq!(joined.len(), 320);
        assert_eq!(joined.sample_rate_hz, CANONICAL_RATE);
    }
}
