//! Pitch shifting, WSOLA time stretching, noise addition and the stochastic
//! augmentation policies (strong for sentences, mild for vowels).

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{load_wav, resample_ratio, resample_samples, AudioClip, AudioError};
use crate::corpus::{ClipRecord, Origin, RecordingType};
use crate::util::{power, rng_from, standard_normal};

const WSOLA_FRAME_MS: f64 = 40.0;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("{what} = {value} outside [{lo}, {hi}]")]
    OutOfRange { what: &'static str, value: f64, lo: f64, hi: f64 },
    #[error("noise file unavailable: {0}")]
    MissingNoiseFile(String),
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
    #[error("clip {0} is already augmented")]
    AlreadyAugmented(String),
    #[error(transparent)]
    Audio(#[from] AudioError),
}

fn in_range(what: &'static str, value: f64, lo: f64, hi: f64) -> Result<(), AugmentError> {
    if value.is_finite() && value >= lo && value <= hi {
        Ok(())
    } else {
        Err(AugmentError::OutOfRange { what, value, lo, hi })
    }
}

fn periodic_hann(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())).collect()
}

/// WSOLA on raw samples; output length is `round(len · factor)`.
fn wsola(x: &[f64], factor: f64, rate: u32) -> Vec<f64> {
    let out_len = (x.len() as f64 * factor).round() as usize;
    let n = ((WSOLA_FRAME_MS / 1000.0 * rate as f64) as usize / 2 * 2).max(4);
    let hs = n / 2;
    let tolerance = n / 4;
    let ha = hs as f64 / factor;
    let window = periodic_hann(n);
    // Zero padding so every candidate segment is in bounds.
    let pad = n + tolerance + hs;
    let mut xp = vec![0.0; pad];
    xp.extend_from_slice(x);
    xp.resize(xp.len() + pad + (ha.ceil() as usize) * 2, 0.0);
    let segment = |centre: isize| -> &[f64] {
        let start = (pad as isize + centre - hs as isize) as usize;
        &xp[start..start + n]
    };
    let max_centre = (x.len() + hs) as isize;

    let mut out = vec![0.0; out_len + 2 * n];
    let mut prev: Option<isize> = None;
    let mut k = 0usize;
    while k * hs < out_len + hs {
        let ideal = ((k as f64 * ha).round() as isize).min(max_centre);
        let centre = match prev {
            None => ideal,
            Some(p) => {
                let target = segment((p + hs as isize).min(max_centre + tolerance as isize));
                let target_energy: f64 = target.iter().map(|v| v * v).sum();
                let mut best = (f64::NEG_INFINITY, ideal);
                for delta in -(tolerance as isize)..=tolerance as isize {
                    let cand = segment(ideal + delta);
                    let (mut c, mut e) = (0.0, 0.0);
                    for (a, b) in cand.iter().zip(target) {
                        c += a * b;
                        e += a * a;
                    }
                    let denom = (e * target_energy).sqrt();
                    let score = if denom > 0.0 { c / denom } else { 0.0 };
                    if score > best.0 {
                        best = (score, ideal + delta);
                    }
                }
                best.1
            }
        };
        // Frame k covers output [k·hs − hs, k·hs + hs); `out` is offset by hs.
        for (i, (s, w)) in segment(centre).iter().zip(&window).enumerate() {
            out[k * hs + i] += s * w;
        }
        prev = Some(centre);
        k += 1;
    }
    out.drain(..hs);
    out.truncate(out_len);
    out
}

/// Changes duration by `factor` while keeping pitch (WSOLA).
pub fn time_stretch(clip: &AudioClip, factor: f64) -> Result<AudioClip, AugmentError> {
    in_range("stretch factor", factor, 0.5, 2.0)?;
    if factor == 1.0 {
        return Ok(clip.clone());
    }
    Ok(clip.derive(wsola(&clip.samples, factor, clip.sample_rate_hz))?)
}

/// Scales f0 by `2^(semitones/12)` keeping duration: WSOLA-stretch by the
/// pitch ratio, then resample back to the original length.
pub fn pitch_shift(clip: &AudioClip, semitones: f64) -> Result<AudioClip, AugmentError> {
    in_range("semitones", semitones, -12.0, 12.0)?;
    if semitones == 0.0 {
        return Ok(clip.clone());
    }
    let ratio = 2f64.powf(semitones / 12.0);
    let stretched = wsola(&clip.samples, ratio, clip.sample_rate_hz);
    let mut out = resample_ratio(&stretched, 1.0 / ratio);
    out.resize(clip.len(), 0.0);
    Ok(clip.derive(out)?)
}

/// Where additive noise comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum NoiseSource {
    White,
    /// A recorded ambience, looped to the clip length from a seeded offset.
    Ambient(AudioClip),
}

impl NoiseSource {
    pub fn from_file(path: &Path) -> Result<Self, AugmentError> {
        match load_wav(path) {
            Ok(clip) => Ok(NoiseSource::Ambient(clip)),
            Err(AudioError::IoFailure { path, .. }) => Err(AugmentError::MissingNoiseFile(path)),
            Err(e) => Err(e.into()),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            NoiseSource::White => "white",
            NoiseSource::Ambient(_) => "ambient",
        }
    }

    fn render(&self, len: usize, rate: u32, seed: u64) -> Result<Vec<f64>, AugmentError> {
        let mut rng = rng_from(seed, &["noise"]);
        match self {
            NoiseSource::White => Ok((0..len).map(|_| standard_normal(&mut rng)).collect()),
            NoiseSource::Ambient(ambient) => {
                let src = resample_samples(&ambient.samples, ambient.sample_rate_hz, rate);
                if src.is_empty() || power(&src) == 0.0 {
                    return Err(AugmentError::MissingNoiseFile(format!("{} is silent", ambient.clip_id)));
                }
                let offset = rng.random_range(0..src.len());
                Ok((0..len).map(|i| src[(offset + i) % src.len()]).collect())
            }
        }
    }
}

/// Adds noise so that the residual `output − clip` has power `P(clip) / 10^(snr/10)`.
///
/// If the mix would leave `[-1, 1]` the whole output is attenuated and the
/// noise gain re-solved, so the residual (which then includes the
/// attenuation) still hits the target SNR.
pub fn add_noise(clip: &AudioClip, snr_db: f64, source: &NoiseSource, seed: u64) -> Result<AudioClip, AugmentError> {
    in_range("snr_db", snr_db, -5.0, 60.0)?;
    let s = &clip.samples;
    let noise = source.render(s.len(), clip.sample_rate_hz, seed)?;
    let p_s = power(s);
    let p_n = power(&noise);
    if p_s == 0.0 || p_n == 0.0 {
        return Ok(clip.clone());
    }
    let target = p_s / 10f64.powf(snr_db / 10.0);
    let cross = s.iter().zip(&noise).map(|(a, b)| a * b).sum::<f64>() / s.len() as f64;
    let mut alpha = 1.0;
    let mut gain = (target / p_n).sqrt();
    for _ in 0..8 {
        // residual = (α − 1)·s + α·g·n; solve |residual|² = target for g.
        let a = alpha * alpha * p_n;
        let b = 2.0 * alpha * (alpha - 1.0) * cross;
        let c = (alpha - 1.0).powi(2) * p_s - target;
        let disc = b * b - 4.0 * a * c;
        if disc >= 0.0 {
            gain = (-b + disc.sqrt()) / (2.0 * a);
        }
        let peak = s.iter().zip(&noise).fold(0.0f64, |m, (x, n)| m.max((x + gain * n).abs()));
        if alpha * peak <= 1.0 {
            break;
        }
        alpha = 0.999 / peak;
    }
    let out = s.iter().zip(&noise).map(|(x, n)| alpha * (x + gain * n)).collect();
    Ok(clip.derive(out)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    /// Probability that a variant is augmented at all.
    pub apply_prob: f64,
    pub pitch_range_semitones: [f64; 2],
    pub stretch_range: [f64; 2],
    pub snr_range_db: [f64; 2],
    pub max_combined_ops: usize,
    pub n_variants_per_clip: usize,
}

impl AugmentPolicy {
    /// Frequent and intense: the sentence tier.
    pub fn sentence() -> Self {
        AugmentPolicy {
            apply_prob: 0.8,
            pitch_range_semitones: [-4.0, 4.0],
            stretch_range: [0.8, 1.25],
            snr_range_db: [5.0, 20.0],
            max_combined_ops: 3,
            n_variants_per_clip: 2,
        }
    }

    /// Milder: the vowel tier.
    pub fn vowel() -> Self {
        AugmentPolicy {
            apply_prob: 0.5,
            pitch_range_semitones: [-2.0, 2.0],
            stretch_range: [0.9, 1.1],
            snr_range_db: [15.0, 30.0],
            max_combined_ops: 2,
            n_variants_per_clip: 1,
        }
    }

    pub fn for_type(rtype: RecordingType) -> Self {
        match rtype {
            RecordingType::Sentence => Self::sentence(),
            RecordingType::Vowel => Self::vowel(),
        }
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        let bad = |msg: String| Err(AugmentError::InvalidPolicy(msg));
        if !(0.0..=1.0).contains(&self.apply_prob) {
            return bad(format!("apply_prob {} outside [0, 1]", self.apply_prob));
        }
        let ranges = [
            ("pitch_range_semitones", self.pitch_range_semitones, -12.0, 12.0),
            ("stretch_range", self.stretch_range, 0.5, 2.0),
            ("snr_range_db", self.snr_range_db, -5.0, 60.0),
        ];
        for (name, [lo, hi], min, max) in ranges {
            if !(lo.is_finite() && hi.is_finite() && min <= lo && lo <= hi && hi <= max) {
                return bad(format!("{name} [{lo}, {hi}] not an ordered range within [{min}, {max}]"));
            }
        }
        if !(1..=3).contains(&self.max_combined_ops) {
            return bad(format!("max_combined_ops {} outside 1..=3", self.max_combined_ops));
        }
        if self.n_variants_per_clip == 0 {
            return bad("n_variants_per_clip must be positive".into());
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, AugmentError> {
        let policy: AugmentPolicy =
            serde_json::from_str(text).map_err(|e| AugmentError::InvalidPolicy(e.to_string()))?;
        policy.validate()?;
        Ok(policy)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("policy always serializes")
    }
}

/// One augmentation step with its drawn parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AugmentOp {
    Stretch(f64),
    Pitch(f64),
    Noise(f64),
}

impl AugmentOp {
    fn describe(&self, noise_kind: &str) -> String {
        match self {
            AugmentOp::Stretch(f) => format!("stretch={f:.4}"),
            AugmentOp::Pitch(s) => format!("pitch={s:+.3}st"),
            AugmentOp::Noise(snr) => format!("noise={noise_kind}@{snr:.2}dB"),
        }
    }
}

fn uniform(rng: &mut impl Rng, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Ops drawn for variant `variant` of `clip_id`, in application order.
///
/// With probability `apply_prob` the variant is augmented; it then applies
/// between one and `max_combined_ops` distinct ops (count uniform), each with
/// a parameter drawn uniformly from its range.
pub fn draw_ops(policy: &AugmentPolicy, clip_id: &str, variant: usize, seed: u64) -> (Vec<AugmentOp>, u64) {
    let mut rng = rng_from(seed, &["augment", clip_id, &variant.to_string()]);
    let noise_seed = rng.random::<u64>();
    if !rng.random_bool(policy.apply_prob) {
        return (Vec::new(), noise_seed);
    }
    let count = rng.random_range(1..=policy.max_combined_ops);
    let mut kinds = [0usize, 1, 2];
    kinds.shuffle(&mut rng);
    let mut chosen: Vec<usize> = kinds[..count].to_vec();
    chosen.sort_unstable();
    let ops = chosen
        .into_iter()
        .map(|k| match k {
            0 => AugmentOp::Stretch(uniform(&mut rng, policy.stretch_range)),
            1 => AugmentOp::Pitch(uniform(&mut rng, policy.pitch_range_semitones)),
            _ => AugmentOp::Noise(uniform(&mut rng, policy.snr_range_db)),
        })
        .collect();
    (ops, noise_seed)
}

pub fn augmented_clip_id(clip_id: &str, variant: usize) -> String {
    format!("{clip_id}__aug{variant}")
}

/// Produces `n_variants_per_clip` augmented copies of a clip.
///
/// Output rows keep the speaker, session and labels of the source, carry
/// `origin = augmented`, point back at the source clip and list the applied
/// ops in `provenance` (empty when the variant was left untouched).
pub fn apply_policy(
    clip: &AudioClip,
    record: &ClipRecord,
    policy: &AugmentPolicy,
    noise: &NoiseSource,
    seed: u64,
) -> Result<Vec<(AudioClip, ClipRecord)>, AugmentError> {
    if record.origin == Origin::Augmented {
        return Err(AugmentError::AlreadyAugmented(record.clip_id.clone()));
    }
    policy.validate()?;
    let mut out = Vec::with_capacity(policy.n_variants_per_clip);
    for variant in 0..policy.n_variants_per_clip {
        let (ops, noise_seed) = draw_ops(policy, &record.clip_id, variant, seed);
        let mut audio = clip.clone();
        for op in &ops {
            audio = match *op {
                AugmentOp::Stretch(f) => time_stretch(&audio, f)?,
                AugmentOp::Pitch(s) => pitch_shift(&audio, s)?,
                AugmentOp::Noise(snr) => add_noise(&audio, snr, noise, noise_seed)?,
            };
        }
        let row = variant_record(record, variant, &ops, noise.kind());
        out.push((audio.with_id(row.clip_id.clone()), row));
    }
    Ok(out)
}

/// Manifest row for variant `variant` of `record` after `ops`.
pub fn variant_record(record: &ClipRecord, variant: usize, ops: &[AugmentOp], noise_kind: &str) -> ClipRecord {
    let clip_id = augmented_clip_id(&record.clip_id, variant);
    let mut row = record.clone();
    row.path = format!("augmented/{clip_id}.wav");
    row.clip_id = clip_id;
    row.origin = Origin::Augmented;
    row.parent_clip_id = Some(record.clip_id.clone());
    row.provenance = Some(ops.iter().map(|op| op.describe(noise_kind)).collect::<Vec<_>>().join(";"));
    row
}
