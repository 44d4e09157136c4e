//! Class-conditioned source-filter voice synthesis and corpus balancing.
//!
//! A Rosenberg glottal flow drives a cascade of three formant resonators.
//! Each glottal cycle ends exactly at its closure instant, so the closure
//! times are the period marks. Per-cycle jitter and shimmer come from
//! independent Gaussian streams. Aspiration noise is shaped by the same
//! cascade and mixed in at the level the autocorrelation HNR calls for.
//!
//! The excitation is built at eight times the output rate and brought down
//! with the band-limited resampler. Closure instants therefore keep
//! sub-sample precision, which high-HNR targets need.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::{FRAC_2_SQRT_PI, PI};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::acoustics::{self, AcousticsError};
use crate::audio::{is_supported_rate, resample_ratio, AudioClip, AudioError};
use crate::corpus::{ClipRecord, Label, Origin, RecordingType, Vowel};
use crate::util::{derive_seed, median, power, rng_from, standard_normal};

/// Formant centres (Hz) of each vowel.
pub const VOWEL_FORMANTS: [(Vowel, [f64; 3]); 5] = [
    (Vowel::A, [800.0, 1200.0, 2500.0]),
    (Vowel::E, [400.0, 2000.0, 2600.0]),
    (Vowel::I, [300.0, 2300.0, 3000.0]),
    (Vowel::O, [450.0, 800.0, 2600.0]),
    (Vowel::U, [325.0, 700.0, 2530.0]),
];
pub const FORMANT_BANDWIDTHS: [f64; 3] = [80.0, 90.0, 120.0];

const OVERSAMPLE: usize = 8;
const OUTPUT_PEAK: f64 = 0.9;
const VOWEL_RAMP_MS: f64 = 10.0;
const SYLLABLE_RAMP_MS: f64 = 15.0;
const OPENING_QUOTIENT: f64 = 0.4;
const CLOSING_QUOTIENT: f64 = 0.2;
/// `E|x_k − x_{k−1}|` for iid `N(0, σ²)` is `σ · 2/√π`.
const MEAN_ABS_DIFF_PER_SIGMA: f64 = FRAC_2_SQRT_PI;
const CALIBRATION_STEPS: usize = 6;

pub fn vowel_formants(vowel: Vowel) -> [f64; 3] {
    VOWEL_FORMANTS.iter().find(|(v, _)| *v == vowel).map(|(_, f)| *f).expect("every vowel has a formant row")
}

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("duration {0} s outside [0.5, 10]")]
    InvalidDuration(f64),
    #[error("syllable count {0} outside [3, 40]")]
    InvalidSyllableCount(usize),
    #[error("profile field {field} = {value} out of range")]
    InvalidProfile { field: &'static str, value: f64 },
    #[error("invalid preset: {0}")]
    InvalidPreset(String),
    #[error("no reference clip is voiced")]
    AllUnvoiced,
    #[error(transparent)]
    Audio(#[from] AudioError),
}

/// Acoustic control parameters of one synthetic voice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoiceProfile {
    pub f0_hz: f64,
    pub jitter_pct: f64,
    pub shimmer_pct: f64,
    pub hnr_db: f64,
    pub tremor_rate_hz: f64,
    pub tremor_depth_pct: f64,
    /// Speaker formants as (centre, bandwidth) for the vowel /a/; other
    /// vowels are scaled by the same vocal-tract factor.
    pub formants: [(f64, f64); 3],
    pub breathiness: f64,
}

impl Default for VoiceProfile {
    fn default() -> Self {
        VoiceProfile {
            f0_hz: 150.0,
            jitter_pct: 0.3,
            shimmer_pct: 2.0,
            hnr_db: 25.0,
            tremor_rate_hz: 0.0,
            tremor_depth_pct: 0.0,
            formants: default_formants(1.0),
            breathiness: 0.0,
        }
    }
}

fn default_formants(scale: f64) -> [(f64, f64); 3] {
    let a = vowel_formants(Vowel::A);
    [
        (a[0] * scale, FORMANT_BANDWIDTHS[0]),
        (a[1] * scale, FORMANT_BANDWIDTHS[1]),
        (a[2] * scale, FORMANT_BANDWIDTHS[2]),
    ]
}

/// Inclusive value bounds per profile field.
pub mod bounds {
    pub const F0_HZ: (f64, f64) = (60.0, 400.0);
    pub const JITTER_PCT: (f64, f64) = (0.0, 10.0);
    pub const SHIMMER_PCT: (f64, f64) = (0.0, 15.0);
    pub const HNR_DB: (f64, f64) = (-5.0, 40.0);
    pub const TREMOR_RATE_HZ: (f64, f64) = (0.0, 12.0);
    pub const TREMOR_DEPTH_PCT: (f64, f64) = (0.0, 20.0);
    pub const BREATHINESS: (f64, f64) = (0.0, 1.0);
    pub const FORMANT_SCALE: (f64, f64) = (0.7, 1.4);
}

fn check(field: &'static str, value: f64, (lo, hi): (f64, f64)) -> Result<(), SynthError> {
    if value.is_finite() && value >= lo && value <= hi {
        Ok(())
    } else {
        Err(SynthError::InvalidProfile { field, value })
    }
}

impl VoiceProfile {
    pub fn validate(&self) -> Result<(), SynthError> {
        check("f0_hz", self.f0_hz, bounds::F0_HZ)?;
        check("jitter_pct", self.jitter_pct, bounds::JITTER_PCT)?;
        check("shimmer_pct", self.shimmer_pct, bounds::SHIMMER_PCT)?;
        check("hnr_db", self.hnr_db, bounds::HNR_DB)?;
        check("tremor_rate_hz", self.tremor_rate_hz, bounds::TREMOR_RATE_HZ)?;
        check("tremor_depth_pct", self.tremor_depth_pct, bounds::TREMOR_DEPTH_PCT)?;
        check("breathiness", self.breathiness, bounds::BREATHINESS)?;
        let mut prev = 0.0;
        for &(centre, bandwidth) in &self.formants {
            check("formant_center_hz", centre, (prev + f64::EPSILON, f64::MAX))?;
            check("formant_bandwidth_hz", bandwidth, (f64::EPSILON, f64::MAX))?;
            prev = centre;
        }
        Ok(())
    }

    /// Vocal-tract scale relative to the reference /a/ formants.
    fn formant_scale(&self) -> f64 {
        let a = vowel_formants(Vowel::A);
        (0..3).map(|i| self.formants[i].0 / a[i]).sum::<f64>() / 3.0
    }

    fn vowel_resonators(&self, vowel: Vowel, rate: u32) -> [(f64, f64); 3] {
        let scale = self.formant_scale();
        let centres = vowel_formants(vowel);
        let nyquist_guard = 0.45 * rate as f64;
        [0, 1, 2].map(|i| ((centres[i] * scale).min(nyquist_guard), self.formants[i].1))
    }
}

/// Closed interval serialized as `[min, max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range(pub f64, pub f64);

impl Range {
    pub fn point(v: f64) -> Self {
        Range(v, v)
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        if self.0 == self.1 {
            self.0
        } else {
            rng.random_range(self.0..=self.1)
        }
    }

    fn within(&self, (lo, hi): (f64, f64)) -> bool {
        self.0.is_finite() && self.1.is_finite() && lo <= self.0 && self.0 <= self.1 && self.1 <= hi
    }

    /// `centre ± half`, clamped into `limits`.
    fn around(centre: f64, half: f64, (lo, hi): (f64, f64)) -> Self {
        Range((centre - half).clamp(lo, hi), (centre + half).clamp(lo, hi))
    }
}

/// Independent uniform ranges for every profile field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PresetRanges {
    pub f0_hz: Range,
    pub jitter_pct: Range,
    pub shimmer_pct: Range,
    pub hnr_db: Range,
    pub tremor_rate_hz: Range,
    pub tremor_depth_pct: Range,
    pub breathiness: Range,
    /// Multiplier on the reference /a/ formant centres.
    pub formant_scale: Range,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassPreset {
    pub class_name: String,
    pub ranges: PresetRanges,
}

impl ClassPreset {
    pub fn new(class_name: impl Into<String>, ranges: PresetRanges) -> Result<Self, SynthError> {
        let preset = ClassPreset { class_name: class_name.into(), ranges };
        preset.validate()?;
        Ok(preset)
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let r = &self.ranges;
        let fields = [
            ("f0_hz", r.f0_hz, bounds::F0_HZ),
            ("jitter_pct", r.jitter_pct, bounds::JITTER_PCT),
            ("shimmer_pct", r.shimmer_pct, bounds::SHIMMER_PCT),
            ("hnr_db", r.hnr_db, bounds::HNR_DB),
            ("tremor_rate_hz", r.tremor_rate_hz, bounds::TREMOR_RATE_HZ),
            ("tremor_depth_pct", r.tremor_depth_pct, bounds::TREMOR_DEPTH_PCT),
            ("breathiness", r.breathiness, bounds::BREATHINESS),
            ("formant_scale", r.formant_scale, bounds::FORMANT_SCALE),
        ];
        for (name, range, limits) in fields {
            if !range.within(limits) {
                return Err(SynthError::InvalidPreset(format!(
                    "{}: {name} range [{}, {}] outside [{}, {}]",
                    self.class_name, range.0, range.1, limits.0, limits.1
                )));
            }
        }
        Ok(())
    }

    /// Preset centred on a measured profile; `spread` is the relative half-width.
    pub fn around(class_name: impl Into<String>, profile: &VoiceProfile, spread: f64) -> Self {
        let rel = |v: f64, limits| Range::around(v, v.abs() * spread, limits);
        ClassPreset {
            class_name: class_name.into(),
            ranges: PresetRanges {
                f0_hz: rel(profile.f0_hz, bounds::F0_HZ),
                jitter_pct: rel(profile.jitter_pct, bounds::JITTER_PCT),
                shimmer_pct: rel(profile.shimmer_pct, bounds::SHIMMER_PCT),
                hnr_db: Range::around(profile.hnr_db, 10.0 * spread, bounds::HNR_DB),
                tremor_rate_hz: rel(profile.tremor_rate_hz, bounds::TREMOR_RATE_HZ),
                tremor_depth_pct: rel(profile.tremor_depth_pct, bounds::TREMOR_DEPTH_PCT),
                breathiness: Range::around(profile.breathiness, 0.5 * spread, bounds::BREATHINESS),
                formant_scale: Range::around(profile.formant_scale(), 0.2 * spread, bounds::FORMANT_SCALE),
            },
        }
    }
}

fn ranges(
    jitter: (f64, f64),
    shimmer: (f64, f64),
    hnr: (f64, f64),
    tremor_rate: (f64, f64),
    tremor_depth: (f64, f64),
    breathiness: (f64, f64),
) -> PresetRanges {
    PresetRanges {
        f0_hz: Range(100.0, 220.0),
        jitter_pct: Range(jitter.0, jitter.1),
        shimmer_pct: Range(shimmer.0, shimmer.1),
        hnr_db: Range(hnr.0, hnr.1),
        tremor_rate_hz: Range(tremor_rate.0, tremor_rate.1),
        tremor_depth_pct: Range(tremor_depth.0, tremor_depth.1),
        breathiness: Range(breathiness.0, breathiness.1),
        formant_scale: Range(0.92, 1.08),
    }
}

/// The built-in class presets: `healthy`, `hyperfunctional`, `breathy`, `tremor`.
pub fn default_presets() -> Vec<ClassPreset> {
    vec![
        ClassPreset {
            class_name: "healthy".into(),
            ranges: ranges((0.2, 0.6), (1.0, 3.0), (20.0, 30.0), (3.0, 6.0), (0.0, 2.0), (0.0, 0.2)),
        },
        ClassPreset {
            class_name: "hyperfunctional".into(),
            ranges: ranges((2.0, 5.0), (3.0, 6.0), (12.0, 20.0), (3.0, 6.0), (0.0, 2.0), (0.0, 0.2)),
        },
        ClassPreset {
            class_name: "breathy".into(),
            ranges: ranges((0.3, 1.0), (2.0, 5.0), (0.0, 8.0), (3.0, 6.0), (0.0, 2.0), (0.5, 0.9)),
        },
        ClassPreset {
            class_name: "tremor".into(),
            ranges: ranges((0.3, 1.0), (2.0, 5.0), (15.0, 22.0), (4.0, 8.0), (8.0, 18.0), (0.0, 0.2)),
        },
    ]
}

pub fn presets_to_json(presets: &[ClassPreset]) -> String {
    let map: BTreeMap<&str, &PresetRanges> = presets.iter().map(|p| (p.class_name.as_str(), &p.ranges)).collect();
    serde_json::to_string_pretty(&map).expect("preset ranges always serialize")
}

pub fn presets_from_json(text: &str) -> Result<Vec<ClassPreset>, SynthError> {
    let map: BTreeMap<String, PresetRanges> =
        serde_json::from_str(text).map_err(|e| SynthError::InvalidPreset(e.to_string()))?;
    map.into_iter().map(|(name, r)| ClassPreset::new(name, r)).collect()
}

pub fn find_preset<'a>(presets: &'a [ClassPreset], class_name: &str) -> Option<&'a ClassPreset> {
    presets.iter().find(|p| p.class_name == class_name)
}

/// Draws every field independently and uniformly from its range.
pub fn sample_profile(preset: &ClassPreset, seed: u64) -> VoiceProfile {
    let mut rng = rng_from(seed, &["profile", &preset.class_name]);
    let r = &preset.ranges;
    let f0_hz = r.f0_hz.sample(&mut rng);
    let jitter_pct = r.jitter_pct.sample(&mut rng);
    let shimmer_pct = r.shimmer_pct.sample(&mut rng);
    let hnr_db = r.hnr_db.sample(&mut rng);
    let tremor_rate_hz = r.tremor_rate_hz.sample(&mut rng);
    let tremor_depth_pct = r.tremor_depth_pct.sample(&mut rng);
    let breathiness = r.breathiness.sample(&mut rng);
    let scale = r.formant_scale.sample(&mut rng);
    VoiceProfile {
        f0_hz,
        jitter_pct,
        shimmer_pct,
        hnr_db,
        tremor_rate_hz,
        tremor_depth_pct,
        formants: default_formants(scale),
        breathiness,
    }
}

/// Profile whose f0/jitter/shimmer/HNR are the medians measured on `clips`.
///
/// Unvoiced clips are skipped; tremor and breathiness are left at zero and the
/// formants at the reference vowel values.
pub fn condition_from_reference(clips: &[AudioClip]) -> Result<VoiceProfile, SynthError> {
    let (mut f0, mut jitter, mut shimmer, mut hnr) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for clip in clips {
        let Ok(m) = acoustics::analyze(clip) else { continue };
        let Some(f) = m.f0_hz else { continue };
        f0.push(f);
        jitter.extend(m.jitter_pct);
        shimmer.extend(m.shimmer_pct);
        hnr.extend(m.hnr_db);
    }
    let f0 = median(&f0).ok_or(SynthError::AllUnvoiced)?;
    let base = VoiceProfile::default();
    let clamp = |v: Option<f64>, fallback: f64, (lo, hi): (f64, f64)| v.unwrap_or(fallback).clamp(lo, hi);
    Ok(VoiceProfile {
        f0_hz: f0.clamp(bounds::F0_HZ.0, bounds::F0_HZ.1),
        jitter_pct: clamp(median(&jitter), base.jitter_pct, bounds::JITTER_PCT),
        shimmer_pct: clamp(median(&shimmer), base.shimmer_pct, bounds::SHIMMER_PCT),
        hnr_db: clamp(median(&hnr), base.hnr_db, bounds::HNR_DB),
        tremor_rate_hz: 0.0,
        tremor_depth_pct: 0.0,
        formants: default_formants(1.0),
        breathiness: 0.0,
    })
}

/// A voiced stretch of the output.
#[derive(Debug, Clone, Copy)]
struct Segment {
    start: usize,
    len: usize,
    vowel: Vowel,
    ramp: usize,
}

/// One glottal cycle, `[start, start + period)` in seconds, closing at its end.
#[derive(Debug, Clone, Copy)]
struct Cycle {
    start: f64,
    period: f64,
    /// Amplitude before shimmer.
    base_amp: f64,
    /// Standard-normal shimmer draw.
    shimmer_draw: f64,
}

fn clamped_normal(rng: &mut ChaCha8Rng) -> f64 {
    standard_normal(rng).clamp(-3.0, 3.0)
}

/// Everything a render needs; a pure function of profile, layout and seed.
struct Layout<'a, C: Fn(f64) -> f64> {
    profile: &'a VoiceProfile,
    rate: u32,
    len: usize,
    segments: Vec<Segment>,
    contour: C,
    seed: u64,
}

impl<C: Fn(f64) -> f64> Layout<'_, C> {
    /// Glottal cycles with the jitter standard deviation scaled by `jitter_gain`.
    ///
    /// Draws come from fixed streams, so changing the gain rescales the same
    /// perturbation sequence.
    fn cycles(&self, jitter_gain: f64) -> Vec<Cycle> {
        let profile = self.profile;
        let mut jitter_rng = rng_from(self.seed, &["jitter"]);
        let mut shimmer_rng = rng_from(self.seed, &["shimmer"]);
        let mut phase_rng = rng_from(self.seed, &["phase"]);
        let tremor_phase = phase_rng.random_range(0.0..2.0 * PI);
        let depth = profile.tremor_depth_pct / 100.0;
        let tremor = |t: f64| (2.0 * PI * profile.tremor_rate_hz * t + tremor_phase).sin();
        let f0_at = |t: f64| profile.f0_hz * (self.contour)(t) * (1.0 + depth * tremor(t));
        let sigma_j = jitter_gain * profile.jitter_pct / 100.0 / MEAN_ABS_DIFF_PER_SIGMA;
        let end = self.len as f64 / self.rate as f64;
        let mut t = -phase_rng.random_range(0.0..1.0) / f0_at(0.0);
        let mut cycles = Vec::new();
        while t < end {
            let period = (1.0 + sigma_j * clamped_normal(&mut jitter_rng)) / f0_at(t.max(0.0));
            cycles.push(Cycle {
                start: t,
                period,
                base_amp: 1.0 + 0.5 * depth * tremor(t),
                shimmer_draw: clamped_normal(&mut shimmer_rng),
            });
            t += period;
        }
        cycles
    }

    /// Differentiated glottal flow at the output rate, split into the
    /// unperturbed part and the part that scales with the shimmer deviation.
    fn excitation(&self, cycles: &[Cycle]) -> (Vec<f64>, Vec<f64>) {
        let hi_rate = (self.rate as usize * OVERSAMPLE) as f64;
        let n_hi = (self.len + 1) * OVERSAMPLE;
        let sigma_s = self.profile.shimmer_pct / 100.0 / MEAN_ABS_DIFF_PER_SIGMA;
        let closing_q = CLOSING_QUOTIENT * (1.0 + self.profile.breathiness);
        let mut base = vec![0.0; n_hi + 1];
        let mut shimmer = vec![0.0; n_hi + 1];
        for c in cycles {
            let amp = c.base_amp * c.period;
            let tp = OPENING_QUOTIENT * c.period;
            let tn = closing_q * c.period;
            let closure = c.start + c.period;
            let open = closure - tp - tn;
            let first = (open * hi_rate).ceil().max(0.0) as isize;
            let last = ((closure * hi_rate).floor() as isize).min(n_hi as isize);
            for i in first..=last {
                let tau = i as f64 / hi_rate - open;
                let g =
                    if tau <= tp { 0.5 * (1.0 - (PI * tau / tp).cos()) } else { (0.5 * PI * (tau - tp) / tn).cos() };
                base[i as usize] += amp * g;
                shimmer[i as usize] += amp * sigma_s * c.shimmer_draw * g;
            }
        }
        let down = |flow: Vec<f64>| -> Vec<f64> {
            let diff: Vec<f64> = flow.windows(2).map(|w| (w[1] - w[0]) * hi_rate).collect();
            let mut out = resample_ratio(&diff, 1.0 / OVERSAMPLE as f64);
            out.resize(self.len, 0.0);
            out
        };
        (down(base), down(shimmer))
    }

    /// Filters `source` through each segment's resonators and ramps.
    fn shape(&self, source: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.len];
        for seg in &self.segments {
            let resonators = self.profile.vowel_resonators(seg.vowel, self.rate);
            let filtered = formant_cascade(&source[seg.start..seg.start + seg.len], &resonators, self.rate);
            for (i, v) in filtered.into_iter().enumerate() {
                out[seg.start + i] = v * ramp_gain(i, seg.len, seg.ramp);
            }
        }
        out
    }

    fn voiced_parts(&self, jitter_gain: f64) -> VoicedParts {
        let (base, shimmer) = self.excitation(&self.cycles(jitter_gain));
        VoicedParts { base: self.shape(&base), shimmer: self.shape(&shimmer) }
    }

    fn aspiration(&self) -> Vec<f64> {
        let mut rng = rng_from(self.seed, &["aspiration"]);
        let white: Vec<f64> = (0..self.len).map(|_| standard_normal(&mut rng)).collect();
        self.shape(&white)
    }
}

/// The voiced signal is `base + shimmer_gain · shimmer`.
struct VoicedParts {
    base: Vec<f64>,
    shimmer: Vec<f64>,
}

impl VoicedParts {
    fn mix(&self, shimmer_gain: f64) -> Vec<f64> {
        self.base.iter().zip(&self.shimmer).map(|(b, s)| b + shimmer_gain * s).collect()
    }
}

fn ramp_gain(i: usize, len: usize, ramp: usize) -> f64 {
    let edge = i.min(len - 1 - i);
    if ramp == 0 || edge >= ramp {
        1.0
    } else {
        0.5 * (1.0 - (PI * edge as f64 / ramp as f64).cos())
    }
}

/// Cascade of unity-DC-gain two-pole resonators.
fn formant_cascade(x: &[f64], resonators: &[(f64, f64); 3], rate: u32) -> Vec<f64> {
    let mut y = x.to_vec();
    for &(centre, bandwidth) in resonators {
        let r = (-PI * bandwidth / rate as f64).exp();
        let a1 = 2.0 * r * (2.0 * PI * centre / rate as f64).cos();
        let a2 = -r * r;
        let gain = 1.0 - a1 - a2;
        let (mut y1, mut y2) = (0.0, 0.0);
        for v in y.iter_mut() {
            let out = gain * *v + a1 * y1 + a2 * y2;
            y2 = y1;
            y1 = out;
            *v = out;
        }
    }
    y
}

fn peak_normalize(mut x: Vec<f64>) -> Vec<f64> {
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        let g = OUTPUT_PEAK / peak;
        x.iter_mut().for_each(|v| *v *= g);
    }
    x
}

fn as_clip(samples: Vec<f64>, rate: u32) -> AudioClip {
    AudioClip::new("calibration", peak_normalize(samples), rate).expect("rendered audio is non-empty")
}

/// Runs the secant method on `f(x) = target`, returning the best `x` seen.
fn calibrate(
    target: f64,
    mut x: f64,
    tolerance: f64,
    lower: f64,
    mut f: impl FnMut(f64) -> Result<f64, AcousticsError>,
) -> f64 {
    let mut best = (f64::INFINITY, x);
    let mut prev: Option<(f64, f64)> = None;
    for _ in 0..CALIBRATION_STEPS {
        let Ok(m) = f(x) else { break };
        let err = (m - target).abs();
        if err < best.0 {
            best = (err, x);
        }
        if err <= tolerance {
            break;
        }
        let next = match prev {
            Some((px, pm)) if (m - pm).abs() > 1e-12 => x + (target - m) * (x - px) / (m - pm),
            _ => x * (target / m.max(1e-9)).clamp(0.25, 4.0),
        };
        prev = Some((x, m));
        x = next.max(lower);
    }
    best.1
}

/// Renders a layout. Jitter and shimmer deviations are scaled until the
/// clean signal measures as requested (the formant ringing of one period into
/// the next perturbs both measures), then aspiration noise is scaled until
/// the measured HNR reaches the target.
fn render<C: Fn(f64) -> f64>(layout: &Layout<C>) -> Vec<f64> {
    let profile = layout.profile;
    let rate = layout.rate;
    let jitter_gain = if profile.jitter_pct > 0.0 {
        let tol = (0.03 * profile.jitter_pct).max(0.01);
        calibrate(profile.jitter_pct, 1.0, tol, 0.0, |g| {
            acoustics::measure_jitter(&as_clip(layout.voiced_parts(g).mix(1.0), rate))
        })
    } else {
        0.0
    };
    let parts = layout.voiced_parts(jitter_gain);
    let shimmer_gain = if profile.shimmer_pct > 0.0 {
        let tol = (0.03 * profile.shimmer_pct).max(0.02);
        calibrate(profile.shimmer_pct, 1.0, tol, 0.0, |g| acoustics::measure_shimmer(&as_clip(parts.mix(g), rate)))
    } else {
        0.0
    };
    let voiced = parts.mix(shimmer_gain);
    let noise = layout.aspiration();
    let h = 10f64.powf(profile.hnr_db / 10.0);
    let target_r = h / (1.0 + h);
    let noise_gain = match acoustics::periodicity(&as_clip(voiced.clone(), rate)) {
        Ok(r) if r > target_r && power(&noise) > 0.0 => {
            let p_noise = power(&voiced) * (r / target_r - 1.0);
            let g0 = (p_noise / power(&noise)).sqrt();
            let mix = |g: f64| -> Vec<f64> { voiced.iter().zip(&noise).map(|(v, n)| v + g * n).collect() };
            // Searched in dB of noise gain; HNR falls roughly one dB per dB.
            let db = calibrate(-profile.hnr_db, 20.0 * g0.log10(), 0.3, f64::NEG_INFINITY, |db| {
                let g = 10f64.powf(db / 20.0);
                // A secant overshoot this far would only render noise (or overflow).
                if g.is_nan() || g >= 1e6 * g0 {
                    return Err(AcousticsError::Unvoiced);
                }
                acoustics::measure_hnr(&as_clip(mix(g), rate)).map(|m| -m)
            });
            10f64.powf(db / 20.0)
        }
        _ => 0.0,
    };
    let mixed = voiced.iter().zip(&noise).map(|(v, n)| v + noise_gain * n).collect();
    peak_normalize(mixed)
}

fn check_rate(rate: u32) -> Result<(), SynthError> {
    if is_supported_rate(rate) {
        Ok(())
    } else {
        Err(AudioError::UnsupportedRate(rate).into())
    }
}

/// A sustained vowel of exactly `round(duration_s · rate)` samples.
pub fn synthesize_vowel(
    profile: &VoiceProfile,
    vowel: Vowel,
    duration_s: f64,
    sample_rate_hz: u32,
    seed: u64,
) -> Result<AudioClip, SynthError> {
    if !(0.5..=10.0).contains(&duration_s) {
        return Err(SynthError::InvalidDuration(duration_s));
    }
    profile.validate()?;
    check_rate(sample_rate_hz)?;
    let len = (duration_s * sample_rate_hz as f64).round() as usize;
    let ramp = (VOWEL_RAMP_MS * sample_rate_hz as f64 / 1000.0) as usize;
    let segments = vec![Segment { start: 0, len, vowel, ramp }];
    let layout = Layout { profile, rate: sample_rate_hz, len, segments, contour: |_| 1.0, seed };
    let samples = render(&layout);
    Ok(AudioClip::new(format!("vowel-{seed:016x}"), samples, sample_rate_hz)?)
}

/// Syllables of random vowels (120–250 ms) after silent gaps (30–80 ms),
/// over an f0 contour falling from 1.1× to 0.85× the profile f0.
pub fn synthesize_pseudo_sentence(
    profile: &VoiceProfile,
    n_syllables: usize,
    sample_rate_hz: u32,
    seed: u64,
) -> Result<AudioClip, SynthError> {
    pseudo_sentence(profile, n_syllables, None, sample_rate_hz, seed)
}

/// The vowel sequence of a pseudo-sentence "text" shared by many speakers.
pub fn sentence_text(n_syllables: usize, text_seed: u64) -> Vec<Vowel> {
    let mut rng = rng_from(text_seed, &["sentence-text"]);
    (0..n_syllables).map(|_| Vowel::ALL[rng.random_range(0..Vowel::ALL.len())]).collect()
}

/// Like [`synthesize_pseudo_sentence`] but reading a fixed vowel sequence,
/// as when every speaker reads the same sentence; timing still varies with `seed`.
pub fn synthesize_sentence_text(
    profile: &VoiceProfile,
    text: &[Vowel],
    sample_rate_hz: u32,
    seed: u64,
) -> Result<AudioClip, SynthError> {
    pseudo_sentence(profile, text.len(), Some(text), sample_rate_hz, seed)
}

fn pseudo_sentence(
    profile: &VoiceProfile,
    n_syllables: usize,
    text: Option<&[Vowel]>,
    sample_rate_hz: u32,
    seed: u64,
) -> Result<AudioClip, SynthError> {
    if !(3..=40).contains(&n_syllables) {
        return Err(SynthError::InvalidSyllableCount(n_syllables));
    }
    profile.validate()?;
    check_rate(sample_rate_hz)?;
    let rate = sample_rate_hz as f64;
    let ms = |v: u32| (v as f64 * rate / 1000.0).round() as usize;
    let mut rng = rng_from(seed, &["syllables"]);
    let mut segments = Vec::with_capacity(n_syllables);
    let mut cursor = 0;
    for i in 0..n_syllables {
        cursor += ms(rng.random_range(30..=80));
        let len = ms(rng.random_range(120..=250));
        let drawn = Vowel::ALL[rng.random_range(0..Vowel::ALL.len())];
        segments.push(Segment {
            start: cursor,
            len,
            vowel: text.map_or(drawn, |t| t[i]),
            ramp: ms(SYLLABLE_RAMP_MS as u32),
        });
        cursor += len;
    }
    let total = cursor;
    let span = total as f64 / rate;
    let contour = move |t: f64| 1.1 + (0.85 - 1.1) * (t / span).clamp(0.0, 1.0);
    let layout = Layout { profile, rate: sample_rate_hz, len: total, segments, contour, seed };
    let samples = render(&layout);
    Ok(AudioClip::new(format!("sentence-{seed:016x}"), samples, sample_rate_hz)?)
}

/// Which record attribute defines a class when balancing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BalanceKey {
    Label,
    PathologyClass,
}

impl BalanceKey {
    /// Class of a record under this key; healthy rows have no pathology class.
    pub fn class_of(self, record: &ClipRecord) -> Option<String> {
        match self {
            BalanceKey::Label => Some(record.label.as_str().to_string()),
            BalanceKey::PathologyClass => record.pathology_class.clone(),
        }
    }
}

/// Clips to synthesize per recording type and class.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SynthesisPlan {
    pub counts: BTreeMap<RecordingType, BTreeMap<String, usize>>,
}

impl SynthesisPlan {
    pub fn total(&self) -> usize {
        self.counts.values().flat_map(|m| m.values()).sum()
    }

    pub fn get(&self, rtype: RecordingType, class: &str) -> usize {
        self.counts.get(&rtype).and_then(|m| m.get(class)).copied().unwrap_or(0)
    }
}

/// Per recording type, tops every class up to the largest class count.
pub fn plan_balancing(records: &[ClipRecord], key: BalanceKey) -> SynthesisPlan {
    let mut current: BTreeMap<RecordingType, BTreeMap<String, usize>> = BTreeMap::new();
    for r in records {
        if let Some(class) = key.class_of(r) {
            *current.entry(r.recording_type).or_default().entry(class).or_default() += 1;
        }
    }
    let counts = current
        .into_iter()
        .map(|(rtype, classes)| {
            let max = classes.values().copied().max().unwrap_or(0);
            let deficits = classes.into_iter().map(|(c, n)| (c, max - n)).collect();
            (rtype, deficits)
        })
        .collect();
    SynthesisPlan { counts }
}

/// Manifest rows (without audio) that carry out `plan`.
///
/// Vowel rows cycle through the vowels already present for that class. Each
/// row gets its own synthetic speaker and session.
pub fn plan_records(plan: &SynthesisPlan, key: BalanceKey, existing: &[ClipRecord], prefix: &str) -> Vec<ClipRecord> {
    let template = existing.first();
    let dataset_id = template.map_or("synthetic".to_string(), |r| r.dataset_id.clone());
    let language = template.map_or("XX".to_string(), |r| r.language.clone());
    let mut out = Vec::new();
    for (rtype, classes) in &plan.counts {
        for (class, &n) in classes {
            let vowels: Vec<Vowel> = existing
                .iter()
                .filter(|r| r.recording_type == *rtype && key.class_of(r).as_deref() == Some(class))
                .filter_map(|r| r.vowel_label)
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            let (label, pathology_class) = match key {
                BalanceKey::Label => (Label::parse(class).unwrap_or(Label::Pathological), None),
                BalanceKey::PathologyClass => (Label::Pathological, Some(class.clone())),
            };
            for i in 0..n {
                let speaker = format!("{prefix}-{class}-{rtype}-{i:04}");
                let vowel_label = match rtype {
                    RecordingType::Vowel => Some(if vowels.is_empty() { Vowel::A } else { vowels[i % vowels.len()] }),
                    RecordingType::Sentence => None,
                };
                out.push(ClipRecord {
                    clip_id: format!("{speaker}-clip"),
                    path: format!("synthetic/{speaker}-clip.wav"),
                    dataset_id: dataset_id.clone(),
                    speaker_id: speaker.clone(),
                    session_id: format!("{speaker}-session"),
                    recording_type: *rtype,
                    vowel_label,
                    label,
                    pathology_class: pathology_class.clone(),
                    origin: Origin::Synthetic,
                    language: language.clone(),
                    parent_clip_id: None,
                    conditioned_on: Vec::new(),
                    provenance: None,
                });
            }
        }
    }
    out
}

/// Renders audio for a manifest row from a profile.
pub fn render_record(
    record: &ClipRecord,
    profile: &VoiceProfile,
    shape: &RenderShape,
    seed: u64,
) -> Result<AudioClip, SynthError> {
    let clip = match (record.recording_type, record.vowel_label) {
        (RecordingType::Vowel, vowel) => {
            synthesize_vowel(profile, vowel.unwrap_or(Vowel::A), shape.vowel_duration_s, shape.sample_rate_hz, seed)?
        }
        (RecordingType::Sentence, _) => match shape.sentence_text_seed {
            Some(text_seed) => synthesize_sentence_text(
                profile,
                &sentence_text(shape.n_syllables, text_seed),
                shape.sample_rate_hz,
                seed,
            )?,
            None => synthesize_pseudo_sentence(profile, shape.n_syllables, shape.sample_rate_hz, seed)?,
        },
    };
    Ok(clip.with_id(record.clip_id.clone()))
}

/// Durations and rate of generated clips.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderShape {
    pub vowel_duration_s: f64,
    pub n_syllables: usize,
    pub sample_rate_hz: u32,
    /// Shared sentence text (every speaker reads the same vowel sequence);
    /// `None` draws a fresh sequence per clip.
    #[serde(default)]
    pub sentence_text_seed: Option<u64>,
}

impl Default for RenderShape {
    fn default() -> Self {
        RenderShape {
            vowel_duration_s: 1.0,
            n_syllables: 8,
            sample_rate_hz: crate::audio::CANONICAL_RATE,
            sentence_text_seed: Some(1),
        }
    }
}

/// Settings for a desk-scale corpus drawn from class presets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeskCorpusConfig {
    pub seed: u64,
    pub dataset_id: String,
    pub speaker_prefix: String,
    pub origin: Origin,
    pub n_healthy: usize,
    /// Speakers per pathological preset.
    pub pathological: Vec<(String, usize)>,
    pub vowels: Vec<Vowel>,
    pub shape: RenderShape,
}

impl Default for DeskCorpusConfig {
    fn default() -> Self {
        DeskCorpusConfig {
            seed: 42,
            dataset_id: "desk".into(),
            speaker_prefix: "spk".into(),
            origin: Origin::Real,
            n_healthy: 30,
            pathological: vec![("hyperfunctional".into(), 10), ("breathy".into(), 10), ("tremor".into(), 10)],
            vowels: vec![Vowel::A, Vowel::I, Vowel::U],
            shape: RenderShape::default(),
        }
    }
}

/// One session per speaker holding a pseudo-sentence and one clip per vowel.
///
/// Clip paths are `audio/<clip_id>.wav`, relative to wherever the caller
/// writes the manifest.
pub fn desk_corpus(
    config: &DeskCorpusConfig,
    presets: &[ClassPreset],
) -> Result<Vec<(ClipRecord, AudioClip)>, SynthError> {
    let mut speakers: Vec<(String, &ClassPreset, Label)> = Vec::new();
    let healthy =
        find_preset(presets, "healthy").ok_or_else(|| SynthError::InvalidPreset("no `healthy` preset".into()))?;
    for i in 0..config.n_healthy {
        speakers.push((format!("{}-h{i:03}", config.speaker_prefix), healthy, Label::Healthy));
    }
    for (class, n) in &config.pathological {
        let preset =
            find_preset(presets, class).ok_or_else(|| SynthError::InvalidPreset(format!("no `{class}` preset")))?;
        for i in 0..*n {
            speakers.push((format!("{}-{class}{i:03}", config.speaker_prefix), preset, Label::Pathological));
        }
    }
    let mut jobs: Vec<(ClipRecord, VoiceProfile)> = Vec::new();
    for (speaker, preset, label) in &speakers {
        let profile = sample_profile(preset, derive_seed(config.seed, &[speaker]));
        let pathology_class = (*label == Label::Pathological).then(|| preset.class_name.clone());
        let mut rows = vec![(format!("{speaker}-sent"), RecordingType::Sentence, None)];
        for v in &config.vowels {
            rows.push((format!("{speaker}-{}", v.as_str()), RecordingType::Vowel, Some(*v)));
        }
        for (clip_id, recording_type, vowel_label) in rows {
            let record = ClipRecord {
                path: format!("audio/{clip_id}.wav"),
                clip_id,
                dataset_id: config.dataset_id.clone(),
                speaker_id: speaker.clone(),
                session_id: format!("{speaker}-s1"),
                recording_type,
                vowel_label,
                label: *label,
                pathology_class: pathology_class.clone(),
                origin: config.origin,
                language: "XX".into(),
                parent_clip_id: None,
                conditioned_on: Vec::new(),
                provenance: Some(format!("preset:{}", preset.class_name)),
            };
            jobs.push((record, profile.clone()));
        }
    }
    jobs.into_par_iter()
        .map(|(record, profile)| {
            let seed = derive_seed(config.seed, &[&record.clip_id]);
            let clip = render_record(&record, &profile, &config.shape, seed)?;
            Ok((record, clip))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acoustics::analyze;

    fn point_preset(p: &VoiceProfile) -> ClassPreset {
        ClassPreset {
            class_name: "point".into(),
            ranges: PresetRanges {
                f0_hz: Range::point(p.f0_hz),
                jitter_pct: Range::point(p.jitter_pct),
                shimmer_pct: Range::point(p.shimmer_pct),
                hnr_db: Range::point(p.hnr_db),
                tremor_rate_hz: Range::point(p.tremor_rate_hz),
                tremor_depth_pct: Range::point(p.tremor_depth_pct),
                breathiness: Range::point(p.breathiness),
                formant_scale: Range::point(1.0),
            },
        }
    }

    #[test]
    fn degenerate_ranges_give_point_profile() {
        let p = VoiceProfile::default();
        assert_eq!(sample_profile(&point_preset(&p), 9), p);
    }

    #[test]
    fn sampling_is_seeded_and_uniform() {
        let presets = default_presets();
        assert_eq!(sample_profile(&presets[1], 5), sample_profile(&presets[1], 5));
        let mut preset = presets[0].clone();
        preset.ranges.jitter_pct = Range(1.0, 3.0);
        let draws: Vec<f64> = (0..1000).map(|s| sample_profile(&preset, s).jitter_pct).collect();
        let mean = draws.iter().sum::<f64>() / 1000.0;
        assert!(draws.iter().all(|&j| (1.0..=3.0).contains(&j)));
        assert!((mean - 2.0).abs() < 0.1, "mean {mean}");
    }

    #[test]
    fn default_presets_are_valid_and_round_trip_json() {
        let presets = default_presets();
        for p in &presets {
            p.validate().unwrap();
        }
        let back = presets_from_json(&presets_to_json(&presets)).unwrap();
        let mut sorted = presets.clone();
        sorted.sort_by(|a, b| a.class_name.cmp(&b.class_name));
        assert_eq!(back, sorted);
        assert!(matches!(presets_from_json(r#"{"x": {"f0_hz": [10, 20]}}"#), Err(SynthError::InvalidPreset(_))));
    }

    #[test]
    fn vowel_length_and_peak() {
        let clip = synthesize_vowel(&VoiceProfile::default(), Vowel::A, 2.0, 16_000, 1).unwrap();
        assert_eq!(clip.len(), 32_000);
        let peak = clip.samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!((peak - OUTPUT_PEAK).abs() < 1e-12);
        assert!(matches!(
            synthesize_vowel(&VoiceProfile::default(), Vowel::A, 0.2, 16_000, 1),
            Err(SynthError::InvalidDuration(_))
        ));
    }

    #[test]
    fn synthesis_is_deterministic() {
        let p = default_presets()[2].clone();
        let profile = sample_profile(&p, 3);
        let a = synthesize_pseudo_sentence(&profile, 5, 16_000, 11).unwrap();
        let b = synthesize_pseudo_sentence(&profile, 5, 16_000, 11).unwrap();
        assert_eq!(a.samples, b.samples);
        let c = synthesize_pseudo_sentence(&profile, 5, 16_000, 12).unwrap();
        assert_ne!(a.samples, c.samples);
    }

    #[test]
    fn healthy_vowel_measures_as_requested() {
        let profile = VoiceProfile { jitter_pct: 0.3, hnr_db: 25.0, ..VoiceProfile::default() };
        let clip = synthesize_vowel(&profile, Vowel::A, 2.0, 16_000, 4).unwrap();
        let m = analyze(&clip).unwrap();
        assert!(m.jitter_pct.unwrap() < 1.0, "{m:?}");
        assert!((m.hnr_db.unwrap() - 25.0).abs() <= 3.0, "{m:?}");
        assert!((m.f0_hz.unwrap() - 150.0).abs() < 2.0, "{m:?}");
    }

    #[test]
    fn jitter_four_percent_measures_four() {
        let profile = VoiceProfile { jitter_pct: 4.0, ..VoiceProfile::default() };
        let clip = synthesize_vowel(&profile, Vowel::A, 2.0, 16_000, 4).unwrap();
        let j = acoustics::measure_jitter(&clip).unwrap();
        assert!((j - 4.0).abs() <= 1.0, "jitter {j}");
    }

    #[test]
    fn reference_conditioning_recovers_profile() {
        let profile = VoiceProfile { f0_hz: 180.0, jitter_pct: 1.5, ..VoiceProfile::default() };
        let clip = synthesize_vowel(&profile, Vowel::A, 2.0, 16_000, 8).unwrap();
        let got = condition_from_reference(&[clip]).unwrap();
        assert!((got.f0_hz - 180.0).abs() <= 2.0, "{got:?}");
        assert!((got.jitter_pct - 1.5).abs() <= 0.5, "{got:?}");
    }

    #[test]
    fn white_noise_references_are_unvoiced() {
        let mut rng = rng_from(2, &["noise"]);
        let noise: Vec<f64> = (0..16_000).map(|_| 0.3 * standard_normal(&mut rng)).collect();
        let clip = AudioClip::new("n", noise, 16_000).unwrap();
        assert!(matches!(condition_from_reference(&[clip.clone(), clip]), Err(SynthError::AllUnvoiced)));
    }

    #[test]
    fn pseudo_sentence_bounds_and_voicing() {
        let profile = VoiceProfile::default();
        let clip = synthesize_pseudo_sentence(&profile, 10, 16_000, 5).unwrap();
        let d = clip.duration_s();
        assert!((1.5..=3.3).contains(&d), "duration {d}");
        let m = analyze(&clip).unwrap();
        assert!(m.voiced_fraction > 0.5, "{m:?}");
        assert!(matches!(synthesize_pseudo_sentence(&profile, 2, 16_000, 5), Err(SynthError::InvalidSyllableCount(2))));
    }

    /// Counts runs of 10 ms frames whose energy exceeds 1 % of the peak frame.
    fn energy_segments(clip: &AudioClip) -> usize {
        let frame = clip.sample_rate_hz as usize / 100;
        let energies: Vec<f64> = clip.samples.chunks(frame).map(power).collect();
        let peak = energies.iter().cloned().fold(0.0, f64::max);
        let mut runs = 0;
        let mut inside = false;
        for e in energies {
            let on = e > 0.01 * peak;
            if on && !inside {
                runs += 1;
            }
            inside = on;
        }
        runs
    }

    #[test]
    fn three_syllables_give_three_segments() {
        let profile = VoiceProfile { jitter_pct: 0.0, shimmer_pct: 0.0, hnr_db: 40.0, ..VoiceProfile::default() };
        let clip = synthesize_pseudo_sentence(&profile, 3, 16_000, 3).unwrap();
        assert_eq!(energy_segments(&clip), 3);
    }

    fn vowel_records(h: usize, p: usize) -> Vec<ClipRecord> {
        let mut out = Vec::new();
        for (label, n) in [(Label::Healthy, h), (Label::Pathological, p)] {
            for i in 0..n {
                let id = format!("{}-{i}", label.as_str());
                out.push(ClipRecord {
                    clip_id: id.clone(),
                    path: format!("{id}.wav"),
                    dataset_id: "d".into(),
                    speaker_id: id.clone(),
                    session_id: id,
                    recording_type: RecordingType::Vowel,
                    vowel_label: Some(Vowel::A),
                    label,
                    pathology_class: None,
                    origin: Origin::Real,
                    language: "IT".into(),
                    parent_clip_id: None,
                    conditioned_on: vec![],
                    provenance: None,
                });
            }
        }
        out
    }

    #[test]
    fn balancing_fills_deficits() {
        let records = vowel_records(2, 5);
        let plan = plan_balancing(&records, BalanceKey::Label);
        assert_eq!(plan.get(RecordingType::Vowel, "healthy"), 3);
        assert_eq!(plan.get(RecordingType::Vowel, "pathological"), 0);
        let mut all = records.clone();
        all.extend(plan_records(&plan, BalanceKey::Label, &records, "syn"));
        let stats = crate::corpus::corpus_stats(&all);
        assert_eq!(stats.n_healthy_speakers, stats.n_pathological_speakers);
        assert_eq!(plan_balancing(&all, BalanceKey::Label).total(), 0);
    }
}
