//! Acoustic measurements: f0, jitter, shimmer, HNR and SNR.
//!
//! Pitch is tracked frame by frame from the normalized autocorrelation of the
//! waveform. The integer-lag autocorrelation is refined to a fractional lag by
//! windowed-sinc interpolation, which keeps HNR and pitch precise even when a
//! period is not a whole number of samples. A dynamic-programming pass then
//! picks one candidate per frame, charging for octave jumps between
//! neighbouring frames. Jitter and shimmer are computed
//! from one mark per period: each mark is placed by cross-correlating the
//! previous period's waveform against a window around one local period ahead,
//! and carries the amplitude of the nearest waveform peak.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::AudioClip;
use crate::util::{median, power};

pub const DEFAULT_FMIN_HZ: f64 = 60.0;
pub const DEFAULT_FMAX_HZ: f64 = 500.0;
pub const FRAME_MS: f64 = 40.0;
pub const HOP_MS: f64 = 10.0;
/// Normalized autocorrelation peak at or above which a frame is voiced.
pub const VOICING_THRESHOLD: f64 = 0.45;
/// f0 is reported only above this voiced-frame fraction.
pub const MIN_VOICED_FRACTION: f64 = 0.2;
/// Value returned by [`measure_snr`] when the two clips are identical.
pub const SNR_IDENTICAL_DB: f64 = 200.0;

const OCTAVE_COST: f64 = 0.01;
const OCTAVE_JUMP_COST: f64 = 0.35;
const VOICED_UNVOICED_COST: f64 = 0.14;
const MAX_CANDIDATES: usize = 15;
const INTERP_HALF_WIDTH: isize = 12;
/// Search window around the predicted next mark, as a fraction of the period.
const PEAK_SEARCH: f64 = 0.3;

#[derive(Debug, Error, PartialEq)]
pub enum AcousticsError {
    #[error("invalid pitch range [{fmin}, {fmax}] Hz at {rate} Hz sampling")]
    InvalidRange { fmin: f64, fmax: f64, rate: u32 },
    #[error("clip of {len} samples is too short for pitch analysis (needs {needed})")]
    TooShort { len: usize, needed: usize },
    #[error("clip is unvoiced")]
    Unvoiced,
    #[error("clip lengths or rates differ ({0} vs {1} samples)")]
    LengthMismatch(usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcousticMeasurement {
    pub f0_hz: Option<f64>,
    pub jitter_pct: Option<f64>,
    pub shimmer_pct: Option<f64>,
    pub hnr_db: Option<f64>,
    pub voiced_fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FramePitch {
    /// Index of the first sample of the frame.
    pub start: usize,
    /// Fractional pitch lag in samples, present when the frame is voiced.
    pub lag: Option<f64>,
    /// Refined normalized autocorrelation at the chosen lag.
    pub strength: f64,
}

#[derive(Debug, Clone)]
pub struct PitchTrack {
    pub frames: Vec<FramePitch>,
    pub frame_len: usize,
    pub hop: usize,
    pub sample_rate_hz: u32,
}

impl PitchTrack {
    pub fn voiced_fraction(&self) -> f64 {
        if self.frames.is_empty() {
            return 0.0;
        }
        let voiced = self.frames.iter().filter(|f| f.lag.is_some()).count();
        voiced as f64 / self.frames.len() as f64
    }

    pub fn f0_hz(&self) -> Option<f64> {
        if self.voiced_fraction() <= MIN_VOICED_FRACTION {
            return None;
        }
        let pitches: Vec<f64> =
            self.frames.iter().filter_map(|f| f.lag.map(|lag| self.sample_rate_hz as f64 / lag)).collect();
        median(&pitches)
    }

    fn center(&self, frame: &FramePitch) -> usize {
        frame.start + self.frame_len / 2
    }
}

fn windowed_sinc(d: f64) -> f64 {
    let width = (INTERP_HALF_WIDTH + 1) as f64;
    if d.abs() >= width {
        return 0.0;
    }
    let sinc = if d == 0.0 { 1.0 } else { (std::f64::consts::PI * d).sin() / (std::f64::consts::PI * d) };
    sinc * 0.5 * (1.0 + (std::f64::consts::PI * d / width).cos())
}

/// Band-limited interpolation of `r` (indexed from `first_lag`) at lag `t`.
fn interpolate(r: &[f64], first_lag: usize, t: f64) -> f64 {
    let centre = t.floor() as isize;
    let mut acc = 0.0;
    for m in (centre - INTERP_HALF_WIDTH)..=(centre + INTERP_HALF_WIDTH + 1) {
        let idx = m - first_lag as isize;
        if idx < 0 || idx as usize >= r.len() {
            continue;
        }
        acc += r[idx as usize] * windowed_sinc(t - m as f64);
    }
    acc
}

/// Golden-section maximization of the interpolated autocorrelation on `[lo, hi]`.
fn refine_peak(r: &[f64], first_lag: usize, lo: f64, hi: f64) -> (f64, f64) {
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let mut fc = interpolate(r, first_lag, c);
    let mut fd = interpolate(r, first_lag, d);
    for _ in 0..40 {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = interpolate(r, first_lag, c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = interpolate(r, first_lag, d);
        }
    }
    let t = 0.5 * (a + b);
    (t, interpolate(r, first_lag, t))
}

/// Voiced pitch candidates of one frame, plus the strongest peak seen.
struct FrameCandidates {
    /// (lag, strength, score) for each peak at or above the voicing threshold.
    voiced: Vec<(f64, f64, f64)>,
    best_strength: f64,
}

fn analyze_frame(frame: &[f64], min_lag: usize, max_lag: usize, rate: f64, fmin: f64) -> FrameCandidates {
    let n = frame.len();
    let mean = frame.iter().sum::<f64>() / n as f64;
    let x: Vec<f64> = frame.iter().map(|v| v - mean).collect();
    let total_energy: f64 = x.iter().map(|v| v * v).sum();
    let mut out = FrameCandidates { voiced: Vec::new(), best_strength: 0.0 };
    if total_energy < 1e-12 {
        return out;
    }
    let pad = INTERP_HALF_WIDTH as usize + 1;
    let first_lag = min_lag.saturating_sub(pad).max(1);
    let last_lag = (max_lag + pad).min(n - 2);
    // prefix[i] = sum of x[..i]^2
    let mut prefix = Vec::with_capacity(n + 1);
    prefix.push(0.0);
    for v in &x {
        prefix.push(prefix.last().unwrap() + v * v);
    }
    let r: Vec<f64> = (first_lag..=last_lag)
        .map(|lag| {
            let c: f64 = x[..n - lag].iter().zip(&x[lag..]).map(|(a, b)| a * b).sum();
            let e1 = prefix[n - lag];
            let e2 = prefix[n] - prefix[lag];
            let denom = (e1 * e2).sqrt();
            if denom > 0.0 {
                c / denom
            } else {
                0.0
            }
        })
        .collect();

    for lag in min_lag.max(first_lag + 1)..=max_lag.min(last_lag - 1) {
        let i = lag - first_lag;
        if !(r[i] > r[i - 1] && r[i] >= r[i + 1]) || r[i] < 0.3 {
            continue;
        }
        let (t, strength) = refine_peak(&r, first_lag, lag as f64 - 1.0, lag as f64 + 1.0);
        let strength = strength.min(1.0);
        out.best_strength = out.best_strength.max(strength);
        if strength >= VOICING_THRESHOLD {
            let score = strength - OCTAVE_COST * (fmin * t / rate).log2();
            out.voiced.push((t, strength, score));
        }
    }
    out.voiced.sort_by(|a, b| b.2.total_cmp(&a.2));
    out.voiced.truncate(MAX_CANDIDATES);
    out
}

/// Picks one candidate (or unvoiced) per frame by dynamic programming,
/// charging for octave jumps and voicing changes between neighbours.
fn viterbi(frames: &[FrameCandidates]) -> Vec<Option<usize>> {
    // State 0 is unvoiced, state k is voiced candidate k - 1.
    let local = |f: &FrameCandidates, state: usize| -> f64 {
        if state == 0 {
            VOICING_THRESHOLD
        } else {
            f.voiced[state - 1].2
        }
    };
    let transition = |a: &FrameCandidates, sa: usize, b: &FrameCandidates, sb: usize| -> f64 {
        match (sa, sb) {
            (0, 0) => 0.0,
            (0, _) | (_, 0) => VOICED_UNVOICED_COST,
            _ => OCTAVE_JUMP_COST * (a.voiced[sa - 1].0 / b.voiced[sb - 1].0).log2().abs(),
        }
    };
    if frames.is_empty() {
        return Vec::new();
    }
    let mut score: Vec<f64> = (0..=frames[0].voiced.len()).map(|s| local(&frames[0], s)).collect();
    let mut back: Vec<Vec<usize>> = vec![vec![0; score.len()]];
    for i in 1..frames.len() {
        let (prev, cur) = (&frames[i - 1], &frames[i]);
        let mut next = Vec::with_capacity(cur.voiced.len() + 1);
        let mut from = Vec::with_capacity(cur.voiced.len() + 1);
        for s in 0..=cur.voiced.len() {
            let (best_p, best_v) = (0..score.len())
                .map(|p| (p, score[p] - transition(prev, p, cur, s)))
                .fold((0, f64::NEG_INFINITY), |acc, c| if c.1 > acc.1 { c } else { acc });
            next.push(best_v + local(cur, s));
            from.push(best_p);
        }
        score = next;
        back.push(from);
    }
    let mut state = (0..score.len()).fold(0, |best, s| if score[s] > score[best] { s } else { best });
    let mut path = vec![None; frames.len()];
    for i in (0..frames.len()).rev() {
        path[i] = (state > 0).then(|| state - 1);
        state = back[i][state];
    }
    path
}

/// Frame-wise pitch analysis (40 ms frames, 10 ms hop).
pub fn analyze_pitch(clip: &AudioClip, fmin_hz: f64, fmax_hz: f64) -> Result<PitchTrack, AcousticsError> {
    let rate = clip.sample_rate_hz as f64;
    if !(fmin_hz >= 20.0 && fmin_hz < fmax_hz && fmax_hz <= rate / 2.0) {
        return Err(AcousticsError::InvalidRange { fmin: fmin_hz, fmax: fmax_hz, rate: clip.sample_rate_hz });
    }
    let frame_len = (FRAME_MS / 1000.0 * rate).round() as usize;
    let hop = (HOP_MS / 1000.0 * rate).round() as usize;
    let min_lag = (rate / fmax_hz).floor().max(2.0) as usize;
    let max_lag = (rate / fmin_hz).ceil() as usize;
    // A frame must hold at least one full lag of overlap beyond the longest period.
    let frame_len = frame_len.max(2 * max_lag + 2 * INTERP_HALF_WIDTH as usize);
    let needed = frame_len.max((3.0 * rate / fmin_hz).ceil() as usize);
    if clip.len() < needed {
        return Err(AcousticsError::TooShort { len: clip.len(), needed });
    }
    let n_frames = (clip.len() - frame_len) / hop + 1;
    let candidates: Vec<FrameCandidates> = (0..n_frames)
        .map(|i| {
            let start = i * hop;
            analyze_frame(&clip.samples[start..start + frame_len], min_lag, max_lag, rate, fmin_hz)
        })
        .collect();
    let path = viterbi(&candidates);
    let frames = candidates
        .iter()
        .zip(path)
        .enumerate()
        .map(|(i, (c, choice))| {
            let (lag, strength) = match choice {
                Some(k) => (Some(c.voiced[k].0), c.voiced[k].1),
                None => (None, c.best_strength),
            };
            FramePitch { start: i * hop, lag, strength }
        })
        .collect();
    Ok(PitchTrack { frames, frame_len, hop, sample_rate_hz: clip.sample_rate_hz })
}

/// Median voiced-frame pitch, or `None` when at most 20 % of frames are voiced.
pub fn estimate_f0(clip: &AudioClip, fmin_hz: f64, fmax_hz: f64) -> Result<Option<f64>, AcousticsError> {
    Ok(analyze_pitch(clip, fmin_hz, fmax_hz)?.f0_hz())
}

/// Divides or multiplies a frame lag by the integer that brings it closest
/// to a reference lag.
fn fold_multiple(lag: f64, reference: f64) -> f64 {
    if reference <= 0.0 || lag <= 0.0 {
        return lag;
    }
    if lag >= reference {
        lag / (lag / reference).round().max(1.0)
    } else {
        lag * (reference / lag).round().max(1.0)
    }
}

/// One mark per glottal period, with the peak amplitude found next to it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PeriodMark {
    pub position: f64,
    pub amplitude: f64,
}

/// Places one mark per period inside each voiced run of the track.
///
/// Returns one mark sequence per unbroken chain of periods.
pub fn period_marks(clip: &AudioClip, track: &PitchTrack) -> Vec<Vec<PeriodMark>> {
    let x = &clip.samples;
    let voiced: Vec<&FramePitch> = track.frames.iter().filter(|f| f.lag.is_some()).collect();
    if voiced.is_empty() {
        return Vec::new();
    }
    // Polarity: follow whichever sign carries the larger excursions.
    let (mut hi, mut lo) = (0.0f64, 0.0f64);
    for f in &voiced {
        for &v in &x[f.start..f.start + track.frame_len] {
            hi = hi.max(v);
            lo = lo.min(v);
        }
    }
    let sign = if hi >= -lo { 1.0 } else { -1.0 };
    let y = |i: usize| sign * x[i];

    // Contiguous voiced runs, as (first frame idx, last frame idx).
    let mut runs = Vec::new();
    let mut run_start: Option<usize> = None;
    for (i, f) in track.frames.iter().enumerate() {
        match (f.lag.is_some(), run_start) {
            (true, None) => run_start = Some(i),
            (false, Some(s)) => {
                runs.push((s, i - 1));
                run_start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = run_start {
        runs.push((s, track.frames.len() - 1));
    }

    let all_lags: Vec<f64> = voiced.iter().filter_map(|f| f.lag).collect();
    let clip_lag = median(&all_lags).unwrap_or(0.0);
    // Median lag of the voiced frames within three hops of the nearest frame;
    // the median rides over isolated octave errors in single frames.
    let local_period = |pos: f64, first: usize, last: usize| -> f64 {
        let nearest = track.frames[first..=last]
            .iter()
            .enumerate()
            .min_by(|a, b| {
                let da = (track.center(a.1) as f64 - pos).abs();
                let db = (track.center(b.1) as f64 - pos).abs();
                da.total_cmp(&db)
            })
            .map(|(i, _)| first + i)
            .unwrap_or(first);
        let lo = nearest.saturating_sub(3).max(first);
        let hi = (nearest + 3).min(last);
        let lags: Vec<f64> =
            track.frames[lo..=hi].iter().filter_map(|f| f.lag).map(|lag| fold_multiple(lag, clip_lag)).collect();
        median(&lags).unwrap_or(0.0)
    };

    let peak_near = |centre: f64, half: f64| -> Option<PeriodMark> {
        let lo = (centre - half).ceil().max(1.0) as usize;
        let hi = ((centre + half).floor() as usize).min(x.len() - 2);
        if lo > hi {
            return None;
        }
        let i = (lo..=hi).fold(lo, |best, i| if y(i) > y(best) { i } else { best });
        let (a, b, c) = (y(i - 1), y(i), y(i + 1));
        let curvature = a - 2.0 * b + c;
        let delta = if curvature < 0.0 { (0.5 * (a - c) / curvature).clamp(-0.5, 0.5) } else { 0.0 };
        Some(PeriodMark { position: i as f64 + delta, amplitude: b - 0.25 * (a - c) * delta })
    };

    let mut out = Vec::new();
    for (first, last) in runs {
        let region_lo = track.center(&track.frames[first]).saturating_sub(track.hop / 2);
        let region_hi = (track.center(&track.frames[last]) + track.hop / 2).min(x.len() - 1);
        let t0 = local_period(region_lo as f64, first, last);
        if t0 <= 0.0 || region_lo as f64 + 2.0 * t0 + 1.0 >= region_hi as f64 {
            continue;
        }
        // A chain starts on the largest peak of one period; every later mark
        // is placed by aligning the previous period's waveform. When a chain
        // loses the periodicity a new one starts a period further on.
        let mut seed_at = region_lo as f64 + 0.5 * t0;
        while seed_at + 1.5 * t0 < region_hi as f64 {
            let seed_period = local_period(seed_at, first, last).max(1.0);
            let Some(mut mark) = peak_near(seed_at, 0.5 * seed_period) else { break };
            let mut marks: Vec<PeriodMark> = Vec::new();
            loop {
                let recent: Vec<f64> = marks.iter().rev().take(5).map(|m| m.amplitude).collect();
                if mark.amplitude <= 0.0
                    || (!recent.is_empty() && mark.amplitude < 0.2 * recent.iter().sum::<f64>() / recent.len() as f64)
                {
                    break;
                }
                marks.push(mark);
                let period = local_period(mark.position, first, last);
                let half = (0.5 * period).round() as usize;
                let centre = mark.position.round() as usize;
                let min_shift = ((1.0 - PEAK_SEARCH) * period).floor() as usize;
                let max_shift = ((1.0 + PEAK_SEARCH) * period).ceil() as usize;
                if centre < half || centre + half + max_shift + 1 > region_hi {
                    break;
                }
                let template = &x[centre - half..=centre + half];
                let template_energy: f64 = template.iter().map(|v| v * v).sum();
                let corr = |shift: usize| -> f64 {
                    let target = &x[centre - half + shift..=centre + half + shift];
                    let (mut c, mut e) = (0.0, 0.0);
                    for (a, b) in template.iter().zip(target) {
                        c += a * b;
                        e += b * b;
                    }
                    let denom = (template_energy * e).sqrt();
                    if denom > 0.0 {
                        c / denom
                    } else {
                        0.0
                    }
                };
                let scores: Vec<f64> = (min_shift - 1..=max_shift + 1).map(corr).collect();
                let (best, best_score) = (1..scores.len() - 1)
                    .map(|i| (i, scores[i]))
                    .fold((1, f64::NEG_INFINITY), |acc, s| if s.1 > acc.1 { s } else { acc });
                if best_score < VOICING_THRESHOLD {
                    break;
                }
                let (a, b, c) = (scores[best - 1], scores[best], scores[best + 1]);
                let curvature = a - 2.0 * b + c;
                let delta = if curvature < 0.0 { (0.5 * (a - c) / curvature).clamp(-0.5, 0.5) } else { 0.0 };
                let shift = (min_shift - 1 + best) as f64 + delta;
                let position = mark.position + shift;
                let Some(peak) = peak_near(position, 0.1 * period) else { break };
                mark = PeriodMark { position, amplitude: peak.amplitude };
            }
            let last_pos = marks.last().map_or(seed_at, |m| m.position);
            seed_at = seed_at.max(last_pos) + local_period(last_pos, first, last).max(1.0);
            if marks.len() >= 2 {
                out.push(marks);
            }
        }
    }
    out
}

/// Mean absolute difference of consecutive values over the mean value (×100),
/// with differences taken only inside each run.
fn perturbation_pct(runs: &[Vec<f64>]) -> Option<f64> {
    let mut diff_sum = 0.0;
    let mut diff_n = 0usize;
    let mut val_sum = 0.0;
    let mut val_n = 0usize;
    for run in runs {
        for w in run.windows(2) {
            diff_sum += (w[1] - w[0]).abs();
            diff_n += 1;
        }
        val_sum += run.iter().sum::<f64>();
        val_n += run.len();
    }
    if diff_n == 0 || val_sum <= 0.0 {
        return None;
    }
    Some(100.0 * (diff_sum / diff_n as f64) / (val_sum / val_n as f64))
}

fn voiced_track(clip: &AudioClip) -> Result<PitchTrack, AcousticsError> {
    let track = analyze_pitch(clip, DEFAULT_FMIN_HZ, DEFAULT_FMAX_HZ)?;
    if track.f0_hz().is_none() {
        return Err(AcousticsError::Unvoiced);
    }
    Ok(track)
}

fn jitter_from(clip: &AudioClip, track: &PitchTrack) -> Option<f64> {
    let periods: Vec<Vec<f64>> = period_marks(clip, track)
        .iter()
        .map(|run| run.windows(2).map(|w| w[1].position - w[0].position).collect())
        .collect();
    perturbation_pct(&periods)
}

fn shimmer_from(clip: &AudioClip, track: &PitchTrack) -> Option<f64> {
    let amplitudes: Vec<Vec<f64>> =
        period_marks(clip, track).iter().map(|run| run.iter().map(|m| m.amplitude).collect()).collect();
    perturbation_pct(&amplitudes)
}

fn hnr_from(track: &PitchTrack) -> Option<f64> {
    let strengths: Vec<f64> = track.frames.iter().filter(|f| f.lag.is_some()).map(|f| f.strength).collect();
    if strengths.is_empty() {
        return None;
    }
    let r = (strengths.iter().sum::<f64>() / strengths.len() as f64).clamp(1e-9, 1.0 - 1e-9);
    Some(10.0 * (r / (1.0 - r)).log10())
}

/// Local jitter in percent.
pub fn measure_jitter(clip: &AudioClip) -> Result<f64, AcousticsError> {
    let track = voiced_track(clip)?;
    jitter_from(clip, &track).ok_or(AcousticsError::Unvoiced)
}

/// Local shimmer in percent.
pub fn measure_shimmer(clip: &AudioClip) -> Result<f64, AcousticsError> {
    let track = voiced_track(clip)?;
    shimmer_from(clip, &track).ok_or(AcousticsError::Unvoiced)
}

/// Autocorrelation harmonics-to-noise ratio in dB.
pub fn measure_hnr(clip: &AudioClip) -> Result<f64, AcousticsError> {
    let track = voiced_track(clip)?;
    hnr_from(&track).ok_or(AcousticsError::Unvoiced)
}

/// Mean normalized autocorrelation peak over voiced frames.
pub fn periodicity(clip: &AudioClip) -> Result<f64, AcousticsError> {
    let track = analyze_pitch(clip, DEFAULT_FMIN_HZ, DEFAULT_FMAX_HZ)?;
    let strengths: Vec<f64> = track.frames.iter().filter(|f| f.lag.is_some()).map(|f| f.strength).collect();
    if strengths.is_empty() {
        return Err(AcousticsError::Unvoiced);
    }
    Ok(strengths.iter().sum::<f64>() / strengths.len() as f64)
}

/// All measures from a single pitch analysis.
pub fn analyze(clip: &AudioClip) -> Result<AcousticMeasurement, AcousticsError> {
    let track = analyze_pitch(clip, DEFAULT_FMIN_HZ, DEFAULT_FMAX_HZ)?;
    let voiced_fraction = track.voiced_fraction();
    let f0_hz = track.f0_hz();
    let (jitter_pct, shimmer_pct, hnr_db) = if f0_hz.is_some() {
        (jitter_from(clip, &track), shimmer_from(clip, &track), hnr_from(&track))
    } else {
        (None, None, None)
    };
    Ok(AcousticMeasurement { f0_hz, jitter_pct, shimmer_pct, hnr_db, voiced_fraction })
}

/// Signal-to-noise ratio of `noisy` against its clean reference, in dB.
pub fn measure_snr(clean: &AudioClip, noisy: &AudioClip) -> Result<f64, AcousticsError> {
    if clean.len() != noisy.len() || clean.sample_rate_hz != noisy.sample_rate_hz {
        return Err(AcousticsError::LengthMismatch(clean.len(), noisy.len()));
    }
    let residual: Vec<f64> = noisy.samples.iter().zip(&clean.samples).map(|(n, c)| n - c).collect();
    let p_noise = power(&residual);
    if p_noise == 0.0 {
        return Ok(SNR_IDENTICAL_DB);
    }
    Ok(10.0 * (power(&clean.samples) / p_noise).log10())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::standard_normal;
    use rand::SeedableRng;
    use std::f64::consts::PI;

    fn tone(freq: f64, seconds: f64, amp: f64) -> Vec<f64> {
        (0..(16_000.0 * seconds) as usize).map(|i| amp * (2.0 * PI * freq * i as f64 / 16_000.0).sin()).collect()
    }

    fn noise(seed: u64, n: usize, sd: f64) -> Vec<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| sd * standard_normal(&mut rng)).collect()
    }

    fn clip(samples: Vec<f64>) -> AudioClip {
        AudioClip::new("c", samples, 16_000).unwrap()
    }

    fn pulse_train(period: usize, n: usize) -> Vec<f64> {
        (0..n).map(|i| if i % period == 0 { 0.8 } else { 0.0 }).collect()
    }

    #[test]
    fn sine_f0() {
        let f0 = estimate_f0(&clip(tone(220.0, 1.0, 0.5)), 60.0, 500.0).unwrap().unwrap();
        assert!((f0 - 220.0).abs() < 1.0, "{f0}");
    }

    #[test]
    fn white_noise_has_no_f0() {
        let c = clip(noise(3, 16_000, 0.2));
        assert_eq!(estimate_f0(&c, 60.0, 500.0).unwrap(), None);
        assert_eq!(measure_jitter(&c), Err(AcousticsError::Unvoiced));
    }

    #[test]
    fn range_and_length_errors() {
        let c = clip(tone(220.0, 1.0, 0.5));
        assert!(matches!(estimate_f0(&c, 10.0, 500.0), Err(AcousticsError::InvalidRange { .. })));
        assert!(matches!(estimate_f0(&c, 300.0, 200.0), Err(AcousticsError::InvalidRange { .. })));
        assert!(matches!(estimate_f0(&c, 60.0, 9_000.0), Err(AcousticsError::InvalidRange { .. })));
        let short = clip(tone(220.0, 0.02, 0.5));
        assert!(matches!(estimate_f0(&short, 60.0, 500.0), Err(AcousticsError::TooShort { .. })));
    }

    #[test]
    fn f0_is_scale_invariant() {
        let a = estimate_f0(&clip(tone(180.0, 1.0, 0.8)), 60.0, 500.0).unwrap().unwrap();
        let b = estimate_f0(&clip(tone(180.0, 1.0, 0.01)), 60.0, 500.0).unwrap().unwrap();
        assert!((a - b).abs() < 1e-6);
    }

    #[test]
    fn periodic_pulse_train_has_no_jitter_or_shimmer() {
        let c = clip(pulse_train(100, 16_000));
        assert!(measure_jitter(&c).unwrap() < 0.1);
        assert!(measure_shimmer(&c).unwrap() < 0.5);
    }

    #[test]
    fn pure_sine_hnr_is_high() {
        let hnr = measure_hnr(&clip(tone(220.0, 1.0, 0.5))).unwrap();
        assert!(hnr > 40.0, "{hnr}");
    }

    #[test]
    fn equal_power_noise_gives_zero_db_hnr() {
        let t = tone(220.0, 1.0, 0.5);
        let sd = (power(&t)).sqrt();
        let mixed: Vec<f64> = t.iter().zip(noise(5, t.len(), sd)).map(|(a, b)| a + b).collect();
        let hnr = measure_hnr(&clip(mixed)).unwrap();
        assert!(hnr.abs() < 1.5, "{hnr}");
    }

    #[test]
    fn hnr_decreases_with_noise() {
        let t = tone(200.0, 1.0, 0.3);
        let sd0 = power(&t).sqrt();
        let base = noise(9, t.len(), 1.0);
        let mut prev = f64::INFINITY;
        for level in [0.05, 0.1, 0.2, 0.4, 0.8] {
            let mixed: Vec<f64> = t.iter().zip(&base).map(|(a, n)| a + level * sd0 * n).collect();
            let hnr = measure_hnr(&clip(mixed)).unwrap();
            assert!(hnr < prev, "{hnr} !< {prev}");
            prev = hnr;
        }
    }

    #[test]
    fn snr_cases() {
        let t = tone(220.0, 0.5, 0.5);
        let c = clip(t.clone());
        assert_eq!(measure_snr(&c, &c).unwrap(), SNR_IDENTICAL_DB);
        // residual equal to the signal itself: 0 dB
        let doubled = clip(t.iter().map(|v| 2.0 * v).collect());
        assert!(measure_snr(&c, &doubled).unwrap().abs() < 1e-9);
        // constructed 20 dB mixture
        let n = noise(4, t.len(), 1.0);
        let scale = (power(&t) / power(&n) / 100.0).sqrt();
        let noisy = clip(t.iter().zip(&n).map(|(a, b)| a + scale * b).collect());
        assert!((measure_snr(&c, &noisy).unwrap() - 20.0).abs() < 0.01);
        let short = clip(t[..100].to_vec());
        assert!(matches!(measure_snr(&c, &short), Err(AcousticsError::LengthMismatch(..))));
    }

    /// Ringing pulses at the given integer positions.
    fn rung_pulses(positions: &[usize], n: usize) -> Vec<f64> {
        let mut out = vec![0.0; n];
        for &p in positions {
            for k in 0..160.min(n - p) {
                let t = k as f64 / 16_000.0;
                out[p + k] += 0.5 * (-t / 0.002).exp() * (2.0 * PI * 400.0 * t).cos();
            }
        }
        out
    }

    #[test]
    fn jitter_matches_constructed_periods_and_survives_time_reversal() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let mut positions = vec![40usize];
        while *positions.last().unwrap() < 15_700 {
            let period = (96 + rand::Rng::random_range(&mut rng, -4i64..=4)) as usize;
            positions.push(positions.last().unwrap() + period);
        }
        positions.pop();
        let periods: Vec<f64> = positions.windows(2).map(|w| (w[1] - w[0]) as f64).collect();
        let expected = perturbation_pct(&[periods]).unwrap();
        let mut samples = rung_pulses(&positions, 16_000);
        let forward = measure_jitter(&clip(samples.clone())).unwrap();
        samples.reverse();
        let backward = measure_jitter(&clip(samples)).unwrap();
        assert!((forward - expected).abs() < 0.1 * expected, "{forward} vs {expected}");
        assert!((forward - backward).abs() / forward < 0.1);
    }
}
