use std::f64::consts::PI;
use std::sync::OnceLock;

use super::{is_supported_rate, AudioClip, AudioError};

/// Sinc zero-crossings on each side of the kernel centre, measured at the
/// lower of the two rates (64 taps per phase).
const HALF_ZERO_CROSSINGS: usize = 32;
/// Table points per zero-crossing; kernel values are linearly interpolated.
const TABLE_RESOLUTION: usize = 512;
const KAISER_BETA: f64 = 8.0;
/// Cutoff as a fraction of the lower Nyquist frequency.
const ROLLOFF: f64 = 0.95;

/// Zeroth-order modified Bessel function of the first kind (power series).
fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let half = x / 2.0;
    for k in 1..64 {
        term *= (half / k as f64) * (half / k as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

/// Windowed sinc sampled on `u ∈ [0, HALF_ZERO_CROSSINGS]` (zero-crossing units).
fn kernel_table() -> &'static [f64] {
    static TABLE: OnceLock<Vec<f64>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let n = HALF_ZERO_CROSSINGS * TABLE_RESOLUTION;
        let norm = bessel_i0(KAISER_BETA);
        (0..=n + 1)
            .map(|i| {
                let u = i as f64 / TABLE_RESOLUTION as f64;
                if u >= HALF_ZERO_CROSSINGS as f64 {
                    return 0.0;
                }
                let sinc = if u == 0.0 { 1.0 } else { (PI * u).sin() / (PI * u) };
                let r = u / HALF_ZERO_CROSSINGS as f64;
                let window = bessel_i0(KAISER_BETA * (1.0 - r * r).sqrt()) / norm;
                sinc * window
            })
            .collect()
    })
}

fn kernel(u: f64) -> f64 {
    let table = kernel_table();
    let pos = u.abs() * TABLE_RESOLUTION as f64;
    let idx = pos as usize;
    if idx + 1 >= table.len() {
        return 0.0;
    }
    let frac = pos - idx as f64;
    table[idx] * (1.0 - frac) + table[idx + 1] * frac
}

/// Resamples by an arbitrary ratio (output samples per input sample).
///
/// Output length is `round(len · ratio)`; the signal is zero outside its
/// support. The time of output sample `j` in input-sample units is given by
/// `position(j)`, which lets rational rate pairs avoid accumulated drift.
fn resample_with(samples: &[f64], ratio: f64, position: impl Fn(usize) -> f64) -> Vec<f64> {
    let out_len = (samples.len() as f64 * ratio).round() as usize;
    // Kernel bandwidth in cycles per input sample, doubled.
    let two_fc = ROLLOFF * ratio.min(1.0);
    let half_width = HALF_ZERO_CROSSINGS as f64 / two_fc;
    let n = samples.len() as isize;
    (0..out_len)
        .map(|j| {
            let t = position(j);
            let lo = ((t - half_width).ceil() as isize).max(0);
            let hi = ((t + half_width).floor() as isize).min(n - 1);
            let mut acc = 0.0;
            for k in lo..=hi {
                acc += samples[k as usize] * kernel((t - k as f64) * two_fc);
            }
            acc * two_fc
        })
        .collect()
}

/// Rational resampling by `up / down` (in lowest terms). The fractional
/// kernel offsets repeat every `up` outputs, so the taps are computed once
/// per phase.
fn resample_rational(samples: &[f64], up: u64, down: u64) -> Vec<f64> {
    let ratio = up as f64 / down as f64;
    let out_len = (samples.len() as f64 * ratio).round() as usize;
    let two_fc = ROLLOFF * ratio.min(1.0);
    let half_width = HALF_ZERO_CROSSINGS as f64 / two_fc;
    let phases: Vec<(isize, Vec<f64>)> = (0..up)
        .map(|p| {
            let t = (p * down) as f64 / up as f64;
            let lo = (t - half_width).ceil() as isize;
            let hi = (t + half_width).floor() as isize;
            let taps = (lo..=hi).map(|k| kernel((t - k as f64) * two_fc) * two_fc).collect();
            (lo, taps)
        })
        .collect();
    let n = samples.len() as isize;
    (0..out_len)
        .map(|j| {
            let (cycle, phase) = (j as u64 / up, j as u64 % up);
            let base = (cycle * down) as isize;
            let (lo, taps) = &phases[phase as usize];
            let start = base + lo;
            let skip = (-start).max(0) as usize;
            let end = (start + taps.len() as isize).min(n);
            if end <= start + skip as isize {
                return 0.0;
            }
            let first = (start + skip as isize) as usize;
            samples[first..end as usize].iter().zip(&taps[skip..]).map(|(s, t)| s * t).sum()
        })
        .collect()
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Resamples raw samples between any two positive rates.
pub fn resample_samples(samples: &[f64], source_hz: u32, target_hz: u32) -> Vec<f64> {
    if source_hz == target_hz {
        return samples.to_vec();
    }
    let g = gcd(source_hz as u64, target_hz as u64);
    let (up, down) = (target_hz as u64 / g, source_hz as u64 / g);
    if up <= 4096 {
        return resample_rational(samples, up, down);
    }
    let ratio = target_hz as f64 / source_hz as f64;
    resample_with(samples, ratio, |j| (j as u64 * down) as f64 / up as f64)
}

/// Resamples raw samples by an arbitrary positive ratio.
pub fn resample_ratio(samples: &[f64], ratio: f64) -> Vec<f64> {
    if ratio == 1.0 {
        return samples.to_vec();
    }
    let inverse = 1.0 / ratio;
    if inverse.fract() == 0.0 && inverse <= 64.0 {
        return resample_rational(samples, 1, inverse as u64);
    }
    resample_with(samples, ratio, |j| j as f64 / ratio)
}

/// Band-limited conversion of a clip to one of the supported rates.
pub fn resample(clip: &AudioClip, target_rate_hz: u32) -> Result<AudioClip, AudioError> {
    if !is_supported_rate(target_rate_hz) {
        return Err(AudioError::UnsupportedRate(target_rate_hz));
    }
    if clip.sample_rate_hz == target_rate_hz {
        return Ok(clip.clone());
    }
    let samples = resample_samples(&clip.samples, clip.sample_rate_hz, target_rate_hz);
    AudioClip::new(clip.clip_id.clone(), samples, target_rate_hz)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, rate: u32, seconds: f64) -> AudioClip {
        let n = (rate as f64 * seconds) as usize;
        let samples = (0..n).map(|i| 0.5 * (2.0 * PI * freq * i as f64 / rate as f64).sin()).collect();
        AudioClip::new("tone", samples, rate).unwrap()
    }

    fn rms(x: &[f64]) -> f64 {
        crate::util::power(x).sqrt()
    }

    #[test]
    fn identity_rate_is_unchanged() {
        let clip = tone(440.0, 16_000, 0.1);
        assert_eq!(resample(&clip, 16_000).unwrap(), clip);
    }

    #[test]
    fn output_length_follows_ratio() {
        let clip = tone(440.0, 16_000, 1.0);
        assert_eq!(resample(&clip, 8_000).unwrap().len(), 8_000);
        assert_eq!(resample(&clip, 44_100).unwrap().len(), 44_100);
        let clip = tone(440.0, 44_100, 1.0);
        assert_eq!(resample(&clip, 16_000).unwrap().len(), 16_000);
    }

    #[test]
    fn unsupported_target_rejected() {
        let clip = tone(440.0, 16_000, 0.1);
        assert!(matches!(resample(&clip, 12_345), Err(AudioError::UnsupportedRate(12_345))));
    }

    #[test]
    fn interior_matches_analytic_tone() {
        // 44.1k -> 16k of a 440 Hz tone should reproduce the analytic tone
        // away from the edges.
        let clip = tone(440.0, 44_100, 0.5);
        let out = resample(&clip, 16_000).unwrap();
        let expected = tone(440.0, 16_000, 0.5);
        let err = out.samples[400..7600]
            .iter()
            .zip(&expected.samples[400..7600])
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-3, "max interior error {err}");
    }

    #[test]
    fn round_trip_preserves_rms() {
        let clip = tone(440.0, 16_000, 1.0);
        let there = resample(&clip, 44_100).unwrap();
        let back = resample(&there, 16_000).unwrap();
        assert_eq!(back.len(), clip.len());
        let a = rms(&clip.samples[800..15_200]);
        let b = rms(&back.samples[800..15_200]);
        assert!((a - b).abs() / a < 0.05);
    }

    #[test]
    fn downsampling_rejects_above_nyquist() {
        // 7 kHz is above the 4 kHz Nyquist of 8 kHz output.
        let clip = tone(7_000.0, 16_000, 0.5);
        let out = resample(&clip, 8_000).unwrap();
        assert!(rms(&out.samples[400..3600]) < 0.01);
    }

    #[test]
    fn phase_table_matches_direct_evaluation() {
        let clip = tone(330.0, 22_050, 0.2);
        let fast = resample_samples(&clip.samples, 22_050, 16_000);
        let ratio = 16_000.0 / 22_050.0;
        let direct = resample_with(&clip.samples, ratio, |j| (j as u64 * 441) as f64 / 320.0);
        assert_eq!(fast.len(), direct.len());
        for (a, b) in fast.iter().zip(&direct) {
            assert!((a - b).abs() < 1e-12);
        }
        let x: Vec<f64> = (0..800).map(|i| (i as f64 * 0.05).sin()).collect();
        let fast = resample_ratio(&x, 0.125);
        let direct = resample_with(&x, 0.125, |j| j as f64 * 8.0);
        for (a, b) in fast.iter().zip(&direct) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn deterministic() {
        let clip = tone(330.0, 22_050, 0.2);
        let a = resample(&clip, 48_000).unwrap();
        let b = resample(&clip, 48_000).unwrap();
        assert_eq!(a.samples, b.samples);
    }
}
