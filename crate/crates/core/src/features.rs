//! Log-mel and MFCC front end plus utterance pooling for the built-in experts.
//!
//! Pipeline per clip: pre-emphasis 0.97, Hann frames (25 ms / 10 ms), power
//! spectrum by radix-2 FFT, HTK-mel triangular filterbank, `ln(x + 1e-10)`,
//! orthonormal DCT-II. `pool_stats` turns a matrix into mean ‖ std.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::AudioClip;
use crate::util::short_hash;

pub const PRE_EMPHASIS: f64 = 0.97;
pub const LOG_FLOOR: f64 = 1e-10;
const CACHE_MAGIC: &[u8; 4] = b"VKFC";
const CACHE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("negative frequency {0} Hz")]
    NegativeFrequency(f64),
    #[error("invalid feature config: {0}")]
    InvalidConfig(String),
    #[error("clip of {len} samples is shorter than one {win}-sample window")]
    ClipTooShort { len: usize, win: usize },
    #[error("pooling needs at least 2 frames, got {0}")]
    TooFewFrames(usize),
    #[error("feature cache {path}: {message}")]
    Cache { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameSpec {
    pub win_ms: f64,
    pub hop_ms: f64,
}

impl Default for FrameSpec {
    fn default() -> Self {
        FrameSpec { win_ms: 25.0, hop_ms: 10.0 }
    }
}

impl FrameSpec {
    /// Window and hop in samples at `rate`.
    pub fn samples(&self, rate: u32) -> Result<(usize, usize), FeatureError> {
        let win = (self.win_ms * rate as f64 / 1000.0).round() as usize;
        let hop = (self.hop_ms * rate as f64 / 1000.0).round() as usize;
        if hop == 0 || win < hop {
            return Err(FeatureError::InvalidConfig(format!("window {win} / hop {hop} samples")));
        }
        Ok((win, hop))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MfccConfig {
    pub n_mels: usize,
    pub n_coeffs: usize,
    pub fmin_hz: f64,
    /// `None` means the Nyquist frequency of the clip.
    pub fmax_hz: Option<f64>,
}

impl Default for MfccConfig {
    fn default() -> Self {
        MfccConfig { n_mels: 64, n_coeffs: 40, fmin_hz: 0.0, fmax_hz: None }
    }
}

impl MfccConfig {
    pub fn validate(&self) -> Result<(), FeatureError> {
        if self.n_mels < 2 {
            return Err(FeatureError::InvalidConfig(format!("n_mels {} < 2", self.n_mels)));
        }
        if self.n_coeffs == 0 || self.n_coeffs > self.n_mels {
            return Err(FeatureError::InvalidConfig(format!(
                "n_coeffs {} must be in 1..={}",
                self.n_coeffs, self.n_mels
            )));
        }
        if self.fmin_hz < 0.0 || self.fmax_hz.is_some_and(|f| f <= self.fmin_hz) {
            return Err(FeatureError::InvalidConfig("frequency range".into()));
        }
        Ok(())
    }
}

/// Everything that determines a pooled feature vector.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub frame: FrameSpec,
    pub mfcc: MfccConfig,
}

impl FeatureConfig {
    pub fn pooled_dim(&self) -> usize {
        2 * self.mfcc.n_coeffs
    }

    /// Stable 16-hex-digit hash of the config (and the fixed front-end constants).
    pub fn hash(&self) -> String {
        let canonical = serde_json::json!({
            "frame": self.frame,
            "mfcc": self.mfcc,
            "pre_emphasis": PRE_EMPHASIS,
            "log_floor": LOG_FLOOR,
            "version": CACHE_VERSION,
        });
        short_hash(canonical.to_string().as_bytes())
    }
}

/// Frames × coefficients, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub n_frames: usize,
    pub n_cols: usize,
    pub data: Vec<f64>,
    pub win_samples: usize,
    pub hop_samples: usize,
    pub sample_rate_hz: u32,
}

impl FeatureMatrix {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_cols..(i + 1) * self.n_cols]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.n_cols.max(1))
    }

    /// Start time of frame `i` in seconds.
    pub fn frame_time_s(&self, i: usize) -> f64 {
        (i * self.hop_samples) as f64 / self.sample_rate_hz as f64
    }
}

pub fn hz_to_mel(f: f64) -> Result<f64, FeatureError> {
    if f < 0.0 || f.is_nan() {
        return Err(FeatureError::NegativeFrequency(f));
    }
    Ok(2595.0 * (1.0 + f / 700.0).log10())
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Iterative radix-2 FFT with precomputed twiddles and bit reversal.
#[derive(Debug, Clone)]
pub struct Fft {
    n: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
    bitrev: Vec<usize>,
}

impl Fft {
    pub fn new(n: usize) -> Self {
        assert!(n.is_power_of_two(), "FFT length {n} is not a power of two");
        let bits = n.trailing_zeros();
        let bitrev = (0..n).map(|i| if bits == 0 { 0 } else { i.reverse_bits() >> (usize::BITS - bits) }).collect();
        let (cos, sin) = (0..n / 2)
            .map(|k| {
                let a = -2.0 * PI * k as f64 / n as f64;
                (a.cos(), a.sin())
            })
            .unzip();
        Fft { n, cos, sin, bitrev }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// In-place forward transform.
    pub fn transform(&self, re: &mut [f64], im: &mut [f64]) {
        let n = self.n;
        assert!(re.len() == n && im.len() == n);
        for i in 0..n {
            let j = self.bitrev[i];
            if i < j {
                re.swap(i, j);
                im.swap(i, j);
            }
        }
        let mut size = 2;
        while size <= n {
            let half = size / 2;
            let step = n / size;
            for start in (0..n).step_by(size) {
                for k in 0..half {
                    let (wr, wi) = (self.cos[k * step], self.sin[k * step]);
                    let (a, b) = (start + k, start + k + half);
                    let tr = re[b] * wr - im[b] * wi;
                    let ti = re[b] * wi + im[b] * wr;
                    re[b] = re[a] - tr;
                    im[b] = im[a] - ti;
                    re[a] += tr;
                    im[a] += ti;
                }
            }
            size *= 2;
        }
    }

    /// `|X_k|²` for `k = 0..=n/2` of a real input (zero-padded to `n`).
    pub fn power_spectrum(&self, frame: &[f64]) -> Vec<f64> {
        let mut re = vec![0.0; self.n];
        re[..frame.len()].copy_from_slice(frame);
        let mut im = vec![0.0; self.n];
        self.transform(&mut re, &mut im);
        (0..=self.n / 2).map(|k| re[k] * re[k] + im[k] * im[k]).collect()
    }
}

/// Triangular filters (rows) over `n_fft / 2 + 1` bins, centres uniform in mel.
pub fn mel_filterbank(cfg: &MfccConfig, n_fft: usize, sample_rate: u32) -> Result<Vec<Vec<f64>>, FeatureError> {
    cfg.validate()?;
    let nyquist = sample_rate as f64 / 2.0;
    let fmax = cfg.fmax_hz.unwrap_or(nyquist).min(nyquist);
    let (m_lo, m_hi) = (hz_to_mel(cfg.fmin_hz)?, hz_to_mel(fmax)?);
    let edges: Vec<f64> =
        (0..cfg.n_mels + 2).map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (cfg.n_mels + 1) as f64)).collect();
    let n_bins = n_fft / 2 + 1;
    let bin_hz = sample_rate as f64 / n_fft as f64;
    let mut bank = Vec::with_capacity(cfg.n_mels);
    for m in 0..cfg.n_mels {
        let (lo, centre, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        let row: Vec<f64> = (0..n_bins)
            .map(|k| {
                let f = k as f64 * bin_hz;
                let up = (f - lo) / (centre - lo);
                let down = (hi - f) / (hi - centre);
                up.min(down).max(0.0)
            })
            .collect();
        if !row.iter().any(|&w| w > 0.0) {
            return Err(FeatureError::InvalidConfig(format!(
                "mel filter {m} ({centre:.1} Hz) covers no FFT bin; use fewer mels or a longer window"
            )));
        }
        bank.push(row);
    }
    Ok(bank)
}

/// Centre frequencies of the filters produced by [`mel_filterbank`].
pub fn mel_centers_hz(cfg: &MfccConfig, sample_rate: u32) -> Result<Vec<f64>, FeatureError> {
    cfg.validate()?;
    let nyquist = sample_rate as f64 / 2.0;
    let fmax = cfg.fmax_hz.unwrap_or(nyquist).min(nyquist);
    let (m_lo, m_hi) = (hz_to_mel(cfg.fmin_hz)?, hz_to_mel(fmax)?);
    Ok((1..=cfg.n_mels).map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (cfg.n_mels + 1) as f64)).collect())
}

pub fn log_mel(clip: &AudioClip, frame: &FrameSpec, cfg: &MfccConfig) -> Result<FeatureMatrix, FeatureError> {
    let (win, hop) = frame.samples(clip.sample_rate_hz)?;
    if clip.len() < win {
        return Err(FeatureError::ClipTooShort { len: clip.len(), win });
    }
    let n_fft = win.next_power_of_two();
    let fft = Fft::new(n_fft);
    let bank = mel_filterbank(cfg, n_fft, clip.sample_rate_hz)?;
    let window: Vec<f64> = (0..win).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / (win - 1) as f64).cos()).collect();
    let x = &clip.samples;
    let emphasized: Vec<f64> = (0..x.len()).map(|i| x[i] - if i > 0 { PRE_EMPHASIS * x[i - 1] } else { 0.0 }).collect();
    let n_frames = (x.len() - win) / hop + 1;
    let mut data = Vec::with_capacity(n_frames * cfg.n_mels);
    let mut buf = vec![0.0; win];
    for f in 0..n_frames {
        let seg = &emphasized[f * hop..f * hop + win];
        for ((b, s), w) in buf.iter_mut().zip(seg).zip(&window) {
            *b = s * w;
        }
        let spec = fft.power_spectrum(&buf);
        for filt in &bank {
            let e: f64 = filt.iter().zip(&spec).map(|(w, p)| w * p).sum();
            data.push((e + LOG_FLOOR).ln());
        }
    }
    Ok(FeatureMatrix {
        n_frames,
        n_cols: cfg.n_mels,
        data,
        win_samples: win,
        hop_samples: hop,
        sample_rate_hz: clip.sample_rate_hz,
    })
}

/// Orthonormal DCT-II of `x`, first `keep` coefficients.
pub fn dct_ii(x: &[f64], keep: usize) -> Vec<f64> {
    let n = x.len() as f64;
    (0..keep.min(x.len()))
        .map(|k| {
            let scale = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
            scale
                * x.iter()
                    .enumerate()
                    .map(|(i, v)| v * (PI * k as f64 * (2 * i + 1) as f64 / (2.0 * n)).cos())
                    .sum::<f64>()
        })
        .collect()
}

pub fn mfcc(clip: &AudioClip, frame: &FrameSpec, cfg: &MfccConfig) -> Result<FeatureMatrix, FeatureError> {
    let mel = log_mel(clip, frame, cfg)?;
    let data = mel.rows().flat_map(|r| dct_ii(r, cfg.n_coeffs)).collect();
    Ok(FeatureMatrix { n_cols: cfg.n_coeffs, data, ..mel })
}

/// Per-column mean followed by per-column population std.
pub fn pool_stats(m: &FeatureMatrix) -> Result<Vec<f64>, FeatureError> {
    if m.n_frames < 2 {
        return Err(FeatureError::TooFewFrames(m.n_frames));
    }
    let n = m.n_frames as f64;
    let mut mean = vec![0.0; m.n_cols];
    for row in m.rows() {
        for (acc, v) in mean.iter_mut().zip(row) {
            *acc += v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= n);
    let mut var = vec![0.0; m.n_cols];
    for row in m.rows() {
        for ((acc, v), mu) in var.iter_mut().zip(row).zip(&mean) {
            *acc += (v - mu) * (v - mu);
        }
    }
    mean.extend(var.into_iter().map(|v| (v / n).sqrt()));
    Ok(mean)
}

/// MFCC + pooling in one call; values are rounded through `f32` so cached
/// and freshly computed vectors are identical.
pub fn pooled_features(clip: &AudioClip, cfg: &FeatureConfig) -> Result<Vec<f64>, FeatureError> {
    let pooled = pool_stats(&mfcc(clip, &cfg.frame, &cfg.mfcc)?)?;
    Ok(pooled.into_iter().map(|v| v as f32 as f64).collect())
}

/// Writes a `rows × cols` grid as `VKFC` | version | rows | cols | hash | f32 LE data.
pub fn write_grid(path: &Path, rows: usize, cols: usize, data: &[f64], config_hash: &str) -> Result<(), FeatureError> {
    let err = |e: std::io::Error| FeatureError::Cache { path: path.display().to_string(), message: e.to_string() };
    assert_eq!(rows * cols, data.len());
    let mut bytes = Vec::with_capacity(32 + data.len() * 4);
    bytes.extend_from_slice(CACHE_MAGIC);
    bytes.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(rows as u32).to_le_bytes());
    bytes.extend_from_slice(&(cols as u32).to_le_bytes());
    let hash = config_hash.as_bytes();
    bytes.extend_from_slice(&(hash.len() as u32).to_le_bytes());
    bytes.extend_from_slice(hash);
    for v in data {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(err)?;
    }
    // Write-then-rename so concurrent readers never see a partial file.
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    fs::File::create(&tmp).and_then(|mut f| f.write_all(&bytes)).map_err(err)?;
    fs::rename(&tmp, path).map_err(err)
}

/// Reads a grid written by [`write_grid`], returning `(rows, cols, data)`.
pub fn read_grid(path: &Path, config_hash: &str) -> Result<(usize, usize, Vec<f64>), FeatureError> {
    let bad = |message: String| FeatureError::Cache { path: path.display().to_string(), message };
    let bytes = fs::read(path).map_err(|e| bad(e.to_string()))?;
    let u32_at = |o: usize| -> Result<u32, FeatureError> {
        bytes
            .get(o..o + 4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .ok_or_else(|| bad("truncated header".into()))
    };
    if bytes.get(..4) != Some(CACHE_MAGIC.as_slice()) {
        return Err(bad("bad magic".into()));
    }
    if u32_at(4)? != CACHE_VERSION {
        return Err(bad("unsupported version".into()));
    }
    let (rows, cols, hlen) = (u32_at(8)? as usize, u32_at(12)? as usize, u32_at(16)? as usize);
    let hash = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header".into()))?;
    if hash != config_hash.as_bytes() {
        return Err(bad("config hash mismatch".into()));
    }
    let body = &bytes[20 + hlen..];
    if body.len() != rows * cols * 4 {
        return Err(bad(format!("expected {} data bytes, found {}", rows * cols * 4, body.len())));
    }
    let data = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
    Ok((rows, cols, data))
}

/// Pooled-vector cache keyed by (clip_id, config hash).
#[derive(Debug, Clone)]
pub struct FeatureCache {
    dir: PathBuf,
}

impl FeatureCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        FeatureCache { dir: dir.into() }
    }

    pub fn path_for(&self, clip_id: &str, config_hash: &str) -> PathBuf {
        self.dir.join(config_hash).join(format!("{clip_id}.vkfc"))
    }

    pub fn get_or_compute<E: From<FeatureError>>(
        &self,
        clip_id: &str,
        cfg: &FeatureConfig,
        compute: impl FnOnce() -> Result<Vec<f64>, E>,
    ) -> Result<Vec<f64>, E> {
        let hash = cfg.hash();
        let path = self.path_for(clip_id, &hash);
        if let Ok((1, cols, data)) = read_grid(&path, &hash) {
            if cols == cfg.pooled_dim() {
                return Ok(data);
            }
        }
        let v: Vec<f64> = compute()?.into_iter().map(|x| x as f32 as f64).collect();
        write_grid(&path, 1, v.len(), &v, &hash)?;
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, amp: f64, n: usize) -> AudioClip {
        let s = (0..n).map(|i| amp * (2.0 * PI * freq * i as f64 / 16_000.0).sin()).collect();
        AudioClip::new("t", s, 16_000).unwrap()
    }

    #[test]
    fn mel_scale_values() {
        assert_eq!(hz_to_mel(0.0).unwrap(), 0.0);
        assert!((hz_to_mel(700.0).unwrap() - 2595.0 * 2f64.log10()).abs() < 1e-9);
        // 2595·log10(3) = 1238.13
        assert!((hz_to_mel(1400.0).unwrap() - 2595.0 * 3f64.log10()).abs() < 1e-9);
        assert!((hz_to_mel(1400.0).unwrap() - 1238.13).abs() < 0.01);
        assert!(matches!(hz_to_mel(-1.0), Err(FeatureError::NegativeFrequency(_))));
        assert!((mel_to_hz(hz_to_mel(1234.5).unwrap()) - 1234.5).abs() < 1e-9);
    }

    fn dft(re: &[f64]) -> Vec<(f64, f64)> {
        let n = re.len();
        (0..n)
            .map(|k| {
                re.iter().enumerate().fold((0.0, 0.0), |(a, b), (t, x)| {
                    let ang = -2.0 * PI * (k * t) as f64 / n as f64;
                    (a + x * ang.cos(), b + x * ang.sin())
                })
            })
            .collect()
    }

    #[test]
    fn fft_matches_direct_dft() {
        for n in [1usize, 2, 4, 8, 16, 32, 64] {
            let x: Vec<f64> = (0..n).map(|i| ((i * 37 + 11) % 17) as f64 - 8.0).collect();
            let mut re = x.clone();
            let mut im = vec![0.0; n];
            Fft::new(n).transform(&mut re, &mut im);
            for (k, (dr, di)) in dft(&x).into_iter().enumerate() {
                assert!((re[k] - dr).abs() < 1e-9 && (im[k] - di).abs() < 1e-9, "n={n} k={k}");
            }
        }
    }

    #[test]
    fn filterbank_shape() {
        let cfg = MfccConfig::default();
        let bank = mel_filterbank(&cfg, 512, 16_000).unwrap();
        assert_eq!(bank.len(), 64);
        for row in &bank {
            assert_eq!(row.len(), 257);
            assert!(row.iter().all(|&w| w >= 0.0));
            assert!(row.iter().any(|&w| w > 0.0));
        }
        // Adjacent filters overlap.
        for pair in bank.windows(2) {
            assert!(pair[0].iter().zip(&pair[1]).any(|(a, b)| *a > 0.0 && *b > 0.0));
        }
        let centres = mel_centers_hz(&cfg, 16_000).unwrap();
        assert!(centres.windows(2).all(|w| w[0] < w[1]));
        let too_many = MfccConfig { n_mels: 400, n_coeffs: 40, ..cfg };
        assert!(matches!(mel_filterbank(&too_many, 512, 16_000), Err(FeatureError::InvalidConfig(_))));
    }

    #[test]
    fn tone_peaks_at_nearest_filter() {
        let cfg = MfccConfig::default();
        let m = log_mel(&tone(1000.0, 0.5, 16_000), &FrameSpec::default(), &cfg).unwrap();
        let row = m.row(m.n_frames / 2);
        let argmax = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
        let centres = mel_centers_hz(&cfg, 16_000).unwrap();
        let nearest = (0..centres.len())
            .min_by(|&a, &b| (centres[a] - 1000.0).abs().total_cmp(&(centres[b] - 1000.0).abs()))
            .unwrap();
        assert_eq!(argmax, nearest);
    }

    #[test]
    fn framing_silence_and_scaling() {
        let cfg = MfccConfig::default();
        let frame = FrameSpec::default();
        let silent = AudioClip::new("s", vec![0.0; 16_000], 16_000).unwrap();
        let m = log_mel(&silent, &frame, &cfg).unwrap();
        assert_eq!(m.n_frames, 98);
        assert!(m.data.iter().all(|&v| v == LOG_FLOOR.ln()));

        // Broadband input keeps every band far above the floor.
        let noise: Vec<f64> =
            (0..8000u64).map(|i| (crate::util::hash64(&i.to_le_bytes()) % 2001) as f64 / 1000.0 - 1.0).collect();
        let quiet = AudioClip::new("a", noise.iter().map(|v| 0.45 * v).collect(), 16_000).unwrap();
        let loud = AudioClip::new("b", noise.iter().map(|v| 0.9 * v).collect(), 16_000).unwrap();
        let a = log_mel(&quiet, &frame, &cfg).unwrap();
        let b = log_mel(&loud, &frame, &cfg).unwrap();
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((y - x - 4f64.ln()).abs() < 1e-6, "{x} {y}");
        }
        let short = AudioClip::new("x", vec![0.0; 100], 16_000).unwrap();
        assert!(matches!(log_mel(&short, &frame, &cfg), Err(FeatureError::ClipTooShort { .. })));
    }

    #[test]
    fn dct_properties() {
        let c = dct_ii(&[3.0; 64], 64);
        assert!((c[0] - 3.0 * 8.0).abs() < 1e-9);
        assert!(c[1..].iter().all(|v| v.abs() < 1e-9));
        let x: Vec<f64> = (0..64).map(|i| ((i * 13) % 7) as f64 - 2.5).collect();
        let full = dct_ii(&x, 64);
        let e1: f64 = x.iter().map(|v| v * v).sum();
        let e2: f64 = full.iter().map(|v| v * v).sum();
        assert!((e1 - e2).abs() < 1e-6);
    }

    #[test]
    fn mfcc_width_and_pooling() {
        let clip = tone(300.0, 0.3, 16_000);
        let m = mfcc(&clip, &FrameSpec::default(), &MfccConfig::default()).unwrap();
        assert_eq!(m.n_cols, 40);
        let pooled = pool_stats(&m).unwrap();
        assert_eq!(pooled.len(), 80);
        let two = FeatureMatrix {
            n_frames: 2,
            n_cols: 1,
            data: vec![0.0, 2.0],
            win_samples: 1,
            hop_samples: 1,
            sample_rate_hz: 16_000,
        };
        assert_eq!(pool_stats(&two).unwrap(), vec![1.0, 1.0]);
        let constant = FeatureMatrix { data: vec![5.0, 5.0], ..two.clone() };
        assert_eq!(pool_stats(&constant).unwrap(), vec![5.0, 0.0]);
        let one = FeatureMatrix { n_frames: 1, data: vec![1.0], ..two };
        assert!(matches!(pool_stats(&one), Err(FeatureError::TooFewFrames(1))));
    }

    #[test]
    fn cache_round_trip_and_hash_check() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = FeatureConfig::default();
        let cache = FeatureCache::new(dir.path());
        let clip = tone(200.0, 0.3, 8000);
        let first = cache.get_or_compute::<FeatureError>("c1", &cfg, || pooled_features(&clip, &cfg)).unwrap();
        let second = cache.get_or_compute::<FeatureError>("c1", &cfg, || panic!("should hit the cache")).unwrap();
        assert_eq!(first, second);
        assert_eq!(first, pooled_features(&clip, &cfg).unwrap());
        let path = cache.path_for("c1", &cfg.hash());
        assert!(matches!(read_grid(&path, "other"), Err(FeatureError::Cache { .. })));
        let other = FeatureConfig { mfcc: MfccConfig { n_coeffs: 20, ..cfg.mfcc }, ..cfg };
        assert_ne!(other.hash(), cfg.hash());
    }
}
