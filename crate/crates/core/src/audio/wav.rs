use std::fs;
use std::path::Path;

use super::{is_supported_rate, AudioClip, AudioError};

const FORMAT_PCM: u16 = 1;
const FORMAT_FLOAT: u16 = 3;
const FORMAT_EXTENSIBLE: u16 = 0xFFFE;

struct Format {
    code: u16,
    channels: u16,
    sample_rate: u32,
    block_align: u16,
    bits: u16,
}

fn read_u16(bytes: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([bytes[at], bytes[at + 1]])
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

fn parse_fmt(body: &[u8]) -> Result<Format, AudioError> {
    if body.len() < 16 {
        return Err(AudioError::MalformedHeader("fmt chunk shorter than 16 bytes".into()));
    }
    let mut code = read_u16(body, 0);
    if code == FORMAT_EXTENSIBLE {
        // WAVE_FORMAT_EXTENSIBLE: the sub-format GUID starts with the real code.
        if body.len() < 26 {
            return Err(AudioError::MalformedHeader("truncated extensible fmt chunk".into()));
        }
        code = read_u16(body, 24);
    }
    Ok(Format {
        code,
        channels: read_u16(body, 2),
        sample_rate: read_u32(body, 4),
        block_align: read_u16(body, 12),
        bits: read_u16(body, 14),
    })
}

/// Decodes an in-memory RIFF/WAVE file into a mono clip.
///
/// Accepts 16-bit PCM and 32-bit IEEE float, mono or stereo. Stereo is
/// averaged channel-wise.
pub fn decode_wav(clip_id: &str, bytes: &[u8]) -> Result<AudioClip, AudioError> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(AudioError::MalformedHeader("missing RIFF/WAVE signature".into()));
    }
    let mut format: Option<Format> = None;
    let mut data: Option<&[u8]> = None;
    let mut pos = 12;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = read_u32(bytes, pos + 4) as usize;
        let start = pos + 8;
        // Some writers leave a streaming placeholder size on the data chunk.
        let end = start.saturating_add(size).min(bytes.len());
        let body = &bytes[start..end];
        match id {
            b"fmt " => format = Some(parse_fmt(body)?),
            b"data" => data = Some(body),
            _ => {}
        }
        pos = start.saturating_add(size).saturating_add(size & 1);
    }
    let format = format.ok_or_else(|| AudioError::MalformedHeader("no fmt chunk".into()))?;
    let data = data.ok_or_else(|| AudioError::MalformedHeader("no data chunk".into()))?;

    let sample_bytes = match (format.code, format.bits) {
        (FORMAT_PCM, 16) => 2,
        (FORMAT_FLOAT, 32) => 4,
        (code, bits) => {
            return Err(AudioError::UnsupportedEncoding(format!("format code {code} with {bits} bits per sample")))
        }
    };
    if !(1..=2).contains(&format.channels) {
        return Err(AudioError::UnsupportedEncoding(format!("{} channels", format.channels)));
    }
    let channels = format.channels as usize;
    let frame_bytes = (format.block_align as usize).max(sample_bytes * channels);
    if frame_bytes < sample_bytes * channels {
        return Err(AudioError::MalformedHeader("block align smaller than a frame".into()));
    }
    if !is_supported_rate(format.sample_rate) {
        return Err(AudioError::UnsupportedRate(format.sample_rate));
    }
    let n_frames = data.len() / frame_bytes;
    if n_frames == 0 {
        return Err(AudioError::EmptyAudio);
    }

    let decode = |at: usize| -> f64 {
        if sample_bytes == 2 {
            i16::from_le_bytes([data[at], data[at + 1]]) as f64 / 32768.0
        } else {
            f32::from_le_bytes([data[at], data[at + 1], data[at + 2], data[at + 3]]) as f64
        }
    };
    let samples = (0..n_frames)
        .map(|frame| {
            let base = frame * frame_bytes;
            let sum: f64 = (0..channels).map(|c| decode(base + c * sample_bytes)).sum();
            sum / channels as f64
        })
        .collect();
    AudioClip::new(clip_id, samples, format.sample_rate)
}

/// Encodes a clip as 16-bit PCM mono little-endian RIFF/WAVE.
pub fn encode_wav(clip: &AudioClip) -> Vec<u8> {
    let data_len = clip.samples.len() * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&FORMAT_PCM.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&clip.sample_rate_hz.to_le_bytes());
    out.extend_from_slice(&(clip.sample_rate_hz * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in &clip.samples {
        let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    out
}

/// Loads a WAV file; the clip id is the file stem.
pub fn load_wav(path: &Path) -> Result<AudioClip, AudioError> {
    let bytes = fs::read(path).map_err(|source| AudioError::IoFailure { path: path.display().to_string(), source })?;
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    decode_wav(&id, &bytes)
}

pub fn save_wav(clip: &AudioClip, path: &Path) -> Result<(), AudioError> {
    let io = |source| AudioError::IoFailure { path: path.display().to_string(), source };
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(io)?;
        }
    }
    fs::write(path, encode_wav(clip)).map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use std::f64::consts::PI;

    fn wav_bytes(code: u16, channels: u16, rate: u32, bits: u16, data: &[u8]) -> Vec<u8> {
        let block = channels * bits / 8;
        let mut out = Vec::new();
        out.extend_from_slice(b"RIFF");
        out.extend_from_slice(&((36 + data.len()) as u32).to_le_bytes());
        out.extend_from_slice(b"WAVE");
        out.extend_from_slice(b"fmt ");
        out.extend_from_slice(&16u32.to_le_bytes());
        out.extend_from_slice(&code.to_le_bytes());
        out.extend_from_slice(&channels.to_le_bytes());
        out.extend_from_slice(&rate.to_le_bytes());
        out.extend_from_slice(&(rate * block as u32).to_le_bytes());
        out.extend_from_slice(&block.to_le_bytes());
        out.extend_from_slice(&bits.to_le_bytes());
        out.extend_from_slice(b"data");
        out.extend_from_slice(&(data.len() as u32).to_le_bytes());
        out.extend_from_slice(data);
        out
    }

    fn sine(freq: f64, rate: u32, n: usize, amp: f64) -> Vec<f64> {
        (0..n).map(|i| amp * (2.0 * PI * freq * i as f64 / rate as f64).sin()).collect()
    }

    #[test]
    fn sine_fixture_loads_with_expected_length() {
        let pcm: Vec<u8> = sine(440.0, 16_000, 16_000, 0.8)
            .iter()
            .flat_map(|s| ((s * 32767.0).round() as i16).to_le_bytes())
            .collect();
        let clip = decode_wav("tone", &wav_bytes(1, 1, 16_000, 16, &pcm)).unwrap();
        assert_eq!(clip.len(), 16_000);
        assert_eq!(clip.sample_rate_hz, 16_000);
    }

    #[test]
    fn silence_loads_as_zeros() {
        let clip = decode_wav("z", &wav_bytes(1, 1, 16_000, 16, &[0u8; 200])).unwrap();
        assert_eq!(clip.samples, vec![0.0; 100]);
    }

    #[test]
    fn opposite_stereo_channels_average_to_zero() {
        let mut data = Vec::new();
        for _ in 0..50 {
            data.extend_from_slice(&0.5f32.to_le_bytes());
            data.extend_from_slice(&(-0.5f32).to_le_bytes());
        }
        let clip = decode_wav("s", &wav_bytes(3, 2, 16_000, 32, &data)).unwrap();
        assert_eq!(clip.samples, vec![0.0; 50]);
    }

    #[test]
    fn header_errors() {
        assert!(matches!(decode_wav("x", b"RIFX\0\0\0\0WAVE"), Err(AudioError::MalformedHeader(_))));
        // format code 85 is MPEG layer 3
        let mp3 = wav_bytes(85, 1, 16_000, 16, &[0u8; 8]);
        assert!(matches!(decode_wav("x", &mp3), Err(AudioError::UnsupportedEncoding(_))));
        let empty = wav_bytes(1, 1, 16_000, 16, &[]);
        assert!(matches!(decode_wav("x", &empty), Err(AudioError::EmptyAudio)));
        let odd_rate = wav_bytes(1, 1, 11_025, 16, &[0u8; 8]);
        assert!(matches!(decode_wav("x", &odd_rate), Err(AudioError::UnsupportedRate(11_025))));
    }

    #[test]
    fn skips_unknown_chunks() {
        let mut bytes = wav_bytes(1, 1, 16_000, 16, &[0u8; 4]);
        // splice an odd-sized LIST chunk (with pad byte) before "fmt "
        let list = [b"LIST".as_slice(), &3u32.to_le_bytes(), &[1, 2, 3, 0]].concat();
        bytes.splice(12..12, list);
        let clip = decode_wav("x", &bytes).unwrap();
        assert_eq!(clip.len(), 2);
    }

    #[test]
    fn round_trip_within_one_quantization_step() {
        let bound = 2f64.powi(-15);
        let tone = AudioClip::new("t", sine(440.0, 16_000, 16_000, 0.9), 16_000).unwrap();
        let mut rng = crate::util::rng_from(7, &["noise"]);
        let noise: Vec<f64> = (0..16_000).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let noise = AudioClip::new("n", noise, 16_000).unwrap();
        let silence = AudioClip::new("z", vec![0.0; 100], 16_000).unwrap();
        for clip in [tone, noise] {
            let back = decode_wav("r", &encode_wav(&clip)).unwrap();
            let max_diff = clip.samples.iter().zip(&back.samples).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(max_diff <= bound, "max diff {max_diff}");
        }
        let back = decode_wav("r", &encode_wav(&silence)).unwrap();
        assert_eq!(back.samples, silence.samples);
    }

    #[test]
    fn save_and_load_through_filesystem() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/clip.wav");
        let clip = AudioClip::new("clip", vec![0.25, -0.25, 0.0], 8_000).unwrap();
        save_wav(&clip, &path).unwrap();
        let back = load_wav(&path).unwrap();
        assert_eq!(back.clip_id, "clip");
        assert_eq!(back.samples, clip.samples);
        assert!(matches!(load_wav(&dir.path().join("missing.wav")), Err(AudioError::IoFailure { .. })));
    }
}
