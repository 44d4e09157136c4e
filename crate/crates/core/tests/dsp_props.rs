use std::f64::consts::PI;

use proptest::prelude::*;
use rayon::prelude::*;

use voicekit::acoustics::{estimate_f0, measure_hnr, measure_jitter, measure_shimmer};
use voicekit::audio::{load_wav, resample, save_wav, AudioClip};
use voicekit::augment::{add_noise, apply_policy, pitch_shift, time_stretch, AugmentPolicy, NoiseSource};
use voicekit::corpus::{ClipRecord, Label, Origin, RecordingType, Vowel};
use voicekit::features::{hz_to_mel, log_mel, mfcc, FrameSpec, MfccConfig};
use voicekit::synthgen::{synthesize_vowel, VoiceProfile};
use voicekit::util::{rng_from, standard_normal};

const RATE: u32 = 16_000;

fn harmonic(freq: f64, seconds: f64, rate: u32, amp: f64) -> AudioClip {
    let n = (seconds * rate as f64) as usize;
    let s = (0..n)
        .map(|i| {
            let t = i as f64 / rate as f64;
            amp * (0.6 * (2.0 * PI * freq * t).sin()
                + 0.3 * (4.0 * PI * freq * t).sin()
                + 0.1 * (6.0 * PI * freq * t).sin())
        })
        .collect();
    AudioClip::new("h", s, rate).unwrap()
}

fn rms(s: &[f64]) -> f64 {
    (s.iter().map(|v| v * v).sum::<f64>() / s.len() as f64).sqrt()
}

fn record(clip: &str) -> ClipRecord {
    ClipRecord {
        clip_id: clip.into(),
        path: format!("{clip}.wav"),
        dataset_id: "t".into(),
        speaker_id: "spk".into(),
        session_id: "spk-s1".into(),
        recording_type: RecordingType::Sentence,
        vowel_label: None,
        label: Label::Healthy,
        pathology_class: None,
        origin: Origin::Real,
        language: "en".into(),
        parent_clip_id: None,
        conditioned_on: Vec::new(),
        provenance: None,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn wav_round_trip_within_one_step(samples in prop::collection::vec(-1.0f64..=1.0, 1..2000)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.wav");
        let clip = AudioClip::new("x", samples, RATE).unwrap();
        save_wav(&clip, &path).unwrap();
        let back = load_wav(&path).unwrap();
        prop_assert_eq!(back.len(), clip.len());
        for (a, b) in clip.samples.iter().zip(&back.samples) {
            prop_assert!((a - b).abs() <= 1.0 / 32768.0, "{a} vs {b}");
        }
    }

    #[test]
    fn resampling_there_and_back_keeps_tone(freq in 90.0f64..450.0, via in prop::sample::select(vec![8_000u32, 22_050, 44_100, 48_000])) {
        let clip = harmonic(freq, 1.0, RATE, 0.5);
        let there = resample(&clip, via).unwrap();
        let back = resample(&there, RATE).unwrap();
        prop_assert_eq!(resample(&there, RATE).unwrap(), back.clone());
        let f0 = |c: &AudioClip| estimate_f0(c, 60.0, 500.0).unwrap().unwrap();
        prop_assert!((f0(&back) - f0(&clip)).abs() < 1.0);
        let n = clip.len().min(back.len());
        let (a, b) = (rms(&clip.samples[..n]), rms(&back.samples[..n]));
        prop_assert!((a / b - 1.0).abs() < 0.05, "rms {a} vs {b}");
    }

    #[test]
    fn f0_ignores_amplitude(freq in 70.0f64..450.0, scale in 0.01f64..1.0) {
        let a = harmonic(freq, 0.8, RATE, 0.9);
        let b = harmonic(freq, 0.8, RATE, 0.9 * scale);
        let fa = estimate_f0(&a, 60.0, 500.0).unwrap().unwrap();
        let fb = estimate_f0(&b, 60.0, 500.0).unwrap().unwrap();
        prop_assert!((fa - fb).abs() < 1e-6 * fa, "{fa} vs {fb}");
    }

    #[test]
    fn pitch_shift_then_back_restores_f0(freq in 100.0f64..300.0, st in -4.0f64..4.0) {
        let clip = harmonic(freq, 1.0, RATE, 0.5);
        let round = pitch_shift(&pitch_shift(&clip, st).unwrap(), -st).unwrap();
        let f = estimate_f0(&round, 60.0, 500.0).unwrap().unwrap();
        prop_assert!((f / freq - 1.0).abs() <= 0.03, "{f} vs {freq}");
        prop_assert!((round.len() as f64 / clip.len() as f64 - 1.0).abs() <= 0.02);
    }

    #[test]
    fn stretch_then_inverse_restores_duration(freq in 100.0f64..300.0, f in 0.8f64..1.25) {
        let clip = harmonic(freq, 1.0, RATE, 0.5);
        let round = time_stretch(&time_stretch(&clip, f).unwrap(), 1.0 / f).unwrap();
        prop_assert!((round.len() as f64 / clip.len() as f64 - 1.0).abs() <= 0.02);
    }

    #[test]
    fn noise_keeps_shape(len in 100usize..4000, snr in -5.0f64..60.0, seed in any::<u64>()) {
        let s: Vec<f64> = (0..len).map(|i| 0.8 * (i as f64 * 0.05).sin()).collect();
        let clip = AudioClip::new("n", s, RATE).unwrap();
        let noisy = add_noise(&clip, snr, &NoiseSource::White, seed).unwrap();
        prop_assert_eq!(noisy.len(), clip.len());
        prop_assert_eq!(noisy.sample_rate_hz, clip.sample_rate_hz);
        prop_assert!(noisy.samples.iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn mel_scale_is_increasing(a in 0.0f64..8000.0, d in 1e-3f64..4000.0) {
        prop_assert!(hz_to_mel(a + d).unwrap() > hz_to_mel(a).unwrap());
    }

    #[test]
    fn features_finite_for_finite_input(samples in prop::collection::vec(-1.0f64..=1.0, 400..3000), silent in any::<bool>()) {
        let s = if silent { vec![0.0; samples.len()] } else { samples };
        let clip = AudioClip::new("f", s, RATE).unwrap();
        let m = mfcc(&clip, &FrameSpec::default(), &MfccConfig::default()).unwrap();
        prop_assert!(m.data.iter().all(|v| v.is_finite()));
        let l = log_mel(&clip, &FrameSpec::default(), &MfccConfig::default()).unwrap();
        prop_assert!(l.data.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn mfcc_shifts_with_the_signal(seed in any::<u64>(), len in 2000usize..6000) {
        let mut rng = rng_from(seed, &["mfcc"]);
        let s: Vec<f64> = (0..len).map(|_| 0.3 * standard_normal(&mut rng)).collect();
        let frame = FrameSpec::default();
        let (_, hop) = frame.samples(RATE).unwrap();
        let full = mfcc(&AudioClip::new("a", s.clone(), RATE).unwrap(), &frame, &MfccConfig::default()).unwrap();
        let shifted = mfcc(&AudioClip::new("b", s[hop..].to_vec(), RATE).unwrap(), &frame, &MfccConfig::default()).unwrap();
        prop_assert_eq!(shifted.n_frames + 1, full.n_frames);
        // Frame 0 of the shifted clip sees a different pre-emphasis boundary.
        for i in 1..shifted.n_frames {
            for (a, b) in shifted.row(i).iter().zip(full.row(i + 1)) {
                prop_assert!((a - b).abs() <= 1e-6, "frame {i}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn policy_output_independent_of_scheduling(seed in any::<u64>()) {
        let clips: Vec<(AudioClip, ClipRecord)> = (0..4)
            .map(|i| {
                let id = format!("c{i}");
                (harmonic(120.0 + 20.0 * i as f64, 0.6, RATE, 0.5).with_id(id.clone()), record(&id))
            })
            .collect();
        let policy = AugmentPolicy::sentence();
        let run = |(c, r): &(AudioClip, ClipRecord)| apply_policy(c, r, &policy, &NoiseSource::White, seed).unwrap();
        let serial: Vec<_> = clips.iter().map(run).collect();
        let parallel: Vec<_> = clips.par_iter().map(run).collect();
        prop_assert_eq!(serial, parallel);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn jitter_and_shimmer_survive_time_reversal(jitter in 1.0f64..4.0, shimmer in 3.0f64..8.0, seed in 0u64..1000) {
        let profile = VoiceProfile { jitter_pct: jitter, shimmer_pct: shimmer, ..VoiceProfile::default() };
        let clip = synthesize_vowel(&profile, Vowel::A, 1.5, RATE, seed).unwrap();
        let mut rev = clip.samples.clone();
        rev.reverse();
        let rev = clip.derive(rev).unwrap();
        let (j, jr) = (measure_jitter(&clip).unwrap(), measure_jitter(&rev).unwrap());
        let (s, sr) = (measure_shimmer(&clip).unwrap(), measure_shimmer(&rev).unwrap());
        prop_assert!((j - jr).abs() <= 0.1 * j.max(jr), "jitter {j} vs {jr}");
        prop_assert!((s - sr).abs() <= 0.1 * s.max(sr), "shimmer {s} vs {sr}");
    }

    #[test]
    fn synthesis_is_deterministic(seed in any::<u64>(), f0 in 80.0f64..300.0) {
        let profile = VoiceProfile { f0_hz: f0, ..VoiceProfile::default() };
        let a = synthesize_vowel(&profile, Vowel::I, 0.6, RATE, seed).unwrap();
        let b = synthesize_vowel(&profile, Vowel::I, 0.6, RATE, seed).unwrap();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn hnr_falls_as_noise_rises() {
    let tone = harmonic(150.0, 1.0, RATE, 0.4);
    let mut prev = f64::INFINITY;
    for (i, snr) in [40.0, 30.0, 20.0, 10.0, 5.0].into_iter().enumerate() {
        let noisy = add_noise(&tone, snr, &NoiseSource::White, i as u64).unwrap();
        let h = measure_hnr(&noisy).unwrap();
        assert!(h < prev, "HNR {h} at {snr} dB SNR not below {prev}");
        prev = h;
    }
}
