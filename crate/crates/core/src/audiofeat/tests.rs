use std::f64::consts::PI;

use proptest::prelude::*;

use super::*;
use crate::rigmodel::RigRegistry;

fn tone(hz: f64, len: usize) -> AudioSignal {
    let s = (0..len)
        .map(|n| 0.5 * (2.0 * PI * hz * n as f64 / 16000.0).sin())
        .collect();
    AudioSignal::new(s, 16000).unwrap()
}

fn noise(len: usize, seed: u64) -> AudioSignal {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    AudioSignal::new((0..len).map(|_| rng.gen_range(-0.8..0.8)).collect(), 16000).unwrap()
}

fn zeros_seq(frames: usize) -> RigCurveSequence {
    RigCurveSequence::zeros(&RigRegistry::default_116(), frames)
}

#[test]
fn signal_rejects_out_of_range() {
    assert!(AudioSignal::new(vec![0.0, 1.5], 16000).is_err());
    assert!(AudioSignal::new(vec![f64::NAN], 16000).is_err());
    assert!(AudioSignal::new(vec![1.0, -1.0], 16000).is_ok());
}

#[test]
fn silent_wav_loads_as_zeros() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("s.wav");
    write_wav(&AudioSignal::new(vec![0.0; 16000], 16000).unwrap(), &p).unwrap();
    let s = load_wav(&p).unwrap();
    assert_eq!(s.len(), 16000);
    assert_eq!(s.sample_rate(), 16000);
    assert!(s.samples().iter().all(|&v| v == 0.0));
}

#[test]
fn window_length_file() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("w.wav");
    write_wav(&tone(300.0, 51200), &p).unwrap();
    assert_eq!(load_wav(&p).unwrap().len(), 51200);
}

#[test]
fn stereo_is_averaged() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("st.wav");
    let spec = hound::WavSpec {
        channels: 2,
        sample_rate: 16000,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(&p, spec).unwrap();
    for _ in 0..10 {
        w.write_sample(16384i16).unwrap();
        w.write_sample(-8192i16).unwrap();
    }
    w.finalize().unwrap();
    let s = load_wav(&p).unwrap();
    assert_eq!(s.len(), 10);
    assert!(s.samples().iter().all(|&v| (v - 0.125).abs() < 1e-12));
}

#[test]
fn float_and_corrupt_wavs_are_format_errors() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("f.wav");
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: 16000,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut w = hound::WavWriter::create(&p, spec).unwrap();
    w.write_sample(0.25f32).unwrap();
    w.finalize().unwrap();
    assert!(matches!(load_wav(&p), Err(Error::AudioFormat(_))));

    let q = dir.path().join("junk.wav");
    std::fs::write(&q, b"RIFF\x10\x00\x00\x00WAVEjunk").unwrap();
    assert!(matches!(load_wav(&q), Err(Error::AudioFormat(_))));
    assert!(matches!(
        load_wav(&dir.path().join("missing.wav")),
        Err(Error::Io { .. })
    ));
}

fn naive_dft_mag(x: &[f64], bin: usize) -> f64 {
    let n = x.len() as f64;
    let (mut re, mut im) = (0.0, 0.0);
    for (i, &v) in x.iter().enumerate() {
        let a = -2.0 * PI * bin as f64 * i as f64 / n;
        re += v * a.cos();
        im += v * a.sin();
    }
    (re * re + im * im).sqrt()
}

#[test]
fn resampled_8k_sine_keeps_its_frequency() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("8k.wav");
    let s: Vec<f64> = (0..8000)
        .map(|n| 0.6 * (2.0 * PI * 100.0 * n as f64 / 8000.0).sin())
        .collect();
    write_wav(&AudioSignal::new(s, 8000).unwrap(), &p).unwrap();
    let up = load_wav(&p).unwrap();
    assert_eq!(up.sample_rate(), 16000);
    assert_eq!(up.len(), 16000);
    // 1 s of signal: bin k is k Hz.
    let best = (1..400)
        .max_by(|&a, &b| {
            naive_dft_mag(up.samples(), a)
                .partial_cmp(&naive_dft_mag(up.samples(), b))
                .unwrap()
        })
        .unwrap();
    assert_eq!(best, 100);
}

#[test]
fn mfcc_frame_count_matches_enumeration() {
    let cfg = MfccConfig::default();
    for len in [400, 401, 559, 560, 561, 16000, 51200] {
        let mut n = 0;
        while n * 160 + 400 <= len {
            n += 1;
        }
        assert_eq!(cfg.frame_count(len), n);
        let f = mfcc(&noise(len, 1), &cfg).unwrap();
        assert_eq!((f.frames(), f.dim()), (n, 39));
    }
    assert_eq!(cfg.frame_count(51200), 318);
}

#[test]
fn mfcc_short_signal_is_size_error() {
    let r = mfcc(&noise(399, 0), &MfccConfig::default());
    assert!(matches!(r, Err(Error::Size(_))));
}

#[test]
fn mfcc_silence() {
    let cfg = MfccConfig::default();
    let f = mfcc(&AudioSignal::new(vec![0.0; 4000], 16000).unwrap(), &cfg).unwrap();
    for t in 0..f.frames() {
        assert!((f.values.at(t, 0) - cfg.silence_c0()).abs() < 1e-9);
        for c in 13..39 {
            assert_eq!(f.values.at(t, c), 0.0);
        }
    }
}

#[test]
fn mfcc_is_deterministic() {
    let s = noise(5000, 3);
    let cfg = MfccConfig::default();
    assert_eq!(mfcc(&s, &cfg).unwrap(), mfcc(&s, &cfg).unwrap());
}

/// Straight-from-definition MFCC of one frame: naive DFT, mel triangles,
/// natural log, orthonormal DCT-II.
fn reference_cepstrum(frame: &[f64]) -> Vec<f64> {
    let (n_fft, n_mels) = (512usize, 26usize);
    let mut x = vec![0.0; n_fft];
    for i in 0..400 {
        x[i] = frame[i] * (0.54 - 0.46 * (2.0 * PI * i as f64 / 399.0).cos());
    }
    let power: Vec<f64> = (0..=n_fft / 2).map(|k| naive_dft_mag(&x, k).powi(2)).collect();
    let mel = |hz: f64| 2595.0 * (1.0 + hz / 700.0).log10();
    let inv = |m: f64| 700.0 * (10f64.powf(m / 2595.0) - 1.0);
    let top = mel(8000.0);
    let edge = |i: usize| inv(top * i as f64 / (n_mels + 1) as f64);
    let logmel: Vec<f64> = (0..n_mels)
        .map(|m| {
            let (lo, mid, hi) = (edge(m), edge(m + 1), edge(m + 2));
            let mut e = 0.0;
            for (k, p) in power.iter().enumerate() {
                let f = k as f64 * 16000.0 / n_fft as f64;
                let w = if f > lo && f <= mid {
                    (f - lo) / (mid - lo)
                } else if f > mid && f < hi {
                    (hi - f) / (hi - mid)
                } else {
                    0.0
                };
                e += w * p;
            }
            e.max(1e-10).ln()
        })
        .collect();
    (0..13)
        .map(|k| {
            let s: f64 = (0..n_mels)
                .map(|m| logmel[m] * (PI * k as f64 * (m as f64 + 0.5) / n_mels as f64).cos())
                .sum();
            s * if k == 0 {
                (1.0 / 26f64).sqrt()
            } else {
                (2.0 / 26f64).sqrt()
            }
        })
        .collect()
}

#[test]
fn mfcc_matches_reference_on_five_frames() {
    for hz in [440.0, 880.0] {
        let s = tone(hz, 400 + 4 * 160);
        let f = mfcc(&s, &MfccConfig::default()).unwrap();
        assert_eq!(f.frames(), 5);
        for t in 0..5 {
            let want = reference_cepstrum(&s.samples()[t * 160..t * 160 + 400]);
            for c in 0..13 {
                assert!((f.values.at(t, c) - want[c]).abs() < 1e-6, "{hz} Hz frame {t} coef {c}");
            }
        }
    }
}

#[test]
fn tones_have_distinct_stable_cepstra() {
    let cfg = MfccConfig::default();
    let a = mfcc(&tone(440.0, 16000), &cfg).unwrap();
    let b = mfcc(&tone(880.0, 16000), &cfg).unwrap();
    // 440 Hz advances 4.4 cycles per hop, so frames repeat every 5 hops.
    for t in 3..a.frames() - 8 {
        for c in 0..13 {
            assert!((a.values.at(t, c) - a.values.at(t + 5, c)).abs() < 1e-6);
            assert!((b.values.at(t, c) - b.values.at(t + 5, c)).abs() < 1e-6);
        }
    }
    let dist: f64 = (0..13).map(|c| (a.values.at(10, c) - b.values.at(10, c)).abs()).sum();
    assert!(dist > 1.0, "440/880 cepstra too close: {dist}");

    // Whole cycles per hop: every interior frame sees the same waveform.
    for hz in [400.0, 800.0] {
        let f = mfcc(&tone(hz, 16000), &cfg).unwrap();
        for t in 3..f.frames() - 3 {
            for c in 0..39 {
                assert!((f.values.at(t, c) - f.values.at(3, c)).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn mfcc_shift_covariance() {
    let s = noise(6000, 11);
    let shifted = AudioSignal::new(s.samples()[160..].to_vec(), 16000).unwrap();
    let cfg = MfccConfig::default();
    let a = mfcc(&s, &cfg).unwrap();
    let b = mfcc(&shifted, &cfg).unwrap();
    assert_eq!(b.frames(), a.frames() - 1);
    // Deltas reach two frames out (ΔΔ four), so skip the edges.
    for t in 4..b.frames() - 4 {
        for c in 0..39 {
            assert!((b.values.at(t, c) - a.values.at(t + 1, c)).abs() < 1e-9);
        }
    }
}

fn features(rows: usize, cols: usize, f: impl FnMut(usize, usize) -> f64) -> AudioFeatureSequence {
    AudioFeatureSequence::new(Tensor::from_fn(rows, cols, f), 160).unwrap()
}

#[test]
fn align_constant_and_identity() {
    let c = align_to_frames(&features(318, 4, |_, j| j as f64 - 1.5), 96).unwrap();
    assert_eq!(c.frames(), 96);
    for t in 0..96 {
        for j in 0..4 {
            assert_eq!(c.values.at(t, j), j as f64 - 1.5);
        }
    }
    let x = features(96, 3, |i, j| ((i * 7 + j * 3) % 11) as f64 * 0.37);
    assert_eq!(align_to_frames(&x, 96).unwrap(), x);
}

#[test]
fn align_ramp_stays_on_its_line() {
    let x = features(
        318,
        2,
        |i, j| if j == 0 { 0.5 * i as f64 } else { 3.0 - 0.01 * i as f64 },
    );
    let y = align_to_frames(&x, 96).unwrap();
    assert_eq!(y.values.row(0), x.values.row(0));
    assert_eq!(y.values.row(95), x.values.row(317));
    for t in 0..96 {
        let pos = t as f64 * 317.0 / 95.0;
        assert!((y.values.at(t, 0) - 0.5 * pos).abs() < 1e-9);
        assert!((y.values.at(t, 1) - (3.0 - 0.01 * pos)).abs() < 1e-9);
    }
}

#[test]
fn align_needs_two_frames() {
    assert!(matches!(
        align_to_frames(&features(1, 3, |_, _| 0.0), 96),
        Err(Error::Size(_))
    ));
}

proptest! {
    #[test]
    fn align_never_overshoots(
        f in 2usize..60,
        target in 2usize..120,
        vals in proptest::collection::vec(-1e3f64..1e3, 60 * 2),
    ) {
        let x = features(f, 2, |i, j| vals[i * 2 + j]);
        let y = align_to_frames(&x, target).unwrap();
        prop_assert_eq!(y.frames(), target);
        for j in 0..2 {
            let col: Vec<f64> = (0..f).map(|i| x.values.at(i, j)).collect();
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for t in 0..target {
                let v = y.values.at(t, j);
                prop_assert!(v >= lo && v <= hi);
            }
            prop_assert_eq!(y.values.at(0, j), col[0]);
            prop_assert_eq!(y.values.at(target - 1, j), col[f - 1]);
        }
    }

    #[test]
    fn pairs_are_time_consistent(frames in 96usize..400) {
        let cfg = PairingConfig::default();
        let len = (frames * 1600).div_ceil(3);
        let s = AudioSignal::new(vec![0.0; len], 16000).unwrap();
        let pairs = pair_windows_with(&s, &zeros_seq(frames), "c", EmotionLabel::Neutral, &cfg, |a, _| {
            AudioFeatureSequence::new(Tensor::zeros(&[2, a.len().min(1)]), 160)
        }).unwrap();
        prop_assert_eq!(pairs.len(), window_count(frames, 96, 5));
        for p in &pairs {
            prop_assert_eq!(p.audio.len(), 51200);
            let rig_secs = p.rig.start_frame as f64 / 30.0;
            let audio_secs = p.audio_start as f64 / 16000.0;
            prop_assert!((rig_secs - audio_secs).abs() * 16000.0 <= 1.0);
        }
    }
}

#[test]
fn nine_second_clip_gives_35_pairs() {
    let cfg = PairingConfig::default();
    let s = AudioSignal::new(vec![0.0; 144000], 16000).unwrap();
    assert_eq!(cfg.audio_window_count(144000, 30.0, 16000), (144000 - 51200) / 2667 + 1);
    let pairs = pair_windows(&s, &zeros_seq(270), "c", EmotionLabel::Sad, &cfg).unwrap();
    assert_eq!(pairs.len(), 35);
    for p in &pairs {
        assert_eq!(p.features.frames(), 96);
        assert_eq!(p.features.dim(), 39);
        assert_eq!(p.rig.label, EmotionLabel::Sad);
    }
}

#[test]
fn boundary_clip_lengths() {
    let cfg = PairingConfig::default();
    let one = pair_windows(
        &AudioSignal::new(vec![0.0; 51200], 16000).unwrap(),
        &zeros_seq(96),
        "c",
        EmotionLabel::Happy,
        &cfg,
    )
    .unwrap();
    assert_eq!(one.len(), 1);
    let none = pair_windows(
        &AudioSignal::new(vec![0.0; 32000], 16000).unwrap(),
        &zeros_seq(60),
        "c",
        EmotionLabel::Happy,
        &cfg,
    )
    .unwrap();
    assert!(none.is_empty());
}

#[test]
fn mismatched_modalities_are_alignment_errors() {
    let cfg = PairingConfig::default();
    let s = AudioSignal::new(vec![0.0; 144000], 16000).unwrap();
    let r = pair_windows(&s, &zeros_seq(120), "bad", EmotionLabel::Angry, &cfg);
    assert!(matches!(r, Err(Error::Alignment(_))));
    // One window of slack is tolerated.
    let ok = pair_windows(&s, &zeros_seq(265), "c", EmotionLabel::Angry, &cfg).unwrap();
    assert_eq!(ok.len(), 34);
}

#[test]
fn feature_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("f.cstk");
    let x = features(50, 7, |i, j| (i as f64 - j as f64) * 0.25);
    save_feature_file(&x, &p).unwrap();
    assert_eq!(load_feature_file(&p).unwrap(), x);

    let w = window_features(&x, 1600, 3200, 16).unwrap();
    assert_eq!(w.frames(), 16);
    assert_eq!(w.values.row(0), x.values.row(10));
}
