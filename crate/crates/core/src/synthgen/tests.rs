use std::collections::BTreeMap;

use proptest::prelude::*;

use super::*;
use crate::audiofeat::{load_wav, pair_windows, PairingConfig};
use crate::rigmodel::{load_rig_curves, validate};

fn small_cfg(seed: u64) -> SynthConfig {
    SynthConfig {
        clips_per_emotion: 2,
        seed,
        ..SynthConfig::default()
    }
}

fn nine_second_cfg() -> SynthConfig {
    SynthConfig {
        min_frames: 270,
        max_frames: 270,
        clips_per_emotion: 3,
        ..SynthConfig::default()
    }
}

fn dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for sub in ["", "clips"] {
        for e in std::fs::read_dir(dir.join(sub)).unwrap() {
            let p = e.unwrap().path();
            if p.is_file() {
                out.insert(
                    format!("{sub}/{}", p.file_name().unwrap().to_string_lossy()),
                    std::fs::read(&p).unwrap(),
                );
            }
        }
    }
    out
}

#[test]
fn same_seed_gives_identical_files() {
    let reg = RigRegistry::default_116();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    write_corpus(&gen_corpus(&small_cfg(7), &reg).unwrap(), a.path()).unwrap();
    write_corpus(&gen_corpus(&small_cfg(7), &reg).unwrap(), b.path()).unwrap();
    let (fa, fb) = (dir_bytes(a.path()), dir_bytes(b.path()));
    assert_eq!(fa.len(), 3 + 2 * 10);
    assert_eq!(fa, fb);

    let c = gen_corpus(&small_cfg(8), &reg).unwrap();
    let a7 = gen_corpus(&small_cfg(7), &reg).unwrap();
    assert_ne!(c.clips[0].rigs, a7.clips[0].rigs);
}

#[test]
fn written_corpus_reads_back_exactly() {
    let reg = RigRegistry::default_116();
    let dir = tempfile::tempdir().unwrap();
    let corpus = gen_corpus(&small_cfg(3), &reg).unwrap();
    let manifest = write_corpus(&corpus, dir.path()).unwrap();
    assert_eq!(ClipManifest::load(&dir.path().join("manifest.json")).unwrap(), manifest);
    let reg2 = RigRegistry::load(&dir.path().join("registry.json")).unwrap();
    assert_eq!(reg2, reg);
    for (entry, clip) in manifest.clips.iter().zip(&corpus.clips) {
        assert_eq!(entry.emotion, clip.emotion);
        let rigs = load_rig_curves(&dir.path().join(&entry.rig_csv), &reg).unwrap();
        assert_eq!(&rigs, &clip.rigs);
        let audio = load_wav(&dir.path().join(&entry.wav)).unwrap();
        assert_eq!(audio, clip.audio);
    }
}

#[test]
fn clips_are_valid_and_paired() {
    let reg = RigRegistry::default_116();
    let corpus = gen_corpus(&small_cfg(5), &reg).unwrap();
    for c in &corpus.clips {
        assert!(validate(&c.rigs).is_empty(), "{}", c.clip_id);
        assert!((120..=270).contains(&c.rigs.frames()));
        assert_eq!(c.audio.len(), audio_len(c.rigs.frames()));
        assert!(c.audio.samples().iter().all(|v| v.abs() <= 0.9));
        assert_eq!(c.latent.cols(), c.rigs.frames());
        let pairs = pair_windows(&c.audio, &c.rigs, &c.clip_id, c.emotion, &PairingConfig::default()).unwrap();
        assert_eq!(pairs.len(), (c.rigs.frames() - 96) / 5 + 1);
    }
}

#[test]
fn mixing_matrices_are_separated() {
    let cfg = SynthConfig::default();
    let reg = RigRegistry::default_116();
    let w = mixing_matrices(&cfg, &reg).unwrap();
    assert_eq!(w.len(), 5);
    for m in &w {
        assert_eq!(m.shape(), &[116, 8]);
        for c in 0..8 {
            let n: f64 = (0..116).map(|i| m.at(i, c).powi(2)).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }
    for i in 0..5 {
        for j in i + 1..5 {
            assert!(min_principal_angle_deg(&w[i], &w[j]) > 15.0);
            let mut d = gram(&w[i]);
            let gj = gram(&w[j]);
            for (a, b) in d.data_mut().iter_mut().zip(gj.data()) {
                *a -= b;
            }
            assert!(frobenius(&d) > 10.0 * cfg.noise_sigma);
        }
    }
}

#[test]
fn principal_angle_oracle() {
    // Planes at a known angle in R^3.
    let a = Tensor::from_rows(3, 1, vec![1.0, 0.0, 0.0]).unwrap();
    let th = 0.3f64;
    let b = Tensor::from_rows(3, 1, vec![th.cos(), th.sin(), 0.0]).unwrap();
    assert!((min_principal_angle_deg(&a, &b) - th.to_degrees()).abs() < 1e-6);
    let xy = Tensor::from_rows(3, 2, vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
    let yz = Tensor::from_rows(3, 2, vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
    assert!(min_principal_angle_deg(&xy, &yz) < 1e-6);
}

#[test]
fn rig_second_moment_follows_mixing() {
    let reg = RigRegistry::default_116();
    let corpus = gen_corpus(&nine_second_cfg(), &reg).unwrap();
    for c in &corpus.clips {
        assert_eq!(c.rigs.frames(), 270);
        let err = scaled_relative_error(&second_moment(c.rigs.values()), &gram(corpus.mixing_for(c.emotion)));
        assert!(err < 0.25, "{}: {err}", c.clip_id);
        // Against another emotion's structure the fit is poor.
        let other = EmotionLabel::from_index((c.emotion.index() + 1) % 5).unwrap();
        let wrong = scaled_relative_error(&second_moment(c.rigs.values()), &gram(corpus.mixing_for(other)));
        assert!(wrong > err + 0.3, "{}: {wrong} vs {err}", c.clip_id);
    }
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// Magnitude at `hz` of a 400-sample Hann-windowed slice centred on each
/// animation frame, by direct summation.
fn band_envelope(audio: &AudioSignal, hz: f64, frames: usize) -> Vec<f64> {
    let s = audio.samples();
    (0..frames)
        .map(|f| {
            let centre = (f * 1600) as f64 / 3.0;
            let (mut re, mut im) = (0.0, 0.0);
            for i in 0..400 {
                let n = centre as isize - 200 + i as isize;
                if n < 0 || n as usize >= s.len() {
                    continue;
                }
                let w = (PI * (i as f64 + 0.5) / 400.0).sin().powi(2);
                let a = 2.0 * PI * hz * n as f64 / 16000.0;
                re += w * s[n as usize] * a.cos();
                im += w * s[n as usize] * a.sin();
            }
            (re * re + im * im).sqrt()
        })
        .collect()
}

#[test]
fn audio_bands_track_latent_factors() {
    let cfg = nine_second_cfg();
    let reg = RigRegistry::default_116();
    let corpus = gen_corpus(&cfg, &reg).unwrap();
    let freqs = cfg.tone_frequencies();
    assert!((freqs[0] - 200.0).abs() < 1e-9 && (freqs[7] - 3000.0).abs() < 1e-6);
    for c in corpus.clips.iter().step_by(4) {
        let w = corpus.mixing_for(c.emotion);
        let proj = w.transpose().matmul(c.rigs.values());
        for (j, &hz) in freqs.iter().enumerate() {
            let band = band_envelope(&c.audio, hz, c.rigs.frames());
            let r = pearson(&band, c.latent.row(j));
            assert!(r > 0.7, "{} factor {j}: r = {r}", c.clip_id);

            let best = (-5isize..=5)
                .max_by(|&a, &b| {
                    lagged(proj.row(j), &band, a)
                        .partial_cmp(&lagged(proj.row(j), &band, b))
                        .unwrap()
                })
                .unwrap();
            assert!(best.abs() <= 1, "{} factor {j}: lag {best}", c.clip_id);
        }
    }
}

fn lagged(a: &[f64], b: &[f64], lag: isize) -> f64 {
    let n = a.len() as isize;
    let idx: Vec<(usize, usize)> = (0..n)
        .filter(|&t| t + lag >= 0 && t + lag < n)
        .map(|t| (t as usize, (t + lag) as usize))
        .collect();
    let x: Vec<f64> = idx.iter().map(|&(i, _)| a[i]).collect();
    let y: Vec<f64> = idx.iter().map(|&(_, k)| b[k]).collect();
    pearson(&x, &y)
}

#[test]
fn random_windows_are_bounded_and_uncorrelated() {
    let w = gen_random_windows(100, 116, 96, 9).unwrap();
    assert_eq!(w.len(), 100);
    assert!(w
        .iter()
        .all(|x| x.label == EmotionLabel::Random && x.values.shape() == [116, 96]));
    assert!(w.iter().all(|x| x.values.data().iter().all(|v| v.abs() <= 1.0)));
    let vals: Vec<Tensor> = w.iter().map(|x| x.values.clone()).collect();
    let c = pooled_correlation(&vals);
    let mut worst: f64 = 0.0;
    for i in 0..116 {
        assert!((c.at(i, i) - 1.0).abs() < 1e-12);
        for j in 0..116 {
            if i != j {
                worst = worst.max(c.at(i, j).abs());
            }
        }
    }
    assert!(worst < 0.3, "max off-diagonal {worst}");
    let again = gen_random_windows(100, 116, 96, 9).unwrap();
    assert!(w.iter().zip(&again).all(|(a, b)| a.values == b.values));
    assert!(gen_random_windows(0, 116, 96, 9).is_err());
}

#[test]
fn config_validation() {
    let bad = SynthConfig {
        min_frames: 50,
        ..SynthConfig::default()
    };
    assert!(bad.validate().is_err());
    assert!(SynthConfig {
        max_tone_hz: 9000.0,
        ..SynthConfig::default()
    }
    .validate()
    .is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn pulses_never_overlap(frames in 96usize..400, seed in 0u64..1000) {
        let cfg = SynthConfig::default();
        let mut rng = stream_rng(seed, "p");
        let z = pulse_latent(&cfg, frames, &mut rng);
        for t in 0..frames {
            let active = (0..cfg.factors).filter(|&j| z.at(j, t) != 0.0).count();
            prop_assert!(active <= 1);
            for j in 0..cfg.factors {
                prop_assert!(z.at(j, t) >= 0.0 && z.at(j, t) <= cfg.max_pulse());
            }
        }
    }
}
