use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::emotion::EmotionLabel;
use crate::numcore::Tensor;
use crate::Error;

fn random_seq(registry: &RigRegistry, frames: usize, seed: u64) -> RigCurveSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = Tensor::from_fn(registry.len(), frames, |_, _| rng.gen_range(-1.0..=1.0));
    RigCurveSequence::new(values, DEFAULT_FRAME_RATE, registry.hash())
        .unwrap()
        .quantized()
}

fn brute_force_count(frames: usize, window: usize, stride: usize) -> usize {
    let mut n = 0;
    let mut start = 0;
    while start + window <= frames {
        n += 1;
        start += stride;
    }
    n
}

#[test]
fn registry_rejects_duplicates_and_untagged() {
    let mut regions = std::collections::BTreeMap::new();
    regions.insert("a".to_string(), Region::Lip);
    let err = RigRegistry::new(vec!["a".into(), "a".into()], &regions).unwrap_err();
    assert!(matches!(err, Error::Schema(_)));
    let err = RigRegistry::new(vec!["a".into(), "b".into()], &regions).unwrap_err();
    assert!(err.to_string().contains('b'));
}

#[test]
fn default_registry_has_116_rigs() {
    let r = RigRegistry::default();
    assert_eq!(r.len(), DEFAULT_RIG_COUNT);
    let total: usize = [Region::Lip, Region::Eye, Region::Forehead, Region::Other]
        .iter()
        .map(|&g| r.indices_in(g).len())
        .sum();
    assert_eq!(total, 116);
    let back = RigRegistry::from_json(&r.to_json()).unwrap();
    assert_eq!(back, r);
    assert_eq!(back.hash(), r.hash());
}

#[test]
fn zero_csv_loads_as_zero_sequence() {
    let reg = RigRegistry::default();
    let mut text = reg.names().join(",") + "\n";
    let row = vec!["0.000000"; 116].join(",");
    for _ in 0..150 {
        text.push_str(&row);
        text.push('\n');
    }
    let seq = parse_rig_csv(&text, &reg).unwrap();
    assert_eq!((seq.rigs(), seq.frames()), (116, 150));
    assert!(seq.values().data().iter().all(|&v| v == 0.0));
    assert_eq!(seq.registry_hash(), reg.hash());
}

#[test]
fn unknown_and_missing_columns_are_schema_errors() {
    let reg = RigRegistry::synthetic(1, 1, 1, 1);
    let text = "lip_00,eye_00,forehead_00,jaw_open\n0,0,0,0\n";
    match parse_rig_csv(text, &reg).unwrap_err() {
        Error::Schema(msg) => {
            assert!(msg.contains("jaw_open"), "{msg}");
            assert!(msg.contains("other_00"), "{msg}");
        }
        e => panic!("{e:?}"),
    }
}

#[test]
fn out_of_range_cell_reports_position() {
    let reg = RigRegistry::synthetic(1, 1, 1, 1);
    let text = "lip_00,eye_00,forehead_00,other_00\n0,0,0,0\n0,1.5,0,0\n";
    match parse_rig_csv(text, &reg).unwrap_err() {
        Error::Validation(msg) => assert!(msg.contains("row 2") && msg.contains("column 1"), "{msg}"),
        e => panic!("{e:?}"),
    }
    let text = "lip_00,eye_00,forehead_00,other_00\nNaN,0,0,0\n";
    assert!(matches!(parse_rig_csv(text, &reg), Err(Error::Validation(_))));
}

#[test]
fn columns_are_reordered_to_registry_order() {
    let reg = RigRegistry::synthetic(1, 1, 1, 1);
    let text = "other_00,lip_00,eye_00,forehead_00\n0.400000,0.100000,0.200000,0.300000\n";
    let seq = parse_rig_csv(text, &reg).unwrap();
    assert_eq!(seq.values().data(), &[0.1, 0.2, 0.3, 0.4]);
}

#[test]
fn zero_sequence_saves_zero_cells() {
    let reg = RigRegistry::synthetic(2, 1, 1, 1);
    let seq = RigCurveSequence::zeros(&reg, 3);
    let text = rig_curves_to_csv(&seq, &reg).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 4);
    for line in &lines[1..] {
        assert!(line.split(',').all(|c| c == "0.000000"));
    }
    assert!(text.ends_with('\n') && !text.contains('\r'));
}

#[test]
fn single_frame_has_one_data_row() {
    let reg = RigRegistry::synthetic(2, 1, 1, 1);
    let seq = random_seq(&reg, 1, 3);
    let text = rig_curves_to_csv(&seq, &reg).unwrap();
    assert_eq!(text.lines().count(), 2);
}

#[test]
fn file_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let reg = RigRegistry::default();
    let seq = random_seq(&reg, 40, 11);
    let path = dir.path().join("clip.csv");
    save_rig_curves(&seq, &reg, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let back = load_rig_curves(&path, &reg).unwrap();
    let a: Vec<u64> = seq.values().data().iter().map(|v| v.to_bits()).collect();
    let b: Vec<u64> = back.values().data().iter().map(|v| v.to_bits()).collect();
    assert_eq!(a, b);
    save_rig_curves(&back, &reg, &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
}

#[test]
fn quantize_is_idempotent_and_normalises_negative_zero() {
    assert_eq!(quantize(-1e-9).to_bits(), 0f64.to_bits());
    for v in [0.1234565, -0.9999995, 1.0, -1.0, 0.5] {
        assert_eq!(quantize(quantize(v)).to_bits(), quantize(v).to_bits());
    }
}

#[test]
fn window_examples() {
    let reg = RigRegistry::synthetic(1, 1, 1, 1);
    let s96 = RigCurveSequence::zeros(&reg, 96);
    let w = slide_windows(&s96, 96, 5, "c", EmotionLabel::Sad).unwrap();
    assert_eq!(w.len(), 1);
    assert_eq!(w[0].start_frame, 0);
    let s270 = RigCurveSequence::zeros(&reg, 270);
    assert_eq!(
        slide_windows(&s270, 96, 5, "c", EmotionLabel::Sad).unwrap().len(),
        brute_force_count(270, 96, 5)
    );
    assert_eq!(brute_force_count(270, 96, 5), 35);
    let s95 = RigCurveSequence::zeros(&reg, 95);
    assert!(slide_windows(&s95, 96, 5, "c", EmotionLabel::Sad).unwrap().is_empty());
    assert!(slide_windows(&s95, 0, 5, "c", EmotionLabel::Sad).is_err());
}

#[test]
fn validate_examples() {
    let reg = RigRegistry::synthetic(2, 1, 1, 1);
    assert!(validate(&RigCurveSequence::zeros(&reg, 10)).is_empty());
    let mut v = Tensor::zeros(&[5, 10]);
    v.set(3, 7, 1.5);
    let out = validate(&RigCurveSequence::from_raw(v, 30.0, reg.hash()));
    assert_eq!(out.len(), 1);
    assert_eq!(
        (out[0].rig, out[0].frame, out[0].kind),
        (Some(3), Some(7), ViolationKind::OutOfRange)
    );
}

#[test]
fn validate_finds_injected_nan() {
    let reg = RigRegistry::synthetic(3, 2, 2, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for trial in 0..200 {
        let seq = random_seq(&reg, 20, trial);
        let (r, t) = (rng.gen_range(0..10), rng.gen_range(0..20));
        let mut v = seq.into_values();
        v.set(r, t, f64::NAN);
        let out = validate(&RigCurveSequence::from_raw(v, 30.0, reg.hash()));
        assert_eq!(out.len(), 1);
        assert_eq!(
            (out[0].rig, out[0].frame, out[0].kind),
            (Some(r), Some(t), ViolationKind::NonFinite)
        );
    }
}

proptest! {
    #[test]
    fn window_count_matches_enumeration(frames in 1usize..=1000, window in 1usize..=1000, stride in 1usize..=1000) {
        prop_assert_eq!(window_count(frames, window, stride), brute_force_count(frames, window, stride));
    }

    #[test]
    fn csv_round_trip_is_identity(seed in any::<u64>(), frames in 1usize..12) {
        let reg = RigRegistry::synthetic(3, 2, 2, 2);
        let seq = random_seq(&reg, frames, seed);
        let text = rig_curves_to_csv(&seq, &reg).unwrap();
        let back = parse_rig_csv(&text, &reg).unwrap();
        prop_assert_eq!(&back, &seq);
        prop_assert_eq!(rig_curves_to_csv(&back, &reg).unwrap(), text);
    }

    #[test]
    fn windows_inherit_validity(seed in any::<u64>(), frames in 96usize..200, stride in 1usize..20) {
        let reg = RigRegistry::synthetic(2, 1, 1, 1);
        let seq = random_seq(&reg, frames, seed);
        for w in slide_windows(&seq, 96, stride, "c", EmotionLabel::Happy).unwrap() {
            prop_assert_eq!(w.frames(), 96);
            prop_assert!(validate(&w.as_sequence(reg.hash())).is_empty());
        }
    }
}
