use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

/// 3 rigs (lip, eye, forehead), 6 vertices: 0,1 lip; 2 eye; 3,4 forehead;
/// 5 untagged. Each rig moves one vertex along one axis.
fn hand_basis() -> (RigRegistry, VertexBasis) {
    let reg = RigRegistry::synthetic(1, 1, 1, 0);
    let rest = Tensor::from_fn(6, 3, |v, c| (v * 3 + c) as f64);
    let mut d = vec![0.0; 3 * 6 * 3];
    d[(0 * 6 + 0) * 3] = 1.0;
    d[(1 * 6 + 2) * 3 + 1] = 1.0;
    d[(2 * 6 + 3) * 3 + 2] = 1.0;
    let deltas = Tensor::new(vec![3, 6, 3], d).unwrap();
    let b = VertexBasis::new(rest, deltas, vec![0, 1], vec![2], vec![3, 4]).unwrap();
    (reg, b)
}

fn seq(values: Tensor) -> RigCurveSequence {
    RigCurveSequence::from_raw(values, 30.0, 0)
}

/// Two-loop reference for the region error.
fn reference_error(p: &Tensor, g: &Tensor, region: &[usize]) -> f64 {
    let mut total = 0.0;
    for t in 0..p.rows() {
        let mut worst = 0.0f64;
        for &v in region {
            let mut s = 0.0;
            for c in 0..3 {
                s += (p.at(t, 3 * v + c) - g.at(t, 3 * v + c)).powi(2);
            }
            worst = worst.max(s.sqrt());
        }
        total += worst;
    }
    total / p.rows() as f64
}

#[test]
fn zero_curves_give_rest_and_unit_rig_gives_its_delta() {
    let (_, b) = hand_basis();
    let pos = rig_to_vertices(&seq(Tensor::zeros(&[3, 2])), &b).unwrap();
    for t in 0..2 {
        assert_eq!(pos.row(t), b.rest().data());
    }
    let mut v = Tensor::zeros(&[3, 1]);
    v.set(1, 0, 1.0);
    let pos = rig_to_vertices(&seq(v), &b).unwrap();
    for (i, p) in pos.row(0).iter().enumerate() {
        assert_eq!(*p, b.rest().data()[i] + b.deltas().data()[18 + i]);
    }
}

#[test]
fn rig_count_mismatch_is_a_shape_error() {
    let (_, b) = hand_basis();
    assert!(matches!(
        rig_to_vertices(&seq(Tensor::zeros(&[4, 2])), &b),
        Err(Error::Shape(_))
    ));
}

#[test]
fn single_lip_displacement_gives_two_tenths_mm() {
    let (_, b) = hand_basis();
    let gt = seq(Tensor::zeros(&[3, 10]));
    let mut p = Tensor::zeros(&[3, 10]);
    p.set(0, 4, 2.0);
    let pred = seq(p);
    assert!((lve(&pred, &gt, &b).unwrap() - 0.2).abs() < 1e-9);
    assert_eq!(eve(&pred, &gt, &b).unwrap(), 0.0);
}

#[test]
fn single_forehead_displacement_gives_two_tenths_mm() {
    let (_, b) = hand_basis();
    let gt = seq(Tensor::zeros(&[3, 10]));
    let mut p = Tensor::zeros(&[3, 10]);
    p.set(2, 7, -2.0);
    let pred = seq(p);
    assert!((eve(&pred, &gt, &b).unwrap() - 0.2).abs() < 1e-9);
    assert_eq!(lve(&pred, &gt, &b).unwrap(), 0.0);
}

#[test]
fn identical_sequences_score_zero() {
    let reg = RigRegistry::scaled(20);
    let b = VertexBasis::synthetic(&reg, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let s = seq(Tensor::from_fn(20, 12, |_, _| rng.gen_range(0.0..1.0)));
    assert_eq!(lve(&s, &s, &b).unwrap(), 0.0);
    assert_eq!(eve(&s, &s, &b).unwrap(), 0.0);
}

#[test]
fn metrics_match_two_loop_reference() {
    let reg = RigRegistry::scaled(24);
    let b = VertexBasis::synthetic(&reg, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let p = seq(Tensor::from_fn(24, 15, |_, _| rng.gen_range(0.0..1.0)));
    let g = seq(Tensor::from_fn(24, 15, |_, _| rng.gen_range(0.0..1.0)));
    let (vp, vg) = (rig_to_vertices(&p, &b).unwrap(), rig_to_vertices(&g, &b).unwrap());
    // Positions themselves from a direct per-vertex sum.
    for t in 0..15 {
        for v in 0..b.vertices() {
            for c in 0..3 {
                let mut x = b.rest().at(v, c);
                for r in 0..24 {
                    x += p.values().at(r, t) * b.deltas().data()[(r * b.vertices() + v) * 3 + c];
                }
                assert!((vp.at(t, 3 * v + c) - x).abs() < 1e-9);
            }
        }
    }
    assert!((lve(&p, &g, &b).unwrap() - reference_error(&vp, &vg, b.lip())).abs() < 1e-9);
    assert!((eve(&p, &g, &b).unwrap() - reference_error(&vp, &vg, &b.emotional())).abs() < 1e-9);
}

#[test]
fn lip_only_rig_motion_leaves_eve_at_zero() {
    let reg = RigRegistry::scaled(24);
    let b = VertexBasis::synthetic(&reg, 3).unwrap();
    let gt = RigCurveSequence::zeros(&reg, 8);
    let mut v = Tensor::zeros(&[24, 8]);
    for r in reg.indices_in(Region::Lip) {
        v.set(r, 3, 0.5);
    }
    let pred = seq(v);
    assert_eq!(eve(&pred, &gt, &b).unwrap(), 0.0);
    assert!(lve(&pred, &gt, &b).unwrap() > 0.0);
}

#[test]
fn non_lip_delta_permutation_leaves_lve_unchanged() {
    let reg = RigRegistry::scaled(24);
    let b = VertexBasis::synthetic(&reg, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let p = seq(Tensor::from_fn(24, 10, |_, _| rng.gen_range(0.0..1.0)));
    let g = seq(Tensor::from_fn(24, 10, |_, _| rng.gen_range(0.0..1.0)));
    let v = b.vertices();
    // Swap the deltas of vertices 40 and 150 (neither is a lip vertex).
    let mut d = b.deltas().clone();
    for r in 0..24 {
        for c in 0..3 {
            d.data_mut().swap((r * v + 40) * 3 + c, (r * v + 150) * 3 + c);
        }
    }
    let b2 = VertexBasis::new(
        b.rest().clone(),
        d,
        b.lip().to_vec(),
        (30..50).collect(),
        (50..70).collect(),
    )
    .unwrap();
    assert_eq!(lve(&p, &g, &b).unwrap(), lve(&p, &g, &b2).unwrap());
}

#[test]
fn empty_region_and_frame_mismatch_are_errors() {
    let (_, b) = hand_basis();
    let a = seq(Tensor::zeros(&[3, 4]));
    assert!(matches!(region_error(&a, &a, &b, &[]), Err(Error::Config(_))));
    assert!(matches!(
        lve(&a, &seq(Tensor::zeros(&[3, 5])), &b),
        Err(Error::Shape(_))
    ));
}

#[test]
fn overlapping_regions_are_rejected() {
    let (_, b) = hand_basis();
    let r = VertexBasis::new(b.rest().clone(), b.deltas().clone(), vec![0, 1], vec![1], vec![3]);
    assert!(matches!(r, Err(Error::Config(_))));
    let r = VertexBasis::new(b.rest().clone(), b.deltas().clone(), vec![0, 9], vec![2], vec![3]);
    assert!(matches!(r, Err(Error::Index(_))));
}

#[test]
fn synthetic_basis_respects_region_tags() {
    let reg = RigRegistry::default_116();
    let b = VertexBasis::synthetic(&reg, 11).unwrap();
    assert_eq!((b.vertices(), b.lip().len(), b.emotional().len()), (200, 30, 40));
    let v = b.vertices();
    for r in 0..reg.len() {
        let allowed: Vec<usize> = match reg.region(r) {
            Region::Lip => (0..30).collect(),
            Region::Eye => (30..50).collect(),
            Region::Forehead => (50..70).collect(),
            Region::Other => (70..200).collect(),
        };
        for i in 0..v {
            let moved = (0..3).any(|c| b.deltas().data()[(r * v + i) * 3 + c] != 0.0);
            assert_eq!(moved, allowed.contains(&i), "rig {r} vertex {i}");
        }
    }
}

#[test]
fn basis_file_round_trip() {
    let reg = RigRegistry::scaled(16);
    let b = VertexBasis::synthetic(&reg, 2).unwrap().round_to_f32();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("basis.cstk");
    b.save(&p).unwrap();
    assert_eq!(VertexBasis::load(&p).unwrap(), b);
}

fn feature(m: Tensor) -> CorrelationFeature {
    CorrelationFeature { matrix: m }
}

#[test]
fn heatmap_export_round_trips_and_means() {
    let reg = RigRegistry::scaled(6);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = Tensor::from_fn(6, 6, |_, _| rng.gen_range(-40.0..40.0));
    let feats = vec![
        LabelledFeature {
            id: "a".into(),
            emotion: EmotionLabel::Angry,
            feature: feature(a.clone()),
        },
        LabelledFeature {
            id: "b".into(),
            emotion: EmotionLabel::Angry,
            feature: feature(a.clone()),
        },
        LabelledFeature {
            id: "z".into(),
            emotion: EmotionLabel::Sad,
            feature: feature(Tensor::zeros(&[6, 6])),
        },
    ];
    let dir = tempfile::tempdir().unwrap();
    let names = export_heatmap(&feats, &reg, dir.path()).unwrap();
    assert_eq!(names, ["a.csv", "b.csv", "z.csv", "mean_angry.csv", "mean_sad.csv"]);
    let read = |n: &str| parse_heatmap(&std::fs::read_to_string(dir.path().join(n)).unwrap(), &reg).unwrap();
    assert!(read("a.csv").max_abs_diff(&a) <= 1e-6);
    assert!(read("mean_angry.csv").max_abs_diff(&a) <= 1e-6);
    assert!(read("z.csv").data().iter().all(|v| *v == 0.0));
    assert!(export_heatmap(&[], &reg, dir.path()).is_err());
}

#[test]
fn heatmap_parse_rejects_wrong_labels() {
    let reg = RigRegistry::scaled(4);
    let text = matrix_to_csv(&Tensor::zeros(&[4, 4]), &reg).unwrap();
    let other = RigRegistry::scaled(5);
    assert!(parse_heatmap(&text, &other).is_err());
    assert!(parse_heatmap(&text.replace("0.000000\n", "x\n"), &reg).is_err());
}

#[test]
fn pca_needs_three_features() {
    let f = vec![feature(Tensor::zeros(&[2, 2])); 2];
    assert!(matches!(pca_embed(&f), Err(Error::Size(_))));
}

#[test]
fn collinear_features_have_no_second_component() {
    let dir = Tensor::from_fn(3, 3, |i, j| (i as f64 + 1.0) * (j as f64 - 1.3));
    let fs: Vec<Tensor> = (0..7)
        .map(|k| {
            let mut t = dir.clone();
            t.scale_assign(k as f64 - 2.5);
            t
        })
        .collect();
    let refs: Vec<&Tensor> = fs.iter().collect();
    let p = pca(&refs).unwrap();
    assert!(p.variances[0] > 0.0);
    assert!(p.variances[1] < 1e-9 * p.variances[0]);
    for pt in &p.points {
        assert!(pt[1].abs() < 1e-6);
    }
}

fn random_features(n: usize, d: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Anisotropic so the top two directions are well separated.
    (0..n)
        .map(|_| Tensor::from_fn(1, d, |_, j| rng.gen_range(-1.0..1.0) * (d - j) as f64))
        .collect()
}

#[test]
fn duplicating_points_keeps_directions() {
    let fs = random_features(9, 6, 1);
    let refs: Vec<&Tensor> = fs.iter().collect();
    let doubled: Vec<&Tensor> = fs.iter().chain(fs.iter()).collect();
    let (a, b) = (pca(&refs).unwrap(), pca(&doubled).unwrap());
    for c in 0..2 {
        for (x, y) in a.components[c].iter().zip(&b.components[c]) {
            assert!((x - y).abs() < 1e-6);
        }
    }
}

#[test]
fn pca_beats_random_rank_two_projections() {
    let fs = random_features(12, 6, 2);
    let refs: Vec<&Tensor> = fs.iter().collect();
    let p = pca(&refs).unwrap();
    let centered: Vec<Vec<f64>> = fs
        .iter()
        .map(|f| f.data().iter().zip(&p.mean).map(|(a, b)| a - b).collect())
        .collect();
    // Sum of squared pairwise distances kept by a projection.
    let kept = |pts: &[Vec<f64>]| -> f64 {
        let mut s = 0.0;
        for i in 0..pts.len() {
            for j in 0..pts.len() {
                s += pts[i].iter().zip(&pts[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            }
        }
        s
    };
    let pca_kept = kept(&p.points.iter().map(|q| q.to_vec()).collect::<Vec<_>>());
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let mut a: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut b: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        a.iter_mut().for_each(|x| *x /= na);
        let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        b.iter_mut().zip(&a).for_each(|(y, x)| *y -= dot * x);
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        b.iter_mut().for_each(|x| *x /= nb);
        let proj: Vec<Vec<f64>> = centered
            .iter()
            .map(|x| {
                vec![
                    x.iter().zip(&a).map(|(u, v)| u * v).sum(),
                    x.iter().zip(&b).map(|(u, v)| u * v).sum(),
                ]
            })
            .collect();
        assert!(pca_kept >= kept(&proj) - 1e-9);
    }
}

#[test]
fn separated_clusters_embed_apart() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let centers = [-3.0, 0.0, 3.0];
    let mut feats = Vec::new();
    let mut labels = Vec::new();
    for (k, c) in centers.iter().enumerate() {
        for _ in 0..5 {
            feats.push(feature(Tensor::from_fn(2, 2, |i, _| {
                c * (i as f64 + 1.0) + rng.gen_range(-0.3..0.3)
            })));
            labels.push(EmotionLabel::EMOTIONS[k]);
        }
    }
    let pts = pca_embed(&feats).unwrap();
    let labelled: Vec<_> = labels.iter().zip(&pts).map(|(l, p)| (*l, p.to_vec())).collect();
    let (within, between) = cluster_distances(&labelled);
    assert!(within < between);
}

#[test]
fn embedding_csv_layout() {
    let rows = vec![("angry_000".to_string(), EmotionLabel::Angry, [1.5, -0.25])];
    assert_eq!(
        embedding_csv(&rows),
        "clip_id,emotion,x,y\nangry_000,angry,1.500000,-0.250000\n"
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn rig_to_vertices_is_affine(a in -2.0f64..2.0, b in -2.0f64..2.0, seed in 0u64..1000) {
        let reg = RigRegistry::scaled(12);
        let basis = VertexBasis::synthetic(&reg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::from_fn(12, 3, |_, _| rng.gen_range(0.0..1.0));
        let y = Tensor::from_fn(12, 3, |_, _| rng.gen_range(0.0..1.0));
        let mix = Tensor::from_fn(12, 3, |i, j| a * x.at(i, j) + b * y.at(i, j));
        let (fx, fy, fm) = (
            rig_to_vertices(&seq(x), &basis).unwrap(),
            rig_to_vertices(&seq(y), &basis).unwrap(),
            rig_to_vertices(&seq(mix), &basis).unwrap(),
        );
        let rest = basis.rest().data();
        for t in 0..3 {
            for (i, r) in rest.iter().enumerate() {
                let expect = a * fx.at(t, i) + b * fy.at(t, i) - (a + b - 1.0) * r;
                prop_assert!((fm.at(t, i) - expect).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn errors_are_nonnegative_and_relabel_invariant(seed in 0u64..1000) {
        let reg = RigRegistry::scaled(12);
        let basis = VertexBasis::synthetic(&reg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let p = seq(Tensor::from_fn(12, 5, |_, _| rng.gen_range(0.0..1.0)));
        let g = seq(Tensor::from_fn(12, 5, |_, _| rng.gen_range(0.0..1.0)));
        let e = eve(&p, &g, &basis).unwrap();
        prop_assert!(e >= 0.0);
        let mut rev = basis.emotional();
        rev.reverse();
        prop_assert_eq!(region_error(&p, &g, &basis, &rev).unwrap(), e);
    }
}
