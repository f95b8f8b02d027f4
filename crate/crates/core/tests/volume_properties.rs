use proptest::prelude::*;

use tumorseg::evaluation::{region_mask, score, RegionKind, ScoreReport};
use tumorseg::fusion::{fuse_volumes, fuse_voxel, ViewTriple};
use tumorseg::postprocess::{postprocess, PostprocessThresholds};
use tumorseg::preprocess::{normalize_volume, NormalizationTargets};
use tumorseg::{Axis, Dims, LabelVolume, MultiModalVolume};

fn labels(dims: Dims) -> impl Strategy<Value = LabelVolume> {
    prop::collection::vec(prop_oneof![3 => Just(0u8), 1 => 0..5u8], dims.len()).prop_map(move |d| LabelVolume::new(dims, d).unwrap())
}

/// Labels drawn as blobs rather than noise so components are non-trivial.
fn blobby_labels(dims: Dims) -> impl Strategy<Value = LabelVolume> {
    prop::collection::vec((0..dims.z, 0..dims.y, 0..dims.x, 1..4usize, 1..5u8), 1..5).prop_map(move |blobs| {
        let mut data = vec![0u8; dims.len()];
        for (cz, cy, cx, r, label) in blobs {
            for i in 0..dims.len() {
                let (z, y, x) = dims.coords(i);
                let d2 = z.abs_diff(cz).pow(2) + y.abs_diff(cy).pow(2) + x.abs_diff(cx).pow(2);
                if d2 <= r * r {
                    data[i] = label;
                }
            }
        }
        LabelVolume::new(dims, data).unwrap()
    })
}

fn intensities(dims: Dims) -> impl Strategy<Value = MultiModalVolume> {
    prop::collection::vec(0.0..255.0f32, 3 * dims.len()).prop_map(move |d| {
        MultiModalVolume::new(dims, ["flair", "t1c", "t2"].map(String::from).to_vec(), d).unwrap()
    })
}

fn thresholds() -> impl Strategy<Value = PostprocessThresholds> {
    (50.0..200.0f64, 0.1..1.0f64, 50.0..200.0f64, 0.05..0.5f64, 50.0..150.0f64, 0.01..0.5f64).prop_map(|(t1, r2, t22, t31, t41, t61)| {
        PostprocessThresholds {
            theta11: t1,
            theta12: t1,
            theta21: r2,
            theta22: t22,
            theta23: r2,
            theta31: t31,
            theta41: t41,
            theta61: t61,
            ..PostprocessThresholds::default()
        }
    })
}

fn positives(v: &LabelVolume) -> Vec<bool> {
    v.data().iter().map(|&l| l > 0).collect()
}

const D: Dims = Dims { z: 8, y: 8, x: 8 };

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn fusion_is_symmetric_in_views(a in 0..5u8, c in 0..5u8, s in 0..5u8) {
        let r = fuse_voxel(ViewTriple::new(a, c, s)).unwrap();
        for (x, y, z) in [(a, s, c), (c, a, s), (c, s, a), (s, a, c), (s, c, a)] {
            prop_assert_eq!(fuse_voxel(ViewTriple::new(x, y, z)).unwrap(), r);
        }
        if a == c && c == s {
            prop_assert_eq!(r, a);
        }
        if [a, c, s].iter().all(|&l| l == 0) {
            prop_assert_eq!(r, 0);
        }
    }

    #[test]
    fn fused_volume_is_voxelwise(a in labels(D), c in labels(D), s in labels(D)) {
        let f = fuse_volumes(&a, &c, &s).unwrap();
        for i in 0..D.len() {
            let expect = fuse_voxel(ViewTriple::new(a.data()[i], c.data()[i], s.data()[i])).unwrap();
            prop_assert_eq!(f.data()[i], expect);
        }
        prop_assert_eq!(fuse_volumes(&a, &a, &a).unwrap(), a);
    }

    #[test]
    fn shrinking_steps_only_remove(res in blobby_labels(D), vol in intensities(D), th in thresholds(), step in 1..=3u8) {
        let out = postprocess(&res, &vol, &th, &[step]).unwrap();
        for (i, (&before, &after)) in res.data().iter().zip(out.data()).enumerate() {
            prop_assert!(after == before || after == 0, "voxel {i}: {before} -> {after}");
        }
    }

    #[test]
    fn hole_filling_only_adds_necrosis(res in blobby_labels(D), vol in intensities(D)) {
        let out = postprocess(&res, &vol, &PostprocessThresholds::default(), &[4]).unwrap();
        for (&before, &after) in res.data().iter().zip(out.data()) {
            prop_assert!(after == before || (before == 0 && after == 1));
        }
    }

    #[test]
    fn relabelling_steps_keep_the_tumor(res in blobby_labels(D), vol in intensities(D), th in thresholds(), step in 5..=6u8) {
        let out = postprocess(&res, &vol, &th, &[step]).unwrap();
        prop_assert_eq!(positives(&out), positives(&res));
    }

    #[test]
    fn positives_appear_only_through_hole_filling(
        res in blobby_labels(D),
        vol in intensities(D),
        th in thresholds(),
        steps in prop::sample::subsequence(vec![1u8, 2, 3, 5, 6], 0..=5),
    ) {
        let out = postprocess(&res, &vol, &th, &steps).unwrap();
        for (&before, &after) in res.data().iter().zip(out.data()) {
            prop_assert!(before > 0 || after == 0);
        }
        prop_assert_eq!(postprocess(&res, &vol, &th, &[]).unwrap(), res);
    }

    #[test]
    fn metrics_are_bounded_and_consistent(p in labels(D), t in labels(D)) {
        for kind in RegionKind::ALL {
            let s = score(&p, &t, kind).unwrap();
            let r = score(&t, &p, kind).unwrap();
            for m in [s.dice, s.ppv, s.sensitivity] {
                prop_assert!((0.0..=1.0).contains(&m));
            }
            prop_assert_eq!(s.dice, r.dice);
            prop_assert_eq!((s.ppv, s.sensitivity), (r.sensitivity, r.ppv));
            if s.predicted > 0 && s.truth > 0 && s.overlap > 0 {
                let harmonic = 2.0 * s.ppv * s.sensitivity / (s.ppv + s.sensitivity);
                prop_assert!((harmonic - s.dice).abs() <= 1e-12);
            }
            let mask = region_mask(&p, kind);
            for (i, &l) in p.data().iter().enumerate() {
                prop_assert_eq!(mask.get(i), kind.labels().contains(&l));
            }
        }
    }

    #[test]
    fn metrics_ignore_relabelling_inside_a_region(p in labels(D), t in labels(D)) {
        // Swapping necrosis and enhancing stays inside core and complete;
        // swapping edema and non-enhancing stays inside complete.
        let swap = |v: &LabelVolume, a: u8, b: u8| {
            let d = v.data().iter().map(|&l| if l == a { b } else if l == b { a } else { l }).collect();
            LabelVolume::new(v.dims(), d).unwrap()
        };
        for (kind, a, b) in [(RegionKind::Core, 1, 4), (RegionKind::Complete, 1, 4), (RegionKind::Complete, 2, 3)] {
            prop_assert_eq!(score(&swap(&p, a, b), &t, kind).unwrap(), score(&p, &t, kind).unwrap());
        }
    }

    #[test]
    fn normalized_channels_stay_in_range(data in prop::collection::vec(prop_oneof![1 => Just(0.0f32), 4 => 1.0..4000.0f32], 3 * 512)) {
        let dims = Dims::new(8, 8, 8);
        let vol = MultiModalVolume::new(dims, ["flair", "t1c", "t2"].map(String::from).to_vec(), data).unwrap();
        if let Ok(out) = normalize_volume(&vol, &NormalizationTargets::default()) {
            prop_assert!(out.data().iter().all(|v| (0.0..=255.0).contains(v)));
        }
    }

    #[test]
    fn volumes_round_trip(vol in intensities(Dims::new(4, 5, 6)), lab in labels(Dims::new(4, 5, 6))) {
        let dir = tempfile::tempdir().unwrap();
        let (vp, lp) = (dir.path().join("v.mmv"), dir.path().join("l.mmv"));
        vol.save(&vp).unwrap();
        lab.save(&lp).unwrap();
        prop_assert_eq!(MultiModalVolume::load(&vp).unwrap(), vol.clone());
        prop_assert_eq!(LabelVolume::load(&lp).unwrap(), lab.clone());
        for axis in Axis::ALL {
            let mut rebuilt = MultiModalVolume::filled(vol.dims(), 3, 0.0).unwrap();
            let mut relabelled = LabelVolume::zeros(lab.dims()).unwrap();
            for k in 0..vol.dims().extent(axis) {
                rebuilt.insert_slice(&vol.extract_slice(axis, k).unwrap()).unwrap();
                relabelled.insert_slice(&lab.extract_slice(axis, k).unwrap()).unwrap();
            }
            prop_assert_eq!(rebuilt.data(), vol.data());
            prop_assert_eq!(&relabelled, &lab);
        }
    }
}

#[test]
fn report_json_lists_every_region() {
    let dims = Dims::new(2, 2, 2);
    let p = LabelVolume::new(dims, vec![0, 1, 2, 3, 4, 0, 0, 4]).unwrap();
    let report = ScoreReport::evaluate(&p, &p).unwrap();
    let json: serde_json::Value = serde_json::from_str(&report.to_json().unwrap()).unwrap();
    for kind in RegionKind::ALL {
        assert_eq!(report.get(kind).unwrap().dice, 1.0);
        assert!(json.to_string().contains(kind.name()));
    }
}
