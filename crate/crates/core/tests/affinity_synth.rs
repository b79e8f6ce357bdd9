//! Affinity analysis properties and synthetic-data generation.

use std::collections::BTreeSet;

use proptest::prelude::*;

use mti_core::affinity::{
    affinity_bits, affinity_curve, correspondence, dataset_curve, sample_rasters, AffinityBits, AffinityConfig, Raster,
};
use mti_core::synth::{generate_sample, sample_path, write_dataset, Dataset, GenConfig, SceneSample};
use mti_core::task::TaskKind;
use mti_core::Error;

fn label_raster(h: usize, w: usize) -> impl Strategy<Value = Raster> {
    prop::collection::vec(0i64..3, h * w).prop_map(move |data| Raster::Labels { h, w, data })
}

fn depth_raster(h: usize, w: usize) -> impl Strategy<Value = Raster> {
    prop::collection::vec(0.5f64..4.0, h * w).prop_map(move |data| Raster::Real { h, w, data })
}

/// Offset index of `(-dy, -dx)` given the index of `(dy, dx)`.
fn mirror(cfg: &AffinityConfig, o: usize) -> usize {
    let offs = cfg.offsets();
    let (dy, dx) = offs[o];
    offs.iter().position(|&p| p == (-dy, -dx)).unwrap()
}

fn assert_symmetric(bits: &AffinityBits, cfg: &AffinityConfig, d: usize) -> Result<(), TestCaseError> {
    let offs = cfg.offsets();
    for y in 0..bits.h {
        for x in 0..bits.w {
            for (o, &(dy, dx)) in offs.iter().enumerate() {
                let i = bits.index(y, x, o);
                if !bits.valid[i] {
                    continue;
                }
                let qy = (y as isize + dy * d as isize) as usize;
                let qx = (x as isize + dx * d as isize) as usize;
                let j = bits.index(qy, qx, mirror(cfg, o));
                prop_assert!(bits.valid[j]);
                prop_assert_eq!(bits.similar[i], bits.similar[j]);
            }
        }
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn affinity_bits_are_symmetric(
        labels in label_raster(9, 7), depth in depth_raster(9, 7), d in prop::sample::select(vec![1usize, 2, 3]),
    ) {
        let cfg = AffinityConfig::default();
        assert_symmetric(&affinity_bits(&labels, TaskKind::Categorical(3), &cfg, d).unwrap(), &cfg, d)?;
        assert_symmetric(&affinity_bits(&depth, TaskKind::Regression, &cfg, d).unwrap(), &cfg, d)?;
    }

    #[test]
    fn correspondence_is_symmetric_and_bounded(
        labels in label_raster(8, 8), depth in depth_raster(8, 8), d in 1usize..4,
    ) {
        let cfg = AffinityConfig::default();
        let a = affinity_bits(&labels, TaskKind::Categorical(3), &cfg, d).unwrap();
        let b = affinity_bits(&depth, TaskKind::Regression, &cfg, d).unwrap();
        let (ab, n_ab) = correspondence(&a, &b).unwrap();
        let (ba, n_ba) = correspondence(&b, &a).unwrap();
        prop_assert_eq!(ab, ba);
        prop_assert_eq!(n_ab, n_ba);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(correspondence(&a, &a).unwrap().0, 1.0);
    }

    #[test]
    fn upscaling_by_the_dilation_preserves_bits(labels in label_raster(6, 5), d in prop::sample::select(vec![2usize, 3])) {
        // Repeating every pixel d times along both axes and sampling centres
        // on the coarse grid reproduces the dilation-1 bits of the original.
        let Raster::Labels { h, w, data } = &labels else { unreachable!() };
        let (bh, bw) = (h * d, w * d);
        let big: Vec<i64> = (0..bh * bw).map(|p| data[(p / bw / d) * w + (p % bw) / d]).collect();
        let big = Raster::Labels { h: bh, w: bw, data: big };
        let small = affinity_bits(&labels, TaskKind::Categorical(3), &AffinityConfig::default(), 1).unwrap();
        let cfg = AffinityConfig { stride: d, ..AffinityConfig::default() };
        let dilated = affinity_bits(&big, TaskKind::Categorical(3), &cfg, d).unwrap();
        for y in 0..*h {
            for x in 0..*w {
                for o in 0..small.offsets {
                    let i = small.index(y, x, o);
                    let j = dilated.index(y * d, x * d, o);
                    prop_assert_eq!(small.valid[i], dilated.valid[j]);
                    prop_assert_eq!(small.similar[i], dilated.similar[j]);
                }
            }
        }
    }

    #[test]
    fn corrupted_samples_never_panic(pos in 0usize..(20 + 64 * 64 * 30), byte in any::<u8>(), cut in any::<bool>()) {
        let bytes = generate_sample(&GenConfig::default(), 3).unwrap().to_bytes();
        let result = if cut {
            SceneSample::from_bytes(&bytes[..pos])
        } else {
            let mut bad = bytes.clone();
            bad[pos] = byte;
            SceneSample::from_bytes(&bad)
        };
        if cut {
            let is_data_error = matches!(result, Err(Error::Data { .. }));
            prop_assert!(is_data_error);
        } else if let Ok(s) = result {
            prop_assert_eq!(s.to_bytes().len(), bytes.len());
        }
    }

    #[test]
    fn generated_samples_hold_invariants_and_round_trip(index in 0u64..10_000, seed in 0u64..4) {
        let cfg = GenConfig { seed, ..GenConfig::default() };
        let s = generate_sample(&cfg, index).unwrap();
        s.check_invariants().unwrap();
        prop_assert_eq!(&generate_sample(&cfg, index).unwrap(), &s);
        prop_assert_eq!(SceneSample::from_bytes(&s.to_bytes()).unwrap(), s);
    }
}

#[test]
fn checkerboard_correspondence_with_constant_map() {
    // On a checkerboard, axial neighbours differ and diagonal ones agree, so a
    // constant map agrees on the 4 diagonal offsets out of 8 at odd dilations
    // and on all of them at even ones.
    let (h, w) = (12, 12);
    let board = Raster::Labels { h, w, data: (0..h * w).map(|p| ((p / w + p % w) % 2) as i64).collect() };
    let flat = Raster::Labels { h, w, data: vec![0; h * w] };
    let cfg = AffinityConfig::default();
    for d in [1usize, 2, 3] {
        let a = affinity_bits(&board, TaskKind::Binary, &cfg, d).unwrap();
        let b = affinity_bits(&flat, TaskKind::Binary, &cfg, d).unwrap();
        let mut axial_valid = 0usize;
        let mut diag_valid = 0usize;
        for (o, &(dy, dx)) in cfg.offsets().iter().enumerate() {
            for y in 0..h {
                for x in 0..w {
                    let i = a.index(y, x, o);
                    if a.valid[i] {
                        if dy == 0 || dx == 0 {
                            axial_valid += 1;
                        } else {
                            diag_valid += 1;
                        }
                    }
                }
            }
        }
        let want = if d % 2 == 0 { 1.0 } else { diag_valid as f64 / (axial_valid + diag_valid) as f64 };
        assert_eq!(correspondence(&a, &b).unwrap().0, want, "dilation {d}");
    }
}

#[test]
fn real_curves_vary_with_dilation() {
    let samples = Dataset::from_config(&GenConfig::default(), 16).unwrap().samples;
    let tasks: Vec<String> = ["seg", "depth", "edge"].map(String::from).to_vec();
    let rows = dataset_curve(&samples, &tasks, &AffinityConfig::default()).unwrap();
    assert_eq!(rows.len(), 3 * 4);
    for pair in rows.chunks(4) {
        let values: Vec<f64> = pair.iter().map(|r| r.correspondence).collect();
        assert!(values.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(values.windows(2).any(|w| w[0] != w[1]), "{:?} is flat", pair[0]);
    }
    let single = affinity_curve(&sample_rasters(&samples[0], &tasks).unwrap(), &AffinityConfig::default()).unwrap();
    assert_eq!(single.len(), rows.len());
    assert!(sample_rasters(&samples[0], &["normals".to_string()]).is_err());
}

#[test]
fn class_histogram_covers_every_class() {
    let cfg = GenConfig::default();
    let mut seen = BTreeSet::new();
    for i in 0..200 {
        seen.extend(generate_sample(&cfg, i).unwrap().seg);
    }
    assert_eq!(seen, (0..cfg.num_classes as u8).collect());
}

#[test]
fn dataset_directory_round_trip_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = GenConfig { seed: 5, ..GenConfig::default() };
    let mut ticks = 0;
    write_dataset(dir.path(), &cfg, 6, |_| ticks += 1).unwrap();
    assert_eq!(ticks, 6);
    let ds = Dataset::open(dir.path()).unwrap();
    assert_eq!(ds.config, cfg);
    assert_eq!(ds.samples, Dataset::from_config(&cfg, 6).unwrap().samples);

    let path = sample_path(dir.path(), 2);
    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() / 2);
    std::fs::write(&path, bytes).unwrap();
    let err = Dataset::open(dir.path()).unwrap_err();
    assert!(matches!(err, Error::Data { .. }));
    assert!(err.to_string().contains("sample_000002"));

    assert!(matches!(Dataset::open(dir.path().join("missing")), Err(Error::Config(_))));
}
