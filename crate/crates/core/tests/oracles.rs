//! Brute-force oracles for composition, Jacobians, overlap and fold counts,
//! cycle identities and NIfTI scaling.

mod common;

use common::oracle::{self, idx, smooth_field, SHAPE};
use cyclereg::grid::Volume;
use cyclereg::io::load_volume;
use cyclereg::objectives::{gradcycon, m2m_loss, SimConfig};
use cyclereg::transform::{compose, DisplacementField};

#[test]
fn compose_matches_pointwise_oracle() {
    for seed in 0..5 {
        let e = oracle::compose_error(seed);
        assert!(e <= 1e-6, "seed {seed}: {e:e}");
    }
}

#[test]
fn jacobian_matches_finite_difference_oracle() {
    for seed in 0..5 {
        let e = oracle::jacobian_error(seed);
        assert!(e <= 1e-10, "seed {seed}: {e:e}");
    }
}

#[test]
fn negative_jacobian_count_matches_oracle() {
    let (wrong, folding) = oracle::negjac_mismatches();
    assert_eq!(wrong, 0);
    assert!(folding > 0);
}

#[test]
fn dice_matches_counting_oracle() {
    assert_eq!(oracle::dice_mismatches(), 0);
}

#[test]
fn aligned_bridge_equals_identity_bridge() {
    let zero = DisplacementField::identity(SHAPE);
    let (st, ts2, t2s) = (smooth_field(1, 1.5), smooth_field(2, 1.5), smooth_field(3, 1.5));
    assert_eq!(
        gradcycon(&st, &ts2, None, &t2s).unwrap(),
        gradcycon(&st, &ts2, Some(&zero), &t2s).unwrap()
    );
    assert_eq!(gradcycon(&zero, &zero, Some(&zero), &zero).unwrap(), 0.0);

    let img = |seed: u64, m: &str| {
        let t = common::smooth_tensor(seed, 1, SHAPE, 0.5, 0.5);
        Volume::new(SHAPE, [1.0; 3], t.data, m).unwrap()
    };
    let (s, t, s2, t2) = (img(4, "A"), img(5, "B"), img(6, "A"), img(7, "B"));
    let cfg = SimConfig {
        radius: 1,
        ..SimConfig::default()
    };
    assert_eq!(
        m2m_loss(&s, &t, &s2, &t2, &st, &ts2, None, &t2s, &cfg).unwrap(),
        m2m_loss(&s, &t, &s2, &t2, &st, &ts2, Some(&zero), &t2s, &cfg).unwrap()
    );
}

#[test]
fn opposite_translations_close_the_cycle_inside() {
    // Fields that keep every sample inside the grid compose exactly.
    let shift = |d: [f64; 3]| DisplacementField::from_fn(SHAPE, |_, _, _| d);
    let a = shift([0.5, -0.25, 0.0]);
    let b = shift([-0.5, 0.25, 0.0]);
    let c = compose(&a, &b).unwrap();
    for z in 0..6 {
        for y in 1..5 {
            for x in 1..5 {
                assert_eq!(c.at(idx(x, y, z)), [0.0; 3]);
            }
        }
    }
}

/// Minimal little-endian NIfTI-1 int16 file with intensity scaling.
fn int16_nifti(dims: [i16; 3], values: &[i16], slope: f32, inter: f32) -> Vec<u8> {
    let mut h = vec![0u8; 352];
    h[0..4].copy_from_slice(&348i32.to_le_bytes());
    let dim = [3i16, dims[0], dims[1], dims[2], 1, 1, 1, 1];
    for (i, d) in dim.iter().enumerate() {
        h[40 + 2 * i..42 + 2 * i].copy_from_slice(&d.to_le_bytes());
    }
    h[70..72].copy_from_slice(&4i16.to_le_bytes());
    h[72..74].copy_from_slice(&16i16.to_le_bytes());
    for (i, p) in [1.0f32, 1.5, 2.0, 0.5].iter().enumerate() {
        h[76 + 4 * i..80 + 4 * i].copy_from_slice(&p.to_le_bytes());
    }
    h[108..112].copy_from_slice(&352f32.to_le_bytes());
    h[112..116].copy_from_slice(&slope.to_le_bytes());
    h[116..120].copy_from_slice(&inter.to_le_bytes());
    h[344..348].copy_from_slice(b"n+1\0");
    for v in values {
        h.extend_from_slice(&v.to_le_bytes());
    }
    h
}

#[test]
fn int16_nifti_applies_slope_and_intercept() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scaled.nii");
    let raw: Vec<i16> = (0..24).map(|k| k * 7 - 80).collect();
    std::fs::write(&path, int16_nifti([2, 3, 4], &raw, 2.0, 1.0)).unwrap();
    let v = load_volume(&path).unwrap();
    assert_eq!(v.shape, [2, 3, 4]);
    assert_eq!(v.spacing, [1.5, 2.0, 0.5]);
    let expect: Vec<f64> = raw.iter().map(|&r| 2.0 * r as f64 + 1.0).collect();
    assert_eq!(v.data, expect);
    // x varies fastest on disk.
    assert_eq!(v.get(1, 0, 0), 2.0 * raw[1] as f64 + 1.0);
    assert_eq!(v.get(0, 1, 0), 2.0 * raw[2] as f64 + 1.0);

    // A zero slope means "unscaled".
    std::fs::write(&path, int16_nifti([2, 3, 4], &raw, 0.0, 5.0)).unwrap();
    let v = load_volume(&path).unwrap();
    assert_eq!(v.data, raw.iter().map(|&r| r as f64).collect::<Vec<_>>());
}
