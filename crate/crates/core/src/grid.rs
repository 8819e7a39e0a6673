//! Dense 3D scalar and label grids.
//!
//! Voxels are stored row-major with x fastest: `index = x + nx * (y + ny * z)`.

use crate::error::{Error, Result};

/// Voxels per axis, `[nx, ny, nz]`.
pub type Shape3 = [usize; 3];

pub fn voxel_count(shape: Shape3) -> usize {
    shape[0] * shape[1] * shape[2]
}

#[inline]
pub fn flat_index(shape: Shape3, x: usize, y: usize, z: usize) -> usize {
    x + shape[0] * (y + shape[1] * z)
}

/// Inverse of [`flat_index`].
#[inline]
pub fn coords(shape: Shape3, index: usize) -> [usize; 3] {
    let x = index % shape[0];
    let rest = index / shape[0];
    [x, rest % shape[1], rest / shape[1]]
}

fn check_shape(shape: Shape3) -> Result<()> {
    if shape.iter().any(|&n| n == 0) {
        return Err(Error::InvalidArgument(format!(
            "grid shape must be positive, got {shape:?}"
        )));
    }
    Ok(())
}

/// A scalar image on a regular grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub shape: Shape3,
    /// Millimetres per voxel along each axis.
    pub spacing: [f64; 3],
    pub data: Vec<f64>,
    pub modality: String,
}

impl Volume {
    pub fn new(
        shape: Shape3,
        spacing: [f64; 3],
        data: Vec<f64>,
        modality: impl Into<String>,
    ) -> Result<Self> {
        check_shape(shape)?;
        if data.len() != voxel_count(shape) {
            return Err(Error::InvalidArgument(format!(
                "volume data has {} voxels, shape {shape:?} needs {}",
                data.len(),
                voxel_count(shape)
            )));
        }
        if spacing.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument(format!(
                "spacing must be strictly positive, got {spacing:?}"
            )));
        }
        Ok(Volume {
            shape,
            spacing,
            data,
            modality: modality.into(),
        })
    }

    pub fn zeros(shape: Shape3) -> Self {
        Volume {
            shape,
            spacing: [1.0; 3],
            data: vec![0.0; voxel_count(shape)],
            modality: String::new(),
        }
    }

    /// Builds a volume by evaluating `f(x, y, z)` at every voxel.
    pub fn from_fn(shape: Shape3, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(voxel_count(shape));
        for z in 0..shape[2] {
            for y in 0..shape[1] {
                for x in 0..shape[0] {
                    data.push(f(x, y, z));
                }
            }
        }
        Volume {
            shape,
            spacing: [1.0; 3],
            data,
            modality: String::new(),
        }
    }

    pub fn with_modality(mut self, modality: impl Into<String>) -> Self {
        self.modality = modality.into();
        self
    }

    pub fn with_spacing(mut self, spacing: [f64; 3]) -> Self {
        self.spacing = spacing;
        self
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[flat_index(self.shape, x, y, z)]
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}

/// Integer class map; class 0 is background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVolume {
    pub shape: Shape3,
    pub data: Vec<u16>,
    pub n_classes: u16,
}

impl LabelVolume {
    pub fn new(shape: Shape3, data: Vec<u16>, n_classes: u16) -> Result<Self> {
        check_shape(shape)?;
        if data.len() != voxel_count(shape) {
            return Err(Error::InvalidArgument(format!(
                "label data has {} voxels, shape {shape:?} needs {}",
                data.len(),
                voxel_count(shape)
            )));
        }
        if n_classes == 0 {
            return Err(Error::InvalidArgument("n_classes must be positive".into()));
        }
        if let Some(bad) = data.iter().find(|&&c| c >= n_classes) {
            return Err(Error::InvalidArgument(format!(
                "class id {bad} out of range for {n_classes} classes"
            )));
        }
        Ok(LabelVolume {
            shape,
            data,
            n_classes,
        })
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> u16 {
        self.data[flat_index(self.shape, x, y, z)]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.n_classes as usize];
        for &c in &self.data {
            counts[c as usize] += 1;
        }
        counts
    }

    /// Labels as a real-valued volume, for writing through the float paths.
    pub fn to_volume(&self) -> Volume {
        Volume {
            shape: self.shape,
            spacing: [1.0; 3],
            data: self.data.iter().map(|&c| c as f64).collect(),
            modality: "labels".into(),
        }
    }
}

/// Nearest-rank percentile: the element at 1-based rank `ceil(p/100 * N)` of
/// the ascending sort.
pub fn nearest_rank_percentile(values: &[f64], percentile: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("percentile of empty data".into()));
    }
    if !(percentile > 0.0 && percentile <= 100.0) {
        return Err(Error::InvalidArgument(format!(
            "percentile must lie in (0, 100], got {percentile}"
        )));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    // Tolerance absorbs decimal percentiles such as 99.9 not being exact in
    // binary (0.999 * 1000 must give rank 999, not 1000).
    let exact = percentile * n as f64 / 100.0;
    let rank = (exact - 1e-9 * exact.max(1.0)).ceil() as usize;
    Ok(sorted[rank.clamp(1, n) - 1])
}

/// Clips at the upper `clip_percentile` and min-max scales to `[0, 1]`.
///
/// A volume that is constant after clipping maps to all zeros.
pub fn normalize_intensity(vol: &Volume, clip_percentile: f64) -> Result<Volume> {
    if vol.is_empty() {
        return Err(Error::InvalidArgument("cannot normalize an empty volume".into()));
    }
    if let Some(bad) = vol.data.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("volume intensity {bad}")));
    }
    let clip = nearest_rank_percentile(&vol.data, clip_percentile)?;
    let lo = vol.data.iter().fold(f64::INFINITY, |m, &v| m.min(v));
    let range = clip - lo;
    let data = if range > 0.0 {
        vol.data
            .iter()
            .map(|&v| ((v.min(clip) - lo) / range).clamp(0.0, 1.0))
            .collect()
    } else {
        vec![0.0; vol.len()]
    };
    Ok(Volume {
        data,
        ..vol.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn constant_volume_normalizes_to_zero() {
        let v = Volume::new([2, 2, 2], [1.0; 3], vec![3.5; 8], "A").unwrap();
        let n = normalize_intensity(&v, 99.9).unwrap();
        assert!(n.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn plain_min_max() {
        let v = Volume::new([3, 1, 1], [1.0; 3], vec![0.0, 5.0, 10.0], "A").unwrap();
        let n = normalize_intensity(&v, 100.0).unwrap();
        assert_eq!(n.data, vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn percentile_clip_matches_sort_oracle() {
        // 1..=1000 in scrambled order; rank ceil(0.999 * 1000) = 999 -> value 999.
        let values: Vec<f64> = (0..1000).map(|i| ((i * 617) % 1000 + 1) as f64).collect();
        let v = Volume::new([10, 10, 10], [1.0; 3], values.clone(), "A").unwrap();
        let n = normalize_intensity(&v, 99.9).unwrap();
        for (raw, out) in values.iter().zip(&n.data) {
            let expected = (raw.min(999.0) - 1.0) / 998.0;
            assert!((out - expected).abs() < 1e-15, "{raw}: {out} vs {expected}");
        }
    }

    #[test]
    fn empty_and_bad_inputs_rejected() {
        assert!(nearest_rank_percentile(&[], 50.0).is_err());
        assert!(nearest_rank_percentile(&[1.0], 0.0).is_err());
        assert!(Volume::new([2, 2, 2], [1.0, 0.0, 1.0], vec![0.0; 8], "A").is_err());
        assert!(Volume::new([2, 2, 2], [1.0; 3], vec![0.0; 7], "A").is_err());
        assert!(LabelVolume::new([2, 1, 1], vec![0, 3], 3).is_err());
    }

    #[test]
    fn index_round_trip() {
        let shape = [3, 4, 5];
        for i in 0..voxel_count(shape) {
            let [x, y, z] = coords(shape, i);
            assert_eq!(flat_index(shape, x, y, z), i);
        }
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent_and_bounded(
            data in prop::collection::vec(-1e3f64..1e3, 27),
            p in 50.0f64..=100.0,
        ) {
            let v = Volume::new([3, 3, 3], [1.0; 3], data, "A").unwrap();
            let once = normalize_intensity(&v, p).unwrap();
            prop_assert!(once.data.iter().all(|&x| (0.0..=1.0).contains(&x)));
            let twice = normalize_intensity(&once, p).unwrap();
            for (a, b) in once.data.iter().zip(&twice.data) {
                prop_assert!((a - b).abs() <= 1e-7);
            }
        }
    }
}
