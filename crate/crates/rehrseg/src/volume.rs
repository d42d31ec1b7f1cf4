//! Annotated-volume carrier types.
//!
//! A [`Volume`] is a dense 3D scalar grid with explicit anisotropic voxel
//! spacing; a [`LabelVolume`] is an integer class grid aligned to it. Array
//! index order is `(z, y, x)` throughout the crate, with `z` being the
//! through-plane (slice-stacking) axis. Spacing is stored as `(sz, sy, sx)`
//! in millimeters.

use crate::error::{Error, Result};
use ndarray::Array3;

/// Dense 3D intensity grid. Intensities are kept within `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub data: Array3<f32>,
    /// Voxel spacing `(sz, sy, sx)` in millimeters.
    pub spacing: (f32, f32, f32),
}

impl Volume {
    /// Builds a volume after checking the type invariants: positive spacing,
    /// finite data, intensities within `[0, 1]`.
    pub fn new(data: Array3<f32>, spacing: (f32, f32, f32)) -> Result<Self> {
        if spacing.0 <= 0.0 || spacing.1 <= 0.0 || spacing.2 <= 0.0 {
            return Err(Error::InvalidVolume(format!(
                "spacing components must be positive, got {spacing:?}"
            )));
        }
        if let Some((idx, _)) = data.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFiniteVoxel(idx.0, idx.1, idx.2));
        }
        if data.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::InvalidVolume(
                "intensities must lie within [0, 1]".into(),
            ));
        }
        Ok(Volume { data, spacing })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        let d = self.data.dim();
        (d.0, d.1, d.2)
    }
}

/// Integer class-id grid aligned to a [`Volume`].
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    pub data: Array3<u8>,
    /// Voxel spacing `(sz, sy, sx)` in millimeters.
    pub spacing: (f32, f32, f32),
    pub num_classes: usize,
}

impl LabelVolume {
    /// Builds a label volume, checking every value is below `num_classes`.
    pub fn new(data: Array3<u8>, spacing: (f32, f32, f32), num_classes: usize) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::InvalidVolume("num_classes must be positive".into()));
        }
        if spacing.0 <= 0.0 || spacing.1 <= 0.0 || spacing.2 <= 0.0 {
            return Err(Error::InvalidVolume(format!(
                "spacing components must be positive, got {spacing:?}"
            )));
        }
        if let Some((idx, &v)) = data.indexed_iter().find(|(_, &v)| v as usize >= num_classes) {
            return Err(Error::InvalidVolume(format!(
                "label {v} at {idx:?} exceeds num_classes {num_classes}"
            )));
        }
        Ok(LabelVolume {
            data,
            spacing,
            num_classes,
        })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        let d = self.data.dim();
        (d.0, d.1, d.2)
    }

    /// Binary foreground mask for one class.
    pub fn mask(&self, class_id: u8) -> Array3<bool> {
        self.data.mapv(|v| v == class_id)
    }
}

/// Checks that an image and its annotation agree in shape.
pub fn check_aligned(v: &Volume, l: &LabelVolume) -> Result<()> {
    if v.shape() != l.shape() {
        return Err(Error::ShapeMismatch(format!(
            "image shape {:?} vs label shape {:?}",
            v.shape(),
            l.shape()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn volume_rejects_bad_spacing() {
        let data = Array3::<f32>::zeros((2, 2, 2));
        assert!(Volume::new(data, (0.0, 1.0, 1.0)).is_err());
    }

    #[test]
    fn volume_rejects_nan_with_index() {
        let mut data = Array3::<f32>::zeros((3, 3, 3));
        data[[1, 2, 0]] = f32::NAN;
        match Volume::new(data, (1.0, 1.0, 1.0)) {
            Err(Error::NonFiniteVoxel(1, 2, 0)) => {}
            other => panic!("expected NonFiniteVoxel(1,2,0), got {other:?}"),
        }
    }

    #[test]
    fn volume_rejects_out_of_range() {
        let mut data = Array3::<f32>::zeros((2, 2, 2));
        data[[0, 0, 0]] = 1.5;
        assert!(Volume::new(data, (1.0, 1.0, 1.0)).is_err());
    }

    #[test]
    fn labels_reject_class_overflow() {
        let mut data = Array3::<u8>::zeros((2, 2, 2));
        data[[1, 1, 1]] = 3;
        assert!(LabelVolume::new(data, (1.0, 1.0, 1.0), 2).is_err());
    }
}
