//! Acquisition simulation for 2D scanning protocols: slice-profile blur,
//! decimation with offset augmentation, and training-pair synthesis for the
//! self-supervised super-resolution stage.
//!
//! The slice profile is a 1D Gaussian whose FWHM equals the scale factor
//! `r`. Degradation is blur-then-decimate only; no aliasing-suppression
//! filtering is added and the slice gap is taken as zero.

use crate::error::{Error, Result};
use crate::volume::{check_aligned, LabelVolume, Volume};
use ndarray::{Array3, Axis, Slice};

/// 1D Gaussian slice profile with FWHM equal to the scale factor.
#[derive(Debug, Clone)]
pub struct SliceProfile {
    pub r: usize,
    pub sigma: f64,
    /// Odd-length symmetric kernel, normalized to sum 1.
    pub kernel: Vec<f64>,
}

/// Builds the slice profile for scale factor `r`: `sigma = r / (2 sqrt(2 ln 2))`,
/// kernel truncated at `±ceil(3 sigma)` taps and renormalized.
pub fn make_slice_profile(r: usize) -> Result<SliceProfile> {
    if r < 1 {
        return Err(Error::InvalidArgument(
            "slice profile requires r >= 1".into(),
        ));
    }
    let sigma = r as f64 / (2.0 * (2.0 * std::f64::consts::LN_2).sqrt());
    let radius = (3.0 * sigma).ceil() as usize;
    let mut kernel: Vec<f64> = (-(radius as isize)..=radius as isize)
        .map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = kernel.iter().sum();
    for w in &mut kernel {
        *w /= sum;
    }
    Ok(SliceProfile { r, sigma, kernel })
}

/// Reflect index handling (edge sample duplicated: `a b c | c b a`).
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let j = if i < 0 {
        -i - 1
    } else if i >= n {
        2 * n - 1 - i
    } else {
        i
    };
    j.clamp(0, n - 1) as usize
}

/// 1D correlation of the profile along `axis` with reflect boundary
/// handling; shape is unchanged.
pub fn blur_axis(v: &Volume, p: &SliceProfile, axis: usize) -> Result<Volume> {
    if axis > 2 {
        return Err(Error::InvalidArgument(format!("axis {axis} out of range")));
    }
    let n = v.data.shape()[axis];
    if n < p.kernel.len() {
        return Err(Error::InvalidArgument(format!(
            "extent {n} along axis {axis} is shorter than the kernel ({} taps)",
            p.kernel.len()
        )));
    }
    let radius = (p.kernel.len() - 1) as isize / 2;
    let mut out = v.data.clone();
    let mut line = vec![0.0f64; n];
    let lanes_in: Vec<_> = v.data.lanes(Axis(axis)).into_iter().collect();
    for (src, mut dst) in lanes_in.into_iter().zip(out.lanes_mut(Axis(axis))) {
        for (l, s) in line.iter_mut().zip(src.iter()) {
            *l = *s as f64;
        }
        for (i, o) in dst.iter_mut().enumerate() {
            let mut acc = 0.0f64;
            for (k, w) in p.kernel.iter().enumerate() {
                let j = reflect(i as isize + k as isize - radius, n);
                acc += w * line[j];
            }
            *o = acc.clamp(0.0, 1.0) as f32;
        }
    }
    Volume::new(out, v.spacing)
}

fn decimate<T: Clone>(a: &Array3<T>, r: usize, axis: usize, offset: usize) -> Array3<T> {
    a.slice_axis(
        Axis(axis),
        Slice::new(offset as isize, None, r as isize),
    )
    .to_owned()
}

fn scaled_spacing(spacing: (f32, f32, f32), r: usize, axis: usize) -> (f32, f32, f32) {
    let mut s = [spacing.0, spacing.1, spacing.2];
    s[axis] *= r as f32;
    (s[0], s[1], s[2])
}

fn check_decimation(extent: usize, r: usize, axis: usize, offset: usize) -> Result<()> {
    if axis > 2 {
        return Err(Error::InvalidArgument(format!("axis {axis} out of range")));
    }
    if r < 1 {
        return Err(Error::InvalidArgument("r must be >= 1".into()));
    }
    if offset >= r {
        return Err(Error::InvalidArgument(format!(
            "offset {offset} outside [0, {r})"
        )));
    }
    if extent < r {
        return Err(Error::InvalidArgument(format!(
            "extent {extent} along axis {axis} is shorter than r = {r}"
        )));
    }
    Ok(())
}

/// Keeps indices `offset, offset + r, offset + 2r, ...` along `axis` and
/// multiplies the spacing along that axis by `r`.
pub fn downsample_axis(v: &Volume, r: usize, axis: usize, offset: usize) -> Result<Volume> {
    check_decimation(v.data.shape()[axis], r, axis, offset)?;
    Volume::new(
        decimate(&v.data, r, axis, offset),
        scaled_spacing(v.spacing, r, axis),
    )
}

/// Label decimation: values pass through untouched, no blur is ever applied.
pub fn downsample_axis_labels(
    l: &LabelVolume,
    r: usize,
    axis: usize,
    offset: usize,
) -> Result<LabelVolume> {
    check_decimation(l.data.shape()[axis], r, axis, offset)?;
    LabelVolume::new(
        decimate(&l.data, r, axis, offset),
        scaled_spacing(l.spacing, r, axis),
        l.num_classes,
    )
}

/// Full acquisition simulation: blur-then-decimate for the image, decimate
/// only for the labels. Bit-identical to applying the two public operations
/// in sequence.
pub fn degrade_pair(
    v: &Volume,
    l: &LabelVolume,
    r: usize,
    axis: usize,
    offset: usize,
) -> Result<(Volume, LabelVolume)> {
    check_aligned(v, l)?;
    let profile = make_slice_profile(r)?;
    let blurred = blur_axis(v, &profile, axis)?;
    Ok((
        downsample_axis(&blurred, r, axis, offset)?,
        downsample_axis_labels(l, r, axis, offset)?,
    ))
}

/// One aligned LR/HR training pair. Patches are stored in `(z, y, x)` order;
/// the degraded axis is recorded on the owning [`PairSet`].
#[derive(Debug, Clone)]
pub struct TrainPair {
    pub lr: Volume,
    pub hr: Volume,
    pub lr_labels: LabelVolume,
    pub hr_labels: LabelVolume,
}

/// LR/HR pairs for self-SR training, degraded along one in-plane axis.
#[derive(Debug, Clone)]
pub struct PairSet {
    pub pairs: Vec<TrainPair>,
    pub degradation_axis: usize,
    pub r: usize,
}

fn grid_starts(extent: usize, patch: usize, stride: usize) -> Vec<usize> {
    (0..)
        .map(|i| i * stride)
        .take_while(|&p| p + patch <= extent)
        .collect()
}

/// Synthesizes LR/HR pairs by degrading isotropic volumes along one in-plane
/// axis. `patch_lr` is the LR patch shape in `(z, y, x)` order; its extent
/// along the degraded axis is multiplied by `r` in the HR patch. Patches tile
/// the volume with stride equal to the patch extent.
pub fn make_selfsr_pairs_along(
    v: &Volume,
    l: &LabelVolume,
    r: usize,
    patch_lr: (usize, usize, usize),
    axis: usize,
) -> Result<PairSet> {
    check_aligned(v, l)?;
    if axis == 0 || axis > 2 {
        return Err(Error::InvalidArgument(
            "pair synthesis degrades an in-plane axis (1 or 2)".into(),
        ));
    }
    let sp = v.spacing;
    if (sp.0 - sp.1).abs() > 1e-5 * sp.0 || (sp.0 - sp.2).abs() > 1e-5 * sp.0 {
        return Err(Error::InvalidArgument(format!(
            "pair synthesis expects an isotropic volume, got spacing {sp:?}"
        )));
    }
    let mut patch_hr = [patch_lr.0, patch_lr.1, patch_lr.2];
    patch_hr[axis] *= r;
    let shape = v.shape();
    let extents = [shape.0, shape.1, shape.2];
    for a in 0..3 {
        if patch_hr[a] > extents[a] {
            return Err(Error::InvalidArgument(format!(
                "patch extent {} exceeds volume extent {} along axis {a}",
                patch_hr[a], extents[a]
            )));
        }
    }
    let profile = make_slice_profile(r)?;
    if patch_hr[axis] < profile.kernel.len() {
        return Err(Error::InvalidArgument(format!(
            "HR patch extent {} along axis {axis} is shorter than the slice profile",
            patch_hr[axis]
        )));
    }
    let starts: Vec<Vec<usize>> = (0..3)
        .map(|a| grid_starts(extents[a], patch_hr[a], patch_hr[a]))
        .collect();
    let mut pairs = Vec::new();
    for &z0 in &starts[0] {
        for &y0 in &starts[1] {
            for &x0 in &starts[2] {
                let region = ndarray::s![
                    z0..z0 + patch_hr[0],
                    y0..y0 + patch_hr[1],
                    x0..x0 + patch_hr[2]
                ];
                let hr = Volume::new(v.data.slice(region).to_owned(), sp)?;
                let hr_labels =
                    LabelVolume::new(l.data.slice(region).to_owned(), sp, l.num_classes)?;
                let blurred = blur_axis(&hr, &profile, axis)?;
                let lr = downsample_axis(&blurred, r, axis, 0)?;
                let lr_labels = downsample_axis_labels(&hr_labels, r, axis, 0)?;
                pairs.push(TrainPair {
                    lr,
                    hr,
                    lr_labels,
                    hr_labels,
                });
            }
        }
    }
    Ok(PairSet {
        pairs,
        degradation_axis: axis,
        r,
    })
}

/// Pair synthesis along the x axis (the default in-plane degradation axis).
pub fn make_selfsr_pairs(
    v: &Volume,
    l: &LabelVolume,
    r: usize,
    patch_lr: (usize, usize, usize),
) -> Result<PairSet> {
    make_selfsr_pairs_along(v, l, r, patch_lr, 2)
}

/// Degrades a pseudo-HR case into `r` LR pairs by shifting the decimation
/// start index along the through-plane axis, multiplying the usable LR
/// training data by `r`.
pub fn generate_pseudo_lr_set(
    hr_img: &Volume,
    hr_labels: &LabelVolume,
    r: usize,
) -> Result<Vec<(Volume, LabelVolume)>> {
    (0..r)
        .map(|offset| degrade_pair(hr_img, hr_labels, r, 0, offset))
        .collect()
}
