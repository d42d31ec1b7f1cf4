//! Synthetic annotated-volume generator with hidden HR ground truth.
//!
//! Phantoms are smooth low-frequency backgrounds with brighter ellipsoidal
//! structures. The ellipsoid intensity falls off over roughly one voxel at
//! the boundary while the label stays crisp, so the label edge sits inside
//! an intensity ramp — the regime where boundary-uncertainty machinery has
//! something to do. Degradation of benchmark cases goes through the
//! [`crate::degrade`] code path verbatim.

use crate::degrade::degrade_pair;
use crate::error::{Error, Result};
use crate::volume::{LabelVolume, Volume};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Parameters of one synthetic case.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    /// Isotropic HR grid extent per axis.
    pub size: usize,
    /// Range of ellipsoid counts, inclusive.
    pub n_blobs: (usize, usize),
    /// Amplitude of the smooth background texture.
    pub intensity_texture: f32,
    /// Acceptable foreground fraction band.
    pub fg_fraction: (f64, f64),
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            size: 64,
            n_blobs: (1, 3),
            intensity_texture: 0.15,
            fg_fraction: (0.01, 0.15),
            seed: 0,
        }
    }
}

/// Smooth random field: a sum of random-direction cosines with wavelengths
/// between roughly half the grid and a few slice thicknesses, rescaled to
/// `[0, 1]`. The field has curvature everywhere, so slice-profile blur
/// attenuates it measurably — interpolation alone cannot restore it.
fn smooth_background(size: usize, amplitude: f32, rng: &mut ChaCha8Rng) -> Array3<f32> {
    let modes = 10;
    let mut field = Array3::<f32>::zeros((size, size, size));
    for _ in 0..modes {
        // Log-uniform wavelength between size/10 and size/3 voxels.
        let lambda = (size as f32 / 10.0)
            * (10.0f32 / 3.0).powf(rng.gen::<f32>());
        let k = 2.0 * std::f32::consts::PI / lambda;
        // Random direction on the sphere.
        let theta = rng.gen::<f32>() * 2.0 * std::f32::consts::PI;
        let zc = rng.gen_range(-1.0f32..1.0);
        let s = (1.0 - zc * zc).sqrt();
        let dir = [zc, s * theta.cos(), s * theta.sin()];
        let phase = rng.gen::<f32>() * 2.0 * std::f32::consts::PI;
        let amp = rng.gen_range(0.5f32..1.0);
        for ((z, y, x), v) in field.indexed_iter_mut() {
            let proj = dir[0] * z as f32 + dir[1] * y as f32 + dir[2] * x as f32;
            *v += amp * (k * proj + phase).cos();
        }
    }
    let min = field.iter().cloned().fold(f32::INFINITY, f32::min);
    let max = field.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let span = (max - min).max(1e-6);
    field.mapv(|v| 0.08 + amplitude * (v - min) / span)
}

struct Ellipsoid {
    center: [f32; 3],
    radii: [f32; 3],
    level: f32,
}

fn draw_ellipsoids(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Vec<Ellipsoid> {
    let n = rng.gen_range(spec.n_blobs.0..=spec.n_blobs.1);
    let s = spec.size as f32;
    (0..n)
        .map(|_| {
            let radii = [
                rng.gen_range(0.10 * s..0.22 * s),
                rng.gen_range(0.10 * s..0.22 * s),
                rng.gen_range(0.10 * s..0.22 * s),
            ];
            // Keep the full extent inside the grid.
            let center = [
                rng.gen_range(radii[0] + 1.0..s - radii[0] - 1.0),
                rng.gen_range(radii[1] + 1.0..s - radii[1] - 1.0),
                rng.gen_range(radii[2] + 1.0..s - radii[2] - 1.0),
            ];
            Ellipsoid {
                center,
                radii,
                level: rng.gen_range(0.6..0.9),
            }
        })
        .collect()
}

/// Generates one HR phantom: textured background, feathered-intensity
/// ellipsoids, crisp binary labels. Deterministic per seed; retries with
/// derived sub-seeds until the foreground fraction lands inside the
/// configured band.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(Volume, LabelVolume)> {
    if spec.size < 16 {
        return Err(Error::InvalidArgument("phantom size must be >= 16".into()));
    }
    if spec.n_blobs.0 < 1 || spec.n_blobs.1 < spec.n_blobs.0 {
        return Err(Error::InvalidArgument(
            "n_blobs range must be non-empty and start at >= 1".into(),
        ));
    }
    let n_total = (spec.size * spec.size * spec.size) as f64;
    for attempt in 0..64u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(0x9e3779b9).wrapping_add(attempt));
        let mut img = smooth_background(spec.size, spec.intensity_texture, &mut rng);
        let mut lab = Array3::<u8>::zeros(img.dim());
        let blobs = draw_ellipsoids(spec, &mut rng);
        for blob in &blobs {
            let r_max = blob.radii.iter().cloned().fold(0.0f32, f32::max);
            // Logistic feather at most one voxel wide in any direction.
            let steep = r_max;
            for ((z, y, x), v) in img.indexed_iter_mut() {
                let dz = (z as f32 - blob.center[0]) / blob.radii[0];
                let dy = (y as f32 - blob.center[1]) / blob.radii[1];
                let dx = (x as f32 - blob.center[2]) / blob.radii[2];
                let d = (dz * dz + dy * dy + dx * dx).sqrt();
                if d <= 1.0 {
                    lab[[z, y, x]] = 1;
                }
                if d < 2.0 {
                    let w = 1.0 / (1.0 + ((d - 1.0) * steep).exp());
                    *v = *v + w * (blob.level - *v);
                }
            }
        }
        let fg = lab.iter().filter(|&&v| v == 1).count() as f64 / n_total;
        if fg >= spec.fg_fraction.0 && fg <= spec.fg_fraction.1 {
            let img = img.mapv(|v| v.clamp(0.0, 1.0));
            let volume = Volume::new(img, (1.0, 1.0, 1.0))?;
            let labels = LabelVolume::new(lab, (1.0, 1.0, 1.0), 2)?;
            return Ok((volume, labels));
        }
    }
    Err(Error::InvalidArgument(format!(
        "could not hit foreground fraction {:?} for seed {}",
        spec.fg_fraction, spec.seed
    )))
}

/// One benchmark case in the manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseEntry {
    pub id: String,
    pub split: String,
    pub lr_image: PathBuf,
    pub lr_labels: PathBuf,
    pub hr_image: PathBuf,
    pub hr_labels: PathBuf,
}

/// Benchmark manifest: visible LR training data under `train/`, hidden HR
/// ground truth under `ground_truth/`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkManifest {
    pub r: usize,
    pub seed: u64,
    pub hr_size: usize,
    pub cases: Vec<CaseEntry>,
}

impl BenchmarkManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| Error::io(path.as_ref(), e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn train_cases(&self) -> impl Iterator<Item = &CaseEntry> {
        self.cases.iter().filter(|c| c.split == "train")
    }

    pub fn val_cases(&self) -> impl Iterator<Item = &CaseEntry> {
        self.cases.iter().filter(|c| c.split == "val")
    }
}

/// Generates `n` phantom cases, degrades each one along the through-plane
/// axis (offset 0), and writes the dataset to `out_dir`:
///
/// ```text
/// out_dir/
///   manifest.json
///   train/case_XXX_{image,labels}.nii.gz      # visible LR data
///   ground_truth/case_XXX_{image,labels}.nii.gz  # hidden HR data
/// ```
///
/// The last `max(1, n/6)` cases form the validation split. Training code must
/// only ever read from `train/`.
pub fn make_benchmark(
    out_dir: impl AsRef<Path>,
    n: usize,
    r: usize,
    seed: u64,
    base: &PhantomSpec,
) -> Result<BenchmarkManifest> {
    if n < 2 {
        return Err(Error::InvalidArgument("benchmark needs n >= 2".into()));
    }
    let out_dir = out_dir.as_ref();
    let train_dir = out_dir.join("train");
    let gt_dir = out_dir.join("ground_truth");
    std::fs::create_dir_all(&train_dir).map_err(|e| Error::io(&train_dir, e))?;
    std::fs::create_dir_all(&gt_dir).map_err(|e| Error::io(&gt_dir, e))?;

    let n_val = (n / 6).max(1);
    let mut cases = Vec::with_capacity(n);
    for i in 0..n {
        let spec = PhantomSpec {
            seed: seed.wrapping_add(1000 * i as u64),
            ..base.clone()
        };
        let (hr_img, hr_lab) = generate_phantom(&spec)?;
        let (lr_img, lr_lab) = degrade_pair(&hr_img, &hr_lab, r, 0, 0)?;
        let id = format!("case_{i:03}");
        let entry = CaseEntry {
            id: id.clone(),
            split: if i >= n - n_val { "val" } else { "train" }.into(),
            lr_image: train_dir.join(format!("{id}_image.nii.gz")),
            lr_labels: train_dir.join(format!("{id}_labels.nii.gz")),
            hr_image: gt_dir.join(format!("{id}_image.nii.gz")),
            hr_labels: gt_dir.join(format!("{id}_labels.nii.gz")),
        };
        crate::nifti::save_volume(&lr_img, &entry.lr_image)?;
        crate::nifti::save_labels(&lr_lab, &entry.lr_labels)?;
        crate::nifti::save_volume(&hr_img, &entry.hr_image)?;
        crate::nifti::save_labels(&hr_lab, &entry.hr_labels)?;
        cases.push(entry);
    }
    let manifest = BenchmarkManifest {
        r,
        seed,
        hr_size: base.size,
        cases,
    };
    let path = out_dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
