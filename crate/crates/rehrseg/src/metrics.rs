//! Evaluation metrics: Dice overlap, 95th-percentile symmetric surface
//! distance, PSNR, slicewise SSIM, and an uncertainty-quality diagnostic.

use crate::error::{Error, Result};
use crate::volume::{LabelVolume, Volume};
use ndarray::{Array2, Array3};

/// Dice similarity coefficient `2|A∩B| / (|A| + |B|)` for one class.
/// Both masks empty is defined as 1.0.
pub fn dice(a: &LabelVolume, b: &LabelVolume, class_id: u8) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "dice: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut inter = 0u64;
    let mut na = 0u64;
    let mut nb = 0u64;
    for (&va, &vb) in a.data.iter().zip(b.data.iter()) {
        let fa = va == class_id;
        let fb = vb == class_id;
        na += fa as u64;
        nb += fb as u64;
        inter += (fa && fb) as u64;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// Surface voxels of a binary mask: foreground voxels with at least one
/// 6-neighbor that is background or outside the grid.
pub fn surface_voxels(mask: &Array3<bool>) -> Vec<(usize, usize, usize)> {
    let (nz, ny, nx) = mask.dim();
    let mut out = Vec::new();
    let neighbors: [(isize, isize, isize); 6] = [
        (-1, 0, 0),
        (1, 0, 0),
        (0, -1, 0),
        (0, 1, 0),
        (0, 0, -1),
        (0, 0, 1),
    ];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if !mask[[z, y, x]] {
                    continue;
                }
                let mut boundary = false;
                for (dz, dy, dx) in neighbors {
                    let (zz, yy, xx) = (z as isize + dz, y as isize + dy, x as isize + dx);
                    if zz < 0
                        || yy < 0
                        || xx < 0
                        || zz >= nz as isize
                        || yy >= ny as isize
                        || xx >= nx as isize
                        || !mask[[zz as usize, yy as usize, xx as usize]]
                    {
                        boundary = true;
                        break;
                    }
                }
                if boundary {
                    out.push((z, y, x));
                }
            }
        }
    }
    out
}

/// One pass of the separable squared distance transform along an axis:
/// `out[i] = min_j (in[j] + w * (i - j)^2)` by direct scan. Exact, and the
/// accumulation order matches the brute-force all-pairs expression so both
/// routes produce bit-identical results.
fn edt_pass(line_in: &[f64], line_out: &mut [f64], w: f64) {
    for (i, out) in line_out.iter_mut().enumerate() {
        let mut best = f64::INFINITY;
        for (j, &v) in line_in.iter().enumerate() {
            if v.is_infinite() {
                continue;
            }
            let d = i as f64 - j as f64;
            let cand = v + w * d * d;
            if cand < best {
                best = cand;
            }
        }
        *out = best;
    }
}

/// Squared Euclidean distance (mm^2) from every grid point to the nearest
/// point in `sites`, under anisotropic spacing. Accumulation order is the
/// z term, then y, then x.
fn squared_distance_field(
    shape: (usize, usize, usize),
    sites: &[(usize, usize, usize)],
    spacing: (f32, f32, f32),
) -> Array3<f64> {
    let (nz, ny, nx) = shape;
    let mut field = Array3::<f64>::from_elem(shape, f64::INFINITY);
    for &(z, y, x) in sites {
        field[[z, y, x]] = 0.0;
    }
    let weights = [
        (spacing.0 as f64) * (spacing.0 as f64),
        (spacing.1 as f64) * (spacing.1 as f64),
        (spacing.2 as f64) * (spacing.2 as f64),
    ];
    let maxlen = nz.max(ny).max(nx);
    let mut buf_in = vec![0.0f64; maxlen];
    let mut buf_out = vec![0.0f64; maxlen];
    for (axis, &w) in weights.iter().enumerate() {
        let n = field.shape()[axis];
        for mut lane in field.lanes_mut(ndarray::Axis(axis)) {
            for (b, v) in buf_in.iter_mut().zip(lane.iter()) {
                *b = *v;
            }
            edt_pass(&buf_in[..n], &mut buf_out[..n], w);
            for (v, b) in lane.iter_mut().zip(buf_out.iter()) {
                *v = *b;
            }
        }
    }
    field
}

fn percentile_95(sorted: &[f64]) -> f64 {
    let m = sorted.len();
    if m == 1 {
        return sorted[0];
    }
    let pos = 0.95 * (m - 1) as f64;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    if lo + 1 < m {
        sorted[lo] * (1.0 - frac) + sorted[lo + 1] * frac
    } else {
        sorted[m - 1]
    }
}

/// 95th percentile of symmetric surface distances between the `class_id`
/// masks of two label volumes, in millimeters. Fails if either mask is empty.
pub fn hd95(a: &LabelVolume, b: &LabelVolume, class_id: u8) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "hd95: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mask_a = a.mask(class_id);
    let mask_b = b.mask(class_id);
    let surf_a = surface_voxels(&mask_a);
    let surf_b = surface_voxels(&mask_b);
    if surf_a.is_empty() || surf_b.is_empty() {
        return Err(Error::MetricUndefined(
            "hd95 needs two non-empty masks".into(),
        ));
    }
    let spacing = a.spacing;
    let dist_to_b = squared_distance_field(a.shape(), &surf_b, spacing);
    let dist_to_a = squared_distance_field(a.shape(), &surf_a, spacing);
    let mut dists: Vec<f64> = Vec::with_capacity(surf_a.len() + surf_b.len());
    for &(z, y, x) in &surf_a {
        dists.push(dist_to_b[[z, y, x]].sqrt());
    }
    for &(z, y, x) in &surf_b {
        dists.push(dist_to_a[[z, y, x]].sqrt());
    }
    dists.sort_by(|p, q| p.partial_cmp(q).unwrap());
    Ok(percentile_95(&dists))
}

/// Peak signal-to-noise ratio in dB. Fails on identical inputs (MSE = 0).
pub fn psnr(x: &Volume, y: &Volume, data_range: f64) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(Error::ShapeMismatch(format!(
            "psnr: {:?} vs {:?}",
            x.shape(),
            y.shape()
        )));
    }
    let n = x.data.len() as f64;
    let mse: f64 = x
        .data
        .iter()
        .zip(y.data.iter())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Err(Error::MetricUndefined("psnr of identical inputs".into()));
    }
    Ok(10.0 * (data_range * data_range / mse).log10())
}

fn gaussian_window(radius: usize, sigma: f64) -> Vec<f64> {
    let mut w: Vec<f64> = (-(radius as isize)..=radius as isize)
        .map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = w.iter().sum();
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Valid-mode separable Gaussian filtering of a 2D slice.
fn filter_valid(img: &Array2<f64>, win: &[f64]) -> Array2<f64> {
    let k = win.len();
    let (h, w) = img.dim();
    let mut tmp = Array2::<f64>::zeros((h, w - k + 1));
    for i in 0..h {
        for j in 0..w - k + 1 {
            let mut acc = 0.0;
            for (t, &wt) in win.iter().enumerate() {
                acc += wt * img[[i, j + t]];
            }
            tmp[[i, j]] = acc;
        }
    }
    let mut out = Array2::<f64>::zeros((h - k + 1, w - k + 1));
    for i in 0..h - k + 1 {
        for j in 0..w - k + 1 {
            let mut acc = 0.0;
            for (t, &wt) in win.iter().enumerate() {
                acc += wt * tmp[[i + t, j]];
            }
            out[[i, j]] = acc;
        }
    }
    out
}

/// Mean structural similarity: Gaussian window (11 taps, sigma 1.5),
/// stabilizing constants K1 = 0.01, K2 = 0.03 at unit data range, evaluated
/// slicewise in-plane over fully-contained windows and averaged.
pub fn ssim(x: &Volume, y: &Volume) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(Error::ShapeMismatch(format!(
            "ssim: {:?} vs {:?}",
            x.shape(),
            y.shape()
        )));
    }
    let (nz, ny, nx) = x.shape();
    let win = gaussian_window(5, 1.5);
    if ny < win.len() || nx < win.len() {
        return Err(Error::InvalidArgument(
            "ssim needs in-plane extent >= 11".into(),
        ));
    }
    let c1 = (0.01f64).powi(2);
    let c2 = (0.03f64).powi(2);
    let mut total = 0.0;
    let mut count = 0usize;
    for z in 0..nz {
        let xs = x.data.index_axis(ndarray::Axis(0), z).mapv(|v| v as f64);
        let ys = y.data.index_axis(ndarray::Axis(0), z).mapv(|v| v as f64);
        let mu_x = filter_valid(&xs, &win);
        let mu_y = filter_valid(&ys, &win);
        let xx = filter_valid(&(&xs * &xs), &win);
        let yy = filter_valid(&(&ys * &ys), &win);
        let xy = filter_valid(&(&xs * &ys), &win);
        for ((i, j), &mx) in mu_x.indexed_iter() {
            let my = mu_y[[i, j]];
            let vx = xx[[i, j]] - mx * mx;
            let vy = yy[[i, j]] - my * my;
            let cov = xy[[i, j]] - mx * my;
            let s = ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
            total += s;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Pearson correlation between an uncertainty map and the absolute
/// reconstruction error. Fails when either side has zero variance.
pub fn uncertainty_error_correlation(
    uncertainty: &Array3<f32>,
    pred: &Volume,
    target: &Volume,
) -> Result<f64> {
    if uncertainty.dim() != pred.data.dim() || pred.shape() != target.shape() {
        return Err(Error::ShapeMismatch(
            "uncertainty/pred/target shapes differ".into(),
        ));
    }
    let n = uncertainty.len() as f64;
    let u: Vec<f64> = uncertainty.iter().map(|&v| v as f64).collect();
    let e: Vec<f64> = pred
        .data
        .iter()
        .zip(target.data.iter())
        .map(|(&p, &t)| (p as f64 - t as f64).abs())
        .collect();
    let mean_u = u.iter().sum::<f64>() / n;
    let mean_e = e.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var_u = 0.0;
    let mut var_e = 0.0;
    for (&a, &b) in u.iter().zip(e.iter()) {
        cov += (a - mean_u) * (b - mean_e);
        var_u += (a - mean_u) * (a - mean_u);
        var_e += (b - mean_e) * (b - mean_e);
    }
    if var_u == 0.0 || var_e == 0.0 {
        return Err(Error::MetricUndefined(
            "pearson correlation of zero-variance input".into(),
        ));
    }
    Ok(cov / (var_u.sqrt() * var_e.sqrt()))
}

/// Brute-force all-pairs HD95 used as an oracle in tests. Tractable only for
/// tiny masks; accumulation order matches [`hd95`] exactly.
pub fn hd95_bruteforce(a: &LabelVolume, b: &LabelVolume, class_id: u8) -> Result<f64> {
    let surf_a = surface_voxels(&a.mask(class_id));
    let surf_b = surface_voxels(&b.mask(class_id));
    if surf_a.is_empty() || surf_b.is_empty() {
        return Err(Error::MetricUndefined(
            "hd95 needs two non-empty masks".into(),
        ));
    }
    let (sz, sy, sx) = a.spacing;
    let (wz, wy, wx) = (
        sz as f64 * sz as f64,
        sy as f64 * sy as f64,
        sx as f64 * sx as f64,
    );
    let min_dist = |p: (usize, usize, usize), set: &[(usize, usize, usize)]| -> f64 {
        let mut best = f64::INFINITY;
        for &(z, y, x) in set {
            let dz = p.0 as f64 - z as f64;
            let dy = p.1 as f64 - y as f64;
            let dx = p.2 as f64 - x as f64;
            let mut d2 = wz * dz * dz;
            d2 += wy * dy * dy;
            d2 += wx * dx * dx;
            if d2 < best {
                best = d2;
            }
        }
        best.sqrt()
    };
    let mut dists: Vec<f64> = Vec::with_capacity(surf_a.len() + surf_b.len());
    for &p in &surf_a {
        dists.push(min_dist(p, &surf_b));
    }
    for &p in &surf_b {
        dists.push(min_dist(p, &surf_a));
    }
    dists.sort_by(|p, q| p.partial_cmp(q).unwrap());
    Ok(percentile_95(&dists))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn labels_from(data: Array3<u8>, spacing: (f32, f32, f32)) -> LabelVolume {
        LabelVolume::new(data, spacing, 2).unwrap()
    }

    fn random_labels(shape: (usize, usize, usize), seed: u64) -> LabelVolume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        loop {
            let data = Array3::from_shape_fn(shape, |_| u8::from(rng.gen::<f32>() < 0.4));
            if data.iter().any(|&v| v == 1) {
                return labels_from(data, (1.0, 1.0, 1.0));
            }
        }
    }

    #[test]
    fn dice_basic_cases() {
        let a = labels_from(
            Array3::from_shape_fn((4, 4, 4), |(z, _, _)| u8::from(z < 2)),
            (1.0, 1.0, 1.0),
        );
        assert_eq!(dice(&a, &a, 1).unwrap(), 1.0);
        let empty = labels_from(Array3::zeros((4, 4, 4)), (1.0, 1.0, 1.0));
        assert_eq!(dice(&a, &empty, 1).unwrap(), 0.0);
        assert_eq!(dice(&empty, &empty, 1).unwrap(), 1.0);
        // Two 4x4x2 slabs sharing half their volume: 32 shared of 64 each.
        let b = labels_from(
            Array3::from_shape_fn((4, 4, 4), |(z, _, _)| u8::from((1..3).contains(&z))),
            (1.0, 1.0, 1.0),
        );
        let c = labels_from(
            Array3::from_shape_fn((4, 4, 4), |(z, _, _)| u8::from(z >= 2)),
            (1.0, 1.0, 1.0),
        );
        assert_eq!(dice(&b, &c, 1).unwrap(), 0.5);
        assert_eq!(dice(&c, &b, 1).unwrap(), 0.5);
    }

    #[test]
    fn hd95_identical_and_point_pair() {
        let a = random_labels((6, 6, 6), 3);
        assert_eq!(hd95(&a, &a, 1).unwrap(), 0.0);

        let mut pa = Array3::<u8>::zeros((8, 3, 3));
        pa[[1, 1, 1]] = 1;
        let mut pb = Array3::<u8>::zeros((8, 3, 3));
        pb[[6, 1, 1]] = 1;
        let la = labels_from(pa, (1.0, 1.0, 1.0));
        let lb = labels_from(pb, (1.0, 1.0, 1.0));
        assert_eq!(hd95(&la, &lb, 1).unwrap(), 5.0);
    }

    #[test]
    fn hd95_matches_bruteforce_exactly() {
        for seed in 0..20u64 {
            let a = random_labels((8, 8, 8), seed * 2 + 1);
            let b = random_labels((8, 8, 8), seed * 2 + 2);
            let fast = hd95(&a, &b, 1).unwrap();
            let brute = hd95_bruteforce(&a, &b, 1).unwrap();
            assert_eq!(fast, brute, "seed {seed}");
        }
    }

    #[test]
    fn hd95_symmetric_and_translation_invariant() {
        let mut pa = Array3::<u8>::zeros((10, 10, 10));
        let mut pb = Array3::<u8>::zeros((10, 10, 10));
        for z in 2..5 {
            for y in 2..5 {
                for x in 2..5 {
                    pa[[z, y, x]] = 1;
                    pb[[z + 1, y, x]] = 1;
                }
            }
        }
        let la = labels_from(pa.clone(), (2.0, 1.0, 1.0));
        let lb = labels_from(pb.clone(), (2.0, 1.0, 1.0));
        let d1 = hd95(&la, &lb, 1).unwrap();
        let d2 = hd95(&lb, &la, 1).unwrap();
        assert_eq!(d1, d2);
        // Translate both masks together by (1,1,1).
        let shift = |m: &Array3<u8>| {
            let mut out = Array3::<u8>::zeros((10, 10, 10));
            for ((z, y, x), &v) in m.indexed_iter() {
                if v == 1 {
                    out[[z + 1, y + 1, x + 1]] = 1;
                }
            }
            out
        };
        let la2 = labels_from(shift(&pa), (2.0, 1.0, 1.0));
        let lb2 = labels_from(shift(&pb), (2.0, 1.0, 1.0));
        assert_eq!(hd95(&la2, &lb2, 1).unwrap(), d1);
    }

    #[test]
    fn hd95_empty_mask_is_error() {
        let a = random_labels((4, 4, 4), 5);
        let empty = labels_from(Array3::zeros((4, 4, 4)), (1.0, 1.0, 1.0));
        assert!(hd95(&a, &empty, 1).is_err());
    }

    #[test]
    fn psnr_analytic_cases() {
        let x = Volume::new(Array3::from_elem((4, 4, 4), 0.4f32), (1.0, 1.0, 1.0)).unwrap();
        let y = Volume::new(Array3::from_elem((4, 4, 4), 0.5f32), (1.0, 1.0, 1.0)).unwrap();
        let p = psnr(&x, &y, 1.0).unwrap();
        assert!((p - 20.0).abs() < 1e-5, "got {p}");
        assert!(psnr(&x, &x, 1.0).is_err());
        // Halving the error raises PSNR by ~6.02 dB.
        let y2 = Volume::new(Array3::from_elem((4, 4, 4), 0.45f32), (1.0, 1.0, 1.0)).unwrap();
        let p2 = psnr(&x, &y2, 1.0).unwrap();
        assert!((p2 - p - 20.0 * 2f64.log10()).abs() < 1e-4);
    }

    #[test]
    fn psnr_decreasing_in_mse() {
        let x = Volume::new(Array3::from_elem((4, 4, 4), 0.2f32), (1.0, 1.0, 1.0)).unwrap();
        let mut last = f64::INFINITY;
        for step in 1..5 {
            let y = Volume::new(
                Array3::from_elem((4, 4, 4), 0.2 + 0.1 * step as f32),
                (1.0, 1.0, 1.0),
            )
            .unwrap();
            let p = psnr(&x, &y, 1.0).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn ssim_basics() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data = Array3::from_shape_fn((4, 16, 16), |_| rng.gen::<f32>());
        let x = Volume::new(data.clone(), (1.0, 1.0, 1.0)).unwrap();
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let inv = Volume::new(data.mapv(|v| 1.0 - v), (1.0, 1.0, 1.0)).unwrap();
        assert!(ssim(&x, &inv).unwrap() < 1.0);
    }

    #[test]
    fn ssim_matches_direct_window_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = Array3::from_shape_fn((16, 16, 16), |_| rng.gen::<f32>());
        let b = Array3::from_shape_fn((16, 16, 16), |_| rng.gen::<f32>());
        let x = Volume::new(a.clone(), (1.0, 1.0, 1.0)).unwrap();
        let y = Volume::new(b.clone(), (1.0, 1.0, 1.0)).unwrap();
        let got = ssim(&x, &y).unwrap();

        // Independent direct evaluation: full 2D window per position.
        let win = gaussian_window(5, 1.5);
        let c1 = 0.01f64 * 0.01;
        let c2 = 0.03f64 * 0.03;
        let mut total = 0.0;
        let mut count = 0;
        for z in 0..16 {
            for i in 0..16 - 10 {
                for j in 0..16 - 10 {
                    let (mut mx, mut my, mut mxx, mut myy, mut mxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for (ti, &wi) in win.iter().enumerate() {
                        for (tj, &wj) in win.iter().enumerate() {
                            let w = wi * wj;
                            let xv = a[[z, i + ti, j + tj]] as f64;
                            let yv = b[[z, i + ti, j + tj]] as f64;
                            mx += w * xv;
                            my += w * yv;
                            mxx += w * xv * xv;
                            myy += w * yv * yv;
                            mxy += w * xv * yv;
                        }
                    }
                    let vx = mxx - mx * mx;
                    let vy = myy - my * my;
                    let cov = mxy - mx * my;
                    total += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                        / ((mx * mx + my * my + c1) * (vx + vy + c2));
                    count += 1;
                }
            }
        }
        let oracle = total / count as f64;
        assert!((got - oracle).abs() < 1e-6, "got {got} oracle {oracle}");
    }

    #[test]
    fn uncertainty_correlation_endpoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let target = Volume::new(
            Array3::from_shape_fn((8, 8, 8), |_| rng.gen::<f32>()),
            (1.0, 1.0, 1.0),
        )
        .unwrap();
        let pred = Volume::new(
            Array3::from_shape_fn((8, 8, 8), |_| rng.gen::<f32>()),
            (1.0, 1.0, 1.0),
        )
        .unwrap();
        let err = ndarray::Zip::from(&pred.data)
            .and(&target.data)
            .map_collect(|&p, &t| (p - t).abs());
        let r = uncertainty_error_correlation(&err, &pred, &target).unwrap();
        assert!((r - 1.0).abs() < 1e-9);
        let neg = err.mapv(|e| 1.0 - e);
        let r2 = uncertainty_error_correlation(&neg, &pred, &target).unwrap();
        assert!((r2 + 1.0).abs() < 1e-9);
        let constant = Array3::from_elem((8, 8, 8), 0.5f32);
        assert!(uncertainty_error_correlation(&constant, &pred, &target).is_err());
    }

    #[test]
    fn uncertainty_correlation_independent_noise_is_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let target = Volume::new(
            Array3::from_shape_fn((64, 64, 64), |_| rng.gen::<f32>()),
            (1.0, 1.0, 1.0),
        )
        .unwrap();
        let pred = Volume::new(
            Array3::from_shape_fn((64, 64, 64), |_| rng.gen::<f32>()),
            (1.0, 1.0, 1.0),
        )
        .unwrap();
        let noise = Array3::from_shape_fn((64, 64, 64), |_| rng.gen::<f32>());
        let r = uncertainty_error_correlation(&noise, &pred, &target).unwrap();
        assert!(r.abs() < 0.1, "got {r}");
    }
}
