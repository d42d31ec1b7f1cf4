use rehrseg::nifti::{load_labels, load_volume};
use rehrseg::metrics::psnr;
use rehrseg::resample::resize_volume_bspline;
use rehrseg::volume::Volume;

fn region_mse(pred: &Volume, gt: &Volume, mask: &ndarray::Array3<bool>, inside: bool) -> (f64, usize) {
    let mut acc = 0.0; let mut n = 0usize;
    for ((p, g), &m) in pred.data.iter().zip(gt.data.iter()).zip(mask.iter()) {
        if m == inside { let d = (*p - *g) as f64; acc += d * d; n += 1; }
    }
    (acc / n as f64, n)
}

fn main() {
    let run = std::path::Path::new("/root/scratch/probe_run");
    for id in ["case_000", "case_007"] {
        let gt = load_volume(run.join(format!("dataset/ground_truth/{id}_image.nii.gz"))).unwrap();
        let gt_lab = load_labels(run.join(format!("dataset/ground_truth/{id}_labels.nii.gz"))).unwrap();
        let sr = load_volume(run.join(format!("superres/{id}_sr_image.nii.gz"))).unwrap();
        let lr = load_volume(run.join(format!("dataset/train/{id}_image.nii.gz"))).unwrap();
        let bs = resize_volume_bspline(&lr, gt.shape()).unwrap();
        // Shell: within 3 voxels of a label boundary (dilate XOR erode approximation).
        let (nz, ny, nx) = gt_lab.shape();
        let mut shell = ndarray::Array3::<bool>::from_elem((nz, ny, nx), false);
        for z in 0..nz { for y in 0..ny { for x in 0..nx {
            let v = gt_lab.data[[z, y, x]];
            'n: for dz in -3i64..=3 { for dy in -3i64..=3 { for dx in -3i64..=3 {
                let (zz, yy, xx) = (z as i64 + dz, y as i64 + dy, x as i64 + dx);
                if zz < 0 || yy < 0 || xx < 0 || zz >= nz as i64 || yy >= ny as i64 || xx >= nx as i64 { continue; }
                if gt_lab.data[[zz as usize, yy as usize, xx as usize]] != v { shell[[z, y, x]] = true; break 'n; }
            }}}
        }}}
        let (sr_shell, n_shell) = region_mse(&sr, &gt, &shell, true);
        let (sr_flat, n_flat) = region_mse(&sr, &gt, &shell, false);
        let (bs_shell, _) = region_mse(&bs, &gt, &shell, true);
        let (bs_flat, _) = region_mse(&bs, &gt, &shell, false);
        println!("{id}: psnr sr {:.2} bspline {:.2}", psnr(&sr, &gt, 1.0).unwrap(), psnr(&bs, &gt, 1.0).unwrap());
        println!("  shell ({n_shell} vox): sr mse {sr_shell:.2e}  bspline {bs_shell:.2e}");
        println!("  flat  ({n_flat} vox): sr mse {sr_flat:.2e}  bspline {bs_flat:.2e}");
        // per sub-slice residual (z mod r)
        for s in 0..4usize {
            let mut acc = 0.0; let mut n = 0usize;
            for ((z, _, _), (p, g)) in gt.data.indexed_iter().map(|(i, _)| i).zip(sr.data.iter().zip(gt.data.iter())) {
                if z % 4 == s { let d = (*p - *g) as f64; acc += d*d; n += 1; }
            }
            println!("  sub-slice {s}: sr mse {:.2e}", acc / n as f64);
        }
    }
}
