//! End-to-end super-resolution of one annotated LR volume: trains briefly on
//! the volume's own in-plane pairs, applies the model along the
//! through-plane axis, and compares against B-spline interpolation on the
//! hidden ground truth.
//!
//! ```bash
//! cargo run --release --example superresolve
//! ```

use rehrseg::degrade::{degrade_pair, make_selfsr_pairs};
use rehrseg::metrics::{dice, psnr, uncertainty_error_correlation};
use rehrseg::phantom::{generate_phantom, PhantomSpec};
use rehrseg::resample::{
    resample_isotropic, resample_isotropic_labels, resize_labels_nearest, resize_volume_bspline,
    Interp,
};
use rehrseg::selfsr::{infer_selfsr, train_selfsr, SelfSrConfig};

fn main() -> rehrseg::Result<()> {
    let r = 2;
    let spec = PhantomSpec {
        size: 32,
        seed: 9,
        ..Default::default()
    };
    let (hr_gt, labels_gt) = generate_phantom(&spec)?;
    let (lr, lr_labels) = degrade_pair(&hr_gt, &labels_gt, r, 0, 0)?;
    println!("LR input {:?} at spacing {:?} mm", lr.shape(), lr.spacing);

    let iso = resample_isotropic(&lr, Interp::Bspline3)?;
    let iso_labels = resample_isotropic_labels(&lr_labels)?;
    let cfg = SelfSrConfig {
        r,
        channels: 8,
        branches: 2,
        iters_total: 800,
        iters_uncertainty_on: 600,
        batch_size: 4,
        patch_lr: (16, 16, 8),
        seed: 5,
        ..Default::default()
    };
    let pairs = make_selfsr_pairs(&iso, &iso_labels, r, cfg.patch_lr)?;
    let (ckpt, _) = train_selfsr(&pairs, &cfg, None)?;

    let bundle = infer_selfsr(&lr, &lr_labels, &ckpt)?;
    println!(
        "SR output {:?} at spacing {:?} mm",
        bundle.image.shape(),
        bundle.image.spacing
    );

    let bspline = resize_volume_bspline(&lr, hr_gt.shape())?;
    let nn_labels = resize_labels_nearest(&lr_labels, hr_gt.shape())?;
    println!(
        "PSNR vs hidden HR:  self-SR {:.2} dB   B-spline {:.2} dB",
        psnr(&bundle.image, &hr_gt, 1.0)?,
        psnr(&bspline, &hr_gt, 1.0)?
    );
    println!(
        "label DSC vs hidden HR:  self-SR {:.4}   nearest-neighbor {:.4}",
        dice(&bundle.labels, &labels_gt, 1)?,
        dice(&nn_labels, &labels_gt, 1)?
    );
    println!(
        "uncertainty-error Pearson r: {:.3}",
        uncertainty_error_correlation(&bundle.uncertainty, &bundle.image, &hr_gt)?
    );
    Ok(())
}
