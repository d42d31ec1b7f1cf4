//! The evaluation metric suite on constructed masks and images: Dice,
//! HD95 (with its brute-force oracle), PSNR, slicewise SSIM, and the
//! uncertainty-error correlation.
//!
//! ```bash
//! cargo run --release --example evaluate_metrics
//! ```

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rehrseg::metrics::{
    dice, hd95, hd95_bruteforce, psnr, ssim, uncertainty_error_correlation,
};
use rehrseg::volume::{LabelVolume, Volume};

fn cube(shape: (usize, usize, usize), lo: usize, hi: usize) -> LabelVolume {
    let data = Array3::from_shape_fn(shape, |(z, y, x)| {
        u8::from((lo..hi).contains(&z) && (lo..hi).contains(&y) && (lo..hi).contains(&x))
    });
    LabelVolume::new(data, (2.0, 1.0, 1.0), 2).unwrap()
}

fn main() -> rehrseg::Result<()> {
    let a = cube((12, 12, 12), 2, 8);
    let b = cube((12, 12, 12), 4, 10);
    println!("dice(a, a) = {:.4}", dice(&a, &a, 1)?);
    println!("dice(a, b) = {:.4}  (shifted cube)", dice(&a, &b, 1)?);
    println!("hd95(a, b) = {:.4} mm (anisotropic spacing 2x1x1)", hd95(&a, &b, 1)?);
    println!(
        "hd95 equals all-pairs brute force: {}",
        hd95(&a, &b, 1)? == hd95_bruteforce(&a, &b, 1)?
    );

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = Volume::new(
        Array3::from_shape_fn((8, 16, 16), |_| rng.gen::<f32>()),
        (1.0, 1.0, 1.0),
    )?;
    let noisy = Volume::new(
        x.data.mapv(|v| (v + 0.1 * (rng.gen::<f32>() - 0.5)).clamp(0.0, 1.0)),
        (1.0, 1.0, 1.0),
    )?;
    println!("psnr(x, x + noise) = {:.2} dB", psnr(&x, &noisy, 1.0)?);
    println!("ssim(x, x)         = {:.4}", ssim(&x, &x)?);
    println!("ssim(x, noisy)     = {:.4}", ssim(&x, &noisy)?);

    // An uncertainty map equal to the true |error| correlates perfectly.
    let err = ndarray::Zip::from(&x.data)
        .and(&noisy.data)
        .map_collect(|&p, &t| (p - t).abs());
    println!(
        "uncertainty-error Pearson r (oracle map) = {:.4}",
        uncertainty_error_correlation(&err, &noisy, &x)?
    );
    Ok(())
}
