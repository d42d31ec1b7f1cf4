//! Trains a miniature self-SR model on pairs synthesized from one phantom
//! and prints the loss trace around the uncertainty-loss switch.
//!
//! ```bash
//! cargo run --release --example train_selfsr
//! ```

use rehrseg::degrade::make_selfsr_pairs;
use rehrseg::phantom::{generate_phantom, PhantomSpec};
use rehrseg::resample::{resample_isotropic_labels, Interp};
use rehrseg::selfsr::{train_selfsr, SelfSrConfig};

fn main() -> rehrseg::Result<()> {
    let spec = PhantomSpec {
        size: 32,
        seed: 3,
        ..Default::default()
    };
    let (hr, labels) = generate_phantom(&spec)?;
    // Self-supervision needs no HR data: degrade to LR first, then work
    // with the LR volume alone.
    let (lr, lr_labels) = rehrseg::degrade::degrade_pair(&hr, &labels, 2, 0, 0)?;
    let iso = rehrseg::resample::resample_isotropic(&lr, Interp::Bspline3)?;
    let iso_labels = resample_isotropic_labels(&lr_labels)?;

    let cfg = SelfSrConfig {
        r: 2,
        channels: 8,
        branches: 2,
        iters_total: 400,
        iters_uncertainty_on: 300,
        batch_size: 4,
        patch_lr: (16, 16, 8),
        seed: 1,
        ..Default::default()
    };
    let pairs = make_selfsr_pairs(&iso, &iso_labels, cfg.r, cfg.patch_lr)?;
    println!("{} training pairs from one case", pairs.pairs.len());

    let (ckpt, trace) = train_selfsr(&pairs, &cfg, None)?;
    for row in trace.iter().step_by(50) {
        println!(
            "iter {:>4}  image {:.4}  label {:.4}  total {:.4}",
            row.iter, row.loss_image, row.loss_label, row.total
        );
    }
    let last = trace.last().unwrap();
    println!(
        "final: image {:.4} label {:.4} ({} iterations, {} parameters)",
        last.loss_image,
        last.loss_label,
        ckpt.iterations_run,
        ckpt.tensors.values().map(|(_, d)| d.len()).sum::<usize>()
    );
    Ok(())
}
