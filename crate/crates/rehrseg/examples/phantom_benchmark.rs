//! Generates a small phantom benchmark and inspects its layout: visible LR
//! data under `train/`, hidden HR ground truth under `ground_truth/`.
//!
//! ```bash
//! cargo run --release --example phantom_benchmark
//! ```

use rehrseg::nifti::{load_labels, load_volume};
use rehrseg::phantom::{make_benchmark, PhantomSpec};

fn main() -> rehrseg::Result<()> {
    let dir = std::env::temp_dir().join("rehrseg_example_benchmark");
    let spec = PhantomSpec {
        size: 32,
        ..Default::default()
    };
    let manifest = make_benchmark(&dir, 6, 4, 2024, &spec)?;

    println!("benchmark at {}", dir.display());
    println!(
        "{} cases, {} train / {} val, scale factor r = {}",
        manifest.cases.len(),
        manifest.train_cases().count(),
        manifest.val_cases().count(),
        manifest.r
    );
    for case in &manifest.cases {
        let lr = load_volume(&case.lr_image)?;
        let labels = load_labels(&case.lr_labels)?;
        let fg = labels.data.iter().filter(|&&v| v == 1).count();
        println!(
            "  {} [{}]: LR {:?} spacing {:?} mm, {} foreground voxels",
            case.id,
            case.split,
            lr.shape(),
            lr.spacing,
            fg
        );
        assert!(case.hr_image.starts_with(dir.join("ground_truth")));
        assert!(case.lr_image.starts_with(dir.join("train")));
    }
    println!("hidden HR ground truth never appears under train/");
    Ok(())
}
