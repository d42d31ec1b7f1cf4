//! The whole pipeline at miniature scale through the same stage functions
//! the CLI uses: benchmark generation, self-SR training, pseudo-data
//! generation, segmenter training, inference, and the metric report.
//!
//! ```bash
//! cargo run --release --example full_pipeline
//! ```

use rehrseg::config::load_config;
use rehrseg::pipeline;

fn main() -> anyhow::Result<()> {
    let dir = std::env::temp_dir().join("rehrseg_example_pipeline");
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir)?;
    let config_path = dir.join("experiment.json");
    std::fs::write(
        &config_path,
        format!(
            r#"{{
  "out_dir": "{}",
  "seed": 21,
  "phantom": {{ "cases": 4, "r": 2, "hr_size": 32, "n_blobs": [1, 2],
               "intensity_texture": 0.2, "fg_fraction": [0.01, 0.2] }},
  "selfsr": {{ "r": 2, "channels": 8, "branches": 2, "num_classes": 2,
              "iters_total": 300, "iters_uncertainty_on": 240,
              "batch_size": 4, "learning_rate": 0.001,
              "patch_lr": [16, 16, 8], "augment_y_axis": false, "seed": 22 }},
  "segmenter": {{
    "config": {{ "base_channels": 8, "r": 2, "epochs": 6, "batch_size": 2,
                "learning_rate": 0.002, "seed": 23, "teacher_channels": 8 }},
    "use_pseudo_data": true
  }},
  "eval": {{ "split": "all" }}
}}"#,
            dir.join("run").display()
        ),
    )?;
    let cfg = load_config(&config_path, None, &[])?;

    println!("[1/6] phantom benchmark");
    let manifest = pipeline::run_phantom(&cfg)?;
    println!(
        "      {} cases ({} train / {} val)",
        manifest.cases.len(),
        manifest.train_cases().count(),
        manifest.val_cases().count()
    );

    println!("[2/6] self-SR training");
    pipeline::run_train_sr(&cfg, false)?;

    println!("[3/6] super-resolution + pseudo-data generation");
    let index = pipeline::run_superres(&cfg)?;
    let pseudo: usize = index.cases.iter().map(|c| c.pseudo.len()).sum();
    println!("      {pseudo} pseudo-LR training samples");

    println!("[4/6] segmenter training");
    pipeline::run_train_seg(&cfg)?;

    println!("[5/6] inference on case_000");
    let (lr_path, hr_path) = pipeline::run_infer(&cfg, "case_000")?;
    println!("      LR mask {}", lr_path.display());
    if let Some(hr) = hr_path {
        println!("      HR mask {}", hr.display());
    }

    println!("[6/6] evaluation");
    let summary = pipeline::run_eval(&cfg)?;
    for (name, stat) in &summary.metrics {
        if stat.n > 0 {
            println!("      {name:<18} {:.4} +/- {:.4}", stat.mean, stat.std);
        }
    }
    Ok(())
}
