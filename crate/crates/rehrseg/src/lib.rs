//! Toolkit for resource-efficient high-resolution segmentation of anisotropic
//! 3D volumes.
//!
//! The pipeline has two stages. Stage one trains a self-supervised
//! super-resolution (self-SR) model on annotated low-resolution volumes alone,
//! using in-plane structure as supervision for the through-plane axis. Stage
//! two trains a segmentation network on pseudo-HR data produced by the frozen
//! self-SR model, with an uncertainty-weighted loss and structural knowledge
//! distillation, so that low-resolution input yields both LR and HR
//! segmentations without any real HR data ever entering training.
//!
//! Modules:
//! - [`volume`], [`nifti`], [`resample`]: annotated-volume carrier types and I/O
//! - [`degrade`]: slice-profile blur, decimation, and training-pair synthesis
//! - [`nn`]: small reverse-mode autodiff engine and 3D conv ops
//! - [`selfsr`]: self-SR backbone plus the uncertainty-aware SR head
//! - [`distill`]: affinity-graph and spatial-cosine feature distillation
//! - [`segmenter`]: 3D U-Net with auxiliary HR head and composite loss
//! - [`phantom`]: synthetic benchmark generator with hidden HR ground truth
//! - [`metrics`]: DSC, HD95, PSNR, SSIM, uncertainty diagnostics
//! - [`config`], [`pipeline`]: experiment configuration and stage orchestration

pub mod config;
pub mod degrade;
pub mod distill;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod nifti;
pub mod nn;
pub mod phantom;
pub mod pipeline;
pub mod selfsr;
pub mod resample;
pub mod segmenter;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{LabelVolume, Volume};
