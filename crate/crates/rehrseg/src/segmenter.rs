//! 3D segmentation network over LR volumes producing simultaneous LR and HR
//! segmentations.
//!
//! The backbone is a compact three-level 3D U-Net. The auxiliary HR head
//! interpolates the pre-final features by `r` along depth and applies two
//! convolutions with a ReLU between them. Training combines an
//! uncertainty-weighted cross-entropy on the LR head, CE + Dice on the HR
//! head against pseudo-HR annotations, and the two structural distillation
//! losses, with each component independently toggleable for ablations.

use crate::distill::{affinity_var, build_affinity, correlation_loss_var, crop_to_divisible, spatial_loss_var};
use crate::error::{Error, Result};
use crate::losses::label_ce_dice_loss;
use crate::nn::params::{read_tensors, write_tensors};
use crate::nn::{Adam, ParamSet, Scalar, Tape, Var};
use crate::volume::{LabelVolume, Volume};
use ndarray::{Array3, Array4, ArrayD, Axis, IxDyn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

/// Decoder stage that supplies features for distillation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureStage {
    /// Bottleneck-adjacent decoder output (half resolution). Default.
    Dec2,
    /// Full-resolution decoder output.
    Dec1,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegConfig {
    pub base_channels: usize,
    /// Encoder depth; this implementation is the three-level ladder.
    pub levels: usize,
    pub num_classes: usize,
    pub r: usize,
    /// Distillation weight.
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub uncertainty_on: bool,
    pub distill_on: bool,
    pub hr_head_on: bool,
    pub feature_stage: FeatureStage,
    /// Affinity-graph pooling patch `(bz, by, bx)`.
    pub distill_beta: (usize, usize, usize),
    /// Channel count of the teacher feature maps (adaptor output width).
    pub teacher_channels: usize,
    /// Random flips and intensity jitter during training.
    pub augment: bool,
}

impl Default for SegConfig {
    fn default() -> Self {
        SegConfig {
            base_channels: 16,
            levels: 3,
            num_classes: 2,
            r: 4,
            lambda: 1.0,
            epochs: 10,
            batch_size: 2,
            learning_rate: 1e-3,
            seed: 0,
            uncertainty_on: true,
            distill_on: true,
            hr_head_on: true,
            feature_stage: FeatureStage::Dec2,
            distill_beta: (1, 2, 2),
            teacher_channels: 16,
            augment: true,
        }
    }
}

impl SegConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels != 3 {
            return Err(Error::Config(
                "segmenter: this backbone is the 3-level ladder".into(),
            ));
        }
        if self.lambda < 0.0 {
            return Err(Error::Config("segmenter: lambda must be >= 0".into()));
        }
        if self.num_classes < 2 || self.base_channels < 4 || self.batch_size == 0 {
            return Err(Error::Config("segmenter: degenerate model size".into()));
        }
        if self.r < 2 {
            return Err(Error::Config("segmenter: r must be >= 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct SegLayout {
    enc1: (usize, usize),
    enc2: (usize, usize),
    bott: (usize, usize),
    red2: (usize, usize),
    dec2: (usize, usize),
    red1: (usize, usize),
    dec1: (usize, usize),
    lr_head: (usize, usize),
    hr_a: Option<(usize, usize)>,
    hr_b: Option<(usize, usize)>,
    adaptor: Option<(usize, usize)>,
}

pub struct SegOutputsVar {
    pub lr_logits: Var,
    pub hr_logits: Option<Var>,
    /// Decoder feature map for distillation (stage per config).
    pub features: Var,
}

pub struct SegModel<F: Scalar> {
    pub cfg: SegConfig,
    pub params: ParamSet<F>,
    layout: SegLayout,
}

impl<F: Scalar> SegModel<F> {
    /// Parameter groups draw from independent seeded streams, so the shared
    /// backbone initializes identically whether or not the HR head or the
    /// adaptor exist.
    pub fn new(cfg: &SegConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.base_channels;
        let k3 = (3, 3, 3);
        let k13 = (1, 3, 3);
        let k1 = (1, 1, 1);
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let enc1 = params.add_conv("enc1", c, 1, k3, &mut rng);
        let enc2 = params.add_conv("enc2", 2 * c, c, k3, &mut rng);
        let bott = params.add_conv("bott", 4 * c, 2 * c, k3, &mut rng);
        let red2 = params.add_conv("red2", 2 * c, 4 * c, k3, &mut rng);
        let dec2 = params.add_conv("dec2", 2 * c, 4 * c, k13, &mut rng);
        let red1 = params.add_conv("red1", c, 2 * c, k3, &mut rng);
        let dec1 = params.add_conv("dec1", c, 2 * c, k13, &mut rng);
        let lr_head = params.add_conv("lr_head", cfg.num_classes, c, k1, &mut rng);
        let (hr_a, hr_b) = if cfg.hr_head_on {
            let mut rng_hr = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
            let mid = (c / 2).max(4);
            (
                Some(params.add_conv("hr_head_a", mid, c, k13, &mut rng_hr)),
                Some(params.add_conv("hr_head_b", cfg.num_classes, mid, k1, &mut rng_hr)),
            )
        } else {
            (None, None)
        };
        let adaptor = if cfg.distill_on {
            let mut rng_ad = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
            let student_ch = match cfg.feature_stage {
                FeatureStage::Dec2 => 2 * c,
                FeatureStage::Dec1 => c,
            };
            Some(params.add_conv("adaptor", cfg.teacher_channels, student_ch, k1, &mut rng_ad))
        } else {
            None
        };
        Ok(SegModel {
            cfg: cfg.clone(),
            params,
            layout: SegLayout {
                enc1,
                enc2,
                bott,
                red2,
                dec2,
                red1,
                dec1,
                lr_head,
                hr_a,
                hr_b,
                adaptor,
            },
        })
    }

    pub fn from_checkpoint(ckpt: &SegCheckpoint) -> Result<Self> {
        let mut model = SegModel::new(&ckpt.cfg)?;
        model.params.load_f32_map(&ckpt.tensors)?;
        Ok(model)
    }

    pub fn check_input_dims(&self, shape: &[usize]) -> Result<()> {
        let (d, h, w) = (shape[2], shape[3], shape[4]);
        if d < 4 || h < 4 || w < 4 || d % 4 != 0 || h % 4 != 0 || w % 4 != 0 {
            return Err(Error::InvalidArgument(format!(
                "input dims ({d}, {h}, {w}) must be >= 4 and divisible by 4 \
                 for the encoder ladder"
            )));
        }
        Ok(())
    }

    fn conv(
        &self,
        tape: &Tape<F>,
        leaves: &[Var],
        ids: (usize, usize),
        x: Var,
        pad: (usize, usize, usize),
    ) -> Var {
        tape.conv3d(x, leaves[ids.0], leaves[ids.1], pad)
    }

    /// Full forward pass over a `(B, 1, D, H, W)` batch.
    pub fn forward(&self, tape: &Tape<F>, leaves: &[Var], x: Var) -> SegOutputsVar {
        let p3 = (1, 1, 1);
        let p13 = (0, 1, 1);
        let e1 = tape.relu(self.conv(tape, leaves, self.layout.enc1, x, p3));
        let d1 = tape.avg_pool3d(e1, (2, 2, 2));
        let e2 = tape.relu(self.conv(tape, leaves, self.layout.enc2, d1, p3));
        let d2 = tape.avg_pool3d(e2, (2, 2, 2));
        let b = tape.relu(self.conv(tape, leaves, self.layout.bott, d2, p3));
        let r2 = tape.relu(self.conv(tape, leaves, self.layout.red2, b, p3));
        let u2 = tape.upsample_nearest3d(r2, (2, 2, 2));
        let c2 = tape.concat(1, &[u2, e2]);
        let f2 = tape.relu(self.conv(tape, leaves, self.layout.dec2, c2, p13));
        let r1 = tape.relu(self.conv(tape, leaves, self.layout.red1, f2, p3));
        let u1 = tape.upsample_nearest3d(r1, (2, 2, 2));
        let c1 = tape.concat(1, &[u1, e1]);
        let f1 = tape.relu(self.conv(tape, leaves, self.layout.dec1, c1, p13));
        let lr_logits = self.conv(tape, leaves, self.layout.lr_head, f1, (0, 0, 0));
        let hr_logits = match (self.layout.hr_a, self.layout.hr_b) {
            (Some(a), Some(bq)) => {
                let up = tape.upsample_linear_depth(f1, self.cfg.r);
                let mid = tape.relu(self.conv(tape, leaves, a, up, p13));
                Some(self.conv(tape, leaves, bq, mid, (0, 0, 0)))
            }
            _ => None,
        };
        let features = match self.cfg.feature_stage {
            FeatureStage::Dec2 => f2,
            FeatureStage::Dec1 => f1,
        };
        SegOutputsVar {
            lr_logits,
            hr_logits,
            features,
        }
    }

    pub(crate) fn adaptor_vars(&self, leaves: &[Var]) -> Option<(Var, Var)> {
        self.layout.adaptor.map(|(w, b)| (leaves[w], leaves[b]))
    }

    /// Spatial shape of the distillation feature stage for an input shape.
    pub fn feature_shape(&self, input: (usize, usize, usize)) -> (usize, usize, usize) {
        match self.cfg.feature_stage {
            FeatureStage::Dec2 => (input.0 / 2, input.1 / 2, input.2 / 2),
            FeatureStage::Dec1 => input,
        }
    }
}

/// One training sample of the segmentation stage. Baseline samples carry
/// only the image and LR labels; pseudo-data samples add the HR annotation,
/// the Eq.-7 style loss weights, and aligned teacher features.
#[derive(Debug, Clone)]
pub struct SegSample {
    pub image: Array3<f32>,
    pub labels: Array3<u8>,
    pub hr_labels: Option<Array3<u8>>,
    /// Per-voxel LR loss weights (`1 - norm(U)` downsampled at this sample's
    /// offset); `None` means uniform weight 1.
    pub ce_weights: Option<Array3<f32>>,
    /// Teacher features aligned to the student feature stage.
    pub teacher_features: Option<Array4<f32>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegTraceRow {
    pub iter: usize,
    pub l_u_seg: f64,
    pub l_hr_seg: f64,
    pub l_corr: f64,
    pub l_spatial: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegManifest {
    pub config: SegConfig,
    pub seed: u64,
    pub epochs_run: usize,
    pub final_losses: BTreeMap<String, f64>,
    pub weights_file: String,
}

pub struct SegCheckpoint {
    pub cfg: SegConfig,
    pub epochs_run: usize,
    pub final_losses: BTreeMap<String, f64>,
    pub tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
    pub adam_state: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
}

impl SegCheckpoint {
    pub fn save(&self, base: impl AsRef<Path>) -> Result<()> {
        let base = base.as_ref();
        let bin = base.with_extension("bin");
        let mut all = self.tensors.clone();
        all.extend(self.adam_state.clone());
        write_tensors(&bin, &all)?;
        let manifest = SegManifest {
            config: self.cfg.clone(),
            seed: self.cfg.seed,
            epochs_run: self.epochs_run,
            final_losses: self.final_losses.clone(),
            weights_file: bin.file_name().unwrap().to_string_lossy().into_owned(),
        };
        let json = base.with_extension("json");
        std::fs::write(&json, serde_json::to_string_pretty(&manifest)?)
            .map_err(|e| Error::io(&json, e))?;
        Ok(())
    }

    pub fn load(base: impl AsRef<Path>) -> Result<Self> {
        let base = base.as_ref();
        let json = base.with_extension("json");
        let manifest: SegManifest = serde_json::from_str(
            &std::fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?,
        )?;
        let all = read_tensors(base.with_extension("bin"))?;
        let mut tensors = BTreeMap::new();
        let mut adam_state = BTreeMap::new();
        for (k, v) in all {
            if k.starts_with("adam.") {
                adam_state.insert(k, v);
            } else {
                tensors.insert(k, v);
            }
        }
        Ok(SegCheckpoint {
            cfg: manifest.config,
            epochs_run: manifest.epochs_run,
            final_losses: manifest.final_losses,
            tensors,
            adam_state,
        })
    }
}

fn flip3<T: Clone>(a: &Array3<T>, flip_h: bool, flip_w: bool) -> Array3<T> {
    let mut v = a.view();
    if flip_h {
        v.invert_axis(Axis(1));
    }
    if flip_w {
        v.invert_axis(Axis(2));
    }
    v.as_standard_layout().to_owned()
}

fn flip4<T: Clone>(a: &Array4<T>, flip_h: bool, flip_w: bool) -> Array4<T> {
    let mut v = a.view();
    if flip_h {
        v.invert_axis(Axis(2));
    }
    if flip_w {
        v.invert_axis(Axis(3));
    }
    v.as_standard_layout().to_owned()
}

/// Augmented copy of a sample: in-plane flips applied consistently to every
/// tensor, intensity jitter to the image only.
fn augment_sample(sample: &SegSample, rng: &mut ChaCha8Rng) -> SegSample {
    let flip_h = rng.gen_bool(0.5);
    let flip_w = rng.gen_bool(0.5);
    let scale: f32 = rng.gen_range(0.9..1.1);
    let shift: f32 = rng.gen_range(-0.05..0.05);
    let image = flip3(&sample.image, flip_h, flip_w).mapv(|v| (v * scale + shift).clamp(0.0, 1.0));
    SegSample {
        image,
        labels: flip3(&sample.labels, flip_h, flip_w),
        hr_labels: sample.hr_labels.as_ref().map(|a| flip3(a, flip_h, flip_w)),
        ce_weights: sample.ce_weights.as_ref().map(|a| flip3(a, flip_h, flip_w)),
        teacher_features: sample
            .teacher_features
            .as_ref()
            .map(|a| flip4(a, flip_h, flip_w)),
    }
}

/// Loss component values for logging; disabled components are exactly zero.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossBreakdown {
    pub l_u_seg: f64,
    pub l_hr_seg: f64,
    pub l_corr: f64,
    pub l_spatial: f64,
    pub total: f64,
}

struct BatchLoss {
    total: Var,
    breakdown: LossBreakdown,
}

/// Composite objective over one batch: uncertainty-weighted LR CE, HR
/// CE + Dice, and `lambda` times the two distillation terms, with flags
/// gating each component exactly.
fn batch_loss<F: Scalar>(
    tape: &Tape<F>,
    model: &SegModel<F>,
    leaves: &[Var],
    outputs: &SegOutputsVar,
    batch: &[SegSample],
    iter: usize,
) -> Result<BatchLoss> {
    let cfg = &model.cfg;
    let b = batch.len();
    let (d, h, w) = batch[0].image.dim();

    let mut targets = ArrayD::<u8>::zeros(IxDyn(&[b, d, h, w]));
    let mut weights = ArrayD::<F>::from_elem(IxDyn(&[b, d, h, w]), F::one());
    let mut weighted = false;
    for (bi, s) in batch.iter().enumerate() {
        targets
            .index_axis_mut(Axis(0), bi)
            .assign(&s.labels.mapv(|v| v).into_dyn());
        if cfg.uncertainty_on {
            if let Some(wm) = &s.ce_weights {
                weighted = true;
                weights
                    .index_axis_mut(Axis(0), bi)
                    .assign(&wm.mapv(|v| F::from_f64(v as f64)).into_dyn());
            }
        }
    }
    let l_u = if weighted {
        tape.cross_entropy_mean(outputs.lr_logits, &targets, Some(&weights))
    } else {
        tape.cross_entropy_mean(outputs.lr_logits, &targets, None)
    };
    let l_u_v = tape.scalar_value(l_u).to_f64();

    let mut total = l_u;
    let mut breakdown = LossBreakdown {
        l_u_seg: l_u_v,
        ..Default::default()
    };

    if cfg.hr_head_on {
        let hr_logits = outputs
            .hr_logits
            .expect("hr_head_on model emits hr logits");
        let mut hr_targets = ArrayD::<u8>::zeros(IxDyn(&[b, d * cfg.r, h, w]));
        for (bi, s) in batch.iter().enumerate() {
            let hl = s.hr_labels.as_ref().ok_or_else(|| {
                Error::InvalidArgument(
                    "hr_head_on training needs hr_labels on every sample".into(),
                )
            })?;
            hr_targets
                .index_axis_mut(Axis(0), bi)
                .assign(&hl.mapv(|v| v).into_dyn());
        }
        let l_hr = label_ce_dice_loss(tape, hr_logits, &hr_targets);
        breakdown.l_hr_seg = tape.scalar_value(l_hr).to_f64();
        total = tape.add(total, l_hr);
    }

    if cfg.distill_on && cfg.lambda > 0.0 {
        let (aw, ab) = model
            .adaptor_vars(leaves)
            .expect("distill_on model owns an adaptor");
        let fshape = tape.shape(outputs.features);
        let (fc, fd, fh, fw) = (fshape[1], fshape[2], fshape[3], fshape[4]);
        let beta = cfg.distill_beta;
        let mut corr_acc: Option<Var> = None;
        let mut spat_acc: Option<Var> = None;
        for (bi, s) in batch.iter().enumerate() {
            let teacher = s.teacher_features.as_ref().ok_or_else(|| {
                Error::InvalidArgument(
                    "distill_on training needs teacher features on every sample".into(),
                )
            })?;
            if teacher.dim() != (cfg.teacher_channels, fd, fh, fw) {
                return Err(Error::ShapeMismatch(format!(
                    "teacher features {:?} vs student stage ({}, {fd}, {fh}, {fw})",
                    teacher.dim(),
                    cfg.teacher_channels
                )));
            }
            let item5 = tape.slice_axis_range(outputs.features, 0, bi, bi + 1);
            let item = tape.reshape(item5, &[fc, fd, fh, fw]);
            // Crop both sides to beta-divisible extents.
            let (cd, ch, cw) = (fd - fd % beta.0, fh - fh % beta.1, fw - fw % beta.2);
            let item_c = {
                let a = tape.slice_axis_range(item, 1, 0, cd);
                let a = tape.slice_axis_range(a, 2, 0, ch);
                tape.slice_axis_range(a, 3, 0, cw)
            };
            let teacher_f: Array4<F> = teacher.mapv(|v| F::from_f64(v as f64));
            let teacher_crop = crop_to_divisible(&teacher_f.view(), beta);
            let a_sr = build_affinity(&teacher_crop.view(), beta)?;
            let a_seg = affinity_var(tape, item_c, beta);
            let corr = correlation_loss_var(tape, a_seg, &a_sr);
            corr_acc = Some(match corr_acc {
                Some(acc) => tape.add(acc, corr),
                None => corr,
            });
            let spat = spatial_loss_var(tape, item5, aw, ab, &teacher_f);
            spat_acc = Some(match spat_acc {
                Some(acc) => tape.add(acc, spat),
                None => spat,
            });
        }
        let inv_b = F::from_f64(1.0 / b as f64);
        let corr = tape.scale(corr_acc.unwrap(), inv_b);
        let spat = tape.scale(spat_acc.unwrap(), inv_b);
        breakdown.l_corr = tape.scalar_value(corr).to_f64();
        breakdown.l_spatial = tape.scalar_value(spat).to_f64();
        let lam = F::from_f64(cfg.lambda);
        total = tape.add(total, tape.scale(tape.add(corr, spat), lam));
    }

    breakdown.total = breakdown.l_u_seg
        + breakdown.l_hr_seg
        + cfg.lambda * (breakdown.l_corr + breakdown.l_spatial);
    for (name, v) in [
        ("lr segmentation loss", breakdown.l_u_seg),
        ("hr segmentation loss", breakdown.l_hr_seg),
        ("correlation distillation loss", breakdown.l_corr),
        ("spatial distillation loss", breakdown.l_spatial),
    ] {
        if !v.is_finite() {
            return Err(Error::Diverged {
                iter,
                component: name.into(),
            });
        }
    }
    Ok(BatchLoss { total, breakdown })
}

/// Single-batch evaluation of the composite objective with gradients
/// discarded; exposes the component breakdown for tests and diagnostics.
pub fn total_loss_breakdown(
    model: &SegModel<f32>,
    batch: &[SegSample],
) -> Result<LossBreakdown> {
    let tape = Tape::<f32>::new();
    let leaves = model.params.constants(&tape);
    let input = assemble_images(batch);
    let x = tape.constant(input);
    let outputs = model.forward(&tape, &leaves, x);
    let loss = batch_loss(&tape, model, &leaves, &outputs, batch, 0)?;
    Ok(loss.breakdown)
}

fn assemble_images<F: Scalar>(batch: &[SegSample]) -> ArrayD<F> {
    let (d, h, w) = batch[0].image.dim();
    let mut input = ArrayD::<F>::zeros(IxDyn(&[batch.len(), 1, d, h, w]));
    for (bi, s) in batch.iter().enumerate() {
        input
            .index_axis_mut(Axis(0), bi)
            .index_axis_mut(Axis(0), 0)
            .assign(&s.image.mapv(|v| F::from_f64(v as f64)).into_dyn());
    }
    input
}

/// Trains the segmenter. All samples must share one LR grid shape; HR labels
/// and teacher features are required exactly when the corresponding flags
/// are on. Deterministic given the config seed.
pub fn train_segmenter(
    samples: &[SegSample],
    cfg: &SegConfig,
) -> Result<(SegCheckpoint, Vec<SegTraceRow>)> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let shape = samples[0].image.dim();
    for s in samples {
        if s.image.dim() != shape || s.labels.dim() != shape {
            return Err(Error::ShapeMismatch(
                "all segmentation samples must share one LR shape".into(),
            ));
        }
    }
    let mut model = SegModel::<f32>::new(cfg)?;
    model.check_input_dims(&[1, 1, shape.0, shape.1, shape.2])?;
    let mut adam = Adam::new(&model.params, cfg.learning_rate);
    let steps_per_epoch = samples.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;

    let mut trace = Vec::with_capacity(total_steps);
    let mut iter = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(
            cfg.seed ^ 0xe9c0_1552u64.wrapping_mul(epoch as u64 + 1),
        );
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<SegSample> = chunk
                .iter()
                .map(|&i| {
                    if cfg.augment {
                        augment_sample(&samples[i], &mut rng)
                    } else {
                        samples[i].clone()
                    }
                })
                .collect();
            let (grads, breakdown) = {
                let tape = Tape::<f32>::new();
                let leaves = model.params.leaves(&tape);
                let x = tape.constant(assemble_images(&batch));
                let outputs = model.forward(&tape, &leaves, x);
                let loss = batch_loss(&tape, &model, &leaves, &outputs, &batch, iter)?;
                let mut grads = tape.backward(loss.total);
                let collected: Vec<Option<ArrayD<f32>>> =
                    leaves.iter().map(|&v| grads.take(v)).collect();
                (collected, loss.breakdown)
            };
            let lr_now = Adam::<f32>::cosine_lr(cfg.learning_rate, iter, total_steps);
            adam.step(&mut model.params, &grads, lr_now);
            trace.push(SegTraceRow {
                iter,
                l_u_seg: breakdown.l_u_seg,
                l_hr_seg: breakdown.l_hr_seg,
                l_corr: breakdown.l_corr,
                l_spatial: breakdown.l_spatial,
                total: breakdown.total,
            });
            iter += 1;
        }
    }

    let mut final_losses = BTreeMap::new();
    if let Some(last) = trace.last() {
        final_losses.insert("l_u_seg".into(), last.l_u_seg);
        final_losses.insert("l_hr_seg".into(), last.l_hr_seg);
        final_losses.insert("l_corr".into(), last.l_corr);
        final_losses.insert("l_spatial".into(), last.l_spatial);
        final_losses.insert("total".into(), last.total);
    }
    Ok((
        SegCheckpoint {
            cfg: cfg.clone(),
            epochs_run: cfg.epochs,
            final_losses,
            tensors: model.params.to_f32_map(),
            adam_state: adam.state_to_f32_map(&model.params),
        },
        trace,
    ))
}

/// Argmax masks from a frozen checkpoint: the LR segmentation and, when the
/// HR head exists, the HR segmentation at `r` times the input depth. No HR
/// image is ever needed.
pub fn infer_segmenter(
    lr: &Volume,
    ckpt: &SegCheckpoint,
) -> Result<(LabelVolume, Option<LabelVolume>)> {
    let model = SegModel::<f32>::from_checkpoint(ckpt)?;
    let (d, h, w) = lr.shape();
    model.check_input_dims(&[1, 1, d, h, w])?;
    let k = ckpt.cfg.num_classes;
    let tape = Tape::<f32>::new();
    let leaves = model.params.constants(&tape);
    let mut input = ArrayD::<f32>::zeros(IxDyn(&[1, 1, d, h, w]));
    input
        .index_axis_mut(Axis(0), 0)
        .index_axis_mut(Axis(0), 0)
        .assign(&lr.data.view().into_dyn());
    let x = tape.constant(input);
    let outputs = model.forward(&tape, &leaves, x);

    let argmax = |logits: &Arc<ArrayD<f32>>, depth: usize| -> Array3<u8> {
        let mut out = Array3::<u8>::zeros((depth, h, w));
        for ((z, y, xx), o) in out.indexed_iter_mut() {
            let mut best = (0usize, f32::NEG_INFINITY);
            for c in 0..k {
                let v = logits[[0, c, z, y, xx]];
                if v > best.1 {
                    best = (c, v);
                }
            }
            *o = best.0 as u8;
        }
        out
    };
    let lr_mask = argmax(&tape.value(outputs.lr_logits), d);
    let lr_labels = LabelVolume::new(lr_mask, lr.spacing, k)?;
    let hr_labels = match outputs.hr_logits {
        Some(hrv) => {
            let hr_mask = argmax(&tape.value(hrv), d * ckpt.cfg.r);
            let spacing = (
                lr.spacing.0 / ckpt.cfg.r as f32,
                lr.spacing.1,
                lr.spacing.2,
            );
            Some(LabelVolume::new(hr_mask, spacing, k)?)
        }
        None => None,
    };
    Ok((lr_labels, hr_labels))
}

/// Writes the loss trace as CSV
/// (`iter,L_u_seg,L_HR_seg,L_corr,L_spatial,total`).
pub fn write_trace_csv(path: impl AsRef<Path>, trace: &[SegTraceRow]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("iter,L_u_seg,L_HR_seg,L_corr,L_spatial,total\n");
    for row in trace {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            row.iter, row.l_u_seg, row.l_hr_seg, row.l_corr, row.l_spatial, row.total
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::inverse_uncertainty_weights;
    use ndarray::Array3;

    fn tiny_cfg() -> SegConfig {
        SegConfig {
            base_channels: 4,
            num_classes: 2,
            r: 2,
            lambda: 1.0,
            epochs: 2,
            batch_size: 2,
            learning_rate: 1e-3,
            seed: 5,
            teacher_channels: 4,
            ..Default::default()
        }
    }

    fn sample(seed: u64, with_extras: bool, cfg: &SegConfig) -> SegSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, h, w) = (4usize, 8usize, 8usize);
        let image = Array3::from_shape_fn((d, h, w), |_| rng.gen_range(0.0..1.0f32));
        let labels = Array3::from_shape_fn((d, h, w), |(z, y, x)| {
            u8::from(z >= 2 && y > 2 && x > 2)
        });
        let (hr_labels, ce_weights, teacher_features) = if with_extras {
            let hr = Array3::from_shape_fn((d * cfg.r, h, w), |(z, y, x)| {
                u8::from(z >= 2 * cfg.r && y > 2 && x > 2)
            });
            let u = Array3::from_shape_fn((d, h, w), |_| rng.gen_range(0.1..0.9f32));
            let (fd, fh, fw) = (d / 2, h / 2, w / 2);
            let feats = Array4::from_shape_fn((cfg.teacher_channels, fd, fh, fw), |_| {
                rng.gen_range(-1.0..1.0f32)
            });
            (Some(hr), Some(inverse_uncertainty_weights(&u)), Some(feats))
        } else {
            (None, None, None)
        };
        SegSample {
            image,
            labels,
            hr_labels,
            ce_weights,
            teacher_features,
        }
    }

    #[test]
    fn forward_shape_contract() {
        let cfg = tiny_cfg();
        let model = SegModel::<f32>::new(&cfg).unwrap();
        let tape = Tape::<f32>::new();
        let leaves = model.params.constants(&tape);
        let x = tape.constant(ArrayD::from_elem(IxDyn(&[1, 1, 4, 8, 8]), 0.3f32));
        let out = model.forward(&tape, &leaves, x);
        assert_eq!(tape.shape(out.lr_logits), vec![1, 2, 4, 8, 8]);
        assert_eq!(tape.shape(out.hr_logits.unwrap()), vec![1, 2, 8, 8, 8]);
        assert_eq!(tape.shape(out.features), vec![1, 8, 2, 4, 4]);
    }

    #[test]
    fn hr_head_flag_does_not_change_lr_path_at_init() {
        let cfg_on = tiny_cfg();
        let cfg_off = SegConfig {
            hr_head_on: false,
            ..cfg_on.clone()
        };
        let m_on = SegModel::<f32>::new(&cfg_on).unwrap();
        let m_off = SegModel::<f32>::new(&cfg_off).unwrap();
        let input = ArrayD::from_shape_fn(IxDyn(&[1, 1, 4, 8, 8]), |i| {
            ((i[2] * 31 + i[3] * 7 + i[4]) % 17) as f32 / 17.0
        });
        let run = |m: &SegModel<f32>| -> ArrayD<f32> {
            let tape = Tape::<f32>::new();
            let leaves = m.params.constants(&tape);
            let x = tape.constant(input.clone());
            let out = m.forward(&tape, &leaves, x);
            tape.value(out.lr_logits).as_ref().clone()
        };
        let on = run(&m_on);
        let off = run(&m_off);
        assert_eq!(on, off, "lr path must be bit-identical");
        assert!(run(&m_off) == off, "determinism under fixed seed");
    }

    #[test]
    fn flags_off_reduces_to_plain_ce() {
        let cfg = SegConfig {
            uncertainty_on: false,
            distill_on: false,
            hr_head_on: false,
            lambda: 0.0,
            ..tiny_cfg()
        };
        let model = SegModel::<f32>::new(&cfg).unwrap();
        let s = sample(1, false, &cfg);
        let breakdown = total_loss_breakdown(&model, std::slice::from_ref(&s)).unwrap();
        assert_eq!(breakdown.l_hr_seg, 0.0);
        assert_eq!(breakdown.l_corr, 0.0);
        assert_eq!(breakdown.l_spatial, 0.0);
        assert_eq!(breakdown.total, breakdown.l_u_seg);

        // The component is exactly the plain CE of the LR logits.
        let tape = Tape::<f32>::new();
        let leaves = model.params.constants(&tape);
        let x = tape.constant(assemble_images::<f32>(std::slice::from_ref(&s)));
        let out = model.forward(&tape, &leaves, x);
        let mut targets = ArrayD::<u8>::zeros(IxDyn(&[1, 4, 8, 8]));
        targets
            .index_axis_mut(Axis(0), 0)
            .assign(&s.labels.mapv(|v| v).into_dyn());
        let ce = tape.cross_entropy_mean(out.lr_logits, &targets, None);
        assert_eq!(breakdown.l_u_seg, tape.scalar_value(ce) as f64);
    }

    #[test]
    fn breakdown_components_sum_to_total() {
        let cfg = SegConfig {
            lambda: 0.7,
            ..tiny_cfg()
        };
        let model = SegModel::<f32>::new(&cfg).unwrap();
        let s = sample(2, true, &cfg);
        let b = total_loss_breakdown(&model, std::slice::from_ref(&s)).unwrap();
        assert!(b.l_hr_seg > 0.0 && b.l_corr > 0.0 && b.l_spatial > 0.0);
        let sum = b.l_u_seg + b.l_hr_seg + 0.7 * (b.l_corr + b.l_spatial);
        assert!((sum - b.total).abs() < 1e-6);
    }

    #[test]
    fn training_smoke_deterministic_and_loss_drops() {
        let cfg = SegConfig {
            epochs: 30,
            augment: false,
            learning_rate: 3e-3,
            ..tiny_cfg()
        };
        let samples: Vec<SegSample> = (0..4).map(|i| sample(10 + i, true, &cfg)).collect();
        let (_, trace_a) = train_segmenter(&samples, &cfg).unwrap();
        let (_, trace_b) = train_segmenter(&samples, &cfg).unwrap();
        assert_eq!(trace_a.len(), trace_b.len());
        for (a, b) in trace_a.iter().zip(trace_b.iter()) {
            assert_eq!(a.total, b.total);
        }
        let first: f64 = trace_a[..2].iter().map(|r| r.total).sum::<f64>() / 2.0;
        let last: f64 = trace_a[trace_a.len() - 2..]
            .iter()
            .map(|r| r.total)
            .sum::<f64>()
            / 2.0;
        assert!(
            last < first * 0.5,
            "training loss should drop by half: {first} -> {last}"
        );
        assert!(trace_a.iter().all(|r| r.total.is_finite()));
    }

    #[test]
    fn inference_matches_independent_argmax_and_shapes() {
        let cfg = SegConfig {
            epochs: 2,
            augment: false,
            ..tiny_cfg()
        };
        let samples: Vec<SegSample> = (0..2).map(|i| sample(30 + i, true, &cfg)).collect();
        let (ckpt, _) = train_segmenter(&samples, &cfg).unwrap();
        let lr = Volume::new(samples[0].image.clone(), (2.0, 1.0, 1.0)).unwrap();
        let (lr_mask, hr_mask) = infer_segmenter(&lr, &ckpt).unwrap();
        let hr_mask = hr_mask.unwrap();
        assert_eq!(lr_mask.shape(), (4, 8, 8));
        assert_eq!(hr_mask.shape(), (8, 8, 8));
        assert!(lr_mask.data.iter().all(|&v| v < 2));
        assert!(hr_mask.data.iter().all(|&v| v < 2));

        // Independent forward pass + slicewise argmax oracle.
        let model = SegModel::<f32>::from_checkpoint(&ckpt).unwrap();
        let tape = Tape::<f32>::new();
        let leaves = model.params.constants(&tape);
        let mut input = ArrayD::<f32>::zeros(IxDyn(&[1, 1, 4, 8, 8]));
        input
            .index_axis_mut(Axis(0), 0)
            .index_axis_mut(Axis(0), 0)
            .assign(&lr.data.view().into_dyn());
        let x = tape.constant(input);
        let out = model.forward(&tape, &leaves, x);
        let logits = tape.value(out.lr_logits);
        for ((z, y, xx), &m) in lr_mask.data.indexed_iter() {
            let expect = if logits[[0, 1, z, y, xx]] > logits[[0, 0, z, y, xx]] {
                1u8
            } else {
                0
            };
            assert_eq!(m, expect);
        }

        // Checkpoint round trip preserves behavior.
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("seg");
        ckpt.save(&base).unwrap();
        let loaded = SegCheckpoint::load(&base).unwrap();
        let (lr2, _) = infer_segmenter(&lr, &loaded).unwrap();
        assert_eq!(lr2.data, lr_mask.data);
    }

    #[test]
    fn missing_extras_are_rejected_when_flags_on() {
        let cfg = tiny_cfg();
        let samples = vec![sample(50, false, &cfg)];
        assert!(train_segmenter(&samples, &cfg).is_err());
    }
}
