//! Self-supervised super-resolution of annotated volumes.
//!
//! The model maps an LR image with its annotation (one-hot channels) to an
//! HR image, HR annotation logits, and a per-voxel uncertainty map, raising
//! the depth axis by the scale factor `r`. The backbone is a three-level 3D
//! encoder-decoder with skip connections whose output keeps the input depth;
//! the head reaches `r x` depth with channel-to-depth reshaping: each of `N`
//! branches predicts `r` sub-slice channels that interleave into depth, and
//! a branch-softmax attention mixes the branches per voxel. The uncertainty
//! map comes from the attention stack and is trained with the
//! divided-residual loss, so it converges toward the reconstruction error.
//!
//! Training pairs are synthesized along an in-plane axis
//! ([`crate::degrade::make_selfsr_pairs`]); inference applies the same model
//! along the through-plane axis.

use crate::degrade::PairSet;
use crate::error::{Error, Result};
use crate::losses::{l1_mean, label_ce_dice_loss, sr_uncertainty_loss};
use crate::nn::params::{read_tensors, write_tensors};
use crate::nn::{Adam, ParamSet, Scalar, Tape, Var};
use crate::volume::{check_aligned, LabelVolume, Volume};
use ndarray::{Array3, Array4, ArrayD, Axis, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

const LRELU_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelfSrConfig {
    /// Through-plane scale factor.
    pub r: usize,
    /// Backbone feature channels.
    pub channels: usize,
    /// Number of intermediate prediction branches.
    pub branches: usize,
    pub num_classes: usize,
    pub iters_total: usize,
    /// Iteration index at which the uncertainty-guided image loss replaces
    /// the plain L1 term.
    pub iters_uncertainty_on: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// LR patch shape `(z, y, x)`; the degraded-axis extent is multiplied by
    /// `r` in the HR patch.
    pub patch_lr: (usize, usize, usize),
    /// Also synthesize pairs degraded along y.
    pub augment_y_axis: bool,
    pub seed: u64,
}

impl Default for SelfSrConfig {
    fn default() -> Self {
        SelfSrConfig {
            r: 4,
            channels: 16,
            branches: 4,
            num_classes: 2,
            iters_total: 3000,
            iters_uncertainty_on: 2400,
            batch_size: 8,
            learning_rate: 1e-3,
            patch_lr: (16, 16, 8),
            augment_y_axis: false,
            seed: 0,
        }
    }
}

impl SelfSrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.branches < 2 {
            return Err(Error::Config("selfsr: branches must be >= 2".into()));
        }
        if self.iters_uncertainty_on >= self.iters_total {
            return Err(Error::Config(
                "selfsr: iters_uncertainty_on must be < iters_total".into(),
            ));
        }
        if self.r < 2 {
            return Err(Error::Config("selfsr: r must be >= 2".into()));
        }
        if self.channels < 4 || self.num_classes < 2 || self.batch_size == 0 {
            return Err(Error::Config("selfsr: degenerate model size".into()));
        }
        Ok(())
    }

    pub fn input_channels(&self) -> usize {
        1 + self.num_classes
    }
}

#[derive(Debug, Clone)]
struct Layout {
    enc1: (usize, usize),
    enc2: (usize, usize),
    bott1: (usize, usize),
    bott2: (usize, usize),
    red2: (usize, usize),
    dec2: (usize, usize),
    red1: (usize, usize),
    dec1: (usize, usize),
    merge: (usize, usize),
    branch_img: Vec<(usize, usize)>,
    branch_lab: Vec<(usize, usize)>,
    branch_attn: Vec<(usize, usize)>,
    u_conv: (usize, usize),
}

/// Branch-resolved head outputs plus the mixed results.
pub struct UasrOutputs {
    pub branch_images: Vec<Var>,
    pub branch_label_logits: Vec<Var>,
    /// Softmax attention per branch; sums to one across branches at every
    /// voxel.
    pub attention: Vec<Var>,
    pub image: Var,
    pub label_logits: Var,
    pub uncertainty: Var,
}

pub struct SelfSrModel<F: Scalar> {
    pub cfg: SelfSrConfig,
    pub params: ParamSet<F>,
    layout: Layout,
}

impl<F: Scalar> SelfSrModel<F> {
    pub fn new(cfg: &SelfSrConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = ParamSet::new();
        let c = cfg.channels;
        let k3 = (3, 3, 3);
        let k13 = (1, 3, 3);
        let in_ch = cfg.input_channels();
        let layout = Layout {
            enc1: params.add_conv("enc1", c, in_ch, k3, &mut rng),
            enc2: params.add_conv("enc2", 2 * c, c, k3, &mut rng),
            bott1: params.add_conv("bott1", 4 * c, 2 * c, k3, &mut rng),
            bott2: params.add_conv("bott2", 4 * c, 4 * c, k3, &mut rng),
            red2: params.add_conv("red2", 2 * c, 4 * c, k3, &mut rng),
            dec2: params.add_conv("dec2", 2 * c, 4 * c, k3, &mut rng),
            red1: params.add_conv("red1", c, 2 * c, k3, &mut rng),
            dec1: params.add_conv("dec1", c, 2 * c, k3, &mut rng),
            // The head sees backbone features with the raw input stacked on,
            // so copy-like reconstructions are cheap to represent.
            merge: params.add_conv("merge", c, c + in_ch, k13, &mut rng),
            branch_img: (0..cfg.branches)
                .map(|j| params.add_conv(&format!("branch{j}.image"), cfg.r, c, k3, &mut rng))
                .collect(),
            branch_lab: (0..cfg.branches)
                .map(|j| {
                    params.add_conv(
                        &format!("branch{j}.labels"),
                        cfg.r * cfg.num_classes,
                        c,
                        k3,
                        &mut rng,
                    )
                })
                .collect(),
            branch_attn: (0..cfg.branches)
                .map(|j| params.add_conv(&format!("branch{j}.attention"), cfg.r, c, k3, &mut rng))
                .collect(),
            u_conv: params.add_conv("uncertainty", 1, cfg.branches, k3, &mut rng),
        };
        Ok(SelfSrModel {
            cfg: cfg.clone(),
            params,
            layout,
        })
    }

    pub fn from_checkpoint(ckpt: &SelfSrCheckpoint) -> Result<Self> {
        let mut model = SelfSrModel::new(&ckpt.cfg)?;
        model.params.load_f32_map(&ckpt.tensors)?;
        Ok(model)
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

    fn act(&self, tape: &Tape<F>, x: Var) -> Var {
        tape.leaky_relu(x, F::from_f64(LRELU_SLOPE))
    }

    /// Checks the spatial dims fit the two-level pooling ladder.
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

    /// Backbone encoder-decoder; output keeps the input depth with
    /// `channels` feature maps.
    pub fn backbone(&self, tape: &Tape<F>, leaves: &[Var], x: Var) -> Var {
        let p3 = (1, 1, 1);
        let e1 = self.act(tape, self.conv(tape, leaves, self.layout.enc1, x, p3));
        let d1 = tape.avg_pool3d(e1, (2, 2, 2));
        let e2 = self.act(tape, self.conv(tape, leaves, self.layout.enc2, d1, p3));
        let d2 = tape.avg_pool3d(e2, (2, 2, 2));
        let b = self.act(tape, self.conv(tape, leaves, self.layout.bott1, d2, p3));
        let b = self.act(tape, self.conv(tape, leaves, self.layout.bott2, b, p3));
        let r2 = self.act(tape, self.conv(tape, leaves, self.layout.red2, b, p3));
        let u2 = tape.upsample_nearest3d(r2, (2, 2, 2));
        let c2 = tape.concat(1, &[u2, e2]);
        let f2 = self.act(tape, self.conv(tape, leaves, self.layout.dec2, c2, p3));
        let r1 = self.act(tape, self.conv(tape, leaves, self.layout.red1, f2, p3));
        let u1 = tape.upsample_nearest3d(r1, (2, 2, 2));
        let c1 = tape.concat(1, &[u1, e1]);
        self.act(tape, self.conv(tape, leaves, self.layout.dec1, c1, p3))
    }

    /// Head over backbone features: merge conv, N prediction branches,
    /// branch-softmax attention mixing, and the sigmoid uncertainty map.
    /// Output depth is `r` times the feature depth.
    pub fn uasr_head(&self, tape: &Tape<F>, leaves: &[Var], features: Var) -> UasrOutputs {
        let r = self.cfg.r;
        let k = self.cfg.num_classes;
        let fm = self.act(
            tape,
            self.conv(tape, leaves, self.layout.merge, features, (0, 1, 1)),
        );
        let p3 = (1, 1, 1);
        let mut branch_images = Vec::with_capacity(self.cfg.branches);
        let mut branch_label_logits = Vec::with_capacity(self.cfg.branches);
        let mut attn_logits = Vec::with_capacity(self.cfg.branches);
        for j in 0..self.cfg.branches {
            let img = self.conv(tape, leaves, self.layout.branch_img[j], fm, p3);
            branch_images.push(tape.tanh(tape.channels_to_depth(img, r)));
            let lab = self.conv(tape, leaves, self.layout.branch_lab[j], fm, p3);
            branch_label_logits.push(tape.channels_to_depth(lab, r));
            let att = self.conv(tape, leaves, self.layout.branch_attn[j], fm, p3);
            attn_logits.push(tape.channels_to_depth(att, r));
        }
        let stacked = tape.concat(1, &attn_logits);
        let attn_stack = tape.softmax_axis(stacked, 1);
        let attention: Vec<Var> = (0..self.cfg.branches)
            .map(|j| tape.slice_axis_range(attn_stack, 1, j, j + 1))
            .collect();
        let mut image: Option<Var> = None;
        let mut label_logits: Option<Var> = None;
        for j in 0..self.cfg.branches {
            let wi = tape.mul(attention[j], branch_images[j]);
            image = Some(match image {
                Some(acc) => tape.add(acc, wi),
                None => wi,
            });
            let wk = tape.repeat_axis(attention[j], 1, k);
            let wl = tape.mul(wk, branch_label_logits[j]);
            label_logits = Some(match label_logits {
                Some(acc) => tape.add(acc, wl),
                None => wl,
            });
        }
        let u_pre = self.conv(tape, leaves, self.layout.u_conv, attn_stack, p3);
        let uncertainty = tape.sigmoid(u_pre);
        UasrOutputs {
            branch_images,
            branch_label_logits,
            attention,
            image: image.unwrap(),
            label_logits: label_logits.unwrap(),
            uncertainty,
        }
    }

    pub fn forward(&self, tape: &Tape<F>, leaves: &[Var], x: Var) -> (Var, UasrOutputs) {
        let features = self.backbone(tape, leaves, x);
        let head_input = tape.concat(1, &[features, x]);
        let outputs = self.uasr_head(tape, leaves, head_input);
        (features, outputs)
    }

    /// Frozen-weights backbone pass over a `(B, 1 + K, D, H, W)` batch.
    pub fn backbone_forward(&self, batch: &ArrayD<F>) -> Result<ArrayD<F>> {
        let shape = batch.shape();
        if shape.len() != 5 || shape[1] != self.cfg.input_channels() {
            return Err(Error::ShapeMismatch(format!(
                "backbone input must be (B, {}, D, H, W), got {shape:?}",
                self.cfg.input_channels()
            )));
        }
        self.check_input_dims(shape)?;
        let tape = Tape::new();
        let leaves = self.params.constants(&tape);
        let x = tape.constant(batch.clone());
        let f = self.backbone(&tape, &leaves, x);
        Ok(tape.value(f).as_ref().clone())
    }

    #[cfg(test)]
    pub(crate) fn attention_bias_indices(&self) -> Vec<usize> {
        self.layout.branch_attn.iter().map(|&(_, b)| b).collect()
    }
}

/// Stacks an image and one-hot annotation channels into the network input
/// layout `(1 + K, D, H, W)`.
pub fn stack_input_channels(
    image: &Array3<f32>,
    labels: &Array3<u8>,
    num_classes: usize,
) -> Array4<f32> {
    let (d, h, w) = image.dim();
    let mut out = Array4::<f32>::zeros((1 + num_classes, d, h, w));
    out.index_axis_mut(Axis(0), 0).assign(image);
    for ((z, y, x), &l) in labels.indexed_iter() {
        out[[1 + l as usize, z, y, x]] = 1.0;
    }
    out
}

/// Permutes a `(z, y, x)` patch so the degraded axis becomes axis 0 (the
/// network depth axis).
fn to_net_axes<T: Clone>(a: &Array3<T>, degradation_axis: usize) -> Array3<T> {
    match degradation_axis {
        0 => a.clone(),
        1 => a.clone().permuted_axes([1, 2, 0]).as_standard_layout().to_owned(),
        2 => a.clone().permuted_axes([2, 0, 1]).as_standard_layout().to_owned(),
        _ => unreachable!(),
    }
}

/// One row of the training loss trace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelfSrTraceRow {
    pub iter: usize,
    pub loss_image: f64,
    pub loss_label: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelfSrManifest {
    pub config: SelfSrConfig,
    pub seed: u64,
    pub iterations_run: usize,
    pub final_losses: BTreeMap<String, f64>,
    pub weights_file: String,
}

/// Trained self-SR model: weights, optimizer state, and provenance.
pub struct SelfSrCheckpoint {
    pub cfg: SelfSrConfig,
    pub iterations_run: usize,
    pub final_losses: BTreeMap<String, f64>,
    pub tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
    pub adam_state: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
}

impl SelfSrCheckpoint {
    /// Writes `<base>.bin` (weights + optimizer state) and `<base>.json`
    /// (manifest with config, seed, iteration count, final losses).
    pub fn save(&self, base: impl AsRef<Path>) -> Result<()> {
        let base = base.as_ref();
        let bin = base.with_extension("bin");
        let mut all = self.tensors.clone();
        all.extend(self.adam_state.clone());
        write_tensors(&bin, &all)?;
        let manifest = SelfSrManifest {
            config: self.cfg.clone(),
            seed: self.cfg.seed,
            iterations_run: self.iterations_run,
            final_losses: self.final_losses.clone(),
            weights_file: bin
                .file_name()
                .unwrap()
                .to_string_lossy()
                .into_owned(),
        };
        let json = base.with_extension("json");
        std::fs::write(&json, serde_json::to_string_pretty(&manifest)?)
            .map_err(|e| Error::io(&json, e))?;
        Ok(())
    }

    pub fn load(base: impl AsRef<Path>) -> Result<Self> {
        let base = base.as_ref();
        let json = base.with_extension("json");
        let manifest: SelfSrManifest = serde_json::from_str(
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
        Ok(SelfSrCheckpoint {
            cfg: manifest.config,
            iterations_run: manifest.iterations_run,
            final_losses: manifest.final_losses,
            tensors,
            adam_state,
        })
    }
}

struct Batch {
    input: ArrayD<f32>,
    target_image: ArrayD<f32>,
    target_labels: ArrayD<u8>,
}

fn assemble_batch(pairs: &PairSet, indices: &[usize], num_classes: usize) -> Batch {
    let axis = pairs.degradation_axis;
    let first = &pairs.pairs[indices[0]];
    let lr_net = to_net_axes(&first.lr.data, axis);
    let hr_net = to_net_axes(&first.hr.data, axis);
    let (d, h, w) = lr_net.dim();
    let (rd, _, _) = hr_net.dim();
    let b = indices.len();
    let mut input = ArrayD::<f32>::zeros(IxDyn(&[b, 1 + num_classes, d, h, w]));
    let mut target_image = ArrayD::<f32>::zeros(IxDyn(&[b, 1, rd, h, w]));
    let mut target_labels = ArrayD::<u8>::zeros(IxDyn(&[b, rd, h, w]));
    for (bi, &pi) in indices.iter().enumerate() {
        let pair = &pairs.pairs[pi];
        let lr = to_net_axes(&pair.lr.data, axis);
        let lrl = to_net_axes(&pair.lr_labels.data, axis);
        let hr = to_net_axes(&pair.hr.data, axis);
        let hrl = to_net_axes(&pair.hr_labels.data, axis);
        let stacked = stack_input_channels(&lr, &lrl, num_classes);
        input
            .index_axis_mut(Axis(0), bi)
            .assign(&stacked.view().into_dyn());
        target_image
            .index_axis_mut(Axis(0), bi)
            .index_axis_mut(Axis(0), 0)
            .assign(&hr.view().into_dyn());
        target_labels
            .index_axis_mut(Axis(0), bi)
            .assign(&hrl.mapv(|v| v).view().into_dyn());
    }
    Batch {
        input,
        target_image,
        target_labels,
    }
}

/// Trains the self-SR model on synthesized pairs. The image term is plain L1
/// until `iters_uncertainty_on`, then switches to the uncertainty-modulated
/// form; annotations always use CE + Dice. Deterministic given the config
/// seed; resuming continues the iteration count and optimizer state exactly.
pub fn train_selfsr(
    pairs: &PairSet,
    cfg: &SelfSrConfig,
    resume: Option<&SelfSrCheckpoint>,
) -> Result<(SelfSrCheckpoint, Vec<SelfSrTraceRow>)> {
    cfg.validate()?;
    if pairs.pairs.is_empty() {
        return Err(Error::InvalidArgument("empty pair set".into()));
    }
    if pairs.r != cfg.r {
        return Err(Error::Config(format!(
            "pair set r = {} but config r = {}",
            pairs.r, cfg.r
        )));
    }
    for pair in &pairs.pairs {
        if pair.lr_labels.num_classes > cfg.num_classes {
            return Err(Error::Config(
                "pair labels exceed configured num_classes".into(),
            ));
        }
    }
    let mut model = SelfSrModel::<f32>::new(cfg)?;
    let mut adam = Adam::new(&model.params, cfg.learning_rate);
    let mut start_iter = 0;
    if let Some(ck) = resume {
        model.params.load_f32_map(&ck.tensors)?;
        adam.load_state_f32_map(&model.params, &ck.adam_state);
        start_iter = ck.iterations_run;
    }
    {
        let probe = to_net_axes(&pairs.pairs[0].lr.data, pairs.degradation_axis);
        let (d, h, w) = probe.dim();
        model.check_input_dims(&[1, 1, d, h, w])?;
    }

    let mut trace = Vec::with_capacity(cfg.iters_total.saturating_sub(start_iter));
    for iter in start_iter..cfg.iters_total {
        // Stateless per-iteration sampling keeps resumed runs identical.
        let mut rng =
            ChaCha8Rng::seed_from_u64(cfg.seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(iter as u64 + 1)));
        let indices: Vec<usize> = (0..cfg.batch_size)
            .map(|_| rng.gen_range(0..pairs.pairs.len()))
            .collect();
        let batch = assemble_batch(pairs, &indices, cfg.num_classes);

        let (grads, l_img, l_lab) = {
            let tape = Tape::<f32>::new();
            let leaves = model.params.leaves(&tape);
            let x = tape.constant(batch.input);
            let (_, uasr) = model.forward(&tape, &leaves, x);
            let target = tape.constant(batch.target_image);
            let loss_image = if iter >= cfg.iters_uncertainty_on {
                sr_uncertainty_loss(&tape, uasr.image, target, uasr.uncertainty)
            } else {
                l1_mean(&tape, uasr.image, target)
            };
            let loss_label = label_ce_dice_loss(&tape, uasr.label_logits, &batch.target_labels);
            let total = tape.add(loss_image, loss_label);
            let l_img = tape.scalar_value(loss_image) as f64;
            let l_lab = tape.scalar_value(loss_label) as f64;
            if !l_img.is_finite() {
                return Err(Error::Diverged {
                    iter,
                    component: "image loss".into(),
                });
            }
            if !l_lab.is_finite() {
                return Err(Error::Diverged {
                    iter,
                    component: "label loss".into(),
                });
            }
            let mut grads = tape.backward(total);
            let collected: Vec<Option<ArrayD<f32>>> =
                leaves.iter().map(|&v| grads.take(v)).collect();
            (collected, l_img, l_lab)
        };
        let lr_now = Adam::<f32>::cosine_lr(cfg.learning_rate, iter, cfg.iters_total);
        adam.step(&mut model.params, &grads, lr_now);
        trace.push(SelfSrTraceRow {
            iter,
            loss_image: l_img,
            loss_label: l_lab,
            total: l_img + l_lab,
        });
    }

    let mut final_losses = BTreeMap::new();
    if let Some(last) = trace.last() {
        final_losses.insert("image".to_string(), last.loss_image);
        final_losses.insert("label".to_string(), last.loss_label);
        final_losses.insert("total".to_string(), last.total);
    }
    let ckpt = SelfSrCheckpoint {
        cfg: cfg.clone(),
        iterations_run: cfg.iters_total,
        final_losses,
        tensors: model.params.to_f32_map(),
        adam_state: adam.state_to_f32_map(&model.params),
    };
    Ok((ckpt, trace))
}

/// Self-SR outputs for one case, consumed by the segmentation stage.
#[derive(Debug, Clone)]
pub struct PseudoHrBundle {
    pub image: Volume,
    pub labels: LabelVolume,
    /// Per-voxel uncertainty in (0, 1) at HR depth.
    pub uncertainty: Array3<f32>,
    /// Backbone features `(C, D, H, W)` at the LR depth.
    pub features: Array4<f32>,
}

/// Applies a trained checkpoint along the through-plane axis, multiplying
/// depth by `r`. Annotations come from the argmax of the label logits; the
/// bundle also carries the uncertainty map and backbone features for the
/// downstream stages.
pub fn infer_selfsr(
    lr: &Volume,
    lr_labels: &LabelVolume,
    ckpt: &SelfSrCheckpoint,
) -> Result<PseudoHrBundle> {
    check_aligned(lr, lr_labels)?;
    if lr_labels.num_classes > ckpt.cfg.num_classes {
        return Err(Error::Config(
            "labels exceed checkpoint num_classes".into(),
        ));
    }
    let model = SelfSrModel::<f32>::from_checkpoint(ckpt)?;
    let (d, h, w) = lr.shape();
    model.check_input_dims(&[1, 1, d, h, w])?;
    let r = ckpt.cfg.r;
    let k = ckpt.cfg.num_classes;

    let stacked = stack_input_channels(&lr.data, &lr_labels.data, k);
    let mut input = ArrayD::<f32>::zeros(IxDyn(&[1, 1 + k, d, h, w]));
    input
        .index_axis_mut(Axis(0), 0)
        .assign(&stacked.view().into_dyn());

    let tape = Tape::<f32>::new();
    let leaves = model.params.constants(&tape);
    let x = tape.constant(input);
    let (features, uasr) = model.forward(&tape, &leaves, x);

    let img_val = tape.value(uasr.image);
    let mut image = Array3::<f32>::zeros((r * d, h, w));
    for ((z, y, xx), v) in image.indexed_iter_mut() {
        *v = img_val[[0, 0, z, y, xx]].clamp(0.0, 1.0);
    }
    let logits = tape.value(uasr.label_logits);
    let mut labels = Array3::<u8>::zeros((r * d, h, w));
    for ((z, y, xx), out) in labels.indexed_iter_mut() {
        let mut best = (0usize, f32::NEG_INFINITY);
        for c in 0..k {
            let v = logits[[0, c, z, y, xx]];
            if v > best.1 {
                best = (c, v);
            }
        }
        *out = best.0 as u8;
    }
    let u_val = tape.value(uasr.uncertainty);
    let mut uncertainty = Array3::<f32>::zeros((r * d, h, w));
    for ((z, y, xx), v) in uncertainty.indexed_iter_mut() {
        // Sigmoid output can round to exactly 0 or 1 in f32; keep the open
        // interval.
        *v = u_val[[0, 0, z, y, xx]].clamp(1e-7, 1.0 - 1e-7);
    }
    let f_val = tape.value(features);
    let c = ckpt.cfg.channels;
    let mut feat = Array4::<f32>::zeros((c, d, h, w));
    for ((ci, z, y, xx), v) in feat.indexed_iter_mut() {
        *v = f_val[[0, ci, z, y, xx]];
    }

    let spacing = (lr.spacing.0 / r as f32, lr.spacing.1, lr.spacing.2);
    Ok(PseudoHrBundle {
        image: Volume::new(image, spacing)?,
        labels: LabelVolume::new(labels, spacing, k)?,
        uncertainty,
        features: feat,
    })
}

/// Writes the loss trace as CSV (`iter,loss_image,loss_label,total`).
pub fn write_trace_csv(path: impl AsRef<Path>, trace: &[SelfSrTraceRow]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("iter,loss_image,loss_label,total\n");
    for row in trace {
        out.push_str(&format!(
            "{},{},{},{}\n",
            row.iter, row.loss_image, row.loss_label, row.total
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degrade::make_selfsr_pairs;
    use ndarray::Array3;

    fn tiny_cfg() -> SelfSrConfig {
        SelfSrConfig {
            r: 2,
            channels: 4,
            branches: 2,
            num_classes: 2,
            iters_total: 8,
            iters_uncertainty_on: 4,
            batch_size: 2,
            learning_rate: 1e-3,
            patch_lr: (8, 8, 4),
            augment_y_axis: false,
            seed: 3,
        }
    }

    fn random_input(cfg: &SelfSrConfig, shape: (usize, usize, usize), seed: u64) -> ArrayD<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_fn(
            IxDyn(&[1, cfg.input_channels(), shape.0, shape.1, shape.2]),
            |_| rng.gen_range(0.0..1.0),
        )
    }

    #[test]
    fn attention_is_partition_of_unity_and_u_in_open_interval() {
        for seed in 0..4u64 {
            let cfg = SelfSrConfig {
                seed,
                ..tiny_cfg()
            };
            let model = SelfSrModel::<f64>::new(&cfg).unwrap();
            let tape = Tape::<f64>::new();
            let leaves = model.params.constants(&tape);
            let x = tape.constant(random_input(&cfg, (4, 8, 8), seed + 50));
            let (_, uasr) = model.forward(&tape, &leaves, x);
            let mut sum: Option<ArrayD<f64>> = None;
            for &a in &uasr.attention {
                let v = tape.value(a).as_ref().clone();
                sum = Some(match sum {
                    Some(s) => s + v,
                    None => v,
                });
            }
            let sum = sum.unwrap();
            for &s in sum.iter() {
                assert!((s - 1.0).abs() < 1e-5, "attention sum {s}");
            }
            let u = tape.value(uasr.uncertainty);
            assert!(u.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn mixture_stays_in_branch_hull() {
        let cfg = tiny_cfg();
        let model = SelfSrModel::<f64>::new(&cfg).unwrap();
        let tape = Tape::<f64>::new();
        let leaves = model.params.constants(&tape);
        let x = tape.constant(random_input(&cfg, (4, 8, 8), 9));
        let (_, uasr) = model.forward(&tape, &leaves, x);
        let img = tape.value(uasr.image);
        let b0 = tape.value(uasr.branch_images[0]);
        let b1 = tape.value(uasr.branch_images[1]);
        for ((v, &a), &b) in img.iter().zip(b0.iter()).zip(b1.iter()) {
            let lo = a.min(b) - 1e-5;
            let hi = a.max(b) + 1e-5;
            assert!(*v >= lo && *v <= hi);
        }
    }

    #[test]
    fn saturated_attention_selects_single_branch() {
        let cfg = tiny_cfg();
        let mut model = SelfSrModel::<f64>::new(&cfg).unwrap();
        let bias_ids = model.attention_bias_indices();
        // Zero the attention conv weights and force branch 0 via biases.
        for (j, &bi) in bias_ids.iter().enumerate() {
            let t = model.params.tensor_mut(bi);
            t.fill(if j == 0 { 25.0 } else { -25.0 });
            let wi = bi - 1;
            model.params.tensor_mut(wi).fill(0.0);
        }
        let tape = Tape::<f64>::new();
        let leaves = model.params.constants(&tape);
        let x = tape.constant(random_input(&cfg, (4, 8, 8), 10));
        let (_, uasr) = model.forward(&tape, &leaves, x);
        let img = tape.value(uasr.image);
        let b0 = tape.value(uasr.branch_images[0]);
        for (v, &b) in img.iter().zip(b0.iter()) {
            assert!((v - b).abs() < 1e-4);
        }
    }

    #[test]
    fn backbone_is_deterministic_and_batch_consistent() {
        let cfg = tiny_cfg();
        let model = SelfSrModel::<f64>::new(&cfg).unwrap();
        let single_a = random_input(&cfg, (4, 8, 8), 21);
        let single_b = random_input(&cfg, (4, 8, 8), 22);
        let fa = model.backbone_forward(&single_a).unwrap();
        let fa2 = model.backbone_forward(&single_a).unwrap();
        assert_eq!(fa, fa2);
        // Batch of two equals the two single-item runs exactly.
        let mut batch = ArrayD::<f64>::zeros(IxDyn(&[2, cfg.input_channels(), 4, 8, 8]));
        batch
            .index_axis_mut(Axis(0), 0)
            .assign(&single_a.index_axis(Axis(0), 0));
        batch
            .index_axis_mut(Axis(0), 1)
            .assign(&single_b.index_axis(Axis(0), 0));
        let fb = model.backbone_forward(&batch).unwrap();
        let fb0 = fb.index_axis(Axis(0), 0);
        let fa0 = fa.index_axis(Axis(0), 0);
        assert_eq!(fb0, fa0);
        let fbb = model.backbone_forward(&single_b).unwrap();
        assert_eq!(
            fb.index_axis(Axis(0), 1),
            fbb.index_axis(Axis(0), 0)
        );
        // Zero input stays finite.
        let zero = ArrayD::<f64>::zeros(IxDyn(&[1, cfg.input_channels(), 4, 8, 8]));
        let fz = model.backbone_forward(&zero).unwrap();
        assert!(fz.iter().all(|v| v.is_finite()));
    }

    fn training_pairs(seed: u64) -> PairSet {
        let spec = crate::phantom::PhantomSpec {
            size: 16,
            n_blobs: (1, 1),
            fg_fraction: (0.005, 0.5),
            seed,
            ..Default::default()
        };
        let (img, lab) = crate::phantom::generate_phantom(&spec).unwrap();
        make_selfsr_pairs(&img, &lab, 2, (8, 8, 4)).unwrap()
    }

    #[test]
    fn training_reduces_loss_and_is_reproducible() {
        let pairs = training_pairs(1);
        let cfg = SelfSrConfig {
            iters_total: 30,
            iters_uncertainty_on: 20,
            ..tiny_cfg()
        };
        let (_, trace_a) = train_selfsr(&pairs, &cfg, None).unwrap();
        let (_, trace_b) = train_selfsr(&pairs, &cfg, None).unwrap();
        assert_eq!(trace_a.len(), 30);
        for (a, b) in trace_a.iter().zip(trace_b.iter()) {
            assert_eq!(a.total, b.total, "loss trace must be seed-deterministic");
        }
        let head: f64 = trace_a[..5].iter().map(|r| r.loss_label).sum::<f64>() / 5.0;
        let tail: f64 =
            trace_a[25..].iter().map(|r| r.loss_label).sum::<f64>() / 5.0;
        assert!(tail < head, "label loss should drop: {head} -> {tail}");
        // The uncertainty switch must not destabilize training.
        assert!(trace_a.iter().all(|r| r.total.is_finite()));
    }

    #[test]
    fn resume_continues_iteration_count() {
        let pairs = training_pairs(2);
        let cfg = SelfSrConfig {
            iters_total: 10,
            iters_uncertainty_on: 8,
            ..tiny_cfg()
        };
        let half = SelfSrConfig {
            iters_total: 5,
            iters_uncertainty_on: 4,
            ..cfg.clone()
        };
        let (ck_half, _) = train_selfsr(&pairs, &half, None).unwrap();
        assert_eq!(ck_half.iterations_run, 5);
        let (ck_full, trace) = train_selfsr(&pairs, &cfg, Some(&ck_half)).unwrap();
        assert_eq!(ck_full.iterations_run, 10);
        assert_eq!(trace.first().unwrap().iter, 5);
    }

    #[test]
    fn checkpoint_round_trip_and_inference_shapes() {
        let pairs = training_pairs(3);
        let cfg = tiny_cfg();
        let (ckpt, _) = train_selfsr(&pairs, &cfg, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("selfsr");
        ckpt.save(&base).unwrap();
        let loaded = SelfSrCheckpoint::load(&base).unwrap();
        assert_eq!(loaded.iterations_run, ckpt.iterations_run);
        assert_eq!(loaded.tensors, ckpt.tensors);

        let lr = Volume::new(
            Array3::from_shape_fn((8, 16, 16), |(z, y, x)| {
                ((z + y + x) % 7) as f32 / 7.0
            }),
            (2.0, 1.0, 1.0),
        )
        .unwrap();
        let lr_labels = LabelVolume::new(
            Array3::from_shape_fn((8, 16, 16), |(z, _, _)| u8::from(z >= 4)),
            (2.0, 1.0, 1.0),
            2,
        )
        .unwrap();
        let bundle = infer_selfsr(&lr, &lr_labels, &loaded).unwrap();
        assert_eq!(bundle.image.shape(), (16, 16, 16));
        assert_eq!(bundle.labels.shape(), (16, 16, 16));
        assert_eq!(bundle.uncertainty.dim(), (16, 16, 16));
        assert_eq!(bundle.features.dim(), (cfg.channels, 8, 16, 16));
        assert!(bundle
            .uncertainty
            .iter()
            .all(|&u| u > 0.0 && u < 1.0));
        assert!(bundle.labels.data.iter().all(|&v| v < 2));
        assert!((bundle.image.spacing.0 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn constant_volume_training_gives_near_constant_inference() {
        // Constant pairs are learnable to numerical quiet; the SR output of
        // a constant input should be near constant.
        let img = Volume::new(
            Array3::from_elem((16, 16, 16), 0.5f32),
            (1.0, 1.0, 1.0),
        )
        .unwrap();
        let lab = LabelVolume::new(Array3::zeros((16, 16, 16)), (1.0, 1.0, 1.0), 2).unwrap();
        let pairs = make_selfsr_pairs(&img, &lab, 2, (8, 8, 4)).unwrap();
        let cfg = SelfSrConfig {
            iters_total: 2000,
            iters_uncertainty_on: 1600,
            learning_rate: 5e-3,
            ..tiny_cfg()
        };
        let (ckpt, trace) = train_selfsr(&pairs, &cfg, None).unwrap();
        assert!(trace.last().unwrap().loss_image < trace.first().unwrap().loss_image);
        // Infer at the training-patch geometry; a texture-free constant
        // volume gives the net no cue to generalize across grid sizes.
        let lr = Volume::new(Array3::from_elem((4, 8, 8), 0.5f32), (2.0, 1.0, 1.0)).unwrap();
        let lrl = LabelVolume::new(Array3::zeros((4, 8, 8)), (2.0, 1.0, 1.0), 2).unwrap();
        let bundle = infer_selfsr(&lr, &lrl, &ckpt).unwrap();
        let max_dev = bundle
            .image
            .data
            .iter()
            .map(|&v| (v - 0.5).abs())
            .fold(0.0f32, f32::max);
        assert!(max_dev < 0.05, "max deviation {max_dev}");
    }
}
