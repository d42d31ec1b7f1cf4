//! Stage orchestration over the filesystem: the library functions behind the
//! CLI subcommands and the runnable examples.
//!
//! Output layout under `out_dir`:
//!
//! ```text
//! dataset/                      # benchmark (manifest, train/, ground_truth/)
//! selfsr/checkpoint.{bin,json}  # stage-one model + manifest
//! selfsr/trace.csv
//! superres/<case>_sr_image.nii.gz, _sr_labels, _uncertainty, _features.bin
//! superres/pseudo/<case>_off<k>_{image,labels}.nii.gz
//! superres/index.json
//! seg/seg[_lambda<v>].{bin,json}, trace CSVs
//! predictions/<case>/pred_{lr,hr}.nii.gz
//! eval/metrics.csv, eval/summary.json
//! ```

use crate::config::{ExperimentConfig, SplitSel};
use crate::degrade::{generate_pseudo_lr_set, make_selfsr_pairs_along, PairSet, TrainPair};
use crate::distill::align_features;
use crate::error::{Error, Result};
use crate::losses::inverse_uncertainty_weights;
use crate::metrics;
use crate::nifti::{load_labels, load_volume, save_labels, save_volume};
use crate::phantom::{make_benchmark, BenchmarkManifest, CaseEntry, PhantomSpec};
use crate::resample::{
    resample_isotropic, resample_isotropic_labels, resize_labels_nearest, resize_volume_bspline,
    Interp,
};
use crate::segmenter::{
    infer_segmenter, train_segmenter, SegCheckpoint, SegModel, SegSample,
};
use crate::selfsr::{
    infer_selfsr, train_selfsr, SelfSrCheckpoint, SelfSrModel,
};
use crate::volume::{LabelVolume, Volume};
use ndarray::{Array3, Array4, Axis, Slice};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// Filesystem layout of one experiment.
pub struct Paths {
    pub out_dir: PathBuf,
}

impl Paths {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        Paths {
            out_dir: out_dir.into(),
        }
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.out_dir.join("dataset")
    }

    pub fn manifest(&self) -> PathBuf {
        self.dataset_dir().join("manifest.json")
    }

    pub fn selfsr_base(&self) -> PathBuf {
        self.out_dir.join("selfsr").join("checkpoint")
    }

    pub fn selfsr_trace(&self) -> PathBuf {
        self.out_dir.join("selfsr").join("trace.csv")
    }

    pub fn superres_dir(&self) -> PathBuf {
        self.out_dir.join("superres")
    }

    pub fn superres_index(&self) -> PathBuf {
        self.superres_dir().join("index.json")
    }

    pub fn seg_base(&self, lambda: Option<f64>) -> PathBuf {
        let name = match lambda {
            Some(l) => format!("seg_lambda{l}"),
            None => "seg".to_string(),
        };
        self.out_dir.join("seg").join(name)
    }

    pub fn predictions_dir(&self, case: &str) -> PathBuf {
        self.out_dir.join("predictions").join(case)
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.out_dir.join("eval")
    }
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Generates the phantom benchmark dataset.
pub fn run_phantom(cfg: &ExperimentConfig) -> Result<BenchmarkManifest> {
    let paths = Paths::new(&cfg.out_dir);
    ensure_dir(&paths.dataset_dir())?;
    let spec = PhantomSpec {
        size: cfg.phantom.hr_size,
        n_blobs: cfg.phantom.n_blobs,
        intensity_texture: cfg.phantom.intensity_texture,
        fg_fraction: cfg.phantom.fg_fraction,
        seed: cfg.seed,
    };
    make_benchmark(
        paths.dataset_dir(),
        cfg.phantom.cases,
        cfg.phantom.r,
        cfg.seed,
        &spec,
    )
}

/// Swaps a pair set degraded along y into the x orientation so sets from
/// both in-plane axes pool into one training set.
fn pairs_to_x_orientation(set: PairSet) -> PairSet {
    if set.degradation_axis == 2 {
        return set;
    }
    let swap_vol = |v: &Volume| -> Volume {
        Volume {
            data: v
                .data
                .clone()
                .permuted_axes([0, 2, 1])
                .as_standard_layout()
                .to_owned(),
            spacing: (v.spacing.0, v.spacing.2, v.spacing.1),
        }
    };
    let swap_lab = |l: &LabelVolume| -> LabelVolume {
        LabelVolume {
            data: l
                .data
                .clone()
                .permuted_axes([0, 2, 1])
                .as_standard_layout()
                .to_owned(),
            spacing: (l.spacing.0, l.spacing.2, l.spacing.1),
            num_classes: l.num_classes,
        }
    };
    PairSet {
        pairs: set
            .pairs
            .iter()
            .map(|p| TrainPair {
                lr: swap_vol(&p.lr),
                hr: swap_vol(&p.hr),
                lr_labels: swap_lab(&p.lr_labels),
                hr_labels: swap_lab(&p.hr_labels),
            })
            .collect(),
        degradation_axis: 2,
        r: set.r,
    }
}

/// Builds the pooled self-SR training pairs from the train split: each LR
/// case is interpolated to isotropic spacing (B-spline image, nearest
/// labels), then degraded along in-plane axes.
pub fn build_selfsr_pairs(cfg: &ExperimentConfig, manifest: &BenchmarkManifest) -> Result<PairSet> {
    let mut pooled: Option<PairSet> = None;
    for case in manifest.train_cases() {
        let lr = load_volume(&case.lr_image)?;
        let labels = load_labels(&case.lr_labels)?;
        let iso = resample_isotropic(&lr, Interp::Bspline3)?;
        let iso_labels = resample_isotropic_labels(&labels)?;
        let mut axes = vec![2usize];
        if cfg.selfsr.augment_y_axis {
            axes.push(1);
        }
        for axis in axes {
            let set = make_selfsr_pairs_along(
                &iso,
                &iso_labels,
                cfg.selfsr.r,
                cfg.selfsr.patch_lr,
                axis,
            )?;
            let set = pairs_to_x_orientation(set);
            match &mut pooled {
                Some(p) => p.pairs.extend(set.pairs),
                None => pooled = Some(set),
            }
        }
    }
    pooled.ok_or_else(|| Error::InvalidArgument("no training cases in manifest".into()))
}

/// Stage one: trains the self-SR model and writes its checkpoint and loss
/// trace. With `resume`, continues an existing checkpoint to the configured
/// iteration count.
pub fn run_train_sr(cfg: &ExperimentConfig, resume: bool) -> Result<PathBuf> {
    let paths = Paths::new(&cfg.out_dir);
    let manifest = BenchmarkManifest::load(paths.manifest())?;
    let pairs = build_selfsr_pairs(cfg, &manifest)?;
    let base = paths.selfsr_base();
    ensure_dir(base.parent().unwrap())?;
    let previous = if resume {
        Some(SelfSrCheckpoint::load(&base)?)
    } else {
        None
    };
    let (ckpt, trace) = train_selfsr(&pairs, &cfg.selfsr, previous.as_ref())?;
    ckpt.save(&base)?;
    crate::selfsr::write_trace_csv(paths.selfsr_trace(), &trace)?;
    Ok(base)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PseudoEntry {
    pub offset: usize,
    pub image: PathBuf,
    pub labels: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuperresCase {
    pub id: String,
    pub split: String,
    pub sr_image: PathBuf,
    pub sr_labels: PathBuf,
    pub uncertainty: PathBuf,
    pub features: PathBuf,
    pub pseudo: Vec<PseudoEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuperresIndex {
    pub r: usize,
    pub cases: Vec<SuperresCase>,
}

impl SuperresIndex {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| Error::io(path.as_ref(), e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn save_features(path: &Path, feat: &Array4<f32>) -> Result<()> {
    let mut map = BTreeMap::new();
    map.insert(
        "features".to_string(),
        (
            feat.shape().to_vec(),
            feat.as_standard_layout().iter().copied().collect(),
        ),
    );
    crate::nn::params::write_tensors(path, &map)
}

pub fn load_features(path: &Path) -> Result<Array4<f32>> {
    let map = crate::nn::params::read_tensors(path)?;
    let (shape, data) = map
        .get("features")
        .ok_or_else(|| Error::Checkpoint("missing features tensor".into()))?;
    if shape.len() != 4 {
        return Err(Error::Checkpoint("features tensor must be 4-d".into()));
    }
    Array4::from_shape_vec((shape[0], shape[1], shape[2], shape[3]), data.clone())
        .map_err(|e| Error::Checkpoint(e.to_string()))
}

/// Stage two data generation: applies the trained self-SR model to every
/// case (training stays blind to ground truth; only visible LR data is
/// read). Train-split cases additionally get the r-offset pseudo-LR set.
pub fn run_superres(cfg: &ExperimentConfig) -> Result<SuperresIndex> {
    let paths = Paths::new(&cfg.out_dir);
    let manifest = BenchmarkManifest::load(paths.manifest())?;
    let ckpt = SelfSrCheckpoint::load(paths.selfsr_base())?;
    let dir = paths.superres_dir();
    let pseudo_dir = dir.join("pseudo");
    ensure_dir(&pseudo_dir)?;

    let mut cases = Vec::new();
    for case in &manifest.cases {
        let lr = load_volume(&case.lr_image)?;
        let labels = load_labels(&case.lr_labels)?;
        let bundle = infer_selfsr(&lr, &labels, &ckpt)?;
        let sr_image = dir.join(format!("{}_sr_image.nii.gz", case.id));
        let sr_labels = dir.join(format!("{}_sr_labels.nii.gz", case.id));
        let uncertainty = dir.join(format!("{}_uncertainty.nii.gz", case.id));
        let features = dir.join(format!("{}_features.bin", case.id));
        save_volume(&bundle.image, &sr_image)?;
        save_labels(&bundle.labels, &sr_labels)?;
        save_volume(
            &Volume::new(bundle.uncertainty.clone(), bundle.image.spacing)?,
            &uncertainty,
        )?;
        save_features(&features, &bundle.features)?;

        let mut pseudo = Vec::new();
        if case.split == "train" {
            for (offset, (p_img, p_lab)) in
                generate_pseudo_lr_set(&bundle.image, &bundle.labels, cfg.selfsr.r)?
                    .into_iter()
                    .enumerate()
            {
                let image = pseudo_dir.join(format!("{}_off{}_image.nii.gz", case.id, offset));
                let labels_path =
                    pseudo_dir.join(format!("{}_off{}_labels.nii.gz", case.id, offset));
                save_volume(&p_img, &image)?;
                save_labels(&p_lab, &labels_path)?;
                pseudo.push(PseudoEntry {
                    offset,
                    image,
                    labels: labels_path,
                });
            }
        }
        cases.push(SuperresCase {
            id: case.id.clone(),
            split: case.split.clone(),
            sr_image,
            sr_labels,
            uncertainty,
            features,
            pseudo,
        });
    }
    let index = SuperresIndex {
        r: cfg.selfsr.r,
        cases,
    };
    let text = serde_json::to_string_pretty(&index)?;
    std::fs::write(paths.superres_index(), text)
        .map_err(|e| Error::io(paths.superres_index(), e))?;
    Ok(index)
}

/// Strided depth decimation of an uncertainty map.
fn downsample_depth_f32(u: &Array3<f32>, r: usize, offset: usize) -> Array3<f32> {
    u.slice_axis(Axis(0), Slice::new(offset as isize, None, r as isize))
        .to_owned()
}

/// Assembles segmentation training samples from the pseudo-LR set. The Eq.-7
/// style weights use the uncertainty map decimated at each sample's own
/// offset; teacher features are aligned onto the student feature grid once.
pub fn build_pseudo_samples(cfg: &ExperimentConfig, index: &SuperresIndex) -> Result<Vec<SegSample>> {
    let seg = &cfg.segmenter.config;
    let model = SegModel::<f32>::new(seg)?;
    let mut samples = Vec::new();
    for case in index.cases.iter().filter(|c| c.split == "train") {
        let hr_labels = load_labels(&case.sr_labels)?;
        let u = load_volume(&case.uncertainty)?;
        let features = if seg.distill_on {
            Some(load_features(&case.features)?)
        } else {
            None
        };
        for entry in &case.pseudo {
            let image = load_volume(&entry.image)?;
            let labels = load_labels(&entry.labels)?;
            let lr_shape = image.shape();
            let ce_weights = if seg.uncertainty_on {
                let u_lr = downsample_depth_f32(&u.data, index.r, entry.offset);
                if u_lr.dim() != image.data.dim() {
                    return Err(Error::ShapeMismatch(format!(
                        "uncertainty {:?} vs sample {:?} at offset {}",
                        u_lr.dim(),
                        image.data.dim(),
                        entry.offset
                    )));
                }
                Some(inverse_uncertainty_weights(&u_lr))
            } else {
                None
            };
            let teacher_features = match &features {
                Some(f) => Some(align_features(&f.view(), model.feature_shape(lr_shape))),
                None => None,
            };
            samples.push(SegSample {
                image: image.data,
                labels: labels.data,
                hr_labels: seg.hr_head_on.then(|| hr_labels.data.clone()),
                ce_weights,
                teacher_features,
            });
        }
    }
    if samples.is_empty() {
        return Err(Error::InvalidArgument(
            "no pseudo training samples; run the superres stage first".into(),
        ));
    }
    Ok(samples)
}

/// Baseline samples: the original visible LR cases, nothing else.
pub fn build_baseline_samples(manifest: &BenchmarkManifest) -> Result<Vec<SegSample>> {
    let mut samples = Vec::new();
    for case in manifest.train_cases() {
        let image = load_volume(&case.lr_image)?;
        let labels = load_labels(&case.lr_labels)?;
        samples.push(SegSample {
            image: image.data,
            labels: labels.data,
            hr_labels: None,
            ce_weights: None,
            teacher_features: None,
        });
    }
    Ok(samples)
}

/// Stage-two training. Returns one checkpoint base path per trained weight
/// (a single entry unless `lambda_sweep` is set; sweep runs share data and
/// seed, differing only in lambda).
pub fn run_train_seg(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let paths = Paths::new(&cfg.out_dir);
    let samples = if cfg.segmenter.use_pseudo_data {
        let index = SuperresIndex::load(paths.superres_index())?;
        build_pseudo_samples(cfg, &index)?
    } else {
        let manifest = BenchmarkManifest::load(paths.manifest())?;
        build_baseline_samples(&manifest)?
    };
    ensure_dir(&cfg.out_dir.join("seg"))?;
    let lambdas: Vec<Option<f64>> = match &cfg.segmenter.lambda_sweep {
        Some(sweep) => sweep.iter().map(|&l| Some(l)).collect(),
        None => vec![None],
    };
    let mut out = Vec::new();
    for lambda in lambdas {
        let mut seg_cfg = cfg.segmenter.config.clone();
        if let Some(l) = lambda {
            seg_cfg.lambda = l;
        }
        let (ckpt, trace) = train_segmenter(&samples, &seg_cfg)?;
        let base = paths.seg_base(lambda);
        ckpt.save(&base)?;
        crate::segmenter::write_trace_csv(base.with_extension("trace.csv"), &trace)?;
        out.push(base);
    }
    Ok(out)
}

fn find_case<'m>(manifest: &'m BenchmarkManifest, case_id: &str) -> Result<&'m CaseEntry> {
    manifest
        .cases
        .iter()
        .find(|c| c.id == case_id)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown case id `{case_id}`")))
}

/// Runs segmentation inference for one case and writes the LR and HR masks.
pub fn run_infer(cfg: &ExperimentConfig, case_id: &str) -> Result<(PathBuf, Option<PathBuf>)> {
    let paths = Paths::new(&cfg.out_dir);
    let manifest = BenchmarkManifest::load(paths.manifest())?;
    let case = find_case(&manifest, case_id)?;
    let ckpt = SegCheckpoint::load(paths.seg_base(None))?;
    let lr = load_volume(&case.lr_image)?;
    let (lr_mask, hr_mask) = infer_segmenter(&lr, &ckpt)?;
    let dir = paths.predictions_dir(case_id);
    ensure_dir(&dir)?;
    let lr_path = dir.join("pred_lr.nii.gz");
    save_labels(&lr_mask, &lr_path)?;
    let hr_path = match hr_mask {
        Some(mask) => {
            let p = dir.join("pred_hr.nii.gz");
            save_labels(&mask, &p)?;
            Some(p)
        }
        None => None,
    };
    Ok((lr_path, hr_path))
}

/// Per-case metric row. HD95 of an empty prediction is a recorded failure,
/// not a number.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case: String,
    pub split: String,
    pub dsc_lr: f64,
    pub hd95_lr: Option<f64>,
    pub dsc_hr: Option<f64>,
    pub hd95_hr: Option<f64>,
    pub dsc_sr: f64,
    pub psnr_sr: f64,
    pub ssim_sr: f64,
    pub psnr_bspline: f64,
    pub ssim_bspline: f64,
    pub dsc_nn: f64,
    pub uncertainty_corr: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricStat {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSummary {
    pub split: String,
    pub cases: usize,
    pub metrics: BTreeMap<String, MetricStat>,
    pub hd95_failures: usize,
}

fn stat(values: &[f64]) -> MetricStat {
    let n = values.len();
    if n == 0 {
        return MetricStat {
            mean: f64::NAN,
            std: f64::NAN,
            n: 0,
        };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    MetricStat {
        mean,
        std: var.sqrt(),
        n,
    }
}

/// Evaluates a trained experiment: segmentation metrics (LR against visible
/// labels, HR against hidden ground truth), super-resolution quality
/// (PSNR/SSIM against hidden HR plus interpolation baselines), and the
/// uncertainty-error correlation. Writes `eval/metrics.csv` and
/// `eval/summary.json`.
pub fn run_eval(cfg: &ExperimentConfig) -> Result<EvalSummary> {
    let paths = Paths::new(&cfg.out_dir);
    let manifest = BenchmarkManifest::load(paths.manifest())?;
    let index = SuperresIndex::load(paths.superres_index())?;
    let seg_ckpt = SegCheckpoint::load(paths.seg_base(None))?;
    let selected: Vec<&CaseEntry> = manifest
        .cases
        .iter()
        .filter(|c| match cfg.eval.split {
            SplitSel::Val => c.split == "val",
            SplitSel::Train => c.split == "train",
            SplitSel::All => true,
        })
        .collect();
    if selected.is_empty() {
        return Err(Error::InvalidArgument("no cases in selected split".into()));
    }

    let mut rows = Vec::new();
    for case in &selected {
        let lr = load_volume(&case.lr_image)?;
        let lr_labels = load_labels(&case.lr_labels)?;
        let gt_image = load_volume(&case.hr_image)?;
        let gt_labels = load_labels(&case.hr_labels)?;
        let (pred_lr, pred_hr) = infer_segmenter(&lr, &seg_ckpt)?;

        let dsc_lr = metrics::dice(&pred_lr, &lr_labels, 1)?;
        let hd95_lr = metrics::hd95(&pred_lr, &lr_labels, 1).ok();
        let (dsc_hr, hd95_hr) = match &pred_hr {
            Some(mask) => (
                Some(metrics::dice(mask, &gt_labels, 1)?),
                metrics::hd95(mask, &gt_labels, 1).ok(),
            ),
            None => (None, None),
        };

        let sr_case = index
            .cases
            .iter()
            .find(|c| c.id == case.id)
            .ok_or_else(|| {
                Error::InvalidArgument(format!("case {} missing from superres index", case.id))
            })?;
        let sr_image = load_volume(&sr_case.sr_image)?;
        let sr_labels = load_labels(&sr_case.sr_labels)?;
        let uncertainty = load_volume(&sr_case.uncertainty)?;
        let hr_shape = gt_image.shape();
        let bspline = resize_volume_bspline(&lr, hr_shape)?;
        let nn_labels = resize_labels_nearest(&lr_labels, hr_shape)?;

        let psnr_sr = metrics::psnr(&sr_image, &gt_image, 1.0)?;
        let ssim_sr = metrics::ssim(&sr_image, &gt_image)?;
        let psnr_bspline = metrics::psnr(&bspline, &gt_image, 1.0)?;
        let ssim_bspline = metrics::ssim(&bspline, &gt_image)?;
        let dsc_sr = metrics::dice(&sr_labels, &gt_labels, 1)?;
        let dsc_nn = metrics::dice(&nn_labels, &gt_labels, 1)?;
        let uncertainty_corr =
            metrics::uncertainty_error_correlation(&uncertainty.data, &sr_image, &gt_image)?;

        rows.push(CaseMetrics {
            case: case.id.clone(),
            split: case.split.clone(),
            dsc_lr,
            hd95_lr,
            dsc_hr,
            hd95_hr,
            dsc_sr,
            psnr_sr,
            ssim_sr,
            psnr_bspline,
            ssim_bspline,
            dsc_nn,
            uncertainty_corr,
        });
    }

    ensure_dir(&paths.eval_dir())?;
    let csv_path = paths.eval_dir().join("metrics.csv");
    let mut csv = String::from(
        "case,split,dsc_lr,hd95_lr,dsc_hr,hd95_hr,dsc_sr,psnr_sr,ssim_sr,\
         psnr_bspline,ssim_bspline,dsc_nn,uncertainty_corr\n",
    );
    let opt = |v: &Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.case,
            r.split,
            r.dsc_lr,
            opt(&r.hd95_lr),
            opt(&r.dsc_hr),
            opt(&r.hd95_hr),
            r.dsc_sr,
            r.psnr_sr,
            r.ssim_sr,
            r.psnr_bspline,
            r.ssim_bspline,
            r.dsc_nn,
            r.uncertainty_corr
        ));
    }
    std::fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;

    let mut metrics_map = BTreeMap::new();
    metrics_map.insert(
        "dsc_lr".into(),
        stat(&rows.iter().map(|r| r.dsc_lr).collect::<Vec<_>>()),
    );
    metrics_map.insert(
        "hd95_lr".into(),
        stat(&rows.iter().filter_map(|r| r.hd95_lr).collect::<Vec<_>>()),
    );
    metrics_map.insert(
        "dsc_hr".into(),
        stat(&rows.iter().filter_map(|r| r.dsc_hr).collect::<Vec<_>>()),
    );
    metrics_map.insert(
        "hd95_hr".into(),
        stat(&rows.iter().filter_map(|r| r.hd95_hr).collect::<Vec<_>>()),
    );
    metrics_map.insert(
        "dsc_sr".into(),
        stat(&rows.iter().map(|r| r.dsc_sr).collect::<Vec<_>>()),
    );
    metrics_map.insert(
        "psnr_sr".into(),
        stat(&rows.iter().map(|r| r.psnr_sr).collect::<Vec<_>>()),
    );
    metrics_map.insert(
        "ssim_sr".into(),
        stat(&rows.iter().map(|r| r.ssim_sr).collect::<Vec<_>>()),
    );
    metrics_map.insert(
        "psnr_bspline".into(),
        stat(&rows.iter().map(|r| r.psnr_bspline).collect::<Vec<_>>()),
    );
    metrics_map.insert(
        "ssim_bspline".into(),
        stat(&rows.iter().map(|r| r.ssim_bspline).collect::<Vec<_>>()),
    );
    metrics_map.insert(
        "dsc_nn".into(),
        stat(&rows.iter().map(|r| r.dsc_nn).collect::<Vec<_>>()),
    );
    metrics_map.insert(
        "uncertainty_corr".into(),
        stat(&rows.iter().map(|r| r.uncertainty_corr).collect::<Vec<_>>()),
    );
    let hd95_failures = rows.iter().filter(|r| r.hd95_lr.is_none()).count()
        + rows
            .iter()
            .filter(|r| r.dsc_hr.is_some() && r.hd95_hr.is_none())
            .count();
    let summary = EvalSummary {
        split: format!("{:?}", cfg.eval.split).to_lowercase(),
        cases: rows.len(),
        metrics: metrics_map,
        hd95_failures,
    };
    let summary_path = paths.eval_dir().join("summary.json");
    std::fs::write(&summary_path, serde_json::to_string_pretty(&summary)?)
        .map_err(|e| Error::io(&summary_path, e))?;
    Ok(summary)
}

/// Applies the trained self-SR model of an experiment to one (volume,
/// labels) pair; convenience entry for examples and diagnostics.
pub fn superresolve_case(
    cfg: &ExperimentConfig,
    lr: &Volume,
    labels: &LabelVolume,
) -> Result<crate::selfsr::PseudoHrBundle> {
    let paths = Paths::new(&cfg.out_dir);
    let ckpt = SelfSrCheckpoint::load(paths.selfsr_base())?;
    infer_selfsr(lr, labels, &ckpt)
}

/// Frozen teacher features for one case via the stage-one backbone.
pub fn teacher_features_for(
    ckpt: &SelfSrCheckpoint,
    lr: &Volume,
    labels: &LabelVolume,
) -> Result<Array4<f32>> {
    let model = SelfSrModel::<f32>::from_checkpoint(ckpt)?;
    let (d, h, w) = lr.shape();
    let stacked =
        crate::selfsr::stack_input_channels(&lr.data, &labels.data, ckpt.cfg.num_classes);
    let mut input = ndarray::ArrayD::<f32>::zeros(ndarray::IxDyn(&[
        1,
        ckpt.cfg.input_channels(),
        d,
        h,
        w,
    ]));
    input
        .index_axis_mut(Axis(0), 0)
        .assign(&stacked.view().into_dyn());
    let out = model.backbone_forward(&input)?;
    let c = ckpt.cfg.channels;
    let mut feat = Array4::<f32>::zeros((c, d, h, w));
    for ((ci, z, y, x), v) in feat.indexed_iter_mut() {
        *v = out[[0, ci, z, y, x]];
    }
    Ok(feat)
}
