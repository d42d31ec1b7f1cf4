//! Structural knowledge distillation between the frozen self-SR model and
//! the segmentation model.
//!
//! Two signals are matched: (1) fully-connected affinity graphs over pooled
//! feature patches, compared with a squared-difference loss, and (2) the
//! spatial feature maps themselves, compared with a per-voxel cosine loss
//! after a single-convolution student adaptor. Both carry pure (array)
//! implementations for the frozen teacher side and tape implementations for
//! the trainable student side; the pairs agree to float precision.

use crate::error::{Error, Result};
use crate::nn::{Scalar, Tape, Var};
use crate::resample::resize_trilinear_features;
use ndarray::{Array1, Array2, Array4, ArrayView4, IxDyn};

/// Guard inside `sqrt` for node norms. Small enough to be invisible at f32
/// precision but keeps all-zero vectors finite.
const NORM_EPS: f64 = 1e-24;

/// Pairwise cosine similarities over pooled feature patches.
#[derive(Debug, Clone)]
pub struct AffinityMatrix {
    pub a: Array2<f64>,
    pub beta: (usize, usize, usize),
}

/// Resamples teacher features (trilinear over spatial dims) onto the student
/// feature grid.
pub fn align_features(f_sr: &ArrayView4<f32>, target: (usize, usize, usize)) -> Array4<f32> {
    resize_trilinear_features(f_sr, target)
}

/// Crops spatial dims to the largest extent divisible by the pooling patch.
pub fn crop_to_divisible<F: Clone>(
    f: &ArrayView4<F>,
    beta: (usize, usize, usize),
) -> Array4<F> {
    let (c, d, h, w) = f.dim();
    let (dd, hh, ww) = (d - d % beta.0, h - h % beta.1, w - w % beta.2);
    f.slice(ndarray::s![0..c, 0..dd, 0..hh, 0..ww]).to_owned()
}

/// Builds the affinity matrix of a `(C, D, H, W)` feature grid: average-pool
/// with window = stride = `beta`, then cosine similarity between every pair
/// of pooled node vectors. Spatial dims must divide by `beta`.
pub fn build_affinity<F: Scalar>(
    f: &ArrayView4<F>,
    beta: (usize, usize, usize),
) -> Result<Array2<F>> {
    let (c, d, h, w) = f.dim();
    if d % beta.0 != 0 || h % beta.1 != 0 || w % beta.2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "feature dims ({d}, {h}, {w}) not divisible by beta {beta:?}"
        )));
    }
    let (nd, nh, nw) = (d / beta.0, h / beta.1, w / beta.2);
    let n = nd * nh * nw;
    // Pooled node features, rows are nodes.
    let mut nodes = Array2::<F>::zeros((n, c));
    let inv = F::from_f64(1.0 / (beta.0 * beta.1 * beta.2) as f64);
    for ci in 0..c {
        for zi in 0..nd {
            for yi in 0..nh {
                for xi in 0..nw {
                    let mut acc = F::zero();
                    for bz in 0..beta.0 {
                        for by in 0..beta.1 {
                            for bx in 0..beta.2 {
                                acc = acc
                                    + f[[
                                        ci,
                                        zi * beta.0 + bz,
                                        yi * beta.1 + by,
                                        xi * beta.2 + bx,
                                    ]];
                            }
                        }
                    }
                    nodes[[(zi * nh + yi) * nw + xi, ci]] = acc * inv;
                }
            }
        }
    }
    let eps = F::from_f64(NORM_EPS);
    for mut row in nodes.rows_mut() {
        let norm = (row.iter().map(|&v| v * v).fold(F::zero(), |a, b| a + b) + eps).sqrt();
        row.mapv_inplace(|v| v / norm);
    }
    Ok(nodes.dot(&nodes.t()))
}

/// Public f64 wrapper carrying the granularity.
pub fn build_affinity_matrix(
    f: &ArrayView4<f64>,
    beta: (usize, usize, usize),
) -> Result<AffinityMatrix> {
    Ok(AffinityMatrix {
        a: build_affinity(f, beta)?,
        beta,
    })
}

/// Squared-difference loss between two affinity matrices of `n` nodes each:
/// the pair-sum is normalized by `n` (the `beta / (D' H' W')` prefactor).
pub fn correlation_loss<F: Scalar>(a_sr: &Array2<F>, a_seg: &Array2<F>) -> Result<F> {
    if a_sr.dim() != a_seg.dim() {
        return Err(Error::ShapeMismatch(format!(
            "affinity shapes {:?} vs {:?}",
            a_sr.dim(),
            a_seg.dim()
        )));
    }
    let n = a_sr.nrows();
    let mut acc = F::zero();
    for (&a, &b) in a_sr.iter().zip(a_seg.iter()) {
        let d = a - b;
        acc = acc + d * d;
    }
    Ok(acc / F::from_f64(n as f64))
}

/// Single-convolution student adaptor mapping segmentation feature channels
/// onto teacher channels. `weight` is `(C_teacher, C_student)`.
#[derive(Debug, Clone)]
pub struct Adaptor<F> {
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

impl<F: Scalar> Adaptor<F> {
    pub fn apply(&self, f_seg: &ArrayView4<F>) -> Array4<F> {
        let (cs, d, h, w) = f_seg.dim();
        let ct = self.weight.nrows();
        assert_eq!(self.weight.ncols(), cs, "adaptor input channel mismatch");
        let mut out = Array4::<F>::zeros((ct, d, h, w));
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    for co in 0..ct {
                        let mut acc = self.bias[co];
                        for ci in 0..cs {
                            acc = acc + self.weight[[co, ci]] * f_seg[[ci, z, y, x]];
                        }
                        out[[co, z, y, x]] = acc;
                    }
                }
            }
        }
        out
    }
}

/// Mean over voxels of `1 - cos(adapted student vector, teacher vector)`.
/// Voxels where the teacher vector has zero norm are skipped (contribute 0).
pub fn spatial_loss<F: Scalar>(
    f_seg: &ArrayView4<F>,
    f_sr: &ArrayView4<F>,
    adaptor: &Adaptor<F>,
) -> Result<F> {
    let adapted = adaptor.apply(f_seg);
    if adapted.dim() != f_sr.dim() {
        return Err(Error::ShapeMismatch(format!(
            "adapted student {:?} vs teacher {:?}",
            adapted.dim(),
            f_sr.dim()
        )));
    }
    let (c, d, h, w) = adapted.dim();
    let eps = F::from_f64(NORM_EPS);
    let mut total = F::zero();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let mut dot = F::zero();
                let mut na = F::zero();
                let mut nt = F::zero();
                for ci in 0..c {
                    let a = adapted[[ci, z, y, x]];
                    let t = f_sr[[ci, z, y, x]];
                    dot = dot + a * t;
                    na = na + a * a;
                    nt = nt + t * t;
                }
                if nt == F::zero() {
                    continue;
                }
                let cos = dot / ((na + eps).sqrt() * nt.sqrt());
                total = total + (F::one() - cos);
            }
        }
    }
    Ok(total / F::from_f64((d * h * w) as f64))
}

// ---- tape (trainable student) routes ----

/// Affinity matrix of a 4-d `(C, D, H, W)` feature node on the tape.
pub fn affinity_var<F: Scalar>(
    tape: &Tape<F>,
    features: Var,
    beta: (usize, usize, usize),
) -> Var {
    let shape = tape.shape(features);
    assert_eq!(shape.len(), 4, "affinity_var expects (C, D, H, W)");
    let (c, d, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    assert!(
        d % beta.0 == 0 && h % beta.1 == 0 && w % beta.2 == 0,
        "feature dims not divisible by beta"
    );
    let five = tape.reshape(features, &[1, c, d, h, w]);
    let pooled = tape.avg_pool3d(five, beta);
    let n = (d / beta.0) * (h / beta.1) * (w / beta.2);
    let flat = tape.reshape(pooled, &[c, n]);
    let nodes = tape.transpose2d(flat); // (n, c)
    let sq = tape.square(nodes);
    let sums = tape.sum_axis_keepdim(sq, 1);
    let norms = tape.sqrt(tape.add_scalar(sums, F::from_f64(NORM_EPS)));
    let denom = tape.repeat_axis(norms, 1, c);
    let unit = tape.div(nodes, denom);
    let unit_t = tape.transpose2d(unit);
    tape.matmul(unit, unit_t)
}

/// Correlation-distillation loss on the tape against a frozen teacher
/// affinity matrix.
pub fn correlation_loss_var<F: Scalar>(tape: &Tape<F>, a_seg: Var, a_sr: &Array2<F>) -> Var {
    let shape = tape.shape(a_seg);
    assert_eq!(shape, vec![a_sr.nrows(), a_sr.ncols()], "affinity shape");
    let n = a_sr.nrows();
    let teacher = tape.constant(a_sr.clone().into_dyn());
    let diff = tape.sub(a_seg, teacher);
    let sq = tape.square(diff);
    tape.scale(tape.sum_all(sq), F::from_f64(1.0 / n as f64))
}

/// Spatial cosine-distillation loss on the tape. `f_seg` is the student
/// feature map `(1, C_s, D, H, W)`; the adaptor is a 1x1x1 convolution whose
/// weight/bias are tape leaves; the teacher is a frozen array.
pub fn spatial_loss_var<F: Scalar>(
    tape: &Tape<F>,
    f_seg: Var,
    adaptor_w: Var,
    adaptor_b: Var,
    f_sr: &Array4<F>,
) -> Var {
    let (ct, d, h, w) = f_sr.dim();
    let adapted = tape.conv3d(f_seg, adaptor_w, adaptor_b, (0, 0, 0));
    debug_assert_eq!(tape.shape(adapted), vec![1, ct, d, h, w]);

    // Teacher norms with zero-norm voxels masked out.
    let mut teacher = ndarray::ArrayD::<F>::zeros(IxDyn(&[1, ct, d, h, w]));
    let mut nt = ndarray::ArrayD::<F>::zeros(IxDyn(&[1, 1, d, h, w]));
    let mut mask = ndarray::ArrayD::<F>::zeros(IxDyn(&[1, 1, d, h, w]));
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let mut acc = F::zero();
                for c in 0..ct {
                    let t = f_sr[[c, z, y, x]];
                    teacher[[0, c, z, y, x]] = t;
                    acc = acc + t * t;
                }
                if acc > F::zero() {
                    nt[[0, 0, z, y, x]] = acc.sqrt();
                    mask[[0, 0, z, y, x]] = F::one();
                } else {
                    nt[[0, 0, z, y, x]] = F::one();
                }
            }
        }
    }
    let teacher = tape.constant(teacher);
    let nt = tape.constant(nt);
    let mask = tape.constant(mask);

    let dot = tape.sum_axis_keepdim(tape.mul(adapted, teacher), 1);
    let na = tape.sqrt(tape.add_scalar(
        tape.sum_axis_keepdim(tape.square(adapted), 1),
        F::from_f64(NORM_EPS),
    ));
    let cos = tape.div(dot, tape.mul(na, nt));
    let one_minus = tape.add_scalar(tape.scale(cos, -F::one()), F::one());
    let masked = tape.mul(one_minus, mask);
    tape.scale(tape.sum_all(masked), F::from_f64(1.0 / (d * h * w) as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{finite_difference, relative_error};
    use ndarray::{Array4, ArrayD};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random4(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn affinity_of_constant_features_is_all_ones() {
        let f = Array4::<f64>::from_elem((3, 2, 4, 4), 0.8);
        let a = build_affinity(&f.view(), (1, 2, 2)).unwrap();
        assert_eq!(a.dim(), (8, 8));
        for &v in a.iter() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn affinity_of_orthogonal_nodes_is_identity() {
        // Two nodes with one-hot channel vectors.
        let mut f = Array4::<f64>::zeros((2, 1, 1, 2));
        f[[0, 0, 0, 0]] = 1.0;
        f[[1, 0, 0, 1]] = 1.0;
        let a = build_affinity(&f.view(), (1, 1, 1)).unwrap();
        assert!((a[[0, 0]] - 1.0).abs() < 1e-9);
        assert!((a[[1, 1]] - 1.0).abs() < 1e-9);
        assert!(a[[0, 1]].abs() < 1e-9);
        assert!(a[[1, 0]].abs() < 1e-9);
    }

    #[test]
    fn affinity_properties_on_random_features() {
        for seed in 0..5u64 {
            let f = random4((6, 2, 4, 4), seed);
            let a = build_affinity(&f.view(), (1, 2, 2)).unwrap();
            let n = a.nrows();
            for i in 0..n {
                assert!((a[[i, i]] - 1.0).abs() < 1e-6, "diagonal");
                for j in 0..n {
                    assert!((a[[i, j]] - a[[j, i]]).abs() < 1e-6, "symmetry");
                    assert!(a[[i, j]] >= -1.0 - 1e-9 && a[[i, j]] <= 1.0 + 1e-9);
                }
            }
            // Positive global rescaling leaves the matrix unchanged.
            let scaled = f.mapv(|v| v * 37.5);
            let a2 = build_affinity(&scaled.view(), (1, 2, 2)).unwrap();
            let max_diff = (&a - &a2).iter().map(|v| v.abs()).fold(0.0, f64::max);
            assert!(max_diff < 1e-6);
        }
    }

    #[test]
    fn affinity_rejects_indivisible_dims() {
        let f = Array4::<f64>::zeros((2, 3, 4, 4));
        assert!(build_affinity(&f.view(), (2, 2, 2)).is_err());
        let cropped = crop_to_divisible(&f.view(), (2, 2, 2));
        assert_eq!(cropped.dim(), (2, 2, 4, 4));
        assert!(build_affinity(&cropped.view(), (2, 2, 2)).is_ok());
    }

    #[test]
    fn correlation_loss_hand_cases() {
        let id: Array2<f64> = ndarray::arr2(&[[1.0, 0.0], [0.0, 1.0]]);
        let ones: Array2<f64> = ndarray::arr2(&[[1.0, 1.0], [1.0, 1.0]]);
        assert_eq!(correlation_loss(&id, &id).unwrap(), 0.0);
        let l = correlation_loss(&id, &ones).unwrap();
        assert!((l - 1.0).abs() < 1e-12, "got {l}");
        assert!(correlation_loss(&ones, &id).unwrap() >= 0.0);
    }

    #[test]
    fn correlation_loss_invariant_to_feature_rescale() {
        let fs = random4((4, 2, 4, 4), 5);
        let ft = random4((4, 2, 4, 4), 6);
        let a_s = build_affinity(&fs.view(), (1, 2, 2)).unwrap();
        let a_t = build_affinity(&ft.view(), (1, 2, 2)).unwrap();
        let base = correlation_loss(&a_t, &a_s).unwrap();
        let a_s2 = build_affinity(&fs.mapv(|v| v * 3.0).view(), (1, 2, 2)).unwrap();
        let a_t2 = build_affinity(&ft.mapv(|v| v * 0.2).view(), (1, 2, 2)).unwrap();
        let scaled = correlation_loss(&a_t2, &a_s2).unwrap();
        assert!((base - scaled).abs() < 1e-6);
    }

    #[test]
    fn spatial_loss_endpoint_cases() {
        let c_t = 3;
        let c_s = 5;
        let f_sr = random4((c_t, 2, 3, 3), 7);
        // Identity-through-adaptor: student features equal teacher after a
        // fixed linear map; choose adaptor = that map's inverse trivially by
        // making student = teacher padded with zero channels.
        let mut f_seg = Array4::<f64>::zeros((c_s, 2, 3, 3));
        for c in 0..c_t {
            f_seg
                .index_axis_mut(ndarray::Axis(0), c)
                .assign(&f_sr.index_axis(ndarray::Axis(0), c));
        }
        let mut w = Array2::<f64>::zeros((c_t, c_s));
        for c in 0..c_t {
            w[[c, c]] = 1.0;
        }
        let adaptor = Adaptor {
            weight: w.clone(),
            bias: Array1::zeros(c_t),
        };
        let zero = spatial_loss(&f_seg.view(), &f_sr.view(), &adaptor).unwrap();
        assert!(zero.abs() < 1e-9);

        // Adapted = -teacher at every voxel: cosine -1 -> loss 2.
        let neg = Adaptor {
            weight: w.mapv(|v| -v),
            bias: Array1::zeros(c_t),
        };
        let two = spatial_loss(&f_seg.view(), &f_sr.view(), &neg).unwrap();
        assert!((two - 2.0).abs() < 1e-9);

        // Adapted = 3 x teacher: cosine scale invariance.
        let tripled = Adaptor {
            weight: w.mapv(|v| 3.0 * v),
            bias: Array1::zeros(c_t),
        };
        let invariant = spatial_loss(&f_seg.view(), &f_sr.view(), &tripled).unwrap();
        assert!(invariant.abs() < 1e-6);
    }

    #[test]
    fn spatial_loss_skips_zero_teacher_voxels() {
        let c = 2;
        let mut f_sr = Array4::<f64>::zeros((c, 1, 1, 2));
        // Voxel 0 is zero-teacher; voxel 1 has opposite sign to the student.
        f_sr[[0, 0, 0, 1]] = 1.0;
        let mut f_seg = Array4::<f64>::zeros((c, 1, 1, 2));
        f_seg[[0, 0, 0, 0]] = 5.0;
        f_seg[[0, 0, 0, 1]] = -1.0;
        let mut w = Array2::<f64>::zeros((c, c));
        w[[0, 0]] = 1.0;
        w[[1, 1]] = 1.0;
        let adaptor = Adaptor {
            weight: w,
            bias: Array1::zeros(c),
        };
        let loss = spatial_loss(&f_seg.view(), &f_sr.view(), &adaptor).unwrap();
        // Only voxel 1 contributes: (1 - (-1)) / 2 voxels = 1.
        assert!((loss - 1.0).abs() < 1e-9);
    }

    #[test]
    fn tape_routes_match_pure_routes() {
        let beta = (1, 2, 2);
        let f_seg = random4((4, 2, 4, 4), 11);
        let f_sr = random4((4, 2, 4, 4), 12);
        let a_sr = build_affinity(&f_sr.view(), beta).unwrap();
        let a_seg_pure = build_affinity(&f_seg.view(), beta).unwrap();
        let corr_pure = correlation_loss(&a_sr, &a_seg_pure).unwrap();

        let tape = Tape::<f64>::new();
        let fv = tape.leaf(f_seg.clone().into_dyn());
        let a_var = affinity_var(&tape, fv, beta);
        let a_tape = tape.value(a_var);
        let max_diff = a_seg_pure
            .iter()
            .zip(a_tape.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_diff < 1e-12);
        let corr_var = correlation_loss_var(&tape, a_var, &a_sr);
        assert!((tape.scalar_value(corr_var) - corr_pure).abs() < 1e-12);

        // Spatial: tape vs pure with the same adaptor.
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let w = Array2::<f64>::from_shape_fn((4, 4), |_| rng.gen_range(-0.5..0.5));
        let b = Array1::<f64>::from_shape_fn(4, |_| rng.gen_range(-0.1..0.1));
        let adaptor = Adaptor {
            weight: w.clone(),
            bias: b.clone(),
        };
        let pure = spatial_loss(&f_seg.view(), &f_sr.view(), &adaptor).unwrap();
        let tape2 = Tape::<f64>::new();
        let f5 = tape2.constant(
            f_seg
                .clone()
                .into_dyn()
                .into_shape_with_order(IxDyn(&[1, 4, 2, 4, 4]))
                .unwrap(),
        );
        let wv = tape2.leaf(
            w.into_dyn()
                .into_shape_with_order(IxDyn(&[4, 4, 1, 1, 1]))
                .unwrap(),
        );
        let bv = tape2.leaf(b.into_dyn());
        let sv = spatial_loss_var(&tape2, f5, wv, bv, &f_sr);
        assert!((tape2.scalar_value(sv) - pure).abs() < 1e-12);
    }

    #[test]
    fn distillation_gradients_match_fd() {
        let beta = (1, 2, 2);
        let f_sr = random4((3, 2, 4, 4), 21);
        let a_sr = build_affinity(&f_sr.view(), beta).unwrap();
        let f_seg0 = random4((3, 2, 4, 4), 22).into_dyn();

        // Correlation loss w.r.t. student features.
        let tape = Tape::<f64>::new();
        let fv = tape.leaf(f_seg0.clone());
        let loss = correlation_loss_var(&tape, affinity_var(&tape, fv, beta), &a_sr);
        let grads = tape.backward(loss);
        let analytic = grads.of(fv).unwrap().clone();
        let mut f = |a: &ArrayD<f64>| {
            let t = Tape::<f64>::new();
            let v = t.leaf(a.clone());
            t.scalar_value(correlation_loss_var(&t, affinity_var(&t, v, beta), &a_sr))
        };
        let fd = finite_difference(&mut f, &f_seg0, 1e-6);
        assert!(relative_error(&analytic, &fd) < 1e-6);

        // Spatial loss w.r.t. student features and adaptor parameters.
        let f_sr4 = random4((3, 2, 4, 4), 23);
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let w0 = ArrayD::from_shape_fn(IxDyn(&[3, 3, 1, 1, 1]), |_| rng.gen_range(-0.5..0.5));
        let b0 = ArrayD::from_shape_fn(IxDyn(&[3]), |_| rng.gen_range(-0.1..0.1));
        let f_seg5 = random4((3, 2, 4, 4), 25)
            .into_dyn()
            .into_shape_with_order(IxDyn(&[1, 3, 2, 4, 4]))
            .unwrap();
        let tape = Tape::<f64>::new();
        let fv = tape.leaf(f_seg5.clone());
        let wv = tape.leaf(w0.clone());
        let bv = tape.leaf(b0.clone());
        let loss = spatial_loss_var(&tape, fv, wv, bv, &f_sr4);
        let grads = tape.backward(loss);
        for (var, at, name) in [(fv, &f_seg5, "features"), (wv, &w0, "weight"), (bv, &b0, "bias")]
        {
            let analytic = grads.of(var).unwrap().clone();
            let mut f = |a: &ArrayD<f64>| {
                let t = Tape::<f64>::new();
                let (fx, wx, bx) = match name {
                    "features" => (t.leaf(a.clone()), t.constant(w0.clone()), t.constant(b0.clone())),
                    "weight" => (t.constant(f_seg5.clone()), t.leaf(a.clone()), t.constant(b0.clone())),
                    _ => (t.constant(f_seg5.clone()), t.constant(w0.clone()), t.leaf(a.clone())),
                };
                t.scalar_value(spatial_loss_var(&t, fx, wx, bx, &f_sr4))
            };
            let fd = finite_difference(&mut f, at, 1e-6);
            let err = relative_error(&analytic, &fd);
            assert!(err < 1e-6, "{name}: {err}");
        }
    }

    #[test]
    fn spatial_loss_invariant_to_positive_per_voxel_rescale() {
        // Scaling the adapted student vector at each voxel by a positive
        // factor leaves 1 - cos unchanged; emulate by scaling the student
        // features per voxel when the adaptor is linear without bias.
        let c = 3;
        let f_sr = random4((c, 2, 2, 2), 31);
        let f_seg = random4((c, 2, 2, 2), 32);
        let mut w = Array2::<f64>::zeros((c, c));
        for i in 0..c {
            w[[i, i]] = 1.0;
        }
        let adaptor = Adaptor {
            weight: w,
            bias: Array1::zeros(c),
        };
        let base = spatial_loss(&f_seg.view(), &f_sr.view(), &adaptor).unwrap();
        let mut scaled = f_seg.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for z in 0..2 {
            for y in 0..2 {
                for x in 0..2 {
                    let s = rng.gen_range(0.2..5.0);
                    for ci in 0..c {
                        scaled[[ci, z, y, x]] *= s;
                    }
                }
            }
        }
        let rescaled = spatial_loss(&scaled.view(), &f_sr.view(), &adaptor).unwrap();
        assert!((base - rescaled).abs() < 1e-9);
    }
}
