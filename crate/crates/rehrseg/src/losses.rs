//! Loss functions shared by the super-resolution and segmentation stages.
//!
//! All losses are built on the autodiff tape so their gradients come from
//! the same machinery that the finite-difference suites verify.

use crate::nn::{Scalar, Tape, Var};
use ndarray::{Array3, ArrayD};

/// Mean absolute error.
pub fn l1_mean<F: Scalar>(tape: &Tape<F>, pred: Var, target: Var) -> Var {
    let diff = tape.sub(pred, target);
    tape.mean_all(tape.abs(diff))
}

/// Uncertainty-modulated reconstruction loss: the per-voxel L1 residual is
/// divided by the uncertainty and a `log U` penalty keeps U from growing;
/// the voxelwise optimum sits exactly at `U = |residual|`. U is clamped to
/// `[1e-4, 1 - 1e-4]` to bound the division and the logarithm.
pub fn sr_uncertainty_loss<F: Scalar>(tape: &Tape<F>, pred: Var, target: Var, u: Var) -> Var {
    let diff = tape.sub(pred, target);
    let l1 = tape.abs(diff);
    let uc = tape.clamp(u, F::from_f64(1e-4), F::from_f64(1.0 - 1e-4));
    let ratio = tape.div(l1, uc);
    let log_u = tape.ln(uc);
    tape.mean_all(tape.add(ratio, log_u))
}

/// Soft Dice loss over channel-softmax probabilities:
/// `1 - mean_c (2 |P_c ∩ G_c| + eps) / (|P_c| + |G_c| + eps)`.
pub fn soft_dice_loss<F: Scalar>(tape: &Tape<F>, logits: Var, targets: &ArrayD<u8>) -> Var {
    let shape = tape.shape(logits);
    assert_eq!(shape.len(), 5, "logits must be (N, K, D, H, W)");
    let k = shape[1];
    let eps = 1e-5;
    let probs = tape.softmax_axis(logits, 1);
    let mut acc: Option<Var> = None;
    for c in 0..k {
        let p_c = tape.slice_axis_range(probs, 1, c, c + 1);
        let mut mask_shape = shape.clone();
        mask_shape[1] = 1;
        let mask = ArrayD::from_shape_fn(ndarray::IxDyn(&mask_shape), |idx| {
            let t = targets[[idx[0], idx[2], idx[3], idx[4]]] as usize;
            if t == c {
                F::one()
            } else {
                F::zero()
            }
        });
        let gsum = mask.sum().to_f64();
        let g_c = tape.constant(mask);
        let inter = tape.sum_all(tape.mul(p_c, g_c));
        let psum = tape.sum_all(p_c);
        let num = tape.add_scalar(tape.scale(inter, F::from_f64(2.0)), F::from_f64(eps));
        let den = tape.add_scalar(psum, F::from_f64(gsum + eps));
        let d = tape.div(num, den);
        acc = Some(match acc {
            Some(a) => tape.add(a, d),
            None => d,
        });
    }
    let mean_dice = tape.scale(acc.unwrap(), F::from_f64(1.0 / k as f64));
    tape.add_scalar(tape.scale(mean_dice, -F::one()), F::one())
}

/// Cross-entropy plus soft Dice; used for annotation super-resolution
/// targets and for the HR segmentation head.
pub fn label_ce_dice_loss<F: Scalar>(tape: &Tape<F>, logits: Var, targets: &ArrayD<u8>) -> Var {
    let ce = tape.cross_entropy_mean(logits, targets, None);
    let dice = soft_dice_loss(tape, logits, targets);
    tape.add(ce, dice)
}

/// Per-voxel cross-entropy weighted by a fixed map, averaged over voxels.
pub fn weighted_ce_loss<F: Scalar>(
    tape: &Tape<F>,
    logits: Var,
    targets: &ArrayD<u8>,
    weights: &ArrayD<F>,
) -> Var {
    tape.cross_entropy_mean(logits, targets, Some(weights))
}

/// Loss weights from an uncertainty map: min-max normalize, then invert.
/// A constant map normalizes to all zeros, so every voxel keeps full weight.
pub fn inverse_uncertainty_weights(u: &Array3<f32>) -> Array3<f32> {
    let min = u.iter().cloned().fold(f32::INFINITY, f32::min);
    let max = u.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    if max > min {
        u.mapv(|v| 1.0 - (v - min) / (max - min))
    } else {
        Array3::ones(u.dim())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{finite_difference, relative_error};
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64, lo: f64, hi: f64) -> ArrayD<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(lo..hi))
    }

    fn scalar_uncertainty_loss(l1: f64, u: f64) -> f64 {
        let tape = Tape::<f64>::new();
        let pred = tape.constant(ArrayD::from_elem(IxDyn(&[1]), l1));
        let target = tape.constant(ArrayD::zeros(IxDyn(&[1])));
        let pv = tape.leaf(ArrayD::from_elem(IxDyn(&[1]), u));
        let pred_leaf = tape.leaf_arc(tape.value(pred));
        let _ = pred_leaf;
        let loss = sr_uncertainty_loss(&tape, pred, target, pv);
        tape.scalar_value(loss)
    }

    #[test]
    fn uncertainty_loss_hand_values() {
        // L1 = 0.5, U = 0.5 -> 0.5/0.5 + ln 0.5
        let got = scalar_uncertainty_loss(0.5, 0.5);
        assert!((got - (1.0 + 0.5f64.ln())).abs() < 1e-12);
        assert!((got - 0.30685).abs() < 1e-4);
        // U near one degenerates to the plain L1 value.
        let l1 = 0.37;
        let got = scalar_uncertainty_loss(l1, 1.0);
        assert!((got - l1).abs() < 1e-3);
    }

    #[test]
    fn uncertainty_loss_minimized_at_u_equals_l1() {
        // Grid-search oracle for the stationary point of L/U + log U.
        for &l1 in &[0.1, 0.3, 0.7] {
            let mut best = (f64::INFINITY, 0.0);
            let mut u = 0.01;
            while u < 0.99 {
                let v = scalar_uncertainty_loss(l1, u);
                if v < best.0 {
                    best = (v, u);
                }
                u += 0.001;
            }
            assert!((best.1 - l1).abs() < 2e-3, "l1 {l1}: argmin {}", best.1);
        }
    }

    #[test]
    fn uncertainty_loss_gradients_match_fd() {
        let pred0 = random(&[1, 1, 4, 4, 4], 1, 0.0, 1.0);
        let target = random(&[1, 1, 4, 4, 4], 2, 0.0, 1.0);
        let u0 = random(&[1, 1, 4, 4, 4], 3, 0.05, 0.95);
        // grad w.r.t. pred
        let tape = Tape::<f64>::new();
        let p = tape.leaf(pred0.clone());
        let t = tape.constant(target.clone());
        let u = tape.leaf(u0.clone());
        let loss = sr_uncertainty_loss(&tape, p, t, u);
        let grads = tape.backward(loss);
        let dp = grads.of(p).unwrap().clone();
        let du = grads.of(u).unwrap().clone();

        let mut fp = |a: &ArrayD<f64>| {
            let tp = Tape::<f64>::new();
            let p = tp.leaf(a.clone());
            let t = tp.constant(target.clone());
            let u = tp.constant(u0.clone());
            tp.scalar_value(sr_uncertainty_loss(&tp, p, t, u))
        };
        let fd_p = finite_difference(&mut fp, &pred0, 1e-6);
        assert!(relative_error(&dp, &fd_p) < 1e-6);

        let mut fu = |a: &ArrayD<f64>| {
            let tp = Tape::<f64>::new();
            let p = tp.constant(pred0.clone());
            let t = tp.constant(target.clone());
            let u = tp.leaf(a.clone());
            tp.scalar_value(sr_uncertainty_loss(&tp, p, t, u))
        };
        let fd_u = finite_difference(&mut fu, &u0, 1e-6);
        assert!(relative_error(&du, &fd_u) < 1e-6);
    }

    #[test]
    fn ce_dice_perfect_prediction_is_near_zero() {
        let targets = ArrayD::from_shape_fn(IxDyn(&[1, 3, 3, 3]), |i| {
            u8::from((i[1] + i[2] + i[3]) % 2 == 0)
        });
        let logits = ArrayD::from_shape_fn(IxDyn(&[1, 2, 3, 3, 3]), |i| {
            let t = targets[[i[0], i[2], i[3], i[4]]] as usize;
            if i[1] == t {
                30.0
            } else {
                -30.0
            }
        });
        let tape = Tape::<f64>::new();
        let l = tape.constant(logits);
        let lf = tape.leaf_arc(tape.value(l));
        let loss = label_ce_dice_loss(&tape, lf, &targets);
        assert!(tape.scalar_value(loss) < 1e-4);
    }

    #[test]
    fn ce_dice_uniform_logits_binary_target() {
        // CE term is exactly ln 2; Dice term for a half-probability
        // prediction of a balanced target is 1 - mean_c (2*0.5g)/(0.5n+g).
        let n = 16usize;
        let targets = ArrayD::from_shape_fn(IxDyn(&[1, 2, 2, 4]), |i| (i[3] % 2) as u8);
        let logits = ArrayD::zeros(IxDyn(&[1, 2, 2, 2, 4]));
        let tape = Tape::<f64>::new();
        let l = tape.leaf(logits);
        let ce = tape.cross_entropy_mean(l, &targets, None);
        assert!((tape.scalar_value(ce) - 2f64.ln()).abs() < 1e-12);
        let dice = soft_dice_loss(&tape, l, &targets);
        let g = n as f64 / 2.0;
        let expected = 1.0 - (2.0 * 0.5 * g + 1e-5) / (0.5 * n as f64 + g + 1e-5);
        assert!((tape.scalar_value(dice) - expected).abs() < 1e-9);
    }

    #[test]
    fn ce_dice_matches_bruteforce_oracle() {
        let logits = random(&[1, 3, 4, 4, 4], 7, -2.0, 2.0);
        let targets = ArrayD::from_shape_fn(IxDyn(&[1, 4, 4, 4]), |i| ((i[1] * 7 + i[2] * 3 + i[3]) % 3) as u8);
        let tape = Tape::<f64>::new();
        let l = tape.leaf(logits.clone());
        let loss = label_ce_dice_loss(&tape, l, &targets);
        let got = tape.scalar_value(loss);

        // Direct-formula evaluation, independent of the tape.
        let mut ce = 0.0;
        let mut inter = [0.0f64; 3];
        let mut psum = [0.0f64; 3];
        let mut gsum = [0.0f64; 3];
        for z in 0..4 {
            for y in 0..4 {
                for x in 0..4 {
                    let t = targets[[0, z, y, x]] as usize;
                    let mut m = f64::NEG_INFINITY;
                    for c in 0..3 {
                        m = m.max(logits[[0, c, z, y, x]]);
                    }
                    let zsum: f64 = (0..3)
                        .map(|c| (logits[[0, c, z, y, x]] - m).exp())
                        .sum();
                    ce += zsum.ln() + m - logits[[0, t, z, y, x]];
                    for c in 0..3 {
                        let p = (logits[[0, c, z, y, x]] - m).exp() / zsum;
                        psum[c] += p;
                        if t == c {
                            inter[c] += p;
                            gsum[c] += 1.0;
                        }
                    }
                }
            }
        }
        ce /= 64.0;
        let mut dice = 0.0;
        for c in 0..3 {
            dice += (2.0 * inter[c] + 1e-5) / (psum[c] + gsum[c] + 1e-5);
        }
        let expected = ce + 1.0 - dice / 3.0;
        assert!((got - expected).abs() < 1e-9, "{got} vs {expected}");
    }

    #[test]
    fn ce_dice_gradients_match_fd() {
        let logits = random(&[1, 2, 4, 4, 4], 8, -1.5, 1.5);
        let targets =
            ArrayD::from_shape_fn(IxDyn(&[1, 4, 4, 4]), |i| ((i[1] + i[3]) % 2) as u8);
        let tape = Tape::<f64>::new();
        let l = tape.leaf(logits.clone());
        let loss = label_ce_dice_loss(&tape, l, &targets);
        let grads = tape.backward(loss);
        let analytic = grads.of(l).unwrap().clone();
        let mut f = |a: &ArrayD<f64>| {
            let tp = Tape::<f64>::new();
            let l = tp.leaf(a.clone());
            tp.scalar_value(label_ce_dice_loss(&tp, l, &targets))
        };
        let fd = finite_difference(&mut f, &logits, 1e-6);
        assert!(relative_error(&analytic, &fd) < 1e-7);
    }

    #[test]
    fn inverse_uncertainty_weight_conventions() {
        // Constant map -> full weight everywhere.
        let u = Array3::from_elem((2, 2, 2), 0.7f32);
        let w = inverse_uncertainty_weights(&u);
        assert!(w.iter().all(|&x| x == 1.0));
        // Single hot voxel -> weight zero there, one at the minimum.
        let mut u = Array3::zeros((2, 2, 2));
        u[[1, 1, 1]] = 1.0f32;
        let w = inverse_uncertainty_weights(&u);
        assert_eq!(w[[1, 1, 1]], 0.0);
        assert_eq!(w[[0, 0, 0]], 1.0);
    }

    #[test]
    fn weighted_ce_matches_bruteforce_and_plain_when_uniform() {
        let logits = random(&[1, 2, 4, 4, 4], 9, -1.0, 1.0);
        let targets =
            ArrayD::from_shape_fn(IxDyn(&[1, 4, 4, 4]), |i| ((i[2] * 5 + i[3]) % 2) as u8);
        let weights = random(&[1, 4, 4, 4], 10, 0.0, 1.0);
        let tape = Tape::<f64>::new();
        let l = tape.leaf(logits.clone());
        let loss = weighted_ce_loss(&tape, l, &targets, &weights);
        let got = tape.scalar_value(loss);

        let mut expected = 0.0;
        for z in 0..4 {
            for y in 0..4 {
                for x in 0..4 {
                    let t = targets[[0, z, y, x]] as usize;
                    let m = logits[[0, 0, z, y, x]].max(logits[[0, 1, z, y, x]]);
                    let zsum: f64 = (0..2)
                        .map(|c| (logits[[0, c, z, y, x]] - m).exp())
                        .sum();
                    expected +=
                        weights[[0, z, y, x]] * (zsum.ln() + m - logits[[0, t, z, y, x]]);
                }
            }
        }
        expected /= 64.0;
        assert!((got - expected).abs() < 1e-12);

        let ones = ArrayD::ones(IxDyn(&[1, 4, 4, 4]));
        let tape2 = Tape::<f64>::new();
        let l2 = tape2.leaf(logits.clone());
        let plain = tape2.cross_entropy_mean(l2, &targets, None);
        let l3 = tape2.leaf(logits.clone());
        let weighted = weighted_ce_loss(&tape2, l3, &targets, &ones);
        assert_eq!(tape2.scalar_value(plain), tape2.scalar_value(weighted));
    }

    #[test]
    fn weighted_ce_never_exceeds_plain_ce() {
        // Weights are <= 1, so the weighted mean is <= the plain mean.
        for seed in 0..5 {
            let logits = random(&[1, 2, 4, 4, 4], 100 + seed, -2.0, 2.0);
            let targets =
                ArrayD::from_shape_fn(IxDyn(&[1, 4, 4, 4]), |i| ((i[1] + i[2]) % 2) as u8);
            let weights = random(&[1, 4, 4, 4], 200 + seed, 0.0, 1.0);
            let tape = Tape::<f64>::new();
            let l = tape.leaf(logits.clone());
            let w = weighted_ce_loss(&tape, l, &targets, &weights);
            let l2 = tape.leaf(logits);
            let p = tape.cross_entropy_mean(l2, &targets, None);
            assert!(tape.scalar_value(w) <= tape.scalar_value(p) + 1e-12);
        }
    }
}
