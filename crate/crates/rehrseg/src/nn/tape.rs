//! The autodiff tape and its operation set.

use super::conv;
use super::Scalar;
use ndarray::{ArrayD, ArrayViewD, Axis, IxDyn, Slice};
use std::cell::RefCell;
use std::sync::Arc;

type GradFn<F> = Box<dyn Fn(&ArrayD<F>) -> Vec<ArrayD<F>>>;

struct Node<F: Scalar> {
    value: Arc<ArrayD<F>>,
    parents: Vec<usize>,
    grad_fn: Option<GradFn<F>>,
    needs_grad: bool,
}

/// Handle to a tape node. Only valid for the tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Gradients of the leaves after a backward pass.
pub struct Grads<F: Scalar> {
    inner: Vec<Option<ArrayD<F>>>,
}

impl<F: Scalar> Grads<F> {
    pub fn of(&self, v: Var) -> Option<&ArrayD<F>> {
        self.inner[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<ArrayD<F>> {
        self.inner[v.0].take()
    }
}

/// Wengert-list autodiff tape.
#[derive(Default)]
pub struct Tape<F: Scalar> {
    nodes: RefCell<Vec<Node<F>>>,
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    /// A differentiable leaf (parameter or input requiring gradients).
    pub fn leaf(&self, value: ArrayD<F>) -> Var {
        self.push_node(Arc::new(value), Vec::new(), None, true)
    }

    /// A shared-storage differentiable leaf.
    pub fn leaf_arc(&self, value: Arc<ArrayD<F>>) -> Var {
        self.push_node(value, Vec::new(), None, true)
    }

    /// A non-differentiable input.
    pub fn constant(&self, value: ArrayD<F>) -> Var {
        self.push_node(Arc::new(value), Vec::new(), None, false)
    }

    pub fn constant_arc(&self, value: Arc<ArrayD<F>>) -> Var {
        self.push_node(value, Vec::new(), None, false)
    }

    /// One-element constant.
    pub fn scalar(&self, v: F) -> Var {
        self.constant(ArrayD::from_elem(IxDyn(&[1]), v))
    }

    pub fn value(&self, v: Var) -> Arc<ArrayD<F>> {
        self.nodes.borrow()[v.0].value.clone()
    }

    /// Extracts the single element of a scalar-shaped node.
    pub fn scalar_value(&self, v: Var) -> F {
        let val = self.value(v);
        debug_assert_eq!(val.len(), 1);
        *val.iter().next().unwrap()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    fn push_node(
        &self,
        value: Arc<ArrayD<F>>,
        parents: Vec<usize>,
        grad_fn: Option<GradFn<F>>,
        needs_grad: bool,
    ) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let idx = nodes.len();
        nodes.push(Node {
            value,
            parents,
            grad_fn,
            needs_grad,
        });
        Var(idx)
    }

    fn push_op(&self, value: ArrayD<F>, parents: Vec<usize>, grad_fn: GradFn<F>) -> Var {
        let needs = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|&p| nodes[p].needs_grad)
        };
        self.push_node(
            Arc::new(value),
            parents,
            if needs { Some(grad_fn) } else { None },
            needs,
        )
    }

    /// Reverse pass from a scalar-shaped root. Gradients of intermediate
    /// nodes are freed as soon as they have been propagated; leaf gradients
    /// are kept.
    pub fn backward(&self, root: Var) -> Grads<F> {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<ArrayD<F>>> = (0..nodes.len()).map(|_| None).collect();
        let root_node = &nodes[root.0];
        assert_eq!(root_node.value.len(), 1, "backward root must be scalar");
        grads[root.0] = Some(ArrayD::from_elem(
            IxDyn(root_node.value.shape()),
            F::one(),
        ));
        for i in (0..=root.0).rev() {
            if grads[i].is_none() {
                continue;
            }
            let node = &nodes[i];
            if let Some(gfn) = &node.grad_fn {
                let g = grads[i].take().unwrap();
                let parent_grads = gfn(&g);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (&p, pg) in node.parents.iter().zip(parent_grads) {
                    if !nodes[p].needs_grad {
                        continue;
                    }
                    match &mut grads[p] {
                        Some(acc) => *acc += &pg,
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
        }
        Grads { inner: grads }
    }

    // ---- elementwise binary ----

    pub fn add(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add: shape mismatch");
        let out = &*va + &*vb;
        self.push_op(
            out,
            vec![a.0, b.0],
            Box::new(move |g| vec![g.clone(), g.clone()]),
        )
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "sub: shape mismatch");
        let out = &*va - &*vb;
        self.push_op(
            out,
            vec![a.0, b.0],
            Box::new(move |g| vec![g.clone(), g.mapv(|x| -x)]),
        )
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul: shape mismatch");
        let out = &*va * &*vb;
        self.push_op(
            out,
            vec![a.0, b.0],
            Box::new(move |g| vec![g * &*vb, g * &*va]),
        )
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "div: shape mismatch");
        let out = &*va / &*vb;
        let out_arc = Arc::new(out);
        let out_for_grad = out_arc.clone();
        let needs = {
            let nodes = self.nodes.borrow();
            nodes[a.0].needs_grad || nodes[b.0].needs_grad
        };
        let grad_fn: GradFn<F> = Box::new(move |g| {
            let da = g / &*vb;
            let db = -(g * &*out_for_grad) / &*vb;
            vec![da, db]
        });
        self.push_node(
            out_arc,
            vec![a.0, b.0],
            if needs { Some(grad_fn) } else { None },
            needs,
        )
    }

    // ---- elementwise unary ----

    fn unary(
        &self,
        a: Var,
        f: impl Fn(F) -> F,
        dfn: impl Fn(&ArrayD<F>, &ArrayD<F>, &ArrayD<F>) -> ArrayD<F> + 'static,
    ) -> Var {
        let va = self.value(a);
        let out = Arc::new(va.mapv(&f));
        let out_for_grad = out.clone();
        let needs = self.nodes.borrow()[a.0].needs_grad;
        let grad_fn: GradFn<F> =
            Box::new(move |g| vec![dfn(g, &va, &out_for_grad)]);
        self.push_node(
            out,
            vec![a.0],
            if needs { Some(grad_fn) } else { None },
            needs,
        )
    }

    pub fn scale(&self, a: Var, c: F) -> Var {
        self.unary(a, |x| x * c, move |g, _, _| g.mapv(|x| x * c))
    }

    pub fn add_scalar(&self, a: Var, c: F) -> Var {
        self.unary(a, |x| x + c, |g, _, _| g.clone())
    }

    pub fn abs(&self, a: Var) -> Var {
        self.unary(
            a,
            |x| x.abs(),
            |g, x, _| {
                let sign = x.mapv(|v| {
                    if v > F::zero() {
                        F::one()
                    } else if v < F::zero() {
                        -F::one()
                    } else {
                        F::zero()
                    }
                });
                g * &sign
            },
        )
    }

    pub fn square(&self, a: Var) -> Var {
        let two = F::from_f64(2.0);
        self.unary(a, |x| x * x, move |g, x, _| g * &x.mapv(|v| two * v))
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, |x| x.exp(), |g, _, y| g * y)
    }

    pub fn ln(&self, a: Var) -> Var {
        self.unary(a, |x| x.ln(), |g, x, _| g / x)
    }

    pub fn sqrt(&self, a: Var) -> Var {
        let half = F::from_f64(0.5);
        self.unary(a, |x| x.sqrt(), move |g, _, y| g * &y.mapv(|v| half / v))
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(
            a,
            |x| x.tanh(),
            |g, _, y| g * &y.mapv(|v| F::one() - v * v),
        )
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(
            a,
            |x| F::one() / (F::one() + (-x).exp()),
            |g, _, y| g * &y.mapv(|v| v * (F::one() - v)),
        )
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(
            a,
            |x| if x > F::zero() { x } else { F::zero() },
            |g, x, _| {
                g * &x.mapv(|v| if v > F::zero() { F::one() } else { F::zero() })
            },
        )
    }

    pub fn leaky_relu(&self, a: Var, alpha: F) -> Var {
        self.unary(
            a,
            move |x| if x > F::zero() { x } else { alpha * x },
            move |g, x, _| g * &x.mapv(|v| if v > F::zero() { F::one() } else { alpha }),
        )
    }

    pub fn clamp(&self, a: Var, lo: F, hi: F) -> Var {
        self.unary(
            a,
            move |x| x.max(lo).min(hi),
            move |g, x, _| {
                g * &x.mapv(|v| {
                    if v > lo && v < hi {
                        F::one()
                    } else {
                        F::zero()
                    }
                })
            },
        )
    }

    // ---- reductions ----

    pub fn sum_all(&self, a: Var) -> Var {
        let va = self.value(a);
        let out = ArrayD::from_elem(IxDyn(&[1]), va.sum());
        let shape: Vec<usize> = va.shape().to_vec();
        self.push_op(
            out,
            vec![a.0],
            Box::new(move |g| {
                let gv = *g.iter().next().unwrap();
                vec![ArrayD::from_elem(IxDyn(&shape), gv)]
            }),
        )
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let va = self.value(a);
        let n = F::from_f64(va.len() as f64);
        let out = ArrayD::from_elem(IxDyn(&[1]), va.sum() / n);
        let shape: Vec<usize> = va.shape().to_vec();
        self.push_op(
            out,
            vec![a.0],
            Box::new(move |g| {
                let gv = *g.iter().next().unwrap() / n;
                vec![ArrayD::from_elem(IxDyn(&shape), gv)]
            }),
        )
    }

    /// Sum along one axis, keeping it with size 1.
    pub fn sum_axis_keepdim(&self, a: Var, axis: usize) -> Var {
        let va = self.value(a);
        let n = va.shape()[axis];
        let mut out = va.sum_axis(Axis(axis));
        out.insert_axis_inplace(Axis(axis));
        self.push_op(
            out,
            vec![a.0],
            Box::new(move |g| {
                let mut shape: Vec<usize> = g.shape().to_vec();
                shape[axis] = n;
                vec![g.broadcast(IxDyn(&shape)).unwrap().to_owned()]
            }),
        )
    }

    /// Broadcast a size-1 axis to `n`.
    pub fn repeat_axis(&self, a: Var, axis: usize, n: usize) -> Var {
        let va = self.value(a);
        assert_eq!(va.shape()[axis], 1, "repeat_axis needs size-1 axis");
        let mut shape: Vec<usize> = va.shape().to_vec();
        shape[axis] = n;
        let out = va.broadcast(IxDyn(&shape)).unwrap().to_owned();
        self.push_op(
            out,
            vec![a.0],
            Box::new(move |g| {
                let mut dg = g.sum_axis(Axis(axis));
                dg.insert_axis_inplace(Axis(axis));
                vec![dg]
            }),
        )
    }

    // ---- shape ops ----

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let va = self.value(a);
        let in_shape: Vec<usize> = va.shape().to_vec();
        let out = va
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: incompatible shapes");
        self.push_op(
            out,
            vec![a.0],
            Box::new(move |g| {
                vec![g
                    .as_standard_layout()
                    .to_owned()
                    .into_shape_with_order(IxDyn(&in_shape))
                    .unwrap()]
            }),
        )
    }

    pub fn permute(&self, a: Var, axes: &[usize]) -> Var {
        let va = self.value(a);
        let axes_owned: Vec<usize> = axes.to_vec();
        let out = va
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .to_owned();
        let mut inverse = vec![0usize; axes_owned.len()];
        for (i, &ax) in axes_owned.iter().enumerate() {
            inverse[ax] = i;
        }
        self.push_op(
            out,
            vec![a.0],
            Box::new(move |g| {
                vec![g
                    .view()
                    .permuted_axes(IxDyn(&inverse))
                    .as_standard_layout()
                    .to_owned()]
            }),
        )
    }

    pub fn concat(&self, axis: usize, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let values: Vec<Arc<ArrayD<F>>> = parts.iter().map(|&p| self.value(p)).collect();
        let views: Vec<ArrayViewD<F>> = values.iter().map(|v| v.view()).collect();
        let out = ndarray::concatenate(Axis(axis), &views)
            .expect("concat: shape mismatch")
            .as_standard_layout()
            .to_owned();
        let sizes: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        self.push_op(
            out,
            parts.iter().map(|p| p.0).collect(),
            Box::new(move |g| {
                let mut out = Vec::with_capacity(sizes.len());
                let mut start = 0;
                for &s in &sizes {
                    out.push(
                        g.slice_axis(Axis(axis), Slice::from(start..start + s))
                            .to_owned(),
                    );
                    start += s;
                }
                out
            }),
        )
    }

    pub fn slice_axis_range(&self, a: Var, axis: usize, from: usize, to: usize) -> Var {
        let va = self.value(a);
        let full = va.shape()[axis];
        assert!(from < to && to <= full);
        let out = va
            .slice_axis(Axis(axis), Slice::from(from..to))
            .to_owned();
        let in_shape: Vec<usize> = va.shape().to_vec();
        self.push_op(
            out,
            vec![a.0],
            Box::new(move |g| {
                let mut dg = ArrayD::zeros(IxDyn(&in_shape));
                dg.slice_axis_mut(Axis(axis), Slice::from(from..to))
                    .assign(g);
                vec![dg]
            }),
        )
    }

    // ---- softmax / losses ----

    /// Numerically stable softmax along one axis.
    pub fn softmax_axis(&self, a: Var, axis: usize) -> Var {
        let va = self.value(a);
        let mut out = va.as_standard_layout().to_owned();
        for mut lane in out.lanes_mut(Axis(axis)) {
            let m = lane.iter().cloned().fold(F::neg_infinity(), |a, b| a.max(b));
            lane.mapv_inplace(|x| (x - m).exp());
            let s = lane.sum();
            lane.mapv_inplace(|x| x / s);
        }
        let out_arc = Arc::new(out);
        let p = out_arc.clone();
        let needs = self.nodes.borrow()[a.0].needs_grad;
        let grad_fn: GradFn<F> = Box::new(move |g| {
            // dL/dx = p * (g - sum(g * p, axis))
            let gp = g * &*p;
            let mut dots = gp.sum_axis(Axis(axis));
            dots.insert_axis_inplace(Axis(axis));
            let dots_b = dots.broadcast(g.raw_dim()).unwrap().to_owned();
            let mut dg = g - &dots_b;
            dg = dg * &*p;
            vec![dg]
        });
        self.push_node(
            out_arc,
            vec![a.0],
            if needs { Some(grad_fn) } else { None },
            needs,
        )
    }

    /// Mean weighted cross-entropy of logits `(N, K, D, H, W)` against class
    /// indices `(N, D, H, W)`. The mean runs over all voxels; `weights`, when
    /// given, multiplies each voxel's contribution.
    pub fn cross_entropy_mean(
        &self,
        logits: Var,
        targets: &ArrayD<u8>,
        weights: Option<&ArrayD<F>>,
    ) -> Var {
        let vl = self.value(logits);
        let shape = vl.shape().to_vec();
        assert_eq!(shape.len(), 5, "logits must be (N, K, D, H, W)");
        let (n, k, d, h, w) = (shape[0], shape[1], shape[2], shape[3], shape[4]);
        assert_eq!(targets.shape(), &[n, d, h, w], "target shape mismatch");
        if let Some(ws) = weights {
            assert_eq!(ws.shape(), &[n, d, h, w], "weight shape mismatch");
        }
        let count = F::from_f64((n * d * h * w) as f64);

        // log-softmax over the class axis, evaluated directly.
        let mut total = F::zero();
        let mut grad_base = ArrayD::<F>::zeros(IxDyn(&shape));
        for ni in 0..n {
            for di in 0..d {
                for hi in 0..h {
                    for wi in 0..w {
                        let mut m = F::neg_infinity();
                        for ki in 0..k {
                            m = m.max(vl[[ni, ki, di, hi, wi]]);
                        }
                        let mut z = F::zero();
                        for ki in 0..k {
                            z = z + (vl[[ni, ki, di, hi, wi]] - m).exp();
                        }
                        let logz = z.ln() + m;
                        let t = targets[[ni, di, hi, wi]] as usize;
                        assert!(t < k, "class id {t} >= num_classes {k}");
                        let wt = weights
                            .map(|ws| ws[[ni, di, hi, wi]])
                            .unwrap_or_else(F::one);
                        total = total + wt * (logz - vl[[ni, t, di, hi, wi]]);
                        for ki in 0..k {
                            let p = (vl[[ni, ki, di, hi, wi]] - logz).exp();
                            let ind = if ki == t { F::one() } else { F::zero() };
                            grad_base[[ni, ki, di, hi, wi]] = wt * (p - ind) / count;
                        }
                    }
                }
            }
        }
        let out = ArrayD::from_elem(IxDyn(&[1]), total / count);
        self.push_op(
            out,
            vec![logits.0],
            Box::new(move |g| {
                let gv = *g.iter().next().unwrap();
                vec![grad_base.mapv(|x| x * gv)]
            }),
        )
    }

    // ---- matrix ops (for affinity graphs) ----

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let a2 = va
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("matmul lhs must be 2-d");
        let b2 = vb
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("matmul rhs must be 2-d");
        let out = a2.dot(&b2).into_dyn();
        let va_c = va.clone();
        let vb_c = vb.clone();
        self.push_op(
            out,
            vec![a.0, b.0],
            Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let a2 = va_c.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let b2 = vb_c.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                vec![
                    g2.dot(&b2.t()).into_dyn(),
                    a2.t().dot(&g2).into_dyn(),
                ]
            }),
        )
    }

    pub fn transpose2d(&self, a: Var) -> Var {
        let va = self.value(a);
        let out = va
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("transpose2d needs 2-d")
            .t()
            .as_standard_layout()
            .to_owned()
            .into_dyn();
        self.push_op(
            out,
            vec![a.0],
            Box::new(move |g| {
                vec![g
                    .view()
                    .into_dimensionality::<ndarray::Ix2>()
                    .unwrap()
                    .t()
                    .as_standard_layout()
                    .to_owned()
                    .into_dyn()]
            }),
        )
    }

    // ---- spatial ops ----

    /// 3D convolution, stride 1, zero padding. `x` is `(N, Ci, D, H, W)`,
    /// `w` is `(Co, Ci, kd, kh, kw)`, `b` is `(Co)`.
    pub fn conv3d(&self, x: Var, w: Var, b: Var, pad: (usize, usize, usize)) -> Var {
        let vx = self.value(x);
        let vw = self.value(w);
        let vb = self.value(b);
        let out = conv::conv3d_fwd(&vx, &vw, Some(&vb), pad);
        self.push_op(
            out,
            vec![x.0, w.0, b.0],
            Box::new(move |g| {
                let dx = conv::conv3d_grad_x(g, &vw, pad);
                let dw = conv::conv3d_grad_w(&vx, g, pad, vw.shape());
                let db = conv::conv3d_grad_b(g);
                vec![dx, dw, db]
            }),
        )
    }

    /// Average pooling with window == stride.
    pub fn avg_pool3d(&self, a: Var, window: (usize, usize, usize)) -> Var {
        let va = self.value(a);
        let s = va.shape();
        assert_eq!(s.len(), 5);
        let (wd, wh, ww) = window;
        assert!(
            s[2] % wd == 0 && s[3] % wh == 0 && s[4] % ww == 0,
            "avg_pool3d: dims {:?} not divisible by window {:?}",
            &s[2..],
            window
        );
        let (n, c, od, oh, ow) = (s[0], s[1], s[2] / wd, s[3] / wh, s[4] / ww);
        let mut out = ArrayD::<F>::zeros(IxDyn(&[n, c, od, oh, ow]));
        let inv = F::from_f64(1.0 / (wd * wh * ww) as f64);
        for ni in 0..n {
            for ci in 0..c {
                for di in 0..od {
                    for hi in 0..oh {
                        for wi in 0..ow {
                            let mut acc = F::zero();
                            for dz in 0..wd {
                                for dy in 0..wh {
                                    for dx in 0..ww {
                                        acc = acc
                                            + va[[ni, ci, di * wd + dz, hi * wh + dy, wi * ww + dx]];
                                    }
                                }
                            }
                            out[[ni, ci, di, hi, wi]] = acc * inv;
                        }
                    }
                }
            }
        }
        let in_shape: Vec<usize> = s.to_vec();
        self.push_op(
            out,
            vec![a.0],
            Box::new(move |g| {
                let mut dg = ArrayD::<F>::zeros(IxDyn(&in_shape));
                let gs = g.shape();
                for ni in 0..gs[0] {
                    for ci in 0..gs[1] {
                        for di in 0..gs[2] {
                            for hi in 0..gs[3] {
                                for wi in 0..gs[4] {
                                    let gv = g[[ni, ci, di, hi, wi]] * inv;
                                    for dz in 0..wd {
                                        for dy in 0..wh {
                                            for dx in 0..ww {
                                                dg[[
                                                    ni,
                                                    ci,
                                                    di * wd + dz,
                                                    hi * wh + dy,
                                                    wi * ww + dx,
                                                ]] = gv;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                vec![dg]
            }),
        )
    }

    /// Nearest-neighbor upsampling by integer factors.
    pub fn upsample_nearest3d(&self, a: Var, factor: (usize, usize, usize)) -> Var {
        let va = self.value(a);
        let s = va.shape();
        assert_eq!(s.len(), 5);
        let (fd, fh, fw) = factor;
        let (n, c, d, h, w) = (s[0], s[1], s[2], s[3], s[4]);
        let mut out = ArrayD::<F>::zeros(IxDyn(&[n, c, d * fd, h * fh, w * fw]));
        for ni in 0..n {
            for ci in 0..c {
                for di in 0..d * fd {
                    for hi in 0..h * fh {
                        for wi in 0..w * fw {
                            out[[ni, ci, di, hi, wi]] =
                                va[[ni, ci, di / fd, hi / fh, wi / fw]];
                        }
                    }
                }
            }
        }
        let in_shape: Vec<usize> = s.to_vec();
        self.push_op(
            out,
            vec![a.0],
            Box::new(move |g| {
                let mut dg = ArrayD::<F>::zeros(IxDyn(&in_shape));
                let gs = g.shape().to_vec();
                for ni in 0..gs[0] {
                    for ci in 0..gs[1] {
                        for di in 0..gs[2] {
                            for hi in 0..gs[3] {
                                for wi in 0..gs[4] {
                                    dg[[ni, ci, di / fd, hi / fh, wi / fw]] +=
                                        g[[ni, ci, di, hi, wi]];
                                }
                            }
                        }
                    }
                }
                vec![dg]
            }),
        )
    }

    /// Linear interpolation along the depth axis by factor `r`, half-pixel
    /// centers with edge clamping.
    pub fn upsample_linear_depth(&self, a: Var, r: usize) -> Var {
        let va = self.value(a);
        let s = va.shape();
        assert_eq!(s.len(), 5);
        let (n, c, d, h, w) = (s[0], s[1], s[2], s[3], s[4]);
        let od = d * r;
        let taps: Vec<(usize, usize, F)> = (0..od)
            .map(|j| {
                let t = ((j as f64 + 0.5) / r as f64 - 0.5).clamp(0.0, (d - 1) as f64);
                let i0 = t.floor() as usize;
                let i1 = (i0 + 1).min(d - 1);
                (i0, i1, F::from_f64(t - i0 as f64))
            })
            .collect();
        let taps_b = taps.clone();
        let mut out = ArrayD::<F>::zeros(IxDyn(&[n, c, od, h, w]));
        for ni in 0..n {
            for ci in 0..c {
                for (j, &(i0, i1, f)) in taps.iter().enumerate() {
                    for hi in 0..h {
                        for wi in 0..w {
                            out[[ni, ci, j, hi, wi]] = va[[ni, ci, i0, hi, wi]]
                                * (F::one() - f)
                                + va[[ni, ci, i1, hi, wi]] * f;
                        }
                    }
                }
            }
        }
        let in_shape: Vec<usize> = s.to_vec();
        self.push_op(
            out,
            vec![a.0],
            Box::new(move |g| {
                let mut dg = ArrayD::<F>::zeros(IxDyn(&in_shape));
                let gs = g.shape().to_vec();
                for ni in 0..gs[0] {
                    for ci in 0..gs[1] {
                        for (j, &(i0, i1, f)) in taps_b.iter().enumerate() {
                            for hi in 0..gs[3] {
                                for wi in 0..gs[4] {
                                    let gv = g[[ni, ci, j, hi, wi]];
                                    dg[[ni, ci, i0, hi, wi]] += gv * (F::one() - f);
                                    dg[[ni, ci, i1, hi, wi]] += gv * f;
                                }
                            }
                        }
                    }
                }
                vec![dg]
            }),
        )
    }

    /// Moves channel groups into depth: `(N, C*r, D, H, W)` becomes
    /// `(N, C, r*D, H, W)` with `out[n, c, d*r + s] = in[n, c*r + s, d]`.
    pub fn channels_to_depth(&self, a: Var, r: usize) -> Var {
        let va = self.value(a);
        let s = va.shape();
        assert_eq!(s.len(), 5);
        assert_eq!(s[1] % r, 0, "channel count not divisible by r");
        let (n, cr, d, h, w) = (s[0], s[1], s[2], s[3], s[4]);
        let c = cr / r;
        let mut out = ArrayD::<F>::zeros(IxDyn(&[n, c, d * r, h, w]));
        for ni in 0..n {
            for ci in 0..c {
                for si in 0..r {
                    for di in 0..d {
                        for hi in 0..h {
                            for wi in 0..w {
                                out[[ni, ci, di * r + si, hi, wi]] =
                                    va[[ni, ci * r + si, di, hi, wi]];
                            }
                        }
                    }
                }
            }
        }
        let in_shape: Vec<usize> = s.to_vec();
        self.push_op(
            out,
            vec![a.0],
            Box::new(move |g| {
                let mut dg = ArrayD::<F>::zeros(IxDyn(&in_shape));
                for ni in 0..in_shape[0] {
                    for ci in 0..c {
                        for si in 0..r {
                            for di in 0..d {
                                for hi in 0..in_shape[3] {
                                    for wi in 0..in_shape[4] {
                                        dg[[ni, ci * r + si, di, hi, wi]] =
                                            g[[ni, ci, di * r + si, hi, wi]];
                                    }
                                }
                            }
                        }
                    }
                }
                vec![dg]
            }),
        )
    }
}
