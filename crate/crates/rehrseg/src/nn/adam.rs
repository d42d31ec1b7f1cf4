//! Adam optimizer with cosine learning-rate decay.

use super::{ParamSet, Scalar};
use ndarray::ArrayD;
use std::collections::BTreeMap;

pub struct Adam<F: Scalar> {
    base_lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step_count: usize,
    m: Vec<ArrayD<F>>,
    v: Vec<ArrayD<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(params: &ParamSet<F>, base_lr: f64) -> Self {
        let m = (0..params.len())
            .map(|i| ArrayD::zeros(params.tensor(i).raw_dim()))
            .collect();
        let v = (0..params.len())
            .map(|i| ArrayD::zeros(params.tensor(i).raw_dim()))
            .collect();
        Adam {
            base_lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            m,
            v,
        }
    }

    pub fn step_count(&self) -> usize {
        self.step_count
    }

    /// Cosine-annealed learning rate for step `t` of `total`.
    pub fn cosine_lr(base: f64, t: usize, total: usize) -> f64 {
        let frac = (t as f64 / total.max(1) as f64).min(1.0);
        base * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
    }

    /// Applies one update. `grads[i]` pairs with parameter `i`; `None`
    /// entries are skipped (parameter untouched this step).
    pub fn step(&mut self, params: &mut ParamSet<F>, grads: &[Option<ArrayD<F>>], lr: f64) {
        self.step_count += 1;
        let t = self.step_count as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        let b1 = F::from_f64(self.beta1);
        let b2 = F::from_f64(self.beta2);
        let one_m_b1 = F::from_f64(1.0 - self.beta1);
        let one_m_b2 = F::from_f64(1.0 - self.beta2);
        let eps = F::from_f64(self.eps);
        let scale = F::from_f64(lr / bc1);
        let vs = F::from_f64(1.0 / bc2);
        for (i, grad) in grads.iter().enumerate() {
            let Some(g) = grad else { continue };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            m.zip_mut_with(g, |mv, &gv| *mv = b1 * *mv + one_m_b1 * gv);
            v.zip_mut_with(g, |vv, &gv| *vv = b2 * *vv + one_m_b2 * gv * gv);
            let p = params.tensor_mut(i);
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|pv, &mv, &vv| {
                *pv = *pv - scale * mv / ((vv * vs).sqrt() + eps);
            });
        }
    }

    /// Serializes moment estimates alongside parameters for exact resume.
    pub fn state_to_f32_map(&self, params: &ParamSet<F>) -> BTreeMap<String, (Vec<usize>, Vec<f32>)> {
        let mut map = BTreeMap::new();
        for (i, name) in params.names().iter().enumerate() {
            map.insert(
                format!("adam.m.{name}"),
                (
                    self.m[i].shape().to_vec(),
                    self.m[i].iter().map(|&v| v.to_f64() as f32).collect(),
                ),
            );
            map.insert(
                format!("adam.v.{name}"),
                (
                    self.v[i].shape().to_vec(),
                    self.v[i].iter().map(|&v| v.to_f64() as f32).collect(),
                ),
            );
        }
        map.insert(
            "adam.step".to_string(),
            (vec![1], vec![self.step_count as f32]),
        );
        map
    }

    pub fn load_state_f32_map(
        &mut self,
        params: &ParamSet<F>,
        map: &BTreeMap<String, (Vec<usize>, Vec<f32>)>,
    ) {
        for (i, name) in params.names().iter().enumerate() {
            if let Some((shape, data)) = map.get(&format!("adam.m.{name}")) {
                if shape == self.m[i].shape() {
                    self.m[i] = ArrayD::from_shape_vec(
                        ndarray::IxDyn(shape),
                        data.iter().map(|&v| F::from_f64(v as f64)).collect(),
                    )
                    .unwrap();
                }
            }
            if let Some((shape, data)) = map.get(&format!("adam.v.{name}")) {
                if shape == self.v[i].shape() {
                    self.v[i] = ArrayD::from_shape_vec(
                        ndarray::IxDyn(shape),
                        data.iter().map(|&v| F::from_f64(v as f64)).collect(),
                    )
                    .unwrap();
                }
            }
        }
        if let Some((_, data)) = map.get("adam.step") {
            self.step_count = data[0] as usize;
        }
    }

    pub fn base_lr(&self) -> f64 {
        self.base_lr
    }
}
