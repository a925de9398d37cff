//! Adam with decoupled weight decay, and global-norm gradient clipping.

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamHyper {
    pub fn new(lr: f64, betas: [f64; 2], weight_decay: f64) -> Self {
        Self { lr, beta1: betas[0], beta2: betas[1], eps: 1e-8, weight_decay }
    }
}

fn c<T: Float>(v: f64) -> T {
    T::from(v).expect("hyperparameter representable")
}

/// One AdamW update at step `t` (1-based) on a flat parameter slice.
pub fn adamw_update<T: Float>(p: &mut [T], g: &[T], m: &mut [T], v: &mut [T], hp: &AdamHyper, t: u64) {
    let (b1, b2) = (c::<T>(hp.beta1), c::<T>(hp.beta2));
    let one = T::one();
    let bc1 = one - b1.powi(t as i32);
    let bc2 = one - b2.powi(t as i32);
    let lr = c::<T>(hp.lr);
    let decay = one - lr * c::<T>(hp.weight_decay);
    let eps = c::<T>(hp.eps);
    for i in 0..p.len() {
        m[i] = b1 * m[i] + (one - b1) * g[i];
        v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        p[i] = p[i] * decay - lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// First and second moments for every tensor of one store.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Updates applied so far.
    pub t: u64,
}

impl Moments {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || store.ids().map(|id| Tensor::zeros(store.get(id).shape())).collect();
        Self { m: zeros(), v: zeros(), t: 0 }
    }
}

/// Applies one update to every parameter that received a gradient.
pub fn adamw_step(store: &mut ParamStore, moments: &mut Moments, grads: &[Option<Tensor>], hp: &AdamHyper) {
    moments.t += 1;
    let ids: Vec<_> = store.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let Some(g) = &grads[k] else { continue };
        let p = store.get_mut(id);
        adamw_update(p.data_mut(), g.data(), moments.m[k].data_mut(), moments.v[k].data_mut(), hp, moments.t);
    }
}

/// Euclidean norm over all present gradients, accumulated in `f64`.
pub fn global_norm(groups: &[&[Option<Tensor>]]) -> f64 {
    groups.iter().flat_map(|g| g.iter().flatten()).map(|t| t.sum_sq()).sum::<f64>().sqrt()
}

/// Rescales all gradients jointly so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(groups: &mut [&mut [Option<Tensor>]], max_norm: f64) -> f64 {
    let norm = global_norm(&groups.iter().map(|g| &**g).collect::<Vec<_>>());
    if norm > max_norm && norm.is_finite() {
        let scale = (max_norm / norm) as f32;
        for t in groups.iter_mut().flat_map(|g| g.iter_mut().flatten()) {
            for v in t.data_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Textbook Adam (no weight decay) written without the shared helper.
    fn reference_adam(x0: &[f64], target: &[f64], steps: usize, lr: f64) -> Vec<Vec<f64>> {
        let (b1, b2, eps) = (0.5, 0.999, 1e-8);
        let mut x = x0.to_vec();
        let mut m = vec![0.0; x.len()];
        let mut v = vec![0.0; x.len()];
        let mut out = Vec::new();
        for t in 1..=steps {
            for i in 0..x.len() {
                let g = 2.0 * (x[i] - target[i]);
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let mh = m[i] / (1.0 - f64::powi(b1, t as i32));
                let vh = v[i] / (1.0 - f64::powi(b2, t as i32));
                x[i] -= lr * mh / (vh.sqrt() + eps);
            }
            out.push(x.clone());
        }
        out
    }

    #[test]
    fn matches_reference_adam_on_quadratic() {
        let x0 = [0.3, -1.2, 2.5, 0.0];
        let target = [1.0, 0.5, -0.5, 0.25];
        let lr = 0.05;
        let expect = reference_adam(&x0, &target, 200, lr);
        let hp = AdamHyper::new(lr, [0.5, 0.999], 0.0);
        let mut x = x0.to_vec();
        let mut m = vec![0.0; 4];
        let mut v = vec![0.0; 4];
        for (t, e) in expect.iter().enumerate() {
            let g: Vec<f64> = x.iter().zip(&target).map(|(a, b)| 2.0 * (a - b)).collect();
            adamw_update(&mut x, &g, &mut m, &mut v, &hp, t as u64 + 1);
            for (a, b) in x.iter().zip(e) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let hp = AdamHyper::new(0.1, [0.5, 0.999], 0.01);
        let mut p = [2.0f64];
        adamw_update(&mut p, &[0.0], &mut [0.0], &mut [0.0], &hp, 1);
        assert!((p[0] - 2.0 * (1.0 - 0.1 * 0.01)).abs() < 1e-15);
    }

    #[test]
    fn clipping_rescales_to_max_norm() {
        // Norm of (60, 80) is 100.
        let mut a = vec![Some(Tensor::new([1], vec![60.0])), None];
        let mut b = vec![Some(Tensor::new([1], vec![80.0]))];
        let before = clip_global_norm(&mut [&mut a, &mut b], 10.0);
        assert!((before - 100.0).abs() < 1e-9);
        let after = global_norm(&[&a, &b]);
        assert!((after - 10.0).abs() < 1e-6);
        let before = clip_global_norm(&mut [&mut a, &mut b], f64::INFINITY);
        assert!((before - 10.0).abs() < 1e-6);
    }

    #[test]
    fn missing_gradients_leave_parameters_untouched() {
        let mut store = ParamStore::new();
        let a = store.insert("a", Tensor::full([2], 1.0));
        let b = store.insert("b", Tensor::full([2], 1.0));
        let mut mom = Moments::new(&store);
        let hp = AdamHyper::new(0.1, [0.5, 0.999], 1e-4);
        adamw_step(&mut store, &mut mom, &[Some(Tensor::full([2], 1.0)), None], &hp);
        assert!(store.get(a).data()[0] < 1.0);
        assert_eq!(store.get(b).data(), &[1.0, 1.0]);
    }
}
