//! AdamW with decoupled weight decay and a cosine-annealed learning rate.
//! Moments are held in f64 regardless of the training precision so the
//! update math does not depend on the parameter dtype.

use crate::nn::{ParamId, ParamStore};
use crate::scalar::Scalar;

/// lr·(1 + cos(π·step/total))/2: exactly lr at step 0, exactly 0 at
/// step == total. Steps are 0-based, so the last applied rate is at
/// total−1.
pub fn cosine_lr(step: usize, total: usize, lr0: f64) -> f64 {
    if total == 0 {
        return lr0;
    }
    let frac = (step.min(total)) as f64 / total as f64;
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Completed update count; bias correction uses step+1 internally.
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new<S: Scalar>(ps: &ParamStore<S>, weight_decay: f64) -> Self {
        let m = (0..ps.len())
            .map(|i| vec![0.0; ps.tensor(ParamId(i)).len()])
            .collect::<Vec<_>>();
        let v = m.clone();
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m,
            v,
        }
    }

    /// One update over every parameter. `grads[i]` pairs with parameter i;
    /// a missing entry means a zero gradient, which still decays the
    /// weights (the decay is decoupled from the gradient).
    pub fn apply<S: Scalar>(
        &mut self,
        ps: &mut ParamStore<S>,
        grads: &[Option<&[S]>],
        lr: f64,
    ) {
        assert_eq!(grads.len(), ps.len(), "one gradient slot per parameter");
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for p in 0..ps.len() {
            let pid = ParamId(p);
            let theta = ps.tensor_mut(pid);
            let (m, v) = (&mut self.m[p], &mut self.v[p]);
            for j in 0..theta.data.len() {
                let g = grads[p].map_or(0.0, |gs| gs[j].to_f64());
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                let x = theta.data[j].to_f64();
                let new = x - lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * x);
                theta.data[j] = S::from_f64(new);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn cosine_endpoints_are_pinned() {
        let total = 2500; // 50 epochs of 50 steps at the default batch size
        assert_eq!(cosine_lr(0, total, 1e-4), 1e-4);
        assert!(cosine_lr(total - 1, total, 1e-4) < 1e-7);
        assert_eq!(cosine_lr(total, total, 1e-4), 0.0);
        for s in 1..total {
            assert!(cosine_lr(s, total, 1e-4) < cosine_lr(s - 1, total, 1e-4));
        }
    }

    #[test]
    fn first_update_matches_hand_computation() {
        let mut ps = ParamStore::<f64>::new();
        let pid = ps.add("w", Tensor::new(vec![2], vec![1.0, -2.0]).unwrap());
        let mut opt = AdamW::new(&ps, 0.01);
        let g = [0.5f64, -0.25];
        opt.apply(&mut ps, &[Some(&g)], 1e-3);
        // Bias correction makes the first step's m̂ equal g and v̂ equal g².
        for j in 0..2 {
            let theta0 = [1.0, -2.0][j];
            let want =
                theta0 - 1e-3 * (g[j] / (g[j].abs() + 1e-8) + 0.01 * theta0);
            let got = ps.tensor(pid).data[j];
            assert!((got - want).abs() < 1e-15, "entry {j}: {got} vs {want}");
        }
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn zero_gradient_still_decays_weights() {
        let mut ps = ParamStore::<f64>::new();
        let pid = ps.add("w", Tensor::new(vec![1], vec![4.0]).unwrap());
        let mut opt = AdamW::new(&ps, 0.1);
        for _ in 0..3 {
            opt.apply(&mut ps, &[None], 0.5);
        }
        // Pure geometric decay: 4·(1−0.5·0.1)³.
        let want = 4.0 * 0.95f64.powi(3);
        assert!((ps.tensor(pid).data[0] - want).abs() < 1e-12);
    }

    #[test]
    fn quadratic_bowl_converges() {
        let target = [0.3f64, -1.2, 2.4];
        let mut ps = ParamStore::<f64>::new();
        let pid = ps.add("w", Tensor::new(vec![3], vec![5.0, 5.0, 5.0]).unwrap());
        let mut opt = AdamW::new(&ps, 0.0);
        for step in 0..800 {
            let theta = ps.tensor(pid).data.clone();
            let g: Vec<f64> = theta.iter().zip(&target).map(|(x, c)| 2.0 * (x - c)).collect();
            let lr = cosine_lr(step, 800, 0.05);
            opt.apply(&mut ps, &[Some(&g)], lr);
        }
        for (x, c) in ps.tensor(pid).data.iter().zip(&target) {
            assert!((x - c).abs() < 1e-2, "{x} vs {c}");
        }
    }
}
