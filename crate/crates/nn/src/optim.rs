use serde::{Deserialize, Serialize};

use crate::{Error, Float, ParamSet, Result, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig { base_lr: 0.03, momentum: 0.9, weight_decay: 1e-4, batch_size: 32 }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.base_lr.is_finite()
            && self.base_lr > 0.0
            && (0.0..1.0).contains(&self.momentum)
            && self.weight_decay.is_finite()
            && self.weight_decay >= 0.0
            && self.batch_size > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid SGD config {self:?}")))
        }
    }
}

/// SGD with heavy-ball momentum and L2 weight decay:
/// `v ← μ·v + g + λ·w`, `w ← w − lr·v`.
#[derive(Clone, Debug)]
pub struct Sgd<T: Float = f32> {
    config: SgdConfig,
    velocity: Vec<Vec<Tensor<T>>>,
}

impl<T: Float> Sgd<T> {
    pub fn new(config: SgdConfig) -> Result<Self> {
        config.validate()?;
        Ok(Sgd { config, velocity: Vec::new() })
    }

    pub fn config(&self) -> &SgdConfig {
        &self.config
    }

    /// Applies one update to every set in `groups` (state is kept per
    /// position, so always pass the groups in the same order), then zeroes
    /// their gradients.
    pub fn step(&mut self, groups: &mut [&mut ParamSet<T>], lr: f64) {
        if self.velocity.len() < groups.len() {
            self.velocity.resize_with(groups.len(), Vec::new);
        }
        let mu = T::from_f64_lossy(self.config.momentum);
        let wd = T::from_f64_lossy(self.config.weight_decay);
        let lr = T::from_f64_lossy(lr);
        for (set, vel) in groups.iter_mut().zip(self.velocity.iter_mut()) {
            if vel.is_empty() {
                *vel = set.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
            }
            for (p, v) in set.iter_mut().zip(vel.iter_mut()) {
                let vd = v.data_mut();
                let grad = p.grad.data();
                let w = p.value.data_mut();
                for i in 0..w.len() {
                    vd[i] = mu * vd[i] + grad[i] + wd * w[i];
                    w[i] -= lr * vd[i];
                }
            }
            set.zero_grad();
        }
    }
}

/// Global-norm clipping across all groups; returns the pre-clip norm.
pub fn clip_grad_norm<T: Float>(groups: &mut [&mut ParamSet<T>], max_norm: f64) -> f64 {
    let total: f64 = groups
        .iter()
        .flat_map(|s| s.iter())
        .flat_map(|p| p.grad.data().iter())
        .map(|v| {
            let x = v.to_f64_lossy();
            x * x
        })
        .sum::<f64>()
        .sqrt();
    if total > max_norm && total > 0.0 {
        let scale = T::from_f64_lossy(max_norm / total);
        for set in groups.iter_mut() {
            for p in set.iter_mut() {
                p.grad.data_mut().iter_mut().for_each(|v| *v *= scale);
            }
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(w: f32, g: f32) -> ParamSet<f32> {
        let mut s = ParamSet::new();
        s.add("w", Tensor::new(&[1], vec![w]).unwrap());
        s.iter_mut().next().unwrap().grad = Tensor::new(&[1], vec![g]).unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_weights() {
        let mut s = single(1.5, 0.0);
        let mut opt = Sgd::new(SgdConfig { weight_decay: 0.0, ..Default::default() }).unwrap();
        opt.step(&mut [&mut s], 0.1);
        assert_eq!(s.value(0).data(), &[1.5]);
    }

    #[test]
    fn vanilla_sgd() {
        let mut s = single(1.0, 2.0);
        let cfg = SgdConfig { momentum: 0.0, weight_decay: 0.0, ..Default::default() };
        let mut opt = Sgd::new(cfg).unwrap();
        opt.step(&mut [&mut s], 0.1);
        assert!((s.value(0).data()[0] - 0.8).abs() < 1e-7);
    }

    #[test]
    fn two_momentum_steps_unrolled() {
        let (lr, g) = (0.1f64, 0.5f32);
        let mut s = single(0.0, g);
        let cfg = SgdConfig { momentum: 0.9, weight_decay: 0.0, ..Default::default() };
        let mut opt = Sgd::new(cfg).unwrap();
        opt.step(&mut [&mut s], lr);
        s.iter_mut().next().unwrap().grad = Tensor::new(&[1], vec![g]).unwrap();
        opt.step(&mut [&mut s], lr);
        let want = -(lr * g as f64 * (1.0 + 1.9));
        assert!((s.value(0).data()[0] as f64 - want).abs() < 1e-6);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut a = single(0.0, 3.0);
        let mut b = single(0.0, 4.0);
        let n = clip_grad_norm(&mut [&mut a, &mut b], 1.0);
        assert!((n - 5.0).abs() < 1e-9);
        let ga = a.iter().next().unwrap().grad.data()[0];
        let gb = b.iter().next().unwrap().grad.data()[0];
        assert!(((ga * ga + gb * gb).sqrt() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_config() {
        assert!(Sgd::<f32>::new(SgdConfig { momentum: 1.0, ..Default::default() }).is_err());
        assert!(Sgd::<f32>::new(SgdConfig { base_lr: f64::NAN, ..Default::default() }).is_err());
    }
}
