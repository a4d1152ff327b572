use serde::{Deserialize, Serialize};

use super::{Mlp, Scalar};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction; moment buffers mirror the network's shape.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub cfg: AdamConfig,
    m: Mlp<T>,
    v: Mlp<T>,
    t: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(net: &Mlp<T>, cfg: AdamConfig) -> Self {
        Self {
            cfg,
            m: net.zeros_like(),
            v: net.zeros_like(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, net: &mut Mlp<T>, grads: &Mlp<T>) -> Result<()> {
        if !net.same_shape(grads) || !net.same_shape(&self.m) {
            return Err(Error::Config("optimizer/network shape mismatch".into()));
        }
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powf(self.t as f64);
        let bc2 = 1.0 - c.beta2.powf(self.t as f64);
        let cast = |v: f64| T::from(v).unwrap();
        let (b1, b2, nb1, nb2) = (cast(c.beta1), cast(c.beta2), cast(1.0 - c.beta1), cast(1.0 - c.beta2));
        let (lr, eps, bc1, bc2) = (cast(c.lr), cast(c.eps), cast(bc1), cast(bc2));
        for (((p, g), m), v) in net
            .params_mut()
            .zip(grads.params())
            .zip(self.m.params_mut())
            .zip(self.v.params_mut())
        {
            let tiny = T::min_positive_value();
            for (((pi, &gi), mi), vi) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                // Moments of idle parameters decay geometrically; flushing
                // them before they turn subnormal keeps the update fast.
                let mut mn = b1 * *mi + nb1 * gi;
                if mn.abs() < tiny {
                    mn = T::zero();
                }
                let mut vn = b2 * *vi + nb2 * gi * gi;
                if vn < tiny {
                    vn = T::zero();
                }
                *mi = mn;
                *vi = vn;
                *pi = *pi - lr * (mn / bc1) / ((vn / bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut net = Mlp::<f64>::new(&[3, 4, 1], 1).unwrap();
        let before = net.clone();
        let mut opt = Adam::new(&net, AdamConfig::default());
        opt.step(&mut net, &before.zeros_like()).unwrap();
        assert_eq!(net, before);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut net = Mlp::<f64>::new(&[3, 4, 1], 2).unwrap();
        let before = net.clone();
        let mut g = net.zeros_like();
        for (k, v) in g.params_mut().flatten().enumerate() {
            *v = if k % 2 == 0 { 0.37 * (k + 1) as f64 } else { -1e-3 * (k + 1) as f64 };
        }
        let mut opt = Adam::new(&net, AdamConfig::default());
        opt.step(&mut net, &g).unwrap();
        for ((a, b), gi) in net.params().flatten().zip(before.params().flatten()).zip(g.params().flatten()) {
            // Closed form: lr * |g| / (|g| + eps).
            let expect = 0.01 * gi.abs() / (gi.abs() + 1e-8);
            assert!(((b - a) * gi.signum() - expect).abs() < 1e-12);
            assert!(((b - a).abs() - 0.01).abs() < 1e-7);
        }
    }
}
