use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::Module;
use crate::tensor::Element;

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |b: f64| b > 0.0 && b < 1.0;
        if !(self.lr > 0.0 && self.eps > 0.0 && in_unit(self.beta1) && in_unit(self.beta2)) {
            return Err(Error::invalid(format!(
                "Adam needs lr > 0, eps > 0 and betas in (0, 1), got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Bias-corrected Adam over the trainable tensors of one module.
#[derive(Clone, Debug)]
pub struct Adam<T: Element = f32> {
    config: AdamConfig,
    steps: u64,
    moments: BTreeMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Element> Adam<T> {
    pub fn new(config: AdamConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            steps: 0,
            moments: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// First and second moment estimates of a parameter, if it has been stepped.
    pub fn moments(&self, name: &str) -> Option<(&[T], &[T])> {
        self.moments.get(name).map(|(m, v)| (m.as_slice(), v.as_slice()))
    }

    /// Update every trainable tensor from its stored gradient (absent
    /// gradients count as zero), then clear the gradients. A non-finite
    /// gradient aborts before anything is modified.
    pub fn step<M: Module<T> + ?Sized>(&mut self, module: &mut M) -> Result<()> {
        let mut bad = None;
        module.visit(&mut |name, t, kind| {
            if bad.is_none() && kind.trainable() && t.grad().is_some_and(|g| g.iter().any(|x| !x.is_finite())) {
                bad = Some(name.to_owned());
            }
        });
        if let Some(name) = bad {
            return Err(Error::NonFiniteGradient(name));
        }

        self.steps += 1;
        let c = &self.config;
        let t_ = self.steps as i32;
        let lr = T::from_f64_lossy(c.lr);
        let (b1, b2) = (T::from_f64_lossy(c.beta1), T::from_f64_lossy(c.beta2));
        let eps = T::from_f64_lossy(c.eps);
        let correct1 = T::from_f64_lossy(1.0 - c.beta1.powi(t_));
        let correct2 = T::from_f64_lossy(1.0 - c.beta2.powi(t_));
        let moments = &mut self.moments;
        module.visit_mut(&mut |name, t, kind| {
            if !kind.trainable() {
                return;
            }
            let grad = t.take_grad();
            let (m, v) = moments
                .entry(name.to_owned())
                .or_insert_with(|| (vec![T::zero(); t.len()], vec![T::zero(); t.len()]));
            for (i, p) in t.data_mut().iter_mut().enumerate() {
                let g = grad.as_ref().map_or(T::zero(), |g| g[i]);
                m[i] = b1 * m[i] + (T::one() - b1) * g;
                v[i] = b2 * v[i] + (T::one() - b2) * g * g;
                let m_hat = m[i] / correct1;
                let v_hat = v[i] / correct2;
                *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
            }
        });
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamKind;
    use crate::tensor::Tensor;

    struct Scalar(Tensor<f64>);

    impl Module<f64> for Scalar {
        fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<f64>, ParamKind)) {
            f("w", &self.0, ParamKind::Weight);
        }
        fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<f64>, ParamKind)) {
            f("w", &mut self.0, ParamKind::Weight);
        }
        fn batch_norms_mut(&mut self) -> Vec<&mut crate::nn::BatchNorm<f64>> {
            Vec::new()
        }
    }

    fn scalar(w: f64) -> Scalar {
        Scalar(Tensor::scalar(w).with_requires_grad(true))
    }

    fn adam(lr: f64) -> Adam<f64> {
        Adam::new(AdamConfig {
            lr,
            ..AdamConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        for g in [3.0, -0.01, 250.0] {
            let mut p = scalar(1.0);
            p.0.set_grad(vec![g]).unwrap();
            let mut opt = adam(2e-4);
            opt.step(&mut p).unwrap();
            let delta = p.0.item() - 1.0;
            assert!((delta.abs() - 2e-4).abs() < 1e-9, "{delta}");
            assert_eq!(delta.signum(), -g.signum());
            assert!(p.0.grad().is_none(), "gradient cleared");
        }
    }

    #[test]
    fn zero_gradient_from_rest_is_a_no_op() {
        let mut p = scalar(0.7);
        let mut opt = adam(0.1);
        opt.step(&mut p).unwrap();
        assert_eq!(p.0.item(), 0.7);
        assert_eq!(opt.moments("w").unwrap(), (&[0.0][..], &[0.0][..]));
    }

    #[test]
    fn zero_gradient_decays_moments() {
        let mut p = scalar(0.7);
        let mut opt = adam(0.1);
        p.0.set_grad(vec![2.0]).unwrap();
        opt.step(&mut p).unwrap();
        let (m0, v0) = opt.moments("w").map(|(m, v)| (m[0], v[0])).unwrap();
        opt.step(&mut p).unwrap();
        let (m1, v1) = opt.moments("w").map(|(m, v)| (m[0], v[0])).unwrap();
        assert!((m1 - 0.5 * m0).abs() < 1e-15);
        assert!((v1 - 0.999 * v0).abs() < 1e-15);
    }

    #[test]
    fn descends_a_quadratic() {
        let mut p = scalar(1.0);
        let mut opt = adam(0.1);
        let mut prev = 1.0;
        for _ in 0..10 {
            let w = p.0.item();
            p.0.set_grad(vec![2.0 * w]).unwrap();
            opt.step(&mut p).unwrap();
            let w = p.0.item();
            assert!(w < prev && w.abs() < 1.0, "{w}");
            prev = w;
        }
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut p = scalar(1.0);
        p.0.set_grad(vec![f64::NAN]).unwrap();
        let mut opt = adam(0.1);
        match opt.step(&mut p) {
            Err(Error::NonFiniteGradient(name)) => assert_eq!(name, "w"),
            other => panic!("{other:?}"),
        }
        assert_eq!(p.0.item(), 1.0);
        assert_eq!(opt.steps(), 0);
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        for c in [
            AdamConfig { lr: 0.0, ..AdamConfig::default() },
            AdamConfig { beta1: 1.0, ..AdamConfig::default() },
            AdamConfig { beta2: 0.0, ..AdamConfig::default() },
        ] {
            assert!(Adam::<f32>::new(c).is_err());
        }
    }
}
