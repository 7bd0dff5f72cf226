use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Adam with bias correction and a constant learning rate.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update of every parameter. `names` is only used for error
    /// messages. Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, params: &mut [&mut Tensor<f32>], grads: &[Tensor<f32>], names: &[String]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::InvalidArgument(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            let name = names.get(i).map(String::as_str).unwrap_or("?");
            if p.shape() != g.shape() {
                return Err(Error::shape(format!(
                    "gradient of {name} has shape {}, parameter has {}",
                    g.shape(),
                    p.shape()
                )));
            }
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of parameter {name}")));
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len() || self.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.numel()) {
            return Err(Error::shape("optimizer state does not match the parameters".to_string()));
        }

        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (self.beta1, self.beta2);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g as f64;
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let step = self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
                *w = (*w as f64 - step) as f32;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f32) -> Tensor<f32> {
        Tensor::from_vec([1, 1, 1, 1], vec![v]).unwrap()
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut w = one(0.0);
        let mut adam = Adam::new(1e-4);
        adam.step(&mut [&mut w], &[one(1.0)], &["w".into()]).unwrap();
        let want = -1e-4 / (1.0 + 1e-8);
        assert!((w.data()[0] as f64 - want).abs() < 1e-10, "{}", w.data()[0]);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut w = Tensor::from_vec([1, 1, 1, 3], vec![0.5, -2.0, 3.0]).unwrap();
        let before = w.clone();
        let mut adam = Adam::new(1e-3);
        for _ in 0..3 {
            adam.step(&mut [&mut w], &[Tensor::zeros([1, 1, 1, 3])], &["w".into()]).unwrap();
        }
        assert_eq!(w, before);
    }

    #[test]
    fn nan_gradient_names_parameter_and_changes_nothing() {
        let mut a = one(1.0);
        let mut b = one(2.0);
        let mut adam = Adam::new(1e-3);
        let err = adam
            .step(&mut [&mut a, &mut b], &[one(1.0), one(f32::NAN)], &["a".into(), "stage1.head.bias".into()])
            .unwrap_err();
        assert!(err.to_string().contains("stage1.head.bias"));
        assert_eq!((a.data()[0], b.data()[0]), (1.0, 2.0));
        assert_eq!(adam.steps(), 0);
    }

    #[test]
    fn matches_scalar_recurrence_over_steps() {
        let grads = [0.3f64, -1.2, 0.7, 0.0, 2.5];
        let (lr, b1, b2, eps) = (1e-2, 0.9, 0.999, 1e-8);
        let (mut w, mut m, mut v) = (0.25f64, 0.0, 0.0);
        let mut p = one(0.25);
        let mut adam = Adam::new(lr);
        for (t, &g) in grads.iter().enumerate() {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let t = t as i32 + 1;
            w -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
            adam.step(&mut [&mut p], &[one(g as f32)], &["w".into()]).unwrap();
        }
        assert!((p.data()[0] as f64 - w).abs() < 1e-6);
    }
}
