use hlmg_tensor::{Scalar, Tensor};

use super::TrainConfig;

/// Adam with decoupled weight decay and optional global-norm clipping.
#[derive(Clone, Debug)]
pub struct AdamW<T: Scalar> {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    clip_norm: Option<f64>,
    t: i32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: &TrainConfig, params: &[Tensor<T>]) -> Self {
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            clip_norm: cfg.clip_norm,
            t: 0,
            m: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// Global L2 norm over all gradient buffers.
    pub fn grad_norm(grads: &[Vec<T>]) -> f64 {
        grads
            .iter()
            .flatten()
            .map(|g| g.to_f64().unwrap_or(f64::NAN).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// One update:
    /// `w ← w − lr·(m̂ / (√v̂ + ε) + λ·w)`.
    pub fn step(&mut self, params: &mut [Tensor<T>], mut grads: Vec<Vec<T>>, lr: f64) {
        if let Some(max) = self.clip_norm {
            let norm = Self::grad_norm(&grads);
            if norm > max {
                let s = T::of(max / norm);
                grads.iter_mut().flatten().for_each(|g| *g = *g * s);
            }
        }
        self.t += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::of(1.0 - self.beta1.powi(self.t));
        let c2 = T::of(1.0 - self.beta2.powi(self.t));
        let (lr, eps, wd) = (T::of(lr), T::of(self.eps), T::of(self.weight_decay));
        for (((p, g), m), v) in params.iter_mut().zip(&grads).zip(&mut self.m).zip(&mut self.v) {
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g).zip(m).zip(v) {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *w = *w - lr * (mhat / (vhat.sqrt() + eps) + wd * *w);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(lr: f64, wd: f64) -> TrainConfig {
        TrainConfig {
            lr,
            weight_decay: wd,
            clip_norm: None,
            ..TrainConfig::desk()
        }
    }

    #[test]
    fn first_step_on_quadratic_matches_closed_form() {
        // f(w) = (w − 3)², w₀ = 1, g = −4. After one step m̂ = g and
        // v̂ = g², so w₁ = w₀ − lr·g / (|g| + ε).
        let c = cfg(0.1, 0.0);
        let mut p = vec![Tensor::new([1, 1], vec![1.0f64]).unwrap()];
        let mut opt = AdamW::new(&c, &p);
        let g = 2.0 * (1.0 - 3.0);
        opt.step(&mut p, vec![vec![g]], c.lr);
        let want = 1.0 - 0.1 * g / (g.abs() + c.eps);
        assert!((p[0].data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn decay_shrinks_weights_without_gradient() {
        let c = cfg(0.01, 0.1);
        let mut p = vec![Tensor::new([1, 2], vec![2.0f64, -4.0]).unwrap()];
        let mut opt = AdamW::new(&c, &p);
        opt.step(&mut p, vec![vec![0.0, 0.0]], c.lr);
        assert!((p[0].data()[0] - (2.0 - 0.01 * 0.1 * 2.0)).abs() < 1e-15);
        assert!((p[0].data()[1] - (-4.0 + 0.01 * 0.1 * 4.0)).abs() < 1e-15);
    }

    #[test]
    fn clipping_bounds_the_update_direction() {
        let c = TrainConfig {
            clip_norm: Some(1.0),
            ..cfg(0.1, 0.0)
        };
        let grads = vec![vec![30.0f64, 40.0]];
        assert_eq!(AdamW::<f64>::grad_norm(&grads), 50.0);
        let mut p = vec![Tensor::new([1, 2], vec![0.0f64, 0.0]).unwrap()];
        let mut opt = AdamW::new(&c, &p);
        opt.step(&mut p, grads, c.lr);
        // Adam normalizes per coordinate, so each moves by about lr.
        assert!((p[0].data()[0] + 0.1).abs() < 1e-6);
        assert_eq!(opt.steps(), 1);
    }
}
