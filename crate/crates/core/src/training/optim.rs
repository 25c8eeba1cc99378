use ndarray::{ArrayD, ArrayViewD, ArrayViewMutD, Zip};

use crate::scalar::Scalar;

/// Steps spent warming up: `⌊warmup_frac · steps⌋`.
pub fn warmup_steps(steps: usize, warmup_frac: f64) -> usize {
    ((steps as f64) * warmup_frac).floor() as usize
}

/// Linear warm-up from 0 to `peak`, then linear decay reaching 0 at `steps`.
pub fn learning_rate(step: usize, steps: usize, warmup_frac: f64, peak: f64) -> f64 {
    let warmup = warmup_steps(steps, warmup_frac);
    if step < warmup {
        peak * step as f64 / warmup as f64
    } else if step >= steps {
        0.0
    } else {
        peak * (steps - step) as f64 / (steps - warmup) as f64
    }
}

/// Adam with bias correction and no weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<ArrayD<T>>,
    v: Vec<ArrayD<T>>,
    t: i32,
}

impl<T: Scalar> Adam<T> {
    /// Zero moments shaped like `params`.
    pub fn new<'a>(params: impl IntoIterator<Item = ArrayViewD<'a, T>>) -> Self {
        let m: Vec<ArrayD<T>> = params.into_iter().map(|p| ArrayD::zeros(p.raw_dim())).collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            v: m.clone(),
            m,
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    /// One update of every tensor. A tensor whose gradient has always been
    /// zero keeps zero moments and is left bit-for-bit unchanged.
    pub fn update<'a, 'b>(
        &mut self,
        params: impl IntoIterator<Item = ArrayViewMutD<'a, T>>,
        grads: impl IntoIterator<Item = ArrayViewD<'b, T>>,
        lr: f64,
    ) where
        T: 'a + 'b,
    {
        self.t += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::one() / (T::one() - b1.powi(self.t));
        let c2 = T::one() / (T::one() - b2.powi(self.t));
        let (lr, eps) = (T::of(lr), T::of(self.eps));
        let one = T::one();
        let mut count = 0;
        for (((p, g), m), v) in params
            .into_iter()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            assert_eq!(p.shape(), g.shape(), "parameter and gradient shapes differ");
            Zip::from(p).and(&g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                *p -= lr * (*m * c1) / ((*v * c2).sqrt() + eps);
            });
            count += 1;
        }
        assert_eq!(count, self.m.len(), "tensor count differs from optimizer state");
    }
}
