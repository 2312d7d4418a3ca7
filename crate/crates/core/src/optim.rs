//! Adaptive moment optimizer with decoupled weight decay, cosine schedule
//! and global gradient-norm clipping.

use crate::array::Array;
use crate::tape::Params;

pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub step: u64,
    m: Vec<Array>,
    v: Vec<Array>,
}

impl AdamW {
    pub fn new(params: &Params, lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            clip_norm: 1.0,
            step: 0,
            m: params.iter().map(|p| Array::zeros(p.value.shape().to_vec())).collect(),
            v: params.iter().map(|p| Array::zeros(p.value.shape().to_vec())).collect(),
        }
    }

    /// Cosine decay to zero with 5% linear warmup.
    pub fn schedule(step: u64, total_steps: u64) -> f64 {
        let warmup = (total_steps as f64 * 0.05).ceil().max(1.0);
        let s = step as f64;
        if s < warmup {
            (s + 1.0) / warmup
        } else {
            let progress = (s - warmup) / (total_steps as f64 - warmup).max(1.0);
            0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
        }
    }

    /// One update from the gradients stored in `params`, with the learning
    /// rate scaled by `lr_scale`.
    pub fn step(&mut self, params: &mut Params, lr_scale: f64) {
        self.step += 1;
        let t = self.step as f64;
        let lr = self.lr * lr_scale;

        // global gradient-norm clip
        let mut sq = 0.0f64;
        for p in params.iter() {
            for &g in p.grad.data() {
                sq += g as f64 * g as f64;
            }
        }
        let norm = sq.sqrt();
        let scale = if norm > self.clip_norm {
            self.clip_norm / norm
        } else {
            1.0
        };

        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for (i, p) in params.iter_mut().enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let value = p.value.data_mut();
            for j in 0..value.len() {
                let g = p.grad.data()[j] as f64 * scale;
                let mj = self.beta1 * m[j] as f64 + (1.0 - self.beta1) * g;
                let vj = self.beta2 * v[j] as f64 + (1.0 - self.beta2) * g * g;
                m[j] = mj as f32;
                v[j] = vj as f32;
                let mhat = mj / bc1;
                let vhat = vj / bc2;
                let mut x = value[j] as f64;
                x -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * x);
                value[j] = x as f32;
            }
        }
    }

    /// Moment tensors for checkpointing, in parameter order.
    pub fn moments(&self) -> (&[Array], &[Array]) {
        (&self.m, &self.v)
    }

    pub fn restore_moments(&mut self, m: Vec<Array>, v: Vec<Array>, step: u64) {
        self.m = m;
        self.v = v;
        self.step = step;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Params;

    #[test]
    fn zero_gradient_changes_nothing_but_decay() {
        let mut params = Params::new();
        params.register("w", Array::full(vec![3], 2.0)).unwrap();
        let mut opt = AdamW::new(&params, 0.1, 0.01);
        opt.step(&mut params, 1.0);
        for &v in params.by_name("w").unwrap().value.data() {
            // only the decoupled decay acts: x <- x - lr * wd * x
            assert!((v - (2.0 - 0.1 * 0.01 * 2.0) as f32).abs() < 1e-6);
        }

        let mut params = Params::new();
        params.register("w", Array::full(vec![3], 2.0)).unwrap();
        let mut opt = AdamW::new(&params, 0.1, 0.0);
        opt.step(&mut params, 1.0);
        assert_eq!(params.by_name("w").unwrap().value.data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn schedule_warms_up_and_decays() {
        let total = 100;
        assert!(AdamW::schedule(0, total) <= 0.21);
        let peak = AdamW::schedule(5, total);
        assert!((peak - 1.0).abs() < 1e-9);
        assert!(AdamW::schedule(99, total) < 0.01);
        // monotone decay after warmup
        let mut prev = peak;
        for s in 6..100 {
            let cur = AdamW::schedule(s, total);
            assert!(cur <= prev + 1e-12);
            prev = cur;
        }
    }

    #[test]
    fn descends_a_quadratic() {
        let mut params = Params::new();
        let w = params.register("w", Array::full(vec![2], 4.0)).unwrap();
        let mut opt = AdamW::new(&params, 0.05, 0.0);
        for _ in 0..200 {
            let t = crate::Tape::new();
            let b = params.bind(&t);
            let loss = t.sum_all(t.sqr(b.var(w))).unwrap();
            let store = t.backward(loss).unwrap();
            params.absorb_grads(&b, &store);
            opt.step(&mut params, 1.0);
        }
        for &v in params.get(w).value.data() {
            assert!(v.abs() < 0.5, "did not descend: {v}");
        }
    }
}
