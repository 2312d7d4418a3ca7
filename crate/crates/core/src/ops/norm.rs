//! Softmax and layer normalization over the last axis.

use std::rc::Rc;

use crate::tape::{GradStore, Var};
use crate::{Result, Tape};

const LN_EPS: f64 = 1e-5;

impl Tape {
    /// Softmax over the last axis.
    pub fn softmax_last(&self, a: Var) -> Result<Var> {
        let shape = self.shape_of(a);
        let d = *shape.last().unwrap();
        let va = self.value_of(a);
        let rows = va.len() / d;
        let mut out = vec![0.0f64; va.len()];
        for r in 0..rows {
            let x = &va[r * d..(r + 1) * d];
            let y = &mut out[r * d..(r + 1) * d];
            let mx = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (yi, &xi) in y.iter_mut().zip(x) {
                *yi = (xi - mx).exp();
                z += *yi;
            }
            for yi in y.iter_mut() {
                *yi /= z;
            }
        }
        let vo = Rc::new(out);
        let cvo = Rc::clone(&vo);
        let n = va.len();
        let back = move |go: &[f64], store: &mut GradStore| {
            let ga = store.acc(a.0, n);
            for r in 0..rows {
                let y = &cvo[r * d..(r + 1) * d];
                let g = &go[r * d..(r + 1) * d];
                let dotv: f64 = y.iter().zip(g).map(|(yi, gi)| yi * gi).sum();
                let out = &mut ga[r * d..(r + 1) * d];
                for i in 0..d {
                    out[i] += y[i] * (g[i] - dotv);
                }
            }
        };
        Ok(self.push_rc(shape, vo, Some(Box::new(back))))
    }

    /// Layer normalization over the last axis, without affine parameters.
    /// A constant row normalizes to zeros (epsilon 1e-5 in the
    /// denominator), never NaN.
    pub fn layer_norm_last(&self, a: Var) -> Result<Var> {
        let shape = self.shape_of(a);
        let d = *shape.last().unwrap();
        let va = self.value_of(a);
        let rows = va.len() / d;
        let mut out = vec![0.0f64; va.len()];
        let mut inv_std = vec![0.0f64; rows];
        for r in 0..rows {
            let x = &va[r * d..(r + 1) * d];
            let mean = x.iter().sum::<f64>() / d as f64;
            let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = inv;
            let y = &mut out[r * d..(r + 1) * d];
            for (yi, &xi) in y.iter_mut().zip(x) {
                *yi = (xi - mean) * inv;
            }
        }
        let vo = Rc::new(out);
        let cvo = Rc::clone(&vo);
        let n = va.len();
        let back = move |go: &[f64], store: &mut GradStore| {
            let ga = store.acc(a.0, n);
            for r in 0..rows {
                let y = &cvo[r * d..(r + 1) * d];
                let g = &go[r * d..(r + 1) * d];
                let gmean = g.iter().sum::<f64>() / d as f64;
                let gydot = y.iter().zip(g).map(|(yi, gi)| yi * gi).sum::<f64>() / d as f64;
                let out = &mut ga[r * d..(r + 1) * d];
                let inv = inv_std[r];
                for i in 0..d {
                    out[i] += inv * (g[i] - gmean - y[i] * gydot);
                }
            }
        };
        Ok(self.push_rc(shape, vo, Some(Box::new(back))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::grad_check;
    use crate::{Array, Params};

    #[test]
    fn softmax_symmetry_and_rows_sum_to_one() {
        let t = Tape::new();
        let a = t.leaf(&Array::zeros(vec![1, 3]));
        let y = t.softmax_last(a).unwrap();
        for &v in t.to_array(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }

        let b = t.leaf(&Array::from_vec(vec![2, 4], vec![0.1, -2.0, 3.0, 0.7, 9.0, 9.0, 9.0, 9.0]).unwrap());
        let y = t.softmax_last(b).unwrap();
        let out = t.to_array(y);
        for r in 0..2 {
            let s: f32 = out.data()[r * 4..(r + 1) * 4].iter().sum();
            assert!((s - 1.0).abs() <= 1e-6, "row sum {s}");
            assert!(out.data()[r * 4..(r + 1) * 4].iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn layernorm_constant_row_is_zero() {
        let t = Tape::new();
        let a = t.leaf(&Array::full(vec![2, 5], 3.25));
        let y = t.layer_norm_last(a).unwrap();
        assert!(t.to_array(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn norm_ops_grad_check() {
        let mut params = Params::new();
        let x = params.register_init("x", vec![3, 6], 6, 3).unwrap();
        let err = grad_check(&mut params, 1e-3, 5, 18, |t, b| {
            let sm = t.softmax_last(b.var(x))?;
            let ln = t.layer_norm_last(b.var(x))?;
            let lhs = t.sum_all(t.sqr(sm))?;
            let rhs = t.sum_all(t.silu(ln))?;
            t.add(lhs, rhs)
        })
        .unwrap();
        assert!(err <= 1e-4, "norm grad check err = {err}");
    }
}
