//! Elementwise primitives: broadcasting binary ops, pointwise unaries,
//! and scalar affine helpers.

use std::rc::Rc;

use super::{bcast_strides, broadcast_shape, for_each_pair};
use crate::tape::{GradStore, Var};
use crate::{Result, Tape};

impl Tape {
    fn binary_elem(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        fwd: fn(f64, f64) -> f64,
        da: fn(f64, f64) -> f64,
        db: fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let sa = self.shape_of(a);
        let sb = self.shape_of(b);
        let va = self.value_of(a);
        let vb = self.value_of(b);
        let out_shape = broadcast_shape(op, &sa, &sb)?;
        let numel: usize = out_shape.iter().product();
        let mut out = vec![0.0f64; numel];

        if sa == sb {
            for ((o, &x), &y) in out.iter_mut().zip(va.iter()).zip(vb.iter()) {
                *o = fwd(x, y);
            }
        } else {
            let sta = bcast_strides(&sa, &out_shape);
            let stb = bcast_strides(&sb, &out_shape);
            for_each_pair(&out_shape, &sta, &stb, |o, ia, ib| {
                out[o] = fwd(va[ia], vb[ib]);
            });
        }

        let (na, nb) = (va.len(), vb.len());
        let (cva, cvb) = (Rc::clone(&va), Rc::clone(&vb));
        let same = sa == sb;
        let shapes = (sa, sb, out_shape.clone());
        let back = move |go: &[f64], store: &mut GradStore| {
            if same {
                {
                    let ga = store.acc(a.0, na);
                    for i in 0..na {
                        ga[i] += go[i] * da(cva[i], cvb[i]);
                    }
                }
                let gb = store.acc(b.0, nb);
                for i in 0..nb {
                    gb[i] += go[i] * db(cva[i], cvb[i]);
                }
            } else {
                let (sa, sb, os) = &shapes;
                let sta = bcast_strides(sa, os);
                let stb = bcast_strides(sb, os);
                let mut ga = vec![0.0f64; na];
                let mut gb = vec![0.0f64; nb];
                for_each_pair(os, &sta, &stb, |o, ia, ib| {
                    ga[ia] += go[o] * da(cva[ia], cvb[ib]);
                    gb[ib] += go[o] * db(cva[ia], cvb[ib]);
                });
                {
                    let acc = store.acc(a.0, na);
                    for (g, v) in acc.iter_mut().zip(&ga) {
                        *g += v;
                    }
                }
                let acc = store.acc(b.0, nb);
                for (g, v) in acc.iter_mut().zip(&gb) {
                    *g += v;
                }
            }
        };
        Ok(self.push(out_shape, out, Some(Box::new(back))))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_elem("add", a, b, |x, y| x + y, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_elem("sub", a, b, |x, y| x - y, |_, _| 1.0, |_, _| -1.0)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_elem("mul", a, b, |x, y| x * y, |_, y| y, |x, _| x)
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_elem(
            "div",
            a,
            b,
            |x, y| x / y,
            |_, y| 1.0 / y,
            |x, y| -x / (y * y),
        )
    }

    fn unary_elem(&self, a: Var, fwd: fn(f64) -> f64, dydx: fn(f64, f64) -> f64) -> Var {
        let shape = self.shape_of(a);
        let va = self.value_of(a);
        let out: Vec<f64> = va.iter().map(|&x| fwd(x)).collect();
        let vo = Rc::new(out);
        let n = va.len();
        let cvo = Rc::clone(&vo);
        let back = move |go: &[f64], store: &mut GradStore| {
            let ga = store.acc(a.0, n);
            for i in 0..n {
                ga[i] += go[i] * dydx(va[i], cvo[i]);
            }
        };
        self.push_rc(shape, vo, Some(Box::new(back)))
    }

    pub fn neg(&self, a: Var) -> Var {
        self.unary_elem(a, |x| -x, |_, _| -1.0)
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary_elem(a, f64::exp, |_, y| y)
    }

    pub fn ln(&self, a: Var) -> Var {
        self.unary_elem(a, f64::ln, |x, _| 1.0 / x)
    }

    pub fn sqrt(&self, a: Var) -> Var {
        self.unary_elem(a, f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn sqr(&self, a: Var) -> Var {
        self.unary_elem(a, |x| x * x, |x, _| 2.0 * x)
    }

    pub fn sigmoid(&self, a: Var) -> Result<Var> {
        Ok(self.unary_elem(a, sigmoid_f, |_, y| y * (1.0 - y)))
    }

    /// x * sigmoid(x)
    pub fn silu(&self, a: Var) -> Var {
        self.unary_elem(a, |x| x * sigmoid_f(x), |x, _| {
            let s = sigmoid_f(x);
            s * (1.0 + x * (1.0 - s))
        })
    }

    /// ln(1 + e^x), evaluated stably.
    pub fn softplus(&self, a: Var) -> Var {
        self.unary_elem(
            a,
            |x| {
                if x > 30.0 {
                    x
                } else {
                    x.exp().ln_1p()
                }
            },
            |x, _| sigmoid_f(x),
        )
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Result<Var> {
        let shape = self.shape_of(a);
        let va = self.value_of(a);
        let out: Vec<f64> = va.iter().map(|&x| x + c).collect();
        let n = va.len();
        let back = move |go: &[f64], store: &mut GradStore| {
            let ga = store.acc(a.0, n);
            for i in 0..n {
                ga[i] += go[i];
            }
        };
        Ok(self.push(shape, out, Some(Box::new(back))))
    }

    pub fn mul_scalar(&self, a: Var, c: f64) -> Result<Var> {
        let shape = self.shape_of(a);
        let va = self.value_of(a);
        let out: Vec<f64> = va.iter().map(|&x| x * c).collect();
        let n = va.len();
        let back = move |go: &[f64], store: &mut GradStore| {
            let ga = store.acc(a.0, n);
            for i in 0..n {
                ga[i] += go[i] * c;
            }
        };
        Ok(self.push(shape, out, Some(Box::new(back))))
    }
}

fn sigmoid_f(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Array;

    fn arr(shape: Vec<usize>, data: Vec<f32>) -> Array {
        Array::from_vec(shape, data).unwrap()
    }

    #[test]
    fn broadcast_add_and_grads() {
        let t = Tape::new();
        let a = t.leaf(&arr(vec![2, 1], vec![1.0, 2.0]));
        let b = t.leaf(&arr(vec![1, 3], vec![10.0, 20.0, 30.0]));
        let c = t.add(a, b).unwrap();
        assert_eq!(t.shape_of(c), vec![2, 3]);
        assert_eq!(
            t.to_array(c).data(),
            &[11.0, 21.0, 31.0, 12.0, 22.0, 32.0]
        );
        let s = t.sum_all(c).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap(), &[3.0, 3.0]);
        assert_eq!(g.get(b).unwrap(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn incompatible_shapes_name_both() {
        let t = Tape::new();
        let a = t.leaf(&Array::zeros(vec![2, 3]));
        let b = t.leaf(&Array::zeros(vec![4, 3]));
        let err = t.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 3]"), "{msg}");
    }

    #[test]
    fn silu_matches_definition() {
        let t = Tape::new();
        let x = t.leaf(&arr(vec![3], vec![-1.0, 0.0, 2.0]));
        let y = t.silu(x);
        let want: Vec<f64> = [-1.0f64, 0.0, 2.0]
            .iter()
            .map(|&v| v / (1.0 + (-v).exp()))
            .collect();
        for (got, want) in t.to_array(y).data().iter().zip(&want) {
            assert!((*got as f64 - want).abs() < 1e-6);
        }
    }
}
