//! Matrix multiplication, batched matrix multiplication, and 1-D
//! convolution (cross-correlation, "same" zero padding, stride 1).

use std::rc::Rc;

use super::{gemm_nn, gemm_nt, gemm_tn};
use crate::tape::{GradStore, Var};
use crate::{Error, Result, Tape};

impl Tape {
    /// `[m,k] · [k,n] -> [m,n]`
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape_of(a);
        let sb = self.shape_of(b);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let va = self.value_of(a);
        let vb = self.value_of(b);
        let mut out = vec![0.0f64; m * n];
        gemm_nn(m, k, n, &va, &vb, &mut out);
        let back = move |go: &[f64], store: &mut GradStore| {
            {
                let ga = store.acc(a.0, m * k);
                gemm_nt(m, n, k, go, &vb, ga);
            }
            let gb = store.acc(b.0, k * n);
            gemm_tn(m, k, n, &va, go, gb);
        };
        Ok(self.push(vec![m, n], out, Some(Box::new(back))))
    }

    /// `[B,m,k] · [B,k,n] -> [B,m,n]`
    pub fn bmm(&self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape_of(a);
        let sb = self.shape_of(b);
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::ShapeMismatch {
                op: "bmm",
                lhs: sa,
                rhs: sb,
            });
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let va = self.value_of(a);
        let vb = self.value_of(b);
        let mut out = vec![0.0f64; bs * m * n];
        for i in 0..bs {
            gemm_nn(
                m,
                k,
                n,
                &va[i * m * k..(i + 1) * m * k],
                &vb[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let back = move |go: &[f64], store: &mut GradStore| {
            {
                let ga = store.acc(a.0, bs * m * k);
                for i in 0..bs {
                    gemm_nt(
                        m,
                        n,
                        k,
                        &go[i * m * n..(i + 1) * m * n],
                        &vb[i * k * n..(i + 1) * k * n],
                        &mut ga[i * m * k..(i + 1) * m * k],
                    );
                }
            }
            let gb = store.acc(b.0, bs * k * n);
            for i in 0..bs {
                gemm_tn(
                    m,
                    k,
                    n,
                    &va[i * m * k..(i + 1) * m * k],
                    &go[i * m * n..(i + 1) * m * n],
                    &mut gb[i * k * n..(i + 1) * k * n],
                );
            }
        };
        Ok(self.push(vec![bs, m, n], out, Some(Box::new(back))))
    }

    /// Affine map on the last axis: `x · w + bias`, where `x` is
    /// `[..., in]`, `w` is `[in, out]` and `bias` is `[out]`.
    pub fn linear(&self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let sx = self.shape_of(x);
        let sw = self.shape_of(w);
        if sw.len() != 2 || *sx.last().unwrap() != sw[0] {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: sx,
                rhs: sw,
            });
        }
        let rows: usize = sx[..sx.len() - 1].iter().product();
        let flat = self.reshape(x, vec![rows, sw[0]])?;
        let mut y = self.matmul(flat, w)?;
        if let Some(b) = bias {
            y = self.add(y, b)?;
        }
        let mut out_shape = sx;
        *out_shape.last_mut().unwrap() = sw[1];
        self.reshape(y, out_shape)
    }

    /// Cross-correlation over the last axis with zero "same" padding,
    /// stride 1. `x` is `[n, c_in, l]`, `w` is `[c_out, c_in, kw]`,
    /// `bias` is `[c_out]`. Output is `[n, c_out, l]`.
    pub fn conv1d(&self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let sx = self.shape_of(x);
        let sw = self.shape_of(w);
        if sx.len() != 3 || sw.len() != 3 || sx[1] != sw[1] {
            return Err(Error::ShapeMismatch {
                op: "conv1d",
                lhs: sx,
                rhs: sw,
            });
        }
        let (n, c_in, l) = (sx[0], sx[1], sx[2]);
        let (c_out, _, kw) = (sw[0], sw[1], sw[2]);
        let pad = kw / 2;
        let vx = self.value_of(x);
        let vw = self.value_of(w);
        let vb = bias.map(|b| (b, self.value_of(b)));
        if let Some((b, ref v)) = vb {
            if v.len() != c_out {
                return Err(Error::ShapeMismatch {
                    op: "conv1d bias",
                    lhs: self.shape_of(b),
                    rhs: vec![c_out],
                });
            }
        }

        let mut out = vec![0.0f64; n * c_out * l];
        for ni in 0..n {
            for co in 0..c_out {
                let orow = &mut out[(ni * c_out + co) * l..(ni * c_out + co + 1) * l];
                if let Some((_, ref v)) = vb {
                    orow.fill(v[co]);
                }
                for ci in 0..c_in {
                    let xrow = &vx[(ni * c_in + ci) * l..(ni * c_in + ci + 1) * l];
                    for dk in 0..kw {
                        let wv = vw[(co * c_in + ci) * kw + dk];
                        // output t reads input t + dk - pad
                        let (t0, t1) = valid_range(l, dk, pad);
                        for t in t0..t1 {
                            orow[t] += wv * xrow[t + dk - pad];
                        }
                    }
                }
            }
        }

        let cx = Rc::clone(&vx);
        let cw = Rc::clone(&vw);
        let back = move |go: &[f64], store: &mut GradStore| {
            {
                let gx = store.acc(x.0, n * c_in * l);
                for ni in 0..n {
                    for co in 0..c_out {
                        let grow = &go[(ni * c_out + co) * l..(ni * c_out + co + 1) * l];
                        for ci in 0..c_in {
                            let xg = &mut gx[(ni * c_in + ci) * l..(ni * c_in + ci + 1) * l];
                            for dk in 0..kw {
                                let wv = cw[(co * c_in + ci) * kw + dk];
                                let (t0, t1) = valid_range(l, dk, pad);
                                for t in t0..t1 {
                                    xg[t + dk - pad] += wv * grow[t];
                                }
                            }
                        }
                    }
                }
            }
            {
                let gw = store.acc(w.0, c_out * c_in * kw);
                for ni in 0..n {
                    for co in 0..c_out {
                        let grow = &go[(ni * c_out + co) * l..(ni * c_out + co + 1) * l];
                        for ci in 0..c_in {
                            let xrow = &cx[(ni * c_in + ci) * l..(ni * c_in + ci + 1) * l];
                            for dk in 0..kw {
                                let (t0, t1) = valid_range(l, dk, pad);
                                let mut s = 0.0;
                                for t in t0..t1 {
                                    s += grow[t] * xrow[t + dk - pad];
                                }
                                gw[(co * c_in + ci) * kw + dk] += s;
                            }
                        }
                    }
                }
            }
            if let Some((b, _)) = vb {
                let gb = store.acc(b.0, c_out);
                for ni in 0..n {
                    for co in 0..c_out {
                        let grow = &go[(ni * c_out + co) * l..(ni * c_out + co + 1) * l];
                        gb[co] += grow.iter().sum::<f64>();
                    }
                }
            }
        };
        Ok(self.push(vec![n, c_out, l], out, Some(Box::new(back))))
    }
}

// Output positions t for which t + dk - pad lands inside [0, l).
fn valid_range(l: usize, dk: usize, pad: usize) -> (usize, usize) {
    let t0 = pad.saturating_sub(dk);
    let t1 = (l + pad - dk).min(l);
    (t0, t1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::grad_check;
    use crate::{Array, Params};

    #[test]
    fn identity_matmul() {
        let t = Tape::new();
        let eye = Array::from_vec(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let m = Array::from_vec(vec![3, 3], (0..9).map(|v| v as f32 - 4.0).collect()).unwrap();
        let a = t.leaf(&eye);
        let b = t.leaf(&m);
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.to_array(c).data(), m.data());
    }

    #[test]
    fn matmul_shape_error_names_both() {
        let t = Tape::new();
        let a = t.leaf(&Array::zeros(vec![2, 3]));
        let b = t.leaf(&Array::zeros(vec![4, 2]));
        let msg = t.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"));
    }

    #[test]
    fn conv1d_known_values() {
        // x = [1,2,3,4], w = [1,0,-1] (k=3, pad=1)
        let t = Tape::new();
        let x = t.leaf(&Array::from_vec(vec![1, 1, 4], vec![1., 2., 3., 4.]).unwrap());
        let w = t.leaf(&Array::from_vec(vec![1, 1, 3], vec![1., 0., -1.]).unwrap());
        let y = t.conv1d(x, w, None).unwrap();
        // y[t] = x[t-1] - x[t+1] with zero padding: [-2, -2, -2, 3]
        assert_eq!(t.to_array(y).data(), &[-2.0, -2.0, -2.0, 3.0]);
    }

    #[test]
    fn matmul_bmm_conv_grad_check() {
        let mut params = Params::new();
        let a = params.register_init("a", vec![4, 5], 5, 11).unwrap();
        let b = params.register_init("b", vec![5, 3], 5, 11).unwrap();
        let x = params.register_init("x", vec![2, 3, 8], 8, 11).unwrap();
        let w = params.register_init("w", vec![4, 3, 5], 15, 11).unwrap();
        let bias = params.register_init("bias", vec![4], 4, 11).unwrap();
        let err = grad_check(&mut params, 1e-3, 5, 12, |t, bd| {
            let m = t.matmul(bd.var(a), bd.var(b))?;
            let c = t.conv1d(bd.var(x), bd.var(w), Some(bd.var(bias)))?;
            let s1 = t.sum_all(t.sigmoid(m)?)?;
            let s2 = t.sum_all(t.silu(c))?;
            t.add(s1, s2)
        })
        .unwrap();
        assert!(err <= 1e-6, "linalg grad check err = {err}");
    }
}
