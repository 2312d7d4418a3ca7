//! Data-movement primitives. All of these are exact permutations or
//! copies of the underlying values; no arithmetic happens.


use super::bcast_strides;
use crate::array::strides;
use crate::tape::{GradStore, Var};
use crate::{Error, Result, Tape};

impl Tape {
    pub fn reshape(&self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        let va = self.value_of(a);
        if numel != va.len() {
            return Err(Error::invalid(format!(
                "reshape: {:?} has {} elements, target {shape:?} needs {numel}",
                self.shape_of(a),
                va.len()
            )));
        }
        let n = va.len();
        let back = move |go: &[f64], store: &mut GradStore| {
            let ga = store.acc(a.0, n);
            for i in 0..n {
                ga[i] += go[i];
            }
        };
        Ok(self.push_rc(shape, va, Some(Box::new(back))))
    }

    /// Permutes axes; `axes` must be a permutation of `0..rank`.
    pub fn permute(&self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape_of(a);
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&ax| ax >= rank || std::mem::replace(&mut seen[ax], true)) {
            return Err(Error::invalid(format!(
                "permute: {axes:?} is not a permutation of 0..{rank}"
            )));
        }
        let va = self.value_of(a);
        let out_shape: Vec<usize> = axes.iter().map(|&ax| shape[ax]).collect();
        let in_strides = strides(&shape);
        let perm_strides: Vec<usize> = axes.iter().map(|&ax| in_strides[ax]).collect();
        let numel = va.len();
        let mut map = vec![0usize; numel];
        let mut out = vec![0.0f64; numel];
        let mut idx = vec![0usize; rank];
        let mut src = 0usize;
        for o in 0..numel {
            out[o] = va[src];
            map[o] = src;
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                src += perm_strides[ax];
                if idx[ax] < out_shape[ax] {
                    break;
                }
                src -= perm_strides[ax] * out_shape[ax];
                idx[ax] = 0;
            }
        }
        let back = move |go: &[f64], store: &mut GradStore| {
            let ga = store.acc(a.0, numel);
            for (o, &src) in map.iter().enumerate() {
                ga[src] += go[o];
            }
        };
        Ok(self.push(out_shape, out, Some(Box::new(back))))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&self, a: Var) -> Result<Var> {
        let rank = self.shape_of(a).len();
        if rank < 2 {
            return Err(Error::invalid("transpose_last: rank < 2".to_string()));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(a, &axes)
    }

    /// Reverses element order along one axis.
    pub fn reverse(&self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape_of(a);
        if axis >= shape.len() {
            return Err(Error::invalid(format!(
                "reverse: axis {axis} out of range for {shape:?}"
            )));
        }
        let va = self.value_of(a);
        let outer: usize = shape[..axis].iter().product();
        let mid = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let numel = va.len();
        let flip = move |buf: &mut [f64], src: &[f64]| {
            for o in 0..outer {
                for m in 0..mid {
                    let s = o * mid * inner + m * inner;
                    let d = o * mid * inner + (mid - 1 - m) * inner;
                    for i in 0..inner {
                        buf[d + i] += src[s + i];
                    }
                }
            }
        };
        let mut out = vec![0.0f64; numel];
        flip(&mut out, &va);
        let back = move |go: &[f64], store: &mut GradStore| {
            let ga = store.acc(a.0, numel);
            flip(ga, go);
        };
        Ok(self.push(shape, out, Some(Box::new(back))))
    }

    /// Concatenates along one axis. All other extents must match.
    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("concat: no inputs".to_string()));
        }
        let first = self.shape_of(parts[0]);
        if axis >= first.len() {
            return Err(Error::invalid(format!(
                "concat: axis {axis} out of range for {first:?}"
            )));
        }
        let mut axis_total = 0usize;
        for &p in parts {
            let s = self.shape_of(p);
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s,
                });
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let numel: usize = out_shape.iter().product();
        let mut out = vec![0.0f64; numel];
        let mut offsets = Vec::with_capacity(parts.len());
        let mut off = 0usize;
        for &p in parts {
            let s = self.shape_of(p);
            let vp = self.value_of(p);
            let mid = s[axis];
            for o in 0..outer {
                let dst = o * axis_total * inner + off * inner;
                let src = o * mid * inner;
                out[dst..dst + mid * inner].copy_from_slice(&vp[src..src + mid * inner]);
            }
            offsets.push((p, mid, off, vp.len()));
            off += mid;
        }
        let back = move |go: &[f64], store: &mut GradStore| {
            for &(p, mid, off, len) in &offsets {
                let gp = store.acc(p.0, len);
                for o in 0..outer {
                    let src = o * axis_total * inner + off * inner;
                    let dst = o * mid * inner;
                    for i in 0..mid * inner {
                        gp[dst + i] += go[src + i];
                    }
                }
            }
        };
        Ok(self.push(out_shape, out, Some(Box::new(back))))
    }

    /// Takes `len` consecutive entries starting at `start` along `axis`.
    pub fn slice(&self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape_of(a);
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(Error::invalid(format!(
                "slice: [{start}, {start}+{len}) out of range on axis {axis} of {shape:?}"
            )));
        }
        let va = self.value_of(a);
        let outer: usize = shape[..axis].iter().product();
        let mid = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut out = vec![0.0f64; outer * len * inner];
        for o in 0..outer {
            let src = o * mid * inner + start * inner;
            let dst = o * len * inner;
            out[dst..dst + len * inner].copy_from_slice(&va[src..src + len * inner]);
        }
        let numel = va.len();
        let back = move |go: &[f64], store: &mut GradStore| {
            let ga = store.acc(a.0, numel);
            for o in 0..outer {
                let dst = o * mid * inner + start * inner;
                let src = o * len * inner;
                for i in 0..len * inner {
                    ga[dst + i] += go[src + i];
                }
            }
        };
        Ok(self.push(out_shape, out, Some(Box::new(back))))
    }

    /// Materializes `a` stretched to `shape` under trailing-axis rules.
    pub fn broadcast_to(&self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let sa = self.shape_of(a);
        let compat = super::broadcast_shape("broadcast_to", &sa, &shape)?;
        if compat != shape {
            return Err(Error::ShapeMismatch {
                op: "broadcast_to",
                lhs: sa,
                rhs: shape,
            });
        }
        let va = self.value_of(a);
        let st = bcast_strides(&sa, &shape);
        let numel: usize = shape.iter().product();
        let rank = shape.len();
        let mut out = vec![0.0f64; numel];
        let mut idx = vec![0usize; rank];
        let mut src = 0usize;
        for o in 0..numel {
            out[o] = va[src];
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                src += st[ax];
                if idx[ax] < shape[ax] {
                    break;
                }
                src -= st[ax] * shape[ax];
                idx[ax] = 0;
            }
        }
        let n = va.len();
        let shape_b = shape.clone();
        let back = move |go: &[f64], store: &mut GradStore| {
            let ga = store.acc(a.0, n);
            let mut idx = vec![0usize; rank];
            let mut src = 0usize;
            for o in 0..go.len() {
                ga[src] += go[o];
                for ax in (0..rank).rev() {
                    idx[ax] += 1;
                    src += st[ax];
                    if idx[ax] < shape_b[ax] {
                        break;
                    }
                    src -= st[ax] * shape_b[ax];
                    idx[ax] = 0;
                }
            }
        };
        Ok(self.push(shape, out, Some(Box::new(back))))
    }

    /// Constant (non-differentiable) leaf holding a replicated mask or
    /// feature tensor.
    pub fn constant_f64(&self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::invalid(format!(
                "constant: shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        Ok(self.push(shape, data, None))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Array;

    #[test]
    fn reshape_and_permute_are_bit_exact_permutations() {
        let t = Tape::new();
        let data: Vec<f32> = (0..24).map(|v| v as f32 * 0.37).collect();
        let a = t.leaf(&Array::from_vec(vec![2, 3, 4], data.clone()).unwrap());
        let r = t.reshape(a, vec![6, 4]).unwrap();
        assert_eq!(t.to_array(r).data(), &data[..]);

        let p = t.permute(a, &[2, 0, 1]).unwrap();
        assert_eq!(t.shape_of(p), vec![4, 2, 3]);
        let back = t.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(t.to_array(back).data(), &data[..]);
    }

    #[test]
    fn reverse_twice_is_identity() {
        let t = Tape::new();
        let data: Vec<f32> = (0..12).map(|v| v as f32).collect();
        let a = t.leaf(&Array::from_vec(vec![3, 4], data.clone()).unwrap());
        let r = t.reverse(a, 1).unwrap();
        let rr = t.reverse(r, 1).unwrap();
        assert_eq!(t.to_array(rr).data(), &data[..]);
        assert_eq!(t.to_array(r).data()[0], 3.0);
    }

    #[test]
    fn concat_slice_roundtrip_with_grads() {
        let t = Tape::new();
        let a = t.leaf(&Array::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = t.leaf(&Array::from_vec(vec![2, 1], vec![5.0, 6.0]).unwrap());
        let c = t.concat(&[a, b], 1).unwrap();
        assert_eq!(t.to_array(c).data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let sl = t.slice(c, 1, 2, 1).unwrap();
        assert_eq!(t.to_array(sl).data(), &[5.0, 6.0]);
        let s = t.sum_all(sl).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(b).unwrap(), &[1.0, 1.0]);
        assert!(g.get(a).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn broadcast_to_sums_grad() {
        let t = Tape::new();
        let a = t.leaf(&Array::from_vec(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let b = t.broadcast_to(a, vec![3, 2]).unwrap();
        let s = t.sum_all(b).unwrap();
        assert_eq!(t.to_array(s).data(), &[9.0]);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap(), &[3.0, 3.0]);
    }
}
