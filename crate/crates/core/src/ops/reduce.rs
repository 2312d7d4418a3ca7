//! Reductions over chosen axes.

use crate::tape::{GradStore, Var};
use crate::{Error, Result, Tape};

impl Tape {
    pub fn sum_all(&self, a: Var) -> Result<Var> {
        let va = self.value_of(a);
        let n = va.len();
        let s: f64 = va.iter().sum();
        let back = move |go: &[f64], store: &mut GradStore| {
            let ga = store.acc(a.0, n);
            for g in ga.iter_mut() {
                *g += go[0];
            }
        };
        Ok(self.push(vec![1], vec![s], Some(Box::new(back))))
    }

    pub fn mean_all(&self, a: Var) -> Result<Var> {
        let n = self.numel_of(a);
        let s = self.sum_all(a)?;
        self.mul_scalar(s, 1.0 / n as f64)
    }

    /// Sum over one axis; the axis is dropped from the shape (unless it is
    /// the only one, in which case a scalar `[1]` remains).
    pub fn sum_axis(&self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape_of(a);
        if axis >= shape.len() {
            return Err(Error::invalid(format!(
                "sum_axis: axis {axis} out of range for shape {shape:?}"
            )));
        }
        let va = self.value_of(a);
        let mut out_shape: Vec<usize> = shape
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != axis)
            .map(|(_, &d)| d)
            .collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let outer: usize = shape[..axis].iter().product();
        let mid = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![0.0f64; outer * inner];
        for o in 0..outer {
            for m in 0..mid {
                let row = &va[o * mid * inner + m * inner..o * mid * inner + (m + 1) * inner];
                let orow = &mut out[o * inner..(o + 1) * inner];
                for (dst, &v) in orow.iter_mut().zip(row) {
                    *dst += v;
                }
            }
        }
        let n = va.len();
        let back = move |go: &[f64], store: &mut GradStore| {
            let ga = store.acc(a.0, n);
            for o in 0..outer {
                for m in 0..mid {
                    let grow = &go[o * inner..(o + 1) * inner];
                    let arow =
                        &mut ga[o * mid * inner + m * inner..o * mid * inner + (m + 1) * inner];
                    for (dst, &g) in arow.iter_mut().zip(grow) {
                        *dst += g;
                    }
                }
            }
        };
        Ok(self.push(out_shape, out, Some(Box::new(back))))
    }

    pub fn mean_axis(&self, a: Var, axis: usize) -> Result<Var> {
        let d = self.shape_of(a)[axis];
        let s = self.sum_axis(a, axis)?;
        self.mul_scalar(s, 1.0 / d as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Array;

    #[test]
    fn sum_axis_middle() {
        let t = Tape::new();
        let a = t.leaf(&Array::from_vec(vec![2, 3, 2], (0..12).map(|v| v as f32).collect()).unwrap());
        let s = t.sum_axis(a, 1).unwrap();
        assert_eq!(t.shape_of(s), vec![2, 2]);
        // rows of axis-1 blocks: [0,1]+[2,3]+[4,5] = [6,9]; [6,7]+[8,9]+[10,11] = [24,27]
        assert_eq!(t.to_array(s).data(), &[6.0, 9.0, 24.0, 27.0]);
        let total = t.sum_all(s).unwrap();
        let g = t.backward(total).unwrap();
        assert!(g.get(a).unwrap().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn mean_axis_scales() {
        let t = Tape::new();
        let a = t.leaf(&Array::from_vec(vec![4], vec![1.0, 2.0, 3.0, 6.0]).unwrap());
        let m = t.mean_axis(a, 0).unwrap();
        assert_eq!(t.to_array(m).data(), &[3.0]);
    }
}
