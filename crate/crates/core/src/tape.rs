//! Reverse-mode autodiff tape.
//!
//! A [`Tape`] records one forward pass as a sequence of primitive
//! applications; [`Tape::backward`] walks the record in reverse creation
//! order (which is reverse topological order, since every primitive only
//! consumes already-recorded nodes) and accumulates gradients by node id.
//! Node values are held in f64; f32 enters and leaves at the [`Array`]
//! boundary.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::array::Array;
use crate::rng::{stream_rng, Stream};
use crate::{Error, Result};
use rand::Rng;

/// Handle to a node on a tape.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

pub(crate) type BackFn = Box<dyn Fn(&[f64], &mut GradStore)>;

pub(crate) struct Node {
    pub(crate) shape: Vec<usize>,
    pub(crate) value: Rc<Vec<f64>>,
    pub(crate) back: Option<BackFn>,
}

/// Per-node gradient accumulators for one backward pass.
pub struct GradStore {
    grads: Vec<Option<Vec<f64>>>,
}

impl GradStore {
    /// Accumulator slice for node `id`, zero-initialized on first use.
    pub fn acc(&mut self, id: usize, numel: usize) -> &mut [f64] {
        self.grads[id].get_or_insert_with(|| vec![0.0; numel])
    }

    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    pub(crate) fn push(&self, shape: Vec<usize>, value: Vec<f64>, back: Option<BackFn>) -> Var {
        self.push_rc(shape, Rc::new(value), back)
    }

    pub(crate) fn push_rc(
        &self,
        shape: Vec<usize>,
        value: Rc<Vec<f64>>,
        back: Option<BackFn>,
    ) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { shape, value, back });
        Var(nodes.len() - 1)
    }

    /// Records an input leaf. Gradients accumulate to leaves like any node.
    pub fn leaf(&self, a: &Array) -> Var {
        self.push(a.shape().to_vec(), a.to_f64(), None)
    }

    /// Records a leaf directly from f64 data (internal feature paths).
    pub fn leaf_f64(&self, shape: Vec<usize>, data: Vec<f64>) -> Var {
        self.push(shape, data, None)
    }

    pub fn shape_of(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].shape.clone()
    }

    pub fn numel_of(&self, v: Var) -> usize {
        self.nodes.borrow()[v.0].value.len()
    }

    pub(crate) fn value_of(&self, v: Var) -> Rc<Vec<f64>> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    /// Copies a node value out as an f32 array.
    pub fn to_array(&self, v: Var) -> Array {
        let nodes = self.nodes.borrow();
        let n = &nodes[v.0];
        Array::from_f64(n.shape.clone(), &n.value).expect("node shape consistent")
    }

    pub fn scalar_value(&self, v: Var) -> Result<f64> {
        let nodes = self.nodes.borrow();
        let n = &nodes[v.0];
        if n.value.len() != 1 {
            return Err(Error::invalid(format!(
                "expected scalar node, got shape {:?}",
                n.shape
            )));
        }
        Ok(n.value[0])
    }

    /// Reverse pass from a scalar root. Every node reachable from the root
    /// receives its gradient; unreached nodes report zeros via
    /// [`GradStore::get`] returning `None`.
    pub fn backward(&self, root: Var) -> Result<GradStore> {
        let nodes = self.nodes.borrow();
        if nodes[root.0].value.len() != 1 {
            return Err(Error::invalid(format!(
                "backward root must be scalar, got shape {:?}",
                nodes[root.0].shape
            )));
        }
        let mut store = GradStore {
            grads: (0..nodes.len()).map(|_| None).collect(),
        };
        store.grads[root.0] = Some(vec![1.0]);
        for id in (0..=root.0).rev() {
            let Some(grad) = store.grads[id].take() else {
                continue;
            };
            if let Some(back) = &nodes[id].back {
                back(&grad, &mut store);
            }
            store.grads[id] = Some(grad);
        }
        Ok(store)
    }
}

/// A named learnable tensor with a persistent gradient slot.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Array,
    pub grad: Array,
}

/// Handle into a [`Params`] registry.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// Registry of model parameters, ordered by registration.
#[derive(Default)]
pub struct Params {
    items: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl Params {
    pub fn new() -> Self {
        Params::default()
    }

    pub fn register(&mut self, name: &str, value: Array) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::invalid(format!("duplicate parameter name {name}")));
        }
        let grad = Array::zeros(value.shape().to_vec());
        self.index.insert(name.to_string(), self.items.len());
        self.items.push(Parameter {
            name: name.to_string(),
            value,
            grad,
        });
        Ok(ParamId(self.items.len() - 1))
    }

    /// Registers with values drawn uniformly from ±1/sqrt(fan_in).
    pub fn register_init(
        &mut self,
        name: &str,
        shape: Vec<usize>,
        fan_in: usize,
        seed: u64,
    ) -> Result<ParamId> {
        let mut rng = stream_rng(seed, Stream::Init, hash_name(name));
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let numel: usize = shape.iter().product();
        let data: Vec<f32> = (0..numel)
            .map(|_| rng.random_range(-bound..bound) as f32)
            .collect();
        self.register(name, Array::from_vec(shape, data)?)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.items[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.items[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.index.get(name).map(|&i| &self.items[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.items.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.items.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.items.len()).map(ParamId)
    }

    pub fn total_count(&self) -> usize {
        self.items.iter().map(|p| p.value.numel()).sum()
    }

    /// Binds every parameter as a leaf on `tape`, in registration order.
    pub fn bind(&self, tape: &Tape) -> Binding {
        Binding {
            vars: self.items.iter().map(|p| tape.leaf(&p.value)).collect(),
        }
    }

    /// Copies gradients from a backward pass into the parameter slots.
    /// Parameters the root does not reach get zero gradient.
    pub fn absorb_grads(&mut self, binding: &Binding, store: &GradStore) {
        for (param, var) in self.items.iter_mut().zip(&binding.vars) {
            let out = param.grad.data_mut();
            match store.get(*var) {
                Some(g) => {
                    for (o, &v) in out.iter_mut().zip(g) {
                        *o = v as f32;
                    }
                }
                None => out.fill(0.0),
            }
        }
    }
}

fn hash_name(name: &str) -> u64 {
    // FNV-1a; stable across platforms and runs.
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Parameter leaves for one tape.
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

/// Maximum relative error between analytic gradients and central finite
/// differences, over up to `coords_per_tensor` sampled coordinates of each
/// parameter. The sampled subset is deterministic in `seed`.
///
/// The function is re-evaluated at f32-perturbed parameter values; the
/// divisor uses the actually-realized f64 difference of the stored values,
/// so f32 quantization of the step cancels out.
pub fn grad_check<F>(
    params: &mut Params,
    step: f64,
    seed: u64,
    coords_per_tensor: usize,
    f: F,
) -> Result<f64>
where
    F: Fn(&Tape, &Binding) -> Result<Var>,
{
    let eval = |params: &Params| -> Result<f64> {
        let tape = Tape::new();
        let binding = params.bind(&tape);
        let root = f(&tape, &binding)?;
        tape.scalar_value(root)
    };

    // Analytic pass.
    let tape = Tape::new();
    let binding = params.bind(&tape);
    let root = f(&tape, &binding)?;
    let f0 = tape.scalar_value(root)?;
    if !f0.is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    let store = tape.backward(root)?;
    let analytic: Vec<Vec<f64>> = binding
        .vars
        .iter()
        .zip(params.iter())
        .map(|(v, p)| {
            store
                .get(*v)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; p.value.numel()])
        })
        .collect();

    let mut max_rel = 0.0f64;
    for pi in 0..params.len() {
        let numel = params.get(ParamId(pi)).value.numel();
        let mut rng = stream_rng(seed, Stream::GradCheck, pi as u64);
        let mut coords: Vec<usize> = if numel <= coords_per_tensor {
            (0..numel).collect()
        } else {
            (0..coords_per_tensor)
                .map(|_| rng.random_range(0..numel))
                .collect()
        };
        coords.sort_unstable();
        coords.dedup();
        for ci in coords {
            let orig = params.get(ParamId(pi)).value.data()[ci];
            let plus = orig + step as f32;
            let minus = orig - step as f32;

            params.get_mut(ParamId(pi)).value.data_mut()[ci] = plus;
            let fp = eval(params)?;
            params.get_mut(ParamId(pi)).value.data_mut()[ci] = minus;
            let fm = eval(params)?;
            params.get_mut(ParamId(pi)).value.data_mut()[ci] = orig;

            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::NonFinite("grad_check perturbed objective".into()));
            }
            let denom = plus as f64 - minus as f64;
            let numeric = (fp - fm) / denom;
            let a = analytic[pi][ci];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_rule_at_leaves() {
        let t = Tape::new();
        let x = t.leaf(&Array::scalar(2.0));
        let y = t.leaf(&Array::scalar(3.0));
        let z = t.mul(x, y).unwrap();
        let g = t.backward(z).unwrap();
        assert_eq!(g.get(x).unwrap(), &[3.0]);
        assert_eq!(g.get(y).unwrap(), &[2.0]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let t = Tape::new();
        let x = t.leaf(&Array::zeros(vec![2, 2]));
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn unreachable_parameter_zero_grad() {
        let mut params = Params::new();
        let a = params.register("a", Array::scalar(1.5)).unwrap();
        let b = params.register("b", Array::scalar(-0.5)).unwrap();
        let t = Tape::new();
        let binding = params.bind(&t);
        let root = t.mul(binding.var(a), binding.var(a)).unwrap();
        let store = t.backward(root).unwrap();
        params.absorb_grads(&binding, &store);
        assert_eq!(params.get(a).grad.data(), &[3.0]);
        assert_eq!(params.get(b).grad.data(), &[0.0]);
    }

    #[test]
    fn backward_deterministic() {
        let t = Tape::new();
        let x = t.leaf(&Array::from_vec(vec![3], vec![0.3, -1.2, 2.0]).unwrap());
        let y = t.sigmoid(x).unwrap();
        let s = t.sum_all(y).unwrap();
        let g1 = t.backward(s).unwrap().get(x).unwrap().to_vec();
        let g2 = t.backward(s).unwrap().get(x).unwrap().to_vec();
        assert_eq!(g1, g2);
    }

    #[test]
    fn quadratic_grad_check_tight() {
        let mut params = Params::new();
        let w = params
            .register(
                "w",
                Array::from_vec(vec![4], vec![0.5, -1.0, 2.0, 0.1]).unwrap(),
            )
            .unwrap();
        let err = grad_check(&mut params, 1e-3, 7, 16, |t, b| {
            let v = b.var(w);
            let sq = t.mul(v, v)?;
            t.sum_all(sq)
        })
        .unwrap();
        assert!(err <= 1e-6, "quadratic check err = {err}");
    }

    #[test]
    fn constant_objective_zero_both_ways() {
        let mut params = Params::new();
        let w = params.register("w", Array::scalar(0.7)).unwrap();
        let err = grad_check(&mut params, 1e-3, 7, 4, |t, b| {
            let v = b.var(w);
            let zero = t.mul_scalar(v, 0.0)?;
            t.sum_all(zero)
        })
        .unwrap();
        assert!(err <= 1e-12, "constant check err = {err}");
    }

    #[test]
    fn duplicate_parameter_names_rejected() {
        let mut params = Params::new();
        params.register("w", Array::scalar(0.0)).unwrap();
        assert!(params.register("w", Array::scalar(1.0)).is_err());
    }
}
