//! Named parameter collections and their binding into a computation graph.

use std::collections::HashMap;

use indexmap::IndexMap;
use rand::Rng;

use crate::autodiff::{Gradients, Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Suffixes of non-learned state (batch-norm running statistics).
const BUFFER_SUFFIXES: [&str; 2] = [".running_mean", ".running_var"];

pub fn is_buffer(name: &str) -> bool {
    BUFFER_SUFFIXES.iter().any(|s| name.ends_with(s))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub trainable: bool,
}

/// Ordered `name → tensor` map with per-entry trainability.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    entries: IndexMap<String, Param>,
}

/// Gradients keyed by parameter name, in parameter order.
pub type GradMap = IndexMap<String, Vec<f64>>;

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter {name}")));
        }
        let trainable = !is_buffer(&name);
        self.entries.insert(name, Param { value, trainable });
        Ok(())
    }

    /// Xavier-uniform matrix or kernel. Fan-in/out follow the last two
    /// extents for matrices and `C_in·K` / `C_out·K` for `[C_out, C_in, K]` kernels.
    pub fn insert_xavier<R: Rng>(&mut self, name: &str, shape: &[usize], rng: &mut R) -> Result<()> {
        let (fan_in, fan_out) = match shape {
            [a, b] => (*a, *b),
            [o, i, k] => (i * k, o * k),
            [n] => (*n, *n),
            _ => return Err(Error::invalid(format!("no Xavier rule for shape {shape:?}"))),
        };
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.insert(name, Tensor::uniform(shape, bound, rng))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter {name}")))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.get(name)?.value)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    /// Replaces a tensor, keeping its position and flag.
    pub fn replace(&mut self, name: &str, value: Tensor) -> Result<()> {
        self.get_mut(name)?.value = value;
        Ok(())
    }

    pub fn remove(&mut self, name: &str) -> Option<Param> {
        self.entries.shift_remove(name)
    }

    pub fn push(&mut self, name: String, param: Param) {
        self.entries.insert(name, param);
    }

    pub fn numel(&self) -> usize {
        self.entries.values().map(|p| p.value.numel()).sum()
    }

    /// Leaves for every tensor: trainable entries receive gradients.
    pub fn bind<'g>(&self, g: &'g Graph) -> Bound<'g> {
        let vars = self
            .entries
            .iter()
            .map(|(name, p)| {
                let v = if p.trainable {
                    g.param(p.value.clone())
                } else {
                    g.constant(p.value.clone())
                };
                (name.clone(), (v, p.trainable))
            })
            .collect();
        Bound::new(self, vars)
    }

    /// Names of trainable tensors, in order.
    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(n, _)| n.clone())
            .collect()
    }

    /// Concatenation of the named tensors' values.
    pub fn flatten(&self, names: &[String]) -> Result<Tensor> {
        let mut data = Vec::new();
        for n in names {
            data.extend_from_slice(self.tensor(n)?.data());
        }
        Ok(Tensor::vector(data))
    }

    /// Binds the named tensors as slices of one flat vector `x` (see
    /// [`ParamSet::flatten`]); every other tensor becomes a constant.
    pub fn bind_flat<'g>(&self, g: &'g Graph, x: Var<'g>, names: &[String]) -> Result<Bound<'g>> {
        let mut flat = HashMap::new();
        let mut offset = 0;
        for n in names {
            let shape = self.tensor(n)?.shape().to_vec();
            let len: usize = shape.iter().product();
            flat.insert(n.as_str(), x.slice(0, offset, len)?.reshape(&shape)?);
            offset += len;
        }
        if offset != x.value().numel() {
            return Err(Error::ShapeMismatch {
                op: "bind_flat",
                lhs: vec![offset],
                rhs: x.shape(),
            });
        }
        let vars = self
            .entries
            .iter()
            .map(|(name, p)| {
                let entry = match flat.get(name.as_str()) {
                    Some(v) => (*v, true),
                    None => (g.constant(p.value.clone()), false),
                };
                (name.clone(), entry)
            })
            .collect();
        Ok(Bound::new(self, vars))
    }
}

/// A [`ParamSet`] bound into one graph.
pub struct Bound<'g> {
    vars: IndexMap<String, (Var<'g>, bool)>,
    buffers: HashMap<String, Vec<f64>>,
}

impl<'g> Bound<'g> {
    fn new(set: &ParamSet, vars: IndexMap<String, (Var<'g>, bool)>) -> Self {
        let buffers = set
            .entries
            .iter()
            .filter(|(n, _)| is_buffer(n))
            .map(|(n, p)| (n.clone(), p.value.data().to_vec()))
            .collect();
        Self { vars, buffers }
    }

    pub fn var(&self, name: &str) -> Result<Var<'g>> {
        self.vars
            .get(name)
            .map(|(v, _)| *v)
            .ok_or_else(|| Error::invalid(format!("missing parameter {name}")))
    }

    /// Whether the tensor is a gradient-receiving leaf in this binding.
    pub fn is_trainable(&self, name: &str) -> bool {
        self.vars.get(name).is_some_and(|(_, t)| *t)
    }

    /// Raw values of a buffer (batch-norm running statistics).
    pub fn values(&self, name: &str) -> Result<&[f64]> {
        self.buffers
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::invalid(format!("missing buffer {name}")))
    }

    /// Gradients of every trainable tensor; tensors nothing flowed into get zeros.
    pub fn gradients(&self, grads: &Gradients) -> GradMap {
        self.vars
            .iter()
            .filter(|(_, (_, t))| *t)
            .map(|(name, (v, _))| {
                let g = grads
                    .data(v)
                    .map_or_else(|| vec![0.0; v.value().numel()], <[f64]>::to_vec);
                (name.clone(), g)
            })
            .collect()
    }

    /// Trainable tensors that received a nonzero gradient.
    pub fn touched(&self, grads: &Gradients) -> Vec<String> {
        self.vars
            .iter()
            .filter(|(_, (v, t))| *t && grads.data(v).is_some_and(|g| g.iter().any(|x| *x != 0.0)))
            .map(|(n, _)| n.clone())
            .collect()
    }
}

/// Smallest gradient magnitude whose relative error finite differences of an
/// O(1) loss can resolve in double precision.
pub const RESOLVABLE_GRADIENT: f64 = 1e-6;

/// Gradient check of a scalar function of all trainable tensors in `set`.
/// For each tensor the `per_tensor` components with the largest analytic
/// gradient plus `per_tensor` random components with `|g| >= RESOLVABLE_GRADIENT`
/// are compared against finite differences; returns the worst relative error
/// and its tensor.
pub fn check_param_gradients<F, R>(
    set: &ParamSet,
    f: F,
    eps: f64,
    per_tensor: usize,
    rng: &mut R,
) -> Result<(f64, String)>
where
    F: for<'g> Fn(&'g Graph, &Bound<'g>) -> Result<Var<'g>>,
    R: Rng,
{
    let names = set.trainable_names();
    let x = set.flatten(&names)?;
    let objective = crate::autodiff::objective(|g, x| {
        let b = set.bind_flat(g, x, &names)?;
        f(g, &b)
    });
    let analytic = crate::autodiff::analytic_gradient(&objective, &x)?;
    let mut worst = (0.0, String::new());
    let mut offset = 0;
    for n in &names {
        let len = set.tensor(n)?.numel();
        let mut order: Vec<usize> = (0..len).collect();
        order.sort_by(|a, b| analytic[offset + b].abs().total_cmp(&analytic[offset + a].abs()));
        let mut picks: Vec<usize> = order.iter().take(per_tensor).map(|i| offset + i).collect();
        let resolvable: Vec<usize> = (0..len).filter(|i| analytic[offset + i].abs() >= RESOLVABLE_GRADIENT).collect();
        if !resolvable.is_empty() {
            picks.extend((0..per_tensor).map(|_| offset + resolvable[rng.gen_range(0..resolvable.len())]));
        }
        let mut err: f64 = 0.0;
        for i in picks {
            let numeric = crate::autodiff::numeric_derivative(&objective, &x, i, eps)?;
            err = err.max(crate::autodiff::relative_error(analytic[i], numeric));
        }
        if err > worst.0 || worst.1.is_empty() {
            worst = (err, n.clone());
        }
        offset += len;
    }
    Ok(worst)
}
#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn buffers_are_never_trainable() {
        let mut p = ParamSet::new();
        p.insert("enc.bn.gamma", Tensor::vector(vec![1.0])).unwrap();
        p.insert("enc.bn.running_mean", Tensor::vector(vec![0.0])).unwrap();
        assert!(p.get("enc.bn.gamma").unwrap().trainable);
        assert!(!p.get("enc.bn.running_mean").unwrap().trainable);
        assert!(p.insert("enc.bn.gamma", Tensor::scalar(0.0)).is_err());
    }

    #[test]
    fn xavier_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = ParamSet::new();
        p.insert_xavier("w", &[30, 70], &mut rng).unwrap();
        let bound = (6.0f64 / 100.0).sqrt();
        let t = p.tensor("w").unwrap();
        assert!(t.data().iter().all(|v| v.abs() <= bound));
        assert!(t.data().iter().any(|v| v.abs() > 0.8 * bound));
    }

    #[test]
    fn flat_binding_matches_direct_binding() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = ParamSet::new();
        p.insert_xavier("a", &[2, 3], &mut rng).unwrap();
        p.insert_xavier("b", &[3, 1], &mut rng).unwrap();
        p.insert("c.running_var", Tensor::vector(vec![1.0, 1.0])).unwrap();
        let names = p.trainable_names();
        assert_eq!(names, vec!["a".to_string(), "b".to_string()]);

        fn loss<'g>(b: &Bound<'g>) -> Var<'g> {
            b.var("a").unwrap().matmul(&b.var("b").unwrap()).unwrap().sum()
        }
        let g1 = Graph::new();
        let direct = p.bind(&g1);
        let l1 = loss(&direct);
        let grads1 = direct.gradients(&g1.backward(l1).unwrap());

        let g2 = Graph::new();
        let x = g2.param(p.flatten(&names).unwrap());
        let flat = p.bind_flat(&g2, x, &names).unwrap();
        let l2 = loss(&flat);
        let gx = g2.backward(l2).unwrap();
        assert_eq!(l1.item(), l2.item());
        let joined: Vec<f64> = grads1.values().flatten().copied().collect();
        assert_eq!(gx.data(&x).unwrap(), &joined[..]);
    }
}
