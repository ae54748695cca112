//! Named parameter tensors and their binding into a graph.

use std::collections::BTreeMap;

use rand::Rng as _;
use rand_distr::StandardNormal;
use segalign_tensor::{Graph, Real, Tensor, Var};
use sha2::{Digest, Sha256};

use crate::rng::Rng;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub frozen: bool,
}

/// Ordered collection of named parameters. The insertion order is the
/// serialization order of checkpoints.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    entries: Vec<Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        let name = name.into();
        assert!(self.position(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(Param {
            name,
            value,
            frozen: false,
        });
    }

    pub fn extend(&mut self, other: ParamStore<T>) {
        for p in other.entries {
            assert!(self.position(&p.name).is_none(), "duplicate parameter {}", p.name);
            self.entries.push(p);
        }
    }

    pub fn set_frozen(&mut self, prefix: &str, frozen: bool) {
        self.entries
            .iter_mut()
            .filter(|p| p.name.starts_with(prefix))
            .for_each(|p| p.frozen = frozen);
    }

    fn position(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|p| p.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.position(name).map(|i| &self.entries[i].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.position(name).map(move |i| &mut self.entries[i].value)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|p| p.value.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    frozen: p.frozen,
                })
                .collect(),
        }
    }

    pub fn flatten(&self) -> Vec<T> {
        self.entries
            .iter()
            .flat_map(|p| p.value.data().iter().copied())
            .collect()
    }

    pub fn load_flat(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.num_values() {
            return Err(Error::Invalid(format!(
                "parameter blob has {} values, layout needs {}",
                flat.len(),
                self.num_values()
            )));
        }
        let mut off = 0;
        for p in &mut self.entries {
            let n = p.value.len();
            p.value.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Registers every parameter as a graph input: trainable ones as
    /// leaves, frozen ones as constants.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|p| {
                let v = if p.frozen {
                    g.constant(p.value.clone())
                } else {
                    g.leaf(p.value.clone())
                };
                (p.name.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    /// Binds parameters as slices of one flat vector `flat`, for gradient
    /// checks that perturb every parameter through a single input.
    pub fn bind_flat(&self, g: &mut Graph<T>, flat: Var) -> Result<Bound> {
        let mut vars = BTreeMap::new();
        let mut off = 0;
        for p in &self.entries {
            let n = p.value.len();
            let s = g.slice(flat, 0, off, n)?;
            let v = g.reshape(s, p.value.shape().to_vec())?;
            vars.insert(p.name.clone(), v);
            off += n;
        }
        Ok(Bound { vars })
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.entries {
            h.update(p.name.as_bytes());
            for v in p.value.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Graph handles of a bound [`ParamStore`].
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(v) => *v,
            None => panic!("parameter `{name}` is not bound"),
        }
    }

    pub fn try_var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Gaussian weights scaled by `gain / sqrt(fan_in)`.
pub fn gaussian<T: Real>(rng: &mut Rng, fan_in: usize, fan_out: usize, gain: f64) -> Tensor<T> {
    let scale = gain / (fan_in as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| T::lit(rng.sample::<f64, _>(StandardNormal) * scale))
        .collect();
    Tensor::matrix(fan_in, fan_out, data).expect("positive dims")
}

pub fn zeros<T: Real>(n: usize) -> Tensor<T> {
    Tensor::zeros(vec![n])
}

/// Adds a dense layer `name.w` / `name.b` to the store.
pub fn add_linear<T: Real>(store: &mut ParamStore<T>, rng: &mut Rng, name: &str, fan_in: usize, fan_out: usize, gain: f64) {
    store.insert(format!("{name}.w"), gaussian(rng, fan_in, fan_out, gain));
    store.insert(format!("{name}.b"), zeros(fan_out));
}

/// `x @ name.w + name.b`.
pub fn linear<T: Real>(g: &mut Graph<T>, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let h = g.matmul(x, p.var(&format!("{name}.w")))?;
    Ok(g.add_row(h, p.var(&format!("{name}.b")))?)
}
