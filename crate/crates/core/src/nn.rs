//! Parameter storage and the small layer helpers shared by every network
//! module.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Activation, Graph, Real, Tensor, Var};

/// Shape of one learnable tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Weight and bias specs for a chain of fully connected layers
/// `widths[0] -> widths[1] -> ...`, named `{prefix}.{j}.w` / `{prefix}.{j}.b`.
pub fn mlp_specs(prefix: &str, widths: &[usize]) -> Vec<ParamSpec> {
    widths
        .windows(2)
        .enumerate()
        .flat_map(|(j, w)| linear_specs(&format!("{prefix}.{j}"), w[0], w[1]))
        .collect()
}

pub fn linear_specs(prefix: &str, cin: usize, cout: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec {
            name: format!("{prefix}.w"),
            shape: vec![cin, cout],
        },
        ParamSpec {
            name: format!("{prefix}.b"),
            shape: vec![cout],
        },
    ]
}

/// Named learnable tensors, iterated in name order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn from_map(tensors: BTreeMap<String, Tensor<T>>) -> Self {
        Self { tensors }
    }

    /// He-uniform weights, zero biases. Deterministic in `seed`.
    pub fn init(specs: &[ParamSpec], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sorted: Vec<&ParamSpec> = specs.iter().collect();
        sorted.sort_by(|a, b| a.name.cmp(&b.name));
        let mut tensors = BTreeMap::new();
        for spec in sorted {
            let n: usize = spec.shape.iter().product();
            let data = if spec.shape.len() == 2 {
                let bound = (6.0 / spec.shape[0] as f64).sqrt();
                (0..n).map(|_| T::of(rng.random_range(-bound..bound))).collect()
            } else {
                vec![T::zero(); n]
            };
            if tensors
                .insert(spec.name.clone(), Tensor::new(spec.shape.clone(), data)?)
                .is_some()
            {
                return Err(Error::Config(format!("duplicate parameter {}", spec.name)));
            }
        }
        Ok(Self { tensors })
    }

    pub fn zeros(specs: &[ParamSpec]) -> Self {
        Self {
            tensors: specs
                .iter()
                .map(|s| (s.name.clone(), Tensor::zeros(&s.shape)))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Checks that names and shapes match `specs` exactly.
    pub fn check_specs(&self, specs: &[ParamSpec]) -> Result<()> {
        if specs.len() != self.tensors.len() {
            return Err(Error::Config(format!(
                "model expects {} parameter tensors, store holds {}",
                specs.len(),
                self.tensors.len()
            )));
        }
        for s in specs {
            match self.tensors.get(&s.name) {
                Some(t) if t.shape() == s.shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Config(format!(
                        "parameter {} has shape {:?}, expected {:?}",
                        s.name,
                        t.shape(),
                        s.shape
                    )))
                }
                None => return Err(Error::Config(format!("missing parameter {}", s.name))),
            }
        }
        Ok(())
    }

    /// Registers every tensor as a trainable leaf of `g`.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), g.param(v.clone())))
                .collect(),
        }
    }
}

/// Parameters bound into one graph.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Wraps variables that already live in a graph, e.g. the probe
    /// inputs of a gradient check.
    pub fn from_vars(vars: BTreeMap<String, Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Collects gradients after `backward`, zeros for unreached parameters.
    pub fn grads<T: Real>(&self, g: &Graph<T>) -> ParamStore<T> {
        ParamStore {
            tensors: self
                .vars
                .iter()
                .map(|(k, &v)| {
                    let grad = g.grad(v).unwrap_or_else(|| Tensor::zeros(g.shape(v)));
                    (k.clone(), grad)
                })
                .collect(),
        }
    }
}

pub fn linear<T: Real>(g: &mut Graph<T>, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let w = p.var(&format!("{prefix}.w"))?;
    let b = p.var(&format!("{prefix}.b"))?;
    g.linear(x, w, b)
}

/// Chain of `layers` linear maps named `{prefix}.0 ..`, each followed by
/// `act` except possibly the last.
pub fn mlp<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    prefix: &str,
    x: Var,
    layers: usize,
    act: Activation,
    activate_last: bool,
) -> Result<Var> {
    let mut h = x;
    for j in 0..layers {
        h = linear(g, p, &format!("{prefix}.{j}"), h)?;
        if j + 1 < layers || activate_last {
            h = g.activation(h, act)?;
        }
    }
    Ok(h)
}
