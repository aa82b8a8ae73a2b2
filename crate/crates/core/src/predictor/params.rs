use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// How a parameter is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform on `(-a, a)` with `a = 1 / sqrt(fan_in)`.
    FanIn(usize),
    Zeros,
    Ones,
    Normal(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Named parameter tensors in declaration order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    /// Initializes every spec in order from one seeded stream.
    pub fn init(specs: &[ParamSpec], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut entries = Vec::with_capacity(specs.len());
        for s in specs {
            let n = s.numel();
            let data: Vec<f64> = match s.init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::FanIn(fan_in) => {
                    let a = 1.0 / (fan_in.max(1) as f64).sqrt();
                    (0..n).map(|_| rng.random_range(-a..a)).collect()
                }
                Init::Normal(std) => {
                    let d = Normal::new(0.0, std).map_err(|e| Error::Parameter(e.to_string()))?;
                    (0..n).map(|_| d.sample(&mut rng)).collect()
                }
            };
            entries.push((s.name.clone(), Tensor::new(s.shape.clone(), data)?));
        }
        Self::from_entries(entries)
    }

    pub fn from_entries(entries: Vec<(String, Tensor)>) -> Result<Self> {
        let mut store = ParamStore {
            names: Vec::with_capacity(entries.len()),
            tensors: Vec::with_capacity(entries.len()),
            index: HashMap::new(),
        };
        for (name, t) in entries {
            if store.index.insert(name.clone(), store.names.len()).is_some() {
                return Err(Error::Parameter(format!("duplicate parameter {name}")));
            }
            store.names.push(name);
            store.tensors.push(t);
        }
        Ok(store)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Puts every tensor on the tape, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound<'_> {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.leaf(t.clone())
                }
            })
            .collect();
        Bound {
            vars,
            index: &self.index,
        }
    }
}

/// Tape handles for a [`ParamStore`], looked up by name.
pub struct Bound<'a> {
    vars: Vec<Var>,
    index: &'a HashMap<String, usize>,
}

impl Bound<'_> {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::Parameter(format!("no parameter named {name}")))
    }

    pub fn opt(&self, name: &str) -> Option<Var> {
        self.index.get(name).map(|&i| self.vars[i])
    }

    /// Vars in store order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}
