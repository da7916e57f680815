use std::collections::BTreeMap;

use rand::Rng;
use rasm_tensor::{Element, Tape, Tensor, Var};

use super::arch::{Architecture, Init};
use super::config::ModelConfig;
use crate::error::{Error, Result};

/// Standard deviation of the truncated-normal weight initializer.
pub const INIT_STD: f64 = 0.02;

/// Named parameters, ordered by path.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSet<T = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Element> Default for ParameterSet<T> {
    fn default() -> Self {
        Self { tensors: BTreeMap::new() }
    }
}

impl<T: Element> ParameterSet<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Freshly initialized parameters for `config`.
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        let arch = Architecture::new(config, config.size_factor(), config.size_factor())?;
        let mut set = Self::new();
        for spec in arch.params {
            let t = match spec.init {
                Init::TruncNormal => Tensor::trunc_normal(&spec.shape, INIT_STD, rng),
                Init::Zeros => Tensor::zeros(&spec.shape),
                Init::Ones => Tensor::ones(&spec.shape),
            };
            set.insert(spec.path, t)?;
        }
        Ok(set)
    }

    /// Adds a parameter; paths must be unique.
    pub fn insert(&mut self, path: impl Into<String>, t: Tensor<T>) -> Result<()> {
        let path = path.into();
        if self.tensors.contains_key(&path) {
            return Err(Error::Config(format!("duplicate parameter path {path}")));
        }
        self.tensors.insert(path, t);
        Ok(())
    }

    pub fn get(&self, path: &str) -> Result<&Tensor<T>> {
        self.tensors.get(path).ok_or_else(|| Error::Config(format!("missing parameter {path}")))
    }

    pub fn get_mut(&mut self, path: &str) -> Result<&mut Tensor<T>> {
        self.tensors.get_mut(path).ok_or_else(|| Error::Config(format!("missing parameter {path}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn paths(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Element>(&self) -> ParameterSet<U> {
        ParameterSet { tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// Checks that the set has exactly the paths and shapes `config` needs.
    pub fn check_against(&self, config: &ModelConfig) -> Result<()> {
        let arch = Architecture::new(config, config.size_factor(), config.size_factor())?;
        if arch.params.len() != self.len() {
            return Err(Error::Config(format!(
                "parameter set has {} tensors, the configuration needs {}",
                self.len(),
                arch.params.len()
            )));
        }
        for spec in arch.params {
            let t = self.get(&spec.path)?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::Config(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    spec.path,
                    t.shape(),
                    spec.shape
                )));
            }
        }
        Ok(())
    }

    /// Records every parameter on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|(k, v)| (k.clone(), tape.leaf(v.clone(), requires_grad))).collect(),
        }
    }
}

/// Tape handles of a bound [`ParameterSet`].
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn from_vars(vars: BTreeMap<String, Var>) -> Self {
        Self { vars }
    }

    pub fn get(&self, path: &str) -> Result<Var> {
        self.vars.get(path).copied().ok_or_else(|| Error::Config(format!("missing parameter {path}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}
