use crate::error::{Error, Result};
use crate::numerics::Array2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named parameter carrying its current value and accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct DualParam {
    pub name: String,
    pub value: Array2,
    pub grad: Array2,
    pub learnable: bool,
}

/// Owns every parameter of a model. Each parameter is registered once.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<DualParam>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2, learnable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::Contract(format!("parameter {name} registered twice")));
        }
        let (r, c) = value.shape();
        self.params.push(DualParam {
            name,
            value,
            grad: Array2::zeros(r, c),
            learnable,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &DualParam {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut DualParam {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Array2 {
        &self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Array2 {
        &self.params[id.0].grad
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &DualParam)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    pub fn num_learnable_entries(&self) -> usize {
        self.params.iter().filter(|p| p.learnable).map(|p| p.value.len()).sum()
    }
}
