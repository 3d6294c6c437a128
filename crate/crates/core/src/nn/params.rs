use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::graph::Gradients;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, mut t: Tensor) -> ParamId {
        t.set_requires_grad(true);
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    /// Kaiming-uniform weight (bound `sqrt(6 / fan_in)`) plus zero bias.
    pub fn add_layer(
        &mut self,
        name: &str,
        weight_shape: &[usize],
        rng: &mut Rng,
    ) -> (ParamId, ParamId) {
        let fan_in: usize = weight_shape[1..].iter().product();
        let bound = (6.0 / fan_in as f64).sqrt();
        let n: usize = weight_shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        let w = Tensor::new(weight_shape.to_vec(), data).expect("shape from product");
        let wid = self.add(format!("{name}.weight"), w);
        let bid = self.add(format!("{name}.bias"), Tensor::zeros(&[weight_shape[0]]));
        (wid, bid)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Adds `scale *` each parameter gradient of `grads` into the tensors
    /// that require grad.
    pub fn accumulate(&mut self, grads: &Gradients, scale: f64) -> Result<()> {
        for (id, g) in grads.params() {
            let t = &mut self.tensors[id.0];
            if t.requires_grad() {
                t.accumulate_grad(g, scale)?;
            }
        }
        Ok(())
    }

    /// Replaces tensor values by name (used when loading checkpoints).
    pub fn load_values(&mut self, named: Vec<(String, Tensor)>) -> Result<()> {
        if named.len() != self.tensors.len() {
            return Err(Error::shape(format!(
                "checkpoint has {} tensors, model expects {}",
                named.len(),
                self.tensors.len()
            )));
        }
        for (i, (name, t)) in named.into_iter().enumerate() {
            if name != self.names[i] || t.shape() != self.tensors[i].shape() {
                return Err(Error::shape(format!(
                    "tensor {name} {:?} does not match {} {:?}",
                    t.shape(),
                    self.names[i],
                    self.tensors[i].shape()
                )));
            }
            let rg = self.tensors[i].requires_grad();
            self.tensors[i] = t;
            self.tensors[i].set_requires_grad(rg);
        }
        Ok(())
    }
}
