//! Trainable layers, the optimizer, and checkpoint persistence.

mod adam;
mod batchnorm;
pub mod checkpoint;
mod linear;
pub mod spectral;

pub use adam::{Adam, AdamConfig};
pub use batchnorm::{BnMode, CbnVars, ConditionalBatchNorm};
pub use checkpoint::Checkpoint;
pub use linear::{Init, LinearLayer, LinearVars};
pub(crate) use linear::{bind_param as linear_bind_param, random_unit as linear_random_unit};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::tensor::Tensor;

/// Zero-mean Gaussian tensor with the given variance.
pub fn gaussian(shape: impl Into<Vec<usize>>, variance: f32, rng: &mut impl Rng) -> Tensor {
    let shape = shape.into();
    let n: usize = shape.iter().product();
    let sd = variance.sqrt();
    Tensor::new(shape, (0..n).map(|_| sd * rng.sample::<f32, _>(StandardNormal)).collect())
}

/// Visits trainable tensors and state buffers under stable names.
///
/// Trainable parameters are what the optimizer updates. Buffers (spectral
/// power-iteration vectors, batch-norm running statistics) are updated by
/// forward passes and persisted in checkpoints, but never see gradients.
pub trait Module {
    fn params(&self) -> Vec<&Tensor>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;
    fn named_tensors(&self, prefix: &str, out: &mut Vec<(String, Tensor)>);
    fn load_tensors(&mut self, prefix: &str, lookup: &dyn Fn(&str) -> Option<Tensor>) -> Result<(), String>;
}

pub fn take(lookup: &dyn Fn(&str) -> Option<Tensor>, name: &str, like: &Tensor) -> Result<Tensor, String> {
    let t = lookup(name).ok_or_else(|| format!("missing tensor `{name}`"))?;
    if t.shape() != like.shape() {
        return Err(format!("tensor `{name}` has shape {:?}, expected {:?}", t.shape(), like.shape()));
    }
    Ok(t)
}
