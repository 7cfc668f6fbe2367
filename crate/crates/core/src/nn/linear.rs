use rand::Rng;

use super::spectral::{normalize_var, power_step};
use super::{gaussian, take, Module};
use crate::tensor::{Tape, Tensor, Var};

/// Weight initialization scheme; biases always start at zero.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Variance `2 / fan_in` (relu trunks).
    He,
    /// Variance `1 / fan_in` (heads and embeddings).
    Lecun,
}

impl Init {
    pub fn variance(self, fan_in: usize) -> f32 {
        match self {
            Init::He => 2.0 / fan_in as f32,
            Init::Lecun => 1.0 / fan_in as f32,
        }
    }
}

/// Fully connected layer `y = x Wᵀ + b` with optional spectral normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearLayer {
    /// `[out, in]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
    /// Power-iteration vector, length `out`, unit norm.
    pub spectral_u: Option<Vec<f32>>,
}

/// Tape handles for a layer's parameters.
#[derive(Clone, Copy, Debug)]
pub struct LinearVars<'t> {
    pub weight: Var<'t>,
    pub bias: Var<'t>,
}

pub(crate) fn bind_param<'t>(tape: &'t Tape, t: &Tensor, trainable: bool) -> Var<'t> {
    if trainable {
        tape.leaf(t.clone())
    } else {
        tape.constant(t.clone())
    }
}

pub(crate) fn random_unit(n: usize, rng: &mut impl Rng) -> Vec<f32> {
    let mut u = gaussian([n], 1.0, rng).into_data();
    let norm = u.iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-12);
    u.iter_mut().for_each(|x| *x /= norm);
    u
}

impl LinearLayer {
    pub fn new(fan_in: usize, fan_out: usize, spectral: bool, init: Init, rng: &mut impl Rng) -> Self {
        let weight = gaussian([fan_out, fan_in], init.variance(fan_in), rng);
        let spectral_u = spectral.then(|| random_unit(fan_out, rng));
        LinearLayer { weight, bias: Tensor::zeros([fan_out]), spectral_u }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.cols()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.rows()
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> LinearVars<'t> {
        LinearVars { weight: bind_param(tape, &self.weight, trainable), bias: bind_param(tape, &self.bias, trainable) }
    }

    /// Weight used by this forward pass: `W/σ̂` after one power-iteration
    /// step when spectral normalization is on, raw `W` otherwise.
    pub fn effective_weight<'t>(&mut self, w: Var<'t>, update_state: bool) -> Var<'t> {
        match self.spectral_u.as_mut() {
            Some(u) => normalize_var(w, u, update_state).0,
            None => w,
        }
    }

    pub fn forward<'t>(&mut self, vars: &LinearVars<'t>, x: Var<'t>, update_state: bool) -> Var<'t> {
        let w = self.effective_weight(vars.weight, update_state);
        x.matmul_t(w).add_row(vars.bias)
    }

    /// Current σ̂ estimate from the stored state without advancing it.
    pub fn sigma_estimate(&self) -> Option<f32> {
        self.spectral_u.as_ref().map(|u| power_step(&self.weight, u).sigma)
    }
}

impl Module for LinearLayer {
    fn params(&self) -> Vec<&Tensor> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }

    fn named_tensors(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
        if let Some(u) = &self.spectral_u {
            out.push((format!("{prefix}.sn_u"), Tensor::vector(u.clone())));
        }
    }

    fn load_tensors(&mut self, prefix: &str, lookup: &dyn Fn(&str) -> Option<Tensor>) -> Result<(), String> {
        self.weight = take(lookup, &format!("{prefix}.weight"), &self.weight)?;
        self.bias = take(lookup, &format!("{prefix}.bias"), &self.bias)?;
        if let Some(u) = &self.spectral_u {
            let like = Tensor::vector(u.clone());
            self.spectral_u = Some(take(lookup, &format!("{prefix}.sn_u"), &like)?.into_data());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::LabRng;

    #[test]
    fn forward_matches_hand_formula() {
        let mut layer = LinearLayer {
            weight: Tensor::from_rows(&[vec![1.0, 2.0], vec![0.0, -1.0], vec![0.5, 0.5]]),
            bias: Tensor::vector(vec![0.1, 0.2, 0.3]),
            spectral_u: None,
        };
        let tape = Tape::new();
        let vars = layer.bind(&tape, true);
        let x = tape.constant(Tensor::from_rows(&[vec![1.0, 1.0]]));
        let y = layer.forward(&vars, x, true);
        assert_eq!(y.value().data(), &[3.1, -0.8, 1.3]);
    }

    #[test]
    fn init_variance_and_zero_bias() {
        let mut rng = LabRng::seed(3);
        let layer = LinearLayer::new(64, 256, true, Init::He, &mut rng);
        let var: f32 = layer.weight.data().iter().map(|w| w * w).sum::<f32>() / layer.weight.len() as f32;
        assert!((var - 2.0 / 64.0).abs() < 0.003, "{var}");
        assert!(layer.bias.data().iter().all(|&b| b == 0.0));
        let u = layer.spectral_u.unwrap();
        assert!((u.iter().map(|x| x * x).sum::<f32>() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn frozen_forward_leaves_state() {
        let mut rng = LabRng::seed(4);
        let mut layer = LinearLayer::new(3, 4, true, Init::He, &mut rng);
        let before = layer.clone();
        let tape = Tape::new();
        let vars = layer.bind(&tape, false);
        layer.forward(&vars, tape.constant(Tensor::zeros([2, 3])), false);
        assert_eq!(layer, before);
    }
}
