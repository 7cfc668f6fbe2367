//! Spectral normalization by power iteration.

use crate::tensor::{Tensor, Var};

pub const SIGMA_FLOOR: f32 = 1e-12;

/// Result of one power-iteration step on a weight matrix.
#[derive(Clone, Debug)]
pub struct PowerStep {
    pub u: Vec<f32>,
    pub v: Vec<f32>,
    pub sigma: f32,
}

fn normalize(x: &mut [f64]) -> f64 {
    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > 1e-30 {
        x.iter_mut().for_each(|v| *v /= n);
    }
    n
}

/// `v = Wᵀu/‖Wᵀu‖`, `u' = Wv/‖Wv‖`, `σ = u'ᵀWv` for `W` of shape `[out, in]`.
pub fn power_step(w: &Tensor, u: &[f32]) -> PowerStep {
    let (rows, cols) = (w.rows(), w.cols());
    assert_eq!(u.len(), rows, "spectral state length");
    let wd = w.data();
    let mut v = vec![0.0f64; cols];
    for (i, &ui) in u.iter().enumerate() {
        let row = &wd[i * cols..(i + 1) * cols];
        for (vj, &wij) in v.iter_mut().zip(row) {
            *vj += wij as f64 * ui as f64;
        }
    }
    normalize(&mut v);
    let mut un: Vec<f64> = (0..rows)
        .map(|i| wd[i * cols..(i + 1) * cols].iter().zip(&v).map(|(&a, b)| a as f64 * b).sum())
        .collect();
    let norm = normalize(&mut un);
    if norm <= 1e-30 {
        // Degenerate weight: keep the previous direction so ‖u‖ stays 1.
        return PowerStep { u: u.to_vec(), v: v.iter().map(|&x| x as f32).collect(), sigma: 0.0 };
    }
    // u'ᵀ W v = ‖Wv‖ once u' is the normalized Wv.
    PowerStep {
        u: un.iter().map(|&x| x as f32).collect(),
        v: v.iter().map(|&x| x as f32).collect(),
        sigma: norm as f32,
    }
}

/// Normalized weight as a tape expression `W / σ(W)` with `σ = uᵀWv` and
/// `(u, v)` held constant, so gradients flow through `σ`'s dependence on `W`.
/// Persists `u'` into `u` when `update` is set.
pub fn normalize_var<'t>(w: Var<'t>, u: &mut Vec<f32>, update: bool) -> (Var<'t>, f32) {
    let step = w.with_value(|wv| power_step(wv, u));
    if update {
        *u = step.u.clone();
    }
    let tape = w.tape();
    let sigma_val = step.sigma;
    let sigma = if sigma_val < SIGMA_FLOOR {
        tape.constant(Tensor::scalar(SIGMA_FLOOR))
    } else {
        let (rows, cols) = (step.u.len(), step.v.len());
        let mut outer = Vec::with_capacity(rows * cols);
        for &ui in &step.u {
            outer.extend(step.v.iter().map(|&vj| ui * vj));
        }
        (w * tape.constant(Tensor::new([rows, cols], outer))).sum()
    };
    (w.div_by_scalar(sigma), sigma_val)
}

/// One power-iteration step persisted into `u`, returning `W/σ̂` as a plain
/// tensor.
pub fn spectral_normalize(w: &Tensor, u: &mut Vec<f32>) -> (Tensor, f32) {
    let step = power_step(w, u);
    *u = step.u;
    let s = step.sigma.max(SIGMA_FLOOR);
    (w.map(|x| x / s), step.sigma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn diagonal_converged() {
        let w = Tensor::from_rows(&[vec![3.0, 0.0], vec![0.0, 1.0]]);
        let mut u = vec![1.0, 0.0];
        let (wn, s) = spectral_normalize(&w, &mut u);
        assert!((s - 3.0).abs() < 1e-6);
        assert!((wn.data()[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn unit_sigma_is_fixed_point() {
        let w = Tensor::from_rows(&[vec![0.6, 0.0], vec![0.0, 1.0]]);
        let mut u = vec![0.0, 1.0];
        let (wn, _) = spectral_normalize(&w, &mut u);
        for (a, b) in wn.data().iter().zip(w.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn zero_matrix_is_guarded() {
        let w = Tensor::zeros([2, 3]);
        let mut u = vec![1.0, 0.0];
        let (wn, s) = spectral_normalize(&w, &mut u);
        assert_eq!(s, 0.0);
        assert!(wn.is_finite());
        assert_eq!(u, vec![1.0, 0.0]);
        let tape = Tape::new();
        let (wv, _) = normalize_var(tape.leaf(w), &mut u, true);
        assert!(wv.value().is_finite());
    }

    #[test]
    fn state_stays_unit_norm() {
        let w = Tensor::new([3, 2], vec![1.0, 2.0, -0.5, 0.3, 0.0, 4.0]);
        let mut u = vec![0.2, 0.9, -0.1];
        for _ in 0..5 {
            spectral_normalize(&w, &mut u);
            let n: f32 = u.iter().map(|x| x * x).sum::<f32>().sqrt();
            assert!((n - 1.0).abs() < 1e-5);
        }
    }
}
