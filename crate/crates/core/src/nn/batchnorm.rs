use super::linear::bind_param;
use super::{take, Module};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with running statistics.
    Eval,
}

/// Batch normalization whose affine gain and bias are looked up per class.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionalBatchNorm {
    /// `[K, F]`, starts at one.
    pub gamma: Tensor,
    /// `[K, F]`, starts at zero.
    pub beta: Tensor,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub eps: f32,
    pub momentum: f32,
}

#[derive(Clone, Copy, Debug)]
pub struct CbnVars<'t> {
    pub gamma: Var<'t>,
    pub beta: Var<'t>,
}

impl ConditionalBatchNorm {
    pub fn new(classes: usize, features: usize) -> Self {
        ConditionalBatchNorm {
            gamma: Tensor::full([classes, features], 1.0),
            beta: Tensor::zeros([classes, features]),
            running_mean: vec![0.0; features],
            running_var: vec![1.0; features],
            eps: 1e-5,
            momentum: 0.99,
        }
    }

    pub fn classes(&self) -> usize {
        self.gamma.rows()
    }

    pub fn features(&self) -> usize {
        self.gamma.cols()
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> CbnVars<'t> {
        CbnVars { gamma: bind_param(tape, &self.gamma, trainable), beta: bind_param(tape, &self.beta, trainable) }
    }

    /// `γ_y ⊙ x̂ + β_y`. In train mode `x̂` uses batch statistics and, when
    /// `update_stats` is set, the running statistics move toward them.
    pub fn forward<'t>(
        &mut self,
        vars: &CbnVars<'t>,
        x: Var<'t>,
        labels: &[usize],
        mode: BnMode,
        update_stats: bool,
    ) -> Var<'t> {
        let tape = x.tape();
        let shape = x.shape();
        let (n, f) = (shape[0], shape[1]);
        assert_eq!(f, self.features(), "batch norm feature count");
        assert_eq!(labels.len(), n, "one label per row");
        let k = self.classes();
        assert!(labels.iter().all(|&y| y < k), "label out of range for {k} classes");

        let xhat = match mode {
            BnMode::Train => {
                assert!(n >= 2, "train-mode batch norm needs at least two rows");
                let mean = x.mean_axis(0);
                let centered = x - mean.broadcast_rows(n);
                let var = centered.square().mean_axis(0);
                if update_stats {
                    let (m, v) = (mean.value(), var.value());
                    let unbias = n as f32 / (n as f32 - 1.0);
                    let mo = self.momentum;
                    for j in 0..f {
                        self.running_mean[j] = mo * self.running_mean[j] + (1.0 - mo) * m.data()[j];
                        self.running_var[j] = mo * self.running_var[j] + (1.0 - mo) * v.data()[j] * unbias;
                    }
                }
                centered.div(var.add_scalar(self.eps).sqrt().broadcast_rows(n))
            }
            BnMode::Eval => {
                let mean = tape.constant(Tensor::vector(self.running_mean.clone()));
                let inv: Vec<f32> = self.running_var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
                let inv = tape.constant(Tensor::vector(inv));
                (x - mean.broadcast_rows(n)) * inv.broadcast_rows(n)
            }
        };
        xhat * vars.gamma.index_select(labels) + vars.beta.index_select(labels)
    }
}

impl Module for ConditionalBatchNorm {
    fn params(&self) -> Vec<&Tensor> {
        vec![&self.gamma, &self.beta]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.gamma, &mut self.beta]
    }

    fn named_tensors(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.gamma"), self.gamma.clone()));
        out.push((format!("{prefix}.beta"), self.beta.clone()));
        out.push((format!("{prefix}.running_mean"), Tensor::vector(self.running_mean.clone())));
        out.push((format!("{prefix}.running_var"), Tensor::vector(self.running_var.clone())));
    }

    fn load_tensors(&mut self, prefix: &str, lookup: &dyn Fn(&str) -> Option<Tensor>) -> Result<(), String> {
        self.gamma = take(lookup, &format!("{prefix}.gamma"), &self.gamma)?;
        self.beta = take(lookup, &format!("{prefix}.beta"), &self.beta)?;
        let like = Tensor::vector(self.running_mean.clone());
        self.running_mean = take(lookup, &format!("{prefix}.running_mean"), &like)?.into_data();
        self.running_var = take(lookup, &format!("{prefix}.running_var"), &like)?.into_data();
        if self.running_var.iter().any(|&v| v <= 0.0) {
            return Err(format!("{prefix}.running_var must be positive"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gaussian;
    use crate::rng::LabRng;

    #[test]
    fn train_mode_standardizes_single_class_batch() {
        let mut bn = ConditionalBatchNorm::new(3, 4);
        let mut rng = LabRng::seed(1);
        let x = gaussian([64, 4], 9.0, &mut rng).map(|v| v + 5.0);
        let tape = Tape::new();
        let vars = bn.bind(&tape, true);
        let y = bn.forward(&vars, tape.constant(x), &[1; 64], BnMode::Train, true).value();
        for j in 0..4 {
            let col: Vec<f32> = (0..64).map(|i| y.row(i)[j]).collect();
            let m = col.iter().sum::<f32>() / 64.0;
            let v = col.iter().map(|c| (c - m) * (c - m)).sum::<f32>() / 64.0;
            assert!(m.abs() < 1e-3, "mean {m}");
            assert!((v - 1.0).abs() < 1e-2, "var {v}");
        }
    }

    #[test]
    fn affine_applies_class_gain_and_bias() {
        let mut bn = ConditionalBatchNorm::new(2, 1);
        bn.gamma = Tensor::from_rows(&[vec![1.0], vec![2.0]]);
        bn.beta = Tensor::from_rows(&[vec![0.0], vec![3.0]]);
        let tape = Tape::new();
        let vars = bn.bind(&tape, true);
        // symmetric batch: row 0 normalizes to exactly 0
        let x = tape.constant(Tensor::new([3, 1], vec![0.0, -1.0, 1.0]));
        let y = bn.forward(&vars, x, &[1, 0, 0], BnMode::Train, false).value();
        assert!((y.data()[0] - 3.0).abs() < 1e-6);
    }

    #[test]
    fn eval_mode_is_hand_affine() {
        let mut bn = ConditionalBatchNorm::new(2, 2);
        bn.running_mean = vec![1.0, -2.0];
        bn.running_var = vec![4.0, 0.25];
        bn.gamma = Tensor::from_rows(&[vec![1.0, 1.0], vec![0.5, 3.0]]);
        bn.beta = Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, -1.0]]);
        let tape = Tape::new();
        let vars = bn.bind(&tape, false);
        let x = [3.0f32, 0.0];
        let y = bn.forward(&vars, tape.constant(Tensor::new([1, 2], x.to_vec())), &[1], BnMode::Eval, true).value();
        let expect0 = 0.5 * (x[0] - 1.0) / (4.0f32 + 1e-5).sqrt() + 1.0;
        let expect1 = 3.0 * (x[1] + 2.0) / (0.25f32 + 1e-5).sqrt() - 1.0;
        assert!((y.data()[0] - expect0).abs() < 1e-6);
        assert!((y.data()[1] - expect1).abs() < 1e-5);
        assert_eq!(bn.running_mean, vec![1.0, -2.0]);
    }

    #[test]
    fn running_stats_track_with_momentum() {
        let mut bn = ConditionalBatchNorm::new(1, 1);
        let tape = Tape::new();
        let vars = bn.bind(&tape, true);
        bn.forward(&vars, tape.constant(Tensor::new([2, 1], vec![1.0, 3.0])), &[0, 0], BnMode::Train, true);
        assert!((bn.running_mean[0] - 0.02).abs() < 1e-6);
        // batch variance 1, unbiased 2
        assert!((bn.running_var[0] - (0.99 + 0.01 * 2.0)).abs() < 1e-6);
    }

    #[test]
    #[should_panic(expected = "at least two rows")]
    fn single_row_train_batch_is_rejected() {
        let mut bn = ConditionalBatchNorm::new(1, 1);
        let tape = Tape::new();
        let vars = bn.bind(&tape, true);
        bn.forward(&vars, tape.constant(Tensor::new([1, 1], vec![1.0])), &[0], BnMode::Train, true);
    }
}
