//! Conditional generator and projection critic.
//!
//! The critic computes `D(x, y) = ψ(φ(x)) + ⟨E_y, φ(x)⟩`. Depending on
//! [`HeadMode`] it also exposes a K-way classifier: a separate linear head on
//! `φ(x)` (`Aux`), or the embedding matrix itself, `φ(x) Eᵀ` (`Shared`).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{gaussian, BnMode, CbnVars, ConditionalBatchNorm, Init, LinearLayer, LinearVars, Module};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadMode {
    ProjectionOnly,
    Aux,
    Shared,
}

impl HeadMode {
    pub fn code(self) -> f32 {
        match self {
            HeadMode::ProjectionOnly => 0.0,
            HeadMode::Aux => 1.0,
            HeadMode::Shared => 2.0,
        }
    }

    pub fn from_code(c: f32) -> Option<Self> {
        match c as i32 {
            0 => Some(HeadMode::ProjectionOnly),
            1 => Some(HeadMode::Aux),
            2 => Some(HeadMode::Shared),
            _ => None,
        }
    }
}

/// Network sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub data_dim: usize,
    pub classes: usize,
    pub z_dim: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub feature_dim: usize,
    pub spectral: bool,
}

impl Arch {
    pub fn new(data_dim: usize, classes: usize, z_dim: usize) -> Self {
        Arch { data_dim, classes, z_dim, hidden_width: 64, hidden_layers: 3, feature_dim: 64, spectral: true }
    }
}

fn check_labels(labels: &[usize], classes: usize) {
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        panic!("label {bad} out of range for {classes} classes");
    }
}

// ---------------------------------------------------------------------------
// Generator

/// MLP generator; class information enters only through conditional batch
/// norm gains and biases.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorNet {
    pub z_dim: usize,
    pub classes: usize,
    pub hidden: Vec<(LinearLayer, ConditionalBatchNorm)>,
    pub out: LinearLayer,
}

pub struct GeneratorVars<'t> {
    hidden: Vec<(LinearVars<'t>, CbnVars<'t>)>,
    out: LinearVars<'t>,
}

impl GeneratorNet {
    pub fn new(arch: &Arch, rng: &mut impl Rng) -> Self {
        let mut hidden = Vec::with_capacity(arch.hidden_layers);
        let mut fan_in = arch.z_dim;
        for _ in 0..arch.hidden_layers {
            let fc = LinearLayer::new(fan_in, arch.hidden_width, arch.spectral, Init::He, rng);
            hidden.push((fc, ConditionalBatchNorm::new(arch.classes, arch.hidden_width)));
            fan_in = arch.hidden_width;
        }
        let out = LinearLayer::new(fan_in, arch.data_dim, arch.spectral, Init::Lecun, rng);
        GeneratorNet { z_dim: arch.z_dim, classes: arch.classes, hidden, out }
    }

    pub fn data_dim(&self) -> usize {
        self.out.fan_out()
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> GeneratorVars<'t> {
        GeneratorVars {
            hidden: self.hidden.iter().map(|(fc, bn)| (fc.bind(tape, trainable), bn.bind(tape, trainable))).collect(),
            out: self.out.bind(tape, trainable),
        }
    }

    /// Tape handles in the same order as [`Module::params`].
    pub fn var_list<'t>(vars: &GeneratorVars<'t>) -> Vec<Var<'t>> {
        let mut v = Vec::new();
        for (fc, bn) in &vars.hidden {
            v.extend([fc.weight, fc.bias, bn.gamma, bn.beta]);
        }
        v.extend([vars.out.weight, vars.out.bias]);
        v
    }

    /// `G(z, y)`. `update_state` controls whether spectral vectors and
    /// running statistics are advanced.
    pub fn forward<'t>(
        &mut self,
        vars: &GeneratorVars<'t>,
        z: Var<'t>,
        labels: &[usize],
        mode: BnMode,
        update_state: bool,
    ) -> Var<'t> {
        check_labels(labels, self.classes);
        let mut h = z;
        for ((fc, bn), (fv, bv)) in self.hidden.iter_mut().zip(&vars.hidden) {
            h = fc.forward(fv, h, update_state);
            h = bn.forward(bv, h, labels, mode, update_state).relu();
        }
        self.out.forward(&vars.out, h, update_state)
    }

    /// Samples without touching any state.
    pub fn generate(&self, z: &Tensor, labels: &[usize], mode: BnMode) -> Tensor {
        let mut g = self.clone();
        let tape = Tape::new();
        let vars = g.bind(&tape, false);
        g.forward(&vars, tape.constant(z.clone()), labels, mode, false).value()
    }

    pub fn linear_layers(&self) -> Vec<&LinearLayer> {
        self.hidden.iter().map(|(fc, _)| fc).chain(std::iter::once(&self.out)).collect()
    }
}

impl Module for GeneratorNet {
    fn params(&self) -> Vec<&Tensor> {
        let mut p = Vec::new();
        for (fc, bn) in &self.hidden {
            p.extend(fc.params());
            p.extend(bn.params());
        }
        p.extend(self.out.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = Vec::new();
        for (fc, bn) in &mut self.hidden {
            p.extend(fc.params_mut());
            p.extend(bn.params_mut());
        }
        p.extend(self.out.params_mut());
        p
    }

    fn named_tensors(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for (i, (fc, bn)) in self.hidden.iter().enumerate() {
            fc.named_tensors(&format!("{prefix}.hidden{i}.fc"), out);
            bn.named_tensors(&format!("{prefix}.hidden{i}.bn"), out);
        }
        self.out.named_tensors(&format!("{prefix}.out"), out);
    }

    fn load_tensors(&mut self, prefix: &str, lookup: &dyn Fn(&str) -> Option<Tensor>) -> Result<(), String> {
        for (i, (fc, bn)) in self.hidden.iter_mut().enumerate() {
            fc.load_tensors(&format!("{prefix}.hidden{i}.fc"), lookup)?;
            bn.load_tensors(&format!("{prefix}.hidden{i}.bn"), lookup)?;
        }
        self.out.load_tensors(&format!("{prefix}.out"), lookup)
    }
}

// ---------------------------------------------------------------------------
// Critic

/// Class-embedding table used by the projection term. Left unnormalized so
/// its spectrum is free to move; the collapse diagnostic reads it directly.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    /// `[K, F]`
    pub table: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CriticNet {
    pub trunk: Vec<LinearLayer>,
    /// ψ: `F → 1`
    pub psi: LinearLayer,
    /// ψ_C: `F → K`, present only in `Aux` mode.
    pub classifier: Option<LinearLayer>,
    pub embedding: EmbeddingMatrix,
    pub head_mode: HeadMode,
}

pub struct CriticVars<'t> {
    trunk: Vec<LinearVars<'t>>,
    psi: LinearVars<'t>,
    classifier: Option<LinearVars<'t>>,
    embedding: Var<'t>,
}

/// One trunk evaluation; every head reads the same `φ(x)`.
pub struct CriticPass<'t> {
    pub features: Var<'t>,
    /// `ψ(φ(x))`, shape `[n]`
    pub psi: Var<'t>,
    /// Effective embedding matrix `[K, F]`.
    pub embedding: Var<'t>,
    classifier_logits: Option<Var<'t>>,
    head_mode: HeadMode,
    classes: usize,
}

impl<'t> CriticPass<'t> {
    pub fn rows(&self) -> usize {
        self.psi.shape()[0]
    }

    /// `D(x, y)` for each row.
    pub fn score(&self, labels: &[usize]) -> Var<'t> {
        check_labels(labels, self.classes);
        assert_eq!(labels.len(), self.rows(), "one label per row");
        self.psi + self.features.dot_rows(self.embedding.index_select(labels))
    }

    /// Projection affinities `⟨E_k, φ(x)⟩`, shape `[n, K]`.
    pub fn projection_logits(&self) -> Var<'t> {
        self.features.matmul_t(self.embedding)
    }

    /// `D(x, k)` for every class: `ψ(φ(x))·1ᵀ + φ(x)Eᵀ`.
    pub fn all_classes(&self) -> Var<'t> {
        let n = self.rows();
        let tape = self.psi.tape();
        let ones = tape.constant(Tensor::full([1, self.classes], 1.0));
        self.psi.reshape(&[n, 1]).matmul(ones) + self.projection_logits()
    }

    /// Classifier logits: `ψ_C(φ(x))` in `Aux` mode, `φ(x)Eᵀ` in `Shared`.
    pub fn classify(&self) -> Var<'t> {
        match self.head_mode {
            HeadMode::ProjectionOnly => panic!("classify() needs a classifier head; critic is projection-only"),
            HeadMode::Aux => self.classifier_logits.expect("aux head evaluated"),
            HeadMode::Shared => self.projection_logits(),
        }
    }

    pub fn has_classifier(&self) -> bool {
        self.head_mode != HeadMode::ProjectionOnly
    }
}

impl CriticNet {
    pub fn new(arch: &Arch, head_mode: HeadMode, rng: &mut impl Rng) -> Self {
        let mut trunk = Vec::with_capacity(arch.hidden_layers);
        let mut fan_in = arch.data_dim;
        for i in 0..arch.hidden_layers {
            let out = if i + 1 == arch.hidden_layers { arch.feature_dim } else { arch.hidden_width };
            trunk.push(LinearLayer::new(fan_in, out, arch.spectral, Init::He, rng));
            fan_in = out;
        }
        let f = arch.feature_dim;
        let psi = LinearLayer::new(f, 1, arch.spectral, Init::Lecun, rng);
        let classifier =
            (head_mode == HeadMode::Aux).then(|| LinearLayer::new(f, arch.classes, arch.spectral, Init::Lecun, rng));
        let table = gaussian([arch.classes, f], Init::Lecun.variance(f), rng);
        CriticNet { trunk, psi, classifier, embedding: EmbeddingMatrix { table }, head_mode }
    }

    pub fn classes(&self) -> usize {
        self.embedding.table.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.embedding.table.cols()
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> CriticVars<'t> {
        CriticVars {
            trunk: self.trunk.iter().map(|l| l.bind(tape, trainable)).collect(),
            psi: self.psi.bind(tape, trainable),
            classifier: self.classifier.as_ref().map(|l| l.bind(tape, trainable)),
            embedding: crate::nn::linear_bind_param(tape, &self.embedding.table, trainable),
        }
    }

    /// Tape handles in the same order as [`Module::params`].
    pub fn var_list<'t>(vars: &CriticVars<'t>) -> Vec<Var<'t>> {
        let mut v = Vec::new();
        for l in &vars.trunk {
            v.extend([l.weight, l.bias]);
        }
        v.extend([vars.psi.weight, vars.psi.bias]);
        if let Some(c) = &vars.classifier {
            v.extend([c.weight, c.bias]);
        }
        v.push(vars.embedding);
        v
    }

    pub fn pass<'t>(&mut self, vars: &CriticVars<'t>, x: Var<'t>, update_state: bool) -> CriticPass<'t> {
        let mut h = x;
        for (layer, lv) in self.trunk.iter_mut().zip(&vars.trunk) {
            h = layer.forward(lv, h, update_state).relu();
        }
        let n = h.shape()[0];
        let psi = self.psi.forward(&vars.psi, h, update_state).reshape(&[n]);
        let embedding = vars.embedding;
        let classifier_logits = match (&mut self.classifier, &vars.classifier) {
            (Some(c), Some(cv)) => Some(c.forward(cv, h, update_state)),
            _ => None,
        };
        CriticPass { features: h, psi, embedding, classifier_logits, head_mode: self.head_mode, classes: self.classes() }
    }

    /// Read-only evaluation helper: runs `f` on a pass over constant inputs.
    pub fn eval<R>(&self, x: &Tensor, f: impl for<'t> FnOnce(&CriticPass<'t>) -> R) -> R {
        let mut c = self.clone();
        let tape = Tape::new();
        let vars = c.bind(&tape, false);
        let pass = c.pass(&vars, tape.constant(x.clone()), false);
        f(&pass)
    }

    pub fn critic_forward(&self, x: &Tensor, labels: &[usize]) -> Tensor {
        self.eval(x, |p| p.score(labels).value())
    }

    pub fn critic_all_classes(&self, x: &Tensor) -> Tensor {
        self.eval(x, |p| p.all_classes().value())
    }

    pub fn classify(&self, x: &Tensor) -> Tensor {
        self.eval(x, |p| p.classify().value())
    }

    pub fn features(&self, x: &Tensor) -> Tensor {
        self.eval(x, |p| p.features.value())
    }

    /// Every spectrally normalized weight in the critic, with its state.
    pub fn spectral_weights(&self) -> Vec<(String, &Tensor, Option<&Vec<f32>>)> {
        let mut out: Vec<(String, &Tensor, Option<&Vec<f32>>)> = Vec::new();
        for (i, l) in self.trunk.iter().enumerate() {
            out.push((format!("trunk{i}"), &l.weight, l.spectral_u.as_ref()));
        }
        out.push(("psi".into(), &self.psi.weight, self.psi.spectral_u.as_ref()));
        if let Some(c) = &self.classifier {
            out.push(("cls".into(), &c.weight, c.spectral_u.as_ref()));
        }
        out
    }
}

impl Module for CriticNet {
    fn params(&self) -> Vec<&Tensor> {
        let mut p: Vec<&Tensor> = self.trunk.iter().flat_map(|l| l.params()).collect();
        p.extend(self.psi.params());
        if let Some(c) = &self.classifier {
            p.extend(c.params());
        }
        p.push(&self.embedding.table);
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p: Vec<&mut Tensor> = self.trunk.iter_mut().flat_map(|l| l.params_mut()).collect();
        p.extend(self.psi.params_mut());
        if let Some(c) = &mut self.classifier {
            p.extend(c.params_mut());
        }
        p.push(&mut self.embedding.table);
        p
    }

    fn named_tensors(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for (i, l) in self.trunk.iter().enumerate() {
            l.named_tensors(&format!("{prefix}.trunk{i}"), out);
        }
        self.psi.named_tensors(&format!("{prefix}.psi"), out);
        if let Some(c) = &self.classifier {
            c.named_tensors(&format!("{prefix}.cls"), out);
        }
        out.push((format!("{prefix}.embed.table"), self.embedding.table.clone()));
        out.push((format!("{prefix}.head_mode"), Tensor::scalar(self.head_mode.code())));
    }

    fn load_tensors(&mut self, prefix: &str, lookup: &dyn Fn(&str) -> Option<Tensor>) -> Result<(), String> {
        if let Some(code) = lookup(&format!("{prefix}.head_mode")) {
            let mode = HeadMode::from_code(code.item()).ok_or("unknown head mode code")?;
            if mode != self.head_mode {
                return Err(format!("checkpoint head mode {mode:?} differs from {:?}", self.head_mode));
            }
        }
        for (i, l) in self.trunk.iter_mut().enumerate() {
            l.load_tensors(&format!("{prefix}.trunk{i}"), lookup)?;
        }
        self.psi.load_tensors(&format!("{prefix}.psi"), lookup)?;
        if let Some(c) = &mut self.classifier {
            c.load_tensors(&format!("{prefix}.cls"), lookup)?;
        }
        self.embedding.table = crate::nn::take(lookup, &format!("{prefix}.embed.table"), &self.embedding.table)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::LabRng;

    fn small_arch() -> Arch {
        Arch { data_dim: 2, classes: 3, z_dim: 4, hidden_width: 8, hidden_layers: 2, feature_dim: 2, spectral: true }
    }

    #[test]
    fn projection_score_by_hand() {
        // φ(x) = [1, 2], ψ = [1, 1] with zero bias, E_y = [0.5, -1]
        let tape = Tape::new();
        let features = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0]]));
        let psi = tape.constant(Tensor::from_rows(&[vec![1.0, 1.0]]));
        let emb = tape.constant(Tensor::from_rows(&[vec![9.0, 9.0], vec![0.5, -1.0]]));
        let pass = CriticPass {
            features,
            psi: features.matmul_t(psi).reshape(&[1]),
            embedding: emb,
            classifier_logits: None,
            head_mode: HeadMode::ProjectionOnly,
            classes: 2,
        };
        assert!((pass.score(&[1]).item() - 1.5).abs() < 1e-6);
    }

    #[test]
    fn zero_embedding_leaves_psi() {
        let mut rng = LabRng::seed(5);
        let mut critic = CriticNet::new(&small_arch(), HeadMode::ProjectionOnly, &mut rng);
        critic.embedding.table = Tensor::zeros([3, 2]);
        let x = nn_input(&mut rng, 5);
        let scores = critic.critic_forward(&x, &[0, 1, 2, 0, 1]);
        let psi = critic.eval(&x, |p| p.psi.value());
        assert_eq!(scores, psi);
    }

    #[test]
    fn equal_embedding_rows_give_equal_scores() {
        let mut rng = LabRng::seed(6);
        let mut critic = CriticNet::new(&small_arch(), HeadMode::Aux, &mut rng);
        let row = critic.embedding.table.row(0).to_vec();
        critic.embedding.table.data_mut()[2..4].copy_from_slice(&row);
        let x = nn_input(&mut rng, 4);
        assert_eq!(critic.critic_forward(&x, &[0; 4]), critic.critic_forward(&x, &[1; 4]));
    }

    #[test]
    fn all_classes_matches_per_class_loop() {
        let mut rng = LabRng::seed(7);
        let critic = CriticNet::new(&small_arch(), HeadMode::Aux, &mut rng);
        let x = nn_input(&mut rng, 6);
        let all = critic.critic_all_classes(&x);
        for k in 0..3 {
            let col = critic.critic_forward(&x, &[k; 6]);
            for i in 0..6 {
                assert!((all.row(i)[k] - col.data()[i]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn single_class_all_classes_is_forward() {
        let mut rng = LabRng::seed(8);
        let arch = Arch { classes: 1, ..small_arch() };
        let critic = CriticNet::new(&arch, HeadMode::ProjectionOnly, &mut rng);
        let x = nn_input(&mut rng, 3);
        let all = critic.critic_all_classes(&x).reshape([3]);
        let f = critic.critic_forward(&x, &[0; 3]);
        for (a, b) in all.data().iter().zip(f.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn shared_classify_is_projection_affinity() {
        let mut rng = LabRng::seed(9);
        let mut critic = CriticNet::new(&small_arch(), HeadMode::Shared, &mut rng);
        assert!(critic.classifier.is_none());
        // identity-like rows select feature coordinates
        critic.embedding.table = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 0.0]]);
        let x = nn_input(&mut rng, 4);
        let logits = critic.classify(&x);
        let phi = critic.features(&x);
        for i in 0..4 {
            assert_eq!(logits.row(i), &[phi.row(i)[0], phi.row(i)[1], 0.0]);
        }
        let argmax_all = critic.critic_all_classes(&x).argmax_rows();
        assert_eq!(argmax_all, logits.argmax_rows());
    }

    #[test]
    fn aux_zero_head_gives_zero_logits() {
        let mut rng = LabRng::seed(10);
        let mut critic = CriticNet::new(&small_arch(), HeadMode::Aux, &mut rng);
        let cls = critic.classifier.as_mut().unwrap();
        cls.weight = Tensor::zeros([3, 2]);
        let x = nn_input(&mut rng, 2);
        assert!(critic.classify(&x).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    #[should_panic(expected = "projection-only")]
    fn classify_without_head_panics() {
        let mut rng = LabRng::seed(11);
        let critic = CriticNet::new(&small_arch(), HeadMode::ProjectionOnly, &mut rng);
        critic.classify(&nn_input(&mut rng, 2));
    }

    #[test]
    #[should_panic(expected = "out of range")]
    fn critic_rejects_bad_label() {
        let mut rng = LabRng::seed(12);
        let critic = CriticNet::new(&small_arch(), HeadMode::Aux, &mut rng);
        critic.critic_forward(&nn_input(&mut rng, 1), &[3]);
    }

    #[test]
    fn generator_conditioning_and_determinism() {
        let mut rng = LabRng::seed(13);
        let mut g = GeneratorNet::new(&small_arch(), &mut rng);
        // generic, non-trivial class gains
        for (_, bn) in &mut g.hidden {
            bn.gamma = gaussian(bn.gamma.shape().to_vec(), 1.0, &mut rng);
            bn.beta = gaussian(bn.beta.shape().to_vec(), 1.0, &mut rng);
        }
        let z = gaussian([1, 4], 1.0, &mut rng);
        let zz = Tensor::concat_rows(&[&z, &z, &z]);
        let a = g.generate(&zz, &[0, 0, 0], BnMode::Eval);
        assert_eq!(a.row(0), a.row(1));
        assert_eq!(a.row(1), a.row(2));
        let b = g.generate(&zz, &[1, 1, 1], BnMode::Eval);
        assert_ne!(a.row(0), b.row(0));
        assert_eq!(a, g.generate(&zz, &[0, 0, 0], BnMode::Eval));
    }

    #[test]
    #[should_panic(expected = "out of range")]
    fn generator_rejects_bad_label() {
        let mut rng = LabRng::seed(14);
        let g = GeneratorNet::new(&small_arch(), &mut rng);
        g.generate(&Tensor::zeros([2, 4]), &[0, 5], BnMode::Train);
    }

    fn nn_input(rng: &mut LabRng, n: usize) -> Tensor {
        gaussian([n, 2], 1.0, rng)
    }
}
