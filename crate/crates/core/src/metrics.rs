//! Evaluation battery: Fréchet distances, inception-like score, the four
//! conditioning accuracies, the margin diagnostic and the embedding spectrum.
//!
//! Everything here is a pure function of a parameter snapshot and an eval
//! seed. Statistics accumulate in `f64`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{sample_latent, Batch, Dataset};
use crate::losses::{cross_entropy, margin_diagnostic};
use crate::models::{CriticNet, GeneratorNet};
use crate::nn::{Adam, AdamConfig, BnMode, Init, LinearLayer, LinearVars, Module};
use crate::par;
use crate::rng::{LabRng, STREAM_EVAL, STREAM_ORACLE};
use crate::tensor::{argmax, Tape, Tensor, Var};

/// Ridge added to both covariances before the matrix square root.
pub const COV_RIDGE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub n: usize,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Sample mean and unbiased covariance, symmetrized.
pub fn fit_gaussian(features: &Tensor) -> GaussianStats {
    let (n, d) = (features.rows(), features.cols());
    assert!(n >= 2, "fit_gaussian needs at least two rows, got {n}");
    let mut mean = DVector::<f64>::zeros(d);
    for i in 0..n {
        for (j, &v) in features.row(i).iter().enumerate() {
            mean[j] += v as f64;
        }
    }
    mean /= n as f64;
    let mut cov = DMatrix::<f64>::zeros(d, d);
    let mut centered = vec![0.0f64; d];
    for i in 0..n {
        for (j, &v) in features.row(i).iter().enumerate() {
            centered[j] = v as f64 - mean[j];
        }
        for a in 0..d {
            let ca = centered[a];
            for b in 0..d {
                cov[(a, b)] += ca * centered[b];
            }
        }
    }
    cov /= (n - 1) as f64;
    let cov = (&cov + cov.transpose()) * 0.5;
    GaussianStats { mean, cov, n }
}

fn assert_symmetric(a: &DMatrix<f64>) {
    assert!(a.is_square(), "matrix must be square");
    let scale = a.amax().max(1.0);
    let asym = (a - a.transpose()).amax();
    assert!(asym <= 1e-5 * scale, "matrix is not symmetric (max asymmetry {asym:e})");
}

/// Principal square root of a symmetric PSD matrix. Negative eigenvalues
/// (round-off) are clamped to zero.
pub fn matrix_sqrt_spd(a: &DMatrix<f64>) -> DMatrix<f64> {
    assert_symmetric(a);
    let sym = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let root = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let q = &eig.eigenvectors;
    let b = q * DMatrix::from_diagonal(&root) * q.transpose();
    (&b + b.transpose()) * 0.5
}

/// `‖μ₁−μ₂‖² + Tr(Σ₁ + Σ₂ − 2 (Σ₁^½ Σ₂ Σ₁^½)^½)`, clamped at zero.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> f64 {
    assert_eq!(a.dim(), b.dim(), "frechet_distance dimension mismatch");
    let d = a.dim();
    let ridge = DMatrix::<f64>::identity(d, d) * COV_RIDGE;
    let s1 = &a.cov + &ridge;
    let s2 = &b.cov + &ridge;
    let r1 = matrix_sqrt_spd(&s1);
    let inner = &r1 * &s2 * &r1;
    let cross = matrix_sqrt_spd(&((&inner + inner.transpose()) * 0.5));
    let dm = (&a.mean - &b.mean).norm_squared();
    (dm + s1.trace() + s2.trace() - 2.0 * cross.trace()).max(0.0)
}

/// Feature space for Fréchet distances.
#[derive(Clone, Copy)]
pub enum FeatureSpace<'a> {
    /// Raw coordinates.
    Raw,
    /// Penultimate activations of the oracle classifier.
    Oracle(&'a OracleClassifier),
}

impl FeatureSpace<'_> {
    pub fn apply(&self, x: &Tensor) -> Tensor {
        match self {
            FeatureSpace::Raw => x.clone(),
            FeatureSpace::Oracle(o) => o.features(x),
        }
    }
}

pub fn toy_fid(real_x: &Tensor, fake_x: &Tensor, space: FeatureSpace<'_>) -> f64 {
    frechet_distance(&fit_gaussian(&space.apply(real_x)), &fit_gaussian(&space.apply(fake_x)))
}

/// Per-class Fréchet distances and their mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntraFid {
    pub per_class: Vec<f64>,
    pub mean: f64,
}

fn rows_of_class(labels: &[usize], c: usize) -> Vec<usize> {
    (0..labels.len()).filter(|&i| labels[i] == c).collect()
}

/// Per-class stats, or `None` if any class has fewer than `d + 1` rows.
pub fn class_stats(features: &Tensor, labels: &[usize], classes: usize) -> Option<Vec<GaussianStats>> {
    let need = features.cols() + 1;
    let groups: Vec<Vec<usize>> = (0..classes).map(|c| rows_of_class(labels, c)).collect();
    if groups.iter().any(|g| g.len() < need) {
        return None;
    }
    Some(par::map(&groups, |g| fit_gaussian(&features.select_rows(g))))
}

/// Fréchet distance per class. `None` when a class is too small to fit.
pub fn intra_fid(
    real: (&Tensor, &[usize]),
    fake: (&Tensor, &[usize]),
    classes: usize,
    space: FeatureSpace<'_>,
) -> Option<IntraFid> {
    let real_stats = class_stats(&space.apply(real.0), real.1, classes)?;
    let fake_stats = class_stats(&space.apply(fake.0), fake.1, classes)?;
    Some(intra_fid_from_stats(&real_stats, &fake_stats))
}

pub fn intra_fid_from_stats(real: &[GaussianStats], fake: &[GaussianStats]) -> IntraFid {
    assert_eq!(real.len(), fake.len(), "class count mismatch");
    let pairs: Vec<(&GaussianStats, &GaussianStats)> = real.iter().zip(fake).collect();
    let per_class = par::map(&pairs, |(r, f)| frechet_distance(r, f));
    let mean = per_class.iter().sum::<f64>() / per_class.len() as f64;
    IntraFid { per_class, mean }
}

/// `exp(E_x KL(p(y|x) ‖ p(y)))` over rows of class posteriors.
pub fn inception_like_score(probs: &[Vec<f64>]) -> f64 {
    assert!(!probs.is_empty(), "inception_like_score needs at least one row");
    let k = probs[0].len();
    let mut marginal = vec![0.0f64; k];
    for p in probs {
        assert_eq!(p.len(), k, "ragged posterior rows");
        for (m, &v) in marginal.iter_mut().zip(p) {
            *m += v;
        }
    }
    marginal.iter_mut().for_each(|m| *m /= probs.len() as f64);
    let kl: f64 = probs
        .iter()
        .map(|p| p.iter().zip(&marginal).filter(|(&v, _)| v > 0.0).map(|(&v, &m)| v * (v / m).ln()).sum::<f64>())
        .sum::<f64>()
        / probs.len() as f64;
    kl.exp().clamp(1.0, k as f64)
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    assert_eq!(pred.len(), truth.len(), "prediction/label length mismatch");
    assert!(!pred.is_empty(), "accuracy over zero examples");
    pred.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / pred.len() as f64
}

/// Fraction of scores strictly above zero.
pub fn positive_rate(scores: &[f32]) -> f64 {
    assert!(!scores.is_empty(), "positive_rate over zero scores");
    scores.iter().filter(|&&s| s > 0.0).count() as f64 / scores.len() as f64
}

/// The four conditioning accuracies. Classifier-based entries are `None`
/// for a projection-only critic.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Accuracies {
    pub validation: Option<f64>,
    pub self_acc: Option<f64>,
    pub discriminator: f64,
    pub projection: f64,
}

/// Accuracies on a validation batch and on `n_eval` generated samples drawn
/// under `seed`.
pub fn accuracies(g: &GeneratorNet, d: &CriticNet, validation: &Batch, n_eval: usize, seed: u64) -> Accuracies {
    assert!(n_eval >= 1, "n_eval must be positive");
    let (z, y) = sample_latent(n_eval, g.z_dim, g.classes, &mut LabRng::stream(seed, STREAM_EVAL));
    let fake = g.generate(&z, &y, BnMode::Eval);
    let has_cls = d.head_mode != crate::models::HeadMode::ProjectionOnly;
    let (disc, proj, val) = d.eval(&validation.x, |p| {
        let disc = positive_rate(p.score(&validation.y).value().data());
        let proj = accuracy(&p.projection_logits().value().argmax_rows(), &validation.y);
        let val = has_cls.then(|| accuracy(&p.classify().value().argmax_rows(), &validation.y));
        (disc, proj, val)
    });
    let self_acc = has_cls.then(|| accuracy(&d.classify(&fake).argmax_rows(), &y));
    Accuracies { validation: val, self_acc, discriminator: disc, projection: proj }
}

/// Singular values of `E`, descending, from the eigenvalues of the smaller
/// Gram matrix.
pub fn embedding_spectrum(e: &Tensor) -> Vec<f64> {
    let (r, c) = (e.rows(), e.cols());
    let m = DMatrix::<f64>::from_row_iterator(r, c, e.data().iter().map(|&v| v as f64));
    let gram = if r <= c { &m * m.transpose() } else { m.transpose() * &m };
    let mut s: Vec<f64> = SymmetricEigen::new(gram).eigenvalues.iter().map(|l| l.max(0.0).sqrt()).collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

// ---------------------------------------------------------------------------
// Oracle classifier

/// Frozen MLP referee trained on real labeled data (`D → 64 → 64 → K`).
#[derive(Clone, Debug, PartialEq)]
pub struct OracleClassifier {
    layers: Vec<LinearLayer>,
    pub train_accuracy: f64,
}

pub const ORACLE_TARGET_ACCURACY: f64 = 0.99;

impl OracleClassifier {
    /// Trains until the full-set accuracy reaches the target or the step
    /// budget runs out. Deterministic in `seed`.
    pub fn train(x: &Tensor, y: &[usize], classes: usize, seed: u64) -> Self {
        let mut rng = LabRng::stream(seed, STREAM_ORACLE);
        let width = 64;
        let dims = [x.cols(), width, width, classes];
        let mut layers: Vec<LinearLayer> = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| LinearLayer::new(w[0], w[1], false, if i < 2 { Init::He } else { Init::Lecun }, &mut rng))
            .collect();
        let params: Vec<&Tensor> = layers.iter().flat_map(|l| l.params()).collect();
        let mut adam = Adam::new(AdamConfig::new(3e-3, 0.9, 0.999), &params);
        let (batch, max_steps, check_every) = (256.min(x.rows()), 4000, 250);
        let mut oracle = OracleClassifier { layers: Vec::new(), train_accuracy: 0.0 };
        for step in 1..=max_steps {
            let idx: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..x.rows())).collect();
            let yb: Vec<usize> = idx.iter().map(|&i| y[i]).collect();
            let tape = Tape::new();
            let vars: Vec<LinearVars<'_>> = layers.iter().map(|l| l.bind(&tape, true)).collect();
            let (_, logits) = forward(&mut layers, &vars, tape.constant(x.select_rows(&idx)));
            let grads = tape.backward(cross_entropy(logits, &yb));
            let g: Vec<Tensor> = vars.iter().flat_map(|v| [grads.wrt(v.weight), grads.wrt(v.bias)]).collect();
            adam.step(layers.iter_mut().flat_map(|l| l.params_mut()).collect(), &g);
            if step % check_every == 0 || step == max_steps {
                oracle.layers = layers.clone();
                oracle.train_accuracy = accuracy(&oracle.predict(x), y);
                if oracle.train_accuracy >= ORACLE_TARGET_ACCURACY {
                    break;
                }
            }
        }
        oracle
    }

    /// Oracle for a dataset: fresh real draws for mixtures, the training
    /// rows for tabular data.
    pub fn for_dataset(ds: &Dataset, seed: u64) -> Self {
        let data = match ds.centers() {
            Some(_) => ds.sample_real(8192, &mut LabRng::stream(seed, STREAM_ORACLE ^ 0x5a)),
            None => ds.pool(1),
        };
        OracleClassifier::train(&data.x, &data.y, ds.classes(), seed)
    }

    fn run<R>(&self, x: &Tensor, f: impl FnOnce(Var<'_>, Var<'_>) -> R) -> R {
        let mut layers = self.layers.clone();
        let tape = Tape::new();
        let vars: Vec<LinearVars<'_>> = layers.iter().map(|l| l.bind(&tape, false)).collect();
        let (h, logits) = forward(&mut layers, &vars, tape.constant(x.clone()));
        f(h, logits)
    }

    pub fn logits(&self, x: &Tensor) -> Tensor {
        self.run(x, |_, l| l.value())
    }

    /// Penultimate activations.
    pub fn features(&self, x: &Tensor) -> Tensor {
        self.run(x, |h, _| h.value())
    }

    pub fn predict(&self, x: &Tensor) -> Vec<usize> {
        self.logits(x).argmax_rows()
    }

    pub fn probs(&self, x: &Tensor) -> Vec<Vec<f64>> {
        let l = self.logits(x);
        (0..l.rows()).map(|i| softmax(l.row(i))).collect()
    }
}

fn forward<'t>(layers: &mut [LinearLayer], vars: &[LinearVars<'t>], x: Var<'t>) -> (Var<'t>, Var<'t>) {
    let last = layers.len() - 1;
    let mut h = x;
    for (layer, v) in layers[..last].iter_mut().zip(vars) {
        h = layer.forward(v, h, false).relu();
    }
    let logits = layers[last].forward(&vars[last], h, false);
    (h, logits)
}

pub fn softmax(l: &[f32]) -> Vec<f64> {
    let m = l.iter().cloned().fold(f32::MIN, f32::max) as f64;
    let e: Vec<f64> = l.iter().map(|&v| (v as f64 - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

// ---------------------------------------------------------------------------
// Reports

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub step: u64,
    pub toy_fid: f64,
    pub intra_fid: Option<Vec<f64>>,
    pub intra_fid_mean: Option<f64>,
    pub is_analog: f64,
    pub val_acc: Option<f64>,
    pub self_acc: Option<f64>,
    pub d_acc_real: f64,
    pub proj_cls_acc: f64,
    pub margin_diag: f64,
    /// Singular values of the embedding matrix, descending.
    pub spectrum: Vec<f64>,
    /// Oracle agreement with the conditioning label on generated samples.
    pub oracle_self_acc: f64,
    /// Mean oracle max-probability on generated samples.
    pub oracle_confidence: f64,
    /// Mean over classes of the trace of the generated-sample covariance.
    pub class_cov_trace: f64,
}

/// Real-side statistics fixed for a whole run.
#[derive(Clone)]
pub struct Evaluator {
    dataset: Dataset,
    oracle: OracleClassifier,
    validation: Batch,
    real_stats: GaussianStats,
    real_class_stats: Option<Vec<GaussianStats>>,
    n_eval: usize,
    seed: u64,
}

impl Evaluator {
    pub fn new(dataset: Dataset, oracle: OracleClassifier, n_eval: usize, seed: u64) -> Self {
        assert!(n_eval >= 2, "n_eval must be at least 2");
        let reference = match dataset.centers() {
            Some(_) => dataset.sample_real(n_eval, &mut LabRng::stream(seed, STREAM_EVAL ^ 0x1)),
            None => dataset.pool(1),
        };
        let validation = dataset.validation(n_eval, LabRng::stream(seed, STREAM_EVAL ^ 0x2).gen());
        let feats = Evaluator::space_for(&dataset, &oracle).apply(&reference.x);
        let real_stats = fit_gaussian(&feats);
        let real_class_stats = class_stats(&feats, &reference.y, dataset.classes());
        Evaluator { dataset, oracle, validation, real_stats, real_class_stats, n_eval, seed }
    }

    fn space_for<'a>(dataset: &Dataset, oracle: &'a OracleClassifier) -> FeatureSpace<'a> {
        if dataset.dim() <= 2 {
            FeatureSpace::Raw
        } else {
            FeatureSpace::Oracle(oracle)
        }
    }

    pub fn validation(&self) -> &Batch {
        &self.validation
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn oracle(&self) -> &OracleClassifier {
        &self.oracle
    }

    pub fn n_eval(&self) -> usize {
        self.n_eval
    }

    /// Generated samples and their conditioning labels for this evaluator.
    pub fn fakes(&self, g: &GeneratorNet) -> (Tensor, Vec<usize>) {
        let (z, y) = sample_latent(self.n_eval, g.z_dim, g.classes, &mut LabRng::stream(self.seed, STREAM_EVAL));
        (g.generate(&z, &y, BnMode::Eval), y)
    }

    pub fn evaluate(&self, step: u64, g: &GeneratorNet, d: &CriticNet) -> MetricsReport {
        let k = self.dataset.classes();
        let (fake, fake_y) = self.fakes(g);
        let space = Evaluator::space_for(&self.dataset, &self.oracle);
        let feats = space.apply(&fake);
        let toy_fid = frechet_distance(&self.real_stats, &fit_gaussian(&feats));
        let intra = match (&self.real_class_stats, class_stats(&feats, &fake_y, k)) {
            (Some(r), Some(f)) => Some(intra_fid_from_stats(r, &f)),
            _ => None,
        };
        let probs = self.oracle.probs(&fake);
        let is_analog = inception_like_score(&probs);
        let oracle_pred: Vec<usize> = probs.iter().map(|p| argmax_f64(p)).collect();
        let oracle_self_acc = accuracy(&oracle_pred, &fake_y);
        let oracle_confidence = probs.iter().map(|p| p.iter().cloned().fold(0.0, f64::max)).sum::<f64>() / probs.len() as f64;
        let class_cov_trace = match class_stats(&fake, &fake_y, k) {
            Some(s) => s.iter().map(|g| g.cov.trace()).sum::<f64>() / k as f64,
            None => f64::NAN,
        };
        let acc = accuracies(g, d, &self.validation, self.n_eval, self.seed);
        let margin_diag = margin_diagnostic(&d.critic_all_classes(&self.validation.x), &self.validation.y) as f64;
        MetricsReport {
            step,
            toy_fid,
            intra_fid: intra.as_ref().map(|i| i.per_class.clone()),
            intra_fid_mean: intra.map(|i| i.mean),
            is_analog,
            val_acc: acc.validation,
            self_acc: acc.self_acc,
            d_acc_real: acc.discriminator,
            proj_cls_acc: acc.projection,
            margin_diag,
            spectrum: embedding_spectrum(&d.embedding.table),
            oracle_self_acc,
            oracle_confidence,
            class_cov_trace,
        }
    }
}

fn argmax_f64(p: &[f64]) -> usize {
    argmax(&p.iter().map(|&v| v as f32).collect::<Vec<_>>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DatasetSpec;

    fn stats_1d(mean: f64, var: f64) -> GaussianStats {
        GaussianStats { mean: DVector::from_vec(vec![mean]), cov: DMatrix::from_vec(1, 1, vec![var]), n: 10 }
    }

    #[test]
    fn fit_gaussian_examples() {
        let s = fit_gaussian(&Tensor::from_rows(&vec![vec![1.0, 2.0]; 5]));
        assert_eq!(s.cov.amax(), 0.0);
        let s = fit_gaussian(&Tensor::from_rows(&[vec![0.0, 0.0], vec![2.0, 0.0]]));
        assert_eq!(s.mean.as_slice(), &[1.0, 0.0]);
        assert_eq!(s.cov, DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.0]));
    }

    #[test]
    fn fit_gaussian_matches_moment_formula() {
        let mut rng = LabRng::seed(11);
        let x = crate::nn::gaussian([300, 4], 2.0, &mut rng);
        let s = fit_gaussian(&x);
        // oracle: E[x xᵀ] − μμᵀ, rescaled to the unbiased denominator
        let n = x.rows() as f64;
        for a in 0..4 {
            for b in 0..4 {
                let (mut sa, mut sb, mut sab) = (0.0f64, 0.0f64, 0.0f64);
                for i in 0..x.rows() {
                    let (va, vb) = (x.row(i)[a] as f64, x.row(i)[b] as f64);
                    sa += va;
                    sb += vb;
                    sab += va * vb;
                }
                let c = (sab / n - (sa / n) * (sb / n)) * n / (n - 1.0);
                assert!((s.cov[(a, b)] - c).abs() < 1e-9, "{a}{b}");
            }
        }
    }

    #[test]
    #[should_panic(expected = "at least two rows")]
    fn fit_gaussian_rejects_single_row() {
        fit_gaussian(&Tensor::from_rows(&[vec![1.0]]));
    }

    #[test]
    fn matrix_sqrt_examples() {
        let i = DMatrix::<f64>::identity(3, 3);
        assert!((matrix_sqrt_spd(&i) - &i).amax() < 1e-12);
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 9.0]));
        let r = matrix_sqrt_spd(&d);
        assert!((r - DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 3.0]))).amax() < 1e-12);
    }

    #[test]
    #[should_panic(expected = "not symmetric")]
    fn matrix_sqrt_rejects_asymmetry() {
        matrix_sqrt_spd(&DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]));
    }

    #[test]
    fn frechet_closed_forms() {
        let a = stats_1d(0.0, 1.0);
        assert!(frechet_distance(&a, &a).abs() < 1e-9);
        assert!((frechet_distance(&a, &stats_1d(3.0, 1.0)) - 9.0).abs() < 1e-5);
        let mk = |d: Vec<f64>| GaussianStats {
            mean: DVector::zeros(2),
            cov: DMatrix::from_diagonal(&DVector::from_vec(d)),
            n: 10,
        };
        let f = frechet_distance(&mk(vec![1.0, 4.0]), &mk(vec![1.0, 1.0]));
        assert!((f - 1.0).abs() < 1e-5, "{f}");
    }

    #[test]
    fn toy_fid_shift() {
        let mut rng = LabRng::seed(3);
        let real = crate::nn::gaussian([4000, 2], 1.0, &mut rng);
        assert!(toy_fid(&real, &real, FeatureSpace::Raw) < 1e-9);
        let shifted = |dx: f32| {
            let mut t = real.clone();
            t.data_mut().chunks_mut(2).for_each(|r| r[0] += dx);
            t
        };
        let f3 = toy_fid(&real, &shifted(3.0), FeatureSpace::Raw);
        assert!((f3 - 9.0).abs() < 1e-4, "{f3}");
        assert!(toy_fid(&real, &shifted(5.0), FeatureSpace::Raw) > f3);
    }

    #[test]
    fn intra_fid_cases() {
        let mut rng = LabRng::seed(8);
        let x = crate::nn::gaussian([600, 2], 1.0, &mut rng);
        let y: Vec<usize> = (0..600).map(|i| i % 3).collect();
        let same = intra_fid((&x, &y), (&x, &y), 3, FeatureSpace::Raw).unwrap();
        assert!(same.per_class.iter().all(|v| v.abs() < 1e-9));
        let mut collapsed = x.clone();
        for i in (0..600).filter(|i| i % 3 == 1) {
            collapsed.data_mut()[2 * i] *= 0.05;
            collapsed.data_mut()[2 * i + 1] *= 0.05;
        }
        let r = intra_fid((&x, &y), (&collapsed, &y), 3, FeatureSpace::Raw).unwrap();
        assert!(r.per_class[1] > r.per_class[0] && r.per_class[1] > r.per_class[2]);
        let one = vec![0usize; 600];
        let single = intra_fid((&x, &one), (&collapsed, &one), 1, FeatureSpace::Raw).unwrap();
        assert!((single.mean - toy_fid(&x, &collapsed, FeatureSpace::Raw)).abs() < 1e-12);
        assert!(intra_fid((&x, &y), (&x.select_rows(&[0, 1, 2]), &[0, 1, 2]), 3, FeatureSpace::Raw).is_none());
    }

    #[test]
    fn inception_like_score_cases() {
        assert!((inception_like_score(&vec![vec![0.25; 4]; 10]) - 1.0).abs() < 1e-12);
        let onehot: Vec<Vec<f64>> = (0..8).map(|i| (0..4).map(|k| (k == i % 4) as u8 as f64).collect()).collect();
        assert!((inception_like_score(&onehot) - 4.0).abs() < 1e-12);
        let mut rng = LabRng::seed(4);
        let probs: Vec<Vec<f64>> = (0..20)
            .map(|_| {
                let raw: Vec<f32> = (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect();
                softmax(&raw)
            })
            .collect();
        // oracle: explicit double loop
        let mut marg = [0.0f64; 5];
        for p in &probs {
            for k in 0..5 {
                marg[k] += p[k] / 20.0;
            }
        }
        let mut kl = 0.0;
        for p in &probs {
            for k in 0..5 {
                kl += p[k] * (p[k].ln() - marg[k].ln()) / 20.0;
            }
        }
        assert!((inception_like_score(&probs) - kl.exp()).abs() < 1e-10);
    }

    #[test]
    fn accuracy_counting() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]), 1.0);
        let labels = [0, 1, 1, 2, 1, 0];
        assert_eq!(accuracy(&[1; 6], &labels), 0.5);
        let scores = [0.5, -0.1, 0.0, 2.0, -3.0];
        assert_eq!(positive_rate(&scores), 0.4);
    }

    #[test]
    fn spectrum_cases() {
        let mut e = Tensor::zeros([3, 5]);
        for i in 0..3 {
            e.data_mut()[i * 5 + i] = 1.0;
        }
        assert!(embedding_spectrum(&e).iter().all(|s| (s - 1.0).abs() < 1e-12));
        let u = [1.0f32, 2.0, -1.0];
        let v = [0.5f32, 0.0, 1.0, 2.0];
        let outer = Tensor::new([3, 4], u.iter().flat_map(|a| v.iter().map(move |b| a * b)).collect());
        let s = embedding_spectrum(&outer);
        let expect = (6.0f64).sqrt() * (5.25f64).sqrt();
        assert!((s[0] - expect).abs() < 1e-5);
        assert!(s[1..].iter().all(|&x| x < 1e-3));
        assert!(s.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn oracle_separates_ring() {
        let ds = Dataset::open(&DatasetSpec::default()).unwrap();
        let oracle = OracleClassifier::for_dataset(&ds, 0);
        assert!(oracle.train_accuracy >= ORACLE_TARGET_ACCURACY, "{}", oracle.train_accuracy);
        let val = ds.validation(1000, 77);
        assert!(accuracy(&oracle.predict(&val.x), &val.y) > 0.98);
        assert_eq!(oracle.features(&val.x).cols(), 64);
        assert_eq!(oracle, OracleClassifier::for_dataset(&ds, 0));
    }
}
