//! Central finite-difference checks for every primitive, layer and loss.
//!
//! Relative error per entry is `|a − n| / max(1, |a|, |n|)`, where `a` is the
//! tape gradient and `n` the central difference. Seeded inputs are redrawn
//! until every relu argument and max-over-row gap is far from its kink.

use rand::Rng;

use crate::losses::{self, AuxLoss};
use crate::models::{Arch, CriticNet, GeneratorNet, HeadMode};
use crate::nn::spectral::{normalize_var, power_step};
use crate::nn::{gaussian, BnMode, ConditionalBatchNorm, Init, LinearLayer, Module};
use crate::par;
use crate::rng::LabRng;
use crate::tensor::{OpKind, Tape, Tensor, Var};

pub const FD_STEP: f32 = 1e-3;
pub const TOLERANCE: f64 = 1e-3;
/// Required distance from any kink, in units of the step.
const KINK_MARGIN: f32 = 4.0;
const MAX_REDRAWS: u64 = 256;

/// Scalar objective over a set of input tensors. Returns the loss and the
/// tape handles that stand for each input, in order.
pub type Objective = Box<dyn for<'t> Fn(&'t Tape, &[Tensor]) -> (Var<'t>, Vec<Var<'t>>) + Send + Sync>;

pub struct Problem {
    pub inputs: Vec<Tensor>,
    pub objective: Objective,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    Primitive,
    Layer,
    Loss,
}

impl Group {
    pub fn name(self) -> &'static str {
        match self {
            Group::Primitive => "primitive",
            Group::Layer => "layer",
            Group::Loss => "loss",
        }
    }
}

pub struct Case {
    pub name: &'static str,
    pub group: Group,
    build: Box<dyn Fn(&mut LabRng) -> Problem + Send + Sync>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradRow {
    pub name: &'static str,
    pub group: Group,
    pub max_rel_error: f64,
    pub kink_distance: f32,
    pub seed: u64,
    pub passed: bool,
}

/// Analytic-vs-numeric comparison for one problem.
pub struct Comparison {
    pub max_rel_error: f64,
    pub kink_distance: f32,
}

pub fn grad_check(problem: &Problem, h: f32, fault: Option<OpKind>) -> Comparison {
    let tape = Tape::new();
    tape.inject_fault(fault);
    let (loss, leaves) = (problem.objective)(&tape, &problem.inputs);
    assert_eq!(leaves.len(), problem.inputs.len(), "objective must return one handle per input");
    let grads = tape.backward(loss);
    let kink_distance = tape.kink_distance();

    let eval = |inputs: &[Tensor]| -> f64 {
        let t = Tape::new();
        (problem.objective)(&t, inputs).0.item() as f64
    };
    let mut worst = 0.0f64;
    let mut probe = problem.inputs.clone();
    for (i, leaf) in leaves.iter().enumerate() {
        let analytic = grads.wrt(*leaf);
        for j in 0..probe[i].len() {
            let x0 = probe[i].data()[j];
            probe[i].data_mut()[j] = x0 + h;
            let fp = eval(&probe);
            probe[i].data_mut()[j] = x0 - h;
            let fm = eval(&probe);
            probe[i].data_mut()[j] = x0;
            let numeric = (fp - fm) / (2.0 * h as f64);
            let a = analytic.data()[j] as f64;
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            worst = worst.max(rel);
        }
    }
    Comparison { max_rel_error: worst, kink_distance }
}

fn kink_clear(problem: &Problem, h: f32) -> (bool, f32) {
    let tape = Tape::new();
    (problem.objective)(&tape, &problem.inputs);
    let k = tape.kink_distance();
    (k > KINK_MARGIN * h, k)
}

impl Case {
    /// First seeded draw whose inputs are clear of kinks.
    pub fn instance(&self, base_seed: u64) -> (Problem, u64) {
        for s in 0..MAX_REDRAWS {
            let seed = base_seed.wrapping_add(s);
            let p = (self.build)(&mut LabRng::seed(seed));
            if kink_clear(&p, FD_STEP).0 {
                return (p, seed);
            }
        }
        panic!("gradcheck case `{}` found no kink-free draw in {MAX_REDRAWS} seeds", self.name);
    }

    pub fn run(&self, fault: Option<OpKind>) -> GradRow {
        let (problem, seed) = self.instance(0x6c);
        let cmp = grad_check(&problem, FD_STEP, fault);
        let passed = cmp.max_rel_error < TOLERANCE;
        GradRow { name: self.name, group: self.group, max_rel_error: cmp.max_rel_error, kink_distance: cmp.kink_distance, seed, passed }
    }
}

/// Runs every registered case. `fault` negates one backward rule.
pub fn run_suite(fault: Option<OpKind>) -> Vec<GradRow> {
    let cases = registry();
    par::map(&cases, |c| c.run(fault))
}

// ---------------------------------------------------------------------------
// Helpers

fn rand_t(rng: &mut LabRng, shape: &[usize]) -> Tensor {
    gaussian(shape.to_vec(), 1.0, rng)
}

fn labels(rng: &mut LabRng, n: usize, k: usize) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(0..k)).collect()
}

/// Fixed random linear functional, so non-scalar outputs get a scalar loss
/// with a dense gradient.
fn scalarize(v: Var<'_>) -> Var<'_> {
    let shape = v.shape();
    let n: usize = shape.iter().product();
    let mut rng = LabRng::seed(0x5ca1 + n as u64);
    let w = Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect());
    (v * v.tape().constant(w)).sum()
}

fn leaves<'t>(tape: &'t Tape, xs: &[Tensor]) -> Vec<Var<'t>> {
    xs.iter().map(|x| tape.leaf(x.clone())).collect()
}

fn positive(v: Var<'_>) -> Var<'_> {
    v.square().add_scalar(0.5)
}

macro_rules! prim {
    ($shapes:expr, |$l:ident| $body:expr) => {
        |rng: &mut LabRng| Problem {
            inputs: $shapes.iter().map(|s: &&[usize]| rand_t(rng, s)).collect(),
            objective: Box::new(|tape, xs| {
                let $l = leaves(tape, xs);
                let out = $body;
                (out, $l)
            }),
        }
    };
}

fn settle(layer: &mut LinearLayer) {
    if let Some(u) = layer.spectral_u.as_mut() {
        for _ in 0..500 {
            *u = power_step(&layer.weight, u).u;
        }
    }
}

fn small_arch() -> Arch {
    Arch { data_dim: 2, classes: 3, z_dim: 3, hidden_width: 6, hidden_layers: 2, feature_dim: 5, spectral: true }
}

fn settled_critic(mode: HeadMode, rng: &mut LabRng) -> CriticNet {
    let mut c = CriticNet::new(&small_arch(), mode, rng);
    for l in c.trunk.iter_mut().chain(std::iter::once(&mut c.psi)).chain(c.classifier.as_mut()) {
        settle(l);
    }
    c
}

fn settled_generator(rng: &mut LabRng) -> GeneratorNet {
    let mut g = GeneratorNet::new(&small_arch(), rng);
    for (fc, bn) in g.hidden.iter_mut() {
        settle(fc);
        bn.gamma = gaussian(bn.gamma.shape().to_vec(), 0.1, rng).map(|v| v + 1.0);
        bn.beta = gaussian(bn.beta.shape().to_vec(), 0.1, rng);
    }
    settle(&mut g.out);
    g
}

fn with_params<M: Module + Clone>(m: &M, xs: &[Tensor]) -> M {
    let mut m = m.clone();
    for (p, x) in m.params_mut().into_iter().zip(xs) {
        *p = x.clone();
    }
    m
}

// ---------------------------------------------------------------------------
// Layers

fn linear_case(spectral: bool) -> impl Fn(&mut LabRng) -> Problem {
    move |rng| {
        let mut layer = LinearLayer::new(4, 3, spectral, Init::He, rng);
        layer.bias = rand_t(rng, &[3]);
        settle(&mut layer);
        let x = rand_t(rng, &[5, 4]);
        let mut inputs: Vec<Tensor> = layer.params().into_iter().cloned().collect();
        inputs.push(x);
        Problem {
            inputs,
            objective: Box::new(move |tape, xs| {
                let mut l = with_params(&layer, &xs[..2]);
                let vars = l.bind(tape, true);
                let x = tape.leaf(xs[2].clone());
                let y = l.forward(&vars, x, false);
                (scalarize(y), vec![vars.weight, vars.bias, x])
            }),
        }
    }
}

fn cbn_case(mode: BnMode) -> impl Fn(&mut LabRng) -> Problem {
    move |rng| {
        let mut bn = ConditionalBatchNorm::new(3, 4);
        bn.gamma = rand_t(rng, &[3, 4]);
        bn.beta = rand_t(rng, &[3, 4]);
        bn.running_mean = rand_t(rng, &[4]).into_data();
        bn.running_var = rand_t(rng, &[4]).map(|v| v * v + 0.5).into_data();
        let y = labels(rng, 6, 3);
        let x = rand_t(rng, &[6, 4]);
        Problem {
            inputs: vec![bn.gamma.clone(), bn.beta.clone(), x],
            objective: Box::new(move |tape, xs| {
                let mut b = with_params(&bn, &xs[..2]);
                let vars = b.bind(tape, true);
                let x = tape.leaf(xs[2].clone());
                let out = b.forward(&vars, x, &y, mode, false);
                (scalarize(out), vec![vars.gamma, vars.beta, x])
            }),
        }
    }
}

fn spectral_weight(rng: &mut LabRng) -> Problem {
    let w = rand_t(rng, &[4, 3]);
    let mut u = crate::nn::linear_random_unit(4, rng);
    for _ in 0..500 {
        u = power_step(&w, &u).u;
    }
    Problem {
        inputs: vec![w],
        objective: Box::new(move |tape, xs| {
            let w = tape.leaf(xs[0].clone());
            let mut state = u.clone();
            let (wn, _) = normalize_var(w, &mut state, false);
            (scalarize(wn), vec![w])
        }),
    }
}

fn generator(rng: &mut LabRng) -> Problem {
    let g = settled_generator(rng);
    let z = rand_t(rng, &[6, 3]);
    let y = labels(rng, 6, 3);
    let mut inputs: Vec<Tensor> = g.params().into_iter().cloned().collect();
    inputs.push(z);
    let np = inputs.len() - 1;
    Problem {
        inputs,
        objective: Box::new(move |tape, xs| {
            let mut gn = with_params(&g, &xs[..np]);
            let vars = gn.bind(tape, true);
            let z = tape.leaf(xs[np].clone());
            let out = gn.forward(&vars, z, &y, BnMode::Train, false);
            let mut handles = GeneratorNet::var_list(&vars);
            handles.push(z);
            (scalarize(out), handles)
        }),
    }
}

fn critic_case(mode: HeadMode) -> impl Fn(&mut LabRng) -> Problem {
    move |rng| {
        let c = settled_critic(mode, rng);
        let x = rand_t(rng, &[5, 2]);
        let y = labels(rng, 5, 3);
        let mut inputs: Vec<Tensor> = c.params().into_iter().cloned().collect();
        inputs.push(x);
        let np = inputs.len() - 1;
        Problem {
            inputs,
            objective: Box::new(move |tape, xs| {
                let mut cn = with_params(&c, &xs[..np]);
                let vars = cn.bind(tape, true);
                let x = tape.leaf(xs[np].clone());
                let pass = cn.pass(&vars, x, false);
                let mut loss = scalarize(pass.score(&y));
                if pass.has_classifier() {
                    loss = loss + scalarize(pass.classify());
                }
                let mut handles = CriticNet::var_list(&vars);
                handles.push(x);
                (loss, handles)
            }),
        }
    }
}

/// `L_G + λ L_Gaux` back through a frozen critic into the generator.
fn generator_through_critic(rng: &mut LabRng) -> Problem {
    let g = settled_generator(rng);
    let c = settled_critic(HeadMode::Aux, rng);
    let z = rand_t(rng, &[6, 3]);
    let y = labels(rng, 6, 3);
    let inputs: Vec<Tensor> = g.params().into_iter().cloned().collect();
    Problem {
        inputs,
        objective: Box::new(move |tape, xs| {
            let mut gn = with_params(&g, xs);
            let mut cn = c.clone();
            let gv = gn.bind(tape, true);
            let cv = cn.bind(tape, false);
            let fake = gn.forward(&gv, tape.constant(z.clone()), &y, BnMode::Train, false);
            let pass = cn.pass(&cv, fake, false);
            let terms = losses::g_losses(pass.score(&y), Some((AuxLoss::MultiHinge, pass.classify(), &y)), 0.1);
            (terms.total, GeneratorNet::var_list(&gv))
        }),
    }
}

/// `L_Dunlab` through the critic at pseudo-labels fixed from the base point.
fn unlabeled_term(rng: &mut LabRng) -> Problem {
    let c = settled_critic(HeadMode::Aux, rng);
    let x = rand_t(rng, &[6, 2]);
    let pseudo = losses::pseudo_label(&c.classify(&x));
    let mut inputs: Vec<Tensor> = c.params().into_iter().cloned().collect();
    inputs.push(x);
    let np = inputs.len() - 1;
    Problem {
        inputs,
        objective: Box::new(move |tape, xs| {
            let mut cn = with_params(&c, &xs[..np]);
            let vars = cn.bind(tape, true);
            let x = tape.leaf(xs[np].clone());
            let pass = cn.pass(&vars, x, false);
            let loss = losses::hinge_d_real(pass.score(&pseudo).mul_scalar(0.3));
            let mut handles = CriticNet::var_list(&vars);
            handles.push(x);
            (loss, handles)
        }),
    }
}

/// Margin diagnostic over projection scores of a shared-head critic.
fn projection_margin(rng: &mut LabRng) -> Problem {
    let c = settled_critic(HeadMode::Shared, rng);
    let x = rand_t(rng, &[5, 2]);
    let y = labels(rng, 5, 3);
    let mut inputs: Vec<Tensor> = c.params().into_iter().cloned().collect();
    inputs.push(x);
    let np = inputs.len() - 1;
    Problem {
        inputs,
        objective: Box::new(move |tape, xs| {
            let mut cn = with_params(&c, &xs[..np]);
            let vars = cn.bind(tape, true);
            let x = tape.leaf(xs[np].clone());
            let pass = cn.pass(&vars, x, false);
            let loss = losses::multi_hinge(pass.all_classes().mul_scalar(0.5), &y);
            let mut handles = CriticNet::var_list(&vars);
            handles.push(x);
            (loss, handles)
        }),
    }
}

// ---------------------------------------------------------------------------
// Losses

fn loss_case(shapes: &'static [&'static [usize]], f: for<'t> fn(&[Var<'t>], &[usize]) -> Var<'t>) -> impl Fn(&mut LabRng) -> Problem {
    move |rng| {
        let inputs: Vec<Tensor> = shapes.iter().map(|s| rand_t(rng, s)).collect();
        let y = labels(rng, shapes[0][0], 4);
        Problem {
            inputs,
            objective: Box::new(move |tape, xs| {
                let v = leaves(tape, xs);
                (f(&v, &y), v)
            }),
        }
    }
}

const SCORES: &[&[usize]] = &[&[6]];
const LOGITS: &[&[usize]] = &[&[6, 4]];
const SUPERVISED: &[&[usize]] = &[&[6], &[6], &[6, 4], &[6, 4]];
const SEMI: &[&[usize]] = &[&[6], &[6], &[6], &[6, 4], &[6, 4]];

fn flip(y: &[usize]) -> Vec<usize> {
    y.iter().map(|&c| (c + 1) % 4).collect()
}

// ---------------------------------------------------------------------------
// Registry

macro_rules! case {
    ($name:expr, $group:expr, $build:expr) => {
        Case { name: $name, group: $group, build: Box::new($build) }
    };
}

/// Every registered check, in table order.
pub fn registry() -> Vec<Case> {
    use Group::*;
    const M34: &[&[usize]] = &[&[3, 4]];
    const M34X2: &[&[usize]] = &[&[3, 4], &[3, 4]];
    vec![
        case!("add", Primitive, prim!(M34X2, |v| scalarize(v[0] + v[1]))),
        case!("sub", Primitive, prim!(M34X2, |v| scalarize(v[0] - v[1]))),
        case!("mul", Primitive, prim!(M34X2, |v| scalarize(v[0] * v[1]))),
        case!("div", Primitive, prim!(M34X2, |v| scalarize(v[0].div(positive(v[1]))))),
        case!("matmul", Primitive, prim!([&[3usize, 4][..], &[4, 2]], |v| scalarize(v[0].matmul(v[1])))),
        case!("matmul_t", Primitive, prim!([&[3usize, 4][..], &[5, 4]], |v| scalarize(v[0].matmul_t(v[1])))),
        case!("transpose", Primitive, prim!(M34, |v| scalarize(v[0].transpose()))),
        case!("reshape", Primitive, prim!(M34, |v| scalarize(v[0].reshape(&[2, 6])))),
        case!("sum", Primitive, prim!(M34, |v| v[0].square().sum())),
        case!("mean", Primitive, prim!(M34, |v| v[0].square().mean())),
        case!("sum_axis0", Primitive, prim!(M34, |v| scalarize(v[0].sum_axis(0)))),
        case!("sum_axis1", Primitive, prim!(M34, |v| scalarize(v[0].sum_axis(1)))),
        case!("mean_axis0", Primitive, prim!(M34, |v| scalarize(v[0].mean_axis(0)))),
        case!("mean_axis1", Primitive, prim!(M34, |v| scalarize(v[0].mean_axis(1)))),
        case!("max_rows", Primitive, prim!(M34, |v| scalarize(v[0].max_rows().0))),
        case!("max_rows_excluding", Primitive, prim!(M34, |v| scalarize(v[0].max_rows_excluding(Some(&[1, 3, 0])).0))),
        case!("pick", Primitive, prim!(M34, |v| scalarize(v[0].pick(&[2, 0, 3])))),
        case!("relu", Primitive, prim!(M34, |v| scalarize(v[0].relu()))),
        case!("exp", Primitive, prim!(M34, |v| scalarize(v[0].mul_scalar(0.5).exp()))),
        case!("log", Primitive, prim!(M34, |v| scalarize(positive(v[0]).log()))),
        case!("log_guarded", Primitive, prim!(M34, |v| scalarize(positive(v[0]).log_guarded(1e-12)))),
        case!("sqrt", Primitive, prim!(M34, |v| scalarize(positive(v[0]).sqrt()))),
        case!("square", Primitive, prim!(M34, |v| scalarize(v[0].square()))),
        case!("neg", Primitive, prim!(M34, |v| scalarize(v[0].neg()))),
        case!("add_scalar", Primitive, prim!(M34, |v| scalarize(v[0].add_scalar(0.7).square()))),
        case!("mul_scalar", Primitive, prim!(M34, |v| scalarize(v[0].mul_scalar(-1.3)))),
        case!("broadcast_rows", Primitive, prim!([&[4usize][..]], |v| scalarize(v[0].broadcast_rows(3)))),
        case!("add_row", Primitive, prim!([&[3usize, 4][..], &[4]], |v| scalarize(v[0].add_row(v[1])))),
        case!("index_select", Primitive, prim!([&[4usize, 3][..]], |v| scalarize(v[0].index_select(&[2, 0, 2, 1])))),
        case!("concat_rows", Primitive, prim!([&[2usize, 3][..], &[3, 3]], |v| scalarize(Var::concat_rows(&[v[0], v[1]])))),
        case!("slice_rows", Primitive, prim!([&[5usize, 3][..]], |v| scalarize(v[0].slice_rows(1, 4)))),
        case!("div_by_scalar", Primitive, prim!([&[3usize, 4][..], &[]], |v| scalarize(v[0].div_by_scalar(positive(v[1]))))),
        case!("dot_rows", Primitive, prim!(M34X2, |v| scalarize(v[0].dot_rows(v[1])))),
        case!("linear", Layer, linear_case(false)),
        case!("linear_spectral", Layer, linear_case(true)),
        case!("spectral_weight", Layer, spectral_weight),
        case!("cond_batchnorm_train", Layer, cbn_case(BnMode::Train)),
        case!("cond_batchnorm_eval", Layer, cbn_case(BnMode::Eval)),
        case!("generator", Layer, generator),
        case!("critic_projection", Layer, critic_case(HeadMode::ProjectionOnly)),
        case!("critic_aux", Layer, critic_case(HeadMode::Aux)),
        case!("critic_shared", Layer, critic_case(HeadMode::Shared)),
        case!("hinge_d_real", Loss, loss_case(SCORES, |v, _| losses::hinge_d_real(v[0]))),
        case!("hinge_d_fake", Loss, loss_case(SCORES, |v, _| losses::hinge_d_fake(v[0]))),
        case!("hinge_g", Loss, loss_case(SCORES, |v, _| losses::hinge_g(v[0]))),
        case!("multi_hinge", Loss, loss_case(LOGITS, |v, y| losses::multi_hinge(v[0].mul_scalar(0.5), y))),
        case!("cross_entropy", Loss, loss_case(LOGITS, |v, y| losses::cross_entropy(v[0], y))),
        case!("sagan_d", Loss, loss_case(SUPERVISED, |v, _| losses::d_losses(v[0], v[1], None, None).total)),
        case!("mhgan_d", Loss, loss_case(SUPERVISED, |v, y| losses::mh_losses(v[0], v[1], v[2].mul_scalar(0.5), v[3], y, &flip(y), 0.1).0.total)),
        case!("mhgan_g", Loss, loss_case(SUPERVISED, |v, y| losses::mh_losses(v[0], v[1], v[2], v[3].mul_scalar(0.5), y, &flip(y), 0.1).1.total)),
        case!("acgan_d", Loss, loss_case(SUPERVISED, |v, y| losses::d_losses(v[0], v[1], Some((AuxLoss::CrossEntropy, v[2], y)), None).total)),
        case!("acgan_g", Loss, loss_case(SUPERVISED, |v, y| losses::g_losses(v[1], Some((AuxLoss::CrossEntropy, v[3], &flip(y))), 0.1).total)),
        case!("mhgan_ssl_d", Loss, loss_case(SEMI, |v, y| losses::ssl_losses(AuxLoss::MultiHinge, v[0], v[1], v[2], v[3].mul_scalar(0.5), v[4], y, &flip(y), 0.1).0.total)),
        case!("acgan_ssl_d", Loss, loss_case(SEMI, |v, y| losses::ac_ssl_losses(v[0], v[1], v[2], v[3], v[4], y, &flip(y), 0.1).0.total)),
        case!("unlabeled_term", Loss, unlabeled_term),
        case!("projection_margin", Loss, projection_margin),
        case!("generator_through_critic", Loss, generator_through_critic),
    ]
}

/// Plain-text table of suite results.
pub fn format_table(rows: &[GradRow]) -> String {
    let mut s = format!("{:<26} {:<10} {:>12} {:>6}\n", "case", "group", "max_rel_err", "status");
    for r in rows {
        s.push_str(&format!(
            "{:<26} {:<10} {:>12.3e} {:>6}\n",
            r.name,
            r.group.name(),
            r.max_rel_error,
            if r.passed { "pass" } else { "FAIL" }
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_names_are_unique() {
        let reg = registry();
        let mut names: Vec<&str> = reg.iter().map(|c| c.name).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), reg.len());
    }

    #[test]
    fn exact_quadratic_has_tiny_error() {
        let p = Problem {
            inputs: vec![Tensor::vector(vec![0.3, -0.8])],
            objective: Box::new(|tape, xs| {
                let v = leaves(tape, xs);
                (v[0].square().sum(), v)
            }),
        };
        assert!(grad_check(&p, FD_STEP, None).max_rel_error < 1e-4);
        assert!(grad_check(&p, FD_STEP, Some(OpKind::Square)).max_rel_error > 0.5);
    }

    #[test]
    fn clean_suite_passes() {
        let rows = run_suite(None);
        assert!(rows.iter().all(|r| r.passed), "\n{}", format_table(&rows));
    }

    #[test]
    fn flipped_relu_rule_is_caught() {
        let rows = run_suite(Some(OpKind::Relu));
        let row = |n: &str| rows.iter().find(|r| r.name == n).unwrap().passed;
        assert!(!row("relu"));
        assert!(!row("hinge_d_real"));
        assert!(row("add"));
    }
}
