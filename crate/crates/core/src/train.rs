//! Alternating-step training for every loss variant.
//!
//! One iteration is `d_steps_per_g` critic updates followed by one generator
//! update; the step counter counts generator updates. Each player advances
//! its own spectral vectors and batch-norm statistics only during its own
//! step, and sees the other player's parameters as constants.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::data::{labeled_count, sample_latent, split_labels, Batch, Dataset, DatasetSpec, EpochSampler};
use crate::error::{Error, Result};
use crate::losses::{d_losses, g_losses, pseudo_label, LossBreakdown, LossVariant};
use crate::metrics::{Evaluator, MetricsReport, OracleClassifier};
use crate::models::{Arch, CriticNet, GeneratorNet, HeadMode};
use crate::nn::{Adam, AdamConfig, BnMode, Checkpoint, Module};
use crate::par;
use crate::rng::{LabRng, STREAM_EPOCH, STREAM_INIT, STREAM_TRAIN};
use crate::tensor::{Tape, Tensor, Var};

/// Labeled fraction used by semi-supervised variants when unset.
pub const DEFAULT_LABELED_FRACTION: f32 = 0.1;
/// Pool size per class used by semi-supervised variants when unset.
pub const DEFAULT_SSL_POOL_PER_CLASS: usize = 1000;

/// Complete experiment description. `None` fields resolve per variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub loss_variant: LossVariant,
    pub dataset: DatasetSpec,
    /// 2 for ACGAN and ACGAN_SSL, 1 otherwise.
    pub d_steps_per_g: Option<u32>,
    pub lr_g: f32,
    /// 5e-4 for ACGAN_SSL, 4e-4 otherwise.
    pub lr_d: Option<f32>,
    pub adam_beta1: f32,
    pub adam_beta2: f32,
    pub lambda: f32,
    pub batch_size: usize,
    pub total_steps: u64,
    pub eval_interval: u64,
    pub seed: u64,
    /// Semi-supervised variants only; 0.1 when unset.
    pub labeled_fraction: Option<f32>,
    /// Finite pool size per class. Semi-supervised variants default to 1000;
    /// otherwise unset means fresh draws every step.
    pub pool_per_class: Option<usize>,
    pub z_dim: usize,
    /// MHShared only: hinge-only training before this step.
    pub switch_step: Option<u64>,
    /// Derived from the variant when unset.
    pub head_mode: Option<HeadMode>,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub feature_dim: usize,
    pub spectral_norm: bool,
    pub n_eval: usize,
    pub eval_seed: u64,
    /// Checkpoint every this many steps; 0 keeps only best and final.
    pub checkpoint_every: u64,
    /// Run on a single worker thread.
    pub deterministic: bool,
    pub output_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss_variant: LossVariant::Mhgan,
            dataset: DatasetSpec::default(),
            d_steps_per_g: None,
            lr_g: 1e-4,
            lr_d: None,
            adam_beta1: 0.0,
            adam_beta2: 0.9,
            lambda: 0.1,
            batch_size: 128,
            total_steps: 20_000,
            eval_interval: 500,
            seed: 0,
            labeled_fraction: None,
            pool_per_class: None,
            z_dim: 16,
            switch_step: None,
            head_mode: None,
            hidden_width: 64,
            hidden_layers: 3,
            feature_dim: 64,
            spectral_norm: true,
            n_eval: 4096,
            eval_seed: 1234,
            checkpoint_every: 5000,
            deterministic: true,
            output_dir: PathBuf::from("runs/mhgan"),
        }
    }
}

fn bad(key: &str, reason: impl Into<String>) -> Error {
    Error::config(key, reason)
}

impl TrainConfig {
    pub fn d_steps(&self) -> u32 {
        self.d_steps_per_g.unwrap_or_else(|| self.loss_variant.default_d_steps())
    }

    pub fn lr_d(&self) -> f32 {
        self.lr_d.unwrap_or_else(|| self.loss_variant.default_lr_d())
    }

    pub fn head(&self) -> HeadMode {
        self.head_mode.unwrap_or_else(|| self.loss_variant.default_head_mode())
    }

    pub fn labeled(&self) -> Option<f32> {
        self.loss_variant.is_ssl().then(|| self.labeled_fraction.unwrap_or(DEFAULT_LABELED_FRACTION))
    }

    pub fn pool(&self) -> Option<usize> {
        if self.loss_variant.is_ssl() {
            Some(self.pool_per_class.unwrap_or(DEFAULT_SSL_POOL_PER_CLASS))
        } else {
            self.pool_per_class
        }
    }

    pub fn arch(&self, data_dim: usize, classes: usize) -> Arch {
        Arch {
            data_dim,
            classes,
            z_dim: self.z_dim,
            hidden_width: self.hidden_width,
            hidden_layers: self.hidden_layers,
            feature_dim: self.feature_dim,
            spectral: self.spectral_norm,
        }
    }

    /// Checks everything that does not need the dataset.
    pub fn validate(&self) -> Result<()> {
        let v = self.loss_variant;
        if self.d_steps() < 1 {
            return Err(bad("d_steps_per_g", "must be at least 1"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(bad("lambda", "must be a finite non-negative number"));
        }
        for (key, lr) in [("lr_g", self.lr_g), ("lr_d", self.lr_d())] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(bad(key, "must be positive"));
            }
        }
        for (key, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(bad(key, "must lie in [0, 1)"));
            }
        }
        let min_batch = if v.is_ssl() { 4 } else { 2 };
        if self.batch_size < min_batch {
            return Err(bad("batch_size", format!("must be at least {min_batch}")));
        }
        if self.eval_interval < 1 {
            return Err(bad("eval_interval", "must be at least 1"));
        }
        for (key, n) in [("z_dim", self.z_dim), ("hidden_width", self.hidden_width), ("hidden_layers", self.hidden_layers), ("feature_dim", self.feature_dim)] {
            if n < 1 {
                return Err(bad(key, "must be at least 1"));
            }
        }
        if self.n_eval < 2 {
            return Err(bad("n_eval", "must be at least 2"));
        }
        match (v.is_ssl(), self.labeled_fraction) {
            (false, Some(_)) => return Err(bad("labeled_fraction", "only applies to semi-supervised variants")),
            (true, Some(f)) if !(f > 0.0 && f < 1.0) => {
                return Err(bad("labeled_fraction", "semi-supervised variants need a fraction in (0, 1)"))
            }
            _ => {}
        }
        if self.pool_per_class == Some(0) {
            return Err(bad("pool_per_class", "must be at least 1"));
        }
        let head = self.head();
        if v.aux().is_some() && head == HeadMode::ProjectionOnly {
            return Err(bad("head_mode", format!("{} needs a classifier head", v.name())));
        }
        match (v, self.switch_step) {
            (LossVariant::MhShared, None) => return Err(bad("switch_step", "MHShared needs a switch step")),
            (LossVariant::MhShared, Some(s)) if s >= self.total_steps => {
                return Err(bad("switch_step", format!("{s} is not before total_steps {}", self.total_steps)))
            }
            (LossVariant::MhShared, _) if head != HeadMode::Shared => {
                return Err(bad("head_mode", "MHShared needs the Shared head"))
            }
            (LossVariant::MhShared, _) => {}
            (_, Some(_)) => return Err(bad("switch_step", "only applies to MHShared")),
            _ => {}
        }
        Ok(())
    }
}

/// Rows that entered a critic-side classifier loss, by labeled flag.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuxAudit {
    pub labeled_rows: u64,
    pub unlabeled_rows: u64,
}

#[derive(Clone, Debug)]
struct Pool {
    data: Batch,
    labeled: EpochSampler,
    unlabeled: Option<EpochSampler>,
}

/// Full mutable training state. Reconstructible from a checkpoint plus
/// the config that produced it.
#[derive(Clone)]
pub struct Trainer {
    cfg: TrainConfig,
    variant: LossVariant,
    evaluator: Evaluator,
    pub g: GeneratorNet,
    pub d: CriticNet,
    opt_g: Adam,
    opt_d: Adam,
    rng: LabRng,
    step: u64,
    d_batches: u64,
    pool: Option<Pool>,
    best: Option<(u64, f32)>,
    audit: AuxAudit,
}

impl Trainer {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let dataset = Dataset::open(&cfg.dataset)?;
        let k = dataset.classes();
        let arch = cfg.arch(dataset.dim(), k);
        let mut init = LabRng::stream(cfg.seed, STREAM_INIT);
        let g = GeneratorNet::new(&arch, &mut init);
        let d = CriticNet::new(&arch, cfg.head(), &mut init);
        let opt_g = Adam::new(AdamConfig::new(cfg.lr_g, cfg.adam_beta1, cfg.adam_beta2), &g.params());
        let opt_d = Adam::new(AdamConfig::new(cfg.lr_d(), cfg.adam_beta1, cfg.adam_beta2), &d.params());
        let pool = match cfg.pool() {
            Some(per_class) => Some(build_pool(cfg, &dataset, per_class)?),
            None => None,
        };
        let oracle = OracleClassifier::for_dataset(&dataset, dataset.spec().seed);
        let evaluator = Evaluator::new(dataset, oracle, cfg.n_eval, cfg.eval_seed);
        Ok(Trainer {
            cfg: cfg.clone(),
            variant: cfg.loss_variant,
            evaluator,
            g,
            d,
            opt_g,
            opt_d,
            rng: LabRng::stream(cfg.seed, STREAM_TRAIN),
            step: 0,
            d_batches: 0,
            pool,
            best: None,
            audit: AuxAudit::default(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn dataset(&self) -> &Dataset {
        self.evaluator.dataset()
    }

    pub fn evaluator(&self) -> &Evaluator {
        &self.evaluator
    }

    pub fn best(&self) -> Option<(u64, f32)> {
        self.best
    }

    pub fn aux_audit(&self) -> AuxAudit {
        self.audit
    }

    /// Replaces the objective while keeping all state.
    pub fn with_variant(mut self, variant: LossVariant) -> Self {
        self.variant = variant;
        self
    }

    /// Starts the MHShared finetune at `switch_step`. Needs a Shared head.
    pub fn finetune_shared(&mut self, switch_step: u64) -> Result<()> {
        if self.d.head_mode != HeadMode::Shared {
            return Err(bad("head_mode", "finetuning the shared classifier needs the Shared head"));
        }
        if switch_step >= self.cfg.total_steps {
            return Err(bad("switch_step", format!("{switch_step} is not before total_steps {}", self.cfg.total_steps)));
        }
        self.variant = LossVariant::MhShared;
        self.cfg.loss_variant = LossVariant::MhShared;
        self.cfg.switch_step = Some(switch_step);
        Ok(())
    }

    /// Objective in force for the next iteration.
    pub fn effective_variant(&self) -> LossVariant {
        match (self.variant, self.cfg.switch_step) {
            (LossVariant::MhShared, Some(s)) if self.step < s => LossVariant::SaganHinge,
            (v, _) => v,
        }
    }

    fn real_batches(&mut self) -> (Batch, Option<Batch>) {
        let j = self.d_batches;
        self.d_batches += 1;
        match self.pool.as_mut() {
            Some(p) => {
                let lab = p.data.select(&p.labeled.batch_indices(j));
                let unl = p.unlabeled.as_mut().map(|s| p.data.select(&s.batch_indices(j)));
                (lab, unl)
            }
            None => (self.evaluator.dataset().sample_real(self.cfg.batch_size, &mut self.rng), None),
        }
    }

    fn non_finite(&self, b: &LossBreakdown) -> Error {
        Error::NonFinite { step: self.step, dump: format!("{b:?}") }
    }

    /// One critic update on a fresh real batch and detached fakes.
    pub fn train_step_d(&mut self) -> Result<LossBreakdown> {
        let variant = self.effective_variant();
        let (real, unlab) = self.real_batches();
        let classes = self.g.classes;
        let (z, yf) = sample_latent(self.cfg.batch_size, self.cfg.z_dim, classes, &mut self.rng);
        let fake = self.g.generate(&z, &yf, BnMode::Train);

        let (n_l, n_u, n_f) = (real.len(), unlab.as_ref().map_or(0, Batch::len), fake.rows());
        let n = n_l + n_u + n_f;
        let mut parts = vec![&real.x];
        if let Some(u) = &unlab {
            parts.push(&u.x);
        }
        parts.push(&fake);

        let tape = Tape::new();
        let vars = self.d.bind(&tape, true);
        let pass = self.d.pass(&vars, tape.constant(Tensor::concat_rows(&parts)), true);
        let logits = pass.has_classifier().then(|| pass.classify());

        let mut labels = real.y.clone();
        if n_u > 0 {
            let unl_rows: Vec<usize> = (n_l..n_l + n_u).collect();
            let lg = logits.expect("semi-supervised critic has a classifier");
            labels.extend(pseudo_label(&lg.with_value(|t| t.select_rows(&unl_rows))));
        }
        labels.extend(&yf);
        let scores = pass.score(&labels).reshape(&[n, 1]);
        let seg = |a: usize, b: usize| scores.slice_rows(a, b).reshape(&[b - a]);

        let aux = variant.aux().map(|kind| {
            for &flag in &real.labeled {
                if flag {
                    self.audit.labeled_rows += 1;
                } else {
                    self.audit.unlabeled_rows += 1;
                }
            }
            (kind, logits.expect("variant with aux loss has a classifier").slice_rows(0, n_l), &real.y[..])
        });
        let unl_scores = (n_u > 0).then(|| seg(n_l, n_l + n_u));
        let terms = d_losses(seg(0, n_l), seg(n_l + n_u, n), aux, unl_scores);
        let breakdown = LossBreakdown::from_d(&terms);
        if !breakdown.is_finite() {
            return Err(self.non_finite(&breakdown));
        }
        let grads = tape.backward(terms.total);
        let g: Vec<Tensor> = CriticNet::var_list(&vars).iter().map(|v| grads.wrt(*v)).collect();
        self.opt_d.step(self.d.params_mut(), &g);
        Ok(breakdown)
    }

    /// One generator update through a frozen critic.
    pub fn train_step_g(&mut self) -> Result<LossBreakdown> {
        let variant = self.effective_variant();
        let (z, y) = sample_latent(self.cfg.batch_size, self.cfg.z_dim, self.g.classes, &mut self.rng);
        let tape = Tape::new();
        let gv = self.g.bind(&tape, true);
        let fake = self.g.forward(&gv, tape.constant(z), &y, BnMode::Train, true);
        let cv = self.d.bind(&tape, false);
        let pass = self.d.pass(&cv, fake, false);
        let aux = variant.aux().map(|kind| (kind, pass.classify(), &y[..]));
        let terms = g_losses(pass.score(&y), aux, self.cfg.lambda);
        let breakdown = LossBreakdown::from_g(&terms);
        if !breakdown.is_finite() {
            return Err(self.non_finite(&breakdown));
        }
        let grads = tape.backward(terms.total);
        let g: Vec<Tensor> = GeneratorNet::var_list(&gv).iter().map(|v: &Var<'_>| grads.wrt(*v)).collect();
        self.opt_g.step(self.g.params_mut(), &g);
        Ok(breakdown)
    }

    /// `d_steps_per_g` critic steps, then one generator step.
    pub fn iteration(&mut self) -> Result<LossBreakdown> {
        let mut d = LossBreakdown::default();
        for _ in 0..self.cfg.d_steps() {
            d = self.train_step_d()?;
        }
        let g = self.train_step_g()?;
        self.step += 1;
        Ok(d.with_g(&g))
    }

    pub fn evaluate(&self) -> MetricsReport {
        self.evaluator.evaluate(self.step, &self.g, &self.d)
    }

    /// Records `fid` if it is the best so far. Returns whether it was.
    pub fn note_fid(&mut self, fid: f64) -> bool {
        let f = fid as f32;
        let better = f.is_finite() && self.best.is_none_or(|(_, b)| f < b);
        if better {
            self.best = Some((self.step, f));
        }
        better
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut tensors = Vec::new();
        self.g.named_tensors("g", &mut tensors);
        self.d.named_tensors("d", &mut tensors);
        for (name, opt) in [("opt_g", &self.opt_g), ("opt_d", &self.opt_d)] {
            for (i, (m, v)) in opt.m.iter().zip(&opt.v).enumerate() {
                tensors.push((format!("{name}.m{i}"), m.clone()));
                tensors.push((format!("{name}.v{i}"), v.clone()));
            }
        }
        let variant = LossVariant::ALL.iter().position(|&v| v == self.variant).expect("known variant") as f32;
        let (has, bs, bf) = match self.best {
            Some((s, f)) => (1.0, s as f32, f),
            None => (0.0, 0.0, 0.0),
        };
        tensors.push(("meta.variant".into(), Tensor::scalar(variant)));
        tensors.push(("meta.best".into(), Tensor::vector(vec![has, bs, bf])));
        Checkpoint { tensors, step: self.step, rng_state: self.rng.state_bytes() }
    }

    /// Rebuilds a trainer from `cfg` and the checkpoint at `path`.
    pub fn resume(cfg: &TrainConfig, path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        let err = |reason: String| Error::Checkpoint { path: path.to_path_buf(), reason };
        let mut t = Trainer::new(cfg)?;
        let lookup = |name: &str| ck.get(name).cloned();
        t.g.load_tensors("g", &lookup).map_err(err)?;
        t.d.load_tensors("d", &lookup).map_err(err)?;
        for (name, opt) in [("opt_g", &mut t.opt_g), ("opt_d", &mut t.opt_d)] {
            for i in 0..opt.m.len() {
                opt.m[i] = crate::nn::take(&lookup, &format!("{name}.m{i}"), &opt.m[i]).map_err(err)?;
                opt.v[i] = crate::nn::take(&lookup, &format!("{name}.v{i}"), &opt.v[i]).map_err(err)?;
            }
        }
        let variant = crate::nn::take(&lookup, "meta.variant", &Tensor::scalar(0.0)).map_err(err)?.item() as usize;
        if LossVariant::ALL.get(variant) != Some(&cfg.loss_variant) {
            return Err(err(format!("checkpoint was trained as variant #{variant}, config asks for {}", cfg.loss_variant.name())));
        }
        let best = crate::nn::take(&lookup, "meta.best", &Tensor::zeros([3])).map_err(err)?;
        let b = best.data();
        t.best = (b[0] == 1.0).then(|| (b[1] as u64, b[2]));
        t.step = ck.step;
        t.d_batches = ck.step * t.cfg.d_steps() as u64;
        t.opt_g.t = ck.step;
        t.opt_d.t = t.d_batches;
        t.rng = LabRng::from_state_bytes(ck.rng_state);
        Ok(t)
    }
}

fn build_pool(cfg: &TrainConfig, dataset: &Dataset, per_class: usize) -> Result<Pool> {
    let mut data = dataset.pool(per_class);
    let mut seeds = LabRng::stream(cfg.seed, STREAM_EPOCH);
    let (s_lab, s_unl) = (seeds.next_u64(), seeds.next_u64());
    let Some(fraction) = cfg.labeled() else {
        let all = (0..data.len()).collect();
        return Ok(Pool { data, labeled: EpochSampler::new(all, cfg.batch_size, s_lab), unlabeled: None });
    };
    let k = dataset.classes();
    for c in 0..k {
        let n_c = data.y.iter().filter(|&&y| y == c).count();
        let take = labeled_count(n_c, fraction);
        if take == 0 {
            return Err(bad("labeled_fraction", format!("class {c} gets no labeled examples from {n_c}")));
        }
        if take == n_c {
            return Err(bad("labeled_fraction", format!("class {c} has no unlabeled examples left")));
        }
    }
    let split = split_labels(&data.y, k, fraction, cfg.seed);
    data.labeled = split.labeled.clone();
    let half = cfg.batch_size / 2;
    Ok(Pool {
        labeled: EpochSampler::new(split.labeled_indices(), half, s_lab),
        unlabeled: Some(EpochSampler::new(split.unlabeled_indices(), cfg.batch_size - half, s_unl)),
        data,
    })
}

// ---------------------------------------------------------------------------
// Run loop

pub const CSV_HEADER: &str = "step,loss_d,loss_g,loss_d_real,loss_d_fake,loss_d_aux,loss_d_unlab,loss_g_adv,loss_g_aux,\
toy_fid,intra_fid_mean,is_analog,val_acc,self_acc,d_acc_real,proj_cls_acc,margin_diag,\
sigma1,sigma2,sigma3,sigma4,sigma5,sigma6,sigma7,sigma8";

fn field<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn csv_row(report: &MetricsReport, losses: Option<&LossBreakdown>) -> String {
    let l = losses.copied().unwrap_or_default();
    let mut cols = vec![
        report.step.to_string(),
        field(l.d_total),
        field(l.g_total),
        field(l.d_real),
        field(l.d_fake),
        field(l.d_aux),
        field(l.d_unlab),
        field(l.g_adv),
        field(l.g_aux),
        report.toy_fid.to_string(),
        field(report.intra_fid_mean),
        report.is_analog.to_string(),
        field(report.val_acc),
        field(report.self_acc),
        report.d_acc_real.to_string(),
        report.proj_cls_acc.to_string(),
        report.margin_diag.to_string(),
    ];
    cols.extend((0..8).map(|i| field(report.spectrum.get(i))));
    cols.join(",")
}

/// Everything a run produced, in memory.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub reports: Vec<MetricsReport>,
    /// Loss components at each reported step (`None` at step 0).
    pub losses: Vec<Option<LossBreakdown>>,
    pub csv: String,
    pub best: Option<(u64, f32)>,
    pub best_report: Option<MetricsReport>,
    /// Generator as it was at the best evaluation.
    pub best_generator: Option<GeneratorNet>,
    pub final_step: u64,
    pub aux_audit: AuxAudit,
}

/// Trains `cfg` from scratch. Writes artifacts when `out` is given.
pub fn run(cfg: &TrainConfig, out: Option<&Path>) -> Result<RunOutcome> {
    run_with(Trainer::new(cfg)?, out, &mut |_, _| {})
}

pub fn ckpt_name(step: u64) -> String {
    format!("ckpt_{step:08}.mhgk")
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Continues `trainer` to `total_steps`. `observer` sees the trainer after
/// every iteration. When resuming into a directory with an existing CSV,
/// rows past the trainer's step are dropped before appending.
pub fn run_with(
    mut trainer: Trainer,
    out: Option<&Path>,
    observer: &mut (dyn FnMut(&Trainer, &LossBreakdown) + Send),
) -> Result<RunOutcome> {
    let cfg = trainer.cfg.clone();
    if cfg.deterministic {
        single_threaded(move || run_loop(&mut trainer, out, observer))
    } else {
        run_loop(&mut trainer, out, observer)
    }
}

#[cfg(feature = "parallel")]
fn single_threaded<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    match rayon::ThreadPoolBuilder::new().num_threads(1).build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}

#[cfg(not(feature = "parallel"))]
fn single_threaded<R>(f: impl FnOnce() -> R) -> R {
    f()
}

struct CsvSink {
    path: PathBuf,
    file: fs::File,
}

impl CsvSink {
    fn open(dir: &Path, resume_step: u64) -> Result<Self> {
        let path = dir.join("metrics.csv");
        let mut kept = format!("{CSV_HEADER}\n");
        if resume_step > 0 {
            if let Ok(existing) = fs::read_to_string(&path) {
                for line in existing.lines().skip(1) {
                    let step: Option<u64> = line.split(',').next().and_then(|s| s.parse().ok());
                    if step.is_some_and(|s| s <= resume_step) {
                        kept.push_str(line);
                        kept.push('\n');
                    }
                }
            }
        }
        write_file(&path, kept.as_bytes())?;
        let file = fs::OpenOptions::new().append(true).open(&path).map_err(|e| Error::io(&path, e))?;
        Ok(CsvSink { path, file })
    }

    fn push(&mut self, line: &str) -> Result<()> {
        writeln!(self.file, "{line}").map_err(|e| Error::io(&self.path, e))
    }
}

fn run_loop(
    trainer: &mut Trainer,
    out: Option<&Path>,
    observer: &mut (dyn FnMut(&Trainer, &LossBreakdown) + Send),
) -> Result<RunOutcome> {
    let cfg = trainer.cfg.clone();
    let mut sink = match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let echo = serde_json::to_string_pretty(&cfg).expect("config serializes");
            write_file(&dir.join("config.json"), echo.as_bytes())?;
            Some(CsvSink::open(dir, trainer.step)?)
        }
        None => None,
    };
    let mut outcome = RunOutcome {
        reports: Vec::new(),
        losses: Vec::new(),
        csv: format!("{CSV_HEADER}\n"),
        best: trainer.best,
        best_report: None,
        best_generator: None,
        final_step: trainer.step,
        aux_audit: AuxAudit::default(),
    };
    let mut record = |trainer: &mut Trainer, losses: Option<LossBreakdown>, outcome: &mut RunOutcome| -> Result<()> {
        let report = trainer.evaluate();
        let line = csv_row(&report, losses.as_ref());
        if let Some(s) = sink.as_mut() {
            s.push(&line)?;
        }
        outcome.csv.push_str(&line);
        outcome.csv.push('\n');
        if trainer.note_fid(report.toy_fid) {
            outcome.best_report = Some(report.clone());
            outcome.best_generator = Some(trainer.g.clone());
            if let Some(dir) = out {
                trainer.to_checkpoint().save(&dir.join("best.mhgk"))?;
            }
        }
        outcome.reports.push(report);
        outcome.losses.push(losses);
        Ok(())
    };

    if trainer.step == 0 {
        record(trainer, None, &mut outcome)?;
    }
    while trainer.step < cfg.total_steps {
        let losses = trainer.iteration()?;
        observer(trainer, &losses);
        let s = trainer.step;
        if s.is_multiple_of(cfg.eval_interval) || s == cfg.total_steps {
            record(trainer, Some(losses), &mut outcome)?;
        }
        if let Some(dir) = out {
            if cfg.checkpoint_every > 0 && s.is_multiple_of(cfg.checkpoint_every) {
                trainer.to_checkpoint().save(&dir.join(ckpt_name(s)))?;
            }
        }
    }
    if let Some(dir) = out {
        trainer.to_checkpoint().save(&dir.join("final.mhgk"))?;
    }
    outcome.best = trainer.best;
    outcome.final_step = trainer.step;
    outcome.aux_audit = trainer.audit;
    Ok(outcome)
}

/// Runs independent configurations, fanned out over the worker pool.
pub fn sweep(cfgs: &[TrainConfig]) -> Vec<Result<RunOutcome>> {
    par::map(cfgs, |c| run(c, None))
}
