//! Class-conditional toy datasets.
//!
//! Mixture datasets can be sampled without bound or materialized into a
//! fixed pool. Semi-supervised runs always use a pool, because the
//! labeled/unlabeled split is over concrete examples.

use std::f32::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{LabRng, STREAM_EPOCH, STREAM_POOL, STREAM_SPLIT};
use crate::tensor::Tensor;

fn default_spacing() -> f32 {
    2.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetKind {
    /// `k` Gaussians evenly spaced on a circle.
    RingMixture { k: usize, radius: f32, sigma: f32 },
    /// `rows × cols` Gaussians on a centered square lattice.
    GridMixture {
        rows: usize,
        cols: usize,
        sigma: f32,
        #[serde(default = "default_spacing")]
        spacing: f32,
    },
    /// `d` comma-separated floats then an integer label per line.
    CsvVectors { path: PathBuf, d: usize, k: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    #[serde(default)]
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec { kind: DatasetKind::RingMixture { k: 8, radius: 2.0, sigma: 0.05 }, seed: 0 }
    }
}

/// Examples with labels and a per-row labeled flag.
///
/// Unlabeled rows keep their true label in storage; it must never reach a
/// classifier loss.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    pub y: Vec<usize>,
    pub labeled: Vec<bool>,
}

impl Batch {
    pub fn new(x: Tensor, y: Vec<usize>, labeled: Vec<bool>) -> Self {
        assert_eq!(x.rows(), y.len(), "batch rows and labels disagree");
        assert_eq!(y.len(), labeled.len(), "batch labels and flags disagree");
        Batch { x, y, labeled }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> Batch {
        Batch {
            x: self.x.select_rows(idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            labeled: idx.iter().map(|&i| self.labeled[i]).collect(),
        }
    }
}

#[derive(Clone, Debug)]
enum Source {
    Mixture { centers: Vec<Vec<f32>>, sigma: f32 },
    Table { train: Batch, holdout: Batch },
}

/// A validated, ready-to-sample dataset.
#[derive(Clone, Debug)]
pub struct Dataset {
    spec: DatasetSpec,
    dim: usize,
    classes: usize,
    source: Source,
}

fn ring_centers(k: usize, radius: f32) -> Vec<Vec<f32>> {
    (0..k)
        .map(|c| {
            let a = 2.0 * PI * c as f32 / k as f32;
            vec![radius * a.cos(), radius * a.sin()]
        })
        .collect()
}

fn grid_centers(rows: usize, cols: usize, spacing: f32) -> Vec<Vec<f32>> {
    let off = |n: usize, i: usize| spacing * (i as f32 - (n as f32 - 1.0) / 2.0);
    (0..rows).flat_map(|r| (0..cols).map(move |c| vec![off(cols, c), off(rows, r)])).collect()
}

impl Dataset {
    pub fn open(spec: &DatasetSpec) -> Result<Self> {
        let check = |ok: bool, msg: &str| if ok { Ok(()) } else { Err(Error::Data(msg.to_string())) };
        let (dim, classes, source) = match &spec.kind {
            DatasetKind::RingMixture { k, radius, sigma } => {
                check(*k >= 2, "ring_mixture needs k >= 2")?;
                check(*sigma > 0.0, "sigma must be positive")?;
                check(radius.is_finite(), "radius must be finite")?;
                (2, *k, Source::Mixture { centers: ring_centers(*k, *radius), sigma: *sigma })
            }
            DatasetKind::GridMixture { rows, cols, sigma, spacing } => {
                check(rows * cols >= 2, "grid_mixture needs at least 2 cells")?;
                check(*sigma > 0.0, "sigma must be positive")?;
                check(*spacing > 0.0, "spacing must be positive")?;
                (2, rows * cols, Source::Mixture { centers: grid_centers(*rows, *cols, *spacing), sigma: *sigma })
            }
            DatasetKind::CsvVectors { path, d, k } => {
                check(*k >= 2, "csv_vectors needs k >= 2")?;
                check(*d >= 1, "csv_vectors needs d >= 1")?;
                let all = read_csv(path, *d, *k)?;
                let (train, holdout) = holdout_split(&all, spec.seed);
                (*d, *k, Source::Table { train, holdout })
            }
        };
        Ok(Dataset { spec: spec.clone(), dim, classes, source })
    }

    pub fn spec(&self) -> &DatasetSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Per-class means and noise scale of a mixture dataset.
    pub fn centers(&self) -> Option<(&[Vec<f32>], f32)> {
        match &self.source {
            Source::Mixture { centers, sigma } => Some((centers, *sigma)),
            Source::Table { .. } => None,
        }
    }

    /// `n` fresh draws (with replacement from the training rows for CSV data).
    pub fn sample_real(&self, n: usize, rng: &mut impl Rng) -> Batch {
        assert!(n >= 1, "sample_real needs n >= 1");
        match &self.source {
            Source::Mixture { centers, sigma } => {
                let y: Vec<usize> = (0..n).map(|_| rng.gen_range(0..self.classes)).collect();
                let x = self.mixture_points(centers, *sigma, &y, rng);
                Batch::new(x, y, vec![true; n])
            }
            Source::Table { train, .. } => {
                let idx: Vec<usize> = (0..n).map(|_| rng.gen_range(0..train.len())).collect();
                train.select(&idx)
            }
        }
    }

    /// Draws at the given labels. Mixture datasets only.
    pub fn sample_at(&self, labels: &[usize], rng: &mut impl Rng) -> Tensor {
        let (centers, sigma) = self.centers().expect("sample_at needs a mixture dataset");
        self.mixture_points(centers, sigma, labels, rng)
    }

    fn mixture_points(&self, centers: &[Vec<f32>], sigma: f32, y: &[usize], rng: &mut impl Rng) -> Tensor {
        let mut data = Vec::with_capacity(y.len() * self.dim);
        for &c in y {
            for &m in &centers[c] {
                data.push(m + sigma * rng.sample::<f32, _>(StandardNormal));
            }
        }
        Tensor::new([y.len(), self.dim], data)
    }

    /// Finite training set. Mixtures draw exactly `per_class` rows per class;
    /// CSV data returns its training rows and ignores `per_class`.
    pub fn pool(&self, per_class: usize) -> Batch {
        match &self.source {
            Source::Mixture { centers, sigma } => {
                assert!(per_class >= 1, "pool needs at least one example per class");
                let mut rng = LabRng::stream(self.spec.seed, STREAM_POOL);
                let y: Vec<usize> = (0..self.classes).flat_map(|c| std::iter::repeat_n(c, per_class)).collect();
                let x = self.mixture_points(centers, *sigma, &y, &mut rng);
                let n = y.len();
                Batch::new(x, y, vec![true; n])
            }
            Source::Table { train, .. } => train.clone(),
        }
    }

    /// Held-out real data: fresh draws under `seed` for mixtures, the fixed
    /// holdout rows for CSV data.
    pub fn validation(&self, n: usize, seed: u64) -> Batch {
        match &self.source {
            Source::Mixture { .. } => self.sample_real(n, &mut LabRng::seed(seed)),
            Source::Table { holdout, .. } => holdout.clone(),
        }
    }
}

fn holdout_split(all: &Batch, seed: u64) -> (Batch, Batch) {
    let mut idx: Vec<usize> = (0..all.len()).collect();
    idx.shuffle(&mut LabRng::stream(seed, STREAM_SPLIT ^ 0xff));
    let n_hold = (all.len() / 10).max(1).min(all.len() - 1);
    let (hold, train) = idx.split_at(n_hold);
    (all.select(train), all.select(hold))
}

fn read_csv(path: &Path, d: usize, k: usize) -> Result<Batch> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text, d, k).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Parses a headerless or single-header CSV of `d` floats and a label.
pub fn parse_csv(text: &str, d: usize, k: usize) -> Result<Batch, String> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()).peekable();
    if let Some((_, first)) = lines.peek() {
        let head = first.split(',').next().unwrap_or("").trim();
        if head.parse::<f32>().is_err() {
            lines.next();
        }
    }
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for (no, line) in lines {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != d + 1 {
            return Err(format!("line {}: expected {} fields, found {}", no + 1, d + 1, fields.len()));
        }
        for f in &fields[..d] {
            let v: f32 = f.parse().map_err(|_| format!("line {}: `{f}` is not a number", no + 1))?;
            if !v.is_finite() {
                return Err(format!("line {}: non-finite value", no + 1));
            }
            xs.push(v);
        }
        let label: usize = fields[d].parse().map_err(|_| format!("line {}: bad label `{}`", no + 1, fields[d]))?;
        if label >= k {
            return Err(format!("line {}: label {label} outside [0, {k})", no + 1));
        }
        ys.push(label);
    }
    if ys.len() < 2 {
        return Err("need at least two rows".into());
    }
    let n = ys.len();
    Ok(Batch::new(Tensor::new([n, d], xs), ys, vec![true; n]))
}

/// Latent codes `z ~ N(0, I)` and uniform labels.
pub fn sample_latent(n: usize, d_z: usize, classes: usize, rng: &mut impl Rng) -> (Tensor, Vec<usize>) {
    let z = (0..n * d_z).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    let y = (0..n).map(|_| rng.gen_range(0..classes)).collect();
    (Tensor::new([n, d_z], z), y)
}

/// Per-example labeled flags from a stratified split.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSplit {
    pub fraction: f32,
    pub seed: u64,
    pub labeled: Vec<bool>,
}

impl LabeledSplit {
    pub fn labeled_indices(&self) -> Vec<usize> {
        (0..self.labeled.len()).filter(|&i| self.labeled[i]).collect()
    }

    pub fn unlabeled_indices(&self) -> Vec<usize> {
        (0..self.labeled.len()).filter(|&i| !self.labeled[i]).collect()
    }
}

/// Labeled count for a class of `n` examples: `fraction · n` rounded.
pub fn labeled_count(n: usize, fraction: f32) -> usize {
    (fraction as f64 * n as f64).round() as usize
}

/// Flags `round(fraction · n_c)` examples of every class `c` as labeled.
pub fn split_labels(labels: &[usize], classes: usize, fraction: f32, seed: u64) -> LabeledSplit {
    assert!(fraction > 0.0 && fraction <= 1.0, "labeled fraction must lie in (0, 1]");
    let mut rng = LabRng::stream(seed, STREAM_SPLIT);
    let mut labeled = vec![false; labels.len()];
    for c in 0..classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        let take = labeled_count(members.len(), fraction);
        assert!(take >= 1, "class {c} gets no labeled examples at fraction {fraction}");
        members.shuffle(&mut rng);
        for &i in &members[..take] {
            labeled[i] = true;
        }
    }
    LabeledSplit { fraction, seed, labeled }
}

/// Shuffled-epoch minibatches over a fixed index set.
///
/// Batch `j` is a pure function of `(seed, j)`, so resuming needs only the
/// batch counter.
#[derive(Clone, Debug)]
pub struct EpochSampler {
    indices: Vec<usize>,
    seed: u64,
    batch: usize,
    cached: Option<(u64, Vec<usize>)>,
}

impl EpochSampler {
    pub fn new(indices: Vec<usize>, batch: usize, seed: u64) -> Self {
        assert!(!indices.is_empty(), "epoch sampler over an empty set");
        assert!(batch >= 1, "batch size must be positive");
        EpochSampler { indices, seed, batch, cached: None }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    fn epoch(&mut self, e: u64) -> &[usize] {
        if self.cached.as_ref().map(|(c, _)| *c) != Some(e) {
            let mut perm = self.indices.clone();
            let mut rng = LabRng::stream(self.seed.wrapping_add(e.wrapping_mul(0xD1B5_4A32_D192_ED03)), STREAM_EPOCH);
            perm.shuffle(&mut rng);
            self.cached = Some((e, perm));
        }
        &self.cached.as_ref().expect("epoch cached").1
    }

    /// Pool indices of global batch `j`.
    pub fn batch_indices(&mut self, j: u64) -> Vec<usize> {
        let n = self.indices.len() as u64;
        let start = j * self.batch as u64;
        (start..start + self.batch as u64)
            .map(|pos| {
                let (e, off) = (pos / n, (pos % n) as usize);
                self.epoch(e)[off]
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ring(sigma: f32) -> Dataset {
        Dataset::open(&DatasetSpec { kind: DatasetKind::RingMixture { k: 8, radius: 2.0, sigma }, seed: 0 }).unwrap()
    }

    #[test]
    fn degenerate_noise_hits_centers() {
        let ds = ring(1e-9);
        let b = ds.sample_real(500, &mut LabRng::seed(1));
        let (centers, _) = ds.centers().unwrap();
        for i in 0..b.len() {
            let c = &centers[b.y[i]];
            for (a, m) in b.x.row(i).iter().zip(c) {
                assert!((a - m).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn class_marginal_is_uniform() {
        let ds = ring(0.05);
        let b = ds.sample_real(100_000, &mut LabRng::seed(2));
        let mut counts = [0usize; 8];
        b.y.iter().for_each(|&y| counts[y] += 1);
        for c in counts {
            let p = c as f64 / 100_000.0;
            assert!((p - 0.125).abs() < 0.02 * 0.125, "{p}");
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let ds = ring(0.05);
        assert_eq!(ds.sample_real(16, &mut LabRng::seed(5)), ds.sample_real(16, &mut LabRng::seed(5)));
        let (z1, y1) = sample_latent(8, 4, 8, &mut LabRng::seed(9));
        let (z2, y2) = sample_latent(8, 4, 8, &mut LabRng::seed(9));
        assert_eq!((z1, y1), (z2, y2));
    }

    #[test]
    fn latent_mean_and_label_range() {
        let (z, y) = sample_latent(100_000, 2, 8, &mut LabRng::seed(3));
        for j in 0..2 {
            let m: f64 = (0..z.rows()).map(|i| z.row(i)[j] as f64).sum::<f64>() / z.rows() as f64;
            assert!(m.abs() < 0.02, "{m}");
        }
        assert!(y.iter().all(|&c| c < 8));
    }

    #[test]
    fn split_counts() {
        let ds = ring(0.05);
        let pool = ds.pool(1000);
        let all = split_labels(&pool.y, 8, 1.0, 0);
        assert!(all.labeled.iter().all(|&f| f));
        let a = split_labels(&pool.y, 8, 0.1, 0);
        let b = split_labels(&pool.y, 8, 0.1, 1);
        for c in 0..8 {
            let count = |s: &LabeledSplit| (0..pool.len()).filter(|&i| s.labeled[i] && pool.y[i] == c).count();
            assert_eq!(count(&a), 100);
            assert_eq!(count(&b), 100);
        }
        assert_ne!(a.labeled, b.labeled);
    }

    #[test]
    #[should_panic(expected = "no labeled examples")]
    fn split_rejects_empty_class() {
        split_labels(&[0, 0, 1, 1], 2, 0.1, 0);
    }

    #[test]
    fn grid_centers_are_centered() {
        let c = grid_centers(2, 3, 2.0);
        assert_eq!(c.len(), 6);
        let mx: f32 = c.iter().map(|p| p[0]).sum();
        let my: f32 = c.iter().map(|p| p[1]).sum();
        assert!(mx.abs() < 1e-6 && my.abs() < 1e-6);
        assert_eq!(c[0], vec![-2.0, -1.0]);
    }

    #[test]
    fn csv_header_detection_and_errors() {
        let b = parse_csv("x0,x1,label\n0.5,1.0,1\n-1,2,0\n", 2, 2).unwrap();
        assert_eq!(b.y, vec![1, 0]);
        assert_eq!(b.x.data(), &[0.5, 1.0, -1.0, 2.0]);
        assert_eq!(parse_csv("0.5,1.0,1\n-1,2,0\n", 2, 2).unwrap().len(), 2);
        assert!(parse_csv("0.5,1.0,3\n1,1,0\n", 2, 2).unwrap_err().contains("outside"));
        assert!(parse_csv("0.5,1\n1,1\n", 2, 2).unwrap_err().contains("expected 3 fields"));
    }

    #[test]
    fn epoch_sampler_covers_each_epoch_once() {
        let mut s = EpochSampler::new((10..30).collect(), 5, 7);
        let mut seen: Vec<usize> = (0..4).flat_map(|j| s.batch_indices(j)).collect();
        seen.sort();
        assert_eq!(seen, (10..30).collect::<Vec<_>>());
        let mut fresh = EpochSampler::new((10..30).collect(), 5, 7);
        assert_eq!(fresh.batch_indices(6), s.batch_indices(6));
    }

    #[test]
    fn spec_json_shape() {
        let spec: DatasetSpec =
            serde_json::from_str(r#"{"kind":{"type":"grid_mixture","rows":3,"cols":3,"sigma":0.1},"seed":4}"#).unwrap();
        assert_eq!(spec.kind, DatasetKind::GridMixture { rows: 3, cols: 3, sigma: 0.1, spacing: 2.0 });
        assert!(serde_json::from_str::<DatasetSpec>(r#"{"kind":{"type":"ring_mixture","k":8,"radius":2,"sigma":0.1,"x":1}}"#).is_err());
    }
}
