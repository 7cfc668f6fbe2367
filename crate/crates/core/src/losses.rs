//! Adversarial and auxiliary objectives.
//!
//! All losses are means over the batch. The hinge family uses a fixed
//! margin of 1. The multi-class hinge is the Crammer–Singer form
//! `max(0, 1 − C_y + max_{k≠y} C_k)`.

use serde::{Deserialize, Serialize};

use crate::models::HeadMode;
use crate::tensor::{Tape, Tensor, Var};

/// Training objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossVariant {
    /// Projection critic with the plain hinge loss.
    #[serde(rename = "SAGAN_Hinge")]
    SaganHinge,
    /// Hinge loss plus multi-hinge auxiliary classifier.
    #[serde(rename = "MHGAN")]
    Mhgan,
    /// Hinge loss plus cross-entropy auxiliary classifier.
    #[serde(rename = "ACGAN")]
    Acgan,
    #[serde(rename = "MHGAN_SSL")]
    MhganSsl,
    #[serde(rename = "ACGAN_SSL")]
    AcganSsl,
    /// Multi-hinge through the projection embedding (no separate head).
    #[serde(rename = "MHShared")]
    MhShared,
}

/// Classifier loss used by a variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AuxLoss {
    MultiHinge,
    CrossEntropy,
}

impl LossVariant {
    pub const ALL: [LossVariant; 6] = [
        LossVariant::SaganHinge,
        LossVariant::Mhgan,
        LossVariant::Acgan,
        LossVariant::MhganSsl,
        LossVariant::AcganSsl,
        LossVariant::MhShared,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossVariant::SaganHinge => "SAGAN_Hinge",
            LossVariant::Mhgan => "MHGAN",
            LossVariant::Acgan => "ACGAN",
            LossVariant::MhganSsl => "MHGAN_SSL",
            LossVariant::AcganSsl => "ACGAN_SSL",
            LossVariant::MhShared => "MHShared",
        }
    }

    pub fn aux(self) -> Option<AuxLoss> {
        match self {
            LossVariant::SaganHinge => None,
            LossVariant::Mhgan | LossVariant::MhganSsl | LossVariant::MhShared => Some(AuxLoss::MultiHinge),
            LossVariant::Acgan | LossVariant::AcganSsl => Some(AuxLoss::CrossEntropy),
        }
    }

    pub fn is_ssl(self) -> bool {
        matches!(self, LossVariant::MhganSsl | LossVariant::AcganSsl)
    }

    pub fn default_head_mode(self) -> HeadMode {
        match self {
            LossVariant::SaganHinge => HeadMode::ProjectionOnly,
            LossVariant::MhShared => HeadMode::Shared,
            _ => HeadMode::Aux,
        }
    }

    pub fn default_d_steps(self) -> u32 {
        match self {
            LossVariant::Acgan | LossVariant::AcganSsl => 2,
            _ => 1,
        }
    }

    pub fn default_lr_d(self) -> f32 {
        match self {
            LossVariant::AcganSsl => 5e-4,
            _ => 4e-4,
        }
    }
}

/// `mean(max(0, 1 − D(x, y)))` over real pairs.
pub fn hinge_d_real(scores: Var<'_>) -> Var<'_> {
    scores.neg().add_scalar(1.0).relu().mean()
}

/// `mean(max(0, 1 + D(G(z, y), y)))` over generated pairs.
pub fn hinge_d_fake(scores: Var<'_>) -> Var<'_> {
    scores.add_scalar(1.0).relu().mean()
}

/// `−mean(D(G(z, y), y))`.
pub fn hinge_g(scores: Var<'_>) -> Var<'_> {
    scores.mean().neg()
}

/// Crammer–Singer multi-class hinge over `[n, K]` logits.
pub fn multi_hinge<'t>(logits: Var<'t>, labels: &[usize]) -> Var<'t> {
    let k = logits.shape()[1];
    assert!(k >= 2, "multi-hinge needs K >= 2 (no competitor class for K = {k})");
    let true_aff = logits.pick(labels);
    let (rival, _) = logits.max_rows_excluding(Some(labels));
    (rival - true_aff).add_scalar(1.0).relu().mean()
}

/// Mean negative log-softmax of the true class. The log is guarded as
/// `log(max(u, 1e-12))`.
pub fn cross_entropy<'t>(logits: Var<'t>, labels: &[usize]) -> Var<'t> {
    let tape = logits.tape();
    let shape = logits.shape();
    let (n, k) = (shape[0], shape[1]);
    let row_max = logits.with_value(|l| (0..n).map(|i| l.row(i).iter().cloned().fold(f32::MIN, f32::max)).collect());
    let row_max = tape.constant(Tensor::new([n, 1], row_max));
    let spread = row_max.matmul(tape.constant(Tensor::full([1, k], 1.0)));
    let shifted = logits - spread;
    let lse = shifted.exp().sum_axis(1).log_guarded(1e-12);
    (lse - shifted.pick(labels)).mean()
}

pub fn aux_loss<'t>(kind: AuxLoss, logits: Var<'t>, labels: &[usize]) -> Var<'t> {
    match kind {
        AuxLoss::MultiHinge => multi_hinge(logits, labels),
        AuxLoss::CrossEntropy => cross_entropy(logits, labels),
    }
}

/// Hard pseudo-labels `argmax_k C_k(x)`, ties to the lowest class.
pub fn pseudo_label(logits: &Tensor) -> Vec<usize> {
    logits.argmax_rows()
}

/// Multi-hinge evaluated on projection scores `D(x, k)`. Logged only.
pub fn margin_diagnostic(proj_scores: &Tensor, labels: &[usize]) -> f32 {
    let tape = Tape::new();
    multi_hinge(tape.constant(proj_scores.clone()), labels).item()
}

/// Discriminator-side loss terms on a tape.
#[derive(Clone, Copy, Debug)]
pub struct DTerms<'t> {
    pub real: Var<'t>,
    pub fake: Var<'t>,
    pub aux: Option<Var<'t>>,
    pub unlab: Option<Var<'t>>,
    pub total: Var<'t>,
}

/// Generator-side loss terms on a tape.
#[derive(Clone, Copy, Debug)]
pub struct GTerms<'t> {
    pub adv: Var<'t>,
    pub aux: Option<Var<'t>>,
    pub total: Var<'t>,
}

/// Critic objective.
///
/// Supervised: `L_real + L_fake + L_aux`. When unlabeled scores are
/// present the real side is averaged: `(L_real + L_unlab)/2 + L_fake + L_aux`.
/// `aux` carries classifier logits and labels of *labeled* real rows only.
pub fn d_losses<'t>(
    real_scores: Var<'t>,
    fake_scores: Var<'t>,
    aux: Option<(AuxLoss, Var<'t>, &[usize])>,
    unlab_scores: Option<Var<'t>>,
) -> DTerms<'t> {
    let real = hinge_d_real(real_scores);
    let fake = hinge_d_fake(fake_scores);
    let aux = aux.map(|(kind, logits, labels)| aux_loss(kind, logits, labels));
    let unlab = unlab_scores.map(hinge_d_real);
    let mut total = match unlab {
        Some(u) => (real + u).mul_scalar(0.5) + fake,
        None => real + fake,
    };
    if let Some(a) = aux {
        total = total + a;
    }
    DTerms { real, fake, aux, unlab, total }
}

/// Generator objective `L_G + λ L_Gaux`. At `λ = 0` the auxiliary term is
/// logged but left out of the graph, so the update is the plain hinge one.
pub fn g_losses<'t>(fake_scores: Var<'t>, aux: Option<(AuxLoss, Var<'t>, &[usize])>, lambda: f32) -> GTerms<'t> {
    assert!(lambda >= 0.0, "λ must be non-negative");
    let adv = hinge_g(fake_scores);
    let aux = aux.map(|(kind, logits, labels)| aux_loss(kind, logits, labels));
    let total = match aux {
        Some(a) if lambda > 0.0 => adv + a.mul_scalar(lambda),
        _ => adv,
    };
    GTerms { adv, aux, total }
}

/// Full supervised multi-hinge objective for both players.
#[allow(clippy::too_many_arguments)]
pub fn mh_losses<'t>(
    d_scores_real: Var<'t>,
    d_scores_fake: Var<'t>,
    cls_logits_real: Var<'t>,
    cls_logits_fake: Var<'t>,
    labels_real: &[usize],
    labels_fake: &[usize],
    lambda: f32,
) -> (DTerms<'t>, GTerms<'t>) {
    let d = d_losses(d_scores_real, d_scores_fake, Some((AuxLoss::MultiHinge, cls_logits_real, labels_real)), None);
    let g = g_losses(d_scores_fake, Some((AuxLoss::MultiHinge, cls_logits_fake, labels_fake)), lambda);
    (d, g)
}

/// Semi-supervised objective. The unlabeled rows are scored at their
/// pseudo-labels by the caller; no classifier term touches them.
#[allow(clippy::too_many_arguments)]
pub fn ssl_losses<'t>(
    kind: AuxLoss,
    d_scores_real: Var<'t>,
    d_scores_unlab: Var<'t>,
    d_scores_fake: Var<'t>,
    cls_logits_real: Var<'t>,
    cls_logits_fake: Var<'t>,
    labels_real: &[usize],
    labels_fake: &[usize],
    lambda: f32,
) -> (DTerms<'t>, GTerms<'t>) {
    let d = d_losses(d_scores_real, d_scores_fake, Some((kind, cls_logits_real, labels_real)), Some(d_scores_unlab));
    let g = g_losses(d_scores_fake, Some((kind, cls_logits_fake, labels_fake)), lambda);
    (d, g)
}

/// Cross-entropy counterpart of [`ssl_losses`].
#[allow(clippy::too_many_arguments)]
pub fn ac_ssl_losses<'t>(
    d_scores_real: Var<'t>,
    d_scores_unlab: Var<'t>,
    d_scores_fake: Var<'t>,
    cls_logits_real: Var<'t>,
    cls_logits_fake: Var<'t>,
    labels_real: &[usize],
    labels_fake: &[usize],
    lambda: f32,
) -> (DTerms<'t>, GTerms<'t>) {
    ssl_losses(
        AuxLoss::CrossEntropy,
        d_scores_real,
        d_scores_unlab,
        d_scores_fake,
        cls_logits_real,
        cls_logits_fake,
        labels_real,
        labels_fake,
        lambda,
    )
}

/// Logged scalar components of one training step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub d_real: Option<f32>,
    pub d_fake: Option<f32>,
    pub d_aux: Option<f32>,
    pub d_unlab: Option<f32>,
    pub g_adv: Option<f32>,
    pub g_aux: Option<f32>,
    pub d_total: Option<f32>,
    pub g_total: Option<f32>,
}

impl LossBreakdown {
    pub fn from_d(t: &DTerms<'_>) -> Self {
        LossBreakdown {
            d_real: Some(t.real.item()),
            d_fake: Some(t.fake.item()),
            d_aux: t.aux.map(|v| v.item()),
            d_unlab: t.unlab.map(|v| v.item()),
            d_total: Some(t.total.item()),
            ..Default::default()
        }
    }

    pub fn from_g(t: &GTerms<'_>) -> Self {
        LossBreakdown {
            g_adv: Some(t.adv.item()),
            g_aux: t.aux.map(|v| v.item()),
            g_total: Some(t.total.item()),
            ..Default::default()
        }
    }

    /// D-side fields from `self`, G-side fields from `g`.
    pub fn with_g(self, g: &LossBreakdown) -> Self {
        LossBreakdown { g_adv: g.g_adv, g_aux: g.g_aux, g_total: g.g_total, ..self }
    }

    pub fn is_finite(&self) -> bool {
        [self.d_real, self.d_fake, self.d_aux, self.d_unlab, self.g_adv, self.g_aux, self.d_total, self.g_total]
            .iter()
            .flatten()
            .all(|v| v.is_finite())
    }

    /// `d_total` recomputed from the logged components.
    pub fn d_combination(&self) -> Option<f32> {
        let real = self.d_real?;
        let side = match self.d_unlab {
            Some(u) => 0.5 * (real + u),
            None => real,
        };
        Some(side + self.d_fake? + self.d_aux.unwrap_or(0.0))
    }

    /// `g_total` recomputed from the logged components.
    pub fn g_combination(&self, lambda: f32) -> Option<f32> {
        Some(self.g_adv? + lambda * self.g_aux.unwrap_or(0.0))
    }
}
