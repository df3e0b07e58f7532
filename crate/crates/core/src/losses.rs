//! Training objectives as differentiable functions of model outputs.
//!
//! Every objective uses batch means, so `alpha` and the margin `m` do not
//! depend on batch size. The per-sample reconstruction error `L_r` is the
//! mean over feature dimensions of the squared difference.
//!
//! Which parameters an objective trains is decided by how the bundle was
//! bound: parts bound as frozen enter the graph as constants.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::BoundBundle;

/// Per-sample reconstruction error: `[B, d] x [B, d] -> [B]`.
pub fn recon_mse(g: &mut Graph, x: Var, x_hat: Var) -> Result<Var> {
    if g.shape(x) != g.shape(x_hat) {
        return Err(Error::shape(
            "recon_mse",
            format!("{:?} vs {:?}", g.shape(x), g.shape(x_hat)),
        ));
    }
    let diff = g.sub(x_hat, x)?;
    let sq = g.square(diff)?;
    g.mean_rows(sq)
}

/// `max(0, m - value)`, elementwise. The gradient is -1 below the margin and
/// 0 at or above it.
pub fn margin_hinge(g: &mut Graph, value: Var, m: f64) -> Result<Var> {
    let gap = g.affine(value, -1.0, m)?;
    g.relu(gap)
}

pub fn margin_hinge_value(value: f64, m: f64) -> f64 {
    (m - value).max(0.0)
}

/// Nodes of one decoder-phase evaluation.
#[derive(Debug, Clone, Copy)]
pub struct DecoderTerms {
    pub objective: Var,
    /// Mean `L_r` over the source batch.
    pub recon_src: Var,
    /// Mean `L_r` over the target batch.
    pub recon_tgt: Var,
    /// Mean `[m - L_r]^+` over the target batch; absent when the target term
    /// is dropped.
    pub hinge_tgt: Option<Var>,
}

/// Decoder objective from per-sample errors:
/// `mean_s L_r + mean_t [m - L_r]^+`.
pub fn decoder_objective_from_recon(g: &mut Graph, recon_src: Var, recon_tgt: Var, m: f64) -> Result<DecoderTerms> {
    let src = g.mean(recon_src)?;
    let tgt = g.mean(recon_tgt)?;
    let hinge = margin_hinge(g, recon_tgt, m)?;
    let hinge = g.mean(hinge)?;
    let objective = g.add(src, hinge)?;
    Ok(DecoderTerms {
        objective,
        recon_src: src,
        recon_tgt: tgt,
        hinge_tgt: Some(hinge),
    })
}

fn per_sample_recon(g: &mut Graph, bound: &BoundBundle, x: Var) -> Result<Var> {
    let z = bound.feature_extract(g, x)?;
    let x_hat = bound.reconstruct(g, z)?;
    recon_mse(g, x, x_hat)
}

fn require_batch(g: &Graph, x: Var, what: &'static str) -> Result<()> {
    if g.shape(x).first().copied().unwrap_or(0) == 0 {
        return Err(Error::EmptyBatch(what));
    }
    Ok(())
}

/// Max-margin decoder objective: reconstruct source samples, push target
/// reconstruction error up to the margin `m`. Bind only the decoder as
/// trainable.
pub fn decoder_objective(g: &mut Graph, bound: &BoundBundle, src_x: Var, tgt_x: Var, m: f64) -> Result<DecoderTerms> {
    require_batch(g, src_x, "decoder_objective")?;
    require_batch(g, tgt_x, "decoder_objective")?;
    let rs = per_sample_recon(g, bound, src_x)?;
    let rt = per_sample_recon(g, bound, tgt_x)?;
    decoder_objective_from_recon(g, rs, rt, m)
}

/// Decoder objective with the target term dropped: mean source `L_r` only.
/// The target error is still evaluated for logging but is not on the
/// objective's path.
pub fn source_recon_objective(g: &mut Graph, bound: &BoundBundle, src_x: Var, tgt_x: Var) -> Result<DecoderTerms> {
    require_batch(g, src_x, "source_recon_objective")?;
    require_batch(g, tgt_x, "source_recon_objective")?;
    let rs = per_sample_recon(g, bound, src_x)?;
    let rt = per_sample_recon(g, bound, tgt_x)?;
    let src = g.mean(rs)?;
    let tgt = g.mean(rt)?;
    Ok(DecoderTerms {
        objective: src,
        recon_src: src,
        recon_tgt: tgt,
        hinge_tgt: None,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct ExtractorTerms {
    pub objective: Var,
    pub task_nll: Var,
    /// Mean target `L_r` (`L_e`).
    pub recon_tgt: Var,
}

/// `task_nll + alpha * recon_tgt`. With `alpha == 0` the objective is the
/// task term itself, not a sum with zero.
pub fn extractor_objective_from_terms(g: &mut Graph, task_nll: Var, recon_tgt: Var, alpha: f64) -> Result<Var> {
    if alpha == 0.0 {
        return Ok(task_nll);
    }
    let adv = g.scale(recon_tgt, alpha)?;
    g.add(task_nll, adv)
}

/// Source negative log-likelihood of the predictor on extracted features.
pub fn task_nll(g: &mut Graph, bound: &BoundBundle, src_x: Var, src_y: &[usize]) -> Result<Var> {
    require_batch(g, src_x, "task_nll")?;
    let z = bound.feature_extract(g, src_x)?;
    let logits = bound.predict(g, z)?;
    g.nll_loss(logits, src_y)
}

/// Extractor/predictor objective: source task loss plus `alpha` times the
/// mean target reconstruction error. Bind the extractor and predictor as
/// trainable and the decoder as frozen.
pub fn extractor_objective(
    g: &mut Graph,
    bound: &BoundBundle,
    src_x: Var,
    src_y: &[usize],
    tgt_x: Var,
    alpha: f64,
) -> Result<ExtractorTerms> {
    if alpha < 0.0 {
        return Err(Error::InvalidConfig(format!("alpha must be >= 0, got {alpha}")));
    }
    require_batch(g, tgt_x, "extractor_objective")?;
    let nll = task_nll(g, bound, src_x, src_y)?;
    let rt = per_sample_recon(g, bound, tgt_x)?;
    let recon_tgt = g.mean(rt)?;
    let objective = extractor_objective_from_terms(g, nll, recon_tgt, alpha)?;
    Ok(ExtractorTerms {
        objective,
        task_nll: nll,
        recon_tgt,
    })
}

/// Domain-classifier cross-entropy with a gradient-reversal boundary at `z`.
///
/// Source is labeled 0 and target 1. Minimizing `domain_loss` trains the
/// discriminator to separate the domains, while the extractor (upstream of
/// the reversal) receives `-lambda` times the gradient that would have
/// reached `z`.
pub fn dat_losses(g: &mut Graph, bound: &BoundBundle, z_src: Var, z_tgt: Var, lambda: f64) -> Result<Var> {
    if lambda < 0.0 {
        return Err(Error::InvalidConfig(format!("lambda must be >= 0, got {lambda}")));
    }
    let (ns, nt) = (g.shape(z_src)[0], g.shape(z_tgt)[0]);
    if ns == 0 || nt == 0 {
        return Err(Error::EmptyBatch("dat_losses"));
    }
    let rs = g.reverse_grad(z_src, lambda)?;
    let rt = g.reverse_grad(z_tgt, lambda)?;
    let ds = bound.discriminate(g, rs)?;
    let dt = bound.discriminate(g, rt)?;
    let ls = g.bce_with_logits(ds, &vec![0.0; ns])?;
    let lt = g.bce_with_logits(dt, &vec![1.0; nt])?;
    let total = (ns + nt) as f64;
    let ls = g.scale(ls, ns as f64 / total)?;
    let lt = g.scale(lt, nt as f64 / total)?;
    g.add(ls, lt)
}

/// Domain label read off the decoder: 1 when `[m - L_r]^+ > m / 2`
/// (reconstructed well, source-like), else 0. For `m = 1` this is
/// `ceil([1 - L_r]^+ - 0.5)`; the tie at `L_r = m / 2` goes to 0.
pub fn decoder_domain_label(recon_error: f64, m: f64) -> u8 {
    u8::from(margin_hinge_value(recon_error, m) > m / 2.0)
}

/// Scalar losses observed during one training step. Entries a method does
/// not compute are `None`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossValues {
    /// Source negative log-likelihood.
    pub task_nll: f64,
    /// Mean source `L_r` (decoder phase).
    pub recon_src: Option<f64>,
    /// Mean target `L_r` as seen by the extractor (`L_e`).
    pub recon_tgt: Option<f64>,
    /// Mean target hinge `[m - L_r]^+`.
    pub hinge_tgt: Option<f64>,
    /// Decoder objective value; the batch estimate of `V`.
    pub decoder_objective: Option<f64>,
    /// Extractor adversarial term, mean target `L_r`; the batch estimate of
    /// `U`.
    pub extractor_adv: Option<f64>,
    /// Domain-classifier cross-entropy `L_d` (DAT only).
    pub dat_domain: Option<f64>,
}

impl LossValues {
    /// Every value present, for divergence checks.
    pub fn present(&self) -> impl Iterator<Item = (&'static str, f64)> {
        [
            ("task_nll", Some(self.task_nll)),
            ("recon_src", self.recon_src),
            ("recon_tgt", self.recon_tgt),
            ("hinge_tgt", self.hinge_tgt),
            ("decoder_objective", self.decoder_objective),
            ("extractor_adv", self.extractor_adv),
            ("dat_domain", self.dat_domain),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.map(|v| (k, v)))
    }
}
