//! Training objectives.
//!
//! * CEN: contrastive alignment of shared features across modalities.
//! * AAC: RMSE between measured and predicted shared/specific cosines.
//! * CSR: hinge keeping the shared/specific angle wider than the
//!   cross-modal shared angle.
//! * ARE: `γ·AAC + μ·CSR`.
//! * Cross-entropy on the classifier logits.
//! * Two rigid-orthogonality baselines that replace ARE in ablations.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Forward, Modality};
use crate::tensor::{Axis, Mat, ReduceKind, Tensor, TensorError, NORM_EPS};

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{0}: empty input")]
    Empty(&'static str),
    #[error("{loss}: {detail}")]
    Shape { loss: &'static str, detail: String },
    #[error("label {label} outside [0, {num_classes})")]
    LabelOutOfRange { label: usize, num_classes: usize },
}

type Result<T> = std::result::Result<T, LossError>;

/// Weights of the joint objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// CEN weight.
    pub alpha: f64,
    /// ARE (or baseline constraint) weight.
    pub beta: f64,
    /// AAC weight inside ARE.
    pub gamma: f64,
    /// CSR weight inside ARE.
    pub mu: f64,
    /// Cross-entropy weight.
    pub eta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.09,
            gamma: 0.5,
            mu: 0.005,
            eta: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> std::result::Result<(), String> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("mu", self.mu),
            ("eta", self.eta),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(format!("loss weight {name} = {v} must be a finite value >= 0"));
            }
        }
        Ok(())
    }
}

/// Which angular constraint couples shared and specific features.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Constraint {
    /// Adaptive angle optimization (ARE).
    #[default]
    Aao,
    /// Squared Frobenius norm of `GᵀH`.
    OrtNorm,
    /// Mean squared cosine between `g` and `h`.
    OrtCos,
    None,
}

impl std::str::FromStr for Constraint {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "aao" => Ok(Self::Aao),
            "ort_norm" => Ok(Self::OrtNorm),
            "ort_cos" => Ok(Self::OrtCos),
            "none" => Ok(Self::None),
            _ => Err(format!("unknown constraint `{s}` (expected aao|ort_norm|ort_cos|none)")),
        }
    }
}

impl std::fmt::Display for Constraint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Aao => "aao",
            Self::OrtNorm => "ort_norm",
            Self::OrtCos => "ort_cos",
            Self::None => "none",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OrthoKind {
    OrtNorm,
    OrtCos,
}

/// `1` where `(k, j)` is a negative for anchor `(m, i)`: a different
/// utterance with a different label. Rows and columns are indexed
/// modality-major, `m·N + i`.
pub fn negative_mask(labels: &[usize]) -> Mat {
    let n = labels.len();
    let mut mask = Mat::zeros(3 * n, 3 * n);
    for m in 0..3 {
        for i in 0..n {
            for k in 0..3 {
                for j in 0..n {
                    if j != i && labels[j] != labels[i] {
                        mask.set(m * n + i, k * n + j, 1.0);
                    }
                }
            }
        }
    }
    mask
}

fn unit_rows<'g>(x: &Tensor<'g>) -> Result<Tensor<'g>> {
    let norms = x.row_dot(x)?.sqrt()?;
    if let Some(row) = norms.with_value(|n| n.data().iter().position(|&v| v <= NORM_EPS)) {
        return Err(TensorError::Degenerate {
            op: "cen normalize",
            row,
            norm: norms.with_value(|n| n.get(row, 0)),
        }
        .into());
    }
    let ones = x.graph().constant(Mat::filled(x.rows(), 1, 1.0));
    Ok(x.mul_col(&ones.div(&norms)?)?)
}

/// Single-anchor contrastive term
/// `−log(e^p / (e^p + Σ_n e^{n}))` for a `1 × 1` positive dot and a
/// `1 × k` row of negative dots (`k ≥ 1`).
pub fn anchor_term<'g>(positive: &Tensor<'g>, negatives: &Tensor<'g>) -> Result<Tensor<'g>> {
    if negatives.cols() == 0 {
        return Err(LossError::Empty("anchor_term negatives"));
    }
    let shift = negatives.with_value(|v| v.data().iter().copied().fold(f64::NEG_INFINITY, f64::max));
    let lse = negatives
        .add_scalar(-shift)
        .exp()
        .sum()
        .log()?
        .add_scalar(shift);
    Ok(lse.sub(positive)?.softplus())
}

/// Consistency enhancement loss over one batch (one conversation).
///
/// For every anchor `g_{m,i}` and each of its two positives `g_{s,i}`,
/// `s ≠ m`, the term is `−log(e^{p} / (e^{p} + Σ_{Ω} e^{n}))` where `p` is the
/// anchor/positive dot and `Ω` holds the shared features of every
/// modality for utterances with a different label. Anchors with empty
/// `Ω` contribute 0. Returns the mean over all `6N` terms.
///
/// With `normalize` the dots are taken between L2-normalized rows.
pub fn cen_loss<'g>(shared: &[Tensor<'g>; 3], labels: &[usize], normalize: bool) -> Result<Tensor<'g>> {
    let n = labels.len();
    if n == 0 {
        return Err(LossError::Empty("cen"));
    }
    for g in shared {
        if g.rows() != n {
            return Err(LossError::Shape {
                loss: "cen",
                detail: format!("{} labels for {} shared rows", n, g.rows()),
            });
        }
    }
    let graph = shared[0].graph();
    let mut stacked = Tensor::vconcat(shared)?;
    if normalize {
        stacked = unit_rows(&stacked)?;
    }
    let dots = stacked.matmul(&stacked.transpose())?;
    let mask = negative_mask(labels);

    // Per-anchor shift: largest negative dot (0 when there is none).
    let mut shift = vec![0.0; 3 * n];
    let mut has_negatives = vec![0.0; 3 * n];
    dots.with_value(|d| {
        for r in 0..3 * n {
            let mut best = f64::NEG_INFINITY;
            for c in 0..3 * n {
                if mask.get(r, c) > 0.0 {
                    best = best.max(d.get(r, c));
                }
            }
            if best.is_finite() {
                shift[r] = best;
                has_negatives[r] = 1.0;
            }
        }
    });
    let mut shifted = Mat::zeros(3 * n, 3 * n);
    for (r, &s) in shift.iter().enumerate() {
        shifted.row_mut(r).fill(s);
    }
    let masked = dots
        .sub(&graph.constant(shifted))?
        .exp()
        .mul(&graph.constant(mask))?
        .reduce(ReduceKind::Sum, Axis::Rows);
    // Anchors without negatives get a dummy 1 inside the log; their terms
    // are masked to 0 below.
    let filler = graph.constant(Mat::column(has_negatives.iter().map(|h| 1.0 - h).collect()));
    let log_neg = masked
        .add(&filler)?
        .log()?
        .add(&graph.constant(Mat::column(shift)))?;
    let active = graph.constant(Mat::column(has_negatives));

    let block = |t: &Tensor<'g>, m: Modality, cols: usize| t.slice(m.index() * n, n, 0, cols);
    let d = stacked.cols();
    let mut terms = Vec::with_capacity(6);
    for (m, s) in Modality::ordered_pairs() {
        let positive = block(&stacked, m, d)?.row_dot(&block(&stacked, s, d)?)?;
        let term = block(&log_neg, m, 1)?.sub(&positive)?.softplus();
        terms.push(term.mul(&block(&active, m, 1)?)?);
    }
    Ok(Tensor::vconcat(&terms)?.mean())
}

fn stack<'g>(parts: &[Tensor<'g>], loss: &'static str) -> Result<Tensor<'g>> {
    if parts.is_empty() {
        return Err(LossError::Empty(loss));
    }
    let t = Tensor::vconcat(parts)?;
    if t.rows() == 0 {
        return Err(LossError::Empty(loss));
    }
    Ok(t)
}

fn same_len(loss: &'static str, a: &Tensor<'_>, b: &Tensor<'_>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(LossError::Shape {
            loss,
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    Ok(())
}

/// `sqrt(mean((cosθ − cosθ̂)²))` pooled over every column given.
pub fn aac_loss<'g>(cos_theta: &[Tensor<'g>], cos_theta_hat: &[Tensor<'g>]) -> Result<Tensor<'g>> {
    let actual = stack(cos_theta, "aac")?;
    let predicted = stack(cos_theta_hat, "aac")?;
    same_len("aac", &actual, &predicted)?;
    Ok(actual.sub(&predicted)?.square().mean().sqrt()?)
}

/// `mean(max(cosφ − cosθ, 0))`.
pub fn csr_loss<'g>(cos_phi: &[Tensor<'g>], cos_theta: &[Tensor<'g>]) -> Result<Tensor<'g>> {
    let phi = stack(cos_phi, "csr")?;
    let theta = stack(cos_theta, "csr")?;
    same_len("csr", &phi, &theta)?;
    Ok(phi.sub(&theta)?.relu().mean())
}

pub fn are_loss<'g>(aac: &Tensor<'g>, csr: &Tensor<'g>, gamma: f64, mu: f64) -> Result<Tensor<'g>> {
    Ok(aac.scale(gamma).add(&csr.scale(mu))?)
}

/// Mean negative log-likelihood of `labels` under row-wise softmax of
/// `logits` (`N × K`).
pub fn cross_entropy<'g>(logits: &Tensor<'g>, labels: &[usize]) -> Result<Tensor<'g>> {
    let (n, k) = logits.shape();
    if n != labels.len() {
        return Err(LossError::Shape {
            loss: "cross_entropy",
            detail: format!("{} labels for {n} logit rows", labels.len()),
        });
    }
    if n == 0 {
        return Err(LossError::Empty("cross_entropy"));
    }
    let mut onehot = Mat::zeros(n, k);
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(LossError::LabelOutOfRange {
                label: y,
                num_classes: k,
            });
        }
        onehot.set(i, y, 1.0);
    }
    let picked = logits
        .log_softmax_rows()
        .mul(&logits.graph().constant(onehot))?
        .sum();
    Ok(picked.scale(-1.0 / n as f64))
}

/// Joint objective. During warm-up only `η·CE` is used; otherwise
/// `α·CEN + β·ARE + η·CE`, where an absent term contributes nothing.
pub fn total_loss<'g>(
    cen: Option<&Tensor<'g>>,
    are: Option<&Tensor<'g>>,
    ce: &Tensor<'g>,
    weights: &LossWeights,
    warmup_active: bool,
) -> Result<Tensor<'g>> {
    let mut total = ce.scale(weights.eta);
    if warmup_active {
        return Ok(total);
    }
    if let Some(cen) = cen {
        total = cen.scale(weights.alpha).add(&total)?;
    }
    if let Some(are) = are {
        total = total.add(&are.scale(weights.beta))?;
    }
    Ok(total)
}

/// Rigid-orthogonality baselines.
///
/// * `OrtNorm`: `‖G_mᵀ H_m‖²_F / (N·d²)`, averaged over modalities.
/// * `OrtCos`: mean of `cos²θ` over all modality/utterance pairs.
pub fn ortho_baseline_loss<'g>(kind: OrthoKind, g: &[Tensor<'g>], h: &[Tensor<'g>]) -> Result<Tensor<'g>> {
    if g.is_empty() || g.len() != h.len() {
        return Err(LossError::Shape {
            loss: "ortho",
            detail: format!("{} shared vs {} specific blocks", g.len(), h.len()),
        });
    }
    for (a, b) in g.iter().zip(h) {
        same_len("ortho", a, b)?;
        if a.rows() == 0 {
            return Err(LossError::Empty("ortho"));
        }
    }
    match kind {
        OrthoKind::OrtNorm => {
            let mut terms = Vec::with_capacity(g.len());
            for (a, b) in g.iter().zip(h) {
                let (n, d) = a.shape();
                let cross = a.transpose().matmul(b)?;
                terms.push(cross.square().sum().scale(1.0 / (n * d * d) as f64));
            }
            Ok(Tensor::vconcat(&terms)?.mean())
        }
        OrthoKind::OrtCos => {
            let mut cos = Vec::with_capacity(g.len());
            for (a, b) in g.iter().zip(h) {
                cos.push(a.row_cosine(b)?);
            }
            Ok(Tensor::vconcat(&cos)?.square().mean())
        }
    }
}

/// Which terms enter the objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveSpec {
    pub weights: LossWeights,
    pub cen_enabled: bool,
    pub cen_normalize: bool,
    pub constraint: Constraint,
    pub aac_enabled: bool,
    pub csr_enabled: bool,
}

impl Default for ObjectiveSpec {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            cen_enabled: true,
            cen_normalize: true,
            constraint: Constraint::Aao,
            aac_enabled: true,
            csr_enabled: true,
        }
    }
}

/// Every component for one batch, plus the total that is differentiated.
/// Components are always evaluated for reporting; only the enabled ones
/// are wired into `total`.
#[derive(Clone, Debug)]
pub struct Objective<'g> {
    pub cen: Tensor<'g>,
    pub aac: Tensor<'g>,
    pub csr: Tensor<'g>,
    /// `γ·AAC + μ·CSR` over the enabled sub-terms.
    pub are: Tensor<'g>,
    pub ortho: Option<Tensor<'g>>,
    pub ce: Tensor<'g>,
    pub total: Tensor<'g>,
    /// Amount `α·CEN` adds to `total` (0 when disabled or warming up).
    pub cen_contribution: f64,
    /// Amount `β·(ARE | baseline)` adds to `total`.
    pub angular_contribution: f64,
}

impl Objective<'_> {
    /// `(name, value)` of every reported component.
    pub fn components(&self) -> Vec<(&'static str, f64)> {
        let mut out = vec![
            ("cen", self.cen.item()),
            ("aac", self.aac.item()),
            ("csr", self.csr.item()),
            ("are", self.are.item()),
            ("ce", self.ce.item()),
        ];
        if let Some(o) = &self.ortho {
            out.push(("ortho", o.item()));
        }
        out.push(("total", self.total.item()));
        out
    }
}

pub fn objective<'g>(
    forward: &Forward<'g>,
    labels: &[usize],
    spec: &ObjectiveSpec,
    warmup_active: bool,
) -> Result<Objective<'g>> {
    let w = &spec.weights;
    let cen = cen_loss(&forward.shared(), labels, spec.cen_normalize)?;
    let cos_theta: Vec<Tensor<'g>> = forward.modalities.iter().map(|o| o.cos_theta).collect();
    let cos_theta_hat: Vec<Tensor<'g>> = forward.modalities.iter().map(|o| o.cos_theta_hat).collect();
    let cos_phi = Modality::ALL
        .iter()
        .map(|&m| forward.cos_phi_mean(m))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let aac = aac_loss(&cos_theta, &cos_theta_hat)?;
    let csr = csr_loss(&cos_phi, &cos_theta)?;
    let graph = cen.graph();
    let are = match (spec.aac_enabled, spec.csr_enabled) {
        (true, true) => are_loss(&aac, &csr, w.gamma, w.mu)?,
        (true, false) => aac.scale(w.gamma),
        (false, true) => csr.scale(w.mu),
        (false, false) => graph.scalar(0.0),
    };
    let g: Vec<Tensor<'g>> = forward.modalities.iter().map(|o| o.g).collect();
    let h: Vec<Tensor<'g>> = forward.modalities.iter().map(|o| o.h).collect();
    let ortho = match spec.constraint {
        Constraint::OrtNorm => Some(ortho_baseline_loss(OrthoKind::OrtNorm, &g, &h)?),
        Constraint::OrtCos => Some(ortho_baseline_loss(OrthoKind::OrtCos, &g, &h)?),
        Constraint::Aao | Constraint::None => None,
    };
    let ce = cross_entropy(&forward.logits, labels)?;

    let angular = match spec.constraint {
        Constraint::Aao if spec.aac_enabled || spec.csr_enabled => Some(are),
        Constraint::OrtNorm | Constraint::OrtCos => ortho,
        _ => None,
    };
    let cen_term = spec.cen_enabled.then_some(&cen);
    let total = total_loss(cen_term, angular.as_ref(), &ce, w, warmup_active)?;
    let active = !warmup_active;
    let cen_contribution = if active && spec.cen_enabled {
        w.alpha * cen.item()
    } else {
        0.0
    };
    let angular_contribution = match (&angular, active) {
        (Some(a), true) => w.beta * a.item(),
        _ => 0.0,
    };
    Ok(Objective {
        cen,
        aac,
        csr,
        are,
        ortho,
        ce,
        total,
        cen_contribution,
        angular_contribution,
    })
}

#[cfg(test)]
mod tests;
