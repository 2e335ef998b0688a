//! The partially disentangling fusion network.
//!
//! Per utterance and modality the network extracts a shared feature `g`
//! (one encoder for all modalities) and a specific feature `h` (one encoder
//! per modality). The cosine of the angle between them is measured and
//! also predicted by a small tanh head. Orthogonal projection refinement
//! removes the part of `h` explained by that angle and runs the shared
//! features of a conversation through a per-modality self-attention
//! encoder. The refined `[ĝ, ĥ]` of the three modalities are concatenated
//! and classified.

mod checkpoint;
mod params;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointError};
pub use params::{Affine, AngleHead, AttentionLayer, Classifier, Encoder, ModelParams};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Graph, Mat, Tensor, TensorError, NORM_EPS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    Audio,
    Text,
    Visual,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Audio, Modality::Text, Modality::Visual];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn tag(self) -> &'static str {
        match self {
            Modality::Audio => "a",
            Modality::Text => "t",
            Modality::Visual => "v",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Audio => "audio",
            Modality::Text => "text",
            Modality::Visual => "visual",
        }
    }

    /// The two other modalities, in canonical order.
    pub fn others(self) -> [Modality; 2] {
        match self {
            Modality::Audio => [Modality::Text, Modality::Visual],
            Modality::Text => [Modality::Audio, Modality::Visual],
            Modality::Visual => [Modality::Audio, Modality::Text],
        }
    }

    /// All six ordered pairs `(m, s)` with `m != s`.
    pub fn ordered_pairs() -> [(Modality, Modality); 6] {
        use Modality::*;
        [
            (Audio, Text),
            (Audio, Visual),
            (Text, Audio),
            (Text, Visual),
            (Visual, Audio),
            (Visual, Text),
        ]
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("modality inputs disagree: {0}")]
    InputShape(String),
    #[error("the classifier needs all three modalities, got {0}")]
    MissingModality(usize),
    #[error("invalid model dimensions: {0}")]
    InvalidDims(String),
}

/// Architecture sizes. The parameter count is a pure function of these.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Feature width of each modality and of `g`, `h`.
    pub d: usize,
    /// Self-attention layers per context encoder.
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    /// Classifier hidden width.
    pub d_c: usize,
    pub num_classes: usize,
}

/// Largest of 4, 2, 1 dividing `d`.
pub fn default_heads(d: usize) -> usize {
    [4, 2, 1].into_iter().find(|&h| d.is_multiple_of(h)).unwrap_or(1)
}

impl ModelDims {
    /// Defaults: 2 layers, `default_heads(d)` heads, `d_ff = 4d`, `d_c = 2d`.
    pub fn new(d: usize, num_classes: usize) -> Self {
        Self {
            d,
            layers: 2,
            heads: default_heads(d),
            d_ff: 4 * d,
            d_c: 2 * d,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::InvalidDims(msg));
        if self.d == 0 || self.d_ff == 0 || self.d_c == 0 {
            return bad(format!("widths must be positive: {self:?}"));
        }
        if self.num_classes == 0 {
            return bad("num_classes must be positive".into());
        }
        if self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return bad(format!("{} heads do not divide d = {}", self.heads, self.d));
        }
        Ok(())
    }

    /// Closed-form parameter count:
    ///
    /// ```text
    /// shared + specific   4 · 2(d² + d)
    /// angle head          2d + 1
    /// context             3L · (4(d² + d) + 2·d·d_ff + d_ff + d)
    /// classifier          6d·d_c + d_c + d_c² + d_c + d_c·K + K
    /// ```
    pub fn param_count(&self) -> usize {
        let ModelDims {
            d,
            layers,
            d_ff,
            d_c,
            num_classes: k,
            ..
        } = *self;
        let encoders = 4 * 2 * (d * d + d);
        let head = 2 * d + 1;
        let context = 3 * layers * (4 * (d * d + d) + 2 * d * d_ff + d_ff + d);
        let classifier = 6 * d * d_c + d_c + d_c * d_c + d_c + d_c * k + k;
        encoders + head + context + classifier
    }
}

/// How OPR removes redundancy from the specific feature.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OprMode {
    /// `ĥ = (1 − cosθ)·h`.
    #[default]
    Scale,
    /// `ĥ = h − (‖h‖ cosθ)·g/‖g‖`, orthogonal to `g`.
    Reject,
}

impl std::str::FromStr for OprMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "scale" => Ok(Self::Scale),
            "reject" => Ok(Self::Reject),
            _ => Err(format!("unknown opr mode `{s}` (expected scale|reject)")),
        }
    }
}

impl std::fmt::Display for OprMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Scale => "scale",
            Self::Reject => "reject",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardOptions {
    pub opr_enabled: bool,
    pub opr_mode: OprMode,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self {
            opr_enabled: true,
            opr_mode: OprMode::Scale,
        }
    }
}

type Result<T, E = ModelError> = std::result::Result<T, E>;

pub fn affine<'g>(x: &Tensor<'g>, layer: &Affine<Tensor<'g>>) -> Result<Tensor<'g>, TensorError> {
    x.matmul(&layer.weight)?.add_row_bias(&layer.bias)
}

/// `affine₂(relu(affine₁(x)))`, row by row.
pub fn encode<'g>(x: &Tensor<'g>, encoder: &Encoder<Tensor<'g>>) -> Result<Tensor<'g>, TensorError> {
    let hidden = affine(x, &encoder.first)?.relu();
    affine(&hidden, &encoder.second)
}

/// Shared features; the same encoder serves every modality.
pub fn shared_encode<'g>(x: &Tensor<'g>, params: &ModelParams<Tensor<'g>>) -> Result<Tensor<'g>, TensorError> {
    encode(x, &params.shared)
}

pub fn specific_encode<'g>(
    x: &Tensor<'g>,
    params: &ModelParams<Tensor<'g>>,
    modality: Modality,
) -> Result<Tensor<'g>, TensorError> {
    encode(x, params.specific(modality))
}

/// `tanh(W·[g, h]ᵀ + b)` per row, as an `N × 1` column.
pub fn predict_angle<'g>(
    g: &Tensor<'g>,
    h: &Tensor<'g>,
    head: &AngleHead<Tensor<'g>>,
) -> Result<Tensor<'g>, TensorError> {
    let joined = Tensor::hconcat(&[*g, *h])?;
    let w = head.weight.transpose();
    Ok(joined.matmul(&w)?.add_row_bias(&head.bias)?.tanh())
}

/// Redundancy removal from the specific features `h` given the actual
/// cosines `cos_theta` (`N × 1`) between each row of `h` and `g`.
pub fn opr_refine<'g>(
    h: &Tensor<'g>,
    cos_theta: &Tensor<'g>,
    g: &Tensor<'g>,
    mode: OprMode,
) -> Result<Tensor<'g>, TensorError> {
    match mode {
        OprMode::Scale => h.sub(&h.mul_col(cos_theta)?),
        OprMode::Reject => {
            let g_norm = g.row_dot(g)?.sqrt()?;
            if let Some(row) = g_norm.with_value(|n| n.data().iter().position(|&v| v <= NORM_EPS)) {
                return Err(TensorError::Degenerate {
                    op: "opr_refine",
                    row,
                    norm: g_norm.with_value(|n| n.get(row, 0)),
                });
            }
            let h_norm = h.row_dot(h)?.sqrt()?;
            let coef = h_norm.mul(cos_theta)?.div(&g_norm)?;
            h.sub(&g.mul_col(&coef)?)
        }
    }
}

/// Multi-head self-attention stack over the rows of `x` (one row per
/// utterance). Each layer is attention + residual followed by a ReLU
/// feed-forward + residual. No positional signal is added, so the map is
/// equivariant under row permutations.
pub fn context_encode<'g>(
    x: &Tensor<'g>,
    layers: &[AttentionLayer<Tensor<'g>>],
    heads: usize,
) -> Result<Tensor<'g>, TensorError> {
    let d = x.cols();
    let head_dim = d / heads;
    let inv_scale = 1.0 / (head_dim as f64).sqrt();
    let mut x = *x;
    for layer in layers {
        let q = affine(&x, &layer.query)?;
        let k = affine(&x, &layer.key)?;
        let v = affine(&x, &layer.value)?;
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = q.slice_cols(h * head_dim, head_dim)?;
            let kh = k.slice_cols(h * head_dim, head_dim)?;
            let vh = v.slice_cols(h * head_dim, head_dim)?;
            let weights = qh.matmul(&kh.transpose())?.scale(inv_scale).softmax_rows();
            outs.push(weights.matmul(&vh)?);
        }
        let attended = affine(&Tensor::hconcat(&outs)?, &layer.output)?;
        let x1 = x.add(&attended)?;
        let ff = affine(&affine(&x1, &layer.ff_in)?.relu(), &layer.ff_out)?;
        x = x1.add(&ff)?;
    }
    Ok(x)
}

/// Raw logits from the refined features of all three modalities
/// (`N × 2d` each, audio/text/visual order).
pub fn classify<'g>(parts: &[Tensor<'g>], classifier: &Classifier<Tensor<'g>>) -> Result<Tensor<'g>> {
    if parts.len() != 3 {
        return Err(ModelError::MissingModality(parts.len()));
    }
    let joined = Tensor::hconcat(parts)?;
    let z = affine(&joined, &classifier.fc)?;
    let hidden = affine(&z, &classifier.hidden)?.relu();
    Ok(affine(&hidden, &classifier.out)?)
}

/// Every intermediate of one modality, rows indexed by utterance.
#[derive(Clone, Copy, Debug)]
pub struct ModalityOutputs<'g> {
    pub g: Tensor<'g>,
    pub h: Tensor<'g>,
    /// Actual cosine between `g` and `h` (`N × 1`).
    pub cos_theta: Tensor<'g>,
    /// Predicted cosine from the angle head (`N × 1`).
    pub cos_theta_hat: Tensor<'g>,
    pub h_refined: Tensor<'g>,
    pub g_context: Tensor<'g>,
    /// `[ĝ, ĥ]`, or `[g, h]` with OPR disabled.
    pub x_hat: Tensor<'g>,
}

#[derive(Clone, Debug)]
pub struct Forward<'g> {
    pub modalities: [ModalityOutputs<'g>; 3],
    cos_phi: [[Option<Tensor<'g>>; 3]; 3],
    pub logits: Tensor<'g>,
}

impl<'g> Forward<'g> {
    pub fn modality(&self, m: Modality) -> &ModalityOutputs<'g> {
        &self.modalities[m.index()]
    }

    /// Cross-modal cosine between `g_m` and `g_s` per utterance. Panics
    /// when `m == s`.
    pub fn cos_phi(&self, m: Modality, s: Modality) -> Tensor<'g> {
        self.cos_phi[m.index()][s.index()].expect("cos_phi needs two distinct modalities")
    }

    /// Mean of `cos_phi(m, s)` over the two `s != m`.
    pub fn cos_phi_mean(&self, m: Modality) -> Result<Tensor<'g>, TensorError> {
        let [s1, s2] = m.others();
        Ok(self.cos_phi(m, s1).add(&self.cos_phi(m, s2))?.scale(0.5))
    }

    pub fn shared(&self) -> [Tensor<'g>; 3] {
        self.modalities.map(|o| o.g)
    }

    pub fn num_utterances(&self) -> usize {
        self.logits.rows()
    }

    pub fn snapshot(&self) -> DisentangledBatch {
        let column = |t: &Tensor<'g>| t.value().into_data();
        let modalities = self.modalities.map(|o| ModalitySnapshot {
            g: o.g.value(),
            h: o.h.value(),
            cos_theta: column(&o.cos_theta),
            cos_theta_hat: column(&o.cos_theta_hat),
            h_refined: o.h_refined.value(),
            g_context: o.g_context.value(),
            x_hat: o.x_hat.value(),
        });
        let mut cos_phi: [[Option<Vec<f64>>; 3]; 3] = Default::default();
        for (m, s) in Modality::ordered_pairs() {
            cos_phi[m.index()][s.index()] = Some(column(&self.cos_phi(m, s)));
        }
        DisentangledBatch {
            modalities,
            cos_phi,
            logits: self.logits.value(),
        }
    }
}

/// Plain-value copy of a [`Forward`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModalitySnapshot {
    pub g: Mat,
    pub h: Mat,
    pub cos_theta: Vec<f64>,
    pub cos_theta_hat: Vec<f64>,
    pub h_refined: Mat,
    pub g_context: Mat,
    pub x_hat: Mat,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DisentangledBatch {
    pub modalities: [ModalitySnapshot; 3],
    pub cos_phi: [[Option<Vec<f64>>; 3]; 3],
    pub logits: Mat,
}

impl DisentangledBatch {
    pub fn modality(&self, m: Modality) -> &ModalitySnapshot {
        &self.modalities[m.index()]
    }

    pub fn cos_phi(&self, m: Modality, s: Modality) -> &[f64] {
        self.cos_phi[m.index()][s.index()]
            .as_deref()
            .expect("distinct modalities")
    }
}

fn check_inputs(inputs: &[Mat], d: usize) -> Result<usize> {
    if inputs.len() != 3 {
        return Err(ModelError::MissingModality(inputs.len()));
    }
    let n = inputs[0].rows();
    for (m, x) in Modality::ALL.iter().zip(inputs) {
        if x.rows() != n || x.cols() != d {
            return Err(ModelError::InputShape(format!(
                "{} features are {}x{}, expected {}x{}",
                m.name(),
                x.rows(),
                x.cols(),
                n,
                d
            )));
        }
    }
    if n == 0 {
        return Err(ModelError::InputShape("conversation has no utterances".into()));
    }
    Ok(n)
}

/// Shared and specific features only, per modality.
pub fn encode_all<'g>(
    graph: &'g Graph,
    params: &ModelParams<Tensor<'g>>,
    inputs: &[Mat],
) -> Result<[(Tensor<'g>, Tensor<'g>); 3]> {
    check_inputs(inputs, params.dims.d)?;
    let mut out = Vec::with_capacity(3);
    for m in Modality::ALL {
        let x = graph.constant(inputs[m.index()].clone());
        let g = shared_encode(&x, params)?;
        let h = specific_encode(&x, params, m)?;
        out.push((g, h));
    }
    Ok([out[0], out[1], out[2]])
}

/// Full forward pass over one conversation. `inputs` holds the audio,
/// text and visual feature matrices, each `N × d`.
pub fn forward<'g>(
    graph: &'g Graph,
    params: &ModelParams<Tensor<'g>>,
    inputs: &[Mat],
    options: ForwardOptions,
) -> Result<Forward<'g>> {
    let encoded = encode_all(graph, params, inputs)?;
    let mut outs = Vec::with_capacity(3);
    for m in Modality::ALL {
        let (g, h) = encoded[m.index()];
        let cos_theta = g.row_cosine(&h)?;
        let cos_theta_hat = predict_angle(&g, &h, &params.angle_head)?;
        let (h_refined, g_context) = if options.opr_enabled {
            (
                opr_refine(&h, &cos_theta, &g, options.opr_mode)?,
                context_encode(&g, params.context(m), params.dims.heads)?,
            )
        } else {
            (h, g)
        };
        let x_hat = Tensor::hconcat(&[g_context, h_refined])?;
        outs.push(ModalityOutputs {
            g,
            h,
            cos_theta,
            cos_theta_hat,
            h_refined,
            g_context,
            x_hat,
        });
    }
    let modalities = [outs[0], outs[1], outs[2]];
    let mut cos_phi: [[Option<Tensor<'g>>; 3]; 3] = Default::default();
    for (m, s) in Modality::ordered_pairs() {
        if m < s {
            let c = modalities[m.index()].g.row_cosine(&modalities[s.index()].g)?;
            cos_phi[m.index()][s.index()] = Some(c);
            cos_phi[s.index()][m.index()] = Some(c);
        }
    }
    let logits = classify(&modalities.map(|o| o.x_hat), &params.classifier)?;
    Ok(Forward {
        modalities,
        cos_phi,
        logits,
    })
}
