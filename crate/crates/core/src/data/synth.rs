//! Synthetic conversations with known shared and modality-specific factors.
//!
//! Every class `c` owns a shared code `z_c ~ N(0, I)` and, per modality, a
//! specific mean `S_{m,c} ~ N(0, I)`. An utterance of class `c` gets
//! `s_m = S_{m,c} + N(0, I)` and features
//!
//! ```text
//! x_m = ρ_s · A_m z_c + ρ_p · B_m s_m + σ · ε,    ε ~ N(0, I)
//! ```
//!
//! where `A_m`, `B_m` are random orthonormal `d × d` maps fixed by the seed.

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Conversation, ConversationSet, DataError, Result};
use crate::rng::{stream_rng, Stream};
use crate::tensor::Mat;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub num_conversations: usize,
    pub utterances_per_conversation: usize,
    pub d: usize,
    pub num_classes: usize,
    /// `ρ_s`
    pub shared_strength: f64,
    /// `ρ_p`
    pub specific_strength: f64,
    /// `σ`
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_conversations: 100,
            utterances_per_conversation: 8,
            d: 16,
            num_classes: 4,
            shared_strength: 0.6,
            specific_strength: 0.3,
            noise_std: 0.1,
            seed: 1,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(DataError::Invalid(msg));
        if self.num_conversations == 0 || self.utterances_per_conversation == 0 {
            return bad("num_conversations and utterances_per_conversation must be positive".into());
        }
        if self.d == 0 || self.num_classes == 0 {
            return bad("d and num_classes must be positive".into());
        }
        for (name, v) in [
            ("shared_strength", self.shared_strength),
            ("specific_strength", self.specific_strength),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} = {v} must lie in [0, 1]"));
            }
        }
        if self.shared_strength + self.specific_strength > 1.0 + 1e-12 {
            return bad(format!(
                "shared_strength + specific_strength = {} must not exceed 1",
                self.shared_strength + self.specific_strength
            ));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise_std = {} must be a finite value >= 0", self.noise_std));
        }
        Ok(())
    }
}

/// Generating factors, kept for diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthTruth {
    /// `z_c`, one row per class.
    pub shared_codes: Mat,
    /// `S_{m,c}` per modality, one row per class.
    pub specific_means: [Mat; 3],
    /// `A_m`
    pub shared_maps: [Mat; 3],
    /// `B_m`
    pub specific_maps: [Mat; 3],
    /// Drawn `s_m` per conversation, `N × d` per modality.
    pub specific_codes: Vec<[Mat; 3]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Synthetic {
    pub set: ConversationSet,
    pub truth: SynthTruth,
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Mat::from_vec(rows, cols, data).expect("shape")
}

fn orthonormal(rng: &mut ChaCha8Rng, d: usize) -> Mat {
    let g = gaussian(rng, d, d);
    let q = DMatrix::from_row_slice(d, d, g.data()).qr().q();
    Mat::from_vec(d, d, q.transpose().as_slice().to_vec()).expect("shape")
}

/// `out += scale · map · code` for a column code stored as a row slice.
fn mix_into(out: &mut [f64], map: &Mat, code: &[f64], scale: f64) {
    for (r, o) in out.iter_mut().enumerate() {
        *o += scale * map.row(r).iter().zip(code).map(|(a, b)| a * b).sum::<f64>();
    }
}

pub fn synth_generate(spec: &SynthSpec) -> Result<Synthetic> {
    spec.validate()?;
    let (d, k, n) = (spec.d, spec.num_classes, spec.utterances_per_conversation);
    let mut rng = stream_rng(spec.seed, Stream::Synth);
    let shared_codes = gaussian(&mut rng, k, d);
    let specific_means = [(); 3].map(|_| gaussian(&mut rng, k, d));
    let shared_maps = [(); 3].map(|_| orthonormal(&mut rng, d));
    let specific_maps = [(); 3].map(|_| orthonormal(&mut rng, d));

    let width = spec.num_conversations.to_string().len();
    let mut conversations = Vec::with_capacity(spec.num_conversations);
    let mut specific_codes = Vec::with_capacity(spec.num_conversations);
    for ci in 0..spec.num_conversations {
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let mut features = [(); 3].map(|_| Mat::zeros(n, d));
        let mut codes = [(); 3].map(|_| Mat::zeros(n, d));
        for (i, &c) in labels.iter().enumerate() {
            for m in 0..3 {
                let code = codes[m].row_mut(i);
                for (j, v) in code.iter_mut().enumerate() {
                    *v = specific_means[m].get(c, j) + rng.sample::<f64, _>(StandardNormal);
                }
                let row = features[m].row_mut(i);
                for v in row.iter_mut() {
                    *v = spec.noise_std * rng.sample::<f64, _>(StandardNormal);
                }
                mix_into(row, &shared_maps[m], shared_codes.row(c), spec.shared_strength);
                mix_into(row, &specific_maps[m], codes[m].row(i), spec.specific_strength);
            }
        }
        conversations.push(Conversation::new(format!("conv_{ci:0width$}"), features, labels)?);
        specific_codes.push(codes);
    }
    let class_names = (0..k).map(|c| format!("class_{c}")).collect();
    Ok(Synthetic {
        set: ConversationSet::new(d, class_names, conversations)?,
        truth: SynthTruth {
            shared_codes,
            specific_means,
            shared_maps,
            specific_maps,
            specific_codes,
        },
    })
}
