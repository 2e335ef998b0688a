use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::metrics::{argmax, ConfusionMatrix};
use super::{check_data, Result, TrainConfig, TrainError};
use crate::data::ConversationSet;
use crate::model::{encode_all, forward, ModelError, ModelParams, Modality};
use crate::tensor::{Graph, Mat, Tensor, NORM_EPS};

/// Angle summary of one modality, in degrees.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModalityAngles {
    pub theta_mean: f64,
    pub theta_std: f64,
    pub phi_mean: f64,
    pub phi_std: f64,
    /// Fraction of utterances with `cosφ ≥ cosθ`.
    pub csr_satisfaction: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AngleStats {
    /// Audio, text, visual.
    pub modalities: [ModalityAngles; 3],
    /// Standard deviation of θ over every (modality, utterance), degrees.
    pub theta_std: f64,
    pub cos_theta_mean: f64,
    pub cos_theta_std: f64,
    pub abs_cos_theta_mean: f64,
    /// Mean cross-modal shared cosine (pairs averaged per modality).
    pub cos_phi_mean: f64,
    pub csr_satisfaction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub weighted_f1: f64,
    pub per_class_f1: Vec<f64>,
    pub confusion: ConfusionMatrix,
    pub angles: AngleStats,
}

fn degrees(cos: f64) -> f64 {
    cos.clamp(-1.0, 1.0).acos().to_degrees()
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Forward pass over every conversation: predictions, metrics and angle
/// statistics. With OPR disabled it also checks that the classifier saw
/// exactly `[g, h]`.
pub fn evaluate(params: &ModelParams, set: &ConversationSet, config: &TrainConfig) -> Result<EvalReport> {
    check_data(set, &params.dims, "evaluation")?;
    let options = config.forward_options();
    let mut confusion = ConfusionMatrix::new(set.num_classes());
    let mut cos_theta: [Vec<f64>; 3] = Default::default();
    let mut cos_phi: [Vec<f64>; 3] = Default::default();
    for conv in set.conversations() {
        let graph = Graph::new();
        let bound = params.bind(&graph, false);
        let fwd = forward(&graph, &bound, conv.features(), options)?;
        let logits = fwd.logits.value();
        for (i, &y) in conv.labels().iter().enumerate() {
            confusion.record(y, argmax(logits.row(i)))?;
        }
        for m in Modality::ALL {
            let out = fwd.modality(m);
            if !options.opr_enabled {
                let expected = Tensor::hconcat(&[out.g, out.h]).map_err(ModelError::from)?.value();
                if max_abs_diff(&expected, &out.x_hat.value()) != 0.0 {
                    return Err(TrainError::Invariant(format!(
                        "OPR disabled but {} classifier input differs from [g, h]",
                        m.name()
                    )));
                }
            }
            cos_theta[m.index()].extend(out.cos_theta.value().into_data());
            cos_phi[m.index()].extend(fwd.cos_phi_mean(m).map_err(ModelError::from)?.value().into_data());
        }
    }
    let angles = angle_stats(&cos_theta, &cos_phi);
    Ok(EvalReport {
        accuracy: confusion.accuracy()?,
        weighted_f1: confusion.weighted_f1()?,
        per_class_f1: confusion.per_class_f1(),
        confusion,
        angles,
    })
}

fn angle_stats(cos_theta: &[Vec<f64>; 3], cos_phi: &[Vec<f64>; 3]) -> AngleStats {
    let mut modalities: [ModalityAngles; 3] = Default::default();
    for m in 0..3 {
        let theta: Vec<f64> = cos_theta[m].iter().map(|&c| degrees(c)).collect();
        let phi: Vec<f64> = cos_phi[m].iter().map(|&c| degrees(c)).collect();
        let (theta_mean, theta_std) = mean_std(&theta);
        let (phi_mean, phi_std) = mean_std(&phi);
        let satisfied = cos_phi[m].iter().zip(&cos_theta[m]).filter(|(p, t)| p >= t).count();
        modalities[m] = ModalityAngles {
            theta_mean,
            theta_std,
            phi_mean,
            phi_std,
            csr_satisfaction: satisfied as f64 / cos_theta[m].len().max(1) as f64,
        };
    }
    let all_theta: Vec<f64> = cos_theta.iter().flatten().copied().collect();
    let all_phi: Vec<f64> = cos_phi.iter().flatten().copied().collect();
    let satisfied = all_phi.iter().zip(&all_theta).filter(|(p, t)| p >= t).count();
    let (cos_theta_mean, cos_theta_std) = mean_std(&all_theta);
    let abs: Vec<f64> = all_theta.iter().map(|c| c.abs()).collect();
    let degrees_all: Vec<f64> = all_theta.iter().map(|&c| degrees(c)).collect();
    AngleStats {
        modalities,
        theta_std: mean_std(&degrees_all).1,
        cos_theta_mean,
        cos_theta_std,
        abs_cos_theta_mean: mean_std(&abs).0,
        cos_phi_mean: mean_std(&all_phi).0,
        csr_satisfaction: satisfied as f64 / all_theta.len().max(1) as f64,
    }
}

/// One utterance of the angle table. Angles are in degrees; entries are
/// empty when a feature vector is degenerate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AngleRow {
    pub conversation: String,
    pub utterance: usize,
    pub label: usize,
    pub theta_audio: Option<f64>,
    pub theta_text: Option<f64>,
    pub theta_visual: Option<f64>,
    pub phi_audio_text: Option<f64>,
    pub phi_audio_visual: Option<f64>,
    pub phi_text_visual: Option<f64>,
    pub csr_audio: Option<bool>,
    pub csr_text: Option<bool>,
    pub csr_visual: Option<bool>,
    pub degenerate: bool,
}

/// A pooled `g` or `h` vector projected onto the top two principal axes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionRow {
    pub conversation: String,
    pub utterance: usize,
    pub modality: String,
    pub kind: String,
    pub label: usize,
    pub pc1: f64,
    pub pc2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AngleReport {
    pub rows: Vec<AngleRow>,
    pub projection: Vec<ProjectionRow>,
    /// Variance captured by each of the two axes.
    pub explained_variance: [f64; 2],
}

fn csv_string<T: Serialize>(rows: &[T]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("rows serialize");
    }
    String::from_utf8(w.into_inner().expect("in-memory writer")).expect("utf-8")
}

impl AngleReport {
    pub fn angles_csv(&self) -> String {
        csv_string(&self.rows)
    }

    pub fn projection_csv(&self) -> String {
        csv_string(&self.projection)
    }

    pub fn degenerate_rows(&self) -> usize {
        self.rows.iter().filter(|r| r.degenerate).count()
    }
}

fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
    let (na, nb) = (dot(a, a).sqrt(), dot(b, b).sqrt());
    (na > NORM_EPS && nb > NORM_EPS).then(|| dot(a, b) / (na * nb))
}

/// Top two principal axes of `rows` (one vector per row), as coordinates.
fn principal_projection(rows: &[&[f64]], d: usize) -> (Vec<[f64; 2]>, [f64; 2]) {
    let n = rows.len();
    let mut x = DMatrix::<f64>::zeros(n, d);
    for (i, r) in rows.iter().enumerate() {
        for (j, v) in r.iter().enumerate() {
            x[(i, j)] = *v;
        }
    }
    let mean = x.row_mean();
    for mut row in x.row_iter_mut() {
        row -= &mean;
    }
    let cov = x.transpose() * &x / n.max(1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let axis = |k: usize| order.get(k).map(|&i| eig.eigenvectors.column(i).into_owned());
    let axes = [axis(0), axis(1)];
    let coords = (0..n)
        .map(|i| {
            let row = x.row(i);
            axes.clone().map(|a| a.map_or(0.0, |a| row.dot(&a.transpose())))
        })
        .collect();
    let variance = [0, 1].map(|k| order.get(k).map_or(0.0, |&i| eig.eigenvalues[i].max(0.0)));
    (coords, variance)
}

/// (conversation, utterance, modality, kind, label, feature row)
type Pooled = (String, usize, Modality, &'static str, usize, Vec<f64>);

/// Per-utterance angles and a 2-D principal-axis projection of the pooled
/// shared and specific features. Degenerate vectors are flagged instead of
/// failing the report.
pub fn angle_report(params: &ModelParams, set: &ConversationSet) -> Result<AngleReport> {
    check_data(set, &params.dims, "angle report")?;
    let mut rows = Vec::with_capacity(set.num_utterances());
    let mut pooled: Vec<Pooled> = Vec::new();
    for conv in set.conversations() {
        let graph = Graph::new();
        let bound = params.bind(&graph, false);
        let encoded = encode_all(&graph, &bound, conv.features())?;
        let g: [Mat; 3] = encoded.map(|(g, _)| g.value());
        let h: [Mat; 3] = encoded.map(|(_, h)| h.value());
        for (i, &label) in conv.labels().iter().enumerate() {
            let theta = Modality::ALL.map(|m| cosine(g[m.index()].row(i), h[m.index()].row(i)));
            let phi = |a: usize, b: usize| cosine(g[a].row(i), g[b].row(i));
            let pairs = [phi(0, 1), phi(0, 2), phi(1, 2)];
            let phi_mean = |m: usize| {
                let [s1, s2] = Modality::ALL[m].others().map(|s| s.index());
                Some((phi(m, s1)? + phi(m, s2)?) / 2.0)
            };
            let csr = [0, 1, 2].map(|m| Some(phi_mean(m)? >= theta[m]?));
            let degenerate = theta.iter().chain(&pairs).any(Option::is_none);
            rows.push(AngleRow {
                conversation: conv.id().to_string(),
                utterance: i,
                label,
                theta_audio: theta[0].map(degrees),
                theta_text: theta[1].map(degrees),
                theta_visual: theta[2].map(degrees),
                phi_audio_text: pairs[0].map(degrees),
                phi_audio_visual: pairs[1].map(degrees),
                phi_text_visual: pairs[2].map(degrees),
                csr_audio: csr[0],
                csr_text: csr[1],
                csr_visual: csr[2],
                degenerate,
            });
            for m in Modality::ALL {
                for (kind, src) in [("shared", &g), ("specific", &h)] {
                    pooled.push((conv.id().to_string(), i, m, kind, label, src[m.index()].row(i).to_vec()));
                }
            }
        }
    }
    let vectors: Vec<&[f64]> = pooled.iter().map(|p| p.5.as_slice()).collect();
    let (coords, explained_variance) = principal_projection(&vectors, params.dims.d);
    let projection = pooled
        .iter()
        .zip(coords)
        .map(|((conv, i, m, kind, label, _), [pc1, pc2])| ProjectionRow {
            conversation: conv.clone(),
            utterance: *i,
            modality: m.name().to_string(),
            kind: kind.to_string(),
            label: *label,
            pc1,
            pc2,
        })
        .collect();
    Ok(AngleReport {
        rows,
        projection,
        explained_variance,
    })
}
