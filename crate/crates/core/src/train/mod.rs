//! Training loop, evaluation metrics, angle diagnostics and the ablation
//! grid.

mod ablation;
mod eval;
mod metrics;
mod optim;

pub use ablation::{
    history_csv, run_ablation, AblationReport, AblationRow, RunOutcome, RunRecord, RunSummary, Variant,
};
pub use eval::{
    angle_report, evaluate, AngleReport, AngleRow, AngleStats, EvalReport, ModalityAngles, ProjectionRow,
};
pub use metrics::{argmax, weighted_f1, ConfusionMatrix, MetricError};
pub use optim::{adam_update, optimizer_step, AdamConfig, AdamState};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::ConversationSet;
use crate::losses::{objective, Constraint, LossError, LossWeights, ObjectiveSpec};
use crate::model::{default_heads, forward, ForwardOptions, ModelDims, ModelError, ModelParams, OprMode};
use crate::rng::{stream_rng, Stream};
use crate::tensor::{Graph, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dataset: {0}")]
    Data(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("diverged at epoch {epoch}, conversation `{conversation}`: {component} is {value}")]
    Divergence {
        epoch: usize,
        conversation: String,
        component: String,
        value: f64,
    },
    #[error("angle head received gradient {max_abs:e} during warm-up epoch {epoch}")]
    WarmupLeak { epoch: usize, max_abs: f64 },
    #[error("{0}")]
    Invariant(String),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Every knob of a training run. Serialized as one flat JSON object; model
/// sizes left as `null` are derived from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub mu: f64,
    pub eta: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub seed: u64,
    pub cen_enabled: bool,
    pub cen_normalize: bool,
    pub are_enabled: bool,
    pub aac_enabled: bool,
    pub csr_enabled: bool,
    pub opr_enabled: bool,
    pub opr_mode: OprMode,
    pub constraint: Constraint,
    pub d: Option<usize>,
    pub layers: usize,
    pub heads: Option<usize>,
    pub d_ff: Option<usize>,
    pub d_c: Option<usize>,
    pub num_classes: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            alpha: w.alpha,
            beta: w.beta,
            gamma: w.gamma,
            mu: w.mu,
            eta: w.eta,
            learning_rate: 1e-3,
            epochs: 10,
            warmup_epochs: 5,
            seed: 1,
            cen_enabled: true,
            cen_normalize: true,
            are_enabled: true,
            aac_enabled: true,
            csr_enabled: true,
            opr_enabled: true,
            opr_mode: OprMode::Scale,
            constraint: Constraint::Aao,
            d: None,
            layers: 2,
            heads: None,
            d_ff: None,
            d_c: None,
            num_classes: None,
        }
    }
}

impl TrainConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
            mu: self.mu,
            eta: self.eta,
        }
    }

    pub fn forward_options(&self) -> ForwardOptions {
        ForwardOptions {
            opr_enabled: self.opr_enabled,
            opr_mode: self.opr_mode,
        }
    }

    /// The angular term actually optimized: ARE only under `aao` with
    /// `are_enabled`; a baseline constraint replaces ARE entirely.
    pub fn effective_constraint(&self) -> Constraint {
        match self.constraint {
            Constraint::Aao if !self.are_enabled => Constraint::None,
            c => c,
        }
    }

    pub fn objective_spec(&self) -> ObjectiveSpec {
        ObjectiveSpec {
            weights: self.weights(),
            cen_enabled: self.cen_enabled,
            cen_normalize: self.cen_normalize,
            constraint: self.effective_constraint(),
            aac_enabled: self.aac_enabled,
            csr_enabled: self.csr_enabled,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights().validate().map_err(TrainError::Config)?;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config(format!(
                "learning_rate = {} must be positive",
                self.learning_rate
            )));
        }
        if self.warmup_epochs > self.epochs {
            return Err(TrainError::Config(format!(
                "warmup_epochs = {} exceeds epochs = {}",
                self.warmup_epochs, self.epochs
            )));
        }
        Ok(())
    }

    /// Resolves model sizes against the data's width and class count.
    pub fn model_dims(&self, data_d: usize, data_classes: usize) -> Result<ModelDims> {
        if let Some(d) = self.d.filter(|&d| d != data_d) {
            return Err(TrainError::Config(format!("config sets d = {d} but the dataset has d = {data_d}")));
        }
        if let Some(k) = self.num_classes.filter(|&k| k != data_classes) {
            return Err(TrainError::Config(format!(
                "config sets num_classes = {k} but the dataset has {data_classes}"
            )));
        }
        let d = data_d;
        let dims = ModelDims {
            d,
            layers: self.layers,
            heads: self.heads.unwrap_or_else(|| default_heads(d)),
            d_ff: self.d_ff.unwrap_or(4 * d),
            d_c: self.d_c.unwrap_or(2 * d),
            num_classes: data_classes,
        };
        dims.validate()?;
        Ok(dims)
    }

    /// Copy with every `None` size filled in.
    pub fn resolved(&self, dims: &ModelDims) -> TrainConfig {
        TrainConfig {
            d: Some(dims.d),
            layers: dims.layers,
            heads: Some(dims.heads),
            d_ff: Some(dims.d_ff),
            d_c: Some(dims.d_c),
            num_classes: Some(dims.num_classes),
            ..self.clone()
        }
    }
}

/// Mean component losses of one epoch plus validation scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub warmup: bool,
    pub total: f64,
    pub cen: f64,
    pub aac: f64,
    pub csr: f64,
    pub are: f64,
    /// Baseline constraint value, 0 unless `ort_norm` or `ort_cos` is active.
    pub ortho: f64,
    pub ce: f64,
    /// Mean `α·CEN` actually added to the total.
    pub cen_contribution: f64,
    /// Mean `β·(ARE | baseline)` actually added to the total.
    pub angular_contribution: f64,
    pub valid_accuracy: f64,
    pub valid_weighted_f1: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were returned, if any epoch ran.
    pub best_epoch: Option<usize>,
    /// Largest absolute angle-head gradient seen in any warm-up step.
    pub warmup_angle_grad_max: f64,
}

fn check_data(set: &ConversationSet, dims: &ModelDims, name: &str) -> Result<()> {
    if set.dim() != dims.d || set.num_classes() != dims.num_classes {
        return Err(TrainError::Data(format!(
            "{name} set has d = {}, {} classes; model expects d = {}, {} classes",
            set.dim(),
            set.num_classes(),
            dims.d,
            dims.num_classes
        )));
    }
    Ok(())
}

/// Trains from a seeded initialization. One optimizer step per
/// conversation; the first `warmup_epochs` epochs use cross-entropy only.
/// Returns the parameters of the epoch with the best validation weighted
/// F1, the later epoch winning ties (the last epoch when `valid` is
/// empty). Warm-up epochs compete only when the whole run is warm-up.
pub fn train(config: &TrainConfig, train_set: &ConversationSet, valid: &ConversationSet) -> Result<(ModelParams, TrainHistory)> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::Data("training set has no conversations".into()));
    }
    let dims = config.model_dims(train_set.dim(), train_set.num_classes())?;
    check_data(valid, &dims, "validation")?;
    let mut params = ModelParams::init(dims, config.seed)?;
    let mut state = AdamState::new(&params, AdamConfig::default());
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, ModelParams)> = None;
    let spec = config.objective_spec();
    let options = config.forward_options();
    let mut shuffle = stream_rng(config.seed, Stream::Shuffle);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..config.epochs {
        let warmup = epoch < config.warmup_epochs;
        order.shuffle(&mut shuffle);
        let mut sums = [0.0; 9];
        for &ci in &order {
            let conv = &train_set.conversations()[ci];
            let graph = Graph::new();
            let bound = params.bind(&graph, true);
            let diverged = |op: &str| TrainError::Divergence {
                epoch,
                conversation: conv.id().to_string(),
                component: format!("{op} input"),
                value: f64::INFINITY,
            };
            let fwd = forward(&graph, &bound, conv.features(), options).map_err(|e| match e {
                ModelError::Tensor(TensorError::Degenerate { op, norm, .. }) if !norm.is_finite() => diverged(op),
                e => e.into(),
            })?;
            let obj = objective(&fwd, conv.labels(), &spec, warmup).map_err(|e| match e {
                LossError::Tensor(TensorError::Degenerate { op, norm, .. }) if !norm.is_finite() => diverged(op),
                e => e.into(),
            })?;
            let components = obj.components();
            if let Some((name, value)) = components.iter().find(|(_, v)| !v.is_finite()) {
                return Err(TrainError::Divergence {
                    epoch,
                    conversation: conv.id().to_string(),
                    component: format!("{name} loss"),
                    value: *value,
                });
            }
            obj.total.backward().map_err(ModelError::from)?;
            let grads = bound.grads();
            if warmup {
                let leak = grads.angle_head.weight.max_abs().max(grads.angle_head.bias.max_abs());
                history.warmup_angle_grad_max = history.warmup_angle_grad_max.max(leak);
                if leak != 0.0 {
                    return Err(TrainError::WarmupLeak { epoch, max_abs: leak });
                }
            }
            if !grads.is_finite() {
                return Err(TrainError::Divergence {
                    epoch,
                    conversation: conv.id().to_string(),
                    component: "gradient of total".into(),
                    value: f64::NAN,
                });
            }
            let get = |name: &str| components.iter().find(|c| c.0 == name).map_or(0.0, |c| c.1);
            let values = [
                get("total"),
                get("cen"),
                get("aac"),
                get("csr"),
                get("are"),
                get("ortho"),
                get("ce"),
                obj.cen_contribution,
                obj.angular_contribution,
            ];
            for (s, v) in sums.iter_mut().zip(values) {
                *s += v;
            }
            optimizer_step(&mut params, &grads, &mut state, config.learning_rate);
        }
        let n = train_set.len() as f64;
        let mean = sums.map(|s| s / n);
        let (valid_accuracy, valid_weighted_f1) = if valid.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let report = evaluate(&params, valid, config)?;
            (report.accuracy, report.weighted_f1)
        };
        history.epochs.push(EpochRecord {
            epoch,
            warmup,
            total: mean[0],
            cen: mean[1],
            aac: mean[2],
            csr: mean[3],
            are: mean[4],
            ortho: mean[5],
            ce: mean[6],
            cen_contribution: mean[7],
            angular_contribution: mean[8],
            valid_accuracy,
            valid_weighted_f1,
        });
        let eligible = !warmup || config.warmup_epochs == config.epochs;
        let score = if valid.is_empty() { f64::INFINITY } else { valid_weighted_f1 };
        if eligible && best.as_ref().is_none_or(|(b, _)| score >= *b) {
            best = Some((score, params.clone()));
            history.best_epoch = Some(epoch);
        }
    }
    Ok((best.map_or(params, |(_, p)| p), history))
}
