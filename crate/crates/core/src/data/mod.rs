//! Conversation datasets: in-memory model, on-disk format, synthetic
//! generator and conversation-level splitting.

mod format;
mod synth;

pub use format::{
    load_dataset, read_features, write_dataset, write_features, Manifest, ManifestConversation, ManifestUtterance,
    FEATURE_FILES, FEATURE_HEADER_LEN, FEATURE_MAGIC, FORMAT_VERSION, MANIFEST_FILE,
};
pub use synth::{synth_generate, SynthSpec, SynthTruth, Synthetic};

use std::path::PathBuf;

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::model::Modality;
use crate::rng::{stream_rng, Stream};
use crate::tensor::Mat;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {detail}", path.display())]
    Format { path: PathBuf, detail: String },
    #[error("{}: manifest lists {manifest_rows} rows but the file holds {file_rows}", path.display())]
    CountMismatch {
        path: PathBuf,
        manifest_rows: usize,
        file_rows: usize,
    },
    #[error("{}: non-finite value at row {row}, column {col}", path.display())]
    NonFinite { path: PathBuf, row: usize, col: usize },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("invalid split: {0}")]
    Split(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// One conversation: ordered utterances with one `N × d` feature matrix
/// per modality and one label per utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct Conversation {
    id: String,
    features: [Mat; 3],
    labels: Vec<usize>,
}

impl Conversation {
    pub fn new(id: impl Into<String>, features: [Mat; 3], labels: Vec<usize>) -> Result<Self> {
        let id = id.into();
        if labels.is_empty() {
            return Err(DataError::Invalid(format!("conversation `{id}` has no utterances")));
        }
        let d = features[0].cols();
        for m in Modality::ALL {
            let f = &features[m.index()];
            if f.rows() != labels.len() || f.cols() != d {
                return Err(DataError::Invalid(format!(
                    "conversation `{id}`: {} features are {}x{}, expected {}x{d}",
                    m.name(),
                    f.rows(),
                    f.cols(),
                    labels.len()
                )));
            }
        }
        Ok(Self { id, features, labels })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    /// Audio, text and visual features, each `len() × d`.
    pub fn features(&self) -> &[Mat; 3] {
        &self.features
    }

    pub fn modality(&self, m: Modality) -> &Mat {
        &self.features[m.index()]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features[0].cols()
    }
}

/// An immutable, validated collection of conversations.
#[derive(Clone, Debug, PartialEq)]
pub struct ConversationSet {
    d: usize,
    class_names: Vec<String>,
    conversations: Vec<Conversation>,
}

impl ConversationSet {
    pub fn new(d: usize, class_names: Vec<String>, conversations: Vec<Conversation>) -> Result<Self> {
        if d == 0 {
            return Err(DataError::Invalid("feature dimension must be positive".into()));
        }
        if class_names.is_empty() {
            return Err(DataError::Invalid("at least one class is required".into()));
        }
        let k = class_names.len();
        for c in &conversations {
            if c.dim() != d {
                return Err(DataError::Invalid(format!(
                    "conversation `{}` has dimension {}, dataset has {d}",
                    c.id,
                    c.dim()
                )));
            }
            if let Some(&bad) = c.labels.iter().find(|&&y| y >= k) {
                return Err(DataError::Invalid(format!(
                    "conversation `{}` has label {bad}, dataset has {k} classes",
                    c.id
                )));
            }
        }
        Ok(Self {
            d,
            class_names,
            conversations,
        })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn conversations(&self) -> &[Conversation] {
        &self.conversations
    }

    pub fn len(&self) -> usize {
        self.conversations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.conversations.is_empty()
    }

    pub fn num_utterances(&self) -> usize {
        self.conversations.iter().map(Conversation::len).sum()
    }

    /// Utterance count per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for c in &self.conversations {
            for &y in &c.labels {
                counts[y] += 1;
            }
        }
        counts
    }

    /// Same metadata, different conversations.
    fn with_conversations(&self, conversations: Vec<Conversation>) -> Self {
        Self {
            d: self.d,
            class_names: self.class_names.clone(),
            conversations,
        }
    }
}

/// Conversation counts for a split: `floor(n·r)` per part, with the
/// remainder assigned to train.
pub fn split_sizes(n: usize, ratios: [f64; 3]) -> Result<[usize; 3]> {
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) {
        return Err(DataError::Split(format!("ratios {ratios:?} must lie in [0, 1]")));
    }
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(DataError::Split(format!("ratios {ratios:?} sum to {sum}, not 1")));
    }
    let mut sizes = ratios.map(|r| (n as f64 * r + 1e-9).floor() as usize);
    sizes[0] += n - sizes.iter().sum::<usize>();
    for (i, name) in ["train", "valid", "test"].iter().enumerate() {
        if ratios[i] > 0.0 && sizes[i] == 0 {
            return Err(DataError::Split(format!(
                "{name} ratio {} of {n} conversations rounds to zero",
                ratios[i]
            )));
        }
    }
    Ok(sizes)
}

/// Seeded split at conversation granularity into train, valid and test.
pub fn split(set: &ConversationSet, ratios: [f64; 3], seed: u64) -> Result<[ConversationSet; 3]> {
    let [n_train, n_valid, _] = split_sizes(set.len(), ratios)?;
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.shuffle(&mut stream_rng(seed, Stream::Split));
    let pick = |idx: &[usize]| {
        let mut idx = idx.to_vec();
        idx.sort_unstable();
        set.with_conversations(idx.iter().map(|&i| set.conversations[i].clone()).collect())
    };
    Ok([
        pick(&order[..n_train]),
        pick(&order[n_train..n_train + n_valid]),
        pick(&order[n_train + n_valid..]),
    ])
}
