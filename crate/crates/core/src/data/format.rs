//! Dataset directory layout.
//!
//! ```text
//! manifest.json   conversations, labels and global row indices
//! audio.aofl      rows × d features
//! text.aofl
//! visual.aofl
//! ```
//!
//! A feature file is a 16-byte header (`b"AOFL"`, version, rows, cols as
//! little-endian `u32`) followed by the row-major values as little-endian
//! `f64`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Conversation, ConversationSet, DataError, Result};
use crate::model::Modality;
use crate::tensor::Mat;

pub const FEATURE_MAGIC: [u8; 4] = *b"AOFL";
pub const FORMAT_VERSION: u32 = 1;
pub const FEATURE_HEADER_LEN: usize = 16;
pub const MANIFEST_FILE: &str = "manifest.json";
/// Feature file names in modality order.
pub const FEATURE_FILES: [&str; 3] = ["audio.aofl", "text.aofl", "visual.aofl"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub d: usize,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub conversations: Vec<ManifestConversation>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestConversation {
    pub id: String,
    pub utterances: Vec<ManifestUtterance>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestUtterance {
    pub row: usize,
    pub label: usize,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn format_err(path: &Path, detail: impl Into<String>) -> DataError {
    DataError::Format {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

fn encode_features(m: &Mat) -> Vec<u8> {
    let mut out = Vec::with_capacity(FEATURE_HEADER_LEN + 8 * m.len());
    out.extend_from_slice(&FEATURE_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for v in m.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn decode_features(bytes: &[u8], path: &Path) -> Result<Mat> {
    if bytes.len() < FEATURE_HEADER_LEN {
        return Err(format_err(path, format!("file is {} bytes, shorter than the header", bytes.len())));
    }
    if bytes[..4] != FEATURE_MAGIC {
        return Err(format_err(path, format!("bad magic {:?}", &bytes[..4])));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != FORMAT_VERSION {
        return Err(format_err(path, format!("unsupported version {version}")));
    }
    let (rows, cols) = (word(8) as usize, word(12) as usize);
    let expected = FEATURE_HEADER_LEN + 8 * rows * cols;
    if bytes.len() != expected {
        return Err(format_err(
            path,
            format!("header declares {rows}x{cols} ({expected} bytes) but the file has {} bytes", bytes.len()),
        ));
    }
    let data: Vec<f64> = bytes[FEATURE_HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(DataError::NonFinite {
            path: path.to_path_buf(),
            row: i / cols,
            col: i % cols,
        });
    }
    Ok(Mat::from_vec(rows, cols, data).expect("length checked"))
}

pub fn write_features(path: &Path, m: &Mat) -> Result<()> {
    fs::write(path, encode_features(m)).map_err(io_err(path))
}

pub fn read_features(path: &Path) -> Result<Mat> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_features(&bytes, path)
}

/// Writes `manifest.json` and the three feature files into `dir`
/// (created if missing). Rows are numbered in conversation order.
pub fn write_dataset(set: &ConversationSet, dir: &Path) -> Result<()> {
    if set.is_empty() {
        return Err(DataError::Invalid("refusing to write a dataset without conversations".into()));
    }
    let d = set.dim();
    let total = set.num_utterances();
    let mut stacked: [Vec<f64>; 3] = Default::default();
    let mut conversations = Vec::with_capacity(set.len());
    let mut row = 0;
    for c in set.conversations() {
        for (m, out) in stacked.iter_mut().enumerate() {
            out.extend_from_slice(c.features()[m].data());
        }
        let utterances = c
            .labels()
            .iter()
            .map(|&label| {
                row += 1;
                ManifestUtterance { row: row - 1, label }
            })
            .collect();
        conversations.push(ManifestConversation {
            id: c.id().to_string(),
            utterances,
        });
    }
    let manifest = Manifest {
        version: FORMAT_VERSION,
        d,
        num_classes: set.num_classes(),
        class_names: set.class_names().to_vec(),
        conversations,
    };
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    fs::write(&manifest_path, text).map_err(io_err(&manifest_path))?;
    for (name, data) in FEATURE_FILES.iter().zip(stacked) {
        let m = Mat::from_vec(total, d, data).expect("consistent rows");
        write_features(&dir.join(name), &m)?;
    }
    Ok(())
}

fn feature_paths(dir: &Path) -> [PathBuf; 3] {
    FEATURE_FILES.map(|f| dir.join(f))
}

pub fn load_dataset(dir: &Path) -> Result<ConversationSet> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| format_err(&manifest_path, e.to_string()))?;
    if manifest.version != FORMAT_VERSION {
        return Err(format_err(&manifest_path, format!("unsupported version {}", manifest.version)));
    }
    if manifest.class_names.len() != manifest.num_classes {
        return Err(format_err(
            &manifest_path,
            format!(
                "num_classes is {} but {} class names are listed",
                manifest.num_classes,
                manifest.class_names.len()
            ),
        ));
    }
    let manifest_rows: usize = manifest.conversations.iter().map(|c| c.utterances.len()).sum();

    let mut features = Vec::with_capacity(3);
    for path in feature_paths(dir) {
        let m = read_features(&path)?;
        if m.rows() != manifest_rows {
            return Err(DataError::CountMismatch {
                path,
                manifest_rows,
                file_rows: m.rows(),
            });
        }
        if m.cols() != manifest.d {
            return Err(format_err(&path, format!("{} columns, manifest says d = {}", m.cols(), manifest.d)));
        }
        features.push(m);
    }

    let mut conversations = Vec::with_capacity(manifest.conversations.len());
    for c in &manifest.conversations {
        let mut labels = Vec::with_capacity(c.utterances.len());
        let mut mats: [Vec<f64>; 3] = Default::default();
        for u in &c.utterances {
            if u.row >= manifest_rows {
                return Err(format_err(
                    &manifest_path,
                    format!("conversation `{}` refers to row {} of {manifest_rows}", c.id, u.row),
                ));
            }
            for m in Modality::ALL {
                mats[m.index()].extend_from_slice(features[m.index()].row(u.row));
            }
            labels.push(u.label);
        }
        let n = labels.len();
        let d = manifest.d;
        let feats = mats.map(|v| Mat::from_vec(n, d, v).expect("rows copied"));
        conversations.push(Conversation::new(c.id.clone(), feats, labels)?);
    }
    ConversationSet::new(manifest.d, manifest.class_names, conversations)
}
