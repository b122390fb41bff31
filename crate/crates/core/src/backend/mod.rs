//! Representation producers, temporal pooling, concatenation fusion and the
//! on-disk feature store.
//!
//! Block indexing is 1-based: block `k` is the output of the `k`-th Transformer
//! encoder block, and the convolutional front-end output is never addressable.
//! Everything downstream of [`materialize`] only reads FMAT files, so a
//! provider is needed just once per `(backend, block)`.

pub mod fmat;
mod store;
pub mod text;

pub use store::{fuse_stores, materialize, store_synthetic, FeatureStore, IndexEntry, MaterializeReport};

use std::fmt;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::corpus::{Dialogue, SyntheticFeatures, Utterance};
use crate::error::{Error, Result};
use text::{encode_text, TextEncoder};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Speech,
    Text,
    Synthetic,
    Fused,
}

/// Which representation and which encoder block a feature set comes from.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BackendSpec {
    pub name: String,
    pub kind: BackendKind,
    /// 1-based encoder block; 0 for backends without block structure.
    pub block: u32,
    /// Number of encoder blocks the backend exposes.
    pub depth: u32,
    pub dim: usize,
}

/// Base speech foundation models: twelve 768-dim encoder blocks.
pub const BASE_SPEECH_MODELS: [&str; 3] = ["wav2vec2-base", "hubert-base-ls960", "wavlm-base-plus"];
pub const BASE_DEPTH: u32 = 12;
pub const BASE_DIM: usize = 768;

impl BackendSpec {
    pub fn speech(name: impl Into<String>, block: u32, depth: u32, dim: usize) -> Result<Self> {
        let spec = BackendSpec {
            name: name.into(),
            kind: BackendKind::Speech,
            block,
            depth,
            dim,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// A base-size speech model (`depth = 12`, `dim = 768`).
    pub fn base_speech(name: impl Into<String>, block: u32) -> Result<Self> {
        Self::speech(name, block, BASE_DEPTH, BASE_DIM)
    }

    pub fn text(name: impl Into<String>, dim: usize) -> Result<Self> {
        let spec = BackendSpec {
            name: name.into(),
            kind: BackendKind::Text,
            block: 0,
            depth: 0,
            dim,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Synthetic features; `block` 0 means block-agnostic.
    pub fn synthetic(block: u32, dim: usize) -> Result<Self> {
        let spec = BackendSpec {
            name: "synthetic".into(),
            kind: BackendKind::Synthetic,
            block,
            depth: block.max(BASE_DEPTH),
            dim,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::Config("backend name is empty".into()));
        }
        if self.dim == 0 {
            return Err(Error::Config(format!("backend {}: dim must be positive", self.name)));
        }
        match self.kind {
            BackendKind::Speech if self.block == 0 || self.block > self.depth => Err(Error::Config(format!(
                "backend {}: block {} outside 1..={}",
                self.name, self.block, self.depth
            ))),
            BackendKind::Synthetic if self.block > self.depth => Err(Error::Config(format!(
                "backend {}: block {} outside 0..={}",
                self.name, self.block, self.depth
            ))),
            _ => Ok(()),
        }
    }

    /// Store key: `(name, block)`.
    pub fn key(&self) -> StoreKey {
        StoreKey {
            backend: self.name.clone(),
            block: self.block,
        }
    }
}

impl fmt::Display for BackendSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.block == 0 {
            write!(f, "{}", self.name)
        } else {
            write!(f, "{}@b{}", self.name, self.block)
        }
    }
}

/// Identifies one cached feature set inside a [`FeatureStore`].
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StoreKey {
    pub backend: String,
    pub block: u32,
}

impl fmt::Display for StoreKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@b{}", self.backend, self.block)
    }
}

impl std::str::FromStr for StoreKey {
    type Err = Error;

    /// Parses `name@bK`; a bare `name` means block 0.
    fn from_str(s: &str) -> Result<Self> {
        let (backend, block) = match s.rsplit_once("@b") {
            Some((name, k)) => (
                name,
                k.parse()
                    .map_err(|_| Error::Config(format!("bad block in store key {s:?}")))?,
            ),
            None => (s, 0),
        };
        if backend.is_empty() {
            return Err(Error::Config(format!("empty backend name in store key {s:?}")));
        }
        Ok(StoreKey {
            backend: backend.to_string(),
            block,
        })
    }
}

/// Frame-level states for one utterance, `tau x D`.
#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceMatrix(Array2<f32>);

impl UtteranceMatrix {
    pub fn new(values: Array2<f32>) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::Validation(format!(
                "utterance matrix must be non-empty, got {:?}",
                values.dim()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("utterance matrix has non-finite entries".into()));
        }
        Ok(UtteranceMatrix(values))
    }

    pub fn values(&self) -> &Array2<f32> {
        &self.0
    }

    pub fn frames(&self) -> usize {
        self.0.nrows()
    }

    pub fn dim(&self) -> usize {
        self.0.ncols()
    }
}

/// Per-dialogue pooled features: one row per feature utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct DialogueFeatures {
    pub session_id: String,
    pub matrix: Array2<f32>,
    pub backend: BackendSpec,
}

/// Average pooling over the time axis. Accumulates in `f64`.
pub fn pool_utterance(m: &UtteranceMatrix) -> Result<Array1<f32>> {
    pool_rows(m.values())
}

pub(crate) fn pool_rows(m: &Array2<f32>) -> Result<Array1<f32>> {
    if m.nrows() == 0 {
        return Err(Error::Validation("cannot pool an empty matrix".into()));
    }
    let mean = m
        .mapv(f64::from)
        .mean_axis(Axis(0))
        .expect("non-empty axis");
    Ok(mean.mapv(|v| v as f32))
}

/// Concatenates per-utterance vectors in the given order.
pub fn fuse_concat(vectors: &[ArrayView1<'_, f32>]) -> Result<Array1<f32>> {
    if vectors.is_empty() {
        return Err(Error::Alignment("nothing to fuse".into()));
    }
    let total = vectors.iter().map(|v| v.len()).sum();
    let mut out = Vec::with_capacity(total);
    for v in vectors {
        out.extend(v.iter().copied());
    }
    Ok(Array1::from(out))
}

/// Row-wise concatenation of per-dialogue matrices from several backends.
pub fn fuse_dialogue(matrices: &[&Array2<f32>]) -> Result<Array2<f32>> {
    let first = matrices
        .first()
        .ok_or_else(|| Error::Alignment("nothing to fuse".into()))?;
    let rows = first.nrows();
    if let Some(bad) = matrices.iter().find(|m| m.nrows() != rows) {
        return Err(Error::Alignment(format!(
            "utterance counts differ across modalities: {rows} vs {}",
            bad.nrows()
        )));
    }
    let views: Vec<_> = matrices.iter().map(|m| m.view()).collect();
    Ok(ndarray::concatenate(Axis(1), &views).expect("row counts checked"))
}

/// Source of frame-level representations for one backend at one block.
pub trait FeatureProvider {
    fn spec(&self) -> &BackendSpec;

    /// Hidden states of `utterance` (which belongs to `dialogue`) at the configured block.
    fn utterance_states(&self, dialogue: &Dialogue, utterance: &Utterance) -> Result<UtteranceMatrix>;
}

/// Block-`k` states for one utterance, checked against the backend's declared shape.
pub fn extract_block_states(
    provider: &dyn FeatureProvider,
    dialogue: &Dialogue,
    utterance: &Utterance,
) -> Result<UtteranceMatrix> {
    let spec = provider.spec();
    spec.validate()?;
    let states = provider.utterance_states(dialogue, utterance)?;
    if states.dim() != spec.dim {
        return Err(Error::Alignment(format!(
            "{spec}: session {} utterance {} has dim {}, expected {}",
            dialogue.session_id,
            utterance.index,
            states.dim(),
            spec.dim
        )));
    }
    Ok(states)
}

/// Reads hidden states dumped by an external inference run:
/// `<root>/<session_id>/<utterance_index>.block<k>.fmat`, each `tau x D`.
///
/// This is how checkpoints from a model hub are consumed: the network is run
/// once in inference mode outside this crate and its per-block outputs are
/// written as FMAT files.
#[derive(Clone, Debug)]
pub struct PrecomputedStates {
    spec: BackendSpec,
    root: PathBuf,
}

impl PrecomputedStates {
    pub fn new(spec: BackendSpec, root: impl Into<PathBuf>) -> Result<Self> {
        spec.validate()?;
        Ok(PrecomputedStates {
            spec,
            root: root.into(),
        })
    }

    pub fn path_for(&self, session_id: &str, utterance_index: usize) -> PathBuf {
        state_path(&self.root, session_id, utterance_index, self.spec.block)
    }
}

pub fn state_path(root: &Path, session_id: &str, utterance_index: usize, block: u32) -> PathBuf {
    root.join(store::sanitize(session_id))
        .join(format!("{utterance_index}.block{block}.fmat"))
}

impl FeatureProvider for PrecomputedStates {
    fn spec(&self) -> &BackendSpec {
        &self.spec
    }

    fn utterance_states(&self, dialogue: &Dialogue, utterance: &Utterance) -> Result<UtteranceMatrix> {
        let m = fmat::read_fmat(self.path_for(&dialogue.session_id, utterance.index))?;
        UtteranceMatrix::new(m)
    }
}

/// Serves generator output as `tau = 1` matrices. Synthetic corpora contain
/// participant utterances only, so the utterance index is the feature row.
pub struct SyntheticProvider<'a> {
    spec: BackendSpec,
    features: &'a SyntheticFeatures,
}

impl<'a> SyntheticProvider<'a> {
    pub fn new(features: &'a SyntheticFeatures, block: u32) -> Result<Self> {
        if !features.blocks().any(|b| b == block) {
            return Err(Error::Config(format!("synthetic features have no block {block}")));
        }
        Ok(SyntheticProvider {
            spec: BackendSpec::synthetic(block, features.dim)?,
            features,
        })
    }
}

impl FeatureProvider for SyntheticProvider<'_> {
    fn spec(&self) -> &BackendSpec {
        &self.spec
    }

    fn utterance_states(&self, dialogue: &Dialogue, utterance: &Utterance) -> Result<UtteranceMatrix> {
        let m = self
            .features
            .get(self.spec.block, &dialogue.session_id)
            .ok_or_else(|| Error::Validation(format!("no synthetic features for {}", dialogue.session_id)))?;
        let row = m.row(utterance.index);
        UtteranceMatrix::new(row.to_owned().insert_axis(Axis(0)))
    }
}

/// Encodes each utterance transcript with a [`TextEncoder`].
pub struct TextProvider<E> {
    spec: BackendSpec,
    encoder: E,
}

impl<E: TextEncoder> TextProvider<E> {
    pub fn new(name: impl Into<String>, encoder: E) -> Result<Self> {
        Ok(TextProvider {
            spec: BackendSpec::text(name, encoder.dim())?,
            encoder,
        })
    }
}

impl<E: TextEncoder> FeatureProvider for TextProvider<E> {
    fn spec(&self) -> &BackendSpec {
        &self.spec
    }

    fn utterance_states(&self, _dialogue: &Dialogue, utterance: &Utterance) -> Result<UtteranceMatrix> {
        let enc = encode_text(&self.encoder, &utterance.text)?;
        UtteranceMatrix::new(enc.vector.insert_axis(Axis(0)))
    }
}
