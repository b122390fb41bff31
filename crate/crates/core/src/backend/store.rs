use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{extract_block_states, fmat, fuse_dialogue, pool_utterance, BackendKind, BackendSpec, FeatureProvider, StoreKey, SyntheticProvider};
use crate::corpus::{Corpus, SpeakerFilter, Split, SyntheticFeatures};
use crate::error::{Error, Result};
use crate::fsutil;

pub const INDEX_FILE: &str = "index.jsonl";

/// Writes to the index are persisted after this many new files.
const FLUSH_EVERY: usize = 64;

/// One line of `index.jsonl`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub session_id: String,
    pub backend: String,
    pub block: u32,
    /// Path relative to the store root.
    pub file: String,
    pub rows: usize,
    pub cols: usize,
    /// CRC32 of the FMAT payload.
    pub checksum: u32,
}

type EntryKey = (String, u32, String);

/// Directory of FMAT files with a JSON-lines index keyed by
/// `(session_id, backend, block)`.
#[derive(Debug)]
pub struct FeatureStore {
    root: PathBuf,
    entries: BTreeMap<EntryKey, IndexEntry>,
    dirty: bool,
}

pub(crate) fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') { c } else { '_' })
        .collect()
}

impl FeatureStore {
    /// Opens (or creates) the store at `root`, loading its index if present.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        let index = root.join(INDEX_FILE);
        let mut entries = BTreeMap::new();
        if index.exists() {
            let text = fsutil::read_to_string(&index)?;
            for (i, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let e: IndexEntry = serde_json::from_str(line).map_err(|err| Error::Parse {
                    path: index.clone(),
                    line: i + 1,
                    message: err.to_string(),
                })?;
                entries.insert((e.backend.clone(), e.block, e.session_id.clone()), e);
            }
        }
        Ok(FeatureStore {
            root,
            entries,
            dirty: false,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn entries(&self) -> impl Iterator<Item = &IndexEntry> {
        self.entries.values()
    }

    pub fn entry(&self, session_id: &str, key: &StoreKey) -> Option<&IndexEntry> {
        self.entries
            .get(&(key.backend.clone(), key.block, session_id.to_string()))
    }

    /// All keys that have at least one cached session.
    pub fn keys(&self) -> Vec<StoreKey> {
        let mut keys: Vec<StoreKey> = self
            .entries
            .keys()
            .map(|(b, k, _)| StoreKey {
                backend: b.clone(),
                block: *k,
            })
            .collect();
        keys.dedup();
        keys
    }

    pub fn has_key(&self, key: &StoreKey) -> bool {
        self.entries
            .range((key.backend.clone(), key.block, String::new())..)
            .next()
            .is_some_and(|((b, k, _), _)| b == &key.backend && *k == key.block)
    }

    fn relative_path(session_id: &str, key: &StoreKey) -> String {
        format!("{}/block{}/{}.fmat", sanitize(&key.backend), key.block, sanitize(session_id))
    }

    /// Reads one session's matrix, verifying shape and checksum against the index.
    pub fn get(&self, session_id: &str, key: &StoreKey) -> Result<Array2<f32>> {
        let entry = self.entry(session_id, key).ok_or_else(|| {
            Error::Validation(format!("store has no entry for session {session_id} at {key}"))
        })?;
        let path = self.root.join(&entry.file);
        let m = fmat::read_fmat(&path)?;
        if m.dim() != (entry.rows, entry.cols) {
            return Err(Error::Validation(format!(
                "{}: shape {:?} disagrees with index ({}, {})",
                path.display(),
                m.dim(),
                entry.rows,
                entry.cols
            )));
        }
        if fmat::payload_crc32(&m) != entry.checksum {
            return Err(Error::Validation(format!("{}: checksum mismatch", path.display())));
        }
        Ok(m)
    }

    /// True when the cached entry exists, decodes, and has the expected shape.
    pub fn is_valid(&self, session_id: &str, key: &StoreKey, rows: usize, cols: usize) -> bool {
        match self.entry(session_id, key) {
            Some(e) if e.rows == rows && e.cols == cols => self.get(session_id, key).is_ok(),
            _ => false,
        }
    }

    /// Writes the matrix atomically and records it. The index is persisted by [`flush`](Self::flush).
    pub fn put(&mut self, session_id: &str, key: &StoreKey, m: &Array2<f32>) -> Result<()> {
        let file = Self::relative_path(session_id, key);
        let checksum = fmat::write_fmat(self.root.join(&file), m)?;
        let entry = IndexEntry {
            session_id: session_id.to_string(),
            backend: key.backend.clone(),
            block: key.block,
            file,
            rows: m.nrows(),
            cols: m.ncols(),
            checksum,
        };
        self.entries
            .insert((key.backend.clone(), key.block, session_id.to_string()), entry);
        self.dirty = true;
        Ok(())
    }

    /// Persists the index atomically, sorted by `(backend, block, session_id)`.
    pub fn flush(&mut self) -> Result<()> {
        if !self.dirty {
            return Ok(());
        }
        let mut body = String::new();
        for e in self.entries.values() {
            body.push_str(&serde_json::to_string(e)?);
            body.push('\n');
        }
        fsutil::write_atomic(&self.root.join(INDEX_FILE), body.as_bytes())?;
        self.dirty = false;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaterializeReport {
    pub written: usize,
    pub skipped: usize,
}

const CACHED_SPLITS: [Split; 2] = [Split::Train, Split::Dev];

/// Extracts, pools and caches features for every train and dev session.
///
/// Valid existing entries are skipped, so an interrupted run resumes where it
/// stopped and a completed run is a no-op.
pub fn materialize(
    store: &mut FeatureStore,
    corpus: &Corpus,
    provider: &dyn FeatureProvider,
    filter: SpeakerFilter,
) -> Result<MaterializeReport> {
    let spec = provider.spec().clone();
    spec.validate()?;
    let key = spec.key();
    let mut report = MaterializeReport::default();
    for split in CACHED_SPLITS {
        for d in corpus.split(split) {
            let rows = d.feature_len(filter);
            if rows == 0 {
                return Err(Error::Validation(format!(
                    "session {} has no utterances selected by {filter:?}",
                    d.session_id
                )));
            }
            if store.is_valid(&d.session_id, &key, rows, spec.dim) {
                report.skipped += 1;
                continue;
            }
            let mut m = Array2::<f32>::zeros((rows, spec.dim));
            for (mut row, u) in m.rows_mut().into_iter().zip(d.feature_utterances(filter)) {
                let states = extract_block_states(provider, d, u)?;
                row.assign(&pool_utterance(&states)?);
            }
            store.put(&d.session_id, &key, &m)?;
            report.written += 1;
            if report.written % FLUSH_EVERY == 0 {
                store.flush()?;
            }
        }
    }
    store.flush()?;
    Ok(report)
}

/// Caches every block of a synthetic feature set.
pub fn store_synthetic(
    store: &mut FeatureStore,
    corpus: &Corpus,
    features: &SyntheticFeatures,
) -> Result<Vec<(BackendSpec, MaterializeReport)>> {
    let mut out = Vec::new();
    for block in features.blocks().collect::<Vec<_>>() {
        let provider = SyntheticProvider::new(features, block)?;
        let report = materialize(store, corpus, &provider, SpeakerFilter::ParticipantOnly)?;
        out.push((provider.spec().clone(), report));
    }
    Ok(out)
}

/// Concatenates cached feature sets utterance by utterance, in `members` order,
/// into a new store entry named `cat{a,b,...}` with block 0.
pub fn fuse_stores(store: &mut FeatureStore, corpus: &Corpus, members: &[StoreKey]) -> Result<(BackendSpec, MaterializeReport)> {
    if members.is_empty() {
        return Err(Error::Alignment("fusion needs at least one member".into()));
    }
    let name = format!(
        "cat{{{}}}",
        members.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(",")
    );
    let mut dim = None;
    let mut report = MaterializeReport::default();
    let out_key = StoreKey {
        backend: name.clone(),
        block: 0,
    };
    for split in CACHED_SPLITS {
        for d in corpus.split(split) {
            let parts = members
                .iter()
                .map(|k| store.get(&d.session_id, k))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&Array2<f32>> = parts.iter().collect();
            let fused = fuse_dialogue(&refs).map_err(|e| match e {
                Error::Alignment(msg) => Error::Alignment(format!("session {}: {msg}", d.session_id)),
                other => other,
            })?;
            dim = Some(fused.ncols());
            if store.is_valid(&d.session_id, &out_key, fused.nrows(), fused.ncols()) {
                report.skipped += 1;
                continue;
            }
            store.put(&d.session_id, &out_key, &fused)?;
            report.written += 1;
        }
    }
    store.flush()?;
    let spec = BackendSpec {
        name,
        kind: BackendKind::Fused,
        block: 0,
        depth: 0,
        dim: dim.ok_or_else(|| Error::Validation("corpus has no train/dev sessions".into()))?,
    };
    Ok((spec, report))
}
