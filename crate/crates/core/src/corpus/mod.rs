//! Dialogue data model, manifest ingestion and class counting.
//!
//! A corpus is a set of labeled sessions. Each session is an ordered list of
//! utterances; the session label applies to every utterance. Only the
//! utterances selected by a [`SpeakerFilter`] become feature rows downstream.

mod synthetic;

pub use synthetic::{generate_synthetic, BlockGain, SyntheticConfig, SyntheticFeatures};

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary session label. Serialized as `0` / `1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Label {
    Negative,
    Positive,
}

impl Label {
    pub fn is_positive(self) -> bool {
        self == Label::Positive
    }

    pub fn from_bool(positive: bool) -> Self {
        if positive {
            Label::Positive
        } else {
            Label::Negative
        }
    }
}

impl TryFrom<u8> for Label {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, Self::Error> {
        match v {
            0 => Ok(Label::Negative),
            1 => Ok(Label::Positive),
            other => Err(format!("label must be 0 or 1, got {other}")),
        }
    }
}

impl From<Label> for u8 {
    fn from(l: Label) -> u8 {
        match l {
            Label::Negative => 0,
            Label::Positive => 1,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", u8::from(*self))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    Participant,
    Interviewer,
}

/// Which utterances of a dialogue become feature rows.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpeakerFilter {
    #[default]
    ParticipantOnly,
    All,
}

impl SpeakerFilter {
    pub fn admits(self, speaker: Speaker) -> bool {
        match self {
            SpeakerFilter::ParticipantOnly => speaker == Speaker::Participant,
            SpeakerFilter::All => true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    /// 0-based position within the dialogue, counting every speaker.
    pub index: usize,
    pub start_time: f64,
    pub end_time: f64,
    pub speaker: Speaker,
    pub text: String,
    pub audio_ref: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dialogue {
    pub session_id: String,
    pub label: Label,
    pub split: Split,
    pub utterances: Vec<Utterance>,
}

impl Dialogue {
    /// Utterances that become feature rows, in dialogue order.
    pub fn feature_utterances(&self, filter: SpeakerFilter) -> impl Iterator<Item = &Utterance> {
        self.utterances
            .iter()
            .filter(move |u| filter.admits(u.speaker))
    }

    /// Number of feature rows (the `T` the detector sees).
    pub fn feature_len(&self, filter: SpeakerFilter) -> usize {
        self.feature_utterances(filter).count()
    }

    fn validate(&self) -> Result<()> {
        if self.session_id.is_empty() {
            return Err(Error::Validation("empty session_id".into()));
        }
        if self.utterances.is_empty() {
            return Err(Error::Validation(format!(
                "session {} has no utterances",
                self.session_id
            )));
        }
        for (i, u) in self.utterances.iter().enumerate() {
            if u.index != i {
                return Err(Error::Validation(format!(
                    "session {}: utterance indices must be contiguous from 0 (found {} at {i})",
                    self.session_id, u.index
                )));
            }
            if !(u.start_time.is_finite() && u.end_time.is_finite()) || u.end_time <= u.start_time {
                return Err(Error::Validation(format!(
                    "session {} utterance {i}: end ({}) must exceed start ({})",
                    self.session_id, u.end_time, u.start_time
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub n_pos: usize,
    pub n_neg: usize,
}

impl ClassCounts {
    pub fn total(&self) -> usize {
        self.n_pos + self.n_neg
    }
}

/// An ordered, validated collection of dialogues with unique session ids.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    dialogues: Vec<Dialogue>,
    by_id: HashMap<String, usize>,
}

impl Corpus {
    pub fn new(dialogues: Vec<Dialogue>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(dialogues.len());
        for (i, d) in dialogues.iter().enumerate() {
            d.validate()?;
            if by_id.insert(d.session_id.clone(), i).is_some() {
                return Err(Error::Validation(format!(
                    "duplicate session_id {}",
                    d.session_id
                )));
            }
        }
        Ok(Corpus { dialogues, by_id })
    }

    pub fn dialogues(&self) -> &[Dialogue] {
        &self.dialogues
    }

    pub fn len(&self) -> usize {
        self.dialogues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dialogues.is_empty()
    }

    pub fn get(&self, session_id: &str) -> Option<&Dialogue> {
        self.by_id.get(session_id).map(|&i| &self.dialogues[i])
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Dialogue> {
        self.dialogues.iter().filter(move |d| d.split == split)
    }
}

/// Counts positive and negative dialogues in one split.
pub fn class_counts(corpus: &Corpus, split: Split) -> Result<ClassCounts> {
    if corpus.is_empty() {
        return Err(Error::Validation("corpus is empty".into()));
    }
    let mut counts = ClassCounts { n_pos: 0, n_neg: 0 };
    for d in corpus.split(split) {
        match d.label {
            Label::Positive => counts.n_pos += 1,
            Label::Negative => counts.n_neg += 1,
        }
    }
    if counts.total() == 0 {
        return Err(Error::Validation(format!("split {split} is empty")));
    }
    Ok(counts)
}

#[derive(Serialize, Deserialize)]
struct ManifestUtterance {
    start: f64,
    end: f64,
    speaker: Speaker,
    text: String,
    audio: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct ManifestLine {
    session_id: String,
    label: Label,
    split: Split,
    utterances: Vec<ManifestUtterance>,
}

impl From<ManifestLine> for Dialogue {
    fn from(line: ManifestLine) -> Self {
        Dialogue {
            session_id: line.session_id,
            label: line.label,
            split: line.split,
            utterances: line
                .utterances
                .into_iter()
                .enumerate()
                .map(|(index, u)| Utterance {
                    index,
                    start_time: u.start,
                    end_time: u.end,
                    speaker: u.speaker,
                    text: u.text,
                    audio_ref: u.audio,
                })
                .collect(),
        }
    }
}

impl From<&Dialogue> for ManifestLine {
    fn from(d: &Dialogue) -> Self {
        ManifestLine {
            session_id: d.session_id.clone(),
            label: d.label,
            split: d.split,
            utterances: d
                .utterances
                .iter()
                .map(|u| ManifestUtterance {
                    start: u.start_time,
                    end: u.end_time,
                    speaker: u.speaker,
                    text: u.text.clone(),
                    audio: u.audio_ref.clone(),
                })
                .collect(),
        }
    }
}

/// Parses a JSON-lines manifest. Blank lines are skipped; unknown keys are ignored.
pub fn parse_manifest(reader: impl BufRead, origin: &Path) -> Result<Corpus> {
    let mut dialogues = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(origin, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: origin.to_path_buf(),
                line: line_no,
                message: e.to_string(),
            })?;
        let parsed: ManifestLine = serde_json::from_value(value).map_err(|e| {
            Error::Validation(format!("{}:{line_no}: {e}", origin.display()))
        })?;
        dialogues.push(Dialogue::from(parsed));
    }
    Corpus::new(dialogues)
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(BufReader::new(file), path)
}

/// Serializes a corpus as JSON-lines, one dialogue per line, in corpus order.
pub fn manifest_to_string(corpus: &Corpus) -> Result<String> {
    let mut out = String::new();
    for d in corpus.dialogues() {
        out.push_str(&serde_json::to_string(&ManifestLine::from(d))?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_manifest(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let body = manifest_to_string(corpus)?;
    crate::fsutil::write_atomic(path, body.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn line(id: &str, label: u8, split: &str) -> String {
        format!(
            r#"{{"session_id":"{id}","label":{label},"split":"{split}","utterances":[{{"start":0.0,"end":1.5,"speaker":"interviewer","text":"hi","audio":null}},{{"start":1.6,"end":3.0,"speaker":"participant","text":"hello","audio":"a.wav"}}]}}"#
        )
    }

    fn parse(s: &str) -> Result<Corpus> {
        parse_manifest(Cursor::new(s.as_bytes()), Path::new("m.jsonl"))
    }

    #[test]
    fn two_sessions() {
        let m = format!("{}\n{}\n", line("300", 1, "train"), line("301", 0, "train"));
        let c = parse(&m).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(
            class_counts(&c, Split::Train).unwrap(),
            ClassCounts { n_pos: 1, n_neg: 1 }
        );
        let d = c.get("300").unwrap();
        assert_eq!(d.utterances[1].index, 1);
        assert_eq!(d.utterances[1].audio_ref.as_deref(), Some("a.wav"));
        assert_eq!(d.feature_len(SpeakerFilter::ParticipantOnly), 1);
        assert_eq!(d.feature_len(SpeakerFilter::All), 2);
    }

    #[test]
    fn daic_woz_shaped_counts() {
        let mut lines = Vec::new();
        for i in 0..107 {
            lines.push(line(&format!("tr{i}"), u8::from(i < 30), "train"));
        }
        for i in 0..35 {
            lines.push(line(&format!("dv{i}"), u8::from(i < 12), "dev"));
        }
        let c = parse(&lines.join("\n")).unwrap();
        assert_eq!(
            class_counts(&c, Split::Train).unwrap(),
            ClassCounts { n_pos: 30, n_neg: 77 }
        );
        assert_eq!(
            class_counts(&c, Split::Dev).unwrap(),
            ClassCounts { n_pos: 12, n_neg: 23 }
        );
        assert!(class_counts(&c, Split::Test).is_err());
    }

    #[test]
    fn all_positive_split() {
        let m = format!("{}\n{}", line("a", 1, "train"), line("b", 1, "train"));
        let c = parse(&m).unwrap();
        assert_eq!(
            class_counts(&c, Split::Train).unwrap(),
            ClassCounts { n_pos: 2, n_neg: 0 }
        );
    }

    #[test]
    fn duplicate_id_rejected() {
        let m = format!("{}\n{}", line("a", 1, "train"), line("a", 0, "dev"));
        let err = parse(&m).unwrap_err();
        assert!(matches!(err, Error::Validation(ref s) if s.contains("duplicate")), "{err}");
    }

    #[test]
    fn malformed_line_names_line_number() {
        let m = format!("{}\n\n{{not json\n", line("a", 1, "train"));
        match parse(&m).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn missing_field_is_validation_error() {
        let m = r#"{"session_id":"a","split":"train","utterances":[]}"#;
        let err = parse(m).unwrap_err();
        assert!(matches!(err, Error::Validation(ref s) if s.contains("label")), "{err}");
    }

    #[test]
    fn bad_times_and_empty_dialogue_rejected() {
        let m = r#"{"session_id":"a","label":0,"split":"train","utterances":[{"start":2.0,"end":1.0,"speaker":"participant","text":"","audio":null}]}"#;
        assert!(matches!(parse(m), Err(Error::Validation(_))));
        let m = r#"{"session_id":"a","label":0,"split":"train","utterances":[]}"#;
        assert!(matches!(parse(m), Err(Error::Validation(_))));
        let m = r#"{"session_id":"a","label":2,"split":"train","utterances":[]}"#;
        assert!(matches!(parse(m), Err(Error::Validation(_))));
    }

    #[test]
    fn unknown_keys_ignored_and_round_trip() {
        let m = r#"{"session_id":"a","label":1,"split":"dev","extra":[1,2],"utterances":[{"start":0.5,"end":0.75,"speaker":"participant","text":"","audio":null,"phq":3}]}"#;
        let c = parse(m).unwrap();
        let written = manifest_to_string(&c).unwrap();
        let again = parse(&written).unwrap();
        assert_eq!(c, again);
        assert_eq!(manifest_to_string(&again).unwrap(), written);
    }
}
