//! Sub-dialogue shuffling: class-balanced augmentation of the train split by
//! sampling contiguous utterance spans that inherit their session's label.
//!
//! Plans hold index ranges only. Features are never copied; the trainer slices
//! rows `s..=e` of the cached session matrix when it consumes an entry.
//!
//! Draw order (part of the plan contract): one [`ChaCha8Rng`] seeded with
//! `AugmentParams::seed`; train dialogues visited in manifest order; for each
//! dialogue its `M+` or `M-` entries are generated back to back, each entry
//! consuming exactly two `next_u64` draws (length fraction, then start).
//! A draw maps to `[0, 1)` as `(x >> 11) * 2^-53`.

use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{ClassCounts, Corpus, Label, SpeakerFilter, Split};
use crate::error::{Error, Result};
use crate::fsutil;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BalanceMode {
    /// `M- = round(N+ * M+ / N-)`, which equalizes the two classes.
    #[default]
    Corrected,
    /// `M- = round(N- * M+ / N+)`, the formula as commonly printed.
    Literal,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentParams {
    /// Sub-dialogues per positive dialogue.
    pub m_plus: usize,
    pub eps_low: f64,
    pub eps_high: f64,
    pub seed: u64,
    pub balance_mode: BalanceMode,
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams {
            m_plus: 500,
            eps_low: 0.3,
            eps_high: 1.0,
            seed: 0,
            balance_mode: BalanceMode::Corrected,
        }
    }
}

impl AugmentParams {
    pub fn validate(&self) -> Result<()> {
        if self.m_plus == 0 {
            return Err(Error::Config("m_plus must be >= 1".into()));
        }
        if !(self.eps_low > 0.0 && self.eps_low < self.eps_high && self.eps_high <= 1.0) {
            return Err(Error::Config(format!(
                "need 0 < eps_low < eps_high <= 1, got eps_low={} eps_high={}",
                self.eps_low, self.eps_high
            )));
        }
        Ok(())
    }
}

/// Inclusive utterance range `s..=e` of one source session.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubDialogueRef {
    pub session_id: String,
    pub s: usize,
    pub e: usize,
    pub label: Label,
}

impl SubDialogueRef {
    /// Number of utterances covered.
    pub fn span_len(&self) -> usize {
        self.e - self.s + 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentationPlan {
    pub params: AugmentParams,
    pub m_minus: usize,
    pub entries: Vec<SubDialogueRef>,
}

impl AugmentationPlan {
    pub fn count_label(&self, label: Label) -> usize {
        self.entries.iter().filter(|e| e.label == label).count()
    }
}

fn round_ratio_ties_even(num: u128, den: u128) -> u128 {
    let q = num / den;
    let r = num % den;
    match (2 * r).cmp(&den) {
        std::cmp::Ordering::Greater => q + 1,
        std::cmp::Ordering::Equal => q + (q & 1),
        std::cmp::Ordering::Less => q,
    }
}

/// Number of sub-dialogues drawn from each negative dialogue. Clamped to at least 1.
pub fn negative_multiplier(counts: ClassCounts, m_plus: usize, mode: BalanceMode) -> Result<usize> {
    if counts.n_pos == 0 || counts.n_neg == 0 {
        return Err(Error::Validation(format!(
            "class balancing needs both classes in the train split (N+={}, N-={}); \
             disable augmentation balancing for single-class data",
            counts.n_pos, counts.n_neg
        )));
    }
    let (n_pos, n_neg, m) = (counts.n_pos as u128, counts.n_neg as u128, m_plus as u128);
    let raw = match mode {
        BalanceMode::Corrected => round_ratio_ties_even(n_pos * m, n_neg),
        BalanceMode::Literal => round_ratio_ties_even(n_neg * m, n_pos),
    };
    usize::try_from(raw.max(1)).map_err(|_| Error::Config("negative multiplier overflows".into()))
}

/// Maps a raw 64-bit draw to `[0, 1)` with 53 bits of precision.
pub fn unit_draw(x: u64) -> f64 {
    (x >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Span of `L = max(1, floor(eps * t))` utterances whose start is chosen by
/// `u_start` in `[0, 1)` uniformly over the `t - L + 1` admissible positions.
pub fn span_for_epsilon(t: usize, eps: f64, u_start: f64) -> (usize, usize) {
    debug_assert!(t >= 1);
    let len = ((eps * t as f64).floor() as usize).clamp(1, t);
    let positions = t - len + 1;
    let s = ((u_start * positions as f64) as usize).min(positions - 1);
    (s, s + len - 1)
}

/// Draws one sub-dialogue of a `t`-utterance dialogue. Consumes exactly two draws.
pub fn sample_subdialogue(t: usize, params: &AugmentParams, rng: &mut impl RngCore) -> (usize, usize) {
    let u_eps = unit_draw(rng.next_u64());
    let u_start = unit_draw(rng.next_u64());
    let mut eps = params.eps_low + u_eps * (params.eps_high - params.eps_low);
    if eps >= params.eps_high {
        eps = params.eps_high.next_down();
    }
    span_for_epsilon(t.max(1), eps, u_start)
}

/// Materializes the balanced plan for the train split of `corpus`.
pub fn build_plan(corpus: &Corpus, params: &AugmentParams, filter: SpeakerFilter) -> Result<AugmentationPlan> {
    params.validate()?;
    let mut counts = ClassCounts { n_pos: 0, n_neg: 0 };
    for d in corpus.split(Split::Train) {
        match d.label {
            Label::Positive => counts.n_pos += 1,
            Label::Negative => counts.n_neg += 1,
        }
    }
    let m_minus = negative_multiplier(counts, params.m_plus, params.balance_mode)?;

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut entries = Vec::with_capacity(counts.n_pos * params.m_plus + counts.n_neg * m_minus);
    for d in corpus.split(Split::Train) {
        let t = d.feature_len(filter);
        if t == 0 {
            return Err(Error::Validation(format!(
                "session {} has no utterances selected by {filter:?}",
                d.session_id
            )));
        }
        let m = if d.label.is_positive() { params.m_plus } else { m_minus };
        for _ in 0..m {
            let (s, e) = sample_subdialogue(t, params, &mut rng);
            entries.push(SubDialogueRef {
                session_id: d.session_id.clone(),
                s,
                e,
                label: d.label,
            });
        }
    }
    Ok(AugmentationPlan {
        params: *params,
        m_minus,
        entries,
    })
}

#[derive(Serialize, Deserialize)]
struct PlanHeader {
    params: AugmentParams,
    m_minus: usize,
    n_entries: usize,
}

/// JSON-lines plan: a header object echoing the parameters, then one entry per line.
pub fn plan_to_string(plan: &AugmentationPlan) -> Result<String> {
    let header = PlanHeader {
        params: plan.params,
        m_minus: plan.m_minus,
        n_entries: plan.entries.len(),
    };
    let mut out = serde_json::to_string(&header)?;
    out.push('\n');
    for e in &plan.entries {
        out.push_str(&serde_json::to_string(e)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_plan(plan: &AugmentationPlan, path: impl AsRef<Path>) -> Result<()> {
    fsutil::write_atomic(path.as_ref(), plan_to_string(plan)?.as_bytes())
}

pub fn read_plan(path: impl AsRef<Path>) -> Result<AugmentationPlan> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, e: serde_json::Error| Error::Parse {
        path: path.to_path_buf(),
        line,
        message: e.to_string(),
    };
    let mut lines = BufReader::new(file).lines().enumerate();
    let header: PlanHeader = match lines.next() {
        Some((_, l)) => {
            serde_json::from_str(&l.map_err(|e| Error::io(path, e))?).map_err(|e| parse_err(1, e))?
        }
        None => return Err(Error::Validation(format!("{}: empty plan file", path.display()))),
    };
    let mut entries = Vec::with_capacity(header.n_entries);
    for (i, l) in lines {
        let l = l.map_err(|e| Error::io(path, e))?;
        if l.trim().is_empty() {
            continue;
        }
        let e: SubDialogueRef = serde_json::from_str(&l).map_err(|e| parse_err(i + 1, e))?;
        if e.e < e.s {
            return Err(Error::Validation(format!("{}:{}: e < s", path.display(), i + 1)));
        }
        entries.push(e);
    }
    if entries.len() != header.n_entries {
        return Err(Error::Validation(format!(
            "{}: header declares {} entries, found {}",
            path.display(),
            header.n_entries,
            entries.len()
        )));
    }
    Ok(AugmentationPlan {
        params: header.params,
        m_minus: header.m_minus,
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Dialogue, Speaker, Utterance};

    fn counts(n_pos: usize, n_neg: usize) -> ClassCounts {
        ClassCounts { n_pos, n_neg }
    }

    #[test]
    fn corrected_multiplier_daic_shape() {
        let m = negative_multiplier(counts(30, 77), 500, BalanceMode::Corrected).unwrap();
        assert_eq!(m, 195);
        // exhaustive oracle: 195 minimizes |15000 - 77 * m|
        let best = (1..=2000usize)
            .min_by_key(|&k| (15000i64 - 77 * k as i64).abs())
            .unwrap();
        assert_eq!(best, 195);
        assert_eq!((30i64 * 500 - 77 * 195).abs(), 15);
    }

    #[test]
    fn literal_multiplier_daic_shape() {
        assert_eq!(
            negative_multiplier(counts(30, 77), 500, BalanceMode::Literal).unwrap(),
            1283
        );
    }

    #[test]
    fn symmetric_classes() {
        for k in [1, 7, 30, 1000] {
            for mode in [BalanceMode::Corrected, BalanceMode::Literal] {
                assert_eq!(negative_multiplier(counts(k, k), 500, mode).unwrap(), 500);
            }
        }
    }

    #[test]
    fn ties_round_to_even_and_clamp() {
        // 1 * 5 / 2 = 2.5 -> 2 ; 3 * 5 / 2 = 7.5 -> 8
        assert_eq!(negative_multiplier(counts(1, 2), 5, BalanceMode::Corrected).unwrap(), 2);
        assert_eq!(negative_multiplier(counts(3, 2), 5, BalanceMode::Corrected).unwrap(), 8);
        assert_eq!(negative_multiplier(counts(1, 100), 1, BalanceMode::Corrected).unwrap(), 1);
    }

    #[test]
    fn zero_counts_rejected() {
        assert!(negative_multiplier(counts(0, 5), 10, BalanceMode::Corrected).is_err());
        assert!(negative_multiplier(counts(5, 0), 10, BalanceMode::Literal).is_err());
    }

    #[test]
    fn forced_half_length_enumeration() {
        // t=10, eps=0.5 -> L=5, admissible starts {0..5}
        let mut seen = std::collections::BTreeSet::new();
        for k in 0..6000 {
            let u = k as f64 / 6000.0;
            let (s, e) = span_for_epsilon(10, 0.5, u);
            assert_eq!(e, s + 4);
            assert!(e <= 9);
            seen.insert(s);
        }
        assert_eq!(seen.into_iter().collect::<Vec<_>>(), (0..=5).collect::<Vec<_>>());
    }

    #[test]
    fn single_utterance_clamps() {
        let params = AugmentParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            assert_eq!(sample_subdialogue(1, &params, &mut rng), (0, 0));
        }
        assert_eq!(span_for_epsilon(1, 0.01, 0.99), (0, 0));
    }

    #[test]
    fn full_length_limit() {
        // Full-length slices come from the closed end of the range only.
        assert_eq!(span_for_epsilon(10, 1.0, 0.7), (0, 9));
        // Anything strictly below 1 drops at least one utterance for t = 10.
        let params = AugmentParams {
            eps_low: 1.0f64.next_down(),
            eps_high: 1.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let (s, e) = sample_subdialogue(10, &params, &mut rng);
            assert_eq!(e - s + 1, 9);
        }
    }

    #[test]
    fn two_draws_per_sample() {
        let params = AugmentParams::default();
        let mut a = ChaCha8Rng::seed_from_u64(11);
        let mut b = ChaCha8Rng::seed_from_u64(11);
        sample_subdialogue(7, &params, &mut a);
        b.next_u64();
        b.next_u64();
        assert_eq!(a.next_u64(), b.next_u64());
    }

    fn toy_corpus(labels: &[(Split, Label, usize)]) -> Corpus {
        let dialogues = labels
            .iter()
            .enumerate()
            .map(|(i, &(split, label, t))| Dialogue {
                session_id: format!("s{i}"),
                label,
                split,
                utterances: (0..t)
                    .map(|k| Utterance {
                        index: k,
                        start_time: k as f64,
                        end_time: k as f64 + 0.5,
                        speaker: Speaker::Participant,
                        text: String::new(),
                        audio_ref: None,
                    })
                    .collect(),
            })
            .collect();
        Corpus::new(dialogues).unwrap()
    }

    #[test]
    fn toy_plan_one_each() {
        let c = toy_corpus(&[
            (Split::Train, Label::Positive, 4),
            (Split::Train, Label::Negative, 3),
            (Split::Dev, Label::Positive, 3),
        ]);
        let params = AugmentParams { m_plus: 1, ..Default::default() };
        let plan = build_plan(&c, &params, SpeakerFilter::ParticipantOnly).unwrap();
        assert_eq!(plan.entries.len(), 2);
        assert_eq!(plan.entries[0].label, Label::Positive);
        assert_eq!(plan.entries[1].label, Label::Negative);
        assert_eq!(plan, build_plan(&c, &params, SpeakerFilter::ParticipantOnly).unwrap());
    }

    #[test]
    fn daic_shaped_plan_sizes() {
        let mut spec = vec![(Split::Train, Label::Positive, 12); 30];
        spec.extend(vec![(Split::Train, Label::Negative, 9); 77]);
        let c = toy_corpus(&spec);
        let plan = build_plan(&c, &AugmentParams::default(), SpeakerFilter::ParticipantOnly).unwrap();
        assert_eq!(plan.m_minus, 195);
        assert_eq!(plan.count_label(Label::Positive), 15000);
        assert_eq!(plan.count_label(Label::Negative), 15015);
    }

    #[test]
    fn single_class_rejected() {
        let c = toy_corpus(&[(Split::Train, Label::Positive, 4), (Split::Dev, Label::Negative, 4)]);
        let err = build_plan(&c, &AugmentParams::default(), SpeakerFilter::ParticipantOnly).unwrap_err();
        assert!(err.to_string().contains("disable"), "{err}");
    }

    #[test]
    fn invalid_params_rejected() {
        let c = toy_corpus(&[(Split::Train, Label::Positive, 4), (Split::Train, Label::Negative, 4)]);
        for p in [
            AugmentParams { m_plus: 0, ..Default::default() },
            AugmentParams { eps_low: 0.0, ..Default::default() },
            AugmentParams { eps_low: 0.5, eps_high: 0.5, ..Default::default() },
            AugmentParams { eps_high: 1.1, ..Default::default() },
        ] {
            assert!(matches!(
                build_plan(&c, &p, SpeakerFilter::ParticipantOnly),
                Err(Error::Config(_))
            ));
        }
    }

    #[test]
    fn start_positions_uniform_chi_square() {
        // eps fixed at 0.4 with t = 20 -> L = 8, 13 admissible starts.
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 26_000;
        let mut hist = [0usize; 13];
        for _ in 0..n {
            let u = unit_draw(rng.next_u64());
            let (s, e) = span_for_epsilon(20, 0.4, u);
            assert_eq!(e - s + 1, 8);
            hist[s] += 1;
        }
        let expected = n as f64 / 13.0;
        let chi2: f64 = hist.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
        // 12 degrees of freedom, p = 0.001 critical value
        assert!(chi2 < 32.91, "chi2 = {chi2}, hist = {hist:?}");
    }

    #[test]
    fn plan_file_round_trip() {
        let c = toy_corpus(&[
            (Split::Train, Label::Positive, 6),
            (Split::Train, Label::Negative, 5),
            (Split::Train, Label::Negative, 2),
        ]);
        let params = AugmentParams { m_plus: 4, seed: 5, ..Default::default() };
        let plan = build_plan(&c, &params, SpeakerFilter::ParticipantOnly).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("plan.jsonl");
        write_plan(&plan, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.lines().nth(1).unwrap().starts_with(r#"{"session_id":"s0","s":"#));
        assert_eq!(read_plan(&p).unwrap(), plan);
    }
}
