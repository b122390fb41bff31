use std::collections::{BTreeMap, HashMap};

use ndarray::Array2;
use proptest::prelude::*;

use sddprobe::augment::{build_plan, AugmentParams, BalanceMode};
use sddprobe::backend::fmat;
use sddprobe::corpus::{
    class_counts, manifest_to_string, parse_manifest, Corpus, Dialogue, Label, Speaker, SpeakerFilter, Split,
    Utterance,
};
use sddprobe::evalharness::{f1, f1_labels, majority_vote, SeedStats};

fn utterance(index: usize, participant: bool, text: String, audio: bool) -> Utterance {
    Utterance {
        index,
        start_time: index as f64 * 1.5,
        end_time: index as f64 * 1.5 + 1.25,
        speaker: if participant { Speaker::Participant } else { Speaker::Interviewer },
        text,
        audio_ref: audio.then(|| format!("audio/{index}.wav")),
    }
}

fn arb_dialogue(id: usize) -> impl Strategy<Value = Dialogue> {
    (
        any::<bool>(),
        0usize..3,
        prop::collection::vec((any::<bool>(), "[a-z \"\\\\é]{0,12}", any::<bool>()), 1..8),
    )
        .prop_map(move |(pos, split, utts)| {
            let mut utterances: Vec<Utterance> = utts
                .into_iter()
                .enumerate()
                .map(|(i, (p, t, a))| utterance(i, p, t, a))
                .collect();
            utterances[0].speaker = Speaker::Participant;
            Dialogue {
                session_id: format!("s{id:03}"),
                label: Label::from_bool(pos),
                split: [Split::Train, Split::Dev, Split::Test][split],
                utterances,
            }
        })
}

fn arb_corpus() -> impl Strategy<Value = Vec<Dialogue>> {
    (1usize..12).prop_flat_map(|n| (0..n).map(arb_dialogue).collect::<Vec<_>>())
}

/// Train corpus of the given class sizes with dialogue lengths from `lens`.
fn train_corpus(n_pos: usize, n_neg: usize, lens: &[usize]) -> Corpus {
    let dialogues = (0..n_pos + n_neg)
        .map(|i| Dialogue {
            session_id: format!("d{i}"),
            label: Label::from_bool(i < n_pos),
            split: Split::Train,
            utterances: (0..lens[i % lens.len()]).map(|j| utterance(j, true, "x".into(), false)).collect(),
        })
        .collect();
    Corpus::new(dialogues).unwrap()
}

fn confusion_oracle(preds: &[bool], refs: &[bool]) -> f64 {
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut fn_ = 0.0;
    for (&p, &r) in preds.iter().zip(refs) {
        match (p, r) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fn_ += 1.0,
            _ => {}
        }
    }
    if tp == 0.0 {
        0.0
    } else {
        2.0 * tp / (2.0 * tp + fp + fn_)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn manifest_round_trip(dialogues in arb_corpus()) {
        let corpus = Corpus::new(dialogues).unwrap();
        let text = manifest_to_string(&corpus).unwrap();
        let back = parse_manifest(text.as_bytes(), std::path::Path::new("mem")).unwrap();
        prop_assert_eq!(back.dialogues(), corpus.dialogues());
        prop_assert_eq!(manifest_to_string(&back).unwrap(), text);
    }

    #[test]
    fn class_counts_sum_to_split_size(dialogues in arb_corpus()) {
        let corpus = Corpus::new(dialogues).unwrap();
        for split in [Split::Train, Split::Dev, Split::Test] {
            let size = corpus.split(split).count();
            match class_counts(&corpus, split) {
                Ok(c) => prop_assert_eq!(c.total(), size),
                Err(_) => prop_assert_eq!(size, 0),
            }
        }
    }

    #[test]
    fn plan_invariants(
        n_pos in 1usize..15,
        n_neg in 1usize..15,
        m_plus in 1usize..40,
        eps_low in 0.05f64..0.9,
        width in 0.05f64..1.0,
        lens in prop::collection::vec(1usize..30, 1..6),
        seed in any::<u64>(),
    ) {
        let eps_high = (eps_low + width).min(1.0);
        let corpus = train_corpus(n_pos, n_neg, &lens);
        let params = AugmentParams { m_plus, eps_low, eps_high, seed, balance_mode: BalanceMode::Corrected };
        let plan = build_plan(&corpus, &params, SpeakerFilter::ParticipantOnly).unwrap();

        let n_p = plan.count_label(Label::Positive) as f64;
        let n_n = plan.count_label(Label::Negative) as f64;
        if n_pos * m_plus * 2 >= n_neg {
            prop_assert!((n_p - n_n).abs() <= n_neg as f64 / 2.0 + 1.0);
        } else {
            prop_assert_eq!(plan.m_minus, 1);
        }

        let mut per: HashMap<&str, usize> = HashMap::new();
        for e in &plan.entries {
            let d = corpus.get(&e.session_id).unwrap();
            let t = d.utterances.len();
            prop_assert!(e.s <= e.e && e.e < t);
            prop_assert_eq!(e.label, d.label);
            let len = e.e - e.s + 1;
            prop_assert!(len <= ((eps_high * t as f64).floor() as usize).max(1));
            prop_assert!(len + 1 >= ((eps_low * t as f64).floor() as usize).max(1));
            *per.entry(&e.session_id).or_default() += 1;
        }
        for d in corpus.dialogues() {
            let want = if d.label.is_positive() { m_plus } else { plan.m_minus };
            prop_assert_eq!(per.get(d.session_id.as_str()).copied().unwrap_or(0), want);
        }
    }

    #[test]
    fn plan_is_deterministic(seed in any::<u64>(), m_plus in 1usize..20) {
        let corpus = train_corpus(3, 5, &[4, 9, 13]);
        let params = AugmentParams { m_plus, seed, ..Default::default() };
        let a = build_plan(&corpus, &params, SpeakerFilter::ParticipantOnly).unwrap();
        let b = build_plan(&corpus, &params, SpeakerFilter::ParticipantOnly).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn f1_matches_oracle(pairs in prop::collection::vec((any::<bool>(), any::<bool>()), 0..40)) {
        let preds: Vec<bool> = pairs.iter().map(|p| p.0).collect();
        let refs: Vec<bool> = pairs.iter().map(|p| p.1).collect();
        let to_labels = |v: &[bool]| v.iter().map(|&b| Label::from_bool(b)).collect::<Vec<_>>();
        let got = f1_labels(&to_labels(&preds), &to_labels(&refs)).unwrap().f1;
        prop_assert!((got - confusion_oracle(&preds, &refs)).abs() < 1e-12);

        let keyed = |v: &[bool]| v.iter().enumerate().map(|(i, &b)| (format!("s{i}"), Label::from_bool(b))).collect::<BTreeMap<_, _>>();
        prop_assert_eq!(f1(&keyed(&preds), &keyed(&refs)).unwrap().f1, got);
    }

    #[test]
    fn seed_stats_invariants(mut scores in prop::collection::vec(0.0f64..=1.0, 1..25), rot in 0usize..25) {
        let s = SeedStats::from_scores(&scores).unwrap();
        let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
        prop_assert!(min - 1e-12 <= s.f1_avg && s.f1_avg <= s.f1_max);
        prop_assert!(s.f1_std >= 0.0);
        prop_assert!((0.0..=1.0).contains(&s.f1_avg) && (0.0..=1.0).contains(&s.f1_max));
        let k = rot % scores.len();
        scores.rotate_left(k);
        scores.reverse();
        let t = SeedStats::from_scores(&scores).unwrap();
        prop_assert!((t.f1_std - s.f1_std).abs() < 1e-12);
        prop_assert_eq!(t.f1_max, s.f1_max);
    }

    #[test]
    fn vote_identity_and_idempotence(labels in prop::collection::vec(any::<bool>(), 0..30), k in 0usize..3) {
        let member: Vec<Label> = labels.iter().map(|&b| Label::from_bool(b)).collect();
        prop_assert_eq!(majority_vote(std::slice::from_ref(&member)).unwrap(), member.clone());
        let copies = vec![member.clone(); 2 * k + 1];
        prop_assert_eq!(majority_vote(&copies).unwrap(), member);
    }

    #[test]
    fn fmat_round_trip(rows in 1usize..20, cols in 1usize..20, bits in prop::collection::vec(any::<u32>(), 400)) {
        let m = Array2::from_shape_fn((rows, cols), |(i, j)| f32::from_bits(bits[i * cols + j]));
        let bytes = fmat::encode(&m).unwrap();
        let back = fmat::decode(&bytes).unwrap();
        prop_assert_eq!(back.dim(), m.dim());
        prop_assert!(back.iter().zip(m.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        let cut = bytes.len() - 1;
        prop_assert!(fmat::decode(&bytes[..cut]).is_err());
    }
}
