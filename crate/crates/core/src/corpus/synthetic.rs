//! Deterministic stand-in corpus for desk-scale experiments.
//!
//! Every utterance of a positive session gets a feature vector drawn from
//! `N(signal * gain_k * u, noise_sigma^2 I)`, negatives from `N(0, noise_sigma^2 I)`,
//! where `u` is a unit direction fixed by the seed and `gain_k` is the
//! per-block signal multiplier. Streams are split per block so a block's
//! features do not depend on which other blocks were requested.

use std::collections::{BTreeMap, HashMap};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Corpus, Dialogue, Label, Speaker, Split, Utterance};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockGain {
    pub block: u32,
    pub gain: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    /// Positive train sessions.
    pub n_pos: usize,
    /// Negative train sessions.
    pub n_neg: usize,
    pub dev_pos: usize,
    pub dev_neg: usize,
    /// Inclusive range of utterances per session.
    pub t_range: (usize, usize),
    pub dim: usize,
    pub signal: f64,
    pub noise_sigma: f64,
    /// Per-block multipliers on `signal`. Empty means one block-agnostic store (block 0).
    pub block_gains: Vec<BlockGain>,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_pos: 20,
            n_neg: 20,
            dev_pos: 6,
            dev_neg: 6,
            t_range: (6, 14),
            dim: 32,
            signal: 5.0,
            noise_sigma: 1.0,
            block_gains: Vec::new(),
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.t_range;
        if lo < 2 || hi < lo {
            return Err(Error::Config(format!(
                "t_range must satisfy 2 <= min <= max, got ({lo}, {hi})"
            )));
        }
        if self.dim == 0 {
            return Err(Error::Config("dim must be positive".into()));
        }
        if !(self.signal >= 0.0 && self.signal.is_finite()) {
            return Err(Error::Config(format!("signal must be >= 0, got {}", self.signal)));
        }
        if !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!(
                "noise_sigma must be > 0, got {}",
                self.noise_sigma
            )));
        }
        if self.n_pos + self.n_neg + self.dev_pos + self.dev_neg == 0 {
            return Err(Error::Config("synthetic corpus would be empty".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for g in &self.block_gains {
            if !seen.insert(g.block) {
                return Err(Error::Config(format!("block {} listed twice", g.block)));
            }
            if !(g.gain >= 0.0 && g.gain.is_finite()) {
                return Err(Error::Config(format!("block {} gain must be >= 0", g.block)));
            }
        }
        Ok(())
    }

    /// Blocks this config produces, with their gains.
    pub fn blocks(&self) -> Vec<BlockGain> {
        if self.block_gains.is_empty() {
            vec![BlockGain { block: 0, gain: 1.0 }]
        } else {
            let mut g = self.block_gains.clone();
            g.sort_by_key(|b| b.block);
            g
        }
    }
}

/// In-memory pooled features produced by [`generate_synthetic`].
#[derive(Clone, Debug)]
pub struct SyntheticFeatures {
    pub dim: usize,
    /// Unit class direction.
    pub direction: Vec<f64>,
    blocks: BTreeMap<u32, HashMap<String, Array2<f32>>>,
}

impl SyntheticFeatures {
    pub fn get(&self, block: u32, session_id: &str) -> Option<&Array2<f32>> {
        self.blocks.get(&block)?.get(session_id)
    }

    pub fn blocks(&self) -> impl Iterator<Item = u32> + '_ {
        self.blocks.keys().copied()
    }
}

/// Builds the synthetic corpus and its features. A pure function of `config`.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<(Corpus, SyntheticFeatures)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut direction: Vec<f64> = (0..config.dim).map(|_| rng.sample(StandardNormal)).collect();
    let norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        direction.iter_mut().for_each(|v| *v /= norm);
    } else {
        direction[0] = 1.0;
    }

    let groups = [
        (Split::Train, Label::Positive, config.n_pos),
        (Split::Train, Label::Negative, config.n_neg),
        (Split::Dev, Label::Positive, config.dev_pos),
        (Split::Dev, Label::Negative, config.dev_neg),
    ];
    let mut dialogues = Vec::new();
    for (split, label, n) in groups {
        for i in 0..n {
            let session_id = format!("syn-{split}-{}-{i:03}", if label.is_positive() { "p" } else { "n" });
            let t = rng.gen_range(config.t_range.0..=config.t_range.1);
            let utterances = (0..t)
                .map(|k| Utterance {
                    index: k,
                    start_time: 2.0 * k as f64,
                    end_time: 2.0 * k as f64 + 1.5,
                    speaker: Speaker::Participant,
                    text: format!("{session_id} utterance {k}"),
                    audio_ref: None,
                })
                .collect();
            dialogues.push(Dialogue {
                session_id,
                label,
                split,
                utterances,
            });
        }
    }
    let corpus = Corpus::new(dialogues)?;

    let mut blocks = BTreeMap::new();
    for BlockGain { block, gain } in config.blocks() {
        let mut brng = ChaCha8Rng::seed_from_u64(config.seed);
        brng.set_stream(u64::from(block) + 1);
        let shift = config.signal * gain;
        let mut per_session = HashMap::new();
        for d in corpus.dialogues() {
            let t = d.utterances.len();
            let mean = if d.label.is_positive() { shift } else { 0.0 };
            let mut m = Array2::<f32>::zeros((t, config.dim));
            for mut row in m.rows_mut() {
                for (j, x) in row.iter_mut().enumerate() {
                    let z: f64 = brng.sample(StandardNormal);
                    *x = (mean * direction[j] + config.noise_sigma * z) as f32;
                }
            }
            per_session.insert(d.session_id.clone(), m);
        }
        blocks.insert(block, per_session);
    }

    Ok((
        corpus,
        SyntheticFeatures {
            dim: config.dim,
            direction,
            blocks,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{class_counts, SpeakerFilter};

    fn small() -> SyntheticConfig {
        SyntheticConfig {
            n_pos: 3,
            n_neg: 4,
            dev_pos: 1,
            dev_neg: 2,
            t_range: (2, 5),
            dim: 6,
            ..Default::default()
        }
    }

    #[test]
    fn shapes_and_counts() {
        let cfg = small();
        let (corpus, feats) = generate_synthetic(&cfg).unwrap();
        assert_eq!(corpus.len(), 10);
        assert_eq!(class_counts(&corpus, Split::Train).unwrap().n_neg, 4);
        for d in corpus.dialogues() {
            let t = d.feature_len(SpeakerFilter::ParticipantOnly);
            assert!((2..=5).contains(&t));
            assert_eq!(feats.get(0, &d.session_id).unwrap().dim(), (t, 6));
        }
        let n: f64 = feats.direction.iter().map(|v| v * v).sum();
        assert!((n - 1.0).abs() < 1e-12);
    }

    #[test]
    fn deterministic() {
        let (c1, f1) = generate_synthetic(&small()).unwrap();
        let (c2, f2) = generate_synthetic(&small()).unwrap();
        assert_eq!(c1, c2);
        for d in c1.dialogues() {
            assert_eq!(f1.get(0, &d.session_id), f2.get(0, &d.session_id));
        }
        let mut other = small();
        other.seed = 1;
        let (_, f3) = generate_synthetic(&other).unwrap();
        let id = &c1.dialogues()[0].session_id;
        assert_ne!(f1.get(0, id), f3.get(0, id));
    }

    #[test]
    fn block_streams_are_independent_of_block_set() {
        let mut a = small();
        a.block_gains = vec![BlockGain { block: 8, gain: 1.0 }];
        let mut b = small();
        b.block_gains = vec![
            BlockGain { block: 2, gain: 0.1 },
            BlockGain { block: 8, gain: 1.0 },
        ];
        let (c, fa) = generate_synthetic(&a).unwrap();
        let (_, fb) = generate_synthetic(&b).unwrap();
        for d in c.dialogues() {
            assert_eq!(fa.get(8, &d.session_id), fb.get(8, &d.session_id));
        }
        assert!(fa.get(0, &c.dialogues()[0].session_id).is_none());
    }

    #[test]
    fn positive_mean_shift_along_direction() {
        let cfg = SyntheticConfig {
            n_pos: 30,
            n_neg: 30,
            dev_pos: 0,
            dev_neg: 0,
            signal: 2.0,
            ..Default::default()
        };
        let (c, f) = generate_synthetic(&cfg).unwrap();
        let mut proj = [(0.0, 0usize); 2];
        for d in c.dialogues() {
            let m = f.get(0, &d.session_id).unwrap();
            for row in m.rows() {
                let p: f64 = row.iter().zip(&f.direction).map(|(x, u)| *x as f64 * u).sum();
                let k = usize::from(d.label.is_positive());
                proj[k].0 += p;
                proj[k].1 += 1;
            }
        }
        let neg = proj[0].0 / proj[0].1 as f64;
        let pos = proj[1].0 / proj[1].1 as f64;
        assert!(neg.abs() < 0.15, "{neg}");
        assert!((pos - 2.0).abs() < 0.15, "{pos}");
    }

    #[test]
    fn invalid_configs() {
        let bad = [
            SyntheticConfig { t_range: (1, 4), ..small() },
            SyntheticConfig { t_range: (5, 4), ..small() },
            SyntheticConfig { signal: -1.0, ..small() },
            SyntheticConfig { noise_sigma: 0.0, ..small() },
            SyntheticConfig { dim: 0, ..small() },
        ];
        for cfg in bad {
            assert!(matches!(generate_synthetic(&cfg), Err(Error::Config(_))), "{cfg:?}");
        }
    }
}
