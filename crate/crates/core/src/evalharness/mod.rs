//! Multi-seed evaluation: per-seed runs, F1 statistics, block and M⁺ sweeps,
//! majority-vote ensembles and summary reports.

pub mod metrics;
mod report;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::augment::{build_plan, AugmentParams, AugmentationPlan};
use crate::backend::{FeatureStore, StoreKey};
use crate::corpus::{Corpus, Label, SpeakerFilter};
use crate::detector::{read_dev_predictions, train_on, DetectorConfig, TrainConfig, TrainingData};
use crate::error::{Error, Result};
use crate::fsutil;

pub use metrics::{f1, f1_labels, Confusion, F1Score};
pub use report::{read_sweep, render_svg, report, summary_csv, write_sweep, SystemSweep};

pub const STATS_FILE: &str = "stats.json";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedStats {
    pub f1_avg: f64,
    pub f1_max: f64,
    /// Sample standard deviation (n−1 denominator); 0 for a single seed.
    pub f1_std: f64,
    pub n_seeds: usize,
}

impl SeedStats {
    pub fn from_scores(scores: &[f64]) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::Validation("no per-seed scores".into()));
        }
        if let Some(bad) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::Validation(format!("F1 {bad} outside [0, 1]")));
        }
        let n = scores.len();
        // offset from the first score keeps constant inputs exact
        let avg = scores[0] + scores.iter().map(|s| s - scores[0]).sum::<f64>() / n as f64;
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let std = if n < 2 {
            0.0
        } else {
            (scores.iter().map(|s| (s - avg).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Ok(SeedStats {
            f1_avg: avg.min(max),
            f1_max: max,
            f1_std: std,
            n_seeds: n,
        })
    }
}

/// Everything a seed protocol needs besides the data itself.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtocolConfig {
    pub augment: AugmentParams,
    pub detector: DetectorConfig,
    pub train: TrainConfig,
    /// Each seed drives both detector initialization and training order.
    pub seeds: Vec<u64>,
    pub filter: SpeakerFilter,
    /// Concurrent training runs; results do not depend on it.
    #[serde(skip)]
    pub jobs: usize,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            augment: AugmentParams::default(),
            detector: DetectorConfig::default(),
            train: TrainConfig::default(),
            seeds: (0..20).collect(),
            filter: SpeakerFilter::default(),
            jobs: 1,
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seed list is empty".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(Error::Config("seed list has duplicates".into()));
        }
        self.augment.validate()?;
        self.detector.validate()?;
        self.train.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub dev_f1: f64,
    pub best_epoch: usize,
    /// Run directory relative to the protocol directory.
    pub dir: String,
}

/// Contents of `stats.json` in a protocol directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolResult {
    pub stats: SeedStats,
    pub runs: Vec<SeedRun>,
}

impl ProtocolResult {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join(STATS_FILE);
        Ok(serde_json::from_str(&fsutil::read_to_string(&path)?)?)
    }

    fn save(&self, dir: &Path) -> Result<()> {
        let mut json = serde_json::to_string_pretty(self)?;
        json.push('\n');
        fsutil::write_atomic(&dir.join(STATS_FILE), json.as_bytes())
    }
}

pub fn seed_dir_name(seed: u64) -> String {
    format!("seed_{seed}")
}

/// Trains one run per seed on a fixed plan and aggregates dev F1.
///
/// With `out` set, every run is persisted under `out/seed_<s>` and the
/// aggregate under `out/stats.json`. A failing seed aborts the protocol
/// with [`Error::Seed`] naming it.
pub fn seed_protocol_with_plan(
    data: &TrainingData,
    plan: &AugmentationPlan,
    config: &ProtocolConfig,
    out: Option<&Path>,
) -> Result<ProtocolResult> {
    config.validate()?;
    let n = config.seeds.len();
    let results: Mutex<Vec<Option<Result<SeedRun>>>> = Mutex::new((0..n).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let failed = AtomicBool::new(false);
    let worker = || loop {
        if failed.load(Ordering::SeqCst) {
            return;
        }
        let i = next.fetch_add(1, Ordering::SeqCst);
        if i >= n {
            return;
        }
        let seed = config.seeds[i];
        let r = run_seed(data, plan, config, seed, out);
        if r.is_err() {
            failed.store(true, Ordering::SeqCst);
        }
        results.lock().expect("result lock")[i] = Some(r);
    };
    let jobs = config.jobs.clamp(1, n);
    if jobs == 1 {
        worker();
    } else {
        std::thread::scope(|s| {
            for _ in 0..jobs {
                s.spawn(worker);
            }
        });
    }

    let mut runs = Vec::with_capacity(n);
    for (i, r) in results.into_inner().expect("result lock").into_iter().enumerate() {
        match r {
            Some(Ok(run)) => runs.push(run),
            Some(Err(e)) => {
                return Err(Error::Seed {
                    seed: config.seeds[i],
                    source: Box::new(e),
                })
            }
            None => {}
        }
    }
    if runs.len() != n {
        return Err(Error::Validation("seed protocol aborted".into()));
    }
    let scores: Vec<f64> = runs.iter().map(|r| r.dev_f1).collect();
    let result = ProtocolResult {
        stats: SeedStats::from_scores(&scores)?,
        runs,
    };
    if let Some(dir) = out {
        result.save(dir)?;
    }
    Ok(result)
}

fn run_seed(
    data: &TrainingData,
    plan: &AugmentationPlan,
    config: &ProtocolConfig,
    seed: u64,
    out: Option<&Path>,
) -> Result<SeedRun> {
    let detector = DetectorConfig {
        seed,
        ..config.detector.clone()
    };
    let train = TrainConfig {
        seed,
        ..config.train.clone()
    };
    let run = train_on(data, plan, &detector, &train)?;
    let dir = seed_dir_name(seed);
    if let Some(root) = out {
        run.save(root.join(&dir))?;
    }
    Ok(SeedRun {
        seed,
        dev_f1: run.dev_f1,
        best_epoch: run.best_epoch,
        dir,
    })
}

/// Builds the plan from `config.augment`, loads features once and runs every seed.
pub fn seed_protocol(
    store: &FeatureStore,
    key: &StoreKey,
    corpus: &Corpus,
    config: &ProtocolConfig,
    out: Option<&Path>,
) -> Result<ProtocolResult> {
    config.validate()?;
    let plan = build_plan(corpus, &config.augment, config.filter)?;
    let data = TrainingData::load(store, key, corpus, &plan)?;
    seed_protocol_with_plan(&data, &plan, config, out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Block,
    MPlus,
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepAxis::Block => "block",
            SweepAxis::MPlus => "m_plus",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: u64,
    pub stats: SeedStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub axis: SweepAxis,
    /// Strictly increasing in `value`.
    pub points: Vec<SweepPoint>,
}

impl SweepResult {
    pub fn validate(&self) -> Result<()> {
        if self.points.windows(2).any(|w| w[0].value >= w[1].value) {
            return Err(Error::Validation(format!("{} sweep values are not strictly increasing", self.axis)));
        }
        Ok(())
    }

    /// Axis value with the highest F1-avg; the first one wins ties.
    pub fn argmax(&self) -> Option<u64> {
        self.points
            .iter()
            .fold(None::<&SweepPoint>, |best, p| match best {
                Some(b) if b.stats.f1_avg >= p.stats.f1_avg => Some(b),
                _ => Some(p),
            })
            .map(|p| p.value)
    }
}

fn sorted_unique(values: &[u64], what: &str) -> Result<Vec<u64>> {
    if values.is_empty() {
        return Err(Error::Config(format!("{what} list is empty")));
    }
    let mut v = values.to_vec();
    v.sort_unstable();
    if v.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Config(format!("{what} list has duplicates")));
    }
    Ok(v)
}

/// Runs the seed protocol on each block of `backend`, reusing one plan.
/// Results for block `b` persist under `out/block_<b>`.
pub fn block_sweep(
    store: &FeatureStore,
    backend: &str,
    blocks: &[u32],
    corpus: &Corpus,
    config: &ProtocolConfig,
    out: Option<&Path>,
) -> Result<SweepResult> {
    config.validate()?;
    let blocks = sorted_unique(&blocks.iter().map(|&b| u64::from(b)).collect::<Vec<_>>(), "block")?;
    let keys: Vec<StoreKey> = blocks
        .iter()
        .map(|&b| StoreKey {
            backend: backend.to_string(),
            block: b as u32,
        })
        .collect();
    if let Some(missing) = keys.iter().find(|k| !store.has_key(k)) {
        return Err(Error::Validation(format!(
            "no cached features for block {} of backend {}",
            missing.block, missing.backend
        )));
    }
    let plan = build_plan(corpus, &config.augment, config.filter)?;
    let mut points = Vec::with_capacity(keys.len());
    for key in &keys {
        let data = TrainingData::load(store, key, corpus, &plan)?;
        let dir = out.map(|o| o.join(format!("block_{}", key.block)));
        let r = seed_protocol_with_plan(&data, &plan, config, dir.as_deref())?;
        points.push(SweepPoint {
            value: u64::from(key.block),
            stats: r.stats,
        });
    }
    finish_sweep(SweepResult { axis: SweepAxis::Block, points }, out)
}

/// Runs the seed protocol for each M⁺ value on one cached backend/block.
/// Results for value `m` persist under `out/m_plus_<m>`.
pub fn m_plus_sweep(
    store: &FeatureStore,
    key: &StoreKey,
    values: &[u64],
    corpus: &Corpus,
    config: &ProtocolConfig,
    out: Option<&Path>,
) -> Result<SweepResult> {
    config.validate()?;
    let values = sorted_unique(values, "m_plus")?;
    if !store.has_key(key) {
        return Err(Error::Validation(format!("no cached features for block {} of backend {}", key.block, key.backend)));
    }
    let mut points = Vec::with_capacity(values.len());
    for &m in &values {
        let cfg = ProtocolConfig {
            augment: AugmentParams {
                m_plus: usize::try_from(m).map_err(|_| Error::Config(format!("m_plus {m} too large")))?,
                ..config.augment
            },
            ..config.clone()
        };
        let dir = out.map(|o| o.join(format!("m_plus_{m}")));
        let r = seed_protocol(store, key, corpus, &cfg, dir.as_deref())?;
        points.push(SweepPoint { value: m, stats: r.stats });
    }
    finish_sweep(SweepResult { axis: SweepAxis::MPlus, points }, out)
}

fn finish_sweep(sweep: SweepResult, out: Option<&Path>) -> Result<SweepResult> {
    sweep.validate()?;
    if let Some(dir) = out {
        write_sweep(&sweep, dir.join(report::SWEEP_FILE))?;
    }
    Ok(sweep)
}

/// Per-position majority over `k` odd member label vectors; `k = 1` is the identity.
pub fn majority_vote(members: &[Vec<Label>]) -> Result<Vec<Label>> {
    let k = members.len();
    if k == 0 || k % 2 == 0 {
        return Err(Error::Config(format!("majority vote needs an odd number of members, got {k}")));
    }
    let n = members[0].len();
    if let Some(m) = members.iter().find(|m| m.len() != n) {
        return Err(Error::Alignment(format!("member has {} labels, expected {n}", m.len())));
    }
    Ok((0..n)
        .map(|i| {
            let pos = members.iter().filter(|m| m[i].is_positive()).count();
            Label::from_bool(2 * pos > k)
        })
        .collect())
}

/// Session-keyed majority vote; all members must cover the same sessions.
pub fn vote_sessions(members: &[BTreeMap<String, Label>]) -> Result<BTreeMap<String, Label>> {
    let first = members
        .first()
        .ok_or_else(|| Error::Config("majority vote needs an odd number of members, got 0".into()))?;
    for (i, m) in members.iter().enumerate().skip(1) {
        if m.len() != first.len() || m.keys().zip(first.keys()).any(|(a, b)| a != b) {
            return Err(Error::Alignment(format!("member {i} covers different sessions than member 0")));
        }
    }
    let ids: Vec<&String> = first.keys().collect();
    let vectors: Vec<Vec<Label>> = members.iter().map(|m| m.values().copied().collect()).collect();
    let fused = majority_vote(&vectors)?;
    Ok(ids.into_iter().cloned().zip(fused).collect())
}

/// Member protocol directories for a voting ensemble.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub members: Vec<PathBuf>,
}

impl EnsembleSpec {
    pub fn validate(&self) -> Result<()> {
        let k = self.members.len();
        if k < 3 || k % 2 == 0 {
            return Err(Error::Config(format!(
                "ensemble needs an odd number of at least 3 members, got {k}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleResult {
    pub stats: SeedStats,
    /// Fused dev F1 per seed index.
    pub per_seed: Vec<f64>,
}

/// Votes member runs paired by seed index, scores each fused seed, and aggregates.
pub fn ensemble(spec: &EnsembleSpec) -> Result<EnsembleResult> {
    spec.validate()?;
    let protocols = spec
        .members
        .iter()
        .map(ProtocolResult::load)
        .collect::<Result<Vec<_>>>()?;
    let n = protocols[0].runs.len();
    if let Some((i, p)) = protocols.iter().enumerate().find(|(_, p)| p.runs.len() != n) {
        return Err(Error::Alignment(format!(
            "member {} has {} seeds, member 0 has {n}",
            spec.members[i].display(),
            p.runs.len()
        )));
    }
    let mut per_seed = Vec::with_capacity(n);
    for s in 0..n {
        let mut refs: Option<BTreeMap<String, Label>> = None;
        let mut votes = Vec::with_capacity(protocols.len());
        for (dir, p) in spec.members.iter().zip(&protocols) {
            let preds = read_dev_predictions(dir.join(&p.runs[s].dir))?;
            let labels: BTreeMap<String, Label> = preds.iter().map(|p| (p.session_id.clone(), p.label)).collect();
            match &refs {
                None => refs = Some(labels),
                Some(r) if *r != labels => {
                    return Err(Error::Alignment(format!(
                        "member {} disagrees on dev sessions or labels",
                        dir.display()
                    )))
                }
                Some(_) => {}
            }
            votes.push(preds.into_iter().map(|p| (p.session_id, p.pred)).collect());
        }
        let fused = vote_sessions(&votes)?;
        per_seed.push(f1(&fused, refs.as_ref().expect("at least one member"))?.f1);
    }
    Ok(EnsembleResult {
        stats: SeedStats::from_scores(&per_seed)?,
        per_seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::store_synthetic;
    use crate::corpus::{generate_synthetic, BlockGain, SyntheticConfig};
    use Label::{Negative as N, Positive as P};

    #[test]
    fn stats_examples() {
        let s = SeedStats::from_scores(&[0.6, 0.8]).unwrap();
        assert!((s.f1_avg - 0.7).abs() < 1e-12);
        assert_eq!(s.f1_max, 0.8);
        assert!((s.f1_std - 0.141_421_356_237_309_5).abs() < 1e-12);
        assert_eq!(s.n_seeds, 2);

        let c = SeedStats::from_scores(&[0.55; 7]).unwrap();
        assert_eq!((c.f1_avg, c.f1_max, c.f1_std), (0.55, 0.55, 0.0));
        assert_eq!(SeedStats::from_scores(&[0.3]).unwrap().f1_std, 0.0);
        assert!(SeedStats::from_scores(&[]).is_err());
        assert!(SeedStats::from_scores(&[1.2]).is_err());
    }

    fn vote_oracle(bits: &[bool]) -> bool {
        let ones = bits.iter().filter(|b| **b).count();
        ones > bits.len() - ones
    }

    #[test]
    fn vote_matches_enumeration_for_three_and_five() {
        for k in [3usize, 5] {
            for pattern in 0u32..(1 << k) {
                let bits: Vec<bool> = (0..k).map(|j| pattern >> j & 1 == 1).collect();
                let members: Vec<Vec<Label>> = bits.iter().map(|&b| vec![Label::from_bool(b)]).collect();
                let fused = majority_vote(&members).unwrap();
                assert_eq!(fused[0].is_positive(), vote_oracle(&bits), "k={k} pattern={pattern:b}");
            }
        }
    }

    #[test]
    fn vote_edge_cases() {
        assert_eq!(majority_vote(&[vec![P], vec![P], vec![N]]).unwrap(), vec![P]);
        let one = vec![P, N, N, P];
        assert_eq!(majority_vote(&[one.clone()]).unwrap(), one);
        assert_eq!(majority_vote(&[one.clone(), one.clone(), one.clone()]).unwrap(), one);
        assert!(matches!(majority_vote(&[one.clone(), one.clone()]), Err(Error::Config(_))));
        assert!(matches!(majority_vote(&[one.clone(), vec![P], one]), Err(Error::Alignment(_))));
    }

    #[test]
    fn session_vote_alignment() {
        let m = |ids: &[&str]| ids.iter().map(|s| (s.to_string(), P)).collect::<BTreeMap<_, _>>();
        assert!(vote_sessions(&[m(&["a", "b"]), m(&["a", "b"]), m(&["a", "c"])]).is_err());
        let fused = vote_sessions(&[m(&["a"]), m(&["a"]), m(&["a"])]).unwrap();
        assert_eq!(fused["a"], P);
    }

    #[test]
    fn sweep_validation_and_argmax() {
        let st = |a| SeedStats { f1_avg: a, f1_max: a, f1_std: 0.0, n_seeds: 1 };
        let s = SweepResult {
            axis: SweepAxis::Block,
            points: vec![
                SweepPoint { value: 2, stats: st(0.5) },
                SweepPoint { value: 8, stats: st(0.9) },
                SweepPoint { value: 10, stats: st(0.9) },
            ],
        };
        assert!(s.validate().is_ok());
        assert_eq!(s.argmax(), Some(8));
        let mut bad = s.clone();
        bad.points.swap(0, 1);
        assert!(bad.validate().is_err());
    }

    fn tiny_config(seeds: Vec<u64>) -> ProtocolConfig {
        ProtocolConfig {
            augment: AugmentParams { m_plus: 3, ..Default::default() },
            detector: DetectorConfig {
                input_dim: 4,
                model_dim: 8,
                heads: 2,
                ffn_dim: 16,
                blocks: 1,
                ..Default::default()
            },
            train: TrainConfig {
                learning_rate: 3e-3,
                max_epochs: 3,
                patience: 2,
                ..Default::default()
            },
            seeds,
            ..Default::default()
        }
    }

    fn tiny_store(dir: &Path, gains: Vec<BlockGain>) -> (FeatureStore, Corpus) {
        let (corpus, feats) = generate_synthetic(&SyntheticConfig {
            n_pos: 4,
            n_neg: 5,
            dev_pos: 2,
            dev_neg: 2,
            dim: 4,
            t_range: (3, 5),
            block_gains: gains,
            ..Default::default()
        })
        .unwrap();
        let mut store = FeatureStore::open(dir).unwrap();
        store_synthetic(&mut store, &corpus, &feats).unwrap();
        (store, corpus)
    }

    #[test]
    fn protocol_persists_runs_and_is_job_independent() {
        let tmp = tempfile::tempdir().unwrap();
        let (store, corpus) = tiny_store(&tmp.path().join("store"), vec![]);
        let key = StoreKey { backend: "synthetic".into(), block: 0 };
        let cfg = tiny_config(vec![4, 1]);
        let out = tmp.path().join("run");
        let r = seed_protocol(&store, &key, &corpus, &cfg, Some(&out)).unwrap();
        assert_eq!(r.stats.n_seeds, 2);
        assert_eq!(r.runs[0].seed, 4);
        assert!(out.join("seed_4/dev_predictions.jsonl").exists());
        assert_eq!(ProtocolResult::load(&out).unwrap(), r);

        let par = seed_protocol(&store, &key, &corpus, &ProtocolConfig { jobs: 2, ..cfg.clone() }, None).unwrap();
        assert_eq!(par, r);

        let bad = ProtocolConfig {
            detector: DetectorConfig { input_dim: 5, ..cfg.detector.clone() },
            ..cfg
        };
        match seed_protocol(&store, &key, &corpus, &bad, None) {
            Err(Error::Seed { seed, .. }) => assert_eq!(seed, 4),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn block_sweep_names_missing_block() {
        let tmp = tempfile::tempdir().unwrap();
        let gains = vec![BlockGain { block: 2, gain: 1.0 }, BlockGain { block: 4, gain: 0.5 }];
        let (store, corpus) = tiny_store(tmp.path(), gains);
        let cfg = tiny_config(vec![0]);
        let err = block_sweep(&store, "synthetic", &[2, 6], &corpus, &cfg, None).unwrap_err();
        assert!(err.to_string().contains("block 6"), "{err}");
        let one = block_sweep(&store, "synthetic", &[4], &corpus, &cfg, None).unwrap();
        assert_eq!(one.points.len(), 1);
        assert_eq!(one.axis, SweepAxis::Block);
    }

    #[test]
    fn m_plus_sweep_single_value() {
        let tmp = tempfile::tempdir().unwrap();
        let (store, corpus) = tiny_store(tmp.path(), vec![]);
        let key = StoreKey { backend: "synthetic".into(), block: 0 };
        let s = m_plus_sweep(&store, &key, &[2], &corpus, &tiny_config(vec![0]), None).unwrap();
        assert_eq!(s.points.len(), 1);
        assert_eq!(s.points[0].value, 2);
    }

    #[test]
    fn ensemble_of_identical_members_keeps_stats() {
        let tmp = tempfile::tempdir().unwrap();
        let (store, corpus) = tiny_store(&tmp.path().join("store"), vec![]);
        let key = StoreKey { backend: "synthetic".into(), block: 0 };
        let out = tmp.path().join("a");
        let r = seed_protocol(&store, &key, &corpus, &tiny_config(vec![0, 1]), Some(&out)).unwrap();
        let spec = EnsembleSpec { members: vec![out.clone(), out.clone(), out.clone()] };
        let e = ensemble(&spec).unwrap();
        assert_eq!(e.stats, r.stats);
        assert!(ensemble(&EnsembleSpec { members: vec![out.clone(), out] }).is_err());
    }
}
