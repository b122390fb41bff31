use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{backward, cross_entropy, forward, Dropout};
use super::{decide, init_detector, DetectorConfig, DetectorParams};
use crate::augment::AugmentationPlan;
use crate::backend::{FeatureStore, StoreKey};
use crate::corpus::{Corpus, Label, Split};
use crate::error::{Error, Result};
use crate::evalharness::metrics::f1_labels;
use crate::fsutil;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without dev-F1 improvement before stopping.
    pub patience: usize,
    /// Standardize features with train-set statistics.
    pub normalize_features: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 32,
            max_epochs: 20,
            patience: 5,
            normalize_features: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::Config("batch_size, max_epochs and patience must be positive".into()));
        }
        if self.patience >= self.max_epochs {
            return Err(Error::Config(format!(
                "patience ({}) must be smaller than max_epochs ({})",
                self.patience, self.max_epochs
            )));
        }
        Ok(())
    }
}

/// Per-dimension standardization fitted on train sessions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureNorm {
    fn fit<'a>(matrices: impl Iterator<Item = &'a Array2<f64>>) -> Self {
        let mut sum: Option<Array1<f64>> = None;
        let mut sq: Option<Array1<f64>> = None;
        let mut n = 0usize;
        for m in matrices {
            let s = m.sum_axis(Axis(0));
            let q = m.mapv(|v| v * v).sum_axis(Axis(0));
            sum = Some(sum.map_or(s.clone(), |a| a + &s));
            sq = Some(sq.map_or(q.clone(), |a| a + &q));
            n += m.nrows();
        }
        let (sum, sq) = (sum.unwrap_or_default(), sq.unwrap_or_default());
        let n = n.max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n - m * m).max(0.0).sqrt().max(1e-8))
            .collect();
        FeatureNorm { mean, std }
    }

    pub fn apply(&self, m: &mut Array2<f64>) {
        for mut row in m.rows_mut() {
            for ((v, mu), sd) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - mu) / sd;
            }
        }
    }
}

/// Session matrices needed for one training run, loaded once and shared across seeds.
#[derive(Clone, Debug)]
pub struct TrainingData {
    pub input_dim: usize,
    train: HashMap<String, Array2<f64>>,
    dev: Vec<(String, Label, Array2<f64>)>,
}

impl TrainingData {
    /// Loads every session referenced by `plan` plus the full dev split, failing
    /// before any training if the plan and the store disagree.
    pub fn load(store: &FeatureStore, key: &StoreKey, corpus: &Corpus, plan: &AugmentationPlan) -> Result<Self> {
        let mut train = HashMap::new();
        for e in &plan.entries {
            if !train.contains_key(&e.session_id) {
                let d = corpus.get(&e.session_id).ok_or_else(|| {
                    Error::Validation(format!("plan references session {} missing from corpus", e.session_id))
                })?;
                if d.split != Split::Train {
                    return Err(Error::Validation(format!(
                        "plan references {} session {}",
                        d.split, e.session_id
                    )));
                }
                let m = store.get(&e.session_id, key).map_err(|err| {
                    Error::Validation(format!("plan/store mismatch for session {}: {err}", e.session_id))
                })?;
                train.insert(e.session_id.clone(), m.mapv(f64::from));
            }
            let m = &train[&e.session_id];
            if e.e >= m.nrows() || e.s > e.e {
                return Err(Error::Validation(format!(
                    "plan entry {}[{}..={}] exceeds {} cached rows",
                    e.session_id,
                    e.s,
                    e.e,
                    m.nrows()
                )));
            }
            if d_label(corpus, &e.session_id) != Some(e.label) {
                return Err(Error::Validation(format!("plan label disagrees with corpus for {}", e.session_id)));
            }
        }
        let mut dev = Vec::new();
        for d in corpus.split(Split::Dev) {
            let m = store.get(&d.session_id, key).map_err(|err| {
                Error::Validation(format!("dev session {} not cached: {err}", d.session_id))
            })?;
            dev.push((d.session_id.clone(), d.label, m.mapv(f64::from)));
        }
        if dev.is_empty() {
            return Err(Error::Validation("dev split is empty".into()));
        }
        if train.is_empty() {
            return Err(Error::Validation("plan is empty".into()));
        }
        let input_dim = dev[0].2.ncols();
        if train.values().chain(dev.iter().map(|d| &d.2)).any(|m| m.ncols() != input_dim) {
            return Err(Error::Validation(format!("cached feature widths differ under {key}")));
        }
        Ok(TrainingData { input_dim, train, dev })
    }

    fn normalized(&self, norm: &FeatureNorm) -> TrainingData {
        let mut out = self.clone();
        out.train.values_mut().for_each(|m| norm.apply(m));
        out.dev.iter_mut().for_each(|(_, _, m)| norm.apply(m));
        out
    }
}

fn d_label(corpus: &Corpus, id: &str) -> Option<Label> {
    corpus.get(id).map(|d| d.label)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_f1: f64,
}

/// One line of `dev_predictions.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DevPrediction {
    pub session_id: String,
    /// Reference label.
    pub label: Label,
    pub pred: Label,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedRun {
    pub detector: DetectorConfig,
    pub train: TrainConfig,
    /// Parameters from the epoch with the best dev F1.
    pub params: DetectorParams,
    pub norm: Option<FeatureNorm>,
    pub curve: Vec<CurvePoint>,
    pub best_epoch: usize,
    pub dev_f1: f64,
    pub dev_predictions: Vec<DevPrediction>,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    lr: f64,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize, lr: f64) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            lr,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * g;
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * g * g;
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            params[i] -= self.lr * mhat / (vhat.sqrt() + Self::EPS);
        }
    }
}

fn evaluate_dev(params: &DetectorParams, data: &TrainingData) -> Result<(f64, Vec<DevPrediction>)> {
    let mut preds = Vec::with_capacity(data.dev.len());
    for (id, label, m) in &data.dev {
        let p = decide(params.logits(m.view(), None)?.view());
        preds.push(DevPrediction {
            session_id: id.clone(),
            label: *label,
            pred: p.label,
            score: p.score,
        });
    }
    let pl: Vec<Label> = preds.iter().map(|p| p.pred).collect();
    let rl: Vec<Label> = preds.iter().map(|p| p.label).collect();
    Ok((f1_labels(&pl, &rl)?.f1, preds))
}

fn target(label: Label) -> usize {
    usize::from(label.is_positive())
}

/// Mean cross-entropy of a batch in evaluation mode, accumulating the gradient if requested.
pub(crate) fn batch_loss(
    params: &DetectorParams,
    batch: &[(ArrayView2<'_, f64>, Label)],
    mut grad: Option<&mut [f64]>,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<f64> {
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for (x, label) in batch {
        let dropout = match dropout_rng.as_deref_mut() {
            Some(rng) if params.config().dropout > 0.0 => Some(Dropout {
                p: params.config().dropout,
                rng,
            }),
            _ => None,
        };
        let (logits, cache) = forward(
            params.config(),
            params.layout(),
            params.data(),
            params.positional(),
            x.view(),
            None,
            dropout,
        )?;
        let (loss, dlogits) = cross_entropy(logits.view(), target(*label));
        if !loss.is_finite() {
            return Err(Error::Numerical("non-finite training loss".into()));
        }
        total += loss;
        if let Some(g) = grad.as_deref_mut() {
            backward(
                params.config(),
                params.layout(),
                params.data(),
                &cache,
                (dlogits * scale).view(),
                g,
            );
        }
    }
    Ok(total * scale)
}

/// Trains one detector on plan entries (rows `s..=e` of their source session),
/// selecting the epoch with the best dev F1.
///
/// The detector seed fixes initialization; the train seed fixes the epoch
/// shuffles and dropout masks.
pub fn train_on(
    data: &TrainingData,
    plan: &AugmentationPlan,
    detector: &DetectorConfig,
    config: &TrainConfig,
) -> Result<TrainedRun> {
    config.validate()?;
    if detector.input_dim != data.input_dim {
        return Err(Error::Config(format!(
            "detector input_dim {} but features have {} columns",
            detector.input_dim, data.input_dim
        )));
    }
    let norm = config
        .normalize_features
        .then(|| FeatureNorm::fit(data.train.values()));
    let normalized;
    let data = match &norm {
        Some(n) => {
            normalized = data.normalized(n);
            &normalized
        }
        None => data,
    };

    let mut params = init_detector(detector)?;
    let mut adam = Adam::new(params.param_count(), config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut grad = vec![0.0; params.param_count()];
    let mut order: Vec<usize> = (0..plan.entries.len()).collect();

    let mut best: Option<(f64, usize, DetectorParams)> = None;
    let mut curve = Vec::new();
    let mut stale = 0;
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<(ArrayView2<f64>, Label)> = chunk
                .iter()
                .map(|&i| {
                    let e = &plan.entries[i];
                    (data.train[&e.session_id].slice(s![e.s..=e.e, ..]), e.label)
                })
                .collect();
            grad.fill(0.0);
            let loss = batch_loss(&params, &batch, Some(&mut grad), Some(&mut rng))?;
            loss_sum += loss * batch.len() as f64;
            adam.step(params.data_mut(), &grad);
        }
        let train_loss = loss_sum / plan.entries.len() as f64;
        let (dev_f1, _) = evaluate_dev(&params, data)?;
        curve.push(CurvePoint {
            epoch,
            train_loss,
            dev_f1,
        });
        if best.as_ref().is_none_or(|(f, _, _)| dev_f1 > *f) {
            best = Some((dev_f1, epoch, params.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }

    let (dev_f1, best_epoch, params) = best.expect("at least one epoch");
    let (_, dev_predictions) = evaluate_dev(&params, data)?;
    Ok(TrainedRun {
        detector: detector.clone(),
        train: config.clone(),
        params,
        norm,
        curve,
        best_epoch,
        dev_f1,
        dev_predictions,
    })
}

/// Loads the cached features for `key` and trains one run.
pub fn train(
    store: &FeatureStore,
    key: &StoreKey,
    corpus: &Corpus,
    plan: &AugmentationPlan,
    detector: &DetectorConfig,
    config: &TrainConfig,
) -> Result<TrainedRun> {
    let data = TrainingData::load(store, key, corpus, plan)?;
    train_on(&data, plan, detector, config)
}

pub const PARAMS_FILE: &str = "params.bin";
pub const CONFIG_FILE: &str = "config.json";
pub const PREDICTIONS_FILE: &str = "dev_predictions.jsonl";
pub const CURVE_FILE: &str = "curve.csv";

#[derive(Serialize, Deserialize)]
struct RunConfigFile {
    detector: DetectorConfig,
    train: TrainConfig,
    detector_seed: u64,
    train_seed: u64,
    norm: Option<FeatureNorm>,
    best_epoch: usize,
    dev_f1: f64,
    param_count: usize,
}

impl TrainedRun {
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        self.params.save(dir.join(PARAMS_FILE))?;
        let cfg = RunConfigFile {
            detector: self.detector.clone(),
            train: self.train.clone(),
            detector_seed: self.detector.seed,
            train_seed: self.train.seed,
            norm: self.norm.clone(),
            best_epoch: self.best_epoch,
            dev_f1: self.dev_f1,
            param_count: self.params.param_count(),
        };
        let mut json = serde_json::to_string_pretty(&cfg)?;
        json.push('\n');
        fsutil::write_atomic(&dir.join(CONFIG_FILE), json.as_bytes())?;

        let mut preds = String::new();
        for p in &self.dev_predictions {
            preds.push_str(&serde_json::to_string(p)?);
            preds.push('\n');
        }
        fsutil::write_atomic(&dir.join(PREDICTIONS_FILE), preds.as_bytes())?;

        let mut csv = String::from("epoch,train_loss,dev_f1\n");
        for c in &self.curve {
            writeln!(csv, "{},{},{}", c.epoch, c.train_loss, c.dev_f1).expect("write to string");
        }
        fsutil::write_atomic(&dir.join(CURVE_FILE), csv.as_bytes())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let cfg: RunConfigFile = serde_json::from_str(&fsutil::read_to_string(&dir.join(CONFIG_FILE))?)?;
        let params = DetectorParams::load(cfg.detector.clone(), dir.join(PARAMS_FILE))?;
        let dev_predictions = read_dev_predictions(dir)?;
        let curve_text = fsutil::read_to_string(&dir.join(CURVE_FILE))?;
        let mut curve = Vec::new();
        for (i, line) in curve_text.lines().enumerate().skip(1) {
            let bad = |m: &str| Error::Parse {
                path: dir.join(CURVE_FILE),
                line: i + 1,
                message: m.to_string(),
            };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 3 {
                return Err(bad("expected 3 columns"));
            }
            curve.push(CurvePoint {
                epoch: f[0].parse().map_err(|_| bad("bad epoch"))?,
                train_loss: f[1].parse().map_err(|_| bad("bad train_loss"))?,
                dev_f1: f[2].parse().map_err(|_| bad("bad dev_f1"))?,
            });
        }
        Ok(TrainedRun {
            detector: cfg.detector,
            train: cfg.train,
            params,
            norm: cfg.norm,
            curve,
            best_epoch: cfg.best_epoch,
            dev_f1: cfg.dev_f1,
            dev_predictions,
        })
    }
}

pub fn read_dev_predictions(dir: impl AsRef<Path>) -> Result<Vec<DevPrediction>> {
    let path = dir.as_ref().join(PREDICTIONS_FILE);
    let text = fsutil::read_to_string(&path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.clone(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}
