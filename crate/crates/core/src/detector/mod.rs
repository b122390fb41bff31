//! The depression detection block: an input projection, a stack of post-norm
//! Transformer encoder blocks, a masked mean over the utterance sequence and a
//! two-way output layer, plus its training loop.

pub mod model;
mod train;

pub use train::{
    read_dev_predictions, train, train_on, CurvePoint, DevPrediction, FeatureNorm, TrainConfig, TrainedRun,
    TrainingData,
};

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::unit_draw;
use crate::corpus::Label;
use crate::error::{Error, Result};
use crate::fsutil;
use model::{forward, positional_table, Layout};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub input_dim: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    /// Longest sequence the positional table covers.
    pub max_len: usize,
    pub positional_encoding: bool,
    pub seed: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            input_dim: 768,
            model_dim: 128,
            heads: 4,
            blocks: 2,
            ffn_dim: 256,
            dropout: 0.1,
            max_len: 512,
            positional_encoding: true,
            seed: 0,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.input_dim == 0 || self.model_dim == 0 || self.blocks == 0 || self.max_len == 0 {
            return bad(format!("detector dimensions must be positive: {self:?}"));
        }
        if self.heads == 0 || self.model_dim % self.heads != 0 {
            return bad(format!(
                "model_dim {} is not divisible by heads {}",
                self.model_dim, self.heads
            ));
        }
        if self.ffn_dim < self.model_dim {
            return bad(format!("ffn_dim {} < model_dim {}", self.ffn_dim, self.model_dim));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }
}

/// Model label and positive-class probability for one dialogue.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    pub label: Label,
    pub score: f64,
}

/// Argmax with ties going to the negative class; score is the softmax
/// probability of the positive class.
pub fn decide(logits: ArrayView1<f64>) -> Prediction {
    let label = Label::from_bool(logits[1] > logits[0]);
    let score = 1.0 / (1.0 + (logits[0] - logits[1]).exp());
    Prediction { label, score }
}

const PARAMS_MAGIC: &[u8; 4] = b"SDDP";
const PARAMS_VERSION: u32 = 1;

/// Trainable state of the detector: one flat `f64` buffer plus its layout.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectorParams {
    config: DetectorConfig,
    layout: Layout,
    data: Vec<f64>,
    positional: Option<Array2<f64>>,
}

impl DetectorParams {
    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn param_count(&self) -> usize {
        self.data.len()
    }

    /// Parameter count without the input projection.
    pub fn head_param_count(&self) -> usize {
        self.layout.head_param_count()
    }

    /// Sinusoidal table when positional encoding is enabled.
    pub fn positional(&self) -> Option<&Array2<f64>> {
        self.positional.as_ref()
    }

    fn from_data(config: DetectorConfig, data: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if data.len() != layout.total {
            return Err(Error::Validation(format!(
                "parameter buffer has {} values, layout needs {}",
                data.len(),
                layout.total
            )));
        }
        let positional = config
            .positional_encoding
            .then(|| positional_table(config.max_len, config.model_dim));
        Ok(DetectorParams {
            config,
            layout,
            data,
            positional,
        })
    }

    /// Evaluation-mode logits for one `T x D` sequence. `padding[t] == true` marks padded rows.
    pub fn logits(&self, features: ArrayView2<f64>, padding: Option<&[bool]>) -> Result<Array1<f64>> {
        forward(
            &self.config,
            &self.layout,
            &self.data,
            self.positional.as_ref(),
            features,
            padding,
            None,
        )
        .map(|(logits, _)| logits)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.data.len() * 8);
        out.extend_from_slice(PARAMS_MAGIC);
        out.extend_from_slice(&PARAMS_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.data.len() as u64).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(config: DetectorConfig, bytes: &[u8]) -> Result<Self> {
        let fmt_err = |offset: usize, message: &str| Error::Format {
            offset: offset as u64,
            message: message.to_string(),
        };
        if bytes.len() < 16 {
            return Err(fmt_err(bytes.len(), "truncated params header"));
        }
        if &bytes[0..4] != PARAMS_MAGIC {
            return Err(fmt_err(0, "bad params magic"));
        }
        if u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) != PARAMS_VERSION {
            return Err(fmt_err(4, "unsupported params version"));
        }
        let n = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        if bytes.len() != 16 + n * 8 {
            return Err(fmt_err(bytes.len(), "params payload length disagrees with header"));
        }
        let data = bytes[16..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Self::from_data(config, data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fsutil::write_atomic(path.as_ref(), &self.to_bytes())
    }

    pub fn load(config: DetectorConfig, path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(config, &bytes)
    }
}

/// Deterministic initialization: Glorot-uniform weight matrices, zero biases,
/// unit layer-norm gains.
pub fn init_detector(config: &DetectorConfig) -> Result<DetectorParams> {
    config.validate()?;
    let layout = Layout::new(config);
    let mut data = vec![0.0; layout.total];
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    for slot in layout.weight_slots() {
        let limit = (6.0 / (slot.rows + slot.cols) as f64).sqrt();
        for v in &mut data[slot.offset..slot.offset + slot.len()] {
            *v = (2.0 * unit_draw(rng.next_u64()) - 1.0) * limit;
        }
    }
    for slot in layout.gain_slots() {
        data[slot.offset..slot.offset + slot.len()].fill(1.0);
    }
    DetectorParams::from_data(config.clone(), data)
}

/// Label and positive-class score for one full dialogue.
pub fn predict(params: &DetectorParams, features: ArrayView2<f64>) -> Result<Prediction> {
    Ok(decide(params.logits(features, None)?.view()))
}
