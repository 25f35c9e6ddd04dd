//! Hybrid beam predictor: numeric and image encoders, bidirectional
//! cross-attention fusion with a gate, and a shared parallel decoder.
//!
//! The inference mode selects which branches run. `Numeric` and `Image`
//! feed their encoder output straight to the decoder; `Multi` runs both and
//! fuses them. All parameters exist in every mode so one checkpoint can be
//! trained and used in several modes.

mod model;
mod train;

pub use model::{micro_gradcheck, Fusion, HybridModel, ModelInput, NoRng};
pub use train::{
    evaluate, load_model, save_model, subsample, train, EpochRecord, ModelFile, TrainReport, TrainSchedule,
    CHECKPOINT_FILE, CONFIG_FILE,
};

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::MetricsError;
use crate::nn::NnError;
use crate::scenario::{DatasetMeta, NUMERIC_DIM};

#[derive(Debug, Error)]
pub enum PredictorError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("config does not match dataset: {0}")]
    ConfigMismatch(String),
    #[error("input shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("frame is {got_w}x{got_h}, model expects {want_w}x{want_h}")]
    FrameSizeMismatch {
        want_w: usize,
        want_h: usize,
        got_w: usize,
        got_h: usize,
    },
    #[error("mode {mode} needs {missing} input")]
    MissingModality { mode: Mode, missing: &'static str },
    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch} (first sample {sample})")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        sample: String,
        loss: f64,
    },
    #[error("no training samples")]
    EmptyTrainingSet,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    BadModelFile { path: PathBuf, reason: String },
}

pub type Result<T> = std::result::Result<T, PredictorError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Numeric,
    Image,
    Multi,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Numeric, Mode::Image, Mode::Multi];

    pub fn uses_numeric(self) -> bool {
        matches!(self, Mode::Numeric | Mode::Multi)
    }

    pub fn uses_image(self) -> bool {
        matches!(self, Mode::Image | Mode::Multi)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Numeric => "numeric",
            Mode::Image => "image",
            Mode::Multi => "multi",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "numeric" => Ok(Mode::Numeric),
            "image" => Ok(Mode::Image),
            "multi" | "multimodal" => Ok(Mode::Multi),
            other => Err(format!("unknown mode {other:?} (expected numeric, image or multi)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorConfig {
    pub mode: Mode,
    pub hidden_dim: usize,
    pub numeric_blocks: usize,
    pub image_blocks: usize,
    pub attn_heads: usize,
    pub decoder_layers: usize,
    /// Number of beam classes; equals the codebook size.
    pub num_classes: usize,
    /// Observation window length T.
    pub window: usize,
    /// Prediction horizon P.
    pub horizon: usize,
    pub dropout: f64,
    pub numeric_dim: usize,
    pub frame_height: usize,
    pub frame_width: usize,
    /// Output channels of the four backbone stages; the last one is the
    /// per-frame feature size.
    pub backbone_widths: Vec<usize>,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Multi,
            hidden_dim: 32,
            numeric_blocks: 2,
            image_blocks: 2,
            attn_heads: 2,
            decoder_layers: 2,
            num_classes: 64,
            window: 10,
            horizon: 5,
            dropout: 0.1,
            numeric_dim: NUMERIC_DIM,
            frame_height: 64,
            frame_width: 64,
            backbone_widths: crate::nn::layers::BACKBONE_WIDTHS.to_vec(),
        }
    }
}

impl PredictorConfig {
    /// Default architecture sized for `meta`.
    pub fn for_dataset(meta: &DatasetMeta, mode: Mode) -> Self {
        Self {
            mode,
            num_classes: meta.num_beams,
            window: meta.seq_len,
            horizon: meta.horizon,
            numeric_dim: meta.d_n,
            frame_height: meta.height,
            frame_width: meta.width,
            ..Self::default()
        }
    }

    /// Smallest config that still exercises every component: d=8, T=3,
    /// P=2, K=4, one block and head each, 16x16 frames.
    pub fn micro(mode: Mode) -> Self {
        Self {
            mode,
            hidden_dim: 8,
            numeric_blocks: 1,
            image_blocks: 1,
            attn_heads: 1,
            decoder_layers: 1,
            num_classes: 4,
            window: 3,
            horizon: 2,
            dropout: 0.1,
            numeric_dim: NUMERIC_DIM,
            frame_height: 16,
            frame_width: 16,
            backbone_widths: vec![4, 4, 4, 4],
        }
    }

    pub fn image_feature_dim(&self) -> usize {
        self.backbone_widths.last().copied().unwrap_or(0)
    }

    /// Block and layer counts may be zero (an empty stack is the identity);
    /// everything else must be positive.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PredictorError::InvalidConfig(m));
        if self.hidden_dim == 0 || self.hidden_dim % 2 != 0 {
            return bad(format!("hidden_dim must be positive and even, got {}", self.hidden_dim));
        }
        if self.attn_heads == 0 || self.hidden_dim % self.attn_heads != 0 {
            return bad(format!(
                "hidden_dim {} not divisible by attn_heads {}",
                self.hidden_dim, self.attn_heads
            ));
        }
        for (name, v) in [
            ("num_classes", self.num_classes),
            ("window", self.window),
            ("horizon", self.horizon),
            ("numeric_dim", self.numeric_dim),
        ] {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if self.backbone_widths.is_empty() || self.backbone_widths.contains(&0) {
            return bad("backbone_widths must be non-empty and positive".into());
        }
        let min = crate::nn::layers::MIN_FRAME_SIDE;
        if self.frame_height < min || self.frame_width < min {
            return bad(format!("frames must be at least {min}x{min}"));
        }
        Ok(())
    }

    /// Checks that a dataset can be fed to a model with this config.
    pub fn check_dataset(&self, meta: &DatasetMeta) -> Result<()> {
        let pairs = [
            ("beam classes", self.num_classes, meta.num_beams),
            ("window", self.window, meta.seq_len),
            ("horizon", self.horizon, meta.horizon),
            ("numeric features", self.numeric_dim, meta.d_n),
            ("frame height", self.frame_height, meta.height),
            ("frame width", self.frame_width, meta.width),
        ];
        for (what, model, data) in pairs {
            if model != data {
                return Err(PredictorError::ConfigMismatch(format!("{what}: model {model}, dataset {data}")));
            }
        }
        Ok(())
    }
}

/// Output for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub num_classes: usize,
    /// `horizon x num_classes`, row-major.
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub beam_indices: Vec<usize>,
    pub per_frame_latency_ms: f64,
}

impl Prediction {
    pub fn probability_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.probabilities.chunks(self.num_classes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_parsing() {
        assert_eq!("Numeric".parse::<Mode>().unwrap(), Mode::Numeric);
        assert_eq!("multi".parse::<Mode>().unwrap(), Mode::Multi);
        assert!("video".parse::<Mode>().is_err());
        assert_eq!(serde_json::to_string(&Mode::Image).unwrap(), "\"image\"");
    }

    #[test]
    fn config_validation() {
        assert!(PredictorConfig::default().validate().is_ok());
        let c = PredictorConfig {
            attn_heads: 3,
            ..PredictorConfig::default()
        };
        assert!(matches!(c.validate(), Err(PredictorError::InvalidConfig(_))));
        let c = PredictorConfig {
            frame_height: 8,
            ..PredictorConfig::default()
        };
        assert!(c.validate().is_err());
        let json = r#"{"mode":"numeric","hidden_dim":16,"bogus":1}"#;
        assert!(serde_json::from_str::<PredictorConfig>(json).is_err());
        let json = r#"{"mode":"numeric","hidden_dim":16}"#;
        let c: PredictorConfig = serde_json::from_str(json).unwrap();
        assert_eq!((c.mode, c.hidden_dim, c.attn_heads), (Mode::Numeric, 16, 2));
    }
}
