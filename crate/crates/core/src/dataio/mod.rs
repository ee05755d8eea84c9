//! Trials, datasets, and everything that moves them around: the EEGDS v1
//! on-disk format, seeded synthetic generation, sliding-window segmentation
//! and protocol splits.

mod format;
mod split;
mod synth;
mod window;

pub use format::{load_dataset, save_dataset, Manifest, TrialRecord, FORMAT_VERSION};
pub use split::{split_protocol, Protocol, Split};
pub use synth::{class_channels, synth_generate, SynthConfig};
pub use window::{window_count, window_trial, window_trials, WindowedBatch};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid window: window length {window_len} exceeds trial length {n_samples}")]
    InvalidWindow { window_len: usize, n_samples: usize },
    #[error("invalid stride {0}: must be at least 1")]
    InvalidStride(usize),
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
    #[error("fold {fold} out of range for {protocol:?} ({n_folds} folds)")]
    FoldOutOfRange {
        fold: usize,
        n_folds: usize,
        protocol: Protocol,
    },
    #[error("protocol error: {0}")]
    EmptyPartition(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt manifest: {0}")]
    CorruptManifest(String),
    #[error("shape mismatch in {file}: manifest expects {expected_rows}x{expected_cols} ({expected_bytes} bytes), payload has {actual_bytes} bytes ({actual_rows} rows)")]
    ShapeMismatch {
        file: String,
        expected_rows: usize,
        expected_cols: usize,
        expected_bytes: usize,
        actual_bytes: usize,
        actual_rows: usize,
    },
    #[error("unsupported dataset version {0}")]
    UnsupportedVersion(u32),
    #[error("invalid trial {index}: {reason}")]
    InvalidTrial { index: usize, reason: String },
}

pub type Result<T> = std::result::Result<T, DataError>;

/// One EEG recording: `C × T` microvolts, row-major by channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub data: Vec<f32>,
    pub n_channels: usize,
    pub n_samples: usize,
    pub label: usize,
    pub subject_id: u32,
    pub session_id: u32,
    pub sample_rate_hz: f64,
}

impl Trial {
    pub fn channel(&self, c: usize) -> &[f32] {
        &self.data[c * self.n_samples..(c + 1) * self.n_samples]
    }

    pub fn channel_f64(&self, c: usize) -> Vec<f64> {
        self.channel(c).iter().map(|&v| f64::from(v)).collect()
    }
}

/// Dataset-level metadata shared by every trial.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetInfo {
    pub num_channels: usize,
    pub num_classes: usize,
    pub sample_rate_hz: f64,
    pub num_samples: usize,
    pub channel_names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub info: DatasetInfo,
    pub trials: Vec<Trial>,
    /// Stable identity of each trial within the dataset it was loaded or
    /// generated as; preserved across splits so leakage can be checked.
    pub ids: Vec<usize>,
}

impl Dataset {
    pub fn new(info: DatasetInfo, trials: Vec<Trial>) -> Self {
        let ids = (0..trials.len()).collect();
        Self { info, trials, ids }
    }

    pub fn empty_like(&self) -> Self {
        Self {
            info: self.info.clone(),
            trials: Vec::new(),
            ids: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    /// Sub-dataset keeping trials for which `keep` holds, ids preserved.
    pub fn filter(&self, mut keep: impl FnMut(&Trial) -> bool) -> Self {
        let mut out = self.empty_like();
        for (t, &id) in self.trials.iter().zip(&self.ids) {
            if keep(t) {
                out.trials.push(t.clone());
                out.ids.push(id);
            }
        }
        out
    }

    /// Sub-dataset at the given positions, in the given order.
    pub fn select(&self, positions: &[usize]) -> Self {
        let mut out = self.empty_like();
        for &p in positions {
            out.trials.push(self.trials[p].clone());
            out.ids.push(self.ids[p]);
        }
        out
    }

    pub fn subjects(&self) -> Vec<u32> {
        let mut s: Vec<u32> = self.trials.iter().map(|t| t.subject_id).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    pub fn sessions_of(&self, subject: u32) -> Vec<u32> {
        let mut s: Vec<u32> = self
            .trials
            .iter()
            .filter(|t| t.subject_id == subject)
            .map(|t| t.session_id)
            .collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    pub fn labels(&self) -> Vec<usize> {
        self.trials.iter().map(|t| t.label).collect()
    }

    /// Check shape, label range and finiteness of every trial.
    pub fn validate(&self) -> Result<()> {
        let info = &self.info;
        for (i, t) in self.trials.iter().enumerate() {
            let bad = |reason: String| DataError::InvalidTrial { index: i, reason };
            if t.n_channels != info.num_channels || t.n_samples != info.num_samples {
                return Err(bad(format!(
                    "shape {}x{} differs from dataset {}x{}",
                    t.n_channels, t.n_samples, info.num_channels, info.num_samples
                )));
            }
            if t.data.len() != t.n_channels * t.n_samples {
                return Err(bad("data length does not match shape".into()));
            }
            if t.label >= info.num_classes {
                return Err(bad(format!("label {} >= num_classes {}", t.label, info.num_classes)));
            }
            if t.sample_rate_hz != info.sample_rate_hz {
                return Err(bad("sample rate differs from dataset".into()));
            }
            if t.data.iter().any(|v| !v.is_finite()) {
                return Err(bad("non-finite sample".into()));
            }
        }
        Ok(())
    }
}
