//! The tri-branch decoder.
//!
//! * Branch A: channel graph (CCG) → shared temporal block → slice graph (TSG)
//! * Branch B: slice graph → shared temporal block → channel graph
//! * Branch C: multi-scale frequency mixer on RMS envelopes
//!
//! Branch logits are fused by one linear layer. Graph layers compute
//! `σ(Â · H · W)` where `Â` is the renormalized prior-plus-increment.

mod checkpoint;
mod features;
mod forward;
pub mod gradcheck;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
pub use features::{prepare_dataset, prepare_trial, TrialInput};
pub use forward::{gcn_layer, BranchLogits, DropoutMasks, ForwardOutput, GraphVars};
pub use params::{ParamRole, ParamSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tensor};
use crate::dsp::DspError;
use crate::graphs::{self, Adjacency, GraphError, GraphKind};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid hyperparameters: {0}")]
    InvalidHyper(String),
    #[error("input mismatch: {0}")]
    InputMismatch(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Dsp(#[from] DspError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Gelu,
    Relu,
    /// no nonlinearity; only for degenerate-configuration checks
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Decode {
    /// argmax of the fused logits
    #[default]
    Fused,
    /// argmax of branch A's logits, the literal reading of the fusion formula
    BranchA,
}

/// Which branches feed the fusion head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchSet {
    pub a: bool,
    pub b: bool,
    pub c: bool,
}

impl Default for BranchSet {
    fn default() -> Self {
        Self::ALL
    }
}

impl BranchSet {
    pub const ALL: Self = Self {
        a: true,
        b: true,
        c: true,
    };

    /// Parse `"A,B,C"`-style lists.
    pub fn parse(s: &str) -> Option<Self> {
        let mut out = Self {
            a: false,
            b: false,
            c: false,
        };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part.to_ascii_uppercase().as_str() {
                "A" => out.a = true,
                "B" => out.b = true,
                "C" => out.c = true,
                _ => return None,
            }
        }
        (out.count() > 0).then_some(out)
    }

    pub fn count(&self) -> usize {
        usize::from(self.a) + usize::from(self.b) + usize::from(self.c)
    }

    pub fn label(&self) -> String {
        let mut v = Vec::new();
        if self.a {
            v.push("A");
        }
        if self.b {
            v.push("B");
        }
        if self.c {
            v.push("C");
        }
        v.join(",")
    }

    fn needs_graphs(&self) -> bool {
        self.a || self.b
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MfmConfig {
    /// embedding width
    pub width: usize,
    pub n_blocks: usize,
    pub n_downsample: usize,
    pub top_periods: usize,
    pub seasonal_kernel: usize,
    pub trend_kernel: usize,
    /// RMS window in samples
    pub envelope_window: usize,
    pub band_lo_hz: f64,
    pub band_hi_hz: f64,
}

impl Default for MfmConfig {
    fn default() -> Self {
        Self {
            width: 16,
            n_blocks: 1,
            n_downsample: 1,
            top_periods: 1,
            seasonal_kernel: 3,
            trend_kernel: 3,
            envelope_window: 25,
            band_lo_hz: 8.0,
            band_hi_hz: 30.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelHyperParams {
    pub n_channels: usize,
    pub n_samples: usize,
    pub sample_rate_hz: f64,
    pub window_len: usize,
    pub stride: usize,
    pub n_classes: usize,
    /// hidden width
    pub d: usize,
    /// channel-graph depth
    pub k_s: usize,
    /// slice-graph depth
    pub k_t: usize,
    pub temporal_kernel: usize,
    /// layer-normalize at the end of the temporal block
    pub temporal_norm: bool,
    pub mfm: MfmConfig,
    pub activation: Activation,
    pub branches: BranchSet,
    pub gated_fusion: bool,
    pub decode: Decode,
    /// share one channel-graph increment between branches A and B
    pub tie_ccg_delta: bool,
    /// multiplies raw microvolts before the model sees them
    pub input_scale: f64,
}

impl Default for ModelHyperParams {
    fn default() -> Self {
        Self {
            n_channels: 23,
            n_samples: 1125,
            sample_rate_hz: 250.0,
            window_len: 125,
            stride: 125,
            n_classes: 3,
            d: 32,
            k_s: 2,
            k_t: 2,
            temporal_kernel: 15,
            temporal_norm: true,
            mfm: MfmConfig::default(),
            activation: Activation::Gelu,
            branches: BranchSet::ALL,
            gated_fusion: false,
            decode: Decode::Fused,
            tie_ccg_delta: false,
            input_scale: 0.05,
        }
    }
}

impl ModelHyperParams {
    pub fn n_windows(&self) -> usize {
        crate::dataio::window_count(self.n_samples, self.window_len, self.stride).unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::InvalidHyper(m));
        if self.k_s == 0 || self.k_t == 0 {
            return bad("k_s and k_t must be >= 1".into());
        }
        if self.d == 0 || self.n_classes < 2 || self.n_channels < 2 {
            return bad("d >= 1, n_classes >= 2, n_channels >= 2 required".into());
        }
        if self.mfm.top_periods == 0 || self.mfm.width == 0 || self.mfm.n_blocks == 0 {
            return bad("mfm width, n_blocks, top_periods must be >= 1".into());
        }
        if self.mfm.seasonal_kernel == 0 || self.mfm.trend_kernel == 0 || self.temporal_kernel == 0 {
            return bad("kernel sizes must be >= 1".into());
        }
        if self.branches.count() == 0 {
            return bad("at least one branch required".into());
        }
        if let Err(e) = crate::dataio::window_count(self.n_samples, self.window_len, self.stride) {
            return bad(e.to_string());
        }
        if self.branches.needs_graphs() && self.n_windows() < 2 {
            return bad("graph branches need at least 2 windows".into());
        }
        if self.branches.c && (self.mfm.envelope_window == 0 || self.mfm.envelope_window > self.n_samples) {
            return bad("mfm envelope_window must lie in 1..=n_samples".into());
        }
        Ok(())
    }
}

/// Parameters plus the frozen graph bases.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub hyper: ModelHyperParams,
    pub params: ParamSet,
    /// unnormalized channel prior shared by branches A and B
    pub ccg_base: Tensor,
    /// unnormalized slice prior
    pub tsg_base: Tensor,
}

impl Model {
    /// Freshly initialized model with the given channel-graph base.
    pub fn new(hyper: ModelHyperParams, ccg_base: Tensor, seed: u64) -> Result<Self> {
        hyper.validate()?;
        let c = hyper.n_channels;
        if ccg_base.shape != [c, c] {
            return Err(ModelError::InputMismatch(format!(
                "channel graph {:?} for {c} channels",
                ccg_base.shape
            )));
        }
        let w = hyper.n_windows();
        let tsg_base = if w >= 2 {
            graphs::path_graph(w)
        } else {
            Tensor::zeros(&[w, w])
        };
        let params = ParamSet::init(&hyper, seed);
        Ok(Self {
            hyper,
            params,
            ccg_base,
            tsg_base,
        })
    }

    /// The adjacency (base, prior, increment) a branch currently uses.
    pub fn adjacency(&self, branch: char, kind: GraphKind) -> Option<Adjacency> {
        let (base, delta_name) = match kind {
            GraphKind::Channel => (
                &self.ccg_base,
                if branch == 'b' && !self.hyper.tie_ccg_delta {
                    "b.ccg_delta"
                } else {
                    "a.ccg_delta"
                },
            ),
            GraphKind::Slice => (
                &self.tsg_base,
                if branch == 'b' { "b.tsg_delta" } else { "a.tsg_delta" },
            ),
        };
        let delta = self.params.get(delta_name)?;
        let mut adj = Adjacency::new(base.clone(), kind);
        adj.delta = delta.clone();
        Some(adj)
    }

    /// Every effective adjacency currently in use, with a label.
    pub fn effective_adjacencies(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (branch, used) in [('a', self.hyper.branches.a), ('b', self.hyper.branches.b)] {
            if !used {
                continue;
            }
            for (kind, tag) in [(GraphKind::Channel, "ccg"), (GraphKind::Slice, "tsg")] {
                if let Some(adj) = self.adjacency(branch, kind) {
                    out.push((format!("{branch}.{tag}"), graphs::effective_adjacency(&adj)));
                }
            }
        }
        out
    }
}
