use std::collections::HashMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::ModelHyperParams;
use crate::autodiff::Tensor;
use crate::rng;

/// How a parameter is treated by the regularizer and the ablation switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    Weight,
    Bias,
    NormScale,
    /// excluded from the L2 penalty
    NormShift,
    /// channel-graph increment, L1-penalized
    CcgDelta,
    /// slice-graph increment, L1-penalized
    TsgDelta,
    Gate,
}

impl ParamRole {
    pub fn is_delta(self) -> bool {
        matches!(self, Self::CcgDelta | Self::TsgDelta)
    }

    pub fn in_l2(self) -> bool {
        !self.is_delta() && self != Self::NormShift
    }
}

/// Named, ordered parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub names: Vec<String>,
    pub roles: Vec<ParamRole>,
    pub tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn empty() -> Self {
        Self {
            names: Vec::new(),
            roles: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, role: ParamRole, t: Tensor) {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.roles.push(role);
        self.tensors.push(t);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.position(name).map(move |i| &mut self.tensors[i])
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Sum of `|x|` over every increment of the given role.
    pub fn l1(&self, role: ParamRole) -> f64 {
        self.iter_role(role)
            .flat_map(|t| t.data.iter())
            .fold(0.0, |acc, v| acc + v.abs())
    }

    /// Sum of `x²` over every L2-penalized parameter.
    pub fn l2(&self) -> f64 {
        self.tensors
            .iter()
            .zip(&self.roles)
            .filter(|(_, r)| r.in_l2())
            .flat_map(|(t, _)| t.data.iter())
            .fold(0.0, |acc, v| acc + v * v)
    }

    fn iter_role(&self, role: ParamRole) -> impl Iterator<Item = &Tensor> {
        self.tensors
            .iter()
            .zip(&self.roles)
            .filter(move |(_, r)| **r == role)
            .map(|(t, _)| t)
    }

    /// Default initialization for a hyperparameter set.
    pub fn init(h: &ModelHyperParams, seed: u64) -> Self {
        let mut b = Builder {
            set: Self::empty(),
            seed,
        };
        let (c, d, k, tw) = (h.n_channels, h.d, h.n_classes, h.window_len);
        let w = h.n_windows();
        let graphs = h.branches.a || h.branches.b;

        if h.branches.a {
            b.weight("a.proj", &[c, tw, d], tw);
            for l in 0..h.k_s {
                b.weight(&format!("a.ccg.{l}"), &[d, d], d);
            }
            for l in 0..h.k_t {
                b.weight(&format!("a.tsg.{l}"), &[d, d], d);
            }
            b.zeros("a.ccg_delta", ParamRole::CcgDelta, &[c, c]);
            b.zeros("a.tsg_delta", ParamRole::TsgDelta, &[w, w]);
            b.weight("a.head.w", &[d, k], d);
            b.zeros("a.head.b", ParamRole::Bias, &[k]);
        }
        if h.branches.b {
            b.weight("b.proj", &[c, tw, d], tw);
            for l in 0..h.k_t {
                b.weight(&format!("b.tsg.{l}"), &[d, d], d);
            }
            for l in 0..h.k_s {
                b.weight(&format!("b.ccg.{l}"), &[d, d], d);
            }
            if !(h.tie_ccg_delta && h.branches.a) {
                b.zeros("b.ccg_delta", ParamRole::CcgDelta, &[c, c]);
            }
            b.zeros("b.tsg_delta", ParamRole::TsgDelta, &[w, w]);
            b.weight("b.head.w", &[d, k], d);
            b.zeros("b.head.b", ParamRole::Bias, &[k]);
        }
        if graphs {
            let ks = h.temporal_kernel;
            b.weight("temporal.dw", &[d, ks], ks);
            b.weight("temporal.pw", &[d, d], d);
            b.zeros("temporal.pw_bias", ParamRole::Bias, &[d]);
            if h.temporal_norm {
                b.push_full("temporal.ln_scale", ParamRole::NormScale, &[d], 1.0);
                b.zeros("temporal.ln_shift", ParamRole::NormShift, &[d]);
            }
        }
        if h.branches.c {
            let m = h.mfm.width;
            b.weight("c.embed.w", &[m, c], c);
            b.zeros("c.embed.b", ParamRole::Bias, &[m]);
            for s in 0..=h.mfm.n_downsample {
                for blk in 0..h.mfm.n_blocks {
                    let (ks, kt) = (h.mfm.seasonal_kernel, h.mfm.trend_kernel);
                    b.weight(&format!("c.s{s}.b{blk}.seasonal"), &[m, ks], ks);
                    b.weight(&format!("c.s{s}.b{blk}.trend"), &[m, kt], kt);
                }
            }
            for s in 0..h.mfm.n_downsample {
                b.weight(&format!("c.mix.{s}.w"), &[m, m], m);
                b.zeros(&format!("c.mix.{s}.b"), ParamRole::Bias, &[m]);
            }
            b.weight("c.head.w", &[m, k], m);
            b.zeros("c.head.b", ParamRole::Bias, &[k]);
        }
        let nb = h.branches.count();
        if h.gated_fusion {
            b.zeros("fusion.gate", ParamRole::Gate, &[nb]);
        } else {
            b.weight("fusion.w", &[k, nb * k], nb * k);
        }
        b.zeros("fusion.b", ParamRole::Bias, &[k]);
        b.set
    }
}

struct Builder {
    set: ParamSet,
    seed: u64,
}

impl Builder {
    fn weight(&mut self, name: &str, shape: &[usize], fan_in: usize) {
        let s = 1.0 / (fan_in.max(1) as f64).sqrt();
        let mut r = rng::stream(self.seed, "init", &[self.set.len() as u64]);
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| r.random_range(-s..s)).collect();
        let t = Tensor::new(shape.to_vec(), data).expect("consistent shape");
        self.set.push(name, ParamRole::Weight, t);
    }

    fn zeros(&mut self, name: &str, role: ParamRole, shape: &[usize]) {
        self.set.push(name, role, Tensor::zeros(shape));
    }

    fn push_full(&mut self, name: &str, role: ParamRole, shape: &[usize], v: f64) {
        self.set.push(name, role, Tensor::full(shape, v));
    }
}
