use serde::{Deserialize, Serialize};

use super::{Result, TrainError};
use crate::autodiff::{Tape, Tensor, Var};
use crate::model::{ParamRole, ParamSet};

/// Regularizer coefficients of the objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegCoeffs {
    pub lambda_s: f64,
    pub lambda_t: f64,
    pub beta: f64,
}

impl RegCoeffs {
    pub const ZERO: Self = Self {
        lambda_s: 0.0,
        lambda_t: 0.0,
        beta: 0.0,
    };
}

/// The terms of one loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub loss: f64,
    pub ce: f64,
    pub l1_s: f64,
    pub l1_t: f64,
    pub l2: f64,
}

/// `−log softmax(z)[label]` for `z: (1, K)` recorded on the tape.
pub fn cross_entropy(tape: &mut Tape, logits: Var, label: usize) -> Result<Var> {
    let k = *tape.shape(logits).last().unwrap_or(&0);
    if label >= k {
        return Err(TrainError::LabelOutOfRange { label, n_classes: k });
    }
    let ls = tape.log_softmax(logits);
    let mut pick = Tensor::zeros(tape.shape(logits));
    pick.data[label] = -1.0;
    let pick = tape.constant(pick);
    let masked = tape.mul(ls, pick)?;
    Ok(tape.sum_all(masked))
}

/// Mean cross-entropy of row-major `(N, K)` logits, computed directly.
pub fn mean_cross_entropy(logits: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if logits.is_empty() || logits.len() != labels.len() {
        return Err(TrainError::EmptySplit("loss over no examples".into()));
    }
    let mut total = 0.0;
    for (z, &y) in logits.iter().zip(labels) {
        if y >= z.len() {
            return Err(TrainError::LabelOutOfRange {
                label: y,
                n_classes: z.len(),
            });
        }
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - z[y];
    }
    Ok(total / logits.len() as f64)
}

/// Combine a mean cross-entropy with the parameter penalties.
pub fn combine(ce: f64, params: &ParamSet, reg: &RegCoeffs) -> LossParts {
    let l1_s = params.l1(ParamRole::CcgDelta);
    let l1_t = params.l1(ParamRole::TsgDelta);
    let l2 = params.l2();
    LossParts {
        loss: ce + reg.lambda_s * l1_s + reg.lambda_t * l1_t + reg.beta * l2,
        ce,
        l1_s,
        l1_t,
        l2,
    }
}

/// Full objective: mean CE plus L1 on graph increments plus L2 on the rest.
pub fn total_loss(logits: &[Vec<f64>], labels: &[usize], params: &ParamSet, reg: &RegCoeffs) -> Result<LossParts> {
    Ok(combine(mean_cross_entropy(logits, labels)?, params, reg))
}

/// Add the penalty gradients to `grads`; the L1 subgradient at 0 is 0.
pub fn add_penalty_grads(params: &ParamSet, reg: &RegCoeffs, grads: &mut [Vec<f64>]) {
    for ((t, role), g) in params.tensors.iter().zip(&params.roles).zip(grads.iter_mut()) {
        let l1 = match role {
            ParamRole::CcgDelta => reg.lambda_s,
            ParamRole::TsgDelta => reg.lambda_t,
            _ => 0.0,
        };
        if l1 != 0.0 {
            for (gi, &v) in g.iter_mut().zip(&t.data) {
                if v > 0.0 {
                    *gi += l1;
                } else if v < 0.0 {
                    *gi -= l1;
                }
            }
        }
        if role.in_l2() && reg.beta != 0.0 {
            for (gi, &v) in g.iter_mut().zip(&t.data) {
                *gi += 2.0 * reg.beta * v;
            }
        }
    }
}
