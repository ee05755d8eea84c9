//! Whole-model finite-difference check on a tiny configuration.

use rand::Rng as _;

use super::{prepare_trial, Model, ModelError, ModelHyperParams, Result, TrialInput};
use crate::autodiff::{grad_check_multi, GradCheckReport, Tensor};
use crate::dataio::Trial;
use crate::rng;

/// C=4, T=48 in windows of 16 (W=3), d=5, one graph layer per stage.
pub fn tiny_hyper() -> ModelHyperParams {
    let mut h = ModelHyperParams::default();
    h.n_channels = 4;
    h.n_samples = 48;
    h.window_len = 16;
    h.stride = 16;
    h.d = 5;
    h.k_s = 1;
    h.k_t = 1;
    h.temporal_kernel = 3;
    h.mfm.width = 4;
    h.mfm.envelope_window = 5;
    h.input_scale = 0.2;
    h
}

fn ring(n: usize) -> Tensor {
    let mut t = Tensor::zeros(&[n, n]);
    for i in 0..n {
        let j = (i + 1) % n;
        t.data[i * n + j] = 1.0;
        t.data[j * n + i] = 1.0;
    }
    t
}

/// A tiny model with increments and offsets moved off zero, so every
/// parameter has a nonzero gradient and no relu sits on its kink, plus a
/// random uniform trial.
pub fn tiny_problem(seed: u64) -> Result<(Model, TrialInput)> {
    let h = tiny_hyper();
    let mut m = Model::new(h.clone(), ring(h.n_channels), seed)?;
    let mut r = rng::stream(seed, "gradcheck.nudge", &[]);
    for (name, t) in m.params.names.iter().zip(m.params.tensors.iter_mut()) {
        if name.ends_with("_delta") {
            t.data.iter_mut().for_each(|v| *v = r.random_range(0.05..0.3));
        } else if name.ends_with(".b") || name.ends_with("bias") || name.ends_with("shift") {
            t.data.iter_mut().for_each(|v| *v = r.random_range(-0.2..0.2));
        }
    }
    let mut r = rng::stream(seed, "gradcheck.trial", &[]);
    let trial = Trial {
        data: (0..h.n_channels * h.n_samples)
            .map(|_| r.random_range(-5.0f32..5.0))
            .collect(),
        n_channels: h.n_channels,
        n_samples: h.n_samples,
        label: 1,
        subject_id: 0,
        sample_rate_hz: h.sample_rate_hz,
        session_id: 0,
    };
    let input = prepare_trial(&trial, &h)?;
    Ok((m, input))
}

/// Central differences (step 1e-5) of the fused cross-entropy against the
/// tape gradient of every parameter; absolute errors below 1e-9 are exempt
/// from the relative criterion.
pub fn model_gradcheck(seed: u64) -> Result<GradCheckReport> {
    let (m, input) = tiny_problem(seed)?;
    let report = grad_check_multi(
        |tape, vars| {
            let out = m.forward(tape, vars, &input, None).map_err(|e| match e {
                ModelError::Autodiff(a) => a,
                other => unreachable!("tiny model forward: {other}"),
            })?;
            let ls = tape.log_softmax(out.fused);
            let mut pick = Tensor::zeros(&[1, m.hyper.n_classes]);
            pick.data[input.label] = -1.0;
            let pick = tape.constant(pick);
            let picked = tape.mul(ls, pick)?;
            Ok(tape.sum_all(picked))
        },
        &m.params.tensors,
        1e-5,
        1e-9,
    )?;
    Ok(report)
}
