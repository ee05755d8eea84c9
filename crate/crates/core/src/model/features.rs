use super::{ModelError, ModelHyperParams, Result};
use crate::autodiff::Tensor;
use crate::dataio::{window_trial, Dataset, Trial};
use crate::dsp;
use crate::par::{self, Exec};

/// Everything the forward pass reads from one trial, precomputed once.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialInput {
    /// `(W, C, T_w)` demeaned, scaled windows
    pub windows: Tensor,
    /// `(C, p, ceil(T/p))` folded envelope image per selected period
    pub images: Vec<Tensor>,
    /// selected periods with their softmax mixing weights
    pub periods: Vec<(usize, f64)>,
    pub label: usize,
}

/// Window the trial and, when branch C is active, build its envelope images.
pub fn prepare_trial(trial: &Trial, h: &ModelHyperParams) -> Result<TrialInput> {
    if trial.n_channels != h.n_channels || trial.n_samples != h.n_samples {
        return Err(ModelError::InputMismatch(format!(
            "trial is {}x{}, model expects {}x{}",
            trial.n_channels, trial.n_samples, h.n_channels, h.n_samples
        )));
    }
    let (c, t) = (h.n_channels, h.n_samples);
    let mut centered = trial.clone();
    for ch in 0..c {
        let row = &mut centered.data[ch * t..(ch + 1) * t];
        let mean = row.iter().map(|&v| f64::from(v)).sum::<f64>() / t as f64;
        for v in row {
            *v = ((f64::from(*v) - mean) * h.input_scale) as f32;
        }
    }
    let w = h.n_windows();
    let data = window_trial(&centered, h.window_len, h.stride).map_err(|e| ModelError::InputMismatch(e.to_string()))?;
    let windows = Tensor::new(vec![w, c, h.window_len], data)?;

    let (images, periods) = if h.branches.c {
        envelope_images(trial, h)?
    } else {
        (Vec::new(), Vec::new())
    };
    Ok(TrialInput {
        windows,
        images,
        periods,
        label: trial.label,
    })
}

fn envelope_images(trial: &Trial, h: &ModelHyperParams) -> Result<(Vec<Tensor>, Vec<(usize, f64)>)> {
    let c = h.n_channels;
    let mut env = Vec::with_capacity(c);
    for ch in 0..c {
        let x = trial.channel_f64(ch);
        let band = dsp::bandpass(&x, h.mfm.band_lo_hz, h.mfm.band_hi_hz, h.sample_rate_hz)?;
        let mut e = dsp::rms_envelope(&band, h.mfm.envelope_window)?;
        e.iter_mut().for_each(|v| *v *= h.input_scale);
        env.push(e);
    }
    fold_envelopes(&env, h)
}

/// Pick the dominant periods of the channel-mean envelope and fold every
/// channel's envelope at each of them.
pub(crate) fn fold_envelopes(env: &[Vec<f64>], h: &ModelHyperParams) -> Result<(Vec<Tensor>, Vec<(usize, f64)>)> {
    let (c, t) = (env.len(), env[0].len());
    let mean: Vec<f64> = (0..t)
        .map(|i| env.iter().map(|e| e[i]).sum::<f64>() / c as f64)
        .collect();
    let fallback = ((h.sample_rate_hz / 10.0).round() as usize).clamp(1, t);
    let found = match dsp::dominant_periods(&mean, h.mfm.top_periods) {
        Ok(p) => p,
        Err(dsp::DspError::NoPeriod) => Vec::new(),
        Err(e) => return Err(e.into()),
    };
    let raw: Vec<(usize, f64)> = if found.is_empty() {
        vec![(fallback, 0.0)]
    } else {
        found.into_iter().map(|(p, a)| (p.clamp(1, t), a)).collect()
    };
    let weights = softmax(&raw.iter().map(|&(_, a)| a).collect::<Vec<_>>());
    let periods: Vec<(usize, f64)> = raw.iter().zip(weights).map(|(&(p, _), w)| (p, w)).collect();
    let images = periods.iter().map(|&(p, _)| fold(env, p)).collect();
    Ok((images, periods))
}

fn softmax(a: &[f64]) -> Vec<f64> {
    let m = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = a.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `(C, p, q)` image with `img[c, i, j] = env[c][j·p + i]`, zero past the end.
pub(crate) fn fold(env: &[Vec<f64>], p: usize) -> Tensor {
    let c = env.len();
    let t = env[0].len();
    let q = t.div_ceil(p);
    let mut data = vec![0.0; c * p * q];
    for (ch, e) in env.iter().enumerate() {
        for (s, &v) in e.iter().enumerate() {
            let (j, i) = (s / p, s % p);
            data[(ch * p + i) * q + j] = v;
        }
    }
    Tensor {
        shape: vec![c, p, q],
        data,
    }
}

/// [`prepare_trial`] over a dataset, in trial order.
pub fn prepare_dataset(ds: &Dataset, h: &ModelHyperParams, exec: Exec) -> Result<Vec<TrialInput>> {
    par::map_slice(exec, &ds.trials, |tr| prepare_trial(tr, h))
        .into_iter()
        .collect()
}
