use super::{DataError, Dataset, Result, Trial};

/// Sliding-window segmentation of a batch of trials: `N × W × C × T_w`.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedBatch {
    pub data: Vec<f64>,
    pub n_trials: usize,
    pub n_windows: usize,
    pub n_channels: usize,
    pub window_len: usize,
    pub stride: usize,
}

impl WindowedBatch {
    pub fn shape(&self) -> [usize; 4] {
        [self.n_trials, self.n_windows, self.n_channels, self.window_len]
    }

    /// The `W × C × T_w` block of trial `n`.
    pub fn trial(&self, n: usize) -> &[f64] {
        let per = self.n_windows * self.n_channels * self.window_len;
        &self.data[n * per..(n + 1) * per]
    }
}

/// `floor((T - W_n) / Str) + 1`.
pub fn window_count(n_samples: usize, window_len: usize, stride: usize) -> Result<usize> {
    if stride == 0 {
        return Err(DataError::InvalidStride(stride));
    }
    if window_len == 0 || window_len > n_samples {
        return Err(DataError::InvalidWindow { window_len, n_samples });
    }
    Ok((n_samples - window_len) / stride + 1)
}

/// Window one trial into a `W × C × T_w` row-major block.
pub fn window_trial(trial: &Trial, window_len: usize, stride: usize) -> Result<Vec<f64>> {
    let w = window_count(trial.n_samples, window_len, stride)?;
    let c = trial.n_channels;
    let mut out = Vec::with_capacity(w * c * window_len);
    for wi in 0..w {
        let start = wi * stride;
        for ch in 0..c {
            let row = trial.channel(ch);
            out.extend(row[start..start + window_len].iter().map(|&v| f64::from(v)));
        }
    }
    Ok(out)
}

pub fn window_trials(dataset: &Dataset, window_len: usize, stride: usize) -> Result<WindowedBatch> {
    let n_windows = window_count(dataset.info.num_samples, window_len, stride)?;
    let mut data = Vec::with_capacity(dataset.len() * n_windows * dataset.info.num_channels * window_len);
    for t in &dataset.trials {
        data.extend(window_trial(t, window_len, stride)?);
    }
    Ok(WindowedBatch {
        data,
        n_trials: dataset.len(),
        n_windows,
        n_channels: dataset.info.num_channels,
        window_len,
        stride,
    })
}
