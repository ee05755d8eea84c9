//! Channel and slice graphs.
//!
//! The channel prior comes from phase-locking values: per trial, per channel
//! pair, `|1/T · Σ_t exp(i(φ_i(t) − φ_j(t)))|`, averaged over trials. It is then
//! cleaned up in a fixed order: zero the diagonal, keep the top-k entries of
//! each row, symmetrize by elementwise max, and degree-normalize to
//! `D^{-1/2} A D^{-1/2}`. The slice prior is a path graph over windows.
//!
//! During training each graph is `renormalize(relu(base + delta))`, where
//! `base` is the prior before normalization and `delta` is a learnable
//! increment that starts at zero.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{self, Tape, Tensor, Var};
use crate::dataio::Trial;
use crate::dsp::{self, DspError};
use crate::par::{self, Exec};

/// Degrees at or below this are treated as isolated nodes.
pub const DEGREE_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("channel {channel} is degenerate (constant signal); PLV undefined")]
    DegenerateChannel { channel: usize },
    #[error("PLV needs at least one trial")]
    NoTrials,
    #[error("top-k {k} out of range for {n} nodes (need 1 <= k <= n-1)")]
    InvalidTopK { k: usize, n: usize },
    #[error("slice graph needs at least 2 windows, got {0}")]
    TooFewSlices(usize),
    #[error("PLV matrix must be square with entries in [0,1]")]
    InvalidPlv,
    #[error(transparent)]
    Dsp(#[from] DspError),
}

pub type Result<T> = std::result::Result<T, GraphError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GraphKind {
    /// channel-correlation graph, `C × C`
    Channel,
    /// time-slice graph, `W × W`
    Slice,
}

/// Frozen prior plus learnable increment.
///
/// `base` is the symmetric prior before degree normalization and
/// `prior = D^{-1/2} base D^{-1/2}`. The increment is added to `base`, so a
/// zero increment reproduces `prior` exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Adjacency {
    pub base: Tensor,
    pub prior: Tensor,
    pub delta: Tensor,
    pub kind: GraphKind,
}

impl Adjacency {
    pub fn new(base: Tensor, kind: GraphKind) -> Self {
        let prior = degree_normalize(&base);
        let delta = Tensor::zeros(&base.shape);
        Self {
            base,
            prior,
            delta,
            kind,
        }
    }

    pub fn n(&self) -> usize {
        self.prior.shape[0]
    }
}

/// How the PLV input is band-limited.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlvBand {
    pub lo_hz: f64,
    pub hi_hz: f64,
    /// skip band-limiting altogether
    pub broadband: bool,
}

impl Default for PlvBand {
    fn default() -> Self {
        Self {
            lo_hz: 8.0,
            hi_hz: 30.0,
            broadband: false,
        }
    }
}

/// PLV of one trial from per-channel phases. Diagonal entries are 1.
pub fn plv_from_phases(phases: &[Vec<f64>]) -> Tensor {
    let c = phases.len();
    let mut out = Tensor::zeros(&[c, c]);
    for i in 0..c {
        out.data[i * c + i] = 1.0;
        for j in i + 1..c {
            let (pi, pj) = (&phases[i], &phases[j]);
            let t = pi.len();
            let mut re = 0.0;
            let mut im = 0.0;
            for k in 0..t {
                let d = pi[k] - pj[k];
                re += d.cos();
                im += d.sin();
            }
            let v = (re / t as f64).hypot(im / t as f64);
            out.data[i * c + j] = v;
            out.data[j * c + i] = v;
        }
    }
    out
}

/// Analytic phases of every channel of a trial, band-limited first unless
/// `band.broadband`.
pub fn trial_phases(trial: &Trial, band: PlvBand) -> Result<Vec<Vec<f64>>> {
    (0..trial.n_channels)
        .map(|ch| {
            let mut x = trial.channel_f64(ch);
            if !band.broadband {
                x = dsp::bandpass(&x, band.lo_hz, band.hi_hz, trial.sample_rate_hz)?;
            }
            dsp::analytic_phase(&x).map_err(|e| match e {
                DspError::DegenerateSignal => GraphError::DegenerateChannel { channel: ch },
                other => other.into(),
            })
        })
        .collect()
}

pub fn plv_trial(trial: &Trial, band: PlvBand) -> Result<Tensor> {
    Ok(plv_from_phases(&trial_phases(trial, band)?))
}

/// Mean of per-trial PLV matrices.
pub fn plv_matrix(trials: &[Trial], band: PlvBand, exec: Exec) -> Result<Tensor> {
    let per: Vec<Result<Tensor>> = par::map_slice(exec, trials, |t| plv_trial(t, band));
    let per: Vec<Tensor> = per.into_iter().collect::<Result<_>>()?;
    average(&per)
}

/// Elementwise mean of equally-shaped matrices, summed in order.
pub fn average(mats: &[Tensor]) -> Result<Tensor> {
    let first = mats.first().ok_or(GraphError::NoTrials)?;
    let mut acc = Tensor::zeros(&first.shape);
    for m in mats {
        for (a, v) in acc.data.iter_mut().zip(&m.data) {
            *a += v;
        }
    }
    let s = 1.0 / mats.len() as f64;
    acc.data.iter_mut().for_each(|v| *v *= s);
    Ok(acc)
}

/// `D^{-1/2} A D^{-1/2}` with degree-0 rows left at zero.
pub fn degree_normalize(a: &Tensor) -> Tensor {
    let n = a.shape[0];
    let dinv: Vec<f64> = (0..n)
        .map(|i| {
            let d: f64 = a.data[i * n..(i + 1) * n].iter().sum();
            if d > DEGREE_EPS {
                1.0 / d.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    let mut out = a.clone();
    for i in 0..n {
        for j in 0..n {
            out.data[i * n + j] *= dinv[i] * dinv[j];
        }
    }
    out
}

/// Zero diagonal, per-row top-k (ties to the lower index), max-symmetrize,
/// degree-normalize.
pub fn build_prior(plv: &Tensor, k: usize) -> Result<Tensor> {
    Ok(degree_normalize(&sparsify_symmetrize(plv, k)?))
}

/// [`build_prior`] without the final normalization.
pub fn sparsify_symmetrize(plv: &Tensor, k: usize) -> Result<Tensor> {
    if plv.shape.len() != 2 || plv.shape[0] != plv.shape[1] {
        return Err(GraphError::InvalidPlv);
    }
    if plv.data.iter().any(|v| !(0.0..=1.0 + 1e-12).contains(v)) {
        return Err(GraphError::InvalidPlv);
    }
    let n = plv.shape[0];
    if k == 0 || k >= n {
        return Err(GraphError::InvalidTopK { k, n });
    }
    let mut sparse = Tensor::zeros(&[n, n]);
    for i in 0..n {
        let mut cols: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        cols.sort_by(|&a, &b| plv.data[i * n + b].total_cmp(&plv.data[i * n + a]).then(a.cmp(&b)));
        for &j in cols.iter().take(k) {
            sparse.data[i * n + j] = plv.data[i * n + j];
        }
    }
    let mut sym = sparse.clone();
    for i in 0..n {
        for j in 0..n {
            sym.data[i * n + j] = sparse.data[i * n + j].max(sparse.data[j * n + i]);
        }
    }
    Ok(sym)
}

/// Path graph over `w` slices, degree-normalized.
pub fn slice_prior(w: usize) -> Result<Tensor> {
    if w < 2 {
        return Err(GraphError::TooFewSlices(w));
    }
    Ok(degree_normalize(&path_graph(w)))
}

/// Unnormalized path adjacency `A[i, i±1] = 1`.
pub fn path_graph(w: usize) -> Tensor {
    let mut a = Tensor::zeros(&[w, w]);
    for i in 0..w.saturating_sub(1) {
        a.data[i * w + i + 1] = 1.0;
        a.data[(i + 1) * w + i] = 1.0;
    }
    a
}

/// Unnormalized channel graph that ignores the data: each channel links to
/// its `k` nearest channel indices (ties to the lower index), symmetrized,
/// binary. Used when PLV initialization is ablated.
pub fn index_knn_graph(n: usize, k: usize) -> Result<Tensor> {
    if k == 0 || k >= n {
        return Err(GraphError::InvalidTopK { k, n });
    }
    let mut score = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                score.data[i * n + j] = 1.0 / (1.0 + i.abs_diff(j) as f64);
            }
        }
    }
    let mut p = sparsify_symmetrize(&score, k)?;
    for v in &mut p.data {
        if *v > 0.0 {
            *v = 1.0;
        }
    }
    Ok(p)
}

/// `renormalize(relu(base + delta))` recorded on a tape:
/// zero diagonal, `½(M + Mᵀ)`, then `D^{-1/2} M D^{-1/2}`.
pub fn effective_adjacency_on_tape(tape: &mut Tape, base: Var, delta: Var) -> autodiff::Result<Var> {
    let n = tape.shape(base)[0];
    let sum = tape.add(base, delta)?;
    let pos = tape.relu(sum);
    let mut off = Tensor::full(&[n, n], 1.0);
    for i in 0..n {
        off.data[i * n + i] = 0.0;
    }
    let off = tape.constant(off);
    let masked = tape.mul(pos, off)?;
    let t = tape.transpose(masked)?;
    let both = tape.add(masked, t)?;
    let sym = tape.scale(both, 0.5);
    let deg = tape.sum_axis(sym, 1)?;
    let dinv = tape.inv_sqrt_guarded(deg, DEGREE_EPS);
    let col = tape.reshape(dinv, &[n, 1])?;
    let row = tape.reshape(dinv, &[1, n])?;
    let outer = tape.matmul(col, row)?;
    tape.mul(sym, outer)
}

/// Value-only [`effective_adjacency_on_tape`].
pub fn effective_adjacency(adj: &Adjacency) -> Tensor {
    let mut tape = Tape::new();
    let p = tape.constant(adj.base.clone());
    let d = tape.constant(adj.delta.clone());
    let out = effective_adjacency_on_tape(&mut tape, p, d).expect("square shapes");
    tape.value(out).clone()
}

/// Symmetric, nonnegative, zero-diagonal and finite.
pub fn is_valid_adjacency(a: &Tensor, tol: f64) -> bool {
    let n = a.shape[0];
    a.shape == [n, n]
        && a.is_finite()
        && (0..n).all(|i| {
            a.data[i * n + i].abs() <= tol
                && (0..n).all(|j| a.data[i * n + j] >= -tol && (a.data[i * n + j] - a.data[j * n + i]).abs() <= tol)
        })
}

/// CSV dump: a `# kind,n` header line, then `n` comma-separated rows.
pub fn to_csv(kind: &str, m: &Tensor) -> String {
    let n = m.shape[0];
    let mut s = format!("# {kind},{n}\n");
    for i in 0..n {
        let row: Vec<String> = m.data[i * n..(i + 1) * n].iter().map(|v| format!("{v:.17e}")).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}
