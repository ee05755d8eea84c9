//! FFT-backed signal primitives.
//!
//! Conventions: the forward transform is unnormalized and the inverse carries
//! the `1/L` factor, so Parseval reads `Σx² = (1/L)·Σ|X|²` over the full
//! two-sided spectrum. Any length is supported (rustfft falls back to
//! Bluestein / mixed radix), which matters because trial windows are 125
//! samples long.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DspError {
    #[error("invalid length {len}: need at least {min}")]
    InvalidLength { len: usize, min: usize },
    #[error("degenerate signal: input is constant")]
    DegenerateSignal,
    #[error("invalid band [{lo_hz}, {hi_hz}] Hz for fs={fs} Hz")]
    InvalidBand { lo_hz: f64, hi_hz: f64, fs: f64 },
    #[error("invalid RMS window {win} for length {len}")]
    InvalidWindow { win: usize, len: usize },
    #[error("no dominant period: all non-DC bins are zero")]
    NoPeriod,
    #[error("invalid period count {0}")]
    InvalidCount(usize),
}

pub type Result<T> = std::result::Result<T, DspError>;

/// One-sided spectrum of a real signal: bins `0..=L/2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub bins: Vec<Complex64>,
    pub len: usize,
    pub sample_rate_hz: f64,
}

impl Spectrum {
    /// Frequency of bin `k` in Hz.
    pub fn frequency(&self, k: usize) -> f64 {
        k as f64 * self.sample_rate_hz / self.len as f64
    }
}

/// Instantaneous phase of one channel, radians in `(-π, π]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseSeries {
    pub channel: usize,
    pub phi: Vec<f64>,
}

impl PhaseSeries {
    pub fn of_channel(channel: usize, x: &[f64]) -> Result<Self> {
        Ok(Self {
            channel,
            phi: analytic_phase(x)?,
        })
    }
}

thread_local! {
    static PLANS: RefCell<(FftPlanner<f64>, HashMap<(usize, bool), Arc<dyn Fft<f64>>>)> =
        RefCell::new((FftPlanner::new(), HashMap::new()));
}

fn plan(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANS.with(|cell| {
        let mut guard = cell.borrow_mut();
        let (planner, cache) = &mut *guard;
        cache
            .entry((len, inverse))
            .or_insert_with(|| {
                if inverse {
                    planner.plan_fft_inverse(len)
                } else {
                    planner.plan_fft_forward(len)
                }
            })
            .clone()
    })
}

/// Full complex DFT (unnormalized) of a real signal.
pub fn fft_real(x: &[f64]) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    if !buf.is_empty() {
        plan(buf.len(), false).process(&mut buf);
    }
    buf
}

/// Inverse complex DFT including the `1/L` factor.
pub fn ifft(spec: &[Complex64]) -> Vec<Complex64> {
    let mut buf = spec.to_vec();
    if buf.is_empty() {
        return buf;
    }
    plan(buf.len(), true).process(&mut buf);
    let scale = 1.0 / buf.len() as f64;
    for v in &mut buf {
        *v *= scale;
    }
    buf
}

pub fn rfft(x: &[f64]) -> Result<Spectrum> {
    rfft_at(x, 1.0)
}

pub fn rfft_at(x: &[f64], sample_rate_hz: f64) -> Result<Spectrum> {
    if x.len() < 2 {
        return Err(DspError::InvalidLength { len: x.len(), min: 2 });
    }
    let mut full = fft_real(x);
    full.truncate(x.len() / 2 + 1);
    Ok(Spectrum {
        bins: full,
        len: x.len(),
        sample_rate_hz,
    })
}

/// Inverse of [`rfft`]: rebuilds the Hermitian spectrum and keeps the real part.
pub fn irfft(spec: &Spectrum) -> Result<Vec<f64>> {
    let len = spec.len;
    if len < 2 || spec.bins.len() != len / 2 + 1 {
        return Err(DspError::InvalidLength { len, min: 2 });
    }
    let mut full = vec![Complex64::new(0.0, 0.0); len];
    full[..spec.bins.len()].copy_from_slice(&spec.bins);
    for k in spec.bins.len()..len {
        full[k] = spec.bins[len - k].conj();
    }
    Ok(ifft(&full).into_iter().map(|c| c.re).collect())
}

/// Analytic signal `x + i·H[x]` by zeroing negative frequencies and doubling
/// positive ones (DC and, for even lengths, Nyquist kept singly).
pub fn analytic_signal(x: &[f64]) -> Vec<Complex64> {
    let len = x.len();
    let mut spec = fft_real(x);
    let half = len / 2;
    for (k, v) in spec.iter_mut().enumerate() {
        let keep_single = k == 0 || (len % 2 == 0 && k == half);
        if keep_single {
            continue;
        }
        if k <= (len - 1) / 2 {
            *v *= 2.0;
        } else {
            *v = Complex64::new(0.0, 0.0);
        }
    }
    ifft(&spec)
}

pub fn analytic_phase(x: &[f64]) -> Result<Vec<f64>> {
    if x.len() < 4 {
        return Err(DspError::InvalidLength { len: x.len(), min: 4 });
    }
    if x.iter().all(|&v| v == x[0]) {
        return Err(DspError::DegenerateSignal);
    }
    Ok(analytic_signal(x).iter().map(|c| c.im.atan2(c.re)).collect())
}

/// Brick-wall bandpass: bins with frequency outside `[lo_hz, hi_hz]` are zeroed.
pub fn bandpass(x: &[f64], lo_hz: f64, hi_hz: f64, fs: f64) -> Result<Vec<f64>> {
    if !(lo_hz > 0.0 && lo_hz < hi_hz && hi_hz < fs / 2.0) {
        return Err(DspError::InvalidBand { lo_hz, hi_hz, fs });
    }
    let mut spec = rfft_at(x, fs)?;
    for k in 0..spec.bins.len() {
        let f = spec.frequency(k);
        if f < lo_hz || f > hi_hz {
            spec.bins[k] = Complex64::new(0.0, 0.0);
        }
    }
    irfft(&spec)
}

/// Trailing-window RMS, `y[t] = sqrt(mean(x[t-win+1..=t]²))`.
///
/// Samples before the start are reflected (`x[-j]` reads `x[j-1]`).
pub fn rms_envelope(x: &[f64], win: usize) -> Result<Vec<f64>> {
    let len = x.len();
    if win == 0 || win > len {
        return Err(DspError::InvalidWindow { win, len });
    }
    let at = |i: isize| -> f64 {
        if i >= 0 {
            x[i as usize]
        } else {
            x[(-i - 1) as usize]
        }
    };
    let mut out = Vec::with_capacity(len);
    let mut acc = 0.0;
    for i in -(win as isize - 1)..=0 {
        acc += at(i) * at(i);
    }
    out.push((acc / win as f64).max(0.0).sqrt());
    for t in 1..len as isize {
        let enter = at(t);
        let leave = at(t - win as isize);
        acc += enter * enter - leave * leave;
        out.push((acc / win as f64).max(0.0).sqrt());
    }
    Ok(out)
}

/// The `k` strongest non-DC bins as `(period, amplitude)`, strongest first.
///
/// `period = round(L / bin)`. Ties go to the lower bin. Bins below
/// `1e-9 · max(1, Σ|x|)` count as zero, which absorbs FFT round-off on
/// constant inputs.
pub fn dominant_periods(x: &[f64], k: usize) -> Result<Vec<(usize, f64)>> {
    if k == 0 {
        return Err(DspError::InvalidCount(k));
    }
    if x.len() < 4 {
        return Err(DspError::InvalidLength { len: x.len(), min: 4 });
    }
    let spec = rfft(x)?;
    let floor = 1e-9 * x.iter().map(|v| v.abs()).sum::<f64>().max(1.0);
    let mut cands: Vec<(usize, f64)> = spec
        .bins
        .iter()
        .enumerate()
        .skip(1)
        .map(|(i, c)| (i, c.norm()))
        .filter(|&(_, m)| m > floor)
        .collect();
    if cands.is_empty() {
        return Err(DspError::NoPeriod);
    }
    cands.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let len = x.len() as f64;
    Ok(cands
        .into_iter()
        .take(k)
        .map(|(i, m)| ((len / i as f64).round() as usize, m))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn naive_dft(x: &[f64]) -> Vec<Complex64> {
        let n = x.len();
        (0..n)
            .map(|k| {
                let mut acc = Complex64::new(0.0, 0.0);
                for (t, &v) in x.iter().enumerate() {
                    let ang = -2.0 * PI * (k * t % n) as f64 / n as f64;
                    acc += Complex64::new(v * ang.cos(), v * ang.sin());
                }
                acc
            })
            .collect()
    }

    fn tone(len: usize, cycles: f64, amp: f64, fs: f64, freq: Option<f64>) -> Vec<f64> {
        (0..len)
            .map(|t| match freq {
                Some(f) => amp * (2.0 * PI * f * t as f64 / fs).cos(),
                None => amp * (2.0 * PI * cycles * t as f64 / len as f64).cos(),
            })
            .collect()
    }

    #[test]
    fn constant_is_dc_only() {
        let s = rfft(&[2.5; 8]).unwrap();
        assert_eq!(s.bins.len(), 5);
        assert!((s.bins[0].re - 20.0).abs() < 1e-12);
        for b in &s.bins[1..] {
            assert!(b.norm() < 1e-12);
        }
    }

    #[test]
    fn on_grid_tone_hits_one_bin() {
        let x = tone(8, 2.0, 1.0, 1.0, None);
        let s = rfft(&x).unwrap();
        for (k, b) in s.bins.iter().enumerate() {
            if k == 2 {
                assert!((b.norm() - 4.0).abs() < 1e-12);
            } else {
                assert!(b.norm() < 1e-12, "bin {k} = {b}");
            }
        }
    }

    #[test]
    fn rfft_matches_naive_dft_len16() {
        let x: Vec<f64> = (0..16).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.4).collect();
        let fast = rfft(&x).unwrap();
        let slow = naive_dft(&x);
        for k in 0..fast.bins.len() {
            assert!((fast.bins[k] - slow[k]).norm() < 1e-9);
        }
    }

    #[test]
    fn rfft_rejects_short_input() {
        assert_eq!(rfft(&[1.0]).unwrap_err(), DspError::InvalidLength { len: 1, min: 2 });
    }

    #[test]
    fn analytic_phase_slope_of_cosine() {
        let x = tone(64, 4.0, 1.0, 1.0, None);
        let phi = analytic_phase(&x).unwrap();
        let step = 2.0 * PI * 4.0 / 64.0;
        for t in 4..60 {
            let mut d = phi[t] - phi[t - 1];
            while d <= -PI {
                d += 2.0 * PI;
            }
            while d > PI {
                d -= 2.0 * PI;
            }
            assert!((d - step).abs() < 1e-3);
        }
    }

    #[test]
    fn sine_lags_cosine_by_quarter_cycle() {
        let w = 2.0 * PI * 5.0 / 64.0;
        let c: Vec<f64> = (0..64).map(|t| (w * t as f64).cos()).collect();
        let s: Vec<f64> = (0..64).map(|t| (w * t as f64).sin()).collect();
        let pc = analytic_phase(&c).unwrap();
        let ps = analytic_phase(&s).unwrap();
        for t in 4..60 {
            let d = (pc[t] - ps[t]).rem_euclid(2.0 * PI);
            assert!((d - PI / 2.0).abs() < 1e-3);
        }
    }

    #[test]
    fn analytic_signal_matches_naive_construction() {
        // band-limited: a few on-grid and off-grid tones
        let n = 50;
        let x: Vec<f64> = (0..n)
            .map(|t| {
                let t = t as f64;
                (0.3 * t).sin() + 0.5 * (2.0 * PI * 7.0 * t / 50.0).cos() + 0.1
            })
            .collect();
        let mut spec = naive_dft(&x);
        for k in 1..n {
            if k < n / 2 {
                spec[k] *= 2.0;
            } else if k > n / 2 {
                spec[k] = Complex64::new(0.0, 0.0);
            }
        }
        let oracle: Vec<Complex64> = (0..n)
            .map(|t| {
                let mut acc = Complex64::new(0.0, 0.0);
                for (k, c) in spec.iter().enumerate() {
                    let ang = 2.0 * PI * (k * t % n) as f64 / n as f64;
                    acc += c * Complex64::new(ang.cos(), ang.sin());
                }
                acc / n as f64
            })
            .collect();
        let fast = analytic_signal(&x);
        for t in 0..n {
            assert!((fast[t] - oracle[t]).norm() < 1e-9);
            assert!((fast[t].re - x[t]).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_phase_is_degenerate() {
        assert_eq!(analytic_phase(&[3.0; 16]), Err(DspError::DegenerateSignal));
    }

    #[test]
    fn bandpass_passes_and_stops_tones() {
        let fs = 250.0;
        let n = 1000;
        let inside = tone(n, 0.0, 1.0, fs, Some(10.0));
        let below = tone(n, 0.0, 1.0, fs, Some(2.0));
        let above = tone(n, 0.0, 1.0, fs, Some(50.0));
        let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
        let out = bandpass(&inside, 8.0, 30.0, fs).unwrap();
        let err: Vec<f64> = out.iter().zip(&inside).map(|(a, b)| a - b).collect();
        assert!(norm(&err) < 1e-6 * norm(&inside));
        let out = bandpass(&below, 8.0, 30.0, fs).unwrap();
        assert!(norm(&out) < 1e-6 * norm(&below));
        let mix: Vec<f64> = inside.iter().zip(&above).map(|(a, b)| a + b).collect();
        let out = bandpass(&mix, 8.0, 30.0, fs).unwrap();
        for (a, b) in out.iter().zip(&inside) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn bandpass_rejects_bad_band() {
        assert!(matches!(
            bandpass(&[0.0; 32], 30.0, 8.0, 250.0),
            Err(DspError::InvalidBand { .. })
        ));
        assert!(bandpass(&[0.0; 32], 8.0, 125.0, 250.0).is_err());
        assert!(bandpass(&[0.0; 32], 0.0, 30.0, 250.0).is_err());
    }

    #[test]
    fn rms_of_constant_zero_and_sine() {
        assert!(rms_envelope(&[-3.0; 10], 4)
            .unwrap()
            .iter()
            .all(|&v| (v - 3.0).abs() < 1e-12));
        assert!(rms_envelope(&[0.0; 10], 10).unwrap().iter().all(|&v| v == 0.0));
        let period = 40;
        let a = 2.0;
        let x: Vec<f64> = (0..400)
            .map(|t| a * (2.0 * PI * t as f64 / period as f64).sin())
            .collect();
        let y = rms_envelope(&x, period).unwrap();
        assert_eq!(y.len(), x.len());
        for &v in &y[period..] {
            assert!((v - a / 2f64.sqrt()).abs() < 1e-6);
        }
    }

    #[test]
    fn rms_window_bounds() {
        assert!(rms_envelope(&[1.0; 4], 0).is_err());
        assert!(rms_envelope(&[1.0; 4], 5).is_err());
    }

    #[test]
    fn dominant_period_cases() {
        let x = tone(64, 4.0, 1.0, 1.0, None);
        assert_eq!(dominant_periods(&x, 1).unwrap()[0].0, 16);
        let dc: Vec<f64> = x.iter().map(|v| v + 10.0).collect();
        assert_eq!(dominant_periods(&dc, 1).unwrap()[0].0, 16);
        let two: Vec<f64> = (0..64)
            .map(|t| {
                let t = t as f64;
                1.0 * (2.0 * PI * 3.0 * t / 64.0).sin() + 3.0 * (2.0 * PI * 8.0 * t / 64.0).cos()
            })
            .collect();
        let got = dominant_periods(&two, 2).unwrap();
        let mags: Vec<f64> = naive_dft(&two).iter().map(|c| c.norm()).collect();
        assert!(mags[8] > mags[3]);
        assert_eq!(got[0].0, 8);
        assert_eq!(got[1].0, 21);
        assert!((got[0].1 - mags[8]).abs() < 1e-9);
        assert!((got[1].1 - mags[3]).abs() < 1e-9);
        assert_eq!(dominant_periods(&[4.0; 32], 1), Err(DspError::NoPeriod));
        assert_eq!(dominant_periods(&x, 0), Err(DspError::InvalidCount(0)));
    }

    proptest! {
        #[test]
        fn round_trip_and_parseval(x in prop::collection::vec(-10.0f64..10.0, 2..=256)) {
            let s = rfft(&x).unwrap();
            let back = irfft(&s).unwrap();
            let energy: f64 = x.iter().map(|v| v * v).sum();
            let scale = energy.sqrt().max(1e-12);
            for (a, b) in back.iter().zip(&x) {
                prop_assert!((a - b).abs() <= 1e-6 * scale);
            }
            let full = fft_real(&x);
            let spec_energy: f64 = full.iter().map(|c| c.norm_sqr()).sum::<f64>() / x.len() as f64;
            prop_assert!((spec_energy - energy).abs() <= 1e-6 * energy.max(1e-12));
        }

        #[test]
        fn negation_shifts_phase_by_pi(x in prop::collection::vec(-5.0f64..5.0, 16..64)) {
            prop_assume!(x.iter().any(|&v| v != x[0]));
            let neg: Vec<f64> = x.iter().map(|v| -v).collect();
            let a = analytic_signal(&x);
            let b = analytic_signal(&neg);
            let p = analytic_phase(&x).unwrap();
            let q = analytic_phase(&neg).unwrap();
            for t in 2..x.len() - 2 {
                // phase is ill-defined where the analytic signal vanishes
                if a[t].norm() < 1e-6 || b[t].norm() < 1e-6 { continue; }
                let d = (p[t] - q[t]).rem_euclid(2.0 * PI);
                prop_assert!((d - PI).abs() < 1e-6);
            }
        }

        #[test]
        fn bandpass_idempotent(x in prop::collection::vec(-5.0f64..5.0, 32..200)) {
            let once = bandpass(&x, 8.0, 30.0, 250.0).unwrap();
            let twice = bandpass(&once, 8.0, 30.0, 250.0).unwrap();
            for (a, b) in once.iter().zip(&twice) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
