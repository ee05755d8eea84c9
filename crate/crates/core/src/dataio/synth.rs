//! Seeded synthetic dry-electrode motor-imagery EEG.
//!
//! Channels are grouped into regions: one per class (contiguous, equal size)
//! plus a remainder region. Each region shares a latent mu + beta oscillator
//! and every channel adds its own weakly detuned oscillator, so phase locking
//! is strong within a region and weak across regions. During the imagery
//! interval the channels of the labelled class lose `erd_depth` of their
//! amplitude. On top of that come 1/f noise scaled to `snr_db` in 8-30 Hz,
//! a slow sinusoidal drift and Poisson-timed step transients.
//!
//! Subjects differ in rhythm frequencies and channel gains, sessions in an
//! extra gain factor. Each trial draws from its own counter-based substream
//! keyed by `(seed, subject, session, index)`, so generation order and thread
//! count never change the output.

use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{DataError, Dataset, DatasetInfo, Result, Trial};
use crate::dsp;
use crate::par::{self, Exec};
use crate::rng;

const MONTAGE_23: [&str; 23] = [
    "Fz", "F3", "F4", "FC5", "FC1", "FC2", "FC6", "C5", "C3", "C1", "Cz", "C2", "C4", "C6", "CP5", "CP1", "CP2", "CP6",
    "P3", "Pz", "P4", "O1", "O2",
];

/// Signal band used for SNR accounting.
const SNR_BAND_HZ: (f64, f64) = (8.0, 30.0);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_subjects: usize,
    pub n_sessions: usize,
    pub trials_per_class: usize,
    pub n_classes: usize,
    pub n_channels: usize,
    pub n_samples: usize,
    pub sample_rate_hz: f64,
    /// In-band signal-to-noise ratio; `inf` disables the 1/f noise.
    #[serde(with = "inf_f64")]
    pub snr_db: f64,
    /// Peak amplitude of the baseline drift, microvolts.
    pub drift_amp: f64,
    /// Expected step transients per second.
    pub transient_rate: f64,
    /// Fractional amplitude drop on the labelled class's channels.
    pub erd_depth: f64,
    /// Rhythm amplitude, microvolts.
    pub amplitude_uv: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_subjects: 19,
            n_sessions: 2,
            trials_per_class: 10,
            n_classes: 3,
            n_channels: 23,
            n_samples: 1125,
            sample_rate_hz: 250.0,
            snr_db: 0.0,
            drift_amp: 20.0,
            transient_rate: 0.1,
            erd_depth: 0.6,
            amplitude_uv: 10.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Everything but the rhythm and the ERD switched off.
    pub fn noise_free(mut self) -> Self {
        self.snr_db = f64::INFINITY;
        self.drift_amp = 0.0;
        self.transient_rate = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DataError::InvalidConfig(m.to_string()));
        if self.n_subjects == 0 || self.n_sessions == 0 {
            return bad("n_subjects and n_sessions must be >= 1");
        }
        if self.trials_per_class == 0 {
            return bad("trials_per_class must be >= 1");
        }
        if self.n_classes < 2 {
            return bad("n_classes must be >= 2");
        }
        if self.n_channels < self.n_classes {
            return bad("need at least one channel per class");
        }
        if self.n_samples < 16 {
            return bad("n_samples must be >= 16");
        }
        if !(self.sample_rate_hz > 2.0 * SNR_BAND_HZ.1) {
            return bad("sample_rate_hz must exceed 60 Hz");
        }
        if !(0.0..=1.0).contains(&self.erd_depth) {
            return bad("erd_depth must lie in [0, 1]");
        }
        if self.snr_db.is_nan() || self.snr_db == f64::NEG_INFINITY {
            return bad("snr_db must be a number or +inf");
        }
        if !(self.drift_amp >= 0.0 && self.transient_rate >= 0.0 && self.amplitude_uv > 0.0) {
            return bad("drift_amp, transient_rate must be >= 0 and amplitude_uv > 0");
        }
        Ok(())
    }

    /// Sample range of the imagery interval: `[2T/9, 8T/9)`, i.e. 1.0-4.0 s of a
    /// 4.5 s trial.
    pub fn imagery_interval(&self) -> (usize, usize) {
        (2 * self.n_samples / 9, 8 * self.n_samples / 9)
    }
}

/// Channels whose rhythm desynchronizes for `class`.
pub fn class_channels(n_channels: usize, n_classes: usize, class: usize) -> std::ops::Range<usize> {
    let size = n_channels / n_classes;
    class * size..(class + 1) * size
}

fn region_of(n_channels: usize, n_classes: usize, ch: usize) -> usize {
    let size = n_channels / n_classes;
    (ch / size).min(n_classes)
}

fn channel_names(n: usize) -> Vec<String> {
    if n == MONTAGE_23.len() {
        MONTAGE_23.iter().map(|s| s.to_string()).collect()
    } else {
        (0..n).map(|i| format!("Ch{:02}", i + 1)).collect()
    }
}

struct SubjectTraits {
    mu_hz: f64,
    beta_hz: f64,
    gains: Vec<f64>,
}

fn subject_traits(cfg: &SynthConfig, subject: usize) -> SubjectTraits {
    let mut r = rng::stream(cfg.seed, "synth.subject", &[subject as u64]);
    SubjectTraits {
        mu_hz: r.random_range(9.0..12.0),
        beta_hz: r.random_range(18.0..24.0),
        gains: (0..cfg.n_channels).map(|_| r.random_range(0.7..1.3)).collect(),
    }
}

fn session_gains(cfg: &SynthConfig, subject: usize, session: usize) -> Vec<f64> {
    let mut r = rng::stream(cfg.seed, "synth.session", &[subject as u64, session as u64]);
    (0..cfg.n_channels).map(|_| r.random_range(0.85..1.15)).collect()
}

/// Raised-cosine gate: 0 outside `[a, b)`, 1 inside, with `ramp`-sample edges.
fn gate(t: usize, a: usize, b: usize, ramp: usize) -> f64 {
    if t < a || t >= b {
        return 0.0;
    }
    let from_edge = (t - a).min(b - 1 - t);
    if from_edge >= ramp {
        1.0
    } else {
        0.5 - 0.5 * (PI * (from_edge as f64 + 0.5) / ramp as f64).cos()
    }
}

/// 1/f (pink) noise via spectral shaping, scaled to the given mean power in
/// the SNR band.
fn pink_noise(r: &mut rng::Rng, n: usize, fs: f64, band_power: f64) -> Vec<f64> {
    let white: Vec<f64> = (0..n).map(|_| StandardNormal.sample(r)).collect();
    let mut spec = dsp::rfft_at(&white, fs).expect("n >= 16");
    spec.bins[0] = 0.0.into();
    for k in 1..spec.bins.len() {
        let f = spec.frequency(k);
        spec.bins[k] /= f.sqrt();
    }
    // mean power contributed by the band, from the one-sided spectrum
    let mut in_band = 0.0;
    for k in 1..spec.bins.len() {
        let f = spec.frequency(k);
        if (SNR_BAND_HZ.0..=SNR_BAND_HZ.1).contains(&f) {
            let mult = if n % 2 == 0 && k == n / 2 { 1.0 } else { 2.0 };
            in_band += mult * spec.bins[k].norm_sqr();
        }
    }
    in_band /= (n * n) as f64;
    let scale = if in_band > 0.0 {
        (band_power / in_band).sqrt()
    } else {
        0.0
    };
    for b in &mut spec.bins {
        *b *= scale;
    }
    dsp::irfft(&spec).expect("valid spectrum")
}

#[allow(clippy::too_many_arguments)]
fn generate_trial(
    cfg: &SynthConfig,
    traits: &SubjectTraits,
    sess_gain: &[f64],
    subject: usize,
    session: usize,
    index: usize,
    label: usize,
) -> Trial {
    let n = cfg.n_samples;
    let c = cfg.n_channels;
    let fs = cfg.sample_rate_hz;
    let mut r = rng::stream(cfg.seed, "synth.trial", &[subject as u64, session as u64, index as u64]);
    let n_regions = cfg.n_classes + 1;
    let region_phase: Vec<(f64, f64)> = (0..n_regions)
        .map(|_| (r.random_range(0.0..2.0 * PI), r.random_range(0.0..2.0 * PI)))
        .collect();
    let (ia, ib) = cfg.imagery_interval();
    let ramp = ((0.1 * fs) as usize).max(1);
    let erd_channels = class_channels(c, cfg.n_classes, label);

    // in-band power of the clean rhythm at unit gain: 0.8² + 0.6² = 1 times
    // (1 + 0.5²)/2 for the mu + half-amplitude beta pair
    let signal_power = cfg.amplitude_uv * cfg.amplitude_uv * 0.625;
    let noise_power = if cfg.snr_db.is_finite() {
        signal_power / 10f64.powf(cfg.snr_db / 10.0)
    } else {
        0.0
    };

    let mut data = vec![0f32; c * n];
    for ch in 0..c {
        let region = region_of(c, cfg.n_classes, ch);
        let (rp_mu, rp_beta) = region_phase[region];
        let own_mu = r.random_range(0.0..2.0 * PI);
        let own_beta = r.random_range(0.0..2.0 * PI);
        let detune = r.random_range(-0.3..0.3);
        let gain = traits.gains[ch] * sess_gain[ch] * cfg.amplitude_uv;
        let drift_hz = r.random_range(0.1..0.5);
        let drift_phase = r.random_range(0.0..2.0 * PI);
        let noise = if noise_power > 0.0 {
            Some(pink_noise(&mut r, n, fs, noise_power))
        } else {
            None
        };
        let has_erd = erd_channels.contains(&ch);
        let row = &mut data[ch * n..(ch + 1) * n];
        for (t, out) in row.iter_mut().enumerate() {
            let tt = t as f64 / fs;
            let w_mu = 2.0 * PI * traits.mu_hz * tt;
            let w_beta = 2.0 * PI * traits.beta_hz * tt;
            let shared = (w_mu + rp_mu).cos() + 0.5 * (w_beta + rp_beta).cos();
            let own = (w_mu + 2.0 * PI * detune * tt + own_mu).cos()
                + 0.5 * (w_beta + 2.0 * PI * detune * tt + own_beta).cos();
            let mut env = 1.0;
            if has_erd {
                env -= cfg.erd_depth * gate(t, ia, ib, ramp);
            }
            let mut v = gain * env * (0.8 * shared + 0.6 * own);
            if let Some(nz) = &noise {
                v += nz[t];
            }
            v += cfg.drift_amp * (2.0 * PI * drift_hz * tt + drift_phase).sin();
            *out = v as f32;
        }
    }

    if cfg.transient_rate > 0.0 {
        let duration = n as f64 / fs;
        let exp = Exp::new(cfg.transient_rate).expect("rate > 0");
        let mut at = exp.sample(&mut r);
        while at < duration {
            let ch = r.random_range(0..c);
            let height = r.random_range(1.0..3.0) * cfg.amplitude_uv * if r.random_bool(0.5) { 1.0 } else { -1.0 };
            let start = (at * fs) as usize;
            for v in &mut data[ch * n + start..(ch + 1) * n] {
                *v += height as f32;
            }
            at += exp.sample(&mut r);
        }
    }

    Trial {
        data,
        n_channels: c,
        n_samples: n,
        label,
        subject_id: subject as u32,
        session_id: session as u32,
        sample_rate_hz: fs,
    }
}

/// Generate a full synthetic dataset. Pure in `cfg` (including the seed).
pub fn synth_generate(cfg: &SynthConfig) -> Result<Dataset> {
    synth_generate_with(cfg, Exec::default())
}

pub fn synth_generate_with(cfg: &SynthConfig, exec: Exec) -> Result<Dataset> {
    cfg.validate()?;
    let traits: Vec<SubjectTraits> = (0..cfg.n_subjects).map(|s| subject_traits(cfg, s)).collect();
    let gains: Vec<Vec<f64>> = (0..cfg.n_subjects)
        .flat_map(|s| (0..cfg.n_sessions).map(move |e| (s, e)))
        .map(|(s, e)| session_gains(cfg, s, e))
        .collect();
    let per_session = cfg.trials_per_class * cfg.n_classes;
    let total = cfg.n_subjects * cfg.n_sessions * per_session;
    let trials = par::map_range(exec, total, |flat| {
        let subject = flat / (cfg.n_sessions * per_session);
        let session = (flat / per_session) % cfg.n_sessions;
        let index = flat % per_session;
        let label = index % cfg.n_classes;
        generate_trial(
            cfg,
            &traits[subject],
            &gains[subject * cfg.n_sessions + session],
            subject,
            session,
            index,
            label,
        )
    });
    let info = DatasetInfo {
        num_channels: cfg.n_channels,
        num_classes: cfg.n_classes,
        sample_rate_hz: cfg.sample_rate_hz,
        num_samples: cfg.n_samples,
        channel_names: channel_names(cfg.n_channels),
    };
    Ok(Dataset::new(info, trials))
}

/// Serialize `+inf` as the string `"inf"`; JSON has no infinity literal.
mod inf_f64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) if s == "inf" || s == "+inf" => Ok(f64::INFINITY),
            Repr::Str(s) => Err(serde::de::Error::custom(format!("bad snr_db {s:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            n_subjects: 2,
            n_sessions: 2,
            trials_per_class: 2,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn deterministic_and_parallel_invariant() {
        let cfg = small();
        let a = synth_generate_with(&cfg, Exec::Sequential).unwrap();
        let b = synth_generate_with(&cfg, Exec::Parallel).unwrap();
        assert_eq!(a, b);
        let mut other = cfg.clone();
        other.seed = 1;
        assert_ne!(a, synth_generate(&other).unwrap());
    }

    #[test]
    fn every_session_has_every_class() {
        let ds = synth_generate(&small()).unwrap();
        ds.validate().unwrap();
        assert_eq!(ds.len(), 2 * 2 * 2 * 3);
        for s in ds.subjects() {
            for e in ds.sessions_of(s) {
                for k in 0..3 {
                    assert!(ds
                        .trials
                        .iter()
                        .any(|t| t.subject_id == s && t.session_id == e && t.label == k));
                }
            }
        }
    }

    #[test]
    fn erd_shows_in_band_rms() {
        let cfg = SynthConfig {
            erd_depth: 0.8,
            ..small()
        }
        .noise_free();
        let ds = synth_generate(&cfg).unwrap();
        let (a, b) = cfg.imagery_interval();
        // mean mu-band RMS over the imagery interval, per (region, class)
        let mut table = [[0.0f64; 3]; 3];
        let mut counts = [0usize; 3];
        for t in &ds.trials {
            counts[t.label] += 1;
            for region in 0..3 {
                let mut acc = 0.0;
                let chans = class_channels(23, 3, region);
                for ch in chans.clone() {
                    let x = dsp::bandpass(&t.channel_f64(ch), 8.0, 30.0, 250.0).unwrap();
                    let seg = &x[a..b];
                    acc += (seg.iter().map(|v| v * v).sum::<f64>() / seg.len() as f64).sqrt();
                }
                table[region][t.label] += acc / chans.len() as f64;
            }
        }
        for region in 0..3 {
            for k in 0..3 {
                table[region][k] /= counts[k] as f64;
            }
            for k in 0..3 {
                if k != region {
                    // the desynchronized class is at least 50% weaker
                    assert!(table[region][region] < 0.5 * table[region][k], "{table:?}");
                }
            }
        }
    }

    #[test]
    fn snr_sentinel_round_trips_json() {
        let cfg = SynthConfig::default().noise_free();
        let s = serde_json::to_string(&cfg).unwrap();
        assert!(s.contains("\"inf\""));
        let back: SynthConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn rejects_bad_config() {
        let mut c = small();
        c.erd_depth = 1.5;
        assert!(c.validate().is_err());
        let mut c = small();
        c.trials_per_class = 0;
        assert!(c.validate().is_err());
    }
}
