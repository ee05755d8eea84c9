//! End-to-end acceptance checks. Each criterion prints one `PASS`/`FAIL`
//! line; the process exits nonzero when any criterion fails.
//!
//! `ACCEPTANCE_ONLY=1,4,9` restricts the run to the listed criteria.

use std::f64::consts::PI;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;

use stgmfm::autodiff::suite::vjp_suite;
use stgmfm::dataio::{synth_generate, window_count, window_trial, Dataset, Protocol, SynthConfig, Trial};
use stgmfm::dsp;
use stgmfm::eval::{
    evaluate, metrics_from_confusion, run_cross_subject_pair, run_protocol_prepared, ConfusionMatrix, EvalOptions,
    PreparedDataset, ProtocolOptions,
};
use stgmfm::graphs::{plv_trial, PlvBand};
use stgmfm::model::gradcheck::model_gradcheck;
use stgmfm::model::{BranchSet, Model, ModelHyperParams, ParamRole};
use stgmfm::par::Exec;
use stgmfm::train::{self, HistoryRecord, TrainConfig};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

// ---------------------------------------------------------------- 1

fn gradients() -> Outcome {
    let start = Instant::now();
    let model = model_gradcheck(12).expect("model gradcheck");
    let suite = vjp_suite(0, 100).expect("vjp suite");
    let elapsed = start.elapsed();
    let covered = suite.cases.len() == 100;
    let pass = model.n_coords > 300
        && model.max_rel_error < 1e-4
        && model.passes(1e-4)
        && covered
        && suite.failures(1e-6).is_empty()
        && elapsed < Duration::from_secs(120);
    outcome(
        pass,
        format!(
            "model {} coords, max rel {:.2e}; {} primitive cases, max rel {:.2e}; {:.1}s",
            model.n_coords,
            model.max_rel_error,
            suite.cases.len(),
            suite.max_rel_error(),
            secs(elapsed)
        ),
    )
}

// ---------------------------------------------------------------- 2

fn naive_dft(x: &[f64]) -> Vec<Complex64> {
    let l = x.len();
    (0..l)
        .map(|k| {
            x.iter()
                .enumerate()
                .map(|(t, &v)| Complex64::from_polar(v, -2.0 * PI * (k * t % l) as f64 / l as f64))
                .sum()
        })
        .collect()
}

fn naive_idft(spec: &[Complex64]) -> Vec<Complex64> {
    let l = spec.len();
    (0..l)
        .map(|t| {
            spec.iter()
                .enumerate()
                .map(|(k, &v)| v * Complex64::from_polar(1.0, 2.0 * PI * (k * t % l) as f64 / l as f64))
                .sum::<Complex64>()
                / l as f64
        })
        .collect()
}

/// Phases by direct DFT: brick-wall band mask, then the analytic signal
/// (negative bins zeroed, positive bins doubled).
fn oracle_phases(x: &[f64], fs: f64, lo: f64, hi: f64) -> Vec<f64> {
    let l = x.len();
    let mut spec = naive_dft(x);
    for (k, v) in spec.iter_mut().enumerate() {
        let kk = k.min(l - k);
        let f = kk as f64 * fs / l as f64;
        if !(lo..=hi).contains(&f) {
            *v = Complex64::new(0.0, 0.0);
        }
    }
    for (k, v) in spec.iter_mut().enumerate() {
        let nyquist = l % 2 == 0 && k == l / 2;
        if k == 0 || nyquist {
            continue;
        }
        *v *= if k < l.div_ceil(2) { 2.0 } else { 0.0 };
    }
    naive_idft(&spec).iter().map(|z| z.im.atan2(z.re)).collect()
}

fn oracle_plv(trial: &Trial, lo: f64, hi: f64) -> Vec<f64> {
    let c = trial.n_channels;
    let ph: Vec<Vec<f64>> = (0..c)
        .map(|ch| oracle_phases(&trial.channel_f64(ch), trial.sample_rate_hz, lo, hi))
        .collect();
    let mut out = vec![0.0; c * c];
    for i in 0..c {
        for j in 0..c {
            let s: Complex64 = ph[i]
                .iter()
                .zip(&ph[j])
                .map(|(a, b)| Complex64::from_polar(1.0, a - b))
                .sum();
            out[i * c + j] = s.norm() / ph[i].len() as f64;
        }
    }
    out
}

fn oracles() -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let mut notes = Vec::new();

    let mut fft_err: f64 = 0.0;
    for l in (2..=64).chain([125]) {
        let x: Vec<f64> = (0..l).map(|_| r.random_range(-1.0..1.0)).collect();
        let got = dsp::rfft(&x).expect("rfft");
        let want = naive_dft(&x);
        for (k, g) in got.bins.iter().enumerate() {
            fft_err = fft_err.max((g - want[k]).norm());
        }
        if got.bins.len() != l / 2 + 1 {
            fft_err = f64::INFINITY;
        }
    }
    notes.push(format!("rfft max abs {fft_err:.1e}"));

    let mut plv_err: f64 = 0.0;
    for seed in 0..3 {
        let ds = synth_generate(&SynthConfig {
            n_subjects: 1,
            n_sessions: 1,
            trials_per_class: 1,
            n_channels: 6,
            n_samples: 250,
            seed,
            ..SynthConfig::default()
        })
        .expect("synth");
        let band = PlvBand::default();
        for tr in &ds.trials {
            let got = plv_trial(tr, band).expect("plv");
            let want = oracle_plv(tr, band.lo_hz, band.hi_hz);
            for (g, w) in got.data.iter().zip(&want) {
                plv_err = plv_err.max((g - w).abs());
            }
        }
    }
    notes.push(format!("PLV max abs {plv_err:.1e}"));

    let m = metrics_from_confusion(&ConfusionMatrix::from_rows(vec![vec![5, 1], vec![2, 4]])).expect("metrics");
    let f1 = 50.0 * (10.0 / 13.0 + 8.0 / 11.0);
    let metric_err = (m.kappa - 0.5).abs().max((m.acc - 75.0).abs()).max((m.f1 - f1).abs());
    let perfect = metrics_from_confusion(&ConfusionMatrix::from_rows(vec![
        vec![4, 0, 0],
        vec![0, 3, 0],
        vec![0, 0, 5],
    ]))
    .unwrap();
    let perfect_ok = perfect.acc == 100.0 && perfect.kappa == 1.0 && perfect.f1 == 100.0;
    notes.push(format!("kappa {:.6} f1 {:.6}", m.kappa, m.f1));

    let pass = fft_err < 1e-9 && plv_err < 1e-9 && metric_err < 1e-12 && perfect_ok;
    outcome(pass, notes.join("; "))
}

// ---------------------------------------------------------------- 3

fn window_counts() -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let mut bad = 0;
    let mut cases = vec![(1125, 125, 125)];
    while cases.len() < 1000 {
        let t = r.random_range(1..=1500usize);
        let wn = r.random_range(1..=t);
        let st = r.random_range(1..=300usize);
        cases.push((t, wn, st));
    }
    for &(t, wn, st) in &cases {
        let want = (t - wn) / st + 1;
        let trial = Trial {
            data: (0..t).map(|i| i as f32).collect(),
            n_channels: 1,
            n_samples: t,
            label: 0,
            subject_id: 0,
            session_id: 0,
            sample_rate_hz: 250.0,
        };
        let n = window_count(t, wn, st).expect("valid window");
        let data = window_trial(&trial, wn, st).expect("valid window");
        let in_bounds = data.len() == n * wn
            && data
                .chunks(wn)
                .enumerate()
                .all(|(w, win)| w * st + wn <= t && win.iter().enumerate().all(|(i, &v)| v == (w * st + i) as f64));
        if n != want || !in_bounds {
            bad += 1;
        }
    }
    let nine = window_count(1125, 125, 125).ok() == Some(9);
    outcome(
        bad == 0 && nine,
        format!("{} cases, {bad} mismatches; (1125,125,125) -> 9: {nine}", cases.len()),
    )
}

// ---------------------------------------------------------------- shared tiny task

fn tiny_data(trials_per_class: usize, seed: u64) -> Dataset {
    synth_generate(
        &SynthConfig {
            n_subjects: 1,
            n_sessions: 1,
            trials_per_class,
            n_channels: 6,
            n_samples: 96,
            erd_depth: 0.8,
            seed,
            ..SynthConfig::default()
        }
        .noise_free(),
    )
    .expect("synth")
}

fn tiny_hyper() -> ModelHyperParams {
    let mut h = ModelHyperParams::default();
    h.n_channels = 6;
    h.n_samples = 96;
    h.window_len = 32;
    h.stride = 32;
    h.d = 6;
    h.k_s = 1;
    h.k_t = 1;
    h.temporal_kernel = 3;
    h.mfm.width = 4;
    h.mfm.envelope_window = 5;
    h
}

fn tiny_cfg() -> TrainConfig {
    TrainConfig {
        epochs: 200,
        batch_size: 6,
        val_fraction: 0.0,
        plv_top_k: 2,
        seed: 11,
        ..TrainConfig::default()
    }
}

// ---------------------------------------------------------------- 4

fn exact_adjacency_violation(a: &[f64], n: usize) -> Option<String> {
    for i in 0..n {
        if a[i * n + i] != 0.0 {
            return Some(format!("diagonal {i} = {}", a[i * n + i]));
        }
        for j in 0..n {
            let v = a[i * n + j];
            if !v.is_finite() || v < 0.0 {
                return Some(format!("entry ({i},{j}) = {v}"));
            }
            if v != a[j * n + i] {
                return Some(format!("asymmetric at ({i},{j})"));
            }
        }
    }
    None
}

fn adjacency_invariants() -> Outcome {
    let ds = tiny_data(4, 3);
    let mut checks = 0usize;
    let mut violation: Option<String> = None;
    let mut moved = false;
    let mut obs = |m: &Model, rec: &HistoryRecord| {
        if rec.step % 10 != 0 {
            return;
        }
        for (name, a) in m.effective_adjacencies() {
            checks += 1;
            if let Some(v) = exact_adjacency_violation(&a.data, a.shape[0]) {
                violation.get_or_insert(format!("step {} {name}: {v}", rec.step));
            }
        }
        moved |= m.params.l1(ParamRole::CcgDelta) > 0.0;
    };
    let out = train::train(&ds, &tiny_hyper(), &tiny_cfg(), Some(&mut obs)).expect("train");
    let epochs = out.history.last().map_or(0, |r| r.epoch + 1);
    let pass = violation.is_none() && epochs == 200 && checks > 0 && moved;
    outcome(
        pass,
        format!(
            "{epochs} epochs, {} steps, {checks} adjacency checks, increments moved: {moved}{}",
            out.history.len(),
            violation.map(|v| format!("; {v}")).unwrap_or_default()
        ),
    )
}

// ---------------------------------------------------------------- 5

fn schedule() -> Outcome {
    let ds = tiny_data(2, 5);
    let cfg = TrainConfig {
        epochs: 1000,
        batch_size: 6,
        ..tiny_cfg()
    };
    let out = train::train(&ds, &tiny_hyper(), &cfg, None).expect("train");
    let n = out.history.len();
    let t_max = (n - 1) as f64;
    let mut err: f64 = 0.0;
    for r in &out.history {
        let want = cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + (PI * r.step as f64 / t_max).cos());
        err = err.max((r.lr - want).abs());
    }
    let first = out.history[0].lr;
    let last = out.history[n - 1].lr;
    let pass = n == 1000 && err <= 1e-12 && first == 2e-3 && last == cfg.lr_min;
    outcome(
        pass,
        format!("{n} steps, max |lr - closed form| {err:.1e}, first {first:e}, last {last:e}"),
    )
}

// ---------------------------------------------------------------- 6

fn overfit() -> Outcome {
    let start = Instant::now();
    let synth = SynthConfig {
        n_subjects: 1,
        n_sessions: 1,
        trials_per_class: 10,
        erd_depth: 0.8,
        seed: 6,
        ..SynthConfig::default()
    }
    .noise_free();
    let ds = synth_generate(&synth).expect("synth");
    let h = ModelHyperParams::default();
    let cfg = TrainConfig {
        epochs: 200,
        batch_size: 10,
        val_fraction: 0.0,
        seed: 6,
        ..TrainConfig::default()
    };
    let out = train::train(&ds, &h, &cfg, None).expect("train");
    let ev = evaluate(&out.model, &ds, EvalOptions::default()).expect("eval");
    let elapsed = start.elapsed();
    let pass = ds.len() == 30 && ev.metrics.acc >= 95.0 && elapsed < Duration::from_secs(300);
    outcome(
        pass,
        format!(
            "{} trials ({}x{}), train acc {:.1}% after 200 epochs, {:.1}s",
            ds.len(),
            h.n_channels,
            h.n_samples,
            ev.metrics.acc,
            secs(elapsed)
        ),
    )
}

// ---------------------------------------------------------------- 7 and 8

struct OrderingRuns {
    only_ab: Vec<f64>,
    only_c: Vec<f64>,
    full: Vec<f64>,
    finetuned: Vec<f64>,
    elapsed: Duration,
}

fn ordering_synth(seed: u64) -> SynthConfig {
    SynthConfig {
        n_subjects: 8,
        n_sessions: 2,
        trials_per_class: 5,
        n_channels: 12,
        n_samples: 500,
        erd_depth: 0.6,
        snr_db: 0.0,
        seed,
        ..SynthConfig::default()
    }
}

fn ordering_hyper(branches: &str) -> ModelHyperParams {
    ModelHyperParams {
        n_channels: 12,
        n_samples: 500,
        d: 16,
        branches: BranchSet::parse(branches).expect("branch set"),
        ..ModelHyperParams::default()
    }
}

fn ordering_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 30,
        batch_size: 8,
        finetune_epochs: 10,
        seed,
        exec: Exec::Parallel,
        ..TrainConfig::default()
    }
}

fn ordering_runs() -> OrderingRuns {
    let start = Instant::now();
    let opts = ProtocolOptions {
        jobs: 0,
        majority_vote: false,
    };
    let mut runs = OrderingRuns {
        only_ab: Vec::new(),
        only_c: Vec::new(),
        full: Vec::new(),
        finetuned: Vec::new(),
        elapsed: Duration::ZERO,
    };
    for seed in 0..3 {
        let ds = synth_generate(&ordering_synth(seed)).expect("synth");
        let cfg = ordering_cfg(seed);
        for (branches, sink) in [("A,B", &mut runs.only_ab), ("C", &mut runs.only_c)] {
            let h = ordering_hyper(branches);
            let prep = PreparedDataset::new(&ds, &h, &cfg).expect("prepare");
            let rep = run_protocol_prepared(&prep, Protocol::CrossSubject, &h, &cfg, &opts).expect("protocol");
            sink.push(rep.mean.acc);
        }
        let h = ordering_hyper("A,B,C");
        let prep = PreparedDataset::new(&ds, &h, &cfg).expect("prepare");
        let (cs, ft) = run_cross_subject_pair(&prep, &h, &cfg, &opts).expect("protocol pair");
        runs.full.push(cs.mean.acc);
        runs.finetuned.push(ft.mean.acc);
    }
    runs.elapsed = start.elapsed();
    runs
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn fmt_accs(v: &[f64]) -> String {
    let per: Vec<String> = v.iter().map(|a| format!("{a:.1}")).collect();
    format!("{:.2} [{}]", mean(v), per.join(" "))
}

fn ordering(runs: &OrderingRuns) -> Outcome {
    let (ab, c, full) = (mean(&runs.only_ab), mean(&runs.only_c), mean(&runs.full));
    let above_chance = full >= 100.0 / 3.0 + 10.0;
    let pass = above_chance && full >= ab && full >= c && runs.elapsed < Duration::from_secs(1800);
    outcome(
        pass,
        format!(
            "full {}, only A&B {}, only C {}; {:.0}s including fine-tuning",
            fmt_accs(&runs.full),
            fmt_accs(&runs.only_ab),
            fmt_accs(&runs.only_c),
            secs(runs.elapsed)
        ),
    )
}

fn finetune_ordering(runs: &OrderingRuns) -> Outcome {
    let (cs, ft) = (mean(&runs.full), mean(&runs.finetuned));
    outcome(
        ft >= cs,
        format!(
            "finetune {}, cross-subject {}",
            fmt_accs(&runs.finetuned),
            fmt_accs(&runs.full)
        ),
    )
}

// ---------------------------------------------------------------- 9

fn regularizer() -> Outcome {
    let ds = tiny_data(4, 3);
    let h = tiny_hyper();
    let run = |lambda_s: f64| {
        let cfg = TrainConfig { lambda_s, ..tiny_cfg() };
        let out = train::train(&ds, &h, &cfg, None).expect("train");
        out.model.params.l1(ParamRole::CcgDelta)
    };
    let strong = run(10.0);
    let weak = run(1e-4);

    let cfg = TrainConfig {
        lambda_s: 0.0,
        lambda_t: 0.0,
        beta: 0.0,
        epochs: 20,
        ..tiny_cfg()
    };
    let out = train::train(&ds, &h, &cfg, None).expect("train");
    let pure_ce = out.history.iter().all(|r| r.loss.to_bits() == r.ce.to_bits());

    let pass = weak > 0.0 && strong < 0.01 * weak && pure_ce;
    outcome(
        pass,
        format!(
            "|dA|_1 {strong:.3e} at 10 vs {weak:.3e} at 1e-4 (ratio {:.2e}); zero penalties give CE bit for bit: {pure_ce}",
            strong / weak
        ),
    )
}

// ---------------------------------------------------------------- 10

fn determinism() -> Outcome {
    let bin = env!("CARGO_BIN_EXE_stgmfm");
    let dir = tempfile::tempdir().expect("tempdir");
    let cfg_path = dir.path().join("config.json");
    std::fs::write(
        &cfg_path,
        r#"{
  "seed": 10,
  "synth.n_subjects": 4, "synth.n_sessions": 2, "synth.trials_per_class": 2,
  "synth.n_channels": 6, "synth.n_samples": 250,
  "model.n_channels": 6, "model.n_samples": 250, "model.d": 6,
  "train.epochs": 3, "train.batch_size": 6
}"#,
    )
    .expect("write config");
    let run = |name: &str, jobs: &str| {
        let out = dir.path().join(name);
        let status = Command::new(bin)
            .args(["protocol", "--config"])
            .arg(&cfg_path)
            .args(["--jobs", jobs, "--out"])
            .arg(&out)
            .output()
            .expect("spawn");
        assert!(
            status.status.success(),
            "protocol failed: {}",
            String::from_utf8_lossy(&status.stderr)
        );
        out
    };
    let a = run("a", "1");
    let b = run("b", "0");
    let mut files: Vec<_> = std::fs::read_dir(&a)
        .expect("out dir")
        .map(|e| e.expect("entry").file_name())
        .filter(|n| n.to_string_lossy().ends_with(".csv"))
        .collect();
    files.sort();
    let same = !files.is_empty()
        && files
            .iter()
            .all(|f| std::fs::read(a.join(f)).ok() == std::fs::read(b.join(f)).ok());
    let rows = std::fs::read_to_string(a.join("results.csv"))
        .map(|s| s.lines().count())
        .unwrap_or(0);
    outcome(
        same && rows == 6,
        format!(
            "{} CSV file(s), {rows} lines, byte-identical across runs: {same}",
            files.len()
        ),
    )
}

// ---------------------------------------------------------------- driver

fn main() {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |n: usize| only.as_ref().is_none_or(|o| o.contains(&n));

    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut report = |n: usize, name: &'static str, o: Outcome| {
        println!("{} [{n}] {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, name, o));
    };

    if wanted(1) {
        report(1, "gradients", gradients());
    }
    if wanted(2) {
        report(2, "oracles", oracles());
    }
    if wanted(3) {
        report(3, "window count", window_counts());
    }
    if wanted(4) {
        report(4, "adjacency invariants", adjacency_invariants());
    }
    if wanted(5) {
        report(5, "schedule", schedule());
    }
    if wanted(6) {
        report(6, "overfit", overfit());
    }
    if wanted(7) || wanted(8) {
        let runs = ordering_runs();
        if wanted(7) {
            report(7, "signal-presence ordering", ordering(&runs));
        }
        if wanted(8) {
            report(8, "fine-tuning ordering", finetune_ordering(&runs));
        }
    }
    if wanted(9) {
        report(9, "regularizer", regularizer());
    }
    if wanted(10) {
        report(10, "determinism", determinism());
    }

    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!(
        "acceptance: {} passed, {} failed{}",
        results.len() - failed.len(),
        failed.len(),
        if failed.is_empty() {
            String::new()
        } else {
            format!(" {failed:?}")
        }
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
