//! Accuracy, Cohen's kappa and macro-F1, and per-fold protocol tables.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::dataio::{split_protocol, DataError, Dataset, Protocol};
use crate::graphs::{self, GraphError};
use crate::model::{self, Model, ModelError, ModelHyperParams, TrialInput};
use crate::par::{self, Exec};
use crate::rng;
use crate::train::{self, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty confusion matrix")]
    EmptyConfusion,
    #[error("test data has {got} channels x {got_samples} samples, model expects {expected} x {expected_samples}")]
    ChannelMismatch {
        expected: usize,
        expected_samples: usize,
        got: usize,
        got_samples: usize,
    },
    #[error("fold {fold}: {source}")]
    Fold {
        fold: usize,
        #[source]
        source: Box<EvalError>,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Counts indexed `[true class][predicted class]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        Self {
            counts: vec![vec![0; n_classes]; n_classes],
        }
    }

    pub fn from_rows(counts: Vec<Vec<u64>>) -> Self {
        Self { counts }
    }

    pub fn from_predictions(truth: &[usize], pred: &[usize], n_classes: usize) -> Self {
        let mut m = Self::new(n_classes);
        for (&t, &p) in truth.iter().zip(pred) {
            m.add(t, p);
        }
        m
    }

    pub fn add(&mut self, truth: usize, pred: usize) {
        self.counts[truth][pred] += 1;
    }

    pub fn n_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }
}

/// `acc` and `f1` in percent, `kappa` in `[−1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub acc: f64,
    pub kappa: f64,
    pub f1: f64,
}

pub fn metrics_from_confusion(m: &ConfusionMatrix) -> Result<Metrics> {
    let total = m.total();
    if total == 0 {
        return Err(EvalError::EmptyConfusion);
    }
    let k = m.n_classes();
    let n = total as f64;
    let row = |i: usize| m.counts[i].iter().sum::<u64>() as f64;
    let col = |j: usize| m.counts.iter().map(|r| r[j]).sum::<u64>() as f64;
    let trace: u64 = (0..k).map(|i| m.counts[i][i]).sum();
    let p_o = trace as f64 / n;
    let p_e = (0..k).map(|i| row(i) * col(i)).sum::<f64>() / (n * n);
    let kappa = if p_e == 1.0 { 0.0 } else { (p_o - p_e) / (1.0 - p_e) };
    let f1 = (0..k)
        .map(|i| {
            let tp = m.counts[i][i] as f64;
            let (pc, rc) = (col(i), row(i));
            let precision = if pc > 0.0 { tp / pc } else { 0.0 };
            let recall = if rc > 0.0 { tp / rc } else { 0.0 };
            if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            }
        })
        .sum::<f64>()
        / k as f64;
    Ok(Metrics {
        acc: 100.0 * p_o,
        kappa,
        f1: 100.0 * f1,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EvalOptions {
    /// Decide each trial by majority over the active branches' own argmax,
    /// falling back to the fused decision on ties.
    pub majority_vote: bool,
    pub exec: Exec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub metrics: Metrics,
    pub confusion: ConfusionMatrix,
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn decide(model: &Model, input: &TrialInput, majority_vote: bool) -> Result<usize> {
    let (br, fused) = model.logits(input)?;
    let fused_pred = model.decide(&br, &fused);
    if !majority_vote {
        return Ok(fused_pred);
    }
    let mut votes = vec![0usize; model.hyper.n_classes];
    for z in [&br.z_a, &br.z_b, &br.z_c].into_iter().flatten() {
        votes[argmax(z)] += 1;
    }
    let top = *votes.iter().max().unwrap_or(&0);
    let winners: Vec<usize> = (0..votes.len()).filter(|&c| votes[c] == top).collect();
    Ok(if winners.len() == 1 { winners[0] } else { fused_pred })
}

/// Evaluate prepared inputs with dropout off, one decision per trial.
pub fn evaluate_inputs(model: &Model, inputs: &[&TrialInput], opts: EvalOptions) -> Result<Evaluation> {
    let preds: Vec<Result<usize>> = par::map_slice(opts.exec, inputs, |x| decide(model, x, opts.majority_vote));
    let mut confusion = ConfusionMatrix::new(model.hyper.n_classes);
    for (p, x) in preds.into_iter().zip(inputs) {
        confusion.add(x.label, p?);
    }
    Ok(Evaluation {
        metrics: metrics_from_confusion(&confusion)?,
        confusion,
    })
}

pub fn evaluate(model: &Model, test: &Dataset, opts: EvalOptions) -> Result<Evaluation> {
    let h = &model.hyper;
    if test.info.num_channels != h.n_channels || test.info.num_samples != h.n_samples {
        return Err(EvalError::ChannelMismatch {
            expected: h.n_channels,
            expected_samples: h.n_samples,
            got: test.info.num_channels,
            got_samples: test.info.num_samples,
        });
    }
    let inputs = model::prepare_dataset(test, h, opts.exec)?;
    let refs: Vec<&TrialInput> = inputs.iter().collect();
    evaluate_inputs(model, &refs, opts)
}

/// Model inputs and per-trial PLV matrices of a whole dataset, computed once
/// and shared by every fold.
pub struct PreparedDataset<'a> {
    pub dataset: &'a Dataset,
    pub inputs: Vec<TrialInput>,
    pub plv: Option<Vec<Tensor>>,
    position: HashMap<usize, usize>,
}

impl<'a> PreparedDataset<'a> {
    pub fn new(dataset: &'a Dataset, hyper: &ModelHyperParams, cfg: &TrainConfig) -> Result<Self> {
        hyper.validate()?;
        let inputs = model::prepare_dataset(dataset, hyper, cfg.exec)?;
        let plv = if cfg.ablation.no_plv {
            None
        } else {
            let per: Vec<graphs::Result<Tensor>> =
                par::map_slice(cfg.exec, &dataset.trials, |t| graphs::plv_trial(t, cfg.plv_band));
            Some(per.into_iter().collect::<graphs::Result<_>>()?)
        };
        let position = dataset.ids.iter().enumerate().map(|(p, &id)| (id, p)).collect();
        Ok(Self {
            dataset,
            inputs,
            plv,
            position,
        })
    }

    fn positions(&self, part: &Dataset) -> Vec<usize> {
        part.ids.iter().map(|id| self.position[id]).collect()
    }

    fn refs(&self, positions: &[usize]) -> Vec<&TrialInput> {
        positions.iter().map(|&p| &self.inputs[p]).collect()
    }

    fn mean_plv(&self, positions: &[usize]) -> Result<Option<Tensor>> {
        match &self.plv {
            None => Ok(None),
            Some(all) => {
                let mats: Vec<Tensor> = positions.iter().map(|&p| all[p].clone()).collect();
                Ok(Some(graphs::average(&mats)?))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ProtocolOptions {
    /// Folds run concurrently in a pool of this many threads; 0 uses the
    /// global pool, 1 runs them one after another.
    pub jobs: usize,
    pub majority_vote: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub subject: u32,
    pub metrics: Metrics,
    pub confusion: ConfusionMatrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub protocol: Protocol,
    pub folds: Vec<FoldResult>,
    pub mean: Metrics,
    pub std: Metrics,
}

/// Training config of one fold: same settings, seed derived from `(seed, fold)`.
pub fn fold_config(cfg: &TrainConfig, fold: usize) -> TrainConfig {
    TrainConfig {
        seed: rng::derive_seed(cfg.seed, "fold", &[fold as u64]),
        ..cfg.clone()
    }
}

struct FoldRun {
    /// cross-subject view: the pre-trained model on every trial of the held-out subject
    pretrained: Option<FoldResult>,
    result: FoldResult,
}

fn run_fold(
    prep: &PreparedDataset<'_>,
    protocol: Protocol,
    fold: usize,
    hyper: &ModelHyperParams,
    cfg: &TrainConfig,
    opts: &ProtocolOptions,
    with_pretrained: bool,
) -> Result<FoldRun> {
    let inner = || -> Result<FoldRun> {
        let split = split_protocol(prep.dataset, protocol, fold)?;
        let subject = split.subject;
        let fcfg = fold_config(cfg, fold);
        let eval_opts = EvalOptions {
            majority_vote: opts.majority_vote,
            exec: fcfg.exec,
        };
        let train_pos = prep.positions(&split.train);
        let model = train::init_model_from_plv(prep.mean_plv(&train_pos)?.as_ref(), hyper, &fcfg)?;
        let trained = train::train_model(model, &prep.refs(&train_pos), &fcfg, None)?.best;
        let test_pos = prep.positions(&split.test);
        let adapt_pos = prep.positions(&split.adapt);
        let pretrained = if with_pretrained {
            let mut all = adapt_pos.clone();
            all.extend_from_slice(&test_pos);
            let ev = evaluate_inputs(&trained, &prep.refs(&all), eval_opts)?;
            Some(FoldResult {
                fold,
                subject,
                metrics: ev.metrics,
                confusion: ev.confusion,
            })
        } else {
            None
        };
        let final_model = if protocol == Protocol::CrossSubjectFinetune {
            train::finetune(&trained, &prep.refs(&adapt_pos), &fcfg)?.best
        } else {
            trained
        };
        let ev = evaluate_inputs(&final_model, &prep.refs(&test_pos), eval_opts)?;
        Ok(FoldRun {
            pretrained,
            result: FoldResult {
                fold,
                subject,
                metrics: ev.metrics,
                confusion: ev.confusion,
            },
        })
    };
    inner().map_err(|e| EvalError::Fold {
        fold,
        source: Box::new(e),
    })
}

fn run_all(
    prep: &PreparedDataset<'_>,
    protocol: Protocol,
    hyper: &ModelHyperParams,
    cfg: &TrainConfig,
    opts: &ProtocolOptions,
    with_pretrained: bool,
) -> Result<Vec<FoldRun>> {
    cfg.validate()?;
    let n = protocol.n_folds(prep.dataset);
    let exec = if opts.jobs == 1 { Exec::Sequential } else { cfg.exec };
    let runs = par::with_jobs(opts.jobs, || {
        par::map_range(exec, n, |fold| {
            run_fold(prep, protocol, fold, hyper, cfg, opts, with_pretrained)
        })
    });
    runs.into_iter().collect()
}

/// Train, adapt when the protocol asks for it, and evaluate every fold.
pub fn run_protocol(
    dataset: &Dataset,
    protocol: Protocol,
    hyper: &ModelHyperParams,
    cfg: &TrainConfig,
    opts: &ProtocolOptions,
) -> Result<ProtocolReport> {
    let prep = PreparedDataset::new(dataset, hyper, cfg)?;
    run_protocol_prepared(&prep, protocol, hyper, cfg, opts)
}

pub fn run_protocol_prepared(
    prep: &PreparedDataset<'_>,
    protocol: Protocol,
    hyper: &ModelHyperParams,
    cfg: &TrainConfig,
    opts: &ProtocolOptions,
) -> Result<ProtocolReport> {
    let runs = run_all(prep, protocol, hyper, cfg, opts, false)?;
    Ok(ProtocolReport::new(
        protocol,
        runs.into_iter().map(|r| r.result).collect(),
    ))
}

/// Both leave-one-subject-out tables from one pre-training per fold.
///
/// Training data and fold seeds coincide between the two protocols, so the
/// cross-subject table equals a separate [`run_protocol`] call.
pub fn run_cross_subject_pair(
    prep: &PreparedDataset<'_>,
    hyper: &ModelHyperParams,
    cfg: &TrainConfig,
    opts: &ProtocolOptions,
) -> Result<(ProtocolReport, ProtocolReport)> {
    let runs = run_all(prep, Protocol::CrossSubjectFinetune, hyper, cfg, opts, true)?;
    let (cs, ft): (Vec<_>, Vec<_>) = runs
        .into_iter()
        .map(|r| (r.pretrained.expect("requested"), r.result))
        .unzip();
    Ok((
        ProtocolReport::new(Protocol::CrossSubject, cs),
        ProtocolReport::new(Protocol::CrossSubjectFinetune, ft),
    ))
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl ProtocolReport {
    pub fn new(protocol: Protocol, folds: Vec<FoldResult>) -> Self {
        let stat = |f: fn(&Metrics) -> f64| mean_std(&folds.iter().map(|r| f(&r.metrics)).collect::<Vec<_>>());
        let (acc, kappa, f1) = (stat(|m| m.acc), stat(|m| m.kappa), stat(|m| m.f1));
        Self {
            protocol,
            mean: Metrics {
                acc: acc.0,
                kappa: kappa.0,
                f1: f1.0,
            },
            std: Metrics {
                acc: acc.1,
                kappa: kappa.1,
                f1: f1.1,
            },
            folds,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("fold,subject,acc,kappa,f1\n");
        for r in &self.folds {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                r.fold, r.subject, r.metrics.acc, r.metrics.kappa, r.metrics.f1
            ));
        }
        s.push_str(&format!(
            "AVG±STD,,{}±{},{}±{},{}±{}\n",
            self.mean.acc, self.std.acc, self.mean.kappa, self.std.kappa, self.mean.f1, self.std.f1
        ));
        s
    }

    /// The report with `config` embedded.
    pub fn to_json(&self, config: &serde_json::Value) -> serde_json::Value {
        serde_json::json!({
            "protocol": self.protocol,
            "folds": self.folds,
            "mean": self.mean,
            "std": self.std,
            "config": config,
        })
    }

    /// Write `results.csv` and `results.json` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>, config: &serde_json::Value) -> Result<()> {
        let dir = dir.as_ref();
        let io = |path: &Path| {
            let path = path.display().to_string();
            move |source| EvalError::Io { path, source }
        };
        std::fs::create_dir_all(dir).map_err(io(dir))?;
        let csv = dir.join("results.csv");
        std::fs::write(&csv, self.to_csv()).map_err(io(&csv))?;
        let json = dir.join("results.json");
        let text = serde_json::to_string_pretty(&self.to_json(config)).expect("serializable report");
        std::fs::write(&json, text + "\n").map_err(io(&json))
    }
}
