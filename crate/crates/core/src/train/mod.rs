//! Objective, optimizer, schedule and the training driver.
//!
//! Each optimizer step records one tape per example (in parallel when
//! enabled), sums the per-example gradients in example order and adds the
//! penalty gradients analytically, so results do not depend on thread count.

mod loss;
mod optim;

pub use loss::{add_penalty_grads, combine, cross_entropy, mean_cross_entropy, total_loss, LossParts, RegCoeffs};
pub use optim::{adamw_step, cosine_lr, AdamState, AdamWConfig};

use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor};
use crate::dataio::Dataset;
use crate::graphs::{self, GraphError, PlvBand};
use crate::model::{self, DropoutMasks, Model, ModelError, ModelHyperParams, ParamRole, TrialInput};
use crate::par::{self, Exec};
use crate::rng;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("empty split: {0}")]
    EmptySplit(String),
    #[error("label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },
    #[error("non-finite loss at step {step} (lr {lr:e}, grad norm {grad_norm:e})")]
    NonFinite { step: usize, lr: f64, grad_norm: f64 },
    #[error("hyperparameter mismatch: {0}")]
    HyperMismatch(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Switches mirroring the ablation table. Branch subsets and gated fusion
/// live on [`ModelHyperParams`] because they change the parameter layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    /// channel prior from an index-kNN graph instead of PLV
    pub no_plv: bool,
    /// channel-graph increments frozen at zero
    pub fixed_spatial_adjacency: bool,
    /// all penalties and weight decay off
    pub no_l1l2: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub lambda_s: f64,
    pub lambda_t: f64,
    pub beta: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// decoupled AdamW decay; the L2 penalty already sits in the loss
    pub weight_decay: f64,
    pub dropout: f64,
    pub seed: u64,
    /// held-out share of the training split used to pick the best checkpoint
    pub val_fraction: f64,
    /// validate every this many epochs (and after the last)
    pub val_every: usize,
    pub plv_top_k: usize,
    pub plv_band: PlvBand,
    pub ablation: Ablation,
    pub finetune_epochs: usize,
    pub finetune_lr_max: f64,
    #[serde(skip)]
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1000,
            batch_size: 32,
            lr_max: 2e-3,
            lr_min: 1e-6,
            lambda_s: 1e-4,
            lambda_t: 1e-4,
            beta: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            dropout: 0.2,
            seed: 0,
            val_fraction: 0.1,
            val_every: 1,
            plv_top_k: 6,
            plv_band: PlvBand::default(),
            ablation: Ablation::default(),
            finetune_epochs: 100,
            finetune_lr_max: 5e-4,
            exec: Exec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if [self.lambda_s, self.lambda_t, self.beta, self.weight_decay]
            .iter()
            .any(|v| !(*v >= 0.0))
        {
            return bad("penalty coefficients must be >= 0");
        }
        if !(self.lr_max > 0.0 && self.lr_min >= 0.0 && self.lr_min <= self.lr_max) {
            return bad("need 0 <= lr_min <= lr_max, lr_max > 0");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction must lie in [0, 1)");
        }
        if self.val_every == 0 {
            return bad("val_every must be >= 1");
        }
        if self.plv_top_k == 0 {
            return bad("plv_top_k must be >= 1");
        }
        Ok(())
    }

    /// Penalty coefficients after the `no_l1l2` switch.
    pub fn reg(&self) -> RegCoeffs {
        if self.ablation.no_l1l2 {
            RegCoeffs::ZERO
        } else {
            RegCoeffs {
                lambda_s: self.lambda_s,
                lambda_t: self.lambda_t,
                beta: self.beta,
            }
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: if self.ablation.no_l1l2 { 0.0 } else { self.weight_decay },
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub ce: f64,
    pub l1_s: f64,
    pub l1_t: f64,
    pub l2: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_acc_a: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_acc_b: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_acc_c: Option<f64>,
}

/// Final and best-validation models plus the log.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub best: Model,
    pub best_epoch: usize,
    pub best_val_acc: Option<f64>,
    pub history: Vec<HistoryRecord>,
}

/// Called after every optimizer step with the updated model.
pub type Observer<'a> = &'a mut dyn FnMut(&Model, &HistoryRecord);

/// Unnormalized channel-graph base: sparsified PLV, or an index-kNN graph
/// under the `no_plv` ablation.
pub fn channel_base(plv: Option<&Tensor>, n_channels: usize, cfg: &TrainConfig) -> Result<Tensor> {
    let k = cfg.plv_top_k.min(n_channels.saturating_sub(1)).max(1);
    if cfg.ablation.no_plv {
        return Ok(graphs::index_knn_graph(n_channels, k)?);
    }
    let plv = plv.ok_or(GraphError::NoTrials)?;
    Ok(graphs::sparsify_symmetrize(plv, k)?)
}

/// Fresh model whose channel prior comes from the given training trials.
pub fn init_model(train: &Dataset, hyper: &ModelHyperParams, cfg: &TrainConfig) -> Result<Model> {
    if train.is_empty() {
        return Err(TrainError::EmptySplit("training split has no trials".into()));
    }
    let plv = if cfg.ablation.no_plv {
        None
    } else {
        Some(graphs::plv_matrix(&train.trials, cfg.plv_band, cfg.exec)?)
    };
    init_model_from_plv(plv.as_ref(), hyper, cfg)
}

/// [`init_model`] from an already averaged PLV matrix.
pub fn init_model_from_plv(plv: Option<&Tensor>, hyper: &ModelHyperParams, cfg: &TrainConfig) -> Result<Model> {
    let base = channel_base(plv, hyper.n_channels, cfg)?;
    let seed = rng::derive_seed(cfg.seed, "model", &[]);
    Ok(Model::new(hyper.clone(), base, seed)?)
}

/// Prepare inputs, build the prior and train on one split.
pub fn train(
    train: &Dataset,
    hyper: &ModelHyperParams,
    cfg: &TrainConfig,
    observer: Option<Observer<'_>>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model = init_model(train, hyper, cfg)?;
    let inputs = model::prepare_dataset(train, hyper, cfg.exec)?;
    let refs: Vec<&TrialInput> = inputs.iter().collect();
    train_model(model, &refs, cfg, observer)
}

/// Stratified hold-out: `round(frac · n_k)` examples of every class.
fn split_validation(labels: &[usize], frac: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    if frac <= 0.0 {
        return ((0..labels.len()).collect(), Vec::new());
    }
    let k = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut val = Vec::new();
    for class in 0..k {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        let take = (frac * idx.len() as f64).round() as usize;
        if take == 0 || take >= idx.len() {
            continue;
        }
        idx.shuffle(&mut rng::stream(seed, "validation", &[class as u64]));
        val.extend_from_slice(&idx[..take]);
    }
    val.sort_unstable();
    let fit = (0..labels.len()).filter(|i| val.binary_search(i).is_err()).collect();
    (fit, val)
}

fn trainable_mask(model: &Model, cfg: &TrainConfig) -> Vec<bool> {
    model
        .params
        .roles
        .iter()
        .map(|r| !(cfg.ablation.fixed_spatial_adjacency && *r == ParamRole::CcgDelta))
        .collect()
}

struct ExampleGrad {
    grads: Vec<Vec<f64>>,
    ce: f64,
}

fn example_grad(
    model: &Model,
    trainable: &[bool],
    input: &TrialInput,
    drop: Option<DropoutMasks>,
) -> Result<ExampleGrad> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, Some(trainable));
    let out = model.forward(&mut tape, &vars, input, drop.as_ref())?;
    let ce = cross_entropy(&mut tape, out.fused, input.label)?;
    let mut g = tape.backward(ce)?;
    let grads = vars
        .iter()
        .zip(trainable)
        .map(|(&v, &t)| if t { g.take(v) } else { Vec::new() })
        .collect();
    Ok(ExampleGrad {
        grads,
        ce: tape.value(ce).data[0],
    })
}

/// Summed gradient of the mean batch cross-entropy, and that mean.
fn batch_grads(
    model: &Model,
    trainable: &[bool],
    batch: &[(usize, &TrialInput)],
    drop_seed: u64,
    step: usize,
    p: f64,
    exec: Exec,
) -> Result<(Vec<Vec<f64>>, f64)> {
    let per: Vec<Result<ExampleGrad>> = par::map_slice(exec, batch, |&(id, input)| {
        let drop = (p > 0.0).then_some(DropoutMasks {
            seed: drop_seed,
            step: step as u64,
            example: id as u64,
            p,
        });
        example_grad(model, trainable, input, drop)
    });
    let n = batch.len() as f64;
    let mut sum: Vec<Vec<f64>> = model.params.tensors.iter().map(|t| vec![0.0; t.numel()]).collect();
    let mut ce = 0.0;
    for r in per {
        let e = r?;
        ce += e.ce;
        for (acc, g) in sum.iter_mut().zip(&e.grads) {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
    }
    for g in &mut sum {
        g.iter_mut().for_each(|v| *v /= n);
    }
    Ok((sum, ce / n))
}

/// Accuracy in percent of fused predictions, plus per-branch accuracies.
pub fn accuracy(model: &Model, inputs: &[&TrialInput], exec: Exec) -> Result<(f64, [Option<f64>; 3])> {
    let per: Vec<std::result::Result<_, ModelError>> = par::map_slice(exec, inputs, |x| {
        let (br, fused) = model.logits(x)?;
        Ok((model.decide(&br, &fused), br))
    });
    let n = inputs.len().max(1) as f64;
    let mut fused = 0usize;
    let mut hits = [0usize; 3];
    for (r, x) in per.into_iter().zip(inputs) {
        let (pred, br) = r?;
        fused += usize::from(pred == x.label);
        for (h, z) in hits.iter_mut().zip([&br.z_a, &br.z_b, &br.z_c]) {
            if let Some(z) = z {
                *h += usize::from(argmax(z) == x.label);
            }
        }
    }
    let h = &model.hyper.branches;
    let pct = |c: usize| 100.0 * c as f64 / n;
    Ok((
        pct(fused),
        [
            h.a.then(|| pct(hits[0])),
            h.b.then(|| pct(hits[1])),
            h.c.then(|| pct(hits[2])),
        ],
    ))
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

/// Core loop shared by training and fine-tuning.
fn run(
    mut model: Model,
    data: &[&TrialInput],
    cfg: &TrainConfig,
    epochs: usize,
    lr_max: f64,
    purpose: &str,
    mut observer: Option<Observer<'_>>,
) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(TrainError::EmptySplit("no training examples".into()));
    }
    let k = model.hyper.n_classes;
    if let Some(bad) = data.iter().find(|x| x.label >= k) {
        return Err(TrainError::LabelOutOfRange {
            label: bad.label,
            n_classes: k,
        });
    }
    let seed = rng::derive_seed(cfg.seed, purpose, &[]);
    let labels: Vec<usize> = data.iter().map(|x| x.label).collect();
    let (fit, val) = split_validation(&labels, cfg.val_fraction, seed);
    let val_inputs: Vec<&TrialInput> = val.iter().map(|&i| data[i]).collect();

    let reg = cfg.reg();
    let adam = cfg.adamw();
    let trainable = trainable_mask(&model, cfg);
    let mut states: Vec<AdamState> = model
        .params
        .tensors
        .iter()
        .map(|t| AdamState::zeros(t.numel()))
        .collect();

    let per_epoch = fit.len().div_ceil(cfg.batch_size);
    let total = epochs * per_epoch;
    let t_max = total.saturating_sub(1);
    let mut history = Vec::with_capacity(total);
    let mut best = model.clone();
    let mut best_val: Option<f64> = None;
    let mut best_epoch = 0;
    let mut order = fit.clone();
    let mut step = 0;

    for epoch in 0..epochs {
        order.copy_from_slice(&fit);
        order.shuffle(&mut rng::stream(seed, "shuffle", &[epoch as u64]));
        for chunk in order.chunks(cfg.batch_size) {
            let lr = cosine_lr(step, t_max, lr_max, cfg.lr_min);
            let batch: Vec<(usize, &TrialInput)> = chunk.iter().map(|&i| (i, data[i])).collect();
            let (mut grads, ce) = batch_grads(&model, &trainable, &batch, seed, step, cfg.dropout, cfg.exec)?;
            let parts = combine(ce, &model.params, &reg);
            add_penalty_grads(&model.params, &reg, &mut grads);
            let grad_norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
            if !parts.loss.is_finite() || !grad_norm.is_finite() {
                return Err(TrainError::NonFinite { step, lr, grad_norm });
            }
            for (i, (t, g)) in model.params.tensors.iter_mut().zip(&grads).enumerate() {
                if trainable[i] {
                    adamw_step(&mut t.data, g, &mut states[i], lr, &adam);
                }
            }
            let rec = HistoryRecord {
                step,
                epoch,
                lr,
                loss: parts.loss,
                ce: parts.ce,
                l1_s: parts.l1_s,
                l1_t: parts.l1_t,
                l2: parts.l2,
                val_acc: None,
                val_acc_a: None,
                val_acc_b: None,
                val_acc_c: None,
            };
            if let Some(obs) = observer.as_mut() {
                obs(&model, &rec);
            }
            history.push(rec);
            step += 1;
        }
        let last = epoch + 1 == epochs;
        if !val_inputs.is_empty() && ((epoch + 1) % cfg.val_every == 0 || last) {
            let (acc, br) = accuracy(&model, &val_inputs, cfg.exec)?;
            if let Some(rec) = history.last_mut() {
                rec.val_acc = Some(acc);
                [rec.val_acc_a, rec.val_acc_b, rec.val_acc_c] = br;
            }
            if best_val.is_none_or(|b| acc > b) {
                best_val = Some(acc);
                best = model.clone();
                best_epoch = epoch;
            }
        }
    }
    if best_val.is_none() {
        best = model.clone();
        best_epoch = epochs.saturating_sub(1);
    }
    Ok(TrainOutcome {
        model,
        best,
        best_epoch,
        best_val_acc: best_val,
        history,
    })
}

/// Train an initialized model on prepared inputs.
pub fn train_model(
    model: Model,
    data: &[&TrialInput],
    cfg: &TrainConfig,
    observer: Option<Observer<'_>>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    run(model, data, cfg, cfg.epochs, cfg.lr_max, "train", observer)
}

/// Continue from `model` on the adaptation split with fresh optimizer state
/// and a new cosine cycle of `finetune_epochs` epochs.
pub fn finetune(model: &Model, adapt: &[&TrialInput], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.finetune_epochs == 0 {
        return Ok(TrainOutcome {
            model: model.clone(),
            best: model.clone(),
            best_epoch: 0,
            best_val_acc: None,
            history: Vec::new(),
        });
    }
    run(
        model.clone(),
        adapt,
        cfg,
        cfg.finetune_epochs,
        cfg.finetune_lr_max,
        "finetune",
        None,
    )
}

/// Check that a checkpoint can be fine-tuned under `hyper`.
pub fn check_compatible(model: &Model, hyper: &ModelHyperParams) -> Result<()> {
    if &model.hyper != hyper {
        return Err(TrainError::HyperMismatch(format!(
            "checkpoint {:?} vs requested {:?}",
            model.hyper, hyper
        )));
    }
    Ok(())
}

/// Write the history as JSON lines.
pub fn write_history(path: impl AsRef<Path>, history: &[HistoryRecord]) -> Result<()> {
    let path = path.as_ref();
    let io = |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    for rec in history {
        let line = serde_json::to_string(rec).expect("serializable record");
        writeln!(f, "{line}").map_err(io)?;
    }
    f.flush().map_err(io)
}
