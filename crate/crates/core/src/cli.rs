//! The `stgmfm` command line.
//!
//! Every subcommand resolves a [`RunConfig`] (defaults, then `--config`, then
//! flags), validates it before doing any work and writes it to
//! `config.json` in its output directory. Failures print one line,
//! `error[<kind>]: <message>`, on stderr and exit nonzero.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use crate::autodiff::suite::vjp_suite;
use crate::config::{self, ConfigError, RunConfig};
use crate::dataio::{load_dataset, save_dataset, split_protocol, synth_generate, Dataset, Protocol};
use crate::eval::{self, EvalOptions, ProtocolOptions};
use crate::graphs;
use crate::model::{self, gradcheck::model_gradcheck, load_checkpoint, save_checkpoint, Model};
use crate::par::Exec;
use crate::train;

#[derive(Debug, Parser)]
#[command(name = "stgmfm", version, about = "Tri-branch graph + frequency-mixer EEG decoder")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset into --out
    Synth(Common),
    /// Train on one protocol fold, evaluate on its test partition
    Train(Common),
    /// Run every fold of --protocol and write the results table
    Protocol(Common),
    /// Adapt --checkpoint on the held-out subject's first session of --fold
    Finetune(Common),
    /// Evaluate --checkpoint on --data (or on the test partition of --fold)
    Eval(Common),
    /// Write prior and learned adjacency matrices as CSV
    GraphDump(Common),
    /// Finite-difference check of the tiny model and of every primitive
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// flat dotted-key JSON config
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<String>,
    /// cross-session, cross-subject or cross-subject-ft
    #[arg(long)]
    protocol: Option<String>,
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    fold: Option<usize>,
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    checkpoint: Option<String>,
    /// channel prior from an index kNN graph instead of PLV
    #[arg(long)]
    no_plv: bool,
    /// freeze the channel-graph increments at zero
    #[arg(long)]
    fixed_adjacency: bool,
    /// drop the L1 and L2 penalties
    #[arg(long)]
    no_reg: bool,
    /// active branches, e.g. A,B
    #[arg(long)]
    branches: Option<String>,
    #[arg(long)]
    gated_fusion: bool,
    /// per-trial majority over branch decisions
    #[arg(long)]
    majority_vote: bool,
    /// any config key, e.g. --set train.epochs=20 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// randomized primitive cases
    #[arg(long, default_value_t = 100)]
    cases: usize,
}

#[derive(Debug)]
struct CliError {
    kind: &'static str,
    message: String,
    code: i32,
}

impl CliError {
    fn new(kind: &'static str, message: impl std::fmt::Display) -> Self {
        Self {
            kind,
            message: message.to_string(),
            code: 1,
        }
    }
}

macro_rules! kind_from {
    ($($t:ty => $k:literal),* $(,)?) => {
        $(impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::new($k, e)
            }
        })*
    };
}

kind_from! {
    ConfigError => "config",
    crate::dataio::DataError => "data",
    crate::train::TrainError => "train",
    crate::eval::EvalError => "eval",
    crate::model::ModelError => "model",
    crate::model::CheckpointError => "checkpoint",
    crate::graphs::GraphError => "graph",
    crate::autodiff::AutodiffError => "autodiff",
}

type Result<T> = std::result::Result<T, CliError>;

/// Parse `argv` (program name first), run the subcommand and return the
/// process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let first = e
                .to_string()
                .lines()
                .next()
                .unwrap_or("")
                .trim_start_matches("error: ")
                .to_string();
            return report(&CliError {
                kind: "usage",
                message: first,
                code: 2,
            });
        }
    };
    let result = match cli.cmd {
        Cmd::Synth(c) => synth(&c),
        Cmd::Train(c) => train_cmd(&c),
        Cmd::Protocol(c) => protocol(&c),
        Cmd::Finetune(c) => finetune(&c),
        Cmd::Eval(c) => eval_cmd(&c),
        Cmd::GraphDump(c) => graph_dump(&c),
        Cmd::Gradcheck(g) => gradcheck(&g),
    };
    match result {
        Ok(()) => 0,
        Err(e) => report(&e),
    }
}

fn report(e: &CliError) -> i32 {
    let msg = e.message.split_whitespace().collect::<Vec<_>>().join(" ");
    eprintln!("error[{}]: {}", e.kind, msg);
    e.code
}

fn flag_overrides(c: &Common) -> Result<BTreeMap<String, Value>> {
    let mut o = BTreeMap::new();
    for s in &c.set {
        let (k, v) = config::parse_assignment(s)?;
        o.insert(k, v);
    }
    if let Some(s) = c.seed {
        o.insert("seed".into(), json!(s));
    }
    if let Some(p) = &c.protocol {
        let p = Protocol::parse(p).ok_or_else(|| CliError::new("config", format!("unknown protocol `{p}`")))?;
        o.insert("protocol".into(), json!(p.name()));
    }
    if let Some(j) = c.jobs {
        o.insert("jobs".into(), json!(j));
    }
    if let Some(f) = c.fold {
        o.insert("fold".into(), json!(f));
    }
    for (key, v) in [
        ("paths.data", &c.data),
        ("paths.out", &c.out),
        ("paths.checkpoint", &c.checkpoint),
    ] {
        if let Some(v) = v {
            o.insert(key.into(), json!(v));
        }
    }
    for (key, on) in [
        ("train.ablation.no_plv", c.no_plv),
        ("train.ablation.fixed_spatial_adjacency", c.fixed_adjacency),
        ("train.ablation.no_l1l2", c.no_reg),
        ("model.gated_fusion", c.gated_fusion),
        ("majority_vote", c.majority_vote),
    ] {
        if on {
            o.insert(key.into(), json!(true));
        }
    }
    if let Some(b) = &c.branches {
        let set =
            model::BranchSet::parse(b).ok_or_else(|| CliError::new("config", format!("invalid branch list `{b}`")))?;
        o.insert("model.branches.a".into(), json!(set.a));
        o.insert("model.branches.b".into(), json!(set.b));
        o.insert("model.branches.c".into(), json!(set.c));
    }
    Ok(o)
}

/// Defaults (optionally with a checkpoint's architecture), then the config
/// file, then flags.
fn resolve(c: &Common, model_from: Option<&Model>) -> Result<RunConfig> {
    let mut base = RunConfig::default();
    if let Some(m) = model_from {
        base.model = m.hyper.clone();
        base.synth.n_channels = m.hyper.n_channels;
        base.synth.n_samples = m.hyper.n_samples;
        base.synth.n_classes = m.hyper.n_classes;
        base.synth.sample_rate_hz = m.hyper.sample_rate_hz;
    }
    let mut overrides = match &c.config {
        Some(path) => {
            let text =
                std::fs::read_to_string(path).map_err(|e| CliError::new("io", format!("{}: {e}", path.display())))?;
            let v: Value = serde_json::from_str(&text).map_err(|e| CliError::new("config", e))?;
            let obj = v
                .as_object()
                .ok_or_else(|| CliError::new("config", "config must be a JSON object"))?;
            obj.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
        }
        None => BTreeMap::new(),
    };
    overrides.extend(flag_overrides(c)?);
    let mut cfg = base.merged(&overrides)?;
    cfg.train.exec = Exec::Sequential;
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let out = cfg
        .paths
        .out
        .as_ref()
        .ok_or_else(|| CliError::new("config", "--out is required"))?;
    let dir = PathBuf::from(out);
    std::fs::create_dir_all(&dir).map_err(|e| CliError::new("io", format!("{}: {e}", dir.display())))?;
    Ok(dir)
}

/// The resolved config as echoed into output directories; the output path
/// itself is left out so the same run lands byte-identical anywhere.
fn echoed(cfg: &RunConfig) -> RunConfig {
    let mut c = cfg.clone();
    c.paths.out = None;
    c
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| CliError::new("io", format!("{}: {e}", path.display())))
}

fn write_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    write_file(&dir.join("config.json"), &echoed(cfg).to_json())
}

fn config_value(cfg: &RunConfig) -> Value {
    serde_json::to_value(echoed(cfg).to_flat()).expect("serializable config")
}

fn dataset(cfg: &RunConfig) -> Result<Dataset> {
    let ds = match &cfg.paths.data {
        Some(dir) => load_dataset(dir)?,
        None => synth_generate(&cfg.synth)?,
    };
    let m = &cfg.model;
    if ds.info.num_channels != m.n_channels || ds.info.num_samples != m.n_samples || ds.info.num_classes != m.n_classes
    {
        return Err(CliError::new(
            "data",
            format!(
                "dataset is {}x{} with {} classes, model expects {}x{} with {}",
                ds.info.num_channels, ds.info.num_samples, ds.info.num_classes, m.n_channels, m.n_samples, m.n_classes
            ),
        ));
    }
    Ok(ds)
}

fn checkpoint(c: &Common) -> Result<Option<Model>> {
    match &c.checkpoint {
        Some(dir) => Ok(Some(load_checkpoint(dir)?.0)),
        None => Ok(None),
    }
}

fn require_checkpoint(c: &Common) -> Result<Model> {
    checkpoint(c)?.ok_or_else(|| CliError::new("config", "--checkpoint is required"))
}

fn stdout_line(s: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{s}");
}

fn metrics_json(ev: &eval::Evaluation, extra: Value) -> Value {
    let mut v = json!({"metrics": ev.metrics, "confusion": ev.confusion.counts});
    if let (Some(o), Value::Object(e)) = (v.as_object_mut(), extra) {
        o.extend(e);
    }
    v
}

fn synth(c: &Common) -> Result<()> {
    let cfg = resolve(c, None)?;
    let dir = out_dir(&cfg)?;
    let ds = synth_generate(&cfg.synth)?;
    save_dataset(&ds, &dir)?;
    write_config(&dir, &cfg)?;
    stdout_line(&format!("wrote {} trials to {}", ds.len(), dir.display()));
    Ok(())
}

fn train_cmd(c: &Common) -> Result<()> {
    let cfg = resolve(c, None)?;
    let dir = out_dir(&cfg)?;
    let ds = dataset(&cfg)?;
    let split = split_protocol(&ds, cfg.protocol, cfg.fold)?;
    let out = train::train(&split.train, &cfg.model, &cfg.train, None)?;
    let opts = EvalOptions {
        majority_vote: cfg.majority_vote,
        exec: Exec::Sequential,
    };
    let ev = eval::evaluate(&out.best, &split.test, opts)?;
    save_checkpoint(&out.best, cfg.seed, dir.join("checkpoint"))?;
    train::write_history(dir.join("history.jsonl"), &out.history)?;
    let extra = json!({"fold": cfg.fold, "subject": split.subject, "best_epoch": out.best_epoch});
    let text = serde_json::to_string_pretty(&metrics_json(&ev, extra)).expect("json") + "\n";
    write_file(&dir.join("metrics.json"), &text)?;
    write_config(&dir, &cfg)?;
    stdout_line(&format!(
        "fold {} subject {}: acc {:.2} kappa {:.4} f1 {:.2}",
        cfg.fold, split.subject, ev.metrics.acc, ev.metrics.kappa, ev.metrics.f1
    ));
    Ok(())
}

fn protocol(c: &Common) -> Result<()> {
    let mut cfg = resolve(c, None)?;
    let dir = out_dir(&cfg)?;
    let ds = dataset(&cfg)?;
    if cfg.jobs != 1 {
        cfg.train.exec = Exec::Parallel;
    }
    let opts = ProtocolOptions {
        jobs: cfg.jobs,
        majority_vote: cfg.majority_vote,
    };
    let report = eval::run_protocol(&ds, cfg.protocol, &cfg.model, &cfg.train, &opts)?;
    report.write(&dir, &config_value(&cfg))?;
    write_config(&dir, &cfg)?;
    print!("{}", report.to_csv());
    Ok(())
}

fn finetune(c: &Common) -> Result<()> {
    let model = require_checkpoint(c)?;
    let cfg = resolve(c, Some(&model))?;
    train::check_compatible(&model, &cfg.model)?;
    let dir = out_dir(&cfg)?;
    let ds = dataset(&cfg)?;
    let split = split_protocol(&ds, Protocol::CrossSubjectFinetune, cfg.fold)?;
    let adapt = model::prepare_dataset(&split.adapt, &cfg.model, Exec::Sequential)?;
    let refs: Vec<_> = adapt.iter().collect();
    let out = train::finetune(&model, &refs, &cfg.train)?;
    let opts = EvalOptions {
        majority_vote: cfg.majority_vote,
        exec: Exec::Sequential,
    };
    let ev = eval::evaluate(&out.best, &split.test, opts)?;
    save_checkpoint(&out.best, cfg.seed, dir.join("checkpoint"))?;
    train::write_history(dir.join("history.jsonl"), &out.history)?;
    let extra = json!({"fold": cfg.fold, "subject": split.subject});
    let text = serde_json::to_string_pretty(&metrics_json(&ev, extra)).expect("json") + "\n";
    write_file(&dir.join("metrics.json"), &text)?;
    write_config(&dir, &cfg)?;
    stdout_line(&format!(
        "fold {} subject {}: acc {:.2} kappa {:.4} f1 {:.2}",
        cfg.fold, split.subject, ev.metrics.acc, ev.metrics.kappa, ev.metrics.f1
    ));
    Ok(())
}

fn eval_cmd(c: &Common) -> Result<()> {
    let model = require_checkpoint(c)?;
    let cfg = resolve(c, Some(&model))?;
    let ds = dataset(&cfg)?;
    let (test, extra) = match c.fold {
        Some(fold) => {
            let split = split_protocol(&ds, cfg.protocol, fold)?;
            (split.test, json!({"fold": fold, "subject": split.subject}))
        }
        None => (ds, json!({})),
    };
    let opts = EvalOptions {
        majority_vote: cfg.majority_vote,
        exec: Exec::Sequential,
    };
    let ev = eval::evaluate(&model, &test, opts)?;
    let v = metrics_json(&ev, extra);
    if let Some(out) = &cfg.paths.out {
        let dir = PathBuf::from(out);
        std::fs::create_dir_all(&dir).map_err(|e| CliError::new("io", format!("{}: {e}", dir.display())))?;
        write_file(
            &dir.join("metrics.json"),
            &(serde_json::to_string_pretty(&v).expect("json") + "\n"),
        )?;
        write_config(&dir, &cfg)?;
    }
    stdout_line(&serde_json::to_string(&v).expect("json"));
    Ok(())
}

fn graph_dump(c: &Common) -> Result<()> {
    let loaded = checkpoint(c)?;
    let cfg = resolve(c, loaded.as_ref())?;
    let dir = out_dir(&cfg)?;
    let model = match loaded {
        Some(m) => m,
        None => train::init_model(&dataset(&cfg)?, &cfg.model, &cfg.train)?,
    };
    let mut names = Vec::new();
    for (label, learned) in model.effective_adjacencies() {
        let base = if label.ends_with("ccg") {
            &model.ccg_base
        } else {
            &model.tsg_base
        };
        let prior = graphs::degree_normalize(base);
        for (suffix, m) in [("prior", &prior), ("learned", &learned)] {
            let name = format!("{label}.{suffix}.csv");
            write_file(&dir.join(&name), &graphs::to_csv(&format!("{label}.{suffix}"), m))?;
            names.push(name);
        }
    }
    write_config(&dir, &cfg)?;
    stdout_line(&names.join(" "));
    Ok(())
}

fn gradcheck(g: &GradcheckArgs) -> Result<()> {
    let model = model_gradcheck(g.seed)?;
    let suite = vjp_suite(g.seed, g.cases)?;
    let worst = suite.worst().map_or("none", |c| c.primitive);
    stdout_line(&format!(
        "model max_rel_error={:.3e} max_rel_error_above_floor={:.3e} max_abs_error={:.3e} coords={}",
        model.max_rel_error, model.max_rel_error_above_floor, model.max_abs_error, model.n_coords
    ));
    stdout_line(&format!(
        "primitives cases={} max_rel_error={:.3e} worst={}",
        suite.cases.len(),
        suite.max_rel_error(),
        worst
    ));
    if !model.passes(1e-4) {
        return Err(CliError::new(
            "gradcheck",
            format!("model relative error {:.3e} >= 1e-4", model.max_rel_error_above_floor),
        ));
    }
    if !(suite.max_rel_error() < 1e-6) {
        return Err(CliError::new(
            "gradcheck",
            format!("primitive {worst} relative error {:.3e} >= 1e-6", suite.max_rel_error()),
        ));
    }
    Ok(())
}
