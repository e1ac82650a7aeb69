//! Command-line front end: simulate → train → evaluate → explain → report.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::eval::{self, OpenSetEval, Ranker};
use crate::explain;
use crate::head::GateKind;
use crate::leaksim::{build_dataset, Dataset, GenConfig};
use crate::metrics::DEFAULT_OVL_BINS;
use crate::model::{HeadConfig, ModelConfig};
use crate::report::{self, Provenance};
use crate::scoring::{AttentionMode, Bandwidth};
use crate::training::{Checkpoint, TrainConfig, Trainer};

pub const CHECKPOINT_FILE: &str = "checkpoint.plck";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
/// Per-epoch wall times; kept apart from the deterministic training log.
pub const TIMING_FILE: &str = "timing.jsonl";

#[derive(Debug, Parser)]
#[command(name = "leakproto", version, about = "Signal-leak source attribution for diffusion latents")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic leak dataset.
    Simulate(SimulateArgs),
    /// Train an attribution model.
    Train(TrainArgs),
    /// Closed-set per-class AUC on the test split.
    EvalClosed(EvalClosedArgs),
    /// Open-set AUROC / EER / OVL per attention mode.
    EvalOpenset(EvalOpensetArgs),
    /// Per-sample interpretability dump.
    Explain(ExplainArgs),
    /// Aggregate tables and SVG plots.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Off,
    On,
    Asymmetric,
}

impl From<ModeArg> for AttentionMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Off => AttentionMode::Off,
            ModeArg::On => AttentionMode::On,
            ModeArg::Asymmetric => AttentionMode::AsymmetricClosedOnly,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RankerArg {
    Maha,
    Posterior,
}

impl From<RankerArg> for Ranker {
    fn from(r: RankerArg) -> Self {
        match r {
            RankerArg::Maha => Ranker::Maha,
            RankerArg::Posterior => Ranker::Posterior,
        }
    }
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Generator config (JSON); flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, allow_negative_numbers = true)]
    pub strength: Option<f64>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long = "open-classes", visible_alias = "open")]
    pub open_classes: Option<usize>,
    #[arg(long = "per-class")]
    pub per_class: Option<usize>,
    /// Samples per open (and real) class.
    #[arg(long = "open-per-class")]
    pub open_per_class: Option<usize>,
    /// Omit the leak-free real class.
    #[arg(long = "no-real")]
    pub no_real: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON with optional "model" and "train" sections; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Continue from a checkpoint with its stored configuration.
    #[arg(long, conflicts_with_all = ["config", "seed", "epochs", "batch_size", "lr", "weight_decay", "prototypes", "linear_head", "gate", "gradient_check"])]
    pub resume: Option<PathBuf>,
    /// Training seed; also seeds parameter initialization.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long = "batch-size")]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long = "weight-decay")]
    pub weight_decay: Option<f64>,
    /// Prototypes per class.
    #[arg(long)]
    pub prototypes: Option<usize>,
    /// Replace the prototype head by a plain linear classifier.
    #[arg(long = "linear-head", conflicts_with_all = ["prototypes", "gate"])]
    pub linear_head: bool,
    #[arg(long, value_enum)]
    pub gate: Option<GateArg>,
    /// Finite-difference audit of the first batch each epoch.
    #[arg(long = "gradient-check")]
    pub gradient_check: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GateArg {
    Linear,
    Mlp,
}

#[derive(Debug, Args)]
pub struct EvalClosedArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "maha")]
    pub ranker: RankerArg,
    #[arg(long, default_value_t = 0, value_parser = clap::value_parser!(u8).range(0..=3))]
    pub perturb: u8,
}

#[derive(Debug, Args)]
pub struct EvalOpensetArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Single attention mode; all three when omitted.
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long, default_value_t = DEFAULT_OVL_BINS)]
    pub bins: usize,
    /// Fixed KDE bandwidth; Scott's rule when omitted.
    #[arg(long)]
    pub bandwidth: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Sample ids to explain; defaults to the first `--limit` test samples.
    #[arg(long = "sample")]
    pub samples: Vec<String>,
    #[arg(long, default_value_t = 20)]
    pub limit: usize,
    #[arg(long = "top-k", default_value_t = 8)]
    pub top_k: usize,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "maha")]
    pub ranker: RankerArg,
    #[arg(long, default_value_t = DEFAULT_OVL_BINS)]
    pub bins: usize,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainFile {
    model: Option<serde_json::Value>,
    train: Option<TrainConfig>,
}

fn read_config<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn require_dir(path: &Path) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Error::Data(format!("dataset directory {} does not exist", path.display())))
    }
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Data(format!("{what} {} does not exist", path.display())))
    }
}

fn prepare_out(out: &Path) -> Result<()> {
    if out.exists() && !out.is_dir() {
        return Err(Error::Config(format!("output path {} is not a directory", out.display())));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))
}

fn load_inputs(dataset: &Path, checkpoint: &Path, out: &Path) -> Result<(Dataset, Checkpoint)> {
    require_dir(dataset)?;
    require_file(checkpoint, "checkpoint")?;
    prepare_out(out)?;
    let ds = Dataset::load(dataset)?;
    let ck = Checkpoint::load(checkpoint)?;
    if ck.model.num_classes() != ds.num_closed() {
        return Err(Error::Data(format!(
            "checkpoint has {} classes, dataset has {} closed classes",
            ck.model.num_classes(),
            ds.num_closed()
        )));
    }
    Ok((ds, ck))
}

pub fn cmd_simulate(a: &SimulateArgs) -> Result<()> {
    let mut cfg: GenConfig = match &a.config {
        Some(p) => read_config(p)?,
        None => GenConfig::default(),
    };
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.strength {
        cfg.bias_strength = v;
    }
    if let Some(v) = a.classes {
        cfg.closed_classes = v;
    }
    if let Some(v) = a.open_classes {
        cfg.open_classes = v;
    }
    if let Some(v) = a.per_class {
        cfg.per_class = v;
    }
    if let Some(v) = a.open_per_class {
        cfg.open_per_class = v;
    }
    if a.no_real {
        cfg.include_real = false;
    }
    cfg.validate()?;
    prepare_out(&a.out)?;
    let ds = build_dataset(&cfg, &a.out)?;
    eprintln!("wrote {} samples to {}", ds.records.len(), a.out.display());
    Ok(())
}

fn model_config(a: &TrainArgs, file: &TrainFile, num_classes: usize) -> Result<ModelConfig> {
    let mut cfg = match &file.model {
        Some(v) => {
            if let Some(n) = v.get("num_classes").and_then(|n| n.as_u64()) {
                if n as usize != num_classes {
                    return Err(Error::Config(format!("config num_classes {n} but the dataset has {num_classes} closed classes")));
                }
            }
            ModelConfig::deserialize(v).map_err(|e| Error::Config(format!("model config: {e}")))?
        }
        None => ModelConfig::new(num_classes),
    };
    cfg.num_classes = num_classes;
    if let Some(s) = a.seed {
        cfg.encoder.init_seed = s;
    }
    if a.linear_head {
        cfg.head = HeadConfig::Linear;
    }
    if a.prototypes.is_some() || a.gate.is_some() {
        let HeadConfig::Prototype {
            prototypes_per_class,
            gate,
            ..
        } = &mut cfg.head
        else {
            return Err(Error::Config("--prototypes/--gate need a prototype head".into()));
        };
        if let Some(m) = a.prototypes {
            *prototypes_per_class = m;
        }
        match a.gate {
            Some(GateArg::Linear) => *gate = GateKind::Linear,
            Some(GateArg::Mlp) if !matches!(gate, GateKind::Mlp { .. }) => *gate = GateKind::Mlp { hidden: cfg.encoder.embed_dim },
            Some(GateArg::Mlp) => {}
            None => {}
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Serialize)]
struct TimingRecord {
    epoch: usize,
    wall_ms: u128,
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    require_dir(&a.dataset)?;
    if let Some(r) = &a.resume {
        require_file(r, "checkpoint")?;
    }
    let file: TrainFile = match &a.config {
        Some(p) => read_config(p)?,
        None => TrainFile::default(),
    };
    prepare_out(&a.out)?;
    let ds = Dataset::load(&a.dataset)?;
    let mut trainer = match &a.resume {
        Some(path) => Trainer::resume(&ds, Checkpoint::load(path)?)?,
        None => {
            let mcfg = model_config(a, &file, ds.num_closed())?;
            let mut tcfg = file.train.clone().unwrap_or_default();
            if let Some(v) = a.seed {
                tcfg.seed = v;
            }
            if let Some(v) = a.epochs {
                tcfg.epochs = v;
            }
            if let Some(v) = a.batch_size {
                tcfg.batch_size = v;
            }
            if let Some(v) = a.lr {
                tcfg.learning_rate = v;
            }
            if let Some(v) = a.weight_decay {
                tcfg.weight_decay = v;
            }
            if a.gradient_check {
                tcfg.gradient_check_mode = true;
            }
            Trainer::new(&ds, mcfg, tcfg)?
        }
    };
    let ckpt_path = a.out.join(CHECKPOINT_FILE);
    let mut timing = String::new();
    trainer.run(|rec, wall| {
        eprintln!("epoch {:>3}  loss {:.5}  val macro AUC {:.4}  ({} ms)", rec.epoch, rec.loss, rec.val_macro_auc, wall.as_millis());
        timing.push_str(&serde_json::to_string(&TimingRecord { epoch: rec.epoch, wall_ms: wall.as_millis() }).expect("timing serializes"));
        timing.push('\n');
    })?;
    let ck = trainer.checkpoint();
    ck.save(&ckpt_path)?;
    let mut log = String::new();
    for rec in &ck.log {
        log.push_str(&serde_json::to_string(rec).expect("log serializes"));
        log.push('\n');
    }
    report::write_text(a.out.join(TRAIN_LOG_FILE), &log)?;
    report::write_text(a.out.join(TIMING_FILE), &timing)?;
    let prov = Provenance::new(&ds, Some(&ck));
    report::write_json(
        a.out.join("train_report.json"),
        &json!({
            "provenance": prov,
            "epochs": ck.log.len(),
            "best_epoch": ck.resume.best_epoch,
            "best_val_macro_auc": ck.resume.best_val_macro_auc,
            "model": ck.model.config,
            "train": ck.train_config,
            "parameters": ck.model.param_count(),
        }),
    )?;
    eprintln!(
        "best epoch {} (val macro AUC {:.4}); checkpoint at {}",
        ck.resume.best_epoch,
        ck.resume.best_val_macro_auc,
        ckpt_path.display()
    );
    Ok(())
}

pub fn cmd_eval_closed(a: &EvalClosedArgs) -> Result<()> {
    let (ds, ck) = load_inputs(&a.dataset, &a.checkpoint, &a.out)?;
    let ranker: Ranker = a.ranker.into();
    let ev = eval::eval_closed(&ck.model, &ds, ranker, a.perturb)?;
    let prov = Provenance::new(&ds, Some(&ck));
    let stem = format!("closed_{}_p{}", ranker.as_str(), a.perturb);
    report::write_json(a.out.join(format!("{stem}.json")), &json!({ "provenance": prov, "evaluation": ev }))?;
    report::write_text(a.out.join(format!("{stem}.csv")), &report::closed_csv(std::slice::from_ref(&ev))?)?;
    println!("macro AUC {:.4}  top-1 {:.4}  ({} samples)", ev.macro_auc, ev.top1, ev.samples);
    Ok(())
}

fn openset_all(ds: &Dataset, ck: &Checkpoint, modes: &[AttentionMode], bins: usize, bandwidth: Option<f64>) -> Result<Vec<OpenSetEval>> {
    let bw = match bandwidth {
        Some(b) => Bandwidth::Fixed(b),
        None => Bandwidth::Auto,
    };
    modes.iter().map(|&m| eval::eval_openset(&ck.model, ds, m, bins, bw)).collect()
}

pub fn cmd_eval_openset(a: &EvalOpensetArgs) -> Result<()> {
    let (ds, ck) = load_inputs(&a.dataset, &a.checkpoint, &a.out)?;
    let modes: Vec<AttentionMode> = match a.mode {
        Some(m) => vec![m.into()],
        None => AttentionMode::ALL.to_vec(),
    };
    let evals = openset_all(&ds, &ck, &modes, a.bins, a.bandwidth)?;
    let prov = Provenance::new(&ds, Some(&ck));
    for ev in &evals {
        let stem = format!("openset_{}", ev.mode.as_str());
        report::write_json(a.out.join(format!("{stem}.json")), &report::openset_json(ev, &prov))?;
        report::write_text(a.out.join(format!("{stem}_scores.csv")), &report::scores_csv(ev))?;
        println!("{:<10} AUROC {:.4}  EER {:.4}  OVL {:.4}", ev.mode.as_str(), ev.auroc, ev.eer, ev.ovl);
    }
    if a.mode.is_none() {
        report::write_text(a.out.join("openset.csv"), &report::openset_csv(&evals))?;
    }
    Ok(())
}

pub fn cmd_explain(a: &ExplainArgs) -> Result<()> {
    let (ds, ck) = load_inputs(&a.dataset, &a.checkpoint, &a.out)?;
    let recs = explain::pick_records(&ds, &a.samples, a.limit)?;
    let records = explain::explain(&ck.model, &ds, &recs, a.top_k)?;
    let prov = Provenance::new(&ds, Some(&ck));
    let mut text = serde_json::to_string(&json!({ "provenance": prov, "top_k": a.top_k })).expect("header serializes");
    text.push('\n');
    for r in &records {
        text.push_str(&serde_json::to_string(r).expect("explanation serializes"));
        text.push('\n');
    }
    report::write_text(a.out.join("explain.jsonl"), &text)?;
    println!("explained {} samples", records.len());
    Ok(())
}

pub fn cmd_report(a: &ReportArgs) -> Result<()> {
    let (ds, ck) = load_inputs(&a.dataset, &a.checkpoint, &a.out)?;
    let ranker: Ranker = a.ranker.into();
    let closed = (0..=crate::leaksim::MAX_LEVEL)
        .map(|level| eval::eval_closed(&ck.model, &ds, ranker, level))
        .collect::<Result<Vec<_>>>()?;
    let open = openset_all(&ds, &ck, &AttentionMode::ALL, a.bins, None)?;
    let steps = eval::per_step_auc(&ck.model, &ds, 0)?;
    let prov = Provenance::new(&ds, Some(&ck));

    report::write_text(a.out.join("closed_auc.csv"), &report::closed_csv(&closed)?)?;
    report::write_text(a.out.join("openset.csv"), &report::openset_csv(&open))?;
    report::write_text(a.out.join("per_step_auc.csv"), &report::per_step_csv(&steps))?;
    let open_json: Vec<_> = open.iter().map(|e| report::openset_json(e, &prov)).collect();
    report::write_json(
        a.out.join("report.json"),
        &json!({
            "provenance": prov,
            "closed": closed,
            "openset": open_json,
            "per_step": steps,
            "training": { "best_epoch": ck.resume.best_epoch, "best_val_macro_auc": ck.resume.best_val_macro_auc, "log": ck.log },
        }),
    )?;

    let plots = a.out.join("plots");
    for ev in &open {
        let c: Vec<f64> = ev.scores.iter().filter(|s| s.role == crate::leaksim::ClassRole::Closed).map(|s| s.score).collect();
        let o: Vec<f64> = ev.scores.iter().filter(|s| s.role != crate::leaksim::ClassRole::Closed).map(|s| s.score).collect();
        let title = format!("KDE log density, mode {} (AUROC {:.3}, OVL {:.3})", ev.mode.as_str(), ev.auroc, ev.ovl);
        report::write_text(plots.join(format!("scores_{}.svg", ev.mode.as_str())), &report::histogram_svg(&title, &c, &o, a.bins)?)?;
    }
    let labels: Vec<String> = steps.iter().map(report::step_label).collect();
    let values: Vec<f64> = steps.iter().map(|s| s.macro_auc).collect();
    report::write_text(plots.join("per_step_auc.svg"), &report::bar_svg("Closed-set Macro AUC per timestep", &labels, &values)?)?;
    let labels: Vec<String> = closed.iter().map(|e| format!("level {}", e.perturbation_level)).collect();
    let values: Vec<f64> = closed.iter().map(|e| e.macro_auc).collect();
    report::write_text(
        plots.join("perturbation_auc.svg"),
        &report::bar_svg(&format!("Macro AUC by perturbation level ({})", ranker.as_str()), &labels, &values)?,
    )?;
    for e in &closed {
        println!("level {}  macro AUC {:.4}  top-1 {:.4}", e.perturbation_level, e.macro_auc, e.top1);
    }
    for e in &open {
        println!("{:<10} AUROC {:.4}  EER {:.4}  OVL {:.4}", e.mode.as_str(), e.auroc, e.eer, e.ovl);
    }
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Train(a) => cmd_train(a),
        Command::EvalClosed(a) => cmd_eval_closed(a),
        Command::EvalOpenset(a) => cmd_eval_openset(a),
        Command::Explain(a) => cmd_explain(a),
        Command::Report(a) => cmd_report(a),
    }
}

/// Parses `args` and runs the command, printing failures as a single
/// `error[kind]: message` line. Returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("error[{}]: {first}", crate::ErrorKind::Config);
            return crate::ErrorKind::Config.exit_code();
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.kind());
            e.kind().exit_code()
        }
    }
}
