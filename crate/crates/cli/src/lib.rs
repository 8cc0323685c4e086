//! Command implementations behind the `tapslf` binary. Each command writes
//! its artifacts into a run directory and prints a short report to stdout.

pub mod config;
pub mod overlay;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use tapslf::adapters::count_trainable;
use tapslf::metrics::{render_table, MetricsReport};
use tapslf::training::{
    model_from_checkpoint, pretrain_backbone, Checkpoint, CheckpointKind, Dataset, EpochRecord, Finetuner, MAGIC,
    VERSION,
};
use tapslf::{ExecMode, Task, TapSlfModel};

pub use config::{usage, RunConfig, UsageError};

pub const CONFIG_FILE: &str = "config.json";
pub const ACCOUNTING_FILE: &str = "accounting.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const LOSS_FILE: &str = "loss.csv";
pub const BACKBONE_FILE: &str = "backbone.ckpt";
pub const FINETUNED_FILE: &str = "finetuned.ckpt";
pub const SWEEP_TABLE: &str = "sweep.txt";
pub const SWEEP_CSV: &str = "sweep.csv";

/// Exit status for a failed command: 2 for usage, configuration and
/// corrupt-input errors, 3 for I/O failures, 1 for anything internal.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<tapslf::Error>() {
            return match e {
                tapslf::Error::Io(_) => 3,
                tapslf::Error::Config(_) | tapslf::Error::Checkpoint { .. } => 2,
                _ => 1,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
    }
    1
}

fn io_context<T>(r: std::io::Result<T>, what: impl FnOnce() -> String) -> anyhow::Result<T> {
    r.with_context(what)
}

fn prepare_dir(dir: &Path) -> anyhow::Result<()> {
    io_context(fs::create_dir_all(dir), || format!("cannot create {}", dir.display()))
}

fn write_file(path: &Path, contents: &str) -> anyhow::Result<()> {
    io_context(fs::write(path, contents), || format!("cannot write {}", path.display()))
}

/// Reads a checkpoint; corrupt files become usage errors carrying the byte
/// offset, unreadable files stay I/O errors.
pub fn load_checkpoint(path: &Path) -> anyhow::Result<Checkpoint> {
    let bytes = io_context(fs::read(path), || format!("cannot read checkpoint {}", path.display()))?;
    Checkpoint::from_bytes(&bytes).with_context(|| format!("{} is not a valid checkpoint", path.display()))
}

fn save_checkpoint(ck: &Checkpoint, path: &Path) -> anyhow::Result<()> {
    let bytes = ck.to_bytes()?;
    io_context(fs::write(path, bytes), || format!("cannot write {}", path.display()))
}

pub struct PretrainResult {
    pub dir: PathBuf,
    pub checkpoint: PathBuf,
    pub heldout_initial: f64,
    pub heldout_final: f64,
}

pub fn cmd_pretrain(cfg: &RunConfig) -> anyhow::Result<PretrainResult> {
    let dir = cfg.run_dir();
    prepare_dir(&dir)?;
    write_file(&dir.join(CONFIG_FILE), &cfg.to_json())?;
    let train = cfg.train();
    let model = TapSlfModel::new(&train.model(), train.seed)?;
    write_file(&dir.join(ACCOUNTING_FILE), &count_trainable(&model).to_text())?;

    let start = Instant::now();
    let mut curve = String::from("step,loss\n");
    let out = pretrain_backbone(&train, |step, loss| {
        let _ = writeln!(curve, "{step},{loss:.9}");
    })?;
    write_file(&dir.join(LOSS_FILE), &curve)?;
    let ckpt = dir.join(BACKBONE_FILE);
    save_checkpoint(&out.checkpoint, &ckpt)?;
    println!(
        "pretrained {} steps in {:.1}s; held-out reconstruction loss {:.6} -> {:.6}",
        train.pretrain.steps,
        start.elapsed().as_secs_f64(),
        out.heldout_initial,
        out.heldout_final
    );
    println!("backbone written to {}", ckpt.display());
    Ok(PretrainResult {
        dir,
        checkpoint: ckpt,
        heldout_initial: out.heldout_initial,
        heldout_final: out.heldout_final,
    })
}

/// Ablation switches of `finetune`.
#[derive(Clone, Debug, Default)]
pub struct Ablation {
    pub no_tap: bool,
    pub no_slf: bool,
    pub frozen_ratio: Option<f64>,
}

impl Ablation {
    pub fn apply(&self, cfg: &mut RunConfig) -> anyhow::Result<()> {
        if self.no_slf && self.frozen_ratio.is_some() {
            return Err(usage("--no-slf and --frozen-ratio cannot be combined"));
        }
        let mut t = cfg.train();
        if let Some(r) = self.frozen_ratio {
            if !(0.0..=1.0).contains(&r) {
                return Err(usage(format!("--frozen-ratio must lie in [0, 1], got {r}")));
            }
            t.adapter.frozen_ratio = r;
        }
        if self.no_tap {
            t = t.without_prompts();
        }
        if self.no_slf {
            t = t.without_selection();
        }
        t.validate().map_err(|e| usage(e.to_string()))?;
        cfg.set_train(t);
        Ok(())
    }
}

pub struct FinetuneResult {
    pub dir: PathBuf,
    pub checkpoint: PathBuf,
    pub records: Vec<EpochRecord>,
    pub step0_loss: f64,
    pub trailing_loss: f64,
    pub fraction: f64,
    pub seconds: f64,
}

fn load_backbone(path: &Path, cfg: &RunConfig) -> anyhow::Result<tapslf::params::ParamStore> {
    let ck = load_checkpoint(path)?;
    if ck.meta.kind != CheckpointKind::Backbone {
        return Err(usage(format!("{} is a fine-tuned checkpoint, not a backbone", path.display())));
    }
    if ck.meta.config.encoder != cfg.encoder {
        return Err(usage(format!(
            "backbone {} was trained with a different encoder configuration",
            path.display()
        )));
    }
    Ok(ck.param_store())
}

/// Fine-tunes into `dir`. Shared by `finetune` and every `sweep` row so both
/// produce identical results for identical settings.
pub fn finetune_into(cfg: &RunConfig, dir: &Path, quiet: bool) -> anyhow::Result<FinetuneResult> {
    let train = cfg.train();
    let store = cfg.backbone.as_deref().map(|p| load_backbone(p, cfg)).transpose()?;
    prepare_dir(dir)?;
    let mut resolved = cfg.clone();
    resolved.run_name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    resolved.output_dir = dir.parent().map(Path::to_path_buf).unwrap_or_default();
    write_file(&dir.join(CONFIG_FILE), &resolved.to_json())?;

    let data = Dataset::generate(&train.data, train.encoder.image_size, train.exec)?;
    let mut ft = Finetuner::new(&train, store.as_ref())?;
    let acct = ft.accounting();
    write_file(&dir.join(ACCOUNTING_FILE), &acct.to_text())?;
    if !quiet {
        println!(
            "trainable parameters: {} of {} ({:.2}%)",
            acct.trainable(),
            acct.total(),
            100.0 * acct.fraction()
        );
        if train.adapter.frozen_ratio == 0.0 {
            println!("note: frozen_ratio 0 injects LoRA into every layer (the w/o SLF setting)");
        }
        if cfg.backbone.is_none() {
            println!("note: no backbone given; using the untrained initialization");
        }
    }

    let start = Instant::now();
    let mut losses = String::from("step,loss,seg,cls,det,reg\n");
    let mut history = Vec::new();
    let mut metrics = format!("epoch,step,mean_loss,{}\n", MetricsReport::csv_header());
    let records = ft.run(
        &data,
        |s| {
            history.push(s.loss);
            let [a, b, c, d] = s.task_losses;
            let _ = writeln!(losses, "{},{:.9},{a:.9},{b:.9},{c:.9},{d:.9}", s.step, s.loss);
        },
        |r| {
            let _ = writeln!(metrics, "{},{},{:.6},{}", r.epoch, r.step, r.mean_loss, r.metrics.csv_row());
            if !quiet {
                println!("epoch {} step {} loss {:.4}  {}", r.epoch, r.step, r.mean_loss, r.metrics.csv_row());
            }
        },
    )?;
    let seconds = start.elapsed().as_secs_f64();
    write_file(&dir.join(LOSS_FILE), &losses)?;
    write_file(&dir.join(METRICS_FILE), &metrics)?;
    let ckpt = dir.join(FINETUNED_FILE);
    save_checkpoint(&ft.checkpoint(), &ckpt)?;

    let tail = &history[history.len().saturating_sub(20)..];
    let trailing_loss = tail.iter().sum::<f64>() / tail.len().max(1) as f64;
    if !quiet {
        if let Some(last) = records.last() {
            println!("{}", render_table("run", &[(resolved.run_name.clone(), last.metrics.clone())], true));
        }
        println!("checkpoint written to {}", ckpt.display());
    }
    Ok(FinetuneResult {
        dir: dir.to_path_buf(),
        checkpoint: ckpt,
        step0_loss: history.first().copied().unwrap_or(f64::NAN),
        trailing_loss,
        fraction: acct.fraction(),
        records,
        seconds,
    })
}

pub fn cmd_finetune(cfg: &RunConfig, backbone: Option<&Path>, ablation: &Ablation) -> anyhow::Result<FinetuneResult> {
    let mut cfg = cfg.clone();
    if let Some(p) = backbone {
        cfg.backbone = Some(p.to_path_buf());
    }
    ablation.apply(&mut cfg)?;
    finetune_into(&cfg, &cfg.run_dir(), false)
}

/// Parses a comma-separated ratio list.
pub fn parse_ratios(s: &str) -> anyhow::Result<Vec<f64>> {
    let ratios: Vec<f64> = s
        .split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse::<f64>().map_err(|_| usage(format!("bad ratio {p:?}"))))
        .collect::<anyhow::Result<_>>()?;
    if ratios.is_empty() {
        return Err(usage("--ratios needs at least one value"));
    }
    if let Some(bad) = ratios.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(usage(format!("frozen ratio {bad} outside [0, 1]")));
    }
    Ok(ratios)
}

pub struct SweepResult {
    pub rows: Vec<(f64, MetricsReport)>,
    pub table: String,
    pub csv: String,
}

/// One fine-tuning run per frozen ratio, all from the same backbone and
/// seed. With `parallel` the runs fan out; every run writes its own
/// directory so outputs never collide.
pub fn cmd_sweep(cfg: &RunConfig, backbone: Option<&Path>, ratios: &[f64], parallel: bool) -> anyhow::Result<SweepResult> {
    if ratios.is_empty() {
        return Err(usage("--ratios needs at least one value"));
    }
    let mut cfg = cfg.clone();
    if let Some(p) = backbone {
        cfg.backbone = Some(p.to_path_buf());
    }
    let root = cfg.run_dir();
    prepare_dir(&root)?;
    write_file(&root.join(CONFIG_FILE), &cfg.to_json())?;
    let mode = if parallel { ExecMode::Parallel } else { ExecMode::Sequential };
    let results = tapslf::exec::try_map_indexed(mode, ratios.len(), |i| {
        let mut c = cfg.clone();
        Ablation {
            frozen_ratio: Some(ratios[i]),
            ..Ablation::default()
        }
        .apply(&mut c)?;
        let dir = root.join(format!("ratio-{:.2}", ratios[i]));
        let r = finetune_into(&c, &dir, true)?;
        println!("ratio {:.2} done in {:.1}s", ratios[i], r.seconds);
        Ok::<_, anyhow::Error>(r.records.last().map(|e| e.metrics.clone()).unwrap_or_default())
    })?;
    let rows: Vec<(f64, MetricsReport)> = ratios.iter().copied().zip(results).collect();
    let labelled: Vec<(String, MetricsReport)> = rows.iter().map(|(r, m)| (format!("{r:.2}"), m.clone())).collect();
    let table = render_table("frozen_ratio", &labelled, true);
    let mut csv = format!("frozen_ratio,{}\n", MetricsReport::csv_header());
    for (label, m) in &labelled {
        let _ = writeln!(csv, "{label},{}", m.csv_row());
    }
    write_file(&root.join(SWEEP_TABLE), &table)?;
    write_file(&root.join(SWEEP_CSV), &csv)?;
    println!("{table}");
    Ok(SweepResult { rows, table, csv })
}

/// Parses `all` or a single task name.
pub fn parse_tasks(s: &str) -> anyhow::Result<Vec<Task>> {
    if s == "all" {
        return Ok(Task::ALL.to_vec());
    }
    s.parse::<Task>()
        .map(|t| vec![t])
        .map_err(|_| usage(format!("unknown task {s:?}; expected all, seg, cls, det or reg")))
}

/// Evaluates a fine-tuned checkpoint on the deterministic test splits and
/// returns the printed report.
pub fn cmd_eval(path: &Path, tasks: &[Task], merge: bool) -> anyhow::Result<String> {
    let ck = load_checkpoint(path)?;
    let mut model = model_from_checkpoint(&ck).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    if merge {
        model = model.merged();
    }
    let cfg = &ck.meta.config;
    let data = Dataset::generate(&cfg.data, cfg.encoder.image_size, cfg.exec)?;
    let report = tapslf::training::evaluate(&model, &data, tasks, cfg.exec)?;
    let mut out = render_table("checkpoint", &[(format!("step {}", ck.meta.step), report.clone())], false);
    out.push('\n');
    out.push_str(&report.to_kv());
    print!("{out}");
    Ok(out)
}

/// Header, configuration and parameter accounting of a checkpoint.
pub fn cmd_inspect(path: &Path) -> anyhow::Result<String> {
    let ck = load_checkpoint(path)?;
    let model = match ck.meta.kind {
        CheckpointKind::Finetuned => model_from_checkpoint(&ck)?,
        CheckpointKind::Backbone => TapSlfModel::new(&ck.meta.config.model(), ck.meta.config.seed)?,
    };
    let n_moments = ck.tensors.iter().filter(|(n, _)| n.starts_with("optim.")).count();
    let mut out = String::new();
    let _ = writeln!(out, "magic = {}", String::from_utf8_lossy(MAGIC));
    let _ = writeln!(out, "version = {VERSION}");
    let _ = writeln!(out, "kind = {:?}", ck.meta.kind);
    let _ = writeln!(out, "step = {}", ck.meta.step);
    let _ = writeln!(out, "tensors = {} ({} optimizer moments)", ck.tensors.len(), n_moments);
    let _ = writeln!(out, "seed = {}", ck.meta.config.seed);
    let _ = writeln!(out, "frozen_ratio = {}", ck.meta.config.adapter.frozen_ratio);
    let prompted: Vec<String> = ck.meta.config.adapter.prompted_tasks.iter().map(|t| t.to_string()).collect();
    let _ = writeln!(out, "prompted_tasks = [{}]", prompted.join(", "));
    out.push_str(&count_trainable(&model).to_text());
    print!("{out}");
    Ok(out)
}

/// Writes the generated train and test splits of every task to `out`.
pub fn cmd_export(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let t = cfg.train();
    let data = Dataset::generate(&t.data, t.encoder.image_size, t.exec)?;
    for task in Task::ALL {
        let split = data.split(task);
        tapslf::synthdata::export_dataset(&split.train, &out.join(task.as_str()).join("train"))?;
        tapslf::synthdata::export_dataset(&split.test, &out.join(task.as_str()).join("test"))?;
    }
    println!("dataset written to {}", out.display());
    Ok(())
}
