//! Subcommand implementations. Every run directory gets
//! `resolved_config.json` and a `timing.json` sidecar; reports and
//! checkpoints carry no wall-clock data.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::path::{Path, PathBuf};
use std::time::Instant;

use mptrec::autodiff::container::write_atomic;
use mptrec::config::{DatasetConfig, ExperimentConfig, LoadedData};
use mptrec::data::synthetic::write_csv;
use mptrec::data::{correlation_table, Dataset};
use mptrec::eval::{
    build_sign_table, compare_runs, evaluate_auc, export_representations, RunReport,
};
use mptrec::model::{Architecture, FinetuneScheme, ModelGraph};
use mptrec::pretrain::{run_pretrain, EpochLog};
use mptrec::prompt::{finetune_baseline, parse_manifest, run_prompt_tune, FrozenCache};

use crate::RunArgs;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] mptrec::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        use mptrec::Error as E;
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) => match e {
                E::Shape { .. }
                | E::NonFinite { .. }
                | E::NonScalarLoss { .. }
                | E::NonFiniteGradient { .. }
                | E::DuplicateParameter(_)
                | E::Diverged(_) => 2,
                _ => 1,
            },
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// Exclusive claim on a run directory, released on drop.
struct RunLock(PathBuf);

impl RunLock {
    fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(RunLock(path)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(CliError::Usage(format!(
                    "{} is locked by another run (remove {} if stale)",
                    dir.display(),
                    path.display()
                )))
            }
            Err(e) => Err(mptrec::Error::io(&path, e).into()),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.0);
    }
}

struct Run {
    cfg: ExperimentConfig,
    out: PathBuf,
    id: String,
    started: Instant,
    _lock: RunLock,
}

impl Run {
    fn start(args: &RunArgs) -> Result<Self> {
        let mut cfg = ExperimentConfig::load(&args.config)?;
        if let Some(s) = args.seed {
            cfg.seed = s;
        }
        let cfg = cfg.resolved();
        let out = args
            .out
            .clone()
            .or_else(|| cfg.out_dir.clone())
            .ok_or_else(|| {
                CliError::Usage("missing required flag --out (or out_dir in the config)".into())
            })?;
        std::fs::create_dir_all(&out).map_err(|e| mptrec::Error::io(&out, e))?;
        let lock = RunLock::acquire(&out)?;
        write_atomic(&out.join("resolved_config.json"), cfg.to_json()?.as_bytes())?;
        let id = out
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "run".into());
        Ok(Run {
            cfg,
            out,
            id,
            started: Instant::now(),
            _lock: lock,
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn finish(self, command: &str) -> Result<()> {
        let timing = serde_json::json!({
            "command": command,
            "wall_seconds": self.started.elapsed().as_secs_f64(),
        });
        let mut text = serde_json::to_string_pretty(&timing).map_err(mptrec::Error::from)?;
        text.push('\n');
        write_atomic(&self.path("timing.json"), text.as_bytes())?;
        Ok(())
    }
}

fn require<'a>(flag: Option<&'a Path>, name: &str) -> Result<&'a Path> {
    flag.ok_or_else(|| CliError::Usage(format!("missing required flag --{name}")))
}

fn report_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join("report.json")
    } else {
        p.to_path_buf()
    }
}

fn read_report(p: &Path) -> Result<RunReport> {
    Ok(RunReport::read(&report_path(p))?)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(mptrec::Error::from)?;
    s.push('\n');
    write_atomic(path, s.as_bytes())?;
    Ok(())
}

fn write_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut s = String::new();
    for e in log {
        s.push_str(&serde_json::to_string(e).map_err(mptrec::Error::from)?);
        s.push('\n');
    }
    write_atomic(path, s.as_bytes())?;
    Ok(())
}

fn checkpoint_meta(run: &Run, report: &RunReport) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    m.insert("run_id".into(), run.id.clone());
    m.insert("config_digest".into(), report.config_digest.clone());
    m
}

fn print_auc(report: &RunReport) {
    for (t, a) in &report.test_auc {
        println!("test_auc.{t}\t{a:.4}");
    }
    for (t, g) in &report.gains {
        println!("gain.{t}\t{g:+.4}");
    }
}

fn new_task(cfg: &ExperimentConfig) -> Result<String> {
    cfg.new_task
        .clone()
        .ok_or_else(|| CliError::Usage("config lacks `new_task`".into()))
}

fn fill_label_rules(report: &mut RunReport, data: &LoadedData, tasks: &[String]) {
    if let Some(rules) = &data.label_rules {
        for t in tasks {
            if let Ok(r) = rules.get(t) {
                report.label_rules.insert(t.clone(), r.clone());
            }
        }
    }
}

pub fn ingest(args: &RunArgs) -> Result<()> {
    let run = Run::start(args)?;
    let data = run.cfg.load_data()?;
    let tasks = data.task_names();
    let rate = |d: &Dataset, t: &str| -> Result<f64> {
        let l = d.labels(t)?;
        Ok(l.iter().map(|&v| v as f64).sum::<f64>() / l.len().max(1) as f64)
    };
    let mut positive = BTreeMap::new();
    for t in &tasks {
        positive.insert(
            t.clone(),
            serde_json::json!({ "train": rate(&data.train, t)?, "test": rate(&data.test, t)? }),
        );
    }
    let correlation = if tasks.len() > 1 {
        correlation_table(&data.train, &tasks)?
    } else {
        Vec::new()
    };
    for c in &correlation {
        println!("pearson({}, {})\t{:.4}", c.task_a, c.task_b, c.coefficient);
    }
    let summary = serde_json::json!({
        "train_rows": data.train.len(),
        "test_rows": data.test.len(),
        "input_dim": data.schema.input_dim(),
        "tasks": tasks,
        "positive_rate": positive,
        "correlation": correlation,
    });
    println!(
        "train_rows\t{}\ntest_rows\t{}\ninput_dim\t{}",
        data.train.len(),
        data.test.len(),
        data.schema.input_dim()
    );
    write_json(&run.path("schema.json"), &data.schema)?;
    write_json(&run.path("summary.json"), &summary)?;
    run.finish("ingest")
}

pub fn synth(args: &RunArgs) -> Result<()> {
    let run = Run::start(args)?;
    if !matches!(run.cfg.dataset, DatasetConfig::Synthetic { .. }) {
        return Err(CliError::Usage(
            "synth requires a synthetic dataset section".into(),
        ));
    }
    let data = run.cfg.load_data()?;
    write_csv(&data.train, &run.path("train.csv"))?;
    write_csv(&data.test, &run.path("test.csv"))?;
    write_json(&run.path("schema.json"), &data.schema)?;
    println!(
        "train_rows\t{}\ntest_rows\t{}",
        data.train.len(),
        data.test.len()
    );
    run.finish("synth")
}

pub fn train(args: &RunArgs, reference: Option<&Path>, mpt: bool) -> Result<()> {
    let run = Run::start(args)?;
    let cfg = &run.cfg;
    let is_mpt = cfg.model.architecture == Architecture::MptRec;
    if mpt != is_mpt {
        return Err(CliError::Usage(if mpt {
            "pretrain requires model.architecture = mpt_rec; use train-baseline".into()
        } else {
            "train-baseline requires a baseline architecture; use pretrain".into()
        }));
    }
    let reference = reference.map(read_report).transpose()?;
    let data = cfg.load_data()?;
    let tasks = cfg.pretrain_tasks(&data)?;
    let model = ModelGraph::build(&cfg.model, &data.schema, &tasks, cfg.seed)?;
    let mut outcome = run_pretrain(model, &data.train, &data.test, &cfg.pretrain, &run.id)?;
    let report = &mut outcome.report;
    report.digest_config(cfg)?;
    fill_label_rules(report, &data, &tasks);
    if let Some(r) = &reference {
        report.set_reference(r)?;
    }
    outcome.model.save(
        &run.path("checkpoint.mptrec"),
        &checkpoint_meta(&run, report),
    )?;
    report.write(&run.path("report.json"))?;
    write_log(&run.path("train_log.jsonl"), &outcome.log)?;
    print_auc(report);
    run.finish(if mpt { "pretrain" } else { "train-baseline" })
}

fn load_manifest(path: Option<&Path>) -> Result<Option<Vec<String>>> {
    path.map(|p| {
        std::fs::read_to_string(p)
            .map(|t| parse_manifest(&t))
            .map_err(|e| CliError::Core(mptrec::Error::io(p, e)))
    })
    .transpose()
}

pub fn prompt_tune(
    args: &RunArgs,
    checkpoint: Option<&Path>,
    cache: Option<&Path>,
    reference: Option<&Path>,
    manifest: Option<&Path>,
) -> Result<()> {
    let checkpoint = require(checkpoint, "checkpoint")?;
    let mut run = Run::start(args)?;
    let task = new_task(&run.cfg)?;
    if let Some(m) = load_manifest(manifest)? {
        run.cfg.prompt.freeze_manifest = Some(m);
    }
    let model = ModelGraph::load(checkpoint)?;
    let cache = cache.map(FrozenCache::read).transpose()?;
    let reference = reference.map(read_report).transpose()?;
    let data = run.cfg.load_data()?;
    let mut out = run_prompt_tune(
        model,
        &task,
        &data.train,
        &data.test,
        &run.cfg.prompt,
        &run.id,
        cache,
        reference.as_ref(),
    )?;
    out.report.digest_config(&run.cfg)?;
    fill_label_rules(&mut out.report, &data, std::slice::from_ref(&task));
    out.model.save(
        &run.path("checkpoint.mptrec"),
        &checkpoint_meta(&run, &out.report),
    )?;
    out.report.write(&run.path("report.json"))?;
    write_log(&run.path("train_log.jsonl"), &out.log)?;
    write_atomic(
        &run.path("freeze_manifest.txt"),
        (out.frozen.join("\n") + "\n").as_bytes(),
    )?;
    print_auc(&out.report);
    if let Some(r) = out.report.retention {
        println!("retention\t{r:.4}");
    }
    run.finish("prompt-tune")
}

pub fn finetune(
    args: &RunArgs,
    checkpoint: Option<&Path>,
    scheme: FinetuneScheme,
    reference: Option<&Path>,
    manifest: Option<&Path>,
) -> Result<()> {
    let checkpoint = require(checkpoint, "checkpoint")?;
    let mut run = Run::start(args)?;
    let task = new_task(&run.cfg)?;
    if let Some(m) = load_manifest(manifest)? {
        run.cfg.prompt.freeze_manifest = Some(m);
    }
    let model = ModelGraph::load(checkpoint)?;
    let reference = reference.map(read_report).transpose()?;
    let data = run.cfg.load_data()?;
    let mut out = finetune_baseline(
        model,
        &task,
        scheme,
        &data.train,
        &data.test,
        &run.cfg.prompt,
        &run.id,
        reference.as_ref(),
    )?;
    out.report.digest_config(&run.cfg)?;
    fill_label_rules(&mut out.report, &data, std::slice::from_ref(&task));
    out.model.save(
        &run.path("checkpoint.mptrec"),
        &checkpoint_meta(&run, &out.report),
    )?;
    out.report.write(&run.path("report.json"))?;
    write_log(&run.path("train_log.jsonl"), &out.log)?;
    write_atomic(
        &run.path("freeze_manifest.txt"),
        (out.frozen.join("\n") + "\n").as_bytes(),
    )?;
    print_auc(&out.report);
    run.finish("finetune-baseline")
}

pub fn eval(args: &RunArgs, checkpoint: Option<&Path>) -> Result<()> {
    let checkpoint = require(checkpoint, "checkpoint")?;
    let run = Run::start(args)?;
    let model = ModelGraph::load(checkpoint)?;
    let data = run.cfg.load_data()?;
    let auc = evaluate_auc(
        &model,
        &data.test,
        None,
        run.cfg.pretrain.eval_batch_size,
        run.cfg.pretrain.parallelism,
    )?;
    for (t, a) in &auc {
        println!("test_auc.{t}\t{a:.4}");
    }
    write_json(&run.path("eval.json"), &auc)?;
    run.finish("eval")
}

pub fn compare(a: &Path, b: &Path) -> Result<()> {
    let table = compare_runs(&read_report(a)?, &read_report(b)?)?;
    print!("{}", table.render());
    Ok(())
}

pub fn sign_table(pretrain: &Path, joints: &[PathBuf], json: Option<&Path>) -> Result<()> {
    let joints: Vec<RunReport> = joints
        .iter()
        .map(|p| read_report(p))
        .collect::<Result<_>>()?;
    let table = build_sign_table(&read_report(pretrain)?, &joints)?;
    print!("{}", table.render());
    if let Some(p) = json {
        write_json(p, &table)?;
    }
    Ok(())
}

pub fn export_repr(args: &RunArgs, checkpoint: Option<&Path>, rows: usize) -> Result<()> {
    let checkpoint = require(checkpoint, "checkpoint")?;
    let run = Run::start(args)?;
    let model = ModelGraph::load(checkpoint)?;
    let data = run.cfg.load_data()?;
    let rows: Vec<usize> = (0..rows.min(data.test.len())).collect();
    export_representations(&model, &data.test, &rows, &run.path("representations.tsv"))?;
    println!("exported\t{}", rows.len());
    run.finish("export-repr")
}

pub fn cache_build(args: &RunArgs, checkpoint: Option<&Path>) -> Result<()> {
    let checkpoint = require(checkpoint, "checkpoint")?;
    let run = Run::start(args)?;
    let model = ModelGraph::load(checkpoint)?;
    let data = run.cfg.load_data()?;
    let p = &run.cfg.prompt;
    let cache = FrozenCache::build(&model, &data.train, None, p.eval_batch_size, p.parallelism)?;
    cache.write(&run.path("cache.mptrec"))?;
    println!(
        "rows\t{}\nsource_checksum\t{}",
        cache.len(),
        cache.source_checksum
    );
    run.finish("cache-build")
}
