//! `fewseg` command-line driver.
//!
//! Exit codes: 0 on success, 2 for configuration or usage errors, 3 for
//! protocol violations, 1 for anything else.

pub mod checkpoint;
pub mod config;
pub mod experiments;
pub mod plot;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _, Result};
use clap::{Args, Parser, Subcommand};
use fewseg_core::data::LabelMap;
use fewseg_core::evaluation::EmbeddingCache;
use fewseg_core::incremental::session_table;
use fewseg_core::metrics::{aggregate_folds, EvalReport};
use fewseg_core::model::ImageInput;
use fewseg_core::taskgen::save_task;
use fewseg_core::training::{FtStrategy, LogRecord, TrainReport};
use fewseg_core::Error;
use serde::Serialize;

use checkpoint::Checkpoint;
use config::RunConfig;
use experiments::{Context, ResultTable};

#[derive(Debug, Parser)]
#[command(name = "fewseg", version, about = "Few-shot segmentation with calibrated prototypes")]
struct Cli {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Configuration override, repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Debug, Args)]
struct TaskArg {
    /// Task manifest from `gen-task`; generated from the configuration otherwise.
    #[arg(long, value_name = "MANIFEST")]
    task: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic task and write it to a directory.
    GenTask {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a base model and save its checkpoint.
    TrainBase {
        #[command(flatten)]
        task: TaskArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Register the task's novel classes into a base checkpoint.
    RegisterNovel {
        #[command(flatten)]
        task: TaskArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to `novel.strategy`.
        #[arg(long)]
        ft: Option<String>,
    },
    /// Evaluate a checkpoint on the test split and print the report JSON.
    Eval {
        #[command(flatten)]
        task: TaskArg,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Register missing novel classes first with this strategy.
        #[arg(long)]
        ft: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// One base + registration run per calibration format.
    AblateFormat {
        #[command(flatten)]
        task: TaskArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// One registration per fine-tuning strategy from a shared base model.
    AblateFt {
        #[command(flatten)]
        task: TaskArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Text-only, vision-only and combined novel prototypes.
    AblateModality {
        #[command(flatten)]
        task: TaskArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Registration and evaluation over the sample counts in `sweep.m`.
    SweepM {
        #[command(flatten)]
        task: TaskArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Class-incremental stream over the novel classes.
    Incremental {
        #[command(flatten)]
        task: TaskArg,
        #[arg(long)]
        out: PathBuf,
        /// JSON list of `{session_name, classes, shots}`; defaults to
        /// `stream.sessions` equal groups.
        #[arg(long)]
        stream: Option<PathBuf>,
    },
    /// Write predicted label maps and uncertainty maps as PNG.
    ExportMasks {
        #[command(flatten)]
        task: TaskArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Render tables and plots from saved reports, tables and training logs.
    Report {
        #[arg(long)]
        out: PathBuf,
        /// Treat the single reports as folds and aggregate them.
        #[arg(long)]
        folds: bool,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &anyhow::Error) -> i32 {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<Error>() {
            return match err {
                Error::Config(_) | Error::Argument(_) | Error::Spec(_) => 2,
                Error::Protocol(_) | Error::Session(_) => 3,
                _ => 1,
            };
        }
    }
    1
}

fn run_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(p) = &cli.config {
        cfg.apply_file(p)?;
    }
    for kv in &cli.set {
        cfg.apply_override(kv)?;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn strategy(arg: Option<&str>, cfg: &RunConfig) -> Result<FtStrategy> {
    Ok(match arg {
        Some(s) => s.parse()?,
        None => cfg.strategy,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn log_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".train.jsonl");
    PathBuf::from(s)
}

fn finish_table(table: &ResultTable, out: &Path) -> Result<()> {
    let path = table.save(out)?;
    print!("{}", table.markdown());
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    let cfg = run_config(&cli)?;
    let task_of = |t: &TaskArg| -> Result<Context> { Ok(Context::new(cfg.clone(), t.task.as_deref())?) };
    match &cli.cmd {
        Command::GenTask { out } => {
            let task = experiments::task_for(&cfg)?;
            let path = save_task(&task, out)?;
            println!("{}", path.display());
        }
        Command::TrainBase { task, out } => {
            let ctx = task_of(task)?;
            let (ckpt, log) = ctx.train_base(cfg.model.clone())?;
            ckpt.save(out)?;
            fs::write(log_path(out), log.to_jsonl()?)?;
            eprintln!("wrote {}", out.display());
        }
        Command::RegisterNovel {
            task,
            checkpoint,
            out,
            ft,
        } => {
            let ctx = task_of(task)?;
            let mut ckpt = Checkpoint::load(checkpoint)?;
            let log = ctx.register(&mut ckpt, strategy(ft.as_deref(), &cfg)?)?;
            ckpt.save(out)?;
            fs::write(log_path(out), log.to_jsonl()?)?;
            eprintln!("wrote {}", out.display());
        }
        Command::Eval {
            task,
            checkpoint,
            ft,
            out,
        } => {
            let ctx = task_of(task)?;
            let mut ckpt = Checkpoint::load(checkpoint)?;
            match ft.as_deref().map(str::parse::<FtStrategy>).transpose()? {
                None => {}
                Some(FtStrategy::None) => ctx.attach_novel(&mut ckpt.model)?,
                Some(s) => {
                    ctx.register(&mut ckpt, s)?;
                }
            }
            let report = ctx.evaluate(&ckpt.model, &mut EmbeddingCache::new())?;
            let json = report.to_json()?;
            if let Some(p) = out {
                if let Some(dir) = p.parent().filter(|p| !p.as_os_str().is_empty()) {
                    fs::create_dir_all(dir)?;
                }
                fs::write(p, &json)?;
            }
            println!("{json}");
        }
        Command::AblateFormat { task, out } => finish_table(&experiments::ablate_format(&task_of(task)?, out)?, out)?,
        Command::AblateFt { task, out } => finish_table(&experiments::ablate_ft(&task_of(task)?, out)?, out)?,
        Command::AblateModality { task, out } => {
            finish_table(&experiments::ablate_modality(&task_of(task)?, out)?, out)?
        }
        Command::SweepM { task, out } => finish_table(&experiments::sweep_m(&task_of(task)?, out)?, out)?,
        Command::Incremental { task, out, stream } => {
            let (table, history) = experiments::incremental(&task_of(task)?, out, stream.as_deref())?;
            table.save(out)?;
            write_json(&out.join("sessions.json"), &history)?;
            print!("{}", session_table(&history));
        }
        Command::ExportMasks {
            task,
            checkpoint,
            out,
            limit,
        } => export_masks(&task_of(task)?, checkpoint, out, *limit)?,
        Command::Report { out, folds, inputs } => report(inputs, out, *folds)?,
    }
    Ok(())
}

fn export_masks(ctx: &Context, checkpoint: &Path, out: &Path, limit: Option<usize>) -> Result<()> {
    let model = Checkpoint::load(checkpoint)?.model;
    fs::create_dir_all(out)?;
    let n = limit.unwrap_or(usize::MAX);
    for s in ctx.task.test.iter().take(n) {
        let (h, w) = (s.labels.h, s.labels.w);
        let opts = model.eval_options(&s.key, (h, w));
        let pred = model.predict(&ctx.provider, ImageInput::Sample(s), &opts)?;
        LabelMap {
            h,
            w,
            data: pred.label_map(&model.vocab),
        }
        .save_png(&out.join(format!("{}.png", s.key)))?;
        // summed per-channel variance, where 0.25 is the largest value of
        // one Bernoulli channel
        let var = &pred.prob_var;
        let gray: Vec<u8> = (0..h * w)
            .map(|p| {
                let v: f64 = (0..var.rows()).map(|c| var.get(c, p)).sum();
                (v / 0.25 * 255.0).clamp(0.0, 255.0).round() as u8
            })
            .collect();
        let file = File::create(out.join(format!("{}_uncertainty.png", s.key)))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        enc.write_header()?.write_image_data(&gray)?;
    }
    eprintln!("wrote masks to {}", out.display());
    Ok(())
}

#[derive(Debug, Default, Serialize)]
struct ReportBundle {
    tables: Vec<ResultTable>,
    reports: BTreeMap<String, EvalReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    folds: Option<EvalReport>,
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn read_log(path: &Path) -> Result<TrainReport> {
    let text = fs::read_to_string(path)?;
    let log = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str::<LogRecord>)
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    Ok(TrainReport { log })
}

fn report(inputs: &[PathBuf], out: &Path, folds: bool) -> Result<()> {
    fs::create_dir_all(out)?;
    let mut bundle = ReportBundle::default();
    let mut md = String::from("# Results\n\n");
    for path in inputs {
        let name = path.to_string_lossy();
        if name.ends_with(".jsonl") {
            let log = read_log(path)?;
            let series = |f: fn(&LogRecord) -> f64| log.log.iter().map(|r| (r.step as f64, f(r))).collect::<Vec<_>>();
            let png = out.join(format!("loss_{}.png", stem(path).replace('.', "_")));
            plot::line_plot(&[series(|r| r.loss), series(|r| r.ce), series(|r| r.kl)], &png)?;
            if let Some(last) = log.log.last() {
                md.push_str(&format!(
                    "- `{name}`: {} steps, final loss {:.4} (ce {:.4}, kl {:.4})\n",
                    last.step, last.loss, last.ce, last.kl
                ));
            }
            continue;
        }
        let text = fs::read_to_string(path).with_context(|| format!("reading {name}"))?;
        if let Ok(table) = serde_json::from_str::<ResultTable>(&text) {
            if table.kind == "sweep-m" {
                let pts = |f: fn(&EvalReport) -> f64| -> Vec<(f64, f64)> {
                    table.rows.iter().filter_map(|r| r.x.map(|x| (x, f(&r.report)))).collect()
                };
                plot::line_plot(
                    &[pts(|r| r.miou_base), pts(|r| r.miou_novel), pts(|r| r.hiou)],
                    &out.join("m_sweep.png"),
                )?;
            }
            md.push('\n');
            md.push_str(&table.markdown());
            bundle.tables.push(table);
        } else {
            let r: EvalReport = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{name} is neither a report nor a table: {e}")))?;
            bundle.reports.insert(name.into_owned(), r);
        }
    }
    if !bundle.reports.is_empty() {
        md.push_str("\n| report | mIoU_B | mIoU_N | hIoU |\n|---|---|---|---|\n");
        for (name, r) in &bundle.reports {
            md.push_str(&format!(
                "| {name} | {:.2} | {:.2} | {:.2} |\n",
                r.miou_base, r.miou_novel, r.hiou
            ));
        }
    }
    if folds {
        if bundle.reports.is_empty() {
            bail!(Error::Argument("--folds needs single-run reports".into()));
        }
        let reports: Vec<EvalReport> = bundle.reports.values().cloned().collect();
        let agg = aggregate_folds(&reports)?;
        let bars: Vec<Vec<f64>> = reports.iter().map(|r| vec![r.miou_base, r.miou_novel, r.hiou]).collect();
        plot::bar_plot(&bars, &out.join("folds.png"))?;
        md.push_str(&format!(
            "\nMean over {} folds: mIoU_B {:.2}, mIoU_N {:.2}, hIoU {:.2}\n",
            reports.len(),
            agg.miou_base,
            agg.miou_novel,
            agg.hiou
        ));
        bundle.folds = Some(agg);
    }
    fs::write(out.join("report.md"), &md)?;
    write_json(&out.join("report.json"), &bundle)?;
    print!("{md}");
    Ok(())
}
