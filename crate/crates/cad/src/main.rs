use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use cad::config::{expand_modes, EntityPaths, ReportFormat, RunConfig, DEFAULT_KPA_K};
use cad::embeddings::export_embeddings;
use cad::io::{format_scores, load_labels, load_scores, load_series, read_text, write_atomic};
use cad::pipeline::{format_history, score_entity, train_entity};
use cad::report::{aggregate, evaluate, format_metrics, format_report, parse_metrics, MetricRow};
use cad::{Checkpoint, CliError, Result};

const CHECKPOINT_FILE: &str = "model.ckpt";
const HISTORY_FILE: &str = "history.tsv";
const SCORES_FILE: &str = "scores.txt";
const METRICS_FILE: &str = "metrics.tsv";
const REPORT_FILE: &str = "report.tsv";

/// Conflict-aware multivariate time-series anomaly detection.
#[derive(Parser)]
#[command(name = "cad", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options selecting a configured multi-entity run.
#[derive(Args, Debug, Default)]
struct RunArgs {
    /// TOML file of `key = value` settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one setting; may be repeated. Beats the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Dataset root holding one directory per entity.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Output root (default: $CAD_OUTPUT_ROOT, else ./runs).
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Restrict to these entities; may be repeated.
    #[arg(long = "entity")]
    entities: Vec<String>,
    /// Entities processed concurrently.
    #[arg(long)]
    jobs: Option<usize>,
}

impl RunArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(self.config.as_deref(), &self.set, RunConfig::env_output_root())?;
        if let Some(d) = &self.data_dir {
            cfg.data_dir = Some(d.clone());
        }
        if let Some(o) = &self.output_dir {
            cfg.output_dir = o.clone();
        }
        if !self.entities.is_empty() {
            cfg.entities = self.entities.clone();
        }
        if let Some(j) = self.jobs {
            if j == 0 {
                return Err(CliError::Usage("--jobs must be >= 1".into()));
            }
            cfg.jobs = j;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one model per entity; writes model.ckpt and history.tsv.
    Train {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Score test series; writes one anomaly score per line.
    Score {
        #[command(flatten)]
        run: RunArgs,
        /// Score a single file with this checkpoint instead of a run.
        #[arg(long, requires_all = ["test", "out"])]
        checkpoint: Option<PathBuf>,
        /// Test series CSV to score.
        #[arg(long, requires = "checkpoint")]
        test: Option<PathBuf>,
        /// Scores file to write.
        #[arg(long, requires = "checkpoint")]
        out: Option<PathBuf>,
    },
    /// Precision, recall and F1 of scores against labels.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Evaluate a single scores file instead of a run.
        #[arg(long, requires = "labels")]
        scores: Option<PathBuf>,
        /// Label file with one 0/1 per line.
        #[arg(long, requires = "scores")]
        labels: Option<PathBuf>,
        /// raw, pa, kpa or kpaK; may be repeated.
        #[arg(long = "mode")]
        modes: Vec<String>,
        /// Delays for kpa, comma-separated.
        #[arg(long = "k", value_delimiter = ',')]
        ks: Vec<usize>,
        /// Report the best F1 over all thresholds (default).
        #[arg(long, conflicts_with = "threshold")]
        best_f1: bool,
        /// Evaluate at a fixed threshold instead.
        #[arg(long)]
        threshold: Option<f64>,
        /// Metrics file to write (single-file mode; default stdout).
        #[arg(long, requires = "scores")]
        out: Option<PathBuf>,
    },
    /// Aggregate per-entity metrics into F1, mean P, mean R and F1*.
    Report {
        #[command(flatten)]
        run: RunArgs,
        /// Metrics files to aggregate instead of a run.
        files: Vec<PathBuf>,
        /// Report file to write (default: <output>/report.tsv in run mode, stdout otherwise).
        #[arg(long)]
        out: Option<PathBuf>,
        /// tsv or text.
        #[arg(long)]
        format: Option<ReportFormat>,
    },
    /// Dump expert embeddings of sampled windows.
    ExportEmbeddings {
        /// Trained model checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Series CSV to draw windows from.
        #[arg(long)]
        data: PathBuf,
        /// Embeddings TSV to write.
        #[arg(long)]
        out: PathBuf,
        /// Take every n-th window.
        #[arg(long, default_value_t = 1)]
        stride: usize,
        /// Stop after this many windows.
        #[arg(long)]
        limit: Option<usize>,
    },
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
        ))
    }
}

/// Runs `f` over every entity with at most `jobs` threads. The first error
/// in entity order is returned.
fn for_each_entity<F>(entities: &[EntityPaths], jobs: usize, f: F) -> Result<()>
where
    F: Fn(&EntityPaths) -> Result<()> + Sync,
{
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<()>>>> =
        Mutex::new((0..entities.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, entities.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(e) = entities.get(i) else { break };
                let r = f(e);
                results.lock().unwrap()[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .unwrap()
        .into_iter()
        .flatten()
        .find(Result::is_err)
        .unwrap_or(Ok(()))
}

fn train(run: &RunArgs) -> Result<()> {
    let cfg = run.load()?;
    let entities = cfg.entity_paths()?;
    for e in &entities {
        require_file(&e.train)?;
    }
    for_each_entity(&entities, cfg.jobs, |e| {
        let series = load_series(&e.train)?;
        let start = Instant::now();
        let clock = || start.elapsed().as_secs_f64();
        let mut log = |r: &cad_core::train::EpochRecord| {
            let val = r.val_loss.map_or_else(|| "-".into(), |v| format!("{v:.6}"));
            eprintln!(
                "[{}] epoch {} train_loss={:.6} val_loss={val} lr={:.3e} elapsed={:.1}s",
                e.name, r.epoch, r.train_loss, r.lr, r.wall_time_secs
            );
        };
        let (ckpt, history) = train_entity(&cfg.train, &series, &clock, &mut log)?;
        let dir = cfg.entity_dir(&e.name);
        ckpt.save(&dir.join(CHECKPOINT_FILE))?;
        write_atomic(&dir.join(HISTORY_FILE), format_history(&history).as_bytes())?;
        eprintln!(
            "[{}] stopped: {} (best epoch {})",
            e.name,
            history.stop_reason.as_str(),
            history.best_epoch
        );
        Ok(())
    })
}

fn score_one(ckpt: &Path, test: &Path, out: &Path) -> Result<()> {
    let ckpt = Checkpoint::load(ckpt)?;
    let series = load_series(test)?;
    let scores = score_entity(&ckpt, &series)?;
    write_atomic(out, format_scores(&scores.scores).as_bytes())
}

fn score(run: &RunArgs, single: Option<(&Path, &Path, &Path)>) -> Result<()> {
    if let Some((c, t, o)) = single {
        return score_one(c, t, o);
    }
    let cfg = run.load()?;
    let entities = cfg.entity_paths()?;
    for e in &entities {
        require_file(&e.test)?;
        require_file(&cfg.entity_dir(&e.name).join(CHECKPOINT_FILE))?;
    }
    for_each_entity(&entities, cfg.jobs, |e| {
        let dir = cfg.entity_dir(&e.name);
        score_one(&dir.join(CHECKPOINT_FILE), &e.test, &dir.join(SCORES_FILE))
    })
}

struct EvalArgs<'a> {
    scores: Option<&'a Path>,
    labels: Option<&'a Path>,
    modes: &'a [String],
    ks: &'a [usize],
    threshold: Option<f64>,
    out: Option<&'a Path>,
}

fn eval(run: &RunArgs, a: EvalArgs<'_>) -> Result<()> {
    let single = a.scores.zip(a.labels);
    let cfg = if single.is_some() && run.config.is_none() && run.set.is_empty() {
        None
    } else {
        Some(run.load()?)
    };
    let modes = match (a.modes.is_empty(), a.ks.is_empty(), &cfg) {
        (true, true, Some(c)) => c.eval_modes.clone(),
        (true, true, None) => expand_modes(&["raw".into(), "pa".into(), "kpa".into()], &DEFAULT_KPA_K)?,
        (true, false, _) => expand_modes(&["kpa".into()], a.ks)?,
        (false, _, _) => {
            let ks = if a.ks.is_empty() { &DEFAULT_KPA_K[..] } else { a.ks };
            expand_modes(a.modes, ks)?
        }
    };
    if let Some((s, l)) = single {
        let entity = run.entities.first().map_or("series", String::as_str);
        let rows = evaluate(entity, &load_scores(s)?, &load_labels(l)?, &modes, a.threshold)?;
        let text = format_metrics(&rows);
        return match a.out {
            Some(o) => write_atomic(o, text.as_bytes()),
            None => {
                print!("{text}");
                Ok(())
            }
        };
    }
    let cfg = cfg.expect("run config loaded");
    let entities = cfg.entity_paths()?;
    for e in &entities {
        require_file(&e.labels)?;
        require_file(&cfg.entity_dir(&e.name).join(SCORES_FILE))?;
    }
    for_each_entity(&entities, cfg.jobs, |e| {
        let dir = cfg.entity_dir(&e.name);
        let scores = load_scores(&dir.join(SCORES_FILE))?;
        let rows = evaluate(&e.name, &scores, &load_labels(&e.labels)?, &modes, a.threshold)?;
        write_atomic(&dir.join(METRICS_FILE), format_metrics(&rows).as_bytes())
    })
}

fn report(run: &RunArgs, files: &[PathBuf], out: Option<&Path>, format: Option<ReportFormat>) -> Result<()> {
    let (paths, cfg) = if files.is_empty() {
        let cfg = run.load()?;
        let names = if cfg.entities.is_empty() {
            cfg.entity_paths()?.into_iter().map(|e| e.name).collect()
        } else {
            cfg.entities.clone()
        };
        let paths: Vec<PathBuf> = names
            .iter()
            .map(|n| cfg.entity_dir(n).join(METRICS_FILE))
            .collect();
        (paths, Some(cfg))
    } else {
        (files.to_vec(), None)
    };
    for p in &paths {
        require_file(p)?;
    }
    let mut rows: Vec<MetricRow> = Vec::new();
    for p in &paths {
        rows.extend(parse_metrics(p, &read_text(p)?)?);
    }
    let table = aggregate(&rows)?;
    let format = format
        .or(cfg.as_ref().map(|c| c.report_format))
        .unwrap_or(ReportFormat::Tsv);
    let out = out
        .map(Path::to_path_buf)
        .or_else(|| cfg.as_ref().map(|c| c.output_dir.join(REPORT_FILE)));
    if let Some(o) = out {
        write_atomic(&o, format_report(&table, ReportFormat::Tsv).as_bytes())?;
    }
    print!("{}", format_report(&table, format));
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { run } => train(&run),
        Command::Score {
            run,
            checkpoint,
            test,
            out,
        } => {
            let single = match (&checkpoint, &test, &out) {
                (Some(c), Some(t), Some(o)) => Some((c.as_path(), t.as_path(), o.as_path())),
                _ => None,
            };
            score(&run, single)
        }
        Command::Eval {
            run,
            scores,
            labels,
            modes,
            ks,
            best_f1: _,
            threshold,
            out,
        } => eval(
            &run,
            EvalArgs {
                scores: scores.as_deref(),
                labels: labels.as_deref(),
                modes: &modes,
                ks: &ks,
                threshold,
                out: out.as_deref(),
            },
        ),
        Command::Report {
            run,
            files,
            out,
            format,
        } => report(&run, &files, out.as_deref(), format),
        Command::ExportEmbeddings {
            checkpoint,
            data,
            out,
            stride,
            limit,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let series = load_series(&data)?;
            let text = export_embeddings(&ckpt, &series, stride, limit)?;
            write_atomic(&out, text.as_bytes())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("cad: error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
