//! Per-entity metric tables and the aggregate report.
//!
//! Metrics file columns (tab-separated, one header line):
//! `entity mode k threshold precision recall f1 tp fp fn`, where `k` is `-`
//! for the raw and pa modes.
//!
//! Report columns: `mode k entities f1_mean precision_mean recall_mean f1_star`.

use std::fmt::Write as _;
use std::path::Path;

use cad_core::eval::{aggregate_entities, best_f1, evaluate_threshold, Adjuster, Aggregate, BestF1, Prf};

use crate::config::ReportFormat;
use crate::error::{CliError, Result};
use crate::io::fmt_real;

pub const METRICS_HEADER: &str = "entity\tmode\tk\tthreshold\tprecision\trecall\tf1\ttp\tfp\tfn";
pub const REPORT_HEADER: &str = "mode\tk\tentities\tf1_mean\tprecision_mean\trecall_mean\tf1_star";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub entity: String,
    pub mode: Adjuster,
    pub result: BestF1,
}

/// Scores `labels` under each mode, at the best threshold or a fixed one.
pub fn evaluate(
    entity: &str,
    scores: &[f64],
    labels: &[u8],
    modes: &[Adjuster],
    threshold: Option<f64>,
) -> Result<Vec<MetricRow>> {
    if scores.len() != labels.len() {
        return Err(CliError::Core(cad_core::Error::Shape {
            context: "scores vs labels",
            expected: labels.len().to_string(),
            actual: scores.len().to_string(),
        }));
    }
    modes
        .iter()
        .map(|&mode| {
            let result = match threshold {
                Some(t) => evaluate_threshold(scores, labels, t, mode)?,
                None => best_f1(scores, labels, mode)?,
            };
            Ok(MetricRow {
                entity: entity.to_string(),
                mode,
                result,
            })
        })
        .collect()
}

fn k_field(mode: Adjuster) -> String {
    mode.k().map_or_else(|| "-".to_string(), |k| k.to_string())
}

pub fn format_metrics(rows: &[MetricRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let b = &r.result;
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.entity,
            r.mode.mode_name(),
            k_field(r.mode),
            fmt_real(b.threshold),
            fmt_real(b.precision),
            fmt_real(b.recall),
            fmt_real(b.f1),
            b.confusion.tp,
            b.confusion.fp,
            b.confusion.fn_,
        );
    }
    out
}

pub fn parse_metrics(path: &Path, text: &str) -> Result<Vec<MetricRow>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.trim_end() == METRICS_HEADER => {}
        _ => return Err(CliError::parse(path, "missing metrics header")),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        let bad = |what: &str| CliError::parse(path, format!("line {}: {what}", i + 1));
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 10 {
            return Err(bad("expected 10 columns"));
        }
        let mode = match (f[1], f[2]) {
            ("kpa", k) => Adjuster::Kpa(k.parse().map_err(|_| bad("bad k"))?),
            (m, "-") => m.parse().map_err(|_| bad("bad mode"))?,
            _ => return Err(bad("bad mode/k")),
        };
        let real = |s: &str| s.parse::<f64>().map_err(|_| bad("bad number"));
        let count = |s: &str| s.parse::<usize>().map_err(|_| bad("bad count"));
        rows.push(MetricRow {
            entity: f[0].to_string(),
            mode,
            result: BestF1 {
                threshold: real(f[3])?,
                precision: real(f[4])?,
                recall: real(f[5])?,
                f1: real(f[6])?,
                confusion: cad_core::eval::Confusion {
                    tp: count(f[7])?,
                    fp: count(f[8])?,
                    fn_: count(f[9])?,
                },
            },
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub mode: Adjuster,
    pub entities: usize,
    pub aggregate: Aggregate,
}

/// Groups rows by mode (first-seen order) and aggregates across entities.
pub fn aggregate(rows: &[MetricRow]) -> Result<Vec<ReportRow>> {
    let mut modes: Vec<Adjuster> = Vec::new();
    for r in rows {
        if !modes.contains(&r.mode) {
            modes.push(r.mode);
        }
    }
    modes
        .into_iter()
        .map(|mode| {
            let prfs: Vec<Prf> = rows
                .iter()
                .filter(|r| r.mode == mode)
                .map(|r| Prf {
                    precision: r.result.precision,
                    recall: r.result.recall,
                    f1: r.result.f1,
                })
                .collect();
            Ok(ReportRow {
                mode,
                entities: prfs.len(),
                aggregate: aggregate_entities(&prfs)?,
            })
        })
        .collect()
}

pub fn format_report(rows: &[ReportRow], format: ReportFormat) -> String {
    let mut out = String::new();
    match format {
        ReportFormat::Tsv => {
            out.push_str(REPORT_HEADER);
            out.push('\n');
            for r in rows {
                let a = &r.aggregate;
                let _ = writeln!(
                    out,
                    "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                    r.mode.mode_name(),
                    k_field(r.mode),
                    r.entities,
                    fmt_real(a.f1_mean),
                    fmt_real(a.precision_mean),
                    fmt_real(a.recall_mean),
                    fmt_real(a.f1_star),
                );
            }
        }
        ReportFormat::Text => {
            let _ = writeln!(out, "{:<8} {:>8} {:>8} {:>8} {:>8} {:>8}", "mode", "entities", "F1", "P", "R", "F1*");
            for r in rows {
                let a = &r.aggregate;
                let _ = writeln!(
                    out,
                    "{:<8} {:>8} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
                    r.mode.to_string(),
                    r.entities,
                    a.f1_mean,
                    a.precision_mean,
                    a.recall_mean,
                    a.f1_star
                );
            }
        }
    }
    out
}
