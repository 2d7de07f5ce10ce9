//! In-memory train → score steps shared by the CLI and the tests.

use std::fmt::Write as _;

use cad_core::data::{Scaler, SeriesMatrix, WindowSet};
use cad_core::eval::{score_series, ScoreSeries};
use cad_core::model::build_model;
use cad_core::train::{train_model_with, EpochRecord, TrainConfig, TrainHistory};

use crate::checkpoint::Checkpoint;
use crate::error::Result;
use crate::io::fmt_real;

pub const SCORE_BATCH: usize = 512;

/// History columns: `epoch train_loss val_loss lr`, then a trailing
/// `# stop_reason=... best_epoch=...` line. Wall time is deliberately
/// absent so reruns are byte-identical.
pub const HISTORY_HEADER: &str = "epoch\ttrain_loss\tval_loss\tlr";

/// Fits the scaler (when `cfg.normalize`) and returns the series to train on.
pub fn prepare(cfg: &TrainConfig, train: &SeriesMatrix) -> Result<(Option<Scaler>, SeriesMatrix)> {
    if !cfg.normalize {
        return Ok((None, train.clone()));
    }
    let scaler = Scaler::fit(train);
    let scaled = scaler.transform(train, false)?;
    Ok((Some(scaler), scaled))
}

/// Builds and trains a model for one entity.
pub fn train_entity(
    cfg: &TrainConfig,
    train: &SeriesMatrix,
    clock: &dyn Fn() -> f64,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<(Checkpoint, TrainHistory)> {
    cfg.validate()?;
    let (scaler, series) = prepare(cfg, train)?;
    let windows: WindowSet<f32> = WindowSet::new(&series, cfg.window, cfg.horizon)?;
    let model = build_model(cfg.model_config(series.metrics()), cfg.seed)?;
    let (model, history) = train_model_with(model, &windows, cfg, clock, on_epoch)?;
    Ok((Checkpoint::new(cfg.clone(), scaler, model)?, history))
}

/// Anomaly scores for `test` under a checkpoint's model and scaler.
pub fn score_entity(ckpt: &Checkpoint, test: &SeriesMatrix) -> Result<ScoreSeries> {
    Ok(score_series(
        &ckpt.model,
        test,
        ckpt.scaler.as_ref(),
        ckpt.train.clip_preprocessing,
        SCORE_BATCH,
    )?)
}

pub fn format_history(h: &TrainHistory) -> String {
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    for e in &h.epochs {
        let val = e.val_loss.map_or_else(|| "-".to_string(), fmt_real);
        let _ = writeln!(out, "{}\t{}\t{}\t{}", e.epoch, fmt_real(e.train_loss), val, fmt_real(e.lr));
    }
    let _ = writeln!(out, "# stop_reason={} best_epoch={}", h.stop_reason.as_str(), h.best_epoch);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(t: usize) -> SeriesMatrix {
        let rows: Vec<Vec<f64>> = (0..t)
            .map(|i| vec![(i as f64 * 0.3).sin() * 5.0 + 10.0, (i as f64 * 0.17).cos()])
            .collect();
        SeriesMatrix::from_rows(&rows).unwrap()
    }

    fn tiny() -> TrainConfig {
        TrainConfig {
            window: 6,
            horizon: 1,
            experts: 2,
            kernels: 3,
            batch: 16,
            max_epochs: 2,
            ..TrainConfig::smd()
        }
    }

    #[test]
    fn normalize_attaches_scaler() {
        let cfg = TrainConfig { normalize: true, ..tiny() };
        let (ck, h) = train_entity(&cfg, &series(120), &|| 0.0, &mut |_| {}).unwrap();
        assert!(ck.scaler.is_some());
        assert!(!h.epochs.is_empty());
        let s = score_entity(&ck, &series(60)).unwrap();
        assert_eq!(s.scores.len(), 60);
        assert_eq!(s.valid_from, 6);
    }

    #[test]
    fn history_has_no_wall_time() {
        let mut calls = 0.0;
        let clock = std::cell::Cell::new(0.0);
        let tick = || {
            clock.set(clock.get() + 1.5);
            clock.get()
        };
        let (_, h) = train_entity(&tiny(), &series(100), &tick, &mut |_| calls += 1.0).unwrap();
        assert_eq!(calls as usize, h.epochs.len());
        let text = format_history(&h);
        assert!(text.starts_with(HISTORY_HEADER));
        assert!(!text.contains("1.5"));
        assert!(text.trim_end().lines().last().unwrap().starts_with("# stop_reason="));
    }
}
