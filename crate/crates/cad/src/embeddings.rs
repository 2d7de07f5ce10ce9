//! Export of per-expert embeddings for external projection.
//!
//! Columns (tab-separated, one header line): `sample expert e0 … e127`.
//! Each sampled window contributes one row per expert.

use std::fmt::Write as _;

use cad_core::data::{SeriesMatrix, WindowSet};
use cad_core::model::EMBED_DIM;

use crate::checkpoint::Checkpoint;
use crate::error::{CliError, Result};

const CHUNK: usize = 256;

pub fn header() -> String {
    let mut h = String::from("sample\texpert");
    for i in 0..EMBED_DIM {
        let _ = write!(h, "\te{i}");
    }
    h
}

/// Embeddings of windows `0, stride, 2·stride, …` (at most `limit` of them).
pub fn export_embeddings(
    ckpt: &Checkpoint,
    data: &SeriesMatrix,
    stride: usize,
    limit: Option<usize>,
) -> Result<String> {
    if stride == 0 {
        return Err(CliError::Usage("stride must be >= 1".into()));
    }
    let k = ckpt.metrics();
    if data.metrics() != k {
        return Err(CliError::Checkpoint(format!(
            "data has {} metrics, checkpoint expects {k}",
            data.metrics()
        )));
    }
    let scaled;
    let series = match &ckpt.scaler {
        Some(s) => {
            scaled = s.transform(data, ckpt.train.clip_preprocessing)?;
            &scaled
        }
        None => data,
    };
    let windows: WindowSet<f32> = WindowSet::new(series, ckpt.train.window, ckpt.train.horizon)?;
    let mut picked: Vec<usize> = (0..windows.len()).step_by(stride).collect();
    if let Some(n) = limit {
        picked.truncate(n);
    }
    let mut out = header();
    out.push('\n');
    for part in picked.chunks(CHUNK) {
        let (x, _) = windows.batch(part);
        let per_expert = ckpt.model.embeddings(&x)?;
        for (bi, &sample) in part.iter().enumerate() {
            for (m, emb) in per_expert.iter().enumerate() {
                let _ = write!(out, "{sample}\t{m}");
                for v in &emb.data()[bi * EMBED_DIM..(bi + 1) * EMBED_DIM] {
                    let _ = write!(out, "\t{v:?}");
                }
                out.push('\n');
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use cad_core::model::build_model;
    use cad_core::train::TrainConfig;

    fn ckpt(experts: usize) -> Checkpoint {
        let train = TrainConfig {
            window: 4,
            horizon: 1,
            experts,
            kernels: 2,
            ..TrainConfig::smd()
        };
        let model = build_model(train.model_config(2), 1).unwrap();
        Checkpoint::new(train, None, model).unwrap()
    }

    fn data(t: usize) -> SeriesMatrix {
        let v = (0..2 * t).map(|i| (i % 7) as f64 / 7.0).collect();
        SeriesMatrix::new(t, 2, v).unwrap()
    }

    #[test]
    fn row_counts() {
        let c = ckpt(5);
        let text = export_embeddings(&c, &data(40), 3, Some(10)).unwrap();
        let rows: Vec<&str> = text.lines().skip(1).collect();
        assert_eq!(rows.len(), 50);
        assert!(rows.iter().all(|r| r.split('\t').count() == 2 + EMBED_DIM));
        assert!(rows[5].starts_with("3\t0\t"));

        let s = data(40);
        let all = export_embeddings(&c, &s, 1, None).unwrap();
        assert_eq!(all.lines().count() - 1, (40 - 4 - 1 + 1) * 5);
    }

    #[test]
    fn rejects_metric_mismatch() {
        let bad = SeriesMatrix::new(10, 3, vec![0.0; 30]).unwrap();
        assert!(export_embeddings(&ckpt(2), &bad, 1, None).is_err());
    }
}
