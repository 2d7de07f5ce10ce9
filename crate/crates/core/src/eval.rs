//! Anomaly scores and the evaluation protocol: point adjustment (PA), k-th
//! point adjustment, precision/recall/F1, best-F1 threshold search and
//! multi-entity aggregation.

use alloc::format;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::data::{Scaler, SeriesMatrix, WindowSet};
use crate::error::{shape_err, Error, Result};
use crate::model::CadModel;
use crate::tensor::Real;

/// Per-timestamp anomaly scores aligned with a test series.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSeries {
    pub scores: Vec<f64>,
    /// First index holding a genuine score; earlier entries repeat it.
    pub valid_from: usize,
}

/// Scores every predictable timestamp of `test` with the mean squared
/// prediction error, in eval mode.
///
/// The first `l + h - 1` timestamps have no full window before them and are
/// padded with the first genuine score. `scaler`, when given, is applied
/// first (with `clip`).
pub fn score_series<T: Real>(
    model: &CadModel<T>,
    test: &SeriesMatrix,
    scaler: Option<&Scaler>,
    clip: bool,
    batch: usize,
) -> Result<ScoreSeries> {
    let cfg = model.config();
    if test.metrics() != cfg.metrics {
        return Err(shape_err("test metrics", &[cfg.metrics], &[test.metrics()]));
    }
    let scaled;
    let series = match scaler {
        Some(s) => {
            scaled = s.transform(test, clip)?;
            &scaled
        }
        None => test,
    };
    let windows: WindowSet<T> = WindowSet::new(series, cfg.window, cfg.horizon)?;
    let valid_from = cfg.window + cfg.horizon - 1;
    let mut scores = Vec::with_capacity(series.len());
    let idx: Vec<usize> = (0..windows.len()).collect();
    let mut genuine = Vec::with_capacity(windows.len());
    for part in idx.chunks(batch.max(1)) {
        let (x, y) = windows.batch(part);
        let pred = model.predict(&x)?;
        let k = cfg.metrics;
        for (p, t) in pred.data().chunks(k).zip(y.data().chunks(k)) {
            genuine.push(crate::train::mse_loss(t, p)?);
        }
    }
    scores.resize(valid_from, genuine[0]);
    scores.extend(genuine);
    Ok(ScoreSeries { scores, valid_from })
}

/// Maximal runs of positive labels as half-open `[start, end)` ranges.
pub fn segments(labels: &[u8]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, &l) in labels.iter().enumerate() {
        match (l != 0, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push((s, i));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, labels.len()));
    }
    out
}

fn check_len(labels: &[u8], preds: &[u8]) -> Result<()> {
    if labels.len() != preds.len() {
        return Err(shape_err("labels vs predictions", &[labels.len()], &[preds.len()]));
    }
    Ok(())
}

/// A true segment counts as fully detected if any of its points is flagged.
pub fn point_adjust(labels: &[u8], preds: &[u8]) -> Result<Vec<u8>> {
    check_len(labels, preds)?;
    let mut out = preds.to_vec();
    for (s, e) in segments(labels) {
        if out[s..e].iter().any(|&p| p != 0) {
            out[s..e].fill(1);
        }
    }
    Ok(out)
}

/// Like [`point_adjust`], but a segment only counts when a flag falls within
/// `k` steps of its onset (delay `0..=k`). Otherwise every flag inside the
/// segment is cleared.
pub fn kth_point_adjust(labels: &[u8], preds: &[u8], k: usize) -> Result<Vec<u8>> {
    check_len(labels, preds)?;
    let mut out = preds.to_vec();
    for (s, e) in segments(labels) {
        let early_end = e.min(s.saturating_add(k).saturating_add(1));
        let hit = out[s..early_end].iter().any(|&p| p != 0);
        out[s..e].fill(u8::from(hit));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Confusion {
    pub fn count(labels: &[u8], preds: &[u8]) -> Result<Self> {
        check_len(labels, preds)?;
        let mut c = Confusion::default();
        for (i, (&l, &p)) in labels.iter().zip(preds).enumerate() {
            if l > 1 || p > 1 {
                return Err(Error::NonBinary { index: i });
            }
            match (l, p) {
                (1, 1) => c.tp += 1,
                (0, 1) => c.fp += 1,
                (1, 0) => c.fn_ += 1,
                _ => {}
            }
        }
        Ok(c)
    }

    /// Precision, recall and F1; each is 0 when its denominator is 0.
    pub fn prf(&self) -> Prf {
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        Prf {
            precision,
            recall,
            f1: harmonic(precision, recall),
        }
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

pub fn prf(labels: &[u8], preds: &[u8]) -> Result<Prf> {
    Ok(Confusion::count(labels, preds)?.prf())
}

/// How predictions are adjusted before counting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Adjuster {
    Raw,
    Pa,
    Kpa(usize),
}

impl Adjuster {
    pub fn apply(self, labels: &[u8], preds: &[u8]) -> Result<Vec<u8>> {
        match self {
            Adjuster::Raw => {
                check_len(labels, preds)?;
                Ok(preds.to_vec())
            }
            Adjuster::Pa => point_adjust(labels, preds),
            Adjuster::Kpa(k) => kth_point_adjust(labels, preds, k),
        }
    }

    pub fn mode_name(self) -> &'static str {
        match self {
            Adjuster::Raw => "raw",
            Adjuster::Pa => "pa",
            Adjuster::Kpa(_) => "kpa",
        }
    }

    pub fn k(self) -> Option<usize> {
        match self {
            Adjuster::Kpa(k) => Some(k),
            _ => None,
        }
    }
}

impl fmt::Display for Adjuster {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Adjuster::Kpa(k) => write!(f, "kpa{k}"),
            other => f.write_str(other.mode_name()),
        }
    }
}

impl FromStr for Adjuster {
    type Err = Error;

    /// Accepts `raw`, `pa`, and `kpa<k>` / `kpa:<k>`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(Adjuster::Raw),
            "pa" => Ok(Adjuster::Pa),
            _ => s
                .strip_prefix("kpa")
                .map(|rest| rest.trim_start_matches(':'))
                .and_then(|k| k.parse().ok())
                .map(Adjuster::Kpa)
                .ok_or_else(|| Error::Config(format!("unknown evaluation mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BestF1 {
    /// Predictions are `score >= threshold`; `+∞` flags nothing.
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub confusion: Confusion,
}

/// Evaluates a fixed threshold.
pub fn evaluate_threshold(scores: &[f64], labels: &[u8], threshold: f64, adj: Adjuster) -> Result<BestF1> {
    let preds: Vec<u8> = scores.iter().map(|&s| u8::from(s >= threshold)).collect();
    let adjusted = adj.apply(labels, &preds)?;
    let confusion = Confusion::count(labels, &adjusted)?;
    let p = confusion.prf();
    Ok(BestF1 {
        threshold,
        precision: p.precision,
        recall: p.recall,
        f1: p.f1,
        confusion,
    })
}

/// Best F1 over every candidate threshold (each distinct score, plus `+∞`).
///
/// Under any adjuster a true segment is either wholly hit or wholly missed,
/// and it is hit exactly when its detection score (the maximum score over
/// the part of the segment that may trigger it) reaches the threshold. Points
/// outside segments are never adjusted. So one descending sweep over sorted
/// events yields the confusion counts of every threshold. Ties in F1 go to
/// the smallest threshold.
pub fn best_f1(scores: &[f64], labels: &[u8], adj: Adjuster) -> Result<BestF1> {
    if scores.len() != labels.len() {
        return Err(shape_err("scores vs labels", &[scores.len()], &[labels.len()]));
    }
    if let Some(index) = labels.iter().position(|&l| l > 1) {
        return Err(Error::NonBinary { index });
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::NonFinite(format!("score at index {i}")));
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    if positives == 0 {
        return Err(Error::NoPositives);
    }

    // (value, tp gained, fp gained) once the threshold drops to `value`
    let mut events: Vec<(f64, usize, usize)> = Vec::with_capacity(scores.len());
    match adj {
        Adjuster::Raw => {
            events.extend(scores.iter().zip(labels).map(|(&s, &l)| {
                if l == 1 {
                    (s, 1, 0)
                } else {
                    (s, 0, 1)
                }
            }));
        }
        Adjuster::Pa | Adjuster::Kpa(_) => {
            // positives contribute no counts of their own but stay candidates
            events.extend(
                scores
                    .iter()
                    .zip(labels)
                    .map(|(&s, &l)| (s, 0, usize::from(l == 0))),
            );
            for (s, e) in segments(labels) {
                let reach = match adj {
                    Adjuster::Kpa(k) => e.min(s.saturating_add(k).saturating_add(1)),
                    _ => e,
                };
                let detect = scores[s..reach].iter().copied().fold(f64::NEG_INFINITY, f64::max);
                events.push((detect, e - s, 0));
            }
        }
    }
    events.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut counts = Confusion {
        tp: 0,
        fp: 0,
        fn_: positives,
    };
    let score_of = |c: &Confusion, threshold: f64| {
        let p = c.prf();
        BestF1 {
            threshold,
            precision: p.precision,
            recall: p.recall,
            f1: p.f1,
            confusion: *c,
        }
    };
    let mut best = score_of(&counts, f64::INFINITY);
    let mut i = 0;
    while i < events.len() {
        let theta = events[i].0;
        while i < events.len() && events[i].0 == theta {
            counts.tp += events[i].1;
            counts.fp += events[i].2;
            i += 1;
        }
        counts.fn_ = positives - counts.tp;
        if theta == f64::INFINITY {
            best = score_of(&counts, theta);
            continue;
        }
        let cand = score_of(&counts, theta);
        if cand.f1 >= best.f1 {
            best = cand;
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregate {
    /// Mean of per-entity F1.
    pub f1_mean: f64,
    pub precision_mean: f64,
    pub recall_mean: f64,
    /// Harmonic mean of the mean precision and mean recall.
    pub f1_star: f64,
}

pub fn aggregate_entities(per_entity: &[Prf]) -> Result<Aggregate> {
    if per_entity.is_empty() {
        return Err(Error::Empty("entity list"));
    }
    let n = per_entity.len() as f64;
    let mean = |f: fn(&Prf) -> f64| per_entity.iter().map(f).sum::<f64>() / n;
    let (p, r) = (mean(|e| e.precision), mean(|e| e.recall));
    Ok(Aggregate {
        f1_mean: mean(|e| e.f1),
        precision_mean: p,
        recall_mean: r,
        f1_star: harmonic(p, r),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn point_adjust_examples() {
        assert_eq!(point_adjust(&[0, 1, 1, 1, 0], &[0, 0, 1, 0, 0]).unwrap(), [0, 1, 1, 1, 0]);
        assert_eq!(point_adjust(&[0, 0, 0], &[1, 0, 1]).unwrap(), [1, 0, 1]);
        assert_eq!(point_adjust(&[1, 1, 0, 1], &[0, 0, 1, 0]).unwrap(), [0, 0, 1, 0]);
        assert!(point_adjust(&[1], &[1, 0]).is_err());
    }

    #[test]
    fn kth_point_adjust_examples() {
        assert_eq!(kth_point_adjust(&[1, 1, 1, 1], &[0, 0, 1, 0], 2).unwrap(), [1, 1, 1, 1]);
        assert_eq!(kth_point_adjust(&[1, 1, 1, 1], &[0, 0, 0, 1], 2).unwrap(), [0, 0, 0, 0]);
        assert_eq!(kth_point_adjust(&[0, 1, 1], &[1, 0, 1], 0).unwrap(), [1, 0, 0]);
        assert_eq!(kth_point_adjust(&[1, 1], &[0, 1], usize::MAX).unwrap(), [1, 1]);
    }

    #[test]
    fn prf_examples() {
        let p = prf(&[1, 1, 1, 0, 0], &[1, 1, 0, 1, 0]).unwrap();
        assert_eq!((p.precision, p.recall, p.f1), (2.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0));
        let p = prf(&[1, 0, 1], &[1, 0, 1]).unwrap();
        assert_eq!((p.precision, p.recall, p.f1), (1.0, 1.0, 1.0));
        let p = prf(&[1, 0, 1], &[0, 0, 0]).unwrap();
        assert_eq!((p.precision, p.recall, p.f1), (0.0, 0.0, 0.0));
        assert_eq!(prf(&[1, 2], &[0, 0]), Err(Error::NonBinary { index: 1 }));
    }

    #[test]
    fn best_f1_separable() {
        let b = best_f1(&[0.1, 0.9, 0.2], &[0, 1, 0], Adjuster::Raw).unwrap();
        assert_eq!((b.threshold, b.f1), (0.9, 1.0));
        assert_eq!(best_f1(&[0.1, 0.2], &[0, 0], Adjuster::Pa), Err(Error::NoPositives));
        assert!(best_f1(&[0.1], &[0, 1], Adjuster::Pa).is_err());
    }

    #[test]
    fn best_f1_prefers_smallest_threshold_on_ties() {
        // thresholds 0.8 and 0.5 both catch the single segment under PA with
        // no false positives
        let b = best_f1(&[0.1, 0.8, 0.5, 0.1], &[0, 1, 1, 0], Adjuster::Pa).unwrap();
        assert_eq!((b.threshold, b.f1), (0.5, 1.0));
    }

    #[test]
    fn best_f1_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let n = rng.gen_range(2..200);
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..50) as f64 / 8.0).collect();
            let mut labels: Vec<u8> = (0..n).map(|_| u8::from(rng.gen_bool(0.2))).collect();
            labels[0] = 1;
            let shifted: Vec<f64> = scores.iter().map(|s| s + 3.0).collect();
            for adj in [Adjuster::Raw, Adjuster::Pa, Adjuster::Kpa(2)] {
                let a = best_f1(&scores, &labels, adj).unwrap();
                let b = best_f1(&shifted, &labels, adj).unwrap();
                assert_eq!(a.f1, b.f1);
                assert_eq!(a.threshold + 3.0, b.threshold);
            }
        }
    }

    #[test]
    fn adjuster_parsing() {
        assert_eq!("raw".parse::<Adjuster>().unwrap(), Adjuster::Raw);
        assert_eq!("pa".parse::<Adjuster>().unwrap(), Adjuster::Pa);
        assert_eq!("kpa10".parse::<Adjuster>().unwrap(), Adjuster::Kpa(10));
        assert_eq!("kpa:3".parse::<Adjuster>().unwrap(), Adjuster::Kpa(3));
        assert!("kpa".parse::<Adjuster>().is_err());
        assert_eq!(alloc::format!("{}", Adjuster::Kpa(20)), "kpa20");
    }

    #[test]
    fn aggregate_examples() {
        let e = |p: f64, r: f64| Prf {
            precision: p,
            recall: r,
            f1: harmonic(p, r),
        };
        let a = aggregate_entities(&[e(1.0, 0.5), e(0.5, 1.0)]).unwrap();
        assert_eq!((a.precision_mean, a.recall_mean, a.f1_star), (0.75, 0.75, 0.75));
        let single = e(0.8, 0.4);
        let a = aggregate_entities(&[single]).unwrap();
        assert_eq!(a.f1_mean, single.f1);
        assert_eq!(a.f1_star, single.f1);
        assert!(aggregate_entities(&[]).is_err());
        let a = aggregate_entities(&[e(0.9624, 0.9914)]).unwrap();
        assert_eq!((a.f1_star * 1e4).round() / 1e4, 0.9767);
    }

    fn binary(n: usize) -> impl Strategy<Value = Vec<u8>> {
        proptest::collection::vec(0u8..=1, n)
    }

    proptest! {
        #[test]
        fn adjusters_are_idempotent(
            (labels, preds, k) in (1usize..80).prop_flat_map(|n| (binary(n), binary(n), 0usize..10))
        ) {
            let pa = point_adjust(&labels, &preds).unwrap();
            prop_assert_eq!(point_adjust(&labels, &pa).unwrap(), pa);
            let kpa = kth_point_adjust(&labels, &preds, k).unwrap();
            prop_assert_eq!(kth_point_adjust(&labels, &kpa, k).unwrap(), kpa);
        }

        #[test]
        fn pa_only_adds_true_positives(
            (labels, preds) in (1usize..80).prop_flat_map(|n| (binary(n), binary(n)))
        ) {
            let before = Confusion::count(&labels, &preds).unwrap();
            let after = Confusion::count(&labels, &point_adjust(&labels, &preds).unwrap()).unwrap();
            prop_assert!(after.tp >= before.tp);
            prop_assert_eq!(after.fp, before.fp);
            prop_assert!(after.fn_ <= before.fn_);
        }
    }

    #[test]
    fn segments_cover_runs() {
        assert_eq!(segments(&[1, 1, 0, 1, 0, 0, 1]), vec![(0, 2), (3, 4), (6, 7)]);
        assert!(segments(&[0, 0]).is_empty());
    }
}
