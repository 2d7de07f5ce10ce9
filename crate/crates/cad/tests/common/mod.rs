//! Synthetic datasets shared by the integration and acceptance tests.
#![allow(dead_code)]

use cad_core::data::SeriesMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const METRICS: usize = 8;
pub const DRIFT_METRIC: usize = 7;

/// Standard normal draw via Box-Muller.
fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u: f64 = rng.gen_range(f64::EPSILON..1.0);
    let v: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u.ln()).sqrt() * (2.0 * std::f64::consts::PI * v).cos()
}

/// A labeled test split plus a clean training split of `len / 2` rows each.
pub struct Split {
    pub train: SeriesMatrix,
    pub test: SeriesMatrix,
    pub labels: Vec<u8>,
}

/// `len` timestamps of 8 correlated metrics. Metric 7 carries frequent,
/// unlabeled baseline drifts; the test half carries labeled anomaly
/// segments on the stable metrics. Needs `len >= 200`.
pub fn conflict_dataset(len: usize, seed: u64) -> Split {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tau = 2.0 * std::f64::consts::PI;
    let mut level = 0.5;
    let mut next_jump = rng.gen_range(60..160);
    let mut rows = Vec::with_capacity(len);
    for t in 0..len {
        let tf = t as f64;
        let a = (tau * tf / 50.0).sin();
        let b = (tau * tf / 80.0 + 1.0).sin();
        let c = (tau * tf / 25.0 + 2.0).sin();
        let base = [
            a,
            0.7 * a + 0.3 * b,
            b,
            0.5 * a - 0.5 * b,
            c,
            0.6 * c + 0.4 * a,
            -b,
        ];
        let mut row: Vec<f64> = base
            .iter()
            .map(|v| 0.5 + 0.3 * v + 0.01 * gauss(&mut rng))
            .collect();
        if t == next_jump {
            level = rng.gen_range(0.15..0.85);
            next_jump += rng.gen_range(60..160);
        }
        row.push(level + 0.05 * (tau * tf / 37.0).sin() + 0.02 * gauss(&mut rng));
        rows.push(row);
    }

    let half = len / 2;
    let mut labels = vec![0u8; len - half];
    // one segment per 100 test rows
    let wanted = (labels.len() / 100).max(1);
    let mut placed = 0;
    while placed < wanted {
        let n = rng.gen_range(5..25);
        let s = rng.gen_range(20..labels.len() - n);
        if labels[s.saturating_sub(10)..(s + n + 10).min(labels.len())].contains(&1) {
            continue;
        }
        let hit = rng.gen_range(1..=3);
        let metrics: Vec<usize> = (0..hit).map(|_| rng.gen_range(0..DRIFT_METRIC)).collect();
        let shift = rng.gen_range(0.25..0.4) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        for (i, l) in labels.iter_mut().enumerate().skip(s).take(n) {
            *l = 1;
            for &m in &metrics {
                rows[half + i][m] += shift;
            }
        }
        placed += 1;
    }
    for r in &mut rows {
        for v in r.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }
    Split {
        train: SeriesMatrix::from_rows(&rows[..half]).unwrap(),
        test: SeriesMatrix::from_rows(&rows[half..]).unwrap(),
        labels,
    }
}

/// Comma-separated text for a matrix, one row per line.
pub fn to_csv(m: &SeriesMatrix) -> String {
    let mut out = String::new();
    for i in 0..m.len() {
        let row: Vec<String> = m.row(i).iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn labels_text(labels: &[u8]) -> String {
    labels.iter().map(|l| format!("{l}\n")).collect()
}
