//! Series matrices, MinMax scaling and sliding-window samples.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// A `T×K` block of observations (rows are timestamps, columns metrics) with
/// optional per-timestamp anomaly labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    labels: Option<Vec<u8>>,
    pub entity_id: String,
}

impl SeriesMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Empty("series"));
        }
        if values.len() != rows * cols {
            return Err(Error::Shape {
                context: "series values",
                expected: format!("{} values", rows * cols),
                actual: format!("{} values", values.len()),
            });
        }
        Ok(Self {
            rows,
            cols,
            values,
            labels: None,
            entity_id: String::new(),
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(i) = rows.iter().position(|r| r.len() != cols) {
            return Err(Error::Shape {
                context: "series row",
                expected: format!("{cols} columns"),
                actual: format!("{} columns at row {i}", rows[i].len()),
            });
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn with_labels(mut self, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != self.rows {
            return Err(Error::Shape {
                context: "labels",
                expected: format!("{} labels", self.rows),
                actual: format!("{} labels", labels.len()),
            });
        }
        if let Some(index) = labels.iter().position(|&v| v > 1) {
            return Err(Error::NonBinary { index });
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn with_entity(mut self, id: impl Into<String>) -> Self {
        self.entity_id = id.into();
        self
    }

    /// Number of timestamps `T`.
    pub fn len(&self) -> usize {
        self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    /// Number of metrics `K`.
    pub fn metrics(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.values[row * self.cols..(row + 1) * self.cols]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn labels(&self) -> Option<&[u8]> {
        self.labels.as_deref()
    }

    pub fn column(&self, col: usize) -> impl Iterator<Item = f64> + '_ {
        (0..self.rows).map(move |r| self.get(r, col))
    }
}

/// Per-column MinMax scaler fitted on training data.
#[derive(Debug, Clone, PartialEq)]
pub struct Scaler {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl Scaler {
    pub fn fit(train: &SeriesMatrix) -> Self {
        let (min, max) = (0..train.metrics())
            .map(|c| {
                train
                    .column(c)
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                        (lo.min(v), hi.max(v))
                    })
            })
            .unzip();
        Self { min, max }
    }

    /// Maps each column onto `(v - min) / (max - min)`. Constant columns map
    /// to 0; with `clip` every value is clamped into `[0, 1]`.
    pub fn transform(&self, data: &SeriesMatrix, clip: bool) -> Result<SeriesMatrix> {
        if data.metrics() != self.min.len() {
            return Err(Error::Shape {
                context: "scaler columns",
                expected: format!("{} columns", self.min.len()),
                actual: format!("{} columns", data.metrics()),
            });
        }
        let k = data.metrics();
        let values = data
            .values()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let (lo, hi) = (self.min[i % k], self.max[i % k]);
                let s = if hi > lo { (v - lo) / (hi - lo) } else { 0.0 };
                if clip {
                    s.clamp(0.0, 1.0)
                } else {
                    s
                }
            })
            .collect();
        Ok(SeriesMatrix {
            rows: data.rows,
            cols: k,
            values,
            labels: data.labels.clone(),
            entity_id: data.entity_id.clone(),
        })
    }
}

pub fn fit_minmax(train: &SeriesMatrix) -> Scaler {
    Scaler::fit(train)
}

pub fn apply_minmax(scaler: &Scaler, data: &SeriesMatrix, clip: bool) -> Result<SeriesMatrix> {
    scaler.transform(data, clip)
}

/// One supervised sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T> {
    /// Metric-major `K×l` window: row `k` is metric `k`'s local window.
    pub window: Tensor<T>,
    pub target: Vec<T>,
    pub target_timestamp: usize,
}

/// All sliding-window samples of a series for window length `l` and
/// horizon `h`. Sample `i` covers rows `[i, i+l)` and targets row `i+l+h-1`.
///
/// The series is held once in metric-major order; windows are gathered on
/// demand.
#[derive(Debug, Clone)]
pub struct WindowSet<T> {
    metric_major: Vec<T>,
    rows: usize,
    metrics: usize,
    window: usize,
    horizon: usize,
}

impl<T: Real> WindowSet<T> {
    pub fn new(series: &SeriesMatrix, window: usize, horizon: usize) -> Result<Self> {
        if window == 0 || horizon == 0 {
            return Err(Error::Config(format!(
                "window and horizon must be >= 1 (got l={window}, h={horizon})"
            )));
        }
        let needed = window + horizon;
        if series.len() < needed {
            return Err(Error::TooShort {
                needed,
                have: series.len(),
            });
        }
        let (t, k) = (series.len(), series.metrics());
        let mut metric_major = Vec::with_capacity(t * k);
        for c in 0..k {
            metric_major.extend(series.column(c).map(T::from_f64));
        }
        Ok(Self {
            metric_major,
            rows: t,
            metrics: k,
            window,
            horizon,
        })
    }

    pub fn len(&self) -> usize {
        self.rows - self.window - self.horizon + 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn window_len(&self) -> usize {
        self.window
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn metrics(&self) -> usize {
        self.metrics
    }

    pub fn target_timestamp(&self, i: usize) -> usize {
        i + self.window + self.horizon - 1
    }

    fn copy_window(&self, i: usize, dst: &mut [T]) {
        let l = self.window;
        for k in 0..self.metrics {
            let src = &self.metric_major[k * self.rows + i..k * self.rows + i + l];
            dst[k * l..(k + 1) * l].copy_from_slice(src);
        }
    }

    fn copy_target(&self, i: usize, dst: &mut [T]) {
        let t = self.target_timestamp(i);
        for (k, d) in dst.iter_mut().enumerate() {
            *d = self.metric_major[k * self.rows + t];
        }
    }

    pub fn sample(&self, i: usize) -> Sample<T> {
        assert!(i < self.len(), "sample index {i} out of range");
        let (k, l) = (self.metrics, self.window);
        let mut w = alloc::vec![T::zero(); k * l];
        self.copy_window(i, &mut w);
        let mut target = alloc::vec![T::zero(); k];
        self.copy_target(i, &mut target);
        Sample {
            window: Tensor::new(&[k, l], w).expect("window shape"),
            target,
            target_timestamp: self.target_timestamp(i),
        }
    }

    /// Stacks the given samples into windows `[B, K, l]` and targets `[B, K]`.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<T>, Tensor<T>) {
        let (k, l, b) = (self.metrics, self.window, indices.len());
        let mut w = alloc::vec![T::zero(); b * k * l];
        let mut y = alloc::vec![T::zero(); b * k];
        for (slot, &i) in indices.iter().enumerate() {
            assert!(i < self.len(), "sample index {i} out of range");
            self.copy_window(i, &mut w[slot * k * l..(slot + 1) * k * l]);
            self.copy_target(i, &mut y[slot * k..(slot + 1) * k]);
        }
        (
            Tensor::new(&[b, k, l], w).expect("batch shape"),
            Tensor::new(&[b, k], y).expect("batch shape"),
        )
    }
}

pub fn make_windows<T: Real>(series: &SeriesMatrix, l: usize, h: usize) -> Result<WindowSet<T>> {
    WindowSet::new(series, l, h)
}
