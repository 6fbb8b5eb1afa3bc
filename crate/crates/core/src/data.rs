//! Series ingestion, Min-Max scaling and lagged window construction.
//!
//! Time is 0-indexed. For window length `W` and maximum lag `tau`, the first
//! timestamp with a complete history is `W + tau`. Columns of a lag design
//! matrix are ordered sensor-major: column `j * tau + (lag - 1)`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Duration;

use ndarray::{Array1, Array2, Array3, ArrayView2, ArrayViewMut2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CgtError, Result};

/// Denominator guard used by Min-Max scaling.
pub const MINMAX_EPSILON: f64 = 1e-8;

/// A `T x D` block of finite measurements, rows are timestamps.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesFrame {
    pub values: Array2<f64>,
    pub channel_names: Vec<String>,
    pub sample_period: Option<Duration>,
}

impl SeriesFrame {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        let names = (0..values.ncols()).map(|j| format!("x{j}")).collect();
        Self::with_names(values, names)
    }

    pub fn with_names(values: Array2<f64>, channel_names: Vec<String>) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(CgtError::Shape(format!(
                "series must be at least 1x1, got {}x{}",
                values.nrows(),
                values.ncols()
            )));
        }
        if channel_names.len() != values.ncols() {
            return Err(CgtError::Shape(format!(
                "{} channel names for {} columns",
                channel_names.len(),
                values.ncols()
            )));
        }
        if let Some(((row, column), v)) = values.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(CgtError::Ingest {
                path: "<memory>".into(),
                row,
                column,
                message: format!("non-finite value {v}"),
            });
        }
        Ok(Self {
            values,
            channel_names,
            sample_period: None,
        })
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn channels(&self) -> usize {
        self.values.ncols()
    }

    /// Rows `start..end` as a new frame.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.len() {
            return Err(CgtError::Shape(format!(
                "row range {start}..{end} invalid for series of length {}",
                self.len()
            )));
        }
        Ok(Self {
            values: self.values.slice(ndarray::s![start..end, ..]).to_owned(),
            channel_names: self.channel_names.clone(),
            sample_period: self.sample_period,
        })
    }
}

/// Reads a numeric CSV (rows are timestamps, columns are channels).
pub fn load_series(path: impl AsRef<Path>, has_header: bool) -> Result<SeriesFrame> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;

    let channel_names: Option<Vec<String>> = if has_header {
        Some(
            reader
                .headers()
                .map_err(|e| csv_error(path, e))?
                .iter()
                .map(str::to_string)
                .collect(),
        )
    } else {
        None
    };

    let mut data = Vec::new();
    let mut width = None;
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(path, e))?;
        width.get_or_insert(record.len());
        for (column, field) in record.iter().enumerate() {
            let value: f64 = field.parse().map_err(|_| CgtError::Ingest {
                path: path.to_path_buf(),
                row,
                column,
                message: format!("cannot parse {field:?} as a number"),
            })?;
            if !value.is_finite() {
                return Err(CgtError::Ingest {
                    path: path.to_path_buf(),
                    row,
                    column,
                    message: format!("non-finite value {field:?}"),
                });
            }
            data.push(value);
        }
    }
    let Some(width) = width else {
        return Err(CgtError::EmptyInput {
            path: path.to_path_buf(),
            message: "no data rows".into(),
        });
    };
    let rows = data.len() / width;
    let values = Array2::from_shape_vec((rows, width), data)
        .map_err(|e| CgtError::Shape(e.to_string()))?;
    let names = channel_names.unwrap_or_else(|| (0..width).map(|j| format!("x{j}")).collect());
    SeriesFrame::with_names(values, names)
}

fn csv_error(path: &Path, err: csv::Error) -> CgtError {
    let row = err
        .position()
        .map(|p| p.record() as usize)
        .unwrap_or_default();
    match err.kind() {
        csv::ErrorKind::UnequalLengths { expected_len, len, .. } => CgtError::Ingest {
            path: path.to_path_buf(),
            row,
            column: *len as usize,
            message: format!("ragged row: expected {expected_len} fields, found {len}"),
        },
        csv::ErrorKind::Io(_) => CgtError::Io(std::io::Error::other(err.to_string())),
        _ => CgtError::Ingest {
            path: path.to_path_buf(),
            row,
            column: 0,
            message: err.to_string(),
        },
    }
}

/// Writes a frame as CSV with a header row of channel names.
pub fn write_series(path: impl AsRef<Path>, frame: &SeriesFrame) -> Result<()> {
    let mut out = String::new();
    out.push_str(&frame.channel_names.join(","));
    out.push('\n');
    for row in frame.values.rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{v:.17e}")).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Per-channel extrema fitted on the training split.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalerParams {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    pub epsilon: f64,
}

pub fn fit_minmax(train: &SeriesFrame) -> ScalerParams {
    let min = train
        .values
        .axis_iter(Axis(1))
        .map(|c| c.iter().copied().fold(f64::INFINITY, f64::min))
        .collect();
    let max = train
        .values
        .axis_iter(Axis(1))
        .map(|c| c.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    ScalerParams {
        min,
        max,
        epsilon: MINMAX_EPSILON,
    }
}

impl ScalerParams {
    pub fn channels(&self) -> usize {
        self.min.len()
    }

    fn check(&self, d: usize) -> Result<()> {
        if d != self.channels() {
            return Err(CgtError::Shape(format!(
                "frame has {d} channels, scaler was fitted on {}",
                self.channels()
            )));
        }
        Ok(())
    }

    pub fn scale_value(&self, j: usize, x: f64) -> f64 {
        (x - self.min[j]) / (self.max[j] - self.min[j] + self.epsilon)
    }

    pub fn unscale_value(&self, j: usize, x: f64) -> f64 {
        x * (self.max[j] - self.min[j] + self.epsilon) + self.min[j]
    }

    pub fn inverse(&self, frame: &SeriesFrame) -> Result<SeriesFrame> {
        self.check(frame.channels())?;
        let mut out = frame.clone();
        for ((_, j), v) in out.values.indexed_iter_mut() {
            *v = self.unscale_value(j, *v);
        }
        Ok(out)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "epsilon={:.16e}", self.epsilon);
        for j in 0..self.channels() {
            let _ = writeln!(s, "min.{j}={:.16e}", self.min[j]);
            let _ = writeln!(s, "max.{j}={:.16e}", self.max[j]);
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut min = Vec::new();
        let mut max = Vec::new();
        let mut epsilon = MINMAX_EPSILON;
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = || CgtError::Config(format!("scaler line {}: {line:?}", n + 1));
            let (key, value) = line.split_once('=').ok_or_else(bad)?;
            let value: f64 = value.trim().parse().map_err(|_| bad())?;
            let key = key.trim();
            if key == "epsilon" {
                epsilon = value;
                continue;
            }
            let (kind, idx) = key.split_once('.').ok_or_else(bad)?;
            let idx: usize = idx.parse().map_err(|_| bad())?;
            let slot = match kind {
                "min" => &mut min,
                "max" => &mut max,
                _ => return Err(bad()),
            };
            if slot.len() <= idx {
                slot.resize(idx + 1, f64::NAN);
            }
            slot[idx] = value;
        }
        if min.len() != max.len() || min.iter().chain(&max).any(|v| v.is_nan()) {
            return Err(CgtError::Config("scaler file has missing min/max entries".into()));
        }
        if min.iter().zip(&max).any(|(lo, hi)| hi < lo) || epsilon <= 0.0 {
            return Err(CgtError::Config("scaler file violates max >= min, epsilon > 0".into()));
        }
        Ok(Self { min, max, epsilon })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}

/// Applies a fitted scaler; test data is neither refitted nor clipped.
pub fn apply_minmax(frame: &SeriesFrame, scaler: &ScalerParams) -> Result<SeriesFrame> {
    scaler.check(frame.channels())?;
    let mut out = frame.clone();
    for ((_, j), v) in out.values.indexed_iter_mut() {
        *v = scaler.scale_value(j, *v);
    }
    Ok(out)
}

/// Window geometry shared by the design matrix builders.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LagSpec {
    pub window: usize,
    pub max_lag: usize,
}

impl LagSpec {
    pub fn new(window: usize, max_lag: usize) -> Result<Self> {
        if window == 0 || max_lag == 0 {
            return Err(CgtError::InvalidArgument(format!(
                "window ({window}) and max_lag ({max_lag}) must be positive"
            )));
        }
        Ok(Self { window, max_lag })
    }

    pub fn first_valid(&self) -> usize {
        self.window + self.max_lag
    }

    pub fn features(&self, channels: usize) -> usize {
        channels * self.max_lag
    }

    /// Column of sensor `j` at lag `lag` (1-based).
    pub fn column(&self, j: usize, lag: usize) -> usize {
        debug_assert!((1..=self.max_lag).contains(&lag));
        j * self.max_lag + (lag - 1)
    }

    /// Inverse of [`LagSpec::column`]: `(sensor, lag)`.
    pub fn sensor_lag(&self, column: usize) -> (usize, usize) {
        (column / self.max_lag, column % self.max_lag + 1)
    }

    pub fn valid_times(&self, len: usize) -> std::ops::Range<usize> {
        self.first_valid().min(len)..len
    }
}

/// The `W x P` lagged input for one timestamp.
#[derive(Debug, Clone, PartialEq)]
pub struct LagDesignMatrix {
    pub t: usize,
    pub spec: LagSpec,
    pub values: Array2<f64>,
}

impl LagDesignMatrix {
    pub fn get(&self, row: usize, j: usize, lag: usize) -> f64 {
        self.values[[row, self.spec.column(j, lag)]]
    }
}

/// Fills `out` (`W x P`) with the lag design matrix at `t`.
pub fn fill_lag_matrix(
    series: ArrayView2<'_, f64>,
    t: usize,
    spec: LagSpec,
    mut out: ArrayViewMut2<'_, f64>,
) {
    let (w, tau) = (spec.window, spec.max_lag);
    for j in 0..series.ncols() {
        for lag in 1..=tau {
            let col = j * tau + lag - 1;
            let start = t - w - lag;
            for r in 0..w {
                out[[r, col]] = series[[start + r, j]];
            }
        }
    }
}

pub fn build_lag_matrix(frame: &SeriesFrame, t: usize, spec: LagSpec) -> Result<LagDesignMatrix> {
    if t < spec.first_valid() {
        return Err(CgtError::Range {
            t,
            first: spec.first_valid(),
        });
    }
    if t >= frame.len() {
        return Err(CgtError::Shape(format!(
            "time index {t} beyond series length {}",
            frame.len()
        )));
    }
    let mut values = Array2::zeros((spec.window, spec.features(frame.channels())));
    fill_lag_matrix(frame.values.view(), t, spec, values.view_mut());
    Ok(LagDesignMatrix { t, spec, values })
}

/// A stack of design matrices that all forecast the same target channel.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetBatch {
    pub target: usize,
    /// `B x W x P`.
    pub inputs: Array3<f64>,
    pub targets: Array1<f64>,
    pub timestamps: Vec<usize>,
}

impl TargetBatch {
    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    /// Builds the batch for explicit timestamps; each must be valid for `spec`.
    pub fn from_times(
        frame: &SeriesFrame,
        target: usize,
        times: &[usize],
        spec: LagSpec,
    ) -> Result<Self> {
        if target >= frame.channels() {
            return Err(CgtError::InvalidArgument(format!(
                "target {target} out of range for {} channels",
                frame.channels()
            )));
        }
        let p = spec.features(frame.channels());
        let mut inputs = Array3::zeros((times.len(), spec.window, p));
        let mut targets = Array1::zeros(times.len());
        for (b, &t) in times.iter().enumerate() {
            if t < spec.first_valid() {
                return Err(CgtError::Range {
                    t,
                    first: spec.first_valid(),
                });
            }
            if t >= frame.len() {
                return Err(CgtError::Shape(format!(
                    "time index {t} beyond series length {}",
                    frame.len()
                )));
            }
            fill_lag_matrix(
                frame.values.view(),
                t,
                spec,
                inputs.index_axis_mut(Axis(0), b),
            );
            targets[b] = frame.values[[t, target]];
        }
        Ok(Self {
            target,
            inputs,
            targets,
            timestamps: times.to_vec(),
        })
    }
}

/// One epoch worth of batches for a single target.
#[derive(Debug)]
pub struct TargetBatches<'a> {
    frame: &'a SeriesFrame,
    target: usize,
    spec: LagSpec,
    order: Vec<usize>,
    batch_size: usize,
    cursor: usize,
}

/// Covers every valid timestamp exactly once; shuffled when a seed is given.
pub fn iterate_target_batches(
    frame: &SeriesFrame,
    target: usize,
    spec: LagSpec,
    batch_size: usize,
    shuffle_seed: Option<u64>,
) -> Result<TargetBatches<'_>> {
    if batch_size == 0 {
        return Err(CgtError::InvalidArgument("batch_size must be positive".into()));
    }
    if target >= frame.channels() {
        return Err(CgtError::InvalidArgument(format!(
            "target {target} out of range for {} channels",
            frame.channels()
        )));
    }
    let mut order: Vec<usize> = spec.valid_times(frame.len()).collect();
    if order.is_empty() {
        return Err(CgtError::EmptyStream {
            len: frame.len(),
            needed: spec.first_valid(),
        });
    }
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(TargetBatches {
        frame,
        target,
        spec,
        order,
        batch_size,
        cursor: 0,
    })
}

impl Iterator for TargetBatches<'_> {
    type Item = TargetBatch;

    fn next(&mut self) -> Option<TargetBatch> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let times = &self.order[self.cursor..end];
        self.cursor = end;
        // Times were validated when the order was built.
        TargetBatch::from_times(self.frame, self.target, times, self.spec).ok()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use std::io::Write;

    fn csv_file(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn loads_plain_csv() {
        let f = csv_file("1,2\n3,4\n5,6\n");
        let frame = load_series(f.path(), false).unwrap();
        assert_eq!(frame.values, array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]);
    }

    #[test]
    fn header_names_are_kept() {
        let f = csv_file("a,b\n1,2\n");
        let frame = load_series(f.path(), true).unwrap();
        assert_eq!(frame.channel_names, vec!["a", "b"]);
        assert_eq!(frame.len(), 1);
    }

    #[test]
    fn empty_file_is_rejected() {
        let f = csv_file("");
        assert!(matches!(
            load_series(f.path(), false),
            Err(CgtError::EmptyInput { .. })
        ));
    }

    #[test]
    fn nan_is_rejected_with_location() {
        let f = csv_file("1,2\n3,nan\n");
        match load_series(f.path(), false) {
            Err(CgtError::Ingest { row, column, .. }) => assert_eq!((row, column), (1, 1)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn ragged_and_garbage_rows_fail() {
        let f = csv_file("1,2\n3\n");
        assert!(matches!(load_series(f.path(), false), Err(CgtError::Ingest { .. })));
        let f = csv_file("1,2\n3,abc\n");
        assert!(matches!(
            load_series(f.path(), false),
            Err(CgtError::Ingest { row: 1, column: 1, .. })
        ));
    }

    #[test]
    fn minmax_extrema() {
        let frame = SeriesFrame::new(array![[0.0, 7.0], [10.0, 7.0], [5.0, 7.0]]).unwrap();
        let s = fit_minmax(&frame);
        assert_eq!(s.min, vec![0.0, 7.0]);
        assert_eq!(s.max, vec![10.0, 7.0]);
        let scaled = apply_minmax(&frame, &s).unwrap();
        assert!((scaled.values[[2, 0]] - 0.5).abs() < 1e-8);
        assert_eq!(scaled.values[[0, 0]], 0.0);
        assert!(scaled.values.column(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn minmax_dimension_mismatch() {
        let frame = SeriesFrame::new(array![[0.0, 1.0]]).unwrap();
        let other = SeriesFrame::new(array![[0.0]]).unwrap();
        let s = fit_minmax(&frame);
        assert!(matches!(apply_minmax(&other, &s), Err(CgtError::Shape(_))));
    }

    #[test]
    fn test_values_are_not_clipped() {
        let train = SeriesFrame::new(array![[0.0], [10.0]]).unwrap();
        let s = fit_minmax(&train);
        let test = SeriesFrame::new(array![[20.0], [-10.0]]).unwrap();
        let scaled = apply_minmax(&test, &s).unwrap();
        assert!(scaled.values[[0, 0]] > 1.9);
        assert!(scaled.values[[1, 0]] < -0.9);
    }

    #[test]
    fn scaler_text_roundtrip_is_exact() {
        let s = ScalerParams {
            min: vec![0.1, -3.0e-7, 1.0 / 3.0],
            max: vec![0.7, 2.5, 12345.678901234567],
            epsilon: MINMAX_EPSILON,
        };
        assert_eq!(ScalerParams::from_text(&s.to_text()).unwrap(), s);
    }

    #[test]
    fn single_channel_lag_matrix() {
        // series [a,b,c,d], W=2, tau=1, t=3 -> [a, b]
        let frame = SeriesFrame::new(array![[1.0], [2.0], [3.0], [4.0]]).unwrap();
        let spec = LagSpec::new(2, 1).unwrap();
        let m = build_lag_matrix(&frame, 3, spec).unwrap();
        assert_eq!(m.values, array![[1.0], [2.0]]);
    }

    #[test]
    fn two_channel_lag_matrix_by_enumeration() {
        // D=2, W=1, tau=2, t=3: column (j, l) holds x_{t-1-l}^j.
        let frame = SeriesFrame::new(array![[0.0, 10.0], [1.0, 11.0], [2.0, 12.0], [3.0, 13.0]])
            .unwrap();
        let spec = LagSpec::new(1, 2).unwrap();
        let m = build_lag_matrix(&frame, 3, spec).unwrap();
        // (0,1) -> x_1^0, (0,2) -> x_0^0, (1,1) -> x_1^1, (1,2) -> x_0^1
        assert_eq!(m.values, array![[1.0, 0.0, 11.0, 10.0]]);
    }

    #[test]
    fn lag_matrix_boundary() {
        let frame = SeriesFrame::new(Array2::zeros((10, 1))).unwrap();
        let spec = LagSpec::new(3, 2).unwrap();
        assert!(matches!(
            build_lag_matrix(&frame, 4, spec),
            Err(CgtError::Range { t: 4, first: 5 })
        ));
        assert!(build_lag_matrix(&frame, 5, spec).is_ok());
    }

    #[test]
    fn column_index_bijection() {
        let spec = LagSpec::new(4, 3).unwrap();
        for c in 0..12 {
            let (j, l) = spec.sensor_lag(c);
            assert_eq!(spec.column(j, l), c);
        }
    }

    #[test]
    fn batch_counting_and_partition() {
        let spec = LagSpec::new(3, 2).unwrap();
        let frame = SeriesFrame::new(Array2::zeros((spec.first_valid() + 2, 2))).unwrap();
        let times: Vec<usize> = iterate_target_batches(&frame, 0, spec, 16, None)
            .unwrap()
            .flat_map(|b| b.timestamps)
            .collect();
        assert_eq!(times, vec![5, 6]);

        let frame = SeriesFrame::new(Array2::zeros((spec.first_valid() + 20, 2))).unwrap();
        let sizes: Vec<usize> = iterate_target_batches(&frame, 1, spec, 16, Some(3))
            .unwrap()
            .map(|b| b.len())
            .collect();
        assert_eq!(sizes, vec![16, 4]);
    }

    #[test]
    fn batches_are_seed_deterministic() {
        let spec = LagSpec::new(2, 1).unwrap();
        let frame = SeriesFrame::new(Array2::from_shape_fn((50, 2), |(t, j)| (t * 2 + j) as f64))
            .unwrap();
        let run = |seed| -> Vec<Vec<usize>> {
            iterate_target_batches(&frame, 0, spec, 7, Some(seed))
                .unwrap()
                .map(|b| b.timestamps)
                .collect()
        };
        assert_eq!(run(11), run(11));
        assert_ne!(run(11), run(12));
    }

    #[test]
    fn too_short_series_is_an_empty_stream() {
        let spec = LagSpec::new(3, 2).unwrap();
        let frame = SeriesFrame::new(Array2::zeros((5, 1))).unwrap();
        assert!(matches!(
            iterate_target_batches(&frame, 0, spec, 4, None),
            Err(CgtError::EmptyStream { .. })
        ));
    }
}
