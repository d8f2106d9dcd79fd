//! Dataset loading, splitting, normalization, masking, windowing, and a
//! synthetic generator for desk-scale experiments.
//!
//! The pipeline is strictly causal: splits are chronological and contiguous,
//! windows never straddle a split boundary, and the normalizer is fitted on
//! the training range only. Variable masking models sensors that are dead
//! for the whole recorded history: a masked variable's input rows are
//! exactly zero in every window, while its targets keep the ground truth,
//! because the model is still asked to predict it.

use crate::graph::{Graph, GraphError};
use crate::mat::Mat;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

/// History window length used throughout the experiments.
pub const DEFAULT_HISTORY: usize = 12;
/// Forecast horizon used throughout the experiments.
pub const DEFAULT_HORIZON: usize = 12;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("dataset i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("mask json: {0}")]
    MaskJson(#[from] serde_json::Error),
    #[error("row {row} has {found} cells, header has {expected}")]
    Ragged {
        row: usize,
        found: usize,
        expected: usize,
    },
    #[error("row {row}, column {col:?}: {value:?} is not a finite number")]
    NonNumeric {
        row: usize,
        col: String,
        value: String,
    },
    #[error("{n} variables; a multivariate dataset needs at least 2")]
    TooFewVariables { n: usize },
    #[error("{t} time steps; need more than {min} to form one history + horizon window")]
    TooShort { t: usize, min: usize },
    #[error("split ratios must be non-negative and sum to 1, got {ratios:?}")]
    BadRatios { ratios: (f64, f64, f64) },
    #[error("{split} split holds {len} steps, fewer than history + horizon = {min}")]
    SplitTooShort {
        split: &'static str,
        len: usize,
        min: usize,
    },
    #[error("mask rate {rate} outside [0, 1)")]
    BadRate { rate: f64 },
    #[error("mask index {index} out of range for {n} variables")]
    MaskIndex { index: usize, n: usize },
    #[error("synthetic generator needs at least 4 variables, got {n}")]
    SynthTooSmall { n: usize },
    #[error("coordinate table has {rows} rows for {n} variables")]
    CoordCount { rows: usize, n: usize },
    #[error("distance table is {rows}x{cols}, expected {n}x{n}")]
    DistanceShape { rows: usize, cols: usize, n: usize },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// A complete multivariate series: `values` is N×T with variables in rows
/// and time steps in columns.
#[derive(Debug, Clone)]
pub struct TimeSeriesDataset {
    pub values: Mat,
    pub ids: Vec<String>,
    /// Seconds between consecutive time steps; drives the optional
    /// time-of-day input channel.
    pub granularity_secs: u64,
    pub coords: Option<Vec<(f64, f64)>>,
    pub distances: Option<Mat>,
}

impl TimeSeriesDataset {
    pub fn n_vars(&self) -> usize {
        self.values.rows
    }

    pub fn len(&self) -> usize {
        self.values.cols
    }

    pub fn is_empty(&self) -> bool {
        self.values.cols == 0
    }
}

/// Read a dataset from CSV: first row is the header of variable ids, each
/// later row is one time step across all variables.
pub fn load_dataset(path: &Path) -> Result<TimeSeriesDataset, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let ids: Vec<String> = reader
        .headers()?
        .iter()
        .map(|h| h.to_string())
        .collect();
    let n = ids.len();
    if n < 2 {
        return Err(DataError::TooFewVariables { n });
    }
    let mut columns: Vec<Vec<f64>> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        // Data rows are 1-based and the header occupies row 1.
        let row = i + 2;
        if record.len() != n {
            return Err(DataError::Ragged {
                row,
                found: record.len(),
                expected: n,
            });
        }
        let mut step = Vec::with_capacity(n);
        for (cell, id) in record.iter().zip(&ids) {
            let value: f64 = cell.parse().map_err(|_| DataError::NonNumeric {
                row,
                col: id.clone(),
                value: cell.to_string(),
            })?;
            if !value.is_finite() {
                return Err(DataError::NonNumeric {
                    row,
                    col: id.clone(),
                    value: cell.to_string(),
                });
            }
            step.push(value);
        }
        columns.push(step);
    }
    let t = columns.len();
    let min = DEFAULT_HISTORY + DEFAULT_HORIZON;
    if t <= min {
        return Err(DataError::TooShort { t, min });
    }
    let mut values = Mat::zeros(n, t);
    for (ti, step) in columns.iter().enumerate() {
        for (vi, &v) in step.iter().enumerate() {
            values[(vi, ti)] = v;
        }
    }
    Ok(TimeSeriesDataset {
        values,
        ids,
        granularity_secs: 3600,
        coords: None,
        distances: None,
    })
}

/// Write a dataset back to the CSV layout [`load_dataset`] reads. Values are
/// formatted with Rust's shortest-exact float notation, so a round trip
/// reproduces every bit.
pub fn save_dataset(ds: &TimeSeriesDataset, path: &Path) -> Result<(), DataError> {
    let mut out = String::new();
    out.push_str(&ds.ids.join(","));
    out.push('\n');
    for t in 0..ds.len() {
        for v in 0..ds.n_vars() {
            if v > 0 {
                out.push(',');
            }
            out.push_str(&ds.values[(v, t)].to_string());
        }
        out.push('\n');
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(out.as_bytes())?;
    Ok(())
}

/// Read an N-row `x,y` coordinate table (no header).
pub fn load_coords(path: &Path, n: usize) -> Result<Vec<(f64, f64)>, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut coords = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let row = i + 1;
        if record.len() != 2 {
            return Err(DataError::Ragged {
                row,
                found: record.len(),
                expected: 2,
            });
        }
        let mut pair = [0.0; 2];
        for (k, cell) in record.iter().enumerate() {
            pair[k] = cell.parse().map_err(|_| DataError::NonNumeric {
                row,
                col: ["x", "y"][k].to_string(),
                value: cell.to_string(),
            })?;
        }
        coords.push((pair[0], pair[1]));
    }
    if coords.len() != n {
        return Err(DataError::CoordCount {
            rows: coords.len(),
            n,
        });
    }
    Ok(coords)
}

/// Read an N×N distance table (no header).
pub fn load_distances(path: &Path, n: usize) -> Result<Mat, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let row = i + 1;
        if record.len() != n {
            return Err(DataError::DistanceShape {
                rows: row,
                cols: record.len(),
                n,
            });
        }
        let mut parsed = Vec::with_capacity(n);
        for (j, cell) in record.iter().enumerate() {
            parsed.push(cell.parse().map_err(|_| DataError::NonNumeric {
                row,
                col: format!("{j}"),
                value: cell.to_string(),
            })?);
        }
        rows.push(parsed);
    }
    if rows.len() != n {
        return Err(DataError::DistanceShape {
            rows: rows.len(),
            cols: n,
            n,
        });
    }
    let mut m = Mat::zeros(n, n);
    for (i, r) in rows.iter().enumerate() {
        m.row_mut(i).copy_from_slice(r);
    }
    Ok(m)
}

/// Chronological, contiguous, non-overlapping index ranges.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitRanges {
    pub train: (usize, usize),
    pub val: (usize, usize),
    pub test: (usize, usize),
}

/// Cut `[0, t)` into train/val/test by the given ratios. Boundaries come
/// from rounding the cumulative ratios, so T=100 at 7:1:2 yields exactly
/// [0,70), [70,80), [80,100). Every split must be long enough for at least
/// one window.
pub fn split(
    t: usize,
    ratios: (f64, f64, f64),
    history: usize,
    horizon: usize,
) -> Result<SplitRanges, DataError> {
    let (a, b, c) = ratios;
    let sum = a + b + c;
    if a < 0.0 || b < 0.0 || c < 0.0 || (sum - 1.0).abs() > 1e-9 {
        return Err(DataError::BadRatios { ratios });
    }
    let cut1 = (t as f64 * a).round() as usize;
    let cut2 = (t as f64 * (a + b)).round() as usize;
    let ranges = SplitRanges {
        train: (0, cut1),
        val: (cut1, cut2),
        test: (cut2, t),
    };
    let min = history + horizon;
    for (name, (lo, hi)) in [
        ("train", ranges.train),
        ("val", ranges.val),
        ("test", ranges.test),
    ] {
        if hi - lo < min {
            return Err(DataError::SplitTooShort {
                split: name,
                len: hi - lo,
                min,
            });
        }
    }
    Ok(ranges)
}

/// Per-variable standardization statistics, fitted on the training range
/// with masked variables excluded (they are assigned mean 0, std 1, so their
/// zero placeholders pass through unchanged).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl Normalizer {
    /// Fit on `values[:, train.0..train.1]`. Constant series get std 1 with
    /// a warning, keeping the transform invertible.
    pub fn fit(values: &Mat, train: (usize, usize), mask: &[usize]) -> Normalizer {
        let n = values.rows;
        let (lo, hi) = train;
        let count = (hi - lo).max(1) as f64;
        let mut means = vec![0.0; n];
        let mut stds = vec![1.0; n];
        for i in 0..n {
            if mask.contains(&i) {
                continue;
            }
            let slice = &values.row(i)[lo..hi];
            let mean = slice.iter().sum::<f64>() / count;
            let var = slice.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / count;
            means[i] = mean;
            if var > 0.0 {
                stds[i] = var.sqrt();
            } else {
                log::warn!("variable {i} is constant over the training range; using std 1");
            }
        }
        Normalizer { means, stds }
    }

    /// Standardize every variable: `(x - mean) / std` per row.
    pub fn apply(&self, values: &Mat) -> Mat {
        let mut out = values.clone();
        for i in 0..out.rows {
            let (m, s) = (self.means[i], self.stds[i]);
            for v in out.row_mut(i) {
                *v = (*v - m) / s;
            }
        }
        out
    }

    /// Undo [`Normalizer::apply`] for one value of one variable.
    pub fn invert_value(&self, var: usize, v: f64) -> f64 {
        v * self.stds[var] + self.means[var]
    }

    /// Undo [`Normalizer::apply`].
    pub fn invert(&self, values: &Mat) -> Mat {
        let mut out = values.clone();
        for i in 0..out.rows {
            for v in out.row_mut(i) {
                *v = self.invert_value(i, *v);
            }
        }
        out
    }
}

/// One forecasting example. `x` is the normalized input window indexed
/// `[variable][step][channel]` (masked rows zeroed by [`apply_mask`]); `y`
/// keeps the raw-unit targets indexed `[variable][horizon step]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

/// All windows cut from one split, plus the dimensions shared by every
/// window and the mask applied to their inputs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WindowSet {
    pub n_vars: usize,
    pub history: usize,
    pub channels: usize,
    pub horizon: usize,
    pub windows: Vec<Window>,
    pub mask: Vec<usize>,
}

impl WindowSet {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    /// Assemble the windows at `indices` (in that order) into one batch.
    pub fn batch(&self, indices: &[usize]) -> WindowBatch {
        let mut x = Vec::with_capacity(indices.len() * self.n_vars * self.history * self.channels);
        let mut y = Vec::with_capacity(indices.len() * self.n_vars * self.horizon);
        for &i in indices {
            x.extend_from_slice(&self.windows[i].x);
            y.extend_from_slice(&self.windows[i].y);
        }
        WindowBatch {
            batch: indices.len(),
            n_vars: self.n_vars,
            history: self.history,
            channels: self.channels,
            horizon: self.horizon,
            x,
            y,
            mask: self.mask.clone(),
        }
    }

    /// Sequential batches of at most `batch_size` windows, covering the set
    /// in order. The tail batch may be smaller.
    pub fn batches(&self, batch_size: usize) -> Vec<WindowBatch> {
        let all: Vec<usize> = (0..self.len()).collect();
        all.chunks(batch_size.max(1))
            .map(|chunk| self.batch(chunk))
            .collect()
    }
}

/// One batch of forecasting windows in flat row-major layout.
///
/// `x` holds the model input: normalized history windows with the masked
/// variables' rows already zeroed, indexed `[sample][variable][step][channel]`.
/// `y` holds the raw-unit targets, indexed `[sample][variable][horizon step]`;
/// losses and metrics compare in raw units, so targets are never normalized.
/// `mask` lists the missing variables, shared by every sample in the batch.
#[derive(Debug, Clone, Default)]
pub struct WindowBatch {
    pub batch: usize,
    pub n_vars: usize,
    pub history: usize,
    pub channels: usize,
    pub horizon: usize,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub mask: Vec<usize>,
}

impl WindowBatch {
    /// `x` and `y` lengths implied by the dimension fields.
    pub fn expected_lens(&self) -> (usize, usize) {
        (
            self.batch * self.n_vars * self.history * self.channels,
            self.batch * self.n_vars * self.horizon,
        )
    }
}

/// Window shape and stride, plus the optional time-of-day input channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WindowingOptions {
    pub history: usize,
    pub horizon: usize,
    pub stride: usize,
    /// Add a second input channel holding the fraction of the day elapsed
    /// at each step, derived from the dataset granularity.
    pub time_of_day: bool,
}

impl Default for WindowingOptions {
    fn default() -> Self {
        WindowingOptions {
            history: DEFAULT_HISTORY,
            horizon: DEFAULT_HORIZON,
            stride: 1,
            time_of_day: false,
        }
    }
}

/// Cut sliding windows from one split range. Inputs come from `normalized`,
/// targets from `raw`; both are full N×T matrices and `range` bounds the
/// slice this split owns, so no window can straddle a split boundary. A
/// range shorter than history + horizon yields an empty set.
pub fn make_windows(
    raw: &Mat,
    normalized: &Mat,
    range: (usize, usize),
    granularity_secs: u64,
    opts: &WindowingOptions,
) -> WindowSet {
    let n = raw.rows;
    let (lo, hi) = range;
    let len = hi - lo;
    let span = opts.history + opts.horizon;
    let channels = if opts.time_of_day { 2 } else { 1 };
    let steps_per_day = (86_400 / granularity_secs.max(1)).max(1) as f64;
    let mut windows = Vec::new();
    let mut start = 0;
    while len >= span && start + span <= len {
        let mut x = Vec::with_capacity(n * opts.history * channels);
        let mut y = Vec::with_capacity(n * opts.horizon);
        for v in 0..n {
            for s in 0..opts.history {
                let t = lo + start + s;
                x.push(normalized[(v, t)]);
                if opts.time_of_day {
                    x.push((t as f64 % steps_per_day) / steps_per_day);
                }
            }
        }
        for v in 0..n {
            for s in 0..opts.horizon {
                y.push(raw[(v, lo + start + opts.history + s)]);
            }
        }
        windows.push(Window { x, y });
        start += opts.stride.max(1);
    }
    WindowSet {
        n_vars: n,
        history: opts.history,
        channels,
        horizon: opts.horizon,
        windows,
        mask: Vec::new(),
    }
}

/// Which variables are missing for an entire run: `indices` is sorted,
/// without duplicates, and reproducible from `(n, rate, seed)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub rate: f64,
    pub seed: u64,
    pub indices: Vec<usize>,
}

impl MaskSpec {
    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<MaskSpec, DataError> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Draw `round(rate * n)` distinct missing variables from a seeded
/// generator. At least one variable must stay normal, so a count that
/// rounds to `n` is clamped to `n - 1` with a warning.
pub fn gen_mask(n: usize, rate: f64, seed: u64) -> Result<MaskSpec, DataError> {
    if !(0.0..1.0).contains(&rate) {
        return Err(DataError::BadRate { rate });
    }
    let mut m = (rate * n as f64).round() as usize;
    if m >= n {
        log::warn!("mask count {m} would cover all {n} variables; clamping to {}", n - 1);
        m = n - 1;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices = rand::seq::index::sample(&mut rng, n, m).into_vec();
    indices.sort_unstable();
    Ok(MaskSpec { rate, seed, indices })
}

/// Zero the input rows of every masked variable in every window. Targets
/// are untouched: masked variables still have to be predicted. Applying the
/// same mask twice is a no-op.
pub fn apply_mask(ws: &mut WindowSet, mask: &MaskSpec) -> Result<(), DataError> {
    for &i in &mask.indices {
        if i >= ws.n_vars {
            return Err(DataError::MaskIndex {
                index: i,
                n: ws.n_vars,
            });
        }
    }
    let row = ws.history * ws.channels;
    for w in &mut ws.windows {
        for &i in &mask.indices {
            w.x[i * row..(i + 1) * row].fill(0.0);
        }
    }
    ws.mask = mask.indices.clone();
    Ok(())
}

/// End-to-end pipeline options.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineOptions {
    pub windowing: WindowingOptions,
    pub ratios: (f64, f64, f64),
    /// Zero the masked variables' raw values before normalization instead
    /// of zeroing their normalized values afterwards. Because masked
    /// variables are excluded from normalizer fitting and assigned
    /// (mean 0, std 1), both conventions produce identical inputs; the flag
    /// exists to make that choice explicit and testable.
    pub zero_raw: bool,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        PipelineOptions {
            windowing: WindowingOptions::default(),
            ratios: (0.7, 0.1, 0.2),
            zero_raw: false,
        }
    }
}

/// Everything one training run consumes: windowed splits with the mask
/// applied, plus the statistics needed to map predictions back to data
/// units.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: WindowSet,
    pub val: WindowSet,
    pub test: WindowSet,
    pub normalizer: Normalizer,
    pub mask: MaskSpec,
    pub split: SplitRanges,
}

/// Split, fit, normalize, window, and mask a dataset in one step.
pub fn prepare(
    ds: &TimeSeriesDataset,
    mask: &MaskSpec,
    opts: &PipelineOptions,
) -> Result<PreparedData, DataError> {
    for &i in &mask.indices {
        if i >= ds.n_vars() {
            return Err(DataError::MaskIndex {
                index: i,
                n: ds.n_vars(),
            });
        }
    }
    let min = opts.windowing.history + opts.windowing.horizon;
    if ds.len() <= min {
        return Err(DataError::TooShort {
            t: ds.len(),
            min,
        });
    }
    let ranges = split(
        ds.len(),
        opts.ratios,
        opts.windowing.history,
        opts.windowing.horizon,
    )?;
    let normalizer = Normalizer::fit(&ds.values, ranges.train, &mask.indices);
    let for_inputs = if opts.zero_raw {
        let mut copy = ds.values.clone();
        for &i in &mask.indices {
            copy.row_mut(i).fill(0.0);
        }
        copy
    } else {
        ds.values.clone()
    };
    let normalized = normalizer.apply(&for_inputs);
    let cut = |range| {
        make_windows(
            &ds.values,
            &normalized,
            range,
            ds.granularity_secs,
            &opts.windowing,
        )
    };
    let mut train = cut(ranges.train);
    let mut val = cut(ranges.val);
    let mut test = cut(ranges.test);
    for ws in [&mut train, &mut val, &mut test] {
        apply_mask(ws, mask)?;
    }
    Ok(PreparedData {
        train,
        val,
        test,
        normalizer,
        mask: mask.clone(),
        split: ranges,
    })
}

/// Generate a spatially correlated synthetic dataset plus its ground-truth
/// graph. Variables sit at random plane coordinates; nearby variables are
/// connected; every variable starts as a random positive mixture of shared
/// daily-scale sinusoids, the mixtures are diffused over the graph so that
/// neighbors end up strongly correlated, each variable then picks up a slow
/// private drift no other variable shares, and Gaussian noise of the given
/// standard deviation is added last. The drift scales with `noise` (twice its
/// standard deviation, vanishing at `noise = 0`), and because it never leaks
/// into neighbors it puts a floor on how well a hidden variable can be
/// reconstructed: errors grow as more of the panel goes dark instead of
/// every variable being a free function of the rest.
pub fn synth_generate(
    n: usize,
    t: usize,
    graph_seed: u64,
    noise: f64,
) -> Result<(TimeSeriesDataset, Graph), DataError> {
    if n < 4 {
        return Err(DataError::SynthTooSmall { n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(graph_seed);
    let unit = Uniform::new(0.0, 1.0);
    let coords: Vec<(f64, f64)> = (0..n)
        .map(|_| (unit.sample(&mut rng), unit.sample(&mut rng)))
        .collect();
    let mut distances = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let dx = coords[i].0 - coords[j].0;
            let dy = coords[i].1 - coords[j].1;
            distances[(i, j)] = (dx * dx + dy * dy).sqrt();
        }
    }
    // Geometric graph: connect pairs closer than a radius chosen to keep the
    // expected degree moderate, then attach any isolated variable to its
    // nearest neighbor so every variable is recoverable from the graph.
    let radius = (2.0 * (n as f64).ln() / (std::f64::consts::PI * n as f64)).sqrt();
    let mut adjacency = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if i != j && distances[(i, j)] < radius {
                adjacency[(i, j)] = 1.0;
            }
        }
    }
    for i in 0..n {
        if adjacency.row(i).iter().sum::<f64>() == 0.0 {
            let nearest = (0..n)
                .filter(|&j| j != i)
                .min_by(|&a, &b| distances[(i, a)].total_cmp(&distances[(i, b)]))
                .expect("n >= 4 guarantees another variable");
            adjacency[(i, nearest)] = 1.0;
            adjacency[(nearest, i)] = 1.0;
        }
    }

    // Shared sinusoid bank with per-variable positive mixture weights.
    const PERIODS: [f64; 3] = [24.0, 48.0, 96.0];
    let weight = Uniform::new(0.5, 1.5);
    let phases: Vec<f64> = (0..PERIODS.len())
        .map(|_| unit.sample(&mut rng) * std::f64::consts::TAU)
        .collect();
    let weights: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..PERIODS.len()).map(|_| weight.sample(&mut rng)).collect())
        .collect();
    let mut values = Mat::zeros(n, t);
    for i in 0..n {
        for s in 0..t {
            let mut v = 0.0;
            for (k, &p) in PERIODS.iter().enumerate() {
                v += weights[i][k] * (std::f64::consts::TAU * s as f64 / p + phases[k]).sin();
            }
            values[(i, s)] = v / PERIODS.len() as f64;
        }
    }

    // Diffuse over the row-normalized adjacency: each round moves every
    // variable halfway towards the mean of its neighbors, which is what
    // makes masked variables recoverable from the ones that still report.
    let degrees: Vec<f64> = (0..n).map(|i| adjacency.row(i).iter().sum()).collect();
    const DIFFUSION_ROUNDS: usize = 3;
    const ALPHA: f64 = 0.5;
    for _ in 0..DIFFUSION_ROUNDS {
        let mut next = Mat::zeros(n, t);
        for i in 0..n {
            for s in 0..t {
                let mut neighbor_mean = 0.0;
                if degrees[i] > 0.0 {
                    for j in 0..n {
                        if adjacency[(i, j)] > 0.0 {
                            neighbor_mean += values[(j, s)];
                        }
                    }
                    neighbor_mean /= degrees[i];
                }
                next[(i, s)] = ALPHA * values[(i, s)] + (1.0 - ALPHA) * neighbor_mean;
            }
        }
        values = next;
    }

    // Slow per-variable random walk (mean-reverting, so the series stay
    // bounded), applied after diffusion so none of it shows up in any
    // neighbor. Its stationary spread is what a variable costs to hide.
    if noise > 0.0 {
        const DRIFT_RHO: f64 = 0.98;
        let drift_std = 2.0 * noise;
        let innovation = Normal::new(0.0, drift_std * (1.0 - DRIFT_RHO * DRIFT_RHO).sqrt())
            .expect("positive std");
        let start = Normal::new(0.0, drift_std).expect("positive std");
        for i in 0..n {
            let mut z = start.sample(&mut rng);
            for s in 0..t {
                values[(i, s)] += z;
                z = DRIFT_RHO * z + innovation.sample(&mut rng);
            }
        }
    }

    if noise > 0.0 {
        let gauss = Normal::new(0.0, noise).expect("positive std");
        for v in values.data.iter_mut() {
            *v += gauss.sample(&mut rng);
        }
    }

    let graph = Graph::new(adjacency)?;
    let ds = TimeSeriesDataset {
        values,
        ids: (0..n).map(|i| format!("v{i}")).collect(),
        granularity_secs: 3600,
        coords: Some(coords),
        distances: Some(distances),
    };
    Ok((ds, graph))
}
