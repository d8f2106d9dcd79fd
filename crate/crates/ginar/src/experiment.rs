//! Experiment orchestration: configuration, multi-seed runs, ablations, the
//! imputation comparison, and report emission.
//!
//! A run follows the published protocol: for each seed, draw the missing
//! set, prepare the data, fit the model, and score the test split; the
//! headline numbers are the 12-horizon average and the mean over seeds.
//! Reports embed a hash of their own configuration (minus the output
//! directory), so a re-run from the embedded config reproduces the report
//! byte for byte.
//!
//! Training runs in 32-bit by default for speed; set `"precision": "f64"`
//! to match the 64-bit mode the verification suite uses.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::baseline::{IaMlpBaseline, MlpBaseline};
use crate::data::{
    self, DataError, PipelineOptions, PreparedData, TimeSeriesDataset,
};
use crate::graph::{
    build_adjacency_distance, build_adjacency_pearson, normalize_predefined, GraphError,
};
use crate::ia::IaError;
use crate::mat::Mat;
use crate::metrics::{horizon_mean, MetricAccumulator, Metrics};
use crate::model::{GinARModel, ModelConfig, ModelError};
use crate::params::{CheckpointError, ParamRegistry};
use crate::snapshot::{export_spatial_snapshot, SnapshotRow};
use crate::tensor::{Real, Tape, TensorError};
use crate::train::{self, EpochRecord, Forecaster, TrainConfig, TrainData, TrainError};

/// RNG stream for parameter initialization, chosen far away from the mask
/// stream (the generator's default) and the per-epoch training streams.
const INIT_STREAM: u64 = u64::MAX;

/// Format marker embedded in every report.
pub const REPORT_FORMAT: &str = "ginar-report-v1";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid experiment config: {msg}")]
    Config { msg: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Ia(#[from] IaError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("report serialization failed: {0}")]
    Json(#[from] serde_json::Error),
}

/// Where the series come from: a generated benchmark or CSV files on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    Synth {
        n: usize,
        t: usize,
        #[serde(default)]
        graph_seed: u64,
        #[serde(default = "default_noise")]
        noise: f64,
    },
    Csv {
        values: PathBuf,
        #[serde(default)]
        coords: Option<PathBuf>,
        #[serde(default)]
        distances: Option<PathBuf>,
        #[serde(default)]
        granularity_secs: Option<u64>,
    },
}

fn default_noise() -> f64 {
    0.1
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2, 3, 4]
}

/// Which model components stay enabled. The predefined and adaptive graphs
/// cannot both be off: the convolution needs at least one message path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationFlags {
    pub ia: bool,
    pub pg: bool,
    pub ag: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags {
            ia: true,
            pg: true,
            ag: true,
        }
    }
}

/// Optional overrides for the rate-keyed hyperparameter presets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ModelOverrides {
    pub hidden: Option<usize>,
    pub embed_dim: Option<usize>,
    pub layers: Option<usize>,
    /// Neighbor budget `k` of the interpolation attention.
    pub neighbor_k: Option<usize>,
    pub dropout: Option<f64>,
    pub decoder_hidden: Option<usize>,
    pub sigmoid_gates: bool,
    /// Score the interpolation attention with a bilinear form instead of
    /// the shared linear scorer.
    pub pairwise_scores: bool,
}

/// Knobs for deriving the predefined graph from CSV datasets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GraphOptions {
    /// Minimum |Pearson r| for an edge when no distance file is given.
    pub pearson_threshold: f64,
    /// Distances at or above this get no edge; `None` keeps every pair.
    pub distance_threshold: Option<f64>,
    /// Gaussian kernel width; `None` uses the off-diagonal distance std.
    pub distance_sigma: Option<f64>,
}

impl Default for GraphOptions {
    fn default() -> Self {
        GraphOptions {
            pearson_threshold: 0.3,
            distance_threshold: None,
            distance_sigma: None,
        }
    }
}

/// Sizes of the imputation-comparison stand-in forecaster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineOptions {
    /// Hidden width of the per-variable MLP.
    pub hidden: usize,
    /// Feature width the interpolation front-end projects into.
    pub ia_features: usize,
}

impl Default for BaselineOptions {
    fn default() -> Self {
        BaselineOptions {
            hidden: 64,
            ia_features: 8,
        }
    }
}

/// Numeric width of the training tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// One experiment: a dataset, a missing rate, seeds, and the training
/// recipe. Every field except `dataset` has a default, so a minimal config
/// is just `{"dataset": {"kind": "synth", "n": 20, "t": 2000}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    /// Fraction of variables whose history is removed, in `[0, 1)`.
    #[serde(default)]
    pub rate: f64,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub model: ModelOverrides,
    #[serde(default)]
    pub ablation: AblationFlags,
    #[serde(default)]
    pub graph: GraphOptions,
    #[serde(default)]
    pub pipeline: PipelineOptions,
    #[serde(default)]
    pub baseline: BaselineOptions,
    #[serde(default)]
    pub precision: Precision,
    /// Default output directory; the CLI's `--out` takes precedence.
    /// Excluded from the config hash and from embedded report configs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

/// CLI-level overrides applied on top of a config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub rate: Option<f64>,
    pub seeds: Option<Vec<u64>>,
    pub no_ia: bool,
    pub no_pg: bool,
    pub no_ag: bool,
    pub out: Option<PathBuf>,
}

/// Hidden width, embedding width, and encoder depth keyed by the nearest
/// published missing rate (ties go to the lower rate).
pub const RATE_PRESETS: [(f64, usize, usize, usize); 4] = [
    (0.25, 32, 16, 2),
    (0.50, 32, 16, 2),
    (0.75, 16, 8, 3),
    (0.90, 16, 8, 3),
];

/// Select `(hidden, embed_dim, layers)` for a missing rate.
pub fn rate_preset(rate: f64) -> (usize, usize, usize) {
    let mut best = &RATE_PRESETS[0];
    for preset in &RATE_PRESETS[1..] {
        if (rate - preset.0).abs() < (rate - best.0).abs() {
            best = preset;
        }
    }
    (best.1, best.2, best.3)
}

impl ExperimentConfig {
    /// Read and validate a JSON config file.
    pub fn from_file(path: &Path) -> Result<ExperimentConfig, ExperimentError> {
        let text = fs::read_to_string(path)?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.seeds.is_empty() {
            return Err(ExperimentError::Config {
                msg: "seeds must not be empty".into(),
            });
        }
        if !(0.0..1.0).contains(&self.rate) {
            return Err(ExperimentError::Config {
                msg: format!("missing rate {} outside [0, 1)", self.rate),
            });
        }
        if !self.ablation.pg && !self.ablation.ag {
            return Err(ExperimentError::Config {
                msg: "predefined and adaptive graphs cannot both be disabled".into(),
            });
        }
        if self.baseline.hidden == 0 || self.baseline.ia_features == 0 {
            return Err(ExperimentError::Config {
                msg: "baseline sizes must be positive".into(),
            });
        }
        self.train.validate()?;
        Ok(())
    }

    /// Apply CLI overrides. Call [`validate`](Self::validate) afterwards.
    pub fn apply_overrides(&mut self, o: &Overrides) {
        if let Some(r) = o.rate {
            self.rate = r;
        }
        if let Some(s) = &o.seeds {
            self.seeds = s.clone();
        }
        if o.no_ia {
            self.ablation.ia = false;
        }
        if o.no_pg {
            self.ablation.pg = false;
        }
        if o.no_ag {
            self.ablation.ag = false;
        }
        if let Some(p) = &o.out {
            self.out_dir = Some(p.clone());
        }
    }

    /// The config as embedded in reports: everything except `out_dir`,
    /// which only says where files land and must not affect their bytes.
    pub fn canonical(&self) -> ExperimentConfig {
        let mut c = self.clone();
        c.out_dir = None;
        c
    }

    /// SHA-256 over the canonical JSON rendering.
    pub fn hash(&self) -> Result<String, ExperimentError> {
        let text = serde_json::to_string(&self.canonical())?;
        let mut hasher = Sha256::new();
        hasher.update(text.as_bytes());
        Ok(format!("{:x}", hasher.finalize()))
    }

    /// Resolve the model configuration: rate-keyed presets, then explicit
    /// overrides, then the ablation flags.
    pub fn model_config(&self, n_vars: usize, channels: usize) -> ModelConfig {
        let (hidden, embed, layers) = rate_preset(self.rate);
        let hidden = self.model.hidden.unwrap_or(hidden);
        let embed = self.model.embed_dim.unwrap_or(embed);
        let layers = self.model.layers.unwrap_or(layers);
        let mut mc = ModelConfig::new(
            n_vars,
            hidden,
            embed,
            layers,
            self.pipeline.windowing.horizon,
        );
        mc.input_channels = channels;
        if let Some(k) = self.model.neighbor_k {
            mc.neighbor_k = k;
        }
        if let Some(d) = self.model.dropout {
            mc.dropout = d;
        }
        if let Some(dh) = self.model.decoder_hidden {
            mc.decoder_hidden = dh;
        }
        mc.sigmoid_gates = self.model.sigmoid_gates;
        mc.pairwise_scores = self.model.pairwise_scores;
        mc.use_ia = self.ablation.ia;
        mc.use_predefined = self.ablation.pg;
        mc.use_adaptive = self.ablation.ag;
        mc
    }
}

/// A dataset plus the recipe for its predefined graph.
pub struct LoadedDataset {
    pub ds: TimeSeriesDataset,
    predefined: PredefinedBase,
}

enum PredefinedBase {
    /// Already-normalized graph, independent of the mask (synthetic ground
    /// truth or a distance kernel).
    Fixed(Mat),
    /// Built per seed from training-split correlations, excluding masked
    /// variables so no masked data leaks into the graph.
    Pearson,
}

fn offdiag_std(d: &Mat) -> f64 {
    let mut vals = Vec::new();
    for i in 0..d.rows {
        for j in 0..d.cols {
            if i != j {
                vals.push(d[(i, j)]);
            }
        }
    }
    if vals.is_empty() {
        return 1.0;
    }
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
    let std = var.sqrt();
    if std > 0.0 && std.is_finite() {
        std
    } else {
        1.0
    }
}

/// Materialize the dataset named by the spec.
pub fn load_experiment_dataset(
    spec: &DatasetSpec,
    graph: &GraphOptions,
) -> Result<LoadedDataset, ExperimentError> {
    match spec {
        DatasetSpec::Synth {
            n,
            t,
            graph_seed,
            noise,
        } => {
            let (ds, g) = data::synth_generate(*n, *t, *graph_seed, *noise)?;
            Ok(LoadedDataset {
                ds,
                predefined: PredefinedBase::Fixed(normalize_predefined(&g)),
            })
        }
        DatasetSpec::Csv {
            values,
            coords,
            distances,
            granularity_secs,
        } => {
            let mut ds = data::load_dataset(values)?;
            if let Some(g) = granularity_secs {
                ds.granularity_secs = *g;
            }
            if let Some(p) = coords {
                ds.coords = Some(data::load_coords(p, ds.n_vars())?);
            }
            let predefined = match distances {
                Some(p) => {
                    let d = data::load_distances(p, ds.n_vars())?;
                    let sigma = graph.distance_sigma.unwrap_or_else(|| offdiag_std(&d));
                    let threshold = graph.distance_threshold.unwrap_or(f64::MAX);
                    let g = build_adjacency_distance(&d, threshold, sigma)?;
                    ds.distances = Some(d);
                    PredefinedBase::Fixed(normalize_predefined(&g))
                }
                None => PredefinedBase::Pearson,
            };
            Ok(LoadedDataset { ds, predefined })
        }
    }
}

impl LoadedDataset {
    /// The normalized predefined graph for one seed's masked view.
    fn predefined_for_seed(
        &self,
        cfg: &ExperimentConfig,
        prep: &PreparedData,
    ) -> Result<Mat, ExperimentError> {
        match &self.predefined {
            PredefinedBase::Fixed(m) => Ok(m.clone()),
            PredefinedBase::Pearson => {
                let n = self.ds.n_vars();
                let (lo, hi) = prep.split.train;
                let mut series = Mat::zeros(n, hi - lo);
                for v in 0..n {
                    for t in lo..hi {
                        series[(v, t - lo)] = self.ds.values[(v, t)];
                    }
                }
                let g = build_adjacency_pearson(
                    &series,
                    cfg.graph.pearson_threshold,
                    &prep.mask.indices,
                )?;
                Ok(normalize_predefined(&g))
            }
        }
    }
}

/// Test metrics for one variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableReport {
    pub id: String,
    pub masked: bool,
    pub metrics: Metrics,
}

/// One seed's test results: headline numbers plus the per-horizon and
/// per-variable breakdowns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub best_epoch: Option<usize>,
    /// Indices of the variables whose history was removed.
    pub mask: Vec<usize>,
    /// Mean of the per-horizon metrics: the headline convention.
    pub overall: Metrics,
    pub per_horizon: Vec<Metrics>,
    pub per_variable: Vec<VariableReport>,
    /// Aggregate over masked variables; absent when the mask is empty.
    pub masked_group: Option<Metrics>,
    pub normal_group: Option<Metrics>,
}

/// Mean and population standard deviation of the per-seed headline
/// metrics. MAPE aggregates over the seeds where it is defined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: Metrics,
    pub std: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seeds: Vec<SeedReport>,
    pub aggregate: Aggregate,
}

/// The self-describing result of [`run_experiment`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub format: String,
    pub kind: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub summary: RunSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationVariant {
    pub name: String,
    pub flags: AblationFlags,
    pub summary: RunSummary,
}

/// The result of [`run_ablation`]: the full model and the three single
/// component removals, paired over the same seeds and masks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub format: String,
    pub kind: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub variants: Vec<AblationVariant>,
}

/// One seed's paired imputation comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImputeSeed {
    pub seed: u64,
    pub mask: Vec<usize>,
    pub zero_fill: Metrics,
    pub ia: Metrics,
}

/// The result of [`run_impute_eval`]: the same MLP forecaster on
/// zero-filled inputs versus behind the interpolation front-end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImputeReport {
    pub format: String,
    pub kind: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub seeds: Vec<ImputeSeed>,
    pub zero_fill: Aggregate,
    pub ia: Aggregate,
}

/// The result of [`run_eval`]: a stored checkpoint scored on the test
/// split it was trained against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format: String,
    pub kind: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub result: SeedReport,
}

fn aggregate_metrics(overall: &[Metrics]) -> Aggregate {
    let n = overall.len() as f64;
    let mean_of = |f: &dyn Fn(&Metrics) -> f64| overall.iter().map(f).sum::<f64>() / n;
    let std_of = |f: &dyn Fn(&Metrics) -> f64, mean: f64| {
        (overall.iter().map(|m| (f(m) - mean) * (f(m) - mean)).sum::<f64>() / n).sqrt()
    };
    let mae = mean_of(&|m| m.mae);
    let rmse = mean_of(&|m| m.rmse);
    let mapes: Vec<f64> = overall.iter().filter_map(|m| m.mape).collect();
    let (mape_mean, mape_std) = if mapes.is_empty() {
        (None, None)
    } else {
        let k = mapes.len() as f64;
        let mean = mapes.iter().sum::<f64>() / k;
        let var = mapes.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / k;
        (Some(mean), Some(var.sqrt()))
    };
    Aggregate {
        mean: Metrics {
            mae,
            rmse,
            mape: mape_mean,
        },
        std: Metrics {
            mae: std_of(&|m| m.mae, mae),
            rmse: std_of(&|m| m.rmse, rmse),
            mape: mape_std,
        },
    }
}

fn summarize(seeds: Vec<SeedReport>) -> RunSummary {
    let overall: Vec<Metrics> = seeds.iter().map(|s| s.overall).collect();
    RunSummary {
        aggregate: aggregate_metrics(&overall),
        seeds,
    }
}

/// Everything [`evaluate_test`] extracts from one trained forecaster.
struct TestEval {
    overall: Metrics,
    per_horizon: Vec<Metrics>,
    per_variable: Vec<VariableReport>,
    masked_group: Option<Metrics>,
    normal_group: Option<Metrics>,
    snapshot: Vec<SnapshotRow>,
}

/// Score a forecaster on the prepared test split, de-normalized, with the
/// per-horizon and per-variable breakdowns. Also captures the snapshot rows
/// for the first test window at the final horizon.
fn evaluate_test<F: Real, M: Forecaster<F>>(
    tape: &mut Tape<F>,
    model: &M,
    prep: &PreparedData,
    ds: &TimeSeriesDataset,
    batch_size: usize,
) -> Result<TestEval, ExperimentError> {
    let preds = train::predict(
        tape,
        model,
        &prep.test,
        &prep.normalizer.stds,
        &prep.normalizer.means,
        batch_size,
    )?;
    let n = prep.test.n_vars;
    let l = prep.test.horizon;
    let mut by_horizon: Vec<MetricAccumulator> =
        (0..l).map(|_| MetricAccumulator::new()).collect();
    let mut by_variable: Vec<MetricAccumulator> =
        (0..n).map(|_| MetricAccumulator::new()).collect();
    for (pred, batch) in &preds {
        for b in 0..batch.batch {
            for (v, var_acc) in by_variable.iter_mut().enumerate() {
                let base = (b * n + v) * l;
                for (h, hor_acc) in by_horizon.iter_mut().enumerate() {
                    let i = base + h;
                    hor_acc.observe(pred[i], batch.y[i]);
                    var_acc.observe(pred[i], batch.y[i]);
                }
            }
        }
    }
    let per_horizon: Vec<Metrics> = by_horizon
        .iter()
        .map(|a| a.metrics().expect("test split has at least one window"))
        .collect();
    let overall = horizon_mean(&per_horizon).expect("horizon list is non-empty");
    let mut masked_acc = MetricAccumulator::new();
    let mut normal_acc = MetricAccumulator::new();
    let mut per_variable = Vec::with_capacity(n);
    for (v, var_acc) in by_variable.iter().enumerate() {
        let masked = prep.mask.indices.binary_search(&v).is_ok();
        if masked {
            masked_acc.merge(var_acc);
        } else {
            normal_acc.merge(var_acc);
        }
        per_variable.push(VariableReport {
            id: ds.ids[v].clone(),
            masked,
            metrics: var_acc.metrics().expect("test split has at least one window"),
        });
    }

    let mut snapshot = Vec::with_capacity(n);
    if let Some((pred, batch)) = preds.first() {
        let h_idx = l - 1;
        let hist = prep.test.history;
        let ch = prep.test.channels;
        let first = &prep.test.windows[0];
        for v in 0..n {
            let x_last = first.x[v * hist * ch + (hist - 1) * ch];
            snapshot.push(SnapshotRow {
                id: ds.ids[v].clone(),
                coord: ds.coords.as_ref().map(|c| c[v]),
                input: prep.normalizer.invert_value(v, x_last),
                predicted: pred[v * l + h_idx],
                actual: batch.y[v * l + h_idx],
                masked: prep.mask.indices.binary_search(&v).is_ok(),
            });
        }
    }

    Ok(TestEval {
        overall,
        per_horizon,
        per_variable,
        masked_group: masked_acc.metrics(),
        normal_group: normal_acc.metrics(),
        snapshot,
    })
}

/// Per-seed artifacts handed back to the orchestrators.
struct SeedRun {
    report: SeedReport,
    history: Vec<EpochRecord>,
    snapshot: Vec<SnapshotRow>,
}

/// Train and score one GinAR instance for one seed.
fn run_seed<F: Real>(
    cfg: &ExperimentConfig,
    loaded: &LoadedDataset,
    flags: AblationFlags,
    seed: u64,
    checkpoint: Option<&Path>,
) -> Result<SeedRun, ExperimentError> {
    let ds = &loaded.ds;
    let mask = data::gen_mask(ds.n_vars(), cfg.rate, seed)?;
    let prep = data::prepare(ds, &mask, &cfg.pipeline)?;

    let mut mc = cfg.model_config(ds.n_vars(), prep.train.channels);
    mc.use_ia = flags.ia;
    mc.use_predefined = flags.pg;
    mc.use_adaptive = flags.ag;
    let predefined = if flags.pg {
        Some(loaded.predefined_for_seed(cfg, &prep)?)
    } else {
        None
    };

    let mut tape: Tape<F> = Tape::new();
    let mut params = ParamRegistry::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(INIT_STREAM);
    let model = GinARModel::init(&mut tape, &mut params, &mut rng, &mc, predefined.as_ref())?;

    let mut tcfg = cfg.train.clone();
    tcfg.seed = seed;
    let train_data = TrainData::from_prepared(&prep);
    let fit = train::fit(&mut tape, &model, &params, &train_data, &tcfg)?;
    if let Some(path) = checkpoint {
        params.save_checkpoint(&tape, path)?;
    }

    let eval = evaluate_test(&mut tape, &model, &prep, ds, tcfg.batch_size)?;
    log::info!(
        "seed {seed}: test mae {:.4}, rmse {:.4}{}",
        eval.overall.mae,
        eval.overall.rmse,
        fit.best_epoch
            .map(|e| format!(", best epoch {e}"))
            .unwrap_or_default()
    );
    Ok(SeedRun {
        report: SeedReport {
            seed,
            best_epoch: fit.best_epoch,
            mask: mask.indices,
            overall: eval.overall,
            per_horizon: eval.per_horizon,
            per_variable: eval.per_variable,
            masked_group: eval.masked_group,
            normal_group: eval.normal_group,
        },
        history: fit.history,
        snapshot: eval.snapshot,
    })
}

fn cell(v: Option<f64>) -> String {
    match v {
        Some(v) => v.to_string(),
        None => "undefined".into(),
    }
}

fn report_csv(summary: &RunSummary) -> String {
    let mut out = String::from("seed,mae,rmse,mape,mae_std,rmse_std,mape_std\n");
    for s in &summary.seeds {
        out.push_str(&format!(
            "{},{},{},{},,,\n",
            s.seed,
            s.overall.mae,
            s.overall.rmse,
            s.overall.mape_cell()
        ));
    }
    let a = &summary.aggregate;
    out.push_str(&format!(
        "mean,{},{},{},{},{},{}\n",
        a.mean.mae,
        a.mean.rmse,
        a.mean.mape_cell(),
        a.std.mae,
        a.std.rmse,
        cell(a.std.mape)
    ));
    out
}

fn multi_history_csv(runs: &[(u64, &[EpochRecord])]) -> String {
    let mut out = String::from("seed,epoch,lr,train_loss,val_mae,val_rmse,val_mape\n");
    for (seed, history) in runs {
        for r in *history {
            out.push_str(&format!(
                "{seed},{},{},{},{},{},{}\n",
                r.epoch,
                r.lr,
                r.train_loss,
                r.val.mae,
                r.val.rmse,
                r.val.mape_cell()
            ));
        }
    }
    out
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), ExperimentError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn checkpoint_name(seed: u64) -> String {
    format!("checkpoint_seed{seed}.json")
}

fn run_experiment_typed<F: Real>(
    cfg: &ExperimentConfig,
    out: &Path,
) -> Result<MetricsReport, ExperimentError> {
    let loaded = load_experiment_dataset(&cfg.dataset, &cfg.graph)?;
    let mut seeds = Vec::new();
    let mut histories = Vec::new();
    let mut snapshots = Vec::new();
    for &seed in &cfg.seeds {
        let ckpt = out.join(checkpoint_name(seed));
        let run = run_seed::<F>(cfg, &loaded, cfg.ablation, seed, Some(&ckpt))?;
        histories.push((seed, run.history));
        snapshots.push(run.snapshot);
        seeds.push(run.report);
    }

    let best = seeds
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| a.overall.mae.total_cmp(&b.overall.mae))
        .map(|(i, _)| i)
        .expect("validated config has at least one seed");
    fs::copy(
        out.join(checkpoint_name(seeds[best].seed)),
        out.join("checkpoint.json"),
    )?;
    export_spatial_snapshot(&snapshots[best], out)?;

    let history_rows: Vec<(u64, &[EpochRecord])> = histories
        .iter()
        .map(|(s, h)| (*s, h.as_slice()))
        .collect();
    fs::write(out.join("history.csv"), multi_history_csv(&history_rows))?;

    let report = MetricsReport {
        format: REPORT_FORMAT.into(),
        kind: "experiment".into(),
        config_hash: cfg.hash()?,
        config: cfg.canonical(),
        summary: summarize(seeds),
    };
    fs::write(out.join("report.csv"), report_csv(&report.summary))?;
    write_json(&report, &out.join("report.json"))?;
    Ok(report)
}

/// Train on every seed, score the test split, and write the full artifact
/// set (`report.json`, `report.csv`, `history.csv`, per-seed checkpoints
/// plus `checkpoint.json` for the best seed, and the spatial snapshot)
/// into `out`.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    out: &Path,
) -> Result<MetricsReport, ExperimentError> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    match cfg.precision {
        Precision::F32 => run_experiment_typed::<f32>(cfg, out),
        Precision::F64 => run_experiment_typed::<f64>(cfg, out),
    }
}

fn ablation_csv(report: &AblationReport) -> String {
    let mut out = String::from("variant,mae,rmse,mape,mae_std,rmse_std,mape_std\n");
    for v in &report.variants {
        let a = &v.summary.aggregate;
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            v.name,
            a.mean.mae,
            a.mean.rmse,
            a.mean.mape_cell(),
            a.std.mae,
            a.std.rmse,
            cell(a.std.mape)
        ));
    }
    out
}

fn run_ablation_typed<F: Real>(
    cfg: &ExperimentConfig,
    out: &Path,
) -> Result<AblationReport, ExperimentError> {
    let loaded = load_experiment_dataset(&cfg.dataset, &cfg.graph)?;
    let full = AblationFlags::default();
    let variants_spec = [
        ("full", full),
        ("no_ia", AblationFlags { ia: false, ..full }),
        ("no_pg", AblationFlags { pg: false, ..full }),
        ("no_ag", AblationFlags { ag: false, ..full }),
    ];
    let mut variants = Vec::new();
    for (name, flags) in variants_spec {
        log::info!("ablation variant {name}");
        let mut seeds = Vec::new();
        for &seed in &cfg.seeds {
            seeds.push(run_seed::<F>(cfg, &loaded, flags, seed, None)?.report);
        }
        variants.push(AblationVariant {
            name: name.into(),
            flags,
            summary: summarize(seeds),
        });
    }
    let report = AblationReport {
        format: REPORT_FORMAT.into(),
        kind: "ablation".into(),
        config_hash: cfg.hash()?,
        config: cfg.canonical(),
        variants,
    };
    fs::write(out.join("ablation.csv"), ablation_csv(&report))?;
    write_json(&report, &out.join("ablation.json"))?;
    Ok(report)
}

/// Run the full model and the three single-component removals over the
/// same seeds. Masks and shuffles derive only from the seed, so every
/// variant sees identical data: the comparison is paired.
pub fn run_ablation(cfg: &ExperimentConfig, out: &Path) -> Result<AblationReport, ExperimentError> {
    cfg.validate()?;
    if cfg.ablation != AblationFlags::default() {
        return Err(ExperimentError::Config {
            msg: "ablation runs start from the full model; drop the ablation overrides".into(),
        });
    }
    fs::create_dir_all(out)?;
    match cfg.precision {
        Precision::F32 => run_ablation_typed::<f32>(cfg, out),
        Precision::F64 => run_ablation_typed::<f64>(cfg, out),
    }
}

/// Train and score one imputation-comparison variant for one seed.
fn run_impute_variant<F: Real>(
    cfg: &ExperimentConfig,
    prep: &PreparedData,
    ds: &TimeSeriesDataset,
    seed: u64,
    with_ia: bool,
) -> Result<Metrics, ExperimentError> {
    let mut tape: Tape<F> = Tape::new();
    let mut params = ParamRegistry::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(INIT_STREAM);
    let train_set = &prep.train;
    let (_, embed, _) = rate_preset(cfg.rate);
    let embed = cfg.model.embed_dim.unwrap_or(embed);
    let k = cfg
        .model
        .neighbor_k
        .unwrap_or_else(|| 10.min(ds.n_vars().saturating_sub(1)).max(1));

    let mut tcfg = cfg.train.clone();
    tcfg.seed = seed;
    let train_data = TrainData::from_prepared(prep);
    let eval = if with_ia {
        let model = IaMlpBaseline::init(
            &mut tape,
            &mut params,
            &mut rng,
            train_set.n_vars,
            train_set.history,
            train_set.channels,
            cfg.baseline.ia_features,
            embed,
            k,
            cfg.baseline.hidden,
            train_set.horizon,
        )?;
        train::fit(&mut tape, &model, &params, &train_data, &tcfg)?;
        evaluate_test(&mut tape, &model, prep, ds, tcfg.batch_size)?
    } else {
        let model = MlpBaseline::init(
            &mut tape,
            &mut params,
            &mut rng,
            train_set.history,
            train_set.channels,
            cfg.baseline.hidden,
            train_set.horizon,
        )?;
        train::fit(&mut tape, &model, &params, &train_data, &tcfg)?;
        evaluate_test(&mut tape, &model, prep, ds, tcfg.batch_size)?
    };
    Ok(eval.overall)
}

fn impute_csv(report: &ImputeReport) -> String {
    let mut out =
        String::from("rate,mae_zero_fill,mae_ia,rmse_zero_fill,rmse_ia,mape_zero_fill,mape_ia\n");
    out.push_str(&format!(
        "{},{},{},{},{},{},{}\n",
        report.config.rate,
        report.zero_fill.mean.mae,
        report.ia.mean.mae,
        report.zero_fill.mean.rmse,
        report.ia.mean.rmse,
        report.zero_fill.mean.mape_cell(),
        report.ia.mean.mape_cell()
    ));
    out
}

fn run_impute_eval_typed<F: Real>(
    cfg: &ExperimentConfig,
    out: &Path,
) -> Result<ImputeReport, ExperimentError> {
    let loaded = load_experiment_dataset(&cfg.dataset, &cfg.graph)?;
    let ds = &loaded.ds;
    let mut seeds = Vec::new();
    for &seed in &cfg.seeds {
        let mask = data::gen_mask(ds.n_vars(), cfg.rate, seed)?;
        let prep = data::prepare(ds, &mask, &cfg.pipeline)?;
        let zero_fill = run_impute_variant::<F>(cfg, &prep, ds, seed, false)?;
        let ia = run_impute_variant::<F>(cfg, &prep, ds, seed, true)?;
        log::info!(
            "seed {seed}: zero-fill mae {:.4}, ia mae {:.4}",
            zero_fill.mae,
            ia.mae
        );
        seeds.push(ImputeSeed {
            seed,
            mask: mask.indices,
            zero_fill,
            ia,
        });
    }
    let zero_overall: Vec<Metrics> = seeds.iter().map(|s| s.zero_fill).collect();
    let ia_overall: Vec<Metrics> = seeds.iter().map(|s| s.ia).collect();
    let report = ImputeReport {
        format: REPORT_FORMAT.into(),
        kind: "impute-eval".into(),
        config_hash: cfg.hash()?,
        config: cfg.canonical(),
        seeds,
        zero_fill: aggregate_metrics(&zero_overall),
        ia: aggregate_metrics(&ia_overall),
    };
    fs::write(out.join("impute.csv"), impute_csv(&report))?;
    write_json(&report, &out.join("impute.json"))?;
    Ok(report)
}

/// Compare the per-variable MLP stand-in on zero-filled inputs against the
/// same MLP behind the interpolation front-end, paired over seeds and
/// masks. This isolates the value of learned recovery from the forecaster.
pub fn run_impute_eval(
    cfg: &ExperimentConfig,
    out: &Path,
) -> Result<ImputeReport, ExperimentError> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    match cfg.precision {
        Precision::F32 => run_impute_eval_typed::<f32>(cfg, out),
        Precision::F64 => run_impute_eval_typed::<f64>(cfg, out),
    }
}

fn run_eval_typed<F: Real>(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    seed: u64,
    out: Option<&Path>,
) -> Result<EvalReport, ExperimentError> {
    let loaded = load_experiment_dataset(&cfg.dataset, &cfg.graph)?;
    let ds = &loaded.ds;
    let mask = data::gen_mask(ds.n_vars(), cfg.rate, seed)?;
    let prep = data::prepare(ds, &mask, &cfg.pipeline)?;
    let mut mc = cfg.model_config(ds.n_vars(), prep.train.channels);
    mc.use_ia = cfg.ablation.ia;
    mc.use_predefined = cfg.ablation.pg;
    mc.use_adaptive = cfg.ablation.ag;
    let predefined = if cfg.ablation.pg {
        Some(loaded.predefined_for_seed(cfg, &prep)?)
    } else {
        None
    };
    let mut tape: Tape<F> = Tape::new();
    let mut params = ParamRegistry::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(INIT_STREAM);
    let model = GinARModel::init(&mut tape, &mut params, &mut rng, &mc, predefined.as_ref())?;
    params.load_checkpoint(&mut tape, checkpoint)?;
    let eval = evaluate_test(&mut tape, &model, &prep, ds, cfg.train.batch_size)?;
    let report = EvalReport {
        format: REPORT_FORMAT.into(),
        kind: "eval".into(),
        config_hash: cfg.hash()?,
        config: cfg.canonical(),
        result: SeedReport {
            seed,
            best_epoch: None,
            mask: mask.indices,
            overall: eval.overall,
            per_horizon: eval.per_horizon,
            per_variable: eval.per_variable,
            masked_group: eval.masked_group,
            normal_group: eval.normal_group,
        },
    };
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        write_json(&report, &dir.join("eval.json"))?;
    }
    Ok(report)
}

/// Score a stored checkpoint on the test split of the configured dataset,
/// reconstructing the mask and model exactly as `run_experiment` built
/// them for `seed`. Mismatched configs surface as checkpoint name or shape
/// errors.
pub fn run_eval(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    seed: u64,
    out: Option<&Path>,
) -> Result<EvalReport, ExperimentError> {
    cfg.validate()?;
    match cfg.precision {
        Precision::F32 => run_eval_typed::<f32>(cfg, checkpoint, seed, out),
        Precision::F64 => run_eval_typed::<f64>(cfg, checkpoint, seed, out),
    }
}

/// Generate the synthetic benchmark named by the config and save it as
/// CSV files (`values.csv`, `coords.csv`, `distances.csv`) that a `csv`
/// dataset spec can read back.
pub fn export_synth(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>, ExperimentError> {
    let DatasetSpec::Synth {
        n,
        t,
        graph_seed,
        noise,
    } = cfg.dataset
    else {
        return Err(ExperimentError::Config {
            msg: "synth export needs a synth dataset spec".into(),
        });
    };
    let (ds, _) = data::synth_generate(n, t, graph_seed, noise)?;
    fs::create_dir_all(out)?;
    let values = out.join("values.csv");
    data::save_dataset(&ds, &values)?;
    let coords = out.join("coords.csv");
    let mut text = String::new();
    for (x, y) in ds.coords.as_ref().expect("synthetic datasets have coordinates") {
        text.push_str(&format!("{x},{y}\n"));
    }
    fs::write(&coords, text)?;
    let distances = out.join("distances.csv");
    let d = ds.distances.as_ref().expect("synthetic datasets have distances");
    let mut text = String::new();
    for i in 0..d.rows {
        let row: Vec<String> = (0..d.cols).map(|j| d[(i, j)].to_string()).collect();
        text.push_str(&row.join(","));
        text.push('\n');
    }
    fs::write(&distances, text)?;
    Ok(vec![values, coords, distances])
}
