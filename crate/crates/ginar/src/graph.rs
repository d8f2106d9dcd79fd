//! Dependency graphs between variables.
//!
//! Two static constructions produce a prior graph from data that exists
//! before training: a thresholded Gaussian kernel over pairwise distances
//! (when sensor geometry is known) and absolute Pearson correlation on the
//! training split (when it is not). [`normalize_predefined`] turns either
//! into the self-looped, symmetrically normalized operator the model
//! multiplies by.
//!
//! The adaptive graph is different: it is *learned*, rebuilt on the tape at
//! every cell step from the current feature matrix fused with a trainable
//! node embedding, so the propagation structure can follow the data even
//! where the prior graph is wrong or empty.

use crate::mat::Mat;
use crate::params::ParamRegistry;
use crate::tensor::{Real, Tape, Tensor, TensorError};
use rand::Rng;

#[derive(Debug, thiserror::Error)]
pub enum GraphError {
    #[error("adjacency must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("adjacency weight at ({i}, {j}) is negative: {value}")]
    NegativeWeight { i: usize, j: usize, value: f64 },
    #[error("adjacency diagonal at {i} must be zero, got {value}")]
    NonZeroDiagonal { i: usize, value: f64 },
    #[error("distance at ({i}, {j}) is negative: {value}")]
    NegativeDistance { i: usize, j: usize, value: f64 },
    #[error("distance table is asymmetric at ({i}, {j}): {a} vs {b}")]
    Asymmetric { i: usize, j: usize, a: f64, b: f64 },
    #[error("{what} contains a non-finite value")]
    NonFinite { what: &'static str },
    #[error("kernel width must be positive, got {sigma}")]
    BadSigma { sigma: f64 },
    #[error("excluded variable index {index} out of range for {n} variables")]
    BadExclude { index: usize, n: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Static variable-dependency graph: nonnegative symmetric weights with a
/// zero diagonal.
#[derive(Debug, Clone)]
pub struct Graph {
    pub adjacency: Mat,
}

impl Graph {
    /// Validate and wrap an adjacency matrix.
    pub fn new(adjacency: Mat) -> Result<Self, GraphError> {
        if !adjacency.is_square() {
            return Err(GraphError::NotSquare {
                rows: adjacency.rows,
                cols: adjacency.cols,
            });
        }
        if adjacency.data.iter().any(|v| !v.is_finite()) {
            return Err(GraphError::NonFinite { what: "adjacency" });
        }
        for i in 0..adjacency.rows {
            let d = adjacency[(i, i)];
            if d != 0.0 {
                return Err(GraphError::NonZeroDiagonal { i, value: d });
            }
            for j in 0..adjacency.cols {
                let v = adjacency[(i, j)];
                if v < 0.0 {
                    return Err(GraphError::NegativeWeight { i, j, value: v });
                }
            }
        }
        Ok(Graph { adjacency })
    }

    pub fn n(&self) -> usize {
        self.adjacency.rows
    }
}

/// Gaussian kernel over pairwise distances: `exp(-d^2 / sigma^2)` for pairs
/// strictly below `threshold`, zero otherwise. `threshold` and `sigma` may be
/// infinite (keep every pair / flatten the kernel towards one).
pub fn build_adjacency_distance(
    distances: &Mat,
    threshold: f64,
    sigma: f64,
) -> Result<Graph, GraphError> {
    if !distances.is_square() {
        return Err(GraphError::NotSquare {
            rows: distances.rows,
            cols: distances.cols,
        });
    }
    if distances.data.iter().any(|v| !v.is_finite()) {
        return Err(GraphError::NonFinite { what: "distances" });
    }
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(GraphError::BadSigma { sigma });
    }
    let n = distances.rows;
    for i in 0..n {
        for j in 0..n {
            let d = distances[(i, j)];
            if d < 0.0 {
                return Err(GraphError::NegativeDistance { i, j, value: d });
            }
            let dt = distances[(j, i)];
            if (d - dt).abs() > 1e-6 * d.abs().max(1.0) {
                return Err(GraphError::Asymmetric { i, j, a: d, b: dt });
            }
        }
    }
    let mut adj = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let d = distances[(i, j)];
            if d < threshold {
                adj[(i, j)] = (-(d * d) / (sigma * sigma)).exp();
            }
        }
    }
    Graph::new(adj)
}

/// Absolute Pearson correlation on the given series (variables in rows,
/// time in columns), usually the training split. Pairs with `|rho|` below
/// `threshold` get weight zero, as do all pairs touching an excluded
/// (masked) variable and all pairs involving a constant series.
pub fn build_adjacency_pearson(
    series: &Mat,
    threshold: f64,
    exclude: &[usize],
) -> Result<Graph, GraphError> {
    let n = series.rows;
    let t = series.cols;
    if series.data.iter().any(|v| !v.is_finite()) {
        return Err(GraphError::NonFinite { what: "series" });
    }
    for &e in exclude {
        if e >= n {
            return Err(GraphError::BadExclude { index: e, n });
        }
    }
    let mut excluded = vec![false; n];
    for &e in exclude {
        excluded[e] = true;
    }
    // Per-variable mean and centered norm; a zero norm marks a constant
    // series, which correlates with nothing.
    let mut means = vec![0.0; n];
    let mut norms = vec![0.0; n];
    for i in 0..n {
        let row = series.row(i);
        means[i] = row.iter().sum::<f64>() / t.max(1) as f64;
        norms[i] = row.iter().map(|v| (v - means[i]).powi(2)).sum::<f64>().sqrt();
    }
    let mut adj = Mat::zeros(n, n);
    for i in 0..n {
        if excluded[i] || norms[i] == 0.0 {
            continue;
        }
        for j in (i + 1)..n {
            if excluded[j] || norms[j] == 0.0 {
                continue;
            }
            let mut dot = 0.0;
            for k in 0..t {
                dot += (series[(i, k)] - means[i]) * (series[(j, k)] - means[j]);
            }
            let rho = (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0);
            let w = rho.abs();
            if w >= threshold {
                adj[(i, j)] = w;
                adj[(j, i)] = w;
            }
        }
    }
    Graph::new(adj)
}

/// Self-looped symmetric normalization: `I + D^{-1/2} A D^{-1/2}` with `D`
/// the diagonal of row sums. Zero-degree rows take `D^{-1/2} = 0`, so an
/// isolated variable keeps only its self-loop.
pub fn normalize_predefined(graph: &Graph) -> Mat {
    let n = graph.n();
    let a = &graph.adjacency;
    let scale: Vec<f64> = (0..n)
        .map(|i| {
            let deg: f64 = a.row(i).iter().sum();
            if deg > 0.0 {
                1.0 / deg.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    let mut out = Mat::eye(n);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                out[(i, j)] = scale[i] * a[(i, j)] * scale[j];
            }
        }
    }
    out
}

/// Trainable state of the adaptive graph: a node embedding plus the
/// projections that fuse it with the current features.
#[derive(Debug, Clone, Copy)]
pub struct AdaptiveGraph {
    /// `N x d` trainable per-variable embedding.
    pub node_embedding: Tensor,
    /// `C' x d`: projects the current feature matrix.
    pub input_proj: Tensor,
    /// `d x d`: projects the node embedding.
    pub embed_proj: Tensor,
    /// `2d x d`: fuses the concatenated projections.
    pub fuse_weight: Tensor,
    /// `d`.
    pub fuse_bias: Tensor,
}

impl AdaptiveGraph {
    /// Create the adaptive-graph parameters under `prefix` in the registry.
    /// Embeddings are uniform within `1/sqrt(d)`, projections within
    /// `1/sqrt(fan_in)`.
    pub fn init<F: Real, R: Rng>(
        tape: &mut Tape<F>,
        params: &mut ParamRegistry,
        rng: &mut R,
        prefix: &str,
        n: usize,
        feat_dim: usize,
        embed_dim: usize,
    ) -> Result<Self, TensorError> {
        let eb = 1.0 / (embed_dim as f64).sqrt();
        let fb = 1.0 / (feat_dim as f64).sqrt();
        let cb = 1.0 / (2.0 * embed_dim as f64).sqrt();
        Ok(AdaptiveGraph {
            node_embedding: params.uniform(
                tape,
                rng,
                format!("{prefix}.node_embedding"),
                &[n, embed_dim],
                eb,
            )?,
            input_proj: params.uniform(
                tape,
                rng,
                format!("{prefix}.input_proj"),
                &[feat_dim, embed_dim],
                fb,
            )?,
            embed_proj: params.uniform(
                tape,
                rng,
                format!("{prefix}.embed_proj"),
                &[embed_dim, embed_dim],
                eb,
            )?,
            fuse_weight: params.uniform(
                tape,
                rng,
                format!("{prefix}.fuse_weight"),
                &[2 * embed_dim, embed_dim],
                cb,
            )?,
            fuse_bias: params.constant(tape, format!("{prefix}.fuse_bias"), &[embed_dim], 0.0)?,
        })
    }
}

/// Fuse the current features with the node embedding:
/// `E_n = FC(concat(X W_x, E_A W_e))`. `x` may be `(N, C')` or batched
/// `(B, N, C')`; the embedding half is shared across the batch.
pub fn fuse_embedding<F: Real>(
    tape: &mut Tape<F>,
    x: Tensor,
    ag: &AdaptiveGraph,
) -> Result<Tensor, TensorError> {
    let px = tape.matmul(x, ag.input_proj)?;
    let mut pe = tape.matmul(ag.node_embedding, ag.embed_proj)?;
    let rank = tape.shape(px).len();
    if rank == 3 {
        let batch = tape.shape(px)[0];
        pe = tape.expand_leading(pe, batch)?;
    }
    let axis = rank - 1;
    let cat = tape.concat(&[px, pe], axis)?;
    let fused = tape.matmul(cat, ag.fuse_weight)?;
    tape.add(fused, ag.fuse_bias)
}

/// Self-looped adaptive adjacency from a fused embedding:
/// `I + softmax(GeLU(E_n E_n^T))` with a row-wise softmax. Every row sums to
/// exactly two up to rounding.
pub fn adaptive_adjacency<F: Real>(tape: &mut Tape<F>, e_n: Tensor) -> Result<Tensor, TensorError> {
    let shape = tape.shape(e_n).to_vec();
    let n = shape[shape.len() - 2];
    let et = tape.transpose(e_n)?;
    let sim = tape.matmul(e_n, et)?;
    let act = tape.gelu(sim)?;
    let axis = tape.shape(act).len() - 1;
    let sm = tape.softmax(act, axis)?;
    let mut eye = vec![F::zero(); n * n];
    for i in 0..n {
        eye[i * n + i] = F::one();
    }
    let id = tape.leaf(&[n, n], eye)?;
    tape.add(sm, id)
}
