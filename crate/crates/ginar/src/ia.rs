//! Interpolation attention: recovering entirely missing variables.
//!
//! When a variable reports nothing, its input row is all zeros and no amount
//! of temporal modelling will bring it back. This module rebuilds the missing
//! row from the variables that still report, in three steps:
//!
//! 1. a learned *correspondence matrix* ranks, for every variable, which
//!    other variables resemble it (built from two trainable embeddings, self
//!    loops added);
//! 2. for each missing variable, the top ranked *normal* variables form its
//!    neighbor set, and a small score head turns each neighbor's projected
//!    features into an attention coefficient;
//! 3. the missing row is the attention-weighted sum of the neighbors'
//!    projected features, rectified.
//!
//! Normal variables skip the attention and pass through the same shared
//! projection (the self-loop path), so every variable leaves with features of
//! the same width and scale.

use crate::params::ParamRegistry;
use crate::tensor::{Real, Tape, Tensor, TensorError};
use rand::Rng;

#[derive(Debug, thiserror::Error)]
pub enum IaError {
    #[error("mask index {index} out of range for {n} variables")]
    MaskOutOfRange { index: usize, n: usize },
    #[error("mask of {got} variables leaves no normal variable (n = {n})")]
    NothingLeft { got: usize, n: usize },
    #[error("empty neighbor set for variable {i}")]
    EmptyNeighborSet { i: usize },
    #[error("neighbor budget k must be at least 1")]
    ZeroK,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Trainable state of one interpolation-attention block.
#[derive(Debug, Clone, Copy)]
pub struct InterpolationAttention {
    /// `N x d` source half of the correspondence factorization.
    pub source_embedding: Tensor,
    /// `d x N` target half of the correspondence factorization.
    pub target_embedding: Tensor,
    /// `C_in x C'` shared feature projection applied to every variable.
    pub feature_proj: Tensor,
    /// `C' x 1` score head producing one attention logit per neighbor.
    pub score_weight: Tensor,
    /// `1` score head bias.
    pub score_bias: Tensor,
    /// `2 C' x 1`: score head of the pairwise variant, present only when
    /// `pairwise` is set.
    pub pair_weight: Option<Tensor>,
    /// Neighbor budget: each missing variable attends to at most `k` normal
    /// variables (clamped to however many exist).
    pub k: usize,
    /// Score each (missing, neighbor) pair from the concatenation of both
    /// projections instead of the neighbor's alone.
    pub pairwise: bool,
}

/// Negative slope of the score activation.
pub const SCORE_LEAK: f64 = 0.01;

impl InterpolationAttention {
    /// Create the attention parameters under `prefix`. Embeddings initialize
    /// uniformly within `1/sqrt(d)`, projections within `1/sqrt(fan_in)`.
    #[allow(clippy::too_many_arguments)]
    pub fn init<F: Real, R: Rng>(
        tape: &mut Tape<F>,
        params: &mut ParamRegistry,
        rng: &mut R,
        prefix: &str,
        n: usize,
        c_in: usize,
        c_out: usize,
        embed_dim: usize,
        k: usize,
        pairwise: bool,
    ) -> Result<Self, IaError> {
        if k == 0 {
            return Err(IaError::ZeroK);
        }
        let eb = 1.0 / (embed_dim as f64).sqrt();
        let pb = 1.0 / (c_in as f64).sqrt();
        let sb = 1.0 / (c_out as f64).sqrt();
        let source_embedding = params.uniform(
            tape,
            rng,
            format!("{prefix}.source_embedding"),
            &[n, embed_dim],
            eb,
        )?;
        let target_embedding = params.uniform(
            tape,
            rng,
            format!("{prefix}.target_embedding"),
            &[embed_dim, n],
            eb,
        )?;
        let feature_proj = params.uniform(
            tape,
            rng,
            format!("{prefix}.feature_proj"),
            &[c_in, c_out],
            pb,
        )?;
        let score_weight = params.uniform(
            tape,
            rng,
            format!("{prefix}.score_weight"),
            &[c_out, 1],
            sb,
        )?;
        let score_bias = params.constant(tape, format!("{prefix}.score_bias"), &[1], 0.0)?;
        let pair_weight = if pairwise {
            Some(params.uniform(
                tape,
                rng,
                format!("{prefix}.pair_weight"),
                &[2 * c_out, 1],
                1.0 / (2.0 * c_out as f64).sqrt(),
            )?)
        } else {
            None
        };
        Ok(InterpolationAttention {
            source_embedding,
            target_embedding,
            feature_proj,
            score_weight,
            score_bias,
            pair_weight,
            k,
            pairwise,
        })
    }
}

/// Correspondence matrix `I + softmax(ReLU(E_src E_tgt), rows)`: entry
/// `(i, j)` ranks how strongly variable `j` can stand in for variable `i`.
/// Every row sums to exactly two up to rounding.
pub fn build_correspondence<F: Real>(
    tape: &mut Tape<F>,
    ia: &InterpolationAttention,
) -> Result<Tensor, TensorError> {
    let prod = tape.matmul(ia.source_embedding, ia.target_embedding)?;
    let act = tape.relu(prod)?;
    let sm = tape.softmax(act, 1)?;
    let n = tape.shape(sm)[0];
    let mut eye = vec![F::zero(); n * n];
    for i in 0..n {
        eye[i * n + i] = F::one();
    }
    let id = tape.leaf(&[n, n], eye)?;
    tape.add(sm, id)
}

/// The `k` largest off-diagonal entries of `row`, ties broken towards the
/// lower index; never contains `i`. `k` is clamped to the number of other
/// entries.
pub fn neighbor_set<F: Real>(row: &[F], i: usize, k: usize) -> Vec<usize> {
    let candidates: Vec<usize> = (0..row.len()).filter(|&j| j != i).collect();
    top_k_by_row(row, &candidates, k)
}

/// Top-`k` of `candidates` ranked by `row` value, ties towards lower index.
fn top_k_by_row<F: Real>(row: &[F], candidates: &[usize], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = candidates.to_vec();
    order.sort_by(|&a, &b| {
        row[b].partial_cmp(&row[a])
            .expect("correspondence values are finite")
            .then(a.cmp(&b))
    });
    order.truncate(k);
    order
}

/// Shared projection `x @ feature_proj`, before any activation. Row `j`
/// holds `W h_j`, the quantity both the score head and the recovery sum use.
fn project<F: Real>(
    tape: &mut Tape<F>,
    ia: &InterpolationAttention,
    x: Tensor,
) -> Result<Tensor, TensorError> {
    tape.matmul(x, ia.feature_proj)
}

/// Attention logits for every variable: `LeakyReLU(P w + b)`, shape
/// `(.., N, 1)`. Only meaningful for the non-pairwise score head.
fn scores<F: Real>(
    tape: &mut Tape<F>,
    ia: &InterpolationAttention,
    projected: Tensor,
) -> Result<Tensor, TensorError> {
    let raw = tape.matmul(projected, ia.score_weight)?;
    let biased = tape.add(raw, ia.score_bias)?;
    tape.leaky_relu(biased, SCORE_LEAK)
}

/// Pairwise attention logits of missing variable `i` against its neighbors:
/// `LeakyReLU([P_i ; P_j] w_pair + b)`, shape `(.., k, 1)`.
fn pairwise_scores<F: Real>(
    tape: &mut Tape<F>,
    ia: &InterpolationAttention,
    projected: Tensor,
    i: usize,
    neighbors: &[usize],
) -> Result<Tensor, TensorError> {
    let w = ia.pair_weight.expect("pairwise mode has a pair weight");
    let self_rows = tape.gather_rows(projected, &vec![i; neighbors.len()])?;
    let neigh_rows = tape.gather_rows(projected, neighbors)?;
    let axis = tape.shape(neigh_rows).len() - 1;
    let cat = tape.concat(&[self_rows, neigh_rows], axis)?;
    let raw = tape.matmul(cat, w)?;
    let biased = tape.add(raw, ia.score_bias)?;
    tape.leaky_relu(biased, SCORE_LEAK)
}

/// Attention coefficients of missing variable `i` over its neighbor set,
/// shape `(.., k, 1)`: a softmax over the neighbors' score-head logits (or
/// the pairwise logits against `i` when the block is pairwise). The
/// coefficients sum to one.
pub fn attention_coefficients<F: Real>(
    tape: &mut Tape<F>,
    ia: &InterpolationAttention,
    features: Tensor,
    i: usize,
    neighbors: &[usize],
) -> Result<Tensor, IaError> {
    let p = project(tape, ia, features)?;
    coefficients_over(tape, ia, p, i, neighbors)
}

/// Softmaxed coefficients from a precomputed projection.
fn coefficients_over<F: Real>(
    tape: &mut Tape<F>,
    ia: &InterpolationAttention,
    projected: Tensor,
    i: usize,
    neighbors: &[usize],
) -> Result<Tensor, IaError> {
    if neighbors.is_empty() {
        return Err(IaError::EmptyNeighborSet { i });
    }
    let logits = if ia.pairwise {
        pairwise_scores(tape, ia, projected, i, neighbors)?
    } else {
        let s = scores(tape, ia, projected)?;
        tape.gather_rows(s, neighbors)?
    };
    let axis = tape.shape(logits).len() - 2;
    Ok(tape.softmax(logits, axis)?)
}

/// Recover the representation of missing variable `i`: the attention-weighted
/// sum of its neighbors' projections, rectified. Shape `(.., 1, C')`.
pub fn recover_variable<F: Real>(
    tape: &mut Tape<F>,
    ia: &InterpolationAttention,
    features: Tensor,
    i: usize,
    neighbors: &[usize],
) -> Result<Tensor, IaError> {
    let p = project(tape, ia, features)?;
    let alpha = coefficients_over(tape, ia, p, i, neighbors)?;
    let mixed = weighted_sum(tape, p, alpha, neighbors)?;
    Ok(tape.relu(mixed)?)
}

/// `alpha^T @ P[neighbors]`, the pre-activation recovered row `(.., 1, C')`.
fn weighted_sum<F: Real>(
    tape: &mut Tape<F>,
    projected: Tensor,
    alpha: Tensor,
    neighbors: &[usize],
) -> Result<Tensor, TensorError> {
    let neigh = tape.gather_rows(projected, neighbors)?;
    let at = tape.transpose(alpha)?;
    tape.matmul(at, neigh)
}

/// Validated mask bookkeeping shared by [`apply_ia`] and the identity
/// variant: which variables are missing, which remain, and the 0/1 row
/// multipliers that zero the missing rows.
struct MaskInfo {
    missing: Vec<usize>,
    normal: Vec<usize>,
    zero_missing: Vec<f64>,
}

fn mask_info(n: usize, mask: &[usize]) -> Result<MaskInfo, IaError> {
    let mut is_missing = vec![false; n];
    for &i in mask {
        if i >= n {
            return Err(IaError::MaskOutOfRange { index: i, n });
        }
        is_missing[i] = true;
    }
    let missing: Vec<usize> = (0..n).filter(|&i| is_missing[i]).collect();
    let normal: Vec<usize> = (0..n).filter(|&i| !is_missing[i]).collect();
    if normal.is_empty() {
        return Err(IaError::NothingLeft {
            got: missing.len(),
            n,
        });
    }
    let zero_missing: Vec<f64> = (0..n)
        .map(|i| if is_missing[i] { 0.0 } else { 1.0 })
        .collect();
    Ok(MaskInfo {
        missing,
        normal,
        zero_missing,
    })
}

/// Full interpolation attention over one feature matrix `(.., N, C_in)`:
/// masked rows are zeroed on entry, normal rows pass through the shared
/// projection (`ReLU(W h_j)`), and each missing row is recovered from its
/// top-`k` *normal* neighbors under the correspondence ranking. Returns
/// `(.., N, C')`.
pub fn apply_ia<F: Real>(
    tape: &mut Tape<F>,
    ia: &InterpolationAttention,
    x: Tensor,
    mask: &[usize],
) -> Result<Tensor, IaError> {
    let shape = tape.shape(x).to_vec();
    let n = shape[shape.len() - 2];
    let info = mask_info(n, mask)?;

    let x0 = tape.row_scale(x, &info.zero_missing)?;
    let p = project(tape, ia, x0)?;
    if info.missing.is_empty() {
        return Ok(tape.relu(p)?);
    }

    let corr = build_correspondence(tape, ia)?;
    let k = ia.k.min(info.normal.len());
    let mut recovered = Vec::with_capacity(info.missing.len());
    for &i in &info.missing {
        let row = &tape.data(corr)[i * n..(i + 1) * n];
        let neighbors = top_k_by_row(row, &info.normal, k);
        let alpha = coefficients_over(tape, ia, p, i, &neighbors)?;
        recovered.push(weighted_sum(tape, p, alpha, &neighbors)?);
    }
    let axis = tape.shape(recovered[0]).len() - 2;
    let stacked = tape.concat(&recovered, axis)?;
    let spread = tape.scatter_rows(stacked, &info.missing, n)?;
    let kept = tape.row_scale(p, &info.zero_missing)?;
    let combined = tape.add(kept, spread)?;
    Ok(tape.relu(combined)?)
}

/// The ablation stand-in for [`apply_ia`]: no recovery at all. Masked rows
/// are zeroed and every row passes through the shared projection, so missing
/// variables enter the cells as zero rows.
pub fn project_zero_filled<F: Real>(
    tape: &mut Tape<F>,
    ia: &InterpolationAttention,
    x: Tensor,
    mask: &[usize],
) -> Result<Tensor, IaError> {
    let shape = tape.shape(x).to_vec();
    let n = shape[shape.len() - 2];
    let info = mask_info(n, mask)?;
    let x0 = tape.row_scale(x, &info.zero_missing)?;
    let p = project(tape, ia, x0)?;
    Ok(tape.relu(p)?)
}
