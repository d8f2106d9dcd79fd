//! The forecasting model: recovery-equipped recurrent graph cells, a stacked
//! encoder with skip connections, and a direct multi-step decoder.
//!
//! One cell processes one time step for all variables at once. It first
//! recovers missing variables ([`crate::ia::apply_ia`]), then mixes
//! information across the variable graph through two convolution branches (a
//! fixed, distance-derived adjacency and an adaptive one recomputed from the
//! current features), and finally updates a recurrent cell state through
//! forget and reset gates. A layer runs one cell over the whole history with
//! shared weights; the encoder stacks layers, feeding each layer's hidden
//! sequence to the next. The last hidden state of every layer is concatenated
//! and a two-layer MLP emits all forecast horizons in a single pass, so no
//! autoregressive feedback can compound errors.

use crate::data::WindowBatch;
use crate::graph::{adaptive_adjacency, fuse_embedding, AdaptiveGraph};
use crate::ia::{apply_ia, project_zero_filled, IaError, InterpolationAttention};
use crate::mat::Mat;
use crate::params::ParamRegistry;
use crate::tensor::{Real, Tape, Tensor, TensorError};
use rand::Rng;

/// Epsilon inside every layer normalization.
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("both graph branches are disabled; no propagation path remains")]
    NoGraphPath,
    #[error("a predefined graph is required when the predefined branch is enabled")]
    MissingPredefined,
    #[error("input sequence must contain at least one step")]
    EmptySequence,
    #[error("bad model config: {msg}")]
    Config { msg: String },
    #[error("bad batch: {msg}")]
    BadBatch { msg: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Ia(#[from] IaError),
}

/// Structural hyperparameters of one model instance.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Number of variables `N`.
    pub n_vars: usize,
    /// Raw input channels per variable and step (value channel, plus any
    /// extras the pipeline adds). First-layer cells consume this width.
    pub input_channels: usize,
    /// Embedding width `C'` carried through cells and hidden states.
    pub hidden: usize,
    /// Variable embedding width `d` shared by the correspondence and
    /// adaptive-graph embeddings.
    pub embed_dim: usize,
    /// Encoder depth `n`.
    pub layers: usize,
    /// Forecast horizon `L`.
    pub horizon: usize,
    /// Width of the decoder's intermediate layer.
    pub decoder_hidden: usize,
    /// Neighbor budget for recovery.
    pub neighbor_k: usize,
    /// Dropout rate on hidden sequences between layers, training only.
    pub dropout: f64,
    /// Recover missing variables; when off they stay zero-filled.
    pub use_ia: bool,
    /// Enable the predefined-graph convolution branch.
    pub use_predefined: bool,
    /// Enable the adaptive-graph convolution branch.
    pub use_adaptive: bool,
    /// Squash gates with a sigmoid instead of the default GeLU, for
    /// sensitivity studies.
    pub sigmoid_gates: bool,
    /// Score recovery attention from (missing, neighbor) pairs instead of
    /// the neighbor alone.
    pub pairwise_scores: bool,
}

impl ModelConfig {
    /// A config with everything enabled and conventional defaults; callers
    /// override fields as needed.
    pub fn new(n_vars: usize, hidden: usize, embed_dim: usize, layers: usize, horizon: usize) -> Self {
        ModelConfig {
            n_vars,
            input_channels: 1,
            hidden,
            embed_dim,
            layers,
            horizon,
            decoder_hidden: 4 * hidden,
            neighbor_k: 10.min(n_vars.saturating_sub(1)).max(1),
            dropout: 0.15,
            use_ia: true,
            use_predefined: true,
            use_adaptive: true,
            sigmoid_gates: false,
            pairwise_scores: false,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::Config { msg });
        if self.n_vars < 2 {
            return bad(format!("need at least 2 variables, got {}", self.n_vars));
        }
        for (name, v) in [
            ("input_channels", self.input_channels),
            ("hidden", self.hidden),
            ("embed_dim", self.embed_dim),
            ("layers", self.layers),
            ("horizon", self.horizon),
            ("decoder_hidden", self.decoder_hidden),
            ("neighbor_k", self.neighbor_k),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !self.use_predefined && !self.use_adaptive {
            return Err(ModelError::NoGraphPath);
        }
        Ok(())
    }
}

/// One gate's convolution weights: a branch per graph, plus normalization.
/// The candidate gate carries no biases, hence the options.
#[derive(Debug, Clone, Copy)]
pub struct GateParams {
    pub w1: Tensor,
    pub w2: Tensor,
    pub b1: Option<Tensor>,
    pub b2: Option<Tensor>,
    pub ln_gain: Tensor,
    pub ln_bias: Tensor,
}

impl GateParams {
    fn init<F: Real, R: Rng>(
        tape: &mut Tape<F>,
        params: &mut ParamRegistry,
        rng: &mut R,
        prefix: &str,
        width: usize,
        with_bias: bool,
    ) -> Result<Self, TensorError> {
        let bound = 1.0 / (width as f64).sqrt();
        let w1 = params.uniform(tape, rng, format!("{prefix}.w1"), &[width, width], bound)?;
        let w2 = params.uniform(tape, rng, format!("{prefix}.w2"), &[width, width], bound)?;
        let (b1, b2) = if with_bias {
            (
                Some(params.constant(tape, format!("{prefix}.b1"), &[width], 0.0)?),
                Some(params.constant(tape, format!("{prefix}.b2"), &[width], 0.0)?),
            )
        } else {
            (None, None)
        };
        let ln_gain = params.constant(tape, format!("{prefix}.ln_gain"), &[width], 1.0)?;
        let ln_bias = params.constant(tape, format!("{prefix}.ln_bias"), &[width], 0.0)?;
        Ok(GateParams {
            w1,
            w2,
            b1,
            b2,
            ln_gain,
            ln_bias,
        })
    }
}

/// All trainable state of one layer's cell, shared across its time steps.
#[derive(Debug, Clone, Copy)]
pub struct GinARCell {
    pub ia: InterpolationAttention,
    pub adaptive: AdaptiveGraph,
    pub forget: GateParams,
    pub reset: GateParams,
    pub cand: GateParams,
}

impl GinARCell {
    fn init<F: Real, R: Rng>(
        tape: &mut Tape<F>,
        params: &mut ParamRegistry,
        rng: &mut R,
        cfg: &ModelConfig,
        layer: usize,
    ) -> Result<Self, ModelError> {
        let c_in = if layer == 0 {
            cfg.input_channels
        } else {
            cfg.hidden
        };
        let ia = InterpolationAttention::init(
            tape,
            params,
            rng,
            &format!("layer{layer}.ia"),
            cfg.n_vars,
            c_in,
            cfg.hidden,
            cfg.embed_dim,
            cfg.neighbor_k,
            cfg.pairwise_scores,
        )?;
        let adaptive = AdaptiveGraph::init(
            tape,
            params,
            rng,
            &format!("layer{layer}.adaptive"),
            cfg.n_vars,
            cfg.hidden,
            cfg.embed_dim,
        )?;
        let forget = GateParams::init(
            tape,
            params,
            rng,
            &format!("layer{layer}.forget"),
            cfg.hidden,
            true,
        )?;
        let reset = GateParams::init(
            tape,
            params,
            rng,
            &format!("layer{layer}.reset"),
            cfg.hidden,
            true,
        )?;
        let cand = GateParams::init(
            tape,
            params,
            rng,
            &format!("layer{layer}.cand"),
            cfg.hidden,
            false,
        )?;
        Ok(GinARCell {
            ia,
            adaptive,
            forget,
            reset,
            cand,
        })
    }
}

/// Two-layer MLP mapping the concatenated skip states to all horizons.
#[derive(Debug, Clone, Copy)]
pub struct DecoderParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl DecoderParams {
    fn init<F: Real, R: Rng>(
        tape: &mut Tape<F>,
        params: &mut ParamRegistry,
        rng: &mut R,
        cfg: &ModelConfig,
    ) -> Result<Self, TensorError> {
        let width = cfg.hidden * cfg.layers;
        let b_in = 1.0 / (width as f64).sqrt();
        let b_mid = 1.0 / (cfg.decoder_hidden as f64).sqrt();
        Ok(DecoderParams {
            w1: params.uniform(
                tape,
                rng,
                "decoder.w1",
                &[width, cfg.decoder_hidden],
                b_in,
            )?,
            b1: params.constant(tape, "decoder.b1", &[cfg.decoder_hidden], 0.0)?,
            w2: params.uniform(
                tape,
                rng,
                "decoder.w2",
                &[cfg.decoder_hidden, cfg.horizon],
                b_mid,
            )?,
            b2: params.constant(tape, "decoder.b2", &[cfg.horizon], 0.0)?,
        })
    }
}

/// A complete model instance. Parameters live in the caller's registry; the
/// struct itself only holds handles, so it is cheap to copy around.
#[derive(Debug, Clone)]
pub struct GinARModel {
    pub cfg: ModelConfig,
    /// Normalized predefined adjacency with self loops, as a constant on the
    /// tape. Absent when the model was built without one.
    pub a_pre: Option<Tensor>,
    pub layers: Vec<GinARCell>,
    pub decoder: DecoderParams,
}

impl GinARModel {
    /// Build a model on `tape`, registering every trainable tensor in
    /// `params`. `predefined` must already be normalized with self loops
    /// (see [`crate::graph::normalize_predefined`]); it is required whenever
    /// the predefined branch is enabled.
    pub fn init<F: Real, R: Rng>(
        tape: &mut Tape<F>,
        params: &mut ParamRegistry,
        rng: &mut R,
        cfg: &ModelConfig,
        predefined: Option<&Mat>,
    ) -> Result<Self, ModelError> {
        cfg.validate()?;
        let a_pre = match predefined {
            Some(m) => {
                if m.rows != cfg.n_vars || m.cols != cfg.n_vars {
                    return Err(ModelError::Config {
                        msg: format!(
                            "predefined graph is {}x{}, model has {} variables",
                            m.rows, m.cols, cfg.n_vars
                        ),
                    });
                }
                let data: Vec<F> = m.data.iter().map(|&v| crate::tensor::real(v)).collect();
                Some(tape.leaf(&[m.rows, m.cols], data)?)
            }
            None => {
                if cfg.use_predefined {
                    return Err(ModelError::MissingPredefined);
                }
                None
            }
        };
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            layers.push(GinARCell::init(tape, params, rng, cfg, l)?);
        }
        let decoder = DecoderParams::init(tape, params, rng, cfg)?;
        Ok(GinARModel {
            cfg: cfg.clone(),
            a_pre,
            layers,
            decoder,
        })
    }
}

/// One graph-convolution block: `A_pre x W1 (+ b1) + A_adap x W2 (+ b2)`,
/// optionally layer-normalized. Either branch may be disabled by passing
/// `None` for its adjacency; disabling both is an error because nothing
/// would propagate.
#[allow(clippy::too_many_arguments)]
pub fn agcn_apply<F: Real>(
    tape: &mut Tape<F>,
    x: Tensor,
    a_pre: Option<Tensor>,
    a_adap: Option<Tensor>,
    gate: &GateParams,
    ln: bool,
) -> Result<Tensor, ModelError> {
    let branch = |a: Tensor, w: Tensor, b: Option<Tensor>, tape: &mut Tape<F>| {
        let mixed = tape.matmul(a, x)?;
        let proj = tape.matmul(mixed, w)?;
        match b {
            Some(bias) => tape.add(proj, bias),
            None => Ok(proj),
        }
    };
    let t1 = match a_pre {
        Some(a) => Some(branch(a, gate.w1, gate.b1, tape)?),
        None => None,
    };
    let t2 = match a_adap {
        Some(a) => Some(branch(a, gate.w2, gate.b2, tape)?),
        None => None,
    };
    let z = match (t1, t2) {
        (Some(a), Some(b)) => tape.add(a, b)?,
        (Some(a), None) => a,
        (None, Some(b)) => b,
        (None, None) => return Err(ModelError::NoGraphPath),
    };
    if ln {
        Ok(tape.layer_norm(z, gate.ln_gain, gate.ln_bias, LN_EPS)?)
    } else {
        Ok(z)
    }
}

/// The state and output updates given already-computed gates:
/// `c = (1 - f) * cand + f * c_prev` and `h = r * ELU(c) + (1 - r) * x_ia`.
/// Public so gate-saturation behavior can be probed directly with forced
/// gate values.
pub fn cell_combine<F: Real>(
    tape: &mut Tape<F>,
    f: Tensor,
    r: Tensor,
    cand: Tensor,
    c_prev: Tensor,
    x_ia: Tensor,
) -> Result<(Tensor, Tensor), TensorError> {
    let one_minus_f = tape.affine(f, -1.0, 1.0)?;
    let fresh = tape.mul(one_minus_f, cand)?;
    let kept = tape.mul(f, c_prev)?;
    let c = tape.add(fresh, kept)?;
    let act = tape.elu(c)?;
    let through = tape.mul(r, act)?;
    let one_minus_r = tape.affine(r, -1.0, 1.0)?;
    let skip = tape.mul(one_minus_r, x_ia)?;
    let h = tape.add(through, skip)?;
    Ok((h, c))
}

/// Hidden state and cell state produced by one [`cell_step`].
#[derive(Debug, Clone, Copy)]
pub struct CellOutput {
    pub h: Tensor,
    pub c: Tensor,
}

/// One recurrent step over all variables: recover, convolve, gate.
///
/// `x_t` is `(.., N, C_in)`, `c_prev` is `(.., N, C')`. The adaptive
/// adjacency is recomputed from the recovered features of this very step, so
/// the graph tracks the inputs as they change.
pub fn cell_step<F: Real>(
    tape: &mut Tape<F>,
    cfg: &ModelConfig,
    cell: &GinARCell,
    a_pre: Option<Tensor>,
    x_t: Tensor,
    c_prev: Tensor,
    mask: &[usize],
) -> Result<CellOutput, ModelError> {
    let x_ia = if cfg.use_ia {
        apply_ia(tape, &cell.ia, x_t, mask)?
    } else {
        project_zero_filled(tape, &cell.ia, x_t, mask)?
    };
    let ap = if cfg.use_predefined {
        Some(a_pre.ok_or(ModelError::MissingPredefined)?)
    } else {
        None
    };
    let ad = if cfg.use_adaptive {
        let fused = fuse_embedding(tape, x_ia, &cell.adaptive)?;
        Some(adaptive_adjacency(tape, fused)?)
    } else {
        None
    };
    let squash = |tape: &mut Tape<F>, z: Tensor| {
        if cfg.sigmoid_gates {
            tape.sigmoid(z)
        } else {
            tape.gelu(z)
        }
    };
    let f_pre = agcn_apply(tape, x_ia, ap, ad, &cell.forget, true)?;
    let f = squash(tape, f_pre)?;
    let r_pre = agcn_apply(tape, x_ia, ap, ad, &cell.reset, true)?;
    let r = squash(tape, r_pre)?;
    let cand = agcn_apply(tape, x_ia, ap, ad, &cell.cand, true)?;
    let (h, c) = cell_combine(tape, f, r, cand, c_prev, x_ia)?;
    Ok(CellOutput { h, c })
}

/// Result of running one layer over a whole history window.
#[derive(Debug, Clone)]
pub struct LayerOutput {
    /// Hidden state per step, oldest first; each is `(.., N, C')`.
    pub hiddens: Vec<Tensor>,
    /// Cell state after the last step.
    pub final_cell: Tensor,
}

/// Run one layer's cell across the steps of `x_steps`, left to right, with
/// the cell state starting at zero.
pub fn layer_forward<F: Real>(
    tape: &mut Tape<F>,
    cfg: &ModelConfig,
    cell: &GinARCell,
    a_pre: Option<Tensor>,
    x_steps: &[Tensor],
    mask: &[usize],
) -> Result<LayerOutput, ModelError> {
    if x_steps.is_empty() {
        return Err(ModelError::EmptySequence);
    }
    let mut c_shape = tape.shape(x_steps[0]).to_vec();
    let last = c_shape.len() - 1;
    c_shape[last] = cfg.hidden;
    let numel: usize = c_shape.iter().product();
    let mut c = tape.leaf(&c_shape, vec![F::zero(); numel])?;
    let mut hiddens = Vec::with_capacity(x_steps.len());
    for &x_t in x_steps {
        let out = cell_step(tape, cfg, cell, a_pre, x_t, c, mask)?;
        hiddens.push(out.h);
        c = out.c;
    }
    Ok(LayerOutput {
        hiddens,
        final_cell: c,
    })
}

/// Run the full encoder stack and concatenate each layer's last hidden state
/// along the feature axis, in layer order: `(.., N, C' * n)`.
///
/// When `dropout_rng` is given (training), each layer's hidden sequence is
/// dropped out before feeding the next layer; the skip states themselves are
/// taken before dropout, and evaluation passes `None` for a deterministic
/// pass.
pub fn encode<F: Real, R: Rng>(
    tape: &mut Tape<F>,
    model: &GinARModel,
    x_steps: &[Tensor],
    mask: &[usize],
    mut dropout_rng: Option<&mut R>,
) -> Result<Tensor, ModelError> {
    let mut seq: Vec<Tensor> = x_steps.to_vec();
    let mut lasts = Vec::with_capacity(model.layers.len());
    for (l, cell) in model.layers.iter().enumerate() {
        let out = layer_forward(tape, &model.cfg, cell, model.a_pre, &seq, mask)?;
        lasts.push(*out.hiddens.last().expect("layer output is nonempty"));
        if l + 1 < model.layers.len() {
            seq = out.hiddens;
            if let Some(rng) = dropout_rng.as_mut() {
                if model.cfg.dropout > 0.0 {
                    for h in seq.iter_mut() {
                        *h = tape.dropout(*h, model.cfg.dropout, &mut **rng)?;
                    }
                }
            }
        }
    }
    let axis = tape.shape(lasts[0]).len() - 1;
    Ok(tape.concat(&lasts, axis)?)
}

/// Two-layer MLP head: `Y = ReLU(h W1 + b1) W2 + b2`, emitting every horizon
/// at once.
pub fn decode<F: Real>(
    tape: &mut Tape<F>,
    dec: &DecoderParams,
    h_all: Tensor,
) -> Result<Tensor, TensorError> {
    let z1 = tape.matmul(h_all, dec.w1)?;
    let z1 = tape.add(z1, dec.b1)?;
    let a1 = tape.relu(z1)?;
    let z2 = tape.matmul(a1, dec.w2)?;
    tape.add(z2, dec.b2)
}

/// Load one batch's history windows onto the tape as one leaf per time step,
/// each `(B, N, C)`.
pub(crate) fn split_time<F: Real>(
    tape: &mut Tape<F>,
    batch: &WindowBatch,
) -> Result<Vec<Tensor>, ModelError> {
    let (b, n, h, c) = (batch.batch, batch.n_vars, batch.history, batch.channels);
    let mut steps = Vec::with_capacity(h);
    for t in 0..h {
        let mut data = Vec::with_capacity(b * n * c);
        for bi in 0..b {
            for ni in 0..n {
                let base = ((bi * n + ni) * h + t) * c;
                for ci in 0..c {
                    data.push(crate::tensor::real(batch.x[base + ci]));
                }
            }
        }
        steps.push(tape.leaf(&[b, n, c], data)?);
    }
    Ok(steps)
}

/// Full forward pass over a batch: encode every sample's history, decode all
/// horizons. Returns `(B, N, L)` of normalized predictions.
pub fn model_forward<F: Real, R: Rng>(
    tape: &mut Tape<F>,
    model: &GinARModel,
    batch: &WindowBatch,
    dropout_rng: Option<&mut R>,
) -> Result<Tensor, ModelError> {
    let cfg = &model.cfg;
    let bad = |msg: String| Err(ModelError::BadBatch { msg });
    if batch.n_vars != cfg.n_vars {
        return bad(format!(
            "batch has {} variables, model expects {}",
            batch.n_vars, cfg.n_vars
        ));
    }
    if batch.channels != cfg.input_channels {
        return bad(format!(
            "batch has {} channels, model expects {}",
            batch.channels, cfg.input_channels
        ));
    }
    if batch.batch == 0 || batch.history == 0 {
        return bad("empty batch".to_string());
    }
    let (want_x, _) = batch.expected_lens();
    if batch.x.len() != want_x {
        return bad(format!(
            "x has {} values, dimensions imply {}",
            batch.x.len(),
            want_x
        ));
    }
    let steps = split_time(tape, batch)?;
    let h_all = encode(tape, model, &steps, &batch.mask, dropout_rng)?;
    Ok(decode(tape, &model.decoder, h_all)?)
}
