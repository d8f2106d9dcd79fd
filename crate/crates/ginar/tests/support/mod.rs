//! Scalar reference implementations of the model's forward pass.
//!
//! Everything here is written with plain `f64` loops and owned `Vec`s, with
//! no tape, no shared helpers, and no broadcasting machinery, so that a bug
//! in the tensor engine cannot hide inside its own oracle. Parameters are
//! looked up by their registry names, which doubles as a check that the
//! documented checkpoint naming scheme matches what the model registers.

use ginar::graph::AdaptiveGraph;
use ginar::ia::InterpolationAttention;
use ginar::model::{DecoderParams, GateParams, GinARCell, GinARModel, ModelConfig};
use ginar::params::ParamRegistry;
use ginar::tensor::{ParamInit, Real, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const LN_EPS: f64 = 1e-5;
pub const SCORE_LEAK: f64 = 0.01;

pub fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

pub fn leaky_relu(v: f64, slope: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        slope * v
    }
}

pub fn gelu(v: f64) -> f64 {
    let u = 0.797_884_560_802_865_4 * (v + 0.044715 * v * v * v);
    0.5 * v * (1.0 + u.tanh())
}

pub fn elu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        v.exp() - 1.0
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// `a (m x k) @ b (k x n)`, row-major.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// Max-shifted softmax of one lane, in place.
pub fn softmax_row(row: &mut [f64]) {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Layer normalization of one lane with population variance.
pub fn layer_norm_row(lane: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> Vec<f64> {
    let len = lane.len() as f64;
    let mean = lane.iter().sum::<f64>() / len;
    let var = lane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / len;
    let inv = 1.0 / (var + eps).sqrt();
    lane.iter()
        .enumerate()
        .map(|(j, &v)| gain[j] * (v - mean) * inv + bias[j])
        .collect()
}

/// Top `k` of `candidates` ranked by `row` value, ties towards lower index.
pub fn top_k(row: &[f64], candidates: &[usize], k: usize) -> Vec<usize> {
    let mut order = candidates.to_vec();
    order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// One recovery block's parameters, plain values.
pub struct IaOracle {
    pub source: Vec<f64>,
    pub target: Vec<f64>,
    pub proj: Vec<f64>,
    pub score_w: Vec<f64>,
    pub score_b: f64,
    pub pair_w: Option<Vec<f64>>,
    pub n: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub embed: usize,
    pub k: usize,
}

impl IaOracle {
    /// `I + softmax(relu(source @ target), rows)`, an `n x n` matrix.
    pub fn correspondence(&self) -> Vec<f64> {
        let mut corr = matmul(&self.source, &self.target, self.n, self.embed, self.n);
        for v in corr.iter_mut() {
            *v = relu(*v);
        }
        for i in 0..self.n {
            softmax_row(&mut corr[i * self.n..(i + 1) * self.n]);
            corr[i * self.n + i] += 1.0;
        }
        corr
    }

    /// Recovery over a `(b, n, c_in)` input: masked rows zeroed, everything
    /// through the shared projection, missing rows rebuilt from attention
    /// over their top ranked normal neighbors, rectified at the end.
    pub fn apply(&self, x: &[f64], b: usize, mask: &[usize]) -> Vec<f64> {
        let (n, ci, co) = (self.n, self.c_in, self.c_out);
        let mut is_missing = vec![false; n];
        for &i in mask {
            is_missing[i] = true;
        }
        let normal: Vec<usize> = (0..n).filter(|&i| !is_missing[i]).collect();

        let mut x0 = x.to_vec();
        for bi in 0..b {
            for i in 0..n {
                if is_missing[i] {
                    x0[(bi * n + i) * ci..(bi * n + i + 1) * ci].fill(0.0);
                }
            }
        }
        let mut p = vec![0.0; b * n * co];
        for bi in 0..b {
            let rows = matmul(&x0[bi * n * ci..(bi + 1) * n * ci], &self.proj, n, ci, co);
            p[bi * n * co..(bi + 1) * n * co].copy_from_slice(&rows);
        }

        let mut out = p.clone();
        if !mask.is_empty() {
            let corr = self.correspondence();
            let k = self.k.min(normal.len());
            for &i in mask {
                let neighbors = top_k(&corr[i * n..(i + 1) * n], &normal, k);
                for bi in 0..b {
                    let mut logits: Vec<f64> = neighbors
                        .iter()
                        .map(|&j| {
                            let row = &p[(bi * n + j) * co..(bi * n + j + 1) * co];
                            let z = match &self.pair_w {
                                None => {
                                    row.iter().zip(&self.score_w).map(|(a, w)| a * w).sum::<f64>()
                                }
                                Some(w) => {
                                    let own = &p[(bi * n + i) * co..(bi * n + i + 1) * co];
                                    own.iter()
                                        .chain(row)
                                        .zip(w)
                                        .map(|(a, wv)| a * wv)
                                        .sum::<f64>()
                                }
                            };
                            leaky_relu(z + self.score_b, SCORE_LEAK)
                        })
                        .collect();
                    softmax_row(&mut logits);
                    let dst = (bi * n + i) * co;
                    out[dst..dst + co].fill(0.0);
                    for (a, &j) in logits.iter().zip(&neighbors) {
                        let row = &p[(bi * n + j) * co..(bi * n + j + 1) * co];
                        for (c, &v) in row.iter().enumerate() {
                            out[dst + c] += a * v;
                        }
                    }
                }
            }
        }
        for v in out.iter_mut() {
            *v = relu(*v);
        }
        out
    }

    /// The no-recovery variant: zeroed masked rows straight through the
    /// shared projection.
    pub fn project_zero_filled(&self, x: &[f64], b: usize, mask: &[usize]) -> Vec<f64> {
        let (n, ci, co) = (self.n, self.c_in, self.c_out);
        let mut is_missing = vec![false; n];
        for &i in mask {
            is_missing[i] = true;
        }
        let mut x0 = x.to_vec();
        for bi in 0..b {
            for i in 0..n {
                if is_missing[i] {
                    x0[(bi * n + i) * ci..(bi * n + i + 1) * ci].fill(0.0);
                }
            }
        }
        let mut out = vec![0.0; b * n * co];
        for bi in 0..b {
            let rows = matmul(&x0[bi * n * ci..(bi + 1) * n * ci], &self.proj, n, ci, co);
            out[bi * n * co..(bi + 1) * n * co].copy_from_slice(&rows);
        }
        for v in out.iter_mut() {
            *v = relu(*v);
        }
        out
    }
}

/// The adaptive-graph parameters of one cell, plain values.
pub struct AdaptiveOracle {
    pub node_embedding: Vec<f64>,
    pub input_proj: Vec<f64>,
    pub embed_proj: Vec<f64>,
    pub fuse_w: Vec<f64>,
    pub fuse_b: Vec<f64>,
    pub n: usize,
    pub feat: usize,
    pub embed: usize,
}

impl AdaptiveOracle {
    /// Fused embedding over a `(b, n, feat)` input, `(b, n, embed)` out.
    pub fn fuse(&self, x: &[f64], b: usize) -> Vec<f64> {
        let (n, f, d) = (self.n, self.feat, self.embed);
        let pe = matmul(&self.node_embedding, &self.embed_proj, n, d, d);
        let mut out = vec![0.0; b * n * d];
        for bi in 0..b {
            let px = matmul(&x[bi * n * f..(bi + 1) * n * f], &self.input_proj, n, f, d);
            for i in 0..n {
                let mut cat = Vec::with_capacity(2 * d);
                cat.extend_from_slice(&px[i * d..(i + 1) * d]);
                cat.extend_from_slice(&pe[i * d..(i + 1) * d]);
                let fused = matmul(&cat, &self.fuse_w, 1, 2 * d, d);
                for j in 0..d {
                    out[(bi * n + i) * d + j] = fused[j] + self.fuse_b[j];
                }
            }
        }
        out
    }

    /// `I + softmax(gelu(E E^T), rows)` per batch element, `(b, n, n)` out.
    pub fn adjacency(&self, e: &[f64], b: usize) -> Vec<f64> {
        let (n, d) = (self.n, self.embed);
        let mut out = vec![0.0; b * n * n];
        for bi in 0..b {
            let eb = &e[bi * n * d..(bi + 1) * n * d];
            let block = &mut out[bi * n * n..(bi + 1) * n * n];
            for i in 0..n {
                for j in 0..n {
                    let mut acc = 0.0;
                    for p in 0..d {
                        acc += eb[i * d + p] * eb[j * d + p];
                    }
                    block[i * n + j] = gelu(acc);
                }
            }
            for i in 0..n {
                softmax_row(&mut block[i * n..(i + 1) * n]);
                block[i * n + i] += 1.0;
            }
        }
        out
    }
}

/// One gate's convolution weights, plain values.
pub struct GateOracle {
    pub w1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b1: Option<Vec<f64>>,
    pub b2: Option<Vec<f64>>,
    pub ln_gain: Vec<f64>,
    pub ln_bias: Vec<f64>,
}

/// Graph convolution `A_pre x W1 (+ b1) + A_adap x W2 (+ b2)` over a
/// `(b, n, c)` input, optionally layer-normalized per row. `a_adap` is
/// batched `(b, n, n)`; `a_pre` is shared `(n, n)`.
#[allow(clippy::too_many_arguments)]
pub fn agcn(
    x: &[f64],
    b: usize,
    n: usize,
    c: usize,
    a_pre: Option<&[f64]>,
    a_adap: Option<&[f64]>,
    gate: &GateOracle,
    ln: bool,
) -> Vec<f64> {
    let mut z = vec![0.0; b * n * c];
    let mut branch = |a_block: &dyn Fn(usize) -> Vec<f64>, w: &[f64], bias: &Option<Vec<f64>>| {
        for bi in 0..b {
            let mixed = a_block(bi);
            let proj = matmul(&mixed, w, n, c, c);
            for i in 0..n * c {
                z[bi * n * c + i] += proj[i] + bias.as_ref().map_or(0.0, |bv| bv[i % c]);
            }
        }
    };
    if let Some(ap) = a_pre {
        branch(
            &|bi| matmul(ap, &x[bi * n * c..(bi + 1) * n * c], n, n, c),
            &gate.w1,
            &gate.b1,
        );
    }
    if let Some(ad) = a_adap {
        branch(
            &|bi| {
                matmul(
                    &ad[bi * n * n..(bi + 1) * n * n],
                    &x[bi * n * c..(bi + 1) * n * c],
                    n,
                    n,
                    c,
                )
            },
            &gate.w2,
            &gate.b2,
        );
    }
    if !ln {
        return z;
    }
    let mut out = vec![0.0; b * n * c];
    for row in 0..b * n {
        let normed = layer_norm_row(&z[row * c..(row + 1) * c], &gate.ln_gain, &gate.ln_bias, LN_EPS);
        out[row * c..(row + 1) * c].copy_from_slice(&normed);
    }
    out
}

/// One cell's parameters, plain values.
pub struct CellOracle {
    pub ia: IaOracle,
    pub adaptive: AdaptiveOracle,
    pub forget: GateOracle,
    pub reset: GateOracle,
    pub cand: GateOracle,
}

/// The whole model, rebuilt from registry values for loop-based evaluation.
pub struct ModelOracle {
    pub cfg: ModelConfig,
    pub a_pre: Option<Vec<f64>>,
    pub cells: Vec<CellOracle>,
    pub dec_w1: Vec<f64>,
    pub dec_b1: Vec<f64>,
    pub dec_w2: Vec<f64>,
    pub dec_b2: Vec<f64>,
}

/// Copy a named parameter out of the registry as `f64` values.
fn fetch<F: Real>(tape: &Tape<F>, params: &ParamRegistry, name: &str) -> Vec<f64> {
    try_fetch(tape, params, name)
        .unwrap_or_else(|| panic!("registry has no parameter named {name:?}"))
}

fn try_fetch<F: Real>(tape: &Tape<F>, params: &ParamRegistry, name: &str) -> Option<Vec<f64>> {
    let t = params.get(name)?;
    Some(tape.data(t).iter().map(|v| v.to_f64().unwrap()).collect())
}

impl ModelOracle {
    /// Rebuild the model from the registry by the documented parameter
    /// names: `layer{l}.ia.*`, `layer{l}.adaptive.*`, `layer{l}.forget.*`,
    /// `layer{l}.reset.*`, `layer{l}.cand.*`, and `decoder.*`.
    pub fn from_registry<F: Real>(
        cfg: &ModelConfig,
        a_pre: Option<Vec<f64>>,
        tape: &Tape<F>,
        params: &ParamRegistry,
    ) -> ModelOracle {
        let mut cells = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let c_in = if l == 0 { cfg.input_channels } else { cfg.hidden };
            let ia = IaOracle {
                source: fetch(tape, params, &format!("layer{l}.ia.source_embedding")),
                target: fetch(tape, params, &format!("layer{l}.ia.target_embedding")),
                proj: fetch(tape, params, &format!("layer{l}.ia.feature_proj")),
                score_w: fetch(tape, params, &format!("layer{l}.ia.score_weight")),
                score_b: fetch(tape, params, &format!("layer{l}.ia.score_bias"))[0],
                pair_w: try_fetch(tape, params, &format!("layer{l}.ia.pair_weight")),
                n: cfg.n_vars,
                c_in,
                c_out: cfg.hidden,
                embed: cfg.embed_dim,
                k: cfg.neighbor_k,
            };
            let adaptive = AdaptiveOracle {
                node_embedding: fetch(tape, params, &format!("layer{l}.adaptive.node_embedding")),
                input_proj: fetch(tape, params, &format!("layer{l}.adaptive.input_proj")),
                embed_proj: fetch(tape, params, &format!("layer{l}.adaptive.embed_proj")),
                fuse_w: fetch(tape, params, &format!("layer{l}.adaptive.fuse_weight")),
                fuse_b: fetch(tape, params, &format!("layer{l}.adaptive.fuse_bias")),
                n: cfg.n_vars,
                feat: cfg.hidden,
                embed: cfg.embed_dim,
            };
            let gate = |name: &str, with_bias: bool| GateOracle {
                w1: fetch(tape, params, &format!("layer{l}.{name}.w1")),
                w2: fetch(tape, params, &format!("layer{l}.{name}.w2")),
                b1: with_bias.then(|| fetch(tape, params, &format!("layer{l}.{name}.b1"))),
                b2: with_bias.then(|| fetch(tape, params, &format!("layer{l}.{name}.b2"))),
                ln_gain: fetch(tape, params, &format!("layer{l}.{name}.ln_gain")),
                ln_bias: fetch(tape, params, &format!("layer{l}.{name}.ln_bias")),
            };
            cells.push(CellOracle {
                ia,
                adaptive,
                forget: gate("forget", true),
                reset: gate("reset", true),
                cand: gate("cand", false),
            });
        }
        ModelOracle {
            cfg: cfg.clone(),
            a_pre,
            cells,
            dec_w1: fetch(tape, params, "decoder.w1"),
            dec_b1: fetch(tape, params, "decoder.b1"),
            dec_w2: fetch(tape, params, "decoder.w2"),
            dec_b2: fetch(tape, params, "decoder.b2"),
        }
    }

    /// One recurrent step of cell `l`: recover, convolve, gate. Returns
    /// `(h, c)`, both `(b, n, hidden)`.
    pub fn cell_step(
        &self,
        l: usize,
        x_t: &[f64],
        c_prev: &[f64],
        b: usize,
        mask: &[usize],
    ) -> (Vec<f64>, Vec<f64>) {
        let cfg = &self.cfg;
        let (n, h) = (cfg.n_vars, cfg.hidden);
        let cell = &self.cells[l];
        let x_ia = if cfg.use_ia {
            cell.ia.apply(x_t, b, mask)
        } else {
            cell.ia.project_zero_filled(x_t, b, mask)
        };
        let ap = cfg.use_predefined.then(|| {
            self.a_pre
                .as_deref()
                .expect("predefined branch needs a graph")
        });
        let ad = cfg.use_adaptive.then(|| {
            let fused = cell.adaptive.fuse(&x_ia, b);
            cell.adaptive.adjacency(&fused, b)
        });
        let squash = |z: Vec<f64>| -> Vec<f64> {
            z.into_iter()
                .map(|v| if cfg.sigmoid_gates { sigmoid(v) } else { gelu(v) })
                .collect()
        };
        let f = squash(agcn(&x_ia, b, n, h, ap, ad.as_deref(), &cell.forget, true));
        let r = squash(agcn(&x_ia, b, n, h, ap, ad.as_deref(), &cell.reset, true));
        let cand = agcn(&x_ia, b, n, h, ap, ad.as_deref(), &cell.cand, true);
        let mut c = vec![0.0; b * n * h];
        let mut hid = vec![0.0; b * n * h];
        for i in 0..b * n * h {
            c[i] = (1.0 - f[i]) * cand[i] + f[i] * c_prev[i];
            hid[i] = r[i] * elu(c[i]) + (1.0 - r[i]) * x_ia[i];
        }
        (hid, c)
    }

    /// Full forward pass over a `(b, n, steps, channels)` history laid out
    /// like a window batch, producing `(b, n, horizon)` predictions.
    pub fn forward(&self, x: &[f64], b: usize, steps: usize, mask: &[usize]) -> Vec<f64> {
        let cfg = &self.cfg;
        let (n, h, ch) = (cfg.n_vars, cfg.hidden, cfg.input_channels);
        let mut seq: Vec<Vec<f64>> = (0..steps)
            .map(|t| {
                let mut xt = vec![0.0; b * n * ch];
                for bi in 0..b {
                    for ni in 0..n {
                        for ci in 0..ch {
                            xt[(bi * n + ni) * ch + ci] =
                                x[((bi * n + ni) * steps + t) * ch + ci];
                        }
                    }
                }
                xt
            })
            .collect();
        let mut lasts: Vec<Vec<f64>> = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let mut c = vec![0.0; b * n * h];
            let mut hiddens = Vec::with_capacity(steps);
            for xt in &seq {
                let (hid, cn) = self.cell_step(l, xt, &c, b, mask);
                hiddens.push(hid);
                c = cn;
            }
            lasts.push(hiddens.last().unwrap().clone());
            seq = hiddens;
        }
        let width = h * cfg.layers;
        let mut h_all = vec![0.0; b * n * width];
        for row in 0..b * n {
            for (l, last) in lasts.iter().enumerate() {
                h_all[row * width + l * h..row * width + (l + 1) * h]
                    .copy_from_slice(&last[row * h..(row + 1) * h]);
            }
        }
        let dh = cfg.decoder_hidden;
        let mut out = vec![0.0; b * n * cfg.horizon];
        for row in 0..b * n {
            let z1 = matmul(&h_all[row * width..(row + 1) * width], &self.dec_w1, 1, width, dh);
            let a1: Vec<f64> = z1
                .iter()
                .enumerate()
                .map(|(j, &v)| relu(v + self.dec_b1[j]))
                .collect();
            let z2 = matmul(&a1, &self.dec_w2, 1, dh, cfg.horizon);
            for j in 0..cfg.horizon {
                out[row * cfg.horizon + j] = z2[j] + self.dec_b2[j];
            }
        }
        out
    }
}

/// Largest absolute elementwise difference between two equal-length slices.
pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "compared slices must match in length");
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn values<F: Real>(tape: &Tape<F>, t: Tensor) -> Vec<f64> {
    tape.data(t).iter().map(|v| v.to_f64().unwrap()).collect()
}

/// Mirror a live recovery block into its scalar twin, shapes read off the
/// tape.
pub fn ia_oracle<F: Real>(tape: &Tape<F>, ia: &InterpolationAttention) -> IaOracle {
    let src_shape = tape.shape(ia.source_embedding).to_vec();
    let proj_shape = tape.shape(ia.feature_proj).to_vec();
    IaOracle {
        source: values(tape, ia.source_embedding),
        target: values(tape, ia.target_embedding),
        proj: values(tape, ia.feature_proj),
        score_w: values(tape, ia.score_weight),
        score_b: values(tape, ia.score_bias)[0],
        pair_w: ia.pair_weight.map(|w| values(tape, w)),
        n: src_shape[0],
        c_in: proj_shape[0],
        c_out: proj_shape[1],
        embed: src_shape[1],
        k: ia.k,
    }
}

/// Mirror a live adaptive-graph block into its scalar twin.
pub fn adaptive_oracle<F: Real>(tape: &Tape<F>, ag: &AdaptiveGraph) -> AdaptiveOracle {
    let emb_shape = tape.shape(ag.node_embedding).to_vec();
    let in_shape = tape.shape(ag.input_proj).to_vec();
    AdaptiveOracle {
        node_embedding: values(tape, ag.node_embedding),
        input_proj: values(tape, ag.input_proj),
        embed_proj: values(tape, ag.embed_proj),
        fuse_w: values(tape, ag.fuse_weight),
        fuse_b: values(tape, ag.fuse_bias),
        n: emb_shape[0],
        feat: in_shape[0],
        embed: emb_shape[1],
    }
}

/// Mirror one live gate into its scalar twin.
pub fn gate_oracle<F: Real>(tape: &Tape<F>, gate: &GateParams) -> GateOracle {
    GateOracle {
        w1: values(tape, gate.w1),
        w2: values(tape, gate.w2),
        b1: gate.b1.map(|b| values(tape, b)),
        b2: gate.b2.map(|b| values(tape, b)),
        ln_gain: values(tape, gate.ln_gain),
        ln_bias: values(tape, gate.ln_bias),
    }
}

/// Mirror one live cell into its scalar twin.
pub fn cell_oracle<F: Real>(tape: &Tape<F>, cell: &GinARCell) -> CellOracle {
    CellOracle {
        ia: ia_oracle(tape, &cell.ia),
        adaptive: adaptive_oracle(tape, &cell.adaptive),
        forget: gate_oracle(tape, &cell.forget),
        reset: gate_oracle(tape, &cell.reset),
        cand: gate_oracle(tape, &cell.cand),
    }
}

fn uniform_vec<R: Rng>(rng: &mut R, len: usize, bound: f64) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(-bound..=bound)).collect()
}

/// Initial values for every trainable tensor of a model under `cfg`, in the
/// same order [`assemble_model`] consumes them. Magnitudes follow the usual
/// fan-in scaling so the finite-difference probes stay well conditioned.
pub fn model_param_specs(cfg: &ModelConfig, seed: u64) -> Vec<ParamInit> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, h, d) = (cfg.n_vars, cfg.hidden, cfg.embed_dim);
    let mut specs = Vec::new();
    let mut push = |name: String, shape: &[usize], bound: f64, rng: &mut ChaCha8Rng| {
        let len = shape.iter().product();
        specs.push(ParamInit::new(&name, shape, uniform_vec(rng, len, bound)));
    };
    for l in 0..cfg.layers {
        let c_in = if l == 0 { cfg.input_channels } else { h };
        let eb = 1.0 / (d as f64).sqrt();
        let ib = 1.0 / (c_in as f64).sqrt();
        let hb = 1.0 / (h as f64).sqrt();
        push(format!("layer{l}.ia.source_embedding"), &[n, d], eb, &mut rng);
        push(format!("layer{l}.ia.target_embedding"), &[d, n], eb, &mut rng);
        push(format!("layer{l}.ia.feature_proj"), &[c_in, h], ib, &mut rng);
        push(format!("layer{l}.ia.score_weight"), &[h, 1], hb, &mut rng);
        push(format!("layer{l}.ia.score_bias"), &[1], hb, &mut rng);
        push(format!("layer{l}.adaptive.node_embedding"), &[n, d], eb, &mut rng);
        push(format!("layer{l}.adaptive.input_proj"), &[h, d], hb, &mut rng);
        push(format!("layer{l}.adaptive.embed_proj"), &[d, d], eb, &mut rng);
        push(format!("layer{l}.adaptive.fuse_weight"), &[2 * d, d], eb, &mut rng);
        push(format!("layer{l}.adaptive.fuse_bias"), &[d], eb, &mut rng);
        for gate in ["forget", "reset"] {
            push(format!("layer{l}.{gate}.w1"), &[h, h], hb, &mut rng);
            push(format!("layer{l}.{gate}.w2"), &[h, h], hb, &mut rng);
            push(format!("layer{l}.{gate}.b1"), &[h], hb, &mut rng);
            push(format!("layer{l}.{gate}.b2"), &[h], hb, &mut rng);
            push(format!("layer{l}.{gate}.ln_gain"), &[h], 1.0, &mut rng);
            push(format!("layer{l}.{gate}.ln_bias"), &[h], 0.2, &mut rng);
        }
        push(format!("layer{l}.cand.w1"), &[h, h], hb, &mut rng);
        push(format!("layer{l}.cand.w2"), &[h, h], hb, &mut rng);
        push(format!("layer{l}.cand.ln_gain"), &[h], 1.0, &mut rng);
        push(format!("layer{l}.cand.ln_bias"), &[h], 0.2, &mut rng);
    }
    let width = h * cfg.layers;
    let db = 1.0 / (width as f64).sqrt();
    push("decoder.w1".into(), &[width, cfg.decoder_hidden], db, &mut rng);
    push("decoder.b1".into(), &[cfg.decoder_hidden], db, &mut rng);
    let ob = 1.0 / (cfg.decoder_hidden as f64).sqrt();
    push("decoder.w2".into(), &[cfg.decoder_hidden, cfg.horizon], ob, &mut rng);
    push("decoder.b2".into(), &[cfg.horizon], ob, &mut rng);
    specs
}

/// Rebuild a model around grad-check handles, consuming them in the order
/// [`model_param_specs`] emits. Layer-norm shifts stay random so their
/// gradients are probed like any other parameter's.
pub fn assemble_model(cfg: &ModelConfig, a_pre: Option<Tensor>, handles: &[Tensor]) -> GinARModel {
    let mut it = handles.iter().copied();
    let mut next = || it.next().expect("handle list matches the spec list");
    let mut layers = Vec::with_capacity(cfg.layers);
    for _ in 0..cfg.layers {
        let ia = InterpolationAttention {
            source_embedding: next(),
            target_embedding: next(),
            feature_proj: next(),
            score_weight: next(),
            score_bias: next(),
            pair_weight: None,
            k: cfg.neighbor_k,
            pairwise: false,
        };
        let adaptive = AdaptiveGraph {
            node_embedding: next(),
            input_proj: next(),
            embed_proj: next(),
            fuse_weight: next(),
            fuse_bias: next(),
        };
        let mut gate = |with_bias: bool| GateParams {
            w1: next(),
            w2: next(),
            b1: with_bias.then(&mut next),
            b2: with_bias.then(&mut next),
            ln_gain: next(),
            ln_bias: next(),
        };
        let forget = gate(true);
        let reset = gate(true);
        let cand = gate(false);
        layers.push(GinARCell {
            ia,
            adaptive,
            forget,
            reset,
            cand,
        });
    }
    let decoder = DecoderParams {
        w1: next(),
        b1: next(),
        w2: next(),
        b2: next(),
    };
    assert!(it.next().is_none(), "every handle must be consumed");
    GinARModel {
        cfg: cfg.clone(),
        a_pre,
        layers,
        decoder,
    }
}
