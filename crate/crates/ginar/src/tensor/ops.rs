//! Forward operations and their reverse-mode rules.
//!
//! Every constructor validates shapes, computes the output eagerly, checks it
//! for non-finite values (a NaN or infinity is an error the moment it is
//! produced, never a value that silently propagates), and appends a node.
//! The matching gradient rule lives in [`Tape::backprop`].

use super::{
    axis_split, numel, real, scratch_add, scratch_add_with, Node, Op, Real, Result, Tape, Tensor,
    TensorError,
};

/// True when `rhs` is equal to the trailing extents of `lhs`, which is the
/// broadcast rule used by the elementwise binary ops (a bias of shape `[C]`
/// adds onto `[B, N, C]`).
fn suffix_of(lhs: &[usize], rhs: &[usize]) -> bool {
    rhs.len() <= lhs.len() && &lhs[lhs.len() - rhs.len()..] == rhs
}

fn ensure_finite<F: Real>(op: &'static str, data: &[F]) -> Result<()> {
    if data.iter().any(|v| !v.is_finite()) {
        return Err(TensorError::NonFinite { op });
    }
    Ok(())
}

/// `out[i, j] += sum_p a[i, p] * b[p, j]`
fn mm_nn<F: Real>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + aip * brow[j];
            }
        }
    }
}

/// `out[i, j] += sum_p a[i, p] * b[j, p]` (`b` used transposed)
fn mm_nt<F: Real>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = F::zero();
            for p in 0..k {
                acc = acc + arow[p] * brow[p];
            }
            out[i * n + j] = out[i * n + j] + acc;
        }
    }
}

/// `out[p, j] += sum_i a[i, p] * c[i, j]` (`a` used transposed)
fn mm_tn<F: Real>(a: &[F], c: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &c[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + aip * crow[j];
            }
        }
    }
}

/// Matrix dims of a rank>=2 shape: (batch, rows, cols).
fn mat_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(TensorError::NeedsRank {
            op,
            need: 2,
            shape: shape.to_vec(),
        });
    }
    let d = shape.len();
    let batch: usize = shape[..d - 2].iter().product();
    Ok((batch, shape[d - 2], shape[d - 1]))
}

impl<F: Real> Tape<F> {
    fn binary(
        &mut self,
        op_name: &'static str,
        a: Tensor,
        b: Tensor,
        f: impl Fn(F, F) -> F,
    ) -> Result<(Vec<usize>, Vec<F>)> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if !suffix_of(&sa, &sb) {
            return Err(TensorError::ShapeMismatch {
                op: op_name,
                lhs: sa,
                rhs: sb,
            });
        }
        let da = self.data(a);
        let db = self.data(b);
        if db.is_empty() && !da.is_empty() {
            return Err(TensorError::ShapeMismatch {
                op: op_name,
                lhs: sa,
                rhs: sb,
            });
        }
        let chunk = db.len().max(1);
        let mut out = Vec::with_capacity(da.len());
        for (i, &av) in da.iter().enumerate() {
            out.push(f(av, db[i % chunk]));
        }
        ensure_finite(op_name, &out)?;
        Ok((sa, out))
    }

    /// Elementwise sum. `b` may be a trailing-shape broadcast of `a`.
    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (shape, data) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push_op(shape, data, Op::Add(a, b), Vec::new()))
    }

    /// Elementwise difference. `b` may be a trailing-shape broadcast of `a`.
    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (shape, data) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push_op(shape, data, Op::Sub(a, b), Vec::new()))
    }

    /// Hadamard product. `b` may be a trailing-shape broadcast of `a`.
    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (shape, data) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push_op(shape, data, Op::Mul(a, b), Vec::new()))
    }

    /// Matrix product over the trailing two axes. Leading axes must match, or
    /// one operand may omit them entirely and is then shared across the batch
    /// (`[N, N] @ [B, N, C]` and `[B, N, C] @ [C, D]` both work).
    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (_, m, ka) = mat_dims("matmul", &sa)?;
        let (_, kb, n) = mat_dims("matmul", &sb)?;
        let lead_a = &sa[..sa.len() - 2];
        let lead_b = &sb[..sb.len() - 2];
        let lead: Vec<usize> = if lead_a == lead_b {
            lead_a.to_vec()
        } else if lead_a.is_empty() {
            lead_b.to_vec()
        } else if lead_b.is_empty() {
            lead_a.to_vec()
        } else {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        };
        if ka != kb {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let batch = numel(&lead);
        let mut out = vec![F::zero(); batch * m * n];
        let da = self.data(a);
        let db = self.data(b);
        for bi in 0..batch {
            let ao = if lead_a.is_empty() { 0 } else { bi * m * ka };
            let bo = if lead_b.is_empty() { 0 } else { bi * ka * n };
            mm_nn(
                &da[ao..ao + m * ka],
                &db[bo..bo + ka * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                ka,
                n,
            );
        }
        ensure_finite("matmul", &out)?;
        let mut shape = lead;
        shape.push(m);
        shape.push(n);
        Ok(self.push_op(shape, out, Op::Matmul(a, b), Vec::new()))
    }

    /// Swap the trailing two axes.
    pub fn transpose(&mut self, x: Tensor) -> Result<Tensor> {
        let sx = self.shape(x).to_vec();
        let (batch, r, c) = mat_dims("transpose", &sx)?;
        let dx = self.data(x);
        let mut out = vec![F::zero(); dx.len()];
        for b in 0..batch {
            let src = &dx[b * r * c..];
            let dst = &mut out[b * r * c..(b + 1) * r * c];
            for i in 0..r {
                for j in 0..c {
                    dst[j * r + i] = src[i * c + j];
                }
            }
        }
        let mut shape = sx;
        let d = shape.len();
        shape.swap(d - 2, d - 1);
        Ok(self.push_op(shape, out, Op::Transpose(x), Vec::new()))
    }

    /// Concatenate along `axis`. All parts must agree on every other extent.
    pub fn concat(&mut self, parts: &[Tensor], axis: usize) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(TensorError::Invalid {
                op: "concat",
                msg: "no tensors given".into(),
            });
        }
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(TensorError::BadAxis {
                op: "concat",
                axis,
                shape: first,
            });
        }
        let mut total_axis = 0usize;
        for &p in parts {
            let sp = self.shape(p);
            let compatible = sp.len() == first.len()
                && sp
                    .iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: sp.to_vec(),
                });
            }
            total_axis += sp[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total_axis;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = vec![F::zero(); numel(&shape)];
        let out_stride = total_axis * inner;
        let mut offset = 0usize;
        for &p in parts {
            let ext = self.shape(p)[axis];
            let chunk = ext * inner;
            let dp = self.data(p);
            for o in 0..outer {
                let dst = o * out_stride + offset;
                out[dst..dst + chunk].copy_from_slice(&dp[o * chunk..(o + 1) * chunk]);
            }
            offset += chunk;
        }
        Ok(self.push_op(
            shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            Vec::new(),
        ))
    }

    /// Elementwise `alpha * x + beta` with scalar constants.
    pub fn affine(&mut self, x: Tensor, alpha: f64, beta: f64) -> Result<Tensor> {
        let (al, be) = (real::<F>(alpha), real::<F>(beta));
        let data: Vec<F> = self.data(x).iter().map(|&v| al * v + be).collect();
        ensure_finite("affine", &data)?;
        let shape = self.shape(x).to_vec();
        Ok(self.push_op(shape, data, Op::Affine { x, alpha: al }, Vec::new()))
    }

    /// Elementwise `c * x`.
    pub fn scale(&mut self, x: Tensor, c: f64) -> Result<Tensor> {
        self.affine(x, c, 0.0)
    }

    /// `max(x, 0)`.
    pub fn relu(&mut self, x: Tensor) -> Result<Tensor> {
        self.unary("relu", x, Op::Relu(x), |v| {
            if v > F::zero() {
                v
            } else {
                F::zero()
            }
        })
    }

    /// `x` for positive inputs, `slope * x` otherwise.
    pub fn leaky_relu(&mut self, x: Tensor, slope: f64) -> Result<Tensor> {
        let s = real::<F>(slope);
        self.unary("leaky_relu", x, Op::LeakyRelu { x, slope: s }, |v| {
            if v > F::zero() {
                v
            } else {
                s * v
            }
        })
    }

    /// Gaussian error linear unit, tanh approximation:
    /// `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
    pub fn gelu(&mut self, x: Tensor) -> Result<Tensor> {
        self.unary("gelu", x, Op::Gelu(x), gelu_value)
    }

    /// Exponential linear unit with unit saturation: `x` for positive inputs,
    /// `exp(x) - 1` otherwise.
    pub fn elu(&mut self, x: Tensor) -> Result<Tensor> {
        self.unary("elu", x, Op::Elu(x), |v| {
            if v > F::zero() {
                v
            } else {
                v.exp() - F::one()
            }
        })
    }

    /// Logistic sigmoid, computed in the numerically safe branch form.
    pub fn sigmoid(&mut self, x: Tensor) -> Result<Tensor> {
        self.unary("sigmoid", x, Op::Sigmoid(x), |v| {
            if v >= F::zero() {
                F::one() / (F::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (F::one() + e)
            }
        })
    }

    /// Elementwise absolute value. The derivative at zero is taken as zero.
    pub fn abs(&mut self, x: Tensor) -> Result<Tensor> {
        self.unary("abs", x, Op::Abs(x), |v| v.abs())
    }

    /// Elementwise natural logarithm. Non-positive inputs produce a
    /// non-finite result and therefore an error.
    pub fn ln(&mut self, x: Tensor) -> Result<Tensor> {
        self.unary("ln", x, Op::Ln(x), |v| v.ln())
    }

    fn unary(
        &mut self,
        name: &'static str,
        x: Tensor,
        op: Op<F>,
        f: impl Fn(F) -> F,
    ) -> Result<Tensor> {
        let data: Vec<F> = self.data(x).iter().map(|&v| f(v)).collect();
        ensure_finite(name, &data)?;
        let shape = self.shape(x).to_vec();
        Ok(self.push_op(shape, data, op, Vec::new()))
    }

    /// Softmax along `axis`, shifted by the lane maximum for stability. Each
    /// lane sums to one.
    pub fn softmax(&mut self, x: Tensor, axis: usize) -> Result<Tensor> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::BadAxis {
                op: "softmax",
                axis,
                shape,
            });
        }
        if shape[axis] == 0 {
            return Err(TensorError::EmptyAxis {
                op: "softmax",
                axis,
                shape,
            });
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let dx = self.data(x);
        let mut out = vec![F::zero(); dx.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mut mx = dx[at(0)];
                for j in 1..len {
                    if dx[at(j)] > mx {
                        mx = dx[at(j)];
                    }
                }
                let mut sum = F::zero();
                for j in 0..len {
                    let e = (dx[at(j)] - mx).exp();
                    out[at(j)] = e;
                    sum = sum + e;
                }
                for j in 0..len {
                    out[at(j)] = out[at(j)] / sum;
                }
            }
        }
        ensure_finite("softmax", &out)?;
        Ok(self.push_op(shape, out, Op::Softmax { x, axis }, Vec::new()))
    }

    /// Layer normalization over the last axis with per-channel `gain` and
    /// `bias` (both 1-d of the last extent): `gain * (x - mean)/sqrt(var +
    /// eps) + bias`, population variance. `eps = 0` is allowed when no lane
    /// is constant.
    pub fn layer_norm(&mut self, x: Tensor, gain: Tensor, bias: Tensor, eps: f64) -> Result<Tensor> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || *shape.last().unwrap() == 0 {
            return Err(TensorError::EmptyAxis {
                op: "layer_norm",
                axis: shape.len().saturating_sub(1),
                shape,
            });
        }
        let ln = *shape.last().unwrap();
        for (t, name) in [(gain, "gain"), (bias, "bias")] {
            if self.shape(t) != [ln] {
                return Err(TensorError::ShapeMismatch {
                    op: if name == "gain" {
                        "layer_norm gain"
                    } else {
                        "layer_norm bias"
                    },
                    lhs: shape,
                    rhs: self.shape(t).to_vec(),
                });
            }
        }
        let outer = numel(&shape) / ln;
        let dx = self.data(x);
        let dg = self.data(gain);
        let db = self.data(bias);
        let mut out = vec![F::zero(); dx.len()];
        let mut saved = vec![F::zero(); 2 * outer];
        let flen = real::<F>(ln as f64);
        let feps = real::<F>(eps);
        for o in 0..outer {
            let lane = &dx[o * ln..(o + 1) * ln];
            let mean = lane.iter().copied().sum::<F>() / flen;
            let mut var = F::zero();
            for &v in lane {
                var = var + (v - mean) * (v - mean);
            }
            var = var / flen;
            let inv = F::one() / (var + feps).sqrt();
            saved[2 * o] = mean;
            saved[2 * o + 1] = inv;
            for j in 0..ln {
                out[o * ln + j] = dg[j] * (lane[j] - mean) * inv + db[j];
            }
        }
        ensure_finite("layer_norm", &out)?;
        Ok(self.push_op(shape, out, Op::LayerNorm { x, gain, bias }, saved))
    }

    /// Select rows (second-to-last axis) by index: `out[.., s, :] =
    /// x[.., idx[s], :]`. Indices may repeat.
    pub fn gather_rows(&mut self, x: Tensor, idx: &[usize]) -> Result<Tensor> {
        let sx = self.shape(x).to_vec();
        let (batch, rows, cols) = mat_dims("gather_rows", &sx)?;
        for &i in idx {
            if i >= rows {
                return Err(TensorError::RowIndex {
                    op: "gather_rows",
                    index: i,
                    rows,
                });
            }
        }
        let dx = self.data(x);
        let mut out = vec![F::zero(); batch * idx.len() * cols];
        for b in 0..batch {
            for (s, &i) in idx.iter().enumerate() {
                let src = b * rows * cols + i * cols;
                let dst = (b * idx.len() + s) * cols;
                out[dst..dst + cols].copy_from_slice(&dx[src..src + cols]);
            }
        }
        let mut shape = sx;
        let d = shape.len();
        shape[d - 2] = idx.len();
        Ok(self.push_op(
            shape,
            out,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            Vec::new(),
        ))
    }

    /// Place rows into a larger zero matrix: `out[.., idx[s], :] =
    /// x[.., s, :]` with `rows` output rows. Indices must be distinct.
    pub fn scatter_rows(&mut self, x: Tensor, idx: &[usize], rows: usize) -> Result<Tensor> {
        let sx = self.shape(x).to_vec();
        let (batch, s_rows, cols) = mat_dims("scatter_rows", &sx)?;
        if s_rows != idx.len() {
            return Err(TensorError::Invalid {
                op: "scatter_rows",
                msg: format!("{} rows but {} indices", s_rows, idx.len()),
            });
        }
        let mut seen = vec![false; rows];
        for &i in idx {
            if i >= rows {
                return Err(TensorError::RowIndex {
                    op: "scatter_rows",
                    index: i,
                    rows,
                });
            }
            if seen[i] {
                return Err(TensorError::DuplicateRow {
                    op: "scatter_rows",
                    index: i,
                });
            }
            seen[i] = true;
        }
        let dx = self.data(x);
        let mut out = vec![F::zero(); batch * rows * cols];
        for b in 0..batch {
            for (s, &i) in idx.iter().enumerate() {
                let src = (b * s_rows + s) * cols;
                let dst = b * rows * cols + i * cols;
                out[dst..dst + cols].copy_from_slice(&dx[src..src + cols]);
            }
        }
        let mut shape = sx;
        let d = shape.len();
        shape[d - 2] = rows;
        Ok(self.push_op(
            shape,
            out,
            Op::ScatterRows {
                x,
                idx: idx.to_vec(),
            },
            Vec::new(),
        ))
    }

    /// Multiply each row (second-to-last axis) by a constant: row `r` of the
    /// trailing matrix is scaled by `scale[r]` in every batch element.
    pub fn row_scale(&mut self, x: Tensor, scale: &[f64]) -> Result<Tensor> {
        let sx = self.shape(x).to_vec();
        let (batch, rows, cols) = mat_dims("row_scale", &sx)?;
        if scale.len() != rows {
            return Err(TensorError::ShapeMismatch {
                op: "row_scale",
                lhs: sx,
                rhs: vec![scale.len()],
            });
        }
        let sc: Vec<F> = scale.iter().map(|&v| real(v)).collect();
        let dx = self.data(x);
        let mut out = vec![F::zero(); dx.len()];
        for b in 0..batch {
            for (r, &s) in sc.iter().enumerate() {
                let off = (b * rows + r) * cols;
                for j in 0..cols {
                    out[off + j] = dx[off + j] * s;
                }
            }
        }
        ensure_finite("row_scale", &out)?;
        Ok(self.push_op(sx, out, Op::RowScale { x }, sc))
    }

    /// Per-row affine with constants: row `r` becomes `x * scale[r] +
    /// shift[r]`. Used to de-normalize per-variable predictions on the tape.
    pub fn row_affine(&mut self, x: Tensor, scale: &[f64], shift: &[f64]) -> Result<Tensor> {
        let sx = self.shape(x).to_vec();
        let (batch, rows, cols) = mat_dims("row_affine", &sx)?;
        if scale.len() != rows || shift.len() != rows {
            return Err(TensorError::ShapeMismatch {
                op: "row_affine",
                lhs: sx,
                rhs: vec![scale.len(), shift.len()],
            });
        }
        let mut saved: Vec<F> = scale.iter().map(|&v| real(v)).collect();
        let sh: Vec<F> = shift.iter().map(|&v| real(v)).collect();
        let dx = self.data(x);
        let mut out = vec![F::zero(); dx.len()];
        for b in 0..batch {
            for r in 0..rows {
                let off = (b * rows + r) * cols;
                for j in 0..cols {
                    out[off + j] = dx[off + j] * saved[r] + sh[r];
                }
            }
        }
        ensure_finite("row_affine", &out)?;
        saved.extend_from_slice(&sh);
        Ok(self.push_op(sx, out, Op::RowAffine { x }, saved))
    }

    /// Inverted dropout: each element is dropped with probability `rate` and
    /// survivors are scaled by `1/(1 - rate)`, so the expectation is
    /// unchanged. The sampled multipliers are replayed exactly in the
    /// backward pass. Call only during training; rate 0 is the identity.
    pub fn dropout<R: rand::Rng>(&mut self, x: Tensor, rate: f64, rng: &mut R) -> Result<Tensor> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::Invalid {
                op: "dropout",
                msg: format!("rate {rate} outside [0, 1)"),
            });
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = real::<F>(1.0 / (1.0 - rate));
        let dx = self.data(x);
        let mut saved = vec![F::zero(); dx.len()];
        let mut out = vec![F::zero(); dx.len()];
        for i in 0..dx.len() {
            if rng.gen::<f64>() >= rate {
                saved[i] = keep;
                out[i] = dx[i] * keep;
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push_op(shape, out, Op::Dropout { x }, saved))
    }

    /// Tile a tensor `n` times along a new leading axis: shape `[s..]`
    /// becomes `[n, s..]`. The backward pass sums over the copies, which
    /// makes this the adjoint of sharing one tensor across a batch.
    pub fn expand_leading(&mut self, x: Tensor, n: usize) -> Result<Tensor> {
        if n == 0 {
            return Err(TensorError::Invalid {
                op: "expand_leading",
                msg: "zero copies".into(),
            });
        }
        let dx = self.data(x);
        let mut out = Vec::with_capacity(dx.len() * n);
        for _ in 0..n {
            out.extend_from_slice(dx);
        }
        let mut shape = vec![n];
        shape.extend_from_slice(self.shape(x));
        Ok(self.push_op(shape, out, Op::ExpandLeading { x }, Vec::new()))
    }

    /// Sum of all elements, as a 1-element tensor.
    pub fn sum_all(&mut self, x: Tensor) -> Result<Tensor> {
        let s: F = self.data(x).iter().copied().sum();
        ensure_finite("sum_all", &[s])?;
        Ok(self.push_op(vec![1], vec![s], Op::SumAll(x), Vec::new()))
    }

    /// Mean of all elements, as a 1-element tensor.
    pub fn mean_all(&mut self, x: Tensor) -> Result<Tensor> {
        let n = self.data(x).len();
        if n == 0 {
            return Err(TensorError::EmptyAxis {
                op: "mean_all",
                axis: 0,
                shape: self.shape(x).to_vec(),
            });
        }
        let s: F = self.data(x).iter().copied().sum::<F>() / real(n as f64);
        ensure_finite("mean_all", &[s])?;
        Ok(self.push_op(vec![1], vec![s], Op::MeanAll(x), Vec::new()))
    }

    fn push_op(&mut self, shape: Vec<usize>, data: Vec<F>, op: Op<F>, saved: Vec<F>) -> Tensor {
        self.push(Node {
            shape,
            data,
            grad: None,
            op,
            saved,
            param: false,
        })
    }

    /// Apply one node's gradient rule: reads the node's inputs, metadata and
    /// cached stats, and accumulates the input gradients into `scratch`.
    pub(crate) fn backprop(&self, id: usize, g: &[F], scratch: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[id];
        let len_of = |t: &Tensor| self.nodes[t.0].data.len();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                scratch_add(scratch, a.0, len_of(a), g);
                self.suffix_fold(scratch, b, g, F::one());
            }
            Op::Sub(a, b) => {
                scratch_add(scratch, a.0, len_of(a), g);
                self.suffix_fold(scratch, b, g, -F::one());
            }
            Op::Mul(a, b) => {
                let bd = &self.nodes[b.0].data;
                let da: Vec<F> = g
                    .iter()
                    .enumerate()
                    .map(|(i, &gv)| gv * bd[i % bd.len()])
                    .collect();
                let ad = &self.nodes[a.0].data;
                let mut db = vec![F::zero(); bd.len()];
                for (i, &gv) in g.iter().enumerate() {
                    db[i % bd.len()] = db[i % bd.len()] + gv * ad[i];
                }
                scratch_add(scratch, a.0, len_of(a), &da);
                scratch_add(scratch, b.0, len_of(b), &db);
            }
            Op::Matmul(a, b) => {
                let sa = &self.nodes[a.0].shape;
                let sb = &self.nodes[b.0].shape;
                let m = sa[sa.len() - 2];
                let k = sa[sa.len() - 1];
                let n = sb[sb.len() - 1];
                let batch = numel(&node.shape) / (m * n);
                let a_batched = sa.len() > 2;
                let b_batched = sb.len() > 2;
                let mut da = vec![F::zero(); numel(sa)];
                let mut db = vec![F::zero(); numel(sb)];
                for bi in 0..batch {
                    let go = bi * m * n;
                    let ao = if a_batched { bi * m * k } else { 0 };
                    let bo = if b_batched { bi * k * n } else { 0 };
                    // dA += dC . B^T ; dB += A^T . dC
                    mm_nt(
                        &g[go..go + m * n],
                        &self.nodes[b.0].data[bo..bo + k * n],
                        &mut da[ao..ao + m * k],
                        m,
                        n,
                        k,
                    );
                    mm_tn(
                        &self.nodes[a.0].data[ao..ao + m * k],
                        &g[go..go + m * n],
                        &mut db[bo..bo + k * n],
                        m,
                        k,
                        n,
                    );
                }
                scratch_add(scratch, a.0, len_of(a), &da);
                scratch_add(scratch, b.0, len_of(b), &db);
            }
            Op::Transpose(x) => {
                let sx = &self.nodes[x.0].shape;
                let (batch, r, c) = mat_dims("transpose", sx).expect("validated at forward");
                let mut dx = vec![F::zero(); numel(sx)];
                // g has shape (.., c, r); transpose it back.
                for b in 0..batch {
                    let src = &g[b * r * c..(b + 1) * r * c];
                    let dst = &mut dx[b * r * c..(b + 1) * r * c];
                    for i in 0..c {
                        for j in 0..r {
                            dst[j * c + i] = src[i * r + j];
                        }
                    }
                }
                scratch_add(scratch, x.0, numel(sx), &dx);
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = axis_split(&node.shape, *axis);
                let out_stride = total * inner;
                let mut offset = 0usize;
                for p in parts {
                    let ext = self.nodes[p.0].shape[*axis];
                    let chunk = ext * inner;
                    let mut dp = vec![F::zero(); outer * chunk];
                    for o in 0..outer {
                        let src = o * out_stride + offset;
                        dp[o * chunk..(o + 1) * chunk].copy_from_slice(&g[src..src + chunk]);
                    }
                    scratch_add(scratch, p.0, len_of(p), &dp);
                    offset += chunk;
                }
            }
            Op::Affine { x, alpha } => {
                let dx: Vec<F> = g.iter().map(|&gv| gv * *alpha).collect();
                scratch_add(scratch, x.0, len_of(x), &dx);
            }
            Op::Relu(x) => {
                let xd = &self.nodes[x.0].data;
                let dx: Vec<F> = g
                    .iter()
                    .zip(xd)
                    .map(|(&gv, &xv)| if xv > F::zero() { gv } else { F::zero() })
                    .collect();
                scratch_add(scratch, x.0, len_of(x), &dx);
            }
            Op::LeakyRelu { x, slope } => {
                let xd = &self.nodes[x.0].data;
                let dx: Vec<F> = g
                    .iter()
                    .zip(xd)
                    .map(|(&gv, &xv)| if xv > F::zero() { gv } else { gv * *slope })
                    .collect();
                scratch_add(scratch, x.0, len_of(x), &dx);
            }
            Op::Gelu(x) => {
                let xd = &self.nodes[x.0].data;
                let dx: Vec<F> = g
                    .iter()
                    .zip(xd)
                    .map(|(&gv, &xv)| gv * gelu_derivative(xv))
                    .collect();
                scratch_add(scratch, x.0, len_of(x), &dx);
            }
            Op::Elu(x) => {
                let xd = &self.nodes[x.0].data;
                let dx: Vec<F> = g
                    .iter()
                    .zip(xd)
                    .map(|(&gv, &xv)| if xv > F::zero() { gv } else { gv * xv.exp() })
                    .collect();
                scratch_add(scratch, x.0, len_of(x), &dx);
            }
            Op::Sigmoid(x) => {
                let dx: Vec<F> = g
                    .iter()
                    .zip(&node.data)
                    .map(|(&gv, &yv)| gv * yv * (F::one() - yv))
                    .collect();
                scratch_add(scratch, x.0, len_of(x), &dx);
            }
            Op::Abs(x) => {
                let xd = &self.nodes[x.0].data;
                let dx: Vec<F> = g
                    .iter()
                    .zip(xd)
                    .map(|(&gv, &xv)| {
                        if xv > F::zero() {
                            gv
                        } else if xv < F::zero() {
                            -gv
                        } else {
                            F::zero()
                        }
                    })
                    .collect();
                scratch_add(scratch, x.0, len_of(x), &dx);
            }
            Op::Ln(x) => {
                let xd = &self.nodes[x.0].data;
                let dx: Vec<F> = g.iter().zip(xd).map(|(&gv, &xv)| gv / xv).collect();
                scratch_add(scratch, x.0, len_of(x), &dx);
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split(&node.shape, *axis);
                let y = &node.data;
                let mut dx = vec![F::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let mut dot = F::zero();
                        for j in 0..len {
                            dot = dot + g[at(j)] * y[at(j)];
                        }
                        for j in 0..len {
                            dx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                scratch_add(scratch, x.0, len_of(x), &dx);
            }
            Op::LayerNorm { x, gain, bias } => {
                let ln = *node.shape.last().unwrap();
                let outer = node.data.len() / ln;
                let flen = real::<F>(ln as f64);
                let xd = &self.nodes[x.0].data;
                let gd = &self.nodes[gain.0].data;
                let mut dx = vec![F::zero(); xd.len()];
                let mut dgain = vec![F::zero(); ln];
                let mut dbias = vec![F::zero(); ln];
                for o in 0..outer {
                    let mean = node.saved[2 * o];
                    let inv = node.saved[2 * o + 1];
                    let lane = &xd[o * ln..(o + 1) * ln];
                    let glane = &g[o * ln..(o + 1) * ln];
                    // dxh = g * gain ; dx = inv (dxh - mean(dxh) - xh mean(dxh*xh))
                    let mut m1 = F::zero();
                    let mut m2 = F::zero();
                    for j in 0..ln {
                        let xh = (lane[j] - mean) * inv;
                        let dxh = glane[j] * gd[j];
                        m1 = m1 + dxh;
                        m2 = m2 + dxh * xh;
                        dgain[j] = dgain[j] + glane[j] * xh;
                        dbias[j] = dbias[j] + glane[j];
                    }
                    m1 = m1 / flen;
                    m2 = m2 / flen;
                    for j in 0..ln {
                        let xh = (lane[j] - mean) * inv;
                        let dxh = glane[j] * gd[j];
                        dx[o * ln + j] = inv * (dxh - m1 - xh * m2);
                    }
                }
                scratch_add(scratch, x.0, len_of(x), &dx);
                scratch_add(scratch, gain.0, ln, &dgain);
                scratch_add(scratch, bias.0, ln, &dbias);
            }
            Op::GatherRows { x, idx } => {
                let sx = &self.nodes[x.0].shape;
                let (batch, rows, cols) = mat_dims("gather_rows", sx).expect("validated");
                let mut dx = vec![F::zero(); numel(sx)];
                for b in 0..batch {
                    for (s, &i) in idx.iter().enumerate() {
                        let src = (b * idx.len() + s) * cols;
                        let dst = b * rows * cols + i * cols;
                        for j in 0..cols {
                            dx[dst + j] = dx[dst + j] + g[src + j];
                        }
                    }
                }
                scratch_add(scratch, x.0, len_of(x), &dx);
            }
            Op::ScatterRows { x, idx } => {
                let sx = &self.nodes[x.0].shape;
                let (batch, s_rows, cols) = mat_dims("scatter_rows", sx).expect("validated");
                let d = node.shape.len();
                let rows = node.shape[d - 2];
                let mut dx = vec![F::zero(); numel(sx)];
                for b in 0..batch {
                    for (s, &i) in idx.iter().enumerate() {
                        let src = b * rows * cols + i * cols;
                        let dst = (b * s_rows + s) * cols;
                        dx[dst..dst + cols].copy_from_slice(&g[src..src + cols]);
                    }
                }
                scratch_add(scratch, x.0, len_of(x), &dx);
            }
            Op::RowScale { x } | Op::RowAffine { x } => {
                let sx = &self.nodes[x.0].shape;
                let (batch, rows, cols) = mat_dims("row_scale", sx).expect("validated");
                let mut dx = vec![F::zero(); numel(sx)];
                for b in 0..batch {
                    for r in 0..rows {
                        let off = (b * rows + r) * cols;
                        for j in 0..cols {
                            dx[off + j] = g[off + j] * node.saved[r];
                        }
                    }
                }
                scratch_add(scratch, x.0, len_of(x), &dx);
            }
            Op::Dropout { x } => {
                let dx: Vec<F> = g
                    .iter()
                    .zip(&node.saved)
                    .map(|(&gv, &mv)| gv * mv)
                    .collect();
                scratch_add(scratch, x.0, len_of(x), &dx);
            }
            Op::ExpandLeading { x } => {
                let xlen = len_of(x);
                let copies = g.len() / xlen;
                let mut dx = vec![F::zero(); xlen];
                for c in 0..copies {
                    for i in 0..xlen {
                        dx[i] = dx[i] + g[c * xlen + i];
                    }
                }
                scratch_add(scratch, x.0, xlen, &dx);
            }
            Op::SumAll(x) => {
                let gv = g[0];
                scratch_add_with(scratch, x.0, len_of(x), |buf| {
                    for b in buf {
                        *b = *b + gv;
                    }
                });
            }
            Op::MeanAll(x) => {
                let n = self.nodes[x.0].data.len();
                let gv = g[0] / real::<F>(n as f64);
                scratch_add_with(scratch, x.0, len_of(x), |buf| {
                    for b in buf {
                        *b = *b + gv;
                    }
                });
            }
        }
    }

    /// Accumulate `sign * g` (shaped like the lhs of a broadcast binary op)
    /// into the scratch slot of `b`, folding the leading broadcast dims.
    fn suffix_fold(&self, scratch: &mut [Option<Vec<F>>], b: &Tensor, g: &[F], sign: F) {
        let blen = self.nodes[b.0].data.len();
        if blen == g.len() && sign == F::one() {
            scratch_add(scratch, b.0, blen, g);
            return;
        }
        let mut acc = vec![F::zero(); blen];
        for (i, &gv) in g.iter().enumerate() {
            acc[i % blen] = acc[i % blen] + gv * sign;
        }
        scratch_add(scratch, b.0, blen, &acc);
    }
}


/// Shared tanh-approximation constants for the Gaussian error linear unit.
fn gelu_value<F: Real>(x: F) -> F {
    let a = real::<F>(0.797_884_560_802_865_4); // sqrt(2/pi)
    let b = real::<F>(0.044715);
    let half = real::<F>(0.5);
    let u = a * (x + b * x * x * x);
    half * x * (F::one() + u.tanh())
}

fn gelu_derivative<F: Real>(x: F) -> F {
    let a = real::<F>(0.797_884_560_802_865_4);
    let b = real::<F>(0.044715);
    let half = real::<F>(0.5);
    let three = real::<F>(3.0);
    let u = a * (x + b * x * x * x);
    let t = u.tanh();
    let sech2 = F::one() - t * t;
    half * (F::one() + t) + half * x * sech2 * a * (F::one() + three * b * x * x)
}
