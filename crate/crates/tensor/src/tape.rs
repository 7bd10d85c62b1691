//! Tape-based reverse-mode automatic differentiation over row-major matrices.
//!
//! Every value on the tape is a 2-D matrix. Operations are recorded in
//! creation order, which is a valid topological order, and [`Tape::backward`]
//! walks them in reverse, summing gradient contributions across fan-out.

use std::borrow::Cow;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TensorError};
use crate::kernels::{self, axpy, dot};
use crate::tensor::{Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Large negative fill used in place of −∞ before a softmax.
pub const MASK_FILL: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Full,
    Row,
    Scalar,
}

struct SegmentAttention<T> {
    q: Var,
    k: Var,
    v: Var,
    segments: Vec<(usize, usize)>,
    heads: usize,
    head_dim: usize,
    scale: T,
    /// Offset of each (segment, head) probability block in `probs`.
    offsets: Vec<usize>,
    probs: Vec<T>,
    /// Inverted-dropout multipliers, same layout as `probs`.
    keep: Option<Vec<T>>,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    Affine(Var, T),
    Sigmoid(Var),
    Softmax(Var),
    MaskedFill(Var, Vec<bool>),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    Dropout(Var, Vec<T>),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    MeanRows {
        x: Var,
        start: usize,
        end: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    SumAll(Var),
    SegmentAttention(Box<SegmentAttention<T>>),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Affine(..) => "affine",
            Op::Sigmoid(..) => "sigmoid",
            Op::Softmax(..) => "softmax",
            Op::MaskedFill(..) => "masked_fill",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(..) => "gelu",
            Op::Dropout(..) => "dropout",
            Op::Embedding { .. } => "embedding_lookup",
            Op::MeanRows { .. } => "mean_over",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::SumAll(..) => "sum",
            Op::SegmentAttention(..) => "segment_attention",
        }
    }
}

struct Node<'a, T: Clone> {
    op: Op<T>,
    value: Cow<'a, [T]>,
    rows: usize,
    cols: usize,
    needs_grad: bool,
}

/// Records a computation for a single backward pass.
///
/// A tape is single-threaded; independent tapes may run on different threads
/// against the same borrowed parameters.
pub struct Tape<'a, T: Scalar> {
    nodes: Vec<Node<'a, T>>,
    grads: Vec<Option<Vec<T>>>,
    non_finite: Option<&'static str>,
}

impl<'a, T: Scalar> Default for Tape<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Scalar> Tape<'a, T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            non_finite: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(
        &mut self,
        op: Op<T>,
        value: Cow<'a, [T]>,
        rows: usize,
        cols: usize,
        needs_grad: bool,
    ) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        // Borrowed leaves are skipped: a bad input surfaces at its first consumer.
        let owned = matches!(value, Cow::Owned(_));
        if owned && self.non_finite.is_none() && value.iter().any(|x| !x.is_finite()) {
            self.non_finite = Some(op.name());
        }
        self.nodes.push(Node {
            op,
            value,
            rows,
            cols,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<'a, T> {
        &self.nodes[v.0]
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new([n.rows, n.cols], n.value.to_vec()).expect("tape node dims consistent")
    }

    /// Name of the first recorded operation that produced a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.non_finite
    }

    // ---- leaves ---------------------------------------------------------

    /// Owned leaf value.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let (rows, cols) = tensor.matrix_dims();
        let needs = tensor.requires_grad();
        self.push(Op::Leaf, Cow::Owned(tensor.into_data()), rows, cols, needs)
    }

    /// Owned constant matrix.
    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<T>) -> Result<Var> {
        if data.len() != rows * cols {
            return Err(TensorError::InvalidShape {
                shape: vec![rows, cols],
                len: data.len(),
            });
        }
        Ok(self.push(Op::Leaf, Cow::Owned(data), rows, cols, false))
    }

    /// Borrowed trainable leaf; its gradient is tracked regardless of the
    /// tensor's own flag.
    pub fn param(&mut self, tensor: &'a Tensor<T>) -> Var {
        let (rows, cols) = tensor.matrix_dims();
        self.push(Op::Leaf, Cow::Borrowed(tensor.data()), rows, cols, true)
    }

    /// Borrowed leaf that honours `tensor.requires_grad()`.
    pub fn borrowed(&mut self, tensor: &'a Tensor<T>) -> Var {
        let (rows, cols) = tensor.matrix_dims();
        let needs = tensor.requires_grad();
        self.push(Op::Leaf, Cow::Borrowed(tensor.data()), rows, cols, needs)
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut out = vec![T::zero(); m * n];
        kernels::gemm_nn(m, k, n, self.value(a), self.value(b), &mut out);
        let needs = self.needs(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), Cow::Owned(out), m, n, needs))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let out = kernels::transpose(r, c, self.value(a));
        let needs = self.needs(&[a]);
        self.push(Op::Transpose(a), Cow::Owned(out), c, r, needs)
    }

    fn broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<Broadcast> {
        let (ar, ac) = self.dims(a);
        let (br, bc) = self.dims(b);
        if (ar, ac) == (br, bc) {
            Ok(Broadcast::Full)
        } else if br == 1 && bc == ac {
            Ok(Broadcast::Row)
        } else if br == 1 && bc == 1 {
            Ok(Broadcast::Scalar)
        } else {
            Err(TensorError::ShapeMismatch {
                op,
                lhs: vec![ar, ac],
                rhs: vec![br, bc],
            })
        }
    }

    /// Elementwise sum; `b` may be a full matrix, a `[1, cols]` row, or a
    /// `[1, 1]` scalar broadcast over `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = self.broadcast("add", a, b)?;
        let (r, c) = self.dims(a);
        let (av, bv) = (self.value(a), self.value(b));
        let out: Vec<T> = match bc {
            Broadcast::Full => av.iter().zip(bv).map(|(x, y)| *x + *y).collect(),
            Broadcast::Row => av
                .chunks(c)
                .flat_map(|row| row.iter().zip(bv).map(|(x, y)| *x + *y))
                .collect(),
            Broadcast::Scalar => av.iter().map(|x| *x + bv[0]).collect(),
        };
        let needs = self.needs(&[a, b]);
        Ok(self.push(Op::Add(a, b, bc), Cow::Owned(out), r, c, needs))
    }

    /// Elementwise product with the same broadcasting rules as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = self.broadcast("mul", a, b)?;
        let (r, c) = self.dims(a);
        let (av, bv) = (self.value(a), self.value(b));
        let out: Vec<T> = match bc {
            Broadcast::Full => av.iter().zip(bv).map(|(x, y)| *x * *y).collect(),
            Broadcast::Row => av
                .chunks(c)
                .flat_map(|row| row.iter().zip(bv).map(|(x, y)| *x * *y))
                .collect(),
            Broadcast::Scalar => av.iter().map(|x| *x * bv[0]).collect(),
        };
        let needs = self.needs(&[a, b]);
        Ok(self.push(Op::Mul(a, b, bc), Cow::Owned(out), r, c, needs))
    }

    /// `a * scale + shift`
    pub fn affine(&mut self, a: Var, scale: T, shift: T) -> Var {
        let (r, c) = self.dims(a);
        let out = self.value(a).iter().map(|x| *x * scale + shift).collect();
        let needs = self.needs(&[a]);
        self.push(Op::Affine(a, scale), Cow::Owned(out), r, c, needs)
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        self.affine(a, factor, T::zero())
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        let needs = self.needs(&[a]);
        self.push(Op::SumAll(a), Cow::Owned(vec![s]), 1, 1, needs)
    }

    // ---- nonlinearities -------------------------------------------------

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let out = self
            .value(a)
            .iter()
            .map(|x| T::one() / (T::one() + (-*x).exp()))
            .collect();
        let needs = self.needs(&[a]);
        self.push(Op::Sigmoid(a), Cow::Owned(out), r, c, needs)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let out = self.value(a).iter().map(|x| kernels::gelu(*x)).collect();
        let needs = self.needs(&[a]);
        self.push(Op::Gelu(a), Cow::Owned(out), r, c, needs)
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(c) {
            kernels::softmax_row(row);
        }
        let needs = self.needs(&[a]);
        self.push(Op::Softmax(a), Cow::Owned(out), r, c, needs)
    }

    /// Replaces entries where `mask` is true with `fill`.
    pub fn masked_fill(&mut self, a: Var, mask: &[bool], fill: T) -> Result<Var> {
        let (r, c) = self.dims(a);
        if mask.len() != r * c {
            return Err(TensorError::ShapeMismatch {
                op: "masked_fill",
                lhs: vec![r, c],
                rhs: vec![mask.len()],
            });
        }
        let out = self
            .value(a)
            .iter()
            .zip(mask)
            .map(|(x, &m)| if m { fill } else { *x })
            .collect();
        let needs = self.needs(&[a]);
        Ok(self.push(
            Op::MaskedFill(a, mask.to_vec()),
            Cow::Owned(out),
            r,
            c,
            needs,
        ))
    }

    /// Row-wise layer normalization followed by the affine `gamma`, `beta`
    /// (both `[1, cols]`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (r, c) = self.dims(x);
        for p in [gamma, beta] {
            if self.dims(p) != (1, c) {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: vec![r, c],
                    rhs: vec![self.dims(p).0, self.dims(p).1],
                });
            }
        }
        let inv_c = T::one() / T::from_usize(c).expect("usize fits");
        let xv = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![T::zero(); r * c];
        let mut rstd = vec![T::zero(); r];
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() * inv_c;
            let rs = T::one() / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let needs = self.needs(&[x, gamma, beta]);
        Ok(self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            Cow::Owned(out),
            r,
            c,
            needs,
        ))
    }

    /// Inverted dropout. Identity when `train` is false or `rate` is zero.
    pub fn dropout(&mut self, a: Var, rate: f64, train: bool, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::InvalidArgument {
                op: "dropout",
                msg: format!("rate {rate} outside [0, 1)"),
            });
        }
        if !train || rate == 0.0 {
            return Ok(a);
        }
        let (r, c) = self.dims(a);
        let keep = dropout_mask::<T>(r * c, rate, seed);
        let out = self
            .value(a)
            .iter()
            .zip(&keep)
            .map(|(x, m)| *x * *m)
            .collect();
        let needs = self.needs(&[a]);
        Ok(self.push(Op::Dropout(a, keep), Cow::Owned(out), r, c, needs))
    }

    // ---- indexing and reshaping ----------------------------------------

    /// Gathers rows of `table` (`[vocab, dim]`).
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims(table);
        if ids.is_empty() {
            return Err(TensorError::Empty {
                op: "embedding_lookup",
            });
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "embedding_lookup",
                    index: id,
                    bound: v,
                });
            }
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let needs = self.needs(&[table]);
        Ok(self.push(
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            Cow::Owned(out),
            ids.len(),
            d,
            needs,
        ))
    }

    /// Mean of rows `start..end`, as a `[1, cols]` row.
    pub fn mean_over(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if start >= end {
            return Err(TensorError::Empty { op: "mean_over" });
        }
        if end > r {
            return Err(TensorError::IndexOutOfRange {
                op: "mean_over",
                index: end,
                bound: r,
            });
        }
        let xv = self.value(x);
        let mut out = vec![T::zero(); c];
        for i in start..end {
            axpy(T::one(), &xv[i * c..(i + 1) * c], &mut out);
        }
        let inv = T::one() / T::from_usize(end - start).expect("usize fits");
        out.iter_mut().for_each(|v| *v = *v * inv);
        let needs = self.needs(&[x]);
        Ok(self.push(Op::MeanRows { x, start, end }, Cow::Owned(out), 1, c, needs))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if start >= end || end > r {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_rows",
                index: end,
                bound: r,
            });
        }
        let out = self.value(x)[start * c..end * c].to_vec();
        let needs = self.needs(&[x]);
        Ok(self.push(
            Op::SliceRows { x, start },
            Cow::Owned(out),
            end - start,
            c,
            needs,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if start >= end || end > c {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: end,
                bound: c,
            });
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            out.extend_from_slice(&xv[i * c + start..i * c + end]);
        }
        let needs = self.needs(&[x]);
        Ok(self.push(
            Op::SliceCols { x, start },
            Cow::Owned(out),
            r,
            end - start,
            needs,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(TensorError::Empty { op: "concat" })?;
        let c = self.dims(first).1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (pr, pc) = self.dims(p);
            if pc != c {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: vec![rows, c],
                    rhs: vec![pr, pc],
                });
            }
            rows += pr;
            out.extend_from_slice(self.value(p));
        }
        let needs = self.needs(parts);
        Ok(self.push(
            Op::ConcatRows(parts.to_vec()),
            Cow::Owned(out),
            rows,
            c,
            needs,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(TensorError::Empty { op: "concat" })?;
        let r = self.dims(first).0;
        let mut cols = 0;
        for &p in parts {
            let (pr, pc) = self.dims(p);
            if pr != r {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: vec![r, cols],
                    rhs: vec![pr, pc],
                });
            }
            cols += pc;
        }
        let mut out = Vec::with_capacity(r * cols);
        for i in 0..r {
            for &p in parts {
                let pc = self.dims(p).1;
                out.extend_from_slice(&self.value(p)[i * pc..(i + 1) * pc]);
            }
        }
        let needs = self.needs(parts);
        Ok(self.push(
            Op::ConcatCols(parts.to_vec()),
            Cow::Owned(out),
            r,
            cols,
            needs,
        ))
    }

    // ---- losses ---------------------------------------------------------

    /// Mean cross-entropy of `logits` (`[batch, classes]`) against integer
    /// labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = self.dims(logits);
        if labels.len() != b {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: vec![b, c],
                rhs: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(TensorError::IndexOutOfRange {
                op: "cross_entropy",
                index: bad,
                bound: c,
            });
        }
        let mut probs = self.value(logits).to_vec();
        let mut loss = T::zero();
        for (row, &y) in probs.chunks_mut(c).zip(labels) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|x| (*x - max).exp()).sum::<T>().ln() + max;
            loss = loss + lse - row[y];
            kernels::softmax_row(row);
        }
        loss = loss / T::from_usize(b).expect("usize fits");
        let needs = self.needs(&[logits]);
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            Cow::Owned(vec![loss]),
            1,
            1,
            needs,
        ))
    }

    // ---- fused attention -----------------------------------------------

    /// Multi-head scaled dot-product attention restricted to contiguous
    /// row segments: rows attend only to rows of their own segment, which
    /// costs `Σ nᵢ²` score entries instead of `(Σ nᵢ)²`.
    ///
    /// `segments` must partition `0..rows` in order. `attn_dropout` is
    /// applied to the probabilities when `train` is set.
    #[allow(clippy::too_many_arguments)]
    pub fn segment_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segments: &[(usize, usize)],
        heads: usize,
        attn_dropout: f64,
        train: bool,
        seed: u64,
    ) -> Result<Var> {
        let (n, d) = self.dims(q);
        for other in [k, v] {
            if self.dims(other) != (n, d) {
                let (r, c) = self.dims(other);
                return Err(TensorError::ShapeMismatch {
                    op: "segment_attention",
                    lhs: vec![n, d],
                    rhs: vec![r, c],
                });
            }
        }
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::InvalidArgument {
                op: "segment_attention",
                msg: format!("dim {d} not divisible by {heads} heads"),
            });
        }
        let mut expect = 0;
        for &(s, e) in segments {
            if s != expect || e <= s {
                return Err(TensorError::InvalidArgument {
                    op: "segment_attention",
                    msg: format!("segments must partition rows contiguously; got ({s}, {e}) at {expect}"),
                });
            }
            expect = e;
        }
        if expect != n {
            return Err(TensorError::InvalidArgument {
                op: "segment_attention",
                msg: format!("segments cover {expect} of {n} rows"),
            });
        }
        let hd = d / heads;
        let scale = T::one() / T::from_usize(hd).expect("usize fits").sqrt();
        let mut offsets = Vec::with_capacity(segments.len() * heads);
        let mut total = 0;
        for &(s, e) in segments {
            for _ in 0..heads {
                offsets.push(total);
                total += (e - s) * (e - s);
            }
        }
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![T::zero(); total];
        for (si, &(s, e)) in segments.iter().enumerate() {
            let len = e - s;
            for h in 0..heads {
                let block = &mut probs[offsets[si * heads + h]..][..len * len];
                let cols = h * hd..(h + 1) * hd;
                for i in 0..len {
                    let qrow = &qv[(s + i) * d..][cols.clone()];
                    let prow = &mut block[i * len..(i + 1) * len];
                    for (j, p) in prow.iter_mut().enumerate() {
                        *p = dot(qrow, &kv[(s + j) * d..][cols.clone()]) * scale;
                    }
                    kernels::softmax_row(prow);
                }
            }
        }
        let keep = if train && attn_dropout > 0.0 {
            if attn_dropout >= 1.0 {
                return Err(TensorError::InvalidArgument {
                    op: "segment_attention",
                    msg: format!("attention dropout {attn_dropout} outside [0, 1)"),
                });
            }
            Some(dropout_mask::<T>(total, attn_dropout, seed))
        } else {
            None
        };
        let mut out = vec![T::zero(); n * d];
        for (si, &(s, e)) in segments.iter().enumerate() {
            let len = e - s;
            for h in 0..heads {
                let off = offsets[si * heads + h];
                for i in 0..len {
                    let orow = &mut out[(s + i) * d + h * hd..(s + i) * d + (h + 1) * hd];
                    for j in 0..len {
                        let mut p = probs[off + i * len + j];
                        if let Some(m) = &keep {
                            p = p * m[off + i * len + j];
                        }
                        axpy(p, &vv[(s + j) * d + h * hd..(s + j) * d + (h + 1) * hd], orow);
                    }
                }
            }
        }
        let needs = self.needs(&[q, k, v]);
        Ok(self.push(
            Op::SegmentAttention(Box::new(SegmentAttention {
                q,
                k,
                v,
                segments: segments.to_vec(),
                heads,
                head_dim: hd,
                scale,
                offsets,
                probs,
                keep,
            })),
            Cow::Owned(out),
            n,
            d,
            needs,
        ))
    }

    /// Dense `[rows, rows]` attention probabilities (before dropout) of one
    /// head of a [`Tape::segment_attention`] node. Entries outside the
    /// diagonal blocks are exactly zero.
    pub fn segment_attention_weights(&self, v: Var, head: usize) -> Option<Vec<T>> {
        let node = self.node(v);
        let Op::SegmentAttention(att) = &node.op else {
            return None;
        };
        if head >= att.heads {
            return None;
        }
        let n = node.rows;
        let mut dense = vec![T::zero(); n * n];
        for (si, &(s, e)) in att.segments.iter().enumerate() {
            let len = e - s;
            let off = att.offsets[si * att.heads + head];
            for i in 0..len {
                for j in 0..len {
                    dense[(s + i) * n + s + j] = att.probs[off + i * len + j];
                }
            }
        }
        Some(dense)
    }

    // ---- backward -------------------------------------------------------

    /// Backpropagates from a `[1, 1]` value. Gradients of every recorded
    /// value that depends on a trainable leaf become available via
    /// [`Tape::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let (r, c) = self.dims(loss);
        if (r, c) != (1, 1) {
            return Err(TensorError::ShapeMismatch {
                op: "backward",
                lhs: vec![r, c],
                rhs: vec![1, 1],
            });
        }
        self.backward_with(loss, vec![T::one()])
    }

    /// Backpropagates an explicit output cotangent `seed` for `out`.
    pub fn backward_with(&mut self, out: Var, seed: Vec<T>) -> Result<()> {
        let (r, c) = self.dims(out);
        if seed.len() != r * c {
            return Err(TensorError::ShapeMismatch {
                op: "backward",
                lhs: vec![r, c],
                rhs: vec![seed.len()],
            });
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[out.0] = Some(seed);
        let nodes = &self.nodes;
        for idx in (0..=out.0).rev() {
            let (before, rest) = self.grads.split_at_mut(idx);
            let Some(g) = rest[0].as_deref() else {
                continue;
            };
            let node = &nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let mut sink = Sink {
                grads: before,
                nodes,
            };
            backprop_node(node, g, &mut sink);
        }
        Ok(())
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn dropout_mask<T: Scalar>(len: usize, rate: f64, seed: u64) -> Vec<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = T::of(1.0 / (1.0 - rate));
    (0..len)
        .map(|_| {
            if rng.random::<f64>() < rate {
                T::zero()
            } else {
                scale
            }
        })
        .collect()
}

struct Sink<'g, 'n, 'a, T: Scalar> {
    grads: &'g mut [Option<Vec<T>>],
    nodes: &'n [Node<'a, T>],
}

impl<'g, 'n, 'a, T: Scalar> Sink<'g, 'n, 'a, T> {
    /// Gradient buffer for `v`, or `None` if `v` carries no gradient.
    fn buf(&mut self, v: Var) -> Option<&mut [T]> {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return None;
        }
        let len = node.rows * node.cols;
        Some(
            self.grads[v.0]
                .get_or_insert_with(|| vec![T::zero(); len])
                .as_mut_slice(),
        )
    }

    fn value(&self, v: Var) -> &'n [T] {
        &self.nodes[v.0].value
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }
}

fn backprop_node<T: Scalar>(node: &Node<'_, T>, g: &[T], sink: &mut Sink<'_, '_, '_, T>) {
    let (rows, cols) = (node.rows, node.cols);
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = sink.dims(*a);
            let n = cols;
            let (av, bv) = (sink.value(*a), sink.value(*b));
            if let Some(da) = sink.buf(*a) {
                kernels::gemm_nt(m, n, k, g, bv, da);
            }
            if let Some(db) = sink.buf(*b) {
                kernels::gemm_tn(m, k, n, av, g, db);
            }
        }
        Op::Transpose(a) => {
            if let Some(da) = sink.buf(*a) {
                let t = kernels::transpose(rows, cols, g);
                axpy(T::one(), &t, da);
            }
        }
        Op::Add(a, b, bc) => {
            if let Some(da) = sink.buf(*a) {
                axpy(T::one(), g, da);
            }
            if let Some(db) = sink.buf(*b) {
                match bc {
                    Broadcast::Full => axpy(T::one(), g, db),
                    Broadcast::Row => g.chunks(cols).for_each(|row| axpy(T::one(), row, db)),
                    Broadcast::Scalar => db[0] = db[0] + g.iter().copied().sum(),
                }
            }
        }
        Op::Mul(a, b, bc) => {
            let (av, bv) = (sink.value(*a), sink.value(*b));
            if let Some(da) = sink.buf(*a) {
                match bc {
                    Broadcast::Full => {
                        for ((d, gv), y) in da.iter_mut().zip(g).zip(bv) {
                            *d = *d + *gv * *y;
                        }
                    }
                    Broadcast::Row => {
                        for (drow, grow) in da.chunks_mut(cols).zip(g.chunks(cols)) {
                            for ((d, gv), y) in drow.iter_mut().zip(grow).zip(bv) {
                                *d = *d + *gv * *y;
                            }
                        }
                    }
                    Broadcast::Scalar => axpy(bv[0], g, da),
                }
            }
            if let Some(db) = sink.buf(*b) {
                match bc {
                    Broadcast::Full => {
                        for ((d, gv), x) in db.iter_mut().zip(g).zip(av) {
                            *d = *d + *gv * *x;
                        }
                    }
                    Broadcast::Row => {
                        for (grow, arow) in g.chunks(cols).zip(av.chunks(cols)) {
                            for ((d, gv), x) in db.iter_mut().zip(grow).zip(arow) {
                                *d = *d + *gv * *x;
                            }
                        }
                    }
                    Broadcast::Scalar => db[0] = db[0] + dot(g, av),
                }
            }
        }
        Op::Affine(a, scale) => {
            if let Some(da) = sink.buf(*a) {
                axpy(*scale, g, da);
            }
        }
        Op::Sigmoid(a) => {
            let y = &node.value;
            if let Some(da) = sink.buf(*a) {
                for ((d, gv), y) in da.iter_mut().zip(g).zip(y.iter()) {
                    *d = *d + *gv * *y * (T::one() - *y);
                }
            }
        }
        Op::Softmax(a) => {
            let y = &node.value;
            if let Some(da) = sink.buf(*a) {
                for ((drow, grow), yrow) in da
                    .chunks_mut(cols)
                    .zip(g.chunks(cols))
                    .zip(y.chunks(cols))
                {
                    let s = dot(grow, yrow);
                    for ((d, gv), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d = *d + *yv * (*gv - s);
                    }
                }
            }
        }
        Op::MaskedFill(a, mask) => {
            if let Some(da) = sink.buf(*a) {
                for ((d, gv), m) in da.iter_mut().zip(g).zip(mask) {
                    if !m {
                        *d = *d + *gv;
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let gv = sink.value(*gamma);
            let inv_c = T::one() / T::from_usize(cols).expect("usize fits");
            if let Some(dx) = sink.buf(*x) {
                let mut dxhat = vec![T::zero(); cols];
                for i in 0..rows {
                    let grow = &g[i * cols..(i + 1) * cols];
                    let hrow = &xhat[i * cols..(i + 1) * cols];
                    for j in 0..cols {
                        dxhat[j] = grow[j] * gv[j];
                    }
                    let m1 = dxhat.iter().copied().sum::<T>() * inv_c;
                    let m2 = dot(&dxhat, hrow) * inv_c;
                    let drow = &mut dx[i * cols..(i + 1) * cols];
                    for j in 0..cols {
                        drow[j] = drow[j] + rstd[i] * (dxhat[j] - m1 - hrow[j] * m2);
                    }
                }
            }
            if let Some(dg) = sink.buf(*gamma) {
                for (grow, hrow) in g.chunks(cols).zip(xhat.chunks(cols)) {
                    for ((d, gv), h) in dg.iter_mut().zip(grow).zip(hrow) {
                        *d = *d + *gv * *h;
                    }
                }
            }
            if let Some(db) = sink.buf(*beta) {
                g.chunks(cols).for_each(|row| axpy(T::one(), row, db));
            }
        }
        Op::Gelu(a) => {
            let xv = sink.value(*a);
            if let Some(da) = sink.buf(*a) {
                for ((d, gv), x) in da.iter_mut().zip(g).zip(xv) {
                    *d = *d + *gv * kernels::gelu_grad(*x);
                }
            }
        }
        Op::Dropout(a, keep) => {
            if let Some(da) = sink.buf(*a) {
                for ((d, gv), m) in da.iter_mut().zip(g).zip(keep) {
                    *d = *d + *gv * *m;
                }
            }
        }
        Op::Embedding { table, ids } => {
            if let Some(dt) = sink.buf(*table) {
                for (row, &id) in g.chunks(cols).zip(ids) {
                    axpy(T::one(), row, &mut dt[id * cols..(id + 1) * cols]);
                }
            }
        }
        Op::MeanRows { x, start, end } => {
            if let Some(dx) = sink.buf(*x) {
                let inv = T::one() / T::from_usize(end - start).expect("usize fits");
                for i in *start..*end {
                    axpy(inv, g, &mut dx[i * cols..(i + 1) * cols]);
                }
            }
        }
        Op::SliceRows { x, start } => {
            if let Some(dx) = sink.buf(*x) {
                axpy(T::one(), g, &mut dx[start * cols..(start + rows) * cols]);
            }
        }
        Op::SliceCols { x, start } => {
            let xc = sink.dims(*x).1;
            if let Some(dx) = sink.buf(*x) {
                for (i, grow) in g.chunks(cols).enumerate() {
                    axpy(T::one(), grow, &mut dx[i * xc + start..i * xc + start + cols]);
                }
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let (pr, _) = sink.dims(p);
                if let Some(dp) = sink.buf(p) {
                    axpy(T::one(), &g[offset * cols..(offset + pr) * cols], dp);
                }
                offset += pr;
            }
        }
        Op::ConcatCols(parts) => {
            let mut offset = 0;
            for &p in parts {
                let (_, pc) = sink.dims(p);
                if let Some(dp) = sink.buf(p) {
                    for i in 0..rows {
                        axpy(
                            T::one(),
                            &g[i * cols + offset..i * cols + offset + pc],
                            &mut dp[i * pc..(i + 1) * pc],
                        );
                    }
                }
                offset += pc;
            }
        }
        Op::CrossEntropy {
            logits,
            labels,
            probs,
        } => {
            let c = sink.dims(*logits).1;
            let b = labels.len();
            let scale = g[0] / T::from_usize(b).expect("usize fits");
            if let Some(dl) = sink.buf(*logits) {
                for (i, &y) in labels.iter().enumerate() {
                    for j in 0..c {
                        let onehot = if j == y { T::one() } else { T::zero() };
                        dl[i * c + j] = dl[i * c + j] + scale * (probs[i * c + j] - onehot);
                    }
                }
            }
        }
        Op::SumAll(a) => {
            if let Some(da) = sink.buf(*a) {
                da.iter_mut().for_each(|d| *d = *d + g[0]);
            }
        }
        Op::SegmentAttention(att) => backprop_segment_attention(att, cols, g, sink),
    }
}

fn backprop_segment_attention<T: Scalar>(
    att: &SegmentAttention<T>,
    d: usize,
    g: &[T],
    sink: &mut Sink<'_, '_, '_, T>,
) {
    let (qv, kv, vv) = (sink.value(att.q), sink.value(att.k), sink.value(att.v));
    let n = qv.len() / d;
    let hd = att.head_dim;
    let mut dq = vec![T::zero(); n * d];
    let mut dk = vec![T::zero(); n * d];
    let mut dv = vec![T::zero(); n * d];
    let mut dp = Vec::new();
    for (si, &(s, e)) in att.segments.iter().enumerate() {
        let len = e - s;
        for h in 0..att.heads {
            let off = att.offsets[si * att.heads + h];
            let p = &att.probs[off..off + len * len];
            let keep = att.keep.as_ref().map(|m| &m[off..off + len * len]);
            let col = |row: usize| (s + row) * d + h * hd..(s + row) * d + (h + 1) * hd;
            dp.clear();
            dp.resize(len * len, T::zero());
            for i in 0..len {
                let grow = &g[col(i)];
                for j in 0..len {
                    let mut pij = p[i * len + j];
                    let mut dpij = dot(grow, &vv[col(j)]);
                    if let Some(m) = keep {
                        pij = pij * m[i * len + j];
                        dpij = dpij * m[i * len + j];
                    }
                    axpy(pij, grow, &mut dv[col(j)]);
                    dp[i * len + j] = dpij;
                }
            }
            for i in 0..len {
                let prow = &p[i * len..(i + 1) * len];
                let drow = &mut dp[i * len..(i + 1) * len];
                let s_i = dot(prow, drow);
                for (dv_, pv) in drow.iter_mut().zip(prow) {
                    *dv_ = *pv * (*dv_ - s_i) * att.scale;
                }
            }
            for i in 0..len {
                for j in 0..len {
                    let ds = dp[i * len + j];
                    if ds == T::zero() {
                        continue;
                    }
                    axpy(ds, &kv[col(j)], &mut dq[col(i)]);
                    axpy(ds, &qv[col(i)], &mut dk[col(j)]);
                }
            }
        }
    }
    for (var, grad) in [(att.q, dq), (att.k, dk), (att.v, dv)] {
        if let Some(buf) = sink.buf(var) {
            axpy(T::one(), &grad, buf);
        }
    }
}
