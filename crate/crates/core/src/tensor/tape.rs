use super::kernels::{self, ConvGeom};
use super::{numel, Real, Tensor};
use crate::error::{dim_err, Result, SatError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        c: T,
    },
    AddScalar {
        a: Var,
    },
    Tanh {
        a: Var,
    },
    Gelu {
        a: Var,
        tanh: Vec<T>,
    },
    SoftmaxRows {
        a: Var,
        cols: usize,
    },
    LogSoftmaxRows {
        a: Var,
        cols: usize,
    },
    LayerNorm {
        a: Var,
        gain: Var,
        bias: Var,
        d: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        batch: usize,
        out_channels: usize,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    AvgPoolGlobal {
        a: Var,
        area: usize,
    },
    Reshape {
        a: Var,
    },
    Permute {
        a: Var,
        perm: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Narrow {
        a: Var,
        axis: usize,
        start: usize,
    },
    SumAll {
        a: Var,
    },
    MeanAll {
        a: Var,
    },
    SumLast {
        a: Var,
        cols: usize,
    },
    BroadcastLast {
        a: Var,
        n: usize,
    },
    TileLeading {
        a: Var,
        n: usize,
    },
    PickLast {
        a: Var,
        cols: usize,
        index: Vec<usize>,
    },
    BiasMatrix {
        d: Var,
        regions: usize,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::BatchMatMul { .. } => "bmm",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::AddScalar { .. } => "add_scalar",
            Op::Tanh { .. } => "tanh",
            Op::Gelu { .. } => "gelu",
            Op::SoftmaxRows { .. } => "softmax_rows",
            Op::LogSoftmaxRows { .. } => "log_softmax_rows",
            Op::LayerNorm { .. } => "layernorm",
            Op::Conv2d { .. } => "conv2d",
            Op::AvgPoolGlobal { .. } => "avgpool_global",
            Op::Reshape { .. } => "reshape",
            Op::Permute { .. } => "permute",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::SumAll { .. } => "sum_all",
            Op::MeanAll { .. } => "mean_all",
            Op::SumLast { .. } => "sum_last",
            Op::BroadcastLast { .. } => "broadcast_last",
            Op::TileLeading { .. } => "tile_leading",
            Op::PickLast { .. } => "pick_last",
            Op::BiasMatrix { .. } => "bias_matrix",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
    op: Op<T>,
}

/// A Wengert list. Nodes are appended in evaluation order, so every op's
/// inputs precede it and a reverse sweep visits each op once.
///
/// Gradients are retained on leaves only; repeated `backward` calls add into
/// the retained buffers until [`Tape::zero_grad`].
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn suffix_of(outer: &[usize], inner: &[usize]) -> bool {
    inner.len() <= outer.len() && outer[outer.len() - inner.len()..] == *inner
}

/// Shape with the last axis removed; rank-1 inputs reduce to `[1]`.
fn drop_last(shape: &[usize]) -> Vec<usize> {
    if shape.len() <= 1 {
        vec![1]
    } else {
        shape[..shape.len() - 1].to_vec()
    }
}

fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A trainable input; gradients are retained for it.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push_unchecked(value, true, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_unchecked(value, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push_unchecked(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node { value, requires_grad, grad: None, op });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, inputs: &[Var], op: Op<T>) -> Result<Var> {
        // Branch-free scan first; locate the culprit only on failure.
        let bad = data.iter().fold(false, |acc, v| acc | !v.is_finite());
        if let Some(pos) = bad.then(|| data.iter().position(|v| !v.is_finite())).flatten() {
            return Err(SatError::Numerical(format!("{} produced a non-finite value at flat index {pos}", op.name())));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let value = Tensor::new(shape, data)?;
        Ok(self.push_unchecked(value, requires_grad, op))
    }

    // ---------------------------------------------------------------- linear algebra

    /// a[m,k] · b[k,n]
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(dim_err!("matmul of {sa:?} and {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        kernels::mm(self.data(a), self.data(b), &mut out, m, k, n);
        self.push(vec![m, n], out, &[a, b], Op::MatMul { a, b, m, k, n })
    }

    /// Batched a[B,m,k] · b[B,k,n], or a · bᵀ for b[B,n,k] when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ok =
            sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && if trans_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(dim_err!("bmm(trans_b={trans_b}) of {sa:?} and {sb:?}"));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let (da, db) = (self.data(a), self.data(b));
        let mut out = vec![T::zero(); batch * m * n];
        for bi in 0..batch {
            let ab = &da[bi * m * k..(bi + 1) * m * k];
            let bb = &db[bi * k * n..(bi + 1) * k * n];
            let cb = &mut out[bi * m * n..(bi + 1) * m * n];
            if trans_b {
                kernels::mm_nt(ab, bb, cb, m, k, n);
            } else {
                kernels::mm(ab, bb, cb, m, k, n);
            }
        }
        self.push(vec![batch, m, n], out, &[a, b], Op::BatchMatMul { a, b, batch, m, k, n, trans_b })
    }

    // ---------------------------------------------------------------- elementwise

    fn binary_shapes(&self, a: Var, b: Var, name: &str) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !suffix_of(sa, sb) {
            return Err(dim_err!("{name}: {sb:?} does not broadcast onto {sa:?}"));
        }
        Ok(sa.to_vec())
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(T, T) -> T) -> Result<(Vec<usize>, Vec<T>)> {
        let shape = self.binary_shapes(a, b, name)?;
        let (da, db) = (self.data(a), self.data(b));
        let nb = db.len();
        let mut out = Vec::with_capacity(da.len());
        for chunk in da.chunks(nb) {
            out.extend(chunk.iter().zip(db).map(|(&x, &y)| f(x, y)));
        }
        Ok((shape, out))
    }

    /// a + b, where b's shape is a trailing suffix of a's.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.binary(a, b, "add", |x, y| x + y)?;
        self.push(shape, out, &[a, b], Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.binary(a, b, "sub", |x, y| x - y)?;
        self.push(shape, out, &[a, b], Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.binary(a, b, "mul", |x, y| x * y)?;
        self.push(shape, out, &[a, b], Op::Mul { a, b })
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let out = self.data(a).iter().map(|&x| x * c).collect();
        self.push(self.shape(a).to_vec(), out, &[a], Op::Scale { a, c })
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        let out = self.data(a).iter().map(|&x| x + c).collect();
        self.push(self.shape(a).to_vec(), out, &[a], Op::AddScalar { a })
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.data(a).iter().map(|&x| x.tanh()).collect();
        self.push(self.shape(a).to_vec(), out, &[a], Op::Tanh { a })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let src = self.data(a);
        let tanh: Vec<T> = src.iter().map(|&x| kernels::gelu_tanh(x)).collect();
        let out = src.iter().zip(&tanh).map(|(&x, &t)| kernels::gelu_from_tanh(x, t)).collect();
        self.push(self.shape(a).to_vec(), out, &[a], Op::Gelu { a, tanh })
    }

    // ---------------------------------------------------------------- normalization

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let cols = *shape.last().expect("non-empty shape");
        let src = self.data(a);
        let mut out = vec![T::zero(); src.len()];
        for (row, dst) in src.chunks(cols).zip(out.chunks_mut(cols)) {
            kernels::softmax_row(row, dst);
        }
        self.push(shape, out, &[a], Op::SoftmaxRows { a, cols })
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let cols = *shape.last().expect("non-empty shape");
        let src = self.data(a);
        let mut out = vec![T::zero(); src.len()];
        for (row, dst) in src.chunks(cols).zip(out.chunks_mut(cols)) {
            kernels::log_softmax_row(row, dst);
        }
        self.push(shape, out, &[a], Op::LogSoftmaxRows { a, cols })
    }

    /// Layer normalization over the last axis (biased variance).
    pub fn layernorm(&mut self, a: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(SatError::Contract(format!("layernorm eps must be positive, got {eps}")));
        }
        let shape = self.shape(a).to_vec();
        let d = *shape.last().expect("non-empty shape");
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(dim_err!(
                "layernorm over width {d} with gain {:?} and bias {:?}",
                self.shape(gain),
                self.shape(bias)
            ));
        }
        let (src, g, bvals) = (self.data(a), self.data(gain), self.data(bias));
        let rows = src.len() / d;
        let inv_d = T::one() / T::of(d as f64);
        let eps = T::of(eps);
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); src.len()];
        for r in 0..rows {
            let x = &src[r * d..(r + 1) * d];
            let mut mean = T::zero();
            for &v in x {
                mean += v;
            }
            mean *= inv_d;
            let mut var = T::zero();
            for &v in x {
                var += (v - mean) * (v - mean);
            }
            var *= inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (x[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + bvals[j];
            }
        }
        self.push(shape, out, &[a, gain, bias], Op::LayerNorm { a, gain, bias, d, xhat, rstd })
    }

    // ---------------------------------------------------------------- convolution

    /// 2-D convolution: input[N,C,H,W] ⊛ kernel[O,C,k,k] (+ bias[O]) → [N,O,H',W'].
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (si, sk) = (self.shape(input).to_vec(), self.shape(kernel).to_vec());
        if si.len() != 4 || sk.len() != 4 || si[1] != sk[1] || sk[2] != sk[3] || stride == 0 {
            return Err(dim_err!("conv2d of input {si:?} with kernel {sk:?}, stride {stride}"));
        }
        let (batch, channels, height, width) = (si[0], si[1], si[2], si[3]);
        let (out_channels, ksize) = (sk[0], sk[2]);
        if height + 2 * padding < ksize || width + 2 * padding < ksize {
            return Err(dim_err!("conv2d kernel {ksize} larger than padded input {height}x{width}"));
        }
        if let Some(b) = bias {
            if self.shape(b) != [out_channels] {
                return Err(dim_err!("conv2d bias {:?} for {out_channels} channels", self.shape(b)));
            }
        }
        let geom = ConvGeom {
            channels,
            height,
            width,
            kernel: ksize,
            stride,
            padding,
            out_h: (height + 2 * padding - ksize) / stride + 1,
            out_w: (width + 2 * padding - ksize) / stride + 1,
        };
        // The whole batch is unfolded side by side: cols[C·k·k, N·P].
        let (plen, pos) = (geom.patch_len(), geom.positions());
        let img_len = channels * height * width;
        let ld = batch * pos;
        let src = self.data(input);
        let mut cols = vec![T::zero(); plen * ld];
        for n in 0..batch {
            kernels::im2col(&src[n * img_len..(n + 1) * img_len], &geom, &mut cols, ld, n * pos);
        }
        let mut wide = vec![T::zero(); out_channels * ld];
        kernels::mm(self.data(kernel), &cols, &mut wide, out_channels, plen, ld);
        let bvals = bias.map(|b| self.data(b));
        let mut out = vec![T::zero(); batch * out_channels * pos];
        for (o, row) in wide.chunks(ld).enumerate() {
            let b = bvals.map_or(T::zero(), |bv| bv[o]);
            for n in 0..batch {
                let dst = &mut out[(n * out_channels + o) * pos..(n * out_channels + o + 1) * pos];
                for (d, &v) in dst.iter_mut().zip(&row[n * pos..(n + 1) * pos]) {
                    *d = b + v;
                }
            }
        }
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        self.push(
            vec![batch, out_channels, geom.out_h, geom.out_w],
            out,
            &inputs,
            Op::Conv2d { input, kernel, bias, batch, out_channels, geom, cols },
        )
    }

    /// Mean over the two trailing (spatial) axes: [N,C,H,W] → [N,C].
    pub fn avgpool_global(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 {
            return Err(dim_err!("avgpool_global expects [N,C,H,W], got {s:?}"));
        }
        let area = s[2] * s[3];
        let inv = T::one() / T::of(area as f64);
        let out = self
            .data(a)
            .chunks(area)
            .map(|plane| {
                let mut acc = T::zero();
                for &v in plane {
                    acc += v;
                }
                acc * inv
            })
            .collect();
        self.push(vec![s[0], s[1]], out, &[a], Op::AvgPoolGlobal { a, area })
    }

    // ---------------------------------------------------------------- layout

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(a).numel() {
            return Err(dim_err!("cannot reshape {:?} into {shape:?}", self.shape(a)));
        }
        let out = self.data(a).to_vec();
        self.push(shape.to_vec(), out, &[a], Op::Reshape { a })
    }

    /// Output axis i is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a);
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(dim_err!("invalid permutation {perm:?} for shape {shape:?}"));
        }
        let (out, out_shape) = kernels::permute(self.data(a), shape, perm);
        self.push(out_shape, out, &[a], Op::Permute { a, perm: perm.to_vec() })
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| dim_err!("concat of zero tensors"))?).to_vec();
        if axis >= first.len() {
            return Err(dim_err!("concat axis {axis} out of range for {first:?}"));
        }
        let mut out_shape = first.clone();
        out_shape[axis] = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible =
                s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(dim_err!("concat along {axis}: {s:?} vs {first:?}"));
            }
            out_shape[axis] += s[axis];
        }
        let (outer, _, inner) = split_at_axis(&out_shape, axis);
        let mut out = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for &p in parts {
                let chunk = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.data(p)[o * chunk..(o + 1) * chunk]);
            }
        }
        self.push(out_shape, out, parts, Op::Concat { parts: parts.to_vec(), axis })
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(dim_err!("narrow(axis={axis}, {start}..{}) of {shape:?}", start + len));
        }
        let (outer, size, inner) = split_at_axis(&shape, axis);
        let src = self.data(a);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * size + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.push(out_shape, out, &[a], Op::Narrow { a, axis, start })
    }

    /// [..] → [n, ..] by repetition.
    pub fn tile_leading(&mut self, a: Var, n: usize) -> Result<Var> {
        if n == 0 {
            return Err(dim_err!("tile_leading by zero"));
        }
        let src = self.data(a);
        let mut out = Vec::with_capacity(src.len() * n);
        for _ in 0..n {
            out.extend_from_slice(src);
        }
        let mut shape = vec![n];
        shape.extend_from_slice(self.shape(a));
        self.push(shape, out, &[a], Op::TileLeading { a, n })
    }

    /// [..] → [.., n] by repetition along a new trailing axis.
    pub fn broadcast_last(&mut self, a: Var, n: usize) -> Result<Var> {
        if n == 0 {
            return Err(dim_err!("broadcast_last by zero"));
        }
        let out = self.data(a).iter().flat_map(|&v| std::iter::repeat_n(v, n)).collect();
        let mut shape = self.shape(a).to_vec();
        if shape == [1] {
            shape.clear();
        }
        shape.push(n);
        self.push(shape, out, &[a], Op::BroadcastLast { a, n })
    }

    // ---------------------------------------------------------------- reductions

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let mut acc = T::zero();
        for &v in self.data(a) {
            acc += v;
        }
        self.push(vec![1], vec![acc], &[a], Op::SumAll { a })
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let mut acc = T::zero();
        for &v in self.data(a) {
            acc += v;
        }
        let n = T::of(self.value(a).numel() as f64);
        self.push(vec![1], vec![acc / n], &[a], Op::MeanAll { a })
    }

    /// Sum over the last axis.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let cols = *shape.last().expect("non-empty shape");
        let out = self
            .data(a)
            .chunks(cols)
            .map(|row| {
                let mut acc = T::zero();
                for &v in row {
                    acc += v;
                }
                acc
            })
            .collect();
        self.push(drop_last(&shape), out, &[a], Op::SumLast { a, cols })
    }

    /// Selects one entry per row of the last axis: out[i] = a[i, index[i]].
    pub fn pick_last(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let cols = *shape.last().expect("non-empty shape");
        let rows = self.value(a).numel() / cols;
        if index.len() != rows || index.iter().any(|&i| i >= cols) {
            return Err(dim_err!("pick_last with {} indices (max {:?}) on {shape:?}", index.len(), index.iter().max()));
        }
        let src = self.data(a);
        let out = index.iter().enumerate().map(|(r, &i)| src[r * cols + i]).collect();
        self.push(drop_last(&shape), out, &[a], Op::PickLast { a, cols, index: index.to_vec() })
    }

    /// Places d[R] on the CLS-query / own-region-key diagonal of a [2R,2R] matrix:
    /// out[i][R+i] = d[i]; every other entry is zero.
    pub fn bias_matrix(&mut self, d: Var, regions: usize) -> Result<Var> {
        if self.shape(d) != [regions] {
            return Err(dim_err!("bias_matrix needs [{regions}] values, got {:?}", self.shape(d)));
        }
        let n = 2 * regions;
        let mut out = vec![T::zero(); n * n];
        for (i, &v) in self.data(d).iter().enumerate() {
            out[i * n + regions + i] = v;
        }
        self.push(vec![n, n], out, &[d], Op::BiasMatrix { d, regions })
    }

    // ---------------------------------------------------------------- backward

    /// Reverse sweep from a scalar. Leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(SatError::Contract(format!("backward needs a scalar loss, got shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            if let Some(g) = grads[i].take() {
                self.backprop(i, &g, &mut grads);
            }
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if let (Op::Leaf, true, Some(g)) = (&node.op, node.requires_grad, g) {
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    None => node.grad = Some(g),
                }
            }
        }
        Ok(())
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); node.value.numel()]))
    }

    fn backprop(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out = self.nodes[i].value.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if let Some(ga) = self.slot(grads, a) {
                    kernels::mm_nt(g, self.data(b), ga, m, n, k);
                }
                if let Some(gb) = self.slot(grads, b) {
                    kernels::mm_tn(self.data(a), g, gb, m, k, n);
                }
            }
            &Op::BatchMatMul { a, b, batch, m, k, n, trans_b } => {
                let (da, db) = (self.data(a), self.data(b));
                if let Some(ga) = self.slot(grads, a) {
                    for bi in 0..batch {
                        let gs = &g[bi * m * n..(bi + 1) * m * n];
                        let bs = &db[bi * k * n..(bi + 1) * k * n];
                        let dst = &mut ga[bi * m * k..(bi + 1) * m * k];
                        if trans_b {
                            kernels::mm(gs, bs, dst, m, n, k);
                        } else {
                            kernels::mm_nt(gs, bs, dst, m, n, k);
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, b) {
                    for bi in 0..batch {
                        let gs = &g[bi * m * n..(bi + 1) * m * n];
                        let as_ = &da[bi * m * k..(bi + 1) * m * k];
                        let dst = &mut gb[bi * k * n..(bi + 1) * k * n];
                        if trans_b {
                            kernels::mm_tn(gs, as_, dst, m, n, k);
                        } else {
                            kernels::mm_tn(as_, gs, dst, m, k, n);
                        }
                    }
                }
            }
            &Op::Add { a, b } | &Op::Sub { a, b } => {
                let sign = if matches!(self.nodes[i].op, Op::Sub { .. }) { -T::one() } else { T::one() };
                if let Some(ga) = self.slot(grads, a) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
                if let Some(gb) = self.slot(grads, b) {
                    let nb = gb.len();
                    for chunk in g.chunks(nb) {
                        gb.iter_mut().zip(chunk).for_each(|(x, &y)| *x += sign * y);
                    }
                }
            }
            &Op::Mul { a, b } => {
                let (da, db) = (self.data(a), self.data(b));
                let nb = db.len();
                if let Some(ga) = self.slot(grads, a) {
                    for (gac, gc) in ga.chunks_mut(nb).zip(g.chunks(nb)) {
                        gac.iter_mut().zip(gc).zip(db).for_each(|((x, &y), &w)| *x += y * w);
                    }
                }
                if let Some(gb) = self.slot(grads, b) {
                    for (gc, dac) in g.chunks(nb).zip(da.chunks(nb)) {
                        gb.iter_mut().zip(gc).zip(dac).for_each(|((x, &y), &v)| *x += y * v);
                    }
                }
            }
            &Op::Scale { a, c } => {
                if let Some(ga) = self.slot(grads, a) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += c * y);
                }
            }
            &Op::AddScalar { a } | &Op::Reshape { a } => {
                if let Some(ga) = self.slot(grads, a) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
            }
            &Op::Tanh { a } => {
                if let Some(ga) = self.slot(grads, a) {
                    for ((x, &y), &t) in ga.iter_mut().zip(g).zip(out) {
                        *x += y * (T::one() - t * t);
                    }
                }
            }
            Op::Gelu { a, tanh } => {
                let src = self.data(*a);
                if let Some(ga) = self.slot(grads, *a) {
                    for (((x, &y), &v), &t) in ga.iter_mut().zip(g).zip(src).zip(tanh) {
                        *x += y * kernels::gelu_grad_from_tanh(v, t);
                    }
                }
            }
            &Op::SoftmaxRows { a, cols } => {
                if let Some(ga) = self.slot(grads, a) {
                    for ((dst, gr), yr) in ga.chunks_mut(cols).zip(g.chunks(cols)).zip(out.chunks(cols)) {
                        let mut dot = T::zero();
                        for (&gv, &yv) in gr.iter().zip(yr) {
                            dot += gv * yv;
                        }
                        for ((x, &gv), &yv) in dst.iter_mut().zip(gr).zip(yr) {
                            *x += yv * (gv - dot);
                        }
                    }
                }
            }
            &Op::LogSoftmaxRows { a, cols } => {
                if let Some(ga) = self.slot(grads, a) {
                    for ((dst, gr), yr) in ga.chunks_mut(cols).zip(g.chunks(cols)).zip(out.chunks(cols)) {
                        let mut total = T::zero();
                        for &gv in gr {
                            total += gv;
                        }
                        for ((x, &gv), &yv) in dst.iter_mut().zip(gr).zip(yr) {
                            *x += gv - yv.exp() * total;
                        }
                    }
                }
            }
            Op::LayerNorm { a, gain, bias, d, xhat, rstd } => {
                let d = *d;
                let gvals = self.data(*gain);
                if let Some(gg) = self.slot(grads, *gain) {
                    for (gr, xr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * xr[j];
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *bias) {
                    for gr in g.chunks(d) {
                        gb.iter_mut().zip(gr).for_each(|(x, &y)| *x += y);
                    }
                }
                if let Some(ga) = self.slot(grads, *a) {
                    let inv_d = T::one() / T::of(d as f64);
                    let mut dxhat = vec![T::zero(); d];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let xr = &xhat[r * d..(r + 1) * d];
                        let (mut m1, mut m2) = (T::zero(), T::zero());
                        for j in 0..d {
                            dxhat[j] = gr[j] * gvals[j];
                            m1 += dxhat[j];
                            m2 += dxhat[j] * xr[j];
                        }
                        m1 *= inv_d;
                        m2 *= inv_d;
                        let dst = &mut ga[r * d..(r + 1) * d];
                        for j in 0..d {
                            dst[j] += rs * (dxhat[j] - m1 - xr[j] * m2);
                        }
                    }
                }
            }
            Op::Conv2d { input, kernel, bias, batch, out_channels, geom, cols } => {
                let (input, kernel, bias, batch, out_channels, geom) =
                    (*input, *kernel, *bias, *batch, *out_channels, *geom);
                let (plen, pos) = (geom.patch_len(), geom.positions());
                let img_len = geom.channels * geom.height * geom.width;
                let plane = out_channels * pos;
                if let Some(b) = bias {
                    if let Some(gb) = self.slot(grads, b) {
                        for n in 0..batch {
                            for (o, gp) in g[n * plane..(n + 1) * plane].chunks(pos).enumerate() {
                                let mut acc = T::zero();
                                for &v in gp {
                                    acc += v;
                                }
                                gb[o] += acc;
                            }
                        }
                    }
                }
                let ld = batch * pos;
                let mut wide = vec![T::zero(); out_channels * ld];
                for n in 0..batch {
                    for o in 0..out_channels {
                        let srow = &g[(n * out_channels + o) * pos..(n * out_channels + o + 1) * pos];
                        wide[o * ld + n * pos..o * ld + (n + 1) * pos].copy_from_slice(srow);
                    }
                }
                if let Some(gk) = self.slot(grads, kernel) {
                    for o in 0..out_channels {
                        let grow = &wide[o * ld..(o + 1) * ld];
                        for q in 0..plen {
                            gk[o * plen + q] += kernels::dot(grow, &cols[q * ld..(q + 1) * ld]);
                        }
                    }
                }
                if self.nodes[input.0].requires_grad {
                    let mut gcols = vec![T::zero(); plen * ld];
                    kernels::mm_tn(self.data(kernel), &wide, &mut gcols, out_channels, plen, ld);
                    let gi = self.slot(grads, input).expect("input requires grad");
                    for n in 0..batch {
                        kernels::col2im(&gcols, &geom, &mut gi[n * img_len..(n + 1) * img_len], ld, n * pos);
                    }
                }
            }
            &Op::AvgPoolGlobal { a, area } => {
                if let Some(ga) = self.slot(grads, a) {
                    let inv = T::one() / T::of(area as f64);
                    for (dst, &gv) in ga.chunks_mut(area).zip(g) {
                        dst.iter_mut().for_each(|x| *x += gv * inv);
                    }
                }
            }
            Op::Permute { a, perm } => {
                let out_shape = self.nodes[i].value.shape();
                let inv = kernels::inverse_perm(perm);
                if let Some(ga) = self.slot(grads, *a) {
                    let (back, _) = kernels::permute(g, out_shape, &inv);
                    ga.iter_mut().zip(&back).for_each(|(x, &y)| *x += y);
                }
            }
            Op::Concat { parts, axis } => {
                let out_shape = self.nodes[i].value.shape();
                let (outer, _, inner) = split_at_axis(out_shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let chunk = self.shape(p)[*axis] * inner;
                    let row = out_shape[*axis] * inner;
                    if let Some(gp) = self.slot(grads, p) {
                        for o in 0..outer {
                            let src = &g[o * row + offset..o * row + offset + chunk];
                            gp[o * chunk..(o + 1) * chunk].iter_mut().zip(src).for_each(|(x, &y)| *x += y);
                        }
                    }
                    offset += chunk;
                }
            }
            &Op::Narrow { a, axis, start } => {
                let in_shape = self.shape(a).to_vec();
                let len = self.nodes[i].value.shape()[axis];
                let (outer, size, inner) = split_at_axis(&in_shape, axis);
                if let Some(ga) = self.slot(grads, a) {
                    for o in 0..outer {
                        let base = (o * size + start) * inner;
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        ga[base..base + len * inner].iter_mut().zip(src).for_each(|(x, &y)| *x += y);
                    }
                }
            }
            &Op::SumAll { a } => {
                if let Some(ga) = self.slot(grads, a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            &Op::MeanAll { a } => {
                if let Some(ga) = self.slot(grads, a) {
                    let scaled = g[0] / T::of(ga.len() as f64);
                    ga.iter_mut().for_each(|x| *x += scaled);
                }
            }
            &Op::SumLast { a, cols } => {
                if let Some(ga) = self.slot(grads, a) {
                    for (dst, &gv) in ga.chunks_mut(cols).zip(g) {
                        dst.iter_mut().for_each(|x| *x += gv);
                    }
                }
            }
            &Op::BroadcastLast { a, n } => {
                if let Some(ga) = self.slot(grads, a) {
                    for (x, gr) in ga.iter_mut().zip(g.chunks(n)) {
                        for &v in gr {
                            *x += v;
                        }
                    }
                }
            }
            &Op::TileLeading { a, n } => {
                if let Some(ga) = self.slot(grads, a) {
                    let len = ga.len();
                    for rep in 0..n {
                        ga.iter_mut().zip(&g[rep * len..(rep + 1) * len]).for_each(|(x, &y)| *x += y);
                    }
                }
            }
            Op::PickLast { a, cols, index } => {
                if let Some(ga) = self.slot(grads, *a) {
                    for (r, (&col, &gv)) in index.iter().zip(g).enumerate() {
                        ga[r * cols + col] += gv;
                    }
                }
            }
            &Op::BiasMatrix { d, regions } => {
                if let Some(gd) = self.slot(grads, d) {
                    let n = 2 * regions;
                    for (r, x) in gd.iter_mut().enumerate() {
                        *x += g[r * n + regions + r];
                    }
                }
            }
        }
    }
}
