//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value to the tape;
//! [`Graph::backward`] walks the tape in reverse and accumulates adjoints.
//! Shapes are always explicit: the only broadcast is tensor-by-constant
//! scaling and shifting.

use super::kernels::{bilinear_taps, col2im, conv_out_extent, im2col, PadMode};
use super::tensor::{Real, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpsampleMode {
    Nearest,
    Bilinear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegressionKind {
    Mae,
    Mse,
    SmoothL1,
    Huber,
}

impl RegressionKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mae" => Ok(Self::Mae),
            "mse" => Ok(Self::Mse),
            "smooth_l1" => Ok(Self::SmoothL1),
            "huber" => Ok(Self::Huber),
            other => Err(Error::Config(format!("unknown regression loss `{other}`"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Mae => "mae",
            Self::Mse => "mse",
            Self::SmoothL1 => "smooth_l1",
            Self::Huber => "huber",
        }
    }

    /// Loss value and derivative w.r.t. the residual `e = pred - target`.
    pub fn eval(self, e: f64, threshold: f64) -> (f64, f64) {
        let a = e.abs();
        let sign = if e > 0.0 {
            1.0
        } else if e < 0.0 {
            -1.0
        } else {
            0.0
        };
        match self {
            Self::Mae => (a, sign),
            Self::Mse => (e * e, 2.0 * e),
            Self::SmoothL1 => {
                if a < threshold {
                    (0.5 * e * e / threshold, e / threshold)
                } else {
                    (a - 0.5 * threshold, sign)
                }
            }
            Self::Huber => {
                if a <= threshold {
                    (0.5 * e * e, e)
                } else {
                    (threshold * (a - 0.5 * threshold), threshold * sign)
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Conv2d {
        input: Var,
        kernels: Var,
        stride: usize,
        padding: usize,
        mode: PadMode,
    },
    BiasChannels(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    Softmax(Var),
    SoftmaxRows(Var),
    AvgPool2d(Var, usize),
    GlobalAvgPool(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Sum(Var),
    MeanRows(Var),
    Reshape(Var),
    StackRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Row(Var, usize),
    Crop {
        input: Var,
        top: usize,
        left: usize,
    },
    AssembleQuadrants([Var; 4]),
    Upsample2x(Var, UpsampleMode),
    L2NormalizeRows(Var),
    CrossEntropy(Var, usize),
    Regression {
        pred: Var,
        residual: T,
        kind: RegressionKind,
        threshold: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A computation graph recording one forward pass.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Adjoints produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_dims(a: &[usize], b: &[usize], op: &str) -> Result<()> {
    if a != b {
        return Err(shape_err!("{op}: operand dims {a:?} vs {b:?}"));
    }
    Ok(())
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert!(value.grad.is_none());
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Add a leaf. Its `requires_grad` flag decides whether adjoints are
    /// accumulated for it; any stored gradient buffer is dropped.
    pub fn leaf(&mut self, mut t: Tensor<T>) -> Var {
        let rg = t.requires_grad;
        t.grad = None;
        t.requires_grad = false;
        self.push(t, Op::Leaf, rg)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        self.leaf(t.clone().with_grad())
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, mut t: Tensor<T>) -> Var {
        t.requires_grad = false;
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn matrix_dims(&self, v: Var, op: &str) -> Result<(usize, usize)> {
        match *self.dims(v) {
            [m, n] => Ok((m, n)),
            ref d => Err(shape_err!("{op}: expected a matrix, got dims {d:?}")),
        }
    }

    fn map_dims(&self, v: Var, op: &str) -> Result<(usize, usize, usize)> {
        match *self.dims(v) {
            [c, h, w] => Ok((c, h, w)),
            ref d => Err(shape_err!("{op}: expected a CxHxW map, got dims {d:?}")),
        }
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let src = &self.nodes[x.0].value;
        let data = src.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(src.dims(), data).expect("same dims");
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        same_dims(self.dims(a), self.dims(b), name)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.dims(a), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, op, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(shape_err!("matmul: inner dims {k} vs {k2}"));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.data(a),
            k as isize,
            1,
            self.data(b),
            n as isize,
            1,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(x, "transpose")?;
        let src = self.data(x);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[n, m], out)?, Op::Transpose(x), rg))
    }

    /// 3x3 cross-correlation of a `cin x h x w` input with `cout x cin x 3 x 3`
    /// kernels and zero padding.
    pub fn conv2d(&mut self, input: Var, kernels: Var, stride: usize, padding: usize) -> Result<Var> {
        self.conv2d_padded(input, kernels, stride, padding, PadMode::Zero)
    }

    pub fn conv2d_padded(
        &mut self,
        input: Var,
        kernels: Var,
        stride: usize,
        padding: usize,
        mode: PadMode,
    ) -> Result<Var> {
        if !(1..=2).contains(&stride) || padding > 1 {
            return Err(shape_err!(
                "conv2d: stride {stride} / padding {padding} unsupported"
            ));
        }
        let (cin, h, w) = self.map_dims(input, "conv2d")?;
        let (cout, kc, kh, kw) = match *self.dims(kernels) {
            [a, b, c, d] => (a, b, c, d),
            ref d => return Err(shape_err!("conv2d: kernels must be rank 4, got {d:?}")),
        };
        if kc != cin || kh != 3 || kw != 3 {
            return Err(shape_err!(
                "conv2d: kernels {:?} incompatible with {cin} input channels",
                self.dims(kernels)
            ));
        }
        let ho = conv_out_extent(h, stride, padding);
        let wo = conv_out_extent(w, stride, padding);
        let (ho, wo) = match (ho, wo) {
            (Some(a), Some(b)) if a >= 1 && b >= 1 => (a, b),
            _ => return Err(shape_err!("conv2d: output extent < 1 for {h}x{w}")),
        };
        let n = ho * wo;
        let mut col = vec![T::zero(); cin * 9 * n];
        im2col(self.data(input), cin, h, w, stride, padding, mode, ho, wo, &mut col);
        let mut out = vec![T::zero(); cout * n];
        T::gemm(
            cout,
            cin * 9,
            n,
            T::one(),
            self.data(kernels),
            (cin * 9) as isize,
            1,
            &col,
            n as isize,
            1,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        let rg = self.rg(input) || self.rg(kernels);
        Ok(self.push(
            Tensor::new(&[cout, ho, wo], out)?,
            Op::Conv2d {
                input,
                kernels,
                stride,
                padding,
                mode,
            },
            rg,
        ))
    }

    /// Adds `bias[c]` to every pixel of channel `c`.
    pub fn bias_channels(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (c, h, w) = self.map_dims(x, "bias_channels")?;
        if self.dims(bias) != [c] {
            return Err(shape_err!(
                "bias_channels: bias dims {:?} for {c} channels",
                self.dims(bias)
            ));
        }
        let b = self.data(bias);
        let mut out = self.data(x).to_vec();
        for (ch, plane) in out.chunks_mut(h * w).enumerate() {
            plane.iter_mut().for_each(|v| *v += b[ch]);
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(Tensor::new(&[c, h, w], out)?, Op::BiasChannels(x, bias), rg))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |v| {
                if v >= T::zero() {
                    T::one() / (T::one() + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (T::one() + e)
                }
            },
            Op::Sigmoid(x),
        )
    }

    fn softmax_slice(src: &[T], dst: &mut [T]) {
        let max = src.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut total = T::zero();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            total += *d;
        }
        dst.iter_mut().for_each(|d| *d = *d / total);
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        match *self.dims(x) {
            [n] if n >= 1 => {}
            ref d => return Err(shape_err!("softmax: expected a nonempty vector, got {d:?}")),
        }
        let mut out = vec![T::zero(); self.value(x).len()];
        Self::softmax_slice(self.data(x), &mut out);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(self.dims(x), out)?, Op::Softmax(x), rg))
    }

    /// Row-wise softmax of a matrix.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(x, "softmax_rows")?;
        let mut out = vec![T::zero(); m * n];
        for (src, dst) in self.data(x).chunks(n).zip(out.chunks_mut(n)) {
            Self::softmax_slice(src, dst);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::SoftmaxRows(x), rg))
    }

    /// Non-overlapping `window x window` average pooling of a CxHxW map.
    pub fn avg_pool2d(&mut self, x: Var, window: usize) -> Result<Var> {
        let (c, h, w) = self.map_dims(x, "avg_pool2d")?;
        if window == 0 || h % window != 0 || w % window != 0 {
            return Err(shape_err!(
                "avg_pool2d: extents {h}x{w} not divisible by window {window}"
            ));
        }
        let (ho, wo) = (h / window, w / window);
        let scale = T::one() / T::c((window * window) as f64);
        let src = self.data(x);
        let mut out = vec![T::zero(); c * ho * wo];
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    out[(ch * ho + y / window) * wo + xx / window] += src[(ch * h + y) * w + xx];
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= scale);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[c, ho, wo], out)?, Op::AvgPool2d(x, window), rg))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.map_dims(x, "global_avg_pool")?;
        let inv = T::one() / T::c((h * w) as f64);
        let out = self
            .data(x)
            .chunks(h * w)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[c], out)?, Op::GlobalAvgPool(x), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.data(b).iter().any(|v| v.is_zero()) {
            return Err(Error::Numerical("div: zero divisor".into()));
        }
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Column means of an `m x n` matrix, as an `[n]` vector.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(x, "mean_rows")?;
        let inv = T::one() / T::c(m as f64);
        let mut out = vec![T::zero(); n];
        for row in self.data(x).chunks(n) {
            out.iter_mut().zip(row).for_each(|(o, &v)| *o += v);
        }
        out.iter_mut().for_each(|v| *v *= inv);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[n], out)?, Op::MeanRows(x), rg))
    }

    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(dims)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Stacks equal-length vectors into the rows of a matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let first = rows
            .first()
            .ok_or_else(|| shape_err!("stack_rows: no rows"))?;
        let n = match *self.dims(*first) {
            [n] => n,
            ref d => return Err(shape_err!("stack_rows: rows must be vectors, got {d:?}")),
        };
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            same_dims(self.dims(r), &[n], "stack_rows")?;
            out.extend_from_slice(self.data(r));
        }
        let rg = rows.iter().any(|&r| self.rg(r));
        Ok(self.push(
            Tensor::new(&[rows.len(), n], out)?,
            Op::StackRows(rows.to_vec()),
            rg,
        ))
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err!("concat_cols: no parts"))?;
        let (m, _) = self.matrix_dims(*first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.matrix_dims(p, "concat_cols")?;
            if pm != m {
                return Err(shape_err!("concat_cols: row counts {m} vs {pm}"));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![T::zero(); m * total];
        let mut off = 0;
        for (&p, &pn) in parts.iter().zip(&widths) {
            let src = self.data(p);
            for i in 0..m {
                out[i * total + off..i * total + off + pn].copy_from_slice(&src[i * pn..(i + 1) * pn]);
            }
            off += pn;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(&[m, total], out)?,
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.matrix_dims(x, "slice_cols")?;
        if len == 0 || start + len > n {
            return Err(shape_err!("slice_cols: {start}..{} out of {n}", start + len));
        }
        let src = self.data(x);
        let out = (0..m)
            .flat_map(|i| src[i * n + start..i * n + start + len].iter().copied())
            .collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[m, len], out)?, Op::SliceCols(x, start), rg))
    }

    /// Row `i` of a matrix as a vector.
    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        let (m, n) = self.matrix_dims(x, "row")?;
        if i >= m {
            return Err(Error::Index(format!("row {i} of {m}")));
        }
        let out = self.data(x)[i * n..(i + 1) * n].to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[n], out)?, Op::Row(x, i), rg))
    }

    /// Spatial window `[top..top+h, left..left+w]` of a CxHxW map.
    pub fn crop(&mut self, x: Var, top: usize, left: usize, h: usize, w: usize) -> Result<Var> {
        let (c, sh, sw) = self.map_dims(x, "crop")?;
        if h == 0 || w == 0 || top + h > sh || left + w > sw {
            return Err(shape_err!(
                "crop: window {h}x{w} at ({top},{left}) outside {sh}x{sw}"
            ));
        }
        let src = self.data(x);
        let mut out = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for y in top..top + h {
                let base = (ch * sh + y) * sw;
                out.extend_from_slice(&src[base + left..base + left + w]);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[c, h, w], out)?, Op::Crop { input: x, top, left }, rg))
    }

    /// Places four equal CxHxW maps as quadrants (row-major: top-left,
    /// top-right, bottom-left, bottom-right) of a Cx2Hx2W map.
    pub fn assemble_quadrants(&mut self, parts: [Var; 4]) -> Result<Var> {
        let (c, h, w) = self.map_dims(parts[0], "assemble_quadrants")?;
        for &p in &parts[1..] {
            same_dims(self.dims(p), &[c, h, w], "assemble_quadrants")?;
        }
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); c * oh * ow];
        for (q, &p) in parts.iter().enumerate() {
            let (qy, qx) = (q / 2 * h, q % 2 * w);
            let src = self.data(p);
            for ch in 0..c {
                for y in 0..h {
                    let dst = (ch * oh + qy + y) * ow + qx;
                    out[dst..dst + w].copy_from_slice(&src[(ch * h + y) * w..][..w]);
                }
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(&[c, oh, ow], out)?,
            Op::AssembleQuadrants(parts),
            rg,
        ))
    }

    /// Doubles both spatial extents of a CxHxW map.
    pub fn upsample2x(&mut self, x: Var, mode: UpsampleMode) -> Result<Var> {
        let (c, h, w) = self.map_dims(x, "upsample2x")?;
        let out = upsample_forward(self.data(x), c, h, w, mode);
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(&[c, 2 * h, 2 * w], out)?,
            Op::Upsample2x(x, mode),
            rg,
        ))
    }

    /// Scales every row (or the single vector) to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let n = *self.dims(x).last().expect("nonempty dims");
        if self.value(x).rank() > 2 {
            return Err(shape_err!("l2_normalize_rows: rank {} input", self.value(x).rank()));
        }
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(n) {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if !(norm > T::zero()) || !norm.is_finite() {
                return Err(Error::Numerical(
                    "l2_normalize_rows: zero-norm row".into(),
                ));
            }
            row.iter_mut().for_each(|v| *v = *v / norm);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(self.dims(x), out)?, Op::L2NormalizeRows(x), rg))
    }

    /// `-log softmax(logits)[label]`, max-subtracted for stability.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let k = match *self.dims(logits) {
            [k] if k >= 1 => k,
            ref d => return Err(shape_err!("cross_entropy: logits must be a vector, got {d:?}")),
        };
        if label >= k {
            return Err(Error::Index(format!("label {label} out of range for {k} classes")));
        }
        let z = self.data(logits);
        let max = z.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let lse = z.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        let loss = lse - z[label];
        let rg = self.rg(logits);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy(logits, label), rg))
    }

    /// Scalar regression loss of `pred` (a `[1]` tensor) against a constant
    /// target.
    pub fn regression_loss(
        &mut self,
        pred: Var,
        target: T,
        kind: RegressionKind,
        threshold: T,
    ) -> Result<Var> {
        if self.value(pred).len() != 1 {
            return Err(shape_err!(
                "regression_loss: prediction must be scalar, got {:?}",
                self.dims(pred)
            ));
        }
        if !(threshold > T::zero()) {
            return Err(Error::Config("regression loss threshold must be positive".into()));
        }
        let residual = self.data(pred)[0] - target;
        let (loss, _) = kind.eval(residual.f64(), threshold.f64());
        let rg = self.rg(pred);
        Ok(self.push(
            Tensor::scalar(T::c(loss)),
            Op::Regression {
                pred,
                residual,
                kind,
                threshold,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        if self.value(output).len() != 1 {
            return Err(Error::Contract(format!(
                "backward from non-scalar output with dims {:?}",
                self.dims(output)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![T::one()]);
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        Ok(Gradients { grads })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.rg(v) {
            return None;
        }
        let len = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn backprop_node(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.dims(*a)[0], self.dims(*a)[1]);
                let n = self.dims(*b)[1];
                if let Some(ga) = self.acc(grads, *a) {
                    // dA += dY * B^T
                    T::gemm(m, n, k, T::one(), g, n as isize, 1, self.data(*b), 1, n as isize, T::one(), ga, k as isize, 1);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    // dB += A^T * dY
                    T::gemm(k, m, n, T::one(), self.data(*a), 1, k as isize, g, n as isize, 1, T::one(), gb, n as isize, 1);
                }
            }
            Op::Transpose(x) => {
                let (m, n) = (self.dims(*x)[0], self.dims(*x)[1]);
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..m {
                        for j in 0..n {
                            gx[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            Op::Conv2d {
                input,
                kernels,
                stride,
                padding,
                mode,
            } => {
                let (cin, h, w) = {
                    let d = self.dims(*input);
                    (d[0], d[1], d[2])
                };
                let cout = self.dims(*kernels)[0];
                let (ho, wo) = (node.value.dims()[1], node.value.dims()[2]);
                let n = ho * wo;
                let kk = cin * 9;
                if self.rg(*kernels) {
                    let mut col = vec![T::zero(); kk * n];
                    im2col(self.data(*input), cin, h, w, *stride, *padding, *mode, ho, wo, &mut col);
                    let gk = self.acc(grads, *kernels).expect("requires grad");
                    // dK += dY * col^T
                    T::gemm(cout, n, kk, T::one(), g, n as isize, 1, &col, 1, n as isize, T::one(), gk, kk as isize, 1);
                }
                if self.rg(*input) {
                    let mut dcol = vec![T::zero(); kk * n];
                    // dcol = K^T * dY
                    T::gemm(kk, cout, n, T::one(), self.data(*kernels), 1, kk as isize, g, n as isize, 1, T::zero(), &mut dcol, n as isize, 1);
                    let gx = self.acc(grads, *input).expect("requires grad");
                    col2im(&dcol, cin, h, w, *stride, *padding, *mode, ho, wo, gx);
                }
            }
            Op::BiasChannels(x, b) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, &d)| *a += d);
                }
                let c = self.dims(*x)[0];
                let plane = g.len() / c;
                if let Some(gb) = self.acc(grads, *b) {
                    for (ch, chunk) in g.chunks(plane).enumerate() {
                        gb[ch] += chunk.iter().copied().sum::<T>();
                    }
                }
            }
            Op::Tanh(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for ((a, &d), &yv) in gx.iter_mut().zip(g).zip(y) {
                        *a += d * (T::one() - yv * yv);
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for ((a, &d), &yv) in gx.iter_mut().zip(g).zip(y) {
                        *a += d * yv * (T::one() - yv);
                    }
                }
            }
            Op::Softmax(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    softmax_backward(y, g, gx);
                }
            }
            Op::SoftmaxRows(x) => {
                let n = self.dims(*x)[1];
                if let Some(gx) = self.acc(grads, *x) {
                    for ((yr, gr), gxr) in y.chunks(n).zip(g.chunks(n)).zip(gx.chunks_mut(n)) {
                        softmax_backward(yr, gr, gxr);
                    }
                }
            }
            Op::AvgPool2d(x, window) => {
                let (c, h, w) = {
                    let d = self.dims(*x);
                    (d[0], d[1], d[2])
                };
                let (ho, wo) = (h / window, w / window);
                let scale = T::one() / T::c((window * window) as f64);
                if let Some(gx) = self.acc(grads, *x) {
                    for ch in 0..c {
                        for yy in 0..h {
                            for xx in 0..w {
                                gx[(ch * h + yy) * w + xx] +=
                                    g[(ch * ho + yy / window) * wo + xx / window] * scale;
                            }
                        }
                    }
                }
            }
            Op::GlobalAvgPool(x) => {
                let plane = self.value(*x).len() / g.len();
                let inv = T::one() / T::c(plane as f64);
                if let Some(gx) = self.acc(grads, *x) {
                    for (chunk, &d) in gx.chunks_mut(plane).zip(g) {
                        chunk.iter_mut().for_each(|a| *a += d * inv);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.acc(grads, v) {
                        gv.iter_mut().zip(g).for_each(|(s, &d)| *s += d);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(s, &d)| *s += d);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(s, &d)| *s -= d);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.data(*a).to_vec(), self.data(*b).to_vec());
                if let Some(ga) = self.acc(grads, *a) {
                    for ((s, &d), &o) in ga.iter_mut().zip(g).zip(&bv) {
                        *s += d * o;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for ((s, &d), &o) in gb.iter_mut().zip(g).zip(&av) {
                        *s += d * o;
                    }
                }
            }
            Op::Div(a, b) => {
                let bv = self.data(*b).to_vec();
                if let Some(ga) = self.acc(grads, *a) {
                    for ((s, &d), &den) in ga.iter_mut().zip(g).zip(&bv) {
                        *s += d / den;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for (((s, &d), &den), &q) in gb.iter_mut().zip(g).zip(&bv).zip(y) {
                        *s -= d * q / den;
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(s, &d)| *s += d * *c);
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(s, &d)| *s += d);
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().for_each(|s| *s += g[0]);
                }
            }
            Op::MeanRows(x) => {
                let m = self.dims(*x)[0];
                let n = g.len();
                let inv = T::one() / T::c(m as f64);
                if let Some(gx) = self.acc(grads, *x) {
                    for row in gx.chunks_mut(n) {
                        row.iter_mut().zip(g).for_each(|(s, &d)| *s += d * inv);
                    }
                }
            }
            Op::StackRows(rows) => {
                let n = node.value.dims()[1];
                for (i, &r) in rows.iter().enumerate() {
                    if let Some(gr) = self.acc(grads, r) {
                        gr.iter_mut()
                            .zip(&g[i * n..(i + 1) * n])
                            .for_each(|(s, &d)| *s += d);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (m, total) = (node.value.dims()[0], node.value.dims()[1]);
                let mut off = 0;
                for &p in parts {
                    let pn = self.dims(p)[1];
                    if let Some(gp) = self.acc(grads, p) {
                        for i in 0..m {
                            gp[i * pn..(i + 1) * pn]
                                .iter_mut()
                                .zip(&g[i * total + off..i * total + off + pn])
                                .for_each(|(s, &d)| *s += d);
                        }
                    }
                    off += pn;
                }
            }
            Op::SliceCols(x, start) => {
                let n = self.dims(*x)[1];
                let (m, len) = (node.value.dims()[0], node.value.dims()[1]);
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..m {
                        gx[i * n + start..i * n + start + len]
                            .iter_mut()
                            .zip(&g[i * len..(i + 1) * len])
                            .for_each(|(s, &d)| *s += d);
                    }
                }
            }
            Op::Row(x, i) => {
                let n = g.len();
                if let Some(gx) = self.acc(grads, *x) {
                    gx[i * n..(i + 1) * n]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(s, &d)| *s += d);
                }
            }
            Op::Crop { input, top, left } => {
                let (c, sh, sw) = {
                    let d = self.dims(*input);
                    (d[0], d[1], d[2])
                };
                let (h, w) = (node.value.dims()[1], node.value.dims()[2]);
                if let Some(gx) = self.acc(grads, *input) {
                    for ch in 0..c {
                        for yy in 0..h {
                            let dst = (ch * sh + top + yy) * sw + left;
                            gx[dst..dst + w]
                                .iter_mut()
                                .zip(&g[(ch * h + yy) * w..][..w])
                                .for_each(|(s, &d)| *s += d);
                        }
                    }
                }
            }
            Op::AssembleQuadrants(parts) => {
                let (c, h, w) = {
                    let d = self.dims(parts[0]);
                    (d[0], d[1], d[2])
                };
                let (oh, ow) = (2 * h, 2 * w);
                for (q, &p) in parts.iter().enumerate() {
                    let (qy, qx) = (q / 2 * h, q % 2 * w);
                    if let Some(gp) = self.acc(grads, p) {
                        for ch in 0..c {
                            for yy in 0..h {
                                let src = (ch * oh + qy + yy) * ow + qx;
                                gp[(ch * h + yy) * w..][..w]
                                    .iter_mut()
                                    .zip(&g[src..src + w])
                                    .for_each(|(s, &d)| *s += d);
                            }
                        }
                    }
                }
            }
            Op::Upsample2x(x, mode) => {
                let (c, h, w) = {
                    let d = self.dims(*x);
                    (d[0], d[1], d[2])
                };
                if let Some(gx) = self.acc(grads, *x) {
                    upsample_backward(g, c, h, w, *mode, gx);
                }
            }
            Op::L2NormalizeRows(x) => {
                let n = *self.dims(*x).last().expect("dims");
                let xv = self.data(*x).to_vec();
                if let Some(gx) = self.acc(grads, *x) {
                    for (((xr, yr), gr), gxr) in xv
                        .chunks(n)
                        .zip(y.chunks(n))
                        .zip(g.chunks(n))
                        .zip(gx.chunks_mut(n))
                    {
                        let norm = xr.iter().map(|&v| v * v).sum::<T>().sqrt();
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for ((s, &gi), &yi) in gxr.iter_mut().zip(gr).zip(yr) {
                            *s += (gi - yi * dot) / norm;
                        }
                    }
                }
            }
            Op::CrossEntropy(logits, label) => {
                let z = self.data(*logits).to_vec();
                if let Some(gz) = self.acc(grads, *logits) {
                    let mut p = vec![T::zero(); z.len()];
                    Self::softmax_slice(&z, &mut p);
                    for (i, (s, &pi)) in gz.iter_mut().zip(&p).enumerate() {
                        let t = if i == *label { T::one() } else { T::zero() };
                        *s += g[0] * (pi - t);
                    }
                }
            }
            Op::Regression {
                pred,
                residual,
                kind,
                threshold,
            } => {
                let (_, d) = kind.eval(residual.f64(), threshold.f64());
                if let Some(gp) = self.acc(grads, *pred) {
                    gp[0] += g[0] * T::c(d);
                }
            }
        }
    }
}

fn softmax_backward<T: Real>(y: &[T], g: &[T], gx: &mut [T]) {
    let dot: T = y.iter().zip(g).map(|(&a, &b)| a * b).sum();
    for ((s, &yi), &gi) in gx.iter_mut().zip(y).zip(g) {
        *s += yi * (gi - dot);
    }
}

fn upsample_forward<T: Real>(x: &[T], c: usize, h: usize, w: usize, mode: UpsampleMode) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); c * oh * ow];
    match mode {
        UpsampleMode::Nearest => {
            for ch in 0..c {
                for y in 0..oh {
                    for xx in 0..ow {
                        out[(ch * oh + y) * ow + xx] = x[(ch * h + y / 2) * w + xx / 2];
                    }
                }
            }
        }
        UpsampleMode::Bilinear => {
            let ty = bilinear_taps(oh, h);
            let tx = bilinear_taps(ow, w);
            for ch in 0..c {
                let plane = &x[ch * h * w..(ch + 1) * h * w];
                for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
                    let (fy, gy) = (T::c(fy), T::c(1.0 - fy));
                    for (xx, &(x0, x1, fx)) in tx.iter().enumerate() {
                        let (fx, gx) = (T::c(fx), T::c(1.0 - fx));
                        let top = plane[y0 * w + x0] * gx + plane[y0 * w + x1] * fx;
                        let bot = plane[y1 * w + x0] * gx + plane[y1 * w + x1] * fx;
                        out[(ch * oh + y) * ow + xx] = top * gy + bot * fy;
                    }
                }
            }
        }
    }
    out
}

fn upsample_backward<T: Real>(g: &[T], c: usize, h: usize, w: usize, mode: UpsampleMode, gx: &mut [T]) {
    let (oh, ow) = (2 * h, 2 * w);
    match mode {
        UpsampleMode::Nearest => {
            for ch in 0..c {
                for y in 0..oh {
                    for xx in 0..ow {
                        gx[(ch * h + y / 2) * w + xx / 2] += g[(ch * oh + y) * ow + xx];
                    }
                }
            }
        }
        UpsampleMode::Bilinear => {
            let ty = bilinear_taps(oh, h);
            let tx = bilinear_taps(ow, w);
            for ch in 0..c {
                let plane = &mut gx[ch * h * w..(ch + 1) * h * w];
                for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
                    let (fy, gy) = (T::c(fy), T::c(1.0 - fy));
                    for (xx, &(x0, x1, fx)) in tx.iter().enumerate() {
                        let (fx, gxw) = (T::c(fx), T::c(1.0 - fx));
                        let d = g[(ch * oh + y) * ow + xx];
                        plane[y0 * w + x0] += d * gy * gxw;
                        plane[y0 * w + x1] += d * gy * fx;
                        plane[y1 * w + x0] += d * fy * gxw;
                        plane[y1 * w + x1] += d * fy * fx;
                    }
                }
            }
        }
    }
}

/// Eager 2x upsampling of a raw CxHxW buffer (no tape).
pub fn upsample2x_eager<T: Real>(x: &Tensor<T>, mode: UpsampleMode) -> Result<Tensor<T>> {
    match *x.dims() {
        [c, h, w] => Tensor::new(&[c, 2 * h, 2 * w], upsample_forward(x.data(), c, h, w, mode)),
        ref d => Err(shape_err!("upsample: expected CxHxW, got {d:?}")),
    }
}
