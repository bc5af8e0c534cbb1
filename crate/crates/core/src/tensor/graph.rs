use super::kernels::{broadcast_offsets, broadcast_shape, col2im, im2col, ConvGeom};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    Shift(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Var },
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom },
    ConvTranspose2d { x: Var, w: Var, b: Var, geom: ConvGeom },
    Upsample2(Var),
    ConcatChannels(Var, Var),
    Reshape(Var),
    ToRows(Var),
    FromRows(Var),
    Sum(Var),
    Mean(Var),
    SumAxes(Var),
    PairwiseSqDist(Var, Var),
    CosineSim(Var, Var),
    SoftmaxCe { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    StopGradient,
    StraightThrough { z: Var },
    GatherRows { table: Var, idx: Vec<usize> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Define-by-run computation graph.
///
/// Nodes are appended in evaluation order, so the node list is always a
/// topological order and [`Graph::backward`] is a single reverse sweep.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss w.r.t. `v`; all zeros if `v` is unreachable or detached.
    pub fn get(&self, v: Var) -> Tensor<T> {
        match &self.grads[v.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn get_opt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Tensor<T> {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(node: usize, op: &'static str, detail: String) -> Error {
    Error::Shape { node, op, detail }
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool, name: &'static str) -> Result<Var> {
        let id = self.nodes.len();
        if !value.is_finite() {
            return Err(Error::NonFinite { node: id, op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(id))
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn next_id(&self) -> usize {
        self.nodes.len()
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push(t, Op::Leaf, false, "input")
    }

    /// Trainable leaf; receives a gradient on backward.
    pub fn param(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push(t, Op::Leaf, true, "param")
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    // ---- elementwise -----------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&sa, &sb).ok_or_else(|| {
            shape_err(self.next_id(), name, format!("cannot broadcast {sa:?} with {sb:?}"))
        })?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let data: Vec<T> = if sa == sb {
            va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let (oa, ob) = broadcast_offsets(&out_shape, &sa, &sb);
            oa.iter().zip(&ob).map(|(&i, &j)| f(va[i], vb[j])).collect()
        };
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(&out_shape, data)?, op, ng, name)
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
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, x: Var, name: &'static str, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| f(v)).collect();
        let t = Tensor::new(src.shape(), data)?;
        let ng = self.ng(x);
        self.push(t, op, ng, name)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        self.unary(x, "scale", |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        self.unary(x, "add_scalar", |v| v + c, Op::Shift(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "relu", |v| if v > T::zero() { v } else { T::zero() }, Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "tanh", |v| v.tanh(), Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "sigmoid", sigmoid, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "exp", |v| v.exp(), Op::Exp(x))
    }

    /// Identity forward, zero contribution backward.
    pub fn stop_gradient(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).clone();
        self.push(t, Op::StopGradient, false, "stop_gradient")
    }

    /// Forward value of `e`, gradient routed to `z` unchanged: `z + sg(e - z)`
    /// without the rounding of the explicit sum.
    pub fn straight_through(&mut self, z: Var, e: Var) -> Result<Var> {
        if self.shape(z) != self.shape(e) {
            return Err(shape_err(
                self.next_id(),
                "straight_through",
                format!("{:?} vs {:?}", self.shape(z), self.shape(e)),
            ));
        }
        let t = self.value(e).clone();
        let ng = self.ng(z);
        self.push(t, Op::StraightThrough { z }, ng, "straight_through")
    }

    // ---- linear algebra --------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err(self.next_id(), "matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), ng, "matmul")
    }

    /// Fully-connected layer: `x[N,in] · wᵀ + b` with `w[out,in]`, `b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x).to_vec(), self.shape(w).to_vec(), self.shape(b).to_vec());
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] || sb != [sw[0]] {
            return Err(shape_err(
                self.next_id(),
                "linear",
                format!("x {sx:?}, w {sw:?}, b {sb:?}"),
            ));
        }
        let (n, fin, fout) = (sx[0], sx[1], sw[0]);
        let mut out = vec![T::zero(); n * fout];
        T::gemm(n, fin, fout, self.value(x).data(), false, self.value(w).data(), true, &mut out, false);
        let bias = self.value(b).data();
        for row in out.chunks_mut(fout) {
            for (o, &bb) in row.iter_mut().zip(bias) {
                *o = *o + bb;
            }
        }
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(Tensor::new(&[n, fout], out)?, Op::Linear { x, w, b }, ng, "linear")
    }

    /// 2-D convolution over NCHW input with `w[O,C,k,k]`, odd `k`, zero "same" padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x).to_vec(), self.shape(w).to_vec(), self.shape(b).to_vec());
        let bad = || shape_err(self.next_id(), "conv2d", format!("x {sx:?}, w {sw:?}, b {sb:?}, stride {stride}"));
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[1] || sw[2] != sw[3] || sw[2] % 2 == 0 || sb != [sw[0]] {
            return Err(bad());
        }
        if stride == 0 || (stride > 1 && (sx[2] % stride != 0 || sx[3] % stride != 0)) {
            return Err(bad());
        }
        let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (o, k) = (sw[0], sw[2]);
        let geom = ConvGeom::new(c, h, wd, k, stride, k / 2).ok_or_else(bad)?;
        let (rows, cols_n) = (geom.col_rows(), geom.col_cols());
        let mut cols = vec![T::zero(); rows * cols_n];
        let mut out = vec![T::zero(); n * o * cols_n];
        let (xv, wv, bv) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        for i in 0..n {
            im2col(&xv[i * c * h * wd..(i + 1) * c * h * wd], &geom, &mut cols);
            let dst = &mut out[i * o * cols_n..(i + 1) * o * cols_n];
            T::gemm(o, rows, cols_n, wv, false, &cols, false, dst, false);
            for (ch, plane) in dst.chunks_mut(cols_n).enumerate() {
                for v in plane {
                    *v = *v + bv[ch];
                }
            }
        }
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        let t = Tensor::new(&[n, o, geom.oh, geom.ow], out)?;
        self.push(t, Op::Conv2d { x, w, b, geom }, ng, "conv2d")
    }

    /// Stride-2 transposed convolution doubling spatial extents; `w[Ci,Co,k,k]`, even `k`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x).to_vec(), self.shape(w).to_vec(), self.shape(b).to_vec());
        let bad = || shape_err(self.next_id(), "conv_transpose2d", format!("x {sx:?}, w {sw:?}, b {sb:?}"));
        if sx.len() != 4 || sw.len() != 4 || sw[0] != sx[1] || sw[2] != sw[3] || sw[2] % 2 != 0 || sw[2] < 2 || sb != [sw[1]] {
            return Err(bad());
        }
        let (n, ci, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (co, k) = (sw[1], sw[2]);
        let geom = ConvGeom::new(co, 2 * h, 2 * wd, k, 2, (k - 2) / 2).ok_or_else(bad)?;
        debug_assert_eq!((geom.oh, geom.ow), (h, wd));
        let (rows, hw) = (geom.col_rows(), h * wd);
        let plane_out = co * 4 * hw;
        let mut cols = vec![T::zero(); rows * hw];
        let mut out = vec![T::zero(); n * plane_out];
        let (xv, wv, bv) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        for i in 0..n {
            T::gemm(rows, ci, hw, wv, true, &xv[i * ci * hw..(i + 1) * ci * hw], false, &mut cols, false);
            let dst = &mut out[i * plane_out..(i + 1) * plane_out];
            col2im(&cols, &geom, dst);
            for (ch, plane) in dst.chunks_mut(4 * hw).enumerate() {
                for v in plane {
                    *v = *v + bv[ch];
                }
            }
        }
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        let t = Tensor::new(&[n, co, 2 * h, 2 * wd], out)?;
        self.push(t, Op::ConvTranspose2d { x, w, b, geom }, ng, "conv_transpose2d")
    }

    // ---- layout ----------------------------------------------------------

    /// Nearest-neighbour ×2 upsampling of an NCHW tensor.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(shape_err(self.next_id(), "upsample2", format!("{s:?}")));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); planes * 4 * h * w];
        for p in 0..planes {
            let sp = &src[p * h * w..(p + 1) * h * w];
            let dp = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    dp[y * 2 * w + xx] = sp[(y / 2) * w + xx / 2];
                }
            }
        }
        let ng = self.ng(x);
        let t = Tensor::new(&[s[0], s[1], 2 * h, 2 * w], out)?;
        self.push(t, Op::Upsample2(x), ng, "upsample2")
    }

    /// Channel concatenation of two NCHW tensors, `a` first.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 4 || sb.len() != 4 || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(shape_err(self.next_id(), "concat_channels", format!("{sa:?} and {sb:?}")));
        }
        let (n, hw) = (sa[0], sa[2] * sa[3]);
        let (la, lb) = (sa[1] * hw, sb[1] * hw);
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * (la + lb));
        for i in 0..n {
            out.extend_from_slice(&va[i * la..(i + 1) * la]);
            out.extend_from_slice(&vb[i * lb..(i + 1) * lb]);
        }
        let ng = self.ng(a) || self.ng(b);
        let t = Tensor::new(&[n, sa[1] + sb[1], sa[2], sa[3]], out)?;
        self.push(t, Op::ConcatChannels(a, b), ng, "concat_channels")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self
            .value(x)
            .clone()
            .reshape(shape)
            .map_err(|e| shape_err(self.next_id(), "reshape", e.to_string()))?;
        let ng = self.ng(x);
        self.push(t, Op::Reshape(x), ng, "reshape")
    }

    /// Flattens `[N, ...]` to `[N, rest]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let n = s[0];
        let rest = s[1..].iter().product();
        self.reshape(x, &[n, rest])
    }

    /// NCHW → `[N·H·W, C]`, one row per spatial position.
    pub fn to_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(shape_err(self.next_id(), "to_rows", format!("{s:?}")));
        }
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); n * c * hw];
        for i in 0..n {
            for ch in 0..c {
                for p in 0..hw {
                    out[(i * hw + p) * c + ch] = src[(i * c + ch) * hw + p];
                }
            }
        }
        let ng = self.ng(x);
        self.push(Tensor::new(&[n * hw, c], out)?, Op::ToRows(x), ng, "to_rows")
    }

    /// Inverse of [`Graph::to_rows`].
    pub fn from_rows(&mut self, x: Var, nchw: [usize; 4]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let [n, c, h, w] = nchw;
        if s != [n * h * w, c] {
            return Err(shape_err(self.next_id(), "from_rows", format!("{s:?} into {nchw:?}")));
        }
        let hw = h * w;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); n * c * hw];
        for i in 0..n {
            for ch in 0..c {
                for p in 0..hw {
                    out[(i * c + ch) * hw + p] = src[(i * hw + p) * c + ch];
                }
            }
        }
        let ng = self.ng(x);
        self.push(Tensor::new(&nchw, out)?, Op::FromRows(x), ng, "from_rows")
    }

    /// Rows of a 2-D `table` selected by `idx` (repeats allowed).
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 || idx.is_empty() || idx.iter().any(|&i| i >= s[0]) {
            return Err(shape_err(
                self.next_id(),
                "gather_rows",
                format!("table {s:?}, {} indices (max {:?})", idx.len(), idx.iter().max()),
            ));
        }
        let d = s[1];
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let ng = self.ng(table);
        let t = Tensor::new(&[idx.len(), d], out)?;
        self.push(t, Op::GatherRows { table, idx: idx.to_vec() }, ng, "gather_rows")
    }

    // ---- reductions ------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: T = self.value(x).data().iter().copied().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s: T = v.data().iter().copied().sum();
        let m = s / T::of(v.len() as f64);
        let ng = self.ng(x);
        self.push(Tensor::scalar(m), Op::Mean(x), ng, "mean")
    }

    /// Sums over `axes`, keeping them as extent-1 dimensions.
    pub fn sum_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axes.iter().any(|&a| a >= s.len()) {
            return Err(shape_err(self.next_id(), "sum_axes", format!("axes {axes:?} of {s:?}")));
        }
        let mut rs = s.clone();
        for &a in axes {
            rs[a] = 1;
        }
        let (_, ob) = broadcast_offsets(&s, &s, &rs);
        let mut out = vec![T::zero(); rs.iter().product()];
        for (&v, &o) in self.value(x).data().iter().zip(&ob) {
            out[o] = out[o] + v;
        }
        let ng = self.ng(x);
        self.push(Tensor::new(&rs, out)?, Op::SumAxes(x), ng, "sum_axes")
    }

    // ---- distances and losses --------------------------------------------

    /// `D[i,j] = ‖x_i − y_j‖²` for `x[n,d]`, `y[m,d]`.
    pub fn pairwise_sq_dist(&mut self, x: Var, y: Var) -> Result<Var> {
        let (sx, sy) = (self.shape(x).to_vec(), self.shape(y).to_vec());
        if sx.len() != 2 || sy.len() != 2 || sx[1] != sy[1] {
            return Err(shape_err(self.next_id(), "pairwise_sq_dist", format!("{sx:?} vs {sy:?}")));
        }
        let (n, m, d) = (sx[0], sy[0], sx[1]);
        let (xv, yv) = (self.value(x).data(), self.value(y).data());
        let mut out = vec![T::zero(); n * m];
        for i in 0..n {
            let xi = &xv[i * d..(i + 1) * d];
            for j in 0..m {
                let yj = &yv[j * d..(j + 1) * d];
                out[i * m + j] = xi.iter().zip(yj).map(|(&a, &b)| (a - b) * (a - b)).sum();
            }
        }
        let ng = self.ng(x) || self.ng(y);
        self.push(Tensor::new(&[n, m], out)?, Op::PairwiseSqDist(x, y), ng, "pairwise_sq_dist")
    }

    /// Row-wise cosine similarity of `a[N,d]` and `b[N,d]`, output `[N]`.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sa != sb {
            return Err(shape_err(self.next_id(), "cosine_similarity", format!("{sa:?} vs {sb:?}")));
        }
        let (n, d) = (sa[0], sa[1]);
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let out = (0..n)
            .map(|i| {
                let (x, y) = (&va[i * d..(i + 1) * d], &vb[i * d..(i + 1) * d]);
                let (dot, nx, ny) = dot_norms(x, y);
                dot / (nx * ny)
            })
            .collect();
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(&[n], out)?, Op::CosineSim(a, b), ng, "cosine_similarity")
    }

    /// Mean softmax cross-entropy of `logits[N,C]` against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || targets.len() != s[0] || targets.iter().any(|&t| t >= s[1]) {
            return Err(shape_err(
                self.next_id(),
                "softmax_cross_entropy",
                format!("logits {s:?}, {} targets", targets.len()),
            ));
        }
        let (n, c) = (s[0], s[1]);
        let lv = self.value(logits).data();
        let mut probs = vec![T::zero(); n * c];
        let mut total = T::zero();
        for i in 0..n {
            let row = &lv[i * c..(i + 1) * c];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - mx).exp()).sum();
            for j in 0..c {
                probs[i * c + j] = (row[j] - mx).exp() / z;
            }
            total = total + (z.ln() + mx - row[targets[i]]);
        }
        let loss = total / T::of(n as f64);
        let ng = self.ng(logits);
        let op = Op::SoftmaxCe {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        self.push(Tensor::scalar(loss), op, ng, "softmax_cross_entropy")
    }

    // ---- backward --------------------------------------------------------

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let ls = self.shape(loss);
        if ls.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(ls.to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.ng(loss) {
            grads[loss.0] = Some(Tensor::full(ls, T::one()));
        }
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop(id, &g, &mut grads);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, delta: Vec<T>) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(t) => {
                for (a, b) in t.data_mut().iter_mut().zip(delta) {
                    *a = *a + b;
                }
            }
            slot @ None => {
                let shape = self.shape(v);
                *slot = Some(Tensor::new(shape, delta).expect("gradient shape matches node"));
            }
        }
    }

    /// Reduces a broadcast-shaped gradient back onto operand `v`.
    fn reduce_to(&self, out_shape: &[usize], v: Var, g: impl Fn(usize) -> T) -> Vec<T> {
        let vs = self.shape(v);
        let n: usize = out_shape.iter().product();
        if vs == out_shape {
            return (0..n).map(g).collect();
        }
        let (_, ob) = broadcast_offsets(out_shape, out_shape, vs);
        let mut out = vec![T::zero(); vs.iter().product()];
        for (i, &o) in ob.iter().enumerate() {
            out[o] = out[o] + g(i);
        }
        out
    }

    fn operand_at(&self, out_shape: &[usize], v: Var) -> Vec<T> {
        let vs = self.shape(v);
        let data = self.value(v).data();
        if vs == out_shape {
            return data.to_vec();
        }
        let (_, ob) = broadcast_offsets(out_shape, out_shape, vs);
        ob.iter().map(|&o| data[o]).collect()
    }

    fn backprop(&self, id: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[id];
        let out = node.value.data();
        let gd = g.data();
        let os = node.value.shape();
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::Add(a, b) => {
                for &v in [a, b] {
                    if self.ng(v) {
                        let d = self.reduce_to(os, v, |i| gd[i]);
                        self.accumulate(grads, v, d);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.ng(*a) {
                    let d = self.reduce_to(os, *a, |i| gd[i]);
                    self.accumulate(grads, *a, d);
                }
                if self.ng(*b) {
                    let d = self.reduce_to(os, *b, |i| -gd[i]);
                    self.accumulate(grads, *b, d);
                }
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    let bv = self.operand_at(os, *b);
                    let d = self.reduce_to(os, *a, |i| gd[i] * bv[i]);
                    self.accumulate(grads, *a, d);
                }
                if self.ng(*b) {
                    let av = self.operand_at(os, *a);
                    let d = self.reduce_to(os, *b, |i| gd[i] * av[i]);
                    self.accumulate(grads, *b, d);
                }
            }
            Op::Div(a, b) => {
                let bv = self.operand_at(os, *b);
                if self.ng(*a) {
                    let d = self.reduce_to(os, *a, |i| gd[i] / bv[i]);
                    self.accumulate(grads, *a, d);
                }
                if self.ng(*b) {
                    // d(a/b)/db = -(a/b)/b
                    let d = self.reduce_to(os, *b, |i| -gd[i] * out[i] / bv[i]);
                    self.accumulate(grads, *b, d);
                }
            }
            Op::Scale(x, c) => {
                let d = gd.iter().map(|&v| v * *c).collect();
                self.accumulate(grads, *x, d);
            }
            Op::Shift(x) | Op::Reshape(x) => self.accumulate(grads, *x, gd.to_vec()),
            Op::StraightThrough { z } => self.accumulate(grads, *z, gd.to_vec()),
            Op::Relu(x) => {
                let d = gd
                    .iter()
                    .zip(out)
                    .map(|(&g, &y)| if y > T::zero() { g } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, d);
            }
            Op::Tanh(x) => {
                let d = gd.iter().zip(out).map(|(&g, &y)| g * (T::one() - y * y)).collect();
                self.accumulate(grads, *x, d);
            }
            Op::Sigmoid(x) => {
                let d = gd.iter().zip(out).map(|(&g, &y)| g * y * (T::one() - y)).collect();
                self.accumulate(grads, *x, d);
            }
            Op::Exp(x) => {
                let d = gd.iter().zip(out).map(|(&g, &y)| g * y).collect();
                self.accumulate(grads, *x, d);
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.ng(*a) {
                    let mut d = vec![T::zero(); m * k];
                    T::gemm(m, n, k, gd, false, self.value(*b).data(), true, &mut d, false);
                    self.accumulate(grads, *a, d);
                }
                if self.ng(*b) {
                    let mut d = vec![T::zero(); k * n];
                    T::gemm(k, m, n, self.value(*a).data(), true, gd, false, &mut d, false);
                    self.accumulate(grads, *b, d);
                }
            }
            Op::Linear { x, w, b } => {
                let (sx, sw) = (self.shape(*x), self.shape(*w));
                let (n, fin, fout) = (sx[0], sx[1], sw[0]);
                if self.ng(*x) {
                    let mut d = vec![T::zero(); n * fin];
                    T::gemm(n, fout, fin, gd, false, self.value(*w).data(), false, &mut d, false);
                    self.accumulate(grads, *x, d);
                }
                if self.ng(*w) {
                    let mut d = vec![T::zero(); fout * fin];
                    T::gemm(fout, n, fin, gd, true, self.value(*x).data(), false, &mut d, false);
                    self.accumulate(grads, *w, d);
                }
                if self.ng(*b) {
                    let mut d = vec![T::zero(); fout];
                    for row in gd.chunks(fout) {
                        for (a, &v) in d.iter_mut().zip(row) {
                            *a = *a + v;
                        }
                    }
                    self.accumulate(grads, *b, d);
                }
            }
            Op::Conv2d { x, w, b, geom } => self.conv2d_backward(gd, *x, *w, *b, geom, grads),
            Op::ConvTranspose2d { x, w, b, geom } => self.conv_t_backward(gd, *x, *w, *b, geom, grads),
            Op::Upsample2(x) => {
                let s = self.shape(*x);
                let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
                let mut d = vec![T::zero(); planes * h * w];
                for p in 0..planes {
                    let gp = &gd[p * 4 * h * w..(p + 1) * 4 * h * w];
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            let t = p * h * w + (y / 2) * w + xx / 2;
                            d[t] = d[t] + gp[y * 2 * w + xx];
                        }
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::ConcatChannels(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (n, hw) = (sa[0], sa[2] * sa[3]);
                let (la, lb) = (sa[1] * hw, sb[1] * hw);
                let mut da = Vec::with_capacity(n * la);
                let mut db = Vec::with_capacity(n * lb);
                for i in 0..n {
                    let base = i * (la + lb);
                    da.extend_from_slice(&gd[base..base + la]);
                    db.extend_from_slice(&gd[base + la..base + la + lb]);
                }
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::ToRows(x) => {
                let s = self.shape(*x);
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                let mut d = vec![T::zero(); n * c * hw];
                for i in 0..n {
                    for ch in 0..c {
                        for p in 0..hw {
                            d[(i * c + ch) * hw + p] = gd[(i * hw + p) * c + ch];
                        }
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::FromRows(x) => {
                let (n, c, hw) = (os[0], os[1], os[2] * os[3]);
                let mut d = vec![T::zero(); n * c * hw];
                for i in 0..n {
                    for ch in 0..c {
                        for p in 0..hw {
                            d[(i * hw + p) * c + ch] = gd[(i * c + ch) * hw + p];
                        }
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::GatherRows { table, idx } => {
                let s = self.shape(*table);
                let d = s[1];
                let mut acc = vec![T::zero(); s[0] * d];
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..d {
                        acc[i * d + j] = acc[i * d + j] + gd[r * d + j];
                    }
                }
                self.accumulate(grads, *table, acc);
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                self.accumulate(grads, *x, vec![gd[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                self.accumulate(grads, *x, vec![gd[0] / T::of(n as f64); n]);
            }
            Op::SumAxes(x) => {
                let xs = self.shape(*x);
                let (_, ob) = broadcast_offsets(xs, xs, os);
                let d = ob.iter().map(|&o| gd[o]).collect();
                self.accumulate(grads, *x, d);
            }
            Op::PairwiseSqDist(x, y) => {
                let (sx, sy) = (self.shape(*x), self.shape(*y));
                let (n, m, d) = (sx[0], sy[0], sx[1]);
                let (xv, yv) = (self.value(*x).data(), self.value(*y).data());
                let two = T::of(2.0);
                let mut dx = vec![T::zero(); n * d];
                let mut dy = vec![T::zero(); m * d];
                for i in 0..n {
                    for j in 0..m {
                        let gij = two * gd[i * m + j];
                        if gij == T::zero() {
                            continue;
                        }
                        for k in 0..d {
                            let diff = gij * (xv[i * d + k] - yv[j * d + k]);
                            dx[i * d + k] = dx[i * d + k] + diff;
                            dy[j * d + k] = dy[j * d + k] - diff;
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *y, dy);
            }
            Op::CosineSim(a, b) => {
                let s = self.shape(*a);
                let (n, d) = (s[0], s[1]);
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let mut da = vec![T::zero(); n * d];
                let mut db = vec![T::zero(); n * d];
                for i in 0..n {
                    let (x, y) = (&va[i * d..(i + 1) * d], &vb[i * d..(i + 1) * d]);
                    let (_, nx, ny) = dot_norms(x, y);
                    let c = out[i];
                    for k in 0..d {
                        da[i * d + k] = gd[i] * (y[k] / (nx * ny) - c * x[k] / (nx * nx));
                        db[i * d + k] = gd[i] * (x[k] / (nx * ny) - c * y[k] / (ny * ny));
                    }
                }
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::SoftmaxCe { logits, targets, probs } => {
                let c = self.shape(*logits)[1];
                let scale = gd[0] / T::of(targets.len() as f64);
                let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (i, &t) in targets.iter().enumerate() {
                    d[i * c + t] = d[i * c + t] - scale;
                }
                self.accumulate(grads, *logits, d);
            }
        }
    }

    fn conv2d_backward(&self, gd: &[T], x: Var, w: Var, b: Var, geom: &ConvGeom, grads: &mut [Option<Tensor<T>>]) {
        let n = self.shape(x)[0];
        let o = self.shape(w)[0];
        let (rows, cols_n) = (geom.col_rows(), geom.col_cols());
        let in_len = geom.c * geom.h * geom.w;
        let (xv, wv) = (self.value(x).data(), self.value(w).data());
        let mut cols = vec![T::zero(); rows * cols_n];
        if self.ng(x) {
            let mut dx = vec![T::zero(); n * in_len];
            for i in 0..n {
                let gi = &gd[i * o * cols_n..(i + 1) * o * cols_n];
                T::gemm(rows, o, cols_n, wv, true, gi, false, &mut cols, false);
                col2im(&cols, geom, &mut dx[i * in_len..(i + 1) * in_len]);
            }
            self.accumulate(grads, x, dx);
        }
        if self.ng(w) {
            let mut dw = vec![T::zero(); o * rows];
            for i in 0..n {
                im2col(&xv[i * in_len..(i + 1) * in_len], geom, &mut cols);
                let gi = &gd[i * o * cols_n..(i + 1) * o * cols_n];
                T::gemm(o, cols_n, rows, gi, false, &cols, true, &mut dw, true);
            }
            self.accumulate(grads, w, dw);
        }
        if self.ng(b) {
            let mut db = vec![T::zero(); o];
            for (p, plane) in gd.chunks(cols_n).enumerate() {
                db[p % o] = db[p % o] + plane.iter().copied().sum();
            }
            self.accumulate(grads, b, db);
        }
    }

    fn conv_t_backward(&self, gd: &[T], x: Var, w: Var, b: Var, geom: &ConvGeom, grads: &mut [Option<Tensor<T>>]) {
        let sx = self.shape(x);
        let (n, ci) = (sx[0], sx[1]);
        let co = geom.c;
        let hw = geom.oh * geom.ow;
        let rows = geom.col_rows();
        let plane_out = co * geom.h * geom.w;
        let (xv, wv) = (self.value(x).data(), self.value(w).data());
        let need_x = self.ng(x);
        let need_w = self.ng(w);
        if need_x || need_w {
            let mut cols = vec![T::zero(); rows * hw];
            let mut dx = if need_x { vec![T::zero(); n * ci * hw] } else { Vec::new() };
            let mut dw = if need_w { vec![T::zero(); ci * rows] } else { Vec::new() };
            for i in 0..n {
                im2col(&gd[i * plane_out..(i + 1) * plane_out], geom, &mut cols);
                if need_x {
                    T::gemm(ci, rows, hw, wv, false, &cols, false, &mut dx[i * ci * hw..(i + 1) * ci * hw], false);
                }
                if need_w {
                    T::gemm(ci, hw, rows, &xv[i * ci * hw..(i + 1) * ci * hw], false, &cols, true, &mut dw, true);
                }
            }
            if need_x {
                self.accumulate(grads, x, dx);
            }
            if need_w {
                self.accumulate(grads, w, dw);
            }
        }
        if self.ng(b) {
            let mut db = vec![T::zero(); co];
            let plane = geom.h * geom.w;
            for (p, chunk) in gd.chunks(plane).enumerate() {
                db[p % co] = db[p % co] + chunk.iter().copied().sum();
            }
            self.accumulate(grads, b, db);
        }
    }
}

fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn dot_norms<T: Real>(x: &[T], y: &[T]) -> (T, T, T) {
    let floor = T::of(1e-12);
    let dot: T = x.iter().zip(y).map(|(&a, &b)| a * b).sum();
    let nx = x.iter().map(|&a| a * a).sum::<T>().sqrt().max(floor);
    let ny = y.iter().map(|&a| a * a).sum::<T>().sqrt().max(floor);
    (dot, nx, ny)
}
