use super::conv::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    /// Parameter, constant, or the output of an op none of whose inputs
    /// required a gradient.
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    MulScalar(Var, T),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    SumAxis { x: Var, outer: usize, len: usize, inner: usize },
    MatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    ConvT2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    LogSoftmax { x: Var, outer: usize, len: usize, inner: usize },
    Normalize { x: Var, outer: usize, len: usize, inner: usize, norms: Vec<T> },
    L1 { a: Var, b: Var },
    SqL2 { a: Var, b: Var },
    /// out[i] = x[map[i]]; used for permute, resize and row gathers.
    Gather { x: Var, map: Vec<usize> },
    Reshape(Var),
    StraightThrough(Var),
    PairwiseSqDist { a: Var, b: Var, n: usize, k: usize, d: usize },
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Vec<T>,
    shape: Vec<usize>,
    requires_grad: bool,
    op: Op<T>,
}

/// Linear record of a forward computation.
///
/// Nodes are appended in evaluation order, so the tape is topologically
/// sorted by construction. Single-threaded: build one tape per forward pass.
#[derive(Clone, Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, len: usize) -> &mut Vec<T> {
    slot.get_or_insert_with(|| vec![T::zero(); len])
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<T>, shape: Vec<usize>, requires_grad: bool, op: Op<T>) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            shape,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a tensor, honouring its `requires_grad` flag.
    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.data().to_vec(), t.shape().to_vec(), t.requires_grad(), Op::Leaf)
    }

    pub fn constant(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.data().to_vec(), t.shape().to_vec(), false, Op::Leaf)
    }

    pub fn leaf(&mut self, shape: Vec<usize>, data: Vec<T>, requires_grad: bool) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t.data, t.shape, requires_grad, Op::Leaf))
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        let mut t = Tensor::new(n.shape.clone(), n.value.clone()).expect("tape node shape");
        if let Some(Some(g)) = self.grads.get(v.0) {
            t.set_grad(g.clone()).expect("grad length");
        }
        t
    }

    /// Gradient accumulated by the last [`Tape::backward`] call, if any
    /// path from the loss reached `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<(usize, usize, usize)> {
        let shape = self.shape(x);
        if axis >= shape.len() {
            return Err(Error::InvalidShape {
                op,
                msg: format!("axis {axis} out of range for shape {shape:?}"),
            });
        }
        Ok(split_axis(shape, axis))
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, mk: impl Fn(Var, Var) -> Op<T>) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(value, self.shape(a).to_vec(), rg, mk(a, b)))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(x).iter().map(|&v| f(v)).collect();
        let rg = self.requires_grad(x);
        self.push(value, self.shape(x).to_vec(), rg, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        self.unary(x, |v| v + s, Op::AddScalar(x))
    }

    pub fn mul_scalar(&mut self, x: Var, s: T) -> Var {
        self.unary(x, |v| v * s, Op::MulScalar(x, s))
    }

    /// ReLU; the subgradient at zero is zero.
    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.ln(), Op::Log(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        let rg = self.requires_grad(x);
        self.push(vec![s], vec![1], rg, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::from_count(self.value(x).len());
        let s = self.sum(x);
        self.mul_scalar(s, T::one() / n)
    }

    /// Sums out one axis; the result drops that axis (a rank-1 input
    /// reduces to shape `[1]`).
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = self.check_axis("sum_axis", x, axis)?;
        let xv = self.value(x);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &xv[(o * len + l) * inner..][..inner];
                for (d, &s) in out[o * inner..][..inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = self.shape(x).to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let rg = self.requires_grad(x);
        Ok(self.push(out, shape, rg, Op::SumAxis { x, outer, len, inner }))
    }

    /// `[m,k] x [k,n]` or batched `[b,m,k] x [b,k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, m, k, k2, n) = match (sa.len(), sb.len()) {
            (2, 2) => (1, sa[0], sa[1], sb[0], sb[1]),
            (3, 3) if sa[0] == sb[0] => (sa[0], sa[1], sa[2], sb[1], sb[2]),
            _ => (0, 0, 1, 2, 0),
        };
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![T::zero(); batch * m * n];
        for bi in 0..batch {
            let ab = &av[bi * m * k..][..m * k];
            let bb = &bv[bi * k * n..][..k * n];
            let ob = &mut out[bi * m * n..][..m * n];
            for i in 0..m {
                let orow = &mut ob[i * n..][..n];
                for p in 0..k {
                    let aip = ab[i * k + p];
                    for (o, &bv) in orow.iter_mut().zip(&bb[p * n..][..n]) {
                        *o += aip * bv;
                    }
                }
            }
        }
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(out, shape, rg, Op::MatMul { a, b, batch, m, k, n }))
    }

    /// NCHW convolution with `[out, in, kh, kw]` weights and optional bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: sx,
                rhs: sw,
            });
        }
        let out_h = ConvGeom::conv_out(sx[2], sw[2], stride, pad);
        let out_w = ConvGeom::conv_out(sx[3], sw[3], stride, pad);
        let (Some(out_h), Some(out_w)) = (out_h, out_w) else {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: sx,
                rhs: sw,
            });
        };
        if let Some(b) = b {
            if self.shape(b) != [sw[0]] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: sw,
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let geom = ConvGeom {
            batch: sx[0],
            in_ch: sx[1],
            out_ch: sw[0],
            in_h: sx[2],
            in_w: sx[3],
            out_h,
            out_w,
            k_h: sw[2],
            k_w: sw[3],
            stride,
            pad,
        };
        let out = conv::conv2d_forward(&geom, self.value(x), self.value(w), b.map(|b| self.value(b)));
        let rg = self.requires_grad(x) || self.requires_grad(w) || b.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(out, vec![geom.batch, geom.out_ch, out_h, out_w], rg, Op::Conv2d { x, w, b, geom }))
    }

    /// NCHW transposed convolution with `[in, out, kh, kw]` weights.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[0] {
            return Err(Error::ShapeMismatch {
                op: "conv_transpose2d",
                lhs: sx,
                rhs: sw,
            });
        }
        let out_h = ConvGeom::conv_transpose_out(sx[2], sw[2], stride, pad);
        let out_w = ConvGeom::conv_transpose_out(sx[3], sw[3], stride, pad);
        let (Some(out_h), Some(out_w)) = (out_h, out_w) else {
            return Err(Error::ShapeMismatch {
                op: "conv_transpose2d",
                lhs: sx,
                rhs: sw,
            });
        };
        if let Some(b) = b {
            if self.shape(b) != [sw[1]] {
                return Err(Error::ShapeMismatch {
                    op: "conv_transpose2d bias",
                    lhs: sw,
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let geom = ConvGeom {
            batch: sx[0],
            in_ch: sx[1],
            out_ch: sw[1],
            in_h: sx[2],
            in_w: sx[3],
            out_h,
            out_w,
            k_h: sw[2],
            k_w: sw[3],
            stride,
            pad,
        };
        let out = conv::conv_transpose2d_forward(&geom, self.value(x), self.value(w), b.map(|b| self.value(b)));
        let rg = self.requires_grad(x) || self.requires_grad(w) || b.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(out, vec![geom.batch, geom.out_ch, out_h, out_w], rg, Op::ConvT2d { x, w, b, geom }))
    }

    fn softmax_values(xv: &[T], outer: usize, len: usize, inner: usize, log: bool) -> Vec<T> {
        let mut out = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |l: usize| (o * len + l) * inner + i;
                let mut mx = T::neg_infinity();
                for l in 0..len {
                    mx = mx.max(xv[idx(l)]);
                }
                let mut z = T::zero();
                for l in 0..len {
                    z += (xv[idx(l)] - mx).exp();
                }
                let lz = z.ln();
                for l in 0..len {
                    let sh = xv[idx(l)] - mx;
                    out[idx(l)] = if log { sh - lz } else { sh.exp() / z };
                }
            }
        }
        out
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = self.check_axis("softmax", x, axis)?;
        let out = Self::softmax_values(self.value(x), outer, len, inner, false);
        let rg = self.requires_grad(x);
        Ok(self.push(out, self.shape(x).to_vec(), rg, Op::Softmax { x, outer, len, inner }))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = self.check_axis("log_softmax", x, axis)?;
        let out = Self::softmax_values(self.value(x), outer, len, inner, true);
        let rg = self.requires_grad(x);
        Ok(self.push(out, self.shape(x).to_vec(), rg, Op::LogSoftmax { x, outer, len, inner }))
    }

    /// Scales every fibre along `axis` to unit Euclidean length.
    pub fn normalize(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = self.check_axis("normalize", x, axis)?;
        let xv = self.value(x);
        let mut out = vec![T::zero(); xv.len()];
        let mut norms = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut s = T::zero();
                for l in 0..len {
                    let v = xv[(o * len + l) * inner + i];
                    s += v * v;
                }
                let nrm = s.sqrt();
                if nrm == T::zero() {
                    return Err(Error::InvalidShape {
                        op: "normalize",
                        msg: format!("zero-norm fibre at outer {o}, inner {i}"),
                    });
                }
                norms[o * inner + i] = nrm;
                for l in 0..len {
                    let k = (o * len + l) * inner + i;
                    out[k] = xv[k] / nrm;
                }
            }
        }
        let rg = self.requires_grad(x);
        Ok(self.push(out, self.shape(x).to_vec(), rg, Op::Normalize { x, outer, len, inner, norms }))
    }

    /// Sum of absolute differences; subgradient at equality is zero.
    pub fn l1_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("l1_distance", a, b)?;
        let s = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| (x - y).abs()).sum();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(vec![s], vec![1], rg, Op::L1 { a, b }))
    }

    /// Sum of squared differences.
    pub fn sq_l2_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sq_l2_distance", a, b)?;
        let s = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(vec![s], vec![1], rg, Op::SqL2 { a, b }))
    }

    /// Generic index gather: `out[i] = x[map[i]]` with the given output shape.
    pub fn gather(&mut self, x: Var, map: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        let n = self.value(x).len();
        if map.iter().any(|&m| m >= n) || map.len() != shape.iter().product::<usize>() {
            return Err(Error::InvalidShape {
                op: "gather",
                msg: format!("index map of length {} invalid for input {:?} -> {:?}", map.len(), self.shape(x), shape),
            });
        }
        let xv = self.value(x);
        let out = map.iter().map(|&m| xv[m]).collect();
        let rg = self.requires_grad(x);
        Ok(self.push(out, shape, rg, Op::Gather { x, map }))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::InvalidShape {
                op: "permute",
                msg: format!("axes {axes:?} do not permute shape {shape:?}"),
            });
        }
        let mut strides = vec![1usize; shape.len()];
        for d in (0..shape.len().saturating_sub(1)).rev() {
            strides[d] = strides[d + 1] * shape[d + 1];
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let n: usize = shape.iter().product();
        let mut map = Vec::with_capacity(n);
        let mut idx = vec![0usize; shape.len()];
        for _ in 0..n {
            map.push(idx.iter().zip(axes).map(|(&i, &a)| i * strides[a]).sum());
            for d in (0..idx.len()).rev() {
                idx[d] += 1;
                if idx[d] < out_shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        self.gather(x, map, out_shape)
    }

    /// Nearest-neighbour resize of an NCHW tensor; output pixel `o` reads
    /// source pixel `floor(o * in / out)`.
    pub fn resize_nearest(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || out_h == 0 || out_w == 0 {
            return Err(Error::InvalidShape {
                op: "resize_nearest",
                msg: format!("expected NCHW input and positive target, got {s:?} -> {out_h}x{out_w}"),
            });
        }
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        let mut map = Vec::with_capacity(nc * out_h * out_w);
        for c in 0..nc {
            for oh in 0..out_h {
                let ih = oh * h / out_h;
                for ow in 0..out_w {
                    let iw = ow * w / out_w;
                    map.push((c * h + ih) * w + iw);
                }
            }
        }
        self.gather(x, map, vec![s[0], s[1], out_h, out_w])
    }

    /// Selects rows of a `[k, d]` table.
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 || rows.iter().any(|&r| r >= s[0]) || rows.is_empty() {
            return Err(Error::InvalidShape {
                op: "gather_rows",
                msg: format!("row indices invalid for table {s:?}"),
            });
        }
        let d = s[1];
        let map = rows.iter().flat_map(|&r| (r * d)..(r * d + d)).collect();
        self.gather(table, map, vec![rows.len(), d])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape,
            });
        }
        let v = self.value(x).to_vec();
        let rg = self.requires_grad(x);
        Ok(self.push(v, shape, rg, Op::Reshape(x)))
    }

    /// Constant copy of `x`; gradients stop here.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.value(x).to_vec();
        self.push(v, self.shape(x).to_vec(), false, Op::Leaf)
    }

    /// Forward value `replacement`, backward identity into `x`.
    pub fn straight_through(&mut self, x: Var, replacement: Vec<T>) -> Result<Var> {
        if replacement.len() != self.value(x).len() {
            return Err(Error::ShapeMismatch {
                op: "straight_through",
                lhs: self.shape(x).to_vec(),
                rhs: vec![replacement.len()],
            });
        }
        let rg = self.requires_grad(x);
        Ok(self.push(replacement, self.shape(x).to_vec(), rg, Op::StraightThrough(x)))
    }

    /// `[n, d]` and `[k, d]` rows -> `[n, k]` squared Euclidean distances.
    pub fn pairwise_sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::ShapeMismatch {
                op: "pairwise_sq_dist",
                lhs: sa,
                rhs: sb,
            });
        }
        let (n, k, d) = (sa[0], sb[0], sa[1]);
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![T::zero(); n * k];
        for i in 0..n {
            let ar = &av[i * d..][..d];
            for j in 0..k {
                out[i * k + j] = ar
                    .iter()
                    .zip(&bv[j * d..][..d])
                    .map(|(&x, &y)| (x - y) * (x - y))
                    .sum();
            }
        }
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(out, vec![n, k], rg, Op::PairwiseSqDist { a, b, n, k, d }))
    }

    /// Reverse pass from a one-element loss. Gradients from an earlier call
    /// are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let ln = &self.nodes[loss.0];
        if ln.value.len() != 1 {
            return Err(Error::InvalidShape {
                op: "backward",
                msg: format!("loss must be scalar, got shape {:?}", ln.shape),
            });
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g);
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn slot(&mut self, v: Var) -> &mut Vec<T> {
        let len = self.nodes[v.0].shape.iter().product();
        accumulate(&mut self.grads[v.0], len)
    }

    fn add_into(&mut self, v: Var, f: impl Fn(usize) -> T) {
        if !self.wants(v) {
            return;
        }
        let dst = self.slot(v);
        for (i, d) in dst.iter_mut().enumerate() {
            *d += f(i);
        }
    }

    fn propagate(&mut self, idx: usize, g: &[T]) {
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.add_into(*a, |i| g[i]);
                self.add_into(*b, |i| g[i]);
            }
            Op::Sub(a, b) => {
                self.add_into(*a, |i| g[i]);
                self.add_into(*b, |i| -g[i]);
            }
            Op::Mul(a, b) => {
                let bv = self.nodes[b.0].value.clone();
                let av = self.nodes[a.0].value.clone();
                self.add_into(*a, |i| g[i] * bv[i]);
                self.add_into(*b, |i| g[i] * av[i]);
            }
            Op::AddScalar(x) => self.add_into(*x, |i| g[i]),
            Op::MulScalar(x, s) => {
                let s = *s;
                self.add_into(*x, |i| g[i] * s)
            }
            Op::Relu(x) => {
                let xv = std::mem::take(&mut self.nodes[x.0].value);
                self.add_into(*x, |i| if xv[i] > T::zero() { g[i] } else { T::zero() });
                self.nodes[x.0].value = xv;
            }
            Op::Exp(x) => {
                let y = std::mem::take(&mut self.nodes[idx].value);
                self.add_into(*x, |i| g[i] * y[i]);
                self.nodes[idx].value = y;
            }
            Op::Log(x) => {
                let xv = std::mem::take(&mut self.nodes[x.0].value);
                self.add_into(*x, |i| g[i] / xv[i]);
                self.nodes[x.0].value = xv;
            }
            Op::Sum(x) => self.add_into(*x, |_| g[0]),
            Op::SumAxis { x, outer, len, inner } => {
                let (len, inner) = (*len, *inner);
                let _ = outer;
                self.add_into(*x, |i| {
                    let o = i / (len * inner);
                    let r = i % inner;
                    g[o * inner + r]
                });
            }
            Op::MatMul { a, b, batch, m, k, n } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                if self.wants(*a) {
                    let bv = std::mem::take(&mut self.nodes[b.0].value);
                    let da = self.slot(*a);
                    for bi in 0..batch {
                        for i in 0..m {
                            let grow = &g[(bi * m + i) * n..][..n];
                            for p in 0..k {
                                let brow = &bv[(bi * k + p) * n..][..n];
                                let s: T = grow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
                                da[(bi * m + i) * k + p] += s;
                            }
                        }
                    }
                    self.nodes[b.0].value = bv;
                }
                if self.wants(*b) {
                    let av = std::mem::take(&mut self.nodes[a.0].value);
                    let db = self.slot(*b);
                    for bi in 0..batch {
                        for i in 0..m {
                            let grow = &g[(bi * m + i) * n..][..n];
                            for p in 0..k {
                                let aip = av[(bi * m + i) * k + p];
                                let drow = &mut db[(bi * k + p) * n..][..n];
                                for (d, &gv) in drow.iter_mut().zip(grow) {
                                    *d += aip * gv;
                                }
                            }
                        }
                    }
                    self.nodes[a.0].value = av;
                }
            }
            Op::Conv2d { x, w, b, geom } | Op::ConvT2d { x, w, b, geom } => {
                let transposed = matches!(op, Op::ConvT2d { .. });
                let xv = std::mem::take(&mut self.nodes[x.0].value);
                let wv = std::mem::take(&mut self.nodes[w.0].value);
                let mut dx = self.wants(*x).then(|| vec![T::zero(); xv.len()]);
                let mut dw = self.wants(*w).then(|| vec![T::zero(); wv.len()]);
                let mut db = b.filter(|b| self.wants(*b)).map(|_| vec![T::zero(); geom.out_ch]);
                if transposed {
                    conv::conv_transpose2d_backward(geom, &xv, &wv, g, dx.as_deref_mut(), dw.as_deref_mut(), db.as_deref_mut());
                } else {
                    conv::conv2d_backward(geom, &xv, &wv, g, dx.as_deref_mut(), dw.as_deref_mut(), db.as_deref_mut());
                }
                self.nodes[x.0].value = xv;
                self.nodes[w.0].value = wv;
                if let Some(dx) = dx {
                    self.add_into(*x, |i| dx[i]);
                }
                if let Some(dw) = dw {
                    self.add_into(*w, |i| dw[i]);
                }
                if let (Some(db), Some(b)) = (db, b) {
                    self.add_into(*b, |i| db[i]);
                }
            }
            Op::Softmax { x, outer, len, inner } => {
                let (outer, len, inner) = (*outer, *len, *inner);
                let y = &self.nodes[idx].value;
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let dot: T = (0..len).map(|l| g[at(l)] * y[at(l)]).sum();
                        for l in 0..len {
                            dx[at(l)] = y[at(l)] * (g[at(l)] - dot);
                        }
                    }
                }
                self.add_into(*x, |i| dx[i]);
            }
            Op::LogSoftmax { x, outer, len, inner } => {
                let (outer, len, inner) = (*outer, *len, *inner);
                let y = &self.nodes[idx].value;
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let gs: T = (0..len).map(|l| g[at(l)]).sum();
                        for l in 0..len {
                            dx[at(l)] = g[at(l)] - y[at(l)].exp() * gs;
                        }
                    }
                }
                self.add_into(*x, |i| dx[i]);
            }
            Op::Normalize { x, outer, len, inner, norms } => {
                let (outer, len, inner) = (*outer, *len, *inner);
                let y = &self.nodes[idx].value;
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let dot: T = (0..len).map(|l| g[at(l)] * y[at(l)]).sum();
                        let nrm = norms[o * inner + i];
                        for l in 0..len {
                            dx[at(l)] = (g[at(l)] - y[at(l)] * dot) / nrm;
                        }
                    }
                }
                self.add_into(*x, |i| dx[i]);
            }
            Op::L1 { a, b } => {
                let diff: Vec<T> = self.nodes[a.0]
                    .value
                    .iter()
                    .zip(&self.nodes[b.0].value)
                    .map(|(&x, &y)| {
                        let d = x - y;
                        if d > T::zero() {
                            g[0]
                        } else if d < T::zero() {
                            -g[0]
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                self.add_into(*a, |i| diff[i]);
                self.add_into(*b, |i| -diff[i]);
            }
            Op::SqL2 { a, b } => {
                let two = T::lit(2.0);
                let diff: Vec<T> = self.nodes[a.0]
                    .value
                    .iter()
                    .zip(&self.nodes[b.0].value)
                    .map(|(&x, &y)| two * (x - y) * g[0])
                    .collect();
                self.add_into(*a, |i| diff[i]);
                self.add_into(*b, |i| -diff[i]);
            }
            Op::Gather { x, map } => {
                if self.wants(*x) {
                    let dx = self.slot(*x);
                    for (gi, &m) in g.iter().zip(map) {
                        dx[m] += *gi;
                    }
                }
            }
            Op::Reshape(x) | Op::StraightThrough(x) => self.add_into(*x, |i| g[i]),
            Op::PairwiseSqDist { a, b, n, k, d } => {
                let (n, k, d) = (*n, *k, *d);
                let av = self.nodes[a.0].value.clone();
                let bv = self.nodes[b.0].value.clone();
                let two = T::lit(2.0);
                let mut da = vec![T::zero(); av.len()];
                let mut db = vec![T::zero(); bv.len()];
                for i in 0..n {
                    for j in 0..k {
                        let gij = g[i * k + j] * two;
                        if gij == T::zero() {
                            continue;
                        }
                        for c in 0..d {
                            let diff = (av[i * d + c] - bv[j * d + c]) * gij;
                            da[i * d + c] += diff;
                            db[j * d + c] -= diff;
                        }
                    }
                }
                self.add_into(*a, |i| da[i]);
                self.add_into(*b, |i| db[i]);
            }
        }
        self.nodes[idx].op = op;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn relu_forward() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::from_vec(vec![0.0, 1.0]).with_requires_grad(true));
        let y = tape.relu(x);
        let l = tape.sum(y);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::from_vec(vec![0.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y), &[0.5, 0.5]);
    }

    #[test]
    fn conv_with_ones_kernel_sums_input() {
        let mut tape = Tape::new();
        let xs: Vec<f64> = vec![0.5, -1.25, 3.0, 2.0, 0.125, -0.75, 4.5, 1.0, -2.0];
        let oracle: f64 = xs.iter().sum();
        let x = tape.constant(&t(vec![1, 1, 3, 3], xs));
        let w = tape.constant(&Tensor::full(vec![1, 1, 3, 3], 1.0));
        let y = tape.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1, 1]);
        assert!((tape.item(y) - oracle).abs() < 1e-12);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::from_vec(vec![1.0, 2.0]).with_requires_grad(true));
        let sq = tape.mul(x, x).unwrap();
        let l = tape.sum(sq);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);
        assert_eq!(tape.grad(l).unwrap(), &[1.0]);
    }

    #[test]
    fn l1_gradient_is_sign() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::from_vec(vec![3.0]).with_requires_grad(true));
        let z = tape.constant(&Tensor::from_vec(vec![0.0]));
        let l = tape.l1_distance(x, z).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::from_vec(vec![1.0, 2.0]).with_requires_grad(true));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn shape_errors_name_op_and_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(&Tensor::<f64>::zeros(vec![2, 3]));
        let b = tape.constant(&Tensor::<f64>::zeros(vec![3, 2]));
        let msg = tape.add(a, b).unwrap_err().to_string();
        assert!(msg.contains("add") && msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
        let c = tape.constant(&Tensor::<f64>::zeros(vec![4, 2]));
        assert!(tape.matmul(a, c).is_err());
    }

    #[test]
    fn constants_are_not_recorded_as_ops() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(&Tensor::from_vec(vec![1.0, 2.0]));
        let b = tape.exp(a);
        assert!(!tape.requires_grad(b));
        assert!(matches!(tape.nodes[b.0].op, Op::Leaf));
    }

    #[test]
    fn permute_and_resize() {
        let mut tape = Tape::new();
        let x = tape.constant(&t(vec![1, 2, 2, 2], (0..8).map(f64::from).collect()));
        let p = tape.permute(x, &[0, 2, 3, 1]).unwrap();
        assert_eq!(tape.shape(p), &[1, 2, 2, 2]);
        assert_eq!(tape.value(p), &[0.0, 4.0, 1.0, 5.0, 2.0, 6.0, 3.0, 7.0]);
        let r = tape.resize_nearest(x, 1, 1).unwrap();
        assert_eq!(tape.value(r), &[0.0, 4.0]);
        let up = tape.resize_nearest(x, 4, 4).unwrap();
        assert_eq!(&tape.value(up)[..4], &[0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn matmul_values() {
        let mut tape = Tape::new();
        let a = tape.constant(&t(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(&t(vec![2, 1], vec![5.0, 6.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &[17.0, 39.0]);
    }

    #[test]
    fn backward_clears_previous_gradients() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::from_vec(vec![2.0]).with_requires_grad(true));
        let l = tape.mul_scalar(x, 3.0);
        tape.backward(l).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[3.0]);
    }
}
