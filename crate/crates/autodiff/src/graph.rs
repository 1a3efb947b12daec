//! Dynamic tape: every primitive application appends a node, `backward`
//! walks the nodes in reverse.

use std::sync::Arc;

use crate::error::{invalid, AutodiffError, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::{numel, Tensor};
use crate::Real;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Const,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(Real),
    AddScalar,
    MatMul,
    Linear,
    Conv2d { stride: usize, pad: usize, bias: bool },
    UpsampleNearest(usize),
    Relu,
    LeakyRelu(Real),
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Square,
    Sqrt,
    Softplus,
    SumAll,
    MeanAll,
    SumAxis(usize),
    BroadcastTo,
    Reshape,
    Concat(usize),
    Slice { axis: usize, start: usize },
    Gather(Arc<Vec<usize>>),
    Cumsum { exclusive: bool },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Const => "const",
            Op::Add => "add",
            Op::Sub => "subtract",
            Op::Mul => "multiply",
            Op::Div => "divide",
            Op::Neg => "neg",
            Op::Scale(_) => "scale",
            Op::AddScalar => "add_scalar",
            Op::MatMul => "matmul",
            Op::Linear => "linear",
            Op::Conv2d { .. } => "conv2d",
            Op::UpsampleNearest(_) => "upsample_nearest",
            Op::Relu => "relu",
            Op::LeakyRelu(_) => "leaky_relu",
            Op::Sigmoid => "sigmoid",
            Op::Tanh => "tanh",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Square => "square",
            Op::Sqrt => "sqrt",
            Op::Softplus => "softplus",
            Op::SumAll => "reduce_sum",
            Op::MeanAll => "reduce_mean",
            Op::SumAxis(_) => "sum_axis",
            Op::BroadcastTo => "broadcast",
            Op::Reshape => "reshape",
            Op::Concat(_) => "concatenate",
            Op::Slice { .. } => "slice",
            Op::Gather(_) => "gather",
            Op::Cumsum { .. } => "cumsum",
        }
    }
}

struct Node {
    shape: Vec<usize>,
    value: Vec<Real>,
    op: Op,
    inputs: Vec<Var>,
    requires_grad: bool,
    finite: bool,
}

/// Recorded computation. Rebuilt for every step.
pub struct Graph {
    nodes: Vec<Node>,
    check_finite: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Leaf gradients produced by a backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<Real>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[Real]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

impl Graph {
    /// Non-finite input checks are on in debug builds.
    pub fn new() -> Self {
        Self::with_finite_checks(cfg!(debug_assertions))
    }

    pub fn with_finite_checks(on: bool) -> Self {
        Self {
            nodes: Vec::new(),
            check_finite: on,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    pub fn inputs(&self, v: Var) -> &[Var] {
        &self.nodes[v.0].inputs
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[Real] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> Real {
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape invariant")
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<Real>, op: Op, inputs: Vec<Var>) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        let requires_grad = match op {
            Op::Leaf => true,
            _ => inputs.iter().any(|v| self.nodes[v.0].requires_grad),
        };
        let (op, inputs) = if requires_grad || matches!(op, Op::Leaf) {
            (op, inputs)
        } else {
            (Op::Const, Vec::new())
        };
        let finite = !self.check_finite || value.iter().all(|v| v.is_finite());
        self.nodes.push(Node {
            shape,
            value,
            op,
            inputs,
            requires_grad,
            finite,
        });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, op: &'static str, inputs: &[Var]) -> Result<()> {
        if self.check_finite && inputs.iter().any(|v| !self.nodes[v.0].finite) {
            return Err(AutodiffError::NonFinite { op });
        }
        Ok(())
    }

    // ---- leaves -------------------------------------------------------

    /// Copies `t` onto the tape; differentiable iff `t.requires_grad()`.
    pub fn tensor(&mut self, t: &Tensor) -> Var {
        let op = if t.requires_grad() { Op::Leaf } else { Op::Const };
        self.push(t.shape().to_vec(), t.data().to_vec(), op, Vec::new())
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<Real>) -> Result<Var> {
        if numel(shape) != data.len() {
            return Err(AutodiffError::BadLength {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(self.push(shape.to_vec(), data, Op::Const, Vec::new()))
    }

    /// Differentiable leaf not tied to any parameter store.
    pub fn variable(&mut self, shape: &[usize], data: Vec<Real>) -> Result<Var> {
        if numel(shape) != data.len() {
            return Err(AutodiffError::BadLength {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(self.push(shape.to_vec(), data, Op::Leaf, Vec::new()))
    }

    pub fn scalar_const(&mut self, v: Real) -> Var {
        self.push(vec![], vec![v], Op::Const, Vec::new())
    }

    // ---- elementwise binary (broadcasting) -----------------------------

    fn binary(
        &mut self,
        op: Op,
        a: Var,
        b: Var,
        f: impl Fn(Real, Real) -> Real,
    ) -> Result<Var> {
        let name = op.name();
        self.check(name, &[a, b])?;
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        let out = kernels::broadcast_shape(sa, sb).ok_or_else(|| AutodiffError::ShapeMismatch {
            op: name,
            lhs: sa.clone(),
            rhs: sb.clone(),
        })?;
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let value = if sa == sb {
            va.iter().zip(vb).map(|(x, y)| f(*x, *y)).collect()
        } else {
            let mut v = vec![0.0; numel(&out)];
            let ta = kernels::broadcast_strides(sa, &out);
            let tb = kernels::broadcast_strides(sb, &out);
            kernels::for_each_broadcast(&out, &ta, &tb, |o, i, j| v[o] = f(va[i], vb[j]));
            v
        };
        Ok(self.push(out, value, op, vec![a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Sub, a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Mul, a, b, |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Div, a, b, |x, y| x / y)
    }

    // ---- elementwise unary ------------------------------------------------

    fn unary(&mut self, op: Op, a: Var, f: impl Fn(Real) -> Real) -> Result<Var> {
        self.check(op.name(), &[a])?;
        let n = &self.nodes[a.0];
        let value = n.value.iter().map(|x| f(*x)).collect();
        let shape = n.shape.clone();
        Ok(self.push(shape, value, op, vec![a]))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Neg, a, |x| -x)
    }

    pub fn scale(&mut self, a: Var, c: Real) -> Result<Var> {
        self.unary(Op::Scale(c), a, |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: Real) -> Result<Var> {
        self.unary(Op::AddScalar, a, |x| x + c)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Relu, a, |x| x.max(0.0))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: Real) -> Result<Var> {
        self.unary(Op::LeakyRelu(slope), a, |x| if x > 0.0 { x } else { slope * x })
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Sigmoid, a, kernels::sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Tanh, a, |x| x.tanh())
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Exp, a, |x| x.exp())
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Log, a, |x| x.ln())
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Square, a, |x| x * x)
    }

    /// Square root whose derivative at exactly zero is taken as zero.
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.nodes[a.0].value.iter().any(|v| *v < 0.0) {
            return Err(invalid("sqrt", "negative input"));
        }
        self.unary(Op::Sqrt, a, |x| x.sqrt())
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Softplus, a, kernels::softplus)
    }

    // ---- linear algebra ---------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check("matmul", &[a, b])?;
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, &self.nodes[a.0].value, false, &self.nodes[b.0].value, false, &mut out, 0.0);
        Ok(self.push(vec![m, n], out, Op::MatMul, vec![a, b]))
    }

    /// Affine map `x · w + b` with `x: [m, k]`, `w: [k, n]`, `b: [n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.check("linear", &[x, w, b])?;
        let (sx, sw, sb) = (&self.nodes[x.0].shape, &self.nodes[w.0].shape, &self.nodes[b.0].shape);
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[0] || sb.as_slice() != [sw[1]] {
            return Err(AutodiffError::ShapeMismatch {
                op: "linear",
                lhs: sx.clone(),
                rhs: sw.clone(),
            });
        }
        let (m, k, n) = (sx[0], sx[1], sw[1]);
        let bias = &self.nodes[b.0].value;
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(bias);
        }
        kernels::gemm(m, k, n, &self.nodes[x.0].value, false, &self.nodes[w.0].value, false, &mut out, 1.0);
        Ok(self.push(vec![m, n], out, Op::Linear, vec![x, w, b]))
    }

    fn conv_geom(&self, op: &'static str, x: Var, w: Var, stride: usize, pad: usize) -> Result<(usize, usize, ConvGeom)> {
        let (sx, sw) = (&self.nodes[x.0].shape, &self.nodes[w.0].shape);
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || stride == 0 {
            return Err(AutodiffError::ShapeMismatch {
                op,
                lhs: sx.clone(),
                rhs: sw.clone(),
            });
        }
        let (h, wd) = (sx[2] + 2 * pad, sx[3] + 2 * pad);
        if h < sw[2] || wd < sw[3] {
            return Err(AutodiffError::ShapeMismatch {
                op,
                lhs: sx.clone(),
                rhs: sw.clone(),
            });
        }
        let g = ConvGeom {
            channels: sx[1],
            height: sx[2],
            width: sx[3],
            kh: sw[2],
            kw: sw[3],
            stride,
            pad,
            out_h: (h - sw[2]) / stride + 1,
            out_w: (wd - sw[3]) / stride + 1,
        };
        Ok((sx[0], sw[0], g))
    }

    /// 2D convolution, NCHW input, `[out, in, kh, kw]` kernel, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let mut ins = vec![x, w];
        ins.extend(bias);
        self.check("conv2d", &ins)?;
        let (batch, out_ch, g) = self.conv_geom("conv2d", x, w, stride, pad)?;
        if let Some(b) = bias {
            if self.nodes[b.0].shape != [out_ch] {
                return Err(AutodiffError::ShapeMismatch {
                    op: "conv2d",
                    lhs: vec![out_ch],
                    rhs: self.nodes[b.0].shape.clone(),
                });
            }
        }
        let (rows, ncol) = (g.col_rows(), g.col_cols());
        let in_len = g.channels * g.height * g.width;
        let mut out = vec![0.0; batch * out_ch * ncol];
        let mut cols = vec![0.0; rows * ncol];
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        for bi in 0..batch {
            kernels::im2col(&xv[bi * in_len..(bi + 1) * in_len], &g, &mut cols);
            let dst = &mut out[bi * out_ch * ncol..(bi + 1) * out_ch * ncol];
            if let Some(b) = bias {
                for (o, chunk) in dst.chunks_mut(ncol).enumerate() {
                    chunk.fill(self.nodes[b.0].value[o]);
                }
            }
            kernels::gemm(out_ch, rows, ncol, wv, false, &cols, false, dst, 1.0);
        }
        Ok(self.push(
            vec![batch, out_ch, g.out_h, g.out_w],
            out,
            Op::Conv2d {
                stride,
                pad,
                bias: bias.is_some(),
            },
            ins,
        ))
    }

    /// Nearest-neighbour upsampling of an NCHW tensor by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        self.check("upsample_nearest", &[x])?;
        let s = self.nodes[x.0].shape.clone();
        if s.len() != 4 || factor == 0 {
            return Err(invalid("upsample_nearest", format!("expected NCHW, got {s:?}")));
        }
        let (h, w) = (s[2], s[3]);
        let (oh, ow) = (h * factor, w * factor);
        let xv = &self.nodes[x.0].value;
        let mut out = Vec::with_capacity(s[0] * s[1] * oh * ow);
        for plane in xv.chunks(h * w) {
            for y in 0..oh {
                let row = &plane[(y / factor) * w..][..w];
                for xx in 0..ow {
                    out.push(row[xx / factor]);
                }
            }
        }
        Ok(self.push(vec![s[0], s[1], oh, ow], out, Op::UpsampleNearest(factor), vec![x]))
    }

    // ---- reductions -------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check("reduce_sum", &[a])?;
        let s: Real = self.nodes[a.0].value.iter().sum();
        Ok(self.push(vec![], vec![s], Op::SumAll, vec![a]))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.check("reduce_mean", &[a])?;
        let v = &self.nodes[a.0].value;
        if v.is_empty() {
            return Err(invalid("reduce_mean", "empty tensor"));
        }
        let s: Real = v.iter().sum::<Real>() / v.len() as Real;
        Ok(self.push(vec![], vec![s], Op::MeanAll, vec![a]))
    }

    /// Sums over `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check("sum_axis", &[a])?;
        let s = self.nodes[a.0].shape.clone();
        if axis >= s.len() {
            return Err(invalid("sum_axis", format!("axis {axis} out of range for {s:?}")));
        }
        let outer: usize = s[..axis].iter().product();
        let len = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let v = &self.nodes[a.0].value;
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for l in 0..len {
                let src = &v[(o * len + l) * inner..][..inner];
                for (d, x) in dst.iter_mut().zip(src) {
                    *d += *x;
                }
            }
        }
        let mut shape = s;
        shape.remove(axis);
        Ok(self.push(shape, out, Op::SumAxis(axis), vec![a]))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let len = *self
            .nodes[a.0]
            .shape
            .get(axis)
            .ok_or_else(|| invalid("mean_axis", "axis out of range"))?;
        let s = self.sum_axis(a, axis)?;
        self.scale(s, 1.0 / len as Real)
    }

    // ---- shape manipulation ------------------------------------------------

    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check("broadcast", &[a])?;
        let sa = self.nodes[a.0].shape.clone();
        match kernels::broadcast_shape(&sa, shape) {
            Some(out) if out == shape => {}
            _ => {
                return Err(AutodiffError::ShapeMismatch {
                    op: "broadcast",
                    lhs: sa,
                    rhs: shape.to_vec(),
                })
            }
        }
        let st = kernels::broadcast_strides(&sa, shape);
        let zeros = vec![0; shape.len()];
        let v = &self.nodes[a.0].value;
        let mut out = vec![0.0; numel(shape)];
        kernels::for_each_broadcast(shape, &st, &zeros, |o, i, _| out[o] = v[i]);
        Ok(self.push(shape.to_vec(), out, Op::BroadcastTo, vec![a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let sa = &self.nodes[a.0].shape;
        if numel(sa) != numel(shape) {
            return Err(AutodiffError::ShapeMismatch {
                op: "reshape",
                lhs: sa.clone(),
                rhs: shape.to_vec(),
            });
        }
        self.check("reshape", &[a])?;
        let v = self.nodes[a.0].value.clone();
        Ok(self.push(shape.to_vec(), v, Op::Reshape, vec![a]))
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        self.check("concatenate", parts)?;
        let first = parts
            .first()
            .ok_or_else(|| invalid("concatenate", "no inputs"))?;
        let base = self.nodes[first.0].shape.clone();
        if axis >= base.len() {
            return Err(invalid("concatenate", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for p in parts {
            let s = &self.nodes[p.0].shape;
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concatenate",
                    lhs: base.clone(),
                    rhs: s.clone(),
                });
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let n = &self.nodes[p.0];
                let chunk = n.shape[axis] * inner;
                out.extend_from_slice(&n.value[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(shape, out, Op::Concat(axis), parts.to_vec()))
    }

    /// Contiguous range `[start, start + len)` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check("slice", &[a])?;
        let s = self.nodes[a.0].shape.clone();
        if axis >= s.len() || start + len > s[axis] {
            return Err(invalid(
                "slice",
                format!("range {start}..{} on axis {axis} of {s:?}", start + len),
            ));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let v = &self.nodes[a.0].value;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            out.extend_from_slice(&v[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        Ok(self.push(shape, out, Op::Slice { axis, start }, vec![a]))
    }

    /// `out[i] = a.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, a: Var, index: Arc<Vec<usize>>, shape: &[usize]) -> Result<Var> {
        self.check("gather", &[a])?;
        let v = &self.nodes[a.0].value;
        if numel(shape) != index.len() {
            return Err(invalid("gather", "index length does not match output shape"));
        }
        if let Some(bad) = index.iter().find(|i| **i >= v.len()) {
            return Err(invalid("gather", format!("index {bad} out of range {}", v.len())));
        }
        let out = index.iter().map(|i| v[*i]).collect();
        Ok(self.push(shape.to_vec(), out, Op::Gather(index), vec![a]))
    }

    /// Running sum along the last axis; `exclusive` shifts it by one so the
    /// first entry is zero.
    pub fn cumsum(&mut self, a: Var, exclusive: bool) -> Result<Var> {
        self.check("cumsum", &[a])?;
        let s = self.nodes[a.0].shape.clone();
        let len = *s.last().ok_or_else(|| invalid("cumsum", "scalar input"))?;
        let v = &self.nodes[a.0].value;
        let mut out = vec![0.0; v.len()];
        if len > 0 {
            for (src, dst) in v.chunks(len).zip(out.chunks_mut(len)) {
                let mut acc = 0.0;
                for (x, y) in src.iter().zip(dst.iter_mut()) {
                    if exclusive {
                        *y = acc;
                        acc += *x;
                    } else {
                        acc += *x;
                        *y = acc;
                    }
                }
            }
        }
        Ok(self.push(s, out, Op::Cumsum { exclusive }, vec![a]))
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse pass from a single-element output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let n = &self.nodes[output.0];
        if n.value.len() != 1 {
            return Err(AutodiffError::NotScalar(n.shape.clone()));
        }
        self.backward_seeded(output, &[1.0])
    }

    /// Reverse pass with an explicit output cotangent (vector-Jacobian product).
    pub fn backward_seeded(&self, output: Var, seed: &[Real]) -> Result<Gradients> {
        let n = &self.nodes[output.0];
        if !n.requires_grad {
            return Err(AutodiffError::NonDifferentiable);
        }
        if seed.len() != n.value.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "backward",
                lhs: n.shape.clone(),
                rhs: vec![seed.len()],
            });
        }
        let mut grads: Vec<Option<Vec<Real>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed.to_vec());
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf | Op::Const) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        // only leaves keep their gradients
        for (i, g) in grads.iter_mut().enumerate() {
            if !matches!(self.nodes[i].op, Op::Leaf) {
                *g = None;
            } else if let Some(v) = g.as_ref() {
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(AutodiffError::NonFinite { op: "backward" });
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[Real], grads: &mut [Option<Vec<Real>>]) {
        let ins = &node.inputs;
        let val = |v: Var| &self.nodes[v.0].value;
        let shp = |v: Var| &self.nodes[v.0].shape;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut give = |v: Var, d: Vec<Real>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&d) {
                        *a += *b;
                    }
                }
                slot @ None => *slot = Some(d),
            }
        };
        let elementwise = |f: &dyn Fn(usize) -> Real| -> Vec<Real> { (0..g.len()).map(f).collect() };

        match &node.op {
            Op::Leaf | Op::Const => {}
            Op::Add | Op::Sub => {
                let (a, b) = (ins[0], ins[1]);
                if wants(a) {
                    give(a, kernels::reduce_to(g, &node.shape, shp(a)));
                }
                if wants(b) {
                    let mut d = kernels::reduce_to(g, &node.shape, shp(b));
                    if matches!(node.op, Op::Sub) {
                        d.iter_mut().for_each(|x| *x = -*x);
                    }
                    give(b, d);
                }
            }
            Op::Mul | Op::Div => {
                let (a, b) = (ins[0], ins[1]);
                let (va, vb) = (val(a), val(b));
                let ta = kernels::broadcast_strides(shp(a), &node.shape);
                let tb = kernels::broadcast_strides(shp(b), &node.shape);
                let div = matches!(node.op, Op::Div);
                if wants(a) {
                    let mut d = vec![0.0; va.len()];
                    kernels::for_each_broadcast(&node.shape, &ta, &tb, |o, i, j| {
                        d[i] += if div { g[o] / vb[j] } else { g[o] * vb[j] };
                    });
                    give(a, d);
                }
                if wants(b) {
                    let mut d = vec![0.0; vb.len()];
                    kernels::for_each_broadcast(&node.shape, &ta, &tb, |o, i, j| {
                        d[j] += if div {
                            -g[o] * va[i] / (vb[j] * vb[j])
                        } else {
                            g[o] * va[i]
                        };
                    });
                    give(b, d);
                }
            }
            Op::Neg => give(ins[0], g.iter().map(|x| -x).collect()),
            Op::Scale(c) => give(ins[0], g.iter().map(|x| x * c).collect()),
            Op::AddScalar | Op::Reshape => give(ins[0], g.to_vec()),
            Op::MatMul => {
                let (a, b) = (ins[0], ins[1]);
                let (m, k, n) = (shp(a)[0], shp(a)[1], shp(b)[1]);
                if wants(a) {
                    let mut d = vec![0.0; m * k];
                    kernels::gemm(m, n, k, g, false, val(b), true, &mut d, 0.0);
                    give(a, d);
                }
                if wants(b) {
                    let mut d = vec![0.0; k * n];
                    kernels::gemm(k, m, n, val(a), true, g, false, &mut d, 0.0);
                    give(b, d);
                }
            }
            Op::Linear => {
                let (x, w, b) = (ins[0], ins[1], ins[2]);
                let (m, k, n) = (shp(x)[0], shp(x)[1], shp(w)[1]);
                if wants(x) {
                    let mut d = vec![0.0; m * k];
                    kernels::gemm(m, n, k, g, false, val(w), true, &mut d, 0.0);
                    give(x, d);
                }
                if wants(w) {
                    let mut d = vec![0.0; k * n];
                    kernels::gemm(k, m, n, val(x), true, g, false, &mut d, 0.0);
                    give(w, d);
                }
                if wants(b) {
                    let mut d = vec![0.0; n];
                    for row in g.chunks(n) {
                        for (a, r) in d.iter_mut().zip(row) {
                            *a += *r;
                        }
                    }
                    give(b, d);
                }
            }
            Op::Conv2d { stride, pad, bias } => {
                let (x, w) = (ins[0], ins[1]);
                let (batch, out_ch, geom) = self
                    .conv_geom("conv2d", x, w, *stride, *pad)
                    .expect("validated in forward");
                let (rows, ncol) = (geom.col_rows(), geom.col_cols());
                let in_len = geom.channels * geom.height * geom.width;
                let mut cols = vec![0.0; rows * ncol];
                let mut dw = if wants(w) { vec![0.0; out_ch * rows] } else { Vec::new() };
                let mut dx = if wants(x) { vec![0.0; batch * in_len] } else { Vec::new() };
                for bi in 0..batch {
                    let gb = &g[bi * out_ch * ncol..(bi + 1) * out_ch * ncol];
                    if wants(w) {
                        kernels::im2col(&val(x)[bi * in_len..(bi + 1) * in_len], &geom, &mut cols);
                        kernels::gemm(out_ch, ncol, rows, gb, false, &cols, true, &mut dw, 1.0);
                    }
                    if wants(x) {
                        kernels::gemm(rows, out_ch, ncol, val(w), true, gb, false, &mut cols, 0.0);
                        kernels::col2im(&cols, &geom, &mut dx[bi * in_len..(bi + 1) * in_len]);
                    }
                }
                if wants(x) {
                    give(x, dx);
                }
                if wants(w) {
                    give(w, dw);
                }
                if *bias && wants(ins[2]) {
                    let mut db = vec![0.0; out_ch];
                    for (i, chunk) in g.chunks(ncol).enumerate() {
                        db[i % out_ch] += chunk.iter().sum::<Real>();
                    }
                    give(ins[2], db);
                }
            }
            Op::UpsampleNearest(f) => {
                let s = shp(ins[0]);
                let (h, w) = (s[2], s[3]);
                let (oh, ow) = (h * f, w * f);
                let mut d = vec![0.0; val(ins[0]).len()];
                for (plane, gp) in d.chunks_mut(h * w).zip(g.chunks(oh * ow)) {
                    for y in 0..oh {
                        for xx in 0..ow {
                            plane[(y / f) * w + xx / f] += gp[y * ow + xx];
                        }
                    }
                }
                give(ins[0], d);
            }
            Op::Relu => {
                let x = val(ins[0]);
                give(ins[0], elementwise(&|i| if x[i] > 0.0 { g[i] } else { 0.0 }));
            }
            Op::LeakyRelu(s) => {
                let x = val(ins[0]);
                give(ins[0], elementwise(&|i| if x[i] > 0.0 { g[i] } else { s * g[i] }));
            }
            Op::Sigmoid => {
                let y = &node.value;
                give(ins[0], elementwise(&|i| g[i] * y[i] * (1.0 - y[i])));
            }
            Op::Tanh => {
                let y = &node.value;
                give(ins[0], elementwise(&|i| g[i] * (1.0 - y[i] * y[i])));
            }
            Op::Exp => {
                let y = &node.value;
                give(ins[0], elementwise(&|i| g[i] * y[i]));
            }
            Op::Log => {
                let x = val(ins[0]);
                give(ins[0], elementwise(&|i| g[i] / x[i]));
            }
            Op::Square => {
                let x = val(ins[0]);
                give(ins[0], elementwise(&|i| 2.0 * x[i] * g[i]));
            }
            Op::Sqrt => {
                let y = &node.value;
                give(
                    ins[0],
                    elementwise(&|i| if y[i] > 0.0 { 0.5 * g[i] / y[i] } else { 0.0 }),
                );
            }
            Op::Softplus => {
                let x = val(ins[0]);
                give(ins[0], elementwise(&|i| g[i] * kernels::sigmoid(x[i])));
            }
            Op::SumAll => give(ins[0], vec![g[0]; val(ins[0]).len()]),
            Op::MeanAll => {
                let n = val(ins[0]).len();
                give(ins[0], vec![g[0] / n as Real; n]);
            }
            Op::SumAxis(axis) => {
                let s = shp(ins[0]);
                let outer: usize = s[..*axis].iter().product();
                let len = s[*axis];
                let inner: usize = s[axis + 1..].iter().product();
                let mut d = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    for _ in 0..len {
                        d.extend_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                give(ins[0], d);
            }
            Op::BroadcastTo => give(ins[0], kernels::reduce_to(g, &node.shape, shp(ins[0]))),
            Op::Concat(axis) => {
                let outer: usize = node.shape[..*axis].iter().product();
                let inner: usize = node.shape[axis + 1..].iter().product();
                let mut offset = 0;
                for p in ins {
                    let len = shp(*p)[*axis] * inner;
                    if wants(*p) {
                        let mut d = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            let base = o * node.shape[*axis] * inner + offset;
                            d.extend_from_slice(&g[base..base + len]);
                        }
                        give(*p, d);
                    }
                    offset += len;
                }
            }
            Op::Slice { axis, start } => {
                let s = shp(ins[0]);
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let len = node.shape[*axis];
                let mut d = vec![0.0; val(ins[0]).len()];
                for o in 0..outer {
                    let base = (o * s[*axis] + start) * inner;
                    d[base..base + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                give(ins[0], d);
            }
            Op::Gather(index) => {
                let mut d = vec![0.0; val(ins[0]).len()];
                for (o, i) in index.iter().enumerate() {
                    d[*i] += g[o];
                }
                give(ins[0], d);
            }
            Op::Cumsum { exclusive } => {
                let len = *node.shape.last().expect("rank >= 1");
                let mut d = vec![0.0; g.len()];
                if len > 0 {
                    for (src, dst) in g.chunks(len).zip(d.chunks_mut(len)) {
                        let mut acc = 0.0;
                        for j in (0..len).rev() {
                            if *exclusive {
                                dst[j] = acc;
                                acc += src[j];
                            } else {
                                acc += src[j];
                                dst[j] = acc;
                            }
                        }
                    }
                }
                give(ins[0], d);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn var(g: &mut Graph, shape: &[usize], data: &[Real]) -> Var {
        g.variable(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let eye = g.constant(&[3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let a: Vec<Real> = (0..9).map(|v| v as Real - 4.0).collect();
        let av = g.constant(&[3, 3], a.clone()).unwrap();
        let out = g.matmul(eye, av).unwrap();
        assert_eq!(g.value(out), a.as_slice());
    }

    #[test]
    fn conv_identity_kernel() {
        let mut g = Graph::new();
        let x: Vec<Real> = (0..20).map(|v| (v as Real).sin()).collect();
        let xv = g.constant(&[1, 1, 4, 5], x.clone()).unwrap();
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let kv = g.constant(&[1, 1, 3, 3], k).unwrap();
        let out = g.conv2d(xv, kv, None, 1, 1).unwrap();
        assert_eq!(g.shape(out), &[1, 1, 4, 5]);
        assert_eq!(g.value(out), x.as_slice());
    }

    #[test]
    fn reduce_sum_of_ones() {
        let mut g = Graph::new();
        let x = g.constant(&[2, 2], vec![1.0; 4]).unwrap();
        let s = g.sum(x).unwrap();
        assert_eq!(g.scalar(s), 4.0);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let x = var(&mut g, &[3], &[1.0, 2.0, 3.0]);
        let sq = g.square(x).unwrap();
        let s = g.sum(sq).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn mean_gradient() {
        let mut g = Graph::new();
        let x = var(&mut g, &[4], &[0.3, -1.0, 2.0, 5.0]);
        let m = g.mean(x).unwrap();
        let grads = g.backward(m).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[0.25; 4]);
    }

    #[test]
    fn constant_output_is_not_differentiable() {
        let mut g = Graph::new();
        let c = g.scalar_const(3.0);
        assert_eq!(g.backward(c).unwrap_err(), AutodiffError::NonDifferentiable);
    }

    #[test]
    fn non_scalar_backward_rejected() {
        let mut g = Graph::new();
        let x = var(&mut g, &[2], &[1.0, 2.0]);
        let y = g.square(x).unwrap();
        assert_eq!(g.backward(y).unwrap_err(), AutodiffError::NotScalar(vec![2]));
    }

    #[test]
    fn shape_mismatch_names_shapes() {
        let mut g = Graph::new();
        let a = g.constant(&[2, 3], vec![0.0; 6]).unwrap();
        let b = g.constant(&[2, 3], vec![0.0; 6]).unwrap();
        match g.matmul(a, b).unwrap_err() {
            AutodiffError::ShapeMismatch { op, lhs, rhs } => {
                assert_eq!(op, "matmul");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            e => panic!("unexpected {e:?}"),
        }
        let c = g.constant(&[4], vec![0.0; 4]).unwrap();
        assert!(g.add(a, c).is_err());
    }

    #[test]
    fn non_finite_input_rejected_when_checking() {
        let mut g = Graph::with_finite_checks(true);
        let x = g.constant(&[2], vec![1.0, Real::NAN]).unwrap();
        assert_eq!(g.exp(x).unwrap_err(), AutodiffError::NonFinite { op: "exp" });
        let mut g = Graph::with_finite_checks(false);
        let x = g.constant(&[2], vec![1.0, Real::NAN]).unwrap();
        assert!(g.exp(x).is_ok());
    }

    #[test]
    fn nodes_recorded_only_for_differentiable_inputs() {
        let mut g = Graph::new();
        let c = g.constant(&[2], vec![1.0, 2.0]).unwrap();
        let y = g.exp(c).unwrap();
        assert_eq!(g.op_name(y), "const");
        let x = var(&mut g, &[2], &[1.0, 2.0]);
        let z = g.mul(x, y).unwrap();
        assert_eq!(g.op_name(z), "multiply");
        assert_eq!(g.inputs(z), &[x, y]);
        assert!(g.inputs(z).iter().all(|v| v.index() < z.index()));
    }

    #[test]
    fn seeded_backward_is_a_vjp() {
        let mut g = Graph::new();
        let x = var(&mut g, &[3], &[1.0, 2.0, 3.0]);
        let y = g.square(x).unwrap();
        let grads = g.backward_seeded(y, &[1.0, 0.0, -1.0]).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0, 0.0, -6.0]);
    }

    #[test]
    fn sqrt_at_zero_has_zero_gradient() {
        let mut g = Graph::new();
        let x = var(&mut g, &[2], &[0.0, 4.0]);
        let y = g.sqrt(x).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[0.0, 0.25]);
    }

    #[test]
    fn softplus_is_stable_for_large_inputs() {
        let mut g = Graph::new();
        let x = g.constant(&[3], vec![-1e4, 0.0, 1e4]).unwrap();
        let y = g.softplus(x).unwrap();
        let v = g.value(y);
        assert_eq!(v[0], 0.0);
        assert!((v[1] - (2.0 as Real).ln()).abs() < 1e-6);
        assert_eq!(v[2], 1e4);
    }
}
