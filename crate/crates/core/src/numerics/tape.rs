//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every primitive op of one forward pass. Parameters enter
//! as leaves via [`Tape::param`], fixed inputs via [`Tape::constant`]. Nodes
//! whose inputs are all constant are stored without a backward rule, so a tape
//! used purely for inference carries no gradient bookkeeping.

use crate::error::{Error, Result};

use super::tensor::{matmul_into, Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Binary {
        kind: Binary,
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
    Relu {
        a: Var,
    },
    LeakyRelu {
        a: Var,
        alpha: T,
    },
    Tanh {
        a: Var,
    },
    Sigmoid {
        a: Var,
    },
    Exp {
        a: Var,
    },
    Log {
        a: Var,
    },
    Powf {
        a: Var,
        p: T,
    },
    LayerNorm {
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax {
        a: Var,
        axis: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Sum {
        a: Var,
    },
    SumAxes {
        a: Var,
    },
    Reshape {
        a: Var,
    },
    Slice {
        a: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
    },
    Upsample2x {
        a: Var,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by the [`Var`]s of the
/// tape that produced them.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Output-element to operand-element offsets for numpy-style broadcasting.
fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            return Err(Error::shape(op, a, b));
        };
    }
    Ok(out)
}

fn broadcast_index(out: &[usize], operand: &[usize]) -> Vec<usize> {
    let n = out.len();
    let mut strides = vec![0usize; n];
    let mut acc = 1;
    for i in (0..operand.len()).rev() {
        let oi = i + n - operand.len();
        strides[oi] = if operand[i] == 1 { 0 } else { acc };
        acc *= operand[i];
    }
    let total: usize = out.iter().product();
    let mut idx = vec![0usize; total];
    let mut counter = vec![0usize; n];
    let mut offset = 0usize;
    for slot in idx.iter_mut() {
        *slot = offset;
        for d in (0..n).rev() {
            counter[d] += 1;
            offset += strides[d];
            if counter[d] < out[d] {
                break;
            }
            offset -= strides[d] * counter[d];
            counter[d] = 0;
        }
    }
    idx
}

/// Splits a shape into (outer, axis length, inner) around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    col: &mut [T],
) {
    let p = ho * wo;
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        dst[oy * wo + ox] = if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize
                        {
                            x[(ci * h + iy as usize) * w + ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(
    col: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    dx: &mut [T],
) {
    let p = ho * wo;
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dx[(ci * h + iy as usize) * w + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, len: usize, f: impl FnOnce(&mut [T])) {
    let g = grads[v.0].get_or_insert_with(|| vec![T::zero(); len]);
    f(g);
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node; outstanding [`Var`]s become invalid.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let op = if requires_grad { op } else { Op::Leaf };
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

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    /// `y = x·wᵀ + b` with `x: [m, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::shape("linear", xs, ws));
        }
        let (m, k, n) = (xs[0], xs[1], ws[0]);
        if let Some(b) = b {
            let bs = self.shape(b);
            if bs.iter().product::<usize>() != n || bs.last() != Some(&n) {
                return Err(Error::shape("linear bias", ws, bs));
            }
        }
        let mut out = vec![T::zero(); m * n];
        matmul_into(
            m,
            k,
            n,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            &mut out,
            false,
        );
        if let Some(b) = b {
            let bd = self.value(b).data();
            for row in out.chunks_mut(n) {
                for (o, &bv) in row.iter_mut().zip(bd) {
                    *o += bv;
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::Linear { x, w, b }, rg))
    }

    /// 2-d matrix product `[m,k]·[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let r = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(r, Op::MatMul { a, b }, rg))
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        };
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let f = |x: T, y: T| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        };
        let (out_shape, data) = if sa == sb {
            let (da, db) = (self.value(a).data(), self.value(b).data());
            (sa, da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect::<Vec<_>>())
        } else {
            let out_shape = broadcast_shape(name, &sa, &sb)?;
            let ia = broadcast_index(&out_shape, &sa);
            let ib = broadcast_index(&out_shape, &sb);
            let (da, db) = (self.value(a).data(), self.value(b).data());
            let data = ia.iter().zip(&ib).map(|(&i, &j)| f(da[i], db[j])).collect();
            (out_shape, data)
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&out_shape, data)?, Op::Binary { kind, a, b }, rg))
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let t = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(t, op, rg)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.unary(a, |x| x * c, Op::Scale { a, c })
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar { a })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > T::zero() { x } else { T::zero() }, Op::Relu { a })
    }

    pub fn leaky_relu(&mut self, a: Var, alpha: T) -> Var {
        self.unary(
            a,
            |x| if x > T::zero() { x } else { alpha * x },
            Op::LeakyRelu { a, alpha },
        )
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), Op::Tanh { a })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, |x| T::one() / (T::one() + (-x).exp()), Op::Sigmoid { a })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.exp(), Op::Exp { a })
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.ln(), Op::Log { a })
    }

    pub fn powf(&mut self, a: Var, p: T) -> Var {
        self.unary(a, |x| x.powf(p), Op::Powf { a, p })
    }

    /// Normalizes over the last dimension with optional affine `gamma`, `beta`
    /// (each holding exactly last-dimension many values).
    pub fn layer_norm(
        &mut self,
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        eps: T,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape
            .last()
            .ok_or_else(|| Error::invalid("layer_norm on a scalar"))?;
        for p in [gamma, beta].into_iter().flatten() {
            if self.value(p).numel() != n {
                return Err(Error::shape("layer_norm affine", &shape, self.shape(p)));
            }
        }
        let xd = self.value(x).data();
        let rows = xd.len() / n.max(1);
        let mut xhat = vec![T::zero(); xd.len()];
        let mut rstd = vec![T::zero(); rows];
        let nf = T::lit(n as f64);
        for r in 0..rows {
            let row = &xd[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for (o, &v) in xhat[r * n..(r + 1) * n].iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
        }
        let mut out = xhat.clone();
        if let Some(g) = gamma {
            let gd = self.value(g).data();
            for row in out.chunks_mut(n) {
                row.iter_mut().zip(gd).for_each(|(o, &g)| *o *= g);
            }
        }
        if let Some(b) = beta {
            let bd = self.value(b).data();
            for row in out.chunks_mut(n) {
                row.iter_mut().zip(bd).for_each(|(o, &b)| *o += b);
            }
        }
        let rg = self.rg(x) || gamma.is_some_and(|g| self.rg(g)) || beta.is_some_and(|b| self.rg(b));
        let (xhat, rstd) = if rg { (xhat, rstd) } else { (Vec::new(), Vec::new()) };
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(a).data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mut m = T::neg_infinity();
                for j in 0..len {
                    m = m.max(src[at(j)]);
                }
                let mut s = T::zero();
                for j in 0..len {
                    let e = (src[at(j)] - m).exp();
                    out[at(j)] = e;
                    s += e;
                }
                for j in 0..len {
                    out[at(j)] /= s;
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Softmax { a, axis }, rg))
    }

    /// Mean softmax cross-entropy of `logits: [B, K]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() || shape[0] == 0 {
            return Err(Error::shape("cross_entropy", &shape, &[targets.len()]));
        }
        let (b, k) = (shape[0], shape[1]);
        if let Some(&t) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::invalid(format!("target class {t} >= {k}")));
        }
        let src = self.value(logits).data();
        let mut probs = vec![T::zero(); b * k];
        let mut loss = T::zero();
        for r in 0..b {
            let row = &src[r * k..(r + 1) * k];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let s: T = row.iter().map(|&v| (v - m).exp()).sum();
            let lse = m + s.ln();
            loss += lse - row[targets[r]];
            for j in 0..k {
                probs[r * k + j] = (row[j] - lse).exp();
            }
        }
        loss /= T::lit(b as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data().iter().copied().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum { a }, rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel().max(1);
        let s = self.sum(a);
        self.scale(s, T::one() / T::lit(n as f64))
    }

    /// Sums over `axes`, keeping them as size-1 dimensions.
    pub fn sum_axes(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if let Some(&ax) = axes.iter().find(|&&ax| ax >= shape.len()) {
            return Err(Error::invalid(format!("axis {ax} out of range for {shape:?}")));
        }
        let mut out_shape = shape.clone();
        for &ax in axes {
            out_shape[ax] = 1;
        }
        let idx = broadcast_index(&shape, &out_shape);
        let mut out = vec![T::zero(); out_shape.iter().product()];
        for (&i, &v) in idx.iter().zip(self.value(a).data()) {
            out[i] += v;
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&out_shape, out)?, Op::SumAxes { a }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape { a }, rg))
    }

    /// Contiguous range `start..start+len` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::invalid(format!(
                "slice [{start}, {}) on axis {axis} of {shape:?}",
                start + len
            )));
        }
        let (outer, alen, inner) = split_axis(&shape, axis);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * alen + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&out_shape, out)?, Op::Slice { a, axis, start }, rg))
    }

    /// Joins `parts` along `axis`; every other dimension must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat of no tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid(format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// 2-d convolution, `x: [N, C, H, W]`, `w: [O, C, k, k]`, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || ws[2] != ws[3] || stride == 0 {
            return Err(Error::shape("conv2d", &xs, &ws));
        }
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, k) = (ws[0], ws[2]);
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::shape("conv2d", &xs, &ws));
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let p = ho * wo;
        let ckk = c * k * k;
        let mut col = vec![T::zero(); ckk * p];
        let mut out = vec![T::zero(); n * o * p];
        let xd = self.value(x).data();
        let wdta = self.value(w).data();
        for b in 0..n {
            im2col(&xd[b * c * h * wd..(b + 1) * c * h * wd], c, h, wd, k, stride, pad, ho, wo, &mut col);
            matmul_into(o, ckk, p, wdta, false, &col, false, &mut out[b * o * p..(b + 1) * o * p], false);
        }
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(
            Tensor::new(&[n, o, ho, wo], out)?,
            Op::Conv2d { x, w, stride, pad },
            rg,
        ))
    }

    /// Nearest-neighbour ×2 upsampling of `[N, C, H, W]`.
    pub fn upsample2x(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("upsample2x", &s, &[0, 0, 0, 0]));
        }
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        let src = self.value(a).data();
        let mut out = vec![T::zero(); nc * 4 * h * w];
        for p in 0..nc {
            for y in 0..2 * h {
                for x in 0..2 * w {
                    out[(p * 2 * h + y) * 2 * w + x] = src[(p * h + y / 2) * w + x / 2];
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(&[s[0], s[1], 2 * h, 2 * w], out)?,
            Op::Upsample2x { a },
            rg,
        ))
    }

    /// Per-(sample, channel) normalization over the spatial dimensions.
    pub fn instance_norm(&mut self, x: Var, eps: T) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("instance_norm", &s, &[0, 0, 0, 0]));
        }
        let flat = self.reshape(x, &[s[0] * s[1], s[2] * s[3]])?;
        let normed = self.layer_norm(flat, None, None, eps)?;
        self.reshape(normed, &s)
    }

    /// Backpropagates from a scalar loss. Consumes the recorded graph.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let seed = Tensor::full(self.shape(loss), T::one());
        self.backward_from(&[(loss, seed)])
    }

    /// Vector-Jacobian product from arbitrary seeds. Consumes the recorded graph.
    pub fn backward_from(&mut self, seeds: &[(Var, Tensor<T>)]) -> Result<Gradients<T>> {
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        let mut top = 0;
        for (v, g) in seeds {
            if g.numel() != self.value(*v).numel() {
                return Err(Error::shape("backward seed", self.shape(*v), g.shape()));
            }
            let len = g.numel();
            accumulate(&mut grads, *v, len, |d| {
                d.iter_mut().zip(g.data()).for_each(|(a, &b)| *a += b)
            });
            top = top.max(v.0 + 1);
        }
        for i in (0..top).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backprop_node(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| match g {
                Some(g) if node.requires_grad => Tensor::new(node.value.shape(), g).ok(),
                _ => None,
            })
            .collect();
        self.nodes.clear();
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        let shp = |v: Var| self.nodes[v.0].value.shape();
        let len = |v: Var| self.nodes[v.0].value.numel();
        let live = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (m, k) = (shp(*x)[0], shp(*x)[1]);
                let n = shp(*w)[0];
                if live(*x) {
                    accumulate(grads, *x, m * k, |dx| {
                        matmul_into(m, n, k, gy, false, val(*w), false, dx, true)
                    });
                }
                if live(*w) {
                    accumulate(grads, *w, n * k, |dw| {
                        matmul_into(n, m, k, gy, true, val(*x), false, dw, true)
                    });
                }
                if let Some(b) = b.filter(|b| live(*b)) {
                    accumulate(grads, b, n, |db| {
                        for row in gy.chunks(n) {
                            db.iter_mut().zip(row).for_each(|(d, &g)| *d += g);
                        }
                    });
                }
            }
            Op::MatMul { a, b } => {
                let (m, k) = (shp(*a)[0], shp(*a)[1]);
                let n = shp(*b)[1];
                if live(*a) {
                    accumulate(grads, *a, m * k, |da| {
                        matmul_into(m, n, k, gy, false, val(*b), true, da, true)
                    });
                }
                if live(*b) {
                    accumulate(grads, *b, k * n, |db| {
                        matmul_into(k, m, n, val(*a), true, gy, false, db, true)
                    });
                }
            }
            Op::Binary { kind, a, b } => {
                let out_shape = node.value.shape();
                let (ad, bd) = (val(*a), val(*b));
                let same = shp(*a) == out_shape && shp(*b) == out_shape;
                let (ia, ib) = if same {
                    (Vec::new(), Vec::new())
                } else {
                    (broadcast_index(out_shape, shp(*a)), broadcast_index(out_shape, shp(*b)))
                };
                let at = |idx: &Vec<usize>, j: usize| if same { j } else { idx[j] };
                if live(*a) {
                    accumulate(grads, *a, len(*a), |da| {
                        for (j, &g) in gy.iter().enumerate() {
                            let (p, q) = (at(&ia, j), at(&ib, j));
                            da[p] += match kind {
                                Binary::Add | Binary::Sub => g,
                                Binary::Mul => g * bd[q],
                                Binary::Div => g / bd[q],
                            };
                        }
                    });
                }
                if live(*b) {
                    accumulate(grads, *b, len(*b), |db| {
                        for (j, &g) in gy.iter().enumerate() {
                            let (p, q) = (at(&ia, j), at(&ib, j));
                            db[q] += match kind {
                                Binary::Add => g,
                                Binary::Sub => -g,
                                Binary::Mul => g * ad[p],
                                Binary::Div => -g * ad[p] / (bd[q] * bd[q]),
                            };
                        }
                    });
                }
            }
            Op::Scale { a, c } => accumulate(grads, *a, len(*a), |d| {
                d.iter_mut().zip(gy).for_each(|(d, &g)| *d += g * *c)
            }),
            Op::AddScalar { a } => accumulate(grads, *a, len(*a), |d| {
                d.iter_mut().zip(gy).for_each(|(d, &g)| *d += g)
            }),
            Op::Relu { a } => {
                let y = node.value.data();
                accumulate(grads, *a, len(*a), |d| {
                    for ((d, &g), &y) in d.iter_mut().zip(gy).zip(y) {
                        if y > T::zero() {
                            *d += g;
                        }
                    }
                })
            }
            Op::LeakyRelu { a, alpha } => {
                let x = val(*a);
                accumulate(grads, *a, len(*a), |d| {
                    for ((d, &g), &x) in d.iter_mut().zip(gy).zip(x) {
                        *d += if x > T::zero() { g } else { g * *alpha };
                    }
                })
            }
            Op::Tanh { a } => {
                let y = node.value.data();
                accumulate(grads, *a, len(*a), |d| {
                    for ((d, &g), &y) in d.iter_mut().zip(gy).zip(y) {
                        *d += g * (T::one() - y * y);
                    }
                })
            }
            Op::Sigmoid { a } => {
                let y = node.value.data();
                accumulate(grads, *a, len(*a), |d| {
                    for ((d, &g), &y) in d.iter_mut().zip(gy).zip(y) {
                        *d += g * y * (T::one() - y);
                    }
                })
            }
            Op::Exp { a } => {
                let y = node.value.data();
                accumulate(grads, *a, len(*a), |d| {
                    for ((d, &g), &y) in d.iter_mut().zip(gy).zip(y) {
                        *d += g * y;
                    }
                })
            }
            Op::Log { a } => {
                let x = val(*a);
                accumulate(grads, *a, len(*a), |d| {
                    for ((d, &g), &x) in d.iter_mut().zip(gy).zip(x) {
                        *d += g / x;
                    }
                })
            }
            Op::Powf { a, p } => {
                let x = val(*a);
                let pm1 = *p - T::one();
                accumulate(grads, *a, len(*a), |d| {
                    for ((d, &g), &x) in d.iter_mut().zip(gy).zip(x) {
                        *d += g * *p * x.powf(pm1);
                    }
                })
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = *shp(*x).last().unwrap();
                let rows = rstd.len();
                if let Some(g) = gamma.filter(|g| live(*g)) {
                    accumulate(grads, g, n, |dg| {
                        for r in 0..rows {
                            for j in 0..n {
                                dg[j] += gy[r * n + j] * xhat[r * n + j];
                            }
                        }
                    });
                }
                if let Some(b) = beta.filter(|b| live(*b)) {
                    accumulate(grads, b, n, |db| {
                        for row in gy.chunks(n) {
                            db.iter_mut().zip(row).for_each(|(d, &g)| *d += g);
                        }
                    });
                }
                if live(*x) {
                    let gd = gamma.map(|g| val(g));
                    let nf = T::lit(n as f64);
                    accumulate(grads, *x, rows * n, |dx| {
                        let mut dxhat = vec![T::zero(); n];
                        for r in 0..rows {
                            let gr = &gy[r * n..(r + 1) * n];
                            let xr = &xhat[r * n..(r + 1) * n];
                            for j in 0..n {
                                dxhat[j] = gr[j] * gd.map_or(T::one(), |g| g[j]);
                            }
                            let m1 = dxhat.iter().copied().sum::<T>() / nf;
                            let m2 = dxhat.iter().zip(xr).map(|(&a, &b)| a * b).sum::<T>() / nf;
                            for j in 0..n {
                                dx[r * n + j] += rstd[r] * (dxhat[j] - m1 - xr[j] * m2);
                            }
                        }
                    });
                }
            }
            Op::Softmax { a, axis } => {
                let y = node.value.data();
                let (outer, alen, inner) = split_axis(node.value.shape(), *axis);
                accumulate(grads, *a, len(*a), |d| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * alen + j) * inner + i;
                            let dot: T = (0..alen).map(|j| gy[at(j)] * y[at(j)]).sum();
                            for j in 0..alen {
                                d[at(j)] += y[at(j)] * (gy[at(j)] - dot);
                            }
                        }
                    }
                })
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let k = shp(*logits)[1];
                let scale = gy[0] / T::lit(targets.len() as f64);
                accumulate(grads, *logits, probs.len(), |d| {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..k {
                            let ind = if j == t { T::one() } else { T::zero() };
                            d[r * k + j] += scale * (probs[r * k + j] - ind);
                        }
                    }
                })
            }
            Op::Sum { a } => accumulate(grads, *a, len(*a), |d| {
                d.iter_mut().for_each(|d| *d += gy[0])
            }),
            Op::SumAxes { a } => {
                let idx = broadcast_index(shp(*a), node.value.shape());
                accumulate(grads, *a, len(*a), |d| {
                    d.iter_mut().zip(&idx).for_each(|(d, &i)| *d += gy[i])
                })
            }
            Op::Reshape { a } => accumulate(grads, *a, len(*a), |d| {
                d.iter_mut().zip(gy).for_each(|(d, &g)| *d += g)
            }),
            Op::Slice { a, axis, start } => {
                let (outer, alen, inner) = split_axis(shp(*a), *axis);
                let slen = node.value.shape()[*axis];
                accumulate(grads, *a, len(*a), |d| {
                    for o in 0..outer {
                        let base = (o * alen + start) * inner;
                        let src = &gy[o * slen * inner..(o + 1) * slen * inner];
                        d[base..base + slen * inner]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, &g)| *d += g);
                    }
                })
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let plen = shp(p)[*axis];
                    if live(p) {
                        accumulate(grads, p, len(p), |d| {
                            for o in 0..outer {
                                let src = &gy[(o * total + offset) * inner..(o * total + offset + plen) * inner];
                                d[o * plen * inner..(o + 1) * plen * inner]
                                    .iter_mut()
                                    .zip(src)
                                    .for_each(|(d, &g)| *d += g);
                            }
                        });
                    }
                    offset += plen;
                }
            }
            Op::Conv2d { x, w, stride, pad } => {
                let xs = shp(*x);
                let ws = shp(*w);
                let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let (o, k) = (ws[0], ws[2]);
                let (ho, wo) = (node.value.shape()[2], node.value.shape()[3]);
                let p = ho * wo;
                let ckk = c * k * k;
                let xd = val(*x);
                let wdta = val(*w);
                let mut col = vec![T::zero(); ckk * p];
                let mut dw_acc = if live(*w) { vec![T::zero(); o * ckk] } else { Vec::new() };
                let mut dx_acc = if live(*x) { vec![T::zero(); xd.len()] } else { Vec::new() };
                for b in 0..n {
                    let gyb = &gy[b * o * p..(b + 1) * o * p];
                    if live(*w) {
                        im2col(&xd[b * c * h * wd..(b + 1) * c * h * wd], c, h, wd, k, *stride, *pad, ho, wo, &mut col);
                        matmul_into(o, p, ckk, gyb, false, &col, true, &mut dw_acc, true);
                    }
                    if live(*x) {
                        matmul_into(ckk, o, p, wdta, true, gyb, false, &mut col, false);
                        col2im(&col, c, h, wd, k, *stride, *pad, ho, wo, &mut dx_acc[b * c * h * wd..(b + 1) * c * h * wd]);
                    }
                }
                if live(*w) {
                    accumulate(grads, *w, o * ckk, |d| {
                        d.iter_mut().zip(&dw_acc).for_each(|(d, &g)| *d += g)
                    });
                }
                if live(*x) {
                    accumulate(grads, *x, xd.len(), |d| {
                        d.iter_mut().zip(&dx_acc).for_each(|(d, &g)| *d += g)
                    });
                }
            }
            Op::Upsample2x { a } => {
                let s = shp(*a);
                let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
                accumulate(grads, *a, len(*a), |d| {
                    for p in 0..nc {
                        for y in 0..2 * h {
                            for x in 0..2 * w {
                                d[(p * h + y / 2) * w + x / 2] += gy[(p * 2 * h + y) * 2 * w + x];
                            }
                        }
                    }
                })
            }
        }
    }
}
