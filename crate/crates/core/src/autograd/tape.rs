use super::{conv_out, matmul, shape_err, AutogradError, Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        cols: Vec<Vec<T>>,
    },
    InstanceNorm {
        x: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Upsample2(Var),
    Relu(Var),
    LRelu(Var, T),
    Sigmoid(Var),
    Softplus(Var),
    Abs(Var),
    Log(Var),
    Exp(Var),
    Sqrt(Var),
    Dense {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Concat(Vec<Var>),
    Reshape(Var),
    Binary(BinKind, Var, Var),
    AddScalar(Var),
    MulScalar(Var, T),
    SumAxes(Var),
    PadReplicate(Var, usize),
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Eager computation record. Confined to one thread; build a fresh tape per
/// forward/backward pass.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

/// Gradients of a scalar loss w.r.t. every recorded value that needs one.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<[usize; 4]>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `v`; zeros if `v` does not influence the loss.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        let shape = self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor { shape, data: g.clone() },
            None => Tensor::zeros(shape),
        }
    }
}

/// Index map for broadcasting `src` (dims equal to `out` or 1) into `out`.
fn bcast_strides(src: [usize; 4], out: [usize; 4]) -> [usize; 4] {
    let mut s = [0; 4];
    let mut acc = 1;
    for d in (0..4).rev() {
        s[d] = if src[d] == 1 && out[d] != 1 { 0 } else { acc };
        acc *= src[d];
    }
    s
}

fn for_each_bcast(out: [usize; 4], sa: [usize; 4], sb: [usize; 4], mut f: impl FnMut(usize, usize, usize)) {
    let mut o = 0;
    for n in 0..out[0] {
        for c in 0..out[1] {
            for h in 0..out[2] {
                let ia0 = n * sa[0] + c * sa[1] + h * sa[2];
                let ib0 = n * sb[0] + c * sb[1] + h * sb[2];
                for w in 0..out[3] {
                    f(o, ia0 + w * sa[3], ib0 + w * sb[3]);
                    o += 1;
                }
            }
        }
    }
}

fn im2col<T: Scalar>(
    x: &[T],
    (ci, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    pad: usize,
    (oh, ow): (usize, usize),
) -> Vec<T> {
    let p = oh * ow;
    let mut cols = vec![T::zero(); ci * kh * kw * p];
    for c in 0..ci {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((c * kh + ki) * kw + kj) * p;
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = (c * h + iy as usize) * w;
                    let dst = row + oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            cols[dst + ox] = x[src + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(
    cols: &[T],
    dx: &mut [T],
    (ci, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    pad: usize,
    (oh, ow): (usize, usize),
) {
    let p = oh * ow;
    for c in 0..ci {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((c * kh + ki) * kw + kj) * p;
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = (c * h + iy as usize) * w;
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dx[dst + ix as usize] += cols[row + oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Logistic function kept strictly inside `(0, 1)` even where it would
/// round to an endpoint.
fn sigmoid<T: Scalar>(x: T) -> T {
    let y = if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    };
    let eps = T::epsilon();
    y.max(eps).min(T::one() - eps)
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 4] {
        self.nodes[v.0].value.shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, label: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var, AutogradError> {
        if !value.is_finite() {
            return Err(AutogradError::NonFinite { op: label });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Cross-correlation with zero padding. `w` is `[co, ci, kh, kw]`, `b`
    /// is `[1, co, 1, 1]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var, AutogradError> {
        let [n, ci, h, wd] = self.shape(x);
        let [co, wci, kh, kw] = self.shape(w);
        if wci != ci {
            return Err(shape_err(
                "conv2d",
                format!("input has {ci} channels, weight expects {wci}"),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [1, co, 1, 1] {
                return Err(shape_err("conv2d", format!("bias shape {:?}", self.shape(b))));
            }
        }
        let (oh, ow) = match (conv_out(h, kh, stride, pad), conv_out(wd, kw, stride, pad)) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(shape_err(
                    "conv2d",
                    format!("kernel {kh}x{kw} does not fit {h}x{wd} (pad {pad})"),
                ))
            }
        };
        let p = oh * ow;
        let kk = ci * kh * kw;
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let mut out = vec![T::zero(); n * co * p];
        let mut saved = Vec::with_capacity(n);
        for s in 0..n {
            let xs = &xv.data[s * ci * h * wd..(s + 1) * ci * h * wd];
            let cols = im2col(xs, (ci, h, wd), (kh, kw), stride, pad, (oh, ow));
            let ys = &mut out[s * co * p..(s + 1) * co * p];
            matmul(co, kk, p, &wv.data, false, &cols, false, T::zero(), ys);
            if let Some(b) = b {
                let bv = &self.nodes[b.0].value.data;
                for (o, chunk) in ys.chunks_mut(p).enumerate() {
                    for y in chunk {
                        *y += bv[o];
                    }
                }
            }
            saved.push(cols);
        }
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(
            "conv2d",
            Tensor {
                shape: [n, co, oh, ow],
                data: out,
            },
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols: saved,
            },
            &inputs,
        )
    }

    /// Per-sample, per-channel normalization over the spatial dims.
    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Result<Var, AutogradError> {
        let xv = &self.nodes[x.0].value;
        let plane = xv.plane();
        let m = T::lit(plane as f64);
        let eps = T::lit(eps);
        let mut xhat = vec![T::zero(); xv.numel()];
        let mut inv_std = Vec::with_capacity(xv.shape[0] * xv.shape[1]);
        for (src, dst) in xv.data.chunks(plane).zip(xhat.chunks_mut(plane)) {
            let mean = src.iter().copied().sum::<T>() / m;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / m;
            let is = T::one() / (var + eps).sqrt();
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = (s - mean) * is;
            }
            inv_std.push(is);
        }
        let shape = xv.shape;
        self.push(
            "instance_norm",
            Tensor {
                shape,
                data: xhat.clone(),
            },
            Op::InstanceNorm { x, xhat, inv_std },
            &[x],
        )
    }

    pub fn upsample2(&mut self, x: Var) -> Result<Var, AutogradError> {
        let xv = &self.nodes[x.0].value;
        let [n, c, h, w] = xv.shape;
        let mut out = Vec::with_capacity(n * c * h * w * 4);
        for plane in xv.data.chunks(h * w) {
            for row in plane.chunks(w) {
                for _ in 0..2 {
                    for &v in row {
                        out.push(v);
                        out.push(v);
                    }
                }
            }
        }
        self.push(
            "upsample2",
            Tensor {
                shape: [n, c, 2 * h, 2 * w],
                data: out,
            },
            Op::Upsample2(x),
            &[x],
        )
    }

    fn unary(&mut self, label: &'static str, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var, AutogradError> {
        let xv = &self.nodes[x.0].value;
        let t = Tensor {
            shape: xv.shape,
            data: xv.data.iter().map(|&v| f(v)).collect(),
        };
        self.push(label, t, op, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, AutogradError> {
        self.unary("relu", x, |v| v.max(T::zero()), Op::Relu(x))
    }

    pub fn lrelu(&mut self, x: Var, slope: f64) -> Result<Var, AutogradError> {
        let s = T::lit(slope);
        self.unary(
            "lrelu",
            x,
            move |v| if v > T::zero() { v } else { v * s },
            Op::LRelu(x, s),
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, AutogradError> {
        self.unary("sigmoid", x, sigmoid, Op::Sigmoid(x))
    }

    /// `log(1 + exp(x))`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Result<Var, AutogradError> {
        self.unary(
            "softplus",
            x,
            |v| v.max(T::zero()) + (-v.abs()).exp().ln_1p(),
            Op::Softplus(x),
        )
    }

    pub fn abs(&mut self, x: Var) -> Result<Var, AutogradError> {
        self.unary("abs", x, |v| v.abs(), Op::Abs(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var, AutogradError> {
        self.unary("log", x, |v| v.ln(), Op::Log(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, AutogradError> {
        self.unary("exp", x, |v| v.exp(), Op::Exp(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var, AutogradError> {
        self.unary("sqrt", x, |v| v.sqrt(), Op::Sqrt(x))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var, AutogradError> {
        let s = T::lit(s);
        self.unary("add_scalar", x, move |v| v + s, Op::AddScalar(x))
    }

    pub fn mul_scalar(&mut self, x: Var, s: f64) -> Result<Var, AutogradError> {
        let s = T::lit(s);
        self.unary("mul_scalar", x, move |v| v * s, Op::MulScalar(x, s))
    }

    /// Fully connected layer over the flattened per-sample features.
    /// `w` is `[out, in, 1, 1]`, `b` is `[1, out, 1, 1]`; output `[n, out, 1, 1]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, AutogradError> {
        let xs = self.shape(x);
        let [fo, fi, wh, ww] = self.shape(w);
        let n = xs[0];
        if wh != 1 || ww != 1 || xs[1] * xs[2] * xs[3] != fi {
            return Err(shape_err(
                "dense",
                format!("input {xs:?} vs weight {:?}", self.shape(w)),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [1, fo, 1, 1] {
                return Err(shape_err("dense", format!("bias shape {:?}", self.shape(b))));
            }
        }
        let mut out = vec![T::zero(); n * fo];
        matmul(
            n,
            fi,
            fo,
            &self.nodes[x.0].value.data,
            false,
            &self.nodes[w.0].value.data,
            true,
            T::zero(),
            &mut out,
        );
        if let Some(b) = b {
            let bv = &self.nodes[b.0].value.data;
            for row in out.chunks_mut(fo) {
                for (y, &bb) in row.iter_mut().zip(bv) {
                    *y += bb;
                }
            }
        }
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(
            "dense",
            Tensor {
                shape: [n, fo, 1, 1],
                data: out,
            },
            Op::Dense { x, w, b },
            &inputs,
        )
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var, AutogradError> {
        let first = xs.first().ok_or_else(|| shape_err("concat", "empty list"))?;
        let [n, _, h, w] = self.shape(*first);
        let mut c_total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s[0] != n || s[2] != h || s[3] != w {
                return Err(shape_err("concat", format!("{s:?} vs {:?}", self.shape(*first))));
            }
            c_total += s[1];
        }
        let mut out = Vec::with_capacity(n * c_total * h * w);
        for s in 0..n {
            for &v in xs {
                let t = &self.nodes[v.0].value;
                let ps = t.per_sample();
                out.extend_from_slice(&t.data[s * ps..(s + 1) * ps]);
            }
        }
        self.push(
            "concat",
            Tensor {
                shape: [n, c_total, h, w],
                data: out,
            },
            Op::Concat(xs.to_vec()),
            xs,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: [usize; 4]) -> Result<Var, AutogradError> {
        let t = &self.nodes[x.0].value;
        if shape.iter().product::<usize>() != t.numel() {
            return Err(shape_err("reshape", format!("{:?} -> {shape:?}", t.shape)));
        }
        let data = t.data.clone();
        self.push("reshape", Tensor { shape, data }, Op::Reshape(x), &[x])
    }

    fn binary(&mut self, kind: BinKind, label: &'static str, a: Var, b: Var) -> Result<Var, AutogradError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let mut out = [0; 4];
        for d in 0..4 {
            out[d] = if sa[d] == sb[d] || sb[d] == 1 {
                sa[d]
            } else if sa[d] == 1 {
                sb[d]
            } else {
                return Err(shape_err(label, format!("{sa:?} vs {sb:?}")));
            };
        }
        let f = |x: T, y: T| match kind {
            BinKind::Add => x + y,
            BinKind::Sub => x - y,
            BinKind::Mul => x * y,
            BinKind::Div => x / y,
        };
        let (av, bv) = (&self.nodes[a.0].value.data, &self.nodes[b.0].value.data);
        let data: Vec<T> = if sa == sb {
            av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let mut d = vec![T::zero(); out.iter().product()];
            for_each_bcast(out, bcast_strides(sa, out), bcast_strides(sb, out), |o, ia, ib| {
                d[o] = f(av[ia], bv[ib])
            });
            d
        };
        self.push(label, Tensor { shape: out, data }, Op::Binary(kind, a, b), &[a, b])
    }

    /// Elementwise ops broadcast any size-1 dim against the other operand.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutogradError> {
        self.binary(BinKind::Add, "add", a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutogradError> {
        self.binary(BinKind::Sub, "sub", a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutogradError> {
        self.binary(BinKind::Mul, "mul", a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, AutogradError> {
        self.binary(BinKind::Div, "div", a, b)
    }

    /// Sums over the axes flagged in `axes`, keeping them as size 1.
    pub fn sum_axes(&mut self, x: Var, axes: [bool; 4]) -> Result<Var, AutogradError> {
        let s = self.shape(x);
        let mut out = s;
        for d in 0..4 {
            if axes[d] {
                out[d] = 1;
            }
        }
        let mut data = vec![T::zero(); out.iter().product()];
        let xv = &self.nodes[x.0].value.data;
        let st = bcast_strides(out, s);
        for_each_bcast(s, st, st, |o, i, _| data[i] += xv[o]);
        self.push("sum", Tensor { shape: out, data }, Op::SumAxes(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, AutogradError> {
        self.sum_axes(x, [true; 4])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, AutogradError> {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x)?;
        self.mul_scalar(s, 1.0 / n)
    }

    /// Mean over the flagged axes.
    pub fn mean_axes(&mut self, x: Var, axes: [bool; 4]) -> Result<Var, AutogradError> {
        let s = self.shape(x);
        let count: usize = (0..4).filter(|&d| axes[d]).map(|d| s[d]).product();
        let t = self.sum_axes(x, axes)?;
        self.mul_scalar(t, 1.0 / count as f64)
    }

    /// Pads the spatial dims by `p` cells replicating the border.
    pub fn pad_replicate(&mut self, x: Var, p: usize) -> Result<Var, AutogradError> {
        let [n, c, h, w] = self.shape(x);
        let (oh, ow) = (h + 2 * p, w + 2 * p);
        let xv = &self.nodes[x.0].value.data;
        let mut out = Vec::with_capacity(n * c * oh * ow);
        for plane in xv.chunks(h * w) {
            for y in 0..oh {
                let sy = y.saturating_sub(p).min(h - 1);
                for xx in 0..ow {
                    let sx = xx.saturating_sub(p).min(w - 1);
                    out.push(plane[sy * w + sx]);
                }
            }
        }
        self.push(
            "pad_replicate",
            Tensor {
                shape: [n, c, oh, ow],
                data: out,
            },
            Op::PadReplicate(x, p),
            &[x],
        )
    }

    /// Gradients of the scalar `loss`. A tape supports one backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>, AutogradError> {
        if self.consumed {
            return Err(AutogradError::AlreadyBackward);
        }
        let ls = self.shape(loss);
        if ls != [1, 1, 1, 1] {
            return Err(AutogradError::NotScalar(ls));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(AutogradError::Detached);
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape).collect(),
        })
    }

    fn backprop(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        let wants = |v: Var| nodes[v.0].requires_grad;
        // zero-initialized accumulator for input `v`
        fn acc<'a, T: Scalar>(grads: &'a mut [Option<Vec<T>>], v: Var, len: usize) -> &'a mut Vec<T> {
            grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
        }
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            } => {
                let [n, ci, h, wd] = val(*x).shape;
                let [co, _, kh, kw] = val(*w).shape;
                let (oh, ow) = (out.shape[2], out.shape[3]);
                let p = oh * ow;
                let kk = ci * kh * kw;
                if let Some(b) = b {
                    if wants(*b) {
                        let gb = acc(grads, *b, co);
                        for s in 0..n {
                            for o in 0..co {
                                let base = (s * co + o) * p;
                                gb[o] += g[base..base + p].iter().copied().sum::<T>();
                            }
                        }
                    }
                }
                if wants(*w) {
                    let gw = acc(grads, *w, co * kk);
                    for s in 0..n {
                        matmul(
                            co,
                            p,
                            kk,
                            &g[s * co * p..(s + 1) * co * p],
                            false,
                            &cols[s],
                            true,
                            T::one(),
                            gw,
                        );
                    }
                }
                if wants(*x) {
                    let wv = &val(*w).data;
                    let mut dcols = vec![T::zero(); kk * p];
                    let gx = acc(grads, *x, n * ci * h * wd);
                    for s in 0..n {
                        matmul(
                            kk,
                            co,
                            p,
                            wv,
                            true,
                            &g[s * co * p..(s + 1) * co * p],
                            false,
                            T::zero(),
                            &mut dcols,
                        );
                        col2im(
                            &dcols,
                            &mut gx[s * ci * h * wd..(s + 1) * ci * h * wd],
                            (ci, h, wd),
                            (kh, kw),
                            *stride,
                            *pad,
                            (oh, ow),
                        );
                    }
                }
            }
            Op::InstanceNorm { x, xhat, inv_std } => {
                let plane = out.plane();
                let m = T::lit(plane as f64);
                let gx = acc(grads, *x, out.numel());
                for (k, &is) in inv_std.iter().enumerate() {
                    let r = k * plane..(k + 1) * plane;
                    let (gs, xs) = (&g[r.clone()], &xhat[r.clone()]);
                    let mg = gs.iter().copied().sum::<T>() / m;
                    let mgx = gs.iter().zip(xs).map(|(&a, &b)| a * b).sum::<T>() / m;
                    for ((d, &gg), &xh) in gx[r].iter_mut().zip(gs).zip(xs) {
                        *d += is * (gg - mg - xh * mgx);
                    }
                }
            }
            Op::Upsample2(x) => {
                let [n, c, h, w] = val(*x).shape;
                let gx = acc(grads, *x, n * c * h * w);
                let ow = 2 * w;
                for pl in 0..n * c {
                    let gp = &g[pl * 4 * h * w..(pl + 1) * 4 * h * w];
                    for y in 0..h {
                        for xx in 0..w {
                            let o = 2 * y * ow + 2 * xx;
                            gx[pl * h * w + y * w + xx] += gp[o] + gp[o + 1] + gp[o + ow] + gp[o + ow + 1];
                        }
                    }
                }
            }
            Op::Relu(x) => {
                let xv = &val(*x).data;
                let gx = acc(grads, *x, xv.len());
                for k in 0..xv.len() {
                    if xv[k] > T::zero() {
                        gx[k] += g[k];
                    }
                }
            }
            Op::LRelu(x, s) => {
                let xv = &val(*x).data;
                let gx = acc(grads, *x, xv.len());
                for k in 0..xv.len() {
                    gx[k] += if xv[k] > T::zero() { g[k] } else { g[k] * *s };
                }
            }
            Op::Sigmoid(x) => {
                let gx = acc(grads, *x, g.len());
                let eps = T::epsilon();
                for k in 0..g.len() {
                    let y = out.data[k];
                    // flat where the output is pinned to the clamp
                    if y > eps && y < T::one() - eps {
                        gx[k] += g[k] * y * (T::one() - y);
                    }
                }
            }
            Op::Softplus(x) => {
                let xv = &val(*x).data;
                let gx = acc(grads, *x, g.len());
                for k in 0..g.len() {
                    gx[k] += g[k] * sigmoid(xv[k]);
                }
            }
            Op::Abs(x) => {
                let xv = &val(*x).data;
                let gx = acc(grads, *x, g.len());
                for k in 0..g.len() {
                    if xv[k] > T::zero() {
                        gx[k] += g[k];
                    } else if xv[k] < T::zero() {
                        gx[k] -= g[k];
                    }
                }
            }
            Op::Log(x) => {
                let xv = &val(*x).data;
                let gx = acc(grads, *x, g.len());
                for k in 0..g.len() {
                    gx[k] += g[k] / xv[k];
                }
            }
            Op::Exp(x) => {
                let gx = acc(grads, *x, g.len());
                for k in 0..g.len() {
                    gx[k] += g[k] * out.data[k];
                }
            }
            Op::Sqrt(x) => {
                let gx = acc(grads, *x, g.len());
                let two = T::lit(2.0);
                for k in 0..g.len() {
                    gx[k] += g[k] / (two * out.data[k]);
                }
            }
            Op::AddScalar(x) => {
                let gx = acc(grads, *x, g.len());
                for k in 0..g.len() {
                    gx[k] += g[k];
                }
            }
            Op::MulScalar(x, s) => {
                let gx = acc(grads, *x, g.len());
                for k in 0..g.len() {
                    gx[k] += g[k] * *s;
                }
            }
            Op::Reshape(x) => {
                let gx = acc(grads, *x, g.len());
                for k in 0..g.len() {
                    gx[k] += g[k];
                }
            }
            Op::Dense { x, w, b } => {
                let n = out.shape[0];
                let fo = out.shape[1];
                let fi = val(*w).shape[1];
                if let Some(b) = b {
                    if wants(*b) {
                        let gb = acc(grads, *b, fo);
                        for row in g.chunks(fo) {
                            for (d, &v) in gb.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                    }
                }
                if wants(*w) {
                    let gw = acc(grads, *w, fo * fi);
                    matmul(fo, n, fi, g, true, &val(*x).data, false, T::one(), gw);
                }
                if wants(*x) {
                    let gx = acc(grads, *x, n * fi);
                    matmul(n, fo, fi, g, false, &val(*w).data, false, T::one(), gx);
                }
            }
            Op::Concat(xs) => {
                let n = out.shape[0];
                let ps_out = out.per_sample();
                let mut off = 0;
                for &v in xs {
                    let ps = val(v).per_sample();
                    if wants(v) {
                        let gx = acc(grads, v, n * ps);
                        for s in 0..n {
                            let src = &g[s * ps_out + off..s * ps_out + off + ps];
                            for (d, &e) in gx[s * ps..(s + 1) * ps].iter_mut().zip(src) {
                                *d += e;
                            }
                        }
                    }
                    off += ps;
                }
            }
            Op::Binary(kind, a, b) => {
                let (sa, sb) = (val(*a).shape, val(*b).shape);
                let (av, bv) = (&val(*a).data, &val(*b).data);
                let (wa, wb) = (wants(*a), wants(*b));
                let st_a = bcast_strides(sa, out.shape);
                let st_b = bcast_strides(sb, out.shape);
                let mut ga = wa.then(|| vec![T::zero(); av.len()]);
                let mut gb = wb.then(|| vec![T::zero(); bv.len()]);
                for_each_bcast(out.shape, st_a, st_b, |o, ia, ib| {
                    let go = g[o];
                    let (da, db) = match kind {
                        BinKind::Add => (go, go),
                        BinKind::Sub => (go, -go),
                        BinKind::Mul => (go * bv[ib], go * av[ia]),
                        BinKind::Div => (go / bv[ib], -go * av[ia] / (bv[ib] * bv[ib])),
                    };
                    if let Some(ga) = ga.as_mut() {
                        ga[ia] += da;
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[ib] += db;
                    }
                });
                for (v, gv) in [(*a, ga), (*b, gb)] {
                    if let Some(gv) = gv {
                        let dst = acc(grads, v, gv.len());
                        for (d, e) in dst.iter_mut().zip(gv) {
                            *d += e;
                        }
                    }
                }
            }
            Op::SumAxes(x) => {
                let s = val(*x).shape;
                let st = bcast_strides(out.shape, s);
                let gx = acc(grads, *x, val(*x).numel());
                for_each_bcast(s, st, st, |o, i, _| gx[o] += g[i]);
            }
            Op::PadReplicate(x, p) => {
                let [n, c, h, w] = val(*x).shape;
                let (oh, ow) = (h + 2 * p, w + 2 * p);
                let gx = acc(grads, *x, n * c * h * w);
                for pl in 0..n * c {
                    for y in 0..oh {
                        let sy = y.saturating_sub(*p).min(h - 1);
                        for xx in 0..ow {
                            let sx = xx.saturating_sub(*p).min(w - 1);
                            gx[pl * h * w + sy * w + sx] += g[pl * oh * ow + y * ow + xx];
                        }
                    }
                }
            }
        }
    }
}
