use super::kernels::{self, gelu, gelu_grad};
use super::{shape_err, AutodiffError, Result, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    /// `b` broadcast over the leading axes of `a`
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    SumAll(Var),
    Relu(Var),
    Gelu(Var),
    Abs(Var),
    InvSqrtGuarded(Var, f64),
    LogSoftmax(Var),
    Softmax(Var),
    DepthwiseConv {
        x: Var,
        kernel: Var,
    },
    PointwiseConv {
        x: Var,
        weight: Var,
        bias: Option<Var>,
    },
    LayerNorm {
        x: Var,
        /// per-row `(mean, 1/sqrt(var + eps))`
        stats: Vec<(f64, f64)>,
    },
    /// multiply by a fixed mask (already carrying the 1/(1-p) scaling)
    Dropout(Var, Vec<f64>),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records primitive applications for reverse-mode differentiation.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    round_f32: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Grads {
    /// Gradient of the loss w.r.t. `v`; zeros when `v` does not reach the loss.
    pub fn get(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor { shape, data: g.clone() },
            None => Tensor::zeros(&shape),
        }
    }

    pub fn take(&mut self, v: Var) -> Vec<f64> {
        let n: usize = self.shapes[v.0].iter().product();
        self.grads[v.0].take().unwrap_or_else(|| vec![0.0; n])
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let buf = slot.get_or_insert_with(|| vec![0.0; len]);
    f(buf);
}

fn accumulate_owned(slot: &mut Option<Vec<f64>>, v: Vec<f64>) {
    match slot {
        Some(buf) => buf.iter_mut().zip(&v).for_each(|(a, y)| *a += y),
        None => *slot = Some(v),
    }
}

fn accumulate_slice(slot: &mut Option<Vec<f64>>, v: &[f64]) {
    match slot {
        Some(buf) => buf.iter_mut().zip(v).for_each(|(a, y)| *a += y),
        None => *slot = Some(v.to_vec()),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Round every recorded value to f32 precision (opt-in inference mode).
    pub fn with_f32_rounding() -> Self {
        Self {
            nodes: Vec::new(),
            round_f32: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    fn push(&mut self, mut value: Tensor, op: Op, needs_grad: bool) -> Var {
        if self.round_f32 {
            for v in &mut value.data {
                *v = *v as f32 as f64;
            }
        }
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", &[sa, sb]));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm_nn(&self.value(a).data, &self.value(b).data, &mut out, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            Op::MatMul(a, b),
            ng,
        ))
    }

    /// `(B, m, k) · (B, k, n) → (B, m, n)`, one product per leading index.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(shape_err("bmm", &[sa, sb]));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bs * m * n];
        let (av, bv) = (&self.value(a).data, &self.value(b).data);
        for i in 0..bs {
            kernels::gemm_nn(
                &av[i * m * k..(i + 1) * m * k],
                &bv[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(
            Tensor {
                shape: vec![bs, m, n],
                data: out,
            },
            Op::BatchMatMul(a, b),
            ng,
        ))
    }

    fn check_broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let nb: usize = sb.iter().product();
        let suffix = sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb;
        if suffix || nb == 1 {
            Ok(())
        } else {
            Err(shape_err(op, &[sa, sb]))
        }
    }

    /// `a + b`, with `b` broadcast when its shape is a suffix of `a`'s (or a scalar).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_broadcast("add", a, b)?;
        let bv = &self.value(b).data;
        let nb = bv.len();
        let data: Vec<f64> = self
            .value(a)
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv[i % nb])
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor { shape, data }, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    /// Elementwise `a ⊙ b` with the same broadcasting rule as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_broadcast("mul", a, b)?;
        let bv = &self.value(b).data;
        let nb = bv.len();
        let data: Vec<f64> = self
            .value(a)
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| x * bv[i % nb])
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor { shape, data }, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x);
        let t = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&e| e * c).collect(),
        };
        let ng = self.ng(x);
        self.push(t, Op::Scale(x, c), ng)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x);
        let t = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&e| e + c).collect(),
        };
        let ng = self.ng(x);
        self.push(t, Op::AddScalar(x), ng)
    }

    /// General axis permutation; output axis `d` is input axis `perm[d]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm
                .iter()
                .any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(shape_err("permute", &[&shape, perm]));
        }
        let mut data = vec![0.0; self.value(x).numel()];
        kernels::permute(&self.value(x).data, &shape, perm, &mut data);
        let out_shape = perm.iter().map(|&p| shape[p]).collect();
        let ng = self.ng(x);
        Ok(self.push(Tensor { shape: out_shape, data }, Op::Permute(x, perm.to_vec()), ng))
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let nd = self.shape(x).len();
        if nd < 2 {
            return Err(shape_err("transpose", &[self.shape(x)]));
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(nd - 2, nd - 1);
        self.permute(x, &perm)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).numel() {
            return Err(shape_err("reshape", &[self.shape(x), shape]));
        }
        let t = Tensor {
            shape: shape.to_vec(),
            data: self.value(x).data.clone(),
        };
        let ng = self.ng(x);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*xs.first().ok_or_else(|| shape_err("concat", &[]))?)
            .to_vec();
        if axis >= first.len() {
            return Err(shape_err("concat", &[&first, &[axis]]));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let same =
                s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !same {
                return Err(shape_err("concat", &[&first, s]));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let len = self.shape(x)[axis] * inner;
                data.extend_from_slice(&self.value(x).data[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let ng = xs.iter().any(|&x| self.ng(x));
        Ok(self.push(Tensor { shape, data }, Op::Concat(xs.to_vec(), axis), ng))
    }

    /// `x[.., start..start+len, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(shape_err("slice", &[&shape, &[axis, start, len]]));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = &self.value(x).data;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let ng = self.ng(x);
        Ok(self.push(Tensor { shape: out_shape, data }, Op::Slice { x, axis, start }, ng))
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(shape_err(if mean { "mean" } else { "sum" }, &[&shape, &[axis]]));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = &self.value(x).data;
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..n {
                let row = &src[(o * n + a) * inner..(o * n + a + 1) * inner];
                for (d, &v) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *d += v;
                }
            }
        }
        if mean {
            let s = 1.0 / n as f64;
            data.iter_mut().for_each(|v| *v *= s);
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let ng = self.ng(x);
        let op = if mean {
            Op::MeanAxis(x, axis)
        } else {
            Op::SumAxis(x, axis)
        };
        Ok(self.push(Tensor { shape: out_shape, data }, op, ng))
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, false)
    }

    /// Mean over `axis`, removing it.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, true)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data.iter().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), ng)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.value(x);
        let t = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&e| f(e)).collect(),
        };
        let ng = self.ng(x);
        self.push(t, op, ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, gelu, Op::Gelu(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, Op::Abs(x))
    }

    /// `x^(-1/2)` where `x > eps`, else 0 (guards isolated graph nodes).
    pub fn inv_sqrt_guarded(&mut self, x: Var, eps: f64) -> Var {
        self.unary(
            x,
            move |v| if v > eps { 1.0 / v.sqrt() } else { 0.0 },
            Op::InvSqrtGuarded(x, eps),
        )
    }

    fn row_op(&mut self, x: Var, log: bool) -> Var {
        let v = self.value(x);
        let n = *v.shape.last().expect("non-empty shape");
        let mut data = v.data.clone();
        for row in data.chunks_mut(n) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&e| (e - m).exp()).sum();
            if log {
                let lse = m + z.ln();
                row.iter_mut().for_each(|e| *e -= lse);
            } else {
                row.iter_mut().for_each(|e| *e = (*e - m).exp() / z);
            }
        }
        let t = Tensor {
            shape: v.shape.clone(),
            data,
        };
        let ng = self.ng(x);
        let op = if log { Op::LogSoftmax(x) } else { Op::Softmax(x) };
        self.push(t, op, ng)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        self.row_op(x, true)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        self.row_op(x, false)
    }

    /// Depthwise 1-D convolution (cross-correlation), stride 1, "same" zero
    /// padding. `x: (B, ch, L)`, `kernel: (ch, k)`.
    pub fn conv1d_depthwise(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(kernel).to_vec());
        if sx.len() != 3 || sk.len() != 2 || sk[0] != sx[1] || sk[1] == 0 {
            return Err(shape_err("conv1d_depthwise", &[&sx, &sk]));
        }
        let (b, ch, len, ks) = (sx[0], sx[1], sx[2], sk[1]);
        let pad = (ks - 1) / 2;
        let xv = &self.value(x).data;
        let kv = &self.value(kernel).data;
        let mut out = vec![0.0; b * ch * len];
        for bi in 0..b {
            for c in 0..ch {
                let xr = &xv[(bi * ch + c) * len..(bi * ch + c + 1) * len];
                let kr = &kv[c * ks..(c + 1) * ks];
                let or = &mut out[(bi * ch + c) * len..(bi * ch + c + 1) * len];
                for (j, &kj) in kr.iter().enumerate() {
                    // out[t] += k[j] * x[t + j - pad]
                    let lo = pad.saturating_sub(j);
                    let hi = (len + pad).saturating_sub(j).min(len);
                    for t in lo..hi {
                        or[t] += kj * xr[t + j - pad];
                    }
                }
            }
        }
        let ng = self.ng(x) || self.ng(kernel);
        Ok(self.push(Tensor { shape: sx, data: out }, Op::DepthwiseConv { x, kernel }, ng))
    }

    /// Pointwise (1×1) convolution: `x: (B, c_in, L)`, `weight: (c_out, c_in)`,
    /// optional `bias: (c_out)`.
    pub fn conv1d_pointwise(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(weight).to_vec());
        if sx.len() != 3 || sw.len() != 2 || sw[1] != sx[1] {
            return Err(shape_err("conv1d_pointwise", &[&sx, &sw]));
        }
        if let Some(bv) = bias {
            if self.shape(bv) != [sw[0]] {
                return Err(shape_err("conv1d_pointwise", &[&sw, self.shape(bv)]));
            }
        }
        let (b, cin, len, cout) = (sx[0], sx[1], sx[2], sw[0]);
        let mut out = vec![0.0; b * cout * len];
        let xv = &self.value(x).data;
        let wv = &self.value(weight).data;
        for bi in 0..b {
            kernels::gemm_nn(
                wv,
                &xv[bi * cin * len..(bi + 1) * cin * len],
                &mut out[bi * cout * len..(bi + 1) * cout * len],
                cout,
                cin,
                len,
            );
            if let Some(bv) = bias {
                let bd = &self.value(bv).data;
                for o in 0..cout {
                    for v in &mut out[(bi * cout + o) * len..(bi * cout + o + 1) * len] {
                        *v += bd[o];
                    }
                }
            }
        }
        let ng = self.ng(x) || self.ng(weight) || bias.is_some_and(|b| self.ng(b));
        Ok(self.push(
            Tensor {
                shape: vec![b, cout, len],
                data: out,
            },
            Op::PointwiseConv { x, weight, bias },
            ng,
        ))
    }

    /// Normalize each slice along the last axis to zero mean, unit variance.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let v = self.value(x);
        let n = *v.shape.last().expect("non-empty shape");
        let mut data = v.data.clone();
        let mut stats = Vec::with_capacity(data.len() / n.max(1));
        for row in data.chunks_mut(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / n as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|e| *e = (*e - mean) * rstd);
            stats.push((mean, rstd));
        }
        let t = Tensor {
            shape: v.shape.clone(),
            data,
        };
        let ng = self.ng(x);
        self.push(t, Op::LayerNorm { x, stats }, ng)
    }

    /// Multiply by a fixed mask; entries are `0` (dropped) or `1/(1-p)` (kept).
    pub fn dropout(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        if mask.len() != self.value(x).numel() {
            return Err(shape_err("dropout", &[self.shape(x), &[mask.len()]]));
        }
        let v = self.value(x);
        let t = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().zip(&mask).map(|(a, m)| a * m).collect(),
        };
        let ng = self.ng(x);
        Ok(self.push(t, Op::Dropout(x, mask), ng))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let shape = self.shape(loss);
        if shape.iter().product::<usize>() != 1 {
            return Err(AutodiffError::NonScalarLoss(shape.to_vec()));
        }
        let mut g: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        g[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(gout) = g[i].take() else { continue };
            self.vjp(&node.op, &node.value, &gout, &mut g);
            g[i] = Some(gout);
        }
        Ok(Grads {
            grads: g,
            shapes: self.nodes.iter().map(|n| n.value.shape.clone()).collect(),
        })
    }

    fn vjp(&self, op: &Op, out: &Tensor, gout: &[f64], g: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let want = |v: Var| self.nodes[v.0].needs_grad;
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).shape[0], val(*a).shape[1]);
                let n = val(*b).shape[1];
                if want(*a) {
                    accumulate(&mut g[a.0], m * k, |ga| {
                        kernels::gemm_nt(gout, &val(*b).data, ga, m, n, k)
                    });
                }
                if want(*b) {
                    accumulate(&mut g[b.0], k * n, |gb| {
                        kernels::gemm_tn(&val(*a).data, gout, gb, m, k, n)
                    });
                }
            }
            Op::BatchMatMul(a, b) => {
                let (bs, m, k) = (val(*a).shape[0], val(*a).shape[1], val(*a).shape[2]);
                let n = val(*b).shape[2];
                if want(*a) {
                    accumulate(&mut g[a.0], bs * m * k, |ga| {
                        for i in 0..bs {
                            kernels::gemm_nt(
                                &gout[i * m * n..(i + 1) * m * n],
                                &val(*b).data[i * k * n..(i + 1) * k * n],
                                &mut ga[i * m * k..(i + 1) * m * k],
                                m,
                                n,
                                k,
                            );
                        }
                    });
                }
                if want(*b) {
                    accumulate(&mut g[b.0], bs * k * n, |gb| {
                        for i in 0..bs {
                            kernels::gemm_tn(
                                &val(*a).data[i * m * k..(i + 1) * m * k],
                                &gout[i * m * n..(i + 1) * m * n],
                                &mut gb[i * k * n..(i + 1) * k * n],
                                m,
                                k,
                                n,
                            );
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                if want(*a) {
                    accumulate_slice(&mut g[a.0], gout);
                }
                if want(*b) {
                    let nb = val(*b).numel();
                    accumulate(&mut g[b.0], nb, |gb| {
                        for (i, &y) in gout.iter().enumerate() {
                            gb[i % nb] += y;
                        }
                    });
                }
            }
            Op::Mul(a, b) => {
                let av = &val(*a).data;
                let bv = &val(*b).data;
                let nb = bv.len();
                if want(*a) {
                    accumulate(&mut g[a.0], av.len(), |ga| {
                        for (i, &y) in gout.iter().enumerate() {
                            ga[i] += y * bv[i % nb];
                        }
                    });
                }
                if want(*b) {
                    accumulate(&mut g[b.0], nb, |gb| {
                        for (i, &y) in gout.iter().enumerate() {
                            gb[i % nb] += y * av[i];
                        }
                    });
                }
            }
            Op::Scale(x, c) => {
                accumulate(&mut g[x.0], gout.len(), |gx| {
                    gx.iter_mut().zip(gout).for_each(|(a, y)| *a += c * y)
                });
            }
            Op::AddScalar(x) | Op::Reshape(x) => accumulate_slice(&mut g[x.0], gout),
            Op::Permute(x, perm) => {
                let mut inv = vec![0; perm.len()];
                for (d, &p) in perm.iter().enumerate() {
                    inv[p] = d;
                }
                let mut back = vec![0.0; gout.len()];
                kernels::permute(gout, &out.shape, &inv, &mut back);
                accumulate_owned(&mut g[x.0], back);
            }
            Op::Concat(xs, axis) => {
                let (outer, total, inner) = split_axis(&out.shape, *axis);
                let mut offset = 0;
                for &x in xs {
                    let n = val(x).shape[*axis];
                    if want(x) {
                        accumulate(&mut g[x.0], outer * n * inner, |gx| {
                            for o in 0..outer {
                                let src = &gout[(o * total + offset) * inner..(o * total + offset + n) * inner];
                                for (a, y) in gx[o * n * inner..(o + 1) * n * inner].iter_mut().zip(src) {
                                    *a += y;
                                }
                            }
                        });
                    }
                    offset += n;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, n, inner) = split_axis(&val(*x).shape, *axis);
                let len = out.shape[*axis];
                accumulate(&mut g[x.0], outer * n * inner, |gx| {
                    for o in 0..outer {
                        let dst = &mut gx[(o * n + start) * inner..(o * n + start + len) * inner];
                        let src = &gout[o * len * inner..(o + 1) * len * inner];
                        dst.iter_mut().zip(src).for_each(|(a, y)| *a += y);
                    }
                });
            }
            Op::SumAxis(x, axis) | Op::MeanAxis(x, axis) => {
                let (outer, n, inner) = split_axis(&val(*x).shape, *axis);
                let s = if matches!(op, Op::MeanAxis(..)) {
                    1.0 / n as f64
                } else {
                    1.0
                };
                accumulate(&mut g[x.0], outer * n * inner, |gx| {
                    for o in 0..outer {
                        let src = &gout[o * inner..(o + 1) * inner];
                        for a in 0..n {
                            let dst = &mut gx[(o * n + a) * inner..(o * n + a + 1) * inner];
                            dst.iter_mut().zip(src).for_each(|(d, y)| *d += s * y);
                        }
                    }
                });
            }
            Op::SumAll(x) => {
                let n = val(*x).numel();
                accumulate(&mut g[x.0], n, |gx| gx.iter_mut().for_each(|a| *a += gout[0]));
            }
            Op::Relu(x) | Op::Gelu(x) | Op::Abs(x) | Op::InvSqrtGuarded(x, _) => {
                let xv = &val(*x).data;
                accumulate(&mut g[x.0], xv.len(), |gx| {
                    let it = gx.iter_mut().zip(gout).zip(xv);
                    match op {
                        Op::Relu(_) => it.for_each(|((a, y), &v)| {
                            if v > 0.0 {
                                *a += y
                            }
                        }),
                        Op::Gelu(_) => it.for_each(|((a, y), &v)| *a += y * gelu_grad(v)),
                        Op::Abs(_) => it.for_each(|((a, y), &v)| {
                            if v > 0.0 {
                                *a += y
                            } else if v < 0.0 {
                                *a -= y
                            }
                        }),
                        Op::InvSqrtGuarded(_, eps) => it.for_each(|((a, y), &v)| {
                            if v > *eps {
                                *a += y * -0.5 * v.powf(-1.5)
                            }
                        }),
                        _ => unreachable!(),
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let n = *out.shape.last().unwrap();
                accumulate(&mut g[x.0], gout.len(), |gx| {
                    for ((gr, yr), orow) in gx.chunks_mut(n).zip(gout.chunks(n)).zip(out.data.chunks(n)) {
                        let s: f64 = yr.iter().sum();
                        for j in 0..n {
                            gr[j] += yr[j] - orow[j].exp() * s;
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let n = *out.shape.last().unwrap();
                accumulate(&mut g[x.0], gout.len(), |gx| {
                    for ((gr, yr), orow) in gx.chunks_mut(n).zip(gout.chunks(n)).zip(out.data.chunks(n)) {
                        let dot: f64 = yr.iter().zip(orow).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            gr[j] += orow[j] * (yr[j] - dot);
                        }
                    }
                });
            }
            Op::DepthwiseConv { x, kernel } => {
                let s = &val(*x).shape;
                let (b, ch, len) = (s[0], s[1], s[2]);
                let ks = val(*kernel).shape[1];
                let pad = (ks - 1) / 2;
                let xv = &val(*x).data;
                let kv = &val(*kernel).data;
                if want(*x) {
                    accumulate(&mut g[x.0], xv.len(), |gx| {
                        for bi in 0..b {
                            for c in 0..ch {
                                let base = (bi * ch + c) * len;
                                for j in 0..ks {
                                    let kj = kv[c * ks + j];
                                    let lo = pad.saturating_sub(j);
                                    let hi = (len + pad).saturating_sub(j).min(len);
                                    for t in lo..hi {
                                        gx[base + t + j - pad] += kj * gout[base + t];
                                    }
                                }
                            }
                        }
                    });
                }
                if want(*kernel) {
                    accumulate(&mut g[kernel.0], kv.len(), |gk| {
                        for bi in 0..b {
                            for c in 0..ch {
                                let base = (bi * ch + c) * len;
                                for j in 0..ks {
                                    let lo = pad.saturating_sub(j);
                                    let hi = (len + pad).saturating_sub(j).min(len);
                                    let mut acc = 0.0;
                                    for t in lo..hi {
                                        acc += xv[base + t + j - pad] * gout[base + t];
                                    }
                                    gk[c * ks + j] += acc;
                                }
                            }
                        }
                    });
                }
            }
            Op::PointwiseConv { x, weight, bias } => {
                let s = &val(*x).shape;
                let (b, cin, len) = (s[0], s[1], s[2]);
                let cout = val(*weight).shape[0];
                let xv = &val(*x).data;
                let wv = &val(*weight).data;
                if want(*x) {
                    accumulate(&mut g[x.0], xv.len(), |gx| {
                        for bi in 0..b {
                            kernels::gemm_tn(
                                wv,
                                &gout[bi * cout * len..(bi + 1) * cout * len],
                                &mut gx[bi * cin * len..(bi + 1) * cin * len],
                                cout,
                                cin,
                                len,
                            );
                        }
                    });
                }
                if want(*weight) {
                    accumulate(&mut g[weight.0], wv.len(), |gw| {
                        for bi in 0..b {
                            kernels::gemm_nt(
                                &gout[bi * cout * len..(bi + 1) * cout * len],
                                &xv[bi * cin * len..(bi + 1) * cin * len],
                                gw,
                                cout,
                                len,
                                cin,
                            );
                        }
                    });
                }
                if let Some(bv) = bias.filter(|&bv| want(bv)) {
                    accumulate(&mut g[bv.0], cout, |gb| {
                        for bi in 0..b {
                            for o in 0..cout {
                                let base = (bi * cout + o) * len;
                                gb[o] += gout[base..base + len].iter().sum::<f64>();
                            }
                        }
                    });
                }
            }
            Op::LayerNorm { x, stats } => {
                let n = *out.shape.last().unwrap();
                accumulate(&mut g[x.0], gout.len(), |gx| {
                    for (r, ((gr, yr), xh)) in gx.chunks_mut(n).zip(gout.chunks(n)).zip(out.data.chunks(n)).enumerate()
                    {
                        let rstd = stats[r].1;
                        let mean_g = yr.iter().sum::<f64>() / n as f64;
                        let mean_gx = yr.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for j in 0..n {
                            gr[j] += rstd * (yr[j] - mean_g - xh[j] * mean_gx);
                        }
                    }
                });
            }
            Op::Dropout(x, mask) => {
                accumulate(&mut g[x.0], gout.len(), |gx| {
                    for i in 0..gx.len() {
                        gx[i] += gout[i] * mask[i];
                    }
                });
            }
        }
    }
}
