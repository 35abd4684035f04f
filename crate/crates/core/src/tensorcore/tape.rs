use super::{Tensor, NORM_EPS};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulScalarVar { s: Var, x: Var },
    AddBias { x: Var, b: Var },
    Sigmoid(Var),
    Relu(Var),
    Log(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    SoftmaxRows(Var),
    L2Normalize(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Conv { x: Var, w: Var, h: usize, wd: usize, cin: usize, cout: usize, k: usize },
    AvgPool { x: Var, h: usize, wd: usize, c: usize, f: usize },
    Upsample { x: Var, h: usize, wd: usize, c: usize, f: usize },
    ConcatLast { a: Var, b: Var, na: usize, nb: usize },
}

#[derive(Clone, Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    // Only populated for leaves, and only by `backward`.
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Ordered record of executed operations.
///
/// A tape is single-threaded; values live in the tape and are addressed by
/// [`Var`]. `backward` leaves the record intact, so calling it twice
/// accumulates leaf gradients twice.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn rows_cols(shape: &[usize], op: &'static str) -> Result<(usize, usize)> {
    match shape {
        [m, n] => Ok((*m, *n)),
        _ => Err(Error::shape(op, format!("expected 2-D tensor, got {shape:?}"))),
    }
}

fn hwc(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    match shape {
        [h, w, c] => Ok((*h, *w, *c)),
        _ => Err(Error::shape(op, format!("expected [H, W, C], got {shape:?}"))),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Euclidean normalization of a plain slice; the zero vector maps to zero.
pub fn l2_normalize_slice(v: &[f64]) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm <= NORM_EPS {
        vec![0.0; v.len()]
    } else {
        v.iter().map(|x| x / norm).collect()
    }
}

fn acc<'a>(grads: &'a mut [Option<Vec<f64>>], v: Var, len: usize) -> &'a mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    /// First element of `v`; convenient for scalar losses.
    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Accumulated gradient of a leaf after `backward`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.node(v).grad.as_deref()
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor {
            shape: n.shape.clone(),
            data: n.value.clone(),
            requires_grad: n.requires_grad,
            grad: n.grad.clone(),
        }
    }

    /// Resets every leaf gradient to zero while keeping the record.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            if let Some(g) = n.grad.as_mut() {
                g.fill(0.0);
            }
        }
    }

    /// Drops the whole record.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    fn push(&mut self, op_name: &'static str, shape: Vec<usize>, value: Vec<f64>, rg: bool, op: Op) -> Result<Var> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        if value.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(op_name));
        }
        self.nodes.push(Node {
            shape,
            value,
            requires_grad: rg,
            grad: None,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.nodes.push(Node {
            shape: t.shape.clone(),
            value: t.data.clone(),
            requires_grad: t.requires_grad,
            grad: None,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    fn rg1(&self, a: Var) -> bool {
        self.node(a).requires_grad
    }

    fn rg2(&self, a: Var, b: Var) -> bool {
        self.node(a).requires_grad || self.node(b).requires_grad
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = rows_cols(self.shape(a), "matmul")?;
        let (k2, n) = rows_cols(self.shape(b), "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("inner dims {k} vs {k2}")));
        }
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for l in 0..k {
                let x = av[i * k + l];
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[l * n..(l + 1) * n];
                for (o, y) in row.iter_mut().zip(brow) {
                    *o += x * y;
                }
            }
        }
        let rg = self.rg2(a, b);
        self.push("matmul", vec![m, n], out, rg, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = rows_cols(self.shape(a), "transpose")?;
        let av = self.value(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av[i * n + j];
            }
        }
        let rg = self.rg1(a);
        self.push("transpose", vec![n, m], out, rg, Op::Transpose(a))
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        let rg = self.rg2(a, b);
        let shape = self.shape(a).to_vec();
        self.push(name, shape, out, rg, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(b).iter().any(|&y| y == 0.0) {
            return Err(Error::Domain {
                op: "div",
                detail: "division by zero".into(),
            });
        }
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let rg = self.rg1(a);
        let shape = self.shape(a).to_vec();
        self.push(name, shape, out, rg, op)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("scale", a, |x| c * x, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("add_scalar", a, |x| x + c, Op::AddScalar(a))
    }

    /// `s * x` where `s` holds a single value.
    pub fn mul_scalar_var(&mut self, s: Var, x: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::shape("mul_scalar_var", "scale operand must hold one value"));
        }
        let k = self.value(s)[0];
        let out = self.value(x).iter().map(|v| k * v).collect();
        let rg = self.rg2(s, x);
        let shape = self.shape(x).to_vec();
        self.push("mul_scalar_var", shape, out, rg, Op::MulScalarVar { s, x })
    }

    /// Adds a length-`n` bias to every row of a tensor whose last dim is `n`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap_or(&0);
        if self.value(b).len() != n || n == 0 {
            return Err(Error::shape(
                "add_bias",
                format!("bias len {} vs last dim {n}", self.value(b).len()),
            ));
        }
        let bv = self.value(b);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(n) {
            for (o, y) in row.iter_mut().zip(bv) {
                *o += y;
            }
        }
        let rg = self.rg2(x, b);
        let shape = self.shape(x).to_vec();
        self.push("add_bias", shape, out, rg, Op::AddBias { x, b })
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(x) = self.value(a).iter().find(|&&x| x <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {x}"),
            });
        }
        self.unary("log", a, f64::ln, Op::Log(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(Error::Contract(format!("clamp bounds {lo} > {hi}")));
        }
        self.unary("clamp", a, |x| x.clamp(lo, hi), Op::Clamp { x: a, lo, hi })
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (_, n) = rows_cols(self.shape(a), "softmax_rows")?;
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(n.max(1)) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for x in row.iter_mut() {
                *x = (*x - mx).exp();
                z += *x;
            }
            for x in row.iter_mut() {
                *x /= z;
            }
        }
        let rg = self.rg1(a);
        let shape = self.shape(a).to_vec();
        self.push("softmax_rows", shape, out, rg, Op::SoftmaxRows(a))
    }

    /// Normalizes the whole tensor as one vector.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let out = l2_normalize_slice(self.value(a));
        let rg = self.rg1(a);
        let shape = self.shape(a).to_vec();
        self.push("l2_normalize", shape, out, rg, Op::L2Normalize(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().sum();
        let rg = self.rg1(a);
        self.push("sum", vec![1], vec![s], rg, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.is_empty() {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg1(a);
        self.push("mean", vec![1], vec![m], rg, Op::Mean(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(a).len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape(a)),
            ));
        }
        let out = self.value(a).to_vec();
        let rg = self.rg1(a);
        self.push("reshape", shape.to_vec(), out, rg, Op::Reshape(a))
    }

    /// Same-padded convolution with an odd square kernel.
    ///
    /// `x` is `[H, W, Cin]`, `w` is `[k*k*Cin, Cout]` with rows ordered by
    /// (ky, kx, cin). No bias; follow with [`Tape::add_bias`].
    pub fn conv2d(&mut self, x: Var, w: Var, k: usize) -> Result<Var> {
        let (h, wd, cin) = hwc(self.shape(x), "conv2d")?;
        let (rows, cout) = rows_cols(self.shape(w), "conv2d")?;
        if k % 2 == 0 || rows != k * k * cin {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {k} with cin {cin} needs {} weight rows, got {rows}", k * k * cin),
            ));
        }
        let xv = self.value(x);
        let wv = self.value(w);
        let r = (k / 2) as isize;
        let mut out = vec![0.0; h * wd * cout];
        for y in 0..h {
            for xx in 0..wd {
                let o = &mut out[(y * wd + xx) * cout..(y * wd + xx + 1) * cout];
                for ky in 0..k {
                    let yy = y as isize + ky as isize - r;
                    if yy < 0 || yy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let xs = xx as isize + kx as isize - r;
                        if xs < 0 || xs >= wd as isize {
                            continue;
                        }
                        let base = (yy as usize * wd + xs as usize) * cin;
                        let wbase = (ky * k + kx) * cin;
                        for ci in 0..cin {
                            let a = xv[base + ci];
                            if a == 0.0 {
                                continue;
                            }
                            let wr = &wv[(wbase + ci) * cout..(wbase + ci + 1) * cout];
                            for (oo, ww) in o.iter_mut().zip(wr) {
                                *oo += a * ww;
                            }
                        }
                    }
                }
            }
        }
        let rg = self.rg2(x, w);
        self.push(
            "conv2d",
            vec![h, wd, cout],
            out,
            rg,
            Op::Conv { x, w, h, wd, cin, cout, k },
        )
    }

    pub fn avg_pool(&mut self, x: Var, f: usize) -> Result<Var> {
        let (h, wd, c) = hwc(self.shape(x), "avg_pool")?;
        if f == 0 || h % f != 0 || wd % f != 0 {
            return Err(Error::shape("avg_pool", format!("{h}x{wd} not divisible by {f}")));
        }
        let (oh, ow) = (h / f, wd / f);
        let xv = self.value(x);
        let inv = 1.0 / (f * f) as f64;
        let mut out = vec![0.0; oh * ow * c];
        for y in 0..h {
            for xx in 0..wd {
                let src = &xv[(y * wd + xx) * c..(y * wd + xx + 1) * c];
                let o = ((y / f) * ow + xx / f) * c;
                for (dst, s) in out[o..o + c].iter_mut().zip(src) {
                    *dst += s * inv;
                }
            }
        }
        let rg = self.rg1(x);
        self.push("avg_pool", vec![oh, ow, c], out, rg, Op::AvgPool { x, h, wd, c, f })
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample(&mut self, x: Var, f: usize) -> Result<Var> {
        let (h, wd, c) = hwc(self.shape(x), "upsample")?;
        if f == 0 {
            return Err(Error::shape("upsample", "factor 0"));
        }
        let (oh, ow) = (h * f, wd * f);
        let xv = self.value(x);
        let mut out = vec![0.0; oh * ow * c];
        for y in 0..oh {
            for xx in 0..ow {
                let s = ((y / f) * wd + xx / f) * c;
                out[(y * ow + xx) * c..(y * ow + xx + 1) * c].copy_from_slice(&xv[s..s + c]);
            }
        }
        let rg = self.rg1(x);
        self.push("upsample", vec![oh, ow, c], out, rg, Op::Upsample { x, h, wd, c, f })
    }

    /// Concatenates along the last dimension; leading dims must agree.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != sb.len() || sa.is_empty() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::shape("concat_last", format!("{sa:?} vs {sb:?}")));
        }
        let na = sa[sa.len() - 1];
        let nb = sb[sb.len() - 1];
        let rows: usize = sa[..sa.len() - 1].iter().product();
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = Vec::with_capacity(rows * (na + nb));
        for r in 0..rows {
            out.extend_from_slice(&av[r * na..(r + 1) * na]);
            out.extend_from_slice(&bv[r * nb..(r + 1) * nb]);
        }
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = na + nb;
        let rg = self.rg2(a, b);
        self.push("concat_last", shape, out, rg, Op::ConcatLast { a, b, na, nb })
    }

    /// Reverse pass from a scalar `loss`; leaf gradients accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.node(loss).value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.node(loss).shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut leaf_updates = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(i, g, &mut grads, &mut leaf_updates);
        }
        for (i, g) in leaf_updates {
            let node = &mut self.nodes[i];
            let buf = node.grad.get_or_insert_with(|| vec![0.0; g.len()]);
            for (b, x) in buf.iter_mut().zip(&g) {
                *b += x;
            }
        }
        Ok(())
    }

    fn backprop_node(
        &self,
        i: usize,
        g: Vec<f64>,
        grads: &mut [Option<Vec<f64>>],
        leaf_updates: &mut Vec<(usize, Vec<f64>)>,
    ) {
        let node = &self.nodes[i];
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let len = |v: Var| self.nodes[v.0].value.len();
        match node.op {
            Op::Leaf => leaf_updates.push((i, g)),
            Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                if rg(a) {
                    let da = acc(grads, a, m * k);
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for l in 0..k {
                            let brow = &bv[l * n..(l + 1) * n];
                            da[r * k + l] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                if rg(b) {
                    let db = acc(grads, b, k * n);
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for l in 0..k {
                            let x = av[r * k + l];
                            if x == 0.0 {
                                continue;
                            }
                            for (d, y) in db[l * n..(l + 1) * n].iter_mut().zip(grow) {
                                *d += x * y;
                            }
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let da = acc(grads, a, m * n);
                for r in 0..m {
                    for c in 0..n {
                        da[r * n + c] += g[c * m + r];
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if rg(a) {
                    for (d, x) in acc(grads, a, g.len()).iter_mut().zip(&g) {
                        *d += x;
                    }
                }
                if rg(b) {
                    for (d, x) in acc(grads, b, g.len()).iter_mut().zip(&g) {
                        *d += sign * x;
                    }
                }
            }
            Op::Mul(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                if rg(a) {
                    let da = acc(grads, a, g.len());
                    for j in 0..g.len() {
                        da[j] += g[j] * bv[j];
                    }
                }
                if rg(b) {
                    let db = acc(grads, b, g.len());
                    for j in 0..g.len() {
                        db[j] += g[j] * av[j];
                    }
                }
            }
            Op::Div(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                if rg(a) {
                    let da = acc(grads, a, g.len());
                    for j in 0..g.len() {
                        da[j] += g[j] / bv[j];
                    }
                }
                if rg(b) {
                    let db = acc(grads, b, g.len());
                    for j in 0..g.len() {
                        db[j] -= g[j] * av[j] / (bv[j] * bv[j]);
                    }
                }
            }
            Op::Scale(a, c) => {
                for (d, x) in acc(grads, a, g.len()).iter_mut().zip(&g) {
                    *d += c * x;
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                for (d, x) in acc(grads, a, g.len()).iter_mut().zip(&g) {
                    *d += x;
                }
            }
            Op::MulScalarVar { s, x } => {
                let k = self.nodes[s.0].value[0];
                let xv = &self.nodes[x.0].value;
                if rg(s) {
                    let ds: f64 = g.iter().zip(xv).map(|(a, b)| a * b).sum();
                    acc(grads, s, 1)[0] += ds;
                }
                if rg(x) {
                    for (d, y) in acc(grads, x, g.len()).iter_mut().zip(&g) {
                        *d += k * y;
                    }
                }
            }
            Op::AddBias { x, b } => {
                let n = len(b);
                if rg(x) {
                    for (d, y) in acc(grads, x, g.len()).iter_mut().zip(&g) {
                        *d += y;
                    }
                }
                if rg(b) {
                    let db = acc(grads, b, n);
                    for row in g.chunks(n) {
                        for (d, y) in db.iter_mut().zip(row) {
                            *d += y;
                        }
                    }
                }
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                let da = acc(grads, a, g.len());
                for j in 0..g.len() {
                    da[j] += g[j] * y[j] * (1.0 - y[j]);
                }
            }
            Op::Relu(a) => {
                let xv = &self.nodes[a.0].value;
                let da = acc(grads, a, g.len());
                for j in 0..g.len() {
                    if xv[j] > 0.0 {
                        da[j] += g[j];
                    }
                }
            }
            Op::Log(a) => {
                let xv = &self.nodes[a.0].value;
                let da = acc(grads, a, g.len());
                for j in 0..g.len() {
                    da[j] += g[j] / xv[j];
                }
            }
            Op::Clamp { x, lo, hi } => {
                let xv = &self.nodes[x.0].value;
                let dx = acc(grads, x, g.len());
                for j in 0..g.len() {
                    if xv[j] >= lo && xv[j] <= hi {
                        dx[j] += g[j];
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                let n = node.shape[1].max(1);
                let y = &node.value;
                let da = acc(grads, a, g.len());
                for ((drow, yrow), grow) in da.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                    let dot: f64 = yrow.iter().zip(grow).map(|(p, q)| p * q).sum();
                    for j in 0..n {
                        drow[j] += yrow[j] * (grow[j] - dot);
                    }
                }
            }
            Op::L2Normalize(a) => {
                let xv = &self.nodes[a.0].value;
                let norm = xv.iter().map(|x| x * x).sum::<f64>().sqrt();
                // Zero vector: the output is constant zero, so the gradient is zero.
                let da = acc(grads, a, g.len());
                if norm > NORM_EPS {
                    let y = &node.value;
                    let dot: f64 = y.iter().zip(&g).map(|(p, q)| p * q).sum();
                    for j in 0..g.len() {
                        da[j] += (g[j] - y[j] * dot) / norm;
                    }
                }
            }
            Op::Sum(a) => {
                for d in acc(grads, a, len(a)).iter_mut() {
                    *d += g[0];
                }
            }
            Op::Mean(a) => {
                let n = len(a);
                let s = g[0] / n as f64;
                for d in acc(grads, a, n).iter_mut() {
                    *d += s;
                }
            }
            Op::Conv { x, w, h, wd, cin, cout, k } => {
                let xv = &self.nodes[x.0].value;
                let wv = &self.nodes[w.0].value;
                let r = (k / 2) as isize;
                let mut dx = if rg(x) { Some(vec![0.0; h * wd * cin]) } else { None };
                let mut dw = if rg(w) { Some(vec![0.0; k * k * cin * cout]) } else { None };
                for y in 0..h {
                    for xx in 0..wd {
                        let go = &g[(y * wd + xx) * cout..(y * wd + xx + 1) * cout];
                        for ky in 0..k {
                            let yy = y as isize + ky as isize - r;
                            if yy < 0 || yy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let xs = xx as isize + kx as isize - r;
                                if xs < 0 || xs >= wd as isize {
                                    continue;
                                }
                                let base = (yy as usize * wd + xs as usize) * cin;
                                let wbase = (ky * k + kx) * cin;
                                for ci in 0..cin {
                                    let row = (wbase + ci) * cout;
                                    if let Some(dx) = dx.as_mut() {
                                        let wr = &wv[row..row + cout];
                                        dx[base + ci] += go.iter().zip(wr).map(|(p, q)| p * q).sum::<f64>();
                                    }
                                    if let Some(dw) = dw.as_mut() {
                                        let a = xv[base + ci];
                                        if a != 0.0 {
                                            for (d, gg) in dw[row..row + cout].iter_mut().zip(go) {
                                                *d += a * gg;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(dx) = dx {
                    for (d, v) in acc(grads, x, dx.len()).iter_mut().zip(&dx) {
                        *d += v;
                    }
                }
                if let Some(dw) = dw {
                    for (d, v) in acc(grads, w, dw.len()).iter_mut().zip(&dw) {
                        *d += v;
                    }
                }
            }
            Op::AvgPool { x, h, wd, c, f } => {
                let ow = wd / f;
                let inv = 1.0 / (f * f) as f64;
                let dx = acc(grads, x, h * wd * c);
                for y in 0..h {
                    for xx in 0..wd {
                        let o = ((y / f) * ow + xx / f) * c;
                        let d = (y * wd + xx) * c;
                        for ch in 0..c {
                            dx[d + ch] += g[o + ch] * inv;
                        }
                    }
                }
            }
            Op::Upsample { x, h, wd, c, f } => {
                let ow = wd * f;
                let dx = acc(grads, x, h * wd * c);
                for y in 0..h * f {
                    for xx in 0..ow {
                        let s = ((y / f) * wd + xx / f) * c;
                        let o = (y * ow + xx) * c;
                        for ch in 0..c {
                            dx[s + ch] += g[o + ch];
                        }
                    }
                }
            }
            Op::ConcatLast { a, b, na, nb } => {
                let w = na + nb;
                let rows = if w == 0 { 0 } else { g.len() / w };
                if rg(a) {
                    let da = acc(grads, a, rows * na);
                    for r in 0..rows {
                        for j in 0..na {
                            da[r * na + j] += g[r * w + j];
                        }
                    }
                }
                if rg(b) {
                    let db = acc(grads, b, rows * nb);
                    for r in 0..rows {
                        for j in 0..nb {
                            db[r * nb + j] += g[r * w + na + j];
                        }
                    }
                }
            }
        }
    }
}
