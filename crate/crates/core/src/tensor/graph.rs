use super::kernels::{self, View};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    MatMul(Var, Var),
    Conv1d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    Permute { x: Var, perm: Vec<usize> },
    Reshape(Var),
    Softmax(Var),
    LayerNorm { x: Var, rstd: Vec<f32> },
    Gelu(Var),
    Gather { x: Var, axis: usize, idx: Vec<usize> },
    Narrow { x: Var, axis: usize, start: usize },
    Concat { xs: Vec<Var>, axis: usize },
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    CrossEntropy { logits: Var, probs: Vec<f32>, targets: Vec<usize> },
    Interp1d(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Dynamic tape. Nodes are appended in execution order, which is a valid
/// topological order; backward walks it in reverse exactly once.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Ok(Var(self.nodes.len() - 1))
    }

    // ---------------------------------------------------------------------
    // elementwise

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: fn(f32, f32) -> f32) -> Result<(Tensor, Vec<Var>)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out_shape = kernels::broadcast_shape(sa, sb)
            .ok_or_else(|| Error::shape(name, format!("cannot broadcast {sa:?} with {sb:?}")))?;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let data: Vec<f32> = if sa == sb {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else if sa == out_shape.as_slice() && sb.iter().product::<usize>() > 0 && out_shape.ends_with(sb) {
            let nb = db.len();
            da.iter().enumerate().map(|(i, &x)| f(x, db[i % nb])).collect()
        } else {
            let mut out = vec![0.0; out_shape.iter().product()];
            kernels::broadcast_rows(&out_shape, sa, sb, |o, oa, sta, ob, stb, n| {
                for (i, slot) in out[o..o + n].iter_mut().enumerate() {
                    *slot = f(da[oa + i * sta], db[ob + i * stb]);
                }
            });
            out
        };
        Ok((Tensor::new(out_shape, data)?, vec![a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, ins) = self.binary("add", a, b, |x, y| x + y)?;
        self.push("add", t, Op::Add(a, b), &ins)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, ins) = self.binary("sub", a, b, |x, y| x - y)?;
        self.push("sub", t, Op::Sub(a, b), &ins)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, ins) = self.binary("mul", a, b, |x, y| x * y)?;
        self.push("mul", t, Op::Mul(a, b), &ins)
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Result<Var> {
        let v = self.value(a);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|x| x * s).collect())?;
        self.push("scale", t, Op::Scale(a, s), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&x| kernels::gelu(x)).collect())?;
        self.push("gelu", t, Op::Gelu(a), &[a])
    }

    /// Stop-gradient: same value, no path back to `a`.
    pub fn detach(&mut self, a: Var) -> Var {
        let t = self.value(a).clone();
        self.leaf(t, false)
    }

    /// `x + detach(q - x)`: forwards `q`'s value, passes gradient to `x` unchanged.
    pub fn straight_through(&mut self, x: Var, q: Var) -> Result<Var> {
        let diff = self.sub(q, x)?;
        let diff = self.detach(diff);
        self.add(x, diff)
    }

    // ---------------------------------------------------------------------
    // linear algebra

    /// Batched matrix product. `b` is either 2-D (shared across the batch) or
    /// has the same leading dimensions as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}: operands must be at least 2-D")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}: inner dims differ")));
        }
        let lead = &sa[..sa.len() - 2];
        let mut out_shape = lead.to_vec();
        out_shape.extend([m, n]);
        let mut out = vec![0.0; out_shape.iter().product()];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        if sb.len() == 2 {
            let rows = lead.iter().product::<usize>() * m;
            kernels::gemm(rows, k, n, View::row_major(da, k), View::row_major(db, n), &mut out, 0.0);
        } else {
            if &sb[..sb.len() - 2] != lead {
                return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}: batch dims differ")));
            }
            let batch: usize = lead.iter().product();
            for i in 0..batch {
                kernels::gemm(
                    m,
                    k,
                    n,
                    View::row_major(&da[i * m * k..(i + 1) * m * k], k),
                    View::row_major(&db[i * k * n..(i + 1) * k * n], n),
                    &mut out[i * m * n..(i + 1) * m * n],
                    0.0,
                );
            }
        }
        let t = Tensor::new(out_shape, out)?;
        self.push("matmul", t, Op::MatMul(a, b), &[a, b])
    }

    /// 1-D convolution. `x`: (batch, c_in, len), `w`: (c_out, c_in, kernel),
    /// optional `b`: (c_out).
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 3 || sx[1] != sw[1] || stride == 0 {
            return Err(Error::shape("conv1d", format!("input {sx:?}, weight {sw:?}, stride {stride}")));
        }
        let (batch, cin, len) = (sx[0], sx[1], sx[2]);
        let (cout, kw) = (sw[0], sw[2]);
        if len + 2 * pad < kw {
            return Err(Error::shape("conv1d", format!("kernel {kw} longer than padded input {}", len + 2 * pad)));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::shape("conv1d", format!("bias {:?} for {cout} channels", self.shape(b))));
            }
        }
        let lout = (len + 2 * pad - kw) / stride + 1;
        let ld = batch * lout;
        let mut cols = vec![0.0; cin * kw * ld];
        let (dx, dw) = (self.value(x).data(), self.value(w).data());
        for bi in 0..batch {
            kernels::im2col(&dx[bi * cin * len..(bi + 1) * cin * len], cin, len, kw, stride, pad, lout, ld, &mut cols[bi * lout..]);
        }
        let mut wide = vec![0.0; cout * ld];
        kernels::gemm(cout, cin * kw, ld, View::row_major(dw, cin * kw), View::row_major(&cols, ld), &mut wide, 0.0);
        let bias = b.map(|b| self.value(b).data());
        let mut out = vec![0.0; batch * cout * lout];
        for bi in 0..batch {
            for c in 0..cout {
                let src = &wide[c * ld + bi * lout..c * ld + (bi + 1) * lout];
                let dst = &mut out[(bi * cout + c) * lout..(bi * cout + c + 1) * lout];
                let bc = bias.map_or(0.0, |d| d[c]);
                dst.iter_mut().zip(src).for_each(|(o, v)| *o = v + bc);
            }
        }
        let t = Tensor::new(vec![batch, cout, lout], out)?;
        let mut ins = vec![x, w];
        ins.extend(b);
        self.push("conv1d", t, Op::Conv1d { x, w, b, stride, pad }, &ins)
    }

    // ---------------------------------------------------------------------
    // layout

    pub fn transpose(&mut self, x: Var, d0: usize, d1: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if d0 >= shape.len() || d1 >= shape.len() {
            return Err(Error::shape("transpose", format!("axes ({d0},{d1}) on {shape:?}")));
        }
        let (out_shape, perm) = kernels::transpose_index(&shape, d0, d1);
        let src = self.value(x).data();
        let data = perm.iter().map(|&i| src[i]).collect();
        let t = Tensor::new(out_shape, data)?;
        self.push("transpose", t, Op::Permute { x, perm }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        self.push("reshape", t, Op::Reshape(x), &[x])
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape("narrow", format!("axis {axis} range {start}+{len} on {shape:?}")));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let t = Tensor::new(out_shape, data)?;
        self.push("narrow", t, Op::Narrow { x, axis, start }, &[x])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*xs.first().ok_or_else(|| Error::shape("concat", "no inputs"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} on {first:?}")));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let same_rest = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !same_rest {
                return Err(Error::shape("concat", format!("{s:?} vs {first:?} along axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let n = self.shape(v)[axis];
                let src = self.value(v).data();
                data.extend_from_slice(&src[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut out_shape = first;
        out_shape[axis] = total;
        let t = Tensor::new(out_shape, data)?;
        self.push("concat", t, Op::Concat { xs: xs.to_vec(), axis }, xs)
    }

    /// Select `idx` along `axis`. With a 2-D table and `axis = 0` this is an
    /// embedding lookup.
    pub fn gather(&mut self, x: Var, axis: usize, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("gather", format!("axis {axis} on {shape:?}")));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= shape[axis]) {
            return Err(Error::shape("gather", format!("index {bad} out of range for axis of size {}", shape[axis])));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * idx.len() * inner);
        for o in 0..outer {
            for &i in idx {
                let base = (o * n + i) * inner;
                data.extend_from_slice(&src[base..base + inner]);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = idx.len();
        let t = Tensor::new(out_shape, data)?;
        self.push("gather", t, Op::Gather { x, axis, idx: idx.to_vec() }, &[x])
    }

    pub fn embedding(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        if self.shape(table).len() != 2 {
            return Err(Error::shape("embedding", format!("table must be 2-D, got {:?}", self.shape(table))));
        }
        self.gather(table, 0, idx)
    }

    // ---------------------------------------------------------------------
    // normalisation

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, None)
    }

    /// Softmax over the last axis where `mask[i * tk + j] == false` forces an
    /// exact zero. The last two axes of `x` must be `(tq, tk)`.
    pub fn masked_softmax(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        self.softmax_impl(x, Some(mask))
    }

    fn softmax_impl(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let v = *shape.last().ok_or_else(|| Error::shape("softmax", "scalar input"))?;
        if let Some(m) = mask {
            let tq = if shape.len() >= 2 { shape[shape.len() - 2] } else { 1 };
            if m.len() != tq * v {
                return Err(Error::shape("softmax", format!("mask of {} entries for ({tq}, {v})", m.len())));
            }
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        let tq = if shape.len() >= 2 { shape[shape.len() - 2] } else { 1 };
        for (r, (row, o)) in src.chunks(v).zip(out.chunks_mut(v)).enumerate() {
            let mrow = mask.map(|m| &m[(r % tq) * v..(r % tq + 1) * v]);
            let allowed = |j: usize| mrow.is_none_or(|m| m[j]);
            let mx = (0..v).filter(|&j| allowed(j)).map(|j| row[j]).fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0;
            for j in 0..v {
                if allowed(j) {
                    o[j] = (row[j] - mx).exp();
                    sum += o[j];
                }
            }
            if sum > 0.0 {
                o.iter_mut().for_each(|e| *e /= sum);
            }
        }
        let t = Tensor::new(shape, out)?;
        self.push("softmax", t, Op::Softmax(x), &[x])
    }

    /// Normalises the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var, eps: f32) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().ok_or_else(|| Error::shape("layer_norm", "scalar input"))?;
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        let mut rstd = Vec::with_capacity(src.len() / n.max(1));
        for (row, o) in src.chunks(n).zip(out.chunks_mut(n)) {
            let mean = row.iter().sum::<f32>() / n as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n as f32;
            let r = 1.0 / (var + eps).sqrt();
            for (oi, &v) in o.iter_mut().zip(row) {
                *oi = (v - mean) * r;
            }
            rstd.push(r);
        }
        let t = Tensor::new(shape, out)?;
        self.push("layer_norm", t, Op::LayerNorm { x, rstd }, &[x])
    }

    /// Endpoint-aligned linear resampling of the last axis to `target_len`.
    /// A target length of one returns the mean.
    pub fn interp1d_linear(&mut self, x: Var, target_len: usize) -> Result<Var> {
        if target_len == 0 {
            return Err(Error::InvalidArgument("interp1d_linear: target length must be >= 1".into()));
        }
        let shape = self.shape(x).to_vec();
        let lin = *shape.last().ok_or_else(|| Error::shape("interp1d_linear", "scalar input"))?;
        if lin == 0 {
            return Err(Error::shape("interp1d_linear", "empty input"));
        }
        let src = self.value(x).data();
        let rows = src.len() / lin;
        let mut out = vec![0.0; rows * target_len];
        match kernels::interp_taps(lin, target_len) {
            None => {
                for (row, o) in src.chunks(lin).zip(out.iter_mut()) {
                    *o = row.iter().sum::<f32>() / lin as f32;
                }
            }
            Some(taps) => {
                for (row, o) in src.chunks(lin).zip(out.chunks_mut(target_len)) {
                    for (slot, &(i0, i1, w0, w1)) in o.iter_mut().zip(&taps) {
                        *slot = if w1 == 0.0 { row[i0] } else { w0 * row[i0] + w1 * row[i1] };
                    }
                }
            }
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = target_len;
        let t = Tensor::new(out_shape, out)?;
        self.push("interp1d_linear", t, Op::Interp1d(x), &[x])
    }

    // ---------------------------------------------------------------------
    // reductions and losses

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let d = self.value(x).data();
        let s = d.iter().sum::<f32>() / d.len().max(1) as f32;
        self.push("mean", Tensor::scalar(s), Op::Mean(x), &[x])
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mse", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let s = da.iter().zip(db).map(|(x, y)| (x - y) * (x - y)).sum::<f32>() / da.len().max(1) as f32;
        self.push("mse", Tensor::scalar(s), Op::Mse(a, b), &[a, b])
    }

    /// Mean cross-entropy between rows of `logits` (last axis = classes) and
    /// integer targets, one per row.
    pub fn cross_entropy_with_logits(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let v = *shape.last().ok_or_else(|| Error::shape("cross_entropy", "scalar logits"))?;
        let src = self.value(logits).data();
        let rows = src.len() / v.max(1);
        if rows != targets.len() {
            return Err(Error::shape("cross_entropy", format!("{rows} rows, {} targets", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::TokenOutOfRange { token: bad, size: v });
        }
        let mut probs = vec![0.0; src.len()];
        let mut total = 0.0f64;
        for ((row, p), &t) in src.chunks(v).zip(probs.chunks_mut(v)).zip(targets) {
            let mx = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f32;
            for (pi, &x) in p.iter_mut().zip(row) {
                *pi = (x - mx).exp();
                sum += *pi;
            }
            p.iter_mut().for_each(|e| *e /= sum);
            total += f64::from(sum.ln() + mx - row[t]);
        }
        let loss = (total / rows.max(1) as f64) as f32;
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, probs, targets: targets.to_vec() },
            &[logits],
        )
    }

    // ---------------------------------------------------------------------
    // backward

    /// Reverse pass from a scalar. Gradients accumulate into every leaf that
    /// requires them; call [`Graph::zero_grad`] to reset.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward", format!("loss must be scalar, got {:?}", self.shape(loss))));
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(g) => g.data_mut().iter_mut().zip(&gout).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(Tensor::new(node.value.shape().to_vec(), gout)?),
                }
                continue;
            }
            self.backward_node(i, &gout, &mut grads);
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let out_shape = node.value.shape();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f32])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let n = self.nodes[v.0].value.numel();
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                for (v, s) in [(*a, 1.0f32), (*b, sign)] {
                    let shape = self.shape(v);
                    if shape == out_shape {
                        acc(v, &mut |buf| buf.iter_mut().zip(g).for_each(|(x, y)| *x += s * y));
                    } else {
                        acc(v, &mut |buf| {
                            kernels::broadcast_rows(out_shape, shape, shape, |o, ov, st, _, _, n| {
                                for i in 0..n {
                                    buf[ov + i * st] += s * g[o + i];
                                }
                            })
                        });
                    }
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    let shape = self.shape(v);
                    let od = self.value(other).data();
                    let so = self.shape(other);
                    acc(v, &mut |buf| {
                        kernels::broadcast_rows(out_shape, shape, so, |o, ov, sv, oo, st, n| {
                            for i in 0..n {
                                buf[ov + i * sv] += g[o + i] * od[oo + i * st];
                            }
                        })
                    });
                }
            }
            Op::Scale(a, s) => acc(*a, &mut |buf| buf.iter_mut().zip(g).for_each(|(x, y)| *x += s * y)),
            Op::Gelu(a) => {
                let src = self.value(*a).data();
                acc(*a, &mut |buf| {
                    for k in 0..buf.len() {
                        buf[k] += g[k] * kernels::gelu_grad(src[k]);
                    }
                })
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = sb[sb.len() - 1];
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                if sb.len() == 2 {
                    let rows = da.len() / k.max(1);
                    acc(*a, &mut |buf| {
                        kernels::gemm(rows, n, k, View::row_major(g, n), View::transposed(db, n), buf, 1.0)
                    });
                    acc(*b, &mut |buf| {
                        kernels::gemm(k, rows, n, View::transposed(da, k), View::row_major(g, n), buf, 1.0)
                    });
                } else {
                    let batch = da.len() / (m * k).max(1);
                    acc(*a, &mut |buf| {
                        for bi in 0..batch {
                            kernels::gemm(
                                m,
                                n,
                                k,
                                View::row_major(&g[bi * m * n..], n),
                                View::transposed(&db[bi * k * n..], n),
                                &mut buf[bi * m * k..(bi + 1) * m * k],
                                1.0,
                            );
                        }
                    });
                    acc(*b, &mut |buf| {
                        for bi in 0..batch {
                            kernels::gemm(
                                k,
                                m,
                                n,
                                View::transposed(&da[bi * m * k..], k),
                                View::row_major(&g[bi * m * n..], n),
                                &mut buf[bi * k * n..(bi + 1) * k * n],
                                1.0,
                            );
                        }
                    });
                }
            }
            Op::Conv1d { x, w, b, stride, pad } => {
                let (sx, sw) = (self.shape(*x), self.shape(*w));
                let (batch, cin, len) = (sx[0], sx[1], sx[2]);
                let (cout, kw) = (sw[0], sw[2]);
                let lout = out_shape[2];
                let (dx, dw) = (self.value(*x).data(), self.value(*w).data());
                let ld = batch * lout;
                let mut gw = vec![0.0; cout * ld];
                for bi in 0..batch {
                    for c in 0..cout {
                        gw[c * ld + bi * lout..c * ld + (bi + 1) * lout]
                            .copy_from_slice(&g[(bi * cout + c) * lout..(bi * cout + c + 1) * lout]);
                    }
                }
                if let Some(b) = b {
                    acc(*b, &mut |buf| {
                        for c in 0..cout {
                            buf[c] += gw[c * ld..(c + 1) * ld].iter().sum::<f32>();
                        }
                    });
                }
                let mut cols = vec![0.0; cin * kw * ld];
                if self.nodes[w.0].requires_grad {
                    for bi in 0..batch {
                        kernels::im2col(&dx[bi * cin * len..], cin, len, kw, *stride, *pad, lout, ld, &mut cols[bi * lout..]);
                    }
                    acc(*w, &mut |buf| {
                        kernels::gemm(cout, ld, cin * kw, View::row_major(&gw, ld), View::transposed(&cols, ld), buf, 1.0)
                    });
                }
                acc(*x, &mut |buf| {
                    kernels::gemm(cin * kw, cout, ld, View::transposed(dw, cin * kw), View::row_major(&gw, ld), &mut cols, 0.0);
                    for bi in 0..batch {
                        kernels::col2im(&cols[bi * lout..], cin, len, kw, *stride, *pad, lout, ld, &mut buf[bi * cin * len..]);
                    }
                });
            }
            Op::Permute { x, perm } => acc(*x, &mut |buf| {
                for (k, &p) in perm.iter().enumerate() {
                    buf[p] += g[k];
                }
            }),
            Op::Reshape(x) => acc(*x, &mut |buf| buf.iter_mut().zip(g).for_each(|(a, b)| *a += b)),
            Op::Narrow { x, axis, start } => {
                let (outer, n, inner) = axis_split(self.shape(*x), *axis);
                let len = out_shape[*axis];
                acc(*x, &mut |buf| {
                    for o in 0..outer {
                        let base = o * n * inner + start * inner;
                        let gs = &g[o * len * inner..(o + 1) * len * inner];
                        buf[base..base + len * inner].iter_mut().zip(gs).for_each(|(a, b)| *a += b);
                    }
                });
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = axis_split(out_shape, *axis);
                let mut offset = 0;
                for &v in xs {
                    let n = self.shape(v)[*axis];
                    acc(v, &mut |buf| {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + n) * inner];
                            buf[o * n * inner..(o + 1) * n * inner]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(a, b)| *a += b);
                        }
                    });
                    offset += n;
                }
            }
            Op::Gather { x, axis, idx } => {
                let (outer, n, inner) = axis_split(self.shape(*x), *axis);
                acc(*x, &mut |buf| {
                    for o in 0..outer {
                        for (j, &ix) in idx.iter().enumerate() {
                            let src = &g[(o * idx.len() + j) * inner..(o * idx.len() + j + 1) * inner];
                            let dst = &mut buf[(o * n + ix) * inner..(o * n + ix + 1) * inner];
                            dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let v = *out_shape.last().unwrap();
                acc(*x, &mut |buf| {
                    for ((y, gy), dx) in out.chunks(v).zip(g.chunks(v)).zip(buf.chunks_mut(v)) {
                        let dot: f32 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                        for j in 0..v {
                            dx[j] += y[j] * (gy[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, rstd } => {
                let n = *out_shape.last().unwrap();
                acc(*x, &mut |buf| {
                    for (((xh, gy), dx), r) in out.chunks(n).zip(g.chunks(n)).zip(buf.chunks_mut(n)).zip(rstd) {
                        let mg = gy.iter().sum::<f32>() / n as f32;
                        let mgx = gy.iter().zip(xh).map(|(a, b)| a * b).sum::<f32>() / n as f32;
                        for j in 0..n {
                            dx[j] += r * (gy[j] - mg - xh[j] * mgx);
                        }
                    }
                });
            }
            Op::Interp1d(x) => {
                let lin = *self.shape(*x).last().unwrap();
                let lout = *out_shape.last().unwrap();
                let taps = kernels::interp_taps(lin, lout);
                acc(*x, &mut |buf| match &taps {
                    None => {
                        for (dx, gy) in buf.chunks_mut(lin).zip(g) {
                            dx.iter_mut().for_each(|d| *d += gy / lin as f32);
                        }
                    }
                    Some(taps) => {
                        for (dx, gy) in buf.chunks_mut(lin).zip(g.chunks(lout)) {
                            for (&(i0, i1, w0, w1), gv) in taps.iter().zip(gy) {
                                dx[i0] += w0 * gv;
                                if w1 != 0.0 {
                                    dx[i1] += w1 * gv;
                                }
                            }
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |buf| buf.iter_mut().for_each(|a| *a += g[0])),
            Op::Mean(x) => {
                let n = self.value(*x).numel() as f32;
                acc(*x, &mut |buf| buf.iter_mut().for_each(|a| *a += g[0] / n))
            }
            Op::Mse(a, b) => {
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                let scale = 2.0 * g[0] / da.len() as f32;
                acc(*a, &mut |buf| {
                    for k in 0..buf.len() {
                        buf[k] += scale * (da[k] - db[k]);
                    }
                });
                acc(*b, &mut |buf| {
                    for k in 0..buf.len() {
                        buf[k] -= scale * (da[k] - db[k]);
                    }
                });
            }
            Op::CrossEntropy { logits, probs, targets } => {
                let v = *self.shape(*logits).last().unwrap();
                let scale = g[0] / targets.len() as f32;
                acc(*logits, &mut |buf| {
                    for (&t, (p, dx)) in targets.iter().zip(probs.chunks(v).zip(buf.chunks_mut(v))) {
                        for j in 0..v {
                            dx[j] += scale * p[j];
                        }
                        dx[t] -= scale;
                    }
                });
            }
        }
    }
}
