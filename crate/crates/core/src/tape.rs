//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends a node holding its forward value; [`Tape::backward`]
//! walks the nodes in reverse insertion order, which is a valid topological
//! order because inputs always precede their consumers. One tape per
//! forward/backward pass; tapes are not shared between threads.

use std::sync::Arc;

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Precomputed rotary tables, `[max_len, d_head / 2]` each.
#[derive(Debug, Clone)]
pub struct RopeTable {
    pub d_head: usize,
    pub max_len: usize,
    cos: Vec<f32>,
    sin: Vec<f32>,
}

impl RopeTable {
    pub fn new(d_head: usize, max_len: usize, base: f32) -> Self {
        assert!(d_head % 2 == 0, "rotary embedding needs an even head dimension");
        let half = d_head / 2;
        let mut cos = Vec::with_capacity(max_len * half);
        let mut sin = Vec::with_capacity(max_len * half);
        for pos in 0..max_len {
            for i in 0..half {
                let inv_freq = (base as f64).powf(-(2.0 * i as f64) / d_head as f64);
                let angle = pos as f64 * inv_freq;
                cos.push(angle.cos() as f32);
                sin.push(angle.sin() as f32);
            }
        }
        Self { d_head, max_len, cos, sin }
    }

    /// Rotates one head vector in place for position `pos`.
    pub fn rotate(&self, x: &mut [f32], pos: usize) {
        let half = self.d_head / 2;
        let (c, s) = (&self.cos[pos * half..(pos + 1) * half], &self.sin[pos * half..(pos + 1) * half]);
        for i in 0..half {
            let (a, b) = (x[i], x[i + half]);
            x[i] = a * c[i] - b * s[i];
            x[i + half] = a * s[i] + b * c[i];
        }
    }

    /// Applies the inverse rotation, which is the vector-Jacobian product.
    fn rotate_back(&self, g: &mut [f32], pos: usize) {
        let half = self.d_head / 2;
        let (c, s) = (&self.cos[pos * half..(pos + 1) * half], &self.sin[pos * half..(pos + 1) * half]);
        for i in 0..half {
            let (a, b) = (g[i], g[i + half]);
            g[i] = a * c[i] + b * s[i];
            g[i + half] = -a * s[i] + b * c[i];
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool, m: usize, k: usize, n: usize },
    BatchMatMul { a: Var, b: Var, trans_b: bool, batch: usize, m: usize, k: usize, n: usize },
    Add(Var, Var),
    Mul(Var, Var),
    AddBias { x: Var, bias: Var },
    Scale(Var, f32),
    Sigmoid(Var),
    Silu(Var),
    Log { x: Var, eps: f32 },
    Sum(Var),
    Mean(Var),
    Softmax { x: Var, bias: Var },
    Embedding { table: Var, ids: Vec<usize> },
    RmsNorm { x: Var, weight: Var, eps: f32 },
    Rope { x: Var, table: Arc<RopeTable>, offset: usize },
    Permute { x: Var, perm: Vec<usize> },
    Reshape(Var),
    RepeatHeads { x: Var, groups: usize },
    WindowBias { gate: Var, window: usize, groups: usize },
    StraightThrough(Var),
    Anneal { u: Var, alpha: f32 },
    OverrideHeads { x: Var, overrides: Vec<Option<f32>> },
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<f32>, total: f32 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f32>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Linear record of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (a_rs, a_cs): (usize, usize),
    b: &[f32],
    (b_rs, b_cs): (usize, usize),
    c: &mut [f32],
    beta: f32,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || (m - 1) * a_rs + (k - 1) * a_cs < a.len());
    assert!(k == 0 || (k - 1) * b_rs + (n - 1) * b_cs < b.len());
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above bound every index sgemm touches.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_rs as isize,
            a_cs as isize,
            b.as_ptr(),
            b_rs as isize,
            b_cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c = a · b` (or `a · bᵀ`) for row-major slices; used by the tape-free
/// inference paths as well.
pub fn matmul_into(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize, trans_b: bool) {
    let b_strides = if trans_b { (1, k) } else { (n, 1) };
    gemm(m, k, n, a, (k, 1), b, b_strides, c, 0.0);
}

/// Permutes the axes of a row-major buffer.
pub fn permute_data(data: &[f32], shape: &[usize], perm: &[usize]) -> Vec<f32> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    if data.is_empty() {
        return out;
    }
    // The innermost axis is copied as a contiguous run when it stays last.
    let (outer_rank, run) = if rank > 0 && perm[rank - 1] == rank - 1 {
        (rank - 1, shape[rank - 1])
    } else {
        (rank, 1)
    };
    let mut idx = vec![0usize; outer_rank];
    loop {
        let offset: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.extend_from_slice(&data[offset..offset + run]);
        let mut axis = outer_rank;
        loop {
            if axis == 0 {
                return out;
            }
            axis -= 1;
            idx[axis] += 1;
            if idx[axis] < out_shape[axis] {
                break;
            }
            idx[axis] = 0;
        }
    }
}

fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: f32) -> f32 {
    x * sigmoid(x)
}

/// Row-wise `softmax(x + bias)` into `out`; fails on a row with no finite bias.
pub fn softmax_rows(x: &[f32], bias: &[f32], out: &mut [f32], cols: usize) -> Result<()> {
    for ((xr, br), or) in x.chunks(cols).zip(bias.chunks(cols)).zip(out.chunks_mut(cols)) {
        let mut max = f32::NEG_INFINITY;
        for (a, b) in xr.iter().zip(br) {
            let z = a + b;
            if z > max {
                max = z;
            }
        }
        if max == f32::NEG_INFINITY {
            return Err(Error::Contract("softmax row is fully masked".into()));
        }
        let mut sum = 0.0f32;
        for ((o, a), b) in or.iter_mut().zip(xr).zip(br) {
            let e = if *b == f32::NEG_INFINITY { 0.0 } else { (a + b - max).exp() };
            *o = e;
            sum += e;
        }
        let inv = 1.0 / sum;
        or.iter_mut().for_each(|o| *o *= inv);
    }
    Ok(())
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Registers a tensor as an input; it is differentiated iff `requires_grad`.
    pub fn leaf(&mut self, mut t: Tensor) -> Var {
        let needs = t.requires_grad;
        t.grad = None;
        self.push(t, Op::Leaf, needs)
    }

    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = false;
        t.grad = None;
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f32] {
        self.nodes[v.0].value.data()
    }

    /// `a [.., k] · b [k, n] -> [.., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a [.., k] · bᵀ` where `b` is `[n, k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sb.len() != 2 {
            return Err(shape_err!("matmul expects [..,k] x 2-D, got {:?} x {:?}", sa, sb));
        }
        let k = *sa.last().unwrap();
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(shape_err!("matmul inner dimensions differ: {:?} x {:?}", sa, sb));
        }
        let m = sa.iter().product::<usize>() / k.max(1);
        let mut out = vec![0.0; m * n];
        matmul_into(self.data(a), self.data(b), &mut out, m, k, n, trans_b);
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(&shape, out)?, Op::MatMul { a, b, trans_b, m, k, n }, needs))
    }

    /// Batched product over matching leading dims: `[.., m, k] · [.., k, n]`,
    /// or `[.., m, k] · [.., n, k]ᵀ` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let r = sa.len();
        if r < 3 || sb.len() != r || sa[..r - 2] != sb[..r - 2] {
            return Err(shape_err!("bmm batch dims differ: {:?} x {:?}", sa, sb));
        }
        let (m, k) = (sa[r - 2], sa[r - 1]);
        let (kb, n) = if trans_b { (sb[r - 1], sb[r - 2]) } else { (sb[r - 2], sb[r - 1]) };
        if k != kb {
            return Err(shape_err!("bmm inner dimensions differ: {:?} x {:?}", sa, sb));
        }
        let batch: usize = sa[..r - 2].iter().product();
        let mut out = vec![0.0; batch * m * n];
        {
            let (da, db) = (self.data(a), self.data(b));
            for g in 0..batch {
                matmul_into(
                    &da[g * m * k..(g + 1) * m * k],
                    &db[g * k * n..(g + 1) * k * n],
                    &mut out[g * m * n..(g + 1) * m * n],
                    m,
                    k,
                    n,
                    trans_b,
                );
            }
        }
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, n]);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::BatchMatMul { a, b, trans_b, batch, m, k, n },
            needs,
        ))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out: Vec<f32> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Add(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out: Vec<f32> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Mul(a, b), needs))
    }

    /// Adds a `[n]` bias along the last axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap_or(&0);
        if self.shape(bias) != [n] {
            return Err(shape_err!("bias {:?} does not match last dim of {:?}", self.shape(bias), self.shape(x)));
        }
        let b = self.data(bias);
        let out: Vec<f32> = self.data(x).chunks(n).flat_map(|row| row.iter().zip(b).map(|(r, b)| r + b)).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(Tensor::new(&shape, out)?, Op::AddBias { x, bias }, needs))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f32) -> f32, op: Op) -> Var {
        let out: Vec<f32> = self.data(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        self.push(Tensor::new(&shape, out).expect("same shape"), op, needs)
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, silu, Op::Silu(x))
    }

    /// `ln(x + eps)`.
    pub fn log_eps(&mut self, x: Var, eps: f32) -> Var {
        self.unary(x, |v| (v + eps).ln(), Op::Log { x, eps })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f32 = self.data(x).iter().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let s = d.iter().sum::<f32>() / d.len().max(1) as f32;
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Mean(x), needs)
    }

    /// Softmax over the last axis of `x + bias`. `-inf` bias entries get
    /// exactly zero probability and receive zero gradient.
    pub fn softmax_lastdim(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.same_shape(x, bias, "softmax bias")?;
        let shape = self.shape(x).to_vec();
        let cols = *shape.last().ok_or_else(|| shape_err!("softmax of a scalar"))?;
        let mut out = vec![0.0; self.data(x).len()];
        softmax_rows(self.data(x), self.data(bias), &mut out, cols)?;
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Softmax { x, bias }, needs))
    }

    /// Gathers rows of `table [V, d]`; output shape is `lead ++ [d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], lead: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 || lead.iter().product::<usize>() != ids.len() {
            return Err(shape_err!("embedding table {:?} with {} ids for {:?}", ts, ids.len(), lead));
        }
        let (v, d) = (ts[0], ts[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Input(format!("token id {id} out of range for vocab {v}")));
            }
            out.extend_from_slice(&self.data(table)[id * d..(id + 1) * d]);
        }
        let mut shape = lead.to_vec();
        shape.push(d);
        let needs = self.needs(table);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Embedding { table, ids: ids.to_vec() }, needs))
    }

    /// RMS normalization over the last axis with a learned `[d]` gain.
    pub fn rms_norm(&mut self, x: Var, weight: Var, eps: f32) -> Result<Var> {
        let d = *self.shape(x).last().unwrap_or(&0);
        if self.shape(weight) != [d] {
            return Err(shape_err!("rms_norm weight {:?} for input {:?}", self.shape(weight), self.shape(x)));
        }
        let w = self.data(weight);
        let mut out = Vec::with_capacity(self.data(x).len());
        for row in self.data(x).chunks(d) {
            let ms = row.iter().map(|v| v * v).sum::<f32>() / d as f32;
            let r = 1.0 / (ms + eps).sqrt();
            out.extend(row.iter().zip(w).map(|(v, w)| v * r * w));
        }
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x) || self.needs(weight);
        Ok(self.push(Tensor::new(&shape, out)?, Op::RmsNorm { x, weight, eps }, needs))
    }

    /// Rotary position embedding on `[B, H, T, D]`, positions `offset..offset+T`.
    pub fn rope(&mut self, x: Var, table: &Arc<RopeTable>, offset: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[3] != table.d_head || offset + s[2] > table.max_len {
            return Err(shape_err!("rope on {:?} with d_head {} max_len {}", s, table.d_head, table.max_len));
        }
        let (t_len, d) = (s[2], s[3]);
        let mut out = self.data(x).to_vec();
        for (i, row) in out.chunks_mut(d).enumerate() {
            table.rotate(row, offset + i % t_len);
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(&s, out)?, Op::Rope { x, table: table.clone(), offset }, needs))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err!("invalid permutation {:?} for {:?}", perm, s));
        }
        let out = permute_data(self.data(x), &s, perm);
        let shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Permute { x, perm: perm.to_vec() }, needs))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::Reshape(x), needs))
    }

    /// `[B, Hkv, T, D] -> [B, Hkv * groups, T, D]`; query head `h` reads kv head `h / groups`.
    pub fn repeat_heads(&mut self, x: Var, groups: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || groups == 0 {
            return Err(shape_err!("repeat_heads on {:?}", s));
        }
        if groups == 1 {
            return self.reshape(x, &s);
        }
        let inner = s[2] * s[3];
        let mut out = Vec::with_capacity(self.data(x).len() * groups);
        for head in self.data(x).chunks(inner) {
            for _ in 0..groups {
                out.extend_from_slice(head);
            }
        }
        let shape = [s[0], s[1] * groups, s[2], s[3]];
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(&shape, out)?, Op::RepeatHeads { x, groups }, needs))
    }

    /// Expands a per-kv-head gate bias `[B, Hkv, T]` into the full additive
    /// mask `[B, Hkv * groups, T, T]`: `-inf` above the diagonal, `0` inside
    /// the causal window `0 <= t - s < window`, the gate bias of key `s`
    /// elsewhere.
    pub fn window_bias(&mut self, gate: Var, window: usize, groups: usize) -> Result<Var> {
        let s = self.shape(gate).to_vec();
        if window == 0 {
            return Err(Error::Config("window must be at least 1".into()));
        }
        if s.len() != 3 || groups == 0 {
            return Err(shape_err!("window_bias gate {:?}", s));
        }
        let (b, hkv, t) = (s[0], s[1], s[2]);
        let g = self.data(gate);
        let mut out = vec![0.0f32; b * hkv * groups * t * t];
        for bi in 0..b {
            for kv in 0..hkv {
                let gate_row = &g[(bi * hkv + kv) * t..(bi * hkv + kv + 1) * t];
                for qh in 0..groups {
                    let h = kv * groups + qh;
                    let plane = &mut out[(bi * hkv * groups + h) * t * t..(bi * hkv * groups + h + 1) * t * t];
                    for (ti, row) in plane.chunks_mut(t).enumerate() {
                        for (si, cell) in row.iter_mut().enumerate() {
                            *cell = if si > ti {
                                f32::NEG_INFINITY
                            } else if ti - si < window {
                                0.0
                            } else {
                                gate_row[si]
                            };
                        }
                    }
                }
            }
        }
        let needs = self.needs(gate);
        Ok(self.push(
            Tensor::new(&[b, hkv * groups, t, t], out)?,
            Op::WindowBias { gate, window, groups },
            needs,
        ))
    }

    /// Forward value `forward`, gradient routed unchanged into `surrogate`.
    pub fn straight_through(&mut self, forward: Tensor, surrogate: Var) -> Result<Var> {
        if forward.shape() != self.shape(surrogate) {
            return Err(shape_err!("straight-through {:?} vs {:?}", forward.shape(), self.shape(surrogate)));
        }
        let needs = self.needs(surrogate);
        Ok(self.push(forward, Op::StraightThrough(surrogate), needs))
    }

    /// `(1 - alpha) u + alpha 1[u >= tau]`; the indicator carries no gradient.
    pub fn anneal(&mut self, u: Var, tau: f32, alpha: f32) -> Var {
        self.unary(
            u,
            |v| (1.0 - alpha) * v + alpha * if v >= tau { 1.0 } else { 0.0 },
            Op::Anneal { u, alpha },
        )
    }

    /// Replaces whole heads of a `[B, H, T]` tensor with constants.
    pub fn override_heads(&mut self, x: Var, overrides: &[Option<f32>]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[1] != overrides.len() {
            return Err(shape_err!("override_heads on {:?} with {} heads", s, overrides.len()));
        }
        let t = s[2];
        let mut out = self.data(x).to_vec();
        for (i, row) in out.chunks_mut(t).enumerate() {
            if let Some(c) = overrides[i % s[1]] {
                row.fill(c);
            }
        }
        let needs = self.needs(x) && overrides.iter().any(Option::is_none);
        Ok(self.push(Tensor::new(&s, out)?, Op::OverrideHeads { x, overrides: overrides.to_vec() }, needs))
    }

    /// Weighted mean cross-entropy of `logits [.., V]` against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f32]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        let v = *s.last().unwrap_or(&0);
        let rows = self.data(logits).len() / v.max(1);
        if targets.len() != rows || weights.len() != rows {
            return Err(shape_err!("cross_entropy: {} rows, {} targets, {} weights", rows, targets.len(), weights.len()));
        }
        let total: f32 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::Contract("loss mask selects no positions".into()));
        }
        let mut loss = 0.0f64;
        for ((row, &tgt), &w) in self.data(logits).chunks(v).zip(targets).zip(weights) {
            if w == 0.0 {
                continue;
            }
            if tgt >= v {
                return Err(Error::Input(format!("target {tgt} out of range for vocab {v}")));
            }
            loss += w as f64 * row_nll(row, tgt) as f64;
        }
        let value = (loss / total as f64) as f32;
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(value),
            Op::CrossEntropy { logits, targets: targets.to_vec(), weights: weights.to_vec(), total },
            needs,
        ))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.nodes[root.0].value.numel() != 1 {
            return Err(shape_err!("backward root must be a scalar, got {:?}", self.shape(root)));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f32>>], v: Var) -> Option<&'g mut Vec<f32>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let len = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn backprop_node(&self, node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, trans_b, m, k, n } => {
                if let Some(ga) = self.acc(grads, a) {
                    // dA = dC · B(ᵀ)ᵀ
                    let bs = if trans_b { (k, 1) } else { (1, n) };
                    gemm(m, n, k, g, (n, 1), self.data(b), bs, ga, 1.0);
                }
                if let Some(gb) = self.acc(grads, b) {
                    if trans_b {
                        // dB [n,k] = dCᵀ · A
                        gemm(n, m, k, g, (1, n), self.data(a), (k, 1), gb, 1.0);
                    } else {
                        // dB [k,n] = Aᵀ · dC
                        gemm(k, m, n, self.data(a), (1, k), g, (n, 1), gb, 1.0);
                    }
                }
            }
            &Op::BatchMatMul { a, b, trans_b, batch, m, k, n } => {
                let (da, db) = (self.data(a), self.data(b));
                if let Some(ga) = self.acc(grads, a) {
                    let bs = if trans_b { (k, 1) } else { (1, n) };
                    for i in 0..batch {
                        gemm(
                            m,
                            n,
                            k,
                            &g[i * m * n..(i + 1) * m * n],
                            (n, 1),
                            &db[i * k * n..(i + 1) * k * n],
                            bs,
                            &mut ga[i * m * k..(i + 1) * m * k],
                            1.0,
                        );
                    }
                }
                if let Some(gb) = self.acc(grads, b) {
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &da[i * m * k..(i + 1) * m * k];
                        let gbi = &mut gb[i * k * n..(i + 1) * k * n];
                        if trans_b {
                            gemm(n, m, k, gi, (1, n), ai, (k, 1), gbi, 1.0);
                        } else {
                            gemm(k, m, n, ai, (1, k), gi, (n, 1), gbi, 1.0);
                        }
                    }
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(gv) = self.acc(grads, v) {
                        gv.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            &Op::Mul(a, b) => {
                if let Some(ga) = self.acc(grads, a) {
                    for ((x, y), bv) in ga.iter_mut().zip(g).zip(self.data(b)) {
                        *x += y * bv;
                    }
                }
                if let Some(gb) = self.acc(grads, b) {
                    for ((x, y), av) in gb.iter_mut().zip(g).zip(self.data(a)) {
                        *x += y * av;
                    }
                }
            }
            &Op::AddBias { x, bias } => {
                if let Some(gx) = self.acc(grads, x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
                if let Some(gb) = self.acc(grads, bias) {
                    let n = gb.len();
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                }
            }
            &Op::Scale(x, s) => {
                if let Some(gx) = self.acc(grads, x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += b * s);
                }
            }
            &Op::Sigmoid(x) => {
                if let Some(gx) = self.acc(grads, x) {
                    for ((a, b), y) in gx.iter_mut().zip(g).zip(out) {
                        *a += b * y * (1.0 - y);
                    }
                }
            }
            &Op::Silu(x) => {
                if let Some(gx) = self.acc(grads, x) {
                    for ((a, b), &v) in gx.iter_mut().zip(g).zip(self.data(x)) {
                        let s = sigmoid(v);
                        *a += b * s * (1.0 + v * (1.0 - s));
                    }
                }
            }
            &Op::Log { x, eps } => {
                if let Some(gx) = self.acc(grads, x) {
                    for ((a, b), &v) in gx.iter_mut().zip(g).zip(self.data(x)) {
                        *a += b / (v + eps);
                    }
                }
            }
            &Op::Sum(x) => {
                if let Some(gx) = self.acc(grads, x) {
                    gx.iter_mut().for_each(|a| *a += g[0]);
                }
            }
            &Op::Mean(x) => {
                if let Some(gx) = self.acc(grads, x) {
                    let s = g[0] / gx.len().max(1) as f32;
                    gx.iter_mut().for_each(|a| *a += s);
                }
            }
            &Op::Softmax { x, bias } => {
                let cols = *node.value.shape().last().unwrap();
                let mut dz = vec![0.0f32; out.len()];
                for ((dzr, yr), gr) in dz.chunks_mut(cols).zip(out.chunks(cols)).zip(g.chunks(cols)) {
                    let dot: f32 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for ((d, y), g) in dzr.iter_mut().zip(yr).zip(gr) {
                        *d = y * (g - dot);
                    }
                }
                for v in [x, bias] {
                    if let Some(gv) = self.acc(grads, v) {
                        gv.iter_mut().zip(&dz).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if let Some(gt) = self.acc(grads, *table) {
                    let d = *node.value.shape().last().unwrap();
                    for (row, &id) in g.chunks(d).zip(ids) {
                        gt[id * d..(id + 1) * d].iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                }
            }
            &Op::RmsNorm { x, weight, eps } => {
                let d = *node.value.shape().last().unwrap();
                let (xd, w) = (self.data(x), self.data(weight));
                let need_x = self.nodes[x.0].needs_grad;
                let mut gw_acc = vec![0.0f32; d];
                let mut gx_local = if need_x { vec![0.0f32; xd.len()] } else { Vec::new() };
                for (r, (xr, gr)) in xd.chunks(d).zip(g.chunks(d)).enumerate() {
                    let ms = xr.iter().map(|v| v * v).sum::<f32>() / d as f32;
                    let inv = 1.0 / (ms + eps).sqrt();
                    let mut dot = 0.0f32;
                    for j in 0..d {
                        let xhat = xr[j] * inv;
                        gw_acc[j] += gr[j] * xhat;
                        dot += gr[j] * w[j] * xhat;
                    }
                    if need_x {
                        let mean_dot = dot / d as f32;
                        let gxr = &mut gx_local[r * d..(r + 1) * d];
                        for j in 0..d {
                            gxr[j] = inv * (gr[j] * w[j] - xr[j] * inv * mean_dot);
                        }
                    }
                }
                if let Some(gx) = self.acc(grads, x) {
                    gx.iter_mut().zip(&gx_local).for_each(|(a, b)| *a += b);
                }
                if let Some(gw) = self.acc(grads, weight) {
                    gw.iter_mut().zip(&gw_acc).for_each(|(a, b)| *a += b);
                }
            }
            Op::Rope { x, table, offset } => {
                if let Some(gx) = self.acc(grads, *x) {
                    let s = node.value.shape();
                    let (t_len, d) = (s[2], s[3]);
                    let mut local = g.to_vec();
                    for (i, row) in local.chunks_mut(d).enumerate() {
                        table.rotate_back(row, offset + i % t_len);
                    }
                    gx.iter_mut().zip(&local).for_each(|(a, b)| *a += b);
                }
            }
            Op::Permute { x, perm } => {
                if let Some(gx) = self.acc(grads, *x) {
                    let back = permute_data(g, node.value.shape(), &inverse_perm(perm));
                    gx.iter_mut().zip(&back).for_each(|(a, b)| *a += b);
                }
            }
            &Op::Reshape(x) | &Op::StraightThrough(x) => {
                if let Some(gx) = self.acc(grads, x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
            &Op::RepeatHeads { x, groups } => {
                if let Some(gx) = self.acc(grads, x) {
                    let s = node.value.shape();
                    let inner = s[2] * s[3];
                    for (h, chunk) in g.chunks(inner).enumerate() {
                        let src = h / groups;
                        gx[src * inner..(src + 1) * inner].iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
                    }
                }
            }
            &Op::WindowBias { gate, window, groups } => {
                if let Some(gg) = self.acc(grads, gate) {
                    let s = self.shape(gate);
                    let (b, hkv, t) = (s[0], s[1], s[2]);
                    for bi in 0..b {
                        for kv in 0..hkv {
                            let grow = &mut gg[(bi * hkv + kv) * t..(bi * hkv + kv + 1) * t];
                            for qh in 0..groups {
                                let h = kv * groups + qh;
                                let plane = &g[(bi * hkv * groups + h) * t * t..(bi * hkv * groups + h + 1) * t * t];
                                for ti in window..t {
                                    let row = &plane[ti * t..ti * t + (ti + 1 - window)];
                                    grow[..row.len()].iter_mut().zip(row).for_each(|(a, b)| *a += b);
                                }
                            }
                        }
                    }
                }
            }
            &Op::Anneal { u, alpha, .. } => {
                if let Some(gu) = self.acc(grads, u) {
                    gu.iter_mut().zip(g).for_each(|(a, b)| *a += b * (1.0 - alpha));
                }
            }
            Op::OverrideHeads { x, overrides } => {
                if let Some(gx) = self.acc(grads, *x) {
                    let t = node.value.shape()[2];
                    for (i, (gr, row)) in gx.chunks_mut(t).zip(g.chunks(t)).enumerate() {
                        if overrides[i % overrides.len()].is_none() {
                            gr.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets, weights, total } => {
                if let Some(gl) = self.acc(grads, *logits) {
                    let v = *self.shape(*logits).last().unwrap();
                    let ld = self.data(*logits);
                    for (r, (&tgt, &w)) in targets.iter().zip(weights).enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        let row = &ld[r * v..(r + 1) * v];
                        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                        let sum: f32 = row.iter().map(|z| (z - max).exp()).sum();
                        let scale = g[0] * w / total;
                        let grow = &mut gl[r * v..(r + 1) * v];
                        for (j, (gj, z)) in grow.iter_mut().zip(row).enumerate() {
                            let p = (z - max).exp() / sum;
                            *gj += scale * (p - if j == tgt { 1.0 } else { 0.0 });
                        }
                    }
                }
            }
        }
    }
}

/// `-log softmax(row)[target]` with max subtraction.
pub fn row_nll(row: &[f32], target: usize) -> f32 {
    let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let lse = row.iter().map(|z| (z - max).exp()).sum::<f32>().ln() + max;
    lse - row[target]
}
