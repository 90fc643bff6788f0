use std::sync::Arc;

use super::tensor::gemm;
use super::{DiffError, Tensor};

/// Row index that gathers an all-zero row (used for padding).
pub const ZERO_ROW: usize = usize::MAX;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A primitive whose forward value is computed by the caller and whose
/// backward rule is supplied here.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    /// Gradient contribution for each input, in input order. `None` means
    /// the input receives nothing from this op.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, upstream: &Tensor) -> Vec<Option<Tensor>>;
}

enum Op {
    Leaf,
    /// Forward-only result (sign, stop-gradient, constants derived from values).
    Detached,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddTiled(Var, Var),
    MulTiled(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Relu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    GatherRows {
        x: Var,
        index: Arc<[usize]>,
    },
    SumAll(Var),
    MeanAll(Var),
    SumLast(Var),
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run tape. Every method records one primitive in topological
/// order; [`Graph::backward`] replays the tape in reverse.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every leaf that requires them.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

type Res = Result<Var, DiffError>;

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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// `a·b` for 2-D operands, or batched over a shared leading axis for 3-D.
    pub fn matmul(&mut self, a: Var, b: Var) -> Res {
        self.matmul_impl(a, b, false)
    }

    /// `a·bᵀ` over the last two axes.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Res {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Res {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, m, ka, kb, n) = match (sa.len(), sb.len()) {
            (2, 2) => {
                let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
                (1, sa[0], sa[1], kb, n)
            }
            (3, 3) if sa[0] == sb[0] => {
                let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
                (sa[0], sa[1], sa[2], kb, n)
            }
            _ => {
                return Err(DiffError::shape(
                    "matmul",
                    format!("incompatible ranks {sa:?} x {sb:?}"),
                ))
            }
        };
        if ka != kb {
            return Err(DiffError::shape(
                "matmul",
                format!("inner dims differ: {sa:?} x {sb:?} (trans_b={trans_b})"),
            ));
        }
        let k = ka;
        let mut out = vec![0.0; batch * m * n];
        let (da, db) = (self.data(a), self.data(b));
        let b_strides = if trans_b { (1, k) } else { (n, 1) };
        for g in 0..batch {
            gemm(
                m,
                k,
                n,
                &da[g * m * k..(g + 1) * m * k],
                (k, 1),
                &db[g * k * n..(g + 1) * k * n],
                b_strides,
                0.0,
                &mut out[g * m * n..(g + 1) * m * n],
            );
        }
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::MatMul {
                a,
                b,
                trans_b,
                batch,
                m,
                k,
                n,
            },
            rg,
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), DiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(DiffError::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor, DiffError> {
        self.same_shape(op, a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(self.shape(a).to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Res {
        let t = self.zip("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Res {
        let t = self.zip("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Res {
        let t = self.zip("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    fn check_tiled(&self, op: &'static str, a: Var, b: Var) -> Result<(), DiffError> {
        let (la, lb) = (self.value(a).len(), self.value(b).len());
        if lb == 0 || la % lb != 0 || self.value(a).last_dim() != self.value(b).last_dim() {
            return Err(DiffError::shape(
                op,
                format!("cannot tile {:?} over {:?}", self.shape(b), self.shape(a)),
            ));
        }
        Ok(())
    }

    /// `a + b` with `b` repeated along the leading axes of `a` (bias add).
    pub fn add_tiled(&mut self, a: Var, b: Var) -> Res {
        self.check_tiled("add_tiled", a, b)?;
        let bd = self.data(b);
        let data = self
            .data(a)
            .chunks(bd.len())
            .flat_map(|row| row.iter().zip(bd).map(|(x, y)| x + y))
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::AddTiled(a, b), rg))
    }

    /// `a * b` with `b` repeated along the leading axes of `a`.
    pub fn mul_tiled(&mut self, a: Var, b: Var) -> Res {
        self.check_tiled("mul_tiled", a, b)?;
        let bd = self.data(b);
        let data = self
            .data(a)
            .chunks(bd.len())
            .flat_map(|row| row.iter().zip(bd).map(|(x, y)| x * y))
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::MulTiled(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data = self.data(a).iter().map(|x| x * c).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, c), rg)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let data = self.data(a).iter().map(|&x| f(x)).collect();
        Tensor::new(self.shape(a).to_vec(), data).expect("same shape")
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.map(a, f64::tanh);
        let rg = self.rg(&[a]);
        self.push(t, Op::Tanh(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.map(a, |x| x.max(0.0));
        let rg = self.rg(&[a]);
        self.push(t, Op::Relu(a), rg)
    }

    /// `+1` where `x >= 0`, `-1` elsewhere. Carries no gradient.
    pub fn sign(&mut self, a: Var) -> Var {
        let t = self.map(a, |x| if x >= 0.0 { 1.0 } else { -1.0 });
        self.push(t, Op::Detached, false)
    }

    /// Identity forward, zero backward.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let t = self.value(a).clone();
        self.push(t, Op::Detached, false)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let d = self.value(a).last_dim();
        let mut data = self.data(a).to_vec();
        for row in data.chunks_mut(d) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let t = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(t, Op::Softmax(a), rg)
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies
    /// `gamma * x + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Res {
        let d = self.value(x).last_dim();
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(DiffError::shape(
                "layer_norm",
                format!(
                    "affine params {:?}/{:?} do not match feature dim {d}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let (gd, bd) = (self.data(gamma), self.data(beta));
        let xd = self.data(x);
        let rows = xd.len() / d;
        let mut xhat = vec![0.0; xd.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gd[j] + bd[j];
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            t,
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

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Res {
        let t = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Res {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm
                .iter()
                .any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(DiffError::shape(
                "permute",
                format!("{perm:?} is not a permutation of {} axes", shape.len()),
            ));
        }
        let (out_shape, data) = permute_data(&shape, self.data(a), perm);
        let t = Tensor::new(out_shape, data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(
            t,
            Op::Permute {
                x: a,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    /// Joins tensors along `axis`; all other axes must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Res {
        let first = match inputs.first() {
            Some(v) => self.shape(*v).to_vec(),
            None => return Err(DiffError::shape("concat", "no inputs".into())),
        };
        if axis >= first.len() {
            return Err(DiffError::shape(
                "concat",
                format!("axis {axis} out of range for {first:?}"),
            ));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            let compatible =
                s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(DiffError::shape(
                    "concat",
                    format!("{s:?} vs {first:?} along axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let chunk = self.shape(*v)[axis] * inner;
                data.extend_from_slice(&self.data(*v)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let t = Tensor::new(shape, data)?;
        let rg = self.rg(inputs);
        Ok(self.push(
            t,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Slice `start..start + len` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Res {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(DiffError::shape(
                "narrow",
                format!("{start}..{} along axis {axis} of {shape:?}", start + len),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * len * inner);
        let src = self.data(a);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let t = Tensor::new(out_shape, data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Narrow { x: a, axis, start }, rg))
    }

    /// Row gather over the last axis: output row `i` is input row `index[i]`,
    /// or zeros for [`ZERO_ROW`]. The backward pass scatter-adds.
    pub fn gather_rows(&mut self, a: Var, index: Arc<[usize]>) -> Res {
        let c = self.value(a).last_dim();
        let rows = self.value(a).len() / c.max(1);
        if let Some(bad) = index.iter().find(|&&i| i != ZERO_ROW && i >= rows) {
            return Err(DiffError::shape(
                "gather_rows",
                format!("row {bad} out of range for {rows} rows"),
            ));
        }
        let src = self.data(a);
        let mut data = vec![0.0; index.len() * c];
        for (dst, &i) in data.chunks_mut(c).zip(index.iter()) {
            if i != ZERO_ROW {
                dst.copy_from_slice(&src[i * c..(i + 1) * c]);
            }
        }
        let t = Tensor::new(vec![index.len(), c], data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::GatherRows { x: a, index }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.data(a).iter().sum::<f64>() / n;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::MeanAll(a), rg)
    }

    /// Sum over the last axis, dropping it.
    pub fn sum_last(&mut self, a: Var) -> Var {
        let d = self.value(a).last_dim().max(1);
        let data: Vec<f64> = self.data(a).chunks(d).map(|r| r.iter().sum()).collect();
        let mut shape = self.shape(a).to_vec();
        shape.pop();
        let t = Tensor::new(shape, data).expect("row count");
        let rg = self.rg(&[a]);
        self.push(t, Op::SumLast(a), rg)
    }

    /// Records a primitive whose forward `value` the caller computed.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, op: Box<dyn CustomOp>) -> Var {
        let rg = self.rg(inputs);
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            rg,
        )
    }

    /// Reverse sweep from a scalar `loss`. Gradients are returned for every
    /// leaf that requires them; leaves behind `stop_gradient` get none.
    pub fn backward(&self, loss: Var) -> Result<Gradients, DiffError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(DiffError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        let mut leaves: Vec<Option<Tensor>> = Vec::new();
        leaves.resize_with(self.nodes.len(), || None);
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(node, &g, &mut grads)?;
            if matches!(node.op, Op::Leaf) {
                leaves[i] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
            }
        }
        Ok(Gradients { grads: leaves })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<(), DiffError> {
        match &node.op {
            Op::Leaf | Op::Detached => {}
            Op::MatMul {
                a,
                b,
                trans_b,
                batch,
                m,
                k,
                n,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let (ad, bd) = (self.data(*a), self.data(*b));
                if let Some(ga) = self.slot(grads, *a) {
                    for bt in 0..*batch {
                        let gc = &g[bt * m * n..(bt + 1) * m * n];
                        let bb = &bd[bt * k * n..(bt + 1) * k * n];
                        let out = &mut ga[bt * m * k..(bt + 1) * m * k];
                        if *trans_b {
                            gemm(m, n, k, gc, (n, 1), bb, (k, 1), 1.0, out);
                        } else {
                            gemm(m, n, k, gc, (n, 1), bb, (1, n), 1.0, out);
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for bt in 0..*batch {
                        let gc = &g[bt * m * n..(bt + 1) * m * n];
                        let aa = &ad[bt * m * k..(bt + 1) * m * k];
                        let out = &mut gb[bt * k * n..(bt + 1) * k * n];
                        if *trans_b {
                            gemm(n, m, k, gc, (1, n), aa, (k, 1), 1.0, out);
                        } else {
                            gemm(k, m, n, aa, (1, k), gc, (n, 1), 1.0, out);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    axpy(ga, g, 1.0);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    axpy(gb, g, 1.0);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    axpy(ga, g, 1.0);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    axpy(gb, g, -1.0);
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                if let Some(ga) = self.slot(grads, *a) {
                    for ((o, gi), y) in ga.iter_mut().zip(g).zip(bd) {
                        *o += gi * y;
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for ((o, gi), x) in gb.iter_mut().zip(g).zip(ad) {
                        *o += gi * x;
                    }
                }
            }
            Op::AddTiled(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    axpy(ga, g, 1.0);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    let w = gb.len();
                    for chunk in g.chunks(w) {
                        axpy(gb, chunk, 1.0);
                    }
                }
            }
            Op::MulTiled(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                let w = bd.len();
                if let Some(ga) = self.slot(grads, *a) {
                    for (o, gc) in ga.chunks_mut(w).zip(g.chunks(w)) {
                        for ((oi, gi), y) in o.iter_mut().zip(gc).zip(bd) {
                            *oi += gi * y;
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for (gc, xc) in g.chunks(w).zip(ad.chunks(w)) {
                        for ((oi, gi), x) in gb.iter_mut().zip(gc).zip(xc) {
                            *oi += gi * x;
                        }
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.slot(grads, *a) {
                    axpy(ga, g, *c);
                }
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                if let Some(ga) = self.slot(grads, *a) {
                    for ((o, gi), yi) in ga.iter_mut().zip(g).zip(y) {
                        *o += gi * (1.0 - yi * yi);
                    }
                }
            }
            Op::Relu(a) => {
                let x = self.data(*a);
                if let Some(ga) = self.slot(grads, *a) {
                    for ((o, gi), xi) in ga.iter_mut().zip(g).zip(x) {
                        if *xi > 0.0 {
                            *o += gi;
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let d = node.value.last_dim();
                if let Some(ga) = self.slot(grads, *a) {
                    for ((o, gr), yr) in ga.chunks_mut(d).zip(g.chunks(d)).zip(y.chunks(d)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((oi, gi), yi) in o.iter_mut().zip(gr).zip(yr) {
                            *oi += yi * (gi - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = node.value.last_dim();
                let gd = self.data(*gamma);
                if let Some(gg) = self.slot(grads, *gamma) {
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for ((o, gi), hi) in gg.iter_mut().zip(gr).zip(hr) {
                            *o += gi * hi;
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *beta) {
                    for gr in g.chunks(d) {
                        axpy(gb, gr, 1.0);
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    let mut dh = vec![0.0; d];
                    for (r, ((o, gr), hr)) in gx.chunks_mut(d).zip(g.chunks(d)).zip(xhat.chunks(d)).enumerate() {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..d {
                            dh[j] = gr[j] * gd[j];
                            s1 += dh[j];
                            s2 += dh[j] * hr[j];
                        }
                        let scale = rstd[r] / d as f64;
                        for j in 0..d {
                            o[j] += scale * (d as f64 * dh[j] - s1 - hr[j] * s2);
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    axpy(ga, g, 1.0);
                }
            }
            Op::Permute { x, perm } => {
                if let Some(gx) = self.slot(grads, *x) {
                    let mut inverse = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inverse[p] = i;
                    }
                    let (_, back) = permute_data(node.value.shape(), g, &inverse);
                    axpy(gx, &back, 1.0);
                }
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for v in inputs {
                    let chunk = self.shape(*v)[*axis] * inner;
                    if let Some(gv) = self.slot(grads, *v) {
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + chunk];
                            axpy(&mut gv[o * chunk..(o + 1) * chunk], src, 1.0);
                        }
                    }
                    offset += chunk;
                }
            }
            Op::Narrow { x, axis, start } => {
                let in_shape = self.shape(*x).to_vec();
                let len = node.value.shape()[*axis];
                let outer: usize = in_shape[..*axis].iter().product();
                let inner: usize = in_shape[axis + 1..].iter().product();
                if let Some(gx) = self.slot(grads, *x) {
                    for o in 0..outer {
                        let base = (o * in_shape[*axis] + start) * inner;
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        axpy(&mut gx[base..base + len * inner], src, 1.0);
                    }
                }
            }
            Op::GatherRows { x, index } => {
                let c = node.value.last_dim();
                if let Some(gx) = self.slot(grads, *x) {
                    for (src, &i) in g.chunks(c).zip(index.iter()) {
                        if i != ZERO_ROW {
                            axpy(&mut gx[i * c..(i + 1) * c], src, 1.0);
                        }
                    }
                }
            }
            Op::SumAll(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::MeanAll(a) => {
                let n = self.value(*a).len().max(1) as f64;
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().for_each(|o| *o += g[0] / n);
                }
            }
            Op::SumLast(a) => {
                let d = self.value(*a).last_dim().max(1);
                if let Some(ga) = self.slot(grads, *a) {
                    for (row, gi) in ga.chunks_mut(d).zip(g) {
                        row.iter_mut().for_each(|o| *o += gi);
                    }
                }
            }
            Op::Custom { inputs, op } => {
                let in_vals: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                let upstream = Tensor::new(node.value.shape().to_vec(), g.to_vec())?;
                let contributions = op.backward(&in_vals, &node.value, &upstream);
                for (v, c) in inputs.iter().zip(contributions) {
                    let Some(c) = c else { continue };
                    if c.len() != self.value(*v).len() {
                        return Err(DiffError::shape(
                            op.name(),
                            format!("backward produced {:?} for input {:?}", c.shape(), self.shape(*v)),
                        ));
                    }
                    if let Some(gv) = self.slot(grads, *v) {
                        axpy(gv, c.data(), 1.0);
                    }
                }
            }
        }
        Ok(())
    }
}

fn axpy(dst: &mut [f64], src: &[f64], alpha: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

fn permute_data(shape: &[usize], data: &[f64], perm: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = data.len();
    let mut out = Vec::with_capacity(total);
    if rank == 0 {
        out.extend_from_slice(data);
        return (out_shape, out);
    }
    // Innermost axis copied in a tight loop; outer axes advance an odometer.
    let last = rank - 1;
    let (inner_len, inner_stride) = (out_shape[last], strides[last]);
    let mut counter = vec![0usize; rank];
    let mut base = 0usize;
    while out.len() < total {
        for j in 0..inner_len {
            out.push(data[base + j * inner_stride]);
        }
        let mut axis = last;
        loop {
            if axis == 0 {
                return (out_shape, out);
            }
            axis -= 1;
            counter[axis] += 1;
            base += strides[axis];
            if counter[axis] < out_shape[axis] {
                break;
            }
            base -= strides[axis] * out_shape[axis];
            counter[axis] = 0;
        }
    }
    (out_shape, out)
}
