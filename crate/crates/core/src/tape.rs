//! A small reverse-mode differentiation tape over dense `f64` matrices.
//!
//! Every forward computation of the model records its operations here. Leaf
//! nodes are either constant inputs or references into a parameter slice;
//! [`Tape::backward`] accumulates parameter gradients into caller-owned
//! buffers laid out like that slice.

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Additive attention-logit offsets read from a learnable `[buckets, heads]`
/// table: logit `(r, l)` of head `h` gains `table[buckets[(r, l)], h]`.
#[derive(Debug, Clone)]
pub struct RelativeBias {
    pub table: Var,
    pub buckets: Array2<usize>,
}

#[derive(Debug)]
enum Op {
    Input,
    Param(usize),
    MatMul(Var, Var),
    Add(Var, Var),
    /// `a + b` with `b` a single row broadcast over `a`'s rows.
    AddRow(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    Swish(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        xhat: Array2<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        bias: Option<RelativeBias>,
        probs: Vec<Array2<f64>>,
    },
    Gather(Var, Vec<usize>),
    SliceRows(Var, usize),
    /// Rows flagged `true` were overwritten with a constant.
    MaskRows(Var, Vec<bool>),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Input | Op::Param(_) => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddRow(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::AddScalar(a) | Op::Swish(a) | Op::Gather(a, _) | Op::SliceRows(a, _) | Op::MaskRows(a, _) => {
                vec![*a]
            }
            Op::LayerNorm { x, gain, .. } => vec![*x, *gain],
            Op::Attention { q, k, v, bias, .. } => {
                let mut v = vec![*q, *k, *v];
                if let Some(b) = bias {
                    v.push(b.table);
                }
                v
            }
        }
    }
}

enum Value {
    Owned(Array2<f64>),
    Param(usize),
}

struct Node {
    value: Value,
    op: Op,
    requires_grad: bool,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub struct Tape<'p> {
    params: &'p [Array2<f64>],
    param_vars: Vec<Option<Var>>,
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p [Array2<f64>]) -> Self {
        Self {
            params,
            param_vars: vec![None; params.len()],
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> ArrayView2<'_, f64> {
        match &self.nodes[v.0].value {
            Value::Owned(a) => a.view(),
            Value::Param(id) => self.params[*id].view(),
        }
    }

    pub fn input(&mut self, value: Array2<f64>) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op: Op::Input,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// The leaf for parameter `id`; repeated calls return the same node.
    pub fn param(&mut self, id: usize) -> Var {
        if let Some(v) = self.param_vars[id] {
            return v;
        }
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param(id),
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = &self.value(a) + &self.value(b);
        self.push(out, Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1, "add_row expects a single row");
        let out = &self.value(a) + &self.value(row);
        self.push(out, Op::AddRow(a, row))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = &self.value(a) * &self.value(b);
        self.push(out, Op::Mul(a, b))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).mapv(|x| x + c);
        self.push(out, Op::AddScalar(a))
    }

    /// `x · sigmoid(x)` elementwise.
    pub fn swish(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x * sigmoid(x));
        self.push(out, Op::Swish(a))
    }

    /// `x W + b` for a weight `[in, out]` and bias row `[1, out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    /// Row-wise layer normalization with learnable gain and bias rows.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let cols = xv.ncols() as f64;
        let mut xhat = xv.to_owned();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / cols;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        let scaled = &xhat * &self.value(gain);
        let scaled = self.push(
            scaled,
            Op::LayerNorm {
                x,
                gain,
                xhat,
                inv_std,
            },
        );
        self.add_row(scaled, bias)
    }

    /// Multi-head scaled dot-product attention without projections:
    /// queries `[R, E]`, keys and values `[L, E]`, output `[R, E]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, bias: Option<RelativeBias>) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let width = qv.ncols();
        assert_eq!(width % heads, 0);
        assert_eq!(kv.nrows(), vv.nrows());
        let dh = width / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Array2::zeros((qv.nrows(), width));
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let mut logits = qv.slice(cols).dot(&kv.slice(cols).t()) * scale;
            if let Some(b) = &bias {
                let table = self.value(b.table);
                Zip::from(&mut logits)
                    .and(&b.buckets)
                    .for_each(|l, &bucket| *l += table[[bucket, h]]);
            }
            softmax_rows_inplace(&mut logits);
            out.slice_mut(cols).assign(&logits.dot(&vv.slice(cols)));
            probs.push(logits);
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                bias,
                probs,
            },
        )
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let out = self.value(a).select(Axis(0), rows);
        self.push(out, Op::Gather(a, rows.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice(s![start..start + len, ..]).to_owned();
        self.push(out, Op::SliceRows(a, start))
    }

    /// Overwrites masked rows with `fill`; they carry no gradient.
    pub fn mask_rows(&mut self, a: Var, mask: &[bool], fill: f64) -> Var {
        let mut out = self.value(a).to_owned();
        assert_eq!(out.nrows(), mask.len());
        for (mut row, &m) in out.rows_mut().into_iter().zip(mask) {
            if m {
                row.fill(fill);
            }
        }
        self.push(out, Op::MaskRows(a, mask.to_vec()))
    }

    /// Propagates `seeds` (node, d loss / d node) backwards and adds the
    /// resulting parameter gradients into `param_grads`.
    pub fn backward(&self, seeds: &[(Var, Array2<f64>)], param_grads: &mut [Array2<f64>]) {
        assert_eq!(param_grads.len(), self.params.len());
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            accumulate(&mut grads[v.0], g.view());
        }
        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.backward_node(node, g, &mut grads, param_grads);
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(
        &self,
        node: &Node,
        g: Array2<f64>,
        grads: &mut [Option<Array2<f64>>],
        param_grads: &mut [Array2<f64>],
    ) {
        match &node.op {
            Op::Input => {}
            Op::Param(id) => param_grads[*id] += &g,
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.dot(&self.value(*b).t()).view());
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], self.value(*a).t().dot(&g).view());
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.view());
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], g.view());
                }
            }
            Op::AddRow(a, b) => {
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], g.sum_axis(Axis(0)).insert_axis(Axis(0)).view());
                }
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.view());
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], (&g * &self.value(*b)).view());
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], (&g * &self.value(*a)).view());
                }
            }
            Op::AddScalar(a) => accumulate(&mut grads[a.0], g.view()),
            Op::Swish(a) => {
                let mut d = g;
                Zip::from(&mut d).and(self.value(*a)).for_each(|d, &x| {
                    let sg = sigmoid(x);
                    *d *= sg + x * sg * (1.0 - sg);
                });
                accumulate(&mut grads[a.0], d.view());
            }
            Op::LayerNorm { x, gain, xhat, inv_std } => {
                if self.wants(*gain) {
                    let dg = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads[gain.0], dg.view());
                }
                if self.wants(*x) {
                    let dxhat = &g * &self.value(*gain);
                    let cols = dxhat.ncols() as f64;
                    let mut dx = Array2::zeros(dxhat.raw_dim());
                    for (r, mut out) in dx.rows_mut().into_iter().enumerate() {
                        let dh = dxhat.row(r);
                        let xh = xhat.row(r);
                        let sum_d = dh.sum();
                        let sum_dx = dh.dot(&xh);
                        let is = inv_std[r];
                        Zip::from(&mut out)
                            .and(&dh)
                            .and(&xh)
                            .for_each(|o, &d, &xv| *o = is * (d - sum_d / cols - xv * sum_dx / cols));
                    }
                    accumulate(&mut grads[x.0], dx.view());
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                bias,
                probs,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let dh = qv.ncols() / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = Array2::zeros(qv.raw_dim());
                let mut dk = Array2::zeros(kv.raw_dim());
                let mut dv = Array2::zeros(vv.raw_dim());
                let mut dtable = bias.as_ref().map(|b| Array2::zeros(self.value(b.table).raw_dim()));
                for (h, p) in probs.iter().enumerate() {
                    let cols = s![.., h * dh..(h + 1) * dh];
                    let gh = g.slice(cols);
                    let dp = gh.dot(&vv.slice(cols).t());
                    dv.slice_mut(cols).assign(&p.t().dot(&gh));
                    let mut dlogits = p * &dp;
                    for (mut row, prow) in dlogits.rows_mut().into_iter().zip(p.rows()) {
                        let inner = row.sum();
                        Zip::from(&mut row).and(&prow).for_each(|d, &pv| *d -= pv * inner);
                    }
                    if let (Some(b), Some(dt)) = (bias, dtable.as_mut()) {
                        Zip::from(&dlogits)
                            .and(&b.buckets)
                            .for_each(|&d, &bucket| dt[[bucket, h]] += d);
                    }
                    dq.slice_mut(cols).assign(&(dlogits.dot(&kv.slice(cols)) * scale));
                    dk.slice_mut(cols).assign(&(dlogits.t().dot(&qv.slice(cols)) * scale));
                }
                if self.wants(*q) {
                    accumulate(&mut grads[q.0], dq.view());
                }
                if self.wants(*k) {
                    accumulate(&mut grads[k.0], dk.view());
                }
                if self.wants(*v) {
                    accumulate(&mut grads[v.0], dv.view());
                }
                if let (Some(b), Some(dt)) = (bias, dtable) {
                    if self.wants(b.table) {
                        accumulate(&mut grads[b.table.0], dt.view());
                    }
                }
            }
            Op::Gather(a, rows) => {
                let target = grads[a.0].get_or_insert_with(|| Array2::zeros(self.value(*a).raw_dim()));
                for (src, &dst) in rows.iter().enumerate() {
                    let mut t = target.row_mut(dst);
                    t += &g.row(src);
                }
            }
            Op::SliceRows(a, start) => {
                let target = grads[a.0].get_or_insert_with(|| Array2::zeros(self.value(*a).raw_dim()));
                let mut part = target.slice_mut(s![*start..*start + g.nrows(), ..]);
                part += &g;
            }
            Op::MaskRows(a, mask) => {
                let mut d = g;
                for (mut row, &m) in d.rows_mut().into_iter().zip(mask) {
                    if m {
                        row.fill(0.0);
                    }
                }
                accumulate(&mut grads[a.0], d.view());
            }
        }
    }
}

fn accumulate(slot: &mut Option<Array2<f64>>, g: ArrayView2<'_, f64>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g.to_owned()),
    }
}

/// Numerically stable softmax of each row, in place.
pub fn softmax_rows_inplace(a: &mut Array2<f64>) {
    for mut row in a.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}
