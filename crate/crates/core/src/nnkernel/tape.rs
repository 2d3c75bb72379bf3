use std::collections::BTreeMap;

use super::{ParamStore, Tensor};
use crate::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

/// Batch-norm statistics source.
#[derive(Clone, Copy, Debug)]
pub enum NormMode<'a> {
    /// Normalise with the batch's own statistics.
    Train,
    /// Normalise with frozen running statistics.
    Eval { mean: &'a [f64], var: &'a [f64] },
}

/// Per-channel batch statistics (biased variance) from a train-mode
/// batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Elements reduced per channel.
    pub count: usize,
}

pub const BN_EPSILON: f64 = 1e-5;

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        n: usize,
        p: usize,
        b_batched: bool,
    },
    VertexMix {
        adj: Var,
        x: Var,
    },
    TemporalConv {
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Relu(Var),
    Add(Var, Var),
    Scale(Var, f64),
    GlobalAvgPool(Var),
    Linear {
        x: Var,
        w: Var,
        bias: Var,
    },
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    /// Scalar loss whose gradient with respect to `input` was computed during
    /// the forward pass.
    Loss {
        input: Var,
        grad: Vec<f64>,
    },
    WeightedSum {
        x: Var,
        weights: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    param: Option<String>,
}

/// Records a forward computation for reverse-mode differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every tape value that needs one.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

fn dims4(t: &Tensor, op: &'static str) -> Result<[usize; 4]> {
    match *t.shape() {
        [b, c, tt, v] => Ok([b, c, tt, v]),
        ref s => Err(Error::shape(op, format!("expected [B, C, T, V], got {s:?}"))),
    }
}

fn axpy(dst: &mut [f64], a: f64, src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: op_name.to_string(),
            });
        }
        let needs_grad = inputs.iter().any(|&v| self.needs(v));
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a leaf. Gradients are tracked when `tensor.requires_grad`.
    pub fn leaf(&mut self, mut tensor: Tensor) -> Var {
        let needs_grad = tensor.requires_grad;
        tensor.grad = None;
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            needs_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant leaf (no gradient).
    pub fn constant(&mut self, mut tensor: Tensor) -> Var {
        tensor.requires_grad = false;
        self.leaf(tensor)
    }

    /// Records a named trainable parameter from `params`.
    pub fn param(&mut self, params: &ParamStore, name: &str) -> Result<Var> {
        let t = params
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
        let mut t = t.clone();
        t.requires_grad = true;
        let v = self.leaf(t);
        self.nodes[v.0].param = Some(name.to_string());
        Ok(v)
    }

    /// `a[.., m, n] @ b[.., n, p]`; `b` may also be a plain `[n, p]` matrix
    /// shared by every leading index of `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", format!("{sa:?} @ {sb:?}: rank < 2")));
        }
        let (m, n) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (n2, p) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let lead_a = &sa[..sa.len() - 2];
        let lead_b = &sb[..sb.len() - 2];
        let b_batched = !lead_b.is_empty();
        if n != n2 || (b_batched && lead_a != lead_b) {
            return Err(Error::shape("matmul", format!("{sa:?} @ {sb:?}")));
        }
        let batch: usize = lead_a.iter().product();
        let mut shape = lead_a.to_vec();
        shape.extend([m, p]);
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; batch * m * p];
        for bi in 0..batch {
            let a0 = &ad[bi * m * n..(bi + 1) * m * n];
            let b0 = if b_batched { &bd[bi * n * p..(bi + 1) * n * p] } else { bd };
            let o0 = &mut out[bi * m * p..(bi + 1) * m * p];
            for i in 0..m {
                for k in 0..n {
                    axpy(&mut o0[i * p..(i + 1) * p], a0[i * n + k], &b0[k * p..(k + 1) * p]);
                }
            }
        }
        let op = Op::MatMul {
            a,
            b,
            batch,
            m,
            n,
            p,
            b_batched,
        };
        self.push("matmul", Tensor::new(shape, out)?, op, &[a, b])
    }

    /// Mixes the vertex axis: `out[b, c, t, i] = Σ_j adj[i, j] x[b, c, t, j]`.
    pub fn vertex_mix(&mut self, adj: Var, x: Var) -> Result<Var> {
        let [bs, c, t, v] = dims4(self.value(x), "vertex_mix")?;
        if self.value(adj).shape() != [v, v] {
            return Err(Error::shape(
                "vertex_mix",
                format!("adjacency {:?} for {v} vertices", self.value(adj).shape()),
            ));
        }
        let a = self.value(adj).data();
        let xd = self.value(x).data();
        let mut out = vec![0.0; xd.len()];
        for (orow, xrow) in out.chunks_exact_mut(v).zip(xd.chunks_exact(v)) {
            for (i, o) in orow.iter_mut().enumerate() {
                *o = dot(&a[i * v..(i + 1) * v], xrow);
            }
        }
        let value = Tensor::new(vec![bs, c, t, v], out)?;
        self.push("vertex_mix", value, Op::VertexMix { adj, x }, &[adj, x])
    }

    /// Convolution along time with kernel `w[C_out, C_in, k, 1]`, zero
    /// padding `(k - 1) / 2` and the given stride. `k` must be odd.
    pub fn temporal_conv(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let [bs, cin, t, v] = dims4(self.value(x), "temporal_conv")?;
        let (cout, k) = match *self.value(w).shape() {
            [co, ci, k, 1] if ci == cin && k % 2 == 1 => (co, k),
            ref s => {
                return Err(Error::shape(
                    "temporal_conv",
                    format!("kernel {s:?} for input channels {cin} (odd temporal size required)"),
                ))
            }
        };
        if stride == 0 {
            return Err(Error::shape("temporal_conv", "stride must be positive"));
        }
        let pad = (k - 1) / 2;
        let tout = (t + 2 * pad - k) / stride + 1;
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let mut out = vec![0.0; bs * cout * tout * v];
        for b in 0..bs {
            for o in 0..cout {
                let ob = &mut out[(b * cout + o) * tout * v..(b * cout + o + 1) * tout * v];
                for c in 0..cin {
                    let xb = &xd[(b * cin + c) * t * v..(b * cin + c + 1) * t * v];
                    for j in 0..k {
                        let wv = wd[(o * cin + c) * k + j];
                        if wv == 0.0 {
                            continue;
                        }
                        conv_tap(ob, xb, wv, j, pad, stride, t, tout, v);
                    }
                }
            }
        }
        let value = Tensor::new(vec![bs, cout, tout, v], out)?;
        let op = Op::TemporalConv { x, w, stride, pad };
        self.push("temporal_conv", value, op, &[x, w])
    }

    /// Per-channel batch normalisation over `(B, T, V)` followed by the affine
    /// map `gamma * x̂ + beta`. Train mode also returns the batch statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: NormMode<'_>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let [bs, c, t, v] = dims4(self.value(x), "batch_norm")?;
        for (name, p) in [("gamma", gamma), ("beta", beta)] {
            if self.value(p).shape() != [c] {
                return Err(Error::shape(
                    "batch_norm",
                    format!("{name} {:?} for {c} channels", self.value(p).shape()),
                ));
            }
        }
        let xd = self.value(x).data();
        let plane = t * v;
        let count = bs * plane;
        let (mean, var, train) = match mode {
            NormMode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for b in 0..bs {
                        s += xd[(b * c + ch) * plane..(b * c + ch + 1) * plane].iter().sum::<f64>();
                    }
                    let mu = s / count as f64;
                    let mut ss = 0.0;
                    for b in 0..bs {
                        ss += xd[(b * c + ch) * plane..(b * c + ch + 1) * plane]
                            .iter()
                            .map(|x| (x - mu) * (x - mu))
                            .sum::<f64>();
                    }
                    mean[ch] = mu;
                    var[ch] = ss / count as f64;
                }
                (mean, var, true)
            }
            NormMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape("batch_norm", "running statistics length"));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for b in 0..bs {
            for ch in 0..c {
                let r = (b * c + ch) * plane..(b * c + ch + 1) * plane;
                for i in r {
                    let h = (xd[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = g[ch] * h + be[ch];
                }
            }
        }
        let value = Tensor::new(vec![bs, c, t, v], out)?;
        let stats = train.then(|| BatchStats {
            mean,
            var,
            count,
        });
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            train,
        };
        let out = self.push("batch_norm", value, op, &[x, gamma, beta])?;
        Ok((out, stats))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| v.max(0.0)).collect())?;
        self.push("relu", value, Op::Relu(x), &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("add", format!("{:?} + {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("add", value, Op::Add(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let t = self.value(x);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * factor).collect())?;
        self.push("scale", value, Op::Scale(x, factor), &[x])
    }

    /// Mean over time and vertices: `[B, C, T, V] -> [B, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [bs, c, t, v] = dims4(self.value(x), "global_avg_pool")?;
        let n = (t * v) as f64;
        let data = self
            .value(x)
            .data()
            .chunks_exact(t * v)
            .map(|p| p.iter().sum::<f64>() / n)
            .collect();
        let value = Tensor::new(vec![bs, c], data)?;
        self.push("global_avg_pool", value, Op::GlobalAvgPool(x), &[x])
    }

    /// `x[B, C] · wᵀ + bias` with `w[D, C]`, `bias[D]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let (bs, c) = match *self.value(x).shape() {
            [b, c] => (b, c),
            ref s => return Err(Error::shape("linear", format!("input {s:?}, expected [B, C]"))),
        };
        let d = match *self.value(w).shape() {
            [d, c2] if c2 == c => d,
            ref s => return Err(Error::shape("linear", format!("weight {s:?} for {c} inputs"))),
        };
        if self.value(bias).shape() != [d] {
            return Err(Error::shape("linear", format!("bias {:?}", self.value(bias).shape())));
        }
        let (xd, wd, bd) = (self.value(x).data(), self.value(w).data(), self.value(bias).data());
        let mut out = vec![0.0; bs * d];
        for b in 0..bs {
            let xr = &xd[b * c..(b + 1) * c];
            for o in 0..d {
                out[b * d + o] = dot(xr, &wd[o * c..(o + 1) * c]) + bd[o];
            }
        }
        let value = Tensor::new(vec![bs, d], out)?;
        self.push("linear", value, Op::Linear { x, w, bias }, &[x, w, bias])
    }

    /// Scales each row of `[B, D]` to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() != 2 {
            return Err(Error::shape("l2_normalize", format!("{:?}", t.shape())));
        }
        let d = t.shape()[1];
        let mut norms = Vec::with_capacity(t.shape()[0]);
        let mut out = Vec::with_capacity(t.numel());
        for row in t.data().chunks_exact(d) {
            let n = dot(row, row).sqrt();
            if n < 1e-12 {
                return Err(Error::NonFinite {
                    op: "l2_normalize (zero row)".into(),
                });
            }
            norms.push(n);
            out.extend(row.iter().map(|v| v / n));
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        self.push("l2_normalize", value, Op::L2Normalize { x, norms }, &[x])
    }

    /// Records a scalar loss computed outside the tape together with its
    /// gradient with respect to `input`.
    pub fn loss(&mut self, input: Var, value: f64, grad: Vec<f64>) -> Result<Var> {
        if grad.len() != self.value(input).numel() {
            return Err(Error::shape("loss", "gradient length differs from input"));
        }
        self.push("loss", Tensor::scalar(value), Op::Loss { input, grad }, &[input])
    }

    /// `Σ weights[i] * x[i]`; handy for reducing to a scalar in tests.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<f64>) -> Result<Var> {
        if weights.len() != self.value(x).numel() {
            return Err(Error::shape("weighted_sum", "weights length differs from input"));
        }
        let s = dot(self.value(x).data(), &weights);
        self.push("weighted_sum", Tensor::scalar(s), Op::WeightedSum { x, weights }, &[x])
    }

    /// Back-propagates from the scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).numel() != 1 {
            return Err(Error::shape("backward", "root must be a scalar"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                batch,
                m,
                n,
                p,
                b_batched,
            } => {
                let (ad, bd) = (self.value(a).data(), self.value(b).data());
                if self.needs(a) {
                    let ga = accumulate(grads, a, ad.len());
                    for bi in 0..batch {
                        let b0 = if b_batched { &bd[bi * n * p..(bi + 1) * n * p] } else { bd };
                        for i in 0..m {
                            let gr = &g[(bi * m + i) * p..(bi * m + i + 1) * p];
                            for k in 0..n {
                                ga[(bi * m + i) * n + k] += dot(gr, &b0[k * p..(k + 1) * p]);
                            }
                        }
                    }
                }
                if self.needs(b) {
                    let gb = accumulate(grads, b, bd.len());
                    for bi in 0..batch {
                        let off = if b_batched { bi * n * p } else { 0 };
                        for i in 0..m {
                            let gr = &g[(bi * m + i) * p..(bi * m + i + 1) * p];
                            for k in 0..n {
                                let av = ad[(bi * m + i) * n + k];
                                axpy(&mut gb[off + k * p..off + (k + 1) * p], av, gr);
                            }
                        }
                    }
                }
            }
            &Op::VertexMix { adj, x } => {
                let v = self.value(adj).shape()[0];
                let a = self.value(adj).data();
                if self.needs(x) {
                    let gx = accumulate(grads, x, g.len());
                    for (gxr, gr) in gx.chunks_exact_mut(v).zip(g.chunks_exact(v)) {
                        for (i, &gi) in gr.iter().enumerate() {
                            axpy(gxr, gi, &a[i * v..(i + 1) * v]);
                        }
                    }
                }
                if self.needs(adj) {
                    let xd = self.value(x).data();
                    let ga = accumulate(grads, adj, v * v);
                    for (xr, gr) in xd.chunks_exact(v).zip(g.chunks_exact(v)) {
                        for (i, &gi) in gr.iter().enumerate() {
                            axpy(&mut ga[i * v..(i + 1) * v], gi, xr);
                        }
                    }
                }
            }
            &Op::TemporalConv { x, w, stride, pad } => {
                let [bs, cin, t, v] = dims4(self.value(x), "").expect("checked in forward");
                let ws = self.value(w).shape();
                let (cout, k) = (ws[0], ws[2]);
                let tout = node.value.shape()[2];
                let xd = self.value(x).data();
                let wd = self.value(w).data();
                if self.needs(x) {
                    let gx = accumulate(grads, x, xd.len());
                    for b in 0..bs {
                        for o in 0..cout {
                            let gb = &g[(b * cout + o) * tout * v..(b * cout + o + 1) * tout * v];
                            for c in 0..cin {
                                let gxb = &mut gx[(b * cin + c) * t * v..(b * cin + c + 1) * t * v];
                                for j in 0..k {
                                    let wv = wd[(o * cin + c) * k + j];
                                    if wv != 0.0 {
                                        conv_tap_transpose(gxb, gb, wv, j, pad, stride, t, tout, v);
                                    }
                                }
                            }
                        }
                    }
                }
                if self.needs(w) {
                    let gw = accumulate(grads, w, wd.len());
                    for b in 0..bs {
                        for o in 0..cout {
                            let gb = &g[(b * cout + o) * tout * v..(b * cout + o + 1) * tout * v];
                            for c in 0..cin {
                                let xb = &xd[(b * cin + c) * t * v..(b * cin + c + 1) * t * v];
                                for j in 0..k {
                                    gw[(o * cin + c) * k + j] +=
                                        conv_tap_dot(gb, xb, j, pad, stride, t, tout, v);
                                }
                            }
                        }
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let [bs, c, t, v] = dims4(self.value(*x), "").expect("checked in forward");
                let plane = t * v;
                let count = (bs * plane) as f64;
                let gam = self.value(*gamma).data();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for b in 0..bs {
                    for ch in 0..c {
                        let r = (b * c + ch) * plane..(b * c + ch + 1) * plane;
                        sum_g[ch] += g[r.clone()].iter().sum::<f64>();
                        sum_gx[ch] += dot(&g[r.clone()], &xhat[r]);
                    }
                }
                if self.needs(*x) {
                    let gx = accumulate(grads, *x, g.len());
                    for b in 0..bs {
                        for ch in 0..c {
                            let scale = gam[ch] * inv_std[ch];
                            for i in (b * c + ch) * plane..(b * c + ch + 1) * plane {
                                gx[i] += if *train {
                                    scale * (g[i] - sum_g[ch] / count - xhat[i] * sum_gx[ch] / count)
                                } else {
                                    scale * g[i]
                                };
                            }
                        }
                    }
                }
                if self.needs(*gamma) {
                    let gg = accumulate(grads, *gamma, c);
                    for ch in 0..c {
                        gg[ch] += sum_gx[ch];
                    }
                }
                if self.needs(*beta) {
                    let gb = accumulate(grads, *beta, c);
                    for ch in 0..c {
                        gb[ch] += sum_g[ch];
                    }
                }
            }
            &Op::Relu(x) => {
                let out = node.value.data();
                let gx = accumulate(grads, x, g.len());
                for ((d, &gi), &o) in gx.iter_mut().zip(g).zip(out) {
                    if o > 0.0 {
                        *d += gi;
                    }
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if self.needs(v) {
                        axpy(accumulate(grads, v, g.len()), 1.0, g);
                    }
                }
            }
            &Op::Scale(x, factor) => axpy(accumulate(grads, x, g.len()), factor, g),
            &Op::GlobalAvgPool(x) => {
                let s = self.value(x).shape();
                let plane = s[2] * s[3];
                let gx = accumulate(grads, x, g.len() * plane);
                for (chunk, &gi) in gx.chunks_exact_mut(plane).zip(g) {
                    let share = gi / plane as f64;
                    chunk.iter_mut().for_each(|d| *d += share);
                }
            }
            &Op::Linear { x, w, bias } => {
                let (bs, c) = (self.value(x).shape()[0], self.value(x).shape()[1]);
                let d = self.value(w).shape()[0];
                let (xd, wd) = (self.value(x).data(), self.value(w).data());
                if self.needs(x) {
                    let gx = accumulate(grads, x, xd.len());
                    for b in 0..bs {
                        for o in 0..d {
                            axpy(&mut gx[b * c..(b + 1) * c], g[b * d + o], &wd[o * c..(o + 1) * c]);
                        }
                    }
                }
                if self.needs(w) {
                    let gw = accumulate(grads, w, wd.len());
                    for b in 0..bs {
                        for o in 0..d {
                            axpy(&mut gw[o * c..(o + 1) * c], g[b * d + o], &xd[b * c..(b + 1) * c]);
                        }
                    }
                }
                if self.needs(bias) {
                    let gb = accumulate(grads, bias, d);
                    for b in 0..bs {
                        axpy(gb, 1.0, &g[b * d..(b + 1) * d]);
                    }
                }
            }
            Op::L2Normalize { x, norms } => {
                let y = node.value.data();
                let d = node.value.shape()[1];
                let gx = accumulate(grads, *x, g.len());
                for (b, &n) in norms.iter().enumerate() {
                    let r = b * d..(b + 1) * d;
                    let yg = dot(&y[r.clone()], &g[r.clone()]);
                    for i in r {
                        gx[i] += (g[i] - y[i] * yg) / n;
                    }
                }
            }
            Op::Loss { input, grad } => axpy(accumulate(grads, *input, grad.len()), g[0], grad),
            Op::WeightedSum { x, weights } => {
                axpy(accumulate(grads, *x, weights.len()), g[0], weights)
            }
        }
    }

    /// Copies parameter gradients into the matching tensors of `params`.
    pub fn write_param_grads(&self, grads: &Gradients, params: &mut ParamStore) {
        for (i, node) in self.nodes.iter().enumerate() {
            let Some(name) = &node.param else { continue };
            let Some(t) = params.get_mut(name) else { continue };
            let g = grads.grads[i]
                .clone()
                .unwrap_or_else(|| vec![0.0; node.value.numel()]);
            match &mut t.grad {
                Some(existing) => axpy(existing, 1.0, &g),
                slot => *slot = Some(g),
            }
        }
    }

    /// Parameter gradients keyed by name.
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, Vec<f64>> {
        let mut out: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Some(name), Some(g)) = (&node.param, &grads.grads[i]) {
                match out.get_mut(name) {
                    Some(acc) => axpy(acc, 1.0, g),
                    None => {
                        out.insert(name.clone(), g.clone());
                    }
                }
            }
        }
        out
    }
}

/// Input rows `[lo, hi)` of output frames that tap `j` reads in range.
#[inline]
fn tap_range(j: usize, pad: usize, stride: usize, t: usize, tout: usize) -> (usize, usize) {
    // input frame = to * stride + j - pad must lie in [0, t)
    let lo = if j >= pad { 0 } else { (pad - j).div_ceil(stride) };
    let hi = if t + pad > j {
        ((t + pad - j - 1) / stride + 1).min(tout)
    } else {
        0
    };
    (lo, hi.max(lo))
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn conv_tap(out: &mut [f64], x: &[f64], w: f64, j: usize, pad: usize, stride: usize, t: usize, tout: usize, v: usize) {
    let (lo, hi) = tap_range(j, pad, stride, t, tout);
    if stride == 1 {
        let ti = lo + j - pad;
        axpy(&mut out[lo * v..hi * v], w, &x[ti * v..(ti + hi - lo) * v]);
    } else {
        for to in lo..hi {
            let ti = to * stride + j - pad;
            axpy(&mut out[to * v..(to + 1) * v], w, &x[ti * v..(ti + 1) * v]);
        }
    }
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn conv_tap_transpose(gx: &mut [f64], g: &[f64], w: f64, j: usize, pad: usize, stride: usize, t: usize, tout: usize, v: usize) {
    let (lo, hi) = tap_range(j, pad, stride, t, tout);
    if stride == 1 {
        let ti = lo + j - pad;
        axpy(&mut gx[ti * v..(ti + hi - lo) * v], w, &g[lo * v..hi * v]);
    } else {
        for to in lo..hi {
            let ti = to * stride + j - pad;
            axpy(&mut gx[ti * v..(ti + 1) * v], w, &g[to * v..(to + 1) * v]);
        }
    }
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn conv_tap_dot(g: &[f64], x: &[f64], j: usize, pad: usize, stride: usize, t: usize, tout: usize, v: usize) -> f64 {
    let (lo, hi) = tap_range(j, pad, stride, t, tout);
    if stride == 1 {
        let ti = lo + j - pad;
        dot(&g[lo * v..hi * v], &x[ti * v..(ti + hi - lo) * v])
    } else {
        (lo..hi)
            .map(|to| {
                let ti = to * stride + j - pad;
                dot(&g[to * v..(to + 1) * v], &x[ti * v..(ti + 1) * v])
            })
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_example() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn tap_ranges_cover_valid_frames() {
        for t in 1..12 {
            for k in [1usize, 3, 5, 9] {
                let pad = (k - 1) / 2;
                for stride in 1..4 {
                    if t + 2 * pad < k {
                        continue;
                    }
                    let tout = (t + 2 * pad - k) / stride + 1;
                    for j in 0..k {
                        let (lo, hi) = tap_range(j, pad, stride, t, tout);
                        let brute: Vec<usize> = (0..tout)
                            .filter(|&to| {
                                let ti = (to * stride + j) as isize - pad as isize;
                                ti >= 0 && (ti as usize) < t
                            })
                            .collect();
                        let got: Vec<usize> = (lo..hi).collect();
                        assert_eq!(got, brute, "t={t} k={k} s={stride} j={j}");
                    }
                }
            }
        }
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        match tape.matmul(a, b) {
            Err(Error::ShapeMismatch { op, .. }) => assert_eq!(op, "matmul"),
            other => panic!("{:?}", other.map(|_| ())),
        }
        let x = tape.constant(Tensor::zeros(&[1, 2, 5, 3]));
        let w = tape.constant(Tensor::zeros(&[4, 2, 2, 1]));
        assert!(tape.temporal_conv(x, w, 1).is_err());
    }

    #[test]
    fn non_finite_is_detected() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2], vec![1.0, f64::MAX]).unwrap());
        assert!(matches!(tape.scale(x, 10.0), Err(Error::NonFinite { .. })));
    }
}
