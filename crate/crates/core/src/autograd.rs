//! A small tape for reverse-mode differentiation over dense `f64` tensors.
//!
//! Each operation appends a node holding its forward value; [`Graph::backward`]
//! walks the tape in reverse and accumulates parameter gradients into a flat
//! vector. Only the layers the denoiser needs are provided, each with a
//! hand-derived vector-Jacobian product.

use crate::denoiser::SegmentMask;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param {
        offset: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv3x3 {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
    },
    Add(Var, Var),
    Silu(Var),
    Film {
        x: Var,
        m: Var,
    },
    Upsample2(Var),
    Attention(Box<AttentionOp>),
    MeanSquare {
        pred: Var,
        target: Vec<f64>,
    },
}

#[derive(Debug)]
struct AttentionOp {
    h: Var,
    k: Var,
    v: Var,
    wq: Var,
    wo: Var,
    query_pe: Vec<f64>,
    mask: SegmentMask,
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn dims3(shape: &[usize]) -> (usize, usize, usize) {
    match *shape {
        [c, h, w] => (c, h, w),
        _ => panic!("expected a rank-3 tensor, got {shape:?}"),
    }
}

/// Rows and columns of a linear-layer input; vectors count as one row.
fn dims_rows(shape: &[usize]) -> (usize, usize) {
    match *shape {
        [d] => (1, d),
        [n, d] => (n, d),
        _ => panic!("expected a vector or matrix, got {shape:?}"),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let requires_grad =
            matches!(op, Op::Param { .. }) || inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::from_vec(self.shape(v), self.value(v).to_vec()).expect("node shape")
    }

    pub fn input(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Input, &[])
    }

    /// A trainable tensor whose gradient lands at `offset` in the flat
    /// gradient vector.
    pub fn param(&mut self, values: &[f64], offset: usize, shape: &[usize]) -> Var {
        self.push(shape.to_vec(), values.to_vec(), Op::Param { offset }, &[])
    }

    /// `x @ w + b` with `x: n x din` (or a `din` vector), `w: din x dout`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (n, din) = dims_rows(self.shape(x));
        let (wi, dout) = dims_rows(self.shape(w));
        assert_eq!(wi, din, "linear: input width {din} vs weight rows {wi}");
        let xv = self.value(x);
        let wv = self.value(w);
        let mut out = vec![0.0; n * dout];
        for r in 0..n {
            let o = &mut out[r * dout..(r + 1) * dout];
            if let Some(b) = b {
                o.copy_from_slice(self.value(b));
            }
            for i in 0..din {
                let xi = xv[r * din + i];
                let wrow = &wv[i * dout..(i + 1) * dout];
                for (oj, &wij) in o.iter_mut().zip(wrow) {
                    *oj += xi * wij;
                }
            }
        }
        let shape = if self.shape(x).len() == 1 {
            vec![dout]
        } else {
            vec![n, dout]
        };
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(shape, out, Op::Linear { x, w, b }, &inputs)
    }

    /// 3x3 convolution with zero padding 1 over a `channels x height x width`
    /// map. Weights are `out x in x 3 x 3`.
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Var {
        assert!(stride == 1 || stride == 2);
        let (ci, h, wd) = dims3(self.shape(x));
        let co = self.shape(w)[0];
        assert_eq!(self.shape(w), &[co, ci, 3, 3], "conv weight shape");
        let ho = (h - 1) / stride + 1;
        let wo = (wd - 1) / stride + 1;
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(b);
        let mut out = vec![0.0; co * ho * wo];
        for o in 0..co {
            let plane = &mut out[o * ho * wo..(o + 1) * ho * wo];
            plane.fill(bv[o]);
            for i in 0..ci {
                let src = &xv[i * h * wd..(i + 1) * h * wd];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let wt = wv[((o * ci + i) * 3 + ky) * 3 + kx];
                        conv_tap(src, plane, h, wd, ho, wo, ky, kx, stride, wt);
                    }
                }
            }
        }
        self.push(vec![co, ho, wo], out, Op::Conv3x3 { x, w, b, stride }, &[x, w, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        self.push(self.shape(a).to_vec(), out, Op::Add(a, b), &[a, b])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| x * sigmoid(x)).collect();
        self.push(self.shape(a).to_vec(), out, Op::Silu(a), &[a])
    }

    /// Feature-wise modulation `x * (1 + scale) + shift` of a
    /// `channels x h x w` map, where `m = [scale; shift]` has `2 * channels`
    /// entries.
    pub fn film(&mut self, x: Var, m: Var) -> Var {
        let (c, h, w) = dims3(self.shape(x));
        assert_eq!(self.value(m).len(), 2 * c, "film: modulation width");
        let plane = h * w;
        let mv = self.value(m);
        let mut out = self.value(x).to_vec();
        for ch in 0..c {
            let (s, t) = (1.0 + mv[ch], mv[c + ch]);
            for v in &mut out[ch * plane..(ch + 1) * plane] {
                *v = *v * s + t;
            }
        }
        self.push(vec![c, h, w], out, Op::Film { x, m }, &[x, m])
    }

    /// Nearest-neighbour 2x upsampling of both spatial axes.
    pub fn upsample2(&mut self, a: Var) -> Var {
        let (c, h, w) = dims3(self.shape(a));
        let av = self.value(a);
        let mut out = vec![0.0; c * 4 * h * w];
        for ch in 0..c {
            for y in 0..2 * h {
                for x in 0..2 * w {
                    out[(ch * 2 * h + y) * 2 * w + x] = av[(ch * h + y / 2) * w + x / 2];
                }
            }
        }
        self.push(vec![c, 2 * h, 2 * w], out, Op::Upsample2(a), &[a])
    }

    /// Masked cross-attention from every cell of a `channels x time x pitch`
    /// map to a `time`-long key/value sequence, added back residually.
    ///
    /// The query of cell `(s, p)` is `(h[:, s, p] + query_pe[s]) @ wq`; it sees
    /// only the keys in `mask.block_range(s)`. Keys outside the block get
    /// weight exactly zero, the same as a `-inf` logit.
    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        &mut self,
        h: Var,
        k: Var,
        v: Var,
        wq: Var,
        wo: Var,
        query_pe: Vec<f64>,
        mask: SegmentMask,
    ) -> Var {
        let (c, s, p) = dims3(self.shape(h));
        let (ks, dk) = dims_rows(self.shape(k));
        let (vs, dv) = dims_rows(self.shape(v));
        assert_eq!((ks, vs, mask.size()), (s, s, s), "attention: sequence lengths");
        assert_eq!(self.shape(wq), &[c, dk]);
        assert_eq!(self.shape(wo), &[dv, c]);
        assert!(query_pe.is_empty() || query_pe.len() == s * c);
        let op = AttentionOp {
            h,
            k,
            v,
            wq,
            wo,
            query_pe,
            mask,
        };
        let mut out = self.value(h).to_vec();
        let mut scratch = AttnScratch::new(c, dk, dv, op.mask.k());
        for si in 0..s {
            for pi in 0..p {
                self.attend_cell(&op, si, pi, &mut scratch);
                for ch in 0..c {
                    out[(ch * s + si) * p + pi] += scratch.o[ch];
                }
            }
        }
        self.push(vec![c, s, p], out, Op::Attention(Box::new(op)), &[h, k, v, wq, wo])
    }

    /// Forward pass for one query cell, leaving intermediates in `sc`.
    fn attend_cell(&self, op: &AttentionOp, si: usize, pi: usize, sc: &mut AttnScratch) {
        let (c, s, p) = dims3(self.shape(op.h));
        let dk = sc.q.len();
        let dv = sc.a.len();
        let hv = self.value(op.h);
        let kv = self.value(op.k);
        let vv = self.value(op.v);
        let wq = self.value(op.wq);
        let wo = self.value(op.wo);
        for ch in 0..c {
            let pe = if op.query_pe.is_empty() {
                0.0
            } else {
                op.query_pe[si * c + ch]
            };
            sc.qin[ch] = hv[(ch * s + si) * p + pi] + pe;
        }
        sc.q.fill(0.0);
        for ch in 0..c {
            let x = sc.qin[ch];
            for (qj, &w) in sc.q.iter_mut().zip(&wq[ch * dk..(ch + 1) * dk]) {
                *qj += x * w;
            }
        }
        let scale = 1.0 / (dk as f64).sqrt();
        let range = op.mask.block_range(si);
        sc.w.clear();
        let mut max = f64::NEG_INFINITY;
        for m in range.clone() {
            let key = &kv[m * dk..(m + 1) * dk];
            let z = sc.q.iter().zip(key).map(|(a, b)| a * b).sum::<f64>() * scale;
            max = max.max(z);
            sc.w.push(z);
        }
        let mut total = 0.0;
        for z in &mut sc.w {
            *z = (*z - max).exp();
            total += *z;
        }
        for z in &mut sc.w {
            *z /= total;
        }
        sc.a.fill(0.0);
        for (wm, m) in sc.w.iter().zip(range) {
            for (aj, &val) in sc.a.iter_mut().zip(&vv[m * dv..(m + 1) * dv]) {
                *aj += wm * val;
            }
        }
        sc.o.fill(0.0);
        for j in 0..dv {
            let aj = sc.a[j];
            for (oc, &w) in sc.o.iter_mut().zip(&wo[j * c..(j + 1) * c]) {
                *oc += aj * w;
            }
        }
    }

    /// `mean((pred - target)^2)` as a scalar node.
    pub fn mean_square(&mut self, pred: Var, target: &Tensor) -> Var {
        assert_eq!(self.shape(pred), target.shape(), "mean_square: shape mismatch");
        let n = target.len() as f64;
        let loss = self
            .value(pred)
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n;
        self.push(
            vec![1],
            vec![loss],
            Op::MeanSquare {
                pred,
                target: target.data().to_vec(),
            },
            &[pred],
        )
    }

    /// Back-propagates from the scalar `loss`, adding each parameter's
    /// gradient into `param_grad` at the offset it was registered with.
    pub fn backward(&self, loss: Var, param_grad: &mut [f64]) {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Input => {}
                Op::Param { offset } => {
                    for (d, gi) in param_grad[*offset..*offset + g.len()].iter_mut().zip(&g) {
                        *d += gi;
                    }
                }
                Op::Linear { x, w, b } => self.linear_backward(&g, *x, *w, *b, &mut grads),
                Op::Conv3x3 { x, w, b, stride } => {
                    self.conv_backward(&g, *x, *w, *b, *stride, &mut grads)
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *a, &g);
                    self.accumulate(&mut grads, *b, &g);
                }
                Op::Silu(a) => {
                    let gx: Vec<f64> = self
                        .value(*a)
                        .iter()
                        .zip(&g)
                        .map(|(&x, &gi)| {
                            let s = sigmoid(x);
                            gi * s * (1.0 + x * (1.0 - s))
                        })
                        .collect();
                    self.accumulate(&mut grads, *a, &gx);
                }
                Op::Film { x, m } => {
                    let (c, h, w) = dims3(self.shape(*x));
                    let plane = h * w;
                    let xv = self.value(*x);
                    let mv = self.value(*m);
                    let mut gx = vec![0.0; g.len()];
                    let mut gm = vec![0.0; 2 * c];
                    for ch in 0..c {
                        let s = 1.0 + mv[ch];
                        let r = ch * plane..(ch + 1) * plane;
                        for ((gxi, &gi), &xi) in gx[r.clone()].iter_mut().zip(&g[r.clone()]).zip(&xv[r]) {
                            *gxi = gi * s;
                            gm[ch] += gi * xi;
                            gm[c + ch] += gi;
                        }
                    }
                    self.accumulate(&mut grads, *x, &gx);
                    self.accumulate(&mut grads, *m, &gm);
                }
                Op::Upsample2(a) => {
                    let (c, h, w) = dims3(self.shape(*a));
                    let mut ga = vec![0.0; c * h * w];
                    for ch in 0..c {
                        for y in 0..2 * h {
                            for x in 0..2 * w {
                                ga[(ch * h + y / 2) * w + x / 2] += g[(ch * 2 * h + y) * 2 * w + x];
                            }
                        }
                    }
                    self.accumulate(&mut grads, *a, &ga);
                }
                Op::Attention(op) => self.attention_backward(&g, op, &mut grads),
                Op::MeanSquare { pred, target } => {
                    let n = target.len() as f64;
                    let gp: Vec<f64> = self
                        .value(*pred)
                        .iter()
                        .zip(target)
                        .map(|(a, b)| g[0] * 2.0 * (a - b) / n)
                        .collect();
                    self.accumulate(&mut grads, *pred, &gp);
                }
            }
        }
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            slot => *slot = Some(g.to_vec()),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn linear_backward(&self, g: &[f64], x: Var, w: Var, b: Option<Var>, grads: &mut [Option<Vec<f64>>]) {
        let (n, din) = dims_rows(self.shape(x));
        let dout = g.len() / n;
        let xv = self.value(x);
        let wv = self.value(w);
        if self.needs(x) {
            let mut gx = vec![0.0; n * din];
            for r in 0..n {
                let gr = &g[r * dout..(r + 1) * dout];
                for i in 0..din {
                    gx[r * din + i] = gr.iter().zip(&wv[i * dout..(i + 1) * dout]).map(|(a, b)| a * b).sum();
                }
            }
            self.accumulate(grads, x, &gx);
        }
        if self.needs(w) {
            let mut gw = vec![0.0; din * dout];
            for r in 0..n {
                let gr = &g[r * dout..(r + 1) * dout];
                for i in 0..din {
                    let xi = xv[r * din + i];
                    for (gwij, &gj) in gw[i * dout..(i + 1) * dout].iter_mut().zip(gr) {
                        *gwij += xi * gj;
                    }
                }
            }
            self.accumulate(grads, w, &gw);
        }
        if let Some(b) = b {
            let mut gb = vec![0.0; dout];
            for gr in g.chunks_exact(dout) {
                for (a, &gj) in gb.iter_mut().zip(gr) {
                    *a += gj;
                }
            }
            self.accumulate(grads, b, &gb);
        }
    }

    fn conv_backward(&self, g: &[f64], x: Var, w: Var, b: Var, stride: usize, grads: &mut [Option<Vec<f64>>]) {
        let (ci, h, wd) = dims3(self.shape(x));
        let co = self.shape(w)[0];
        let ho = (h - 1) / stride + 1;
        let wo = (wd - 1) / stride + 1;
        let xv = self.value(x);
        let wv = self.value(w);
        let need_x = self.needs(x);
        let mut gx = if need_x { vec![0.0; xv.len()] } else { Vec::new() };
        let mut gw = vec![0.0; wv.len()];
        let mut gb = vec![0.0; co];
        for o in 0..co {
            let gplane = &g[o * ho * wo..(o + 1) * ho * wo];
            gb[o] = gplane.iter().sum();
            for i in 0..ci {
                let src = &xv[i * h * wd..(i + 1) * h * wd];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let widx = ((o * ci + i) * 3 + ky) * 3 + kx;
                        gw[widx] += conv_tap_dot(src, gplane, h, wd, ho, wo, ky, kx, stride);
                        if need_x {
                            let wt = wv[widx];
                            let dst = &mut gx[i * h * wd..(i + 1) * h * wd];
                            conv_tap_transpose(dst, gplane, h, wd, ho, wo, ky, kx, stride, wt);
                        }
                    }
                }
            }
        }
        if need_x {
            self.accumulate(grads, x, &gx);
        }
        self.accumulate(grads, w, &gw);
        self.accumulate(grads, b, &gb);
    }

    fn attention_backward(&self, g: &[f64], op: &AttentionOp, grads: &mut [Option<Vec<f64>>]) {
        let (c, s, p) = dims3(self.shape(op.h));
        let (_, dk) = dims_rows(self.shape(op.k));
        let (_, dv) = dims_rows(self.shape(op.v));
        let kv = self.value(op.k);
        let vv = self.value(op.v);
        let wq = self.value(op.wq);
        let wo = self.value(op.wo);
        let scale = 1.0 / (dk as f64).sqrt();

        let mut gh = g.to_vec();
        let mut gk = vec![0.0; kv.len()];
        let mut gv = vec![0.0; vv.len()];
        let mut gwq = vec![0.0; wq.len()];
        let mut gwo = vec![0.0; wo.len()];
        let mut sc = AttnScratch::new(c, dk, dv, op.mask.k());
        let mut go = vec![0.0; c];
        let mut ga = vec![0.0; dv];
        let mut gz = Vec::with_capacity(op.mask.k());
        let mut gq = vec![0.0; dk];

        for si in 0..s {
            for pi in 0..p {
                self.attend_cell(op, si, pi, &mut sc);
                for ch in 0..c {
                    go[ch] = g[(ch * s + si) * p + pi];
                }
                // o = a @ wo
                for j in 0..dv {
                    let row = &wo[j * c..(j + 1) * c];
                    ga[j] = row.iter().zip(&go).map(|(a, b)| a * b).sum();
                    for (gw, &gc) in gwo[j * c..(j + 1) * c].iter_mut().zip(&go) {
                        *gw += sc.a[j] * gc;
                    }
                }
                // a = sum_m w_m v_m, softmax over the block
                let range = op.mask.block_range(si);
                gz.clear();
                let mut dot = 0.0;
                for (wm, m) in sc.w.iter().zip(range.clone()) {
                    let vrow = &vv[m * dv..(m + 1) * dv];
                    let gw: f64 = ga.iter().zip(vrow).map(|(a, b)| a * b).sum();
                    gz.push(gw);
                    dot += wm * gw;
                    for (gvj, &gaj) in gv[m * dv..(m + 1) * dv].iter_mut().zip(&ga) {
                        *gvj += wm * gaj;
                    }
                }
                gq.fill(0.0);
                for ((gzm, &wm), m) in gz.iter_mut().zip(&sc.w).zip(range) {
                    *gzm = wm * (*gzm - dot) * scale;
                    let krow = &kv[m * dk..(m + 1) * dk];
                    for (gqj, &kj) in gq.iter_mut().zip(krow) {
                        *gqj += *gzm * kj;
                    }
                    for (gkj, &qj) in gk[m * dk..(m + 1) * dk].iter_mut().zip(&sc.q) {
                        *gkj += *gzm * qj;
                    }
                }
                // q = qin @ wq
                for ch in 0..c {
                    let row = &wq[ch * dk..(ch + 1) * dk];
                    gh[(ch * s + si) * p + pi] += row.iter().zip(&gq).map(|(a, b)| a * b).sum::<f64>();
                    for (gw, &gqj) in gwq[ch * dk..(ch + 1) * dk].iter_mut().zip(&gq) {
                        *gw += sc.qin[ch] * gqj;
                    }
                }
            }
        }
        self.accumulate(grads, op.h, &gh);
        self.accumulate(grads, op.k, &gk);
        self.accumulate(grads, op.v, &gv);
        self.accumulate(grads, op.wq, &gwq);
        self.accumulate(grads, op.wo, &gwo);
    }
}

struct AttnScratch {
    qin: Vec<f64>,
    q: Vec<f64>,
    w: Vec<f64>,
    a: Vec<f64>,
    o: Vec<f64>,
}

impl AttnScratch {
    fn new(c: usize, dk: usize, dv: usize, block: usize) -> Self {
        Self {
            qin: vec![0.0; c],
            q: vec![0.0; dk],
            w: Vec::with_capacity(block),
            a: vec![0.0; dv],
            o: vec![0.0; c],
        }
    }
}

/// Output column range `[lo, hi)` whose stride-1 tap `kx` reads in-bounds
/// input columns `lo + kx - 1 .. hi + kx - 1`.
#[inline]
fn tap_cols(w: usize, wo: usize, kx: usize) -> (usize, usize) {
    (1usize.saturating_sub(kx), wo.min(w + 1 - kx))
}

/// Adds `wt * input` into the output cells one kernel tap touches.
#[allow(clippy::too_many_arguments)]
#[inline]
fn conv_tap(
    src: &[f64],
    dst: &mut [f64],
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    ky: usize,
    kx: usize,
    stride: usize,
    wt: f64,
) {
    for oy in 0..ho {
        let iy = (oy * stride + ky) as isize - 1;
        if iy < 0 || iy >= h as isize {
            continue;
        }
        let srow = &src[iy as usize * w..(iy as usize + 1) * w];
        let drow = &mut dst[oy * wo..(oy + 1) * wo];
        if stride == 1 {
            let (lo, hi) = tap_cols(w, wo, kx);
            for (d, &sv) in drow[lo..hi].iter_mut().zip(&srow[lo + kx - 1..hi + kx - 1]) {
                *d += wt * sv;
            }
        } else {
            for (ox, d) in drow.iter_mut().enumerate() {
                let ix = (ox * stride + kx) as isize - 1;
                if ix >= 0 && ix < w as isize {
                    *d += wt * srow[ix as usize];
                }
            }
        }
    }
}

/// Sum of `grad_out * input` over the cells one kernel tap touches.
#[allow(clippy::too_many_arguments)]
#[inline]
fn conv_tap_dot(
    src: &[f64],
    gout: &[f64],
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    ky: usize,
    kx: usize,
    stride: usize,
) -> f64 {
    let mut acc = 0.0;
    for oy in 0..ho {
        let iy = (oy * stride + ky) as isize - 1;
        if iy < 0 || iy >= h as isize {
            continue;
        }
        let srow = &src[iy as usize * w..(iy as usize + 1) * w];
        let grow = &gout[oy * wo..(oy + 1) * wo];
        if stride == 1 {
            let (lo, hi) = tap_cols(w, wo, kx);
            acc += grow[lo..hi]
                .iter()
                .zip(&srow[lo + kx - 1..hi + kx - 1])
                .map(|(a, b)| a * b)
                .sum::<f64>();
        } else {
            for (ox, &gv) in grow.iter().enumerate() {
                let ix = (ox * stride + kx) as isize - 1;
                if ix >= 0 && ix < w as isize {
                    acc += gv * srow[ix as usize];
                }
            }
        }
    }
    acc
}

/// Scatters `wt * grad_out` back onto the input positions of one tap.
#[allow(clippy::too_many_arguments)]
#[inline]
fn conv_tap_transpose(
    dst: &mut [f64],
    gout: &[f64],
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    ky: usize,
    kx: usize,
    stride: usize,
    wt: f64,
) {
    for oy in 0..ho {
        let iy = (oy * stride + ky) as isize - 1;
        if iy < 0 || iy >= h as isize {
            continue;
        }
        let drow = &mut dst[iy as usize * w..(iy as usize + 1) * w];
        let grow = &gout[oy * wo..(oy + 1) * wo];
        if stride == 1 {
            let (lo, hi) = tap_cols(w, wo, kx);
            for (d, &gv) in drow[lo + kx - 1..hi + kx - 1].iter_mut().zip(&grow[lo..hi]) {
                *d += wt * gv;
            }
        } else {
            for (ox, &gv) in grow.iter().enumerate() {
                let ix = (ox * stride + kx) as isize - 1;
                if ix >= 0 && ix < w as isize {
                    drow[ix as usize] += wt * gv;
                }
            }
        }
    }
}
