//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation in creation order, so the tape is
//! already topologically sorted and the backward pass is a reverse sweep.
//! Graphs are built fresh for every training step and dropped afterwards.

use std::cell::RefCell;
use std::rc::Rc;

use crate::tensor::Tensor;

type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients produced by [`Graph::backward`], retained for leaf values only.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like it when nothing flowed there.
    pub fn get_or_zeros(&self, v: Var<'_>) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(v.value().shape()))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, node: Node) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        let id = self.push(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            backward: None,
            requires_grad: true,
        });
        Var { graph: self, id }
    }

    /// A value that never receives gradients.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        let id = self.push(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            backward: None,
            requires_grad: false,
        });
        Var { graph: self, id }
    }

    /// Record a custom operation. `backward` maps the output gradient to one
    /// optional gradient per parent; the flag slice says which parents need one.
    pub fn op<'g>(
        &'g self,
        value: Tensor,
        parents: &[Var<'g>],
        backward: impl Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static,
    ) -> Var<'g> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.id].requires_grad)
        };
        let id = self.push(Node {
            value: Rc::new(value),
            parents: parents.iter().map(|p| p.id).collect(),
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
            requires_grad,
        });
        Var { graph: self, id }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        let lv = &nodes[loss.id].value;
        assert_eq!(lv.len(), 1, "backward() needs a scalar loss, got {:?}", lv.shape());
        grads[loss.id] = Some(Tensor::full(lv.shape(), 1.0));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                grads[id] = None;
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            match &node.backward {
                Some(bw) => {
                    let needs: Vec<bool> = node
                        .parents
                        .iter()
                        .map(|&p| nodes[p].requires_grad)
                        .collect();
                    let pgs = bw(&g, &needs);
                    debug_assert_eq!(pgs.len(), node.parents.len());
                    for ((&p, pg), need) in node.parents.iter().zip(pgs).zip(needs) {
                        let Some(pg) = pg else { continue };
                        if !need {
                            continue;
                        }
                        match &mut grads[p] {
                            Some(acc) => acc.add_assign(&pg),
                            slot => *slot = Some(pg),
                        }
                    }
                }
                None => grads[id] = Some(g),
            }
        }
        Gradients { grads }
    }
}

// --- dense kernels ---------------------------------------------------------

/// `c = a·b (+ beta·c)` with optional transposes; `a` is `m×k`, `b` is `k×n`
/// after transposition, all row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for x in c[..m * n].iter_mut() {
            *x *= beta;
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds asserted above; strides describe the row-major layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

fn im2col(x: &[f64], g: ConvGeom, col: &mut [f64]) {
    let howo = g.ho * g.wo;
    for ci in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut col[row * howo..(row + 1) * howo];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        dst[oy * g.wo + ox] = if iy >= 0
                            && (iy as usize) < g.h
                            && ix >= 0
                            && (ix as usize) < g.w
                        {
                            x[(ci * g.h + iy as usize) * g.w + ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f64], g: ConvGeom, dx: &mut [f64]) {
    let howo = g.ho * g.wo;
    for ci in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &col[row * howo..(row + 1) * howo];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix as usize >= g.w {
                            continue;
                        }
                        dx[(ci * g.h + iy as usize) * g.w + ix as usize] += src[oy * g.wo + ox];
                    }
                }
            }
        }
    }
}

/// Plain (non-recording) 2D convolution; `x` is `[N,C,H,W]`, `w` is `[O,C,k,k]`.
pub fn conv2d_forward(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Tensor {
    conv2d_impl(x, w, b, stride, pad).0
}

fn conv2d_impl(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> (Tensor, Vec<f64>, ConvGeom) {
    let (n, c, h, wd) = x.dims4();
    let (o, ci, k, k2) = w.dims4();
    assert_eq!(ci, c, "conv2d: input has {c} channels, weight expects {ci}");
    assert_eq!(k, k2, "conv2d: non-square kernel");
    assert!(h + 2 * pad >= k && wd + 2 * pad >= k, "conv2d: input smaller than kernel");
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let geom = ConvGeom {
        c,
        h,
        w: wd,
        k,
        stride,
        pad,
        ho,
        wo,
    };
    let kk = c * k * k;
    let howo = ho * wo;
    let mut cols = vec![0.0; n * kk * howo];
    let mut out = vec![0.0; n * o * howo];
    for s in 0..n {
        let col = &mut cols[s * kk * howo..(s + 1) * kk * howo];
        im2col(&x.data()[s * c * h * wd..(s + 1) * c * h * wd], geom, col);
        let dst = &mut out[s * o * howo..(s + 1) * o * howo];
        if let Some(b) = b {
            for (oc, row) in dst.chunks_mut(howo).enumerate() {
                row.fill(b.data()[oc]);
            }
        }
        gemm(o, kk, howo, w.data(), false, col, false, if b.is_some() { 1.0 } else { 0.0 }, dst);
    }
    (Tensor::from_vec(&[n, o, ho, wo], out), cols, geom)
}

/// Per-axis source indices and weights for 2× bilinear upsampling
/// (half-pixel centers, edge clamped).
fn upsample_taps(len: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * len)
        .map(|i| {
            let src = ((i as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            let t = src - i0 as f64;
            (i0, i1, t)
        })
        .collect()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Row-compressed sparse matrix used for fixed linear maps (bilinear
/// sampling at fixed coordinates, graph Laplacians).
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    pub rows: usize,
    pub cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    vals: Vec<f64>,
}

impl SparseMatrix {
    /// Build from per-row `(column, value)` lists.
    pub fn from_rows(cols: usize, rows: &[Vec<(usize, f64)>]) -> Self {
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        let mut col_idx = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for r in rows {
            for &(c, v) in r {
                assert!(c < cols, "sparse column {c} out of range {cols}");
                col_idx.push(c);
                vals.push(v);
            }
            row_ptr.push(col_idx.len());
        }
        SparseMatrix {
            rows: rows.len(),
            cols,
            row_ptr,
            col_idx,
            vals,
        }
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (a, b) = (self.row_ptr[r], self.row_ptr[r + 1]);
        self.col_idx[a..b].iter().copied().zip(self.vals[a..b].iter().copied())
    }

    /// `y[q] = Σ_p S[q,p] x[p]` over a strided slice.
    pub fn apply(&self, x: &[f64], y: &mut [f64]) {
        for (q, yq) in y.iter_mut().enumerate().take(self.rows) {
            *yq = self.row(q).map(|(p, v)| v * x[p]).sum();
        }
    }

    /// `x[p] += Σ_q S[q,p] y[q]`.
    pub fn apply_transpose_acc(&self, y: &[f64], x: &mut [f64]) {
        for (q, &yq) in y.iter().enumerate().take(self.rows) {
            for (p, v) in self.row(q) {
                x[p] += v * yq;
            }
        }
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// Same value, cut from the tape.
    pub fn detach(&self) -> Var<'g> {
        self.graph.constant((*self.value()).clone())
    }

    fn elementwise(
        &self,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var<'g> {
        let x = self.value();
        let y = Rc::new(x.map(f));
        let yc = y.clone();
        self.graph.op((*y).clone(), &[*self], move |g, _| {
            let d = Tensor::from_vec(
                g.shape(),
                g.data()
                    .iter()
                    .zip(x.data())
                    .zip(yc.data())
                    .map(|((&g, &x), &y)| g * df(x, y))
                    .collect(),
            );
            vec![Some(d)]
        })
    }

    pub fn add(&self, other: Var<'g>) -> Var<'g> {
        let v = self.value().zip_map(&other.value(), |a, b| a + b);
        self.graph
            .op(v, &[*self, other], |g, _| vec![Some(g.clone()), Some(g.clone())])
    }

    pub fn sub(&self, other: Var<'g>) -> Var<'g> {
        let v = self.value().zip_map(&other.value(), |a, b| a - b);
        self.graph
            .op(v, &[*self, other], |g, _| vec![Some(g.clone()), Some(g.scale(-1.0))])
    }

    pub fn mul(&self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        let v = a.zip_map(&b, |x, y| x * y);
        self.graph.op(v, &[*self, other], move |g, need| {
            vec![
                need[0].then(|| g.zip_map(&b, |g, y| g * y)),
                need[1].then(|| g.zip_map(&a, |g, x| g * x)),
            ]
        })
    }

    pub fn div(&self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        let v = a.zip_map(&b, |x, y| x / y);
        self.graph.op(v, &[*self, other], move |g, need| {
            vec![
                need[0].then(|| g.zip_map(&b, |g, y| g / y)),
                need[1].then(|| {
                    let ab = a.zip_map(&b, |x, y| -x / (y * y));
                    g.zip_map(&ab, |g, d| g * d)
                }),
            ]
        })
    }

    pub fn add_scalar(&self, s: f64) -> Var<'g> {
        self.elementwise(move |x| x + s, |_, _| 1.0)
    }

    pub fn mul_scalar(&self, s: f64) -> Var<'g> {
        self.elementwise(move |x| x * s, move |_, _| s)
    }

    pub fn square(&self) -> Var<'g> {
        self.elementwise(|x| x * x, |x, _| 2.0 * x)
    }

    pub fn relu(&self) -> Var<'g> {
        self.elementwise(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn leaky_relu(&self, slope: f64) -> Var<'g> {
        self.elementwise(
            move |x| if x > 0.0 { x } else { slope * x },
            move |x, _| if x > 0.0 { 1.0 } else { slope },
        )
    }

    pub fn sigmoid(&self) -> Var<'g> {
        self.elementwise(sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn softplus(&self) -> Var<'g> {
        self.elementwise(softplus, |x, _| sigmoid(x))
    }

    /// `max(x, floor)`; gradient passes only where `x > floor`.
    pub fn clamp_min(&self, floor: f64) -> Var<'g> {
        self.elementwise(
            move |x| x.max(floor),
            move |x, _| if x > floor { 1.0 } else { 0.0 },
        )
    }

    pub fn sum(&self) -> Var<'g> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.graph.op(Tensor::scalar(x.sum()), &[*self], move |g, _| {
            vec![Some(Tensor::full(&shape, g.item()))]
        })
    }

    pub fn mean(&self) -> Var<'g> {
        let n = self.value().len().max(1);
        self.sum().mul_scalar(1.0 / n as f64)
    }

    /// Sum of everything but the leading axis: `[N, ...] -> [N]`.
    pub fn sum_per_sample(&self) -> Var<'g> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let n = shape[0];
        let stride = x.len() / n;
        let v: Vec<f64> = x.data().chunks(stride).map(|c| c.iter().sum()).collect();
        self.graph.op(Tensor::from_vec(&[n], v), &[*self], move |g, _| {
            let mut d = Vec::with_capacity(n * stride);
            for &gi in g.data() {
                d.extend(std::iter::repeat(gi).take(stride));
            }
            vec![Some(Tensor::from_vec(&shape, d))]
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Var<'g> {
        let x = self.value();
        let orig = x.shape().to_vec();
        let v = (*x).clone().reshape(shape);
        self.graph
            .op(v, &[*self], move |g, _| vec![Some(g.clone().reshape(&orig))])
    }

    /// 2D convolution with square kernel, zero padding.
    pub fn conv2d(&self, w: Var<'g>, b: Option<Var<'g>>, stride: usize, pad: usize) -> Var<'g> {
        let xv = self.value();
        let wv = w.value();
        let bv = b.map(|b| b.value());
        let (out, cols, geom) = conv2d_impl(&xv, &wv, bv.as_deref(), stride, pad);
        let n = xv.shape()[0];
        let o = wv.shape()[0];
        let mut parents = vec![*self, w];
        if let Some(b) = b {
            parents.push(b);
        }
        let has_b = b.is_some();
        let x_shape = xv.shape().to_vec();
        let w_shape = wv.shape().to_vec();
        drop(xv);
        self.graph.op(out, &parents, move |g, need| {
            let kk = geom.c * geom.k * geom.k;
            let howo = geom.ho * geom.wo;
            let chw = geom.c * geom.h * geom.w;
            let mut dx = need[0].then(|| vec![0.0; n * chw]);
            let mut dw = need[1].then(|| vec![0.0; o * kk]);
            let mut dcol = vec![0.0; kk * howo];
            for s in 0..n {
                let gs = &g.data()[s * o * howo..(s + 1) * o * howo];
                let col = &cols[s * kk * howo..(s + 1) * kk * howo];
                if let Some(dw) = dw.as_mut() {
                    gemm(o, howo, kk, gs, false, col, true, 1.0, dw);
                }
                if let Some(dx) = dx.as_mut() {
                    gemm(kk, o, howo, wv.data(), true, gs, false, 0.0, &mut dcol);
                    col2im(&dcol, geom, &mut dx[s * chw..(s + 1) * chw]);
                }
            }
            let mut res = vec![
                dx.map(|d| Tensor::from_vec(&x_shape, d)),
                dw.map(|d| Tensor::from_vec(&w_shape, d)),
            ];
            if has_b {
                res.push(need[2].then(|| {
                    let mut db = vec![0.0; o];
                    for s in 0..n {
                        for (oc, dbo) in db.iter_mut().enumerate() {
                            let off = (s * o + oc) * howo;
                            *dbo += g.data()[off..off + howo].iter().sum::<f64>();
                        }
                    }
                    Tensor::from_vec(&[o], db)
                }));
            }
            res
        })
    }

    /// `x·wᵀ + b` for `x: [N,F]`, `w: [O,F]`, `b: [O]`.
    pub fn linear(&self, w: Var<'g>, b: Option<Var<'g>>) -> Var<'g> {
        let xv = self.value();
        let wv = w.value();
        let (n, f) = (xv.shape()[0], xv.shape()[1]);
        let o = wv.shape()[0];
        assert_eq!(wv.shape()[1], f, "linear: input width {f} vs weight {:?}", wv.shape());
        let mut out = vec![0.0; n * o];
        if let Some(b) = b {
            let bv = b.value();
            for row in out.chunks_mut(o) {
                row.copy_from_slice(bv.data());
            }
        }
        gemm(n, f, o, xv.data(), false, wv.data(), true, 1.0, &mut out);
        let mut parents = vec![*self, w];
        if let Some(b) = b {
            parents.push(b);
        }
        let has_b = b.is_some();
        self.graph
            .op(Tensor::from_vec(&[n, o], out), &parents, move |g, need| {
                let mut res = vec![
                    need[0].then(|| {
                        let mut dx = vec![0.0; n * f];
                        gemm(n, o, f, g.data(), false, wv.data(), false, 0.0, &mut dx);
                        Tensor::from_vec(&[n, f], dx)
                    }),
                    need[1].then(|| {
                        let mut dw = vec![0.0; o * f];
                        gemm(o, n, f, g.data(), true, xv.data(), false, 0.0, &mut dw);
                        Tensor::from_vec(&[o, f], dw)
                    }),
                ];
                if has_b {
                    res.push(need[2].then(|| {
                        let mut db = vec![0.0; o];
                        for row in g.data().chunks(o) {
                            for (d, r) in db.iter_mut().zip(row) {
                                *d += r;
                            }
                        }
                        Tensor::from_vec(&[o], db)
                    }));
                }
                res
            })
    }

    /// Per-sample, per-channel normalization over spatial positions (no affine).
    pub fn instance_norm(&self, eps: f64) -> Var<'g> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let hw = h * w;
        let mut y = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; n * c];
        for p in 0..n * c {
            let src = &x.data()[p * hw..(p + 1) * hw];
            let mean = src.iter().sum::<f64>() / hw as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / hw as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[p] = is;
            for (d, s) in y[p * hw..(p + 1) * hw].iter_mut().zip(src) {
                *d = (s - mean) * is;
            }
        }
        let yt = Rc::new(Tensor::from_vec(&[n, c, h, w], y));
        let yc = yt.clone();
        self.graph.op((*yt).clone(), &[*self], move |g, _| {
            let mut dx = vec![0.0; g.len()];
            for p in 0..n * c {
                let gs = &g.data()[p * hw..(p + 1) * hw];
                let ys = &yc.data()[p * hw..(p + 1) * hw];
                let mg = gs.iter().sum::<f64>() / hw as f64;
                let mgy = gs.iter().zip(ys).map(|(a, b)| a * b).sum::<f64>() / hw as f64;
                for i in 0..hw {
                    dx[p * hw + i] = inv_std[p] * (gs[i] - mg - ys[i] * mgy);
                }
            }
            vec![Some(Tensor::from_vec(&[n, c, h, w], dx))]
        })
    }

    /// `y[n,c,:,:] = x[n,c,:,:]·scale[n,c] + shift[n,c]`.
    pub fn channel_affine(&self, scale: Var<'g>, shift: Var<'g>) -> Var<'g> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let hw = h * w;
        let sv = scale.value();
        let tv = shift.value();
        assert_eq!(sv.shape(), &[n, c], "channel_affine scale shape");
        assert_eq!(tv.shape(), &[n, c], "channel_affine shift shape");
        let mut y = vec![0.0; x.len()];
        for p in 0..n * c {
            for i in 0..hw {
                y[p * hw + i] = x.data()[p * hw + i] * sv.data()[p] + tv.data()[p];
            }
        }
        self.graph.op(
            Tensor::from_vec(&[n, c, h, w], y),
            &[*self, scale, shift],
            move |g, need| {
                let gd = g.data();
                let dx = need[0].then(|| {
                    let mut d = vec![0.0; gd.len()];
                    for p in 0..n * c {
                        for i in 0..hw {
                            d[p * hw + i] = gd[p * hw + i] * sv.data()[p];
                        }
                    }
                    Tensor::from_vec(&[n, c, h, w], d)
                });
                let ds = need[1].then(|| {
                    let d = (0..n * c)
                        .map(|p| {
                            (0..hw)
                                .map(|i| gd[p * hw + i] * x.data()[p * hw + i])
                                .sum()
                        })
                        .collect();
                    Tensor::from_vec(&[n, c], d)
                });
                let dt = need[2].then(|| {
                    let d = (0..n * c)
                        .map(|p| gd[p * hw..(p + 1) * hw].iter().sum())
                        .collect();
                    Tensor::from_vec(&[n, c], d)
                });
                vec![dx, ds, dt]
            },
        )
    }

    /// 2× bilinear upsampling.
    pub fn upsample2x(&self) -> Var<'g> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let rows = upsample_taps(h);
        let cols = upsample_taps(w);
        let (h2, w2) = (2 * h, 2 * w);
        let mut y = vec![0.0; n * c * h2 * w2];
        for p in 0..n * c {
            let src = &x.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut y[p * h2 * w2..(p + 1) * h2 * w2];
            for (i, &(r0, r1, tr)) in rows.iter().enumerate() {
                for (j, &(c0, c1, tc)) in cols.iter().enumerate() {
                    let top = src[r0 * w + c0] * (1.0 - tc) + src[r0 * w + c1] * tc;
                    let bot = src[r1 * w + c0] * (1.0 - tc) + src[r1 * w + c1] * tc;
                    dst[i * w2 + j] = top * (1.0 - tr) + bot * tr;
                }
            }
        }
        self.graph
            .op(Tensor::from_vec(&[n, c, h2, w2], y), &[*self], move |g, _| {
                let mut dx = vec![0.0; n * c * h * w];
                for p in 0..n * c {
                    let gs = &g.data()[p * h2 * w2..(p + 1) * h2 * w2];
                    let dst = &mut dx[p * h * w..(p + 1) * h * w];
                    for (i, &(r0, r1, tr)) in rows.iter().enumerate() {
                        for (j, &(c0, c1, tc)) in cols.iter().enumerate() {
                            let gv = gs[i * w2 + j];
                            dst[r0 * w + c0] += gv * (1.0 - tr) * (1.0 - tc);
                            dst[r0 * w + c1] += gv * (1.0 - tr) * tc;
                            dst[r1 * w + c0] += gv * tr * (1.0 - tc);
                            dst[r1 * w + c1] += gv * tr * tc;
                        }
                    }
                }
                vec![Some(Tensor::from_vec(&[n, c, h, w], dx))]
            })
    }

    /// 2×2 average pooling (even sizes).
    pub fn avg_pool2x(&self) -> Var<'g> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2x needs even sizes");
        let (h2, w2) = (h / 2, w / 2);
        let mut y = vec![0.0; n * c * h2 * w2];
        for p in 0..n * c {
            for i in 0..h2 {
                for j in 0..w2 {
                    let s = |a: usize, b: usize| x.data()[(p * h + a) * w + b];
                    y[(p * h2 + i) * w2 + j] = 0.25
                        * (s(2 * i, 2 * j) + s(2 * i, 2 * j + 1) + s(2 * i + 1, 2 * j) + s(2 * i + 1, 2 * j + 1));
                }
            }
        }
        self.graph
            .op(Tensor::from_vec(&[n, c, h2, w2], y), &[*self], move |g, _| {
                let mut dx = vec![0.0; n * c * h * w];
                for p in 0..n * c {
                    for i in 0..h2 {
                        for j in 0..w2 {
                            let gv = 0.25 * g.data()[(p * h2 + i) * w2 + j];
                            for (a, b) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                dx[(p * h + 2 * i + a) * w + 2 * j + b] += gv;
                            }
                        }
                    }
                }
                vec![Some(Tensor::from_vec(&[n, c, h, w], dx))]
            })
    }

    /// Mirror the last (column) axis.
    pub fn flip_w(&self) -> Var<'g> {
        fn flip(t: &Tensor) -> Tensor {
            let w = *t.shape().last().unwrap();
            let mut out = t.clone();
            for (dst, src) in out.data_mut().chunks_mut(w).zip(t.data().chunks(w)) {
                for j in 0..w {
                    dst[j] = src[w - 1 - j];
                }
            }
            out
        }
        let v = flip(&self.value());
        self.graph.op(v, &[*self], move |g, _| vec![Some(flip(g))])
    }

    /// Concatenate along the last (column) axis.
    pub fn concat_w(&self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        let sa = a.shape().to_vec();
        let sb = b.shape().to_vec();
        assert_eq!(sa[..sa.len() - 1], sb[..sb.len() - 1], "concat_w shape mismatch");
        let (wa, wb) = (*sa.last().unwrap(), *sb.last().unwrap());
        let mut data = Vec::with_capacity(a.len() + b.len());
        for (ra, rb) in a.data().chunks(wa).zip(b.data().chunks(wb)) {
            data.extend_from_slice(ra);
            data.extend_from_slice(rb);
        }
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = wa + wb;
        self.graph
            .op(Tensor::from_vec(&shape, data), &[*self, other], move |g, need| {
                let rows = g.data().chunks(wa + wb);
                let da = need[0].then(|| {
                    let d: Vec<f64> = rows.clone().flat_map(|r| r[..wa].to_vec()).collect();
                    Tensor::from_vec(&sa, d)
                });
                let db = need[1].then(|| {
                    let d: Vec<f64> = rows.flat_map(|r| r[wa..].to_vec()).collect();
                    Tensor::from_vec(&sb, d)
                });
                vec![da, db]
            })
    }

    /// Concatenate `[N,C_i,H,W]` tensors along channels.
    pub fn concat_channels(parts: &[Var<'g>]) -> Var<'g> {
        let graph = parts[0].graph;
        let vals: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let (n, _, h, w) = vals[0].dims4();
        let chans: Vec<usize> = vals
            .iter()
            .map(|v| {
                let (vn, c, vh, vw) = v.dims4();
                assert_eq!((vn, vh, vw), (n, h, w), "concat_channels shape mismatch");
                c
            })
            .collect();
        let ctot: usize = chans.iter().sum();
        let hw = h * w;
        let mut data = Vec::with_capacity(n * ctot * hw);
        for s in 0..n {
            for (v, &c) in vals.iter().zip(&chans) {
                data.extend_from_slice(&v.data()[s * c * hw..(s + 1) * c * hw]);
            }
        }
        graph.op(Tensor::from_vec(&[n, ctot, h, w], data), parts, move |g, need| {
            let mut off = 0;
            chans
                .iter()
                .zip(need)
                .map(|(&c, &nd)| {
                    let start = off;
                    off += c;
                    nd.then(|| {
                        let mut d = Vec::with_capacity(n * c * hw);
                        for s in 0..n {
                            let base = (s * ctot + start) * hw;
                            d.extend_from_slice(&g.data()[base..base + c * hw]);
                        }
                        Tensor::from_vec(&[n, c, h, w], d)
                    })
                })
                .collect()
        })
    }

    /// Channels `[start, start+len)` of a `[N,C,H,W]` tensor.
    pub fn narrow_channels(&self, start: usize, len: usize) -> Var<'g> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        assert!(start + len <= c, "narrow_channels out of range");
        let hw = h * w;
        let mut data = Vec::with_capacity(n * len * hw);
        for s in 0..n {
            let base = (s * c + start) * hw;
            data.extend_from_slice(&x.data()[base..base + len * hw]);
        }
        self.graph
            .op(Tensor::from_vec(&[n, len, h, w], data), &[*self], move |g, _| {
                let mut d = vec![0.0; n * c * hw];
                for s in 0..n {
                    let base = (s * c + start) * hw;
                    d[base..base + len * hw]
                        .copy_from_slice(&g.data()[s * len * hw..(s + 1) * len * hw]);
                }
                vec![Some(Tensor::from_vec(&[n, c, h, w], d))]
            })
    }

    /// Multiply each channel by a fixed constant.
    pub fn scale_channels(&self, factors: Vec<f64>) -> Var<'g> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let c = shape[1];
        assert_eq!(factors.len(), c, "scale_channels factor count");
        let plane = x.len() / (shape[0] * c);
        let apply = move |t: &Tensor| {
            let mut out = t.clone();
            for (i, v) in out.data_mut().iter_mut().enumerate() {
                *v *= factors[(i / plane) % c];
            }
            out
        };
        let v = apply(&x);
        self.graph.op(v, &[*self], move |g, _| vec![Some(apply(g))])
    }

    /// Multiply every channel by a single-channel mask: `[N,C,H,W] ⊙ [N,1,H,W]`.
    pub fn mul_mask(&self, mask: Var<'g>) -> Var<'g> {
        let x = self.value();
        let m = mask.value();
        let (n, c, h, w) = x.dims4();
        assert_eq!(m.shape(), &[n, 1, h, w], "mul_mask shape mismatch");
        let hw = h * w;
        let mut y = x.as_ref().clone();
        for s in 0..n {
            for ch in 0..c {
                for i in 0..hw {
                    y.data_mut()[(s * c + ch) * hw + i] *= m.data()[s * hw + i];
                }
            }
        }
        self.graph.op(y, &[*self, mask], move |g, need| {
            let dx = need[0].then(|| {
                let mut d = g.clone();
                for s in 0..n {
                    for ch in 0..c {
                        for i in 0..hw {
                            d.data_mut()[(s * c + ch) * hw + i] *= m.data()[s * hw + i];
                        }
                    }
                }
                d
            });
            let dm = need[1].then(|| {
                let mut d = vec![0.0; n * hw];
                for s in 0..n {
                    for ch in 0..c {
                        for i in 0..hw {
                            let k = (s * c + ch) * hw + i;
                            d[s * hw + i] += g.data()[k] * x.data()[k];
                        }
                    }
                }
                Tensor::from_vec(&[n, 1, h, w], d)
            });
            vec![dx, dm]
        })
    }

    /// `[N,C,H,W] -> [N,C]` spatial mean.
    pub fn global_avg_pool(&self) -> Var<'g> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let hw = h * w;
        let v: Vec<f64> = x
            .data()
            .chunks(hw)
            .map(|p| p.iter().sum::<f64>() / hw as f64)
            .collect();
        self.graph.op(Tensor::from_vec(&[n, c], v), &[*self], move |g, _| {
            let mut d = Vec::with_capacity(n * c * hw);
            for &gv in g.data() {
                d.extend(std::iter::repeat(gv / hw as f64).take(hw));
            }
            vec![Some(Tensor::from_vec(&[n, c, h, w], d))]
        })
    }

    /// Per-position inner product with a per-sample vector:
    /// `[N,C,H,W] · [N,C] -> [N,1,H,W]`.
    pub fn channel_dot(&self, e: Var<'g>) -> Var<'g> {
        let f = self.value();
        let ev = e.value();
        let (n, c, h, w) = f.dims4();
        assert_eq!(ev.shape(), &[n, c], "channel_dot embedding shape");
        let hw = h * w;
        let mut y = vec![0.0; n * hw];
        for s in 0..n {
            for ch in 0..c {
                let ec = ev.data()[s * c + ch];
                for i in 0..hw {
                    y[s * hw + i] += ec * f.data()[(s * c + ch) * hw + i];
                }
            }
        }
        self.graph
            .op(Tensor::from_vec(&[n, 1, h, w], y), &[*self, e], move |g, need| {
                let df = need[0].then(|| {
                    let mut d = vec![0.0; n * c * hw];
                    for s in 0..n {
                        for ch in 0..c {
                            let ec = ev.data()[s * c + ch];
                            for i in 0..hw {
                                d[(s * c + ch) * hw + i] = ec * g.data()[s * hw + i];
                            }
                        }
                    }
                    Tensor::from_vec(&[n, c, h, w], d)
                });
                let de = need[1].then(|| {
                    let mut d = vec![0.0; n * c];
                    for s in 0..n {
                        for ch in 0..c {
                            d[s * c + ch] = (0..hw)
                                .map(|i| g.data()[s * hw + i] * f.data()[(s * c + ch) * hw + i])
                                .sum();
                        }
                    }
                    Tensor::from_vec(&[n, c], d)
                });
                vec![df, de]
            })
    }

    /// Repeat a batch-1 tensor `n` times along the batch axis.
    pub fn expand_batch(&self, n: usize) -> Var<'g> {
        let x = self.value();
        assert_eq!(x.shape()[0], 1, "expand_batch needs a leading 1");
        let shape = x.shape().to_vec();
        let mut out_shape = shape.clone();
        out_shape[0] = n;
        let mut data = Vec::with_capacity(n * x.len());
        for _ in 0..n {
            data.extend_from_slice(x.data());
        }
        let len = x.len();
        self.graph
            .op(Tensor::from_vec(&out_shape, data), &[*self], move |g, _| {
                let mut d = vec![0.0; len];
                for chunk in g.data().chunks(len) {
                    for (a, b) in d.iter_mut().zip(chunk) {
                        *a += b;
                    }
                }
                vec![Some(Tensor::from_vec(&shape, d))]
            })
    }

    /// Batch entry `i`, keeping a leading axis of 1.
    pub fn select(&self, i: usize) -> Var<'g> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let v = x.batch_item(i);
        let stride = v.len();
        self.graph.op(v, &[*self], move |g, _| {
            let mut d = Tensor::zeros(&shape);
            d.data_mut()[i * stride..(i + 1) * stride].copy_from_slice(g.data());
            vec![Some(d)]
        })
    }

    /// Concatenate along the batch axis.
    pub fn stack(parts: &[Var<'g>]) -> Var<'g> {
        let graph = parts[0].graph;
        let vals: Vec<Tensor> = parts.iter().map(|p| (*p.value()).clone()).collect();
        let lens: Vec<(usize, Vec<usize>)> =
            vals.iter().map(|v| (v.len(), v.shape().to_vec())).collect();
        let out = Tensor::stack(&vals);
        graph.op(out, parts, move |g, need| {
            let mut off = 0;
            lens.iter()
                .zip(need)
                .map(|((len, shape), &nd)| {
                    let start = off;
                    off += len;
                    nd.then(|| Tensor::from_vec(shape, g.data()[start..start + len].to_vec()))
                })
                .collect()
        })
    }

    /// Apply a fixed sparse map along the last axis: `[N,C,P] -> [N,C,Q]`.
    pub fn spmm(&self, s: Rc<SparseMatrix>) -> Var<'g> {
        let x = self.value();
        let shape = x.shape().to_vec();
        assert_eq!(shape.len(), 3, "spmm expects [N,C,P]");
        let (n, c, p) = (shape[0], shape[1], shape[2]);
        assert_eq!(p, s.cols, "spmm: {p} points vs matrix with {} columns", s.cols);
        let q = s.rows;
        let mut y = vec![0.0; n * c * q];
        for (src, dst) in x.data().chunks(p).zip(y.chunks_mut(q)) {
            s.apply(src, dst);
        }
        self.graph
            .op(Tensor::from_vec(&[n, c, q], y), &[*self], move |g, _| {
                let mut d = vec![0.0; n * c * p];
                for (gr, dr) in g.data().chunks(q).zip(d.chunks_mut(p)) {
                    s.apply_transpose_acc(gr, dr);
                }
                vec![Some(Tensor::from_vec(&shape, d))]
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference gradient of `f` at `x`.
    fn numeric_grad(x: &Tensor, f: &dyn Fn(&Tensor) -> f64, h: f64) -> Tensor {
        let mut g = Tensor::zeros(x.shape());
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            g.data_mut()[i] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    /// Checks d(Σ w ⊙ op(x))/dx against finite differences for every input.
    fn check(inputs: Vec<Tensor>, build: &dyn for<'g> Fn(&'g Graph, &[Var<'g>]) -> Var<'g>) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = build(&g, &vars);
        let weights = Tensor::randn(&out.shape(), 1.0, &mut rng);
        let wv = g.constant(weights.clone());
        let loss = out.mul(wv).sum();
        let grads = g.backward(loss);
        for (k, x) in inputs.iter().enumerate() {
            let eval = |xk: &Tensor| {
                let g2 = Graph::new();
                let vs: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| g2.constant(if j == k { xk.clone() } else { t.clone() }))
                    .collect();
                let o = build(&g2, &vs);
                o.value()
                    .data()
                    .iter()
                    .zip(weights.data())
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
            };
            let num = numeric_grad(x, &eval, 1e-6);
            let ana = grads.get_or_zeros(vars[k]);
            for (a, b) in ana.data().iter().zip(num.data()) {
                assert!(
                    (a - b).abs() <= 1e-5 * (1.0 + b.abs()),
                    "input {k}: analytic {a} vs numeric {b}"
                );
            }
        }
    }

    fn rnd(shape: &[usize], seed: u64) -> Tensor {
        Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn conv2d_gradients() {
        for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
            check(
                vec![rnd(&[2, 3, 6, 5], 1), rnd(&[4, 3, 3, 3], 2), rnd(&[4], 3)],
                &|_, v| v[0].conv2d(v[1], Some(v[2]), stride, pad),
            );
        }
    }

    #[test]
    fn conv2d_matches_direct_loop() {
        let x = rnd(&[1, 2, 5, 5], 4);
        let w = rnd(&[3, 2, 3, 3], 5);
        let y = conv2d_forward(&x, &w, None, 2, 1);
        assert_eq!(y.shape(), &[1, 3, 3, 3]);
        for o in 0..3 {
            for oy in 0..3 {
                for ox in 0..3 {
                    let mut acc = 0.0;
                    for c in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if (0..5).contains(&iy) && (0..5).contains(&ix) {
                                    acc += x.data()[(c * 5 + iy as usize) * 5 + ix as usize]
                                        * w.data()[((o * 2 + c) * 3 + ky) * 3 + kx];
                                }
                            }
                        }
                    }
                    let got = y.data()[(o * 3 + oy) * 3 + ox];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn linear_and_elementwise_gradients() {
        check(
            vec![rnd(&[3, 4], 1), rnd(&[2, 4], 2), rnd(&[2], 3)],
            &|_, v| v[0].linear(v[1], Some(v[2])).sigmoid(),
        );
        check(vec![rnd(&[5], 4), rnd(&[5], 5)], &|_, v| {
            v[0].mul(v[1]).add(v[0].square()).sub(v[1].softplus())
        });
        check(vec![rnd(&[5], 6), rnd(&[5], 7).map(|x| x.abs() + 1.0)], &|_, v| {
            v[0].div(v[1]).leaky_relu(0.2)
        });
    }

    #[test]
    fn norm_and_resampling_gradients() {
        check(vec![rnd(&[2, 3, 4, 4], 1)], &|_, v| v[0].instance_norm(1e-5));
        check(
            vec![rnd(&[2, 3, 2, 2], 1), rnd(&[2, 3], 2), rnd(&[2, 3], 3)],
            &|_, v| v[0].channel_affine(v[1], v[2]),
        );
        check(vec![rnd(&[1, 2, 3, 4], 1)], &|_, v| v[0].upsample2x());
        check(vec![rnd(&[1, 2, 4, 4], 1)], &|_, v| v[0].avg_pool2x());
        check(vec![rnd(&[2, 3, 2, 3], 1)], &|_, v| {
            v[0].concat_w(v[0].flip_w().scale_channels(vec![1.0, 1.0, -1.0]))
        });
    }

    #[test]
    fn structural_gradients() {
        check(vec![rnd(&[2, 2, 3, 3], 1), rnd(&[2, 1, 3, 3], 2)], &|_, v| {
            Var::concat_channels(&[v[0], v[1]]).narrow_channels(1, 2).mul_mask(v[1])
        });
        check(vec![rnd(&[2, 3, 2, 2], 1), rnd(&[2, 3], 2)], &|_, v| {
            v[0].channel_dot(v[1]).reshape(&[8])
        });
        check(vec![rnd(&[2, 3, 2, 2], 1)], &|_, v| {
            v[0].global_avg_pool().mul(v[0].global_avg_pool())
        });
        check(vec![rnd(&[1, 2, 2, 2], 1)], &|_, v| v[0].expand_batch(3).square());
        check(vec![rnd(&[3, 2], 1)], &|_, v| {
            Var::stack(&[v[0].select(2), v[0].select(0)]).sum_per_sample()
        });
        let s = Rc::new(SparseMatrix::from_rows(
            4,
            &[vec![(0, 0.5), (3, 0.5)], vec![(1, 1.0)], vec![(2, -1.0), (0, 2.0)]],
        ));
        check(vec![rnd(&[2, 3, 4], 1)], &move |_, v| v[0].spmm(s.clone()));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let g = Graph::new();
        let a = g.leaf(Tensor::scalar(2.0));
        let b = g.constant(Tensor::scalar(3.0));
        let loss = a.mul(b).add(b.detach());
        let grads = g.backward(loss);
        assert_eq!(grads.get(a).unwrap().item(), 3.0);
        assert!(grads.get(b).is_none());
    }
}
