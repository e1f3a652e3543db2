//! Tape-based reverse-mode differentiation over `f64` NCHW tensors.
//!
//! Every op appends a node holding its output value and, when gradients are
//! enabled, a closure mapping the node's output gradient to gradients for its
//! parents. `backward` walks the tape once in reverse.

use std::collections::HashMap;

use ndarray::{ArrayD, IxDyn};

use crate::error::{MarsError, Result};
use crate::params::{ParamId, ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

type BackwardFn = Box<dyn Fn(&Graph, &Tensor) -> Vec<Tensor>>;

struct Node {
    value: Tensor,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
}

/// Running-statistics update produced by a train-mode batch norm.
#[derive(Debug, Clone)]
pub struct BnUpdate {
    pub mean: ParamId,
    pub var: ParamId,
    pub batch_mean: Vec<f64>,
    pub batch_var_unbiased: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
    params: HashMap<ParamId, Var>,
    bn_updates: Vec<BnUpdate>,
    grads: Vec<Option<Tensor>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn shape4(t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match t.shape() {
        &[n, c, h, w] => Ok((n, c, h, w)),
        s => Err(MarsError::Structural(format!(
            "expected a rank-4 tensor, got shape {s:?}"
        ))),
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

/// `c[m,n] (+)= a[m,k] * b[k,n]` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: slices cover the strided extents computed by the callers below.
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

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col(x: &[f64], g: &ConvGeom, out: &mut [f64]) {
    let l = g.cols();
    let mut r = 0;
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = &mut out[r * l..(r + 1) * l];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let dst = &mut row[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
                r += 1;
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let l = g.cols();
    let mut r = 0;
    for c in 0..g.c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = &cols[r * l..(r + 1) * l];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = iy as usize * g.w;
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            plane[base + ix as usize] += row[oy * g.wo + ox];
                        }
                    }
                }
                r += 1;
            }
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: true,
            params: HashMap::new(),
            bn_updates: Vec::new(),
            grads: Vec::new(),
        }
    }

    /// A graph that records values only; `backward` is unavailable.
    pub fn inference() -> Self {
        Graph {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    fn push(&mut self, value: Tensor, parents: Vec<Var>, backward: Option<BackwardFn>) -> Var {
        let backward = if self.grad_enabled { backward } else { None };
        self.nodes.push(Node {
            value,
            parents,
            backward,
        });
        Var(self.nodes.len() - 1)
    }

    /// Register an op with a caller-supplied backward rule. The closure
    /// returns one gradient per parent, in order.
    pub fn custom<F>(&mut self, parents: &[Var], value: Tensor, backward: F) -> Var
    where
        F: Fn(&Graph, &Tensor) -> Vec<Tensor> + 'static,
    {
        self.push(value, parents.to_vec(), Some(Box::new(backward)))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        let t = if t.is_standard_layout() {
            t
        } else {
            t.as_standard_layout().into_owned()
        };
        self.push(t, Vec::new(), None)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.input(store.get(id).clone());
        self.params.insert(id, v);
        v
    }

    pub fn bn_updates(&self) -> &[BnUpdate] {
        &self.bn_updates
    }

    /// Reverse sweep from a scalar node. Gradients are retrievable with
    /// [`Graph::grad`] and [`Graph::param_grads`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.grad_enabled {
            return Err(MarsError::Structural(
                "backward called on an inference graph".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(MarsError::Structural(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(ArrayD::from_elem(self.value(loss).raw_dim(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if let Some(bw) = &self.nodes[i].backward {
                let pg = bw(self, &g);
                debug_assert_eq!(pg.len(), self.nodes[i].parents.len());
                for (p, pgrad) in self.nodes[i].parents.iter().zip(pg) {
                    match &mut grads[p.0] {
                        Some(acc) => *acc += &pgrad,
                        slot @ None => *slot = Some(pgrad),
                    }
                }
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients for every parameter bound into this graph that received one.
    pub fn param_grads(&self) -> HashMap<ParamId, Tensor> {
        self.params
            .iter()
            .filter_map(|(&id, &v)| self.grad(v).map(|g| (id, g.clone())))
            .collect()
    }

    // ---- elementwise -------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(MarsError::Structural(format!(
                "add: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        let v = self.value(a) + self.value(b);
        Ok(self.custom(&[a, b], v, |_, g| vec![g.clone(), g.clone()]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(MarsError::Structural(format!(
                "mul: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        let v = self.value(a) * self.value(b);
        Ok(self.custom(&[a, b], v, move |gr, g| vec![g * gr.value(b), g * gr.value(a)]))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        self.custom(&[a], v, move |_, g| vec![g * k])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let v = self.value(x).mapv(|e| if e > 0.0 { e } else { slope * e });
        self.custom(&[x], v, move |gr, g| {
            let mut d = g.clone();
            ndarray::Zip::from(&mut d).and(gr.value(x)).for_each(|d, &e| {
                if e <= 0.0 {
                    *d *= slope
                }
            });
            vec![d]
        })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(sigmoid);
        let out = Var(self.nodes.len());
        self.custom(&[x], v, move |gr, g| {
            let mut d = g.clone();
            ndarray::Zip::from(&mut d)
                .and(gr.value(out))
                .for_each(|d, &s| *d *= s * (1.0 - s));
            vec![d]
        })
    }

    /// Identity forward, gradient multiplied by `-coeff` on the way back.
    pub fn grad_reverse(&mut self, x: Var, coeff: f64) -> Var {
        let v = self.value(x).clone();
        self.custom(&[x], v, move |_, g| vec![g * (-coeff)])
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let v = ArrayD::from_elem(IxDyn(&[]), self.value(x).sum());
        self.custom(&[x], v, move |gr, g| {
            vec![ArrayD::from_elem(gr.value(x).raw_dim(), g.sum())]
        })
    }

    /// `sum(x * w)` for a constant weight tensor `w`.
    pub fn weighted_sum(&mut self, x: Var, w: Tensor) -> Result<Var> {
        if self.shape(x) != w.shape() {
            return Err(MarsError::Structural(format!(
                "weighted_sum: shapes {:?} and {:?} differ",
                self.shape(x),
                w.shape()
            )));
        }
        let s = (self.value(x) * &w).sum();
        let v = ArrayD::from_elem(IxDyn(&[]), s);
        Ok(self.custom(&[x], v, move |_, g| vec![&w * g.sum()]))
    }

    /// `Σ coeff_i · x_i` over scalar nodes.
    pub fn combine(&mut self, terms: &[(Var, f64)]) -> Var {
        let s: f64 = terms.iter().map(|&(v, k)| k * self.value(v).sum()).sum();
        let coeffs: Vec<f64> = terms.iter().map(|t| t.1).collect();
        let parents: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let ps = parents.clone();
        self.custom(&ps, ArrayD::from_elem(IxDyn(&[]), s), move |gr, g| {
            let gs = g.sum();
            parents
                .iter()
                .zip(&coeffs)
                .map(|(&p, &k)| ArrayD::from_elem(gr.value(p).raw_dim(), gs * k))
                .collect()
        })
    }

    /// `[N,C,H,W] -> [N,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = shape4(self.value(x))?;
        let hw = (h * w) as f64;
        let xs = self.value(x).as_slice().expect("standard layout");
        let mut out = vec![0.0; n * c];
        for (o, plane) in out.iter_mut().zip(xs.chunks(h * w)) {
            *o = plane.iter().sum::<f64>() / hw;
        }
        let v = ArrayD::from_shape_vec(IxDyn(&[n, c]), out).expect("shape");
        Ok(self.custom(&[x], v, move |_, g| {
            let gs = g.as_standard_layout();
            let gs = gs.as_slice().expect("standard layout");
            let mut d = vec![0.0; n * c * h * w];
            for (plane, &gv) in d.chunks_mut(h * w).zip(gs) {
                plane.fill(gv / hw);
            }
            vec![ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), d).expect("shape")]
        }))
    }

    /// Multiply each channel plane of `x: [N,C,H,W]` by `gate: [N,C]`.
    pub fn scale_channels(&mut self, x: Var, gate: Var) -> Result<Var> {
        let (n, c, h, w) = shape4(self.value(x))?;
        if self.shape(gate) != [n, c] {
            return Err(MarsError::Structural(format!(
                "scale_channels: gate shape {:?} does not match [{n}, {c}]",
                self.shape(gate)
            )));
        }
        let hw = h * w;
        let mut v = self.value(x).as_standard_layout().into_owned();
        {
            let gs = self.value(gate).as_slice().expect("standard layout");
            for (plane, &gv) in v.as_slice_mut().unwrap().chunks_mut(hw).zip(gs) {
                plane.iter_mut().for_each(|e| *e *= gv);
            }
        }
        Ok(self.custom(&[x, gate], v, move |gr, g| {
            let g = g.as_standard_layout();
            let gsl = g.as_slice().unwrap();
            let xv = gr.value(x).as_slice().unwrap();
            let gate_v = gr.value(gate).as_slice().unwrap();
            let mut dx = vec![0.0; n * c * hw];
            let mut dg = vec![0.0; n * c];
            for i in 0..n * c {
                let gp = &gsl[i * hw..(i + 1) * hw];
                let xp = &xv[i * hw..(i + 1) * hw];
                for j in 0..hw {
                    dx[i * hw + j] = gp[j] * gate_v[i];
                }
                dg[i] = gp.iter().zip(xp).map(|(a, b)| a * b).sum();
            }
            vec![
                ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), dx).unwrap(),
                ArrayD::from_shape_vec(IxDyn(&[n, c]), dg).unwrap(),
            ]
        }))
    }

    /// Nearest-neighbour 2x upsampling of `[N,C,H,W]`.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = shape4(self.value(x))?;
        let xs = self.value(x).as_slice().unwrap();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![0.0; n * c * h2 * w2];
        for p in 0..n * c {
            let src = &xs[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * h2 * w2..(p + 1) * h2 * w2];
            for y in 0..h2 {
                for xx in 0..w2 {
                    dst[y * w2 + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        let v = ArrayD::from_shape_vec(IxDyn(&[n, c, h2, w2]), out).unwrap();
        Ok(self.custom(&[x], v, move |_, g| {
            let g = g.as_standard_layout();
            let gs = g.as_slice().unwrap();
            let mut d = vec![0.0; n * c * h * w];
            for p in 0..n * c {
                let src = &gs[p * h2 * w2..(p + 1) * h2 * w2];
                let dst = &mut d[p * h * w..(p + 1) * h * w];
                for y in 0..h2 {
                    for xx in 0..w2 {
                        dst[(y / 2) * w + xx / 2] += src[y * w2 + xx];
                    }
                }
            }
            vec![ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), d).unwrap()]
        }))
    }

    /// Concatenate `[N,C_i,H,W]` tensors along channels.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let (n, _, h, w) = shape4(self.value(xs[0]))?;
        let mut chans = Vec::with_capacity(xs.len());
        for &x in xs {
            let (n2, c, h2, w2) = shape4(self.value(x))?;
            if (n2, h2, w2) != (n, h, w) {
                return Err(MarsError::Structural(format!(
                    "concat: shape {:?} incompatible with batch {n} and spatial {h}x{w}",
                    self.shape(x)
                )));
            }
            chans.push(c);
        }
        let ctot: usize = chans.iter().sum();
        let hw = h * w;
        let mut out = vec![0.0; n * ctot * hw];
        for b in 0..n {
            let mut off = 0;
            for (&x, &c) in xs.iter().zip(&chans) {
                let src = &self.value(x).as_slice().unwrap()[b * c * hw..(b + 1) * c * hw];
                out[(b * ctot + off) * hw..(b * ctot + off + c) * hw].copy_from_slice(src);
                off += c;
            }
        }
        let v = ArrayD::from_shape_vec(IxDyn(&[n, ctot, h, w]), out).unwrap();
        Ok(self.custom(xs, v, move |_, g| {
            let g = g.as_standard_layout();
            let gs = g.as_slice().unwrap();
            let mut res = Vec::with_capacity(chans.len());
            let mut off = 0;
            for &c in &chans {
                let mut d = vec![0.0; n * c * hw];
                for b in 0..n {
                    d[b * c * hw..(b + 1) * c * hw]
                        .copy_from_slice(&gs[(b * ctot + off) * hw..(b * ctot + off + c) * hw]);
                }
                res.push(ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), d).unwrap());
                off += c;
            }
            res
        }))
    }

    // ---- linear layers -----------------------------------------------------

    /// 2-D convolution. `x: [N,C,H,W]`, `w: [O,C,KH,KW]`, `b: [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (n, c, h, wd) = shape4(self.value(x))?;
        let (o, wc, kh, kw) = shape4(self.value(w))?;
        if wc != c {
            return Err(MarsError::Structural(format!(
                "conv2d: input has {c} channels, kernel expects {wc}"
            )));
        }
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(MarsError::Structural(format!(
                    "conv2d: bias shape {:?}, expected [{o}]",
                    self.shape(b)
                )));
            }
        }
        if stride == 0 || h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(MarsError::Structural(format!(
                "conv2d: {kh}x{kw} kernel does not fit a {h}x{wd} input with padding {pad}"
            )));
        }
        let geom = ConvGeom {
            c,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (wd + 2 * pad - kw) / stride + 1,
        };
        let (k, l) = (geom.rows(), geom.cols());
        let xs = self.value(x).as_slice().expect("standard layout");
        let ws = self.value(w).as_slice().expect("standard layout");
        let pointwise = geom.is_pointwise();
        let mut cols = if pointwise {
            Vec::new()
        } else {
            vec![0.0; n * k * l]
        };
        let mut out = vec![0.0; n * o * l];
        for s in 0..n {
            let xin = &xs[s * c * h * wd..(s + 1) * c * h * wd];
            let col: &[f64] = if pointwise {
                xin
            } else {
                let dst = &mut cols[s * k * l..(s + 1) * k * l];
                im2col(xin, &geom, dst);
                dst
            };
            let dst = &mut out[s * o * l..(s + 1) * o * l];
            if let Some(b) = b {
                let bs = self.value(b).as_slice().unwrap();
                for (row, &bv) in dst.chunks_mut(l).zip(bs) {
                    row.fill(bv);
                }
                gemm(o, k, l, ws, k as isize, 1, col, l as isize, 1, 1.0, dst);
            } else {
                gemm(o, k, l, ws, k as isize, 1, col, l as isize, 1, 0.0, dst);
            }
        }
        let v = ArrayD::from_shape_vec(IxDyn(&[n, o, geom.ho, geom.wo]), out).unwrap();
        let mut parents = vec![x, w];
        parents.extend(b);
        let has_bias = b.is_some();
        Ok(self.custom(&parents, v, move |gr, g| {
            let g = g.as_standard_layout();
            let gs = g.as_slice().unwrap();
            let xs = gr.value(x).as_slice().unwrap();
            let ws = gr.value(w).as_slice().unwrap();
            let mut dx = vec![0.0; n * c * h * wd];
            let mut dw = vec![0.0; o * k];
            let mut dcol = vec![0.0; k * l];
            for s in 0..n {
                let gout = &gs[s * o * l..(s + 1) * o * l];
                let col: &[f64] = if pointwise {
                    &xs[s * c * h * wd..(s + 1) * c * h * wd]
                } else {
                    &cols[s * k * l..(s + 1) * k * l]
                };
                // dW[o,k] += gout[o,l] * col^T[l,k]
                gemm(o, l, k, gout, l as isize, 1, col, 1, l as isize, 1.0, &mut dw);
                // dcol[k,l] = W^T[k,o] * gout[o,l]
                let dxs = &mut dx[s * c * h * wd..(s + 1) * c * h * wd];
                if pointwise {
                    gemm(k, o, l, ws, 1, k as isize, gout, l as isize, 1, 0.0, dxs);
                } else {
                    gemm(k, o, l, ws, 1, k as isize, gout, l as isize, 1, 0.0, &mut dcol);
                    col2im(&dcol, &geom, dxs);
                }
            }
            let mut res = vec![
                ArrayD::from_shape_vec(IxDyn(&[n, c, h, wd]), dx).unwrap(),
                ArrayD::from_shape_vec(IxDyn(&[o, c, kh, kw]), dw).unwrap(),
            ];
            if has_bias {
                let mut db = vec![0.0; o];
                for s in 0..n {
                    for (oc, d) in db.iter_mut().enumerate() {
                        let base = (s * o + oc) * l;
                        *d += gs[base..base + l].iter().sum::<f64>();
                    }
                }
                res.push(ArrayD::from_shape_vec(IxDyn(&[o]), db).unwrap());
            }
            res
        }))
    }

    /// `x: [N,F]`, `w: [K,F]`, `b: [K]` -> `[N,K]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, f) = match self.shape(x) {
            &[n, f] => (n, f),
            s => {
                return Err(MarsError::Structural(format!(
                    "linear: expected [N,F] input, got {s:?}"
                )))
            }
        };
        let k = match self.shape(w) {
            &[k, f2] if f2 == f => k,
            s => {
                return Err(MarsError::Structural(format!(
                    "linear: weight shape {s:?} incompatible with {f} features"
                )))
            }
        };
        if self.shape(b) != [k] {
            return Err(MarsError::Structural(format!(
                "linear: bias shape {:?}, expected [{k}]",
                self.shape(b)
            )));
        }
        let xs = self.value(x).as_slice().unwrap();
        let ws = self.value(w).as_slice().unwrap();
        let bs = self.value(b).as_slice().unwrap();
        let mut out = vec![0.0; n * k];
        for row in out.chunks_mut(k) {
            row.copy_from_slice(bs);
        }
        // out[n,k] += x[n,f] * w^T[f,k]
        gemm(n, f, k, xs, f as isize, 1, ws, 1, f as isize, 1.0, &mut out);
        let v = ArrayD::from_shape_vec(IxDyn(&[n, k]), out).unwrap();
        Ok(self.custom(&[x, w, b], v, move |gr, g| {
            let g = g.as_standard_layout();
            let gs = g.as_slice().unwrap();
            let xs = gr.value(x).as_slice().unwrap();
            let ws = gr.value(w).as_slice().unwrap();
            let mut dx = vec![0.0; n * f];
            gemm(n, k, f, gs, k as isize, 1, ws, f as isize, 1, 0.0, &mut dx);
            let mut dw = vec![0.0; k * f];
            gemm(k, n, f, gs, 1, k as isize, xs, f as isize, 1, 0.0, &mut dw);
            let mut db = vec![0.0; k];
            for row in gs.chunks(k) {
                for (d, v) in db.iter_mut().zip(row) {
                    *d += v;
                }
            }
            vec![
                ArrayD::from_shape_vec(IxDyn(&[n, f]), dx).unwrap(),
                ArrayD::from_shape_vec(IxDyn(&[k, f]), dw).unwrap(),
                ArrayD::from_shape_vec(IxDyn(&[k]), db).unwrap(),
            ]
        }))
    }

    /// Row-wise softmax of `[N,K]`.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let k = match self.shape(x) {
            &[_, k] => k,
            s => {
                return Err(MarsError::Structural(format!(
                    "softmax: expected [N,K], got {s:?}"
                )))
            }
        };
        let mut v = self.value(x).as_standard_layout().into_owned();
        for row in v.as_slice_mut().unwrap().chunks_mut(k) {
            softmax_in_place(row);
        }
        let out = Var(self.nodes.len());
        Ok(self.custom(&[x], v, move |gr, g| {
            let g = g.as_standard_layout();
            let gs = g.as_slice().unwrap();
            let p = gr.value(out).as_slice().unwrap();
            let mut d = vec![0.0; p.len()];
            for ((drow, grow), prow) in d.chunks_mut(k).zip(gs.chunks(k)).zip(p.chunks(k)) {
                let dot: f64 = grow.iter().zip(prow).map(|(a, b)| a * b).sum();
                for j in 0..k {
                    drow[j] = prow[j] * (grow[j] - dot);
                }
            }
            vec![ArrayD::from_shape_vec(gr.value(out).raw_dim(), d).unwrap()]
        }))
    }

    // ---- batch norm --------------------------------------------------------

    /// Per-channel normalisation of `[N,C,H,W]`.
    ///
    /// Train mode normalises by batch statistics (biased variance) and records
    /// a [`BnUpdate`]; eval mode uses the stored running statistics.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        store: &ParamStore,
        x: Var,
        gamma: ParamId,
        beta: ParamId,
        running_mean: ParamId,
        running_var: ParamId,
        eps: f64,
        mode: Mode,
    ) -> Result<Var> {
        let (n, c, h, w) = shape4(self.value(x))?;
        if store.get(gamma).shape() != [c] {
            return Err(MarsError::Structural(format!(
                "batch_norm: {c} channels, parameters have shape {:?}",
                store.get(gamma).shape()
            )));
        }
        let gv = self.param(store, gamma);
        let bv = self.param(store, beta);
        let hw = h * w;
        let m = (n * hw) as f64;
        let xs = self.value(x).as_slice().expect("standard layout");
        let mut pending = None;
        let (mean, var): (Vec<f64>, Vec<f64>) = match mode {
            Mode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for b in 0..n {
                        s += xs[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().sum::<f64>();
                    }
                    let mu = s / m;
                    let mut q = 0.0;
                    for b in 0..n {
                        q += xs[(b * c + ch) * hw..(b * c + ch + 1) * hw]
                            .iter()
                            .map(|v| (v - mu) * (v - mu))
                            .sum::<f64>();
                    }
                    mean[ch] = mu;
                    var[ch] = q / m;
                }
                let unbiased = if m > 1.0 {
                    var.iter().map(|v| v * m / (m - 1.0)).collect()
                } else {
                    var.clone()
                };
                pending = Some(BnUpdate {
                    mean: running_mean,
                    var: running_var,
                    batch_mean: mean.clone(),
                    batch_var_unbiased: unbiased,
                });
                (mean, var)
            }
            Mode::Eval => (
                store.get(running_mean).iter().copied().collect(),
                store.get(running_var).iter().copied().collect(),
            ),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let gs: Vec<f64> = store.get(gamma).iter().copied().collect();
        let bs: Vec<f64> = store.get(beta).iter().copied().collect();
        let mut xhat = vec![0.0; n * c * hw];
        let mut out = vec![0.0; n * c * hw];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                for i in base..base + hw {
                    let xh = (xs[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = gs[ch] * xh + bs[ch];
                }
            }
        }
        self.bn_updates.extend(pending);
        let v = ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), out).unwrap();
        let train = mode == Mode::Train;
        Ok(self.custom(&[x, gv, bv], v, move |gr, g| {
            let g = g.as_standard_layout();
            let gsl = g.as_slice().unwrap();
            let gamma_v = gr.value(gv).as_slice().unwrap();
            let mut dx = vec![0.0; n * c * hw];
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for ch in 0..c {
                let (mut sdy, mut sdyx) = (0.0, 0.0);
                for b in 0..n {
                    let base = (b * c + ch) * hw;
                    for i in base..base + hw {
                        sdy += gsl[i];
                        sdyx += gsl[i] * xhat[i];
                    }
                }
                dgamma[ch] = sdyx;
                dbeta[ch] = sdy;
                let k = gamma_v[ch] * inv_std[ch];
                for b in 0..n {
                    let base = (b * c + ch) * hw;
                    for i in base..base + hw {
                        dx[i] = if train {
                            k * (gsl[i] - sdy / m - xhat[i] * sdyx / m)
                        } else {
                            k * gsl[i]
                        };
                    }
                }
            }
            vec![
                ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), dx).unwrap(),
                ArrayD::from_shape_vec(IxDyn(&[c]), dgamma).unwrap(),
                ArrayD::from_shape_vec(IxDyn(&[c]), dbeta).unwrap(),
            ]
        }))
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    sigmoid(x)
}

/// Apply recorded running-statistic updates: `r <- (1-m) r + m batch`.
pub fn apply_bn_updates(store: &mut ParamStore, updates: &[BnUpdate], momentum: f64) {
    for u in updates {
        for (r, b) in store.get_mut(u.mean).iter_mut().zip(&u.batch_mean) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
        for (r, b) in store.get_mut(u.var).iter_mut().zip(&u.batch_var_unbiased) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Array::from_shape_vec(
            IxDyn(shape),
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    /// Direct-loop convolution, independent of im2col/gemm.
    fn conv_naive(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (n, c, h, wd) = shape4(x).unwrap();
        let (o, _, kh, kw) = shape4(w).unwrap();
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let mut out = ArrayD::zeros(IxDyn(&[n, o, ho, wo]));
        for s in 0..n {
            for oc in 0..o {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b[[oc]];
                        for ic in 0..c {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let iy = (oy * stride + ki) as isize - pad as isize;
                                    let ix = (ox * stride + kj) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += x[[s, ic, iy as usize, ix as usize]] * w[[oc, ic, ki, kj]];
                                    }
                                }
                            }
                        }
                        out[[s, oc, oy, ox]] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(k, stride, pad) in &[(1, 1, 0), (3, 1, 1), (3, 2, 1), (7, 2, 3), (5, 2, 2), (1, 2, 0)] {
            let x = rand_tensor(&mut rng, &[2, 3, 7, 6]);
            let w = rand_tensor(&mut rng, &[4, 3, k, k]);
            let b = rand_tensor(&mut rng, &[4]);
            let mut g = Graph::new();
            let xv = g.input(x.clone());
            let wv = g.input(w.clone());
            let bv = g.input(b.clone());
            let y = g.conv2d(xv, wv, Some(bv), stride, pad).unwrap();
            let reference = conv_naive(&x, &w, &b, stride, pad);
            assert_eq!(g.value(y).shape(), reference.shape());
            for (a, r) in g.value(y).iter().zip(reference.iter()) {
                assert!((a - r).abs() < 1e-12);
            }
        }
    }

    fn check_grads<F>(inputs: Vec<Tensor>, f: F)
    where
        F: Fn(&mut Graph, &[Var]) -> Var,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars);
        let wts = rand_tensor(&mut rng, g.shape(out));
        let loss = g.weighted_sum(out, wts.clone()).unwrap();
        g.backward(loss).unwrap();
        let eval = |ins: &[Tensor]| {
            let mut g = Graph::inference();
            let vars: Vec<Var> = ins.iter().map(|t| g.input(t.clone())).collect();
            let out = f(&mut g, &vars);
            (g.value(out) * &wts).sum()
        };
        let h = 1e-6;
        for (i, v) in vars.iter().enumerate() {
            let analytic = g.grad(*v).unwrap().clone();
            for j in 0..inputs[i].len() {
                let mut plus = inputs.clone();
                plus[i].as_slice_mut().unwrap()[j] += h;
                let mut minus = inputs.clone();
                minus[i].as_slice_mut().unwrap()[j] -= h;
                let num = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.as_slice().unwrap()[j];
                assert!(
                    (a - num).abs() <= 1e-6 * (1.0 + a.abs()),
                    "input {i} elem {j}: analytic {a} numeric {num}"
                );
            }
        }
    }

    #[test]
    fn op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&mut rng, &[2, 2, 4, 3]);
        let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
        let b = rand_tensor(&mut rng, &[3]);
        check_grads(vec![x.clone(), w, b], |g, v| {
            g.conv2d(v[0], v[1], Some(v[2]), 2, 1).unwrap()
        });
        let w1 = rand_tensor(&mut rng, &[3, 2, 1, 1]);
        check_grads(vec![x.clone(), w1], |g, v| {
            g.conv2d(v[0], v[1], None, 1, 0).unwrap()
        });
        check_grads(vec![x.clone()], |g, v| g.sigmoid(v[0]));
        check_grads(vec![x.clone()], |g, v| g.upsample2(v[0]).unwrap());
        check_grads(vec![x.clone()], |g, v| g.global_avg_pool(v[0]).unwrap());
        let gate = rand_tensor(&mut rng, &[2, 2]);
        check_grads(vec![x.clone(), gate], |g, v| {
            g.scale_channels(v[0], v[1]).unwrap()
        });
        let y = rand_tensor(&mut rng, &[2, 1, 4, 3]);
        check_grads(vec![x.clone(), y], |g, v| {
            g.concat_channels(&[v[0], v[1]]).unwrap()
        });
        let z = rand_tensor(&mut rng, &[3, 5]);
        let lw = rand_tensor(&mut rng, &[4, 5]);
        let lb = rand_tensor(&mut rng, &[4]);
        check_grads(vec![z.clone(), lw, lb], |g, v| {
            g.linear(v[0], v[1], v[2]).unwrap()
        });
        check_grads(vec![z], |g, v| g.softmax(v[0]).unwrap());
    }

    #[test]
    fn batch_norm_train_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new(0);
        let gamma = store.uniform("g", &[2], 1.0);
        let beta = store.uniform("b", &[2], 1.0);
        let rm = store.buffer("rm", &[2], 0.0);
        let rv = store.buffer("rv", &[2], 1.0);
        let x = rand_tensor(&mut rng, &[3, 2, 2, 2]);
        check_grads(vec![x], move |g, v| {
            g.batch_norm(&store, v[0], gamma, beta, rm, rv, 1e-5, Mode::Train)
                .unwrap()
        });
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let x = g.input(ArrayD::zeros(IxDyn(&[2])));
        assert!(g.backward(x).is_err());
    }
}
