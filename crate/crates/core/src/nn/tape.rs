use rand::Rng;

use super::conv::{self, ConvGeom};
use super::warp;
use super::{ParamSet, Tensor};
use crate::par;
use crate::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Clamp used when taking logs of probabilities.
pub const PROB_EPS: f64 = 1e-7;

enum Op {
    Leaf,
    Conv { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Deconv { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Add(Var, Var),
    Concat { a: Var, b: Var },
    PRelu { x: Var, slope: Var },
    Sigmoid(Var),
    Mask { x: Var, mask: Vec<f64> },
    Dense { x: Var, w: Var, b: Var },
    Reshape(Var),
    Warp { x: Var, theta: Var, coords: Vec<Vec<[f64; 3]>> },
    BceLogits { z: Var, target: Vec<f64> },
    BceProb { p: Var, target: Vec<f64> },
    SumSquares(Var),
    Scale(Var, f64),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Dynamic record of a forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(e) => e.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is collected by [`Tape::backward`].
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Bind every parameter of `params` as a leaf; frozen sets get no gradient.
    pub fn bind(&mut self, params: &ParamSet, trainable: bool) -> Vec<Var> {
        params
            .iter()
            .map(|p| {
                if trainable {
                    self.variable(p.value.clone())
                } else {
                    self.constant(p.value.clone())
                }
            })
            .collect()
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeom::conv(self.shape(x), self.shape(w), stride, pad)?;
        if let Some(b) = b {
            if self.shape(b) != [geom.co] {
                return Err(Error::Shape(format!("conv3d bias {:?} for {} channels", self.shape(b), geom.co)));
            }
        }
        let y = conv::conv3d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let shape = vec![geom.n, geom.co, geom.output[0], geom.output[1], geom.output[2]];
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::new(shape, y)?, Op::Conv { x, w, b, geom }, rg))
    }

    /// Transposed convolution; weight layout `[Ci, Co, k, k, k]`.
    pub fn deconv3d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeom::deconv(self.shape(x), self.shape(w), stride, pad)?;
        if let Some(b) = b {
            if self.shape(b) != [geom.ci] {
                return Err(Error::Shape(format!("deconv3d bias {:?} for {} channels", self.shape(b), geom.ci)));
            }
        }
        let mut y = conv::conv3d_backward_input(self.value(x).data(), self.value(w).data(), &geom);
        if let Some(b) = b {
            let bias = self.value(b).data();
            let sp = geom.in_spatial();
            for (i, chan) in y.chunks_mut(sp).enumerate() {
                let c = i % geom.ci;
                chan.iter_mut().for_each(|v| *v += bias[c]);
            }
        }
        let shape = vec![geom.n, geom.ci, geom.input[0], geom.input[1], geom.input[2]];
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::new(shape, y)?, Op::Deconv { x, w, b, geom }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!("add {:?} + {:?}", self.shape(a), self.shape(b))));
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    /// Concatenate along axis 1 (channels).
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sa.len() != sb.len() || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(Error::Shape(format!("concat {sa:?} with {sb:?}")));
        }
        let inner: usize = sa[2..].iter().product();
        let (ca, cb) = (sa[1] * inner, sb[1] * inner);
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(va.len() + vb.len());
        for n in 0..sa[0] {
            data.extend_from_slice(&va[n * ca..(n + 1) * ca]);
            data.extend_from_slice(&vb[n * cb..(n + 1) * cb]);
        }
        let mut shape = sa.clone();
        shape[1] = sa[1] + sb[1];
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat { a, b }, rg))
    }

    /// Parametric ReLU with one slope per channel (axis 1).
    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || self.shape(slope) != [s[1]] {
            return Err(Error::Shape(format!("prelu slope {:?} for input {s:?}", self.shape(slope))));
        }
        let inner: usize = s[2..].iter().product();
        let a = self.value(slope).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| if v > 0.0 { v } else { a[(i / inner) % s[1]] * v })
            .collect();
        let rg = self.rg(x) || self.rg(slope);
        Ok(self.push(Tensor::new(s, data)?, Op::PRelu { x, slope }, rg))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let data = self.value(x).data().iter().map(|&v| sigmoid(v)).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::Sigmoid(x), rg)
    }

    /// Inverted dropout: kept units are scaled by `1 / keep_prob`. Identity
    /// when not training.
    pub fn dropout<R: Rng>(&mut self, x: Var, keep_prob: f64, rng: &mut R, training: bool) -> Result<Var> {
        if !(keep_prob > 0.0 && keep_prob <= 1.0) {
            return Err(Error::InvalidArgument(format!("keep_prob must lie in (0, 1], got {keep_prob}")));
        }
        if !training || keep_prob == 1.0 {
            return Ok(x);
        }
        let scale = 1.0 / keep_prob;
        let mask: Vec<f64> =
            (0..self.value(x).len()).map(|_| if rng.gen_bool(keep_prob) { scale } else { 0.0 }).collect();
        Ok(self.apply_mask(x, mask))
    }

    /// Elementwise product with a fixed mask.
    pub fn apply_mask(&mut self, x: Var, mask: Vec<f64>) -> Var {
        let data = self.value(x).data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::Mask { x, mask }, rg)
    }

    /// `y = x · wᵀ + b` with `x: [N, F]`, `w: [O, F]`, `b: [O]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x).to_vec(), self.shape(w).to_vec(), self.shape(b).to_vec());
        if sx.len() != 2 || sw.len() != 2 || sw[1] != sx[1] || sb != [sw[0]] {
            return Err(Error::Shape(format!("dense x {sx:?}, w {sw:?}, b {sb:?}")));
        }
        let (n, f, o) = (sx[0], sx[1], sw[0]);
        let (xv, wv, bv) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut y = vec![0.0; n * o];
        for i in 0..n {
            for j in 0..o {
                let row = &wv[j * f..(j + 1) * f];
                y[i * o + j] = bv[j] + row.iter().zip(&xv[i * f..(i + 1) * f]).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Tensor::new(vec![n, o], y)?, Op::Dense { x, w, b }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Flatten `[N, ...]` to `[N, F]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let shape = [s[0], s[1..].iter().product()];
        self.reshape(x, &shape)
    }

    /// Affine warp of `x: [N, C, L, W, H]` by per-sample parameters
    /// `theta: [N, 12]` (row-major 3×4), trilinear with zero padding.
    pub fn warp(&mut self, x: Var, theta: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 5 || self.shape(theta) != [s[0], 12] {
            return Err(Error::Shape(format!("warp input {s:?} with theta {:?}", self.shape(theta))));
        }
        let (n, c, dims) = (s[0], s[1], [s[2], s[3], s[4]]);
        let per = c * dims.iter().product::<usize>();
        let targets = warp::target_coords(dims);
        let (xv, tv) = (self.value(x).data(), self.value(theta).data());
        let results = par::map_range(n, |i| {
            let u = warp::to_voxel(dims, &warp::affine_source(&tv[i * 12..(i + 1) * 12], &targets));
            let mut out = vec![0.0; per];
            warp::sample(&xv[i * per..(i + 1) * per], c, dims, &u, &mut out);
            (u, out)
        });
        let mut data = Vec::with_capacity(n * per);
        let mut coords = Vec::with_capacity(n);
        for (u, out) in results {
            data.extend(out);
            coords.push(u);
        }
        let rg = self.rg(x) || self.rg(theta);
        Ok(self.push(Tensor::new(s, data)?, Op::Warp { x, theta, coords }, rg))
    }

    /// Sum of binary cross-entropy between `sigmoid(z)` and `target`.
    pub fn bce_with_logits(&mut self, z: Var, target: &[f64]) -> Result<Var> {
        let zv = self.value(z).data();
        if zv.len() != target.len() {
            return Err(Error::Shape(format!("bce logits {} vs target {}", zv.len(), target.len())));
        }
        let loss: f64 =
            zv.iter().zip(target).map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()).sum();
        let rg = self.rg(z);
        Ok(self.push(Tensor::scalar(loss), Op::BceLogits { z, target: target.to_vec() }, rg))
    }

    /// Sum of binary cross-entropy between probabilities `p` and `target`;
    /// `p` is clamped to `[PROB_EPS, 1 - PROB_EPS]` inside the logarithm, and
    /// clamped entries pass no gradient.
    pub fn bce_with_probs(&mut self, p: Var, target: &[f64]) -> Result<Var> {
        let pv = self.value(p).data();
        if pv.len() != target.len() {
            return Err(Error::Shape(format!("bce probs {} vs target {}", pv.len(), target.len())));
        }
        let loss: f64 = pv
            .iter()
            .zip(target)
            .map(|(&p, &y)| {
                let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
                -y * p.ln() - (1.0 - y) * (1.0 - p).ln()
            })
            .sum();
        let rg = self.rg(p);
        Ok(self.push(Tensor::scalar(loss), Op::BceProb { p, target: target.to_vec() }, rg))
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let v = self.value(x).data().iter().map(|v| v * v).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(v), Op::SumSquares(x), rg)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let data = self.value(x).data().iter().map(|v| v * factor).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::Scale(x, factor), rg)
    }

    /// Sum of scalar vars (zero-length input gives a constant 0).
    pub fn sum(&mut self, xs: &[Var]) -> Result<Var> {
        let Some((&first, rest)) = xs.split_first() else {
            return Ok(self.constant(Tensor::scalar(0.0)));
        };
        rest.iter().try_fold(first, |acc, &x| self.add(acc, x))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!("backward needs a scalar, got {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.rg(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.value(v).data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, geom } => {
                if self.rg(*x) {
                    accumulate(grads, *x, conv::conv3d_backward_input(g, val(*w), geom));
                }
                if self.rg(*w) {
                    accumulate(grads, *w, conv::conv3d_backward_weight(val(*x), g, geom));
                }
                if let Some(b) = b.filter(|b| self.rg(*b)) {
                    accumulate(grads, b, conv::channel_sums(g, geom.n, geom.co, geom.out_spatial()));
                }
            }
            Op::Deconv { x, w, b, geom } => {
                if self.rg(*x) {
                    accumulate(grads, *x, conv::conv3d_forward(g, val(*w), None, geom));
                }
                if self.rg(*w) {
                    accumulate(grads, *w, conv::conv3d_backward_weight(g, val(*x), geom));
                }
                if let Some(b) = b.filter(|b| self.rg(*b)) {
                    accumulate(grads, b, conv::channel_sums(g, geom.n, geom.ci, geom.in_spatial()));
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.rg(v) {
                        accumulate(grads, v, g.to_vec());
                    }
                }
            }
            Op::Concat { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let inner: usize = sa[2..].iter().product();
                let (ca, cb) = (sa[1] * inner, sb[1] * inner);
                let mut ga = Vec::with_capacity(sa[0] * ca);
                let mut gb = Vec::with_capacity(sa[0] * cb);
                for chunk in g.chunks(ca + cb) {
                    ga.extend_from_slice(&chunk[..ca]);
                    gb.extend_from_slice(&chunk[ca..]);
                }
                if self.rg(*a) {
                    accumulate(grads, *a, ga);
                }
                if self.rg(*b) {
                    accumulate(grads, *b, gb);
                }
            }
            Op::PRelu { x, slope } => {
                let s = self.shape(*x);
                let (c, inner) = (s[1], s[2..].iter().product::<usize>());
                let (xv, a) = (val(*x), val(*slope));
                if self.rg(*x) {
                    let gx = xv
                        .iter()
                        .zip(g)
                        .enumerate()
                        .map(|(i, (&v, &g))| if v > 0.0 { g } else { a[(i / inner) % c] * g })
                        .collect();
                    accumulate(grads, *x, gx);
                }
                if self.rg(*slope) {
                    let mut ga = vec![0.0; c];
                    for (i, (&v, &g)) in xv.iter().zip(g).enumerate() {
                        if v <= 0.0 {
                            ga[(i / inner) % c] += g * v;
                        }
                    }
                    accumulate(grads, *slope, ga);
                }
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                accumulate(grads, *x, y.iter().zip(g).map(|(y, g)| g * y * (1.0 - y)).collect());
            }
            Op::Mask { x, mask } => {
                accumulate(grads, *x, mask.iter().zip(g).map(|(m, g)| m * g).collect());
            }
            Op::Dense { x, w, b } => {
                let (sx, sw) = (self.shape(*x), self.shape(*w));
                let (n, f, o) = (sx[0], sx[1], sw[0]);
                let (xv, wv) = (val(*x), val(*w));
                if self.rg(*x) {
                    let mut gx = vec![0.0; n * f];
                    for i in 0..n {
                        for j in 0..o {
                            let gij = g[i * o + j];
                            let row = &wv[j * f..(j + 1) * f];
                            gx[i * f..(i + 1) * f].iter_mut().zip(row).for_each(|(d, w)| *d += gij * w);
                        }
                    }
                    accumulate(grads, *x, gx);
                }
                if self.rg(*w) {
                    let mut gw = vec![0.0; o * f];
                    for i in 0..n {
                        for j in 0..o {
                            let gij = g[i * o + j];
                            gw[j * f..(j + 1) * f]
                                .iter_mut()
                                .zip(&xv[i * f..(i + 1) * f])
                                .for_each(|(d, x)| *d += gij * x);
                        }
                    }
                    accumulate(grads, *w, gw);
                }
                if self.rg(*b) {
                    let mut gb = vec![0.0; o];
                    for i in 0..n {
                        gb.iter_mut().zip(&g[i * o..(i + 1) * o]).for_each(|(d, g)| *d += g);
                    }
                    accumulate(grads, *b, gb);
                }
            }
            Op::Reshape(x) => accumulate(grads, *x, g.to_vec()),
            Op::Warp { x, theta, coords } => {
                let s = self.shape(*x);
                let (n, c, dims) = (s[0], s[1], [s[2], s[3], s[4]]);
                let per = c * dims.iter().product::<usize>();
                let targets = warp::target_coords(dims);
                let xv = val(*x);
                let need_x = self.rg(*x);
                let parts = par::map_range(n, |i| {
                    let mut gx = need_x.then(|| vec![0.0; per]);
                    let gu = warp::sample_backward(
                        &xv[i * per..(i + 1) * per],
                        c,
                        dims,
                        &coords[i],
                        &g[i * per..(i + 1) * per],
                        gx.as_deref_mut(),
                    );
                    (gx, warp::theta_grad(dims, &targets, &gu))
                });
                let mut gx_all = Vec::with_capacity(if need_x { n * per } else { 0 });
                let mut gt_all = Vec::with_capacity(n * 12);
                for (gx, gt) in parts {
                    if let Some(gx) = gx {
                        gx_all.extend(gx);
                    }
                    gt_all.extend_from_slice(&gt);
                }
                if need_x {
                    accumulate(grads, *x, gx_all);
                }
                if self.rg(*theta) {
                    accumulate(grads, *theta, gt_all);
                }
            }
            Op::BceLogits { z, target } => {
                let g0 = g[0];
                let gz = val(*z).iter().zip(target).map(|(&z, &y)| g0 * (sigmoid(z) - y)).collect();
                accumulate(grads, *z, gz);
            }
            Op::BceProb { p, target } => {
                let g0 = g[0];
                let gp = val(*p)
                    .iter()
                    .zip(target)
                    .map(|(&p, &y)| {
                        if !(PROB_EPS..=1.0 - PROB_EPS).contains(&p) {
                            return 0.0;
                        }
                        g0 * (-y / p + (1.0 - y) / (1.0 - p))
                    })
                    .collect();
                accumulate(grads, *p, gp);
            }
            Op::SumSquares(x) => {
                let g0 = g[0];
                accumulate(grads, *x, val(*x).iter().map(|v| 2.0 * g0 * v).collect());
            }
            Op::Scale(x, f) => accumulate(grads, *x, g.iter().map(|g| g * f).collect()),
        }
    }
}
