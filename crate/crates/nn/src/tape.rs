//! A small reverse-mode autodiff tape over dense ndarray tensors.
//!
//! Only the operations the reconstruction networks need are provided. Values
//! are kept in standard (row-major, contiguous) layout. Complex tensors are
//! stored as real tensors with the real parts of all channels followed by the
//! imaginary parts along one axis (`[re_0..re_{F-1}, im_0..im_{F-1}]`).

use std::collections::HashMap;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayD, ArrayView2, ArrayViewMut2, Axis, Ix2, IxDyn, NdFloat, Slice};
use num_complex::Complex;

use crate::error::{NnError, Result};

/// Scalar type of the tape. Training runs in `f32`; gradient checks in `f64`.
pub trait Real: NdFloat + Send + Sync + 'static {
    fn lit(v: f64) -> Self;
}

impl Real for f32 {
    #[inline]
    fn lit(v: f64) -> Self {
        v as f32
    }
}

impl Real for f64 {
    #[inline]
    fn lit(v: f64) -> Self {
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub value: ArrayD<T>,
}

/// Flat, ordered list of named trainable tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<T>) -> ParamId {
        let name = name.into();
        debug_assert!(self.params.iter().all(|p| p.name != name), "duplicate parameter {name}");
        self.params.push(Param { name, value });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<T> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<T> {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Converts every tensor to another scalar type (e.g. `f32` -> `f64`).
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param { name: p.name.clone(), value: p.value.mapv(|v| U::lit(v.to_f64().unwrap())) })
                .collect(),
        }
    }
}

/// Per-parameter gradients, `None` when a parameter did not take part.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub grads: Vec<Option<ArrayD<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Option<&ArrayD<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op<T> {
    Input,
    Param(ParamId),
    Linear { x: NodeId, w: NodeId, b: Option<NodeId> },
    Conv2d { x: NodeId, w: NodeId, b: Option<NodeId> },
    ComplexWeight { re: NodeId, im: NodeId },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Scale(NodeId, T),
    Concat { parts: Vec<NodeId>, axis: usize },
    Slice { x: NodeId, axis: usize, start: usize },
    LeakyRelu { x: NodeId, slope: T },
    ModRelu { x: NodeId, bias: NodeId, axis: usize },
    Wire { x: NodeId, omega: T, sigma: T },
    Gather { x: NodeId, points: Vec<[usize; 3]> },
    WeightedSse { pred: NodeId, target: ArrayD<T>, weight: ArrayD<T> },
    WeightedSum(Vec<(NodeId, T)>),
}

struct Node<T> {
    value: ArrayD<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// One forward pass worth of recorded operations.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    bound: HashMap<ParamId, NodeId>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

macro_rules! view2 {
    ($a:expr) => {
        $a.view().into_dimensionality::<Ix2>().expect("2-D tensor")
    };
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), bound: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, value: ArrayD<T>, op: Op<T>, needs_grad: bool) -> NodeId {
        let value = if value.is_standard_layout() { value } else { value.as_standard_layout().into_owned() };
        self.nodes.push(Node { value, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn input(&mut self, value: ArrayD<T>) -> NodeId {
        self.push(value, Op::Input, false)
    }

    /// Binds a parameter into this graph; repeated binds return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> NodeId {
        if let Some(&n) = self.bound.get(&id) {
            return n;
        }
        let n = self.push(store.get(id).clone(), Op::Param(id), true);
        self.bound.insert(id, n);
        n
    }

    /// `y = x w^T + b` with `x: [N, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(NnError::Shape(format!("linear: x {xs:?} vs w {ws:?}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(NnError::Shape(format!("linear: bias {:?} vs out {}", self.shape(b), ws[0])));
            }
        }
        let mut y = Array2::<T>::zeros((xs[0], ws[0]));
        general_mat_mul(T::one(), &view2!(self.value(x)), &view2!(self.value(w)).t(), T::zero(), &mut y);
        if let Some(b) = b {
            let bv = self.value(b).view().into_dimensionality::<ndarray::Ix1>().unwrap().to_owned();
            y += &bv;
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(y.into_dyn(), Op::Linear { x, w, b }, ng))
    }

    /// Same-padded, stride-1 2-D convolution (cross-correlation).
    /// `x: [B, Cin, H, W]`, `w: [Cout, Cin, kh, kw]` with odd kernel sizes.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || ws[2] % 2 == 0 || ws[3] % 2 == 0 {
            return Err(NnError::Shape(format!("conv2d: x {xs:?} vs w {ws:?}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(NnError::Shape(format!("conv2d: bias {:?} vs out {}", self.shape(b), ws[0])));
            }
        }
        let y = conv_forward(self.value(x), self.value(w), b.map(|b| self.value(b)));
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(y, Op::Conv2d { x, w, b }, ng))
    }

    /// Real block form `[[re, -im], [im, re]]` of a complex weight over its
    /// first two axes, so that a real conv/linear on `[re | im]` channel
    /// stacks performs the complex product.
    pub fn complex_weight(&mut self, re: NodeId, im: NodeId) -> Result<NodeId> {
        let shape = self.shape(re).to_vec();
        if shape != self.shape(im) || shape.len() < 2 {
            return Err(NnError::Shape(format!("complex_weight: {shape:?} vs {:?}", self.shape(im))));
        }
        let (o, i) = (shape[0], shape[1]);
        let mut big_shape = shape.clone();
        big_shape[0] *= 2;
        big_shape[1] *= 2;
        let mut out = ArrayD::<T>::zeros(IxDyn(&big_shape));
        let (rv, iv) = (self.value(re), self.value(im));
        out.slice_each_axis_mut(|ax| block(ax.axis.index(), 0, 0, o, i)).assign(rv);
        out.slice_each_axis_mut(|ax| block(ax.axis.index(), 0, 1, o, i)).assign(&iv.mapv(|v| -v));
        out.slice_each_axis_mut(|ax| block(ax.axis.index(), 1, 0, o, i)).assign(iv);
        out.slice_each_axis_mut(|ax| block(ax.axis.index(), 1, 1, o, i)).assign(rv);
        let ng = self.ng(re) || self.ng(im);
        Ok(self.push(out, Op::ComplexWeight { re, im }, ng))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let v = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a) - self.value(b);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Sub(a, b), ng))
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> NodeId {
        let v = self.value(a).mapv(|x| x * c);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, c), ng)
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(NnError::Shape("concat of nothing".into()));
        }
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(axis), &views).map_err(|e| NnError::Shape(format!("concat: {e}")))?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(v, Op::Concat { parts: parts.to_vec(), axis }, ng))
    }

    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let shape = self.shape(x);
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(NnError::Shape(format!("slice {start}+{len} on axis {axis} of {shape:?}")));
        }
        let v = self.value(x).slice_axis(Axis(axis), Slice::from(start..start + len)).to_owned();
        let ng = self.ng(x);
        Ok(self.push(v, Op::Slice { x, axis, start }, ng))
    }

    /// Concatenates complex tensors along `axis` (each `[re | im]` there).
    pub fn concat_complex(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        let mut res = Vec::with_capacity(parts.len());
        let mut ims = Vec::with_capacity(parts.len());
        for &p in parts {
            let n = self.shape(p)[axis];
            if n % 2 != 0 {
                return Err(NnError::Shape(format!("complex axis of odd length {n}")));
            }
            res.push(self.slice(p, axis, 0, n / 2)?);
            ims.push(self.slice(p, axis, n / 2, n / 2)?);
        }
        res.extend(ims);
        self.concat(&res, axis)
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: T) -> NodeId {
        let v = self.value(x).mapv(|a| if a > T::zero() { a } else { a * slope });
        let ng = self.ng(x);
        self.push(v, Op::LeakyRelu { x, slope }, ng)
    }

    /// modReLU on a complex tensor whose `axis` holds `[re | im]` of C
    /// channels: `relu(|z| + b_c) * z / |z|`, zero where `|z| = 0`.
    pub fn mod_relu(&mut self, x: NodeId, bias: NodeId, axis: usize) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        let c2 = shape[axis];
        if c2 % 2 != 0 || self.shape(bias) != [c2 / 2] {
            return Err(NnError::Shape(format!("mod_relu: x {shape:?} axis {axis}, bias {:?}", self.shape(bias))));
        }
        let c = c2 / 2;
        let bv = self.value(bias).clone();
        let xv = self.value(x);
        let mut out = xv.clone();
        for_complex_pairs(&shape, axis, |ch, re_i, im_i| {
            let (a, b) = (xv.as_slice().unwrap()[re_i], xv.as_slice().unwrap()[im_i]);
            let m = (a * a + b * b).sqrt();
            let s = m + bv[ch % c];
            let (ra, rb) = if m > T::zero() && s > T::zero() {
                let f = s / m;
                (a * f, b * f)
            } else {
                (T::zero(), T::zero())
            };
            let o = out.as_slice_mut().unwrap();
            o[re_i] = ra;
            o[im_i] = rb;
        });
        let ng = self.ng(x) || self.ng(bias);
        Ok(self.push(out, Op::ModRelu { x, bias, axis }, ng))
    }

    /// Complex Gabor wavelet `exp(i w0 z) exp(-|s0 z|^2)` on `[N, 2F]`.
    pub fn wire(&mut self, x: NodeId, omega: T, sigma: T) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || shape[1] % 2 != 0 {
            return Err(NnError::Shape(format!("wire expects [N, 2F], got {shape:?}")));
        }
        let f = shape[1] / 2;
        let xv = view2!(self.value(x));
        let mut out = Array2::<T>::zeros((shape[0], shape[1]));
        for n in 0..shape[0] {
            for k in 0..f {
                let z = wire_scalar(Complex::new(xv[[n, k]], xv[[n, k + f]]), omega, sigma);
                out[[n, k]] = z.re;
                out[[n, k + f]] = z.im;
            }
        }
        let ng = self.ng(x);
        Ok(self.push(out.into_dyn(), Op::Wire { x, omega, sigma }, ng))
    }

    /// Reads `x[t, :, h, w]` for every point, giving `[N, F]` from `x: [T, F, H, W]`.
    pub fn gather(&mut self, x: NodeId, points: &[[usize; 3]]) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(NnError::Shape(format!("gather expects [T, F, H, W], got {shape:?}")));
        }
        let (t, f, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        if let Some(p) = points.iter().find(|p| p[0] >= t || p[1] >= h || p[2] >= w) {
            return Err(NnError::OutOfBounds(format!("point {p:?} outside [{t}, {h}, {w}]")));
        }
        let xv = self.value(x).as_slice().unwrap();
        let mut out = Array2::<T>::zeros((points.len(), f));
        for (n, p) in points.iter().enumerate() {
            for k in 0..f {
                out[[n, k]] = xv[((p[0] * f + k) * h + p[1]) * w + p[2]];
            }
        }
        let ng = self.ng(x);
        Ok(self.push(out.into_dyn(), Op::Gather { x, points: points.to_vec() }, ng))
    }

    /// `sum(weight * (pred - target)^2)` over entries with nonzero weight.
    /// Entries with zero weight are skipped entirely, so their targets may be
    /// anything (including NaN).
    pub fn weighted_sse(&mut self, pred: NodeId, target: ArrayD<T>, weight: ArrayD<T>) -> Result<NodeId> {
        if self.shape(pred) != target.shape() || target.shape() != weight.shape() {
            return Err(NnError::Shape(format!(
                "weighted_sse: pred {:?}, target {:?}, weight {:?}",
                self.shape(pred),
                target.shape(),
                weight.shape()
            )));
        }
        let mut acc = T::zero();
        for ((p, t), w) in self.value(pred).iter().zip(target.iter()).zip(weight.iter()) {
            if *w != T::zero() {
                let d = *p - *t;
                acc += *w * d * d;
            }
        }
        let ng = self.ng(pred);
        Ok(self.push(ArrayD::from_elem(IxDyn(&[]), acc), Op::WeightedSse { pred, target, weight }, ng))
    }

    /// `sum_i c_i * s_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, T)]) -> Result<NodeId> {
        let mut acc = T::zero();
        for &(id, c) in terms {
            if !self.shape(id).is_empty() {
                return Err(NnError::Shape("weighted_sum takes scalars".into()));
            }
            acc += c * *self.value(id).first().unwrap();
        }
        let ng = terms.iter().any(|&(id, _)| self.ng(id));
        Ok(self.push(ArrayD::from_elem(IxDyn(&[]), acc), Op::WeightedSum(terms.to_vec()), ng))
    }

    pub fn scalar(&self, id: NodeId) -> T {
        *self.value(id).first().expect("scalar node")
    }

    fn same_shape(&self, op: &str, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(NnError::Shape(format!("{op}: {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    /// Back-propagates from a scalar `root`; returns gradients per parameter
    /// of `store`.
    pub fn backward(&self, root: NodeId, n_params: usize) -> Gradients<T> {
        assert!(self.shape(root).is_empty(), "backward needs a scalar root");
        let mut grads: Vec<Option<ArrayD<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(ArrayD::from_elem(IxDyn(&[]), T::one()));
        let mut out: Vec<Option<ArrayD<T>>> = (0..n_params).map(|_| None).collect();

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Input => {}
                Op::Param(pid) => {
                    accumulate(&mut out[pid.0], g);
                }
                Op::Linear { x, w, b } => {
                    let g2 = view2!(g);
                    if self.ng(*x) {
                        let wv = view2!(self.value(*w));
                        let mut gx = Array2::<T>::zeros((g2.nrows(), wv.ncols()));
                        general_mat_mul(T::one(), &g2, &wv, T::zero(), &mut gx);
                        accumulate(&mut grads[x.0], gx.into_dyn());
                    }
                    if self.ng(*w) {
                        let xv = view2!(self.value(*x));
                        let mut gw = Array2::<T>::zeros((g2.ncols(), xv.ncols()));
                        general_mat_mul(T::one(), &g2.t(), &xv, T::zero(), &mut gw);
                        accumulate(&mut grads[w.0], gw.into_dyn());
                    }
                    if let Some(b) = b {
                        if self.ng(*b) {
                            accumulate(&mut grads[b.0], g2.sum_axis(Axis(0)).into_dyn());
                        }
                    }
                }
                Op::Conv2d { x, w, b } => {
                    let (gx, gw) = conv_backward(self.value(*x), self.value(*w), &g, self.ng(*x), self.ng(*w));
                    if let Some(gx) = gx {
                        accumulate(&mut grads[x.0], gx);
                    }
                    if let Some(gw) = gw {
                        accumulate(&mut grads[w.0], gw);
                    }
                    if let Some(b) = b {
                        if self.ng(*b) {
                            let gb = g.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
                            accumulate(&mut grads[b.0], gb.into_dyn());
                        }
                    }
                }
                Op::ComplexWeight { re, im } => {
                    let shape = self.shape(*re);
                    let (o, i) = (shape[0], shape[1]);
                    let g00 = g.slice_each_axis(|ax| block(ax.axis.index(), 0, 0, o, i));
                    let g01 = g.slice_each_axis(|ax| block(ax.axis.index(), 0, 1, o, i));
                    let g10 = g.slice_each_axis(|ax| block(ax.axis.index(), 1, 0, o, i));
                    let g11 = g.slice_each_axis(|ax| block(ax.axis.index(), 1, 1, o, i));
                    if self.ng(*re) {
                        accumulate(&mut grads[re.0], &g00 + &g11);
                    }
                    if self.ng(*im) {
                        accumulate(&mut grads[im.0], &g10 - &g01);
                    }
                }
                Op::Add(a, b) => {
                    if self.ng(*b) {
                        accumulate(&mut grads[b.0], g.clone());
                    }
                    if self.ng(*a) {
                        accumulate(&mut grads[a.0], g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.ng(*b) {
                        accumulate(&mut grads[b.0], g.mapv(|v| -v));
                    }
                    if self.ng(*a) {
                        accumulate(&mut grads[a.0], g);
                    }
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    accumulate(&mut grads[a.0], g.mapv(|v| v * c));
                }
                Op::Concat { parts, axis } => {
                    let mut start = 0;
                    for p in parts {
                        let len = self.shape(*p)[*axis];
                        if self.ng(*p) {
                            let part = g.slice_axis(Axis(*axis), Slice::from(start..start + len)).to_owned();
                            accumulate(&mut grads[p.0], part);
                        }
                        start += len;
                    }
                }
                Op::Slice { x, axis, start } => {
                    let mut full = ArrayD::<T>::zeros(IxDyn(self.shape(*x)));
                    let len = g.shape()[*axis];
                    full.slice_axis_mut(Axis(*axis), Slice::from(*start..*start + len)).assign(&g);
                    accumulate(&mut grads[x.0], full);
                }
                Op::LeakyRelu { x, slope } => {
                    let xv = self.value(*x);
                    let mut gx = g;
                    ndarray::Zip::from(&mut gx).and(xv).for_each(|gv, &a| {
                        if a <= T::zero() {
                            *gv = *gv * *slope;
                        }
                    });
                    accumulate(&mut grads[x.0], gx);
                }
                Op::ModRelu { x, bias, axis } => {
                    let xv = self.value(*x);
                    let bv = self.value(*bias);
                    let shape = xv.shape().to_vec();
                    let c = shape[*axis] / 2;
                    let mut gx = ArrayD::<T>::zeros(IxDyn(&shape));
                    let mut gb = vec![T::zero(); c];
                    let xs = xv.as_slice().unwrap();
                    let gs = g.as_slice().unwrap();
                    {
                        let gxs = gx.as_slice_mut().unwrap();
                        for_complex_pairs(&shape, *axis, |ch, re_i, im_i| {
                            let (a, b) = (xs[re_i], xs[im_i]);
                            let m = (a * a + b * b).sqrt();
                            let bias = bv[ch % c];
                            if m > T::zero() && m + bias > T::zero() {
                                let (ga, gbv) = (gs[re_i], gs[im_i]);
                                let k = bias / (m * m * m);
                                let f = T::one() + bias / m;
                                // Jacobian of (1 + b/m) z
                                let daa = f - k * a * a;
                                let dab = -k * a * b;
                                let dbb = f - k * b * b;
                                gxs[re_i] = ga * daa + gbv * dab;
                                gxs[im_i] = ga * dab + gbv * dbb;
                                gb[ch % c] += (ga * a + gbv * b) / m;
                            }
                        });
                    }
                    if self.ng(*x) {
                        accumulate(&mut grads[x.0], gx);
                    }
                    if self.ng(*bias) {
                        accumulate(&mut grads[bias.0], ndarray::Array1::from(gb).into_dyn());
                    }
                }
                Op::Wire { x, omega, sigma } => {
                    let xv = view2!(self.value(*x));
                    let g2 = view2!(g);
                    let f = xv.ncols() / 2;
                    let (w0, s2) = (*omega, *sigma * *sigma);
                    let two = T::lit(2.0);
                    let mut gx = Array2::<T>::zeros(xv.raw_dim());
                    for n in 0..xv.nrows() {
                        for k in 0..f {
                            let (a, b) = (xv[[n, k]], xv[[n, k + f]]);
                            let env = (-w0 * b - s2 * (a * a + b * b)).exp();
                            let (c, s) = ((w0 * a).cos(), (w0 * a).sin());
                            let (ore, oim) = (env * c, env * s);
                            let (gre, gim) = (g2[[n, k]], g2[[n, k + f]]);
                            let d_env_a = -two * s2 * a;
                            let d_env_b = -w0 - two * s2 * b;
                            // d(out_re)/da = d_env_a*ore - w0*oim, d(out_im)/da = d_env_a*oim + w0*ore
                            gx[[n, k]] = gre * (d_env_a * ore - w0 * oim) + gim * (d_env_a * oim + w0 * ore);
                            gx[[n, k + f]] = gre * d_env_b * ore + gim * d_env_b * oim;
                        }
                    }
                    accumulate(&mut grads[x.0], gx.into_dyn());
                }
                Op::Gather { x, points } => {
                    let shape = self.shape(*x).to_vec();
                    let (f, h, w) = (shape[1], shape[2], shape[3]);
                    let mut gx = ArrayD::<T>::zeros(IxDyn(&shape));
                    let g2 = view2!(g);
                    let gxs = gx.as_slice_mut().unwrap();
                    for (n, p) in points.iter().enumerate() {
                        for k in 0..f {
                            gxs[((p[0] * f + k) * h + p[1]) * w + p[2]] += g2[[n, k]];
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::WeightedSse { pred, target, weight } => {
                    let scale = *g.first().unwrap() * T::lit(2.0);
                    let pv = self.value(*pred);
                    let mut gp = ArrayD::<T>::zeros(pv.raw_dim());
                    ndarray::Zip::from(&mut gp).and(pv).and(target).and(weight).for_each(|o, &p, &t, &w| {
                        if w != T::zero() {
                            *o = scale * w * (p - t);
                        }
                    });
                    accumulate(&mut grads[pred.0], gp);
                }
                Op::WeightedSum(terms) => {
                    let gv = *g.first().unwrap();
                    for &(id, c) in terms {
                        if self.ng(id) {
                            accumulate(&mut grads[id.0], ArrayD::from_elem(IxDyn(&[]), gv * c));
                        }
                    }
                }
            }
        }
        Gradients { grads: out }
    }
}

fn accumulate<T: Real>(slot: &mut Option<ArrayD<T>>, g: ArrayD<T>) {
    let g = if g.is_standard_layout() { g } else { g.as_standard_layout().into_owned() };
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

/// Slice selecting block `(bo, bi)` of a `[2o, 2i, ...]` tensor.
fn block(axis: usize, bo: usize, bi: usize, o: usize, i: usize) -> Slice {
    match axis {
        0 => Slice::from(bo * o..(bo + 1) * o),
        1 => Slice::from(bi * i..(bi + 1) * i),
        _ => Slice::from(..),
    }
}

/// Calls `f(channel, re_index, im_index)` for every complex element of a
/// contiguous tensor whose `axis` holds `[re | im]` channel stacks.
fn for_complex_pairs(shape: &[usize], axis: usize, mut f: impl FnMut(usize, usize, usize)) {
    let c2 = shape[axis];
    let c = c2 / 2;
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    for o in 0..outer {
        for ch in 0..c {
            let re_base = (o * c2 + ch) * inner;
            let im_base = (o * c2 + ch + c) * inner;
            for k in 0..inner {
                f(ch, re_base + k, im_base + k);
            }
        }
    }
}

pub fn wire_scalar<T: Real>(z: Complex<T>, omega: T, sigma: T) -> Complex<T> {
    let env = (-omega * z.im - sigma * sigma * (z.re * z.re + z.im * z.im)).exp();
    Complex::new(env * (omega * z.re).cos(), env * (omega * z.re).sin())
}

/// im2col for one image: `[Cin, H, W]` -> `[Cin*kh*kw, H*W]`, zero padded.
fn im2col<T: Real>(x: &[T], cin: usize, h: usize, w: usize, kh: usize, kw: usize, cols: &mut ArrayViewMut2<T>) {
    let (ph, pw) = (kh / 2, kw / 2);
    for c in 0..cin {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for dy in 0..kh {
            for dx in 0..kw {
                let row = (c * kh + dy) * kw + dx;
                let mut dst = cols.row_mut(row);
                let dst = dst.as_slice_mut().unwrap();
                for yy in 0..h {
                    let sy = yy as isize + dy as isize - ph as isize;
                    let out_row = &mut dst[yy * w..(yy + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let shift = dx as isize - pw as isize;
                    for (xx, o) in out_row.iter_mut().enumerate() {
                        let sx = xx as isize + shift;
                        *o = if sx < 0 || sx >= w as isize { T::zero() } else { src[sx as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`], accumulating into `gx: [Cin, H, W]`.
fn col2im<T: Real>(cols: &ArrayView2<T>, cin: usize, h: usize, w: usize, kh: usize, kw: usize, gx: &mut [T]) {
    let (ph, pw) = (kh / 2, kw / 2);
    for c in 0..cin {
        let plane = &mut gx[c * h * w..(c + 1) * h * w];
        for dy in 0..kh {
            for dx in 0..kw {
                let row = (c * kh + dy) * kw + dx;
                let src_row = cols.row(row);
                let src = src_row.as_slice().unwrap();
                for yy in 0..h {
                    let sy = yy as isize + dy as isize - ph as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    let shift = dx as isize - pw as isize;
                    for xx in 0..w {
                        let sx = xx as isize + shift;
                        if sx >= 0 && sx < w as isize {
                            dst[sx as usize] += src[yy * w + xx];
                        }
                    }
                }
            }
        }
    }
}

fn conv_forward<T: Real>(x: &ArrayD<T>, w: &ArrayD<T>, b: Option<&ArrayD<T>>) -> ArrayD<T> {
    let (bsz, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let k = cin * kh * kw;
    let w2 = w.view().into_shape_with_order((cout, k)).unwrap();
    let mut y = ArrayD::<T>::zeros(IxDyn(&[bsz, cout, h, wd]));
    let xs = x.as_slice().unwrap();
    let mut cols = Array2::<T>::zeros((k, h * wd));
    for bi in 0..bsz {
        let img = &xs[bi * cin * h * wd..(bi + 1) * cin * h * wd];
        let mut yb = y.index_axis_mut(Axis(0), bi).into_shape_with_order((cout, h * wd)).unwrap();
        if kh == 1 && kw == 1 {
            let xin = ArrayView2::from_shape((cin, h * wd), img).unwrap();
            general_mat_mul(T::one(), &w2, &xin, T::zero(), &mut yb);
        } else {
            im2col(img, cin, h, wd, kh, kw, &mut cols.view_mut());
            general_mat_mul(T::one(), &w2, &cols, T::zero(), &mut yb);
        }
        if let Some(b) = b {
            for (co, mut row) in yb.outer_iter_mut().enumerate() {
                let bv = b[[co]];
                row.mapv_inplace(|v| v + bv);
            }
        }
    }
    y
}

fn conv_backward<T: Real>(
    x: &ArrayD<T>,
    w: &ArrayD<T>,
    g: &ArrayD<T>,
    need_x: bool,
    need_w: bool,
) -> (Option<ArrayD<T>>, Option<ArrayD<T>>) {
    let (bsz, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let k = cin * kh * kw;
    let w2 = w.view().into_shape_with_order((cout, k)).unwrap();
    let xs = x.as_slice().unwrap();
    let mut gw2 = Array2::<T>::zeros((cout, k));
    let mut gx = if need_x { Some(ArrayD::<T>::zeros(x.raw_dim())) } else { None };
    let mut cols = Array2::<T>::zeros((k, h * wd));
    let mut gcols = Array2::<T>::zeros((k, h * wd));
    let one_by_one = kh == 1 && kw == 1;
    for bi in 0..bsz {
        let img = &xs[bi * cin * h * wd..(bi + 1) * cin * h * wd];
        let gb = g.index_axis(Axis(0), bi);
        let gb = gb.into_shape_with_order((cout, h * wd)).unwrap();
        if need_w {
            if one_by_one {
                let xin = ArrayView2::from_shape((cin, h * wd), img).unwrap();
                general_mat_mul(T::one(), &gb, &xin.t(), T::one(), &mut gw2);
            } else {
                im2col(img, cin, h, wd, kh, kw, &mut cols.view_mut());
                general_mat_mul(T::one(), &gb, &cols.t(), T::one(), &mut gw2);
            }
        }
        if let Some(gx) = gx.as_mut() {
            let gxs = gx.as_slice_mut().unwrap();
            let dst = &mut gxs[bi * cin * h * wd..(bi + 1) * cin * h * wd];
            if one_by_one {
                let mut gin = ArrayViewMut2::from_shape((cin, h * wd), dst).unwrap();
                general_mat_mul(T::one(), &w2.t(), &gb, T::one(), &mut gin);
            } else {
                general_mat_mul(T::one(), &w2.t(), &gb, T::zero(), &mut gcols);
                col2im(&gcols.view(), cin, h, wd, kh, kw, dst);
            }
        }
    }
    let gw = if need_w { Some(gw2.into_shape_with_order(IxDyn(w.shape())).unwrap()) } else { None };
    (gx, gw)
}
