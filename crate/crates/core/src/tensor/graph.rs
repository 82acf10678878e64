use super::conv::{col2im, im2col, ConvGeom, ConvSpec};
use super::{gemm, numel, Mat, Result, Scalar, Tensor, TensorError};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Precomputed bilinear taps for pooling many boxes out of one feature level.
///
/// Output cell `(r, bin)` reads `Σ weight[t] · feat[batch[r], c, index[t]]` for
/// `t` in `offsets[r·bins + bin] .. offsets[r·bins + bin + 1]`, for every channel `c`.
#[derive(Debug, Clone, Default)]
pub struct RoiTaps<T> {
    pub out_size: usize,
    pub batch: Vec<usize>,
    pub offsets: Vec<usize>,
    pub index: Vec<usize>,
    pub weight: Vec<T>,
}

impl<T: Scalar> RoiTaps<T> {
    pub fn new(out_size: usize) -> Self {
        RoiTaps { out_size, batch: Vec::new(), offsets: vec![0], index: Vec::new(), weight: Vec::new() }
    }

    pub fn num_rois(&self) -> usize {
        self.batch.len()
    }

    /// Appends one box; `bins` yields, per output bin in row-major order, its taps.
    pub fn push_roi<I>(&mut self, batch: usize, bins: I)
    where
        I: IntoIterator<Item = Vec<(usize, T)>>,
    {
        self.batch.push(batch);
        let mut count = 0;
        for taps in bins {
            for (i, w) in taps {
                self.index.push(i);
                self.weight.push(w);
            }
            self.offsets.push(self.index.len());
            count += 1;
        }
        debug_assert_eq!(count, self.out_size * self.out_size);
    }
}

enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, cols: Vec<T> },
    Linear { x: Var, w: Var, b: Option<Var> },
    Relu { x: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    MulChannels { x: Var, a: Var },
    Softmax { x: Var, axis: usize },
    SumAxis { x: Var, axis: usize },
    Reshape { x: Var },
    TransposeHw { x: Var },
    Concat { xs: Vec<Var> },
    RoiAlign { feat: Var, taps: RoiTaps<T> },
    Upsample2x { x: Var },
    Gather { x: Var, idx: Vec<usize> },
    SmoothL1 { x: Var, target: Vec<T>, beta: T },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    Scale { x: Var, s: T },
    SumAll { x: Var },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording tape of tensor operations.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Graph::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss w.r.t. `v`; `None` when `v` does not require grad.
    pub fn get(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("gradient shape"))
    }

    pub(crate) fn raw(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0)?.as_deref()
    }
}

fn shape_err(op: &'static str, l: &[usize], r: &[usize]) -> TensorError {
    TensorError::Shape { op, left: l.to_vec(), right: r.to_vec() }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf tensor that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf tensor without gradient tracking.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn input(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Grouped 2-D convolution; `x` is `[N,C,H,W]`, `w` is `[O,C/groups,KH,KW]`, `b` is `[O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), spec)?;
        if let Some(b) = b {
            if self.shape(b) != [geom.o] {
                return Err(shape_err("conv2d bias", self.shape(b), &[geom.o]));
            }
        }
        let cols = im2col(self.value(x).data(), &geom);
        let ncols = geom.cols();
        let rows = geom.group_rows();
        let og = geom.o / geom.groups;
        let mut tmp = vec![T::zero(); geom.o * ncols];
        let wdata = self.value(w).data();
        for g in 0..geom.groups {
            gemm(
                og,
                rows,
                ncols,
                Mat { data: &wdata[g * og * rows..], rs: rows, cs: 1 },
                Mat { data: &cols[g * rows * ncols..], rs: ncols, cs: 1 },
                T::zero(),
                &mut tmp[g * og * ncols..],
                ncols,
            );
        }
        let hw = geom.ho * geom.wo;
        let mut out = vec![T::zero(); geom.n * geom.o * hw];
        let bias = b.map(|b| self.value(b).data());
        for o in 0..geom.o {
            let bo = bias.map_or(T::zero(), |b| b[o]);
            for n in 0..geom.n {
                let src = &tmp[o * ncols + n * hw..o * ncols + (n + 1) * hw];
                let dst = &mut out[(n * geom.o + o) * hw..(n * geom.o + o + 1) * hw];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = *s + bo;
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let value = Tensor::new(vec![geom.n, geom.o, geom.ho, geom.wo], out)?;
        let cols = if self.rg(w) { cols } else { Vec::new() };
        Ok(self.push(value, Op::Conv2d { x, w, b, geom, cols }, rg))
    }

    /// `y = x·wᵀ + b` with `x: [N,In]`, `w: [Out,In]`, `b: [Out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(shape_err("linear", xs, ws));
        }
        let (n, din, dout) = (xs[0], xs[1], ws[0]);
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(shape_err("linear bias", self.shape(b), &[dout]));
            }
        }
        let mut out = vec![T::zero(); n * dout];
        if let Some(b) = b {
            let bd = self.value(b).data();
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(bd);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        gemm(
            n,
            din,
            dout,
            Mat { data: self.value(x).data(), rs: din, cs: 1 },
            Mat { data: self.value(w).data(), rs: 1, cs: din },
            beta,
            &mut out,
            dout,
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::new(vec![n, dout], out)?, Op::Linear { x, w, b }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|a| if *a > T::zero() { *a } else { T::zero() }).collect();
        let t = Tensor::new(v.shape().to_vec(), data).expect("relu shape");
        let rg = self.rg(x);
        self.push(t, Op::Relu { x }, rg)
    }

    fn zip(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(op, va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(p, q)| f(*p, *q)).collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "add", |p, q| p + q)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "mul", |p, q| p * q)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul { a, b }, rg))
    }

    /// `x: [N,C,H,W] ⊙ a: [N,1,H,W]`, broadcasting `a` over channels.
    pub fn mul_channels(&mut self, x: Var, a: Var) -> Result<Var> {
        let (xs, as_) = (self.shape(x).to_vec(), self.shape(a).to_vec());
        if xs.len() != 4 || as_.len() != 4 || as_[1] != 1 || xs[0] != as_[0] || xs[2..] != as_[2..] {
            return Err(shape_err("mul_channels", &xs, &as_));
        }
        let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let (xd, ad) = (self.value(x).data(), self.value(a).data());
        let mut out = vec![T::zero(); xd.len()];
        for i in 0..n {
            let att = &ad[i * hw..(i + 1) * hw];
            for ch in 0..c {
                let base = (i * c + ch) * hw;
                for ((o, xv), av) in out[base..base + hw].iter_mut().zip(&xd[base..base + hw]).zip(att) {
                    *o = *xv * *av;
                }
            }
        }
        let rg = self.rg(x) || self.rg(a);
        Ok(self.push(Tensor::new(xs, out)?, Op::MulChannels { x, a }, rg))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Invalid { op: "softmax", msg: format!("axis {axis} for shape {shape:?}") });
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let m = (0..len).map(|k| xd[at(k)]).fold(T::neg_infinity(), T::max);
                let mut s = T::zero();
                for k in 0..len {
                    let e = (xd[at(k)] - m).exp();
                    out[at(k)] = e;
                    s += e;
                }
                for k in 0..len {
                    out[at(k)] = out[at(k)] / s;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { x, axis }, rg))
    }

    /// Sum over `axis`, keeping it with extent 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Invalid { op: "sum_axis", msg: format!("axis {axis} for shape {shape:?}") });
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let src = &xd[(o * len + k) * inner..(o * len + k + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += *s;
                }
            }
        }
        let mut oshape = shape;
        oshape[axis] = 1;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(oshape, out)?, Op::SumAxis { x, axis }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape { x }, rg))
    }

    /// Swaps the two trailing (spatial) axes of a `[N,C,H,W]` tensor.
    pub fn transpose_hw(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(TensorError::Invalid { op: "transpose_hw", msg: format!("expected 4-d input, got {s:?}") });
        }
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); xd.len()];
        for p in 0..nc {
            for y in 0..h {
                for xx in 0..w {
                    out[p * h * w + xx * h + y] = xd[p * h * w + y * w + xx];
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![s[0], s[1], w, h], out)?, Op::TransposeHw { x }, rg))
    }

    /// Concatenation along axis 0.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or_else(|| TensorError::Invalid { op: "concat", msg: "no inputs".into() })?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for v in xs {
            let s = self.shape(*v);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(shape_err("concat", self.shape(*first), s));
            }
            rows += s[0];
            data.extend_from_slice(self.value(*v).data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let rg = xs.iter().any(|v| self.rg(*v));
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat { xs: xs.to_vec() }, rg))
    }

    /// Pools `taps.num_rois()` boxes out of `feat: [B,C,H,W]` into `[R,C,k,k]`.
    pub fn roi_align(&mut self, feat: Var, taps: RoiTaps<T>) -> Result<Var> {
        let s = self.shape(feat).to_vec();
        if s.len() != 4 {
            return Err(TensorError::Invalid { op: "roi_align", msg: format!("expected [B,C,H,W], got {s:?}") });
        }
        let (c, hw) = (s[1], s[2] * s[3]);
        let bins = taps.out_size * taps.out_size;
        let r = taps.num_rois();
        if taps.offsets.len() != r * bins + 1 {
            return Err(TensorError::Invalid { op: "roi_align", msg: "tap table size".into() });
        }
        if let Some(bad) = taps.batch.iter().find(|b| **b >= s[0]) {
            return Err(TensorError::Invalid { op: "roi_align", msg: format!("batch index {bad} >= {}", s[0]) });
        }
        if taps.index.iter().any(|i| *i >= hw) {
            return Err(TensorError::Invalid { op: "roi_align", msg: "tap index outside the map".into() });
        }
        let fd = self.value(feat).data();
        let mut out = vec![T::zero(); r * c * bins];
        for (ri, &bi) in taps.batch.iter().enumerate() {
            for ch in 0..c {
                let plane = &fd[(bi * c + ch) * hw..(bi * c + ch + 1) * hw];
                let dst = &mut out[(ri * c + ch) * bins..(ri * c + ch + 1) * bins];
                for (bin, d) in dst.iter_mut().enumerate() {
                    let (lo, hi) = (taps.offsets[ri * bins + bin], taps.offsets[ri * bins + bin + 1]);
                    let mut acc = T::zero();
                    for t in lo..hi {
                        acc += taps.weight[t] * plane[taps.index[t]];
                    }
                    *d = acc;
                }
            }
        }
        let shape = vec![r, c, taps.out_size, taps.out_size];
        let rg = self.rg(feat);
        Ok(self.push(Tensor::new(shape, out)?, Op::RoiAlign { feat, taps }, rg))
    }

    /// Nearest-neighbour 2× upsampling of `[N,C,H,W]`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(TensorError::Invalid { op: "upsample2x", msg: format!("expected 4-d input, got {s:?}") });
        }
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); nc * 4 * h * w];
        for p in 0..nc {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[p * 4 * h * w + y * 2 * w + xx] = xd[p * h * w + (y / 2) * w + xx / 2];
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![s[0], s[1], 2 * h, 2 * w], out)?, Op::Upsample2x { x }, rg))
    }

    /// Picks flat elements `idx` of `x` into a tensor of shape `shape`.
    pub fn gather(&mut self, x: Var, idx: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let xd = self.value(x).data();
        if numel(shape) != idx.len() {
            return Err(shape_err("gather", shape, &[idx.len()]));
        }
        if let Some(bad) = idx.iter().find(|i| **i >= xd.len()) {
            return Err(TensorError::Invalid { op: "gather", msg: format!("index {bad} >= {}", xd.len()) });
        }
        let data = idx.iter().map(|i| xd[*i]).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape.to_vec(), data)?, Op::Gather { x, idx }, rg))
    }

    /// Elementwise smooth-L1 of `x - target`: `0.5d²/β` when `|d| < β`, else `|d| − 0.5β`.
    pub fn smooth_l1(&mut self, x: Var, target: Vec<T>, beta: T) -> Result<Var> {
        let v = self.value(x);
        if v.numel() != target.len() {
            return Err(shape_err("smooth_l1", v.shape(), &[target.len()]));
        }
        if !(beta > T::zero()) {
            return Err(TensorError::Invalid { op: "smooth_l1", msg: "beta must be > 0".into() });
        }
        let data = v.data().iter().zip(&target).map(|(a, t)| smooth_l1_value(*a - *t, beta)).collect();
        let t = Tensor::new(v.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::SmoothL1 { x, target, beta }, rg))
    }

    /// Mean cross-entropy of `logits: [N,K]` against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(shape_err("cross_entropy", &s, &[labels.len()]));
        }
        let (n, k) = (s[0], s[1]);
        if let Some(bad) = labels.iter().find(|l| **l >= k) {
            return Err(TensorError::Invalid { op: "cross_entropy", msg: format!("label {bad} >= {k}") });
        }
        let ld = self.value(logits).data();
        let mut probs = vec![T::zero(); n * k];
        let mut loss = T::zero();
        for i in 0..n {
            let row = &ld[i * k..(i + 1) * k];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|v| (*v - m).exp()).sum::<T>().ln() + m;
            for j in 0..k {
                probs[i * k + j] = (row[j] - lse).exp();
            }
            loss += lse - row[labels[i]];
        }
        let denom = T::of(n.max(1) as f64);
        let rg = self.rg(logits);
        Ok(self.push(Tensor::scalar(loss / denom), Op::CrossEntropy { logits, labels: labels.to_vec(), probs }, rg))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let v = self.value(x);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|a| *a * s).collect()).expect("scale shape");
        let rg = self.rg(x);
        self.push(t, Op::Scale { x, s }, rg)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumAll { x }, rg)
    }

    /// Reverse pass from a scalar `loss`. Every node that requires grad gets a
    /// gradient (zeros when the loss does not depend on it).
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let ls = self.shape(loss);
        if numel(ls) != 1 {
            return Err(TensorError::NonScalarLoss(ls.to_vec()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = vec![None; n];
        if self.rg(loss) {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            self.backprop_node(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && grads[i].is_none() {
                grads[i] = Some(vec![T::zero(); node.value.numel()]);
            }
            if !node.requires_grad {
                grads[i] = None;
            }
        }
        let shapes = self.nodes.iter().map(|nd| nd.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.rg(v) {
            return None;
        }
        let len = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn backprop_node(&self, i: usize, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom, cols } => {
                let ncols = geom.cols();
                let hw = geom.ho * geom.wo;
                let rows = geom.group_rows();
                let og = geom.o / geom.groups;
                // dY as [O, N·HW]
                let mut dt = vec![T::zero(); geom.o * ncols];
                for n in 0..geom.n {
                    for o in 0..geom.o {
                        dt[o * ncols + n * hw..o * ncols + (n + 1) * hw]
                            .copy_from_slice(&gy[(n * geom.o + o) * hw..(n * geom.o + o + 1) * hw]);
                    }
                }
                if let Some(b) = b {
                    if let Some(gb) = self.acc(grads, *b) {
                        for o in 0..geom.o {
                            gb[o] += dt[o * ncols..(o + 1) * ncols].iter().copied().sum::<T>();
                        }
                    }
                }
                if let Some(gw) = self.acc(grads, *w) {
                    for g in 0..geom.groups {
                        gemm(
                            og,
                            ncols,
                            rows,
                            Mat { data: &dt[g * og * ncols..], rs: ncols, cs: 1 },
                            Mat { data: &cols[g * rows * ncols..], rs: 1, cs: ncols },
                            T::one(),
                            &mut gw[g * og * rows..],
                            rows,
                        );
                    }
                }
                if self.rg(*x) {
                    let wd = self.value(*w).data();
                    let mut dcols = vec![T::zero(); geom.groups * rows * ncols];
                    for g in 0..geom.groups {
                        gemm(
                            rows,
                            og,
                            ncols,
                            Mat { data: &wd[g * og * rows..], rs: 1, cs: rows },
                            Mat { data: &dt[g * og * ncols..], rs: ncols, cs: 1 },
                            T::zero(),
                            &mut dcols[g * rows * ncols..],
                            ncols,
                        );
                    }
                    let gx = self.acc(grads, *x).expect("requires grad");
                    col2im(&dcols, geom, gx);
                }
            }
            Op::Linear { x, w, b } => {
                let (xs, ws) = (self.shape(*x), self.shape(*w));
                let (n, din, dout) = (xs[0], xs[1], ws[0]);
                if let Some(b) = b {
                    if let Some(gb) = self.acc(grads, *b) {
                        for row in gy.chunks(dout) {
                            for (g, v) in gb.iter_mut().zip(row) {
                                *g += *v;
                            }
                        }
                    }
                }
                if self.rg(*w) {
                    let xd = self.value(*x).data();
                    let gw = self.acc(grads, *w).expect("requires grad");
                    gemm(dout, n, din, Mat { data: gy, rs: 1, cs: dout }, Mat { data: xd, rs: din, cs: 1 }, T::one(), gw, din);
                }
                if self.rg(*x) {
                    let wd = self.value(*w).data();
                    let gx = self.acc(grads, *x).expect("requires grad");
                    gemm(n, dout, din, Mat { data: gy, rs: dout, cs: 1 }, Mat { data: wd, rs: din, cs: 1 }, T::one(), gx, din);
                }
            }
            Op::Relu { x } => {
                let xd = self.value(*x).data();
                if let Some(gx) = self.acc(grads, *x) {
                    for ((g, v), d) in gx.iter_mut().zip(xd).zip(gy) {
                        if *v > T::zero() {
                            *g += *d;
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [a, b] {
                    if let Some(g) = self.acc(grads, *v) {
                        for (g, d) in g.iter_mut().zip(gy) {
                            *g += *d;
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.acc(grads, *a) {
                    for ((g, d), o) in ga.iter_mut().zip(gy).zip(bd) {
                        *g += *d * *o;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for ((g, d), o) in gb.iter_mut().zip(gy).zip(ad) {
                        *g += *d * *o;
                    }
                }
            }
            Op::MulChannels { x, a } => {
                let s = self.shape(*x);
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                let (xd, ad) = (self.value(*x).data(), self.value(*a).data());
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..n {
                        for ch in 0..c {
                            let base = (i * c + ch) * hw;
                            for p in 0..hw {
                                gx[base + p] += gy[base + p] * ad[i * hw + p];
                            }
                        }
                    }
                }
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..n {
                        for ch in 0..c {
                            let base = (i * c + ch) * hw;
                            for p in 0..hw {
                                ga[i * hw + p] += gy[base + p] * xd[base + p];
                            }
                        }
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                if let Some(gx) = self.acc(grads, *x) {
                    for o in 0..outer {
                        for k0 in 0..inner {
                            let at = |k: usize| (o * len + k) * inner + k0;
                            let dot = (0..len).map(|k| gy[at(k)] * y[at(k)]).sum::<T>();
                            for k in 0..len {
                                gx[at(k)] += y[at(k)] * (gy[at(k)] - dot);
                            }
                        }
                    }
                }
            }
            Op::SumAxis { x, axis } => {
                let (outer, len, inner) = axis_split(self.shape(*x), *axis);
                if let Some(gx) = self.acc(grads, *x) {
                    for o in 0..outer {
                        for k in 0..len {
                            let dst = &mut gx[(o * len + k) * inner..(o * len + k + 1) * inner];
                            for (g, d) in dst.iter_mut().zip(&gy[o * inner..(o + 1) * inner]) {
                                *g += *d;
                            }
                        }
                    }
                }
            }
            Op::Reshape { x } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (g, d) in gx.iter_mut().zip(gy) {
                        *g += *d;
                    }
                }
            }
            Op::TransposeHw { x } => {
                let s = self.shape(*x);
                let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
                if let Some(gx) = self.acc(grads, *x) {
                    for p in 0..nc {
                        for y in 0..h {
                            for xx in 0..w {
                                gx[p * h * w + y * w + xx] += gy[p * h * w + xx * h + y];
                            }
                        }
                    }
                }
            }
            Op::Concat { xs } => {
                let mut off = 0;
                for v in xs {
                    let len = self.value(*v).numel();
                    if let Some(g) = self.acc(grads, *v) {
                        for (g, d) in g.iter_mut().zip(&gy[off..off + len]) {
                            *g += *d;
                        }
                    }
                    off += len;
                }
            }
            Op::RoiAlign { feat, taps } => {
                let s = self.shape(*feat);
                let (c, hw) = (s[1], s[2] * s[3]);
                let bins = taps.out_size * taps.out_size;
                if let Some(gf) = self.acc(grads, *feat) {
                    for (ri, &bi) in taps.batch.iter().enumerate() {
                        for ch in 0..c {
                            let plane = &mut gf[(bi * c + ch) * hw..(bi * c + ch + 1) * hw];
                            let src = &gy[(ri * c + ch) * bins..(ri * c + ch + 1) * bins];
                            for (bin, d) in src.iter().enumerate() {
                                for t in taps.offsets[ri * bins + bin]..taps.offsets[ri * bins + bin + 1] {
                                    plane[taps.index[t]] += taps.weight[t] * *d;
                                }
                            }
                        }
                    }
                }
            }
            Op::Upsample2x { x } => {
                let s = self.shape(*x);
                let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
                if let Some(gx) = self.acc(grads, *x) {
                    for p in 0..nc {
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                gx[p * h * w + (y / 2) * w + xx / 2] += gy[p * 4 * h * w + y * 2 * w + xx];
                            }
                        }
                    }
                }
            }
            Op::Gather { x, idx } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (i, d) in idx.iter().zip(gy) {
                        gx[*i] += *d;
                    }
                }
            }
            Op::SmoothL1 { x, target, beta } => {
                let xd = self.value(*x).data();
                if let Some(gx) = self.acc(grads, *x) {
                    for ((g, (a, t)), d) in gx.iter_mut().zip(xd.iter().zip(target)).zip(gy) {
                        let diff = *a - *t;
                        let slope = if diff.abs() < *beta { diff / *beta } else { diff.signum() };
                        *g += slope * *d;
                    }
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let k = self.shape(*logits)[1];
                let n = labels.len();
                let scale = gy[0] / T::of(n.max(1) as f64);
                if let Some(gl) = self.acc(grads, *logits) {
                    for (i, &l) in labels.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == l { T::one() } else { T::zero() };
                            gl[i * k + j] += (probs[i * k + j] - onehot) * scale;
                        }
                    }
                }
            }
            Op::Scale { x, s } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (g, d) in gx.iter_mut().zip(gy) {
                        *g += *d * *s;
                    }
                }
            }
            Op::SumAll { x } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for g in gx.iter_mut() {
                        *g += gy[0];
                    }
                }
            }
        }
    }
}

pub fn smooth_l1_value<T: Scalar>(d: T, beta: T) -> T {
    let a = d.abs();
    let half = T::of(0.5);
    if a < beta {
        half * d * d / beta
    } else {
        a - half * beta
    }
}
