use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::{Array2, ArrayD, Axis, IxDyn};

use super::kernels::{self, ConvGeom, PoolGeom};
use crate::error::{Error, Result};
use crate::nn::Param;

pub type Tensor = ArrayD<f64>;

type NodeId = usize;

/// A value flowing through a [`Graph`]. Values that do not depend on any
/// gradient-tracked leaf carry no node and cost nothing at backward time.
#[derive(Clone, Debug)]
pub struct Var {
    value: Arc<Tensor>,
    node: Option<NodeId>,
}

impl Var {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    /// Scalar value of a 0-d (or single element) variable.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.value.len(), 1);
        *self.value.iter().next().expect("scalar var")
    }

    pub fn to_tensor(&self) -> Tensor {
        (*self.value).clone()
    }

    pub fn into_tensor(self) -> Tensor {
        Arc::try_unwrap(self.value).unwrap_or_else(|rc| (*rc).clone())
    }
}

enum Op {
    Leaf { name: String },
    Conv2d {
        x: Option<Arc<Tensor>>,
        w: Option<Arc<Tensor>>,
        px: Option<NodeId>,
        pw: Option<NodeId>,
        pb: Option<NodeId>,
        geom: ConvGeom,
        n: usize,
    },
    PadReflect { px: NodeId, planes: usize, h: usize, w: usize, pad: usize },
    Bilinear { px: NodeId, planes: usize, inp: (usize, usize), out: (usize, usize) },
    LeakyRelu { px: NodeId, out: Arc<Tensor>, slope: f64 },
    Sigmoid { px: NodeId, out: Arc<Tensor> },
    LinComb { pa: Option<NodeId>, pb: Option<NodeId>, alpha: f64, beta: f64 },
    BroadcastBatch { px: NodeId },
    ConcatChannels { pa: Option<NodeId>, pb: Option<NodeId>, ca: usize, cb: usize },
    MaxPool { px: NodeId, in_shape: Vec<usize>, argmax: Vec<usize> },
    AvgPool { px: NodeId, in_shape: Vec<usize>, k: usize },
    GlobalAvgPool { px: NodeId, in_shape: Vec<usize> },
    Reshape { px: NodeId, in_shape: Vec<usize> },
    Linear {
        x: Option<Arc<Tensor>>,
        w: Option<Arc<Tensor>>,
        px: Option<NodeId>,
        pw: Option<NodeId>,
        pb: Option<NodeId>,
    },
    BatchNorm {
        px: Option<NodeId>,
        pg: Option<NodeId>,
        pb: Option<NodeId>,
        xhat: Arc<Tensor>,
        inv_std: Vec<f64>,
        gamma: Arc<Tensor>,
    },
    ChannelAffine { px: NodeId, scale: Vec<f64> },
    Gram { px: NodeId, x: Arc<Tensor> },
    SumSquares { px: NodeId, x: Arc<Tensor> },
    CrossEntropy { px: NodeId, probs: Array2<f64>, targets: Array2<f64> },
}

/// Batch statistics produced by a training-mode batch norm, for updating
/// running estimates.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance.
    pub var: Vec<f64>,
}

/// Define-by-run tape for reverse-mode differentiation.
pub struct Graph {
    nodes: Vec<Op>,
    track_params: bool,
}

/// Gradients keyed by leaf name.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    by_name: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.by_name.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.by_name.iter()
    }

    pub fn len(&self) -> usize {
        self.by_name.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_name.is_empty()
    }

    /// Euclidean norm over all gradients.
    pub fn global_norm(&self) -> f64 {
        self.by_name
            .values()
            .map(|t| t.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

fn slice(t: &Tensor) -> &[f64] {
    t.as_slice().expect("graph tensors are contiguous")
}

fn from_vec(shape: &[usize], data: Vec<f64>) -> Tensor {
    ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape matches data length")
}

fn dims4(t: &Tensor, what: &str) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        ref s => Err(Error::Shape(format!("{what}: expected rank-4 NCHW input, got {s:?}"))),
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A graph in which bound trainable parameters become gradient leaves.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            track_params: true,
        }
    }

    /// A graph in which every parameter is bound as a constant; nothing is
    /// recorded and intermediates are released as soon as they are dropped.
    pub fn inference() -> Self {
        Graph {
            nodes: Vec::new(),
            track_params: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op) -> Option<NodeId> {
        self.nodes.push(op);
        Some(self.nodes.len() - 1)
    }

    fn wrap(&mut self, value: Tensor, tracked: bool, op: impl FnOnce() -> Op) -> Var {
        let node = if tracked { self.push(op()) } else { None };
        Var {
            value: Arc::new(value),
            node,
        }
    }

    pub fn constant(&self, value: Tensor) -> Var {
        Var {
            value: Arc::new(value),
            node: None,
        }
    }

    pub fn constant_rc(&self, value: Arc<Tensor>) -> Var {
        Var { value, node: None }
    }

    /// A named gradient leaf, independent of the graph's parameter mode.
    pub fn leaf(&mut self, name: impl Into<String>, value: Arc<Tensor>) -> Var {
        let node = self.push(Op::Leaf { name: name.into() });
        Var { value, node }
    }

    /// Binds a parameter: a leaf when this graph tracks parameters and the
    /// parameter is trainable, otherwise a constant.
    pub fn param(&mut self, p: &Param) -> Var {
        if self.track_params && p.trainable {
            self.leaf(p.name.clone(), p.value.clone())
        } else {
            self.constant_rc(p.value.clone())
        }
    }

    /// 2-D convolution with zero padding. `w` is `[O, C, kh, kw]`.
    pub fn conv2d(&mut self, x: &Var, w: &Var, b: Option<&Var>, stride: usize, pad: usize) -> Result<Var> {
        let (n, c, h, wd) = dims4(&x.value, "conv2d")?;
        let (o, wc, kh, kw) = dims4(&w.value, "conv2d weight")?;
        if wc != c {
            return Err(Error::Shape(format!("conv2d: input has {c} channels, weight expects {wc}")));
        }
        if let Some(b) = b {
            if b.shape() != [o] {
                return Err(Error::Shape(format!("conv2d: bias shape {:?}, expected [{o}]", b.shape())));
            }
        }
        if stride == 0 || h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::Shape(format!(
                "conv2d: kernel {kh}x{kw} (pad {pad}, stride {stride}) does not fit input {h}x{wd}"
            )));
        }
        let geom = ConvGeom { in_c: c, in_h: h, in_w: wd, out_c: o, kh, kw, stride, pad };
        let out = kernels::conv2d_forward(slice(&x.value), n, slice(&w.value), b.map(|b| slice(&b.value)), &geom);
        let shape = [n, o, geom.out_h(), geom.out_w()];
        let tracked = x.node.is_some() || w.node.is_some() || b.is_some_and(|b| b.node.is_some());
        Ok(self.wrap(from_vec(&shape, out), tracked, || Op::Conv2d {
            x: w.node.map(|_| x.value.clone()),
            w: x.node.map(|_| w.value.clone()),
            px: x.node,
            pw: w.node,
            pb: b.and_then(|b| b.node),
            geom,
            n,
        }))
    }

    pub fn pad_reflect(&mut self, x: &Var, pad: usize) -> Result<Var> {
        let (n, c, h, w) = dims4(&x.value, "pad_reflect")?;
        if pad >= h || pad >= w {
            return Err(Error::Shape(format!("pad_reflect: pad {pad} too large for {h}x{w}")));
        }
        let out = kernels::pad_reflect_forward(slice(&x.value), n * c, h, w, pad);
        let shape = [n, c, h + 2 * pad, w + 2 * pad];
        Ok(self.wrap(from_vec(&shape, out), x.node.is_some(), || Op::PadReflect {
            px: x.node.unwrap(),
            planes: n * c,
            h,
            w,
            pad,
        }))
    }

    pub fn upsample_bilinear(&mut self, x: &Var, out_hw: (usize, usize)) -> Result<Var> {
        let (n, c, h, w) = dims4(&x.value, "upsample_bilinear")?;
        if out_hw.0 == 0 || out_hw.1 == 0 {
            return Err(Error::Shape("upsample_bilinear: empty output size".into()));
        }
        let out = kernels::bilinear_forward(slice(&x.value), n * c, (h, w), out_hw);
        let shape = [n, c, out_hw.0, out_hw.1];
        Ok(self.wrap(from_vec(&shape, out), x.node.is_some(), || Op::Bilinear {
            px: x.node.unwrap(),
            planes: n * c,
            inp: (h, w),
            out: out_hw,
        }))
    }

    pub fn leaky_relu(&mut self, x: &Var, slope: f64) -> Var {
        let out = Arc::new(x.value.mapv(|v| if v > 0.0 { v } else { slope * v }));
        let node = if x.node.is_some() {
            self.push(Op::LeakyRelu {
                px: x.node.unwrap(),
                out: out.clone(),
                slope,
            })
        } else {
            None
        };
        Var { value: out, node }
    }

    pub fn relu(&mut self, x: &Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    pub fn sigmoid(&mut self, x: &Var) -> Var {
        let out = Arc::new(x.value.mapv(|v| 1.0 / (1.0 + (-v).exp())));
        let node = if x.node.is_some() {
            self.push(Op::Sigmoid {
                px: x.node.unwrap(),
                out: out.clone(),
            })
        } else {
            None
        };
        Var { value: out, node }
    }

    /// `alpha * a + beta * b` for equal shapes.
    pub fn lincomb(&mut self, a: &Var, alpha: f64, b: &Var, beta: f64) -> Result<Var> {
        if a.shape() != b.shape() {
            return Err(Error::Shape(format!("lincomb: shapes {:?} and {:?} differ", a.shape(), b.shape())));
        }
        let mut out = a.value.mapv(|v| alpha * v);
        out.zip_mut_with(&b.value, |o, &v| *o += beta * v);
        let tracked = a.node.is_some() || b.node.is_some();
        Ok(self.wrap(out, tracked, || Op::LinComb {
            pa: a.node,
            pb: b.node,
            alpha,
            beta,
        }))
    }

    pub fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.lincomb(a, 1.0, b, 1.0)
    }

    pub fn sub(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.lincomb(a, 1.0, b, -1.0)
    }

    pub fn scale(&mut self, x: &Var, c: f64) -> Var {
        let zero = self.constant(Tensor::zeros(x.shape()));
        self.lincomb(x, c, &zero, 0.0).expect("same shape")
    }

    /// Repeats a batch-of-one tensor `n` times along the batch axis.
    pub fn broadcast_batch(&mut self, x: &Var, n: usize) -> Result<Var> {
        let shape = x.shape();
        if shape.is_empty() || shape[0] != 1 {
            return Err(Error::Shape(format!("broadcast_batch: expected leading dim 1, got {shape:?}")));
        }
        if n == 1 {
            return Ok(x.clone());
        }
        let mut out_shape = shape.to_vec();
        out_shape[0] = n;
        let out = x
            .value
            .broadcast(IxDyn(&out_shape))
            .expect("leading dim 1 broadcasts")
            .to_owned();
        Ok(self.wrap(out, x.node.is_some(), || Op::BroadcastBatch {
            px: x.node.unwrap(),
        }))
    }

    /// Brings `b` to `a`'s batch size when `b` has a batch of one.
    pub fn match_batch(&mut self, b: &Var, n: usize) -> Result<Var> {
        if b.shape().first() == Some(&n) {
            Ok(b.clone())
        } else {
            self.broadcast_batch(b, n)
        }
    }

    pub fn concat_channels(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let (n, ca, h, w) = dims4(&a.value, "concat_channels")?;
        let (nb, cb, hb, wb) = dims4(&b.value, "concat_channels")?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::Shape(format!(
                "concat_channels: {:?} and {:?} differ outside the channel axis",
                a.shape(),
                b.shape()
            )));
        }
        let out = ndarray::concatenate(Axis(1), &[a.value.view(), b.value.view()])
            .expect("checked shapes")
            .as_standard_layout()
            .into_owned();
        let tracked = a.node.is_some() || b.node.is_some();
        Ok(self.wrap(out, tracked, || Op::ConcatChannels {
            pa: a.node,
            pb: b.node,
            ca,
            cb,
        }))
    }

    pub fn maxpool2d(&mut self, x: &Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        let (n, c, h, w) = dims4(&x.value, "maxpool2d")?;
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::Shape(format!("maxpool2d: kernel {k} larger than {h}x{w}")));
        }
        let g = PoolGeom { h, w, k, stride, pad };
        let (out, argmax) = kernels::maxpool_forward(slice(&x.value), n * c, &g);
        let shape = [n, c, g.out_h(), g.out_w()];
        Ok(self.wrap(from_vec(&shape, out), x.node.is_some(), || Op::MaxPool {
            px: x.node.unwrap(),
            in_shape: vec![n, c, h, w],
            argmax,
        }))
    }

    /// Non-overlapping average pooling with kernel and stride `k`.
    pub fn avgpool2d(&mut self, x: &Var, k: usize) -> Result<Var> {
        let (n, c, h, w) = dims4(&x.value, "avgpool2d")?;
        if k == 0 || k > h || k > w {
            return Err(Error::Validation(format!(
                "average pooling kernel {k} does not fit a {h}x{w} feature map"
            )));
        }
        let out = kernels::avgpool_forward(slice(&x.value), n * c, h, w, k);
        let shape = [n, c, h / k, w / k];
        Ok(self.wrap(from_vec(&shape, out), x.node.is_some(), || Op::AvgPool {
            px: x.node.unwrap(),
            in_shape: vec![n, c, h, w],
            k,
        }))
    }

    /// `[N, C, H, W] -> [N, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: &Var) -> Result<Var> {
        let (n, c, h, w) = dims4(&x.value, "global_avg_pool")?;
        let hw = (h * w) as f64;
        let out: Vec<f64> = slice(&x.value).chunks(h * w).map(|p| p.iter().sum::<f64>() / hw).collect();
        Ok(self.wrap(from_vec(&[n, c], out), x.node.is_some(), || Op::GlobalAvgPool {
            px: x.node.unwrap(),
            in_shape: vec![n, c, h, w],
        }))
    }

    pub fn reshape(&mut self, x: &Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != x.value.len() {
            return Err(Error::Shape(format!("reshape: {:?} -> {shape:?}", x.shape())));
        }
        let out = from_vec(shape, slice(&x.value).to_vec());
        let in_shape = x.shape().to_vec();
        Ok(self.wrap(out, x.node.is_some(), || Op::Reshape {
            px: x.node.unwrap(),
            in_shape,
        }))
    }

    /// `x · wᵀ + b` with `x: [N, F]`, `w: [O, F]`, `b: [O]`.
    pub fn linear(&mut self, x: &Var, w: &Var, b: Option<&Var>) -> Result<Var> {
        let (xs, ws) = (x.shape(), w.shape());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::Shape(format!("linear: input {xs:?} vs weight {ws:?}")));
        }
        let x2 = x.value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let w2 = w.value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let mut out = x2.dot(&w2.t());
        if let Some(b) = b {
            if b.shape() != [ws[0]] {
                return Err(Error::Shape(format!("linear: bias shape {:?}", b.shape())));
            }
            let b1 = b.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
            out += &b1;
        }
        let tracked = x.node.is_some() || w.node.is_some() || b.is_some_and(|b| b.node.is_some());
        Ok(self.wrap(out.into_dyn(), tracked, || Op::Linear {
            x: w.node.map(|_| x.value.clone()),
            w: x.node.map(|_| w.value.clone()),
            px: x.node,
            pw: w.node,
            pb: b.and_then(|b| b.node),
        }))
    }

    /// Training-mode batch normalization over `(N, H, W)` per channel.
    pub fn batch_norm_train(&mut self, x: &Var, gamma: &Var, beta: &Var, eps: f64) -> Result<(Var, BatchStats)> {
        let (n, c, h, w) = dims4(&x.value, "batch_norm")?;
        let hw = h * w;
        let m = (n * hw) as f64;
        let xs = slice(&x.value);
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut s = 0.0;
            for i in 0..n {
                s += xs[(i * c + ch) * hw..(i * c + ch + 1) * hw].iter().sum::<f64>();
            }
            mean[ch] = s / m;
            let mut q = 0.0;
            for i in 0..n {
                q += xs[(i * c + ch) * hw..(i * c + ch + 1) * hw]
                    .iter()
                    .map(|v| (v - mean[ch]).powi(2))
                    .sum::<f64>();
            }
            var[ch] = q / m;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; xs.len()];
        let mut out = vec![0.0; xs.len()];
        let gs = slice(&gamma.value);
        let bs = slice(&beta.value);
        for i in 0..n {
            for ch in 0..c {
                let r = (i * c + ch) * hw..(i * c + ch + 1) * hw;
                for j in r {
                    let v = (xs[j] - mean[ch]) * inv_std[ch];
                    xhat[j] = v;
                    out[j] = gs[ch] * v + bs[ch];
                }
            }
        }
        let unbiased = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
        let stats = BatchStats {
            var: var.iter().map(|v| v * unbiased).collect(),
            mean,
        };
        let shape = [n, c, h, w];
        let tracked = x.node.is_some() || gamma.node.is_some() || beta.node.is_some();
        let var_out = self.wrap(from_vec(&shape, out), tracked, || Op::BatchNorm {
            px: x.node,
            pg: gamma.node,
            pb: beta.node,
            xhat: Arc::new(from_vec(&shape, xhat)),
            inv_std,
            gamma: gamma.value.clone(),
        });
        Ok((var_out, stats))
    }

    /// Per-channel `scale * x + shift` with constant coefficients.
    pub fn channel_affine(&mut self, x: &Var, scale: &[f64], shift: &[f64]) -> Result<Var> {
        let (_, c, h, w) = dims4(&x.value, "channel_affine")?;
        if scale.len() != c || shift.len() != c {
            return Err(Error::Shape(format!("channel_affine: {c} channels, {} coefficients", scale.len())));
        }
        let hw = h * w;
        let mut out = slice(&x.value).to_vec();
        for (j, v) in out.iter_mut().enumerate() {
            let ch = (j / hw) % c;
            *v = scale[ch] * *v + shift[ch];
        }
        let shape = x.shape().to_vec();
        Ok(self.wrap(from_vec(&shape, out), x.node.is_some(), || Op::ChannelAffine {
            px: x.node.unwrap(),
            scale: scale.to_vec(),
        }))
    }

    /// Per-sample normalized Gram matrix `F Fᵀ / (C H W)`, shape `[N, C, C]`.
    pub fn gram(&mut self, x: &Var) -> Result<Var> {
        let (n, c, h, w) = dims4(&x.value, "gram")?;
        let l = h * w;
        let norm = 1.0 / (c * l) as f64;
        let mut out = Tensor::zeros(IxDyn(&[n, c, c]));
        for i in 0..n {
            let f = ndarray::ArrayView2::from_shape((c, l), &slice(&x.value)[i * c * l..(i + 1) * c * l]).unwrap();
            let gm = f.dot(&f.t()) * norm;
            out.index_axis_mut(Axis(0), i).assign(&gm);
        }
        Ok(self.wrap(out, x.node.is_some(), || Op::Gram {
            px: x.node.unwrap(),
            x: x.value.clone(),
        }))
    }

    /// Sum of squared entries as a 0-d scalar.
    pub fn sum_squares(&mut self, x: &Var) -> Var {
        let s: f64 = x.value.iter().map(|v| v * v).sum();
        self.wrap(ArrayD::from_elem(IxDyn(&[]), s), x.node.is_some(), || Op::SumSquares {
            px: x.node.unwrap(),
            x: x.value.clone(),
        })
    }

    /// Batch-mean cross entropy between `logits: [N, K]` and row-stochastic
    /// `targets: [N, K]`, via a max-shifted log-sum-exp.
    pub fn cross_entropy(&mut self, logits: &Var, targets: &Array2<f64>) -> Result<Var> {
        let l = logits
            .value
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .map_err(|_| Error::Shape(format!("cross_entropy: logits {:?} not rank 2", logits.shape())))?;
        if l.dim() != targets.dim() {
            return Err(Error::Shape(format!(
                "cross_entropy: logits {:?} vs targets {:?}",
                l.dim(),
                targets.dim()
            )));
        }
        let n = l.nrows();
        let mut probs = Array2::zeros(l.dim());
        let mut total = 0.0;
        for (i, row) in l.outer_iter().enumerate() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            let lse = m + z.ln();
            for (k, &v) in row.iter().enumerate() {
                probs[[i, k]] = (v - lse).exp();
                total -= targets[[i, k]] * (v - lse);
            }
        }
        let loss = total / n as f64;
        Ok(self.wrap(ArrayD::from_elem(IxDyn(&[]), loss), logits.node.is_some(), || Op::CrossEntropy {
            px: logits.node.unwrap(),
            probs,
            targets: targets.clone(),
        }))
    }

    /// Reverse sweep from a scalar `loss`, consuming the tape.
    pub fn backward(mut self, loss: &Var) -> Result<Gradients> {
        if loss.value.len() != 1 {
            return Err(Error::Shape(format!("backward: loss must be scalar, got {:?}", loss.shape())));
        }
        let mut grads = Gradients::default();
        let Some(root) = loss.node else {
            return Ok(grads);
        };
        self.nodes.truncate(root + 1);
        let mut acc: Vec<Option<Tensor>> = Vec::with_capacity(root + 1);
        acc.resize_with(root + 1, || None);
        acc[root] = Some(ArrayD::from_elem(loss.value.raw_dim(), 1.0));

        while let Some(op) = self.nodes.pop() {
            let id = self.nodes.len();
            let Some(dy) = acc[id].take() else { continue };
            backprop(op, dy, &mut acc, &mut grads);
        }
        Ok(grads)
    }
}

fn accumulate(acc: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut acc[id] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

fn backprop(op: Op, dy: Tensor, acc: &mut [Option<Tensor>], grads: &mut Gradients) {
    let dys = slice(&dy);
    match op {
        Op::Leaf { name } => match grads.by_name.get_mut(&name) {
            Some(g) => *g += &dy,
            None => {
                grads.by_name.insert(name, dy);
            }
        },
        Op::Conv2d { x, w, px, pw, pb, geom, n } => {
            let r = kernels::conv2d_backward(
                dys,
                x.as_deref().map(slice),
                w.as_deref().map(slice),
                n,
                &geom,
                pb.is_some(),
            );
            if let (Some(p), Some(dx)) = (px, r.dx) {
                accumulate(acc, p, from_vec(&[n, geom.in_c, geom.in_h, geom.in_w], dx));
            }
            if let (Some(p), Some(dw)) = (pw, r.dw) {
                accumulate(acc, p, from_vec(&[geom.out_c, geom.in_c, geom.kh, geom.kw], dw));
            }
            if let (Some(p), Some(db)) = (pb, r.db) {
                accumulate(acc, p, from_vec(&[geom.out_c], db));
            }
        }
        Op::PadReflect { px, planes, h, w, pad } => {
            let dx = kernels::pad_reflect_backward(dys, planes, h, w, pad);
            let shape = [dy.shape()[0], dy.shape()[1], h, w];
            accumulate(acc, px, from_vec(&shape, dx));
        }
        Op::Bilinear { px, planes, inp, out } => {
            let dx = kernels::bilinear_backward(dys, planes, inp, out);
            let shape = [dy.shape()[0], dy.shape()[1], inp.0, inp.1];
            accumulate(acc, px, from_vec(&shape, dx));
        }
        Op::LeakyRelu { px, out, slope } => {
            let mut dx = dy;
            dx.zip_mut_with(&out, |g, &o| {
                if o <= 0.0 {
                    *g *= slope
                }
            });
            accumulate(acc, px, dx);
        }
        Op::Sigmoid { px, out } => {
            let mut dx = dy;
            dx.zip_mut_with(&out, |g, &s| *g *= s * (1.0 - s));
            accumulate(acc, px, dx);
        }
        Op::LinComb { pa, pb, alpha, beta } => {
            if let Some(p) = pa {
                accumulate(acc, p, dy.mapv(|v| alpha * v));
            }
            if let Some(p) = pb {
                accumulate(acc, p, dy.mapv(|v| beta * v));
            }
        }
        Op::BroadcastBatch { px } => {
            let dx = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
            accumulate(acc, px, dx);
        }
        Op::ConcatChannels { pa, pb, ca, cb } => {
            if let Some(p) = pa {
                let da = dy.slice_axis(Axis(1), (0..ca).into()).as_standard_layout().into_owned();
                accumulate(acc, p, da);
            }
            if let Some(p) = pb {
                let db = dy
                    .slice_axis(Axis(1), (ca..ca + cb).into())
                    .as_standard_layout()
                    .into_owned();
                accumulate(acc, p, db);
            }
        }
        Op::MaxPool { px, in_shape, argmax } => {
            let mut dx = vec![0.0; in_shape.iter().product()];
            for (g, &i) in dys.iter().zip(&argmax) {
                dx[i] += g;
            }
            accumulate(acc, px, from_vec(&in_shape, dx));
        }
        Op::AvgPool { px, in_shape, k } => {
            let dx = kernels::avgpool_backward(dys, in_shape[0] * in_shape[1], in_shape[2], in_shape[3], k);
            accumulate(acc, px, from_vec(&in_shape, dx));
        }
        Op::GlobalAvgPool { px, in_shape } => {
            let hw = in_shape[2] * in_shape[3];
            let mut dx = Vec::with_capacity(in_shape.iter().product());
            for &g in dys {
                dx.extend(std::iter::repeat(g / hw as f64).take(hw));
            }
            accumulate(acc, px, from_vec(&in_shape, dx));
        }
        Op::Reshape { px, in_shape } => {
            accumulate(acc, px, from_vec(&in_shape, dys.to_vec()));
        }
        Op::Linear { x, w, px, pw, pb } => {
            let dy2 = dy.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            if let (Some(p), Some(w)) = (px, w) {
                let w2 = w.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                accumulate(acc, p, dy2.dot(&w2).into_dyn());
            }
            if let (Some(p), Some(x)) = (pw, x) {
                let x2 = x.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                accumulate(acc, p, dy2.t().dot(&x2).into_dyn());
            }
            if let Some(p) = pb {
                accumulate(acc, p, dy2.sum_axis(Axis(0)).into_dyn());
            }
        }
        Op::BatchNorm { px, pg, pb, xhat, inv_std, gamma } => {
            let (n, c, h, w) = dims4(&xhat, "batch_norm").unwrap();
            let hw = h * w;
            let m = (n * hw) as f64;
            let xh = slice(&xhat);
            let gs = slice(&gamma);
            let mut sum_dy = vec![0.0; c];
            let mut sum_dy_xhat = vec![0.0; c];
            for i in 0..n {
                for ch in 0..c {
                    for j in (i * c + ch) * hw..(i * c + ch + 1) * hw {
                        sum_dy[ch] += dys[j];
                        sum_dy_xhat[ch] += dys[j] * xh[j];
                    }
                }
            }
            if let Some(p) = px {
                let mut dx = vec![0.0; dys.len()];
                for i in 0..n {
                    for ch in 0..c {
                        let k = gs[ch] * inv_std[ch] / m;
                        for j in (i * c + ch) * hw..(i * c + ch + 1) * hw {
                            dx[j] = k * (m * dys[j] - sum_dy[ch] - xh[j] * sum_dy_xhat[ch]);
                        }
                    }
                }
                accumulate(acc, p, from_vec(&[n, c, h, w], dx));
            }
            if let Some(p) = pg {
                accumulate(acc, p, from_vec(&[c], sum_dy_xhat));
            }
            if let Some(p) = pb {
                accumulate(acc, p, from_vec(&[c], sum_dy));
            }
        }
        Op::ChannelAffine { px, scale } => {
            let (_, c, h, w) = dims4(&dy, "channel_affine").unwrap();
            let hw = h * w;
            let mut dx = dy;
            for (j, v) in dx.as_slice_mut().unwrap().iter_mut().enumerate() {
                *v *= scale[(j / hw) % c];
            }
            accumulate(acc, px, dx);
        }
        Op::Gram { px, x } => {
            // G = F Fᵀ / s  =>  dF = (dG + dGᵀ) F / s
            let (n, c, h, w) = dims4(&x, "gram").unwrap();
            let l = h * w;
            let norm = 1.0 / (c * l) as f64;
            let mut dx = vec![0.0; n * c * l];
            for i in 0..n {
                let f = ndarray::ArrayView2::from_shape((c, l), &slice(&x)[i * c * l..(i + 1) * c * l]).unwrap();
                let dg = dy.index_axis(Axis(0), i).into_dimensionality::<ndarray::Ix2>().unwrap();
                let sym = (&dg + &dg.t()) * norm;
                let df = sym.dot(&f);
                dx[i * c * l..(i + 1) * c * l].copy_from_slice(df.as_slice().unwrap());
            }
            accumulate(acc, px, from_vec(&[n, c, h, w], dx));
        }
        Op::SumSquares { px, x } => {
            let g = dys[0];
            accumulate(acc, px, x.mapv(|v| 2.0 * g * v));
        }
        Op::CrossEntropy { px, probs, targets } => {
            let n = probs.nrows() as f64;
            let g = dys[0];
            let dx = (probs - targets) * (g / n);
            accumulate(acc, px, dx.into_dyn());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn untracked_ops_record_nothing() {
        let mut g = Graph::new();
        let x = g.constant(array![[1.0, -2.0]].into_dyn());
        let y = g.relu(&x);
        let _ = g.sum_squares(&y);
        assert!(g.is_empty());
    }

    #[test]
    fn shared_leaf_gradients_accumulate() {
        let mut g = Graph::new();
        let v = Arc::new(array![3.0].into_dyn());
        let a = g.leaf("p", v.clone());
        let b = g.leaf("p", v);
        let s = g.add(&a, &b).unwrap();
        let loss = g.sum_squares(&s);
        let grads = g.backward(&loss).unwrap();
        // d/dp (2p)^2 = 8p
        assert_eq!(grads.get("p").unwrap()[[0]], 24.0);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let a = g.leaf("a", Arc::new(array![1.0, 2.0].into_dyn()));
        assert!(matches!(g.backward(&a), Err(Error::Shape(_))));
    }

    #[test]
    fn cross_entropy_is_stable_for_huge_logits() {
        let mut g = Graph::inference();
        let logits = g.constant(array![[1000.0, 0.0, 0.0]].into_dyn());
        let y = array![[1.0, 0.0, 0.0]];
        let l = g.cross_entropy(&logits, &y).unwrap();
        assert!(l.item().is_finite() && l.item() < 1e-6);
    }
}
