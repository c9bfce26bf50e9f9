//! Reverse-mode automatic differentiation over a tape of tensor operations.
//!
//! Nodes are appended in evaluation order, so the tape index order is a
//! topological order and `backward` is a single reverse sweep. Gradients
//! accumulate additively until the graph is dropped.

use rayon::prelude::*;

use crate::conv::{
    condconv_backward, condconv_forward, conv2d_backward_bias, conv2d_backward_input,
    conv2d_backward_kernel, conv2d_forward, Conv2dSpec,
};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Running batch-norm statistics, owned by the caller across steps.
#[derive(Clone, Debug)]
pub struct BnStats<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

impl<T: Scalar> BnStats<T> {
    pub fn identity(channels: usize) -> Self {
        BnStats { mean: Tensor::zeros(&[channels]), var: Tensor::full(&[channels], T::one()) }
    }
}

#[derive(Clone)]
enum Op<T> {
    Leaf,
    Conv2d { input: NodeId, kernel: NodeId, bias: Option<NodeId>, spec: Conv2dSpec },
    CondConv { input: NodeId, experts: NodeId, alpha: NodeId, spec: Conv2dSpec },
    BatchNorm { input: NodeId, gamma: NodeId, beta: NodeId, mode: BnMode, mean: Vec<T>, invstd: Vec<T> },
    Relu { input: NodeId },
    Sigmoid { input: NodeId },
    SoftmaxAxis { input: NodeId, axis: usize },
    GlobalAvgPool { input: NodeId },
    SumSpatial { input: NodeId },
    Linear { input: NodeId, weight: NodeId, bias: Option<NodeId> },
    Add { a: NodeId, b: NodeId },
    MulElem { a: NodeId, b: NodeId },
    Scale { input: NodeId, factor: T },
    ScaleChannels { input: NodeId, scale: NodeId },
    Stack3 { a: NodeId, b: NodeId, c: NodeId },
    Plane { input: NodeId, index: usize },
    Concat2 { a: NodeId, b: NodeId },
    Reshape { input: NodeId },
    SumAll { input: NodeId },
    Contrastive { f0: NodeId, f1: NodeId, labels: Vec<u8>, margin: T },
    BceChangeProb { probs: NodeId, labels: Vec<u8> },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    op: Op<T>,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> NodeId {
        self.nodes.push(Node { value, grad: None, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Insert a tensor as a graph input (parameter or constant).
    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    // ── forward builders ────────────────────────────────────────────────

    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<NodeId> {
        let spec =
            Conv2dSpec::infer(self.shape(input), self.shape(kernel), stride, pad, groups)?;
        if let Some(b) = bias {
            let blen = self.value(b).numel();
            if blen != spec.out_channels {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias has {} values, C_out is {}", blen, spec.out_channels),
                ));
            }
        }
        let out = conv2d_forward(
            self.value(input).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
            &spec,
        );
        let value = Tensor::new(spec.output_shape(), out)?;
        Ok(self.push(value, Op::Conv2d { input, kernel, bias, spec }))
    }

    /// Conditionally parameterized convolution: each sample is convolved with
    /// its own kernel `sum_i alpha[n,i] * experts[i]` (stride 1).
    pub fn condconv2d(
        &mut self,
        input: NodeId,
        experts: NodeId,
        alpha: NodeId,
        pad: usize,
    ) -> Result<NodeId> {
        let in_shape = self.shape(input).to_vec();
        let ex_shape = self.shape(experts).to_vec();
        let al_shape = self.shape(alpha).to_vec();
        if ex_shape.len() != 5 {
            return Err(Error::shape(
                "condconv2d",
                format!("experts must be k,C_out,C_in,kh,kw; got rank {}", ex_shape.len()),
            ));
        }
        let k = ex_shape[0];
        if k < 1 {
            return Err(Error::invalid("condconv2d", "needs at least one expert"));
        }
        if al_shape != [in_shape[0], k] {
            return Err(Error::shape(
                "condconv2d",
                format!("alpha shape {:?} does not match batch {} x experts {}", al_shape, in_shape[0], k),
            ));
        }
        let spec = Conv2dSpec::infer(
            &[1, in_shape[1], in_shape[2], in_shape[3]],
            &ex_shape[1..],
            1,
            pad,
            1,
        )?;
        let batch = in_shape[0];
        let out = condconv_forward(
            self.value(input).data(),
            self.value(experts).data(),
            self.value(alpha).data(),
            k,
            &spec,
        );
        let mut shape = spec.output_shape();
        shape[0] = batch;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::CondConv { input, experts, alpha, spec }))
    }

    /// Batch normalization. Train mode uses batch statistics and folds them
    /// into `running` with the given momentum; eval mode reads `running`.
    pub fn batch_norm(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running: &mut BnStats<T>,
        mode: BnMode,
        momentum: f64,
        eps: f64,
    ) -> Result<NodeId> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 4 {
            return Err(Error::shape(
                "batch_norm",
                format!("input must be N,C,H,W; got rank {}", shape.len()),
            ));
        }
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::shape("batch_norm", "gamma/beta must have one value per channel"));
        }
        let m = n * h * w;
        let plane = h * w;
        let x = self.value(input).data();

        let (mean, var): (Vec<T>, Vec<T>) = match mode {
            BnMode::Train => {
                if m < 2 {
                    return Err(Error::DegenerateBatch { got: m });
                }
                let minv = T::from_f64(1.0 / m as f64);
                // channels are independent; per-channel sums stay sequential
                let stats: Vec<(T, T)> = (0..c)
                    .into_par_iter()
                    .map(|ci| {
                        let mut acc = T::zero();
                        for ni in 0..n {
                            let off = (ni * c + ci) * plane;
                            for &v in &x[off..off + plane] {
                                acc += v;
                            }
                        }
                        let mu = acc * minv;
                        let mut sq = T::zero();
                        for ni in 0..n {
                            let off = (ni * c + ci) * plane;
                            for &v in &x[off..off + plane] {
                                let d = v - mu;
                                sq += d * d;
                            }
                        }
                        (mu, sq * minv)
                    })
                    .collect();
                let mean: Vec<T> = stats.iter().map(|&(m, _)| m).collect();
                let var: Vec<T> = stats.iter().map(|&(_, v)| v).collect();
                let mom = T::from_f64(momentum);
                let rest = T::one() - mom;
                for ci in 0..c {
                    running.mean.data_mut()[ci] = mom * running.mean.data()[ci] + rest * mean[ci];
                    running.var.data_mut()[ci] = mom * running.var.data()[ci] + rest * var[ci];
                }
                (mean, var)
            }
            BnMode::Eval => (running.mean.data().to_vec(), running.var.data().to_vec()),
        };

        let epsv = T::from_f64(eps);
        let invstd: Vec<T> = var.iter().map(|&v| T::one() / (v + epsv).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = vec![T::zero(); x.len()];
        out.par_chunks_mut(plane).enumerate().for_each(|(j, dst)| {
            let ci = j % c;
            let (mu, is, ga, be) = (mean[ci], invstd[ci], g[ci], b[ci]);
            let off = j * plane;
            for (o, &v) in dst.iter_mut().zip(&x[off..off + plane]) {
                *o = ga * (v - mu) * is + be;
            }
        });
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::BatchNorm { input, gamma, beta, mode, mean, invstd }))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let t = self.value(input);
        let data = par_map(t.data(), |v| if v > T::zero() { v } else { T::zero() });
        let value = Tensor::new(t.shape().to_vec(), data).expect("relu shape");
        self.push(value, Op::Relu { input })
    }

    pub fn sigmoid(&mut self, input: NodeId) -> NodeId {
        let t = self.value(input);
        let data = par_map(t.data(), sigmoid_scalar);
        let value = Tensor::new(t.shape().to_vec(), data).expect("sigmoid shape");
        self.push(value, Op::Sigmoid { input })
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax_axis(&mut self, input: NodeId, axis: usize) -> Result<NodeId> {
        let shape = self.shape(input).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid(
                "softmax_axis",
                format!("axis {} out of range for rank {}", axis, shape.len()),
            ));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let x = self.value(input).data();
        let mut out = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |a: usize| (o * len + a) * inner + i;
                let mut max = x[idx(0)];
                for a in 1..len {
                    if x[idx(a)] > max {
                        max = x[idx(a)];
                    }
                }
                let mut sum = T::zero();
                for a in 0..len {
                    let e = (x[idx(a)] - max).exp();
                    out[idx(a)] = e;
                    sum += e;
                }
                for a in 0..len {
                    out[idx(a)] = out[idx(a)] / sum;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::SoftmaxAxis { input, axis }))
    }

    /// Mean over the spatial dimensions: N,C,H,W -> N,C.
    pub fn global_avg_pool(&mut self, input: NodeId) -> Result<NodeId> {
        let v = self.spatial_reduce(input, true)?;
        Ok(self.push(v, Op::GlobalAvgPool { input }))
    }

    /// Sum over the spatial dimensions: N,C,H,W -> N,C.
    pub fn sum_spatial(&mut self, input: NodeId) -> Result<NodeId> {
        let v = self.spatial_reduce(input, false)?;
        Ok(self.push(v, Op::SumSpatial { input }))
    }

    fn spatial_reduce(&self, input: NodeId, mean: bool) -> Result<Tensor<T>> {
        let shape = self.shape(input);
        if shape.len() != 4 {
            return Err(Error::shape(
                "spatial reduce",
                format!("input must be N,C,H,W; got rank {}", shape.len()),
            ));
        }
        let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
        let scale = if mean { T::from_f64(1.0 / plane as f64) } else { T::one() };
        let x = self.value(input).data();
        let out: Vec<T> = (0..n * c)
            .into_par_iter()
            .map(|j| {
                let off = j * plane;
                let mut acc = T::zero();
                for &v in &x[off..off + plane] {
                    acc += v;
                }
                acc * scale
            })
            .collect();
        Tensor::new(vec![n, c], out)
    }

    /// Affine map: input [N,D] x weight [D_out,D] (+ bias [D_out]) -> [N,D_out].
    pub fn linear(&mut self, input: NodeId, weight: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let in_shape = self.shape(input).to_vec();
        let w_shape = self.shape(weight).to_vec();
        if in_shape.len() != 2 || w_shape.len() != 2 {
            return Err(Error::shape("fully_connected", "input and weight must be rank 2"));
        }
        let (n, d) = (in_shape[0], in_shape[1]);
        let (dout, dw) = (w_shape[0], w_shape[1]);
        if d != dw {
            return Err(Error::shape(
                "fully_connected",
                format!("input feature dim {} != weight dim {}", d, dw),
            ));
        }
        if let Some(b) = bias {
            if self.value(b).numel() != dout {
                return Err(Error::shape(
                    "fully_connected",
                    format!("bias has {} values, D_out is {}", self.value(b).numel(), dout),
                ));
            }
        }
        let x = self.value(input).data();
        let w = self.value(weight).data();
        let mut out = vec![T::zero(); n * dout];
        T::gemm(n, d, dout, T::one(), x, d as isize, 1, w, 1, d as isize, T::zero(), &mut out, dout as isize, 1);
        if let Some(b) = bias {
            let bv = self.value(b).data().to_vec();
            for row in out.chunks_mut(dout) {
                for (o, &bb) in row.iter_mut().zip(bv.iter()) {
                    *o += bb;
                }
            }
        }
        let value = Tensor::new(vec![n, dout], out)?;
        Ok(self.push(value, Op::Linear { input, weight, bias }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data = par_zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Add { a, b }))
    }

    pub fn mul_elem(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "mul_elem",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data = par_zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::MulElem { a, b }))
    }

    pub fn scale(&mut self, input: NodeId, factor: T) -> NodeId {
        let value = self.value(input).map(|v| v * factor);
        self.push(value, Op::Scale { input, factor })
    }

    /// Multiply each channel plane of x [N,C,H,W] by scale [N,C].
    pub fn scale_channels(&mut self, input: NodeId, scale: NodeId) -> Result<NodeId> {
        let xs = self.shape(input).to_vec();
        let ss = self.shape(scale).to_vec();
        if xs.len() != 4 || ss != [xs[0], xs[1]] {
            return Err(Error::shape(
                "scale_channels",
                format!("input {:?} with scale {:?}", xs, ss),
            ));
        }
        let plane = xs[2] * xs[3];
        let x = self.value(input).data();
        let s = self.value(scale).data();
        let mut out = vec![T::zero(); x.len()];
        out.par_chunks_mut(plane).enumerate().for_each(|(j, dst)| {
            let sv = s[j];
            let off = j * plane;
            for (o, &v) in dst.iter_mut().zip(&x[off..off + plane]) {
                *o = v * sv;
            }
        });
        let value = Tensor::new(xs, out)?;
        Ok(self.push(value, Op::ScaleChannels { input, scale }))
    }

    /// Stack three [N,C] tensors into [N,3,C].
    pub fn stack3(&mut self, a: NodeId, b: NodeId, c: NodeId) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 || self.shape(b) != sa || self.shape(c) != sa {
            return Err(Error::shape("stack3", "expects three equal [N,C] tensors"));
        }
        let (n, ch) = (sa[0], sa[1]);
        let mut out = vec![T::zero(); n * 3 * ch];
        for ni in 0..n {
            for (j, src) in [a, b, c].iter().enumerate() {
                let d = self.value(*src).data();
                out[(ni * 3 + j) * ch..(ni * 3 + j + 1) * ch]
                    .copy_from_slice(&d[ni * ch..(ni + 1) * ch]);
            }
        }
        let value = Tensor::new(vec![n, 3, ch], out)?;
        Ok(self.push(value, Op::Stack3 { a, b, c }))
    }

    /// Select plane `index` from [N,3,C] -> [N,C].
    pub fn plane(&mut self, input: NodeId, index: usize) -> Result<NodeId> {
        let s = self.shape(input).to_vec();
        if s.len() != 3 || index >= s[1] {
            return Err(Error::shape("plane", format!("index {} in shape {:?}", index, s)));
        }
        let (n, planes, ch) = (s[0], s[1], s[2]);
        let x = self.value(input).data();
        let mut out = vec![T::zero(); n * ch];
        for ni in 0..n {
            out[ni * ch..(ni + 1) * ch]
                .copy_from_slice(&x[(ni * planes + index) * ch..(ni * planes + index + 1) * ch]);
        }
        let value = Tensor::new(vec![n, ch], out)?;
        Ok(self.push(value, Op::Plane { input, index }))
    }

    /// Concatenate two [N,Da], [N,Db] tensors along the feature axis.
    pub fn concat2(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(Error::shape("concat2", format!("{:?} vs {:?}", sa, sb)));
        }
        let (n, da, db) = (sa[0], sa[1], sb[1]);
        let xa = self.value(a).data();
        let xb = self.value(b).data();
        let mut out = vec![T::zero(); n * (da + db)];
        for ni in 0..n {
            out[ni * (da + db)..ni * (da + db) + da].copy_from_slice(&xa[ni * da..(ni + 1) * da]);
            out[ni * (da + db) + da..(ni + 1) * (da + db)]
                .copy_from_slice(&xb[ni * db..(ni + 1) * db]);
        }
        let value = Tensor::new(vec![n, da + db], out)?;
        Ok(self.push(value, Op::Concat2 { a, b }))
    }

    pub fn reshape(&mut self, input: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let value = self.value(input).reshaped(shape)?;
        Ok(self.push(value, Op::Reshape { input }))
    }

    pub fn sum_all(&mut self, input: NodeId) -> NodeId {
        let mut acc = T::zero();
        for &v in self.value(input).data() {
            acc += v;
        }
        self.push(Tensor::scalar(acc), Op::SumAll { input })
    }

    /// Margin contrastive loss over feature pairs, batch mean.
    /// Label 0 penalizes distance, label 1 penalizes margin shortfall.
    pub fn contrastive_loss(
        &mut self,
        f0: NodeId,
        f1: NodeId,
        labels: &[u8],
        margin: f64,
    ) -> Result<NodeId> {
        let s0 = self.shape(f0).to_vec();
        if s0.len() != 2 || self.shape(f1) != s0 || labels.len() != s0[0] {
            return Err(Error::shape(
                "contrastive_loss",
                format!("features {:?}/{:?} labels {}", s0, self.shape(f1), labels.len()),
            ));
        }
        if margin <= 0.0 {
            return Err(Error::invalid("contrastive_loss", "margin must be positive"));
        }
        let (n, d) = (s0[0], s0[1]);
        let m = T::from_f64(margin);
        let a = self.value(f0).data();
        let b = self.value(f1).data();
        let mut total = T::zero();
        for ni in 0..n {
            let mut sq = T::zero();
            for j in 0..d {
                let diff = a[ni * d + j] - b[ni * d + j];
                sq += diff * diff;
            }
            if labels[ni] == 0 {
                total += sq;
            } else {
                let gap = m - sq.sqrt();
                if gap > T::zero() {
                    total += gap * gap;
                }
            }
        }
        let value = Tensor::scalar(total * T::from_f64(1.0 / n as f64));
        Ok(self.push(value, Op::Contrastive { f0, f1, labels: labels.to_vec(), margin: m }))
    }

    /// Mean binary cross-entropy against the change-class probability
    /// (column 1), clamped away from 0 and 1.
    pub fn classification_loss(&mut self, probs: NodeId, labels: &[u8]) -> Result<NodeId> {
        let s = self.shape(probs).to_vec();
        if s.len() != 2 || s[1] != 2 || labels.len() != s[0] {
            return Err(Error::shape(
                "classification_loss",
                format!("probs {:?} labels {}", s, labels.len()),
            ));
        }
        let n = s[0];
        let p = self.value(probs).data();
        let mut total = 0.0f64;
        for (ni, &y) in labels.iter().enumerate() {
            let pc = p[ni * 2 + 1].as_f64().clamp(1e-12, 1.0 - 1e-12);
            total -= if y == 1 { pc.ln() } else { (1.0 - pc).ln() };
        }
        let value = Tensor::scalar(T::from_f64(total / n as f64));
        Ok(self.push(value, Op::BceChangeProb { probs, labels: labels.to_vec() }))
    }

    // ── backward ────────────────────────────────────────────────────────

    fn add_local(local: &mut [Option<Tensor<T>>], id: NodeId, delta: &Tensor<T>) {
        match &mut local[id.0] {
            Some(g) => g.add_assign(delta),
            None => local[id.0] = Some(delta.clone()),
        }
    }

    fn add_local_data(
        local: &mut [Option<Tensor<T>>],
        id: NodeId,
        shape: &[usize],
        data: Vec<T>,
    ) {
        let t = Tensor::new(shape.to_vec(), data).expect("gradient shape");
        match &mut local[id.0] {
            Some(g) => g.add_assign(&t),
            None => local[id.0] = Some(t),
        }
    }

    fn spatial_reduce_backward(
        &self,
        input: NodeId,
        grad: &Tensor<T>,
        mean: bool,
        local: &mut [Option<Tensor<T>>],
    ) {
        let shape = self.shape(input).to_vec();
        let plane = shape[2] * shape[3];
        let scale = if mean { T::from_f64(1.0 / plane as f64) } else { T::one() };
        let g = grad.data();
        let mut d = vec![T::zero(); shape.iter().product()];
        d.par_chunks_mut(plane).enumerate().for_each(|(j, dst)| {
            dst.fill(g[j] * scale);
        });
        Self::add_local_data(local, input, &shape, d);
    }

    /// Reverse sweep from a scalar loss. Each call propagates one unit of
    /// loss gradient through a sweep-local buffer and folds the result into
    /// the persistent node gradients, so repeated calls accumulate.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let numel = self.value(loss).numel();
        if numel != 1 {
            return Err(Error::NonScalarLoss { numel });
        }
        let mut local: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        local[loss.0] = Some(Tensor::scalar(T::one()));

        for i in (0..=loss.0).rev() {
            let Some(grad) = local[i].take() else { continue };
            let op = self.nodes[i].op.clone();
            self.propagate(NodeId(i), op, &grad, &mut local);
            match &mut self.nodes[i].grad {
                Some(g) => g.add_assign(&grad),
                None => self.nodes[i].grad = Some(grad),
            }
        }
        Ok(())
    }

    fn propagate(&self, id: NodeId, op: Op<T>, grad: &Tensor<T>, local: &mut [Option<Tensor<T>>]) {
        // Ops only reference earlier nodes, so this sweep is a valid reverse
        // topological order and each node is expanded exactly once.
        match op {
            Op::Leaf => {}

            Op::Conv2d { input, kernel, bias, spec } => {
                let din = conv2d_backward_input(grad.data(), self.value(kernel).data(), &spec);
                let dk = conv2d_backward_kernel(grad.data(), self.value(input).data(), &spec);
                Self::add_local_data(local, input, &self.shape(input).to_vec(), din);
                Self::add_local_data(local, kernel, &self.shape(kernel).to_vec(), dk);
                if let Some(b) = bias {
                    let db = conv2d_backward_bias(grad.data(), &spec);
                    Self::add_local_data(local, b, &self.shape(b).to_vec(), db);
                }
            }

            Op::CondConv { input, experts, alpha, spec } => {
                let k = self.shape(experts)[0];
                let (din, dex, dal) = condconv_backward(
                    grad.data(),
                    self.value(input).data(),
                    self.value(experts).data(),
                    self.value(alpha).data(),
                    k,
                    &spec,
                );
                Self::add_local_data(local, input, &self.shape(input).to_vec(), din);
                Self::add_local_data(local, experts, &self.shape(experts).to_vec(), dex);
                Self::add_local_data(local, alpha, &self.shape(alpha).to_vec(), dal);
            }

            Op::BatchNorm { input, gamma, beta, mode, mean, invstd } => {
                let shape = self.shape(input).to_vec();
                let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
                let m = (n * plane) as f64;
                let x = self.value(input).data();
                let gm = self.value(gamma).data();
                let g = grad.data();

                // per-channel gradient sums, channels independent
                let sums: Vec<(T, T)> = (0..c)
                    .into_par_iter()
                    .map(|ci| {
                        let (mu, is) = (mean[ci], invstd[ci]);
                        let mut sum_g = T::zero();
                        let mut sum_gx = T::zero();
                        for ni in 0..n {
                            let off = (ni * c + ci) * plane;
                            for j in 0..plane {
                                let gv = g[off + j];
                                sum_g += gv;
                                sum_gx += gv * (x[off + j] - mu) * is;
                            }
                        }
                        (sum_g, sum_gx)
                    })
                    .collect();
                let dbeta: Vec<T> = sums.iter().map(|&(sg, _)| sg).collect();
                let dgamma: Vec<T> = sums.iter().map(|&(_, sgx)| sgx).collect();

                let minv = T::from_f64(1.0 / m);
                let mut dx = vec![T::zero(); x.len()];
                dx.par_chunks_mut(plane).enumerate().for_each(|(j, dst)| {
                    let ci = j % c;
                    let (mu, is, ga) = (mean[ci], invstd[ci], gm[ci]);
                    let (sum_g, sum_gx) = sums[ci];
                    let off = j * plane;
                    match mode {
                        BnMode::Train => {
                            for (p, d) in dst.iter_mut().enumerate() {
                                let xhat = (x[off + p] - mu) * is;
                                *d = ga * is * (g[off + p] - minv * (sum_g + xhat * sum_gx));
                            }
                        }
                        BnMode::Eval => {
                            for (p, d) in dst.iter_mut().enumerate() {
                                *d = ga * is * g[off + p];
                            }
                        }
                    }
                });
                Self::add_local_data(local, input, &shape, dx);
                Self::add_local_data(local, gamma, &[c], dgamma);
                Self::add_local_data(local, beta, &[c], dbeta);
            }

            Op::Relu { input } => {
                let x = self.value(input).data();
                let d = par_zip_map(grad.data(), x, |g, v| if v > T::zero() { g } else { T::zero() });
                Self::add_local_data(local, input, &self.shape(input).to_vec(), d);
            }

            Op::Sigmoid { input } => {
                let y = self.nodes[id.0].value.data();
                let d = par_zip_map(grad.data(), y, |g, s| g * s * (T::one() - s));
                Self::add_local_data(local, input, &self.shape(input).to_vec(), d);
            }

            Op::SoftmaxAxis { input, axis } => {
                let shape = self.shape(input).to_vec();
                let (outer, len, inner) = split_axis(&shape, axis);
                let y = self.nodes[id.0].value.data();
                let g = grad.data();
                let mut d = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |a: usize| (o * len + a) * inner + i;
                        let mut dot = T::zero();
                        for a in 0..len {
                            dot += g[idx(a)] * y[idx(a)];
                        }
                        for a in 0..len {
                            d[idx(a)] = y[idx(a)] * (g[idx(a)] - dot);
                        }
                    }
                }
                Self::add_local_data(local, input, &shape, d);
            }

            Op::GlobalAvgPool { input } => self.spatial_reduce_backward(input, grad, true, local),
            Op::SumSpatial { input } => self.spatial_reduce_backward(input, grad, false, local),

            Op::Linear { input, weight, bias } => {
                let (n, d) = (self.shape(input)[0], self.shape(input)[1]);
                let dout = self.shape(weight)[0];
                let x = self.value(input).data();
                let w = self.value(weight).data();
                let g = grad.data();

                let mut dx = vec![T::zero(); n * d];
                T::gemm(n, dout, d, T::one(), g, dout as isize, 1, w, d as isize, 1, T::zero(), &mut dx, d as isize, 1);
                let mut dw = vec![T::zero(); dout * d];
                T::gemm(dout, n, d, T::one(), g, 1, dout as isize, x, d as isize, 1, T::zero(), &mut dw, d as isize, 1);
                Self::add_local_data(local, input, &[n, d], dx);
                Self::add_local_data(local, weight, &[dout, d], dw);
                if let Some(b) = bias {
                    let mut db = vec![T::zero(); dout];
                    for row in g.chunks(dout) {
                        for (o, &gv) in db.iter_mut().zip(row.iter()) {
                            *o += gv;
                        }
                    }
                    Self::add_local_data(local, b, &[dout], db);
                }
            }

            Op::Add { a, b } => {
                Self::add_local(local, a, grad);
                Self::add_local(local, b, grad);
            }

            Op::MulElem { a, b } => {
                let da = par_zip_map(grad.data(), self.value(b).data(), |g, v| g * v);
                let db = par_zip_map(grad.data(), self.value(a).data(), |g, v| g * v);
                Self::add_local_data(local, a, &self.shape(a).to_vec(), da);
                Self::add_local_data(local, b, &self.shape(b).to_vec(), db);
            }

            Op::Scale { input, factor } => {
                let d = grad.map(|g| g * factor);
                Self::add_local(local, input, &d);
            }

            Op::ScaleChannels { input, scale } => {
                let shape = self.shape(input).to_vec();
                let plane = shape[2] * shape[3];
                let x = self.value(input).data();
                let s = self.value(scale).data();
                let g = grad.data();
                let mut dx = vec![T::zero(); x.len()];
                let ds: Vec<T> = dx
                    .par_chunks_mut(plane)
                    .enumerate()
                    .map(|(j, dst)| {
                        let sv = s[j];
                        let off = j * plane;
                        let mut acc = T::zero();
                        for (p, d) in dst.iter_mut().enumerate() {
                            *d = g[off + p] * sv;
                            acc += g[off + p] * x[off + p];
                        }
                        acc
                    })
                    .collect();
                Self::add_local_data(local, input, &shape, dx);
                Self::add_local_data(local, scale, &self.shape(scale).to_vec(), ds);
            }

            Op::Stack3 { a, b, c } => {
                let (n, ch) = (self.shape(a)[0], self.shape(a)[1]);
                let g = grad.data();
                for (j, src) in [a, b, c].into_iter().enumerate() {
                    let mut d = vec![T::zero(); n * ch];
                    for ni in 0..n {
                        d[ni * ch..(ni + 1) * ch]
                            .copy_from_slice(&g[(ni * 3 + j) * ch..(ni * 3 + j + 1) * ch]);
                    }
                    Self::add_local_data(local, src, &[n, ch], d);
                }
            }

            Op::Plane { input, index } => {
                let s = self.shape(input).to_vec();
                let (n, planes, ch) = (s[0], s[1], s[2]);
                let g = grad.data();
                let mut d = vec![T::zero(); n * planes * ch];
                for ni in 0..n {
                    d[(ni * planes + index) * ch..(ni * planes + index + 1) * ch]
                        .copy_from_slice(&g[ni * ch..(ni + 1) * ch]);
                }
                Self::add_local_data(local, input, &s, d);
            }

            Op::Concat2 { a, b } => {
                let (n, da) = (self.shape(a)[0], self.shape(a)[1]);
                let db_dim = self.shape(b)[1];
                let g = grad.data();
                let mut ga = vec![T::zero(); n * da];
                let mut gb = vec![T::zero(); n * db_dim];
                for ni in 0..n {
                    let off = ni * (da + db_dim);
                    ga[ni * da..(ni + 1) * da].copy_from_slice(&g[off..off + da]);
                    gb[ni * db_dim..(ni + 1) * db_dim]
                        .copy_from_slice(&g[off + da..off + da + db_dim]);
                }
                Self::add_local_data(local, a, &[n, da], ga);
                Self::add_local_data(local, b, &[n, db_dim], gb);
            }

            Op::Reshape { input } => {
                let shape = self.shape(input).to_vec();
                let d = Tensor::new(shape, grad.data().to_vec()).expect("reshape gradient");
                Self::add_local(local, input, &d);
            }

            Op::SumAll { input } => {
                let gv = grad.item();
                let d = Tensor::full(self.shape(input), gv);
                Self::add_local(local, input, &d);
            }

            Op::Contrastive { f0, f1, labels, margin } => {
                let (n, d) = (self.shape(f0)[0], self.shape(f0)[1]);
                let a = self.value(f0).data();
                let b = self.value(f1).data();
                let gv = grad.item();
                let ninv = T::from_f64(1.0 / n as f64);
                let two = T::from_f64(2.0);
                let mut d0 = vec![T::zero(); n * d];
                let mut d1 = vec![T::zero(); n * d];
                for (ni, &y) in labels.iter().enumerate() {
                    let mut sq = T::zero();
                    for j in 0..d {
                        let diff = a[ni * d + j] - b[ni * d + j];
                        sq += diff * diff;
                    }
                    let coef = if y == 0 {
                        two
                    } else {
                        let dist = sq.sqrt();
                        if dist > T::zero() && dist < margin {
                            // d/dD (m-D)^2 = -2(m-D); dD/dx = diff/D
                            -two * (margin - dist) / dist
                        } else {
                            T::zero()
                        }
                    };
                    let c = gv * ninv * coef;
                    for j in 0..d {
                        let diff = a[ni * d + j] - b[ni * d + j];
                        d0[ni * d + j] = c * diff;
                        d1[ni * d + j] = -(c * diff);
                    }
                }
                Self::add_local_data(local, f0, &[n, d], d0);
                Self::add_local_data(local, f1, &[n, d], d1);
            }

            Op::BceChangeProb { probs, labels } => {
                let n = labels.len();
                let p = self.value(probs).data();
                let gv = grad.item().as_f64();
                let mut d = vec![T::zero(); n * 2];
                for (ni, &y) in labels.iter().enumerate() {
                    let praw = p[ni * 2 + 1].as_f64();
                    if praw > 1e-12 && praw < 1.0 - 1e-12 {
                        let term = if y == 1 { -1.0 / praw } else { 1.0 / (1.0 - praw) };
                        d[ni * 2 + 1] = T::from_f64(gv * term / n as f64);
                    }
                }
                Self::add_local_data(local, probs, &[n, 2], d);
            }
        }
    }
}

/// Order-preserving parallel elementwise map.
fn par_map<T: Scalar>(a: &[T], f: impl Fn(T) -> T + Sync) -> Vec<T> {
    if a.len() < 1 << 14 {
        a.iter().map(|&x| f(x)).collect()
    } else {
        a.par_iter().map(|&x| f(x)).collect()
    }
}

fn par_zip_map<T: Scalar>(a: &[T], b: &[T], f: impl Fn(T, T) -> T + Sync) -> Vec<T> {
    if a.len() < 1 << 14 {
        a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect()
    } else {
        a.par_iter().zip(b.par_iter()).map(|(&x, &y)| f(x, y)).collect()
    }
}

fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
