//! Reverse-mode automatic differentiation on a flat tape.
//!
//! A [`Graph`] records operations eagerly: every builder method computes its
//! forward value immediately and appends a node. [`Graph::backward`] walks
//! the tape once in reverse and accumulates gradients for every node the
//! loss depends on. Nodes only ever reference earlier nodes, so the tape is
//! topologically sorted by construction.
//!
//! The engine runs entirely in `f64` and is deliberately free of threads and
//! hidden state: the same sequence of builder calls always produces
//! bit-identical values and gradients.
//!
//! Image-like tensors are `[channels, height, width]`; homographies travel
//! through the tape as row-major `[9]` vectors.

use crate::error::{CoreError, Result};
use crate::geometry::{self, CanvasSpec};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// y = a * x + b
    Affine { a: f64, b: f64 },
    Add,
    Sub,
    Mul,
    Relu,
    Sigmoid,
    Tanh,
    Abs,
    SumAll,
    /// sqrt of the sum of squares over the whole tensor
    L2NormAll,
    /// softmax along axis 1 of a 2-D tensor
    SoftmaxRows,
    /// y = w[index] * x, with w a flat-indexed tensor input
    ScaleByElem { index: usize },
    MatMul,
    Transpose,
    Reshape { from: Vec<usize> },
    /// concat [c_i, h, w] tensors along the channel axis
    ConcatChannels,
    /// x [c,h,w] + bias [c]
    AddChannelBias,
    Conv2d { kh: usize, kw: usize, dilation: usize, groups: usize },
    AvgPool { k: usize, stride: usize, pad: usize },
    MaxPool { k: usize, stride: usize, pad: usize },
    InstanceNorm { eps: f64 },
    UpsampleBilinear,
    Pad2d { top: usize, left: usize },
    Crop2d { top: usize, left: usize, oh: usize, ow: usize },
    /// inputs (img [c,h,w], hinv [9]); warp onto the canvas
    Warp { canvas: CanvasSpec },
    /// 3x3 matrix inverse on a [9] vector
    Inverse3,
    /// offsets [8] -> homography [9] with bottom-right pinned to 1
    Dlt4 { src: [[f64; 2]; 4] },
}

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
}

/// Gradients produced by [`Graph::backward`], indexed by node id.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a node, or zeros of the node's shape if the loss did not
    /// depend on it.
    pub fn get_or_zeros(&self, id: NodeId, shape: &[usize]) -> Tensor {
        match self.get(id) {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape),
        }
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, inputs, value });
        NodeId(self.nodes.len() - 1)
    }

    // -- leaves ------------------------------------------------------------

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, vec![], value)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.leaf(Tensor::scalar(v))
    }

    // -- elementwise -------------------------------------------------------

    pub fn affine(&mut self, x: NodeId, a: f64, b: f64) -> NodeId {
        let value = self.value(x).map(|v| a * v + b);
        self.push(Op::Affine { a, b }, vec![x], value)
    }

    pub fn scale(&mut self, x: NodeId, a: f64) -> NodeId {
        self.affine(x, a, 0.0)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert!(va.same_shape(vb), "add shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::from_vec(va.shape(), data);
        self.push(Op::Add, vec![a, b], value)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert!(va.same_shape(vb), "sub shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let value = Tensor::from_vec(va.shape(), data);
        self.push(Op::Sub, vec![a, b], value)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert!(va.same_shape(vb), "mul shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::from_vec(va.shape(), data);
        self.push(Op::Mul, vec![a, b], value)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(Op::Relu, vec![x], value)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(Op::Sigmoid, vec![x], value)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(f64::tanh);
        self.push(Op::Tanh, vec![x], value)
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(f64::abs);
        self.push(Op::Abs, vec![x], value)
    }

    // -- reductions ---------------------------------------------------------

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.value(x).data().iter().sum();
        self.push(Op::SumAll, vec![x], Tensor::scalar(s))
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).numel();
        let s = self.sum_all(x);
        self.affine(s, 1.0 / n as f64, 0.0)
    }

    /// Euclidean norm of the flattened tensor.
    pub fn l2_norm(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.value(x).data().iter().map(|v| v * v).sum();
        self.push(Op::L2NormAll, vec![x], Tensor::scalar(s.sqrt()))
    }

    // -- softmax / mixing ----------------------------------------------------

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        assert_eq!(v.shape().len(), 2, "softmax_rows expects a 2-D tensor");
        let (r, c) = (v.shape()[0], v.shape()[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &v.data()[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for (j, val) in row.iter().enumerate() {
                let e = (val - m).exp();
                out[i * c + j] = e;
                denom += e;
            }
            for j in 0..c {
                out[i * c + j] /= denom;
            }
        }
        let value = Tensor::from_vec(&[r, c], out);
        self.push(Op::SoftmaxRows, vec![x], value)
    }

    /// y = w.data()[index] * x, differentiable in both `x` and `w`.
    pub fn scale_by_elem(&mut self, x: NodeId, w: NodeId, index: usize) -> NodeId {
        let s = self.value(w).data()[index];
        let value = self.value(x).map(|v| s * v);
        self.push(Op::ScaleByElem { index }, vec![x, w], value)
    }

    // -- linear algebra ------------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape().len(), 2);
        assert_eq!(vb.shape().len(), 2);
        let (m, k) = (va.shape()[0], va.shape()[1]);
        let (k2, n) = (vb.shape()[0], vb.shape()[1]);
        assert_eq!(k, k2, "matmul inner dimensions differ");
        let value = matmul_kernel(va.data(), vb.data(), m, k, n);
        self.push(Op::MatMul, vec![a, b], value)
    }

    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        assert_eq!(v.shape().len(), 2);
        let (r, c) = (v.shape()[0], v.shape()[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v.data()[i * c + j];
            }
        }
        let value = Tensor::from_vec(&[c, r], out);
        self.push(Op::Transpose, vec![x], value)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let v = self.value(x);
        assert_eq!(v.numel(), shape.iter().product::<usize>(), "reshape numel");
        let from = v.shape().to_vec();
        let value = Tensor::from_vec(shape, v.data().to_vec());
        self.push(Op::Reshape { from }, vec![x], value)
    }

    pub fn concat_channels(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let (_, h, w) = self.value(parts[0]).chw();
        let mut total_c = 0;
        for &p in parts {
            let (c, ph, pw) = self.value(p).chw();
            assert_eq!((ph, pw), (h, w), "concat spatial mismatch");
            total_c += c;
        }
        let mut data = Vec::with_capacity(total_c * h * w);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::from_vec(&[total_c, h, w], data);
        self.push(Op::ConcatChannels, parts.to_vec(), value)
    }

    pub fn add_channel_bias(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let (c, h, w) = self.value(x).chw();
        assert_eq!(self.value(bias).shape(), &[c], "bias shape");
        let mut data = self.value(x).data().to_vec();
        let b = self.value(bias).data();
        for ch in 0..c {
            for v in &mut data[ch * h * w..(ch + 1) * h * w] {
                *v += b[ch];
            }
        }
        let value = Tensor::from_vec(&[c, h, w], data);
        self.push(Op::AddChannelBias, vec![x, bias], value)
    }

    // -- convolution and pooling ----------------------------------------------

    /// Stride-1, same-padded 2-D convolution.
    ///
    /// `weight` has shape `[c_out, c_in/groups, kh, kw]`; `groups == c_in`
    /// with `c_out == c_in` gives a depthwise convolution.
    pub fn conv2d(&mut self, x: NodeId, weight: NodeId, dilation: usize, groups: usize) -> NodeId {
        let (c_in, h, w) = self.value(x).chw();
        let ws = self.value(weight).shape().to_vec();
        assert_eq!(ws.len(), 4, "conv weight must be 4-D");
        let (c_out, cpg, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        assert_eq!(cpg * groups, c_in, "conv group geometry");
        assert_eq!(c_out % groups, 0, "conv group geometry");
        let value = conv2d_forward(
            self.value(x).data(),
            self.value(weight).data(),
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            dilation,
            groups,
        );
        self.push(Op::Conv2d { kh, kw, dilation, groups }, vec![x, weight], value)
    }

    pub fn avg_pool(&mut self, x: NodeId, k: usize, stride: usize, pad: usize) -> NodeId {
        let value = avg_pool_forward(self.value(x), k, stride, pad);
        self.push(Op::AvgPool { k, stride, pad }, vec![x], value)
    }

    pub fn max_pool(&mut self, x: NodeId, k: usize, stride: usize, pad: usize) -> NodeId {
        let value = max_pool_forward(self.value(x), k, stride, pad);
        self.push(Op::MaxPool { k, stride, pad }, vec![x], value)
    }

    pub fn instance_norm(&mut self, x: NodeId, eps: f64) -> NodeId {
        let v = self.value(x);
        let (c, h, w) = v.chw();
        let n = h * w;
        let mut data = vec![0.0; c * n];
        for ch in 0..c {
            let plane = &v.data()[ch * n..(ch + 1) * n];
            let mean = plane.iter().sum::<f64>() / n as f64;
            let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv_sd = 1.0 / (var + eps).sqrt();
            for (o, &v) in data[ch * n..(ch + 1) * n].iter_mut().zip(plane) {
                *o = (v - mean) * inv_sd;
            }
        }
        let value = Tensor::from_vec(&[c, h, w], data);
        self.push(Op::InstanceNorm { eps }, vec![x], value)
    }

    pub fn upsample_bilinear(&mut self, x: NodeId, oh: usize, ow: usize) -> NodeId {
        let value = upsample_forward(self.value(x), oh, ow);
        self.push(Op::UpsampleBilinear, vec![x], value)
    }

    pub fn pad2d(&mut self, x: NodeId, top: usize, bottom: usize, left: usize, right: usize) -> NodeId {
        let (c, h, w) = self.value(x).chw();
        let (oh, ow) = (h + top + bottom, w + left + right);
        let mut out = Tensor::zeros(&[c, oh, ow]);
        for ch in 0..c {
            for y in 0..h {
                let src = &self.value(x).data()[ch * h * w + y * w..ch * h * w + y * w + w];
                let dst_off = ch * oh * ow + (y + top) * ow + left;
                out.data_mut()[dst_off..dst_off + w].copy_from_slice(src);
            }
        }
        self.push(Op::Pad2d { top, left }, vec![x], out)
    }

    pub fn crop2d(&mut self, x: NodeId, top: usize, left: usize, oh: usize, ow: usize) -> NodeId {
        let (c, h, w) = self.value(x).chw();
        assert!(top + oh <= h && left + ow <= w, "crop out of range");
        let mut out = Tensor::zeros(&[c, oh, ow]);
        for ch in 0..c {
            for y in 0..oh {
                let src_off = ch * h * w + (y + top) * w + left;
                let src = &self.value(x).data()[src_off..src_off + ow];
                let dst_off = ch * oh * ow + y * ow;
                out.data_mut()[dst_off..dst_off + ow].copy_from_slice(src);
            }
        }
        self.push(Op::Crop2d { top, left, oh, ow }, vec![x], out)
    }

    // -- geometry ---------------------------------------------------------------

    /// Warps `img` onto `canvas` using the inverse homography carried by the
    /// `[9]` tensor `hinv`. Differentiable in both inputs.
    pub fn warp(&mut self, img: NodeId, hinv: NodeId, canvas: &CanvasSpec) -> NodeId {
        assert_eq!(self.value(hinv).shape(), &[9], "hinv must be [9]");
        let mut h = [0.0; 9];
        h.copy_from_slice(self.value(hinv).data());
        let value = geometry::warp_forward(self.value(img), &h, canvas);
        self.push(Op::Warp { canvas: *canvas }, vec![img, hinv], value)
    }

    /// 3x3 inverse of a row-major `[9]` homography vector.
    pub fn inverse3(&mut self, h: NodeId) -> Result<NodeId> {
        assert_eq!(self.value(h).shape(), &[9]);
        let mut m = [0.0; 9];
        m.copy_from_slice(self.value(h).data());
        let inv = geometry::inv3(&m).ok_or_else(|| {
            CoreError::DegenerateConfiguration("singular homography in graph".into())
        })?;
        let value = Tensor::from_vec(&[9], inv.to_vec());
        Ok(self.push(Op::Inverse3, vec![h], value))
    }

    /// Homography from four corner offsets via the exact 4-point DLT solve.
    ///
    /// Gradients flow through the linear solve by implicit differentiation
    /// of the 8x8 system.
    pub fn dlt4(&mut self, offsets: NodeId, src: [[f64; 2]; 4]) -> Result<NodeId> {
        assert_eq!(self.value(offsets).shape(), &[8]);
        let mut off = [0.0; 8];
        off.copy_from_slice(self.value(offsets).data());
        let h = geometry::dlt4_from_offsets(&src, &off)?;
        let value = Tensor::from_vec(&[9], h.to_vec());
        Ok(self.push(Op::Dlt4 { src }, vec![offsets], value))
    }

    // -- backward ----------------------------------------------------------------

    /// Accumulates gradients of the scalar node `loss` with respect to every
    /// node it depends on.
    pub fn backward(&self, loss: NodeId) -> Gradients {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor) {
        match &mut grads[id.0] {
            Some(g) => g.axpy(1.0, &delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut Vec<Option<Tensor>>) {
        let node = &self.nodes[i];
        let ins = &node.inputs;
        match &node.op {
            Op::Leaf => {}
            Op::Affine { a, .. } => {
                Self::accumulate(grads, ins[0], g.map(|v| a * v));
            }
            Op::Add => {
                Self::accumulate(grads, ins[0], g.clone());
                Self::accumulate(grads, ins[1], g.clone());
            }
            Op::Sub => {
                Self::accumulate(grads, ins[0], g.clone());
                Self::accumulate(grads, ins[1], g.map(|v| -v));
            }
            Op::Mul => {
                let (a, b) = (self.value(ins[0]), self.value(ins[1]));
                let ga = Tensor::from_vec(
                    a.shape(),
                    g.data().iter().zip(b.data()).map(|(g, b)| g * b).collect(),
                );
                let gb = Tensor::from_vec(
                    b.shape(),
                    g.data().iter().zip(a.data()).map(|(g, a)| g * a).collect(),
                );
                Self::accumulate(grads, ins[0], ga);
                Self::accumulate(grads, ins[1], gb);
            }
            Op::Relu => {
                let x = self.value(ins[0]);
                let gx = Tensor::from_vec(
                    x.shape(),
                    g.data()
                        .iter()
                        .zip(x.data())
                        .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                        .collect(),
                );
                Self::accumulate(grads, ins[0], gx);
            }
            Op::Sigmoid => {
                let y = &node.value;
                let gx = Tensor::from_vec(
                    y.shape(),
                    g.data()
                        .iter()
                        .zip(y.data())
                        .map(|(g, y)| g * y * (1.0 - y))
                        .collect(),
                );
                Self::accumulate(grads, ins[0], gx);
            }
            Op::Tanh => {
                let y = &node.value;
                let gx = Tensor::from_vec(
                    y.shape(),
                    g.data()
                        .iter()
                        .zip(y.data())
                        .map(|(g, y)| g * (1.0 - y * y))
                        .collect(),
                );
                Self::accumulate(grads, ins[0], gx);
            }
            Op::Abs => {
                let x = self.value(ins[0]);
                let gx = Tensor::from_vec(
                    x.shape(),
                    g.data()
                        .iter()
                        .zip(x.data())
                        .map(|(g, x)| g * sign(*x))
                        .collect(),
                );
                Self::accumulate(grads, ins[0], gx);
            }
            Op::SumAll => {
                let x = self.value(ins[0]);
                Self::accumulate(grads, ins[0], Tensor::full(x.shape(), g.item()));
            }
            Op::L2NormAll => {
                let x = self.value(ins[0]);
                let norm = node.value.item().max(1e-30);
                let s = g.item() / norm;
                Self::accumulate(grads, ins[0], x.map(|v| s * v));
            }
            Op::SoftmaxRows => {
                let y = &node.value;
                let (r, c) = (y.shape()[0], y.shape()[1]);
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    let yr = &y.data()[i * c..(i + 1) * c];
                    let gr = &g.data()[i * c..(i + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..c {
                        gx[i * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                Self::accumulate(grads, ins[0], Tensor::from_vec(&[r, c], gx));
            }
            Op::ScaleByElem { index } => {
                let (x, w) = (self.value(ins[0]), self.value(ins[1]));
                let s = w.data()[*index];
                Self::accumulate(grads, ins[0], g.map(|v| s * v));
                let dot: f64 = g.data().iter().zip(x.data()).map(|(g, x)| g * x).sum();
                let mut gw = Tensor::zeros(w.shape());
                gw.data_mut()[*index] = dot;
                Self::accumulate(grads, ins[1], gw);
            }
            Op::MatMul => {
                let (a, b) = (self.value(ins[0]), self.value(ins[1]));
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[1];
                // gA = g . B^T         [m,n] x [n,k]
                let ga = matmul_nt(g.data(), b.data(), m, n, k);
                // gB = A^T . g         [k,m] x [m,n]
                let gb = matmul_tn(a.data(), g.data(), m, k, n);
                Self::accumulate(grads, ins[0], ga);
                Self::accumulate(grads, ins[1], gb);
            }
            Op::Transpose => {
                let (r, c) = (node.value.shape()[0], node.value.shape()[1]);
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        gx[j * r + i] = g.data()[i * c + j];
                    }
                }
                Self::accumulate(grads, ins[0], Tensor::from_vec(&[c, r], gx));
            }
            Op::Reshape { from } => {
                Self::accumulate(grads, ins[0], Tensor::from_vec(from, g.data().to_vec()));
            }
            Op::ConcatChannels => {
                let (_, h, w) = node.value.chw();
                let mut offset = 0;
                for &input in ins {
                    let (ci, _, _) = self.value(input).chw();
                    let len = ci * h * w;
                    let part = Tensor::from_vec(&[ci, h, w], g.data()[offset..offset + len].to_vec());
                    Self::accumulate(grads, input, part);
                    offset += len;
                }
            }
            Op::AddChannelBias => {
                let (c, h, w) = node.value.chw();
                Self::accumulate(grads, ins[0], g.clone());
                let mut gb = vec![0.0; c];
                for ch in 0..c {
                    gb[ch] = g.data()[ch * h * w..(ch + 1) * h * w].iter().sum();
                }
                Self::accumulate(grads, ins[1], Tensor::from_vec(&[c], gb));
            }
            Op::Conv2d { kh, kw, dilation, groups } => {
                let (x, wt) = (self.value(ins[0]), self.value(ins[1]));
                let (gx, gw) = conv2d_backward(x, wt, g, *kh, *kw, *dilation, *groups);
                Self::accumulate(grads, ins[0], gx);
                Self::accumulate(grads, ins[1], gw);
            }
            Op::AvgPool { k, stride, pad } => {
                let gx = avg_pool_backward(self.value(ins[0]), g, *k, *stride, *pad);
                Self::accumulate(grads, ins[0], gx);
            }
            Op::MaxPool { k, stride, pad } => {
                let gx = max_pool_backward(self.value(ins[0]), g, *k, *stride, *pad);
                Self::accumulate(grads, ins[0], gx);
            }
            Op::InstanceNorm { eps } => {
                let x = self.value(ins[0]);
                let y = &node.value;
                let (c, h, w) = x.chw();
                let n = h * w;
                let nf = n as f64;
                let mut gx = vec![0.0; c * n];
                for ch in 0..c {
                    let xs = &x.data()[ch * n..(ch + 1) * n];
                    let ys = &y.data()[ch * n..(ch + 1) * n];
                    let gs = &g.data()[ch * n..(ch + 1) * n];
                    let mean = xs.iter().sum::<f64>() / nf;
                    let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / nf;
                    let inv_sd = 1.0 / (var + eps).sqrt();
                    let mean_g = gs.iter().sum::<f64>() / nf;
                    let mean_gy = gs.iter().zip(ys).map(|(g, y)| g * y).sum::<f64>() / nf;
                    for j in 0..n {
                        gx[ch * n + j] = inv_sd * (gs[j] - mean_g - ys[j] * mean_gy);
                    }
                }
                Self::accumulate(grads, ins[0], Tensor::from_vec(&[c, h, w], gx));
            }
            Op::UpsampleBilinear => {
                let gx = upsample_backward(self.value(ins[0]), g);
                Self::accumulate(grads, ins[0], gx);
            }
            Op::Pad2d { top, left, .. } => {
                let (c, h, w) = self.value(ins[0]).chw();
                let (_, oh, ow) = node.value.chw();
                let mut gx = Tensor::zeros(&[c, h, w]);
                for ch in 0..c {
                    for y in 0..h {
                        let src_off = ch * oh * ow + (y + top) * ow + left;
                        let dst_off = ch * h * w + y * w;
                        gx.data_mut()[dst_off..dst_off + w]
                            .copy_from_slice(&g.data()[src_off..src_off + w]);
                    }
                }
                Self::accumulate(grads, ins[0], gx);
            }
            Op::Crop2d { top, left, oh, ow } => {
                let (c, h, w) = self.value(ins[0]).chw();
                let mut gx = Tensor::zeros(&[c, h, w]);
                for ch in 0..c {
                    for y in 0..*oh {
                        let src_off = ch * oh * ow + y * ow;
                        let dst_off = ch * h * w + (y + top) * w + left;
                        gx.data_mut()[dst_off..dst_off + ow]
                            .copy_from_slice(&g.data()[src_off..src_off + ow]);
                    }
                }
                Self::accumulate(grads, ins[0], gx);
            }
            Op::Warp { canvas } => {
                let img = self.value(ins[0]);
                let mut hinv = [0.0; 9];
                hinv.copy_from_slice(self.value(ins[1]).data());
                let (gimg, ghinv) = geometry::warp_backward(img, &hinv, canvas, g);
                Self::accumulate(grads, ins[0], gimg);
                Self::accumulate(grads, ins[1], Tensor::from_vec(&[9], ghinv.to_vec()));
            }
            Op::Inverse3 => {
                // d(H^-1) = -H^-1 dH H^-1, so gH = -X^T G X^T with X = H^-1.
                let mut x = [0.0; 9];
                x.copy_from_slice(node.value.data());
                let xt = transpose3(&x);
                let mut gm = [0.0; 9];
                gm.copy_from_slice(g.data());
                let gh = geometry::matmul3(&xt, &geometry::matmul3(&gm, &xt));
                Self::accumulate(
                    grads,
                    ins[0],
                    Tensor::from_vec(&[9], gh.iter().map(|v| -v).collect()),
                );
            }
            Op::Dlt4 { src } => {
                let mut off = [0.0; 8];
                off.copy_from_slice(self.value(ins[0]).data());
                let (a, _) = geometry::dlt4_system(src, &off);
                let mut h8 = [0.0; 8];
                h8.copy_from_slice(&node.value.data()[..8]);
                // Solve A^T y = g8, then chain through the residual.
                let mut g8 = nalgebra::SVector::<f64, 8>::zeros();
                for j in 0..8 {
                    g8[j] = g.data()[j];
                }
                let at = a.transpose();
                let y = at
                    .lu()
                    .solve(&g8)
                    .expect("dlt4 backward: system became singular after forward succeeded");
                let h = node.value.data();
                let mut goff = vec![0.0; 8];
                for i in 0..4 {
                    let d = h[6] * src[i][0] + h[7] * src[i][1] + 1.0;
                    goff[2 * i] = y[2 * i] * d;
                    goff[2 * i + 1] = y[2 * i + 1] * d;
                }
                Self::accumulate(grads, ins[0], Tensor::from_vec(&[8], goff));
            }
        }
    }
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn transpose3(m: &[f64; 9]) -> [f64; 9] {
    [m[0], m[3], m[6], m[1], m[4], m[7], m[2], m[5], m[8]]
}

// ---------------------------------------------------------------------------
// Kernels
// ---------------------------------------------------------------------------

fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Tensor {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::from_vec(&[m, n], out)
}

/// a [m,n] times b^T where b is [k,n]; result [m,k].
fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Tensor {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            out[i * k + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    Tensor::from_vec(&[m, k], out)
}

/// a^T times b where a is [m,k], b is [m,n]; result [k,n].
fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Tensor {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (j, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[j * n..(j + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::from_vec(&[k, n], out)
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward(
    x: &[f64],
    wt: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    dilation: usize,
    groups: usize,
) -> Tensor {
    let cpg_in = c_in / groups;
    let cpg_out = c_out / groups;
    let pad_y = (kh - 1) / 2 * dilation;
    let pad_x = (kw - 1) / 2 * dilation;
    let mut out = vec![0.0; c_out * h * w];
    for gi in 0..groups {
        for co_local in 0..cpg_out {
            let co = gi * cpg_out + co_local;
            let out_plane = &mut out[co * h * w..(co + 1) * h * w];
            for ci_local in 0..cpg_in {
                let ci = gi * cpg_in + ci_local;
                let in_plane = &x[ci * h * w..(ci + 1) * h * w];
                let w_base = ((co * cpg_in) + ci_local) * kh * kw;
                for ky in 0..kh {
                    let dy = (ky * dilation) as isize - pad_y as isize;
                    let y_lo = (-dy).max(0) as usize;
                    let y_hi = (h as isize - dy).min(h as isize) as usize;
                    for kx in 0..kw {
                        let wv = wt[w_base + ky * kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let dx = (kx * dilation) as isize - pad_x as isize;
                        let x_lo = (-dx).max(0) as usize;
                        let x_hi = (w as isize - dx).min(w as isize) as usize;
                        if x_lo >= x_hi {
                            continue;
                        }
                        for y in y_lo..y_hi {
                            let sy = (y as isize + dy) as usize;
                            let src = &in_plane[sy * w + ((x_lo as isize + dx) as usize)
                                ..sy * w + ((x_hi as isize - 1 + dx) as usize) + 1];
                            let dst = &mut out_plane[y * w + x_lo..y * w + x_hi];
                            for (o, s) in dst.iter_mut().zip(src) {
                                *o += wv * s;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[c_out, h, w], out)
}

fn conv2d_backward(
    x: &Tensor,
    wt: &Tensor,
    g: &Tensor,
    kh: usize,
    kw: usize,
    dilation: usize,
    groups: usize,
) -> (Tensor, Tensor) {
    let (c_in, h, w) = x.chw();
    let ws = wt.shape();
    let (c_out, cpg_in) = (ws[0], ws[1]);
    let cpg_out = c_out / groups;
    let pad_y = (kh - 1) / 2 * dilation;
    let pad_x = (kw - 1) / 2 * dilation;
    let mut gx = vec![0.0; c_in * h * w];
    let mut gw = vec![0.0; wt.numel()];
    for gi in 0..groups {
        for co_local in 0..cpg_out {
            let co = gi * cpg_out + co_local;
            let g_plane = &g.data()[co * h * w..(co + 1) * h * w];
            for ci_local in 0..cpg_in {
                let ci = gi * cpg_in + ci_local;
                let in_plane = &x.data()[ci * h * w..(ci + 1) * h * w];
                let gx_plane = &mut gx[ci * h * w..(ci + 1) * h * w];
                let w_base = ((co * cpg_in) + ci_local) * kh * kw;
                for ky in 0..kh {
                    let dy = (ky * dilation) as isize - pad_y as isize;
                    let y_lo = (-dy).max(0) as usize;
                    let y_hi = (h as isize - dy).min(h as isize) as usize;
                    for kx in 0..kw {
                        let dx = (kx * dilation) as isize - pad_x as isize;
                        let x_lo = (-dx).max(0) as usize;
                        let x_hi = (w as isize - dx).min(w as isize) as usize;
                        if x_lo >= x_hi {
                            continue;
                        }
                        let wv = wt.data()[w_base + ky * kw + kx];
                        let mut wacc = 0.0;
                        for y in y_lo..y_hi {
                            let sy = (y as isize + dy) as usize;
                            let sx_lo = (x_lo as isize + dx) as usize;
                            let src = &in_plane[sy * w + sx_lo..sy * w + sx_lo + (x_hi - x_lo)];
                            let grow = &g_plane[y * w + x_lo..y * w + x_hi];
                            // weight gradient: correlation of grad with input
                            wacc += grow.iter().zip(src).map(|(g, s)| g * s).sum::<f64>();
                            if wv != 0.0 {
                                // input gradient: scatter weighted grad
                                let dst = &mut gx_plane
                                    [sy * w + sx_lo..sy * w + sx_lo + (x_hi - x_lo)];
                                for (d, gv) in dst.iter_mut().zip(grow) {
                                    *d += wv * gv;
                                }
                            }
                        }
                        gw[w_base + ky * kw + kx] += wacc;
                    }
                }
            }
        }
    }
    (
        Tensor::from_vec(&[c_in, h, w], gx),
        Tensor::from_vec(ws, gw),
    )
}

fn pool_out_dim(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

fn avg_pool_forward(x: &Tensor, k: usize, stride: usize, pad: usize) -> Tensor {
    let (c, h, w) = x.chw();
    let (oh, ow) = (pool_out_dim(h, k, stride, pad), pool_out_dim(w, k, stride, pad));
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let plane = &x.data()[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            let y0 = (oy * stride) as isize - pad as isize;
            let y_lo = y0.max(0) as usize;
            let y_hi = ((y0 + k as isize).min(h as isize)) as usize;
            for ox in 0..ow {
                let x0 = (ox * stride) as isize - pad as isize;
                let x_lo = x0.max(0) as usize;
                let x_hi = ((x0 + k as isize).min(w as isize)) as usize;
                // average over valid taps only, so constants stay constant
                let mut acc = 0.0;
                for y in y_lo..y_hi {
                    for v in &plane[y * w + x_lo..y * w + x_hi] {
                        acc += v;
                    }
                }
                let count = ((y_hi - y_lo) * (x_hi - x_lo)).max(1);
                out[ch * oh * ow + oy * ow + ox] = acc / count as f64;
            }
        }
    }
    Tensor::from_vec(&[c, oh, ow], out)
}

fn avg_pool_backward(x: &Tensor, g: &Tensor, k: usize, stride: usize, pad: usize) -> Tensor {
    let (c, h, w) = x.chw();
    let (_, oh, ow) = g.chw();
    let mut gx = vec![0.0; c * h * w];
    for ch in 0..c {
        let gx_plane = &mut gx[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            let y0 = (oy * stride) as isize - pad as isize;
            let y_lo = y0.max(0) as usize;
            let y_hi = ((y0 + k as isize).min(h as isize)) as usize;
            for ox in 0..ow {
                let x0 = (ox * stride) as isize - pad as isize;
                let x_lo = x0.max(0) as usize;
                let x_hi = ((x0 + k as isize).min(w as isize)) as usize;
                let count = ((y_hi - y_lo) * (x_hi - x_lo)).max(1);
                let gv = g.data()[ch * oh * ow + oy * ow + ox] / count as f64;
                for y in y_lo..y_hi {
                    for v in &mut gx_plane[y * w + x_lo..y * w + x_hi] {
                        *v += gv;
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[c, h, w], gx)
}

fn max_pool_forward(x: &Tensor, k: usize, stride: usize, pad: usize) -> Tensor {
    let (c, h, w) = x.chw();
    let (oh, ow) = (pool_out_dim(h, k, stride, pad), pool_out_dim(w, k, stride, pad));
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let plane = &x.data()[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let (val, _) = max_pool_window(plane, h, w, oy, ox, k, stride, pad);
                out[ch * oh * ow + oy * ow + ox] = val;
            }
        }
    }
    Tensor::from_vec(&[c, oh, ow], out)
}

/// Max and flat index over the valid window; ties go to the first tap in
/// scan order so the backward pass is deterministic.
fn max_pool_window(
    plane: &[f64],
    h: usize,
    w: usize,
    oy: usize,
    ox: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> (f64, usize) {
    let y0 = (oy * stride) as isize - pad as isize;
    let x0 = (ox * stride) as isize - pad as isize;
    let y_lo = y0.max(0) as usize;
    let y_hi = ((y0 + k as isize).min(h as isize)) as usize;
    let x_lo = x0.max(0) as usize;
    let x_hi = ((x0 + k as isize).min(w as isize)) as usize;
    let mut best = f64::NEG_INFINITY;
    let mut best_idx = y_lo * w + x_lo;
    for y in y_lo..y_hi {
        for x in x_lo..x_hi {
            let v = plane[y * w + x];
            if v > best {
                best = v;
                best_idx = y * w + x;
            }
        }
    }
    (best, best_idx)
}

fn max_pool_backward(x: &Tensor, g: &Tensor, k: usize, stride: usize, pad: usize) -> Tensor {
    let (c, h, w) = x.chw();
    let (_, oh, ow) = g.chw();
    let mut gx = vec![0.0; c * h * w];
    for ch in 0..c {
        let plane = &x.data()[ch * h * w..(ch + 1) * h * w];
        let gx_plane = &mut gx[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let (_, idx) = max_pool_window(plane, h, w, oy, ox, k, stride, pad);
                gx_plane[idx] += g.data()[ch * oh * ow + oy * ow + ox];
            }
        }
    }
    Tensor::from_vec(&[c, h, w], gx)
}

/// Half-pixel source coordinate for bilinear resize, with edge clamping.
fn resize_coords(o: usize, out_n: usize, in_n: usize) -> (usize, usize, f64) {
    if in_n == 1 {
        return (0, 0, 0.0);
    }
    let s = (o as f64 + 0.5) * (in_n as f64 / out_n as f64) - 0.5;
    let s = s.clamp(0.0, (in_n - 1) as f64);
    let i0 = (s.floor() as usize).min(in_n - 2);
    (i0, i0 + 1, s - i0 as f64)
}

fn upsample_forward(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let (c, h, w) = x.chw();
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let plane = &x.data()[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            let (y0, y1, fy) = resize_coords(oy, oh, h);
            for ox in 0..ow {
                let (x0, x1, fx) = resize_coords(ox, ow, w);
                let v = (1.0 - fy) * ((1.0 - fx) * plane[y0 * w + x0] + fx * plane[y0 * w + x1])
                    + fy * ((1.0 - fx) * plane[y1 * w + x0] + fx * plane[y1 * w + x1]);
                out[ch * oh * ow + oy * ow + ox] = v;
            }
        }
    }
    Tensor::from_vec(&[c, oh, ow], out)
}

fn upsample_backward(x: &Tensor, g: &Tensor) -> Tensor {
    let (c, h, w) = x.chw();
    let (_, oh, ow) = g.chw();
    let mut gx = vec![0.0; c * h * w];
    for ch in 0..c {
        let gx_plane = &mut gx[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            let (y0, y1, fy) = resize_coords(oy, oh, h);
            for ox in 0..ow {
                let (x0, x1, fx) = resize_coords(ox, ow, w);
                let gv = g.data()[ch * oh * ow + oy * ow + ox];
                gx_plane[y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                gx_plane[y0 * w + x1] += gv * (1.0 - fy) * fx;
                gx_plane[y1 * w + x0] += gv * fy * (1.0 - fx);
                gx_plane[y1 * w + x1] += gv * fy * fx;
            }
        }
    }
    Tensor::from_vec(&[c, h, w], gx)
}
