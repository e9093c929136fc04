//! Reverse-mode autodiff tape.
//!
//! Every operation appends a node holding the forward value plus whatever
//! the backward pass needs. Nodes are created in topological order by
//! construction, so [`Tape::backward`] is a single reverse sweep that visits
//! each node once. Subgraphs whose ancestors are all constants are skipped
//! during backward (`needs_grad` is propagated at build time), which keeps
//! frozen-teacher forwards cheap inside trainable graphs.

use crate::detmath;
use crate::error::{Error, Result};
use crate::tensor::{as_nchw, fft, kernels, Tensor};

pub const LN_CLAMP: f64 = 1e-12;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct NodeId(pub(crate) u32);

impl NodeId {
    fn idx(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// y = alpha * x + beta
    AffineConst {
        x: NodeId,
        alpha: f64,
        #[allow(dead_code)] // forward-only constant, kept for node dumps
        beta: f64,
    },
    /// x[..., d] + b[d], broadcast over all leading dims.
    AddLastDimBias(NodeId, NodeId),
    /// x[n, rest..] + b[rest..], broadcast over dim 0.
    AddBatchBias(NodeId, NodeId),
    /// x[n,c,h,w] + b[c]
    AddChanBias(NodeId, NodeId),
    /// x[n,c,h,w] * gate[n,c]
    MulChanGate(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Reshape(NodeId),
    Conv2d {
        x: NodeId,
        k: NodeId,
        pad: usize,
        stride: usize,
    },
    TConv2d {
        x: NodeId,
        k: NodeId,
    },
    InstanceNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<f64>,
        invstd: Vec<f64>,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<f64>,
        invstd: Vec<f64>,
        train: bool,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<f64>,
        invstd: Vec<f64>,
    },
    Softmax {
        x: NodeId,
        axis: usize,
    },
    Relu(NodeId),
    Sigmoid(NodeId),
    Gelu(NodeId),
    AdaptiveAvgPool {
        x: NodeId,
        oh: usize,
        ow: usize,
    },
    UpsampleBilinear {
        x: NodeId,
        oh: usize,
        ow: usize,
    },
    ConcatChannels(NodeId, NodeId),
    ConcatTokens(NodeId, NodeId),
    SliceToken {
        x: NodeId,
        index: usize,
    },
    /// [N,C,H,W] -> [N,H*W,C]
    NchwToTokens(NodeId),
    /// [N,S,C] -> [N,C,H,W] with S = H*W
    TokensToNchw {
        x: NodeId,
        h: usize,
        w: usize,
    },
    /// [D] -> [N,1,D]
    BroadcastToken {
        x: NodeId,
        n: usize,
    },
    /// Amplitude of the per-channel 2-D DFT of x. Saves the unit phasors of
    /// the spectrum for the backward pass; zero-amplitude bins get a zero
    /// phasor (zero subgradient).
    Amplitude {
        x: NodeId,
        unit_re: Vec<f64>,
        unit_im: Vec<f64>,
    },
    /// Real part of the inverse DFT of amp * e^{i phase}. The phase input is
    /// a pass-through constant: no gradient flows to it.
    FromFrequency {
        amp: NodeId,
        cos_phase: Vec<f64>,
        sin_phase: Vec<f64>,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        attn: Vec<f64>,
    },
    SumAll(NodeId),
    MeanAll(NodeId),
    /// out[n,h,w] = sum_c f[n,c,h,w] * w[n,c]
    ChannelDot {
        feat: NodeId,
        weights: NodeId,
    },
    DiceLoss {
        p: NodeId,
        g: NodeId,
        smooth: f64,
        inter2: Vec<f64>,
        union: Vec<f64>,
    },
    FocalLoss {
        logits: NodeId,
        g: NodeId,
        gamma: f64,
        alpha: f64,
    },
    /// Mean over batch of sqrt(sum d^2 + eps)/sqrt(m) with d = a - b.
    NormConsistency {
        a: NodeId,
        b: NodeId,
        eps: f64,
        batched: bool,
        raw_norms: Vec<f64>,
    },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    needs_grad: bool,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, needs_grad: bool, op: Op) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            data,
            needs_grad,
            op,
        });
        self.grads.push(None);
        NodeId((self.nodes.len() - 1) as u32)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.idx()].needs_grad
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.idx()].shape
    }

    pub fn data(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.idx()].data
    }

    pub fn to_tensor(&self, id: NodeId) -> Tensor {
        Tensor::from_vec(self.nodes[id.idx()].shape.clone(), self.nodes[id.idx()].data.clone())
            .expect("node invariant")
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id.idx()].data.len(), 1);
        self.nodes[id.idx()].data[0]
    }

    /// Gradient of the last `backward` call w.r.t. this node, if any.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads[id.idx()].as_deref()
    }

    /// Hash of the sign pattern at every relu input on the tape. Finite
    /// differencing is only a valid derivative oracle while the evaluation
    /// stays on one linear piece of each relu; comparing this fingerprint
    /// between the two stencil points detects crossings.
    pub fn relu_sign_fingerprint(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for node in &self.nodes {
            if let Op::Relu(x) = node.op {
                for &v in &self.nodes[x.idx()].data {
                    h = h.wrapping_mul(0x1000_0000_01b3);
                    h ^= u64::from(v > 0.0);
                }
            }
        }
        crate::rng::mix64(h)
    }

    // ── Graph inputs ────────────────────────────────────────────────

    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        self.push(t.shape().to_vec(), t.data().to_vec(), t.requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, t: &Tensor) -> NodeId {
        self.push(t.shape().to_vec(), t.data().to_vec(), false, Op::Leaf)
    }

    pub fn constant_from(&mut self, shape: Vec<usize>, data: Vec<f64>) -> NodeId {
        self.push(shape, data, false, Op::Leaf)
    }

    pub fn variable(&mut self, shape: Vec<usize>, data: Vec<f64>) -> NodeId {
        self.push(shape, data, true, Op::Leaf)
    }

    // ── Elementwise ─────────────────────────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "add")?;
        let data: Vec<f64> = self.nodes[a.idx()]
            .data
            .iter()
            .zip(&self.nodes[b.idx()].data)
            .map(|(x, y)| x + y)
            .collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(self.nodes[a.idx()].shape.clone(), data, ng, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "sub")?;
        let data: Vec<f64> = self.nodes[a.idx()]
            .data
            .iter()
            .zip(&self.nodes[b.idx()].data)
            .map(|(x, y)| x - y)
            .collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(self.nodes[a.idx()].shape.clone(), data, ng, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "mul")?;
        let data: Vec<f64> = self.nodes[a.idx()]
            .data
            .iter()
            .zip(&self.nodes[b.idx()].data)
            .map(|(x, y)| x * y)
            .collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(self.nodes[a.idx()].shape.clone(), data, ng, Op::Mul(a, b)))
    }

    pub fn affine(&mut self, x: NodeId, alpha: f64, beta: f64) -> NodeId {
        let data: Vec<f64> = self.nodes[x.idx()].data.iter().map(|v| alpha * v + beta).collect();
        let ng = self.needs(x);
        self.push(self.nodes[x.idx()].shape.clone(), data, ng, Op::AffineConst { x, alpha, beta })
    }

    pub fn scale(&mut self, x: NodeId, alpha: f64) -> NodeId {
        self.affine(x, alpha, 0.0)
    }

    fn binary_same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.nodes[a.idx()].shape != self.nodes[b.idx()].shape {
            return Err(Error::dimension(format!(
                "{what}: shape {:?} vs {:?}",
                self.nodes[a.idx()].shape,
                self.nodes[b.idx()].shape
            )));
        }
        Ok(())
    }

    pub fn add_last_dim_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let d = *self.nodes[x.idx()].shape.last().unwrap();
        if self.nodes[b.idx()].shape != [d] {
            return Err(Error::dimension(format!(
                "bias shape {:?} does not match last dim {d}",
                self.nodes[b.idx()].shape
            )));
        }
        let bias = &self.nodes[b.idx()].data;
        let data: Vec<f64> = self.nodes[x.idx()]
            .data
            .chunks(d)
            .flat_map(|row| row.iter().zip(bias).map(|(v, bv)| v + bv).collect::<Vec<_>>())
            .collect();
        let ng = self.needs(x) || self.needs(b);
        Ok(self.push(self.nodes[x.idx()].shape.clone(), data, ng, Op::AddLastDimBias(x, b)))
    }

    pub fn add_batch_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let xs = &self.nodes[x.idx()].shape;
        if xs.len() < 2 || self.nodes[b.idx()].shape != xs[1..] {
            return Err(Error::dimension(format!(
                "batch bias shape {:?} does not match trailing dims of {:?}",
                self.nodes[b.idx()].shape, xs
            )));
        }
        let m = self.nodes[b.idx()].data.len();
        let bias = &self.nodes[b.idx()].data;
        let data: Vec<f64> = self.nodes[x.idx()]
            .data
            .chunks(m)
            .flat_map(|row| row.iter().zip(bias).map(|(v, bv)| v + bv).collect::<Vec<_>>())
            .collect();
        let ng = self.needs(x) || self.needs(b);
        Ok(self.push(self.nodes[x.idx()].shape.clone(), data, ng, Op::AddBatchBias(x, b)))
    }

    pub fn add_chan_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (_, c, h, w) = as_nchw(&self.nodes[x.idx()].shape)?;
        if self.nodes[b.idx()].shape != [c] {
            return Err(Error::dimension(format!(
                "channel bias shape {:?} for {c} channels",
                self.nodes[b.idx()].shape
            )));
        }
        let plane = h * w;
        let bias = &self.nodes[b.idx()].data;
        let mut data = self.nodes[x.idx()].data.clone();
        for (i, chunk) in data.chunks_mut(plane).enumerate() {
            let bv = bias[i % c];
            for v in chunk {
                *v += bv;
            }
        }
        let ng = self.needs(x) || self.needs(b);
        Ok(self.push(self.nodes[x.idx()].shape.clone(), data, ng, Op::AddChanBias(x, b)))
    }

    pub fn mul_chan_gate(&mut self, x: NodeId, gate: NodeId) -> Result<NodeId> {
        let (n, c, h, w) = as_nchw(&self.nodes[x.idx()].shape)?;
        if self.nodes[gate.idx()].shape != [n, c] {
            return Err(Error::dimension(format!(
                "gate shape {:?}, expected [{n}, {c}]",
                self.nodes[gate.idx()].shape
            )));
        }
        let plane = h * w;
        let g = &self.nodes[gate.idx()].data;
        let mut data = self.nodes[x.idx()].data.clone();
        for (i, chunk) in data.chunks_mut(plane).enumerate() {
            let gv = g[i];
            for v in chunk {
                *v *= gv;
            }
        }
        let ng = self.needs(x) || self.needs(gate);
        Ok(self.push(self.nodes[x.idx()].shape.clone(), data, ng, Op::MulChanGate(x, gate)))
    }

    // ── Linear algebra ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (&self.nodes[a.idx()].shape, &self.nodes[b.idx()].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dimension(format!("matmul: {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::matmul(&self.nodes[a.idx()].data, &self.nodes[b.idx()].data, m, k, n, &mut out);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(vec![m, n], out, ng, Op::MatMul(a, b)))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[x.idx()].data.len() {
            return Err(Error::dimension(format!(
                "reshape {:?} -> {shape:?}",
                self.nodes[x.idx()].shape
            )));
        }
        let data = self.nodes[x.idx()].data.clone();
        let ng = self.needs(x);
        Ok(self.push(shape, data, ng, Op::Reshape(x)))
    }

    /// 2-D convolution (cross-correlation), zero padding.
    /// x: [C,H,W] or [N,C,H,W]; k: [Cout,Cin,k,k].
    pub fn conv2d(&mut self, x: NodeId, k: NodeId, pad: usize, stride: usize) -> Result<NodeId> {
        let (n, ci, h, w) = as_nchw(&self.nodes[x.idx()].shape)?;
        let ks = self.nodes[k.idx()].shape.clone();
        if ks.len() != 4 || ks[1] != ci || ks[2] != ks[3] {
            return Err(Error::dimension(format!(
                "conv2d kernel {ks:?} against input {:?}",
                self.nodes[x.idx()].shape
            )));
        }
        let ksz = ks[2];
        if stride == 0 {
            return Err(Error::dimension("conv2d: stride must be >= 1"));
        }
        if h + 2 * pad < ksz || w + 2 * pad < ksz {
            return Err(Error::dimension(format!(
                "conv2d: kernel {ksz} larger than padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        let co = ks[0];
        let d = kernels::ConvDims {
            n,
            ci,
            h,
            w,
            co,
            k: ksz,
            pad,
            stride,
            oh: kernels::ConvDims::out_extent(h, ksz, pad, stride),
            ow: kernels::ConvDims::out_extent(w, ksz, pad, stride),
        };
        let mut out = vec![0.0; n * co * d.oh * d.ow];
        kernels::conv2d(&self.nodes[x.idx()].data, &self.nodes[k.idx()].data, &d, &mut out);
        let out_shape = if self.nodes[x.idx()].shape.len() == 3 {
            vec![co, d.oh, d.ow]
        } else {
            vec![n, co, d.oh, d.ow]
        };
        let ng = self.needs(x) || self.needs(k);
        Ok(self.push(out_shape, out, ng, Op::Conv2d { x, k, pad, stride }))
    }

    /// Transposed convolution, kernel [Cin,Cout,2,2], stride fixed at 2.
    pub fn tconv2d(&mut self, x: NodeId, k: NodeId) -> Result<NodeId> {
        let (n, ci, h, w) = as_nchw(&self.nodes[x.idx()].shape)?;
        let ks = self.nodes[k.idx()].shape.clone();
        if ks.len() != 4 || ks[0] != ci || ks[2] != 2 || ks[3] != 2 {
            return Err(Error::dimension(format!(
                "tconv2d kernel {ks:?} against input {:?}",
                self.nodes[x.idx()].shape
            )));
        }
        let co = ks[1];
        let mut out = vec![0.0; n * co * 4 * h * w];
        kernels::tconv2d(&self.nodes[x.idx()].data, &self.nodes[k.idx()].data, n, ci, co, h, w, &mut out);
        let out_shape = if self.nodes[x.idx()].shape.len() == 3 {
            vec![co, 2 * h, 2 * w]
        } else {
            vec![n, co, 2 * h, 2 * w]
        };
        let ng = self.needs(x) || self.needs(k);
        Ok(self.push(out_shape, out, ng, Op::TConv2d { x, k }))
    }

    // ── Normalization ───────────────────────────────────────────────

    /// Per-channel spatial normalization with affine. gamma, beta: [C].
    pub fn instance_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        if eps <= 0.0 {
            return Err(Error::domain("instance_norm: eps must be > 0"));
        }
        let (n, c, h, w) = as_nchw(&self.nodes[x.idx()].shape)?;
        self.check_affine(gamma, beta, c, "instance_norm")?;
        let plane = h * w;
        let mut mean = vec![0.0; n * c];
        let mut invstd = vec![0.0; n * c];
        let src = &self.nodes[x.idx()].data;
        let gd = &self.nodes[gamma.idx()].data;
        let bd = &self.nodes[beta.idx()].data;
        let mut out = vec![0.0; src.len()];
        for g_idx in 0..n * c {
            let xs = &src[g_idx * plane..(g_idx + 1) * plane];
            let m = xs.iter().sum::<f64>() / plane as f64;
            let var = xs.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / plane as f64;
            let inv = 1.0 / (var + eps).sqrt();
            mean[g_idx] = m;
            invstd[g_idx] = inv;
            let (gv, bv) = (gd[g_idx % c], bd[g_idx % c]);
            for (o, &v) in out[g_idx * plane..(g_idx + 1) * plane].iter_mut().zip(xs) {
                *o = (v - m) * inv * gv + bv;
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            self.nodes[x.idx()].shape.clone(),
            out,
            ng,
            Op::InstanceNorm { x, gamma, beta, mean, invstd },
        ))
    }

    fn check_affine(&self, gamma: NodeId, beta: NodeId, c: usize, what: &str) -> Result<()> {
        if self.nodes[gamma.idx()].shape != [c] || self.nodes[beta.idx()].shape != [c] {
            return Err(Error::dimension(format!(
                "{what}: affine shapes {:?}/{:?} for {c} channels",
                self.nodes[gamma.idx()].shape, self.nodes[beta.idx()].shape
            )));
        }
        Ok(())
    }

    /// Train-mode batch norm over (N,H,W) per channel. Returns the node plus
    /// the batch mean/population-variance for running-stat updates.
    pub fn batch_norm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<(NodeId, Vec<f64>, Vec<f64>)> {
        let shape = self.nodes[x.idx()].shape.clone();
        if shape.len() != 4 {
            return Err(Error::dimension(format!("batch_norm: expected [N,C,H,W], got {shape:?}")));
        }
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        if n * h * w < 2 {
            return Err(Error::contract("batch_norm train mode requires N*H*W >= 2"));
        }
        self.check_affine(gamma, beta, c, "batch_norm")?;
        let plane = h * w;
        let m_count = (n * plane) as f64;
        let src = &self.nodes[x.idx()].data;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut s = 0.0;
            for b in 0..n {
                let xs = &src[(b * c + ch) * plane..][..plane];
                s += xs.iter().sum::<f64>();
            }
            let m = s / m_count;
            let mut v = 0.0;
            for b in 0..n {
                let xs = &src[(b * c + ch) * plane..][..plane];
                v += xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>();
            }
            mean[ch] = m;
            var[ch] = v / m_count;
        }
        let invstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let gd = &self.nodes[gamma.idx()].data;
        let bd = &self.nodes[beta.idx()].data;
        let mut out = vec![0.0; src.len()];
        for (i, chunk) in out.chunks_mut(plane).enumerate() {
            let ch = i % c;
            let xs = &src[i * plane..(i + 1) * plane];
            let (m, inv, gv, bv) = (mean[ch], invstd[ch], gd[ch], bd[ch]);
            for (o, &v) in chunk.iter_mut().zip(xs) {
                *o = (v - m) * inv * gv + bv;
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let id = self.push(
            shape,
            out,
            ng,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean: mean.clone(),
                invstd,
                train: true,
            },
        );
        Ok((id, mean, var))
    }

    /// Eval-mode batch norm using frozen running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<NodeId> {
        let (_, c, h, w) = as_nchw(&self.nodes[x.idx()].shape)?;
        self.check_affine(gamma, beta, c, "batch_norm")?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::dimension("batch_norm: running stats length"));
        }
        let plane = h * w;
        let invstd: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let gd = &self.nodes[gamma.idx()].data;
        let bd = &self.nodes[beta.idx()].data;
        let src = &self.nodes[x.idx()].data;
        let mut out = vec![0.0; src.len()];
        for (i, chunk) in out.chunks_mut(plane).enumerate() {
            let ch = i % c;
            let (m, inv, gv, bv) = (running_mean[ch], invstd[ch], gd[ch], bd[ch]);
            for (o, &v) in chunk.iter_mut().zip(&src[i * plane..(i + 1) * plane]) {
                *o = (v - m) * inv * gv + bv;
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            self.nodes[x.idx()].shape.clone(),
            out,
            ng,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean: running_mean.to_vec(),
                invstd,
                train: false,
            },
        ))
    }

    /// Normalization over the last dimension with per-entry affine.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let d = *self.nodes[x.idx()].shape.last().unwrap();
        self.check_affine(gamma, beta, d, "layer_norm")?;
        let rows = self.nodes[x.idx()].data.len() / d;
        let src = &self.nodes[x.idx()].data;
        let gd = &self.nodes[gamma.idx()].data;
        let bd = &self.nodes[beta.idx()].data;
        let mut mean = vec![0.0; rows];
        let mut invstd = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let xs = &src[r * d..(r + 1) * d];
            let m = xs.iter().sum::<f64>() / d as f64;
            let var = xs.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            mean[r] = m;
            invstd[r] = inv;
            for (i, (o, &v)) in out[r * d..(r + 1) * d].iter_mut().zip(xs).enumerate() {
                *o = (v - m) * inv * gd[i] + bd[i];
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            self.nodes[x.idx()].shape.clone(),
            out,
            ng,
            Op::LayerNorm { x, gamma, beta, mean, invstd },
        ))
    }

    // ── Activations & softmax ───────────────────────────────────────

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let data: Vec<f64> = self.nodes[x.idx()].data.iter().map(|&v| v.max(0.0)).collect();
        let ng = self.needs(x);
        self.push(self.nodes[x.idx()].shape.clone(), data, ng, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let data: Vec<f64> = self.nodes[x.idx()].data.iter().map(|&v| sigmoid_scalar(v)).collect();
        let ng = self.needs(x);
        self.push(self.nodes[x.idx()].shape.clone(), data, ng, Op::Sigmoid(x))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let data: Vec<f64> = self.nodes[x.idx()].data.iter().map(|&v| gelu_scalar(v)).collect();
        let ng = self.needs(x);
        self.push(self.nodes[x.idx()].shape.clone(), data, ng, Op::Gelu(x))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let shape = self.nodes[x.idx()].shape.clone();
        if axis >= shape.len() {
            return Err(Error::dimension(format!("softmax axis {axis} for shape {shape:?}")));
        }
        let m = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let src = &self.nodes[x.idx()].data;
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * m * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for j in 0..m {
                    mx = mx.max(src[base + j * inner]);
                }
                let mut sum = 0.0;
                for j in 0..m {
                    let e = detmath::exp(src[base + j * inner] - mx);
                    out[base + j * inner] = e;
                    sum += e;
                }
                let inv = 1.0 / sum;
                for j in 0..m {
                    out[base + j * inner] *= inv;
                }
            }
        }
        let ng = self.needs(x);
        Ok(self.push(shape, out, ng, Op::Softmax { x, axis }))
    }

    // ── Pooling / resampling / reorganization ───────────────────────

    pub fn adaptive_avg_pool(&mut self, x: NodeId, oh: usize, ow: usize) -> Result<NodeId> {
        let (n, c, h, w) = as_nchw(&self.nodes[x.idx()].shape)?;
        if oh > h || ow > w || oh == 0 || ow == 0 {
            return Err(Error::dimension(format!(
                "adaptive_avg_pool: target {oh}x{ow} from {h}x{w}"
            )));
        }
        let src = &self.nodes[x.idx()].data;
        let mut out = vec![0.0; n * c * oh * ow];
        let plane_in = h * w;
        let plane_out = oh * ow;
        for p in 0..n * c {
            let xs = &src[p * plane_in..(p + 1) * plane_in];
            let os = &mut out[p * plane_out..(p + 1) * plane_out];
            for i in 0..oh {
                let (r0, r1) = pool_window(i, h, oh);
                for j in 0..ow {
                    let (c0, c1) = pool_window(j, w, ow);
                    let mut s = 0.0;
                    for r in r0..r1 {
                        for cc in c0..c1 {
                            s += xs[r * w + cc];
                        }
                    }
                    os[i * ow + j] = s / ((r1 - r0) * (c1 - c0)) as f64;
                }
            }
        }
        let out_shape = if self.nodes[x.idx()].shape.len() == 3 {
            vec![c, oh, ow]
        } else {
            vec![n, c, oh, ow]
        };
        let ng = self.needs(x);
        Ok(self.push(out_shape, out, ng, Op::AdaptiveAvgPool { x, oh, ow }))
    }

    /// Bilinear resize of the trailing two dims (align_corners = false).
    pub fn upsample_bilinear(&mut self, x: NodeId, oh: usize, ow: usize) -> Result<NodeId> {
        let shape = self.nodes[x.idx()].shape.clone();
        if shape.len() < 2 {
            return Err(Error::dimension(format!("upsample: shape {shape:?}")));
        }
        let h = shape[shape.len() - 2];
        let w = shape[shape.len() - 1];
        let planes = self.nodes[x.idx()].data.len() / (h * w);
        let src = &self.nodes[x.idx()].data;
        let mut out = vec![0.0; planes * oh * ow];
        for p in 0..planes {
            let xs = &src[p * h * w..(p + 1) * h * w];
            let os = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for i in 0..oh {
                let (r0, r1, fr) = lerp_coords(i, h, oh);
                for j in 0..ow {
                    let (c0, c1, fc) = lerp_coords(j, w, ow);
                    let v00 = xs[r0 * w + c0];
                    let v01 = xs[r0 * w + c1];
                    let v10 = xs[r1 * w + c0];
                    let v11 = xs[r1 * w + c1];
                    os[i * ow + j] = v00 * (1.0 - fr) * (1.0 - fc)
                        + v01 * (1.0 - fr) * fc
                        + v10 * fr * (1.0 - fc)
                        + v11 * fr * fc;
                }
            }
        }
        let mut out_shape = shape.clone();
        let l = out_shape.len();
        out_shape[l - 2] = oh;
        out_shape[l - 1] = ow;
        let ng = self.needs(x);
        Ok(self.push(out_shape, out, ng, Op::UpsampleBilinear { x, oh, ow }))
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (na, ca, ha, wa) = as_nchw(&self.nodes[a.idx()].shape)?;
        let (nb, cb, hb, wb) = as_nchw(&self.nodes[b.idx()].shape)?;
        if (na, ha, wa) != (nb, hb, wb) || self.nodes[a.idx()].shape.len() != self.nodes[b.idx()].shape.len()
        {
            return Err(Error::dimension(format!(
                "concat_channels: {:?} vs {:?}",
                self.nodes[a.idx()].shape, self.nodes[b.idx()].shape
            )));
        }
        let plane = ha * wa;
        let mut data = Vec::with_capacity((ca + cb) * na * plane);
        for i in 0..na {
            data.extend_from_slice(&self.nodes[a.idx()].data[i * ca * plane..(i + 1) * ca * plane]);
            data.extend_from_slice(&self.nodes[b.idx()].data[i * cb * plane..(i + 1) * cb * plane]);
        }
        let out_shape = if self.nodes[a.idx()].shape.len() == 3 {
            vec![ca + cb, ha, wa]
        } else {
            vec![na, ca + cb, ha, wa]
        };
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out_shape, data, ng, Op::ConcatChannels(a, b)))
    }

    /// Concatenate token sequences along dim 1: [N,K1,D] ++ [N,K2,D].
    pub fn concat_tokens(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (&self.nodes[a.idx()].shape, &self.nodes[b.idx()].shape);
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[2] {
            return Err(Error::dimension(format!("concat_tokens: {sa:?} vs {sb:?}")));
        }
        let (n, k1, d) = (sa[0], sa[1], sa[2]);
        let k2 = sb[1];
        let mut data = Vec::with_capacity(n * (k1 + k2) * d);
        for i in 0..n {
            data.extend_from_slice(&self.nodes[a.idx()].data[i * k1 * d..(i + 1) * k1 * d]);
            data.extend_from_slice(&self.nodes[b.idx()].data[i * k2 * d..(i + 1) * k2 * d]);
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(vec![n, k1 + k2, d], data, ng, Op::ConcatTokens(a, b)))
    }

    /// Extract token `index` from [N,K,D] -> [N,D].
    pub fn slice_token(&mut self, x: NodeId, index: usize) -> Result<NodeId> {
        let s = self.nodes[x.idx()].shape.clone();
        if s.len() != 3 || index >= s[1] {
            return Err(Error::dimension(format!("slice_token {index} of {s:?}")));
        }
        let (n, k, d) = (s[0], s[1], s[2]);
        let mut data = Vec::with_capacity(n * d);
        for i in 0..n {
            data.extend_from_slice(&self.nodes[x.idx()].data[(i * k + index) * d..][..d]);
        }
        let ng = self.needs(x);
        Ok(self.push(vec![n, d], data, ng, Op::SliceToken { x, index }))
    }

    /// Flatten spatial positions into a token sequence: [N,C,H,W] -> [N,HW,C].
    pub fn nchw_to_tokens(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.nodes[x.idx()].shape.clone();
        if s.len() != 4 {
            return Err(Error::dimension(format!("nchw_to_tokens: {s:?}")));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let plane = h * w;
        let src = &self.nodes[x.idx()].data;
        let mut data = vec![0.0; src.len()];
        for b in 0..n {
            for ch in 0..c {
                for p in 0..plane {
                    data[(b * plane + p) * c + ch] = src[(b * c + ch) * plane + p];
                }
            }
        }
        let ng = self.needs(x);
        Ok(self.push(vec![n, plane, c], data, ng, Op::NchwToTokens(x)))
    }

    /// Inverse of [`Tape::nchw_to_tokens`].
    pub fn tokens_to_nchw(&mut self, x: NodeId, h: usize, w: usize) -> Result<NodeId> {
        let s = self.nodes[x.idx()].shape.clone();
        if s.len() != 3 || s[1] != h * w {
            return Err(Error::dimension(format!("tokens_to_nchw: {s:?} for {h}x{w}")));
        }
        let (n, c) = (s[0], s[2]);
        let plane = h * w;
        let src = &self.nodes[x.idx()].data;
        let mut data = vec![0.0; src.len()];
        for b in 0..n {
            for ch in 0..c {
                for p in 0..plane {
                    data[(b * c + ch) * plane + p] = src[(b * plane + p) * c + ch];
                }
            }
        }
        let ng = self.needs(x);
        Ok(self.push(vec![n, c, h, w], data, ng, Op::TokensToNchw { x, h, w }))
    }

    /// Repeat a [D] vector as the single token of every batch item.
    pub fn broadcast_token(&mut self, x: NodeId, n: usize) -> Result<NodeId> {
        let s = self.nodes[x.idx()].shape.clone();
        if s.len() != 1 {
            return Err(Error::dimension(format!("broadcast_token: {s:?}")));
        }
        let d = s[0];
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            data.extend_from_slice(&self.nodes[x.idx()].data);
        }
        let ng = self.needs(x);
        Ok(self.push(vec![n, 1, d], data, ng, Op::BroadcastToken { x, n }))
    }

    // ── Frequency domain ────────────────────────────────────────────

    /// Per-channel 2-D DFT in polar form. Returns (amplitude, phase); phase
    /// is a detached constant (gradients flow through amplitude only).
    pub fn to_frequency(&mut self, x: NodeId) -> Result<(NodeId, NodeId)> {
        let (n, c, h, w) = as_nchw(&self.nodes[x.idx()].shape)?;
        if !h.is_power_of_two() || !w.is_power_of_two() {
            return Err(Error::dimension(format!(
                "to_frequency: extents {h}x{w} must be powers of two"
            )));
        }
        let plane = h * w;
        let src = &self.nodes[x.idx()].data;
        let total = n * c * plane;
        let mut amp = vec![0.0; total];
        let mut phase = vec![0.0; total];
        let mut unit_re = vec![0.0; total];
        let mut unit_im = vec![0.0; total];
        let mut re = vec![0.0; plane];
        let mut im = vec![0.0; plane];
        for p in 0..n * c {
            re.copy_from_slice(&src[p * plane..(p + 1) * plane]);
            im.fill(0.0);
            fft::fft2_inplace(h, w, &mut re, &mut im, false);
            for i in 0..plane {
                let (r, ii) = (re[i], im[i]);
                let a = (r * r + ii * ii).sqrt();
                amp[p * plane + i] = a;
                phase[p * plane + i] = detmath::atan2(ii, r);
                if a > 0.0 {
                    unit_re[p * plane + i] = r / a;
                    unit_im[p * plane + i] = ii / a;
                }
            }
        }
        let shape = self.nodes[x.idx()].shape.clone();
        let ng = self.needs(x);
        let amp_id = self.push(shape.clone(), amp, ng, Op::Amplitude { x, unit_re, unit_im });
        let phase_id = self.push(shape, phase, false, Op::Leaf);
        Ok((amp_id, phase_id))
    }

    /// Real part of the inverse DFT of amp * e^{i phase}. Gradient flows to
    /// amplitude; phase is treated as a pass-through constant.
    pub fn from_frequency(&mut self, amp: NodeId, phase: NodeId) -> Result<NodeId> {
        self.binary_same_shape(amp, phase, "from_frequency")?;
        let (n, c, h, w) = as_nchw(&self.nodes[amp.idx()].shape)?;
        if !h.is_power_of_two() || !w.is_power_of_two() {
            return Err(Error::dimension(format!(
                "from_frequency: extents {h}x{w} must be powers of two"
            )));
        }
        if self.nodes[amp.idx()].data.iter().any(|&v| v < 0.0) {
            return Err(Error::domain("from_frequency: negative amplitude entries"));
        }
        let plane = h * w;
        let total = n * c * plane;
        let amp_data = &self.nodes[amp.idx()].data;
        let phase_data = &self.nodes[phase.idx()].data;
        let mut cos_phase = vec![0.0; total];
        let mut sin_phase = vec![0.0; total];
        for i in 0..total {
            cos_phase[i] = detmath::cos(phase_data[i]);
            sin_phase[i] = detmath::sin(phase_data[i]);
        }
        let mut out = vec![0.0; total];
        let mut re = vec![0.0; plane];
        let mut im = vec![0.0; plane];
        let scale = 1.0 / plane as f64;
        for p in 0..n * c {
            for i in 0..plane {
                let a = amp_data[p * plane + i];
                re[i] = a * cos_phase[p * plane + i];
                im[i] = a * sin_phase[p * plane + i];
            }
            fft::fft2_inplace(h, w, &mut re, &mut im, true);
            for i in 0..plane {
                out[p * plane + i] = re[i] * scale;
            }
        }
        let ng = self.needs(amp);
        Ok(self.push(
            self.nodes[amp.idx()].shape.clone(),
            out,
            ng,
            Op::FromFrequency { amp, cos_phase, sin_phase },
        ))
    }

    // ── Attention ───────────────────────────────────────────────────

    /// Scaled dot-product multi-head attention.
    /// q: [N,Tq,D], k/v: [N,Tk,D], D divisible by heads. Output [N,Tq,D].
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize) -> Result<NodeId> {
        let (sq, sk, sv) = (
            self.nodes[q.idx()].shape.clone(),
            self.nodes[k.idx()].shape.clone(),
            self.nodes[v.idx()].shape.clone(),
        );
        if sq.len() != 3 || sk != sv || sk.len() != 3 || sq[0] != sk[0] || sq[2] != sk[2] {
            return Err(Error::dimension(format!("attention: q {sq:?} k {sk:?} v {sv:?}")));
        }
        let (n, tq, d) = (sq[0], sq[1], sq[2]);
        let tk = sk[1];
        if d % heads != 0 {
            return Err(Error::dimension(format!("attention: dim {d} not divisible by {heads} heads")));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qd = &self.nodes[q.idx()].data;
        let kd = &self.nodes[k.idx()].data;
        let vd = &self.nodes[v.idx()].data;
        let mut attn = vec![0.0; n * heads * tq * tk];
        let mut out = vec![0.0; n * tq * d];
        for b in 0..n {
            for hh in 0..heads {
                let a_base = (b * heads + hh) * tq * tk;
                for i in 0..tq {
                    let q_row = &qd[(b * tq + i) * d + hh * dh..][..dh];
                    let mut mx = f64::NEG_INFINITY;
                    for j in 0..tk {
                        let k_row = &kd[(b * tk + j) * d + hh * dh..][..dh];
                        let mut s = 0.0;
                        for (qv, kv) in q_row.iter().zip(k_row) {
                            s += qv * kv;
                        }
                        let s = s * scale;
                        attn[a_base + i * tk + j] = s;
                        mx = mx.max(s);
                    }
                    let mut sum = 0.0;
                    for j in 0..tk {
                        let e = detmath::exp(attn[a_base + i * tk + j] - mx);
                        attn[a_base + i * tk + j] = e;
                        sum += e;
                    }
                    let inv = 1.0 / sum;
                    let o_row = &mut out[(b * tq + i) * d + hh * dh..][..dh];
                    for j in 0..tk {
                        let a = attn[a_base + i * tk + j] * inv;
                        attn[a_base + i * tk + j] = a;
                        let v_row = &vd[(b * tk + j) * d + hh * dh..][..dh];
                        for (ov, &vv) in o_row.iter_mut().zip(v_row) {
                            *ov += a * vv;
                        }
                    }
                }
            }
        }
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(vec![n, tq, d], out, ng, Op::Attention { q, k, v, heads, attn }))
    }

    // ── Reductions & heads ──────────────────────────────────────────

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.nodes[x.idx()].data.iter().sum();
        let ng = self.needs(x);
        self.push(vec![1], vec![s], ng, Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.nodes[x.idx()].data.len();
        let s: f64 = self.nodes[x.idx()].data.iter().sum();
        let ng = self.needs(x);
        self.push(vec![1], vec![s / n as f64], ng, Op::MeanAll(x))
    }

    /// out[n,h,w] = <weights[n,:], feat[n,:,h,w]> — the dynamic classifier
    /// applied pointwise.
    pub fn channel_dot(&mut self, feat: NodeId, weights: NodeId) -> Result<NodeId> {
        let fs = self.nodes[feat.idx()].shape.clone();
        if fs.len() != 4 {
            return Err(Error::dimension(format!("channel_dot: feature {fs:?}")));
        }
        let (n, c, h, w) = (fs[0], fs[1], fs[2], fs[3]);
        if self.nodes[weights.idx()].shape != [n, c] {
            return Err(Error::dimension(format!(
                "channel_dot: weights {:?}, expected [{n},{c}]",
                self.nodes[weights.idx()].shape
            )));
        }
        let plane = h * w;
        let fd = &self.nodes[feat.idx()].data;
        let wd = &self.nodes[weights.idx()].data;
        let mut out = vec![0.0; n * plane];
        for b in 0..n {
            let o = &mut out[b * plane..(b + 1) * plane];
            for ch in 0..c {
                let wv = wd[b * c + ch];
                if wv == 0.0 {
                    continue;
                }
                let f = &fd[(b * c + ch) * plane..][..plane];
                for (ov, &fv) in o.iter_mut().zip(f) {
                    *ov += wv * fv;
                }
            }
        }
        let ng = self.needs(feat) || self.needs(weights);
        Ok(self.push(vec![n, h, w], out, ng, Op::ChannelDot { feat, weights }))
    }

    // ── Fused losses ────────────────────────────────────────────────

    /// Soft Dice loss. A rank-3 [N,H,W] input is treated as a batch and the
    /// per-sample losses are averaged; a [H,W] pair is a single sample.
    /// p must be probabilities in [0,1]; g binary.
    pub fn dice_loss(&mut self, p: NodeId, g: NodeId, smooth: f64) -> Result<NodeId> {
        self.binary_same_shape(p, g, "dice_loss")?;
        let shape = self.nodes[p.idx()].shape.clone();
        let (batch, m) = mask_batch_split(&shape);
        let pd = &self.nodes[p.idx()].data;
        let gd = &self.nodes[g.idx()].data;
        if pd.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::domain("dice_loss: probabilities out of [0,1]"));
        }
        let mut inter2 = vec![0.0; batch];
        let mut union = vec![0.0; batch];
        let mut loss = 0.0;
        for b in 0..batch {
            let ps = &pd[b * m..(b + 1) * m];
            let gs = &gd[b * m..(b + 1) * m];
            let mut pg = 0.0;
            let mut sp = 0.0;
            let mut sg = 0.0;
            for (pv, gv) in ps.iter().zip(gs) {
                pg += pv * gv;
                sp += pv;
                sg += gv;
            }
            inter2[b] = 2.0 * pg + smooth;
            union[b] = sp + sg + smooth;
            loss += 1.0 - inter2[b] / union[b];
        }
        loss /= batch as f64;
        let ng = self.needs(p);
        Ok(self.push(vec![1], vec![loss], ng, Op::DiceLoss { p, g, smooth, inter2, union }))
    }

    /// Focal loss on logits, mean over every pixel.
    pub fn focal_loss(&mut self, logits: NodeId, g: NodeId, gamma: f64, alpha: f64) -> Result<NodeId> {
        self.binary_same_shape(logits, g, "focal_loss")?;
        let zd = &self.nodes[logits.idx()].data;
        let gd = &self.nodes[g.idx()].data;
        let mut loss = 0.0;
        for (&z, &gv) in zd.iter().zip(gd) {
            let p = sigmoid_scalar(z);
            let (pt, at) = if gv > 0.5 { (p, alpha) } else { (1.0 - p, 1.0 - alpha) };
            let lp = detmath::ln(pt.max(LN_CLAMP));
            loss += -at * detmath::pow(1.0 - pt, gamma) * lp;
        }
        loss /= zd.len() as f64;
        let ng = self.needs(logits);
        Ok(self.push(vec![1], vec![loss], ng, Op::FocalLoss { logits, g, gamma, alpha }))
    }

    /// Epsilon-guarded, sqrt(count)-normalized L2 distance. With `batched`,
    /// dim 0 indexes samples: per-sample norms are averaged.
    pub fn norm_consistency(&mut self, a: NodeId, b: NodeId, eps: f64, batched: bool) -> Result<NodeId> {
        self.binary_same_shape(a, b, "norm_consistency")?;
        let shape = self.nodes[a.idx()].shape.clone();
        let (batch, m) = if batched { batch_split(&shape) } else { (1, self.nodes[a.idx()].data.len()) };
        let ad = &self.nodes[a.idx()].data;
        let bd = &self.nodes[b.idx()].data;
        let mut raw_norms = vec![0.0; batch];
        let mut loss = 0.0;
        let inv_sqrt_m = 1.0 / (m as f64).sqrt();
        for s in 0..batch {
            let mut sq = 0.0;
            for i in s * m..(s + 1) * m {
                let d = ad[i] - bd[i];
                sq += d * d;
            }
            let raw = (sq + eps).sqrt();
            raw_norms[s] = raw;
            loss += raw * inv_sqrt_m;
        }
        loss /= batch as f64;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(vec![1], vec![loss], ng, Op::NormConsistency { a, b, eps, batched, raw_norms }))
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse-topological gradient accumulation from a scalar loss. Leaves
    /// off every path keep a `None` gradient; [`Tape::grad`] reports them as
    /// absent and callers treat that as zero.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.idx()].data.len() != 1 {
            return Err(Error::contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.nodes[loss.idx()].shape
            )));
        }
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[loss.idx()] = Some(vec![1.0]);
        for idx in (0..self.nodes.len()).rev() {
            if self.grads[idx].is_none() || !self.nodes[idx].needs_grad {
                continue;
            }
            let g = self.grads[idx].take().unwrap();
            self.step_backward(idx, &g);
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn grad_buf(&mut self, id: NodeId) -> &mut Vec<f64> {
        let n = self.nodes[id.idx()].data.len();
        self.grads[id.idx()].get_or_insert_with(|| vec![0.0; n])
    }

    fn step_backward(&mut self, idx: usize, g: &[f64]) {
        // Split borrows: the op/data of the current node are read-only while
        // gradients of *other* (earlier) nodes are written.
        let node_ptr: *const Node = &self.nodes[idx];
        let node = unsafe { &*node_ptr };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.needs(*a) {
                    accumulate(self.grad_buf(*a), g, 1.0);
                }
                if self.needs(*b) {
                    accumulate(self.grad_buf(*b), g, 1.0);
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    accumulate(self.grad_buf(*a), g, 1.0);
                }
                if self.needs(*b) {
                    accumulate(self.grad_buf(*b), g, -1.0);
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let bd: *const Vec<f64> = &self.nodes[b.idx()].data;
                    let buf = self.grad_buf(*a);
                    for (i, gv) in g.iter().enumerate() {
                        buf[i] += gv * unsafe { &*bd }[i];
                    }
                }
                if self.needs(*b) {
                    let ad: *const Vec<f64> = &self.nodes[a.idx()].data;
                    let buf = self.grad_buf(*b);
                    for (i, gv) in g.iter().enumerate() {
                        buf[i] += gv * unsafe { &*ad }[i];
                    }
                }
            }
            Op::AffineConst { x, alpha, .. } => {
                if self.needs(*x) {
                    accumulate(self.grad_buf(*x), g, *alpha);
                }
            }
            Op::AddLastDimBias(x, b) => {
                if self.needs(*x) {
                    accumulate(self.grad_buf(*x), g, 1.0);
                }
                if self.needs(*b) {
                    let d = self.nodes[b.idx()].data.len();
                    let buf = self.grad_buf(*b);
                    for row in g.chunks(d) {
                        for (bv, gv) in buf.iter_mut().zip(row) {
                            *bv += gv;
                        }
                    }
                }
            }
            Op::AddBatchBias(x, b) => {
                if self.needs(*x) {
                    accumulate(self.grad_buf(*x), g, 1.0);
                }
                if self.needs(*b) {
                    let m = self.nodes[b.idx()].data.len();
                    let buf = self.grad_buf(*b);
                    for row in g.chunks(m) {
                        for (bv, gv) in buf.iter_mut().zip(row) {
                            *bv += gv;
                        }
                    }
                }
            }
            Op::AddChanBias(x, b) => {
                if self.needs(*x) {
                    accumulate(self.grad_buf(*x), g, 1.0);
                }
                if self.needs(*b) {
                    let c = self.nodes[b.idx()].data.len();
                    let (_, _, h, w) = as_nchw(&node.shape).expect("validated");
                    let plane = h * w;
                    let buf = self.grad_buf(*b);
                    for (i, chunk) in g.chunks(plane).enumerate() {
                        buf[i % c] += chunk.iter().sum::<f64>();
                    }
                }
            }
            Op::MulChanGate(x, gate) => {
                let (_, c, h, w) = as_nchw(&node.shape).expect("validated");
                let plane = h * w;
                if self.needs(*x) {
                    let gd: *const Vec<f64> = &self.nodes[gate.idx()].data;
                    let buf = self.grad_buf(*x);
                    for (i, chunk) in g.chunks(plane).enumerate() {
                        let gv = unsafe { &*gd }[i];
                        for (bv, cg) in buf[i * plane..(i + 1) * plane].iter_mut().zip(chunk) {
                            *bv += cg * gv;
                        }
                    }
                }
                if self.needs(*gate) {
                    let xd: *const Vec<f64> = &self.nodes[x.idx()].data;
                    let buf = self.grad_buf(*gate);
                    let _ = c;
                    for (i, chunk) in g.chunks(plane).enumerate() {
                        let xs = &unsafe { &*xd }[i * plane..(i + 1) * plane];
                        buf[i] += chunk.iter().zip(xs).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[a.idx()].shape[0], self.nodes[a.idx()].shape[1]);
                let n = self.nodes[b.idx()].shape[1];
                let ad: *const Vec<f64> = &self.nodes[a.idx()].data;
                let bd: *const Vec<f64> = &self.nodes[b.idx()].data;
                let (na, nb) = (self.needs(*a), self.needs(*b));
                if na {
                    let buf: *mut Vec<f64> = self.grad_buf(*a);
                    kernels::matmul_backward(
                        unsafe { &*ad },
                        unsafe { &*bd },
                        g,
                        m,
                        k,
                        n,
                        Some(unsafe { &mut *buf }),
                        None,
                    );
                }
                if nb {
                    let buf: *mut Vec<f64> = self.grad_buf(*b);
                    kernels::matmul_backward(
                        unsafe { &*ad },
                        unsafe { &*bd },
                        g,
                        m,
                        k,
                        n,
                        None,
                        Some(unsafe { &mut *buf }),
                    );
                }
            }
            Op::Reshape(x) => {
                if self.needs(*x) {
                    accumulate(self.grad_buf(*x), g, 1.0);
                }
            }
            Op::Conv2d { x, k, pad, stride } => {
                let (n, ci, h, w) = as_nchw(&self.nodes[x.idx()].shape).expect("validated");
                let ks = &self.nodes[k.idx()].shape;
                let (co, ksz) = (ks[0], ks[2]);
                let d = kernels::ConvDims {
                    n,
                    ci,
                    h,
                    w,
                    co,
                    k: ksz,
                    pad: *pad,
                    stride: *stride,
                    oh: kernels::ConvDims::out_extent(h, ksz, *pad, *stride),
                    ow: kernels::ConvDims::out_extent(w, ksz, *pad, *stride),
                };
                let xd: *const Vec<f64> = &self.nodes[x.idx()].data;
                let kd: *const Vec<f64> = &self.nodes[k.idx()].data;
                let (nx, nk) = (self.needs(*x), self.needs(*k));
                if nx {
                    let buf: *mut Vec<f64> = self.grad_buf(*x);
                    kernels::conv2d_backward(
                        unsafe { &*xd },
                        unsafe { &*kd },
                        g,
                        &d,
                        Some(unsafe { &mut *buf }),
                        None,
                    );
                }
                if nk {
                    let buf: *mut Vec<f64> = self.grad_buf(*k);
                    kernels::conv2d_backward(
                        unsafe { &*xd },
                        unsafe { &*kd },
                        g,
                        &d,
                        None,
                        Some(unsafe { &mut *buf }),
                    );
                }
            }
            Op::TConv2d { x, k } => {
                let (n, ci, h, w) = as_nchw(&self.nodes[x.idx()].shape).expect("validated");
                let co = self.nodes[k.idx()].shape[1];
                let xd: *const Vec<f64> = &self.nodes[x.idx()].data;
                let kd: *const Vec<f64> = &self.nodes[k.idx()].data;
                let (nx, nk) = (self.needs(*x), self.needs(*k));
                if nx {
                    let buf: *mut Vec<f64> = self.grad_buf(*x);
                    kernels::tconv2d_backward(
                        unsafe { &*xd },
                        unsafe { &*kd },
                        g,
                        n,
                        ci,
                        co,
                        h,
                        w,
                        Some(unsafe { &mut *buf }),
                        None,
                    );
                }
                if nk {
                    let buf: *mut Vec<f64> = self.grad_buf(*k);
                    kernels::tconv2d_backward(
                        unsafe { &*xd },
                        unsafe { &*kd },
                        g,
                        n,
                        ci,
                        co,
                        h,
                        w,
                        None,
                        Some(unsafe { &mut *buf }),
                    );
                }
            }
            Op::InstanceNorm { x, gamma, beta, mean, invstd } => {
                let (n, c, h, w) = as_nchw(&self.nodes[x.idx()].shape).expect("validated");
                let plane = h * w;
                self.norm_backward_groups(
                    *x,
                    *gamma,
                    *beta,
                    g,
                    mean,
                    invstd,
                    n * c,
                    plane,
                    |grp| grp % c,
                    |grp, i| grp * plane + i,
                );
            }
            Op::BatchNorm { x, gamma, beta, mean, invstd, train } => {
                let shape = self.nodes[x.idx()].shape.clone();
                let (n, c, h, w) = as_nchw(&shape).expect("validated");
                let plane = h * w;
                if *train {
                    self.norm_backward_groups(
                        *x,
                        *gamma,
                        *beta,
                        g,
                        mean,
                        invstd,
                        c,
                        n * plane,
                        |grp| grp,
                        move |grp, i| {
                            let b = i / plane;
                            let r = i % plane;
                            (b * c + grp) * plane + r
                        },
                    );
                } else {
                    // Frozen statistics: y = (x - m) * inv * gamma + beta.
                    let gd: *const Vec<f64> = &self.nodes[gamma.idx()].data;
                    let xd: *const Vec<f64> = &self.nodes[x.idx()].data;
                    if self.needs(*x) {
                        let buf = self.grad_buf(*x);
                        for (i, chunk) in g.chunks(plane).enumerate() {
                            let ch = i % c;
                            let scale = unsafe { &*gd }[ch] * invstd[ch];
                            for (bv, gv) in buf[i * plane..(i + 1) * plane].iter_mut().zip(chunk) {
                                *bv += gv * scale;
                            }
                        }
                    }
                    if self.needs(*gamma) {
                        let buf: *mut Vec<f64> = self.grad_buf(*gamma);
                        for (i, chunk) in g.chunks(plane).enumerate() {
                            let ch = i % c;
                            let (m, inv) = (mean[ch], invstd[ch]);
                            let xs = &unsafe { &*xd }[i * plane..(i + 1) * plane];
                            (unsafe { &mut *buf })[ch] += chunk
                                .iter()
                                .zip(xs)
                                .map(|(gv, xv)| gv * (xv - m) * inv)
                                .sum::<f64>();
                        }
                    }
                    if self.needs(*beta) {
                        let buf = self.grad_buf(*beta);
                        for (i, chunk) in g.chunks(plane).enumerate() {
                            buf[i % c] += chunk.iter().sum::<f64>();
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, mean, invstd } => {
                let d = *self.nodes[x.idx()].shape.last().unwrap();
                let rows = self.nodes[x.idx()].data.len() / d;
                self.norm_backward_rows(*x, *gamma, *beta, g, mean, invstd, rows, d);
            }
            Op::Softmax { x, axis } => {
                if self.needs(*x) {
                    let shape = node.shape.clone();
                    let m = shape[*axis];
                    let inner: usize = shape[*axis + 1..].iter().product();
                    let outer: usize = shape[..*axis].iter().product();
                    let yd: *const Vec<f64> = &node.data;
                    let buf = self.grad_buf(*x);
                    let y = unsafe { &*yd };
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * m * inner + i;
                            let mut dot = 0.0;
                            for j in 0..m {
                                dot += g[base + j * inner] * y[base + j * inner];
                            }
                            for j in 0..m {
                                let k = base + j * inner;
                                buf[k] += y[k] * (g[k] - dot);
                            }
                        }
                    }
                }
            }
            Op::Relu(x) => {
                if self.needs(*x) {
                    let xd: *const Vec<f64> = &self.nodes[x.idx()].data;
                    let buf = self.grad_buf(*x);
                    for (i, gv) in g.iter().enumerate() {
                        if unsafe { &*xd }[i] > 0.0 {
                            buf[i] += gv;
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                if self.needs(*x) {
                    let yd: *const Vec<f64> = &node.data;
                    let buf = self.grad_buf(*x);
                    for (i, gv) in g.iter().enumerate() {
                        let y = unsafe { &*yd }[i];
                        buf[i] += gv * y * (1.0 - y);
                    }
                }
            }
            Op::Gelu(x) => {
                if self.needs(*x) {
                    let xd: *const Vec<f64> = &self.nodes[x.idx()].data;
                    let buf = self.grad_buf(*x);
                    for (i, gv) in g.iter().enumerate() {
                        buf[i] += gv * gelu_grad_scalar(unsafe { &*xd }[i]);
                    }
                }
            }
            Op::AdaptiveAvgPool { x, oh, ow } => {
                if self.needs(*x) {
                    let (_, _, h, w) = as_nchw(&self.nodes[x.idx()].shape).expect("validated");
                    let planes = self.nodes[x.idx()].data.len() / (h * w);
                    let buf = self.grad_buf(*x);
                    for p in 0..planes {
                        let gs = &g[p * oh * ow..(p + 1) * oh * ow];
                        let bs = &mut buf[p * h * w..(p + 1) * h * w];
                        for i in 0..*oh {
                            let (r0, r1) = pool_window(i, h, *oh);
                            for j in 0..*ow {
                                let (c0, c1) = pool_window(j, w, *ow);
                                let share = gs[i * ow + j] / ((r1 - r0) * (c1 - c0)) as f64;
                                for r in r0..r1 {
                                    for cc in c0..c1 {
                                        bs[r * w + cc] += share;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::UpsampleBilinear { x, oh, ow } => {
                if self.needs(*x) {
                    let sl = self.nodes[x.idx()].shape.len();
                    let h = self.nodes[x.idx()].shape[sl - 2];
                    let w = self.nodes[x.idx()].shape[sl - 1];
                    let planes = self.nodes[x.idx()].data.len() / (h * w);
                    let buf = self.grad_buf(*x);
                    for p in 0..planes {
                        let gs = &g[p * oh * ow..(p + 1) * oh * ow];
                        let bs = &mut buf[p * h * w..(p + 1) * h * w];
                        for i in 0..*oh {
                            let (r0, r1, fr) = lerp_coords(i, h, *oh);
                            for j in 0..*ow {
                                let (c0, c1, fc) = lerp_coords(j, w, *ow);
                                let gv = gs[i * ow + j];
                                bs[r0 * w + c0] += gv * (1.0 - fr) * (1.0 - fc);
                                bs[r0 * w + c1] += gv * (1.0 - fr) * fc;
                                bs[r1 * w + c0] += gv * fr * (1.0 - fc);
                                bs[r1 * w + c1] += gv * fr * fc;
                            }
                        }
                    }
                }
            }
            Op::ConcatChannels(a, b) => {
                let (na, ca, ha, wa) = as_nchw(&self.nodes[a.idx()].shape).expect("validated");
                let cb = as_nchw(&self.nodes[b.idx()].shape).expect("validated").1;
                let plane = ha * wa;
                let (block_a, block_b) = (ca * plane, cb * plane);
                if self.needs(*a) {
                    let buf = self.grad_buf(*a);
                    for i in 0..na {
                        let src = &g[i * (block_a + block_b)..][..block_a];
                        for (bv, gv) in buf[i * block_a..(i + 1) * block_a].iter_mut().zip(src) {
                            *bv += gv;
                        }
                    }
                }
                if self.needs(*b) {
                    let buf = self.grad_buf(*b);
                    for i in 0..na {
                        let src = &g[i * (block_a + block_b) + block_a..][..block_b];
                        for (bv, gv) in buf[i * block_b..(i + 1) * block_b].iter_mut().zip(src) {
                            *bv += gv;
                        }
                    }
                }
            }
            Op::ConcatTokens(a, b) => {
                let (n, k1, d) = {
                    let s = &self.nodes[a.idx()].shape;
                    (s[0], s[1], s[2])
                };
                let k2 = self.nodes[b.idx()].shape[1];
                if self.needs(*a) {
                    let buf = self.grad_buf(*a);
                    for i in 0..n {
                        let src = &g[i * (k1 + k2) * d..][..k1 * d];
                        for (bv, gv) in buf[i * k1 * d..(i + 1) * k1 * d].iter_mut().zip(src) {
                            *bv += gv;
                        }
                    }
                }
                if self.needs(*b) {
                    let buf = self.grad_buf(*b);
                    for i in 0..n {
                        let src = &g[(i * (k1 + k2) + k1) * d..][..k2 * d];
                        for (bv, gv) in buf[i * k2 * d..(i + 1) * k2 * d].iter_mut().zip(src) {
                            *bv += gv;
                        }
                    }
                }
            }
            Op::SliceToken { x, index } => {
                if self.needs(*x) {
                    let s = &self.nodes[x.idx()].shape;
                    let (n, k, d) = (s[0], s[1], s[2]);
                    let _ = n;
                    let buf = self.grad_buf(*x);
                    for (i, row) in g.chunks(d).enumerate() {
                        for (bv, gv) in buf[(i * k + index) * d..][..d].iter_mut().zip(row) {
                            *bv += gv;
                        }
                    }
                }
            }
            Op::NchwToTokens(x) => {
                if self.needs(*x) {
                    let s = &self.nodes[x.idx()].shape;
                    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
                    let plane = h * w;
                    let buf = self.grad_buf(*x);
                    for b in 0..n {
                        for ch in 0..c {
                            for p in 0..plane {
                                buf[(b * c + ch) * plane + p] += g[(b * plane + p) * c + ch];
                            }
                        }
                    }
                }
            }
            Op::TokensToNchw { x, h, w } => {
                if self.needs(*x) {
                    let s = &self.nodes[x.idx()].shape;
                    let (n, c) = (s[0], s[2]);
                    let plane = h * w;
                    let buf = self.grad_buf(*x);
                    for b in 0..n {
                        for ch in 0..c {
                            for p in 0..plane {
                                buf[(b * plane + p) * c + ch] += g[(b * c + ch) * plane + p];
                            }
                        }
                    }
                }
            }
            Op::BroadcastToken { x, n } => {
                if self.needs(*x) {
                    let d = self.nodes[x.idx()].data.len();
                    let buf = self.grad_buf(*x);
                    for b in 0..*n {
                        for (bv, gv) in buf.iter_mut().zip(&g[b * d..(b + 1) * d]) {
                            *bv += gv;
                        }
                    }
                }
            }
            Op::Amplitude { x, unit_re, unit_im } => {
                if self.needs(*x) {
                    let (n, c, h, w) = as_nchw(&self.nodes[x.idx()].shape).expect("validated");
                    let plane = h * w;
                    let buf = self.grad_buf(*x);
                    let mut re = vec![0.0; plane];
                    let mut im = vec![0.0; plane];
                    for p in 0..n * c {
                        for i in 0..plane {
                            let gv = g[p * plane + i];
                            re[i] = gv * unit_re[p * plane + i];
                            im[i] = gv * unit_im[p * plane + i];
                        }
                        // unscaled inverse transform: dx = Re(IDFT_u(g * e^{i phi}))
                        fft::fft2_inplace(h, w, &mut re, &mut im, true);
                        for i in 0..plane {
                            buf[p * plane + i] += re[i];
                        }
                    }
                }
            }
            Op::FromFrequency { amp, cos_phase, sin_phase } => {
                if self.needs(*amp) {
                    let (n, c, h, w) = as_nchw(&self.nodes[amp.idx()].shape).expect("validated");
                    let plane = h * w;
                    let scale = 1.0 / plane as f64;
                    let buf = self.grad_buf(*amp);
                    let mut re = vec![0.0; plane];
                    let mut im = vec![0.0; plane];
                    for p in 0..n * c {
                        re.copy_from_slice(&g[p * plane..(p + 1) * plane]);
                        im.fill(0.0);
                        fft::fft2_inplace(h, w, &mut re, &mut im, false);
                        // grad_amp = (1/HW) * Re(e^{i phi} * conj(FFT(g)))
                        for i in 0..plane {
                            let k = p * plane + i;
                            buf[k] += scale * (cos_phase[k] * re[i] + sin_phase[k] * im[i]);
                        }
                    }
                }
            }
            Op::Attention { q, k, v, heads, attn } => {
                let (n, tq, d) = {
                    let s = &self.nodes[q.idx()].shape;
                    (s[0], s[1], s[2])
                };
                let tk = self.nodes[k.idx()].shape[1];
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let qd: *const Vec<f64> = &self.nodes[q.idx()].data;
                let kd: *const Vec<f64> = &self.nodes[k.idx()].data;
                let vd: *const Vec<f64> = &self.nodes[v.idx()].data;
                let (nq, nk, nv) = (self.needs(*q), self.needs(*k), self.needs(*v));
                if !(nq || nk || nv) {
                    return;
                }
                let mut dq = if nq { vec![0.0; n * tq * d] } else { Vec::new() };
                let mut dk = if nk { vec![0.0; n * tk * d] } else { Vec::new() };
                let mut dv = if nv { vec![0.0; n * tk * d] } else { Vec::new() };
                let mut ds = vec![0.0; tq * tk];
                for b in 0..n {
                    for hh in 0..*heads {
                        let a_base = (b * *heads + hh) * tq * tk;
                        let a = &attn[a_base..a_base + tq * tk];
                        // dA = gO V^T; dS = A .* (dA - rowsum(dA .* A))
                        for i in 0..tq {
                            let go = &g[(b * tq + i) * d + hh * dh..][..dh];
                            let mut row_dot = 0.0;
                            for j in 0..tk {
                                let v_row = &unsafe { &*vd }[(b * tk + j) * d + hh * dh..][..dh];
                                let da = go.iter().zip(v_row).map(|(x, y)| x * y).sum::<f64>();
                                ds[i * tk + j] = da;
                                row_dot += da * a[i * tk + j];
                            }
                            for j in 0..tk {
                                ds[i * tk + j] = a[i * tk + j] * (ds[i * tk + j] - row_dot) * scale;
                            }
                            if nv {
                                for j in 0..tk {
                                    let av = a[i * tk + j];
                                    if av == 0.0 {
                                        continue;
                                    }
                                    let dst = &mut dv[(b * tk + j) * d + hh * dh..][..dh];
                                    for (dd, &gg) in dst.iter_mut().zip(go) {
                                        *dd += av * gg;
                                    }
                                }
                            }
                        }
                        if nq {
                            for i in 0..tq {
                                let dst = &mut dq[(b * tq + i) * d + hh * dh..][..dh];
                                for j in 0..tk {
                                    let s = ds[i * tk + j];
                                    if s == 0.0 {
                                        continue;
                                    }
                                    let k_row = &unsafe { &*kd }[(b * tk + j) * d + hh * dh..][..dh];
                                    for (dd, &kk) in dst.iter_mut().zip(k_row) {
                                        *dd += s * kk;
                                    }
                                }
                            }
                        }
                        if nk {
                            for j in 0..tk {
                                let dst = &mut dk[(b * tk + j) * d + hh * dh..][..dh];
                                for i in 0..tq {
                                    let s = ds[i * tk + j];
                                    if s == 0.0 {
                                        continue;
                                    }
                                    let q_row = &unsafe { &*qd }[(b * tq + i) * d + hh * dh..][..dh];
                                    for (dd, &qq) in dst.iter_mut().zip(q_row) {
                                        *dd += s * qq;
                                    }
                                }
                            }
                        }
                    }
                }
                if nq {
                    accumulate(self.grad_buf(*q), &dq, 1.0);
                }
                if nk {
                    accumulate(self.grad_buf(*k), &dk, 1.0);
                }
                if nv {
                    accumulate(self.grad_buf(*v), &dv, 1.0);
                }
            }
            Op::SumAll(x) => {
                if self.needs(*x) {
                    let gv = g[0];
                    for bv in self.grad_buf(*x).iter_mut() {
                        *bv += gv;
                    }
                }
            }
            Op::MeanAll(x) => {
                if self.needs(*x) {
                    let n = self.nodes[x.idx()].data.len();
                    let gv = g[0] / n as f64;
                    for bv in self.grad_buf(*x).iter_mut() {
                        *bv += gv;
                    }
                }
            }
            Op::ChannelDot { feat, weights } => {
                let fs = &self.nodes[feat.idx()].shape;
                let (n, c, h, w) = (fs[0], fs[1], fs[2], fs[3]);
                let plane = h * w;
                if self.needs(*feat) {
                    let wd: *const Vec<f64> = &self.nodes[weights.idx()].data;
                    let buf = self.grad_buf(*feat);
                    for b in 0..n {
                        let gs = &g[b * plane..(b + 1) * plane];
                        for ch in 0..c {
                            let wv = unsafe { &*wd }[b * c + ch];
                            if wv == 0.0 {
                                continue;
                            }
                            let dst = &mut buf[(b * c + ch) * plane..][..plane];
                            for (dd, &gg) in dst.iter_mut().zip(gs) {
                                *dd += wv * gg;
                            }
                        }
                    }
                }
                if self.needs(*weights) {
                    let fd: *const Vec<f64> = &self.nodes[feat.idx()].data;
                    let buf = self.grad_buf(*weights);
                    for b in 0..n {
                        let gs = &g[b * plane..(b + 1) * plane];
                        for ch in 0..c {
                            let fsrc = &unsafe { &*fd }[(b * c + ch) * plane..][..plane];
                            buf[b * c + ch] +=
                                gs.iter().zip(fsrc).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
            }
            Op::DiceLoss { p, g: gt, smooth, inter2, union } => {
                if self.needs(*p) {
                    let _ = smooth;
                    let shape = &self.nodes[p.idx()].shape;
                    let (batch, m) = mask_batch_split(shape);
                    let gd: *const Vec<f64> = &self.nodes[gt.idx()].data;
                    let upstream = g[0] / batch as f64;
                    let buf = self.grad_buf(*p);
                    for b in 0..batch {
                        let (i2, un) = (inter2[b], union[b]);
                        let inv_u2 = 1.0 / (un * un);
                        for i in b * m..(b + 1) * m {
                            let gv = unsafe { &*gd }[i];
                            // d/dp [1 - I/U] = -(2 g U - I) / U^2
                            buf[i] += upstream * (-(2.0 * gv * un - i2) * inv_u2);
                        }
                    }
                }
            }
            Op::FocalLoss { logits, g: gt, gamma, alpha } => {
                if self.needs(*logits) {
                    let zd: *const Vec<f64> = &self.nodes[logits.idx()].data;
                    let gd: *const Vec<f64> = &self.nodes[gt.idx()].data;
                    let n = self.nodes[logits.idx()].data.len();
                    let upstream = g[0] / n as f64;
                    let buf = self.grad_buf(*logits);
                    for i in 0..n {
                        let z = unsafe { &*zd }[i];
                        let gv = unsafe { &*gd }[i];
                        let p = sigmoid_scalar(z);
                        let (pt, at, sgn) = if gv > 0.5 { (p, *alpha, 1.0) } else { (1.0 - p, 1.0 - *alpha, -1.0) };
                        let dpt_dz = sgn * p * (1.0 - p);
                        let lp = detmath::ln(pt.max(LN_CLAMP));
                        let one_mpt = 1.0 - pt;
                        // d/dz [-at (1-pt)^gamma ln pt]
                        let mut dz = 0.0;
                        if *gamma != 0.0 {
                            dz += at * *gamma * detmath::pow(one_mpt, *gamma - 1.0) * lp * dpt_dz;
                        }
                        if pt > LN_CLAMP {
                            dz -= at * detmath::pow(one_mpt, *gamma) / pt * dpt_dz;
                        }
                        buf[i] += upstream * dz;
                    }
                }
            }
            Op::NormConsistency { a, b, eps, batched, raw_norms } => {
                let _ = eps;
                let shape = self.nodes[a.idx()].shape.clone();
                let (batch, m) = if *batched {
                    batch_split(&shape)
                } else {
                    (1, self.nodes[a.idx()].data.len())
                };
                let inv_sqrt_m = 1.0 / (m as f64).sqrt();
                let upstream = g[0] / batch as f64;
                let ad: *const Vec<f64> = &self.nodes[a.idx()].data;
                let bd: *const Vec<f64> = &self.nodes[b.idx()].data;
                let (na, nb) = (self.needs(*a), self.needs(*b));
                if na {
                    let buf = self.grad_buf(*a);
                    for s in 0..batch {
                        let coeff = upstream * inv_sqrt_m / raw_norms[s];
                        for i in s * m..(s + 1) * m {
                            buf[i] += coeff * (unsafe { &*ad }[i] - unsafe { &*bd }[i]);
                        }
                    }
                }
                if nb {
                    let buf = self.grad_buf(*b);
                    for s in 0..batch {
                        let coeff = upstream * inv_sqrt_m / raw_norms[s];
                        for i in s * m..(s + 1) * m {
                            buf[i] -= coeff * (unsafe { &*ad }[i] - unsafe { &*bd }[i]);
                        }
                    }
                }
            }
        }
    }

    /// Shared backward for group normalizations. `gamma_of(group)` maps a
    /// group to its affine index; `index(group, i)` maps a within-group
    /// position to the flat tensor index.
    #[allow(clippy::too_many_arguments)]
    fn norm_backward_groups(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        g: &[f64],
        mean: &[f64],
        invstd: &[f64],
        groups: usize,
        m: usize,
        gamma_of: impl Fn(usize) -> usize,
        index: impl Fn(usize, usize) -> usize,
    ) {
        let xd: *const Vec<f64> = &self.nodes[x.idx()].data;
        let gd: *const Vec<f64> = &self.nodes[gamma.idx()].data;
        let (nx, ng, nb) = (self.needs(x), self.needs(gamma), self.needs(beta));
        let mf = m as f64;
        for grp in 0..groups {
            let (mu, inv) = (mean[grp], invstd[grp]);
            let gidx = gamma_of(grp);
            let gv = unsafe { &*gd }[gidx];
            let mut sum_g = 0.0;
            let mut sum_gx = 0.0;
            for i in 0..m {
                let k = index(grp, i);
                let xh = (unsafe { &*xd }[k] - mu) * inv;
                sum_g += g[k];
                sum_gx += g[k] * xh;
            }
            if nx {
                let buf: *mut Vec<f64> = self.grad_buf(x);
                for i in 0..m {
                    let k = index(grp, i);
                    let xh = (unsafe { &*xd }[k] - mu) * inv;
                    (unsafe { &mut *buf })[k] +=
                        gv * inv / mf * (mf * g[k] - sum_g - xh * sum_gx);
                }
            }
            if ng {
                let buf: *mut Vec<f64> = self.grad_buf(gamma);
                (unsafe { &mut *buf })[gidx] += sum_gx;
            }
            if nb {
                let buf: *mut Vec<f64> = self.grad_buf(beta);
                (unsafe { &mut *buf })[gidx] += sum_g;
            }
        }
    }

    fn norm_backward_rows(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        g: &[f64],
        mean: &[f64],
        invstd: &[f64],
        rows: usize,
        d: usize,
    ) {
        let xd: *const Vec<f64> = &self.nodes[x.idx()].data;
        let gd: *const Vec<f64> = &self.nodes[gamma.idx()].data;
        let (nx, ng, nb) = (self.needs(x), self.needs(gamma), self.needs(beta));
        let df = d as f64;
        for r in 0..rows {
            let (mu, inv) = (mean[r], invstd[r]);
            let base = r * d;
            let mut sum_wg = 0.0; // sum of gamma-weighted upstream
            let mut sum_wgx = 0.0;
            for i in 0..d {
                let xh = (unsafe { &*xd }[base + i] - mu) * inv;
                let wg = g[base + i] * unsafe { &*gd }[i];
                sum_wg += wg;
                sum_wgx += wg * xh;
            }
            if nx {
                let buf: *mut Vec<f64> = self.grad_buf(x);
                for i in 0..d {
                    let xh = (unsafe { &*xd }[base + i] - mu) * inv;
                    let wg = g[base + i] * unsafe { &*gd }[i];
                    (unsafe { &mut *buf })[base + i] +=
                        inv / df * (df * wg - sum_wg - xh * sum_wgx);
                }
            }
            if ng {
                let buf: *mut Vec<f64> = self.grad_buf(gamma);
                for i in 0..d {
                    let xh = (unsafe { &*xd }[base + i] - mu) * inv;
                    (unsafe { &mut *buf })[i] += g[base + i] * xh;
                }
            }
            if nb {
                let buf: *mut Vec<f64> = self.grad_buf(beta);
                for i in 0..d {
                    (unsafe { &mut *buf })[i] += g[base + i];
                }
            }
        }
    }
}

#[inline]
fn accumulate(buf: &mut [f64], g: &[f64], scale: f64) {
    debug_assert_eq!(buf.len(), g.len());
    if scale == 1.0 {
        for (b, &v) in buf.iter_mut().zip(g) {
            *b += v;
        }
    } else {
        for (b, &v) in buf.iter_mut().zip(g) {
            *b += scale * v;
        }
    }
}

/// Split a shape into (batch, per-sample element count); rank-0/1 tensors
/// count as a single sample.
fn batch_split(shape: &[usize]) -> (usize, usize) {
    if shape.len() <= 1 {
        (1, shape.iter().product::<usize>().max(1))
    } else {
        (shape[0], shape[1..].iter().product())
    }
}

/// Mask losses batch only at rank 3 ([N,H,W]); a bare [H,W] pair is one
/// sample.
fn mask_batch_split(shape: &[usize]) -> (usize, usize) {
    if shape.len() >= 3 {
        (shape[0], shape[1..].iter().product())
    } else {
        (1, shape.iter().product())
    }
}

fn pool_window(i: usize, input: usize, output: usize) -> (usize, usize) {
    let lo = i * input / output;
    let hi = ((i + 1) * input).div_ceil(output);
    (lo, hi)
}

/// Bilinear source coordinates for align_corners=false resizing.
fn lerp_coords(o: usize, input: usize, output: usize) -> (usize, usize, f64) {
    let scale = input as f64 / output as f64;
    let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
    let r0 = src.floor() as usize;
    let r1 = (r0 + 1).min(input - 1);
    (r0, r1, src - r0 as f64)
}

#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + detmath::exp(-x))
    } else {
        let e = detmath::exp(x);
        e / (1.0 + e)
    }
}

#[inline]
fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + detmath::tanh(GELU_C * (x + GELU_A * x * x * x)))
}

#[inline]
fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = detmath::tanh(u);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
