//! Parameter-holding building blocks and their tape-bound forward passes.
//!
//! Every params struct lists its tensors through `collect`/`collect_mut`
//! (stable order, prefixed names) and binds leaves onto a tape in that same
//! order through a [`Binder`]. The optimizer and the serializer both walk
//! the `collect` order, so the three must stay aligned field by field.

use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Binds parameter tensors as tape leaves, recording ids in collect order.
pub struct Binder<'t> {
    pub tape: &'t mut Tape,
    pub trainable: bool,
    pub ids: Vec<NodeId>,
}

impl<'t> Binder<'t> {
    pub fn new(tape: &'t mut Tape, trainable: bool) -> Self {
        Binder {
            tape,
            trainable,
            ids: Vec::new(),
        }
    }

    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        let id = if self.trainable {
            self.tape.variable(t.shape().to_vec(), t.data().to_vec())
        } else {
            self.tape.constant_from(t.shape().to_vec(), t.data().to_vec())
        };
        self.ids.push(id);
        id
    }
}

pub type NamedParams<'a> = Vec<(String, &'a Tensor)>;
pub type NamedParamsMut<'a> = Vec<(String, &'a mut Tensor)>;

pub fn push_named<'a>(out: &mut NamedParams<'a>, prefix: &str, name: &str, t: &'a Tensor) {
    out.push((format!("{prefix}/{name}"), t));
}

pub fn push_named_mut<'a>(out: &mut NamedParamsMut<'a>, prefix: &str, name: &str, t: &'a mut Tensor) {
    out.push((format!("{prefix}/{name}"), t));
}

// ── Linear ──────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct LinearParams {
    pub w: Tensor, // [in, out]
    pub b: Tensor, // [out]
}

impl LinearParams {
    pub fn init(d_in: usize, d_out: usize, rng: &mut Rng) -> Self {
        LinearParams {
            w: Tensor::fan_in_uniform(&[d_in, d_out], d_in, rng),
            b: Tensor::zeros(&[d_out]),
        }
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut NamedParams<'a>) {
        push_named(out, prefix, "w", &self.w);
        push_named(out, prefix, "b", &self.b);
    }

    pub fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut NamedParamsMut<'a>) {
        push_named_mut(out, prefix, "w", &mut self.w);
        push_named_mut(out, prefix, "b", &mut self.b);
    }

    pub fn bind(&self, b: &mut Binder) -> LinearBound {
        LinearBound {
            w: b.leaf(&self.w),
            b: b.leaf(&self.b),
            d_in: self.w.shape()[0],
            d_out: self.w.shape()[1],
        }
    }
}

#[derive(Clone, Copy)]
pub struct LinearBound {
    pub w: NodeId,
    pub b: NodeId,
    d_in: usize,
    d_out: usize,
}

impl LinearBound {
    /// x: [..., d_in] -> [..., d_out].
    pub fn forward(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let shape = tape.shape(x).to_vec();
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let flat = tape.reshape(x, vec![rows, self.d_in])?;
        let prod = tape.matmul(flat, self.w)?;
        let biased = tape.add_last_dim_bias(prod, self.b)?;
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.d_out;
        tape.reshape(biased, out_shape)
    }
}

// ── Conv2d ──────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct Conv2dParams {
    pub w: Tensor, // [co, ci, k, k]
    pub b: Tensor, // [co]
    pub pad: usize,
    pub stride: usize,
}

impl Conv2dParams {
    pub fn init(ci: usize, co: usize, k: usize, pad: usize, stride: usize, rng: &mut Rng) -> Self {
        Conv2dParams {
            w: Tensor::fan_in_uniform(&[co, ci, k, k], ci * k * k, rng),
            b: Tensor::zeros(&[co]),
            pad,
            stride,
        }
    }

    /// 1x1 convolution initialized to the exact per-channel identity.
    pub fn identity_1x1(c: usize) -> Self {
        let mut w = Tensor::zeros(&[c, c, 1, 1]);
        for i in 0..c {
            w.data_mut()[i * c + i] = 1.0;
        }
        Conv2dParams {
            w,
            b: Tensor::zeros(&[c]),
            pad: 0,
            stride: 1,
        }
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut NamedParams<'a>) {
        push_named(out, prefix, "w", &self.w);
        push_named(out, prefix, "b", &self.b);
    }

    pub fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut NamedParamsMut<'a>) {
        push_named_mut(out, prefix, "w", &mut self.w);
        push_named_mut(out, prefix, "b", &mut self.b);
    }

    pub fn bind(&self, b: &mut Binder) -> Conv2dBound {
        Conv2dBound {
            w: b.leaf(&self.w),
            b: b.leaf(&self.b),
            pad: self.pad,
            stride: self.stride,
        }
    }
}

#[derive(Clone, Copy)]
pub struct Conv2dBound {
    pub w: NodeId,
    pub b: NodeId,
    pad: usize,
    stride: usize,
}

impl Conv2dBound {
    pub fn forward(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let conv = tape.conv2d(x, self.w, self.pad, self.stride)?;
        tape.add_chan_bias(conv, self.b)
    }
}

// ── Transposed conv (2x2, stride 2) ─────────────────────────────────

#[derive(Clone, Debug)]
pub struct TConv2dParams {
    pub w: Tensor, // [ci, co, 2, 2]
    pub b: Tensor, // [co]
}

impl TConv2dParams {
    pub fn init(ci: usize, co: usize, rng: &mut Rng) -> Self {
        TConv2dParams {
            w: Tensor::fan_in_uniform(&[ci, co, 2, 2], ci, rng),
            b: Tensor::zeros(&[co]),
        }
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut NamedParams<'a>) {
        push_named(out, prefix, "w", &self.w);
        push_named(out, prefix, "b", &self.b);
    }

    pub fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut NamedParamsMut<'a>) {
        push_named_mut(out, prefix, "w", &mut self.w);
        push_named_mut(out, prefix, "b", &mut self.b);
    }

    pub fn bind(&self, b: &mut Binder) -> TConv2dBound {
        TConv2dBound {
            w: b.leaf(&self.w),
            b: b.leaf(&self.b),
        }
    }
}

#[derive(Clone, Copy)]
pub struct TConv2dBound {
    pub w: NodeId,
    pub b: NodeId,
}

impl TConv2dBound {
    pub fn forward(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let up = tape.tconv2d(x, self.w)?;
        tape.add_chan_bias(up, self.b)
    }
}

// ── Layer norm ──────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub g: Tensor,
    pub b: Tensor,
}

pub const NORM_AFFINE_EPS: f64 = 1e-5;

impl LayerNormParams {
    pub fn unit(d: usize) -> Self {
        LayerNormParams {
            g: Tensor::full(&[d], 1.0),
            b: Tensor::zeros(&[d]),
        }
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut NamedParams<'a>) {
        push_named(out, prefix, "g", &self.g);
        push_named(out, prefix, "b", &self.b);
    }

    pub fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut NamedParamsMut<'a>) {
        push_named_mut(out, prefix, "g", &mut self.g);
        push_named_mut(out, prefix, "b", &mut self.b);
    }

    pub fn bind(&self, b: &mut Binder) -> LayerNormBound {
        LayerNormBound {
            g: b.leaf(&self.g),
            b: b.leaf(&self.b),
        }
    }
}

#[derive(Clone, Copy)]
pub struct LayerNormBound {
    pub g: NodeId,
    pub b: NodeId,
}

impl LayerNormBound {
    pub fn forward(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        tape.layer_norm(x, self.g, self.b, NORM_AFFINE_EPS)
    }
}

// ── Multi-head attention with projections ───────────────────────────

#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub wq: LinearParams,
    pub wk: LinearParams,
    pub wv: LinearParams,
    pub wo: LinearParams,
    pub heads: usize,
}

impl AttentionParams {
    pub fn init(dim: usize, heads: usize, rng: &mut Rng) -> Self {
        AttentionParams {
            wq: LinearParams::init(dim, dim, rng),
            wk: LinearParams::init(dim, dim, rng),
            wv: LinearParams::init(dim, dim, rng),
            wo: LinearParams::init(dim, dim, rng),
            heads,
        }
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut NamedParams<'a>) {
        self.wq.collect(&format!("{prefix}/q"), out);
        self.wk.collect(&format!("{prefix}/k"), out);
        self.wv.collect(&format!("{prefix}/v"), out);
        self.wo.collect(&format!("{prefix}/o"), out);
    }

    pub fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut NamedParamsMut<'a>) {
        self.wq.collect_mut(&format!("{prefix}/q"), out);
        self.wk.collect_mut(&format!("{prefix}/k"), out);
        self.wv.collect_mut(&format!("{prefix}/v"), out);
        self.wo.collect_mut(&format!("{prefix}/o"), out);
    }

    pub fn bind(&self, b: &mut Binder) -> AttentionBound {
        AttentionBound {
            wq: self.wq.bind(b),
            wk: self.wk.bind(b),
            wv: self.wv.bind(b),
            wo: self.wo.bind(b),
            heads: self.heads,
        }
    }
}

#[derive(Clone, Copy)]
pub struct AttentionBound {
    wq: LinearBound,
    wk: LinearBound,
    wv: LinearBound,
    wo: LinearBound,
    heads: usize,
}

impl AttentionBound {
    /// q_in: [N,Tq,D], kv_in: [N,Tk,D] -> [N,Tq,D].
    pub fn forward(&self, tape: &mut Tape, q_in: NodeId, kv_in: NodeId) -> Result<NodeId> {
        let q = self.wq.forward(tape, q_in)?;
        let k = self.wk.forward(tape, kv_in)?;
        let v = self.wv.forward(tape, kv_in)?;
        let attended = tape.attention(q, k, v, self.heads)?;
        self.wo.forward(tape, attended)
    }
}
