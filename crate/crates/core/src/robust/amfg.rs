//! Anti-degradation mask feature generation: dual IN/BN branches fused by
//! a selector, channel attention over the concatenated features, Fourier
//! amplitude suppression, and two transposed-conv upsamplings.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::tape::{NodeId, Tape};
use crate::tensor::Tensor;

use super::super::model::heads::{HEAD_MID_CHANNELS, MASK_CHANNELS};
use super::super::model::layers::{
    Binder, Conv2dParams, LinearParams, NamedParams, NamedParamsMut, TConv2dParams,
};

pub const NORM_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
/// Open-gate bias on the final SE projection (sigmoid(2) ~ 0.88).
pub const SE_OPEN_BIAS: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
pub struct AmfgParams {
    pub channels: usize,
    pub in_gamma: Tensor,
    pub in_beta: Tensor,
    pub bn_gamma: Tensor,
    pub bn_beta: Tensor,
    pub bn_running_mean: Tensor,
    pub bn_running_var: Tensor,
    /// Number of train-mode batches folded into the running stats.
    pub bn_batches: u64,
    pub conv_in_branch: Conv2dParams,
    pub conv_bn_branch: Conv2dParams,
    pub sel_reduce: LinearParams, // C -> C/4
    pub sel_head_in: LinearParams, // C/4 -> C
    pub sel_head_bn: LinearParams, // C/4 -> C
    pub se_reduce: LinearParams,  // 2C -> C/8
    pub se_expand: LinearParams,  // C/8 -> 2C
    pub post_concat: Conv2dParams, // 1x1, 2C -> C
    pub amp_conv: Conv2dParams,   // 1x1, C -> C, identity at init
    pub up1: TConv2dParams,       // C -> 48
    pub up2: TConv2dParams,       // 48 -> 32
}

impl AmfgParams {
    /// Fresh module. Normalization affines start at identity, the amplitude
    /// conv at the exact identity, and the SE gate biased open.
    pub fn init(channels: usize, rng: &mut Rng) -> Result<Self> {
        if channels % 8 != 0 {
            return Err(Error::contract(format!(
                "amfg channels {channels} must be divisible by 8"
            )));
        }
        let c = channels;
        let mut se_expand = LinearParams::init(c / 8, 2 * c, rng);
        se_expand.b.data_mut().fill(SE_OPEN_BIAS);
        Ok(AmfgParams {
            channels: c,
            in_gamma: Tensor::full(&[c], 1.0),
            in_beta: Tensor::zeros(&[c]),
            bn_gamma: Tensor::full(&[c], 1.0),
            bn_beta: Tensor::zeros(&[c]),
            bn_running_mean: Tensor::zeros(&[c]),
            bn_running_var: Tensor::full(&[c], 1.0),
            bn_batches: 0,
            conv_in_branch: Conv2dParams::init(c, c, 3, 1, 1, rng),
            conv_bn_branch: Conv2dParams::init(c, c, 3, 1, 1, rng),
            sel_reduce: LinearParams::init(c, c / 4, rng),
            sel_head_in: LinearParams::init(c / 4, c, rng),
            sel_head_bn: LinearParams::init(c / 4, c, rng),
            se_reduce: LinearParams::init(2 * c, c / 8, rng),
            se_expand,
            post_concat: Conv2dParams::init(2 * c, c, 1, 0, 1, rng),
            amp_conv: Conv2dParams::identity_1x1(c),
            up1: TConv2dParams::init(c, HEAD_MID_CHANNELS, rng),
            up2: TConv2dParams::init(HEAD_MID_CHANNELS, MASK_CHANNELS, rng),
        })
    }

    /// Trainable tensors, in bind order. Running statistics are state, not
    /// parameters; they serialize separately.
    pub fn collect<'a>(&'a self, prefix: &str, out: &mut NamedParams<'a>) {
        out.push((format!("{prefix}/in_gamma"), &self.in_gamma));
        out.push((format!("{prefix}/in_beta"), &self.in_beta));
        out.push((format!("{prefix}/bn_gamma"), &self.bn_gamma));
        out.push((format!("{prefix}/bn_beta"), &self.bn_beta));
        self.conv_in_branch.collect(&format!("{prefix}/conv_in"), out);
        self.conv_bn_branch.collect(&format!("{prefix}/conv_bn"), out);
        self.sel_reduce.collect(&format!("{prefix}/sel_reduce"), out);
        self.sel_head_in.collect(&format!("{prefix}/sel_head_in"), out);
        self.sel_head_bn.collect(&format!("{prefix}/sel_head_bn"), out);
        self.se_reduce.collect(&format!("{prefix}/se_reduce"), out);
        self.se_expand.collect(&format!("{prefix}/se_expand"), out);
        self.post_concat.collect(&format!("{prefix}/post_concat"), out);
        self.amp_conv.collect(&format!("{prefix}/amp_conv"), out);
        self.up1.collect(&format!("{prefix}/up1"), out);
        self.up2.collect(&format!("{prefix}/up2"), out);
    }

    pub fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut NamedParamsMut<'a>) {
        out.push((format!("{prefix}/in_gamma"), &mut self.in_gamma));
        out.push((format!("{prefix}/in_beta"), &mut self.in_beta));
        out.push((format!("{prefix}/bn_gamma"), &mut self.bn_gamma));
        out.push((format!("{prefix}/bn_beta"), &mut self.bn_beta));
        self.conv_in_branch.collect_mut(&format!("{prefix}/conv_in"), out);
        self.conv_bn_branch.collect_mut(&format!("{prefix}/conv_bn"), out);
        self.sel_reduce.collect_mut(&format!("{prefix}/sel_reduce"), out);
        self.sel_head_in.collect_mut(&format!("{prefix}/sel_head_in"), out);
        self.sel_head_bn.collect_mut(&format!("{prefix}/sel_head_bn"), out);
        self.se_reduce.collect_mut(&format!("{prefix}/se_reduce"), out);
        self.se_expand.collect_mut(&format!("{prefix}/se_expand"), out);
        self.post_concat.collect_mut(&format!("{prefix}/post_concat"), out);
        self.amp_conv.collect_mut(&format!("{prefix}/amp_conv"), out);
        self.up1.collect_mut(&format!("{prefix}/up1"), out);
        self.up2.collect_mut(&format!("{prefix}/up2"), out);
    }

    /// Non-parameter state that still belongs in checkpoints.
    pub fn collect_state<'a>(&'a self, prefix: &str, out: &mut NamedParams<'a>) {
        out.push((format!("{prefix}/bn_running_mean"), &self.bn_running_mean));
        out.push((format!("{prefix}/bn_running_var"), &self.bn_running_var));
    }

    /// Parameters followed by running state, in one mutable borrow.
    pub fn collect_all_mut<'a>(&'a mut self, prefix: &str, out: &mut NamedParamsMut<'a>) {
        out.push((format!("{prefix}/in_gamma"), &mut self.in_gamma));
        out.push((format!("{prefix}/in_beta"), &mut self.in_beta));
        out.push((format!("{prefix}/bn_gamma"), &mut self.bn_gamma));
        out.push((format!("{prefix}/bn_beta"), &mut self.bn_beta));
        self.conv_in_branch.collect_mut(&format!("{prefix}/conv_in"), out);
        self.conv_bn_branch.collect_mut(&format!("{prefix}/conv_bn"), out);
        self.sel_reduce.collect_mut(&format!("{prefix}/sel_reduce"), out);
        self.sel_head_in.collect_mut(&format!("{prefix}/sel_head_in"), out);
        self.sel_head_bn.collect_mut(&format!("{prefix}/sel_head_bn"), out);
        self.se_reduce.collect_mut(&format!("{prefix}/se_reduce"), out);
        self.se_expand.collect_mut(&format!("{prefix}/se_expand"), out);
        self.post_concat.collect_mut(&format!("{prefix}/post_concat"), out);
        self.amp_conv.collect_mut(&format!("{prefix}/amp_conv"), out);
        self.up1.collect_mut(&format!("{prefix}/up1"), out);
        self.up2.collect_mut(&format!("{prefix}/up2"), out);
        out.push((format!("{prefix}/bn_running_mean"), &mut self.bn_running_mean));
        out.push((format!("{prefix}/bn_running_var"), &mut self.bn_running_var));
    }

    pub fn bind(&self, b: &mut Binder) -> AmfgBound {
        AmfgBound {
            channels: self.channels,
            in_gamma: b.leaf(&self.in_gamma),
            in_beta: b.leaf(&self.in_beta),
            bn_gamma: b.leaf(&self.bn_gamma),
            bn_beta: b.leaf(&self.bn_beta),
            bn_running_mean: self.bn_running_mean.data().to_vec(),
            bn_running_var: self.bn_running_var.data().to_vec(),
            bn_initialized: self.bn_batches > 0,
            conv_in_branch: self.conv_in_branch.bind(b),
            conv_bn_branch: self.conv_bn_branch.bind(b),
            sel_reduce: self.sel_reduce.bind(b),
            sel_head_in: self.sel_head_in.bind(b),
            sel_head_bn: self.sel_head_bn.bind(b),
            se_reduce: self.se_reduce.bind(b),
            se_expand: self.se_expand.bind(b),
            post_concat: self.post_concat.bind(b),
            amp_conv: self.amp_conv.bind(b),
            up1: self.up1.bind(b),
            up2: self.up2.bind(b),
        }
    }

    /// Fold one train batch's statistics into the running estimates.
    pub fn update_bn(&mut self, mean: &[f64], var: &[f64]) {
        let m = BN_MOMENTUM;
        for (r, &b) in self.bn_running_mean.data_mut().iter_mut().zip(mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, &b) in self.bn_running_var.data_mut().iter_mut().zip(var) {
            *r = (1.0 - m) * *r + m * b;
        }
        self.bn_batches += 1;
    }
}

pub struct AmfgBound {
    channels: usize,
    in_gamma: NodeId,
    in_beta: NodeId,
    bn_gamma: NodeId,
    bn_beta: NodeId,
    bn_running_mean: Vec<f64>,
    bn_running_var: Vec<f64>,
    bn_initialized: bool,
    conv_in_branch: super::super::model::layers::Conv2dBound,
    conv_bn_branch: super::super::model::layers::Conv2dBound,
    sel_reduce: super::super::model::layers::LinearBound,
    sel_head_in: super::super::model::layers::LinearBound,
    sel_head_bn: super::super::model::layers::LinearBound,
    se_reduce: super::super::model::layers::LinearBound,
    se_expand: super::super::model::layers::LinearBound,
    post_concat: super::super::model::layers::Conv2dBound,
    pub amp_conv: super::super::model::layers::Conv2dBound,
    up1: super::super::model::layers::TConv2dBound,
    up2: super::super::model::layers::TConv2dBound,
}

pub struct AmfgOutput {
    /// Refined feature, upsampled 4x: [N,32,4H,4W].
    pub out: NodeId,
    /// Selector attention over the IN branch, [N,C]; the BN map is its
    /// exact complement.
    pub attn_in: NodeId,
    pub attn_bn: NodeId,
    /// Train-mode batch statistics to fold into running estimates.
    pub bn_batch_stats: Option<(Vec<f64>, Vec<f64>)>,
    /// Analysis/synthesis phase nodes of the suppression stage (equal by
    /// construction; exposed for the phase-identity assertion).
    pub phase_nodes: Option<(NodeId, NodeId)>,
}

/// Amplitude-only spectral filtering: the phase of the analysis transform
/// is reused verbatim for synthesis.
pub fn fourier_suppress(
    tape: &mut Tape,
    x: NodeId,
    amp_conv: &super::super::model::layers::Conv2dBound,
) -> Result<(NodeId, NodeId, NodeId)> {
    let (amp, phase) = tape.to_frequency(x)?;
    let filtered = amp_conv.forward(tape, amp)?;
    let guarded = tape.relu(filtered);
    let out = tape.from_frequency(guarded, phase)?;
    Ok((out, phase, phase))
}

/// `fourier_suppress` with the synthesis phase pinned to an externally
/// captured tensor. Because the backward pass treats phase as a detached
/// constant by contract, the analytic gradient is identical to the regular
/// forward's whenever `phase` holds the base-point phase — which makes this
/// the correct closure for finite-difference verification.
pub fn fourier_suppress_frozen_phase(
    tape: &mut Tape,
    x: NodeId,
    amp_conv: &super::super::model::layers::Conv2dBound,
    phase: &Tensor,
) -> Result<NodeId> {
    let (amp, _) = tape.to_frequency(x)?;
    let filtered = amp_conv.forward(tape, amp)?;
    let guarded = tape.relu(filtered);
    let phase_const = tape.constant(phase);
    tape.from_frequency(guarded, phase_const)
}

/// Fourier-stage behavior inside the forward pass.
enum FourierStage<'a> {
    Off,
    On,
    /// Synthesis uses this externally captured phase (FD verification).
    Frozen(&'a Tensor),
}

impl AmfgBound {
    pub fn forward(&self, tape: &mut Tape, x: NodeId, mode: Mode, use_fourier: bool) -> Result<AmfgOutput> {
        let stage = if use_fourier { FourierStage::On } else { FourierStage::Off };
        self.forward_impl(tape, x, mode, stage)
    }

    /// Forward with the suppression phase pinned to a base-point capture;
    /// see [`fourier_suppress_frozen_phase`].
    pub fn forward_frozen_phase(
        &self,
        tape: &mut Tape,
        x: NodeId,
        mode: Mode,
        phase: &Tensor,
    ) -> Result<AmfgOutput> {
        self.forward_impl(tape, x, mode, FourierStage::Frozen(phase))
    }

    fn forward_impl(&self, tape: &mut Tape, x: NodeId, mode: Mode, fourier: FourierStage) -> Result<AmfgOutput> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(Error::dimension(format!(
                "amfg expects [N,{},H,W], got {shape:?}",
                self.channels
            )));
        }
        let n = shape[0];

        // Dual normalization branches -> relu -> 3x3 conv.
        let in_norm = tape.instance_norm(x, self.in_gamma, self.in_beta, NORM_EPS)?;
        let in_act = tape.relu(in_norm);
        let in_branch = self.conv_in_branch.forward(tape, in_act)?;

        let (bn_norm, bn_stats) = match mode {
            Mode::Train => {
                let (id, mean, var) = tape.batch_norm_train(x, self.bn_gamma, self.bn_beta, NORM_EPS)?;
                (id, Some((mean, var)))
            }
            Mode::Eval => {
                if !self.bn_initialized {
                    return Err(Error::UninitializedStats(
                        "amfg batch-norm evaluated before any train step".into(),
                    ));
                }
                let id = tape.batch_norm_eval(
                    x,
                    self.bn_gamma,
                    self.bn_beta,
                    &self.bn_running_mean,
                    &self.bn_running_var,
                    NORM_EPS,
                )?;
                (id, None)
            }
        };
        let bn_act = tape.relu(bn_norm);
        let bn_branch = self.conv_bn_branch.forward(tape, bn_act)?;

        let summed = tape.add(in_branch, bn_branch)?;

        // Selector: pooled summary -> two per-channel maps, softmax over the
        // pair (computed as sigmoid of the difference, which is exact).
        let pooled = tape.adaptive_avg_pool(summed, 1, 1)?;
        let pooled_flat = tape.reshape(pooled, vec![n, self.channels])?;
        let reduced = self.sel_reduce.forward(tape, pooled_flat)?;
        let reduced = tape.relu(reduced);
        let head_in = self.sel_head_in.forward(tape, reduced)?;
        let head_bn = self.sel_head_bn.forward(tape, reduced)?;
        let diff = tape.sub(head_in, head_bn)?;
        let attn_in = tape.sigmoid(diff);
        let attn_bn = tape.affine(attn_in, -1.0, 1.0);

        let weighted_in = tape.mul_chan_gate(in_branch, attn_in)?;
        let weighted_bn = tape.mul_chan_gate(bn_branch, attn_bn)?;
        let recombined = tape.add(weighted_in, weighted_bn)?;

        // Concat with the original input, then squeeze-and-excitation.
        let cat = tape.concat_channels(recombined, x)?;
        let se_pool = tape.adaptive_avg_pool(cat, 1, 1)?;
        let se_flat = tape.reshape(se_pool, vec![n, 2 * self.channels])?;
        let se_mid = self.se_reduce.forward(tape, se_flat)?;
        let se_mid = tape.relu(se_mid);
        let se_out = self.se_expand.forward(tape, se_mid)?;
        let gates = tape.sigmoid(se_out);
        let gated = tape.mul_chan_gate(cat, gates)?;

        let projected = self.post_concat.forward(tape, gated)?;

        let (suppressed, phase_nodes) = match fourier {
            FourierStage::On => {
                let (out, p_analysis, p_synthesis) = fourier_suppress(tape, projected, &self.amp_conv)?;
                (out, Some((p_analysis, p_synthesis)))
            }
            FourierStage::Frozen(phase) => {
                let out = fourier_suppress_frozen_phase(tape, projected, &self.amp_conv, phase)?;
                (out, None)
            }
            FourierStage::Off => (projected, None),
        };

        let up = self.up1.forward(tape, suppressed)?;
        let up = tape.gelu(up);
        let out = self.up2.forward(tape, up)?;

        Ok(AmfgOutput {
            out,
            attn_in,
            attn_bn,
            bn_batch_stats: bn_stats,
            phase_nodes,
        })
    }
}
