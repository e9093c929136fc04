//! Output heads: the two-stage transposed-conv upsamplers (64 -> 48 -> 32
//! channels, 2x spatial each) and the 3-layer MLP that turns the decoded
//! token into a dynamic per-prompt classifier.

use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::tape::{NodeId, Tape};

use super::encoder::EMBED_DIM;
use super::layers::{Binder, LinearParams, NamedParams, NamedParamsMut, TConv2dParams};

pub const MASK_CHANNELS: usize = 32;
pub const HEAD_MID_CHANNELS: usize = 48;

#[derive(Clone, Debug)]
pub struct UpsampleHeadParams {
    pub t1: TConv2dParams,
    pub t2: TConv2dParams,
}

impl UpsampleHeadParams {
    pub fn init(c_in: usize, rng: &mut Rng) -> Self {
        UpsampleHeadParams {
            t1: TConv2dParams::init(c_in, HEAD_MID_CHANNELS, rng),
            t2: TConv2dParams::init(HEAD_MID_CHANNELS, MASK_CHANNELS, rng),
        }
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut NamedParams<'a>) {
        self.t1.collect(&format!("{prefix}/t1"), out);
        self.t2.collect(&format!("{prefix}/t2"), out);
    }

    pub fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut NamedParamsMut<'a>) {
        self.t1.collect_mut(&format!("{prefix}/t1"), out);
        self.t2.collect_mut(&format!("{prefix}/t2"), out);
    }

    pub fn bind(&self, b: &mut Binder) -> UpsampleHeadBound {
        UpsampleHeadBound {
            t1: self.t1.bind(b),
            t2: self.t2.bind(b),
        }
    }
}

#[derive(Clone, Copy)]
pub struct UpsampleHeadBound {
    t1: super::layers::TConv2dBound,
    t2: super::layers::TConv2dBound,
}

impl UpsampleHeadBound {
    /// [N,C,H,W] -> [N,32,4H,4W]: tconv, gelu, tconv.
    pub fn forward(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let up1 = self.t1.forward(tape, x)?;
        let act = tape.gelu(up1);
        self.t2.forward(tape, act)
    }
}

#[derive(Clone, Debug)]
pub struct MaskMlpParams {
    pub l1: LinearParams,
    pub l2: LinearParams,
    pub l3: LinearParams,
}

impl MaskMlpParams {
    pub fn init(rng: &mut Rng) -> Self {
        MaskMlpParams {
            l1: LinearParams::init(EMBED_DIM, EMBED_DIM, rng),
            l2: LinearParams::init(EMBED_DIM, EMBED_DIM, rng),
            l3: LinearParams::init(EMBED_DIM, MASK_CHANNELS, rng),
        }
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut NamedParams<'a>) {
        self.l1.collect(&format!("{prefix}/l1"), out);
        self.l2.collect(&format!("{prefix}/l2"), out);
        self.l3.collect(&format!("{prefix}/l3"), out);
    }

    pub fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut NamedParamsMut<'a>) {
        self.l1.collect_mut(&format!("{prefix}/l1"), out);
        self.l2.collect_mut(&format!("{prefix}/l2"), out);
        self.l3.collect_mut(&format!("{prefix}/l3"), out);
    }

    pub fn bind(&self, b: &mut Binder) -> MaskMlpBound {
        MaskMlpBound {
            l1: self.l1.bind(b),
            l2: self.l2.bind(b),
            l3: self.l3.bind(b),
        }
    }
}

#[derive(Clone, Copy)]
pub struct MaskMlpBound {
    l1: super::layers::LinearBound,
    l2: super::layers::LinearBound,
    l3: super::layers::LinearBound,
}

impl MaskMlpBound {
    /// token [N,64] -> classifier weights [N,32], gelu between layers.
    pub fn forward(&self, tape: &mut Tape, token: NodeId) -> Result<NodeId> {
        let h = self.l1.forward(tape, token)?;
        let h = tape.gelu(h);
        let h = self.l2.forward(tape, h)?;
        let h = tape.gelu(h);
        self.l3.forward(tape, h)
    }
}

/// Dynamic-classifier mask prediction: dot the MLP-produced weights with
/// the mask feature at every position, then bilinearly upsample the low-res
/// logits to the output resolution.
pub fn predict_mask(
    tape: &mut Tape,
    token: NodeId,
    mlp: &MaskMlpBound,
    mask_feature: NodeId,
    out_size: usize,
) -> Result<NodeId> {
    let weights = mlp.forward(tape, token)?;
    let low = tape.channel_dot(mask_feature, weights)?;
    tape.upsample_bilinear(low, out_size, out_size)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn head_shapes_and_frozen_repeatability() {
        let mut rng = Rng::new(100);
        let params = UpsampleHeadParams::init(EMBED_DIM, &mut rng);
        let x = Tensor::uniform(&[1, 64, 16, 16], -1.0, 1.0, &mut rng);
        let run = || {
            let mut tape = Tape::new();
            let mut binder = Binder::new(&mut tape, false);
            let bound = params.bind(&mut binder);
            let xi = tape.constant(&x);
            let out = bound.forward(&mut tape, xi).unwrap();
            (tape.shape(out).to_vec(), tape.data(out).to_vec())
        };
        let (shape, d1) = run();
        assert_eq!(shape, vec![1, 32, 64, 64]);
        let (_, d2) = run();
        assert!(d1.iter().zip(&d2).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn head_impulse_matches_scatter_oracle() {
        // Both tconv biases zero, gelu between: an impulse in one input
        // channel produces t2(gelu(t1_impulse_response)).
        let mut rng = Rng::new(101);
        let params = UpsampleHeadParams::init(2, &mut rng);
        let mut x = Tensor::zeros(&[1, 2, 2, 2]);
        x.data_mut()[0] = 1.0; // channel 0, position (0,0)
        let mut tape = Tape::new();
        let mut binder = Binder::new(&mut tape, false);
        let bound = params.bind(&mut binder);
        let xi = tape.constant(&x);
        let out = bound.forward(&mut tape, xi).unwrap();
        let got = tape.data(out).to_vec();

        // Direct scatter computation of the same two-stage pipeline.
        let gelu = |v: f64| 0.5 * v * (1.0 + crate::detmath::tanh(0.7978845608028654 * (v + 0.044715 * v * v * v)));
        let (h1, w1) = (4usize, 4usize);
        let mut mid = vec![0.0; HEAD_MID_CHANNELS * h1 * w1];
        for co in 0..HEAD_MID_CHANNELS {
            for dh in 0..2 {
                for dw in 0..2 {
                    // ci = 0, position (0,0) scatters into (dh, dw)
                    mid[(co * h1 + dh) * w1 + dw] +=
                        params.t1.w.data()[(0 * HEAD_MID_CHANNELS + co) * 4 + dh * 2 + dw];
                }
            }
        }
        for (i, v) in mid.iter_mut().enumerate() {
            *v = gelu(*v + params.t1.b.data()[i / (h1 * w1)]);
        }
        let (h2, w2) = (8usize, 8usize);
        let mut want = vec![0.0; MASK_CHANNELS * h2 * w2];
        for ci in 0..HEAD_MID_CHANNELS {
            for co in 0..MASK_CHANNELS {
                for y in 0..h1 {
                    for x2 in 0..w1 {
                        let v = mid[(ci * h1 + y) * w1 + x2];
                        if v == 0.0 {
                            continue;
                        }
                        for dh in 0..2 {
                            for dw in 0..2 {
                                want[(co * h2 + 2 * y + dh) * w2 + 2 * x2 + dw] +=
                                    v * params.t2.w.data()[(ci * MASK_CHANNELS + co) * 4 + dh * 2 + dw];
                            }
                        }
                    }
                }
            }
        }
        for (i, v) in want.iter_mut().enumerate() {
            *v += params.t2.b.data()[i / (h2 * w2)];
        }
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn predict_mask_contracts() {
        let mut rng = Rng::new(102);
        let mlp_params = MaskMlpParams::init(&mut rng);
        let feature = Tensor::uniform(&[1, 32, 64, 64], -1.0, 1.0, &mut rng);
        let token = Tensor::uniform(&[1, 64], -1.0, 1.0, &mut rng);

        // Zero token with zero biases -> zero logits.
        let mut zeroed = mlp_params.clone();
        for lin in [&mut zeroed.l1, &mut zeroed.l2, &mut zeroed.l3] {
            lin.b.data_mut().fill(0.0);
        }
        let mut tape = Tape::new();
        let mut binder = Binder::new(&mut tape, false);
        let bound = zeroed.bind(&mut binder);
        let zero_tok = tape.constant(&Tensor::zeros(&[1, 64]));
        let feat = tape.constant(&feature);
        let logits = predict_mask(&mut tape, zero_tok, &bound, feat, 128).unwrap();
        assert_eq!(tape.shape(logits), &[1, 128, 128]);
        assert!(tape.data(logits).iter().all(|&v| v == 0.0));

        // Doubling the mask feature doubles the logits.
        let mut tape = Tape::new();
        let mut binder = Binder::new(&mut tape, false);
        let bound = mlp_params.bind(&mut binder);
        let tok = tape.constant(&token);
        let feat1 = tape.constant(&feature);
        let l1 = predict_mask(&mut tape, tok, &bound, feat1, 128).unwrap();
        let feat2 = tape.scale(feat1, 2.0);
        let l2 = predict_mask(&mut tape, tok, &bound, feat2, 128).unwrap();
        let d1 = tape.data(l1).to_vec();
        let d2 = tape.data(l2).to_vec();
        for (a, b) in d1.iter().zip(&d2) {
            assert!((2.0 * a - b).abs() < 1e-9);
        }
    }
}
