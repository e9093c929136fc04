//! Convolutional image encoder: three stride-2 stages (3 -> 32 -> 48 -> 64
//! channels) with gelu; the final stage output gets a fixed 2-D sinusoidal
//! positional encoding. For 128x128 inputs the early feature is (32,64,64)
//! and the final feature (64,16,16).

use crate::detmath;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::tape::{NodeId, Tape};
use crate::tensor::Tensor;

use super::layers::{Binder, Conv2dParams, NamedParams, NamedParamsMut};

pub const IMAGE_SIZE: usize = 128;
pub const EARLY_CHANNELS: usize = 32;
pub const FINAL_CHANNELS: usize = 64;
pub const FINAL_SIZE: usize = IMAGE_SIZE / 8;
pub const EMBED_DIM: usize = 64;

#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub stage1: Conv2dParams,
    pub stage2: Conv2dParams,
    pub stage3: Conv2dParams,
}

impl EncoderParams {
    pub fn init(rng: &mut Rng) -> Self {
        EncoderParams {
            stage1: Conv2dParams::init(3, EARLY_CHANNELS, 3, 1, 2, rng),
            stage2: Conv2dParams::init(EARLY_CHANNELS, 48, 3, 1, 2, rng),
            stage3: Conv2dParams::init(48, FINAL_CHANNELS, 3, 1, 2, rng),
        }
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut NamedParams<'a>) {
        self.stage1.collect(&format!("{prefix}/stage1"), out);
        self.stage2.collect(&format!("{prefix}/stage2"), out);
        self.stage3.collect(&format!("{prefix}/stage3"), out);
    }

    pub fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut NamedParamsMut<'a>) {
        self.stage1.collect_mut(&format!("{prefix}/stage1"), out);
        self.stage2.collect_mut(&format!("{prefix}/stage2"), out);
        self.stage3.collect_mut(&format!("{prefix}/stage3"), out);
    }

    pub fn bind(&self, b: &mut Binder) -> EncoderBound {
        EncoderBound {
            stage1: self.stage1.bind(b),
            stage2: self.stage2.bind(b),
            stage3: self.stage3.bind(b),
        }
    }
}

pub struct EncoderBound {
    stage1: super::layers::Conv2dBound,
    stage2: super::layers::Conv2dBound,
    stage3: super::layers::Conv2dBound,
}

pub struct ImageEmbedding {
    /// Stage-1 output, (N,32,64,64) for 128x128 inputs.
    pub early: NodeId,
    /// Stage-3 output plus positional encoding, (N,64,16,16).
    pub final_: NodeId,
}

/// Fixed sinusoidal grid encoding for the final feature map: half the
/// channels encode the row index, half the column, alternating sin/cos with
/// geometric frequencies.
pub fn image_positional_encoding(c: usize, h: usize, w: usize) -> Tensor {
    let quarter = c / 4;
    let mut pe = Tensor::zeros(&[c, h, w]);
    for y in 0..h {
        for x in 0..w {
            for i in 0..quarter {
                let omega = 1.0 / detmath::pow(10_000.0, i as f64 / quarter as f64);
                let (ys, yc) = (detmath::sin(y as f64 * omega), detmath::cos(y as f64 * omega));
                let (xs, xc) = (detmath::sin(x as f64 * omega), detmath::cos(x as f64 * omega));
                pe.data_mut()[(i * h + y) * w + x] = ys;
                pe.data_mut()[((quarter + i) * h + y) * w + x] = yc;
                pe.data_mut()[((2 * quarter + i) * h + y) * w + x] = xs;
                pe.data_mut()[((3 * quarter + i) * h + y) * w + x] = xc;
            }
        }
    }
    pe
}

impl EncoderBound {
    /// image: [N,3,128,128] in [0,1].
    pub fn forward(&self, tape: &mut Tape, image: NodeId) -> Result<ImageEmbedding> {
        let shape = tape.shape(image).to_vec();
        if shape.len() != 4 || shape[1] != 3 || shape[2] != IMAGE_SIZE || shape[3] != IMAGE_SIZE {
            return Err(Error::dimension(format!(
                "encoder expects [N,3,{IMAGE_SIZE},{IMAGE_SIZE}], got {shape:?}"
            )));
        }
        let s1 = self.stage1.forward(tape, image)?;
        let early = tape.gelu(s1);
        let s2 = self.stage2.forward(tape, early)?;
        let a2 = tape.gelu(s2);
        let s3 = self.stage3.forward(tape, a2)?;
        let a3 = tape.gelu(s3);
        let pe = image_positional_encoding(FINAL_CHANNELS, FINAL_SIZE, FINAL_SIZE);
        let pe_node = tape.constant(&pe);
        let final_ = tape.add_batch_bias(a3, pe_node)?;
        Ok(ImageEmbedding { early, final_ })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_and_determinism() {
        let mut rng = Rng::new(80);
        let params = EncoderParams::init(&mut rng);
        let img = Tensor::uniform(&[2, 3, 128, 128], 0.0, 1.0, &mut rng);
        let run = || {
            let mut tape = Tape::new();
            let mut binder = Binder::new(&mut tape, false);
            let bound = params.bind(&mut binder);
            let img_id = tape.constant(&img);
            let emb = bound.forward(&mut tape, img_id).unwrap();
            (
                tape.shape(emb.early).to_vec(),
                tape.shape(emb.final_).to_vec(),
                tape.data(emb.final_).to_vec(),
            )
        };
        let (early_shape, final_shape, final_data) = run();
        assert_eq!(early_shape, vec![2, 32, 64, 64]);
        assert_eq!(final_shape, vec![2, 64, 16, 16]);
        let (_, _, again) = run();
        assert!(final_data.iter().zip(&again).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn zero_image_early_features_equal_forwarded_biases() {
        // With a zero input, stage-1 output is gelu(bias) per channel.
        let mut rng = Rng::new(81);
        let mut params = EncoderParams::init(&mut rng);
        for (i, v) in params.stage1.b.data_mut().iter_mut().enumerate() {
            *v = -0.5 + i as f64 * 0.04;
        }
        let img = Tensor::zeros(&[1, 3, 128, 128]);
        let mut tape = Tape::new();
        let mut binder = Binder::new(&mut tape, false);
        let bound = params.bind(&mut binder);
        let img_id = tape.constant(&img);
        let emb = bound.forward(&mut tape, img_id).unwrap();
        let data = tape.data(emb.early);
        let gelu = |x: f64| 0.5 * x * (1.0 + crate::detmath::tanh(0.7978845608028654 * (x + 0.044715 * x * x * x)));
        for c in 0..32 {
            let want = gelu(params.stage1.b.data()[c]);
            for p in 0..64 * 64 {
                let got = data[c * 64 * 64 + p];
                assert!((got - want).abs() < 1e-12, "c={c} p={p}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn rejects_wrong_extent() {
        let mut rng = Rng::new(82);
        let params = EncoderParams::init(&mut rng);
        let img = Tensor::zeros(&[1, 3, 64, 64]);
        let mut tape = Tape::new();
        let mut binder = Binder::new(&mut tape, false);
        let bound = params.bind(&mut binder);
        let img_id = tape.constant(&img);
        assert!(bound.forward(&mut tape, img_id).is_err());
    }
}
