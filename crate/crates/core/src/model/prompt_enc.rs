//! Sparse prompt encoder: sinusoidal encoding of normalized coordinates
//! plus learned type embeddings (one for foreground points, two for box
//! corners).

use crate::dataset::Prompt;
use crate::detmath;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::tape::{NodeId, Tape};
use crate::tensor::Tensor;

use super::encoder::EMBED_DIM;
use super::layers::{Binder, NamedParams, NamedParamsMut};

#[derive(Clone, Debug)]
pub struct PromptEncoderParams {
    /// Learned embedding added to every foreground point token.
    pub point_embed: Tensor, // [64]
    /// Learned embeddings for the two box-corner tokens.
    pub corner_embed: Tensor, // [2, 64]
}

impl PromptEncoderParams {
    pub fn init(rng: &mut Rng) -> Self {
        PromptEncoderParams {
            point_embed: Tensor::fan_in_uniform(&[EMBED_DIM], EMBED_DIM, rng),
            corner_embed: Tensor::fan_in_uniform(&[2, EMBED_DIM], EMBED_DIM, rng),
        }
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut NamedParams<'a>) {
        out.push((format!("{prefix}/point_embed"), &self.point_embed));
        out.push((format!("{prefix}/corner_embed"), &self.corner_embed));
    }

    pub fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut NamedParamsMut<'a>) {
        out.push((format!("{prefix}/point_embed"), &mut self.point_embed));
        out.push((format!("{prefix}/corner_embed"), &mut self.corner_embed));
    }

    pub fn bind(&self, b: &mut Binder) -> PromptEncoderBound {
        PromptEncoderBound {
            point_embed: b.leaf(&self.point_embed),
            corner_embed: b.leaf(&self.corner_embed),
        }
    }
}

pub struct PromptEncoderBound {
    point_embed: NodeId,
    corner_embed: NodeId,
}

/// 64-dim sinusoidal encoding of a normalized coordinate pair: sixteen
/// sin/cos harmonics per axis at integer frequencies.
pub fn coordinate_encoding(u: f64, v: f64) -> [f64; EMBED_DIM] {
    let mut out = [0.0; EMBED_DIM];
    let tau = 2.0 * std::f64::consts::PI;
    for i in 0..16 {
        let f = tau * (i + 1) as f64;
        out[i] = detmath::sin(f * u);
        out[16 + i] = detmath::cos(f * u);
        out[32 + i] = detmath::sin(f * v);
        out[48 + i] = detmath::cos(f * v);
    }
    out
}

impl PromptEncoderBound {
    /// Encode a batch of same-kind, same-count prompts into [N,P,64].
    pub fn forward(
        &self,
        tape: &mut Tape,
        prompts: &[Prompt],
        img_h: usize,
        img_w: usize,
    ) -> Result<NodeId> {
        if prompts.is_empty() {
            return Err(Error::contract("prompt batch is empty"));
        }
        let count = prompts[0].token_count();
        let is_box = matches!(prompts[0], Prompt::Box { .. });
        for p in prompts {
            if p.token_count() != count || matches!(p, Prompt::Box { .. }) != is_box {
                return Err(Error::contract(
                    "prompt batch must share one prompt kind and token count",
                ));
            }
        }
        let n = prompts.len();
        let mut data = Vec::with_capacity(n * count * EMBED_DIM);
        for p in prompts {
            match p {
                Prompt::Points(pts) => {
                    for &(x, y) in pts {
                        let u = (x as f64 + 0.5) / img_w as f64;
                        let v = (y as f64 + 0.5) / img_h as f64;
                        data.extend_from_slice(&coordinate_encoding(u, v));
                    }
                }
                Prompt::Box { x0, y0, x1, y1 } => {
                    for &(x, y) in &[(*x0, *y0), (*x1, *y1)] {
                        let u = (x as f64 + 0.5) / img_w as f64;
                        let v = (y as f64 + 0.5) / img_h as f64;
                        data.extend_from_slice(&coordinate_encoding(u, v));
                    }
                }
            }
        }
        let pe = tape.constant_from(vec![n, count, EMBED_DIM], data);
        if is_box {
            tape.add_batch_bias(pe, self.corner_embed)
        } else {
            tape.add_last_dim_bias(pe, self.point_embed)
        }
    }
}
