//! Two-way transformer decoder: the token sequence [output token; prompt
//! tokens] and the flattened image embedding attend to each other through
//! two pre-norm blocks (token self-attention, token-to-image cross
//! attention, token MLP, image-to-token cross attention), 4 heads at
//! dim 64.

use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::tape::{NodeId, Tape};

use super::encoder::{EMBED_DIM, FINAL_SIZE};
use super::layers::{
    AttentionParams, Binder, Conv2dParams, LayerNormParams, LinearParams, NamedParams,
    NamedParamsMut,
};

pub const NUM_HEADS: usize = 4;
pub const MLP_HIDDEN: usize = 128;
pub const NUM_BLOCKS: usize = 2;

#[derive(Clone, Debug)]
pub struct TwoWayBlockParams {
    pub ln_self: LayerNormParams,
    pub self_attn: AttentionParams,
    pub ln_t_cross: LayerNormParams,
    pub ln_img_kv: LayerNormParams,
    pub cross_t2i: AttentionParams,
    pub ln_mlp: LayerNormParams,
    pub mlp_in: LinearParams,
    pub mlp_out: LinearParams,
    pub ln_img_q: LayerNormParams,
    pub ln_t_kv: LayerNormParams,
    pub cross_i2t: AttentionParams,
}

impl TwoWayBlockParams {
    pub fn init(rng: &mut Rng) -> Self {
        TwoWayBlockParams {
            ln_self: LayerNormParams::unit(EMBED_DIM),
            self_attn: AttentionParams::init(EMBED_DIM, NUM_HEADS, rng),
            ln_t_cross: LayerNormParams::unit(EMBED_DIM),
            ln_img_kv: LayerNormParams::unit(EMBED_DIM),
            cross_t2i: AttentionParams::init(EMBED_DIM, NUM_HEADS, rng),
            ln_mlp: LayerNormParams::unit(EMBED_DIM),
            mlp_in: LinearParams::init(EMBED_DIM, MLP_HIDDEN, rng),
            mlp_out: LinearParams::init(MLP_HIDDEN, EMBED_DIM, rng),
            ln_img_q: LayerNormParams::unit(EMBED_DIM),
            ln_t_kv: LayerNormParams::unit(EMBED_DIM),
            cross_i2t: AttentionParams::init(EMBED_DIM, NUM_HEADS, rng),
        }
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut NamedParams<'a>) {
        self.ln_self.collect(&format!("{prefix}/ln_self"), out);
        self.self_attn.collect(&format!("{prefix}/self_attn"), out);
        self.ln_t_cross.collect(&format!("{prefix}/ln_t_cross"), out);
        self.ln_img_kv.collect(&format!("{prefix}/ln_img_kv"), out);
        self.cross_t2i.collect(&format!("{prefix}/cross_t2i"), out);
        self.ln_mlp.collect(&format!("{prefix}/ln_mlp"), out);
        self.mlp_in.collect(&format!("{prefix}/mlp_in"), out);
        self.mlp_out.collect(&format!("{prefix}/mlp_out"), out);
        self.ln_img_q.collect(&format!("{prefix}/ln_img_q"), out);
        self.ln_t_kv.collect(&format!("{prefix}/ln_t_kv"), out);
        self.cross_i2t.collect(&format!("{prefix}/cross_i2t"), out);
    }

    pub fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut NamedParamsMut<'a>) {
        self.ln_self.collect_mut(&format!("{prefix}/ln_self"), out);
        self.self_attn.collect_mut(&format!("{prefix}/self_attn"), out);
        self.ln_t_cross.collect_mut(&format!("{prefix}/ln_t_cross"), out);
        self.ln_img_kv.collect_mut(&format!("{prefix}/ln_img_kv"), out);
        self.cross_t2i.collect_mut(&format!("{prefix}/cross_t2i"), out);
        self.ln_mlp.collect_mut(&format!("{prefix}/ln_mlp"), out);
        self.mlp_in.collect_mut(&format!("{prefix}/mlp_in"), out);
        self.mlp_out.collect_mut(&format!("{prefix}/mlp_out"), out);
        self.ln_img_q.collect_mut(&format!("{prefix}/ln_img_q"), out);
        self.ln_t_kv.collect_mut(&format!("{prefix}/ln_t_kv"), out);
        self.cross_i2t.collect_mut(&format!("{prefix}/cross_i2t"), out);
    }

    pub fn bind(&self, b: &mut Binder) -> TwoWayBlockBound {
        TwoWayBlockBound {
            ln_self: self.ln_self.bind(b),
            self_attn: self.self_attn.bind(b),
            ln_t_cross: self.ln_t_cross.bind(b),
            ln_img_kv: self.ln_img_kv.bind(b),
            cross_t2i: self.cross_t2i.bind(b),
            ln_mlp: self.ln_mlp.bind(b),
            mlp_in: self.mlp_in.bind(b),
            mlp_out: self.mlp_out.bind(b),
            ln_img_q: self.ln_img_q.bind(b),
            ln_t_kv: self.ln_t_kv.bind(b),
            cross_i2t: self.cross_i2t.bind(b),
        }
    }
}

pub struct TwoWayBlockBound {
    ln_self: super::layers::LayerNormBound,
    self_attn: super::layers::AttentionBound,
    ln_t_cross: super::layers::LayerNormBound,
    ln_img_kv: super::layers::LayerNormBound,
    cross_t2i: super::layers::AttentionBound,
    ln_mlp: super::layers::LayerNormBound,
    mlp_in: super::layers::LinearBound,
    mlp_out: super::layers::LinearBound,
    ln_img_q: super::layers::LayerNormBound,
    ln_t_kv: super::layers::LayerNormBound,
    cross_i2t: super::layers::AttentionBound,
}

impl TwoWayBlockBound {
    /// tokens: [N,K,64], image: [N,S,64]; returns updated (tokens, image).
    pub fn forward(&self, tape: &mut Tape, tokens: NodeId, image: NodeId) -> Result<(NodeId, NodeId)> {
        // Token self-attention (pre-norm residual).
        let t_n = self.ln_self.forward(tape, tokens)?;
        let sa = self.self_attn.forward(tape, t_n, t_n)?;
        let tokens = tape.add(tokens, sa)?;

        // Token -> image cross attention.
        let q = self.ln_t_cross.forward(tape, tokens)?;
        let kv = self.ln_img_kv.forward(tape, image)?;
        let ca = self.cross_t2i.forward(tape, q, kv)?;
        let tokens = tape.add(tokens, ca)?;

        // Token MLP.
        let m = self.ln_mlp.forward(tape, tokens)?;
        let h = self.mlp_in.forward(tape, m)?;
        let h = tape.gelu(h);
        let h = self.mlp_out.forward(tape, h)?;
        let tokens = tape.add(tokens, h)?;

        // Image -> token cross attention.
        let qi = self.ln_img_q.forward(tape, image)?;
        let tkv = self.ln_t_kv.forward(tape, tokens)?;
        let ci = self.cross_i2t.forward(tape, qi, tkv)?;
        let image = tape.add(image, ci)?;

        Ok((tokens, image))
    }
}

#[derive(Clone, Debug)]
pub struct DecoderParams {
    pub blocks: Vec<TwoWayBlockParams>,
    /// 1x1 projection of the final embedding into the complementary stream.
    pub comp_final: Conv2dParams,
    /// 1x1 projection of the pooled early embedding.
    pub comp_early: Conv2dParams,
}

impl DecoderParams {
    pub fn init(rng: &mut Rng) -> Self {
        DecoderParams {
            blocks: (0..NUM_BLOCKS).map(|_| TwoWayBlockParams::init(rng)).collect(),
            comp_final: Conv2dParams::init(EMBED_DIM, EMBED_DIM, 1, 0, 1, rng),
            comp_early: Conv2dParams::init(super::encoder::EARLY_CHANNELS, EMBED_DIM, 1, 0, 1, rng),
        }
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut NamedParams<'a>) {
        for (i, blk) in self.blocks.iter().enumerate() {
            blk.collect(&format!("{prefix}/block{i}"), out);
        }
        self.comp_final.collect(&format!("{prefix}/comp_final"), out);
        self.comp_early.collect(&format!("{prefix}/comp_early"), out);
    }

    pub fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut NamedParamsMut<'a>) {
        for (i, blk) in self.blocks.iter_mut().enumerate() {
            blk.collect_mut(&format!("{prefix}/block{i}"), out);
        }
        self.comp_final.collect_mut(&format!("{prefix}/comp_final"), out);
        self.comp_early.collect_mut(&format!("{prefix}/comp_early"), out);
    }

    pub fn bind(&self, b: &mut Binder) -> DecoderBound {
        DecoderBound {
            blocks: self.blocks.iter().map(|blk| blk.bind(b)).collect(),
            comp_final: self.comp_final.bind(b),
            comp_early: self.comp_early.bind(b),
        }
    }
}

pub struct DecoderBound {
    blocks: Vec<TwoWayBlockBound>,
    comp_final: super::layers::Conv2dBound,
    comp_early: super::layers::Conv2dBound,
}

pub struct DecoderOutput {
    /// Updated image feature, the mask-feature precursor: [N,64,16,16].
    pub precursor: NodeId,
    /// Complementary-stream feature from encoder layers: [N,64,16,16].
    pub comp_raw: NodeId,
    /// Updated first token: [N,64].
    pub token_per_mask: NodeId,
}

impl DecoderBound {
    /// emb_early: [N,32,64,64]; emb_final: [N,64,16,16];
    /// prompt_tokens: [N,P,64]; output_token: [64].
    pub fn forward(
        &self,
        tape: &mut Tape,
        emb_early: NodeId,
        emb_final: NodeId,
        prompt_tokens: NodeId,
        output_token: NodeId,
    ) -> Result<DecoderOutput> {
        let n = tape.shape(prompt_tokens)[0];
        let out_tok = tape.broadcast_token(output_token, n)?;
        let mut tokens = tape.concat_tokens(out_tok, prompt_tokens)?;
        let mut image = tape.nchw_to_tokens(emb_final)?;
        for blk in &self.blocks {
            let (t, i) = blk.forward(tape, tokens, image)?;
            tokens = t;
            image = i;
        }
        let precursor = tape.tokens_to_nchw(image, FINAL_SIZE, FINAL_SIZE)?;
        let token_per_mask = tape.slice_token(tokens, 0)?;

        let from_final = self.comp_final.forward(tape, emb_final)?;
        let pooled_early = tape.adaptive_avg_pool(emb_early, FINAL_SIZE, FINAL_SIZE)?;
        let from_early = self.comp_early.forward(tape, pooled_early)?;
        let comp_raw = tape.add(from_final, from_early)?;

        Ok(DecoderOutput {
            precursor,
            comp_raw,
            token_per_mask,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    struct Setup {
        dec: DecoderParams,
        early: Tensor,
        final_: Tensor,
        out_tok: Tensor,
    }

    fn setup(seed: u64) -> Setup {
        let mut rng = Rng::new(seed);
        Setup {
            dec: DecoderParams::init(&mut rng),
            early: Tensor::uniform(&[1, 32, 64, 64], -0.5, 0.5, &mut rng),
            final_: Tensor::uniform(&[1, 64, 16, 16], -0.5, 0.5, &mut rng),
            out_tok: Tensor::uniform(&[64], -0.5, 0.5, &mut rng),
        }
    }

    fn run(s: &Setup, prompts: &Tensor) -> (Vec<usize>, Vec<usize>, Vec<f64>) {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&mut tape, false);
        let bound = s.dec.bind(&mut binder);
        let early = tape.constant(&s.early);
        let final_ = tape.constant(&s.final_);
        let tok = tape.constant(&s.out_tok);
        let pr = tape.constant(prompts);
        let out = bound.forward(&mut tape, early, final_, pr, tok).unwrap();
        (
            tape.shape(out.precursor).to_vec(),
            tape.shape(out.comp_raw).to_vec(),
            tape.data(out.token_per_mask).to_vec(),
        )
    }

    #[test]
    fn output_shapes() {
        let s = setup(90);
        let mut rng = Rng::new(91);
        let prompts = Tensor::uniform(&[1, 2, 64], -0.5, 0.5, &mut rng);
        let (pre, comp, tok) = run(&s, &prompts);
        assert_eq!(pre, vec![1, 64, 16, 16]);
        assert_eq!(comp, vec![1, 64, 16, 16]);
        assert_eq!(tok.len(), 64);
    }

    #[test]
    fn prompt_permutation_leaves_output_token_stable() {
        let s = setup(92);
        let mut rng = Rng::new(93);
        let a = Tensor::uniform(&[1, 1, 64], -0.5, 0.5, &mut rng);
        let b = Tensor::uniform(&[1, 1, 64], -0.5, 0.5, &mut rng);
        let mut ab = Tensor::zeros(&[1, 2, 64]);
        ab.data_mut()[..64].copy_from_slice(a.data());
        ab.data_mut()[64..].copy_from_slice(b.data());
        let mut ba = Tensor::zeros(&[1, 2, 64]);
        ba.data_mut()[..64].copy_from_slice(b.data());
        ba.data_mut()[64..].copy_from_slice(a.data());
        let (_, _, tok_ab) = run(&s, &ab);
        let (_, _, tok_ba) = run(&s, &ba);
        for (x, y) in tok_ab.iter().zip(&tok_ba) {
            assert!((x - y).abs() < 1e-5, "{x} vs {y}");
        }
    }

    #[test]
    fn zeroed_attention_keeps_residual_identity() {
        let mut s = setup(94);
        // Zero every attention and MLP projection; layer norms stay unit.
        for blk in &mut s.dec.blocks {
            for attn in [&mut blk.self_attn, &mut blk.cross_t2i, &mut blk.cross_i2t] {
                for lin in [&mut attn.wq, &mut attn.wk, &mut attn.wv, &mut attn.wo] {
                    lin.w.data_mut().fill(0.0);
                    lin.b.data_mut().fill(0.0);
                }
            }
            blk.mlp_in.w.data_mut().fill(0.0);
            blk.mlp_in.b.data_mut().fill(0.0);
            blk.mlp_out.w.data_mut().fill(0.0);
            blk.mlp_out.b.data_mut().fill(0.0);
        }
        let mut rng = Rng::new(95);
        let prompts = Tensor::uniform(&[1, 1, 64], -0.5, 0.5, &mut rng);
        let (_, _, tok) = run(&s, &prompts);
        assert_eq!(tok, s.out_tok.data());
    }
}
