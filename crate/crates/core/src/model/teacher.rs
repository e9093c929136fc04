//! The full promptable segmenter used as the frozen clear-image teacher:
//! encoder + prompt encoder + decoder + upsampling heads + mask MLP +
//! learned output token, with RSTN checkpoint persistence and a JSON
//! sidecar.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::Prompt;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::serial;
use crate::tensor::tape::{NodeId, Tape};
use crate::tensor::Tensor;

use super::decoder::DecoderParams;
use super::encoder::{EncoderParams, EMBED_DIM, IMAGE_SIZE};
use super::heads::{predict_mask, MaskMlpParams, UpsampleHeadParams};
use super::layers::{Binder, NamedParams, NamedParamsMut};
use super::prompt_enc::PromptEncoderParams;

#[derive(Clone, Debug)]
pub struct TeacherParams {
    pub encoder: EncoderParams,
    pub prompt_enc: PromptEncoderParams,
    pub decoder: DecoderParams,
    pub head_mask: UpsampleHeadParams,
    pub head_comp: UpsampleHeadParams,
    pub mask_mlp: MaskMlpParams,
    pub output_token: Tensor, // [64]
    pub frozen: bool,
    pub val_miou: f64,
}

impl TeacherParams {
    pub fn init(seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        TeacherParams {
            encoder: EncoderParams::init(&mut rng),
            prompt_enc: PromptEncoderParams::init(&mut rng),
            decoder: DecoderParams::init(&mut rng),
            head_mask: UpsampleHeadParams::init(EMBED_DIM, &mut rng),
            head_comp: UpsampleHeadParams::init(EMBED_DIM, &mut rng),
            mask_mlp: MaskMlpParams::init(&mut rng),
            output_token: Tensor::fan_in_uniform(&[EMBED_DIM], EMBED_DIM, &mut rng),
            frozen: false,
            val_miou: 0.0,
        }
    }

    pub fn collect(&self) -> NamedParams<'_> {
        let mut out = Vec::new();
        self.encoder.collect("teacher/encoder", &mut out);
        self.prompt_enc.collect("teacher/prompt", &mut out);
        self.decoder.collect("teacher/decoder", &mut out);
        self.head_mask.collect("teacher/head_mask", &mut out);
        self.head_comp.collect("teacher/head_comp", &mut out);
        self.mask_mlp.collect("teacher/mask_mlp", &mut out);
        out.push(("teacher/output_token".to_string(), &self.output_token));
        out
    }

    pub fn collect_mut(&mut self) -> NamedParamsMut<'_> {
        let mut out = Vec::new();
        self.encoder.collect_mut("teacher/encoder", &mut out);
        self.prompt_enc.collect_mut("teacher/prompt", &mut out);
        self.decoder.collect_mut("teacher/decoder", &mut out);
        self.head_mask.collect_mut("teacher/head_mask", &mut out);
        self.head_comp.collect_mut("teacher/head_comp", &mut out);
        self.mask_mlp.collect_mut("teacher/mask_mlp", &mut out);
        out.push(("teacher/output_token".to_string(), &mut self.output_token));
        out
    }

    /// Bind onto a tape; `trainable` must be false once frozen.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<(TeacherBound, Vec<NodeId>)> {
        if trainable && self.frozen {
            return Err(Error::contract("teacher is frozen; cannot bind trainable"));
        }
        let mut binder = Binder::new(tape, trainable);
        let bound = TeacherBound {
            encoder: self.encoder.bind(&mut binder),
            prompt_enc: self.prompt_enc.bind(&mut binder),
            decoder: self.decoder.bind(&mut binder),
            head_mask: self.head_mask.bind(&mut binder),
            head_comp: self.head_comp.bind(&mut binder),
            mask_mlp: self.mask_mlp.bind(&mut binder),
            output_token: binder.leaf(&self.output_token),
        };
        Ok((bound, binder.ids))
    }

    /// Round every parameter to f32 (checkpoint commit).
    pub fn commit_f32(&mut self) {
        for (_, t) in self.collect_mut() {
            t.commit_f32();
        }
    }

    /// SHA-256 of the serialized parameter list (order + f32 payloads).
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, t) in self.collect() {
            hasher.update(name.as_bytes());
            for &v in t.data() {
                hasher.update((v as f32).to_le_bytes());
            }
        }
        hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let entries: Vec<(String, &Tensor)> = self.collect();
        serial::write_tensors(path, &entries)?;
        let sidecar = TeacherSidecar {
            val_miou: self.val_miou,
            frozen: self.frozen,
            cfg_hash: self.content_hash(),
        };
        let json = serde_json::to_string_pretty(&sidecar)
            .map_err(|e| Error::Format(format!("sidecar: {e}")))?;
        std::fs::write(sidecar_path(path), json).map_err(|e| Error::io(sidecar_path(path), e))
    }

    pub fn load(path: &Path) -> Result<TeacherParams> {
        let entries = serial::read_tensors(path)?;
        let sidecar: TeacherSidecar = {
            let raw = std::fs::read_to_string(sidecar_path(path))
                .map_err(|e| Error::io(sidecar_path(path), e))?;
            serde_json::from_str(&raw).map_err(|e| Error::Format(format!("sidecar: {e}")))?
        };
        let mut teacher = TeacherParams::init(0);
        let mut map: std::collections::HashMap<String, Tensor> = entries.into_iter().collect();
        for (name, t) in teacher.collect_mut() {
            let loaded = map
                .remove(&name)
                .ok_or_else(|| Error::Format(format!("checkpoint missing {name}")))?;
            if loaded.shape() != t.shape() {
                return Err(Error::Format(format!("checkpoint shape mismatch for {name}")));
            }
            *t = loaded;
        }
        if !map.is_empty() {
            let extra: Vec<&String> = map.keys().take(3).collect();
            return Err(Error::Format(format!("checkpoint has unknown tensors: {extra:?}")));
        }
        teacher.frozen = sidecar.frozen;
        teacher.val_miou = sidecar.val_miou;
        Ok(teacher)
    }
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    path.with_extension("json")
}

#[derive(Serialize, Deserialize)]
struct TeacherSidecar {
    val_miou: f64,
    frozen: bool,
    cfg_hash: String,
}

pub struct TeacherBound {
    pub encoder: super::encoder::EncoderBound,
    pub prompt_enc: super::prompt_enc::PromptEncoderBound,
    pub decoder: super::decoder::DecoderBound,
    pub head_mask: super::heads::UpsampleHeadBound,
    pub head_comp: super::heads::UpsampleHeadBound,
    pub mask_mlp: super::heads::MaskMlpBound,
    pub output_token: NodeId,
}

pub struct TeacherForward {
    pub logits: NodeId,
    /// Teacher mask feature (clear path): [N,32,64,64].
    pub f_mfc: NodeId,
    /// Teacher complementary feature: [N,32,64,64].
    pub f_cfc: NodeId,
    /// Decoded output token: [N,64].
    pub t_oc: NodeId,
    pub precursor: NodeId,
    pub comp_raw: NodeId,
}

impl TeacherBound {
    /// Standard clear-image forward: encode, decode, head both streams, and
    /// predict the mask from the decoded output token.
    pub fn forward(
        &self,
        tape: &mut Tape,
        images: NodeId,
        prompts: &[Prompt],
    ) -> Result<TeacherForward> {
        let emb = self.encoder.forward(tape, images)?;
        let prompt_tokens = self.prompt_enc.forward(tape, prompts, IMAGE_SIZE, IMAGE_SIZE)?;
        let dec = self
            .decoder
            .forward(tape, emb.early, emb.final_, prompt_tokens, self.output_token)?;
        let f_mfc = self.head_mask.forward(tape, dec.precursor)?;
        let f_cfc = self.head_comp.forward(tape, dec.comp_raw)?;
        let logits = predict_mask(tape, dec.token_per_mask, &self.mask_mlp, f_mfc, IMAGE_SIZE)?;
        Ok(TeacherForward {
            logits,
            f_mfc,
            f_cfc,
            t_oc: dec.token_per_mask,
            precursor: dec.precursor,
            comp_raw: dec.comp_raw,
        })
    }
}

/// Stack planar [0,1] images into an [N,3,H,W] tensor.
pub fn images_to_tensor(images: &[&crate::img::RgbImage]) -> Result<Tensor> {
    if images.is_empty() {
        return Err(Error::contract("empty image batch"));
    }
    let (h, w) = (images[0].h, images[0].w);
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if img.h != h || img.w != w {
            return Err(Error::dimension("image batch extent mismatch"));
        }
        data.extend_from_slice(&img.data);
    }
    Tensor::from_vec(vec![images.len(), 3, h, w], data)
}

/// Stack binary masks into an [N,H,W] float tensor.
pub fn masks_to_tensor(masks: &[&[bool]], h: usize, w: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(masks.len() * h * w);
    for m in masks {
        if m.len() != h * w {
            return Err(Error::dimension("mask batch extent mismatch"));
        }
        data.extend(m.iter().map(|&b| f64::from(b)));
    }
    Tensor::from_vec(vec![masks.len(), h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("teacher.rstn");
        let mut teacher = TeacherParams::init(7);
        teacher.frozen = true;
        teacher.val_miou = 0.91;
        teacher.commit_f32();
        teacher.save(&path).unwrap();
        let loaded = TeacherParams::load(&path).unwrap();
        assert!(loaded.frozen);
        assert_eq!(loaded.val_miou, 0.91);
        assert_eq!(loaded.content_hash(), teacher.content_hash());
        // Second save reproduces identical bytes.
        let path2 = dir.path().join("teacher2.rstn");
        loaded.save(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn frozen_teacher_rejects_trainable_bind() {
        let mut teacher = TeacherParams::init(3);
        teacher.frozen = true;
        let mut tape = Tape::new();
        assert!(teacher.bind(&mut tape, true).is_err());
        assert!(teacher.bind(&mut tape, false).is_ok());
    }

    #[test]
    fn forward_is_reproducible_bitwise() {
        let teacher = TeacherParams::init(11);
        let mut rng = Rng::new(12);
        let img = Tensor::uniform(&[1, 3, 128, 128], 0.0, 1.0, &mut rng);
        let prompts = vec![Prompt::Points(vec![(40, 50)])];
        let run = || {
            let mut tape = Tape::new();
            let (bound, _) = teacher.bind(&mut tape, false).unwrap();
            let img_id = tape.constant(&img);
            let out = bound.forward(&mut tape, img_id, &prompts).unwrap();
            (
                tape.data(out.logits).to_vec(),
                tape.data(out.f_mfc).to_vec(),
                tape.data(out.t_oc).to_vec(),
            )
        };
        let (l1, f1, t1) = run();
        let (l2, f2, t2) = run();
        assert!(l1.iter().zip(&l2).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(f1.iter().zip(&f2).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(t1.iter().zip(&t2).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(f1.len(), 32 * 64 * 64);
        assert_eq!(t1.len(), 64);
    }
}
