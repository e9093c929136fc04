//! Trainable anti-degradation components: the robust output token, the two
//! feature-refinement modules, the token refiner, the feature-fusion block,
//! and the assembled degraded-path forward pass.

pub mod amfg;
pub mod aotg;

pub use amfg::{fourier_suppress, AmfgBound, AmfgOutput, AmfgParams, Mode};
pub use aotg::{AotgBound, AotgParams};

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::Prompt;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::serial;
use crate::tensor::tape::{NodeId, Tape};
use crate::tensor::Tensor;

use super::model::encoder::{EMBED_DIM, IMAGE_SIZE};
use super::model::heads::{predict_mask, MaskMlpParams, MASK_CHANNELS};
use super::model::layers::{Binder, Conv2dParams, NamedParams, NamedParamsMut};
use super::model::teacher::{TeacherBound, TeacherParams};

/// Which anti-degradation pieces participate in the forward pass. All-false
/// reproduces the plain teacher path (the baseline rows in reports).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub use_amfg: bool,
    pub use_fourier: bool,
    pub use_aotg: bool,
    pub use_rot: bool,
}

impl AblationFlags {
    pub fn all() -> Self {
        AblationFlags {
            use_amfg: true,
            use_fourier: true,
            use_aotg: true,
            use_rot: true,
        }
    }

    pub fn none() -> Self {
        AblationFlags {
            use_amfg: false,
            use_fourier: false,
            use_aotg: false,
            use_rot: false,
        }
    }

    pub fn token_only() -> Self {
        AblationFlags {
            use_rot: true,
            ..AblationFlags::none()
        }
    }
}

#[derive(Clone, Debug)]
pub struct FusionParams {
    pub conv_mix: Conv2dParams, // 1x1, 64 -> 32
    pub conv_out: Conv2dParams, // 3x3 pad 1, 32 -> 32
}

impl FusionParams {
    pub fn init(rng: &mut Rng) -> Self {
        FusionParams {
            conv_mix: Conv2dParams::init(2 * MASK_CHANNELS, MASK_CHANNELS, 1, 0, 1, rng),
            conv_out: Conv2dParams::init(MASK_CHANNELS, MASK_CHANNELS, 3, 1, 1, rng),
        }
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut NamedParams<'a>) {
        self.conv_mix.collect(&format!("{prefix}/conv_mix"), out);
        self.conv_out.collect(&format!("{prefix}/conv_out"), out);
    }

    pub fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut NamedParamsMut<'a>) {
        self.conv_mix.collect_mut(&format!("{prefix}/conv_mix"), out);
        self.conv_out.collect_mut(&format!("{prefix}/conv_out"), out);
    }

    pub fn bind(&self, b: &mut Binder) -> FusionBound {
        FusionBound {
            conv_mix: self.conv_mix.bind(b),
            conv_out: self.conv_out.bind(b),
        }
    }
}

#[derive(Clone, Copy)]
pub struct FusionBound {
    conv_mix: super::model::layers::Conv2dBound,
    conv_out: super::model::layers::Conv2dBound,
}

impl FusionBound {
    /// Combine the two refined streams into the robust mask feature,
    /// shape-preserving at [N,32,64,64].
    pub fn forward(&self, tape: &mut Tape, f_mfd_hat: NodeId, f_cfd_hat: NodeId) -> Result<NodeId> {
        if tape.shape(f_mfd_hat) != tape.shape(f_cfd_hat) {
            return Err(Error::dimension(format!(
                "fuse: {:?} vs {:?}",
                tape.shape(f_mfd_hat),
                tape.shape(f_cfd_hat)
            )));
        }
        let cat = tape.concat_channels(f_mfd_hat, f_cfd_hat)?;
        let mixed = self.conv_mix.forward(tape, cat)?;
        let act = tape.gelu(mixed);
        self.conv_out.forward(tape, act)
    }
}

/// All trainable robust-path parameters.
#[derive(Clone, Debug)]
pub struct RobustParams {
    /// The robust output token, initialized from the teacher's.
    pub t_ro: Tensor,
    pub amfg_mask: AmfgParams,
    pub amfg_comp: AmfgParams,
    pub aotg: AotgParams,
    pub fusion: FusionParams,
    pub mask_mlp: MaskMlpParams,
}

impl RobustParams {
    /// Initialize against a frozen, trained teacher: T_RO starts as an
    /// exact copy of the teacher's output token; the amplitude convolutions
    /// start as exact identities; everything else is seeded fan-in uniform.
    pub fn init_from_teacher(teacher: &TeacherParams, seed: u64) -> Result<Self> {
        if !teacher.frozen {
            return Err(Error::contract("robust init requires a frozen teacher"));
        }
        let mut rng = Rng::new(seed);
        Ok(RobustParams {
            t_ro: teacher.output_token.clone(),
            amfg_mask: AmfgParams::init(EMBED_DIM, &mut rng)?,
            amfg_comp: AmfgParams::init(EMBED_DIM, &mut rng)?,
            aotg: AotgParams::init(&mut rng),
            fusion: FusionParams::init(&mut rng),
            mask_mlp: MaskMlpParams::init(&mut rng),
        })
    }

    pub fn collect(&self) -> NamedParams<'_> {
        let mut out = Vec::new();
        out.push(("robust/t_ro".to_string(), &self.t_ro));
        self.amfg_mask.collect("robust/amfg_mask", &mut out);
        self.amfg_comp.collect("robust/amfg_comp", &mut out);
        self.aotg.collect("robust/aotg", &mut out);
        self.fusion.collect("robust/fusion", &mut out);
        self.mask_mlp.collect("robust/mask_mlp", &mut out);
        out
    }

    pub fn collect_mut(&mut self) -> NamedParamsMut<'_> {
        let mut out = Vec::new();
        out.push(("robust/t_ro".to_string(), &mut self.t_ro));
        self.amfg_mask.collect_mut("robust/amfg_mask", &mut out);
        self.amfg_comp.collect_mut("robust/amfg_comp", &mut out);
        self.aotg.collect_mut("robust/aotg", &mut out);
        self.fusion.collect_mut("robust/fusion", &mut out);
        self.mask_mlp.collect_mut("robust/mask_mlp", &mut out);
        out
    }

    /// Parameters plus batch-norm running state (for checkpoints).
    pub fn collect_with_state(&self) -> NamedParams<'_> {
        let mut out = self.collect();
        self.amfg_mask.collect_state("robust/amfg_mask", &mut out);
        self.amfg_comp.collect_state("robust/amfg_comp", &mut out);
        out
    }

    pub fn collect_with_state_mut(&mut self) -> NamedParamsMut<'_> {
        let mut out = Vec::new();
        out.push(("robust/t_ro".to_string(), &mut self.t_ro));
        self.amfg_mask.collect_all_mut("robust/amfg_mask", &mut out);
        self.amfg_comp.collect_all_mut("robust/amfg_comp", &mut out);
        self.aotg.collect_mut("robust/aotg", &mut out);
        self.fusion.collect_mut("robust/fusion", &mut out);
        self.mask_mlp.collect_mut("robust/mask_mlp", &mut out);
        out
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> (RobustBound, Vec<NodeId>) {
        let mut binder = Binder::new(tape, trainable);
        let bound = RobustBound {
            t_ro: binder.leaf(&self.t_ro),
            amfg_mask: self.amfg_mask.bind(&mut binder),
            amfg_comp: self.amfg_comp.bind(&mut binder),
            aotg: self.aotg.bind(&mut binder),
            fusion: self.fusion.bind(&mut binder),
            mask_mlp: self.mask_mlp.bind(&mut binder),
        };
        (bound, binder.ids)
    }

    pub fn commit_f32(&mut self) {
        for (_, t) in self.collect_with_state_mut() {
            t.commit_f32();
        }
    }

    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, t) in self.collect_with_state() {
            hasher.update(name.as_bytes());
            for &v in t.data() {
                hasher.update((v as f32).to_le_bytes());
            }
        }
        hasher.update(self.amfg_mask.bn_batches.to_le_bytes());
        hasher.update(self.amfg_comp.bn_batches.to_le_bytes());
        hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let entries: Vec<(String, &Tensor)> = self.collect_with_state();
        serial::write_tensors(path, &entries)
    }

    pub fn load_into(&mut self, path: &Path) -> Result<()> {
        let entries = serial::read_tensors(path)?;
        let mut map: std::collections::HashMap<String, Tensor> = entries.into_iter().collect();
        for (name, t) in self.collect_with_state_mut() {
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
        Ok(())
    }
}

pub struct RobustBound {
    pub t_ro: NodeId,
    pub amfg_mask: AmfgBound,
    pub amfg_comp: AmfgBound,
    pub aotg: AotgBound,
    pub fusion: FusionBound,
    pub mask_mlp: super::model::heads::MaskMlpBound,
}

/// Everything the training loop and evaluator need from one degraded-path
/// forward pass.
pub struct StudentForward {
    pub logits: NodeId,
    /// Raw decoder mask-feature precursor (F_MFD): [N,64,16,16].
    pub f_mfd: NodeId,
    /// Raw complementary feature (F_CFD): [N,64,16,16].
    pub f_cfd: NodeId,
    /// Refined features, present when the feature refiners are enabled.
    pub f_mfd_hat: Option<NodeId>,
    pub f_cfd_hat: Option<NodeId>,
    /// Fused robust mask feature (present when the refiners are enabled).
    pub robust_feature: Option<NodeId>,
    /// Decoded token before refinement: [N,64].
    pub token_per_mask: NodeId,
    /// Refined token, present when the token refiner is enabled.
    pub t_ro_hat: Option<NodeId>,
    /// Batch-norm statistics from the two feature refiners (train mode).
    pub bn_mask: Option<(Vec<f64>, Vec<f64>)>,
    pub bn_comp: Option<(Vec<f64>, Vec<f64>)>,
}

/// The degraded-input path. The frozen backbone (encoder, prompt encoder,
/// decoder) always runs; the ablation flags choose the output token, the
/// feature branch (refined + fused vs. teacher heads), and the classifier
/// MLP (robust vs. teacher).
pub fn student_forward(
    tape: &mut Tape,
    teacher: &TeacherBound,
    robust: &RobustBound,
    flags: AblationFlags,
    images: NodeId,
    prompts: &[Prompt],
    mode: Mode,
) -> Result<StudentForward> {
    let emb = teacher.encoder.forward(tape, images)?;
    let prompt_tokens = teacher.prompt_enc.forward(tape, prompts, IMAGE_SIZE, IMAGE_SIZE)?;
    let token0 = if flags.use_rot { robust.t_ro } else { teacher.output_token };
    let dec = teacher
        .decoder
        .forward(tape, emb.early, emb.final_, prompt_tokens, token0)?;

    let (t_ro_hat, classifier_token) = if flags.use_aotg {
        let refined = robust.aotg.forward(tape, dec.token_per_mask)?;
        (Some(refined), refined)
    } else {
        (None, dec.token_per_mask)
    };

    let mut bn_mask = None;
    let mut bn_comp = None;
    let (feature, f_mfd_hat, f_cfd_hat, fused_feature, use_robust_mlp) = if flags.use_amfg {
        let mask_out = robust
            .amfg_mask
            .forward(tape, dec.precursor, mode, flags.use_fourier)?;
        let comp_out = robust
            .amfg_comp
            .forward(tape, dec.comp_raw, mode, flags.use_fourier)?;
        bn_mask = mask_out.bn_batch_stats;
        bn_comp = comp_out.bn_batch_stats;
        let fused = robust.fusion.forward(tape, mask_out.out, comp_out.out)?;
        (fused, Some(mask_out.out), Some(comp_out.out), Some(fused), true)
    } else {
        let feature = teacher.head_mask.forward(tape, dec.precursor)?;
        (feature, None, None, None, false)
    };

    let mlp = if use_robust_mlp { &robust.mask_mlp } else { &teacher.mask_mlp };
    let logits = predict_mask(tape, classifier_token, mlp, feature, IMAGE_SIZE)?;

    Ok(StudentForward {
        logits,
        f_mfd: dec.precursor,
        f_cfd: dec.comp_raw,
        f_mfd_hat,
        f_cfd_hat,
        robust_feature: fused_feature,
        token_per_mask: dec.token_per_mask,
        t_ro_hat,
        bn_mask,
        bn_comp,
    })
}
