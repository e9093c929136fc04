//! Training loops: teacher pretraining on clear scenes and robust-path
//! training under sampled degradation, plus run checkpointing with bitwise
//! resume.

use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{self, Manifest, Prompt};
use crate::degrade;
use crate::error::{Error, Result};
use crate::img::RgbImage;
use crate::losses::{mfc_loss_on, seg_loss_on, tc_loss_on};
use crate::metrics::pixel_metrics;
use crate::model::{images_to_tensor, masks_to_tensor, TeacherParams, IMAGE_SIZE};
use crate::rng::{derive_seed, Rng};
use crate::robust::{student_forward, AblationFlags, Mode, RobustParams};
use crate::tensor::adam::{AdamConfig, AdamState};
use crate::tensor::serial;
use crate::tensor::tape::Tape;
use crate::tensor::Tensor;

use super::config::TrainConfig;

/// Line-oriented run log. The file receives only deterministic content;
/// wall-clock timing goes to the console echo alone.
pub struct Logger {
    file: Option<std::io::BufWriter<std::fs::File>>,
    echo: bool,
    start: std::time::Instant,
}

impl Logger {
    pub fn new(path: Option<&Path>, echo: bool) -> Result<Logger> {
        let file = match path {
            Some(p) => {
                if let Some(parent) = p.parent() {
                    std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
                }
                Some(std::io::BufWriter::new(
                    std::fs::File::create(p).map_err(|e| Error::io(p, e))?,
                ))
            }
            None => None,
        };
        Ok(Logger {
            file,
            echo,
            start: std::time::Instant::now(),
        })
    }

    pub fn silent() -> Logger {
        Logger {
            file: None,
            echo: false,
            start: std::time::Instant::now(),
        }
    }

    pub fn log(&mut self, line: &str) {
        if let Some(f) = &mut self.file {
            let _ = writeln!(f, "{line}");
            let _ = f.flush();
        }
        if self.echo {
            eprintln!("{line} wall_ms={}", self.start.elapsed().as_millis());
        }
    }
}

/// A clear record held in memory for the training loops.
pub struct LoadedRecord {
    pub id: String,
    pub image: RgbImage,
    pub masks: Vec<Vec<bool>>,
}

/// Load the clear entries of a split (0 limit = all), in manifest order.
pub fn load_clear_split(
    root: &Path,
    manifest: &Manifest,
    split: &str,
    limit: usize,
) -> Result<Vec<LoadedRecord>> {
    let entries: Vec<_> = manifest
        .split(split)
        .filter(|e| e.degradation == "clear")
        .cloned()
        .collect();
    let take = if limit == 0 { entries.len() } else { limit.min(entries.len()) };
    let records: Result<Vec<LoadedRecord>> = entries[..take]
        .par_iter()
        .map(|e| {
            let rec = dataset::read_record(root, e)?;
            Ok(LoadedRecord {
                id: rec.id,
                image: rec.image,
                masks: rec.masks,
            })
        })
        .collect();
    records
}

/// Mean IoU of a model over clear records using seeded point prompts, one
/// prediction per instance.
pub fn model_miou<F>(records: &[LoadedRecord], prompt_points: usize, seed: u64, infer: F) -> Result<f64>
where
    F: Fn(&RgbImage, &Prompt) -> Result<Vec<bool>> + Sync,
{
    let scores: Result<Vec<Vec<f64>>> = records
        .par_iter()
        .enumerate()
        .map(|(ri, rec)| {
            let mut out = Vec::with_capacity(rec.masks.len());
            for (mi, mask) in rec.masks.iter().enumerate() {
                let mut rng = Rng::new(derive_seed(seed, "miou-prompt", (ri * 8 + mi) as u64));
                let prompt = dataset::point_prompt(mask, rec.image.w, prompt_points, &mut rng)?;
                let pred = infer(&rec.image, &prompt)?;
                out.push(pixel_metrics(&pred, mask)?.iou);
            }
            Ok(out)
        })
        .collect();
    let flat: Vec<f64> = scores?.into_iter().flatten().collect();
    if flat.is_empty() {
        return Err(Error::contract("model_miou: no instances"));
    }
    Ok(flat.iter().sum::<f64>() / flat.len() as f64)
}

/// Teacher inference closure for [`model_miou`] and the evaluator.
pub fn teacher_infer(teacher: &TeacherParams) -> impl Fn(&RgbImage, &Prompt) -> Result<Vec<bool>> + Sync + '_ {
    move |image, prompt| {
        let mut tape = Tape::new();
        let (bound, _) = teacher.bind(&mut tape, false)?;
        let img = images_to_tensor(&[image])?;
        let img_id = tape.constant(&img);
        let out = bound.forward(&mut tape, img_id, std::slice::from_ref(prompt))?;
        Ok(tape.data(out.logits).iter().map(|&v| v >= 0.0).collect())
    }
}

/// Robust-path inference closure (eval mode, frozen statistics).
pub fn robust_infer<'a>(
    teacher: &'a TeacherParams,
    robust: &'a RobustParams,
    flags: AblationFlags,
) -> impl Fn(&RgbImage, &Prompt) -> Result<Vec<bool>> + Sync + 'a {
    move |image, prompt| {
        let mut tape = Tape::new();
        let (tb, _) = teacher.bind(&mut tape, false)?;
        let (rb, _) = robust.bind(&mut tape, false);
        let img = images_to_tensor(&[image])?;
        let img_id = tape.constant(&img);
        let out = student_forward(
            &mut tape,
            &tb,
            &rb,
            flags,
            img_id,
            std::slice::from_ref(prompt),
            Mode::Eval,
        )?;
        Ok(tape.data(out.logits).iter().map(|&v| v >= 0.0).collect())
    }
}

struct BatchDraw {
    images_clear: Vec<RgbImage>,
    images_degraded: Vec<RgbImage>,
    masks: Vec<Vec<bool>>,
    prompts: Vec<Prompt>,
}

/// Assemble one training batch: sample a degradation per record (identity
/// included at 1/16), pick an instance, and sample the prompt from the
/// degraded (possibly warped) mask. The same prompt conditions the clear
/// teacher pass so consistency targets correspond to the same query.
fn draw_batch(
    records: &[LoadedRecord],
    indices: &[usize],
    seed: u64,
    epoch: usize,
    step: usize,
    prompt_points: usize,
    degrade_inputs: bool,
) -> Result<BatchDraw> {
    let mut images_clear = Vec::with_capacity(indices.len());
    let mut images_degraded = Vec::with_capacity(indices.len());
    let mut masks = Vec::with_capacity(indices.len());
    let mut prompts = Vec::with_capacity(indices.len());
    for (slot, &idx) in indices.iter().enumerate() {
        let rec = &records[idx];
        let item_tag = (epoch as u64) << 32 | (step as u64) << 8 | slot as u64;
        let (deg_image, deg_masks) = if degrade_inputs {
            let mut drng = Rng::new(derive_seed(seed, "degrade", item_tag));
            let spec = degrade::sample_spec(&mut drng);
            degrade::apply_with_masks(&rec.image, &rec.masks, &spec)?
        } else {
            (rec.image.clone(), rec.masks.clone())
        };
        let mut irng = Rng::new(derive_seed(seed, "instance", item_tag));
        let mi = irng.below(deg_masks.len() as u64) as usize;
        let mut prng = Rng::new(derive_seed(seed, "prompt", item_tag));
        let prompt = dataset::point_prompt(&deg_masks[mi], rec.image.w, prompt_points, &mut prng)?;
        images_clear.push(rec.image.clone());
        images_degraded.push(deg_image);
        masks.push(deg_masks[mi].clone());
        prompts.push(prompt);
    }
    Ok(BatchDraw {
        images_clear,
        images_degraded,
        masks,
        prompts,
    })
}

/// Pretrain the teacher on clear scenes with the combined segmentation
/// loss; the complementary stream learns through an auxiliary mask
/// prediction from its own feature. Early-stops once validation mIoU
/// reaches the target; errors if the floor is never reached.
pub fn pretrain_teacher(root: &Path, cfg: &TrainConfig, log: &mut Logger) -> Result<TeacherParams> {
    let manifest = Manifest::load(root)?;
    let train = load_clear_split(root, &manifest, "train", cfg.max_train_scenes)?;
    if train.len() < 200 {
        return Err(Error::contract(format!(
            "pretrain_teacher: need >= 200 clear training records, have {}",
            train.len()
        )));
    }
    let val = load_clear_split(root, &manifest, "val", 0)?;
    let mut teacher = TeacherParams::init(derive_seed(cfg.seed, "teacher-init", 0));
    let sizes: Vec<usize> = teacher.collect().iter().map(|(_, t)| t.numel()).collect();
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.teacher_lr), &sizes);

    let mut best = 0.0f64;
    for epoch in 0..cfg.teacher_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut shuffle_rng = Rng::new(derive_seed(cfg.seed, "teacher-epoch", epoch as u64));
        shuffle_rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut steps = 0usize;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = draw_batch(
                &train,
                chunk,
                derive_seed(cfg.seed, "teacher-draw", epoch as u64),
                epoch,
                step,
                cfg.prompt_points,
                false,
            )?;
            let mut tape = Tape::new();
            let (bound, ids) = teacher.bind(&mut tape, true)?;
            let img_refs: Vec<&RgbImage> = batch.images_clear.iter().collect();
            let images = images_to_tensor(&img_refs)?;
            let img_id = tape.constant(&images);
            let out = bound.forward(&mut tape, img_id, &batch.prompts)?;
            let mask_refs: Vec<&[bool]> = batch.masks.iter().map(|m| m.as_slice()).collect();
            let gt = masks_to_tensor(&mask_refs, IMAGE_SIZE, IMAGE_SIZE)?;
            let gt_id = tape.constant(&gt);
            let main = seg_loss_on(&mut tape, out.logits, gt_id, cfg.weights.lambda3)?;
            // Auxiliary prediction from the complementary feature so that
            // stream carries mask-relevant structure for the consistency
            // targets.
            let aux_logits = crate::model::predict_mask(
                &mut tape,
                out.t_oc,
                &bound.mask_mlp,
                out.f_cfc,
                IMAGE_SIZE,
            )?;
            let aux = seg_loss_on(&mut tape, aux_logits, gt_id, cfg.weights.lambda3)?;
            let aux_scaled = tape.scale(aux, 0.5);
            let loss = tape.add(main, aux_scaled)?;
            tape.backward(loss)?;
            let loss_value = tape.scalar_value(loss);
            if !loss_value.is_finite() {
                return Err(Error::Divergence {
                    step,
                    msg: format!("teacher loss {loss_value}"),
                });
            }
            epoch_loss += loss_value;
            steps += 1;
            let grads: Vec<Option<&[f64]>> = ids.iter().map(|&id| tape.grad(id)).collect();
            let mut params = teacher.collect_mut();
            let mut refs: Vec<&mut Tensor> = params.iter_mut().map(|(_, t)| &mut **t).collect();
            adam.step(&mut refs, &grads)?;
            if step % 50 == 0 {
                log.log(&format!(
                    "teacher epoch={epoch} step={step} loss={loss_value:.6}"
                ));
            }
        }
        let miou = model_miou(&val, cfg.prompt_points, cfg.seed, teacher_infer(&teacher))?;
        best = best.max(miou);
        log.log(&format!(
            "teacher epoch={epoch} mean_loss={:.6} val_miou={miou:.4}",
            epoch_loss / steps.max(1) as f64
        ));
        if miou >= cfg.teacher_miou_target {
            break;
        }
    }
    let final_miou = model_miou(&val, cfg.prompt_points, cfg.seed, teacher_infer(&teacher))?;
    if final_miou < cfg.teacher_miou_floor {
        return Err(Error::TrainingQuality(format!(
            "teacher reached clear-val mIoU {final_miou:.4}, below the {:.2} floor",
            cfg.teacher_miou_floor
        )));
    }
    teacher.frozen = true;
    teacher.val_miou = final_miou;
    teacher.commit_f32();
    log.log(&format!("teacher frozen val_miou={final_miou:.4}"));
    Ok(teacher)
}

#[derive(Serialize, Deserialize, Debug, Clone)]
pub struct RunSidecar {
    pub epoch_done: usize,
    pub adam_step: u64,
    pub bn_batches_mask: u64,
    pub bn_batches_comp: u64,
    pub seed: u64,
    pub cfg_hash: String,
    pub teacher_hash: String,
    pub flags: AblationFlags,
}

pub struct RunState {
    pub robust: RobustParams,
    pub adam: AdamState,
    pub epoch_done: usize,
}

pub fn save_run_checkpoint(
    path: &Path,
    state: &RunState,
    cfg: &TrainConfig,
    teacher: &TeacherParams,
) -> Result<()> {
    let named = state.robust.collect_with_state();
    let param_names: Vec<String> = state.robust.collect().iter().map(|(n, _)| n.clone()).collect();
    let mut entries: Vec<(String, Tensor)> = named
        .iter()
        .map(|(n, t)| (n.clone(), (*t).clone()))
        .collect();
    for (i, name) in param_names.iter().enumerate() {
        entries.push((
            format!("adam_m/{name}"),
            Tensor::from_vec(vec![state.adam.m[i].len()], state.adam.m[i].clone())?,
        ));
        entries.push((
            format!("adam_v/{name}"),
            Tensor::from_vec(vec![state.adam.v[i].len()], state.adam.v[i].clone())?,
        ));
    }
    let refs: Vec<(String, &Tensor)> = entries.iter().map(|(n, t)| (n.clone(), t)).collect();
    serial::write_tensors(path, &refs)?;
    let sidecar = RunSidecar {
        epoch_done: state.epoch_done,
        adam_step: state.adam.step,
        bn_batches_mask: state.robust.amfg_mask.bn_batches,
        bn_batches_comp: state.robust.amfg_comp.bn_batches,
        seed: cfg.seed,
        cfg_hash: cfg.hash(),
        teacher_hash: teacher.content_hash(),
        flags: cfg.flags,
    };
    let json = serde_json::to_string_pretty(&sidecar).map_err(|e| Error::Format(format!("sidecar: {e}")))?;
    std::fs::write(path.with_extension("json"), json)
        .map_err(|e| Error::io(path.with_extension("json"), e))
}

pub fn load_run_checkpoint(path: &Path, teacher: &TeacherParams, cfg: &TrainConfig) -> Result<RunState> {
    let raw = std::fs::read_to_string(path.with_extension("json"))
        .map_err(|e| Error::io(path.with_extension("json"), e))?;
    let sidecar: RunSidecar =
        serde_json::from_str(&raw).map_err(|e| Error::Format(format!("sidecar: {e}")))?;
    if sidecar.teacher_hash != teacher.content_hash() {
        return Err(Error::contract("checkpoint was trained against a different teacher"));
    }
    let mut robust = RobustParams::init_from_teacher(teacher, derive_seed(sidecar.seed, "robust-init", 0))?;
    let entries = serial::read_tensors(path)?;
    let mut map: std::collections::HashMap<String, Tensor> = entries.into_iter().collect();
    for (name, t) in robust.collect_with_state_mut() {
        let loaded = map
            .remove(&name)
            .ok_or_else(|| Error::Format(format!("checkpoint missing {name}")))?;
        *t = loaded;
    }
    robust.amfg_mask.bn_batches = sidecar.bn_batches_mask;
    robust.amfg_comp.bn_batches = sidecar.bn_batches_comp;
    let sizes: Vec<usize> = robust.collect().iter().map(|(_, t)| t.numel()).collect();
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.lr), &sizes);
    adam.step = sidecar.adam_step;
    let names: Vec<String> = robust.collect().iter().map(|(n, _)| n.clone()).collect();
    for (i, name) in names.iter().enumerate() {
        adam.m[i] = map
            .remove(&format!("adam_m/{name}"))
            .ok_or_else(|| Error::Format(format!("checkpoint missing adam_m/{name}")))?
            .data()
            .to_vec();
        adam.v[i] = map
            .remove(&format!("adam_v/{name}"))
            .ok_or_else(|| Error::Format(format!("checkpoint missing adam_v/{name}")))?
            .data()
            .to_vec();
    }
    Ok(RunState {
        robust,
        adam,
        epoch_done: sidecar.epoch_done,
    })
}

/// Per-step scalar losses for observability and tests.
#[derive(Clone, Copy, Debug, Default)]
pub struct StepLosses {
    pub total: f64,
    pub mfc: f64,
    pub tc: f64,
    pub seg: f64,
}

/// Train the robust path against a frozen teacher. Resumes from `resume`
/// when given. Checkpoints (and commits all live state to f32) at every
/// epoch boundary so an interrupted run reproduces an uninterrupted one
/// bitwise.
pub fn train_robust(
    root: &Path,
    teacher: &TeacherParams,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    resume: Option<RunState>,
    log: &mut Logger,
) -> Result<(RunState, Vec<StepLosses>)> {
    if !teacher.frozen {
        return Err(Error::contract("train_robust requires a frozen teacher"));
    }
    let manifest = Manifest::load(root)?;
    let train = load_clear_split(root, &manifest, "train", cfg.max_train_scenes)?;
    if train.is_empty() {
        return Err(Error::contract("train_robust: empty train split"));
    }
    let mut state = match resume {
        Some(s) => s,
        None => {
            let robust = RobustParams::init_from_teacher(teacher, derive_seed(cfg.seed, "robust-init", 0))?;
            let sizes: Vec<usize> = robust.collect().iter().map(|(_, t)| t.numel()).collect();
            RunState {
                robust,
                adam: AdamState::new(AdamConfig::with_lr(cfg.lr), &sizes),
                epoch_done: 0,
            }
        }
    };
    let flags = cfg.flags;
    let mut history = Vec::new();
    for epoch in state.epoch_done..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut shuffle_rng = Rng::new(derive_seed(cfg.seed, "robust-epoch", epoch as u64));
        shuffle_rng.shuffle(&mut order);
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = draw_batch(
                &train,
                chunk,
                derive_seed(cfg.seed, "robust-draw", 0),
                epoch,
                step,
                cfg.prompt_points,
                true,
            )?;
            let losses = robust_step(teacher, &mut state, cfg, flags, &batch, epoch, step)?;
            history.push(losses);
            if step % 50 == 0 {
                log.log(&format!(
                    "robust epoch={epoch} step={step} loss={:.6} mfc={:.6} tc={:.6} seg={:.6}",
                    losses.total, losses.mfc, losses.tc, losses.seg
                ));
            }
        }
        state.epoch_done = epoch + 1;
        // Commit to f32 precision at the checkpoint boundary; resumed runs
        // then start from exactly the bytes on disk.
        state.robust.commit_f32();
        state.adam.commit_f32();
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            save_run_checkpoint(&dir.join(format!("robust-epoch{:03}.rstn", epoch + 1)), &state, cfg, teacher)?;
        }
        log.log(&format!("robust epoch={epoch} done"));
    }
    Ok((state, history))
}

fn robust_step(
    teacher: &TeacherParams,
    state: &mut RunState,
    cfg: &TrainConfig,
    flags: AblationFlags,
    batch: &BatchDraw,
    epoch: usize,
    step: usize,
) -> Result<StepLosses> {
    let mut tape = Tape::new();
    let (tb, _) = teacher.bind(&mut tape, false)?;
    let (rb, ids) = state.robust.bind(&mut tape, true);

    // Teacher targets from the clear images (constants on the tape).
    let clear_refs: Vec<&RgbImage> = batch.images_clear.iter().collect();
    let clear = images_to_tensor(&clear_refs)?;
    let clear_id = tape.constant(&clear);
    let teacher_out = tb.forward(&mut tape, clear_id, &batch.prompts)?;

    // Student path on the degraded images.
    let deg_refs: Vec<&RgbImage> = batch.images_degraded.iter().collect();
    let degraded = images_to_tensor(&deg_refs)?;
    let deg_id = tape.constant(&degraded);
    let student = student_forward(&mut tape, &tb, &rb, flags, deg_id, &batch.prompts, Mode::Train)?;

    let mask_refs: Vec<&[bool]> = batch.masks.iter().map(|m| m.as_slice()).collect();
    let gt = masks_to_tensor(&mask_refs, IMAGE_SIZE, IMAGE_SIZE)?;
    let gt_id = tape.constant(&gt);

    let seg = seg_loss_on(&mut tape, student.logits, gt_id, cfg.weights.lambda3)?;
    let seg_scaled = tape.scale(seg, cfg.weights.lambda2);
    let mut loss = seg_scaled;
    let mut mfc_value = 0.0;
    let mut tc_value = 0.0;
    if let (Some(mfd_hat), Some(cfd_hat)) = (student.f_mfd_hat, student.f_cfd_hat) {
        let mfc = mfc_loss_on(&mut tape, cfd_hat, teacher_out.f_cfc, mfd_hat, teacher_out.f_mfc, true)?;
        mfc_value = tape.scalar_value(mfc);
        loss = tape.add(loss, mfc)?;
    }
    if let Some(t_hat) = student.t_ro_hat {
        let tc = tc_loss_on(&mut tape, t_hat, teacher_out.t_oc, true)?;
        tc_value = tape.scalar_value(tc);
        let tc_scaled = tape.scale(tc, cfg.weights.lambda1);
        loss = tape.add(loss, tc_scaled)?;
    }
    tape.backward(loss)?;
    let total = tape.scalar_value(loss);
    if !total.is_finite() {
        return Err(Error::Divergence {
            step: epoch * 1_000_000 + step,
            msg: format!("robust loss {total}"),
        });
    }
    let seg_value = tape.scalar_value(seg);

    let grads: Vec<Option<&[f64]>> = ids.iter().map(|&id| tape.grad(id)).collect();
    let mut params = state.robust.collect_mut();
    let mut refs: Vec<&mut Tensor> = params.iter_mut().map(|(_, t)| &mut **t).collect();
    state.adam.step(&mut refs, &grads)?;
    drop(params);

    if let Some((mean, var)) = student.bn_mask {
        state.robust.amfg_mask.update_bn(&mean, &var);
    }
    if let Some((mean, var)) = student.bn_comp {
        state.robust.amfg_comp.update_bn(&mean, &var);
    }

    Ok(StepLosses {
        total,
        mfc: mfc_value,
        tc: tc_value,
        seg: seg_value,
    })
}

/// Checkpoint path helper for the epoch-NNN files train_robust writes.
pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("robust-epoch{epoch:03}.rstn"))
}
