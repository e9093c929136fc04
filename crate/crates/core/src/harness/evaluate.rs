//! Evaluation over materialized splits, the ablation ladder, and the
//! feature-invariance statistic.

use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::dataset::{self, Manifest, Prompt};
use crate::degrade::{self, DegradationKind, DegradationSpec};
use crate::error::{Error, Result};
use crate::img::RgbImage;
use crate::metrics::{
    average_precision, default_thresholds, pixel_metrics, ApBuckets, MetricReport, MetricRow,
    ReportMeta,
};
use crate::model::{images_to_tensor, TeacherParams};
use crate::rng::{derive_seed, Rng};
use crate::robust::{student_forward, AblationFlags, Mode, RobustParams};
use crate::tensor::tape::{sigmoid_scalar, Tape};

use super::config::TrainConfig;
use super::train::{train_robust, Logger};

#[derive(Clone, Copy, Debug)]
pub enum PromptPolicy {
    Points(usize),
    Box,
}

impl PromptPolicy {
    pub fn label(&self) -> String {
        match self {
            PromptPolicy::Points(n) => format!("points:{n}"),
            PromptPolicy::Box => "box".to_string(),
        }
    }

    fn sample(&self, mask: &[bool], w: usize, rng: &mut Rng) -> Result<Prompt> {
        match self {
            PromptPolicy::Points(n) => dataset::point_prompt(mask, w, *n, rng),
            PromptPolicy::Box => dataset::box_prompt(mask, w),
        }
    }
}

/// Which model runs inference during evaluation.
pub enum EvalModel<'a> {
    Teacher(&'a TeacherParams),
    Robust {
        teacher: &'a TeacherParams,
        robust: &'a RobustParams,
        flags: AblationFlags,
    },
}

impl EvalModel<'_> {
    /// Probability map (sigmoid of logits) for one image and prompt.
    fn probabilities(&self, image: &RgbImage, prompt: &Prompt) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let img = images_to_tensor(&[image])?;
        let img_id = tape.constant(&img);
        let logits = match self {
            EvalModel::Teacher(t) => {
                let (tb, _) = t.bind(&mut tape, false)?;
                tb.forward(&mut tape, img_id, std::slice::from_ref(prompt))?.logits
            }
            EvalModel::Robust { teacher, robust, flags } => {
                let (tb, _) = teacher.bind(&mut tape, false)?;
                let (rb, _) = robust.bind(&mut tape, false);
                student_forward(
                    &mut tape,
                    &tb,
                    &rb,
                    *flags,
                    img_id,
                    std::slice::from_ref(prompt),
                    Mode::Eval,
                )?
                .logits
            }
        };
        Ok(tape.data(logits).iter().map(|&v| sigmoid_scalar(v)).collect())
    }

    pub fn hash(&self) -> String {
        match self {
            EvalModel::Teacher(t) => t.content_hash(),
            EvalModel::Robust { robust, .. } => robust.content_hash(),
        }
    }
}

struct InstanceOutcome {
    kind: Option<DegradationKind>,
    metrics: crate::metrics::PixelMetrics,
    ap: f64,
    area_frac: f64,
}

/// Evaluate a model over a materialized split: every (record, variant,
/// instance) gets a ground-truth-derived prompt and a robust-path-only
/// inference. Rows cover the 15 degradation kinds; identity variants fold
/// into the clear row; the average row uses the 16:1 weighting convention.
pub fn evaluate(
    model: &EvalModel,
    root: &Path,
    manifest: &Manifest,
    split: &str,
    policy: PromptPolicy,
    seed: u64,
) -> Result<MetricReport> {
    let entries: Vec<_> = manifest.split(split).cloned().collect();
    if entries.is_empty() {
        return Err(Error::Manifest(format!("split '{split}' is empty")));
    }
    let kind_count = entries
        .iter()
        .filter(|e| e.degradation != "clear")
        .map(|e| e.degradation.split(':').next().unwrap_or("").to_string())
        .collect::<std::collections::BTreeSet<_>>()
        .len();
    if kind_count < 16 {
        return Err(Error::Manifest(format!(
            "split '{split}' is missing degraded variants ({kind_count}/16 kinds); regenerate the dataset"
        )));
    }
    let thresholds = default_thresholds();
    let outcomes: Result<Vec<Vec<InstanceOutcome>>> = entries
        .par_iter()
        .enumerate()
        .map(|(ei, entry)| {
            let record = dataset::read_record(root, entry)?;
            let kind = entry.degradation_spec()?.map(|s| s.kind);
            let mut out = Vec::with_capacity(record.masks.len());
            for (mi, mask) in record.masks.iter().enumerate() {
                let mut rng = Rng::new(derive_seed(seed, "eval-prompt", (ei * 8 + mi) as u64));
                let prompt = policy.sample(mask, record.image.w, &mut rng)?;
                let probs = model.probabilities(&record.image, &prompt)?;
                let pred: Vec<bool> = probs.iter().map(|&p| p >= 0.5).collect();
                let metrics = pixel_metrics(&pred, mask)?;
                let ap = average_precision(&probs, mask, &thresholds)?;
                let area_frac =
                    mask.iter().filter(|&&b| b).count() as f64 / mask.len() as f64;
                out.push(InstanceOutcome {
                    kind,
                    metrics,
                    ap,
                    area_frac,
                });
            }
            Ok(out)
        })
        .collect();
    let outcomes = outcomes?;

    let kinds = degrade::kinds_list();
    let mut rows: Vec<(String, MetricRow)> = kinds
        .iter()
        .filter(|k| **k != DegradationKind::Identity)
        .map(|k| (k.token().to_string(), MetricRow::default()))
        .collect();
    let mut clear_acc = MetricRow::default();
    let mut ap_all = Vec::new();
    let mut ap_small = Vec::new();
    let mut ap_medium = Vec::new();
    let mut ap_large = Vec::new();
    for instance in outcomes.iter().flatten() {
        match instance.kind {
            Some(DegradationKind::Identity) | None => clear_acc.accumulate(&instance.metrics),
            Some(kind) => {
                let idx = kinds.iter().position(|k| *k == kind).expect("known kind");
                rows[idx].1.accumulate(&instance.metrics);
            }
        }
        ap_all.push(instance.ap);
        if instance.area_frac < 0.005 {
            ap_small.push(instance.ap);
        } else if instance.area_frac < 0.05 {
            ap_medium.push(instance.ap);
        } else {
            ap_large.push(instance.ap);
        }
    }
    let rows: Vec<(String, MetricRow)> = rows
        .into_iter()
        .map(|(name, acc)| (name, acc.mean()))
        .collect();
    let clear = clear_acc.mean();
    let mean = |v: &[f64]| {
        if v.is_empty() {
            None
        } else {
            Some(v.iter().sum::<f64>() / v.len() as f64)
        }
    };
    let ap = ApBuckets {
        ap: mean(&ap_all).unwrap_or(0.0),
        ap_s: mean(&ap_small),
        ap_m: mean(&ap_medium),
        ap_l: mean(&ap_large),
    };
    Ok(MetricReport {
        average: MetricReport::compute_average(&rows, &clear),
        rows,
        clear,
        ap,
        meta: ReportMeta {
            dataset_seed: seed,
            checkpoint_hash: model.hash(),
            prompt: policy.label(),
            split: split.to_string(),
        },
    })
}

/// Mean IoU/PA over the 15 degraded rows of a report.
pub fn degraded_means(report: &MetricReport) -> (f64, f64) {
    let n = report.rows.len() as f64;
    let iou = report.rows.iter().map(|(_, r)| r.iou).sum::<f64>() / n;
    let pa = report.rows.iter().map(|(_, r)| r.pa).sum::<f64>() / n;
    (iou, pa)
}

pub const ABLATION_VARIANTS: [(&str, AblationFlags); 5] = [
    (
        "token_only",
        AblationFlags {
            use_amfg: false,
            use_fourier: false,
            use_aotg: false,
            use_rot: true,
        },
    ),
    (
        "amfg",
        AblationFlags {
            use_amfg: true,
            use_fourier: false,
            use_aotg: false,
            use_rot: false,
        },
    ),
    (
        "amfg_f",
        AblationFlags {
            use_amfg: true,
            use_fourier: true,
            use_aotg: false,
            use_rot: false,
        },
    ),
    (
        "amfg_f_aotg",
        AblationFlags {
            use_amfg: true,
            use_fourier: true,
            use_aotg: true,
            use_rot: false,
        },
    ),
    (
        "all",
        AblationFlags {
            use_amfg: true,
            use_fourier: true,
            use_aotg: true,
            use_rot: true,
        },
    ),
];

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub per_seed_iou: Vec<f64>,
    pub per_seed_pa: Vec<f64>,
    pub median_iou: f64,
    pub median_pa: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub seeds: Vec<u64>,
}

impl AblationTable {
    /// Table-shaped CSV: one row per variant, median degraded-split scores.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,iou,pa\n");
        for row in &self.rows {
            out.push_str(&format!("{},{:.6},{:.6}\n", row.variant, row.median_iou, row.median_pa));
        }
        out
    }
}

fn median(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Train and evaluate the five-variant ladder, one shared seed set. Scores
/// are degraded-split means on the test split.
pub fn ablation_run(
    root: &Path,
    teacher: &TeacherParams,
    base_cfg: &TrainConfig,
    seeds: &[u64],
    log: &mut Logger,
) -> Result<AblationTable> {
    if !teacher.frozen {
        return Err(Error::contract("ablation_run requires a trained, frozen teacher"));
    }
    let manifest = Manifest::load(root)?;
    let mut rows = Vec::new();
    for (name, flags) in ABLATION_VARIANTS {
        let mut per_seed_iou = Vec::with_capacity(seeds.len());
        let mut per_seed_pa = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut cfg = base_cfg.clone();
            cfg.seed = seed;
            cfg.flags = flags;
            log.log(&format!("ablate variant={name} seed={seed} start"));
            let (state, _) = train_robust(root, teacher, &cfg, None, None, log)?;
            let model = EvalModel::Robust {
                teacher,
                robust: &state.robust,
                flags,
            };
            let report = evaluate(
                &model,
                root,
                &manifest,
                "test",
                PromptPolicy::Points(base_cfg.prompt_points),
                seed,
            )?;
            let (iou, pa) = degraded_means(&report);
            log.log(&format!("ablate variant={name} seed={seed} iou={iou:.4} pa={pa:.4}"));
            per_seed_iou.push(iou);
            per_seed_pa.push(pa);
        }
        rows.push(AblationRow {
            variant: name.to_string(),
            median_iou: median(&per_seed_iou),
            median_pa: median(&per_seed_pa),
            per_seed_iou,
            per_seed_pa,
        });
    }
    Ok(AblationTable {
        rows,
        seeds: seeds.to_vec(),
    })
}

/// The six degradation kinds sampled for the invariance statistic: one
/// representative per corruption family.
pub const INVARIANCE_KINDS: [DegradationKind; 6] = [
    DegradationKind::Snow,
    DegradationKind::Fog,
    DegradationKind::GaussianNoise,
    DegradationKind::MotionBlur,
    DegradationKind::Compression,
    DegradationKind::LowLight,
];

#[derive(Clone, Debug, Serialize)]
pub struct InvarianceReport {
    pub silhouette_teacher: f64,
    pub silhouette_robust: f64,
    pub silhouette_no_consistency: f64,
    pub images: usize,
    pub kinds: usize,
    /// Feature-extraction spec: final mask features pooled per channel.
    pub pooling: String,
}

/// Pool a [1,C,H,W] feature to a per-channel mean vector.
fn pool_feature(tape: &Tape, id: crate::tensor::tape::NodeId) -> Vec<f64> {
    let shape = tape.shape(id);
    let (c, plane) = (shape[1], shape[2] * shape[3]);
    let data = tape.data(id);
    (0..c)
        .map(|ch| data[ch * plane..(ch + 1) * plane].iter().sum::<f64>() / plane as f64)
        .collect()
}

/// Silhouette of final mask features w.r.t. degradation-kind labels for the
/// teacher, the robust model, and the no-consistency ablation. Lower means
/// more degradation-invariant features.
pub fn invariance_report(
    root: &Path,
    manifest: &Manifest,
    teacher: &TeacherParams,
    robust: &RobustParams,
    no_consistency: &RobustParams,
    n_images: usize,
    seed: u64,
) -> Result<InvarianceReport> {
    if n_images < 2 {
        return Err(Error::contract("invariance_report: need at least 2 images"));
    }
    let records = super::train::load_clear_split(root, &manifest.clone(), "test", n_images)?;
    if records.len() < n_images {
        return Err(Error::contract(format!(
            "invariance_report: requested {n_images} images, split has {}",
            records.len()
        )));
    }
    struct Sample {
        teacher_vec: Vec<f64>,
        robust_vec: Vec<f64>,
        nc_vec: Vec<f64>,
        label: usize,
    }
    let samples: Result<Vec<Sample>> = records
        .par_iter()
        .enumerate()
        .flat_map(|(ri, rec)| {
            INVARIANCE_KINDS
                .par_iter()
                .enumerate()
                .map(move |(ki, &kind)| (ri, rec, ki, kind))
        })
        .map(|(ri, rec, ki, kind)| {
            let tag = (ri * 16 + ki) as u64;
            let spec = DegradationSpec::new(kind, 2, derive_seed(seed, "inv-degrade", tag))?;
            let (image, masks) = degrade::apply_with_masks(&rec.image, &rec.masks, &spec)?;
            let mut rng = Rng::new(derive_seed(seed, "inv-prompt", tag));
            let prompt = dataset::point_prompt(&masks[0], image.w, 1, &mut rng)?;

            let img = images_to_tensor(&[&image])?;
            // Teacher: final mask feature from the clear-path heads.
            let mut tape = Tape::new();
            let (tb, _) = teacher.bind(&mut tape, false)?;
            let img_id = tape.constant(&img);
            let t_out = tb.forward(&mut tape, img_id, std::slice::from_ref(&prompt))?;
            let teacher_vec = pool_feature(&tape, t_out.f_mfc);

            // Robust and no-consistency: fused robust mask feature.
            let pooled_robust_feature = |params: &RobustParams| -> Result<Vec<f64>> {
                let mut tape = Tape::new();
                let (tb, _) = teacher.bind(&mut tape, false)?;
                let (rb, _) = params.bind(&mut tape, false);
                let img_id = tape.constant(&img);
                let out = student_forward(
                    &mut tape,
                    &tb,
                    &rb,
                    AblationFlags::all(),
                    img_id,
                    std::slice::from_ref(&prompt),
                    Mode::Eval,
                )?;
                Ok(pool_feature(&tape, out.robust_feature.expect("amfg enabled")))
            };
            let robust_vec = pooled_robust_feature(robust)?;
            let nc_vec = pooled_robust_feature(no_consistency)?;
            Ok(Sample {
                teacher_vec,
                robust_vec,
                nc_vec,
                label: ki,
            })
        })
        .collect();
    let samples = samples?;
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let teacher_features: Vec<Vec<f64>> = samples.iter().map(|s| s.teacher_vec.clone()).collect();
    let robust_features: Vec<Vec<f64>> = samples.iter().map(|s| s.robust_vec.clone()).collect();
    let nc_features: Vec<Vec<f64>> = samples.iter().map(|s| s.nc_vec.clone()).collect();
    Ok(InvarianceReport {
        silhouette_teacher: crate::metrics::silhouette(&teacher_features, &labels)?,
        silhouette_robust: crate::metrics::silhouette(&robust_features, &labels)?,
        silhouette_no_consistency: crate::metrics::silhouette(&nc_features, &labels)?,
        images: n_images,
        kinds: INVARIANCE_KINDS.len(),
        pooling: "global average over 32 channels of the final mask feature".to_string(),
    })
}
