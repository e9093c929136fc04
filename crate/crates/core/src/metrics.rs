//! Evaluation metrics: IoU, Dice, pixel accuracy, threshold-averaged
//! precision with size buckets, the per-kind metric report, and the
//! silhouette statistic used for the feature-invariance analysis.

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct PixelMetrics {
    pub iou: f64,
    pub dice: f64,
    pub pa: f64,
}

/// Binary-mask metrics. Both-empty pairs score IoU = Dice = 1 by
/// convention.
pub fn pixel_metrics(pred: &[bool], gt: &[bool]) -> Result<PixelMetrics> {
    if pred.len() != gt.len() {
        return Err(Error::dimension(format!(
            "pixel_metrics: {} vs {} pixels",
            pred.len(),
            gt.len()
        )));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    let mut p_count = 0usize;
    let mut g_count = 0usize;
    let mut agree = 0usize;
    for (&p, &g) in pred.iter().zip(gt) {
        inter += usize::from(p && g);
        union += usize::from(p || g);
        p_count += usize::from(p);
        g_count += usize::from(g);
        agree += usize::from(p == g);
    }
    let iou = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
    let dice = if p_count + g_count == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (p_count + g_count) as f64
    };
    let pa = agree as f64 / pred.len() as f64;
    Ok(PixelMetrics { iou, dice, pa })
}

/// Default AP thresholds: 0.05, 0.10, ..., 0.95.
pub fn default_thresholds() -> Vec<f64> {
    (1..=19).map(|i| i as f64 * 0.05).collect()
}

/// Mean precision over thresholds; an empty prediction set at a threshold
/// counts as precision 1.
pub fn average_precision(p_prob: &[f64], gt: &[bool], thresholds: &[f64]) -> Result<f64> {
    if thresholds.is_empty() {
        return Err(Error::contract("average_precision: empty threshold list"));
    }
    if p_prob.len() != gt.len() {
        return Err(Error::dimension("average_precision: extent mismatch"));
    }
    if thresholds.windows(2).any(|w| w[0] >= w[1]) || thresholds.iter().any(|&t| !(0.0..1.0).contains(&t) || t <= 0.0)
    {
        return Err(Error::contract(
            "average_precision: thresholds must be strictly increasing in (0,1)",
        ));
    }
    let mut sum = 0.0;
    for &t in thresholds {
        let mut tp = 0usize;
        let mut fp = 0usize;
        for (&p, &g) in p_prob.iter().zip(gt) {
            if p >= t {
                if g {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
        }
        sum += if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
    }
    Ok(sum / thresholds.len() as f64)
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct ApBuckets {
    pub ap: f64,
    pub ap_s: Option<f64>,
    pub ap_m: Option<f64>,
    pub ap_l: Option<f64>,
}

/// Per-instance AP bucketed by ground-truth area fraction: S < 0.5%,
/// M in [0.5%, 5%), L >= 5% of the image area. Empty buckets stay absent.
pub fn ap_size_buckets(instances: &[(Vec<f64>, Vec<bool>)]) -> Result<ApBuckets> {
    if instances.is_empty() {
        return Err(Error::contract("ap_size_buckets: empty instance list"));
    }
    let thresholds = default_thresholds();
    let mut all = Vec::new();
    let mut small = Vec::new();
    let mut medium = Vec::new();
    let mut large = Vec::new();
    for (p, g) in instances {
        let ap = average_precision(p, g, &thresholds)?;
        let area_frac = g.iter().filter(|&&b| b).count() as f64 / g.len() as f64;
        all.push(ap);
        if area_frac < 0.005 {
            small.push(ap);
        } else if area_frac < 0.05 {
            medium.push(ap);
        } else {
            large.push(ap);
        }
    }
    let mean = |v: &[f64]| {
        if v.is_empty() {
            None
        } else {
            Some(v.iter().sum::<f64>() / v.len() as f64)
        }
    };
    Ok(ApBuckets {
        ap: mean(&all).unwrap_or(0.0),
        ap_s: mean(&small),
        ap_m: mean(&medium),
        ap_l: mean(&large),
    })
}

#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct MetricRow {
    pub iou: f64,
    pub dice: f64,
    pub pa: f64,
    pub count: usize,
}

impl MetricRow {
    pub fn accumulate(&mut self, m: &PixelMetrics) {
        self.iou += m.iou;
        self.dice += m.dice;
        self.pa += m.pa;
        self.count += 1;
    }

    pub fn mean(&self) -> MetricRow {
        if self.count == 0 {
            return *self;
        }
        let n = self.count as f64;
        MetricRow {
            iou: self.iou / n,
            dice: self.dice / n,
            pa: self.pa / n,
            count: self.count,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct ReportMeta {
    pub dataset_seed: u64,
    pub checkpoint_hash: String,
    pub prompt: String,
    pub split: String,
}

/// Per-kind table plus the weighted average row and AP block.
#[derive(Clone, Debug, Serialize)]
pub struct MetricReport {
    /// The 15 degraded kinds, in enumeration order.
    pub rows: Vec<(String, MetricRow)>,
    pub clear: MetricRow,
    pub average: MetricRow,
    pub ap: ApBuckets,
    pub meta: ReportMeta,
}

impl MetricReport {
    /// Average row convention: (16 * mean over degraded kinds + clear) / 17.
    pub fn compute_average(rows: &[(String, MetricRow)], clear: &MetricRow) -> MetricRow {
        let n = rows.len() as f64;
        let degraded_mean = |f: fn(&MetricRow) -> f64| rows.iter().map(|(_, r)| f(r)).sum::<f64>() / n;
        let combine = |d: f64, c: f64| (16.0 * d + c) / 17.0;
        MetricRow {
            iou: combine(degraded_mean(|r| r.iou), clear.iou),
            dice: combine(degraded_mean(|r| r.dice), clear.dice),
            pa: combine(degraded_mean(|r| r.pa), clear.pa),
            count: rows.iter().map(|(_, r)| r.count).sum::<usize>() + clear.count,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("row,iou,dice,pa\n");
        for (name, row) in &self.rows {
            out.push_str(&format!("{name},{:.6},{:.6},{:.6}\n", row.iou, row.dice, row.pa));
        }
        out.push_str(&format!(
            "clear,{:.6},{:.6},{:.6}\n",
            self.clear.iou, self.clear.dice, self.clear.pa
        ));
        out.push_str(&format!(
            "average,{:.6},{:.6},{:.6}\n",
            self.average.iou, self.average.dice, self.average.pa
        ));
        out
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(format!("report json: {e}")))
    }
}

/// Mean silhouette score of labeled vectors under Euclidean distance.
/// Singleton clusters and all-identical points contribute 0 (degenerate
/// convention); lower scores relative to degradation labels mean more
/// degradation-invariant features.
pub fn silhouette(samples: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if samples.len() != labels.len() || samples.is_empty() {
        return Err(Error::contract("silhouette: samples/labels mismatch"));
    }
    let distinct: std::collections::BTreeSet<usize> = labels.iter().copied().collect();
    if distinct.len() < 2 {
        return Err(Error::contract("silhouette: need at least 2 labels"));
    }
    let n = samples.len();
    let dist = |a: &[f64], b: &[f64]| {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    };
    let mut total = 0.0;
    for i in 0..n {
        let mut intra_sum = 0.0;
        let mut intra_count = 0usize;
        let mut inter: std::collections::BTreeMap<usize, (f64, usize)> = Default::default();
        for j in 0..n {
            if i == j {
                continue;
            }
            let d = dist(&samples[i], &samples[j]);
            if labels[j] == labels[i] {
                intra_sum += d;
                intra_count += 1;
            } else {
                let e = inter.entry(labels[j]).or_insert((0.0, 0));
                e.0 += d;
                e.1 += 1;
            }
        }
        if intra_count == 0 {
            continue; // singleton cluster contributes 0
        }
        let a = intra_sum / intra_count as f64;
        let b = inter
            .values()
            .map(|(s, c)| s / *c as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / n as f64)
}
