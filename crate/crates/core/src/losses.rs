//! Training objectives: feature/token consistency norms, soft Dice, focal,
//! and their weighted combination.
//!
//! Each objective exists in two forms: a tape-level builder used during
//! training (gradients flow), and a value-level convenience that evaluates
//! a single sample and returns the scalar.

use crate::error::Result;
use crate::tensor::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Epsilon inside the consistency norms' sqrt.
pub const NORM_EPS: f64 = 1e-12;
pub const DICE_SMOOTH: f64 = 1.0;
pub const FOCAL_GAMMA: f64 = 2.0;
pub const FOCAL_ALPHA: f64 = 0.25;

#[derive(Clone, Copy, Debug)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 20.0,
        }
    }
}

/// Student refined features/tokens alongside their frozen teacher targets
/// for one (image, prompt) pair.
#[derive(Clone, Debug)]
pub struct FeatureBundle {
    pub f_mfd: Tensor,
    pub f_cfd: Tensor,
    pub f_mfd_hat: Tensor,
    pub f_cfd_hat: Tensor,
    pub f_mfc: Tensor,
    pub f_cfc: Tensor,
    pub t_ro: Tensor,
    pub t_ro_hat: Tensor,
    pub t_oc: Tensor,
}

// ── Tape-level builders ─────────────────────────────────────────────

/// Mask feature consistency: |F_CFD_hat - F_CFC| + |F_MFD_hat - F_MFC|,
/// each an eps-guarded L2 norm divided by sqrt(element count).
pub fn mfc_loss_on(
    tape: &mut Tape,
    f_cfd_hat: NodeId,
    f_cfc: NodeId,
    f_mfd_hat: NodeId,
    f_mfc: NodeId,
    batched: bool,
) -> Result<NodeId> {
    let a = tape.norm_consistency(f_cfd_hat, f_cfc, NORM_EPS, batched)?;
    let b = tape.norm_consistency(f_mfd_hat, f_mfc, NORM_EPS, batched)?;
    tape.add(a, b)
}

/// Token consistency: |T_RO_hat - T_OC| under the same norm convention.
pub fn tc_loss_on(tape: &mut Tape, t_ro_hat: NodeId, t_oc: NodeId, batched: bool) -> Result<NodeId> {
    tape.norm_consistency(t_ro_hat, t_oc, NORM_EPS, batched)
}

pub fn dice_loss_on(tape: &mut Tape, p_prob: NodeId, g: NodeId) -> Result<NodeId> {
    tape.dice_loss(p_prob, g, DICE_SMOOTH)
}

pub fn focal_loss_on(
    tape: &mut Tape,
    logits: NodeId,
    g: NodeId,
    gamma: f64,
    alpha: f64,
) -> Result<NodeId> {
    tape.focal_loss(logits, g, gamma, alpha)
}

/// Combined segmentation loss: Dice(sigmoid(logits), G) + lambda3 * Focal.
pub fn seg_loss_on(tape: &mut Tape, logits: NodeId, g: NodeId, lambda3: f64) -> Result<NodeId> {
    let probs = tape.sigmoid(logits);
    let dice = dice_loss_on(tape, probs, g)?;
    let focal = focal_loss_on(tape, logits, g, FOCAL_GAMMA, FOCAL_ALPHA)?;
    let focal_scaled = tape.scale(focal, lambda3);
    tape.add(dice, focal_scaled)
}

/// Overall objective: MFC + lambda1 * TC + lambda2 * Seg.
pub fn overall_loss_on(
    tape: &mut Tape,
    mfc: NodeId,
    tc: NodeId,
    seg: NodeId,
    w: &LossWeights,
) -> Result<NodeId> {
    let tc_scaled = tape.scale(tc, w.lambda1);
    let seg_scaled = tape.scale(seg, w.lambda2);
    let partial = tape.add(mfc, tc_scaled)?;
    tape.add(partial, seg_scaled)
}

// ── Value-level single-sample evaluation ────────────────────────────

pub fn mfc_loss(b: &FeatureBundle) -> Result<f64> {
    let mut tape = Tape::new();
    let (cfd_hat, cfc) = (tape.constant(&b.f_cfd_hat), tape.constant(&b.f_cfc));
    let (mfd_hat, mfc) = (tape.constant(&b.f_mfd_hat), tape.constant(&b.f_mfc));
    let loss = mfc_loss_on(&mut tape, cfd_hat, cfc, mfd_hat, mfc, false)?;
    Ok(tape.scalar_value(loss))
}

pub fn tc_loss(b: &FeatureBundle) -> Result<f64> {
    let mut tape = Tape::new();
    let (hat, oc) = (tape.constant(&b.t_ro_hat), tape.constant(&b.t_oc));
    let loss = tc_loss_on(&mut tape, hat, oc, false)?;
    Ok(tape.scalar_value(loss))
}

pub fn dice_loss(p_prob: &Tensor, g: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let (p, gt) = (tape.constant(p_prob), tape.constant(g));
    let loss = dice_loss_on(&mut tape, p, gt)?;
    Ok(tape.scalar_value(loss))
}

pub fn focal_loss(logits: &Tensor, g: &Tensor, gamma: f64, alpha: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let (z, gt) = (tape.constant(logits), tape.constant(g));
    let loss = focal_loss_on(&mut tape, z, gt, gamma, alpha)?;
    Ok(tape.scalar_value(loss))
}

pub fn seg_loss(logits: &Tensor, g: &Tensor, lambda3: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let (z, gt) = (tape.constant(logits), tape.constant(g));
    let loss = seg_loss_on(&mut tape, z, gt, lambda3)?;
    Ok(tape.scalar_value(loss))
}

pub fn overall_loss(b: &FeatureBundle, logits: &Tensor, g: &Tensor, w: &LossWeights) -> Result<f64> {
    let mfc = mfc_loss(b)?;
    let tc = tc_loss(b)?;
    let seg = seg_loss(logits, g, w.lambda3)?;
    Ok(mfc + w.lambda1 * tc + w.lambda2 * seg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::tape::sigmoid_scalar;

    fn bundle_with(shapes: bool) -> FeatureBundle {
        let mut rng = Rng::new(60);
        let feat = |rng: &mut Rng| Tensor::uniform(&[4, 6, 6], -1.0, 1.0, rng);
        let tok = |rng: &mut Rng| Tensor::uniform(&[8], -1.0, 1.0, rng);
        let f_mfc = feat(&mut rng);
        let f_cfc = feat(&mut rng);
        let t_oc = tok(&mut rng);
        let _ = shapes;
        FeatureBundle {
            f_mfd: feat(&mut rng),
            f_cfd: feat(&mut rng),
            f_mfd_hat: f_mfc.clone(),
            f_cfd_hat: f_cfc.clone(),
            f_mfc,
            f_cfc,
            t_ro: tok(&mut rng),
            t_ro_hat: t_oc.clone(),
            t_oc,
        }
    }

    #[test]
    fn mfc_zero_when_refined_equals_teacher() {
        let b = bundle_with(true);
        assert!(mfc_loss(&b).unwrap() <= 2e-6);
        assert!(tc_loss(&b).unwrap() <= 1e-6);
    }

    #[test]
    fn mfc_constant_offset_closed_form() {
        let mut b = bundle_with(true);
        for v in b.f_mfd_hat.data_mut() {
            *v += 0.3;
        }
        let loss = mfc_loss(&b).unwrap();
        assert!((loss - 0.3).abs() < 1e-6, "{loss}");

        // Symmetry: the same offset on the other stream gives the same loss.
        let mut b2 = bundle_with(true);
        for v in b2.f_cfd_hat.data_mut() {
            *v += 0.3;
        }
        let loss2 = mfc_loss(&b2).unwrap();
        assert!((loss - loss2).abs() < 1e-9);
    }

    #[test]
    fn tc_one_hot_and_homogeneity() {
        let mut b = bundle_with(true);
        let t_oc = Tensor::zeros(&[64]);
        let mut hat = Tensor::zeros(&[64]);
        hat.data_mut()[7] = 0.8;
        b.t_oc = t_oc;
        b.t_ro_hat = hat;
        let loss = tc_loss(&b).unwrap();
        assert!((loss - 0.1).abs() < 1e-6, "{loss}"); // 0.8 / sqrt(64)

        for v in b.t_ro_hat.data_mut() {
            *v *= 2.0;
        }
        let doubled = tc_loss(&b).unwrap();
        assert!((doubled - 0.2).abs() < 1e-6);
    }

    #[test]
    fn dice_closed_forms() {
        // P == G binary: loss exactly 0 (the smooth terms cancel).
        let g_data: Vec<f64> = (0..100).map(|i| f64::from(i % 3 == 0)).collect();
        let g = Tensor::from_vec(vec![10, 10], g_data).unwrap();
        assert_eq!(dice_loss(&g, &g).unwrap(), 0.0);

        // P = 0 with |G| = 100: 1 - 1/101.
        let p0 = Tensor::zeros(&[20, 10]);
        let mut g100 = Tensor::zeros(&[20, 10]);
        for i in 0..100 {
            g100.data_mut()[i] = 1.0;
        }
        let loss = dice_loss(&p0, &g100).unwrap();
        assert!((loss - (1.0 - 1.0 / 101.0)).abs() < 1e-12, "{loss}");

        // P = 0.5 everywhere, G half-ones: direct formula.
        let n = 64.0;
        let p = Tensor::full(&[8, 8], 0.5);
        let mut gh = Tensor::zeros(&[8, 8]);
        for i in 0..32 {
            gh.data_mut()[i] = 1.0;
        }
        let want = 1.0 - (2.0 * (0.5 * 32.0) + 1.0) / (0.5 * n + 32.0 + 1.0);
        let got = dice_loss(&p, &gh).unwrap();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn focal_closed_forms() {
        // logit 0, G = 1, gamma 2, alpha 0.25: -0.25 * 0.25 * ln(0.5).
        let z = Tensor::zeros(&[1, 1]);
        let g = Tensor::full(&[1, 1], 1.0);
        let got = focal_loss(&z, &g, 2.0, 0.25).unwrap();
        let want = -0.25 * 0.25 * (0.5f64).ln();
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        assert!((got - 0.043321).abs() < 1e-6);

        // Saturated correct logits: loss < 1e-6.
        let mut z2 = Tensor::zeros(&[2, 2]);
        let mut g2 = Tensor::zeros(&[2, 2]);
        for i in 0..4 {
            let pos = i % 2 == 0;
            z2.data_mut()[i] = if pos { 20.0 } else { -20.0 };
            g2.data_mut()[i] = f64::from(pos);
        }
        assert!(focal_loss(&z2, &g2, 2.0, 0.25).unwrap() < 1e-6);
    }

    #[test]
    fn focal_gamma_zero_reduces_to_scaled_bce() {
        let mut rng = Rng::new(61);
        let z = Tensor::uniform(&[4, 4], -3.0, 3.0, &mut rng);
        let g_data: Vec<f64> = (0..16).map(|_| f64::from(rng.uniform() < 0.5)).collect();
        let g = Tensor::from_vec(vec![4, 4], g_data.clone()).unwrap();
        let got = focal_loss(&z, &g, 0.0, 0.5).unwrap();
        let bce: f64 = z
            .data()
            .iter()
            .zip(&g_data)
            .map(|(&zv, &gv)| {
                let p = sigmoid_scalar(zv);
                let pt = if gv > 0.5 { p } else { 1.0 - p };
                -pt.max(1e-12).ln()
            })
            .sum::<f64>()
            / 16.0;
        assert!((got - 0.5 * bce).abs() < 1e-6, "{got} vs {}", 0.5 * bce);
    }

    #[test]
    fn seg_loss_composition() {
        let mut rng = Rng::new(62);
        let z = Tensor::uniform(&[8, 8], -2.0, 2.0, &mut rng);
        let g_data: Vec<f64> = (0..64).map(|_| f64::from(rng.uniform() < 0.5)).collect();
        let g = Tensor::from_vec(vec![8, 8], g_data).unwrap();

        // lambda3 = 0 reduces to dice alone.
        let probs = Tensor::from_vec(
            vec![8, 8],
            z.data().iter().map(|&v| sigmoid_scalar(v)).collect(),
        )
        .unwrap();
        let dice_only = dice_loss(&probs, &g).unwrap();
        assert!((seg_loss(&z, &g, 0.0).unwrap() - dice_only).abs() < 1e-12);

        // Random case equals hand-summed components.
        let focal = focal_loss(&z, &g, FOCAL_GAMMA, FOCAL_ALPHA).unwrap();
        let want = dice_only + 20.0 * focal;
        assert!((seg_loss(&z, &g, 20.0).unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn overall_loss_composition() {
        let b = {
            let mut b = bundle_with(true);
            for v in b.f_mfd_hat.data_mut() {
                *v += 0.1;
            }
            for v in b.t_ro_hat.data_mut() {
                *v -= 0.2;
            }
            b
        };
        let mut rng = Rng::new(63);
        let z = Tensor::uniform(&[8, 8], -1.0, 1.0, &mut rng);
        let g_data: Vec<f64> = (0..64).map(|_| f64::from(rng.uniform() < 0.5)).collect();
        let g = Tensor::from_vec(vec![8, 8], g_data).unwrap();

        // lambda1 = lambda2 = 0 leaves the MFC term exactly.
        let w0 = LossWeights {
            lambda1: 0.0,
            lambda2: 0.0,
            lambda3: 20.0,
        };
        let got = overall_loss(&b, &z, &g, &w0).unwrap();
        assert_eq!(got, mfc_loss(&b).unwrap());

        // Weighted sum of independently computed parts.
        let w = LossWeights::default();
        let want =
            mfc_loss(&b).unwrap() + w.lambda1 * tc_loss(&b).unwrap() + w.lambda2 * seg_loss(&z, &g, w.lambda3).unwrap();
        let got = overall_loss(&b, &z, &g, &w).unwrap();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn all_perfect_is_small() {
        let b = bundle_with(true);
        let mut z = Tensor::zeros(&[4, 4]);
        let mut g = Tensor::zeros(&[4, 4]);
        for i in 0..16 {
            let pos = i < 8;
            z.data_mut()[i] = if pos { 20.0 } else { -20.0 };
            g.data_mut()[i] = f64::from(pos);
        }
        assert!(overall_loss(&b, &z, &g, &LossWeights::default()).unwrap() < 1e-4);
    }

    #[test]
    fn losses_are_non_negative() {
        let mut rng = Rng::new(64);
        for _ in 0..20 {
            let b = FeatureBundle {
                f_mfd: Tensor::uniform(&[2, 3, 3], -1.0, 1.0, &mut rng),
                f_cfd: Tensor::uniform(&[2, 3, 3], -1.0, 1.0, &mut rng),
                f_mfd_hat: Tensor::uniform(&[2, 3, 3], -1.0, 1.0, &mut rng),
                f_cfd_hat: Tensor::uniform(&[2, 3, 3], -1.0, 1.0, &mut rng),
                f_mfc: Tensor::uniform(&[2, 3, 3], -1.0, 1.0, &mut rng),
                f_cfc: Tensor::uniform(&[2, 3, 3], -1.0, 1.0, &mut rng),
                t_ro: Tensor::uniform(&[8], -1.0, 1.0, &mut rng),
                t_ro_hat: Tensor::uniform(&[8], -1.0, 1.0, &mut rng),
                t_oc: Tensor::uniform(&[8], -1.0, 1.0, &mut rng),
            };
            assert!(mfc_loss(&b).unwrap() >= 0.0);
            assert!(tc_loss(&b).unwrap() >= 0.0);
            let z = Tensor::uniform(&[4, 4], -3.0, 3.0, &mut rng);
            let g_data: Vec<f64> = (0..16).map(|_| f64::from(rng.uniform() < 0.5)).collect();
            let g = Tensor::from_vec(vec![4, 4], g_data).unwrap();
            assert!(seg_loss(&z, &g, 20.0).unwrap() >= 0.0);
        }
    }
}
