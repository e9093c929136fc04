//! Op-level tests: spec'd examples, closed-form cases, and
//! finite-difference gradient checks for every differentiable op.

use crate::error::Error;
use crate::rng::Rng;
use crate::tensor::gradcheck::{grad_check, GradCheckReport};
use crate::tensor::tape::{NodeId, Tape};
use crate::tensor::Tensor;

fn check<F>(closure: F, inputs: &[Tensor]) -> GradCheckReport
where
    F: Fn(&mut Tape, &[NodeId]) -> crate::error::Result<NodeId>,
{
    grad_check(closure, inputs, 1e-3, 1e-3).unwrap()
}

/// Weighted-sum head so no gradient entry degenerates to zero.
fn weighted_sum(tape: &mut Tape, x: NodeId, seed: u64) -> NodeId {
    let n = tape.data(x).len();
    let mut rng = Rng::new(seed);
    let w: Vec<f64> = (0..n).map(|_| rng.range(0.25, 1.75)).collect();
    let c = tape.constant_from(vec![n], w);
    let flat = tape.reshape(x, vec![n]).unwrap();
    let prod = tape.mul(flat, c).unwrap();
    tape.sum_all(prod)
}

// ── matmul ──────────────────────────────────────────────────────────

#[test]
fn matmul_identity_and_shape_rule() {
    let mut tape = Tape::new();
    let eye = Tensor::from_vec(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
    let mut rng = Rng::new(1);
    let b = Tensor::uniform(&[3, 3], -2.0, 2.0, &mut rng);
    let (i, bb) = (tape.constant(&eye), tape.constant(&b));
    let out = tape.matmul(i, bb).unwrap();
    assert_eq!(tape.data(out), b.data());

    let a = tape.constant(&Tensor::zeros(&[4, 3]));
    let c = tape.constant(&Tensor::zeros(&[3, 5]));
    let prod = tape.matmul(a, c).unwrap();
    assert_eq!(tape.shape(prod), &[4, 5]);
}

#[test]
fn matmul_mismatch_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(&Tensor::zeros(&[2, 3]));
    let b = tape.constant(&Tensor::zeros(&[4, 2]));
    let err = tape.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
}

#[test]
fn matmul_grad_check() {
    let mut rng = Rng::new(2);
    let a = Tensor::uniform(&[3, 4], -1.0, 1.0, &mut rng);
    let b = Tensor::uniform(&[4, 2], -1.0, 1.0, &mut rng);
    let r = check(
        |tape, ids| {
            let out = tape.matmul(ids[0], ids[1])?;
            Ok(weighted_sum(tape, out, 7))
        },
        &[a, b],
    );
    assert!(r.pass, "max_rel_err {}", r.max_rel_err);
}

// ── conv2d ──────────────────────────────────────────────────────────

#[test]
fn conv2d_one_by_one_identity() {
    // Channel-selecting unit 1x1 kernel reproduces the input.
    let mut rng = Rng::new(3);
    let x = Tensor::uniform(&[2, 5, 5], -1.0, 1.0, &mut rng);
    let mut k = Tensor::zeros(&[2, 2, 1, 1]);
    k.data_mut()[0] = 1.0; // out0 <- in0
    k.data_mut()[3] = 1.0; // out1 <- in1
    let mut tape = Tape::new();
    let (xi, ki) = (tape.constant(&x), tape.constant(&k));
    let out = tape.conv2d(xi, ki, 0, 1).unwrap();
    assert_eq!(tape.data(out), x.data());
}

#[test]
fn conv2d_impulse_spreads_to_block() {
    let mut x = Tensor::zeros(&[1, 5, 5]);
    x.data_mut()[2 * 5 + 2] = 1.0;
    let k = Tensor::full(&[1, 1, 3, 3], 1.0);
    let mut tape = Tape::new();
    let (xi, ki) = (tape.constant(&x), tape.constant(&k));
    let out = tape.conv2d(xi, ki, 1, 1).unwrap();
    let d = tape.data(out);
    for r in 0..5 {
        for c in 0..5 {
            let inside = (1..=3).contains(&r) && (1..=3).contains(&c);
            assert_eq!(d[r * 5 + c], if inside { 1.0 } else { 0.0 }, "({r},{c})");
        }
    }
}

#[test]
fn conv2d_shape_rule_and_errors() {
    let mut tape = Tape::new();
    let x = tape.constant(&Tensor::zeros(&[8, 16, 16]));
    let k = tape.constant(&Tensor::zeros(&[4, 8, 3, 3]));
    let out = tape.conv2d(x, k, 1, 1).unwrap();
    assert_eq!(tape.shape(out), &[4, 16, 16]);

    let tiny = tape.constant(&Tensor::zeros(&[1, 2, 2]));
    let big = tape.constant(&Tensor::zeros(&[1, 1, 3, 3]));
    assert!(matches!(tape.conv2d(tiny, big, 0, 1), Err(Error::Dimension(_))));
}

#[test]
fn conv2d_grad_check() {
    let mut rng = Rng::new(4);
    for (pad, stride) in [(1usize, 1usize), (1, 2), (0, 1)] {
        let x = Tensor::uniform(&[2, 2, 4, 4], -1.0, 1.0, &mut rng);
        let k = Tensor::uniform(&[3, 2, 3, 3], -1.0, 1.0, &mut rng);
        let r = check(
            move |tape, ids| {
                let out = tape.conv2d(ids[0], ids[1], pad, stride)?;
                Ok(weighted_sum(tape, out, 11))
            },
            &[x, k],
        );
        assert!(r.pass, "pad {pad} stride {stride}: {}", r.max_rel_err);
    }
}

// ── transposed conv ─────────────────────────────────────────────────

#[test]
fn tconv_shape_doubles_and_composition_quadruples() {
    let mut tape = Tape::new();
    let x = tape.constant(&Tensor::zeros(&[32, 16, 16]));
    let k1 = tape.constant(&Tensor::zeros(&[32, 48, 2, 2]));
    let up1 = tape.tconv2d(x, k1).unwrap();
    assert_eq!(tape.shape(up1), &[48, 32, 32]);
    let k2 = tape.constant(&Tensor::zeros(&[48, 8, 2, 2]));
    let up2 = tape.tconv2d(up1, k2).unwrap();
    assert_eq!(tape.shape(up2), &[8, 64, 64]);
}

#[test]
fn tconv_impulse_scatters_constant_block() {
    let mut x = Tensor::zeros(&[1, 4, 4]);
    x.data_mut()[1 * 4 + 2] = 1.0;
    let k = Tensor::full(&[1, 1, 2, 2], 0.7);
    let mut tape = Tape::new();
    let (xi, ki) = (tape.constant(&x), tape.constant(&k));
    let out = tape.tconv2d(xi, ki).unwrap();
    let d = tape.data(out);
    for r in 0..8 {
        for c in 0..8 {
            let inside = (2..=3).contains(&r) && (4..=5).contains(&c);
            assert_eq!(d[r * 8 + c], if inside { 0.7 } else { 0.0 });
        }
    }
}

#[test]
fn tconv_grad_check() {
    let mut rng = Rng::new(5);
    let x = Tensor::uniform(&[2, 3, 3, 3], -1.0, 1.0, &mut rng);
    let k = Tensor::uniform(&[3, 2, 2, 2], -1.0, 1.0, &mut rng);
    let r = check(
        |tape, ids| {
            let out = tape.tconv2d(ids[0], ids[1])?;
            Ok(weighted_sum(tape, out, 13))
        },
        &[x, k],
    );
    assert!(r.pass, "{}", r.max_rel_err);
}

// ── normalizations ──────────────────────────────────────────────────

#[test]
fn instance_norm_constant_channel_zeroes() {
    let x = Tensor::full(&[1, 4, 4], 3.25);
    let (g, b) = (Tensor::full(&[1], 1.0), Tensor::zeros(&[1]));
    let mut tape = Tape::new();
    let (xi, gi, bi) = (tape.constant(&x), tape.constant(&g), tape.constant(&b));
    let out = tape.instance_norm(xi, gi, bi, 1e-5).unwrap();
    for &v in tape.data(out) {
        assert_eq!(v, 0.0);
    }
}

#[test]
fn instance_norm_mean_and_var_property() {
    let mut rng = Rng::new(6);
    let x = Tensor::uniform(&[3, 8, 8], -2.0, 2.0, &mut rng);
    let (g, b) = (Tensor::full(&[3], 1.0), Tensor::zeros(&[3]));
    let mut tape = Tape::new();
    let (xi, gi, bi) = (tape.constant(&x), tape.constant(&g), tape.constant(&b));
    let out = tape.instance_norm(xi, gi, bi, 1e-5).unwrap();
    let d = tape.data(out);
    for c in 0..3 {
        let ch = &d[c * 64..(c + 1) * 64];
        let mean = ch.iter().sum::<f64>() / 64.0;
        let var = ch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 64.0;
        assert!(mean.abs() < 1e-5, "mean {mean}");
        assert!((var - 1.0).abs() < 1e-3, "var {var}");
    }
}

#[test]
fn instance_norm_two_element_closed_form() {
    let x = Tensor::from_vec(vec![1, 1, 2], vec![0.0, 2.0]).unwrap();
    let (g, b) = (Tensor::full(&[1], 1.0), Tensor::zeros(&[1]));
    let mut tape = Tape::new();
    let (xi, gi, bi) = (tape.constant(&x), tape.constant(&g), tape.constant(&b));
    let out = tape.instance_norm(xi, gi, bi, 1e-12).unwrap();
    let d = tape.data(out);
    assert!((d[0] + 1.0).abs() < 1e-5);
    assert!((d[1] - 1.0).abs() < 1e-5);
}

#[test]
fn instance_norm_grad_check() {
    let mut rng = Rng::new(7);
    let x = Tensor::uniform(&[2, 3, 4, 4], -1.0, 1.0, &mut rng);
    let g = Tensor::uniform(&[3], 0.5, 1.5, &mut rng);
    let b = Tensor::uniform(&[3], -0.5, 0.5, &mut rng);
    let r = check(
        |tape, ids| {
            let out = tape.instance_norm(ids[0], ids[1], ids[2], 1e-5)?;
            Ok(weighted_sum(tape, out, 17))
        },
        &[x, g, b],
    );
    assert!(r.pass, "{}", r.max_rel_err);
}

#[test]
fn batch_norm_train_statistics_and_two_constant_images() {
    // Batch mean property.
    let mut rng = Rng::new(8);
    let x = Tensor::uniform(&[4, 2, 3, 3], -2.0, 2.0, &mut rng);
    let (g, b) = (Tensor::full(&[2], 1.0), Tensor::zeros(&[2]));
    let mut tape = Tape::new();
    let (xi, gi, bi) = (tape.constant(&x), tape.constant(&g), tape.constant(&b));
    let (out, mean, var) = tape.batch_norm_train(xi, gi, bi, 1e-5).unwrap();
    let d = tape.data(out);
    for c in 0..2 {
        let mut s = 0.0;
        for n in 0..4 {
            s += d[(n * 2 + c) * 9..(n * 2 + c + 1) * 9].iter().sum::<f64>();
        }
        assert!((s / 36.0).abs() < 1e-5);
    }
    assert_eq!(mean.len(), 2);
    assert_eq!(var.len(), 2);

    // Two constant images c1, c2 normalize to -1 / +1 patterns.
    let mut x2 = Tensor::zeros(&[2, 1, 2, 2]);
    for i in 0..4 {
        x2.data_mut()[i] = 1.0; // image 1 = 1.0
        x2.data_mut()[4 + i] = 5.0; // image 2 = 5.0
    }
    let (g1, b1) = (Tensor::full(&[1], 1.0), Tensor::zeros(&[1]));
    let mut t2 = Tape::new();
    let (xi2, gi2, bi2) = (t2.constant(&x2), t2.constant(&g1), t2.constant(&b1));
    let (out2, _, _) = t2.batch_norm_train(xi2, gi2, bi2, 1e-12).unwrap();
    let d2 = t2.data(out2);
    for i in 0..4 {
        assert!((d2[i] + 1.0).abs() < 1e-5);
        assert!((d2[4 + i] - 1.0).abs() < 1e-5);
    }
}

#[test]
fn batch_norm_eval_is_pure() {
    let mut rng = Rng::new(9);
    let x = Tensor::uniform(&[2, 2, 3, 3], -1.0, 1.0, &mut rng);
    let (g, b) = (Tensor::full(&[2], 1.0), Tensor::zeros(&[2]));
    let rm = vec![0.1, -0.2];
    let rv = vec![0.9, 1.1];
    let run = || {
        let mut tape = Tape::new();
        let (xi, gi, bi) = (tape.constant(&x), tape.constant(&g), tape.constant(&b));
        let out = tape.batch_norm_eval(xi, gi, bi, &rm, &rv, 1e-5).unwrap();
        tape.data(out).to_vec()
    };
    assert_eq!(run(), run());
}

#[test]
fn batch_norm_train_grad_check() {
    let mut rng = Rng::new(10);
    let x = Tensor::uniform(&[2, 2, 3, 3], -1.0, 1.0, &mut rng);
    let g = Tensor::uniform(&[2], 0.5, 1.5, &mut rng);
    let b = Tensor::uniform(&[2], -0.5, 0.5, &mut rng);
    let r = check(
        |tape, ids| {
            let (out, _, _) = tape.batch_norm_train(ids[0], ids[1], ids[2], 1e-5)?;
            Ok(weighted_sum(tape, out, 19))
        },
        &[x, g, b],
    );
    assert!(r.pass, "{}", r.max_rel_err);
}

#[test]
fn layer_norm_grad_check() {
    let mut rng = Rng::new(11);
    let x = Tensor::uniform(&[3, 6], -1.0, 1.0, &mut rng);
    let g = Tensor::uniform(&[6], 0.5, 1.5, &mut rng);
    let b = Tensor::uniform(&[6], -0.5, 0.5, &mut rng);
    let r = check(
        |tape, ids| {
            let out = tape.layer_norm(ids[0], ids[1], ids[2], 1e-5)?;
            Ok(weighted_sum(tape, out, 23))
        },
        &[x, g, b],
    );
    assert!(r.pass, "{}", r.max_rel_err);
}

// ── frequency domain ────────────────────────────────────────────────

#[test]
fn to_frequency_constant_image_is_dc_only() {
    let c = 0.37;
    let x = Tensor::full(&[2, 8, 8], c);
    let mut tape = Tape::new();
    let xi = tape.constant(&x);
    let (amp, phase) = tape.to_frequency(xi).unwrap();
    let a = tape.data(amp);
    for ch in 0..2 {
        assert!((a[ch * 64] - 64.0 * c).abs() < 1e-9);
        for i in 1..64 {
            assert!(a[ch * 64 + i] < 1e-4);
        }
    }
    let p = tape.data(phase);
    for &v in p {
        assert!(v > -std::f64::consts::PI - 1e-12 && v <= std::f64::consts::PI + 1e-12);
    }
}

#[test]
fn parseval_equality() {
    let mut rng = Rng::new(12);
    let x = Tensor::uniform(&[1, 16, 16], -3.0, 3.0, &mut rng);
    let mut tape = Tape::new();
    let xi = tape.constant(&x);
    let (amp, _) = tape.to_frequency(xi).unwrap();
    let spatial: f64 = x.data().iter().map(|v| v * v).sum();
    let spectral: f64 = tape.data(amp).iter().map(|v| v * v).sum::<f64>() / 256.0;
    assert!((spatial - spectral).abs() / spatial.abs() < 1e-5);
}

#[test]
fn frequency_round_trip_identity() {
    let mut rng = Rng::new(13);
    let x = Tensor::uniform(&[3, 16, 8], -10.0, 10.0, &mut rng);
    let mut tape = Tape::new();
    let xi = tape.constant(&x);
    let (amp, phase) = tape.to_frequency(xi).unwrap();
    let back = tape.from_frequency(amp, phase).unwrap();
    let d = tape.data(back);
    for (a, b) in d.iter().zip(x.data()) {
        assert!((a - b).abs() < 1e-5, "{a} vs {b}");
    }
}

#[test]
fn from_frequency_zero_and_linearity() {
    let mut rng = Rng::new(14);
    let zero = Tensor::zeros(&[1, 8, 8]);
    let phase = Tensor::uniform(&[1, 8, 8], -3.0, 3.0, &mut rng);
    let mut tape = Tape::new();
    let (zi, pi) = (tape.constant(&zero), tape.constant(&phase));
    let out = tape.from_frequency(zi, pi).unwrap();
    assert!(tape.data(out).iter().all(|&v| v == 0.0));

    let amp = Tensor::uniform(&[1, 8, 8], 0.0, 2.0, &mut rng);
    let ai = tape.constant(&amp);
    let one = tape.from_frequency(ai, pi).unwrap();
    let a2 = tape.scale(ai, 2.0);
    let two = tape.from_frequency(a2, pi).unwrap();
    for (x1, x2) in tape.data(one).to_vec().iter().zip(tape.data(two)) {
        assert!((2.0 * x1 - x2).abs() < 1e-9);
    }
}

#[test]
fn from_frequency_rejects_negative_amplitude() {
    let mut tape = Tape::new();
    let amp = tape.constant(&Tensor::full(&[1, 4, 4], -0.5));
    let phase = tape.constant(&Tensor::zeros(&[1, 4, 4]));
    assert!(matches!(tape.from_frequency(amp, phase), Err(Error::Domain(_))));
}

#[test]
fn to_frequency_rejects_non_power_of_two() {
    let mut tape = Tape::new();
    let x = tape.constant(&Tensor::zeros(&[1, 6, 8]));
    assert!(matches!(tape.to_frequency(x), Err(Error::Dimension(_))));
}

#[test]
fn amplitude_grad_check() {
    let mut rng = Rng::new(15);
    let x = Tensor::uniform(&[2, 4, 4], -1.0, 1.0, &mut rng);
    let r = check(
        |tape, ids| {
            let (amp, _) = tape.to_frequency(ids[0])?;
            Ok(weighted_sum(tape, amp, 29))
        },
        &[x],
    );
    assert!(r.pass, "{}", r.max_rel_err);
}

#[test]
fn from_frequency_grad_check() {
    // Gradient w.r.t. amplitude only; phase is a detached constant by
    // contract, so it stays out of the differentiated input set.
    let mut rng = Rng::new(16);
    let amp = Tensor::uniform(&[1, 4, 4], 0.5, 2.0, &mut rng);
    let phase = Tensor::uniform(&[1, 4, 4], -2.0, 2.0, &mut rng);
    let r = check(
        move |tape, ids| {
            let ph = tape.constant(&phase);
            let out = tape.from_frequency(ids[0], ph)?;
            Ok(weighted_sum(tape, out, 31))
        },
        &[amp],
    );
    assert!(r.pass, "{}", r.max_rel_err);
}

// ── softmax & activations ───────────────────────────────────────────

#[test]
fn softmax_closed_forms() {
    let x = Tensor::from_vec(vec![2], vec![0.0, (3.0f64).ln()]).unwrap();
    let mut tape = Tape::new();
    let xi = tape.constant(&x);
    let out = tape.softmax(xi, 0).unwrap();
    let d = tape.data(out);
    assert!((d[0] - 0.25).abs() < 1e-9);
    assert!((d[1] - 0.75).abs() < 1e-9);

    let u = Tensor::full(&[5], 1.3);
    let ui = tape.constant(&u);
    let out_u = tape.softmax(ui, 0).unwrap();
    for &v in tape.data(out_u) {
        assert!((v - 0.2).abs() < 1e-9);
    }
}

#[test]
fn softmax_shift_invariance_and_sum() {
    let mut rng = Rng::new(17);
    let x = Tensor::uniform(&[3, 7], -4.0, 4.0, &mut rng);
    let mut shifted = x.clone();
    for v in shifted.data_mut() {
        *v += 11.5;
    }
    let mut tape = Tape::new();
    let (a, b) = (tape.constant(&x), tape.constant(&shifted));
    let sa = tape.softmax(a, 1).unwrap();
    let sb = tape.softmax(b, 1).unwrap();
    for (u, v) in tape.data(sa).to_vec().iter().zip(tape.data(sb)) {
        assert!((u - v).abs() < 1e-6);
    }
    for row in tape.data(sa).chunks(7) {
        let s: f64 = row.iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
        assert!(row.iter().all(|&v| v > 0.0));
    }
}

#[test]
fn softmax_grad_check() {
    let mut rng = Rng::new(18);
    let x = Tensor::uniform(&[2, 5], -1.0, 1.0, &mut rng);
    let r = check(
        |tape, ids| {
            let out = tape.softmax(ids[0], 1)?;
            Ok(weighted_sum(tape, out, 37))
        },
        &[x],
    );
    assert!(r.pass, "{}", r.max_rel_err);
}

#[test]
fn activation_closed_forms() {
    let x = Tensor::from_vec(vec![4], vec![-1.0, 2.0, 0.0, (3.0f64).ln()]).unwrap();
    let mut tape = Tape::new();
    let xi = tape.constant(&x);
    let r = tape.relu(xi);
    assert_eq!(tape.data(r), &[0.0, 2.0, 0.0, (3.0f64).ln()]);
    let s = tape.sigmoid(xi);
    let sd = tape.data(s);
    assert!((sd[2] - 0.5).abs() < 1e-12);
    assert!((sd[3] - 0.75).abs() < 1e-9);
}

#[test]
fn activation_grad_checks() {
    // Keep relu inputs away from the kink at zero: the finite-difference
    // oracle itself is invalid within h of the fold.
    let mut rng = Rng::new(19);
    let data: Vec<f64> = (0..24)
        .map(|_| {
            let v = rng.range(0.05, 1.0);
            if rng.uniform() < 0.5 {
                -v
            } else {
                v
            }
        })
        .collect();
    let x = Tensor::from_vec(vec![24], data).unwrap();
    for kind in 0..3 {
        let r = check(
            move |tape, ids| {
                let y = match kind {
                    0 => tape.relu(ids[0]),
                    1 => tape.sigmoid(ids[0]),
                    _ => tape.gelu(ids[0]),
                };
                Ok(weighted_sum(tape, y, 41))
            },
            &[x.clone()],
        );
        assert!(r.pass, "kind {kind}: {}", r.max_rel_err);
    }
}

// ── pooling / resize / reorganization ───────────────────────────────

#[test]
fn adaptive_pool_global_and_identity() {
    let mut rng = Rng::new(20);
    let x = Tensor::uniform(&[2, 4, 4], -1.0, 1.0, &mut rng);
    let mut tape = Tape::new();
    let xi = tape.constant(&x);
    let g = tape.adaptive_avg_pool(xi, 1, 1).unwrap();
    for c in 0..2 {
        let want = x.data()[c * 16..(c + 1) * 16].iter().sum::<f64>() / 16.0;
        assert!((tape.data(g)[c] - want).abs() < 1e-12);
    }
    let id = tape.adaptive_avg_pool(xi, 4, 4).unwrap();
    assert_eq!(tape.data(id), x.data());
}

#[test]
fn adaptive_pool_ramp_window_means() {
    // 4x4 ramp pooled to 2x2: each output is the mean of its 2x2 window.
    let x = Tensor::from_vec(vec![1, 4, 4], (0..16).map(|i| i as f64).collect()).unwrap();
    let mut tape = Tape::new();
    let xi = tape.constant(&x);
    let out = tape.adaptive_avg_pool(xi, 2, 2).unwrap();
    let d = tape.data(out);
    // brute-force window means
    let want = [
        (0.0 + 1.0 + 4.0 + 5.0) / 4.0,
        (2.0 + 3.0 + 6.0 + 7.0) / 4.0,
        (8.0 + 9.0 + 12.0 + 13.0) / 4.0,
        (10.0 + 11.0 + 14.0 + 15.0) / 4.0,
    ];
    for (a, b) in d.iter().zip(&want) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn pool_upsample_concat_slice_grad_checks() {
    let mut rng = Rng::new(21);
    let x = Tensor::uniform(&[1, 2, 4, 4], -1.0, 1.0, &mut rng);
    let r = check(
        |tape, ids| {
            let out = tape.adaptive_avg_pool(ids[0], 3, 2)?;
            Ok(weighted_sum(tape, out, 43))
        },
        &[x.clone()],
    );
    assert!(r.pass, "pool: {}", r.max_rel_err);

    let r = check(
        |tape, ids| {
            let out = tape.upsample_bilinear(ids[0], 7, 9)?;
            Ok(weighted_sum(tape, out, 47))
        },
        &[x.clone()],
    );
    assert!(r.pass, "upsample: {}", r.max_rel_err);

    let y = Tensor::uniform(&[1, 3, 4, 4], -1.0, 1.0, &mut rng);
    let r = check(
        |tape, ids| {
            let out = tape.concat_channels(ids[0], ids[1])?;
            Ok(weighted_sum(tape, out, 53))
        },
        &[x.clone(), y],
    );
    assert!(r.pass, "concat: {}", r.max_rel_err);

    let toks = Tensor::uniform(&[2, 3, 4], -1.0, 1.0, &mut rng);
    let r = check(
        |tape, ids| {
            let t = tape.slice_token(ids[0], 1)?;
            Ok(weighted_sum(tape, t, 59))
        },
        &[toks],
    );
    assert!(r.pass, "slice: {}", r.max_rel_err);
}

// ── attention ───────────────────────────────────────────────────────

#[test]
fn attention_grad_check() {
    let mut rng = Rng::new(22);
    let q = Tensor::uniform(&[2, 3, 8], -1.0, 1.0, &mut rng);
    let k = Tensor::uniform(&[2, 5, 8], -1.0, 1.0, &mut rng);
    let v = Tensor::uniform(&[2, 5, 8], -1.0, 1.0, &mut rng);
    let r = check(
        |tape, ids| {
            let out = tape.attention(ids[0], ids[1], ids[2], 2)?;
            Ok(weighted_sum(tape, out, 61))
        },
        &[q, k, v],
    );
    assert!(r.pass, "{}", r.max_rel_err);
}

#[test]
fn attention_uniform_when_keys_equal() {
    // Identical keys give uniform attention: output = mean of values.
    let mut rng = Rng::new(23);
    let q = Tensor::uniform(&[1, 1, 4], -1.0, 1.0, &mut rng);
    let mut k = Tensor::zeros(&[1, 3, 4]);
    for i in 0..3 {
        for j in 0..4 {
            k.data_mut()[i * 4 + j] = 0.5;
        }
    }
    let v = Tensor::uniform(&[1, 3, 4], -1.0, 1.0, &mut rng);
    let mut tape = Tape::new();
    let (qi, ki, vi) = (tape.constant(&q), tape.constant(&k), tape.constant(&v));
    let out = tape.attention(qi, ki, vi, 1).unwrap();
    for j in 0..4 {
        let mean = (v.data()[j] + v.data()[4 + j] + v.data()[8 + j]) / 3.0;
        assert!((tape.data(out)[j] - mean).abs() < 1e-12);
    }
}

// ── heads & fused losses ────────────────────────────────────────────

#[test]
fn channel_dot_hand_case_and_grad() {
    // dim-2 classifier on a 2x2 feature: manual dot products.
    let f = Tensor::from_vec(vec![1, 2, 2, 2], vec![1., 2., 3., 4., 5., 6., 7., 8.]).unwrap();
    let w = Tensor::from_vec(vec![1, 2], vec![0.5, -1.0]).unwrap();
    let mut tape = Tape::new();
    let (fi, wi) = (tape.constant(&f), tape.constant(&w));
    let out = tape.channel_dot(fi, wi).unwrap();
    let d = tape.data(out);
    assert_eq!(d, &[0.5 * 1. - 5., 0.5 * 2. - 6., 0.5 * 3. - 7., 0.5 * 4. - 8.]);

    let mut rng = Rng::new(24);
    let f = Tensor::uniform(&[2, 3, 2, 2], -1.0, 1.0, &mut rng);
    let w = Tensor::uniform(&[2, 3], -1.0, 1.0, &mut rng);
    let r = check(
        |tape, ids| {
            let out = tape.channel_dot(ids[0], ids[1])?;
            Ok(weighted_sum(tape, out, 67))
        },
        &[f, w],
    );
    assert!(r.pass, "{}", r.max_rel_err);
}

#[test]
fn loss_grad_checks() {
    let mut rng = Rng::new(25);
    // dice: probabilities strictly inside (0,1) so the FD probe stays valid.
    let p = Tensor::uniform(&[2, 4, 4], 0.1, 0.9, &mut rng);
    let g_data: Vec<f64> = (0..32).map(|_| f64::from(rng.uniform() < 0.4)).collect();
    let g = Tensor::from_vec(vec![2, 4, 4], g_data).unwrap();
    let g2 = g.clone();
    let r = check(
        move |tape, ids| {
            let gt = tape.constant(&g2);
            tape.dice_loss(ids[0], gt, 1.0)
        },
        &[p],
    );
    assert!(r.pass, "dice: {}", r.max_rel_err);

    let logits = Tensor::uniform(&[2, 4, 4], -2.0, 2.0, &mut rng);
    let g3 = g.clone();
    let r = check(
        move |tape, ids| {
            let gt = tape.constant(&g3);
            tape.focal_loss(ids[0], gt, 2.0, 0.25)
        },
        &[logits],
    );
    assert!(r.pass, "focal: {}", r.max_rel_err);

    let a = Tensor::uniform(&[2, 3, 3], -1.0, 1.0, &mut rng);
    let b = Tensor::uniform(&[2, 3, 3], -1.0, 1.0, &mut rng);
    let r = check(
        |tape, ids| tape.norm_consistency(ids[0], ids[1], 1e-12, true),
        &[a, b],
    );
    assert!(r.pass, "norm: {}", r.max_rel_err);
}

// ── backward contracts ──────────────────────────────────────────────

#[test]
fn backward_sum_gives_ones() {
    let mut rng = Rng::new(26);
    let x = Tensor::uniform(&[3, 4], -1.0, 1.0, &mut rng).requires_grad(true);
    let mut tape = Tape::new();
    let xi = tape.leaf(&x);
    let s = tape.sum_all(xi);
    tape.backward(s).unwrap();
    assert!(tape.grad(xi).unwrap().iter().all(|&v| v == 1.0));
}

#[test]
fn backward_relu_all_negative_gives_zeros() {
    let x = Tensor::from_vec(vec![4], vec![-0.5, -1.0, -2.0, -0.1])
        .unwrap()
        .requires_grad(true);
    let mut tape = Tape::new();
    let xi = tape.leaf(&x);
    let y = tape.relu(xi);
    let s = tape.sum_all(y);
    tape.backward(s).unwrap();
    assert!(tape.grad(xi).unwrap().iter().all(|&v| v == 0.0));
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let x = Tensor::zeros(&[2, 2]).requires_grad(true);
    let mut tape = Tape::new();
    let xi = tape.leaf(&x);
    assert!(matches!(tape.backward(xi), Err(Error::Contract(_))));
}

#[test]
fn leaves_off_path_have_no_gradient() {
    let x = Tensor::zeros(&[2]).requires_grad(true);
    let y = Tensor::zeros(&[2]).requires_grad(true);
    let mut tape = Tape::new();
    let xi = tape.leaf(&x);
    let yi = tape.leaf(&y);
    let s = tape.sum_all(xi);
    tape.backward(s).unwrap();
    assert!(tape.grad(yi).is_none());
    let _ = yi;
}

#[test]
fn forward_determinism_bitwise() {
    let mut rng = Rng::new(27);
    let x = Tensor::uniform(&[2, 3, 8, 8], -1.0, 1.0, &mut rng);
    let k = Tensor::uniform(&[4, 3, 3, 3], -1.0, 1.0, &mut rng);
    let run = || {
        let mut tape = Tape::new();
        let (xi, ki) = (tape.constant(&x), tape.constant(&k));
        let c = tape.conv2d(xi, ki, 1, 1).unwrap();
        let a = tape.gelu(c);
        let (amp, ph) = tape.to_frequency(a).unwrap();
        let back = tape.from_frequency(amp, ph).unwrap();
        tape.data(back).to_vec()
    };
    let (r1, r2) = (run(), run());
    assert!(r1.iter().zip(&r2).all(|(a, b)| a.to_bits() == b.to_bits()));
}
