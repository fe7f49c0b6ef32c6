use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::scenesynth::{mock_text_embeddings, TextEmbeddingConfig};

fn config() -> ModelConfig {
    ModelConfig {
        pixel_dim: 4,
        point_dim: 5,
        hidden: vec![7],
        feature_dim: 6,
        latent_dim: 3,
        anchor_dim: 4,
        temperature: 1.0,
        train_anchor_head: false,
    }
}

fn table(classes: usize, dim: usize, orthogonalize: bool) -> ClassEmbeddingTable {
    let cfg = TextEmbeddingConfig {
        orthogonalize,
        max_coherence: 1.0,
        ..Default::default()
    };
    mock_text_embeddings(classes, dim, 1, &cfg).unwrap()
}

fn bundle(seed: u64) -> ModelBundle {
    ModelBundle::new(&config(), table(8, 8, false), seed).unwrap()
}

fn rows(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect()
}

#[test]
fn zero_weights_give_zero_features() {
    let mut b = bundle(0);
    b.enc2d = Mlp::zeros(&[4, 7, 6]);
    b.enc3d = Mlp::zeros(&[5, 7, 6]);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    assert!(forward_2d(&b, &rows(3, 4, &mut rng)).unwrap().iter().all(|&x| x == 0.0));
    assert!(forward_3d(&b, &rows(3, 5, &mut rng)).unwrap().iter().all(|&x| x == 0.0));
}

#[test]
fn identity_layer_passes_input_through() {
    let mut b = bundle(0);
    b.enc2d = Mlp {
        layers: vec![Linear::identity(4)],
    };
    b.enc3d = Mlp {
        layers: vec![Linear::identity(5)],
    };
    let x = vec![0.5, -1.0, 2.0, 0.25];
    assert_eq!(forward_2d(&b, &x).unwrap(), x);
    let p = vec![1.0, 2.0, -3.0, 0.0, 4.5];
    assert_eq!(forward_3d(&b, &p).unwrap(), p);
}

/// Straight-line re-evaluation of an MLP from its raw matrices.
fn reference_forward(mlp: &Mlp, x: &[f64]) -> Vec<f64> {
    let mut a = x.to_vec();
    for (i, l) in mlp.layers.iter().enumerate() {
        let mut y = Vec::with_capacity(l.outputs);
        for o in 0..l.outputs {
            let mut s = l.bias[o];
            for j in 0..l.inputs {
                s += l.weight[o * l.inputs + j] * a[j];
            }
            y.push(if i + 1 < mlp.layers.len() && s < 0.0 { 0.0 } else { s });
        }
        a = y;
    }
    a
}

#[test]
fn forward_matches_reference_path() {
    let b = bundle(42);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rows(5, 4, &mut rng);
    let got = forward_2d(&b, &x).unwrap();
    let expected: Vec<f64> = x.chunks(4).flat_map(|r| reference_forward(&b.enc2d, r)).collect();
    assert_eq!(got, expected);
    let p = rows(5, 5, &mut rng);
    let got = forward_3d(&b, &p).unwrap();
    let expected: Vec<f64> = p.chunks(5).flat_map(|r| reference_forward(&b.enc3d, r)).collect();
    assert_eq!(got, expected);
}

#[test]
fn forward_rejects_wrong_width() {
    let b = bundle(0);
    assert!(forward_2d(&b, &[1.0, 2.0, 3.0]).is_err());
}

#[test]
fn uniform_logits_cost_log_classes() {
    let mut b = bundle(3);
    b.head_s2d = Linear::zeros(6, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rows(1, 4, &mut rng);
    let out = ce_loss(&b, Side::TwoD, &x, &[5]).unwrap();
    assert!((out.value - 8f64.ln()).abs() < 1e-12);
    assert!((out.value - 2.0794).abs() < 1e-4);
    let x = rows(4, 4, &mut rng);
    let out = ce_loss(&b, Side::TwoD, &x, &[0, 1, 2, 3]).unwrap();
    assert!((out.value - 8f64.ln()).abs() < 1e-12);
}

#[test]
fn softmax_rows_sum_to_one() {
    let b = bundle(4);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let logits = b.logits(Side::ThreeD, &rows(10, 5, &mut rng)).unwrap();
    for row in logits.chunks(8) {
        let max = row.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = row.iter().map(|z| (z - max).exp()).collect();
        let s: f64 = e.iter().sum();
        assert!((e.iter().map(|x| x / s).sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn large_margin_drives_loss_to_zero() {
    let mut b = ModelBundle::new(&config(), table(8, 8, true), 5).unwrap();
    let target = 3;
    b.head_s2d = Linear::zeros(6, 8);
    b.head_s2d.bias = b.embeddings.row(target).iter().map(|t| 50.0 * t).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let out = ce_loss(&b, Side::TwoD, &rows(2, 4, &mut rng), &[target as i32, target as i32]).unwrap();
    assert!(out.value >= 0.0 && out.value < 1e-6, "{}", out.value);
}

#[test]
fn all_ignore_batch_is_zero() {
    let b = bundle(6);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let out = ce_loss(&b, Side::ThreeD, &rows(3, 5, &mut rng), &[IGNORE; 3]).unwrap();
    assert_eq!(out.value, 0.0);
    assert!(out.tape.groups.iter().flatten().all(|&g| g == 0.0));
}

#[test]
fn ce_rejects_out_of_range_targets() {
    let b = bundle(6);
    assert!(ce_loss(&b, Side::TwoD, &[0.0; 4], &[8]).is_err());
    assert!(ce_loss(&b, Side::TwoD, &[0.0; 4], &[1, 2]).is_err());
}

use crate::pseudolabel::IGNORE;

#[test]
fn ce_gradient_matches_finite_differences() {
    for seed in 0..3 {
        let b = bundle(10 + seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rows(16, 4, &mut rng);
        let t: Vec<i32> = (0..16)
            .map(|i| if i % 7 == 3 { IGNORE } else { rng.random_range(0..8) })
            .collect();
        let report = grad_check(|m| ce_loss(m, Side::TwoD, &x, &t), &b, 1e-5).unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
        let p = rows(16, 5, &mut rng);
        let report = grad_check(|m| ce_loss(m, Side::ThreeD, &p, &t), &b, 1e-5).unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}

fn align_batch(n: usize, seed: u64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (
        rows(n, 4, &mut rng),
        rows(n, 5, &mut rng),
        random_unit_rows(n, 4, &mut rng),
    )
}

#[test]
fn cosine_gradient_matches_finite_differences_and_anchor_is_frozen() {
    let b = bundle(20);
    let (x, p, s) = align_batch(12, 20);
    let report = grad_check(|m| cosine_align_loss(m, &x, &p, &s), &b, 1e-5).unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
    assert_eq!(report.frozen_grad_max, 0.0);
}

#[test]
fn trainable_anchor_gradient_matches_finite_differences() {
    let mut b = bundle(21);
    b.train_anchor_head = true;
    let (x, p, s) = align_batch(12, 21);
    let report = grad_check(|m| cosine_align_loss(m, &x, &p, &s), &b, 1e-5).unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
    let out = cosine_align_loss(&b, &x, &p, &s).unwrap();
    assert!(out.tape.max_abs(b.layout().anchor) > 0.0);
}

/// Bundle whose latent heads emit a fixed vector regardless of input.
fn constant_latent(sign: f64) -> (ModelBundle, Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut b = bundle(30);
    let (x, p, _) = align_batch(5, 30);
    let s: Vec<f64> = [0.3, -0.2, 0.9, 0.1].repeat(5);
    let a = b.anchors(&s[..4]).unwrap();
    for head in [&mut b.head_f2d, &mut b.head_f3d] {
        *head = Linear::zeros(6, 3);
        head.bias = a.iter().map(|v| sign * 2.5 * v).collect();
    }
    (b, x, p, s)
}

#[test]
fn aligned_latents_cost_nothing() {
    let (b, x, p, s) = constant_latent(1.0);
    let out = cosine_align_loss(&b, &x, &p, &s).unwrap();
    assert!(out.value.abs() < 1e-12);
}

#[test]
fn anti_aligned_latents_cost_four() {
    let (b, x, p, s) = constant_latent(-1.0);
    let out = cosine_align_loss(&b, &x, &p, &s).unwrap();
    assert!((out.value - 4.0).abs() < 1e-12);
}

#[test]
fn zero_latent_counts_as_orthogonal() {
    let mut b = bundle(31);
    b.head_f2d = Linear::zeros(6, 3);
    let (x, p, s) = align_batch(4, 31);
    let out = cosine_align_loss(&b, &x, &p, &s).unwrap();
    assert_eq!(out.degenerate, 4);
    let g = b.layout().head_f2d;
    assert_eq!(out.tape.max_abs(g), 0.0);
    assert_eq!(out.tape.max_abs(g + 1), 0.0);
}

#[test]
fn alignment_ignores_anchor_scale() {
    let b = bundle(32);
    let (x, p, s) = align_batch(6, 32);
    let base = cosine_align_loss(&b, &x, &p, &s).unwrap().value;
    let mut scaled = b.clone();
    scaled.anchor_head.weight.iter_mut().for_each(|w| *w *= 7.5);
    let again = cosine_align_loss(&scaled, &x, &p, &s).unwrap().value;
    assert!((base - again).abs() < 1e-12);
    assert!((0.0..=4.0).contains(&base));
}

#[test]
fn alignment_rejects_unequal_counts() {
    let b = bundle(33);
    let (x, p, s) = align_batch(4, 33);
    assert!(cosine_align_loss(&b, &x, &p[..15], &s).is_err());
}

#[test]
fn zero_tape_leaves_bundle_unchanged() {
    let mut b = bundle(40);
    let before = b.clone();
    sgd_step(&mut b, &GradientTape::zeros_like(&before), 0.1).unwrap();
    assert_eq!(b, before);
}

#[test]
fn scalar_sgd_arithmetic() {
    let mut b = bundle(41);
    let g = b.layout().head_s2d + 1;
    b.groups_mut()[g][0] = 1.0;
    let mut tape = GradientTape::zeros_like(&b);
    tape.groups[g][0] = 0.5;
    sgd_step(&mut b, &tape, 0.1).unwrap();
    assert!((b.groups()[g][0] - 0.95).abs() < 1e-15);
}

#[test]
fn frozen_anchor_survives_steps() {
    let mut b = bundle(42);
    let anchor = b.anchor_head.clone();
    let mut tape = GradientTape::zeros_like(&b);
    tape.groups.iter_mut().flatten().for_each(|g| *g = 0.3);
    for _ in 0..5 {
        sgd_step(&mut b, &tape, 0.1).unwrap();
    }
    assert_eq!(b.anchor_head, anchor);
    assert_ne!(b.head_f2d, bundle(42).head_f2d);
}

#[test]
fn non_finite_gradient_aborts_without_update() {
    let mut b = bundle(43);
    let before = b.clone();
    let mut tape = GradientTape::zeros_like(&b);
    tape.groups[0][0] = 0.1;
    tape.groups[3][1] = f64::NAN;
    let err = sgd_step(&mut b, &tape, 0.1).unwrap_err();
    assert!(err.is_numerical());
    assert_eq!(b, before);
}

#[test]
fn single_precision_rounds_parameters() {
    let mut b = bundle(44);
    let mut tape = GradientTape::zeros_like(&b);
    tape.groups.iter_mut().flatten().for_each(|g| *g = 1e-3 / 3.0);
    sgd_step_with(&mut b, &tape, 0.1, Precision::Single).unwrap();
    for (g, group) in b.groups().iter().enumerate() {
        if b.is_trainable(g) {
            assert!(group.iter().all(|&x| f64::from(x as f32) == x));
        }
    }
}

#[test]
fn linear_loss_is_exact_under_finite_differences() {
    let b = bundle(50);
    let report = grad_check(
        |m| {
            let mut tape = GradientTape::zeros_like(m);
            let mut value = 0.0;
            for (g, params) in m.groups().iter().enumerate() {
                if m.is_trainable(g) {
                    value += params.iter().sum::<f64>();
                    tape.groups[g].iter_mut().for_each(|x| *x = 1.0);
                }
            }
            Ok(LossOutput {
                value,
                tape,
                counted: 1,
                degenerate: 0,
            })
        },
        &b,
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-10, "{report:?}");
}

#[test]
fn checkpoint_round_trip_and_validation() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let mut b = bundle(60);
    // values representable in f32 survive exactly
    for g in b.groups_mut() {
        g.iter_mut().for_each(|x| *x = f64::from(*x as f32));
    }
    b.embeddings.rows.iter_mut().for_each(|x| *x = f64::from(*x as f32));
    let ckpt = Checkpoint {
        bundle: b,
        seed: 60,
        config_hash: "abc123".into(),
    };
    write_checkpoint(&path, &ckpt).unwrap();
    assert_eq!(read_checkpoint(&path).unwrap(), ckpt);

    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(read_checkpoint(&path), Err(Error::Format { .. })));

    let text = String::from_utf8_lossy(&bytes).replacen("CNSCKPT v1", "CNSCKPT v9", 1);
    std::fs::write(&path, text.as_bytes()).unwrap();
    assert!(matches!(read_checkpoint(&path), Err(Error::Version { .. })));
}
