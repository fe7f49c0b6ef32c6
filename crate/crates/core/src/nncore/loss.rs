use super::{GradientTape, ModelBundle, Side};
use crate::error::{Error, Result};
use crate::pseudolabel::IGNORE;

/// Scalar loss with its gradient tape. `counted` is the number of elements
/// that contributed; `degenerate` counts zero-norm latent outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub tape: GradientTape,
    pub counted: usize,
    pub degenerate: usize,
}

fn encoder_groups(bundle: &ModelBundle, side: Side) -> std::ops::Range<usize> {
    let layout = bundle.layout();
    let start = match side {
        Side::TwoD => layout.enc2d,
        Side::ThreeD => layout.enc3d,
    };
    start..start + 2 * bundle.encoder(side).layers.len()
}

fn log_softmax_grad(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() + max - logits[target];
    let mut grad: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    grad[target] -= 1.0;
    (loss, grad)
}

/// Mean cross-entropy of the class logits `psi(head_s(enc(x)), t_l) / tau`
/// against `targets`; IGNORE targets are skipped. An all-IGNORE batch has
/// zero loss and zero gradient.
pub fn ce_loss(bundle: &ModelBundle, side: Side, descriptors: &[f64], targets: &[i32]) -> Result<LossOutput> {
    let n = bundle.check_input(side, descriptors)?;
    if targets.len() != n {
        return Err(Error::Shape(format!(
            "{} targets for {n} descriptor rows",
            targets.len()
        )));
    }
    let classes = bundle.embeddings.classes;
    if let Some(bad) = targets
        .iter()
        .find(|&&t| t != IGNORE && (t < 0 || t as usize >= classes))
    {
        return Err(Error::Shape(format!("target {bad} out of range for {classes} classes")));
    }
    let mut tape = GradientTape::zeros_like(bundle);
    let counted = targets.iter().filter(|&&t| t != IGNORE).count();
    if counted == 0 {
        return Ok(LossOutput {
            value: 0.0,
            tape,
            counted,
            degenerate: 0,
        });
    }
    let enc = bundle.encoder(side);
    let head = bundle.semantic_head(side);
    let head_group = match side {
        Side::TwoD => bundle.layout().head_s2d,
        Side::ThreeD => bundle.layout().head_s3d,
    };
    let enc_groups = encoder_groups(bundle, side);
    let inv_n = 1.0 / counted as f64;
    let tau = bundle.temperature;
    let table = &bundle.embeddings;

    let mut total = 0.0;
    let mut z = vec![0.0; head.outputs];
    for (x, &t) in descriptors.chunks_exact(enc.input_dim()).zip(targets) {
        if t == IGNORE {
            continue;
        }
        let acts = enc.forward_cached(x);
        let h = acts.last().expect("encoder output");
        head.forward(h, &mut z);
        let logits: Vec<f64> = (0..classes)
            .map(|c| z.iter().zip(table.row(c)).map(|(a, b)| a * b).sum::<f64>() / tau)
            .collect();
        let (loss, dlogits) = log_softmax_grad(&logits, t as usize);
        total += loss;

        let mut dz = vec![0.0; head.outputs];
        for (c, &g) in dlogits.iter().enumerate() {
            let scale = g * inv_n / tau;
            dz.iter_mut().zip(table.row(c)).for_each(|(d, e)| *d += scale * e);
        }
        let mut dh = vec![0.0; head.inputs];
        let (gw, gb) = tape.linear_mut(head_group);
        head.backward(h, &dz, gw, gb, Some(&mut dh));
        enc.backward(&acts, &dh, &mut tape.groups[enc_groups.clone()]);
    }
    Ok(LossOutput {
        value: total * inv_n,
        tape,
        counted,
        degenerate: 0,
    })
}

/// Mean over pairs of `(1 - cos(head_f2d(x_i), a_i)) + (1 - cos(head_f3d(p_i), a_i))`
/// with `a_i` the normalized anchor projection of the frozen feature `s_i`.
///
/// A zero-norm latent output counts as cosine 0 and contributes no gradient.
/// Gradient reaches the anchor projection only when it is trainable.
pub fn cosine_align_loss(
    bundle: &ModelBundle,
    pixel_descriptors: &[f64],
    point_descriptors: &[f64],
    anchor_features: &[f64],
) -> Result<LossOutput> {
    let n = bundle.check_input(Side::TwoD, pixel_descriptors)?;
    let n3 = bundle.check_input(Side::ThreeD, point_descriptors)?;
    let ds = bundle.anchor_head.inputs;
    if n3 != n || anchor_features.len() != n * ds {
        return Err(Error::Shape(format!(
            "alignment needs equal pair counts: {n} pixels, {n3} points, {} anchor values of width {ds}",
            anchor_features.len()
        )));
    }
    let mut tape = GradientTape::zeros_like(bundle);
    if n == 0 {
        return Ok(LossOutput {
            value: 0.0,
            tape,
            counted: 0,
            degenerate: 0,
        });
    }
    let layout = bundle.layout();
    let inv_n = 1.0 / n as f64;
    let k = bundle.anchor_head.outputs;
    let mut total = 0.0;
    let mut degenerate = 0;

    for i in 0..n {
        let s = &anchor_features[i * ds..(i + 1) * ds];
        let mut a = vec![0.0; k];
        bundle.anchor_head.forward(s, &mut a);
        let a_norm = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let a_hat: Vec<f64> = if a_norm > 0.0 {
            a.iter().map(|x| x / a_norm).collect()
        } else {
            vec![0.0; k]
        };
        let mut da = vec![0.0; k];

        for (side, desc, head_group) in [
            (
                Side::TwoD,
                &pixel_descriptors[i * bundle.enc2d.input_dim()..(i + 1) * bundle.enc2d.input_dim()],
                layout.head_f2d,
            ),
            (
                Side::ThreeD,
                &point_descriptors[i * bundle.enc3d.input_dim()..(i + 1) * bundle.enc3d.input_dim()],
                layout.head_f3d,
            ),
        ] {
            let enc = bundle.encoder(side);
            let head = bundle.latent_head(side);
            let acts = enc.forward_cached(desc);
            let h = acts.last().expect("encoder output");
            let mut u = vec![0.0; k];
            head.forward(h, &mut u);
            let u_norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
            if u_norm < 1e-12 || a_norm == 0.0 {
                degenerate += 1;
                total += 1.0;
                continue;
            }
            let cos = u.iter().zip(&a_hat).map(|(x, y)| x * y).sum::<f64>() / u_norm;
            total += 1.0 - cos;

            // d(1 - cos)/du = -(a_hat / |u| - cos u / |u|^2)
            let du: Vec<f64> = u
                .iter()
                .zip(&a_hat)
                .map(|(&ui, &ai)| -inv_n * (ai / u_norm - cos * ui / (u_norm * u_norm)))
                .collect();
            let mut dh = vec![0.0; head.inputs];
            let (gw, gb) = tape.linear_mut(head_group);
            head.backward(h, &du, gw, gb, Some(&mut dh));
            enc.backward(&acts, &dh, &mut tape.groups[encoder_groups(bundle, side)]);

            if bundle.train_anchor_head {
                // d(1 - cos)/da = -(u_hat - cos a_hat) / |a|
                for ((d, &ui), &ai) in da.iter_mut().zip(&u).zip(&a_hat) {
                    *d -= inv_n * (ui / u_norm - cos * ai) / a_norm;
                }
            }
        }
        if bundle.train_anchor_head {
            let (gw, gb) = tape.linear_mut(layout.anchor);
            bundle.anchor_head.backward(s, &da, gw, gb, None);
        }
    }
    Ok(LossOutput {
        value: total * inv_n,
        tape,
        counted: n,
        degenerate,
    })
}

/// Inputs of one training step.
#[derive(Debug, Clone, Default)]
pub struct StepBatch {
    pub pixel_descriptors: Vec<f64>,
    pub pixel_targets: Vec<i32>,
    pub point_descriptors: Vec<f64>,
    pub point_targets: Vec<i32>,
    pub pair_pixel_descriptors: Vec<f64>,
    pub pair_point_descriptors: Vec<f64>,
    pub pair_anchor_features: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CombinedLoss {
    pub ce2d: f64,
    pub ce3d: f64,
    pub align: f64,
    pub degenerate: usize,
    pub tape: GradientTape,
}

/// `ce2d + ce3d + latent_weight * align` with a single combined tape.
pub fn combined_loss(bundle: &ModelBundle, batch: &StepBatch, latent_weight: f64) -> Result<CombinedLoss> {
    let ce2d = ce_loss(bundle, Side::TwoD, &batch.pixel_descriptors, &batch.pixel_targets)?;
    let ce3d = ce_loss(bundle, Side::ThreeD, &batch.point_descriptors, &batch.point_targets)?;
    let mut tape = ce2d.tape;
    tape.add_scaled(&ce3d.tape, 1.0);
    let (align, degenerate) = if latent_weight != 0.0 && !batch.pair_anchor_features.is_empty() {
        let out = cosine_align_loss(
            bundle,
            &batch.pair_pixel_descriptors,
            &batch.pair_point_descriptors,
            &batch.pair_anchor_features,
        )?;
        tape.add_scaled(&out.tape, latent_weight);
        (out.value, out.degenerate)
    } else {
        (0.0, 0)
    };
    Ok(CombinedLoss {
        ce2d: ce2d.value,
        ce3d: ce3d.value,
        align,
        degenerate,
        tape,
    })
}
