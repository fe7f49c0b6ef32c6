//! Seeded finite-difference sweep over both losses, shared by the CLI and
//! the acceptance tests.

use rand::Rng;

use super::{
    ce_loss, cosine_align_loss, grad_check, random_unit_rows, GradCheckReport, Mlp, ModelBundle, ModelConfig, Side,
};
use crate::error::Result;
use crate::pseudolabel::IGNORE;
use crate::scenesynth::{mock_text_embeddings, TextEmbeddingConfig};
use crate::seed;

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteCheck {
    /// `ce2d`, `ce3d` or `align`.
    pub loss: &'static str,
    pub batch: usize,
    pub report: GradCheckReport,
}

const CLASSES: usize = 6;

fn suite_config() -> ModelConfig {
    ModelConfig {
        pixel_dim: 4,
        point_dim: 5,
        hidden: vec![6],
        feature_dim: 5,
        latent_dim: 3,
        anchor_dim: 4,
        temperature: 1.0,
        train_anchor_head: false,
    }
}

/// Uniform rows in [-1, 1) whose hidden pre-activations all stay `margin`
/// away from the ReLU kink, so central differences never straddle it.
fn smooth_rows(mlp: &Mlp, n: usize, margin: f64, rng: &mut impl Rng) -> Vec<f64> {
    let dim = mlp.input_dim();
    let mut out = Vec::with_capacity(n * dim);
    while out.len() < n * dim {
        let row: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let acts = mlp.forward_cached(&row);
        let hidden = &mlp.layers[..mlp.layers.len() - 1];
        let clear = hidden.iter().zip(&acts).all(|(layer, input)| {
            let mut z = vec![0.0; layer.outputs];
            layer.forward(input, &mut z);
            z.iter().all(|v| v.abs() > margin)
        });
        if clear {
            out.extend(row);
        }
    }
    out
}

/// Runs `batches` seeded batches; each checks `ce_loss` on both sides and
/// `cosine_align_loss` with the anchor projection frozen.
pub fn gradcheck_suite(seed: u64, batches: usize, eps: f64) -> Result<Vec<SuiteCheck>> {
    let text = TextEmbeddingConfig {
        max_coherence: 1.0,
        ..Default::default()
    };
    let mut out = Vec::with_capacity(3 * batches);
    for b in 0..batches {
        let mut rng = seed::rng(seed, "gradcheck", b as u64);
        let embeddings = mock_text_embeddings(CLASSES, 8, rng.random(), &text)?;
        let mut bundle = ModelBundle::new(&suite_config(), embeddings, rng.random())?;
        // Zero-initialized biases let a dead hidden layer emit an exactly zero
        // latent, where the cosine loss jumps. Check at a generic point instead.
        let biases: Vec<usize> = bundle
            .group_names()
            .iter()
            .enumerate()
            .filter(|(_, n)| n.ends_with(".bias"))
            .map(|(g, _)| g)
            .collect();
        for g in biases {
            bundle.groups_mut()[g]
                .iter_mut()
                .for_each(|v| *v = rng.random_range(-0.5..0.5));
        }
        let n = 8;
        let margin = 100.0 * eps;
        let x = smooth_rows(&bundle.enc2d, n, margin, &mut rng);
        let p = smooth_rows(&bundle.enc3d, n, margin, &mut rng);
        let targets: Vec<i32> = (0..n)
            .map(|i| {
                if i == 5 {
                    IGNORE
                } else {
                    rng.random_range(0..CLASSES as i32)
                }
            })
            .collect();
        let anchors = random_unit_rows(n, 4, &mut rng);

        let ce2d = grad_check(|m| ce_loss(m, Side::TwoD, &x, &targets), &bundle, eps)?;
        let ce3d = grad_check(|m| ce_loss(m, Side::ThreeD, &p, &targets), &bundle, eps)?;
        let align = grad_check(|m| cosine_align_loss(m, &x, &p, &anchors), &bundle, eps)?;
        for (loss, report) in [("ce2d", ce2d), ("ce3d", ce3d), ("align", align)] {
            out.push(SuiteCheck { loss, batch: b, report });
        }
    }
    Ok(out)
}
