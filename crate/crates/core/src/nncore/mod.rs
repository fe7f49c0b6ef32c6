//! Small dense encoders, linear heads, the supervision losses and plain SGD.
//!
//! Everything runs in `f64`. Gradients are accumulated element by element in
//! input order, so a batch always reduces in the same order.

mod checkpoint;
mod layers;
mod loss;
mod suite;

use rand::Rng;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
pub use layers::{Linear, Mlp};
pub use loss::{ce_loss, combined_loss, cosine_align_loss, CombinedLoss, LossOutput, StepBatch};
pub use suite::{gradcheck_suite, SuiteCheck};

use crate::error::{Error, Result};
use crate::scenesynth::ClassEmbeddingTable;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    TwoD,
    ThreeD,
}

/// Arithmetic mode of a training run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    /// Parameters and gradients in f64 throughout.
    #[default]
    Wide,
    /// Parameters rounded to f32 after every update, matching checkpoint storage.
    Single,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub pixel_dim: usize,
    pub point_dim: usize,
    /// Hidden widths of both encoders.
    pub hidden: Vec<usize>,
    /// Encoder output width.
    pub feature_dim: usize,
    /// Output width of the latent heads and the anchor projection.
    pub latent_dim: usize,
    /// Width of the frozen anchor features.
    pub anchor_dim: usize,
    pub temperature: f64,
    pub train_anchor_head: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.pixel_dim,
            self.point_dim,
            self.feature_dim,
            self.latent_dim,
            self.anchor_dim,
        ];
        if dims.iter().chain(&self.hidden).any(|&d| d == 0) {
            return Err(Error::Config("model widths must be positive".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        Ok(())
    }
}

/// Both encoders, their semantic and latent heads, the frozen anchor
/// projection and the frozen class embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub enc2d: Mlp,
    pub enc3d: Mlp,
    pub head_s2d: Linear,
    pub head_s3d: Linear,
    pub head_f2d: Linear,
    pub head_f3d: Linear,
    pub anchor_head: Linear,
    pub embeddings: ClassEmbeddingTable,
    pub temperature: f64,
    pub train_anchor_head: bool,
}

/// Index of the first parameter group of every component; a `Linear` at
/// group `g` owns groups `g` (weight) and `g + 1` (bias).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub enc2d: usize,
    pub enc3d: usize,
    pub head_s2d: usize,
    pub head_s3d: usize,
    pub head_f2d: usize,
    pub head_f3d: usize,
    pub anchor: usize,
    pub total: usize,
}

impl ModelBundle {
    pub fn new(config: &ModelConfig, embeddings: ClassEmbeddingTable, init_seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(init_seed, "model-init", 0);
        let widths = |input: usize| -> Vec<usize> {
            std::iter::once(input)
                .chain(config.hidden.iter().copied())
                .chain(std::iter::once(config.feature_dim))
                .collect()
        };
        let enc2d = Mlp::random(&widths(config.pixel_dim), &mut rng);
        let enc3d = Mlp::random(&widths(config.point_dim), &mut rng);
        let d = config.feature_dim;
        let bundle = ModelBundle {
            enc2d,
            enc3d,
            head_s2d: Linear::random(d, embeddings.dim, 1.0, &mut rng),
            head_s3d: Linear::random(d, embeddings.dim, 1.0, &mut rng),
            head_f2d: Linear::random(d, config.latent_dim, 1.0, &mut rng),
            head_f3d: Linear::random(d, config.latent_dim, 1.0, &mut rng),
            anchor_head: Linear::random(config.anchor_dim, config.latent_dim, 1.0, &mut rng),
            embeddings,
            temperature: config.temperature,
            train_anchor_head: config.train_anchor_head,
        };
        Ok(bundle)
    }

    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            pixel_dim: self.enc2d.input_dim(),
            point_dim: self.enc3d.input_dim(),
            hidden: self.enc2d.layers[..self.enc2d.layers.len() - 1]
                .iter()
                .map(|l| l.outputs)
                .collect(),
            feature_dim: self.enc2d.output_dim(),
            latent_dim: self.head_f2d.outputs,
            anchor_dim: self.anchor_head.inputs,
            temperature: self.temperature,
            train_anchor_head: self.train_anchor_head,
        }
    }

    pub fn layout(&self) -> Layout {
        let enc2d = 0;
        let enc3d = enc2d + 2 * self.enc2d.layers.len();
        let head_s2d = enc3d + 2 * self.enc3d.layers.len();
        Layout {
            enc2d,
            enc3d,
            head_s2d,
            head_s3d: head_s2d + 2,
            head_f2d: head_s2d + 4,
            head_f3d: head_s2d + 6,
            anchor: head_s2d + 8,
            total: head_s2d + 10,
        }
    }

    fn linears(&self) -> Vec<&Linear> {
        self.enc2d
            .layers
            .iter()
            .chain(&self.enc3d.layers)
            .chain([
                &self.head_s2d,
                &self.head_s3d,
                &self.head_f2d,
                &self.head_f3d,
                &self.anchor_head,
            ])
            .collect()
    }

    fn linears_mut(&mut self) -> Vec<&mut Linear> {
        self.enc2d
            .layers
            .iter_mut()
            .chain(self.enc3d.layers.iter_mut())
            .chain([
                &mut self.head_s2d,
                &mut self.head_s3d,
                &mut self.head_f2d,
                &mut self.head_f3d,
                &mut self.anchor_head,
            ])
            .collect()
    }

    /// Parameter groups in declaration order: every encoder layer, then the
    /// four heads, then the anchor projection; weight before bias.
    pub fn groups(&self) -> Vec<&[f64]> {
        self.linears()
            .into_iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn groups_mut(&mut self) -> Vec<&mut Vec<f64>> {
        self.linears_mut()
            .into_iter()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn group_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (prefix, mlp) in [("enc2d", &self.enc2d), ("enc3d", &self.enc3d)] {
            for i in 0..mlp.layers.len() {
                names.push(format!("{prefix}.{i}.weight"));
                names.push(format!("{prefix}.{i}.bias"));
            }
        }
        for head in ["head_s2d", "head_s3d", "head_f2d", "head_f3d", "anchor_head"] {
            names.push(format!("{head}.weight"));
            names.push(format!("{head}.bias"));
        }
        names
    }

    pub fn is_trainable(&self, group: usize) -> bool {
        let anchor = self.layout().anchor;
        self.train_anchor_head || !(group == anchor || group == anchor + 1)
    }

    pub fn parameter_count(&self) -> usize {
        self.groups().iter().map(|g| g.len()).sum()
    }

    pub fn encoder(&self, side: Side) -> &Mlp {
        match side {
            Side::TwoD => &self.enc2d,
            Side::ThreeD => &self.enc3d,
        }
    }

    pub fn semantic_head(&self, side: Side) -> &Linear {
        match side {
            Side::TwoD => &self.head_s2d,
            Side::ThreeD => &self.head_s3d,
        }
    }

    pub fn latent_head(&self, side: Side) -> &Linear {
        match side {
            Side::TwoD => &self.head_f2d,
            Side::ThreeD => &self.head_f3d,
        }
    }

    fn check_input(&self, side: Side, descriptors: &[f64]) -> Result<usize> {
        let dim = self.encoder(side).input_dim();
        if descriptors.len() % dim != 0 {
            return Err(Error::Shape(format!(
                "{} descriptor values are not a multiple of the {side:?} input width {dim}",
                descriptors.len()
            )));
        }
        Ok(descriptors.len() / dim)
    }

    /// Class logits `psi(head(enc(x)), t_l) / tau` for every descriptor row.
    pub fn logits(&self, side: Side, descriptors: &[f64]) -> Result<Vec<f64>> {
        self.check_input(side, descriptors)?;
        let enc = self.encoder(side);
        let head = self.semantic_head(side);
        let l = self.embeddings.classes;
        let mut out = Vec::with_capacity(descriptors.len() / enc.input_dim() * l);
        let mut z = vec![0.0; head.outputs];
        for x in descriptors.chunks_exact(enc.input_dim()) {
            let h = enc.forward(x);
            head.forward(&h, &mut z);
            for c in 0..l {
                let dot: f64 = z.iter().zip(self.embeddings.row(c)).map(|(a, b)| a * b).sum();
                out.push(dot / self.temperature);
            }
        }
        Ok(out)
    }

    /// Argmax class per descriptor row, ties to the lowest class.
    pub fn predict(&self, side: Side, descriptors: &[f64]) -> Result<Vec<i32>> {
        let logits = self.logits(side, descriptors)?;
        Ok(crate::pseudolabel::argmax_rows(&logits, self.embeddings.classes))
    }

    /// Latent-head outputs for every descriptor row.
    pub fn latent(&self, side: Side, descriptors: &[f64]) -> Result<Vec<f64>> {
        self.check_input(side, descriptors)?;
        let enc = self.encoder(side);
        let head = self.latent_head(side);
        let mut out = vec![0.0; descriptors.len() / enc.input_dim() * head.outputs];
        for (x, y) in descriptors
            .chunks_exact(enc.input_dim())
            .zip(out.chunks_exact_mut(head.outputs))
        {
            head.forward(&enc.forward(x), y);
        }
        Ok(out)
    }

    /// Normalized anchor projections of frozen feature rows.
    pub fn anchors(&self, features: &[f64]) -> Result<Vec<f64>> {
        let d = self.anchor_head.inputs;
        if features.len() % d != 0 {
            return Err(Error::Shape(format!("anchor features are not rows of width {d}")));
        }
        let k = self.anchor_head.outputs;
        let mut out = vec![0.0; features.len() / d * k];
        for (s, a) in features.chunks_exact(d).zip(out.chunks_exact_mut(k)) {
            self.anchor_head.forward(s, a);
            let n = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 0.0 {
                a.iter_mut().for_each(|x| *x /= n);
            }
        }
        Ok(out)
    }
}

pub fn forward_2d(bundle: &ModelBundle, pixel_descriptors: &[f64]) -> Result<Vec<f64>> {
    bundle.check_input(Side::TwoD, pixel_descriptors)?;
    Ok(bundle.enc2d.forward_rows(pixel_descriptors))
}

pub fn forward_3d(bundle: &ModelBundle, point_descriptors: &[f64]) -> Result<Vec<f64>> {
    bundle.check_input(Side::ThreeD, point_descriptors)?;
    Ok(bundle.enc3d.forward_rows(point_descriptors))
}

/// Gradients mirroring `ModelBundle::groups`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientTape {
    pub groups: Vec<Vec<f64>>,
}

impl GradientTape {
    pub fn zeros_like(bundle: &ModelBundle) -> Self {
        GradientTape {
            groups: bundle.groups().iter().map(|g| vec![0.0; g.len()]).collect(),
        }
    }

    /// Weight and bias gradients of the `Linear` starting at `group`.
    pub fn linear_mut(&mut self, group: usize) -> (&mut [f64], &mut [f64]) {
        let (w, rest) = self.groups[group..].split_at_mut(1);
        (&mut w[0], &mut rest[0])
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &GradientTape, scale: f64) {
        for (a, b) in self.groups.iter_mut().zip(&other.groups) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += scale * y);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.groups.iter_mut().flatten().for_each(|x| *x *= factor);
    }

    pub fn is_finite(&self) -> bool {
        self.groups.iter().flatten().all(|x| x.is_finite())
    }

    pub fn max_abs(&self, group: usize) -> f64 {
        self.groups[group].iter().fold(0.0, |m, x| m.max(x.abs()))
    }
}

/// Plain SGD on every trainable group; frozen groups are never touched.
pub fn sgd_step(bundle: &mut ModelBundle, tape: &GradientTape, lr: f64) -> Result<()> {
    sgd_step_with(bundle, tape, lr, Precision::Wide)
}

pub fn sgd_step_with(bundle: &mut ModelBundle, tape: &GradientTape, lr: f64, precision: Precision) -> Result<()> {
    if tape.groups.len() != bundle.layout().total {
        return Err(Error::Shape("gradient tape does not match the model".into()));
    }
    if !tape.is_finite() {
        let names = bundle.group_names();
        let bad = tape
            .groups
            .iter()
            .position(|g| g.iter().any(|x| !x.is_finite()))
            .unwrap_or(0);
        return Err(Error::NonFinite(format!("gradient of {}", names[bad])));
    }
    let trainable: Vec<bool> = (0..tape.groups.len()).map(|g| bundle.is_trainable(g)).collect();
    for ((params, grads), train) in bundle.groups_mut().into_iter().zip(&tape.groups).zip(trainable) {
        if !train {
            continue;
        }
        for (p, g) in params.iter_mut().zip(grads) {
            *p -= lr * g;
            if precision == Precision::Single {
                *p = f64::from(*p as f32);
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_group: String,
    /// Largest analytic gradient magnitude on a frozen group.
    pub frozen_grad_max: f64,
    pub checked: usize,
}

/// Central finite differences against the analytic tape on every trainable
/// parameter: `max |a - n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check<F>(loss: F, bundle: &ModelBundle, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&ModelBundle) -> Result<LossOutput>,
{
    let analytic = loss(bundle)?.tape;
    let names = bundle.group_names();
    let mut probe = bundle.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_group: String::new(),
        frozen_grad_max: 0.0,
        checked: 0,
    };
    for (g, grads) in analytic.groups.iter().enumerate() {
        if !bundle.is_trainable(g) {
            report.frozen_grad_max = report.frozen_grad_max.max(analytic.max_abs(g));
            continue;
        }
        for (i, &a) in grads.iter().enumerate() {
            let original = probe.groups()[g][i];
            probe.groups_mut()[g][i] = original + eps;
            let plus = loss(&probe)?.value;
            probe.groups_mut()[g][i] = original - eps;
            let minus = loss(&probe)?.value;
            probe.groups_mut()[g][i] = original;
            let n = (plus - minus) / (2.0 * eps);
            let err = (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_group = names[g].clone();
            }
        }
    }
    Ok(report)
}

/// Random unit-norm rows, handy for tests and synthetic anchors.
pub fn random_unit_rows(rows: usize, dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    use rand_distr::{Distribution, StandardNormal};
    (0..rows)
        .flat_map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(move |x| x / n)
        })
        .collect()
}

#[cfg(test)]
mod tests;
