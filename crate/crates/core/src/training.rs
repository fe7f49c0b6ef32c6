//! The two-stage schedule: warm-up on refined oracle labels, then co-training
//! with random label-source switching. Latent alignment runs alongside both.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::eval::{confusion, miou};
use crate::geometry::CorrespondenceSet;
use crate::nncore::{combined_loss, sgd_step_with, ModelBundle, ModelConfig, Precision, Side, StepBatch};
use crate::pseudolabel::{
    argmax_index, merge_entries_to_points, pull_back, refine_entries, refine_points_per_view, TransferRule,
};
use crate::scenesynth::{
    pixel_descriptor_dim, pixel_descriptors, point_descriptor_dim, point_descriptors, ClassEmbeddingTable,
    OracleOutputs, RenderedScene, Scene,
};
use crate::seed;

/// How CLIP labels reach the points before 3D supervision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Refine3dMode {
    /// Transfer raw labels, then vote per view inside the transferred masks.
    #[default]
    TransferMasks,
    /// Transfer the already refined pixel labels.
    Reproject,
}

impl Refine3dMode {
    pub fn name(self) -> &'static str {
        match self {
            Refine3dMode::TransferMasks => "transfer-masks",
            Refine3dMode::Reproject => "reproject",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "transfer-masks" => Some(Refine3dMode::TransferMasks),
            "reproject" => Some(Refine3dMode::Reproject),
            _ => None,
        }
    }
}

/// Frozen features feeding the latent anchor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AnchorSource {
    #[default]
    Sam,
    /// The oracle's class-score vector, a space not built for instances.
    Clip,
}

impl AnchorSource {
    pub fn name(self) -> &'static str {
        match self {
            AnchorSource::Sam => "sam",
            AnchorSource::Clip => "clip",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sam" => Some(AnchorSource::Sam),
            "clip" => Some(AnchorSource::Clip),
            _ => None,
        }
    }
}

/// A pseudo-label source in the stage-2 draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Source {
    Clip2d,
    Clip3d,
    Self2d,
    Self3d,
}

impl Source {
    pub const ALL: [Source; 4] = [Source::Clip2d, Source::Clip3d, Source::Self2d, Source::Self3d];

    pub fn name(self) -> &'static str {
        match self {
            Source::Clip2d => "clip2d",
            Source::Clip3d => "clip3d",
            Source::Self2d => "self2d",
            Source::Self3d => "self3d",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Whether labels from this source come from the other modality.
    pub fn is_cross(self, side: Side) -> bool {
        matches!(
            (self, side),
            (Source::Clip3d | Source::Self3d, Side::TwoD) | (Source::Clip2d | Source::Self2d, Side::ThreeD)
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub stage1_epochs: usize,
    pub total_epochs: usize,
    pub lr: f64,
    pub batch_pixels: usize,
    pub batch_points: usize,
    /// Stage-2 probabilities of clip2d, clip3d, self2d, self3d.
    pub switch_probs: [f64; 4],
    /// Off: each network only draws from sources of its own modality.
    pub cross_training: bool,
    /// Draw a source per element instead of per mini-batch.
    pub per_element_switching: bool,
    pub latent_loss_weight: f64,
    pub latent_in_stage1: bool,
    /// Off: labels skip in-mask voting everywhere.
    pub refine: bool,
    pub refine3d_mode: Refine3dMode,
    pub transfer_rule: TransferRule,
    pub anchor_source: AnchorSource,
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub latent_dim: usize,
    pub temperature: f64,
    pub train_anchor_head: bool,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage1_epochs: 10,
            total_epochs: 30,
            lr: 0.1,
            batch_pixels: 64,
            batch_points: 64,
            switch_probs: [0.25; 4],
            cross_training: true,
            per_element_switching: false,
            latent_loss_weight: 1.0,
            latent_in_stage1: true,
            refine: true,
            refine3d_mode: Refine3dMode::TransferMasks,
            transfer_rule: TransferRule::LowestCamera,
            anchor_source: AnchorSource::Sam,
            hidden: vec![32, 32],
            feature_dim: 32,
            latent_dim: 16,
            temperature: 1.0,
            train_anchor_head: false,
            seed: 0,
            precision: Precision::Wide,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.stage1_epochs > self.total_epochs {
            return bad(format!(
                "stage1_epochs {} exceeds total_epochs {}",
                self.stage1_epochs, self.total_epochs
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch_pixels == 0 || self.batch_points == 0 {
            return bad("batch sizes must be >= 1".into());
        }
        if self.switch_probs.iter().any(|p| !(*p >= 0.0)) {
            return bad(format!(
                "switch probabilities must be non-negative, got {:?}",
                self.switch_probs
            ));
        }
        let sum: f64 = self.switch_probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return bad(format!("switch probabilities sum to {sum}, not 1"));
        }
        if !(self.latent_loss_weight >= 0.0 && self.latent_loss_weight.is_finite()) {
            return bad("latent_loss_weight must be non-negative".into());
        }
        if self.total_epochs > self.stage1_epochs {
            for side in [Side::TwoD, Side::ThreeD] {
                self.side_probs(side)?;
            }
        }
        Ok(())
    }

    /// Stage-2 draw probabilities for one network after masking cross-modal
    /// sources when cross-training is off.
    pub fn side_probs(&self, side: Side) -> Result<[f64; 4]> {
        let mut p = self.switch_probs;
        if !self.cross_training {
            for s in Source::ALL {
                if s.is_cross(side) {
                    p[s.index()] = 0.0;
                }
            }
        }
        let sum: f64 = p.iter().sum();
        if sum <= 0.0 {
            return Err(Error::Config(format!(
                "no stage-2 label source left for the {side:?} network"
            )));
        }
        Ok(p.map(|x| x / sum))
    }

    fn model_config(&self, data: &TrainData) -> ModelConfig {
        ModelConfig {
            pixel_dim: data.pixel_dim,
            point_dim: data.point_dim,
            hidden: self.hidden.clone(),
            feature_dim: self.feature_dim,
            latent_dim: self.latent_dim,
            anchor_dim: data.anchor_dim,
            temperature: self.temperature,
            train_anchor_head: self.train_anchor_head,
        }
    }
}

/// Per-scene training inputs, all indexed by correspondence entry or point.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainData {
    pub classes: usize,
    pub corr: CorrespondenceSet,
    pub point_count: usize,
    pub pixel_dim: usize,
    pub point_dim: usize,
    pub anchor_dim: usize,
    pub pixel_descriptors: Vec<f64>,
    pub point_descriptors: Vec<f64>,
    pub anchor_features: Vec<f64>,
    pub entry_masks: Vec<u32>,
    /// Unrefined oracle argmax of every entry.
    pub raw_entries: Vec<i32>,
    pub gt_entries: Vec<i32>,
    pub gt_points: Vec<i32>,
    pub entry_objects: Vec<u32>,
    /// Points with at least one correspondence, ascending.
    pub paired_points: Vec<u32>,
    pub embeddings: ClassEmbeddingTable,
}

impl TrainData {
    pub fn new(scene: &Scene, rendered: &RenderedScene, oracles: &OracleOutputs, anchor: AnchorSource) -> Result<Self> {
        scene.validate()?;
        oracles.validate(scene)?;
        let corr = rendered.corr.clone();
        let n = scene.cloud.len();
        if n == 0 || corr.is_empty() {
            return Err(Error::Shape(format!(
                "cannot train on {n} points with {} correspondences",
                corr.len()
            )));
        }
        let at = |e: &crate::geometry::Correspondence| (e.v * scene.cameras[e.camera as usize].width + e.u) as usize;
        let raw_entries = corr
            .entries
            .iter()
            .map(|e| argmax_index(oracles.scores[e.camera as usize].pixel(at(e))) as i32)
            .collect();
        let anchor_features: Vec<f64> = corr
            .entries
            .iter()
            .flat_map(|e| {
                let k = e.camera as usize;
                match anchor {
                    AnchorSource::Sam => oracles.features[k].pixel(at(e)),
                    AnchorSource::Clip => oracles.scores[k].pixel(at(e)),
                }
                .iter()
                .map(|&x| f64::from(x))
                .collect::<Vec<_>>()
            })
            .collect();
        let anchor_dim = match anchor {
            AnchorSource::Sam => oracles.features[0].dim,
            AnchorSource::Clip => scene.classes,
        };
        let gt = scene.gt_labels();
        let objects = scene.object_ids();
        let mut seen = vec![false; n];
        corr.entries.iter().for_each(|e| seen[e.point as usize] = true);
        let channels = scene.appearance.channels;
        let mut pixel_rows = pixel_descriptors(scene, rendered);
        let mut point_rows = point_descriptors(scene);
        standardize(&mut pixel_rows, pixel_descriptor_dim(channels));
        standardize(&mut point_rows, point_descriptor_dim(channels));
        Ok(TrainData {
            classes: scene.classes,
            point_count: n,
            pixel_dim: pixel_descriptor_dim(channels),
            point_dim: point_descriptor_dim(channels),
            anchor_dim,
            pixel_descriptors: pixel_rows,
            point_descriptors: point_rows,
            anchor_features,
            entry_masks: crate::pseudolabel::entry_masks(&corr, &oracles.masks),
            raw_entries,
            gt_entries: corr.entries.iter().map(|e| gt[e.point as usize] as i32).collect(),
            gt_points: gt.iter().map(|&g| g as i32).collect(),
            entry_objects: corr.entries.iter().map(|e| objects[e.point as usize]).collect(),
            paired_points: (0..n as u32).filter(|&p| seen[p as usize]).collect(),
            embeddings: oracles.embeddings.clone(),
            corr,
        })
    }

    fn pixel_rows(&self, entries: &[u32]) -> Vec<f64> {
        gather(&self.pixel_descriptors, self.pixel_dim, entries)
    }

    fn point_rows(&self, points: &[u32]) -> Vec<f64> {
        gather(&self.point_descriptors, self.point_dim, points)
    }
}

/// Rescales every column to zero mean and unit variance over the scene;
/// constant columns are only centered.
pub fn standardize(rows: &mut [f64], dim: usize) {
    let n = (rows.len() / dim).max(1) as f64;
    for c in 0..dim {
        let mean = rows.iter().skip(c).step_by(dim).sum::<f64>() / n;
        let var = rows
            .iter()
            .skip(c)
            .step_by(dim)
            .map(|x| (x - mean).powi(2))
            .sum::<f64>()
            / n;
        let scale = if var > 1e-12 { 1.0 / var.sqrt() } else { 1.0 };
        rows.iter_mut()
            .skip(c)
            .step_by(dim)
            .for_each(|x| *x = (*x - mean) * scale);
    }
}

fn gather(rows: &[f64], dim: usize, index: &[u32]) -> Vec<f64> {
    index
        .iter()
        .flat_map(|&i| &rows[i as usize * dim..(i as usize + 1) * dim])
        .copied()
        .collect()
}

/// One label source seen from both sides of the correspondence set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceLabels {
    pub per_entry: Vec<i32>,
    pub per_point: Vec<i32>,
}

fn from_entries(data: &TrainData, config: &TrainConfig, entries: Vec<i32>) -> SourceLabels {
    let per_entry = if config.refine {
        refine_entries(&data.corr, &entries, &data.entry_masks)
    } else {
        entries
    };
    let per_point = merge_entries_to_points(&data.corr, &per_entry, data.point_count, config.transfer_rule, None);
    SourceLabels { per_entry, per_point }
}

fn from_points(data: &TrainData, config: &TrainConfig, points: Vec<i32>) -> SourceLabels {
    let per_point = if config.refine {
        refine_points_per_view(&data.corr, &points, &data.entry_masks, config.transfer_rule).1
    } else {
        points
    };
    SourceLabels {
        per_entry: pull_back(&data.corr, &per_point),
        per_point,
    }
}

/// Refined oracle labels for the 2D side (P*_x) and the 3D side (P*_p).
pub fn clip_labels(data: &TrainData, config: &TrainConfig) -> (SourceLabels, SourceLabels) {
    let clip2d = from_entries(data, config, data.raw_entries.clone());
    let clip3d = match config.refine3d_mode {
        Refine3dMode::Reproject => SourceLabels {
            per_entry: pull_back(&data.corr, &clip2d.per_point),
            per_point: clip2d.per_point.clone(),
        },
        Refine3dMode::TransferMasks => {
            let transferred = merge_entries_to_points(
                &data.corr,
                &data.raw_entries,
                data.point_count,
                config.transfer_rule,
                None,
            );
            from_points(data, config, transferred)
        }
    };
    (clip2d, clip3d)
}

/// Refined self-predictions of both networks. Unpaired points keep their
/// raw prediction; they never supervise anything.
pub fn compute_self_labels(
    bundle: &ModelBundle,
    data: &TrainData,
    config: &TrainConfig,
) -> Result<(SourceLabels, SourceLabels)> {
    let pred2d = bundle.predict(Side::TwoD, &data.pixel_descriptors)?;
    let pred3d = bundle.predict(Side::ThreeD, &data.point_descriptors)?;
    Ok((from_entries(data, config, pred2d), from_points(data, config, pred3d)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based index of the completed epoch.
    pub epoch: usize,
    pub stage: u8,
    pub l_ce2d: f64,
    pub l_ce3d: f64,
    pub l_latent: f64,
    pub miou2d: Option<f64>,
    pub miou3d: Option<f64>,
}

/// One per-batch source draw of stage 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Draw {
    pub epoch: usize,
    pub side: Side,
    pub source: Source,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub bundle: ModelBundle,
    /// Completed epochs.
    pub epoch: usize,
    pub clip2d: SourceLabels,
    pub clip3d: SourceLabels,
    pub self2d: Option<SourceLabels>,
    pub self3d: Option<SourceLabels>,
    pub history: Vec<EpochRecord>,
    /// Per-batch draws; empty under per-element switching.
    pub draws: Vec<Draw>,
    /// Draw tallies per network (2D, 3D) and source, in either mode.
    pub draw_counts: [[u64; 4]; 2],
    order_rng: ChaCha8Rng,
    switch_rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(data: &TrainData, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let bundle = ModelBundle::new(
            &config.model_config(data),
            data.embeddings.clone(),
            seed::derive(config.seed, "init", 0),
        )?;
        let (clip2d, clip3d) = clip_labels(data, config);
        Ok(TrainState {
            bundle,
            epoch: 0,
            clip2d,
            clip3d,
            self2d: None,
            self3d: None,
            history: Vec::new(),
            draws: Vec::new(),
            draw_counts: [[0; 4]; 2],
            order_rng: seed::rng(config.seed, "train-order", 0),
            switch_rng: seed::rng(config.seed, "train-switch", 0),
        })
    }

    fn labels(&self, source: Source) -> &SourceLabels {
        match source {
            Source::Clip2d => &self.clip2d,
            Source::Clip3d => &self.clip3d,
            Source::Self2d => self.self2d.as_ref().expect("self-labels computed before stage 2"),
            Source::Self3d => self.self3d.as_ref().expect("self-labels computed before stage 2"),
        }
    }
}

fn draw(probs: &[f64; 4], rng: &mut ChaCha8Rng) -> Source {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = Source::Clip2d;
    for s in Source::ALL {
        if probs[s.index()] > 0.0 {
            acc += probs[s.index()];
            last = s;
            if u < acc {
                return s;
            }
        }
    }
    last
}

/// Mean-per-step losses of one epoch.
#[derive(Default)]
struct LossSums {
    ce2d: f64,
    ce3d: f64,
    latent: f64,
    steps: usize,
}

fn pick_targets(
    state: &mut TrainState,
    config: &TrainConfig,
    side: Side,
    stage2: bool,
    batch: &[u32],
) -> Result<Vec<i32>> {
    let lookup = |labels: &SourceLabels, i: u32| match side {
        Side::TwoD => labels.per_entry[i as usize],
        Side::ThreeD => labels.per_point[i as usize],
    };
    if !stage2 {
        let fixed = match side {
            Side::TwoD => &state.clip2d,
            Side::ThreeD => &state.clip3d,
        };
        return Ok(batch.iter().map(|&i| lookup(fixed, i)).collect());
    }
    let probs = config.side_probs(side)?;
    let slot = match side {
        Side::TwoD => 0,
        Side::ThreeD => 1,
    };
    if config.per_element_switching {
        let mut out = Vec::with_capacity(batch.len());
        for &i in batch {
            let s = draw(&probs, &mut state.switch_rng);
            state.draw_counts[slot][s.index()] += 1;
            out.push(lookup(state.labels(s), i));
        }
        Ok(out)
    } else {
        let s = draw(&probs, &mut state.switch_rng);
        state.draw_counts[slot][s.index()] += 1;
        state.draws.push(Draw {
            epoch: state.epoch + 1,
            side,
            source: s,
        });
        Ok(batch.iter().map(|&i| lookup(state.labels(s), i)).collect())
    }
}

fn run_epoch(state: &mut TrainState, data: &TrainData, config: &TrainConfig, stage2: bool) -> Result<()> {
    let mut entries: Vec<u32> = (0..data.corr.len() as u32).collect();
    entries.shuffle(&mut state.order_rng);
    let mut points = data.paired_points.clone();
    points.shuffle(&mut state.order_rng);

    let latent_weight = if stage2 || config.latent_in_stage1 {
        config.latent_loss_weight
    } else {
        0.0
    };
    let mut sums = LossSums::default();
    for (step, batch2) in entries.chunks(config.batch_pixels).enumerate() {
        // the point stream cycles so both networks take the same number of steps
        let batch3: Vec<u32> = (0..config.batch_points)
            .map(|i| points[(step * config.batch_points + i) % points.len()])
            .collect();
        let pixel_targets = pick_targets(state, config, Side::TwoD, stage2, batch2)?;
        let point_targets = pick_targets(state, config, Side::ThreeD, stage2, &batch3)?;
        let pair_points: Vec<u32> = batch2.iter().map(|&e| data.corr.entries[e as usize].point).collect();
        let batch = StepBatch {
            pixel_descriptors: data.pixel_rows(batch2),
            pixel_targets,
            point_descriptors: data.point_rows(&batch3),
            point_targets,
            pair_pixel_descriptors: if latent_weight > 0.0 {
                data.pixel_rows(batch2)
            } else {
                Vec::new()
            },
            pair_point_descriptors: if latent_weight > 0.0 {
                data.point_rows(&pair_points)
            } else {
                Vec::new()
            },
            pair_anchor_features: if latent_weight > 0.0 {
                gather(&data.anchor_features, data.anchor_dim, batch2)
            } else {
                Vec::new()
            },
        };
        let out = combined_loss(&state.bundle, &batch, latent_weight)?;
        if ![out.ce2d, out.ce3d, out.align].iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite(format!(
                "loss at epoch {} step {step}: ce2d {} ce3d {} latent {}",
                state.epoch + 1,
                out.ce2d,
                out.ce3d,
                out.align
            )));
        }
        sgd_step_with(&mut state.bundle, &out.tape, config.lr, config.precision)
            .map_err(|e| Error::NonFinite(format!("epoch {} step {step}: {e}", state.epoch + 1)))?;
        sums.ce2d += out.ce2d;
        sums.ce3d += out.ce3d;
        sums.latent += out.align;
        sums.steps += 1;
    }
    let (miou2d, miou3d) = train_miou(&state.bundle, data)?;
    state.epoch += 1;
    let steps = sums.steps.max(1) as f64;
    state.history.push(EpochRecord {
        epoch: state.epoch,
        stage: if stage2 { 2 } else { 1 },
        l_ce2d: sums.ce2d / steps,
        l_ce3d: sums.ce3d / steps,
        l_latent: sums.latent / steps,
        miou2d,
        miou3d,
    });
    log::debug!("epoch {} {:?}", state.epoch, state.history.last());
    Ok(())
}

/// Training-set mIoU against ground truth: 2D over paired pixels, 3D over
/// every point.
pub fn train_miou(bundle: &ModelBundle, data: &TrainData) -> Result<(Option<f64>, Option<f64>)> {
    let pred2d = bundle.predict(Side::TwoD, &data.pixel_descriptors)?;
    let pred3d = bundle.predict(Side::ThreeD, &data.point_descriptors)?;
    Ok((
        miou(&confusion(&pred2d, &data.gt_entries, data.classes)?).1,
        miou(&confusion(&pred3d, &data.gt_points, data.classes)?).1,
    ))
}

/// Runs the remaining stage-1 epochs.
pub fn run_stage1(state: &mut TrainState, data: &TrainData, config: &TrainConfig) -> Result<()> {
    while state.epoch < config.stage1_epochs {
        run_epoch(state, data, config, false)?;
    }
    Ok(())
}

/// Runs stage 2 up to `total_epochs`, refreshing self-labels every epoch.
pub fn run_stage2(state: &mut TrainState, data: &TrainData, config: &TrainConfig) -> Result<()> {
    if state.epoch < config.stage1_epochs {
        return Err(Error::Config(format!(
            "stage 2 needs stage 1 complete ({} of {} epochs done)",
            state.epoch, config.stage1_epochs
        )));
    }
    while state.epoch < config.total_epochs {
        let (s2, s3) = compute_self_labels(&state.bundle, data, config)?;
        state.self2d = Some(s2);
        state.self3d = Some(s3);
        run_epoch(state, data, config, true)?;
    }
    Ok(())
}

/// Both stages back to back.
pub fn train(data: &TrainData, config: &TrainConfig) -> Result<TrainState> {
    let mut state = TrainState::new(data, config)?;
    run_stage1(&mut state, data, config)?;
    run_stage2(&mut state, data, config)?;
    Ok(state)
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| format!("{v:.6}"))
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,l_ce2d,l_ce3d,l_latent,miou2d,miou3d\n");
    for r in history {
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{},{}",
            r.epoch,
            r.l_ce2d,
            r.l_ce3d,
            r.l_latent,
            opt(r.miou2d),
            opt(r.miou3d)
        );
    }
    out
}

pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    std::fs::write(path, history_csv(history)).map_err(|e| Error::io(path, e))
}
