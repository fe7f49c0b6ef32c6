use std::fmt::Write as _;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use super::metrics::{confusion, latent_separation, miou, ConfusionMatrix};
use crate::error::{Error, Result};
use crate::nncore::Side;
use crate::pseudolabel::{merge_entries_to_points, IGNORE};
use crate::scenesynth::{generate_scene, run_oracles, OracleConfig, OracleOutputs, RenderedScene, Scene, SceneConfig};
use crate::seed;
use crate::training::{clip_labels, train, AnchorSource, TrainConfig, TrainData};

/// Everything shared by the rows evaluated on one suite seed.
pub struct SceneContext {
    pub seed: u64,
    pub scene: Scene,
    pub rendered: RenderedScene,
    pub oracles: OracleOutputs,
    pub data: TrainData,
}

impl SceneContext {
    pub fn build(scene_config: &SceneConfig, oracle_config: &OracleConfig, suite_seed: u64) -> Result<Self> {
        let scene = generate_scene(scene_config, seed::derive(suite_seed, "scene", 0))?;
        let rendered = scene.render()?;
        let oracles = run_oracles(&scene, &rendered, oracle_config, seed::derive(suite_seed, "oracle", 0))?;
        let data = TrainData::new(&scene, &rendered, &oracles, AnchorSource::Sam)?;
        Ok(SceneContext {
            seed: suite_seed,
            scene,
            rendered,
            oracles,
            data,
        })
    }

    /// Training seed of a row on this scene; identical across rows.
    pub fn train_seed(&self) -> u64 {
        seed::derive(self.seed, "train", 0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RowMetrics {
    pub miou2d: Option<f64>,
    pub miou3d: Option<f64>,
    pub iou2d: Vec<Option<f64>>,
    pub iou3d: Vec<Option<f64>>,
    pub err2d: Option<f64>,
    pub err3d: Option<f64>,
    /// Fraction of points carrying a 3D prediction.
    pub coverage3d: f64,
    /// Within-object minus cross-object mean latent cosine.
    pub sep2d: Option<f64>,
    pub sep3d: Option<f64>,
}

/// One configuration of the comparison table.
pub trait AblationRow: Send + Sync {
    fn name(&self) -> &'static str;
    /// Effective training configuration; `None` for rows that never train.
    fn train_config(&self, base: &TrainConfig) -> Option<TrainConfig>;
    fn run(&self, ctx: &SceneContext, base: &TrainConfig) -> Result<RowMetrics>;
}

fn scored(pred2d: &[i32], gt2d: &[i32], pred3d: &[i32], gt3d: &[i32], classes: usize) -> Result<RowMetrics> {
    let cm2: ConfusionMatrix = confusion(pred2d, gt2d, classes)?;
    let cm3 = confusion(pred3d, gt3d, classes)?;
    let (iou2d, miou2d) = miou(&cm2);
    let (iou3d, miou3d) = miou(&cm3);
    Ok(RowMetrics {
        miou2d,
        miou3d,
        iou2d,
        iou3d,
        err2d: cm2.error_rate(),
        err3d: cm3.error_rate(),
        coverage3d: cm3.total() as f64 / gt3d.len().max(1) as f64,
        sep2d: None,
        sep3d: None,
    })
}

/// Oracle labels scored without any training; 3D via transfer, so points
/// seen by no camera are left out and coverage drops below 1.
struct ProjectionRow {
    name: &'static str,
    refined: bool,
}

impl AblationRow for ProjectionRow {
    fn name(&self) -> &'static str {
        self.name
    }

    fn train_config(&self, _: &TrainConfig) -> Option<TrainConfig> {
        None
    }

    fn run(&self, ctx: &SceneContext, base: &TrainConfig) -> Result<RowMetrics> {
        let d = &ctx.data;
        let (labels2d, labels3d) = if self.refined {
            let (c2, c3) = clip_labels(d, base);
            (c2.per_entry, c3.per_point)
        } else {
            let points = merge_entries_to_points(&d.corr, &d.raw_entries, d.point_count, base.transfer_rule, None);
            (d.raw_entries.clone(), points)
        };
        let gt3d: Vec<i32> = labels3d
            .iter()
            .zip(&d.gt_points)
            .map(|(&l, &g)| if l == IGNORE { IGNORE } else { g })
            .collect();
        let pred3d: Vec<i32> = labels3d.iter().map(|&l| l.max(0)).collect();
        scored(&labels2d, &d.gt_entries, &pred3d, &gt3d, d.classes)
    }
}

/// Full training under a tweaked configuration, scored on every paired
/// pixel and every point.
struct TrainedRow {
    name: &'static str,
    tweak: fn(&mut TrainConfig),
}

impl AblationRow for TrainedRow {
    fn name(&self) -> &'static str {
        self.name
    }

    fn train_config(&self, base: &TrainConfig) -> Option<TrainConfig> {
        let mut c = base.clone();
        (self.tweak)(&mut c);
        Some(c)
    }

    fn run(&self, ctx: &SceneContext, base: &TrainConfig) -> Result<RowMetrics> {
        let mut config = self.train_config(base).expect("trained rows have a config");
        config.seed = ctx.train_seed();
        let alt;
        let data = if config.anchor_source == AnchorSource::Sam {
            &ctx.data
        } else {
            alt = TrainData::new(&ctx.scene, &ctx.rendered, &ctx.oracles, config.anchor_source)?;
            &alt
        };
        let state = train(data, &config)?;
        let b = &state.bundle;
        let pred2d = b.predict(Side::TwoD, &data.pixel_descriptors)?;
        let pred3d = b.predict(Side::ThreeD, &data.point_descriptors)?;
        let mut m = scored(&pred2d, &data.gt_entries, &pred3d, &data.gt_points, data.classes)?;
        let k = config.latent_dim;
        let gap = |(w, c): (f64, f64)| w - c;
        m.sep2d = latent_separation(&b.latent(Side::TwoD, &data.pixel_descriptors)?, k, &data.entry_objects).map(gap);
        m.sep3d = latent_separation(
            &b.latent(Side::ThreeD, &data.point_descriptors)?,
            k,
            ctx.scene.object_ids(),
        )
        .map(gap);
        Ok(m)
    }
}

/// Every known row in canonical report order.
pub fn registry() -> Vec<Box<dyn AblationRow>> {
    vec![
        Box::new(ProjectionRow {
            name: "baseline",
            refined: false,
        }),
        Box::new(ProjectionRow {
            name: "wo_cns",
            refined: true,
        }),
        Box::new(TrainedRow {
            name: "wo_refine",
            tweak: |c| c.refine = false,
        }),
        Box::new(TrainedRow {
            name: "wo_ct",
            tweak: |c| c.cross_training = false,
        }),
        Box::new(TrainedRow {
            name: "wo_sct",
            tweak: |c| c.stage1_epochs = c.total_epochs,
        }),
        Box::new(TrainedRow {
            name: "wo_clip",
            tweak: |c| c.switch_probs = [0.0, 0.0, 0.5, 0.5],
        }),
        Box::new(TrainedRow {
            name: "latent_none",
            tweak: |c| c.latent_loss_weight = 0.0,
        }),
        Box::new(TrainedRow {
            name: "latent_clip",
            tweak: |c| c.anchor_source = AnchorSource::Clip,
        }),
        Box::new(TrainedRow {
            name: "full",
            tweak: |_| {},
        }),
    ]
}

pub fn row_names() -> Vec<&'static str> {
    registry().iter().map(|r| r.name()).collect()
}

/// Rows named in `names`, in canonical order; unknown names are errors.
pub fn select_rows(names: &[String]) -> Result<Vec<Box<dyn AblationRow>>> {
    let known = row_names();
    if let Some(bad) = names.iter().find(|n| !known.contains(&n.as_str())) {
        return Err(Error::Config(format!(
            "unknown ablation row {bad:?}; known rows: {}",
            known.join(", ")
        )));
    }
    Ok(registry()
        .into_iter()
        .filter(|r| names.iter().any(|n| n == r.name()))
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteConfig {
    pub scene: SceneConfig,
    pub oracle: OracleConfig,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub rows: Vec<String>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            scene: SceneConfig::default(),
            oracle: OracleConfig::default(),
            train: TrainConfig::default(),
            seeds: vec![0, 1, 2],
            rows: row_names().into_iter().map(String::from).collect(),
        }
    }
}

/// Short digest of everything that determines one row's numbers.
pub fn config_hash(suite: &SuiteConfig, row: &dyn AblationRow) -> String {
    let mut h = Sha256::new();
    h.update(format!("{:?}\n{:?}\n", suite.scene, suite.oracle));
    match row.train_config(&suite.train) {
        Some(c) => h.update(format!("{c:?}\n")),
        None => {
            let t = &suite.train;
            h.update(format!(
                "{}|{:?}|{:?}|{}\n",
                row.name(),
                t.refine3d_mode,
                t.transfer_rule,
                t.refine
            ));
        }
    }
    hex8(&h.finalize())
}

fn hex8(digest: &[u8]) -> String {
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Short SHA-256 digest of arbitrary configuration text.
pub fn text_digest(text: &str) -> String {
    hex8(&Sha256::digest(text.as_bytes()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RowOutcome {
    pub row: String,
    pub seed: u64,
    pub config_hash: String,
    pub result: std::result::Result<RowMetrics, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub rows: Vec<String>,
    pub outcomes: Vec<RowOutcome>,
}

/// Runs every selected row on every seed. Row failures are recorded, not
/// propagated; only an invalid suite aborts.
pub fn run_ablation(suite: &SuiteConfig) -> Result<AblationReport> {
    suite.scene.validate()?;
    suite.train.validate()?;
    if suite.seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let rows = select_rows(&suite.rows)?;
    let contexts: Vec<std::result::Result<SceneContext, String>> = suite
        .seeds
        .par_iter()
        .map(|&s| SceneContext::build(&suite.scene, &suite.oracle, s).map_err(|e| e.to_string()))
        .collect();
    let tasks: Vec<(usize, usize)> = (0..rows.len())
        .flat_map(|r| (0..contexts.len()).map(move |s| (r, s)))
        .collect();
    let outcomes = tasks
        .par_iter()
        .map(|&(r, s)| {
            let row = &rows[r];
            let result = match &contexts[s] {
                Ok(ctx) => row.run(ctx, &suite.train).map_err(|e| e.to_string()),
                Err(e) => Err(format!("scene: {e}")),
            };
            if let Err(e) = &result {
                log::warn!("row {} seed {} failed: {e}", row.name(), suite.seeds[s]);
            }
            RowOutcome {
                row: row.name().to_string(),
                seed: suite.seeds[s],
                config_hash: config_hash(suite, row.as_ref()),
                result,
            }
        })
        .collect();
    Ok(AblationReport {
        seeds: suite.seeds.clone(),
        rows: rows.iter().map(|r| r.name().to_string()).collect(),
        outcomes,
    })
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| format!("{v:.6}"))
}

fn fmt_ious(v: &[Option<f64>]) -> String {
    v.iter().map(|x| fmt_opt(*x)).collect::<Vec<_>>().join(";")
}

/// Middle value (mean of the two middle values for even counts).
pub fn median(values: &[f64]) -> Option<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    match v.len() {
        0 => None,
        n if n % 2 == 1 => Some(v[n / 2]),
        n => Some(0.5 * (v[n / 2 - 1] + v[n / 2])),
    }
}

impl AblationReport {
    pub fn outcomes_for<'a>(&'a self, row: &'a str) -> impl Iterator<Item = &'a RowOutcome> + 'a {
        self.outcomes.iter().filter(move |o| o.row == row)
    }

    /// Median of a metric over the seeds where the row succeeded.
    pub fn median_of(&self, row: &str, metric: fn(&RowMetrics) -> Option<f64>) -> Option<f64> {
        let values: Vec<f64> = self
            .outcomes_for(row)
            .filter_map(|o| o.result.as_ref().ok().and_then(metric))
            .collect();
        median(&values)
    }

    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("row,seed,status,config_hash,miou2d,miou3d,err2d,err3d,coverage3d,sep2d,sep3d,iou2d,iou3d\n");
        for o in &self.outcomes {
            match &o.result {
                Ok(m) => {
                    let _ = writeln!(
                        out,
                        "{},{},ok,{},{},{},{},{},{:.6},{},{},{},{}",
                        o.row,
                        o.seed,
                        o.config_hash,
                        fmt_opt(m.miou2d),
                        fmt_opt(m.miou3d),
                        fmt_opt(m.err2d),
                        fmt_opt(m.err3d),
                        m.coverage3d,
                        fmt_opt(m.sep2d),
                        fmt_opt(m.sep3d),
                        fmt_ious(&m.iou2d),
                        fmt_ious(&m.iou3d)
                    );
                }
                Err(e) => {
                    let msg = e.replace([',', '\n'], " ");
                    let _ = writeln!(out, "{},{},error: {msg},{},,,,,,,,,", o.row, o.seed, o.config_hash);
                }
            }
        }
        out
    }

    pub fn summary(&self) -> String {
        let pct = |x: Option<f64>| x.map_or_else(|| "    -".to_string(), |v| format!("{:5.1}", 100.0 * v));
        let gap = |x: Option<f64>| x.map_or_else(|| "     -".to_string(), |v| format!("{v:6.3}"));
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let mut out = format!(
            "ablation over seeds [{}], medians\n{:<12} {:>6} {:>6} {:>7} {:>7} {:>6} {:>4}  {}\n",
            seeds.join(", "),
            "row",
            "mIoU2D",
            "mIoU3D",
            "sep2D",
            "sep3D",
            "cov3D",
            "ok",
            "config"
        );
        for row in &self.rows {
            let ok = self.outcomes_for(row).filter(|o| o.result.is_ok()).count();
            let hash = self.outcomes_for(row).next().map_or("", |o| o.config_hash.as_str());
            let _ = writeln!(
                out,
                "{:<12} {:>6} {:>6} {:>7} {:>7} {:>6} {:>2}/{}  {}",
                row,
                pct(self.median_of(row, |m| m.miou2d)),
                pct(self.median_of(row, |m| m.miou3d)),
                gap(self.median_of(row, |m| m.sep2d)),
                gap(self.median_of(row, |m| m.sep3d)),
                pct(self.median_of(row, |m| Some(m.coverage3d))),
                ok,
                self.seeds.len(),
                hash
            );
        }
        for o in self.outcomes.iter().filter(|o| o.result.is_err()) {
            let _ = writeln!(
                out,
                "failed: {} seed {}: {}",
                o.row,
                o.seed,
                o.result.as_ref().unwrap_err()
            );
        }
        out
    }
}
