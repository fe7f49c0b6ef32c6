//! `key=value` run configuration: one flat schema over scene, oracle,
//! training and suite settings.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use cns_core::eval::{row_names, SuiteConfig};
use cns_core::nncore::Precision;
use cns_core::pseudolabel::TransferRule;
use cns_core::scenesynth::{OracleConfig, SceneConfig};
use cns_core::training::{AnchorSource, Refine3dMode, TrainConfig};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("config key {key:?}: cannot parse {value:?}: {reason}")]
    BadValue { key: String, value: String, reason: String },
    #[error("{file}:{line}: expected key=value, found {text:?}")]
    Syntax { file: String, line: usize, text: String },
    #[error("{file}:{line}: key {key:?} set twice")]
    Duplicate { file: String, line: usize, key: String },
    #[error("override {0:?} has no value")]
    MissingValue(String),
    #[error("expected --key value, found {0:?}")]
    NotAKey(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Root seed; every other seed is derived from it.
    pub seed: u64,
    pub scene: SceneConfig,
    pub oracle: OracleConfig,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub rows: Vec<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let suite = SuiteConfig::default();
        RunConfig {
            seed: 0,
            scene: suite.scene,
            oracle: suite.oracle,
            train: suite.train,
            seeds: suite.seeds,
            rows: suite.rows,
        }
    }
}

type Getter = fn(&RunConfig) -> String;
type Setter = fn(&mut RunConfig, &str) -> Result<(), String>;

struct Key {
    name: &'static str,
    get: Getter,
    set: Setter,
}

fn parse<T: FromStr>(s: &str) -> Result<T, String>
where
    T::Err: Display,
{
    s.trim().parse().map_err(|e: T::Err| e.to_string())
}

fn parse_list<T: FromStr>(s: &str) -> Result<Vec<T>, String>
where
    T::Err: Display,
{
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',').map(parse).collect()
}

fn parse_bool(s: &str) -> Result<bool, String> {
    match s.trim() {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(format!("expected true or false, found {other:?}")),
    }
}

fn list<T: Display>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn float_list(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",")
}

fn fixed<const N: usize>(s: &str) -> Result<[f64; N], String> {
    let v: Vec<f64> = parse_list(s)?;
    v.try_into()
        .map_err(|v: Vec<f64>| format!("expected {N} comma-separated numbers, found {}", v.len()))
}

macro_rules! scalar {
    ($name:literal, $($path:ident).+) => {
        Key {
            name: $name,
            get: |c| c.$($path).+.to_string(),
            set: |c, s| {
                c.$($path).+ = parse(s)?;
                Ok(())
            },
        }
    };
}

macro_rules! float {
    ($name:literal, $($path:ident).+) => {
        Key {
            name: $name,
            get: |c| format!("{:?}", c.$($path).+),
            set: |c, s| {
                c.$($path).+ = parse(s)?;
                Ok(())
            },
        }
    };
}

macro_rules! flag {
    ($name:literal, $($path:ident).+) => {
        Key {
            name: $name,
            get: |c| c.$($path).+.to_string(),
            set: |c, s| {
                c.$($path).+ = parse_bool(s)?;
                Ok(())
            },
        }
    };
}

fn transfer_name(r: TransferRule) -> &'static str {
    match r {
        TransferRule::LowestCamera => "lowest-camera",
        TransferRule::Vote => "vote",
    }
}

fn precision_name(p: Precision) -> &'static str {
    match p {
        Precision::Wide => "wide",
        Precision::Single => "single",
    }
}

fn schema() -> Vec<Key> {
    vec![
        scalar!("seed", seed),
        Key {
            name: "seeds",
            get: |c| list(&c.seeds),
            set: |c, s| {
                c.seeds = parse_list(s)?;
                if c.seeds.is_empty() {
                    return Err("at least one seed is required".into());
                }
                Ok(())
            },
        },
        Key {
            name: "rows",
            get: |c| c.rows.join(","),
            set: |c, s| {
                let names: Vec<String> = s
                    .split(',')
                    .map(|r| r.trim().to_string())
                    .filter(|r| !r.is_empty())
                    .collect();
                let known = row_names();
                if let Some(bad) = names.iter().find(|n| !known.contains(&n.as_str())) {
                    return Err(format!("unknown row {bad:?}; known rows: {}", known.join(",")));
                }
                c.rows = names;
                Ok(())
            },
        },
        // scene
        Key {
            name: "room",
            get: |c| float_list(&c.scene.room),
            set: |c, s| {
                c.scene.room = fixed::<3>(s)?;
                Ok(())
            },
        },
        scalar!("object_count", scene.object_count),
        scalar!("points_per_object", scene.points_per_object),
        float!("background_density", scene.background_density),
        scalar!("classes", scene.classes),
        scalar!("camera_count", scene.camera_count),
        scalar!("image_width", scene.image_width),
        scalar!("image_height", scene.image_height),
        float!("fov_deg", scene.fov_deg),
        float!("camera_height", scene.camera_height),
        float!("ring_radius_frac", scene.ring_radius_frac),
        float!("look_at_height", scene.look_at_height),
        scalar!("appearance_channels", scene.appearance_channels),
        float!("object_color_sigma", scene.object_color_sigma),
        float!("point_color_sigma", scene.point_color_sigma),
        scalar!("max_placement_attempts", scene.max_placement_attempts),
        // oracles
        float!("clip_eps", oracle.clip.eps),
        scalar!("clip_block", oracle.clip.block),
        float!("clip_margin", oracle.clip.margin),
        scalar!("sam_splits", oracle.sam.splits_per_object),
        scalar!("sam_jitter", oracle.sam.boundary_jitter_px),
        scalar!("sam_feature_dim", oracle.feature_dim),
        float!("sam_feature_sigma", oracle.feature_sigma),
        scalar!("text_embed_dim", oracle.embed_dim),
        float!("text_max_coherence", oracle.text.max_coherence),
        flag!("text_orthogonalize", oracle.text.orthogonalize),
        scalar!("text_max_attempts", oracle.text.max_attempts),
        // training
        scalar!("stage1_epochs", train.stage1_epochs),
        scalar!("total_epochs", train.total_epochs),
        float!("lr", train.lr),
        scalar!("batch_pixels", train.batch_pixels),
        scalar!("batch_points", train.batch_points),
        Key {
            name: "switch_probs",
            get: |c| float_list(&c.train.switch_probs),
            set: |c, s| {
                c.train.switch_probs = fixed::<4>(s)?;
                Ok(())
            },
        },
        flag!("cross_training", train.cross_training),
        flag!("per_element_switching", train.per_element_switching),
        float!("latent_loss_weight", train.latent_loss_weight),
        flag!("latent_in_stage1", train.latent_in_stage1),
        flag!("refine", train.refine),
        Key {
            name: "refine3d_mode",
            get: |c| c.train.refine3d_mode.name().into(),
            set: |c, s| {
                c.train.refine3d_mode = Refine3dMode::parse(s.trim()).ok_or("expected transfer-masks or reproject")?;
                Ok(())
            },
        },
        Key {
            name: "transfer_rule",
            get: |c| transfer_name(c.train.transfer_rule).into(),
            set: |c, s| {
                c.train.transfer_rule = match s.trim() {
                    "lowest-camera" => TransferRule::LowestCamera,
                    "vote" => TransferRule::Vote,
                    _ => return Err("expected lowest-camera or vote".into()),
                };
                Ok(())
            },
        },
        Key {
            name: "anchor_source",
            get: |c| c.train.anchor_source.name().into(),
            set: |c, s| {
                c.train.anchor_source = AnchorSource::parse(s.trim()).ok_or("expected sam or clip")?;
                Ok(())
            },
        },
        Key {
            name: "hidden",
            get: |c| list(&c.train.hidden),
            set: |c, s| {
                c.train.hidden = parse_list(s)?;
                Ok(())
            },
        },
        scalar!("feature_dim", train.feature_dim),
        scalar!("latent_dim", train.latent_dim),
        float!("temperature", train.temperature),
        flag!("train_anchor_head", train.train_anchor_head),
        Key {
            name: "precision",
            get: |c| precision_name(c.train.precision).into(),
            set: |c, s| {
                c.train.precision = match s.trim() {
                    "wide" => Precision::Wide,
                    "single" => Precision::Single,
                    _ => return Err("expected wide or single".into()),
                };
                Ok(())
            },
        },
    ]
}

impl RunConfig {
    pub fn keys() -> Vec<&'static str> {
        let mut k: Vec<&str> = schema().iter().map(|k| k.name).collect();
        k.sort_unstable();
        k
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let schema = schema();
        let entry = schema
            .iter()
            .find(|k| k.name == key)
            .ok_or_else(|| ConfigError::UnknownKey(key.to_string()))?;
        (entry.set)(self, value).map_err(|reason| ConfigError::BadValue {
            key: key.to_string(),
            value: value.to_string(),
            reason,
        })
    }

    pub fn get(&self, key: &str) -> Option<String> {
        schema().iter().find(|k| k.name == key).map(|k| (k.get)(self))
    }

    /// Applies a config file's text. Blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, file: &str, text: &str) -> Result<(), ConfigError> {
        let mut seen = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::Syntax {
                    file: file.into(),
                    line: i + 1,
                    text: raw.into(),
                });
            };
            let key = key.trim();
            if seen.insert(key.to_string(), ()).is_some() {
                return Err(ConfigError::Duplicate {
                    file: file.into(),
                    line: i + 1,
                    key: key.into(),
                });
            }
            self.set(key, value.trim())?;
        }
        Ok(())
    }

    /// Applies `--key value` or `--key=value` pairs in order.
    pub fn apply_overrides(&mut self, args: &[String]) -> Result<(), ConfigError> {
        let mut it = args.iter();
        while let Some(arg) = it.next() {
            let Some(flag) = arg.strip_prefix("--") else {
                return Err(ConfigError::NotAKey(arg.clone()));
            };
            let (key, value) = match flag.split_once('=') {
                Some((k, v)) => (k, v.to_string()),
                None => (
                    flag,
                    it.next().ok_or_else(|| ConfigError::MissingValue(arg.clone()))?.clone(),
                ),
            };
            self.set(key, &value)?;
        }
        Ok(())
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> anyhow::Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|e| anyhow::anyhow!("{}: {e}", p.display()))?;
            cfg.apply_text(&p.display().to_string(), &text)?;
        }
        cfg.apply_overrides(overrides)?;
        Ok(cfg)
    }

    /// Every key, sorted, one `key=value` per line.
    pub fn resolved(&self) -> String {
        let mut entries: Vec<(&str, String)> = schema().iter().map(|k| (k.name, (k.get)(self))).collect();
        entries.sort_unstable_by_key(|e| e.0);
        entries.into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn suite(&self) -> SuiteConfig {
        SuiteConfig {
            scene: self.scene.clone(),
            oracle: self.oracle.clone(),
            train: self.train.clone(),
            seeds: self.seeds.clone(),
            rows: self.rows.clone(),
        }
    }
}
