//! Model checkpoints: a `key=value` text header closed by `end`, followed by
//! every parameter group and then the class embeddings as little-endian f32.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{Linear, Mlp, ModelBundle};
use crate::error::{Error, Result};
use crate::scenesynth::ClassEmbeddingTable;

const MAGIC: &str = "CNSCKPT";
const VERSION: &str = "v1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub bundle: ModelBundle,
    pub seed: u64,
    pub config_hash: String,
}

fn join(values: &[usize]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

pub fn write_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    let b = &checkpoint.bundle;
    let cfg = b.config();
    let payload_len = b.parameter_count() + b.embeddings.rows.len();
    let mut out = format!(
        "{MAGIC} {VERSION}\npixel_dim={}\npoint_dim={}\nhidden={}\nfeature_dim={}\nclasses={}\nembed_dim={}\nlatent_dim={}\nanchor_dim={}\ntemperature={:?}\ntrain_anchor_head={}\nseed={}\nconfig_hash={}\nparams={payload_len}\nend\n",
        cfg.pixel_dim,
        cfg.point_dim,
        join(&cfg.hidden),
        cfg.feature_dim,
        b.embeddings.classes,
        b.embeddings.dim,
        cfg.latent_dim,
        cfg.anchor_dim,
        cfg.temperature,
        u8::from(cfg.train_anchor_head),
        checkpoint.seed,
        checkpoint.config_hash,
    )
    .into_bytes();
    out.reserve(4 * payload_len);
    for &x in b.groups().into_iter().flatten().chain(&b.embeddings.rows) {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &out).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = path.display().to_string();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;

    let mut header = BTreeMap::new();
    let mut offset = 0usize;
    let mut first = true;
    loop {
        let Some(len) = bytes[offset..].iter().position(|&b| b == b'\n') else {
            return Err(Error::format(&file, offset as u64, "unterminated header"));
        };
        let line = std::str::from_utf8(&bytes[offset..offset + len])
            .map_err(|_| Error::format(&file, offset as u64, "header is not UTF-8"))?;
        let line_offset = offset;
        offset += len + 1;
        if first {
            let mut parts = line.split_whitespace();
            if parts.next() != Some(MAGIC) {
                return Err(Error::format(&file, 0, format!("missing {MAGIC} magic")));
            }
            let version = parts.next().unwrap_or("");
            if version != VERSION {
                return Err(Error::Version {
                    file,
                    found: version.into(),
                    expected: VERSION.into(),
                });
            }
            first = false;
            continue;
        }
        if line == "end" {
            break;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format(&file, line_offset as u64, format!("malformed header line {line:?}")))?;
        header.insert(k.to_string(), v.to_string());
    }

    let get = |key: &str| -> Result<&String> {
        header
            .get(key)
            .ok_or_else(|| Error::format(&file, 0, format!("header lacks {key}")))
    };
    let num = |key: &str| -> Result<usize> {
        get(key)?
            .parse()
            .map_err(|_| Error::format(&file, 0, format!("header {key} is not an integer")))
    };
    let hidden: Vec<usize> = match get("hidden")?.as_str() {
        "" => Vec::new(),
        s => s
            .split(',')
            .map(|h| h.parse().map_err(|_| Error::format(&file, 0, "bad hidden widths")))
            .collect::<Result<_>>()?,
    };
    let (pixel_dim, point_dim, feature_dim) = (num("pixel_dim")?, num("point_dim")?, num("feature_dim")?);
    let (classes, embed_dim) = (num("classes")?, num("embed_dim")?);
    let (latent_dim, anchor_dim) = (num("latent_dim")?, num("anchor_dim")?);
    let temperature: f64 = get("temperature")?
        .parse()
        .map_err(|_| Error::format(&file, 0, "bad temperature"))?;
    let seed: u64 = get("seed")?.parse().map_err(|_| Error::format(&file, 0, "bad seed"))?;

    let widths = |input: usize| -> Vec<usize> {
        std::iter::once(input)
            .chain(hidden.iter().copied())
            .chain(std::iter::once(feature_dim))
            .collect()
    };
    let mut bundle = ModelBundle {
        enc2d: Mlp::zeros(&widths(pixel_dim)),
        enc3d: Mlp::zeros(&widths(point_dim)),
        head_s2d: Linear::zeros(feature_dim, embed_dim),
        head_s3d: Linear::zeros(feature_dim, embed_dim),
        head_f2d: Linear::zeros(feature_dim, latent_dim),
        head_f3d: Linear::zeros(feature_dim, latent_dim),
        anchor_head: Linear::zeros(anchor_dim, latent_dim),
        embeddings: ClassEmbeddingTable {
            classes,
            dim: embed_dim,
            rows: vec![0.0; classes * embed_dim],
        },
        temperature,
        train_anchor_head: get("train_anchor_head")? == "1",
    };

    let expected = bundle.parameter_count() + classes * embed_dim;
    let declared = num("params")?;
    if declared != expected {
        return Err(Error::format(
            &file,
            0,
            format!("header declares {declared} parameters but the dimensions imply {expected}"),
        ));
    }
    let payload = &bytes[offset..];
    if payload.len() != 4 * expected {
        return Err(Error::format(
            &file,
            (offset + payload.len().min(4 * expected)) as u64,
            format!("payload holds {} bytes, expected {}", payload.len(), 4 * expected),
        ));
    }
    let mut values = payload
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])));
    for group in bundle.groups_mut() {
        group
            .iter_mut()
            .for_each(|x| *x = values.next().expect("length checked"));
    }
    bundle
        .embeddings
        .rows
        .iter_mut()
        .for_each(|x| *x = values.next().expect("length checked"));

    Ok(Checkpoint {
        bundle,
        seed,
        config_hash: get("config_hash")?.clone(),
    })
}
