//! Scene bundles on disk: text headers over raw little-endian payloads.
//! The byte layout is documented in `docs/formats.md`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geometry::{CameraModel, PointCloud};
use crate::pseudolabel::IGNORE;
use crate::scenesynth::{Appearance, ClassEmbeddingTable, FeatureMap, MaskMap, OracleOutputs, Scene, ScoreMap};

pub const BUNDLE_VERSION: &str = "v1";
const BUNDLE_MAGIC: &str = "CNSBUNDLE";
const POINTS_MAGIC: &str = "CNSPTS";
const RASTER_MAGIC: &str = "CNSRAS";

/// Contents of `manifest.txt`.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub classes: usize,
    pub points: usize,
    pub views: usize,
    pub object_count: usize,
    pub instance_classes: Vec<u32>,
    pub room: [f64; 3],
    pub appearance_channels: usize,
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub mask_counts: Vec<u32>,
    pub seed: u64,
    pub config_hash: String,
}

fn csv<T: ToString>(values: &[T]) -> String {
    values.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl Manifest {
    fn to_text(&self) -> String {
        let mut out = format!("{BUNDLE_MAGIC} {BUNDLE_VERSION}\n");
        let room: Vec<String> = self.room.iter().map(|x| format!("{x:?}")).collect();
        let _ = write!(
            out,
            "classes={}\npoints={}\nviews={}\nobject_count={}\ninstance_classes={}\nroom={}\n\
             appearance_channels={}\nfeature_dim={}\nembed_dim={}\nmask_counts={}\nseed={}\nconfig_hash={}\n",
            self.classes,
            self.points,
            self.views,
            self.object_count,
            csv(&self.instance_classes),
            room.join(","),
            self.appearance_channels,
            self.feature_dim,
            self.embed_dim,
            csv(&self.mask_counts),
            self.seed,
            self.config_hash
        );
        out
    }

    fn parse(text: &str) -> Result<Self> {
        const FILE: &str = "manifest.txt";
        let mut lines = text.lines();
        let first = lines.next().unwrap_or("");
        let mut head = first.split_whitespace();
        if head.next() != Some(BUNDLE_MAGIC) {
            return Err(Error::format(FILE, 0, format!("missing {BUNDLE_MAGIC} magic")));
        }
        let version = head.next().unwrap_or("");
        if version != BUNDLE_VERSION {
            return Err(Error::Version {
                file: FILE.into(),
                found: version.into(),
                expected: BUNDLE_VERSION.into(),
            });
        }
        let mut keys = BTreeMap::new();
        let mut offset = first.len() + 1;
        for line in lines {
            if !line.is_empty() {
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| Error::format(FILE, offset as u64, format!("malformed line {line:?}")))?;
                keys.insert(k.to_string(), v.to_string());
            }
            offset += line.len() + 1;
        }
        let get = |k: &str| {
            keys.get(k)
                .ok_or_else(|| Error::format(FILE, 0, format!("missing key {k}")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::format(FILE, 0, format!("{k} is not an integer")))
        };
        let list = |k: &str| -> Result<Vec<u32>> {
            let v = get(k)?;
            if v.is_empty() {
                return Ok(Vec::new());
            }
            v.split(',')
                .map(|x| {
                    x.parse()
                        .map_err(|_| Error::format(FILE, 0, format!("{k} holds a non-integer")))
                })
                .collect()
        };
        let room: Vec<f64> = get("room")?
            .split(',')
            .map(|x| x.parse().map_err(|_| Error::format(FILE, 0, "room holds a non-number")))
            .collect::<Result<_>>()?;
        let room: [f64; 3] = room
            .try_into()
            .map_err(|_| Error::format(FILE, 0, "room needs three extents"))?;
        Ok(Manifest {
            classes: num("classes")?,
            points: num("points")?,
            views: num("views")?,
            object_count: num("object_count")?,
            instance_classes: list("instance_classes")?,
            room,
            appearance_channels: num("appearance_channels")?,
            feature_dim: num("feature_dim")?,
            embed_dim: num("embed_dim")?,
            mask_counts: list("mask_counts")?,
            seed: get("seed")?
                .parse()
                .map_err(|_| Error::format(FILE, 0, "seed is not an integer"))?,
            config_hash: get("config_hash")?.clone(),
        })
    }
}

/// Element type of a raster payload, always little-endian on disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F4,
    F8,
    I4,
    U4,
}

impl Dtype {
    fn token(self) -> &'static str {
        match self {
            Dtype::F4 => "<f4",
            Dtype::F8 => "<f8",
            Dtype::I4 => "<i4",
            Dtype::U4 => "<u4",
        }
    }

    fn size(self) -> usize {
        match self {
            Dtype::F8 => 8,
            _ => 4,
        }
    }

    fn parse(token: &str) -> Option<Self> {
        [Dtype::F4, Dtype::F8, Dtype::I4, Dtype::U4]
            .into_iter()
            .find(|d| d.token() == token)
    }
}

/// A decoded raster: header dimensions plus the raw payload bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub width: u32,
    pub height: u32,
    pub channels: usize,
    pub dtype: Dtype,
    pub payload: Vec<u8>,
}

pub fn encode_raster(width: u32, height: u32, channels: usize, dtype: Dtype, payload: Vec<u8>) -> Vec<u8> {
    let mut out = format!(
        "{RASTER_MAGIC} {BUNDLE_VERSION} {width} {height} {channels} {}\n",
        dtype.token()
    )
    .into_bytes();
    out.extend(payload);
    out
}

fn le_f32(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn le_u32(values: &[u32]) -> Vec<u8> {
    values.iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn le_i32(values: &[i32]) -> Vec<u8> {
    values.iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn words(bytes: &[u8]) -> impl Iterator<Item = [u8; 4]> + '_ {
    bytes.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]])
}

/// Splits off the first text line; returns it and the payload offset.
fn header_line<'a>(file: &str, bytes: &'a [u8]) -> Result<(&'a str, usize)> {
    let end = bytes
        .iter()
        .take(256)
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format(file, 0, "no header line"))?;
    let line = std::str::from_utf8(&bytes[..end]).map_err(|_| Error::format(file, 0, "header is not UTF-8"))?;
    Ok((line, end + 1))
}

fn check_magic(file: &str, fields: &[&str], magic: &str) -> Result<()> {
    if fields.first() != Some(&magic) {
        return Err(Error::format(file, 0, format!("missing {magic} magic")));
    }
    match fields.get(1) {
        Some(&v) if v == BUNDLE_VERSION => Ok(()),
        v => Err(Error::Version {
            file: file.into(),
            found: v.unwrap_or(&"").to_string(),
            expected: BUNDLE_VERSION.into(),
        }),
    }
}

pub fn decode_raster(file: &str, bytes: &[u8]) -> Result<Raster> {
    let (line, start) = header_line(file, bytes)?;
    let fields: Vec<&str> = line.split_whitespace().collect();
    check_magic(file, &fields, RASTER_MAGIC)?;
    if fields.len() != 6 {
        return Err(Error::format(
            file,
            0,
            format!("raster header needs 6 fields, found {}", fields.len()),
        ));
    }
    let dim = |i: usize| -> Result<usize> {
        fields[i]
            .parse()
            .map_err(|_| Error::format(file, 0, format!("header field {:?} is not a size", fields[i])))
    };
    let (width, height, channels) = (dim(2)?, dim(3)?, dim(4)?);
    let dtype = match Dtype::parse(fields[5]) {
        Some(d) => d,
        None if fields[5].starts_with('>') => {
            return Err(Error::format(
                file,
                0,
                format!("big-endian payload {} is not supported", fields[5]),
            ))
        }
        None => return Err(Error::format(file, 0, format!("unknown dtype {:?}", fields[5]))),
    };
    let expected = width * height * channels * dtype.size();
    let payload = &bytes[start..];
    if payload.len() != expected {
        return Err(Error::format(
            file,
            (start + payload.len().min(expected)) as u64,
            format!("payload holds {} bytes, header implies {expected}", payload.len()),
        ));
    }
    Ok(Raster {
        width: width as u32,
        height: height as u32,
        channels,
        dtype,
        payload: payload.to_vec(),
    })
}

impl Raster {
    fn expect(&self, file: &str, width: u32, height: u32, channels: usize, dtype: Dtype) -> Result<()> {
        if (self.width, self.height, self.channels, self.dtype) != (width, height, channels, dtype) {
            return Err(Error::format(
                file,
                0,
                format!(
                    "raster is {}x{}x{} {}, expected {width}x{height}x{channels} {}",
                    self.width,
                    self.height,
                    self.channels,
                    self.dtype.token(),
                    dtype.token()
                ),
            ));
        }
        Ok(())
    }

    pub fn f32s(&self) -> Vec<f32> {
        words(&self.payload).map(f32::from_le_bytes).collect()
    }

    pub fn u32s(&self) -> Vec<u32> {
        words(&self.payload).map(u32::from_le_bytes).collect()
    }

    pub fn i32s(&self) -> Vec<i32> {
        words(&self.payload).map(i32::from_le_bytes).collect()
    }

    pub fn f64s(&self) -> Vec<f64> {
        self.payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect()
    }
}

pub fn encode_points(cloud: &PointCloud) -> Vec<u8> {
    let n = cloud.len();
    let mut out = format!(
        "{POINTS_MAGIC} {BUNDLE_VERSION} {n} {} {}\n",
        u8::from(cloud.gt_labels.is_some()),
        u8::from(cloud.object_ids.is_some())
    )
    .into_bytes();
    out.extend(
        cloud
            .positions
            .iter()
            .flat_map(|p| p.iter().flat_map(|x| x.to_le_bytes())),
    );
    for extra in [&cloud.gt_labels, &cloud.object_ids].into_iter().flatten() {
        out.extend(le_u32(extra));
    }
    out
}

/// Parses `points.bin`; `expected_n` comes from the manifest.
pub fn decode_points(file: &str, bytes: &[u8], expected_n: Option<usize>) -> Result<PointCloud> {
    let (line, start) = header_line(file, bytes)?;
    let fields: Vec<&str> = line.split_whitespace().collect();
    check_magic(file, &fields, POINTS_MAGIC)?;
    if fields.len() != 5 {
        return Err(Error::format(
            file,
            0,
            format!("points header needs 5 fields, found {}", fields.len()),
        ));
    }
    let n: usize = fields[2]
        .parse()
        .map_err(|_| Error::format(file, 0, "point count is not an integer"))?;
    if let Some(m) = expected_n {
        if m != n {
            return Err(Error::format(
                file,
                0,
                format!("manifest declares N={m} but {file} holds N={n}"),
            ));
        }
    }
    let flag = |i: usize| match fields[i] {
        "0" => Ok(false),
        "1" => Ok(true),
        f => Err(Error::format(file, 0, format!("flag {f:?} must be 0 or 1"))),
    };
    let (has_labels, has_objects) = (flag(3)?, flag(4)?);
    let expected = 12 * n + 4 * n * (usize::from(has_labels) + usize::from(has_objects));
    let payload = &bytes[start..];
    if payload.len() != expected {
        return Err(Error::format(
            file,
            (start + payload.len().min(expected)) as u64,
            format!("payload holds {} bytes, header implies {expected}", payload.len()),
        ));
    }
    let floats: Vec<f32> = words(&payload[..12 * n]).map(f32::from_le_bytes).collect();
    let mut cloud = PointCloud::new(floats.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect());
    let mut rest = words(&payload[12 * n..]).map(u32::from_le_bytes);
    if has_labels {
        cloud.gt_labels = Some(rest.by_ref().take(n).collect());
    }
    if has_objects {
        cloud.object_ids = Some(rest.take(n).collect());
    }
    Ok(cloud)
}

fn camera_line(c: &CameraModel) -> String {
    let mut parts = vec![
        format!("{:.8e}", c.fx),
        format!("{:.8e}", c.fy),
        format!("{:.8e}", c.cx),
        format!("{:.8e}", c.cy),
        c.width.to_string(),
        c.height.to_string(),
    ];
    parts.extend(c.rotation.iter().flatten().map(|x| format!("{x:.8e}")));
    parts.extend(c.translation.iter().map(|x| format!("{x:.8e}")));
    parts.join(" ")
}

fn parse_camera(line: &str, offset: usize) -> Result<CameraModel> {
    const FILE: &str = "cameras.txt";
    let f: Vec<&str> = line.split_whitespace().collect();
    if f.len() != 18 {
        return Err(Error::format(
            FILE,
            offset as u64,
            format!("camera line has {} fields, expected 18", f.len()),
        ));
    }
    let x = |i: usize| -> Result<f64> {
        f[i].parse()
            .map_err(|_| Error::format(FILE, offset as u64, format!("{:?} is not a number", f[i])))
    };
    let px = |i: usize| -> Result<u32> {
        f[i].parse()
            .map_err(|_| Error::format(FILE, offset as u64, format!("{:?} is not a pixel count", f[i])))
    };
    let mut rotation = [[0.0; 3]; 3];
    for (i, r) in rotation.iter_mut().flatten().enumerate() {
        *r = x(6 + i)?;
    }
    CameraModel::new(
        x(0)?,
        x(1)?,
        x(2)?,
        x(3)?,
        rotation,
        [x(15)?, x(16)?, x(17)?],
        px(4)?,
        px(5)?,
    )
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read(dir: &Path, name: &str) -> Result<Vec<u8>> {
    let path = dir.join(name);
    fs::read(&path).map_err(|e| Error::io(&path, e))
}

/// Ground-truth class per pixel of every view, IGNORE where nothing is visible.
pub fn gt_label_rasters(scene: &Scene) -> Result<Vec<Vec<i32>>> {
    let rendered = scene.render()?;
    Ok((0..scene.cameras.len())
        .map(|k| {
            rendered
                .gt_pixels(scene, k)
                .into_iter()
                .map(|g| g.map_or(IGNORE, |g| g as i32))
                .collect()
        })
        .collect())
}

/// Writes every artifact of a scene into `dir`, creating it if needed.
pub fn write_bundle(
    scene: &Scene,
    oracles: &OracleOutputs,
    dir: &Path,
    seed: u64,
    config_hash: &str,
) -> Result<Manifest> {
    scene.validate()?;
    oracles.validate(scene)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = Manifest {
        classes: scene.classes,
        points: scene.cloud.len(),
        views: scene.cameras.len(),
        object_count: scene.object_count,
        instance_classes: scene.instance_classes.clone(),
        room: scene.room,
        appearance_channels: scene.appearance.channels,
        feature_dim: oracles.features[0].dim,
        embed_dim: oracles.embeddings.dim,
        mask_counts: oracles.masks.iter().map(|m| m.count).collect(),
        seed,
        config_hash: config_hash.to_string(),
    };

    write_atomic(&dir.join("points.bin"), &encode_points(&scene.cloud))?;
    let cameras: String = scene.cameras.iter().map(|c| camera_line(c) + "\n").collect();
    write_atomic(&dir.join("cameras.txt"), cameras.as_bytes())?;
    let n = scene.cloud.len() as u32;
    write_atomic(
        &dir.join("appearance.bin"),
        &encode_raster(
            n,
            1,
            scene.appearance.channels,
            Dtype::F4,
            le_f32(&scene.appearance.values),
        ),
    )?;
    let e = &oracles.embeddings;
    write_atomic(
        &dir.join("embeddings.bin"),
        &encode_raster(
            e.dim as u32,
            e.classes as u32,
            1,
            Dtype::F8,
            e.rows.iter().flat_map(|x| x.to_le_bytes()).collect(),
        ),
    )?;
    let labels = gt_label_rasters(scene)?;
    for (k, cam) in scene.cameras.iter().enumerate() {
        let (w, h) = (cam.width, cam.height);
        let s = &oracles.scores[k];
        let m = &oracles.masks[k];
        let f = &oracles.features[k];
        write_atomic(
            &dir.join(format!("view_{k}.scores.bin")),
            &encode_raster(w, h, s.classes, Dtype::F4, le_f32(&s.data)),
        )?;
        write_atomic(
            &dir.join(format!("view_{k}.masks.bin")),
            &encode_raster(w, h, 1, Dtype::U4, le_u32(&m.ids)),
        )?;
        write_atomic(
            &dir.join(format!("view_{k}.feat.bin")),
            &encode_raster(w, h, f.dim, Dtype::F4, le_f32(&f.data)),
        )?;
        write_atomic(
            &dir.join(format!("view_{k}.labels.bin")),
            &encode_raster(w, h, 1, Dtype::I4, le_i32(&labels[k])),
        )?;
    }
    // the manifest goes last so a complete manifest implies complete files
    write_atomic(&dir.join("manifest.txt"), manifest.to_text().as_bytes())?;
    Ok(manifest)
}

/// Reads and re-validates a bundle written by [`write_bundle`].
pub fn read_bundle(dir: &Path) -> Result<(Scene, OracleOutputs, Manifest)> {
    let text = read(dir, "manifest.txt")?;
    let text = String::from_utf8(text).map_err(|_| Error::format("manifest.txt", 0, "not UTF-8"))?;
    let manifest = Manifest::parse(&text)?;

    let cloud = decode_points("points.bin", &read(dir, "points.bin")?, Some(manifest.points))?;
    let camera_text =
        String::from_utf8(read(dir, "cameras.txt")?).map_err(|_| Error::format("cameras.txt", 0, "not UTF-8"))?;
    let mut cameras = Vec::new();
    let mut offset = 0;
    for line in camera_text.lines() {
        if !line.trim().is_empty() {
            cameras.push(parse_camera(line, offset)?);
        }
        offset += line.len() + 1;
    }
    if cameras.len() != manifest.views {
        return Err(Error::format(
            "cameras.txt",
            0,
            format!(
                "manifest declares {} views but cameras.txt holds {}",
                manifest.views,
                cameras.len()
            ),
        ));
    }

    let n = manifest.points as u32;
    let appearance = decode_raster("appearance.bin", &read(dir, "appearance.bin")?)?;
    appearance.expect("appearance.bin", n, 1, manifest.appearance_channels, Dtype::F4)?;
    let embeddings = decode_raster("embeddings.bin", &read(dir, "embeddings.bin")?)?;
    embeddings.expect(
        "embeddings.bin",
        manifest.embed_dim as u32,
        manifest.classes as u32,
        1,
        Dtype::F8,
    )?;
    let embeddings = ClassEmbeddingTable {
        classes: manifest.classes,
        dim: manifest.embed_dim,
        rows: embeddings.f64s(),
    };
    if embeddings.rows.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("embeddings.bin".into()));
    }
    let scene = Scene {
        cloud,
        cameras,
        classes: manifest.classes,
        object_count: manifest.object_count,
        instance_classes: manifest.instance_classes.clone(),
        appearance: Appearance {
            channels: manifest.appearance_channels,
            values: appearance.f32s(),
        },
        room: manifest.room,
    };
    scene.validate()?;

    let mut oracles = OracleOutputs {
        scores: Vec::new(),
        masks: Vec::new(),
        features: Vec::new(),
        embeddings,
    };
    let gt = gt_label_rasters(&scene)?;
    for (k, cam) in scene.cameras.iter().enumerate() {
        let (w, h) = (cam.width, cam.height);
        let name = |kind: &str| format!("view_{k}.{kind}.bin");
        let load = |kind: &str| -> Result<Raster> { decode_raster(&name(kind), &read(dir, &name(kind))?) };

        let scores = load("scores")?;
        scores.expect(&name("scores"), w, h, manifest.classes, Dtype::F4)?;
        oracles.scores.push(ScoreMap {
            width: w,
            height: h,
            classes: manifest.classes,
            data: scores.f32s(),
        });

        let masks = load("masks")?;
        masks.expect(&name("masks"), w, h, 1, Dtype::U4)?;
        let count = *manifest
            .mask_counts
            .get(k)
            .ok_or_else(|| Error::format("manifest.txt", 0, format!("no mask count for view {k}")))?;
        oracles.masks.push(MaskMap {
            width: w,
            height: h,
            count,
            ids: masks.u32s(),
        });

        let feat = load("feat")?;
        feat.expect(&name("feat"), w, h, manifest.feature_dim, Dtype::F4)?;
        oracles.features.push(FeatureMap {
            width: w,
            height: h,
            dim: manifest.feature_dim,
            data: feat.f32s(),
        });

        let labels = load("labels")?;
        labels.expect(&name("labels"), w, h, 1, Dtype::I4)?;
        if labels.i32s() != gt[k] {
            return Err(Error::format(
                &name("labels"),
                0,
                "labels disagree with the projected point labels",
            ));
        }
    }
    oracles.validate(&scene)?;
    Ok((scene, oracles, manifest))
}
