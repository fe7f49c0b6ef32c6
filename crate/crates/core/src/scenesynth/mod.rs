//! Synthetic labeled rooms and the mock foundation-model oracles that stand
//! in for dense CLIP scores, SAM masks and SAM features.

mod descriptors;
mod oracles;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::geometry::{build_correspondences, CameraModel, CorrespondenceSet, PointCloud};
use crate::seed;

pub use descriptors::{pixel_descriptor_dim, pixel_descriptors, point_descriptor_dim, point_descriptors};
pub use oracles::{
    mock_clip_scores, mock_sam_features, mock_sam_masks, mock_text_embeddings, run_oracles, ClassEmbeddingTable,
    ClipNoise, FeatureMap, MaskMap, OracleConfig, OracleOutputs, SamFragmentation, ScoreMap, TextEmbeddingConfig,
};

/// Class id reserved for floor, walls and empty pixels.
pub const BACKGROUND_CLASS: u32 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    /// Room extent along x, y and its height, in meters.
    pub room: [f64; 3],
    pub object_count: usize,
    pub points_per_object: usize,
    /// Floor and wall sampling density, points per square meter.
    pub background_density: f64,
    pub classes: usize,
    pub camera_count: usize,
    pub image_width: u32,
    pub image_height: u32,
    pub fov_deg: f64,
    pub camera_height: f64,
    /// Ring radius as a fraction of half the smaller room side.
    pub ring_radius_frac: f64,
    pub look_at_height: f64,
    pub appearance_channels: usize,
    pub object_color_sigma: f64,
    pub point_color_sigma: f64,
    pub max_placement_attempts: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            room: [6.0, 6.0, 3.0],
            object_count: 12,
            points_per_object: 600,
            background_density: 60.0,
            classes: 8,
            camera_count: 4,
            image_width: 64,
            image_height: 48,
            fov_deg: 70.0,
            camera_height: 2.6,
            ring_radius_frac: 0.8,
            look_at_height: 0.4,
            appearance_channels: 3,
            object_color_sigma: 0.08,
            point_color_sigma: 0.05,
            max_placement_attempts: 1000,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.room.iter().any(|&r| !(r > 0.0)) {
            return bad(format!("room extents must be positive: {:?}", self.room));
        }
        if self.classes < 1 {
            return bad("classes must be >= 1".into());
        }
        if self.object_count > 0 && self.classes < 2 {
            return bad("objects need at least one non-background class".into());
        }
        if self.camera_count == 0 {
            return bad("camera_count must be >= 1".into());
        }
        if self.image_width == 0 || self.image_height == 0 {
            return bad("image size must be at least 1x1".into());
        }
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            return bad(format!("fov_deg must lie in (0, 180), got {}", self.fov_deg));
        }
        if self.appearance_channels == 0 {
            return bad("appearance_channels must be >= 1".into());
        }
        if !(self.camera_height > 0.0 && self.ring_radius_frac > 0.0 && self.ring_radius_frac < 1.0) {
            return bad("camera ring must lie inside the room".into());
        }
        if self.object_count > 0 && self.points_per_object == 0 {
            return bad("points_per_object must be >= 1".into());
        }
        if !(self.background_density >= 0.0) || !(self.object_color_sigma >= 0.0) || !(self.point_color_sigma >= 0.0) {
            return bad("densities and sigmas must be non-negative".into());
        }
        Ok(())
    }
}

/// Per-point color channels, row-major `N x channels`.
#[derive(Debug, Clone, PartialEq)]
pub struct Appearance {
    pub channels: usize,
    pub values: Vec<f32>,
}

impl Appearance {
    pub fn color(&self, point: usize) -> &[f32] {
        &self.values[point * self.channels..(point + 1) * self.channels]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub cloud: PointCloud,
    pub cameras: Vec<CameraModel>,
    pub classes: usize,
    /// Number of placed boxes (floor and walls are extra instances).
    pub object_count: usize,
    /// Class of every instance id.
    pub instance_classes: Vec<u32>,
    pub appearance: Appearance,
    pub room: [f64; 3],
}

impl Scene {
    pub fn gt_labels(&self) -> &[u32] {
        self.cloud.gt_labels.as_deref().expect("scene clouds carry labels")
    }

    pub fn object_ids(&self) -> &[u32] {
        self.cloud.object_ids.as_deref().expect("scene clouds carry object ids")
    }

    pub fn validate(&self) -> Result<()> {
        self.cloud.validate(Some(self.classes))?;
        let n = self.cloud.len();
        let (Some(labels), Some(ids)) = (&self.cloud.gt_labels, &self.cloud.object_ids) else {
            return Err(Error::Shape("scene cloud needs labels and object ids".into()));
        };
        for (i, (&l, &o)) in labels.iter().zip(ids).enumerate() {
            match self.instance_classes.get(o as usize) {
                Some(&c) if c == l => {}
                Some(&c) => {
                    return Err(Error::Shape(format!(
                        "point {i}: object {o} has class {c} but point label is {l}"
                    )))
                }
                None => return Err(Error::Shape(format!("point {i}: unknown object id {o}"))),
            }
        }
        if self.appearance.channels == 0 || self.appearance.values.len() != n * self.appearance.channels {
            return Err(Error::Shape(format!(
                "appearance holds {} values for {n} points x {} channels",
                self.appearance.values.len(),
                self.appearance.channels
            )));
        }
        if self.appearance.values.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("appearance".into()));
        }
        if self.cameras.is_empty() {
            return Err(Error::Shape("scene has no cameras".into()));
        }
        for cam in &self.cameras {
            cam.validate()?;
        }
        Ok(())
    }

    /// Projects the cloud into every camera.
    pub fn render(&self) -> Result<RenderedScene> {
        let corr = build_correspondences(&self.cameras, &self.cloud, 0.0)?;
        Ok(RenderedScene::new(self, corr))
    }
}

/// A scene's correspondence set plus per-view pixel lookups.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedScene {
    pub corr: CorrespondenceSet,
    pub views: Vec<ViewRender>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewRender {
    pub width: u32,
    pub height: u32,
    /// Correspondence entry owning each pixel, row-major.
    pub entry: Vec<Option<u32>>,
}

impl ViewRender {
    pub fn pixel_count(&self) -> usize {
        self.entry.len()
    }
}

impl RenderedScene {
    pub fn new(scene: &Scene, corr: CorrespondenceSet) -> Self {
        let views = scene
            .cameras
            .iter()
            .enumerate()
            .map(|(k, cam)| ViewRender {
                width: cam.width,
                height: cam.height,
                entry: corr.pixel_index(k as u32, cam.width, cam.height),
            })
            .collect();
        RenderedScene { corr, views }
    }

    /// Point owning each pixel of a view.
    pub fn point_at(&self, camera: usize) -> Vec<Option<u32>> {
        self.views[camera]
            .entry
            .iter()
            .map(|e| e.map(|e| self.corr.entries[e as usize].point))
            .collect()
    }

    /// Rendered ground-truth class per pixel; `None` where no point is visible.
    pub fn gt_pixels(&self, scene: &Scene, camera: usize) -> Vec<Option<u32>> {
        let labels = scene.gt_labels();
        self.point_at(camera)
            .into_iter()
            .map(|p| p.map(|p| labels[p as usize]))
            .collect()
    }

    pub fn instance_pixels(&self, scene: &Scene, camera: usize) -> Vec<Option<u32>> {
        let ids = scene.object_ids();
        self.point_at(camera)
            .into_iter()
            .map(|p| p.map(|p| ids[p as usize]))
            .collect()
    }
}

/// Rounds to 9 significant decimal digits, the precision of `cameras.txt`.
pub fn quantize9(x: f64) -> f64 {
    format!("{x:.8e}").parse().expect("formatted float parses")
}

/// Points `(x, y)` on the unit circle with `x = a / 5^k`, `y = b / 5^k`.
///
/// Rotations assembled from these have short exact decimal expansions, so
/// cameras survive the 9-digit text encoding without losing orthonormality.
fn rational_unit_points(max_power: u32) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    for k in 0..=max_power {
        let scale = 5f64.powi(k as i32);
        // modulus 5^k means norm 25^k: 2k prime factors (2 +/- i)
        for a in 0..=2 * k {
            let (mut re, mut im) = (1i64, 0i64);
            for step in 0..2 * k {
                let (c, d) = if step < a { (2, 1) } else { (2, -1) };
                (re, im) = (re * c - im * d, re * d + im * c);
            }
            let (x, y) = (re as f64 / scale, im as f64 / scale);
            for (sx, sy) in [(x, y), (y, x)] {
                for (mx, my) in [(1.0, 1.0), (-1.0, 1.0), (1.0, -1.0), (-1.0, -1.0)] {
                    out.push((sx * mx, sy * my));
                }
            }
        }
    }
    out
}

fn nearest_rational_direction(angle: f64, max_power: u32) -> (f64, f64) {
    let target = (angle.cos(), angle.sin());
    rational_unit_points(max_power)
        .into_iter()
        .min_by(|a, b| {
            let da = (a.0 - target.0).powi(2) + (a.1 - target.1).powi(2);
            let db = (b.0 - target.0).powi(2) + (b.1 - target.1).powi(2);
            da.total_cmp(&db)
        })
        .expect("candidate set is non-empty")
}

/// Camera on a horizontal ring, looking at `target` with a downward pitch.
fn ring_camera(config: &SceneConfig, target: [f64; 3], azimuth: f64) -> Result<CameraModel> {
    let half = 0.5 * config.room[0].min(config.room[1]);
    let radius = config.ring_radius_frac * half;
    let (ca, sa) = nearest_rational_direction(azimuth, 5);
    let drop = config.camera_height - target[2];
    let (cb, sb) = nearest_rational_direction(drop.atan2(radius), 3);
    let center = [target[0] + radius * ca, target[1] + radius * sa, config.camera_height];

    let q = quantize9;
    let rotation = [
        [q(-sa), q(ca), 0.0],
        [q(sb * ca), q(sb * sa), q(-cb)],
        [q(-cb * ca), q(-cb * sa), q(-sb)],
    ];
    let mut translation = [0.0; 3];
    for (i, t) in translation.iter_mut().enumerate() {
        *t = q(-(0..3).map(|j| rotation[i][j] * center[j]).sum::<f64>());
    }
    let (w, h) = (config.image_width, config.image_height);
    let f = q(0.5 * f64::from(w) / (0.5 * config.fov_deg.to_radians()).tan());
    CameraModel::new(
        f,
        f,
        q(0.5 * f64::from(w - 1)),
        q(0.5 * f64::from(h - 1)),
        rotation,
        translation,
        w,
        h,
    )
}

struct Placed {
    min: [f64; 3],
    max: [f64; 3],
}

impl Placed {
    fn overlaps_xy(&self, other: &Placed, gap: f64) -> bool {
        self.min[0] < other.max[0] + gap
            && other.min[0] < self.max[0] + gap
            && self.min[1] < other.max[1] + gap
            && other.min[1] < self.max[1] + gap
    }

    fn contains_xy(&self, x: f64, y: f64) -> bool {
        x >= self.min[0] && x <= self.max[0] && y >= self.min[1] && y <= self.max[1]
    }
}

fn gaussian(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Samples `count` points on the top and side faces of a box, area-weighted.
fn sample_box_surface(b: &Placed, count: usize, rng: &mut impl Rng) -> Vec<[f64; 3]> {
    let d = [b.max[0] - b.min[0], b.max[1] - b.min[1], b.max[2] - b.min[2]];
    // top, -x, +x, -y, +y
    let areas = [d[0] * d[1], d[1] * d[2], d[1] * d[2], d[0] * d[2], d[0] * d[2]];
    let total: f64 = areas.iter().sum();
    (0..count)
        .map(|_| {
            let mut pick = rng.random::<f64>() * total;
            let mut face = 0;
            while face < 4 && pick >= areas[face] {
                pick -= areas[face];
                face += 1;
            }
            let (s, t): (f64, f64) = (rng.random(), rng.random());
            match face {
                0 => [b.min[0] + s * d[0], b.min[1] + t * d[1], b.max[2]],
                1 => [b.min[0], b.min[1] + s * d[1], b.min[2] + t * d[2]],
                2 => [b.max[0], b.min[1] + s * d[1], b.min[2] + t * d[2]],
                3 => [b.min[0] + s * d[0], b.min[1], b.min[2] + t * d[2]],
                _ => [b.min[0] + s * d[0], b.max[1], b.min[2] + t * d[2]],
            }
        })
        .collect()
}

struct CloudBuilder {
    positions: Vec<[f32; 3]>,
    labels: Vec<u32>,
    ids: Vec<u32>,
    colors: Vec<f32>,
    instance_classes: Vec<u32>,
}

impl CloudBuilder {
    fn add_instance(
        &mut self,
        class: u32,
        points: Vec<[f64; 3]>,
        base_color: &[f64],
        point_sigma: f64,
        rng: &mut impl Rng,
    ) {
        let id = self.instance_classes.len() as u32;
        self.instance_classes.push(class);
        for p in points {
            self.positions.push([p[0] as f32, p[1] as f32, p[2] as f32]);
            self.labels.push(class);
            self.ids.push(id);
            for &c in base_color {
                self.colors.push((c + point_sigma * gaussian(rng)) as f32);
            }
        }
    }
}

/// Generates a room with floor, four walls and non-overlapping boxes, plus a
/// ring of cameras looking at the room center. Fully determined by `seed`.
pub fn generate_scene(config: &SceneConfig, seed: u64) -> Result<Scene> {
    config.validate()?;
    const CAMERA_RETRIES: u64 = 16;
    for attempt in 0..CAMERA_RETRIES {
        let scene = generate_attempt(config, seed, attempt)?;
        let rendered = scene.render()?;
        if (0..scene.cameras.len()).all(|k| !rendered.corr.view(k as u32).is_empty()) {
            return Ok(scene);
        }
        log::debug!("seed {seed}: attempt {attempt} left a camera blind, resampling");
    }
    Err(Error::Placement(format!(
        "every camera must see at least one point; gave up after {CAMERA_RETRIES} layouts"
    )))
}

fn generate_attempt(config: &SceneConfig, seed: u64, attempt: u64) -> Result<Scene> {
    let mut rng = seed::rng(seed, "scene", attempt);
    let [rx, ry, rz] = config.room;
    let channels = config.appearance_channels;
    let classes = config.classes;

    let palette: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..channels).map(|_| rng.random::<f64>()).collect())
        .collect();
    let instance_color = |class: u32, rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
        palette[class as usize]
            .iter()
            .map(|&c| c + config.object_color_sigma * gaussian(rng))
            .collect()
    };

    // Object classes: every non-background class once before any repeats.
    let object_classes: Vec<u32> = {
        let mut cycle: Vec<u32> = Vec::with_capacity(config.object_count);
        while cycle.len() < config.object_count {
            let mut round: Vec<u32> = (1..classes as u32).collect();
            for i in (1..round.len()).rev() {
                round.swap(i, rng.random_range(0..=i));
            }
            cycle.extend(round);
        }
        cycle.truncate(config.object_count);
        cycle
    };

    let margin = 0.3;
    let gap = 0.1;
    let mut boxes: Vec<Placed> = Vec::with_capacity(config.object_count);
    for obj in 0..config.object_count {
        let mut placed = None;
        for _ in 0..config.max_placement_attempts {
            let sx = rng.random_range(0.4..1.2f64).min(rx - 2.0 * margin);
            let sy = rng.random_range(0.4..1.2f64).min(ry - 2.0 * margin);
            let sz = rng.random_range(0.3..1.5f64).min(0.9 * config.camera_height);
            if sx <= 0.0 || sy <= 0.0 {
                break;
            }
            let x0 = rng.random_range(margin..(rx - margin - sx).max(margin + 1e-9));
            let y0 = rng.random_range(margin..(ry - margin - sy).max(margin + 1e-9));
            let cand = Placed {
                min: [x0, y0, 0.0],
                max: [x0 + sx, y0 + sy, sz],
            };
            if boxes.iter().all(|b| !b.overlaps_xy(&cand, gap)) {
                placed = Some(cand);
                break;
            }
        }
        match placed {
            Some(b) => boxes.push(b),
            None => {
                return Err(Error::Placement(format!(
                    "object {obj} could not be placed after {} attempts",
                    config.max_placement_attempts
                )))
            }
        }
    }

    let mut builder = CloudBuilder {
        positions: Vec::new(),
        labels: Vec::new(),
        ids: Vec::new(),
        colors: Vec::new(),
        instance_classes: Vec::new(),
    };

    // floor
    let floor_n = (rx * ry * config.background_density).round() as usize;
    let floor: Vec<[f64; 3]> = (0..floor_n)
        .map(|_| [rng.random::<f64>() * rx, rng.random::<f64>() * ry, 0.0])
        .filter(|p| boxes.iter().all(|b| !b.contains_xy(p[0], p[1])))
        .collect();
    let color = instance_color(BACKGROUND_CLASS, &mut rng);
    builder.add_instance(BACKGROUND_CLASS, floor, &color, config.point_color_sigma, &mut rng);

    // walls: x=0, x=rx, y=0, y=ry
    for wall in 0..4 {
        let length = if wall < 2 { ry } else { rx };
        let n = (length * rz * config.background_density).round() as usize;
        let pts: Vec<[f64; 3]> = (0..n)
            .map(|_| {
                let (s, z) = (rng.random::<f64>() * length, rng.random::<f64>() * rz);
                match wall {
                    0 => [0.0, s, z],
                    1 => [rx, s, z],
                    2 => [s, 0.0, z],
                    _ => [s, ry, z],
                }
            })
            .collect();
        let color = instance_color(BACKGROUND_CLASS, &mut rng);
        builder.add_instance(BACKGROUND_CLASS, pts, &color, config.point_color_sigma, &mut rng);
    }

    for (b, &class) in boxes.iter().zip(&object_classes) {
        let pts = sample_box_surface(b, config.points_per_object, &mut rng);
        let color = instance_color(class, &mut rng);
        builder.add_instance(class, pts, &color, config.point_color_sigma, &mut rng);
    }

    let target = [0.5 * rx, 0.5 * ry, config.look_at_height];
    let phase = rng.random::<f64>() * std::f64::consts::TAU;
    let cameras = (0..config.camera_count)
        .map(|k| {
            let azimuth = phase + std::f64::consts::TAU * k as f64 / config.camera_count as f64;
            ring_camera(config, target, azimuth)
        })
        .collect::<Result<Vec<_>>>()?;

    let scene = Scene {
        cloud: PointCloud {
            positions: builder.positions,
            gt_labels: Some(builder.labels),
            object_ids: Some(builder.ids),
        },
        cameras,
        classes,
        object_count: config.object_count,
        instance_classes: builder.instance_classes,
        appearance: Appearance {
            channels,
            values: builder.colors,
        },
        room: config.room,
    };
    scene.validate()?;
    Ok(scene)
}
