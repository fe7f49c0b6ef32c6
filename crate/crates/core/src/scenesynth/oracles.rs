use std::collections::VecDeque;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{RenderedScene, Scene, BACKGROUND_CLASS};
use crate::error::{Error, Result};
use crate::seed;

/// Per-pixel class scores for one view, channel-last.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    pub width: u32,
    pub height: u32,
    pub classes: usize,
    pub data: Vec<f32>,
}

impl ScoreMap {
    pub fn pixel(&self, index: usize) -> &[f32] {
        &self.data[index * self.classes..(index + 1) * self.classes]
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

/// Per-pixel mask ids for one view. Ids are contiguous from 0 in order of
/// first appearance in a row-major scan.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskMap {
    pub width: u32,
    pub height: u32,
    pub count: u32,
    pub ids: Vec<u32>,
}

/// Per-pixel unit embeddings for one view, channel-last.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub width: u32,
    pub height: u32,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn pixel(&self, index: usize) -> &[f32] {
        &self.data[index * self.dim..(index + 1) * self.dim]
    }
}

/// One unit-norm text embedding per class, row-major `classes x dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassEmbeddingTable {
    pub classes: usize,
    pub dim: usize,
    pub rows: Vec<f64>,
}

impl ClassEmbeddingTable {
    pub fn row(&self, class: usize) -> &[f64] {
        &self.rows[class * self.dim..(class + 1) * self.dim]
    }

    pub fn max_coherence(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.classes {
            for j in i + 1..self.classes {
                let d: f64 = self.row(i).iter().zip(self.row(j)).map(|(a, b)| a * b).sum();
                worst = worst.max(d.abs());
            }
        }
        worst
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipNoise {
    /// Probability that a block's labels are replaced by a wrong class.
    pub eps: f64,
    /// Side length of the square pixel blocks sharing one noise draw.
    pub block: u32,
    /// Score advantage of the emitted class over every other class.
    pub margin: f64,
}

impl Default for ClipNoise {
    fn default() -> Self {
        ClipNoise {
            eps: 0.4,
            block: 4,
            margin: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamFragmentation {
    pub splits_per_object: u32,
    pub boundary_jitter_px: u32,
}

impl Default for SamFragmentation {
    fn default() -> Self {
        SamFragmentation {
            splits_per_object: 3,
            boundary_jitter_px: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TextEmbeddingConfig {
    pub max_coherence: f64,
    pub orthogonalize: bool,
    pub max_attempts: usize,
}

impl Default for TextEmbeddingConfig {
    fn default() -> Self {
        TextEmbeddingConfig {
            max_coherence: 0.3,
            orthogonalize: false,
            max_attempts: 1000,
        }
    }
}

/// Noisy dense class scores standing in for a zero-shot pixel classifier.
///
/// Noise is drawn once per `block x block` tile: with probability `eps` every
/// visible pixel of the tile emits a wrong class (the same draw picks the
/// wrong class index relative to each pixel's own ground truth). Pixels with
/// no visible point emit the background class.
pub fn mock_clip_scores(
    scene: &Scene,
    rendered: &RenderedScene,
    camera: usize,
    noise: &ClipNoise,
    seed: u64,
) -> Result<ScoreMap> {
    if !(0.0..=1.0).contains(&noise.eps) {
        return Err(Error::Config(format!("clip eps must lie in [0, 1], got {}", noise.eps)));
    }
    if noise.block == 0 {
        return Err(Error::Config("clip noise block must be >= 1".into()));
    }
    if !(noise.margin > 0.0) {
        return Err(Error::Config("clip margin must be positive".into()));
    }
    let view = &rendered.views[camera];
    let (w, h) = (view.width as usize, view.height as usize);
    let l = scene.classes;
    let gt = rendered.gt_pixels(scene, camera);

    let block = noise.block as usize;
    let (bw, bh) = (w.div_ceil(block), h.div_ceil(block));
    let mut block_rng = seed::rng(seed, "clip-block", camera as u64);
    let draws: Vec<(bool, usize)> = (0..bw * bh)
        .map(|_| {
            let flip = block_rng.random::<f64>() < noise.eps;
            let r = block_rng.random_range(0..l.max(2) - 1);
            (flip, r)
        })
        .collect();

    let mut jitter_rng = seed::rng(seed, "clip-jitter", camera as u64);
    let mut data = Vec::with_capacity(w * h * l);
    for v in 0..h {
        for u in 0..w {
            let chosen = match gt[v * w + u] {
                Some(g) => {
                    let (flip, r) = draws[(v / block) * bw + u / block];
                    if flip && l > 1 {
                        let g = g as usize;
                        if r >= g {
                            r + 1
                        } else {
                            r
                        }
                    } else {
                        g as usize
                    }
                }
                None => BACKGROUND_CLASS as usize,
            };
            for c in 0..l {
                let j = 0.25 * noise.margin * jitter_rng.random::<f64>();
                let s = if c == chosen { noise.margin + j } else { j };
                data.push(s as f32);
            }
        }
    }
    Ok(ScoreMap {
        width: view.width,
        height: view.height,
        classes: l,
        data,
    })
}

fn relabel_by_first_appearance(ids: &[u32]) -> (Vec<u32>, u32) {
    let mut map = std::collections::HashMap::new();
    let out = ids
        .iter()
        .map(|&id| {
            let next = map.len() as u32;
            *map.entry(id).or_insert(next)
        })
        .collect();
    (out, map.len() as u32)
}

/// Over-segmented instance masks standing in for class-agnostic automatic
/// mask generation.
///
/// Every rendered instance region is split into `splits_per_object`
/// fragments grown from farthest-point seeds; empty pixels form one mask per
/// 4-connected component. Boundary jitter resamples mask ids through a
/// tile-wise random displacement of up to `boundary_jitter_px` pixels.
pub fn mock_sam_masks(
    scene: &Scene,
    rendered: &RenderedScene,
    camera: usize,
    frag: &SamFragmentation,
    seed: u64,
) -> Result<MaskMap> {
    if frag.splits_per_object == 0 {
        return Err(Error::Config("splits_per_object must be >= 1".into()));
    }
    let view = &rendered.views[camera];
    let (w, h) = (view.width as usize, view.height as usize);
    let instances = rendered.instance_pixels(scene, camera);
    let mut rng = seed::rng(seed, "sam-mask", camera as u64);

    // Group pixels by region key: Some(instance) or None for empty space.
    let mut regions: std::collections::BTreeMap<u32, Vec<usize>> = Default::default();
    for (p, inst) in instances.iter().enumerate() {
        if let Some(i) = inst {
            regions.entry(*i).or_default().push(p);
        }
    }

    const UNSET: u32 = u32::MAX;
    let mut raw = vec![UNSET; w * h];
    let mut next_id = 0u32;

    for pixels in regions.values() {
        let k = (frag.splits_per_object as usize).min(pixels.len());
        let xy = |p: usize| ((p % w) as f64, (p / w) as f64);
        let mut seeds = vec![pixels[rng.random_range(0..pixels.len())]];
        let mut dist: Vec<f64> = pixels.iter().map(|&p| sq_dist(xy(p), xy(seeds[0]))).collect();
        while seeds.len() < k {
            let (far, _) = dist
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                .expect("region is non-empty");
            let s = pixels[far];
            seeds.push(s);
            for (d, &p) in dist.iter_mut().zip(pixels) {
                *d = d.min(sq_dist(xy(p), xy(s)));
            }
        }
        let inst = instances[pixels[0]];
        let in_region = |p: usize| instances[p] == inst;

        let mut queue = VecDeque::new();
        for (j, &s) in seeds.iter().enumerate() {
            raw[s] = next_id + j as u32;
            queue.push_back(s);
        }
        grow(&mut raw, &mut queue, w, h, &in_region);

        // Components unreachable from any seed join the nearest seed's fragment.
        for &p in pixels {
            if raw[p] != UNSET {
                continue;
            }
            let nearest = seeds
                .iter()
                .enumerate()
                .min_by(|a, b| sq_dist(xy(p), xy(*a.1)).total_cmp(&sq_dist(xy(p), xy(*b.1))))
                .map(|(j, _)| j)
                .expect("at least one seed");
            raw[p] = next_id + nearest as u32;
            queue.push_back(p);
            grow(&mut raw, &mut queue, w, h, &in_region);
        }
        next_id += k as u32;
    }

    // Empty pixels: one mask per connected component.
    for p in 0..w * h {
        if raw[p] == UNSET && instances[p].is_none() {
            raw[p] = next_id;
            let mut queue = VecDeque::from([p]);
            grow(&mut raw, &mut queue, w, h, &|q: usize| instances[q].is_none());
            next_id += 1;
        }
    }

    let jitter = frag.boundary_jitter_px as i64;
    let jittered: Vec<u32> = if jitter == 0 {
        raw
    } else {
        const TILE: usize = 4;
        let (tw, th) = (w.div_ceil(TILE), h.div_ceil(TILE));
        let offsets: Vec<(i64, i64)> = (0..tw * th)
            .map(|_| (rng.random_range(-jitter..=jitter), rng.random_range(-jitter..=jitter)))
            .collect();
        (0..w * h)
            .map(|p| {
                let (u, v) = ((p % w) as i64, (p / w) as i64);
                let (dx, dy) = offsets[(p / w / TILE) * tw + (p % w) / TILE];
                let su = (u + dx).clamp(0, w as i64 - 1) as usize;
                let sv = (v + dy).clamp(0, h as i64 - 1) as usize;
                raw[sv * w + su]
            })
            .collect()
    };

    let (ids, count) = relabel_by_first_appearance(&jittered);
    Ok(MaskMap {
        width: view.width,
        height: view.height,
        count,
        ids,
    })
}

fn sq_dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)
}

/// Breadth-first flood of labels from the queued pixels into unset
/// 4-neighbors accepted by `allowed`.
fn grow(raw: &mut [u32], queue: &mut VecDeque<usize>, w: usize, h: usize, allowed: &dyn Fn(usize) -> bool) {
    while let Some(p) = queue.pop_front() {
        let (u, v) = (p % w, p / w);
        let id = raw[p];
        let mut visit = |q: usize| {
            if raw[q] == u32::MAX && allowed(q) {
                raw[q] = id;
                queue.push_back(q);
            }
        };
        if u > 0 {
            visit(p - 1);
        }
        if u + 1 < w {
            visit(p + 1);
        }
        if v > 0 {
            visit(p - w);
        }
        if v + 1 < h {
            visit(p + w);
        }
    }
}

fn unit_gaussian(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Frozen per-pixel embeddings: each instance owns a random unit anchor
/// (shared across views), each pixel is its anchor plus isotropic gaussian
/// noise, renormalized. Empty pixels share one extra anchor.
pub fn mock_sam_features(
    scene: &Scene,
    rendered: &RenderedScene,
    camera: usize,
    dim: usize,
    within_noise_sigma: f64,
    seed: u64,
) -> Result<FeatureMap> {
    if dim < 2 {
        return Err(Error::Config(format!("feature dim must be >= 2, got {dim}")));
    }
    if !(within_noise_sigma >= 0.0) {
        return Err(Error::Config("feature noise sigma must be non-negative".into()));
    }
    let view = &rendered.views[camera];
    let mut anchor_rng = seed::rng(seed, "sam-anchor", 0);
    let anchors: Vec<Vec<f64>> = (0..=scene.instance_classes.len())
        .map(|_| unit_gaussian(dim, &mut anchor_rng))
        .collect();
    let empty = scene.instance_classes.len();

    let mut rng = seed::rng(seed, "sam-feature", camera as u64);
    let mut data = Vec::with_capacity(view.pixel_count() * dim);
    for inst in rendered.instance_pixels(scene, camera) {
        let anchor = &anchors[inst.map_or(empty, |i| i as usize)];
        let v: Vec<f64> = anchor
            .iter()
            .map(|&a| {
                let n: f64 = StandardNormal.sample(&mut rng);
                a + within_noise_sigma * n
            })
            .collect();
        let n = norm(&v);
        let v: Vec<f64> = if n > 1e-12 {
            v.iter().map(|x| x / n).collect()
        } else {
            anchor.clone()
        };
        data.extend(v.iter().map(|&x| x as f32));
    }
    Ok(FeatureMap {
        width: view.width,
        height: view.height,
        dim,
        data,
    })
}

/// Random unit class embeddings with bounded pairwise coherence, or an
/// orthonormal set when `orthogonalize` is set.
pub fn mock_text_embeddings(
    classes: usize,
    dim: usize,
    seed: u64,
    config: &TextEmbeddingConfig,
) -> Result<ClassEmbeddingTable> {
    if classes == 0 || dim == 0 {
        return Err(Error::Config("text embeddings need classes >= 1 and dim >= 1".into()));
    }
    if dim < classes {
        log::warn!("text embedding dim {dim} is below class count {classes}; coherence target may be infeasible");
    }
    let mut rng = seed::rng(seed, "text", 0);
    if config.orthogonalize {
        if dim < classes {
            return Err(Error::Config(format!(
                "cannot orthogonalize {classes} embeddings in dimension {dim}"
            )));
        }
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(classes);
        while rows.len() < classes {
            let mut v = unit_gaussian(dim, &mut rng);
            for _ in 0..2 {
                for r in &rows {
                    let d: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
                    v.iter_mut().zip(r).for_each(|(a, b)| *a -= d * b);
                }
            }
            let n = norm(&v);
            if n > 1e-6 {
                rows.push(v.into_iter().map(|x| x / n).collect());
            }
        }
        return Ok(ClassEmbeddingTable {
            classes,
            dim,
            rows: rows.concat(),
        });
    }
    for _ in 0..config.max_attempts {
        let rows: Vec<f64> = (0..classes).flat_map(|_| unit_gaussian(dim, &mut rng)).collect();
        let table = ClassEmbeddingTable { classes, dim, rows };
        if table.max_coherence() <= config.max_coherence {
            return Ok(table);
        }
    }
    Err(Error::Config(format!(
        "no {classes}x{dim} embedding table with coherence <= {} after {} attempts",
        config.max_coherence, config.max_attempts
    )))
}

/// Settings of every mock oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleConfig {
    pub clip: ClipNoise,
    pub sam: SamFragmentation,
    pub feature_dim: usize,
    pub feature_sigma: f64,
    pub embed_dim: usize,
    pub text: TextEmbeddingConfig,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            clip: ClipNoise::default(),
            sam: SamFragmentation::default(),
            feature_dim: 16,
            feature_sigma: 0.15,
            embed_dim: 64,
            text: TextEmbeddingConfig::default(),
        }
    }
}

/// Everything the frozen oracles emit for one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleOutputs {
    pub scores: Vec<ScoreMap>,
    pub masks: Vec<MaskMap>,
    pub features: Vec<FeatureMap>,
    pub embeddings: ClassEmbeddingTable,
}

impl OracleOutputs {
    pub fn validate(&self, scene: &Scene) -> Result<()> {
        let views = scene.cameras.len();
        if self.scores.len() != views || self.masks.len() != views || self.features.len() != views {
            return Err(Error::Shape(format!(
                "{views} views but {} score, {} mask and {} feature maps",
                self.scores.len(),
                self.masks.len(),
                self.features.len()
            )));
        }
        if self.embeddings.classes != scene.classes {
            return Err(Error::Shape(format!(
                "{} text embeddings for {} classes",
                self.embeddings.classes, scene.classes
            )));
        }
        for (k, cam) in scene.cameras.iter().enumerate() {
            let (w, h) = (cam.width, cam.height);
            let px = cam.pixel_count();
            let s = &self.scores[k];
            let m = &self.masks[k];
            let f = &self.features[k];
            if (s.width, s.height, m.width, m.height, f.width, f.height) != (w, h, w, h, w, h) {
                return Err(Error::Shape(format!(
                    "view {k}: raster size differs from the {w}x{h} camera"
                )));
            }
            if s.classes != scene.classes || s.data.len() != px * s.classes {
                return Err(Error::Shape(format!("view {k}: score map has the wrong shape")));
            }
            if m.ids.len() != px || m.ids.iter().any(|&i| i >= m.count) {
                return Err(Error::Shape(format!(
                    "view {k}: mask ids exceed the declared count {}",
                    m.count
                )));
            }
            if f.dim != self.features[0].dim || f.data.len() != px * f.dim {
                return Err(Error::Shape(format!("view {k}: feature map has the wrong shape")));
            }
            if s.data.iter().chain(&f.data).any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("view {k} oracle output")));
            }
        }
        Ok(())
    }
}

/// Runs every mock oracle on every view.
pub fn run_oracles(scene: &Scene, rendered: &RenderedScene, config: &OracleConfig, seed: u64) -> Result<OracleOutputs> {
    let views = scene.cameras.len();
    let clip_seed = seed::derive(seed, "clip", 0);
    let sam_seed = seed::derive(seed, "sam", 0);
    let feat_seed = seed::derive(seed, "feature", 0);
    let scores = (0..views)
        .map(|k| mock_clip_scores(scene, rendered, k, &config.clip, clip_seed))
        .collect::<Result<_>>()?;
    let masks = (0..views)
        .map(|k| mock_sam_masks(scene, rendered, k, &config.sam, sam_seed))
        .collect::<Result<_>>()?;
    let features = (0..views)
        .map(|k| mock_sam_features(scene, rendered, k, config.feature_dim, config.feature_sigma, feat_seed))
        .collect::<Result<_>>()?;
    let embeddings = mock_text_embeddings(
        scene.classes,
        config.embed_dim,
        seed::derive(seed, "text", 0),
        &config.text,
    )?;
    Ok(OracleOutputs {
        scores,
        masks,
        features,
        embeddings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{CameraModel, PointCloud};
    use crate::scenesynth::{generate_scene, Appearance, SceneConfig};

    fn standard() -> (Scene, RenderedScene) {
        let scene = generate_scene(&SceneConfig::default(), 21).unwrap();
        let rendered = scene.render().unwrap();
        (scene, rendered)
    }

    fn argmax(s: &[f32]) -> usize {
        let mut best = 0;
        for (i, &x) in s.iter().enumerate() {
            if x > s[best] {
                best = i;
            }
        }
        best
    }

    /// Two square patches of points in front of an identity camera.
    fn two_object_view() -> (Scene, RenderedScene) {
        let mut positions = Vec::new();
        let mut labels = Vec::new();
        let mut ids = Vec::new();
        for (id, x0) in [(0u32, -0.5f32), (1u32, 0.1f32)] {
            for i in 0..20 {
                for j in 0..20 {
                    positions.push([x0 + 0.02 * i as f32, -0.2 + 0.02 * j as f32, 2.0]);
                    labels.push(id + 1);
                    ids.push(id);
                }
            }
        }
        let n = positions.len();
        let scene = Scene {
            cloud: PointCloud {
                positions,
                gt_labels: Some(labels),
                object_ids: Some(ids),
            },
            cameras: vec![CameraModel::identity(50.0, 64, 48)],
            classes: 3,
            object_count: 2,
            instance_classes: vec![1, 2],
            appearance: Appearance {
                channels: 1,
                values: vec![0.5; n],
            },
            room: [1.0, 1.0, 1.0],
        };
        scene.validate().unwrap();
        let rendered = scene.render().unwrap();
        (scene, rendered)
    }

    #[test]
    fn noiseless_scores_recover_ground_truth() {
        let (scene, r) = standard();
        let noise = ClipNoise {
            eps: 0.0,
            ..ClipNoise::default()
        };
        for k in 0..scene.cameras.len() {
            let s = mock_clip_scores(&scene, &r, k, &noise, 1).unwrap();
            for (p, g) in r.gt_pixels(&scene, k).iter().enumerate() {
                let expected = g.unwrap_or(BACKGROUND_CLASS) as usize;
                assert_eq!(argmax(s.pixel(p)), expected);
            }
        }
    }

    #[test]
    fn full_noise_never_hits_ground_truth() {
        let (scene, r) = standard();
        let noise = ClipNoise {
            eps: 1.0,
            block: 1,
            ..ClipNoise::default()
        };
        let s = mock_clip_scores(&scene, &r, 0, &noise, 1).unwrap();
        for (p, g) in r.gt_pixels(&scene, 0).iter().enumerate() {
            if let Some(g) = g {
                assert_ne!(argmax(s.pixel(p)), *g as usize);
            }
        }
    }

    #[test]
    fn iid_flip_rate_concentrates() {
        let (scene, r) = standard();
        let noise = ClipNoise {
            eps: 0.4,
            block: 1,
            ..ClipNoise::default()
        };
        let (mut flips, mut total) = (0usize, 0usize);
        let mut seed = 0;
        while total < 10_000 {
            for k in 0..scene.cameras.len() {
                let s = mock_clip_scores(&scene, &r, k, &noise, seed).unwrap();
                for (p, g) in r.gt_pixels(&scene, k).iter().enumerate() {
                    if let Some(g) = g {
                        total += 1;
                        flips += usize::from(argmax(s.pixel(p)) != *g as usize);
                    }
                }
            }
            seed += 1;
        }
        let rate = flips as f64 / total as f64;
        assert!((rate - 0.4).abs() < 0.02, "rate {rate} over {total} pixels");
    }

    #[test]
    fn scores_are_pure_in_seed() {
        let (scene, r) = standard();
        let a = mock_clip_scores(&scene, &r, 1, &ClipNoise::default(), 4).unwrap();
        let b = mock_clip_scores(&scene, &r, 1, &ClipNoise::default(), 4).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_split_masks_match_instance_regions() {
        let (scene, r) = standard();
        let frag = SamFragmentation {
            splits_per_object: 1,
            boundary_jitter_px: 0,
        };
        for k in 0..scene.cameras.len() {
            let m = mock_sam_masks(&scene, &r, k, &frag, 3).unwrap();
            let inst = r.instance_pixels(&scene, k);
            let mut mask_to_inst = std::collections::HashMap::new();
            let mut inst_to_mask = std::collections::HashMap::new();
            for (p, &id) in m.ids.iter().enumerate() {
                if let Some(i) = inst[p] {
                    assert_eq!(*mask_to_inst.entry(id).or_insert(Some(i)), Some(i));
                    assert_eq!(*inst_to_mask.entry(i).or_insert(id), id);
                } else {
                    assert_eq!(*mask_to_inst.entry(id).or_insert(None), None);
                }
            }
        }
    }

    #[test]
    fn split_count_on_two_object_view() {
        let (scene, r) = two_object_view();
        let frag = SamFragmentation {
            splits_per_object: 3,
            boundary_jitter_px: 0,
        };
        let m = mock_sam_masks(&scene, &r, 0, &frag, 0).unwrap();
        let inst = r.instance_pixels(&scene, 0);
        let object_masks: std::collections::BTreeSet<u32> = m
            .ids
            .iter()
            .zip(&inst)
            .filter(|(_, i)| i.is_some())
            .map(|(&id, _)| id)
            .collect();
        assert_eq!(object_masks.len(), 6);
        // the empty surround is one connected component
        assert_eq!(m.count, 7);
    }

    #[test]
    fn mask_ids_are_contiguous() {
        let (scene, r) = standard();
        let m = mock_sam_masks(&scene, &r, 2, &SamFragmentation::default(), 8).unwrap();
        let distinct: std::collections::BTreeSet<u32> = m.ids.iter().copied().collect();
        assert_eq!(distinct.len() as u32, m.count);
        assert_eq!(*distinct.iter().next_back().unwrap(), m.count - 1);
        assert_eq!(m.ids[0], 0);
    }

    #[test]
    fn noiseless_features_share_instance_anchor() {
        let (scene, r) = standard();
        let f = mock_sam_features(&scene, &r, 0, 16, 0.0, 2).unwrap();
        let inst = r.instance_pixels(&scene, 0);
        let mut first: std::collections::HashMap<Option<u32>, usize> = Default::default();
        for (p, i) in inst.iter().enumerate() {
            let q = *first.entry(*i).or_insert(p);
            assert_eq!(f.pixel(p), f.pixel(q));
        }
    }

    #[test]
    fn features_are_unit_norm() {
        let (scene, r) = standard();
        let f = mock_sam_features(&scene, &r, 1, 32, 0.3, 2).unwrap();
        for p in 0..(f.width * f.height) as usize {
            let n: f64 = f.pixel(p).iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn orthogonal_text_embeddings() {
        let cfg = TextEmbeddingConfig {
            orthogonalize: true,
            ..Default::default()
        };
        let t = mock_text_embeddings(4, 4, 9, &cfg).unwrap();
        assert!(t.max_coherence() < 1e-9);
        for c in 0..4 {
            let n: f64 = t.row(c).iter().map(|x| x * x).sum();
            assert!((n - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn wide_text_embeddings_meet_coherence_bound() {
        let t = mock_text_embeddings(8, 512, 1, &TextEmbeddingConfig::default()).unwrap();
        // direct Gram matrix
        for i in 0..8 {
            for j in 0..8 {
                let d: f64 = t.row(i).iter().zip(t.row(j)).map(|(a, b)| a * b).sum();
                if i == j {
                    assert!((d - 1.0).abs() < 1e-9);
                } else {
                    assert!(d.abs() <= 0.3);
                }
            }
        }
        assert_eq!(
            t,
            mock_text_embeddings(8, 512, 1, &TextEmbeddingConfig::default()).unwrap()
        );
    }

    #[test]
    fn infeasible_coherence_fails() {
        let cfg = TextEmbeddingConfig {
            max_coherence: 0.01,
            max_attempts: 20,
            ..Default::default()
        };
        assert!(mock_text_embeddings(8, 3, 1, &cfg).is_err());
    }
}
