//! Hand-built input descriptors for the small 2D and 3D encoders.
//!
//! Pixels: normalized image position, the rendered color and the mean color
//! of the visible 3x3 neighborhood. Points: normalized room coordinates, the
//! point color and the mean color of its voxel.

use std::collections::HashMap;

use super::{RenderedScene, Scene};

const VOXEL_SIZE: f64 = 0.3;

pub fn pixel_descriptor_dim(channels: usize) -> usize {
    2 + 2 * channels
}

pub fn point_descriptor_dim(channels: usize) -> usize {
    3 + 2 * channels
}

/// One descriptor row per correspondence entry, in entry order.
pub fn pixel_descriptors(scene: &Scene, rendered: &RenderedScene) -> Vec<f64> {
    let c = scene.appearance.channels;
    let dim = pixel_descriptor_dim(c);
    let mut out = Vec::with_capacity(rendered.corr.len() * dim);
    for e in &rendered.corr.entries {
        let view = &rendered.views[e.camera as usize];
        let (w, h) = (view.width as i64, view.height as i64);
        out.push(f64::from(e.u) / w as f64 - 0.5);
        out.push(f64::from(e.v) / h as f64 - 0.5);
        out.extend(
            scene
                .appearance
                .color(e.point as usize)
                .iter()
                .map(|&x| f64::from(x) - 0.5),
        );

        let mut sum = vec![0.0; c];
        let mut n = 0usize;
        for dv in -1..=1i64 {
            for du in -1..=1i64 {
                let (u, v) = (i64::from(e.u) + du, i64::from(e.v) + dv);
                if u < 0 || v < 0 || u >= w || v >= h {
                    continue;
                }
                if let Some(other) = view.entry[(v * w + u) as usize] {
                    let p = rendered.corr.entries[other as usize].point as usize;
                    for (s, &x) in sum.iter_mut().zip(scene.appearance.color(p)) {
                        *s += f64::from(x);
                    }
                    n += 1;
                }
            }
        }
        out.extend(sum.iter().map(|s| s / n as f64 - 0.5));
    }
    out
}

/// One descriptor row per point.
pub fn point_descriptors(scene: &Scene) -> Vec<f64> {
    let c = scene.appearance.channels;
    let n = scene.cloud.len();
    let voxel = |i: usize| {
        let p = scene.cloud.position(i);
        (
            (p[0] / VOXEL_SIZE).floor() as i64,
            (p[1] / VOXEL_SIZE).floor() as i64,
            (p[2] / VOXEL_SIZE).floor() as i64,
        )
    };
    let mut sums: HashMap<(i64, i64, i64), (Vec<f64>, usize)> = HashMap::new();
    for i in 0..n {
        let entry = sums.entry(voxel(i)).or_insert_with(|| (vec![0.0; c], 0));
        for (s, &x) in entry.0.iter_mut().zip(scene.appearance.color(i)) {
            *s += f64::from(x);
        }
        entry.1 += 1;
    }
    let mut out = Vec::with_capacity(n * point_descriptor_dim(c));
    for i in 0..n {
        let p = scene.cloud.position(i);
        for (x, extent) in p.iter().zip(scene.room) {
            out.push(x / extent - 0.5);
        }
        out.extend(scene.appearance.color(i).iter().map(|&x| f64::from(x) - 0.5));
        let (sum, count) = &sums[&voxel(i)];
        out.extend(sum.iter().map(|s| s / *count as f64 - 0.5));
    }
    out
}
