//! Pinhole projection and z-buffered pixel-point correspondences.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Points closer to the image plane than this are never projected.
pub const DEFAULT_DEPTH_MIN: f64 = 1e-4;

pub type Mat3 = [[f64; 3]; 3];
pub type Vec3 = [f64; 3];

/// Pinhole intrinsics plus a rigid world-to-camera transform.
///
/// Pixel centers sit on integer coordinates: a point projects to the pixel
/// whose center is nearest to its continuous image position.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// World-to-camera rotation, row-major.
    pub rotation: Mat3,
    pub translation: Vec3,
    pub width: u32,
    pub height: u32,
}

/// Image position and depth of a projected point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: u32,
    pub v: u32,
    pub depth: f64,
}

impl CameraModel {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        rotation: Mat3,
        translation: Vec3,
        width: u32,
        height: u32,
    ) -> Result<Self> {
        let camera = CameraModel {
            fx,
            fy,
            cx,
            cy,
            rotation,
            translation,
            width,
            height,
        };
        camera.validate()?;
        Ok(camera)
    }

    /// Axis-aligned camera at the origin looking down +z.
    pub fn identity(f: f64, width: u32, height: u32) -> Self {
        CameraModel {
            fx: f,
            fy: f,
            cx: f64::from(width) / 2.0,
            cy: f64::from(height) / 2.0,
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy]
            .iter()
            .chain(self.rotation.iter().flatten())
            .chain(self.translation.iter())
            .all(|x| x.is_finite());
        if !finite {
            return Err(Error::Camera("non-finite parameter".into()));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Camera(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Camera(format!(
                "image size must be at least 1x1 (got {}x{})",
                self.width, self.height
            )));
        }
        let err = orthonormality_error(&self.rotation);
        if err >= 1e-9 {
            return Err(Error::Camera(format!(
                "rotation is not orthonormal (|R^T R - I|_inf = {err:e})"
            )));
        }
        if determinant(&self.rotation) <= 0.0 {
            return Err(Error::Camera("rotation has negative determinant".into()));
        }
        Ok(())
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn to_camera_frame(&self, point: Vec3) -> Vec3 {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[0][0] * point[0] + r[0][1] * point[1] + r[0][2] * point[2] + t[0],
            r[1][0] * point[0] + r[1][1] * point[1] + r[1][2] * point[2] + t[1],
            r[2][0] * point[0] + r[2][1] * point[1] + r[2][2] * point[2] + t[2],
        ]
    }

    pub fn project_with_min_depth(&self, point: Vec3, depth_min: f64) -> Option<Projection> {
        let [xc, yc, zc] = self.to_camera_frame(point);
        if !(zc > depth_min) {
            return None;
        }
        let u = (self.fx * xc / zc + self.cx).round();
        let v = (self.fy * yc / zc + self.cy).round();
        if !(u >= 0.0 && v >= 0.0 && u < f64::from(self.width) && v < f64::from(self.height)) {
            return None;
        }
        Some(Projection {
            u: u as u32,
            v: v as u32,
            depth: zc,
        })
    }

    /// Camera center in world coordinates, `-R^T t`.
    pub fn center(&self) -> Vec3 {
        let r = &self.rotation;
        let t = &self.translation;
        let mut c = [0.0; 3];
        for (j, cj) in c.iter_mut().enumerate() {
            *cj = -(r[0][j] * t[0] + r[1][j] * t[1] + r[2][j] * t[2]);
        }
        c
    }
}

pub fn project_point(camera: &CameraModel, point: Vec3) -> Option<Projection> {
    camera.project_with_min_depth(point, DEFAULT_DEPTH_MIN)
}

pub fn orthonormality_error(r: &Mat3) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..3 {
        for j in 0..3 {
            let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((dot - target).abs());
        }
    }
    worst
}

pub fn determinant(r: &Mat3) -> f64 {
    r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1]) - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
        + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0])
}

/// World-space points with optional ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub positions: Vec<[f32; 3]>,
    pub gt_labels: Option<Vec<u32>>,
    pub object_ids: Option<Vec<u32>>,
}

impl PointCloud {
    pub fn new(positions: Vec<[f32; 3]>) -> Self {
        PointCloud {
            positions,
            gt_labels: None,
            object_ids: None,
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn position(&self, index: usize) -> Vec3 {
        let p = self.positions[index];
        [f64::from(p[0]), f64::from(p[1]), f64::from(p[2])]
    }

    pub fn validate(&self, classes: Option<usize>) -> Result<()> {
        let n = self.len();
        if n == 0 {
            return Err(Error::Shape("point cloud is empty".into()));
        }
        if self.positions.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("point position".into()));
        }
        if let Some(labels) = &self.gt_labels {
            if labels.len() != n {
                return Err(Error::Shape(format!("{} labels for {n} points", labels.len())));
            }
            if let Some(l) = classes {
                if let Some(bad) = labels.iter().find(|&&c| c as usize >= l) {
                    return Err(Error::Shape(format!("label {bad} out of range for {l} classes")));
                }
            }
        }
        if let Some(ids) = &self.object_ids {
            if ids.len() != n {
                return Err(Error::Shape(format!("{} object ids for {n} points", ids.len())));
            }
        }
        Ok(())
    }
}

/// One pixel-point pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub point: u32,
    pub camera: u32,
    pub u: u32,
    pub v: u32,
    pub depth: f64,
}

/// Dense pixel-point pairs, ordered by `(camera, v, u)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CorrespondenceSet {
    pub entries: Vec<Correspondence>,
}

impl CorrespondenceSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries of one camera as a contiguous slice.
    pub fn view(&self, camera: u32) -> &[Correspondence] {
        let start = self.entries.partition_point(|e| e.camera < camera);
        let end = self.entries.partition_point(|e| e.camera <= camera);
        &self.entries[start..end]
    }

    /// Per-pixel entry index for one camera (row-major), `None` where no point won.
    pub fn pixel_index(&self, camera: u32, width: u32, height: u32) -> Vec<Option<u32>> {
        let mut map = vec![None; width as usize * height as usize];
        let start = self.entries.partition_point(|e| e.camera < camera);
        for (offset, e) in self.view(camera).iter().enumerate() {
            map[(e.v * width + e.u) as usize] = Some((start + offset) as u32);
        }
        map
    }

    /// Entry indices grouped by point, each group in ascending camera order.
    pub fn by_point(&self, point_count: usize) -> Vec<Vec<u32>> {
        let mut groups = vec![Vec::new(); point_count];
        for (i, e) in self.entries.iter().enumerate() {
            groups[e.point as usize].push(i as u32);
        }
        groups
    }
}

/// Z-buffer one camera. Within a cell, candidates whose depth lies within
/// `depth_tolerance` of the nearest are tied and the lowest point index wins.
fn zbuffer_view(
    camera_index: u32,
    camera: &CameraModel,
    cloud: &PointCloud,
    depth_tolerance: f64,
) -> Vec<Correspondence> {
    let w = camera.width as usize;
    let projected: Vec<Option<Projection>> = (0..cloud.len())
        .map(|i| project_point(camera, cloud.position(i)))
        .collect();

    let mut nearest = vec![f64::INFINITY; camera.pixel_count()];
    for p in projected.iter().flatten() {
        let cell = p.v as usize * w + p.u as usize;
        if p.depth < nearest[cell] {
            nearest[cell] = p.depth;
        }
    }

    let mut winner: Vec<Option<(u32, f64)>> = vec![None; camera.pixel_count()];
    for (i, p) in projected.iter().enumerate() {
        let Some(p) = p else { continue };
        let cell = p.v as usize * w + p.u as usize;
        if winner[cell].is_none() && p.depth <= nearest[cell] + depth_tolerance {
            winner[cell] = Some((i as u32, p.depth));
        }
    }

    winner
        .iter()
        .enumerate()
        .filter_map(|(cell, w_)| {
            w_.map(|(point, depth)| Correspondence {
                point,
                camera: camera_index,
                u: (cell % w) as u32,
                v: (cell / w) as u32,
                depth,
            })
        })
        .collect()
}

/// Builds the pixel-point correspondence set: one entry per (camera, pixel)
/// cell holding the nearest point that projects into it.
pub fn build_correspondences(
    cameras: &[CameraModel],
    cloud: &PointCloud,
    depth_tolerance: f64,
) -> Result<CorrespondenceSet> {
    if cameras.is_empty() {
        return Err(Error::Config("at least one camera is required".into()));
    }
    if !(depth_tolerance >= 0.0) {
        return Err(Error::Config(format!(
            "depth_tolerance must be >= 0 (got {depth_tolerance})"
        )));
    }
    let per_view: Vec<Vec<Correspondence>> = cameras
        .par_iter()
        .enumerate()
        .map(|(k, cam)| zbuffer_view(k as u32, cam, cloud, depth_tolerance))
        .collect();
    Ok(CorrespondenceSet {
        entries: per_view.into_iter().flatten().collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam() -> CameraModel {
        CameraModel {
            fx: 100.0,
            fy: 100.0,
            cx: 64.0,
            cy: 64.0,
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
            width: 128,
            height: 128,
        }
    }

    #[test]
    fn optical_axis_hits_principal_point() {
        let p = project_point(&cam(), [0.0, 0.0, 2.0]).unwrap();
        assert_eq!((p.u, p.v, p.depth), (64, 64, 2.0));
    }

    #[test]
    fn behind_camera_is_invisible() {
        assert!(project_point(&cam(), [0.0, 0.0, -1.0]).is_none());
        assert!(project_point(&cam(), [0.0, 0.0, 0.5e-4]).is_none());
    }

    #[test]
    fn analytic_pinhole_offset() {
        let p = project_point(&cam(), [0.5, 0.0, 1.0]).unwrap();
        assert_eq!((p.u, p.v, p.depth), (114, 64, 1.0));
    }

    #[test]
    fn out_of_frame_after_rounding() {
        // u = 100 * 0.64 + 64 = 128 -> outside a 128-wide image
        assert!(project_point(&cam(), [0.64, 0.0, 1.0]).is_none());
        // u = 127.4 rounds to 127 -> inside
        assert_eq!(project_point(&cam(), [0.634, 0.0, 1.0]).unwrap().u, 127);
    }

    #[test]
    fn invalid_cameras_rejected() {
        let mut c = cam();
        c.fx = 0.0;
        assert!(c.validate().is_err());
        let mut c = cam();
        c.rotation[0][1] = 1e-6;
        assert!(c.validate().is_err());
        let mut c = cam();
        c.rotation = [[-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(c.validate().is_err());
        let mut c = cam();
        c.height = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn nearer_point_wins_the_cell() {
        let cloud = PointCloud::new(vec![[0.0, 0.0, 3.0], [0.0, 0.0, 1.0]]);
        let corr = build_correspondences(&[cam()], &cloud, 0.0).unwrap();
        assert_eq!(corr.len(), 1);
        assert_eq!(corr.entries[0].point, 1);
        assert_eq!(corr.entries[0].depth, 1.0);
    }

    #[test]
    fn single_visible_point_single_entry() {
        let cloud = PointCloud::new(vec![[0.1, -0.2, 2.0], [0.0, 0.0, -2.0]]);
        let corr = build_correspondences(&[cam()], &cloud, 0.0).unwrap();
        assert_eq!(corr.len(), 1);
        assert_eq!(corr.entries[0].point, 0);
    }

    #[test]
    fn no_cameras_is_an_error() {
        let cloud = PointCloud::new(vec![[0.0, 0.0, 1.0]]);
        assert!(build_correspondences(&[], &cloud, 0.0).is_err());
    }

    #[test]
    fn entries_are_canonically_ordered() {
        let cloud = PointCloud::new(vec![[0.3, 0.3, 1.0], [-0.3, -0.3, 1.0], [0.3, -0.3, 1.0]]);
        let corr = build_correspondences(&[cam(), cam()], &cloud, 0.0).unwrap();
        let keys: Vec<_> = corr.entries.iter().map(|e| (e.camera, e.v, e.u)).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
        assert_eq!(corr.view(1).len(), 3);
    }

    #[test]
    fn tolerance_band_prefers_lowest_index() {
        let cloud = PointCloud::new(vec![[0.0, 0.0, 1.005], [0.0, 0.0, 1.0]]);
        let strict = build_correspondences(&[cam()], &cloud, 0.0).unwrap();
        assert_eq!(strict.entries[0].point, 1);
        let banded = build_correspondences(&[cam()], &cloud, 0.01).unwrap();
        assert_eq!(banded.len(), 1);
        assert_eq!(banded.entries[0].point, 0);
    }
}
