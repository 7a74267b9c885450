//! Raw sensor measurements to pixel-aligned image-plane tensors. All four
//! streams end up on the same camera plane so the fusion network gets
//! pixel-wise correspondence; pixels without a measurement are exactly zero.
//!
//! Vehicle frame convention: x forward, y left, z up, origin on the ground
//! under the sensor rig. The camera looks along +x from its mount height.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAX_RADAR_TARGETS: usize = 100;

/// Target plane extents in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlaneSize {
    pub h: usize,
    pub w: usize,
}

impl PlaneSize {
    pub fn new(h: usize, w: usize) -> Self {
        PlaneSize { h, w }
    }
}

/// Rigid sensor mount: rotation then translation, sensor frame to vehicle
/// frame.
#[derive(Debug, Clone, Copy)]
pub struct Pose {
    pub rotation: [[f32; 3]; 3],
    pub translation: [f32; 3],
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0, 0.0, 0.0],
        }
    }

    pub fn translated(t: [f32; 3]) -> Self {
        Pose { translation: t, ..Pose::identity() }
    }
}

/// Pinhole intrinsics plus per-sensor extrinsic poses.
#[derive(Debug, Clone)]
pub struct CalibrationModel {
    pub fx: f32,
    pub fy: f32,
    pub cx: f32,
    pub cy: f32,
    pub camera_pose: Pose,
    pub lidar_pose: Pose,
    pub radar_pose: Pose,
}

impl CalibrationModel {
    /// Default rig for a given plane: focal lengths chosen for roughly a
    /// 40 x 22 degree field of view, camera 1.6 m above ground, lidar and
    /// radar co-mounted above/below it.
    pub fn default_for(size: PlaneSize) -> Self {
        let fov_h = 39.6f32.to_radians();
        let fov_v = 21.7f32.to_radians();
        CalibrationModel {
            fx: size.w as f32 / 2.0 / (fov_h / 2.0).tan(),
            fy: size.h as f32 / 2.0 / (fov_v / 2.0).tan(),
            cx: (size.w as f32 - 1.0) / 2.0,
            cy: (size.h as f32 - 1.0) / 2.0,
            camera_pose: Pose::translated([0.0, 0.0, 1.6]),
            lidar_pose: Pose::translated([0.0, 0.0, 1.9]),
            radar_pose: Pose::translated([0.0, 0.0, 0.5]),
        }
    }

    /// Projects a vehicle-frame point to pixel coordinates; None when the
    /// point is behind the image plane.
    pub fn project(&self, p: [f32; 3]) -> Option<(f32, f32)> {
        let c = self.camera_pose.translation;
        let (xc, yc, zc) = (-(p[1] - c[1]), -(p[2] - c[2]), p[0] - c[0]);
        if zc <= 1e-3 {
            return None;
        }
        Some((self.fx * xc / zc + self.cx, self.fy * yc / zc + self.cy))
    }

    /// Euclidean range from the camera origin.
    pub fn camera_range(&self, p: [f32; 3]) -> f32 {
        let c = self.camera_pose.translation;
        let (dx, dy, dz) = (p[0] - c[0], p[1] - c[1], p[2] - c[2]);
        (dx * dx + dy * dy + dz * dz).sqrt()
    }
}

/// Normalization bounds for the encoded planes.
#[derive(Debug, Clone, Copy)]
pub struct EncodeParams {
    /// Longest range mapped into the depth plane, meters.
    pub max_range: f32,
    /// Height plane bounds, meters above ground.
    pub z_min: f32,
    pub z_max: f32,
}

impl Default for EncodeParams {
    fn default() -> Self {
        EncodeParams { max_range: 120.0, z_min: -2.0, z_max: 6.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LidarPoint {
    pub x: f32,
    pub y: f32,
    pub z: f32,
    pub intensity: f32,
}

/// Points in the vehicle frame (the scanner sits on the vehicle origin's
/// vertical axis).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LidarPointSet {
    pub points: Vec<LidarPoint>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadarDetection {
    /// Degrees, zero straight ahead, positive to the left.
    pub azimuth_deg: f32,
    pub range_m: f32,
    pub radial_velocity: f32,
    pub amplitude: f32,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RadarScan {
    pub detections: Vec<RadarDetection>,
}

impl RadarScan {
    pub fn validate(&self) -> Result<()> {
        if self.detections.len() > MAX_RADAR_TARGETS {
            return Err(Error::data(format!(
                "radar scan carries {} detections, limit is {MAX_RADAR_TARGETS}",
                self.detections.len()
            )));
        }
        Ok(())
    }
}

/// Three range-gated exposures in the gated camera's native plane plus the
/// homography mapping gated-plane pixels into the camera plane.
#[derive(Debug, Clone, PartialEq)]
pub struct GatedSlices {
    pub width: usize,
    pub height: usize,
    pub slices: [Vec<f32>; 3],
    pub homography: [[f32; 3]; 3],
}

/// RGB camera image, CHW in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct CameraFrame {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl CameraFrame {
    pub fn zeros(size: PlaneSize) -> Self {
        CameraFrame { width: size.w, height: size.h, data: vec![0.0; 3 * size.w * size.h] }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(vec![3, self.height, self.width], self.data.clone())
            .expect("camera buffer matches its extents")
    }
}

/// All four streams on the shared camera plane.
#[derive(Debug, Clone)]
pub struct EncodedFrame {
    pub camera: Tensor,
    pub lidar: Tensor,
    pub radar: Tensor,
    pub gated: Tensor,
}

impl EncodedFrame {
    pub fn plane(&self) -> PlaneSize {
        PlaneSize::new(self.camera.shape()[1], self.camera.shape()[2])
    }

    pub fn streams(&self) -> [&Tensor; 4] {
        [&self.camera, &self.lidar, &self.radar, &self.gated]
    }
}

#[derive(Debug, Default, Clone, Copy)]
pub struct EncodeDiagnostics {
    pub radar_dropped_out_of_view: u64,
}

/// Projects lidar points into [3,H,W] planes of (normalized range, normalized
/// height, pulse intensity). On pixel collisions the nearest point wins; ties
/// resolve by intensity then height so the result is independent of point
/// order. Untouched pixels stay zero.
pub fn project_lidar(
    points: &LidarPointSet,
    calib: &CalibrationModel,
    size: PlaneSize,
    params: &EncodeParams,
) -> Tensor {
    let hw = size.h * size.w;
    let mut planes = vec![0.0f32; 3 * hw];
    let mut best: Vec<(f32, f32, f32)> = vec![(f32::INFINITY, 0.0, 0.0); hw];
    let origin = calib.lidar_pose.translation;
    for p in &points.points {
        let Some((u, v)) = calib.project([p.x, p.y, p.z]) else { continue };
        let (px, py) = ((u + 0.5).floor(), (v + 0.5).floor());
        if px < 0.0 || py < 0.0 || px >= size.w as f32 || py >= size.h as f32 {
            continue;
        }
        let idx = py as usize * size.w + px as usize;
        let (dx, dy, dz) = (p.x - origin[0], p.y - origin[1], p.z - origin[2]);
        let range = (dx * dx + dy * dy + dz * dz).sqrt();
        let key = (range, -p.intensity, -p.z);
        let incumbent = best[idx];
        if key < incumbent {
            best[idx] = key;
            planes[idx] = (range / params.max_range).clamp(0.0, 1.0);
            planes[hw + idx] =
                ((p.z - params.z_min) / (params.z_max - params.z_min)).clamp(0.0, 1.0);
            planes[2 * hw + idx] = p.intensity.clamp(0.0, 1.0);
        }
    }
    Tensor::from_vec(vec![3, size.h, size.w], planes).expect("plane buffer consistent")
}

/// Replicates radar detections down their image column: [2,H,W] planes of
/// (normalized range, amplitude). A detection projects to the column of its
/// bearing; the whole column takes its values since the radar scans in a
/// plane orthogonal to the image. The nearest detection wins a contested
/// column; out-of-view detections are dropped and counted.
pub fn replicate_radar(
    scan: &RadarScan,
    calib: &CalibrationModel,
    size: PlaneSize,
    params: &EncodeParams,
    diag: &mut EncodeDiagnostics,
) -> Tensor {
    let hw = size.h * size.w;
    let mut planes = vec![0.0f32; 2 * hw];
    let mut best: Vec<(f32, f32)> = vec![(f32::INFINITY, 0.0); size.w];
    for det in &scan.detections {
        let az = det.azimuth_deg.to_radians();
        // Bearing at unit forward distance; u = cx - fx*tan(az).
        let u = calib.cx - calib.fx * az.tan();
        let col = (u + 0.5).floor();
        if az.cos() <= 0.0 || !(0.0..size.w as f32).contains(&col) {
            diag.radar_dropped_out_of_view += 1;
            continue;
        }
        let col = col as usize;
        let key = (det.range_m, -det.amplitude);
        if key < best[col] {
            best[col] = key;
            let depth = (det.range_m / params.max_range).clamp(0.0, 1.0);
            let amp = det.amplitude.clamp(0.0, 1.0);
            for row in 0..size.h {
                planes[row * size.w + col] = depth;
                planes[hw + row * size.w + col] = amp;
            }
        }
    }
    Tensor::from_vec(vec![2, size.h, size.w], planes).expect("plane buffer consistent")
}

/// 3x3 inverse by adjugate; None when the determinant magnitude is below the
/// singularity floor of 1e-9.
pub fn invert_homography(m: &[[f32; 3]; 3]) -> Option<[[f64; 3]; 3]> {
    let a: Vec<f64> = m.iter().flatten().map(|&v| v as f64).collect();
    let det = a[0] * (a[4] * a[8] - a[5] * a[7]) - a[1] * (a[3] * a[8] - a[5] * a[6])
        + a[2] * (a[3] * a[7] - a[4] * a[6]);
    if det.abs() < 1e-9 {
        return None;
    }
    let cof = |r: usize, c: usize| {
        let rows: Vec<usize> = (0..3).filter(|&i| i != r).collect();
        let cols: Vec<usize> = (0..3).filter(|&j| j != c).collect();
        let minor = a[rows[0] * 3 + cols[0]] * a[rows[1] * 3 + cols[1]]
            - a[rows[0] * 3 + cols[1]] * a[rows[1] * 3 + cols[0]];
        if (r + c) % 2 == 0 {
            minor / det
        } else {
            -minor / det
        }
    };
    // Inverse = transposed cofactor matrix / det.
    Some([
        [cof(0, 0), cof(1, 0), cof(2, 0)],
        [cof(0, 1), cof(1, 1), cof(2, 1)],
        [cof(0, 2), cof(1, 2), cof(2, 2)],
    ])
}

pub fn apply_homography(h: &[[f64; 3]; 3], x: f64, y: f64) -> Option<(f64, f64)> {
    let w = h[2][0] * x + h[2][1] * y + h[2][2];
    if w.abs() < 1e-12 {
        return None;
    }
    Some((
        (h[0][0] * x + h[0][1] * y + h[0][2]) / w,
        (h[1][0] * x + h[1][1] * y + h[1][2]) / w,
    ))
}

fn bilinear(img: &[f32], w: usize, h: usize, x: f64, y: f64) -> f32 {
    if x < -1.0 || y < -1.0 || x > w as f64 || y > h as f64 {
        return 0.0;
    }
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = (x - x0) as f32;
    let fy = (y - y0) as f32;
    let sample = |xi: i64, yi: i64| -> f32 {
        if xi < 0 || yi < 0 || xi >= w as i64 || yi >= h as i64 {
            0.0
        } else {
            img[yi as usize * w + xi as usize]
        }
    };
    let (x0, y0) = (x0 as i64, y0 as i64);
    let top = sample(x0, y0) * (1.0 - fx) + sample(x0 + 1, y0) * fx;
    let bottom = sample(x0, y0 + 1) * (1.0 - fx) + sample(x0 + 1, y0 + 1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Inverse-warps the gated slices into the camera plane with bilinear
/// sampling. Samples falling outside the native plane are zero. A singular
/// homography is rejected.
pub fn warp_gated(slices: &GatedSlices, size: PlaneSize) -> Result<Tensor> {
    let a: Vec<f64> = slices.homography.iter().flatten().map(|&v| v as f64).collect();
    let det = a[0] * (a[4] * a[8] - a[5] * a[7]) - a[1] * (a[3] * a[8] - a[5] * a[6])
        + a[2] * (a[3] * a[7] - a[4] * a[6]);
    let inverse =
        invert_homography(&slices.homography).ok_or(Error::SingularHomography { det })?;
    let hw = size.h * size.w;
    let mut out = vec![0.0f32; 3 * hw];
    for (s, slice) in slices.slices.iter().enumerate() {
        for py in 0..size.h {
            for px in 0..size.w {
                if let Some((gx, gy)) = apply_homography(&inverse, px as f64, py as f64) {
                    out[s * hw + py * size.w + px] =
                        bilinear(slice, slices.width, slices.height, gx, gy);
                }
            }
        }
    }
    Tensor::from_vec(vec![3, size.h, size.w], out)
}
