//! Clear-weather rendering: ray-cast boxes and ground from the calibrated
//! camera, sweep the same geometry with the lidar pattern, place radar
//! detections at object centroids, and expose range-gated slices in the gated
//! camera's native plane.

use super::{
    GroundTruthBox, MultimodalFrame, RenderAux, SceneObject, SceneSpec, SimParams,
    WeatherCondition, SKY_DEPTH,
};
use crate::encode::{
    apply_homography, invert_homography, CalibrationModel, CameraFrame, GatedSlices, LidarPoint,
    LidarPointSet, PlaneSize, RadarDetection, RadarScan, MAX_RADAR_TARGETS,
};
use crate::ssd::Box2;

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

/// Deterministic hash to [0,1).
fn hash01(seed: u64, a: i64, b: i64, tag: u64) -> f32 {
    let h = splitmix(seed ^ splitmix(a as u64 ^ splitmix(b as u64 ^ tag)));
    (h >> 40) as f32 / (1u64 << 24) as f32
}

/// Smooth value noise on an integer lattice, in [0,1].
fn value_noise(seed: u64, x: f32, y: f32) -> f32 {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let sx = fx * fx * (3.0 - 2.0 * fx);
    let sy = fy * fy * (3.0 - 2.0 * fy);
    let (xi, yi) = (x0 as i64, y0 as i64);
    let v00 = hash01(seed, xi, yi, 1);
    let v10 = hash01(seed, xi + 1, yi, 1);
    let v01 = hash01(seed, xi, yi + 1, 1);
    let v11 = hash01(seed, xi + 1, yi + 1, 1);
    let top = v00 * (1.0 - sx) + v10 * sx;
    let bottom = v01 * (1.0 - sx) + v11 * sx;
    top * (1.0 - sy) + bottom * sy
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Surface {
    Sky,
    Ground,
    Object(usize),
}

struct Hit {
    range: f32,
    point: [f32; 3],
    normal: [f32; 3],
    surface: Surface,
}

/// Ray vs oriented box via the slab method in the box's local frame.
fn ray_box(origin: [f32; 3], dir: [f32; 3], obj: &SceneObject) -> Option<(f32, [f32; 3])> {
    let (sin, cos) = obj.yaw.sin_cos();
    let to_local = |p: [f32; 3]| {
        let dx = p[0] - obj.center[0];
        let dy = p[1] - obj.center[1];
        let dz = p[2] - obj.center[2];
        [cos * dx + sin * dy, -sin * dx + cos * dy, dz]
    };
    let rot_dir = [cos * dir[0] + sin * dir[1], -sin * dir[0] + cos * dir[1], dir[2]];
    let o = to_local(origin);
    let half = [obj.extents[0] / 2.0, obj.extents[1] / 2.0, obj.extents[2] / 2.0];

    let mut t_near = f32::NEG_INFINITY;
    let mut t_far = f32::INFINITY;
    let mut near_axis = 0usize;
    for axis in 0..3 {
        if rot_dir[axis].abs() < 1e-9 {
            if o[axis].abs() > half[axis] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / rot_dir[axis];
        let mut t0 = (-half[axis] - o[axis]) * inv;
        let mut t1 = (half[axis] - o[axis]) * inv;
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        if t0 > t_near {
            t_near = t0;
            near_axis = axis;
        }
        t_far = t_far.min(t1);
        if t_near > t_far {
            return None;
        }
    }
    if t_near <= 1e-4 {
        return None;
    }
    // Local hit normal back to the vehicle frame.
    let local_pt = [
        o[0] + rot_dir[0] * t_near,
        o[1] + rot_dir[1] * t_near,
        o[2] + rot_dir[2] * t_near,
    ];
    let mut local_n = [0.0f32; 3];
    local_n[near_axis] = local_pt[near_axis].signum();
    let normal = [
        cos * local_n[0] - sin * local_n[1],
        sin * local_n[0] + cos * local_n[1],
        local_n[2],
    ];
    Some((t_near, normal))
}

fn cast(origin: [f32; 3], dir: [f32; 3], objects: &[SceneObject]) -> Hit {
    let mut best_t = f32::INFINITY;
    let mut best = (Surface::Sky, [0.0f32, 0.0, 1.0]);
    for (i, obj) in objects.iter().enumerate() {
        if let Some((t, n)) = ray_box(origin, dir, obj) {
            if t < best_t {
                best_t = t;
                best = (Surface::Object(i), n);
            }
        }
    }
    if dir[2] < -1e-6 {
        let t = -origin[2] / dir[2];
        if t > 1e-4 && t < best_t {
            best_t = t;
            best = (Surface::Ground, [0.0, 0.0, 1.0]);
        }
    }
    if best_t.is_finite() {
        let point = [
            origin[0] + dir[0] * best_t,
            origin[1] + dir[1] * best_t,
            origin[2] + dir[2] * best_t,
        ];
        Hit { range: best_t, point, normal: best.1, surface: best.0 }
    } else {
        Hit { range: SKY_DEPTH, point: [0.0; 3], normal: [0.0, 0.0, 1.0], surface: Surface::Sky }
    }
}

/// Camera-frame ray for continuous pixel coordinates (unit direction).
fn pixel_ray(calib: &CalibrationModel, u: f32, v: f32) -> ([f32; 3], [f32; 3]) {
    let xc = (u - calib.cx) / calib.fx;
    let yc = (v - calib.cy) / calib.fy;
    // Camera axes: x right (-y vehicle), y down (-z vehicle), z forward (+x).
    let dir = [1.0, -xc, -yc];
    let n = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
    (calib.camera_pose.translation, [dir[0] / n, dir[1] / n, dir[2] / n])
}

const LIGHT_DIR: [f32; 3] = [0.30, 0.18, 0.94];

/// Scene luminance at a hit, before any per-channel tinting.
fn shade_mono(hit: &Hit, spec: &SceneSpec) -> f32 {
    match hit.surface {
        Surface::Sky => 0.0,
        Surface::Ground => {
            let t = value_noise(
                spec.seed,
                hit.point[0] * spec.texture_scale,
                hit.point[1] * spec.texture_scale,
            );
            spec.ground_albedo * (0.85 + spec.texture_contrast * (2.0 * t - 1.0)) + 0.12 * t
        }
        Surface::Object(i) => {
            let obj = &spec.objects[i];
            let lambert = (hit.normal[0] * LIGHT_DIR[0]
                + hit.normal[1] * LIGHT_DIR[1]
                + hit.normal[2] * LIGHT_DIR[2])
                .max(0.0);
            obj.albedo * (0.55 + 0.45 * lambert)
        }
    }
}

fn sky_luma(v_frac: f32) -> f32 {
    0.88 - 0.22 * v_frac
}

/// Per-object RGB tint, deterministic in the scene seed.
fn object_tint(seed: u64, index: usize) -> [f32; 3] {
    [
        0.75 + 0.25 * hash01(seed, index as i64, 0, 11),
        0.75 + 0.25 * hash01(seed, index as i64, 1, 11),
        0.75 + 0.25 * hash01(seed, index as i64, 2, 11),
    ]
}

pub fn render_clear(
    spec: &SceneSpec,
    calib: &CalibrationModel,
    size: PlaneSize,
    params: &SimParams,
) -> MultimodalFrame {
    let hw = size.h * size.w;
    let mut camera = CameraFrame::zeros(size);
    let mut camera_depth = vec![SKY_DEPTH; hw];
    let mut surface_ids: Vec<i32> = vec![-1; hw]; // -1 sky, -2 ground, >=0 object

    // Camera pass, which also fills the z-buffer used for occlusion labels.
    for py in 0..size.h {
        for px in 0..size.w {
            let (origin, dir) = pixel_ray(calib, px as f32, py as f32);
            let hit = cast(origin, dir, &spec.objects);
            let idx = py * size.w + px;
            let (luma, tint, id) = match hit.surface {
                Surface::Sky => {
                    let l = sky_luma(py as f32 / size.h as f32);
                    (l, [0.96, 0.98, 1.0], -1)
                }
                Surface::Ground => {
                    camera_depth[idx] = hit.range;
                    (shade_mono(&hit, spec), [1.0, 0.98, 0.94], -2)
                }
                Surface::Object(i) => {
                    camera_depth[idx] = hit.range;
                    (shade_mono(&hit, spec), object_tint(spec.seed, i), i as i32)
                }
            };
            surface_ids[idx] = id;
            for c in 0..3 {
                let dither =
                    0.03 * (hash01(spec.seed, idx as i64, c as i64, 7) - 0.5);
                camera.data[c * hw + idx] = (luma * tint[c] + dither).clamp(0.0, 1.0);
            }
        }
    }

    // Lidar sweep from its own mount height.
    let lidar_origin = calib.lidar_pose.translation;
    let mut points = Vec::new();
    let (el_lo, el_hi) = params.lidar_elevation_deg;
    let (az_lo, az_hi) = params.lidar_azimuth_deg;
    let az_steps = ((az_hi - az_lo) / params.lidar_azimuth_step_deg).round() as usize + 1;
    for line in 0..params.lidar_lines {
        let el = (el_lo
            + (el_hi - el_lo) * line as f32 / (params.lidar_lines - 1).max(1) as f32)
            .to_radians();
        for step in 0..az_steps {
            let az = (az_lo + params.lidar_azimuth_step_deg * step as f32).to_radians();
            let dir = [el.cos() * az.cos(), el.cos() * az.sin(), el.sin()];
            let hit = cast(lidar_origin, dir, &spec.objects);
            if hit.surface == Surface::Sky || hit.range > params.lidar_max_range {
                continue;
            }
            let jitter = 0.06 * (hash01(spec.seed, line as i64, step as i64, 23) - 0.5);
            let intensity = (shade_mono(&hit, spec) + jitter).clamp(0.02, 1.0);
            points.push(LidarPoint {
                x: hit.point[0],
                y: hit.point[1],
                z: hit.point[2],
                intensity,
            });
        }
    }

    // Radar: one detection per object centroid, static scene.
    let mut detections: Vec<RadarDetection> = spec
        .objects
        .iter()
        .map(|o| {
            let range = (o.center[0] * o.center[0] + o.center[1] * o.center[1]).sqrt();
            RadarDetection {
                azimuth_deg: o.center[1].atan2(o.center[0]).to_degrees(),
                range_m: range,
                radial_velocity: 0.0,
                amplitude: (0.45 + 0.5 * o.albedo - range / 400.0).clamp(0.05, 1.0),
            }
        })
        .collect();
    detections.truncate(MAX_RADAR_TARGETS);

    // Gated slices in the native gated plane: rays go through the homography
    // so the warp back to the camera plane is geometrically consistent.
    let inverse_ok = invert_homography(&params.gated_homography)
        .expect("default gated homography is invertible");
    let _ = inverse_ok; // the forward map is used directly below
    let mut slices = [vec![0.0f32; hw], vec![0.0f32; hw], vec![0.0f32; hw]];
    let mut gated_depth = vec![SKY_DEPTH; hw];
    let mut gated_ambient = vec![0.0f32; hw];
    let h64: Vec<[f64; 3]> = params.gated_homography.iter().map(|r| [r[0] as f64, r[1] as f64, r[2] as f64]).collect();
    let hmat = [h64[0], h64[1], h64[2]];
    for gy in 0..size.h {
        for gx in 0..size.w {
            let idx = gy * size.w + gx;
            let Some((u, v)) = apply_homography(&hmat, gx as f64, gy as f64) else {
                continue;
            };
            let (origin, dir) = pixel_ray(calib, u as f32, v as f32);
            let hit = cast(origin, dir, &spec.objects);
            let passive = match hit.surface {
                Surface::Sky => sky_luma((v / size.h as f64) as f32),
                _ => shade_mono(&hit, spec),
            };
            gated_ambient[idx] = params.gated_ambient_leak * passive.clamp(0.0, 1.0);
            if hit.surface != Surface::Sky {
                gated_depth[idx] = hit.range;
                let reflect = shade_mono(&hit, spec);
                let illum = (-hit.range / params.gated_falloff).exp();
                for (s, (band_lo, band_hi)) in params.gated_bands.iter().enumerate() {
                    let soft = params.gated_band_soft;
                    let rise = ((hit.range - (band_lo - soft)) / soft).clamp(0.0, 1.0);
                    let fall = (((band_hi + soft) - hit.range) / soft).clamp(0.0, 1.0);
                    let profile = rise.min(fall);
                    slices[s][idx] = (2.2 * reflect * illum * profile).clamp(0.0, 1.0);
                }
            }
            for slice in slices.iter_mut() {
                slice[idx] = (slice[idx] + gated_ambient[idx]).clamp(0.0, 1.0);
            }
        }
    }

    // Labels: project corners for the 2-D box, count z-buffer pixels for
    // occlusion, compare clipped against full projection for truncation.
    let mut truth = Vec::new();
    for (i, obj) in spec.objects.iter().enumerate() {
        let Some((full, clipped)) = project_box(obj, calib, size) else { continue };
        if clipped.width() < 1.0 || clipped.height() < 1.0 {
            continue;
        }
        let visible = surface_ids.iter().filter(|&&id| id == i as i32).count();
        let solo = solo_pixels(obj, calib, size, &clipped);
        if solo == 0 || visible == 0 {
            continue;
        }
        let occlusion = (1.0 - visible as f32 / solo as f32).clamp(0.0, 1.0);
        let truncation = (1.0 - clipped.area() / full.area().max(1e-6)).clamp(0.0, 1.0);
        truth.push(GroundTruthBox { rect: clipped, class: obj.class, occlusion, truncation });
    }

    MultimodalFrame {
        camera,
        lidar: LidarPointSet { points },
        radar: RadarScan { detections },
        gated: GatedSlices {
            width: size.w,
            height: size.h,
            slices,
            homography: params.gated_homography,
        },
        truth,
        weather: WeatherCondition::clear(),
        seed: spec.seed,
        aux: RenderAux { camera_depth, gated_depth, gated_ambient },
    }
}

fn box_corners(obj: &SceneObject) -> [[f32; 3]; 8] {
    let (sin, cos) = obj.yaw.sin_cos();
    let half = [obj.extents[0] / 2.0, obj.extents[1] / 2.0, obj.extents[2] / 2.0];
    let mut out = [[0.0f32; 3]; 8];
    for (k, corner) in out.iter_mut().enumerate() {
        let sx = if k & 1 == 0 { -1.0 } else { 1.0 };
        let sy = if k & 2 == 0 { -1.0 } else { 1.0 };
        let sz = if k & 4 == 0 { -1.0 } else { 1.0 };
        let lx = sx * half[0];
        let ly = sy * half[1];
        *corner = [
            obj.center[0] + cos * lx - sin * ly,
            obj.center[1] + sin * lx + cos * ly,
            obj.center[2] + sz * half[2],
        ];
    }
    out
}

/// Full (unclipped) and image-clipped projected 2-D boxes; None when every
/// corner is behind the camera.
fn project_box(
    obj: &SceneObject,
    calib: &CalibrationModel,
    size: PlaneSize,
) -> Option<(Box2, Box2)> {
    let mut min_u = f32::INFINITY;
    let mut min_v = f32::INFINITY;
    let mut max_u = f32::NEG_INFINITY;
    let mut max_v = f32::NEG_INFINITY;
    let mut any = false;
    for corner in box_corners(obj) {
        if let Some((u, v)) = calib.project(corner) {
            any = true;
            min_u = min_u.min(u);
            max_u = max_u.max(u);
            min_v = min_v.min(v);
            max_v = max_v.max(v);
        }
    }
    if !any || max_u <= min_u || max_v <= min_v {
        return None;
    }
    let full = Box2::new(min_u, min_v, max_u, max_v);
    let clipped = Box2::new(
        min_u.clamp(0.0, size.w as f32),
        min_v.clamp(0.0, size.h as f32),
        max_u.clamp(0.0, size.w as f32),
        max_v.clamp(0.0, size.h as f32),
    );
    Some((full, clipped))
}

/// Pixels the object would cover if it were alone in the scene, counted over
/// its clipped projected box.
fn solo_pixels(obj: &SceneObject, calib: &CalibrationModel, size: PlaneSize, rect: &Box2) -> usize {
    let x0 = rect.x1.floor().max(0.0) as usize;
    let x1 = (rect.x2.ceil() as usize).min(size.w);
    let y0 = rect.y1.floor().max(0.0) as usize;
    let y1 = (rect.y2.ceil() as usize).min(size.h);
    let solo = std::slice::from_ref(obj);
    let mut count = 0;
    for py in y0..y1 {
        for px in x0..x1 {
            let (origin, dir) = pixel_ray(calib, px as f32, py as f32);
            if let Some((t, _)) = ray_box(origin, dir, &solo[0]) {
                // Ground cannot hide an object standing on it, but the hit
                // must still be in front of the ground surface.
                let ground_t = if dir[2] < -1e-6 { -origin[2] / dir[2] } else { f32::INFINITY };
                if t < ground_t {
                    count += 1;
                }
            }
        }
    }
    count
}
