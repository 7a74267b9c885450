//! Synthetic multimodal scenes and the degradations applied to them. A scene
//! is a handful of flat-shaded boxes on a textured ground plane; the renderer
//! ray-casts a camera image, a lidar sweep, radar centroid detections, and
//! range-gated slices from the same geometry, so all streams stay consistent.
//! Fog, night, and snow/rain then distort the sensor measurements while the
//! ground-truth labels (which describe the scene, not the measurement) stay
//! untouched.

mod render;
mod weather;

pub use render::render_clear;
pub use weather::{apply_condition, apply_fog, apply_night, apply_snow_rain};

use crate::encode::{CameraFrame, GatedSlices, LidarPointSet, RadarScan};
use crate::error::{Error, Result};
use crate::ssd::Box2;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Range assigned to pixels that hit nothing; far enough that fog turns them
/// into pure airlight.
pub const SKY_DEPTH: f32 = 1.0e4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum WeatherKind {
    Clear,
    LightFog,
    DenseFog,
    SnowRain,
    Night,
}

impl WeatherKind {
    pub fn name(&self) -> &'static str {
        match self {
            WeatherKind::Clear => "clear",
            WeatherKind::LightFog => "light_fog",
            WeatherKind::DenseFog => "dense_fog",
            WeatherKind::SnowRain => "snow_rain",
            WeatherKind::Night => "night",
        }
    }
}

/// Parameterization of the degradation model. Fog kind follows the annotation
/// rule: dense below 100 m visibility, light from 100 m up to 1 km.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeatherCondition {
    pub kind: WeatherKind,
    pub visibility_m: f32,
    pub ambient_light: f32,
    pub clutter_rate: f32,
}

impl WeatherCondition {
    pub fn clear() -> Self {
        WeatherCondition {
            kind: WeatherKind::Clear,
            visibility_m: f32::INFINITY,
            ambient_light: 1.0,
            clutter_rate: 0.0,
        }
    }

    pub fn fog(visibility_m: f32) -> Result<Self> {
        if !(visibility_m > 0.0) {
            return Err(Error::data(format!("fog visibility must be positive, got {visibility_m}")));
        }
        let kind = if visibility_m < 100.0 {
            WeatherKind::DenseFog
        } else if visibility_m < 1000.0 {
            WeatherKind::LightFog
        } else {
            WeatherKind::Clear
        };
        Ok(WeatherCondition { kind, visibility_m, ambient_light: 1.0, clutter_rate: 0.0 })
    }

    pub fn night(ambient_light: f32) -> Self {
        WeatherCondition {
            kind: WeatherKind::Night,
            visibility_m: f32::INFINITY,
            ambient_light: ambient_light.clamp(0.0, 1.0),
            clutter_rate: 0.0,
        }
    }

    pub fn snow_rain(clutter_rate: f32) -> Self {
        WeatherCondition {
            kind: WeatherKind::SnowRain,
            visibility_m: f32::INFINITY,
            ambient_light: 1.0,
            clutter_rate: clutter_rate.max(0.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ObjectClass {
    Car,
}

impl ObjectClass {
    /// Index into the detector's class set; background is 0.
    pub fn class_id(&self) -> usize {
        match self {
            ObjectClass::Car => 1,
        }
    }
}

/// One scene object: an oriented box resting on the ground plane.
#[derive(Debug, Clone, Copy)]
pub struct SceneObject {
    pub class: ObjectClass,
    /// Center in the vehicle frame, meters.
    pub center: [f32; 3],
    /// Full extents along the object's local x (length), y (width), z (height).
    pub extents: [f32; 3],
    /// Rotation about the vertical axis, radians.
    pub yaw: f32,
    pub albedo: f32,
}

#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub seed: u64,
    pub objects: Vec<SceneObject>,
    pub ground_albedo: f32,
    pub texture_scale: f32,
    pub texture_contrast: f32,
}

impl SceneSpec {
    /// Draws a random roadway scene: up to four cars at 8-55 m, kept inside
    /// the camera frustum and apart from each other.
    pub fn sample(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5CE4E);
        let count = match rng.random_range(0..10u32) {
            0 => 0,
            1..=3 => 1,
            4..=6 => 2,
            7..=8 => 3,
            _ => 4,
        };
        let mut objects: Vec<SceneObject> = Vec::new();
        let mut guard = 0;
        while objects.len() < count && guard < 200 {
            guard += 1;
            let x = rng.random_range(8.0f32..55.0);
            let y = rng.random_range(-0.30f32..0.30) * x;
            let too_close = objects
                .iter()
                .any(|o| (o.center[0] - x).abs() < 5.0 && (o.center[1] - y).abs() < 3.0);
            if too_close {
                continue;
            }
            let h = rng.random_range(1.4f32..1.7);
            let yaw = if rng.random_range(0.0f32..1.0) < 0.8 {
                let base = if rng.random_range(0.0f32..1.0) < 0.5 { 0.0 } else { std::f32::consts::PI };
                base + rng.random_range(-0.12f32..0.12)
            } else {
                rng.random_range(-std::f32::consts::PI..std::f32::consts::PI)
            };
            objects.push(SceneObject {
                class: ObjectClass::Car,
                center: [x, y, h / 2.0],
                extents: [rng.random_range(3.8f32..4.7), rng.random_range(1.65f32..1.95), h],
                yaw,
                albedo: rng.random_range(0.25f32..0.9),
            });
        }
        SceneSpec {
            seed,
            objects,
            ground_albedo: rng.random_range(0.3f32..0.45),
            texture_scale: rng.random_range(0.5f32..1.2),
            texture_contrast: rng.random_range(0.22f32..0.4),
        }
    }

    pub fn validate(&self, max_range: f32) -> Result<()> {
        for (i, o) in self.objects.iter().enumerate() {
            if o.extents.iter().any(|&e| e < 0.0) {
                return Err(Error::data(format!("object {i} has negative extents")));
            }
            let planar = (o.center[0] * o.center[0] + o.center[1] * o.center[1]).sqrt();
            if planar > max_range {
                return Err(Error::data(format!(
                    "object {i} at {planar:.1} m exceeds sensor range {max_range} m"
                )));
            }
        }
        Ok(())
    }
}

/// 2-D label on the camera plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruthBox {
    pub rect: Box2,
    pub class: ObjectClass,
    /// Fraction of the object's visible silhouette hidden by nearer geometry.
    pub occlusion: f32,
    /// Fraction of the projected box lying outside the image.
    pub truncation: f32,
}

/// Per-pixel products of the render that degradations need: scene depth on
/// the camera plane, depth and passive-light components on the gated plane.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RenderAux {
    pub camera_depth: Vec<f32>,
    pub gated_depth: Vec<f32>,
    /// Passive ambient leak into the gated imager at full daylight.
    pub gated_ambient: Vec<f32>,
}

impl RenderAux {
    pub fn is_empty(&self) -> bool {
        self.camera_depth.is_empty() || self.gated_depth.is_empty()
    }
}

/// One synchronized multimodal capture plus labels and provenance.
#[derive(Debug, Clone)]
pub struct MultimodalFrame {
    pub camera: CameraFrame,
    pub lidar: LidarPointSet,
    pub radar: RadarScan,
    pub gated: GatedSlices,
    pub truth: Vec<GroundTruthBox>,
    pub weather: WeatherCondition,
    pub seed: u64,
    pub aux: RenderAux,
}

/// Tunable constants of the sensor simulation.
#[derive(Debug, Clone)]
pub struct SimParams {
    /// Lidar sweep geometry.
    pub lidar_lines: usize,
    pub lidar_elevation_deg: (f32, f32),
    pub lidar_azimuth_deg: (f32, f32),
    pub lidar_azimuth_step_deg: f32,
    pub lidar_max_range: f32,
    /// Gated slice range bands, meters.
    pub gated_bands: [(f32, f32); 3],
    /// Soft band edge width, meters.
    pub gated_band_soft: f32,
    /// Active illumination falloff length, meters.
    pub gated_falloff: f32,
    /// Fraction of passive scene light leaking into the gated imager.
    pub gated_ambient_leak: f32,
    /// Homography mapping gated-plane pixels into the camera plane.
    pub gated_homography: [[f32; 3]; 3],
    /// Koschmieder airlight level.
    pub airlight: f32,
    /// Expected lidar backscatter points per unit extinction coefficient.
    pub fog_clutter_per_beta: f32,
    /// Night sensor noise, applied before the ambient gain.
    pub night_noise_sigma: f32,
}

impl Default for SimParams {
    fn default() -> Self {
        SimParams {
            lidar_lines: 48,
            lidar_elevation_deg: (-16.0, 2.0),
            lidar_azimuth_deg: (-19.5, 19.5),
            lidar_azimuth_step_deg: 0.25,
            lidar_max_range: 120.0,
            gated_bands: [(3.0, 28.0), (18.0, 55.0), (45.0, 110.0)],
            gated_band_soft: 3.0,
            gated_falloff: 55.0,
            gated_ambient_leak: 0.15,
            gated_homography: [[1.015, 0.008, 2.0], [-0.006, 0.995, -1.2], [4.0e-5, -3.0e-5, 1.0]],
            airlight: 0.8,
            fog_clutter_per_beta: 120.0,
            night_noise_sigma: 0.02,
        }
    }
}

/// The extinction coefficient for a meteorological visibility, using the 5%
/// contrast convention: beta = ln(20) / V.
pub fn extinction_coefficient(visibility_m: f32) -> f32 {
    if visibility_m.is_finite() {
        (20.0f32).ln() / visibility_m
    } else {
        0.0
    }
}
