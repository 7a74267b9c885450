//! Weather degradations over rendered frames. Each op derives its randomness
//! from the frame seed plus an op tag, so identical inputs give bit-identical
//! outputs, and none of them touches the ground-truth labels.

use super::{extinction_coefficient, MultimodalFrame, SimParams, WeatherCondition};
use crate::encode::LidarPoint;
use crate::error::{Error, Result};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

fn op_rng(frame: &MultimodalFrame, tag: u64, knob: f32) -> ChaCha8Rng {
    let mix = frame.seed ^ tag.wrapping_mul(0x9E3779B97F4A7C15) ^ (knob.to_bits() as u64) << 17;
    ChaCha8Rng::seed_from_u64(mix)
}

fn poisson_count(rng: &mut ChaCha8Rng, lambda: f64) -> usize {
    if lambda <= 0.0 {
        return 0;
    }
    Poisson::new(lambda).expect("positive lambda").sample(rng) as usize
}

/// Koschmieder fog: camera and gated intensities attenuate with per-pixel
/// scene depth at beta = ln(20)/V; the passive camera additionally gains the
/// airlight term while the gated imager suppresses backscatter and keeps
/// attenuation only. Lidar returns beyond V/2 are deleted and replaced by
/// near-range backscatter clutter at a rate proportional to beta. Radar is
/// unaffected.
pub fn apply_fog(frame: &MultimodalFrame, visibility_m: f32, params: &SimParams) -> Result<MultimodalFrame> {
    if frame.aux.is_empty() {
        return Err(Error::MissingDepth);
    }
    let condition = WeatherCondition::fog(visibility_m)?;
    let beta = extinction_coefficient(visibility_m);
    let mut out = frame.clone();
    out.weather = condition;
    if beta == 0.0 {
        return Ok(out);
    }

    let hw = frame.aux.camera_depth.len();
    for (i, &d) in frame.aux.camera_depth.iter().enumerate() {
        let t = (-beta * d).exp();
        for c in 0..3 {
            let v = frame.camera.data[c * hw + i];
            out.camera.data[c * hw + i] = (v * t + params.airlight * (1.0 - t)).clamp(0.0, 1.0);
        }
    }

    for (i, &d) in frame.aux.gated_depth.iter().enumerate() {
        let t = (-beta * d).exp();
        for s in 0..3 {
            out.gated.slices[s][i] = frame.gated.slices[s][i] * t;
        }
        out.aux.gated_ambient[i] = frame.aux.gated_ambient[i] * t;
    }

    // Hard range collapse at half the visibility.
    let r_max = visibility_m / 2.0;
    let lidar_origin = [0.0f32, 0.0, 1.9];
    out.lidar.points.retain(|p| {
        let dx = p.x - lidar_origin[0];
        let dy = p.y - lidar_origin[1];
        let dz = p.z - lidar_origin[2];
        (dx * dx + dy * dy + dz * dz).sqrt() <= r_max
    });

    let mut rng = op_rng(frame, 0xF06, visibility_m);
    let clutter = poisson_count(&mut rng, (params.fog_clutter_per_beta * beta) as f64);
    for _ in 0..clutter {
        let az = rng.random_range(-20.0f32..20.0).to_radians();
        let el = rng.random_range(-10.0f32..2.0).to_radians();
        let r = rng.random_range(3.0f32..12.0);
        out.lidar.points.push(LidarPoint {
            x: lidar_origin[0] + r * el.cos() * az.cos(),
            y: lidar_origin[1] + r * el.cos() * az.sin(),
            z: lidar_origin[2] + r * el.sin(),
            intensity: rng.random_range(0.25..0.85),
        });
    }
    Ok(out)
}

/// Illumination change: passive camera intensities pick up sensor noise and
/// are scaled by the ambient level; the gated imager keeps its actively
/// illuminated content and only its passive ambient leak scales. Active lidar
/// and radar are unaffected.
pub fn apply_night(frame: &MultimodalFrame, ambient: f32, params: &SimParams) -> MultimodalFrame {
    let ambient = ambient.clamp(0.0, 1.0);
    let mut out = frame.clone();
    out.weather = WeatherCondition::night(ambient);

    let mut rng = op_rng(frame, 0x417, ambient);
    let noise = Normal::new(0.0f32, params.night_noise_sigma).expect("valid sigma");
    for v in out.camera.data.iter_mut() {
        *v = ((*v + noise.sample(&mut rng)) * ambient).clamp(0.0, 1.0);
    }

    for i in 0..frame.aux.gated_ambient.len() {
        let leak = frame.aux.gated_ambient[i];
        for s in 0..3 {
            let active = (frame.gated.slices[s][i] - leak).max(0.0);
            out.gated.slices[s][i] = (active + ambient * leak).clamp(0.0, 1.0);
        }
    }
    out
}

/// Precipitation clutter: bright streaks composite over the camera, bright
/// dots over the gated slices, and the lidar both gains near-range clutter
/// and drops true returns with probability proportional to the rate. Radar
/// is unaffected.
pub fn apply_snow_rain(frame: &MultimodalFrame, clutter_rate: f32, params: &SimParams) -> MultimodalFrame {
    let _ = params;
    let rate = clutter_rate.max(0.0);
    let mut out = frame.clone();
    out.weather = WeatherCondition::snow_rain(rate);
    if rate == 0.0 {
        return out;
    }

    let mut rng = op_rng(frame, 0x5109, rate);
    let (h, w) = (frame.camera.height, frame.camera.width);
    let hw = h * w;

    let streaks = poisson_count(&mut rng, rate as f64);
    for _ in 0..streaks {
        let x0 = rng.random_range(0.0..w as f32);
        let y0 = rng.random_range(0.0..h as f32);
        let len = rng.random_range(3.0..9.0f32);
        let angle = std::f32::consts::FRAC_PI_2 + rng.random_range(-0.3..0.3f32);
        let bright = rng.random_range(0.75..0.95f32);
        let steps = len.ceil() as usize;
        for s in 0..steps {
            let x = x0 + angle.cos() * s as f32;
            let y = y0 + angle.sin() * s as f32;
            if x < 0.0 || y < 0.0 || x >= w as f32 || y >= h as f32 {
                continue;
            }
            let idx = y as usize * w + x as usize;
            for c in 0..3 {
                out.camera.data[c * hw + idx] = bright;
            }
        }
    }

    let dots = poisson_count(&mut rng, rate as f64 * 0.7);
    for _ in 0..dots {
        let x = rng.random_range(0..w);
        let y = rng.random_range(0..h);
        let bright = rng.random_range(0.6..0.9f32);
        let slice = rng.random_range(0..3usize);
        out.gated.slices[slice][y * w + x] = bright;
    }

    let drop_p = (0.012 * rate).min(0.8);
    out.lidar.points.retain(|_| rng.random_range(0.0f32..1.0) >= drop_p);
    let clutter = poisson_count(&mut rng, rate as f64 * 0.6);
    for _ in 0..clutter {
        let az = rng.random_range(-20.0f32..20.0).to_radians();
        let el = rng.random_range(-10.0f32..2.0).to_radians();
        let r = rng.random_range(3.0f32..12.0);
        out.lidar.points.push(LidarPoint {
            x: r * el.cos() * az.cos(),
            y: r * el.cos() * az.sin(),
            z: 1.9 + r * el.sin(),
            intensity: rng.random_range(0.3..0.9),
        });
    }
    out
}

/// Applies whichever degradation the condition describes.
pub fn apply_condition(
    frame: &MultimodalFrame,
    condition: &WeatherCondition,
    params: &SimParams,
) -> Result<MultimodalFrame> {
    use super::WeatherKind::*;
    match condition.kind {
        Clear => {
            let mut out = frame.clone();
            out.weather = *condition;
            Ok(out)
        }
        LightFog | DenseFog => apply_fog(frame, condition.visibility_m, params),
        Night => Ok(apply_night(frame, condition.ambient_light, params)),
        SnowRain => Ok(apply_snow_rain(frame, condition.clutter_rate, params)),
    }
}
