//! Ray-cast renderer for the tabletop: colored discs on a textured ground
//! plane, flat diffuse lighting with an optional specular lobe and optional
//! hard shadows, 3×3 supersampling per pixel.

use nalgebra::Vector3;

use super::camera::{focal_length, CameraPose};
use super::{Light, Scene, WORKSPACE_HALF};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FOV_DEG: f64 = 60.0;
pub const OBJECT_RADIUS: f64 = 0.12;
/// Objects cast shadows as if they were cylinders of this height.
pub const OBJECT_HEIGHT: f64 = 0.1;
const SKY: [f64; 3] = [0.55, 0.7, 0.9];
const OUTSIDE: [f64; 3] = [0.25, 0.22, 0.2];
const SUPERSAMPLE: usize = 3;
const SHININESS: i32 = 16;

/// Number of built-in ground textures.
pub const N_TEXTURES: usize = 6;

/// Albedo of ground texture `id` at workspace point `(x, y)`.
pub fn texture_color(id: usize, x: f64, y: f64) -> [f64; 3] {
    match id % N_TEXTURES {
        0 => [0.7, 0.7, 0.7],
        1 => {
            let c = ((x / 0.25).floor() + (y / 0.25).floor()) as i64;
            if c.rem_euclid(2) == 0 {
                [0.75, 0.75, 0.72]
            } else {
                [0.5, 0.5, 0.48]
            }
        }
        2 => {
            let s = 0.5 + 0.5 * (x * 18.0).sin();
            [0.45 + 0.25 * s, 0.35 + 0.2 * s, 0.25 + 0.1 * s]
        }
        3 => {
            let r = (x * x + y * y).sqrt();
            let s = 0.5 + 0.5 * (r * 30.0).sin();
            [0.55 + 0.2 * s, 0.4 + 0.15 * s, 0.2 + 0.05 * s]
        }
        4 => {
            let cell = ((x / 0.2).floor() as i64, (y / 0.2).floor() as i64);
            let h = hash2(cell.0, cell.1);
            [
                0.3 + 0.5 * ((h & 0xff) as f64 / 255.0),
                0.3 + 0.5 * (((h >> 8) & 0xff) as f64 / 255.0),
                0.3 + 0.5 * (((h >> 16) & 0xff) as f64 / 255.0),
            ]
        }
        _ => [1.0, 1.0, 1.0],
    }
}

fn hash2(a: i64, b: i64) -> u64 {
    let mut h = (a as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (b as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    h ^= h >> 31;
    h = h.wrapping_mul(0x94D0_49BB_1331_11EB);
    h ^ (h >> 29)
}

fn in_disc(p: (f64, f64), c: [f64; 2]) -> bool {
    let dx = p.0 - c[0];
    let dy = p.1 - c[1];
    dx * dx + dy * dy <= OBJECT_RADIUS * OBJECT_RADIUS
}

fn albedo(scene: &Scene, x: f64, y: f64) -> [f64; 3] {
    if in_disc((x, y), scene.target_position) {
        return scene.target_color;
    }
    for (p, c) in scene.distractor_positions.iter().zip(&scene.distractor_colors) {
        if in_disc((x, y), *p) {
            return *c;
        }
    }
    if x.abs() <= WORKSPACE_HALF && y.abs() <= WORKSPACE_HALF {
        texture_color(scene.background_texture_id, x, y)
    } else {
        OUTSIDE
    }
}

fn shadowed(scene: &Scene, light: &Light, x: f64, y: f64) -> bool {
    let d = light.direction;
    if !light.shadows || d[2] <= 1e-9 {
        return false;
    }
    // Sample the ray toward the light at half the object height.
    let s = 0.5 * OBJECT_HEIGHT / d[2];
    let p = (x + s * d[0], y + s * d[1]);
    let hit = in_disc(p, scene.target_position) || scene.distractor_positions.iter().any(|c| in_disc(p, *c));
    hit && !in_disc((x, y), scene.target_position) && !scene.distractor_positions.iter().any(|c| in_disc((x, y), *c))
}

fn shade(scene: &Scene, ray: Vector3<f64>, origin: Vector3<f64>) -> [f64; 3] {
    if ray.z >= -1e-12 {
        return SKY;
    }
    let t = -origin.z / ray.z;
    let hit = origin + ray * t;
    let base = albedo(scene, hit.x, hit.y);
    let light = &scene.light;
    let d = Vector3::from(light.direction);
    let n = Vector3::z();
    let lambert = d.dot(&n).max(0.0);
    let shadow = if shadowed(scene, light, hit.x, hit.y) { 0.5 } else { 1.0 };
    let mut spec = 0.0;
    if light.specular > 0.0 {
        let view = -ray.normalize();
        let h = (view + d).normalize();
        spec = light.specular * n.dot(&h).max(0.0).powi(SHININESS);
    }
    let mut out = [0.0; 3];
    for c in 0..3 {
        out[c] = (base[c] * light.diffuse[c] * lambert * shadow + spec * shadow).clamp(0.0, 1.0);
    }
    out
}

/// Renders `scene` from `camera` as an `image_size × image_size × 3` image.
pub fn render(scene: &Scene, camera: &CameraPose, image_size: usize) -> Result<Tensor> {
    if image_size == 0 {
        return Err(Error::Render("image size must be positive".into()));
    }
    let target = camera.to_camera([scene.target_position[0], scene.target_position[1], 0.0]);
    if target.z <= 0.0 {
        return Err(Error::Render("target lies behind the camera".into()));
    }
    let q = camera.quaternion();
    let origin = camera.position_vec();
    let f = focal_length(image_size, FOV_DEG);
    let half = image_size as f64 / 2.0;
    let mut img = Tensor::zeros(&[image_size, image_size, 3]);
    let data = img.data_mut();
    let weight = 1.0 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
    for v in 0..image_size {
        for u in 0..image_size {
            let mut acc = [0.0; 3];
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let pu = u as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64;
                    let pv = v as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64;
                    let dir = q * Vector3::new((pu - half) / f, (pv - half) / f, 1.0);
                    let c = shade(scene, dir, origin);
                    for k in 0..3 {
                        acc[k] += c[k];
                    }
                }
            }
            let base = (v * image_size + u) * 3;
            for k in 0..3 {
                data[base + k] = (acc[k] * weight).clamp(0.0, 1.0);
            }
        }
    }
    Ok(img)
}

/// Mean pixel coordinate `(u, v)` of pixels close to `color`, if any.
pub fn color_centroid(img: &Tensor, color: [f64; 3], tol: f64) -> Option<(f64, f64)> {
    let s = img.shape()[0];
    let (mut su, mut sv, mut n) = (0.0, 0.0, 0.0);
    for v in 0..s {
        for u in 0..s {
            let p = &img.data()[(v * s + u) * 3..(v * s + u) * 3 + 3];
            if p.iter().zip(color).all(|(a, b)| (a - b).abs() < tol) {
                su += u as f64;
                sv += v as f64;
                n += 1.0;
            }
        }
    }
    (n > 0.0).then(|| (su / n, sv / n))
}
