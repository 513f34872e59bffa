//! Synthetic reaching environment and its perturbation engine.
//!
//! Scenes are flat discs on a textured ground plane inside the workspace
//! `[−1, 1]²`. Perturbations change the camera (continuous orbit or discrete
//! levels), lighting, ground texture, or corrupt the rendered image.

pub mod camera;
pub mod env;
pub mod image;
pub mod noise;
pub mod render;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use camera::{discrete_pose_perturb, orbit_camera, CameraPose, PoseLevel};
pub use env::{EnvConfig, EnvState, StepOutcome};
pub use noise::{apply_noise, NoiseFamily};
pub use render::render;

use crate::error::{contract_err, Error, Result};

pub const WORKSPACE_HALF: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Light {
    pub diffuse: [f64; 3],
    /// Unit vector from the surface toward the light.
    pub direction: [f64; 3],
    pub specular: f64,
    pub shadows: bool,
}

impl Default for Light {
    fn default() -> Self {
        Self {
            diffuse: [1.0, 1.0, 1.0],
            direction: [0.0, 0.0, 1.0],
            specular: 0.0,
            shadows: false,
        }
    }
}

pub const N_LIGHTING_VARIANTS: usize = 5;

/// Built-in lighting setups; variant 0 is the default light.
pub fn lighting_variant(id: usize) -> Result<Light> {
    let dir = |v: [f64; 3]| {
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        [v[0] / n, v[1] / n, v[2] / n]
    };
    Ok(match id {
        0 => Light::default(),
        1 => Light {
            diffuse: [1.0, 0.8, 0.6],
            direction: dir([0.4, 0.2, 1.0]),
            specular: 0.0,
            shadows: false,
        },
        2 => Light {
            diffuse: [0.7, 0.8, 1.0],
            direction: dir([-0.3, 0.5, 1.0]),
            specular: 0.0,
            shadows: true,
        },
        3 => Light {
            diffuse: [1.0, 1.0, 1.0],
            direction: dir([0.8, -0.6, 0.6]),
            specular: 0.0,
            shadows: true,
        },
        4 => Light {
            diffuse: [0.9, 0.9, 0.9],
            direction: dir([0.2, 0.2, 1.0]),
            specular: 0.35,
            shadows: false,
        },
        other => return Err(contract_err!("lighting variant {other} outside 0..{N_LIGHTING_VARIANTS}")),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub target_position: [f64; 2],
    pub distractor_positions: Vec<[f64; 2]>,
    pub target_color: [f64; 3],
    pub distractor_colors: Vec<[f64; 3]>,
    pub background_texture_id: usize,
    pub light: Light,
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        let inside = |p: &[f64; 2]| p.iter().all(|v| v.abs() <= WORKSPACE_HALF);
        if !inside(&self.target_position) || !self.distractor_positions.iter().all(inside) {
            return Err(contract_err!("scene objects must lie inside the workspace"));
        }
        if self.distractor_positions.len() != self.distractor_colors.len() {
            return Err(contract_err!("distractor positions and colors differ in length"));
        }
        let d = self.light.direction;
        let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        if (n - 1.0).abs() > 1e-9 {
            return Err(contract_err!("light direction is not unit length ({n})"));
        }
        Ok(())
    }
}

/// One perturbation of the source domain.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PerturbSpec {
    /// Absolute orbital offset from the reference viewpoint, radians.
    CameraOrbit { theta: f64 },
    CameraDiscrete { level: PoseLevel },
    Lighting { variant: usize },
    Texture { texture: usize },
    Noise { family: NoiseFamily, severity: u8 },
}

impl PerturbSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            PerturbSpec::CameraOrbit { theta } if !(theta > -std::f64::consts::PI && theta <= std::f64::consts::PI) => {
                Err(contract_err!("orbit angle {theta} outside (-pi, pi]"))
            }
            PerturbSpec::Noise { severity, .. } if !(1..=noise::MAX_SEVERITY).contains(&severity) => {
                Err(contract_err!("noise severity {severity} outside 1..=10"))
            }
            PerturbSpec::Lighting { variant } if variant >= N_LIGHTING_VARIANTS => {
                Err(contract_err!("lighting variant {variant} out of range"))
            }
            PerturbSpec::Texture { texture } if texture >= render::N_TEXTURES => {
                Err(contract_err!("texture {texture} out of range"))
            }
            _ => Ok(()),
        }
    }

    /// Perturbation family used for macro-averaging in reports.
    pub fn family(&self) -> &'static str {
        match self {
            PerturbSpec::CameraOrbit { .. } | PerturbSpec::CameraDiscrete { .. } => "camera",
            PerturbSpec::Lighting { .. } => "lighting",
            PerturbSpec::Texture { .. } => "texture",
            PerturbSpec::Noise { .. } => "noise",
        }
    }

    pub fn severity(&self) -> String {
        match self {
            PerturbSpec::CameraOrbit { theta } => format!("{}", fmt_deg(*theta)),
            PerturbSpec::CameraDiscrete { level } => level.name().to_string(),
            PerturbSpec::Lighting { variant } => variant.to_string(),
            PerturbSpec::Texture { texture } => texture.to_string(),
            PerturbSpec::Noise { severity, .. } => severity.to_string(),
        }
    }
}

fn fmt_deg(theta: f64) -> String {
    let d = theta.to_degrees();
    if (d - d.round()).abs() < 1e-9 {
        format!("{}", d.round() as i64)
    } else {
        format!("{d}")
    }
}

impl fmt::Display for PerturbSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PerturbSpec::CameraOrbit { theta } => write!(f, "orbit:{}", fmt_deg(*theta)),
            PerturbSpec::CameraDiscrete { level } => write!(f, "discrete:{}", level.name()),
            PerturbSpec::Lighting { variant } => write!(f, "lighting:{variant}"),
            PerturbSpec::Texture { texture } => write!(f, "texture:{texture}"),
            PerturbSpec::Noise { family, severity } => write!(f, "noise:{family}:{severity}"),
        }
    }
}

impl FromStr for PerturbSpec {
    type Err = Error;

    /// Parses `orbit:<deg>`, `discrete:<small|medium|large>`, `lighting:<id>`,
    /// `texture:<id>` and `noise:<family>:<severity>`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad perturbation '{s}'"));
        let parts: Vec<&str> = s.split(':').collect();
        let spec = match parts.as_slice() {
            ["orbit", deg] => PerturbSpec::CameraOrbit {
                theta: deg.parse::<f64>().map_err(|_| bad())?.to_radians(),
            },
            ["discrete", level] => PerturbSpec::CameraDiscrete {
                level: PoseLevel::ALL
                    .into_iter()
                    .find(|l| l.name() == *level)
                    .ok_or_else(bad)?,
            },
            ["lighting", id] => PerturbSpec::Lighting {
                variant: id.parse().map_err(|_| bad())?,
            },
            ["texture", id] => PerturbSpec::Texture {
                texture: id.parse().map_err(|_| bad())?,
            },
            ["noise", fam, sev] => PerturbSpec::Noise {
                family: fam.parse()?,
                severity: sev.parse().map_err(|_| bad())?,
            },
            _ => return Err(bad()),
        };
        spec.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(spec)
    }
}

/// Scene and camera after a perturbation, plus any image corruption to apply
/// after rendering.
#[derive(Clone, Debug, PartialEq)]
pub struct Perturbed {
    pub scene: Scene,
    pub camera: CameraPose,
    pub noise: Option<(NoiseFamily, u8)>,
}

pub fn apply_perturbation(
    spec: Option<&PerturbSpec>,
    scene: &Scene,
    camera: &CameraPose,
    center: [f64; 3],
) -> Result<Perturbed> {
    let mut out = Perturbed {
        scene: scene.clone(),
        camera: *camera,
        noise: None,
    };
    let Some(spec) = spec else {
        return Ok(out);
    };
    spec.validate()?;
    match *spec {
        PerturbSpec::CameraOrbit { theta } => {
            let base = camera::orbital_angle(camera, center);
            out.camera = orbit_camera(camera, center, base + theta)?;
        }
        PerturbSpec::CameraDiscrete { level } => {
            out.camera = discrete_pose_perturb(camera, center, level)?;
        }
        PerturbSpec::Lighting { variant } => out.scene.light = lighting_variant(variant)?,
        PerturbSpec::Texture { texture } => out.scene.background_texture_id = texture,
        PerturbSpec::Noise { family, severity } => out.noise = Some((family, severity)),
    }
    Ok(out)
}
