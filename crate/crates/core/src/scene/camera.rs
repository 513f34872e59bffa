//! Camera poses and the viewpoint perturbations: continuous orbits about the
//! workspace and three discrete difficulty levels.
//!
//! Camera frame convention: `x` right, `y` down, `z` along the optical axis.
//! The orientation quaternion maps camera-frame vectors to world vectors.

use nalgebra::{Point3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{contract_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub position: [f64; 3],
    /// Unit quaternion `[w, x, y, z]`.
    pub orientation: [f64; 4],
}

impl CameraPose {
    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        let [w, x, y, z] = self.orientation;
        UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(w, x, y, z))
    }

    pub fn from_parts(position: Vector3<f64>, q: UnitQuaternion<f64>) -> Self {
        let c = q.quaternion().coords;
        Self {
            position: [position.x, position.y, position.z],
            // nalgebra stores (i, j, k, w).
            orientation: [c[3], c[0], c[1], c[2]],
        }
    }

    pub fn position_vec(&self) -> Vector3<f64> {
        Vector3::from(self.position)
    }

    /// Camera looking from `position` at `target`, image `y` pointing down.
    pub fn look_at(position: [f64; 3], target: [f64; 3]) -> Result<Self> {
        let p = Vector3::from(position);
        let dir = Vector3::from(target) - p;
        if dir.norm() < 1e-12 {
            return Err(contract_err!("look_at target coincides with the camera"));
        }
        let down = -Vector3::z();
        if dir.normalize().cross(&down).norm() < 1e-9 {
            // Straight down: keep world +x as image right.
            let q = UnitQuaternion::face_towards(&dir, &Vector3::y());
            return Ok(Self::from_parts(p, q));
        }
        let q = UnitQuaternion::face_towards(&dir, &down);
        Ok(Self::from_parts(p, q))
    }

    pub fn optical_axis(&self) -> Vector3<f64> {
        self.quaternion() * Vector3::z()
    }

    pub fn quaternion_norm(&self) -> f64 {
        self.orientation.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// World point → camera-frame coordinates.
    pub fn to_camera(&self, world: [f64; 3]) -> Vector3<f64> {
        self.quaternion().inverse() * (Vector3::from(world) - self.position_vec())
    }
}

/// Azimuth of the camera about `center` in the ground plane.
pub fn orbital_angle(pose: &CameraPose, center: [f64; 3]) -> f64 {
    (pose.position[1] - center[1]).atan2(pose.position[0] - center[0])
}

/// Places the camera at absolute orbital angle `theta` on the horizontal
/// circle through its current position about `p_eef`, rotating the
/// orientation by the same yaw so the view keeps pointing into the workspace.
pub fn orbit_camera(pose: &CameraPose, p_eef: [f64; 3], theta: f64) -> Result<CameraPose> {
    let dx = pose.position[0] - p_eef[0];
    let dy = pose.position[1] - p_eef[1];
    let r = (dx * dx + dy * dy).sqrt();
    if r < 1e-12 {
        return Err(contract_err!("camera is above the orbit center; orbit undefined"));
    }
    let theta0 = dy.atan2(dx);
    let pos = Vector3::new(r * theta.cos() + p_eef[0], r * theta.sin() + p_eef[1], pose.position[2]);
    let yaw = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), theta - theta0);
    let mut q = yaw * pose.quaternion();
    q.renormalize();
    Ok(CameraPose::from_parts(pos, q))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoseLevel {
    Small,
    Medium,
    Large,
}

impl PoseLevel {
    pub const ALL: [PoseLevel; 3] = [PoseLevel::Small, PoseLevel::Medium, PoseLevel::Large];

    /// Orbit offset in degrees.
    pub fn angle_deg(self) -> f64 {
        match self {
            PoseLevel::Small => 10.0,
            PoseLevel::Medium => 25.0,
            PoseLevel::Large => 40.0,
        }
    }

    /// Vertical camera translation in workspace units.
    pub fn lift(self) -> f64 {
        match self {
            PoseLevel::Small => 0.0,
            PoseLevel::Medium => 0.05,
            PoseLevel::Large => 0.10,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PoseLevel::Small => "small",
            PoseLevel::Medium => "medium",
            PoseLevel::Large => "large",
        }
    }
}

/// Orbits by the level's angle relative to the current azimuth, then lifts
/// the camera by the level's translation.
pub fn discrete_pose_perturb(pose: &CameraPose, center: [f64; 3], level: PoseLevel) -> Result<CameraPose> {
    let theta = orbital_angle(pose, center) + level.angle_deg().to_radians();
    let mut out = orbit_camera(pose, center, theta)?;
    out.position[2] += level.lift();
    Ok(out)
}

/// Rotation angle (radians) of `b` relative to `a`.
pub fn relative_angle(a: &CameraPose, b: &CameraPose) -> f64 {
    a.quaternion().angle_to(&b.quaternion())
}

/// Pinhole projection to pixel coordinates `(u, v)`; `None` behind the camera.
pub fn project(pose: &CameraPose, world: [f64; 3], image_size: usize, fov_deg: f64) -> Option<(f64, f64)> {
    let c = pose.to_camera(world);
    if c.z <= 1e-9 {
        return None;
    }
    let f = focal_length(image_size, fov_deg);
    let half = image_size as f64 / 2.0;
    Some((half + f * c.x / c.z, half + f * c.y / c.z))
}

pub fn focal_length(image_size: usize, fov_deg: f64) -> f64 {
    image_size as f64 / 2.0 / (fov_deg.to_radians() / 2.0).tan()
}

/// Does the optical axis pass within `tol` of `point`?
pub fn axis_hits(pose: &CameraPose, point: [f64; 3], tol: f64) -> bool {
    let axis = pose.optical_axis();
    let v = Point3::from(Vector3::from(point)) - Point3::from(pose.position_vec());
    let t = v.dot(&axis);
    t > 0.0 && (v - axis * t).norm() < tol
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn ref_pose() -> CameraPose {
        CameraPose::look_at([1.0, 0.0, 2.0], [0.0, 0.0, 0.0]).unwrap()
    }

    #[test]
    fn orbit_examples() {
        let p = ref_pose();
        let q = orbit_camera(&p, [0.0, 0.0, 0.0], PI / 2.0).unwrap();
        assert!((q.position[0]).abs() < 1e-12 && (q.position[1] - 1.0).abs() < 1e-12 && q.position[2] == 2.0);
        let same = orbit_camera(&p, [0.0, 0.0, 0.0], 0.0).unwrap();
        assert!((same.position[0] - 1.0).abs() < 1e-15 && same.position[1].abs() < 1e-15);
        let full = orbit_camera(&p, [0.0, 0.0, 0.0], 2.0 * PI).unwrap();
        for i in 0..3 {
            assert!((full.position[i] - same.position[i]).abs() < 1e-12);
        }
        assert!(axis_hits(&q, [0.0, 0.0, 0.0], 1e-9));
    }

    #[test]
    fn orbit_above_center_is_rejected() {
        let p = CameraPose::look_at([0.0, 0.0, 2.0], [0.0, 0.0, 0.0]).unwrap();
        assert!(orbit_camera(&p, [0.0, 0.0, 0.0], 0.3).is_err());
    }

    #[test]
    fn look_at_image_down_is_world_down() {
        let p = ref_pose();
        let down = p.quaternion() * Vector3::y();
        assert!(down.z < 0.0);
        assert!(axis_hits(&p, [0.0, 0.0, 0.0], 1e-12));
    }

    #[test]
    fn discrete_levels_are_ordered() {
        let p = ref_pose();
        let mut last = 0.0;
        for level in PoseLevel::ALL {
            let q = discrete_pose_perturb(&p, [0.0; 3], level).unwrap();
            let ang = relative_angle(&p, &q);
            assert!((ang - level.angle_deg().to_radians()).abs() < 1e-9, "{level:?} {ang}");
            assert!(ang > last);
            last = ang;
        }
        let once = discrete_pose_perturb(&p, [0.0; 3], PoseLevel::Small).unwrap();
        let twice = discrete_pose_perturb(&once, [0.0; 3], PoseLevel::Small).unwrap();
        assert_ne!(once, twice);
    }

    #[test]
    fn projection_center() {
        let p = ref_pose();
        let (u, v) = project(&p, [0.0, 0.0, 0.0], 32, 60.0).unwrap();
        assert!((u - 16.0).abs() < 1e-9 && (v - 16.0).abs() < 1e-9);
        assert!(project(&p, [3.0, 0.0, 4.0], 32, 60.0).is_none());
    }
}
