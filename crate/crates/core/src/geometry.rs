//! Pinhole cameras, per-pixel rays and their Plucker parameterization.
//!
//! Camera-local frame: right = +X, forward (optical axis) = +Y, up = +Z.
//! Poses are stored camera-to-world, so a camera with identity rotation at
//! `(0, -2, 0)` looks straight at the world origin.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Position of the canonical (conditioning) camera.
pub const CANONICAL_POSITION: [f64; 3] = [0.0, -2.0, 0.0];

const ORTHONORMAL_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fov_deg: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn square(fov_deg: f64, resolution: usize) -> Self {
        Self {
            fov_deg,
            width: resolution,
            height: resolution,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            return Err(Error::Camera(format!(
                "fov must lie in (0, 180) degrees, got {}",
                self.fov_deg
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Camera("image size must be nonzero".into()));
        }
        Ok(())
    }

    /// `tan(fov / 2)`: half-extent of the image plane at unit focal distance.
    pub fn half_tan(&self) -> f64 {
        (self.fov_deg.to_radians() * 0.5).tan()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    /// Camera-to-world rotation; columns are the world-space right, forward and up axes.
    pub rotation: Mat3,
    pub position: Vec3,
}

impl CameraPose {
    pub fn new(rotation: Mat3, position: Vec3) -> Self {
        Self { rotation, position }
    }

    pub fn canonical() -> Self {
        Self {
            rotation: Mat3::identity(),
            position: Vec3::from(CANONICAL_POSITION),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let gram = self.rotation.transpose() * self.rotation;
        let err = (gram - Mat3::identity()).abs().max();
        if err > ORTHONORMAL_TOL {
            return Err(Error::Camera(format!(
                "rotation is not orthonormal (max |R^T R - I| = {err:e})"
            )));
        }
        let det = self.rotation.determinant();
        if (det - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(Error::Camera(format!(
                "rotation must be proper, det = {det}"
            )));
        }
        if !self.position.iter().all(|v| v.is_finite()) {
            return Err(Error::Camera("non-finite camera position".into()));
        }
        Ok(())
    }

    pub fn forward(&self) -> Vec3 {
        self.rotation.column(1).into_owned()
    }

    /// Camera at `position` whose optical axis points at `target`, with world +Z as up.
    pub fn look_at(position: Vec3, target: Vec3) -> Self {
        let forward = (target - position).normalize();
        let mut right = forward.cross(&Vec3::z());
        if right.norm() < 1e-9 {
            // Looking straight up or down: any horizontal right axis will do.
            right = Vec3::x();
        }
        let right = right.normalize();
        let up = right.cross(&forward);
        Self {
            rotation: Mat3::from_columns(&[right, forward, up]),
            position,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub intrinsics: CameraIntrinsics,
    pub pose: CameraPose,
}

impl Camera {
    pub fn new(intrinsics: CameraIntrinsics, pose: CameraPose) -> Self {
        Self { intrinsics, pose }
    }
}

/// Axis-aligned pixel window inside an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelRect {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl PixelRect {
    pub fn full(intrinsics: &CameraIntrinsics) -> Self {
        Self {
            x: 0,
            y: 0,
            width: intrinsics.width,
            height: intrinsics.height,
        }
    }
}

/// One ray per pixel, row-major with row 0 at the top of the image.
#[derive(Debug, Clone, PartialEq)]
pub struct RayMap {
    pub width: usize,
    pub height: usize,
    pub origins: Vec<Vec3>,
    pub directions: Vec<Vec3>,
}

impl RayMap {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }
}

/// Per pixel `(o x d, d)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PluckerRayMap {
    pub width: usize,
    pub height: usize,
    pub channels: Vec<[f64; 6]>,
}

/// Unit direction of the ray through the center of pixel `(col, row)`.
fn pixel_direction(intrinsics: &CameraIntrinsics, rotation: &Mat3, col: usize, row: usize) -> Vec3 {
    let tan = intrinsics.half_tan();
    let aspect = intrinsics.width as f64 / intrinsics.height as f64;
    let u = (2.0 * (col as f64 + 0.5) / intrinsics.width as f64 - 1.0) * tan * aspect;
    let v = (1.0 - 2.0 * (row as f64 + 0.5) / intrinsics.height as f64) * tan;
    (rotation * Vec3::new(u, 1.0, v)).normalize()
}

pub fn generate_rays(intrinsics: &CameraIntrinsics, pose: &CameraPose) -> Result<RayMap> {
    generate_rays_in(intrinsics, pose, PixelRect::full(intrinsics))
}

/// Rays for a sub-window of the image; identical to the corresponding
/// entries of the full-frame ray map.
pub fn generate_rays_in(
    intrinsics: &CameraIntrinsics,
    pose: &CameraPose,
    rect: PixelRect,
) -> Result<RayMap> {
    intrinsics.validate()?;
    pose.validate()?;
    if rect.x + rect.width > intrinsics.width || rect.y + rect.height > intrinsics.height {
        return Err(Error::Camera(format!(
            "pixel window {rect:?} exceeds image {}x{}",
            intrinsics.width, intrinsics.height
        )));
    }
    let n = rect.width * rect.height;
    let mut directions = Vec::with_capacity(n);
    for row in rect.y..rect.y + rect.height {
        for col in rect.x..rect.x + rect.width {
            directions.push(pixel_direction(intrinsics, &pose.rotation, col, row));
        }
    }
    Ok(RayMap {
        width: rect.width,
        height: rect.height,
        origins: vec![pose.position; n],
        directions,
    })
}

pub fn plucker(origin: &Vec3, direction: &Vec3) -> [f64; 6] {
    let m = origin.cross(direction);
    [m.x, m.y, m.z, direction.x, direction.y, direction.z]
}

pub fn plucker_map(rays: &RayMap) -> Result<PluckerRayMap> {
    let mut channels = Vec::with_capacity(rays.len());
    for (o, d) in rays.origins.iter().zip(&rays.directions) {
        if (d.norm() - 1.0).abs() > 1e-6 {
            return Err(Error::Camera(format!(
                "ray direction must be unit length, got norm {}",
                d.norm()
            )));
        }
        channels.push(plucker(o, d));
    }
    Ok(PluckerRayMap {
        width: rays.width,
        height: rays.height,
        channels,
    })
}

/// A rigid motion `x -> R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn apply_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn apply_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    pub fn apply_pose(&self, pose: &CameraPose) -> CameraPose {
        CameraPose {
            rotation: self.rotation * pose.rotation,
            position: self.apply_point(&pose.position),
        }
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// The motion taking `pose` to the canonical frame (identity rotation at `(0,-2,0)`).
    pub fn to_canonical(pose: &CameraPose) -> Self {
        let rotation = pose.rotation.transpose();
        Self {
            rotation,
            translation: Vec3::from(CANONICAL_POSITION) - rotation * pose.position,
        }
    }
}

/// Rigidly moves every pose so that `poses[cond_index]` lands on the canonical
/// frame. Returns the moved poses and the applied transform.
pub fn normalize_poses_with_transform(
    poses: &[CameraPose],
    cond_index: usize,
) -> Result<(Vec<CameraPose>, RigidTransform)> {
    let cond = poses.get(cond_index).ok_or_else(|| {
        Error::Camera(format!(
            "conditioning index {cond_index} out of range for {} poses",
            poses.len()
        ))
    })?;
    let transform = RigidTransform::to_canonical(cond);
    let mut out: Vec<CameraPose> = poses.iter().map(|p| transform.apply_pose(p)).collect();
    // Pin the conditioning camera exactly rather than up to rounding.
    out[cond_index] = CameraPose::canonical();
    Ok((out, transform))
}

pub fn normalize_poses(poses: &[CameraPose], cond_index: usize) -> Result<Vec<CameraPose>> {
    normalize_poses_with_transform(poses, cond_index).map(|(p, _)| p)
}

/// `n` cameras evenly spaced in azimuth on a circle around the origin, all
/// looking at the origin. Camera 0 sits at azimuth 0, which for radius 2 and
/// elevation 0 is exactly the canonical frame.
pub fn circle_viewpoints(
    n: usize,
    radius: f64,
    elevation_deg: f64,
    fov_deg: f64,
    resolution: usize,
) -> Vec<Camera> {
    let intrinsics = CameraIntrinsics::square(fov_deg, resolution);
    let elev = elevation_deg.to_radians();
    // For k == 0 at zero elevation, look_at reproduces the identity rotation exactly.
    (0..n)
        .map(|k| {
            let azimuth = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
            let position = orbit_position(radius, azimuth, elev);
            Camera::new(intrinsics, CameraPose::look_at(position, Vec3::zeros()))
        })
        .collect()
}

/// Point on a sphere of `radius`; azimuth 0 / elevation 0 is `(0, -radius, 0)`,
/// positive azimuth turns towards +X.
pub fn orbit_position(radius: f64, azimuth: f64, elevation: f64) -> Vec3 {
    Vec3::new(
        radius * azimuth.sin() * elevation.cos(),
        -radius * azimuth.cos() * elevation.cos(),
        radius * elevation.sin(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rot_z(angle: f64) -> Mat3 {
        let (s, c) = angle.sin_cos();
        Mat3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
    }

    #[test]
    fn canonical_center_ray_points_at_origin() {
        let intr = CameraIntrinsics::square(50.0, 3);
        let rays = generate_rays(&intr, &CameraPose::canonical()).unwrap();
        let center = rays.directions[4];
        assert!((center - Vec3::new(0.0, 1.0, 0.0)).norm() < 1e-12);
        assert!(rays
            .origins
            .iter()
            .all(|o| *o == Vec3::new(0.0, -2.0, 0.0)));
    }

    #[test]
    fn fov_90_corner_rays_match_hand_computation() {
        // tan(45deg) = 1, 2x2 pixel centers sit at +-0.5 on the image plane.
        let intr = CameraIntrinsics::square(90.0, 2);
        let rays = generate_rays(&intr, &CameraPose::canonical()).unwrap();
        let n = (0.25f64 + 1.0 + 0.25).sqrt();
        let expected = [
            Vec3::new(-0.5, 1.0, 0.5) / n,
            Vec3::new(0.5, 1.0, 0.5) / n,
            Vec3::new(-0.5, 1.0, -0.5) / n,
            Vec3::new(0.5, 1.0, -0.5) / n,
        ];
        for (d, e) in rays.directions.iter().zip(expected.iter()) {
            assert!((d - e).norm() < 1e-12);
            assert!((d.y - 1.0 / n).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_non_orthonormal_rotation() {
        let intr = CameraIntrinsics::square(50.0, 4);
        let pose = CameraPose::new(Mat3::identity() * 1.01, Vec3::zeros());
        assert!(generate_rays(&intr, &pose).is_err());
        let reflect = CameraPose::new(Mat3::from_diagonal(&Vec3::new(-1.0, 1.0, 1.0)), Vec3::zeros());
        assert!(generate_rays(&intr, &reflect).is_err());
    }

    #[test]
    fn plucker_examples() {
        let d = Vec3::new(0.0, 1.0, 0.0);
        assert_eq!(plucker(&Vec3::zeros(), &d), [0.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        assert_eq!(
            plucker(&Vec3::new(1.0, 0.0, 0.0), &d),
            [0.0, 0.0, 1.0, 0.0, 1.0, 0.0]
        );
        let p = plucker(&Vec3::new(0.0, -2.0, 0.0), &d);
        assert!(p[..3].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn circle_viewpoints_layout() {
        let cams = circle_viewpoints(4, 2.0, 0.0, 50.0, 8);
        assert_eq!(cams[0].pose, CameraPose::canonical());
        for k in 0..4 {
            let a = cams[k].pose.position;
            let b = cams[(k + 1) % 4].pose.position;
            let angle = (a.dot(&b) / (a.norm() * b.norm())).acos();
            assert!((angle - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
            let fwd = cams[k].pose.forward();
            assert!((fwd + a.normalize()).norm() < 1e-12);
            cams[k].pose.validate().unwrap();
        }
        let single = circle_viewpoints(1, 2.0, 0.0, 50.0, 8);
        assert_eq!(single.len(), 1);
        assert_eq!(single[0].pose, CameraPose::canonical());
    }

    #[test]
    fn normalization_preserves_relative_rotation() {
        let a = CameraPose::look_at(orbit_position(2.2, 0.7, 0.3), Vec3::zeros());
        let r = rot_z(0.9);
        let b = CameraPose::new(r * a.rotation, r * a.position);
        let out = normalize_poses(&[a, b], 0).unwrap();
        // Relative pose expressed in camera a's frame is frame-independent.
        let rel_before = a.rotation.transpose() * b.rotation;
        let rel_after = out[0].rotation.transpose() * out[1].rotation;
        assert!((rel_before - rel_after).abs().max() < 1e-6);
        // The world-frame relative rotation keeps its angle (it is conjugated).
        let angle = |m: Mat3| ((m.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos();
        let world_after = out[1].rotation * out[0].rotation.transpose();
        assert!((angle(world_after) - 0.9).abs() < 1e-6);
        // Distances between camera centers are kept.
        let d0 = (a.position - b.position).norm();
        let d1 = (out[0].position - out[1].position).norm();
        assert!((d0 - d1).abs() < 1e-9);
    }

    #[test]
    fn normalization_is_idempotent_on_canonical_input() {
        let cams = circle_viewpoints(4, 2.0, 0.0, 50.0, 8);
        let poses: Vec<_> = cams.iter().map(|c| c.pose).collect();
        let out = normalize_poses(&poses, 0).unwrap();
        for (p, q) in poses.iter().zip(&out) {
            assert!((p.rotation - q.rotation).abs().max() < 1e-9);
            assert!((p.position - q.position).norm() < 1e-9);
        }
    }

    #[test]
    fn bad_cond_index() {
        assert!(normalize_poses(&[CameraPose::canonical()], 3).is_err());
    }
}
