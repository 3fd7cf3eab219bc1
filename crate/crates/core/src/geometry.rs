//! Poses, quaternion algebra, pinhole cameras, and rays.
//!
//! Conventions used across the whole crate:
//! - right-handed world frame, z up, units in meters;
//! - quaternions stored as (w, x, y, z) and kept unit-norm;
//! - poses serialize as `[px, py, pz, qw, qx, qy, qz]`;
//! - camera frame: x right, y down, z forward (out of the lens).

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

const UNIT_TOL: f64 = 1e-6;

/// Unit quaternion in (w, x, y, z) order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quat {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quat {
    pub const IDENTITY: Quat = Quat { w: 1.0, x: 0.0, y: 0.0, z: 0.0 };

    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Quat {
        Quat { w, x, y, z }.normalized()
    }

    /// Rotation of `angle` radians about `axis` (need not be unit).
    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Quat {
        let n = axis.norm();
        if n < 1e-12 {
            return Quat::IDENTITY;
        }
        let (s, c) = (angle * 0.5).sin_cos();
        let a = axis * (s / n);
        Quat { w: c, x: a.x, y: a.y, z: a.z }
    }

    pub fn from_yaw(yaw: f64) -> Quat {
        Quat::from_axis_angle(Vec3::new(0.0, 0.0, 1.0), yaw)
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn normalized(&self) -> Quat {
        let n = self.norm();
        if n < 1e-12 {
            return Quat::IDENTITY;
        }
        Quat { w: self.w / n, x: self.x / n, y: self.y / n, z: self.z / n }
    }

    pub fn conjugate(&self) -> Quat {
        Quat { w: self.w, x: -self.x, y: -self.y, z: -self.z }
    }

    /// Hamilton product `self * rhs` (apply `rhs` first, then `self`).
    pub fn mul(&self, rhs: &Quat) -> Quat {
        let (aw, ax, ay, az) = (self.w, self.x, self.y, self.z);
        let (bw, bx, by, bz) = (rhs.w, rhs.x, rhs.y, rhs.z);
        Quat {
            w: aw * bw - ax * bx - ay * by - az * bz,
            x: aw * bx + ax * bw + ay * bz - az * by,
            y: aw * by - ax * bz + ay * bw + az * bx,
            z: aw * bz + ax * by - ay * bx + az * bw,
        }
    }

    pub fn to_matrix(&self) -> Matrix3<f64> {
        let Quat { w, x, y, z } = *self;
        Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        )
    }

    /// Angle of the rotation in [0, pi].
    pub fn angle(&self) -> f64 {
        let v = (self.x * self.x + self.y * self.y + self.z * self.z).sqrt();
        2.0 * v.atan2(self.w.abs())
    }

    /// Yaw component (rotation about z) assuming a z-only rotation.
    pub fn yaw(&self) -> f64 {
        2.0 * self.z.atan2(self.w)
    }
}

/// Rotate `v` by unit quaternion `q`.
///
/// Errors if `q` deviates from unit norm by more than 1e-6.
pub fn quat_rotate(q: &Quat, v: Vec3) -> Result<Vec3> {
    if (q.norm() - 1.0).abs() > UNIT_TOL {
        return Err(Error::Contract(format!(
            "quat_rotate requires a unit quaternion, got norm {}",
            q.norm()
        )));
    }
    Ok(rotate_unit(q, v))
}

/// Rotation by a quaternion already known to be unit-norm.
#[inline]
pub fn rotate_unit(q: &Quat, v: Vec3) -> Vec3 {
    // v + 2 w (u x v) + 2 (u x (u x v)) with u = (x,y,z)
    let u = Vec3::new(q.x, q.y, q.z);
    let t = 2.0 * u.cross(&v);
    v + q.w * t + u.cross(&t)
}

/// Rigid transform: rotation then translation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub position: Vec3,
    pub orientation: Quat,
}

impl Pose {
    pub const IDENTITY: Pose =
        Pose { position: Vec3::new(0.0, 0.0, 0.0), orientation: Quat::IDENTITY };

    pub fn new(position: Vec3, orientation: Quat) -> Pose {
        Pose { position, orientation: orientation.normalized() }
    }

    pub fn from_xy_yaw(x: f64, y: f64, z: f64, yaw: f64) -> Pose {
        Pose { position: Vec3::new(x, y, z), orientation: Quat::from_yaw(yaw) }
    }

    /// Map a point from the local frame into the world frame.
    pub fn transform(&self, p: Vec3) -> Vec3 {
        rotate_unit(&self.orientation, p) + self.position
    }

    /// Rotate a direction from the local frame into the world frame.
    pub fn rotate(&self, d: Vec3) -> Vec3 {
        rotate_unit(&self.orientation, d)
    }

    pub fn inverse(&self) -> Pose {
        let qi = self.orientation.conjugate();
        Pose { position: -rotate_unit(&qi, self.position), orientation: qi }
    }

    /// `self * rhs`: apply `rhs` first.
    pub fn compose(&self, rhs: &Pose) -> Pose {
        Pose {
            position: self.transform(rhs.position),
            orientation: self.orientation.mul(&rhs.orientation).normalized(),
        }
    }

    /// Serialize as the canonical 7-vector `[px,py,pz,qw,qx,qy,qz]`.
    pub fn to_array(&self) -> [f64; 7] {
        let p = self.position;
        let q = self.orientation;
        [p.x, p.y, p.z, q.w, q.x, q.y, q.z]
    }

    pub fn from_array(a: &[f64]) -> Pose {
        Pose::new(Vec3::new(a[0], a[1], a[2]), Quat { w: a[3], x: a[4], y: a[5], z: a[6] })
    }
}

/// Position error (m) and orientation error (rad, in [0, pi]) between poses.
pub fn pose_distance(a: &Pose, b: &Pose) -> (f64, f64) {
    let dp = (a.position - b.position).norm();
    let rel = a.orientation.conjugate().mul(&b.orientation);
    (dp, rel.angle())
}

/// Ray with parametric range; `point(t) = origin + t * direction`.
#[derive(Debug, Clone, Copy)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    pub fn new(origin: Vec3, direction: Vec3, t_near: f64, t_far: f64) -> Result<Ray> {
        if (direction.norm() - 1.0).abs() > 1e-9 {
            return Err(Error::Contract("ray direction must be unit-norm".into()));
        }
        if !(0.0 <= t_near && t_near < t_far) {
            return Err(Error::Contract(format!(
                "ray range must satisfy 0 <= t_near < t_far, got [{t_near}, {t_far}]"
            )));
        }
        Ok(Ray { origin, direction, t_near, t_far })
    }

    pub fn point(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

/// Pinhole camera. `pose` places the camera in the world (camera-to-world).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Camera {
    pub pose: Pose,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub t_near: f64,
    pub t_far: f64,
}

impl Camera {
    pub fn new(
        pose: Pose,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
    ) -> Result<Camera> {
        if fx <= 0.0 || fy <= 0.0 {
            return Err(Error::Contract("focal lengths must be positive".into()));
        }
        if !(0.0..width as f64).contains(&cx) || !(0.0..height as f64).contains(&cy) {
            return Err(Error::Contract("principal point must lie inside the image".into()));
        }
        Ok(Camera { pose, fx, fy, cx, cy, width, height, t_near: 1e-4, t_far: 100.0 })
    }

    /// Camera at `eye` looking toward `target`, with `up` fixing the roll.
    pub fn look_at(
        eye: Vec3,
        target: Vec3,
        up: Vec3,
        fov_deg: f64,
        width: u32,
        height: u32,
    ) -> Result<Camera> {
        let fwd = (target - eye).normalize();
        let right = fwd.cross(&up).normalize();
        let down = fwd.cross(&right);
        // Columns of the rotation are the camera axes expressed in world coords.
        let m = Matrix3::from_columns(&[right, down, fwd]);
        let q = matrix_to_quat(&m);
        let f = 0.5 * width as f64 / (fov_deg.to_radians() * 0.5).tan();
        Camera::new(Pose::new(eye, q), f, f, width as f64 * 0.5, height as f64 * 0.5, width, height)
    }

    /// Same viewpoint and field of view at a different resolution.
    pub fn rescaled(&self, width: u32, height: u32) -> Camera {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Camera {
            pose: self.pose,
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: self.cx * sx,
            cy: self.cy * sy,
            width,
            height,
            t_near: self.t_near,
            t_far: self.t_far,
        }
    }

    /// World-space optical axis (camera forward).
    pub fn optical_axis(&self) -> Vec3 {
        self.pose.rotate(Vec3::new(0.0, 0.0, 1.0))
    }

    /// Ray through the center of pixel `(px, py)`.
    pub fn ray_for_pixel(&self, px: u32, py: u32) -> Result<Ray> {
        if px >= self.width || py >= self.height {
            return Err(Error::Bounds(format!(
                "pixel ({px},{py}) outside {}x{}",
                self.width, self.height
            )));
        }
        let u = (px as f64 + 0.5 - self.cx) / self.fx;
        let v = (py as f64 + 0.5 - self.cy) / self.fy;
        let dir_cam = Vec3::new(u, v, 1.0).normalize();
        Ray::new(self.pose.position, self.pose.rotate(dir_cam), self.t_near, self.t_far)
    }

    /// Project a world point to continuous pixel coordinates.
    /// Returns None for points behind the camera.
    pub fn project(&self, p: Vec3) -> Option<(f64, f64)> {
        let pc = self.pose.inverse().transform(p);
        if pc.z <= 1e-9 {
            return None;
        }
        Some((self.fx * pc.x / pc.z + self.cx, self.fy * pc.y / pc.z + self.cy))
    }
}

/// Shepperd's method; assumes a proper rotation matrix.
pub fn matrix_to_quat(m: &Matrix3<f64>) -> Quat {
    let tr = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
    let q = if tr > 0.0 {
        let s = (tr + 1.0).sqrt() * 2.0;
        Quat {
            w: 0.25 * s,
            x: (m[(2, 1)] - m[(1, 2)]) / s,
            y: (m[(0, 2)] - m[(2, 0)]) / s,
            z: (m[(1, 0)] - m[(0, 1)]) / s,
        }
    } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
        let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
        Quat {
            w: (m[(2, 1)] - m[(1, 2)]) / s,
            x: 0.25 * s,
            y: (m[(0, 1)] + m[(1, 0)]) / s,
            z: (m[(0, 2)] + m[(2, 0)]) / s,
        }
    } else if m[(1, 1)] > m[(2, 2)] {
        let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
        Quat {
            w: (m[(0, 2)] - m[(2, 0)]) / s,
            x: (m[(0, 1)] + m[(1, 0)]) / s,
            y: 0.25 * s,
            z: (m[(1, 2)] + m[(2, 1)]) / s,
        }
    } else {
        let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
        Quat {
            w: (m[(1, 0)] - m[(0, 1)]) / s,
            x: (m[(0, 2)] + m[(2, 0)]) / s,
            y: (m[(1, 2)] + m[(2, 1)]) / s,
            z: 0.25 * s,
        }
    };
    q.normalized()
}

/// Sample a unit quaternion uniformly (Shoemake's subgroup method).
pub fn random_quat(rng: &mut impl rand::Rng) -> Quat {
    use std::f64::consts::TAU;
    let u1: f64 = rng.gen();
    let u2: f64 = rng.gen::<f64>() * TAU;
    let u3: f64 = rng.gen::<f64>() * TAU;
    let a = (1.0 - u1).sqrt();
    let b = u1.sqrt();
    Quat { w: a * u2.sin(), x: a * u2.cos(), y: b * u3.sin(), z: b * u3.cos() }.normalized()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    #[test]
    fn rotate_identity() {
        let v = Vec3::new(1.0, 2.0, 3.0);
        let r = quat_rotate(&Quat::IDENTITY, v).unwrap();
        assert_eq!(r, v);
    }

    #[test]
    fn rotate_quarter_turn_about_z() {
        let q = Quat::from_yaw(std::f64::consts::FRAC_PI_2);
        let r = quat_rotate(&q, Vec3::new(1.0, 0.0, 0.0)).unwrap();
        assert_abs_diff_eq!(r.x, 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(r.y, 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(r.z, 0.0, epsilon = 1e-9);
    }

    #[test]
    fn rotate_matches_matrix_oracle() {
        let mut rng = stream(1234, 0);
        for _ in 0..200 {
            let q = random_quat(&mut rng);
            let v = Vec3::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5);
            let by_quat = quat_rotate(&q, v).unwrap();
            let by_matrix = q.to_matrix() * v;
            assert_abs_diff_eq!((by_quat - by_matrix).norm(), 0.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn rotate_rejects_non_unit() {
        let q = Quat { w: 1.1, x: 0.0, y: 0.0, z: 0.0 };
        assert!(quat_rotate(&q, Vec3::zeros()).is_err());
    }

    #[test]
    fn rotation_preserves_norm() {
        let mut rng = stream(99, 1);
        for _ in 0..10_000 {
            let q = random_quat(&mut rng);
            let v = Vec3::new(
                rng.gen::<f64>() * 4.0 - 2.0,
                rng.gen::<f64>() * 4.0 - 2.0,
                rng.gen::<f64>() * 4.0 - 2.0,
            );
            let r = rotate_unit(&q, v);
            assert!((r.norm() - v.norm()).abs() < 1e-9);
        }
    }

    #[test]
    fn double_cover() {
        let mut rng = stream(5, 2);
        for _ in 0..100 {
            let q = random_quat(&mut rng);
            let n = Quat { w: -q.w, x: -q.x, y: -q.y, z: -q.z };
            let v = Vec3::new(0.3, -0.2, 0.9);
            let a = rotate_unit(&q, v);
            let b = rotate_unit(&n, v);
            assert_abs_diff_eq!((a - b).norm(), 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn pose_compose_inverse_is_identity() {
        let mut rng = stream(7, 3);
        for _ in 0..200 {
            let p = Pose::new(
                Vec3::new(rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()),
                random_quat(&mut rng),
            );
            let id = p.compose(&p.inverse());
            assert!(id.position.norm() < 1e-9);
            assert!((id.orientation.norm() - 1.0).abs() < 1e-9);
            assert!(id.orientation.angle() < 1e-9);
        }
    }

    #[test]
    fn pose_distance_identity_and_345() {
        let a = Pose::from_xy_yaw(0.1, 0.2, 0.0, 0.4);
        assert_eq!(pose_distance(&a, &a), (0.0, 0.0));

        let b = Pose::new(a.position + Vec3::new(0.3, 0.4, 0.0), a.orientation);
        let (dp, dq) = pose_distance(&a, &b);
        assert_abs_diff_eq!(dp, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(dq, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn pose_distance_quarter_turn() {
        let a = Pose::IDENTITY;
        let b = Pose::new(Vec3::new(1.0, 0.0, 0.0), Quat::from_yaw(std::f64::consts::FRAC_PI_2));
        let (_, dq) = pose_distance(&a, &b);
        assert_abs_diff_eq!(dq, std::f64::consts::FRAC_PI_2, epsilon = 1e-9);
    }

    fn test_camera() -> Camera {
        Camera::look_at(
            Vec3::new(0.6, 0.4, 0.7),
            Vec3::new(0.0, 0.0, 0.05),
            Vec3::new(0.0, 0.0, 1.0),
            50.0,
            64,
            64,
        )
        .unwrap()
    }

    #[test]
    fn principal_pixel_is_optical_axis() {
        // Principal point at (32, 32) means pixel (31,31)..(32,32) corners;
        // use a camera whose principal point sits on a pixel center.
        let mut cam = test_camera();
        cam.cx = 31.5;
        cam.cy = 31.5;
        let ray = cam.ray_for_pixel(31, 31).unwrap();
        assert_abs_diff_eq!((ray.direction - cam.optical_axis()).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn corner_rays_mirror() {
        let cam = test_camera();
        let a = cam.ray_for_pixel(0, 0).unwrap();
        let b = cam.ray_for_pixel(63, 63).unwrap();
        let axis = cam.optical_axis();
        // Mirror-symmetric about the optical axis: equal angles to it.
        assert_abs_diff_eq!(a.direction.dot(&axis), b.direction.dot(&axis), epsilon = 1e-12);
    }

    #[test]
    fn pixel_ray_roundtrip_within_half_pixel() {
        let cam = test_camera();
        for py in 0..64 {
            for px in 0..64 {
                let ray = cam.ray_for_pixel(px, py).unwrap();
                let p = ray.point(1.3);
                let (u, v) = cam.project(p).unwrap();
                assert!((u - (px as f64 + 0.5)).abs() < 0.5, "px {px} -> {u}");
                assert!((v - (py as f64 + 0.5)).abs() < 0.5, "py {py} -> {v}");
            }
        }
    }

    #[test]
    fn out_of_bounds_pixel_rejected() {
        let cam = test_camera();
        assert!(cam.ray_for_pixel(64, 0).is_err());
    }

    #[test]
    fn camera_validates_intrinsics() {
        assert!(Camera::new(Pose::IDENTITY, -1.0, 1.0, 1.0, 1.0, 4, 4).is_err());
        assert!(Camera::new(Pose::IDENTITY, 10.0, 10.0, 7.0, 2.0, 8, 8).is_ok());
        assert!(Camera::new(Pose::IDENTITY, 10.0, 10.0, 8.5, 2.0, 8, 8).is_err());
    }
}
