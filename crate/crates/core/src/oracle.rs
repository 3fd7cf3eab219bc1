//! Analytic ray tracer over primitives: the environment camera and the
//! supervision source for field training.
//!
//! One directional light, Lambertian shading, hard shadows via exact shadow
//! rays. Shadowed surface points are black; the table plane shades exactly
//! like any other surface.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rotate_unit, Camera, Pose, Ray, Vec3};
use crate::img::{Image, LabelMask};
use crate::sim::{BodySpec, SceneSpec, SceneState, Shape};

/// Distant light. `direction` is unit and points from the scene toward the
/// light; its z component must be positive (upper hemisphere).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DirectionalLight {
    pub direction: Vec3,
    pub radiance: [f64; 3],
}

impl DirectionalLight {
    pub fn new(direction: Vec3, radiance: [f64; 3]) -> Result<DirectionalLight> {
        let n = direction.norm();
        if n < 1e-9 {
            return Err(Error::Contract("light direction must be nonzero".into()));
        }
        let d = direction / n;
        if d.z <= 0.0 {
            return Err(Error::Contract("light must sit in the upper hemisphere".into()));
        }
        if radiance.iter().any(|v| *v < 0.0) {
            return Err(Error::Contract("light radiance must be nonnegative".into()));
        }
        Ok(DirectionalLight { direction: d, radiance })
    }

    /// Interpret a 3D light position as a direction toward the light.
    pub fn from_position(p: Vec3, radiance: [f64; 3]) -> Result<DirectionalLight> {
        DirectionalLight::new(p, radiance)
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderOpts {
    pub background: [f64; 3],
    /// Render the z=0 table plane out to this half extent; None disables it.
    pub plane_half_extent: Option<f64>,
    pub plane_albedo: [f64; 3],
    pub include_pusher: bool,
}

impl Default for RenderOpts {
    fn default() -> Self {
        RenderOpts {
            background: [0.13, 0.15, 0.18],
            plane_half_extent: Some(0.55),
            plane_albedo: [0.62, 0.60, 0.58],
            include_pusher: true,
        }
    }
}

impl RenderOpts {
    /// Object-only view used for field-training supervision: no table, no
    /// pusher, just the body against the background.
    pub fn object_only() -> RenderOpts {
        RenderOpts { plane_half_extent: None, include_pusher: false, ..RenderOpts::default() }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Hit {
    pub t: f64,
    pub normal: Vec3,
    /// Hit point in the object frame (albedo lookup).
    pub local: Vec3,
}

/// Nearest intersection of a world-space ray with a posed shape.
pub fn intersect(shape: &Shape, pose: &Pose, ray: &Ray) -> Option<Hit> {
    let inv = pose.inverse();
    let o = inv.transform(ray.origin);
    let d = rotate_unit(&inv.orientation, ray.direction);
    let local = match shape {
        Shape::Box { half_extents } => {
            ray_box(o, d, Vec3::new(half_extents[0], half_extents[1], half_extents[2]), ray)
        }
        Shape::Cylinder { radius, height } => ray_cylinder(o, d, *radius, height * 0.5, ray),
    }?;
    Some(Hit {
        t: local.t,
        normal: rotate_unit(&pose.orientation, local.normal),
        local: local.local,
    })
}

struct LocalHit {
    t: f64,
    normal: Vec3,
    local: Vec3,
}

fn ray_box(o: Vec3, d: Vec3, h: Vec3, ray: &Ray) -> Option<LocalHit> {
    let mut t_enter = ray.t_near;
    let mut t_exit = ray.t_far;
    let mut axis = 3usize;
    let mut sign = 0.0;
    for a in 0..3 {
        let inv = 1.0 / d[a];
        let mut t0 = (-h[a] - o[a]) * inv;
        let mut t1 = (h[a] - o[a]) * inv;
        let mut s = -1.0 * inv.signum();
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
            s = -s;
        }
        if t0 > t_enter {
            t_enter = t0;
            axis = a;
            sign = s;
        }
        t_exit = t_exit.min(t1);
        if t_enter > t_exit {
            return None;
        }
    }
    if axis == 3 {
        // Origin inside the box; skip (cameras never sit inside bodies).
        return None;
    }
    let mut normal = Vec3::zeros();
    normal[axis] = sign;
    Some(LocalHit { t: t_enter, normal, local: o + d * t_enter })
}

fn ray_cylinder(o: Vec3, d: Vec3, r: f64, hh: f64, ray: &Ray) -> Option<LocalHit> {
    let mut best: Option<LocalHit> = None;
    let mut consider = |t: f64, normal: Vec3| {
        if t > ray.t_near && t < ray.t_far && best.as_ref().map_or(true, |b| t < b.t) {
            best = Some(LocalHit { t, normal, local: o + d * t });
        }
    };
    // Side surface.
    let a = d.x * d.x + d.y * d.y;
    if a > 1e-16 {
        let b = 2.0 * (o.x * d.x + o.y * d.y);
        let c = o.x * o.x + o.y * o.y - r * r;
        let disc = b * b - 4.0 * a * c;
        if disc >= 0.0 {
            let sq = disc.sqrt();
            for t in [(-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)] {
                let z = o.z + d.z * t;
                if z.abs() <= hh {
                    let p = o + d * t;
                    consider(t, Vec3::new(p.x / r, p.y / r, 0.0));
                }
            }
        }
    }
    // Caps.
    if d.z.abs() > 1e-16 {
        for (zc, nz) in [(hh, 1.0), (-hh, -1.0)] {
            let t = (zc - o.z) / d.z;
            let p = o + d * t;
            if p.x * p.x + p.y * p.y <= r * r {
                consider(t, Vec3::new(0.0, 0.0, nz));
            }
        }
    }
    best
}

/// True when the object-frame point sits inside the shape (used by the
/// brute-force shadow oracle in tests).
pub fn contains(shape: &Shape, pose: &Pose, p: Vec3) -> bool {
    let l = pose.inverse().transform(p);
    match shape {
        Shape::Box { half_extents } => {
            l.x.abs() <= half_extents[0] && l.y.abs() <= half_extents[1] && l.z.abs() <= half_extents[2]
        }
        Shape::Cylinder { radius, height } => {
            l.x * l.x + l.y * l.y <= radius * radius && l.z.abs() <= height * 0.5
        }
    }
}

/// All renderable bodies of a scene in draw order: objects, then pusher.
fn bodies<'a>(
    spec: &'a SceneSpec,
    state: &'a SceneState,
    opts: &RenderOpts,
) -> Vec<(&'a BodySpec, &'a Pose)> {
    let mut v: Vec<(&BodySpec, &Pose)> =
        spec.objects.iter().zip(state.object_poses.iter()).collect();
    if opts.include_pusher {
        v.push((&spec.pusher, &state.pusher_pose));
    }
    v
}

fn nearest_hit(
    bodies: &[(&BodySpec, &Pose)],
    ray: &Ray,
) -> Option<(usize, Hit)> {
    let mut best: Option<(usize, Hit)> = None;
    for (i, (spec, pose)) in bodies.iter().enumerate() {
        if let Some(h) = intersect(&spec.shape, pose, ray) {
            if best.as_ref().map_or(true, |(_, b)| h.t < b.t) {
                best = Some((i, h));
            }
        }
    }
    best
}

fn shadowed(bodies: &[(&BodySpec, &Pose)], point: Vec3, light: &DirectionalLight) -> bool {
    let ray = Ray {
        origin: point + light.direction * 1e-6,
        direction: light.direction,
        t_near: 0.0,
        t_far: 10.0,
    };
    bodies.iter().any(|(spec, pose)| intersect(&spec.shape, pose, &ray).is_some())
}

fn shade(albedo: [f64; 3], light: &DirectionalLight, normal: Vec3, lit: bool) -> [f64; 3] {
    if !lit {
        return [0.0, 0.0, 0.0];
    }
    let cos = normal.dot(&light.direction).max(0.0);
    [
        albedo[0] * light.radiance[0] * cos,
        albedo[1] * light.radiance[1] * cos,
        albedo[2] * light.radiance[2] * cos,
    ]
}

/// Render the scene through the analytic camera.
pub fn render_oracle(
    spec: &SceneSpec,
    state: &SceneState,
    cam: &Camera,
    light: &DirectionalLight,
    opts: &RenderOpts,
) -> Image {
    let bodies = bodies(spec, state, opts);
    let mut img = Image::new(cam.width, cam.height);
    let w = cam.width;
    img.pixels
        .par_chunks_exact_mut((w * 3) as usize)
        .enumerate()
        .for_each(|(y, row)| {
            for x in 0..w {
                let ray = cam.ray_for_pixel(x, y as u32).expect("in bounds");
                let rgb = trace_pixel(&bodies, &ray, light, opts);
                row[(x * 3) as usize..(x * 3 + 3) as usize].copy_from_slice(&rgb);
            }
        });
    img.clamped()
}

fn trace_pixel(
    bodies: &[(&BodySpec, &Pose)],
    ray: &Ray,
    light: &DirectionalLight,
    opts: &RenderOpts,
) -> [f64; 3] {
    let hit = nearest_hit(bodies, ray);
    // Table plane at z = 0.
    let plane_t = opts.plane_half_extent.and_then(|half| {
        if ray.direction.z.abs() < 1e-12 {
            return None;
        }
        let t = -ray.origin.z / ray.direction.z;
        let p = ray.point(t);
        (t > ray.t_near && t < ray.t_far && p.x.abs() <= half && p.y.abs() <= half).then_some(t)
    });

    match (hit, plane_t) {
        (Some((i, h)), pt) if pt.map_or(true, |t| h.t <= t) => {
            let p = ray.point(h.t);
            let lit = !shadowed(bodies, p, light);
            shade(bodies[i].0.albedo.at(h.local), light, h.normal, lit)
        }
        (_, Some(t)) => {
            let p = ray.point(t);
            let lit = !shadowed(bodies, p, light);
            shade(opts.plane_albedo, light, Vec3::new(0.0, 0.0, 1.0), lit)
        }
        _ => opts.background,
    }
}

/// Per-pixel nearest-object labels; 0 = background/plane/pusher, k = object
/// k-1. Binary per-object masks come from [`LabelMask::binary`].
pub fn render_masks(
    spec: &SceneSpec,
    state: &SceneState,
    cam: &Camera,
    opts: &RenderOpts,
) -> LabelMask {
    let bodies = bodies(spec, state, opts);
    let n_objects = spec.objects.len();
    let mut mask = LabelMask::new(cam.width, cam.height);
    let w = cam.width;
    mask.labels
        .par_chunks_exact_mut(w as usize)
        .enumerate()
        .for_each(|(y, row)| {
            for x in 0..w {
                let ray = cam.ray_for_pixel(x, y as u32).expect("in bounds");
                if let Some((i, _)) = nearest_hit(&bodies, &ray) {
                    if i < n_objects {
                        row[x as usize] = (i + 1) as u8;
                    }
                }
            }
        });
    mask
}

/// The fixed multi-view rig: `views` cameras on a circle looking at the
/// table center.
pub fn default_camera_rig(views: usize, resolution: u32) -> Vec<Camera> {
    (0..views)
        .map(|v| {
            let az = std::f64::consts::TAU * v as f64 / views as f64 + 0.35;
            let elev = 0.72f64; // radians, ~41 degrees
            let radius = 0.95;
            let eye = Vec3::new(
                radius * elev.cos() * az.cos(),
                radius * elev.cos() * az.sin(),
                radius * elev.sin(),
            );
            Camera::look_at(
                eye,
                Vec3::new(0.0, 0.0, 0.02),
                Vec3::new(0.0, 0.0, 1.0),
                52.0,
                resolution,
                resolution,
            )
            .expect("valid rig camera")
        })
        .collect()
}

/// Cameras on a sphere around the origin for object-centric field training.
pub fn orbit_camera(
    distance: f64,
    azimuth: f64,
    elevation: f64,
    fov_deg: f64,
    resolution: u32,
) -> Camera {
    let eye = Vec3::new(
        distance * elevation.cos() * azimuth.cos(),
        distance * elevation.cos() * azimuth.sin(),
        distance * elevation.sin(),
    );
    let up = if elevation.abs() > 1.4 { Vec3::new(1.0, 0.0, 0.0) } else { Vec3::new(0.0, 0.0, 1.0) };
    Camera::look_at(eye, Vec3::zeros(), up, fov_deg, resolution, resolution).expect("orbit camera")
}
