//! Multi-object scene rendering: per-sample density summation with
//! density-weighted radiance, plus inter-object shadows via shadow mapping.
//!
//! The analytic table plane is a fixed background receiver. Contributions
//! along a ray accumulate in the order of each object's box-entry distance,
//! which makes the result independent of the object list order.

use nalgebra::Matrix3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::field::{ray_aabb, sample_ts, EvalScratch, ScatterField};
use crate::geometry::{Camera, Pose, Ray, Vec3};
use crate::img::Image;
use crate::oracle::DirectionalLight;
use crate::rng;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlaneOpts {
    pub half_extent: f64,
    pub albedo: [f64; 3],
}

impl Default for PlaneOpts {
    fn default() -> Self {
        PlaneOpts { half_extent: 0.55, albedo: [0.62, 0.60, 0.58] }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShadowOpts {
    pub resolution: usize,
    pub samples: usize,
    /// Depth bias in texels.
    pub bias_factor: f64,
    /// Brightness factor applied to shadowed receivers.
    pub ambient: f64,
    /// Whether object surfaces receive shadows from other objects (the
    /// plane always receives).
    pub objects_receive: bool,
}

impl Default for ShadowOpts {
    fn default() -> Self {
        ShadowOpts {
            resolution: 256,
            samples: 32,
            bias_factor: 2.0,
            ambient: 0.25,
            objects_receive: true,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComposeOpts {
    pub samples_per_ray: usize,
    pub seed: u64,
    pub background: [f64; 3],
    pub plane: Option<PlaneOpts>,
    pub shadows: Option<ShadowOpts>,
}

impl Default for ComposeOpts {
    fn default() -> Self {
        ComposeOpts {
            samples_per_ray: 64,
            seed: 0,
            background: [0.13, 0.15, 0.18],
            plane: Some(PlaneOpts::default()),
            shadows: Some(ShadowOpts::default()),
        }
    }
}

/// A renderable scene: per-object fields and poses plus one light.
pub struct ComposedScene<'a> {
    pub fields: Vec<&'a ScatterField>,
    pub poses: Vec<Pose>,
    pub light: DirectionalLight,
}

impl<'a> ComposedScene<'a> {
    pub fn new(fields: Vec<&'a ScatterField>, poses: Vec<Pose>, light: DirectionalLight) -> Self {
        assert_eq!(fields.len(), poses.len(), "pose count must equal field count");
        ComposedScene { fields, poses, light }
    }
}

struct ObjCtx<'a> {
    field: &'a ScatterField,
    /// World -> object rotation.
    rot_t: Matrix3<f64>,
    pos: Vec3,
    light_local: Vec3,
}

fn contexts<'a>(
    fields: &[&'a ScatterField],
    poses: &[Pose],
    light: &DirectionalLight,
) -> Vec<ObjCtx<'a>> {
    fields
        .iter()
        .zip(poses)
        .map(|(f, p)| {
            let rot_t = p.orientation.to_matrix().transpose();
            ObjCtx { field: f, rot_t, pos: p.position, light_local: rot_t * light.direction }
        })
        .collect()
}

struct ObjHit {
    obj: usize,
    t0: f64,
    t1: f64,
    o_local: Vec3,
    d_local: Vec3,
    w_out_local: Vec3,
}

fn object_hits(ctxs: &[ObjCtx], ray: &Ray) -> Vec<ObjHit> {
    let mut hits: Vec<ObjHit> = ctxs
        .iter()
        .enumerate()
        .filter_map(|(k, c)| {
            let o_local = c.rot_t * (ray.origin - c.pos);
            let d_local = c.rot_t * ray.direction;
            ray_aabb(o_local, d_local, c.field.bbox_min, c.field.bbox_max).and_then(|(a, b)| {
                let t0 = a.max(ray.t_near);
                let t1 = b.min(ray.t_far);
                (t0 < t1).then(|| ObjHit {
                    obj: k,
                    t0,
                    t1,
                    o_local,
                    d_local,
                    w_out_local: -d_local,
                })
            })
        })
        .collect();
    hits.sort_by(|a, b| a.t0.partial_cmp(&b.t0).unwrap().then(a.t1.partial_cmp(&b.t1).unwrap()));
    hits
}

// ---------------------------------------------------------------------------
// shadow mapping

/// Orthographic depth map rendered along the light direction. Depth is the
/// distance from a reference plane on the lit side; texels with no opaque
/// hit stay at infinity, so queries there report lit.
pub struct ShadowMap {
    origin: Vec3,
    axis_u: Vec3,
    axis_v: Vec3,
    axis_w: Vec3,
    du: f64,
    dv: f64,
    res: usize,
    depth: Vec<f64>,
    bias: f64,
}

impl ShadowMap {
    /// True when nothing opaque sits between the point and the light.
    pub fn lit(&self, p: Vec3) -> bool {
        if self.res == 0 {
            return true;
        }
        let rel = p - self.origin;
        let iu = (rel.dot(&self.axis_u) / self.du).floor();
        let iv = (rel.dot(&self.axis_v) / self.dv).floor();
        if iu < 0.0 || iv < 0.0 || iu >= self.res as f64 || iv >= self.res as f64 {
            return true;
        }
        let d = rel.dot(&self.axis_w);
        self.depth[iv as usize * self.res + iu as usize] >= d - self.bias
    }
}

/// Render the scene's opacity from the light: depth per texel is the first
/// sample where accumulated opacity crosses one half. `exclude` drops one
/// object so its own surfaces do not self-shadow.
pub fn shadow_map(
    fields: &[&ScatterField],
    poses: &[Pose],
    light: &DirectionalLight,
    opts: &ShadowOpts,
    exclude: Option<usize>,
    seed: u64,
) -> ShadowMap {
    let w = -light.direction; // travel direction of the light
    let helper = if w.z.abs() < 0.9 { Vec3::new(0.0, 0.0, 1.0) } else { Vec3::new(1.0, 0.0, 0.0) };
    let axis_u = w.cross(&helper).normalize();
    let axis_v = w.cross(&axis_u);

    // Cover the world-space bounding boxes of all included objects.
    let mut lo_u = f64::INFINITY;
    let mut hi_u = f64::NEG_INFINITY;
    let mut lo_v = f64::INFINITY;
    let mut hi_v = f64::NEG_INFINITY;
    let mut lo_w = f64::INFINITY;
    let mut hi_w = f64::NEG_INFINITY;
    for (k, (f, p)) in fields.iter().zip(poses).enumerate() {
        if Some(k) == exclude {
            continue;
        }
        for cx in 0..8 {
            let corner = Vec3::new(
                if cx & 1 == 0 { f.bbox_min.x } else { f.bbox_max.x },
                if cx & 2 == 0 { f.bbox_min.y } else { f.bbox_max.y },
                if cx & 4 == 0 { f.bbox_min.z } else { f.bbox_max.z },
            );
            let wpt = p.transform(corner);
            lo_u = lo_u.min(wpt.dot(&axis_u));
            hi_u = hi_u.max(wpt.dot(&axis_u));
            lo_v = lo_v.min(wpt.dot(&axis_v));
            hi_v = hi_v.max(wpt.dot(&axis_v));
            lo_w = lo_w.min(wpt.dot(&w));
            hi_w = hi_w.max(wpt.dot(&w));
        }
    }
    if lo_u > hi_u {
        // Nothing casts: an empty map answers lit everywhere.
        return ShadowMap {
            origin: Vec3::zeros(),
            axis_u,
            axis_v,
            axis_w: w,
            du: 1.0,
            dv: 1.0,
            res: 0,
            depth: Vec::new(),
            bias: 0.0,
        };
    }
    let pad = 1e-3;
    lo_u -= pad;
    hi_u += pad;
    lo_v -= pad;
    hi_v += pad;
    let march_start = lo_w - pad;
    let march_end = hi_w + pad;

    let res = opts.resolution;
    let du = (hi_u - lo_u) / res as f64;
    let dv = (hi_v - lo_v) / res as f64;
    let origin = axis_u * lo_u + axis_v * lo_v + w * march_start;

    let ctxs: Vec<ObjCtx> = fields
        .iter()
        .zip(poses)
        .enumerate()
        .filter(|(k, _)| Some(*k) != exclude)
        .map(|(_, (f, p))| {
            let rot_t = p.orientation.to_matrix().transpose();
            ObjCtx { field: f, rot_t, pos: p.position, light_local: rot_t * light.direction }
        })
        .collect();

    let mut depth = vec![f64::INFINITY; res * res];
    depth.par_chunks_exact_mut(res).enumerate().for_each(|(j, row)| {
        let mut scratch = EvalScratch::default();
        for (i, out) in row.iter_mut().enumerate() {
            let start = origin
                + axis_u * ((i as f64 + 0.5) * du)
                + axis_v * ((j as f64 + 0.5) * dv);
            let ray = Ray {
                origin: start,
                direction: w,
                t_near: 0.0,
                t_far: march_end - march_start,
            };
            let hits = object_hits(&ctxs, &ray);
            if hits.is_empty() {
                continue;
            }
            let t_enter = hits[0].t0;
            let t_exit = hits.iter().map(|h| h.t1).fold(f64::MIN, f64::max);
            let (delta, ts) = sample_ts(
                t_enter,
                t_exit,
                opts.samples,
                rng::child_seed(seed, 0x5a0d),
                (j * res + i) as u64,
            );
            let mut trans = 1.0f64;
            for t in ts {
                let mut sigma = 0.0;
                for h in &hits {
                    if t >= h.t0 && t <= h.t1 {
                        let x = h.o_local + h.d_local * t;
                        let c = &ctxs[h.obj];
                        let (_, s) = c.field.eval_raw(x, c.light_local, h.w_out_local, &mut scratch);
                        sigma += s;
                    }
                }
                trans *= (-sigma * delta).exp();
                if 1.0 - trans > 0.5 {
                    *out = t;
                    break;
                }
            }
        }
    });

    ShadowMap {
        origin,
        axis_u,
        axis_v,
        axis_w: w,
        du,
        dv,
        res,
        depth,
        bias: opts.bias_factor * du.max(dv),
    }
}

/// Full set of maps for one (scene, light): the plane queries the full map,
/// object samples query the map that excludes their own object.
pub struct SceneShadows {
    pub full: ShadowMap,
    pub per_object: Vec<ShadowMap>,
    pub ambient: f64,
}

pub fn scene_shadows(
    fields: &[&ScatterField],
    poses: &[Pose],
    light: &DirectionalLight,
    opts: &ShadowOpts,
    seed: u64,
) -> SceneShadows {
    let full = shadow_map(fields, poses, light, opts, None, seed);
    let per_object = if opts.objects_receive {
        (0..fields.len())
            .map(|k| shadow_map(fields, poses, light, opts, Some(k), seed))
            .collect()
    } else {
        Vec::new()
    };
    SceneShadows { full, per_object, ambient: opts.ambient }
}

// ---------------------------------------------------------------------------
// rendering

/// Compositional render of posed fields under one directional light.
pub fn render_fields(
    fields: &[&ScatterField],
    poses: &[Pose],
    light: &DirectionalLight,
    cam: &Camera,
    opts: &ComposeOpts,
) -> Image {
    assert_eq!(fields.len(), poses.len(), "pose count must equal field count");
    let ctxs = contexts(fields, poses, light);
    let shadows = opts.shadows.map(|s| scene_shadows(fields, poses, light, &s, opts.seed));

    let mut img = Image::new(cam.width, cam.height);
    let w = cam.width;
    img.pixels
        .par_chunks_exact_mut((w * 3) as usize)
        .enumerate()
        .for_each(|(y, row)| {
            let mut scratch = EvalScratch::default();
            for x in 0..w {
                let ray = cam.ray_for_pixel(x, y as u32).expect("in bounds");
                let ray_id = (y as u64) * w as u64 + x as u64;
                let rgb =
                    trace_ray(&ctxs, &ray, ray_id, light, opts, shadows.as_ref(), &mut scratch);
                row[(x * 3) as usize..(x * 3 + 3) as usize].copy_from_slice(&rgb);
            }
        });
    img.clamped()
}

/// Spec-facing wrapper over [`render_fields`].
pub fn compose_render(scene: &ComposedScene, cam: &Camera, opts: &ComposeOpts) -> Image {
    render_fields(&scene.fields, &scene.poses, &scene.light, cam, opts)
}

fn plane_color(
    p: Vec3,
    light: &DirectionalLight,
    plane: &PlaneOpts,
    shadows: Option<&SceneShadows>,
    ambient_override: f64,
) -> [f64; 3] {
    let cos = light.direction.z.max(0.0);
    let factor = match shadows {
        Some(s) if !s.full.lit(p) => ambient_override.max(s.ambient) * 0.0 + s.ambient,
        _ => 1.0,
    };
    [
        plane.albedo[0] * light.radiance[0] * cos * factor,
        plane.albedo[1] * light.radiance[1] * cos * factor,
        plane.albedo[2] * light.radiance[2] * cos * factor,
    ]
}

fn trace_ray(
    ctxs: &[ObjCtx],
    ray: &Ray,
    ray_id: u64,
    light: &DirectionalLight,
    opts: &ComposeOpts,
    shadows: Option<&SceneShadows>,
    scratch: &mut EvalScratch,
) -> [f64; 3] {
    let hits = object_hits(ctxs, ray);
    let plane_t = opts.plane.as_ref().and_then(|pl| {
        if ray.direction.z.abs() < 1e-12 {
            return None;
        }
        let t = -ray.origin.z / ray.direction.z;
        let p = ray.point(t);
        (t > ray.t_near && t < ray.t_far && p.x.abs() <= pl.half_extent && p.y.abs() <= pl.half_extent)
            .then_some(t)
    });

    if hits.is_empty() {
        return match (plane_t, &opts.plane) {
            (Some(t), Some(pl)) => plane_color(ray.point(t), light, pl, shadows, 0.0),
            _ => opts.background,
        };
    }

    let t_enter = hits[0].t0;
    let t_exit = hits.iter().map(|h| h.t1).fold(f64::MIN, f64::max);
    if let Some(tp) = plane_t {
        if tp <= t_enter {
            return plane_color(ray.point(tp), light, opts.plane.as_ref().unwrap(), shadows, 0.0);
        }
    }
    let t_stop = plane_t.map_or(t_exit, |tp| t_exit.min(tp));

    let (delta, ts) = sample_ts(t_enter, t_stop, opts.samples_per_ray, opts.seed, ray_id);
    let mut trans = 1.0f64;
    let mut acc = [0.0f64; 3];
    for t in ts {
        let world = ray.point(t);
        let mut den = 0.0f64;
        let mut num = [0.0f64; 3];
        for h in &hits {
            if t >= h.t0 && t <= h.t1 {
                let x = h.o_local + h.d_local * t;
                let c = &ctxs[h.obj];
                let (rho, sigma) = c.field.eval_raw(x, c.light_local, h.w_out_local, scratch);
                if sigma > 0.0 {
                    let factor = match shadows {
                        Some(s) if !s.per_object.is_empty() => {
                            if s.per_object[h.obj].lit(world) {
                                1.0
                            } else {
                                s.ambient
                            }
                        }
                        _ => 1.0,
                    };
                    den += sigma;
                    for ch in 0..3 {
                        num[ch] += sigma * rho[ch] * factor;
                    }
                }
            }
        }
        let e = (-den * delta).exp();
        if den > 0.0 {
            let wgt = trans * (1.0 - e);
            for ch in 0..3 {
                acc[ch] += wgt * (num[ch] / den) * light.radiance[ch];
            }
        }
        trans *= e;
    }

    // Remaining transmittance hits the plane (when the ray does) or the
    // background.
    match (plane_t, &opts.plane) {
        (Some(tp), Some(pl)) => {
            let pc = plane_color(ray.point(tp), light, pl, shadows, 0.0);
            for ch in 0..3 {
                acc[ch] += trans * pc[ch];
            }
        }
        _ => {
            for ch in 0..3 {
                acc[ch] += trans * opts.background[ch];
            }
        }
    }
    acc
}

/// Accumulated transmittance of one ray through a synthetic density; the
/// quadrature core exposed for slab tests and brute-force shadow checks.
pub fn transmittance_along(
    sigma_at: impl Fn(f64) -> f64,
    t0: f64,
    t1: f64,
    samples: usize,
    seed: u64,
    ray_id: u64,
) -> f64 {
    let (delta, ts) = sample_ts(t0, t1, samples, seed, ray_id);
    let mut trans = 1.0f64;
    for t in ts {
        trans *= (-sigma_at(t) * delta).exp();
    }
    trans
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{FieldConfig, ScatterField};
    use crate::geometry::Pose;

    fn constant_field(half: Vec3, sigma_raw: f64, seed: u64) -> ScatterField {
        let mut f = ScatterField::init(
            half,
            &FieldConfig { grid: 2, hidden: 6, hidden_layers: 2, pos_freqs: 2, bbox_margin: 1.0 },
            seed,
        );
        for cell in &mut f.cells {
            for l in cell.layers.iter_mut() {
                l.w.data.iter_mut().for_each(|v| *v = 0.0);
                l.b.data.iter_mut().for_each(|v| *v = 0.0);
            }
            let last = cell.layers.len() - 1;
            cell.layers[last].b.data[3] = sigma_raw;
        }
        f
    }

    fn zenith() -> DirectionalLight {
        DirectionalLight::new(Vec3::new(0.0, 0.0, 1.0), [1.0, 1.0, 1.0]).unwrap()
    }

    fn top_cam(res: u32) -> Camera {
        Camera::look_at(
            Vec3::new(1e-3, 0.0, 0.9),
            Vec3::zeros(),
            Vec3::new(0.0, 0.0, 1.0),
            45.0,
            res,
            res,
        )
        .unwrap()
    }

    #[test]
    fn empty_scene_renders_plane_and_background() {
        let opts = ComposeOpts::default();
        let img = render_fields(&[], &[], &zenith(), &top_cam(24), &opts);
        // Center pixel looks at the lit plane.
        let c = img.get(12, 12);
        let pl = PlaneOpts::default();
        assert_eq!(c, [pl.albedo[0], pl.albedo[1], pl.albedo[2]]);

        let no_plane = ComposeOpts { plane: None, shadows: None, ..opts };
        let img2 = render_fields(&[], &[], &zenith(), &top_cam(8), &no_plane);
        for p in img2.pixels.chunks_exact(3) {
            assert_eq!(p, &no_plane.background);
        }
    }

    #[test]
    fn slab_transmittance_matches_beer_lambert() {
        // Uniform slab embedded inside a longer sampled interval: the
        // discretization error is first order in the step size.
        let sigma0 = 1.4;
        let slab = (0.271, 0.739);
        let sigma_at = |t: f64| if t >= slab.0 && t <= slab.1 { sigma0 } else { 0.0 };
        let expect = (-sigma0 * (slab.1 - slab.0)).exp();
        let mut errs = Vec::new();
        for samples in [128usize, 256, 512] {
            let t = transmittance_along(sigma_at, 0.0, 1.0, samples, 77, 5);
            errs.push((t - expect).abs());
        }
        assert!(errs[0] < 1e-3, "error at 128 samples: {}", errs[0]);
        assert!(errs[1] < errs[0], "halving the step must reduce error: {errs:?}");
        assert!(errs[2] < errs[1], "halving the step must reduce error: {errs:?}");
    }

    #[test]
    fn single_object_composition_is_bit_identical_to_render_object() {
        let f = constant_field(Vec3::new(0.04, 0.03, 0.05), 2.0, 3);
        let pose = Pose::from_xy_yaw(0.01, -0.02, 0.05, 0.4);
        let light = zenith();
        let cam = top_cam(32);
        let opts = ComposeOpts { plane: None, shadows: None, seed: 9, ..ComposeOpts::default() };
        let a = render_fields(&[&f], &[pose], &light, &cam, &opts);
        let b = crate::field::render_object(&f, &pose, &cam, &light, opts.samples_per_ray, 9)
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn permutation_of_objects_changes_no_pixel() {
        let f1 = constant_field(Vec3::new(0.04, 0.03, 0.05), 2.0, 3);
        let f2 = constant_field(Vec3::new(0.03, 0.03, 0.03), 3.0, 4);
        let f3 = constant_field(Vec3::new(0.02, 0.05, 0.04), 1.5, 5);
        let poses = [
            Pose::from_xy_yaw(0.00, 0.00, 0.05, 0.1),
            Pose::from_xy_yaw(0.05, 0.02, 0.03, 0.9),
            Pose::from_xy_yaw(-0.04, -0.03, 0.04, 2.2),
        ];
        let light = DirectionalLight::new(Vec3::new(0.4, 0.2, 0.7), [1.0, 1.0, 1.0]).unwrap();
        let cam = top_cam(32);
        let opts = ComposeOpts { seed: 4, ..ComposeOpts::default() };
        let a = render_fields(&[&f1, &f2, &f3], &[poses[0], poses[1], poses[2]], &light, &cam, &opts);
        let b = render_fields(&[&f3, &f1, &f2], &[poses[2], poses[0], poses[1]], &light, &cam, &opts);
        assert_eq!(a, b);
    }

    #[test]
    fn occluder_behind_opaque_object_is_invisible() {
        // B directly behind A along the view ray; A nearly opaque.
        let a = constant_field(Vec3::new(0.03, 0.03, 0.03), 400.0, 6);
        let b = constant_field(Vec3::new(0.03, 0.03, 0.03), 400.0, 7);
        let cam = Camera::look_at(
            Vec3::new(0.5, 0.0, 0.05),
            Vec3::new(0.0, 0.0, 0.05),
            Vec3::new(0.0, 0.0, 1.0),
            30.0,
            17,
            17,
        )
        .unwrap();
        let light = zenith();
        let opts = ComposeOpts { plane: None, shadows: None, ..ComposeOpts::default() };
        let pa = Pose::from_xy_yaw(0.1, 0.0, 0.05, 0.0);
        let pb = Pose::from_xy_yaw(-0.1, 0.0, 0.05, 0.0);
        let solo = render_fields(&[&a], &[pa], &light, &cam, &opts);
        let both = render_fields(&[&a, &b], &[pa, pb], &light, &cam, &opts);
        let center = solo.get(8, 8);
        let center2 = both.get(8, 8);
        for ch in 0..3 {
            assert!((center[ch] - center2[ch]).abs() < 1e-3, "{center:?} vs {center2:?}");
        }
    }

    #[test]
    fn shadow_map_verdicts() {
        // Opaque box at the origin, light at the zenith: plane points under
        // the footprint are shadowed, points far away are lit, and a point
        // above all geometry is always lit.
        let f = constant_field(Vec3::new(0.04, 0.04, 0.04), 500.0, 8);
        let pose = Pose::from_xy_yaw(0.0, 0.0, 0.04, 0.0);
        let light = zenith();
        let opts = ShadowOpts::default();
        let map = shadow_map(&[&f], &[pose], &light, &opts, None, 0);
        assert!(!map.lit(Vec3::new(0.0, 0.0, 0.0)));
        assert!(!map.lit(Vec3::new(0.02, -0.02, 0.0)));
        assert!(map.lit(Vec3::new(0.16, 0.0, 0.0)));
        assert!(map.lit(Vec3::new(-0.16, 0.08, 0.0)));
        assert!(map.lit(Vec3::new(0.0, 0.0, 0.5)));

        // Zero-density scene: everything lit.
        let empty = constant_field(Vec3::new(0.04, 0.04, 0.04), -40.0, 9);
        let map2 = shadow_map(&[&empty], &[pose], &light, &opts, None, 0);
        assert!(map2.lit(Vec3::new(0.0, 0.0, 0.0)));

        // Excluding the only caster leaves everything lit.
        let map3 = shadow_map(&[&f], &[pose], &light, &opts, Some(0), 0);
        assert!(map3.lit(Vec3::new(0.0, 0.0, 0.0)));
    }

    #[test]
    fn shadow_map_agrees_with_brute_force_march() {
        let f1 = constant_field(Vec3::new(0.04, 0.04, 0.06), 300.0, 10);
        let f2 = constant_field(Vec3::new(0.03, 0.03, 0.03), 300.0, 11);
        let poses = [Pose::from_xy_yaw(0.0, 0.0, 0.06, 0.3), Pose::from_xy_yaw(0.1, 0.05, 0.03, 1.2)];
        let light = DirectionalLight::new(Vec3::new(0.5, 0.3, 0.55), [1.0, 1.0, 1.0]).unwrap();
        let opts = ShadowOpts::default();
        let fields: Vec<&ScatterField> = vec![&f1, &f2];
        let map = shadow_map(&fields, &poses, &light, &opts, None, 0);

        let mut rng = crate::rng::stream(21, 8);
        use rand::Rng;
        let mut agree = 0;
        let n = 100;
        let mut scratch = EvalScratch::default();
        for _ in 0..n {
            let p = Vec3::new(rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2), 0.0);
            let fast = map.lit(p);
            // March toward the light accumulating opacity.
            let step = 5e-4;
            let mut trans = 1.0;
            let mut t = step;
            while t < 0.6 {
                let q = p + light.direction * t;
                let mut sigma = 0.0;
                for (f, pose) in fields.iter().zip(&poses) {
                    let rot_t = pose.orientation.to_matrix().transpose();
                    let local = rot_t * (q - pose.position);
                    if f.contains(local) {
                        let (_, s) = f.eval_raw(local, light.direction, light.direction, &mut scratch);
                        sigma += s;
                    }
                }
                trans *= (-sigma * step).exp();
                if 1.0 - trans > 0.5 {
                    break;
                }
                t += step;
            }
            let slow = 1.0 - trans <= 0.5;
            if fast == slow {
                agree += 1;
            }
        }
        assert!(agree >= 98, "agreement {agree}/100");
    }

    #[test]
    fn transmittance_is_monotone_along_rays() {
        let f = constant_field(Vec3::new(0.05, 0.05, 0.05), 1.0, 12);
        let pose = Pose::from_xy_yaw(0.0, 0.0, 0.05, 0.0);
        let ctxs = contexts(&[&f], &[pose], &zenith());
        let cam = top_cam(8);
        for py in 0..8 {
            for px in 0..8 {
                let ray = cam.ray_for_pixel(px, py).unwrap();
                let hits = object_hits(&ctxs, &ray);
                if hits.is_empty() {
                    continue;
                }
                let (delta, ts) = sample_ts(hits[0].t0, hits[0].t1, 32, 0, 0);
                let mut scratch = EvalScratch::default();
                let mut trans = 1.0;
                let mut prev = 1.0;
                for t in ts {
                    let x = hits[0].o_local + hits[0].d_local * t;
                    let (_, s) = f.eval_raw(x, ctxs[0].light_local, hits[0].w_out_local, &mut scratch);
                    trans *= (-s * delta).exp();
                    assert!(trans <= prev && (0.0..=1.0).contains(&trans));
                    prev = trans;
                }
            }
        }
    }

    #[test]
    fn shrinking_t_far_to_box_exit_changes_nothing() {
        // All density lives inside the box; sampling past it adds nothing.
        let f = constant_field(Vec3::new(0.04, 0.04, 0.04), 2.5, 14);
        let pose = Pose::from_xy_yaw(0.0, 0.0, 0.04, 0.0);
        let light = zenith();
        let mut cam = top_cam(16);
        let a = crate::field::render_object(&f, &pose, &cam, &light, 64, 3).unwrap();
        // The engine clips to the box interval, so inflating t_far has no
        // effect on the integration range.
        cam.t_far = 5.0;
        let b = crate::field::render_object(&f, &pose, &cam, &light, 64, 3).unwrap();
        assert_eq!(a, b);
    }
}
