//! Ground-truth tabletop environment: quasi-static planar pushing with a
//! velocity-controlled cylindrical pusher.
//!
//! Objects are boxes and cylinders resting on the z=0 plane. Only x, y and
//! yaw evolve; z, roll and pitch are fixed by construction. Contacts are
//! point contacts with Coulomb friction, resolved positionally in substeps;
//! objects stop the moment the pusher stops, which is the quasi-static
//! regime the pushing tasks live in.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Pose, Vec3};
use crate::img::{Image, LabelMask};
use crate::oracle::{self, DirectionalLight, RenderOpts};
use crate::rng;

/// Primitive collision/render shape, dimensions in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Box { half_extents: [f64; 3] },
    Cylinder { radius: f64, height: f64 },
}

impl Shape {
    /// Resting height of the body center above the plane.
    pub fn rest_z(&self) -> f64 {
        match self {
            Shape::Box { half_extents } => half_extents[2],
            Shape::Cylinder { height, .. } => height * 0.5,
        }
    }

    /// Radius of the circumscribed circle in the xy plane.
    pub fn plan_radius(&self) -> f64 {
        match self {
            Shape::Box { half_extents } => (half_extents[0].hypot(half_extents[1])).max(1e-6),
            Shape::Cylinder { radius, .. } => *radius,
        }
    }

    /// Object-frame axis-aligned bounding box half extents.
    pub fn aabb_half(&self) -> Vec3 {
        match self {
            Shape::Box { half_extents } => {
                Vec3::new(half_extents[0], half_extents[1], half_extents[2])
            }
            Shape::Cylinder { radius, height } => Vec3::new(*radius, *radius, height * 0.5),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            Shape::Box { half_extents } => half_extents.iter().all(|v| *v > 0.0),
            Shape::Cylinder { radius, height } => *radius > 0.0 && *height > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Contract("shape dimensions must be positive".into()))
        }
    }
}

/// Surface color; `Checker` alternates two colors on a 3D parity grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Albedo {
    Uniform { rgb: [f64; 3] },
    Checker { a: [f64; 3], b: [f64; 3], cell: f64 },
}

impl Albedo {
    /// Albedo at an object-frame point.
    #[inline]
    pub fn at(&self, p: Vec3) -> [f64; 3] {
        match self {
            Albedo::Uniform { rgb } => *rgb,
            Albedo::Checker { a, b, cell } => {
                let k = ((p.x / cell + 1e-9).floor()
                    + (p.y / cell + 1e-9).floor()
                    + (p.z / cell + 1e-9).floor()) as i64;
                if k.rem_euclid(2) == 0 {
                    *a
                } else {
                    *b
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BodySpec {
    pub shape: Shape,
    pub mass: f64,
    pub friction: f64,
    pub albedo: Albedo,
}

impl BodySpec {
    pub fn validate(&self) -> Result<()> {
        self.shape.validate()?;
        if self.mass <= 0.0 {
            return Err(Error::Contract("mass must be positive".into()));
        }
        if !(0.0 < self.friction && self.friction <= 1.0) {
            return Err(Error::Contract("friction must be in (0,1]".into()));
        }
        Ok(())
    }

    /// Yaw moment of inertia about the body center.
    fn yaw_inertia(&self) -> f64 {
        match self.shape {
            Shape::Box { half_extents } => {
                self.mass * (half_extents[0].powi(2) + half_extents[1].powi(2)) / 3.0
            }
            Shape::Cylinder { radius, .. } => 0.5 * self.mass * radius * radius,
        }
    }
}

/// Bodies present in one scene: n manipulable objects plus the pusher.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub objects: Vec<BodySpec>,
    pub pusher: BodySpec,
}

/// Poses of all bodies at one instant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneState {
    pub object_poses: Vec<Pose>,
    pub pusher_pose: Pose,
    pub time: f64,
}

/// Pusher velocity command (m/s); z is always zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PusherAction {
    pub velocity: Vec3,
}

pub const ACTION_BOUND: f64 = 0.3;

impl PusherAction {
    /// Clamps into the valid command box `[-0.3, 0.3]^2 x {0}`.
    pub fn new(vx: f64, vy: f64) -> PusherAction {
        PusherAction {
            velocity: Vec3::new(
                vx.clamp(-ACTION_BOUND, ACTION_BOUND),
                vy.clamp(-ACTION_BOUND, ACTION_BOUND),
                0.0,
            ),
        }
    }

    pub fn zero() -> PusherAction {
        PusherAction { velocity: Vec3::zeros() }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimParams {
    /// Half extent of the square workspace; bodies are clamped inside.
    pub workspace_half: f64,
    /// Half extent of the region used for initial object placement.
    pub placement_half: f64,
    /// Max pusher travel per substep.
    pub substep_travel: f64,
    /// Gauss-Seidel iterations per substep.
    pub contact_iters: usize,
    /// Seconds one action is applied.
    pub action_duration: f64,
}

impl Default for SimParams {
    fn default() -> Self {
        SimParams {
            workspace_half: 0.48,
            placement_half: 0.30,
            substep_travel: 0.004,
            contact_iters: 8,
            action_duration: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct StepInfo {
    /// True when a body had to be clamped to the workspace bound.
    pub clamped: bool,
    /// Deepest remaining penetration after resolution.
    pub max_penetration: f64,
}

// ---------------------------------------------------------------------------
// planar collision

#[derive(Debug, Clone, Copy)]
enum Plan {
    Circle { r: f64 },
    Rect { hx: f64, hy: f64 },
}

fn plan_of(shape: &Shape) -> Plan {
    match shape {
        Shape::Box { half_extents } => Plan::Rect { hx: half_extents[0], hy: half_extents[1] },
        Shape::Cylinder { radius, .. } => Plan::Circle { r: *radius },
    }
}

#[derive(Debug, Clone, Copy)]
struct Body2 {
    x: f64,
    y: f64,
    yaw: f64,
    plan: Plan,
    inv_m: f64,
    inv_i: f64,
    friction: f64,
}

#[derive(Debug, Clone, Copy)]
struct Contact {
    /// Unit normal pointing from body a toward body b.
    nx: f64,
    ny: f64,
    depth: f64,
    /// World-space contact point.
    px: f64,
    py: f64,
}

fn rect_corners(b: &Body2, hx: f64, hy: f64) -> [(f64, f64); 4] {
    let (s, c) = b.yaw.sin_cos();
    let rot = |x: f64, y: f64| (b.x + c * x - s * y, b.y + s * x + c * y);
    [rot(hx, hy), rot(-hx, hy), rot(-hx, -hy), rot(hx, -hy)]
}

fn to_local(b: &Body2, x: f64, y: f64) -> (f64, f64) {
    let (s, c) = b.yaw.sin_cos();
    let dx = x - b.x;
    let dy = y - b.y;
    (c * dx + s * dy, -s * dx + c * dy)
}

fn from_local_dir(b: &Body2, x: f64, y: f64) -> (f64, f64) {
    let (s, c) = b.yaw.sin_cos();
    (c * x - s * y, s * x + c * y)
}

/// Deepest contact between two planar bodies, if they overlap.
fn collide(a: &Body2, b: &Body2) -> Option<Contact> {
    match (a.plan, b.plan) {
        (Plan::Circle { r: ra }, Plan::Circle { r: rb }) => {
            let dx = b.x - a.x;
            let dy = b.y - a.y;
            let d2 = dx * dx + dy * dy;
            let rsum = ra + rb;
            if d2 >= rsum * rsum {
                return None;
            }
            let d = d2.sqrt();
            let (nx, ny) = if d > 1e-12 { (dx / d, dy / d) } else { (1.0, 0.0) };
            Some(Contact {
                nx,
                ny,
                depth: rsum - d,
                px: a.x + nx * (ra - (rsum - d) * 0.5),
                py: a.y + ny * (ra - (rsum - d) * 0.5),
            })
        }
        (Plan::Circle { r }, Plan::Rect { hx, hy }) => {
            collide_rect_circle(b, hx, hy, a, r).map(|c| Contact { nx: -c.nx, ny: -c.ny, ..c })
        }
        (Plan::Rect { hx, hy }, Plan::Circle { r }) => collide_rect_circle(a, hx, hy, b, r),
        (Plan::Rect { hx: ax, hy: ay }, Plan::Rect { hx: bx, hy: by }) => {
            collide_rect_rect(a, ax, ay, b, bx, by)
        }
    }
}

/// Contact with normal pointing from the rect toward the circle.
fn collide_rect_circle(rect: &Body2, hx: f64, hy: f64, circ: &Body2, r: f64) -> Option<Contact> {
    let (lx, ly) = to_local(rect, circ.x, circ.y);
    let qx = lx.clamp(-hx, hx);
    let qy = ly.clamp(-hy, hy);
    let dx = lx - qx;
    let dy = ly - qy;
    let d2 = dx * dx + dy * dy;
    if d2 > 1e-24 {
        // center outside the rect
        if d2 >= r * r {
            return None;
        }
        let d = d2.sqrt();
        let (nx, ny) = from_local_dir(rect, dx / d, dy / d);
        Some(Contact {
            nx,
            ny,
            depth: r - d,
            px: circ.x - nx * r + nx * (r - d) * 0.5,
            py: circ.y - ny * r + ny * (r - d) * 0.5,
        })
    } else {
        // center inside: push out along the shallowest face
        let pen_x = hx - lx.abs();
        let pen_y = hy - ly.abs();
        let (nlx, nly, depth) = if pen_x < pen_y {
            (lx.signum(), 0.0, pen_x + r)
        } else {
            (0.0, ly.signum(), pen_y + r)
        };
        let (nx, ny) = from_local_dir(rect, nlx, nly);
        Some(Contact { nx, ny, depth, px: circ.x, py: circ.y })
    }
}

fn collide_rect_rect(
    a: &Body2,
    ax: f64,
    ay: f64,
    b: &Body2,
    bx: f64,
    by: f64,
) -> Option<Contact> {
    // SAT over the four face axes; keep the minimum-overlap axis.
    let ca = rect_corners(a, ax, ay);
    let cb = rect_corners(b, bx, by);
    let axes = [
        from_local_dir(a, 1.0, 0.0),
        from_local_dir(a, 0.0, 1.0),
        from_local_dir(b, 1.0, 0.0),
        from_local_dir(b, 0.0, 1.0),
    ];
    let project = |cs: &[(f64, f64); 4], wx: f64, wy: f64| {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for (px, py) in cs {
            let s = px * wx + py * wy;
            lo = lo.min(s);
            hi = hi.max(s);
        }
        (lo, hi)
    };
    let mut depth = f64::INFINITY;
    let mut axis = (1.0, 0.0);
    for (wx, wy) in axes {
        let (alo, ahi) = project(&ca, wx, wy);
        let (blo, bhi) = project(&cb, wx, wy);
        let overlap = ahi.min(bhi) - alo.max(blo);
        if overlap <= 0.0 {
            return None;
        }
        if overlap < depth {
            depth = overlap;
            axis = (wx, wy);
        }
    }
    // Orient the normal from a toward b.
    let toward = (b.x - a.x) * axis.0 + (b.y - a.y) * axis.1;
    let (nx, ny) = if toward >= 0.0 { axis } else { (-axis.0, -axis.1) };

    // Contact point: the corner of either rect deepest inside the other.
    let mut point = (0.5 * (a.x + b.x), 0.5 * (a.y + b.y));
    let mut deepest = f64::NEG_INFINITY;
    for (px, py) in &cb {
        let (lx, ly) = to_local(a, *px, *py);
        let pen = (ax - lx.abs()).min(ay - ly.abs());
        if pen > deepest {
            deepest = pen;
            point = (*px, *py);
        }
    }
    for (px, py) in &ca {
        let (lx, ly) = to_local(b, *px, *py);
        let pen = (bx - lx.abs()).min(by - ly.abs());
        if pen > deepest {
            deepest = pen;
            point = (*px, *py);
        }
    }
    Some(Contact { nx, ny, depth, px: point.0, py: point.1 })
}

/// Positional resolution of one contact, splitting by generalized inverse
/// mass and limiting tangential correction by Coulomb friction.
fn resolve(a: &mut Body2, b: &mut Body2, prev_a: (f64, f64, f64), prev_b: (f64, f64, f64)) {
    let Some(c) = collide(a, b) else { return };
    let (nx, ny) = (c.nx, c.ny);
    let ra = (c.px - a.x, c.py - a.y);
    let rb = (c.px - b.x, c.py - b.y);
    let cross_a = ra.0 * ny - ra.1 * nx;
    let cross_b = rb.0 * ny - rb.1 * nx;
    let k = a.inv_m + b.inv_m + cross_a * cross_a * a.inv_i + cross_b * cross_b * b.inv_i;
    if k <= 0.0 {
        return;
    }
    let lambda = c.depth / k;
    a.x -= a.inv_m * lambda * nx;
    a.y -= a.inv_m * lambda * ny;
    a.yaw -= a.inv_i * lambda * cross_a;
    b.x += b.inv_m * lambda * nx;
    b.y += b.inv_m * lambda * ny;
    b.yaw += b.inv_i * lambda * cross_b;

    // Coulomb friction: limit relative tangential slip of the contact
    // points accumulated this substep (first-order point motion).
    let (tx, ty) = (-ny, nx);
    let disp = |body: &Body2, prev: (f64, f64, f64), r: (f64, f64)| {
        let dth = body.yaw - prev.2;
        (body.x - prev.0 - dth * r.1, body.y - prev.1 + dth * r.0)
    };
    let da = disp(a, prev_a, ra);
    let db = disp(b, prev_b, rb);
    let rel_t = (db.0 - da.0) * tx + (db.1 - da.1) * ty;
    let mu = (a.friction * b.friction).sqrt();
    let cross_ta = ra.0 * ty - ra.1 * tx;
    let cross_tb = rb.0 * ty - rb.1 * tx;
    let kt = a.inv_m + b.inv_m + cross_ta * cross_ta * a.inv_i + cross_tb * cross_tb * b.inv_i;
    if kt <= 0.0 {
        return;
    }
    let want = -rel_t / kt;
    let lt = want.clamp(-mu * lambda, mu * lambda);
    a.x -= a.inv_m * lt * tx;
    a.y -= a.inv_m * lt * ty;
    a.yaw -= a.inv_i * lt * cross_ta;
    b.x += b.inv_m * lt * tx;
    b.y += b.inv_m * lt * ty;
    b.yaw += b.inv_i * lt * cross_tb;
}

fn yaw_of(pose: &Pose) -> f64 {
    pose.orientation.yaw()
}

/// Advance the scene by `duration` seconds under a pusher velocity command.
pub fn step(
    spec: &SceneSpec,
    state: &SceneState,
    action: &PusherAction,
    duration: f64,
    params: &SimParams,
) -> (SceneState, StepInfo) {
    step_with_substeps(spec, state, action, duration, params, None)
}

/// Same contact model with an explicit substep count; the fine-substep
/// variant serves as a convergence oracle in tests.
pub fn step_with_substeps(
    spec: &SceneSpec,
    state: &SceneState,
    action: &PusherAction,
    duration: f64,
    params: &SimParams,
    substeps: Option<usize>,
) -> (SceneState, StepInfo) {
    assert!(duration > 0.0, "duration must be positive");
    let n = spec.objects.len();
    let mut bodies: Vec<Body2> = (0..n)
        .map(|i| {
            let s = &spec.objects[i];
            let p = &state.object_poses[i];
            Body2 {
                x: p.position.x,
                y: p.position.y,
                yaw: yaw_of(p),
                plan: plan_of(&s.shape),
                inv_m: 1.0 / s.mass,
                inv_i: 1.0 / s.yaw_inertia(),
                friction: s.friction,
            }
        })
        .collect();
    let mut pusher = Body2 {
        x: state.pusher_pose.position.x,
        y: state.pusher_pose.position.y,
        yaw: 0.0,
        plan: plan_of(&spec.pusher.shape),
        inv_m: 0.0,
        inv_i: 0.0,
        friction: spec.pusher.friction,
    };

    let travel = (action.velocity.x.hypot(action.velocity.y)) * duration;
    let n_sub = substeps
        .unwrap_or_else(|| ((travel / params.substep_travel).ceil() as usize).max(1));
    let dx = action.velocity.x * duration / n_sub as f64;
    let dy = action.velocity.y * duration / n_sub as f64;

    let mut info = StepInfo::default();
    for _ in 0..n_sub {
        let prev_pusher = (pusher.x, pusher.y, 0.0);
        pusher.x += dx;
        pusher.y += dy;
        let prev: Vec<(f64, f64, f64)> = bodies.iter().map(|b| (b.x, b.y, b.yaw)).collect();
        for _ in 0..params.contact_iters {
            for i in 0..n {
                let mut b = bodies[i];
                resolve(&mut pusher, &mut b, prev_pusher, prev[i]);
                bodies[i] = b;
            }
            for i in 0..n {
                for j in (i + 1)..n {
                    let (mut bi, mut bj) = (bodies[i], bodies[j]);
                    resolve(&mut bi, &mut bj, prev[i], prev[j]);
                    bodies[i] = bi;
                    bodies[j] = bj;
                }
            }
        }
    }

    // Residual penetration after the last substep.
    let mut worst = 0.0f64;
    for i in 0..n {
        if let Some(c) = collide(&pusher, &bodies[i]) {
            worst = worst.max(c.depth);
        }
        for j in (i + 1)..n {
            if let Some(c) = collide(&bodies[i], &bodies[j]) {
                worst = worst.max(c.depth);
            }
        }
    }
    info.max_penetration = worst;

    // Workspace clamp.
    let bound = params.workspace_half;
    let mut clamp_body = |b: &mut Body2| {
        let cx = b.x.clamp(-bound, bound);
        let cy = b.y.clamp(-bound, bound);
        if cx != b.x || cy != b.y {
            info.clamped = true;
        }
        b.x = cx;
        b.y = cy;
    };
    for b in &mut bodies {
        clamp_body(b);
    }
    clamp_body(&mut pusher);

    let object_poses: Vec<Pose> = (0..n)
        .map(|i| {
            Pose::from_xy_yaw(bodies[i].x, bodies[i].y, spec.objects[i].shape.rest_z(), bodies[i].yaw)
        })
        .collect();
    let pusher_pose = Pose::from_xy_yaw(pusher.x, pusher.y, spec.pusher.shape.rest_z(), 0.0);
    (
        SceneState { object_poses, pusher_pose, time: state.time + duration },
        info,
    )
}

// ---------------------------------------------------------------------------
// scene sampling and trajectory collection

/// Default object library: 4 body specs; index 0 is the checker box used by
/// the reconstruction benchmark. The pusher is a separate spec.
pub fn default_library() -> Vec<BodySpec> {
    vec![
        BodySpec {
            shape: Shape::Box { half_extents: [0.030, 0.030, 0.030] },
            mass: 0.20,
            friction: 0.5,
            albedo: Albedo::Checker {
                a: [0.85, 0.20, 0.15],
                b: [0.95, 0.90, 0.82],
                cell: 0.015,
            },
        },
        BodySpec {
            shape: Shape::Box { half_extents: [0.040, 0.025, 0.020] },
            mass: 0.15,
            friction: 0.5,
            albedo: Albedo::Uniform { rgb: [0.20, 0.45, 0.85] },
        },
        BodySpec {
            shape: Shape::Cylinder { radius: 0.030, height: 0.100 },
            mass: 0.25,
            friction: 0.5,
            albedo: Albedo::Uniform { rgb: [0.95, 0.75, 0.20] },
        },
        BodySpec {
            shape: Shape::Cylinder { radius: 0.035, height: 0.050 },
            mass: 0.18,
            friction: 0.5,
            albedo: Albedo::Uniform { rgb: [0.30, 0.80, 0.35] },
        },
    ]
}

pub fn default_pusher() -> BodySpec {
    BodySpec {
        shape: Shape::Cylinder { radius: 0.020, height: 0.120 },
        mass: 1.0,
        friction: 0.6,
        albedo: Albedo::Uniform { rgb: [0.90, 0.25, 0.55] },
    }
}

/// Sample a light direction uniformly on the upper hemisphere with
/// elevation at least 10 degrees.
pub fn sample_light(rng: &mut impl Rng) -> DirectionalLight {
    let z_min = (10.0f64).to_radians().sin();
    let z = rng.gen::<f64>() * (1.0 - z_min) + z_min;
    let phi = rng.gen::<f64>() * std::f64::consts::TAU;
    let r = (1.0 - z * z).sqrt();
    DirectionalLight::new(Vec3::new(r * phi.cos(), r * phi.sin(), z), [1.0, 1.0, 1.0]).unwrap()
}

/// Rejection-sample non-overlapping object poses plus a pusher start near a
/// randomly chosen object.
pub fn sample_scene(
    library: &[BodySpec],
    pusher: &BodySpec,
    n_objects: usize,
    placement_half: f64,
    rng: &mut impl Rng,
) -> Result<(SceneSpec, SceneState)> {
    const ATTEMPTS: usize = 1000;
    // Spec ids without replacement while possible, cycling otherwise.
    let mut ids: Vec<usize> = (0..library.len()).collect();
    for i in (1..ids.len()).rev() {
        ids.swap(i, rng.gen_range(0..=i));
    }
    let spec_ids: Vec<usize> = (0..n_objects).map(|i| ids[i % ids.len()]).collect();
    let objects: Vec<BodySpec> = spec_ids.iter().map(|i| library[*i]).collect();

    let mut placed: Vec<(f64, f64, f64)> = Vec::new(); // x, y, plan radius
    for spec in &objects {
        let r = spec.shape.plan_radius();
        let mut ok = false;
        for _ in 0..ATTEMPTS {
            let x = rng.gen_range(-placement_half..placement_half);
            let y = rng.gen_range(-placement_half..placement_half);
            if placed
                .iter()
                .all(|(px, py, pr)| (x - px).hypot(y - py) > r + pr + 0.01)
            {
                placed.push((x, y, r));
                ok = true;
                break;
            }
        }
        if !ok {
            return Err(Error::Placement(format!(
                "could not place {n_objects} objects in half-extent {placement_half}"
            )));
        }
    }

    // Pusher starts near a random object so trajectories contain contact.
    let pr = pusher.shape.plan_radius();
    let target = rng.gen_range(0..placed.len());
    let mut pusher_xy = None;
    for _ in 0..ATTEMPTS {
        let ang = rng.gen::<f64>() * std::f64::consts::TAU;
        let dist = placed[target].2 + pr + rng.gen_range(0.02..0.08);
        let x = placed[target].0 + ang.cos() * dist;
        let y = placed[target].1 + ang.sin() * dist;
        if placed.iter().all(|(px, py, prr)| (x - px).hypot(y - py) > pr + prr + 0.005)
            && x.abs() < placement_half + 0.1
            && y.abs() < placement_half + 0.1
        {
            pusher_xy = Some((x, y));
            break;
        }
    }
    let (px, py) =
        pusher_xy.ok_or_else(|| Error::Placement("could not place pusher".into()))?;

    let object_poses: Vec<Pose> = objects
        .iter()
        .zip(&placed)
        .map(|(s, (x, y, _))| {
            Pose::from_xy_yaw(*x, *y, s.shape.rest_z(), rng.gen::<f64>() * std::f64::consts::TAU)
        })
        .collect();
    let state = SceneState {
        object_poses,
        pusher_pose: Pose::from_xy_yaw(px, py, pusher.shape.rest_z(), 0.0),
        time: 0.0,
    };
    Ok((SceneSpec { objects, pusher: *pusher }, state))
}

/// One collected pushing trajectory (poses and actions; frames stream to a
/// sink during collection).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trajectory {
    pub spec_ids: Vec<usize>,
    pub states: Vec<SceneState>,
    pub actions: Vec<PusherAction>,
    pub light: DirectionalLight,
    pub clamped: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryDataset {
    pub library: Vec<BodySpec>,
    pub pusher: BodySpec,
    pub trajectories: Vec<Trajectory>,
    pub seed: u64,
    pub steps_per_trajectory: usize,
    pub n_views: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CollectConfig {
    pub trajectories: usize,
    pub steps: usize,
    pub objects_per_scene: usize,
    pub views: usize,
    pub resolution: u32,
    pub render_images: bool,
    pub sim: SimParams,
}

impl Default for CollectConfig {
    fn default() -> Self {
        CollectConfig {
            trajectories: 200,
            steps: 50,
            objects_per_scene: 3,
            views: 4,
            resolution: 64,
            render_images: true,
            sim: SimParams::default(),
        }
    }
}

/// Receives rendered frames during collection.
pub trait FrameSink {
    fn frame(
        &mut self,
        traj: usize,
        step: usize,
        view: usize,
        image: &Image,
        mask: &LabelMask,
    ) -> Result<()>;
}

/// Simulate one trajectory from its own RNG stream.
pub fn simulate_trajectory(
    library: &[BodySpec],
    pusher: &BodySpec,
    cfg: &CollectConfig,
    traj_seed: u64,
) -> Result<(Trajectory, SceneSpec)> {
    let mut r = rng::stream(traj_seed, 0x7261_6a00);
    let (spec, mut state) = sample_scene(
        library,
        pusher,
        cfg.objects_per_scene,
        cfg.sim.placement_half,
        &mut r,
    )?;
    let spec_ids: Vec<usize> = spec
        .objects
        .iter()
        .map(|o| library.iter().position(|l| l == o).expect("spec from library"))
        .collect();
    let light = sample_light(&mut r);
    let mut states = vec![state.clone()];
    let mut actions = Vec::with_capacity(cfg.steps);
    let mut clamped = false;
    for _ in 0..cfg.steps {
        let a = PusherAction::new(
            r.gen_range(-ACTION_BOUND..ACTION_BOUND),
            r.gen_range(-ACTION_BOUND..ACTION_BOUND),
        );
        let (next, info) = step(&spec, &state, &a, cfg.sim.action_duration, &cfg.sim);
        clamped |= info.clamped;
        state = next;
        states.push(state.clone());
        actions.push(a);
    }
    Ok((Trajectory { spec_ids, states, actions, light, clamped }, spec))
}

/// Collect a dataset of random pushing trajectories. Frames render through
/// the analytic camera and stream to `sink` when images are enabled.
pub fn collect_trajectories(
    cfg: &CollectConfig,
    seed: u64,
    mut sink: Option<&mut dyn FrameSink>,
) -> Result<TrajectoryDataset> {
    let library = default_library();
    let pusher = default_pusher();
    let results: Vec<Result<(Trajectory, SceneSpec)>> = (0..cfg.trajectories)
        .into_par_iter()
        .map(|t| simulate_trajectory(&library, &pusher, cfg, rng::child_seed(seed, t as u64)))
        .collect();

    let cams = oracle::default_camera_rig(cfg.views, cfg.resolution);
    let mut trajectories = Vec::with_capacity(cfg.trajectories);
    for (t, res) in results.into_iter().enumerate() {
        let (traj, spec) = res?;
        if cfg.render_images {
            if let Some(sink) = sink.as_deref_mut() {
                let opts = RenderOpts::default();
                for (s, state) in traj.states.iter().enumerate() {
                    for (v, cam) in cams.iter().enumerate() {
                        let img = oracle::render_oracle(&spec, state, cam, &traj.light, &opts);
                        let mask = oracle::render_masks(&spec, state, cam, &opts);
                        sink.frame(t, s, v, &img, &mask)?;
                    }
                }
            }
        }
        trajectories.push(traj);
    }
    Ok(TrajectoryDataset {
        library,
        pusher,
        trajectories,
        seed,
        steps_per_trajectory: cfg.steps,
        n_views: cfg.views,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn one_box_scene() -> (SceneSpec, SceneState) {
        let spec = SceneSpec {
            objects: vec![BodySpec {
                shape: Shape::Box { half_extents: [0.03, 0.03, 0.03] },
                mass: 0.2,
                friction: 0.5,
                albedo: Albedo::Uniform { rgb: [0.5, 0.5, 0.5] },
            }],
            pusher: default_pusher(),
        };
        let state = SceneState {
            object_poses: vec![Pose::from_xy_yaw(0.1, 0.0, 0.03, 0.0)],
            pusher_pose: Pose::from_xy_yaw(0.0, 0.0, 0.06, 0.0),
            time: 0.0,
        };
        (spec, state)
    }

    #[test]
    fn zero_action_changes_nothing() {
        let (spec, state) = one_box_scene();
        let (next, info) = step(&spec, &state, &PusherAction::zero(), 0.2, &SimParams::default());
        assert_eq!(next.object_poses, state.object_poses);
        assert_eq!(next.pusher_pose.position, state.pusher_pose.position);
        assert!(!info.clamped);
    }

    #[test]
    fn free_space_kinematics() {
        let (spec, mut state) = one_box_scene();
        state.pusher_pose = Pose::from_xy_yaw(-0.3, -0.3, 0.06, 0.0);
        let (next, _) = step(&spec, &state, &PusherAction::new(0.3, 0.0), 0.2, &SimParams::default());
        assert_abs_diff_eq!(next.pusher_pose.position.x, -0.3 + 0.06, epsilon = 1e-12);
        assert_abs_diff_eq!(next.pusher_pose.position.y, -0.3, epsilon = 1e-12);
        assert_eq!(next.object_poses, state.object_poses);
    }

    #[test]
    fn head_on_push_translates_without_yaw() {
        // Pusher pushes straight at the box center; the fine-substep run of
        // the same model is the convergence oracle.
        let (spec, mut state) = one_box_scene();
        state.pusher_pose = Pose::from_xy_yaw(0.044, 0.0, 0.06, 0.0);
        let act = PusherAction::new(0.15, 0.0);
        let params = SimParams::default();
        let (coarse, _) = step(&spec, &state, &act, 0.2, &params);
        let fine_n = ((0.03 / params.substep_travel).ceil() as usize).max(1) * 100;
        let (fine, _) = step_with_substeps(&spec, &state, &act, 0.2, &params, Some(fine_n));

        let yaw = coarse.object_poses[0].orientation.yaw().abs();
        assert!(yaw < 1e-3, "yaw {yaw}");
        assert!(fine.object_poses[0].orientation.yaw().abs() < 1e-3);
        // Box moved along +x and stayed on the push line.
        assert!(coarse.object_poses[0].position.x > state.object_poses[0].position.x + 0.005);
        assert_abs_diff_eq!(coarse.object_poses[0].position.y, 0.0, epsilon = 1e-6);
        // Coarse displacement agrees with the fine-substep oracle.
        let dc = coarse.object_poses[0].position.x - state.object_poses[0].position.x;
        let df = fine.object_poses[0].position.x - state.object_poses[0].position.x;
        assert!(
            (dc - df).abs() < 0.15 * df.max(1e-9) + 1e-4,
            "coarse {dc} vs fine {df}"
        );
    }

    #[test]
    fn plane_constraint_and_penetration_bound() {
        let mut r = rng::stream(31, 9);
        let lib = default_library();
        let pusher = default_pusher();
        let params = SimParams::default();
        let mut worst = 0.0f64;
        for _ in 0..100 {
            let (spec, mut state) = sample_scene(&lib, &pusher, 3, 0.25, &mut r).unwrap();
            let z0: Vec<f64> = state.object_poses.iter().map(|p| p.position.z).collect();
            for _ in 0..10 {
                let a = PusherAction::new(r.gen_range(-0.3..0.3), r.gen_range(-0.3..0.3));
                let (next, info) = step(&spec, &state, &a, 0.2, &params);
                worst = worst.max(info.max_penetration);
                for (i, p) in next.object_poses.iter().enumerate() {
                    assert_abs_diff_eq!(p.position.z, z0[i], epsilon = 1e-12);
                    // roll/pitch exactly zero: quaternion has only w, z.
                    assert_eq!(p.orientation.x, 0.0);
                    assert_eq!(p.orientation.y, 0.0);
                }
                state = next;
            }
        }
        assert!(worst <= 1e-3, "max penetration {worst}");
    }

    #[test]
    fn action_sampler_uniform_chi_squared() {
        // 10^4 actions, 10x10 bins; chi^2 critical value at p=0.01, df=99.
        let mut r = rng::stream(77, 3);
        let mut bins = [0usize; 100];
        let n = 10_000;
        for _ in 0..n {
            let a = PusherAction::new(
                r.gen_range(-ACTION_BOUND..ACTION_BOUND),
                r.gen_range(-ACTION_BOUND..ACTION_BOUND),
            );
            let bx = (((a.velocity.x + ACTION_BOUND) / (2.0 * ACTION_BOUND) * 10.0) as usize).min(9);
            let by = (((a.velocity.y + ACTION_BOUND) / (2.0 * ACTION_BOUND) * 10.0) as usize).min(9);
            bins[by * 10 + bx] += 1;
        }
        let expected = n as f64 / 100.0;
        let chi2: f64 = bins.iter().map(|c| (*c as f64 - expected).powi(2) / expected).sum();
        assert!(chi2 < 134.642, "chi2 {chi2} exceeds the 1% critical value");
    }

    #[test]
    fn scene_sampling_rejects_impossible_packings() {
        let mut r = rng::stream(5, 5);
        let lib = default_library();
        let err = sample_scene(&lib, &default_pusher(), 40, 0.05, &mut r);
        assert!(matches!(err, Err(Error::Placement(_))));
    }

    #[test]
    fn counting_contract() {
        struct Count(usize);
        impl FrameSink for Count {
            fn frame(
                &mut self,
                _t: usize,
                _s: usize,
                _v: usize,
                _i: &Image,
                _m: &LabelMask,
            ) -> Result<()> {
                self.0 += 1;
                Ok(())
            }
        }
        let cfg = CollectConfig {
            trajectories: 2,
            steps: 5,
            resolution: 16,
            ..CollectConfig::default()
        };
        let mut count = Count(0);
        let ds = collect_trajectories(&cfg, 3, Some(&mut count)).unwrap();
        assert_eq!(ds.trajectories.len(), 2);
        for t in &ds.trajectories {
            assert_eq!(t.states.len(), 6);
            assert_eq!(t.actions.len(), 5);
        }
        assert_eq!(count.0, 2 * 6 * 4);
    }

    #[test]
    fn collection_is_deterministic() {
        let cfg = CollectConfig {
            trajectories: 2,
            steps: 8,
            render_images: false,
            ..CollectConfig::default()
        };
        let a = collect_trajectories(&cfg, 42, None).unwrap();
        let b = collect_trajectories(&cfg, 42, None).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }
}
