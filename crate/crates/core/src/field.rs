//! Object-centric scattering fields: a grid of small fully-connected cells
//! mapping (position, light direction, view direction) to cumulative
//! radiance transfer and density, trained per object against the analytic
//! camera.
//!
//! Positions are encoded with sine/cosine frequencies over bbox-normalized
//! coordinates; directions enter raw. Density uses a softplus head, transfer
//! a sigmoid head, so the type invariants hold by construction. Queries
//! outside the bounding box are exactly empty.

use std::path::Path;
use std::rc::Rc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Adam, Graph, Mlp, RayMeta, Tensor};
use crate::compose;
use crate::error::{Error, Result};
use crate::geometry::{Camera, Pose, Vec3};
use crate::img::Image;
use crate::io;
use crate::oracle::{self, DirectionalLight, RenderOpts};
use crate::rng;
use crate::sim::BodySpec;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldConfig {
    /// Cells per axis.
    pub grid: usize,
    pub hidden: usize,
    pub hidden_layers: usize,
    pub pos_freqs: usize,
    /// Bounding box inflation over the object's tight AABB.
    pub bbox_margin: f64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig { grid: 4, hidden: 32, hidden_layers: 4, pos_freqs: 6, bbox_margin: 1.12 }
    }
}

impl FieldConfig {
    pub fn feat_dim(&self) -> usize {
        3 + 6 * self.pos_freqs + 6
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.feat_dim()];
        s.extend(std::iter::repeat(self.hidden).take(self.hidden_layers));
        s.push(4);
        s
    }
}

/// Initial raw density bias; softplus(-3) keeps a fresh field almost empty.
const SIGMA_BIAS_INIT: f64 = -3.0;

#[derive(Debug, Clone)]
pub struct ScatterField {
    pub bbox_min: Vec3,
    pub bbox_max: Vec3,
    pub grid: usize,
    pub pos_freqs: usize,
    pub cells: Vec<Mlp>,
}

impl ScatterField {
    pub fn init(bbox_half: Vec3, cfg: &FieldConfig, seed: u64) -> ScatterField {
        let mut r = rng::stream(seed, 0xf1e1d);
        let sizes = cfg.sizes();
        let cells = (0..cfg.grid.pow(3))
            .map(|_| {
                let mut m = Mlp::init(&sizes, Activation::Relu, &mut r);
                let last = m.layers.len() - 1;
                m.layers[last].b.data[3] = SIGMA_BIAS_INIT;
                m
            })
            .collect();
        let h = bbox_half * cfg.bbox_margin;
        ScatterField {
            bbox_min: -h,
            bbox_max: h,
            grid: cfg.grid,
            pos_freqs: cfg.pos_freqs,
            cells,
        }
    }

    pub fn feat_dim(&self) -> usize {
        3 + 6 * self.pos_freqs + 6
    }

    pub fn contains(&self, x: Vec3) -> bool {
        (0..3).all(|a| x[a] >= self.bbox_min[a] && x[a] <= self.bbox_max[a])
    }

    /// Cell of an in-box point (clamped at the boundary).
    pub fn cell_index(&self, x: Vec3) -> usize {
        let g = self.grid;
        let mut idx = 0usize;
        for a in (0..3).rev() {
            let u = (x[a] - self.bbox_min[a]) / (self.bbox_max[a] - self.bbox_min[a]);
            let c = ((u * g as f64) as usize).min(g - 1);
            idx = idx * g + c;
        }
        idx
    }

    /// Positional + direction encoding of one sample into `out`.
    pub fn encode_into(&self, x: Vec3, w_light: Vec3, w_out: Vec3, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.feat_dim());
        let mut k = 0;
        let mut s = [0.0f64; 3];
        for a in 0..3 {
            let u = (x[a] - self.bbox_min[a]) / (self.bbox_max[a] - self.bbox_min[a]);
            s[a] = 2.0 * u - 1.0;
            out[k] = s[a];
            k += 1;
        }
        let mut freq = std::f64::consts::PI;
        for _ in 0..self.pos_freqs {
            for v in s {
                let (sin, cos) = (freq * v).sin_cos();
                out[k] = sin;
                out[k + 1] = cos;
                k += 2;
            }
            freq *= 2.0;
        }
        for a in 0..3 {
            out[k] = w_light[a];
            k += 1;
        }
        for a in 0..3 {
            out[k] = w_out[a];
            k += 1;
        }
    }

    /// Raw evaluation without contract checks; `scratch` avoids per-call
    /// allocation in render loops.
    pub fn eval_raw(&self, x: Vec3, w_light: Vec3, w_out: Vec3, scratch: &mut EvalScratch) -> ([f64; 3], f64) {
        if !self.contains(x) {
            return ([0.0; 3], 0.0);
        }
        let cell = &self.cells[self.cell_index(x)];
        scratch.feat.resize(self.feat_dim(), 0.0);
        self.encode_into(x, w_light, w_out, &mut scratch.feat);
        let out = forward_scratch(cell, &scratch.feat, &mut scratch.a, &mut scratch.b);
        (
            [sigmoid(out[0]), sigmoid(out[1]), sigmoid(out[2])],
            softplus(out[3]),
        )
    }
}

#[derive(Default)]
pub struct EvalScratch {
    feat: Vec<f64>,
    a: Vec<f64>,
    b: Vec<f64>,
}

fn forward_scratch<'a>(
    mlp: &Mlp,
    input: &[f64],
    a: &'a mut Vec<f64>,
    b: &'a mut Vec<f64>,
) -> &'a [f64] {
    let last = mlp.layers.len() - 1;
    a.clear();
    a.extend_from_slice(input);
    for (li, layer) in mlp.layers.iter().enumerate() {
        let (n_in, n_out) = (layer.w.rows, layer.w.cols);
        b.clear();
        b.extend_from_slice(&layer.b.data);
        for i in 0..n_in {
            let av = a[i];
            if av == 0.0 {
                continue;
            }
            let row = &layer.w.data[i * n_out..(i + 1) * n_out];
            for (o, wv) in b.iter_mut().zip(row) {
                *o += av * wv;
            }
        }
        if li < last {
            for v in b.iter_mut() {
                *v = v.max(0.0);
            }
        }
        std::mem::swap(a, b);
    }
    a
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Query the field at an object-frame point with unit light/view
/// directions.
pub fn eval_field(
    field: &ScatterField,
    x: Vec3,
    w_light: Vec3,
    w_out: Vec3,
) -> Result<([f64; 3], f64)> {
    for (name, d) in [("light", w_light), ("view", w_out)] {
        if (d.norm() - 1.0).abs() > 1e-6 {
            return Err(Error::Contract(format!("{name} direction must be unit-norm")));
        }
    }
    let mut scratch = EvalScratch::default();
    Ok(field.eval_raw(x, w_light, w_out, &mut scratch))
}

/// Slab intersection of a ray with an AABB; interval in ray parameter t.
pub fn ray_aabb(o: Vec3, d: Vec3, bmin: Vec3, bmax: Vec3) -> Option<(f64, f64)> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        let inv = 1.0 / d[a];
        let mut lo = (bmin[a] - o[a]) * inv;
        let mut hi = (bmax[a] - o[a]) * inv;
        if lo > hi {
            std::mem::swap(&mut lo, &mut hi);
        }
        t0 = t0.max(lo);
        t1 = t1.min(hi);
        if t0 > t1 {
            return None;
        }
    }
    Some((t0, t1))
}

/// Stratified sample positions over [t0, t1]: counter-hashed jitter makes
/// the pattern a pure function of (seed, ray id, sample index).
pub fn sample_ts(t0: f64, t1: f64, n: usize, seed: u64, ray_id: u64) -> (f64, Vec<f64>) {
    let delta = (t1 - t0) / n as f64;
    let ts = (0..n)
        .map(|i| t0 + (i as f64 + rng::hash_unit(seed, ray_id, i as u64)) * delta)
        .collect();
    (delta, ts)
}

/// Single-object render: the composition engine with one field, shadows
/// off, and no table plane.
pub fn render_object(
    field: &ScatterField,
    pose: &Pose,
    cam: &Camera,
    light: &DirectionalLight,
    samples_per_ray: usize,
    seed: u64,
) -> Result<Image> {
    if samples_per_ray < 8 {
        return Err(Error::Contract("samples_per_ray must be at least 8".into()));
    }
    let opts = compose::ComposeOpts {
        samples_per_ray,
        seed,
        plane: None,
        shadows: None,
        ..compose::ComposeOpts::default()
    };
    Ok(compose::render_fields(&[field], &[*pose], light, cam, &opts))
}

// ---------------------------------------------------------------------------
// training

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OsfTrainConfig {
    pub views: usize,
    pub resolution: u32,
    pub samples_per_ray: usize,
    pub batch_rays: usize,
    pub steps: usize,
    pub lr: f64,
    /// Steps per harness epoch; the retry policy compares epoch losses.
    pub eval_every: usize,
    pub field: FieldConfig,
    /// Camera distance as a multiple of the object's circumscribed radius.
    pub distance_factor: f64,
    pub fov_deg: f64,
}

impl Default for OsfTrainConfig {
    fn default() -> Self {
        OsfTrainConfig {
            views: 100,
            resolution: 64,
            samples_per_ray: 48,
            batch_rays: 512,
            steps: 3600,
            lr: 5e-4,
            eval_every: 300,
            field: FieldConfig::default(),
            distance_factor: 4.0,
            fov_deg: 45.0,
        }
    }
}

/// One supervision view: camera, light, and the rendered target.
#[derive(Debug, Clone)]
pub struct TrainView {
    pub cam: Camera,
    pub light: DirectionalLight,
    pub image: Image,
    pub mask: Vec<bool>,
}

/// Render object-centric supervision with the analytic camera: the body at
/// the origin, orbit viewpoints, one random light per view.
pub fn render_training_views(spec: &BodySpec, cfg: &OsfTrainConfig, seed: u64) -> Vec<TrainView> {
    let spec_scene = crate::sim::SceneSpec {
        objects: vec![*spec],
        pusher: crate::sim::default_pusher(),
    };
    let state = crate::sim::SceneState {
        object_poses: vec![Pose::IDENTITY],
        pusher_pose: Pose::from_xy_yaw(10.0, 10.0, 0.06, 0.0),
        time: 0.0,
    };
    let radius = spec.shape.aabb_half().norm();
    let opts = RenderOpts::object_only();
    let mut r = rng::stream(seed, 0x0906);
    let params: Vec<(f64, f64, DirectionalLight)> = (0..cfg.views)
        .map(|_| {
            let az = r.gen::<f64>() * std::f64::consts::TAU;
            let elev = r.gen_range(0.08..1.35);
            (az, elev, crate::sim::sample_light(&mut r))
        })
        .collect();
    params
        .into_par_iter()
        .map(|(az, elev, light)| {
            let cam = oracle::orbit_camera(
                radius * cfg.distance_factor,
                az,
                elev,
                cfg.fov_deg,
                cfg.resolution,
            );
            let image = oracle::render_oracle(&spec_scene, &state, &cam, &light, &opts);
            let mask = oracle::render_masks(&spec_scene, &state, &cam, &opts).binary(1);
            TrainView { cam, light, image, mask }
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct FieldTrainReport {
    pub steps_run: usize,
    pub final_loss: f64,
    /// Accepted epoch losses; non-increasing by construction of the
    /// learning-rate halving retry policy.
    pub curve: Vec<f64>,
    pub lr_final: f64,
    pub retries: usize,
}

struct RayRecord {
    origin: Vec3,
    dir: Vec3,
    t0: f64,
    t1: f64,
    light: Vec3,
    target: [f64; 3],
}

fn collect_rays(field: &ScatterField, views: &[TrainView]) -> (Vec<RayRecord>, Vec<usize>) {
    let mut rays = Vec::new();
    let mut masked = Vec::new();
    for v in views {
        for py in 0..v.cam.height {
            for px in 0..v.cam.width {
                let ray = v.cam.ray_for_pixel(px, py).expect("in bounds");
                if let Some((a, b)) = ray_aabb(ray.origin, ray.direction, field.bbox_min, field.bbox_max)
                {
                    let t0 = a.max(ray.t_near);
                    let t1 = b.min(ray.t_far);
                    if t0 < t1 {
                        let idx = (py * v.cam.width + px) as usize;
                        if v.mask[idx] {
                            masked.push(rays.len());
                        }
                        rays.push(RayRecord {
                            origin: ray.origin,
                            dir: ray.direction,
                            t0,
                            t1,
                            light: v.light.direction,
                            target: v.image.get(px, py),
                        });
                    }
                }
            }
        }
    }
    (rays, masked)
}

/// Forward loss (and optionally gradients) for a batch of ray indices.
struct BatchResult {
    loss: f64,
    /// (cell, per-layer (dw, db)) for each touched cell.
    grads: Vec<(usize, Vec<(Tensor, Tensor)>)>,
}

fn field_batch(
    field: &ScatterField,
    rays: &[RayRecord],
    batch: &[usize],
    samples: usize,
    jitter_seed: u64,
    background: [f64; 3],
    want_grads: bool,
) -> BatchResult {
    let b = batch.len();
    let s = samples;
    let feat = field.feat_dim();
    let total = b * s;

    // Encode all samples and group rows by grid cell.
    let mut enc = vec![0.0f64; total * feat];
    let mut cell_of = vec![0usize; total];
    let mut delta = vec![0.0f64; b];
    let mut target = Vec::with_capacity(b * 3);
    enc.par_chunks_exact_mut(s * feat)
        .zip(cell_of.par_chunks_exact_mut(s))
        .zip(delta.par_iter_mut())
        .enumerate()
        .for_each(|(bi, ((chunk, cells), dl))| {
            let ray = &rays[batch[bi]];
            let (d, ts) = sample_ts(ray.t0, ray.t1, s, jitter_seed, batch[bi] as u64);
            *dl = d;
            let w_out = -ray.dir;
            for (si, t) in ts.iter().enumerate() {
                let p = ray.origin + ray.dir * *t;
                cells[si] = field.cell_index(p);
                field.encode_into(p, ray.light, w_out, &mut chunk[si * feat..(si + 1) * feat]);
            }
        });
    for bi in batch {
        target.extend_from_slice(&rays[*bi].target);
    }

    let g_count = field.cells.len();
    let mut rows_per_cell: Vec<Vec<usize>> = vec![Vec::new(); g_count];
    for (row, c) in cell_of.iter().enumerate() {
        rows_per_cell[*c].push(row);
    }

    let mut g = Graph::new();
    let enc_node = g.constant(Tensor::from_vec(total, feat, enc));
    let mut outs = Vec::new();
    let mut scatter_idx = Vec::with_capacity(total);
    let mut touched = Vec::new();
    for (c, rows) in rows_per_cell.iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        let ids = field.cells[c].params(&mut g);
        let gathered = g.gather_rows(enc_node, Rc::new(rows.clone()));
        let out = field.cells[c].forward(&mut g, &ids, gathered);
        outs.push(out);
        scatter_idx.extend_from_slice(rows);
        touched.push((c, ids));
    }
    let stacked = g.concat_rows(&outs);
    let placed = g.scatter_add_rows(stacked, Rc::new(scatter_idx), total);
    let rho_raw = g.slice_cols(placed, 0, 3);
    let sigma_raw = g.slice_cols(placed, 3, 4);
    let rho = g.sigmoid(rho_raw);
    let sig = g.softplus(sigma_raw);
    let meta = Rc::new(RayMeta {
        n_rays: b,
        samples: s,
        delta,
        background,
        radiance: [1.0, 1.0, 1.0],
    });
    let px = g.composite_rays(sig, rho, meta);
    let tgt = g.constant(Tensor::from_vec(b, 3, target));
    let d = g.sub(px, tgt);
    let d2 = g.mul(d, d);
    let ssum = g.sum_all(d2);
    let loss = g.scale(ssum, 1.0 / (b as f64 * 3.0));
    let loss_v = g.scalar_value(loss);

    let grads = if want_grads {
        let all = g.backward(loss);
        touched
            .into_iter()
            .map(|(c, ids)| {
                let per_layer = ids
                    .iter()
                    .map(|(w, bnode)| {
                        (all[*w].clone().expect("w grad"), all[*bnode].clone().expect("b grad"))
                    })
                    .collect();
                (c, per_layer)
            })
            .collect()
    } else {
        Vec::new()
    };
    BatchResult { loss: loss_v, grads }
}

/// Train a field against rendered views by stochastic gradient descent on
/// random ray batches.
pub fn train_field(
    spec: &BodySpec,
    views: &[TrainView],
    cfg: &OsfTrainConfig,
    seed: u64,
) -> Result<(ScatterField, FieldTrainReport)> {
    if views.len() < 2 {
        return Err(Error::Contract("training needs at least two views".into()));
    }
    let mut field = ScatterField::init(spec.shape.aabb_half(), &cfg.field, seed);
    let (rays, masked) = collect_rays(&field, views);
    if rays.is_empty() {
        return Err(Error::Contract("no rays intersect the field bounding box".into()));
    }
    let background = views[0].image.get(0, 0);

    let mut r = rng::stream(seed, 0x05f7);
    // Fixed eval batch for the epoch comparisons.
    let eval_batch: Vec<usize> =
        (0..1024.min(rays.len())).map(|_| r.gen_range(0..rays.len())).collect();

    let mut adams: Vec<Adam> = (0..field.cells.len()).map(|_| Adam::new(cfg.lr)).collect();
    let mut lr = cfg.lr;
    let mut retries = 0usize;
    let mut curve = Vec::new();
    let mut prev_eval = f64::INFINITY;
    let mut steps_run = 0usize;

    let epochs = (cfg.steps + cfg.eval_every - 1) / cfg.eval_every;
    'epochs: for epoch in 0..epochs {
        let snapshot = (field.cells.clone(), adams.clone());
        loop {
            let steps = cfg.eval_every.min(cfg.steps - epoch * cfg.eval_every);
            for s in 0..steps {
                let step_id = epoch * cfg.eval_every + s;
                let mut sr = rng::stream(seed, 0xba7c ^ step_id as u64);
                let mut batch = Vec::with_capacity(cfg.batch_rays);
                let half = cfg.batch_rays / 2;
                for i in 0..cfg.batch_rays {
                    if i < half && !masked.is_empty() {
                        batch.push(masked[sr.gen_range(0..masked.len())]);
                    } else {
                        batch.push(sr.gen_range(0..rays.len()));
                    }
                }
                let res = field_batch(
                    &field,
                    &rays,
                    &batch,
                    cfg.samples_per_ray,
                    rng::child_seed(seed, 0x1437 + step_id as u64),
                    background,
                    true,
                );
                if !res.loss.is_finite() {
                    return Err(Error::Divergence { step: step_id, loss: res.loss });
                }
                for (c, per_layer) in res.grads {
                    adams[c].lr = lr;
                    let mut params: Vec<&mut Tensor> = Vec::with_capacity(per_layer.len() * 2);
                    for l in field.cells[c].layers.iter_mut() {
                        params.push(&mut l.w);
                        params.push(&mut l.b);
                    }
                    let grads: Vec<&Tensor> =
                        per_layer.iter().flat_map(|(w, b)| [w, b]).collect();
                    adams[c].step(&mut params, &grads);
                }
                steps_run += 1;
            }
            let eval = field_batch(
                &field,
                &rays,
                &eval_batch,
                cfg.samples_per_ray,
                0x0e7a1,
                background,
                false,
            )
            .loss;
            if !eval.is_finite() {
                return Err(Error::Divergence { step: steps_run, loss: eval });
            }
            if eval <= prev_eval {
                prev_eval = eval;
                curve.push(eval);
                break;
            }
            // Regression: restore, halve the learning rate, redo the epoch.
            field.cells = snapshot.0.clone();
            adams = snapshot.1.clone();
            lr *= 0.5;
            retries += 1;
            if lr < cfg.lr / 1024.0 {
                curve.push(prev_eval);
                break 'epochs;
            }
        }
    }

    let report = FieldTrainReport {
        steps_run,
        final_loss: prev_eval,
        curve,
        lr_final: lr,
        retries,
    };
    Ok((field, report))
}

/// Threshold the density on a regular grid and measure the occupied extent.
/// Returns the surviving points and the longest axis of their tight AABB.
pub fn extract_extent(
    field: &ScatterField,
    density_threshold: f64,
    resolution: usize,
) -> Result<(Vec<Vec3>, f64)> {
    let up = Vec3::new(0.0, 0.0, 1.0);
    let mut points = Vec::new();
    let mut scratch = EvalScratch::default();
    for iz in 0..resolution {
        for iy in 0..resolution {
            for ix in 0..resolution {
                let frac = |i: usize| (i as f64 + 0.5) / resolution as f64;
                let p = Vec3::new(
                    field.bbox_min.x + frac(ix) * (field.bbox_max.x - field.bbox_min.x),
                    field.bbox_min.y + frac(iy) * (field.bbox_max.y - field.bbox_min.y),
                    field.bbox_min.z + frac(iz) * (field.bbox_max.z - field.bbox_min.z),
                );
                let (_, sigma) = field.eval_raw(p, up, up, &mut scratch);
                if sigma > density_threshold {
                    points.push(p);
                }
            }
        }
    }
    if points.is_empty() {
        return Err(Error::EmptyField(density_threshold));
    }
    let mut lo = points[0];
    let mut hi = points[0];
    for p in &points {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let kappa = (0..3).map(|a| hi[a] - lo[a]).fold(0.0f64, f64::max);
    Ok((points, kappa))
}

// ---------------------------------------------------------------------------
// checkpoints

pub fn save_field(path: &Path, field: &ScatterField, extra: serde_json::Value) -> Result<()> {
    let sizes: Vec<usize> = {
        let mut s = vec![field.feat_dim()];
        for l in &field.cells[0].layers {
            s.push(l.w.cols);
        }
        s
    };
    let header = serde_json::json!({
        "grid": field.grid,
        "pos_freqs": field.pos_freqs,
        "sizes": sizes,
        "bbox_min": [field.bbox_min.x, field.bbox_min.y, field.bbox_min.z],
        "bbox_max": [field.bbox_max.x, field.bbox_max.y, field.bbox_max.z],
        "build": crate::VERSION,
        "extra": extra,
    });
    let mut params = Vec::new();
    for cell in &field.cells {
        for l in &cell.layers {
            params.extend_from_slice(&l.w.data);
            params.extend_from_slice(&l.b.data);
        }
    }
    io::write_checkpoint(path, io::KIND_FIELD, &header, &params)
}

pub fn load_field(path: &Path) -> Result<(ScatterField, serde_json::Value)> {
    let (header, params) = io::read_checkpoint(path, io::KIND_FIELD)?;
    let grid = header["grid"].as_u64().ok_or_else(|| Error::Data("bad header".into()))? as usize;
    let pos_freqs = header["pos_freqs"].as_u64().unwrap_or(6) as usize;
    let sizes: Vec<usize> = header["sizes"]
        .as_array()
        .ok_or_else(|| Error::Data("bad sizes".into()))?
        .iter()
        .map(|v| v.as_u64().unwrap_or(0) as usize)
        .collect();
    let getv = |k: &str| -> Result<Vec3> {
        let a = header[k].as_array().ok_or_else(|| Error::Data("bad bbox".into()))?;
        Ok(Vec3::new(
            a[0].as_f64().unwrap_or(0.0),
            a[1].as_f64().unwrap_or(0.0),
            a[2].as_f64().unwrap_or(0.0),
        ))
    };
    let bbox_min = getv("bbox_min")?;
    let bbox_max = getv("bbox_max")?;

    let mut cells = Vec::with_capacity(grid.pow(3));
    let mut pos = 0usize;
    for _ in 0..grid.pow(3) {
        let mut layers = Vec::new();
        for w in sizes.windows(2) {
            let (n_in, n_out) = (w[0], w[1]);
            let wd = params
                .get(pos..pos + n_in * n_out)
                .ok_or_else(|| Error::Data("checkpoint payload too short".into()))?
                .to_vec();
            pos += n_in * n_out;
            let bd = params
                .get(pos..pos + n_out)
                .ok_or_else(|| Error::Data("checkpoint payload too short".into()))?
                .to_vec();
            pos += n_out;
            layers.push(crate::autodiff::Linear {
                w: Tensor::from_vec(n_in, n_out, wd),
                b: Tensor::from_vec(1, n_out, bd),
            });
        }
        cells.push(Mlp { layers, activation: Activation::Relu });
    }
    if pos != params.len() {
        return Err(Error::Data("checkpoint payload size mismatch".into()));
    }
    Ok((
        ScatterField { bbox_min, bbox_max, grid, pos_freqs, cells },
        header["extra"].clone(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{fd_gradient, grad_relative_error};
    use crate::sim::{Albedo, Shape};

    fn toy_spec() -> BodySpec {
        BodySpec {
            shape: Shape::Box { half_extents: [0.03, 0.03, 0.03] },
            mass: 0.1,
            friction: 0.5,
            albedo: Albedo::Uniform { rgb: [0.7, 0.3, 0.2] },
        }
    }

    #[test]
    fn outside_bbox_is_exactly_empty() {
        let f = ScatterField::init(Vec3::new(0.03, 0.03, 0.03), &FieldConfig::default(), 1);
        let up = Vec3::new(0.0, 0.0, 1.0);
        let (rho, sigma) = eval_field(&f, Vec3::new(1.0, 0.0, 0.0), up, up).unwrap();
        assert_eq!(sigma, 0.0);
        assert_eq!(rho, [0.0; 3]);
    }

    #[test]
    fn fresh_field_outputs_are_finite_and_nonnegative() {
        let f = ScatterField::init(Vec3::new(0.05, 0.04, 0.03), &FieldConfig::default(), 2);
        let up = Vec3::new(0.0, 0.0, 1.0);
        let side = Vec3::new(1.0, 0.0, 0.0);
        let (rho, sigma) = eval_field(&f, Vec3::new(0.01, -0.02, 0.005), up, side).unwrap();
        assert!(sigma >= 0.0 && sigma.is_finite());
        for c in rho {
            assert!((0.0..=1.0).contains(&c));
        }
    }

    #[test]
    fn eval_rejects_non_unit_directions() {
        let f = ScatterField::init(Vec3::new(0.03, 0.03, 0.03), &FieldConfig::default(), 3);
        let bad = Vec3::new(0.5, 0.0, 0.0);
        let up = Vec3::new(0.0, 0.0, 1.0);
        assert!(eval_field(&f, Vec3::zeros(), bad, up).is_err());
    }

    #[test]
    fn render_loss_gradient_matches_finite_differences() {
        // 1-cell field, 4x4 image, 8 samples per ray: full-parameter check.
        let cfg = OsfTrainConfig {
            views: 2,
            resolution: 4,
            samples_per_ray: 8,
            field: FieldConfig {
                grid: 1,
                hidden: 10,
                hidden_layers: 2,
                pos_freqs: 2,
                bbox_margin: 1.1,
            },
            ..OsfTrainConfig::default()
        };
        let spec = toy_spec();
        let views = render_training_views(&spec, &cfg, 5);
        let field = ScatterField::init(spec.shape.aabb_half(), &cfg.field, 6);
        let (rays, _) = collect_rays(&field, &views);
        assert!(!rays.is_empty());
        let batch: Vec<usize> = (0..rays.len().min(8)).collect();
        let background = views[0].image.get(0, 0);

        let flat: Vec<Tensor> = field.cells[0]
            .layers
            .iter()
            .flat_map(|l| [l.w.clone(), l.b.clone()])
            .collect();
        let eval = |p: &[Tensor]| -> f64 {
            let mut f2 = field.clone();
            for (li, pair) in p.chunks_exact(2).enumerate() {
                f2.cells[0].layers[li].w = pair[0].clone();
                f2.cells[0].layers[li].b = pair[1].clone();
            }
            field_batch(&f2, &rays, &batch, 8, 99, background, false).loss
        };
        let res = field_batch(&field, &rays, &batch, 8, 99, background, true);
        let mut analytic = Vec::new();
        for (_, per_layer) in &res.grads {
            for (w, b) in per_layer {
                analytic.push(w.clone());
                analytic.push(b.clone());
            }
        }
        let fd = fd_gradient(eval, &flat, 1e-6);
        let err = grad_relative_error(&analytic, &fd);
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn all_background_target_trains_to_tiny_loss() {
        // No object in view: the field only has to kill its density.
        let cfg = OsfTrainConfig {
            views: 2,
            resolution: 12,
            samples_per_ray: 16,
            batch_rays: 64,
            steps: 100,
            eval_every: 50,
            lr: 2e-3,
            field: FieldConfig {
                grid: 2,
                hidden: 8,
                hidden_layers: 2,
                pos_freqs: 2,
                bbox_margin: 1.1,
            },
            ..OsfTrainConfig::default()
        };
        let spec = toy_spec();
        let mut views = render_training_views(&spec, &cfg, 7);
        let bg = RenderOpts::default().background;
        for v in &mut views {
            v.image = Image::filled(cfg.resolution, cfg.resolution, bg);
            v.mask = vec![false; (cfg.resolution * cfg.resolution) as usize];
        }
        let (field, report) = train_field(&spec, &views, &cfg, 8).unwrap();
        assert!(report.final_loss < 1e-4, "loss {}", report.final_loss);
        // Density must now be near zero inside the box.
        let err = extract_extent(&field, 1.0, 8);
        assert!(matches!(err, Err(Error::EmptyField(_))));
    }

    #[test]
    fn training_curve_is_monotone_non_increasing() {
        let cfg = OsfTrainConfig {
            views: 4,
            resolution: 16,
            samples_per_ray: 16,
            batch_rays: 96,
            steps: 160,
            eval_every: 40,
            field: FieldConfig {
                grid: 2,
                hidden: 12,
                hidden_layers: 2,
                pos_freqs: 3,
                bbox_margin: 1.1,
            },
            ..OsfTrainConfig::default()
        };
        let spec = toy_spec();
        let views = render_training_views(&spec, &cfg, 9);
        let (_, report) = train_field(&spec, &views, &cfg, 10).unwrap();
        for w in report.curve.windows(2) {
            assert!(w[1] <= w[0], "curve not monotone: {:?}", report.curve);
        }
    }

    #[test]
    fn divergence_is_reported_with_step_index() {
        let cfg = OsfTrainConfig {
            views: 2,
            resolution: 8,
            samples_per_ray: 8,
            batch_rays: 16,
            steps: 10,
            eval_every: 5,
            field: FieldConfig {
                grid: 1,
                hidden: 6,
                hidden_layers: 2,
                pos_freqs: 2,
                bbox_margin: 1.1,
            },
            ..OsfTrainConfig::default()
        };
        let spec = toy_spec();
        let mut views = render_training_views(&spec, &cfg, 11);
        // Poison a target so the loss is NaN from step 0.
        views[0].image.pixels[0] = f64::NAN;
        let err = train_field(&spec, &views, &cfg, 12);
        assert!(matches!(err, Err(Error::Divergence { .. })), "{err:?}");
    }

    #[test]
    fn uniform_density_extent_spans_the_box() {
        // Constant positive density everywhere inside: kappa must equal the
        // longest box axis within one probe cell.
        let mut f = ScatterField::init(Vec3::new(0.10, 0.05, 0.04), &FieldConfig {
            grid: 2,
            hidden: 6,
            hidden_layers: 2,
            pos_freqs: 2,
            bbox_margin: 1.0,
        }, 13);
        for cell in &mut f.cells {
            for l in cell.layers.iter_mut() {
                l.w.data.iter_mut().for_each(|v| *v = 0.0);
                l.b.data.iter_mut().for_each(|v| *v = 0.0);
            }
            let last = cell.layers.len() - 1;
            cell.layers[last].b.data[3] = 50.0;
        }
        let res = 32;
        let (_, kappa) = extract_extent(&f, 10.0, res).unwrap();
        let expect = 0.20;
        assert!((kappa - expect).abs() <= expect / res as f64 * 2.0, "kappa {kappa}");

        // Threshold above the max density must report an empty field.
        assert!(matches!(extract_extent(&f, 100.0, 8), Err(Error::EmptyField(_))));
    }

    #[test]
    fn checkpoint_roundtrip_preserves_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let f = ScatterField::init(Vec3::new(0.05, 0.04, 0.03), &FieldConfig::default(), 21);
        let p = dir.path().join("field.ckpt");
        save_field(&p, &f, serde_json::json!({"spec_id": 3})).unwrap();
        let (f2, extra) = load_field(&p).unwrap();
        assert_eq!(extra["spec_id"], 3);
        let up = Vec3::new(0.0, 0.0, 1.0);
        let side = Vec3::new(0.0, 1.0, 0.0);
        let mut s1 = EvalScratch::default();
        let mut s2 = EvalScratch::default();
        for p in [Vec3::new(0.01, 0.0, 0.0), Vec3::new(-0.02, 0.03, -0.01)] {
            let a = f.eval_raw(p, up, side, &mut s1);
            let b = f2.eval_raw(p, up, side, &mut s2);
            assert_eq!(a, b);
        }
    }
}
