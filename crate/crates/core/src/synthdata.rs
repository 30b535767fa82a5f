//! Procedural scenes with analytic ground truth.
//!
//! Geometry is authored at unit scale and multiplied by `lambda`; texture
//! coordinates are divided by `lambda`, so a rescaled scene renders the same
//! images with all depths multiplied by `lambda`.

use nalgebra::{Matrix3x2, Rotation3, Unit, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{
    relative_pose, CameraView, Intrinsics, PixelPoint, Pose, RECT_INFLATION,
};
use crate::raster::{DepthMap, Image};

/// Fraction of pixels of every view that must hit the surface.
pub const MIN_COVERAGE: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PrimitiveKind {
    /// Plane through the target, tilted away from fronto-parallel.
    Plane { tilt_deg: f64, tilt_axis_deg: f64 },
    /// Sphere centred behind the target.
    Sphere { radius: f64 },
    /// Two parallel planes; the nearer one covers `x < 0` only.
    Step { tilt_deg: f64, gap: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TextureSpec {
    pub octaves: usize,
    /// Lattice spacing of the coarsest octave, in surface units at unit scale.
    pub base_cell: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigSpec {
    pub count: usize,
    pub radius: f64,
    /// Angular step between neighbouring cameras on the arc.
    pub step_deg: f64,
    pub elevation_deg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneSpec {
    pub primitive: PrimitiveKind,
    pub texture: TextureSpec,
    pub rig: RigSpec,
    pub width: usize,
    pub height: usize,
    /// Focal length in pixels.
    pub focal: f64,
    pub lambda: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            primitive: PrimitiveKind::Plane {
                tilt_deg: 20.0,
                tilt_axis_deg: 30.0,
            },
            texture: TextureSpec {
                octaves: 3,
                base_cell: 0.5,
                seed: 1,
            },
            rig: RigSpec {
                count: 3,
                radius: 4.0,
                step_deg: 20.0,
                elevation_deg: 5.0,
            },
            width: 80,
            height: 64,
            focal: 80.0,
            lambda: 1.0,
        }
    }
}

impl SceneSpec {
    /// Desk-scale plane scene varied by `index`.
    pub fn plane(index: u64) -> Self {
        let mut s = Self::default();
        let k = index as f64;
        s.primitive = PrimitiveKind::Plane {
            tilt_deg: 10.0 + (7.0 * k) % 21.0,
            tilt_axis_deg: 30.0 + 50.0 * k,
        };
        s.rig.elevation_deg = 5.0 - 4.0 * (k % 3.0);
        s.rig.radius = 4.0 + 0.5 * (k % 2.0);
        s.texture.seed = 1 + index;
        s
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub depths: Vec<DepthMap>,
    pub cloud: Vec<Vector3<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub spec: SceneSpec,
    pub views: Vec<CameraView>,
    pub gt: GroundTruth,
}

struct Surface {
    kind: Surfaces,
    /// In-plane texture axes and origin, shared by all pieces.
    origin: Vector3<f64>,
    axes: [Vector3<f64>; 2],
    normal: Vector3<f64>,
}

enum Surfaces {
    Plane,
    Sphere { center: Vector3<f64>, radius: f64 },
    Step { gap: f64 },
}

impl Surface {
    fn new(kind: &PrimitiveKind, lambda: f64) -> Self {
        let facing = Vector3::new(0.0, 0.0, -1.0);
        let tilted = |tilt_deg: f64, axis_deg: f64| {
            let a = axis_deg.to_radians();
            let axis = Unit::new_normalize(Vector3::new(a.cos(), a.sin(), 0.0));
            Rotation3::from_axis_angle(&axis, tilt_deg.to_radians()) * facing
        };
        let (kind, normal) = match *kind {
            PrimitiveKind::Plane {
                tilt_deg,
                tilt_axis_deg,
            } => (Surfaces::Plane, tilted(tilt_deg, tilt_axis_deg)),
            PrimitiveKind::Sphere { radius } => (
                Surfaces::Sphere {
                    center: Vector3::new(0.0, 0.0, radius * lambda),
                    radius: radius * lambda,
                },
                facing,
            ),
            PrimitiveKind::Step { tilt_deg, gap } => {
                (Surfaces::Step { gap: gap * lambda }, tilted(tilt_deg, 90.0))
            }
        };
        let helper = if normal.x.abs() < 0.9 {
            Vector3::x()
        } else {
            Vector3::y()
        };
        let e1 = normal.cross(&helper).normalize();
        let e2 = normal.cross(&e1);
        Self {
            kind,
            origin: Vector3::zeros(),
            axes: [e1, e2],
            normal,
        }
    }

    fn plane_hit(&self, o: &Vector3<f64>, d: &Vector3<f64>, offset: f64) -> Option<f64> {
        // Plane: n . x = offset (n points towards the cameras).
        let den = self.normal.dot(d);
        if den.abs() < 1e-15 {
            return None;
        }
        let t = (offset - self.normal.dot(o)) / den;
        (t > 0.0).then_some(t)
    }

    /// Ray parameter of the first hit for `x = o + t d`.
    fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<f64> {
        match &self.kind {
            Surfaces::Plane => self.plane_hit(o, d, 0.0),
            Surfaces::Sphere { center, radius } => {
                let oc = o - center;
                let a = d.dot(d);
                let b = oc.dot(d);
                let c = oc.dot(&oc) - radius * radius;
                let disc = b * b - a * c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let t0 = (-b - sq) / a;
                let t1 = (-b + sq) / a;
                if t0 > 0.0 {
                    Some(t0)
                } else if t1 > 0.0 {
                    Some(t1)
                } else {
                    None
                }
            }
            Surfaces::Step { gap } => {
                let far = self.plane_hit(o, d, 0.0);
                let near = self
                    .plane_hit(o, d, *gap)
                    .filter(|t| (o + d * *t).dot(&self.axes[0]) < 0.0);
                match (near, far) {
                    (Some(a), Some(b)) => Some(a.min(b)),
                    (a, b) => a.or(b),
                }
            }
        }
    }

    fn texture_coords(&self, x: &Vector3<f64>, lambda: f64) -> (f64, f64) {
        match &self.kind {
            Surfaces::Sphere { center, radius } => {
                let p = (x - center) / *radius;
                let theta = p.y.clamp(-1.0, 1.0).acos();
                let phi = p.z.atan2(p.x);
                (phi * radius / lambda, theta * radius / lambda)
            }
            _ => {
                let r = x - self.origin;
                (r.dot(&self.axes[0]) / lambda, r.dot(&self.axes[1]) / lambda)
            }
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn lattice(seed: u64, i: i64, j: i64) -> f64 {
    let h = splitmix(seed ^ splitmix((i as u64).wrapping_mul(0x1000_0000_01B3) ^ splitmix(j as u64)));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Multi-octave value noise with bilinear lattice interpolation, in `[0, 1]`.
fn value_noise(spec: &TextureSpec, channel: u64, s: f64, t: f64) -> f64 {
    let mut total = 0.0;
    let mut norm = 0.0;
    let mut cell = spec.base_cell;
    let mut amp = 1.0;
    for o in 0..spec.octaves {
        let seed = splitmix(spec.seed.wrapping_mul(31).wrapping_add(channel * 1009 + o as u64));
        let (x, y) = (s / cell, t / cell);
        let (i, j) = (x.floor(), y.floor());
        let (fx, fy) = (x - i, y - j);
        let (i, j) = (i as i64, j as i64);
        let v = (1.0 - fx) * (1.0 - fy) * lattice(seed, i, j)
            + fx * (1.0 - fy) * lattice(seed, i + 1, j)
            + (1.0 - fx) * fy * lattice(seed, i, j + 1)
            + fx * fy * lattice(seed, i + 1, j + 1);
        total += amp * v;
        norm += amp;
        cell *= 0.5;
        amp *= 0.6;
    }
    total / norm
}

fn shade(spec: &TextureSpec, s: f64, t: f64) -> [f64; 3] {
    let lum = value_noise(spec, 0, s, t);
    let mut rgb = [0.0; 3];
    for (c, out) in rgb.iter_mut().enumerate() {
        *out = 0.6 * lum + 0.4 * value_noise(spec, c as u64 + 1, s, t);
    }
    rgb
}

/// Camera poses on a horizontal arc around the origin; camera 0 sits in
/// the middle and the others alternate left and right.
pub fn rig_poses(rig: &RigSpec, lambda: f64) -> Result<Vec<Pose>> {
    let up = Vector3::new(0.0, -1.0, 0.0);
    let elev = rig.elevation_deg.to_radians();
    (0..rig.count)
        .map(|k| {
            let step = k.div_ceil(2) as f64 * if k % 2 == 1 { -1.0 } else { 1.0 };
            let phi = (step * rig.step_deg).to_radians();
            let eye = Vector3::new(
                phi.sin() * elev.cos(),
                -elev.sin(),
                -phi.cos() * elev.cos(),
            ) * (rig.radius * lambda);
            Pose::look_at(eye, Vector3::zeros(), up)
        })
        .collect()
}

/// Renders the scene. The seed perturbs the texture only.
pub fn generate(spec: &SceneSpec, seed: u64) -> Result<Scene> {
    let lambda = spec.lambda;
    if !(lambda > 0.0 && lambda.is_finite()) || spec.rig.count < 2 {
        return Err(crate::error::invalid("scene needs lambda > 0 and at least two cameras"));
    }
    let surface = Surface::new(&spec.primitive, lambda);
    let texture = TextureSpec {
        seed: splitmix(spec.texture.seed ^ splitmix(seed)),
        ..spec.texture
    };
    let k = Intrinsics::new(
        spec.focal,
        spec.focal,
        (spec.width as f64 - 1.0) / 2.0,
        (spec.height as f64 - 1.0) / 2.0,
    )?;
    let (w, h) = (spec.width, spec.height);
    let mut views = Vec::with_capacity(spec.rig.count);
    let mut depths = Vec::with_capacity(spec.rig.count);
    for pose in rig_poses(&spec.rig, lambda)? {
        let origin = pose.center();
        let to_world = pose.inverse();
        let ray = |u: f64, v: f64| to_world.rotation() * k.unproject(PixelPoint::new(u, v));
        let mut rgb = vec![0f32; w * h * 3];
        let mut depth = vec![0.0; w * h];
        let mut mask = vec![false; w * h];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let d = ray(x as f64, y as f64);
                if let Some(t) = surface.intersect(&origin, &d) {
                    // Direction has unit camera-z, so the ray parameter is the depth.
                    depth[i] = t;
                    mask[i] = true;
                }
                let mut acc = [0.0; 3];
                for (sx, sy) in [(-0.25, -0.25), (0.25, -0.25), (-0.25, 0.25), (0.25, 0.25)] {
                    let d = ray(x as f64 + sx, y as f64 + sy);
                    if let Some(t) = surface.intersect(&origin, &d) {
                        let (s, tt) = surface.texture_coords(&(origin + d * t), lambda);
                        let c = shade(&texture, s, tt);
                        for ch in 0..3 {
                            acc[ch] += 0.25 * c[ch];
                        }
                    }
                }
                for ch in 0..3 {
                    // Quantised exactly as an 8-bit image file would store it.
                    rgb[i * 3 + ch] = ((acc[ch].clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32;
                }
            }
        }
        let coverage = mask.iter().filter(|&&m| m).count() as f64 / (w * h) as f64;
        if coverage < MIN_COVERAGE {
            return Err(Error::CoverageTooLow { fraction: coverage });
        }
        views.push(CameraView::new(k, pose, Image::new(w, h, rgb)?)?);
        depths.push(DepthMap::new(w, h, depth, mask)?);
    }
    let mut cloud = Vec::new();
    for (view, depth) in views.iter().zip(&depths) {
        for y in 0..h {
            for x in 0..w {
                if let Some(d) = depth.get(x, y) {
                    cloud.push(view.backproject(PixelPoint::new(x as f64, y as f64), d));
                }
            }
        }
    }
    Ok(Scene {
        spec: *spec,
        views,
        gt: GroundTruth { depths, cloud },
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleSample {
    pub position: PixelPoint,
    pub d_r: f64,
    pub d_s: f64,
}

/// Brute-force table of depths along the epipolar line of `pixel`, sampled
/// densely across the inflated source rectangle. Depths come from a
/// least-squares solve of the three-row warp constraint.
pub fn epipolar_oracle(reference: &CameraView, source: &CameraView, pixel: PixelPoint, samples: usize) -> Vec<OracleSample> {
    let rel = relative_pose(reference, source);
    let k0_inv = reference.intrinsics.matrix().try_inverse().expect("invertible intrinsics");
    let ki_inv = source.intrinsics.matrix().try_inverse().expect("invertible intrinsics");
    let ray_r = rel.rotation() * (k0_inv * Vector3::new(pixel.u, pixel.v, 1.0));
    // Two points of the line: projections of the ray at two depths.
    let project = |x: Vector3<f64>| {
        let p = source.intrinsics.matrix() * x;
        (p.x / p.z, p.y / p.z)
    };
    let t = *rel.translation();
    let near = project(ray_r * 1.0 + t);
    let far = project(ray_r * 1e3 + t);
    let (mut dx, mut dy) = (far.0 - near.0, far.1 - near.1);
    let n = dx.hypot(dy);
    if !(n > 0.0) {
        return Vec::new();
    }
    dx /= n;
    dy /= n;
    let (w, h) = (source.width as f64, source.height as f64);
    let (x0, x1) = (-0.5 - RECT_INFLATION * w, w - 0.5 + RECT_INFLATION * w);
    let (y0, y1) = (-0.5 - RECT_INFLATION * h, h - 0.5 + RECT_INFLATION * h);
    let clip = |o: f64, d: f64, lo: f64, hi: f64| {
        if d.abs() < 1e-15 {
            if o >= lo && o <= hi {
                (f64::NEG_INFINITY, f64::INFINITY)
            } else {
                (f64::INFINITY, f64::NEG_INFINITY)
            }
        } else {
            let (a, b) = ((lo - o) / d, (hi - o) / d);
            (a.min(b), a.max(b))
        }
    };
    let cx = clip(near.0, dx, x0, x1);
    let cy = clip(near.1, dy, y0, y1);
    let (e0, e1) = (cx.0.max(cy.0), cx.1.min(cy.1));
    if !(e1 > e0) || samples < 2 {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(samples);
    for i in 0..samples {
        let e = e0 + (e1 - e0) * i as f64 / (samples - 1) as f64;
        let p = PixelPoint::new(near.0 + e * dx, near.1 + e * dy);
        let ray_s = ki_inv * Vector3::new(p.u, p.v, 1.0);
        let a = Matrix3x2::from_columns(&[ray_s, -ray_r]);
        let Some(inv) = (a.transpose() * a).try_inverse() else {
            continue;
        };
        let sol = inv * a.transpose() * t;
        out.push(OracleSample {
            position: p,
            d_r: sol[1],
            d_s: sol[0],
        });
    }
    out
}
