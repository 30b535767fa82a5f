use nalgebra::{Matrix3, Vector3};

use crate::error::{degenerate, invalid, Error, Result};
use crate::raster::Image;

/// Minimum image extent accepted for a view.
pub const MIN_EXTENT: usize = 16;

const ORTHONORMAL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite()) {
            return Err(invalid(format!("focal lengths must be positive, got {fx}, {fy}")));
        }
        if !(cx.is_finite() && cy.is_finite()) {
            return Err(invalid("principal point must be finite"));
        }
        Ok(Self { fx, fy, cx, cy })
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// `K^-1 (u, v, 1)`.
    pub fn unproject(&self, p: PixelPoint) -> Vector3<f64> {
        Vector3::new((p.u - self.cx) / self.fx, (p.v - self.cy) / self.fy, 1.0)
    }

    /// Perspective projection of a camera-frame point.
    pub fn project(&self, x: &Vector3<f64>) -> PixelPoint {
        PixelPoint::new(self.fx * x.x / x.z + self.cx, self.fy * x.y / x.z + self.cy)
    }
}

/// Rigid transform `x -> R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

fn orthonormal_deviation(r: &Matrix3<f64>) -> f64 {
    (r.transpose() * r - Matrix3::identity()).amax()
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        if !rotation.iter().chain(translation.iter()).all(|v| v.is_finite()) {
            return Err(invalid("pose contains non-finite values"));
        }
        let dev = orthonormal_deviation(&rotation);
        if dev > ORTHONORMAL_TOL || rotation.determinant() <= 0.0 {
            return Err(invalid(format!(
                "rotation is not proper orthonormal (deviation {dev:.3e}, det {:.6})",
                rotation.determinant()
            )));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    /// Accepts a rotation within `tol` of orthonormal and projects it onto
    /// the nearest rotation.
    pub fn from_approx(rotation: Matrix3<f64>, translation: Vector3<f64>, tol: f64) -> Result<Self> {
        if !rotation.iter().chain(translation.iter()).all(|v| v.is_finite()) {
            return Err(invalid("pose contains non-finite values"));
        }
        let dev = orthonormal_deviation(&rotation);
        if dev > tol || rotation.determinant() <= 0.0 {
            return Err(invalid(format!("rotation deviates from orthonormal by {dev:.3e}")));
        }
        let svd = rotation.svd(true, true);
        let (u, v_t) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
        Self::new(u * v_t, translation)
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    /// World-to-camera pose of a camera at `eye` looking at `target`, with
    /// the camera's y axis pointing roughly along `-up` (image rows go down).
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Result<Self> {
        let z = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| degenerate("eye coincides with target"))?;
        let x = z
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| degenerate("viewing direction parallel to up"))?;
        let y = z.cross(&x);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        Ok(Self {
            rotation,
            translation: -(rotation * eye),
        })
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Camera centre in world coordinates, for a world-to-camera pose.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// Scales the translation, i.e. the pose of the same camera in a world
    /// scaled by `factor`.
    pub fn scaled(&self, factor: f64) -> Pose {
        Pose {
            rotation: self.rotation,
            translation: self.translation * factor,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelPoint {
    pub u: f64,
    pub v: f64,
}

impl PixelPoint {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    pub fn distance(&self, other: &PixelPoint) -> f64 {
        (self.u - other.u).hypot(self.v - other.v)
    }
}

/// A calibrated image.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraView {
    pub intrinsics: Intrinsics,
    pub world_to_camera: Pose,
    pub width: usize,
    pub height: usize,
    pub image: Image,
}

impl CameraView {
    pub fn new(intrinsics: Intrinsics, world_to_camera: Pose, image: Image) -> Result<Self> {
        let (width, height) = (image.width(), image.height());
        if width < MIN_EXTENT || height < MIN_EXTENT {
            return Err(invalid(format!(
                "views must be at least {MIN_EXTENT}x{MIN_EXTENT}, got {width}x{height}"
            )));
        }
        Ok(Self {
            intrinsics,
            world_to_camera,
            width,
            height,
            image,
        })
    }

    /// A view with a uniform grey image, for pure-geometry use.
    pub fn blank(intrinsics: Intrinsics, world_to_camera: Pose, width: usize, height: usize) -> Result<Self> {
        Self::new(intrinsics, world_to_camera, Image::filled(width, height, 0.5))
    }

    pub fn center(&self) -> Vector3<f64> {
        self.world_to_camera.center()
    }

    /// World point seen at pixel `p` with depth `d`.
    pub fn backproject(&self, p: PixelPoint, depth: f64) -> Vector3<f64> {
        self.world_to_camera
            .inverse()
            .apply(&(self.intrinsics.unproject(p) * depth))
    }

    /// Pixel and depth of a world point; `None` if behind the camera.
    pub fn project(&self, x: &Vector3<f64>) -> Option<(PixelPoint, f64)> {
        let c = self.world_to_camera.apply(x);
        (c.z > 0.0).then(|| (self.intrinsics.project(&c), c.z))
    }
}

/// Maps reference-camera coordinates to source-camera coordinates.
pub fn relative_pose(reference: &CameraView, source: &CameraView) -> Pose {
    source
        .world_to_camera
        .compose(&reference.world_to_camera.inverse())
}

/// Warps a reference pixel at depth `d_r` into the source view, returning
/// the source pixel and its depth there.
pub fn position_from_depth(
    rel: &Pose,
    k0: &Intrinsics,
    ki: &Intrinsics,
    p_r: PixelPoint,
    d_r: f64,
) -> Result<(PixelPoint, f64)> {
    if !(d_r > 0.0 && d_r.is_finite()) {
        return Err(invalid(format!("reference depth must be positive, got {d_r}")));
    }
    let x = rel.rotation() * k0.unproject(p_r) * d_r + rel.translation();
    if x.z <= 0.0 {
        return Err(Error::PointBehindCamera { depth: x.z });
    }
    Ok((ki.project(&x), x.z))
}

/// Which pixel axis of the source point drives the depth solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    X,
    Y,
}

/// Below this magnitude a branch denominator counts as zero.
pub const DENOMINATOR_EPS: f64 = 1e-12;

/// Branch denominators `(p_sx p_rz - p_sz p_rx, p_sy p_rz - p_sz p_ry)` and
/// the numerators of the reference depth on both branches.
pub(crate) fn branch_terms(
    rel: &Pose,
    k0: &Intrinsics,
    ki: &Intrinsics,
    p_r: PixelPoint,
    p_s: PixelPoint,
) -> ([f64; 2], [f64; 2], Vector3<f64>, Vector3<f64>) {
    let pr = rel.rotation() * k0.unproject(p_r);
    let ps = ki.unproject(p_s);
    let t = rel.translation();
    let den = [ps.x * pr.z - ps.z * pr.x, ps.y * pr.z - ps.z * pr.y];
    let num = [t.x * ps.z - t.z * ps.x, t.y * ps.z - t.z * ps.y];
    (den, num, pr, ps)
}

/// Reference and source depths of the correspondence `p_r <-> p_s`, solved
/// from the chosen pixel axis of the warp constraint.
pub fn depth_from_position(
    rel: &Pose,
    k0: &Intrinsics,
    ki: &Intrinsics,
    p_r: PixelPoint,
    p_s: PixelPoint,
    branch: Branch,
) -> Result<(f64, f64)> {
    let (den, num, pr, _) = branch_terms(rel, k0, ki, p_r, p_s);
    if den[0].abs() < DENOMINATOR_EPS && den[1].abs() < DENOMINATOR_EPS {
        return Err(degenerate("source point at the vanishing point of the reference ray"));
    }
    if num[0].abs() < DENOMINATOR_EPS && num[1].abs() < DENOMINATOR_EPS {
        return Err(degenerate("source point at the epipole"));
    }
    let t = rel.translation();
    let k = match branch {
        Branch::X => 0,
        Branch::Y => 1,
    };
    if den[k].abs() < DENOMINATOR_EPS {
        return Err(degenerate(format!("{branch:?} branch denominator vanishes")));
    }
    let d_r = num[k] / den[k];
    let d_s = match branch {
        Branch::X => (t.x * pr.z - t.z * pr.x) / den[0],
        Branch::Y => (t.y * pr.z - t.z * pr.y) / den[1],
    };
    Ok((d_r, d_s))
}

/// Triangulated point in reference-camera coordinates.
pub fn triangulate(
    reference: &CameraView,
    source: &CameraView,
    p_r: PixelPoint,
    p_s: PixelPoint,
) -> Result<Vector3<f64>> {
    let rel = relative_pose(reference, source);
    let (k0, ki) = (&reference.intrinsics, &source.intrinsics);
    let (den, _, _, _) = branch_terms(&rel, k0, ki, p_r, p_s);
    let branch = if den[0].abs() >= den[1].abs() {
        Branch::X
    } else {
        Branch::Y
    };
    let (d_r, d_s) = depth_from_position(&rel, k0, ki, p_r, p_s, branch)?;
    if d_r <= 0.0 {
        return Err(Error::PointBehindCamera { depth: d_r });
    }
    if d_s <= 0.0 {
        return Err(Error::PointBehindCamera { depth: d_s });
    }
    Ok(k0.unproject(p_r) * d_r)
}
