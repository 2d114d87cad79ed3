//! Polyhedral tag arrays and their 6-DoF pose from corner observations.
//!
//! Poses are handle-to-camera: a handle-frame point `X` lands at
//! `R X + t` in the camera frame (x right, y down, z forward).

use crate::pose::{pose_error, Pose6D};
use nalgebra::{
    DMatrix, DVector, Matrix3, Matrix6, Point2, Point3, Rotation3, SymmetricEigen, UnitQuaternion, Vector3, Vector6,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MarkerError {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("point behind camera")]
    BehindCamera,
    #[error("no tag visible")]
    NoVisibleTags,
    #[error("insufficient observations: {0}")]
    InsufficientObservations(String),
    #[error("pose solve diverged")]
    DivergedSolve,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Default for CameraIntrinsics {
    /// 640×360 with a 65° horizontal field of view.
    fn default() -> Self {
        Self {
            fx: 500.0,
            fy: 500.0,
            cx: 320.0,
            cy: 180.0,
            width: 640,
            height: 360,
        }
    }
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<(), MarkerError> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx >= 0.0
            && self.cx < f64::from(self.width)
            && self.cy >= 0.0
            && self.cy < f64::from(self.height);
        if ok {
            Ok(())
        } else {
            Err(MarkerError::InvalidCamera(format!("{self:?}")))
        }
    }

    fn in_bounds(&self, p: &Point2<f64>) -> bool {
        p.x >= 0.0 && p.y >= 0.0 && p.x < f64::from(self.width) && p.y < f64::from(self.height)
    }

    fn project(&self, p: &Point3<f64>) -> Point2<f64> {
        Point2::new(self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }
}

/// Ideal pinhole projection of camera-frame points.
pub fn project_points(points: &[Point3<f64>], cam: &CameraIntrinsics) -> Result<Vec<Point2<f64>>, MarkerError> {
    points
        .iter()
        .map(|p| {
            if p.z > 0.0 {
                Ok(cam.project(p))
            } else {
                Err(MarkerError::BehindCamera)
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Cube6,
    Poly26,
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Shape::Cube6 => "cube6",
            Shape::Poly26 => "poly26",
        })
    }
}

impl FromStr for Shape {
    type Err = MarkerError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cube6" => Ok(Shape::Cube6),
            "poly26" => Ok(Shape::Poly26),
            other => Err(MarkerError::InvalidShape(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tag {
    pub id: u32,
    /// Counter-clockwise seen from outside the handle.
    pub corners: [Point3<f64>; 4],
    pub center: Point3<f64>,
    pub normal: Vector3<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkerGeometry {
    pub shape: Shape,
    pub circumradius: f64,
    pub tags: Vec<Tag>,
}

impl MarkerGeometry {
    pub fn tag(&self, id: u32) -> Option<&Tag> {
        self.tags.iter().find(|t| t.id == id)
    }

    /// Plain-text corner table: one line per corner,
    /// `tag corner x y z nx ny nz` in metres.
    pub fn corner_table(&self) -> String {
        let mut out = format!(
            "# shape={} circumradius={}\n# tag corner x y z nx ny nz\n",
            self.shape, self.circumradius
        );
        for t in &self.tags {
            for (k, c) in t.corners.iter().enumerate() {
                out.push_str(&format!(
                    "{} {} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9}\n",
                    t.id, k, c.x, c.y, c.z, t.normal.x, t.normal.y, t.normal.z
                ));
            }
        }
        out
    }
}

/// Unit normals of the square faces: the 6 axes, plus for the
/// rhombicuboctahedron the 12 edge directions of the cube.
fn square_face_normals(shape: Shape) -> Vec<Vector3<f64>> {
    let mut n: Vec<Vector3<f64>> = Vec::new();
    for a in 0..3 {
        for s in [1.0, -1.0] {
            let mut v = Vector3::zeros();
            v[a] = s;
            n.push(v);
        }
    }
    if shape == Shape::Poly26 {
        for (a, b) in [(0, 1), (0, 2), (1, 2)] {
            for (sa, sb) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
                let mut v = Vector3::zeros();
                v[a] = sa;
                v[b] = sb;
                n.push(v.normalize());
            }
        }
    }
    n
}

/// Vertices of the unscaled solid.
fn vertices(shape: Shape) -> Vec<Vector3<f64>> {
    let big = 1.0 + std::f64::consts::SQRT_2;
    let mut out = Vec::new();
    for sx in [1.0, -1.0] {
        for sy in [1.0, -1.0] {
            for sz in [1.0, -1.0] {
                match shape {
                    Shape::Cube6 => out.push(Vector3::new(sx, sy, sz)),
                    Shape::Poly26 => {
                        out.push(Vector3::new(sx * big, sy, sz));
                        out.push(Vector3::new(sx, sy * big, sz));
                        out.push(Vector3::new(sx, sy, sz * big));
                    }
                }
            }
        }
    }
    out
}

/// Build a tagged handle. Faces are found from the vertex set: for each
/// square-face normal the supporting vertices give the face centre and
/// half-side, and the tag is a concentric square scaled by `tag_fill`.
pub fn build_polyhedron(shape: Shape, circumradius: f64, tag_fill: f64) -> Result<MarkerGeometry, MarkerError> {
    if !(circumradius > 0.0 && circumradius.is_finite()) {
        return Err(MarkerError::InvalidShape(format!("circumradius {circumradius}")));
    }
    if !(tag_fill > 0.0 && tag_fill <= 1.0) {
        return Err(MarkerError::InvalidShape(format!("tag_fill {tag_fill}")));
    }
    let verts = vertices(shape);
    let scale = circumradius / verts[0].norm();
    let mut tags = Vec::new();
    for (id, n) in square_face_normals(shape).into_iter().enumerate() {
        let top = verts.iter().map(|v| v.dot(&n)).fold(f64::MIN, f64::max);
        let face: Vec<&Vector3<f64>> = verts.iter().filter(|v| (v.dot(&n) - top).abs() < 1e-9).collect();
        debug_assert_eq!(face.len(), 4);
        let center = face.iter().copied().sum::<Vector3<f64>>() / 4.0;
        // In-plane axes along the face edges, u × v = n.
        let reference = [Vector3::z(), Vector3::x()]
            .into_iter()
            .find(|r| r.dot(&n).abs() < 0.9)
            .unwrap_or_else(Vector3::y);
        let u = (reference - n * reference.dot(&n)).normalize();
        let v = n.cross(&u);
        let half_side = face.iter().map(|p| (*p - center).dot(&u).abs()).fold(0.0, f64::max);
        let h = tag_fill * half_side;
        let corner = |a: f64, b: f64| Point3::from((center + (u * a + v * b) * h) * scale);
        tags.push(Tag {
            id: id as u32,
            corners: [
                corner(-1.0, -1.0),
                corner(1.0, -1.0),
                corner(1.0, 1.0),
                corner(-1.0, 1.0),
            ],
            center: Point3::from(center * scale),
            normal: n,
        });
    }
    Ok(MarkerGeometry {
        shape,
        circumradius,
        tags,
    })
}

/// Minimum, over `n_dirs` seeded uniform view directions (at infinity), of
/// the number of tags whose plane is seen at more than `min_view_angle_deg`.
pub fn visibility_audit(geom: &MarkerGeometry, n_dirs: usize, min_view_angle_deg: f64, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = min_view_angle_deg.to_radians().sin();
    (0..n_dirs)
        .map(|_| {
            let d = loop {
                let v = Vector3::<f64>::from_fn(|_, _| StandardNormal.sample(&mut rng));
                if v.norm() > 1e-9 {
                    break v.normalize();
                }
            };
            geom.tags.iter().filter(|t| t.normal.dot(&d) > s).count()
        })
        .min()
        .unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservedTag {
    pub id: u32,
    pub corners: [Point2<f64>; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagObservations {
    pub tags: Vec<ObservedTag>,
    pub timestamp: f64,
}

/// Render the corners a detector would report. A tag counts as visible when
/// the line of sight from its centre to the camera rises more than
/// `min_view_angle_deg` above the tag plane and all four noisy corners land
/// inside the image. Noise is drawn for every tag in order, visible or not,
/// so a fixed seed gives the same standard-normal draws at every `noise_px`.
pub fn synth_observe(
    geom: &MarkerGeometry,
    handle_pose: &Pose6D,
    cam: &CameraIntrinsics,
    noise_px: f64,
    min_view_angle_deg: f64,
    rng_seed: u64,
) -> Result<TagObservations, MarkerError> {
    if handle_pose.translation.z <= 0.0 {
        return Err(MarkerError::BehindCamera);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let s = min_view_angle_deg.to_radians().sin();
    let mut tags = Vec::new();
    for t in &geom.tags {
        let draws: [f64; 8] = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
        let c = handle_pose.transform_point(&t.center);
        let n = handle_pose.rotation * t.normal;
        if n.dot(&(-c.coords).normalize()) <= s {
            continue;
        }
        let cam_pts: Vec<Point3<f64>> = t.corners.iter().map(|p| handle_pose.transform_point(p)).collect();
        let Ok(px) = project_points(&cam_pts, cam) else {
            continue;
        };
        let corners: [Point2<f64>; 4] = std::array::from_fn(|k| {
            Point2::new(px[k].x + noise_px * draws[2 * k], px[k].y + noise_px * draws[2 * k + 1])
        });
        if corners.iter().all(|p| cam.in_bounds(p)) {
            tags.push(ObservedTag { id: t.id, corners });
        }
    }
    if tags.is_empty() {
        return Err(MarkerError::NoVisibleTags);
    }
    Ok(TagObservations { tags, timestamp: 0.0 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseEstimate {
    pub pose: Pose6D,
    /// RMS corner distance (px).
    pub rms_reprojection: f64,
    pub n_tags_used: u32,
    pub ambiguity_flag: bool,
    pub converged: bool,
    /// Capture time (s) of the observations.
    #[serde(default)]
    pub timestamp: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub object: Point3<f64>,
    pub pixel: Point2<f64>,
}

/// Pair observed corners with handle-frame corners; unknown ids are skipped.
pub fn correspondences(obs: &TagObservations, geom: &MarkerGeometry) -> (Vec<Correspondence>, u32) {
    let mut out = Vec::new();
    let mut n_tags = 0;
    for o in &obs.tags {
        if let Some(t) = geom.tag(o.id) {
            n_tags += 1;
            out.extend(t.corners.iter().zip(&o.corners).map(|(object, pixel)| Correspondence {
                object: *object,
                pixel: *pixel,
            }));
        }
    }
    (out, n_tags)
}

/// Stacked `(u, v)` residuals, or `None` if a point falls behind the camera.
pub fn reprojection_residuals(pose: &Pose6D, corr: &[Correspondence], cam: &CameraIntrinsics) -> Option<DVector<f64>> {
    let mut r = DVector::zeros(2 * corr.len());
    for (i, c) in corr.iter().enumerate() {
        let p = pose.transform_point(&c.object);
        if p.z <= 0.0 {
            return None;
        }
        let q = cam.project(&p);
        r[2 * i] = q.x - c.pixel.x;
        r[2 * i + 1] = q.y - c.pixel.y;
    }
    Some(r)
}

/// Pose increment used by the solver: `R ← exp(ω) R`, `t ← t + δt`,
/// parameters ordered `(ω, δt)`.
pub fn perturb(pose: &Pose6D, delta: &Vector6<f64>) -> Pose6D {
    let w = Vector3::new(delta[0], delta[1], delta[2]);
    let dt = Vector3::new(delta[3], delta[4], delta[5]);
    Pose6D::new(
        UnitQuaternion::from_scaled_axis(w) * pose.rotation,
        pose.translation + dt,
    )
}

/// Analytic Jacobian of [`reprojection_residuals`] with respect to the
/// [`perturb`] parameters at zero.
pub fn reprojection_jacobian(pose: &Pose6D, corr: &[Correspondence], cam: &CameraIntrinsics) -> DMatrix<f64> {
    let mut j = DMatrix::zeros(2 * corr.len(), 6);
    for (i, c) in corr.iter().enumerate() {
        let rx = pose.rotation * c.object.coords;
        let p = rx + pose.translation;
        let iz = 1.0 / p.z;
        let du = Vector3::new(cam.fx * iz, 0.0, -cam.fx * p.x * iz * iz);
        let dv = Vector3::new(0.0, cam.fy * iz, -cam.fy * p.y * iz * iz);
        // d(exp(ω) Rx)/dω = -[Rx]×, so row · (-[Rx]×) = (Rx × row)ᵀ.
        for (k, d) in [du, dv].iter().enumerate() {
            let rot = rx.cross(d);
            let row = 2 * i + k;
            for a in 0..3 {
                j[(row, a)] = rot[a];
                j[(row, 3 + a)] = d[a];
            }
        }
    }
    j
}

#[derive(Debug, Clone, Copy)]
struct Refined {
    pose: Pose6D,
    cost: f64,
    converged: bool,
}

const LM_MAX_ITERS: usize = 100;
const LM_STEP_TOL: f64 = 1e-10;

/// Levenberg–Marquardt on the summed squared reprojection error. Damping
/// starts at 1e-3, grows ×10 on a rejected step and shrinks ÷10 on an
/// accepted one.
fn refine(init: Pose6D, corr: &[Correspondence], cam: &CameraIntrinsics) -> Option<Refined> {
    let mut pose = init;
    let mut cost = reprojection_residuals(&pose, corr, cam)?.norm_squared();
    let mut lambda = 1e-3;
    let mut converged = false;
    for _ in 0..LM_MAX_ITERS {
        let r = reprojection_residuals(&pose, corr, cam)?;
        let jac = reprojection_jacobian(&pose, corr, cam);
        let jt = jac.transpose();
        let h: Matrix6<f64> = (&jt * &jac).fixed_view::<6, 6>(0, 0).into_owned();
        let g: Vector6<f64> = (&jt * &r).fixed_rows::<6>(0).into_owned();
        let mut a = h;
        for k in 0..6 {
            a[(k, k)] += lambda * h[(k, k)].max(1e-12);
        }
        let Some(step) = a.lu().solve(&(-g)) else {
            lambda *= 10.0;
            continue;
        };
        let cand = perturb(&pose, &step);
        match reprojection_residuals(&cand, corr, cam).map(|r| r.norm_squared()) {
            Some(c) if c < cost => {
                pose = cand;
                cost = c;
                lambda = (lambda / 10.0).max(1e-12);
            }
            _ => lambda *= 10.0,
        }
        if step.norm() < LM_STEP_TOL {
            converged = true;
            break;
        }
        if lambda > 1e16 {
            break;
        }
    }
    Some(Refined { pose, cost, converged })
}

fn normalized(c: &Correspondence, cam: &CameraIntrinsics) -> (f64, f64) {
    ((c.pixel.x - cam.cx) / cam.fx, (c.pixel.y - cam.cy) / cam.fy)
}

/// Eigenvector of the smallest eigenvalue of `AᵀA`.
fn null_vector(a: &DMatrix<f64>) -> DVector<f64> {
    let e = SymmetricEigen::new(a.transpose() * a);
    let k = e.eigenvalues.imin();
    e.eigenvectors.column(k).into_owned()
}

fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut d = Matrix3::identity();
    d[(2, 2)] = (u * vt).determinant().signum();
    u * d * vt
}

fn pose_from_rt(r: &Matrix3<f64>, t: Vector3<f64>) -> Pose6D {
    Pose6D::new(
        UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*r)),
        t,
    )
}

/// Centroid and scale normalising a point set to unit RMS radius.
fn centroid_scale(pts: &[Vector3<f64>]) -> (Vector3<f64>, f64) {
    let c = pts.iter().sum::<Vector3<f64>>() / pts.len() as f64;
    let rms = (pts.iter().map(|p| (p - c).norm_squared()).sum::<f64>() / pts.len() as f64).sqrt();
    (c, if rms > 0.0 { rms } else { 1.0 })
}

/// Linear camera-matrix estimate from non-coplanar points.
fn dlt_init(corr: &[Correspondence], cam: &CameraIntrinsics) -> Option<Pose6D> {
    if corr.len() < 6 {
        return None;
    }
    let pts: Vec<Vector3<f64>> = corr.iter().map(|c| c.object.coords).collect();
    let (c0, s) = centroid_scale(&pts);
    let mut a = DMatrix::zeros(2 * corr.len(), 12);
    for (i, c) in corr.iter().enumerate() {
        let x = (c.object.coords - c0) / s;
        let xh = [x.x, x.y, x.z, 1.0];
        let (u, v) = normalized(c, cam);
        for k in 0..4 {
            a[(2 * i, k)] = xh[k];
            a[(2 * i, 8 + k)] = -u * xh[k];
            a[(2 * i + 1, 4 + k)] = xh[k];
            a[(2 * i + 1, 8 + k)] = -v * xh[k];
        }
    }
    let p = null_vector(&a);
    // [M | p4] acts on ((X - c0) / s, 1), so in handle coordinates the
    // camera matrix is [M / s | p4 - M c0 / s].
    let m = Matrix3::new(p[0], p[1], p[2], p[4], p[5], p[6], p[8], p[9], p[10]) / s;
    let b = Vector3::new(p[3], p[7], p[11]) - m * c0;
    let det = m.determinant();
    if !det.is_finite() || det.abs() < 1e-300 {
        return None;
    }
    let lambda = det.signum() * det.abs().cbrt();
    let r = nearest_rotation(&(m / lambda));
    let t = b / lambda;
    Some(pose_from_rt(&r, t))
}

/// Plane frame of a coplanar point set: rows of `basis` are (u, v, n).
fn plane_frame(pts: &[Vector3<f64>]) -> (Vector3<f64>, Matrix3<f64>) {
    let c = pts.iter().sum::<Vector3<f64>>() / pts.len() as f64;
    let mut cov = Matrix3::zeros();
    for p in pts {
        let d = p - c;
        cov += d * d.transpose();
    }
    let e = SymmetricEigen::new(cov);
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&i, &j| e.eigenvalues[j].total_cmp(&e.eigenvalues[i]));
    let u: Vector3<f64> = e.eigenvectors.column(idx[0]).into_owned();
    let v: Vector3<f64> = e.eigenvectors.column(idx[1]).into_owned();
    let n = u.cross(&v);
    (c, Matrix3::from_rows(&[u.transpose(), v.transpose(), n.transpose()]))
}

/// Homography-based pose for coplanar points.
fn planar_init(corr: &[Correspondence], cam: &CameraIntrinsics) -> Option<Pose6D> {
    let pts: Vec<Vector3<f64>> = corr.iter().map(|c| c.object.coords).collect();
    let (c0, basis) = plane_frame(&pts);
    let ab: Vec<(f64, f64)> = pts
        .iter()
        .map(|p| {
            let q = basis * (p - c0);
            (q.x, q.y)
        })
        .collect();
    let s = (ab.iter().map(|(a, b)| a * a + b * b).sum::<f64>() / ab.len() as f64)
        .sqrt()
        .max(1e-12);
    let mut m = DMatrix::zeros(2 * corr.len(), 9);
    for (i, (c, (a, b))) in corr.iter().zip(&ab).enumerate() {
        let (x, y) = normalized(c, cam);
        let h = [a / s, b / s, 1.0];
        for k in 0..3 {
            m[(2 * i, k)] = h[k];
            m[(2 * i, 6 + k)] = -x * h[k];
            m[(2 * i + 1, 3 + k)] = h[k];
            m[(2 * i + 1, 6 + k)] = -y * h[k];
        }
    }
    let h = null_vector(&m);
    let mut hm = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    // Undo the (a, b) scaling: columns 0 and 1 act on a/s and b/s.
    hm.column_mut(0).unscale_mut(s);
    hm.column_mut(1).unscale_mut(s);
    if hm[(2, 2)] < 0.0 {
        hm = -hm;
    }
    let h1: Vector3<f64> = hm.column(0).into_owned();
    let h2: Vector3<f64> = hm.column(1).into_owned();
    let lambda = 0.5 * (h1.norm() + h2.norm());
    if !(lambda > 0.0 && lambda.is_finite()) {
        return None;
    }
    let (r1, r2) = (h1 / lambda, h2 / lambda);
    let r_plane = nearest_rotation(&Matrix3::from_columns(&[r1, r2, r1.cross(&r2)]));
    let t_plane: Vector3<f64> = hm.column(2).into_owned() / lambda;
    // Camera point = R_plane (basis (X - c0)) + t_plane.
    let r = r_plane * basis;
    Some(pose_from_rt(&r, t_plane - r * c0))
}

/// The mirror-image planar solution: tilt the plane normal to its
/// reflection about the line of sight through the plane centre.
fn planar_flip(pose: &Pose6D, corr: &[Correspondence]) -> Pose6D {
    let pts: Vec<Vector3<f64>> = corr.iter().map(|c| c.object.coords).collect();
    let (c0, basis) = plane_frame(&pts);
    let n_obj: Vector3<f64> = basis.row(2).transpose();
    let center = pose.transform_point(&Point3::from(c0)).coords;
    let d = center.normalize();
    let n = pose.rotation * n_obj;
    let n_ref = d * (2.0 * n.dot(&d)) - n;
    let q = UnitQuaternion::rotation_between(&n, &n_ref).unwrap_or_else(UnitQuaternion::identity);
    // Rotate about the plane centre so it stays put.
    let rot = q * pose.rotation;
    Pose6D::new(rot, center - rot * c0)
}

fn is_coplanar(corr: &[Correspondence]) -> bool {
    let pts: Vec<Vector3<f64>> = corr.iter().map(|c| c.object.coords).collect();
    let c = pts.iter().sum::<Vector3<f64>>() / pts.len() as f64;
    let mut cov = Matrix3::zeros();
    for p in &pts {
        let d = p - c;
        cov += d * d.transpose();
    }
    let e = SymmetricEigen::new(cov).eigenvalues;
    e.min() <= 1e-12 * e.max()
}

/// Ambiguity flag threshold on the cost ratio of the two planar candidates.
pub const AMBIGUITY_RATIO: f64 = 2.0;
/// Candidates closer than this (rad) are the same minimum.
const SAME_MINIMUM: f64 = 1e-6;

/// Estimate the handle-to-camera pose from tag corners.
///
/// Non-coplanar corners: refine from `prior` and from a linear estimate and
/// keep the better. Coplanar corners: refine the homography pose (or the
/// prior) and its mirror image, keep the cheaper, and flag ambiguity when
/// the two are distinct minima whose costs differ by less than 2×.
pub fn solve_pose(
    obs: &TagObservations,
    geom: &MarkerGeometry,
    cam: &CameraIntrinsics,
    prior: Option<&Pose6D>,
) -> Result<PoseEstimate, MarkerError> {
    let (corr, n_tags) = correspondences(obs, geom);
    if corr.len() < 4 {
        return Err(MarkerError::InsufficientObservations(format!(
            "{} known corners",
            corr.len()
        )));
    }
    let coplanar = is_coplanar(&corr);
    let mut cands: Vec<Refined> = Vec::new();
    let mut ambiguity_flag = false;
    if coplanar {
        let first = prior
            .copied()
            .or_else(|| planar_init(&corr, cam))
            .ok_or(MarkerError::DivergedSolve)?;
        if let Some(a) = refine(first, &corr, cam) {
            let flip = planar_flip(&a.pose, &corr);
            if let Some(b) = refine(flip, &corr, cam) {
                let distinct = crate::pose::rotation_angle(&a.pose.rotation, &b.pose.rotation) > SAME_MINIMUM;
                let (lo, hi) = (a.cost.min(b.cost), a.cost.max(b.cost));
                ambiguity_flag = distinct && hi < AMBIGUITY_RATIO * lo.max(f64::MIN_POSITIVE);
                cands.push(b);
            }
            cands.push(a);
        }
    } else {
        for init in [prior.copied(), dlt_init(&corr, cam)].into_iter().flatten() {
            cands.extend(refine(init, &corr, cam));
        }
    }
    let best = cands
        .into_iter()
        .filter(|c| c.pose.is_finite() && c.cost.is_finite())
        .min_by(|a, b| a.cost.total_cmp(&b.cost))
        .ok_or(MarkerError::DivergedSolve)?;
    Ok(PoseEstimate {
        pose: best.pose,
        rms_reprojection: (best.cost / corr.len() as f64).sqrt(),
        n_tags_used: n_tags,
        ambiguity_flag,
        converged: best.converged,
        timestamp: obs.timestamp,
    })
}

/// Rotating-platform benchmark setup.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub circumradius: f64,
    pub tag_fill: f64,
    pub min_view_angle_deg: f64,
    /// Camera-to-handle distance (m).
    pub distance: f64,
    pub noise_px: f64,
    pub n_rotations: u32,
    pub steps_per_rot: u32,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            circumradius: 0.05,
            tag_fill: 0.8,
            min_view_angle_deg: 15.0,
            distance: 0.5,
            noise_px: 0.0,
            n_rotations: 3,
            steps_per_rot: 120,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ErrorStats {
    pub mean_rot_deg: f64,
    pub max_rot_deg: f64,
    pub mean_trans_mm: f64,
    pub max_trans_mm: f64,
    pub ambiguity_rate: f64,
    pub n_steps: u32,
    /// Steps with no visible tag or a failed solve; excluded from the means.
    pub n_failed: u32,
}

pub const ERROR_STATS_CSV_HEADER: &str =
    "shape,sigma,mean_rot_deg,max_rot_deg,mean_trans_mm,max_trans_mm,ambiguity_rate";

impl ErrorStats {
    pub fn csv_row(&self, shape: Shape, sigma: f64) -> String {
        format!(
            "{shape},{sigma},{},{},{},{},{}",
            self.mean_rot_deg, self.max_rot_deg, self.mean_trans_mm, self.max_trans_mm, self.ambiguity_rate
        )
    }
}

/// Ground-truth handle pose at platform angle `theta`: the handle's z axis
/// points up (camera -y) and it spins about that axis at `distance`.
pub fn platform_pose(theta: f64, distance: f64) -> Pose6D {
    let upright = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(Matrix3::new(
        1.0, 0.0, 0.0, //
        0.0, 0.0, -1.0, //
        0.0, 1.0, 0.0,
    )));
    Pose6D::new(
        upright * UnitQuaternion::from_axis_angle(&Vector3::z_axis(), theta),
        Vector3::new(0.0, 0.0, distance),
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepResult {
    pub rot_deg: f64,
    pub trans_mm: f64,
    pub ambiguity_flag: bool,
}

/// One full platform rotation. The first step has no prior, later steps
/// use the previous estimate. Step `k` of rotation `r` is seeded
/// `seed + r * steps_per_rot + k`.
pub fn bench_rotation(
    geom: &MarkerGeometry,
    cam: &CameraIntrinsics,
    cfg: &BenchConfig,
    rotation: u32,
) -> Vec<Option<StepResult>> {
    let n = cfg.steps_per_rot;
    let mut prior: Option<Pose6D> = None;
    (0..n)
        .map(|k| {
            let theta = std::f64::consts::TAU * f64::from(k) / f64::from(n);
            let truth = platform_pose(theta, cfg.distance);
            let seed = cfg.seed.wrapping_add(u64::from(rotation) * u64::from(n) + u64::from(k));
            let est = synth_observe(geom, &truth, cam, cfg.noise_px, cfg.min_view_angle_deg, seed)
                .and_then(|obs| solve_pose(&obs, geom, cam, prior.as_ref()));
            match est {
                Ok(e) => {
                    prior = Some(e.pose);
                    let (rot_deg, trans_mm) = pose_error(&e.pose, &truth);
                    Some(StepResult {
                        rot_deg,
                        trans_mm,
                        ambiguity_flag: e.ambiguity_flag,
                    })
                }
                Err(_) => {
                    prior = None;
                    None
                }
            }
        })
        .collect()
}

pub fn aggregate(steps: &[Option<StepResult>]) -> ErrorStats {
    let ok: Vec<&StepResult> = steps.iter().flatten().collect();
    let n = ok.len().max(1) as f64;
    ErrorStats {
        mean_rot_deg: ok.iter().map(|s| s.rot_deg).sum::<f64>() / n,
        max_rot_deg: ok.iter().map(|s| s.rot_deg).fold(0.0, f64::max),
        mean_trans_mm: ok.iter().map(|s| s.trans_mm).sum::<f64>() / n,
        max_trans_mm: ok.iter().map(|s| s.trans_mm).fold(0.0, f64::max),
        ambiguity_rate: ok.iter().filter(|s| s.ambiguity_flag).count() as f64 / n,
        n_steps: steps.len() as u32,
        n_failed: (steps.len() - ok.len()) as u32,
    }
}

/// Rotate the handle `n_rotations` times in `steps_per_rot` increments,
/// solving at every step. Rotations are independent and may be spread over
/// `threads` workers with identical results.
pub fn rotating_platform_bench(
    shape: Shape,
    cam: &CameraIntrinsics,
    cfg: &BenchConfig,
    threads: usize,
) -> Result<ErrorStats, MarkerError> {
    if cfg.n_rotations < 1 || cfg.steps_per_rot < 1 {
        return Err(MarkerError::InsufficientObservations(
            "n_rotations and steps_per_rot must be >= 1".into(),
        ));
    }
    cam.validate()?;
    let geom = build_polyhedron(shape, cfg.circumradius, cfg.tag_fill)?;
    let rots: Vec<u32> = (0..cfg.n_rotations).collect();
    let threads = threads.clamp(1, rots.len());
    let mut per_rot: Vec<Vec<Option<StepResult>>> = vec![Vec::new(); rots.len()];
    std::thread::scope(|s| {
        let chunk = rots.len().div_ceil(threads);
        let handles: Vec<_> = rots
            .chunks(chunk)
            .map(|rs| {
                let geom = &geom;
                s.spawn(move || {
                    rs.iter()
                        .map(|&r| (r, bench_rotation(geom, cam, cfg, r)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (r, res) in h.join().expect("bench worker panicked") {
                per_rot[r as usize] = res;
            }
        }
    });
    Ok(aggregate(&per_rot.concat()))
}
