//! Pinhole camera model: intrinsics, extrinsics, projection, the weak
//! perspective approximation, Gaussian parameter perturbation, and DLT
//! triangulation (the camera-dependent lifting baseline).

use nalgebra::{DMatrix, Matrix3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{FlexError, Result};
use crate::quat::Vec3;

pub type Mat3 = [[f64; 3]; 3];
/// 3x4 projection matrix, row major.
pub type ProjMatrix = [[f64; 4]; 3];

const ROT_TOL: f64 = 1e-9;
const DIVIDE_EPS: f64 = 1e-12;

/// Focal lengths, optical center and skew, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub sk: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, sk: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(FlexError::InvalidConfig("focal lengths must be positive".into()));
        }
        Ok(Self { fx, fy, cx, cy, sk })
    }

    pub fn matrix(&self) -> Mat3 {
        [
            [self.fx, self.sk, self.cx],
            [0.0, self.fy, self.cy],
            [0.0, 0.0, 1.0],
        ]
    }

    /// Perspective projection of a point already in camera coordinates.
    pub fn project_camera_point(&self, x: Vec3) -> Result<[f64; 2]> {
        if x[2].abs() <= DIVIDE_EPS {
            return Err(FlexError::DegenerateProjection(DIVIDE_EPS));
        }
        Ok([
            (self.fx * x[0] + self.sk * x[1]) / x[2] + self.cx,
            self.fy * x[1] / x[2] + self.cy,
        ])
    }
}

/// Rotation and translation from world axes to camera axes.
#[derive(Debug, Clone, PartialEq)]
pub struct Extrinsics {
    pub r: Mat3,
    pub t: Vec3,
}

impl Extrinsics {
    pub fn new(r: Mat3, t: Vec3) -> Result<Self> {
        // R^T R = I and det(R) = +1 within tolerance
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                if (dot - expect).abs() > ROT_TOL {
                    return Err(FlexError::InvalidConfig(format!(
                        "R is not orthonormal: (R^T R)[{i}][{j}] = {dot}"
                    )));
                }
            }
        }
        if (det3(&r) - 1.0).abs() > ROT_TOL {
            return Err(FlexError::InvalidConfig(format!(
                "det(R) = {}, expected +1",
                det3(&r)
            )));
        }
        Ok(Self { r, t })
    }

    pub fn identity() -> Self {
        Self {
            r: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            t: [0.0; 3],
        }
    }

    /// Camera at `pos` looking at `target`; image x runs right, image y runs
    /// down, camera z points from `pos` toward `target`.
    pub fn look_at(pos: Vec3, target: Vec3, up: Vec3) -> Result<Self> {
        let f = normalize(sub(target, pos))
            .ok_or_else(|| FlexError::InvalidConfig("look_at: pos == target".into()))?;
        let right = normalize(cross(f, up))
            .ok_or_else(|| FlexError::InvalidConfig("look_at: forward parallel to up".into()))?;
        let down = cross(f, right);
        let r = [right, down, f];
        let t = [-dot(right, pos), -dot(down, pos), -dot(f, pos)];
        Self::new(r, t)
    }

    /// World point to camera coordinates: R x + T.
    pub fn transform(&self, x: Vec3) -> Vec3 {
        [
            dot(self.r[0], x) + self.t[0],
            dot(self.r[1], x) + self.t[1],
            dot(self.r[2], x) + self.t[2],
        ]
    }

    /// Camera point back to world coordinates: R^T (x - T).
    pub fn inverse_transform(&self, x: Vec3) -> Vec3 {
        let d = sub(x, self.t);
        [
            self.r[0][0] * d[0] + self.r[1][0] * d[1] + self.r[2][0] * d[2],
            self.r[0][1] * d[0] + self.r[1][1] * d[1] + self.r[2][1] * d[2],
            self.r[0][2] * d[0] + self.r[1][2] * d[1] + self.r[2][2] * d[2],
        ]
    }
}

fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalize(v: Vec3) -> Option<Vec3> {
    let n = dot(v, v).sqrt();
    if n < 1e-12 {
        None
    } else {
        Some([v[0] / n, v[1] / n, v[2] / n])
    }
}

fn det3(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// One camera at one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraParams {
    pub intrinsics: Intrinsics,
    pub extrinsics: Extrinsics,
}

impl CameraParams {
    pub fn projection(&self) -> ProjMatrix {
        projection_matrix(&self.intrinsics, &self.extrinsics)
    }
}

/// Per-view, per-frame camera parameters. Static rigs repeat the same
/// extrinsics for every frame.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraRig {
    pub dynamic: bool,
    /// `[view][frame]`
    cameras: Vec<Vec<CameraParams>>,
}

impl CameraRig {
    pub fn new(cameras: Vec<Vec<CameraParams>>, dynamic: bool) -> Result<Self> {
        if cameras.is_empty() || cameras[0].is_empty() {
            return Err(FlexError::InvalidConfig("rig needs >= 1 view and frame".into()));
        }
        let frames = cameras[0].len();
        if cameras.iter().any(|v| v.len() != frames) {
            return Err(FlexError::InvalidConfig("views have different frame counts".into()));
        }
        if !dynamic {
            for track in &cameras {
                if track.iter().any(|c| c.extrinsics != track[0].extrinsics) {
                    return Err(FlexError::InvalidConfig(
                        "static rig with varying extrinsics".into(),
                    ));
                }
            }
        }
        Ok(Self { dynamic, cameras })
    }

    pub fn views(&self) -> usize {
        self.cameras.len()
    }

    pub fn frames(&self) -> usize {
        self.cameras[0].len()
    }

    pub fn camera(&self, view: usize, frame: usize) -> &CameraParams {
        &self.cameras[view][frame]
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(RigJson::from(self)).expect("rig serialization cannot fail")
    }

    pub fn from_json(value: &serde_json::Value) -> Result<Self> {
        let doc: RigJson = serde_json::from_value(value.clone())?;
        doc.try_into()
    }
}

#[derive(Serialize, Deserialize)]
struct RigJson {
    views: Vec<ViewJson>,
}

#[derive(Serialize, Deserialize)]
struct ViewJson {
    frames: Vec<FrameJson>,
}

#[derive(Serialize, Deserialize)]
struct FrameJson {
    #[serde(rename = "K")]
    k: Intrinsics,
    #[serde(rename = "R")]
    r: Vec<f64>,
    #[serde(rename = "T")]
    t: Vec3,
}

impl From<&CameraRig> for RigJson {
    fn from(rig: &CameraRig) -> Self {
        RigJson {
            views: rig
                .cameras
                .iter()
                .map(|track| ViewJson {
                    frames: track
                        .iter()
                        .map(|c| FrameJson {
                            k: c.intrinsics,
                            r: c.extrinsics.r.iter().flatten().copied().collect(),
                            t: c.extrinsics.t,
                        })
                        .collect(),
                })
                .collect(),
        }
    }
}

impl TryFrom<RigJson> for CameraRig {
    type Error = FlexError;

    fn try_from(doc: RigJson) -> Result<Self> {
        let mut cameras = Vec::new();
        for view in doc.views {
            let mut track = Vec::new();
            for f in view.frames {
                if f.r.len() != 9 {
                    return Err(FlexError::InvalidConfig("R must have 9 entries".into()));
                }
                let r = [
                    [f.r[0], f.r[1], f.r[2]],
                    [f.r[3], f.r[4], f.r[5]],
                    [f.r[6], f.r[7], f.r[8]],
                ];
                track.push(CameraParams {
                    intrinsics: Intrinsics::new(f.k.fx, f.k.fy, f.k.cx, f.k.cy, f.k.sk)?,
                    extrinsics: Extrinsics::new(r, f.t)?,
                });
            }
            cameras.push(track);
        }
        let dynamic = cameras
            .iter()
            .any(|track| track.iter().any(|c| c.extrinsics != track[0].extrinsics));
        Self::new(cameras, dynamic)
    }
}

/// P = K [R | T].
pub fn projection_matrix(k: &Intrinsics, e: &Extrinsics) -> ProjMatrix {
    let km = k.matrix();
    let mut p = [[0.0; 4]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for l in 0..3 {
                p[i][j] += km[i][l] * e.r[l][j];
            }
        }
        for l in 0..3 {
            p[i][3] += km[i][l] * e.t[l];
        }
    }
    p
}

/// Perspective divide of P (x, 1).
pub fn project(p: &ProjMatrix, x: Vec3) -> Result<[f64; 2]> {
    let h: Vec<f64> = (0..3)
        .map(|i| p[i][0] * x[0] + p[i][1] * x[1] + p[i][2] * x[2] + p[i][3])
        .collect();
    if h[2].abs() <= DIVIDE_EPS {
        return Err(FlexError::DegenerateProjection(DIVIDE_EPS));
    }
    Ok([h[0] / h[2], h[1] / h[2]])
}

/// Weak perspective: every joint of a frame shares the reference depth of
/// the root, so the projection is linear in the point.
pub fn weak_project(x: Vec3, f: f64, c: [f64; 2], z_ref: f64) -> Result<[f64; 2]> {
    if z_ref <= 0.0 {
        return Err(FlexError::InvalidConfig(format!(
            "weak perspective reference depth must be positive, got {z_ref}"
        )));
    }
    Ok([f * x[0] / z_ref + c[0], f * x[1] / z_ref + c[1]])
}

/// Sample p~ ~ N(p, (sigma_frac * p)^2). sigma_frac = 0 returns p unchanged.
pub fn perturb<R: Rng>(value: f64, sigma_frac: f64, rng: &mut R) -> f64 {
    if sigma_frac == 0.0 {
        return value;
    }
    let std = (sigma_frac * value).abs();
    if std == 0.0 {
        return value;
    }
    Normal::new(value, std)
        .expect("std is finite and nonnegative")
        .sample(rng)
}

pub fn perturb_intrinsics<R: Rng>(k: &Intrinsics, sigma_frac: f64, rng: &mut R) -> Intrinsics {
    Intrinsics {
        fx: perturb(k.fx, sigma_frac, rng),
        fy: perturb(k.fy, sigma_frac, rng),
        cx: perturb(k.cx, sigma_frac, rng),
        cy: perturb(k.cy, sigma_frac, rng),
        sk: perturb(k.sk, sigma_frac, rng),
    }
}

/// Perturb every scalar of R and T independently, then snap R back to the
/// nearest rotation (polar decomposition).
pub fn perturb_extrinsics<R: Rng>(e: &Extrinsics, sigma_frac: f64, rng: &mut R) -> Extrinsics {
    let mut m = e.r;
    for row in m.iter_mut() {
        for v in row.iter_mut() {
            *v = perturb(*v, sigma_frac, rng);
        }
    }
    let r = nearest_rotation(&m);
    let t = [
        perturb(e.t[0], sigma_frac, rng),
        perturb(e.t[1], sigma_frac, rng),
        perturb(e.t[2], sigma_frac, rng),
    ];
    Extrinsics::new(r, t).expect("polar decomposition yields a rotation")
}

pub fn perturb_rig<R: Rng>(rig: &CameraRig, sigma_frac: f64, rng: &mut R) -> CameraRig {
    let cameras = rig
        .cameras
        .iter()
        .map(|track| {
            track
                .iter()
                .map(|c| CameraParams {
                    intrinsics: perturb_intrinsics(&c.intrinsics, sigma_frac, rng),
                    extrinsics: perturb_extrinsics(&c.extrinsics, sigma_frac, rng),
                })
                .collect()
        })
        .collect();
    CameraRig { dynamic: true, cameras }
}

/// Nearest rotation matrix in Frobenius norm: U diag(1, 1, det(U V^T)) V^T.
pub fn nearest_rotation(m: &Mat3) -> Mat3 {
    let nm = Matrix3::from_fn(|i, j| m[i][j]);
    let svd = nm.svd(true, true);
    let u = svd.u.expect("svd with u");
    let vt = svd.v_t.expect("svd with v_t");
    let d = (u * vt).determinant().signum();
    let fix = Matrix3::from_diagonal(&nalgebra::Vector3::new(1.0, 1.0, d));
    let r = u * fix * vt;
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = r[(i, j)];
        }
    }
    out
}

/// DLT triangulation from >= 2 calibrated observations. Builds the stacked
/// system (u P3 - P1, v P3 - P2) per view and takes the right singular vector
/// of the smallest singular value.
pub fn triangulate(observations: &[(ProjMatrix, [f64; 2])]) -> Result<Vec3> {
    if observations.len() < 2 {
        return Err(FlexError::DegenerateGeometry(format!(
            "need >= 2 observations, got {}",
            observations.len()
        )));
    }
    let n = observations.len();
    let mut a = DMatrix::<f64>::zeros(2 * n, 4);
    for (i, (p, uv)) in observations.iter().enumerate() {
        for c in 0..4 {
            a[(2 * i, c)] = uv[0] * p[2][c] - p[0][c];
            a[(2 * i + 1, c)] = uv[1] * p[2][c] - p[1][c];
        }
    }
    let svd = a.svd(false, true);
    let vt = svd.v_t.expect("svd with v_t");
    let mut order: Vec<usize> = (0..4).collect();
    order.sort_by(|&i, &j| {
        svd.singular_values[i]
            .partial_cmp(&svd.singular_values[j])
            .expect("finite singular values")
    });
    let smallest = order[0];
    let second = order[1];
    let largest = *order.last().expect("4 singular values");
    if svd.singular_values[second] <= 1e-9 * svd.singular_values[largest].max(1e-300) {
        return Err(FlexError::DegenerateGeometry(
            "rank-deficient DLT system (views coincide or are collinear with the point)".into(),
        ));
    }
    let h = vt.row(smallest);
    if h[3].abs() <= DIVIDE_EPS {
        return Err(FlexError::DegenerateGeometry("point at infinity".into()));
    }
    Ok([h[0] / h[3], h[1] / h[3], h[2] / h[3]])
}
