//! Camera model, pose parameterization, ray generation, and the weighted
//! positional encoding that drives coarse-to-fine optimization.
//!
//! Rotations use the axis-angle (logarithm) form: the direction of the
//! 3-vector is the rotation axis and its L2 norm the angle. Pose corrections
//! are plain vector additions in that space, which is valid for the small
//! deltas the optimizer produces. All math is f64; the exponential map falls
//! back to a second-order Taylor expansion below 1e-8 rad.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

pub type Vec3 = [f64; 3];
/// Row-major 3x3 matrix.
pub type Mat3 = [f64; 9];

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("pixel ({row}, {col}) outside image bounds {width}x{height}")]
    PixelOutOfBounds {
        row: f64,
        col: f64,
        width: u32,
        height: u32,
    },
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// World-to-camera pose with learnable corrections.
///
/// The refined pose used everywhere downstream is
/// `(rotation_vec + delta_rotation, translation + delta_translation)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    /// Axis-angle rotation (radians); axis = direction, angle = norm.
    pub rotation_vec: Vec3,
    /// Translation of the world-to-camera map (meters).
    pub translation: Vec3,
    /// Learnable rotation correction, initialized to zero.
    pub delta_rotation: Vec3,
    /// Learnable translation correction, initialized to zero.
    pub delta_translation: Vec3,
}

impl CameraPose {
    pub fn new(rotation_vec: Vec3, translation: Vec3) -> Self {
        Self {
            rotation_vec,
            translation,
            delta_rotation: [0.0; 3],
            delta_translation: [0.0; 3],
        }
    }

    /// Camera center in the world frame, computed from the refined pose.
    pub fn camera_center(&self) -> Vec3 {
        let (rot, trans) = refine_pose(self);
        let r = rotation_to_matrix(rot);
        let c = mat3_transpose_mul_vec(&r, &trans);
        [-c[0], -c[1], -c[2]]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Self {
        assert!(fx > 0.0 && fy > 0.0, "focal lengths must be positive");
        assert!(cx >= 0.0 && cx < width as f64, "cx out of range");
        assert!(cy >= 0.0 && cy < height as f64, "cy out of range");
        Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

/// A world-frame ray with unit direction, tagged with the pixel it came from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    /// (row, col) of the generating pixel.
    pub pixel: (u32, u32),
}

/// Progress state of the coarse-to-fine frequency filter.
///
/// `alpha` ramps from 0 to `order_l` over training; each band i contributes
/// with weight `frequency_weight(i, ..)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrequencySchedule {
    pub order_l: usize,
    pub alpha: f64,
}

impl FrequencySchedule {
    pub fn new(order_l: usize, alpha: f64) -> Self {
        assert!(order_l >= 1, "schedule needs at least one band");
        assert!(alpha >= 0.0, "alpha must be non-negative");
        Self { order_l, alpha }
    }

    /// Schedule at a training epoch: alpha = min(epoch/end_epoch, 1) * L.
    pub fn at_epoch(order_l: usize, epoch: usize, end_epoch: usize) -> Self {
        let progress = (epoch as f64 / end_epoch as f64).min(1.0);
        Self::new(order_l, progress * order_l as f64)
    }

    /// Fully saturated schedule (all bands at weight 1).
    pub fn saturated(order_l: usize) -> Self {
        Self::new(order_l, order_l as f64)
    }

    /// Encoded length for an n-vector input: identity slot + L sin/cos pairs
    /// per component.
    pub fn encoded_len(&self, n: usize) -> usize {
        (2 * self.order_l + 1) * n
    }

    pub fn weights(&self) -> Vec<f64> {
        (0..self.order_l)
            .map(|i| frequency_weight(i, self))
            .collect()
    }
}

/// Smooth-step coefficients of the Rodrigues formula:
/// `A = sin(theta)/theta`, `B = (1-cos(theta))/theta^2`, as functions of
/// theta^2 so the zero-angle limit stays differentiable.
pub fn rodrigues_coeffs(theta_sq: f64) -> (f64, f64) {
    if theta_sq < 1e-16 {
        // theta < 1e-8 rad: second-order Taylor expansion
        let a = theta_sq * (-1.0 / 6.0) + (theta_sq * theta_sq) * (1.0 / 120.0) + 1.0;
        let b = theta_sq * (-1.0 / 24.0) + (theta_sq * theta_sq) * (1.0 / 720.0) + 0.5;
        (a, b)
    } else {
        let theta = theta_sq.sqrt();
        let a = theta.sin() / theta;
        let b = (-theta.cos() + 1.0) / theta_sq;
        (a, b)
    }
}

/// Row-major entries of `I + A*K + B*K^2` with `K = skew(w)`.
///
/// Shared by the plain path and the gradient tape so both produce
/// bit-identical rotations.
pub fn rotation_entries(a: f64, b: f64, wx: f64, wy: f64, wz: f64) -> Mat3 {
    let xx = wx * wx;
    let yy = wy * wy;
    let zz = wz * wz;
    let xy = wx * wy;
    let xz = wx * wz;
    let yz = wy * wz;
    [
        b * (-(yy + zz)) + 1.0,
        -(a * wz) + b * xy,
        a * wy + b * xz,
        a * wz + b * xy,
        b * (-(xx + zz)) + 1.0,
        -(a * wx) + b * yz,
        -(a * wy) + b * xz,
        a * wx + b * yz,
        b * (-(xx + yy)) + 1.0,
    ]
}

/// Rodrigues exponential map from axis-angle to a rotation matrix.
pub fn rotation_to_matrix(rotation_vec: Vec3) -> Mat3 {
    let [wx, wy, wz] = rotation_vec;
    let theta_sq = wx * wx + wy * wy + wz * wz;
    let (a, b) = rodrigues_coeffs(theta_sq);
    rotation_entries(a, b, wx, wy, wz)
}

pub fn mat3_mul_vec(m: &Mat3, v: &Vec3) -> Vec3 {
    // accumulates from zero, matching the generic matvec kernel bit-for-bit
    let mut out = [0.0; 3];
    for (r, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for c in 0..3 {
            acc += m[r * 3 + c] * v[c];
        }
        *o = acc;
    }
    out
}

pub fn mat3_transpose(m: &Mat3) -> Mat3 {
    [m[0], m[3], m[6], m[1], m[4], m[7], m[2], m[5], m[8]]
}

pub fn mat3_transpose_mul_vec(m: &Mat3, v: &Vec3) -> Vec3 {
    let t = mat3_transpose(m);
    mat3_mul_vec(&t, v)
}

pub fn dot3(a: &Vec3, b: &Vec3) -> f64 {
    let mut acc = 0.0;
    for i in 0..3 {
        acc += a[i] * b[i];
    }
    acc
}

pub fn norm3(v: &Vec3) -> f64 {
    dot3(v, v).sqrt()
}

/// Refined pose `(R + dR, t + dt)` by element-wise vector addition.
pub fn refine_pose(pose: &CameraPose) -> (Vec3, Vec3) {
    let r = [
        pose.rotation_vec[0] + pose.delta_rotation[0],
        pose.rotation_vec[1] + pose.delta_rotation[1],
        pose.rotation_vec[2] + pose.delta_rotation[2],
    ];
    let t = [
        pose.translation[0] + pose.delta_translation[0],
        pose.translation[1] + pose.delta_translation[1],
        pose.translation[2] + pose.delta_translation[2],
    ];
    (r, t)
}

/// Camera-frame direction through pixel (row, col): the unnormalized
/// back-projection `((col-cx)/fx, (row-cy)/fy, 1)`.
pub fn pixel_backprojection(intrinsics: &CameraIntrinsics, row: f64, col: f64) -> Vec3 {
    [
        (col - intrinsics.cx) / intrinsics.fx,
        (row - intrinsics.cy) / intrinsics.fy,
        1.0,
    ]
}

/// Cast the world-frame ray through a pixel using the refined pose.
///
/// The origin is the camera center `-R'^T t'` and the direction the unit
/// back-projection of the pixel, rotated into the world frame.
pub fn generate_ray(
    intrinsics: &CameraIntrinsics,
    pose: &CameraPose,
    pixel: (u32, u32),
) -> Result<Ray, GeometryError> {
    let (row, col) = pixel;
    if row >= intrinsics.height || col >= intrinsics.width {
        return Err(GeometryError::PixelOutOfBounds {
            row: row as f64,
            col: col as f64,
            width: intrinsics.width,
            height: intrinsics.height,
        });
    }
    let (rot, trans) = refine_pose(pose);
    let r = rotation_to_matrix(rot);
    let rt = mat3_transpose(&r);
    Ok(cast_ray(intrinsics, &rt, &trans, pixel))
}

/// Ray through a pixel given a precomputed `R'^T`; lets callers amortize the
/// exponential map over a whole image.
pub fn cast_ray(
    intrinsics: &CameraIntrinsics,
    rot_transpose: &Mat3,
    trans: &Vec3,
    pixel: (u32, u32),
) -> Ray {
    let c = mat3_mul_vec(rot_transpose, trans);
    let origin = [-c[0], -c[1], -c[2]];
    let u = pixel_backprojection(intrinsics, pixel.0 as f64, pixel.1 as f64);
    let d_un = mat3_mul_vec(rot_transpose, &u);
    let inv = 1.0 / dot3(&d_un, &d_un).sqrt();
    let direction = [d_un[0] * inv, d_un[1] * inv, d_un[2] * inv];
    Ray {
        origin,
        direction,
        pixel,
    }
}

/// Weight of frequency band `i` under the coarse-to-fine schedule:
/// 0 before the band opens, a half-cosine ramp while it opens, 1 after.
pub fn frequency_weight(i: usize, schedule: &FrequencySchedule) -> f64 {
    debug_assert!(i < schedule.order_l);
    let x = schedule.alpha - i as f64;
    if x < 0.0 {
        0.0
    } else if x < 1.0 {
        (1.0 - (x * std::f64::consts::PI).cos()) / 2.0
    } else {
        1.0
    }
}

/// Weighted positional encoding.
///
/// Per input component c the output carries `[c, w_0 cos(2^0 pi c),
/// w_0 sin(2^0 pi c), ..., w_{L-1} cos(2^{L-1} pi c), w_{L-1} sin(..)]`;
/// the raw component passes through unweighted so the coarse signal
/// survives alpha = 0. Output length is (2L+1) * n.
pub fn frequency_encode(x: &[f64], schedule: &FrequencySchedule) -> Vec<f64> {
    let l = schedule.order_l;
    let weights = schedule.weights();
    let mut out = Vec::with_capacity((2 * l + 1) * x.len());
    for &c in x {
        out.push(c);
        for (i, &w) in weights.iter().enumerate() {
            let freq = (1u64 << i) as f64 * std::f64::consts::PI;
            let arg = freq * c;
            out.push(w * arg.cos());
            out.push(w * arg.sin());
        }
    }
    out
}

/// Multiplicative pose noise: each component c of the rotation vector and
/// translation becomes c * (1 + delta) with delta ~ N(0, sigma). The
/// learnable deltas stay zero.
pub fn perturb_pose(pose: &CameraPose, sigma: f64, rng: &mut ChaCha8Rng) -> CameraPose {
    assert!(sigma >= 0.0, "noise level must be non-negative");
    if sigma == 0.0 {
        return CameraPose::new(pose.rotation_vec, pose.translation);
    }
    let normal = Normal::new(0.0, sigma).expect("valid normal");
    let mut scale = |c: f64| c * (1.0 + normal.sample(rng));
    let r = [
        scale(pose.rotation_vec[0]),
        scale(pose.rotation_vec[1]),
        scale(pose.rotation_vec[2]),
    ];
    let t = [
        scale(pose.translation[0]),
        scale(pose.translation[1]),
        scale(pose.translation[2]),
    ];
    CameraPose::new(r, t)
}

/// Convenience wrapper seeding its own RNG.
pub fn perturb_pose_seeded(pose: &CameraPose, sigma: f64, rng_seed: u64) -> CameraPose {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    perturb_pose(pose, sigma, &mut rng)
}

// ---------------------------------------------------------------------------
// Pose / intrinsics text formats
//
// Pose files: one pose per line, `frame_id rx ry rz tx ty tz`.
// Intrinsics: a single line `fx fy cx cy width height`.
// ---------------------------------------------------------------------------

pub fn format_poses(poses: &[(usize, CameraPose)]) -> String {
    let mut s = String::new();
    for (frame_id, p) in poses {
        let _ = writeln!(
            s,
            "{} {:.17e} {:.17e} {:.17e} {:.17e} {:.17e} {:.17e}",
            frame_id,
            p.rotation_vec[0],
            p.rotation_vec[1],
            p.rotation_vec[2],
            p.translation[0],
            p.translation[1],
            p.translation[2],
        );
    }
    s
}

pub fn save_poses(path: &Path, poses: &[(usize, CameraPose)]) -> Result<(), GeometryError> {
    std::fs::write(path, format_poses(poses)).map_err(|source| GeometryError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn parse_poses(text: &str, path: &str) -> Result<Vec<(usize, CameraPose)>, GeometryError> {
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 7 {
            return Err(GeometryError::Parse {
                path: path.to_string(),
                line: line_no,
                msg: format!("expected 7 fields, found {}", fields.len()),
            });
        }
        let frame_id: usize = fields[0].parse().map_err(|_| GeometryError::Parse {
            path: path.to_string(),
            line: line_no,
            msg: format!("bad frame id {:?}", fields[0]),
        })?;
        let mut vals = [0.0; 6];
        for (i, f) in fields[1..].iter().enumerate() {
            vals[i] = f.parse().map_err(|_| GeometryError::Parse {
                path: path.to_string(),
                line: line_no,
                msg: format!("bad float {:?}", f),
            })?;
        }
        out.push((
            frame_id,
            CameraPose::new([vals[0], vals[1], vals[2]], [vals[3], vals[4], vals[5]]),
        ));
    }
    Ok(out)
}

pub fn load_poses(path: &Path) -> Result<Vec<(usize, CameraPose)>, GeometryError> {
    let text = std::fs::read_to_string(path).map_err(|source| GeometryError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_poses(&text, &path.display().to_string())
}

pub fn format_intrinsics(k: &CameraIntrinsics) -> String {
    format!(
        "{:.17e} {:.17e} {:.17e} {:.17e} {} {}\n",
        k.fx, k.fy, k.cx, k.cy, k.width, k.height
    )
}

pub fn parse_intrinsics(text: &str, path: &str) -> Result<CameraIntrinsics, GeometryError> {
    let line = text
        .lines()
        .find(|l| !l.trim().is_empty())
        .ok_or_else(|| GeometryError::Parse {
            path: path.to_string(),
            line: 1,
            msg: "empty intrinsics file".to_string(),
        })?;
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != 6 {
        return Err(GeometryError::Parse {
            path: path.to_string(),
            line: 1,
            msg: format!("expected 6 fields, found {}", fields.len()),
        });
    }
    let parse_f = |s: &str| -> Result<f64, GeometryError> {
        s.parse().map_err(|_| GeometryError::Parse {
            path: path.to_string(),
            line: 1,
            msg: format!("bad float {s:?}"),
        })
    };
    let parse_u = |s: &str| -> Result<u32, GeometryError> {
        s.parse().map_err(|_| GeometryError::Parse {
            path: path.to_string(),
            line: 1,
            msg: format!("bad integer {s:?}"),
        })
    };
    Ok(CameraIntrinsics::new(
        parse_f(fields[0])?,
        parse_f(fields[1])?,
        parse_f(fields[2])?,
        parse_f(fields[3])?,
        parse_u(fields[4])?,
        parse_u(fields[5])?,
    ))
}

pub fn load_intrinsics(path: &Path) -> Result<CameraIntrinsics, GeometryError> {
    let text = std::fs::read_to_string(path).map_err(|source| GeometryError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_intrinsics(&text, &path.display().to_string())
}
