//! Forward rendering model: ray-to-point neighborhood query, attention
//! aggregation into a ray descriptor, and the MLP color head.
//!
//! A ray's color costs exactly one MLP evaluation: the k points nearest to
//! the ray line (in front of the origin) are scored by a learnable linear
//! scorer over `[feature, offset, distance]`, softmax-normalized, and their
//! features averaged into the light-field descriptor. The descriptor and the
//! ray direction pass through the weighted positional encoding and the MLP.
//!
//! The low-level kernels here are shared with the gradient tape in `trainer`
//! so the plain and differentiated forward passes stay bit-identical.

use crate::geometry::{
    frequency_encode, mat3_transpose, refine_pose, rotation_to_matrix, FrequencySchedule, Ray,
    Vec3,
};
use crate::motion::PixelMask;
use crate::scene::{FeaturedPointCloud, Image};
use crate::geometry::{cast_ray, CameraIntrinsics, CameraPose};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Fill value of pixels skipped by a mask; never a valid color.
pub const MASKED_SENTINEL: f64 = -1.0;

#[derive(Debug, Error)]
pub enum LightfieldError {
    #[error("ray sees no geometry: all {0} points lie behind the origin")]
    NoGeometryAhead(usize),
    #[error("empty point cloud")]
    EmptyCloud,
    #[error("non-finite color at pixel ({0}, {1})")]
    NonFiniteColor(u32, u32),
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
}

/// Architecture constants of the rendering model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    /// Per-point feature length.
    pub feature_dim: usize,
    /// Neighbors aggregated per ray.
    pub k_neighbors: usize,
    /// Frequency bands for the ray direction encoding.
    pub l_dir: usize,
    /// Frequency bands for the ray feature encoding.
    pub l_feat: usize,
    /// Width of the two hidden MLP layers.
    pub hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_dim: 16,
            k_neighbors: 8,
            l_dir: 4,
            l_feat: 10,
            hidden: 64,
        }
    }
}

impl ModelConfig {
    pub fn mlp_input_dim(&self) -> usize {
        (2 * self.l_dir + 1) * 3 + (2 * self.l_feat + 1) * self.feature_dim
    }

    /// Layer shapes as (rows, cols) for W1, W2, W3.
    pub fn layer_shapes(&self) -> [(usize, usize); 3] {
        [
            (self.hidden, self.mlp_input_dim()),
            (self.hidden, self.hidden),
            (3, self.hidden),
        ]
    }

    /// Offsets of [W1, b1, W2, b2, W3, b3] within the MLP parameter block.
    pub fn mlp_layout(&self) -> [(usize, usize); 6] {
        let shapes = self.layer_shapes();
        let mut out = [(0usize, 0usize); 6];
        let mut off = 0;
        for (i, (rows, cols)) in shapes.iter().enumerate() {
            out[2 * i] = (off, rows * cols);
            off += rows * cols;
            out[2 * i + 1] = (off, *rows);
            off += rows;
        }
        out
    }

    pub fn mlp_param_count(&self) -> usize {
        let layout = self.mlp_layout();
        layout[5].0 + layout[5].1
    }

    /// Scorer length: feature + relative offset (3) + perpendicular distance.
    pub fn attention_param_count(&self) -> usize {
        self.feature_dim + 4
    }
}

/// Coarse-to-fine schedules for the two encoded inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedules {
    pub dir: FrequencySchedule,
    pub feat: FrequencySchedule,
}

impl Schedules {
    pub fn saturated(config: &ModelConfig) -> Self {
        Self {
            dir: FrequencySchedule::saturated(config.l_dir),
            feat: FrequencySchedule::saturated(config.l_feat),
        }
    }

    pub fn at_epoch(config: &ModelConfig, epoch: usize, end_epoch: usize) -> Self {
        Self {
            dir: FrequencySchedule::at_epoch(config.l_dir, epoch, end_epoch),
            feat: FrequencySchedule::at_epoch(config.l_feat, epoch, end_epoch),
        }
    }
}

/// Borrowed parameter views for rendering.
#[derive(Debug, Clone, Copy)]
pub struct FieldParams<'a> {
    pub config: &'a ModelConfig,
    pub mlp: &'a [f64],
    pub attention: &'a [f64],
}

/// Render instrumentation: one ray and one MLP call per rendered pixel.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RenderStats {
    pub rays_cast: u64,
    pub mlp_calls: u64,
    pub pixels_masked: u64,
}

// ---------------------------------------------------------------------------
// Shared numeric kernels (also used by the gradient tape)
// ---------------------------------------------------------------------------

/// `out = M v` for a row-major (rows x cols) matrix; plain left-to-right
/// accumulation per row.
pub fn matvec(mat: &[f64], vec: &[f64], rows: usize, cols: usize, out: &mut [f64]) {
    debug_assert_eq!(mat.len(), rows * cols);
    debug_assert_eq!(vec.len(), cols);
    debug_assert_eq!(out.len(), rows);
    for r in 0..rows {
        let row = &mat[r * cols..(r + 1) * cols];
        let mut acc = 0.0;
        for (w, x) in row.iter().zip(vec) {
            acc += w * x;
        }
        out[r] = acc;
    }
}

/// Numerically stable softmax (max-subtraction form).
pub fn softmax(scores: &[f64], out: &mut [f64]) {
    debug_assert_eq!(scores.len(), out.len());
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &s) in out.iter_mut().zip(scores) {
        *o = (s - max).exp();
        sum += *o;
    }
    let inv = 1.0 / sum;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Projection length and perpendicular distance of a point from a ray line.
pub fn point_ray_geometry(point: &Vec3, origin: &Vec3, direction: &Vec3) -> (f64, f64) {
    let v = [
        point[0] - origin[0],
        point[1] - origin[1],
        point[2] - origin[2],
    ];
    let t = v[0] * direction[0] + v[1] * direction[1] + v[2] * direction[2];
    let vv = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
    let perp_sq = (vv - t * t).max(0.0);
    (t, perp_sq.sqrt())
}

/// Squared-distance floor for the attention input. Depth samples are cast
/// through pixel centers, so training rays routinely pass exactly through
/// points; flooring at (1 um)^2 keeps the sqrt gradient bounded there.
pub const ATTENTION_DIST_FLOOR_SQ: f64 = 1e-12;

/// Relative offset and floored perpendicular distance fed to the attention
/// scorer. Written to match the gradient tape operation-for-operation.
pub fn attention_geometry(point: &Vec3, origin: &Vec3, direction: &Vec3) -> (Vec3, f64) {
    let offset = [
        point[0] - origin[0],
        point[1] - origin[1],
        point[2] - origin[2],
    ];
    let mut tproj = 0.0;
    for i in 0..3 {
        tproj += offset[i] * direction[i];
    }
    let mut vv = 0.0;
    for i in 0..3 {
        vv += offset[i] * offset[i];
    }
    let perp_sq = (vv - tproj * tproj).max(ATTENTION_DIST_FLOOR_SQ);
    (offset, perp_sq.sqrt())
}

// ---------------------------------------------------------------------------
// Neighborhood query
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub distance: f64,
}

/// The k points with smallest perpendicular distance to the ray line, among
/// points with non-negative projection onto the direction. Ties break by
/// point index; results are sorted ascending by (distance, index).
pub fn nearest_points(
    cloud: &FeaturedPointCloud,
    ray: &Ray,
    k: usize,
) -> Result<Vec<Neighbor>, LightfieldError> {
    assert!(k >= 1, "k must be at least 1");
    if cloud.is_empty() {
        return Err(LightfieldError::EmptyCloud);
    }
    // Selection runs on squared distances; order is identical.
    let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
    let o = &ray.origin;
    let d = &ray.direction;
    for (i, p) in cloud.points.iter().enumerate() {
        let vx = p[0] - o[0];
        let vy = p[1] - o[1];
        let vz = p[2] - o[2];
        let t = vx * d[0] + vy * d[1] + vz * d[2];
        if t < 0.0 {
            continue;
        }
        let d2 = (vx * vx + vy * vy + vz * vz - t * t).max(0.0);
        if best.len() == k {
            let worst = best[k - 1];
            if (d2, i) >= worst {
                continue;
            }
            best.pop();
        }
        let pos = best.partition_point(|&(bd, bi)| (bd, bi) < (d2, i));
        best.insert(pos, (d2, i));
    }
    if best.is_empty() {
        return Err(LightfieldError::NoGeometryAhead(cloud.len()));
    }
    Ok(best
        .into_iter()
        .map(|(d2, index)| Neighbor {
            index,
            distance: d2.sqrt(),
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Attention aggregation
// ---------------------------------------------------------------------------

/// Light-field descriptor of a ray.
#[derive(Debug, Clone, PartialEq)]
pub struct RayDescriptor {
    pub aggregated_feature: Vec<f64>,
    pub direction: Vec3,
    pub neighbor_indices: Vec<usize>,
    pub attention_weights: Vec<f64>,
}

/// Score each neighbor with the linear scorer over
/// `[feature, offset, distance]`, softmax the scores, and average features.
pub fn descriptor_from_neighbors(
    cloud: &FeaturedPointCloud,
    ray: &Ray,
    neighbors: &[Neighbor],
    attention: &[f64],
) -> RayDescriptor {
    let f = cloud.feature_dim;
    debug_assert_eq!(attention.len(), f + 4);
    let n = neighbors.len();
    let mut scores = vec![0.0; n];
    for (si, nb) in neighbors.iter().enumerate() {
        let p = &cloud.points[nb.index];
        let (offset, dist) = attention_geometry(p, &ray.origin, &ray.direction);
        let feat = cloud.feature(nb.index);
        // dot(w, [feature, offset, dist]) in storage order
        let mut acc = 0.0;
        for (w, x) in attention[..f].iter().zip(feat) {
            acc += w * x;
        }
        acc += attention[f] * offset[0];
        acc += attention[f + 1] * offset[1];
        acc += attention[f + 2] * offset[2];
        acc += attention[f + 3] * dist;
        scores[si] = acc;
    }
    let mut weights = vec![0.0; n];
    softmax(&scores, &mut weights);

    let mut aggregated = vec![0.0; f];
    for (w, nb) in weights.iter().zip(neighbors) {
        for (a, x) in aggregated.iter_mut().zip(cloud.feature(nb.index)) {
            *a += w * x;
        }
    }
    RayDescriptor {
        aggregated_feature: aggregated,
        direction: ray.direction,
        neighbor_indices: neighbors.iter().map(|n| n.index).collect(),
        attention_weights: weights,
    }
}

pub fn aggregate(
    cloud: &FeaturedPointCloud,
    ray: &Ray,
    k: usize,
    attention: &[f64],
) -> Result<RayDescriptor, LightfieldError> {
    let neighbors = nearest_points(cloud, ray, k)?;
    Ok(descriptor_from_neighbors(cloud, ray, &neighbors, attention))
}

// ---------------------------------------------------------------------------
// MLP color head
// ---------------------------------------------------------------------------

/// Two hidden rectifier layers and a sigmoid RGB output. One call per ray.
pub fn mlp_forward(config: &ModelConfig, mlp: &[f64], input: &[f64]) -> [f64; 3] {
    debug_assert_eq!(mlp.len(), config.mlp_param_count());
    debug_assert_eq!(input.len(), config.mlp_input_dim());
    let layout = config.mlp_layout();
    let shapes = config.layer_shapes();
    let h = config.hidden;

    let slice = |i: usize| &mlp[layout[i].0..layout[i].0 + layout[i].1];

    let mut h1 = vec![0.0; h];
    matvec(slice(0), input, shapes[0].0, shapes[0].1, &mut h1);
    for (v, b) in h1.iter_mut().zip(slice(1)) {
        *v += b;
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    let mut h2 = vec![0.0; h];
    matvec(slice(2), &h1, shapes[1].0, shapes[1].1, &mut h2);
    for (v, b) in h2.iter_mut().zip(slice(3)) {
        *v += b;
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    let mut out = vec![0.0; 3];
    matvec(slice(4), &h2, shapes[2].0, shapes[2].1, &mut out);
    [
        sigmoid(out[0] + slice(5)[0]),
        sigmoid(out[1] + slice(5)[1]),
        sigmoid(out[2] + slice(5)[2]),
    ]
}

/// Render one ray: aggregate neighbors, encode, one MLP evaluation.
pub fn render_ray(
    cloud: &FeaturedPointCloud,
    ray: &Ray,
    field: &FieldParams<'_>,
    schedules: &Schedules,
    stats: &mut RenderStats,
) -> Result<[f64; 3], LightfieldError> {
    let descriptor = aggregate(cloud, ray, field.config.k_neighbors, field.attention)?;
    let rgb = shade_descriptor(&descriptor, field, schedules, stats);
    if rgb.iter().any(|c| !c.is_finite()) {
        return Err(LightfieldError::NonFiniteColor(ray.pixel.0, ray.pixel.1));
    }
    Ok(rgb)
}

/// Encoding + MLP for an already-aggregated descriptor.
pub fn shade_descriptor(
    descriptor: &RayDescriptor,
    field: &FieldParams<'_>,
    schedules: &Schedules,
    stats: &mut RenderStats,
) -> [f64; 3] {
    let enc_dir = frequency_encode(&descriptor.direction, &schedules.dir);
    let enc_feat = frequency_encode(&descriptor.aggregated_feature, &schedules.feat);
    let mut input = Vec::with_capacity(enc_dir.len() + enc_feat.len());
    input.extend_from_slice(&enc_dir);
    input.extend_from_slice(&enc_feat);
    stats.mlp_calls += 1;
    mlp_forward(field.config, field.mlp, &input)
}

/// Render a full image at the pose's refined extrinsics.
///
/// With a mask, rays are cast only through unmasked pixels (the training
/// regime); masked pixels receive `MASKED_SENTINEL`. Without a mask every
/// pixel is rendered (the inference regime).
pub fn render_image(
    cloud: &FeaturedPointCloud,
    pose: &CameraPose,
    intrinsics: &CameraIntrinsics,
    field: &FieldParams<'_>,
    schedules: &Schedules,
    mask: Option<&PixelMask>,
) -> Result<(Image, RenderStats), LightfieldError> {
    let mut stats = RenderStats::default();
    let mut image = Image::new(intrinsics.width, intrinsics.height);
    let (rot, trans) = refine_pose(pose);
    let rt = mat3_transpose(&rotation_to_matrix(rot));
    for row in 0..intrinsics.height {
        for col in 0..intrinsics.width {
            if let Some(m) = mask {
                if m.is_masked(row, col) {
                    stats.pixels_masked += 1;
                    image.set_pixel(row, col, [MASKED_SENTINEL; 3]);
                    continue;
                }
            }
            let ray = cast_ray(intrinsics, &rt, &trans, (row, col));
            stats.rays_cast += 1;
            let rgb = render_ray(cloud, &ray, field, schedules, &mut stats)?;
            image.set_pixel(row, col, rgb);
        }
    }
    Ok((image, stats))
}

// ---------------------------------------------------------------------------
// Parameter initialization
// ---------------------------------------------------------------------------

/// Uniform +-sqrt(6 / (fan_in + fan_out)) weights, zero biases.
pub fn init_mlp_params(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut params = vec![0.0; config.mlp_param_count()];
    let layout = config.mlp_layout();
    for (i, (rows, cols)) in config.layer_shapes().iter().enumerate() {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let (off, len) = layout[2 * i];
        for w in &mut params[off..off + len] {
            *w = rng.random_range(-bound..bound);
        }
    }
    params
}

/// Zero scorer: attention starts as a uniform average over neighbors.
pub fn init_attention_params(config: &ModelConfig) -> Vec<f64> {
    vec![0.0; config.attention_param_count()]
}
