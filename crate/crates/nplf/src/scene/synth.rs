//! Synthetic scene generator and exact analytic renderer.
//!
//! Scenes are built from a textured ground plane, a textured back wall, and
//! axis-aligned boxes, all colored by smooth 3D sinusoid fields so a small
//! MLP can learn them while box edges still carry high-frequency content.
//! The camera follows a straight or arc trajectory centered on the world
//! origin. Ground-truth images come from exact ray-surface intersection;
//! moving boxes appear in the images and the object tracks but never in the
//! static oracle renders or the per-frame depth samples, which mimics a
//! LiDAR map of the static environment.

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{quantize_unit, Frame, Image, SceneDataset, SceneError};
use crate::geometry::{
    cast_ray, mat3_mul_vec, mat3_transpose, rotation_to_matrix, CameraIntrinsics, CameraPose,
    Vec3,
};
use crate::motion::{ObjectTrack, TrackObservation};

const GROUND_Y: f64 = 1.5;
const WALL_Z: f64 = 12.0;
const WALL_HALF_X: f64 = 12.0;
const WALL_TOP_Y: f64 = -6.0;
const NEAR_PLANE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrajectoryKind {
    Straight,
    Arc,
}

/// One box in the scene. A non-zero `velocity` (meters per frame) makes it
/// a moving object; `tracked` boxes additionally emit an object track with
/// synthesized per-frame motion scores.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoxSpec {
    pub center: [f64; 3],
    pub size: [f64; 3],
    #[serde(default)]
    pub velocity: [f64; 3],
    #[serde(default)]
    pub tracked: bool,
}

impl BoxSpec {
    pub fn is_moving(&self) -> bool {
        self.velocity != [0.0; 3]
    }

    fn center_at(&self, frame: usize) -> Vec3 {
        let f = frame as f64;
        [
            self.center[0] + self.velocity[0] * f,
            self.center[1] + self.velocity[1] * f,
            self.center[2] + self.velocity[2] * f,
        ]
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub frames: usize,
    pub width: u32,
    pub height: u32,
    pub focal: f64,
    pub trajectory: TrajectoryKind,
    /// Forward motion per frame (meters).
    pub step: f64,
    /// Pixel stride of the per-frame depth sample grid.
    pub point_stride: u32,
    pub boxes: Vec<BoxSpec>,
    /// Default noise seed for texture and track-score synthesis.
    pub seed: u64,
    #[serde(default = "default_holdout_stride")]
    pub holdout_stride: usize,
}

fn default_holdout_stride() -> usize {
    10
}

impl SynthConfig {
    /// Desk-scale default: 40 frames of 64x80 with two static boxes, one of
    /// them tracked (a parked decoy), and optionally one moving tracked box.
    pub fn default_scene(with_moving_box: bool) -> Self {
        let mut boxes = vec![
            BoxSpec {
                center: [-1.3, 1.1, 4.5],
                size: [0.9, 0.8, 0.9],
                velocity: [0.0; 3],
                tracked: false,
            },
            BoxSpec {
                center: [1.2, 1.2, 6.0],
                size: [0.8, 0.6, 1.0],
                velocity: [0.0; 3],
                tracked: true,
            },
        ];
        if with_moving_box {
            boxes.push(BoxSpec {
                center: [-1.8, 1.2, 5.0],
                size: [0.6, 0.6, 0.6],
                velocity: [0.09, 0.0, 0.0],
                tracked: true,
            });
        }
        Self {
            frames: 40,
            width: 80,
            height: 64,
            focal: 70.0,
            trajectory: TrajectoryKind::Arc,
            step: 0.1,
            point_stride: 4,
            boxes,
            seed: 7,
            holdout_stride: 10,
        }
    }

    pub fn intrinsics(&self) -> CameraIntrinsics {
        CameraIntrinsics::new(
            self.focal,
            self.focal,
            self.width as f64 / 2.0,
            self.height as f64 / 2.0,
            self.width,
            self.height,
        )
    }

    fn validate(&self) -> Result<(), SceneError> {
        if self.frames < 2 {
            return Err(SceneError::BadConfig(
                "need at least two frames".to_string(),
            ));
        }
        if self.step == 0.0 {
            return Err(SceneError::BadConfig(
                "degenerate trajectory (zero length)".to_string(),
            ));
        }
        if self.width < 8 || self.height < 8 {
            return Err(SceneError::BadConfig("image too small".to_string()));
        }
        if self.point_stride == 0 {
            return Err(SceneError::BadConfig("point stride must be >= 1".to_string()));
        }
        if self.focal <= 0.0 {
            return Err(SceneError::BadConfig("focal must be positive".to_string()));
        }
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, SceneError> {
        let text = std::fs::read_to_string(path).map_err(|source| SceneError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| SceneError::Parse {
            path: path.display().to_string(),
            line: e.line(),
            msg: e.to_string(),
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), SceneError> {
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        std::fs::write(path, text).map_err(|source| SceneError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

/// Smooth per-channel sinusoid color: `0.5 + amp * sin(a . p + b)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColorField {
    a: [[f64; 3]; 3],
    b: [f64; 3],
    amp: f64,
}

impl ColorField {
    fn random(rng: &mut ChaCha8Rng, min_freq: f64, max_freq: f64) -> Self {
        let mut a = [[0.0; 3]; 3];
        let mut b = [0.0; 3];
        for ch in 0..3 {
            for axis in 0..3 {
                let mag = rng.random_range(min_freq..max_freq);
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                a[ch][axis] = sign * mag;
            }
            b[ch] = rng.random_range(0.0..std::f64::consts::TAU);
        }
        Self { a, b, amp: 0.42 }
    }

    pub fn sample(&self, p: &Vec3) -> [f64; 3] {
        let mut rgb = [0.0; 3];
        for ch in 0..3 {
            let phase = self.a[ch][0] * p[0] + self.a[ch][1] * p[1] + self.a[ch][2] * p[2]
                + self.b[ch];
            rgb[ch] = 0.5 + self.amp * phase.sin();
        }
        rgb
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    fn from_center_size(center: &Vec3, size: &Vec3) -> Self {
        Self {
            min: [
                center[0] - size[0] / 2.0,
                center[1] - size[1] / 2.0,
                center[2] - size[2] / 2.0,
            ],
            max: [
                center[0] + size[0] / 2.0,
                center[1] + size[1] / 2.0,
                center[2] + size[2] / 2.0,
            ],
        }
    }

    /// Slab test returning the entry distance along the ray, if any.
    fn hit(&self, origin: &Vec3, dir: &Vec3) -> Option<f64> {
        let mut t_enter = NEAR_PLANE;
        let mut t_exit = f64::INFINITY;
        for axis in 0..3 {
            if dir[axis].abs() < 1e-12 {
                if origin[axis] < self.min[axis] || origin[axis] > self.max[axis] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / dir[axis];
            let mut t0 = (self.min[axis] - origin[axis]) * inv;
            let mut t1 = (self.max[axis] - origin[axis]) * inv;
            if t0 > t1 {
                std::mem::swap(&mut t0, &mut t1);
            }
            t_enter = t_enter.max(t0);
            t_exit = t_exit.min(t1);
            if t_enter > t_exit {
                return None;
            }
        }
        Some(t_enter)
    }

    fn corners(&self) -> [Vec3; 8] {
        let mut out = [[0.0; 3]; 8];
        for (i, c) in out.iter_mut().enumerate() {
            *c = [
                if i & 1 == 0 { self.min[0] } else { self.max[0] },
                if i & 2 == 0 { self.min[1] } else { self.max[1] },
                if i & 4 == 0 { self.min[2] } else { self.max[2] },
            ];
        }
        out
    }
}

/// The static scene content with its seed-derived textures.
#[derive(Debug, Clone)]
pub struct StaticGeometry {
    pub ground_field: ColorField,
    pub wall_field: ColorField,
    pub sky: [f64; 3],
    /// Static boxes with their textures.
    pub boxes: Vec<(Aabb, ColorField)>,
    /// Textures of moving boxes, by config box index.
    moving_fields: Vec<Option<ColorField>>,
    moving_specs: Vec<BoxSpec>,
}

impl StaticGeometry {
    /// Derives textures from the seed in a fixed order so any consumer of the
    /// same (config, seed) pair sees identical colors.
    pub fn from_config(config: &SynthConfig, rng_seed: u64) -> Result<Self, SceneError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let ground_field = ColorField::random(&mut rng, 0.35, 0.9);
        let wall_field = ColorField::random(&mut rng, 0.35, 0.9);
        let sky = [
            0.45 + rng.random_range(0.0..0.2),
            0.55 + rng.random_range(0.0..0.2),
            0.7 + rng.random_range(0.0..0.2),
        ];
        let mut boxes = Vec::new();
        let mut moving_fields = Vec::new();
        let mut moving_specs = Vec::new();
        for spec in &config.boxes {
            let field = ColorField::random(&mut rng, 0.8, 1.8);
            if spec.is_moving() {
                moving_fields.push(Some(field));
                moving_specs.push(spec.clone());
            } else {
                boxes.push((Aabb::from_center_size(&spec.center, &spec.size), field));
                moving_fields.push(None);
            }
        }
        Ok(Self {
            ground_field,
            wall_field,
            sky,
            boxes,
            moving_fields,
            moving_specs,
        })
    }

    /// Moving boxes positioned at `frame`, with their textures.
    pub fn moving_boxes_at(&self, frame: usize) -> Vec<(Aabb, ColorField)> {
        self.moving_specs
            .iter()
            .zip(self.moving_fields.iter().filter_map(|f| f.as_ref()))
            .map(|(spec, field)| {
                (
                    Aabb::from_center_size(&spec.center_at(frame), &spec.size),
                    *field,
                )
            })
            .collect()
    }
}

enum Hit {
    Ground,
    Wall,
    Box(usize),
    Dynamic(usize),
}

/// Exact closest-hit trace of the analytic scene.
fn trace(
    geo: &StaticGeometry,
    dynamics: &[(Aabb, ColorField)],
    origin: &Vec3,
    dir: &Vec3,
) -> [f64; 3] {
    let mut best_t = f64::INFINITY;
    let mut best: Option<Hit> = None;

    if dir[1] > 1e-12 {
        let t = (GROUND_Y - origin[1]) / dir[1];
        if t > NEAR_PLANE && t < best_t {
            best_t = t;
            best = Some(Hit::Ground);
        }
    }
    if dir[2] > 1e-12 {
        let t = (WALL_Z - origin[2]) / dir[2];
        if t > NEAR_PLANE && t < best_t {
            let x = origin[0] + t * dir[0];
            let y = origin[1] + t * dir[1];
            if x.abs() <= WALL_HALF_X && (WALL_TOP_Y..=GROUND_Y).contains(&y) {
                best_t = t;
                best = Some(Hit::Wall);
            }
        }
    }
    for (i, (aabb, _)) in geo.boxes.iter().enumerate() {
        if let Some(t) = aabb.hit(origin, dir) {
            if t < best_t {
                best_t = t;
                best = Some(Hit::Box(i));
            }
        }
    }
    for (i, (aabb, _)) in dynamics.iter().enumerate() {
        if let Some(t) = aabb.hit(origin, dir) {
            if t < best_t {
                best_t = t;
                best = Some(Hit::Dynamic(i));
            }
        }
    }

    let p = [
        origin[0] + best_t * dir[0],
        origin[1] + best_t * dir[1],
        origin[2] + best_t * dir[2],
    ];
    match best {
        Some(Hit::Ground) => geo.ground_field.sample(&p),
        Some(Hit::Wall) => geo.wall_field.sample(&p),
        Some(Hit::Box(i)) => geo.boxes[i].1.sample(&p),
        Some(Hit::Dynamic(i)) => dynamics[i].1.sample(&p),
        None => geo.sky,
    }
}

/// Ground-truth camera pose of a frame. Trajectories are centered on the
/// world origin and keep every pose component away from zero so that
/// multiplicative noise perturbs all six degrees of freedom.
pub fn gt_pose(config: &SynthConfig, frame: usize) -> CameraPose {
    let n = config.frames as f64;
    let i = frame as f64;
    let z = (i - (n - 1.0) / 2.0) * config.step;
    let (center, rot): (Vec3, Vec3) = match config.trajectory {
        TrajectoryKind::Straight => (
            [
                0.07 + 0.015 * (0.31 * i).sin(),
                -0.05 + 0.012 * (0.23 * i + 0.9).sin(),
                z,
            ],
            [
                0.020 + 0.006 * (0.17 * i).sin(),
                -0.030 + 0.008 * (0.27 * i + 0.5).sin(),
                0.015 + 0.005 * (0.21 * i + 1.3).cos(),
            ],
        ),
        TrajectoryKind::Arc => {
            let yaw = 0.10 * (i / (n - 1.0) - 0.5);
            (
                [
                    0.9 * yaw.sin() + 0.06,
                    -0.05 + 0.012 * (0.23 * i + 0.9).sin(),
                    z,
                ],
                [
                    0.022 + 0.007 * (0.19 * i).sin(),
                    yaw + 0.018,
                    0.014 + 0.005 * (0.2 * i).cos(),
                ],
            )
        }
    };
    // world-to-camera translation t = -R * C
    let m = rotation_to_matrix(rot);
    let rc = mat3_mul_vec(&m, &center);
    CameraPose::new(rot, [-rc[0], -rc[1], -rc[2]])
}

pub fn gt_poses(config: &SynthConfig) -> Vec<CameraPose> {
    (0..config.frames).map(|f| gt_pose(config, f)).collect()
}

fn render_with(
    geo: &StaticGeometry,
    dynamics: &[(Aabb, ColorField)],
    intrinsics: &CameraIntrinsics,
    pose: &CameraPose,
) -> Image {
    let (rot, trans) = crate::geometry::refine_pose(pose);
    let rt = mat3_transpose(&rotation_to_matrix(rot));
    let mut img = Image::new(intrinsics.width, intrinsics.height);
    for row in 0..intrinsics.height {
        for col in 0..intrinsics.width {
            let ray = cast_ray(intrinsics, &rt, &trans, (row, col));
            let rgb = trace(geo, dynamics, &ray.origin, &ray.direction);
            img.set_pixel(row, col, rgb.map(quantize_unit));
        }
    }
    img
}

/// Render the static scene only (no moving boxes) at an arbitrary pose.
/// This is the reference image the trained field is compared against.
pub fn render_static_oracle(
    geo: &StaticGeometry,
    intrinsics: &CameraIntrinsics,
    pose: &CameraPose,
) -> Image {
    render_with(geo, &[], intrinsics, pose)
}

fn project_bbox(
    aabb: &Aabb,
    intrinsics: &CameraIntrinsics,
    pose: &CameraPose,
) -> Option<[u32; 4]> {
    let (rot, trans) = crate::geometry::refine_pose(pose);
    let m = rotation_to_matrix(rot);
    let mut min_u = f64::INFINITY;
    let mut max_u = f64::NEG_INFINITY;
    let mut min_v = f64::INFINITY;
    let mut max_v = f64::NEG_INFINITY;
    for corner in aabb.corners() {
        let pc = mat3_mul_vec(&m, &corner);
        let pc = [pc[0] + trans[0], pc[1] + trans[1], pc[2] + trans[2]];
        if pc[2] < 0.2 {
            return None; // too close or behind: the tracker loses it
        }
        let u = intrinsics.fx * pc[0] / pc[2] + intrinsics.cx;
        let v = intrinsics.fy * pc[1] / pc[2] + intrinsics.cy;
        min_u = min_u.min(u);
        max_u = max_u.max(u);
        min_v = min_v.min(v);
        max_v = max_v.max(v);
    }
    let r0 = min_v.floor().max(0.0) as u32;
    let c0 = min_u.floor().max(0.0) as u32;
    let r1 = ((max_v.floor() as i64 + 1).clamp(0, intrinsics.height as i64)) as u32;
    let c1 = ((max_u.floor() as i64 + 1).clamp(0, intrinsics.width as i64)) as u32;
    if r1 > r0 && c1 > c0 && r0 < intrinsics.height && c0 < intrinsics.width {
        Some([r0, c0, r1, c1])
    } else {
        None
    }
}

/// Build the full synthetic dataset: ground-truth poses, exact images
/// (including moving boxes), static-only depth samples, and object tracks
/// with synthesized motion scores. Deterministic in (config, rng_seed).
pub fn synthesize_scene(config: &SynthConfig, rng_seed: u64) -> Result<SceneDataset, SceneError> {
    let geo = StaticGeometry::from_config(config, rng_seed)?;
    let intrinsics = config.intrinsics();
    let poses = gt_poses(config);

    let mut frames = Vec::with_capacity(config.frames);
    for (f, pose) in poses.iter().enumerate() {
        let dynamics = geo.moving_boxes_at(f);
        let image = render_with(&geo, &dynamics, &intrinsics, pose);

        // Static-only depth sample on a pixel grid: the LiDAR-like prior.
        let (rot, trans) = crate::geometry::refine_pose(pose);
        let rt = mat3_transpose(&rotation_to_matrix(rot));
        let stride = config.point_stride;
        let mut depth_points = Vec::new();
        let mut row = stride / 2;
        while row < intrinsics.height {
            let mut col = stride / 2;
            while col < intrinsics.width {
                let ray = cast_ray(&intrinsics, &rt, &trans, (row, col));
                if let Some(p) = trace_static_point(&geo, &ray.origin, &ray.direction) {
                    depth_points.push(p);
                }
                col += stride;
            }
            row += stride;
        }

        frames.push(Frame {
            image,
            pose: *pose,
            depth_points,
            frame_index: f,
        });
    }

    // Object tracks with synthesized motion scores. Score randomness is drawn
    // from a dedicated stream so geometry stays independent of track count.
    let mut score_rng = ChaCha8Rng::seed_from_u64(rng_seed ^ 0x7261636b_u64);
    let mut tracks = Vec::new();
    for (box_id, spec) in config.boxes.iter().enumerate() {
        if !spec.tracked {
            continue;
        }
        let mut obs = Vec::new();
        for (f, pose) in poses.iter().enumerate() {
            let aabb = Aabb::from_center_size(&spec.center_at(f), &spec.size);
            if let Some(bbox) = project_bbox(&aabb, &intrinsics, pose) {
                obs.push((f, bbox));
            }
        }
        if obs.is_empty() {
            continue;
        }
        let base = if spec.is_moving() { 0.85 } else { 0.12 };
        let n_flips = obs.len() / 5;
        let flip_set: Vec<usize> = sample_indices(&mut score_rng, obs.len(), n_flips).into_vec();
        let observations = obs
            .iter()
            .enumerate()
            .map(|(i, &(frame_index, bbox))| {
                let jitter: f64 = score_rng.random_range(-0.08..0.08);
                let mut score = (base + jitter).clamp(0.01, 0.99);
                if flip_set.contains(&i) {
                    score = 1.0 - score;
                }
                TrackObservation {
                    frame_index,
                    bbox,
                    motion_score: score,
                }
            })
            .collect();
        tracks.push(ObjectTrack::new(box_id as u32, observations)?);
    }

    Ok(SceneDataset {
        frames,
        intrinsics,
        tracks,
        holdout_stride: config.holdout_stride,
    })
}

/// Closest static-surface intersection point, if any.
fn trace_static_point(geo: &StaticGeometry, origin: &Vec3, dir: &Vec3) -> Option<Vec3> {
    let mut best_t = f64::INFINITY;
    if dir[1] > 1e-12 {
        let t = (GROUND_Y - origin[1]) / dir[1];
        if t > NEAR_PLANE {
            best_t = best_t.min(t);
        }
    }
    if dir[2] > 1e-12 {
        let t = (WALL_Z - origin[2]) / dir[2];
        if t > NEAR_PLANE && t < best_t {
            let x = origin[0] + t * dir[0];
            let y = origin[1] + t * dir[1];
            if x.abs() <= WALL_HALF_X && (WALL_TOP_Y..=GROUND_Y).contains(&y) {
                best_t = t;
            }
        }
    }
    for (aabb, _) in &geo.boxes {
        if let Some(t) = aabb.hit(origin, dir) {
            best_t = best_t.min(t);
        }
    }
    if best_t.is_finite() {
        Some([
            origin[0] + best_t * dir[0],
            origin[1] + best_t * dir[1],
            origin[2] + best_t * dir[2],
        ])
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::refine_pose;

    #[test]
    fn same_seed_is_bit_identical() {
        let config = SynthConfig::default_scene(true);
        let a = synthesize_scene(&config, 3).unwrap();
        let b = synthesize_scene(&config, 3).unwrap();
        assert_eq!(a.frames.len(), b.frames.len());
        for (fa, fb) in a.frames.iter().zip(&b.frames) {
            assert_eq!(fa.image.data, fb.image.data);
            assert_eq!(fa.depth_points, fb.depth_points);
            assert_eq!(fa.pose, fb.pose);
        }
        assert_eq!(a.tracks, b.tracks);
    }

    #[test]
    fn different_seed_changes_textures() {
        let config = SynthConfig::default_scene(false);
        let a = synthesize_scene(&config, 3).unwrap();
        let b = synthesize_scene(&config, 4).unwrap();
        assert_ne!(a.frames[0].image.data, b.frames[0].image.data);
    }

    #[test]
    fn static_scene_has_no_tracks_for_untracked_boxes() {
        let mut config = SynthConfig::default_scene(false);
        config.boxes.retain(|b| !b.tracked);
        let ds = synthesize_scene(&config, 1).unwrap();
        assert!(ds.tracks.is_empty());
    }

    #[test]
    fn static_scene_images_match_oracle_bit_exactly() {
        let mut config = SynthConfig::default_scene(false);
        config.boxes.retain(|b| !b.is_moving());
        let ds = synthesize_scene(&config, 5).unwrap();
        let geo = StaticGeometry::from_config(&config, 5).unwrap();
        for frame in &ds.frames {
            let oracle = render_static_oracle(&geo, &ds.intrinsics, &frame.pose);
            assert_eq!(frame.image.data, oracle.data, "frame {}", frame.frame_index);
        }
    }

    #[test]
    fn moving_box_absent_from_static_oracle() {
        let config = SynthConfig::default_scene(true);
        let ds = synthesize_scene(&config, 2).unwrap();
        let geo = StaticGeometry::from_config(&config, 2).unwrap();
        // Find a frame where the track reports the box and compare pixels.
        let track = ds
            .tracks
            .iter()
            .find(|t| config.boxes[t.object_id as usize].is_moving())
            .expect("moving box is tracked");
        let obs = &track.observations[track.observations.len() / 2];
        let frame = &ds.frames[obs.frame_index];
        let oracle = render_static_oracle(&geo, &ds.intrinsics, &frame.pose);
        let [r0, c0, r1, c1] = obs.bbox;
        let mut differing = 0usize;
        for r in r0..r1 {
            for c in c0..c1 {
                if frame.image.pixel(r, c) != oracle.pixel(r, c) {
                    differing += 1;
                }
            }
        }
        assert!(
            differing > 0,
            "moving box should appear in the captured image but not the oracle"
        );
    }

    #[test]
    fn moving_box_bbox_matches_corner_projection_oracle() {
        let mut config = SynthConfig::default_scene(true);
        config.trajectory = TrajectoryKind::Straight;
        let ds = synthesize_scene(&config, 11).unwrap();
        let moving_id = config
            .boxes
            .iter()
            .position(|b| b.is_moving())
            .expect("config has a moving box") as u32;
        let track = ds
            .tracks
            .iter()
            .find(|t| t.object_id == moving_id)
            .expect("moving track emitted");
        assert!(track.observations.len() > 10);

        let spec = &config.boxes[moving_id as usize];
        let mut prev_center_col: Option<f64> = None;
        for obs in &track.observations {
            // Independent projection of the 8 corners.
            let pose = ds.frames[obs.frame_index].pose;
            let (rot, trans) = refine_pose(&pose);
            let m = rotation_to_matrix(rot);
            let aabb = Aabb::from_center_size(&spec.center_at(obs.frame_index), &spec.size);
            let mut min_u = f64::INFINITY;
            let mut max_u = f64::NEG_INFINITY;
            let mut min_v = f64::INFINITY;
            let mut max_v = f64::NEG_INFINITY;
            for corner in aabb.corners() {
                let pc = mat3_mul_vec(&m, &corner);
                let pc = [pc[0] + trans[0], pc[1] + trans[1], pc[2] + trans[2]];
                assert!(pc[2] > 0.2);
                let u = ds.intrinsics.fx * pc[0] / pc[2] + ds.intrinsics.cx;
                let v = ds.intrinsics.fy * pc[1] / pc[2] + ds.intrinsics.cy;
                min_u = min_u.min(u);
                max_u = max_u.max(u);
                min_v = min_v.min(v);
                max_v = max_v.max(v);
            }
            let expect_r0 = min_v.floor().max(0.0) as u32;
            let expect_c0 = min_u.floor().max(0.0) as u32;
            let expect_r1 =
                ((max_v.floor() as i64 + 1).clamp(0, ds.intrinsics.height as i64)) as u32;
            let expect_c1 =
                ((max_u.floor() as i64 + 1).clamp(0, ds.intrinsics.width as i64)) as u32;
            assert_eq!(obs.bbox, [expect_r0, expect_c0, expect_r1, expect_c1]);

            // Column center moves monotonically as the box crosses the view.
            let center_col = (obs.bbox[1] + obs.bbox[3]) as f64 / 2.0;
            if let Some(prev) = prev_center_col {
                assert!(
                    center_col >= prev - 1.0,
                    "column went backwards: {prev} -> {center_col}"
                );
            }
            prev_center_col = Some(center_col);
        }
        let first = (track.observations.first().unwrap().bbox[1]
            + track.observations.first().unwrap().bbox[3]) as f64
            / 2.0;
        let last = (track.observations.last().unwrap().bbox[1]
            + track.observations.last().unwrap().bbox[3]) as f64
            / 2.0;
        assert!(last > first + 10.0, "box should sweep left to right");
    }

    #[test]
    fn zero_step_is_degenerate() {
        let mut config = SynthConfig::default_scene(false);
        config.step = 0.0;
        assert!(matches!(
            synthesize_scene(&config, 0),
            Err(SceneError::BadConfig(_))
        ));
    }

    #[test]
    fn depth_points_cover_static_surfaces() {
        let config = SynthConfig::default_scene(true);
        let ds = synthesize_scene(&config, 9).unwrap();
        for frame in &ds.frames {
            assert!(
                frame.depth_points.len() > 200,
                "frame {} has only {} points",
                frame.frame_index,
                frame.depth_points.len()
            );
            for p in &frame.depth_points {
                assert!(p.iter().all(|c| c.is_finite()));
            }
        }
    }

    #[test]
    fn pose_components_are_all_nonzero() {
        // Multiplicative noise must be able to perturb every DOF.
        let config = SynthConfig::default_scene(false);
        for pose in gt_poses(&config) {
            for c in pose.rotation_vec.iter().chain(pose.translation.iter()) {
                assert!(c.abs() > 1e-4, "pose component too close to zero: {c}");
            }
        }
    }

    #[test]
    fn votes_recover_ground_truth_motion() {
        use crate::motion::{binarize_scores, vote_motion};
        let config = SynthConfig::default_scene(true);
        let ds = synthesize_scene(&config, 21).unwrap();
        assert_eq!(ds.tracks.len(), 2);
        for track in &ds.tracks {
            let labels = binarize_scores(track, 0.5);
            let voted = vote_motion(&labels).unwrap();
            let truly_moving = config.boxes[track.object_id as usize].is_moving();
            assert_eq!(voted == 1, truly_moving, "track {}", track.object_id);
            // scores are noisy enough to contain at least one wrong label
            if track.observations.len() >= 10 {
                let wrong = labels
                    .iter()
                    .filter(|&&l| (l == 1) != truly_moving)
                    .count();
                assert!(wrong > 0, "score synthesis should exercise the vote");
            }
        }
    }
}
