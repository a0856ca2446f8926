//! Differentiable forward pass of the rendering pipeline.
//!
//! A training step first freezes a batch plan with plain f64 arithmetic:
//! which frames, which pixels, which merged cloud, and which k neighbors
//! each ray sees at the current refined poses. The plan is then replayed on
//! the gradient tape, where pose deltas, point features, the attention
//! scorer, and the MLP weights are parameter leaves. Neighbor selection is
//! discrete, so gradients are exact for the loss with the selection held
//! fixed, which is also the function the finite-difference oracle probes.
//!
//! `evaluate_plan_loss` recomputes the same loss through the plain
//! `lightfield` path; the two must agree bit-for-bit (see tests).

use std::collections::HashMap;
use std::sync::Arc;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::store::{ParameterStore, SegmentLayout};
use super::tape::{NodeId, Tape};
use super::TrainError;
use crate::geometry::{cast_ray, mat3_transpose, pixel_backprojection, refine_pose, rotation_to_matrix, FrequencySchedule};
use crate::lightfield::{
    descriptor_from_neighbors, nearest_points, shade_descriptor, FieldParams, Neighbor,
    RenderStats, Schedules, ATTENTION_DIST_FLOOR_SQ,
};
use crate::motion::PixelMask;
use crate::scene::{merge_window, FeatureTable, FeaturedPointCloud, SceneDataset};

/// One sampled training ray.
#[derive(Debug, Clone)]
pub struct RayPlan {
    pub pixel: (u32, u32),
    pub target: [f64; 3],
    /// Frozen neighbor selection at the pose the plan was built with.
    pub neighbors: Vec<Neighbor>,
}

/// All rays of one batch image plus the merged cloud they render from.
#[derive(Debug, Clone)]
pub struct ImagePlan {
    pub frame: usize,
    pub window_center: usize,
    pub cloud: FeaturedPointCloud,
    pub rays: Vec<RayPlan>,
}

#[derive(Debug, Clone)]
pub struct BatchPlan {
    pub images: Vec<ImagePlan>,
}

/// Per-frame pool of sampleable pixel indices (row-major), honoring masks.
pub struct PixelPools {
    pools: Vec<Vec<u32>>,
}

impl PixelPools {
    pub fn build(
        dataset: &SceneDataset,
        masks: Option<&[PixelMask]>,
        rays_per_image: usize,
    ) -> Result<Self, TrainError> {
        let w = dataset.intrinsics.width as usize;
        let h = dataset.intrinsics.height as usize;
        let mut pools = Vec::with_capacity(dataset.frames.len());
        for f in 0..dataset.frames.len() {
            let pool: Vec<u32> = match masks {
                Some(ms) => (0..(w * h) as u32)
                    .filter(|&i| !ms[f].grid[i as usize])
                    .collect(),
                None => (0..(w * h) as u32).collect(),
            };
            if !dataset.is_holdout(f) && pool.len() < rays_per_image {
                return Err(TrainError::NotEnoughUnmaskedPixels {
                    frame: f,
                    available: pool.len(),
                    requested: rays_per_image,
                });
            }
            pools.push(pool);
        }
        Ok(Self { pools })
    }

    /// Draw `count` distinct pixels of `frame` uniformly without replacement.
    fn draw(&mut self, frame: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
        let pool = &mut self.pools[frame];
        for i in 0..count {
            let j = rng.random_range(i..pool.len());
            pool.swap(i, j);
        }
        pool[..count].to_vec()
    }
}

/// Freeze a training batch: choose frames, window centers, pixels, and
/// neighbor sets at the current refined poses.
///
/// Returns the plan and the number of sampled rays that landed on masked
/// pixels (always zero when the pools honor the masks; re-checked here so
/// the exclusion contract is observable end to end).
#[allow(clippy::too_many_arguments)]
pub fn sample_batch_plan(
    dataset: &SceneDataset,
    masks: Option<&[PixelMask]>,
    store: &ParameterStore,
    pools: &mut PixelPools,
    zero_features: &FeatureTable,
    images_per_batch: usize,
    rays_per_image: usize,
    window_m: usize,
    augmentation_h: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(BatchPlan, u64), TrainError> {
    let training = dataset.training_frames();
    let k = store.layout.model.k_neighbors;
    let width = dataset.intrinsics.width;
    let mut violations = 0u64;

    let picks = sample_indices(rng, training.len(), images_per_batch.min(training.len()));
    let mut images = Vec::with_capacity(images_per_batch);
    for pick in picks.iter() {
        let frame = training[pick];
        // window augmentation: adjacent cloud within +-H frames
        let h = rng.random_range(-(augmentation_h as i64)..=augmentation_h as i64);
        let window_center =
            (frame as i64 + h).clamp(0, dataset.frames.len() as i64 - 1) as usize;
        let cloud = merge_window(dataset, window_center, window_m, zero_features)?;

        let pose = store.refined_pose(frame, &dataset.frames[frame].pose);
        let (rot, trans) = refine_pose(&pose);
        let rt = mat3_transpose(&rotation_to_matrix(rot));

        let pixels = pools.draw(frame, rays_per_image, rng);
        let mut rays = Vec::with_capacity(pixels.len());
        for &pix in &pixels {
            let row = pix / width;
            let col = pix % width;
            if let Some(ms) = masks {
                if ms[frame].is_masked(row, col) {
                    violations += 1;
                }
            }
            let ray = cast_ray(&dataset.intrinsics, &rt, &trans, (row, col));
            let neighbors = nearest_points(&cloud, &ray, k)?;
            rays.push(RayPlan {
                pixel: (row, col),
                target: dataset.frames[frame].image.pixel(row, col),
                neighbors,
            });
        }
        images.push(ImagePlan {
            frame,
            window_center,
            cloud,
            rays,
        });
    }
    Ok((BatchPlan { images }, violations))
}

/// Cached index templates for tape gathers.
pub struct TapeTemplates {
    rot_split: Arc<[u32]>,
    trans_split: Arc<[u32]>,
    transpose9: Arc<[u32]>,
    component: [Arc<[u32]>; 3],
    encode_dir: Arc<[u32]>,
    encode_feat: Arc<[u32]>,
}

impl TapeTemplates {
    pub fn new(layout: &SegmentLayout) -> Self {
        let model = &layout.model;
        Self {
            rot_split: Arc::from([0u32, 1, 2].as_slice()),
            trans_split: Arc::from([3u32, 4, 5].as_slice()),
            transpose9: Arc::from([0u32, 3, 6, 1, 4, 7, 2, 5, 8].as_slice()),
            component: [
                Arc::from([0u32].as_slice()),
                Arc::from([1u32].as_slice()),
                Arc::from([2u32].as_slice()),
            ],
            encode_dir: interleave_indices(3, model.l_dir),
            encode_feat: interleave_indices(model.feature_dim, model.l_feat),
        }
    }
}

/// Maps the band-major concat `[x, w0 cos, w0 sin, ...]` onto the
/// component-major layout of `frequency_encode`.
fn interleave_indices(n: usize, l: usize) -> Arc<[u32]> {
    let mut idx = Vec::with_capacity((2 * l + 1) * n);
    for c in 0..n {
        idx.push(c as u32);
        for band in 0..l {
            idx.push(((1 + 2 * band) * n + c) as u32);
            idx.push(((2 + 2 * band) * n + c) as u32);
        }
    }
    Arc::from(idx.as_slice())
}

fn encode_on_tape(
    tape: &mut Tape,
    x: NodeId,
    schedule: &FrequencySchedule,
    idx: &Arc<[u32]>,
) -> NodeId {
    let weights = schedule.weights();
    let mut parts = Vec::with_capacity(1 + 2 * schedule.order_l);
    parts.push(x);
    for (i, &w) in weights.iter().enumerate() {
        let freq = (1u64 << i) as f64 * std::f64::consts::PI;
        let arg = tape.scale(x, freq);
        let c = tape.cos(arg);
        parts.push(tape.scale(c, w));
        let s = tape.sin(arg);
        parts.push(tape.scale(s, w));
    }
    let band_major = tape.concat(&parts);
    tape.gather(band_major, Arc::clone(idx))
}

/// Rodrigues coefficients A, B on the tape, mirroring
/// `geometry::rodrigues_coeffs` branch for branch.
fn rodrigues_on_tape(tape: &mut Tape, theta_sq: NodeId) -> (NodeId, NodeId) {
    if tape.scalar(theta_sq) < 1e-16 {
        let t4 = tape.mul(theta_sq, theta_sq);
        let a1 = tape.scale(theta_sq, -1.0 / 6.0);
        let a2 = tape.scale(t4, 1.0 / 120.0);
        let a12 = tape.add(a1, a2);
        let a = tape.add_const(a12, 1.0);
        let b1 = tape.scale(theta_sq, -1.0 / 24.0);
        let b2 = tape.scale(t4, 1.0 / 720.0);
        let b12 = tape.add(b1, b2);
        let b = tape.add_const(b12, 0.5);
        (a, b)
    } else {
        let theta = tape.sqrt(theta_sq);
        let st = tape.sin(theta);
        let a = tape.div(st, theta);
        let ct = tape.cos(theta);
        let nct = tape.neg(ct);
        let nct1 = tape.add_const(nct, 1.0);
        let b = tape.div(nct1, theta_sq);
        (a, b)
    }
}

/// Row-major rotation entries on the tape, mirroring
/// `geometry::rotation_entries`.
fn rotation_entries_on_tape(
    tape: &mut Tape,
    a: NodeId,
    b: NodeId,
    wx: NodeId,
    wy: NodeId,
    wz: NodeId,
) -> NodeId {
    let xx = tape.mul(wx, wx);
    let yy = tape.mul(wy, wy);
    let zz = tape.mul(wz, wz);
    let xy = tape.mul(wx, wy);
    let xz = tape.mul(wx, wz);
    let yz = tape.mul(wy, wz);

    let mut diag = |m: NodeId, n: NodeId| {
        let s = tape.add(m, n);
        let ns = tape.neg(s);
        let bs = tape.mul(b, ns);
        tape.add_const(bs, 1.0)
    };
    let e0 = diag(yy, zz);
    let e4 = diag(xx, zz);
    let e8 = diag(xx, yy);

    let mut off_neg = |w: NodeId, prod: NodeId| {
        let aw = tape.mul(a, w);
        let naw = tape.neg(aw);
        let bp = tape.mul(b, prod);
        tape.add(naw, bp)
    };
    let e1 = off_neg(wz, xy);
    let e5 = off_neg(wx, yz);
    let e6 = off_neg(wy, xz);

    let mut off_pos = |w: NodeId, prod: NodeId| {
        let aw = tape.mul(a, w);
        let bp = tape.mul(b, prod);
        tape.add(aw, bp)
    };
    let e3 = off_pos(wz, xy);
    let e7 = off_pos(wx, yz);
    let e2 = off_pos(wy, xz);

    tape.concat(&[e0, e1, e2, e3, e4, e5, e6, e7, e8])
}

struct PoseNodes {
    rt9: NodeId,
    origin: NodeId,
}

fn pose_nodes_on_tape(
    tape: &mut Tape,
    store: &ParameterStore,
    frame: usize,
    base: &crate::geometry::CameraPose,
    templates: &TapeTemplates,
) -> PoseNodes {
    let range = store.layout.pose_delta_range(frame);
    let delta = tape.param(&store.values, range.start, 6);
    let d_rot = tape.gather(delta, Arc::clone(&templates.rot_split));
    let d_trans = tape.gather(delta, Arc::clone(&templates.trans_split));
    let rot_c = tape.constant(&base.rotation_vec);
    let trans_c = tape.constant(&base.translation);
    let w = tape.add(rot_c, d_rot);
    let t = tape.add(trans_c, d_trans);

    let theta_sq = tape.dot(w, w);
    let (a, b) = rodrigues_on_tape(tape, theta_sq);
    let wx = tape.gather(w, Arc::clone(&templates.component[0]));
    let wy = tape.gather(w, Arc::clone(&templates.component[1]));
    let wz = tape.gather(w, Arc::clone(&templates.component[2]));
    let r9 = rotation_entries_on_tape(tape, a, b, wx, wy, wz);
    let rt9 = tape.gather(r9, Arc::clone(&templates.transpose9));
    let c = tape.matvec(rt9, t, 3, 3);
    let origin = tape.neg(c);
    PoseNodes { rt9, origin }
}

/// Replay a frozen batch plan on the tape and return the scalar loss node.
pub fn build_taped_loss(
    tape: &mut Tape,
    store: &ParameterStore,
    dataset: &SceneDataset,
    plan: &BatchPlan,
    schedules: &Schedules,
    templates: &TapeTemplates,
) -> NodeId {
    let layout = &store.layout;
    let model = &layout.model;
    let shapes = model.layer_shapes();
    let mlp_layout = model.mlp_layout();
    let mlp_base = layout.mlp.start;

    // shared parameter leaves
    let mlp_nodes: Vec<NodeId> = mlp_layout
        .iter()
        .map(|&(off, len)| tape.param(&store.values, mlp_base + off, len))
        .collect();
    let attention = tape.param(&store.values, layout.attention.start, layout.attention.len());
    let mut feature_nodes: HashMap<usize, NodeId> = HashMap::new();

    let mut loss = tape.scalar_const(0.0);
    for image in &plan.images {
        let base_pose = dataset.frames[image.frame].pose;
        let pose = pose_nodes_on_tape(tape, store, image.frame, &base_pose, templates);
        let f = model.feature_dim;

        for ray in &image.rays {
            let u = pixel_backprojection(
                &dataset.intrinsics,
                ray.pixel.0 as f64,
                ray.pixel.1 as f64,
            );
            let uc = tape.constant(&u);
            let d_un = tape.matvec(pose.rt9, uc, 3, 3);
            let n2 = tape.dot(d_un, d_un);
            let n = tape.sqrt(n2);
            let inv = tape.recip(n);
            let dir = tape.mul_scalar(d_un, inv);

            let mut scores = Vec::with_capacity(ray.neighbors.len());
            let mut feats = Vec::with_capacity(ray.neighbors.len());
            for nb in &ray.neighbors {
                let p = tape.constant(&image.cloud.points[nb.index]);
                let offset = tape.sub(p, pose.origin);
                let tproj = tape.dot(offset, dir);
                let vv = tape.dot(offset, offset);
                let t2 = tape.mul(tproj, tproj);
                let perp2 = tape.sub(vv, t2);
                let perp2c = tape.clamp_min(perp2, ATTENTION_DIST_FLOOR_SQ);
                let dist = tape.sqrt(perp2c);

                let row = image.cloud.feature_rows[nb.index];
                let feat = *feature_nodes.entry(row).or_insert_with(|| {
                    tape.param(&store.values, layout.feature_row_offset(row), f)
                });
                feats.push(feat);
                let geom = tape.concat(&[feat, offset, dist]);
                scores.push(tape.dot(attention, geom));
            }
            let score_vec = tape.concat(&scores);
            let weights = tape.softmax(score_vec);
            let aggregated = tape.weighted_sum(weights, &feats);

            let enc_dir = encode_on_tape(tape, dir, &schedules.dir, &templates.encode_dir);
            let enc_feat =
                encode_on_tape(tape, aggregated, &schedules.feat, &templates.encode_feat);
            let input = tape.concat(&[enc_dir, enc_feat]);

            let z1 = tape.matvec(mlp_nodes[0], input, shapes[0].0, shapes[0].1);
            let z1b = tape.add(z1, mlp_nodes[1]);
            let a1 = tape.relu(z1b);
            let z2 = tape.matvec(mlp_nodes[2], a1, shapes[1].0, shapes[1].1);
            let z2b = tape.add(z2, mlp_nodes[3]);
            let a2 = tape.relu(z2b);
            let z3 = tape.matvec(mlp_nodes[4], a2, shapes[2].0, shapes[2].1);
            let z3b = tape.add(z3, mlp_nodes[5]);
            let rgb = tape.sigmoid(z3b);

            let target = tape.constant(&ray.target);
            let diff = tape.sub(rgb, target);
            let contrib = tape.dot(diff, diff);
            loss = tape.add(loss, contrib);
        }
    }
    loss
}

/// Photometric loss of Eq-style summed squared error over sampled rays.
pub fn masked_loss(rendered: &[[f64; 3]], reference: &[[f64; 3]]) -> Result<f64, TrainError> {
    if rendered.len() != reference.len() {
        return Err(TrainError::LossLengthMismatch {
            rendered: rendered.len(),
            reference: reference.len(),
        });
    }
    let mut total = 0.0;
    for (a, b) in rendered.iter().zip(reference) {
        let mut s = 0.0;
        for ch in 0..3 {
            let d = a[ch] - b[ch];
            s += d * d;
        }
        total += s;
    }
    Ok(total)
}

/// Recompute the plan's loss through the plain rendering path. Must match
/// the taped value bit-for-bit; also the function the finite-difference
/// gradient oracle evaluates.
pub fn evaluate_plan_loss(
    store: &ParameterStore,
    dataset: &SceneDataset,
    plan: &BatchPlan,
    schedules: &Schedules,
) -> Result<f64, TrainError> {
    let layout = &store.layout;
    let field = FieldParams {
        config: &layout.model,
        mlp: &store.values[layout.mlp.clone()],
        attention: &store.values[layout.attention.clone()],
    };
    let mut stats = RenderStats::default();
    let mut rendered = Vec::new();
    let mut targets = Vec::new();
    for image in &plan.images {
        let pose = store.refined_pose(image.frame, &dataset.frames[image.frame].pose);
        let (rot, trans) = refine_pose(&pose);
        let rt = mat3_transpose(&rotation_to_matrix(rot));

        // bind current feature values to the plan's cloud
        let mut cloud = image.cloud.clone();
        for (i, &row) in cloud.feature_rows.iter().enumerate() {
            let src = layout.feature_row_offset(row);
            let dst = i * cloud.feature_dim;
            cloud.features[dst..dst + cloud.feature_dim]
                .copy_from_slice(&store.values[src..src + cloud.feature_dim]);
        }

        for ray_plan in &image.rays {
            let ray = cast_ray(&dataset.intrinsics, &rt, &trans, ray_plan.pixel);
            let descriptor =
                descriptor_from_neighbors(&cloud, &ray, &ray_plan.neighbors, field.attention);
            let rgb = shade_descriptor(&descriptor, &field, schedules, &mut stats);
            rendered.push(rgb);
            targets.push(ray_plan.target);
        }
    }
    masked_loss(&rendered, &targets)
}
