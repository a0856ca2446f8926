//! Flat parameter vector with named segments and its gradient buffer.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::geometry::CameraPose;
use crate::lightfield::{init_attention_params, init_mlp_params, ModelConfig};
use crate::scene::FeatureTable;

pub const SEGMENT_NAMES: [&str; 4] = ["point_features", "mlp_weights", "attention_weights", "pose_deltas"];

/// Fixed partition of the parameter vector:
/// `[point_features | mlp | attention | pose_deltas]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentLayout {
    pub model: ModelConfig,
    pub num_feature_rows: usize,
    pub num_frames: usize,
    pub point_features: Range<usize>,
    pub mlp: Range<usize>,
    pub attention: Range<usize>,
    pub pose_deltas: Range<usize>,
}

impl SegmentLayout {
    pub fn new(model: ModelConfig, num_feature_rows: usize, num_frames: usize) -> Self {
        let features_len = num_feature_rows * model.feature_dim;
        let mlp_len = model.mlp_param_count();
        let attention_len = model.attention_param_count();
        let pose_len = 6 * num_frames;
        let f0 = 0;
        let m0 = f0 + features_len;
        let a0 = m0 + mlp_len;
        let p0 = a0 + attention_len;
        Self {
            model,
            num_feature_rows,
            num_frames,
            point_features: f0..m0,
            mlp: m0..a0,
            attention: a0..p0,
            pose_deltas: p0..p0 + pose_len,
        }
    }

    pub fn total_len(&self) -> usize {
        self.pose_deltas.end
    }

    pub fn feature_row_offset(&self, row: usize) -> usize {
        debug_assert!(row < self.num_feature_rows);
        self.point_features.start + row * self.model.feature_dim
    }

    /// `[dR (3), dt (3)]` of one frame.
    pub fn pose_delta_range(&self, frame: usize) -> Range<usize> {
        debug_assert!(frame < self.num_frames);
        let start = self.pose_deltas.start + 6 * frame;
        start..start + 6
    }

    pub fn segments(&self) -> [(&'static str, Range<usize>); 4] {
        [
            (SEGMENT_NAMES[0], self.point_features.clone()),
            (SEGMENT_NAMES[1], self.mlp.clone()),
            (SEGMENT_NAMES[2], self.attention.clone()),
            (SEGMENT_NAMES[3], self.pose_deltas.clone()),
        ]
    }
}

/// Parameter values plus a same-length gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterStore {
    pub layout: SegmentLayout,
    pub values: Vec<f64>,
    pub grad: Vec<f64>,
}

impl ParameterStore {
    /// Seeded initialization: features ~ N(0, 0.1), MLP Glorot-uniform,
    /// attention scorer and pose deltas exactly zero.
    pub fn init(layout: SegmentLayout, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = vec![0.0; layout.total_len()];
        let normal = Normal::new(0.0, 0.1).expect("valid");
        for v in &mut values[layout.point_features.clone()] {
            *v = normal.sample(&mut rng);
        }
        let mlp = init_mlp_params(&layout.model, &mut rng);
        values[layout.mlp.clone()].copy_from_slice(&mlp);
        let attention = init_attention_params(&layout.model);
        values[layout.attention.clone()].copy_from_slice(&attention);
        let grad = vec![0.0; values.len()];
        Self {
            layout,
            values,
            grad,
        }
    }

    pub fn from_values(layout: SegmentLayout, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), layout.total_len());
        let grad = vec![0.0; values.len()];
        Self {
            layout,
            values,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    /// Base pose with this store's learned deltas attached.
    pub fn refined_pose(&self, frame: usize, base: &CameraPose) -> CameraPose {
        let r = self.layout.pose_delta_range(frame);
        let d = &self.values[r];
        CameraPose {
            rotation_vec: base.rotation_vec,
            translation: base.translation,
            delta_rotation: [d[0], d[1], d[2]],
            delta_translation: [d[3], d[4], d[5]],
        }
    }

    /// Snapshot of the point-feature segment as a lookup table.
    pub fn feature_table(&self) -> FeatureTable {
        FeatureTable::from_values(
            self.values[self.layout.point_features.clone()].to_vec(),
            self.layout.model.feature_dim,
        )
    }

    /// Name of the segment containing a flat coordinate.
    pub fn segment_of(&self, index: usize) -> &'static str {
        for (name, range) in self.layout.segments() {
            if range.contains(&index) {
                return name;
            }
        }
        "out_of_range"
    }
}
