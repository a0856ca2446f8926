//! Scene data model: images, frames, per-frame point samples, temporal
//! window merging, dataset I/O, and the synthetic-scene generator used as
//! the verification oracle.

mod io;
mod synth;

pub use io::{load_dataset, read_pgm, read_ppm, save_dataset, write_pgm, write_ppm};
pub use synth::{
    render_static_oracle, synthesize_scene, BoxSpec, StaticGeometry, SynthConfig, TrajectoryKind,
};

use crate::geometry::{CameraIntrinsics, CameraPose, GeometryError, Vec3};
use crate::motion::ObjectTrack;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SceneError {
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
    #[error("merge window around frame {center} (m={m}) produced no points")]
    EmptyWindow { center: usize, m: usize },
    #[error("frame index {0} out of range (dataset has {1} frames)")]
    FrameOutOfRange(usize, usize),
    #[error("invalid scene config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Motion(#[from] crate::motion::MotionError),
}

/// H x W x 3 image with values in [0, 1], row-major, channels interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: u32,
    pub height: u32,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width as usize * height as usize * 3],
        }
    }

    #[inline]
    pub fn pixel(&self, row: u32, col: u32) -> [f64; 3] {
        let i = (row as usize * self.width as usize + col as usize) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, row: u32, col: u32, rgb: [f64; 3]) {
        let i = (row as usize * self.width as usize + col as usize) * 3;
        self.data[i] = rgb[0];
        self.data[i + 1] = rgb[1];
        self.data[i + 2] = rgb[2];
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

/// Snap a unit-interval value onto the 8-bit grid used by image files, so
/// in-memory images round-trip bit-exactly through PPM.
pub fn quantize_unit(x: f64) -> f64 {
    (x.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// One captured frame: image, pose, and the frame's own point sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub image: Image,
    pub pose: CameraPose,
    pub depth_points: Vec<Vec3>,
    pub frame_index: usize,
}

/// A full scene: ordered frames, shared intrinsics, and object tracks.
///
/// Every `holdout_stride`-th frame (counting from 1) is tagged held-out and
/// excluded from training; its image is reserved for novel-view evaluation.
#[derive(Debug, Clone)]
pub struct SceneDataset {
    pub frames: Vec<Frame>,
    pub intrinsics: CameraIntrinsics,
    pub tracks: Vec<ObjectTrack>,
    pub holdout_stride: usize,
}

impl SceneDataset {
    pub fn is_holdout(&self, frame_index: usize) -> bool {
        (frame_index + 1) % self.holdout_stride == 0
    }

    pub fn training_frames(&self) -> Vec<usize> {
        (0..self.frames.len())
            .filter(|&f| !self.is_holdout(f))
            .collect()
    }

    pub fn holdout_frames(&self) -> Vec<usize> {
        (0..self.frames.len())
            .filter(|&f| self.is_holdout(f))
            .collect()
    }

    /// Global feature-row offset of each frame's first point, plus the total
    /// count as a final sentinel entry.
    pub fn point_row_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.frames.len() + 1);
        let mut acc = 0usize;
        for frame in &self.frames {
            offsets.push(acc);
            acc += frame.depth_points.len();
        }
        offsets.push(acc);
        offsets
    }

    pub fn total_points(&self) -> usize {
        self.frames.iter().map(|f| f.depth_points.len()).sum()
    }
}

/// Per-point feature vectors for the whole scene, indexed by the global
/// point row (frame order, then point order within the frame).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub dim: usize,
    pub values: Vec<f64>,
}

impl FeatureTable {
    pub fn zeros(rows: usize, dim: usize) -> Self {
        Self {
            dim,
            values: vec![0.0; rows * dim],
        }
    }

    pub fn from_values(values: Vec<f64>, dim: usize) -> Self {
        assert_eq!(values.len() % dim, 0);
        Self { dim, values }
    }

    pub fn rows(&self) -> usize {
        self.values.len() / self.dim
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.dim..(r + 1) * self.dim]
    }
}

/// Point cloud with per-point features and their global row identities.
///
/// `feature_rows[i]` is the scene-wide feature row backing point `i`, so
/// clouds merged from overlapping windows share feature storage.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturedPointCloud {
    pub points: Vec<Vec3>,
    /// Flat feature values, `feature_dim` per point (a snapshot of the table).
    pub features: Vec<f64>,
    pub feature_dim: usize,
    pub feature_rows: Vec<usize>,
    /// Center frame of the merge window this cloud came from.
    pub frame_index: usize,
}

impl FeaturedPointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    /// Reorder points lexicographically by coordinates (features and rows
    /// follow). Canonicalizes storage order so renders are comparable across
    /// permutations of the input.
    pub fn canonical_sort(&mut self) {
        let mut order: Vec<usize> = (0..self.points.len()).collect();
        order.sort_by(|&a, &b| {
            let pa = &self.points[a];
            let pb = &self.points[b];
            pa.partial_cmp(pb).unwrap_or(std::cmp::Ordering::Equal)
        });
        let points = order.iter().map(|&i| self.points[i]).collect();
        let feature_rows = order.iter().map(|&i| self.feature_rows[i]).collect();
        let mut features = Vec::with_capacity(self.features.len());
        for &i in &order {
            features.extend_from_slice(&self.features[i * self.feature_dim..(i + 1) * self.feature_dim]);
        }
        self.points = points;
        self.features = features;
        self.feature_rows = feature_rows;
    }
}

/// Merge the depth points of frames `[center-m, center+m]` (clipped to the
/// dataset bounds) into one cloud, looking up features from `table`.
///
/// Point order is deterministic: frame order, then point order within the
/// frame. Duplicates across frames are kept distinct.
pub fn merge_window(
    dataset: &SceneDataset,
    center_frame: usize,
    m: usize,
    table: &FeatureTable,
) -> Result<FeaturedPointCloud, SceneError> {
    if center_frame >= dataset.frames.len() {
        return Err(SceneError::FrameOutOfRange(
            center_frame,
            dataset.frames.len(),
        ));
    }
    let lo = center_frame.saturating_sub(m);
    let hi = (center_frame + m).min(dataset.frames.len() - 1);
    let offsets = dataset.point_row_offsets();
    let mut points = Vec::new();
    let mut feature_rows = Vec::new();
    for f in lo..=hi {
        let frame = &dataset.frames[f];
        for (i, &p) in frame.depth_points.iter().enumerate() {
            points.push(p);
            feature_rows.push(offsets[f] + i);
        }
    }
    if points.is_empty() {
        return Err(SceneError::EmptyWindow { center: center_frame, m });
    }
    let mut features = Vec::with_capacity(points.len() * table.dim);
    for &r in &feature_rows {
        features.extend_from_slice(table.row(r));
    }
    Ok(FeaturedPointCloud {
        points,
        features,
        feature_dim: table.dim,
        feature_rows,
        frame_index: center_frame,
    })
}
