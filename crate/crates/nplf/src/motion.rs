//! Track-level moving/static classification and per-frame pixel masks.
//!
//! Each tracked object carries per-frame motion scores from an upstream
//! detector. Scores are thresholded into binary labels and a median vote
//! promotes them to a single scene-level decision, so an object is either
//! masked in every frame it appears in or in none. Masks are the union of
//! the bounding boxes of voted-moving tracks; static tracks contribute no
//! masked pixels, which keeps parked-vehicle texture available to training.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MotionError {
    #[error("cannot vote on an empty label sequence")]
    EmptyLabels,
    #[error("track {object_id}: frame indices must be strictly increasing (at observation {at})")]
    NonMonotonicFrames { object_id: u32, at: usize },
    #[error("track {object_id}: degenerate bbox {bbox:?} at frame {frame}")]
    DegenerateBbox {
        object_id: u32,
        frame: usize,
        bbox: [u32; 4],
    },
    #[error("mask dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(u32, u32, u32, u32),
}

/// One detection of a tracked object.
///
/// `bbox` is `[row0, col0, row1, col1]` in pixels, half-open: rows
/// `row0..row1`, cols `col0..col1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackObservation {
    pub frame_index: usize,
    pub bbox: [u32; 4],
    /// Upstream motion score in [0, 1].
    pub motion_score: f64,
}

/// All observations of one tracked object instance.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectTrack {
    pub object_id: u32,
    pub observations: Vec<TrackObservation>,
}

impl ObjectTrack {
    /// Validates strictly increasing frame indices and non-degenerate boxes.
    pub fn new(object_id: u32, observations: Vec<TrackObservation>) -> Result<Self, MotionError> {
        for (i, obs) in observations.iter().enumerate() {
            if i > 0 && observations[i - 1].frame_index >= obs.frame_index {
                return Err(MotionError::NonMonotonicFrames { object_id, at: i });
            }
            let [r0, c0, r1, c1] = obs.bbox;
            if r1 <= r0 || c1 <= c0 {
                return Err(MotionError::DegenerateBbox {
                    object_id,
                    frame: obs.frame_index,
                    bbox: obs.bbox,
                });
            }
        }
        Ok(Self {
            object_id,
            observations,
        })
    }

    pub fn scores(&self) -> Vec<f64> {
        self.observations.iter().map(|o| o.motion_score).collect()
    }
}

/// Threshold per-frame scores into binary motion labels (`>=` is inclusive).
pub fn binarize_scores(track: &ObjectTrack, threshold: f64) -> Vec<u8> {
    debug_assert!(threshold > 0.0 && threshold < 1.0);
    track
        .observations
        .iter()
        .map(|o| u8::from(o.motion_score >= threshold))
        .collect()
}

/// Scene-level motion vote: 1 iff the median of the labels is >= 0.5.
///
/// An even-length median is the mean of the two middle values, so a tied
/// sequence classifies as moving.
pub fn vote_motion(labels: &[u8]) -> Result<u8, MotionError> {
    if labels.is_empty() {
        return Err(MotionError::EmptyLabels);
    }
    let mut sorted: Vec<u8> = labels.to_vec();
    sorted.sort_unstable();
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2] as f64
    } else {
        (sorted[n / 2 - 1] as f64 + sorted[n / 2] as f64) / 2.0
    };
    Ok(u8::from(median >= 0.5))
}

/// Per-frame boolean exclusion grid; `true` pixels are skipped by ray casting.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelMask {
    pub width: u32,
    pub height: u32,
    pub frame_index: usize,
    pub grid: Vec<bool>,
}

impl PixelMask {
    pub fn all_clear(width: u32, height: u32, frame_index: usize) -> Self {
        Self {
            width,
            height,
            frame_index,
            grid: vec![false; width as usize * height as usize],
        }
    }

    pub fn is_masked(&self, row: u32, col: u32) -> bool {
        self.grid[row as usize * self.width as usize + col as usize]
    }

    pub fn masked_count(&self) -> usize {
        self.grid.iter().filter(|&&m| m).count()
    }

    fn mark_bbox(&mut self, bbox: [u32; 4]) {
        let [r0, c0, r1, c1] = bbox;
        let r1 = r1.min(self.height);
        let c1 = c1.min(self.width);
        for r in r0.min(self.height)..r1 {
            for c in c0.min(self.width)..c1 {
                self.grid[r as usize * self.width as usize + c as usize] = true;
            }
        }
    }
}

/// Vote tally for one track, as reported by the detect command.
#[derive(Debug, Clone, PartialEq)]
pub struct VoteSummary {
    pub object_id: u32,
    pub votes_moving: usize,
    pub votes_static: usize,
    /// Scene-level label: 1 = moving.
    pub label: u8,
}

pub fn vote_summaries(
    tracks: &[ObjectTrack],
    threshold: f64,
) -> Result<Vec<VoteSummary>, MotionError> {
    tracks
        .iter()
        .map(|t| {
            let labels = binarize_scores(t, threshold);
            let label = vote_motion(&labels)?;
            let votes_moving = labels.iter().filter(|&&l| l == 1).count();
            Ok(VoteSummary {
                object_id: t.object_id,
                votes_moving,
                votes_static: labels.len() - votes_moving,
                label,
            })
        })
        .collect()
}

/// Build one mask per frame: the union of the bounding boxes of tracks the
/// vote classified as moving. Boxes reaching outside the image are clipped
/// with a warning rather than rejected.
pub fn build_masks(
    tracks: &[ObjectTrack],
    width: u32,
    height: u32,
    num_frames: usize,
    threshold: f64,
) -> Result<Vec<PixelMask>, MotionError> {
    let mut masks: Vec<PixelMask> = (0..num_frames)
        .map(|f| PixelMask::all_clear(width, height, f))
        .collect();
    for track in tracks {
        let labels = binarize_scores(track, threshold);
        if vote_motion(&labels)? == 0 {
            continue; // static: keep its pixels available
        }
        for obs in &track.observations {
            if obs.frame_index >= num_frames {
                continue;
            }
            let [r0, c0, r1, c1] = obs.bbox;
            if r1 > height || c1 > width {
                log::warn!(
                    "track {} frame {}: bbox {:?} exceeds {}x{} image, clipping",
                    track.object_id,
                    obs.frame_index,
                    obs.bbox,
                    width,
                    height
                );
            }
            masks[obs.frame_index].mark_bbox([r0, c0, r1, c1]);
        }
    }
    Ok(masks)
}

/// Intersection over union of two masks; vacuously 1 when both are empty.
pub fn mask_iou(predicted: &PixelMask, reference: &PixelMask) -> Result<f64, MotionError> {
    if predicted.width != reference.width || predicted.height != reference.height {
        return Err(MotionError::DimensionMismatch(
            predicted.width,
            predicted.height,
            reference.width,
            reference.height,
        ));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&a, &b) in predicted.grid.iter().zip(&reference.grid) {
        inter += usize::from(a && b);
        union += usize::from(a || b);
    }
    if union == 0 {
        Ok(1.0)
    } else {
        Ok(inter as f64 / union as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn track(id: u32, obs: &[(usize, [u32; 4], f64)]) -> ObjectTrack {
        ObjectTrack::new(
            id,
            obs.iter()
                .map(|&(frame_index, bbox, motion_score)| TrackObservation {
                    frame_index,
                    bbox,
                    motion_score,
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn binarize_examples() {
        let t = track(0, &[(0, [0, 0, 1, 1], 0.9), (1, [0, 0, 1, 1], 0.2), (2, [0, 0, 1, 1], 0.6)]);
        assert_eq!(binarize_scores(&t, 0.5), vec![1, 0, 1]);

        let t = track(0, &[(0, [0, 0, 1, 1], 0.0), (1, [0, 0, 1, 1], 0.0)]);
        assert_eq!(binarize_scores(&t, 0.5), vec![0, 0]);

        // score equal to threshold is inclusive
        let t = track(0, &[(0, [0, 0, 1, 1], 0.5)]);
        assert_eq!(binarize_scores(&t, 0.5), vec![1]);
    }

    #[test]
    fn vote_examples() {
        assert_eq!(vote_motion(&[1, 1, 0, 1, 1]).unwrap(), 1);
        assert_eq!(vote_motion(&[0, 0, 0]).unwrap(), 0);
        // even-length tie: median 0.5 is inclusive
        assert_eq!(vote_motion(&[0, 1]).unwrap(), 1);
        assert!(matches!(vote_motion(&[]), Err(MotionError::EmptyLabels)));
    }

    #[test]
    fn vote_matches_brute_force_median_exhaustively() {
        // All binary sequences up to length 12.
        for len in 1usize..=12 {
            for bits in 0u32..(1 << len) {
                let labels: Vec<u8> = (0..len).map(|i| ((bits >> i) & 1) as u8).collect();
                let got = vote_motion(&labels).unwrap();
                // Oracle: median by definition on the sorted copy.
                let mut sorted = labels.clone();
                sorted.sort_unstable();
                let med = if len % 2 == 1 {
                    sorted[len / 2] as f64
                } else {
                    0.5 * (sorted[len / 2 - 1] as f64 + sorted[len / 2] as f64)
                };
                assert_eq!(got, u8::from(med >= 0.5), "labels {labels:?}");
            }
        }
    }

    #[test]
    fn flip_robustness_odd_majorities() {
        // Flipping strictly fewer than ceil(n/2) labels of an all-1 sequence
        // never changes the vote.
        for n in (1usize..=11).step_by(2) {
            let need = n.div_ceil(2);
            for flips in 0..need {
                let mut labels = vec![1u8; n];
                for l in labels.iter_mut().take(flips) {
                    *l = 0;
                }
                assert_eq!(vote_motion(&labels).unwrap(), 1, "n={n} flips={flips}");
            }
        }
    }

    proptest! {
        #[test]
        fn vote_permutation_invariant(labels in proptest::collection::vec(0u8..2, 1..40), seed in 0u64..1000) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let baseline = vote_motion(&labels).unwrap();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut shuffled = labels.clone();
            shuffled.shuffle(&mut rng);
            prop_assert_eq!(vote_motion(&shuffled).unwrap(), baseline);
        }

        #[test]
        fn adding_moving_track_never_unmasks(
            r0 in 0u32..50, c0 in 0u32..50, h in 1u32..20, w in 1u32..20
        ) {
            let base = vec![track(0, &[(0, [5, 5, 25, 25], 0.9)])];
            let masks_before = build_masks(&base, 64, 64, 1, 0.5).unwrap();
            let mut extended = base.clone();
            extended.push(track(1, &[(0, [r0, c0, r0 + h, c0 + w], 0.95)]));
            let masks_after = build_masks(&extended, 64, 64, 1, 0.5).unwrap();
            for (a, b) in masks_before[0].grid.iter().zip(&masks_after[0].grid) {
                prop_assert!(!a || *b);
            }
        }
    }

    #[test]
    fn masks_empty_without_moving_tracks() {
        let tracks = vec![track(0, &[(0, [1, 1, 5, 5], 0.1), (1, [1, 1, 5, 5], 0.2)])];
        let masks = build_masks(&tracks, 32, 32, 3, 0.5).unwrap();
        assert_eq!(masks.len(), 3);
        assert!(masks.iter().all(|m| m.masked_count() == 0));
    }

    #[test]
    fn single_moving_bbox_area() {
        let tracks = vec![track(
            3,
            &[(5, [10, 10, 20, 30], 0.9), (6, [10, 10, 20, 30], 0.8)],
        )];
        let masks = build_masks(&tracks, 64, 64, 8, 0.5).unwrap();
        assert_eq!(masks[5].masked_count(), 10 * 20);
        assert!(masks[5].is_masked(10, 10));
        assert!(masks[5].is_masked(19, 29));
        assert!(!masks[5].is_masked(20, 10));
        assert!(!masks[5].is_masked(10, 30));
        assert_eq!(masks[0].masked_count(), 0);
    }

    #[test]
    fn overlapping_boxes_match_brute_force_union() {
        let tracks = vec![
            track(0, &[(0, [2, 2, 12, 22], 0.9)]),
            track(1, &[(0, [7, 12, 17, 32], 0.9)]),
        ];
        let masks = build_masks(&tracks, 40, 40, 1, 0.5).unwrap();
        // brute-force per-pixel union oracle
        let mut expected = 0usize;
        for r in 0u32..40 {
            for c in 0u32..40 {
                let in_a = (2..12).contains(&r) && (2..22).contains(&c);
                let in_b = (7..17).contains(&r) && (12..32).contains(&c);
                let want = in_a || in_b;
                expected += usize::from(want);
                assert_eq!(masks[0].is_masked(r, c), want, "pixel ({r},{c})");
            }
        }
        assert_eq!(masks[0].masked_count(), expected);
    }

    #[test]
    fn out_of_bounds_bbox_is_clipped() {
        let tracks = vec![track(0, &[(0, [28, 28, 40, 44], 0.9)])];
        let masks = build_masks(&tracks, 32, 32, 1, 0.5).unwrap();
        assert_eq!(masks[0].masked_count(), 4 * 4);
    }

    #[test]
    fn temporal_consistency_after_voting() {
        // A track with mixed per-frame labels is masked either everywhere or
        // nowhere once the vote is applied.
        let tracks = vec![track(
            0,
            &[
                (0, [1, 1, 4, 4], 0.9),
                (1, [1, 1, 4, 4], 0.1), // inconsistent per-frame label
                (2, [1, 1, 4, 4], 0.8),
            ],
        )];
        let masks = build_masks(&tracks, 16, 16, 3, 0.5).unwrap();
        let statuses: Vec<bool> = (0..3).map(|f| masks[f].is_masked(2, 2)).collect();
        assert!(
            statuses.iter().all(|&s| s) || statuses.iter().all(|&s| !s),
            "masking status varies across frames: {statuses:?}"
        );
        assert!(statuses[1], "voted moving, so frame 1 must be masked too");
    }

    #[test]
    fn iou_examples() {
        let mut a = PixelMask::all_clear(30, 30, 0);
        a.mark_bbox([0, 0, 10, 20]);
        assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);

        let mut b = PixelMask::all_clear(30, 30, 0);
        b.mark_bbox([15, 0, 25, 20]);
        assert_eq!(mask_iou(&a, &b).unwrap(), 0.0);

        // half-overlapping equal-area rectangles: intersection 100, union 300
        let mut c = PixelMask::all_clear(30, 30, 0);
        c.mark_bbox([0, 10, 10, 30]);
        let iou = mask_iou(&a, &c).unwrap();
        assert!((iou - 1.0 / 3.0).abs() < 1e-15, "iou {iou}");

        let empty = PixelMask::all_clear(30, 30, 0);
        assert_eq!(mask_iou(&empty, &empty).unwrap(), 1.0);

        let other = PixelMask::all_clear(31, 30, 0);
        assert!(mask_iou(&a, &other).is_err());
    }

    #[test]
    fn track_validation() {
        assert!(ObjectTrack::new(
            0,
            vec![
                TrackObservation {
                    frame_index: 1,
                    bbox: [0, 0, 2, 2],
                    motion_score: 0.5
                },
                TrackObservation {
                    frame_index: 1,
                    bbox: [0, 0, 2, 2],
                    motion_score: 0.5
                },
            ],
        )
        .is_err());
        assert!(ObjectTrack::new(
            0,
            vec![TrackObservation {
                frame_index: 0,
                bbox: [5, 5, 5, 9],
                motion_score: 0.5
            }],
        )
        .is_err());
    }
}
