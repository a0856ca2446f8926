//! Image-quality and trajectory metrics.
//!
//! PSNR runs over unmasked pixels (or all pixels without a mask) and is
//! capped at 99 dB so zero-error comparisons stay finite in CSV output.
//! PSNR_M averages the full-image and masked variants. SSIM uses 8x8
//! non-overlapping windows per channel with the standard K1=0.01 / K2=0.03
//! constants. ATE compares camera centers, optionally after closed-form
//! rigid alignment (rotation + translation, no scale).

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::geometry::CameraPose;
use crate::motion::PixelMask;
use crate::scene::Image;

pub const PSNR_CAP_DB: f64 = 99.0;
const SSIM_WINDOW: usize = 8;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("image dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(u32, u32, u32, u32),
    #[error("no unmasked pixels to compare")]
    EmptyUnmaskedSet,
    #[error("image {0}x{1} smaller than the {2}x{2} SSIM window")]
    ImageTooSmall(u32, u32, usize),
    #[error("trajectory length mismatch: {0} vs {1}")]
    TrajectoryLengthMismatch(usize, usize),
    #[error("need at least 2 poses, got {0}")]
    TrajectoryTooShort(usize),
}

fn check_dims(a: &Image, b: &Image) -> Result<(), MetricError> {
    if a.width != b.width || a.height != b.height {
        return Err(MetricError::DimensionMismatch(
            a.width, a.height, b.width, b.height,
        ));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB over the unmasked pixels (all pixels if
/// `mask` is None); identical inputs cap at 99 dB.
pub fn psnr(
    rendered: &Image,
    reference: &Image,
    mask: Option<&PixelMask>,
) -> Result<f64, MetricError> {
    check_dims(rendered, reference)?;
    if let Some(m) = mask {
        if m.width != rendered.width || m.height != rendered.height {
            return Err(MetricError::DimensionMismatch(
                m.width,
                m.height,
                rendered.width,
                rendered.height,
            ));
        }
    }
    let mut sum_sq = 0.0f64;
    let mut count = 0usize;
    for row in 0..rendered.height {
        for col in 0..rendered.width {
            if let Some(m) = mask {
                if m.is_masked(row, col) {
                    continue;
                }
            }
            let a = rendered.pixel(row, col);
            let b = reference.pixel(row, col);
            for ch in 0..3 {
                let d = a[ch] - b[ch];
                sum_sq += d * d;
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(MetricError::EmptyUnmaskedSet);
    }
    let mse = sum_sq / (count * 3) as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

/// Mean of the plain PSNR and the masked PSNR.
pub fn psnr_m(
    rendered: &Image,
    reference: &Image,
    mask: &PixelMask,
) -> Result<f64, MetricError> {
    let full = psnr(rendered, reference, None)?;
    let masked = psnr(rendered, reference, Some(mask))?;
    Ok((full + masked) / 2.0)
}

/// Mean local SSIM over 8x8 non-overlapping windows, per channel.
/// Windows that do not fit entirely inside the image are dropped.
pub fn ssim(rendered: &Image, reference: &Image) -> Result<f64, MetricError> {
    check_dims(rendered, reference)?;
    let w = SSIM_WINDOW;
    if (rendered.width as usize) < w || (rendered.height as usize) < w {
        return Err(MetricError::ImageTooSmall(
            rendered.width,
            rendered.height,
            w,
        ));
    }
    const C1: f64 = 0.01 * 0.01;
    const C2: f64 = 0.03 * 0.03;
    let n = (w * w) as f64;
    let rows = rendered.height as usize / w;
    let cols = rendered.width as usize / w;
    let mut total = 0.0;
    let mut windows = 0usize;
    for ch in 0..3 {
        for wr in 0..rows {
            for wc in 0..cols {
                // two-pass: means first, then central moments
                let mut mean_x = 0.0;
                let mut mean_y = 0.0;
                for r in 0..w {
                    for c in 0..w {
                        let row = (wr * w + r) as u32;
                        let col = (wc * w + c) as u32;
                        mean_x += rendered.pixel(row, col)[ch];
                        mean_y += reference.pixel(row, col)[ch];
                    }
                }
                mean_x /= n;
                mean_y /= n;
                let mut var_x = 0.0;
                let mut var_y = 0.0;
                let mut cov = 0.0;
                for r in 0..w {
                    for c in 0..w {
                        let row = (wr * w + r) as u32;
                        let col = (wc * w + c) as u32;
                        let dx = rendered.pixel(row, col)[ch] - mean_x;
                        let dy = reference.pixel(row, col)[ch] - mean_y;
                        var_x += dx * dx;
                        var_y += dy * dy;
                        cov += dx * dy;
                    }
                }
                var_x /= n;
                var_y /= n;
                cov /= n;
                let value = ((2.0 * mean_x * mean_y + C1) * (2.0 * cov + C2))
                    / ((mean_x * mean_x + mean_y * mean_y + C1) * (var_x + var_y + C2));
                total += value;
                windows += 1;
            }
        }
    }
    Ok(total / windows as f64)
}

/// Per-frame trajectory errors plus their summary statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryErrorReport {
    pub per_frame_errors: Vec<f64>,
    pub mean: f64,
    pub median: f64,
    pub std: f64,
}

impl TrajectoryErrorReport {
    pub fn from_errors(per_frame_errors: Vec<f64>) -> Self {
        let n = per_frame_errors.len() as f64;
        let mean = per_frame_errors.iter().sum::<f64>() / n;
        let var = per_frame_errors
            .iter()
            .map(|e| (e - mean) * (e - mean))
            .sum::<f64>()
            / n;
        let mut sorted = per_frame_errors.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = if sorted.len() % 2 == 1 {
            sorted[sorted.len() / 2]
        } else {
            (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2]) / 2.0
        };
        Self {
            per_frame_errors,
            mean,
            median,
            std: var.sqrt(),
        }
    }
}

/// Closed-form rigid alignment (Kabsch, no scale) of `from` onto `to`.
fn rigid_align(from: &[Vector3<f64>], to: &[Vector3<f64>]) -> (Matrix3<f64>, Vector3<f64>) {
    let n = from.len() as f64;
    let cf: Vector3<f64> = from.iter().sum::<Vector3<f64>>() / n;
    let ct: Vector3<f64> = to.iter().sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    for (a, b) in from.iter().zip(to) {
        h += (a - cf) * (b - ct).transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u.expect("svd computes u");
    let v_t = svd.v_t.expect("svd computes v_t");
    let mut d = Matrix3::identity();
    let det = (v_t.transpose() * u.transpose()).determinant();
    if det < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = v_t.transpose() * d * u.transpose();
    let t = ct - r * cf;
    (r, t)
}

/// Absolute trajectory error between estimated and ground-truth camera
/// centers, optionally after rigid alignment of the estimated centers.
pub fn ate(
    estimated: &[CameraPose],
    ground_truth: &[CameraPose],
    align: bool,
) -> Result<TrajectoryErrorReport, MetricError> {
    if estimated.len() != ground_truth.len() {
        return Err(MetricError::TrajectoryLengthMismatch(
            estimated.len(),
            ground_truth.len(),
        ));
    }
    if estimated.len() < 2 {
        return Err(MetricError::TrajectoryTooShort(estimated.len()));
    }
    let centers = |poses: &[CameraPose]| -> Vec<Vector3<f64>> {
        poses
            .iter()
            .map(|p| {
                let c = p.camera_center();
                Vector3::new(c[0], c[1], c[2])
            })
            .collect()
    };
    let est = centers(estimated);
    let gt = centers(ground_truth);
    let errors: Vec<f64> = if align {
        let (r, t) = rigid_align(&est, &gt);
        est.iter()
            .zip(&gt)
            .map(|(a, b)| ((r * a + t) - b).norm())
            .collect()
    } else {
        est.iter().zip(&gt).map(|(a, b)| (a - b).norm()).collect()
    };
    Ok(TrajectoryErrorReport::from_errors(errors))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{perturb_pose_seeded, rotation_to_matrix, mat3_mul_vec};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn image_from_fn(w: u32, h: u32, f: impl Fn(u32, u32, usize) -> f64) -> Image {
        let mut img = Image::new(w, h);
        for r in 0..h {
            for c in 0..w {
                img.set_pixel(r, c, [f(r, c, 0), f(r, c, 1), f(r, c, 2)]);
            }
        }
        img
    }

    fn random_image(w: u32, h: u32, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = Image::new(w, h);
        for r in 0..h {
            for c in 0..w {
                img.set_pixel(
                    r,
                    c,
                    [
                        rng.random_range(0.0..1.0),
                        rng.random_range(0.0..1.0),
                        rng.random_range(0.0..1.0),
                    ],
                );
            }
        }
        img
    }

    #[test]
    fn identical_images_cap_at_99() {
        let img = random_image(16, 16, 1);
        assert_eq!(psnr(&img, &img, None).unwrap(), 99.0);
        let mask = PixelMask::all_clear(16, 16, 0);
        assert_eq!(psnr_m(&img, &img, &mask).unwrap(), 99.0);
    }

    #[test]
    fn uniform_half_error_closed_form() {
        let a = image_from_fn(16, 16, |_, _, _| 0.75);
        let b = image_from_fn(16, 16, |_, _, _| 0.25);
        // MSE = 0.25 -> 10 log10(4) = 6.0206...
        let expected = 10.0 * 4.0f64.log10();
        assert!((psnr(&a, &b, None).unwrap() - expected).abs() < 1e-6);
    }

    #[test]
    fn half_mask_matches_pixel_list_oracle() {
        let a = random_image(20, 12, 2);
        let b = random_image(20, 12, 3);
        let mut mask = PixelMask::all_clear(20, 12, 0);
        for r in 0..12u32 {
            for c in 0..10u32 {
                mask.grid[r as usize * 20 + c as usize] = true;
            }
        }
        let got = psnr(&a, &b, Some(&mask)).unwrap();
        // oracle: gather unmasked pixels into a flat list first
        let mut diffs: Vec<f64> = Vec::new();
        for r in 0..12u32 {
            for c in 10..20u32 {
                let pa = a.pixel(r, c);
                let pb = b.pixel(r, c);
                for ch in 0..3 {
                    diffs.push(pa[ch] - pb[ch]);
                }
            }
        }
        let mse = diffs.iter().map(|d| d * d).sum::<f64>() / diffs.len() as f64;
        let expected = 10.0 * (1.0 / mse).log10();
        assert_relative_eq!(got, expected, epsilon = 1e-12);
    }

    #[test]
    fn psnr_decreases_as_error_grows() {
        let reference = image_from_fn(16, 16, |_, _, _| 0.5);
        let mut prev = f64::INFINITY;
        for step in 1..6 {
            let off = step as f64 * 0.05;
            let img = image_from_fn(16, 16, |_, _, _| 0.5 + off);
            let p = psnr(&img, &reference, None).unwrap();
            assert!(p < prev);
            prev = p;
        }
    }

    #[test]
    fn psnr_m_empty_mask_equals_psnr() {
        let a = random_image(16, 16, 4);
        let b = random_image(16, 16, 5);
        let mask = PixelMask::all_clear(16, 16, 0);
        let plain = psnr(&a, &b, None).unwrap();
        assert_eq!(psnr_m(&a, &b, &mask).unwrap(), plain);
    }

    #[test]
    fn psnr_m_exceeds_psnr_when_error_is_inside_mask() {
        // all the error lives inside the masked region
        let reference = image_from_fn(16, 16, |_, _, _| 0.5);
        let rendered = image_from_fn(16, 16, |r, _, _| if r < 8 { 0.9 } else { 0.5 });
        let mut mask = PixelMask::all_clear(16, 16, 0);
        for r in 0..8u32 {
            for c in 0..16u32 {
                mask.grid[r as usize * 16 + c as usize] = true;
            }
        }
        let plain = psnr(&rendered, &reference, None).unwrap();
        let masked = psnr(&rendered, &reference, Some(&mask)).unwrap();
        assert_eq!(masked, 99.0); // no error outside the mask
        let m = psnr_m(&rendered, &reference, &mask).unwrap();
        assert_relative_eq!(m, (plain + 99.0) / 2.0, epsilon = 1e-12);
        assert!(m > plain);
        // hand computation: MSE = 0.4^2 * (half the pixels) = 0.08
        let expected_plain = 10.0 * (1.0 / 0.08f64).log10();
        assert_relative_eq!(plain, expected_plain, epsilon = 1e-9);
    }

    #[test]
    fn empty_unmasked_set_is_an_error() {
        let a = random_image(8, 8, 6);
        let mut mask = PixelMask::all_clear(8, 8, 0);
        mask.grid.fill(true);
        assert!(matches!(
            psnr(&a, &a, Some(&mask)),
            Err(MetricError::EmptyUnmaskedSet)
        ));
    }

    #[test]
    fn ssim_identical_is_exactly_one() {
        let img = random_image(24, 16, 7);
        assert_eq!(ssim(&img, &img).unwrap(), 1.0);
    }

    #[test]
    fn ssim_negative_for_anticorrelated_pattern() {
        // checkerboard around 0.5 vs its negative
        let a = image_from_fn(16, 16, |r, c, _| if (r + c) % 2 == 0 { 0.8 } else { 0.2 });
        let b = image_from_fn(16, 16, |r, c, _| if (r + c) % 2 == 0 { 0.2 } else { 0.8 });
        let s = ssim(&a, &b).unwrap();
        assert!(s < 0.0, "ssim {s}");
    }

    #[test]
    fn ssim_matches_direct_formula_oracle() {
        let a = random_image(24, 16, 8);
        let b = random_image(24, 16, 9);
        let got = ssim(&a, &b).unwrap();

        // independent route: raw-moment formulas E[x^2]-E[x]^2, E[xy]-E[x]E[y]
        const C1: f64 = 1e-4;
        const C2: f64 = 9e-4;
        let mut total = 0.0;
        let mut count = 0;
        for ch in 0..3 {
            for wr in 0..2 {
                for wc in 0..3 {
                    let mut sx = 0.0;
                    let mut sy = 0.0;
                    let mut sxx = 0.0;
                    let mut syy = 0.0;
                    let mut sxy = 0.0;
                    for r in 0..8 {
                        for c in 0..8 {
                            let x = a.pixel(wr * 8 + r, wc * 8 + c)[ch];
                            let y = b.pixel(wr * 8 + r, wc * 8 + c)[ch];
                            sx += x;
                            sy += y;
                            sxx += x * x;
                            syy += y * y;
                            sxy += x * y;
                        }
                    }
                    let n = 64.0;
                    let mx = sx / n;
                    let my = sy / n;
                    let vx = sxx / n - mx * mx;
                    let vy = syy / n - my * my;
                    let cov = sxy / n - mx * my;
                    total += ((2.0 * mx * my + C1) * (2.0 * cov + C2))
                        / ((mx * mx + my * my + C1) * (vx + vy + C2));
                    count += 1;
                }
            }
        }
        assert_relative_eq!(got, total / count as f64, epsilon = 1e-10);
    }

    #[test]
    fn ssim_symmetric() {
        let a = random_image(24, 24, 10);
        let b = random_image(24, 24, 11);
        assert_relative_eq!(
            ssim(&a, &b).unwrap(),
            ssim(&b, &a).unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn ssim_rejects_tiny_images() {
        let a = random_image(4, 4, 12);
        assert!(matches!(
            ssim(&a, &a),
            Err(MetricError::ImageTooSmall(4, 4, 8))
        ));
    }

    fn demo_trajectory(n: usize) -> Vec<CameraPose> {
        (0..n)
            .map(|i| {
                let rot = [0.02 + 0.01 * (i as f64 * 0.2).sin(), -0.03, 0.01];
                let c = [i as f64 * 0.1, 0.5 + 0.05 * (i as f64 * 0.4).cos(), i as f64 * 0.05];
                let m = rotation_to_matrix(rot);
                let rc = mat3_mul_vec(&m, &c);
                CameraPose::new(rot, [-rc[0], -rc[1], -rc[2]])
            })
            .collect()
    }

    #[test]
    fn identical_trajectories_give_zero() {
        let traj = demo_trajectory(10);
        let report = ate(&traj, &traj, false).unwrap();
        assert!(report.per_frame_errors.iter().all(|&e| e < 1e-12));
        assert!(report.mean < 1e-12);
    }

    #[test]
    fn uniform_shift_absorbed_by_alignment() {
        let gt = demo_trajectory(10);
        let shifted: Vec<CameraPose> = gt
            .iter()
            .map(|p| {
                // shifting the camera center by (1,0,0) means t' = -R(C + d)
                let m = rotation_to_matrix(p.rotation_vec);
                let c = p.camera_center();
                let c2 = [c[0] + 1.0, c[1], c[2]];
                let rc = mat3_mul_vec(&m, &c2);
                CameraPose::new(p.rotation_vec, [-rc[0], -rc[1], -rc[2]])
            })
            .collect();
        let raw = ate(&shifted, &gt, false).unwrap();
        for e in &raw.per_frame_errors {
            assert_relative_eq!(*e, 1.0, epsilon = 1e-9);
        }
        let aligned = ate(&shifted, &gt, true).unwrap();
        assert!(aligned.mean < 1e-9, "aligned mean {}", aligned.mean);
    }

    #[test]
    fn alignment_recovers_random_rigid_transform() {
        let gt = demo_trajectory(50);
        // apply a random rigid transform to all centers
        let q = rotation_to_matrix([0.4, -0.8, 0.3]);
        let shift = [1.5, -2.0, 0.7];
        let transformed: Vec<CameraPose> = gt
            .iter()
            .map(|p| {
                let c = p.camera_center();
                let qc = mat3_mul_vec(&q, &c);
                let c2 = [qc[0] + shift[0], qc[1] + shift[1], qc[2] + shift[2]];
                let m = rotation_to_matrix(p.rotation_vec);
                let rc = mat3_mul_vec(&m, &c2);
                CameraPose::new(p.rotation_vec, [-rc[0], -rc[1], -rc[2]])
            })
            .collect();
        let aligned = ate(&transformed, &gt, true).unwrap();
        assert!(aligned.mean < 1e-9, "aligned mean {}", aligned.mean);
    }

    #[test]
    fn report_is_self_consistent() {
        let gt = demo_trajectory(12);
        let noisy: Vec<CameraPose> = gt
            .iter()
            .enumerate()
            .map(|(i, p)| perturb_pose_seeded(p, 0.1, i as u64))
            .collect();
        let report = ate(&noisy, &gt, false).unwrap();
        let recomputed = TrajectoryErrorReport::from_errors(report.per_frame_errors.clone());
        assert_eq!(report, recomputed);
        assert!(report.per_frame_errors.iter().all(|&e| e >= 0.0));
    }

    #[test]
    fn ate_validates_inputs() {
        let t = demo_trajectory(5);
        assert!(ate(&t, &t[..4], false).is_err());
        assert!(ate(&t[..1], &t[..1], false).is_err());
    }
}
