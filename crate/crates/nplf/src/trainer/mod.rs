//! Joint coarse-to-fine training of point features, MLP weights, the
//! attention scorer, and per-frame pose deltas.
//!
//! An "epoch" is one optimization step on one sampled batch: pick
//! `images_per_batch` training frames, pick a merge-window center within
//! +-H frames of each, sample `rays_per_image` unmasked pixels without
//! replacement, render them on the gradient tape, and take an Adam step on
//! the summed squared photometric error. The frequency-filter progress is
//! alpha = epoch / end_epoch * L for both encodings (clamped at L).

pub mod adam;
pub mod checkpoint;
pub mod forward;
pub mod store;
pub mod tape;

pub use adam::{adam_step, AdamHyper, AdamState};
pub use checkpoint::{dump_checkpoint, load_checkpoint, CHECKPOINT_VERSION};
pub use forward::{
    build_taped_loss, evaluate_plan_loss, masked_loss, sample_batch_plan, BatchPlan, PixelPools,
    TapeTemplates,
};
pub use store::{ParameterStore, SegmentLayout};
pub use tape::{NodeId, Tape};

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::CameraPose;
use crate::lightfield::{ModelConfig, Schedules};
use crate::motion::PixelMask;
use crate::scene::{FeatureTable, SceneDataset, SceneError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("loss became non-finite at epoch {epoch}{}", checkpoint_note(.checkpoint))]
    LossNotFinite {
        epoch: usize,
        checkpoint: Option<PathBuf>,
    },
    #[error("non-finite gradient in segment {segment}")]
    NonFiniteGradient { segment: &'static str },
    #[error("frame {frame} has {available} unmasked pixels, fewer than the {requested} rays per image")]
    NotEnoughUnmaskedPixels {
        frame: usize,
        available: usize,
        requested: usize,
    },
    #[error("loss length mismatch: {rendered} rendered vs {reference} reference colors")]
    LossLengthMismatch { rendered: usize, reference: usize },
    #[error("masks cover {masks} frames but the dataset has {frames}")]
    MaskCountMismatch { masks: usize, frames: usize },
    #[error("checkpoint {path} is truncated")]
    CheckpointTruncated { path: String },
    #[error("checkpoint {path} has a bad magic header")]
    CheckpointBadMagic { path: String },
    #[error("checkpoint version {found} unsupported (expected {expected})")]
    CheckpointVersionMismatch { found: u32, expected: u32 },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Lightfield(#[from] crate::lightfield::LightfieldError),
    #[error(transparent)]
    Metric(#[from] crate::metrics::MetricError),
}

fn checkpoint_note(c: &Option<PathBuf>) -> String {
    match c {
        Some(p) => format!(" (last-good checkpoint written to {})", p.display()),
        None => String::new(),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub images_per_batch: usize,
    pub rays_per_image: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Epoch at which the frequency schedules saturate.
    pub end_epoch_alpha: usize,
    /// Merge window half-width m (2m+1 clouds).
    pub window_m: usize,
    /// Window-center augmentation range H.
    pub augmentation_h: usize,
    pub epochs: usize,
    pub rng_seed: u64,
    #[serde(default)]
    pub model: ModelConfigSerde,
    /// Exclude moving-object pixels from ray sampling.
    pub use_masks: bool,
    /// Keep pose deltas at zero (ablation switch).
    pub freeze_poses: bool,
    /// Write a checkpoint every K epochs (0 = only on demand).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            images_per_batch: 2,
            rays_per_image: 256,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            end_epoch_alpha: 2000,
            window_m: 3,
            augmentation_h: 3,
            epochs: 3000,
            rng_seed: 0,
            model: ModelConfigSerde::default(),
            use_masks: true,
            freeze_poses: false,
            checkpoint_every: 0,
        }
    }
}

/// Serializable mirror of `lightfield::ModelConfig` for config files.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ModelConfigSerde {
    pub feature_dim: usize,
    pub k_neighbors: usize,
    pub l_dir: usize,
    pub l_feat: usize,
    pub hidden: usize,
}

impl Default for ModelConfigSerde {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            feature_dim: m.feature_dim,
            k_neighbors: m.k_neighbors,
            l_dir: m.l_dir,
            l_feat: m.l_feat,
            hidden: m.hidden,
        }
    }
}

impl From<ModelConfigSerde> for ModelConfig {
    fn from(m: ModelConfigSerde) -> Self {
        ModelConfig {
            feature_dim: m.feature_dim,
            k_neighbors: m.k_neighbors,
            l_dir: m.l_dir,
            l_feat: m.l_feat,
            hidden: m.hidden,
        }
    }
}

impl TrainConfig {
    pub fn model_config(&self) -> ModelConfig {
        self.model.into()
    }

    pub fn adam_hyper(&self) -> AdamHyper {
        AdamHyper {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(path).map_err(|source| TrainError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| TrainError::Io {
            path: path.display().to_string(),
            source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        std::fs::write(path, serde_json::to_string_pretty(self).expect("serializes")).map_err(
            |source| TrainError::Io {
                path: path.display().to_string(),
                source,
            },
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub alpha_dir: f64,
    pub alpha_feat: f64,
    pub ate_mean: Option<f64>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub store: ParameterStore,
    pub adam: AdamState,
    pub history: Vec<EpochRecord>,
    /// Sampled rays that landed on masked pixels over the whole run.
    pub masked_ray_violations: u64,
}

/// `history.csv` with one row per epoch: epoch, loss, alpha (feature
/// schedule), ate_mean (empty when no ground truth was supplied).
pub fn format_history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,loss,alpha,ate_mean\n");
    for r in history {
        match r.ate_mean {
            Some(ate) => {
                let _ = writeln!(s, "{},{:.17e},{:.6},{:.17e}", r.epoch, r.loss, r.alpha_feat, ate);
            }
            None => {
                let _ = writeln!(s, "{},{:.17e},{:.6},", r.epoch, r.loss, r.alpha_feat);
            }
        }
    }
    s
}

/// Joint training over a (possibly noisy-posed) dataset.
///
/// `masks` must be prebuilt by the motion module; pass None (or
/// `use_masks: false`) to train through moving objects. `gt_poses`, when
/// given, adds a per-epoch raw ATE over the training frames to the history.
/// Deterministic in `config.rng_seed`.
pub fn train(
    dataset: &SceneDataset,
    masks: Option<&[PixelMask]>,
    config: &TrainConfig,
    gt_poses: Option<&[CameraPose]>,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    if let Some(ms) = masks {
        if ms.len() != dataset.frames.len() {
            return Err(TrainError::MaskCountMismatch {
                masks: ms.len(),
                frames: dataset.frames.len(),
            });
        }
    }
    let model = config.model_config();
    let layout = SegmentLayout::new(model, dataset.total_points(), dataset.frames.len());
    let mut store = ParameterStore::init(layout, config.rng_seed);
    let mut adam = AdamState::new(store.values.len());
    let hyper = config.adam_hyper();

    let effective_masks = if config.use_masks { masks } else { None };
    let mut pools = PixelPools::build(dataset, effective_masks, config.rays_per_image)?;
    let zero_features = FeatureTable::zeros(layout_rows(&store), model.feature_dim);
    let templates = TapeTemplates::new(&store.layout);
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed ^ 0x7472_6169_6e5f_7270);
    let mut tape = Tape::new();

    let training_frames = dataset.training_frames();
    let mut history = Vec::with_capacity(config.epochs);
    let mut violations = 0u64;
    let mut last_good: Option<(Vec<f64>, AdamState)> = None;

    for epoch in 0..config.epochs {
        let schedules = Schedules::at_epoch(&model, epoch, config.end_epoch_alpha);
        let (plan, v) = sample_batch_plan(
            dataset,
            effective_masks,
            &store,
            &mut pools,
            &zero_features,
            config.images_per_batch,
            config.rays_per_image,
            config.window_m,
            config.augmentation_h,
            &mut rng,
        )?;
        violations += v;

        tape.clear();
        let loss_node = build_taped_loss(&mut tape, &store, dataset, &plan, &schedules, &templates);
        let loss = tape.scalar(loss_node);
        if !loss.is_finite() {
            let checkpoint = match (out_dir, &last_good) {
                (Some(dir), Some((values, adam_state))) => {
                    let snapshot =
                        ParameterStore::from_values(store.layout.clone(), values.clone());
                    let path = dir.join("checkpoint_last_good.bin");
                    dump_checkpoint(&snapshot, adam_state, &path)?;
                    Some(path)
                }
                _ => None,
            };
            return Err(TrainError::LossNotFinite { epoch, checkpoint });
        }

        store.zero_grad();
        let mut grad = std::mem::take(&mut store.grad);
        tape.backward(loss_node, &mut grad);
        store.grad = grad;
        for (name, range) in store.layout.segments() {
            if store.grad[range].iter().any(|g| !g.is_finite()) {
                return Err(TrainError::NonFiniteGradient { segment: name });
            }
        }
        if config.freeze_poses {
            let r = store.layout.pose_deltas.clone();
            store.grad[r].fill(0.0);
        }

        last_good = Some((store.values.clone(), adam.clone()));
        adam_step(&mut store, &mut adam, &hyper);

        let ate_mean = gt_poses.map(|gt| {
            let est: Vec<CameraPose> = training_frames
                .iter()
                .map(|&f| store.refined_pose(f, &dataset.frames[f].pose))
                .collect();
            let gt_sel: Vec<CameraPose> = training_frames.iter().map(|&f| gt[f]).collect();
            crate::metrics::ate(&est, &gt_sel, false)
                .map(|r| r.mean)
                .unwrap_or(f64::NAN)
        });
        history.push(EpochRecord {
            epoch,
            loss,
            alpha_dir: schedules.dir.alpha,
            alpha_feat: schedules.feat.alpha,
            ate_mean,
        });

        if let (Some(dir), true) = (out_dir, config.checkpoint_every > 0) {
            if (epoch + 1) % config.checkpoint_every == 0 {
                dump_checkpoint(&store, &adam, &dir.join(format!("checkpoint_{:06}.bin", epoch + 1)))?;
            }
        }
    }

    Ok(TrainOutcome {
        store,
        adam,
        history,
        masked_ray_violations: violations,
    })
}

fn layout_rows(store: &ParameterStore) -> usize {
    store.layout.num_feature_rows
}
