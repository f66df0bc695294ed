//! End-to-end training orchestration over an on-disk paired dataset:
//! split, normalize, extract training data, train, attach normalization.

use std::path::{Path, PathBuf};

use crate::data::{self, NormalizationParams, PairedSample, SplitManifest};
use crate::error::Result;
use crate::models::{self, ArchId, HeadActivation, Model, NormPair};
use crate::optim::{self, LossKind, TrainConfig, TrainingSet};

#[derive(Clone, Debug)]
pub struct TrainRequest {
    pub method: ArchId,
    pub data_root: PathBuf,
    pub epochs: usize,
    /// Defaults to one pass over the training items when absent.
    pub steps_per_epoch: Option<usize>,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub test_count: usize,
    pub loss: LossKind,
    /// Patch regressor only.
    pub head: HeadActivation,
    /// Number of patches sampled across the training images (patch method).
    pub patch_count: usize,
    /// U-Net only.
    pub tile: usize,
    pub tiles_per_image: usize,
    pub base_filters: usize,
}

impl TrainRequest {
    /// The published U-Net schedule: 100 epochs x 30 steps, lr 4e-4, batch
    /// 16, Laplace loss, 128x128 tiles.
    pub fn unet_defaults(data_root: &Path) -> Self {
        TrainRequest {
            method: ArchId::Unet,
            data_root: data_root.into(),
            epochs: 100,
            steps_per_epoch: Some(30),
            batch_size: 16,
            lr: 4e-4,
            seed: 42,
            test_count: 31,
            loss: LossKind::Laplace,
            head: HeadActivation::Linear,
            patch_count: 200_000,
            tile: 128,
            tiles_per_image: 4,
            base_filters: 32,
        }
    }

    /// Patch-regressor defaults: Adam + MSE at lr 1e-4, batch 256, 20
    /// epochs over the sampled patch set.
    pub fn patches_defaults(data_root: &Path) -> Self {
        TrainRequest {
            method: ArchId::Patches,
            epochs: 20,
            steps_per_epoch: None,
            batch_size: 256,
            lr: 1e-4,
            loss: LossKind::Mse,
            ..Self::unet_defaults(data_root)
        }
    }
}

pub struct TrainOutcome {
    pub model: Model,
    pub trace: Vec<f64>,
    pub split: SplitManifest,
    /// Pairs held out by the split, in stem order of the dataset.
    pub test_names: Vec<String>,
}

/// Splits the dataset, learns source/target normalization on the training
/// half, trains the requested model, and attaches the normalization so the
/// checkpoint predicts on raw intensities.
pub fn run_training(req: &TrainRequest) -> Result<TrainOutcome> {
    let pairs = data::load_pairs(&req.data_root)?;
    let (train_idx, test_idx) = data::split_dataset(pairs.len(), req.test_count, req.seed)?;
    let train_pairs: Vec<&PairedSample> = train_idx.iter().map(|&i| &pairs[i]).collect();
    let test_names: Vec<String> = test_idx.iter().map(|&i| pairs[i].name.clone()).collect();

    let norm_src = NormalizationParams::from_images(train_pairs.iter().map(|p| &p.source))?;
    let norm_tgt = NormalizationParams::from_images(train_pairs.iter().map(|p| &p.target))?;
    let normalized: Vec<PairedSample> = train_pairs
        .iter()
        .map(|p| {
            PairedSample::new(
                data::normalize(&p.source, &norm_src)?,
                data::normalize(&p.target, &norm_tgt)?,
                p.name.clone(),
            )
        })
        .collect::<Result<_>>()?;

    let channels = pairs[0].source.channels();
    let (mut model, set, default_steps) = match req.method {
        ArchId::Patches => {
            let origins = data::sample_patch_origins(&normalized, req.patch_count, req.seed)?;
            let sources = normalized.iter().map(|p| data::image_to_tensor(&p.source)).collect();
            let targets = normalized.iter().map(|p| data::image_to_tensor(&p.target)).collect();
            let steps = req.patch_count.div_ceil(req.batch_size);
            let model = models::build_patch_regressor(channels, req.head, req.seed)?;
            (model, TrainingSet::Patches { sources, targets, origins }, steps)
        }
        ArchId::Unet => {
            let tiles = data::extract_tiles(&normalized, req.tile, req.tiles_per_image, req.seed)?;
            let steps = tiles.inputs.len().div_ceil(req.batch_size);
            let model = models::build_residual_unet(channels, req.base_filters, req.seed)?;
            (model, TrainingSet::Tiles(tiles), steps)
        }
    };

    let config = TrainConfig {
        epochs: req.epochs,
        steps_per_epoch: req.steps_per_epoch.unwrap_or(default_steps),
        batch_size: req.batch_size,
        lr: req.lr,
        seed: req.seed,
        loss: req.loss,
    };
    let trace = optim::train(&mut model, &set, &config)?;
    model.norm = Some(NormPair { source: norm_src, target: norm_tgt });

    Ok(TrainOutcome {
        model,
        trace,
        split: SplitManifest { seed: req.seed, test: test_names.clone() },
        test_names,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{make_paired_dataset, AcquisitionConfig, AcquisitionMode};

    #[test]
    fn unet_training_runs_end_to_end() {
        let dir = tempfile::tempdir().unwrap();
        let config = AcquisitionConfig {
            mode: AcquisitionMode::Frames,
            frames_total: 6,
            frames_used: 2,
            seed: 5,
            ..Default::default()
        };
        make_paired_dataset(&config, 6, 32, 32, 1, dir.path()).unwrap();
        let req = TrainRequest {
            epochs: 1,
            steps_per_epoch: Some(2),
            batch_size: 2,
            test_count: 2,
            tile: 16,
            tiles_per_image: 2,
            base_filters: 2,
            seed: 5,
            ..TrainRequest::unet_defaults(dir.path())
        };
        let outcome = run_training(&req).unwrap();
        assert_eq!(outcome.trace.len(), 2);
        assert_eq!(outcome.split.test.len(), 2);
        assert!(outcome.model.norm.is_some());
        assert_eq!(outcome.test_names.len(), 2);
    }

    #[test]
    fn training_outcome_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let config = AcquisitionConfig {
            mode: AcquisitionMode::Power,
            seed: 6,
            ..Default::default()
        };
        make_paired_dataset(&config, 5, 32, 32, 1, dir.path()).unwrap();
        let req = TrainRequest {
            epochs: 1,
            steps_per_epoch: Some(3),
            batch_size: 8,
            test_count: 1,
            patch_count: 64,
            seed: 6,
            ..TrainRequest::patches_defaults(dir.path())
        };
        let digest = |outcome: &TrainOutcome| -> Vec<u32> {
            outcome.model.params().iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect()
        };
        let a = run_training(&req).unwrap();
        let b = run_training(&req).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(digest(&a), digest(&b));
        assert_eq!(a.split.test, b.split.test);
    }
}
