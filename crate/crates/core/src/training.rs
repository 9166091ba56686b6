//! Multi-seed saliency-guided training with plain SGD.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cam::SalienceMap;
use crate::datasets::LabeledSample;
use crate::error::{invalid, Error, Result};
use crate::losses::{sample_loss_with_grad, LossTerms, LossVariant, LossWeights};
use crate::nn::{build_model, build_structure, default_tiny_widths, CamNet, ModelArch, ModelSpec};
use crate::saliency_io::{make_edge_map, resize_to_grid};

/// Environment variable capping the number of seeds trained in parallel.
pub const NUM_WORKERS_ENV: &str = "SALIENCE_NUM_WORKERS";

pub const MODEL_FILE: &str = "model.npz";
pub const MANIFEST_FILE: &str = "manifest.toml";
pub const LOSS_FILE: &str = "loss.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    /// Stochastic gradient descent without momentum or weight decay.
    #[default]
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: LossVariant,
    pub weights: LossWeights,
    pub epochs: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub batch_size: usize,
    pub seeds: Vec<u64>,
    pub model_arch: ModelArch,
    /// Stage widths when `model_arch = "tiny_cam_net"`.
    pub tiny_widths: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrained_checkpoint: Option<PathBuf>,
    pub fooling: bool,
    pub fooling_band_fraction: f64,
    pub dataset_root: PathBuf,
    pub output_dir: PathBuf,
}

impl TrainConfig {
    /// Defaults: 50 epochs of SGD at 0.002, batches of 32, seeds 0..10,
    /// equal loss weights for the variant.
    pub fn new(
        variant: LossVariant,
        dataset_root: impl Into<PathBuf>,
        output_dir: impl Into<PathBuf>,
    ) -> Self {
        Self {
            variant,
            weights: LossWeights::default_for(variant),
            epochs: 50,
            learning_rate: 0.002,
            optimizer: Optimizer::Sgd,
            batch_size: 32,
            seeds: (0..10).collect(),
            model_arch: ModelArch::TinyCamNet,
            tiny_widths: default_tiny_widths(),
            pretrained_checkpoint: None,
            fooling: false,
            fooling_band_fraction: 0.1,
            dataset_root: dataset_root.into(),
            output_dir: output_dir.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.variant != self.variant {
            return Err(invalid!(
                "weights are for {} but the variant is {}",
                self.weights.variant,
                self.variant
            ));
        }
        self.weights.validate()?;
        if self.epochs == 0 {
            return Err(invalid!("epochs must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if self.batch_size == 0 {
            return Err(invalid!("batch_size must be at least 1"));
        }
        if self.seeds.is_empty() {
            return Err(invalid!("at least one seed is required"));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(invalid!("seeds must be distinct: {:?}", self.seeds));
        }
        if self.fooling {
            if !self.variant.uses_salience() {
                return Err(invalid!(
                    "fooling needs a variant with a salience term, not {}",
                    self.variant
                ));
            }
            if !(self.fooling_band_fraction > 0.0 && self.fooling_band_fraction < 0.5) {
                return Err(invalid!("fooling_band_fraction must lie in (0, 0.5)"));
            }
        }
        Ok(())
    }

    /// Hash of every field except `output_dir`.
    pub fn fingerprint(&self) -> String {
        let mut canonical = self.clone();
        canonical.output_dir = PathBuf::new();
        let json = serde_json::to_string(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn model_spec(&self, image_channels: usize) -> ModelSpec {
        ModelSpec {
            arch: self.model_arch,
            image_channels,
            tiny_widths: self.tiny_widths.clone(),
            pretrained_checkpoint: self.pretrained_checkpoint.clone(),
        }
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.output_dir.join(format!("seed_{seed}"))
    }
}

/// Sidecar written next to every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub arch: ModelArch,
    pub seed: u64,
    pub variant: LossVariant,
    pub fingerprint: String,
    pub weights: LossWeights,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub fooling: bool,
    pub fooling_band_fraction: f64,
    pub model: ModelSpec,
}

/// A trained model and the manifest describing how it was produced.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub model: CamNet,
}

impl Checkpoint {
    /// Loads `manifest.toml` and `model.npz`. `path` may be the run directory
    /// or the `model.npz` inside it.
    pub fn load(path: &Path) -> Result<Self> {
        let dir = if path.is_dir() {
            path.to_path_buf()
        } else {
            path.parent().map(Path::to_path_buf).unwrap_or_default()
        };
        let manifest_path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: CheckpointManifest =
            toml::from_str(&text).map_err(|e| invalid!("{}: {e}", manifest_path.display()))?;
        let mut model = build_structure(&manifest.model)?;
        model.load_params(&dir.join(MODEL_FILE), |_| true)?;
        Ok(Self { manifest, model })
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let model_path = dir.join(MODEL_FILE);
        self.model.save_params(&model_path)?;
        let manifest_path = dir.join(MANIFEST_FILE);
        let text =
            toml::to_string_pretty(&self.manifest).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;
        Ok(model_path)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifacts {
    pub final_checkpoint: PathBuf,
    /// Mean per-sample loss of each epoch, measured before each step's update.
    pub per_epoch_train_loss: Vec<f64>,
    /// Mean loss of every minibatch, in order.
    pub per_step_loss: Vec<f64>,
    pub final_train_accuracy: f64,
    pub seed: u64,
    pub config_fingerprint: String,
}

/// Hooks into the training loop.
pub trait TrainObserver {
    /// Called after the loss of each sample is computed; `h` is the map the
    /// loss actually used, aligned to the CAM grid.
    fn on_sample(
        &mut self,
        _epoch: usize,
        _sample: &LabeledSample,
        _h: Option<&SalienceMap>,
        _terms: &LossTerms,
    ) {
    }

    fn on_epoch(&mut self, _epoch: usize, _mean_loss: f64) {}
}

struct NoObserver;

impl TrainObserver for NoObserver {}

/// Trains one model for `config.epochs` epochs and writes its checkpoint to
/// `output_dir/seed_<seed>/`.
pub fn train_one(
    config: &TrainConfig,
    seed: u64,
    dataset: &[LabeledSample],
) -> Result<RunArtifacts> {
    train_one_observed(config, seed, dataset, &mut NoObserver)
}

pub fn train_one_observed(
    config: &TrainConfig,
    seed: u64,
    dataset: &[LabeledSample],
    observer: &mut dyn TrainObserver,
) -> Result<RunArtifacts> {
    config.validate()?;
    let channels = check_dataset(config, dataset)?;
    let spec = config.model_spec(channels);
    let mut model = build_model(&spec, seed)?;

    let inputs: Vec<Array3<f64>> = dataset
        .iter()
        .map(|s| model.prepare_input(&s.image))
        .collect::<Result<_>>()?;
    let targets = supervision_maps(config, &model, dataset, &inputs)?;

    let weights = config.weights;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed);
    shuffle_rng.set_stream(1);
    let mut per_epoch = Vec::with_capacity(config.epochs);
    let mut per_step = Vec::new();

    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            model.zero_grad();
            let mut batch_sum = 0.0;
            for &i in batch {
                let sample = &dataset[i];
                let (output, cache) = model.forward(&inputs[i])?;
                let h = targets[i].as_ref();
                let (terms, grad) = sample_loss_with_grad(&output, sample.label, h, &weights)?;
                observer.on_sample(epoch, sample, h, &terms);
                model.backward(cache, &grad);
                batch_sum += terms.total();
            }
            if !batch_sum.is_finite() {
                return Err(invalid!(
                    "seed {seed}: loss became non-finite in epoch {epoch}"
                ));
            }
            let scale = 1.0 / batch.len() as f64;
            model.sgd_step(config.learning_rate, scale);
            per_step.push(batch_sum * scale);
            epoch_sum += batch_sum;
        }
        let mean = epoch_sum / dataset.len() as f64;
        observer.on_epoch(epoch, mean);
        per_epoch.push(mean);
    }

    let final_train_accuracy = accuracy(&model, dataset, &inputs)?;
    let fingerprint = config.fingerprint();
    let checkpoint = Checkpoint {
        manifest: CheckpointManifest {
            arch: config.model_arch,
            seed,
            variant: config.variant,
            fingerprint: fingerprint.clone(),
            weights,
            epochs: config.epochs,
            learning_rate: config.learning_rate,
            batch_size: config.batch_size,
            fooling: config.fooling,
            fooling_band_fraction: config.fooling_band_fraction,
            model: spec,
        },
        model,
    };
    let dir = config.seed_dir(seed);
    let final_checkpoint = checkpoint.save(&dir)?;
    write_losses(&dir.join(LOSS_FILE), &per_epoch)?;

    Ok(RunArtifacts {
        final_checkpoint,
        per_epoch_train_loss: per_epoch,
        per_step_loss: per_step,
        final_train_accuracy,
        seed,
        config_fingerprint: fingerprint,
    })
}

fn check_dataset(config: &TrainConfig, dataset: &[LabeledSample]) -> Result<usize> {
    let first = dataset
        .first()
        .ok_or_else(|| invalid!("training set is empty"))?;
    let channels = first.image.dim().0;
    for s in dataset {
        s.validate()?;
        if s.image.dim().0 != channels {
            return Err(invalid!(
                "sample {} has {} channels, expected {channels}",
                s.sample_id,
                s.image.dim().0
            ));
        }
        if config.variant.uses_salience() && !config.fooling && s.human_map.is_none() {
            return Err(invalid!(
                "sample {} has no heatmap but variant {} needs one",
                s.sample_id,
                config.variant
            ));
        }
    }
    Ok(channels)
}

/// The map each sample's salience term is compared against, resized to the CAM grid.
fn supervision_maps(
    config: &TrainConfig,
    model: &CamNet,
    dataset: &[LabeledSample],
    inputs: &[Array3<f64>],
) -> Result<Vec<Option<SalienceMap>>> {
    if !config.variant.uses_salience() {
        // Kept when present so zero-weight runs of other variants see identical inputs.
        return dataset
            .iter()
            .zip(inputs)
            .map(|(s, x)| align_optional(model, s.human_map.as_ref(), x))
            .collect();
    }
    dataset
        .iter()
        .zip(inputs)
        .map(|(s, x)| {
            if config.fooling {
                let (h, w) = s.image_size();
                let edge = make_edge_map(h, w, config.fooling_band_fraction)?;
                align_optional(model, Some(&edge), x)
            } else {
                align_optional(model, s.human_map.as_ref(), x)
            }
        })
        .collect()
}

fn align_optional(
    model: &CamNet,
    map: Option<&SalienceMap>,
    input: &Array3<f64>,
) -> Result<Option<SalienceMap>> {
    let Some(map) = map else { return Ok(None) };
    let (gh, gw) = cam_grid(model, input);
    resize_to_grid(map, gh, gw).map(Some)
}

/// Spatial size of the feature grid the model produces for `input`.
pub fn cam_grid(model: &CamNet, input: &Array3<f64>) -> (usize, usize) {
    let (_, h, w) = model.features.infer(input).dim();
    (h, w)
}

fn accuracy(model: &CamNet, dataset: &[LabeledSample], inputs: &[Array3<f64>]) -> Result<f64> {
    let mut correct = 0usize;
    for (s, x) in dataset.iter().zip(inputs) {
        let (out, _) = model.forward(x)?;
        let predicted = usize::from(out.probabilities[1] > out.probabilities[0]);
        correct += usize::from(predicted == s.label);
    }
    Ok(correct as f64 / dataset.len() as f64)
}

fn write_losses(path: &Path, losses: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    w.write_record(["epoch", "train_loss"])
        .map_err(|e| Error::csv(path, e))?;
    for (i, l) in losses.iter().enumerate() {
        w.write_record([(i + 1).to_string(), format!("{l:.17e}")])
            .map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Trains one model per seed, in parallel up to [`NUM_WORKERS_ENV`] workers.
///
/// Results come back in seed order. If any seed fails the error lists the
/// seeds that did complete.
pub fn train_sweep(config: &TrainConfig, dataset: &[LabeledSample]) -> Result<Vec<RunArtifacts>> {
    config.validate()?;
    let workers = worker_count(config.seeds.len());
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| invalid!("cannot start worker pool: {e}"))?;
    let results: Vec<(u64, Result<RunArtifacts>)> = pool.install(|| {
        config
            .seeds
            .par_iter()
            .map(|&seed| (seed, train_one(config, seed, dataset)))
            .collect()
    });
    let completed: Vec<u64> = results
        .iter()
        .filter(|(_, r)| r.is_ok())
        .map(|(s, _)| *s)
        .collect();
    let mut artifacts = Vec::with_capacity(results.len());
    for (seed, result) in results {
        match result {
            Ok(a) => artifacts.push(a),
            Err(source) => {
                return Err(Error::SweepFailed {
                    seed,
                    completed,
                    source: Box::new(source),
                })
            }
        }
    }
    Ok(artifacts)
}

/// Parallel workers for `jobs` independent runs.
pub fn worker_count(jobs: usize) -> usize {
    let cap = std::env::var(NUM_WORKERS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    cap.min(jobs).max(1)
}
