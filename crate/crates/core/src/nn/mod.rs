//! Convolutional classifiers with a GAP + linear head, the shape CAMs need.

mod densenet;
mod layers;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array3, ArrayD, Axis, IxDyn};
use ndarray_npy::{NpzReader, NpzWriter};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use densenet::DenseNetConfig;
pub use layers::{
    global_average_pool, BatchNorm2d, Cache, Conv2d, DenseBlock, Layer, Param, PoolSpec, Sequential,
};

use crate::cam::ModelOutput;
use crate::error::{invalid, Error, Result};
use crate::losses::OutputGrad;
use crate::saliency_io::resize_plane;

/// Environment variable pointing at converted ImageNet DenseNet-121 weights.
pub const DENSENET121_WEIGHTS_ENV: &str = "SALIENCE_DENSENET121_WEIGHTS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelArch {
    Densenet121Pretrained,
    TinyCamNet,
}

impl ModelArch {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelArch::Densenet121Pretrained => "densenet121_pretrained",
            ModelArch::TinyCamNet => "tiny_cam_net",
        }
    }
}

impl std::fmt::Display for ModelArch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Everything needed to rebuild a network's structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: ModelArch,
    /// Channels of the dataset images (before any model-side adaptation).
    pub image_channels: usize,
    /// Conv stage widths of `tiny_cam_net`; every stage but the last is followed by 2x2 max pooling.
    #[serde(default = "default_tiny_widths")]
    pub tiny_widths: Vec<usize>,
    /// Converted ImageNet weights for `densenet121_pretrained`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrained_checkpoint: Option<PathBuf>,
}

pub fn default_tiny_widths() -> Vec<usize> {
    vec![8, 16, 16]
}

impl ModelSpec {
    pub fn tiny(image_channels: usize) -> Self {
        Self {
            arch: ModelArch::TinyCamNet,
            image_channels,
            tiny_widths: default_tiny_widths(),
            pretrained_checkpoint: None,
        }
    }

    fn pretrained_path(&self) -> PathBuf {
        self.pretrained_checkpoint
            .clone()
            .or_else(|| std::env::var_os(DENSENET121_WEIGHTS_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("weights/densenet121_imagenet.npz"))
    }
}

/// How raw `[0, 1]` images are turned into network input.
#[derive(Debug, Clone, PartialEq)]
pub struct InputSpec {
    pub channels: usize,
    /// Fixed input resolution, or `None` to keep the native size.
    pub size: Option<(usize, usize)>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// A convolutional backbone followed by global average pooling and a 2-class linear layer.
#[derive(Debug, Clone, PartialEq)]
pub struct CamNet {
    pub spec: ModelSpec,
    pub input: InputSpec,
    pub features: Sequential,
    /// `[2, channels]`
    pub classifier_weight: Param,
    /// `[2]`
    pub classifier_bias: Param,
}

/// State kept between [`CamNet::forward`] and [`CamNet::backward`].
#[derive(Debug, Clone)]
pub struct NetCache {
    features: Cache,
    pooled: Array1<f64>,
}

/// Builds a freshly initialized model.
///
/// `tiny_cam_net` is He-initialized from `seed`. `densenet121_pretrained`
/// loads ImageNet backbone weights from the converted checkpoint and gets a
/// seeded 2-class head.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<CamNet> {
    let mut net = build_structure(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match spec.arch {
        ModelArch::TinyCamNet => net.init_backbone(&mut rng),
        ModelArch::Densenet121Pretrained => {
            let path = spec.pretrained_path();
            if !path.exists() {
                return Err(Error::MissingCheckpoint {
                    path,
                    instructions: format!(
                        "convert torchvision's ImageNet weights with `python tools/export_densenet121.py <out.npz>` \
                         (needs torch + torchvision and network access), then set `pretrained_checkpoint` \
                         in the config or {DENSENET121_WEIGHTS_ENV}"
                    ),
                });
            }
            net.load_params(&path, |name| name.starts_with("features."))?;
        }
    }
    net.init_head(&mut rng);
    Ok(net)
}

/// Builds the network layout with all-zero parameters.
pub fn build_structure(spec: &ModelSpec) -> Result<CamNet> {
    if spec.image_channels == 0 {
        return Err(invalid!("image channel count must be positive"));
    }
    let (input, features, width) = match spec.arch {
        ModelArch::TinyCamNet => {
            if spec.tiny_widths.is_empty() || spec.tiny_widths.contains(&0) {
                return Err(invalid!(
                    "tiny_cam_net widths must be non-empty and positive"
                ));
            }
            let mut seq = Sequential::new();
            let mut in_ch = spec.image_channels;
            let stages = spec.tiny_widths.len();
            for (i, &width) in spec.tiny_widths.iter().enumerate() {
                seq.push(
                    format!("conv{}", i + 1),
                    Layer::Conv2d(Conv2d::new(in_ch, width, 3, 1, 1, true)),
                );
                seq.push(format!("relu{}", i + 1), Layer::Relu);
                if i + 1 < stages {
                    seq.push(
                        format!("pool{}", i + 1),
                        Layer::MaxPool2d(PoolSpec::new(2, 2, 0)),
                    );
                }
                in_ch = width;
            }
            let input = InputSpec {
                channels: spec.image_channels,
                size: None,
                mean: vec![0.5; spec.image_channels],
                std: vec![0.25; spec.image_channels],
            };
            (input, seq, in_ch)
        }
        ModelArch::Densenet121Pretrained => {
            let config = DenseNetConfig::densenet121();
            let (seq, width) = config.build(3);
            let input = InputSpec {
                channels: 3,
                size: Some((224, 224)),
                mean: vec![0.485, 0.456, 0.406],
                std: vec![0.229, 0.224, 0.225],
            };
            (input, seq, width)
        }
    };
    Ok(CamNet {
        spec: spec.clone(),
        input,
        features,
        classifier_weight: Param::new(vec![2, width], vec![0.0; 2 * width]),
        classifier_bias: Param::new(vec![2], vec![0.0; 2]),
    })
}

impl CamNet {
    /// Assembles a model from an explicit backbone; used for custom layouts.
    pub fn from_parts(
        spec: ModelSpec,
        input: InputSpec,
        features: Sequential,
        width: usize,
    ) -> Self {
        CamNet {
            spec,
            input,
            features,
            classifier_weight: Param::new(vec![2, width], vec![0.0; 2 * width]),
            classifier_bias: Param::new(vec![2], vec![0.0; 2]),
        }
    }

    pub fn arch(&self) -> ModelArch {
        self.spec.arch
    }

    pub fn num_classes(&self) -> usize {
        self.classifier_bias.len()
    }

    /// He-normal conv weights, zero biases, unit batch-norm scale.
    pub fn init_backbone(&mut self, rng: &mut ChaCha8Rng) {
        let mut params = Vec::new();
        self.features.collect_params_mut("features", &mut params);
        for (name, p) in params {
            if name.ends_with(".weight") && p.shape.len() == 4 {
                let fan_in: usize = p.shape[1..].iter().product();
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
                p.value.iter_mut().for_each(|v| *v = normal.sample(rng));
            }
        }
    }

    /// Uniform `(-1/sqrt(k), 1/sqrt(k))` head weights, zero bias.
    pub fn init_head(&mut self, rng: &mut ChaCha8Rng) {
        use rand::RngExt;
        let k = self.classifier_weight.shape[1] as f64;
        let bound = 1.0 / k.sqrt();
        self.classifier_weight
            .value
            .iter_mut()
            .for_each(|v| *v = rng.random_range(-bound..bound));
        self.classifier_bias.value.iter_mut().for_each(|v| *v = 0.0);
    }

    /// Adapts channels, resizes and standardizes a `[0, 1]` image.
    pub fn prepare_input(&self, image: &Array3<f64>) -> Result<Array3<f64>> {
        let (c, h, w) = image.dim();
        let want = self.input.channels;
        let mut x = if c == want {
            image.clone()
        } else if c == 1 {
            let plane = image.index_axis(Axis(0), 0);
            ndarray::stack(Axis(0), &vec![plane; want]).expect("stack")
        } else {
            return Err(invalid!(
                "model expects {want} input channels, image has {c}"
            ));
        };
        if let Some((th, tw)) = self.input.size {
            if (th, tw) != (h, w) {
                let planes: Vec<_> = x.outer_iter().map(|p| resize_plane(p, th, tw)).collect();
                let views: Vec<_> = planes.iter().map(|p| p.view()).collect();
                x = ndarray::stack(Axis(0), &views).expect("stack");
            }
        }
        for (ci, mut plane) in x.outer_iter_mut().enumerate() {
            let (m, s) = (self.input.mean[ci], self.input.std[ci]);
            if m != 0.0 || s != 1.0 {
                plane.mapv_inplace(|v| (v - m) / s);
            }
        }
        Ok(x)
    }

    /// Forward pass on prepared input.
    pub fn forward(&self, x: &Array3<f64>) -> Result<(ModelOutput, NetCache)> {
        let (features, cache) = self.features.forward(x);
        let pooled = global_average_pool(&features);
        let output = self.head(features, &pooled)?;
        Ok((
            output,
            NetCache {
                features: cache,
                pooled,
            },
        ))
    }

    /// Forward pass on a raw `[0, 1]` image, without caches.
    pub fn predict(&self, image: &Array3<f64>) -> Result<ModelOutput> {
        let x = self.prepare_input(image)?;
        let features = self.features.infer(&x);
        let pooled = global_average_pool(&features);
        self.head(features, &pooled)
    }

    fn head(&self, features: Array3<f64>, pooled: &Array1<f64>) -> Result<ModelOutput> {
        let weights = self.classifier_weight.matrix().to_owned();
        let biases = Array1::from(self.classifier_bias.value.clone());
        let logits = weights.dot(pooled) + &biases;
        ModelOutput::new(logits, features, weights, biases)
    }

    /// Accumulates parameter gradients for one sample.
    pub fn backward(&mut self, cache: NetCache, grad: &OutputGrad) {
        let d_logits = &grad.logits;
        let mut d_weight = self.classifier_weight.grad_matrix_mut();
        for c in 0..d_logits.len() {
            for (j, p) in cache.pooled.iter().enumerate() {
                d_weight[(c, j)] += d_logits[c] * p + grad.class_weights[(c, j)];
            }
        }
        for (b, d) in self.classifier_bias.grad.iter_mut().zip(d_logits) {
            *b += d;
        }
        let (_, h, w) = grad.features.dim();
        let area = (h * w) as f64;
        let d_pooled = self.classifier_weight.matrix().t().dot(d_logits);
        let mut d_features = grad.features.clone();
        for (mut plane, dp) in d_features.outer_iter_mut().zip(d_pooled.iter()) {
            let share = dp / area;
            plane.mapv_inplace(|v| v + share);
        }
        self.features.backward(cache.features, &d_features);
    }

    /// All parameters and buffers with their checkpoint names.
    pub fn params(&self) -> Vec<(String, &Param)> {
        let mut out = Vec::new();
        self.features.collect_params("features", &mut out);
        out.push(("classifier.weight".into(), &self.classifier_weight));
        out.push(("classifier.bias".into(), &self.classifier_bias));
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut out = Vec::new();
        self.features.collect_params_mut("features", &mut out);
        out.push(("classifier.weight".into(), &mut self.classifier_weight));
        out.push(("classifier.bias".into(), &mut self.classifier_bias));
        out
    }

    pub fn num_trainable(&self) -> usize {
        self.params()
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(_, p)| p.len())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Plain SGD: `value -= lr * grad_scale * grad` for every trainable parameter.
    pub fn sgd_step(&mut self, lr: f64, grad_scale: f64) {
        for (_, p) in self.params_mut() {
            if p.trainable {
                for (v, g) in p.value.iter_mut().zip(&p.grad) {
                    *v -= lr * (grad_scale * g);
                }
            }
        }
    }

    /// Writes every parameter as a named `f64` array in an `.npz` archive.
    pub fn save_params(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut npz = NpzWriter::new(BufWriter::new(file));
        let arr_err = |e: &dyn std::fmt::Display| Error::ArrayFile {
            path: path.to_path_buf(),
            message: e.to_string(),
        };
        for (name, p) in self.params() {
            let arr = ArrayD::from_shape_vec(IxDyn(&p.shape), p.value.clone())
                .map_err(|e| arr_err(&e))?;
            npz.add_array(name, &arr).map_err(|e| arr_err(&e))?;
        }
        npz.finish().map_err(|e| arr_err(&e))?;
        Ok(())
    }

    /// Loads named arrays from an `.npz` archive into the parameters selected
    /// by `select`. Every selected parameter must be present with a matching size.
    pub fn load_params(&mut self, path: &Path, select: impl Fn(&str) -> bool) -> Result<()> {
        let arrays = read_npz(path)?;
        for (name, p) in self.params_mut() {
            if !select(&name) {
                continue;
            }
            let arr = arrays.get(&name).ok_or_else(|| Error::ArrayFile {
                path: path.to_path_buf(),
                message: format!("missing array {name}"),
            })?;
            if arr.len() != p.len() {
                return Err(Error::ArrayFile {
                    path: path.to_path_buf(),
                    message: format!("{name} has {} values, expected {}", arr.len(), p.len()),
                });
            }
            p.value = arr.iter().copied().collect();
        }
        Ok(())
    }
}

fn read_npz(path: &Path) -> Result<BTreeMap<String, ArrayD<f64>>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut npz = NpzReader::new(file).map_err(|e| Error::ArrayFile {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let names = npz.names().map_err(|e| Error::ArrayFile {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let mut out = BTreeMap::new();
    for name in names {
        let key = name.trim_end_matches(".npy").to_string();
        let arr: ArrayD<f64> = match npz.by_name::<ndarray::OwnedRepr<f64>, IxDyn>(&name) {
            Ok(a) => a,
            Err(_) => match npz.by_name::<ndarray::OwnedRepr<f32>, IxDyn>(&name) {
                Ok(a) => a.mapv(f64::from),
                // integer bookkeeping arrays such as num_batches_tracked
                Err(_) => continue,
            },
        };
        out.insert(key, arr);
    }
    Ok(out)
}

/// Flattened trainable parameters, in checkpoint order.
pub fn flatten_trainable(net: &CamNet) -> Vec<f64> {
    net.params()
        .into_iter()
        .filter(|(_, p)| p.trainable)
        .flat_map(|(_, p)| p.value.iter().copied())
        .collect()
}

/// Flattened trainable gradients, in the same order as [`flatten_trainable`].
pub fn flatten_grads(net: &CamNet) -> Vec<f64> {
    net.params()
        .into_iter()
        .filter(|(_, p)| p.trainable)
        .flat_map(|(_, p)| p.grad.iter().copied())
        .collect()
}

/// Overwrites trainable parameters from a flat vector produced by [`flatten_trainable`].
pub fn assign_trainable(net: &mut CamNet, flat: &[f64]) {
    let mut offset = 0;
    for (_, p) in net.params_mut() {
        if p.trainable {
            let n = p.len();
            p.value.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
    }
    assert_eq!(offset, flat.len(), "flat parameter length");
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cam::compute_class_cam;
    use rand::RngExt;

    fn random_image(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Array3<f64> {
        Array3::from_shape_fn((c, h, w), |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn tiny_is_deterministic_per_seed() {
        let spec = ModelSpec::tiny(1);
        let a = build_model(&spec, 3).unwrap();
        let b = build_model(&spec, 3).unwrap();
        let c = build_model(&spec, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn tiny_has_two_class_head_and_feature_grid() {
        let net = build_model(&ModelSpec::tiny(3), 0).unwrap();
        assert_eq!(net.num_classes(), 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = net.predict(&random_image(&mut rng, 3, 32, 32)).unwrap();
        assert_eq!(out.features.dim(), (16, 8, 8));
        assert_eq!(out.class_weights.dim(), (2, 16));
        assert!((out.probabilities.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cam_mean_equals_logit_minus_bias() {
        let mut net = build_model(&ModelSpec::tiny(1), 7).unwrap();
        net.classifier_bias.value = vec![0.3, -0.2];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let out = net.predict(&random_image(&mut rng, 1, 16, 16)).unwrap();
            for c in 0..2 {
                let cam = compute_class_cam(&out, c).unwrap();
                let expected = out.logits[c] - out.biases[c];
                assert!((cam.mean() - expected).abs() <= 1e-4 * expected.abs() + 1e-12);
            }
        }
    }

    #[test]
    fn grayscale_is_replicated_for_rgb_models() {
        let spec = ModelSpec::tiny(3);
        let net = build_structure(&spec).unwrap();
        let img = Array3::from_elem((1, 4, 4), 0.25);
        let x = net.prepare_input(&img).unwrap();
        assert_eq!(x.dim(), (3, 4, 4));
        assert!(net.prepare_input(&Array3::zeros((2, 4, 4))).is_err());
    }

    #[test]
    fn missing_pretrained_checkpoint_is_explicit() {
        let spec = ModelSpec {
            arch: ModelArch::Densenet121Pretrained,
            image_channels: 1,
            tiny_widths: default_tiny_widths(),
            pretrained_checkpoint: Some(PathBuf::from("/nonexistent/densenet121.npz")),
        };
        match build_model(&spec, 0) {
            Err(Error::MissingCheckpoint { instructions, .. }) => {
                assert!(instructions.contains("export_densenet121.py"))
            }
            other => panic!("expected missing checkpoint error, got {other:?}"),
        }
    }

    #[test]
    fn densenet121_layout() {
        let spec = ModelSpec {
            arch: ModelArch::Densenet121Pretrained,
            image_channels: 1,
            tiny_widths: default_tiny_widths(),
            pretrained_checkpoint: None,
        };
        let net = build_structure(&spec).unwrap();
        assert_eq!(net.classifier_weight.shape, vec![2, 1024]);
        // torchvision's densenet121 has 7,978,856 parameters; its head is 1000x1024 + 1000.
        // Swapping in a 2-class head leaves 6,953,856 + 2,050 trainable values.
        assert_eq!(net.num_trainable(), 6_953_856 + 2_050);
        let names: Vec<_> = net.params().into_iter().map(|(n, _)| n).collect();
        assert!(names.contains(&"features.denseblock4.denselayer16.conv2.weight".to_string()));
        assert!(names.contains(&"features.transition3.conv.weight".to_string()));
        assert!(names.contains(&"features.norm5.running_var".to_string()));
    }

    #[test]
    fn params_round_trip_through_npz() {
        let dir = tempfile::tempdir().unwrap();
        let net = build_model(&ModelSpec::tiny(1), 5).unwrap();
        let path = dir.path().join("m.npz");
        net.save_params(&path).unwrap();
        let mut back = build_structure(&ModelSpec::tiny(1)).unwrap();
        back.load_params(&path, |_| true).unwrap();
        assert_eq!(net, back);
    }

    #[test]
    fn flatten_assign_round_trip() {
        let mut net = build_model(&ModelSpec::tiny(1), 5).unwrap();
        let flat = flatten_trainable(&net);
        assert_eq!(flat.len(), net.num_trainable());
        let doubled: Vec<f64> = flat.iter().map(|v| 2.0 * v).collect();
        assert_flat(&mut net, &doubled);
    }

    fn assert_flat(net: &mut CamNet, flat: &[f64]) {
        assign_trainable(net, flat);
        assert_eq!(flatten_trainable(net), flat);
    }
}
