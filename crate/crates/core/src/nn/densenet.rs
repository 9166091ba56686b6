//! DenseNet backbones laid out with torchvision's parameter names, so that
//! converted ImageNet checkpoints load by name.

use super::layers::{BatchNorm2d, Conv2d, DenseBlock, Layer, PoolSpec, Sequential};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DenseNetConfig {
    pub growth_rate: usize,
    pub block_config: Vec<usize>,
    pub num_init_features: usize,
    pub bn_size: usize,
}

impl DenseNetConfig {
    pub fn densenet121() -> Self {
        Self {
            growth_rate: 32,
            block_config: vec![6, 12, 24, 16],
            num_init_features: 64,
            bn_size: 4,
        }
    }

    /// Returns the feature extractor (ending in the final norm + ReLU) and its
    /// output channel count.
    pub fn build(&self, in_channels: usize) -> (Sequential, usize) {
        let mut seq = Sequential::new();
        seq.push(
            "conv0",
            Layer::Conv2d(Conv2d::new(
                in_channels,
                self.num_init_features,
                7,
                2,
                3,
                false,
            )),
        )
        .push(
            "norm0",
            Layer::BatchNorm2d(BatchNorm2d::new(self.num_init_features)),
        )
        .push("relu0", Layer::Relu)
        .push("pool0", Layer::MaxPool2d(PoolSpec::new(3, 2, 1)));

        let mut channels = self.num_init_features;
        for (i, &num_layers) in self.block_config.iter().enumerate() {
            let mut block = DenseBlock { layers: Vec::new() };
            for l in 0..num_layers {
                let in_ch = channels + l * self.growth_rate;
                let inner = self.bn_size * self.growth_rate;
                let mut layer = Sequential::new();
                layer
                    .push("norm1", Layer::BatchNorm2d(BatchNorm2d::new(in_ch)))
                    .push("relu1", Layer::Relu)
                    .push(
                        "conv1",
                        Layer::Conv2d(Conv2d::new(in_ch, inner, 1, 1, 0, false)),
                    )
                    .push("norm2", Layer::BatchNorm2d(BatchNorm2d::new(inner)))
                    .push("relu2", Layer::Relu)
                    .push(
                        "conv2",
                        Layer::Conv2d(Conv2d::new(inner, self.growth_rate, 3, 1, 1, false)),
                    );
                block.layers.push((format!("denselayer{}", l + 1), layer));
            }
            seq.push(format!("denseblock{}", i + 1), Layer::Dense(block));
            channels += num_layers * self.growth_rate;
            if i + 1 < self.block_config.len() {
                let out = channels / 2;
                let mut transition = Sequential::new();
                transition
                    .push("norm", Layer::BatchNorm2d(BatchNorm2d::new(channels)))
                    .push("relu", Layer::Relu)
                    .push(
                        "conv",
                        Layer::Conv2d(Conv2d::new(channels, out, 1, 1, 0, false)),
                    )
                    .push("pool", Layer::AvgPool2d(PoolSpec::new(2, 2, 0)));
                seq.push(format!("transition{}", i + 1), Layer::Seq(transition));
                channels = out;
            }
        }
        seq.push("norm5", Layer::BatchNorm2d(BatchNorm2d::new(channels)))
            .push("relu5", Layer::Relu);
        (seq, channels)
    }
}
