use rand::Rng;

use super::{check_layer, Architecture, Init, LayerSpec, Op, Sequential, Trace};
use crate::error::{Error, Result};
use crate::image::{bilinear_upsample, Domain, Image};
use crate::tensor::{GradTape, NetworkParams, Padding, Tensor};

const LAYERS: [&str; 7] = ["conv1", "conv2", "conv3", "conv4", "conv5", "fc1", "fc2"];

/// Five convolutions and two fully-connected layers predicting a coarse log-depth map at 1/16
/// of the input side. Max pooling follows conv1, conv2 and conv5; ReLU follows every layer but
/// fc2.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalDepthNet {
    pub params: NetworkParams,
    input_side: usize,
    chain: Sequential,
}

fn layer_dims(arch: &Architecture) -> [[usize; 4]; 7] {
    let [w1, w2, w3, w4, w5] = arch.global_widths;
    let coarse = arch.global_input / 16;
    [
        [w1, 3, 11, 11],
        [w2, w1, 5, 5],
        [w3, w2, 3, 3],
        [w4, w3, 3, 3],
        [w5, w4, 3, 3],
        [arch.global_fc, coarse * coarse * w5, 1, 1],
        [coarse * coarse, arch.global_fc, 1, 1],
    ]
}

fn chain(arch: &Architecture) -> Sequential {
    let coarse = arch.global_input / 16;
    let conv = |layer, stride| Op::Conv {
        layer,
        stride,
        padding: Padding::Same,
    };
    let pool = Op::MaxPool { window: 2, stride: 2 };
    Sequential::new(vec![
        conv(0, 2),
        Op::Relu,
        pool,
        conv(1, 1),
        Op::Relu,
        pool,
        conv(2, 1),
        Op::Relu,
        conv(3, 1),
        Op::Relu,
        conv(4, 1),
        Op::Relu,
        pool,
        Op::Fc { layer: 5 },
        Op::Relu,
        Op::Fc { layer: 6 },
        Op::Reshape {
            height: coarse,
            width: coarse,
            channels: 1,
        },
    ])
}

impl GlobalDepthNet {
    pub fn new<R: Rng + ?Sized>(arch: &Architecture, init: Init, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let mut params = NetworkParams::new();
        for (name, [o, i, kh, kw]) in LAYERS.iter().zip(layer_dims(arch)) {
            params.push(*name, init.layer(o, i, kh, kw, rng));
        }
        Ok(GlobalDepthNet {
            params,
            input_side: arch.global_input,
            chain: chain(arch),
        })
    }

    pub fn from_params(arch: &Architecture, params: NetworkParams) -> Result<Self> {
        arch.validate()?;
        for (i, (name, dims)) in LAYERS.iter().zip(layer_dims(arch)).enumerate() {
            check_layer(&params, i, name, dims)?;
        }
        Ok(GlobalDepthNet {
            params,
            input_side: arch.global_input,
            chain: chain(arch),
        })
    }

    pub fn input_side(&self) -> usize {
        self.input_side
    }

    pub fn coarse_side(&self) -> usize {
        self.input_side / 16
    }

    /// Resamples a log-domain color image to the net's input size.
    pub fn prepare_input(&self, img: &Image) -> Result<Tensor> {
        img.expect_domain("global_depth_forward", Domain::Log)?;
        if img.channels() != 3 {
            return Err(Error::shape("global_depth_forward", "3 channels", format!("{}", img.channels())));
        }
        if img.height() < 16 || img.width() < 16 {
            return Err(Error::shape(
                "global_depth_forward",
                "image at least 16x16",
                format!("{}x{}", img.height(), img.width()),
            ));
        }
        Ok(bilinear_upsample(img, self.input_side, self.input_side)?.into_tensor())
    }

    /// Coarse log-depth map (`side/16` square) for a full log-domain color image.
    pub fn forward(&self, img: &Image) -> Result<Image> {
        let input = self.prepare_input(img)?;
        Ok(Image::new(self.chain.forward(&self.params, &input)?, Domain::Log))
    }

    /// Coarse prediction bilinearly upsampled to `height`×`width`.
    pub fn predict(&self, img: &Image, height: usize, width: usize) -> Result<Image> {
        bilinear_upsample(&self.forward(img)?, height, width)
    }

    pub fn forward_traced(&self, input: &Tensor) -> Result<(Tensor, Trace)> {
        self.chain.forward_traced(&self.params, input)
    }

    pub fn backward(&self, trace: &Trace, upstream: Tensor) -> Result<Vec<GradTape>> {
        let mut grads = self.params.zero_grads();
        self.chain.backward(&self.params, trace, upstream, &mut grads)?;
        Ok(grads)
    }

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        self.params
            .layers
            .iter()
            .enumerate()
            .map(|(i, (name, p))| LayerSpec {
                network: "global_depth".into(),
                layer: name.clone(),
                dims: p.dims(),
                stride: if i == 0 { 2 } else { 1 },
                padding: (i < 5).then_some(Padding::Same),
                group: format!("global_depth.{name}"),
            })
            .collect()
    }
}
