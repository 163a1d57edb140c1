use rand::Rng;

use super::{check_layer, Architecture, Init, LayerSpec, Op, Sequential, Trace};
use crate::error::{Error, Result};
use crate::image::{Domain, Image};
use crate::tensor::{concat_channels, concat_channels_backward, GradTape, NetworkParams, Padding, Tensor};

/// Side of a training input patch.
pub const PATCH_INPUT: usize = 35;
/// Side of the gradient patch predicted for it.
pub const PATCH_OUTPUT: usize = 19;
/// Border dropped on each side when going from input to output patch.
pub const PATCH_MARGIN: usize = (PATCH_INPUT - PATCH_OUTPUT) / 2;

const DEPTH_LAYERS: [&str; 5] = ["conv1", "conv2", "conv3", "conv4", "conv5"];
const INTRINSIC_LAYERS: [&str; 7] = [
    "conv1",
    "conv2",
    "conv3",
    "albedo.conv4",
    "albedo.conv5",
    "shading.conv4",
    "shading.conv5",
];

/// Where the conv2 activations of the other task come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Peers {
    /// Zero tensors; used before either net has been trained.
    Zero,
    /// The other net's live conv2 activations on the same input.
    Live,
}

/// Predicted gradient channels. Depth is `(x, y)`; albedo and shading are
/// `(r x, g x, b x, r y, g y, b y)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientOutputs {
    pub depth: Tensor,
    pub albedo: Tensor,
    pub shading: Tensor,
}

#[derive(Clone, Debug)]
pub struct GradientTrace {
    depth_stem: Trace,
    intrinsic_stem: Trace,
    depth_head: Trace,
    trunk: Trace,
    albedo_head: Trace,
    shading_head: Trace,
    width: usize,
}

/// Depth gradient net and intrinsic (albedo + shading) gradient net.
///
/// Both nets run conv1–conv2 on their own; each conv3 then sees its own conv2 activation
/// concatenated with the other net's. The intrinsic net shares conv1–conv3 between albedo and
/// shading and splits into two conv4–conv5 heads. The depth net takes the upsampled coarse
/// depth as a fourth input channel. All convolutions use "same" padding.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientNets {
    pub depth: NetworkParams,
    pub intrinsic: NetworkParams,
    conv2_width: usize,
}

fn conv(layer: usize) -> Op {
    Op::Conv {
        layer,
        stride: 1,
        padding: Padding::Same,
    }
}

struct Chains {
    depth_stem: Sequential,
    depth_head: Sequential,
    intrinsic_stem: Sequential,
    trunk: Sequential,
    albedo_head: Sequential,
    shading_head: Sequential,
}

fn chains() -> Chains {
    Chains {
        depth_stem: Sequential::new(vec![conv(0), Op::Relu, conv(1), Op::Relu]),
        depth_head: Sequential::new(vec![conv(2), Op::Relu, conv(3), Op::Relu, conv(4)]),
        intrinsic_stem: Sequential::new(vec![conv(0), Op::Relu, conv(1), Op::Relu]),
        trunk: Sequential::new(vec![conv(2), Op::Relu]),
        albedo_head: Sequential::new(vec![conv(3), Op::Relu, conv(4)]),
        shading_head: Sequential::new(vec![conv(5), Op::Relu, conv(6)]),
    }
}

fn depth_dims(arch: &Architecture) -> [[usize; 4]; 5] {
    let [c1, c2, c3, c4] = arch.grad_widths;
    let k = arch.grad_kernel;
    [[c1, 4, k, k], [c2, c1, 3, 3], [c3, 2 * c2, 3, 3], [c4, c3, 3, 3], [2, c4, 3, 3]]
}

fn intrinsic_dims(arch: &Architecture) -> [[usize; 4]; 7] {
    let [c1, c2, c3, c4] = arch.grad_widths;
    let k = arch.grad_kernel;
    [
        [c1, 3, k, k],
        [c2, c1, 3, 3],
        [c3, 2 * c2, 3, 3],
        [c4, c3, 3, 3],
        [6, c4, 3, 3],
        [c4, c3, 3, 3],
        [6, c4, 3, 3],
    ]
}

impl GradientNets {
    pub fn new<R: Rng + ?Sized>(arch: &Architecture, init: Init, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let mut depth = NetworkParams::new();
        for (name, [o, i, kh, kw]) in DEPTH_LAYERS.iter().zip(depth_dims(arch)) {
            depth.push(*name, init.layer(o, i, kh, kw, rng));
        }
        let mut intrinsic = NetworkParams::new();
        for (name, [o, i, kh, kw]) in INTRINSIC_LAYERS.iter().zip(intrinsic_dims(arch)) {
            intrinsic.push(*name, init.layer(o, i, kh, kw, rng));
        }
        Ok(GradientNets {
            depth,
            intrinsic,
            conv2_width: arch.grad_widths[1],
        })
    }

    pub fn from_params(arch: &Architecture, depth: NetworkParams, intrinsic: NetworkParams) -> Result<Self> {
        arch.validate()?;
        for (i, (name, dims)) in DEPTH_LAYERS.iter().zip(depth_dims(arch)).enumerate() {
            check_layer(&depth, i, name, dims)?;
        }
        for (i, (name, dims)) in INTRINSIC_LAYERS.iter().zip(intrinsic_dims(arch)).enumerate() {
            check_layer(&intrinsic, i, name, dims)?;
        }
        Ok(GradientNets {
            depth,
            intrinsic,
            conv2_width: arch.grad_widths[1],
        })
    }

    /// Names of the last layer of each gradient head (trained at the reduced rate).
    pub fn is_final_layer(name: &str) -> bool {
        name.ends_with("conv5")
    }

    fn depth_input(image: &Tensor, coarse_depth: &Tensor) -> Result<Tensor> {
        if image.channels() != 3 || coarse_depth.channels() != 1 {
            return Err(Error::shape(
                "gradient_net_forward",
                "3-channel image and 1-channel coarse depth",
                format!("{} and {}", image.channels(), coarse_depth.channels()),
            ));
        }
        concat_channels(image, coarse_depth)
    }

    fn check_peer(&self, own: &Tensor, peer: Option<&Tensor>) -> Result<Tensor> {
        match peer {
            None => Ok(Tensor::zeros(own.height(), own.width(), self.conv2_width)),
            Some(p) if p.shape() == own.shape() => Ok(p.clone()),
            Some(p) => Err(Error::shape(
                "gradient_net_forward",
                format!("peer activations {:?}", own.shape()),
                format!("{:?}", p.shape()),
            )),
        }
    }

    /// conv2 activation of the depth net for a 3-channel image and its coarse depth.
    pub fn depth_activation(&self, image: &Tensor, coarse_depth: &Tensor) -> Result<Tensor> {
        chains()
            .depth_stem
            .forward(&self.depth, &Self::depth_input(image, coarse_depth)?)
    }

    /// conv2 activation of the intrinsic net.
    pub fn intrinsic_activation(&self, image: &Tensor) -> Result<Tensor> {
        chains().intrinsic_stem.forward(&self.intrinsic, image)
    }

    /// Depth gradients given the intrinsic net's conv2 activation (zeros when `None`).
    pub fn depth_forward(&self, image: &Tensor, coarse_depth: &Tensor, peer: Option<&Tensor>) -> Result<Tensor> {
        let c = chains();
        let own = self.depth_activation(image, coarse_depth)?;
        let peer = self.check_peer(&own, peer)?;
        c.depth_head.forward(&self.depth, &concat_channels(&own, &peer)?)
    }

    /// Albedo and shading gradients given the depth net's conv2 activation (zeros when `None`).
    pub fn intrinsic_forward(&self, image: &Tensor, peer: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
        let c = chains();
        let own = self.intrinsic_activation(image)?;
        let peer = self.check_peer(&own, peer)?;
        let t = c.trunk.forward(&self.intrinsic, &concat_channels(&own, &peer)?)?;
        Ok((
            c.albedo_head.forward(&self.intrinsic, &t)?,
            c.shading_head.forward(&self.intrinsic, &t)?,
        ))
    }

    /// Joint forward at the input's resolution (no cropping).
    pub fn forward(&self, image: &Tensor, coarse_depth: &Tensor, peers: Peers) -> Result<GradientOutputs> {
        Ok(self.forward_traced(image, coarse_depth, peers)?.0)
    }

    pub fn forward_traced(
        &self,
        image: &Tensor,
        coarse_depth: &Tensor,
        peers: Peers,
    ) -> Result<(GradientOutputs, GradientTrace)> {
        let c = chains();
        let (a_depth, depth_stem) = c
            .depth_stem
            .forward_traced(&self.depth, &Self::depth_input(image, coarse_depth)?)?;
        let (a_intr, intrinsic_stem) = c.intrinsic_stem.forward_traced(&self.intrinsic, image)?;
        let (peer_for_depth, peer_for_intr) = match peers {
            Peers::Live => (a_intr.clone(), a_depth.clone()),
            Peers::Zero => (
                Tensor::zeros(a_intr.height(), a_intr.width(), a_intr.channels()),
                Tensor::zeros(a_depth.height(), a_depth.width(), a_depth.channels()),
            ),
        };
        let (depth, depth_head) = c
            .depth_head
            .forward_traced(&self.depth, &concat_channels(&a_depth, &peer_for_depth)?)?;
        let (t, trunk) = c
            .trunk
            .forward_traced(&self.intrinsic, &concat_channels(&a_intr, &peer_for_intr)?)?;
        let (albedo, albedo_head) = c.albedo_head.forward_traced(&self.intrinsic, &t)?;
        let (shading, shading_head) = c.shading_head.forward_traced(&self.intrinsic, &t)?;
        Ok((
            GradientOutputs { depth, albedo, shading },
            GradientTrace {
                depth_stem,
                intrinsic_stem,
                depth_head,
                trunk,
                albedo_head,
                shading_head,
                width: self.conv2_width,
            },
        ))
    }

    /// Depth-net parameter gradients. Peer activations are treated as constant inputs.
    pub fn backward_depth(&self, trace: &GradientTrace, upstream: Tensor) -> Result<Vec<GradTape>> {
        let c = chains();
        let mut grads = self.depth.zero_grads();
        let g = c.depth_head.backward(&self.depth, &trace.depth_head, upstream, &mut grads)?;
        let (own, _) = concat_channels_backward(&g, trace.width)?;
        c.depth_stem.backward(&self.depth, &trace.depth_stem, own, &mut grads)?;
        Ok(grads)
    }

    /// Intrinsic-net parameter gradients from albedo and shading upstream gradients.
    pub fn backward_intrinsic(
        &self,
        trace: &GradientTrace,
        upstream_albedo: Tensor,
        upstream_shading: Tensor,
    ) -> Result<Vec<GradTape>> {
        let c = chains();
        let mut grads = self.intrinsic.zero_grads();
        let mut gt = c
            .albedo_head
            .backward(&self.intrinsic, &trace.albedo_head, upstream_albedo, &mut grads)?;
        gt.add_assign(&c.shading_head.backward(
            &self.intrinsic,
            &trace.shading_head,
            upstream_shading,
            &mut grads,
        )?)?;
        let g = c.trunk.backward(&self.intrinsic, &trace.trunk, gt, &mut grads)?;
        let (own, _) = concat_channels_backward(&g, trace.width)?;
        c.intrinsic_stem
            .backward(&self.intrinsic, &trace.intrinsic_stem, own, &mut grads)?;
        Ok(grads)
    }

    /// Forward on a 35×35 patch, returning the centered 19×19 outputs.
    pub fn forward_patch(&self, image: &Tensor, coarse_depth: &Tensor, peers: Peers) -> Result<GradientOutputs> {
        if image.height() != PATCH_INPUT || image.width() != PATCH_INPUT {
            return Err(Error::shape(
                "forward_patch",
                format!("{PATCH_INPUT}x{PATCH_INPUT} patch"),
                format!("{}x{}", image.height(), image.width()),
            ));
        }
        let out = self.forward(image, coarse_depth, peers)?;
        let crop = |t: &Tensor| t.crop(PATCH_MARGIN, PATCH_MARGIN, PATCH_OUTPUT, PATCH_OUTPUT);
        Ok(GradientOutputs {
            depth: crop(&out.depth)?,
            albedo: crop(&out.albedo)?,
            shading: crop(&out.shading)?,
        })
    }

    /// Full-image gradients from overlapping 35×35 patches. Output tiles of 19×19 are placed at
    /// stride 19 (the last tile in each direction is aligned to the border) and overlaps are
    /// averaged. The image is replicate-padded so border pixels get full patches.
    pub fn forward_image(&self, image: &Image, coarse_depth: &Image, peers: Peers) -> Result<GradientOutputs> {
        image.expect_domain("gradient_net_forward", Domain::Log)?;
        if image.height() != coarse_depth.height() || image.width() != coarse_depth.width() {
            return Err(Error::shape(
                "forward_image",
                format!("coarse depth {}x{}", image.height(), image.width()),
                format!("{}x{}", coarse_depth.height(), coarse_depth.width()),
            ));
        }
        let (h, w, _) = image.shape();
        let (oh, ow) = (h.max(PATCH_OUTPUT), w.max(PATCH_OUTPUT));
        let pad = |img: &Image| img.pad_replicate(PATCH_MARGIN, PATCH_MARGIN + oh - h, PATCH_MARGIN, PATCH_MARGIN + ow - w);
        let padded_image = pad(image);
        let padded_depth = pad(coarse_depth);

        let mut sums = [Tensor::zeros(oh, ow, 2), Tensor::zeros(oh, ow, 6), Tensor::zeros(oh, ow, 6)];
        let mut counts = vec![0u32; oh * ow];
        for y0 in tile_origins(oh) {
            for x0 in tile_origins(ow) {
                let img = padded_image.crop(y0, x0, PATCH_INPUT, PATCH_INPUT)?;
                let dep = padded_depth.crop(y0, x0, PATCH_INPUT, PATCH_INPUT)?;
                let out = self.forward_patch(img.tensor(), dep.tensor(), peers)?;
                for (sum, tile) in sums.iter_mut().zip([&out.depth, &out.albedo, &out.shading]) {
                    for y in 0..PATCH_OUTPUT {
                        for x in 0..PATCH_OUTPUT {
                            for c in 0..tile.channels() {
                                *sum.at_mut(y0 + y, x0 + x, c) += tile.at(y, x, c);
                            }
                        }
                    }
                }
                for y in 0..PATCH_OUTPUT {
                    for x in 0..PATCH_OUTPUT {
                        counts[(y0 + y) * ow + x0 + x] += 1;
                    }
                }
            }
        }
        let finish = |sum: &Tensor| -> Result<Tensor> {
            let c = sum.channels();
            let mut avg = sum.clone();
            for (i, px) in avg.data_mut().chunks_exact_mut(c).enumerate() {
                let n = counts[i] as f64;
                px.iter_mut().for_each(|v| *v /= n);
            }
            avg.crop(0, 0, h, w)
        };
        Ok(GradientOutputs {
            depth: finish(&sums[0])?,
            albedo: finish(&sums[1])?,
            shading: finish(&sums[2])?,
        })
    }

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        let spec = |network: &str, name: &str, dims, group: String| LayerSpec {
            network: network.into(),
            layer: name.into(),
            dims,
            stride: 1,
            padding: Some(Padding::Same),
            group,
        };
        let mut out: Vec<LayerSpec> = self
            .depth
            .layers
            .iter()
            .map(|(n, p)| spec("depth_gradient", n, p.dims(), format!("depth_gradient.{n}")))
            .collect();
        out.extend(self.intrinsic.layers.iter().enumerate().map(|(i, (n, p))| {
            let group = if i < 3 {
                "intrinsic_gradient.stem".to_string()
            } else {
                format!("intrinsic_gradient.{n}")
            };
            spec("intrinsic_gradient", n, p.dims(), group)
        }));
        out
    }
}

/// Top-left output positions of tiles covering `0..len`.
fn tile_origins(len: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (0..len).step_by(PATCH_OUTPUT).filter(|&o| o + PATCH_OUTPUT <= len).collect();
    let last = len - PATCH_OUTPUT;
    if out.last() != Some(&last) {
        out.push(last);
    }
    out
}
