use rand::Rng;

use super::{check_layer, scale_activation, scale_activation_grad, scale_activation_inverse};
use super::{Architecture, Init, LayerSpec, Op, Sequential, Trace};
use crate::error::{Error, Result};
use crate::image::{squared_magnitude_channels, GradientField};
use crate::tensor::{concat_channels, GradTape, NetworkParams, Padding, Tensor};

/// Confidence a scale net outputs everywhere right after leaving bypass mode.
pub const INITIAL_CONFIDENCE: f64 = 0.9;

const LAYERS: [&str; 3] = ["conv1", "conv2", "conv3"];

/// Which gradient a scale net weighs, and therefore which guidance it reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ScaleRole {
    /// Reads |∇I|², |∇A|², |∇S|² (9 channels), weighs the 2 depth gradient channels.
    Depth,
    /// Reads |∇I|², |∇D|², |∇S|² (7 channels), weighs the 6 albedo gradient channels.
    Albedo,
    /// Reads |∇I|², |∇D|², |∇A|² (7 channels), weighs the 6 shading gradient channels.
    Shading,
}

impl ScaleRole {
    pub const ALL: [ScaleRole; 3] = [ScaleRole::Depth, ScaleRole::Albedo, ScaleRole::Shading];

    pub fn input_channels(self) -> usize {
        match self {
            ScaleRole::Depth => 9,
            _ => 7,
        }
    }

    pub fn output_channels(self) -> usize {
        match self {
            ScaleRole::Depth => 2,
            _ => 6,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ScaleRole::Depth => "depth_scale",
            ScaleRole::Albedo => "albedo_scale",
            ScaleRole::Shading => "shading_scale",
        }
    }
}

/// Stacks the per-channel squared gradient magnitudes read by the scale net for `role`.
/// `image`, `albedo` and `shading` have 3 channels, `depth` has 1.
pub fn scale_guidance(
    role: ScaleRole,
    image: &GradientField,
    depth: &GradientField,
    albedo: &GradientField,
    shading: &GradientField,
) -> Result<Tensor> {
    let (second, third) = match role {
        ScaleRole::Depth => (albedo, shading),
        ScaleRole::Albedo => (depth, shading),
        ScaleRole::Shading => (depth, albedo),
    };
    let stack = concat_channels(
        &concat_channels(&squared_magnitude_channels(image), &squared_magnitude_channels(second))?,
        &squared_magnitude_channels(third),
    )?;
    if stack.channels() != role.input_channels() {
        return Err(Error::shape(
            "scale_guidance",
            format!("{} guidance channels", role.input_channels()),
            format!("{}", stack.channels()),
        ));
    }
    Ok(stack)
}

#[derive(Clone, Debug)]
pub struct ScaleTrace {
    chain: Trace,
    output: Tensor,
}

/// Three linear convolutions (3×3, 3×3, 1×1) followed by [`scale_activation`].
///
/// A fresh net is in bypass mode and outputs exactly 1 everywhere.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleNet {
    pub role: ScaleRole,
    pub params: NetworkParams,
    bypass: bool,
}

fn layer_dims(role: ScaleRole, arch: &Architecture) -> [[usize; 4]; 3] {
    let [w1, w2] = arch.scale_widths;
    [
        [w1, role.input_channels(), 3, 3],
        [w2, w1, 3, 3],
        [role.output_channels(), w2, 1, 1],
    ]
}

fn chain() -> Sequential {
    let conv = |layer| Op::Conv {
        layer,
        stride: 1,
        padding: Padding::Same,
    };
    Sequential::new(vec![conv(0), conv(1), conv(2)])
}

impl ScaleNet {
    pub fn new<R: Rng + ?Sized>(role: ScaleRole, arch: &Architecture, init: Init, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let mut params = NetworkParams::new();
        for (name, [o, i, kh, kw]) in LAYERS.iter().zip(layer_dims(role, arch)) {
            params.push(*name, init.layer(o, i, kh, kw, rng));
        }
        Ok(ScaleNet {
            role,
            params,
            bypass: true,
        })
    }

    pub fn from_params(role: ScaleRole, arch: &Architecture, params: NetworkParams, bypass: bool) -> Result<Self> {
        arch.validate()?;
        for (i, (name, dims)) in LAYERS.iter().zip(layer_dims(role, arch)).enumerate() {
            check_layer(&params, i, name, dims)?;
        }
        Ok(ScaleNet { role, params, bypass })
    }

    pub fn is_bypassed(&self) -> bool {
        self.bypass
    }

    /// Leaves bypass mode. The last bias is set so that a net with near-zero weights starts out
    /// at [`INITIAL_CONFIDENCE`].
    pub fn release_bypass(&mut self) {
        if !self.bypass {
            return;
        }
        self.bypass = false;
        let b = scale_activation_inverse(INITIAL_CONFIDENCE);
        self.params.get_mut("conv3").expect("conv3 present").biases.fill(b);
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        if input.channels() != self.role.input_channels() {
            return Err(Error::shape(
                "scale_net_forward",
                format!("{} input channels", self.role.input_channels()),
                format!("{}", input.channels()),
            ));
        }
        Ok(())
    }

    /// Confidence field in (−1, 1), or exactly 1 in bypass mode.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        self.check_input(input)?;
        if self.bypass {
            return Ok(Tensor::filled(input.height(), input.width(), self.role.output_channels(), 1.0));
        }
        Ok(chain().forward(&self.params, input)?.map(scale_activation))
    }

    pub fn forward_traced(&self, input: &Tensor) -> Result<(Tensor, ScaleTrace)> {
        self.check_input(input)?;
        if self.bypass {
            return Err(Error::InvalidArgument(format!("{} is in bypass mode", self.role.name())));
        }
        let (pre, chain_trace) = chain().forward_traced(&self.params, input)?;
        let output = pre.map(scale_activation);
        Ok((
            output.clone(),
            ScaleTrace {
                chain: chain_trace,
                output,
            },
        ))
    }

    /// Parameter gradients given `dL/dC`.
    pub fn backward(&self, trace: &ScaleTrace, upstream: &Tensor) -> Result<Vec<GradTape>> {
        trace.output.check_same("scale_net_backward", upstream)?;
        let data = upstream
            .data()
            .iter()
            .zip(trace.output.data())
            .map(|(g, &y)| g * scale_activation_grad(y))
            .collect();
        let (h, w, c) = upstream.shape();
        let mut grads = self.params.zero_grads();
        chain().backward(&self.params, &trace.chain, Tensor::new(h, w, c, data)?, &mut grads)?;
        Ok(grads)
    }

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        let net = self.role.name();
        self.params
            .layers
            .iter()
            .map(|(name, p)| LayerSpec {
                network: net.into(),
                layer: name.clone(),
                dims: p.dims(),
                stride: 1,
                padding: Some(Padding::Same),
                group: format!("{net}.{name}"),
            })
            .collect()
    }
}

/// The three scale nets, one per role.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleNets {
    pub depth: ScaleNet,
    pub albedo: ScaleNet,
    pub shading: ScaleNet,
}

impl ScaleNets {
    pub fn new<R: Rng + ?Sized>(arch: &Architecture, init: Init, rng: &mut R) -> Result<Self> {
        Ok(ScaleNets {
            depth: ScaleNet::new(ScaleRole::Depth, arch, init, rng)?,
            albedo: ScaleNet::new(ScaleRole::Albedo, arch, init, rng)?,
            shading: ScaleNet::new(ScaleRole::Shading, arch, init, rng)?,
        })
    }

    pub fn get(&self, role: ScaleRole) -> &ScaleNet {
        match role {
            ScaleRole::Depth => &self.depth,
            ScaleRole::Albedo => &self.albedo,
            ScaleRole::Shading => &self.shading,
        }
    }

    pub fn get_mut(&mut self, role: ScaleRole) -> &mut ScaleNet {
        match role {
            ScaleRole::Depth => &mut self.depth,
            ScaleRole::Albedo => &mut self.albedo,
            ScaleRole::Shading => &mut self.shading,
        }
    }

    pub fn is_bypassed(&self) -> bool {
        ScaleRole::ALL.iter().all(|&r| self.get(r).is_bypassed())
    }

    pub fn release_bypass(&mut self) {
        for r in ScaleRole::ALL {
            self.get_mut(r).release_bypass();
        }
    }

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        ScaleRole::ALL.iter().flat_map(|&r| self.get(r).layer_specs()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::forward_gradient;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net(role: ScaleRole, seed: u64) -> ScaleNet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ScaleNet::new(role, &Architecture::default(), Init::He, &mut rng).unwrap()
    }

    #[test]
    fn bypass_outputs_exact_one() {
        let n = net(ScaleRole::Albedo, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = n.forward(&Tensor::random_normal(9, 7, 7, 1.0, &mut rng)).unwrap();
        assert_eq!(out.shape(), (9, 7, 6));
        assert!(out.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn released_output_in_open_interval() {
        for role in ScaleRole::ALL {
            let mut n = net(role, 2);
            n.release_bypass();
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let input = Tensor::random_normal(12, 10, role.input_channels(), 5.0, &mut rng);
            let out = n.forward(&input).unwrap();
            assert_eq!(out.channels(), role.output_channels());
            assert!(out.data().iter().all(|&v| v > -1.0 && v < 1.0));
        }
    }

    #[test]
    fn release_starts_at_initial_confidence() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut n = ScaleNet::new(ScaleRole::Depth, &Architecture::default(), Init::Gaussian { std: 0.0 }, &mut rng)
            .unwrap();
        n.release_bypass();
        let out = n.forward(&Tensor::filled(5, 5, 9, 0.3)).unwrap();
        assert!(out.data().iter().all(|&v| (v - INITIAL_CONFIDENCE).abs() < 1e-12));
    }

    #[test]
    fn wrong_channel_count_rejected() {
        let n = net(ScaleRole::Depth, 0);
        assert!(n.forward(&Tensor::zeros(4, 4, 7)).is_err());
    }

    #[test]
    fn guidance_layout() {
        let f3 = forward_gradient(&Tensor::from_fn(4, 4, 3, |y, x, c| (y * x + c) as f64)).unwrap();
        let f1 = forward_gradient(&Tensor::from_fn(4, 4, 1, |y, x, _| (y + 2 * x) as f64)).unwrap();
        let g = scale_guidance(ScaleRole::Albedo, &f3, &f1, &f3, &f3).unwrap();
        assert_eq!(g.channels(), 7);
        // channel 3 is |∇D|² = 2² + 1² away from the far borders
        assert_eq!(g.at(0, 0, 3), 5.0);
        assert_eq!(scale_guidance(ScaleRole::Depth, &f3, &f1, &f3, &f3).unwrap().channels(), 9);
        assert!(scale_guidance(ScaleRole::Depth, &f3, &f1, &f1, &f3).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut n = net(ScaleRole::Depth, 4);
        n.release_bypass();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let input = Tensor::random_normal(5, 6, 9, 0.5, &mut rng);
        let w = Tensor::random_normal(5, 6, 2, 1.0, &mut rng);
        let loss = |n: &ScaleNet| -> f64 {
            let c = n.forward(&input).unwrap();
            c.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
        };
        let (_, trace) = n.forward_traced(&input).unwrap();
        let grads = n.backward(&trace, &w).unwrap();
        for (layer, idx) in [(0usize, 7usize), (1, 30), (2, 3)] {
            let h = 1e-6;
            let mut p = n.clone();
            p.params.layers[layer].1.kernels[idx] += h;
            let mut m = n.clone();
            m.params.layers[layer].1.kernels[idx] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            let an = grads[layer].kernels[idx];
            assert!((fd - an).abs() < 1e-6 * (1.0 + fd.abs()), "layer {layer}: {fd} vs {an}");
        }
    }
}
