//! The three cooperating networks: the global depth net, the depth/intrinsic gradient nets
//! (with the shared intrinsic stem and the conv2 cross-concatenation), and the gradient scale
//! nets.

mod global;
mod gradient;
mod scale;
mod sequential;

pub use global::GlobalDepthNet;
pub use gradient::{GradientNets, GradientOutputs, GradientTrace, Peers, PATCH_INPUT, PATCH_MARGIN, PATCH_OUTPUT};
pub use scale::{scale_guidance, ScaleNet, ScaleNets, ScaleRole, ScaleTrace, INITIAL_CONFIDENCE};
pub use sequential::{Op, Sequential, Trace};

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{LayerParams, NetworkParams, Padding};

/// Largest double below one; confidences are clamped into the open interval (−1, 1).
const CONFIDENCE_LIMIT: f64 = 1.0 - f64::EPSILON / 2.0;

/// The gradient-scale nonlinearity `f(x) = (1 − e^{1−x}) / (1 + e^{1−x})`.
///
/// Evaluated as `tanh((x − 1) / 2)`, which is the same function without overflow for very
/// negative `x`.
pub fn scale_activation(x: f64) -> f64 {
    ((x - 1.0) * 0.5).tanh().clamp(-CONFIDENCE_LIMIT, CONFIDENCE_LIMIT)
}

/// Derivative of [`scale_activation`] expressed through its output `y = f(x)`.
pub fn scale_activation_grad(y: f64) -> f64 {
    0.5 * (1.0 - y * y)
}

/// Inverse of [`scale_activation`] on (−1, 1).
pub fn scale_activation_inverse(y: f64) -> f64 {
    1.0 + 2.0 * y.atanh()
}

/// Layer widths and sizes of all networks.
#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    /// Side of the square image fed to the global net; the coarse map is `side / 16`.
    pub global_input: usize,
    /// Output channels of global conv1..conv5.
    pub global_widths: [usize; 5],
    /// Width of the first fully-connected layer.
    pub global_fc: usize,
    /// Output channels of gradient conv1..conv4.
    pub grad_widths: [usize; 4],
    /// Kernel side of gradient conv1.
    pub grad_kernel: usize,
    /// Output channels of scale conv1..conv2.
    pub scale_widths: [usize; 2],
}

impl Default for Architecture {
    /// Table widths divided by four.
    fn default() -> Self {
        Architecture {
            global_input: 64,
            global_widths: [24, 64, 96, 96, 64],
            global_fc: 512,
            grad_widths: [24, 16, 16, 16],
            grad_kernel: 11,
            scale_widths: [16, 16],
        }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.global_input < 16 || !self.global_input.is_multiple_of(16) {
            return Err(Error::Config(format!(
                "global_input must be a positive multiple of 16, got {}",
                self.global_input
            )));
        }
        if self.grad_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("grad_kernel must be odd, got {}", self.grad_kernel)));
        }
        let all = self
            .global_widths
            .iter()
            .chain(&self.grad_widths)
            .chain(&self.scale_widths)
            .chain(std::iter::once(&self.global_fc));
        if all.into_iter().any(|&w| w == 0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        Ok(())
    }
}

/// Weight initialization scheme. Biases start at zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Gaussian { std: f64 },
    /// `std = sqrt(2 / fan_in)`.
    He,
}

impl Init {
    pub fn layer<R: Rng + ?Sized>(self, out_ch: usize, in_ch: usize, kh: usize, kw: usize, rng: &mut R) -> LayerParams {
        let std = match self {
            Init::Gaussian { std } => std,
            Init::He => (2.0 / (in_ch * kh * kw) as f64).sqrt(),
        };
        LayerParams::random_normal(out_ch, in_ch, kh, kw, std, rng)
    }
}

/// One row of a network topology manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub network: String,
    pub layer: String,
    pub dims: [usize; 4],
    pub stride: usize,
    pub padding: Option<Padding>,
    pub group: String,
}

impl LayerSpec {
    pub fn to_line(&self) -> String {
        let [o, i, kh, kw] = self.dims;
        format!(
            "{} {} {o}x{i}x{kh}x{kw} stride={} padding={} group={}",
            self.network,
            self.layer,
            self.stride,
            self.padding.map_or("none", Padding::as_str),
            self.group
        )
    }
}

/// Renders layer specs as the plain-text topology manifest.
pub fn topology_manifest(specs: &[LayerSpec]) -> String {
    let mut out = String::from("# network layer out x in x kh x kw stride padding share-group\n");
    for s in specs {
        out.push_str(&s.to_line());
        out.push('\n');
    }
    out
}

pub(crate) fn check_layer(params: &NetworkParams, index: usize, name: &str, dims: [usize; 4]) -> Result<()> {
    let Some((n, p)) = params.layers.get(index) else {
        return Err(Error::shape("network params", format!("layer {name}"), "missing layer"));
    };
    if n != name || p.dims() != dims {
        return Err(Error::shape(
            "network params",
            format!("{name} {dims:?}"),
            format!("{n} {:?}", p.dims()),
        ));
    }
    Ok(())
}
