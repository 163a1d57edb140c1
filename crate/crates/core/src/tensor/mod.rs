//! Dense HWC tensors and the small set of differentiable layers the networks are built from.
//!
//! Every layer has a forward function and a matching backward function that takes the
//! forward input and the upstream gradient. There is no tape: networks call the
//! backward functions in reverse order themselves.

mod io;
mod ops;

pub use io::{read_params, write_params, ParamBlock, PARAMS_MAGIC, PARAMS_VERSION};
pub use ops::{
    concat_channels, concat_channels_backward, conv2d, conv2d_backward, fully_connected,
    fully_connected_backward, maxpool, maxpool_backward, relu, relu_backward, Padding,
};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// H×W×C raster, row-major with channels innermost.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::shape(
                "Tensor::new",
                format!("{} values for {height}x{width}x{channels}", height * width * channels),
                format!("{} values", data.len()),
            ));
        }
        Ok(Tensor {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Tensor {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Tensor {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn random_normal<R: Rng + ?Sized>(
        height: usize,
        width: usize,
        channels: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let data = (0..height * width * channels)
            .map(|_| normal.sample(rng))
            .collect();
        Tensor {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.index(y, x, c)]
    }

    #[inline]
    pub fn at_mut(&mut self, y: usize, x: usize, c: usize) -> &mut f64 {
        let i = self.index(y, x, c);
        &mut self.data[i]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Copies channels `start..start + count`.
    pub fn slice_channels(&self, start: usize, count: usize) -> Result<Tensor> {
        if start + count > self.channels {
            return Err(Error::shape(
                "slice_channels",
                format!("channel range within 0..{}", self.channels),
                format!("{start}..{}", start + count),
            ));
        }
        let mut data = Vec::with_capacity(self.height * self.width * count);
        for px in self.data.chunks_exact(self.channels) {
            data.extend_from_slice(&px[start..start + count]);
        }
        Tensor::new(self.height, self.width, count, data)
    }

    /// Copies the `height`×`width` window whose top-left corner is (`y0`, `x0`).
    pub fn crop(&self, y0: usize, x0: usize, height: usize, width: usize) -> Result<Tensor> {
        if y0 + height > self.height || x0 + width > self.width {
            return Err(Error::shape(
                "crop",
                format!("window inside {}x{}", self.height, self.width),
                format!("{height}x{width} at ({y0}, {x0})"),
            ));
        }
        let c = self.channels;
        let mut data = Vec::with_capacity(height * width * c);
        for y in y0..y0 + height {
            let row = self.index(y, x0, 0);
            data.extend_from_slice(&self.data[row..row + width * c]);
        }
        Tensor::new(height, width, c, data)
    }

    /// Centered crop to `height`×`width`.
    pub fn center_crop(&self, height: usize, width: usize) -> Result<Tensor> {
        if height > self.height || width > self.width {
            return Err(Error::shape(
                "center_crop",
                format!("at most {}x{}", self.height, self.width),
                format!("{height}x{width}"),
            ));
        }
        self.crop((self.height - height) / 2, (self.width - width) / 2, height, width)
    }

    /// Zero tensor of this shape with `inner` written at (`y0`, `x0`); adjoint of [`Tensor::crop`].
    pub fn embed(&self, inner: &Tensor, y0: usize, x0: usize) -> Result<Tensor> {
        if inner.channels != self.channels
            || y0 + inner.height > self.height
            || x0 + inner.width > self.width
        {
            return Err(Error::shape(
                "embed",
                format!("window inside {:?}", self.shape()),
                format!("{:?} at ({y0}, {x0})", inner.shape()),
            ));
        }
        let mut out = Tensor::zeros(self.height, self.width, self.channels);
        let c = self.channels;
        for y in 0..inner.height {
            let dst = out.index(y0 + y, x0, 0);
            let src = inner.index(y, 0, 0);
            out.data[dst..dst + inner.width * c]
                .copy_from_slice(&inner.data[src..src + inner.width * c]);
        }
        Ok(out)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.check_same("add_assign", other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale_in_place(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub(crate) fn check_same(&self, op: &'static str, other: &Tensor) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                op,
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ));
        }
        Ok(())
    }
}

/// Kernel and bias block of one convolutional or fully-connected layer.
///
/// Kernels are stored out-channel-major: `(out, in, kh, kw)`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    out_channels: usize,
    in_channels: usize,
    kernel_h: usize,
    kernel_w: usize,
    pub kernels: Vec<f64>,
    pub biases: Vec<f64>,
}

impl LayerParams {
    pub fn zeros(out_channels: usize, in_channels: usize, kernel_h: usize, kernel_w: usize) -> Self {
        LayerParams {
            out_channels,
            in_channels,
            kernel_h,
            kernel_w,
            kernels: vec![0.0; out_channels * in_channels * kernel_h * kernel_w],
            biases: vec![0.0; out_channels],
        }
    }

    pub fn new(
        out_channels: usize,
        in_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        kernels: Vec<f64>,
        biases: Vec<f64>,
    ) -> Result<Self> {
        if kernels.len() != out_channels * in_channels * kernel_h * kernel_w
            || biases.len() != out_channels
        {
            return Err(Error::shape(
                "LayerParams::new",
                format!("({out_channels}, {in_channels}, {kernel_h}, {kernel_w}) + {out_channels} biases"),
                format!("{} kernel values, {} biases", kernels.len(), biases.len()),
            ));
        }
        Ok(LayerParams {
            out_channels,
            in_channels,
            kernel_h,
            kernel_w,
            kernels,
            biases,
        })
    }

    /// Gaussian kernels with zero biases.
    pub fn random_normal<R: Rng + ?Sized>(
        out_channels: usize,
        in_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let mut p = Self::zeros(out_channels, in_channels, kernel_h, kernel_w);
        p.kernels.iter_mut().for_each(|k| *k = normal.sample(rng));
        p
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn kernel_size(&self) -> (usize, usize) {
        (self.kernel_h, self.kernel_w)
    }

    /// `(out, in, kh, kw)`
    pub fn dims(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel_h, self.kernel_w]
    }

    #[inline]
    pub fn kernel_index(&self, o: usize, i: usize, ky: usize, kx: usize) -> usize {
        ((o * self.in_channels + i) * self.kernel_h + ky) * self.kernel_w + kx
    }

    pub fn num_params(&self) -> usize {
        self.kernels.len() + self.biases.len()
    }

    pub fn is_finite(&self) -> bool {
        self.kernels.iter().chain(&self.biases).all(|v| v.is_finite())
    }

    /// Flat view over kernels followed by biases.
    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.kernels.iter().chain(self.biases.iter())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.kernels.iter_mut().chain(self.biases.iter_mut())
    }
}

/// Gradient accumulators mirroring a [`LayerParams`] block.
#[derive(Clone, Debug, PartialEq)]
pub struct GradTape {
    pub kernels: Vec<f64>,
    pub biases: Vec<f64>,
    dims: [usize; 4],
}

impl GradTape {
    pub fn zeros_like(params: &LayerParams) -> Self {
        GradTape {
            kernels: vec![0.0; params.kernels.len()],
            biases: vec![0.0; params.biases.len()],
            dims: params.dims(),
        }
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn matches(&self, params: &LayerParams) -> bool {
        self.dims == params.dims()
    }

    pub fn accumulate(&mut self, other: &GradTape) {
        debug_assert_eq!(self.dims, other.dims);
        for (a, b) in self.kernels.iter_mut().zip(&other.kernels) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.kernels.iter_mut().chain(self.biases.iter_mut()).for_each(|v| *v *= s);
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.kernels.iter().chain(self.biases.iter())
    }

    pub fn is_zero(&self) -> bool {
        self.values().all(|&v| v == 0.0)
    }
}

/// `params − lr·grads`, elementwise.
pub fn sgd_step(params: &LayerParams, grads: &GradTape, lr: f64) -> Result<LayerParams> {
    if !grads.matches(params) {
        return Err(Error::shape(
            "sgd_step",
            format!("{:?}", params.dims()),
            format!("{:?}", grads.dims()),
        ));
    }
    let mut out = params.clone();
    for (p, g) in out.values_mut().zip(grads.values()) {
        *p -= lr * g;
    }
    Ok(out)
}

/// Ordered, named layer blocks of one network.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct NetworkParams {
    pub layers: Vec<(String, LayerParams)>,
}

impl NetworkParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, params: LayerParams) {
        self.layers.push((name.into(), params));
    }

    pub fn get(&self, name: &str) -> Option<&LayerParams> {
        self.layers.iter().find(|(n, _)| n == name).map(|(_, p)| p)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut LayerParams> {
        self.layers.iter_mut().find(|(n, _)| n == name).map(|(_, p)| p)
    }

    pub fn layer(&self, i: usize) -> &LayerParams {
        &self.layers[i].1
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|(_, p)| p.num_params()).sum()
    }

    pub fn zero_grads(&self) -> Vec<GradTape> {
        self.layers.iter().map(|(_, p)| GradTape::zeros_like(p)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|(_, p)| p.is_finite())
    }
}
