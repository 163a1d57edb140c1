//! Multi-channel images, forward-difference gradients and the resampling helpers shared by
//! the networks, the energy terms and the solvers.
//!
//! Gradients use forward differences with a Neumann (replicate) boundary: `gx` is zero in the
//! last column and `gy` is zero in the last row. [`divergence_adjoint`] is the exact
//! transpose of [`forward_gradient`], so `∇ᵀ∇` assembled from the two is the symmetric
//! graph Laplacian used by the screened-Poisson solves.

use std::ops::Deref;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Offset added before taking logs of linear color values.
pub const LOG_OFFSET: f64 = 1e-4;

/// Luminance weights (Rec. 601).
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// Luminance offset ε of the image-formation weight.
pub const LUMINANCE_EPS: f64 = 0.001;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    Linear,
    Log,
}

/// H×W×C image with a linear/log domain tag.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    tensor: Tensor,
    domain: Domain,
}

impl Deref for Image {
    type Target = Tensor;

    fn deref(&self) -> &Tensor {
        &self.tensor
    }
}

impl Image {
    pub fn new(tensor: Tensor, domain: Domain) -> Self {
        Image { tensor, domain }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>, domain: Domain) -> Result<Self> {
        Ok(Image::new(Tensor::new(height, width, channels, data)?, domain))
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64, domain: Domain) -> Self {
        Image::new(Tensor::filled(height, width, channels, value), domain)
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        domain: Domain,
        f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        Image::new(Tensor::from_fn(height, width, channels, f), domain)
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn tensor_mut(&mut self) -> &mut Tensor {
        &mut self.tensor
    }

    pub fn into_tensor(self) -> Tensor {
        self.tensor
    }

    pub fn with_domain(mut self, domain: Domain) -> Self {
        self.domain = domain;
        self
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image::new(self.tensor.map(f), self.domain)
    }

    /// `log(v + LOG_OFFSET)` of a linear color image.
    pub fn to_log(&self) -> Result<Image> {
        self.expect_domain("to_log", Domain::Linear)?;
        Ok(Image::new(self.tensor.map(|v| (v + LOG_OFFSET).ln()), Domain::Log))
    }

    /// Inverse of [`Image::to_log`].
    pub fn to_linear(&self) -> Result<Image> {
        self.expect_domain("to_linear", Domain::Log)?;
        Ok(Image::new(self.tensor.map(|v| v.exp() - LOG_OFFSET), Domain::Linear))
    }

    pub fn expect_domain(&self, op: &'static str, expected: Domain) -> Result<()> {
        if self.domain != expected {
            return Err(Error::Domain { op, expected });
        }
        Ok(())
    }

    /// Elementwise `self + other`, same shape and domain.
    pub fn add(&self, other: &Image) -> Result<Image> {
        self.zip_with("add", other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Image) -> Result<Image> {
        self.zip_with("sub", other, |a, b| a - b)
    }

    pub fn zip_with(&self, op: &'static str, other: &Image, f: impl Fn(f64, f64) -> f64) -> Result<Image> {
        self.tensor.check_same(op, &other.tensor)?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Image::from_vec(self.height(), self.width(), self.channels(), data, self.domain)
    }

    pub fn channel(&self, c: usize) -> Result<Image> {
        Ok(Image::new(self.tensor.slice_channels(c, 1)?, self.domain))
    }

    pub fn crop(&self, y0: usize, x0: usize, height: usize, width: usize) -> Result<Image> {
        Ok(Image::new(self.tensor.crop(y0, x0, height, width)?, self.domain))
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.shape() == other.shape()
    }

    /// Value at a real-valued position (pixel centers at integer coordinates), bilinear with
    /// clamped borders.
    pub fn sample_bilinear(&self, y: f64, x: f64, c: usize) -> f64 {
        let (h, w, _) = self.shape();
        let y = y.clamp(0.0, (h - 1) as f64);
        let x = x.clamp(0.0, (w - 1) as f64);
        let y0 = y.floor() as usize;
        let x0 = x.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let x1 = (x0 + 1).min(w - 1);
        let (fy, fx) = (y - y0 as f64, x - x0 as f64);
        let top = self.at(y0, x0, c) * (1.0 - fx) + self.at(y0, x1, c) * fx;
        let bottom = self.at(y1, x0, c) * (1.0 - fx) + self.at(y1, x1, c) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    /// Replicate-pads by the given margins.
    pub fn pad_replicate(&self, top: usize, bottom: usize, left: usize, right: usize) -> Image {
        let (h, w, c) = self.shape();
        Image::from_fn(h + top + bottom, w + left + right, c, self.domain, |y, x, ch| {
            let sy = (y as isize - top as isize).clamp(0, h as isize - 1) as usize;
            let sx = (x as isize - left as isize).clamp(0, w as isize - 1) as usize;
            self.at(sy, sx, ch)
        })
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data()
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn mean(&self) -> f64 {
        self.data().iter().sum::<f64>() / self.len() as f64
    }
}

/// Forward-difference gradients of a multi-channel image.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientField {
    pub gx: Tensor,
    pub gy: Tensor,
}

impl GradientField {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        GradientField {
            gx: Tensor::zeros(height, width, channels),
            gy: Tensor::zeros(height, width, channels),
        }
    }

    pub fn new(gx: Tensor, gy: Tensor) -> Result<Self> {
        gx.check_same("GradientField::new", &gy)?;
        Ok(GradientField { gx, gy })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.gx.shape()
    }

    pub fn channels(&self) -> usize {
        self.gx.channels()
    }

    /// Stacks x then y components into one `2C`-channel tensor: `(c0 x, c1 x, …, c0 y, c1 y, …)`.
    pub fn to_channels(&self) -> Tensor {
        crate::tensor::concat_channels(&self.gx, &self.gy).expect("gx and gy share a shape")
    }

    /// Inverse of [`GradientField::to_channels`].
    pub fn from_channels(t: &Tensor) -> Result<Self> {
        if !t.channels().is_multiple_of(2) {
            return Err(Error::shape(
                "GradientField::from_channels",
                "an even channel count",
                format!("{}", t.channels()),
            ));
        }
        let c = t.channels() / 2;
        Ok(GradientField {
            gx: t.slice_channels(0, c)?,
            gy: t.slice_channels(c, c)?,
        })
    }

    pub fn crop(&self, y0: usize, x0: usize, height: usize, width: usize) -> Result<Self> {
        Ok(GradientField {
            gx: self.gx.crop(y0, x0, height, width)?,
            gy: self.gy.crop(y0, x0, height, width)?,
        })
    }

    pub fn channel(&self, c: usize) -> Result<Self> {
        Ok(GradientField {
            gx: self.gx.slice_channels(c, 1)?,
            gy: self.gy.slice_channels(c, 1)?,
        })
    }

    /// Elementwise (Hadamard) product with a confidence field of the same layout.
    pub fn hadamard(&self, confidence: &GradientField) -> Result<Self> {
        self.gx.check_same("hadamard", &confidence.gx)?;
        let mul = |a: &Tensor, b: &Tensor| {
            let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
            Tensor::new(a.height(), a.width(), a.channels(), data)
        };
        Ok(GradientField {
            gx: mul(&self.gx, &confidence.gx)?,
            gy: mul(&self.gy, &confidence.gy)?,
        })
    }

    pub fn scale(&self, s: f64) -> Self {
        GradientField {
            gx: self.gx.map(|v| v * s),
            gy: self.gy.map(|v| v * s),
        }
    }

    pub fn sum_squares(&self) -> f64 {
        self.gx.data().iter().chain(self.gy.data()).map(|v| v * v).sum()
    }
}

fn check_gradient_dims(img: &Tensor) -> Result<()> {
    let (h, w, c) = img.shape();
    if h == 0 || w == 0 || c == 0 || h * w < 2 {
        return Err(Error::shape(
            "forward_gradient",
            "at least two pixels",
            format!("{h}x{w}x{c}"),
        ));
    }
    Ok(())
}

/// Forward differences along x and y; zero across the far boundary.
pub fn forward_gradient(img: &Tensor) -> Result<GradientField> {
    check_gradient_dims(img)?;
    let (h, w, c) = img.shape();
    let mut gx = Tensor::zeros(h, w, c);
    let mut gy = Tensor::zeros(h, w, c);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let v = img.at(y, x, ch);
                if x + 1 < w {
                    *gx.at_mut(y, x, ch) = img.at(y, x + 1, ch) - v;
                }
                if y + 1 < h {
                    *gy.at_mut(y, x, ch) = img.at(y + 1, x, ch) - v;
                }
            }
        }
    }
    Ok(GradientField { gx, gy })
}

/// `∇ᵀ` applied to a gradient field (the negative divergence).
pub fn divergence_adjoint(field: &GradientField) -> Tensor {
    let (h, w, c) = field.shape();
    let mut out = Tensor::zeros(h, w, c);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut v = 0.0;
                if x + 1 < w {
                    v -= field.gx.at(y, x, ch);
                }
                if x > 0 {
                    v += field.gx.at(y, x - 1, ch);
                }
                if y + 1 < h {
                    v -= field.gy.at(y, x, ch);
                }
                if y > 0 {
                    v += field.gy.at(y - 1, x, ch);
                }
                *out.at_mut(y, x, ch) = v;
            }
        }
    }
    out
}

/// Per-channel `gx² + gy²`.
pub fn squared_magnitude_channels(field: &GradientField) -> Tensor {
    let (h, w, c) = field.shape();
    let data = field
        .gx
        .data()
        .iter()
        .zip(field.gy.data())
        .map(|(x, y)| x * x + y * y)
        .collect();
    Tensor::new(h, w, c, data).expect("shape preserved")
}

/// `lum(I) + eps` of a linear-domain color image, as a single-channel image.
pub fn luminance_weight(img: &Image, eps: f64) -> Result<Image> {
    img.expect_domain("luminance_weight", Domain::Linear)?;
    let (h, w, c) = img.shape();
    let data = match c {
        3 => img
            .data()
            .chunks_exact(3)
            .map(|px| LUMA_WEIGHTS[0] * px[0] + LUMA_WEIGHTS[1] * px[1] + LUMA_WEIGHTS[2] * px[2] + eps)
            .collect(),
        1 => img.data().iter().map(|v| v + eps).collect(),
        _ => {
            return Err(Error::shape("luminance_weight", "1 or 3 channels", format!("{c}")));
        }
    };
    Image::from_vec(h, w, 1, data, Domain::Linear)
}

/// Averages non-overlapping `factor`×`factor` blocks; trailing rows/columns that do not fill a
/// block are dropped.
pub fn downsample_box(img: &Image, factor: usize) -> Result<Image> {
    let (h, w, c) = img.shape();
    if factor == 0 || h < factor || w < factor {
        return Err(Error::shape(
            "downsample_box",
            format!("at least {factor}x{factor}"),
            format!("{h}x{w}"),
        ));
    }
    let (oh, ow) = (h / factor, w / factor);
    let norm = 1.0 / (factor * factor) as f64;
    Ok(Image::from_fn(oh, ow, c, img.domain(), |y, x, ch| {
        let mut s = 0.0;
        for dy in 0..factor {
            for dx in 0..factor {
                s += img.at(y * factor + dy, x * factor + dx, ch);
            }
        }
        s * norm
    }))
}

/// Minimum side length of the coarsest pyramid level.
pub const MIN_PYRAMID_SIDE: usize = 8;

/// Coarse-to-fine pyramid: element 0 is the coarsest level, the last element is `img` itself.
/// Each level halves the previous one with a 2×2 box filter.
pub fn build_pyramid(img: &Image, levels: usize) -> Result<Vec<Image>> {
    if levels == 0 {
        return Err(Error::InvalidArgument("pyramid needs at least one level".into()));
    }
    let shrink = 1usize << (levels - 1);
    if img.height() / shrink < MIN_PYRAMID_SIDE || img.width() / shrink < MIN_PYRAMID_SIDE {
        return Err(Error::shape(
            "build_pyramid",
            format!("coarsest level at least {MIN_PYRAMID_SIDE}x{MIN_PYRAMID_SIDE}"),
            format!("{}x{} / {shrink}", img.height(), img.width()),
        ));
    }
    let mut out = vec![img.clone()];
    for _ in 1..levels {
        let next = downsample_box(out.last().unwrap(), 2)?;
        out.push(next);
    }
    out.reverse();
    Ok(out)
}

/// Bilinear resampling with pixel centers at half-integers (align-corners = false) and clamped
/// borders. Works for both up- and down-scaling.
pub fn bilinear_upsample(img: &Image, height: usize, width: usize) -> Result<Image> {
    if height == 0 || width == 0 || img.is_empty() {
        return Err(Error::shape("bilinear_upsample", "non-empty shapes", format!("{height}x{width}")));
    }
    let (h, w, c) = img.shape();
    if (h, w) == (height, width) {
        return Ok(img.clone());
    }
    let sy = h as f64 / height as f64;
    let sx = w as f64 / width as f64;
    Ok(Image::from_fn(height, width, c, img.domain(), |y, x, ch| {
        let src_y = (y as f64 + 0.5) * sy - 0.5;
        let src_x = (x as f64 + 0.5) * sx - 0.5;
        img.sample_bilinear(src_y, src_x, ch)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn inner(a: &Tensor, b: &Tensor) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn constant_image_has_zero_gradient() {
        let t = Tensor::filled(4, 5, 3, 2.5);
        let g = forward_gradient(&t).unwrap();
        assert_eq!(g.sum_squares(), 0.0);
        assert!(divergence_adjoint(&g).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_by_two_gradient() {
        let t = Tensor::new(1, 2, 1, vec![0.0, 3.0]).unwrap();
        let g = forward_gradient(&t).unwrap();
        assert_eq!(g.gx.data(), &[3.0, 0.0]);
        assert_eq!(g.gy.data(), &[0.0, 0.0]);
    }

    #[test]
    fn ramp_gradient_is_one_inside() {
        let t = Tensor::from_fn(4, 6, 1, |_, x, _| x as f64);
        let g = forward_gradient(&t).unwrap();
        for y in 0..4 {
            for x in 0..5 {
                assert_eq!(g.gx.at(y, x, 0), 1.0);
            }
            assert_eq!(g.gx.at(y, 5, 0), 0.0);
        }
    }

    #[test]
    fn single_pixel_rejected() {
        assert!(forward_gradient(&Tensor::zeros(1, 1, 1)).is_err());
    }

    #[test]
    fn adjoint_of_one_by_two() {
        let a = 1.75;
        let field = GradientField::new(
            Tensor::new(1, 2, 1, vec![a, 0.0]).unwrap(),
            Tensor::zeros(1, 2, 1),
        )
        .unwrap();
        assert_eq!(divergence_adjoint(&field).data(), &[-a, a]);
        assert!(divergence_adjoint(&GradientField::zeros(3, 3, 2)).data().iter().all(|&v| v == 0.0));
    }

    proptest! {
        #[test]
        fn adjoint_identity(h in 2usize..9, w in 2usize..9, c in 1usize..4, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let u = Tensor::random_normal(h, w, c, 1.0, &mut rng);
            let v = GradientField::new(
                Tensor::random_normal(h, w, c, 1.0, &mut rng),
                Tensor::random_normal(h, w, c, 1.0, &mut rng),
            ).unwrap();
            let gu = forward_gradient(&u).unwrap();
            let lhs = inner(&gu.gx, &v.gx) + inner(&gu.gy, &v.gy);
            let rhs = inner(&u, &divergence_adjoint(&v));
            prop_assert!((lhs - rhs).abs() < 1e-12 * (1.0 + lhs.abs()));
        }
    }

    #[test]
    fn squared_magnitude() {
        let field = GradientField::new(Tensor::filled(1, 1, 3, 3.0), Tensor::filled(1, 1, 3, 4.0)).unwrap();
        let m = squared_magnitude_channels(&field);
        assert_eq!(m.shape(), (1, 1, 3));
        assert!(m.data().iter().all(|&v| v == 25.0));
        assert!(squared_magnitude_channels(&GradientField::zeros(2, 2, 1)).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn luminance_values() {
        let px = |v: f64| Image::filled(1, 1, 3, v, Domain::Linear);
        assert!((luminance_weight(&px(0.0), LUMINANCE_EPS).unwrap().at(0, 0, 0) - 0.001).abs() < 1e-15);
        assert!((luminance_weight(&px(1.0), LUMINANCE_EPS).unwrap().at(0, 0, 0) - 1.001).abs() < 1e-12);
        assert!((luminance_weight(&px(0.5), LUMINANCE_EPS).unwrap().at(0, 0, 0) - 0.501).abs() < 1e-12);
        let log = px(0.5).to_log().unwrap();
        assert!(matches!(luminance_weight(&log, LUMINANCE_EPS), Err(Error::Domain { .. })));
    }

    #[test]
    fn pyramid_geometry() {
        let img = Image::filled(64, 64, 3, 0.25, Domain::Log);
        let single = build_pyramid(&img, 1).unwrap();
        assert_eq!(single, vec![img.clone()]);
        let p = build_pyramid(&img, 3).unwrap();
        let sides: Vec<_> = p.iter().map(|l| l.height()).collect();
        assert_eq!(sides, vec![16, 32, 64]);
        assert!(p.iter().all(|l| l.data().iter().all(|&v| v == 0.25)));
        assert!(build_pyramid(&Image::filled(16, 16, 1, 0.0, Domain::Log), 3).is_err());
    }

    #[test]
    fn upsample_one_by_two() {
        let img = Image::from_vec(1, 2, 1, vec![0.0, 1.0], Domain::Linear).unwrap();
        let up = bilinear_upsample(&img, 1, 4).unwrap();
        // centers of the 4 targets map to source x = -0.25, 0.25, 0.75, 1.25
        let oracle = |x: f64| x.clamp(0.0, 1.0);
        let want: Vec<f64> = (0..4).map(|i| oracle((i as f64 + 0.5) * 0.5 - 0.5)).collect();
        assert_eq!(up.data(), &want[..]);
        assert_eq!(up.data(), &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn upsample_constant() {
        let img = Image::filled(3, 5, 2, -0.7, Domain::Log);
        let up = bilinear_upsample(&img, 7, 11).unwrap();
        assert!(up.data().iter().all(|&v| (v + 0.7).abs() < 1e-15));
    }

    #[test]
    fn down_of_up_ramp_is_identity_inside() {
        let img = Image::from_fn(8, 8, 1, Domain::Log, |y, x, _| 0.3 * x as f64 - 0.2 * y as f64);
        let up = bilinear_upsample(&img, 16, 16).unwrap();
        let back = downsample_box(&up, 2).unwrap();
        for y in 1..7 {
            for x in 1..7 {
                assert!((back.at(y, x, 0) - img.at(y, x, 0)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn pyramid_levels_agree_for_smooth_input() {
        let img = Image::from_fn(64, 64, 1, Domain::Log, |y, x, _| {
            (x as f64 * 0.05).sin() + (y as f64 * 0.04).cos()
        });
        let p = build_pyramid(&img, 3).unwrap();
        for l in 1..p.len() {
            let up = bilinear_upsample(&p[l - 1], p[l].height(), p[l].width()).unwrap();
            let (h, w, _) = p[l].shape();
            let mut err: f64 = 0.0;
            for y in 1..h - 1 {
                for x in 1..w - 1 {
                    err = err.max((up.at(y, x, 0) - p[l].at(y, x, 0)).abs());
                }
            }
            assert!(err < 0.01, "level {l}: {err}");
        }
    }
}
