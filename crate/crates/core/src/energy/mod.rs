//! Terms of the joint CRF energy and the training losses of the networks.
//!
//! The energy of a depth map `D`, albedo `A` and shading `S` given an image `I` is
//!
//! ```text
//! E = Σ (D − D*)² + Σ (L·(I − A − S))² + λ_D Σ ‖∇D − C_D∘G_D‖² + λ_A Σ ‖∇A − C_A∘G_A‖² + λ_S Σ ‖∇S − C_S∘G_S‖²
//! ```
//!
//! with `D*` the upsampled global-net depth, `G` the predicted gradients, `C` their confidences
//! and `L` the luminance weight. Coarse-to-fine inference adds anchor terms `Σ (X − X_prev)²` to
//! the unary part.

mod loss;

pub use loss::{
    global_depth_target, loss_global_depth, loss_pairwise, Freeze, PairwiseGrads, PairwiseLoss,
};

use crate::error::{Error, Result};
use crate::image::{forward_gradient, Domain, GradientField, Image, LUMINANCE_EPS};

/// Weights and iteration settings of the joint energy and its minimization.
#[derive(Clone, Debug, PartialEq)]
pub struct EnergyConfig {
    pub lambda_depth: f64,
    pub lambda_albedo: f64,
    pub lambda_shading: f64,
    /// Offset added to luminance in the image-formation weight.
    pub epsilon: f64,
    /// Number of pyramid levels.
    pub levels: usize,
    pub inner_iters: usize,
    pub solver_tol: f64,
    /// Conjugate-gradient iteration cap; `None` means 10·H·W.
    pub solver_max_iters: Option<usize>,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        EnergyConfig {
            lambda_depth: 1.0,
            lambda_albedo: 0.1,
            lambda_shading: 0.1,
            epsilon: LUMINANCE_EPS,
            levels: 3,
            inner_iters: 3,
            solver_tol: 1e-8,
            solver_max_iters: None,
        }
    }
}

impl EnergyConfig {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [self.lambda_depth, self.lambda_albedo, self.lambda_shading];
        if lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::Config(format!("lambda weights must be finite and >= 0, got {lambdas:?}")));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if self.levels == 0 || self.inner_iters == 0 {
            return Err(Error::Config("levels and inner_iters must be >= 1".into()));
        }
        if !(self.solver_tol > 0.0 && self.solver_tol < 1.0) {
            return Err(Error::Config(format!("solver_tol must lie in (0, 1), got {}", self.solver_tol)));
        }
        if self.solver_max_iters == Some(0) {
            return Err(Error::Config("solver_max_iters must be >= 1".into()));
        }
        Ok(())
    }

    pub fn max_iters_for(&self, unknowns: usize) -> usize {
        self.solver_max_iters.unwrap_or(10 * unknowns.max(1))
    }
}

/// Individual energy terms. `unary_*` include coarse-to-fine anchors when present.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnergyBreakdown {
    pub unary_depth: f64,
    pub unary_intrinsic: f64,
    pub pairwise_depth: f64,
    pub pairwise_albedo: f64,
    pub pairwise_shading: f64,
    pub total: f64,
}

impl EnergyBreakdown {
    pub fn new(
        unary_depth: f64,
        unary_intrinsic: f64,
        pairwise_depth: f64,
        pairwise_albedo: f64,
        pairwise_shading: f64,
        config: &EnergyConfig,
    ) -> Self {
        EnergyBreakdown {
            unary_depth,
            unary_intrinsic,
            pairwise_depth,
            pairwise_albedo,
            pairwise_shading,
            total: unary_depth
                + unary_intrinsic
                + config.lambda_depth * pairwise_depth
                + config.lambda_albedo * pairwise_albedo
                + config.lambda_shading * pairwise_shading,
        }
    }

    /// The depth half `unary_depth + λ_D·pairwise_depth`.
    pub fn depth_part(&self, config: &EnergyConfig) -> f64 {
        self.unary_depth + config.lambda_depth * self.pairwise_depth
    }

    /// The intrinsic half.
    pub fn intrinsic_part(&self, config: &EnergyConfig) -> f64 {
        self.unary_intrinsic + config.lambda_albedo * self.pairwise_albedo + config.lambda_shading * self.pairwise_shading
    }
}

fn sum_sq_diff(op: &'static str, a: &Image, b: &Image) -> Result<f64> {
    a.check_same(op, b)?;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// `Σ (D − D_pred)²`.
pub fn unary_depth(depth: &Image, predicted: &Image) -> Result<f64> {
    sum_sq_diff("unary_depth", depth, predicted)
}

/// `Σ (X − X_prev)²`, the coarse-to-fine anchor.
pub fn anchor_term(x: &Image, prev: &Image) -> Result<f64> {
    sum_sq_diff("anchor_term", x, prev)
}

/// `Σ (L·(I − A − S))²` summed over color channels. `L` is single-channel and broadcast.
pub fn unary_intrinsic(image: &Image, albedo: &Image, shading: &Image, luminance: &Image) -> Result<f64> {
    for img in [image, albedo, shading] {
        img.expect_domain("unary_intrinsic", Domain::Log)?;
    }
    image.check_same("unary_intrinsic", albedo)?;
    image.check_same("unary_intrinsic", shading)?;
    let (h, w, c) = image.shape();
    if luminance.shape() != (h, w, 1) {
        return Err(Error::shape(
            "unary_intrinsic",
            format!("luminance {h}x{w}x1"),
            format!("{:?}", luminance.shape()),
        ));
    }
    let mut sum = 0.0;
    for (p, l) in luminance.data().iter().enumerate() {
        for ch in 0..c {
            let k = p * c + ch;
            let r = l * (image.data()[k] - albedo.data()[k] - shading.data()[k]);
            sum += r * r;
        }
    }
    Ok(sum)
}

/// `Σ ‖∇T − C∘G‖²`.
pub fn pairwise_term(target: &GradientField, confidence: &GradientField, predicted: &GradientField) -> Result<f64> {
    guided_residual(target, &predicted.hadamard(confidence)?)
}

/// `Σ ‖∇T − g‖²` for an already composed guidance field `g = C∘G`.
pub fn guided_residual(target: &GradientField, guided: &GradientField) -> Result<f64> {
    if target.shape() != guided.shape() {
        return Err(Error::shape(
            "pairwise_term",
            format!("{:?}", target.shape()),
            format!("{:?}", guided.shape()),
        ));
    }
    let diff = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum() };
    Ok(diff(target.gx.data(), guided.gx.data()) + diff(target.gy.data(), guided.gy.data()))
}

/// Everything the energy of one pyramid level depends on besides the estimates.
#[derive(Clone, Debug)]
pub struct LevelTargets {
    /// Log-domain color image.
    pub image: Image,
    /// `lum(I_linear) + ε`.
    pub luminance: Image,
    /// Upsampled global-net log depth `D*`.
    pub depth_star: Image,
    /// Previous-level estimates upsampled to this level, if any.
    pub prev: Option<(Image, Image, Image)>,
}

/// Guided gradients `C∘G` for the three maps.
#[derive(Clone, Debug)]
pub struct GuidedGradients {
    pub depth: GradientField,
    pub albedo: GradientField,
    pub shading: GradientField,
}

/// Evaluates every term at the estimates `(D, A, S)`.
pub fn joint_energy(
    config: &EnergyConfig,
    targets: &LevelTargets,
    guided: &GuidedGradients,
    depth: &Image,
    albedo: &Image,
    shading: &Image,
) -> Result<EnergyBreakdown> {
    let mut ud = unary_depth(depth, &targets.depth_star)?;
    let mut ui = unary_intrinsic(&targets.image, albedo, shading, &targets.luminance)?;
    if let Some((dp, ap, sp)) = &targets.prev {
        ud += anchor_term(depth, dp)?;
        ui += anchor_term(albedo, ap)? + anchor_term(shading, sp)?;
    }
    let pd = guided_residual(&forward_gradient(depth)?, &guided.depth)?;
    let pa = guided_residual(&forward_gradient(albedo)?, &guided.albedo)?;
    let ps = guided_residual(&forward_gradient(shading)?, &guided.shading)?;
    Ok(EnergyBreakdown::new(ud, ui, pd, pa, ps, config))
}
