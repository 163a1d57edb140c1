use super::Model;
use crate::energy::{joint_energy, EnergyBreakdown, EnergyConfig, GuidedGradients, LevelTargets};
use crate::error::{Error, Result};
use crate::image::{bilinear_upsample, build_pyramid, forward_gradient, luminance_weight, Domain, GradientField, Image};
use crate::networks::{scale_guidance, Peers, ScaleRole};
use crate::solver::{solve_depth, solve_intrinsic};

/// Halvings of the confidence blend step tried before an inner iteration keeps the previous
/// estimates.
pub const MAX_BLEND_HALVINGS: usize = 6;

/// Estimates of one pyramid level after its inner loop.
#[derive(Clone, Debug)]
pub struct InferenceLevel {
    pub depth: Image,
    pub albedo: Image,
    pub shading: Image,
    /// Joint energy after each inner iteration, evaluated with that iteration's targets.
    pub energy_trace: Vec<EnergyBreakdown>,
    /// Accepted blend step per inner iteration after the first (1 = fresh confidences,
    /// 0 = previous estimates kept).
    pub blend_steps: Vec<f64>,
}

/// Per-level results, coarsest first. All maps are log-domain.
#[derive(Clone, Debug)]
pub struct Inference {
    pub levels: Vec<InferenceLevel>,
}

impl Inference {
    fn finest(&self) -> &InferenceLevel {
        self.levels.last().expect("at least one level")
    }

    pub fn depth(&self) -> &Image {
        &self.finest().depth
    }

    pub fn albedo(&self) -> &Image {
        &self.finest().albedo
    }

    pub fn shading(&self) -> &Image {
        &self.finest().shading
    }

    pub fn linear_depth(&self) -> Image {
        self.depth().map(f64::exp).with_domain(Domain::Linear)
    }
}

fn log_image(image: &Image) -> Result<Image> {
    if image.channels() != 3 {
        return Err(Error::shape("infer", "3-channel image", format!("{}", image.channels())));
    }
    match image.domain() {
        Domain::Log => Ok(image.clone()),
        Domain::Linear => image.to_log(),
    }
}

/// Bilinear upsampling of the previous level's albedo and shading to the size of `image`; the
/// image detail their sum misses is split equally between the two, so `A + S = I` holds again.
pub fn upsample_intrinsic(image: &Image, albedo: &Image, shading: &Image) -> Result<(Image, Image)> {
    let (h, w) = (image.height(), image.width());
    let mut a = bilinear_upsample(albedo, h, w)?;
    let mut s = bilinear_upsample(shading, h, w)?;
    for ((i, a), s) in image.data().iter().zip(a.tensor_mut().data_mut()).zip(s.tensor_mut().data_mut()) {
        let half = 0.5 * (i - *a - *s);
        *a += half;
        *s += half;
    }
    Ok((a, s))
}

/// Depth of the global net alone, bilinearly upsampled to the image size.
pub fn global_only_depth(image: &Image, model: &Model) -> Result<Image> {
    let image = log_image(image)?;
    model.global.predict(&image, image.height(), image.width())
}

struct Confidences {
    depth: GradientField,
    albedo: GradientField,
    shading: GradientField,
}

impl Confidences {
    fn blend(&self, other: &Confidences, t: f64) -> Result<Confidences> {
        let mix = |a: &GradientField, b: &GradientField| -> Result<GradientField> {
            let lerp = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(x, y)| x + t * (y - x)).collect() };
            let (h, w, c) = a.shape();
            GradientField::new(
                crate::tensor::Tensor::new(h, w, c, lerp(a.gx.data(), b.gx.data()))?,
                crate::tensor::Tensor::new(h, w, c, lerp(a.gy.data(), b.gy.data()))?,
            )
        };
        Ok(Confidences {
            depth: mix(&self.depth, &other.depth)?,
            albedo: mix(&self.albedo, &other.albedo)?,
            shading: mix(&self.shading, &other.shading)?,
        })
    }
}

/// Everything fixed within one level.
struct Level<'a> {
    config: &'a EnergyConfig,
    model: &'a Model,
    targets: LevelTargets,
    image_grad: GradientField,
    predicted: GuidedGradients,
}

struct Estimate {
    depth: Image,
    albedo: Image,
    shading: Image,
    energy: EnergyBreakdown,
}

impl Level<'_> {
    fn confidences(&self, depth: &GradientField, albedo: &GradientField, shading: &GradientField) -> Result<Confidences> {
        let run = |role: ScaleRole| -> Result<GradientField> {
            let guidance = scale_guidance(role, &self.image_grad, depth, albedo, shading)?;
            GradientField::from_channels(&self.model.scales.get(role).forward(&guidance)?)
        };
        Ok(Confidences {
            depth: run(ScaleRole::Depth)?,
            albedo: run(ScaleRole::Albedo)?,
            shading: run(ScaleRole::Shading)?,
        })
    }

    fn confidences_at(&self, depth: &Image, albedo: &Image, shading: &Image) -> Result<Confidences> {
        self.confidences(&forward_gradient(depth)?, &forward_gradient(albedo)?, &forward_gradient(shading)?)
    }

    fn solve(&self, c: &Confidences) -> Result<Estimate> {
        let cfg = self.config;
        let guided = GuidedGradients {
            depth: self.predicted.depth.hadamard(&c.depth)?,
            albedo: self.predicted.albedo.hadamard(&c.albedo)?,
            shading: self.predicted.shading.hadamard(&c.shading)?,
        };
        let t = &self.targets;
        let (h, w) = (t.image.height(), t.image.width());
        let prev = t.prev.as_ref();
        let depth = solve_depth(
            &t.depth_star,
            prev.map(|p| &p.0),
            &guided.depth,
            cfg.lambda_depth,
            cfg.solver_tol,
            Some(cfg.max_iters_for(h * w)),
        )?;
        let (albedo, shading) = solve_intrinsic(
            &t.image,
            &t.luminance,
            &guided.albedo,
            &guided.shading,
            prev.map(|p| (&p.1, &p.2)),
            cfg.lambda_albedo,
            cfg.lambda_shading,
            cfg.solver_tol,
            Some(cfg.max_iters_for(2 * h * w)),
        )?;
        let energy = joint_energy(cfg, t, &guided, &depth, &albedo, &shading)?;
        Ok(Estimate {
            depth,
            albedo,
            shading,
            energy,
        })
    }
}

/// Coarse-to-fine joint inference of log depth, albedo and shading.
///
/// At each level the nets run once on the level image. The first inner iteration takes its
/// confidences from the upsampled previous-level estimates, or from the predicted gradients at
/// the coarsest level. Later iterations recompute confidences from the current estimates; the
/// update is blended with the previous confidences, halving the step until the traced energy
/// does not increase.
pub fn infer(image: &Image, model: &Model, config: &EnergyConfig) -> Result<Inference> {
    config.validate()?;
    let image = log_image(image)?;
    let pyramid = build_pyramid(&image, config.levels)?;
    let global = model.global.forward(&image)?;
    let mut levels: Vec<InferenceLevel> = Vec::with_capacity(config.levels);
    for (l, level_image) in pyramid.into_iter().enumerate() {
        let ctx = |k: usize| format!("level {} of {}, inner iteration {k}", l + 1, config.levels);
        let (h, w) = (level_image.height(), level_image.width());
        let depth_star = bilinear_upsample(&global, h, w)?;
        let luminance = luminance_weight(&level_image.to_linear()?, config.epsilon)?;
        let out = model.gradient.forward_image(&level_image, &depth_star, Peers::Live)?;
        let predicted = GuidedGradients {
            depth: GradientField::from_channels(&out.depth)?,
            albedo: GradientField::from_channels(&out.albedo)?,
            shading: GradientField::from_channels(&out.shading)?,
        };
        let prev = match levels.last() {
            Some(p) => {
                let (a, s) = upsample_intrinsic(&level_image, &p.albedo, &p.shading)?;
                Some((bilinear_upsample(&p.depth, h, w)?, a, s))
            }
            None => None,
        };
        let level = Level {
            config,
            model,
            image_grad: forward_gradient(&level_image)?,
            targets: LevelTargets {
                image: level_image,
                luminance,
                depth_star,
                prev,
            },
            predicted,
        };

        let mut conf = match &level.targets.prev {
            Some((d, a, s)) => level.confidences_at(d, a, s)?,
            None => level.confidences(&level.predicted.depth, &level.predicted.albedo, &level.predicted.shading)?,
        };
        let mut est = level.solve(&conf).map_err(|e| e.context(ctx(0)))?;
        let mut trace = vec![est.energy];
        let mut steps = Vec::new();
        for k in 1..config.inner_iters {
            let fresh = level.confidences_at(&est.depth, &est.albedo, &est.shading)?;
            let mut t = 1.0;
            let mut accepted = None;
            for _ in 0..=MAX_BLEND_HALVINGS {
                let candidate = conf.blend(&fresh, t)?;
                let next = level.solve(&candidate).map_err(|e| e.context(ctx(k)))?;
                if next.energy.total <= est.energy.total {
                    accepted = Some((candidate, next));
                    break;
                }
                t *= 0.5;
            }
            match accepted {
                Some((c, next)) => {
                    conf = c;
                    est = next;
                    steps.push(t);
                }
                None => steps.push(0.0),
            }
            trace.push(est.energy);
        }
        levels.push(InferenceLevel {
            depth: est.depth,
            albedo: est.albedo,
            shading: est.shading,
            energy_trace: trace,
            blend_steps: steps,
        });
    }
    Ok(Inference { levels })
}
