use crate::data::{Patch, SceneRecord};
use crate::error::{Error, Result};
use crate::image::{bilinear_upsample, downsample_box, Image};
use crate::networks::{scale_guidance, GlobalDepthNet, GradientNets, Peers, ScaleNets, ScaleRole, PATCH_MARGIN, PATCH_OUTPUT};
use crate::tensor::{GradTape, Tensor};

/// Ground-truth log depth at the global net's output resolution.
pub fn global_depth_target(record: &SceneRecord, net: &GlobalDepthNet) -> Result<Image> {
    let side = net.input_side();
    downsample_box(&bilinear_upsample(&record.depth, side, side)?, 16)
}

/// Mean over the batch of `Σ_p (D_p − F(I)_p)²` on the coarse grid, with parameter gradients.
pub fn loss_global_depth(batch: &[SceneRecord], net: &GlobalDepthNet) -> Result<(f64, Vec<GradTape>)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("loss_global_depth needs a nonempty batch".into()));
    }
    let n = batch.len() as f64;
    let mut grads = net.params.zero_grads();
    let mut loss = 0.0;
    for record in batch {
        let input = net.prepare_input(&record.image)?;
        let (out, trace) = net.forward_traced(&input)?;
        let target = global_depth_target(record, net)?;
        let (h, w, c) = out.shape();
        let mut upstream = Vec::with_capacity(out.len());
        for (f, t) in out.data().iter().zip(target.data()) {
            loss += (t - f) * (t - f);
            upstream.push(-2.0 * (t - f) / n);
        }
        for (acc, g) in grads.iter_mut().zip(net.backward(&trace, Tensor::new(h, w, c, upstream)?)?) {
            acc.accumulate(&g);
        }
    }
    Ok((loss / n, grads))
}

/// Which side of the alternation is held fixed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Freeze {
    pub gradient_nets: bool,
    pub scale_nets: bool,
}

impl Freeze {
    /// Phase A: gradient nets train, scale nets fixed.
    pub const SCALE_NETS: Freeze = Freeze {
        gradient_nets: false,
        scale_nets: true,
    };
    /// Phase B: scale nets train, gradient nets fixed.
    pub const GRADIENT_NETS: Freeze = Freeze {
        gradient_nets: true,
        scale_nets: false,
    };
}

/// Batch-mean pairwise losses per map.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PairwiseLoss {
    pub depth: f64,
    pub albedo: f64,
    pub shading: f64,
}

impl PairwiseLoss {
    pub fn total(&self) -> f64 {
        self.depth + self.albedo + self.shading
    }
}

/// Parameter gradients of every net; frozen nets get all-zero tapes.
#[derive(Clone, Debug, PartialEq)]
pub struct PairwiseGrads {
    pub depth_net: Vec<GradTape>,
    pub intrinsic_net: Vec<GradTape>,
    /// Indexed like [`ScaleRole::ALL`].
    pub scale_nets: [Vec<GradTape>; 3],
}

fn crop_out(t: &Tensor) -> Result<Tensor> {
    t.crop(PATCH_MARGIN, PATCH_MARGIN, PATCH_OUTPUT, PATCH_OUTPUT)
}

fn embed_out(full: &Tensor, inner: &Tensor) -> Result<Tensor> {
    full.embed(inner, PATCH_MARGIN, PATCH_MARGIN)
}

/// Mean over the batch of `Σ_p ‖∇T_p − C_p∘F_p‖²` for depth, albedo and shading, on the 19×19
/// output window of each patch. Confidences read ground-truth gradients. Gradients flow only into
/// the nets that are not frozen.
pub fn loss_pairwise(
    batch: &[Patch],
    nets: &GradientNets,
    scales: &ScaleNets,
    peers: Peers,
    freeze: Freeze,
) -> Result<(PairwiseLoss, PairwiseGrads)> {
    if freeze.gradient_nets && freeze.scale_nets {
        return Err(Error::InvalidArgument("loss_pairwise: both network groups are frozen".into()));
    }
    if batch.is_empty() {
        return Err(Error::InvalidArgument("loss_pairwise needs a nonempty batch".into()));
    }
    let n = batch.len() as f64;
    let mut loss = PairwiseLoss::default();
    let mut grads = PairwiseGrads {
        depth_net: nets.depth.zero_grads(),
        intrinsic_net: nets.intrinsic.zero_grads(),
        scale_nets: ScaleRole::ALL.map(|r| scales.get(r).params.zero_grads()),
    };
    for patch in batch {
        let targets = patch.targets()?;
        let (out, trace) = nets.forward_traced(&patch.image, &patch.coarse_depth, peers)?;
        let g = &patch.gradients;
        let mut grad_f = Vec::with_capacity(3);
        for (k, role) in ScaleRole::ALL.into_iter().enumerate() {
            let (predicted, target) = match role {
                ScaleRole::Depth => (&out.depth, &targets.depth),
                ScaleRole::Albedo => (&out.albedo, &targets.albedo),
                ScaleRole::Shading => (&out.shading, &targets.shading),
            };
            let f = crop_out(predicted)?;
            let guidance = scale_guidance(role, &g.image, &g.depth, &g.albedo, &g.shading)?;
            let net = scales.get(role);
            let (c_full, scale_trace) = if freeze.scale_nets {
                (net.forward(&guidance)?, None)
            } else {
                let (c, t) = net.forward_traced(&guidance)?;
                (c, Some(t))
            };
            let c = crop_out(&c_full)?;
            let mut sum = 0.0;
            let mut d_f = Vec::with_capacity(f.len());
            let mut d_c = Vec::with_capacity(f.len());
            for ((t, cv), fv) in target.data().iter().zip(c.data()).zip(f.data()) {
                let r = t - cv * fv;
                sum += r * r;
                d_f.push(-2.0 * cv * r / n);
                d_c.push(-2.0 * fv * r / n);
            }
            match role {
                ScaleRole::Depth => loss.depth += sum / n,
                ScaleRole::Albedo => loss.albedo += sum / n,
                ScaleRole::Shading => loss.shading += sum / n,
            }
            let (h, w, ch) = f.shape();
            if let Some(st) = scale_trace {
                let upstream = embed_out(&c_full, &Tensor::new(h, w, ch, d_c)?)?;
                for (acc, gt) in grads.scale_nets[k].iter_mut().zip(net.backward(&st, &upstream)?) {
                    acc.accumulate(&gt);
                }
            }
            grad_f.push(embed_out(predicted, &Tensor::new(h, w, ch, d_f)?)?);
        }
        if !freeze.gradient_nets {
            let shading = grad_f.pop().unwrap();
            let albedo = grad_f.pop().unwrap();
            let depth = grad_f.pop().unwrap();
            for (acc, gt) in grads.depth_net.iter_mut().zip(nets.backward_depth(&trace, depth)?) {
                acc.accumulate(&gt);
            }
            for (acc, gt) in grads
                .intrinsic_net
                .iter_mut()
                .zip(nets.backward_intrinsic(&trace, albedo, shading)?)
            {
                acc.accumulate(&gt);
            }
        }
    }
    Ok((loss, grads))
}
