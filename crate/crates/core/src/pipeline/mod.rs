//! Training by alternating minimization and coarse-to-fine joint inference.

mod checkpoint;
mod infer;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_FILES};
pub use infer::{global_only_depth, infer, upsample_intrinsic, Inference, InferenceLevel, MAX_BLEND_HALVINGS};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{augment, sample_patches_with, Patch, SceneRecord};
use crate::energy::{loss_global_depth, loss_pairwise, Freeze, PairwiseLoss};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::networks::{
    scale_guidance, Architecture, GlobalDepthNet, GradientNets, Init, Peers, ScaleNets, ScaleRole, PATCH_MARGIN, PATCH_OUTPUT,
};
use crate::tensor::{sgd_step, GradTape, NetworkParams};

/// Losses above this (or non-finite) abort training.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub arch: Architecture,
    pub init: Init,
    /// Base learning rate of every layer.
    pub lr: f64,
    /// Learning rate of the last layer of each gradient head.
    pub lr_final: f64,
    pub global_lr: f64,
    pub momentum: f64,
    pub global_steps: usize,
    /// Scenes per global-net step.
    pub global_batch: usize,
    /// SGD steps per alternation phase.
    pub phase_steps: usize,
    /// Patches per step.
    pub batch_size: usize,
    /// Fixed patches per scene used to measure the pairwise loss after each phase.
    pub eval_patches: usize,
    pub max_rounds: usize,
    /// Stop once a round improves the pairwise loss by less than this fraction.
    pub rel_tol: f64,
    pub augment: bool,
    /// Start the last layer of each gradient head at zero, so the initial prediction is a flat
    /// field regardless of `init`.
    pub zero_final: bool,
    /// Rescale the step gradient of each gradient or scale net to at most this norm; 0 disables
    /// clipping.
    pub clip_norm: f64,
    /// Gradient-norm cap of the global net; 0 disables clipping.
    pub global_clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            arch: Architecture::default(),
            init: Init::Gaussian { std: 0.001 },
            lr: 1e-4,
            lr_final: 1e-5,
            global_lr: 1e-4,
            momentum: 0.9,
            global_steps: 200,
            global_batch: 4,
            phase_steps: 200,
            batch_size: 8,
            eval_patches: 4,
            max_rounds: 5,
            rel_tol: 1e-3,
            augment: true,
            zero_final: false,
            clip_norm: 0.0,
            global_clip_norm: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if !(self.lr > 0.0 && self.lr_final > 0.0 && self.global_lr > 0.0) {
            return Err(Error::Config("learning rates must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.global_batch == 0 || self.batch_size == 0 || self.eval_patches == 0 {
            return Err(Error::Config("batch sizes must be >= 1".into()));
        }
        if self.max_rounds == 0 {
            return Err(Error::Config("max_rounds must be >= 1".into()));
        }
        Ok(())
    }
}

/// The seven parameter sets. The albedo and shading gradient nets live in one
/// [`GradientNets::intrinsic`] block because they share their first three layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub arch: Architecture,
    pub global: GlobalDepthNet,
    pub gradient: GradientNets,
    pub scales: ScaleNets,
}

impl Model {
    pub fn new(arch: &Architecture, init: Init, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Model {
            arch: arch.clone(),
            global: GlobalDepthNet::new(arch, init, &mut rng)?,
            gradient: GradientNets::new(arch, init, &mut rng)?,
            scales: ScaleNets::new(arch, init, &mut rng)?,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.global.params.is_finite()
            && self.gradient.depth.is_finite()
            && self.gradient.intrinsic.is_finite()
            && ScaleRole::ALL.iter().all(|&r| self.scales.get(r).params.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Global,
    /// Before any pairwise training.
    Initial,
    /// Gradient nets train, scale nets frozen.
    GradientNets,
    /// Scale nets train, gradient nets frozen.
    ScaleNets,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Global => "global",
            Phase::Initial => "initial",
            Phase::GradientNets => "gradient",
            Phase::ScaleNets => "scale",
        }
    }

    pub fn parse(s: &str) -> Option<Phase> {
        [Phase::Global, Phase::Initial, Phase::GradientNets, Phase::ScaleNets]
            .into_iter()
            .find(|p| p.as_str() == s)
    }
}

/// One row of the loss log. Global rows carry the global loss in `total` and zeros elsewhere.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRow {
    pub round: usize,
    pub phase: Phase,
    pub depth: f64,
    pub albedo: f64,
    pub shading: f64,
    pub total: f64,
}

impl LossRow {
    pub const HEADER: &'static str = "round,phase,depth,albedo,shading,total";

    fn pairwise(round: usize, phase: Phase, l: PairwiseLoss) -> Self {
        LossRow {
            round,
            phase,
            depth: l.depth,
            albedo: l.albedo,
            shading: l.shading,
            total: l.total(),
        }
    }

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{:?},{:?},{:?},{:?}",
            self.round,
            self.phase.as_str(),
            self.depth,
            self.albedo,
            self.shading,
            self.total
        )
    }

    pub fn parse(line: &str) -> Option<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 6 {
            return None;
        }
        Some(LossRow {
            round: f[0].parse().ok()?,
            phase: Phase::parse(f[1])?,
            depth: f[2].parse().ok()?,
            albedo: f[3].parse().ok()?,
            shading: f[4].parse().ok()?,
            total: f[5].parse().ok()?,
        })
    }
}

/// Parameters plus training progress.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub global_trained: bool,
    /// Completed alternation rounds.
    pub rounds_done: usize,
    pub converged: bool,
    pub seed: u64,
    pub loss_log: Vec<LossRow>,
}

impl TrainState {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut model = Model::new(&config.arch, config.init, config.seed)?;
        if config.zero_final {
            for (name, p) in model.gradient.depth.layers.iter_mut().chain(model.gradient.intrinsic.layers.iter_mut()) {
                if GradientNets::is_final_layer(name) {
                    p.values_mut().for_each(|v| *v = 0.0);
                }
            }
        }
        Ok(TrainState {
            model,
            global_trained: false,
            rounds_done: 0,
            converged: false,
            seed: config.seed,
            loss_log: Vec::new(),
        })
    }

    /// Pairwise loss measured before the first alternation phase.
    pub fn initial_pairwise_loss(&self) -> Option<f64> {
        self.loss_log.iter().find(|r| r.phase == Phase::Initial).map(|r| r.total)
    }

    /// Latest measured pairwise loss.
    pub fn last_pairwise_loss(&self) -> Option<f64> {
        self.loss_log.iter().rev().find(|r| r.phase != Phase::Global).map(|r| r.total)
    }

    pub fn loss_log_csv(&self) -> String {
        let mut out = String::from(LossRow::HEADER);
        out.push('\n');
        for row in &self.loss_log {
            out.push_str(&row.to_csv());
            out.push('\n');
        }
        out
    }
}

/// SGD with heavy-ball momentum over one network.
struct Momentum {
    velocity: Vec<GradTape>,
    mu: f64,
}

impl Momentum {
    fn new(params: &NetworkParams, mu: f64) -> Self {
        Momentum {
            velocity: params.zero_grads(),
            mu,
        }
    }

    fn step(&mut self, params: &mut NetworkParams, grads: &[GradTape], lr: impl Fn(&str) -> f64) -> Result<()> {
        for ((v, g), (name, p)) in self.velocity.iter_mut().zip(grads).zip(params.layers.iter_mut()) {
            v.scale(self.mu);
            v.accumulate(g);
            *p = sgd_step(p, v, lr(name))?;
        }
        Ok(())
    }
}

/// Rescales one network's gradient to at most `max_norm`.
fn clip(grads: &mut [GradTape], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = grads.iter().flat_map(|g| g.values()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm {
        grads.iter_mut().for_each(|g| g.scale(max_norm / norm));
    }
}

fn rng_for(seed: u64, round: usize, tag: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((round as u64) << 8 | tag);
    rng
}

fn check_loss(phase: &str, loss: f64) -> Result<()> {
    if !loss.is_finite() || loss > DIVERGENCE_LIMIT {
        return Err(Error::Diverged {
            phase: phase.into(),
            loss,
        });
    }
    Ok(())
}

fn check_dataset(dataset: &[SceneRecord]) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("training needs at least one scene".into()));
    }
    for r in dataset {
        r.validate().map_err(|e| e.context(format!("record {}", r.id)))?;
    }
    Ok(())
}

/// Scene with its coarse depth, as used for patch sampling.
struct Prepared {
    record: SceneRecord,
    coarse: Image,
}

fn prepare(global: &GlobalDepthNet, record: SceneRecord) -> Result<Prepared> {
    let coarse = global.predict(&record.image, record.height(), record.width())?;
    Ok(Prepared { record, coarse })
}

fn train_global(state: &mut TrainState, dataset: &[SceneRecord], config: &TrainConfig) -> Result<()> {
    let mut rng = rng_for(config.seed, 0, 1);
    let mut opt = Momentum::new(&state.model.global.params, config.momentum);
    let mut last = f64::NAN;
    for step in 0..config.global_steps {
        let mut batch = Vec::with_capacity(config.global_batch);
        for _ in 0..config.global_batch {
            let r = &dataset[rng.random_range(0..dataset.len())];
            batch.push(if config.augment { augment(r, rng.random())? } else { r.clone() });
        }
        let (loss, mut grads) = loss_global_depth(&batch, &state.model.global)?;
        clip(&mut grads, config.global_clip_norm);
        check_loss("global", loss).map_err(|e| e.context(format!("global step {step}")))?;
        opt.step(&mut state.model.global.params, &grads, |_| config.global_lr)?;
        last = loss;
    }
    if config.global_steps > 0 {
        let (loss, _) = loss_global_depth(dataset, &state.model.global)?;
        last = loss;
    }
    state.loss_log.push(LossRow {
        round: 0,
        phase: Phase::Global,
        depth: 0.0,
        albedo: 0.0,
        shading: 0.0,
        total: last,
    });
    state.global_trained = true;
    Ok(())
}

fn eval_patches(prepared: &[Prepared], config: &TrainConfig) -> Result<Vec<Patch>> {
    let mut out = Vec::new();
    for (k, p) in prepared.iter().enumerate() {
        let seed = config.seed ^ 0x5eed_0000 ^ k as u64;
        out.extend(sample_patches_with(&p.record, &p.coarse, config.eval_patches, seed)?);
    }
    Ok(out)
}

/// Forward-only pairwise loss, batch mean over `patches`.
pub fn pairwise_loss(model: &Model, patches: &[Patch], peers: Peers) -> Result<PairwiseLoss> {
    if patches.is_empty() {
        return Err(Error::InvalidArgument("pairwise_loss needs at least one patch".into()));
    }
    let mut total = PairwiseLoss::default();
    for patch in patches {
        let targets = patch.targets()?;
        let out = model.gradient.forward_patch(&patch.image, &patch.coarse_depth, peers)?;
        let g = &patch.gradients;
        for role in ScaleRole::ALL {
            let (f, t, slot) = match role {
                ScaleRole::Depth => (&out.depth, &targets.depth, &mut total.depth),
                ScaleRole::Albedo => (&out.albedo, &targets.albedo, &mut total.albedo),
                ScaleRole::Shading => (&out.shading, &targets.shading, &mut total.shading),
            };
            let guidance = scale_guidance(role, &g.image, &g.depth, &g.albedo, &g.shading)?;
            let c = model.scales.get(role).forward(&guidance)?.crop(PATCH_MARGIN, PATCH_MARGIN, PATCH_OUTPUT, PATCH_OUTPUT)?;
            *slot += f
                .data()
                .iter()
                .zip(c.data())
                .zip(t.data())
                .map(|((f, c), t)| (t - c * f).powi(2))
                .sum::<f64>();
        }
    }
    let n = patches.len() as f64;
    total.depth /= n;
    total.albedo /= n;
    total.shading /= n;
    Ok(total)
}

fn run_phase(
    state: &mut TrainState,
    dataset: &[SceneRecord],
    prepared: &[Prepared],
    config: &TrainConfig,
    phase: Phase,
) -> Result<()> {
    let round = state.rounds_done;
    let peers = if round == 0 { Peers::Zero } else { Peers::Live };
    let freeze = match phase {
        Phase::GradientNets => Freeze::SCALE_NETS,
        _ => Freeze::GRADIENT_NETS,
    };
    let tag = if phase == Phase::GradientNets { 2 } else { 3 };
    let mut rng = rng_for(config.seed, round, tag);
    let model = &mut state.model;
    let mut opt_depth = Momentum::new(&model.gradient.depth, config.momentum);
    let mut opt_intrinsic = Momentum::new(&model.gradient.intrinsic, config.momentum);
    let mut opt_scales = ScaleRole::ALL.map(|r| Momentum::new(&model.scales.get(r).params, config.momentum));
    let grad_lr = |name: &str| {
        if GradientNets::is_final_layer(name) {
            config.lr_final
        } else {
            config.lr
        }
    };
    let context = |step: usize| format!("round {round} {} phase, step {step}", phase.as_str());
    for step in 0..config.phase_steps {
        let k = rng.random_range(0..dataset.len());
        let patch_seed = rng.random();
        let batch = if config.augment {
            let p = prepare(&model.global, augment(&dataset[k], rng.random())?)?;
            sample_patches_with(&p.record, &p.coarse, config.batch_size, patch_seed)?
        } else {
            sample_patches_with(&prepared[k].record, &prepared[k].coarse, config.batch_size, patch_seed)?
        };
        let (loss, mut grads) = loss_pairwise(&batch, &model.gradient, &model.scales, peers, freeze)
            .map_err(|e| e.context(context(step)))?;
        clip(&mut grads.depth_net, config.clip_norm);
        clip(&mut grads.intrinsic_net, config.clip_norm);
        grads.scale_nets.iter_mut().for_each(|g| clip(g, config.clip_norm));
        check_loss(phase.as_str(), loss.total()).map_err(|e| e.context(context(step)))?;
        match phase {
            Phase::GradientNets => {
                opt_depth.step(&mut model.gradient.depth, &grads.depth_net, grad_lr)?;
                opt_intrinsic.step(&mut model.gradient.intrinsic, &grads.intrinsic_net, grad_lr)?;
            }
            _ => {
                for (k, role) in ScaleRole::ALL.into_iter().enumerate() {
                    let params = &mut model.scales.get_mut(role).params;
                    opt_scales[k].step(params, &grads.scale_nets[k], |_| config.lr)?;
                }
            }
        }
    }
    if !model.is_finite() {
        return Err(Error::Diverged {
            phase: phase.as_str().into(),
            loss: f64::NAN,
        });
    }
    Ok(())
}

/// Runs (or resumes) the whole training procedure. `on_progress` is called after the global
/// net is trained and after every completed round, e.g. to write a checkpoint.
pub fn train_with(
    mut state: TrainState,
    dataset: &[SceneRecord],
    config: &TrainConfig,
    mut on_progress: impl FnMut(&TrainState) -> Result<()>,
) -> Result<TrainState> {
    config.validate()?;
    check_dataset(dataset)?;
    if !state.global_trained {
        train_global(&mut state, dataset, config)?;
        on_progress(&state)?;
    }
    let prepared: Vec<Prepared> = dataset
        .iter()
        .map(|r| prepare(&state.model.global, r.clone()))
        .collect::<Result<_>>()?;
    let eval = eval_patches(&prepared, config)?;
    if state.initial_pairwise_loss().is_none() {
        let l = pairwise_loss(&state.model, &eval, Peers::Zero)?;
        state.loss_log.push(LossRow::pairwise(0, Phase::Initial, l));
    }
    while !state.converged && state.rounds_done < config.max_rounds {
        let round = state.rounds_done;
        let before = state.last_pairwise_loss().unwrap_or(f64::INFINITY);
        let peers = if round == 0 { Peers::Zero } else { Peers::Live };
        for phase in [Phase::GradientNets, Phase::ScaleNets] {
            if phase == Phase::ScaleNets {
                state.model.scales.release_bypass();
            }
            run_phase(&mut state, dataset, &prepared, config, phase)?;
            let l = pairwise_loss(&state.model, &eval, peers)?;
            check_loss(phase.as_str(), l.total())?;
            state.loss_log.push(LossRow::pairwise(round, phase, l));
        }
        state.rounds_done += 1;
        let after = state.last_pairwise_loss().unwrap_or(f64::INFINITY);
        // round 0 switches peers on afterwards, so it never counts as converged
        if round > 0 && (before - after) < config.rel_tol * before {
            state.converged = true;
        }
        on_progress(&state)?;
    }
    Ok(state)
}

/// Runs a single gradient-net or scale-net phase of round `state.rounds_done`.
pub fn train_phase(state: &mut TrainState, dataset: &[SceneRecord], config: &TrainConfig, phase: Phase) -> Result<()> {
    if !matches!(phase, Phase::GradientNets | Phase::ScaleNets) {
        return Err(Error::InvalidArgument(format!("{} is not an alternation phase", phase.as_str())));
    }
    config.validate()?;
    check_dataset(dataset)?;
    let prepared: Vec<Prepared> = dataset
        .iter()
        .map(|r| prepare(&state.model.global, r.clone()))
        .collect::<Result<_>>()?;
    run_phase(state, dataset, &prepared, config, phase)
}

/// Trains from scratch.
pub fn train(dataset: &[SceneRecord], config: &TrainConfig) -> Result<TrainState> {
    train_with(TrainState::new(config)?, dataset, config, |_| Ok(()))
}
