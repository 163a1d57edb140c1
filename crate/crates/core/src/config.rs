//! Run configuration: a flat `key = value` text file with `#` comments.
//!
//! Every key is optional; missing keys keep their defaults. Unknown keys and malformed values
//! are configuration errors.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::energy::EnergyConfig;
use crate::error::{Error, Result};
use crate::networks::Init;
use crate::pipeline::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub checkpoint: PathBuf,
    pub width: usize,
    pub height: usize,
    /// Number of synthesized scenes.
    pub num_scenes: usize,
    /// Standard deviation used when `init = gaussian`.
    pub init_std: f64,
    pub energy: EnergyConfig,
    /// `train.seed` doubles as the synthesis seed.
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let init_std = match train.init {
            Init::Gaussian { std } => std,
            Init::He => 0.001,
        };
        RunConfig {
            dataset: PathBuf::from("data"),
            checkpoint: PathBuf::from("checkpoint"),
            width: 64,
            height: 64,
            num_scenes: 20,
            init_std,
            energy: EnergyConfig::default(),
            train,
        }
    }
}

fn bad(key: &str, value: &str) -> Error {
    Error::Config(format!("invalid value {value:?} for key {key:?}"))
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| bad(key, value))
}

fn list<const N: usize>(key: &str, value: &str) -> Result<[usize; N]> {
    let v: Vec<usize> = value
        .split(',')
        .map(|x| x.trim().parse().map_err(|_| bad(key, value)))
        .collect::<Result<_>>()?;
    v.try_into().map_err(|_| bad(key, value))
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn seed(&self) -> u64 {
        self.train.seed
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let e = &mut self.energy;
        let t = &mut self.train;
        let a = &mut t.arch;
        match key.trim() {
            "dataset" => self.dataset = PathBuf::from(v),
            "checkpoint" => self.checkpoint = PathBuf::from(v),
            "width" => self.width = num(key, v)?,
            "height" => self.height = num(key, v)?,
            "num_scenes" => self.num_scenes = num(key, v)?,
            "seed" => t.seed = num(key, v)?,
            "lambda_depth" => e.lambda_depth = num(key, v)?,
            "lambda_albedo" => e.lambda_albedo = num(key, v)?,
            "lambda_shading" => e.lambda_shading = num(key, v)?,
            "epsilon" => e.epsilon = num(key, v)?,
            "levels" => e.levels = num(key, v)?,
            "inner_iters" => e.inner_iters = num(key, v)?,
            "solver_tol" => e.solver_tol = num(key, v)?,
            "solver_max_iters" => {
                e.solver_max_iters = if v == "auto" { None } else { Some(num(key, v)?) }
            }
            "global_input" => a.global_input = num(key, v)?,
            "global_widths" => a.global_widths = list(key, v)?,
            "global_fc" => a.global_fc = num(key, v)?,
            "grad_widths" => a.grad_widths = list(key, v)?,
            "grad_kernel" => a.grad_kernel = num(key, v)?,
            "scale_widths" => a.scale_widths = list(key, v)?,
            "init" => {
                t.init = match v {
                    "gaussian" => Init::Gaussian { std: self.init_std },
                    "he" => Init::He,
                    _ => return Err(bad(key, v)),
                }
            }
            "init_std" => {
                self.init_std = num(key, v)?;
                if let Init::Gaussian { std } = &mut t.init {
                    *std = self.init_std;
                }
            }
            "lr" => t.lr = num(key, v)?,
            "lr_final" => t.lr_final = num(key, v)?,
            "global_lr" => t.global_lr = num(key, v)?,
            "momentum" => t.momentum = num(key, v)?,
            "global_steps" => t.global_steps = num(key, v)?,
            "global_batch" => t.global_batch = num(key, v)?,
            "phase_steps" => t.phase_steps = num(key, v)?,
            "batch_size" => t.batch_size = num(key, v)?,
            "eval_patches" => t.eval_patches = num(key, v)?,
            "max_rounds" => t.max_rounds = num(key, v)?,
            "rel_tol" => t.rel_tol = num(key, v)?,
            "augment" => t.augment = num(key, v)?,
            "zero_final" => t.zero_final = num(key, v)?,
            "clip_norm" => t.clip_norm = num(key, v)?,
            "global_clip_norm" => t.global_clip_norm = num(key, v)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Applies a `key=value` override as given on the command line.
    pub fn set_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        self.set(k, v)
    }

    /// Parses a config file body on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
            cfg.set(k, v).map_err(|e| e.context(format!("line {}", n + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| e.context(path.display().to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// Every key, in a form [`RunConfig::parse`] reads back exactly.
    pub fn to_text(&self) -> String {
        let e = &self.energy;
        let t = &self.train;
        let a = &t.arch;
        let mut s = String::from("# jcnf run config\n");
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("dataset", self.dataset.display().to_string());
        kv("checkpoint", self.checkpoint.display().to_string());
        kv("width", self.width.to_string());
        kv("height", self.height.to_string());
        kv("num_scenes", self.num_scenes.to_string());
        kv("seed", t.seed.to_string());
        kv("lambda_depth", format!("{:?}", e.lambda_depth));
        kv("lambda_albedo", format!("{:?}", e.lambda_albedo));
        kv("lambda_shading", format!("{:?}", e.lambda_shading));
        kv("epsilon", format!("{:?}", e.epsilon));
        kv("levels", e.levels.to_string());
        kv("inner_iters", e.inner_iters.to_string());
        kv("solver_tol", format!("{:?}", e.solver_tol));
        kv(
            "solver_max_iters",
            e.solver_max_iters.map_or("auto".into(), |n| n.to_string()),
        );
        kv("global_input", a.global_input.to_string());
        kv("global_widths", join(&a.global_widths));
        kv("global_fc", a.global_fc.to_string());
        kv("grad_widths", join(&a.grad_widths));
        kv("grad_kernel", a.grad_kernel.to_string());
        kv("scale_widths", join(&a.scale_widths));
        kv("init_std", format!("{:?}", self.init_std));
        kv(
            "init",
            match t.init {
                Init::Gaussian { .. } => "gaussian".into(),
                Init::He => "he".into(),
            },
        );
        kv("lr", format!("{:?}", t.lr));
        kv("lr_final", format!("{:?}", t.lr_final));
        kv("global_lr", format!("{:?}", t.global_lr));
        kv("momentum", format!("{:?}", t.momentum));
        kv("global_steps", t.global_steps.to_string());
        kv("global_batch", t.global_batch.to_string());
        kv("phase_steps", t.phase_steps.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("eval_patches", t.eval_patches.to_string());
        kv("max_rounds", t.max_rounds.to_string());
        kv("rel_tol", format!("{:?}", t.rel_tol));
        kv("augment", t.augment.to_string());
        kv("zero_final", t.zero_final.to_string());
        kv("clip_norm", format!("{:?}", t.clip_norm));
        kv("global_clip_norm", format!("{:?}", t.global_clip_norm));
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.energy.validate()?;
        self.train.validate()?;
        if self.width < 8 || self.height < 8 {
            return Err(Error::Config(format!(
                "scene size must be at least 8x8, got {}x{}",
                self.width, self.height
            )));
        }
        if self.num_scenes == 0 {
            return Err(Error::Config("num_scenes must be >= 1".into()));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return Err(Error::Config(format!("init_std must be > 0, got {}", self.init_std)));
        }
        Ok(())
    }
}
