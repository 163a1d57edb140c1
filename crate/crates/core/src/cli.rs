//! `jcnf` command line: `synth`, `train`, `infer` and `eval`.
//!
//! Exit codes: 0 on success, 1 for I/O and format errors, 2 for configuration or usage errors,
//! 3 for numeric failures (divergence, non-convergence, singular systems).

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::data::{generate_dataset, read_dataset, read_png, read_raster_file, read_record, write_dataset, write_png, write_raster_file};
use crate::error::{Error, Result};
use crate::image::{Domain, Image};
use crate::metrics::{score_record, MetricReport};
use crate::pipeline::{infer, load_checkpoint, save_checkpoint, train_with, Inference, TrainState};

/// Name of the config snapshot written next to a checkpoint.
pub const CONFIG_SNAPSHOT: &str = "config.cfg";

#[derive(Debug, Parser)]
#[command(name = "jcnf", version, about = "Joint depth and intrinsic image prediction")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Run config file (`key = value` lines).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory of the command.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Config override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Synth,
    /// Train all networks on a dataset and write a checkpoint.
    Train {
        /// Continue from the checkpoint in the output directory if one exists.
        #[arg(long)]
        resume: bool,
    },
    /// Predict depth, albedo and shading.
    Infer {
        /// PNG, `.raw` log image, or record directory.
        #[arg(long, conflicts_with = "dataset", required_unless_present = "dataset")]
        image: Option<PathBuf>,
        /// Dataset directory; one output directory per record.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Score predictions against a ground-truth dataset.
    Eval {
        /// Directory with one `<id>/{D,A,S}.raw` prediction per record.
        #[arg(long)]
        pred: PathBuf,
        /// Ground-truth dataset directory.
        #[arg(long)]
        gt: PathBuf,
    },
}

/// Exit status for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err.root() {
        Error::Config(_) | Error::InvalidArgument(_) => 2,
        e if e.is_numeric() => 3,
        _ => 1,
    }
}

/// Parses `args` (including the program name), runs the command and returns the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn load_config(args: &GlobalArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for o in &args.overrides {
        cfg.set_override(o)?;
    }
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn execute(cli: &Cli) -> Result<()> {
    let cfg = load_config(&cli.global)?;
    let out = cli.global.out.as_deref();
    match &cli.command {
        Command::Synth => cmd_synth(&cfg, out.unwrap_or(&cfg.dataset)),
        Command::Train { resume } => cmd_train(&cfg, out.unwrap_or(&cfg.checkpoint), *resume).map(drop),
        Command::Infer { image, dataset } => {
            let out = out.unwrap_or(Path::new("inference"));
            match (image, dataset) {
                (Some(image), _) => cmd_infer(&cfg, &read_input(image)?, out).map(drop),
                (None, Some(dataset)) => cmd_infer_dataset(&cfg, dataset, out),
                (None, None) => Err(Error::Config("infer needs --image or --dataset".into())),
            }
        }
        Command::Eval { pred, gt } => {
            let report = cmd_eval(pred, gt)?;
            let dest = out.unwrap_or(pred).join("metrics.csv");
            fs::create_dir_all(dest.parent().unwrap_or(Path::new("."))).map_err(|e| Error::io(&dest, e))?;
            fs::write(&dest, report.to_csv()).map_err(|e| Error::io(&dest, e))?;
            print!("{}", report.to_table());
            println!("wrote {}", dest.display());
            Ok(())
        }
    }
}

pub fn cmd_synth(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let records = generate_dataset(cfg.seed(), cfg.num_scenes, cfg.width, cfg.height)?;
    write_dataset(dir, &records)?;
    println!("wrote {} scenes to {}", records.len(), dir.display());
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig, dir: &Path, resume: bool) -> Result<TrainState> {
    let dataset = read_dataset(&cfg.dataset)?;
    let state = if resume && dir.join("state.txt").exists() {
        let s = load_checkpoint(dir)?;
        if s.model.arch != cfg.train.arch {
            return Err(Error::Config(format!(
                "checkpoint {} was trained with a different architecture",
                dir.display()
            )));
        }
        println!("resuming after {} rounds", s.rounds_done);
        s
    } else {
        TrainState::new(&cfg.train)?
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    cfg.save(dir.join(CONFIG_SNAPSHOT))?;
    let mut printed = state.loss_log.len();
    let state = train_with(state, &dataset, &cfg.train, |s| {
        for row in &s.loss_log[printed..] {
            println!("{}", row.to_csv());
        }
        printed = s.loss_log.len();
        save_checkpoint(dir, s)
    })?;
    save_checkpoint(dir, &state)?;
    println!(
        "checkpoint {} (rounds {}, converged {})",
        dir.display(),
        state.rounds_done,
        state.converged
    );
    Ok(state)
}

/// Loads an input image: a PNG (linear), a `.raw` log raster or a record directory.
pub fn read_input(path: &Path) -> Result<Image> {
    if path.is_dir() {
        let id = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        return Ok(read_record(path, &id, 0)?.image);
    }
    match path.extension().and_then(|e| e.to_str()) {
        Some("png") => read_png(path),
        Some("raw") => Ok(Image::new(read_raster_file(path)?, Domain::Log)),
        _ => Err(Error::Config(format!(
            "unsupported input {}: expected .png, .raw or a record directory",
            path.display()
        ))),
    }
}

fn preview(map: &Image) -> (crate::tensor::Tensor, f64, f64) {
    let (lo, hi) = map.min_max();
    let span = if hi > lo { hi - lo } else { 1.0 };
    (map.tensor().map(|v| (v - lo) / span), lo, hi)
}

/// Writes `D.raw`, `A.raw`, `S.raw` (log domain), PNG previews and `previews.txt`.
pub fn write_inference(dir: &Path, result: &Inference) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_raster_file(dir.join("D.raw"), result.depth().tensor())?;
    write_raster_file(dir.join("A.raw"), result.albedo().tensor())?;
    write_raster_file(dir.join("S.raw"), result.shading().tensor())?;
    let mut notes = String::from(
        "# previews are min-max normalized per map: v = (x - min) / (max - min)\n\
         # D.png shows linear depth, A.png and S.png linear albedo and shading\n\
         # file min max\n",
    );
    let maps = [
        ("D.png", result.linear_depth()),
        ("A.png", result.albedo().to_linear()?),
        ("S.png", result.shading().to_linear()?),
    ];
    for (name, map) in maps {
        let (t, lo, hi) = preview(&map);
        write_png(dir.join(name), &t)?;
        notes.push_str(&format!("{name} {lo:?} {hi:?}\n"));
    }
    let p = dir.join("previews.txt");
    fs::write(&p, notes).map_err(|e| Error::io(&p, e))
}

fn print_trace(result: &Inference) {
    for (l, level) in result.levels.iter().enumerate() {
        let totals: Vec<String> = level.energy_trace.iter().map(|e| format!("{:.6e}", e.total)).collect();
        println!(
            "level {} ({}x{}): energy {}",
            l + 1,
            level.depth.height(),
            level.depth.width(),
            totals.join(" -> ")
        );
    }
}

pub fn cmd_infer(cfg: &RunConfig, image: &Image, out: &Path) -> Result<Inference> {
    let state = load_checkpoint(&cfg.checkpoint)?;
    let result = infer(image, &state.model, &cfg.energy)?;
    print_trace(&result);
    write_inference(out, &result)?;
    println!("wrote {}", out.display());
    Ok(result)
}

pub fn cmd_infer_dataset(cfg: &RunConfig, dataset: &Path, out: &Path) -> Result<()> {
    let state = load_checkpoint(&cfg.checkpoint)?;
    for record in read_dataset(dataset)? {
        let result = infer(&record.image, &state.model, &cfg.energy).map_err(|e| e.context(format!("record {}", record.id)))?;
        println!("{}", record.id);
        print_trace(&result);
        write_inference(&out.join(&record.id), &result)?;
    }
    println!("wrote {}", out.display());
    Ok(())
}

pub fn cmd_eval(pred: &Path, gt: &Path) -> Result<MetricReport> {
    let mut report = MetricReport::default();
    for record in read_dataset(gt)? {
        let dir = pred.join(&record.id);
        let load = |name: &str| -> Result<Image> { Ok(Image::new(read_raster_file(dir.join(name))?, Domain::Log)) };
        let (d, i) = score_record(&load("D.raw")?, &load("A.raw")?, &load("S.raw")?, &record)
            .map_err(|e| e.context(format!("record {}", record.id)))?;
        report.push(record.id.clone(), d, i);
    }
    if report.ids.is_empty() {
        return Err(Error::InvalidArgument(format!("no records in {}", gt.display())));
    }
    Ok(report)
}
