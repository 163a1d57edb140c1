//! Coarse-to-fine inference on a synthetic scene with a checkpoint written by `train_smoke`
//! (or by `jcnf train`), compared against the global depth net alone.
//!
//! cargo run --release --example infer_scene -- [checkpoint_dir]

use jcnf::config::RunConfig;
use jcnf::data::generate_dataset;
use jcnf::metrics::{depth_metrics, score_record};
use jcnf::pipeline::{global_only_depth, infer, load_checkpoint};

fn main() -> jcnf::Result<()> {
    let dir = std::env::args().nth(1).unwrap_or_else(|| "example_checkpoint".into());
    let cfg = RunConfig::parse(include_str!("../configs/smoke.cfg"))?;
    let state = load_checkpoint(&dir)?;
    let scene = generate_dataset(cfg.seed(), 1, cfg.width, cfg.height)?.remove(0);
    let out = infer(&scene.image, &state.model, &cfg.energy)?;
    for (k, level) in out.levels.iter().enumerate() {
        let trace: Vec<String> = level.energy_trace.iter().map(|e| format!("{:.4e}", e.total)).collect();
        println!("level {k} {}x{}: {}", level.depth.width(), level.depth.height(), trace.join(" -> "));
    }
    let (d, i) = score_record(out.depth(), out.albedo(), out.shading(), &scene)?;
    let global = depth_metrics(&global_only_depth(&scene.image, &state.model)?.map(f64::exp), &scene.linear_depth())?;
    println!("depth rel {:.4} rms {:.4} (global net alone: rel {:.4} rms {:.4})", d.rel, d.rms, global.rel, global.rms);
    println!("albedo lmse {:.5}, shading lmse {:.5}", i.albedo.lmse, i.shading.lmse);
    Ok(())
}
