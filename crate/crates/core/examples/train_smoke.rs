//! Trains the smoke configuration on one scene, prints the loss log and saves a checkpoint.
//! Takes a minute or two in release mode.
//!
//! cargo run --release --example train_smoke -- [checkpoint_dir]

use jcnf::config::RunConfig;
use jcnf::data::generate_dataset;
use jcnf::pipeline::{save_checkpoint, train_with, TrainState};

fn main() -> jcnf::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "example_checkpoint".into());
    let cfg = RunConfig::parse(include_str!("../configs/smoke.cfg"))?;
    let data = generate_dataset(cfg.seed(), cfg.num_scenes, cfg.width, cfg.height)?;
    let state = train_with(TrainState::new(&cfg.train)?, &data, &cfg.train, |s| {
        if let Some(row) = s.loss_log.last() {
            println!("{}", row.to_csv());
        }
        Ok(())
    })?;
    let ratio = state.last_pairwise_loss().unwrap() / state.initial_pairwise_loss().unwrap();
    println!("pairwise loss at {:.1}% of its initial value", 100.0 * ratio);
    save_checkpoint(&out, &state)?;
    println!("saved {out}");
    Ok(())
}
