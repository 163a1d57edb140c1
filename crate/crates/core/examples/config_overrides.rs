//! Loads the smoke configuration, applies command-line style overrides and prints the result.
//!
//! cargo run --example config_overrides -- levels=2 lr=0.005

use jcnf::config::RunConfig;

fn main() -> jcnf::Result<()> {
    let mut cfg = RunConfig::parse(include_str!("../configs/smoke.cfg"))?;
    for arg in std::env::args().skip(1) {
        cfg.set_override(&arg)?;
    }
    cfg.validate()?;
    print!("{}", cfg.to_text());
    Ok(())
}
