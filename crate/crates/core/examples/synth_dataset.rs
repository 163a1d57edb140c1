//! Generates a few synthetic scenes and writes them as a dataset directory.
//!
//! cargo run --example synth_dataset -- [out_dir]

use jcnf::data::{generate_dataset, read_dataset, write_dataset};

fn main() -> jcnf::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "example_data".into());
    let records = generate_dataset(42, 4, 64, 48)?;
    write_dataset(&out, &records)?;
    for r in read_dataset(&out)? {
        let (lo, hi) = r.linear_depth().min_max();
        let img = r.image.to_linear()?;
        println!("{}  {}x{}  depth {lo:.2}..{hi:.2}  mean intensity {:.3}", r.id, r.width(), r.height(), img.mean());
    }
    println!("wrote {out}");
    Ok(())
}
