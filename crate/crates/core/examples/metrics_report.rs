//! Scores increasingly noisy predictions of a scene with the depth and intrinsic metrics.

use jcnf::data::generate_scene;
use jcnf::image::{Domain, Image};
use jcnf::metrics::{depth_metrics, intrinsic_metrics};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn perturb(img: &Image, noise: f64, rng: &mut ChaCha8Rng) -> Image {
    let (h, w, c) = img.shape();
    Image::from_fn(h, w, c, Domain::Linear, |y, x, ch| img.tensor().at(y, x, ch) * (1.0 + noise * rng.random_range(-1.0..1.0)))
}

fn main() -> jcnf::Result<()> {
    let scene = generate_scene(5, 64, 64)?;
    let (depth, albedo, shading) = (scene.linear_depth(), scene.albedo.to_linear()?, scene.shading.to_linear()?);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    println!("{:>6} {:>8} {:>8} {:>10} {:>10} {:>8}", "noise", "rel", "rms", "delta<1.25", "lmse", "dssim");
    for noise in [0.0, 0.05, 0.1, 0.2, 0.4] {
        let d = depth_metrics(&perturb(&depth, noise, &mut rng), &depth)?;
        let i = intrinsic_metrics(&perturb(&albedo, noise, &mut rng), &perturb(&shading, noise, &mut rng), &albedo, &shading)?;
        let avg = i.average();
        println!("{noise:>6} {:>8.4} {:>8.4} {:>10.4} {:>10.6} {:>8.4}", d.rel, d.rms, d.acc[0], avg.lmse, avg.dssim);
    }
    Ok(())
}
