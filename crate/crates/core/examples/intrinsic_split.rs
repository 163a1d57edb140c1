//! Splits an image into albedo and shading from ground-truth gradient guidance and compares
//! the result with the true layers.

use jcnf::data::generate_scene;
use jcnf::image::{forward_gradient, luminance_weight};
use jcnf::metrics::intrinsic_metrics;
use jcnf::solver::solve_intrinsic;

fn main() -> jcnf::Result<()> {
    let scene = generate_scene(11, 48, 48)?;
    let lum = luminance_weight(&scene.image.to_linear()?, 0.001)?;
    let ga = forward_gradient(&scene.albedo)?;
    let gs = forward_gradient(&scene.shading)?;
    for lambda in [0.01, 0.1, 1.0] {
        let (a, s) = solve_intrinsic(&scene.image, &lum, &ga, &gs, None, lambda, lambda, 1e-10, None)?;
        let m = intrinsic_metrics(&a.to_linear()?, &s.to_linear()?, &scene.albedo.to_linear()?, &scene.shading.to_linear()?)?;
        let avg = m.average();
        println!("lambda {lambda:<5} mse {:.5}  lmse {:.5}  dssim {:.4}", avg.mse, avg.lmse, avg.dssim);
    }
    Ok(())
}
