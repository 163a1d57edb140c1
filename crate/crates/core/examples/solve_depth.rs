//! Recovers a depth map from a flat prior and its true gradients with the screened Poisson
//! solver, and shows how the gradient weight trades the prior against the gradients.

use jcnf::data::generate_scene;
use jcnf::image::{forward_gradient, Domain, Image};
use jcnf::metrics::depth_metrics;
use jcnf::solver::solve_depth;

fn main() -> jcnf::Result<()> {
    let scene = generate_scene(3, 64, 64)?;
    let truth = &scene.depth;
    let prior = Image::filled(64, 64, 1, truth.mean(), Domain::Log);
    let grads = forward_gradient(truth)?;
    println!("{:>8} {:>8} {:>8}", "lambda", "rel", "rms");
    for lambda in [0.0, 1.0, 10.0, 100.0, 1000.0] {
        let d = solve_depth(&prior, None, &grads, lambda, 1e-10, None)?;
        let m = depth_metrics(&d.map(f64::exp), &scene.linear_depth())?;
        println!("{lambda:>8} {:>8.4} {:>8.4}", m.rel, m.rms);
    }
    Ok(())
}
