use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::SceneRecord;
use crate::error::{Error, Result};
use crate::image::{Domain, Image, LOG_OFFSET};

/// Linear depth range every synthetic scene is normalized to.
pub const DEPTH_RANGE: (f64, f64) = (1.0, 10.0);

/// Smallest side accepted by [`generate_scene`].
pub const MIN_SCENE_SIDE: usize = 32;

const AMBIENT: f64 = 0.2;
const LIGHT_MEAN: [f64; 3] = [-0.35, -0.45, 1.0];
const LIGHT_CONE_DEG: f64 = 15.0;

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn light_direction(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let m = normalize(LIGHT_MEAN);
    let u = normalize(cross(m, [0.0, 1.0, 0.0]));
    let v = cross(m, u);
    let theta = rng.random_range(0.0..LIGHT_CONE_DEG).to_radians();
    let phi = rng.random_range(0.0..std::f64::consts::TAU);
    let (s, c) = theta.sin_cos();
    normalize([
        c * m[0] + s * (phi.cos() * u[0] + phi.sin() * v[0]),
        c * m[1] + s * (phi.cos() * u[1] + phi.sin() * v[1]),
        c * m[2] + s * (phi.cos() * u[2] + phi.sin() * v[2]),
    ])
}

/// Surface height in pixel units: a slanted plane plus spherical caps.
fn surface(rng: &mut ChaCha8Rng, height: usize, width: usize) -> Vec<f64> {
    let side = height.min(width) as f64;
    let (py, px) = (rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3));
    let mut z: Vec<f64> = (0..height * width)
        .map(|i| {
            let (y, x) = ((i / width) as f64, (i % width) as f64);
            py * (y - height as f64 / 2.0) + px * (x - width as f64 / 2.0)
        })
        .collect();
    let bumps = rng.random_range(4..=8);
    for _ in 0..bumps {
        let cy = rng.random_range(0.0..height as f64);
        let cx = rng.random_range(0.0..width as f64);
        let r = rng.random_range(0.08..0.25) * side;
        let cap = rng.random_range(30.0f64..60.0).to_radians();
        let big_r = r / cap.sin();
        let base = (big_r * big_r - r * r).sqrt();
        // most bumps protrude toward the camera
        let sign = if rng.random_bool(0.75) { -1.0 } else { 1.0 };
        for (i, zi) in z.iter_mut().enumerate() {
            let (dy, dx) = ((i / width) as f64 - cy, (i % width) as f64 - cx);
            let d2 = dy * dy + dx * dx;
            if d2 < r * r {
                *zi += sign * ((big_r * big_r - d2).sqrt() - base);
            }
        }
    }
    z
}

fn lambertian(z: &[f64], height: usize, width: usize, light: [f64; 3]) -> Vec<f64> {
    let at = |y: usize, x: usize| z[y * width + x];
    (0..height * width)
        .map(|i| {
            let (y, x) = (i / width, i % width);
            let (x0, x1) = (x.saturating_sub(1), (x + 1).min(width - 1));
            let (y0, y1) = (y.saturating_sub(1), (y + 1).min(height - 1));
            let p = (at(y, x1) - at(y, x0)) / (x1 - x0) as f64;
            let q = (at(y1, x) - at(y0, x)) / (y1 - y0) as f64;
            let n = normalize([p, q, 1.0]);
            let dot = n[0] * light[0] + n[1] * light[1] + n[2] * light[2];
            AMBIENT + (1.0 - AMBIENT) * dot.max(0.0)
        })
        .collect()
}

fn albedo_mosaic(rng: &mut ChaCha8Rng, height: usize, width: usize) -> Vec<[f64; 3]> {
    let mut color = || -> [f64; 3] { std::array::from_fn(|_| rng.random_range(0.15..0.95)) };
    let mut out = vec![color(); height * width];
    let rects = rng.random_range(5..=10);
    for _ in 0..rects {
        let rh = (rng.random_range(0.15..0.5) * height as f64) as usize + 1;
        let rw = (rng.random_range(0.15..0.5) * width as f64) as usize + 1;
        let y0 = rng.random_range(0..height);
        let x0 = rng.random_range(0..width);
        let c: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.15..0.95));
        for y in y0..(y0 + rh).min(height) {
            for x in x0..(x0 + rw).min(width) {
                out[y * width + x] = c;
            }
        }
    }
    out
}

/// Random synthetic scene: piecewise-constant albedo, a plane with spherical bumps as depth,
/// Lambertian shading from the depth normals under a white directional light.
pub fn generate_scene(seed: u64, width: usize, height: usize) -> Result<SceneRecord> {
    if width < MIN_SCENE_SIDE || height < MIN_SCENE_SIDE {
        return Err(Error::InvalidArgument(format!(
            "scene must be at least {MIN_SCENE_SIDE}x{MIN_SCENE_SIDE}, got {width}x{height}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let light = light_direction(&mut rng);
    let z = surface(&mut rng, height, width);
    let shading = lambertian(&z, height, width, light);
    let albedo = albedo_mosaic(&mut rng, height, width);

    let (lo, hi) = z.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = (hi - lo).max(1e-12);
    let (dmin, dmax) = DEPTH_RANGE;
    let depth = Image::from_fn(height, width, 1, Domain::Log, |y, x, _| {
        (dmin + (dmax - dmin) * (z[y * width + x] - lo) / span).ln()
    });
    let albedo = Image::from_fn(height, width, 3, Domain::Log, |y, x, c| {
        (albedo[y * width + x][c] + LOG_OFFSET).ln()
    });
    let shading = Image::from_fn(height, width, 3, Domain::Log, |y, x, _| {
        (shading[y * width + x] + LOG_OFFSET).ln()
    });
    SceneRecord::compose(format!("scene_{seed:016x}"), seed, depth, albedo, shading)
}

/// `count` scenes with per-scene seeds drawn from `seed`.
pub fn generate_dataset(seed: u64, count: usize, width: usize, height: usize) -> Result<Vec<SceneRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seeds: Vec<u64> = (0..count).map(|_| rng.random()).collect();
    seeds.into_iter().map(|s| generate_scene(s, width, height)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::forward_gradient;

    #[test]
    fn image_formation_holds() {
        for seed in 0..100 {
            let r = generate_scene(seed, 32, 40).unwrap();
            r.validate().unwrap();
            let residual = r
                .image
                .data()
                .iter()
                .zip(r.albedo.data())
                .zip(r.shading.data())
                .map(|((i, a), s)| (i - a - s).abs())
                .fold(0.0, f64::max);
            assert!(residual <= 1e-6);
        }
    }

    #[test]
    fn shading_is_gray_and_depth_in_range() {
        let r = generate_scene(3, 48, 48).unwrap();
        for px in r.shading.data().chunks_exact(3) {
            assert!(px[0] == px[1] && px[1] == px[2]);
        }
        let (lo, hi) = r.depth.min_max();
        assert!((lo.exp() - 1.0).abs() < 1e-9 && (hi.exp() - 10.0).abs() < 1e-9);
    }

    #[test]
    fn rejects_small_scenes() {
        assert!(generate_scene(0, 31, 64).is_err());
    }

    #[test]
    fn deterministic() {
        assert_eq!(generate_scene(9, 40, 32).unwrap(), generate_scene(9, 40, 32).unwrap());
        assert_ne!(generate_scene(9, 40, 32).unwrap(), generate_scene(10, 40, 32).unwrap());
        let a = generate_dataset(1, 3, 32, 32).unwrap();
        assert_eq!(a, generate_dataset(1, 3, 32, 32).unwrap());
    }

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn depth_and_shading_gradients_correlate() {
        let mut total = 0.0;
        for seed in 0..20 {
            let r = generate_scene(seed, 64, 64).unwrap();
            let gd = forward_gradient(r.depth.tensor()).unwrap();
            let gs = forward_gradient(&r.shading.tensor().slice_channels(0, 1).unwrap()).unwrap();
            let md: Vec<f64> = gd.gx.data().iter().zip(gd.gy.data()).map(|(x, y)| x.hypot(*y)).collect();
            let ms: Vec<f64> = gs.gx.data().iter().zip(gs.gy.data()).map(|(x, y)| x.hypot(*y)).collect();
            // edge pixels: any nonzero depth or shading gradient
            let (ed, es): (Vec<f64>, Vec<f64>) = md
                .iter()
                .zip(&ms)
                .filter(|(d, s)| **d > 0.0 || **s > 0.0)
                .map(|(d, s)| (*d, *s))
                .unzip();
            total += pearson(&ed, &es).abs();
        }
        assert!(total / 20.0 > 0.2, "mean |r| = {}", total / 20.0);
    }
}
