use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::SceneRecord;
use crate::error::Result;
use crate::image::Image;

/// One draw of the training-time transforms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub scale: f64,
    pub rotation_deg: f64,
    /// Translation in pixels, `(dy, dx)`.
    pub translate: (f64, f64),
    /// Per-channel linear gain applied to albedo.
    pub rgb: [f64; 3],
    pub flip: bool,
    /// Exponent applied to linear albedo and shading.
    pub gamma: f64,
}

impl AugmentParams {
    pub fn identity() -> Self {
        AugmentParams {
            scale: 1.0,
            rotation_deg: 0.0,
            translate: (0.0, 0.0),
            rgb: [1.0; 3],
            flip: false,
            gamma: 1.0,
        }
    }

    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        AugmentParams {
            scale: rng.random_range(0.8..=1.2),
            rotation_deg: rng.random_range(-15.0..=15.0),
            translate: (rng.random_range(-8.0..=8.0), rng.random_range(-8.0..=8.0)),
            rgb: std::array::from_fn(|_| rng.random_range(0.9..=1.1)),
            flip: rng.random_bool(0.5),
            gamma: rng.random_range(0.8f64.ln()..=1.25f64.ln()).exp(),
        }
    }

    fn is_geometric_identity(&self) -> bool {
        self.scale == 1.0 && self.rotation_deg == 0.0 && self.translate == (0.0, 0.0) && !self.flip
    }
}

fn warp(img: &Image, p: &AugmentParams) -> Image {
    let (h, w, c) = img.shape();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = p.rotation_deg.to_radians().sin_cos();
    Image::from_fn(h, w, c, img.domain(), |y, x, ch| {
        let dy = y as f64 - cy - p.translate.0;
        let dx = x as f64 - cx - p.translate.1;
        let qy = (-sin * dx + cos * dy) / p.scale;
        let mut qx = (cos * dx + sin * dy) / p.scale;
        if p.flip {
            qx = -qx;
        }
        img.sample_bilinear(cy + qy, cx + qx, ch)
    })
}

/// Applies `params` consistently to all four maps, then recomputes `I = A + S`.
pub fn apply_augmentation(record: &SceneRecord, params: &AugmentParams) -> Result<SceneRecord> {
    let geo = |img: &Image| {
        if params.is_geometric_identity() {
            img.clone()
        } else {
            warp(img, params)
        }
    };
    let depth = geo(&record.depth);
    let gains = params.rgb.map(f64::ln);
    let mut albedo = geo(&record.albedo);
    for (i, v) in albedo.tensor_mut().data_mut().iter_mut().enumerate() {
        *v = params.gamma * (*v + gains[i % 3]);
    }
    let shading = geo(&record.shading).map(|v| params.gamma * v);
    SceneRecord::compose(record.id.clone(), record.seed, depth, albedo, shading)
}

/// Random augmentation drawn from `seed`.
pub fn augment(record: &SceneRecord, seed: u64) -> Result<SceneRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    apply_augmentation(record, &AugmentParams::sample(&mut rng))
}
