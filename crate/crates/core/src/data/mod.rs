//! Synthetic training data: scene generation, augmentation, patch sampling and the on-disk
//! record and dataset formats.

mod augment;
mod io;
mod scene;

pub use augment::{apply_augmentation, augment, AugmentParams};
pub use io::{
    read_dataset, read_png, read_raster, read_raster_file, read_record, verify_manifest, write_dataset, write_png,
    write_raster, write_raster_file, write_record, RASTER_MAGIC,
};
pub use scene::{generate_dataset, generate_scene, DEPTH_RANGE, MIN_SCENE_SIDE};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::{bilinear_upsample, forward_gradient, Domain, GradientField, Image};
use crate::networks::{PATCH_INPUT, PATCH_MARGIN, PATCH_OUTPUT};
use crate::tensor::Tensor;

/// Largest tolerated |I − A − S| in a record.
pub const FORMATION_TOLERANCE: f64 = 1e-6;

/// One training scene. `image`, `albedo` and `shading` are log-domain color; `depth` is the
/// natural log of linear depth.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneRecord {
    pub id: String,
    pub seed: u64,
    pub image: Image,
    pub depth: Image,
    pub albedo: Image,
    pub shading: Image,
}

/// Forward-difference gradients of all four maps of a record.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneGradients {
    pub image: GradientField,
    pub depth: GradientField,
    pub albedo: GradientField,
    pub shading: GradientField,
}

impl SceneGradients {
    pub fn crop(&self, y0: usize, x0: usize, height: usize, width: usize) -> Result<Self> {
        Ok(SceneGradients {
            image: self.image.crop(y0, x0, height, width)?,
            depth: self.depth.crop(y0, x0, height, width)?,
            albedo: self.albedo.crop(y0, x0, height, width)?,
            shading: self.shading.crop(y0, x0, height, width)?,
        })
    }
}

impl SceneRecord {
    /// Builds a record with `I = A + S`.
    pub fn compose(id: String, seed: u64, depth: Image, albedo: Image, shading: Image) -> Result<Self> {
        let image = albedo.add(&shading)?;
        let r = SceneRecord {
            id,
            seed,
            image,
            depth,
            albedo,
            shading,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn height(&self) -> usize {
        self.image.height()
    }

    pub fn width(&self) -> usize {
        self.image.width()
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        for (name, img, c) in [
            ("I", &self.image, 3),
            ("D", &self.depth, 1),
            ("A", &self.albedo, 3),
            ("S", &self.shading, 3),
        ] {
            if img.shape() != (h, w, c) {
                return Err(Error::shape("scene record", format!("{name} {h}x{w}x{c}"), format!("{:?}", img.shape())));
            }
            img.expect_domain("scene record", Domain::Log)?;
            if !img.is_finite() {
                return Err(Error::InvalidArgument(format!("record {}: {name} is not finite", self.id)));
            }
        }
        let worst = self
            .image
            .data()
            .iter()
            .zip(self.albedo.data())
            .zip(self.shading.data())
            .map(|((i, a), s)| (i - a - s).abs())
            .fold(0.0, f64::max);
        if worst > FORMATION_TOLERANCE {
            return Err(Error::InvalidArgument(format!(
                "record {}: |I - A - S| reaches {worst:e}",
                self.id
            )));
        }
        Ok(())
    }

    /// Depth in linear units.
    pub fn linear_depth(&self) -> Image {
        self.depth.map(f64::exp).with_domain(Domain::Linear)
    }

    pub fn gradients(&self) -> Result<SceneGradients> {
        Ok(SceneGradients {
            image: forward_gradient(self.image.tensor())?,
            depth: forward_gradient(self.depth.tensor())?,
            albedo: forward_gradient(self.albedo.tensor())?,
            shading: forward_gradient(self.shading.tensor())?,
        })
    }
}

/// Blurry stand-in for the global net's output: log depth resampled to 1/16 and back.
pub fn coarse_depth_prior(record: &SceneRecord) -> Result<Image> {
    let (h, w) = (record.height(), record.width());
    let small = bilinear_upsample(&record.depth, (h / 16).max(1), (w / 16).max(1))?;
    bilinear_upsample(&small, h, w)
}

/// A 35×35 training patch with the gradients of the full record cropped to the same window.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub y0: usize,
    pub x0: usize,
    pub image: Tensor,
    pub coarse_depth: Tensor,
    pub gradients: SceneGradients,
}

/// Ground-truth gradient channels on the 19×19 output window.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchTargets {
    pub depth: Tensor,
    pub albedo: Tensor,
    pub shading: Tensor,
}

impl Patch {
    pub fn targets(&self) -> Result<PatchTargets> {
        let inner = self.gradients.crop(PATCH_MARGIN, PATCH_MARGIN, PATCH_OUTPUT, PATCH_OUTPUT)?;
        Ok(PatchTargets {
            depth: inner.depth.to_channels(),
            albedo: inner.albedo.to_channels(),
            shading: inner.shading.to_channels(),
        })
    }
}

/// Cuts the patch at `(y0, x0)` (top-left of the 35×35 input window).
pub fn extract_patch(
    record: &SceneRecord,
    gradients: &SceneGradients,
    coarse_depth: &Image,
    y0: usize,
    x0: usize,
) -> Result<Patch> {
    Ok(Patch {
        y0,
        x0,
        image: record.image.tensor().crop(y0, x0, PATCH_INPUT, PATCH_INPUT)?,
        coarse_depth: coarse_depth.tensor().crop(y0, x0, PATCH_INPUT, PATCH_INPUT)?,
        gradients: gradients.crop(y0, x0, PATCH_INPUT, PATCH_INPUT)?,
    })
}

/// `count` uniformly placed patches, using [`coarse_depth_prior`] as the coarse depth input.
pub fn sample_patches(record: &SceneRecord, count: usize, seed: u64) -> Result<Vec<Patch>> {
    sample_patches_with(record, &coarse_depth_prior(record)?, count, seed)
}

/// `count` uniformly placed patches with the given coarse depth as the fourth depth-net input.
pub fn sample_patches_with(record: &SceneRecord, coarse_depth: &Image, count: usize, seed: u64) -> Result<Vec<Patch>> {
    let (h, w) = (record.height(), record.width());
    if h < PATCH_INPUT || w < PATCH_INPUT {
        return Err(Error::shape(
            "sample_patches",
            format!("record at least {PATCH_INPUT}x{PATCH_INPUT}"),
            format!("{h}x{w}"),
        ));
    }
    if coarse_depth.shape() != (h, w, 1) {
        return Err(Error::shape("sample_patches", format!("coarse depth {h}x{w}x1"), format!("{:?}", coarse_depth.shape())));
    }
    let gradients = record.gradients()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let y0 = rng.random_range(0..=h - PATCH_INPUT);
            let x0 = rng.random_range(0..=w - PATCH_INPUT);
            extract_patch(record, &gradients, coarse_depth, y0, x0)
        })
        .collect()
}
