//! Synthetic camera-fingerprint dataset. Each class owns a fixed
//! high-frequency zero-mean fingerprint field; every image is smooth random
//! content plus `amplitude` times the class fingerprint, clipped to [0, 1].
//! Content varies per image and carries no class information, so only the
//! pixel-difference-visible fingerprint separates the classes.

use std::fs;
use std::path::{Path, PathBuf};

use pdcvit_core::rng::{seeded, Prng};
use pdcvit_core::Tensor;
use rand::Rng;

use crate::dataset::{DatasetManifest, ManifestItem, Split};
use crate::error::{Error, Result};
use crate::imageio;

#[derive(Debug, Clone, Copy)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub images_per_class: usize,
    pub image_size: usize,
    /// Fingerprint strength in [0, 0.1]; zero produces a null-signal control
    /// set whose classes are statistically indistinguishable.
    pub amplitude: f64,
    pub content_seed: u64,
    pub fingerprint_seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=0.1).contains(&self.amplitude) {
            return Err(Error::Usage(format!(
                "amplitude {} outside [0, 0.1]",
                self.amplitude
            )));
        }
        if self.num_classes == 0 || self.images_per_class == 0 || self.image_size < 8 {
            return Err(Error::Usage(
                "need at least one class, one image per class, and size >= 8".into(),
            ));
        }
        Ok(())
    }
}

/// Per-pixel white noise in [-1, 1], shared across the three channels the
/// way a sensor's photosite pattern is.
fn fingerprint_field(size: usize, seed: u64) -> Vec<f64> {
    let mut rng = seeded(seed);
    (0..size * size).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Smooth content: per-channel bilinear interpolation of a coarse random
/// lattice, values in [0.2, 0.8].
fn smooth_content(size: usize, rng: &mut Prng) -> Vec<f64> {
    const CELLS: usize = 4;
    let g = CELLS + 1;
    let mut out = vec![0.0f64; 3 * size * size];
    for c in 0..3 {
        let lattice: Vec<f64> = (0..g * g).map(|_| rng.random_range(0.2..0.8)).collect();
        for y in 0..size {
            let fy = y as f64 / size as f64 * CELLS as f64;
            let (gy, ty) = (fy as usize, fy.fract());
            for x in 0..size {
                let fx = x as f64 / size as f64 * CELLS as f64;
                let (gx, tx) = (fx as usize, fx.fract());
                let v00 = lattice[gy * g + gx];
                let v01 = lattice[gy * g + gx + 1];
                let v10 = lattice[(gy + 1) * g + gx];
                let v11 = lattice[(gy + 1) * g + gx + 1];
                let top = v00 + (v01 - v00) * tx;
                let bot = v10 + (v11 - v10) * tx;
                out[(c * size + y) * size + x] = top + (bot - top) * ty;
            }
        }
    }
    out
}

/// Generates `num_classes × images_per_class` PNG files under
/// `out_dir/<class>/` and returns the (unsplit) manifest.
pub fn gen_synthetic(spec: &SynthSpec, out_dir: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    let size = spec.image_size;
    let mut classes = Vec::new();
    let mut items = Vec::new();
    for c in 0..spec.num_classes {
        let class_name = format!("cam{c:02}");
        let class_dir = out_dir.join(&class_name);
        fs::create_dir_all(&class_dir)?;
        let fingerprint = fingerprint_field(size, spec.fingerprint_seed.wrapping_add(c as u64));
        for i in 0..spec.images_per_class {
            let image_index = (c * spec.images_per_class + i) as u64;
            let mut rng = seeded(spec.content_seed.wrapping_add(image_index));
            let mut data = smooth_content(size, &mut rng);
            for ch in 0..3 {
                for p in 0..size * size {
                    let v = data[ch * size * size + p] + spec.amplitude * fingerprint[p];
                    data[ch * size * size + p] = v.clamp(0.0, 1.0);
                }
            }
            let tensor = Tensor::from_vec(&[3, size, size], data)?;
            let path: PathBuf = class_dir.join(format!("img_{i:04}.png"));
            imageio::save_image(&path, &tensor)?;
            items.push(ManifestItem { path, class_index: c, split: Split::Train });
        }
        classes.push(class_name);
    }
    Ok(DatasetManifest { classes, items, seed: 0 })
}
