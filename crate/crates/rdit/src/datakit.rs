//! Class-conditional datasets: a deterministic synthetic shape generator
//! (desk-scale stand-in for a real corpus) and an image-folder loader.
//!
//! Synthetic classes render one of four shape families (square, disk, bar,
//! cross) with a class-coded fill intensity on a dark noisy background, with
//! randomized position and scale. Intensity coding keeps class identity
//! linearly decodable from raw pixels, which the probing tests rely on.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{RditError, Result};
use crate::numerics::tensor::Tensor;
use crate::ppm;

#[derive(Clone, Debug)]
pub struct Dataset {
    /// `[n, channels, edge, edge]` in [-1, 1].
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_dims(&self) -> (usize, usize) {
        (self.images.shape()[1], self.images.shape()[2])
    }

    /// Copy one `[channels, edge, edge]` image.
    pub fn image(&self, i: usize) -> Tensor<f32> {
        let s = self.images.shape();
        let item = s[1] * s[2] * s[3];
        Tensor::new(
            vec![s[1], s[2], s[3]],
            self.images.data()[i * item..(i + 1) * item].to_vec(),
        )
    }

    /// Gather a `[k, channels, edge, edge]` batch by index.
    pub fn gather(&self, idx: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let s = self.images.shape();
        let item = s[1] * s[2] * s[3];
        let mut data = Vec::with_capacity(idx.len() * item);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            data.extend_from_slice(&self.images.data()[i * item..(i + 1) * item]);
            labels.push(self.labels[i]);
        }
        (Tensor::new(vec![idx.len(), s[1], s[2], s[3]], data), labels)
    }
}

/// Map an 8-bit pixel value to [-1, 1].
pub fn normalize(px: f64) -> f32 {
    (px / 127.5 - 1.0) as f32
}

/// Inverse of [`normalize`], rounded and clamped to u8.
pub fn denormalize(x: f32) -> u8 {
    (((x as f64 + 1.0) * 127.5).round()).clamp(0.0, 255.0) as u8
}

const SHAPE_FAMILIES: usize = 4;

/// Deterministic synthetic dataset: same (config, seed) gives bit-identical
/// images; item seeds are derived per (class, index).
pub fn gen_synthetic(
    num_classes: usize,
    per_class: usize,
    image: usize,
    seed: u64,
) -> Result<Dataset> {
    if num_classes == 0 || num_classes > 16 {
        return Err(RditError::Dataset(format!(
            "num_classes {num_classes} outside supported range 1..=16"
        )));
    }
    if per_class == 0 {
        return Err(RditError::Dataset("per_class must be >= 1".into()));
    }
    let channels = 3usize;
    let n = num_classes * per_class;
    let mut data = vec![0.0f32; n * channels * image * image];
    let mut labels = Vec::with_capacity(n);
    for k in 0..num_classes {
        for i in 0..per_class {
            let item = k * per_class + i;
            labels.push(k);
            let mut rng = ChaCha8Rng::seed_from_u64(
                seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
                    .wrapping_add((item as u64) << 1)
                    .wrapping_add(1),
            );
            let img = &mut data[item * channels * image * image..(item + 1) * channels * image * image];
            render_item(img, k, num_classes, image, &mut rng);
        }
    }
    Ok(Dataset {
        images: Tensor::new(vec![n, channels, image, image], data),
        labels,
        num_classes,
    })
}

fn render_item(img: &mut [f32], class: usize, num_classes: usize, edge: usize, rng: &mut ChaCha8Rng) {
    let channels = 3usize;
    // Dark background with a small random base level and per-pixel noise.
    let bg = -0.85 + 0.1 * rng.gen::<f64>();
    for v in img.iter_mut() {
        *v = (bg + 0.06 * (rng.gen::<f64>() - 0.5)) as f32;
    }
    // Class-coded fill intensity, well separated across classes, plus a
    // small deterministic per-class tint.
    let fill = if num_classes > 1 {
        -0.1 + 0.95 * class as f64 / (num_classes - 1) as f64
    } else {
        0.5
    };
    let tint = |c: usize| 0.05 * (((class * (c + 3)) % 5) as f64 - 2.0) / 2.0;

    let cx = edge as f64 * (0.35 + 0.3 * rng.gen::<f64>());
    let cy = edge as f64 * (0.35 + 0.3 * rng.gen::<f64>());
    let size = edge as f64 * (0.30 + 0.15 * rng.gen::<f64>());
    let family = class % SHAPE_FAMILIES;

    for y in 0..edge {
        for x in 0..edge {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            let inside = match family {
                0 => dx.abs() <= size / 2.0 && dy.abs() <= size / 2.0, // square
                1 => dx * dx + dy * dy <= (size / 2.0) * (size / 2.0), // disk
                2 => dy.abs() <= size / 6.0 && dx.abs() <= size / 2.0, // bar
                _ => {
                    // cross
                    (dx.abs() <= size / 6.0 && dy.abs() <= size / 2.0)
                        || (dy.abs() <= size / 6.0 && dx.abs() <= size / 2.0)
                }
            };
            if inside {
                for c in 0..channels {
                    let v = fill + tint(c) + 0.02 * (rng.gen::<f64>() - 0.5);
                    img[c * edge * edge + y * edge + x] = v.clamp(-1.0, 1.0) as f32;
                }
            }
        }
    }
}

/// Load a directory of class subfolders of PPM/PGM files. Images are
/// center-cropped square and nearest-neighbor resized to `image` pixels.
pub fn load_folder(path: &Path, image: usize) -> Result<Dataset> {
    let mut class_dirs: Vec<_> = std::fs::read_dir(path)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.path())
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(RditError::Dataset(format!(
            "{}: no class subfolders",
            path.display()
        )));
    }
    let channels = 3usize;
    let mut data: Vec<f32> = Vec::new();
    let mut labels = Vec::new();
    for (k, dir) in class_dirs.iter().enumerate() {
        let mut files: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        let mut loaded = 0usize;
        for f in files {
            match ppm::read_ppm(&f) {
                Ok((w, h, rgb)) => {
                    data.extend(crop_resize(&rgb, w, h, image));
                    labels.push(k);
                    loaded += 1;
                }
                Err(e) => eprintln!("warning: skipping {}: {e}", f.display()),
            }
        }
        if loaded == 0 {
            return Err(RditError::Dataset(format!(
                "{}: empty class folder",
                dir.display()
            )));
        }
    }
    let n = labels.len();
    Ok(Dataset {
        images: Tensor::new(vec![n, channels, image, image], data),
        labels,
        num_classes: class_dirs.len(),
    })
}

/// Center-crop to square, nearest-neighbor resize, normalize; emits
/// channel-major `[3, edge, edge]` values.
fn crop_resize(rgb: &[u8], w: usize, h: usize, edge: usize) -> Vec<f32> {
    let side = w.min(h);
    let x0 = (w - side) / 2;
    let y0 = (h - side) / 2;
    let mut out = vec![0.0f32; 3 * edge * edge];
    for y in 0..edge {
        for x in 0..edge {
            let sy = y0 + y * side / edge;
            let sx = x0 + x * side / edge;
            for c in 0..3 {
                out[c * edge * edge + y * edge + x] = normalize(rgb[(sy * w + sx) * 3 + c] as f64);
            }
        }
    }
    out
}

/// Convert one `[3, edge, edge]` tensor in [-1, 1] to interleaved RGB bytes.
pub fn image_to_rgb(img: &Tensor<f32>) -> Vec<u8> {
    let s = img.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    assert_eq!(c, 3, "image_to_rgb expects 3 channels");
    let mut rgb = vec![0u8; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                rgb[(y * w + x) * 3 + ch] = denormalize(img.data()[ch * h * w + y * w + x]);
            }
        }
    }
    rgb
}
