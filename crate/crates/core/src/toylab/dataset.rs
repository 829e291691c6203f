use std::f32::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Result, VcqError};

/// Procedural image corpus: every class has its own stripe orientation,
/// stripe frequency and blob layout; every image gets a random stripe
/// phase, a small blob jitter and uniform pixel noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub n_per_class: usize,
    pub image_size: usize,
    /// Half-width of the uniform pixel noise.
    pub noise: f32,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec { n_classes: 10, n_per_class: 200, image_size: 32, noise: 0.1, seed: 0 }
    }
}

/// Square grayscale images in `[0, 1]`, stored row-major one after another.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSet {
    image_size: usize,
    pixels: Vec<f32>,
    labels: Vec<u32>,
}

impl ImageSet {
    pub fn new(image_size: usize, pixels: Vec<f32>, labels: Vec<u32>) -> Result<Self> {
        if image_size == 0 {
            return Err(VcqError::Config("image size must be positive".into()));
        }
        if pixels.len() != labels.len() * image_size * image_size {
            return Err(VcqError::Shape(format!(
                "{} pixels for {} images of side {image_size}",
                pixels.len(),
                labels.len()
            )));
        }
        Ok(ImageSet { image_size, pixels, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_size * self.image_size;
        &self.pixels[i * n..(i + 1) * n]
    }
}

struct Blob {
    x: f32,
    y: f32,
    sigma: f32,
    amplitude: f32,
}

struct ClassPattern {
    angle: f32,
    frequency: f32,
    blobs: Vec<Blob>,
}

impl ClassPattern {
    fn draw(rng: &mut ChaCha8Rng) -> Self {
        let blobs = (0..2)
            .map(|_| Blob {
                x: rng.random_range(0.2..0.8),
                y: rng.random_range(0.2..0.8),
                sigma: rng.random_range(0.08..0.2),
                amplitude: rng.random_range(-0.4..0.4),
            })
            .collect();
        ClassPattern {
            angle: rng.random_range(0.0..PI),
            frequency: rng.random_range(1.0..4.0),
            blobs,
        }
    }
}

/// Images are ordered by class, `n_per_class` per class.
pub fn generate_dataset(spec: &SyntheticSpec) -> Result<ImageSet> {
    if spec.image_size == 0 {
        return Err(VcqError::Config("image size must be positive".into()));
    }
    if !(spec.noise.is_finite() && spec.noise >= 0.0) {
        return Err(VcqError::Config(format!("noise must be >= 0, got {}", spec.noise)));
    }
    let mut class_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let patterns: Vec<ClassPattern> = (0..spec.n_classes).map(|_| ClassPattern::draw(&mut class_rng)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1);

    let s = spec.image_size;
    let mut pixels = Vec::with_capacity(spec.n_classes * spec.n_per_class * s * s);
    let mut labels = Vec::with_capacity(spec.n_classes * spec.n_per_class);
    for (c, p) in patterns.iter().enumerate() {
        let (dx, dy) = (p.angle.cos(), p.angle.sin());
        for _ in 0..spec.n_per_class {
            let phase = rng.random_range(0.0..2.0 * PI);
            let jitter: Vec<(f32, f32)> =
                p.blobs.iter().map(|_| (rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05))).collect();
            for row in 0..s {
                let y = (row as f32 + 0.5) / s as f32;
                for col in 0..s {
                    let x = (col as f32 + 0.5) / s as f32;
                    let mut v = 0.5 + 0.25 * (2.0 * PI * p.frequency * (x * dx + y * dy) + phase).sin();
                    for (b, (jx, jy)) in p.blobs.iter().zip(&jitter) {
                        let r2 = (x - b.x - jx).powi(2) + (y - b.y - jy).powi(2);
                        v += b.amplitude * (-r2 / (2.0 * b.sigma * b.sigma)).exp();
                    }
                    if spec.noise > 0.0 {
                        v += rng.random_range(-spec.noise..=spec.noise);
                    }
                    pixels.push(v.clamp(0.0, 1.0));
                }
            }
            labels.push(c as u32);
        }
    }
    ImageSet::new(s, pixels, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec { n_classes: 3, n_per_class: 5, image_size: 8, noise: 0.1, seed: 4 }
    }

    #[test]
    fn deterministic_and_in_range() {
        let a = generate_dataset(&small()).unwrap();
        let b = generate_dataset(&small()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 15);
        assert_eq!(a.labels(), &[0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 2, 2, 2, 2, 2]);
        assert!(a.pixels().iter().all(|&x| (0.0..=1.0).contains(&x)));
        let c = generate_dataset(&SyntheticSpec { seed: 5, ..small() }).unwrap();
        assert_ne!(a.pixels(), c.pixels());
    }

    #[test]
    fn empty_classes() {
        let set = generate_dataset(&SyntheticSpec { n_per_class: 0, ..small() }).unwrap();
        assert!(set.is_empty());
        assert!(set.pixels().is_empty());
    }

    #[test]
    fn class_means_differ() {
        let spec = SyntheticSpec { n_classes: 2, n_per_class: 20, image_size: 16, noise: 0.1, seed: 0 };
        let set = generate_dataset(&spec).unwrap();
        let n = 16 * 16;
        let mut means = vec![vec![0f64; n]; 2];
        for i in 0..set.len() {
            let c = set.labels()[i] as usize;
            for (m, &x) in means[c].iter_mut().zip(set.image(i)) {
                *m += x as f64 / 20.0;
            }
        }
        let dist: f64 = means[0].iter().zip(&means[1]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(dist > 0.5, "class means too close: {dist}");
    }
}
