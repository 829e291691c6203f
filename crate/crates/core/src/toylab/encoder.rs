use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ImageSet;
use crate::quantizer::{decode, quantize_batch};
use crate::{Codebook, Execution, Result, Schedule, TokenCorpus, VcqError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub patch_size: usize,
    pub dim: usize,
    /// Fit on a seeded random subset of at most this many patches.
    pub max_patches: Option<usize>,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { patch_size: 4, dim: 8, max_patches: None, seed: 0 }
    }
}

/// Fixed PCA projection of square patches. Patches are taken in raster
/// order and flattened row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearEncoder {
    patch_size: usize,
    mean: Vec<f32>,
    /// `patch_size² × dim`, orthonormal columns in decreasing variance order.
    basis: Array2<f32>,
}

fn patch_grid(image_size: usize, patch_size: usize) -> Result<usize> {
    if patch_size == 0 || !image_size.is_multiple_of(patch_size) {
        return Err(VcqError::Config(format!(
            "image size {image_size} is not a multiple of patch size {patch_size}"
        )));
    }
    Ok(image_size / patch_size)
}

fn extract_patch(image: &[f32], image_size: usize, patch_size: usize, index: usize, out: &mut [f32]) {
    let grid = image_size / patch_size;
    let (py, px) = (index / grid, index % grid);
    for r in 0..patch_size {
        let start = (py * patch_size + r) * image_size + px * patch_size;
        out[r * patch_size..(r + 1) * patch_size].copy_from_slice(&image[start..start + patch_size]);
    }
}

impl LinearEncoder {
    /// Builds an encoder from an explicit mean and basis; the basis columns
    /// must be orthonormal.
    pub fn from_parts(patch_size: usize, mean: Vec<f32>, basis: Array2<f32>) -> Result<Self> {
        let p = patch_size * patch_size;
        if mean.len() != p || basis.nrows() != p || basis.ncols() == 0 || basis.ncols() > p {
            return Err(VcqError::Shape(format!(
                "mean of {} and basis {:?} for patches of {p} pixels",
                mean.len(),
                basis.dim()
            )));
        }
        Ok(LinearEncoder { patch_size, mean, basis })
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn dim(&self) -> usize {
        self.basis.ncols()
    }

    pub fn mean(&self) -> &[f32] {
        &self.mean
    }

    pub fn basis(&self) -> &Array2<f32> {
        &self.basis
    }

    pub fn encode_patch(&self, patch: &[f32], out: &mut [f32]) {
        for (j, o) in out.iter_mut().enumerate() {
            let mut acc = 0f64;
            for (i, (&x, &m)) in patch.iter().zip(&self.mean).enumerate() {
                acc += (x - m) as f64 * self.basis[[i, j]] as f64;
            }
            *o = acc as f32;
        }
    }

    pub fn decode_patch(&self, latent: &[f32], out: &mut [f32]) {
        for (i, o) in out.iter_mut().enumerate() {
            let mut acc = self.mean[i] as f64;
            for (j, &z) in latent.iter().enumerate() {
                acc += z as f64 * self.basis[[i, j]] as f64;
            }
            *o = acc as f32;
        }
    }

    /// `L × dim` latents of one image, patches in raster order.
    pub fn encode_image(&self, image: &[f32], image_size: usize) -> Result<Array2<f32>> {
        let grid = patch_grid(image_size, self.patch_size)?;
        if image.len() != image_size * image_size {
            return Err(VcqError::Shape(format!("{} pixels for side {image_size}", image.len())));
        }
        let l = grid * grid;
        let d = self.dim();
        let mut out = Array2::zeros((l, d));
        let mut patch = vec![0f32; self.patch_size * self.patch_size];
        let mut z = vec![0f32; d];
        for t in 0..l {
            extract_patch(image, image_size, self.patch_size, t, &mut patch);
            self.encode_patch(&patch, &mut z);
            out.row_mut(t).iter_mut().zip(&z).for_each(|(o, &v)| *o = v);
        }
        Ok(out)
    }

    pub fn decode_image(&self, latents: &Array2<f32>, image_size: usize) -> Result<Vec<f32>> {
        let grid = patch_grid(image_size, self.patch_size)?;
        if latents.dim() != (grid * grid, self.dim()) {
            return Err(VcqError::Shape(format!(
                "latents {:?} for a {grid}×{grid} grid of dimension {}",
                latents.dim(),
                self.dim()
            )));
        }
        let ps = self.patch_size;
        let mut image = vec![0f32; image_size * image_size];
        let mut patch = vec![0f32; ps * ps];
        for (t, row) in latents.outer_iter().enumerate() {
            let z: Vec<f32> = row.to_vec();
            self.decode_patch(&z, &mut patch);
            let (py, px) = (t / grid, t % grid);
            for r in 0..ps {
                let start = (py * ps + r) * image_size + px * ps;
                image[start..start + ps].copy_from_slice(&patch[r * ps..(r + 1) * ps]);
            }
        }
        Ok(image)
    }
}

/// PCA over the patches of every image: mean-centre, then keep the top
/// `dim` eigenvectors of the covariance, each signed so that its first
/// nonzero component is positive.
pub fn fit_encoder(images: &ImageSet, config: &EncoderConfig) -> Result<LinearEncoder> {
    let ps = config.patch_size;
    let grid = patch_grid(images.image_size(), ps)?;
    let p = ps * ps;
    if config.dim == 0 || config.dim > p {
        return Err(VcqError::Config(format!("latent dimension {} not in 1..={p}", config.dim)));
    }
    let per_image = grid * grid;
    let total = images.len() * per_image;
    let mut chosen: Vec<usize> = match config.max_patches {
        Some(m) if m < total => {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rand::seq::index::sample(&mut rng, total, m).into_vec()
        }
        _ => (0..total).collect(),
    };
    chosen.sort_unstable();
    if chosen.len() < config.dim {
        return Err(VcqError::Input(format!("{} patches for {} components", chosen.len(), config.dim)));
    }

    let mut patch = vec![0f32; p];
    let mut mean = vec![0f64; p];
    let mut second = DMatrix::<f64>::zeros(p, p);
    for &k in &chosen {
        extract_patch(images.image(k / per_image), images.image_size(), ps, k % per_image, &mut patch);
        for i in 0..p {
            mean[i] += patch[i] as f64;
        }
    }
    let n = chosen.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    let mut centred = vec![0f64; p];
    for &k in &chosen {
        extract_patch(images.image(k / per_image), images.image_size(), ps, k % per_image, &mut patch);
        for i in 0..p {
            centred[i] = patch[i] as f64 - mean[i];
        }
        for i in 0..p {
            for j in 0..=i {
                second[(i, j)] += centred[i] * centred[j];
            }
        }
    }
    for i in 0..p {
        for j in 0..i {
            second[(j, i)] = second[(i, j)];
        }
    }
    second /= n;

    let eig = SymmetricEigen::new(second);
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut basis = Array2::<f32>::zeros((p, config.dim));
    for (j, &col) in order.iter().take(config.dim).enumerate() {
        let v = eig.eigenvectors.column(col);
        let sign = match v.iter().find(|x| x.abs() > 1e-12) {
            Some(&x) if x < 0.0 => -1.0,
            _ => 1.0,
        };
        for i in 0..p {
            basis[[i, j]] = (sign * v[i]) as f32;
        }
    }
    LinearEncoder::from_parts(ps, mean.into_iter().map(|m| m as f32).collect(), basis)
}

/// Latent matrices for every image, in image order.
pub fn encode_dataset(images: &ImageSet, encoder: &LinearEncoder, exec: Execution) -> Result<Vec<Array2<f32>>> {
    let indices: Vec<usize> = (0..images.len()).collect();
    exec.map(&indices, |&i| encoder.encode_image(images.image(i), images.image_size()))
        .into_iter()
        .collect()
}

/// Raster patches → encoder → prefix-restricted quantizer, one token row
/// per image; labels carried through.
pub fn tokenize_dataset(
    images: &ImageSet,
    encoder: &LinearEncoder,
    schedule: &Schedule,
    codebook: &Codebook,
    exec: Execution,
) -> Result<TokenCorpus> {
    let grid = patch_grid(images.image_size(), encoder.patch_size())?;
    if grid * grid != schedule.length() {
        return Err(VcqError::Config(format!(
            "{} patches per image but schedule length {}",
            grid * grid,
            schedule.length()
        )));
    }
    if codebook.dim() != encoder.dim() {
        return Err(VcqError::Config(format!(
            "encoder dimension {} but codebook dimension {}",
            encoder.dim(),
            codebook.dim()
        )));
    }
    let latents = encode_dataset(images, encoder, exec)?;
    let results = quantize_batch(&latents, schedule, codebook, exec)?;
    let tokens = results.into_iter().flat_map(|r| r.tokens).collect();
    TokenCorpus::new(schedule.length(), schedule.k_max(), tokens, Some(images.labels().to_vec()))
}

/// Pixel MSE and PSNR against a peak of 1.0. A perfect reconstruction has
/// `psnr = +∞` (serialized as `null`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Reconstruction {
    pub mse: f64,
    pub psnr: f64,
}

impl Reconstruction {
    pub fn from_mse(mse: f64) -> Self {
        let psnr = if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() };
        Reconstruction { mse, psnr }
    }
}

pub fn reconstruction_metrics(
    images: &ImageSet,
    tokens: &TokenCorpus,
    encoder: &LinearEncoder,
    codebook: &Codebook,
) -> Result<Reconstruction> {
    if tokens.n_samples() != images.len() {
        return Err(VcqError::Shape(format!("{} token rows for {} images", tokens.n_samples(), images.len())));
    }
    let mut sq = 0f64;
    for (i, row) in tokens.rows().enumerate() {
        let latents = decode(row, codebook)?;
        let image = encoder.decode_image(&latents, images.image_size())?;
        sq += image
            .iter()
            .zip(images.image(i))
            .map(|(&a, &b)| {
                let d = a as f64 - b as f64;
                d * d
            })
            .sum::<f64>();
    }
    Ok(Reconstruction::from_mse(sq / images.pixels().len() as f64))
}
