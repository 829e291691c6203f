//! Shared-codebook quantization with a per-position candidate prefix.
//!
//! Position `t` picks the nearest entry among the first `K_t` rows of one
//! codebook of `k_max` rows. Distance is squared Euclidean with no
//! normalization; ties go to the lowest index, so restricting the prefix
//! never reorders the surviving candidates.

use ndarray::{Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Execution, Result, Schedule, TokenCorpus, VcqError};

/// `k_max × d` table of embedding vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    entries: Array2<f32>,
}

impl Codebook {
    pub fn new(entries: Array2<f32>) -> Result<Self> {
        let (k, d) = entries.dim();
        if k == 0 || d == 0 {
            return Err(VcqError::Shape(format!("codebook must be non-empty, got {k}x{d}")));
        }
        if entries.iter().any(|x| !x.is_finite()) {
            return Err(VcqError::Input("codebook entries must be finite".into()));
        }
        // Rows are read as contiguous slices.
        let entries = entries.as_standard_layout().into_owned();
        Ok(Codebook { entries })
    }

    pub fn dim(&self) -> usize {
        self.entries.ncols()
    }

    pub fn k_max(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &Array2<f32> {
        &self.entries
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        let d = self.dim();
        &self.entries.as_slice().expect("standard layout")[i * d..(i + 1) * d]
    }
}

#[inline]
pub(crate) fn squared_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let diff = x as f64 - y as f64;
            diff * diff
        })
        .sum()
}

/// Lowest-index nearest entry among rows `0..k_t`; no validation.
#[inline]
fn nearest_in_prefix(z: &[f32], codebook: &Codebook, k_t: usize) -> (usize, f64) {
    let mut best = 0;
    let mut best_dist = squared_distance(z, codebook.row(0));
    for i in 1..k_t {
        let dist = squared_distance(z, codebook.row(i));
        if dist < best_dist {
            best = i;
            best_dist = dist;
        }
    }
    (best, best_dist)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Nearest<'a> {
    pub token: u32,
    pub entry: &'a [f32],
    pub distance: f64,
}

/// Quantizes one vector against the first `k_t` codebook entries.
pub fn quantize_position<'a>(z: &[f32], codebook: &'a Codebook, k_t: usize) -> Result<Nearest<'a>> {
    if k_t == 0 || k_t > codebook.k_max() {
        return Err(VcqError::Range(format!(
            "candidate count {k_t} outside 1..={}",
            codebook.k_max()
        )));
    }
    if z.len() != codebook.dim() {
        return Err(VcqError::Shape(format!(
            "vector of dimension {} for codebook of dimension {}",
            z.len(),
            codebook.dim()
        )));
    }
    if z.iter().any(|x| !x.is_finite()) {
        return Err(VcqError::Input("input vector must be finite".into()));
    }
    let (token, distance) = nearest_in_prefix(z, codebook, k_t);
    Ok(Nearest { token: token as u32, entry: codebook.row(token), distance })
}

/// Quantized form of one `L × d` latent sequence.
///
/// `residuals[t] = quantized[t] − latents[t]`, so `latents + residuals`
/// reproduces `quantized` and a training loop can treat the residual as a
/// constant to pass gradients straight through.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizationResult {
    pub tokens: Vec<u32>,
    pub quantized: Array2<f32>,
    pub distances: Vec<f64>,
    pub residuals: Array2<f32>,
}

fn check_sequence(latents: &ArrayView2<f32>, schedule: &Schedule, codebook: &Codebook) -> Result<()> {
    if latents.nrows() != schedule.length() {
        return Err(VcqError::Shape(format!(
            "{} latent rows for a schedule of length {}",
            latents.nrows(),
            schedule.length()
        )));
    }
    if latents.ncols() != codebook.dim() {
        return Err(VcqError::Shape(format!(
            "latent dimension {} but codebook dimension {}",
            latents.ncols(),
            codebook.dim()
        )));
    }
    if schedule.k_max() as usize > codebook.k_max() {
        return Err(VcqError::Shape(format!(
            "schedule reaches K = {} but the codebook has {} entries",
            schedule.k_max(),
            codebook.k_max()
        )));
    }
    if latents.iter().any(|x| !x.is_finite()) {
        return Err(VcqError::Input("latents must be finite".into()));
    }
    Ok(())
}

pub fn quantize_sequence(
    latents: ArrayView2<f32>,
    schedule: &Schedule,
    codebook: &Codebook,
) -> Result<QuantizationResult> {
    check_sequence(&latents, schedule, codebook)?;
    let (l, d) = latents.dim();
    let sizes = schedule.sizes();
    let mut tokens = Vec::with_capacity(l);
    let mut distances = Vec::with_capacity(l);
    let mut quantized = Array2::<f32>::zeros((l, d));
    let mut z = vec![0f32; d];
    for (t, row) in latents.axis_iter(Axis(0)).enumerate() {
        z.iter_mut().zip(row.iter()).for_each(|(dst, &src)| *dst = src);
        let (token, dist) = nearest_in_prefix(&z, codebook, sizes[t] as usize);
        tokens.push(token as u32);
        distances.push(dist);
        quantized.row_mut(t).iter_mut().zip(codebook.row(token)).for_each(|(q, &e)| *q = e);
    }
    let residuals = &quantized - &latents;
    Ok(QuantizationResult { tokens, quantized, distances, residuals })
}

/// Quantizes independent sequences, in input order.
pub fn quantize_batch(
    batch: &[Array2<f32>],
    schedule: &Schedule,
    codebook: &Codebook,
    exec: Execution,
) -> Result<Vec<QuantizationResult>> {
    exec.map(batch, |x| quantize_sequence(x.view(), schedule, codebook))
        .into_iter()
        .collect()
}

/// Looks up codebook rows for a token sequence.
pub fn decode(tokens: &[u32], codebook: &Codebook) -> Result<Array2<f32>> {
    let d = codebook.dim();
    let mut out = Array2::<f32>::zeros((tokens.len(), d));
    for (t, &x) in tokens.iter().enumerate() {
        if x as usize >= codebook.k_max() {
            return Err(VcqError::Range(format!(
                "token {x} at position {t} but codebook has {} entries",
                codebook.k_max()
            )));
        }
        out.row_mut(t).iter_mut().zip(codebook.row(x as usize)).for_each(|(o, &e)| *o = e);
    }
    Ok(out)
}

/// The two standard VQ objective terms, unweighted.
///
/// `codebook` is `mean_t ‖sg(z_t) − e_t‖²` and moves entries;
/// `commitment` is `mean_t ‖z_t − sg(e_t)‖²` and moves the encoder. Their
/// values coincide; only their gradients differ.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VqLoss {
    pub codebook: f64,
    pub commitment: f64,
}

pub fn vq_loss_terms(latents: ArrayView2<f32>, result: &QuantizationResult) -> Result<VqLoss> {
    if latents.dim() != result.quantized.dim() {
        return Err(VcqError::Shape(format!(
            "latents {:?} but quantized {:?}",
            latents.dim(),
            result.quantized.dim()
        )));
    }
    let l = latents.nrows();
    if l == 0 {
        return Ok(VqLoss { codebook: 0.0, commitment: 0.0 });
    }
    let total: f64 = latents
        .axis_iter(Axis(0))
        .zip(result.quantized.axis_iter(Axis(0)))
        .map(|(z, e)| {
            z.iter()
                .zip(e.iter())
                .map(|(&a, &b)| {
                    let diff = a as f64 - b as f64;
                    diff * diff
                })
                .sum::<f64>()
        })
        .sum();
    let mean = total / l as f64;
    Ok(VqLoss { codebook: mean, commitment: mean })
}

/// Parameters for [`fit_codebook`].
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub k_max: usize,
    pub epochs: usize,
    pub decay: f64,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig { k_max: 256, epochs: 20, decay: 0.99, seed: 0 }
    }
}

/// Sequences per partial-statistics shard. Fixed so that the merge order,
/// and hence every floating-point sum, is the same for any thread count.
const SHARD: usize = 32;

struct EpochStats {
    counts: Vec<u64>,
    sums: Vec<f64>,
}

impl EpochStats {
    fn zeros(k: usize, d: usize) -> Self {
        EpochStats { counts: vec![0; k], sums: vec![0.0; k * d] }
    }

    fn merge(&mut self, other: &EpochStats) {
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        self.sums.iter_mut().zip(&other.sums).for_each(|(a, b)| *a += b);
    }
}

/// EMA k-means with prefix-constrained assignment.
///
/// Entries start as randomly drawn latents. Each epoch assigns every latent
/// at position `t` to its nearest entry among the first `K_t`, then moves
/// each entry to the ratio of exponentially averaged assignment sums and
/// counts. Entries with no assignment over a whole epoch are re-drawn from
/// latents at positions that can reach them. Deterministic for a fixed
/// seed and independent of the execution mode.
pub fn fit_codebook(
    corpus: &[Array2<f32>],
    schedule: &Schedule,
    dim: usize,
    config: &FitConfig,
    exec: Execution,
) -> Result<Codebook> {
    let FitConfig { k_max, epochs, decay, seed } = *config;
    if corpus.is_empty() {
        return Err(VcqError::Input("latent corpus is empty".into()));
    }
    if !(decay > 0.0 && decay < 1.0) {
        return Err(VcqError::Config(format!("decay must lie in (0, 1), got {decay}")));
    }
    if dim == 0 || k_max == 0 {
        return Err(VcqError::Config("codebook dimension and size must be positive".into()));
    }
    if schedule.k_max() as usize > k_max {
        return Err(VcqError::Config(format!(
            "schedule reaches K = {} beyond codebook size {k_max}",
            schedule.k_max()
        )));
    }
    let l = schedule.length();
    for (i, x) in corpus.iter().enumerate() {
        if x.dim() != (l, dim) {
            return Err(VcqError::Shape(format!(
                "latent matrix {i} is {:?}, expected ({l}, {dim})",
                x.dim()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(VcqError::Input(format!("latent matrix {i} has non-finite values")));
        }
    }
    let sizes: Vec<usize> = schedule.sizes().into_iter().map(|k| k as usize).collect();
    // Entry k is reachable from positions first_reach[k]..L.
    let first_reach: Vec<Option<usize>> =
        (0..k_max).map(|k| sizes.iter().position(|&s| s > k)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |rng: &mut ChaCha8Rng, from: usize| -> Vec<f32> {
        let seq = rng.random_range(0..corpus.len());
        let t = rng.random_range(from..l);
        corpus[seq].row(t).to_vec()
    };

    let mut entries = Array2::<f32>::zeros((k_max, dim));
    for (k, reach) in first_reach.iter().enumerate() {
        let v = draw(&mut rng, reach.unwrap_or(0));
        entries.row_mut(k).iter_mut().zip(&v).for_each(|(e, &x)| *e = x);
    }
    let mut codebook = Codebook::new(entries)?;
    let mut ema_count = vec![0f64; k_max];
    let mut ema_sum = vec![0f64; k_max * dim];

    for _ in 0..epochs {
        let partials = exec.map_chunks(corpus, SHARD, |shard| {
            let mut stats = EpochStats::zeros(k_max, dim);
            for seq in shard {
                let data = seq.as_standard_layout();
                let flat = data.as_slice().expect("standard layout");
                for (t, z) in flat.chunks_exact(dim).enumerate() {
                    let (k, _) = nearest_in_prefix(z, &codebook, sizes[t]);
                    stats.counts[k] += 1;
                    stats.sums[k * dim..(k + 1) * dim]
                        .iter_mut()
                        .zip(z)
                        .for_each(|(s, &x)| *s += x as f64);
                }
            }
            stats
        });
        let mut stats = EpochStats::zeros(k_max, dim);
        for p in &partials {
            stats.merge(p);
        }

        let mut entries = codebook.entries.clone();
        for k in 0..k_max {
            let n = stats.counts[k];
            let sum = &mut ema_sum[k * dim..(k + 1) * dim];
            if n > 0 {
                ema_count[k] = decay * ema_count[k] + (1.0 - decay) * n as f64;
                for (s, &x) in sum.iter_mut().zip(&stats.sums[k * dim..(k + 1) * dim]) {
                    *s = decay * *s + (1.0 - decay) * x;
                }
                let count = ema_count[k];
                entries.row_mut(k).iter_mut().zip(sum.iter()).for_each(|(e, &s)| {
                    *e = (s / count) as f32;
                });
            } else if let Some(from) = first_reach[k] {
                let v = draw(&mut rng, from);
                entries.row_mut(k).iter_mut().zip(&v).for_each(|(e, &x)| *e = x);
                ema_count[k] = 0.0;
                sum.fill(0.0);
            }
        }
        codebook = Codebook::new(entries)?;
    }
    Ok(codebook)
}

/// Per-position fraction of the candidate set observed in a corpus:
/// distinct tokens at `t` divided by `K_t`.
pub fn utilization_profile(corpus: &TokenCorpus, schedule: &Schedule) -> Result<Vec<f64>> {
    corpus.check_schedule(schedule)?;
    let sizes = schedule.sizes();
    let mut seen = Vec::new();
    Ok((0..corpus.length())
        .map(|t| {
            let k = sizes[t] as usize;
            seen.clear();
            seen.resize(k, false);
            let mut distinct = 0usize;
            for i in 0..corpus.n_samples() {
                let x = corpus.token(i, t) as usize;
                if !seen[x] {
                    seen[x] = true;
                    distinct += 1;
                }
            }
            distinct as f64 / k as f64
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest, Strategy};

    fn pseudo_random(seed: u64, k: usize, d: usize) -> Array2<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((k, d), |_| rng.random_range(-1.0f32..1.0))
    }

    fn brute_force(z: &[f32], cb: &Codebook, k_t: usize) -> (u32, f64) {
        let mut dists: Vec<(f64, usize)> =
            (0..k_t).map(|i| (squared_distance(z, cb.row(i)), i)).collect();
        dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
        (dists[0].1 as u32, dists[0].0)
    }

    #[test]
    fn exact_match_and_single_candidate() {
        let cb = Codebook::new(pseudo_random(1, 16, 4)).unwrap();
        let z = cb.row(5).to_vec();
        let n = quantize_position(&z, &cb, 8).unwrap();
        assert_eq!((n.token, n.distance), (5, 0.0));
        assert_eq!(n.entry, cb.row(5));
        let other = [3.0f32, -1.0, 0.0, 2.0];
        let one = quantize_position(&other, &cb, 1).unwrap();
        assert_eq!(one.token, 0);
        assert_eq!(one.distance, squared_distance(&other, cb.row(0)));
    }

    #[test]
    fn prefix_of_seven_matches_scan() {
        let cb = Codebook::new(pseudo_random(2, 16, 3)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let z: Vec<f32> = (0..3).map(|_| rng.random_range(-1.5f32..1.5)).collect();
            let n = quantize_position(&z, &cb, 7).unwrap();
            assert_eq!((n.token, n.distance), brute_force(&z, &cb, 7));
        }
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let cb = Codebook::new(array![[1.0f32, 0.0], [0.0, 1.0], [1.0, 0.0]]).unwrap();
        assert_eq!(quantize_position(&[1.0, 0.0], &cb, 3).unwrap().token, 0);
        // Equidistant from rows 0 and 1.
        assert_eq!(quantize_position(&[0.5, 0.5], &cb, 3).unwrap().token, 0);
    }

    #[test]
    fn position_errors() {
        let cb = Codebook::new(pseudo_random(4, 4, 2)).unwrap();
        assert!(matches!(quantize_position(&[0.0, 0.0], &cb, 0), Err(VcqError::Range(_))));
        assert!(matches!(quantize_position(&[0.0, 0.0], &cb, 5), Err(VcqError::Range(_))));
        assert!(matches!(quantize_position(&[f32::NAN, 0.0], &cb, 2), Err(VcqError::Input(_))));
        assert!(matches!(quantize_position(&[0.0], &cb, 2), Err(VcqError::Shape(_))));
    }

    #[test]
    fn sequence_of_row_zero() {
        let cb = Codebook::new(pseudo_random(5, 8, 3)).unwrap();
        let s = Schedule::cosine(2, 8, 6).unwrap();
        let latents = Array2::from_shape_fn((6, 3), |(_, j)| cb.row(0)[j]);
        let r = quantize_sequence(latents.view(), &s, &cb).unwrap();
        assert_eq!(r.tokens, vec![0; 6]);
        assert!(r.distances.iter().all(|&d| d == 0.0));
        assert!(r.residuals.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn sequence_shape_errors() {
        let cb = Codebook::new(pseudo_random(5, 8, 3)).unwrap();
        let s = Schedule::linear(2, 8, 6).unwrap();
        let wrong_rows = Array2::<f32>::zeros((5, 3));
        assert!(matches!(quantize_sequence(wrong_rows.view(), &s, &cb), Err(VcqError::Shape(_))));
        let too_big = Schedule::linear(2, 9, 6).unwrap();
        let ok_rows = Array2::<f32>::zeros((6, 3));
        assert!(matches!(quantize_sequence(ok_rows.view(), &too_big, &cb), Err(VcqError::Shape(_))));
    }

    #[test]
    fn constant_schedule_is_plain_vq() {
        let cb = Codebook::new(pseudo_random(6, 32, 4)).unwrap();
        let s = Schedule::constant(32, 10).unwrap();
        let x = pseudo_random(7, 10, 4);
        let r = quantize_sequence(x.view(), &s, &cb).unwrap();
        for t in 0..10 {
            let z = x.row(t).to_vec();
            assert_eq!(r.tokens[t], brute_force(&z, &cb, 32).0);
        }
    }

    #[test]
    fn straight_through_residuals() {
        let cb = Codebook::new(pseudo_random(8, 16, 4)).unwrap();
        let s = Schedule::linear(2, 16, 9).unwrap();
        let x = pseudo_random(9, 9, 4);
        let r = quantize_sequence(x.view(), &s, &cb).unwrap();
        let rebuilt = &x + &r.residuals;
        for (a, b) in rebuilt.iter().zip(r.quantized.iter()) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn decode_roundtrip_and_errors() {
        let cb = Codebook::new(pseudo_random(10, 16, 4)).unwrap();
        let s = Schedule::cosine(2, 16, 12).unwrap();
        let x = pseudo_random(11, 12, 4);
        let r = quantize_sequence(x.view(), &s, &cb).unwrap();
        assert_eq!(decode(&r.tokens, &cb).unwrap(), r.quantized);
        let zeros = decode(&[0, 0, 0], &cb).unwrap();
        for row in zeros.axis_iter(Axis(0)) {
            assert_eq!(row.as_slice().unwrap(), cb.row(0));
        }
        assert!(matches!(decode(&[16], &cb), Err(VcqError::Range(_))));
    }

    #[test]
    fn loss_terms() {
        let cb = Codebook::new(array![[0.0f32, 0.0], [5.0, 5.0]]).unwrap();
        let s = Schedule::constant(1, 1).unwrap();
        let z = array![[1.0f32, 0.0]];
        let r = quantize_sequence(z.view(), &s, &cb).unwrap();
        assert_eq!(vq_loss_terms(z.view(), &r).unwrap(), VqLoss { codebook: 1.0, commitment: 1.0 });

        let exact = array![[0.0f32, 0.0]];
        let r0 = quantize_sequence(exact.view(), &s, &cb).unwrap();
        assert_eq!(vq_loss_terms(exact.view(), &r0).unwrap(), VqLoss { codebook: 0.0, commitment: 0.0 });

        let big = Codebook::new(pseudo_random(12, 16, 4)).unwrap();
        let sched = Schedule::linear(2, 16, 20).unwrap();
        let x = pseudo_random(13, 20, 4);
        let r = quantize_sequence(x.view(), &sched, &big).unwrap();
        let loss = vq_loss_terms(x.view(), &r).unwrap();
        let mean = r.distances.iter().sum::<f64>() / 20.0;
        assert!((loss.codebook - mean).abs() < 1e-9);
        assert!((loss.commitment - mean).abs() < 1e-9);
        assert!(vq_loss_terms(z.view(), &r).is_err());
    }

    #[test]
    fn fit_single_cluster() {
        let v = [0.25f32, -1.5, 3.0];
        let corpus: Vec<Array2<f32>> =
            (0..5).map(|_| Array2::from_shape_fn((4, 3), |(_, j)| v[j])).collect();
        let s = Schedule::constant(1, 4).unwrap();
        let cfg = FitConfig { k_max: 4, epochs: 10, decay: 0.99, seed: 3 };
        let cb = fit_codebook(&corpus, &s, 3, &cfg, Execution::default()).unwrap();
        for (a, b) in cb.row(0).iter().zip(&v) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    /// Exact 2-means by enumerating every bipartition.
    fn best_two_means(points: &[[f64; 2]]) -> [[f64; 2]; 2] {
        let n = points.len();
        let mut best = (f64::INFINITY, [[0.0; 2]; 2]);
        for mask in 1u32..(1 << (n - 1)) {
            let mut sums = [[0.0; 2]; 2];
            let mut counts = [0usize; 2];
            for (i, p) in points.iter().enumerate() {
                let g = ((mask >> i) & 1) as usize;
                counts[g] += 1;
                sums[g][0] += p[0];
                sums[g][1] += p[1];
            }
            if counts.contains(&0) {
                continue;
            }
            let means = [0, 1].map(|g| [sums[g][0] / counts[g] as f64, sums[g][1] / counts[g] as f64]);
            let cost: f64 = points
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    let m = means[((mask >> i) & 1) as usize];
                    (p[0] - m[0]).powi(2) + (p[1] - m[1]).powi(2)
                })
                .sum();
            if cost < best.0 {
                best = (cost, means);
            }
        }
        best.1
    }

    #[test]
    fn fit_two_clusters_matches_exact_two_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let points: Vec<[f64; 2]> = (0..12)
            .map(|i| {
                let c = if i % 2 == 0 { -10.0 } else { 10.0 };
                [c + rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]
            })
            .map(|p: [f64; 2]| [p[0] as f32 as f64, p[1] as f32 as f64])
            .collect();
        let expected = best_two_means(&points);
        // One position per sequence keeps every latent in the candidate range.
        let corpus: Vec<Array2<f32>> =
            points.iter().map(|p| array![[p[0] as f32, p[1] as f32]]).collect();
        let s = Schedule::constant(2, 1).unwrap();
        for seed in 0..5 {
            let cfg = FitConfig { k_max: 2, epochs: 30, decay: 0.5, seed };
            let cb = fit_codebook(&corpus, &s, 2, &cfg, Execution::default()).unwrap();
            let mut got: Vec<[f64; 2]> =
                (0..2).map(|k| [cb.row(k)[0] as f64, cb.row(k)[1] as f64]).collect();
            got.sort_by(|a, b| a[0].partial_cmp(&b[0]).unwrap());
            let mut want = expected.to_vec();
            want.sort_by(|a, b| a[0].partial_cmp(&b[0]).unwrap());
            for (g, w) in got.iter().zip(&want) {
                assert!((g[0] - w[0]).abs() < 1e-4 && (g[1] - w[1]).abs() < 1e-4, "seed {seed}: {got:?} vs {want:?}");
            }
        }
    }

    #[test]
    fn fit_is_deterministic_across_execution_modes() {
        let corpus: Vec<Array2<f32>> = (0..70).map(|i| pseudo_random(100 + i, 8, 3)).collect();
        let s = Schedule::cosine(2, 16, 8).unwrap();
        let cfg = FitConfig { k_max: 16, epochs: 4, decay: 0.9, seed: 7 };
        let a = fit_codebook(&corpus, &s, 3, &cfg, Execution::Sequential).unwrap();
        let b = fit_codebook(&corpus, &s, 3, &cfg, Execution::Sequential).unwrap();
        let c = fit_codebook(&corpus, &s, 3, &cfg, Execution::default()).unwrap();
        let bytes = |cb: &Codebook| {
            let mut buf = Vec::new();
            crate::format::write_codebook(&mut buf, cb).unwrap();
            buf
        };
        assert_eq!(bytes(&a), bytes(&b));
        assert_eq!(bytes(&a), bytes(&c));
    }

    #[test]
    fn fit_errors() {
        let s = Schedule::constant(2, 3).unwrap();
        let cfg = FitConfig { k_max: 2, ..FitConfig::default() };
        assert!(matches!(fit_codebook(&[], &s, 2, &cfg, Execution::Sequential), Err(VcqError::Input(_))));
        let wrong = vec![Array2::<f32>::zeros((3, 4))];
        assert!(matches!(fit_codebook(&wrong, &s, 2, &cfg, Execution::Sequential), Err(VcqError::Shape(_))));
        let ok = vec![Array2::<f32>::zeros((3, 2))];
        let bad_decay = FitConfig { decay: 1.0, ..cfg.clone() };
        assert!(matches!(fit_codebook(&ok, &s, 2, &bad_decay, Execution::Sequential), Err(VcqError::Config(_))));
    }

    #[test]
    fn utilization_examples() {
        let zeros = TokenCorpus::new(3, 16, vec![0; 12], None).unwrap();
        let s = Schedule::constant(16, 3).unwrap();
        assert_eq!(utilization_profile(&zeros, &s).unwrap(), vec![1.0 / 16.0; 3]);

        let s2 = Schedule::linear(2, 4, 2).unwrap();
        let c = TokenCorpus::from_rows(&[[0u32, 3], [1, 3]], 4, None).unwrap();
        assert_eq!(utilization_profile(&c, &s2).unwrap(), vec![1.0, 0.25]);

        let bad = TokenCorpus::from_rows(&[[2u32, 0]], 4, None).unwrap();
        assert!(matches!(
            utilization_profile(&bad, &s2),
            Err(VcqError::CorpusMismatch { position: 0, token: 2, k_t: 2 })
        ));
    }

    #[test]
    fn utilization_matches_set_count() {
        let s = Schedule::cosine(2, 64, 16).unwrap();
        let sizes = s.sizes();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rows: Vec<Vec<u32>> = (0..200)
            .map(|_| sizes.iter().map(|&k| rng.random_range(0..k)).collect())
            .collect();
        let c = TokenCorpus::from_rows(&rows, 64, None).unwrap();
        let u = utilization_profile(&c, &s).unwrap();
        for t in 0..16 {
            let distinct: std::collections::BTreeSet<u32> = rows.iter().map(|r| r[t]).collect();
            assert_eq!(u[t], distinct.len() as f64 / sizes[t] as f64);
            assert!((0.0..=1.0).contains(&u[t]));
        }
    }

    fn schedule_strategy() -> impl Strategy<Value = Schedule> {
        (1u32..20, 0u32..40, 1usize..12, 0usize..4, 0.2f64..4.0).prop_map(|(k_min, extra, l, fam, a)| {
            let k_max = k_min + extra;
            match fam {
                0 => Schedule::constant(k_max, l),
                1 => Schedule::linear(k_min, k_max, l),
                2 => Schedule::cosine(k_min, k_max, l),
                _ => Schedule::power(k_min, k_max, l, a),
            }
            .unwrap()
        })
    }

    proptest! {
        #[test]
        fn prefix_restriction_and_optimality(s in schedule_strategy(), seed in any::<u64>(), d in 1usize..5) {
            let k = s.k_max() as usize;
            let cb = Codebook::new(pseudo_random(seed, k, d)).unwrap();
            let x = pseudo_random(seed ^ 0x9e37, s.length(), d);
            let r = quantize_sequence(x.view(), &s, &cb).unwrap();
            for (t, &k_t) in s.sizes().iter().enumerate() {
                prop_assert!(r.tokens[t] < k_t);
                let z = x.row(t).to_vec();
                for i in 0..k_t as usize {
                    prop_assert!(squared_distance(&z, cb.row(i)) >= r.distances[t]);
                }
                prop_assert_eq!(r.distances[t], squared_distance(&z, cb.row(r.tokens[t] as usize)));
            }
        }

        #[test]
        fn larger_candidate_sets_never_hurt(seed in any::<u64>(), a in 1usize..32, b in 1usize..32) {
            let cb = Codebook::new(pseudo_random(seed, 32, 3)).unwrap();
            let z = pseudo_random(seed.wrapping_add(1), 1, 3).row(0).to_vec();
            let (lo, hi) = (a.min(b), a.max(b));
            let d_lo = quantize_position(&z, &cb, lo).unwrap().distance;
            let d_hi = quantize_position(&z, &cb, hi).unwrap().distance;
            prop_assert!(d_lo >= d_hi);
        }
    }
}
