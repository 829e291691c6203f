//! Position → codebook-size schedules and the capacity arithmetic built on
//! them.
//!
//! A schedule maps token position `t ∈ [0, L)` to a codebook size
//! `K_t = K_min + (K_max − K_min) · f(t / (L − 1))` with `f(0) = 0` and
//! `f(1) = 1`. Sizes are rounded half-up and clamped to `[K_min, K_max]`.
//!
//! The cumulative capacity `I(t) = Σ_{i<t} log2 K_i` is the number of bits
//! the first `t` positions can carry; once it reaches `log2 N` for a corpus
//! of `N` samples, every later conditional distribution on that corpus is a
//! point mass.

use std::f64::consts::PI;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use num_bigint::BigUint;
use serde::{Deserialize, Serialize};

use crate::{Result, VcqError};

/// Default pixel basis for bits-per-pixel figures (256 × 256 images).
pub const DEFAULT_PIXEL_COUNT: u64 = 256 * 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Constant,
    Linear,
    Cosine,
    Power,
}

impl Family {
    fn shape(self, tau: f64, alpha: f64) -> f64 {
        match self {
            Family::Constant => 1.0,
            Family::Linear => tau,
            Family::Cosine => 1.0 - (PI * tau / 2.0).cos(),
            Family::Power => tau.powf(alpha),
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Family::Constant => "constant",
            Family::Linear => "linear",
            Family::Cosine => "cosine",
            Family::Power => "power",
        };
        f.write_str(name)
    }
}

impl FromStr for Family {
    type Err = VcqError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Family::Constant),
            "linear" => Ok(Family::Linear),
            "cosine" => Ok(Family::Cosine),
            "power" => Ok(Family::Power),
            other => Err(VcqError::Config(format!("unknown schedule family {other:?}"))),
        }
    }
}

/// Serialized form of a [`Schedule`]; validated on conversion.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub family: Family,
    pub k_min: u32,
    pub k_max: u32,
    pub length: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
}

/// A validated codebook-size schedule.
///
/// The constant family ignores `k_min` when evaluating and returns `k_max`
/// everywhere.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleConfig", into = "ScheduleConfig")]
pub struct Schedule {
    family: Family,
    k_min: u32,
    k_max: u32,
    length: usize,
    alpha: Option<f64>,
}

impl TryFrom<ScheduleConfig> for Schedule {
    type Error = VcqError;

    fn try_from(c: ScheduleConfig) -> Result<Self> {
        Schedule::new(c.family, c.k_min, c.k_max, c.length, c.alpha)
    }
}

impl From<Schedule> for ScheduleConfig {
    fn from(s: Schedule) -> Self {
        ScheduleConfig {
            family: s.family,
            k_min: s.k_min,
            k_max: s.k_max,
            length: s.length,
            alpha: s.alpha,
        }
    }
}

impl Schedule {
    pub fn new(
        family: Family,
        k_min: u32,
        k_max: u32,
        length: usize,
        alpha: Option<f64>,
    ) -> Result<Self> {
        if k_min == 0 {
            return Err(VcqError::Config("k_min must be at least 1".into()));
        }
        if k_min > k_max {
            return Err(VcqError::Config(format!("k_min {k_min} exceeds k_max {k_max}")));
        }
        if length == 0 {
            return Err(VcqError::Config("schedule length must be at least 1".into()));
        }
        let alpha = match (family, alpha) {
            (Family::Power, Some(a)) if a.is_finite() && a > 0.0 => Some(a),
            (Family::Power, Some(a)) => {
                return Err(VcqError::Config(format!("power exponent must be positive, got {a}")))
            }
            (Family::Power, None) => {
                return Err(VcqError::Config("power family requires alpha".into()))
            }
            (_, _) => None,
        };
        Ok(Schedule { family, k_min, k_max, length, alpha })
    }

    pub fn constant(k: u32, length: usize) -> Result<Self> {
        Self::new(Family::Constant, k, k, length, None)
    }

    pub fn linear(k_min: u32, k_max: u32, length: usize) -> Result<Self> {
        Self::new(Family::Linear, k_min, k_max, length, None)
    }

    pub fn cosine(k_min: u32, k_max: u32, length: usize) -> Result<Self> {
        Self::new(Family::Cosine, k_min, k_max, length, None)
    }

    pub fn power(k_min: u32, k_max: u32, length: usize, alpha: f64) -> Result<Self> {
        Self::new(Family::Power, k_min, k_max, length, Some(alpha))
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn k_min(&self) -> u32 {
        self.k_min
    }

    pub fn k_max(&self) -> u32 {
        self.k_max
    }

    /// Number of token positions `L`.
    pub fn length(&self) -> usize {
        self.length
    }

    pub fn alpha(&self) -> Option<f64> {
        self.alpha
    }

    /// Smallest size the schedule actually produces (`k_max` for constant).
    pub fn effective_k_min(&self) -> u32 {
        match self.family {
            Family::Constant => self.k_max,
            _ => self.k_min,
        }
    }

    pub fn is_constant(&self) -> bool {
        self.effective_k_min() == self.k_max
    }

    /// Codebook size at position `t`.
    pub fn codebook_size_at(&self, t: usize) -> Result<u32> {
        if t >= self.length {
            return Err(VcqError::Range(format!(
                "position {t} outside schedule of length {}",
                self.length
            )));
        }
        Ok(self.size_unchecked(t))
    }

    fn size_unchecked(&self, t: usize) -> u32 {
        if self.family == Family::Constant {
            return self.k_max;
        }
        // A single position gets the whole codebook.
        let tau = if self.length == 1 { 1.0 } else { t as f64 / (self.length - 1) as f64 };
        let f = self.family.shape(tau, self.alpha.unwrap_or(1.0));
        let span = (self.k_max - self.k_min) as f64;
        let raw = self.k_min as f64 + span * f;
        let rounded = (raw + 0.5).floor();
        (rounded as u32).clamp(self.k_min, self.k_max)
    }

    /// All `K_t` for `t ∈ [0, L)`.
    pub fn sizes(&self) -> Vec<u32> {
        (0..self.length).map(|t| self.size_unchecked(t)).collect()
    }

    /// `I(t) = Σ_{i<t} log2 K_i` in bits, for `0 ≤ t ≤ L`.
    pub fn cumulative_capacity(&self, t: usize) -> Result<f64> {
        if t > self.length {
            return Err(VcqError::Range(format!(
                "position count {t} exceeds schedule length {}",
                self.length
            )));
        }
        Ok((0..t).map(|i| (self.size_unchecked(i) as f64).log2()).sum())
    }

    /// `I(t)` for every `t ∈ [0, L]` (length `L + 1`).
    pub fn cumulative_curve(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.length + 1);
        let mut acc = 0.0;
        out.push(acc);
        for k in self.sizes() {
            acc += (k as f64).log2();
            out.push(acc);
        }
        out
    }
}

/// `max(0, log2 N − I(t))` for each position `t ∈ [0, L)`.
pub fn remaining_budget(schedule: &Schedule, n_samples: u64) -> Result<Vec<f64>> {
    if n_samples == 0 {
        return Err(VcqError::Input("n_samples must be at least 1".into()));
    }
    let budget = (n_samples as f64).log2();
    let curve = schedule.cumulative_curve();
    Ok(curve[..schedule.length()].iter().map(|&i| (budget - i).max(0.0)).collect())
}

/// Cliff position for a uniform codebook: `⌈log2 N / log2 K⌉`.
///
/// Evaluated exactly as the smallest `t` with `K^t ≥ N`, which agrees with
/// the logarithmic form without rounding trouble at exact powers of `K`.
pub fn tstar_uniform(n_samples: impl Into<BigUint>, k: u64) -> Result<u32> {
    let n: BigUint = n_samples.into();
    if k < 2 {
        return Err(VcqError::Config(format!("codebook size must be at least 2, got {k}")));
    }
    if n == BigUint::ZERO {
        return Err(VcqError::Input("n_samples must be at least 1".into()));
    }
    let mut t = 0u32;
    let mut reach = BigUint::from(1u32);
    while reach < n {
        reach *= k;
        t += 1;
    }
    Ok(t)
}

/// Minimum corpus size `K^(m−1)` for a uniform codebook to reach cliff
/// position `m`.
pub fn data_threshold(k: u64, m: u32) -> Result<BigUint> {
    if m == 0 {
        return Err(VcqError::Input("target cliff position must be at least 1".into()));
    }
    Ok(BigUint::from(k).pow(m - 1))
}

/// Smallest `t` with `I(t) ≥ log2 N`, or `L + 1` when the whole sequence
/// cannot hold `log2 N` bits.
///
/// Compared exactly as `Π_{i<t} K_i ≥ N`.
pub fn tstar_vcq(schedule: &Schedule, n_samples: u64) -> Result<usize> {
    if n_samples == 0 {
        return Err(VcqError::Input("n_samples must be at least 1".into()));
    }
    let target = n_samples as u128;
    let mut product: u128 = 1;
    for (t, k) in schedule.sizes().into_iter().enumerate() {
        if product >= target {
            return Ok(t);
        }
        product = product.saturating_mul(k as u128);
    }
    if product >= target {
        Ok(schedule.length())
    } else {
        Ok(schedule.length() + 1)
    }
}

/// Per-position capacity curve plus the summary figures of a schedule.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CapacityReport {
    pub n_samples: u64,
    pub pixel_count: u64,
    #[serde(skip)]
    pub sizes: Vec<u32>,
    #[serde(skip)]
    pub bits_per_position: Vec<f64>,
    /// `I(t)` for `t ∈ [0, L]`.
    #[serde(skip)]
    pub cumulative: Vec<f64>,
    #[serde(skip)]
    pub remaining_budget: Vec<f64>,
    pub mean_codebook: f64,
    pub total_bits: f64,
    pub bpp: f64,
    pub tstar_vcq: usize,
}

impl CapacityReport {
    /// Writes `t,K_t,bits,cumulative_bits,remaining_budget`, where
    /// `cumulative_bits` is `I(t)`, the capacity spent before position `t`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "K_t", "bits", "cumulative_bits", "remaining_budget"])?;
        for t in 0..self.sizes.len() {
            w.write_record(&[
                t.to_string(),
                self.sizes[t].to_string(),
                self.bits_per_position[t].to_string(),
                self.cumulative[t].to_string(),
                self.remaining_budget[t].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn capacity_report(
    schedule: &Schedule,
    n_samples: u64,
    pixel_count: u64,
) -> Result<CapacityReport> {
    if pixel_count == 0 {
        return Err(VcqError::Input("pixel_count must be at least 1".into()));
    }
    let sizes = schedule.sizes();
    let bits_per_position: Vec<f64> = sizes.iter().map(|&k| (k as f64).log2()).collect();
    let cumulative = schedule.cumulative_curve();
    let total_bits = cumulative[schedule.length()];
    let mean_codebook =
        sizes.iter().map(|&k| k as u64).sum::<u64>() as f64 / sizes.len() as f64;
    Ok(CapacityReport {
        n_samples,
        pixel_count,
        remaining_budget: remaining_budget(schedule, n_samples)?,
        tstar_vcq: tstar_vcq(schedule, n_samples)?,
        sizes,
        bits_per_position,
        cumulative,
        mean_codebook,
        total_bits,
        bpp: total_bits / pixel_count as f64,
    })
}

/// The six schedule configurations of the reference comparison table, all
/// over 256 positions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Constant16k,
    Constant8k,
    Linear,
    Cosine,
    Power2_5,
    CosineL,
}

impl Preset {
    pub const ALL: [Preset; 6] = [
        Preset::Constant16k,
        Preset::Constant8k,
        Preset::Linear,
        Preset::Cosine,
        Preset::Power2_5,
        Preset::CosineL,
    ];

    pub const LENGTH: usize = 256;

    pub fn name(self) -> &'static str {
        match self {
            Preset::Constant16k => "constant16k",
            Preset::Constant8k => "constant8k",
            Preset::Linear => "linear",
            Preset::Cosine => "cosine",
            Preset::Power2_5 => "power2.5",
            Preset::CosineL => "cosine-l",
        }
    }

    pub fn schedule(self) -> Schedule {
        let l = Self::LENGTH;
        let s = match self {
            Preset::Constant16k => Schedule::constant(16384, l),
            Preset::Constant8k => Schedule::constant(8192, l),
            Preset::Linear => Schedule::linear(2, 16384, l),
            Preset::Cosine => Schedule::cosine(2, 16384, l),
            Preset::Power2_5 => Schedule::power(2, 16384, l, 2.5),
            Preset::CosineL => Schedule::cosine(2, 11264, l),
        };
        s.expect("preset parameters are valid")
    }
}

impl FromStr for Preset {
    type Err = VcqError;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| VcqError::Config(format!("unknown preset {s:?}")))
    }
}
