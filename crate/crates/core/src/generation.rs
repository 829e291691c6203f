//! Count-based autoregressive modelling over schedule-restricted tokens,
//! with codebook-size-aware classifier-free guidance.
//!
//! The guidance scale at position `t` is
//! `s_t = s · ramp(t) · (log2 K_t − log2 K_min) / (log2 K_max − log2 K_min)`,
//! so positions at the smallest codebook get no guidance and positions at
//! the largest get the full base scale. On a constant schedule the size
//! factor is exactly 1 and the policy reduces to plain CFG.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Execution, Result, Schedule, TokenCorpus, VcqError};

/// Logit value of tokens outside the candidate set. Never enters a softmax.
pub const MASKED: f64 = f64::NEG_INFINITY;

#[inline]
pub fn is_masked(x: f64) -> bool {
    x == MASKED
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ramp {
    #[default]
    None,
    /// `(1 − cos(π · τ^p)) / 2` with `τ = t / (L − 1)`.
    Cosine,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct PolicyConfig {
    scale: f64,
    ramp: Ramp,
    power: f64,
    size_aware: bool,
    temperature: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig { scale: 0.0, ramp: Ramp::None, power: 1.0, size_aware: true, temperature: 1.0 }
    }
}

/// Guidance and temperature settings for sampling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PolicyConfig", into = "PolicyConfig")]
pub struct GuidancePolicy {
    scale: f64,
    ramp: Ramp,
    power: f64,
    size_aware: bool,
    temperature: f64,
}

impl TryFrom<PolicyConfig> for GuidancePolicy {
    type Error = VcqError;

    fn try_from(c: PolicyConfig) -> Result<Self> {
        GuidancePolicy::new(c.scale, c.ramp, c.power, c.size_aware, c.temperature)
    }
}

impl From<GuidancePolicy> for PolicyConfig {
    fn from(p: GuidancePolicy) -> Self {
        PolicyConfig {
            scale: p.scale,
            ramp: p.ramp,
            power: p.power,
            size_aware: p.size_aware,
            temperature: p.temperature,
        }
    }
}

impl Default for GuidancePolicy {
    fn default() -> Self {
        PolicyConfig::default().try_into().expect("default policy is valid")
    }
}

impl GuidancePolicy {
    pub fn new(scale: f64, ramp: Ramp, power: f64, size_aware: bool, temperature: f64) -> Result<Self> {
        if !(scale.is_finite() && scale >= 0.0) {
            return Err(VcqError::Config(format!("guidance scale must be >= 0, got {scale}")));
        }
        if !(power.is_finite() && power > 0.0) {
            return Err(VcqError::Config(format!("ramp power must be > 0, got {power}")));
        }
        if !(temperature.is_finite() && temperature > 0.0) {
            return Err(VcqError::Config(format!("temperature must be > 0, got {temperature}")));
        }
        Ok(GuidancePolicy { scale, ramp, power, size_aware, temperature })
    }

    /// Standard CFG with a constant scale.
    pub fn plain(scale: f64, temperature: f64) -> Result<Self> {
        Self::new(scale, Ramp::None, 1.0, false, temperature)
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn ramp(&self) -> Ramp {
        self.ramp
    }

    pub fn power(&self) -> f64 {
        self.power
    }

    pub fn size_aware(&self) -> bool {
        self.size_aware
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn with_temperature(mut self, temperature: f64) -> Result<Self> {
        self.temperature = temperature;
        Self::new(self.scale, self.ramp, self.power, self.size_aware, self.temperature)
    }

    /// Named inference configurations for the reference tokenizer/AR
    /// pairings. The `-nocfg` variants are the unguided rows.
    pub fn preset(name: &str) -> Result<Self> {
        let (scale, power, size_aware, temperature) = match name {
            "constant16k" => (20.0, 1.5, false, 1.0),
            "constant8k" => (20.0, 2.0, false, 1.0),
            "linear" => (14.0, 1.75, true, 1.0),
            "cosine" => (10.0, 1.5, true, 1.0),
            "power2.5" => (10.0, 1.75, true, 1.0),
            "b-l" => (4.0, 0.75, true, 1.0),
            "b-xl" => (5.0, 0.75, true, 1.0),
            "l-b" | "l-l" => (4.0, 1.25, true, 1.0),
            "l-xl" => (3.0, 1.0, true, 1.0),
            "constant16k-nocfg" | "constant8k-nocfg" | "linear-nocfg" | "cosine-nocfg"
            | "power2.5-nocfg" | "b-l-nocfg" | "b-xl-nocfg" => (0.0, 1.0, true, 0.85),
            "l-b-nocfg" | "l-l-nocfg" => (0.0, 1.0, true, 0.90),
            "l-xl-nocfg" => (0.0, 1.0, true, 0.95),
            other => return Err(VcqError::Config(format!("unknown guidance preset {other:?}"))),
        };
        let ramp = if scale > 0.0 { Ramp::Cosine } else { Ramp::None };
        Self::new(scale, ramp, power, size_aware, temperature)
    }
}

fn ramp_factor(policy: &GuidancePolicy, t: usize, length: usize) -> f64 {
    match policy.ramp {
        Ramp::None => 1.0,
        Ramp::Cosine => {
            let tau = if length <= 1 { 1.0 } else { t as f64 / (length - 1) as f64 };
            (1.0 - (PI * tau.powf(policy.power)).cos()) / 2.0
        }
    }
}

fn size_factor(schedule: &Schedule, k_t: u32) -> f64 {
    let lo = (schedule.effective_k_min() as f64).log2();
    let hi = (schedule.k_max() as f64).log2();
    if hi > lo {
        ((k_t as f64).log2() - lo) / (hi - lo)
    } else {
        1.0
    }
}

/// Guidance scale `s_t` at position `t`.
pub fn size_aware_scale(policy: &GuidancePolicy, schedule: &Schedule, t: usize) -> Result<f64> {
    let k_t = schedule.codebook_size_at(t)?;
    let size = if policy.size_aware { size_factor(schedule, k_t) } else { 1.0 };
    Ok(policy.scale * ramp_factor(policy, t, schedule.length()) * size)
}

/// `(1 + s) · cond − s · uncond`, elementwise; masked in either input stays
/// masked.
pub fn apply_guidance(cond: &[f64], uncond: &[f64], s_t: f64) -> Result<Vec<f64>> {
    if cond.len() != uncond.len() {
        return Err(VcqError::Shape(format!(
            "conditional logits have {} entries, unconditional {}",
            cond.len(),
            uncond.len()
        )));
    }
    if cond.iter().chain(uncond).any(|&x| !(x.is_finite() || is_masked(x))) {
        return Err(VcqError::Input("logits must be finite or masked".into()));
    }
    Ok(cond
        .iter()
        .zip(uncond)
        .map(|(&c, &u)| if is_masked(c) || is_masked(u) { MASKED } else { (1.0 + s_t) * c - s_t * u })
        .collect())
}

/// Parameters for [`CountModel::fit`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CountModelConfig {
    /// Longest context, in tokens, that is counted.
    pub max_order: usize,
    /// Laplace constant of the position unigram; also the prior weight each
    /// longer context gives to the next-shorter one.
    pub smoothing: f64,
}

impl Default for CountModelConfig {
    fn default() -> Self {
        CountModelConfig { max_order: 4, smoothing: 0.1 }
    }
}

/// Exact prefix counts per position, pooled and per class.
///
/// Contexts of order `n` at position `t` are the `n` preceding tokens.
/// Orders `1..=max_order` are served by row indices sorted on
/// `(class?, context, next token)`, so a lookup is two binary searches.
///
/// Smoothing is hierarchical. The position unigram is Laplace smoothed over
/// exactly `K_t` outcomes:
/// `P_0(w) = (c_0(w) + α) / (c_0 + α K_t)`. Each longer context that was
/// seen interpolates with the next-shorter estimate:
/// `P_n(w) = (c_n(w) + α P_{n−1}(w)) / (c_n + α)`. Unseen contexts fall
/// back to the shorter estimate unchanged.
#[derive(Clone, Debug, PartialEq)]
pub struct CountModel {
    corpus: TokenCorpus,
    schedule: Schedule,
    sizes: Vec<u32>,
    config: CountModelConfig,
    n_classes: usize,
    unigram: Vec<Vec<u32>>,
    class_unigram: Vec<Vec<u32>>,
    pooled_index: Vec<Vec<Vec<u32>>>,
    class_index: Vec<Vec<Vec<u32>>>,
}

impl CountModel {
    pub fn fit(corpus: &TokenCorpus, schedule: &Schedule, config: &CountModelConfig) -> Result<Self> {
        let labels = corpus
            .labels()
            .ok_or_else(|| VcqError::Input("count model needs a class-labelled corpus".into()))?;
        if !(config.smoothing.is_finite() && config.smoothing > 0.0) {
            return Err(VcqError::Config(format!("smoothing must be > 0, got {}", config.smoothing)));
        }
        corpus.check_schedule(schedule)?;
        let sizes = schedule.sizes();
        let n_classes = labels.iter().max().map_or(0, |&m| m as usize + 1);
        let l = corpus.length();

        let mut unigram = Vec::with_capacity(l);
        let mut class_unigram = Vec::with_capacity(l);
        for (t, &k) in sizes.iter().enumerate() {
            let k = k as usize;
            let mut pooled = vec![0u32; k];
            let mut per_class = vec![0u32; n_classes * k];
            for (i, &c) in labels.iter().enumerate() {
                let x = corpus.token(i, t) as usize;
                pooled[x] += 1;
                per_class[c as usize * k + x] += 1;
            }
            unigram.push(pooled);
            class_unigram.push(per_class);
        }

        let rows: Vec<u32> = (0..corpus.n_samples() as u32).collect();
        let mut pooled_index = Vec::with_capacity(l);
        let mut class_index = Vec::with_capacity(l);
        for t in 0..l {
            let orders = config.max_order.min(t);
            let mut pooled_t = Vec::with_capacity(orders);
            let mut class_t = Vec::with_capacity(orders);
            for n in 1..=orders {
                let window = |i: u32| &corpus.row(i as usize)[t - n..=t];
                let mut p = rows.clone();
                p.sort_by(|&a, &b| window(a).cmp(window(b)));
                let mut c = rows.clone();
                c.sort_by(|&a, &b| {
                    labels[a as usize].cmp(&labels[b as usize]).then_with(|| window(a).cmp(window(b)))
                });
                pooled_t.push(p);
                class_t.push(c);
            }
            pooled_index.push(pooled_t);
            class_index.push(class_t);
        }

        Ok(CountModel {
            corpus: corpus.clone(),
            schedule: schedule.clone(),
            sizes,
            config: config.clone(),
            n_classes,
            unigram,
            class_unigram,
            pooled_index,
            class_index,
        })
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    pub fn config(&self) -> &CountModelConfig {
        &self.config
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    fn check_query(&self, class: Option<u32>, prefix: &[u32]) -> Result<()> {
        if let Some(c) = class {
            if c as usize >= self.n_classes {
                return Err(VcqError::Range(format!("class {c} but the model has {} classes", self.n_classes)));
            }
        }
        if prefix.len() >= self.corpus.length() {
            return Err(VcqError::Shape(format!(
                "prefix of length {} leaves no position in a sequence of length {}",
                prefix.len(),
                self.corpus.length()
            )));
        }
        for (i, (&x, &k)) in prefix.iter().zip(&self.sizes).enumerate() {
            if x >= k {
                return Err(VcqError::Range(format!("prefix token {x} at position {i} but K = {k}")));
            }
        }
        Ok(())
    }

    /// Adds next-token counts for the order-`n` context ending at `t` into
    /// `out`; returns the context total.
    fn accumulate(&self, class: Option<u32>, prefix: &[u32], n: usize, out: &mut [u32]) -> u32 {
        let t = prefix.len();
        let ctx = &prefix[t - n..];
        let labels = self.corpus.labels().expect("fit requires labels");
        let window = |i: u32| &self.corpus.row(i as usize)[t - n..t];
        let (index, key): (&[u32], Box<dyn Fn(u32) -> Ordering>) = match class {
            None => (&self.pooled_index[t][n - 1], Box::new(move |i| window(i).cmp(ctx))),
            Some(c) => (
                &self.class_index[t][n - 1],
                Box::new(move |i| labels[i as usize].cmp(&c).then_with(|| window(i).cmp(ctx))),
            ),
        };
        let lo = index.partition_point(|&i| key(i) == Ordering::Less);
        let hi = lo + index[lo..].partition_point(|&i| key(i) == Ordering::Equal);
        for &i in &index[lo..hi] {
            out[self.corpus.token(i as usize, t) as usize] += 1;
        }
        (hi - lo) as u32
    }

    /// Raw next-token counts for the context of `order` tokens before
    /// position `prefix.len()`; order 0 is the position unigram.
    pub fn context_counts(&self, class: Option<u32>, prefix: &[u32], order: usize) -> Result<Vec<u32>> {
        self.check_query(class, prefix)?;
        let t = prefix.len();
        if order > self.config.max_order.min(t) {
            return Err(VcqError::Range(format!("order {order} not counted at position {t}")));
        }
        let k = self.sizes[t] as usize;
        if order == 0 {
            return Ok(match class {
                None => self.unigram[t].clone(),
                Some(c) => self.class_unigram[t][c as usize * k..(c as usize + 1) * k].to_vec(),
            });
        }
        let mut out = vec![0u32; k];
        self.accumulate(class, prefix, order, &mut out);
        Ok(out)
    }

    fn probabilities(&self, class: Option<u32>, prefix: &[u32]) -> Vec<f64> {
        let t = prefix.len();
        let k = self.sizes[t] as usize;
        let alpha = self.config.smoothing;
        let base: &[u32] = match class {
            None => &self.unigram[t],
            Some(c) => &self.class_unigram[t][c as usize * k..(c as usize + 1) * k],
        };
        let total: u32 = base.iter().sum();
        let denom = total as f64 + alpha * k as f64;
        let mut p: Vec<f64> = base.iter().map(|&c| (c as f64 + alpha) / denom).collect();
        let mut counts = vec![0u32; k];
        for n in 1..=self.config.max_order.min(t) {
            counts.fill(0);
            let total = self.accumulate(class, prefix, n, &mut counts);
            if total == 0 {
                break;
            }
            let denom = total as f64 + alpha;
            for (pw, &c) in p.iter_mut().zip(&counts) {
                *pw = (c as f64 + alpha * *pw) / denom;
            }
        }
        p
    }

    /// Natural-log next-token probabilities at position `t`, length
    /// `k_max`; entries at or beyond `K_t` are [`MASKED`].
    pub fn logits(&self, class: Option<u32>, prefix: &[u32], t: usize) -> Result<Vec<f64>> {
        if prefix.len() != t {
            return Err(VcqError::Shape(format!("prefix of length {} for position {t}", prefix.len())));
        }
        self.check_query(class, prefix)?;
        let mut out = vec![MASKED; self.schedule.k_max() as usize];
        for (o, p) in out.iter_mut().zip(self.probabilities(class, prefix)) {
            *o = p.ln();
        }
        Ok(out)
    }
}

/// Draws from `softmax(logits / temperature)` over unmasked entries.
pub fn sample_token<R: Rng + ?Sized>(logits: &[f64], temperature: f64, rng: &mut R) -> Result<usize> {
    let max = logits
        .iter()
        .filter(|x| !is_masked(**x))
        .fold(f64::NEG_INFINITY, |m, &x| m.max(x / temperature));
    if max == f64::NEG_INFINITY {
        return Err(VcqError::Input("every logit is masked".into()));
    }
    let weights: Vec<f64> = logits
        .iter()
        .map(|&x| if is_masked(x) { 0.0 } else { (x / temperature - max).exp() })
        .collect();
    let total: f64 = weights.iter().sum();
    let target = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            acc += w;
            last = i;
            if acc > target {
                return Ok(i);
            }
        }
    }
    Ok(last)
}

/// Generates one sequence. `class = None` samples the pooled model without
/// guidance.
pub fn sample_sequence<R: Rng + ?Sized>(
    model: &CountModel,
    class: Option<u32>,
    policy: &GuidancePolicy,
    rng: &mut R,
) -> Result<Vec<u32>> {
    let l = model.schedule.length();
    let mut seq = Vec::with_capacity(l);
    for t in 0..l {
        let cond = model.logits(class, &seq, t)?;
        let guided = match class {
            Some(_) => {
                let s_t = size_aware_scale(policy, &model.schedule, t)?;
                if s_t == 0.0 {
                    cond
                } else {
                    let uncond = model.logits(None, &seq, t)?;
                    apply_guidance(&cond, &uncond, s_t)?
                }
            }
            None => cond,
        };
        seq.push(sample_token(&guided, policy.temperature, rng)? as u32);
    }
    Ok(seq)
}

/// Generator for sample `index` under `seed`: one ChaCha stream per sample,
/// so results do not depend on the order samples are produced in.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Samples one sequence per requested class. Labels are kept when every
/// request names a class.
pub fn sample_corpus(
    model: &CountModel,
    classes: &[Option<u32>],
    policy: &GuidancePolicy,
    seed: u64,
    exec: Execution,
) -> Result<TokenCorpus> {
    if classes.is_empty() {
        return Err(VcqError::Input("no samples requested".into()));
    }
    let indexed: Vec<(u64, Option<u32>)> = classes.iter().enumerate().map(|(i, &c)| (i as u64, c)).collect();
    let rows = exec
        .map(&indexed, |&(i, c)| sample_sequence(model, c, policy, &mut sample_rng(seed, i)))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let labels: Option<Vec<u32>> = classes.iter().copied().collect();
    TokenCorpus::from_rows(&rows, model.schedule.k_max(), labels)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MemorizationReport {
    /// Fraction of generated rows found verbatim in training.
    pub exact_match_rate: f64,
    /// Mean over generated rows of the longest prefix shared with any
    /// training row.
    pub mean_longest_prefix: f64,
}

fn common_prefix(a: &[u32], b: &[u32]) -> usize {
    a.iter().zip(b).take_while(|(x, y)| x == y).count()
}

pub fn memorization_report(generated: &TokenCorpus, training: &TokenCorpus) -> Result<MemorizationReport> {
    if generated.length() != training.length() {
        return Err(VcqError::Shape(format!(
            "generated length {} but training length {}",
            generated.length(),
            training.length()
        )));
    }
    let mut sorted: Vec<&[u32]> = training.rows().collect();
    sorted.sort_unstable();
    sorted.dedup();
    let set: HashSet<&[u32]> = sorted.iter().copied().collect();
    let mut matches = 0usize;
    let mut prefix_total = 0usize;
    for row in generated.rows() {
        if set.contains(row) {
            matches += 1;
            prefix_total += row.len();
            continue;
        }
        // The longest shared prefix is with a lexicographic neighbour.
        let at = sorted.partition_point(|r| *r < row);
        let mut best = 0;
        if at > 0 {
            best = best.max(common_prefix(sorted[at - 1], row));
        }
        if at < sorted.len() {
            best = best.max(common_prefix(sorted[at], row));
        }
        prefix_total += best;
    }
    let n = generated.n_samples() as f64;
    Ok(MemorizationReport {
        exact_match_rate: matches as f64 / n,
        mean_longest_prefix: prefix_total as f64 / n,
    })
}
