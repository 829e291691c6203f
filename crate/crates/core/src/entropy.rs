//! Exact empirical conditional entropy of token corpora.
//!
//! `H(x_t | x_<t)` is computed by grouping sequences on their prefix: each
//! group contributes `(n_p / N) · H(next token within p)`. Groups are
//! refined one position at a time by partitioning on the next token;
//! groups that become singletons carry no further entropy and are dropped,
//! so work past the entropy cliff is close to linear in `N`.
//!
//! All logarithms are base 2 and `0 · log 0 = 0`. Positions are 0-based
//! everywhere except [`prop1_bound`], whose closed form uses the 1-based
//! position.

use std::ops::Range;

use serde::Serialize;

use crate::quantizer::utilization_profile;
use crate::schedule::remaining_budget;
use crate::{Execution, Result, Schedule, TokenCorpus, VcqError};

/// Default collapse criterion for [`cliff_position`], in bits.
pub const DEFAULT_CLIFF_THRESHOLD: f64 = 1.0;

#[inline]
fn n_log2_n(n: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        let n = n as f64;
        n * n.log2()
    }
}

/// Per-position results of prefix refinement.
#[derive(Clone, Debug, PartialEq)]
pub struct PrefixEntropies {
    /// `H(x_t | x_<t)` for `t ∈ [0, L)`.
    pub conditional: Vec<f64>,
    /// `H(x_<t)` for `t ∈ [0, L]`, each computed from that stage's groups.
    pub prefix_joint: Vec<f64>,
}

struct Split {
    /// `n log2 n − Σ c log2 c` over this group's next-token runs.
    weighted_entropy: f64,
    /// Surviving (size ≥ 2) sub-groups, relative to the group start.
    children: Vec<Range<usize>>,
    children_nlogn: f64,
}

fn split_group(order: &mut [u32], corpus: &TokenCorpus, t: usize) -> Split {
    order.sort_unstable_by_key(|&i| corpus.token(i as usize, t));
    let mut children = Vec::new();
    let mut runs_nlogn = 0.0;
    let mut start = 0;
    while start < order.len() {
        let x = corpus.token(order[start] as usize, t);
        let mut end = start + 1;
        while end < order.len() && corpus.token(order[end] as usize, t) == x {
            end += 1;
        }
        let c = end - start;
        if c >= 2 {
            runs_nlogn += n_log2_n(c);
            children.push(start..end);
        }
        start = end;
    }
    Split {
        weighted_entropy: n_log2_n(order.len()) - runs_nlogn,
        children,
        children_nlogn: runs_nlogn,
    }
}

/// Runs the prefix refinement over all positions.
pub fn prefix_entropies(corpus: &TokenCorpus, exec: Execution) -> PrefixEntropies {
    let n = corpus.n_samples();
    let l = corpus.length();
    let log2_n = (n as f64).log2();
    let inv_n = 1.0 / n as f64;

    let mut order: Vec<u32> = (0..n as u32).collect();
    let mut groups: Vec<Range<usize>> = Vec::new();
    if n >= 2 {
        groups.push(0..n);
    }
    let mut stage_nlogn = n_log2_n(n);

    let mut conditional = Vec::with_capacity(l);
    let mut prefix_joint = Vec::with_capacity(l + 1);
    prefix_joint.push(log2_n - stage_nlogn * inv_n);

    for t in 0..l {
        // Hand out disjoint mutable slices of `order`, one per group.
        let mut slices: Vec<(usize, &mut [u32])> = Vec::with_capacity(groups.len());
        let mut rest: &mut [u32] = &mut order;
        let mut offset = 0;
        for g in &groups {
            let tail = std::mem::take(&mut rest);
            let (_, tail) = tail.split_at_mut(g.start - offset);
            let (mid, tail) = tail.split_at_mut(g.len());
            slices.push((g.start, mid));
            rest = tail;
            offset = g.end;
        }
        let splits = exec.map_mut(&mut slices, |(start, slice)| (*start, split_group(slice, corpus, t)));

        // Reduce in group order so the sums do not depend on scheduling.
        let mut h = 0.0;
        let mut next_nlogn = 0.0;
        let mut next_groups = Vec::new();
        for (start, split) in splits {
            h += split.weighted_entropy;
            next_nlogn += split.children_nlogn;
            next_groups.extend(split.children.into_iter().map(|r| start + r.start..start + r.end));
        }
        conditional.push((h * inv_n).max(0.0));
        stage_nlogn = next_nlogn;
        prefix_joint.push(log2_n - stage_nlogn * inv_n);
        groups = next_groups;
    }
    PrefixEntropies { conditional, prefix_joint }
}

/// `H(x_t | x_<t)` for every position.
pub fn conditional_entropy_profile(corpus: &TokenCorpus, exec: Execution) -> Vec<f64> {
    prefix_entropies(corpus, exec).conditional
}

/// Entropy of the empirical distribution over whole sequences, from
/// grouping identical rows.
pub fn joint_entropy(corpus: &TokenCorpus) -> f64 {
    let n = corpus.n_samples();
    let mut rows: Vec<&[u32]> = corpus.rows().collect();
    rows.sort_unstable();
    let mut h = 0.0;
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && rows[end] == rows[start] {
            end += 1;
        }
        let p = (end - start) as f64 / n as f64;
        h -= p * p.log2();
        start = end;
    }
    h
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ChainRuleCheck {
    pub sum_conditional: f64,
    pub joint: f64,
    pub max_abs_diff: f64,
}

/// Compares `Σ_t H(x_t | x_<t)` with `H(x_1..L)`; exact counting makes them
/// equal up to rounding.
pub fn chain_rule_check(corpus: &TokenCorpus, exec: Execution) -> ChainRuleCheck {
    let sum_conditional: f64 = conditional_entropy_profile(corpus, exec).iter().sum();
    let joint = joint_entropy(corpus);
    ChainRuleCheck { sum_conditional, joint, max_abs_diff: (sum_conditional - joint).abs() }
}

/// Uniform-codebook ceiling `max(0, log2 N − (t − 1) · log2 K)` at 1-based
/// positions `t = 1..=L`, returned 0-based.
pub fn prop1_bound(n_samples: u64, k: u32, length: usize) -> Vec<f64> {
    let budget = (n_samples as f64).log2();
    let per = (k as f64).log2();
    (0..length).map(|i| (budget - i as f64 * per).max(0.0)).collect()
}

/// `min(log2 K_t, log2 N − H(x_<t))`, which bounds `H(x_t | x_<t)` for any
/// corpus.
pub fn exact_bound(prefix_joint: &[f64], sizes: &[u32], n_samples: u64) -> Vec<f64> {
    let budget = (n_samples as f64).log2();
    sizes
        .iter()
        .zip(prefix_joint)
        .map(|(&k, &h)| (k as f64).log2().min((budget - h).max(0.0)))
        .collect()
}

/// Smallest `t` from which every later entropy stays below `threshold`;
/// `L` when the last position is still at or above it.
pub fn cliff_position(profile: &[f64], threshold: f64) -> Result<usize> {
    if threshold.is_nan() || threshold <= 0.0 {
        return Err(VcqError::Config(format!("cliff threshold must be positive, got {threshold}")));
    }
    Ok(profile.iter().rposition(|&h| h >= threshold).map_or(0, |t| t + 1))
}

/// Everything measured about one corpus under one schedule.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EntropyProfile {
    pub n_samples: u64,
    pub conditional_bits: Vec<f64>,
    pub joint_bits: f64,
    pub remaining_budget: Vec<f64>,
    pub prop1_bound: Vec<f64>,
    /// The uniform bound was evaluated with `k_max` on a schedule that is not
    /// constant, so it is indicative only.
    pub prop1_nonuniform: bool,
    /// Positions where the measurement exceeds the uniform bound. These are
    /// legitimate for corpora whose early positions under-use the codebook.
    pub prop1_violations: Vec<usize>,
    pub exact_bound: Vec<f64>,
    pub threshold: f64,
    pub cliff_position: usize,
    pub utilization: Vec<f64>,
}

impl EntropyProfile {
    /// Writes `t,H_bits,remaining_budget,prop1_bound,exact_bound,utilization`.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "H_bits", "remaining_budget", "prop1_bound", "exact_bound", "utilization"])?;
        for t in 0..self.conditional_bits.len() {
            w.write_record(&[
                t.to_string(),
                self.conditional_bits[t].to_string(),
                self.remaining_budget[t].to_string(),
                self.prop1_bound[t].to_string(),
                self.exact_bound[t].to_string(),
                self.utilization[t].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// JSON-ready summary without the per-position curves.
    pub fn summary(&self) -> ProfileSummary {
        ProfileSummary {
            n_samples: self.n_samples,
            length: self.conditional_bits.len(),
            joint_bits: self.joint_bits,
            cliff_position: self.cliff_position,
            threshold: self.threshold,
            prop1_nonuniform: self.prop1_nonuniform,
            prop1_violations: self.prop1_violations.clone(),
            mean_utilization: self.utilization.iter().sum::<f64>() / self.utilization.len() as f64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProfileSummary {
    pub n_samples: u64,
    pub length: usize,
    pub joint_bits: f64,
    pub cliff_position: usize,
    pub threshold: f64,
    pub prop1_nonuniform: bool,
    pub prop1_violations: Vec<usize>,
    pub mean_utilization: f64,
}

/// Full entropy analysis of a corpus tokenized under `schedule`.
pub fn analyze(
    corpus: &TokenCorpus,
    schedule: &Schedule,
    threshold: f64,
    exec: Execution,
) -> Result<EntropyProfile> {
    let utilization = utilization_profile(corpus, schedule)?;
    let n = corpus.n_samples() as u64;
    let PrefixEntropies { conditional, prefix_joint } = prefix_entropies(corpus, exec);
    let sizes = schedule.sizes();
    let prop1 = prop1_bound(n, schedule.k_max(), schedule.length());
    let exact = exact_bound(&prefix_joint, &sizes, n);
    let prop1_violations =
        conditional.iter().zip(&prop1).enumerate().filter(|(_, (h, b))| **h > **b + 1e-9).map(|(t, _)| t).collect();
    Ok(EntropyProfile {
        n_samples: n,
        joint_bits: prefix_joint[corpus.length()],
        remaining_budget: remaining_budget(schedule, n)?,
        prop1_bound: prop1,
        prop1_nonuniform: !schedule.is_constant(),
        prop1_violations,
        exact_bound: exact,
        threshold,
        cliff_position: cliff_position(&conditional, threshold)?,
        conditional_bits: conditional,
        utilization,
    })
}
