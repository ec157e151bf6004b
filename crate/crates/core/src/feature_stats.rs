//! Squared-activation statistics and percentile-based feature selection.

use std::collections::HashSet;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::corpus_io::ActivationCorpus;
use crate::error::{DsgError, Result};
use crate::sae::{HiddenBlock, SaeParams};

/// Default guard in `forget / max(retain, ε)`.
pub const DEFAULT_EPSILON: f64 = 1e-8;

/// Running `Σ f_j²` per feature plus the token count. Forms a commutative
/// monoid under [`FeatureStats::merge`] with [`FeatureStats::zeros`] as
/// identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    sum_sq: Vec<f64>,
    n_tokens: u64,
}

impl FeatureStats {
    pub fn zeros(d_sae: usize) -> Self {
        FeatureStats {
            sum_sq: vec![0.0; d_sae],
            n_tokens: 0,
        }
    }

    pub fn from_parts(sum_sq: Vec<f64>, n_tokens: u64) -> Result<Self> {
        if let Some(j) = sum_sq.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(DsgError::invalid(format!(
                "sum_sq[{j}] = {} is not a nonnegative real",
                sum_sq[j]
            )));
        }
        Ok(FeatureStats { sum_sq, n_tokens })
    }

    pub fn sum_sq(&self) -> &[f64] {
        &self.sum_sq
    }

    pub fn n_tokens(&self) -> u64 {
        self.n_tokens
    }

    pub fn d_sae(&self) -> usize {
        self.sum_sq.len()
    }

    pub fn merge(&self, other: &FeatureStats) -> Result<FeatureStats> {
        let mut out = self.clone();
        out.merge_in_place(other)?;
        Ok(out)
    }

    pub fn merge_in_place(&mut self, other: &FeatureStats) -> Result<()> {
        if self.sum_sq.len() != other.sum_sq.len() {
            return Err(DsgError::DimensionMismatch {
                context: "stats merge",
                expected: self.sum_sq.len(),
                found: other.sum_sq.len(),
            });
        }
        for (a, b) in self.sum_sq.iter_mut().zip(&other.sum_sq) {
            *a += b;
        }
        self.n_tokens += other.n_tokens;
        Ok(())
    }

    /// Adds one block of hidden states.
    pub fn add_block(&mut self, p: &SaeParams, block: &HiddenBlock) -> Result<()> {
        if block.cols() != p.d_model() {
            return Err(DsgError::DimensionMismatch {
                context: "stats block width",
                expected: p.d_model(),
                found: block.cols(),
            });
        }
        if self.sum_sq.len() != p.d_sae() {
            return Err(DsgError::DimensionMismatch {
                context: "stats width",
                expected: p.d_sae(),
                found: self.sum_sq.len(),
            });
        }
        let mut f = vec![0.0; p.d_sae()];
        for row in block.iter_rows() {
            p.encode_row(row, &mut f);
            for (s, v) in self.sum_sq.iter_mut().zip(&f) {
                *s += v * v;
            }
        }
        self.n_tokens += block.rows() as u64;
        Ok(())
    }
}

pub fn accumulate_stats(p: &SaeParams, corpus: &ActivationCorpus) -> Result<FeatureStats> {
    if corpus.d_model() != p.d_model() {
        return Err(DsgError::DimensionMismatch {
            context: "corpus width",
            expected: p.d_model(),
            found: corpus.d_model(),
        });
    }
    let mut stats = FeatureStats::zeros(p.d_sae());
    let mut h = vec![0.0; p.d_model()];
    let mut f = vec![0.0; p.d_sae()];
    for t in 0..corpus.n_tokens() {
        for (hi, &x) in h.iter_mut().zip(corpus.token_row(t)) {
            *hi = f64::from(x);
        }
        p.encode_row(&h, &mut f);
        for (s, v) in stats.sum_sq.iter_mut().zip(&f) {
            *s += v * v;
        }
    }
    stats.n_tokens = corpus.n_tokens() as u64;
    Ok(stats)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub forget_score: Vec<f64>,
    pub retain_score: Vec<f64>,
    pub imp_ratio: Vec<f64>,
    pub epsilon_guard: f64,
}

impl ImportanceReport {
    pub fn d_sae(&self) -> usize {
        self.imp_ratio.len()
    }

    /// `feature_id,forget_score,retain_score,imp_ratio`, one row per feature.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["feature_id", "forget_score", "retain_score", "imp_ratio"])?;
        for j in 0..self.d_sae() {
            out.write_record([
                j.to_string(),
                self.forget_score[j].to_string(),
                self.retain_score[j].to_string(),
                self.imp_ratio[j].to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

pub fn importance(
    forget: &FeatureStats,
    retain: &FeatureStats,
    epsilon_guard: f64,
) -> Result<ImportanceReport> {
    if forget.n_tokens == 0 {
        return Err(DsgError::Empty("forget stats have zero tokens"));
    }
    if retain.n_tokens == 0 {
        return Err(DsgError::Empty("retain stats have zero tokens"));
    }
    if forget.d_sae() != retain.d_sae() {
        return Err(DsgError::DimensionMismatch {
            context: "importance",
            expected: forget.d_sae(),
            found: retain.d_sae(),
        });
    }
    if !(epsilon_guard.is_finite() && epsilon_guard > 0.0) {
        return Err(DsgError::invalid(format!("epsilon must be positive, got {epsilon_guard}")));
    }
    let nf = forget.n_tokens as f64;
    let nr = retain.n_tokens as f64;
    let forget_score: Vec<f64> = forget.sum_sq.iter().map(|s| s / nf).collect();
    let retain_score: Vec<f64> = retain.sum_sq.iter().map(|s| s / nr).collect();
    let imp_ratio = forget_score
        .iter()
        .zip(&retain_score)
        .map(|(f, r)| f / r.max(epsilon_guard))
        .collect();
    Ok(ImportanceReport {
        forget_score,
        retain_score,
        imp_ratio,
        epsilon_guard,
    })
}

/// Nearest-rank percentile: the smallest element `v` such that at least `p`%
/// of the values are `≤ v`.
pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(DsgError::Empty("percentile of an empty set"));
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(DsgError::invalid(format!("percentile {p} outside [0, 100]")));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(DsgError::invalid("percentile input contains NaN"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let rank = ((p * n as f64) / 100.0).ceil() as usize;
    Ok(sorted[rank.clamp(1, n) - 1])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedFeatures {
    /// Descending `forget_score`, ascending id on ties.
    pub ids: Vec<usize>,
    pub tau_ratio: f64,
    pub p_ratio: f64,
    pub n_feats: usize,
    /// Size of the ratio filter before truncation to `n_feats`.
    pub n_candidates: usize,
}

/// `τ_ratio` and the ids with `imp_ratio ≥ τ_ratio`, ascending.
pub fn ratio_candidates(report: &ImportanceReport, p_ratio: f64) -> Result<(f64, Vec<usize>)> {
    let tau_ratio = percentile(&report.imp_ratio, p_ratio)?;
    let ids = (0..report.d_sae())
        .filter(|&j| report.imp_ratio[j] >= tau_ratio)
        .collect();
    Ok((tau_ratio, ids))
}

pub fn select_features(
    report: &ImportanceReport,
    p_ratio: f64,
    n_feats: usize,
) -> Result<SelectedFeatures> {
    if n_feats == 0 {
        return Err(DsgError::invalid("n_feats must be at least 1"));
    }
    let (tau_ratio, mut ids) = ratio_candidates(report, p_ratio)?;
    let n_candidates = ids.len();
    ids.sort_by(|&a, &b| {
        report.forget_score[b]
            .total_cmp(&report.forget_score[a])
            .then(a.cmp(&b))
    });
    ids.truncate(n_feats);
    if ids.len() < n_feats {
        log::info!(
            "ratio filter admitted {} features, fewer than the {n_feats} requested",
            ids.len()
        );
    }
    Ok(SelectedFeatures {
        ids,
        tau_ratio,
        p_ratio,
        n_feats,
        n_candidates,
    })
}

/// Cumulative forget statistics for the all-data sequential strategy.
pub fn sequential_all(history: &FeatureStats, new_forget: &FeatureStats) -> Result<FeatureStats> {
    history.merge(new_forget)
}

/// Order-preserving union of per-step selections.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FeatureUnion {
    ids: Vec<usize>,
    #[serde(skip)]
    seen: HashSet<usize>,
}

impl FeatureUnion {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_ids(ids: &[usize]) -> Self {
        let mut u = Self::new();
        u.extend(ids);
        u
    }

    pub fn extend(&mut self, ids: &[usize]) {
        for &j in ids {
            if self.seen.insert(j) {
                self.ids.push(j);
            }
        }
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// `prior ∪ step.ids`, first-seen order.
pub fn sequential_union(prior: &[usize], step_selection: &SelectedFeatures) -> Vec<usize> {
    let mut u = FeatureUnion::from_ids(prior);
    u.extend(&step_selection.ids);
    u.ids
}
