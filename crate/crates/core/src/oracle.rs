//! Brute-force checks of the guarantees the guard relies on.
//!
//! Every check returns a [`CheckReport`] with a status and named numeric
//! margins; nothing here panics on a failed property. The forward passes are
//! written out again from the parameter buffers so that the checks do not
//! share code paths with the modules they verify.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus_io::ActivationCorpus;
use crate::dynamic_guard::{calibrate_tau, sequence_rhos, Guard};
use crate::error::{DsgError, Result};
use crate::feature_stats::{accumulate_stats, importance, select_features, FeatureStats, DEFAULT_EPSILON};
use crate::sae::{decoder_row_gradient, SaeParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckStatus {
    Pass,
    Fail,
    PremiseFailed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub name: String,
    pub status: CheckStatus,
    pub margins: BTreeMap<String, f64>,
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub detail: String,
}

impl CheckReport {
    fn new(name: &str) -> Self {
        CheckReport {
            name: name.to_string(),
            status: CheckStatus::Pass,
            margins: BTreeMap::new(),
            seeds: Vec::new(),
            detail: String::new(),
        }
    }

    fn margin(&mut self, key: &str, v: f64) {
        self.margins.insert(key.to_string(), v);
    }

    fn fail(&mut self, why: impl Into<String>) {
        self.status = CheckStatus::Fail;
        if !self.detail.is_empty() {
            self.detail.push_str("; ");
        }
        self.detail.push_str(&why.into());
    }

    pub fn passed(&self) -> bool {
        self.status == CheckStatus::Pass
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub checks: Vec<CheckReport>,
}

impl VerificationReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(CheckReport::passed)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

/// ρ restricted to finitely many attainable levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteRhoModel {
    pub levels: Vec<f64>,
    pub p_retain: Vec<f64>,
    pub p_forget: Vec<f64>,
}

impl DiscreteRhoModel {
    pub fn new(levels: Vec<f64>, p_retain: Vec<f64>, p_forget: Vec<f64>) -> Result<Self> {
        let k = levels.len();
        if k == 0 || p_retain.len() != k || p_forget.len() != k {
            return Err(DsgError::invalid("levels and masses must be non-empty and equally long"));
        }
        if levels.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(DsgError::invalid("levels must be strictly increasing"));
        }
        for (name, m) in [("p_retain", &p_retain), ("p_forget", &p_forget)] {
            if m.iter().any(|&v| !(v.is_finite() && v >= 0.0)) {
                return Err(DsgError::invalid(format!("{name} has a negative or non-finite mass")));
            }
            let s: f64 = m.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(DsgError::invalid(format!("{name} sums to {s}, not 1")));
            }
        }
        Ok(DiscreteRhoModel {
            levels,
            p_retain,
            p_forget,
        })
    }

    /// `k` levels at `i/(k-1)` with retain mass `∝ k − i` and likelihood
    /// ratio `ratio^i`.
    pub fn geometric(k: usize, ratio: f64) -> Result<Self> {
        if k < 2 || !(ratio.is_finite() && ratio > 0.0) {
            return Err(DsgError::invalid("geometric model needs k >= 2 and ratio > 0"));
        }
        let levels = (0..k).map(|i| i as f64 / (k - 1) as f64).collect();
        let r: Vec<f64> = (0..k).map(|i| (k - i) as f64).collect();
        let f: Vec<f64> = r.iter().enumerate().map(|(i, v)| v * ratio.powi(i as i32)).collect();
        let (sr, sf) = (r.iter().sum::<f64>(), f.iter().sum::<f64>());
        Self::new(
            levels,
            r.into_iter().map(|v| v / sr).collect(),
            f.into_iter().map(|v| v / sf).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    /// First pair `i < j` with `p_forget[i]/p_retain[i] > p_forget[j]/p_retain[j]`,
    /// compared by cross-multiplication so zero masses need no special case.
    pub fn likelihood_ratio_violation(&self) -> Option<(usize, usize)> {
        let k = self.len();
        for i in 0..k {
            for j in i + 1..k {
                if self.p_forget[i] * self.p_retain[j] > self.p_forget[j] * self.p_retain[i] + 1e-15 {
                    return Some((i, j));
                }
            }
        }
        None
    }
}

pub const NP_MAX_LEVELS: usize = 16;
const NP_TOLERANCE: f64 = 1e-12;

/// Enumerates every deterministic level subset and compares it against every
/// threshold test `ρ > τ` whose false-positive rate is at least as large.
pub fn np_optimality_check(model: &DiscreteRhoModel) -> Result<CheckReport> {
    let k = model.len();
    if k > NP_MAX_LEVELS {
        return Err(DsgError::invalid(format!("{k} levels exceed the enumeration limit of {NP_MAX_LEVELS}")));
    }
    let mut report = CheckReport::new("np_optimality");
    report.margin("levels", k as f64);
    if let Some((i, j)) = model.likelihood_ratio_violation() {
        report.status = CheckStatus::PremiseFailed;
        report.detail = format!(
            "likelihood ratio decreases between level {i} ({}) and level {j} ({})",
            model.levels[i], model.levels[j]
        );
        return Ok(report);
    }
    // Threshold at cut m flags levels m..k; m = k flags nothing.
    let mut thresholds = Vec::with_capacity(k + 1);
    for m in 0..=k {
        let fpr: f64 = model.p_retain[m..].iter().sum();
        let tpr: f64 = model.p_forget[m..].iter().sum();
        thresholds.push((fpr, tpr));
    }
    let mut max_slack = f64::NEG_INFINITY;
    let mut violations = 0usize;
    let mut worst = (0u32, 0usize);
    for mask in 0u32..(1u32 << k) {
        let mut fpr = 0.0;
        let mut tpr = 0.0;
        for i in 0..k {
            if mask >> i & 1 == 1 {
                fpr += model.p_retain[i];
                tpr += model.p_forget[i];
            }
        }
        for (m, &(t_fpr, t_tpr)) in thresholds.iter().enumerate() {
            if fpr <= t_fpr + NP_TOLERANCE {
                let slack = tpr - t_tpr;
                if slack > max_slack {
                    max_slack = slack;
                    worst = (mask, m);
                }
                if slack > NP_TOLERANCE {
                    violations += 1;
                }
            }
        }
    }
    report.margin("subsets", (1u64 << k) as f64);
    report.margin("max_slack", max_slack);
    report.margin("violations", violations as f64);
    if violations > 0 {
        report.fail(format!(
            "subset {:#b} beats the threshold at cut {} by {max_slack:e}",
            worst.0, worst.1
        ));
    }
    Ok(report)
}

/// Static baseline against the dynamic guard: identical trigger sets at
/// `τ = 0`, and fewer modified retain tokens at the calibrated `τ`.
pub fn dominance_check(
    p: &SaeParams,
    features: &[usize],
    c: f64,
    forget: &ActivationCorpus,
    retain: &ActivationCorpus,
    p_dyn: f64,
) -> Result<CheckReport> {
    let mut report = CheckReport::new("dominance");
    let stat = Guard::static_baseline(p, features.to_vec(), c)?;
    let dyn0 = Guard::from_parts(p, features.to_vec(), 0.0, c)?;
    let sf = stat.guard_corpus(forget)?;
    let sr = stat.guard_corpus(retain)?;
    let df = dyn0.guard_corpus(forget)?;
    let dr = dyn0.guard_corpus(retain)?;
    let same_set = |a: &crate::dynamic_guard::CorpusVerdicts, b: &crate::dynamic_guard::CorpusVerdicts| {
        a.verdicts
            .iter()
            .zip(&b.verdicts)
            .all(|(x, y)| x.classified_forget == y.classified_forget)
    };
    report.margin("coverage_static", sf.classified_rate());
    report.margin("coverage_dynamic_tau0", df.classified_rate());
    report.margin("side_effect_static", sr.classified_rate());
    report.margin("coverage_diff", df.classified_rate() - sf.classified_rate());
    if !same_set(&sf, &df) || !same_set(&sr, &dr) {
        report.fail("trigger sets differ at tau = 0");
    }

    let tau = calibrate_tau(p, features, retain, p_dyn)?;
    let dynp = dyn0.clone().with_tau(tau);
    let dpr = dynp.guard_corpus(retain)?;
    let tokens_dyn = dpr.n_tokens_modified();
    let tokens_stat = sr.n_tokens_modified();
    report.margin("tau", tau);
    report.margin("p_dyn", p_dyn);
    report.margin("retain_tokens_dynamic", tokens_dyn as f64);
    report.margin("retain_tokens_static", tokens_stat as f64);
    report.margin("token_side_effect_dynamic", dpr.token_rate());
    report.margin("token_side_effect_static", sr.token_rate());
    report.margin("token_margin", sr.token_rate() - dpr.token_rate());
    let gated = sequence_rhos(p, features, retain)?
        .iter()
        .filter(|r| r.rho > 0.0 && r.rho <= tau)
        .count();
    report.margin("retain_gated_sequences", gated as f64);
    if gated > 0 && tokens_dyn >= tokens_stat {
        report.fail(format!(
            "dynamic modified {tokens_dyn} retain tokens, static {tokens_stat}"
        ));
    } else if gated == 0 && tokens_dyn > tokens_stat {
        report.fail(format!(
            "dynamic modified {tokens_dyn} retain tokens, static {tokens_stat}, with nothing gated"
        ));
    }
    Ok(report)
}

/// Straight-line forward pass: returns `(f, ĥ)` in `f64`.
fn forward(p: &SaeParams, w_dec: &[f64], h: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (d, m) = (p.d_model(), p.d_sae());
    let (we, be, bd, th) = (p.w_enc(), p.b_enc(), p.b_dec(), p.jump_theta());
    let mut f = vec![0.0; m];
    for j in 0..m {
        let mut z = f64::from(be[j]);
        for i in 0..d {
            z += f64::from(we[j * d + i]) * h[i];
        }
        f[j] = if z > f64::from(th[j]) { z } else { 0.0 };
    }
    let mut r: Vec<f64> = bd.iter().map(|&v| f64::from(v)).collect();
    for j in 0..m {
        for i in 0..d {
            r[i] += f[j] * w_dec[j * d + i];
        }
    }
    (f, r)
}

fn half_sq_loss(p: &SaeParams, w_dec: &[f64], h: &[f64]) -> f64 {
    let (_, r) = forward(p, w_dec, h);
    0.5 * r.iter().zip(h).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
}

/// Average ranks, ties sharing the mean of their positions.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation; `None` when either side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some(sab / (saa * sbb).sqrt())
}

pub const IDENTITY_TOLERANCE: f64 = 1e-10;
pub const FD_TOLERANCE: f64 = 1e-3;
pub const FD_STEP: f64 = 1e-4;

/// Decoder-row gradient identity, finite-difference agreement and the
/// second-moment bound on up to `n_tokens` tokens sampled with `seed`.
pub fn fisher_identity_check(
    p: &SaeParams,
    corpus: &ActivationCorpus,
    n_tokens: usize,
    seed: u64,
) -> Result<CheckReport> {
    if corpus.d_model() != p.d_model() {
        return Err(DsgError::DimensionMismatch {
            context: "corpus width",
            expected: p.d_model(),
            found: corpus.d_model(),
        });
    }
    if corpus.n_tokens() == 0 {
        return Err(DsgError::Empty("corpus has no tokens"));
    }
    let mut report = CheckReport::new("fisher_identity");
    report.seeds.push(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, m) = (p.d_model(), p.d_sae());
    let w_dec: Vec<f64> = p.w_dec().iter().map(|&v| f64::from(v)).collect();
    let n = n_tokens.min(corpus.n_tokens());
    let picks: Vec<usize> = if n == corpus.n_tokens() {
        (0..n).collect()
    } else {
        (0..n).map(|_| rng.random_range(0..corpus.n_tokens())).collect()
    };

    let mut worst_identity = 0.0f64;
    let mut worst_fd = 0.0f64;
    let mut fd_evals = 0usize;
    let mut grad_sq_sum = vec![0.0; m];
    let mut f_sq_sum = vec![0.0; m];
    let mut eps_sq_max = 0.0f64;
    let mut wd = w_dec.clone();
    for &t in &picks {
        let h: Vec<f64> = corpus.token_row(t).iter().map(|&v| f64::from(v)).collect();
        let (f, r) = forward(p, &w_dec, &h);
        let err_sq: f64 = r.iter().zip(&h).map(|(a, b)| (a - b) * (a - b)).sum();
        eps_sq_max = eps_sq_max.max(err_sq);
        let g = decoder_row_gradient(p, &h)?;
        for j in 0..m {
            let gsq: f64 = g.row(j).iter().map(|v| v * v).sum();
            let expect = f[j] * f[j] * err_sq;
            let scale = gsq.abs().max(expect.abs());
            if scale > 0.0 {
                worst_identity = worst_identity.max((gsq - expect).abs() / scale);
            }
            grad_sq_sum[j] += gsq;
            f_sq_sum[j] += f[j] * f[j];
        }
        // finite differences on a few entries of active rows plus one inactive row
        let active: Vec<usize> = (0..m).filter(|&j| f[j] != 0.0).collect();
        let inactive: Vec<usize> = (0..m).filter(|&j| f[j] == 0.0).collect();
        let mut probes = Vec::new();
        for _ in 0..4 {
            if let Some(&j) = active.choose(&mut rng) {
                probes.push((j, rng.random_range(0..d)));
            }
        }
        if let Some(&j) = inactive.choose(&mut rng) {
            probes.push((j, rng.random_range(0..d)));
        }
        for (j, i) in probes {
            let k = j * d + i;
            wd[k] = w_dec[k] + FD_STEP;
            let up = half_sq_loss(p, &wd, &h);
            wd[k] = w_dec[k] - FD_STEP;
            let down = half_sq_loss(p, &wd, &h);
            wd[k] = w_dec[k];
            let fd = (up - down) / (2.0 * FD_STEP);
            let an = g.get(j, i);
            let denom = an.abs().max(1e-6);
            worst_fd = worst_fd.max((fd - an).abs() / denom);
            fd_evals += 1;
        }
    }
    report.margin("tokens", n as f64);
    report.margin("identity_max_rel_err", worst_identity);
    report.margin("fd_max_rel_err", worst_fd);
    report.margin("fd_probes", fd_evals as f64);
    report.margin("eps_hat_sq", eps_sq_max);
    if worst_identity > IDENTITY_TOLERANCE {
        report.fail(format!("gradient identity off by {worst_identity:e}"));
    }
    if worst_fd > FD_TOLERANCE {
        report.fail(format!("finite differences off by {worst_fd:e}"));
    }

    let nf = n as f64;
    let mean_grad: Vec<f64> = grad_sq_sum.iter().map(|v| v / nf).collect();
    let mean_f: Vec<f64> = f_sq_sum.iter().map(|v| v / nf).collect();
    let mut min_bound_margin = f64::INFINITY;
    let mut bound_failures = 0usize;
    for j in 0..m {
        let bound = eps_sq_max * mean_f[j];
        let margin = bound - mean_grad[j];
        min_bound_margin = min_bound_margin.min(margin);
        if margin < -1e-12 * bound.max(mean_grad[j]) {
            bound_failures += 1;
        }
    }
    report.margin("bound_min_margin", min_bound_margin);
    report.margin("bound_failures", bound_failures as f64);
    if bound_failures > 0 {
        report.fail(format!("{bound_failures} features exceed the second-moment bound"));
    }
    if let Some(rho) = spearman(&mean_grad, &mean_f) {
        report.margin("spearman", rho);
    }
    Ok(report)
}

/// Per-feature `(mean ‖∇row j‖², mean f_j²)` over every token, for the
/// ranking comparison.
pub fn gradient_moments(p: &SaeParams, corpus: &ActivationCorpus) -> Result<(Vec<f64>, Vec<f64>)> {
    let m = p.d_sae();
    let w_dec: Vec<f64> = p.w_dec().iter().map(|&v| f64::from(v)).collect();
    let mut g = vec![0.0; m];
    let mut q = vec![0.0; m];
    for t in 0..corpus.n_tokens() {
        let h: Vec<f64> = corpus.token_row(t).iter().map(|&v| f64::from(v)).collect();
        let (f, r) = forward(p, &w_dec, &h);
        let err_sq: f64 = r.iter().zip(&h).map(|(a, b)| (a - b) * (a - b)).sum();
        for j in 0..m {
            g[j] += f[j] * f[j] * err_sq;
            q[j] += f[j] * f[j];
        }
    }
    let n = corpus.n_tokens().max(1) as f64;
    Ok((g.into_iter().map(|v| v / n).collect(), q.into_iter().map(|v| v / n).collect()))
}

fn max_rel_diff(a: &FeatureStats, b: &FeatureStats) -> f64 {
    a.sum_sq()
        .iter()
        .zip(b.sum_sq())
        .map(|(x, y)| {
            let s = x.abs().max(y.abs());
            if s == 0.0 {
                0.0
            } else {
                (x - y).abs() / s
            }
        })
        .fold(0.0, f64::max)
}

pub const SEQUENTIAL_TOLERANCE: f64 = 1e-9;

/// Cumulative-statistics strategy against from-scratch recomputation on the
/// concatenated folds, plus invariance of the final statistics to fold order.
pub fn sequential_equivalence_check(
    p: &SaeParams,
    folds: &[ActivationCorpus],
    retain: &ActivationCorpus,
    p_ratio: f64,
    n_feats: usize,
    seed: u64,
) -> Result<CheckReport> {
    if folds.is_empty() {
        return Err(DsgError::Empty("no forget folds"));
    }
    let mut report = CheckReport::new("sequential_equivalence");
    report.seeds.push(seed);
    let retain_stats = accumulate_stats(p, retain)?;
    let fold_stats: Vec<FeatureStats> = folds.iter().map(|f| accumulate_stats(p, f)).collect::<Result<_>>()?;
    let mut hist = FeatureStats::zeros(p.d_sae());
    let mut worst = 0.0f64;
    let mut set_mismatch = Vec::new();
    for k in 0..folds.len() {
        hist.merge_in_place(&fold_stats[k])?;
        let scratch = accumulate_stats(p, &ActivationCorpus::concat(&folds[..=k])?)?;
        if hist.n_tokens() != scratch.n_tokens() {
            report.fail(format!("token counts differ at step {}", k + 1));
        }
        worst = worst.max(max_rel_diff(&hist, &scratch));
        let a = select_features(&importance(&hist, &retain_stats, DEFAULT_EPSILON)?, p_ratio, n_feats)?;
        let b = select_features(&importance(&scratch, &retain_stats, DEFAULT_EPSILON)?, p_ratio, n_feats)?;
        if a.ids != b.ids {
            set_mismatch.push(k + 1);
        }
    }
    report.margin("steps", folds.len() as f64);
    report.margin("stepwise_max_rel_err", worst);
    if worst > SEQUENTIAL_TOLERANCE {
        report.fail(format!("stepwise stats differ by {worst:e}"));
    }
    if !set_mismatch.is_empty() {
        report.fail(format!("selected sets differ at steps {set_mismatch:?}"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut orders: Vec<Vec<usize>> = vec![(0..folds.len()).rev().collect()];
    let mut shuffled: Vec<usize> = (0..folds.len()).collect();
    shuffled.shuffle(&mut rng);
    orders.push(shuffled);
    let final_sel = select_features(&importance(&hist, &retain_stats, DEFAULT_EPSILON)?, p_ratio, n_feats)?;
    let mut worst_order = 0.0f64;
    for order in &orders {
        let mut acc = FeatureStats::zeros(p.d_sae());
        for &i in order {
            acc.merge_in_place(&fold_stats[i])?;
        }
        worst_order = worst_order.max(max_rel_diff(&acc, &hist));
        let sel = select_features(&importance(&acc, &retain_stats, DEFAULT_EPSILON)?, p_ratio, n_feats)?;
        if sel.ids != final_sel.ids {
            report.fail(format!("fold order {order:?} changes the selected set"));
        }
    }
    report.margin("order_max_rel_err", worst_order);
    if worst_order > SEQUENTIAL_TOLERANCE {
        report.fail(format!("fold order changes final stats by {worst_order:e}"));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthSpec};

    fn small_spec() -> SynthSpec {
        SynthSpec {
            d_model: 8,
            d_sae_true: 8,
            forget_feature_ids: vec![1, 4],
            p_fire_forget: 0.5,
            p_fire_retain: 0.05,
            p_fire_background: 0.1,
            seq_len: (8, 32),
            n_sequences: 60,
            noise_sigma: 0.02,
            seed: 21,
        }
    }

    #[test]
    fn np_geometric_has_no_violations() {
        let model = DiscreteRhoModel::geometric(8, 1.7).unwrap();
        let r = np_optimality_check(&model).unwrap();
        assert!(r.passed(), "{r:?}");
        assert_eq!(r.margins["subsets"], 256.0);
        assert!(r.margins["max_slack"] <= 1e-12);
    }

    #[test]
    fn np_equal_masses_give_diagonal_roc() {
        let p = vec![0.25; 4];
        let model = DiscreteRhoModel::new(vec![0.0, 0.3, 0.6, 1.0], p.clone(), p).unwrap();
        let r = np_optimality_check(&model).unwrap();
        assert!(r.passed());
        assert!(r.margins["max_slack"].abs() <= 1e-12);
    }

    #[test]
    fn np_non_monotone_reports_premise() {
        let model = DiscreteRhoModel::new(
            vec![0.0, 0.5, 1.0],
            vec![0.2, 0.6, 0.2],
            vec![0.1, 0.8, 0.1],
        )
        .unwrap();
        let r = np_optimality_check(&model).unwrap();
        assert_eq!(r.status, CheckStatus::PremiseFailed);
        assert!(r.detail.contains("level 1") && r.detail.contains("level 2"));
        assert!(DiscreteRhoModel::new(vec![0.0, 1.0], vec![0.5, 0.6], vec![0.5, 0.5]).is_err());
        assert!(DiscreteRhoModel::new(vec![1.0, 0.0], vec![0.5, 0.5], vec![0.5, 0.5]).is_err());
        let big = DiscreteRhoModel::geometric(17, 1.1).unwrap();
        assert!(np_optimality_check(&big).is_err());
    }

    #[test]
    fn dominance_on_planted_corpora() {
        let out = generate(&small_spec()).unwrap();
        let sae = out.truth.planted.planted_sae(0.3).unwrap();
        let r = dominance_check(&sae, &[1, 4], 500.0, &out.forget, &out.retain, 95.0).unwrap();
        assert!(r.passed(), "{r:?}");
        assert_eq!(r.margins["coverage_diff"], 0.0);
    }

    #[test]
    fn dominance_without_retain_firing() {
        let spec = SynthSpec {
            p_fire_retain: 0.0,
            ..small_spec()
        };
        let out = generate(&spec).unwrap();
        let sae = out.truth.planted.planted_sae(0.3).unwrap();
        let r = dominance_check(&sae, &[1, 4], 500.0, &out.forget, &out.retain, 95.0).unwrap();
        assert!(r.passed(), "{r:?}");
        assert_eq!(r.margins["retain_tokens_static"], 0.0);
        assert_eq!(r.margins["retain_tokens_dynamic"], 0.0);
    }

    #[test]
    fn fisher_on_perfect_reconstruction() {
        let p = SaeParams::identity(3);
        let corpus = ActivationCorpus::from_sequences(3, vec![("a".into(), vec![0.5, 0.2, 0.1, 1.0, 0.3, 0.0])]).unwrap();
        let r = fisher_identity_check(&p, &corpus, 100, 0).unwrap();
        assert!(r.passed(), "{r:?}");
        assert_eq!(r.margins["eps_hat_sq"], 0.0);
        assert_eq!(r.margins["bound_min_margin"], 0.0);
    }

    #[test]
    fn fisher_on_random_sae() {
        let out = generate(&small_spec()).unwrap();
        let p = crate::sae::init_params(8, 12, 3).unwrap();
        let r = fisher_identity_check(&p, &out.forget, 300, 9).unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn spearman_handles_ties() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(ranks(&[5.0, 1.0, 5.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
        assert_eq!(spearman(&[1.0, 1.0], &[1.0, 2.0]), None);
    }

    #[test]
    fn sequential_single_and_multi_fold() {
        let spec = small_spec();
        let out = generate(&spec).unwrap();
        let sae = out.truth.planted.planted_sae(0.3).unwrap();
        let r = sequential_equivalence_check(&sae, &[out.forget.clone()], &out.retain, 95.0, 2, 1).unwrap();
        assert!(r.passed(), "{r:?}");
        let folds: Vec<_> = (0..4)
            .map(|k| generate(&SynthSpec { seed: 100 + k, n_sequences: 15, ..spec.clone() }).unwrap().forget)
            .collect();
        let r = sequential_equivalence_check(&sae, &folds, &out.retain, 95.0, 2, 1).unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn report_serializes() {
        let mut v = VerificationReport::default();
        v.checks.push(np_optimality_check(&DiscreteRhoModel::geometric(4, 2.0).unwrap()).unwrap());
        let json = v.to_json().unwrap();
        assert!(json.contains("\"status\": \"pass\""));
        let back: VerificationReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, v);
    }
}
