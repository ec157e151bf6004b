//! Evaluation at desk scale: ρ histograms, TVD with bootstrap intervals,
//! ablation sweeps and latency.

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus_io::ActivationCorpus;
use crate::dynamic_guard::{calibrate_tau, sequence_rhos, Guard};
use crate::error::{DsgError, Result};
use crate::feature_stats::{importance, percentile, select_features, FeatureStats};
use crate::sae::{decode, encode, SaeParams};

/// Fixed-width bins on `[lo, hi]`. Bins are right-closed and the first bin
/// also takes `lo`, so `hi` lands in the last bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn new(lo: f64, hi: f64, bins: usize) -> Result<Self> {
        if bins < 2 {
            return Err(DsgError::invalid(format!("need at least 2 bins, got {bins}")));
        }
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(DsgError::invalid(format!("bad histogram range [{lo}, {hi}]")));
        }
        Ok(Histogram {
            lo,
            hi,
            counts: vec![0; bins],
        })
    }

    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    /// Right edge of bin `k`; edge `0` is `lo`.
    pub fn edge(&self, k: usize) -> f64 {
        if k == self.bins() {
            return self.hi;
        }
        self.lo + (self.hi - self.lo) * k as f64 / self.bins() as f64
    }

    pub fn bin_of(&self, v: f64) -> usize {
        let n = self.bins();
        let raw = ((v - self.lo) / (self.hi - self.lo) * n as f64).ceil() - 1.0;
        let mut k = if raw.is_nan() || raw < 0.0 { 0 } else { (raw as usize).min(n - 1) };
        // settle rounding against the edges actually reported
        while k > 0 && v <= self.edge(k) {
            k -= 1;
        }
        while k + 1 < n && v > self.edge(k + 1) {
            k += 1;
        }
        k
    }

    pub fn add(&mut self, v: f64) {
        let k = self.bin_of(v);
        self.counts[k] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn masses(&self) -> Vec<f64> {
        let n = self.total().max(1) as f64;
        self.counts.iter().map(|&c| c as f64 / n).collect()
    }

    /// Index of the fullest bin, lowest index on ties.
    pub fn mode(&self) -> usize {
        let mut best = 0;
        for (k, &c) in self.counts.iter().enumerate() {
            if c > self.counts[best] {
                best = k;
            }
        }
        best
    }

    /// `bin_left,bin_right,count,corpus_tag`
    pub fn write_csv<W: Write>(&self, w: W, tag: &str, header: bool) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        if header {
            out.write_record(["bin_left", "bin_right", "count", "corpus_tag"])?;
        }
        for (k, c) in self.counts.iter().enumerate() {
            out.write_record([
                self.edge(k).to_string(),
                self.edge(k + 1).to_string(),
                c.to_string(),
                tag.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

pub fn histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> Result<Histogram> {
    let mut h = Histogram::new(lo, hi, bins)?;
    for &v in values {
        h.add(v);
    }
    Ok(h)
}

/// Histogram of per-sequence ρ on `[0, 1]`.
pub fn rho_histogram(p: &SaeParams, features: &[usize], corpus: &ActivationCorpus, bins: usize) -> Result<Histogram> {
    let rhos: Vec<f64> = sequence_rhos(p, features, corpus)?.iter().map(|r| r.rho).collect();
    histogram(&rhos, 0.0, 1.0, bins)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatKind {
    /// ρ, activated fraction.
    Percentage,
    /// ρ_raw, activated count.
    Raw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TvdReport {
    pub kind: StatKind,
    pub pair: String,
    /// Point estimate on the observed samples.
    pub tvd: f64,
    /// Mean over bootstrap replicates.
    pub tvd_mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub bootstrap_iters: usize,
    pub bins: usize,
    pub range: (f64, f64),
    pub seed: u64,
}

impl TvdReport {
    pub fn ci_disjoint_below(&self, other: &TvdReport) -> bool {
        self.ci_high < other.ci_low
    }
}

fn tvd_of(a: &Histogram, b: &Histogram) -> f64 {
    let t = 0.5
        * a.masses()
            .iter()
            .zip(b.masses())
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>();
    t.min(1.0)
}

pub const DEFAULT_BINS: usize = 50;
pub const DEFAULT_BOOTSTRAP: usize = 1000;

#[derive(Debug, Clone)]
pub struct TvdOptions {
    pub kind: StatKind,
    pub pair: String,
    pub bins: usize,
    pub bootstrap_iters: usize,
    pub seed: u64,
    /// Shared bin range; defaults to `[0, 1]` for ρ and to the pooled
    /// `[min, max]` for ρ_raw.
    pub range: Option<(f64, f64)>,
}

impl TvdOptions {
    pub fn new(kind: StatKind, pair: impl Into<String>, seed: u64) -> Self {
        TvdOptions {
            kind,
            pair: pair.into(),
            bins: DEFAULT_BINS,
            bootstrap_iters: DEFAULT_BOOTSTRAP,
            seed,
            range: None,
        }
    }
}

/// `½ Σ |p̂_A − p̂_B|` on shared bins, with a 95% percentile bootstrap
/// interval from resampling both sides with replacement.
pub fn tvd_compare(a: &[f64], b: &[f64], opts: &TvdOptions) -> Result<TvdReport> {
    if a.is_empty() || b.is_empty() {
        return Err(DsgError::Empty("tvd needs two non-empty samples"));
    }
    if opts.bootstrap_iters == 0 {
        return Err(DsgError::invalid("bootstrap_iters must be positive"));
    }
    let (lo, hi) = match opts.range {
        Some(r) => r,
        None => match opts.kind {
            StatKind::Percentage => (0.0, 1.0),
            StatKind::Raw => {
                let lo = a.iter().chain(b).copied().fold(f64::INFINITY, f64::min);
                let hi = a.iter().chain(b).copied().fold(f64::NEG_INFINITY, f64::max);
                if hi > lo {
                    (lo, hi)
                } else {
                    (lo - 0.5, lo + 0.5)
                }
            }
        },
    };
    let ha = histogram(a, lo, hi, opts.bins)?;
    let hb = histogram(b, lo, hi, opts.bins)?;
    let point = tvd_of(&ha, &hb);
    // resample bin indices rather than values
    let ia: Vec<usize> = a.iter().map(|&v| ha.bin_of(v)).collect();
    let ib: Vec<usize> = b.iter().map(|&v| hb.bin_of(v)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut reps = Vec::with_capacity(opts.bootstrap_iters);
    let mut ca = vec![0u64; opts.bins];
    let mut cb = vec![0u64; opts.bins];
    for _ in 0..opts.bootstrap_iters {
        ca.iter_mut().for_each(|c| *c = 0);
        cb.iter_mut().for_each(|c| *c = 0);
        for _ in 0..ia.len() {
            ca[ia[rng.random_range(0..ia.len())]] += 1;
        }
        for _ in 0..ib.len() {
            cb[ib[rng.random_range(0..ib.len())]] += 1;
        }
        let (na, nb) = (ia.len() as f64, ib.len() as f64);
        let t = 0.5
            * ca.iter()
                .zip(&cb)
                .map(|(&x, &y)| (x as f64 / na - y as f64 / nb).abs())
                .sum::<f64>();
        reps.push(t.min(1.0));
    }
    let mean = reps.iter().sum::<f64>() / reps.len() as f64;
    Ok(TvdReport {
        kind: opts.kind,
        pair: opts.pair.clone(),
        tvd: point,
        tvd_mean: mean,
        ci_low: percentile(&reps, 2.5)?,
        ci_high: percentile(&reps, 97.5)?,
        bootstrap_iters: opts.bootstrap_iters,
        bins: opts.bins,
        range: (lo, hi),
        seed: opts.seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    ClampC,
    NFeats,
    PDyn,
    PRatio,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::ClampC => "clamp_c",
            SweepAxis::NFeats => "n_feats",
            SweepAxis::PDyn => "p_dyn",
            SweepAxis::PRatio => "p_ratio",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "clamp_c" | "c" | "clamp" => Ok(SweepAxis::ClampC),
            "n_feats" => Ok(SweepAxis::NFeats),
            "p_dyn" => Ok(SweepAxis::PDyn),
            "p_ratio" => Ok(SweepAxis::PRatio),
            other => Err(DsgError::invalid(format!("unknown sweep axis {other:?}"))),
        }
    }
}

/// Operating point every sweep starts from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepBase {
    pub p_ratio: f64,
    pub n_feats: usize,
    pub p_dyn: f64,
    pub clamp_c: f64,
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub coverage: f64,
    pub side_effect: f64,
    pub token_side_effect: f64,
    pub tau: f64,
    pub n_selected: usize,
    /// Mean L2 norm of the change on modified forget tokens.
    pub mean_shift: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub axis: SweepAxis,
    pub base: SweepBase,
    pub points: Vec<SweepPoint>,
}

impl SweepResult {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            self.axis.name(),
            "coverage",
            "side_effect",
            "token_side_effect",
            "tau",
            "n_selected",
            "mean_shift",
        ])?;
        for pt in &self.points {
            out.write_record([
                pt.value.to_string(),
                pt.coverage.to_string(),
                pt.side_effect.to_string(),
                pt.token_side_effect.to_string(),
                pt.tau.to_string(),
                pt.n_selected.to_string(),
                pt.mean_shift.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

fn check_grid(axis: SweepAxis, grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(DsgError::invalid("empty sweep grid"));
    }
    for &v in grid {
        let ok = match axis {
            SweepAxis::ClampC => v.is_finite() && v > 0.0,
            SweepAxis::NFeats => v >= 1.0 && v.fract() == 0.0 && v.is_finite(),
            SweepAxis::PDyn | SweepAxis::PRatio => (0.0..=100.0).contains(&v),
        };
        if !ok {
            return Err(DsgError::invalid(format!("grid value {v} invalid for {}", axis.name())));
        }
    }
    Ok(())
}

/// Evaluates every grid point from the given statistics. Each point redoes
/// selection and calibration, so points are independent of each other.
pub fn ablation_sweep(
    axis: SweepAxis,
    grid: &[f64],
    base: SweepBase,
    p: &SaeParams,
    forget_stats: &FeatureStats,
    retain_stats: &FeatureStats,
    forget: &ActivationCorpus,
    retain: &ActivationCorpus,
) -> Result<SweepResult> {
    check_grid(axis, grid)?;
    let report = importance(forget_stats, retain_stats, base.epsilon)?;
    let mut points = Vec::with_capacity(grid.len());
    for &v in grid {
        let mut b = base;
        match axis {
            SweepAxis::ClampC => b.clamp_c = v,
            SweepAxis::NFeats => b.n_feats = v as usize,
            SweepAxis::PDyn => b.p_dyn = v,
            SweepAxis::PRatio => b.p_ratio = v,
        }
        let sel = select_features(&report, b.p_ratio, b.n_feats)?;
        if sel.ids.is_empty() {
            return Err(DsgError::config(format!("{} = {v} selects no features", axis.name())));
        }
        let tau = calibrate_tau(p, &sel.ids, retain, b.p_dyn)?;
        let guard = Guard::from_parts(p, sel.ids.clone(), tau, b.clamp_c)?;
        let fv = guard.guard_corpus(forget)?;
        let rv = guard.guard_corpus(retain)?;
        let mut shift = 0.0;
        let mut shifted = 0usize;
        for (i, v) in fv.verdicts.iter().enumerate() {
            if v.tokens_modified == 0 {
                continue;
            }
            let x = forget.sequence_block(i);
            for t in 0..x.rows() {
                let d: f64 = x.row(t).iter().zip(v.modified.row(t)).map(|(a, b)| (a - b) * (a - b)).sum();
                shift += d.sqrt();
                shifted += 1;
            }
        }
        points.push(SweepPoint {
            value: v,
            coverage: fv.classified_rate(),
            side_effect: rv.classified_rate(),
            token_side_effect: rv.token_rate(),
            tau,
            n_selected: sel.ids.len(),
            mean_shift: if shifted == 0 { 0.0 } else { shift / shifted as f64 },
        });
    }
    Ok(SweepResult { axis, base, points })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    /// Seconds per sequence.
    pub mean: f64,
    pub sd: f64,
}

impl Timing {
    fn from_samples(s: &[f64]) -> Self {
        let n = s.len() as f64;
        let mean = s.iter().sum::<f64>() / n;
        let var = if s.len() > 1 {
            s.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Timing { mean, sd: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub repeats: usize,
    pub n_sequences: usize,
    pub n_tokens: usize,
    /// Encode and decode with no intervention.
    pub passthrough: Timing,
    pub static_guard: Timing,
    pub dynamic_guard: Timing,
    /// `dynamic.mean − static.mean`.
    pub dynamic_minus_static: f64,
}

/// Wall time per sequence, single thread, averaged over `repeats` passes.
pub fn latency_bench(guard: &Guard<'_>, corpus: &ActivationCorpus, repeats: usize) -> Result<LatencyReport> {
    if repeats < 3 {
        return Err(DsgError::invalid(format!("need at least 3 repeats, got {repeats}")));
    }
    if corpus.n_sequences() == 0 {
        return Err(DsgError::Empty("benchmark corpus has no sequences"));
    }
    let p = guard.params();
    let blocks: Vec<_> = corpus.blocks().map(|(_, b)| b).collect();
    let stat = Guard::static_baseline(p, guard.features().to_vec(), guard.clamp_c())?;
    let n = blocks.len() as f64;
    let mut pass = Vec::with_capacity(repeats);
    let mut st = Vec::with_capacity(repeats);
    let mut dy = Vec::with_capacity(repeats);
    let mut sink = 0.0f64;
    for _ in 0..repeats {
        let t0 = Instant::now();
        for b in &blocks {
            let r = decode(p, &encode(p, b)?)?;
            sink += r.get(0, 0);
        }
        pass.push(t0.elapsed().as_secs_f64() / n);
        let t0 = Instant::now();
        for b in &blocks {
            sink += stat.guard_sequence(b)?.modified.get(0, 0);
        }
        st.push(t0.elapsed().as_secs_f64() / n);
        let t0 = Instant::now();
        for b in &blocks {
            sink += guard.guard_sequence(b)?.modified.get(0, 0);
        }
        dy.push(t0.elapsed().as_secs_f64() / n);
    }
    std::hint::black_box(sink);
    let (ps, ss, ds) = (Timing::from_samples(&pass), Timing::from_samples(&st), Timing::from_samples(&dy));
    Ok(LatencyReport {
        repeats,
        n_sequences: blocks.len(),
        n_tokens: corpus.n_tokens(),
        passthrough: ps,
        static_guard: ss,
        dynamic_guard: ds,
        dynamic_minus_static: ds.mean - ss.mean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature_stats::{accumulate_stats, ratio_candidates, DEFAULT_EPSILON};
    use crate::synth::{generate, SynthSpec};
    use proptest::prelude::*;

    fn spec() -> SynthSpec {
        SynthSpec {
            d_model: 12,
            d_sae_true: 12,
            forget_feature_ids: vec![0, 3, 7],
            p_fire_forget: 0.5,
            p_fire_retain: 0.05,
            p_fire_background: 0.1,
            seq_len: (16, 48),
            n_sequences: 120,
            noise_sigma: 0.02,
            seed: 5,
        }
    }

    #[test]
    fn hand_binning() {
        let h = histogram(&[0.0, 0.25, 0.5, 0.75, 1.0], 0.0, 1.0, 4).unwrap();
        assert_eq!(h.counts, vec![2, 1, 1, 1]);
        let z = histogram(&[0.0; 9], 0.0, 1.0, 10).unwrap();
        assert_eq!(z.counts[0], 9);
        assert!(Histogram::new(0.0, 1.0, 1).is_err());
        let tenths: Vec<f64> = (0..=10).map(|k| k as f64 / 10.0).collect();
        let h = histogram(&tenths, 0.0, 1.0, 10).unwrap();
        assert_eq!(h.counts, vec![2, 1, 1, 1, 1, 1, 1, 1, 1, 1]);
    }

    #[test]
    fn separable_histograms_have_disjoint_modes() {
        let out = generate(&spec()).unwrap();
        let sae = out.truth.planted.planted_sae(0.3).unwrap();
        let f = rho_histogram(&sae, &[0, 3, 7], &out.forget, 20).unwrap();
        let r = rho_histogram(&sae, &[0, 3, 7], &out.retain, 20).unwrap();
        assert_eq!(f.total(), 120);
        assert!(f.mode() > r.mode() + 3);
    }

    #[test]
    fn tvd_trivial_cases() {
        let a = [0.1, 0.2, 0.2, 0.9];
        let same = tvd_compare(&a, &a, &TvdOptions::new(StatKind::Percentage, "aa", 1)).unwrap();
        assert_eq!(same.tvd, 0.0);
        let b = [0.0; 5];
        let c = [1.0; 3];
        let disjoint = tvd_compare(&b, &c, &TvdOptions::new(StatKind::Percentage, "bc", 1)).unwrap();
        assert_eq!(disjoint.tvd, 1.0);
        assert_eq!(disjoint.ci_low, 1.0);
        assert!(tvd_compare(&[], &a, &TvdOptions::new(StatKind::Raw, "x", 1)).is_err());
        let raw = tvd_compare(&[3.0, 3.0], &[3.0], &TvdOptions::new(StatKind::Raw, "const", 1)).unwrap();
        assert_eq!(raw.tvd, 0.0);
    }

    #[test]
    fn sweeps_behave() {
        let out = generate(&spec()).unwrap();
        let sae = out.truth.planted.planted_sae(0.3).unwrap();
        let fs = accumulate_stats(&sae, &out.forget).unwrap();
        let rs = accumulate_stats(&sae, &out.retain).unwrap();
        let base = SweepBase {
            p_ratio: 75.0,
            n_feats: 3,
            p_dyn: 95.0,
            clamp_c: 500.0,
            epsilon: DEFAULT_EPSILON,
        };
        let run = |axis, grid: &[f64]| ablation_sweep(axis, grid, base, &sae, &fs, &rs, &out.forget, &out.retain).unwrap();

        let pd = run(SweepAxis::PDyn, &[60.0, 70.0, 80.0, 90.0, 95.0, 97.0]);
        for w in pd.points.windows(2) {
            assert!(w[1].side_effect <= w[0].side_effect);
        }
        let cc = run(SweepAxis::ClampC, &[10.0, 50.0, 100.0, 500.0]);
        for pt in &cc.points {
            assert_eq!(pt.coverage, cc.points[0].coverage);
            assert_eq!(pt.side_effect, cc.points[0].side_effect);
        }
        assert!(cc.points[3].mean_shift > cc.points[0].mean_shift);

        let report = importance(&fs, &rs, DEFAULT_EPSILON).unwrap();
        let sel95 = select_features(&report, 95.0, 3).unwrap();
        let (_, cand75) = ratio_candidates(&report, 75.0).unwrap();
        assert!(sel95.ids.iter().all(|j| cand75.contains(j)));

        assert!(ablation_sweep(SweepAxis::NFeats, &[1.5], base, &sae, &fs, &rs, &out.forget, &out.retain).is_err());
        assert!(ablation_sweep(SweepAxis::PDyn, &[], base, &sae, &fs, &rs, &out.forget, &out.retain).is_err());
        let mut buf = Vec::new();
        pd.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 7);
    }

    #[test]
    fn latency_bench_completes() {
        let out = generate(&SynthSpec { n_sequences: 5, ..spec() }).unwrap();
        let sae = out.truth.planted.planted_sae(0.3).unwrap();
        let g = Guard::from_parts(&sae, vec![0, 3], 0.2, 500.0).unwrap();
        let r = latency_bench(&g, &out.forget, 3).unwrap();
        for t in [r.passthrough, r.static_guard, r.dynamic_guard] {
            assert!(t.mean.is_finite() && t.sd.is_finite());
        }
        assert!(latency_bench(&g, &out.forget, 2).is_err());
    }

    proptest! {
        #[test]
        fn histogram_counts_every_value(values in prop::collection::vec(0.0f64..=1.0, 1..60), bins in 2usize..30) {
            let h = histogram(&values, 0.0, 1.0, bins).unwrap();
            prop_assert_eq!(h.total(), values.len() as u64);
            for &v in &values {
                let k = h.bin_of(v);
                prop_assert!(v <= h.edge(k + 1));
                prop_assert!(k == 0 || v > h.edge(k));
            }
        }

        #[test]
        fn tvd_bounds(a in prop::collection::vec(0.0f64..=1.0, 1..40), b in prop::collection::vec(0.0f64..=1.0, 1..40)) {
            let mut o = TvdOptions::new(StatKind::Percentage, "p", 3);
            o.bootstrap_iters = 50;
            let r = tvd_compare(&a, &b, &o).unwrap();
            prop_assert!((0.0..=1.0).contains(&r.tvd));
            prop_assert!(r.ci_low <= r.ci_high);
            prop_assert!((0.0..=1.0).contains(&r.ci_low) && r.ci_high <= 1.0 + 1e-12);
        }
    }
}
