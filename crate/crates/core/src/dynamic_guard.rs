//! Sequence-level gating and feature clamping.
//!
//! A token is *activated* when any selected feature has a strictly positive
//! JumpReLU output on it. `ρ(x)` is the activated fraction of a sequence and
//! the classifier is `ρ(x) > τ`. A flagged sequence gets every selected
//! feature set to `−c` at every token; everything else passes through
//! untouched. The static baseline clamps only the (token, feature) pairs that
//! fire, with no sequence gate.

use std::collections::HashSet;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::corpus_io::{ActivationCorpus, GuardrailConfig};
use crate::error::{DsgError, Result};
use crate::feature_stats::percentile;
use crate::matrix::Matrix;
use crate::sae::{decode, encode, FeatureBlock, HiddenBlock, SaeParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RhoValue {
    pub rho: f64,
    pub raw_count: usize,
    pub length: usize,
}

impl RhoValue {
    fn new(raw_count: usize, length: usize) -> Self {
        RhoValue {
            rho: raw_count as f64 / length as f64,
            raw_count,
            length,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum GuardMode {
    /// Classify with `ρ > τ`, then clamp every token of flagged sequences.
    #[default]
    Dynamic,
    /// Clamp each firing (token, feature) pair, no sequence gate.
    Static,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuardOptions {
    /// Add the original reconstruction error `h − ĥ(f(h))` back onto the
    /// intervened reconstruction.
    pub preserve_error: bool,
}

impl Default for GuardOptions {
    fn default() -> Self {
        GuardOptions {
            preserve_error: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuardVerdict {
    pub classified_forget: bool,
    pub rho: RhoValue,
    pub modified: HiddenBlock,
    pub tokens_modified: usize,
}

/// Intervened codes next to the resulting hidden states.
#[derive(Debug, Clone)]
pub struct Intervention {
    pub features: FeatureBlock,
    pub modified: HiddenBlock,
    pub tokens_modified: usize,
}

fn check_features(p: &SaeParams, features: &[usize]) -> Result<()> {
    if features.is_empty() {
        return Err(DsgError::config("empty feature set: the guardrail would be vacuous"));
    }
    let mut seen = HashSet::with_capacity(features.len());
    for &j in features {
        if j >= p.d_sae() {
            return Err(DsgError::config(format!(
                "feature id {j} out of range for dictionary width {}",
                p.d_sae()
            )));
        }
        if !seen.insert(j) {
            return Err(DsgError::config(format!("feature id {j} listed twice")));
        }
    }
    Ok(())
}

fn check_block(p: &SaeParams, x: &HiddenBlock) -> Result<()> {
    if x.cols() != p.d_model() {
        return Err(DsgError::DimensionMismatch {
            context: "guard input width",
            expected: p.d_model(),
            found: x.cols(),
        });
    }
    if x.rows() == 0 {
        return Err(DsgError::Empty("sequence has no tokens"));
    }
    Ok(())
}

#[inline]
fn token_activated(p: &SaeParams, features: &[usize], h: &[f64]) -> bool {
    features.iter().any(|&j| p.activation(j, h) > 0.0)
}

/// `ρ` without argument validation.
fn rho_unchecked(p: &SaeParams, features: &[usize], x: &HiddenBlock) -> RhoValue {
    let raw = x
        .iter_rows()
        .filter(|h| token_activated(p, features, h))
        .count();
    RhoValue::new(raw, x.rows())
}

pub fn rho(p: &SaeParams, features: &[usize], x: &HiddenBlock) -> Result<RhoValue> {
    check_features(p, features)?;
    check_block(p, x)?;
    Ok(rho_unchecked(p, features, x))
}

/// Per-sequence `ρ` over a corpus, in stored order.
pub fn sequence_rhos(p: &SaeParams, features: &[usize], corpus: &ActivationCorpus) -> Result<Vec<RhoValue>> {
    check_features(p, features)?;
    if corpus.d_model() != p.d_model() {
        return Err(DsgError::DimensionMismatch {
            context: "corpus width",
            expected: p.d_model(),
            found: corpus.d_model(),
        });
    }
    let mut h = vec![0.0; p.d_model()];
    let mut out = Vec::with_capacity(corpus.n_sequences());
    for span in corpus.spans() {
        let mut raw = 0;
        for t in span.range() {
            for (hi, &v) in h.iter_mut().zip(corpus.token_row(t)) {
                *hi = f64::from(v);
            }
            if token_activated(p, features, &h) {
                raw += 1;
            }
        }
        out.push(RhoValue::new(raw, span.length as usize));
    }
    Ok(out)
}

/// `τ` = nearest-rank `p_dyn`-th percentile of retain-sequence `ρ`.
pub fn calibrate_tau(
    p: &SaeParams,
    features: &[usize],
    retain: &ActivationCorpus,
    p_dyn: f64,
) -> Result<f64> {
    if retain.n_sequences() == 0 {
        return Err(DsgError::Empty("retain corpus has no sequences"));
    }
    let rhos: Vec<f64> = sequence_rhos(p, features, retain)?
        .iter()
        .map(|r| r.rho)
        .collect();
    percentile(&rhos, p_dyn)
}

/// Applies `f'_j = −c` on the masked tokens and rebuilds the hidden states.
/// Rows outside `token_mask` are copied through unchanged.
fn intervene(
    p: &SaeParams,
    x: &HiddenBlock,
    features: &[usize],
    clamp_c: f64,
    token_mask: &[bool],
    options: GuardOptions,
) -> Result<Intervention> {
    let f = encode(p, x)?;
    let mut clamped = f.clone();
    for (t, &on) in token_mask.iter().enumerate() {
        if on {
            for &j in features {
                clamped.set(t, j, -clamp_c);
            }
        }
    }
    let recon_new = decode(p, &clamped)?;
    let recon_old = if options.preserve_error {
        Some(decode(p, &f)?)
    } else {
        None
    };
    let mut modified = x.clone();
    let mut tokens_modified = 0;
    for (t, &on) in token_mask.iter().enumerate() {
        if !on {
            continue;
        }
        tokens_modified += 1;
        let out = modified.row_mut(t);
        match &recon_old {
            Some(old) => {
                for (i, o) in out.iter_mut().enumerate() {
                    let err = x.get(t, i) - old.get(t, i);
                    *o = recon_new.get(t, i) + err;
                }
            }
            None => out.copy_from_slice(recon_new.row(t)),
        }
    }
    Ok(Intervention {
        features: clamped,
        modified,
        tokens_modified,
    })
}

/// Guard state validated once and applied to many sequences. Immutable, so a
/// single instance can serve concurrent callers.
#[derive(Debug, Clone)]
pub struct Guard<'a> {
    params: &'a SaeParams,
    features: Vec<usize>,
    tau: f64,
    clamp_c: f64,
    mode: GuardMode,
    options: GuardOptions,
}

impl<'a> Guard<'a> {
    pub fn new(params: &'a SaeParams, cfg: &GuardrailConfig) -> Result<Self> {
        let tau = cfg
            .tau
            .ok_or_else(|| DsgError::config("config has no tau; run calibration or pass an override"))?;
        Self::from_parts(params, cfg.feature_ids.clone(), tau, cfg.clamp_c)
    }

    pub fn from_parts(
        params: &'a SaeParams,
        features: Vec<usize>,
        tau: f64,
        clamp_c: f64,
    ) -> Result<Self> {
        check_features(params, &features)?;
        if !tau.is_finite() {
            return Err(DsgError::config(format!("tau must be finite, got {tau}")));
        }
        if !(0.0..=1.0).contains(&tau) {
            log::warn!("tau {tau} lies outside [0, 1]; every sequence will be classified the same way");
        }
        if !(clamp_c.is_finite() && clamp_c > 0.0) {
            return Err(DsgError::config(format!("clamp_c must be positive, got {clamp_c}")));
        }
        Ok(Guard {
            params,
            features,
            tau,
            clamp_c,
            mode: GuardMode::Dynamic,
            options: GuardOptions::default(),
        })
    }

    /// Static baseline guard; `tau` is unused.
    pub fn static_baseline(params: &'a SaeParams, features: Vec<usize>, clamp_c: f64) -> Result<Self> {
        let mut g = Self::from_parts(params, features, 0.0, clamp_c)?;
        g.mode = GuardMode::Static;
        Ok(g)
    }

    pub fn with_mode(mut self, mode: GuardMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_options(mut self, options: GuardOptions) -> Self {
        self.options = options;
        self
    }

    pub fn with_tau(mut self, tau: f64) -> Self {
        self.tau = tau;
        self
    }

    pub fn with_clamp(mut self, clamp_c: f64) -> Self {
        self.clamp_c = clamp_c;
        self
    }

    pub fn features(&self) -> &[usize] {
        &self.features
    }
    pub fn tau(&self) -> f64 {
        self.tau
    }
    pub fn clamp_c(&self) -> f64 {
        self.clamp_c
    }
    pub fn mode(&self) -> GuardMode {
        self.mode
    }
    pub fn params(&self) -> &SaeParams {
        self.params
    }

    pub fn rho(&self, x: &HiddenBlock) -> Result<RhoValue> {
        check_block(self.params, x)?;
        Ok(rho_unchecked(self.params, &self.features, x))
    }

    pub fn classify(&self, rho: &RhoValue) -> bool {
        rho.rho > self.tau
    }

    pub fn guard_sequence(&self, x: &HiddenBlock) -> Result<GuardVerdict> {
        self.guard_masked(x, None)
    }

    /// Like [`Guard::guard_sequence`], restricting intervention to tokens where
    /// `scope` is true. `ρ` is still computed over the whole sequence.
    pub fn guard_masked(&self, x: &HiddenBlock, scope: Option<&[bool]>) -> Result<GuardVerdict> {
        check_block(self.params, x)?;
        if let Some(s) = scope {
            if s.len() != x.rows() {
                return Err(DsgError::DimensionMismatch {
                    context: "clamp scope mask",
                    expected: x.rows(),
                    found: s.len(),
                });
            }
        }
        let in_scope = |t: usize| scope.map_or(true, |s| s[t]);
        let p = self.params;
        let activated: Vec<bool> = x
            .iter_rows()
            .map(|h| token_activated(p, &self.features, h))
            .collect();
        let rho = RhoValue::new(activated.iter().filter(|&&a| a).count(), x.rows());
        let mask: Vec<bool> = match self.mode {
            GuardMode::Dynamic => {
                if !self.classify(&rho) {
                    return Ok(GuardVerdict {
                        classified_forget: false,
                        rho,
                        modified: x.clone(),
                        tokens_modified: 0,
                    });
                }
                (0..x.rows()).map(in_scope).collect()
            }
            GuardMode::Static => activated
                .iter()
                .enumerate()
                .map(|(t, &a)| a && in_scope(t))
                .collect(),
        };
        if !mask.iter().any(|&m| m) {
            return Ok(GuardVerdict {
                classified_forget: self.mode == GuardMode::Dynamic,
                rho,
                modified: x.clone(),
                tokens_modified: 0,
            });
        }
        let iv = match self.mode {
            GuardMode::Dynamic => intervene(p, x, &self.features, self.clamp_c, &mask, self.options)?,
            GuardMode::Static => self.intervene_static(x, &mask)?,
        };
        Ok(GuardVerdict {
            classified_forget: match self.mode {
                GuardMode::Dynamic => true,
                GuardMode::Static => iv.tokens_modified > 0,
            },
            rho,
            modified: iv.modified,
            tokens_modified: iv.tokens_modified,
        })
    }

    /// Static clamp: only features that fire at a token are set to `−c`.
    fn intervene_static(&self, x: &HiddenBlock, mask: &[bool]) -> Result<Intervention> {
        let p = self.params;
        let f = encode(p, x)?;
        let mut clamped = f.clone();
        for (t, &on) in mask.iter().enumerate() {
            if on {
                for &j in &self.features {
                    if f.get(t, j) > 0.0 {
                        clamped.set(t, j, -self.clamp_c);
                    }
                }
            }
        }
        let recon_new = decode(p, &clamped)?;
        let recon_old = decode(p, &f)?;
        let mut modified = x.clone();
        let mut tokens_modified = 0;
        for (t, &on) in mask.iter().enumerate() {
            if !on {
                continue;
            }
            tokens_modified += 1;
            for i in 0..x.cols() {
                let v = if self.options.preserve_error {
                    recon_new.get(t, i) + (x.get(t, i) - recon_old.get(t, i))
                } else {
                    recon_new.get(t, i)
                };
                modified.set(t, i, v);
            }
        }
        Ok(Intervention {
            features: clamped,
            modified,
            tokens_modified,
        })
    }

    /// The intervened codes and hidden states for a sequence the classifier
    /// has flagged (dynamic rule, every token).
    pub fn forced_intervention(&self, x: &HiddenBlock) -> Result<Intervention> {
        check_block(self.params, x)?;
        let mask = vec![true; x.rows()];
        intervene(self.params, x, &self.features, self.clamp_c, &mask, self.options)
    }

    pub fn guard_corpus(&self, corpus: &ActivationCorpus) -> Result<CorpusVerdicts> {
        if corpus.d_model() != self.params.d_model() {
            return Err(DsgError::DimensionMismatch {
                context: "corpus width",
                expected: self.params.d_model(),
                found: corpus.d_model(),
            });
        }
        let mut verdicts = Vec::with_capacity(corpus.n_sequences());
        for (span, block) in corpus.blocks() {
            let v = self.guard_sequence(&block).map_err(|e| DsgError::Sequence {
                tag: span.tag.clone(),
                source: Box::new(e),
            })?;
            verdicts.push(v);
        }
        Ok(CorpusVerdicts {
            tags: corpus.spans().iter().map(|s| s.tag.clone()).collect(),
            verdicts,
        })
    }

    /// Incremental guard for autoregressive use.
    pub fn prefix(&self) -> PrefixGuard<'_, 'a> {
        PrefixGuard {
            guard: self,
            activated: 0,
            seen: 0,
            triggered: false,
        }
    }
}

/// Recomputes `ρ` over the growing prefix after every token. Once the prefix
/// is classified forget-relevant the guard latches and clamps that token and
/// every later one.
#[derive(Debug)]
pub struct PrefixGuard<'g, 'a> {
    guard: &'g Guard<'a>,
    activated: usize,
    seen: usize,
    triggered: bool,
}

impl PrefixGuard<'_, '_> {
    pub fn triggered(&self) -> bool {
        self.triggered
    }

    pub fn rho(&self) -> RhoValue {
        RhoValue::new(self.activated, self.seen.max(1))
    }

    /// Feeds one hidden row and returns the row to pass downstream.
    pub fn push(&mut self, h: &[f64]) -> Result<Vec<f64>> {
        let p = self.guard.params;
        if h.len() != p.d_model() {
            return Err(DsgError::DimensionMismatch {
                context: "prefix guard row",
                expected: p.d_model(),
                found: h.len(),
            });
        }
        self.seen += 1;
        if token_activated(p, &self.guard.features, h) {
            self.activated += 1;
        }
        if !self.triggered && self.guard.classify(&self.rho()) {
            self.triggered = true;
        }
        if !self.triggered {
            return Ok(h.to_vec());
        }
        let x = Matrix::from_vec(1, h.len(), h.to_vec())?;
        let iv = intervene(p, &x, &self.guard.features, self.guard.clamp_c, &[true], self.guard.options)?;
        Ok(iv.modified.row(0).to_vec())
    }
}

#[derive(Debug, Clone)]
pub struct CorpusVerdicts {
    pub tags: Vec<String>,
    pub verdicts: Vec<GuardVerdict>,
}

impl CorpusVerdicts {
    pub fn n_classified(&self) -> usize {
        self.verdicts.iter().filter(|v| v.classified_forget).count()
    }

    pub fn n_tokens(&self) -> usize {
        self.verdicts.iter().map(|v| v.rho.length).sum()
    }

    pub fn n_tokens_modified(&self) -> usize {
        self.verdicts.iter().map(|v| v.tokens_modified).sum()
    }

    /// Fraction of sequences that were intervened on: coverage on a forget
    /// corpus, side-effect on a retain corpus.
    pub fn classified_rate(&self) -> f64 {
        if self.verdicts.is_empty() {
            return 0.0;
        }
        self.n_classified() as f64 / self.verdicts.len() as f64
    }

    pub fn token_rate(&self) -> f64 {
        let n = self.n_tokens();
        if n == 0 {
            return 0.0;
        }
        self.n_tokens_modified() as f64 / n as f64
    }

    pub fn modified_blocks(&self) -> Vec<HiddenBlock> {
        self.verdicts.iter().map(|v| v.modified.clone()).collect()
    }

    /// `tag,T,raw_count,rho,classified,tokens_modified`
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["tag", "T", "raw_count", "rho", "classified", "tokens_modified"])?;
        for (tag, v) in self.tags.iter().zip(&self.verdicts) {
            out.write_record([
                tag.clone(),
                v.rho.length.to_string(),
                v.rho.raw_count.to_string(),
                v.rho.rho.to_string(),
                u8::from(v.classified_forget).to_string(),
                v.tokens_modified.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

pub fn guard_sequence(p: &SaeParams, cfg: &GuardrailConfig, x: &HiddenBlock) -> Result<GuardVerdict> {
    Guard::new(p, cfg)?.guard_sequence(x)
}

pub fn clamp_static(p: &SaeParams, features: &[usize], c: f64, x: &HiddenBlock) -> Result<GuardVerdict> {
    Guard::static_baseline(p, features.to_vec(), c)?.guard_sequence(x)
}

pub fn guard_corpus(p: &SaeParams, cfg: &GuardrailConfig, corpus: &ActivationCorpus) -> Result<CorpusVerdicts> {
    Guard::new(p, cfg)?.guard_corpus(corpus)
}
