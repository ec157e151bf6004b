//! In-process chaining of the stages: statistics, selection, calibration and
//! guarding, plus the two sequential strategies.
//!
//! Config provenance only holds values derived from the inputs, so a config
//! built here is byte-identical to one built by running the stages from files.

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::corpus_io::{ActivationCorpus, GuardrailConfig};
use crate::dynamic_guard::{calibrate_tau, CorpusVerdicts, Guard};
use crate::error::{DsgError, Result};
use crate::feature_stats::{
    accumulate_stats, importance, select_features, FeatureStats, FeatureUnion, ImportanceReport, DEFAULT_EPSILON,
};
use crate::sae::SaeParams;

pub const DEFAULT_P_RATIO: f64 = 95.0;
pub const DEFAULT_N_FEATS: usize = 20;
pub const DEFAULT_P_DYN: f64 = 95.0;
pub const DEFAULT_CLAMP: f64 = 500.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineParams {
    pub p_ratio: f64,
    pub n_feats: usize,
    pub p_dyn: f64,
    pub clamp_c: f64,
    pub epsilon: f64,
}

impl Default for PipelineParams {
    fn default() -> Self {
        PipelineParams {
            p_ratio: DEFAULT_P_RATIO,
            n_feats: DEFAULT_N_FEATS,
            p_dyn: DEFAULT_P_DYN,
            clamp_c: DEFAULT_CLAMP,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

/// Selection stage: a config with features but no `tau`.
pub fn select_config(
    forget: &FeatureStats,
    retain: &FeatureStats,
    p_ratio: f64,
    n_feats: usize,
    epsilon: f64,
    clamp_c: f64,
) -> Result<(GuardrailConfig, ImportanceReport)> {
    let report = importance(forget, retain, epsilon)?;
    let sel = select_features(&report, p_ratio, n_feats)?;
    let mut cfg = GuardrailConfig::new(sel.ids.clone(), clamp_c);
    cfg.p_ratio = Some(p_ratio);
    cfg.n_feats = n_feats;
    let prov = &mut cfg.provenance;
    prov.insert("forget_tokens".into(), json!(forget.n_tokens()));
    prov.insert("retain_tokens".into(), json!(retain.n_tokens()));
    prov.insert("epsilon".into(), json!(epsilon));
    prov.insert("tau_ratio".into(), json!(sel.tau_ratio));
    prov.insert("n_candidates".into(), json!(sel.n_candidates));
    cfg.validate(Some(forget.d_sae()))?;
    Ok((cfg, report))
}

/// Calibration stage: fills `tau` from the retain corpus.
pub fn calibrate_config(
    cfg: &GuardrailConfig,
    p: &SaeParams,
    retain: &ActivationCorpus,
    p_dyn: f64,
) -> Result<GuardrailConfig> {
    if cfg.feature_ids.is_empty() {
        return Err(DsgError::config("cannot calibrate an empty feature set"));
    }
    let tau = calibrate_tau(p, &cfg.feature_ids, retain, p_dyn)?;
    let mut out = cfg.clone();
    out.tau = Some(tau);
    out.p_dyn = Some(p_dyn);
    out.provenance
        .insert("calibration_sequences".into(), json!(retain.n_sequences()));
    out.provenance
        .insert("calibration_digest".into(), Value::String(retain.digest()));
    out.validate(Some(p.d_sae()))?;
    Ok(out)
}

pub fn build_config(
    p: &SaeParams,
    forget: &ActivationCorpus,
    retain: &ActivationCorpus,
    params: &PipelineParams,
) -> Result<GuardrailConfig> {
    let fs = accumulate_stats(p, forget)?;
    let rs = accumulate_stats(p, retain)?;
    let (cfg, _) = select_config(&fs, &rs, params.p_ratio, params.n_feats, params.epsilon, params.clamp_c)?;
    calibrate_config(&cfg, p, retain, params.p_dyn)
}

#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub config: GuardrailConfig,
    pub forget: CorpusVerdicts,
    pub retain: CorpusVerdicts,
}

impl PipelineRun {
    pub fn coverage(&self) -> f64 {
        self.forget.classified_rate()
    }

    pub fn side_effect(&self) -> f64 {
        self.retain.classified_rate()
    }
}

/// Builds a config and guards both corpora with it.
pub fn run_end_to_end(
    p: &SaeParams,
    forget: &ActivationCorpus,
    retain: &ActivationCorpus,
    params: &PipelineParams,
) -> Result<PipelineRun> {
    let config = build_config(p, forget, retain, params)?;
    let guard = Guard::new(p, &config)?;
    Ok(PipelineRun {
        forget: guard.guard_corpus(forget)?,
        retain: guard.guard_corpus(retain)?,
        config,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Selection from the cumulative forget statistics.
    All,
    /// Union of the per-step selections.
    Union,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::All => "all",
            Strategy::Union => "union",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Strategy::All),
            "union" => Ok(Strategy::Union),
            other => Err(DsgError::invalid(format!("unknown strategy {other:?}, expected all or union"))),
        }
    }
}

/// One calibrated config per forget request, in order. Each config records
/// its step, the strategy and the feature ids of the previous step.
pub fn sequential(
    strategy: Strategy,
    p: &SaeParams,
    folds: &[ActivationCorpus],
    retain: &ActivationCorpus,
    params: &PipelineParams,
) -> Result<Vec<GuardrailConfig>> {
    if folds.is_empty() {
        return Err(DsgError::Empty("no forget requests"));
    }
    let rs = accumulate_stats(p, retain)?;
    let mut history = FeatureStats::zeros(p.d_sae());
    let mut union = FeatureUnion::new();
    let mut out: Vec<GuardrailConfig> = Vec::with_capacity(folds.len());
    for (k, fold) in folds.iter().enumerate() {
        let step = accumulate_stats(p, fold)?;
        let mut cfg = match strategy {
            Strategy::All => {
                history.merge_in_place(&step)?;
                select_config(&history, &rs, params.p_ratio, params.n_feats, params.epsilon, params.clamp_c)?.0
            }
            Strategy::Union => {
                let (mut c, _) = select_config(&step, &rs, params.p_ratio, params.n_feats, params.epsilon, params.clamp_c)?;
                union.extend(&c.feature_ids);
                c.feature_ids = union.ids().to_vec();
                c
            }
        };
        cfg.provenance.insert("strategy".into(), json!(strategy.name()));
        cfg.provenance.insert("step".into(), json!(k + 1));
        cfg.provenance.insert("fold_digest".into(), Value::String(fold.digest()));
        let prior = out.last().map(|c| c.feature_ids.clone()).unwrap_or_default();
        cfg.provenance.insert("prior_feature_ids".into(), json!(prior));
        out.push(calibrate_config(&cfg, p, retain, params.p_dyn)?);
    }
    Ok(out)
}
