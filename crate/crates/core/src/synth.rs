//! Seeded corpora over a planted dictionary.
//!
//! Every token is `Σ m_j · d_j + σ·ε` over the planted features `j` that fire
//! at it, with magnitudes `m_j ~ U[0.5, 1.5]`. Forget-mediating features fire
//! with `p_fire_forget` on forget sequences and `p_fire_retain` on retain
//! sequences; the remaining planted features fire with `p_fire_background`
//! on both.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus_io::{write_atomic, ActivationCorpus};
use crate::error::{DsgError, Result};
use crate::sae::{unit_vector, SaeParams};

fn default_background() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub d_model: usize,
    pub d_sae_true: usize,
    pub forget_feature_ids: Vec<usize>,
    pub p_fire_forget: f64,
    pub p_fire_retain: f64,
    #[serde(default = "default_background")]
    pub p_fire_background: f64,
    /// Inclusive `(min, max)`; equal bounds give a fixed length.
    pub seq_len: (usize, usize),
    pub n_sequences: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_sae_true == 0 {
            return Err(DsgError::invalid("d_model and d_sae_true must be positive"));
        }
        let (pf, pr, pb) = (self.p_fire_forget, self.p_fire_retain, self.p_fire_background);
        if !(0.0..=1.0).contains(&pr) || !(0.0..=1.0).contains(&pf) || pr > pf {
            return Err(DsgError::invalid(format!(
                "need 0 <= p_fire_retain <= p_fire_forget <= 1, got {pr} and {pf}"
            )));
        }
        if !(0.0..=1.0).contains(&pb) {
            return Err(DsgError::invalid(format!("p_fire_background {pb} outside [0, 1]")));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(DsgError::invalid(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        let (lo, hi) = self.seq_len;
        if lo == 0 || lo > hi {
            return Err(DsgError::invalid(format!("bad sequence length range ({lo}, {hi})")));
        }
        let mut seen = vec![false; self.d_sae_true];
        for &j in &self.forget_feature_ids {
            if j >= self.d_sae_true {
                return Err(DsgError::invalid(format!(
                    "forget feature {j} outside planted dictionary of size {}",
                    self.d_sae_true
                )));
            }
            if std::mem::replace(&mut seen[j], true) {
                return Err(DsgError::invalid(format!("forget feature {j} listed twice")));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: SynthSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Forget,
    Retain,
}

impl Role {
    fn stream(self) -> u64 {
        match self {
            Role::Forget => 1 << 40,
            Role::Retain => 2 << 40,
        }
    }

    fn prefix(self) -> &'static str {
        match self {
            Role::Forget => "forget",
            Role::Retain => "retain",
        }
    }
}

/// Unit-norm planted directions. When the dictionary fits in `d_model` the
/// directions are orthonormal and `basis` is completed to a full orthonormal
/// basis of the space; otherwise `basis` holds only the planted directions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedBasis {
    pub d_model: usize,
    pub n_planted: usize,
    pub basis: Vec<Vec<f64>>,
}

impl PlantedBasis {
    pub fn sample(d_model: usize, n_planted: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let basis = if n_planted <= d_model {
            let mut out: Vec<Vec<f64>> = Vec::with_capacity(d_model);
            while out.len() < d_model {
                let mut v: Vec<f64> = (0..d_model).map(|_| rng.sample(StandardNormal)).collect();
                // two passes of modified Gram-Schmidt
                for _ in 0..2 {
                    for u in &out {
                        let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                        for (vi, ui) in v.iter_mut().zip(u) {
                            *vi -= dot * ui;
                        }
                    }
                }
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 1e-6 {
                    out.push(v.into_iter().map(|x| x / norm).collect());
                }
            }
            out
        } else {
            (0..n_planted).map(|_| unit_vector(&mut rng, d_model)).collect()
        };
        PlantedBasis {
            d_model,
            n_planted,
            basis,
        }
    }

    pub fn direction(&self, j: usize) -> &[f64] {
        &self.basis[j]
    }

    /// SAE whose encoder and decoder rows are the basis vectors, zero biases
    /// and a shared threshold. Feature ids coincide with planted ids.
    pub fn planted_sae(&self, theta: f32) -> Result<SaeParams> {
        let d_sae = self.basis.len();
        let rows: Vec<f32> = self.basis.iter().flatten().map(|&v| v as f32).collect();
        SaeParams::new(
            self.d_model,
            d_sae,
            rows.clone(),
            vec![0.0; d_sae],
            rows,
            vec![0.0; self.d_model],
            vec![theta; d_sae],
        )
    }
}

/// Planted ids that fired at each token, per sequence.
pub type FiringMasks = Vec<Vec<Vec<u32>>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub forget_feature_ids: Vec<usize>,
    pub planted: PlantedBasis,
    pub forget_masks: FiringMasks,
    pub retain_masks: FiringMasks,
}

impl GroundTruth {
    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = serde_json::to_string(self)?;
        text.push('\n');
        write_atomic(path.as_ref(), text.as_bytes())
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub forget: ActivationCorpus,
    pub retain: ActivationCorpus,
    pub truth: GroundTruth,
}

/// Samples one corpus over an existing basis. Each sequence draws from its
/// own ChaCha stream keyed by role and index, so sequences are independent of
/// each other and of generation order.
pub fn sample_corpus(spec: &SynthSpec, planted: &PlantedBasis, role: Role) -> Result<(ActivationCorpus, FiringMasks)> {
    spec.validate()?;
    if planted.d_model != spec.d_model || planted.n_planted != spec.d_sae_true {
        return Err(DsgError::invalid("planted basis does not match the spec dimensions"));
    }
    let d = spec.d_model;
    let mut is_forget = vec![false; spec.d_sae_true];
    for &j in &spec.forget_feature_ids {
        is_forget[j] = true;
    }
    let p_target = match role {
        Role::Forget => spec.p_fire_forget,
        Role::Retain => spec.p_fire_retain,
    };
    let mut seqs = Vec::with_capacity(spec.n_sequences);
    let mut masks = Vec::with_capacity(spec.n_sequences);
    for i in 0..spec.n_sequences {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(role.stream() + i as u64);
        let len = rng.random_range(spec.seq_len.0..=spec.seq_len.1);
        let mut rows = vec![0.0f64; len * d];
        let mut seq_mask = Vec::with_capacity(len);
        for t in 0..len {
            let h = &mut rows[t * d..(t + 1) * d];
            let mut fired = Vec::new();
            for j in 0..spec.d_sae_true {
                let p = if is_forget[j] { p_target } else { spec.p_fire_background };
                if rng.random_bool(p) {
                    let m = rng.random_range(0.5..=1.5);
                    for (hi, u) in h.iter_mut().zip(planted.direction(j)) {
                        *hi += m * u;
                    }
                    fired.push(j as u32);
                }
            }
            if spec.noise_sigma > 0.0 {
                for hi in h.iter_mut() {
                    let e: f64 = rng.sample(StandardNormal);
                    *hi += spec.noise_sigma * e;
                }
            }
            seq_mask.push(fired);
        }
        seqs.push((
            format!("{}-{i}", role.prefix()),
            rows.into_iter().map(|v| v as f32).collect(),
        ));
        masks.push(seq_mask);
    }
    Ok((ActivationCorpus::from_sequences(d, seqs)?, masks))
}

pub fn generate(spec: &SynthSpec) -> Result<SynthOutput> {
    spec.validate()?;
    let planted = PlantedBasis::sample(spec.d_model, spec.d_sae_true, spec.seed);
    let (forget, forget_masks) = sample_corpus(spec, &planted, Role::Forget)?;
    let (retain, retain_masks) = sample_corpus(spec, &planted, Role::Retain)?;
    Ok(SynthOutput {
        forget,
        retain,
        truth: GroundTruth {
            forget_feature_ids: spec.forget_feature_ids.clone(),
            planted,
            forget_masks,
            retain_masks,
        },
    })
}
