use std::time::{SystemTime, UNIX_EPOCH};

use dsg_core::corpus_io::write_atomic;
use dsg_core::oracle::{
    dominance_check, fisher_identity_check, np_optimality_check, sequential_equivalence_check, DiscreteRhoModel,
    VerificationReport,
};
use dsg_core::sae::{train_desk_sae, TrainConfig};
use dsg_core::synth::{generate, sample_corpus, PlantedBasis, Role, SynthSpec};
use dsg_core::ActivationCorpus;

use crate::error::CliError;
use crate::manifest::RunManifest;
use crate::VerifyArgs;

fn planted_spec(n: usize, seq_len: (usize, usize), seed: u64) -> SynthSpec {
    SynthSpec {
        d_model: 64,
        d_sae_true: 64,
        forget_feature_ids: vec![5, 17, 40],
        p_fire_forget: 0.5,
        p_fire_retain: 0.05,
        p_fire_background: 0.1,
        seq_len,
        n_sequences: n,
        noise_sigma: 0.02,
        seed,
    }
}

fn background_spec(seed: u64) -> SynthSpec {
    SynthSpec {
        d_model: 16,
        d_sae_true: 8,
        forget_feature_ids: vec![],
        p_fire_forget: 0.0,
        p_fire_retain: 0.0,
        p_fire_background: 0.25,
        seq_len: (8, 24),
        n_sequences: 60,
        noise_sigma: 0.05,
        seed,
    }
}

fn clock_seed() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_nanos() as u64)
        .unwrap_or(0)
}

/// Runs every oracle against data drawn from `seed`.
pub fn suite(seed: u64) -> dsg_core::Result<VerificationReport> {
    let mut checks = Vec::new();
    let sub = |k: u64| seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(k);

    checks.push(np_optimality_check(&DiscreteRhoModel::geometric(8, 1.6)?)?);

    let out = generate(&planted_spec(500, (32, 128), sub(1)))?;
    let sae = out.truth.planted.planted_sae(0.3)?;
    let mut r = dominance_check(&sae, &out.truth.forget_feature_ids, 500.0, &out.forget, &out.retain, 95.0)?;
    r.seeds.push(sub(1));
    checks.push(r);

    let bg = generate(&background_spec(sub(2)))?;
    let corpus = ActivationCorpus::concat([&bg.forget, &bg.retain])?;
    let trained = train_desk_sae(&corpus, &TrainConfig::new(32, 0.05, 600, sub(3)))?;
    let mut r = fisher_identity_check(&trained, &corpus, 1000, sub(4))?;
    r.seeds.extend([sub(2), sub(3)]);
    checks.push(r);

    let base = planted_spec(100, (16, 64), sub(5));
    let planted = PlantedBasis::sample(base.d_model, base.d_sae_true, base.seed);
    let sae = planted.planted_sae(0.3)?;
    let folds = (0..4)
        .map(|k| {
            let spec = SynthSpec {
                seed: sub(10 + k),
                ..base.clone()
            };
            sample_corpus(&spec, &planted, Role::Forget).map(|c| c.0)
        })
        .collect::<dsg_core::Result<Vec<_>>>()?;
    let retain = sample_corpus(&base, &planted, Role::Retain)?.0;
    checks.push(sequential_equivalence_check(&sae, &folds, &retain, 95.0, 3, sub(6))?);

    Ok(VerificationReport { checks })
}

pub fn run(a: &VerifyArgs, seed: Option<u64>) -> Result<(), CliError> {
    let seed = seed.unwrap_or_else(clock_seed);
    let mut m = RunManifest::start("verify", a, Some(seed))?;
    let report = suite(seed)?;
    let mut value = serde_json::to_value(&report)?;
    value["seed"] = seed.into();
    let mut text = serde_json::to_string_pretty(&value)?;
    text.push('\n');
    write_atomic(&a.out, text.as_bytes())?;
    m.output(&a.out);
    m.finish(&a.out)?;
    for c in &report.checks {
        log::info!("{}: {:?}", c.name, c.status);
    }
    let failed: Vec<&str> = report
        .checks
        .iter()
        .filter(|c| !c.passed())
        .map(|c| c.name.as_str())
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Verification(format!("failed checks: {} (seed {seed})", failed.join(", "))))
    }
}
