use std::path::Path;

use dsg_core::corpus_io::{
    parse_feature_list, read_config, read_corpus, read_stats, read_weights, write_atomic, write_config,
    write_corpus, write_stats, write_weights,
};
use dsg_core::dynamic_guard::{sequence_rhos, Guard, GuardMode, GuardOptions};
use dsg_core::eval::{ablation_sweep, latency_bench, rho_histogram, tvd_compare, StatKind, SweepAxis, SweepBase, TvdOptions};
use dsg_core::feature_stats::{accumulate_stats, FeatureStats};
use dsg_core::pipeline::{self, calibrate_config, select_config, PipelineParams, Strategy};
use dsg_core::sae::{train_desk_sae, TrainConfig};
use dsg_core::synth::{generate, SynthSpec};
use dsg_core::{ActivationCorpus, GuardrailConfig, SaeParams};

use crate::error::CliError;
use crate::manifest::RunManifest;
use crate::{
    BenchArgs, CalibrateArgs, GuardArgs, HistogramArgs, MergeArgs, SelectArgs, SequentialArgs, StatsArgs, SweepArgs,
    SynthArgs, TrainArgs, TvdArgs,
};

fn load_weights(m: &mut RunManifest, path: &Path) -> Result<SaeParams, CliError> {
    m.input(path)?;
    Ok(read_weights(path)?)
}

fn load_corpus(m: &mut RunManifest, path: &Path) -> Result<ActivationCorpus, CliError> {
    m.input(path)?;
    Ok(read_corpus(path)?)
}

fn load_config(m: &mut RunManifest, path: &Path, d_sae: Option<usize>) -> Result<GuardrailConfig, CliError> {
    m.input(path)?;
    Ok(read_config(path, d_sae)?)
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn csv_bytes<F>(f: F) -> Result<Vec<u8>, CliError>
where
    F: FnOnce(&mut Vec<u8>) -> dsg_core::Result<()>,
{
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

fn json_bytes<T: serde::Serialize>(v: &T) -> Result<Vec<u8>, CliError> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s.into_bytes())
}

pub fn synth(a: &SynthArgs, seed: Option<u64>) -> Result<(), CliError> {
    let mut m = RunManifest::start("synth", a, seed)?;
    m.input(&a.spec)?;
    let text = std::fs::read_to_string(&a.spec)?;
    let mut value: serde_json::Value = serde_json::from_str(&text)?;
    let obj = value
        .as_object_mut()
        .ok_or_else(|| CliError::Validation("spec must be a JSON object".into()))?;
    if !obj.contains_key("seed") {
        let s = seed.ok_or_else(|| CliError::Validation("spec has no seed and neither --seed nor DSG_SEED is set".into()))?;
        obj.insert("seed".into(), s.into());
    }
    let spec: SynthSpec = serde_json::from_value(value).map_err(|e| CliError::Validation(format!("bad spec: {e}")))?;
    spec.validate()?;
    m.seed = Some(spec.seed);
    let out = generate(&spec)?;
    let sae = out.truth.planted.planted_sae(a.theta as f32)?;
    ensure_dir(&a.out_dir)?;
    let paths = [
        a.out_dir.join("forget.dsga"),
        a.out_dir.join("retain.dsga"),
        a.out_dir.join("truth.json"),
        a.out_dir.join("planted.dsgw"),
    ];
    write_corpus(&paths[0], &out.forget)?;
    write_corpus(&paths[1], &out.retain)?;
    out.truth.write_json(&paths[2])?;
    write_weights(&paths[3], &sae)?;
    for p in &paths {
        m.output(p);
    }
    m.finish_in_dir(&a.out_dir)?;
    Ok(())
}

pub fn train_sae(a: &TrainArgs, seed: Option<u64>) -> Result<(), CliError> {
    let mut m = RunManifest::start("train-sae", a, seed)?;
    let corpus = load_corpus(&mut m, &a.corpus)?;
    let seed = seed.unwrap_or(0);
    m.seed = Some(seed);
    let mut cfg = TrainConfig::new(a.d_sae, a.lambda, a.steps, seed);
    cfg.batch_size = a.batch_size;
    cfg.learning_rate = a.learning_rate;
    let p = train_desk_sae(&corpus, &cfg)?;
    log::info!(
        "mse {:.6}, mean l0 {:.3}",
        dsg_core::sae::corpus_mse(&p, &corpus)?,
        dsg_core::sae::corpus_mean_l0(&p, &corpus)
    );
    write_weights(&a.out, &p)?;
    m.output(&a.out);
    m.finish(&a.out)?;
    Ok(())
}

pub fn stats(a: &StatsArgs, seed: Option<u64>) -> Result<(), CliError> {
    let mut m = RunManifest::start("stats", a, seed)?;
    let p = load_weights(&mut m, &a.weights)?;
    let corpus = load_corpus(&mut m, &a.corpus)?;
    let s = accumulate_stats(&p, &corpus)?;
    write_stats(&a.out, &s)?;
    m.output(&a.out);
    m.finish(&a.out)?;
    Ok(())
}

pub fn merge_stats(a: &MergeArgs, seed: Option<u64>) -> Result<(), CliError> {
    let mut m = RunManifest::start("merge-stats", a, seed)?;
    let mut acc: Option<FeatureStats> = None;
    for path in &a.inputs {
        m.input(path)?;
        let s = read_stats(path)?;
        match acc.as_mut() {
            None => acc = Some(s),
            Some(t) => t.merge_in_place(&s)?,
        }
    }
    let acc = acc.ok_or_else(|| CliError::Usage("no stats inputs".into()))?;
    write_stats(&a.out, &acc)?;
    m.output(&a.out);
    m.finish(&a.out)?;
    Ok(())
}

pub fn select(a: &SelectArgs, seed: Option<u64>) -> Result<(), CliError> {
    let mut m = RunManifest::start("select", a, seed)?;
    m.input(&a.forget_stats)?;
    m.input(&a.retain_stats)?;
    let fs = read_stats(&a.forget_stats)?;
    let rs = read_stats(&a.retain_stats)?;
    let (cfg, report) = select_config(&fs, &rs, a.p_ratio, a.n_feats, a.epsilon, a.clamp)?;
    if cfg.feature_ids.is_empty() {
        return Err(CliError::Validation("the ratio filter admitted no features".into()));
    }
    let report_bytes = match &a.report {
        Some(_) => Some(csv_bytes(|b| report.write_csv(b))?),
        None => None,
    };
    write_config(&a.out, &cfg)?;
    m.output(&a.out);
    if let (Some(path), Some(bytes)) = (&a.report, report_bytes) {
        write_atomic(path, &bytes)?;
        m.output(path);
    }
    m.finish(&a.out)?;
    Ok(())
}

pub fn calibrate(a: &CalibrateArgs, seed: Option<u64>) -> Result<(), CliError> {
    let mut m = RunManifest::start("calibrate", a, seed)?;
    let p = load_weights(&mut m, &a.weights)?;
    let cfg = load_config(&mut m, &a.config, Some(p.d_sae()))?;
    let retain = load_corpus(&mut m, &a.retain)?;
    let out = calibrate_config(&cfg, &p, &retain, a.p_dyn)?;
    write_config(&a.out, &out)?;
    m.output(&a.out);
    m.finish(&a.out)?;
    Ok(())
}

pub fn guard(a: &GuardArgs, seed: Option<u64>) -> Result<(), CliError> {
    let mut m = RunManifest::start("guard", a, seed)?;
    let p = load_weights(&mut m, &a.weights)?;
    let cfg = match &a.config {
        Some(path) => Some(load_config(&mut m, path, Some(p.d_sae()))?),
        None => None,
    };
    let features = match (&a.features_file, &cfg) {
        (Some(path), _) => {
            m.input(path)?;
            parse_feature_list(&std::fs::read_to_string(path)?)?
        }
        (None, Some(c)) => c.feature_ids.clone(),
        (None, None) => return Err(CliError::Usage("need --config or --features-file".into())),
    };
    let clamp = a
        .clamp
        .or(cfg.as_ref().map(|c| c.clamp_c))
        .unwrap_or(pipeline::DEFAULT_CLAMP);
    let options = GuardOptions {
        preserve_error: !a.no_error_term,
    };
    let guard = if a.static_mode {
        Guard::static_baseline(&p, features, clamp)?
    } else {
        let tau = a
            .tau_override
            .or(cfg.as_ref().and_then(|c| c.tau))
            .ok_or_else(|| CliError::Validation("no tau: calibrate the config or pass --tau-override".into()))?;
        Guard::from_parts(&p, features, tau, clamp)?.with_mode(GuardMode::Dynamic)
    }
    .with_options(options);
    let corpus = load_corpus(&mut m, &a.corpus)?;
    let verdicts = guard.guard_corpus(&corpus)?;
    let modified = corpus.with_blocks(&verdicts.modified_blocks())?;
    let csv = csv_bytes(|b| verdicts.write_csv(b))?;
    log::info!(
        "{} of {} sequences flagged, {} of {} tokens modified",
        verdicts.n_classified(),
        corpus.n_sequences(),
        verdicts.n_tokens_modified(),
        verdicts.n_tokens()
    );
    write_corpus(&a.out, &modified)?;
    write_atomic(&a.verdicts, &csv)?;
    m.output(&a.out);
    m.output(&a.verdicts);
    m.finish(&a.out)?;
    Ok(())
}

pub fn sequential(a: &SequentialArgs, seed: Option<u64>) -> Result<(), CliError> {
    let mut m = RunManifest::start("sequential", a, seed)?;
    let strategy = Strategy::parse(&a.strategy).map_err(|e| CliError::Usage(e.to_string()))?;
    let p = load_weights(&mut m, &a.weights)?;
    let retain = load_corpus(&mut m, &a.retain)?;
    let folds = a
        .folds
        .iter()
        .map(|f| load_corpus(&mut m, f))
        .collect::<Result<Vec<_>, _>>()?;
    let params = PipelineParams {
        p_ratio: a.p_ratio,
        n_feats: a.n_feats,
        p_dyn: a.p_dyn,
        clamp_c: a.clamp,
        epsilon: a.epsilon,
    };
    let configs = pipeline::sequential(strategy, &p, &folds, &retain, &params)?;
    ensure_dir(&a.out_dir)?;
    for (k, cfg) in configs.iter().enumerate() {
        let path = a.out_dir.join(format!("step-{}.json", k + 1));
        write_config(&path, cfg)?;
        m.output(&path);
    }
    m.finish_in_dir(&a.out_dir)?;
    Ok(())
}

pub fn sweep(a: &SweepArgs, seed: Option<u64>) -> Result<(), CliError> {
    let mut m = RunManifest::start("eval sweep", a, seed)?;
    let axis = SweepAxis::parse(&a.axis).map_err(|e| CliError::Usage(e.to_string()))?;
    let p = load_weights(&mut m, &a.weights)?;
    let forget = load_corpus(&mut m, &a.forget)?;
    let retain = load_corpus(&mut m, &a.retain)?;
    let fs = accumulate_stats(&p, &forget)?;
    let rs = accumulate_stats(&p, &retain)?;
    let base = SweepBase {
        p_ratio: a.p_ratio,
        n_feats: a.n_feats,
        p_dyn: a.p_dyn,
        clamp_c: a.clamp,
        epsilon: a.epsilon,
    };
    let result = ablation_sweep(axis, &a.grid, base, &p, &fs, &rs, &forget, &retain)?;
    let csv = csv_bytes(|b| result.write_csv(b))?;
    write_atomic(&a.out, &csv)?;
    m.output(&a.out);
    m.finish(&a.out)?;
    Ok(())
}

pub fn histogram(a: &HistogramArgs, seed: Option<u64>) -> Result<(), CliError> {
    let mut m = RunManifest::start("eval histogram", a, seed)?;
    let p = load_weights(&mut m, &a.weights)?;
    let cfg = load_config(&mut m, &a.config, Some(p.d_sae()))?;
    let mut buf = Vec::new();
    for (i, spec) in a.corpora.iter().enumerate() {
        let (tag, path) = spec
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--corpus expects tag=path, got {spec:?}")))?;
        let corpus = load_corpus(&mut m, Path::new(path))?;
        let h = rho_histogram(&p, &cfg.feature_ids, &corpus, a.bins)?;
        h.write_csv(&mut buf, tag, i == 0)?;
    }
    write_atomic(&a.out, &buf)?;
    m.output(&a.out);
    m.finish(&a.out)?;
    Ok(())
}

pub fn tvd(a: &TvdArgs, seed: Option<u64>) -> Result<(), CliError> {
    let mut m = RunManifest::start("eval tvd", a, seed)?;
    let kind = match a.stat.as_str() {
        "rho" => StatKind::Percentage,
        "raw" => StatKind::Raw,
        other => return Err(CliError::Usage(format!("--stat must be rho or raw, got {other:?}"))),
    };
    let p = load_weights(&mut m, &a.weights)?;
    let cfg = load_config(&mut m, &a.config, Some(p.d_sae()))?;
    let values = |c: &ActivationCorpus| -> dsg_core::Result<Vec<f64>> {
        Ok(sequence_rhos(&p, &cfg.feature_ids, c)?
            .iter()
            .map(|r| match kind {
                StatKind::Percentage => r.rho,
                StatKind::Raw => r.raw_count as f64,
            })
            .collect())
    };
    let ca = load_corpus(&mut m, &a.a)?;
    let cb = load_corpus(&mut m, &a.b)?;
    let seed = seed.unwrap_or(0);
    m.seed = Some(seed);
    let mut opts = TvdOptions::new(kind, format!("{} vs {}", a.a.display(), a.b.display()), seed);
    opts.bins = a.bins;
    opts.bootstrap_iters = a.iters;
    let report = tvd_compare(&values(&ca)?, &values(&cb)?, &opts)?;
    write_atomic(&a.out, &json_bytes(&report)?)?;
    m.output(&a.out);
    m.finish(&a.out)?;
    Ok(())
}

pub fn bench(a: &BenchArgs, seed: Option<u64>) -> Result<(), CliError> {
    let mut m = RunManifest::start("eval bench", a, seed)?;
    let p = load_weights(&mut m, &a.weights)?;
    let cfg = load_config(&mut m, &a.config, Some(p.d_sae()))?;
    let corpus = load_corpus(&mut m, &a.corpus)?;
    let guard = Guard::new(&p, &cfg)?;
    let report = latency_bench(&guard, &corpus, a.repeats)?;
    write_atomic(&a.out, &json_bytes(&report)?)?;
    m.output(&a.out);
    m.finish(&a.out)?;
    Ok(())
}
