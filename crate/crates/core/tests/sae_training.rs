use dsg_core::sae::{corpus_mean_l0, corpus_mse, init_params, train_desk_sae, TrainConfig};
use dsg_core::synth::{generate, SynthSpec};
use dsg_core::ActivationCorpus;

fn planted_corpus() -> (ActivationCorpus, Vec<Vec<f64>>) {
    let spec = SynthSpec {
        d_model: 8,
        d_sae_true: 4,
        forget_feature_ids: vec![],
        p_fire_forget: 0.0,
        p_fire_retain: 0.0,
        p_fire_background: 0.3,
        seq_len: (16, 32),
        n_sequences: 80,
        noise_sigma: 0.01,
        seed: 17,
    };
    let out = generate(&spec).unwrap();
    let dirs = out.truth.planted.basis[..4].to_vec();
    (ActivationCorpus::concat([&out.forget, &out.retain]).unwrap(), dirs)
}

fn cosine(a: &[f32], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| f64::from(*x) * y).sum();
    let na = a.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    let nb = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[test]
fn planted_dictionary_is_recovered() {
    let (corpus, dirs) = planted_corpus();
    // a little sparsity pressure picks the planted basis out of all exact ones
    let cfg = TrainConfig::new(8, 0.05, 3000, 3);
    let init = init_params(8, 8, 3).unwrap();
    let before = corpus_mse(&init, &corpus).unwrap();
    let trained = train_desk_sae(&corpus, &cfg).unwrap();
    let after = corpus_mse(&trained, &corpus).unwrap();
    assert!(after <= 0.1 * before, "mse {before} -> {after}");
    for (k, d) in dirs.iter().enumerate() {
        let best = (0..8)
            .map(|j| cosine(trained.decoder_row(j), d))
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(best >= 0.9, "planted direction {k} best cosine {best}");
    }
}

#[test]
fn sparsity_penalty_lowers_l0() {
    let (corpus, _) = planted_corpus();
    let free = train_desk_sae(&corpus, &TrainConfig::new(8, 0.0, 1500, 5)).unwrap();
    let sparse = train_desk_sae(&corpus, &TrainConfig::new(8, 0.5, 1500, 5)).unwrap();
    let (l_free, l_sparse) = (corpus_mean_l0(&free, &corpus), corpus_mean_l0(&sparse, &corpus));
    assert!(l_free >= l_sparse);
    assert!(corpus_mse(&free, &corpus).unwrap() < corpus_mse(&init_params(8, 8, 5).unwrap(), &corpus).unwrap());
}
