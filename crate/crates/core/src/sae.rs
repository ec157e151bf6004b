//! JumpReLU sparse autoencoder.
//!
//! `f(h) = z · 1[z > θ]` with `z = W_enc h + b_enc`, and `ĥ(f) = fᵀ W_dec + b_dec`.
//! Weights are stored as `f32` (the on-disk precision); every forward pass and
//! every reduction runs in `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::corpus_io::ActivationCorpus;
use crate::error::{DsgError, Result};
use crate::matrix::Matrix;

/// Token-major hidden states, `T × d_model`.
pub type HiddenBlock = Matrix;
/// Token-major feature activations, `T × d_sae`.
pub type FeatureBlock = Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct SaeParams {
    d_model: usize,
    d_sae: usize,
    /// `d_sae × d_model`, row `j` is the encoder for feature `j`.
    w_enc: Vec<f32>,
    b_enc: Vec<f32>,
    /// `d_sae × d_model`, row `j` is the direction written by feature `j`.
    w_dec: Vec<f32>,
    b_dec: Vec<f32>,
    jump_theta: Vec<f32>,
}

impl SaeParams {
    pub fn new(
        d_model: usize,
        d_sae: usize,
        w_enc: Vec<f32>,
        b_enc: Vec<f32>,
        w_dec: Vec<f32>,
        b_dec: Vec<f32>,
        jump_theta: Vec<f32>,
    ) -> Result<Self> {
        if d_model == 0 || d_sae == 0 {
            return Err(DsgError::invalid("d_model and d_sae must be positive"));
        }
        if d_sae < d_model {
            return Err(DsgError::invalid(format!(
                "dictionary width {d_sae} is narrower than d_model {d_model}"
            )));
        }
        let check = |context: &'static str, v: &[f32], expected: usize| {
            if v.len() != expected {
                return Err(DsgError::DimensionMismatch {
                    context,
                    expected,
                    found: v.len(),
                });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(DsgError::invalid(format!("{context} has non-finite entries")));
            }
            Ok(())
        };
        check("w_enc", &w_enc, d_sae * d_model)?;
        check("b_enc", &b_enc, d_sae)?;
        check("w_dec", &w_dec, d_sae * d_model)?;
        check("b_dec", &b_dec, d_model)?;
        check("jump_theta", &jump_theta, d_sae)?;
        if let Some(j) = jump_theta.iter().position(|&t| t < 0.0) {
            return Err(DsgError::invalid(format!("jump_theta[{j}] is negative")));
        }
        Ok(SaeParams {
            d_model,
            d_sae,
            w_enc,
            b_enc,
            w_dec,
            b_dec,
            jump_theta,
        })
    }

    /// Square identity encoder/decoder with zero biases and thresholds; it
    /// reconstructs every input whose coordinates are nonnegative.
    pub fn identity(d: usize) -> Self {
        let mut eye = vec![0.0f32; d * d];
        for i in 0..d {
            eye[i * d + i] = 1.0;
        }
        SaeParams::new(d, d, eye.clone(), vec![0.0; d], eye, vec![0.0; d], vec![0.0; d])
            .expect("identity params are well formed")
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }
    pub fn d_sae(&self) -> usize {
        self.d_sae
    }
    pub fn w_enc(&self) -> &[f32] {
        &self.w_enc
    }
    pub fn b_enc(&self) -> &[f32] {
        &self.b_enc
    }
    pub fn w_dec(&self) -> &[f32] {
        &self.w_dec
    }
    pub fn b_dec(&self) -> &[f32] {
        &self.b_dec
    }
    pub fn jump_theta(&self) -> &[f32] {
        &self.jump_theta
    }

    pub fn encoder_row(&self, j: usize) -> &[f32] {
        &self.w_enc[j * self.d_model..(j + 1) * self.d_model]
    }

    pub fn decoder_row(&self, j: usize) -> &[f32] {
        &self.w_dec[j * self.d_model..(j + 1) * self.d_model]
    }

    /// Pre-activation `z_j` for one hidden row.
    #[inline]
    pub fn pre_activation(&self, j: usize, h: &[f64]) -> f64 {
        let w = self.encoder_row(j);
        let mut acc = f64::from(self.b_enc[j]);
        for (wi, hi) in w.iter().zip(h) {
            acc += f64::from(*wi) * hi;
        }
        acc
    }

    /// JumpReLU activation of feature `j` on one hidden row.
    #[inline]
    pub fn activation(&self, j: usize, h: &[f64]) -> f64 {
        let z = self.pre_activation(j, h);
        if z > f64::from(self.jump_theta[j]) {
            z
        } else {
            0.0
        }
    }

    pub fn encode_row(&self, h: &[f64], out: &mut [f64]) {
        for (j, o) in out.iter_mut().enumerate() {
            *o = self.activation(j, h);
        }
    }

    pub fn decode_row(&self, f: &[f64], out: &mut [f64]) {
        for (o, b) in out.iter_mut().zip(&self.b_dec) {
            *o = f64::from(*b);
        }
        for (j, &fj) in f.iter().enumerate() {
            if fj == 0.0 {
                continue;
            }
            for (o, w) in out.iter_mut().zip(self.decoder_row(j)) {
                *o += fj * f64::from(*w);
            }
        }
    }

    fn check_width(&self, context: &'static str, expected: usize, found: usize) -> Result<()> {
        if expected != found {
            return Err(DsgError::DimensionMismatch {
                context,
                expected,
                found,
            });
        }
        Ok(())
    }
}

pub fn encode(p: &SaeParams, h: &HiddenBlock) -> Result<FeatureBlock> {
    p.check_width("encode input", p.d_model, h.cols())?;
    let mut out = Matrix::zeros(h.rows(), p.d_sae);
    for t in 0..h.rows() {
        p.encode_row(h.row(t), out.row_mut(t));
    }
    Ok(out)
}

pub fn decode(p: &SaeParams, f: &FeatureBlock) -> Result<HiddenBlock> {
    p.check_width("decode input", p.d_sae, f.cols())?;
    let mut out = Matrix::zeros(f.rows(), p.d_model);
    for t in 0..f.rows() {
        p.decode_row(f.row(t), out.row_mut(t));
    }
    Ok(out)
}

/// Returns `h − ĥ(f(h))` per token and the mean over tokens of `‖h − ĥ‖²`.
pub fn reconstruction_error(p: &SaeParams, h: &HiddenBlock) -> Result<(HiddenBlock, f64)> {
    let recon = decode(p, &encode(p, h)?)?;
    let mut err = Matrix::zeros(h.rows(), h.cols());
    let mut total = 0.0;
    for t in 0..h.rows() {
        let e = err.row_mut(t);
        for ((ei, hi), ri) in e.iter_mut().zip(h.row(t)).zip(recon.row(t)) {
            *ei = hi - ri;
            total += *ei * *ei;
        }
    }
    let mse = if h.rows() == 0 {
        0.0
    } else {
        total / h.rows() as f64
    };
    Ok((err, mse))
}

/// Gradient of `½‖ĥ − h‖²` with respect to every decoder row: row `j` is
/// `f_j(h) · (ĥ − h)`.
pub fn decoder_row_gradient(p: &SaeParams, h: &[f64]) -> Result<Matrix> {
    p.check_width("gradient input", p.d_model, h.len())?;
    let mut f = vec![0.0; p.d_sae];
    p.encode_row(h, &mut f);
    let mut recon = vec![0.0; p.d_model];
    p.decode_row(&f, &mut recon);
    let resid: Vec<f64> = recon.iter().zip(h).map(|(r, x)| r - x).collect();
    let mut grad = Matrix::zeros(p.d_sae, p.d_model);
    for (j, &fj) in f.iter().enumerate() {
        if fj == 0.0 {
            continue;
        }
        for (g, r) in grad.row_mut(j).iter_mut().zip(&resid) {
            *g = fj * r;
        }
    }
    Ok(grad)
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub d_sae: usize,
    /// Weight on the relaxed `‖f‖₀` penalty.
    pub lambda: f64,
    pub steps: usize,
    pub seed: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Width of the rectangle kernel used as the pseudo-derivative of the
    /// Heaviside gate.
    pub kernel_width: f64,
}

impl TrainConfig {
    pub fn new(d_sae: usize, lambda: f64, steps: usize, seed: u64) -> Self {
        TrainConfig {
            d_sae,
            lambda,
            steps,
            seed,
            batch_size: 64,
            learning_rate: 5e-3,
            kernel_width: 0.1,
        }
    }
}

/// Seeded warm start: unit-norm decoder rows, encoder equal to the decoder
/// transpose, zero biases and thresholds.
pub fn init_params(d_model: usize, d_sae: usize, seed: u64) -> Result<SaeParams> {
    if d_sae < d_model {
        return Err(DsgError::invalid(format!(
            "dictionary width {d_sae} is narrower than d_model {d_model}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w_dec = Vec::with_capacity(d_sae * d_model);
    for _ in 0..d_sae {
        w_dec.extend(unit_vector(&mut rng, d_model).into_iter().map(|v| v as f32));
    }
    SaeParams::new(
        d_model,
        d_sae,
        w_dec.clone(),
        vec![0.0; d_sae],
        w_dec,
        vec![0.0; d_model],
        vec![0.0; d_sae],
    )
}

pub(crate) fn unit_vector<R: Rng>(rng: &mut R, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Adam moments for one parameter tensor.
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Moments {
    fn new(n: usize) -> Self {
        Moments {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    fn step(&mut self, param: &mut [f64], grad: &[f64], lr: f64, t: i32) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        let c1 = 1.0 - B1.powi(t);
        let c2 = 1.0 - B2.powi(t);
        for i in 0..param.len() {
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * grad[i];
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * grad[i] * grad[i];
            param[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + 1e-8);
        }
    }
}

struct Working {
    d_model: usize,
    d_sae: usize,
    w_enc: Vec<f64>,
    b_enc: Vec<f64>,
    w_dec: Vec<f64>,
    b_dec: Vec<f64>,
    theta: Vec<f64>,
}

impl Working {
    fn from_params(p: &SaeParams) -> Self {
        let widen = |v: &[f32]| v.iter().map(|&x| f64::from(x)).collect::<Vec<_>>();
        Working {
            d_model: p.d_model,
            d_sae: p.d_sae,
            w_enc: widen(&p.w_enc),
            b_enc: widen(&p.b_enc),
            w_dec: widen(&p.w_dec),
            b_dec: widen(&p.b_dec),
            theta: widen(&p.jump_theta),
        }
    }

    fn into_params(self) -> Result<SaeParams> {
        let narrow = |v: Vec<f64>| v.into_iter().map(|x| x as f32).collect::<Vec<_>>();
        SaeParams::new(
            self.d_model,
            self.d_sae,
            narrow(self.w_enc),
            narrow(self.b_enc),
            narrow(self.w_dec),
            narrow(self.b_dec),
            narrow(self.theta),
        )
    }
}

#[derive(Default)]
struct Grads {
    w_enc: Vec<f64>,
    b_enc: Vec<f64>,
    w_dec: Vec<f64>,
    b_dec: Vec<f64>,
    theta: Vec<f64>,
}

/// Trains a small JumpReLU SAE on `L = ‖h − ĥ‖² + λ‖f‖₀` with Adam.
///
/// The Heaviside gate is handled with a straight-through estimator: active
/// features pass gradient to their pre-activation, the `‖f‖₀` term adds `λ`
/// on each active pre-activation, and thresholds receive the rectangle-kernel
/// pseudo-derivative of both terms.
pub fn train_desk_sae(corpus: &ActivationCorpus, cfg: &TrainConfig) -> Result<SaeParams> {
    if corpus.n_tokens() == 0 {
        return Err(DsgError::Empty("training corpus"));
    }
    if cfg.batch_size == 0 {
        return Err(DsgError::invalid("batch_size must be positive"));
    }
    let d_model = corpus.d_model();
    let d_sae = cfg.d_sae;
    let init = init_params(d_model, d_sae, cfg.seed)?;
    if cfg.steps == 0 {
        return Ok(init);
    }
    let mut w = Working::from_params(&init);
    let mut mom = [
        Moments::new(d_sae * d_model),
        Moments::new(d_sae),
        Moments::new(d_sae * d_model),
        Moments::new(d_model),
        Moments::new(d_sae),
    ];
    // Stream 1 keeps batch order independent of the initialization draw.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let n_tokens = corpus.n_tokens();
    let eps = cfg.kernel_width;

    let mut h = vec![0.0; d_model];
    let mut z = vec![0.0; d_sae];
    let mut f = vec![0.0; d_sae];
    let mut r = vec![0.0; d_model];
    for step in 0..cfg.steps {
        let mut g = Grads {
            w_enc: vec![0.0; d_sae * d_model],
            b_enc: vec![0.0; d_sae],
            w_dec: vec![0.0; d_sae * d_model],
            b_dec: vec![0.0; d_model],
            theta: vec![0.0; d_sae],
        };
        let mut loss = 0.0;
        for _ in 0..cfg.batch_size {
            let t = rng.random_range(0..n_tokens);
            for (hi, &x) in h.iter_mut().zip(corpus.token_row(t)) {
                *hi = f64::from(x);
            }
            for j in 0..d_sae {
                let row = &w.w_enc[j * d_model..(j + 1) * d_model];
                z[j] = w.b_enc[j] + row.iter().zip(&h).map(|(a, b)| a * b).sum::<f64>();
                f[j] = if z[j] > w.theta[j] { z[j] } else { 0.0 };
            }
            r.copy_from_slice(&w.b_dec);
            for j in 0..d_sae {
                if f[j] != 0.0 {
                    let row = &w.w_dec[j * d_model..(j + 1) * d_model];
                    for (ri, wi) in r.iter_mut().zip(row) {
                        *ri += f[j] * wi;
                    }
                }
            }
            for (ri, hi) in r.iter_mut().zip(&h) {
                *ri -= hi;
            }
            let active = f.iter().filter(|&&v| v != 0.0).count();
            loss += r.iter().map(|v| v * v).sum::<f64>() + cfg.lambda * active as f64;

            for (gb, ri) in g.b_dec.iter_mut().zip(&r) {
                *gb += 2.0 * ri;
            }
            for j in 0..d_sae {
                let dec = &w.w_dec[j * d_model..(j + 1) * d_model];
                let g_f = 2.0 * dec.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>();
                if f[j] != 0.0 {
                    for (gd, ri) in g.w_dec[j * d_model..(j + 1) * d_model].iter_mut().zip(&r) {
                        *gd += 2.0 * f[j] * ri;
                    }
                    let g_z = g_f + cfg.lambda;
                    for (ge, hi) in g.w_enc[j * d_model..(j + 1) * d_model].iter_mut().zip(&h) {
                        *ge += g_z * hi;
                    }
                    g.b_enc[j] += g_z;
                }
                if ((z[j] - w.theta[j]) / eps).abs() < 0.5 {
                    // d f/dθ ≈ −(θ/ε)K, d 1[z>θ]/dθ ≈ −K/ε
                    g.theta[j] += -(w.theta[j] / eps) * g_f - cfg.lambda / eps;
                }
            }
        }
        let scale = 1.0 / cfg.batch_size as f64;
        loss *= scale;
        if !loss.is_finite() {
            return Err(DsgError::TrainingDiverged { step, loss });
        }
        for v in [
            &mut g.w_enc,
            &mut g.b_enc,
            &mut g.w_dec,
            &mut g.b_dec,
            &mut g.theta,
        ] {
            v.iter_mut().for_each(|x| *x *= scale);
        }
        let t = (step + 1) as i32;
        let lr = cfg.learning_rate;
        mom[0].step(&mut w.w_enc, &g.w_enc, lr, t);
        mom[1].step(&mut w.b_enc, &g.b_enc, lr, t);
        mom[2].step(&mut w.w_dec, &g.w_dec, lr, t);
        mom[3].step(&mut w.b_dec, &g.b_dec, lr, t);
        mom[4].step(&mut w.theta, &g.theta, lr, t);
        w.theta.iter_mut().for_each(|th| *th = th.max(0.0));
        if w
            .w_enc
            .iter()
            .chain(&w.w_dec)
            .chain(&w.b_enc)
            .chain(&w.b_dec)
            .any(|x| !x.is_finite())
        {
            return Err(DsgError::TrainingDiverged {
                step,
                loss: f64::NAN,
            });
        }
    }
    w.into_params()
}

/// Mean `‖h − ĥ‖²` over every token of a corpus.
pub fn corpus_mse(p: &SaeParams, corpus: &ActivationCorpus) -> Result<f64> {
    if corpus.d_model() != p.d_model {
        return Err(DsgError::DimensionMismatch {
            context: "corpus width",
            expected: p.d_model,
            found: corpus.d_model(),
        });
    }
    let mut h = vec![0.0; p.d_model];
    let mut f = vec![0.0; p.d_sae];
    let mut r = vec![0.0; p.d_model];
    let mut total = 0.0;
    for t in 0..corpus.n_tokens() {
        for (hi, &x) in h.iter_mut().zip(corpus.token_row(t)) {
            *hi = f64::from(x);
        }
        p.encode_row(&h, &mut f);
        p.decode_row(&f, &mut r);
        total += r.iter().zip(&h).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok(total / corpus.n_tokens().max(1) as f64)
}

/// Mean number of active features per token.
pub fn corpus_mean_l0(p: &SaeParams, corpus: &ActivationCorpus) -> f64 {
    let mut h = vec![0.0; p.d_model];
    let mut f = vec![0.0; p.d_sae];
    let mut count = 0usize;
    for t in 0..corpus.n_tokens() {
        for (hi, &x) in h.iter_mut().zip(corpus.token_row(t)) {
            *hi = f64::from(x);
        }
        p.encode_row(&h, &mut f);
        count += f.iter().filter(|&&v| v != 0.0).count();
    }
    count as f64 / corpus.n_tokens().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_params(d_model: usize, d_sae: usize, seed: u64) -> SaeParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = |n: usize| -> Vec<f32> {
            (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()
        };
        let w_enc = v(d_sae * d_model);
        let b_enc = v(d_sae);
        let w_dec = v(d_sae * d_model);
        let b_dec = v(d_model);
        let theta = v(d_sae).into_iter().map(|x| x.abs() * 0.2).collect();
        SaeParams::new(d_model, d_sae, w_enc, b_enc, w_dec, b_dec, theta).unwrap()
    }

    fn random_block(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    // Straight-line forward used as an independent oracle.
    fn oracle_encode(p: &SaeParams, h: &Matrix) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; p.d_sae()]; h.rows()];
        for t in 0..h.rows() {
            for j in 0..p.d_sae() {
                let mut z = p.b_enc()[j] as f64;
                for i in 0..p.d_model() {
                    z += p.w_enc()[j * p.d_model() + i] as f64 * h.get(t, i);
                }
                out[t][j] = if z > p.jump_theta()[j] as f64 { z } else { 0.0 };
            }
        }
        out
    }

    fn oracle_decode(p: &SaeParams, f: &Matrix) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; p.d_model()]; f.rows()];
        for t in 0..f.rows() {
            for i in 0..p.d_model() {
                let mut acc = p.b_dec()[i] as f64;
                for j in 0..p.d_sae() {
                    acc += f.get(t, j) * p.w_dec()[j * p.d_model() + i] as f64;
                }
                out[t][i] = acc;
            }
        }
        out
    }

    #[test]
    fn identity_encoder_gates_negative_preactivation() {
        let p = SaeParams::identity(2);
        let h = Matrix::from_rows(&[[0.5, -0.3]]).unwrap();
        let f = encode(&p, &h).unwrap();
        assert_eq!(f.row(0), &[0.5, 0.0]);
    }

    #[test]
    fn jump_threshold_gates_subthreshold() {
        let eye = vec![1.0, 0.0, 0.0, 1.0];
        let p = SaeParams::new(2, 2, eye.clone(), vec![0.0; 2], eye, vec![0.0; 2], vec![0.6, 0.0])
            .unwrap();
        let h = Matrix::from_rows(&[[0.5, 0.7]]).unwrap();
        let f = encode(&p, &h).unwrap();
        assert_eq!(f.row(0)[0], 0.0);
        assert!((f.row(0)[1] - 0.7).abs() < 1e-7);
    }

    #[test]
    fn encode_matches_straight_line_oracle() {
        let p = random_params(3, 4, 11);
        let h = random_block(5, 3, 12);
        let f = encode(&p, &h).unwrap();
        let want = oracle_encode(&p, &h);
        for t in 0..5 {
            for j in 0..4 {
                assert!((f.get(t, j) - want[t][j]).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn decode_zero_code_is_bias_and_unit_code_is_row() {
        let mut p = random_params(3, 4, 5);
        let f = Matrix::zeros(2, 4);
        let out = decode(&p, &f).unwrap();
        for t in 0..2 {
            for i in 0..3 {
                assert_eq!(out.get(t, i), p.b_dec()[i] as f64);
            }
        }
        p.b_dec = vec![0.0; 3];
        let mut f = Matrix::zeros(1, 4);
        f.set(0, 2, 1.0);
        let out = decode(&p, &f).unwrap();
        for i in 0..3 {
            assert_eq!(out.get(0, i), p.decoder_row(2)[i] as f64);
        }
    }

    #[test]
    fn decode_matches_straight_line_oracle() {
        let p = random_params(3, 4, 21);
        let mut f = random_block(6, 4, 22);
        for t in 0..6 {
            for j in 0..4 {
                f.set(t, j, f.get(t, j).abs());
            }
        }
        let out = decode(&p, &f).unwrap();
        let want = oracle_decode(&p, &f);
        for t in 0..6 {
            for i in 0..3 {
                assert!((out.get(t, i) - want[t][i]).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let p = SaeParams::identity(3);
        assert!(matches!(
            encode(&p, &Matrix::zeros(1, 2)),
            Err(DsgError::DimensionMismatch { .. })
        ));
        assert!(matches!(
            decode(&p, &Matrix::zeros(1, 4)),
            Err(DsgError::DimensionMismatch { .. })
        ));
        assert!(decoder_row_gradient(&p, &[0.0; 2]).is_err());
    }

    #[test]
    fn params_validation() {
        assert!(SaeParams::new(2, 2, vec![0.0; 4], vec![0.0; 2], vec![0.0; 4], vec![0.0; 2], vec![-0.1, 0.0]).is_err());
        assert!(SaeParams::new(2, 2, vec![f32::NAN; 4], vec![0.0; 2], vec![0.0; 4], vec![0.0; 2], vec![0.0; 2]).is_err());
        assert!(SaeParams::new(3, 2, vec![0.0; 6], vec![0.0; 2], vec![0.0; 6], vec![0.0; 3], vec![0.0; 2]).is_err());
        assert!(SaeParams::new(2, 2, vec![0.0; 3], vec![0.0; 2], vec![0.0; 4], vec![0.0; 2], vec![0.0; 2]).is_err());
    }

    #[test]
    fn perfect_reconstruction_has_zero_error_and_gradient() {
        let p = SaeParams::identity(3);
        let h = Matrix::from_rows(&[[0.1, 0.2, 0.3], [1.0, 0.0, 2.0]]).unwrap();
        let (err, mse) = reconstruction_error(&p, &h).unwrap();
        assert!(err.as_slice().iter().all(|&e| e == 0.0));
        assert_eq!(mse, 0.0);
        let g = decoder_row_gradient(&p, h.row(0)).unwrap();
        assert!(g.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn bias_absorbs_input_when_codes_are_gated() {
        // Encoder pushes everything below threshold, decoder bias equals input.
        let p = SaeParams::new(
            2,
            2,
            vec![0.0; 4],
            vec![-1.0, -1.0],
            vec![1.0, 0.0, 0.0, 1.0],
            vec![0.25, -0.5],
            vec![0.0; 2],
        )
        .unwrap();
        let h = Matrix::from_rows(&[[0.25, -0.5], [0.25, -0.5]]).unwrap();
        let (err, mse) = reconstruction_error(&p, &h).unwrap();
        assert!(err.as_slice().iter().all(|&e| e == 0.0));
        assert_eq!(mse, 0.0);
    }

    #[test]
    fn reconstruction_mse_matches_direct_recomputation() {
        let p = random_params(4, 6, 31);
        let h = random_block(7, 4, 32);
        let (_, mse) = reconstruction_error(&p, &h).unwrap();
        let f = oracle_encode(&p, &h);
        let fm = Matrix::from_rows(&f).unwrap();
        let r = oracle_decode(&p, &fm);
        let mut total = 0.0;
        for t in 0..7 {
            for i in 0..4 {
                total += (h.get(t, i) - r[t][i]).powi(2);
            }
        }
        assert!((mse - total / 7.0).abs() <= 1e-6);
    }

    #[test]
    fn inactive_feature_has_zero_gradient_row() {
        let p = random_params(4, 6, 41);
        let h = random_block(1, 4, 42);
        let g = decoder_row_gradient(&p, h.row(0)).unwrap();
        let mut f = vec![0.0; 6];
        p.encode_row(h.row(0), &mut f);
        for j in 0..6 {
            if f[j] == 0.0 {
                assert!(g.row(j).iter().all(|&x| x == 0.0));
            }
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let p = random_params(4, 6, 51);
        let h = random_block(1, 4, 52);
        let h = h.row(0);
        let g = decoder_row_gradient(&p, h).unwrap();
        let loss = |w_dec: &[f64]| {
            let mut f = vec![0.0; 6];
            p.encode_row(h, &mut f);
            let mut total = 0.0;
            for i in 0..4 {
                let mut r = p.b_dec()[i] as f64;
                for j in 0..6 {
                    r += f[j] * w_dec[j * 4 + i];
                }
                total += (r - h[i]).powi(2);
            }
            0.5 * total
        };
        let base: Vec<f64> = p.w_dec().iter().map(|&x| x as f64).collect();
        let step = 1e-4;
        for j in 0..6 {
            let mut fd = vec![0.0; 4];
            for i in 0..4 {
                let mut plus = base.clone();
                plus[j * 4 + i] += step;
                let mut minus = base.clone();
                minus[j * 4 + i] -= step;
                fd[i] = (loss(&plus) - loss(&minus)) / (2.0 * step);
            }
            let diff: f64 = fd.iter().zip(g.row(j)).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let scale = g.row(j).iter().map(|x| x * x).sum::<f64>().sqrt();
            if scale > 0.0 {
                assert!(diff / scale <= 1e-3, "row {j}: rel {}", diff / scale);
            } else {
                assert!(diff < 1e-9);
            }
        }
    }

    #[test]
    fn forward_passes_are_deterministic() {
        let p = random_params(4, 6, 61);
        let h = random_block(9, 4, 62);
        let a = encode(&p, &h).unwrap();
        let b = encode(&p, &h).unwrap();
        assert!(a.bit_eq(&b));
        assert!(decode(&p, &a).unwrap().bit_eq(&decode(&p, &b).unwrap()));
    }

    #[test]
    fn zero_steps_returns_seeded_init() {
        let corpus = ActivationCorpus::from_sequences(2, vec![("a".into(), vec![1.0, 2.0, 3.0, 4.0])]).unwrap();
        let trained = train_desk_sae(&corpus, &TrainConfig::new(4, 0.0, 0, 9)).unwrap();
        assert_eq!(trained, init_params(2, 4, 9).unwrap());
        for j in 0..4 {
            let n: f64 = trained.decoder_row(j).iter().map(|&x| (x as f64).powi(2)).sum();
            assert!((n - 1.0).abs() < 1e-6);
            assert_eq!(trained.decoder_row(j), trained.encoder_row(j));
        }
    }

    #[test]
    fn empty_corpus_rejected() {
        let corpus = ActivationCorpus::from_sequences(2, vec![]).unwrap();
        assert!(matches!(
            train_desk_sae(&corpus, &TrainConfig::new(4, 0.0, 10, 1)),
            Err(DsgError::Empty(_))
        ));
    }

    #[test]
    fn divergence_is_reported_with_step() {
        let corpus = ActivationCorpus::from_sequences(2, vec![("a".into(), vec![1e30, 1e30])]).unwrap();
        let mut cfg = TrainConfig::new(2, 0.0, 5, 1);
        cfg.learning_rate = 1e300;
        match train_desk_sae(&corpus, &cfg) {
            Err(DsgError::TrainingDiverged { step, .. }) => assert!(step < 5),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
